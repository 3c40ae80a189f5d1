//! Episode scoring (SR, PE, SPL, RSR, SSR), mask IoU, Rouge-L and the
//! per-difficulty-cell report.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ScenarioSet;
use crate::episode::{EpisodeRecord, SUCCESS_IOU};
use crate::localization::LocalizationScores;
use crate::mask::Mask;
use crate::reasoning::EmbeddingProvider;
use crate::scene::Difficulty;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records")]
    EmptyInput,
    #[error("masks differ in size: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("record {episode_key} lacks {field}")]
    MissingFields { episode_key: String, field: &'static str },
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    if !a.same_size(b) {
        return Err(MetricsError::DimensionMismatch { a: (a.height(), a.width()), b: (b.height(), b.width()) });
    }
    let union = a.union_area(b);
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_area(b) as f64 / union as f64)
}

/// What SR, PE and SPL need from an episode.
pub trait EpisodeOutcome {
    fn success(&self) -> bool;
    /// Minimal steps at episode start.
    fn l(&self) -> usize;
    /// Steps taken.
    fn p(&self) -> usize;
}

impl EpisodeOutcome for EpisodeRecord {
    fn success(&self) -> bool {
        self.success
    }

    fn l(&self) -> usize {
        self.l
    }

    fn p(&self) -> usize {
        self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSample {
    pub success: bool,
    pub l: usize,
    pub p: usize,
}

impl EpisodeOutcome for PathSample {
    fn success(&self) -> bool {
        self.success
    }

    fn l(&self) -> usize {
        self.l
    }

    fn p(&self) -> usize {
        self.p
    }
}

fn ratio<R: EpisodeOutcome>(r: &R) -> f64 {
    if r.p() == 0 {
        0.0
    } else {
        r.l() as f64 / r.p() as f64
    }
}

pub fn success_rate<R: EpisodeOutcome>(records: &[R]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(records.iter().filter(|r| r.success()).count() as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathEfficiency {
    pub value: f64,
    /// No successes: `value` is 0 by convention.
    pub undefined: bool,
}

/// Mean `l / p` over successful episodes.
pub fn path_efficiency<R: EpisodeOutcome>(records: &[R]) -> PathEfficiency {
    let succ: Vec<f64> = records.iter().filter(|r| r.success()).map(ratio).collect();
    if succ.is_empty() {
        return PathEfficiency { value: 0.0, undefined: true };
    }
    PathEfficiency { value: succ.iter().sum::<f64>() / succ.len() as f64, undefined: false }
}

/// `(1/N) Σ S_i l_i / p_i`
pub fn spl<R: EpisodeOutcome>(records: &[R]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let total: f64 = records.iter().filter(|r| r.success()).map(ratio).sum();
    Ok(total / records.len() as f64)
}

fn first_step_checked(r: &EpisodeRecord) -> Result<Option<&crate::episode::StepOutcome>, MetricsError> {
    let missing = |field| MetricsError::MissingFields { episode_key: r.episode_key.clone(), field };
    match r.steps.first() {
        // error records never reached a decision
        None if r.error.is_some() => Ok(None),
        None => Err(missing("steps")),
        Some(s) if s.gt_valid_set.is_empty() => Err(missing("gt_valid_set")),
        Some(s) => Ok(Some(s)),
    }
}

/// Share of episodes whose first decided object was a valid pick.
pub fn rsr(records: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut hits = 0;
    for r in records {
        if let Some(s) = first_step_checked(r)? {
            if s.decision.is_some() && s.decided_object.is_some_and(|id| s.gt_valid_set.contains(&id)) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Share of episodes whose first predicted mask reaches IoU 0.5 with a
/// valid pick.
pub fn ssr(records: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut hits = 0;
    for r in records {
        if let Some(s) = first_step_checked(r)? {
            if s.predicted_mask.is_some() && s.best_valid_iou.is_some_and(|iou| iou >= SUCCESS_IOU) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure over lowercase whitespace tokens; `a` is the reference.
pub fn rouge_l(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&ta, &tb) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let precision = l / tb.len() as f64;
    let recall = l / ta.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd { mean, std: var.sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub episodes: usize,
    pub sr: f64,
    pub pe: f64,
    pub spl: f64,
    pub rsr: f64,
    pub ssr: f64,
    pub pe_undefined: bool,
}

pub fn scores(records: &[EpisodeRecord]) -> Result<Scores, MetricsError> {
    let pe = path_efficiency(records);
    Ok(Scores {
        episodes: records.len(),
        sr: success_rate(records)?,
        pe: pe.value,
        spl: spl(records)?,
        rsr: rsr(records)?,
        ssr: ssr(records)?,
        pe_undefined: pe.undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// All of the cell's episodes pooled.
    pub pooled: Scores,
    /// Computed per instruction index, then averaged across indices.
    pub sr: MeanStd,
    pub pe: MeanStd,
    pub spl: MeanStd,
    pub rsr: MeanStd,
    pub ssr: MeanStd,
    pub per_instruction: BTreeMap<usize, Scores>,
}

impl CellReport {
    fn from_records(records: &[&EpisodeRecord]) -> Result<Self, MetricsError> {
        let owned: Vec<EpisodeRecord> = records.iter().map(|r| (*r).clone()).collect();
        let pooled = scores(&owned)?;
        let mut by_index: BTreeMap<usize, Vec<EpisodeRecord>> = BTreeMap::new();
        for r in owned {
            by_index.entry(r.instruction_index).or_default().push(r);
        }
        let mut per_instruction = BTreeMap::new();
        for (i, recs) in &by_index {
            per_instruction.insert(*i, scores(recs)?);
        }
        let col = |f: fn(&Scores) -> f64| {
            mean_std(&per_instruction.values().map(f).collect::<Vec<_>>()).expect("at least one index")
        };
        Ok(Self {
            pooled,
            sr: col(|s| s.sr),
            pe: col(|s| s.pe),
            spl: col(|s| s.spl),
            rsr: col(|s| s.rsr),
            ssr: col(|s| s.ssr),
            per_instruction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstructionStats {
    pub gpt_score_mean: Option<f64>,
    /// Counts of per-scenario GPT scores 0, 1/3, 2/3 and 1.
    pub gpt_score_histogram: Option<[usize; 4]>,
    pub embedding_mean: Option<f64>,
    pub rouge_l_mean: Option<f64>,
}

/// Optional inputs for instruction statistics.
#[derive(Default)]
pub struct InstructionInputs<'a> {
    pub gpt_scores: Vec<f64>,
    pub embeddings: Option<&'a dyn EmbeddingProvider>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Keyed by [`Difficulty::key`]; cells without records are absent.
    pub cells: BTreeMap<String, CellReport>,
    pub overall: CellReport,
    pub localization: LocalizationScores,
    pub instructions: InstructionStats,
    pub flags: Vec<String>,
}

/// Mean pairwise Rouge-L over each scenario's instructions.
pub fn instruction_rouge_l(set: &ScenarioSet) -> Option<f64> {
    let mut vals = Vec::new();
    for s in &set.scenarios {
        for i in 0..s.instructions.len() {
            for j in i + 1..s.instructions.len() {
                vals.push(rouge_l(&s.instructions[i], &s.instructions[j]));
            }
        }
    }
    mean_std(&vals).map(|m| m.mean)
}

/// Mean over scenarios of the mean pairwise cosine of instruction vectors.
pub fn instruction_embedding_score(set: &ScenarioSet, provider: &dyn EmbeddingProvider) -> Result<Option<f64>, String> {
    let mut per_scenario = Vec::new();
    for s in &set.scenarios {
        let vecs = s.instructions.iter().map(|t| provider.embed(t)).collect::<Result<Vec<_>, _>>()?;
        let mut sims = Vec::new();
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                sims.push(cosine(&vecs[i], &vecs[j]).ok_or("embedding vectors are empty, zero or differ in length")?);
            }
        }
        if let Some(m) = mean_std(&sims) {
            per_scenario.push(m.mean);
        }
    }
    Ok(mean_std(&per_scenario).map(|m| m.mean))
}

pub fn gpt_histogram(scores: &[f64]) -> [usize; 4] {
    let mut h = [0; 4];
    for s in scores {
        h[((s * 3.0).round() as usize).min(3)] += 1;
    }
    h
}

fn mean_localization(records: &[EpisodeRecord]) -> LocalizationScores {
    let steps: Vec<&LocalizationScores> =
        records.iter().flat_map(|r| r.steps.iter().map(|s| &s.localization)).collect();
    if steps.is_empty() {
        return LocalizationScores::default();
    }
    let n = steps.len() as f64;
    LocalizationScores {
        ap: steps.iter().map(|s| s.ap).sum::<f64>() / n,
        ar: steps.iter().map(|s| s.ar).sum::<f64>() / n,
        f1: steps.iter().map(|s| s.f1).sum::<f64>() / n,
        true_positives: steps.iter().map(|s| s.true_positives).sum(),
        false_positives: steps.iter().map(|s| s.false_positives).sum(),
        false_negatives: steps.iter().map(|s| s.false_negatives).sum(),
    }
}

pub fn aggregate_report(
    records: &[EpisodeRecord],
    set: Option<&ScenarioSet>,
    inputs: &InstructionInputs,
) -> Result<MetricReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut flags = Vec::new();
    let mut by_cell: BTreeMap<Difficulty, Vec<&EpisodeRecord>> = BTreeMap::new();
    for r in records {
        by_cell.entry(r.difficulty).or_default().push(r);
    }
    let mut cells = BTreeMap::new();
    for (d, recs) in &by_cell {
        let cell = CellReport::from_records(recs)?;
        if cell.pooled.pe_undefined {
            flags.push(format!("{}: no successes, PE reported as 0", d.key()));
        }
        cells.insert(d.key(), cell);
    }
    let all: Vec<&EpisodeRecord> = records.iter().collect();
    let overall = CellReport::from_records(&all)?;
    let errors = records.iter().filter(|r| r.error.is_some()).count();
    if errors > 0 {
        flags.push(format!("{errors} episode(s) ended in an error and count as failures"));
    }

    let mut instructions = InstructionStats::default();
    if !inputs.gpt_scores.is_empty() {
        instructions.gpt_score_mean = mean_std(&inputs.gpt_scores).map(|m| m.mean);
        instructions.gpt_score_histogram = Some(gpt_histogram(&inputs.gpt_scores));
    }
    match set {
        Some(set) => {
            instructions.rouge_l_mean = instruction_rouge_l(set);
            match inputs.embeddings {
                Some(p) => match instruction_embedding_score(set, p) {
                    Ok(v) => instructions.embedding_mean = v,
                    Err(e) => flags.push(format!("embedding score skipped: {e}")),
                },
                None => flags.push("embedding score skipped: no provider configured".into()),
            }
        }
        None => flags.push("instruction statistics skipped: no scenario manifest".into()),
    }

    Ok(MetricReport { cells, overall, localization: mean_localization(records), instructions, flags })
}

fn cell_label(key: &str) -> String {
    Difficulty::from_key(key).map(|d| d.to_string()).unwrap_or_else(|| key.to_string())
}

impl MetricReport {
    /// Cells in table order (Easy to Hard, without ambiguity first).
    fn ordered_cells(&self) -> Vec<(String, &CellReport)> {
        Difficulty::ALL.iter().filter_map(|d| self.cells.get(&d.key()).map(|c| (d.key(), c))).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: pooled SR/PE/SPL and per-instruction RSR/SSR
    /// as mean ± std.
    pub fn to_table(&self) -> String {
        let mut rows =
            vec![["Cell".to_string(), "N".into(), "SR".into(), "PE".into(), "SPL".into(), "RSR".into(), "SSR".into()]];
        let fmt_row = |label: String, c: &CellReport| {
            [
                label,
                c.pooled.episodes.to_string(),
                format!("{:.2}", c.pooled.sr),
                format!("{:.2}", c.pooled.pe),
                format!("{:.2}", c.pooled.spl),
                format!("{:.2} ± {:.2}", c.rsr.mean, c.rsr.std),
                format!("{:.2} ± {:.2}", c.ssr.mean, c.ssr.std),
            ]
        };
        for (key, c) in self.ordered_cells() {
            rows.push(fmt_row(cell_label(&key), c));
        }
        rows.push(fmt_row("Overall".into(), &self.overall));
        let widths: Vec<usize> = (0..7).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (n, r) in rows.iter().enumerate() {
            let line: Vec<String> =
                r.iter()
                    .enumerate()
                    .map(|(i, cell)| {
                        if i == 0 {
                            format!("{cell:<w$}", w = widths[i])
                        } else {
                            format!("{cell:>w$}", w = widths[i])
                        }
                    })
                    .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if n == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        let l = &self.localization;
        let _ = writeln!(out, "\nLocalization: AP {:.2}  AR {:.2}  F1 {:.2}", l.ap, l.ar, l.f1);
        let s = &self.instructions;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "Instructions: GPT score {}  embedding {}  Rouge-L {}",
            opt(s.gpt_score_mean),
            opt(s.embedding_mean),
            opt(s.rouge_l_mean)
        );
        for f in &self.flags {
            let _ = writeln!(out, "note: {f}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "cell,episodes,sr,pe,spl,rsr,ssr,sr_mean,sr_std,pe_mean,pe_std,spl_mean,spl_std,rsr_mean,rsr_std,ssr_mean,ssr_std,pe_undefined\n",
        );
        let mut cells = self.ordered_cells();
        cells.push(("overall".into(), &self.overall));
        for (key, c) in cells {
            let p = &c.pooled;
            let _ = writeln!(
                out,
                "{key},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.episodes,
                p.sr,
                p.pe,
                p.spl,
                p.rsr,
                p.ssr,
                c.sr.mean,
                c.sr.std,
                c.pe.mean,
                c.pe.std,
                c.spl.mean,
                c.spl.std,
                c.rsr.mean,
                c.rsr.std,
                c.ssr.mean,
                c.ssr.std,
                p.pe_undefined
            );
        }
        out
    }

    /// Pooled cells whose two-decimal SR, PE and SPL disagree by more
    /// than `tol`.
    pub fn inconsistent_cells(&self, tol: f64) -> Vec<String> {
        self.cells
            .iter()
            .filter(|(_, c)| !published_consistent(round2(c.pooled.sr), round2(c.pooled.pe), round2(c.pooled.spl), tol))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub const PUBLISHED_TOLERANCE: f64 = 0.01;

/// Whether rounded (SR, PE, SPL) values are consistent with SPL = SR·PE.
pub fn published_consistent(sr: f64, pe: f64, spl: f64, tol: f64) -> bool {
    (sr * pe - spl).abs() <= tol + 1e-12
}

/// One published result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedTriple {
    pub source: String,
    pub cell: String,
    pub sr: f64,
    pub pe: f64,
    pub spl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleCheck {
    #[serde(flatten)]
    pub triple: PublishedTriple,
    pub product: f64,
    pub deviation: f64,
    pub consistent: bool,
}

pub fn verify_triples(triples: &[PublishedTriple], tol: f64) -> Vec<TripleCheck> {
    triples
        .iter()
        .map(|t| {
            let product = t.sr * t.pe;
            TripleCheck {
                triple: t.clone(),
                product,
                deviation: (product - t.spl).abs(),
                consistent: published_consistent(t.sr, t.pe, t.spl, tol),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ps(success: bool, l: usize, p: usize) -> PathSample {
        PathSample { success, l, p }
    }

    #[test]
    fn iou_cases() {
        let a = Mask::rect(10, 10, 0, 0, 10, 10);
        let half = Mask::rect(10, 10, 0, 0, 10, 5);
        let other = Mask::rect(20, 20, 10, 10, 20, 20);
        let far = Mask::rect(20, 20, 0, 0, 10, 10);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&other, &far).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &half).unwrap(), 0.5);
        assert_eq!(mask_iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 0.0);
        assert!(matches!(mask_iou(&a, &other), Err(MetricsError::DimensionMismatch { .. })));
    }

    #[test]
    fn path_metrics() {
        let recs = vec![ps(true, 1, 1), ps(true, 1, 2)];
        assert_eq!(path_efficiency(&recs).value, 0.75);
        let recs = vec![ps(true, 1, 2), ps(false, 1, 3)];
        assert_eq!(spl(&recs).unwrap(), 0.25);
        assert_eq!(success_rate(&recs).unwrap(), 0.5);
        let none = vec![ps(false, 1, 3)];
        assert_eq!(path_efficiency(&none), PathEfficiency { value: 0.0, undefined: true });
        assert_eq!(success_rate::<PathSample>(&[]), Err(MetricsError::EmptyInput));
        assert_eq!(spl::<PathSample>(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l("the red car", "the red car"), 1.0);
        assert_eq!(rouge_l("the red car", "a blue truck"), 0.0);
        assert!((rouge_l("the red car", "red car") - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l("The Red", "the red"), 1.0);
        assert_eq!(rouge_l("", "x"), 0.0);
    }

    #[test]
    fn population_std() {
        let m = mean_std(&[0.62, 0.64, 0.66]).unwrap();
        assert!((m.mean - 0.64).abs() < 1e-12);
        // sqrt(0.0008 / 3)
        assert!((m.std - (0.0008f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.std - 0.016).abs() < 5e-4);
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]).unwrap().std, 0.0);
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(gpt_histogram(&[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0]), [1, 1, 1, 2]);
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), Some(0.0));
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0], &[1.0]), None);
    }

    proptest! {
        #[test]
        fn spl_identity(raw in prop::collection::vec((any::<bool>(), 1usize..8, 0usize..12), 1..40)) {
            let recs: Vec<PathSample> = raw.into_iter().map(|(s, l, extra)| ps(s, l, l + extra)).collect();
            let lhs = spl(&recs).unwrap();
            let rhs = success_rate(&recs).unwrap() * path_efficiency(&recs).value;
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }

        #[test]
        fn rouge_bounds(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            let r = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
            if !a.split_whitespace().next().is_none() {
                prop_assert_eq!(rouge_l(&a, &a), 1.0);
            }
            if a.split_whitespace().count() == b.split_whitespace().count() {
                prop_assert!((r - rouge_l(&b, &a)).abs() < 1e-12);
            }
        }

        #[test]
        fn iou_symmetric(bits_a in prop::collection::vec(any::<bool>(), 24), bits_b in prop::collection::vec(any::<bool>(), 24)) {
            let a = Mask::from_fn(4, 6, |x, y| bits_a[y * 6 + x]);
            let b = Mask::from_fn(4, 6, |x, y| bits_b[y * 6 + x]);
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
        }
    }
}
