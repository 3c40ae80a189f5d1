//! One function per subcommand. Each writes its human-readable output to
//! `out` and reports failures through [`CliError`].

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use graspbench_core::dataset::{
    attach_instructions, load_scene, load_scene_dir, load_scenes, sample_scenarios, AttachMode, ScenarioSet,
    DEFAULT_MIN_OBJECTS,
};
use graspbench_core::episode::{run_batch, EpisodeRecord, SceneAssets, SceneLibrary, StopSetting, Termination};
use graspbench_core::localization::{gt_localize, LocalizerKind};
use graspbench_core::metrics::{
    aggregate_report, gpt_histogram, verify_triples, InstructionInputs, MetricReport, PublishedTriple,
    PUBLISHED_TOLERANCE,
};
use graspbench_core::prompting::{encode_png, render_marks};
use graspbench_core::reasoning::{gpt_score, EmbeddingProvider, GptScore};
use graspbench_core::synth::{write_dataset, SynthConfig};
use graspbench_core::{Scene, SceneState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{HarnessConfig, ReasonerKind};
use crate::CliError;

pub const RUN_MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.jsonl";
pub const RUN_MANIFEST_FILE: &str = "run.json";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn scene_map(scenes: &[Arc<Scene>]) -> HashMap<String, Arc<Scene>> {
    scenes.iter().map(|s| (s.scene_id().to_string(), s.clone())).collect()
}

fn required(value: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf, CliError> {
    value.ok_or_else(|| CliError::Validation(format!("{flag} is required (or set {key} in the config file)")))
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Directory of scene JSON files.
    #[arg(long)]
    pub scenes: PathBuf,
}

pub fn cmd_ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let results = load_scene_dir(&args.scenes)?;
    let mut ok = 0;
    let mut failed = 0;
    for (path, result) in &results {
        match result {
            Ok(scene) => {
                ok += 1;
                let edges = scene.graph().edge_count();
                writeln!(
                    out,
                    "ok    {} ({} objects, {} obstruction edges)",
                    path.display(),
                    scene.objects().len(),
                    edges
                )?;
            }
            Err(e) => {
                failed += 1;
                writeln!(out, "error {e}")?;
            }
        }
    }
    if results.is_empty() {
        writeln!(out, "0 scenes")?;
        return Err(CliError::Validation(format!("no scene files in {}", args.scenes.display())));
    }
    if failed > 0 {
        writeln!(out, "{ok} scenes OK, {failed} invalid")?;
        return Err(CliError::Validation(format!("{failed} of {} scene files are invalid", results.len())));
    }
    writeln!(out, "{ok} scenes OK")?;
    Ok(())
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    /// Scenarios per difficulty cell.
    #[arg(long)]
    pub per_cell: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scenes with fewer objects are not sampled.
    #[arg(long, default_value_t = DEFAULT_MIN_OBJECTS)]
    pub min_objects: usize,
    /// Instruction JSONL to attach; rows for unsampled pairs are skipped.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    /// Manifest path to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let scenes = load_scenes(&args.scenes)?;
    let mut set = sample_scenarios(&scenes, args.per_cell, args.min_objects, args.seed)?;
    if let Some(path) = &args.instructions {
        let outcome = attach_instructions(set, path, AttachMode::IgnoreUnknown)?;
        if !outcome.missing.is_empty() {
            log::warn!("{} scenario(s) have no instructions: {}", outcome.missing.len(), outcome.missing.join(", "));
        }
        set = outcome.set;
    }
    write(&args.out, (set.to_json() + "\n").as_bytes())?;
    let cells: Vec<String> = set.per_cell_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(out, "{} scenarios ({}) -> {}", set.len(), cells.join(", "), args.out.display())?;
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LocalizerArg {
    Gt,
    Perturbed,
    Remote,
}

impl From<LocalizerArg> for LocalizerKind {
    fn from(a: LocalizerArg) -> Self {
        match a {
            LocalizerArg::Gt => LocalizerKind::Gt,
            LocalizerArg::Perturbed => LocalizerKind::Perturbed,
            LocalizerArg::Remote => LocalizerKind::Remote,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Harness config (TOML or JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Instruction JSONL for scenarios the manifest leaves without instructions.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    /// Output directory for the results JSONL and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One or more stop settings, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub stop: Vec<StopSetting>,
    #[arg(long, value_enum)]
    pub reasoner: Option<ReasonerKind>,
    #[arg(long, value_enum)]
    pub localizer: Option<LocalizerArg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub stop: StopSetting,
    pub episodes: usize,
    pub successes: usize,
    pub errors: usize,
}

/// Everything needed to repeat an evaluation. Contains no secrets: remote
/// credentials are referenced by environment variable name only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub manifest: PathBuf,
    pub manifest_sha256: String,
    pub scenes: PathBuf,
    pub config: HarnessConfig,
    pub results: PathBuf,
    pub results_sha256: String,
    pub runs: Vec<RunSummary>,
}

fn eval_config(args: &EvalArgs) -> Result<HarnessConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => HarnessConfig::load(path)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if !args.stop.is_empty() {
        cfg.stop = crate::config::OneOrMany::Many(args.stop.clone());
    }
    if let Some(kind) = args.reasoner {
        cfg.reasoner.kind = kind;
    }
    if let Some(kind) = args.localizer {
        cfg.localizer.kind = kind.into();
    }
    for (flag, slot) in [
        (&args.scenes, &mut cfg.paths.scenes),
        (&args.instructions, &mut cfg.paths.instructions),
        (&args.out, &mut cfg.paths.results),
        (&args.manifest, &mut cfg.paths.manifest),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    Ok(cfg)
}

/// Fills scenarios that carry no instructions from an instruction file.
fn fill_instructions(set: &mut ScenarioSet, path: &Path) -> Result<(), CliError> {
    if set.scenarios.iter().all(|s| !s.instructions.is_empty()) {
        return Ok(());
    }
    let filled = attach_instructions(set.clone(), path, AttachMode::IgnoreUnknown)?.set;
    for (s, f) in set.scenarios.iter_mut().zip(filled.scenarios) {
        if s.instructions.is_empty() {
            s.instructions = f.instructions;
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = eval_config(args)?;
    let scenes_dir = required(cfg.paths.scenes.clone(), "--scenes", "paths.scenes")?;
    let manifest = required(cfg.paths.manifest.clone(), "--manifest", "paths.manifest")?;
    let out_dir = required(cfg.paths.results.clone(), "--out", "paths.results")?;
    let matrix = cfg.run_matrix()?;

    let scenes = load_scenes(&scenes_dir)?;
    let mut set = ScenarioSet::load(&manifest, &scene_map(&scenes))?;
    if let Some(path) = &cfg.paths.instructions {
        fill_instructions(&mut set, path)?;
    }
    let bare: Vec<&str> =
        set.scenarios.iter().filter(|s| s.instructions.is_empty()).map(|s| s.scenario_id.as_str()).collect();
    if !bare.is_empty() {
        log::warn!("{} scenario(s) have no instructions and will be recorded as errors", bare.len());
    }

    let library = SceneLibrary::new(scenes);
    let total = matrix.len() * set.scenarios.iter().map(|s| s.instructions.len().max(1)).sum::<usize>();
    let mut done = 0usize;
    let records = run_batch(&set, &library, &matrix, args.workers, &mut |r| {
        done += 1;
        log::info!("[{done}/{total}] {} {} success={}", r.run, r.episode_key, r.success);
    });

    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
        jsonl.push('\n');
    }
    let results_path = out_dir.join(RESULTS_FILE);
    write(&results_path, jsonl.as_bytes())?;

    let runs: Vec<RunSummary> = matrix
        .iter()
        .map(|run| {
            let mine: Vec<&EpisodeRecord> = records.iter().filter(|r| r.run == run.label).collect();
            RunSummary {
                label: run.label.clone(),
                stop: run.settings.stop,
                episodes: mine.len(),
                successes: mine.iter().filter(|r| r.success).count(),
                errors: mine.iter().filter(|r| r.terminated_by == Termination::Error).count(),
            }
        })
        .collect();
    let run_manifest = RunManifest {
        schema_version: RUN_MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        manifest_sha256: sha256_hex(&fs::read(&manifest)?),
        manifest,
        scenes: scenes_dir,
        config: cfg,
        results: PathBuf::from(RESULTS_FILE),
        results_sha256: sha256_hex(jsonl.as_bytes()),
        runs: runs.clone(),
    };
    let manifest_json = serde_json::to_string_pretty(&run_manifest).expect("run manifest serializes") + "\n";
    write(&out_dir.join(RUN_MANIFEST_FILE), manifest_json.as_bytes())?;

    for r in &runs {
        writeln!(out, "{}: {} episodes, {} successes, {} errors", r.label, r.episodes, r.successes, r.errors)?;
    }
    writeln!(out, "results -> {}", results_path.display())?;
    let errors: usize = runs.iter().map(|r| r.errors).sum();
    if errors > 0 {
        let first = records.iter().find_map(|r| r.error.as_deref()).unwrap_or_default();
        return Err(CliError::Runtime(format!("{errors} episode(s) ended in an error, first: {first}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum ReportFormat {
    #[default]
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ReportArgs {
    /// Results JSONL written by `eval`.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Scenario manifest, for instruction statistics.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Published (SR, PE, SPL) rows to check for internal consistency.
    #[arg(long)]
    pub published: Option<PathBuf>,
    /// JSON object mapping instruction text to its embedding vector.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output of `score-instructions`.
    #[arg(long)]
    pub gpt_scores: Option<PathBuf>,
    /// Report only records of this run label.
    #[arg(long)]
    pub run: Option<String>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Directory for report.json, report.csv and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let rec: EpisodeRecord = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Embeddings looked up in a precomputed table.
pub struct EmbeddingTable(pub HashMap<String, Vec<f64>>);

impl EmbeddingProvider for EmbeddingTable {
    fn embed(&self, text: &str) -> Result<Vec<f64>, String> {
        self.0.get(text).cloned().ok_or_else(|| format!("no embedding for {text:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGptScore {
    pub scenario_id: String,
    #[serde(flatten)]
    pub score: Option<GptScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn parse_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Checks published rows and renders the outcome; the bool is false when
/// any row is inconsistent.
pub fn check_published(path: &Path) -> Result<(String, bool), CliError> {
    let triples: Vec<PublishedTriple> = parse_json_file(path)?;
    if triples.is_empty() {
        return Err(CliError::Validation(format!("{}: no rows", path.display())));
    }
    let checks = verify_triples(&triples, PUBLISHED_TOLERANCE);
    let mut text = format!("Published rows ({}), |SR*PE - SPL| <= {PUBLISHED_TOLERANCE}:\n", path.display());
    for c in &checks {
        let t = &c.triple;
        text.push_str(&format!(
            "  {:<4} {:<9} {:<17} SR {:.2}  PE {:.2}  SPL {:.2}  SR*PE {:.4}  dev {:.4}\n",
            if c.consistent { "ok" } else { "FAIL" },
            t.source,
            t.cell,
            t.sr,
            t.pe,
            t.spl,
            c.product,
            c.deviation
        ));
    }
    let bad = checks.iter().filter(|c| !c.consistent).count();
    text.push_str(&format!("{} of {} rows consistent\n", checks.len() - bad, checks.len()));
    Ok((text, bad == 0))
}

pub fn build_report(args: &ReportArgs) -> Result<Option<MetricReport>, CliError> {
    let Some(path) = &args.results else { return Ok(None) };
    let mut records = read_records(path)?;
    if let Some(run) = &args.run {
        records.retain(|r| &r.run == run);
    }
    if records.is_empty() {
        return Err(CliError::Validation(format!("{}: no records", path.display())));
    }
    let runs: std::collections::BTreeSet<&str> = records.iter().map(|r| r.run.as_str()).collect();
    if runs.len() > 1 {
        log::warn!(
            "pooling {} runs ({}); pass --run to report one",
            runs.len(),
            runs.into_iter().collect::<Vec<_>>().join(", ")
        );
    }
    let set: Option<ScenarioSet> = args.manifest.as_deref().map(parse_json_file).transpose()?;
    let table: Option<EmbeddingTable> =
        args.embeddings.as_deref().map(parse_json_file::<HashMap<String, Vec<f64>>>).transpose()?.map(EmbeddingTable);
    let gpt: Vec<ScenarioGptScore> = args.gpt_scores.as_deref().map(parse_json_file).transpose()?.unwrap_or_default();
    let inputs = InstructionInputs {
        gpt_scores: gpt.iter().filter_map(|g| g.score.as_ref().map(|s| s.score)).collect(),
        embeddings: table.as_ref().map(|t| t as &dyn EmbeddingProvider),
    };
    aggregate_report(&records, set.as_ref(), &inputs).map(Some).map_err(|e| CliError::Validation(e.to_string()))
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.results.is_none() && args.published.is_none() {
        return Err(CliError::Validation("nothing to report: pass --results and/or --published".into()));
    }
    let report = build_report(args)?;
    if let Some(report) = &report {
        match args.format {
            ReportFormat::Table => write!(out, "{}", report.to_table())?,
            ReportFormat::Json => writeln!(out, "{}", report.to_json())?,
            ReportFormat::Csv => write!(out, "{}", report.to_csv())?,
        }
        for cell in report.inconsistent_cells(PUBLISHED_TOLERANCE) {
            writeln!(out, "note: rounded SR*PE and SPL differ by more than {PUBLISHED_TOLERANCE} in {cell}")?;
        }
        if let Some(dir) = &args.out {
            write(&dir.join("report.json"), (report.to_json() + "\n").as_bytes())?;
            write(&dir.join("report.csv"), report.to_csv().as_bytes())?;
            write(&dir.join("report.txt"), report.to_table().as_bytes())?;
        }
    }
    if let Some(path) = &args.published {
        let (text, ok) = check_published(path)?;
        if report.is_some() {
            writeln!(out)?;
        }
        write!(out, "{text}")?;
        if !ok {
            return Err(CliError::Validation("published rows violate SPL = SR * PE".into()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- annotate

#[derive(Debug, Clone, Args)]
pub struct AnnotateArgs {
    /// Scene JSON file.
    #[arg(long)]
    pub scene: PathBuf,
    /// PNG to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Harness config supplying the mark style.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Marker radius in pixels, overriding the config.
    #[arg(long)]
    pub radius: Option<u32>,
}

pub fn cmd_annotate(args: &AnnotateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut style = match &args.config {
        Some(p) => HarnessConfig::load(p)?.mark_style,
        None => Default::default(),
    };
    if let Some(r) = args.radius {
        style.radius = r;
    }
    let scene = Arc::new(load_scene(&args.scene)?);
    let assets = SceneAssets::load(&scene);
    for f in &assets.flags {
        log::warn!("{f}");
    }
    let state = SceneState::new(scene.clone());
    let keypoints = gt_localize(&state).map_err(|e| CliError::Validation(e.to_string()))?;
    let (image, registry) =
        render_marks(&assets.rgb, &keypoints, &style).map_err(|e| CliError::Validation(e.to_string()))?;
    write(&args.out, &encode_png(&image))?;
    for m in &registry.marks {
        let class = m.object_hint.and_then(|id| scene.object(id)).map(|o| o.class_name.as_str()).unwrap_or("?");
        writeln!(
            out,
            "{:>3}  {class} (object {})  at ({:.1}, {:.1})",
            m.mark_id,
            m.object_hint.map(|i| i.0).unwrap_or(0),
            m.point.u,
            m.point.v
        )?;
    }
    for c in &registry.collisions {
        writeln!(out, "note: marks {} and {} are {:.1} px apart", c.first, c.second, c.distance)?;
    }
    writeln!(out, "{} marks -> {}", registry.len(), args.out.display())?;
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Dataset directory; scenes go to `scenes/`, instructions to `instructions.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().scenes)]
    pub count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = SynthConfig { scenes: args.count, ..Default::default() };
    let scenes = write_dataset(&args.out, &cfg, args.seed)?;
    let objects: usize = scenes.iter().map(|s| s.objects().len()).sum();
    writeln!(out, "{} scenes, {objects} objects -> {}", scenes.len(), args.out.display())?;
    Ok(())
}

// ---------------------------------------------------------------- score-instructions

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub reasoner: Option<ReasonerKind>,
    /// JSON file to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Per scenario, the share of its instructions that let the configured
/// reasoner pick out the target on the initial scene.
pub fn cmd_score_instructions(args: &ScoreArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = eval_config(&EvalArgs {
        manifest: args.manifest.clone(),
        config: args.config.clone(),
        scenes: args.scenes.clone(),
        instructions: args.instructions.clone(),
        reasoner: args.reasoner,
        ..Default::default()
    })?;
    let scenes_dir = required(cfg.paths.scenes.clone(), "--scenes", "paths.scenes")?;
    let manifest = required(cfg.paths.manifest.clone(), "--manifest", "paths.manifest")?;
    let spec = cfg.build_reasoner()?;
    let scenes = load_scenes(&scenes_dir)?;
    let mut set = ScenarioSet::load(&manifest, &scene_map(&scenes))?;
    if let Some(path) = &cfg.paths.instructions {
        fill_instructions(&mut set, path)?;
    }
    let library = SceneLibrary::new(scenes);
    let mut scores = Vec::new();
    let mut scenarios: Vec<_> = set.scenarios.iter().collect();
    scenarios.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
    for s in scenarios {
        let scene = library.scene(&s.scene_id).expect("manifest validated against scenes");
        let assets = library.assets(&s.scene_id).expect("scene present");
        let state = SceneState::new(scene.clone());
        let result = (|| {
            let kps = gt_localize(&state).map_err(|e| e.to_string())?;
            let (img, registry) = render_marks(&assets.rgb, &kps, &cfg.mark_style).map_err(|e| e.to_string())?;
            let mut reasoner = spec.build(&s.scenario_id).map_err(|e| e.to_string())?;
            gpt_score(&img, &registry, &s.instructions, &state, s.target_id, reasoner.as_mut())
                .map_err(|e| e.to_string())
        })();
        scores.push(match result {
            Ok(score) => ScenarioGptScore { scenario_id: s.scenario_id.clone(), score: Some(score), error: None },
            Err(e) => ScenarioGptScore { scenario_id: s.scenario_id.clone(), score: None, error: Some(e) },
        });
    }
    write(&args.out, (serde_json::to_string_pretty(&scores).expect("scores serialize") + "\n").as_bytes())?;
    let ok: Vec<f64> = scores.iter().filter_map(|s| s.score.as_ref().map(|g| g.score)).collect();
    let mean = if ok.is_empty() { 0.0 } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    let [h0, h1, h2, h3] = gpt_histogram(&ok);
    writeln!(out, "{} scenarios scored, {} skipped, mean {mean:.3}", ok.len(), scores.len() - ok.len())?;
    writeln!(out, "histogram 0: {h0}  1/3: {h1}  2/3: {h2}  1: {h3}")?;
    writeln!(out, "scores -> {}", args.out.display())?;
    Ok(())
}
