//! Keypoint localizers and point-in-mask localization scoring.

use base64::Engine;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompting::{assign_marks, Keypoint};
use crate::remote::{Exchange, RemoteClient, RemoteError};
use crate::scene::{ObjectId, ObjectInstance, Point, Scene, SceneState};
use crate::seed;

pub const POINT_PROMPT: &str = "point at all objects in the bin";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizationError {
    #[error("scene state has no live objects")]
    EmptyScene,
    #[error("invalid localizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

/// Monotone map from occluded fraction to drop probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DropoutCurve {
    /// `min(1, slope * fraction)`
    Linear {
        slope: f64,
    },
    Constant {
        p: f64,
    },
}

impl Default for DropoutCurve {
    fn default() -> Self {
        DropoutCurve::Linear { slope: 2.0 }
    }
}

impl DropoutCurve {
    pub fn probability(&self, occluded_fraction: f64) -> f64 {
        match *self {
            DropoutCurve::Linear { slope } => (slope * occluded_fraction).clamp(0.0, 1.0),
            DropoutCurve::Constant { p } => p.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizerKind {
    Gt,
    Perturbed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub kind: LocalizerKind,
    pub noise_sigma_px: f64,
    pub dropout: DropoutCurve,
    pub duplicate_rate: f64,
    pub seed: u64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            kind: LocalizerKind::Gt,
            noise_sigma_px: 0.0,
            dropout: DropoutCurve::default(),
            duplicate_rate: 0.0,
            seed: 0,
        }
    }
}

/// One keypoint per live object at its stored center.
pub fn gt_localize(state: &SceneState) -> Result<Vec<Keypoint>, LocalizationError> {
    let points: Vec<_> = state.live_objects().map(|o| (o.center, Some(o.id))).collect();
    if points.is_empty() {
        return Err(LocalizationError::EmptyScene);
    }
    Ok(assign_marks(points))
}

/// Share of `id`'s amodal area hidden by live occluders, combining raw
/// edge fractions as independent coverages.
pub fn occluded_fraction(state: &SceneState, id: ObjectId) -> f64 {
    let visible: f64 = state
        .scene()
        .edges()
        .iter()
        .filter(|e| e.occluded == id && state.is_live(e.occluder))
        .map(|e| 1.0 - e.fraction)
        .product();
    1.0 - visible
}

fn clamp_into(p: Point, width: u32, height: u32) -> (Point, bool) {
    let clamp = |x: f64, n: u32| {
        if x < 0.0 {
            0.0
        } else if x >= n as f64 {
            n as f64 - 0.5
        } else {
            x
        }
    };
    let q = Point::new(clamp(p.u, width), clamp(p.v, height));
    (q, q != p)
}

/// Ground-truth centers with occlusion-dependent misses, Gaussian jitter and
/// duplicate readings, all drawn from `cfg.seed`.
pub fn perturbed_localize(state: &SceneState, cfg: &LocalizerConfig) -> Result<Vec<Keypoint>, LocalizationError> {
    if cfg.kind != LocalizerKind::Perturbed {
        return Err(LocalizationError::InvalidConfig(format!("kind is {:?}, expected perturbed", cfg.kind)));
    }
    if !(cfg.noise_sigma_px >= 0.0) || !(0.0..1.0).contains(&cfg.duplicate_rate) {
        return Err(LocalizationError::InvalidConfig(
            "noise_sigma_px must be >= 0 and duplicate_rate in [0, 1)".into(),
        ));
    }
    let mut objects: Vec<&ObjectInstance> = state.live_objects().collect();
    if objects.is_empty() {
        return Err(LocalizationError::EmptyScene);
    }
    objects.sort_by_key(|o| o.id);
    let scene = state.scene();
    let (w, h) = (scene.width(), scene.height());
    let mut rng = seed::rng(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma_px).expect("sigma checked above");
    let dup_noise = Normal::new(0.0, (2.0 * cfg.noise_sigma_px).max(4.0)).expect("positive sigma");
    let mut points = Vec::new();
    for o in objects {
        // fixed draw count per object keeps the stream aligned across configs
        let drop_roll: f64 = rng.random();
        let jitter = (noise.sample(&mut rng), noise.sample(&mut rng));
        let dup_roll: f64 = rng.random();
        let dup_jitter = (dup_noise.sample(&mut rng), dup_noise.sample(&mut rng));
        if drop_roll < cfg.dropout.probability(occluded_fraction(state, o.id)) {
            continue;
        }
        let (p, _) = clamp_into(Point::new(o.center.u + jitter.0, o.center.v + jitter.1), w, h);
        points.push((p, Some(o.id)));
        if dup_roll < cfg.duplicate_rate {
            let (d, _) = clamp_into(Point::new(o.center.u + dup_jitter.0, o.center.v + dup_jitter.1), w, h);
            points.push((d, Some(o.id)));
        }
    }
    Ok(assign_marks(points))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteLocalization {
    pub keypoints: Vec<Keypoint>,
    /// Marks whose reported point was outside the image and got clamped.
    pub clamped: Vec<u32>,
}

fn number(v: &Value) -> Option<f64> {
    v.as_f64().or_else(|| v.as_str().and_then(|s| s.trim().parse().ok()))
}

fn points_from_json(list: &[Value]) -> Result<Vec<(f64, f64)>, String> {
    list.iter()
        .map(|p| {
            match p {
                Value::Array(xy) if xy.len() == 2 => number(&xy[0]).zip(number(&xy[1])),
                Value::Object(m) => m.get("x").and_then(number).zip(m.get("y").and_then(number)),
                _ => None,
            }
            .ok_or_else(|| format!("unreadable point {p}"))
        })
        .collect()
}

fn points_from_tags(text: &str) -> Result<Vec<(f64, f64)>, String> {
    let single = Regex::new(r#"<point\s+x\s*=\s*"([^"]+)"\s+y\s*=\s*"([^"]+)""#).expect("valid regex");
    let multi_tag = Regex::new(r#"<points\s([^>]*)>"#).expect("valid regex");
    let attr = Regex::new(r#"([xy])(\d+)\s*=\s*"([^"]+)""#).expect("valid regex");
    let mut out = Vec::new();
    for c in single.captures_iter(text) {
        let x = c[1].trim().parse::<f64>().map_err(|e| format!("bad x {:?}: {e}", &c[1]))?;
        let y = c[2].trim().parse::<f64>().map_err(|e| format!("bad y {:?}: {e}", &c[2]))?;
        out.push((x, y));
    }
    for tag in multi_tag.captures_iter(text) {
        let mut xs = std::collections::BTreeMap::new();
        let mut ys = std::collections::BTreeMap::new();
        for a in attr.captures_iter(&tag[1]) {
            let idx: u32 = a[2].parse().map_err(|_| "bad point index".to_string())?;
            let val: f64 = a[3].trim().parse().map_err(|e| format!("bad coordinate {:?}: {e}", &a[3]))?;
            if &a[1] == "x" {
                xs.insert(idx, val);
            } else {
                ys.insert(idx, val);
            }
        }
        for (i, x) in xs {
            let y = ys.get(&i).ok_or_else(|| format!("point {i} has no y"))?;
            out.push((x, *y));
        }
    }
    if out.is_empty() {
        return Err(format!("no point tags in reply {:?}", text.chars().take(120).collect::<String>()));
    }
    Ok(out)
}

/// Accepts a JSON point list (`[[x, y], ...]`, `[{"x", "y"}, ...]`, or either
/// under a `points` key), or text with `<point x=".." y="..">` /
/// `<points x1=".." y1=".." ...>` tags, optionally inside a `text` field.
pub fn parse_point_reply(body: &str) -> Result<Vec<(f64, f64)>, String> {
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Array(list)) => points_from_json(&list),
        Ok(Value::Object(m)) => {
            if let Some(Value::Array(list)) = m.get("points") {
                points_from_json(list)
            } else if let Some(text) =
                ["text", "output", "reply"].iter().find_map(|k| m.get(*k).and_then(Value::as_str))
            {
                points_from_tags(text)
            } else {
                Err("reply object has neither `points` nor `text`".into())
            }
        }
        Ok(Value::String(s)) => points_from_tags(&s),
        _ => points_from_tags(body),
    }
}

/// Asks a pointing service for every object in the image.
pub fn remote_localize(
    image_png: &[u8],
    width: u32,
    height: u32,
    client: &RemoteClient,
    log: &mut Vec<Exchange>,
) -> Result<RemoteLocalization, LocalizationError> {
    let mut body = serde_json::json!({
        "prompt": POINT_PROMPT,
        "image": base64::engine::general_purpose::STANDARD.encode(image_png),
    });
    if let Some(model) = &client.config().model {
        body["model"] = Value::String(model.clone());
    }
    let raw = client.post_json(&body, log, parse_point_reply)?;
    let mut clamped_points = Vec::with_capacity(raw.len());
    for (x, y) in raw {
        let (p, flagged) = clamp_into(Point::new(x, y), width, height);
        clamped_points.push((p, flagged));
    }
    let keypoints = assign_marks(clamped_points.iter().map(|(p, _)| (*p, None)).collect());
    // assign_marks sorts; recover which marks came from clamped points
    let clamped = keypoints
        .iter()
        .filter(|k| clamped_points.iter().any(|(p, f)| *f && *p == k.point))
        .map(|k| k.mark_id)
        .collect();
    Ok(RemoteLocalization { keypoints, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizationScores {
    pub ap: f64,
    pub ar: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn score_points<'a>(pred: &[Keypoint], objects: impl Iterator<Item = &'a ObjectInstance>) -> LocalizationScores {
    let mut objects: Vec<&ObjectInstance> = objects.collect();
    objects.sort_by_key(|o| o.id);
    let mut ordered: Vec<&Keypoint> = pred.iter().collect();
    ordered.sort_by(|a, b| a.point.v.total_cmp(&b.point.v).then(a.point.u.total_cmp(&b.point.u)));
    let mut matched = vec![false; objects.len()];
    let mut tp = 0;
    for k in ordered {
        let hit =
            objects.iter().enumerate().find(|(i, o)| !matched[*i] && o.modal_mask.contains_point(k.point.u, k.point.v));
        if let Some((i, _)) = hit {
            matched[i] = true;
            tp += 1;
        }
    }
    let fp = pred.len() - tp;
    let fn_ = objects.len() - tp;
    let ap = ratio(tp, tp + fp);
    let ar = ratio(tp, tp + fn_);
    let f1 = if ap + ar == 0.0 { 0.0 } else { 2.0 * ap * ar / (ap + ar) };
    LocalizationScores { ap, ar, f1, true_positives: tp, false_positives: fp, false_negatives: fn_ }
}

/// Matches each predicted point to an unmatched object whose modal mask
/// contains it, visiting points in reading order.
pub fn eval_localization(pred: &[Keypoint], scene: &Scene) -> LocalizationScores {
    score_points(pred, scene.objects().iter())
}

/// As [`eval_localization`], against live objects only.
pub fn eval_localization_live(pred: &[Keypoint], state: &SceneState) -> LocalizationScores {
    score_points(pred, state.live_objects())
}
