//! The grasp episode loop: localize, annotate, decide, segment, estimate a
//! pose, execute, update. Classifies step failures as segmentation (S), pose
//! (P) or motion (M) and stops according to a [`StopSetting`].

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Scenario, ScenarioSet};
use crate::geometry::{grasp_proxy, DepthImage, GraspPose, Intrinsics, DEFAULT_GRIPPER_MAX_WIDTH_M};
use crate::localization::{
    eval_localization_live, gt_localize, perturbed_localize, remote_localize, LocalizationError, LocalizationScores,
    LocalizerConfig, LocalizerKind,
};
use crate::mask::Mask;
use crate::metrics::mask_iou;
use crate::prompting::{encode_png, render_marks, Decision, Keypoint, MarkRegistry, MarkStyle};
use crate::reasoning::{DecisionContext, GroundTruth, OracleReasoner, Reasoner, RemoteReasoner, ScriptBook};
use crate::remote::{Exchange, RemoteClient};
use crate::scene::{Difficulty, ObjectId, Point, Scene, SceneError, SceneState};
use crate::{seed, synth};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// Depth assumed for scenes that ship without a depth image.
pub const FALLBACK_DEPTH_M: f64 = 0.7;

pub const SUCCESS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopSetting {
    Spm,
    Pm,
    P,
}

impl StopSetting {
    pub const ALL: [StopSetting; 3] = [Self::Spm, Self::Pm, Self::P];

    pub fn terminates_on(self, failure: FailureKind) -> bool {
        match self {
            StopSetting::Spm => true,
            StopSetting::Pm => failure != FailureKind::S,
            StopSetting::P => failure == FailureKind::P,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StopSetting::Spm => "spm",
            StopSetting::Pm => "pm",
            StopSetting::P => "p",
        }
    }
}

impl fmt::Display for StopSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StopSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spm" => Ok(Self::Spm),
            "pm" => Ok(Self::Pm),
            "p" => Ok(Self::P),
            other => Err(format!("unknown stop setting {other:?} (expected spm, pm or p)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureKind {
    S,
    P,
    M,
}

/// Simulated arm: each executed grasp drops the object with probability
/// `motion_failure_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionModel {
    pub motion_failure_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TargetGrasped,
    Failure,
    StepCap,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step_index: usize,
    pub keypoints: Vec<Keypoint>,
    pub localization: LocalizationScores,
    pub decision: Option<Decision>,
    pub decision_error: Option<String>,
    /// Object behind the decided mark: the localizer's hint when there is
    /// one, else the segmentation result.
    pub decided_object: Option<ObjectId>,
    pub resolved_object: Option<ObjectId>,
    pub class_mismatch: bool,
    pub predicted_mask: Option<Mask>,
    pub best_valid_iou: Option<f64>,
    pub pose: Option<GraspPose>,
    pub pose_error: Option<String>,
    pub grasp_point: Option<Point>,
    pub grasp_object: Option<ObjectId>,
    pub gt_valid_set: Vec<ObjectId>,
    /// First failure of the step in S, P, M order.
    pub failure: Option<FailureKind>,
    pub failures: Vec<FailureKind>,
    pub grasped_id: Option<ObjectId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    pub run: String,
    pub episode_key: String,
    pub scenario_id: String,
    pub scene_id: String,
    pub target_id: ObjectId,
    pub difficulty: Difficulty,
    pub instruction_index: usize,
    pub instruction: String,
    pub stop: StopSetting,
    pub reasoner: String,
    pub localizer: String,
    pub seed: u64,
    pub steps: Vec<StepOutcome>,
    pub success: bool,
    pub l: usize,
    pub p: usize,
    pub terminated_by: Termination,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpisodeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scenario {scenario_id} has no instruction {index}")]
    MissingInstruction { scenario_id: String, index: usize },
    #[error("scene {0} is not loaded")]
    UnknownScene(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Pixels, depth and intrinsics for one scene, with substitutes for
/// missing files.
#[derive(Debug, Clone)]
pub struct SceneAssets {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub intrinsics: Intrinsics,
    pub flags: Vec<String>,
}

impl SceneAssets {
    pub fn load(scene: &Scene) -> Self {
        let mut flags = Vec::new();
        let (w, h) = (scene.width(), scene.height());
        let path = scene.resolve_path(&scene.image().path);
        let rgb = match image::open(&path) {
            Ok(img) if img.width() == w && img.height() == h => img.into_rgb8(),
            Ok(img) => {
                flags.push(format!(
                    "image {} is {}x{}, expected {w}x{h}; rendered from masks",
                    path.display(),
                    img.width(),
                    img.height()
                ));
                synth::render_scene_image(scene)
            }
            Err(_) => {
                flags.push("image unavailable; rendered from masks".to_string());
                synth::render_scene_image(scene)
            }
        };
        let depth = match scene.depth() {
            Some(d) => match DepthImage::load(&scene.resolve_path(&d.path), d.scale_mm) {
                Ok(img) if img.width() == w as usize && img.height() == h as usize => img,
                Ok(_) | Err(_) => {
                    flags.push(format!("depth {} unusable; flat {FALLBACK_DEPTH_M} m substituted", d.path));
                    DepthImage::flat(w as usize, h as usize, FALLBACK_DEPTH_M)
                }
            },
            None => {
                flags.push(format!("no depth; flat {FALLBACK_DEPTH_M} m substituted"));
                DepthImage::flat(w as usize, h as usize, FALLBACK_DEPTH_M)
            }
        };
        let intrinsics = match scene.intrinsics() {
            Some(k) => *k,
            None => {
                flags.push("no intrinsics; nominal pinhole substituted".to_string());
                Intrinsics::nominal()
            }
        };
        Self { rgb, depth, intrinsics, flags }
    }
}

/// Scenes by id with lazily loaded assets.
#[derive(Debug, Default)]
pub struct SceneLibrary {
    scenes: HashMap<String, Arc<Scene>>,
    assets: Mutex<HashMap<String, Arc<SceneAssets>>>,
}

impl SceneLibrary {
    pub fn new(scenes: impl IntoIterator<Item = Arc<Scene>>) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.scene_id().to_string(), s)).collect(),
            assets: Mutex::new(HashMap::new()),
        }
    }

    pub fn scene(&self, id: &str) -> Option<&Arc<Scene>> {
        self.scenes.get(id)
    }

    pub fn scenes(&self) -> &HashMap<String, Arc<Scene>> {
        &self.scenes
    }

    pub fn assets(&self, id: &str) -> Option<Arc<SceneAssets>> {
        let scene = self.scenes.get(id)?;
        let mut cache = self.assets.lock().unwrap_or_else(|p| p.into_inner());
        Some(cache.entry(id.to_string()).or_insert_with(|| Arc::new(SceneAssets::load(scene))).clone())
    }
}

#[derive(Debug, Clone)]
pub enum Localizer {
    Gt,
    Perturbed(LocalizerConfig),
    Remote(Arc<RemoteClient>),
}

impl Localizer {
    pub fn name(&self) -> &'static str {
        match self {
            Localizer::Gt => "gt",
            Localizer::Perturbed(_) => "perturbed",
            Localizer::Remote(_) => "remote",
        }
    }

    /// Whether keypoints come tied to object ids.
    pub fn provides_hints(&self) -> bool {
        !matches!(self, Localizer::Remote(_))
    }

    pub fn localize(
        &self,
        state: &SceneState,
        image: &RgbImage,
        step_seed: u64,
        log: &mut Vec<Exchange>,
        flags: &mut Vec<String>,
    ) -> Result<Vec<Keypoint>, LocalizationError> {
        match self {
            Localizer::Gt => gt_localize(state),
            Localizer::Perturbed(cfg) => {
                let cfg = LocalizerConfig {
                    kind: LocalizerKind::Perturbed,
                    seed: seed::derive(cfg.seed, &step_seed.to_string()),
                    ..cfg.clone()
                };
                perturbed_localize(state, &cfg)
            }
            Localizer::Remote(client) => {
                let out = remote_localize(&encode_png(image), image.width(), image.height(), client, log)?;
                if !out.clamped.is_empty() {
                    flags.push(format!("clamped out-of-image points for marks {:?}", out.clamped));
                }
                Ok(out.keypoints)
            }
        }
    }
}

/// The live object a decision points at: nearest center to the mark among
/// objects of the decided class, else nearest overall. An empty class name
/// skips the class filter.
pub fn resolve_decision(state: &SceneState, registry: &MarkRegistry, decision: &Decision) -> Option<(ObjectId, bool)> {
    let point = registry.get(decision.mark_id)?.point;
    let want = decision.class_name.trim().to_lowercase();
    let nearest = |class_only: bool| {
        state
            .live_objects()
            .filter(|o| !class_only || o.class_name.to_lowercase() == want)
            .min_by(|a, b| a.center.distance(&point).total_cmp(&b.center.distance(&point)).then(a.id.cmp(&b.id)))
            .map(|o| o.id)
    };
    if want.is_empty() {
        return nearest(false).map(|id| (id, false));
    }
    match nearest(true) {
        Some(id) => Some((id, false)),
        None => nearest(false).map(|id| (id, true)),
    }
}

/// Everything decided before anything moves.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub keypoints: Vec<Keypoint>,
    pub registry: Option<MarkRegistry>,
    pub annotated: RgbImage,
    pub localization: LocalizationScores,
    pub decision: Result<Decision, String>,
    pub decided_object: Option<ObjectId>,
    pub exchanges: Vec<Exchange>,
    pub flags: Vec<String>,
}

/// The scene image with every removed object painted over in the bin color.
pub fn state_image<'a>(assets: &'a SceneAssets, state: &SceneState) -> Cow<'a, RgbImage> {
    if state.removed().is_empty() {
        return Cow::Borrowed(&assets.rgb);
    }
    let mut img = assets.rgb.clone();
    for id in state.removed() {
        if let Some(o) = state.scene().object(*id) {
            for (x, y) in o.modal_mask.pixels() {
                img.put_pixel(x as u32, y as u32, synth::BIN_COLOR);
            }
        }
    }
    Cow::Owned(img)
}

#[allow(clippy::too_many_arguments)]
pub fn propose_step(
    state: &SceneState,
    target: Option<ObjectId>,
    assets: &SceneAssets,
    localizer: &Localizer,
    reasoner: &mut dyn Reasoner,
    instruction: &str,
    history: &[Decision],
    style: &MarkStyle,
    step_seed: u64,
) -> Proposal {
    let mut exchanges = Vec::new();
    let mut flags = Vec::new();
    let image = state_image(assets, state);
    let fail = |msg: String, keypoints, exchanges, flags| Proposal {
        keypoints,
        registry: None,
        annotated: image.clone().into_owned(),
        localization: LocalizationScores::default(),
        decision: Err(msg),
        decided_object: None,
        exchanges,
        flags,
    };
    let keypoints = match localizer.localize(state, &image, step_seed, &mut exchanges, &mut flags) {
        Ok(k) if k.is_empty() => return fail("localizer found no objects".into(), k, exchanges, flags),
        Ok(k) => k,
        Err(e) => return fail(format!("localization failed: {e}"), Vec::new(), exchanges, flags),
    };
    let localization = eval_localization_live(&keypoints, state);
    let (annotated, registry) = match render_marks(&image, &keypoints, style) {
        Ok(r) => r,
        Err(e) => return fail(format!("annotation failed: {e}"), keypoints, exchanges, flags),
    };
    if !registry.collisions.is_empty() {
        flags.push(format!("{} overlapping mark pair(s)", registry.collisions.len()));
    }
    let ctx = DecisionContext {
        annotated: &annotated,
        registry: &registry,
        instruction,
        history,
        ground_truth: target.map(|target| GroundTruth { state, target }),
    };
    let decision = reasoner.decide(&ctx).map_err(|e| format!("reasoner error: {e}"));
    exchanges.extend(reasoner.take_exchanges());
    let decided_object = decision.as_ref().ok().and_then(|d| registry.get(d.mark_id)).and_then(|m| m.object_hint);
    Proposal {
        keypoints,
        registry: Some(registry),
        annotated,
        localization,
        decision,
        decided_object,
        exchanges,
        flags,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub resolved_object: Option<ObjectId>,
    pub class_mismatch: bool,
    pub predicted_mask: Option<Mask>,
    pub best_valid_iou: Option<f64>,
    pub pose: Option<GraspPose>,
    pub pose_error: Option<String>,
    pub grasp_point: Option<Point>,
    pub grasp_object: Option<ObjectId>,
    pub failures: Vec<FailureKind>,
    pub grasped_id: Option<ObjectId>,
}

/// Segment, estimate the pose and simulate the grasp. With `valid` unknown
/// the S check is skipped and P means the grasp point hit no live object.
/// The pose is always estimated; the arm only moves when no failure so far
/// stops the episode under `stop`. The grasped object is the one under the
/// grasp point.
#[allow(clippy::too_many_arguments)]
pub fn execute_decision(
    state: &SceneState,
    valid: Option<&BTreeSet<ObjectId>>,
    registry: &MarkRegistry,
    decision: &Decision,
    assets: &SceneAssets,
    execution: &ExecutionModel,
    stop: StopSetting,
    gripper_max: f64,
    rng: &mut ChaCha8Rng,
) -> Execution {
    let mut out = Execution {
        resolved_object: None,
        class_mismatch: false,
        predicted_mask: None,
        best_valid_iou: None,
        pose: None,
        pose_error: None,
        grasp_point: None,
        grasp_object: None,
        failures: Vec::new(),
        grasped_id: None,
    };
    let Some((obj_id, mismatch)) = resolve_decision(state, registry, decision) else {
        out.failures.push(FailureKind::S);
        return out;
    };
    let scene = state.scene();
    let mask = scene.object(obj_id).expect("resolved object exists").modal_mask.clone();
    out.resolved_object = Some(obj_id);
    out.class_mismatch = mismatch;
    if let Some(valid) = valid {
        let best = valid
            .iter()
            .filter_map(|v| scene.object(*v))
            .map(|o| mask_iou(&mask, &o.modal_mask).unwrap_or(0.0))
            .fold(0.0, f64::max);
        out.best_valid_iou = Some(best);
        if best < SUCCESS_IOU {
            out.failures.push(FailureKind::S);
        }
    }

    let pose = grasp_proxy(&mask, &assets.depth, Some(&assets.intrinsics), gripper_max)
        .and_then(|p| p.image_point(&assets.intrinsics).map(|uv| (p, uv)));
    out.predicted_mask = Some(mask);
    let (pose, (u, v)) = match pose {
        Ok(x) => x,
        Err(e) => {
            out.pose_error = Some(e.to_string());
            out.failures.push(FailureKind::P);
            return out;
        }
    };
    out.pose = Some(pose);
    out.grasp_point = Some(Point::new(u, v));
    let under: Vec<ObjectId> =
        state.live_objects().filter(|o| o.modal_mask.contains_point(u, v)).map(|o| o.id).collect();
    let hit = match valid {
        Some(valid) => under.iter().find(|id| valid.contains(id)).or(under.first()).copied(),
        None => under.first().copied(),
    };
    out.grasp_object = hit;
    let on_valid = match (valid, hit) {
        (Some(valid), Some(id)) => valid.contains(&id),
        (None, Some(_)) => true,
        (_, None) => false,
    };
    if !on_valid {
        out.failures.push(FailureKind::P);
        return out;
    }
    if out.failures.iter().any(|f| stop.terminates_on(*f)) {
        return out;
    }
    if rng.random_bool(execution.motion_failure_prob.clamp(0.0, 1.0)) {
        out.failures.push(FailureKind::M);
        return out;
    }
    out.grasped_id = hit;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSettings {
    pub stop: StopSetting,
    pub execution: ExecutionModel,
    /// Defaults to `2 * l + 3`.
    pub step_cap: Option<usize>,
    pub mark_style: MarkStyle,
    pub gripper_max_width: f64,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            stop: StopSetting::Spm,
            execution: ExecutionModel::default(),
            step_cap: None,
            mark_style: MarkStyle::default(),
            gripper_max_width: DEFAULT_GRIPPER_MAX_WIDTH_M,
        }
    }
}

pub fn default_step_cap(l: usize) -> usize {
    2 * l + 3
}

/// Runs one instruction-driven episode to target grasp, a terminating
/// failure or the step cap.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    scenario: &Scenario,
    instruction_index: usize,
    scene: &Arc<Scene>,
    assets: &SceneAssets,
    localizer: &Localizer,
    reasoner: &mut dyn Reasoner,
    settings: &EpisodeSettings,
    seed: u64,
) -> Result<EpisodeRecord, EpisodeError> {
    if reasoner.requires_object_hints() && !localizer.provides_hints() {
        return Err(EpisodeError::Config(format!(
            "{} reasoner needs object-tied keypoints, which the {} localizer does not provide",
            reasoner.name(),
            localizer.name()
        )));
    }
    if scene.scene_id() != scenario.scene_id {
        return Err(EpisodeError::UnknownScene(scenario.scene_id.clone()));
    }
    let instruction = scenario
        .instructions
        .get(instruction_index)
        .ok_or_else(|| EpisodeError::MissingInstruction {
            scenario_id: scenario.scenario_id.clone(),
            index: instruction_index,
        })?
        .clone();
    let target = scenario.target_id;
    let mut state = SceneState::new(scene.clone());
    let l = state.minimal_steps(target)?;
    let cap = settings.step_cap.unwrap_or_else(|| default_step_cap(l));
    let mut motion_rng = seed::rng(seed::derive(seed, "motion"));
    let mut history: Vec<Decision> = Vec::new();
    let mut steps = Vec::new();
    let mut terminated_by = Termination::StepCap;

    for step_index in 1..=cap {
        let valid = state.valid_pick_set(target)?;
        let proposal = propose_step(
            &state,
            Some(target),
            assets,
            localizer,
            reasoner,
            &instruction,
            &history,
            &settings.mark_style,
            seed::derive(seed, &format!("step/{step_index}")),
        );
        let mut step = StepOutcome {
            step_index,
            keypoints: proposal.keypoints,
            localization: proposal.localization,
            decision: None,
            decision_error: None,
            decided_object: proposal.decided_object,
            resolved_object: None,
            class_mismatch: false,
            predicted_mask: None,
            best_valid_iou: None,
            pose: None,
            pose_error: None,
            grasp_point: None,
            grasp_object: None,
            gt_valid_set: valid.iter().copied().collect(),
            failure: None,
            failures: Vec::new(),
            grasped_id: None,
            flags: proposal.flags,
            exchanges: proposal.exchanges,
        };
        match (proposal.decision, proposal.registry) {
            (Ok(decision), Some(registry)) => {
                let ex = execute_decision(
                    &state,
                    Some(&valid),
                    &registry,
                    &decision,
                    assets,
                    &settings.execution,
                    settings.stop,
                    settings.gripper_max_width,
                    &mut motion_rng,
                );
                step.resolved_object = ex.resolved_object;
                step.decided_object = step.decided_object.or(ex.resolved_object);
                step.class_mismatch = ex.class_mismatch;
                step.predicted_mask = ex.predicted_mask;
                step.best_valid_iou = ex.best_valid_iou;
                step.pose = ex.pose;
                step.pose_error = ex.pose_error;
                step.grasp_point = ex.grasp_point;
                step.grasp_object = ex.grasp_object;
                step.failures = ex.failures;
                step.grasped_id = ex.grasped_id;
                if ex.class_mismatch {
                    step.flags.push(format!("class {:?} matches no live object", decision.class_name));
                }
                step.decision = Some(decision.clone());
                history.push(decision);
            }
            (Ok(_), None) => unreachable!("a decision implies a registry"),
            (Err(e), _) => {
                step.decision_error = Some(e);
                step.failures.push(FailureKind::S);
            }
        }
        step.failure = step.failures.first().copied();
        let stop = step.failures.iter().any(|f| settings.stop.terminates_on(*f));
        if let Some(id) = step.grasped_id {
            state = state.remove_object(id)?;
        }
        let grasped_target = step.grasped_id == Some(target);
        steps.push(step);
        if stop {
            terminated_by = Termination::Failure;
            break;
        }
        if grasped_target {
            terminated_by = Termination::TargetGrasped;
            break;
        }
    }
    let success = terminated_by == Termination::TargetGrasped;
    Ok(EpisodeRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        run: String::new(),
        episode_key: scenario.episode_key(instruction_index),
        scenario_id: scenario.scenario_id.clone(),
        scene_id: scenario.scene_id.clone(),
        target_id: target,
        difficulty: scenario.difficulty,
        instruction_index,
        instruction,
        stop: settings.stop,
        reasoner: reasoner.name().to_string(),
        localizer: localizer.name().to_string(),
        seed,
        p: steps.len(),
        steps,
        success,
        l,
        terminated_by,
        error: None,
        flags: assets.flags.clone(),
    })
}

#[derive(Debug, Clone)]
pub enum ReasonerSpec {
    Oracle,
    Scripted(Arc<ScriptBook>),
    Remote(Arc<RemoteClient>),
}

impl ReasonerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ReasonerSpec::Oracle => "oracle",
            ReasonerSpec::Scripted(_) => "scripted",
            ReasonerSpec::Remote(_) => "remote",
        }
    }

    /// Fresh reasoner for one episode.
    pub fn build(&self, episode_key: &str) -> Result<Box<dyn Reasoner>, EpisodeError> {
        Ok(match self {
            ReasonerSpec::Oracle => Box::new(OracleReasoner),
            ReasonerSpec::Scripted(book) => {
                Box::new(book.reasoner_for(episode_key).map_err(|e| EpisodeError::Config(e.to_string()))?)
            }
            ReasonerSpec::Remote(client) => Box::new(RemoteReasoner::new(client.clone())),
        })
    }
}

/// One column of a batch's config matrix.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub label: String,
    pub settings: EpisodeSettings,
    pub localizer: Localizer,
    pub reasoner: ReasonerSpec,
    pub seed: u64,
}

struct Job<'a> {
    run: &'a RunConfig,
    scenario: &'a Scenario,
    instruction_index: usize,
}

fn error_record(job: &Job, scene: Option<&Arc<Scene>>, message: String) -> EpisodeRecord {
    let key = job.scenario.episode_key(job.instruction_index);
    let l = scene.and_then(|s| SceneState::new(s.clone()).minimal_steps(job.scenario.target_id).ok()).unwrap_or(0);
    EpisodeRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        run: job.run.label.clone(),
        seed: seed::derive(job.run.seed, &key),
        episode_key: key,
        scenario_id: job.scenario.scenario_id.clone(),
        scene_id: job.scenario.scene_id.clone(),
        target_id: job.scenario.target_id,
        difficulty: job.scenario.difficulty,
        instruction_index: job.instruction_index,
        instruction: job.scenario.instructions.get(job.instruction_index).cloned().unwrap_or_default(),
        stop: job.run.settings.stop,
        reasoner: job.run.reasoner.name().to_string(),
        localizer: job.run.localizer.name().to_string(),
        steps: Vec::new(),
        success: false,
        l,
        p: 0,
        terminated_by: Termination::Error,
        error: Some(message),
        flags: Vec::new(),
    }
}

fn run_job(job: &Job, library: &SceneLibrary) -> EpisodeRecord {
    let key = job.scenario.episode_key(job.instruction_index);
    let episode_seed = seed::derive(job.run.seed, &key);
    let (Some(scene), Some(assets)) = (library.scene(&job.scenario.scene_id), library.assets(&job.scenario.scene_id))
    else {
        return error_record(job, None, EpisodeError::UnknownScene(job.scenario.scene_id.clone()).to_string());
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        let mut reasoner = job.run.reasoner.build(&key)?;
        run_episode(
            job.scenario,
            job.instruction_index,
            scene,
            &assets,
            &job.run.localizer,
            reasoner.as_mut(),
            &job.run.settings,
            episode_seed,
        )
    }));
    match outcome {
        Ok(Ok(mut rec)) => {
            rec.run = job.run.label.clone();
            rec
        }
        Ok(Err(e)) => error_record(job, Some(scene), e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "episode panicked".into());
            error_record(job, Some(scene), format!("internal error: {msg}"))
        }
    }
}

/// Runs every (run, scenario, instruction) episode on `workers` threads.
/// `sink` sees records in completion order; the returned list is in
/// canonical order (run, scenario id, instruction index). Scenarios without
/// instructions yield one error record.
pub fn run_batch(
    set: &ScenarioSet,
    library: &SceneLibrary,
    matrix: &[RunConfig],
    workers: usize,
    sink: &mut dyn FnMut(&EpisodeRecord),
) -> Vec<EpisodeRecord> {
    let mut scenarios: Vec<&Scenario> = set.scenarios.iter().collect();
    scenarios.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
    let mut jobs = Vec::new();
    for run in matrix {
        for s in &scenarios {
            for i in 0..s.instructions.len().max(1) {
                jobs.push(Job { run, scenario: s, instruction_index: i });
            }
        }
    }
    let mut slots: Vec<Option<EpisodeRecord>> = vec![None; jobs.len()];
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(jobs.len().max(1)) {
            let tx = tx.clone();
            let (jobs, next) = (&jobs, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                if tx.send((i, run_job(job, library))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, rec) in rx {
            sink(&rec);
            slots[i] = Some(rec);
        }
    });
    slots.into_iter().map(|r| r.expect("every job reports")).collect()
}
