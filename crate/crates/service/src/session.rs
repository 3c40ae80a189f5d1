//! Interactive episodes: an operator issues one instruction at a time and
//! confirms, overrides or rejects each proposed grasp.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use graspbench_core::episode::{
    default_step_cap, execute_decision, propose_step, state_image, EpisodeSettings, Execution, ExecutionModel,
    FailureKind, Localizer, Proposal, SceneAssets, StopSetting,
};
use graspbench_core::localization::LocalizationScores;
use graspbench_core::prompting::{encode_png, Decision, MarkEntry};
use graspbench_core::reasoning::Reasoner;
use graspbench_core::scene::{Difficulty, ObjectId, ObjectInstance, Point, Scene, SceneState};
use graspbench_core::seed;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingInstruction,
    DecidedPendingConfirm,
    Executing,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    TargetGrasped,
    Failure,
    StepCap,
    /// Every object was removed from a target-free episode.
    Cleared,
}

/// Who chose the executed mark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Model,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionError {
    EmptyInstruction,
    DecisionInFlight,
    Executing,
    Finished,
    NoPendingDecision,
    /// The reasoner produced no decision; only an override can be executed.
    NoDecision(String),
    UnknownMark(u32),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::EmptyInstruction => "EmptyInstruction",
            SessionError::DecisionInFlight => "DecisionInFlight",
            SessionError::Executing => "Executing",
            SessionError::Finished => "EpisodeFinished",
            SessionError::NoPendingDecision => "NoPendingDecision",
            SessionError::NoDecision(_) => "NoDecision",
            SessionError::UnknownMark(_) => "UnknownMark",
        }
    }

    pub fn message(&self) -> String {
        match self {
            SessionError::EmptyInstruction => "instruction text is empty".into(),
            SessionError::DecisionInFlight => "a decision is already being computed for this episode".into(),
            SessionError::Executing => "a grasp is being executed".into(),
            SessionError::Finished => "the episode has finished".into(),
            SessionError::NoPendingDecision => "there is no pending decision to confirm".into(),
            SessionError::NoDecision(e) => format!("the pending proposal has no decision ({e}); override or reject it"),
            SessionError::UnknownMark(m) => format!("mark {m} is not on the pending image"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preview {
    pub resolved_object: Option<ObjectId>,
    pub best_valid_iou: Option<f64>,
    pub grasp_object: Option<ObjectId>,
    /// Failures a grasp would show before the motion draw.
    pub failures: Vec<FailureKind>,
}

/// Ground truth shown next to a proposal when the episode has a target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub target_id: ObjectId,
    pub difficulty: Difficulty,
    pub valid_pick_set: Vec<ObjectId>,
    pub minimal_steps: usize,
    pub preview: Option<Preview>,
}

struct Pending {
    instruction: String,
    proposal: Proposal,
    png: Vec<u8>,
    diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionView {
    pub resolved_object: Option<ObjectId>,
    pub best_valid_iou: Option<f64>,
    pub pose_error: Option<String>,
    pub grasp_point: Option<Point>,
    pub grasp_object: Option<ObjectId>,
    pub failures: Vec<FailureKind>,
    pub grasped_id: Option<ObjectId>,
}

impl From<&Execution> for ExecutionView {
    fn from(ex: &Execution) -> Self {
        Self {
            resolved_object: ex.resolved_object,
            best_valid_iou: ex.best_valid_iou,
            pose_error: ex.pose_error.clone(),
            grasp_point: ex.grasp_point,
            grasp_object: ex.grasp_object,
            failures: ex.failures.clone(),
            grasped_id: ex.grasped_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub index: usize,
    pub instruction: String,
    pub accepted: bool,
    pub source: Source,
    /// The mark that was executed; absent for rejected proposals.
    pub decision: Option<Decision>,
    pub model_decision: Option<Decision>,
    pub decision_error: Option<String>,
    pub valid_pick_set: Vec<ObjectId>,
    pub execution: Option<ExecutionView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectView {
    pub id: ObjectId,
    pub class: String,
    pub center: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionView {
    pub instruction: String,
    pub decision: Option<Decision>,
    pub decision_error: Option<String>,
    pub decided_object: Option<ObjectId>,
    pub marks: Vec<MarkEntry>,
    pub localization: LocalizationScores,
    pub flags: Vec<String>,
    pub image: String,
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateView {
    pub episode_id: String,
    pub scene_id: String,
    pub target_id: Option<ObjectId>,
    pub phase: Phase,
    pub deciding: bool,
    pub outcome: Option<Outcome>,
    pub stop: String,
    pub reasoner: String,
    pub localizer: String,
    pub seed: u64,
    pub steps_taken: usize,
    pub step_cap: Option<usize>,
    pub live: Vec<ObjectView>,
    pub removed: Vec<ObjectId>,
    pub log: Vec<LogEntry>,
    pub pending: Option<DecisionView>,
}

pub fn object_views<'a>(objects: impl Iterator<Item = &'a ObjectInstance>) -> Vec<ObjectView> {
    objects.map(|o| ObjectView { id: o.id, class: o.class_name.clone(), center: o.center }).collect()
}

/// Work for one reasoner round trip, run off the async executor.
pub struct DecideJob {
    state: SceneState,
    target: Option<ObjectId>,
    assets: Arc<SceneAssets>,
    localizer: Localizer,
    reasoner: Box<dyn Reasoner>,
    instruction: String,
    history: Vec<Decision>,
    settings: EpisodeSettings,
    step_seed: u64,
}

pub struct Decided {
    instruction: String,
    proposal: Proposal,
    reasoner: Box<dyn Reasoner>,
}

impl DecideJob {
    pub fn run(self) -> Decided {
        let DecideJob { state, target, assets, localizer, mut reasoner, instruction, history, settings, step_seed } =
            self;
        let proposal = catch_unwind(AssertUnwindSafe(|| {
            propose_step(
                &state,
                target,
                &assets,
                &localizer,
                reasoner.as_mut(),
                &instruction,
                &history,
                &settings.mark_style,
                step_seed,
            )
        }))
        .unwrap_or_else(|_| Proposal {
            keypoints: Vec::new(),
            registry: None,
            annotated: state_image(&assets, &state).into_owned(),
            localization: LocalizationScores::default(),
            decision: Err("internal error while proposing".into()),
            decided_object: None,
            exchanges: Vec::new(),
            flags: Vec::new(),
        });
        Decided { instruction, proposal, reasoner }
    }
}

/// Work for one confirmed grasp.
pub struct ExecuteJob {
    state: SceneState,
    valid: Option<BTreeSet<ObjectId>>,
    pending: Pending,
    decision: Decision,
    source: Source,
    assets: Arc<SceneAssets>,
    settings: EpisodeSettings,
    rng: ChaCha8Rng,
}

pub struct Executed {
    pending: Pending,
    decision: Decision,
    source: Source,
    valid: Option<BTreeSet<ObjectId>>,
    execution: Execution,
    rng: ChaCha8Rng,
}

impl ExecuteJob {
    pub fn run(mut self) -> Executed {
        let registry = self.pending.proposal.registry.as_ref().expect("a decision implies a registry");
        let execution = execute_decision(
            &self.state,
            self.valid.as_ref(),
            registry,
            &self.decision,
            &self.assets,
            &self.settings.execution,
            self.settings.stop,
            self.settings.gripper_max_width,
            &mut self.rng,
        );
        Executed {
            pending: self.pending,
            decision: self.decision,
            source: self.source,
            valid: self.valid,
            execution,
            rng: self.rng,
        }
    }
}

pub struct SessionSpec {
    pub scene: Arc<Scene>,
    pub assets: Arc<SceneAssets>,
    pub target: Option<ObjectId>,
    pub localizer: Localizer,
    pub reasoner: Box<dyn Reasoner>,
    pub settings: EpisodeSettings,
    pub seed: u64,
}

pub struct Session {
    id: String,
    assets: Arc<SceneAssets>,
    target: Option<ObjectId>,
    state: SceneState,
    localizer: Localizer,
    reasoner: Option<Box<dyn Reasoner>>,
    reasoner_name: String,
    settings: EpisodeSettings,
    seed: u64,
    motion_rng: Option<ChaCha8Rng>,
    step_cap: Option<usize>,
    history: Vec<Decision>,
    log: Vec<LogEntry>,
    pending: Option<Pending>,
    phase: Phase,
    outcome: Option<Outcome>,
    instructions_issued: usize,
}

impl Session {
    pub fn new(id: String, spec: SessionSpec) -> Self {
        let state = SceneState::new(spec.scene);
        let step_cap = spec
            .target
            .and_then(|t| state.minimal_steps(t).ok())
            .map(|l| spec.settings.step_cap.unwrap_or_else(|| default_step_cap(l)));
        Self {
            id,
            assets: spec.assets,
            target: spec.target,
            state,
            localizer: spec.localizer,
            reasoner_name: spec.reasoner.name().to_string(),
            reasoner: Some(spec.reasoner),
            settings: spec.settings,
            seed: spec.seed,
            motion_rng: Some(seed::rng(seed::derive(spec.seed, "motion"))),
            step_cap,
            history: Vec::new(),
            log: Vec::new(),
            pending: None,
            phase: Phase::AwaitingInstruction,
            outcome: None,
            instructions_issued: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn deciding(&self) -> bool {
        self.reasoner.is_none()
    }

    fn steps_taken(&self) -> usize {
        self.log.iter().filter(|e| e.accepted).count()
    }

    fn ready(&self) -> Result<(), SessionError> {
        match self.phase {
            Phase::Done => Err(SessionError::Finished),
            Phase::Executing => Err(SessionError::Executing),
            _ if self.deciding() => Err(SessionError::DecisionInFlight),
            _ => Ok(()),
        }
    }

    /// Starts a decision for `text`, discarding any pending one.
    pub fn begin_instruct(&mut self, text: &str) -> Result<DecideJob, SessionError> {
        self.ready()?;
        let text = text.trim();
        if text.is_empty() {
            return Err(SessionError::EmptyInstruction);
        }
        self.instructions_issued += 1;
        self.pending = None;
        self.phase = Phase::AwaitingInstruction;
        Ok(DecideJob {
            state: self.state.clone(),
            target: self.target,
            assets: self.assets.clone(),
            localizer: self.localizer.clone(),
            reasoner: self.reasoner.take().expect("checked by ready"),
            instruction: text.to_string(),
            history: self.history.clone(),
            settings: self.settings.clone(),
            step_seed: seed::derive(self.seed, &format!("instruct/{}", self.instructions_issued)),
        })
    }

    pub fn finish_instruct(&mut self, decided: Decided) {
        let Decided { instruction, proposal, reasoner } = decided;
        self.reasoner = Some(reasoner);
        let diagnostics = self.diagnostics(&proposal);
        let png = encode_png(&proposal.annotated);
        self.pending = Some(Pending { instruction, proposal, png, diagnostics });
        self.phase = Phase::DecidedPendingConfirm;
    }

    fn diagnostics(&self, proposal: &Proposal) -> Option<Diagnostics> {
        let target = self.target?;
        let valid = self.state.valid_pick_set(target).ok()?;
        let preview = match (&proposal.decision, &proposal.registry) {
            (Ok(d), Some(registry)) => {
                let ex = execute_decision(
                    &self.state,
                    Some(&valid),
                    registry,
                    d,
                    &self.assets,
                    &ExecutionModel { motion_failure_prob: 0.0 },
                    StopSetting::P,
                    self.settings.gripper_max_width,
                    &mut seed::rng(0),
                );
                Some(Preview {
                    resolved_object: ex.resolved_object,
                    best_valid_iou: ex.best_valid_iou,
                    grasp_object: ex.grasp_object,
                    failures: ex.failures,
                })
            }
            _ => None,
        };
        Some(Diagnostics {
            target_id: target,
            difficulty: self.state.difficulty(target).ok()?,
            valid_pick_set: valid.into_iter().collect(),
            minimal_steps: self.state.minimal_steps(target).ok()?,
            preview,
        })
    }

    /// Rejects (returns `None`) or starts executing the pending decision,
    /// optionally with an operator-chosen mark.
    pub fn begin_confirm(
        &mut self,
        accept: bool,
        override_mark: Option<u32>,
    ) -> Result<Option<ExecuteJob>, SessionError> {
        self.ready()?;
        let Some(pending) = self.pending.take() else {
            return Err(SessionError::NoPendingDecision);
        };
        if !accept {
            let valid = self.valid_list();
            self.log.push(LogEntry {
                index: self.log.len() + 1,
                instruction: pending.instruction,
                accepted: false,
                source: Source::Model,
                decision: None,
                model_decision: pending.proposal.decision.as_ref().ok().cloned(),
                decision_error: pending.proposal.decision.as_ref().err().cloned(),
                valid_pick_set: valid,
                execution: None,
            });
            self.phase = Phase::AwaitingInstruction;
            return Ok(None);
        }
        let chosen = match (override_mark, &pending.proposal.decision) {
            (Some(mark), _) => {
                if !pending.proposal.registry.as_ref().is_some_and(|r| r.contains(mark)) {
                    self.pending = Some(pending);
                    return Err(SessionError::UnknownMark(mark));
                }
                let mut d = Decision::new(mark, "", false);
                d.rationale = "operator override".into();
                Ok((d, Source::Human))
            }
            (None, Ok(d)) => Ok((d.clone(), Source::Model)),
            (None, Err(e)) => Err(SessionError::NoDecision(e.clone())),
        };
        let (decision, source) = match chosen {
            Ok(x) => x,
            Err(e) => {
                self.pending = Some(pending);
                return Err(e);
            }
        };
        self.phase = Phase::Executing;
        Ok(Some(ExecuteJob {
            state: self.state.clone(),
            valid: self.target.and_then(|t| self.state.valid_pick_set(t).ok()),
            pending,
            decision,
            source,
            assets: self.assets.clone(),
            settings: self.settings.clone(),
            rng: self.motion_rng.take().expect("one execution at a time"),
        }))
    }

    pub fn finish_confirm(&mut self, done: Executed) {
        let Executed { pending, decision, source, valid, execution, rng } = done;
        self.motion_rng = Some(rng);
        self.history.push(decision.clone());
        if let Some(id) = execution.grasped_id {
            self.state = self.state.remove_object(id).expect("grasped object is live");
        }
        self.log.push(LogEntry {
            index: self.log.len() + 1,
            instruction: pending.instruction,
            accepted: true,
            source,
            decision: Some(decision),
            model_decision: pending.proposal.decision.as_ref().ok().cloned(),
            decision_error: pending.proposal.decision.as_ref().err().cloned(),
            valid_pick_set: valid.map(|v| v.into_iter().collect()).unwrap_or_default(),
            execution: Some(ExecutionView::from(&execution)),
        });
        self.outcome = if self.target.is_some() && execution.grasped_id == self.target {
            Some(Outcome::TargetGrasped)
        } else if execution.failures.iter().any(|f| self.settings.stop.terminates_on(*f)) {
            Some(Outcome::Failure)
        } else if self.step_cap.is_some_and(|cap| self.steps_taken() >= cap) {
            Some(Outcome::StepCap)
        } else if self.state.live_count() == 0 {
            Some(Outcome::Cleared)
        } else {
            None
        };
        self.phase = if self.outcome.is_some() { Phase::Done } else { Phase::AwaitingInstruction };
    }

    fn valid_list(&self) -> Vec<ObjectId> {
        self.target.and_then(|t| self.state.valid_pick_set(t).ok()).map(|v| v.into_iter().collect()).unwrap_or_default()
    }

    pub fn pending_view(&self) -> Option<DecisionView> {
        let p = self.pending.as_ref()?;
        Some(DecisionView {
            instruction: p.instruction.clone(),
            decision: p.proposal.decision.as_ref().ok().cloned(),
            decision_error: p.proposal.decision.as_ref().err().cloned(),
            decided_object: p.proposal.decided_object,
            marks: p.proposal.registry.as_ref().map(|r| r.marks.clone()).unwrap_or_default(),
            localization: p.proposal.localization,
            flags: p.proposal.flags.clone(),
            image: format!("/episodes/{}/image", self.id),
            diagnostics: p.diagnostics.clone(),
        })
    }

    pub fn view(&self) -> StateView {
        StateView {
            episode_id: self.id.clone(),
            scene_id: self.state.scene().scene_id().to_string(),
            target_id: self.target,
            phase: self.phase,
            deciding: self.deciding(),
            outcome: self.outcome,
            stop: self.settings.stop.to_string(),
            reasoner: self.reasoner_name.clone(),
            localizer: self.localizer.name().to_string(),
            seed: self.seed,
            steps_taken: self.steps_taken(),
            step_cap: self.step_cap,
            live: object_views(self.state.live_objects()),
            removed: self.state.removed().iter().copied().collect(),
            log: self.log.clone(),
            pending: self.pending_view(),
        }
    }

    /// The annotated proposal image, or the current scene when nothing is pending.
    pub fn image_png(&self) -> Vec<u8> {
        match &self.pending {
            Some(p) => p.png.clone(),
            None => encode_png(&state_image(&self.assets, &self.state)),
        }
    }
}
