//! Reasoners: pick the next mark to grasp given the annotated image, the
//! instruction and the episode history.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompting::{
    build_identify_prompt, build_reason_prompt, encode_png, parse_decision, parse_identification, Decision,
    MarkRegistry, PromptError,
};
use crate::remote::{EndpointConfig, Exchange, RemoteClient, RemoteError};
use crate::scene::{ObjectId, SceneError, SceneState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasonError {
    #[error("the oracle needs ground truth for the current state")]
    MissingGroundTruth,
    #[error("the oracle needs keypoints tied to objects; this localizer provides none")]
    MissingHints,
    #[error("object {0} is a valid pick but carries no mark")]
    Unmarked(ObjectId),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("scripted reasoner ran out of decisions after {consumed}")]
    FixtureExhausted { consumed: usize },
    #[error("no scripted decisions for episode {0:?}")]
    NoScript(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("expected 3 instructions, got {0}")]
    InstructionCount(usize),
}

/// Live state and target, visible only to reasoners that read ground truth.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub state: &'a SceneState,
    pub target: ObjectId,
}

pub struct DecisionContext<'a> {
    pub annotated: &'a RgbImage,
    pub registry: &'a MarkRegistry,
    pub instruction: &'a str,
    pub history: &'a [Decision],
    pub ground_truth: Option<GroundTruth<'a>>,
}

pub trait Reasoner: Send {
    fn name(&self) -> &str;

    /// Whether the reasoner maps marks back to objects through localizer
    /// hints, which remote localizers do not provide.
    fn requires_object_hints(&self) -> bool {
        false
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<Decision, ReasonError>;

    /// Mark of the object the instruction describes, ignoring obstruction.
    fn identify(&mut self, ctx: &DecisionContext) -> Result<u32, ReasonError>;

    fn take_exchanges(&mut self) -> Vec<Exchange> {
        Vec::new()
    }
}

/// The optimal policy: the target when it is free, otherwise the lowest-id
/// valid pick.
pub fn oracle_decide(state: &SceneState, target: ObjectId, registry: &MarkRegistry) -> Result<Decision, ReasonError> {
    if !registry.has_object_hints() {
        return Err(ReasonError::MissingHints);
    }
    let valid = state.valid_pick_set(target)?;
    let pick = *valid.iter().next().expect("valid pick set is never empty");
    let mark = registry.mark_for_object(pick).ok_or(ReasonError::Unmarked(pick))?;
    let class = &state.scene().object(pick).expect("live object").class_name;
    let mut d = Decision::new(mark, class.clone(), pick == target);
    d.rationale = if pick == target {
        "target is free".into()
    } else {
        format!("object {} must be removed before the target", pick)
    };
    Ok(d)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct OracleReasoner;

impl Reasoner for OracleReasoner {
    fn name(&self) -> &str {
        "oracle"
    }

    fn requires_object_hints(&self) -> bool {
        true
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<Decision, ReasonError> {
        let gt = ctx.ground_truth.ok_or(ReasonError::MissingGroundTruth)?;
        oracle_decide(gt.state, gt.target, ctx.registry)
    }

    fn identify(&mut self, ctx: &DecisionContext) -> Result<u32, ReasonError> {
        let gt = ctx.ground_truth.ok_or(ReasonError::MissingGroundTruth)?;
        if !ctx.registry.has_object_hints() {
            return Err(ReasonError::MissingHints);
        }
        ctx.registry.mark_for_object(gt.target).ok_or(ReasonError::Unmarked(gt.target))
    }
}

/// Replays a fixed list of decisions; identification answers with the next
/// entry's mark.
#[derive(Debug, Clone)]
pub struct ScriptedReasoner {
    script: Vec<Decision>,
    cursor: usize,
}

impl ScriptedReasoner {
    pub fn new(script: Vec<Decision>) -> Self {
        Self { script, cursor: 0 }
    }

    fn next(&mut self) -> Result<Decision, ReasonError> {
        let d = self.script.get(self.cursor).cloned().ok_or(ReasonError::FixtureExhausted { consumed: self.cursor })?;
        self.cursor += 1;
        Ok(d)
    }
}

impl Reasoner for ScriptedReasoner {
    fn name(&self) -> &str {
        "scripted"
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<Decision, ReasonError> {
        let d = self.next()?;
        d.validate(ctx.registry)?;
        Ok(d)
    }

    fn identify(&mut self, ctx: &DecisionContext) -> Result<u32, ReasonError> {
        let d = self.next()?;
        d.validate(ctx.registry)?;
        Ok(d.mark_id)
    }
}

/// Decision scripts keyed by episode key, with `"*"` as the fallback.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptBook(pub HashMap<String, Vec<Decision>>);

impl ScriptBook {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn reasoner_for(&self, episode_key: &str) -> Result<ScriptedReasoner, ReasonError> {
        self.0
            .get(episode_key)
            .or_else(|| self.0.get("*"))
            .map(|s| ScriptedReasoner::new(s.clone()))
            .ok_or_else(|| ReasonError::NoScript(episode_key.to_string()))
    }
}

/// Text of the first choice of a chat-completions reply.
pub fn chat_reply_text(body: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("reply is not JSON: {e}"))?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => parts
            .iter()
            .find_map(|p| p.get("text").and_then(Value::as_str).map(str::to_string))
            .ok_or_else(|| "reply content has no text part".to_string()),
        _ => Err("reply has no choices[0].message.content".into()),
    }
}

pub fn chat_request(cfg: &EndpointConfig, prompt: &str, image_png: &[u8]) -> Value {
    let url = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(image_png));
    let mut body = json!({
        "temperature": cfg.temperature,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": url}},
            ],
        }],
    });
    if let Some(model) = &cfg.model {
        body["model"] = Value::String(model.clone());
    }
    body
}

/// Vision-language model behind a chat-completions endpoint.
#[derive(Debug)]
pub struct RemoteReasoner {
    client: Arc<RemoteClient>,
    exchanges: Vec<Exchange>,
}

impl RemoteReasoner {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client, exchanges: Vec::new() }
    }

    fn ask<T>(
        &mut self,
        prompt: &str,
        image: &RgbImage,
        parse: impl Fn(&str) -> Result<T, PromptError>,
    ) -> Result<T, ReasonError> {
        let body = chat_request(self.client.config(), prompt, &encode_png(image));
        // reply shape problems are retried; a well-formed reply naming a bad
        // mark is the model's answer and is returned as-is
        let text = self.client.post_json(&body, &mut self.exchanges, chat_reply_text)?;
        Ok(parse(&text)?)
    }
}

impl Reasoner for RemoteReasoner {
    fn name(&self) -> &str {
        "remote"
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<Decision, ReasonError> {
        let prompt = build_reason_prompt(ctx.instruction, ctx.registry, ctx.history);
        let registry = ctx.registry;
        self.ask(&prompt, ctx.annotated, |t| parse_decision(t, registry))
    }

    fn identify(&mut self, ctx: &DecisionContext) -> Result<u32, ReasonError> {
        let prompt = build_identify_prompt(ctx.instruction, ctx.registry);
        let registry = ctx.registry;
        self.ask(&prompt, ctx.annotated, |t| parse_identification(t, registry))
    }

    fn take_exchanges(&mut self) -> Vec<Exchange> {
        std::mem::take(&mut self.exchanges)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptScore {
    /// Fraction of the three instructions that identified the target.
    pub score: f64,
    pub correct: Vec<bool>,
    pub errors: Vec<Option<String>>,
}

/// Instruction quality: how many of the three descriptions let `reasoner`
/// pick out the target on the initial scene.
pub fn gpt_score(
    annotated: &RgbImage,
    registry: &MarkRegistry,
    instructions: &[String],
    state: &SceneState,
    target: ObjectId,
    reasoner: &mut dyn Reasoner,
) -> Result<GptScore, ReasonError> {
    if instructions.len() != 3 {
        return Err(ReasonError::InstructionCount(instructions.len()));
    }
    let target_mark = registry.mark_for_object(target);
    let mut correct = Vec::new();
    let mut errors = Vec::new();
    for text in instructions {
        let ctx = DecisionContext {
            annotated,
            registry,
            instruction: text,
            history: &[],
            ground_truth: Some(GroundTruth { state, target }),
        };
        match reasoner.identify(&ctx) {
            Ok(m) => {
                correct.push(Some(m) == target_mark);
                errors.push(None);
            }
            Err(e) => {
                correct.push(false);
                errors.push(Some(e.to_string()));
            }
        }
    }
    let score = correct.iter().filter(|c| **c).count() as f64 / 3.0;
    Ok(GptScore { score, correct, errors })
}

/// Sentence embeddings from an outside model, for instruction similarity.
pub trait EmbeddingProvider {
    fn embed(&self, text: &str) -> Result<Vec<f64>, String>;
}
