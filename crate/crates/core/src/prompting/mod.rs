//! Numbered-mark visual prompts: mark assignment and rendering, prompt
//! assembly and parsing of the reasoner's reply.

mod parse;
mod prompt;
mod render;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{ObjectId, Point};

pub use parse::{parse_decision, parse_identification};
pub use prompt::{build_identify_prompt, build_reason_prompt};
pub use render::{encode_png, render_marks, MarkStyle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("no keypoints to annotate")]
    EmptyKeypoints,
    #[error("mark {mark_id} at ({u}, {v}) lies outside the {width}x{height} image")]
    OutOfBounds { mark_id: u32, u: f64, v: f64, width: u32, height: u32 },
    #[error("mark ids must be 1..={expected} without gaps, got {got:?}")]
    InvalidMarks { expected: usize, got: Vec<u32> },
    #[error("reply contains no decision object: {excerpt:?}")]
    NoDecision { excerpt: String },
    #[error("reply names mark {mark_id}, which is not annotated (marks 1..={count})")]
    UnknownMark { mark_id: i64, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub object_hint: Option<ObjectId>,
    pub point: Point,
    pub mark_id: u32,
}

/// Numbers points 1..K in reading order: by row (`v`), then column (`u`).
pub fn assign_marks(points: Vec<(Point, Option<ObjectId>)>) -> Vec<Keypoint> {
    let mut points = points;
    points.sort_by(|a, b| a.0.v.total_cmp(&b.0.v).then(a.0.u.total_cmp(&b.0.u)).then(a.1.cmp(&b.1)));
    points
        .into_iter()
        .enumerate()
        .map(|(i, (point, object_hint))| Keypoint { object_hint, point, mark_id: i as u32 + 1 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkEntry {
    pub mark_id: u32,
    pub point: Point,
    pub object_hint: Option<ObjectId>,
}

/// Two marks closer than the marker radius; both are drawn regardless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkCollision {
    pub first: u32,
    pub second: u32,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkRegistry {
    pub width: u32,
    pub height: u32,
    pub marks: Vec<MarkEntry>,
    pub collisions: Vec<MarkCollision>,
}

impl MarkRegistry {
    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn get(&self, mark_id: u32) -> Option<&MarkEntry> {
        mark_id.checked_sub(1).and_then(|i| self.marks.get(i as usize))
    }

    pub fn contains(&self, mark_id: u32) -> bool {
        self.get(mark_id).is_some()
    }

    /// First mark placed on `id` by a hint-carrying localizer.
    pub fn mark_for_object(&self, id: ObjectId) -> Option<u32> {
        self.marks.iter().find(|m| m.object_hint == Some(id)).map(|m| m.mark_id)
    }

    pub fn mark_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.marks.iter().map(|m| m.mark_id)
    }

    pub fn has_object_hints(&self) -> bool {
        !self.marks.is_empty() && self.marks.iter().all(|m| m.object_hint.is_some())
    }
}

/// A reasoner's choice of the next object to grasp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub mark_id: u32,
    pub class_name: String,
    pub is_target: bool,
    #[serde(default)]
    pub rationale: String,
}

impl Decision {
    pub fn new(mark_id: u32, class_name: impl Into<String>, is_target: bool) -> Self {
        Self { mark_id, class_name: class_name.into(), is_target, rationale: String::new() }
    }

    pub fn validate(&self, registry: &MarkRegistry) -> Result<(), PromptError> {
        if registry.contains(self.mark_id) {
            Ok(())
        } else {
            Err(PromptError::UnknownMark { mark_id: self.mark_id as i64, count: registry.len() })
        }
    }
}
