//! Scenes, occlusion graphs and the ground-truth queries derived from them.
//!
//! An occlusion edge `occluder -> occluded` records how much of the occluded
//! object's amodal area the occluder covers. After pruning weak edges, every
//! surviving edge is read as an obstruction: the occluder has to be removed
//! before the occluded object can be grasped.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Intrinsics;
use crate::mask::Mask;

/// Edges covering less than this fraction of the occluded object are dropped.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Continuous pixel coordinate; `u` grows rightwards, `v` downwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub u: f64,
    pub v: f64,
}

impl Point {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

impl From<[f64; 2]> for Point {
    fn from([u, v]: [f64; 2]) -> Self {
        Self { u, v }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.u, p.v]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("object {0} is not live in this scene state")]
    UnknownTarget(ObjectId),
    #[error("pruned occlusion graph has a cycle through objects {0:?}")]
    Cycle(Vec<ObjectId>),
    #[error("invariant '{invariant}' violated: {detail}")]
    Validation { invariant: &'static str, detail: String },
    #[error("prune threshold must be a finite number >= 0, got {0}")]
    InvalidThreshold(f64),
}

fn violation(invariant: &'static str, detail: impl Into<String>) -> SceneError {
    SceneError::Validation { invariant, detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub class_name: String,
    pub center: Point,
    pub modal_mask: Mask,
    pub amodal_mask: Option<Mask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionEdge {
    pub occluder: ObjectId,
    pub occluded: ObjectId,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRef {
    pub path: String,
    pub scale_mm: f64,
}

/// Unvalidated scene contents, as read from disk or built by hand.
#[derive(Debug, Clone)]
pub struct SceneParts {
    pub scene_id: String,
    pub image: ImageRef,
    pub depth: Option<DepthRef>,
    pub intrinsics: Option<Intrinsics>,
    pub objects: Vec<ObjectInstance>,
    pub edges: Vec<OcclusionEdge>,
}

/// Directed obstruction graph over object ids, after pruning.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObstructionGraph {
    nodes: BTreeSet<ObjectId>,
    /// occluded -> its obstructors
    incoming: BTreeMap<ObjectId, BTreeSet<ObjectId>>,
    /// occluder -> objects it obstructs
    outgoing: BTreeMap<ObjectId, BTreeSet<ObjectId>>,
}

impl ObstructionGraph {
    pub fn nodes(&self) -> &BTreeSet<ObjectId> {
        &self.nodes
    }

    pub fn edge_count(&self) -> usize {
        self.incoming.values().map(BTreeSet::len).sum()
    }

    pub fn contains_edge(&self, occluder: ObjectId, occluded: ObjectId) -> bool {
        self.incoming.get(&occluded).is_some_and(|s| s.contains(&occluder))
    }

    /// `(occluder, occluded)` pairs in lexicographic order.
    pub fn edges(&self) -> Vec<(ObjectId, ObjectId)> {
        let mut out: Vec<_> = self.outgoing.iter().flat_map(|(a, bs)| bs.iter().map(move |b| (*a, *b))).collect();
        out.sort();
        out
    }

    pub fn obstructors_of(&self, id: ObjectId) -> impl Iterator<Item = ObjectId> + '_ {
        self.incoming.get(&id).into_iter().flatten().copied()
    }

    pub fn obstructed_by(&self, id: ObjectId) -> impl Iterator<Item = ObjectId> + '_ {
        self.outgoing.get(&id).into_iter().flatten().copied()
    }

    fn build(
        nodes: impl IntoIterator<Item = ObjectId>,
        edges: &[OcclusionEdge],
        threshold: f64,
    ) -> Result<Self, SceneError> {
        if !threshold.is_finite() || threshold < 0.0 {
            return Err(SceneError::InvalidThreshold(threshold));
        }
        let mut graph = ObstructionGraph { nodes: nodes.into_iter().collect(), ..Default::default() };
        // strictly-below is pruned; an edge sitting exactly on the threshold survives
        for e in edges.iter().filter(|e| e.fraction >= threshold) {
            graph.incoming.entry(e.occluded).or_default().insert(e.occluder);
            graph.outgoing.entry(e.occluder).or_default().insert(e.occluded);
        }
        if let Some(cycle) = graph.find_cycle() {
            return Err(SceneError::Cycle(cycle));
        }
        Ok(graph)
    }

    /// Returns the ids along one directed cycle, if any.
    pub fn find_cycle(&self) -> Option<Vec<ObjectId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Unseen,
            Active,
            Done,
        }
        let mut marks: BTreeMap<ObjectId, Mark> = self.nodes.iter().map(|n| (*n, Mark::Unseen)).collect();
        for &start in &self.nodes {
            if marks[&start] != Mark::Unseen {
                continue;
            }
            // iterative DFS; the stack mirrors the active path
            let mut stack: Vec<(ObjectId, Vec<ObjectId>)> = vec![(start, self.obstructed_by(start).collect())];
            marks.insert(start, Mark::Active);
            while let Some((node, pending)) = stack.last_mut() {
                let node = *node;
                match pending.pop() {
                    Some(next) => match marks.get(&next).copied().unwrap_or(Mark::Done) {
                        Mark::Unseen => {
                            marks.insert(next, Mark::Active);
                            stack.push((next, self.obstructed_by(next).collect()));
                        }
                        Mark::Active => {
                            let pos = stack.iter().position(|(n, _)| *n == next).unwrap();
                            return Some(stack[pos..].iter().map(|(n, _)| *n).collect());
                        }
                        Mark::Done => {}
                    },
                    None => {
                        marks.insert(node, Mark::Done);
                        stack.pop();
                    }
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    scene_id: String,
    image: ImageRef,
    depth: Option<DepthRef>,
    intrinsics: Option<Intrinsics>,
    objects: Vec<ObjectInstance>,
    edges: Vec<OcclusionEdge>,
    graph: ObstructionGraph,
    base_dir: Option<PathBuf>,
}

impl Scene {
    /// Validates every scene invariant and prunes the occlusion graph at the
    /// default threshold.
    pub fn new(parts: SceneParts) -> Result<Self, SceneError> {
        let SceneParts { scene_id, image, depth, intrinsics, objects, edges } = parts;
        let (w, h) = (image.width as usize, image.height as usize);
        if w == 0 || h == 0 {
            return Err(violation("image size positive", format!("{w}x{h}")));
        }
        let mut ids = HashSet::new();
        for o in &objects {
            if !ids.insert(o.id) {
                return Err(violation("ids unique", format!("object id {} appears twice", o.id)));
            }
            if o.class_name.trim().is_empty() {
                return Err(violation("class name non-empty", format!("object {}", o.id)));
            }
            let masks = std::iter::once(&o.modal_mask).chain(o.amodal_mask.as_ref());
            for m in masks {
                if m.height() != h || m.width() != w {
                    return Err(violation(
                        "mask size matches image",
                        format!("object {}: mask {}x{}, image {w}x{h}", o.id, m.width(), m.height()),
                    ));
                }
            }
            if o.modal_mask.is_empty() {
                return Err(violation("modal mask non-empty", format!("object {}", o.id)));
            }
            if let Some(amodal) = &o.amodal_mask {
                if !amodal.covers(&o.modal_mask) {
                    return Err(violation("amodal mask covers modal mask", format!("object {}", o.id)));
                }
            }
            let c = o.center;
            if !(c.u >= 0.0 && c.v >= 0.0 && c.u < w as f64 && c.v < h as f64) {
                return Err(violation("center within image", format!("object {} center ({}, {})", o.id, c.u, c.v)));
            }
        }
        let mut pairs = HashSet::new();
        for e in &edges {
            if e.occluder == e.occluded {
                return Err(violation("no self occlusion", format!("edge on object {}", e.occluder)));
            }
            for end in [e.occluder, e.occluded] {
                if !ids.contains(&end) {
                    return Err(violation("edge endpoints exist", format!("unknown object {end}")));
                }
            }
            if !pairs.insert((e.occluder, e.occluded)) {
                return Err(violation(
                    "one edge per ordered pair",
                    format!("{} -> {} repeated", e.occluder, e.occluded),
                ));
            }
            if !(0.0..=1.0).contains(&e.fraction) {
                return Err(violation(
                    "fraction in [0, 1]",
                    format!("{} -> {}: {}", e.occluder, e.occluded, e.fraction),
                ));
            }
        }
        let graph = ObstructionGraph::build(objects.iter().map(|o| o.id), &edges, DEFAULT_PRUNE_THRESHOLD)?;
        Ok(Self { scene_id, image, depth, intrinsics, objects, edges, graph, base_dir: None })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn image(&self) -> &ImageRef {
        &self.image
    }

    pub fn width(&self) -> u32 {
        self.image.width
    }

    pub fn height(&self) -> u32 {
        self.image.height
    }

    pub fn depth(&self) -> Option<&DepthRef> {
        self.depth.as_ref()
    }

    pub fn intrinsics(&self) -> Option<&Intrinsics> {
        self.intrinsics.as_ref()
    }

    pub fn objects(&self) -> &[ObjectInstance] {
        &self.objects
    }

    pub fn object(&self, id: ObjectId) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Raw, unpruned occlusion edges.
    pub fn edges(&self) -> &[OcclusionEdge] {
        &self.edges
    }

    /// Obstruction graph pruned at [`DEFAULT_PRUNE_THRESHOLD`].
    pub fn graph(&self) -> &ObstructionGraph {
        &self.graph
    }

    /// Directory relative asset paths are resolved against.
    pub fn base_dir(&self) -> Option<&PathBuf> {
        self.base_dir.as_ref()
    }

    pub fn resolve_path(&self, rel: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) => dir.join(rel),
            None => PathBuf::from(rel),
        }
    }

    pub fn to_parts(&self) -> SceneParts {
        SceneParts {
            scene_id: self.scene_id.clone(),
            image: self.image.clone(),
            depth: self.depth.clone(),
            intrinsics: self.intrinsics,
            objects: self.objects.clone(),
            edges: self.edges.clone(),
        }
    }

    /// True when at least two objects share the target's class label.
    pub fn is_ambiguous(&self, target: ObjectId) -> Result<bool, SceneError> {
        let class = &self.object(target).ok_or(SceneError::UnknownTarget(target))?.class_name;
        Ok(self.objects.iter().filter(|o| &o.class_name == class).count() >= 2)
    }
}

/// Prunes the scene's occlusion edges at `threshold` and checks the result is acyclic.
pub fn prune_occlusion_graph(scene: &Scene, threshold: f64) -> Result<ObstructionGraph, SceneError> {
    ObstructionGraph::build(scene.objects.iter().map(|o| o.id), &scene.edges, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyLevel {
    Easy,
    Medium,
    Hard,
}

impl DifficultyLevel {
    pub const ALL: [DifficultyLevel; 3] = [Self::Easy, Self::Medium, Self::Hard];

    pub fn from_chain_length(d: usize) -> Self {
        match d {
            0 => Self::Easy,
            1 => Self::Medium,
            _ => Self::Hard,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Easy => "Easy",
            Self::Medium => "Medium",
            Self::Hard => "Hard",
        }
    }
}

/// One of the six difficulty cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Difficulty {
    pub level: DifficultyLevel,
    pub ambiguous: bool,
}

impl Difficulty {
    pub const ALL: [Difficulty; 6] = [
        Difficulty { level: DifficultyLevel::Easy, ambiguous: false },
        Difficulty { level: DifficultyLevel::Easy, ambiguous: true },
        Difficulty { level: DifficultyLevel::Medium, ambiguous: false },
        Difficulty { level: DifficultyLevel::Medium, ambiguous: true },
        Difficulty { level: DifficultyLevel::Hard, ambiguous: false },
        Difficulty { level: DifficultyLevel::Hard, ambiguous: true },
    ];

    /// Stable key used in manifests and reports, e.g. `medium_amb`.
    pub fn key(&self) -> String {
        let level = self.level.name().to_lowercase();
        if self.ambiguous {
            format!("{level}_amb")
        } else {
            format!("{level}_no_amb")
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.key() == key)
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let amb = if self.ambiguous { "w Amb." } else { "w/o Amb." };
        write!(f, "{} {amb}", self.level.name())
    }
}

/// A scene with some objects already grasped away. Cheap to clone.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    scene: Arc<Scene>,
    removed: BTreeSet<ObjectId>,
}

impl SceneState {
    pub fn new(scene: Arc<Scene>) -> Self {
        Self { scene, removed: BTreeSet::new() }
    }

    pub fn scene(&self) -> &Arc<Scene> {
        &self.scene
    }

    pub fn removed(&self) -> &BTreeSet<ObjectId> {
        &self.removed
    }

    pub fn is_live(&self, id: ObjectId) -> bool {
        !self.removed.contains(&id) && self.scene.graph.nodes.contains(&id)
    }

    pub fn live_ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.scene.graph.nodes.iter().copied().filter(|id| !self.removed.contains(id))
    }

    /// Live objects in scene-file order.
    pub fn live_objects(&self) -> impl Iterator<Item = &ObjectInstance> + '_ {
        self.scene.objects.iter().filter(|o| !self.removed.contains(&o.id))
    }

    pub fn live_count(&self) -> usize {
        self.live_ids().count()
    }

    fn require_live(&self, id: ObjectId) -> Result<(), SceneError> {
        if self.is_live(id) {
            Ok(())
        } else {
            Err(SceneError::UnknownTarget(id))
        }
    }

    pub fn live_obstructors(&self, id: ObjectId) -> impl Iterator<Item = ObjectId> + '_ {
        self.scene.graph.obstructors_of(id).filter(|o| !self.removed.contains(o))
    }

    pub fn is_free(&self, id: ObjectId) -> bool {
        self.live_obstructors(id).next().is_none()
    }

    /// Every live object with a directed obstruction path into `target`.
    pub fn obstructor_closure(&self, target: ObjectId) -> Result<BTreeSet<ObjectId>, SceneError> {
        self.require_live(target)?;
        let mut seen = BTreeSet::new();
        let mut frontier = vec![target];
        while let Some(n) = frontier.pop() {
            for o in self.live_obstructors(n) {
                if seen.insert(o) {
                    frontier.push(o);
                }
            }
        }
        seen.remove(&target);
        Ok(seen)
    }

    /// Objects that are a correct next grasp: the target when it is free,
    /// otherwise the unobstructed members of its obstructor closure.
    pub fn valid_pick_set(&self, target: ObjectId) -> Result<BTreeSet<ObjectId>, SceneError> {
        let closure = self.obstructor_closure(target)?;
        if closure.is_empty() {
            return Ok(BTreeSet::from([target]));
        }
        Ok(closure.into_iter().filter(|&id| self.is_free(id)).collect())
    }

    pub fn minimal_steps(&self, target: ObjectId) -> Result<usize, SceneError> {
        Ok(self.obstructor_closure(target)?.len() + 1)
    }

    /// Length in edges of the longest obstruction chain ending at `target`.
    pub fn chain_length(&self, target: ObjectId) -> Result<usize, SceneError> {
        self.require_live(target)?;
        let mut memo = BTreeMap::new();
        Ok(self.depth(target, &mut memo))
    }

    fn depth(&self, id: ObjectId, memo: &mut BTreeMap<ObjectId, usize>) -> usize {
        if let Some(d) = memo.get(&id) {
            return *d;
        }
        let obstructors: Vec<_> = self.live_obstructors(id).collect();
        let d = obstructors.into_iter().map(|o| self.depth(o, memo) + 1).max().unwrap_or(0);
        memo.insert(id, d);
        d
    }

    pub fn classify_difficulty(&self, target: ObjectId) -> Result<DifficultyLevel, SceneError> {
        Ok(DifficultyLevel::from_chain_length(self.chain_length(target)?))
    }

    /// Difficulty cell of `target` in this state.
    pub fn difficulty(&self, target: ObjectId) -> Result<Difficulty, SceneError> {
        Ok(Difficulty { level: self.classify_difficulty(target)?, ambiguous: self.scene.is_ambiguous(target)? })
    }

    pub fn remove_object(&self, id: ObjectId) -> Result<SceneState, SceneError> {
        self.require_live(id)?;
        let mut next = self.clone();
        next.removed.insert(id);
        Ok(next)
    }
}
