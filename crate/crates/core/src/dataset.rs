//! Scene files, instruction files and scenario manifests.
//!
//! Scene file (JSON):
//!
//! ```json
//! { "scene_id": "s1",
//!   "image": {"path": "s1.png", "width": 160, "height": 120},
//!   "depth": {"path": "s1_depth.png", "scale_mm": 1.0},
//!   "intrinsics": {"fx": 500, "fy": 500, "cx": 80, "cy": 60},
//!   "objects": [{"id": 0, "class": "mug", "center": [40.5, 30.5],
//!                "modal_mask": {"size": [120, 160], "counts": "..."},
//!                "amodal_mask": null}],
//!   "occlusion": [{"occluder": 1, "occluded": 0, "fraction": 0.2}] }
//! ```
//!
//! Instruction files are JSONL with one `{"scene_id", "target_id",
//! "instructions": [...]}` row per scenario.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Intrinsics;
use crate::mask::{Mask, RleMask};
use crate::scene::{
    DepthRef, Difficulty, ImageRef, ObjectId, ObjectInstance, OcclusionEdge, Point, Scene, SceneError, SceneParts,
    SceneState,
};
use crate::seed;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MIN_OBJECTS: usize = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {field}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, field: String, message: String },
    #[error("{path}: invariant '{invariant}' violated: {detail}")]
    Validation { path: PathBuf, invariant: &'static str, detail: String },
    #[error("{path}: pruned occlusion graph has a cycle through objects [{}]", id_list(ids))]
    Cycle { path: PathBuf, ids: Vec<ObjectId> },
    #[error("cell {cell} has {available} eligible (scene, target) pairs, {required} required")]
    InsufficientPool { cell: Difficulty, available: usize, required: usize },
    #[error("{path}:{line}: no scenario for scene '{scene_id}' target {target_id}")]
    UnknownScenario { path: PathBuf, line: usize, scene_id: String, target_id: u32 },
    #[error("{path}:{line}: instruction {index} is empty")]
    EmptyInstruction { path: PathBuf, line: usize, index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn id_list(ids: &[ObjectId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

impl DatasetError {
    fn from_scene(path: &Path, e: SceneError) -> Self {
        match e {
            SceneError::Cycle(ids) => DatasetError::Cycle { path: path.to_owned(), ids },
            SceneError::Validation { invariant, detail } => {
                DatasetError::Validation { path: path.to_owned(), invariant, detail }
            }
            other => DatasetError::Validation { path: path.to_owned(), invariant: "scene", detail: other.to_string() },
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_owned(), source }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObjectRecord {
    id: u32,
    class: String,
    center: [f64; 2],
    modal_mask: RleMask,
    #[serde(default)]
    amodal_mask: Option<RleMask>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    image: ImageRef,
    #[serde(default)]
    depth: Option<DepthRef>,
    #[serde(default)]
    intrinsics: Option<Intrinsics>,
    objects: Vec<ObjectRecord>,
    #[serde(default)]
    occlusion: Vec<OcclusionEdge>,
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        DatasetError::Parse {
            path: path.to_owned(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })
}

fn decode_mask(path: &Path, field: String, rle: &RleMask, image: &ImageRef) -> Result<Mask, DatasetError> {
    let parse_err = |message: String| DatasetError::Parse {
        path: path.to_owned(),
        line: 0,
        column: 0,
        field: field.clone(),
        message,
    };
    if rle.size != [image.height as usize, image.width as usize] {
        return Err(parse_err(format!(
            "mask size {:?} does not match image [height, width] [{}, {}]",
            rle.size, image.height, image.width
        )));
    }
    Mask::from_rle(rle).map_err(|e| parse_err(e.to_string()))
}

/// Parses and validates scene JSON. `path` is only used for diagnostics and
/// as the base directory for the scene's image and depth references.
pub fn parse_scene(path: &Path, text: &str) -> Result<Scene, DatasetError> {
    let record: SceneRecord = parse_json(path, text)?;
    let mut objects = Vec::with_capacity(record.objects.len());
    for (i, o) in record.objects.iter().enumerate() {
        let modal_mask = decode_mask(path, format!("objects[{i}].modal_mask"), &o.modal_mask, &record.image)?;
        let amodal_mask = o
            .amodal_mask
            .as_ref()
            .map(|m| decode_mask(path, format!("objects[{i}].amodal_mask"), m, &record.image))
            .transpose()?;
        objects.push(ObjectInstance {
            id: ObjectId(o.id),
            class_name: o.class.clone(),
            center: Point::from(o.center),
            modal_mask,
            amodal_mask,
        });
    }
    let scene = Scene::new(SceneParts {
        scene_id: record.scene_id,
        image: record.image,
        depth: record.depth,
        intrinsics: record.intrinsics,
        objects,
        edges: record.occlusion,
    })
    .map_err(|e| DatasetError::from_scene(path, e))?;
    Ok(match path.parent() {
        Some(dir) => scene.with_base_dir(dir),
        None => scene,
    })
}

pub fn load_scene(path: &Path) -> Result<Scene, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_scene(path, &text)
}

pub fn scene_to_json(scene: &Scene) -> String {
    let record = SceneRecord {
        scene_id: scene.scene_id().to_owned(),
        image: scene.image().clone(),
        depth: scene.depth().cloned(),
        intrinsics: scene.intrinsics().copied(),
        objects: scene
            .objects()
            .iter()
            .map(|o| ObjectRecord {
                id: o.id.0,
                class: o.class_name.clone(),
                center: o.center.into(),
                modal_mask: o.modal_mask.to_rle(),
                amodal_mask: o.amodal_mask.as_ref().map(Mask::to_rle),
            })
            .collect(),
        occlusion: scene.edges().to_vec(),
    };
    serde_json::to_string_pretty(&record).expect("scene serializes")
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, scene_to_json(scene) + "\n").map_err(|e| DatasetError::io(path, e))
}

/// Every `*.json` file in `dir`, sorted by file name, with its load result.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<(PathBuf, Result<Scene, DatasetError>)>, DatasetError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DatasetError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths
        .into_iter()
        .map(|p| {
            let r = load_scene(&p);
            (p, r)
        })
        .collect())
}

/// Loads a directory and fails on the first invalid scene.
pub fn load_scenes(dir: &Path) -> Result<Vec<Arc<Scene>>, DatasetError> {
    load_scene_dir(dir)?.into_iter().map(|(_, r)| r.map(Arc::new)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub scene_id: String,
    pub target_id: ObjectId,
    pub difficulty: Difficulty,
    #[serde(default)]
    pub instructions: Vec<String>,
}

impl Scenario {
    pub fn id_for(scene_id: &str, target: ObjectId) -> String {
        format!("{scene_id}:{target}")
    }

    /// Key of one (scenario, instruction) evaluation episode.
    pub fn episode_key(&self, instruction_index: usize) -> String {
        format!("{}/{}", self.scenario_id, instruction_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub schema_version: u32,
    pub seed: u64,
    pub per_cell: usize,
    pub min_objects: usize,
    pub per_cell_counts: BTreeMap<String, usize>,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn episode_count(&self) -> usize {
        self.scenarios.iter().map(|s| s.instructions.len()).sum()
    }

    fn count_cells(scenarios: &[Scenario]) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = Difficulty::ALL.iter().map(|d| (d.key(), 0)).collect();
        for s in scenarios {
            *counts.entry(s.difficulty.key()).or_default() += 1;
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json() + "\n").map_err(|e| DatasetError::io(path, e))
    }

    /// Reads a manifest and checks every scenario against `scenes`.
    pub fn load(path: &Path, scenes: &HashMap<String, Arc<Scene>>) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let set: ScenarioSet = parse_json(path, &text)?;
        set.validate(path, scenes)?;
        Ok(set)
    }

    pub fn validate(&self, path: &Path, scenes: &HashMap<String, Arc<Scene>>) -> Result<(), DatasetError> {
        let invalid = |invariant: &'static str, detail: String| DatasetError::Validation {
            path: path.to_owned(),
            invariant,
            detail,
        };
        let mut pairs = BTreeSet::new();
        for s in &self.scenarios {
            let scene = scenes.get(&s.scene_id).ok_or_else(|| {
                invalid("scenario scene exists", format!("{}: scene '{}'", s.scenario_id, s.scene_id))
            })?;
            if !pairs.insert((s.scene_id.clone(), s.target_id)) {
                return Err(invalid("scenarios unique", s.scenario_id.clone()));
            }
            let state = SceneState::new(scene.clone());
            let actual = state
                .difficulty(s.target_id)
                .map_err(|e| invalid("scenario target exists", format!("{}: {e}", s.scenario_id)))?;
            if actual != s.difficulty {
                return Err(invalid(
                    "difficulty matches scene",
                    format!("{}: manifest says {}, scene gives {}", s.scenario_id, s.difficulty, actual),
                ));
            }
            if let Some(i) = s.instructions.iter().position(|t| t.trim().is_empty()) {
                return Err(invalid("instructions non-empty", format!("{} instruction {i}", s.scenario_id)));
            }
        }
        if Self::count_cells(&self.scenarios) != self.per_cell_counts {
            return Err(invalid("per-cell counts match scenarios", format!("{:?}", self.per_cell_counts)));
        }
        Ok(())
    }
}

/// All `(scene, target)` pairs in each difficulty cell, in input order.
pub fn eligible_pairs(scenes: &[Arc<Scene>], min_objects: usize) -> BTreeMap<Difficulty, Vec<(usize, ObjectId)>> {
    let mut pools: BTreeMap<Difficulty, Vec<(usize, ObjectId)>> =
        Difficulty::ALL.iter().map(|d| (*d, Vec::new())).collect();
    for (si, scene) in scenes.iter().enumerate() {
        if scene.objects().len() < min_objects {
            continue;
        }
        let state = SceneState::new(scene.clone());
        for o in scene.objects() {
            let cell = state.difficulty(o.id).expect("object is live in the initial state");
            pools.get_mut(&cell).expect("all cells present").push((si, o.id));
        }
    }
    pools
}

/// Draws `per_cell` distinct (scene, target) pairs for each of the six cells.
pub fn sample_scenarios(
    scenes: &[Arc<Scene>],
    per_cell: usize,
    min_objects: usize,
    seed: u64,
) -> Result<ScenarioSet, DatasetError> {
    if per_cell == 0 {
        return Err(DatasetError::InvalidArgument("per_cell must be at least 1".into()));
    }
    let pools = eligible_pairs(scenes, min_objects);
    if let Some((cell, pool)) = pools.iter().find(|(_, p)| p.len() < per_cell) {
        return Err(DatasetError::InsufficientPool { cell: *cell, available: pool.len(), required: per_cell });
    }
    let mut rng = seed::rng(seed);
    let mut scenarios = Vec::with_capacity(per_cell * 6);
    for cell in Difficulty::ALL {
        let pool = &pools[&cell];
        let mut picked = index::sample(&mut rng, pool.len(), per_cell).into_vec();
        picked.sort_unstable();
        for i in picked {
            let (si, target) = pool[i];
            let scene_id = scenes[si].scene_id();
            scenarios.push(Scenario {
                scenario_id: Scenario::id_for(scene_id, target),
                scene_id: scene_id.to_owned(),
                target_id: target,
                difficulty: cell,
                instructions: Vec::new(),
            });
        }
    }
    Ok(ScenarioSet {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        per_cell,
        min_objects,
        per_cell_counts: ScenarioSet::count_cells(&scenarios),
        scenarios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRow {
    pub scene_id: String,
    pub target_id: u32,
    pub instructions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachMode {
    /// Rows must all belong to scenarios in the set.
    Strict,
    /// Rows for pairs outside the set are skipped.
    IgnoreUnknown,
}

#[derive(Debug, Clone)]
pub struct AttachOutcome {
    pub set: ScenarioSet,
    /// Scenario ids that received no instruction.
    pub missing: Vec<String>,
}

pub fn read_instruction_rows(path: &Path) -> Result<Vec<(usize, InstructionRow)>, DatasetError> {
    let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: InstructionRow = parse_json(path, &line).map_err(|e| match e {
            DatasetError::Parse { path, column, field, message, .. } => {
                DatasetError::Parse { path, line: i + 1, column, field, message }
            }
            other => other,
        })?;
        rows.push((i + 1, row));
    }
    Ok(rows)
}

pub fn attach_instructions(set: ScenarioSet, path: &Path, mode: AttachMode) -> Result<AttachOutcome, DatasetError> {
    let rows = read_instruction_rows(path)?;
    let mut set = set;
    let index: HashMap<(String, ObjectId), usize> =
        set.scenarios.iter().enumerate().map(|(i, s)| ((s.scene_id.clone(), s.target_id), i)).collect();
    for (line, row) in rows {
        let Some(&i) = index.get(&(row.scene_id.clone(), ObjectId(row.target_id))) else {
            if mode == AttachMode::Strict {
                return Err(DatasetError::UnknownScenario {
                    path: path.to_owned(),
                    line,
                    scene_id: row.scene_id,
                    target_id: row.target_id,
                });
            }
            continue;
        };
        if let Some(k) = row.instructions.iter().position(|t| t.trim().is_empty()) {
            return Err(DatasetError::EmptyInstruction { path: path.to_owned(), line, index: k });
        }
        set.scenarios[i].instructions.extend(row.instructions);
    }
    let missing = set.scenarios.iter().filter(|s| s.instructions.is_empty()).map(|s| s.scenario_id.clone()).collect();
    Ok(AttachOutcome { set, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn toy(n: usize) -> Vec<Arc<Scene>> {
        synth::generate_scenes(&synth::SynthConfig { scenes: n, ..Default::default() }, 11)
            .into_iter()
            .map(Arc::new)
            .collect()
    }

    const FOUR_OBJECTS: &str = r#"{
      "scene_id": "s", "image": {"path": "s.png", "width": 5, "height": 4},
      "depth": null, "intrinsics": {"fx": 1, "fy": 1, "cx": 0, "cy": 0},
      "objects": [
        {"id": 0, "class": "a", "center": [1.5, 1.5], "modal_mask": {"size": [4, 5], "counts": "5220003"}},
        {"id": 1, "class": "b", "center": [0.5, 0.5], "modal_mask": {"size": [4, 5], "counts": "01c0"}, "amodal_mask": null},
        {"id": 2, "class": "c", "center": [4.5, 3.5], "modal_mask": {"size": [4, 5], "counts": "c01"}},
        {"id": 3, "class": "a", "center": [4.5, 0.5], "modal_mask": {"size": [4, 5], "counts": "`013"}}
      ],
      "occlusion": [{"occluder": 1, "occluded": 0, "fraction": 0.2}]
    }"#;

    #[test]
    fn parse_four_object_scene() {
        let scene = parse_scene(Path::new("mem.json"), FOUR_OBJECTS).unwrap();
        assert_eq!(scene.objects().len(), 4);
        assert!(scene.graph().contains_edge(ObjectId(1), ObjectId(0)));
        let again = parse_scene(Path::new("mem.json"), &scene_to_json(&scene)).unwrap();
        assert_eq!(again.objects(), scene.objects());
        assert_eq!(again.edges(), scene.edges());
    }

    #[test]
    fn duplicate_id_is_validation_error() {
        let text = FOUR_OBJECTS.replace(r#""id": 3"#, r#""id": 2"#);
        match parse_scene(Path::new("dup.json"), &text) {
            Err(DatasetError::Validation { invariant, .. }) => assert_eq!(invariant, "ids unique"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mask_length_mismatch_is_parse_error() {
        let text = FOUR_OBJECTS.replace(r#""counts": "c01""#, r#""counts": "c02""#);
        match parse_scene(Path::new("bad.json"), &text) {
            Err(DatasetError::Parse { field, .. }) => assert_eq!(field, "objects[2].modal_mask"),
            other => panic!("unexpected {other:?}"),
        }
        let text = FOUR_OBJECTS.replace(r#""size": [4, 5], "counts": "c01""#, r#""size": [5, 4], "counts": "c01""#);
        assert!(matches!(parse_scene(Path::new("bad.json"), &text), Err(DatasetError::Parse { .. })));
    }

    #[test]
    fn malformed_json_reports_location() {
        let text = FOUR_OBJECTS.replace(r#""center": [1.5, 1.5]"#, r#""center": "x""#);
        match parse_scene(Path::new("bad.json"), &text) {
            Err(DatasetError::Parse { line, field, .. }) => {
                assert_eq!(line, 5);
                assert_eq!(field, "objects[0].center");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cyclic_scene_is_cycle_error() {
        let text = FOUR_OBJECTS.replace(
            r#"[{"occluder": 1, "occluded": 0, "fraction": 0.2}]"#,
            r#"[{"occluder": 1, "occluded": 0, "fraction": 0.2}, {"occluder": 0, "occluded": 1, "fraction": 0.3}]"#,
        );
        assert!(matches!(parse_scene(Path::new("cyc.json"), &text), Err(DatasetError::Cycle { .. })));
    }

    #[test]
    fn sampling_is_deterministic_and_stratified() {
        let scenes = toy(40);
        let a = sample_scenarios(&scenes, 3, 4, 5).unwrap();
        let b = sample_scenarios(&scenes, 3, 4, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 18);
        assert!(a.per_cell_counts.values().all(|c| *c == 3));
        let by_id: HashMap<_, _> = scenes.iter().map(|s| (s.scene_id().to_owned(), s.clone())).collect();
        a.validate(Path::new("m.json"), &by_id).unwrap();
        let pairs: BTreeSet<_> = a.scenarios.iter().map(|s| (&s.scene_id, s.target_id)).collect();
        assert_eq!(pairs.len(), a.len());
    }

    #[test]
    fn insufficient_pool_names_cell() {
        let scenes = toy(2);
        match sample_scenarios(&scenes, 50, 4, 1) {
            Err(DatasetError::InsufficientPool { required, .. }) => assert_eq!(required, 50),
            other => panic!("unexpected {other:?}"),
        }
        // no scene passes the object-count filter
        assert!(matches!(
            sample_scenarios(&scenes, 1, 1000, 1),
            Err(DatasetError::InsufficientPool { available: 0, .. })
        ));
    }

    #[test]
    fn attach_instruction_rows() {
        let scenes = toy(40);
        let set = sample_scenarios(&scenes, 1, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instr.jsonl");
        let mut text = String::new();
        for s in &set.scenarios[1..] {
            let row = InstructionRow {
                scene_id: s.scene_id.clone(),
                target_id: s.target_id.0,
                instructions: vec!["a".into(), "b".into(), "c".into()],
            };
            text.push_str(&serde_json::to_string(&row).unwrap());
            text.push('\n');
        }
        fs::write(&path, &text).unwrap();
        let out = attach_instructions(set.clone(), &path, AttachMode::Strict).unwrap();
        assert_eq!(out.missing, vec![set.scenarios[0].scenario_id.clone()]);
        assert_eq!(out.set.episode_count(), 15);

        fs::write(&path, "{\"scene_id\": \"nope\", \"target_id\": 0, \"instructions\": [\"x\"]}\n").unwrap();
        assert!(matches!(
            attach_instructions(set.clone(), &path, AttachMode::Strict),
            Err(DatasetError::UnknownScenario { line: 1, .. })
        ));
        assert!(attach_instructions(set.clone(), &path, AttachMode::IgnoreUnknown).is_ok());

        let s = &set.scenarios[0];
        fs::write(
            &path,
            format!(
                "\n{{\"scene_id\": \"{}\", \"target_id\": {}, \"instructions\": [\"ok\", \"  \"]}}\n",
                s.scene_id, s.target_id
            ),
        )
        .unwrap();
        assert!(matches!(
            attach_instructions(set, &path, AttachMode::Strict),
            Err(DatasetError::EmptyInstruction { line: 2, index: 1, .. })
        ));
    }
}
