//! Harness configuration file (TOML or JSON).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use graspbench_core::episode::{EpisodeSettings, ExecutionModel, Localizer, ReasonerSpec, RunConfig, StopSetting};
use graspbench_core::geometry::DEFAULT_GRIPPER_MAX_WIDTH_M;
use graspbench_core::localization::{DropoutCurve, LocalizerConfig, LocalizerKind};
use graspbench_core::prompting::MarkStyle;
use graspbench_core::reasoning::ScriptBook;
use graspbench_core::remote::{EndpointConfig, RemoteClient};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReasonerKind {
    Oracle,
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerSection {
    pub kind: LocalizerKind,
    pub noise_sigma_px: f64,
    pub dropout: DropoutCurve,
    pub duplicate_rate: f64,
    pub seed: u64,
    pub endpoint: Option<EndpointConfig>,
}

impl Default for LocalizerSection {
    fn default() -> Self {
        let base = LocalizerConfig::default();
        Self {
            kind: base.kind,
            noise_sigma_px: base.noise_sigma_px,
            dropout: base.dropout,
            duplicate_rate: base.duplicate_rate,
            seed: base.seed,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerSection {
    pub kind: ReasonerKind,
    pub endpoint: Option<EndpointConfig>,
    /// JSON map from episode key (or "*") to a list of decisions.
    pub script: Option<PathBuf>,
}

impl Default for ReasonerSection {
    fn default() -> Self {
        Self { kind: ReasonerKind::Oracle, endpoint: None, script: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub scenes: Option<PathBuf>,
    pub instructions: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Run label; with several stop settings each run is labelled by its setting.
    pub label: Option<String>,
    pub seed: u64,
    pub stop: OneOrMany<StopSetting>,
    pub execution: ExecutionModel,
    pub step_cap: Option<usize>,
    pub gripper_max_width: f64,
    pub mark_style: MarkStyle,
    pub localizer: LocalizerSection,
    pub reasoner: ReasonerSection,
    pub paths: PathsSection,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            label: None,
            seed: 0,
            stop: OneOrMany::One(StopSetting::Spm),
            execution: ExecutionModel::default(),
            step_cap: None,
            gripper_max_width: DEFAULT_GRIPPER_MAX_WIDTH_M,
            mark_style: MarkStyle::default(),
            localizer: LocalizerSection::default(),
            reasoner: ReasonerSection::default(),
            paths: PathsSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl HarnessConfig {
    /// Parses by extension: `.toml` as TOML, anything else as JSON. Relative
    /// paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(path, &text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self, CliError> {
        let invalid = |e: String| CliError::Validation(format!("{}: {e}", path.display()));
        if path.extension().is_some_and(|x| x == "toml") {
            toml::from_str(text).map_err(|e| invalid(e.to_string()))
        } else {
            let de = &mut serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(de).map_err(|e| invalid(e.to_string()))
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.reasoner.script);
        resolve(base, &mut self.paths.scenes);
        resolve(base, &mut self.paths.instructions);
        resolve(base, &mut self.paths.results);
        resolve(base, &mut self.paths.manifest);
    }

    pub fn settings(&self, stop: StopSetting) -> EpisodeSettings {
        EpisodeSettings {
            stop,
            execution: self.execution,
            step_cap: self.step_cap,
            mark_style: self.mark_style.clone(),
            gripper_max_width: self.gripper_max_width,
        }
    }

    pub fn build_localizer(&self) -> Result<Localizer, CliError> {
        let l = &self.localizer;
        Ok(match l.kind {
            LocalizerKind::Gt => Localizer::Gt,
            LocalizerKind::Perturbed => Localizer::Perturbed(LocalizerConfig {
                kind: LocalizerKind::Perturbed,
                noise_sigma_px: l.noise_sigma_px,
                dropout: l.dropout,
                duplicate_rate: l.duplicate_rate,
                seed: l.seed,
            }),
            LocalizerKind::Remote => Localizer::Remote(client(l.endpoint.as_ref(), "localizer")?),
        })
    }

    pub fn build_reasoner(&self) -> Result<ReasonerSpec, CliError> {
        let r = &self.reasoner;
        Ok(match r.kind {
            ReasonerKind::Oracle => ReasonerSpec::Oracle,
            ReasonerKind::Scripted => {
                let path = r.script.as_ref().ok_or_else(|| {
                    CliError::Validation("reasoner.script is required for the scripted reasoner".into())
                })?;
                ReasonerSpec::Scripted(Arc::new(ScriptBook::load(path).map_err(CliError::Validation)?))
            }
            ReasonerKind::Remote => ReasonerSpec::Remote(client(r.endpoint.as_ref(), "reasoner")?),
        })
    }

    /// One run per configured stop setting.
    pub fn run_matrix(&self) -> Result<Vec<RunConfig>, CliError> {
        let stops = self.stop.to_vec();
        if stops.is_empty() {
            return Err(CliError::Validation("at least one stop setting is required".into()));
        }
        let localizer = self.build_localizer()?;
        let reasoner = self.build_reasoner()?;
        Ok(stops
            .iter()
            .map(|&stop| RunConfig {
                label: match (&self.label, stops.len()) {
                    (Some(l), 1) => l.clone(),
                    (Some(l), _) => format!("{l}/{stop}"),
                    (None, _) => stop.to_string(),
                },
                settings: self.settings(stop),
                localizer: localizer.clone(),
                reasoner: reasoner.clone(),
                seed: self.seed,
            })
            .collect())
    }
}

fn client(endpoint: Option<&EndpointConfig>, section: &str) -> Result<Arc<RemoteClient>, CliError> {
    let cfg = endpoint
        .ok_or_else(|| CliError::Validation(format!("{section}.endpoint is required for kind = \"remote\"")))?;
    RemoteClient::new(cfg.clone()).map(Arc::new).map_err(|e| CliError::Runtime(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let toml_text = r#"
seed = 3
stop = ["spm", "p"]
[execution]
motion_failure_prob = 0.1
[localizer]
kind = "perturbed"
noise_sigma_px = 2.0
dropout = { kind = "constant", p = 0.2 }
[paths]
scenes = "scenes"
"#;
        let json_text = r#"{"seed": 3, "stop": ["spm", "p"], "execution": {"motion_failure_prob": 0.1},
            "localizer": {"kind": "perturbed", "noise_sigma_px": 2.0, "dropout": {"kind": "constant", "p": 0.2}},
            "paths": {"scenes": "scenes"}}"#;
        let a = HarnessConfig::parse(Path::new("a.toml"), toml_text).unwrap();
        let b = HarnessConfig::parse(Path::new("a.json"), json_text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stop.to_vec(), vec![StopSetting::Spm, StopSetting::P]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        for text in [r#"{"sed": 1}"#, r#"{"localizer": {"kind": "gt", "sigma": 1}}"#, r#"{"paths": {"scene": "x"}}"#] {
            assert!(matches!(HarnessConfig::parse(Path::new("c.json"), text), Err(CliError::Validation(_))), "{text}");
        }
        assert!(HarnessConfig::parse(Path::new("c.toml"), "[reasoner]\nkind = \"oracle\"\nmodel = \"x\"\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("run.toml");
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, "[paths]\nscenes = \"../scenes\"\nresults = \"/abs/out\"\n").unwrap();
        let cfg = HarnessConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.scenes.unwrap(), dir.path().join("sub").join("../scenes"));
        assert_eq!(cfg.paths.results.unwrap(), PathBuf::from("/abs/out"));
    }

    #[test]
    fn matrix_labels_and_missing_endpoints() {
        let mut cfg = HarnessConfig { stop: OneOrMany::Many(StopSetting::ALL.to_vec()), ..Default::default() };
        let labels: Vec<_> = cfg.run_matrix().unwrap().into_iter().map(|r| r.label).collect();
        assert_eq!(labels, ["spm", "pm", "p"]);
        cfg.reasoner.kind = ReasonerKind::Remote;
        assert!(matches!(cfg.run_matrix(), Err(CliError::Validation(_))));
        cfg.reasoner.kind = ReasonerKind::Scripted;
        assert!(matches!(cfg.run_matrix(), Err(CliError::Validation(_))));
    }
}
