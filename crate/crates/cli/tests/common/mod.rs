#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use graspbench_core::episode::{EpisodeRecord, Termination};
use graspbench_core::scene::{Difficulty, DifficultyLevel};

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn graspbench(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_graspbench")).args(args).output().expect("binary runs");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Copies of `template` with the given (success, l, p) outcomes, all placed
/// in `difficulty`.
pub fn records_with_outcomes(
    template: &EpisodeRecord,
    difficulty: Difficulty,
    outcomes: &[(bool, usize, usize)],
) -> Vec<EpisodeRecord> {
    outcomes
        .iter()
        .enumerate()
        .map(|(i, &(success, l, p))| {
            let mut r = template.clone();
            r.episode_key = format!("fixture:{i}/0");
            r.scenario_id = format!("fixture:{i}");
            r.difficulty = difficulty;
            r.success = success;
            r.l = l;
            r.p = p;
            r.terminated_by = if success { Termination::TargetGrasped } else { Termination::Failure };
            r
        })
        .collect()
}

/// 10 episodes, 8 successes: six at l = p and two at l/p = 0.4.
pub fn sr80_pe85() -> Vec<(bool, usize, usize)> {
    let mut v = vec![(true, 1, 1); 6];
    v.extend([(true, 2, 5), (true, 2, 5), (false, 1, 3), (false, 2, 7)]);
    v
}

/// 10 episodes, 4 successes with l/p summing to 2.84.
pub fn sr40_pe71() -> Vec<(bool, usize, usize)> {
    let mut v = vec![(true, 1, 1), (true, 1, 2), (true, 1, 2), (true, 21, 25)];
    v.extend([(false, 1, 2); 6]);
    v
}

pub const EASY_AMB: Difficulty = Difficulty { level: DifficultyLevel::Easy, ambiguous: true };
