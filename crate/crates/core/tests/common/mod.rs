#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use sfda::checkpoint::Checkpoint;
use sfda::data::{AugmentationPolicy, Dataset, PolicyKind};
use sfda::model::Model;
use sfda::pipeline::{load_data, parse_config, run_pipeline, train_source_model, PipelineConfig, RunReport};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/fixture.toml")
}

pub fn scratch_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("sfda-tests").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn fixture_config(seed: u64, overrides: &[&str]) -> PipelineConfig {
    let mut all = vec![format!("seed={seed}")];
    all.extend(overrides.iter().map(|s| s.to_string()));
    parse_config(Some(&fixture_path()), &all).unwrap()
}

/// Written straight to the process stdout so the line shows up even when the
/// test harness captures `println!`.
pub fn report_line(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

pub struct SourceRun {
    pub checkpoint: PathBuf,
    pub model: Model,
    pub target: Dataset,
}

static SOURCES: [OnceLock<SourceRun>; 5] = [const { OnceLock::new() }; 5];

/// Source model for one fixture seed, trained once per test binary and shared.
pub fn source_run(seed: u64) -> &'static SourceRun {
    SOURCES[seed as usize].get_or_init(|| {
        let cfg = fixture_config(seed, &[]);
        let (source, target) = load_data(&cfg.data, seed).unwrap();
        let policy = AugmentationPolicy::new(PolicyKind::Weak, &cfg.augment).unwrap();
        let (model, opt, _) =
            train_source_model(source.as_ref().unwrap(), &cfg.model, &cfg.source, cfg.source.augment.then_some(&policy), seed)
                .unwrap();
        let dir = scratch_dir(&format!("source-{seed}"));
        let checkpoint = dir.join("source.ckpt.json");
        Checkpoint::from_model(&model, "source", Some(&opt)).save(&checkpoint).unwrap();
        SourceRun { checkpoint, model, target }
    })
}

/// Full pipeline on the fixture, starting from the shared source model.
pub fn fixture_run(seed: u64, tag: &str, overrides: &[&str]) -> RunReport {
    let src = source_run(seed);
    let dir = scratch_dir(&format!("{tag}-{seed}"));
    let mut all: Vec<String> = vec![
        format!("source.checkpoint={}", toml_str(&src.checkpoint)),
        format!("output_dir={}", toml_str(&dir)),
    ];
    all.extend(overrides.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = all.iter().map(String::as_str).collect();
    run_pipeline(&fixture_config(seed, &refs)).unwrap()
}

static HCPR_RUNS: OnceLock<Vec<RunReport>> = OnceLock::new();
static NEAR_CENTROID_RUNS: OnceLock<Vec<RunReport>> = OnceLock::new();

pub fn hcpr_runs() -> &'static [RunReport] {
    HCPR_RUNS.get_or_init(|| SEEDS.iter().map(|&s| fixture_run(s, "hcpr", &[])).collect())
}

pub fn near_centroid_runs() -> &'static [RunReport] {
    NEAR_CENTROID_RUNS.get_or_init(|| SEEDS.iter().map(|&s| fixture_run(s, "near-centroid", &["selector=near_centroid"])).collect())
}

pub fn toml_str(path: &Path) -> String {
    toml::Value::String(path.display().to_string()).to_string()
}
