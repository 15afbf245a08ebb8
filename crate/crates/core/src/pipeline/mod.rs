//! End-to-end driver: source model, pre-adaptation, selection, FixMatch, plus
//! evaluation, analysis, checkpoints, CSVs and plots.

pub mod analysis;
mod config;
mod eval;
mod source;

pub use analysis::{analyze_pseudo_labels, plot_series, write_csv, AnalysisRow, REFERENCE_PA_HCPR_RW_CL};
pub use config::{apply_override, parse_config, DataConfig, PipelineConfig, SourceConfig};
pub use eval::{evaluate, predict, score, Evaluation};
pub use source::{train_source_model, SourceEpoch};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::consolidation::PseudoLabelSet;
use crate::data::manifest::load_manifest;
use crate::data::{make_synthetic_shift, AugmentationPolicy, Dataset, PolicyKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::preadapt::{self, EpochStats};
use crate::selector::{self, PseudoLabelSelector};
use crate::ssl::{ssl_train, SslStep};

pub const REPORT_FILE: &str = "run_report.json";
pub const CONSOLIDATION_FILE: &str = "consolidation_report.json";
pub const PSEUDO_FILE: &str = "pseudo_labels.json";

/// Load `(source, target)` as configured. The source set is `None` when only a
/// target manifest is given.
pub fn load_data(config: &DataConfig, seed: u64) -> Result<(Option<Dataset>, Dataset)> {
    match &config.target_manifest {
        Some(t) => {
            let target = load_manifest(t)?;
            let source = config.source_manifest.as_deref().map(load_manifest).transpose()?;
            Ok((source, target))
        }
        None => {
            let (s, t) = make_synthetic_shift(&config.synthetic, seed)?;
            Ok((Some(s), t))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    /// `pre_adapt`, `selection` or `reselection`.
    pub stage: String,
    pub epoch: usize,
    pub selected: usize,
    pub quantity_pct: f64,
    pub quality_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub selector: String,
    pub num_selected: usize,
    pub num_samples: usize,
    pub quantity_pct: f64,
    pub quality_pct: Option<f64>,
    pub per_class_selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub source: Option<Evaluation>,
    pub post_pre_adapt: Option<Evaluation>,
    pub selection: SelectionSummary,
    #[serde(rename = "final")]
    pub final_eval: Option<Evaluation>,
    pub source_history: Vec<SourceEpoch>,
    pub pre_adapt_history: Vec<EpochStats>,
    pub selection_history: Vec<SelectionEvent>,
    pub ssl_history: Vec<SslStep>,
    pub analysis: Vec<AnalysisRow>,
    pub config: PipelineConfig,
}

impl RunReport {
    pub fn source_accuracy(&self) -> Option<f64> {
        self.source.as_ref().map(|e| e.accuracy)
    }

    pub fn post_pre_adapt_accuracy(&self) -> Option<f64> {
        self.post_pre_adapt.as_ref().map(|e| e.accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|e| e.accuracy)
    }

    pub fn analysis_row(&self, method: &str) -> Option<&AnalysisRow> {
        self.analysis.iter().find(|r| r.method == method)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn evaluate_if_labeled(model: &Model, target: &Dataset) -> Result<Option<Evaluation>> {
    if target.has_labels() {
        evaluate(model, target).map(Some)
    } else {
        Ok(None)
    }
}

fn selection_event(stage: &str, epoch: usize, set: &PseudoLabelSet, target: &Dataset) -> SelectionEvent {
    SelectionEvent {
        stage: stage.into(),
        epoch,
        selected: set.len(),
        quantity_pct: set.quantity_pct(),
        quality_pct: if target.has_labels() { set.quality_pct(target) } else { None },
    }
}

/// Source model for a run: loaded from `source.checkpoint` or trained.
pub fn obtain_source_model(
    config: &PipelineConfig,
    source: Option<&Dataset>,
    out_dir: &Path,
) -> Result<(Model, Vec<SourceEpoch>)> {
    if let Some(path) = &config.source.checkpoint {
        let model = Checkpoint::load(path)?.to_model()?;
        if model.config() != &config.model {
            return Err(Error::Config(format!("{} was trained with a different model config", path.display())));
        }
        return Ok((model, Vec::new()));
    }
    let source = source.ok_or_else(|| {
        Error::Config("no source.checkpoint given and no labeled source data to train one (set data.source_manifest)".into())
    })?;
    let policy = AugmentationPolicy::new(PolicyKind::Weak, &config.augment)?;
    let (model, opt, history) =
        train_source_model(source, &config.model, &config.source, config.source.augment.then_some(&policy), config.seed)?;
    Checkpoint::from_model(&model, "source", Some(&opt)).save(out_dir.join("source.ckpt.json"))?;
    write_csv(&out_dir.join("source_history.csv"), &history)?;
    Ok((model, history))
}

/// Pre-adaptation, selection, FixMatch. Writes every artifact into
/// `config.output_dir` as it goes.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    config.validate()?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("config.toml"), config.to_toml()?).map_err(|e| Error::io(out.join("config.toml"), e))?;

    let (source_data, target) = load_data(&config.data, config.seed).map_err(|e| e.in_stage("data"))?;
    let (source_model, source_history) =
        obtain_source_model(config, source_data.as_ref(), &out).map_err(|e| e.in_stage("source"))?;
    let source_eval = evaluate_if_labeled(&source_model, &target).map_err(|e| e.in_stage("evaluate"))?;

    let weak = AugmentationPolicy::new(PolicyKind::Weak, &config.augment)?;
    let strong = AugmentationPolicy::new(PolicyKind::Strong, &config.augment)?;
    let chosen: Box<dyn PseudoLabelSelector> = selector::lookup(&config.selector)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = source_model.clone();
    let mut selection_history = Vec::new();

    // Step 1.
    let method = preadapt::lookup(&config.pre_adapt.method).expect("validated");
    let mut pre_adapt_history = run_pre_adapt(config, method.as_ref(), chosen.as_ref(), &mut model, &target, &weak, &mut rng, &mut selection_history, 0)
        .map_err(|e| e.in_stage("pre_adapt"))?;
    Checkpoint::from_model(&model, "pre_adapt", None).save(out.join("pre_adapt.ckpt.json"))?;
    let pa_eval = evaluate_if_labeled(&model, &target).map_err(|e| e.in_stage("evaluate"))?;

    // Step 2.
    let selection = chosen.select(&model, &target, &config.selection).map_err(|e| e.in_stage("consolidation"))?;
    if let Some(report) = &selection.report {
        report.save(out.join(CONSOLIDATION_FILE))?;
    }
    write_json(&out.join(PSEUDO_FILE), &selection.pseudo)?;
    selection_history.push(selection_event("selection", 0, &selection.pseudo, &target));
    let mut pseudo = selection.pseudo;
    let summary = SelectionSummary {
        selector: chosen.name().into(),
        num_selected: pseudo.len(),
        num_samples: pseudo.total(),
        quantity_pct: pseudo.quantity_pct(),
        quality_pct: if target.has_labels() { pseudo.quality_pct(&target) } else { None },
        per_class_selected: pseudo.per_class_counts(target.num_classes()),
    };

    let analysis = if target.has_labels() {
        let rows = analyze_pseudo_labels(&source_model, &model, &target, &config.selection).map_err(|e| e.in_stage("analyze"))?;
        write_csv(&out.join("pseudo_label_analysis.csv"), &rows)?;
        rows
    } else {
        Vec::new()
    };

    if config.pre_adapt_after_selection {
        let extra = run_pre_adapt(
            config,
            method.as_ref(),
            chosen.as_ref(),
            &mut model,
            &target,
            &weak,
            &mut rng,
            &mut selection_history,
            pre_adapt_history.len(),
        )
        .map_err(|e| e.in_stage("pre_adapt"))?;
        pre_adapt_history.extend(extra);
    }
    Checkpoint::from_model(&model, "consolidation", None).save(out.join("consolidation.ckpt.json"))?;

    // Step 3, split into segments at the re-selection epochs.
    let mut ssl_history: Vec<SslStep> = Vec::new();
    let mut bounds = config.schedule.clone();
    bounds.push(config.ssl.epochs);
    let mut done = 0;
    for (i, &end) in bounds.iter().enumerate() {
        if i > 0 {
            let sel = chosen.select(&model, &target, &config.selection).map_err(|e| e.in_stage("consolidation"))?;
            selection_history.push(selection_event("reselection", done, &sel.pseudo, &target));
            pseudo = sel.pseudo;
        }
        let seg = crate::ssl::SSLConfig { epochs: end - done, ..config.ssl.clone() };
        let offset = ssl_history.len();
        let mut on_epoch = |m: &Model, _: usize| -> Result<Option<f64>> { Ok(evaluate_if_labeled(m, &target)?.map(|ev| ev.accuracy)) };
        let steps = ssl_train(&mut model, &pseudo, &target, &seg, &weak, &strong, &mut rng, &mut on_epoch)
            .map_err(|e| e.in_stage("ssl"))?;
        ssl_history.extend(steps.into_iter().map(|mut s| {
            s.step += offset;
            s
        }));
        done = end;
    }

    let final_eval = evaluate_if_labeled(&model, &target).map_err(|e| e.in_stage("evaluate"))?;
    Checkpoint::from_model(&model, "final", None).save(out.join("final.ckpt.json"))?;
    write_csv(&out.join("pre_adapt_history.csv"), &pre_adapt_history)?;
    write_csv(&out.join("ssl_history.csv"), &ssl_history)?;
    write_csv(&out.join("selection_history.csv"), &selection_history)?;
    emit_plots(&out, &pre_adapt_history, &ssl_history, &selection_history)?;

    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        source: source_eval,
        post_pre_adapt: pa_eval,
        selection: summary,
        final_eval,
        source_history,
        pre_adapt_history,
        selection_history,
        ssl_history,
        analysis,
        config: config.clone(),
    };
    report.save(out.join(REPORT_FILE))?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_pre_adapt(
    config: &PipelineConfig,
    method: &dyn preadapt::PreAdaptation,
    chosen: &dyn PseudoLabelSelector,
    model: &mut Model,
    target: &Dataset,
    weak: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
    selection_history: &mut Vec<SelectionEvent>,
    epoch_offset: usize,
) -> Result<Vec<EpochStats>> {
    let mut on_epoch = |m: &Model, stats: &mut EpochStats| -> Result<()> {
        stats.epoch += epoch_offset;
        stats.target_accuracy = evaluate_if_labeled(m, target)?.map(|e| e.accuracy);
        if config.track_selection {
            let sel = chosen.select(m, target, &config.selection)?;
            selection_history.push(selection_event("pre_adapt", stats.epoch + 1, &sel.pseudo, target));
        }
        Ok(())
    };
    method.run(model, target, &config.pre_adapt, Some(weak), rng, &mut on_epoch)
}

fn emit_plots(out: &Path, pa: &[EpochStats], ssl: &[SslStep], selections: &[SelectionEvent]) -> Result<()> {
    let pa_acc: Vec<(f64, f64)> = pa.iter().filter_map(|s| s.target_accuracy.map(|a| ((s.epoch + 1) as f64, a))).collect();
    let ssl_acc: Vec<(f64, f64)> = ssl.iter().filter_map(|s| s.eval_accuracy.map(|a| (s.step as f64, a))).collect();
    let mask: Vec<(f64, f64)> = ssl.iter().map(|s| (s.step as f64, s.mask_rate * 100.0)).collect();
    plot_series(&out.join("pre_adapt_accuracy.svg"), "Target accuracy during pre-adaptation", "epoch", "%", &[("accuracy", pa_acc)])?;
    plot_series(
        &out.join("ssl_progress.svg"),
        "FixMatch progress",
        "step",
        "%",
        &[("target accuracy", ssl_acc), ("mask rate", mask)],
    )?;
    let tracked: Vec<&SelectionEvent> = selections.iter().filter(|e| e.stage == "pre_adapt").collect();
    if !tracked.is_empty() {
        let q: Vec<(f64, f64)> = tracked.iter().map(|e| (e.epoch as f64, e.quantity_pct)).collect();
        let p: Vec<(f64, f64)> = tracked.iter().filter_map(|e| e.quality_pct.map(|v| (e.epoch as f64, v))).collect();
        plot_series(&out.join("pseudo_label_quantity_quality.svg"), "Selected pseudo-labels", "epoch", "%", &[("quantity", q), ("quality", p)])?;
    }
    Ok(())
}

/// Run only the selection step on a checkpoint and write its report.
pub fn run_consolidation(config: &PipelineConfig, checkpoint: &Path, out_dir: &Path) -> Result<(PseudoLabelSet, Option<PathBuf>)> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let (_, target) = load_data(&config.data, config.seed)?;
    let sel = selector::lookup(&config.selector)?.select(&model, &target, &config.selection)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(PSEUDO_FILE), &sel.pseudo)?;
    let report_path = match &sel.report {
        Some(r) => {
            let p = out_dir.join(CONSOLIDATION_FILE);
            r.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok((sel.pseudo, report_path))
}
