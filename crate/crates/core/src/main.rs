use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sfda::checkpoint::Checkpoint;
use sfda::consolidation::ConsolidationReport;
use sfda::data::manifest::{write_manifest, PayloadLayout};
use sfda::data::make_synthetic_shift;
use sfda::pipeline::{
    analyze_pseudo_labels, evaluate, load_data, obtain_source_model, parse_config, run_consolidation, run_pipeline, write_csv,
    write_json, AnalysisRow, PipelineConfig,
};

#[derive(Parser)]
#[command(name = "sfda", version, about = "Source-free domain adaptation with rationale-based pseudo-label selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pre_adapt.epochs=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Shortcut for `--set output_dir=...`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(dir) = &self.output_dir {
            overrides.push(format!("output_dir={}", toml_string(&dir.display().to_string())));
        }
        Ok(parse_config(self.config.as_deref(), &overrides)?)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source/target pair as checksummed manifests.
    MakeData {
        #[command(flatten)]
        common: Common,
        /// Store images as PNG files instead of one packed binary.
        #[arg(long)]
        png: bool,
    },
    /// Train a source model and save `source.ckpt.json`.
    TrainSource {
        #[command(flatten)]
        common: Common,
    },
    /// Full run: pre-adaptation, selection, FixMatch.
    Adapt {
        #[command(flatten)]
        common: Common,
    },
    /// Selection only, from a checkpoint.
    Consolidate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on the target set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Quantity/quality of pseudo-labels: a saved consolidation report, and
    /// the baseline selectors on a source and an adapted checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeData { common, png } => {
            let cfg = common.load()?;
            let (source, target) = make_synthetic_shift(&cfg.data.synthetic, cfg.seed).context("make-data")?;
            let dir = cfg.output_dir.join("data");
            let layout = if png { PayloadLayout::Png } else { PayloadLayout::Packed };
            let s = write_manifest(&source, &dir, "source", layout).context("make-data")?;
            let t = write_manifest(&target, &dir, "target", layout).context("make-data")?;
            println!("{}\n{}", s.display(), t.display());
        }
        Command::TrainSource { common } => {
            let mut cfg = common.load()?;
            cfg.source.checkpoint = None;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let (source, target) = load_data(&cfg.data, cfg.seed).context("stage `data`")?;
            let (model, history) = obtain_source_model(&cfg, source.as_ref(), &cfg.output_dir).context("stage `source`")?;
            if let Some(last) = history.last() {
                println!("source train accuracy {:.2}% (epoch {})", last.train_accuracy, last.epoch + 1);
            }
            if target.has_labels() {
                println!("target accuracy {:.2}%", evaluate(&model, &target)?.accuracy);
            }
            println!("{}", cfg.output_dir.join("source.ckpt.json").display());
        }
        Command::Adapt { common } => {
            let cfg = common.load()?;
            let report = run_pipeline(&cfg)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.2}%"));
            println!("source-only  {}", fmt(report.source_accuracy()));
            println!("pre-adapted  {}", fmt(report.post_pre_adapt_accuracy()));
            println!(
                "selected     {} / {} ({:.2}%), quality {}",
                report.selection.num_selected,
                report.selection.num_samples,
                report.selection.quantity_pct,
                fmt(report.selection.quality_pct)
            );
            println!("final        {}", fmt(report.final_accuracy()));
            println!("{}", cfg.output_dir.join(sfda::pipeline::REPORT_FILE).display());
        }
        Command::Consolidate { common, checkpoint } => {
            let cfg = common.load()?;
            let (set, report) = run_consolidation(&cfg, &checkpoint, &cfg.output_dir).context("stage `consolidation`")?;
            println!("selected {} / {} ({:.2}%)", set.len(), set.total(), set.quantity_pct());
            if let Some(p) = report {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = common.load()?;
            let model = Checkpoint::load(&checkpoint)?.to_model()?;
            let (_, target) = load_data(&cfg.data, cfg.seed)?;
            let e = evaluate(&model, &target)?;
            println!("top-1 {:.2}%  mean per-class {:.2}%", e.accuracy, e.mean_per_class);
            for (c, a) in e.per_class.iter().enumerate() {
                if let Some(a) = a {
                    println!("  class {c}: {a:.2}%");
                }
            }
        }
        Command::Analyze { common, report, source_checkpoint, checkpoint } => {
            let cfg = common.load()?;
            let (_, target) = load_data(&cfg.data, cfg.seed)?;
            let mut rows = Vec::new();
            if let Some(path) = report {
                let r = ConsolidationReport::load(&path)?;
                rows.push(AnalysisRow::from_set("report", &r.pseudo_label_set(), &target)?);
            }
            match (source_checkpoint, checkpoint) {
                (Some(s), Some(a)) => {
                    let source = Checkpoint::load(&s)?.to_model()?;
                    let adapted = Checkpoint::load(&a)?.to_model()?;
                    rows.extend(analyze_pseudo_labels(&source, &adapted, &target, &cfg.selection)?);
                }
                (None, None) => {}
                _ => bail!("--source-checkpoint and --checkpoint go together"),
            }
            if rows.is_empty() {
                bail!("nothing to analyze: pass --report and/or both checkpoints");
            }
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_csv(&cfg.output_dir.join("pseudo_label_analysis.csv"), &rows)?;
            write_json(&cfg.output_dir.join("pseudo_label_analysis.json"), &rows)?;
            println!("{:<24} {:>9} {:>10} {:>9}", "method", "selected", "quantity", "quality");
            for r in &rows {
                let q = r.quality_pct.map_or("n/a".into(), |v| format!("{v:.2}%"));
                println!("{:<24} {:>9} {:>9.2}% {:>9}", r.method, r.selected, r.quantity_pct, q);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
