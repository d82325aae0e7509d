//! The `pvm` subcommands as library functions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use pvm_core::datagen::{gen_mask, stream_rng, MaskPolicy, Regime, Stream};
use pvm_core::io::{save_mask, save_pgm};
use pvm_core::models::Variant;
use pvm_core::pvm::TokenPadding;

use crate::config::{ExperimentConfig, ModelConfig, Task};
use crate::data::{build, Split};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::train::{evaluate, load_trained, run_one, RunContext, RunOutcome};
use crate::verify::{run_suite, SuiteReport, SUITES};

/// Errors that map to exit status 2.
#[derive(Debug, thiserror::Error)]
pub enum UsageError {
    #[error("unknown suite {0:?}; available suites: {}", SUITES.join(", "))]
    UnknownSuite(String),
    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),
}

/// Runs one suite or all of them.
pub fn cmd_verify(suite: Option<&str>, seed: u64) -> Result<Vec<SuiteReport>> {
    let names: Vec<&str> = match suite {
        Some(s) => vec![s],
        None => SUITES.to_vec(),
    };
    let mut reports = Vec::new();
    for name in names {
        let Some(r) = run_suite(name, seed) else { bail!(UsageError::UnknownSuite(name.to_string())) };
        let r = r?;
        r.print();
        reports.push(r);
    }
    Ok(reports)
}

fn with_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg
}

pub fn metrics_path(cfg: &ExperimentConfig, variant: Variant) -> PathBuf {
    let task = match cfg.task {
        Task::Cls => "cls",
        Task::Depth => "depth",
    };
    cfg.out_dir.join(format!("metrics-{task}-{}.jsonl", variant.name()))
}

/// Trains every variant for every seed; each variant appends to its own
/// metrics file.
pub fn cmd_train(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<Vec<RunOutcome>> {
    let cfg = with_seed(cfg, seed);
    let train = build(&cfg, Split::Train)?;
    let test = build(&cfg, Split::Test)?;
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        let mut writer = MetricsWriter::append(metrics_path(&cfg, variant))?;
        for &s in &cfg.seeds {
            let start = Instant::now();
            let o = run_one(&cfg, &cfg.model(variant), s, &train, &test, Some(&mut writer))?;
            let final_loss = o.history.last().copied().unwrap_or(f64::NAN);
            let test: Vec<String> = o.test.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            println!("{}: final train loss {final_loss:.4}, test {} ({:.0}s)", o.run, test.join(" "), start.elapsed().as_secs_f64());
            out.push(o);
        }
    }
    Ok(out)
}

/// Metrics of one checkpoint under one stress regime.
#[derive(Clone, Debug)]
pub struct RegimeEval {
    pub regime: Regime,
    pub metrics: BTreeMap<String, f64>,
    pub invalid_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub run: String,
    pub model: ModelConfig,
    pub regimes: Vec<RegimeEval>,
    pub records: Vec<MetricsRecord>,
}

/// Evaluates a checkpoint under full-image stress masks; every regime when
/// `regime` is `None`. `seed` overrides the data seed.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, regime: Option<Regime>, seed: Option<u64>) -> Result<EvalOutcome> {
    if !checkpoint.join(pvm_core::io::MANIFEST).is_file() {
        bail!(UsageError::MissingCheckpoint(checkpoint.to_path_buf()));
    }
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let (model, trained) = load_trained(&cfg, checkpoint)?;
    let run = checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "eval".to_string(), |n| n.to_string_lossy().into_owned());
    let mut writer = MetricsWriter::append(metrics_path(&cfg, model.variant()))?;
    let mut ctx = RunContext {
        run: run.clone(),
        seed: cfg.data.seed,
        start: Instant::now(),
        writer: Some(&mut writer),
        records: Vec::new(),
    };
    let regimes = regime.map_or_else(|| Regime::ALL.to_vec(), |r| vec![r]);
    let mut results = Vec::new();
    for r in regimes {
        let data = build(&cfg, Split::Stress(r))?;
        let invalid_fraction = data.mean_invalid_fraction();
        let metrics = evaluate(&model, &trained, &data, r.name(), 0, &mut ctx)?;
        let shown: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{run} [{}] invalid {:.3}: {}", r.name(), invalid_fraction, shown.join(" "));
        results.push(RegimeEval { regime: r, metrics, invalid_fraction });
    }
    let records = ctx.records;
    Ok(EvalOutcome {
        run,
        model,
        regimes: results,
        records,
    })
}

/// Writes `<out>.pvmt` and `<out>.pgm`; returns the invalid fraction.
/// `density` selects sparse sampling instead of a regime mask.
pub fn cmd_maskgen(regime: Regime, density: Option<f64>, size: usize, seed: u64, out: &Path) -> Result<f64> {
    let policy = match density {
        Some(density) => MaskPolicy::SparseSample { density },
        None => MaskPolicy::Regime { regime },
    };
    let m = gen_mask(&policy, size, size, &mut stream_rng(seed, Stream::Mask, 0))?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_mask(out.with_extension("pvmt"), &m)?;
    save_pgm(out.with_extension("pgm"), &m)?;
    let f = m.invalid_fraction();
    println!("invalid fraction {f:.6}");
    Ok(f)
}

/// Published RMSE (m) of the three padding strategies, shown for context.
pub const PADDING_REFERENCE: [(TokenPadding, &str, f64); 3] = [
    (TokenPadding::Zero, "Zero-padding", 1.415),
    (TokenPadding::Mean, "Mean token padding", 1.398),
    (TokenPadding::Learned, "Learned token", 1.383),
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub padding: TokenPadding,
    pub rmse: f64,
    pub mae: f64,
    pub reference_rmse: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub records: Vec<MetricsRecord>,
}

impl AblationTable {
    /// Whether learned ≤ mean ≤ zero holds for the measured RMSE.
    pub fn reference_ordering_holds(&self) -> bool {
        let r: BTreeMap<&str, f64> = self.rows.iter().map(|r| (r.padding.name(), r.rmse)).collect();
        r["learned"] <= r["mean"] && r["mean"] <= r["zero"]
    }

    pub fn render(&self) -> String {
        let mut s = String::from("padding  | RMSE (desk) | MAE (desk) | reference RMSE (m)\n");
        s += "---------|-------------|------------|-------------------\n";
        for r in &self.rows {
            s += &format!("{:<8} | {:>11.4} | {:>10.4} | {:>18.3}\n", r.padding.name(), r.rmse, r.mae, r.reference_rmse);
        }
        s += "desk-scale values on synthetic fields; not comparable to the reference column.\n";
        s += &format!(
            "reference ordering learned <= mean <= zero: {} (informational)\n",
            if self.reference_ordering_holds() { "reproduced" } else { "not reproduced" }
        );
        s
    }
}

/// Trains the pvm depth model once per padding strategy and seed.
pub fn cmd_ablate_padding(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<AblationTable> {
    if cfg.task != Task::Depth {
        bail!("ablate-padding needs a depth task config");
    }
    let mut cfg = with_seed(cfg, seed);
    cfg.variants = vec![Variant::Pvm];
    let train = build(&cfg, Split::Train)?;
    let test = build(&cfg, Split::Test)?;
    let mut writer = MetricsWriter::append(cfg.out_dir.join("metrics-ablate-padding.jsonl"))?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (padding, _, reference_rmse) in PADDING_REFERENCE {
        cfg.token_padding = Some(padding);
        let (mut rmse, mut mae) = (0.0, 0.0);
        for &s in &cfg.seeds {
            let o = run_one(&cfg, &cfg.model(Variant::Pvm), s, &train, &test, Some(&mut writer))?;
            rmse += o.test["rmse"];
            mae += o.test["mae"];
            records.extend(o.records);
        }
        let n = cfg.seeds.len() as f64;
        rows.push(AblationRow {
            padding,
            rmse: rmse / n,
            mae: mae / n,
            reference_rmse,
        });
    }
    let table = AblationTable { rows, records };
    print!("{}", table.render());
    Ok(table)
}
