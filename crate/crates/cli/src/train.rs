//! Deterministic minibatch training and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pvm_core::autodiff::{Adam, Tape, Var};
use pvm_core::datagen::{stream_rng, Stream};
use pvm_core::io::{load_checkpoint, save_checkpoint};
use pvm_core::models::{
    cls_forward, cls_forward_t, dc_forward, dc_forward_t, rmse_mae_valid, topk_accuracy, ClsConfig, ClsParams, DepthConfig, DepthParams, Variant,
    CHARBONNIER_EPS,
};
use pvm_core::params::{accumulate, adam_step, bind, load_named, named, ParamTree};
use pvm_core::partial::MaskedVar;
use pvm_core::tensor::Tensor;
use rand::seq::SliceRandom;

use crate::config::{ExperimentConfig, ModelConfig};
use crate::data::{ClsItem, Dataset, DepthItem, Split};
use crate::metrics::{MetricsRecord, MetricsWriter};

/// Trained parameters of either task.
#[derive(Clone, Debug, PartialEq)]
pub enum Trained {
    Cls(ClsParams),
    Depth(DepthParams),
}

impl Trained {
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        Ok(match model {
            ModelConfig::Cls(c) => Trained::Cls(ClsParams::init(&mut rng, c)?),
            ModelConfig::Depth(c) => Trained::Depth(DepthParams::init(&mut rng, c)?),
        })
    }

    pub fn named(&self) -> BTreeMap<String, Tensor<f32>> {
        match self {
            Trained::Cls(p) => named(p),
            Trained::Depth(p) => named(p),
        }
    }

    pub fn load(&mut self, values: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        match self {
            Trained::Cls(p) => load_named(p, values)?,
            Trained::Depth(p) => load_named(p, values)?,
        }
        Ok(())
    }
}

/// Identifies a run in metrics and on disk.
pub fn run_id(model: &ModelConfig, seed: u64) -> String {
    let (task, padding) = match model {
        ModelConfig::Cls(c) => ("cls", c.token_padding),
        ModelConfig::Depth(c) => ("depth", c.token_padding),
    };
    format!("{task}-{}-{}-s{seed}", model.variant().name(), padding.name())
}

pub struct RunContext<'a> {
    pub run: String,
    pub seed: u64,
    pub start: Instant,
    pub writer: Option<&'a mut MetricsWriter>,
    pub records: Vec<MetricsRecord>,
}

impl RunContext<'_> {
    pub fn emit(&mut self, epoch: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        let r = MetricsRecord {
            run: self.run.clone(),
            seed: self.seed,
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            wall_clock: self.start.elapsed().as_secs_f64(),
        };
        if let Some(w) = self.writer.as_deref_mut() {
            w.write(&r)?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Minibatch Adam over `n` samples; gradients are averaged over each batch.
/// Returns the mean loss of every epoch.
fn fit<P, F>(params: &mut P, n: usize, cfg: &ExperimentConfig, ctx: &mut RunContext<'_>, loss_name: &str, mut loss: F) -> Result<Vec<f64>>
where
    P: ParamTree<Tensor<f32>>,
    F: FnMut(&mut Tape<f32>, &P::Mapped<Var>, usize) -> Result<Var>,
{
    let mut adam = Adam::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream_rng(ctx.seed, Stream::Sampling, epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = BTreeMap::new();
            for &i in batch {
                let mut tape = Tape::new();
                let pv = bind(&mut tape, params);
                let l = loss(&mut tape, &pv, i)?;
                let value = tape.value(l).data()[0];
                if !value.is_finite() {
                    bail!("{}: non-finite {loss_name} {value} at epoch {epoch}, sample {i}", ctx.run);
                }
                total += value as f64;
                accumulate(&mut grads, tape.backward(l)?);
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            adam_step(&mut adam, params, &grads)?;
        }
        let mean = total / n as f64;
        ctx.emit(epoch, "train", loss_name, mean)?;
        history.push(mean);
    }
    Ok(history)
}

pub fn train_cls(cfg: &ExperimentConfig, model: &ClsConfig, data: &[ClsItem], ctx: &mut RunContext<'_>) -> Result<(ClsParams, Vec<f64>)> {
    let Trained::Cls(mut p) = Trained::init(&ModelConfig::Cls(model.clone()), ctx.seed)? else { unreachable!() };
    let history = fit(&mut p, data.len(), cfg, ctx, "cross_entropy", |tape, pv, i| {
        let item = &data[i];
        let x = MaskedVar::constant(tape, &item.x);
        let z = cls_forward_t(tape, &x, pv, model)?;
        Ok(tape.cross_entropy(z, item.label)?)
    })?;
    Ok((p, history))
}

pub fn train_depth(cfg: &ExperimentConfig, model: &DepthConfig, data: &[DepthItem], ctx: &mut RunContext<'_>) -> Result<(DepthParams, Vec<f64>)> {
    let Trained::Depth(mut p) = Trained::init(&ModelConfig::Depth(model.clone()), ctx.seed)? else { unreachable!() };
    let history = fit(&mut p, data.len(), cfg, ctx, "charbonnier", |tape, pv, i| {
        let item = &data[i];
        let x = MaskedVar::constant(tape, &item.x);
        let out = dc_forward_t(tape, &x, pv, model)?;
        Ok(tape.charbonnier(out.pred, &item.gt, &item.gt_mask, CHARBONNIER_EPS as f32)?)
    })?;
    Ok((p, history))
}

/// Top-1 and top-5 accuracy.
pub fn eval_cls(model: &ClsConfig, p: &ClsParams, data: &[ClsItem]) -> Result<(f64, f64)> {
    let logits = data.iter().map(|it| cls_forward(&it.x, model, p)).collect::<pvm_core::Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|it| it.label).collect();
    let k5 = 5.min(model.classes);
    Ok((topk_accuracy(&logits, &labels, 1)?, topk_accuracy(&logits, &labels, k5)?))
}

/// RMSE and MAE over every valid ground-truth pixel of the set.
pub fn eval_depth(model: &DepthConfig, p: &DepthParams, data: &[DepthItem]) -> Result<(f64, f64)> {
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for it in data {
        let (pred, _) = dc_forward(&it.x, model, p)?;
        let (rmse, mae) = rmse_mae_valid(pred.values(), &it.gt, &it.gt_mask)?;
        let n = it.gt_mask.count_valid();
        se += rmse * rmse * n as f64;
        ae += mae * n as f64;
        count += n;
    }
    Ok(((se / count as f64).sqrt(), ae / count as f64))
}

/// Evaluates `trained` on `data`, emitting records under `split`.
pub fn evaluate(model: &ModelConfig, trained: &Trained, data: &Dataset, split: &str, epoch: usize, ctx: &mut RunContext<'_>) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    match (model, trained, data) {
        (ModelConfig::Cls(m), Trained::Cls(p), Dataset::Cls(d)) => {
            let (top1, top5) = eval_cls(m, p, d)?;
            out.insert("top1".to_string(), top1);
            out.insert("top5".to_string(), top5);
        }
        (ModelConfig::Depth(m), Trained::Depth(p), Dataset::Depth(d)) => {
            let (rmse, mae) = eval_depth(m, p, d)?;
            out.insert("rmse".to_string(), rmse);
            out.insert("mae".to_string(), mae);
        }
        _ => bail!("model, parameters and dataset belong to different tasks"),
    }
    for (k, &v) in &out {
        ctx.emit(epoch, split, k, v)?;
    }
    Ok(out)
}

/// Outcome of one `(variant, seed)` run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run: String,
    pub variant: Variant,
    pub seed: u64,
    pub history: Vec<f64>,
    pub test: BTreeMap<String, f64>,
    pub records: Vec<MetricsRecord>,
    pub checkpoint: PathBuf,
}

/// Trains, evaluates on the test split and writes a checkpoint under
/// `out_dir/<run>/checkpoint`.
pub fn run_one(
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    writer: Option<&mut MetricsWriter>,
) -> Result<RunOutcome> {
    let run = run_id(model, seed);
    let mut ctx = RunContext {
        run: run.clone(),
        seed,
        start: Instant::now(),
        writer,
        records: Vec::new(),
    };
    let (trained, history) = match (model, train) {
        (ModelConfig::Cls(m), Dataset::Cls(d)) => {
            let (p, h) = train_cls(cfg, m, d, &mut ctx)?;
            (Trained::Cls(p), h)
        }
        (ModelConfig::Depth(m), Dataset::Depth(d)) => {
            let (p, h) = train_depth(cfg, m, d, &mut ctx)?;
            (Trained::Depth(p), h)
        }
        _ => bail!("model and dataset belong to different tasks"),
    };
    let test_metrics = evaluate(model, &trained, test, Split::Test.name(), cfg.epochs, &mut ctx)?;
    let checkpoint = cfg.out_dir.join(&run).join("checkpoint");
    save_checkpoint(&checkpoint, &trained.named(), &model.hash()).with_context(|| format!("writing {}", checkpoint.display()))?;
    Ok(RunOutcome {
        run,
        variant: model.variant(),
        seed,
        history,
        test: test_metrics,
        records: ctx.records,
        checkpoint,
    })
}

/// Loads a checkpoint trained under one of `cfg`'s variants.
pub fn load_trained(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<(ModelConfig, Trained)> {
    let ckpt = load_checkpoint(dir, None).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let model = [Variant::Pvm, Variant::Vm]
        .into_iter()
        .map(|v| cfg.model(v))
        .find(|m| m.hash() == ckpt.config_hash)
        .with_context(|| format!("config hash mismatch: checkpoint {} matches no variant of this config", ckpt.config_hash))?;
    let mut trained = Trained::init(&model, 0)?;
    trained.load(&ckpt.params)?;
    Ok((model, trained))
}
