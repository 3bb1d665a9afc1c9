//! Adam, learning-rate schedules and the training procedures.
//!
//! Both networks are first trained on their own losses. The deblurring
//! network is then fine-tuned on
//! `mse(D(I_b), I_s) + λ · mse(R(D(I_b), I_b), I_b)` with the reblurring
//! network frozen by default, so the consistency term reaches the deblurring
//! parameters through the reblurring network.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{deblur_checkpoint, reblur_checkpoint, Checkpoint};
use crate::deblur::{deblurring_loss, DeblurNet};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::metrics;
use crate::params::ParamStore;
use crate::reblur::{reblurring_loss, ReblurNet, REBLUR_ALIGN};
use crate::synth::Corpus;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-18;

/// Adam with bias correction. Moments are kept in f64 whatever the
/// parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Real>(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, param: usize) -> (&[f64], &[f64]) {
        (&self.m[param], &self.v[param])
    }

    pub(crate) fn set_moments(&mut self, param: usize, m: Vec<f64>, v: Vec<f64>) {
        self.m[param] = m;
        self.v[param] = v;
    }

    pub fn step<S: Real>(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Tensor<S>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::dims("Adam::step", self.m.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: "parameter gradient",
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (((p, g), m), v) in store
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() {
                return Err(Error::shapes("Adam::step", p.shape(), g.shape()));
            }
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g.f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = S::of(p.f64() - update);
            }
        }
        Ok(())
    }
}

/// Step decay: `lr = lr0 · 0.5^⌊epoch / halve_every⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr0: f64,
    pub halve_every: usize,
    pub floor: f64,
}

impl Schedule {
    pub fn pretrain() -> Self {
        Schedule {
            lr0: 1e-4,
            halve_every: 1000,
            floor: 1e-6,
        }
    }

    pub fn finetune() -> Self {
        Schedule {
            lr0: 1e-5,
            halve_every: 200,
            floor: 1e-6,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.halve_every.max(1)).min(i32::MAX as usize) as i32;
        self.lr0 * 0.5f64.powi(halvings)
    }

    /// Training stops once the rate would fall below the floor.
    pub fn exhausted(&self, epoch: usize) -> bool {
        self.lr(epoch) < self.floor
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Upper bound on optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Random square crop side; 0 trains on whole images.
    pub crop: usize,
    pub schedule: Schedule,
    /// Validation and CSV logging period in epochs.
    pub log_every: usize,
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            batch_size: 2,
            crop: 0,
            schedule: Schedule::pretrain(),
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.crop.is_multiple_of(REBLUR_ALIGN) {
            return Err(Error::Config(format!(
                "crop {} is not divisible by {REBLUR_ALIGN}",
                self.crop
            )));
        }
        if self.schedule.lr0.is_nan()
            || self.schedule.lr0 <= 0.0
            || self.schedule.floor.is_nan()
            || self.schedule.floor < 0.0
        {
            return Err(Error::Config(format!(
                "invalid learning rate schedule {:?}",
                self.schedule
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyConfig {
    pub lambda: f64,
    pub freeze_reblur: bool,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            lambda: 0.1,
            freeze_reblur: true,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// A training batch as NCHW tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub blurred: Tensor<f32>,
    pub sharp: Tensor<f32>,
}

/// Reproducible epoch orderings and crops.
pub struct Batcher<'a> {
    corpus: &'a Corpus,
    batch_size: usize,
    crop: usize,
    seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a Corpus, cfg: &TrainConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("train", "empty corpus"));
        }
        let dims = corpus.sharp[0].dims();
        if corpus.sharp.iter().any(|s| s.dims() != dims) && cfg.crop == 0 {
            return Err(Error::contract(
                "train",
                "whole-image batches need equal image sizes; set a crop",
            ));
        }
        let smallest = corpus
            .sharp
            .iter()
            .map(|s| s.height().min(s.width()))
            .min()
            .unwrap_or(0);
        if cfg.crop > smallest {
            return Err(Error::contract(
                "train",
                format!(
                    "crop {} larger than the smallest image side {smallest}",
                    cfg.crop
                ),
            ));
        }
        Ok(Batcher {
            corpus,
            batch_size: cfg.batch_size,
            crop: cfg.crop,
            seed: cfg.seed,
        })
    }

    pub fn epoch(&self, epoch: usize) -> Result<Vec<Batch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(|idx| {
                let mut bl = Vec::with_capacity(idx.len());
                let mut sh = Vec::with_capacity(idx.len());
                for &i in idx {
                    let (b, s) = (&self.corpus.blurred[i], &self.corpus.sharp[i]);
                    if self.crop == 0 {
                        bl.push(b.to_tensor());
                        sh.push(s.to_tensor());
                    } else {
                        let top = rng.random_range(0..=b.height() - self.crop);
                        let left = rng.random_range(0..=b.width() - self.crop);
                        bl.push(b.crop(top, left, self.crop, self.crop)?.to_tensor());
                        sh.push(s.crop(top, left, self.crop, self.crop)?.to_tensor());
                    }
                }
                Ok(Batch {
                    blurred: Tensor::stack(&bl)?,
                    sharp: Tensor::stack(&sh)?,
                })
            })
            .collect()
    }
}

/// Loss value and parameter gradients of one batch.
pub struct StepGrads {
    pub loss: f64,
    pub grads: Vec<Tensor<f32>>,
}

pub fn deblur_grads(net: &DeblurNet, store: &ParamStore<f32>, batch: &Batch) -> Result<StepGrads> {
    let mut g = Graph::new();
    let p = g.bind(store, true);
    let b = g.constant(batch.blurred.clone());
    let s = g.constant(batch.sharp.clone());
    let out = net.forward(&mut g, &p, b)?;
    let loss = deblurring_loss(&mut g, out.deblurred, s)?;
    g.backward(loss)?;
    Ok(StepGrads {
        loss: g.value(loss).item_value()?.f64(),
        grads: g.param_grads(store, &p),
    })
}

/// The reblurring network learns to map (sharp, blurred) to blurred.
pub fn reblur_grads(net: &ReblurNet, store: &ParamStore<f32>, batch: &Batch) -> Result<StepGrads> {
    let mut g = Graph::new();
    let p = g.bind(store, true);
    let b = g.constant(batch.blurred.clone());
    let s = g.constant(batch.sharp.clone());
    let out = net.forward(&mut g, &p, s, b)?;
    let loss = reblurring_loss(&mut g, out.reblurred, b)?;
    g.backward(loss)?;
    Ok(StepGrads {
        loss: g.value(loss).item_value()?.f64(),
        grads: g.param_grads(store, &p),
    })
}

pub struct ConsistencyGrads {
    pub total: f64,
    pub deblur_term: f64,
    pub reblur_term: f64,
    pub deblur_grads: Vec<Tensor<f32>>,
    /// Present only when the reblurring network is trainable.
    pub reblur_grads: Option<Vec<Tensor<f32>>>,
}

pub fn consistency_grads(
    deblur: &DeblurNet,
    dstore: &ParamStore<f32>,
    reblur: &ReblurNet,
    rstore: &ParamStore<f32>,
    batch: &Batch,
    cc: &ConsistencyConfig,
) -> Result<ConsistencyGrads> {
    let mut g = Graph::new();
    let dp = g.bind(dstore, true);
    let rp = g.bind(rstore, !cc.freeze_reblur);
    let b = g.constant(batch.blurred.clone());
    let s = g.constant(batch.sharp.clone());
    let d = deblur.forward(&mut g, &dp, b)?.deblurred;
    let l_deblur = deblurring_loss(&mut g, d, s)?;
    let r = reblur.forward(&mut g, &rp, d, b)?.reblurred;
    let l_reblur = reblurring_loss(&mut g, r, b)?;
    let weighted = g.scale(l_reblur, cc.lambda)?;
    let total = g.add(l_deblur, weighted)?;
    g.backward(total)?;
    let val = |v| -> Result<f64> { Ok(g.value(v).item_value()?.f64()) };
    Ok(ConsistencyGrads {
        total: val(total)?,
        deblur_term: val(l_deblur)?,
        reblur_term: val(l_reblur)?,
        deblur_grads: g.param_grads(dstore, &dp),
        reblur_grads: (!cc.freeze_reblur).then(|| g.param_grads(rstore, &rp)),
    })
}

/// Mean quality over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Eval {
    /// Mean unclamped MSE against the target.
    pub mse: f64,
    /// Mean PSNR / SSIM of the clamped output against the target.
    pub psnr: f64,
    pub ssim: f64,
}

fn summarize(pairs: impl Iterator<Item = Result<(Tensor<f32>, Image)>>) -> Result<Eval> {
    let mut e = Eval::default();
    let mut n = 0usize;
    for pair in pairs {
        let (out, target) = pair?;
        let raw = Image::from_tensor(&out, 0)?;
        let clamped = raw.clamp();
        e.mse += metrics::mse(&raw, &target)?;
        e.psnr += metrics::psnr(&clamped, &target)?;
        e.ssim += metrics::ssim(&clamped, &target)?;
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok(Eval {
        mse: e.mse / n,
        psnr: e.psnr / n,
        ssim: e.ssim / n,
    })
}

fn deblur_raw(net: &DeblurNet, store: &ParamStore<f32>, blurred: &Image) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = g.bind(store, false);
    let x = g.constant(blurred.to_tensor());
    let out = net.forward(&mut g, &p, x)?;
    Ok(g.value(out.deblurred).clone())
}

fn reblur_raw(
    net: &ReblurNet,
    store: &ParamStore<f32>,
    sharp_like: &Tensor<f32>,
    blurred: &Image,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = g.bind(store, false);
    let s = g.constant(sharp_like.clone());
    let b = g.constant(blurred.to_tensor());
    let out = net.forward(&mut g, &p, s, b)?;
    Ok(g.value(out.reblurred).clone())
}

pub fn eval_deblur(net: &DeblurNet, store: &ParamStore<f32>, corpus: &Corpus) -> Result<Eval> {
    summarize(
        corpus
            .blurred
            .iter()
            .zip(&corpus.sharp)
            .map(|(b, s)| Ok((deblur_raw(net, store, b)?, s.clone()))),
    )
}

/// Reblurring quality with the true sharp images as input.
pub fn eval_reblur(net: &ReblurNet, store: &ParamStore<f32>, corpus: &Corpus) -> Result<Eval> {
    summarize(
        corpus
            .blurred
            .iter()
            .zip(&corpus.sharp)
            .map(|(b, s)| Ok((reblur_raw(net, store, &s.to_tensor(), b)?, b.clone()))),
    )
}

/// Mean `mse(R(D(I_b), I_b), I_b)` over a corpus.
pub fn consistency_mse(
    deblur: &DeblurNet,
    dstore: &ParamStore<f32>,
    reblur: &ReblurNet,
    rstore: &ParamStore<f32>,
    corpus: &Corpus,
) -> Result<f64> {
    let mut total = 0.0;
    for b in &corpus.blurred {
        let d = deblur_raw(deblur, dstore, b)?;
        let r = Image::from_tensor(&reblur_raw(reblur, rstore, &d, b)?, 0)?;
        total += metrics::mse(&r, b)?;
    }
    Ok(total / corpus.len().max(1) as f64)
}

/// Baseline of the reblurring task: MSE of copying the sharp input.
pub fn copy_sharp_mse(corpus: &Corpus) -> Result<f64> {
    let mut total = 0.0;
    for (b, s) in corpus.blurred.iter().zip(&corpus.sharp) {
        total += metrics::mse(s, b)?;
    }
    Ok(total / corpus.len().max(1) as f64)
}

/// Mean |R(unrelated sharp, I_b) − I_b|: small values mean the network
/// ignores its sharp input and copies the blurred one.
pub fn anti_collapse_deviation(
    net: &ReblurNet,
    store: &ParamStore<f32>,
    corpus: &Corpus,
) -> Result<f64> {
    let n = corpus.len();
    if n < 2 {
        return Err(Error::contract(
            "anti_collapse_deviation",
            "needs at least two pairs",
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        let other = &corpus.sharp[(i + 1) % n];
        let b = &corpus.blurred[i];
        other.check_same_dims(b, "anti_collapse_deviation")?;
        let out = Image::from_tensor(&reblur_raw(net, store, &other.to_tensor(), b)?, 0)?.clamp();
        let d: f64 = out
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum();
        total += d / b.data().len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean training loss over the epoch; NaN before the first step.
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    /// Training loss of every optimizer step.
    pub losses: Vec<f64>,
    pub epochs: usize,
    /// True when the schedule reached its floor before the step budget.
    pub hit_floor: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,lr,loss,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{},{},{}",
                r.epoch, r.step, r.lr, r.loss, r.psnr, r.ssim
            );
        }
        s
    }
}

/// Output directory of a training run: config snapshot, metrics CSV and
/// checkpoints.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl AsRef<Path>, config_text: &str) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let cfg = path.join("config.toml");
        std::fs::write(&cfg, config_text).map_err(|e| Error::io(&cfg, e))?;
        Ok(RunDir { path })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.path.join("final.ckpt")
    }

    fn write_metrics(&self, report: &TrainReport) -> Result<()> {
        let p = self.metrics_path();
        std::fs::write(&p, report.to_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// The shared loop: per-epoch batches, one optimizer step per batch with the
/// scheduled rate, periodic validation and checkpoints.
#[allow(clippy::too_many_arguments)]
fn fit(
    cfg: &TrainConfig,
    corpus: &Corpus,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
    run: Option<&RunDir>,
    mut step: impl FnMut(&mut ParamStore<f32>, &mut Adam, &Batch, f64) -> Result<f64>,
    mut validate: impl FnMut(&ParamStore<f32>) -> Result<Eval>,
    snapshot: impl Fn(&ParamStore<f32>, &Adam, usize) -> Checkpoint,
) -> Result<TrainReport> {
    cfg.validate()?;
    let batcher = Batcher::new(corpus, cfg)?;
    let mut report = TrainReport::default();
    let mut log = |report: &mut TrainReport,
                   store: &ParamStore<f32>,
                   epoch: usize,
                   loss: f64|
     -> Result<()> {
        let v = validate(store)?;
        report.rows.push(LogRow {
            epoch,
            step: report.losses.len(),
            lr: cfg.schedule.lr(epoch.saturating_sub(1)),
            loss,
            psnr: v.psnr,
            ssim: v.ssim,
        });
        if let Some(run) = run {
            run.write_metrics(report)?;
        }
        Ok(())
    };
    log(&mut report, store, 0, f64::NAN)?;
    let mut epoch = 0;
    while report.losses.len() < cfg.steps {
        if cfg.schedule.exhausted(epoch) {
            report.hit_floor = true;
            break;
        }
        let lr = cfg.schedule.lr(epoch);
        let (mut sum, mut n) = (0.0, 0);
        for batch in batcher.epoch(epoch)? {
            if report.losses.len() >= cfg.steps {
                break;
            }
            let loss = step(store, adam, &batch, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: "training loss",
                });
            }
            report.losses.push(loss);
            sum += loss;
            n += 1;
        }
        epoch += 1;
        let done = report.losses.len() >= cfg.steps;
        if epoch % cfg.log_every.max(1) == 0 || done {
            log(&mut report, store, epoch, sum / n.max(1) as f64)?;
        }
        if let Some(run) = run {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                snapshot(store, adam, epoch)
                    .save(run.path.join(format!("epoch_{epoch:06}.ckpt")))?;
            }
        }
    }
    report.epochs = epoch;
    if let Some(run) = run {
        snapshot(store, adam, epoch).save(run.final_checkpoint())?;
    }
    Ok(report)
}

fn with_state(mut c: Checkpoint, store: &ParamStore<f32>, adam: &Adam, epoch: usize) -> Checkpoint {
    c.add_optimizer(store, adam);
    c.meta.insert("epoch".into(), epoch.to_string());
    c
}

/// Train the deblurring network on `mse(D(I_b), I_s)`. Validation PSNR is
/// that of the deblurred validation images.
pub fn train_deblur(
    net: &DeblurNet,
    store: &mut ParamStore<f32>,
    corpus: &Corpus,
    validation: &Corpus,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainReport> {
    let mut adam = Adam::new(store);
    fit(
        cfg,
        corpus,
        store,
        &mut adam,
        run,
        |store, adam, batch, lr| {
            let sg = deblur_grads(net, store, batch)?;
            adam.step(store, &sg.grads, lr)?;
            Ok(sg.loss)
        },
        |store| eval_deblur(net, store, validation),
        |store, adam, epoch| with_state(deblur_checkpoint(&net.cfg, store), store, adam, epoch),
    )
}

/// Train the reblurring network on `mse(R(I_s, I_b), I_b)`. Validation PSNR
/// is that of the reblurred images against the blurred ones.
pub fn train_reblur(
    net: &ReblurNet,
    store: &mut ParamStore<f32>,
    corpus: &Corpus,
    validation: &Corpus,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainReport> {
    let mut adam = Adam::new(store);
    fit(
        cfg,
        corpus,
        store,
        &mut adam,
        run,
        |store, adam, batch, lr| {
            let sg = reblur_grads(net, store, batch)?;
            adam.step(store, &sg.grads, lr)?;
            Ok(sg.loss)
        },
        |store| eval_reblur(net, store, validation),
        |store, adam, epoch| with_state(reblur_checkpoint(&net.cfg, store), store, adam, epoch),
    )
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub train: TrainReport,
    /// Per-step deblurring and weighted-free reblurring terms.
    pub deblur_terms: Vec<f64>,
    pub reblur_terms: Vec<f64>,
}

/// Fine-tune the deblurring network on the consistency loss, starting from
/// fresh Adam state. The reblurring network only changes when
/// `cc.freeze_reblur` is off, with its own optimizer.
#[allow(clippy::too_many_arguments)]
pub fn finetune_consistency(
    deblur: &DeblurNet,
    dstore: &mut ParamStore<f32>,
    reblur: &ReblurNet,
    rstore: &mut ParamStore<f32>,
    corpus: &Corpus,
    validation: &Corpus,
    cc: &ConsistencyConfig,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<FinetuneReport> {
    cc.validate()?;
    let mut adam = Adam::new(dstore);
    let mut radam = Adam::new(rstore);
    let (mut deblur_terms, mut reblur_terms) = (Vec::new(), Vec::new());
    let train = fit(
        cfg,
        corpus,
        dstore,
        &mut adam,
        run,
        |store, adam, batch, lr| {
            let cg = consistency_grads(deblur, store, reblur, rstore, batch, cc)?;
            adam.step(store, &cg.deblur_grads, lr)?;
            if let Some(rg) = &cg.reblur_grads {
                radam.step(rstore, rg, lr)?;
            }
            deblur_terms.push(cg.deblur_term);
            reblur_terms.push(cg.reblur_term);
            Ok(cg.total)
        },
        |store| eval_deblur(deblur, store, validation),
        |store, adam, epoch| {
            let mut c = with_state(deblur_checkpoint(&deblur.cfg, store), store, adam, epoch);
            c.meta.insert("lambda".into(), cc.lambda.to_string());
            c
        },
    )?;
    Ok(FinetuneReport {
        train,
        deblur_terms,
        reblur_terms,
    })
}
