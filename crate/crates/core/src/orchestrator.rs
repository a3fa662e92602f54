//! Diversify-aggregate-repeat training over any [`Trainable`], plus the ERM,
//! mixed-training and EMA baselines it is compared against.
//!
//! Epochs are 1-based. Epochs `1..E′` train a single model on the union of
//! the branch datasets; at `E′` the model is cloned into `M` branches, each
//! trained on its own dataset. Whenever `(epoch − E′) mod λ = 0` (and
//! `epoch > E′`) the branches are replaced by their uniform average.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::patchworld::PatchDataset;
use crate::seed::{derive_seed, rng_from_seed};

/// The contract the training loops drive.
pub trait Trainable: Clone + Send + Sync {
    type Sample: Send + Sync;

    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
    fn num_params(&self) -> usize {
        self.params().len()
    }
    /// Mean loss over `batch` and its gradient w.r.t. `params()`.
    fn loss_and_grad(&self, batch: &[&Self::Sample]) -> Result<(f64, Vec<f64>)>;
}

/// Cosine schedule `0.5·LR_max·(1 + cos((epoch−1)/E·π))`, epoch in `1..=E`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64) -> Result<f64> {
    if epoch == 0 || epoch > total {
        return Err(Error::Schedule { epoch, total });
    }
    let phase = (epoch - 1) as f64 / total as f64 * std::f64::consts::PI;
    Ok(0.5 * lr_max * (1.0 + phase.cos()))
}

/// Concatenation preserving branch order.
pub fn mixed_dataset<S: Clone>(parts: &[Vec<S>]) -> Result<Vec<S>> {
    if parts.is_empty() {
        return Err(Error::config("branches", "need at least one dataset"));
    }
    Ok(parts.concat())
}

pub fn mixed_patch_dataset(parts: &[PatchDataset]) -> Result<PatchDataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("branches", "need at least one dataset"))?;
    if parts.iter().any(|p| p.bank != first.bank) {
        return Err(Error::config("branches", "datasets use incompatible feature banks"));
    }
    let samples = parts.iter().flat_map(|p| p.samples.iter().cloned()).collect();
    Ok(PatchDataset::new(first.bank, samples, first.sigma))
}

/// Componentwise mean, accumulated incrementally so that averaging copies
/// of one vector returns it exactly.
pub fn aggregate_uniform(params: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = params
        .first()
        .ok_or_else(|| Error::Shape("cannot aggregate zero parameter vectors".into()))?;
    let mut mean = first.clone();
    for (k, p) in params.iter().enumerate().skip(1) {
        if p.len() != mean.len() {
            return Err(Error::Shape(format!(
                "parameter vector {k} has length {}, expected {}",
                p.len(),
                mean.len()
            )));
        }
        let w = 1.0 / (k + 1) as f64;
        for (m, x) in mean.iter_mut().zip(p) {
            *m += (x - *m) * w;
        }
    }
    Ok(mean)
}

/// `Σ λ_i θ_i` for nonnegative coefficients summing to one.
pub fn aggregate_convex(params: &[Vec<f64>], coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.len() != params.len() {
        return Err(Error::config(
            "coeffs",
            format!("{} coefficients for {} models", coeffs.len(), params.len()),
        ));
    }
    if coeffs.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::config("coeffs", "coefficients must be nonnegative"));
    }
    let s: f64 = coeffs.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::config("coeffs", format!("coefficients sum to {s}, not 1")));
    }
    let len = params.first().map(Vec::len).unwrap_or(0);
    if params.iter().any(|p| p.len() != len) {
        return Err(Error::Shape("parameter vectors differ in length".into()));
    }
    let mut out = vec![0.0; len];
    for (p, &c) in params.iter().zip(coeffs) {
        for (o, x) in out.iter_mut().zip(p) {
            *o += c * x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
    pub updates: u64,
}

impl EmaState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config("ema_decay", format!("need 0 <= decay < 1, got {decay}")));
        }
        Ok(Self {
            shadow: Vec::new(),
            decay,
            updates: 0,
        })
    }

    /// `shadow ← decay·shadow + (1−decay)·params`; the first call copies.
    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        if self.updates == 0 {
            self.shadow = params.to_vec();
        } else {
            if params.len() != self.shadow.len() {
                return Err(Error::Shape(format!(
                    "EMA shadow has {} entries, params {}",
                    self.shadow.len(),
                    params.len()
                )));
            }
            let d = self.decay;
            for (s, p) in self.shadow.iter_mut().zip(params) {
                *s = d * *s + (1.0 - d) * p;
            }
        }
        self.updates += 1;
        Ok(())
    }
}

pub fn ema_update(state: &EmaState, params: &[f64]) -> Result<EmaState> {
    let mut next = state.clone();
    next.update(params)?;
    Ok(next)
}

/// How a branch's dataset is built from the base data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Recipe {
    Identity,
    /// Cyclic feature shift `T_k`.
    Shift { k: usize },
    /// Index into the experiment's corruption list.
    Corruption { id: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub recipe: Recipe,
    /// Disjoint split index, or `None` for the full dataset.
    pub split: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub branches: usize,
    pub lambda: usize,
    pub lr_max: f64,
    pub batch_size: usize,
    pub master_seed: u64,
    pub branch_specs: Vec<BranchSpec>,
    pub aggregate_at_end: bool,
    pub ema_decay: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the consolidated model is checkpointed.
    pub checkpoint_epochs: Vec<usize>,
    /// Also checkpoint after every aggregation.
    pub checkpoint_on_aggregate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 50,
            branches: 3,
            lambda: 10,
            lr_max: 0.1,
            batch_size: 32,
            master_seed: 0,
            branch_specs: Vec::new(),
            aggregate_at_end: true,
            ema_decay: Some(0.999),
            momentum: 0.0,
            weight_decay: 0.0,
            checkpoint_epochs: Vec::new(),
            checkpoint_on_aggregate: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("dart.warmup_epochs", "need 0 <= E' <= E"));
        }
        if self.branches == 0 {
            return Err(Error::config("dart.branches", "need M >= 1"));
        }
        if self.lambda == 0 {
            return Err(Error::config("dart.lambda", "need lambda >= 1"));
        }
        if !(self.lr_max > 0.0) {
            return Err(Error::config("dart.lr_max", "need LR_max > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("dart.batch_size", "need batch_size >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("dart.momentum", "need 0 <= momentum < 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("dart.weight_decay", "need weight_decay >= 0"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config("dart.ema_decay", "need 0 <= decay < 1"));
            }
        }
        if !self.branch_specs.is_empty() && self.branch_specs.len() != self.branches {
            return Err(Error::config(
                "dart.branch_specs",
                format!("{} specs for M={}", self.branch_specs.len(), self.branches),
            ));
        }
        Ok(())
    }

    /// Epochs at which aggregation happens under this config.
    pub fn aggregation_epochs(&self) -> Vec<usize> {
        let start = self.warmup_epochs;
        let mut out: Vec<usize> = (1..=self.epochs)
            .filter(|&e| e > start && (e - start) % self.lambda == 0)
            .collect();
        if self.aggregate_at_end && out.last() != Some(&self.epochs) && self.epochs > 0 {
            out.push(self.epochs);
        }
        out
    }
}

/// Seed of branch `k`'s minibatch stream. Branch 0 also drives the warmup
/// model, so `M = 1` reproduces [`erm_train`] seeded with `branch_seed(master, 0)`.
pub fn branch_seed(master: u64, k: usize) -> u64 {
    derive_seed(master, &format!("branch:{k}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdOptions {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for SgdOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    /// `None` for the single (warmup or ERM) model.
    pub branch: Option<usize>,
    pub loss: f64,
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationEvent {
    pub epoch: usize,
    /// Mean branch evaluation before averaging.
    pub pre_eval: Option<f64>,
    pub post_eval: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub aggregations: Vec<AggregationEvent>,
    pub checkpoints: Vec<(usize, Vec<f64>)>,
    pub final_params: Vec<f64>,
    /// EMA shadow at the end of the run, when EMA was enabled.
    pub ema_params: Option<Vec<f64>>,
    /// Set when a branch diverged and the run stopped early.
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn aggregation_epochs(&self) -> Vec<usize> {
        self.aggregations.iter().map(|a| a.epoch).collect()
    }

    pub fn lr_at(&self, epoch: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.epoch == epoch).map(|r| r.lr)
    }

    /// `run.csv`: `epoch,lr,branch,loss,eval_acc,event`. The single model
    /// is branch `-1`; aggregation rows carry the post-aggregation eval.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,branch,loss,eval_acc,event\n");
        let mut aggs = self.aggregations.iter().peekable();
        for (i, r) in self.rows.iter().enumerate() {
            let branch = r.branch.map(|b| b as i64).unwrap_or(-1);
            s.push_str(&format!(
                "{},{},{},{},{},train\n",
                r.epoch,
                fmt_f64(r.lr),
                branch,
                fmt_f64(r.loss),
                r.eval.map(fmt_f64).unwrap_or_default()
            ));
            let last_of_epoch = self.rows.get(i + 1).map(|n| n.epoch) != Some(r.epoch);
            if last_of_epoch {
                while let Some(a) = aggs.next_if(|a| a.epoch == r.epoch) {
                    s.push_str(&format!(
                        "{},{},-1,,{},aggregate\n",
                        a.epoch,
                        fmt_f64(r.lr),
                        a.post_eval.map(fmt_f64).unwrap_or_default()
                    ));
                }
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Per-branch optimizer state.
#[derive(Clone)]
struct Branch<T> {
    model: T,
    velocity: Vec<f64>,
    seed: u64,
}

impl<T: Trainable> Branch<T> {
    fn new(model: T, seed: u64) -> Self {
        let velocity = vec![0.0; model.num_params()];
        Self { model, velocity, seed }
    }

    fn batches(&self, n: usize, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        if batch_size < n {
            order.shuffle(&mut rng_from_seed(derive_seed(self.seed, &format!("epoch:{epoch}"))));
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    fn sgd_step(&mut self, data: &[T::Sample], batch: &[usize], lr: f64, opt: &SgdOptions) -> Result<f64> {
        let refs: Vec<&T::Sample> = batch.iter().map(|&i| &data[i]).collect();
        let (loss, mut g) = self.model.loss_and_grad(&refs)?;
        let mut p = self.model.params();
        if opt.weight_decay != 0.0 {
            for (gi, pi) in g.iter_mut().zip(&p) {
                *gi += opt.weight_decay * pi;
            }
        }
        if opt.momentum != 0.0 {
            for (v, gi) in self.velocity.iter_mut().zip(&g) {
                *v = opt.momentum * *v + gi;
            }
            for (pi, v) in p.iter_mut().zip(&self.velocity) {
                *pi -= lr * v;
            }
        } else {
            for (pi, gi) in p.iter_mut().zip(&g) {
                *pi -= lr * gi;
            }
        }
        self.model.set_params(&p);
        Ok(loss)
    }
}

fn consolidated<T: Trainable>(branches: &[Branch<T>]) -> Result<Vec<f64>> {
    if branches.len() == 1 {
        return Ok(branches[0].model.params());
    }
    aggregate_uniform(&branches.iter().map(|b| b.model.params()).collect::<Vec<_>>())
}

/// Trains every branch for one epoch, stepping them in lockstep so the EMA
/// can track the branch average after each step. Returns the mean
/// minibatch loss per branch.
fn lockstep_epoch<T: Trainable>(
    branches: &mut [Branch<T>],
    data: &[&[T::Sample]],
    epoch: usize,
    lr: f64,
    opt: &SgdOptions,
    ema: &mut Option<EmaState>,
) -> Result<Vec<f64>> {
    let plans: Vec<Vec<Vec<usize>>> = branches
        .iter()
        .zip(data)
        .map(|(b, d)| b.batches(d.len(), epoch, opt.batch_size))
        .collect();
    let max_steps = plans.iter().map(Vec::len).max().unwrap_or(0);
    let mut sums = vec![0.0; branches.len()];
    let mut counts = vec![0usize; branches.len()];
    for step in 0..max_steps {
        let results: Vec<Option<Result<f64>>> = {
            let mut out: Vec<Option<Result<f64>>> = (0..branches.len()).map(|_| None).collect();
            let mut pairs: Vec<(&mut Branch<T>, &mut Option<Result<f64>>)> =
                branches.iter_mut().zip(out.iter_mut()).collect();
            exec::for_each_mut(&mut pairs, |k, (b, slot)| {
                if let Some(batch) = plans[k].get(step) {
                    **slot = Some(b.sgd_step(data[k], batch, lr, opt));
                }
            });
            out
        };
        for (k, r) in results.into_iter().enumerate() {
            if let Some(r) = r {
                let loss = r?;
                sums[k] += loss;
                counts[k] += 1;
            }
        }
        if let Some(e) = ema.as_mut() {
            e.update(&consolidated(branches)?)?;
        }
    }
    for (k, b) in branches.iter().enumerate() {
        let p = b.model.params();
        if p.iter().any(|x| !x.is_finite()) || !sums[k].is_finite() {
            return Err(Error::Divergence {
                last_stable_t: epoch.saturating_sub(1) as f64,
                msg: format!("branch {k} diverged at epoch {epoch}"),
            });
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// Optional per-model evaluation recorded each epoch.
pub type Evaluator<'a, T> = &'a (dyn Fn(&T) -> f64 + Sync);

/// SGD on `data` over `epochs`, with the learning rate given per epoch.
/// Minibatch order for epoch `e` is a pure function of `(seed, e)`; with
/// `batch_size ≥ n` every step is full-batch and unshuffled.
#[allow(clippy::too_many_arguments)]
pub fn erm_train<T: Trainable>(
    model: &mut T,
    data: &[T::Sample],
    epochs: std::ops::RangeInclusive<usize>,
    lr_schedule: &dyn Fn(usize) -> Result<f64>,
    opt: &SgdOptions,
    seed: u64,
    ema_decay: Option<f64>,
    eval: Option<Evaluator<'_, T>>,
) -> Result<RunRecord> {
    if data.is_empty() {
        return Err(Error::Undefined("training on an empty dataset".into()));
    }
    let mut branches = vec![Branch::new(model.clone(), seed)];
    let mut ema = ema_decay.map(EmaState::new).transpose()?;
    let mut record = RunRecord::default();
    for epoch in epochs {
        let lr = lr_schedule(epoch)?;
        match lockstep_epoch(&mut branches, &[data], epoch, lr, opt, &mut ema) {
            Ok(losses) => record.rows.push(EpochRow {
                epoch,
                lr,
                branch: None,
                loss: losses[0],
                eval: eval.map(|f| f(&branches[0].model)),
            }),
            Err(e @ Error::Divergence { .. }) => {
                record.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    *model = branches.pop().unwrap().model;
    record.final_params = model.params();
    record.ema_params = ema.map(|e| e.shadow);
    Ok(record)
}

/// Runs the full diversify-aggregate-repeat schedule. `init` builds the
/// starting model; `branch_data[k]` is `D^k`. Returns the final
/// consolidated parameters and the run record. A diverging branch stops
/// the run; the partial record is returned with `aborted` set.
pub fn dart_train<T: Trainable>(
    init: T,
    branch_data: &[&[T::Sample]],
    config: &TrainConfig,
    eval: Option<Evaluator<'_, T>>,
) -> Result<(Vec<f64>, RunRecord)>
where
    T::Sample: Clone,
{
    config.validate()?;
    if branch_data.len() != config.branches {
        return Err(Error::config(
            "dart.branches",
            format!("{} branch datasets for M={}", branch_data.len(), config.branches),
        ));
    }
    if branch_data.iter().any(|d| d.is_empty()) {
        return Err(Error::Undefined("a branch dataset is empty".into()));
    }
    let opt = SgdOptions::from(config);
    let mixed: Vec<T::Sample> = branch_data.iter().flat_map(|d| d.iter().cloned()).collect();
    let aggregate_epochs = config.aggregation_epochs();
    let mut ema = config.ema_decay.map(EmaState::new).transpose()?;
    let mut record = RunRecord::default();
    let mut branches = vec![Branch::new(init, branch_seed(config.master_seed, 0))];
    let branch_start = config.warmup_epochs.max(1);

    let eval_params = |template: &T, p: &[f64]| {
        eval.map(|f| {
            let mut m = template.clone();
            m.set_params(p);
            f(&m)
        })
    };

    for epoch in 1..=config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr_max)?;
        if epoch == branch_start {
            let base = branches.pop().unwrap();
            branches = (0..config.branches)
                .map(|k| Branch {
                    seed: branch_seed(config.master_seed, k),
                    ..base.clone()
                })
                .collect();
        }
        let step = if epoch < branch_start {
            lockstep_epoch(&mut branches, &[&mixed], epoch, lr, &opt, &mut ema)
        } else {
            lockstep_epoch(&mut branches, branch_data, epoch, lr, &opt, &mut ema)
        };
        let losses = match step {
            Ok(l) => l,
            Err(e @ Error::Divergence { .. }) => {
                record.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let in_branch_phase = epoch >= branch_start;
        for (k, b) in branches.iter().enumerate() {
            record.rows.push(EpochRow {
                epoch,
                lr,
                branch: in_branch_phase.then_some(k),
                loss: losses[k],
                eval: eval.map(|f| f(&b.model)),
            });
        }
        if in_branch_phase && aggregate_epochs.contains(&epoch) {
            let evals: Vec<f64> = record
                .rows
                .iter()
                .filter(|r| r.epoch == epoch)
                .filter_map(|r| r.eval)
                .collect();
            let pre_eval = (!evals.is_empty()).then(|| evals.iter().sum::<f64>() / evals.len() as f64);
            let avg = consolidated(&branches)?;
            for b in branches.iter_mut() {
                b.model.set_params(&avg);
            }
            record.aggregations.push(AggregationEvent {
                epoch,
                pre_eval,
                post_eval: eval_params(&branches[0].model, &avg),
            });
            if config.checkpoint_on_aggregate && !config.checkpoint_epochs.contains(&epoch) {
                record.checkpoints.push((epoch, avg));
            }
        }
        if config.checkpoint_epochs.contains(&epoch) {
            record.checkpoints.push((epoch, consolidated(&branches)?));
        }
    }
    record.checkpoints.sort_by_key(|c| c.0);
    let final_params = consolidated(&branches)?;
    record.final_params = final_params.clone();
    record.ema_params = ema.map(|e| e.shadow);
    Ok((final_params, record))
}

/// Same schedule as [`dart_train`] but returns the individual branch
/// parameter vectors at the end instead of (only) their average; no final
/// aggregation is applied regardless of `aggregate_at_end`.
pub fn dart_branches<T: Trainable>(
    init: T,
    branch_data: &[&[T::Sample]],
    config: &TrainConfig,
) -> Result<Vec<Vec<f64>>>
where
    T::Sample: Clone,
{
    let mut cfg = config.clone();
    cfg.aggregate_at_end = false;
    cfg.validate()?;
    let opt = SgdOptions::from(&cfg);
    let mixed: Vec<T::Sample> = branch_data.iter().flat_map(|d| d.iter().cloned()).collect();
    let aggregate_epochs = cfg.aggregation_epochs();
    let mut ema = None;
    let mut branches = vec![Branch::new(init, branch_seed(cfg.master_seed, 0))];
    let branch_start = cfg.warmup_epochs.max(1);
    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max)?;
        if epoch == branch_start {
            let base = branches.pop().unwrap();
            branches = (0..cfg.branches)
                .map(|k| Branch {
                    seed: branch_seed(cfg.master_seed, k),
                    ..base.clone()
                })
                .collect();
        }
        if epoch < branch_start {
            lockstep_epoch(&mut branches, &[&mixed], epoch, lr, &opt, &mut ema)?;
        } else {
            lockstep_epoch(&mut branches, branch_data, epoch, lr, &opt, &mut ema)?;
            if aggregate_epochs.contains(&epoch) {
                let avg = consolidated(&branches)?;
                branches.iter_mut().for_each(|b| b.model.set_params(&avg));
            }
        }
    }
    Ok(branches.into_iter().map(|b| b.model.params()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L(θ) = mean_i ½‖θ − a_i‖²` over samples `a_i`.
    #[derive(Clone)]
    struct Quadratic {
        theta: Vec<f64>,
    }

    impl Trainable for Quadratic {
        type Sample = Vec<f64>;
        fn params(&self) -> Vec<f64> {
            self.theta.clone()
        }
        fn set_params(&mut self, p: &[f64]) {
            self.theta = p.to_vec();
        }
        fn loss_and_grad(&self, batch: &[&Vec<f64>]) -> Result<(f64, Vec<f64>)> {
            let n = batch.len() as f64;
            let mut g = vec![0.0; self.theta.len()];
            let mut loss = 0.0;
            for a in batch {
                for (j, (t, x)) in self.theta.iter().zip(a.iter()).enumerate() {
                    loss += 0.5 * (t - x).powi(2) / n;
                    g[j] += (t - x) / n;
                }
            }
            Ok((loss, g))
        }
    }

    fn toy_data(seed: u64, n: usize) -> Vec<Vec<f64>> {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect()
    }

    fn full_loss(q: &Quadratic, data: &[Vec<f64>]) -> f64 {
        let refs: Vec<&Vec<f64>> = data.iter().collect();
        q.loss_and_grad(&refs).unwrap().0
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(1, 10, 0.3).unwrap(), 0.3);
        assert!((cosine_lr(101, 200, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0, 10, 0.1).is_err());
        assert!(cosine_lr(11, 10, 0.1).is_err());
        let e = 1000;
        let lrs: Vec<f64> = (1..=e).map(|i| cosine_lr(i, e, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn aggregate_examples() {
        let theta = vec![0.1, -2.5, 3.3333, 1e-300];
        for m in 1..8 {
            let copies = vec![theta.clone(); m];
            assert_eq!(aggregate_uniform(&copies).unwrap(), theta);
        }
        let neg: Vec<f64> = theta.iter().map(|x| -x).collect();
        assert!(aggregate_uniform(&[theta.clone(), neg]).unwrap().iter().all(|&x| x == 0.0));
        assert!(aggregate_uniform(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(aggregate_uniform(&[]).is_err());
    }

    #[test]
    fn convex_examples() {
        let ps = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]];
        let u = aggregate_convex(&ps, &[1.0 / 3.0; 3]).unwrap();
        let m = aggregate_uniform(&ps).unwrap();
        for (a, b) in u.iter().zip(&m) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(aggregate_convex(&ps, &[0.0, 1.0, 0.0]).unwrap(), ps[1]);
        // three-expert soup weights 0.17 / 0.46 / 0.37
        let soup = aggregate_convex(&ps, &[0.17, 0.46, 0.37]).unwrap();
        assert!((soup[0] - (0.17 + 0.74)).abs() < 1e-12);
        assert!((soup[1] - (0.46 + 0.74)).abs() < 1e-12);
        assert!(aggregate_convex(&ps, &[0.5, 0.6, -0.1]).is_err());
        assert!(aggregate_convex(&ps, &[0.5, 0.4, 0.0]).is_err());
        assert!(aggregate_convex(&ps, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn uniform_mean_variance_shrinks_by_m() {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 2.0).unwrap();
        for m in [2usize, 4, 8] {
            let mut rng = rng_from_seed(m as u64);
            let mut acc = 0.0;
            let trials = 200;
            let len = 256;
            for _ in 0..trials {
                let vs: Vec<Vec<f64>> = (0..m)
                    .map(|_| (0..len).map(|_| normal.sample(&mut rng)).collect())
                    .collect();
                let mean = aggregate_uniform(&vs).unwrap();
                acc += mean.iter().map(|x| x * x).sum::<f64>() / len as f64;
            }
            let ratio = acc / trials as f64 / 4.0;
            assert!((ratio * m as f64 - 1.0).abs() < 0.2, "m={m} ratio={ratio}");
        }
    }

    #[test]
    fn ema_examples() {
        let mut s = EmaState::new(0.0).unwrap();
        s.update(&[1.0]).unwrap();
        s.update(&[5.0]).unwrap();
        assert_eq!(s.shadow, vec![5.0]);

        let mut s = EmaState::new(0.9).unwrap();
        s.update(&[0.0]).unwrap();
        for _ in 0..500 {
            s.update(&[3.0]).unwrap();
        }
        assert!((s.shadow[0] - 3.0).abs() < 1e-12);

        // closed form: shadow_k = d^(k-1) x_1 + Σ_{j=2..k} (1-d) d^(k-j) x_j
        let d = 0.7;
        let xs = [2.0, -1.0, 4.0, 0.5, 3.0];
        let mut s = EmaState::new(d).unwrap();
        for x in xs {
            s = ema_update(&s, &[x]).unwrap();
        }
        let k = xs.len() as i32;
        let mut closed = d.powi(k - 1) * xs[0];
        for (j, x) in xs.iter().enumerate().skip(1) {
            closed += (1.0 - d) * d.powi(k - 1 - j as i32) * x;
        }
        assert!((s.shadow[0] - closed).abs() < 1e-12);
        assert!(s.update(&[1.0, 2.0]).is_err());
        assert!(EmaState::new(1.0).is_err());
    }

    #[test]
    fn mixed_examples() {
        let a = vec![vec![1.0], vec![2.0]];
        let b = vec![vec![3.0]];
        assert_eq!(mixed_dataset(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(mixed_dataset(&[a.clone(), b.clone()]).unwrap().len(), 3);
        assert!(mixed_dataset::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn mixed_patch_rho_is_weighted_mean() {
        use crate::patchworld::{empirical_rho, make_feature_bank, sample_dataset};
        let bank = make_feature_bank(3, 6).unwrap();
        let a = sample_dataset(&bank, 30, &[0.5, 0.3, 0.2], 1.0, 1).unwrap();
        let b = sample_dataset(&bank, 70, &[0.1, 0.1, 0.8], 1.0, 2).unwrap();
        let u = mixed_patch_dataset(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(u.n(), 100);
        let (ra, rb, ru) = (
            empirical_rho(&a).unwrap(),
            empirical_rho(&b).unwrap(),
            empirical_rho(&u).unwrap(),
        );
        for k in 0..3 {
            assert!((ru[k] - (0.3 * ra[k] + 0.7 * rb[k])).abs() < 1e-12);
        }
        let other = sample_dataset(&make_feature_bank(3, 7).unwrap(), 5, &[0.5, 0.3, 0.2], 1.0, 1).unwrap();
        assert!(mixed_patch_dataset(&[a, other]).is_err());
    }

    fn opts(batch: usize) -> SgdOptions {
        SgdOptions {
            batch_size: batch,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn erm_zero_epochs_and_convex_decrease() {
        let data = toy_data(1, 20);
        let mut q = Quadratic { theta: vec![5.0, -3.0, 2.0] };
        #[allow(clippy::reversed_empty_ranges)]
        let rec = erm_train(&mut q, &data, 1..=0, &|_| Ok(0.1), &opts(4), 0, None, None).unwrap();
        assert!(rec.rows.is_empty());
        assert_eq!(q.theta, vec![5.0, -3.0, 2.0]);

        let mut prev = full_loss(&q, &data);
        for e in 1..=20 {
            erm_train(&mut q, &data, e..=e, &|_| Ok(0.05), &opts(100), 0, None, None).unwrap();
            let cur = full_loss(&q, &data);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn erm_deterministic() {
        let data = toy_data(2, 33);
        let run = || {
            let mut q = Quadratic { theta: vec![1.0, 1.0, 1.0] };
            let o = SgdOptions {
                batch_size: 5,
                momentum: 0.9,
                weight_decay: 5e-4,
            };
            erm_train(&mut q, &data, 1..=7, &|e| cosine_lr(e, 7, 0.1), &o, 99, Some(0.9), None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a, b);
    }

    fn cfg(m: usize) -> TrainConfig {
        TrainConfig {
            epochs: 12,
            warmup_epochs: 4,
            branches: m,
            lambda: 3,
            lr_max: 0.2,
            batch_size: 4,
            master_seed: 17,
            momentum: 0.9,
            weight_decay: 1e-3,
            ema_decay: Some(0.95),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_branch_reduces_to_erm() {
        let data = toy_data(3, 21);
        let init = Quadratic { theta: vec![2.0, -1.0, 0.5] };
        let c = cfg(1);
        let (dart, rec) = dart_train(init.clone(), &[&data], &c, None).unwrap();
        let mut erm = init;
        let erec = erm_train(
            &mut erm,
            &data,
            1..=c.epochs,
            &|e| cosine_lr(e, c.epochs, c.lr_max),
            &SgdOptions::from(&c),
            branch_seed(c.master_seed, 0),
            c.ema_decay,
            None,
        )
        .unwrap();
        assert_eq!(dart, erm.theta);
        assert_eq!(rec.ema_params, erec.ema_params);
    }

    #[test]
    fn aggregation_schedule() {
        let c = cfg(3);
        assert_eq!(c.aggregation_epochs(), vec![7, 10, 12]);
        let c2 = TrainConfig {
            lambda: 100,
            ..cfg(3)
        };
        assert_eq!(c2.aggregation_epochs(), vec![12]);
        let c3 = TrainConfig {
            aggregate_at_end: false,
            ..cfg(3)
        };
        assert_eq!(c3.aggregation_epochs(), vec![7, 10]);
        let c4 = TrainConfig {
            warmup_epochs: 0,
            lambda: 4,
            ..cfg(3)
        };
        assert_eq!(c4.aggregation_epochs(), vec![4, 8, 12]);

        let parts: Vec<Vec<Vec<f64>>> = (0..3).map(|k| toy_data(10 + k, 8)).collect();
        let refs: Vec<&[Vec<f64>]> = parts.iter().map(Vec::as_slice).collect();
        let init = Quadratic { theta: vec![0.0; 3] };
        let (_, rec) = dart_train(init, &refs, &c, None).unwrap();
        assert_eq!(rec.aggregation_epochs(), c.aggregation_epochs());
        for e in 1..=c.epochs {
            assert_eq!(rec.lr_at(e).unwrap(), cosine_lr(e, c.epochs, c.lr_max).unwrap());
        }
    }

    #[test]
    fn broadcast_makes_branches_identical() {
        let parts: Vec<Vec<Vec<f64>>> = (0..3).map(|k| toy_data(20 + k, 8)).collect();
        let refs: Vec<&[Vec<f64>]> = parts.iter().map(Vec::as_slice).collect();
        let c = TrainConfig {
            epochs: 10,
            lambda: 3,
            ..cfg(3)
        };
        // 10 - 4 = 6 is a multiple of 3: the last epoch aggregates
        let bs = dart_branches(Quadratic { theta: vec![0.0; 3] }, &refs, &c).unwrap();
        assert!(bs.windows(2).all(|w| w[0] == w[1]));
        let c = TrainConfig { epochs: 11, ..c };
        let bs = dart_branches(Quadratic { theta: vec![0.0; 3] }, &refs, &c).unwrap();
        assert!(bs[0] != bs[1]);
    }

    #[test]
    fn run_csv_shape() {
        let parts: Vec<Vec<Vec<f64>>> = (0..2).map(|k| toy_data(30 + k, 6)).collect();
        let refs: Vec<&[Vec<f64>]> = parts.iter().map(Vec::as_slice).collect();
        let c = cfg(2);
        let eval = |q: &Quadratic| -q.theta[0];
        let (_, rec) = dart_train(Quadratic { theta: vec![0.0; 3] }, &refs, &c, Some(&eval)).unwrap();
        let csv = rec.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,lr,branch,loss,eval_acc,event"));
        let agg_rows = csv.lines().filter(|l| l.ends_with(",aggregate")).count();
        assert_eq!(agg_rows, rec.aggregations.len());
        // 3 warmup rows + 9 epochs x 2 branches
        assert_eq!(csv.lines().filter(|l| l.ends_with(",train")).count(), 3 + 18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lambda: 0, ..cfg(2) }.validate().is_err());
        assert!(TrainConfig { branches: 0, ..cfg(2) }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 13, ..cfg(2) }.validate().is_err());
        assert!(TrainConfig { lr_max: 0.0, ..cfg(2) }.validate().is_err());
        assert!(cfg(2).validate().is_ok());
    }
}
