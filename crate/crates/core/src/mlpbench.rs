//! Desk-scale testbed: a one-hidden-layer network on a synthetic binary
//! task whose label signal is spread over several coordinate blocks, with
//! block corruptions standing in for image augmentations.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{average_flatness, loss_barrier, worst_case_flatness, FlatnessReport};
use crate::error::{Error, Result};
use crate::exec;
use crate::orchestrator::{
    branch_seed, cosine_lr, dart_branches, dart_train, erm_train, RunRecord, SgdOptions, TrainConfig, Trainable,
};
use crate::patchnet::{softplus_neg, logistic_weight};
use crate::seed::{derive_seed, rng_from_seed, RngPolicy};
use crate::table::{Cell, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSample {
    pub x: Vec<f64>,
    pub y: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Number of label-carrying coordinate blocks.
    pub blocks: usize,
    pub block_len: usize,
    /// Class-mean magnitude per robust coordinate (unit noise).
    pub separation: f64,
    /// Pure-noise coordinates appended after the spurious one.
    pub nuisance: usize,
    /// `P(spurious sign = y)` in the training set.
    pub spurious_rate_train: f64,
    pub spurious_rate_test: f64,
    pub spurious_scale: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            block_len: 8,
            separation: 0.4,
            nuisance: 8,
            spurious_rate_train: 0.9,
            spurious_rate_test: 0.5,
            spurious_scale: 1.0,
            n_train: 512,
            n_test: 2000,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("task.n_train", "train and test sets must be nonempty"));
        }
        if self.blocks == 0 || self.block_len == 0 {
            return Err(Error::config("task.blocks", "need at least one nonempty block"));
        }
        for (key, r) in [
            ("task.spurious_rate_train", self.spurious_rate_train),
            ("task.spurious_rate_test", self.spurious_rate_test),
        ] {
            if !(0.5..=1.0).contains(&r) {
                return Err(Error::config(key, "spurious rate must lie in [0.5, 1]"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.blocks * self.block_len + 1 + self.nuisance
    }

    pub fn spurious_index(&self) -> usize {
        self.blocks * self.block_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub seed: u64,
    /// Sign pattern `s_j` of the class mean on robust coordinates.
    pub mean_signs: Vec<f64>,
    pub train: Vec<MlpSample>,
    pub test: Vec<MlpSample>,
}

impl SyntheticTask {
    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// `(start, len)` of block `b`.
    pub fn block(&self, b: usize) -> (usize, usize) {
        (b * self.config.block_len, self.config.block_len)
    }

    /// Accuracy of the LDA direction restricted to the robust coordinates.
    pub fn robust_probe_accuracy(&self, set: &[MlpSample]) -> f64 {
        let correct = set
            .iter()
            .filter(|s| {
                let f: f64 = self.mean_signs.iter().zip(&s.x).map(|(m, x)| m * x).sum();
                (f >= 0.0) == (s.y > 0)
            })
            .count();
        correct as f64 / set.len() as f64
    }
}

fn draw_set(cfg: &TaskConfig, signs: &[f64], n: usize, rate: f64, seed: u64) -> Vec<MlpSample> {
    let mut rng = rng_from_seed(seed);
    let robust = signs.len();
    (0..n)
        .map(|i| {
            let y: i8 = if i % 2 == 0 { 1 } else { -1 };
            let yf = f64::from(y);
            let mut x = Vec::with_capacity(cfg.dim());
            for s in signs {
                let z: f64 = rng.sample(StandardNormal);
                x.push(yf * cfg.separation * s + z);
            }
            let agree = rng.random::<f64>() < rate;
            let sp = if agree { yf } else { -yf };
            let z: f64 = rng.sample(StandardNormal);
            x.push(cfg.spurious_scale * sp + 0.1 * z);
            for _ in 0..cfg.nuisance {
                x.push(rng.sample(StandardNormal));
            }
            debug_assert_eq!(x.len(), robust + 1 + cfg.nuisance);
            MlpSample { x, y }
        })
        .collect()
}

/// Class-balanced samples `x_j = y·μ·s_j + N(0,1)` on robust coordinates,
/// a spurious coordinate `±scale + N(0, 0.01)` agreeing with `y` at the
/// configured rate, then nuisance `N(0,1)` coordinates. Train and test are
/// drawn from separate streams.
pub fn make_task(cfg: &TaskConfig, seed: u64) -> Result<SyntheticTask> {
    cfg.validate()?;
    let policy = RngPolicy::new(seed);
    let mut rng = policy.rng("mean-signs");
    let signs: Vec<f64> = (0..cfg.blocks * cfg.block_len)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let train = draw_set(cfg, &signs, cfg.n_train, cfg.spurious_rate_train, policy.seed("train"));
    let test = draw_set(cfg, &signs, cfg.n_test, cfg.spurious_rate_test, policy.seed("test"));
    Ok(SyntheticTask {
        config: cfg.clone(),
        seed,
        mean_signs: signs,
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Mask,
    Jitter,
    Permute,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Self::Mask),
            "jitter" => Ok(Self::Jitter),
            "permute" => Ok(Self::Permute),
            _ => Err(Error::config("corruption.kind", format!("unknown kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mask => "mask",
            Self::Jitter => "jitter",
            Self::Permute => "permute",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub start: usize,
    pub len: usize,
    /// Mask: fraction of the block zeroed. Jitter: noise std.
    /// Permute: probability a sample's block is shuffled.
    pub strength: f64,
    pub seed: u64,
}

impl Corruption {
    pub fn name(&self) -> String {
        format!("{}@{}", self.kind, self.start)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Applies `c` to every input in order, drawing per-sample randomness from
/// the stream seeded by `c.seed`.
pub fn corrupt(inputs: &[Vec<f64>], c: &Corruption) -> Result<Vec<Vec<f64>>> {
    if c.len == 0 {
        return Err(Error::config("corruption.len", "block must be nonempty"));
    }
    if !(c.strength >= 0.0) {
        return Err(Error::config("corruption.strength", "must be >= 0"));
    }
    if matches!(c.kind, CorruptionKind::Mask | CorruptionKind::Permute) && c.strength > 1.0 {
        return Err(Error::config("corruption.strength", "mask and permute strengths lie in [0, 1]"));
    }
    let mut rng = rng_from_seed(c.seed);
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        if c.start + c.len > x.len() {
            return Err(Error::config(
                "corruption.block",
                format!("block {}..{} exceeds input dim {}", c.start, c.start + c.len, x.len()),
            ));
        }
        let mut x = x.clone();
        let block = &mut x[c.start..c.start + c.len];
        match c.kind {
            CorruptionKind::Mask => {
                let width = (c.strength * c.len as f64).round() as usize;
                let offset = rng.random_range(0..=c.len - width);
                block[offset..offset + width].iter_mut().for_each(|v| *v = 0.0);
            }
            CorruptionKind::Jitter => {
                if c.strength > 0.0 {
                    let normal = Normal::new(0.0, c.strength).unwrap();
                    block.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
                }
            }
            CorruptionKind::Permute => {
                if rng.random::<f64>() < c.strength {
                    block.shuffle(&mut rng);
                }
            }
        }
        out.push(x);
    }
    Ok(out)
}

pub fn corrupt_samples(set: &[MlpSample], c: &Corruption) -> Result<Vec<MlpSample>> {
    let xs: Vec<Vec<f64>> = set.iter().map(|s| s.x.clone()).collect();
    Ok(corrupt(&xs, c)?
        .into_iter()
        .zip(set)
        .map(|(x, s)| MlpSample { x, y: s.y })
        .collect())
}

/// `in → hidden (ReLU) → 1` with logistic loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub input: usize,
    pub hidden: usize,
    /// `W1 (hidden × input)`, `b1`, `w2`, `b2`, flattened in that order.
    pub params: Vec<f64>,
}

impl MlpModel {
    pub fn num_params_for(input: usize, hidden: usize) -> usize {
        hidden * input + 2 * hidden + 1
    }

    /// He-normal first layer, `N(0, 1/hidden)` output layer, zero biases.
    pub fn init(input: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::InvalidDimension("MLP layers must be nonempty".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut params = vec![0.0; Self::num_params_for(input, hidden)];
        let s1 = (2.0 / input as f64).sqrt();
        for p in &mut params[..hidden * input] {
            *p = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        let s2 = (1.0 / hidden as f64).sqrt();
        let off = hidden * input + hidden;
        for p in &mut params[off..off + hidden] {
            *p = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(Self { input, hidden, params })
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (h, i) = (self.hidden, self.input);
        let (w1, rest) = self.params.split_at(h * i);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h);
        (w1, b1, w2, rest[0])
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let (w1, b1, w2, b2) = self.split();
        let mut f = b2;
        for j in 0..self.hidden {
            let row = &w1[j * self.input..(j + 1) * self.input];
            let a = b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            if a > 0.0 {
                f += w2[j] * a;
            }
        }
        f
    }

    pub fn loss(&self, set: &[MlpSample]) -> f64 {
        set.iter().map(|s| softplus_neg(f64::from(s.y) * self.logit(&s.x))).sum::<f64>() / set.len() as f64
    }
}

impl Trainable for MlpModel {
    type Sample = MlpSample;

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn set_params(&mut self, params: &[f64]) {
        self.params.copy_from_slice(params);
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn loss_and_grad(&self, batch: &[&MlpSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Undefined("loss of an empty batch".into()));
        }
        let (h, inp) = (self.hidden, self.input);
        let (w1, b1, w2, b2) = self.split();
        let n = batch.len() as f64;
        let mut g = vec![0.0; self.params.len()];
        let (gw1, rest) = g.split_at_mut(h * inp);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h);
        let mut loss = 0.0;
        let mut act = vec![0.0; h];
        for s in batch {
            if s.x.len() != inp {
                return Err(Error::Shape(format!("input dim {} for a {inp}-input MLP", s.x.len())));
            }
            let mut f = b2;
            for j in 0..h {
                let row = &w1[j * inp..(j + 1) * inp];
                let a = b1[j] + row.iter().zip(&s.x).map(|(w, v)| w * v).sum::<f64>();
                act[j] = a.max(0.0);
                f += w2[j] * act[j];
            }
            let y = f64::from(s.y);
            let m = y * f;
            loss += softplus_neg(m);
            let df = -y * logistic_weight(m) / n;
            gb2[0] += df;
            for j in 0..h {
                gw2[j] += df * act[j];
                if act[j] > 0.0 {
                    let da = df * w2[j];
                    gb1[j] += da;
                    for (gw, v) in gw1[j * inp..(j + 1) * inp].iter_mut().zip(&s.x) {
                        *gw += da * v;
                    }
                }
            }
        }
        Ok((loss / n, g))
    }
}

/// Fraction of samples with `sign(F) = y` (`F = 0` counts as `+1`), after
/// the optional test-time corruption.
pub fn evaluate(model: &MlpModel, set: &[MlpSample], corruption: Option<&Corruption>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Undefined("accuracy of an empty set".into()));
    }
    let owned;
    let set = match corruption {
        Some(c) => {
            owned = corrupt_samples(set, c)?;
            &owned[..]
        }
        None => set,
    };
    let correct = set.iter().filter(|s| (model.logit(&s.x) >= 0.0) == (s.y > 0)).count();
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    /// Each sample gets one corruption drawn uniformly.
    PerSample,
    /// Each minibatch gets one corruption drawn uniformly. Minibatch
    /// membership and its corruption are drawn once; their order is
    /// reshuffled every epoch.
    PerMinibatch,
    /// Concatenation of every corrupted copy.
    Union,
}

/// Samples trained as one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGroup(pub Vec<MlpSample>);

/// An [`MlpModel`] whose training samples are [`SampleGroup`]s, so a batch
/// of one group is a minibatch of its members.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedMlp(pub MlpModel);

impl Trainable for GroupedMlp {
    type Sample = SampleGroup;

    fn params(&self) -> Vec<f64> {
        self.0.params()
    }

    fn set_params(&mut self, params: &[f64]) {
        self.0.set_params(params);
    }

    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn loss_and_grad(&self, batch: &[&SampleGroup]) -> Result<(f64, Vec<f64>)> {
        let flat: Vec<&MlpSample> = batch.iter().flat_map(|g| g.0.iter()).collect();
        self.0.loss_and_grad(&flat)
    }
}

/// Minibatch-sized groups of `train`, each under one uniformly drawn corruption.
pub fn minibatch_groups(corrupted: &[Vec<MlpSample>], batch_size: usize, seed: u64) -> Vec<SampleGroup> {
    let n = corrupted[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(|idx| {
            let k = rng.random_range(0..corrupted.len());
            SampleGroup(idx.iter().map(|&i| corrupted[k][i].clone()).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lambda: usize,
    pub lr_max: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: Option<f64>,
    /// DART branches train on disjoint splits instead of full copies.
    pub split_branches: bool,
    /// Branch count for the identical-corruption DART arm.
    pub identical_branches: usize,
    /// Corruption used by the identical-corruption arms.
    pub identical_index: usize,
    pub mix: MixMode,
    pub master_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            warmup_epochs: 100,
            lambda: 20,
            lr_max: 0.05,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_decay: Some(0.999),
            split_branches: true,
            identical_branches: 3,
            identical_index: 0,
            mix: MixMode::PerSample,
            master_seed: 0,
        }
    }
}

impl BenchConfig {
    fn train_config(&self, branches: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            branches,
            lambda: self.lambda,
            lr_max: self.lr_max,
            batch_size: self.batch_size,
            master_seed: self.master_seed,
            aggregate_at_end: true,
            ema_decay: self.ema_decay,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ..TrainConfig::default()
        }
    }

    fn sgd(&self) -> SgdOptions {
        SgdOptions {
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Default corruptions: one per robust block, cycling mask / jitter / permute.
pub fn default_corruptions(task: &SyntheticTask) -> Vec<Corruption> {
    let kinds = [CorruptionKind::Mask, CorruptionKind::Jitter, CorruptionKind::Permute];
    (0..task.config.blocks)
        .map(|b| {
            let (start, len) = task.block(b);
            let kind = kinds[b % 3];
            Corruption {
                kind,
                start,
                len,
                strength: if kind == CorruptionKind::Jitter { 3.0 } else { 1.0 },
                seed: derive_seed(task.seed, &format!("corruption:{b}")),
            }
        })
        .collect()
}

/// One trained arm of the comparison.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub name: String,
    pub record: RunRecord,
    /// Evaluated parameters (EMA shadow when EMA is on).
    pub params: Vec<f64>,
    /// Accuracy on clean test data, then under each test corruption.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CrossTable {
    pub corruptions: Vec<String>,
    pub arms: Vec<ArmResult>,
    pub aborted: Option<String>,
}

impl CrossTable {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// Expert `i`'s mean accuracy over test corruptions other than its own.
    pub fn expert_off_diagonal(&self, i: usize) -> Option<f64> {
        let a = self.arm(&format!("expert:{i}"))?;
        let others: Vec<f64> = (0..self.corruptions.len())
            .filter(|&j| j != i)
            .map(|j| a.accuracy[j + 1])
            .collect();
        Some(others.iter().sum::<f64>() / others.len() as f64)
    }

    /// Mean accuracy of an arm over all test corruptions.
    pub fn mean_corrupted(&self, name: &str) -> Option<f64> {
        let a = self.arm(name)?;
        let v = &a.accuracy[1..];
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Test column with the highest accuracy for expert `i` (ties: lowest).
    pub fn expert_best_column(&self, i: usize) -> Option<usize> {
        let a = self.arm(&format!("expert:{i}"))?;
        let v = &a.accuracy[1..];
        (0..v.len()).max_by(|&x, &y| v[x].total_cmp(&v[y]).then(y.cmp(&x)))
    }

    pub fn table(&self) -> Table {
        let mut cols = vec!["arm".to_string(), "clean".to_string()];
        cols.extend(self.corruptions.iter().cloned());
        let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut t = Table::new(&refs);
        for a in &self.arms {
            let mut row = vec![Cell::Text(a.name.clone())];
            row.extend(a.accuracy.iter().map(|v| Cell::Float(*v)));
            t.push(row);
        }
        t
    }
}

fn mixed_set(train: &[MlpSample], corrupted: &[Vec<MlpSample>], mode: MixMode, seed: u64) -> Vec<MlpSample> {
    match mode {
        MixMode::PerSample => {
            let mut rng = rng_from_seed(seed);
            (0..train.len())
                .map(|i| {
                    let k = if corrupted.len() == 1 { 0 } else { rng.random_range(0..corrupted.len()) };
                    corrupted[k][i].clone()
                })
                .collect()
        }
        MixMode::Union | MixMode::PerMinibatch => corrupted.concat(),
    }
}

fn split_indices(n: usize, m: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if m == 1 {
        return vec![order];
    }
    order.shuffle(&mut rng_from_seed(derive_seed(seed, "split")));
    let size = n / m;
    (0..m).map(|b| order[b * size..(b + 1) * size].to_vec()).collect()
}

fn pick(set: &[MlpSample], idx: &[usize]) -> Vec<MlpSample> {
    idx.iter().map(|&i| set[i].clone()).collect()
}

/// Trains the expert, mixed-training and DART arms and evaluates each on
/// clean test data and under every test corruption. Arms, in order:
/// `expert:i` (ERM on corruption `i`), `mixed`, `dart:diverse` (one
/// corruption per branch), `dart:identical` and `erm:identical` (the
/// identical-corruption pair). A diverging arm stops the comparison and
/// the partial table is returned with `aborted` set.
pub fn run_mt_vs_dart(task: &SyntheticTask, corruptions: &[Corruption], cfg: &BenchConfig) -> Result<CrossTable> {
    if corruptions.is_empty() {
        return Err(Error::config("bench.corruptions", "need at least one corruption"));
    }
    if cfg.identical_index >= corruptions.len() {
        return Err(Error::config("bench.identical_index", "index out of range"));
    }
    let policy = RngPolicy::new(cfg.master_seed);
    let init = MlpModel::init(task.dim(), cfg.hidden, policy.seed("init"))?;
    let seed0 = branch_seed(cfg.master_seed, 0);
    let test_corr: Vec<Corruption> = corruptions
        .iter()
        .enumerate()
        .map(|(i, c)| c.with_seed(derive_seed(c.seed, &format!("test:{i}"))))
        .collect();
    let eval_all = |p: &[f64]| -> Result<Vec<f64>> {
        let mut m = init.clone();
        m.set_params(p);
        let mut acc = vec![evaluate(&m, &task.test, None)?];
        for c in &test_corr {
            acc.push(evaluate(&m, &task.test, Some(c))?);
        }
        Ok(acc)
    };
    let corrupted: Vec<Vec<MlpSample>> = corruptions
        .iter()
        .map(|c| corrupt_samples(&task.train, c))
        .collect::<Result<_>>()?;

    enum Job {
        Erm(String, Vec<MlpSample>),
        Grouped(String, Vec<SampleGroup>),
        Dart(String, Vec<Vec<MlpSample>>),
    }
    let mut jobs = Vec::new();
    for (i, set) in corrupted.iter().enumerate() {
        jobs.push(Job::Erm(format!("expert:{i}"), set.clone()));
    }
    if cfg.mix == MixMode::PerMinibatch {
        jobs.push(Job::Grouped(
            "mixed".into(),
            minibatch_groups(&corrupted, cfg.batch_size, policy.seed("mix")),
        ));
    } else {
        jobs.push(Job::Erm(
            "mixed".into(),
            mixed_set(&task.train, &corrupted, cfg.mix, policy.seed("mix")),
        ));
    }
    let m = corruptions.len();
    let splits = if cfg.split_branches {
        split_indices(task.train.len(), m, cfg.master_seed)
    } else {
        vec![(0..task.train.len()).collect(); m]
    };
    jobs.push(Job::Dart(
        "dart:diverse".into(),
        (0..m).map(|k| pick(&corrupted[k], &splits[k])).collect(),
    ));
    let mi = cfg.identical_branches.max(1);
    let ic = &corruptions[cfg.identical_index];
    let isplits = if cfg.split_branches {
        split_indices(task.train.len(), mi, cfg.master_seed)
    } else {
        vec![(0..task.train.len()).collect(); mi]
    };
    let identical: Vec<Vec<MlpSample>> = (0..mi)
        .map(|k| {
            let c = if k == 0 { *ic } else { ic.with_seed(derive_seed(ic.seed, &format!("branch:{k}"))) };
            Ok(pick(&corrupt_samples(&task.train, &c)?, &isplits[k]))
        })
        .collect::<Result<_>>()?;
    jobs.push(Job::Dart("dart:identical".into(), identical));
    jobs.push(Job::Erm("erm:identical".into(), corrupted[cfg.identical_index].clone()));

    let results = exec::map(&jobs, |job| -> Result<(String, RunRecord)> {
        match job {
            Job::Erm(name, data) => {
                let mut model = init.clone();
                let rec = erm_train(
                    &mut model,
                    data,
                    1..=cfg.epochs,
                    &|e| cosine_lr(e, cfg.epochs, cfg.lr_max),
                    &cfg.sgd(),
                    seed0,
                    cfg.ema_decay,
                    None,
                )?;
                Ok((name.clone(), rec))
            }
            Job::Grouped(name, groups) => {
                let mut model = GroupedMlp(init.clone());
                let opt = SgdOptions {
                    batch_size: 1,
                    ..cfg.sgd()
                };
                let rec = erm_train(
                    &mut model,
                    groups,
                    1..=cfg.epochs,
                    &|e| cosine_lr(e, cfg.epochs, cfg.lr_max),
                    &opt,
                    seed0,
                    cfg.ema_decay,
                    None,
                )?;
                Ok((name.clone(), rec))
            }
            Job::Dart(name, data) => {
                let refs: Vec<&[MlpSample]> = data.iter().map(Vec::as_slice).collect();
                let (_, rec) = dart_train(init.clone(), &refs, &cfg.train_config(data.len()), None)?;
                Ok((name.clone(), rec))
            }
        }
    });
    let mut arms = Vec::new();
    let mut aborted = None;
    for r in results {
        let (name, record) = r?;
        if let Some(msg) = &record.aborted {
            aborted = Some(format!("{name}: {msg}"));
            break;
        }
        let params = record.ema_params.clone().unwrap_or_else(|| record.final_params.clone());
        let accuracy = eval_all(&params)?;
        arms.push(ArmResult {
            name,
            record,
            params,
            accuracy,
        });
    }
    Ok(CrossTable {
        corruptions: corruptions.iter().map(Corruption::name).collect(),
        arms,
        aborted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessConfig {
    pub worst_radius: f64,
    pub probes: usize,
    pub ascent_steps: usize,
    pub noise_std: f64,
    pub average_radius: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        Self {
            worst_radius: 0.25,
            probes: 20,
            ascent_steps: 10,
            noise_std: 0.25,
            average_radius: 1.0,
            samples: 64,
            seed: 0,
        }
    }
}

/// Flatness of `params` on the train loss over `set`.
pub fn flatness(model: &MlpModel, params: &[f64], set: &[MlpSample], cfg: &FlatnessConfig) -> Result<FlatnessReport> {
    let refs: Vec<&MlpSample> = set.iter().collect();
    let lg = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p);
        m.loss_and_grad(&refs)
    };
    let l = |p: &[f64]| lg(p).map(|r| r.0);
    Ok(FlatnessReport {
        worst_case: worst_case_flatness(params, &lg, cfg.worst_radius, cfg.probes, cfg.ascent_steps, cfg.seed)?,
        average: average_flatness(params, &l, cfg.noise_std, cfg.average_radius, cfg.samples, cfg.seed)?,
        train_loss: l(params)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierStudy {
    /// Branch-divergence epochs, ascending.
    pub divergence_epochs: Vec<usize>,
    /// Barrier excess between two branches sharing warmup, per entry above.
    pub shared: Vec<f64>,
    /// Barrier excess between two independently initialized ERM models
    /// trained for the longest schedule.
    pub independent: f64,
}

/// Two branches warmed up together for `cfg.warmup_epochs` and then trained
/// apart on disjoint halves of the clean training set for each divergence
/// budget, versus two ERM models from different initializations. Barriers
/// use the clean train loss on a 21-point grid.
pub fn barrier_study(task: &SyntheticTask, cfg: &BenchConfig, divergence_epochs: &[usize]) -> Result<BarrierStudy> {
    if divergence_epochs.is_empty() {
        return Err(Error::config("barrier.divergence_epochs", "need at least one budget"));
    }
    let policy = RngPolicy::new(cfg.master_seed);
    let init = MlpModel::init(task.dim(), cfg.hidden, policy.seed("init"))?;
    let halves = split_indices(task.train.len(), 2, cfg.master_seed);
    let data: Vec<Vec<MlpSample>> = halves.iter().map(|h| pick(&task.train, h)).collect();
    let refs: Vec<&[MlpSample]> = data.iter().map(Vec::as_slice).collect();
    let train_refs: Vec<&MlpSample> = task.train.iter().collect();
    let loss = |p: &[f64]| -> Result<f64> {
        let mut m = init.clone();
        m.set_params(p);
        Ok(m.loss_and_grad(&train_refs)?.0)
    };
    let mut sorted = divergence_epochs.to_vec();
    sorted.sort_unstable();
    let shared = exec::map(&sorted, |&d| -> Result<f64> {
        let tc = TrainConfig {
            epochs: cfg.warmup_epochs + d,
            lambda: d + 1,
            ema_decay: None,
            ..cfg.train_config(2)
        };
        let bs = dart_branches(init.clone(), &refs, &tc)?;
        Ok(loss_barrier(&bs[0], &bs[1], &loss, 21)?.barrier_excess)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let total = cfg.warmup_epochs + sorted.last().unwrap();
    let independent = exec::map_range(2, |k| -> Result<Vec<f64>> {
        let mut m = MlpModel::init(task.dim(), cfg.hidden, policy.seed(&format!("independent:{k}")))?;
        erm_train(
            &mut m,
            &task.train,
            1..=total,
            &|e| cosine_lr(e, total, cfg.lr_max),
            &cfg.sgd(),
            branch_seed(cfg.master_seed, k),
            None,
            None,
        )?;
        Ok(m.params)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let independent = loss_barrier(&independent[0], &independent[1], &loss, 21)?.barrier_excess;
    Ok(BarrierStudy {
        divergence_epochs: sorted,
        shared,
        independent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task(seed: u64) -> SyntheticTask {
        make_task(
            &TaskConfig {
                n_train: 64,
                n_test: 200,
                ..TaskConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn task_is_deterministic_and_validated() {
        assert_eq!(small_task(3), small_task(3));
        assert_ne!(small_task(3).train, small_task(4).train);
        assert!(make_task(&TaskConfig { n_train: 0, ..TaskConfig::default() }, 1).is_err());
        assert!(make_task(&TaskConfig { spurious_rate_train: 0.4, ..TaskConfig::default() }, 1).is_err());
    }

    #[test]
    fn spurious_at_half_carries_no_label_information() {
        let t = make_task(
            &TaskConfig {
                spurious_rate_train: 0.5,
                n_train: 20000,
                n_test: 10,
                ..TaskConfig::default()
            },
            7,
        )
        .unwrap();
        let sp = t.config.spurious_index();
        // plug-in mutual information of (sign of spurious coordinate, label)
        let mut counts = [[0f64; 2]; 2];
        for s in &t.train {
            counts[(s.x[sp] > 0.0) as usize][(s.y > 0) as usize] += 1.0;
        }
        let n = t.train.len() as f64;
        let mut mi = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let pab = counts[a][b] / n;
                let pa = (counts[a][0] + counts[a][1]) / n;
                let pb = (counts[0][b] + counts[1][b]) / n;
                if pab > 0.0 {
                    mi += pab * (pab / (pa * pb)).ln();
                }
            }
        }
        assert!(mi < 1e-3, "mi={mi}");
    }

    #[test]
    fn robust_probe_is_accurate() {
        let t = make_task(&TaskConfig::default(), 1).unwrap();
        assert!(t.robust_probe_accuracy(&t.test) >= 0.95);
    }

    fn corr(kind: CorruptionKind, strength: f64) -> Corruption {
        Corruption {
            kind,
            start: 2,
            len: 6,
            strength,
            seed: 9,
        }
    }

    #[test]
    fn corruption_examples() {
        let t = small_task(2);
        let xs: Vec<Vec<f64>> = t.train.iter().map(|s| s.x.clone()).collect();
        for kind in [CorruptionKind::Mask, CorruptionKind::Jitter, CorruptionKind::Permute] {
            assert_eq!(corrupt(&xs, &corr(kind, 0.0)).unwrap(), xs);
        }
        let m = corr(CorruptionKind::Mask, 0.5);
        let once = corrupt(&xs, &m).unwrap();
        assert_eq!(corrupt(&once, &m).unwrap(), once);
        assert_ne!(once, xs);
        for (a, b) in once.iter().zip(&xs) {
            assert_eq!(a[..2], b[..2]);
            assert_eq!(a[8..], b[8..]);
            assert_eq!(a[2..8].iter().filter(|v| **v == 0.0).count(), 3);
        }
        let bad = Corruption { start: 40, ..m };
        assert!(corrupt(&xs, &bad).is_err());
        let labels: Vec<i8> = corrupt_samples(&t.train, &corr(CorruptionKind::Permute, 1.0))
            .unwrap()
            .iter()
            .map(|s| s.y)
            .collect();
        assert_eq!(labels, t.train.iter().map(|s| s.y).collect::<Vec<_>>());
    }

    #[test]
    fn jitter_variance_matches_strength() {
        let xs = vec![vec![0.0; 8]; 1250];
        let c = Corruption {
            kind: CorruptionKind::Jitter,
            start: 0,
            len: 8,
            strength: 0.7,
            seed: 4,
        };
        let out = corrupt(&xs, &c).unwrap();
        let vals: Vec<f64> = out.iter().flatten().copied().collect();
        assert_eq!(vals.len(), 10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var / 0.49 - 1.0).abs() < 0.05, "var={var}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let t = small_task(seed);
            let m = MlpModel::init(t.dim(), 5, seed).unwrap();
            let batch: Vec<&MlpSample> = t.train.iter().take(7).collect();
            let (_, g) = m.loss_and_grad(&batch).unwrap();
            let h = 1e-6;
            let mut rng = rng_from_seed(seed);
            for _ in 0..20 {
                let i = rng.random_range(0..m.params.len());
                let mut p = m.clone();
                p.params[i] += h;
                let lp = p.loss_and_grad(&batch).unwrap().0;
                p.params[i] -= 2.0 * h;
                let lm = p.loss_and_grad(&batch).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-8);
                assert!(err < 1e-4 || (fd - g[i]).abs() < 1e-9, "seed {seed} param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn evaluate_examples() {
        let t = small_task(5);
        assert!(evaluate(&MlpModel::init(t.dim(), 4, 1).unwrap(), &[], None).is_err());
        // a hidden unit copying the LDA direction, read out with weight 1
        let mut teacher = MlpModel {
            input: t.dim(),
            hidden: 2,
            params: vec![0.0; MlpModel::num_params_for(t.dim(), 2)],
        };
        for (j, s) in t.mean_signs.iter().enumerate() {
            teacher.params[j] = *s;
            teacher.params[t.dim() + j] = -*s;
        }
        let off = 2 * t.dim() + 2;
        teacher.params[off] = 1.0;
        teacher.params[off + 1] = -1.0;
        let relabeled: Vec<MlpSample> = t
            .test
            .iter()
            .map(|s| MlpSample {
                y: if teacher.logit(&s.x) >= 0.0 { 1 } else { -1 },
                x: s.x.clone(),
            })
            .collect();
        assert_eq!(evaluate(&teacher, &relabeled, None).unwrap(), 1.0);
        let spurious_mask = Corruption {
            kind: CorruptionKind::Mask,
            start: t.config.spurious_index(),
            len: 1,
            strength: 1.0,
            seed: 0,
        };
        assert!(evaluate(&teacher, &t.test, Some(&spurious_mask)).unwrap() > 0.6);

        let mut rng = rng_from_seed(77);
        let coin: Vec<MlpSample> = (0..2000)
            .map(|_| MlpSample {
                x: vec![1.0],
                y: if rng.random::<bool>() { 1 } else { -1 },
            })
            .collect();
        let zero = MlpModel {
            input: 1,
            hidden: 1,
            params: vec![0.0; 4],
        };
        let acc = evaluate(&zero, &coin, None).unwrap();
        assert!((acc - 0.5).abs() < 3.0 * (0.25f64 / 2000.0).sqrt());
    }

    fn quick_bench() -> BenchConfig {
        BenchConfig {
            hidden: 8,
            epochs: 6,
            warmup_epochs: 2,
            lambda: 2,
            batch_size: 16,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn single_corruption_arms_coincide() {
        let t = small_task(6);
        let c = default_corruptions(&t);
        let cfg = BenchConfig {
            identical_branches: 1,
            ..quick_bench()
        };
        let table = run_mt_vs_dart(&t, &c[..1], &cfg).unwrap();
        let p = |n: &str| table.arm(n).unwrap().params.clone();
        assert_eq!(p("expert:0"), p("mixed"));
        assert_eq!(p("expert:0"), p("dart:diverse"));
        assert_eq!(p("dart:identical"), p("erm:identical"));
        let csv = table.table().to_csv().unwrap();
        assert!(csv.starts_with("arm,clean,mask@0\n"));
    }

    #[test]
    fn single_branch_dart_matches_erm_for_mlp() {
        let t = small_task(8);
        let init = MlpModel::init(t.dim(), 6, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            warmup_epochs: 2,
            branches: 1,
            lambda: 100,
            lr_max: 0.1,
            batch_size: 10,
            master_seed: 4,
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_decay: Some(0.99),
            ..TrainConfig::default()
        };
        let (p, _) = dart_train(init.clone(), &[&t.train], &cfg, None).unwrap();
        let mut m = init;
        erm_train(
            &mut m,
            &t.train,
            1..=5,
            &|e| cosine_lr(e, 5, 0.1),
            &SgdOptions::from(&cfg),
            branch_seed(4, 0),
            Some(0.99),
            None,
        )
        .unwrap();
        assert_eq!(p, m.params);
    }
}
