//! Measurements: loss barriers, convergence times and power-law fits,
//! the multi-branch gradient-flow experiments, noise-variance reduction,
//! flatness and PCA trajectories.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::orchestrator::aggregate_uniform;
use crate::patchnet::{euler_step, init_model, stable_dt, LossMode, PatchModel, TrackedNoise};
use crate::patchworld::{
    apply_augmentation, make_feature_bank, resample_noise, restricted_rho_from, sample_dataset, union_augmented,
    FeatureBank, PatchDataset, PatchSample,
};
use crate::patchnet::AlignmentSnapshot;
use crate::seed::{rng_from_seed, RngPolicy};
use crate::table::{Cell, Table};

// ---------------------------------------------------------------- barrier

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierProfile {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
    pub max_loss: f64,
    pub barrier_excess: f64,
}

/// The point `α·A + (1−α)·B` for `α = i/(g−1)`. Each half of the grid is
/// computed from its nearer endpoint and the midpoint as `(A+B)/2`, so
/// endpoints are reproduced exactly, `A = B` gives `A` everywhere, and
/// swapping `A` and `B` mirrors the grid bit for bit.
fn interpolate(a: &[f64], b: &[f64], i: usize, g: usize) -> Vec<f64> {
    let last = g - 1;
    if 2 * i == last {
        return a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    }
    if 2 * i < last {
        let alpha = i as f64 / last as f64;
        b.iter().zip(a).map(|(y, x)| y + alpha * (x - y)).collect()
    } else {
        let beta = (last - i) as f64 / last as f64;
        a.iter().zip(b).map(|(x, y)| x + beta * (y - x)).collect()
    }
}

pub fn loss_barrier(
    a: &[f64],
    b: &[f64],
    eval_loss: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    grid_size: usize,
) -> Result<BarrierProfile> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("endpoints have {} and {} params", a.len(), b.len())));
    }
    if grid_size < 2 {
        return Err(Error::config("grid_size", "need at least 2 grid points"));
    }
    let losses = exec::map_range(grid_size, |i| eval_loss(&interpolate(a, b, i, grid_size)))
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let alphas = (0..grid_size).map(|i| i as f64 / (grid_size - 1) as f64).collect();
    let max_loss = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ends = losses[0].max(losses[grid_size - 1]);
    Ok(BarrierProfile {
        alphas,
        losses,
        max_loss,
        barrier_excess: max_loss - ends,
    })
}

// ------------------------------------------------------ convergence times

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    /// 1-based feature index.
    Feature(usize),
    Noise(u64),
}

/// First recorded time at which the target's alignment reaches `theta`,
/// or `+∞` if it never does.
pub fn convergence_time(snaps: &[AlignmentSnapshot], target: Target, theta: f64) -> Result<f64> {
    if snaps.is_empty() {
        return Err(Error::Undefined("convergence time of an empty series".into()));
    }
    for s in snaps {
        let v = match target {
            Target::Feature(k) => *s
                .alphas
                .get(k.wrapping_sub(1))
                .ok_or_else(|| Error::config("target", format!("no feature {k}")))?,
            Target::Noise(id) => s
                .noise_coeffs
                .iter()
                .find(|(i, _)| *i == id)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::config("target", format!("noise id {id} is not tracked")))?,
        };
        if v >= theta {
            return Ok(s.t);
        }
    }
    Ok(f64::INFINITY)
}

/// Crossing time of `theta` by linear interpolation between the last sample
/// below and the first at or above it.
pub fn interpolated_crossing(ts: &[f64], values: &[f64], theta: f64) -> f64 {
    for i in 0..values.len() {
        if values[i] >= theta {
            if i == 0 {
                return ts[0];
            }
            let (v0, v1) = (values[i - 1], values[i]);
            return ts[i - 1] + (ts[i] - ts[i - 1]) * (theta - v0) / (v1 - v0);
        }
    }
    f64::INFINITY
}

// ------------------------------------------------------------ statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `log t` on `log x`.
pub fn fit_scaling(xs: &[f64], ts: &[f64]) -> Result<ScalingFit> {
    if xs.len() != ts.len() {
        return Err(Error::Shape(format!("{} xs but {} ts", xs.len(), ts.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Domain("need at least 3 points to fit a power law".into()));
    }
    if xs.iter().chain(ts).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("power-law fit needs finite positive xs and ts".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let lt: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let mt = lt.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("xs are all equal".into()));
    }
    let sxt: f64 = lx.iter().zip(&lt).map(|(x, t)| (x - mx) * (t - mt)).sum();
    let slope = sxt / sxx;
    let intercept = mt - slope * mx;
    let stt: f64 = lt.iter().map(|t| (t - mt).powi(2)).sum();
    let sse: f64 = lx
        .iter()
        .zip(&lt)
        .map(|(x, t)| (t - intercept - slope * x).powi(2))
        .sum();
    let r2 = if stt <= f64::EPSILON * n { 1.0 } else { (1.0 - sse / stt).clamp(0.0, 1.0) };
    Ok(ScalingFit {
        xs: xs.to_vec(),
        ts: ts.to_vec(),
        slope,
        intercept,
        r2,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("spearman needs two equal-length series of length >= 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Undefined("spearman of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// One-sided sign test: `P(X ≥ wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ------------------------------------------------------ regime checks

/// Feature-learning hypothesis `σ^q/√d ≤ 1/(10K)`.
pub fn check_feature_regime(sigma: f64, q: f64, d: usize, k: usize) -> Result<()> {
    let lhs = sigma.powf(q) / (d as f64).sqrt();
    let rhs = 1.0 / (10.0 * k as f64);
    if lhs > rhs {
        return Err(Error::config(
            "sigma",
            format!("regime violated: sigma^q/sqrt(d) = {lhs:.4} exceeds 1/(10K) = {rhs:.4}"),
        ));
    }
    Ok(())
}

/// Noise-memorization hypothesis `d ≥ 10n²`.
pub fn check_noise_regime(n: usize, d: usize) -> Result<()> {
    if d < 10 * n * n {
        return Err(Error::config(
            "d",
            format!("regime violated: d = {d} is below 10*n^2 = {}", 10 * n * n),
        ));
    }
    Ok(())
}

// ---------------------------------------------------- multi-branch flow

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Stop once every feature alignment has crossed.
    Features,
    /// Stop once every tracked noise alignment has crossed.
    Noise,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFlowConfig {
    pub dt: Option<f64>,
    pub horizon: f64,
    pub loss_mode: LossMode,
    pub feature_theta: f64,
    /// Further feature thresholds tracked in the same run.
    pub extra_feature_thetas: Vec<f64>,
    pub noise_theta: f64,
    /// Replace all branches by their average at this time.
    pub aggregate_at: Option<f64>,
    pub stop: StopRule,
}

impl Default for BranchFlowConfig {
    fn default() -> Self {
        Self {
            dt: None,
            horizon: 1e4,
            loss_mode: LossMode::ExactLogistic,
            feature_theta: 0.5,
            extra_feature_thetas: Vec::new(),
            noise_theta: 0.5,
            aggregate_at: None,
            stop: StopRule::Features,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchFlowOutcome {
    pub dt: f64,
    pub t_end: f64,
    /// Crossing times of the averaged model, per feature.
    pub feature_times: Vec<f64>,
    /// Feature crossing times for each of `extra_feature_thetas`.
    pub extra_feature_times: Vec<Vec<f64>>,
    /// Crossing times of the averaged model, per tracked noise patch.
    pub noise_times: Vec<f64>,
    /// Averaged-model alignments at `t_end`.
    pub final_alphas: Vec<f64>,
    pub final_noise: Vec<f64>,
    pub branches: Vec<PatchModel>,
}

impl BranchFlowOutcome {
    pub fn all_features_time(&self) -> f64 {
        self.feature_times.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_noise_time(&self) -> f64 {
        mean(&self.noise_times)
    }
}

fn averaged(branches: &[PatchModel]) -> Result<PatchModel> {
    if branches.len() == 1 {
        return Ok(branches[0].clone());
    }
    let w = aggregate_uniform(&branches.iter().map(|b| b.w.clone()).collect::<Vec<_>>())?;
    Ok(PatchModel { w, ..branches[0].clone() })
}

fn feature_alignments(m: &PatchModel, bank: &FeatureBank) -> Vec<f64> {
    (1..=bank.k)
        .map(|l| {
            let j = bank.coordinate(l);
            (0..m.c).map(|c| m.w[c * m.d + j]).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn noise_alignments(m: &PatchModel, tracked: &[TrackedNoise]) -> Vec<f64> {
    tracked
        .iter()
        .map(|t| {
            let y = f64::from(t.label);
            (0..m.c)
                .map(|c| y * crate::patchnet::dot(m.row(c), &t.noise))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

struct Crossings {
    theta: f64,
    prev: Vec<f64>,
    times: Vec<f64>,
}

impl Crossings {
    fn new(theta: f64, first: Vec<f64>) -> Self {
        let times = first.iter().map(|&v| if v >= theta { 0.0 } else { f64::INFINITY }).collect();
        Self { theta, prev: first, times }
    }

    fn observe(&mut self, t: f64, dt: f64, cur: Vec<f64>) {
        for i in 0..cur.len() {
            if self.times[i].is_infinite() && cur[i] >= self.theta {
                let (v0, v1) = (self.prev[i], cur[i]);
                self.times[i] = t - dt + dt * (self.theta - v0) / (v1 - v0);
            }
        }
        self.prev = cur;
    }

    fn done(&self) -> bool {
        self.times.iter().all(|t| t.is_finite())
    }
}

/// Trains one model per branch dataset from the shared `init` by explicit
/// Euler and records threshold crossings of the branch-averaged model.
/// On divergence the step is halved and the run restarted, up to four times.
pub fn branch_flow(
    init: &PatchModel,
    datasets: &[PatchDataset],
    bank: &FeatureBank,
    tracked: &[TrackedNoise],
    cfg: &BranchFlowConfig,
) -> Result<BranchFlowOutcome> {
    if datasets.is_empty() || datasets.iter().any(PatchDataset::is_empty) {
        return Err(Error::Undefined("flow needs nonempty branch datasets".into()));
    }
    if !(cfg.horizon >= 0.0) {
        return Err(Error::config("flow.horizon", "must be >= 0"));
    }
    let mut dt = match cfg.dt {
        Some(dt) if dt > 0.0 => dt,
        Some(_) => return Err(Error::config("flow.dt", "must be > 0")),
        None => {
            let mut dt = 1.0f64;
            for ds in datasets {
                dt = dt.min(stable_dt(init, ds, cfg.loss_mode, 1.0)?);
            }
            dt
        }
    };
    let mut last = None;
    for _ in 0..5 {
        match branch_flow_fixed(init, datasets, bank, tracked, cfg, dt) {
            Err(e @ Error::Divergence { .. }) => {
                last = Some(e);
                dt *= 0.5;
            }
            other => return other,
        }
    }
    Err(last.unwrap())
}

fn branch_flow_fixed(
    init: &PatchModel,
    datasets: &[PatchDataset],
    bank: &FeatureBank,
    tracked: &[TrackedNoise],
    cfg: &BranchFlowConfig,
    dt: f64,
) -> Result<BranchFlowOutcome> {
    let refs: Vec<Vec<&PatchSample>> = datasets.iter().map(|d| d.samples.iter().collect()).collect();
    let mut branches = vec![init.clone(); datasets.len()];
    let steps = (cfg.horizon / dt).round() as usize;
    let agg_step = cfg.aggregate_at.map(|t| (t / dt).round() as usize);
    let avg0 = averaged(&branches)?;
    let mut feats = Crossings::new(cfg.feature_theta, feature_alignments(&avg0, bank));
    let mut extra: Vec<Crossings> = cfg
        .extra_feature_thetas
        .iter()
        .map(|&th| Crossings::new(th, feature_alignments(&avg0, bank)))
        .collect();
    let mut noise = Crossings::new(cfg.noise_theta, noise_alignments(&avg0, tracked));
    let mut t_end = 0.0;
    for step in 0..=steps {
        let finished = match cfg.stop {
            StopRule::Features => feats.done() && extra.iter().all(Crossings::done),
            StopRule::Noise => noise.done(),
            StopRule::Horizon => false,
        };
        if finished || step == steps {
            break;
        }
        if agg_step == Some(step) && branches.len() > 1 {
            let avg = averaged(&branches)?;
            branches.iter_mut().for_each(|b| b.w.copy_from_slice(&avg.w));
        }
        let results: Vec<Result<f64>> = {
            let mut out: Vec<Result<f64>> = Vec::with_capacity(branches.len());
            let mut slots: Vec<(&mut PatchModel, Option<Result<f64>>)> =
                branches.iter_mut().map(|b| (b, None)).collect();
            exec::for_each_mut(&mut slots, |i, (b, r)| {
                *r = Some(euler_step(b, &refs[i], dt, cfg.loss_mode));
            });
            out.extend(slots.into_iter().map(|(_, r)| r.unwrap()));
            out
        };
        for r in results {
            r?;
        }
        let t = (step + 1) as f64 * dt;
        if branches.iter().any(|b| !b.is_finite()) {
            return Err(Error::Divergence {
                last_stable_t: t - dt,
                msg: format!("non-finite weights with dt={dt}"),
            });
        }
        let avg = averaged(&branches)?;
        let alphas = feature_alignments(&avg, bank);
        for x in extra.iter_mut() {
            x.observe(t, dt, alphas.clone());
        }
        feats.observe(t, dt, alphas);
        if !tracked.is_empty() {
            noise.observe(t, dt, noise_alignments(&avg, tracked));
        }
        t_end = t;
    }
    let avg = averaged(&branches)?;
    Ok(BranchFlowOutcome {
        dt,
        t_end,
        feature_times: feats.times,
        extra_feature_times: extra.into_iter().map(|x| x.times).collect(),
        noise_times: noise.times,
        final_alphas: feature_alignments(&avg, bank),
        final_noise: noise_alignments(&avg, tracked),
        branches,
    })
}

/// Shift index realizing `T_s` for any `s ≥ 0` (`T_0 = T_K` = identity).
fn cyclic_shift(s: usize, k: usize) -> usize {
    let r = s % k;
    if r == 0 {
        k
    } else {
        r
    }
}

// ---------------------------------------------------------- experiments

fn validate_patch_common(q: f64, k: usize, d: usize, n: usize, channels: usize, seeds: usize) -> Result<()> {
    if !(q >= 3.0) {
        return Err(Error::config("q", "need q >= 3"));
    }
    if k == 0 || k > d {
        return Err(Error::config("k", "need 1 <= K <= d"));
    }
    if n == 0 || channels == 0 || seeds == 0 {
        return Err(Error::config("n", "n, channels and seeds must be >= 1"));
    }
    Ok(())
}

fn record(cfg: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Config {
    pub q: f64,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub sigma: f64,
    pub channels: usize,
    pub sigma0s: Vec<f64>,
    pub seeds: usize,
    pub master_seed: u64,
    pub theta_conv: f64,
    pub loss_mode: LossMode,
    pub dt: Option<f64>,
    pub horizon: f64,
}

impl Prop1Config {
    pub fn validate(&self) -> Result<()> {
        validate_patch_common(self.q, self.k, self.d, self.n, self.channels, self.seeds)?;
        check_feature_regime(self.sigma, self.q, self.d, self.k)?;
        if self.sigma0s.len() < 3 || self.sigma0s.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("prop1.sigma0s", "need at least 3 positive values"));
        }
        Ok(())
    }
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            q: 3.0,
            k: 4,
            d: 4096,
            n: 64,
            sigma: 1.0,
            channels: 16,
            sigma0s: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            seeds: 5,
            master_seed: 0,
            theta_conv: 0.5,
            loss_mode: LossMode::ExactLogistic,
            dt: None,
            horizon: 5000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Point {
    pub sigma0: f64,
    pub seed: usize,
    /// Time at which every feature of the averaged model has crossed.
    pub time: f64,
    pub feature_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub points: Vec<Prop1Point>,
    /// Fit on the per-σ0 mean times.
    pub fit: ScalingFit,
    /// Per-seed fits; `None` where a seed has a zero or infinite time.
    pub seed_fits: Vec<Option<ScalingFit>>,
    pub expected_slope: f64,
}

impl Prop1Report {
    pub fn pass(&self) -> bool {
        (self.fit.slope - self.expected_slope).abs() <= 0.3 && self.fit.r2 >= 0.9
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["sigma0", "seed", "time"]);
        for p in &self.points {
            t.push(vec![Cell::Float(p.sigma0), Cell::Int(p.seed as i64), Cell::Float(p.time)]);
        }
        t
    }

    pub fn summary(&self, cfg: &Prop1Config) -> serde_json::Value {
        serde_json::json!({
            "slope": self.fit.slope,
            "intercept": self.fit.intercept,
            "r2": self.fit.r2,
            "expected_slope": self.expected_slope,
            "seed_slopes": self.seed_fits.iter().map(|f| f.as_ref().map(|f| f.slope)).collect::<Vec<_>>(),
            "pass": self.pass(),
            "config": record(cfg),
        })
    }
}

/// Branch datasets `T_1(D), …, T_m(D)` on a shared base.
fn shifted_branches(base: &PatchDataset, shifts: impl Iterator<Item = usize>) -> Result<Vec<PatchDataset>> {
    shifts.map(|s| apply_augmentation(base, cyclic_shift(s, base.bank.k))).collect()
}

/// Feature convergence time of the `m = K` branch average versus σ0.
pub fn run_prop1(cfg: &Prop1Config) -> Result<Prop1Report> {
    Ok(run_prop1_thetas(cfg, &[cfg.theta_conv])?.remove(0))
}

/// [`run_prop1`] measured at several thresholds from the same flows;
/// report `i` uses `thetas[i]`.
pub fn run_prop1_thetas(cfg: &Prop1Config, thetas: &[f64]) -> Result<Vec<Prop1Report>> {
    cfg.validate()?;
    if thetas.is_empty() || thetas.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::config("prop1.theta_conv", "need positive thresholds"));
    }
    let bank = make_feature_bank(cfg.k, cfg.d)?;
    let rho = vec![1.0 / cfg.k as f64; cfg.k];
    let policy = RngPolicy::new(cfg.master_seed);
    let flow = BranchFlowConfig {
        dt: cfg.dt,
        horizon: cfg.horizon,
        loss_mode: cfg.loss_mode,
        feature_theta: thetas[0],
        extra_feature_thetas: thetas[1..].to_vec(),
        stop: StopRule::Features,
        ..BranchFlowConfig::default()
    };
    let jobs: Vec<(usize, usize)> = (0..cfg.seeds)
        .flat_map(|s| (0..cfg.sigma0s.len()).map(move |i| (s, i)))
        .collect();
    let per_job = exec::map(&jobs, |&(seed, i)| -> Result<Vec<Prop1Point>> {
        let p = policy.child(&format!("seed:{seed}"));
        let base = sample_dataset(&bank, cfg.n, &rho, cfg.sigma, p.seed("data"))?;
        let branches = shifted_branches(&base, 1..=cfg.k)?;
        let init = init_model(cfg.channels, cfg.d, cfg.q, cfg.sigma0s[i], p.seed("init"))?;
        let out = branch_flow(&init, &branches, &bank, &[], &flow)?;
        Ok(std::iter::once(out.feature_times)
            .chain(out.extra_feature_times)
            .map(|times| Prop1Point {
                sigma0: cfg.sigma0s[i],
                seed,
                time: times.iter().copied().fold(0.0, f64::max),
                feature_times: times,
            })
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    (0..thetas.len())
        .map(|j| {
            let points: Vec<Prop1Point> = per_job.iter().map(|v| v[j].clone()).collect();
            prop1_report(cfg, points)
        })
        .collect()
}

fn prop1_report(cfg: &Prop1Config, points: Vec<Prop1Point>) -> Result<Prop1Report> {
    let means: Vec<f64> = (0..cfg.sigma0s.len())
        .map(|i| mean(&points.iter().filter(|p| p.sigma0 == cfg.sigma0s[i]).map(|p| p.time).collect::<Vec<_>>()))
        .collect();
    let fit = fit_scaling(&cfg.sigma0s, &means)?;
    let seed_fits = (0..cfg.seeds)
        .map(|s| {
            let ts: Vec<f64> = points.iter().filter(|p| p.seed == s).map(|p| p.time).collect();
            fit_scaling(&cfg.sigma0s, &ts).ok()
        })
        .collect();
    Ok(Prop1Report {
        points,
        fit,
        seed_fits,
        expected_slope: -(cfg.q - 2.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryConfig {
    pub q: f64,
    pub rho: Vec<f64>,
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub sigma: f64,
    pub channels: usize,
    pub sigma0: f64,
    pub seeds: usize,
    pub master_seed: u64,
    pub theta_conv: f64,
    pub loss_mode: LossMode,
    pub dt: Option<f64>,
    pub horizon: f64,
}

impl CorollaryConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.rho.len();
        validate_patch_common(self.q, k, self.d, self.n, self.channels, self.seeds)?;
        check_feature_regime(self.sigma, self.q, self.d, k)?;
        if self.m == 0 || self.m > k {
            return Err(Error::config("corollary.m", format!("need 1 <= m <= K={k}")));
        }
        Ok(())
    }
}

impl Default for CorollaryConfig {
    fn default() -> Self {
        Self {
            q: 3.0,
            rho: vec![0.6, 0.25, 0.1, 0.05],
            m: 2,
            d: 4096,
            n: 64,
            sigma: 1.0,
            channels: 8,
            sigma0: 0.05,
            seeds: 5,
            master_seed: 0,
            theta_conv: 0.5,
            loss_mode: LossMode::ExactLogistic,
            dt: None,
            horizon: 2000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollarySeed {
    pub seed: usize,
    pub times: Vec<f64>,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    /// `m·ρ′_k/ρ_k` per feature.
    pub predictor: Vec<f64>,
    pub seeds: Vec<CorollarySeed>,
}

impl CorollaryReport {
    pub fn min_spearman(&self) -> f64 {
        self.seeds.iter().map(|s| s.spearman).fold(f64::INFINITY, f64::min)
    }

    pub fn pass(&self) -> bool {
        self.min_spearman() >= 0.8
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["seed", "feature", "time", "predictor"]);
        for s in &self.seeds {
            for (k, time) in s.times.iter().enumerate() {
                t.push(vec![
                    Cell::Int(s.seed as i64),
                    Cell::Int(k as i64 + 1),
                    Cell::Float(*time),
                    Cell::Float(self.predictor[k]),
                ]);
            }
        }
        t
    }

    pub fn summary(&self, cfg: &CorollaryConfig) -> serde_json::Value {
        serde_json::json!({
            "predictor": self.predictor,
            "spearman": self.seeds.iter().map(|s| s.spearman).collect::<Vec<_>>(),
            "min_spearman": self.min_spearman(),
            "pass": self.pass(),
            "config": record(cfg),
        })
    }
}

/// Per-feature convergence times of the average of `m` branches, branch
/// `j ∈ 1..=m` trained on `T_{K−j}(D)` so that it sees feature `k` at the
/// frequency `ρ_{k+j}`; the average then learns feature `k` at a rate set
/// by the window `k+1, …, k+m`.
pub fn run_corollary(cfg: &CorollaryConfig) -> Result<CorollaryReport> {
    cfg.validate()?;
    let k = cfg.rho.len();
    let bank = make_feature_bank(k, cfg.d)?;
    let predictor = (1..=k)
        .map(|f| Ok(cfg.m as f64 * restricted_rho_from(&cfg.rho, f, cfg.m)? / cfg.rho[f - 1]))
        .collect::<Result<Vec<f64>>>()?;
    let policy = RngPolicy::new(cfg.master_seed);
    let flow = BranchFlowConfig {
        dt: cfg.dt,
        horizon: cfg.horizon,
        loss_mode: cfg.loss_mode,
        feature_theta: cfg.theta_conv,
        stop: StopRule::Features,
        ..BranchFlowConfig::default()
    };
    let seeds: Vec<usize> = (0..cfg.seeds).collect();
    let out = exec::map(&seeds, |&seed| -> Result<CorollarySeed> {
        let p = policy.child(&format!("seed:{seed}"));
        let base = sample_dataset(&bank, cfg.n, &cfg.rho, cfg.sigma, p.seed("data"))?;
        let branches = shifted_branches(&base, (1..=cfg.m).map(|j| k - j % k))?;
        let init = init_model(cfg.channels, cfg.d, cfg.q, cfg.sigma0, p.seed("init"))?;
        let res = branch_flow(&init, &branches, &bank, &[], &flow)?;
        let spearman = spearman(&res.feature_times, &predictor)?;
        Ok(CorollarySeed {
            seed,
            times: res.feature_times,
            spearman,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CorollaryReport { predictor, seeds: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFlowConfig {
    pub q: f64,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub sigma: f64,
    pub channels: usize,
    pub sigma0: f64,
    pub seeds: usize,
    pub master_seed: u64,
    /// Feature threshold (used for the default aggregation time).
    pub theta_conv: f64,
    /// Noise-alignment threshold.
    pub noise_theta: f64,
    /// Number of branch-0 samples whose noise is tracked.
    pub tracked: usize,
    /// Fresh noise per branch (`false`: all branches share branch 0's).
    pub resample_noise: bool,
    pub loss_mode: LossMode,
    pub dt: Option<f64>,
    pub horizon: f64,
}

impl Default for NoiseFlowConfig {
    fn default() -> Self {
        Self {
            q: 3.0,
            k: 2,
            d: 4096,
            n: 16,
            sigma: 1.0,
            channels: 8,
            sigma0: 0.3,
            seeds: 5,
            master_seed: 0,
            theta_conv: 0.5,
            noise_theta: 4.0,
            tracked: 4,
            resample_noise: true,
            loss_mode: LossMode::HalfApproximation,
            dt: Some(0.5),
            horizon: 1e5,
        }
    }
}

impl NoiseFlowConfig {
    pub fn validate(&self) -> Result<()> {
        validate_patch_common(self.q, self.k, self.d, self.n, self.channels, self.seeds)?;
        check_feature_regime(self.sigma, self.q, self.d, self.k)?;
        check_noise_regime(self.n, self.d)?;
        if self.tracked == 0 || self.tracked > self.n {
            return Err(Error::config("noise.tracked", "need 1 <= tracked <= n"));
        }
        Ok(())
    }

    fn flow(&self, stop: StopRule, aggregate_at: Option<f64>) -> BranchFlowConfig {
        BranchFlowConfig {
            dt: self.dt,
            horizon: self.horizon,
            loss_mode: self.loss_mode,
            feature_theta: self.theta_conv,
            extra_feature_thetas: Vec::new(),
            noise_theta: self.noise_theta,
            aggregate_at,
            stop,
        }
    }

    /// Shared init, branch datasets and tracked noise for one seed.
    fn instance(
        &self,
        bank: &FeatureBank,
        m: usize,
        seed: usize,
    ) -> Result<(PatchModel, Vec<PatchDataset>, Vec<TrackedNoise>)> {
        let p = RngPolicy::new(self.master_seed).child(&format!("seed:{seed}"));
        let rho = vec![1.0 / self.k as f64; self.k];
        let base = sample_dataset(bank, self.n, &rho, self.sigma, p.seed("data"))?;
        let branches = (0..m)
            .map(|j| {
                let src = if j > 0 && self.resample_noise {
                    resample_noise(&base, p.seed(&format!("branch-noise:{j}")))
                } else {
                    base.clone()
                };
                apply_augmentation(&src, cyclic_shift(j, self.k))
            })
            .collect::<Result<Vec<_>>>()?;
        // Measured on the part of each noise patch orthogonal to the feature
        // span; the raw projection picks up feature growth through v·ε.
        let tracked = base.samples[..self.tracked]
            .iter()
            .map(|s| {
                let mut noise = s.noise.to_vec();
                for l in 1..=bank.k {
                    noise[bank.coordinate(l)] = 0.0;
                }
                TrackedNoise {
                    noise: noise.into(),
                    ..TrackedNoise::from(s)
                }
            })
            .collect();
        let init = init_model(self.channels, self.d, self.q, self.sigma0, p.seed("init"))?;
        Ok((init, branches, tracked))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Point {
    pub m: usize,
    pub seed: usize,
    /// Mean crossing time over the tracked noise patches.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub points: Vec<Prop2Point>,
    /// Fit on the per-m mean times.
    pub fit: ScalingFit,
    pub resample_noise: bool,
}

impl Prop2Report {
    pub fn pass(&self) -> bool {
        if self.resample_noise {
            (self.fit.slope - 1.0).abs() <= 0.2
        } else {
            self.fit.slope < 0.3
        }
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["m", "seed", "time"]);
        for p in &self.points {
            t.push(vec![Cell::Int(p.m as i64), Cell::Int(p.seed as i64), Cell::Float(p.time)]);
        }
        t
    }

    pub fn summary(&self, cfg: &NoiseFlowConfig, ms: &[usize]) -> serde_json::Value {
        serde_json::json!({
            "ms": ms,
            "slope": self.fit.slope,
            "intercept": self.fit.intercept,
            "r2": self.fit.r2,
            "mean_times": self.fit.ts,
            "resample_noise": self.resample_noise,
            "pass": self.pass(),
            "config": record(cfg),
        })
    }
}

/// Noise convergence time of the end-averaged model versus branch count.
pub fn run_prop2(cfg: &NoiseFlowConfig, ms: &[usize]) -> Result<Prop2Report> {
    cfg.validate()?;
    if ms.len() < 3 || ms.contains(&0) {
        return Err(Error::config("prop2.ms", "need at least 3 branch counts >= 1"));
    }
    let bank = make_feature_bank(cfg.k, cfg.d)?;
    let flow = cfg.flow(StopRule::Noise, None);
    let jobs: Vec<(usize, usize)> = (0..cfg.seeds).flat_map(|s| ms.iter().map(move |&m| (s, m))).collect();
    let points = exec::map(&jobs, |&(seed, m)| -> Result<Prop2Point> {
        let (init, branches, tracked) = cfg.instance(&bank, m, seed)?;
        let out = branch_flow(&init, &branches, &bank, &tracked, &flow)?;
        Ok(Prop2Point {
            m,
            seed,
            time: out.mean_noise_time(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
    let means: Vec<f64> = ms
        .iter()
        .map(|&m| mean(&points.iter().filter(|p| p.m == m).map(|p| p.time).collect::<Vec<_>>()))
        .collect();
    let fit = fit_scaling(&xs, &means)?;
    Ok(Prop2Report {
        points,
        fit,
        resample_noise: cfg.resample_noise,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop3Pair {
    pub seed: usize,
    pub t_aggregate: f64,
    pub time_end_only: f64,
    pub time_with_aggregation: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop3Report {
    pub pairs: Vec<Prop3Pair>,
    pub wins: usize,
    pub p_value: f64,
}

impl Prop3Report {
    pub fn pass(&self) -> bool {
        self.wins * 10 >= self.pairs.len() * 9 && self.p_value < 0.05
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["seed", "t_aggregate", "time_end_only", "time_with_aggregation", "ratio"]);
        for p in &self.pairs {
            t.push(vec![
                Cell::Int(p.seed as i64),
                Cell::Float(p.t_aggregate),
                Cell::Float(p.time_end_only),
                Cell::Float(p.time_with_aggregation),
                Cell::Float(p.ratio),
            ]);
        }
        t
    }

    pub fn summary(&self, cfg: &NoiseFlowConfig, m: usize) -> serde_json::Value {
        serde_json::json!({
            "m": m,
            "wins": self.wins,
            "pairs": self.pairs.len(),
            "p_value": self.p_value,
            "ratios": self.pairs.iter().map(|p| p.ratio).collect::<Vec<_>>(),
            "pass": self.pass(),
            "config": record(cfg),
        })
    }
}

/// Paired runs with and without an intermediate aggregation at `T`.
/// `aggregate_at = None` picks `T` as 1.1× the time at which all features
/// of the averaged model have crossed `theta_conv`.
pub fn run_prop3(cfg: &NoiseFlowConfig, m: usize, aggregate_at: Option<f64>) -> Result<Prop3Report> {
    cfg.validate()?;
    if m == 0 {
        return Err(Error::config("prop3.m", "need m >= 1"));
    }
    let bank = make_feature_bank(cfg.k, cfg.d)?;
    let seeds: Vec<usize> = (0..cfg.seeds).collect();
    let pairs = exec::map(&seeds, |&seed| -> Result<Prop3Pair> {
        let (init, branches, tracked) = cfg.instance(&bank, m, seed)?;
        let plain = branch_flow(&init, &branches, &bank, &tracked, &cfg.flow(StopRule::Noise, None))?;
        let t_end_only = plain.mean_noise_time();
        let first_noise = plain.noise_times.iter().copied().fold(f64::INFINITY, f64::min);
        let t_agg = match aggregate_at {
            Some(t) => t,
            None => 1.1 * plain.all_features_time(),
        };
        if !(t_agg >= 0.0) || t_agg >= first_noise {
            return Err(Error::config(
                "prop3.aggregate_at",
                format!("T={t_agg} is outside the feasible window [0, {first_noise})"),
            ));
        }
        let agg = branch_flow(&init, &branches, &bank, &tracked, &cfg.flow(StopRule::Noise, Some(t_agg)))?;
        let t_with = agg.mean_noise_time();
        Ok(Prop3Pair {
            seed,
            t_aggregate: t_agg,
            time_end_only: t_end_only,
            time_with_aggregation: t_with,
            ratio: t_with / t_end_only,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let wins = pairs.iter().filter(|p| p.ratio > 1.0).count();
    let p_value = sign_test_p(wins, pairs.len());
    Ok(Prop3Report { pairs, wins, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub q: f64,
    pub rho: Vec<f64>,
    pub d: usize,
    pub n: usize,
    pub sigma: f64,
    pub channels: usize,
    pub sigma0: f64,
    pub seeds: usize,
    pub master_seed: u64,
    pub theta_conv: f64,
    pub loss_mode: LossMode,
    pub dt: Option<f64>,
    pub horizon: f64,
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.rho.len();
        validate_patch_common(self.q, k, self.d, self.n, self.channels, self.seeds)?;
        check_feature_regime(self.sigma, self.q, self.d, k)
    }
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            q: 3.0,
            rho: vec![0.6, 0.25, 0.1, 0.05],
            d: 4096,
            n: 64,
            sigma: 1.0,
            channels: 16,
            sigma0: 0.05,
            seeds: 5,
            master_seed: 0,
            theta_conv: 0.5,
            loss_mode: LossMode::ExactLogistic,
            dt: None,
            horizon: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSeed {
    pub seed: usize,
    /// Per-feature crossing times under the full union `D ∪ T_1(D) ∪ …`.
    pub union_times: Vec<f64>,
    /// Time the union needed to converge every feature, capped at the horizon.
    pub budget: f64,
    /// Per-feature alignments without augmentation at `budget`.
    pub plain_alphas: Vec<f64>,
    /// Rarest over commonest feature alignment without augmentation.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub seeds: Vec<BalanceSeed>,
    pub horizon: f64,
}

impl BalanceReport {
    pub fn pass(&self) -> bool {
        self.seeds
            .iter()
            .all(|s| s.union_times.iter().all(|t| t.is_finite()) && s.ratio < 0.5)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["seed", "feature", "union_time", "plain_alpha"]);
        for s in &self.seeds {
            for k in 0..s.union_times.len() {
                t.push(vec![
                    Cell::Int(s.seed as i64),
                    Cell::Int(k as i64 + 1),
                    Cell::Float(s.union_times[k]),
                    Cell::Float(s.plain_alphas[k]),
                ]);
            }
        }
        t
    }
}

/// Single-model flows with and without the `m = K` union on skewed data.
/// The union runs until every feature converges (at most `horizon`); the
/// plain run gets that same time budget.
pub fn run_balance(cfg: &BalanceConfig) -> Result<BalanceReport> {
    cfg.validate()?;
    let k = cfg.rho.len();
    let bank = make_feature_bank(k, cfg.d)?;
    let policy = RngPolicy::new(cfg.master_seed);
    let flow = BranchFlowConfig {
        dt: cfg.dt,
        horizon: cfg.horizon,
        loss_mode: cfg.loss_mode,
        feature_theta: cfg.theta_conv,
        stop: StopRule::Features,
        ..BranchFlowConfig::default()
    };
    let commonest = (0..k).max_by(|&a, &b| cfg.rho[a].total_cmp(&cfg.rho[b]).then(b.cmp(&a))).unwrap();
    let rarest = (0..k).min_by(|&a, &b| cfg.rho[a].total_cmp(&cfg.rho[b]).then(b.cmp(&a))).unwrap();
    let seeds: Vec<usize> = (0..cfg.seeds).collect();
    let out = exec::map(&seeds, |&seed| -> Result<BalanceSeed> {
        let p = policy.child(&format!("seed:{seed}"));
        let base = sample_dataset(&bank, cfg.n, &cfg.rho, cfg.sigma, p.seed("data"))?;
        let union = union_augmented(&base, k)?;
        let init = init_model(cfg.channels, cfg.d, cfg.q, cfg.sigma0, p.seed("init"))?;
        let u = branch_flow(&init, &[union], &bank, &[], &flow)?;
        let budget = u.all_features_time().min(cfg.horizon);
        let plain_flow = BranchFlowConfig {
            horizon: budget,
            stop: StopRule::Horizon,
            ..flow.clone()
        };
        let plain = branch_flow(&init, &[base], &bank, &[], &plain_flow)?;
        let ratio = plain.final_alphas[rarest] / plain.final_alphas[commonest];
        Ok(BalanceSeed {
            seed,
            union_times: u.feature_times,
            budget,
            plain_alphas: plain.final_alphas,
            ratio,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(BalanceReport {
        seeds: out,
        horizon: cfg.horizon,
    })
}

// ------------------------------------------------ noise-variance reduction

/// Unit-normalized noise-aligned components `y_j·w_c·ε_j/‖ε_j‖`.
fn noise_components(m: &PatchModel, tracked: &[TrackedNoise]) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.c * tracked.len());
    for t in tracked {
        let norm = t.noise.iter().map(|x| x * x).sum::<f64>().sqrt();
        let y = f64::from(t.label);
        for c in 0..m.c {
            let dot: f64 = m.row(c).iter().zip(t.noise.iter()).map(|(a, b)| a * b).sum();
            out.push(if norm > 0.0 { y * dot / norm } else { 0.0 });
        }
    }
    out
}

fn variance(v: &[f64]) -> f64 {
    let mu = mean(v);
    v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64
}

/// Variance of the averaged model's noise-aligned components divided by
/// the mean variance of the branches'.
pub fn noise_variance_reduction(branches: &[PatchModel], tracked: &[TrackedNoise]) -> Result<f64> {
    if branches.len() < 2 {
        return Err(Error::Undefined("variance reduction needs at least 2 branches".into()));
    }
    if tracked.is_empty() || branches[0].c * tracked.len() < 2 {
        return Err(Error::Undefined("need at least 2 noise-aligned components".into()));
    }
    let avg = averaged(branches)?;
    let branch_var = mean(
        &branches
            .iter()
            .map(|b| variance(&noise_components(b, tracked)))
            .collect::<Vec<_>>(),
    );
    if branch_var == 0.0 {
        return Err(Error::Undefined("branches carry no noise-aligned variance".into()));
    }
    Ok(variance(&noise_components(&avg, tracked)) / branch_var)
}

// -------------------------------------------------------------- flatness

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub worst_case: f64,
    pub average: f64,
    pub train_loss: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn project_ball(delta: &mut [f64], radius: f64) {
    let n = norm(delta);
    if n > radius {
        let s = radius / n;
        delta.iter_mut().for_each(|x| *x *= s);
    }
}

/// Largest loss found within the ℓ2 ball of `radius` around `params` by
/// `probes` random starts on the sphere, each followed by `ascent_steps`
/// normalized gradient-ascent steps projected back into the ball. The
/// unperturbed loss is included, so the result is a lower bound on the
/// true worst case that never falls below the train loss.
pub fn worst_case_flatness(
    params: &[f64],
    loss_and_grad: &(dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync),
    radius: f64,
    probes: usize,
    ascent_steps: usize,
    seed: u64,
) -> Result<f64> {
    if !(radius >= 0.0) {
        return Err(Error::config("radius", "must be >= 0"));
    }
    let base = loss_and_grad(params)?.0;
    if radius == 0.0 {
        return Ok(base);
    }
    let step = 2.0 * radius / ascent_steps.max(1) as f64;
    let results = exec::map_range(probes, |i| -> Result<f64> {
        let mut rng = rng_from_seed(crate::seed::derive_seed(seed, &format!("probe:{i}")));
        let mut delta: Vec<f64> = (0..params.len()).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&delta);
        delta.iter_mut().for_each(|x| *x *= radius / n);
        let eval = |delta: &[f64]| {
            let p: Vec<f64> = params.iter().zip(delta).map(|(a, b)| a + b).collect();
            loss_and_grad(&p)
        };
        let (mut best, mut g) = eval(&delta)?;
        for _ in 0..ascent_steps {
            let gn = norm(&g);
            if gn == 0.0 {
                break;
            }
            for (d, gi) in delta.iter_mut().zip(&g) {
                *d += step * gi / gn;
            }
            project_ball(&mut delta, radius);
            let (l, g2) = eval(&delta)?;
            best = best.max(l);
            g = g2;
        }
        Ok(best)
    });
    let mut best = base;
    for r in results {
        best = best.max(r?);
    }
    Ok(best)
}

/// Mean loss under Gaussian weight noise of std `noise_std`, each draw
/// clipped to the ℓ2 ball of `radius`.
pub fn average_flatness(
    params: &[f64],
    eval_loss: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    noise_std: f64,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::config("samples", "need at least one sample"));
    }
    if noise_std == 0.0 || radius == 0.0 {
        return eval_loss(params);
    }
    let losses = exec::map_range(samples, |i| -> Result<f64> {
        let mut rng = rng_from_seed(crate::seed::derive_seed(seed, &format!("sample:{i}")));
        let mut delta: Vec<f64> = (0..params.len())
            .map(|_| noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        project_ball(&mut delta, radius);
        let p: Vec<f64> = params.iter().zip(&delta).map(|(a, b)| a + b).collect();
        eval_loss(&p)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples as f64)
}

// ------------------------------------------------------------------- PCA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProjection {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    /// All eigenvalues of the centered Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
}

impl TrajectoryProjection {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["id", "x", "y", "explained_var1", "explained_var2"]);
        for (id, c) in self.ids.iter().zip(&self.coords) {
            t.push(vec![
                Cell::Text(id.clone()),
                Cell::Float(c[0]),
                Cell::Float(c[1]),
                Cell::Float(self.explained[0]),
                Cell::Float(self.explained[1]),
            ]);
        }
        t
    }

    /// Squared reconstruction error left after the top two components.
    pub fn residual(&self) -> f64 {
        self.eigenvalues.iter().skip(2).map(|l| l.max(0.0)).sum()
    }
}

/// PCA of mean-centered flattened checkpoints via the `N × N` Gram matrix.
/// Each component's sign is fixed so its largest-magnitude coordinate is
/// positive.
pub fn pca_trajectory(checkpoints: &[(String, Vec<f64>)]) -> Result<TrajectoryProjection> {
    let n = checkpoints.len();
    if n < 3 {
        return Err(Error::Undefined("PCA trajectory needs at least 3 checkpoints".into()));
    }
    let p = checkpoints[0].1.len();
    if checkpoints.iter().any(|c| c.1.len() != p) {
        return Err(Error::Shape("checkpoints differ in length".into()));
    }
    let mut mu = vec![0.0; p];
    for (_, c) in checkpoints {
        for (m, x) in mu.iter_mut().zip(c) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|(_, c)| c.iter().zip(&mu).map(|(x, m)| x - m).collect())
        .collect();
    let gram = DMatrix::from_fn(n, n, |i, j| centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>());
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    let ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    order.sort_by(|&a, &b| ev[b].total_cmp(&ev[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| ev[i]).collect();
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let mut coords = vec![[0.0; 2]; n];
    let mut explained = [0.0; 2];
    for k in 0..2 {
        let lam = eigenvalues[k].max(0.0);
        let col = eig.eigenvectors.column(order[k]);
        let pivot = (0..n).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap();
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][k] = sign * col[i] * lam.sqrt();
        }
        explained[k] = if total > 0.0 { lam / total } else { 0.0 };
    }
    Ok(TrajectoryProjection {
        ids: checkpoints.iter().map(|c| c.0.clone()).collect(),
        coords,
        explained,
        eigenvalues,
    })
}

/// Unit-normal test vector helper shared by the Monte-Carlo checks.
pub fn gaussian_vector(len: usize, std: f64, rng: &mut crate::seed::Rng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}
