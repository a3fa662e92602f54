//! Single-layer patch network `F(w, x) = Σ_c Σ_p φ(w_c · x_p)` with the
//! piecewise activation
//!
//! ```text
//! φ(z) = sign(z)·|z|^q / q        |z| ≤ 1
//! φ(z) = z − (q−1)/q              z ≥ 1
//! φ(z) = z + (q−1)/q              z ≤ −1
//! ```
//!
//! trained by full-batch logistic-loss gradient flow, integrated with
//! explicit Euler steps.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::orchestrator::Trainable;
use crate::patchworld::{FeatureBank, PatchDataset, PatchSample};
use crate::seed::rng_from_seed;

/// Returns `(φ(z), φ'(z))`.
#[inline]
pub fn activation(z: f64, q: f64) -> (f64, f64) {
    let a = z.abs();
    if a <= 1.0 {
        (z.signum() * a.powf(q) / q, a.powf(q - 1.0))
    } else {
        (z - z.signum() * (q - 1.0) / q, 1.0)
    }
}

#[inline]
fn activation_value(z: f64, q: f64) -> f64 {
    let a = z.abs();
    if a <= 1.0 {
        if z == 0.0 {
            0.0
        } else {
            z.signum() * a.powf(q) / q
        }
    } else {
        z - z.signum() * (q - 1.0) / q
    }
}

#[inline]
fn activation_slope(z: f64, q: f64) -> f64 {
    let a = z.abs();
    if a <= 1.0 {
        a.powf(q - 1.0)
    } else {
        1.0
    }
}

/// `log(1 + exp(−m))` without overflow.
#[inline]
pub fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// `−ℓ'(m) = 1 / (1 + exp(m))` for the logistic loss of margin `m`.
#[inline]
pub fn logistic_weight(m: f64) -> f64 {
    if m > 0.0 {
        let e = (-m).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + m.exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Exact logistic gradients.
    #[default]
    ExactLogistic,
    /// Replaces `−L'` by `1/2` for every sample.
    HalfApproximation,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-logistic" | "exact" => Ok(LossMode::ExactLogistic),
            "half-approximation" | "half" => Ok(LossMode::HalfApproximation),
            other => Err(Error::config(
                "loss_mode",
                format!("expected exact-logistic|half-approximation, got `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::ExactLogistic => "exact-logistic",
            LossMode::HalfApproximation => "half-approximation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchModel {
    pub c: usize,
    pub d: usize,
    pub q: f64,
    pub sigma0: f64,
    /// Row-major `C × d`; row `c` is `w_c`.
    pub w: Vec<f64>,
}

impl PatchModel {
    pub fn zeros(c: usize, d: usize, q: f64) -> Self {
        Self {
            c,
            d,
            q,
            sigma0: 0.0,
            w: vec![0.0; c * d],
        }
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        &self.w[c * self.d..(c + 1) * self.d]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.w[c * self.d..(c + 1) * self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|x| x.is_finite())
    }

    fn check_sample(&self, s: &PatchSample) -> Result<()> {
        if s.noise.len() != self.d || s.feature_index == 0 || s.feature_index > self.d {
            return Err(Error::Shape(format!(
                "sample (feature {}, noise dim {}) does not fit model dimension {}",
                s.feature_index,
                s.noise.len(),
                self.d
            )));
        }
        Ok(())
    }
}

pub fn init_model(c: usize, d: usize, q: f64, sigma0: f64, seed: u64) -> Result<PatchModel> {
    if c == 0 || d == 0 {
        return Err(Error::InvalidDimension(format!("need C >= 1 and d >= 1, got C={c}, d={d}")));
    }
    if !(q >= 3.0) {
        return Err(Error::config("q", format!("need q >= 3, got {q}")));
    }
    if !(sigma0 >= 0.0) || !sigma0.is_finite() {
        return Err(Error::config("sigma0", format!("need sigma0 >= 0, got {sigma0}")));
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    // draw unit normals then scale, so one seed gives the same direction at every sigma0
    let w = (0..c * d).map(|_| sigma0 * normal.sample(&mut rng)).collect();
    Ok(PatchModel { c, d, q, sigma0, w })
}

#[inline]
/// Eight independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0f64; 8];
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Logit `F(w, x) = Σ_c [φ(w_c·x1) + φ(w_c·x2)]`.
pub fn forward(model: &PatchModel, sample: &PatchSample) -> Result<f64> {
    model.check_sample(sample)?;
    let k = sample.feature_index - 1;
    let y = sample.y();
    Ok((0..model.c)
        .map(|c| {
            let row = model.row(c);
            activation_value(y * row[k], model.q) + activation_value(dot(row, &sample.noise), model.q)
        })
        .sum())
}

/// `w_c · ε_i` for every sample and channel (`n × C`, sample-major).
fn noise_projections(model: &PatchModel, samples: &[&PatchSample]) -> Vec<Vec<f64>> {
    exec::map(samples, |s| (0..model.c).map(|c| dot(model.row(c), &s.noise)).collect())
}

/// Samples per partial gradient. Fixed so the summation order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 16;

/// Loss and gradient over a batch of samples.
pub fn loss_and_gradient_batch(
    model: &PatchModel,
    samples: &[&PatchSample],
    mode: LossMode,
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Undefined("loss of an empty dataset".into()));
    }
    for s in samples {
        model.check_sample(s)?;
    }
    let n = samples.len() as f64;
    let q = model.q;
    let z2 = noise_projections(model, samples);
    let logits: Vec<f64> = samples
        .iter()
        .zip(&z2)
        .map(|(s, z)| {
            let k = s.feature_index - 1;
            let y = s.y();
            (0..model.c)
                .map(|c| activation_value(y * model.w[c * model.d + k], q) + activation_value(z[c], q))
                .sum()
        })
        .collect();
    let mut loss = 0.0;
    // coef_i = dℓ/dF_i / n = −y_i s_i / n
    let coef: Vec<f64> = samples
        .iter()
        .zip(&logits)
        .map(|(s, &f)| {
            let m = s.y() * f;
            loss += softplus_neg(m);
            let weight = match mode {
                LossMode::ExactLogistic => logistic_weight(m),
                LossMode::HalfApproximation => 0.5,
            };
            -s.y() * weight / n
        })
        .collect();
    let d = model.d;
    let partials = exec::map_range(samples.len().div_ceil(GRAD_CHUNK), |b| {
        let mut g = vec![0.0; model.c * d];
        let end = ((b + 1) * GRAD_CHUNK).min(samples.len());
        for i in b * GRAD_CHUNK..end {
            let s = samples[i];
            let k = s.feature_index - 1;
            let y = s.y();
            for c in 0..model.c {
                let gc = &mut g[c * d..(c + 1) * d];
                // x1 = y e_k, so dφ(w·x1)/dw = φ'(y w_k) y e_k
                gc[k] += coef[i] * activation_slope(y * model.w[c * d + k], q) * y;
                let a = coef[i] * activation_slope(z2[i][c], q);
                if a != 0.0 {
                    for (gj, ej) in gc.iter_mut().zip(s.noise.iter()) {
                        *gj += a * ej;
                    }
                }
            }
        }
        g
    });
    let mut parts = partials.into_iter();
    let mut g = parts.next().unwrap_or_default();
    for p in parts {
        for (a, b) in g.iter_mut().zip(&p) {
            *a += b;
        }
    }
    Ok((loss / n, g))
}

pub fn dataset_loss(model: &PatchModel, ds: &PatchDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Undefined("loss of an empty dataset".into()));
    }
    let mut total = 0.0;
    for s in &ds.samples {
        total += softplus_neg(s.y() * forward(model, s)?);
    }
    Ok(total / ds.n() as f64)
}

/// Gradient of [`dataset_loss`] (exact mode) or the half-approximation
/// dynamics, as a row-major `C × d` vector.
pub fn loss_gradient(model: &PatchModel, ds: &PatchDataset, mode: LossMode) -> Result<Vec<f64>> {
    let refs: Vec<&PatchSample> = ds.samples.iter().collect();
    Ok(loss_and_gradient_batch(model, &refs, mode)?.1)
}

impl Trainable for PatchModel {
    type Sample = PatchSample;

    fn params(&self) -> Vec<f64> {
        self.w.clone()
    }

    fn set_params(&mut self, params: &[f64]) {
        self.w.copy_from_slice(params);
    }

    fn num_params(&self) -> usize {
        self.w.len()
    }

    fn loss_and_grad(&self, batch: &[&PatchSample]) -> Result<(f64, Vec<f64>)> {
        loss_and_gradient_batch(self, batch, LossMode::ExactLogistic)
    }
}

/// A noise patch whose alignment is tracked over a flow.
#[derive(Debug, Clone)]
pub struct TrackedNoise {
    pub id: u64,
    pub label: i8,
    pub noise: Arc<[f64]>,
}

impl From<&PatchSample> for TrackedNoise {
    fn from(s: &PatchSample) -> Self {
        Self {
            id: s.noise_id,
            label: s.label,
            noise: s.noise.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSnapshot {
    pub t: f64,
    /// `α_l = max_c w_c · v_l`, one per feature.
    pub alphas: Vec<f64>,
    /// Channel attaining each `α_l` (lowest index on ties).
    pub alpha_channels: Vec<usize>,
    /// `(noise_id, max_c y·w_c·ε)` per tracked noise patch.
    pub noise_coeffs: Vec<(u64, f64)>,
    pub k_cut: usize,
    /// Fraction of `‖W‖²` outside the feature span.
    pub residual: f64,
}

pub fn measure_alignment(
    model: &PatchModel,
    bank: &FeatureBank,
    tracked: &[TrackedNoise],
    theta_conv: f64,
) -> AlignmentSnapshot {
    let mut alphas = Vec::with_capacity(bank.k);
    let mut alpha_channels = Vec::with_capacity(bank.k);
    for l in 1..=bank.k {
        let (ch, best) = argmax((0..model.c).map(|c| bank.project(model.row(c), l)));
        alphas.push(best);
        alpha_channels.push(ch);
    }
    let noise_coeffs = tracked
        .iter()
        .map(|t| {
            let y = f64::from(t.label);
            let (_, best) = argmax((0..model.c).map(|c| y * dot(model.row(c), &t.noise)));
            (t.id, best)
        })
        .collect();
    let total: f64 = model.w.iter().map(|x| x * x).sum();
    let feature_energy: f64 = (0..model.c)
        .flat_map(|c| (1..=bank.k).map(move |l| (c, l)))
        .map(|(c, l)| bank.project(model.row(c), l).powi(2))
        .sum();
    let residual = if total > 0.0 {
        ((total - feature_energy) / total).max(0.0)
    } else {
        0.0
    };
    AlignmentSnapshot {
        t: 0.0,
        k_cut: alphas.iter().filter(|&&a| a >= theta_conv).count(),
        alphas,
        alpha_channels,
        noise_coeffs,
        residual,
    }
}

/// First maximum (lowest index on ties).
fn argmax(it: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Euler step; `None` selects [`stable_dt`] at t=0.
    pub dt: Option<f64>,
    pub horizon: f64,
    pub record_every: f64,
    pub loss_mode: LossMode,
    pub theta_conv: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt: None,
            horizon: 100.0,
            record_every: 1.0,
            loss_mode: LossMode::ExactLogistic,
            theta_conv: 0.5,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(Error::config("flow.dt", "must be > 0"));
            }
            if self.horizon > 0.0 && self.horizon < dt {
                return Err(Error::config("flow.horizon", "must be 0 or >= dt"));
            }
        }
        if !(self.horizon >= 0.0) {
            return Err(Error::config("flow.horizon", "must be >= 0"));
        }
        if !(self.record_every > 0.0) {
            return Err(Error::config("flow.record_every", "must be > 0"));
        }
        Ok(())
    }
}

/// Step size giving `max |ΔW| ≤ 0.01·σ0` on the first Euler step.
/// Falls back to `fallback` when the gradient or σ0 vanishes.
pub fn stable_dt(model: &PatchModel, ds: &PatchDataset, mode: LossMode, fallback: f64) -> Result<f64> {
    let g = loss_gradient(model, ds, mode)?;
    let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if gmax == 0.0 || model.sigma0 == 0.0 {
        return Ok(fallback);
    }
    Ok((0.01 * model.sigma0 / gmax).min(fallback))
}

/// One explicit Euler step `W ← W − dt·∇L`.
pub fn euler_step(model: &mut PatchModel, samples: &[&PatchSample], dt: f64, mode: LossMode) -> Result<f64> {
    let (loss, g) = loss_and_gradient_batch(model, samples, mode)?;
    for (w, gi) in model.w.iter_mut().zip(&g) {
        *w -= dt * gi;
    }
    Ok(loss)
}

/// Integrates the gradient flow from `model` to `cfg.horizon`, recording an
/// alignment snapshot every `record_every` (rounded to whole steps), at t=0
/// and at the final time. On divergence the step is halved and the run
/// restarted, up to four times.
pub fn flow_integrate(
    model: &PatchModel,
    ds: &PatchDataset,
    cfg: &FlowConfig,
    bank: &FeatureBank,
    tracked: &[TrackedNoise],
) -> Result<Vec<AlignmentSnapshot>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Undefined("flow over an empty dataset".into()));
    }
    let mut dt = match cfg.dt {
        Some(dt) => dt,
        None => stable_dt(model, ds, cfg.loss_mode, cfg.record_every)?,
    };
    let mut last_err = None;
    for _ in 0..5 {
        match integrate_fixed(model, ds, cfg, bank, tracked, dt) {
            Ok(s) => return Ok(s),
            Err(e @ Error::Divergence { .. }) => {
                last_err = Some(e);
                dt *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

fn integrate_fixed(
    model: &PatchModel,
    ds: &PatchDataset,
    cfg: &FlowConfig,
    bank: &FeatureBank,
    tracked: &[TrackedNoise],
    dt: f64,
) -> Result<Vec<AlignmentSnapshot>> {
    let mut m = model.clone();
    let refs: Vec<&PatchSample> = ds.samples.iter().collect();
    let steps = if cfg.horizon == 0.0 {
        0
    } else {
        (cfg.horizon / dt).round().max(1.0) as usize
    };
    let stride = ((cfg.record_every / dt).round() as usize).max(1);
    let snap = |m: &PatchModel, step: usize| {
        let mut s = measure_alignment(m, bank, tracked, cfg.theta_conv);
        s.t = step as f64 * dt;
        s
    };
    let mut out = vec![snap(&m, 0)];
    for step in 1..=steps {
        euler_step(&mut m, &refs, dt, cfg.loss_mode)?;
        if !m.is_finite() {
            return Err(Error::Divergence {
                last_stable_t: (step - 1) as f64 * dt,
                msg: format!("non-finite weights with dt={dt}"),
            });
        }
        if step % stride == 0 || step == steps {
            out.push(snap(&m, step));
        }
    }
    Ok(out)
}

pub const PARAMS_MAGIC: &str = "dartlab-params v1";

/// Serializes `rows × cols` parameters in the `dartlab-params v1` text
/// format. `q` is written as-is (0 for models without an activation
/// exponent).
pub fn write_params(path: &Path, rows: usize, cols: usize, q: f64, data: &[f64]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} values for a {rows}x{cols} checkpoint",
            data.len()
        )));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(format_params(rows, cols, q, data).as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn format_params(rows: usize, cols: usize, q: f64, data: &[f64]) -> String {
    let mut s = String::with_capacity(data.len() * 24 + 64);
    s.push_str(PARAMS_MAGIC);
    s.push('\n');
    let _ = writeln!(s, "{rows} {cols} {q}");
    for r in 0..rows {
        for (j, v) in data[r * cols..(r + 1) * cols].iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{v:.16e}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamsFile {
    pub rows: usize,
    pub cols: usize,
    pub q: f64,
    pub data: Vec<f64>,
}

pub fn parse_params(text: &str) -> Result<ParamsFile> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PARAMS_MAGIC) {
        return Err(Error::Parse(format!("missing `{PARAMS_MAGIC}` header")));
    }
    let header = lines.next().ok_or_else(|| Error::Parse("missing shape line".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!("bad shape line `{header}`")));
    }
    let bad = |what: &str| Error::Parse(format!("bad {what} in `{header}`"));
    let rows: usize = parts[0].parse().map_err(|_| bad("row count"))?;
    let cols: usize = parts[1].parse().map_err(|_| bad("column count"))?;
    let q: f64 = parts[2].parse().map_err(|_| bad("q"))?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing row {r}")))?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad value `{tok}` in row {r}")))?,
            );
        }
        if data.len() - before != cols {
            return Err(Error::Parse(format!(
                "row {r} has {} values, expected {cols}",
                data.len() - before
            )));
        }
    }
    Ok(ParamsFile { rows, cols, q, data })
}

pub fn read_params(path: &Path) -> Result<ParamsFile> {
    parse_params(&std::fs::read_to_string(path)?)
}

pub fn save_model(model: &PatchModel, path: &Path) -> Result<()> {
    write_params(path, model.c, model.d, model.q, &model.w)
}

pub fn load_model(path: &Path) -> Result<PatchModel> {
    let p = read_params(path)?;
    if !(p.q >= 3.0) {
        return Err(Error::Parse(format!("q={} is not a patch-model exponent", p.q)));
    }
    Ok(PatchModel {
        c: p.rows,
        d: p.cols,
        q: p.q,
        sigma0: 0.0,
        w: p.data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchworld::{make_feature_bank, sample_dataset};

    #[test]
    fn activation_examples() {
        assert_eq!(activation(0.0, 3.0), (0.0, 0.0));
        let (v, _) = activation(1.0, 3.0);
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // the linear branch at z=1 gives the same value
        assert!((1.0 - 2.0 / 3.0 - 1.0 / 3.0_f64).abs() < 1e-15);
        let (v, g) = activation(0.5, 3.0);
        assert!((v - 0.041_666_666_666_666_664).abs() < 1e-12);
        assert!((g - 0.25).abs() < 1e-15);
        let h = 1e-6;
        let fd = (activation(0.5 + h, 3.0).0 - activation(0.5 - h, 3.0).0) / (2.0 * h);
        assert!(((fd - g) / g).abs() < 1e-6);
    }

    #[test]
    fn activation_odd_continuous_monotone() {
        for q in [3.0, 4.0, 5.5] {
            for i in 0..10_000 {
                let z = -3.0 + 6.0 * i as f64 / 9_999.0;
                let (v, g) = activation(z, q);
                let (vn, gn) = activation(-z, q);
                assert_eq!(v, -vn);
                assert_eq!(g, gn);
                assert!(g >= 0.0);
            }
            for z in [1.0f64, -1.0] {
                let e = 1e-12;
                let lo = activation(z * (1.0 - e), q);
                let hi = activation(z * (1.0 + e), q);
                assert!((lo.0 - hi.0).abs() < 1e-10);
                assert!((lo.1 - hi.1).abs() < 1e-10);
            }
        }
    }

    fn one_sample(d: usize, feature: usize, label: i8, noise: Vec<f64>) -> PatchSample {
        assert_eq!(noise.len(), d);
        PatchSample {
            feature_index: feature,
            label,
            noise_id: 0,
            noise: Arc::from(noise),
        }
    }

    #[test]
    fn forward_examples() {
        let bank = make_feature_bank(2, 4).unwrap();
        let ds = sample_dataset(&bank, 6, &[0.5, 0.5], 1.0, 1).unwrap();
        let zero = PatchModel::zeros(3, 4, 3.0);
        for s in &ds.samples {
            assert_eq!(forward(&zero, s).unwrap(), 0.0);
        }
        let mut m = PatchModel::zeros(1, 4, 3.0);
        m.w[0] = 1.0;
        let s = one_sample(4, 1, 1, vec![0.0; 4]);
        assert!((forward(&m, &s).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let bad = one_sample(5, 1, 1, vec![0.0; 5]);
        assert!(matches!(forward(&m, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_decomposes_over_channels() {
        let bank = make_feature_bank(2, 16).unwrap();
        let ds = sample_dataset(&bank, 8, &[0.5, 0.5], 2.0, 3).unwrap();
        let m2 = init_model(2, 16, 3.0, 0.7, 11).unwrap();
        let mut a = PatchModel::zeros(1, 16, 3.0);
        a.w.copy_from_slice(m2.row(0));
        let mut b = PatchModel::zeros(1, 16, 3.0);
        b.w.copy_from_slice(m2.row(1));
        for s in &ds.samples {
            let lhs = forward(&m2, s).unwrap();
            let rhs = forward(&a, s).unwrap() + forward(&b, s).unwrap();
            assert!((lhs - rhs).abs() < 1e-14);
            // naive per-patch sum with explicit x1
            let x1 = s.x1(&bank);
            let naive: f64 = (0..2)
                .map(|c| {
                    activation(dot(m2.row(c), &x1), 3.0).0 + activation(dot(m2.row(c), &s.noise), 3.0).0
                })
                .sum();
            assert!((lhs - naive).abs() < 1e-14);
        }
    }

    #[test]
    fn init_variance_and_projection_scale() {
        let m = init_model(100, 10_000, 3.0, 0.3, 5).unwrap();
        let var = m.w.iter().map(|x| x * x).sum::<f64>() / m.w.len() as f64;
        assert!((var / 0.09 - 1.0).abs() < 0.02, "{var}");
        let bank = make_feature_bank(10, 10_000).unwrap();
        let mean_abs: f64 = (0..100)
            .flat_map(|c| (1..=10).map(move |k| (c, k)))
            .map(|(c, k)| bank.project(m.row(c), k).abs())
            .sum::<f64>()
            / 1000.0;
        // E|N(0, σ0²)| = σ0·sqrt(2/π)
        assert!((mean_abs / (0.3 * (2.0 / std::f64::consts::PI).sqrt()) - 1.0).abs() < 0.1);
        let zero = init_model(2, 3, 3.0, 0.0, 5).unwrap();
        assert!(zero.w.iter().all(|&x| x == 0.0));
        assert!(init_model(2, 3, 2.5, 0.1, 5).is_err());
        assert!(init_model(0, 3, 3.0, 0.1, 5).is_err());
    }

    #[test]
    fn loss_examples() {
        let bank = make_feature_bank(2, 8).unwrap();
        let ds = sample_dataset(&bank, 10, &[0.5, 0.5], 1.0, 2).unwrap();
        let zero = PatchModel::zeros(2, 8, 3.0);
        assert_eq!(dataset_loss(&zero, &ds).unwrap(), std::f64::consts::LN_2);
        let m = init_model(2, 8, 3.0, 1.0, 1).unwrap();
        assert!(dataset_loss(&m, &ds).unwrap() >= 0.0);

        // margin >= 20: w = 30·v_1 on a noise-free sample of feature 1
        let mut fit = PatchModel::zeros(1, 4, 3.0);
        fit.w[0] = 30.0;
        let single = PatchDataset::new(
            make_feature_bank(1, 4).unwrap(),
            vec![one_sample(4, 1, 1, vec![0.0; 4]), one_sample(4, 1, -1, vec![0.0; 4])],
            0.0,
        );
        assert!(dataset_loss(&fit, &single).unwrap() < 1e-6);

        let empty = PatchDataset::new(bank, vec![], 1.0);
        assert!(matches!(dataset_loss(&zero, &empty), Err(Error::Undefined(_))));
        assert!(loss_gradient(&zero, &empty, LossMode::ExactLogistic).is_err());
    }

    #[test]
    fn gradient_zero_at_origin_and_modes_agree() {
        let bank = make_feature_bank(3, 8).unwrap();
        let ds = sample_dataset(&bank, 12, &[1.0 / 3.0; 3], 1.0, 2).unwrap();
        let zero = PatchModel::zeros(2, 8, 3.0);
        let g = loss_gradient(&zero, &ds, LossMode::ExactLogistic).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let h = loss_gradient(&zero, &ds, LossMode::HalfApproximation).unwrap();
        assert_eq!(g, h);
    }

    fn fd_check(seed: u64) -> f64 {
        let bank = make_feature_bank(3, 8).unwrap();
        let ds = sample_dataset(&bank, 5, &[0.4, 0.4, 0.2], 3.0, seed).unwrap();
        let m = init_model(3, 8, 3.0, 0.8, seed + 100).unwrap();
        let g = loss_gradient(&m, &ds, LossMode::ExactLogistic).unwrap();
        let h = 1e-6;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..m.w.len() {
            let mut p = m.clone();
            p.w[i] += h;
            let mut q = m.clone();
            q.w[i] -= h;
            let fd = (dataset_loss(&p, &ds).unwrap() - dataset_loss(&q, &ds).unwrap()) / (2.0 * h);
            num = num.max((fd - g[i]).abs());
            den = den.max(g[i].abs());
        }
        num / den
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let rel = fd_check(seed);
            assert!(rel < 1e-5, "seed {seed}: rel err {rel}");
        }
    }

    #[test]
    fn alignment_examples() {
        let bank = make_feature_bank(3, 5).unwrap();
        let zero = PatchModel::zeros(2, 5, 3.0);
        let s = measure_alignment(&zero, &bank, &[], 0.5);
        assert_eq!(s.alphas, vec![0.0; 3]);
        assert_eq!(s.k_cut, 0);
        let mut m = PatchModel::zeros(2, 5, 3.0);
        m.row_mut(0).copy_from_slice(&bank.vector(2));
        let s = measure_alignment(&m, &bank, &[], 0.5);
        assert_eq!(s.alphas, vec![0.0, 1.0, 0.0]);
        assert_eq!(s.k_cut, 1);
        assert_eq!(s.alpha_channels, vec![0, 0, 0]);
    }

    #[test]
    fn alignment_matches_brute_force() {
        let bank = make_feature_bank(4, 32).unwrap();
        let ds = sample_dataset(&bank, 6, &[0.25; 4], 1.5, 4).unwrap();
        let m = init_model(7, 32, 3.0, 0.5, 8).unwrap();
        let tracked: Vec<TrackedNoise> = ds.samples.iter().map(TrackedNoise::from).collect();
        let s = measure_alignment(&m, &bank, &tracked, 0.3);
        for l in 1..=4 {
            let v = bank.vector(l);
            let brute = (0..7).map(|c| dot(m.row(c), &v)).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(s.alphas[l - 1], brute);
        }
        for (t, (id, val)) in tracked.iter().zip(&s.noise_coeffs) {
            assert_eq!(*id, t.id);
            let brute = (0..7)
                .map(|c| f64::from(t.label) * dot(m.row(c), &t.noise))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(*val, brute);
        }
        assert_eq!(s.k_cut, s.alphas.iter().filter(|&&a| a >= 0.3).count());
    }

    #[test]
    fn flow_zero_horizon_single_snapshot() {
        let bank = make_feature_bank(2, 8).unwrap();
        let ds = sample_dataset(&bank, 4, &[0.5, 0.5], 1.0, 0).unwrap();
        let m = init_model(2, 8, 3.0, 0.1, 0).unwrap();
        let cfg = FlowConfig {
            horizon: 0.0,
            ..FlowConfig::default()
        };
        let snaps = flow_integrate(&m, &ds, &cfg, &bank, &[]).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].t, 0.0);
    }

    #[test]
    fn flow_alpha_nondecreasing_noise_free() {
        let bank = make_feature_bank(1, 16).unwrap();
        let ds = sample_dataset(&bank, 8, &[1.0], 0.0, 0).unwrap();
        let m = init_model(4, 16, 3.0, 0.2, 3).unwrap();
        let cfg = FlowConfig {
            dt: None,
            horizon: 200.0,
            record_every: 1.0,
            loss_mode: LossMode::HalfApproximation,
            theta_conv: 0.5,
        };
        let snaps = flow_integrate(&m, &ds, &cfg, &bank, &[]).unwrap();
        assert!(snaps.windows(2).all(|w| w[1].alphas[0] >= w[0].alphas[0]));
        assert!(snaps.last().unwrap().alphas[0] > 1.0);
    }

    #[test]
    fn flow_loss_nonincreasing_per_step() {
        let bank = make_feature_bank(2, 64).unwrap();
        let ds = sample_dataset(&bank, 16, &[0.5, 0.5], 1.0, 4).unwrap();
        let mut m = init_model(4, 64, 3.0, 0.3, 3).unwrap();
        let dt = stable_dt(&m, &ds, LossMode::ExactLogistic, 1.0).unwrap();
        let refs: Vec<&PatchSample> = ds.samples.iter().collect();
        let mut prev = dataset_loss(&m, &ds).unwrap();
        for _ in 0..2000 {
            euler_step(&mut m, &refs, dt, LossMode::ExactLogistic).unwrap();
            let cur = dataset_loss(&m, &ds).unwrap();
            assert!(cur <= prev + 1e-15, "{cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn flow_step_refinement() {
        let bank = make_feature_bank(2, 64).unwrap();
        let ds = sample_dataset(&bank, 16, &[0.5, 0.5], 1.0, 4).unwrap();
        let m = init_model(4, 64, 3.0, 0.3, 3).unwrap();
        let dt = stable_dt(&m, &ds, LossMode::ExactLogistic, 1.0).unwrap();
        let run = |dt: f64| {
            let cfg = FlowConfig {
                dt: Some(dt),
                horizon: 150.0,
                record_every: 50.0,
                loss_mode: LossMode::ExactLogistic,
                theta_conv: 0.5,
            };
            flow_integrate(&m, &ds, &cfg, &bank, &[]).unwrap().pop().unwrap()
        };
        let a = run(dt);
        let b = run(dt / 2.0);
        for (x, y) in a.alphas.iter().zip(&b.alphas) {
            assert!(((x - y) / y).abs() < 0.01, "{x} vs {y}");
        }
    }

    #[test]
    fn params_round_trip_exact() {
        let m = init_model(3, 7, 3.5, 0.123, 42).unwrap();
        let text = format_params(m.c, m.d, m.q, &m.w);
        let p = parse_params(&text).unwrap();
        assert_eq!((p.rows, p.cols, p.q), (3, 7, 3.5));
        assert_eq!(p.data, m.w);
        assert!(parse_params("nope\n1 1 3\n0\n").is_err());
        assert!(parse_params("dartlab-params v1\n1 2 3\n0\n").is_err());
    }
}
