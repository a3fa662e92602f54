//! Two-patch synthetic data: a feature patch `y·v_k` drawn from an
//! orthonormal bank, and a Gaussian noise patch `ε ~ N(0, σ²/d·I_d)`.
//!
//! Feature indices are 1-based throughout (`1..=K`), matching the cyclic
//! augmentation `T_k(v_k') = v_{((k'+k-1) mod K)+1}`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// The first `K` standard-basis vectors of `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub k: usize,
    pub d: usize,
}

impl FeatureBank {
    /// Coordinate carrying feature `k` (1-based).
    #[inline]
    pub fn coordinate(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.k);
        k - 1
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        v[self.coordinate(k)] = 1.0;
        v
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        (1..=self.k).map(|k| self.vector(k)).collect()
    }

    /// `w · v_k`.
    #[inline]
    pub fn project(&self, w: &[f64], k: usize) -> f64 {
        w[self.coordinate(k)]
    }
}

pub fn make_feature_bank(k: usize, d: usize) -> Result<FeatureBank> {
    if k == 0 || k > d {
        return Err(Error::InvalidDimension(format!(
            "need 1 <= K <= d, got K={k}, d={d}"
        )));
    }
    Ok(FeatureBank { k, d })
}

#[derive(Debug, Clone)]
pub struct PatchSample {
    /// 1-based index into the feature bank.
    pub feature_index: usize,
    /// ±1
    pub label: i8,
    pub noise_id: u64,
    /// The noise patch `x2 = ε`, shared (not copied) across augmented views.
    pub noise: Arc<[f64]>,
}

impl PatchSample {
    #[inline]
    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }

    /// Feature patch `x1 = y·v_k`.
    pub fn x1(&self, bank: &FeatureBank) -> Vec<f64> {
        let mut v = bank.vector(self.feature_index);
        v.iter_mut().for_each(|x| *x *= self.y());
        v
    }
}

#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub bank: FeatureBank,
    pub samples: Vec<PatchSample>,
    pub sigma: f64,
    /// Realized feature fractions. For an empty dataset this holds the
    /// requested allocation.
    pub rho: Vec<f64>,
}

impl PatchDataset {
    pub fn new(bank: FeatureBank, samples: Vec<PatchSample>, sigma: f64) -> Self {
        let rho = if samples.is_empty() {
            vec![0.0; bank.k]
        } else {
            counts_to_fractions(&feature_counts(bank.k, &samples))
        };
        Self {
            bank,
            samples,
            sigma,
            rho,
        }
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_counts(&self) -> Vec<usize> {
        feature_counts(self.bank.k, &self.samples)
    }

    /// Writes the debugging dump: `sample,feature_index,label,noise_id`.
    /// Noise vectors are omitted; they are regenerable from the seed.
    pub fn write_dump_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "sample,feature_index,label,noise_id")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(out, "{i},{},{},{}", s.feature_index, s.label, s.noise_id)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn feature_counts(k: usize, samples: &[PatchSample]) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for s in samples {
        counts[s.feature_index - 1] += 1;
    }
    counts
}

fn counts_to_fractions(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Largest-remainder allocation of `n` items over fractions `rho`.
/// Ties in the fractional part go to the lower index.
pub fn allocate_counts(n: usize, rho: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = rho.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn validate_rho(bank: &FeatureBank, rho: &[f64]) -> Result<()> {
    if rho.len() != bank.k {
        return Err(Error::config(
            "rho",
            format!("expected {} entries, got {}", bank.k, rho.len()),
        ));
    }
    if rho.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::config("rho", "entries must be finite and nonnegative"));
    }
    let s: f64 = rho.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::config("rho", format!("must sum to 1, sums to {s}")));
    }
    Ok(())
}

/// Identifier namespace for the noise draws of one seeded stream.
fn noise_stream_tag(seed: u64) -> u64 {
    derive_seed(seed, "noise-id") & 0xffff_ffff_0000_0000
}

fn draw_noise(d: usize, sigma: f64, count: usize, seed: u64) -> Vec<(u64, Arc<[f64]>)> {
    let mut rng = rng_from_seed(derive_seed(seed, "noise"));
    let std = sigma / (d as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let tag = noise_stream_tag(seed);
    (0..count)
        .map(|i| {
            let v: Vec<f64> = (0..d).map(|_| std * normal.sample(&mut rng)).collect();
            (tag | i as u64, Arc::from(v))
        })
        .collect()
}

/// Draws a dataset with deterministic feature allocation, per-feature
/// balanced labels (`+1,-1,+1,…` within each feature block) and i.i.d.
/// noise patches from the stream seeded by `seed`.
pub fn sample_dataset(
    bank: &FeatureBank,
    n: usize,
    rho: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<PatchDataset> {
    validate_rho(bank, rho)?;
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::config("sigma", "must be finite and >= 0"));
    }
    if n == 0 {
        let mut ds = PatchDataset::new(*bank, Vec::new(), sigma);
        ds.rho = rho.to_vec();
        return Ok(ds);
    }
    let counts = allocate_counts(n, rho);
    let noise = draw_noise(bank.d, sigma, n, seed);
    let mut samples = Vec::with_capacity(n);
    let mut noise_iter = noise.into_iter();
    for (f, &c) in counts.iter().enumerate() {
        for j in 0..c {
            let (noise_id, eps) = noise_iter.next().unwrap();
            samples.push(PatchSample {
                feature_index: f + 1,
                label: if j % 2 == 0 { 1 } else { -1 },
                noise_id,
                noise: eps,
            });
        }
    }
    Ok(PatchDataset::new(*bank, samples, sigma))
}

/// Replaces every noise patch with a fresh draw from the stream `seed`
/// (new noise ids); features and labels are kept.
pub fn resample_noise(ds: &PatchDataset, seed: u64) -> PatchDataset {
    let noise = draw_noise(ds.bank.d, ds.sigma, ds.n(), seed);
    let samples = ds
        .samples
        .iter()
        .zip(noise)
        .map(|(s, (noise_id, eps))| PatchSample {
            noise_id,
            noise: eps,
            ..s.clone()
        })
        .collect();
    PatchDataset::new(ds.bank, samples, ds.sigma)
}

/// Cyclic augmentation `T_k`; `rho_prime` holds the window-restricted
/// frequency when one has been computed for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub shift: usize,
    pub rho_prime: Option<f64>,
}

impl AugmentationSpec {
    pub fn new(shift: usize) -> Self {
        Self {
            shift,
            rho_prime: None,
        }
    }
}

/// `((k' + k − 1) mod K) + 1`
#[inline]
pub fn shift_index(k_prime: usize, k: usize, big_k: usize) -> usize {
    ((k_prime + k - 1) % big_k) + 1
}

pub fn apply_augmentation(ds: &PatchDataset, k: usize) -> Result<PatchDataset> {
    if k == 0 || k > ds.bank.k {
        return Err(Error::config(
            "shift",
            format!("need 1 <= k <= K={}, got {k}", ds.bank.k),
        ));
    }
    let samples = ds
        .samples
        .iter()
        .map(|s| PatchSample {
            feature_index: shift_index(s.feature_index, k, ds.bank.k),
            ..s.clone()
        })
        .collect();
    let mut out = PatchDataset::new(ds.bank, samples, ds.sigma);
    if ds.is_empty() {
        out.rho = ds.rho.clone();
    }
    Ok(out)
}

/// `ds ∪ T_1(ds) ∪ … ∪ T_{m−1}(ds)`, original block first.
pub fn union_augmented(ds: &PatchDataset, m: usize) -> Result<PatchDataset> {
    if m == 0 || m > ds.bank.k {
        return Err(Error::config(
            "m",
            format!("need 1 <= m <= K={}, got {m}", ds.bank.k),
        ));
    }
    let mut samples = ds.samples.clone();
    for k in 1..m {
        samples.extend(apply_augmentation(ds, k)?.samples);
    }
    Ok(PatchDataset::new(ds.bank, samples, ds.sigma))
}

/// Disjoint equal-size blocks for `M` branches.
#[derive(Debug, Clone)]
pub struct BranchSplit {
    pub blocks: Vec<PatchDataset>,
    /// Remainder samples left out by the floor rule.
    pub dropped: usize,
}

pub fn split_for_branches(ds: &PatchDataset, m: usize, seed: u64) -> Result<BranchSplit> {
    if m == 0 {
        return Err(Error::config("M", "need at least one branch"));
    }
    if m > ds.n() {
        return Err(Error::config(
            "M",
            format!("M={m} exceeds dataset size n={}", ds.n()),
        ));
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, "split")));
    let size = ds.n() / m;
    let blocks = (0..m)
        .map(|b| {
            let samples = order[b * size..(b + 1) * size]
                .iter()
                .map(|&i| ds.samples[i].clone())
                .collect();
            PatchDataset::new(ds.bank, samples, ds.sigma)
        })
        .collect();
    Ok(BranchSplit {
        blocks,
        dropped: ds.n() - m * size,
    })
}

pub fn empirical_rho(ds: &PatchDataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Undefined("feature frequencies of an empty dataset".into()));
    }
    Ok(counts_to_fractions(&ds.feature_counts()))
}

/// `freq(k) / Σ freq` over the cyclic window `v_{(k mod K)+1}, …, v_{((m+k−1) mod K)+1}`.
pub fn restricted_rho(ds: &PatchDataset, k: usize, m: usize) -> Result<f64> {
    let rho = empirical_rho(ds)?;
    restricted_rho_from(&rho, k, m)
}

/// Same as [`restricted_rho`] on a frequency vector.
pub fn restricted_rho_from(rho: &[f64], k: usize, m: usize) -> Result<f64> {
    let big_k = rho.len();
    if k == 0 || k > big_k {
        return Err(Error::config("k", format!("need 1 <= k <= {big_k}, got {k}")));
    }
    if m == 0 || m > big_k {
        return Err(Error::config("m", format!("need 1 <= m <= {big_k}, got {m}")));
    }
    let window: f64 = (1..=m).map(|j| rho[shift_index(k, j, big_k) - 1]).sum();
    if window == 0.0 {
        return Err(Error::Undefined(format!(
            "window total is zero for k={k}, m={m}"
        )));
    }
    Ok(rho[k - 1] / window)
}
