//! Block-fading Rayleigh MIMO channel and the normalized singular value
//! statistics used by the stability condition.

use std::io::Write;

use nalgebra::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{svd, CMat, CVec, RVec, SvdResult};

/// Singular values below this are treated as a rank deficiency.
pub const DEGENERATE_SV: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ChannelDraw {
    pub h: CMat,
    pub svd: SvdResult,
    /// Leading `K` singular values, descending.
    pub pi_k: Vec<f64>,
}

impl ChannelDraw {
    pub fn from_matrix(h: CMat, k: usize) -> Result<Self> {
        let (nc, ns) = h.shape();
        if k == 0 || k > nc.min(ns) {
            return Err(Error::Dimension(format!("K = {k} must satisfy 1 <= K <= min(Ns = {ns}, Nc = {nc})")));
        }
        let svd = svd(&h)?;
        let pi_k = svd.singular_values[..k].to_vec();
        Ok(Self { h, svd, pi_k })
    }

    pub fn k(&self) -> usize {
        self.pi_k.len()
    }
    pub fn nc(&self) -> usize {
        self.h.nrows()
    }
    pub fn ns(&self) -> usize {
        self.h.ncols()
    }

    pub fn is_degenerate(&self) -> bool {
        self.pi_k.iter().any(|&p| p < DEGENERATE_SV)
    }

    /// First `K` columns of the right singular matrix `U`.
    pub fn u_k(&self) -> CMat {
        self.svd.u.columns(0, self.k()).into_owned()
    }
}

/// Circularly-symmetric complex Gaussian with unit variance.
pub fn sample_cn<R: Rng + ?Sized>(rng: &mut R) -> Complex<f64> {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws `H` with i.i.d. CN(0, 1) entries, filled row by row.
pub fn sample_channel<R: Rng + ?Sized>(rng: &mut R, nc: usize, ns: usize, k: usize) -> Result<ChannelDraw> {
    let mut h = CMat::zeros(nc, ns);
    for i in 0..nc {
        for j in 0..ns {
            h[(i, j)] = sample_cn(rng);
        }
    }
    ChannelDraw::from_matrix(h, k)
}

pub fn receive_noiseless(draw: &ChannelDraw, f: &CMat, q: &RVec) -> Result<CVec> {
    if f.nrows() != draw.ns() || f.ncols() != q.len() {
        return Err(Error::Dimension(format!("receive: H {:?}, F {:?}, q {}", draw.h.shape(), f.shape(), q.len())));
    }
    let qc = q.map(|v| Complex::new(v, 0.0));
    Ok(&draw.h * (f * qc))
}

/// `y = H F q + z` with `z ~ CN(0, I_Nc)`.
pub fn receive<R: Rng + ?Sized>(draw: &ChannelDraw, f: &CMat, q: &RVec, rng: &mut R) -> Result<CVec> {
    let mut y = receive_noiseless(draw, f, q)?;
    for v in y.iter_mut() {
        *v += sample_cn(rng);
    }
    Ok(y)
}

/// Normalized singular values `pi / Tr(Pi_K^-1)` of one draw, or `None` for a
/// rank-deficient draw.
pub fn pitilde_of(draw: &ChannelDraw) -> Option<Vec<f64>> {
    if draw.is_degenerate() {
        return None;
    }
    let t: f64 = draw.pi_k.iter().map(|s| 1.0 / s).sum();
    Some(draw.pi_k.iter().map(|s| s / t).collect())
}

/// Empirical distribution of the normalized singular value.
///
/// Every draw contributes all of its `K` values with equal weight.
#[derive(Debug, Clone)]
pub struct PiTildeStats {
    sorted: Vec<f64>,
    // suffix[i] = sum_{j >= i} 1 / sorted[j]
    inv_suffix: Vec<f64>,
    degenerate: usize,
}

impl PiTildeStats {
    pub fn from_samples(mut samples: Vec<f64>, degenerate: usize) -> Self {
        samples.retain(|v| v.is_finite() && *v > 0.0);
        samples.sort_by(f64::total_cmp);
        let mut inv_suffix = vec![0.0; samples.len() + 1];
        for i in (0..samples.len()).rev() {
            inv_suffix[i] = inv_suffix[i + 1] + 1.0 / samples[i];
        }
        Self { sorted: samples, inv_suffix, degenerate }
    }

    pub fn from_draws<'a, I>(draws: I) -> Self
    where
        I: IntoIterator<Item = &'a ChannelDraw>,
    {
        let mut samples = Vec::new();
        let mut degenerate = 0;
        for d in draws {
            match pitilde_of(d) {
                Some(v) => samples.extend(v),
                None => degenerate += 1,
            }
        }
        Self::from_samples(samples, degenerate)
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }
    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }
    pub fn degenerate_draws(&self) -> usize {
        self.degenerate
    }
    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// `Pr(pi~ < xi)`.
    pub fn cdf(&self, xi: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|&s| s < xi) as f64 / self.sorted.len() as f64
    }

    /// `E[1 / pi~ | pi~ >= xi]`, `None` when no sample reaches `xi`.
    pub fn conditional_inverse_mean(&self, xi: f64) -> Option<f64> {
        let idx = self.sorted.partition_point(|&s| s < xi);
        let n = self.sorted.len() - idx;
        (n > 0).then(|| self.inv_suffix[idx] / n as f64)
    }

    /// Empirical quantiles at `n` evenly spaced levels in `[0, 1)`.
    pub fn quantile_grid(&self, n: usize) -> Vec<f64> {
        if self.sorted.is_empty() || n == 0 {
            return Vec::new();
        }
        let m = self.sorted.len();
        let mut grid: Vec<f64> = (0..n).map(|i| self.sorted[(i * m) / n]).collect();
        grid.dedup();
        grid
    }

    /// One value per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "pitilde")?;
        for s in &self.sorted {
            writeln!(out, "{s:.17e}")?;
        }
        Ok(())
    }
}

pub fn estimate_pitilde_stats<R: Rng + ?Sized>(
    rng: &mut R,
    nc: usize,
    ns: usize,
    k: usize,
    n_samples: usize,
) -> Result<PiTildeStats> {
    let mut samples = Vec::with_capacity(n_samples * k);
    let mut degenerate = 0;
    for _ in 0..n_samples {
        let d = sample_channel(rng, nc, ns, k)?;
        match pitilde_of(&d) {
            Some(v) => samples.extend(v),
            None => degenerate += 1,
        }
    }
    Ok(PiTildeStats::from_samples(samples, degenerate))
}
