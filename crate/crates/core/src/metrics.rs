//! Histogram divergences, exact empirical W1, sliced W1 and rank correlation.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{invalid, LabError, Result};
use crate::scores::{normal_cdf, Gaussian1D, GaussianMixture};
use crate::LabRng;

pub const DEFAULT_BINS: usize = 100;
/// Fraction of the reference span added on each side of the histogram range.
pub const RANGE_PAD: f64 = 0.05;

/// Regular per-axis bins; cells are indexed row-major over axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: usize,
}

impl Binning {
    pub fn from_bounds(lo: Vec<f64>, hi: Vec<f64>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(invalid("bins", "must be >= 1"));
        }
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(invalid("bounds", "need one (lo, hi) pair per axis"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && h > l)) {
            return Err(invalid("bounds", "need finite lo < hi"));
        }
        Ok(Self { lo, hi, bins })
    }

    /// Range `[min - pad*span, max + pad*span]` of a row-major reference sample.
    pub fn from_reference(samples: &[f64], dim: usize, bins: usize) -> Result<Self> {
        check_samples(samples, dim, "reference")?;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in samples.chunks_exact(dim) {
            for (k, &x) in row.iter().enumerate() {
                lo[k] = lo[k].min(x);
                hi[k] = hi[k].max(x);
            }
        }
        for k in 0..dim {
            let span = (hi[k] - lo[k]).max(1e-12 * (1.0 + lo[k].abs()));
            lo[k] -= RANGE_PAD * span;
            hi[k] += RANGE_PAD * span;
        }
        Self::from_bounds(lo, hi, bins)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn n_cells(&self) -> usize {
        self.bins.pow(self.dim() as u32)
    }

    pub fn width(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.bins as f64
    }

    /// Bin edges along `axis` (`bins + 1` values).
    pub fn edges(&self, axis: usize) -> Vec<f64> {
        let w = self.width(axis);
        (0..=self.bins).map(|j| self.lo[axis] + j as f64 * w).collect()
    }

    /// Cell of a point; out-of-range coordinates go to the edge bins.
    pub fn cell(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for (k, &xi) in x.iter().enumerate() {
            let j = ((xi - self.lo[k]) / self.width(k)).floor();
            let j = if j < 0.0 { 0 } else { (j as usize).min(self.bins - 1) };
            idx = idx * self.bins + j;
        }
        idx
    }

    /// Restriction to a single axis.
    pub fn axis(&self, axis: usize) -> Self {
        Self {
            lo: vec![self.lo[axis]],
            hi: vec![self.hi[axis]],
            bins: self.bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub binning: Binning,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn from_samples(binning: &Binning, samples: &[f64]) -> Result<Self> {
        let d = binning.dim();
        check_samples(samples, d, "samples")?;
        let n = binning.n_cells();
        let counts = samples
            .par_chunks(4096 * d)
            .fold(
                || vec![0u64; n],
                |mut acc, chunk| {
                    for row in chunk.chunks_exact(d) {
                        acc[binning.cell(row)] += 1;
                    }
                    acc
                },
            )
            .reduce(
                || vec![0u64; n],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        Ok(Self {
            binning: binning.clone(),
            counts,
            total: (samples.len() / d) as u64,
        })
    }

    pub fn pmf(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

fn check_samples(samples: &[f64], dim: usize, name: &'static str) -> Result<()> {
    if dim == 0 {
        return Err(invalid("dim", "must be >= 1"));
    }
    if samples.is_empty() {
        return Err(LabError::InsufficientData(format!("{name} is empty")));
    }
    if !samples.len().is_multiple_of(dim) {
        return Err(LabError::DimensionMismatch {
            expected: dim,
            got: samples.len() % dim,
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(invalid(name, "contains non-finite values"));
    }
    Ok(())
}

/// Probability mass of an axis-aligned box under an exact reference law.
pub trait ReferenceMass: Sync {
    fn dim(&self) -> usize;
    fn box_mass(&self, lo: &[f64], hi: &[f64]) -> f64;
}

impl ReferenceMass for Gaussian1D {
    fn dim(&self) -> usize {
        1
    }
    fn box_mass(&self, lo: &[f64], hi: &[f64]) -> f64 {
        interval_mass(0.0, self.sigma0, lo[0], hi[0])
    }
}

impl ReferenceMass for GaussianMixture {
    fn dim(&self) -> usize {
        crate::scores::ScoreModel::dim(self)
    }
    fn box_mass(&self, lo: &[f64], hi: &[f64]) -> f64 {
        (0..self.n_components())
            .map(|k| {
                let m = self.component_mean(k);
                let v = self.component_vars(k);
                self.weights()[k]
                    * (0..lo.len())
                        .map(|a| interval_mass(m[a], v[a].sqrt(), lo[a], hi[a]))
                        .product::<f64>()
            })
            .sum()
    }
}

/// One coordinate of a mixture at time zero.
pub struct Marginal<'a> {
    pub mixture: &'a GaussianMixture,
    pub axis: usize,
}

impl ReferenceMass for Marginal<'_> {
    fn dim(&self) -> usize {
        1
    }
    fn box_mass(&self, lo: &[f64], hi: &[f64]) -> f64 {
        self.mixture.marginal_cdf0(self.axis, hi[0]) - self.mixture.marginal_cdf0(self.axis, lo[0])
    }
}

/// `P(lo < N(m, s^2) < hi)`, accurate in both tails.
fn interval_mass(m: f64, s: f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = ((lo - m) / s, (hi - m) / s);
    if a > 0.0 {
        normal_cdf(-a) - normal_cdf(-b)
    } else {
        normal_cdf(b) - normal_cdf(a)
    }
}

/// Exact cell masses; the edge cells absorb the tails so the pmf sums to 1.
pub fn exact_pmf(binning: &Binning, reference: &dyn ReferenceMass) -> Result<Vec<f64>> {
    let d = binning.dim();
    if reference.dim() != d {
        return Err(LabError::DimensionMismatch {
            expected: d,
            got: reference.dim(),
        });
    }
    let edges: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let mut e = binning.edges(a);
            e[0] = f64::NEG_INFINITY;
            e[binning.bins] = f64::INFINITY;
            e
        })
        .collect();
    let pmf = (0..binning.n_cells())
        .into_par_iter()
        .map(|cell| {
            let mut lo = vec![0.0; d];
            let mut hi = vec![0.0; d];
            let mut rem = cell;
            for a in (0..d).rev() {
                let j = rem % binning.bins;
                rem /= binning.bins;
                lo[a] = edges[a][j];
                hi[a] = edges[a][j + 1];
            }
            reference.box_mass(&lo, &hi).max(0.0)
        })
        .collect();
    Ok(pmf)
}

/// `sum p ln(p / q)` with `q` from counts; empty `q` cells under `p > 0` get
/// half a count before normalization.
pub fn kl_pmf_counts(p: &[f64], q_counts: &[u64]) -> f64 {
    let patched = p
        .iter()
        .zip(q_counts)
        .filter(|&(&pi, &c)| pi > 0.0 && c == 0)
        .count();
    let n = q_counts.iter().sum::<u64>() as f64 + 0.5 * patched as f64;
    let kl: f64 = p
        .iter()
        .zip(q_counts)
        .filter(|&(&pi, _)| pi > 0.0)
        .map(|(&pi, &c)| {
            let q = if c == 0 { 0.5 } else { c as f64 } / n;
            pi * (pi / q).ln()
        })
        .sum();
    kl.max(0.0)
}

/// Jensen-Shannon divergence of two pmfs (natural log).
pub fn js_pmf(p: &[f64], q: &[f64]) -> f64 {
    let half = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (half(a, m) + half(b, m))
        })
        .sum();
    js.clamp(0.0, LN_2)
}

/// Histogram KL and JS of `q` samples against an exact reference on fixed bins.
pub fn hist_divergences_exact(
    reference: &dyn ReferenceMass,
    binning: &Binning,
    q: &[f64],
) -> Result<(f64, f64)> {
    let p = exact_pmf(binning, reference)?;
    let hq = Histogram::from_samples(binning, q)?;
    Ok((kl_pmf_counts(&p, &hq.counts), js_pmf(&p, &hq.pmf())))
}

/// Histogram KL of `q` from reference samples `p`, range taken from `p`.
pub fn hist_kl(p: &[f64], q: &[f64], dim: usize, bins: usize) -> Result<f64> {
    let b = Binning::from_reference(p, dim, bins)?;
    let hp = Histogram::from_samples(&b, p)?;
    let hq = Histogram::from_samples(&b, q)?;
    Ok(kl_pmf_counts(&hp.pmf(), &hq.counts))
}

/// Histogram JS between sample sets on the range of `p`.
pub fn hist_js(p: &[f64], q: &[f64], dim: usize, bins: usize) -> Result<f64> {
    let b = Binning::from_reference(p, dim, bins)?;
    let hp = Histogram::from_samples(&b, p)?;
    let hq = Histogram::from_samples(&b, q)?;
    Ok(js_pmf(&hp.pmf(), &hq.pmf()))
}

/// Exact W1 between two 1D empirical laws: the integral of `|F_a - F_b|`.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, 1, "a")?;
    check_samples(b, 1, "b")?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut w = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        w += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev = x;
    }
    Ok(w)
}

/// Projection angles `(k + u) pi / n` with `u` drawn from `seed`.
pub fn slice_angles(n_proj: usize, seed: u64) -> Vec<f64> {
    let u: f64 = LabRng::seed_from_u64(seed).random();
    (0..n_proj).map(|k| (k as f64 + u) * PI / n_proj as f64).collect()
}

/// Mean of `w1_1d` over `n_proj` projections of 2D samples.
pub fn w1_sliced_2d(a: &[f64], b: &[f64], n_proj: usize, seed: u64) -> Result<f64> {
    if n_proj < 32 {
        return Err(invalid("n_proj", "must be >= 32"));
    }
    check_samples(a, 2, "a")?;
    check_samples(b, 2, "b")?;
    let project = |s: &[f64], th: f64| -> Vec<f64> {
        let (sn, cs) = th.sin_cos();
        s.chunks_exact(2).map(|r| cs * r[0] + sn * r[1]).collect()
    };
    let total = slice_angles(n_proj, seed)
        .par_iter()
        .map(|&th| w1_1d(&project(a, th), &project(b, th)))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum::<f64>();
    Ok(total / n_proj as f64)
}

/// Coordinate `axis` of row-major samples.
pub fn marginal(samples: &[f64], dim: usize, axis: usize) -> Vec<f64> {
    samples.iter().skip(axis).step_by(dim).copied().collect()
}

/// Ranks starting at 1, ties get their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[s]] {
            e += 1;
        }
        let r = 0.5 * (s + e) as f64 + 1.0;
        for &k in &idx[s..=e] {
            ranks[k] = r;
        }
        s = e + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
