//! Analytic score families with closed-form forward marginals, and the
//! controlled score error `epsilon * E_t` injected into the generative process.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, LabError, Result};
use crate::schedule::{ScheduleParams, UnitTimeRescaling};
use crate::LabRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Score field `(t_fwd, x) -> grad log p_t(x)`.
///
/// Implementations are immutable and safe to evaluate concurrently.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Score at forward time `t_fwd`, written into `out` (length `dim`).
    fn score(&self, t_fwd: f64, x: &[f64], out: &mut [f64]);

    /// Row-major batch version; `xs.len() == out.len() == n * dim`.
    fn score_batch(&self, t_fwd: f64, xs: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.score(t_fwd, x, o);
        }
    }

    /// Log of the forward marginal density, when known in closed form.
    fn log_density(&self, _t_fwd: f64, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Batch version of [`Self::log_density`]; returns `false` when unavailable.
    fn log_density_batch(&self, t_fwd: f64, xs: &[f64], out: &mut [f64]) -> bool {
        let d = self.dim();
        for (x, o) in xs.chunks_exact(d).zip(out.iter_mut()) {
            match self.log_density(t_fwd, x) {
                Some(v) => *o = v,
                None => return false,
            }
        }
        true
    }
}

/// Source of i.i.d. draws from a data distribution `p_0`.
pub trait DataSampler: Send + Sync {
    fn dim(&self) -> usize;
    fn sample_into(&self, rng: &mut LabRng, out: &mut [f64]);
}

/// Centered 1D Gaussian data `N(0, sigma0^2)` pushed through the VP schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1D {
    pub sigma0: f64,
    pub schedule: ScheduleParams,
}

impl Gaussian1D {
    /// Gaussian under the unit schedule on `[0, t_end]`.
    pub fn new(sigma0: f64, t_end: f64) -> Result<Self> {
        Self::with_schedule(sigma0, ScheduleParams::unit(t_end)?)
    }

    pub fn with_schedule(sigma0: f64, schedule: ScheduleParams) -> Result<Self> {
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(invalid("sigma0", format!("must be > 0, got {sigma0}")));
        }
        schedule.validate()?;
        Ok(Self { sigma0, schedule })
    }

    /// Marginal variance `mean_scale^2 sigma0^2 + varpi^2`; under the unit
    /// schedule this is `sigma0^2 e^{-t} + 1 - e^{-t}`.
    #[inline]
    pub fn variance_at(&self, t_fwd: f64) -> f64 {
        let b = self.schedule.integrated_beta(t_fwd);
        let decay = (-b).exp();
        self.sigma0 * self.sigma0 * decay - (-b).exp_m1()
    }

    /// `-x / sigma_t^2`.
    #[inline]
    pub fn score_scalar(&self, t_fwd: f64, x: f64) -> f64 {
        -x / self.variance_at(t_fwd)
    }

    pub fn density(&self, t_fwd: f64, x: f64) -> f64 {
        let v = self.variance_at(t_fwd);
        (-0.5 * x * x / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }
}

impl ScoreModel for Gaussian1D {
    fn dim(&self) -> usize {
        1
    }

    fn score(&self, t_fwd: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.score_scalar(t_fwd, x[0]);
    }

    fn score_batch(&self, t_fwd: f64, xs: &[f64], out: &mut [f64]) {
        let v = self.variance_at(t_fwd);
        for (o, x) in out.iter_mut().zip(xs) {
            *o = -x / v;
        }
    }

    fn log_density(&self, t_fwd: f64, x: &[f64]) -> Option<f64> {
        let v = self.variance_at(t_fwd);
        Some(-0.5 * (LN_2PI + v.ln() + x[0] * x[0] / v))
    }

    fn log_density_batch(&self, t_fwd: f64, xs: &[f64], out: &mut [f64]) -> bool {
        let v = self.variance_at(t_fwd);
        let c = LN_2PI + v.ln();
        for (o, x) in out.iter_mut().zip(xs) {
            *o = -0.5 * (c + x * x / v);
        }
        true
    }
}

impl DataSampler for Gaussian1D {
    fn dim(&self) -> usize {
        1
    }

    fn sample_into(&self, rng: &mut LabRng, out: &mut [f64]) {
        let z: f64 = rng.sample(StandardNormal);
        out[0] = self.sigma0 * z;
    }
}

/// Axis-aligned Gaussian mixture pushed through the VP schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    /// `k * dim`, row-major.
    means: Vec<f64>,
    /// `k * dim`, row-major, per-axis variances.
    vars: Vec<f64>,
    dim: usize,
    pub schedule: ScheduleParams,
}

/// Per-component coefficients of the time-`t` mixture.
struct MixtureSlice {
    means: Vec<f64>,
    inv_vars: Vec<f64>,
    log_norm: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        vars: Vec<Vec<f64>>,
        schedule: ScheduleParams,
    ) -> Result<Self> {
        schedule.validate()?;
        let k = weights.len();
        if k == 0 {
            return Err(invalid("weights", "mixture needs at least one component"));
        }
        if means.len() != k || vars.len() != k {
            return Err(invalid(
                "means",
                format!(
                    "{} weights but {} means and {} variance vectors",
                    k,
                    means.len(),
                    vars.len()
                ),
            ));
        }
        if weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(invalid("weights", "every weight must be > 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid("weights", format!("must sum to 1, got {total}")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("means", "dimension must be positive"));
        }
        for (m, v) in means.iter().zip(&vars) {
            if m.len() != dim || v.len() != dim {
                return Err(LabError::DimensionMismatch {
                    expected: dim,
                    got: m.len().min(v.len()),
                });
            }
            if v.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
                return Err(invalid("vars", "every variance must be > 0"));
            }
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            means: means.concat(),
            vars: vars.concat(),
            dim,
            schedule,
        })
    }

    /// 1D two-mode mixture: means +-1, variance 0.01, equal weights.
    pub fn two_mode_1d(schedule: ScheduleParams) -> Self {
        Self::new(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![0.01], vec![0.01]],
            schedule,
        )
        .expect("valid preset")
    }

    /// 2D four-mode mixture: means (+-1, +-1), std 0.05 per axis, equal weights.
    pub fn four_mode_2d(schedule: ScheduleParams) -> Self {
        let mut means = Vec::new();
        for i in 1..=2 {
            for j in 1..=2 {
                means.push(vec![(-1.0f64).powi(i), (-1.0f64).powi(j)]);
            }
        }
        Self::new(vec![0.25; 4], means, vec![vec![0.0025, 0.0025]; 4], schedule)
            .expect("valid preset")
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component_mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn component_vars(&self, k: usize) -> &[f64] {
        &self.vars[k * self.dim..(k + 1) * self.dim]
    }

    fn slice_at(&self, t_fwd: f64) -> MixtureSlice {
        let c = self.schedule.coefficients(t_fwd);
        let mu2 = c.mean_scale * c.mean_scale;
        let w2 = c.varpi * c.varpi;
        let n = self.means.len();
        let mut means = Vec::with_capacity(n);
        let mut inv_vars = Vec::with_capacity(n);
        let mut log_norm = self.log_weights.clone();
        for (k, ln) in log_norm.iter_mut().enumerate() {
            for j in 0..self.dim {
                let idx = k * self.dim + j;
                let v = mu2 * self.vars[idx] + w2;
                means.push(c.mean_scale * self.means[idx]);
                inv_vars.push(1.0 / v);
                *ln -= 0.5 * (LN_2PI + v.ln());
            }
        }
        MixtureSlice {
            means,
            inv_vars,
            log_norm,
        }
    }

    fn score_with(&self, s: &MixtureSlice, x: &[f64], out: &mut [f64], logp: &mut [f64]) {
        let d = self.dim;
        let mut max = f64::NEG_INFINITY;
        for (k, lp) in logp.iter_mut().enumerate() {
            let means = &s.means[k * d..(k + 1) * d];
            let inv_vars = &s.inv_vars[k * d..(k + 1) * d];
            let q: f64 = x
                .iter()
                .zip(means)
                .zip(inv_vars)
                .map(|((xj, m), iv)| (xj - m) * (xj - m) * iv)
                .sum();
            *lp = s.log_norm[k] - 0.5 * q;
            max = max.max(*lp);
        }
        let mut z = 0.0;
        for lp in logp.iter_mut() {
            *lp = (*lp - max).exp();
            z += *lp;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, &w) in logp.iter().enumerate() {
            let r = w / z;
            for j in 0..d {
                out[j] -= r * (x[j] - s.means[k * d + j]) * s.inv_vars[k * d + j];
            }
        }
    }

    /// Per-axis marginal CDF of the data distribution (`t = 0`).
    pub fn marginal_cdf0(&self, axis: usize, x: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let m = self.means[k * self.dim + axis];
                let s = self.vars[k * self.dim + axis].sqrt();
                w * normal_cdf((x - m) / s)
            })
            .sum()
    }
}

impl ScoreModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, t_fwd: f64, x: &[f64], out: &mut [f64]) {
        let s = self.slice_at(t_fwd);
        let mut logp = vec![0.0; self.weights.len()];
        self.score_with(&s, x, out, &mut logp);
    }

    fn score_batch(&self, t_fwd: f64, xs: &[f64], out: &mut [f64]) {
        let s = self.slice_at(t_fwd);
        let mut logp = vec![0.0; self.weights.len()];
        let d = self.dim;
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.score_with(&s, x, o, &mut logp);
        }
    }

    fn log_density(&self, t_fwd: f64, x: &[f64]) -> Option<f64> {
        let s = self.slice_at(t_fwd);
        let d = self.dim;
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let q: f64 = (0..d)
                    .map(|j| {
                        let r = x[j] - s.means[k * d + j];
                        r * r * s.inv_vars[k * d + j]
                    })
                    .sum();
                s.log_norm[k] - 0.5 * q
            })
            .collect();
        Some(log_sum_exp(&terms))
    }
}

impl DataSampler for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_into(&self, rng: &mut LabRng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        for (j, o) in out.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let idx = k * self.dim + j;
            *o = self.means[idx] + self.vars[idx].sqrt() * z;
        }
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Time profile of the injected score error, on the generative clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeMask {
    Constant(f64),
    /// `(1 + sin(2 pi t / T)) / 2`.
    Sinusoid,
    /// Indicator of `t < c T`.
    Before { c: f64 },
    /// Indicator of `t >= c T`.
    After { c: f64 },
    /// Normalized box `1/width` on `[start, start + width)`.
    Pulse { start: f64, width: f64 },
}

impl TimeMask {
    pub fn validate(&self, t_end: f64) -> Result<()> {
        match *self {
            TimeMask::Constant(v) if !v.is_finite() => {
                Err(invalid("pert.mask", "constant must be finite"))
            }
            TimeMask::Before { c } | TimeMask::After { c } if !(0.0..=1.0).contains(&c) => {
                Err(invalid("pert.mask_c", format!("must lie in [0, 1], got {c}")))
            }
            TimeMask::Pulse { start, width }
                if !(width > 0.0 && start >= 0.0 && start + width <= t_end * (1.0 + 1e-12)) =>
            {
                Err(invalid(
                    "pert.pulse",
                    format!("[{start}, {start} + {width}] must be a nonempty subinterval of [0, {t_end}]"),
                ))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn value(&self, t_gen: f64, t_end: f64) -> f64 {
        match *self {
            TimeMask::Constant(v) => v,
            TimeMask::Sinusoid => 0.5 * (1.0 + (std::f64::consts::TAU * t_gen / t_end).sin()),
            TimeMask::Before { c } => {
                if t_gen < c * t_end {
                    1.0
                } else {
                    0.0
                }
            }
            TimeMask::After { c } => {
                if t_gen >= c * t_end {
                    1.0
                } else {
                    0.0
                }
            }
            TimeMask::Pulse { start, width } => {
                if t_gen >= start && t_gen < start + width {
                    1.0 / width
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact average of the mask over `[t0, t1]`.
    pub fn average(&self, t0: f64, t1: f64, t_end: f64) -> f64 {
        let len = t1 - t0;
        if len <= 0.0 {
            return self.value(t0, t_end);
        }
        let overlap = |a: f64, b: f64| (t1.min(b) - t0.max(a)).max(0.0);
        match *self {
            TimeMask::Constant(v) => v,
            TimeMask::Sinusoid => {
                let w = std::f64::consts::TAU / t_end;
                0.5 + 0.5 * ((w * t0).cos() - (w * t1).cos()) / (w * len)
            }
            TimeMask::Before { c } => overlap(f64::NEG_INFINITY, c * t_end) / len,
            TimeMask::After { c } => overlap(c * t_end, f64::INFINITY) / len,
            TimeMask::Pulse { start, width } => overlap(start, start + width) / (width * len),
        }
    }

    /// Discontinuities of the mask inside `[0, T]`.
    pub fn breakpoints(&self, t_end: f64) -> Vec<f64> {
        match *self {
            TimeMask::Before { c } | TimeMask::After { c } => vec![c * t_end],
            TimeMask::Pulse { start, width } => vec![start, start + width],
            _ => vec![],
        }
    }
}

/// Spatial shape of the score error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialMode {
    /// `E_t = mask(t) * grad log p_t`.
    ScoreProportional,
    /// `E_t(x) = mask(t) * gain * x`.
    Linear { gain: f64 },
}

/// Injected score error `epsilon * E_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub epsilon: f64,
    pub mask: TimeMask,
    pub mode: SpatialMode,
}

impl Perturbation {
    pub fn none() -> Self {
        Self {
            epsilon: 0.0,
            mask: TimeMask::Constant(0.0),
            mode: SpatialMode::ScoreProportional,
        }
    }

    pub fn score_proportional(epsilon: f64, mask: TimeMask) -> Self {
        Self {
            epsilon,
            mask,
            mode: SpatialMode::ScoreProportional,
        }
    }

    /// The five reference error types of the 1D Gaussian study, all
    /// proportional to the exact score: `+1`, `-1`, sinusoid, `t < 0.95 T`
    /// and `t >= 0.99 T`.
    pub fn case(case: u8, epsilon: f64) -> Result<Self> {
        Ok(Self::score_proportional(epsilon, case_mask(case)?))
    }

    pub fn validate(&self, t_end: f64) -> Result<()> {
        if !self.epsilon.is_finite() {
            return Err(invalid("pert.epsilon", "must be finite"));
        }
        self.mask.validate(t_end)
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }
}

/// Mask for a numbered error case (1..=5).
pub fn case_mask(case: u8) -> Result<TimeMask> {
    Ok(match case {
        1 => TimeMask::Constant(1.0),
        2 => TimeMask::Constant(-1.0),
        3 => TimeMask::Sinusoid,
        4 => TimeMask::Before { c: 0.95 },
        5 => TimeMask::After { c: 0.99 },
        _ => return Err(invalid("case", format!("must be 1..=5, got {case}"))),
    })
}

/// Exact score plus the injected error, evaluated on the generative clock.
#[derive(Clone, Copy)]
pub struct PerturbedScore<'a> {
    pub base: &'a dyn ScoreModel,
    pub pert: Perturbation,
    pub t_end: f64,
}

impl<'a> PerturbedScore<'a> {
    pub fn new(base: &'a dyn ScoreModel, pert: Perturbation, t_end: f64) -> Result<Self> {
        pert.validate(t_end)?;
        Ok(Self { base, pert, t_end })
    }

    pub fn exact(base: &'a dyn ScoreModel, t_end: f64) -> Self {
        Self {
            base,
            pert: Perturbation::none(),
            t_end,
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Batch evaluation at generative time `t_gen`.
    pub fn eval_batch(&self, t_gen: f64, xs: &[f64], out: &mut [f64]) {
        self.base.score_batch(self.t_end - t_gen, xs, out);
        if self.pert.epsilon == 0.0 {
            return;
        }
        let m = self.pert.mask.value(t_gen, self.t_end);
        if m == 0.0 {
            return;
        }
        let em = self.pert.epsilon * m;
        match self.pert.mode {
            SpatialMode::ScoreProportional => out.iter_mut().for_each(|o| *o += em * *o),
            SpatialMode::Linear { gain } => {
                for (o, x) in out.iter_mut().zip(xs) {
                    *o += em * gain * x;
                }
            }
        }
    }
}

/// `grad log p_{T - t_gen}(x) + epsilon * E_{t_gen}(x)`.
pub fn perturbed_score(
    base: &dyn ScoreModel,
    pert: &Perturbation,
    t_end: f64,
    t_gen: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    if x.len() != base.dim() {
        return Err(LabError::DimensionMismatch {
            expected: base.dim(),
            got: x.len(),
        });
    }
    if !(0.0..=t_end).contains(&t_gen) {
        return Err(LabError::TimeOutOfDomain { t: t_gen, t_end });
    }
    let ps = PerturbedScore::new(base, *pert, t_end)?;
    let mut out = vec![0.0; x.len()];
    ps.eval_batch(t_gen, x, &mut out);
    Ok(out)
}

/// A score model read on the unit-`g` clock: forward unit time `u` maps to
/// original forward time `tau(u)`.
pub struct TimeRescaled<'a> {
    pub base: &'a dyn ScoreModel,
    pub rescaling: UnitTimeRescaling,
}

impl ScoreModel for TimeRescaled<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score(&self, t_fwd: f64, x: &[f64], out: &mut [f64]) {
        self.base.score(self.rescaling.tau(t_fwd), x, out)
    }

    fn score_batch(&self, t_fwd: f64, xs: &[f64], out: &mut [f64]) {
        self.base.score_batch(self.rescaling.tau(t_fwd), xs, out)
    }

    fn log_density(&self, t_fwd: f64, x: &[f64]) -> Option<f64> {
        self.base.log_density(self.rescaling.tau(t_fwd), x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn unit(t: f64) -> ScheduleParams {
        ScheduleParams::unit(t).unwrap()
    }

    fn fd_grad(m: &dyn ScoreModel, t: f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|j| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += h;
                xm[j] -= h;
                (m.log_density(t, &xp).unwrap() - m.log_density(t, &xm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gauss1d_examples() {
        let g = Gaussian1D::new(1.0, 4.0).unwrap();
        for t in [0.0, 0.3, 2.0] {
            assert!((g.score_scalar(t, 2.0) + 2.0).abs() < 1e-14);
        }
        let g = Gaussian1D::new(0.37, 4.0).unwrap();
        assert_eq!(g.score_scalar(1.1, 0.0), 0.0);
        let g = Gaussian1D::new(0.5, 4.0).unwrap();
        assert!((g.score_scalar(2f64.ln(), 1.0) + 1.6).abs() < 1e-14);
    }

    #[test]
    fn gauss1d_variance_bounds() {
        for s0 in [0.2, 0.7, 1.5, 3.0] {
            let g = Gaussian1D::new(s0, 5.0).unwrap();
            let (lo, hi) = if s0 < 1.0 { (s0 * s0, 1.0) } else { (1.0, s0 * s0) };
            for t in [0.01, 0.5, 2.0, 5.0] {
                let v = g.variance_at(t);
                assert!(v > lo && v < hi, "s0={s0} t={t} v={v}");
            }
        }
    }

    #[test]
    fn gmm_single_component_reduces_to_gaussian() {
        let p = ScheduleParams::new(0.1, 20.0, 1.0).unwrap();
        let m = GaussianMixture::new(vec![1.0], vec![vec![0.4, -1.0]], vec![vec![0.3, 2.0]], p)
            .unwrap();
        let x = [0.9, 0.2];
        let t = 0.35;
        let c = p.coefficients(t);
        let mut out = [0.0; 2];
        m.score(t, &x, &mut out);
        for j in 0..2 {
            let mean = c.mean_scale * m.component_mean(0)[j];
            let var = c.mean_scale.powi(2) * m.component_vars(0)[j] + c.varpi.powi(2);
            assert!((out[j] + (x[j] - mean) / var).abs() < 1e-12);
        }
    }

    #[test]
    fn gmm_symmetric_zero_at_origin() {
        let m = GaussianMixture::two_mode_1d(unit(4.0));
        let mut out = [1.0];
        for t in [0.0, 0.5, 3.0] {
            m.score(t, &[0.0], &mut out);
            assert!(out[0].abs() < 1e-15);
        }
    }

    #[test]
    fn gmm_two_mode_matches_fd_at_t0() {
        let m = GaussianMixture::two_mode_1d(unit(4.0));
        let mut out = [0.0];
        m.score(0.0, &[1.0], &mut out);
        let fd = fd_grad(&m, 0.0, &[1.0]);
        // at x = 1 the score is ~0; compare against the scale of the density curvature
        assert!((out[0] - fd[0]).abs() < 1e-6 * 100.0f64.max(out[0].abs()));
        m.score(0.0, &[1.03], &mut out);
        let fd = fd_grad(&m, 0.0, &[1.03]);
        assert!(((out[0] - fd[0]) / out[0]).abs() < 1e-6);
    }

    #[test]
    fn log_sum_exp_is_stable_for_tight_components() {
        // Far from both modes the naive densities underflow.
        let m = GaussianMixture::two_mode_1d(unit(4.0));
        let mut out = [0.0];
        m.score(0.0, &[40.0], &mut out);
        assert!((out[0] + (40.0 - 1.0) / 0.01).abs() < 1e-8);
        assert!(m.log_density(0.0, &[40.0]).unwrap().is_finite());
    }

    #[test]
    fn gmm_large_time_limit() {
        let m = GaussianMixture::four_mode_2d(unit(40.0));
        let mut out = [0.0; 2];
        for x in [[3.0, -2.0], [0.5, 0.1], [-2.1, 2.1]] {
            m.score(40.0, &x, &mut out);
            assert!((out[0] + x[0]).abs() < 1e-6 && (out[1] + x[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_matches_pointwise() {
        let m = GaussianMixture::four_mode_2d(unit(4.0));
        let xs = [0.3, -0.2, 1.1, 0.9, -1.5, 2.0];
        let mut batch = [0.0; 6];
        m.score_batch(0.7, &xs, &mut batch);
        for i in 0..3 {
            let mut o = [0.0; 2];
            m.score(0.7, &xs[2 * i..2 * i + 2], &mut o);
            assert_eq!(o, [batch[2 * i], batch[2 * i + 1]]);
        }
    }

    #[test]
    fn mixture_validation() {
        let p = unit(1.0);
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0]; 2], vec![vec![1.0]; 2], p)
            .is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]], p).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![], p).is_err());
    }

    #[test]
    fn gmm_sampler_moments() {
        let m = GaussianMixture::four_mode_2d(unit(4.0));
        let mut rng = LabRng::seed_from_u64(3);
        let n = 40_000;
        let mut s = [0.0; 2];
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            m.sample_into(&mut rng, &mut s);
            m1 += s[0];
            m2 += s[0] * s[0];
        }
        m1 /= n as f64;
        m2 /= n as f64;
        assert!(m1.abs() < 0.03);
        assert!((m2 - 1.0025).abs() < 0.03);
    }

    #[test]
    fn perturbed_score_examples() {
        let g = Gaussian1D::new(0.4, 2.0).unwrap();
        let x = [0.7];
        let exact = -0.7 / g.variance_at(2.0 - 0.6);
        // epsilon = 0 is bitwise exact, whatever the mask
        for mask in [TimeMask::Constant(5.0), TimeMask::Sinusoid, TimeMask::After { c: 0.1 }] {
            let s = perturbed_score(&g, &Perturbation::score_proportional(0.0, mask), 2.0, 0.6, &x)
                .unwrap();
            assert_eq!(s[0], exact);
        }
        let s = perturbed_score(&g, &Perturbation::case(1, 0.02).unwrap(), 2.0, 0.6, &x).unwrap();
        assert!((s[0] - 1.02 * exact).abs() < 1e-15);
        let t = 0.97 * 2.0;
        let s = perturbed_score(&g, &Perturbation::case(4, 0.02).unwrap(), 2.0, t, &x).unwrap();
        assert_eq!(s[0], -0.7 / g.variance_at(2.0 - t));
        let lin = Perturbation {
            epsilon: 0.1,
            mask: TimeMask::Constant(1.0),
            mode: SpatialMode::Linear { gain: -2.0 },
        };
        let s = perturbed_score(&g, &lin, 2.0, 0.6, &x).unwrap();
        assert!((s[0] - (exact - 0.1 * 2.0 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn mask_ranges_and_averages() {
        let t_end = 2.0;
        for case in 1..=5 {
            let m = case_mask(case).unwrap();
            for i in 0..=200 {
                let v = m.value(t_end * i as f64 / 200.0, t_end);
                assert!((-1.0..=1.0).contains(&v));
            }
        }
        let masks = [
            TimeMask::Sinusoid,
            TimeMask::Before { c: 0.95 },
            TimeMask::After { c: 0.995 },
            TimeMask::Pulse { start: 0.4, width: 0.04 },
        ];
        for m in masks {
            for (a, b) in [(0.0, 2.0), (0.38, 0.41), (1.89, 1.995), (1.98, 2.0)] {
                let n = 200_000;
                let riemann: f64 = (0..n)
                    .map(|i| m.value(a + (b - a) * (i as f64 + 0.5) / n as f64, t_end))
                    .sum::<f64>()
                    / n as f64;
                assert!((m.average(a, b, t_end) - riemann).abs() < 1e-4, "{m:?} on [{a},{b}]");
            }
        }
        assert!(case_mask(6).is_err());
    }

    #[test]
    fn time_rescaled_reads_original_clock() {
        use crate::schedule::{rescale_to_unit_g, HProfile};
        let p = ScheduleParams::new(0.1, 20.0, 1.0).unwrap();
        let g = Gaussian1D::with_schedule(0.3, p).unwrap();
        let r = rescale_to_unit_g(&p, &HProfile::ConstUnitTime(1.0)).unwrap();
        let wrapped = TimeRescaled {
            base: &g,
            rescaling: r,
        };
        let mut a = [0.0];
        let mut b = [0.0];
        wrapped.score(r.tau_inv(0.6), &[0.8], &mut a);
        g.score(0.6, &[0.8], &mut b);
        assert!((a[0] - b[0]).abs() < 1e-12);
    }
}
