//! Sweeps of `L(h)` over `h^2` from the oracle, the PDE solver or Monte
//! Carlo, with decay and plateau fits and the two theoretical bounds.

use rayon::prelude::*;

use crate::error::{invalid, LabError, Result};
use crate::fokker_planck::{solve_leading_l, FpOptions, FpProblem, Grid1D, SUPPORT_CUTOFF, TAIL_LIMIT};
use crate::metrics::{exact_pmf, kl_pmf_counts, Binning, Histogram, DEFAULT_BINS};
use crate::oracle::{kl_exact, leading_l_exact, OracleSpec};
use crate::quadrature::{integrate, QuadOptions};
use crate::samplers::{simulate_forward_exact, simulate_reverse, Init, SamplerConfig, Scheme};
use crate::schedule::{HProfile, ScheduleParams};
use crate::scores::{case_mask, DataSampler, Gaussian1D, Perturbation, PerturbedScore, ScoreModel, TimeMask};

pub const DEFAULT_HSQ_GRID: [f64; 9] = [0.0, 0.5, 1.0, 2.0, 4.0, 7.0, 10.0, 14.0, 20.0];
/// Spearman correlation at or below which a sweep counts as an overall decay.
pub const DECAY_SPEARMAN: f64 = -0.8;
/// Smallest largest-`h^2` a plateau estimate accepts.
pub const PLATEAU_MIN_HSQ: f64 = 20.0;

/// 1D Gaussian data on the unit schedule with a masked score error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianProblem {
    pub sigma0: f64,
    pub t_end: f64,
    pub pert: Perturbation,
}

impl GaussianProblem {
    pub fn new(sigma0: f64, t_end: f64, pert: Perturbation) -> Result<Self> {
        Gaussian1D::new(sigma0, t_end)?;
        pert.validate(t_end)?;
        Ok(Self { sigma0, t_end, pert })
    }

    pub fn case(sigma0: f64, t_end: f64, case: u8, epsilon: f64) -> Result<Self> {
        Self::new(sigma0, t_end, Perturbation::score_proportional(epsilon, case_mask(case)?))
    }

    pub fn with_mask(self, mask: TimeMask) -> Self {
        Self {
            pert: Perturbation { mask, ..self.pert },
            ..self
        }
    }

    pub fn model(&self) -> Gaussian1D {
        Gaussian1D::new(self.sigma0, self.t_end).expect("validated")
    }

    fn h(hsq: f64) -> HProfile {
        HProfile::ConstUnitTime(hsq.sqrt())
    }

    pub fn oracle_spec(&self, hsq: f64) -> Result<OracleSpec> {
        OracleSpec::new(self.model(), Self::h(hsq), self.pert)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Oracle,
    Pde,
    Mc,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Oracle => "oracle",
            Source::Pde => "pde",
            Source::Mc => "mc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOptions {
    pub scheme: Scheme,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub bins: usize,
    /// Shared across all cells so every KL uses the same noise.
    pub eps_grid: Vec<f64>,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::EulerMaruyama,
            steps: 4000,
            batch: 100_000,
            seed: 0,
            bins: DEFAULT_BINS,
            eps_grid: vec![0.0, 0.05, 0.1, 0.15, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KlSource {
    /// Exact derivative of the closed form.
    Oracle,
    Pde { cells: usize, opts: FpOptions },
    Mc(McOptions),
}

impl KlSource {
    pub fn source(&self) -> Source {
        match self {
            KlSource::Oracle => Source::Oracle,
            KlSource::Pde { .. } => Source::Pde,
            KlSource::Mc(_) => Source::Mc,
        }
    }

    pub fn pde() -> Self {
        KlSource::Pde {
            cells: Grid1D::DEFAULT_CELLS,
            opts: FpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub hsq: f64,
    pub epsilon: Option<f64>,
    /// `"L"` or `"kl"`.
    pub metric: &'static str,
    pub value: Option<f64>,
    pub source: Source,
    /// Fit or solver diagnostics.
    pub note: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// `(hsq, value)` pairs of successful rows, ascending in `hsq`.
    pub fn series(&self, metric: &str, source: Source) -> (Vec<f64>, Vec<f64>) {
        self.rows
            .iter()
            .filter(|r| r.metric == metric && r.source == source && r.epsilon.is_none() == (metric == "L"))
            .filter_map(|r| r.value.map(|v| (r.hsq, v)))
            .unzip()
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.source, a.metric, a.epsilon.unwrap_or(-1.0), a.hsq)
                .partial_cmp(&(b.source, b.metric, b.epsilon.unwrap_or(-1.0), b.hsq))
                .expect("finite keys")
        });
    }
}

fn row(hsq: f64, epsilon: Option<f64>, metric: &'static str, source: Source, r: Result<(f64, String)>) -> SweepRow {
    let (value, note, error) = match r {
        Ok((v, _)) if !v.is_finite() => (None, String::new(), Some("non-finite value".to_string())),
        Ok((v, n)) => (Some(v), n, None),
        Err(e) => (None, String::new(), Some(e.to_string())),
    };
    SweepRow {
        hsq,
        epsilon,
        metric,
        value,
        source,
        note,
        error,
    }
}

/// Evaluate `L` (and KL where the source yields it) at every `h^2`.
/// Cell failures become rows with an error message.
pub fn sweep_h(problem: &GaussianProblem, hsq_grid: &[f64], source: &KlSource) -> Result<SweepResult> {
    if hsq_grid.is_empty() {
        return Err(invalid("hsq_grid", "must be nonempty"));
    }
    if hsq_grid.windows(2).any(|w| !(w[1] > w[0])) || hsq_grid.iter().any(|h| !(*h >= 0.0 && h.is_finite())) {
        return Err(invalid("hsq_grid", "must be finite, >= 0 and strictly ascending"));
    }
    let src = source.source();
    let rows: Vec<SweepRow> = hsq_grid
        .par_iter()
        .flat_map_iter(|&hsq| match source {
            KlSource::Oracle => {
                let spec = problem.oracle_spec(hsq);
                let eps = problem.pert.epsilon;
                vec![
                    row(hsq, None, "L", src, spec.clone().and_then(|s| leading_l_exact(&s)).map(|v| (v, String::new()))),
                    row(hsq, Some(eps), "kl", src, spec.and_then(|s| kl_exact(&s)).map(|v| (v, String::new()))),
                ]
            }
            KlSource::Pde { cells, opts } => vec![row(hsq, None, "L", src, pde_cell(problem, hsq, *cells, opts))],
            KlSource::Mc(mc) => mc_cell(problem, hsq, mc),
        })
        .collect();
    let mut out = SweepResult { rows };
    out.sort();
    Ok(out)
}

fn pde_cell(problem: &GaussianProblem, hsq: f64, cells: usize, opts: &FpOptions) -> Result<(f64, String)> {
    let model = problem.model();
    let fp = FpProblem::new(&model, model.schedule, GaussianProblem::h(hsq), problem.pert)?;
    let grid = Grid1D::new(Grid1D::for_scale(problem.sigma0).half_width, cells)?;
    let s = solve_leading_l(&fp, &grid, opts)?;
    Ok((
        s.value,
        format!("dt={:.3e} converged={} tail={:.2e}", s.dt, s.converged, s.tail),
    ))
}

/// Histogram KL of an EM/EI run against the exact `p_0`, with exact `p_T`
/// initialization. The range comes from a reference draw of `p_0`.
pub fn mc_kl(problem: &GaussianProblem, hsq: f64, epsilon: f64, mc: &McOptions) -> Result<f64> {
    let model = problem.model();
    let reference = simulate_forward_exact(&model, &model.schedule, 0.0, mc.batch, mc.seed ^ 0x5eed)?;
    let binning = Binning::from_reference(&reference, 1, mc.bins)?;
    let p = exact_pmf(&binning, &model)?;
    let samples = mc_samples(problem, hsq, epsilon, mc)?;
    let q = Histogram::from_samples(&binning, &samples)?;
    Ok(kl_pmf_counts(&p, &q.counts))
}

fn mc_samples(problem: &GaussianProblem, hsq: f64, epsilon: f64, mc: &McOptions) -> Result<Vec<f64>> {
    let model = problem.model();
    let ps = PerturbedScore::new(&model, problem.pert.with_epsilon(epsilon), problem.t_end)?;
    let cfg = SamplerConfig {
        h: GaussianProblem::h(hsq),
        ..SamplerConfig::new(mc.scheme, mc.steps, mc.batch, mc.seed, 0.0).with_init(Init::ExactPT)
    };
    Ok(simulate_reverse(&ps, &model.schedule, &cfg, Some(&model as &dyn DataSampler))?.samples)
}

fn mc_cell(problem: &GaussianProblem, hsq: f64, mc: &McOptions) -> Vec<SweepRow> {
    let kls: Vec<Result<f64>> = mc.eps_grid.iter().map(|&e| mc_kl(problem, hsq, e, mc)).collect();
    let mut rows: Vec<SweepRow> = mc
        .eps_grid
        .iter()
        .zip(&kls)
        .map(|(&e, k)| row(hsq, Some(e), "kl", Source::Mc, k.clone().map(|v| (v, String::new()))))
        .collect();
    let fit = kls
        .into_iter()
        .collect::<Result<Vec<f64>>>()
        .and_then(|k| fit_quadratic_with_floor(&mc.eps_grid, &k))
        .map(|(l, floor)| (l, format!("floor={floor:.3e}")));
    rows.push(row(hsq, None, "L", Source::Mc, fit));
    rows
}

/// Least squares of `kl = floor + L eps^2`; returns `(L, floor)`.
pub fn fit_quadratic_with_floor(eps: &[f64], kl: &[f64]) -> Result<(f64, f64)> {
    let x: Vec<f64> = eps.iter().map(|e| e * e).collect();
    let (slope, intercept, _) = linear_fit(&x, kl).ok_or_else(|| {
        LabError::InsufficientData("need two distinct epsilon values".into())
    })?;
    Ok((slope, intercept))
}

/// Ordinary least squares `y = a x + b`; `None` without two distinct `x`.
fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, Option<f64>)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = (syy > 0.0).then(|| 1.0 - ss_res / syy);
    Some((slope, intercept, r2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// Slope of `ln L` against `h^2`.
    pub slope: f64,
    pub intercept: f64,
    /// `None` when `ln L` is constant.
    pub r2: Option<f64>,
    pub used: usize,
    /// Points dropped for `L <= 0`.
    pub excluded: usize,
}

impl DecayFit {
    pub fn flagged(&self) -> bool {
        self.r2.is_none()
    }
}

/// Least squares of `ln L` on `h^2` over the positive values.
pub fn fit_decay(hsq: &[f64], l: &[f64]) -> Result<DecayFit> {
    if hsq.len() != l.len() {
        return Err(LabError::DimensionMismatch {
            expected: hsq.len(),
            got: l.len(),
        });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = hsq
        .iter()
        .zip(l)
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(h, v)| (*h, v.ln()))
        .unzip();
    if x.len() < 4 {
        return Err(LabError::InsufficientData(format!(
            "decay fit needs 4 positive values, got {}",
            x.len()
        )));
    }
    let (slope, intercept, r2) =
        linear_fit(&x, &y).ok_or_else(|| LabError::InsufficientData("all h^2 equal".into()))?;
    Ok(DecayFit {
        slope,
        intercept,
        r2,
        used: x.len(),
        excluded: hsq.len() - x.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub value: f64,
    /// Decay of `|L - value|` over the points below the top three.
    pub rate: Option<DecayFit>,
    pub unreliable: bool,
}

/// Mean of `L` at the three largest `h^2`; flags a tail that is not monotone
/// beyond `noise` (relative to the plateau value).
pub fn plateau_estimate(hsq: &[f64], l: &[f64], noise: f64) -> Result<Plateau> {
    if hsq.len() != l.len() || hsq.len() < 3 {
        return Err(LabError::InsufficientData("plateau needs at least 3 points".into()));
    }
    let mut pts: Vec<(f64, f64)> = hsq.iter().copied().zip(l.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.last().expect("nonempty").0 < PLATEAU_MIN_HSQ {
        return Err(invalid("hsq_grid", format!("plateau needs h^2 >= {PLATEAU_MIN_HSQ}")));
    }
    let n = pts.len();
    let value = pts[n - 3..].iter().map(|p| p.1).sum::<f64>() / 3.0;
    let tail = &pts[n.saturating_sub(4)..];
    let tol = noise * value.abs();
    let steps: Vec<f64> = tail
        .windows(2)
        .map(|w| w[1].1 - w[0].1)
        .filter(|d| d.abs() > tol)
        .collect();
    let unreliable = !value.is_finite()
        || steps.windows(2).any(|w| w[0].signum() != w[1].signum());
    let (hx, dev): (Vec<f64>, Vec<f64>) = pts[..n - 3].iter().map(|p| (p.0, (p.1 - value).abs())).unzip();
    let rate = fit_decay(&hx, &dev).ok();
    Ok(Plateau {
        value,
        rate,
        unreliable,
    })
}

/// Whether a metric falls overall as `x` grows: Spearman at or below
/// [`DECAY_SPEARMAN`]. `None` when the correlation is undefined.
pub fn overall_decay(x: &[f64], metric: &[f64]) -> Option<bool> {
    crate::metrics::spearman(x, metric).map(|r| r <= DECAY_SPEARMAN)
}

/// `(1 / (2 m0^2)) int (d/dx (p0 E))^2 / p0` on `grid`, for a 1D density with
/// score `model` at time zero and error field `field(x) = (E, E')`.
pub fn t_bound_1d(
    model: &dyn ScoreModel,
    field: &dyn Fn(f64) -> (f64, f64),
    m0: f64,
    grid: &Grid1D,
) -> Result<f64> {
    if model.dim() != 1 {
        return Err(LabError::DimensionMismatch {
            expected: 1,
            got: model.dim(),
        });
    }
    if !(m0 > 0.0) {
        return Err(invalid("m0", "must be > 0"));
    }
    let xs = grid.centers();
    let mut logp = vec![0.0; xs.len()];
    if !model.log_density_batch(0.0, &xs, &mut logp) {
        return Err(invalid("model", "needs a closed-form log-density"));
    }
    let pmax = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cut = pmax + SUPPORT_CUTOFF.ln();
    let (mut inside, mut outside) = (0.0, 0.0);
    let mut s = [0.0];
    for (&x, &lp) in xs.iter().zip(&logp) {
        model.score(0.0, &[x], &mut s);
        let (e, de) = field(x);
        let v = lp.exp() * (de + e * s[0]).powi(2);
        if lp > cut {
            inside += v;
        } else {
            outside += v;
        }
    }
    let total = (inside + outside) * grid.dx();
    if total > 0.0 && outside * grid.dx() > TAIL_LIMIT * total {
        return Err(LabError::UnreliableQuadrature {
            fraction: outside * grid.dx() / total,
        });
    }
    Ok(inside * grid.dx() / (2.0 * m0 * m0))
}

/// `x -> (E(x), div E(x))`.
pub type VectorField = dyn Fn(&[f64]) -> (Vec<f64>, f64) + Sync;

/// Monte Carlo version of [`t_bound_1d`] in any dimension:
/// `E_{p0}[(div E + E . grad log p0)^2] / (2 m0^2)` with its standard error.
/// `field(x)` returns `(E(x), div E(x))`.
pub fn t_bound_mc(
    data: &dyn DataSampler,
    model: &dyn ScoreModel,
    field: &VectorField,
    m0: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.dim() != model.dim() {
        return Err(LabError::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    if n < 2 || !(m0 > 0.0) {
        return Err(invalid("t_bound", "need n >= 2 and m0 > 0"));
    }
    let d = data.dim();
    let x = crate::score_match::draw(data, n, seed);
    let vals: Vec<f64> = x
        .par_chunks(d)
        .map(|row| {
            let mut s = vec![0.0; d];
            model.score(0.0, row, &mut s);
            let (e, div) = field(row);
            let dot: f64 = e.iter().zip(&s).map(|(a, b)| a * b).sum();
            (div + dot).powi(2)
        })
        .collect();
    let (mean, var) = crate::samplers::mean_var(&vals);
    let scale = 1.0 / (2.0 * m0 * m0);
    Ok((scale * mean, scale * (var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateBound {
    /// `h = 0` somewhere on the horizon: the bound is infinite.
    Uninformative,
    Curve {
        t: Vec<f64>,
        integrand: Vec<f64>,
        integral: f64,
    },
}

/// `(h^2 + g^2)^2 / (8 h^2) eps^2 E|E_t|^2` on the generative clock, with
/// `e_sq(t_gen) = E|E_t|^2`.
pub fn kl_rate_bound(
    params: &ScheduleParams,
    h: &HProfile,
    epsilon: f64,
    e_sq: &dyn Fn(f64) -> f64,
    n_grid: usize,
) -> Result<RateBound> {
    params.validate()?;
    h.validate()?;
    if n_grid < 2 {
        return Err(invalid("n_grid", "must be >= 2"));
    }
    if h.value() == 0.0 {
        return Ok(RateBound::Uninformative);
    }
    let f = |t: f64| {
        let g = params.g_rev(t);
        let hh = h.h_at(params, t);
        let (g2, h2) = (g * g, hh * hh);
        (h2 + g2).powi(2) / (8.0 * h2) * epsilon * epsilon * e_sq(t)
    };
    let t_end = params.t_end;
    let t: Vec<f64> = (0..n_grid).map(|k| t_end * k as f64 / (n_grid - 1) as f64).collect();
    let integrand = t.iter().map(|&s| f(s)).collect();
    let integral = integrate(f, 0.0, t_end, &[], QuadOptions::new(0.0, 1e-10))?.value;
    Ok(RateBound::Curve {
        t,
        integrand,
        integral,
    })
}
