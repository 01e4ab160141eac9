//! Denoising score matching for a small ReLU MLP, weight schemes, relative
//! score-matching loss and the toy datasets.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{invalid, LabError, Result};
use crate::samplers::trajectory_rng;
use crate::schedule::ScheduleParams;
use crate::scores::{DataSampler, GaussianMixture, ScoreModel};
use crate::LabRng;

pub const HIDDEN: usize = 50;
const MAGIC: &[u8; 4] = b"DLMP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// `varpi^2`
    Default,
    /// `varpi^3`
    NoiseDriven,
    /// `varpi^2 / (0.25 + varpi)`
    DataDriven,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 3] = [Self::Default, Self::NoiseDriven, Self::DataDriven];

    pub fn of_varpi(self, w: f64) -> f64 {
        match self {
            Self::Default => w * w,
            Self::NoiseDriven => w * w * w,
            Self::DataDriven => w * w / (0.25 + w),
        }
    }

    pub fn at(self, params: &ScheduleParams, t: f64) -> Result<f64> {
        Ok(self.of_varpi(params.varpi(t)?))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::NoiseDriven => "noise",
            Self::DataDriven => "data",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "noise" | "noise_driven" => Ok(Self::NoiseDriven),
            "data" | "data_driven" => Ok(Self::DataDriven),
            other => Err(invalid("weight", format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay: f64,
    /// Lower end of the training time range, as a fraction of `T`.
    pub t_min_frac: f64,
    pub hidden: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 400,
            lr: 0.01,
            decay_every: 8_000,
            decay: 0.5,
            t_min_frac: 0.01,
            hidden: HIDDEN,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.hidden == 0 || self.decay_every == 0 {
            return Err(invalid("train", "steps, batch, hidden and decay_every must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid("lr", "need lr > 0 and decay in (0, 1]"));
        }
        if !(self.t_min_frac > 0.0 && self.t_min_frac < 1.0) {
            return Err(invalid("t_min", "must lie in (0, T)"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay.powi((step / self.decay_every) as i32)
    }
}

/// Conditional score of the forward kernel: `-(x_t - mean_scale x0) / varpi^2`.
pub fn dsm_target(params: &ScheduleParams, x0: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    if t <= 0.0 {
        return Err(LabError::SingularKernel { t });
    }
    if x0.len() != xt.len() {
        return Err(LabError::DimensionMismatch {
            expected: x0.len(),
            got: xt.len(),
        });
    }
    params.varpi(t)?; // domain check
    let c = params.coefficients(t);
    let v = c.varpi * c.varpi;
    if v == 0.0 {
        return Err(LabError::SingularKernel { t });
    }
    Ok(x0.iter().zip(xt).map(|(a, b)| -(b - c.mean_scale * a) / v).collect())
}

/// `[x, t/T] -> hidden -> ReLU -> hidden -> ReLU -> dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

struct Cache {
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    out: Array2<f64>,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

/// Products with transposed operands may come out column-major.
fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` init for weights and biases.
    pub fn new(data_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = LabRng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let k = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-k..k));
            let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-k..k));
            (w, b)
        };
        let (w1, b1) = layer(data_dim + 1, hidden);
        let (w2, b2) = layer(hidden, hidden);
        let (w3, b3) = layer(hidden, data_dim);
        Self { w1, b1, w2, b2, w3, b3 }
    }

    pub fn data_dim(&self) -> usize {
        self.w3.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Self {
            w1: z2(&self.w1),
            b1: z1(&self.b1),
            w2: z2(&self.w2),
            b2: z1(&self.b2),
            w3: z2(&self.w3),
            b3: z1(&self.b3),
        }
    }

    /// Parameters in file order.
    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        let Self { w1, b1, w2, b2, w3, b3 } = self;
        [
            w1.as_slice_mut().expect("standard layout"),
            b1.as_slice_mut().expect("standard layout"),
            w2.as_slice_mut().expect("standard layout"),
            b2.as_slice_mut().expect("standard layout"),
            w3.as_slice_mut().expect("standard layout"),
            b3.as_slice_mut().expect("standard layout"),
        ]
    }

    fn forward_cache(&self, input: ArrayView2<f64>) -> Cache {
        let z1 = input.dot(&self.w1) + &self.b1;
        let a1 = relu(&z1);
        let z2 = a1.dot(&self.w2) + &self.b2;
        let a2 = relu(&z2);
        let out = a2.dot(&self.w3) + &self.b3;
        Cache { z1, a1, z2, a2, out }
    }

    /// Rows of `input` are `[x, t/T]`.
    pub fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let a1 = relu(&(input.dot(&self.w1) + &self.b1));
        let a2 = relu(&(a1.dot(&self.w2) + &self.b2));
        a2.dot(&self.w3) + &self.b3
    }

    fn backward(&self, input: ArrayView2<f64>, c: &Cache, g_out: &Array2<f64>) -> Self {
        let gate = |g: Array2<f64>, z: &Array2<f64>| {
            let mut g = g;
            g.zip_mut_with(z, |gi, &zi| {
                if zi <= 0.0 {
                    *gi = 0.0
                }
            });
            g
        };
        let w3 = row_major(c.a2.t().dot(g_out));
        let b3 = g_out.sum_axis(Axis(0));
        let g2 = gate(g_out.dot(&self.w3.t()), &c.z2);
        let w2 = row_major(c.a1.t().dot(&g2));
        let b2 = g2.sum_axis(Axis(0));
        let g1 = gate(g2.dot(&self.w2.t()), &c.z1);
        let w1 = row_major(input.t().dot(&g1));
        let b1 = g1.sum_axis(Axis(0));
        Self { w1, b1, w2, b2, w3, b3 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.n_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.data_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden() as u32).to_le_bytes());
        for s in self.slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LabError::ModelFormat(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", word(4))));
        }
        let (d, h) = (word(8) as usize, word(12) as usize);
        if d == 0 || h == 0 || d > 1 << 16 || h > 1 << 16 {
            return Err(bad("implausible dimensions"));
        }
        let mut net = Self::new(d, h, 0);
        if bytes.len() != 16 + 8 * net.n_params() {
            return Err(bad(&format!(
                "expected {} bytes, found {}",
                16 + 8 * net.n_params(),
                bytes.len()
            )));
        }
        let mut values = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for s in net.slices_mut() {
            for v in s.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Trained network as a score model; `t_end` scales the time feature.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScore {
    pub net: Mlp,
    pub t_end: f64,
}

impl MlpScore {
    fn input(&self, t_fwd: f64, xs: &[f64]) -> Array2<f64> {
        let d = self.net.data_dim();
        let n = xs.len() / d;
        let tau = t_fwd / self.t_end;
        Array2::from_shape_fn((n, d + 1), |(i, j)| if j < d { xs[i * d + j] } else { tau })
    }
}

impl ScoreModel for MlpScore {
    fn dim(&self) -> usize {
        self.net.data_dim()
    }

    fn score(&self, t_fwd: f64, x: &[f64], out: &mut [f64]) {
        self.score_batch(t_fwd, x, out);
    }

    fn score_batch(&self, t_fwd: f64, xs: &[f64], out: &mut [f64]) {
        let y = self.net.forward(self.input(t_fwd, xs).view());
        for (o, v) in out.iter_mut().zip(y.iter()) {
            *o = *v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MlpScore,
    /// Weighted batch loss per step.
    pub loss: Vec<f64>,
}

struct Adam {
    m: Mlp,
    v: Mlp,
    t: i32,
}

/// Fit an [`MlpScore`] by weighted denoising score matching.
///
/// The network is initialized from `cfg.seed` and batches come from a
/// separate stream of the same seed, so runs that differ only in `weight`
/// share initialization and data.
pub fn train_dsm(
    data: &dyn DataSampler,
    params: &ScheduleParams,
    weight: WeightScheme,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    params.validate()?;
    let d = data.dim();
    let mut net = Mlp::new(d, cfg.hidden, cfg.seed);
    let mut rng = trajectory_rng(cfg.seed, 1);
    let t_end = params.t_end;
    let t_min = cfg.t_min_frac * t_end;
    let b = cfg.batch;
    let mut input = Array2::<f64>::zeros((b, d + 1));
    let mut target = Array2::<f64>::zeros((b, d));
    let mut w = vec![0.0; b];
    let mut x0 = vec![0.0; d];
    let mut adam = Adam {
        m: net.zeros_like(),
        v: net.zeros_like(),
        t: 0,
    };
    let mut loss = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        for i in 0..b {
            data.sample_into(&mut rng, &mut x0);
            let t = rng.random_range(t_min..=t_end);
            let c = params.coefficients(t);
            w[i] = weight.of_varpi(c.varpi);
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                input[[i, j]] = c.mean_scale * x0[j] + c.varpi * z;
                target[[i, j]] = -z / c.varpi;
            }
            input[[i, d]] = t / t_end;
        }
        let cache = net.forward_cache(input.view());
        let mut g = &cache.out - &target;
        let mut total = 0.0;
        for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
            total += w[i] * row.iter().map(|v| v * v).sum::<f64>();
            row.mapv_inplace(|v| 2.0 * w[i] * v / b as f64);
        }
        let l = total / b as f64;
        if !l.is_finite() {
            return Err(LabError::TrainingDiverged { step });
        }
        loss.push(l);
        let grad = net.backward(input.view(), &cache, &g);
        let lr = cfg.lr_at(step);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in net.slices_mut().into_iter().zip(grad.slices()) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                adam.t += 1;
                let (c1, c2) = (1.0 - B1.powi(adam.t), 1.0 - B2.powi(adam.t));
                let Adam { m, v, .. } = &mut adam;
                for (((p, g), m), v) in net
                    .slices_mut()
                    .into_iter()
                    .zip(grad.slices())
                    .zip(m.slices_mut())
                    .zip(v.slices_mut())
                {
                    for k in 0..p.len() {
                        m[k] = B1 * m[k] + (1.0 - B1) * g[k];
                        v[k] = B2 * v[k] + (1.0 - B2) * g[k] * g[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
    Ok(TrainOutput {
        model: MlpScore { net, t_end },
        loss,
    })
}

/// Per-time ratio of unweighted DSM losses of `a` over `b` on held-out data
/// `eval` (row-major), with shared noise. `None` where the denominator is
/// below `1e-12`.
pub fn relative_sml(
    a: &dyn ScoreModel,
    b: &dyn ScoreModel,
    params: &ScheduleParams,
    t_grid: &[f64],
    eval: &[f64],
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let d = a.dim();
    if b.dim() != d {
        return Err(LabError::DimensionMismatch {
            expected: d,
            got: b.dim(),
        });
    }
    if eval.is_empty() || !eval.len().is_multiple_of(d) {
        return Err(LabError::InsufficientData("empty or ragged eval set".into()));
    }
    let (la, lb) = sml_curves(&[a, b], params, t_grid, eval, seed)?
        .into_iter()
        .fold((Vec::new(), Vec::new()), |(mut la, mut lb), v| {
            la.push(v[0]);
            lb.push(v[1]);
            (la, lb)
        });
    Ok(la
        .iter()
        .zip(&lb)
        .map(|(x, y)| (*y >= 1e-12).then(|| x / y))
        .collect())
}

/// Unweighted DSM loss of each model at each time, common random numbers.
pub fn sml_curves(
    models: &[&dyn ScoreModel],
    params: &ScheduleParams,
    t_grid: &[f64],
    eval: &[f64],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = models.first().map(|m| m.dim()).unwrap_or(1);
    let n = eval.len() / d;
    let mut out = Vec::with_capacity(t_grid.len());
    for (k, &t) in t_grid.iter().enumerate() {
        if t <= 0.0 {
            return Err(LabError::SingularKernel { t });
        }
        params.varpi(t)?;
        let c = params.coefficients(t);
        let mut rng = trajectory_rng(seed, k);
        let z: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let xt: Vec<f64> = eval.iter().zip(&z).map(|(x, z)| c.mean_scale * x + c.varpi * z).collect();
        let mut s = vec![0.0; n * d];
        let row = models
            .iter()
            .map(|m| {
                m.score_batch(t, &xt, &mut s);
                s.iter()
                    .zip(&z)
                    .map(|(s, z)| (s + z / c.varpi).powi(2))
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// `(t sin t, t cos t)` with `t ~ U(3 pi/2, 9 pi/2)`, standardized per axis
/// with exact moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwissRoll {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for SwissRoll {
    fn default() -> Self {
        Self::new()
    }
}

impl SwissRoll {
    pub const T_LO: f64 = 1.5 * PI;
    pub const T_HI: f64 = 4.5 * PI;

    pub fn new() -> Self {
        let (a, b) = (Self::T_LO, Self::T_HI);
        let avg = |f: &dyn Fn(f64) -> f64| (f(b) - f(a)) / (b - a);
        // antiderivatives of t sin t, t cos t, t^2 sin^2 t, t^2 cos^2 t
        let ex = avg(&|t: f64| t.sin() - t * t.cos());
        let ey = avg(&|t: f64| t.cos() + t * t.sin());
        let odd = |t: f64| (t * t / 4.0 - 0.125) * (2.0 * t).sin() + t * (2.0 * t).cos() / 4.0;
        let exx = avg(&|t: f64| t.powi(3) / 6.0 - odd(t));
        let eyy = avg(&|t: f64| t.powi(3) / 6.0 + odd(t));
        Self {
            mean: [ex, ey],
            std: [(exx - ex * ex).sqrt(), (eyy - ey * ey).sqrt()],
        }
    }

    /// Raw, unstandardized point for parameter `t`.
    pub fn raw(t: f64) -> [f64; 2] {
        [t * t.sin(), t * t.cos()]
    }
}

impl DataSampler for SwissRoll {
    fn dim(&self) -> usize {
        2
    }
    fn sample_into(&self, rng: &mut LabRng, out: &mut [f64]) {
        let t = rng.random_range(Self::T_LO..Self::T_HI);
        let p = Self::raw(t);
        out[0] = (p[0] - self.mean[0]) / self.std[0];
        out[1] = (p[1] - self.mean[1]) / self.std[1];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    SwissRoll,
    Gmm1d,
    Gmm2d,
}

impl Dataset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "swissroll" => Ok(Self::SwissRoll),
            "gmm1d" => Ok(Self::Gmm1d),
            "gmm2d" => Ok(Self::Gmm2d),
            other => Err(invalid("dataset", format!("unknown dataset `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SwissRoll => "swissroll",
            Self::Gmm1d => "gmm1d",
            Self::Gmm2d => "gmm2d",
        }
    }

    /// Experiment schedule: standard VP on `[0, 1]` for the Swiss roll,
    /// unit `g` on `[0, 4]` for the mixtures.
    pub fn schedule(self) -> ScheduleParams {
        match self {
            Self::SwissRoll => ScheduleParams::standard_vp(),
            Self::Gmm1d | Self::Gmm2d => ScheduleParams::unit(4.0).expect("valid"),
        }
    }

    pub fn sampler(self) -> Box<dyn DataSampler> {
        match self {
            Self::SwissRoll => Box::new(SwissRoll::new()),
            Self::Gmm1d => Box::new(GaussianMixture::two_mode_1d(self.schedule())),
            Self::Gmm2d => Box::new(GaussianMixture::four_mode_2d(self.schedule())),
        }
    }
}

/// `n` draws from `data`, row-major, one stream per draw.
pub fn draw(data: &dyn DataSampler, n: usize, seed: u64) -> Vec<f64> {
    let d = data.dim();
    let mut out = vec![0.0; n * d];
    for (i, row) in out.chunks_exact_mut(d).enumerate() {
        data.sample_into(&mut trajectory_rng(seed, i), row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, QuadOptions};

    #[test]
    fn dsm_target_examples() {
        let p = ScheduleParams::standard_vp();
        let c = p.coefficients(0.4);
        let x0 = [0.3, -1.2];
        let mode = [c.mean_scale * x0[0], c.mean_scale * x0[1]];
        assert_eq!(dsm_target(&p, &x0, &mode, 0.4).unwrap(), vec![0.0, 0.0]);
        let far = dsm_target(&p, &[0.0], &[1.7], 1.0).unwrap();
        assert!((far[0] + 1.7).abs() < 1e-4);
        assert!(matches!(dsm_target(&p, &x0, &x0, 0.0), Err(LabError::SingularKernel { .. })));
        assert!(dsm_target(&p, &x0, &x0, 1.5).is_err());
    }

    #[test]
    fn dsm_target_matches_fd_gradient() {
        let p = ScheduleParams::standard_vp();
        let mut rng = LabRng::seed_from_u64(3);
        for _ in 0..100 {
            let t = rng.random_range(0.05..1.0);
            let x0 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let xt = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let c = p.coefficients(t);
            let logk = |x: &[f64]| {
                -x.iter()
                    .zip(&x0)
                    .map(|(a, b)| (a - c.mean_scale * b).powi(2))
                    .sum::<f64>()
                    / (2.0 * c.varpi * c.varpi)
            };
            let s = dsm_target(&p, &x0, &xt, t).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let (mut a, mut b) = (xt, xt);
                a[j] += h;
                b[j] -= h;
                let fd = (logk(&a) - logk(&b)) / (2.0 * h);
                assert!((fd - s[j]).abs() < 1e-6 * (1.0 + s[j].abs()), "{fd} vs {}", s[j]);
            }
        }
    }

    #[test]
    fn weight_ratios() {
        let p = ScheduleParams::standard_vp();
        for k in 1..=1000 {
            let t = k as f64 / 1000.0;
            let w = p.varpi(t).unwrap();
            let d = WeightScheme::Default.at(&p, t).unwrap();
            assert!((WeightScheme::NoiseDriven.at(&p, t).unwrap() / d - w).abs() < 1e-12);
            assert!((WeightScheme::DataDriven.at(&p, t).unwrap() / d - 1.0 / (0.25 + w)).abs() < 1e-12);
        }
        for s in WeightScheme::ALL {
            assert_eq!(s.at(&p, 0.0).unwrap(), 0.0);
            assert_eq!(WeightScheme::parse(s.name()).unwrap(), s);
        }
    }

    fn loss_of(net: &Mlp, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        (net.forward(x.view()) - y).mapv(|v| v * v).sum()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = Mlp::new(2, 7, 5);
        let mut rng = LabRng::seed_from_u64(8);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let cache = net.forward_cache(x.view());
        let g = 2.0 * (&cache.out - &y);
        let grad = net.backward(x.view(), &cache, &g);
        let gs: Vec<f64> = grad.slices().concat();
        let n = net.n_params();
        for _ in 0..40 {
            let k = rng.random_range(0..n);
            let h = 1e-6;
            let shift = |delta: f64| {
                let mut m = net.clone();
                let mut idx = k;
                for s in m.slices_mut() {
                    if idx < s.len() {
                        s[idx] += delta;
                        break;
                    }
                    idx -= s.len();
                }
                loss_of(&m, &x, &y)
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            assert!((fd - gs[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", gs[k]);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let net = Mlp::new(2, HIDDEN, 1);
        let bytes = net.to_bytes();
        assert_eq!(bytes.len(), 16 + 8 * net.n_params());
        assert_eq!(&bytes[..4], b"DLMP");
        assert_eq!(Mlp::from_bytes(&bytes).unwrap(), net);
        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Mlp::from_bytes(&wrong).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        net.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), net);
    }

    #[test]
    fn swiss_roll_moments() {
        let s = SwissRoll::new();
        let (a, b) = (SwissRoll::T_LO, SwissRoll::T_HI);
        let opts = QuadOptions::new(1e-13, 1e-13);
        let m = |f: &dyn Fn(f64) -> f64| integrate(f, a, b, &[], opts).unwrap().value / (b - a);
        let ex = m(&|t| SwissRoll::raw(t)[0]);
        let ey = m(&|t| SwissRoll::raw(t)[1]);
        let vx = m(&|t| (SwissRoll::raw(t)[0] - ex).powi(2));
        let vy = m(&|t| (SwissRoll::raw(t)[1] - ey).powi(2));
        assert!((s.mean[0] - ex).abs() < 1e-10 && (s.mean[1] - ey).abs() < 1e-10);
        assert!((s.std[0] - vx.sqrt()).abs() < 1e-10 && (s.std[1] - vy.sqrt()).abs() < 1e-10);
        let x = draw(&s, 50_000, 2);
        let (mx, vx) = crate::samplers::mean_var(&crate::metrics::marginal(&x, 2, 0));
        assert!(mx.abs() < 0.02 && (vx - 1.0).abs() < 0.03);
    }

    #[test]
    fn identical_models_ratio_one() {
        let p = ScheduleParams::standard_vp();
        let m = MlpScore {
            net: Mlp::new(2, 8, 3),
            t_end: 1.0,
        };
        let eval = draw(&SwissRoll::new(), 200, 9);
        let r = relative_sml(&m, &m, &p, &[0.1, 0.5, 1.0], &eval, 1).unwrap();
        assert!(r.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let p = ScheduleParams::standard_vp();
        let cfg = TrainConfig {
            steps: 300,
            batch: 64,
            hidden: 16,
            seed: 4,
            ..TrainConfig::default()
        };
        let data = SwissRoll::new();
        let a = train_dsm(&data, &p, WeightScheme::Default, &cfg).unwrap();
        let b = train_dsm(&data, &p, WeightScheme::Default, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss, b.loss);
        let head: f64 = a.loss[..50].iter().sum();
        let tail: f64 = a.loss[250..].iter().sum();
        assert!(tail < head);
        let sgd = TrainConfig {
            optimizer: Optimizer::Sgd,
            lr: 1e-3,
            ..cfg
        };
        assert!(train_dsm(&data, &p, WeightScheme::Default, &sgd).is_ok());
        let bad = TrainConfig { t_min_frac: 0.0, ..cfg };
        assert!(train_dsm(&data, &p, WeightScheme::Default, &bad).is_err());
    }

    #[test]
    fn one_dimensional_models_train_and_round_trip() {
        let ds = Dataset::Gmm1d;
        let cfg = TrainConfig {
            steps: 50,
            batch: 32,
            hidden: 8,
            seed: 2,
            ..TrainConfig::default()
        };
        let r = train_dsm(ds.sampler().as_ref(), &ds.schedule(), WeightScheme::NoiseDriven, &cfg).unwrap();
        let back = Mlp::from_bytes(&r.model.net.to_bytes()).unwrap();
        assert_eq!(back, r.model.net);
    }

    #[test]
    fn divergence_is_reported() {
        let p = ScheduleParams::standard_vp();
        let cfg = TrainConfig {
            steps: 200,
            batch: 16,
            hidden: 8,
            lr: 1e200,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let err = train_dsm(&SwissRoll::new(), &p, WeightScheme::Default, &cfg).unwrap_err();
        assert!(matches!(err, LabError::TrainingDiverged { .. }));
    }
}
