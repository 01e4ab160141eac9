//! Reverse-SDE samplers (Euler-Maruyama and exponential integrator) and
//! closed-form forward sampling.
//!
//! Every trajectory owns a ChaCha8 stream keyed by `(seed, trajectory index)`,
//! so results do not depend on how the batch is split across threads.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, LabError, Result};
use crate::schedule::{HProfile, ScheduleParams};
use crate::scores::{DataSampler, PerturbedScore};
use crate::LabRng;

/// Trajectories per parallel work item.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
    ExponentialIntegrator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    StandardNormal,
    /// Exact `p_T`, drawn through the forward kernel from a data sampler.
    ExactPT,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub scheme: Scheme,
    pub steps: usize,
    /// Number of trajectories.
    pub batch: usize,
    pub seed: u64,
    /// `h = value * g`.
    pub h: HProfile,
    pub init: Init,
    /// Keep all intermediate states (memory `(steps + 1) * batch * dim`).
    pub keep_paths: bool,
}

impl SamplerConfig {
    pub fn new(scheme: Scheme, steps: usize, batch: usize, seed: u64, alpha: f64) -> Self {
        Self {
            scheme,
            steps,
            batch,
            seed,
            h: HProfile::AlphaOfG(alpha),
            init: Init::StandardNormal,
            keep_paths: false,
        }
    }

    pub fn with_init(self, init: Init) -> Self {
        Self { init, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps", "must be >= 1"));
        }
        if self.batch == 0 {
            return Err(invalid("batch", "must be >= 1"));
        }
        self.h.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub dim: usize,
    /// Row-major `batch x dim`.
    pub samples: Vec<f64>,
    /// Row-major `(steps + 1) x batch x dim`, when requested.
    pub paths: Option<Vec<f64>>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Coordinate `axis` of every sample.
    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.samples.iter().skip(axis).step_by(self.dim).copied().collect()
    }
}

/// Generator for trajectory `index` under `seed`.
pub fn trajectory_rng(seed: u64, index: usize) -> LabRng {
    let mut rng = LabRng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn fill_normal(rng: &mut LabRng, out: &mut [f64]) {
    for o in out {
        *o = rng.sample(StandardNormal);
    }
}

/// `mean_scale(t) X_0 + varpi(t) Z` for `n` draws of `X_0`.
pub fn simulate_forward_exact(
    data: &dyn DataSampler,
    params: &ScheduleParams,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate()?;
    let mu = params.mean_scale(t)?;
    let w = params.varpi(t)?;
    let d = data.dim();
    let mut out = vec![0.0; n * d];
    out.par_chunks_mut(CHUNK * d)
        .enumerate()
        .for_each(|(c, chunk)| {
            let mut z = vec![0.0; d];
            for (k, row) in chunk.chunks_exact_mut(d).enumerate() {
                let mut rng = trajectory_rng(seed, c * CHUNK + k);
                data.sample_into(&mut rng, row);
                if t > 0.0 {
                    fill_normal(&mut rng, &mut z);
                    for (r, zi) in row.iter_mut().zip(&z) {
                        *r = mu * *r + w * zi;
                    }
                }
            }
        });
    Ok(out)
}

/// Terminal states, optional paths and the first diverged trajectory of one chunk.
type ChunkOut = (Vec<f64>, Option<Vec<f64>>, Option<usize>);

/// Simulate with the scheme named in `cfg`.
pub fn simulate_reverse(
    score: &PerturbedScore,
    params: &ScheduleParams,
    cfg: &SamplerConfig,
    data: Option<&dyn DataSampler>,
) -> Result<TrajectoryBatch> {
    cfg.validate()?;
    params.validate()?;
    if (score.t_end - params.t_end).abs() > 1e-12 * params.t_end {
        return Err(invalid("T", "score and schedule disagree on the horizon"));
    }
    if cfg.init == Init::ExactPT {
        match data {
            None => return Err(invalid("init", "exact_pT initialization needs a data sampler")),
            Some(d) if d.dim() != score.dim() => {
                return Err(LabError::DimensionMismatch {
                    expected: score.dim(),
                    got: d.dim(),
                })
            }
            _ => {}
        }
    }
    let d = score.dim();
    let steps = cfg.steps;
    let delta = params.t_end / steps as f64;
    let alpha = cfg.h.value();
    let results: Vec<ChunkOut> = (0..cfg.batch)
        .step_by(CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let m = CHUNK.min(cfg.batch - start);
            let mut rngs: Vec<LabRng> = (0..m).map(|k| trajectory_rng(cfg.seed, start + k)).collect();
            let mut y = vec![0.0; m * d];
            let (mu_t, w_t) = {
                let c = params.coefficients(params.t_end);
                (c.mean_scale, c.varpi)
            };
            let mut z = vec![0.0; d];
            for (row, rng) in y.chunks_exact_mut(d).zip(rngs.iter_mut()) {
                match cfg.init {
                    Init::StandardNormal => fill_normal(rng, row),
                    Init::ExactPT => {
                        data.expect("checked above").sample_into(rng, row);
                        fill_normal(rng, &mut z);
                        for (r, zi) in row.iter_mut().zip(&z) {
                            *r = mu_t * *r + w_t * zi;
                        }
                    }
                }
            }
            let mut paths = cfg.keep_paths.then(|| {
                let mut p = Vec::with_capacity((steps + 1) * m * d);
                p.extend_from_slice(&y);
                p
            });
            let mut s = vec![0.0; m * d];
            let mut diverged = None;
            for k in 0..steps {
                let t = k as f64 * delta;
                score.eval_batch(t, &y, &mut s);
                let g = params.g_rev(t);
                let g2 = g * g;
                match cfg.scheme {
                    Scheme::EulerMaruyama => {
                        let h = alpha * g;
                        let (a, b) = (0.5 * g2 * delta, 0.5 * (g2 + h * h) * delta);
                        let noise = h * delta.sqrt();
                        for ((yr, sr), rng) in y.chunks_exact_mut(d).zip(s.chunks_exact(d)).zip(rngs.iter_mut()) {
                            for (yi, si) in yr.iter_mut().zip(sr) {
                                let zi: f64 = if noise != 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                                *yi += a * *yi + b * si + noise * zi;
                            }
                        }
                    }
                    Scheme::ExponentialIntegrator => {
                        let gamma = ei_gamma(params, t, delta);
                        let drift = (1.0 + alpha * alpha) * (gamma - 1.0);
                        let noise = (alpha * alpha * (gamma * gamma - 1.0)).sqrt();
                        for ((yr, sr), rng) in y.chunks_exact_mut(d).zip(s.chunks_exact(d)).zip(rngs.iter_mut()) {
                            for (yi, si) in yr.iter_mut().zip(sr) {
                                let zi: f64 = if noise != 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                                *yi = gamma * *yi + drift * si + noise * zi;
                            }
                        }
                    }
                }
                if y.iter().any(|v| !v.is_finite()) {
                    diverged = Some(k);
                    break;
                }
                if let Some(p) = paths.as_mut() {
                    p.extend_from_slice(&y);
                }
            }
            (y, paths, diverged)
        })
        .collect();

    if let Some(step) = results.iter().filter_map(|r| r.2).min() {
        return Err(LabError::Divergence { step });
    }
    let mut samples = Vec::with_capacity(cfg.batch * d);
    for r in &results {
        samples.extend_from_slice(&r.0);
    }
    let paths = cfg.keep_paths.then(|| {
        // interleave chunk-major paths into step-major layout
        let mut out = vec![0.0; (steps + 1) * cfg.batch * d];
        let mut offset = 0;
        for r in &results {
            let p = r.1.as_ref().expect("kept");
            let m = r.0.len();
            for k in 0..=steps {
                let dst = k * cfg.batch * d + offset;
                out[dst..dst + m].copy_from_slice(&p[k * m..(k + 1) * m]);
            }
            offset += m;
        }
        out
    });
    Ok(TrajectoryBatch {
        dim: d,
        samples,
        paths,
    })
}

/// `gamma_k = exp(delta (2 beta0 + (2 t_k - 2T + delta)(beta0 - beta1)) / 4)`.
pub fn ei_gamma(params: &ScheduleParams, t_k: f64, delta: f64) -> f64 {
    let (b0, b1, t_end) = (params.beta0, params.beta1, params.t_end);
    (delta * (2.0 * b0 + (2.0 * t_k - 2.0 * t_end + delta) * (b0 - b1)) / 4.0).exp()
}

/// Euler-Maruyama on a uniform generative-clock grid.
pub fn simulate_reverse_em(
    score: &PerturbedScore,
    params: &ScheduleParams,
    cfg: &SamplerConfig,
    data: Option<&dyn DataSampler>,
) -> Result<TrajectoryBatch> {
    let cfg = SamplerConfig {
        scheme: Scheme::EulerMaruyama,
        ..*cfg
    };
    simulate_reverse(score, params, &cfg, data)
}

/// Exponential integrator for `h = alpha g`.
pub fn simulate_reverse_ei(
    score: &PerturbedScore,
    params: &ScheduleParams,
    cfg: &SamplerConfig,
    data: Option<&dyn DataSampler>,
) -> Result<TrajectoryBatch> {
    let cfg = SamplerConfig {
        scheme: Scheme::ExponentialIntegrator,
        ..*cfg
    };
    simulate_reverse(score, params, &cfg, data)
}

/// Sample mean and unbiased variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}
