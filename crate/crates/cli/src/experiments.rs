use std::path::Path;

use difflab_core::fokker_planck::{semigroup_check, solve_leading_l};
use difflab_core::io::{fmt_f64, read_samples, write_samples, write_table};
use difflab_core::leading_order::{fit_decay, plateau_estimate, sweep_h, McOptions, PLATEAU_MIN_HSQ};
use difflab_core::metrics::{
    hist_divergences_exact, hist_js, hist_kl, js_pmf, kl_pmf_counts, marginal, w1_1d,
    w1_sliced_2d, Binning, Histogram, Marginal, ReferenceMass, DEFAULT_BINS,
};
use difflab_core::oracle::{kl_exact, leading_l};
use difflab_core::samplers::{mean_var, simulate_reverse};
use difflab_core::score_match::{draw, relative_sml, sml_curves, train_dsm, Mlp, SwissRoll};
use difflab_core::{
    DataSampler, Dataset, FpOptions, FpProblem, Gaussian1D, GaussianMixture, GaussianProblem, Grid1D,
    HProfile, Init, KlSource, MlpScore, OracleInit, OracleSpec, Perturbation, PerturbedScore,
    SamplerConfig, ScheduleParams, Scheme, ScoreModel, Source, WeightScheme,
};

use crate::config::{
    resolve_mask, DatasetArg, FpsolveCfg, InitArg, Job, MetricsCfg, OracleCfg, SampleCfg, SchemeArg,
    SourceArg, SweepCfg, TrainCfg, WeightArg,
};
use crate::svg::{line_chart, Series};
use crate::CliError;

type Out = Result<(), CliError>;

fn run_err(e: difflab_core::LabError) -> CliError {
    CliError::Run(e.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn table(dir: &Path, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Out {
    write_table(&dir.join(name), header, rows).map_err(run_err)
}

pub fn execute(job: &Job, dir: &Path) -> Out {
    match job {
        Job::Oracle(c) => oracle(c, dir),
        Job::Fpsolve(c) => fpsolve(c, dir),
        Job::Sweep(c) => sweep(c, dir),
        Job::Sample(c) => sample(c, dir),
        Job::Train(c) => train(c, dir),
        Job::Metrics(c) => metrics(c, dir),
    }
}

fn oracle(c: &OracleCfg, dir: &Path) -> Out {
    let (mut kl_rows, mut l_rows) = (Vec::new(), Vec::new());
    for &sigma0 in &c.sigma0 {
        for &case in &c.case {
            for &hsq in &c.hsq {
                let spec = OracleSpec::unit_case(sigma0, c.t_end, hsq, case, 0.0).map(|s| OracleSpec {
                    init: match c.init {
                        InitArg::Exact => OracleInit::ExactPT,
                        InitArg::Normal => OracleInit::StandardNormal,
                    },
                    ..s
                });
                let key = [fmt_f64(hsq), fmt_f64(sigma0), case.to_string()];
                for &eps in &c.epsilon {
                    let kl = spec.clone().and_then(|s| kl_exact(&s.with_epsilon(eps)));
                    let mut row = key.to_vec();
                    row.extend([fmt_f64(eps), opt(kl.clone().ok()), kl.err().map(|e| e.to_string()).unwrap_or_default()]);
                    kl_rows.push(row);
                }
                let fit = spec.and_then(|s| leading_l(&s, &c.eps_grid));
                let mut row = key.to_vec();
                match fit {
                    Ok(f) => row.extend([fmt_f64(f.value), fmt_f64(f.r2), f.warning.unwrap_or_default()]),
                    Err(e) => row.extend([String::new(), String::new(), e.to_string()]),
                }
                l_rows.push(row);
            }
        }
    }
    table(dir, "oracle_kl.csv", &["hsq", "sigma0", "case", "epsilon", "kl", "error"], kl_rows)?;
    table(dir, "oracle_L.csv", &["hsq", "sigma0", "case", "L", "r2", "error"], l_rows)
}

fn fpsolve(c: &FpsolveCfg, dir: &Path) -> Out {
    let mask = resolve_mask(c.case, c.mask.as_deref(), c.t_end)?;
    let model = Gaussian1D::new(c.sigma0, c.t_end).map_err(run_err)?;
    let half_width = c.grid_r.unwrap_or(Grid1D::for_scale(c.sigma0).half_width);
    let grid = Grid1D::new(half_width, c.grid_n).map_err(|e| CliError::Usage(e.to_string()))?;
    let opts = FpOptions {
        dt: c.dt,
        ..FpOptions::default()
    };
    let rows = c
        .hsq
        .iter()
        .map(|&hsq| {
            let cell = || -> difflab_core::Result<Vec<String>> {
                let fp = FpProblem::new(
                    &model,
                    model.schedule,
                    HProfile::ConstUnitTime(hsq.sqrt()),
                    Perturbation::score_proportional(1.0, mask),
                )?;
                let s = solve_leading_l(&fp, &grid, &opts)?;
                let p_t = fp.density(0.0, &grid.centers());
                let defect = semigroup_check(&fp, &grid, &p_t, (0.0, 0.5 * c.t_end, c.t_end), s.dt)?;
                Ok(vec![
                    fmt_f64(s.value),
                    fmt_f64(s.tail),
                    fmt_f64(defect),
                    fmt_f64(s.dt),
                    s.converged.to_string(),
                    fmt_f64(s.mass),
                    String::new(),
                ])
            };
            let mut row = vec![fmt_f64(hsq)];
            match cell() {
                Ok(r) => row.extend(r),
                Err(e) => row.extend((0..6).map(|_| String::new()).chain([e.to_string()])),
            }
            row
        })
        .collect();
    table(
        dir,
        "fpsolve.csv",
        &["hsq", "L", "tail_mass", "defect", "dt", "converged", "v_mass", "error"],
        rows,
    )
}

fn sweep(c: &SweepCfg, dir: &Path) -> Out {
    let mask = resolve_mask(c.case, c.mask.as_deref(), c.t_end)?;
    let mask_name = c.mask.clone().unwrap_or_else(|| format!("case{}", c.case));
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut chart = Vec::new();
    for &sigma0 in &c.sigma0 {
        let problem = GaussianProblem::new(sigma0, c.t_end, Perturbation::score_proportional(c.epsilon, mask))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        for src in &c.sources {
            let source = match src {
                SourceArg::Oracle => KlSource::Oracle,
                SourceArg::Pde => KlSource::Pde {
                    cells: c.pde_cells,
                    opts: FpOptions::default(),
                },
                SourceArg::Mc => KlSource::Mc(McOptions {
                    scheme: scheme(c.mc_scheme),
                    steps: c.mc_steps,
                    batch: c.mc_batch,
                    seed: c.mc_seed,
                    bins: DEFAULT_BINS,
                    eps_grid: c.mc_eps_grid.clone(),
                }),
            };
            let result = sweep_h(&problem, &c.hsq, &source).map_err(run_err)?;
            for r in &result.rows {
                rows.push(vec![
                    r.source.name().to_string(),
                    fmt_f64(sigma0),
                    mask_name.clone(),
                    fmt_f64(r.hsq),
                    opt(r.epsilon),
                    r.metric.to_string(),
                    opt(r.value),
                    r.note.clone(),
                    r.error.clone().unwrap_or_default(),
                ]);
            }
            let (h, l) = result.series("L", source.source());
            fits.push(fit_row(source.source(), sigma0, &mask_name, &h, &l));
            chart.push(Series {
                label: format!("{} s0={sigma0}", source.source().name()),
                points: h.into_iter().zip(l).collect(),
            });
        }
    }
    table(
        dir,
        "sweep.csv",
        &["source", "sigma0", "mask", "hsq", "epsilon", "metric", "value", "note", "error"],
        rows,
    )?;
    table(
        dir,
        "fits.csv",
        &[
            "source", "sigma0", "mask", "slope", "intercept", "r2", "used", "excluded", "plateau",
            "plateau_unreliable", "error",
        ],
        fits,
    )?;
    if c.svg {
        let svg = line_chart(&format!("L(h) for {mask_name}"), "h^2", "L", &chart, true);
        std::fs::write(dir.join("sweep_L.svg"), svg).map_err(|e| CliError::Run(e.to_string()))?;
    }
    Ok(())
}

fn fit_row(source: Source, sigma0: f64, mask: &str, h: &[f64], l: &[f64]) -> Vec<String> {
    let mut row = vec![source.name().to_string(), fmt_f64(sigma0), mask.to_string()];
    let mut errors = Vec::new();
    match fit_decay(h, l) {
        Ok(f) => row.extend([
            fmt_f64(f.slope),
            fmt_f64(f.intercept),
            opt(f.r2),
            f.used.to_string(),
            f.excluded.to_string(),
        ]),
        Err(e) => {
            row.extend((0..5).map(|_| String::new()));
            errors.push(e.to_string());
        }
    }
    if h.last().is_some_and(|x| *x >= PLATEAU_MIN_HSQ) {
        match plateau_estimate(h, l, 1e-6) {
            Ok(p) => row.extend([fmt_f64(p.value), p.unreliable.to_string()]),
            Err(e) => {
                row.extend([String::new(), String::new()]);
                errors.push(e.to_string());
            }
        }
    } else {
        row.extend([String::new(), String::new()]);
    }
    row.push(errors.join("; "));
    row
}

fn scheme(s: SchemeArg) -> Scheme {
    match s {
        SchemeArg::Em => Scheme::EulerMaruyama,
        SchemeArg::Ei => Scheme::ExponentialIntegrator,
    }
}

/// Exact score (or `None` for the Swiss roll), data sampler and schedule.
enum Target {
    Gaussian(Gaussian1D),
    Mixture(GaussianMixture),
    Roll(SwissRoll),
}

impl Target {
    fn new(dataset: DatasetArg, sigma0: f64, t_end: f64) -> Result<Self, CliError> {
        Ok(match dataset {
            DatasetArg::Gaussian => Target::Gaussian(Gaussian1D::new(sigma0, t_end).map_err(|e| CliError::Usage(e.to_string()))?),
            DatasetArg::Gmm1d => Target::Mixture(GaussianMixture::two_mode_1d(Dataset::Gmm1d.schedule())),
            DatasetArg::Gmm2d => Target::Mixture(GaussianMixture::four_mode_2d(Dataset::Gmm2d.schedule())),
            DatasetArg::Swissroll => Target::Roll(SwissRoll::new()),
        })
    }

    fn schedule(&self) -> ScheduleParams {
        match self {
            Target::Gaussian(g) => g.schedule,
            Target::Mixture(m) => m.schedule,
            Target::Roll(_) => Dataset::SwissRoll.schedule(),
        }
    }

    fn data(&self) -> &dyn DataSampler {
        match self {
            Target::Gaussian(g) => g,
            Target::Mixture(m) => m,
            Target::Roll(r) => r,
        }
    }

    fn exact_score(&self) -> Option<&dyn ScoreModel> {
        match self {
            Target::Gaussian(g) => Some(g),
            Target::Mixture(m) => Some(m),
            Target::Roll(_) => None,
        }
    }
}

fn load_model(path: &Path, dim: usize, t_end: f64) -> Result<MlpScore, CliError> {
    let net = Mlp::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if net.data_dim() != dim {
        return Err(CliError::Usage(format!(
            "{}: model dimension {} does not match the dataset ({dim})",
            path.display(),
            net.data_dim()
        )));
    }
    Ok(MlpScore { net, t_end })
}

fn sample(c: &SampleCfg, dir: &Path) -> Out {
    let target = Target::new(c.dataset, c.sigma0, c.t_end)?;
    let params = target.schedule();
    let data = target.data();
    let trained = c
        .model
        .as_deref()
        .map(|p| load_model(p, data.dim(), params.t_end))
        .transpose()?;
    let base: &dyn ScoreModel = match (&trained, target.exact_score()) {
        (Some(m), _) => m,
        (None, Some(s)) => s,
        (None, None) => return Err(CliError::Usage("model: required for this dataset".into())),
    };
    let mask = resolve_mask(c.case, c.mask.as_deref(), params.t_end)?;
    let ps = PerturbedScore::new(base, Perturbation::score_proportional(c.epsilon, mask), params.t_end)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = SamplerConfig::new(scheme(c.scheme), c.steps, c.batch, c.seed, c.alpha).with_init(match c.init {
        InitArg::Normal => Init::StandardNormal,
        InitArg::Exact => Init::ExactPT,
    });
    let out = simulate_reverse(&ps, &params, &cfg, Some(data)).map_err(run_err)?;
    write_samples(&dir.join("samples.csv"), &out.samples, out.dim).map_err(run_err)?;

    let d = out.dim;
    let reference = draw(data, c.batch, c.seed ^ 0x5eed);
    let mut rows = Vec::new();
    for axis in 0..d {
        let x = out.axis(axis);
        let (m, v) = mean_var(&x);
        let exact: Option<(f64, f64)> = match &target {
            Target::Gaussian(g) => exact_divergences(g, &reference, &x),
            Target::Mixture(mix) => exact_divergences(&Marginal { mixture: mix, axis }, &marginal(&reference, d, axis), &x),
            Target::Roll(_) => None,
        };
        let w1 = w1_1d(&marginal(&reference, d, axis), &x).map_err(run_err)?;
        rows.push(vec![
            axis.to_string(),
            fmt_f64(m),
            fmt_f64(v),
            opt(exact.map(|e| e.0)),
            opt(exact.map(|e| e.1)),
            fmt_f64(w1),
        ]);
    }
    table(dir, "summary.csv", &["axis", "mean", "var", "kl_exact", "js_exact", "w1_reference"], rows)
}

fn exact_divergences(reference: &dyn ReferenceMass, range: &[f64], x: &[f64]) -> Option<(f64, f64)> {
    let b = Binning::from_reference(range, 1, DEFAULT_BINS).ok()?;
    hist_divergences_exact(reference, &b, x).ok()
}

fn train(c: &TrainCfg, dir: &Path) -> Out {
    let target = Target::new(c.dataset, 1.0, 1.0)?;
    let params = target.schedule();
    let data = target.data();
    let weight = match c.weight {
        WeightArg::Default => WeightScheme::Default,
        WeightArg::Noise => WeightScheme::NoiseDriven,
        WeightArg::Data => WeightScheme::DataDriven,
    };
    let baseline = c
        .baseline
        .as_deref()
        .map(|p| load_model(p, data.dim(), params.t_end))
        .transpose()?;
    let out = train_dsm(data, &params, weight, &c.core()).map_err(run_err)?;
    out.model.net.save(&dir.join("model.bin")).map_err(run_err)?;
    table(
        dir,
        "loss.csv",
        &["step", "loss"],
        out.loss
            .iter()
            .enumerate()
            .map(|(k, l)| vec![k.to_string(), fmt_f64(*l)])
            .collect(),
    )?;

    let t_min = c.t_min_frac * params.t_end;
    let n = c.sml_points;
    let t_grid: Vec<f64> = (0..n)
        .map(|k| t_min + (params.t_end - t_min) * k as f64 / (n - 1) as f64)
        .collect();
    let eval = draw(data, c.sml_eval, c.seed ^ 0xe7a1);
    let sml_seed = c.seed ^ 0x5317;
    let own = sml_curves(&[&out.model], &params, &t_grid, &eval, sml_seed).map_err(run_err)?;
    let rows: Vec<Vec<String>> = match &baseline {
        Some(b) => {
            let base = sml_curves(&[b], &params, &t_grid, &eval, sml_seed).map_err(run_err)?;
            let rel = relative_sml(&out.model, b, &params, &t_grid, &eval, sml_seed).map_err(run_err)?;
            t_grid
                .iter()
                .zip(own.iter().zip(&base))
                .zip(rel)
                .map(|((t, (a, b)), r)| vec![fmt_f64(*t), fmt_f64(a[0]), fmt_f64(b[0]), opt(r)])
                .collect()
        }
        None => t_grid.iter().zip(&own).map(|(t, a)| vec![fmt_f64(*t), fmt_f64(a[0])]).collect(),
    };
    let header: &[&str] = if baseline.is_some() {
        &["t", "sml", "baseline_sml", "relative"]
    } else {
        &["t", "sml"]
    };
    table(dir, "sml.csv", header, rows)
}

fn metrics(c: &MetricsCfg, dir: &Path) -> Out {
    let load = |p: &Path| read_samples(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())));
    let (a, da) = load(&c.a)?;
    let (b, db) = load(&c.b)?;
    if da != db {
        return Err(CliError::Usage(format!("dimension mismatch: {da} vs {db} columns")));
    }
    let d = da;
    let mut header = vec!["kl".to_string(), "js".to_string(), "w1".to_string()];
    let mut row = vec![
        fmt_f64(hist_kl(&a, &b, d, c.bins).map_err(run_err)?),
        fmt_f64(hist_js(&a, &b, d, c.bins).map_err(run_err)?),
        fmt_f64(match d {
            1 => w1_1d(&a, &b),
            2 => w1_sliced_2d(&a, &b, c.n_proj, c.seed),
            _ => return Err(CliError::Usage(format!("metrics support 1 or 2 columns, got {d}"))),
        }
        .map_err(run_err)?),
    ];
    if d == 2 {
        for axis in 0..2 {
            let (ma, mb) = (marginal(&a, 2, axis), marginal(&b, 2, axis));
            let bins = Binning::from_reference(&ma, 1, c.bins).map_err(run_err)?;
            let pa = Histogram::from_samples(&bins, &ma).map_err(run_err)?.pmf();
            let hb = Histogram::from_samples(&bins, &mb).map_err(run_err)?;
            header.extend([format!("kl_x{axis}"), format!("js_x{axis}"), format!("w1_x{axis}")]);
            row.extend([
                fmt_f64(kl_pmf_counts(&pa, &hb.counts)),
                fmt_f64(js_pmf(&pa, &hb.pmf())),
                fmt_f64(w1_1d(&ma, &mb).map_err(run_err)?),
            ]);
        }
    }
    table(dir, "metrics.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), vec![row])
}
