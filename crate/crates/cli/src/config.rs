//! Experiment parameters. Each struct doubles as a subcommand's flags and as
//! the matching `[section]` of a run config, so both routes resolve the same way.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use difflab_core::leading_order::DEFAULT_HSQ_GRID;
use difflab_core::oracle::DEFAULT_EPS_GRID;
use difflab_core::scores::case_mask;
use difflab_core::TimeMask;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Em,
    Ei,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitArg {
    Normal,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightArg {
    Default,
    Noise,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetArg {
    Gaussian,
    Gmm1d,
    Gmm2d,
    Swissroll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceArg {
    Oracle,
    Pde,
    Mc,
}

/// Error-mask syntax: `const:<v>`, `sinusoid`, `before:<c>`, `after:<c>`,
/// `pulse:<start>,<width>` (times as fractions of `T`).
pub fn parse_mask(s: &str, t_end: f64) -> Result<TimeMask, CliError> {
    let bad = || CliError::Usage(format!("mask: cannot parse `{s}`"));
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let mask = match kind.trim() {
        "const" => TimeMask::Constant(num(arg)?),
        "sinusoid" => TimeMask::Sinusoid,
        "before" => TimeMask::Before { c: num(arg)? },
        "after" => TimeMask::After { c: num(arg)? },
        "pulse" => {
            let (a, w) = arg.split_once(',').ok_or_else(bad)?;
            TimeMask::Pulse {
                start: num(a)? * t_end,
                width: num(w)? * t_end,
            }
        }
        _ => return Err(bad()),
    };
    mask.validate(t_end).map_err(|e| CliError::Usage(format!("mask: {e}")))?;
    Ok(mask)
}

/// `mask` when given, else the numbered case.
pub fn resolve_mask(case: u8, mask: Option<&str>, t_end: f64) -> Result<TimeMask, CliError> {
    match mask {
        Some(m) => parse_mask(m, t_end),
        None => case_mask(case).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn check(ok: bool, field: &str, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{field}: {msg}")))
    }
}

fn check_list(v: &[f64], field: &str, min: f64) -> Result<(), CliError> {
    check(!v.is_empty(), field, "must be nonempty")?;
    check(v.iter().all(|x| x.is_finite() && *x >= min), field, &format!("values must be finite and >= {min}"))
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCfg {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2])]
    pub sigma0: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 5.0, 20.0])]
    pub hsq: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u8])]
    pub case: Vec<u8>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.02])]
    pub epsilon: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub t_end: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Exact)]
    pub init: InitArg,
    /// Epsilon values for the `L` regression.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EPS_GRID.to_vec())]
    pub eps_grid: Vec<f64>,
}

impl Default for OracleCfg {
    fn default() -> Self {
        Self {
            sigma0: vec![0.2],
            hsq: vec![0.0, 1.0, 5.0, 20.0],
            case: vec![1],
            epsilon: vec![0.02],
            t_end: 2.0,
            init: InitArg::Exact,
            eps_grid: DEFAULT_EPS_GRID.to_vec(),
        }
    }
}

impl OracleCfg {
    pub fn validate(&self) -> Result<(), CliError> {
        check_list(&self.sigma0, "sigma0", f64::MIN_POSITIVE)?;
        check_list(&self.hsq, "hsq", 0.0)?;
        check(!self.case.is_empty() && self.case.iter().all(|c| (1..=5).contains(c)), "case", "values must be 1..=5")?;
        check(!self.epsilon.is_empty() && self.epsilon.iter().all(|e| e.is_finite()), "epsilon", "must be finite")?;
        check(self.t_end > 0.0, "t_end", "must be > 0")
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpsolveCfg {
    #[arg(long, value_delimiter = ',', default_values_t = vec![5.0])]
    pub hsq: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub case: u8,
    /// Overrides the case mask, e.g. `after:0.995`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub sigma0: f64,
    #[arg(long, default_value_t = 2.0)]
    pub t_end: f64,
    #[arg(long = "grid-n", default_value_t = 1600)]
    #[serde(rename = "grid_n")]
    pub grid_n: usize,
    /// Half-width; defaults to `6 max(sigma0, 1) + 2`.
    #[arg(long = "grid-R")]
    #[serde(rename = "grid_r", skip_serializing_if = "Option::is_none")]
    pub grid_r: Option<f64>,
    /// Fixed step; omitted means refine until converged.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

impl Default for FpsolveCfg {
    fn default() -> Self {
        Self {
            hsq: vec![5.0],
            case: 1,
            mask: None,
            sigma0: 0.5,
            t_end: 2.0,
            grid_n: 1600,
            grid_r: None,
            dt: None,
        }
    }
}

impl FpsolveCfg {
    pub fn validate(&self) -> Result<(), CliError> {
        check_list(&self.hsq, "hsq", 0.0)?;
        check(self.sigma0 > 0.0, "sigma0", "must be > 0")?;
        check(self.t_end > 0.0, "t_end", "must be > 0")?;
        check(self.grid_r.is_none_or(|r| r > 0.0), "grid_r", "must be > 0")?;
        check(self.dt.is_none_or(|d| d > 0.0), "dt", "must be > 0")?;
        resolve_mask(self.case, self.mask.as_deref(), self.t_end).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepCfg {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.5])]
    pub sigma0: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub case: u8,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Epsilon of the `kl` rows (the `L` rows do not depend on it).
    #[arg(long, default_value_t = 0.02)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 2.0)]
    pub t_end: f64,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HSQ_GRID.to_vec())]
    pub hsq: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_enum, default_values_t = vec![SourceArg::Oracle, SourceArg::Pde])]
    pub sources: Vec<SourceArg>,
    #[arg(long, default_value_t = 1600)]
    pub pde_cells: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Em)]
    pub mc_scheme: SchemeArg,
    #[arg(long, default_value_t = 4000)]
    pub mc_steps: usize,
    #[arg(long, default_value_t = 100_000)]
    pub mc_batch: usize,
    #[arg(long, default_value_t = 0)]
    pub mc_seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.05, 0.1, 0.15, 0.2])]
    pub mc_eps_grid: Vec<f64>,
    /// Write SVG charts next to the CSVs.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub svg: bool,
}

impl Default for SweepCfg {
    fn default() -> Self {
        Self {
            sigma0: vec![0.2, 0.5],
            case: 1,
            mask: None,
            epsilon: 0.02,
            t_end: 2.0,
            hsq: DEFAULT_HSQ_GRID.to_vec(),
            sources: vec![SourceArg::Oracle, SourceArg::Pde],
            pde_cells: 1600,
            mc_scheme: SchemeArg::Em,
            mc_steps: 4000,
            mc_batch: 100_000,
            mc_seed: 0,
            mc_eps_grid: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            svg: true,
        }
    }
}

impl SweepCfg {
    pub fn validate(&self) -> Result<(), CliError> {
        check_list(&self.sigma0, "sigma0", f64::MIN_POSITIVE)?;
        check_list(&self.hsq, "hsq", 0.0)?;
        check(self.hsq.windows(2).all(|w| w[1] > w[0]), "hsq", "must be strictly ascending")?;
        check(!self.sources.is_empty(), "sources", "must be nonempty")?;
        check(self.t_end > 0.0, "t_end", "must be > 0")?;
        check(self.epsilon.is_finite(), "epsilon", "must be finite")?;
        check(self.mc_steps > 0 && self.mc_batch > 0, "mc_steps", "mc_steps and mc_batch must be >= 1")?;
        check(self.mc_eps_grid.len() >= 2, "mc_eps_grid", "needs at least two values")?;
        resolve_mask(self.case, self.mask.as_deref(), self.t_end).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleCfg {
    #[arg(long, value_enum, default_value_t = DatasetArg::Gaussian)]
    pub dataset: DatasetArg,
    /// Trained score file; the exact score is used when omitted.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Gaussian only.
    #[arg(long, default_value_t = 0.5)]
    pub sigma0: f64,
    /// Gaussian only; the other datasets fix their horizon.
    #[arg(long, default_value_t = 2.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1)]
    pub case: u8,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value_t = SchemeArg::Em)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 10_000)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `h = alpha g`.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Normal)]
    pub init: InitArg,
}

impl Default for SampleCfg {
    fn default() -> Self {
        Self {
            dataset: DatasetArg::Gaussian,
            model: None,
            sigma0: 0.5,
            t_end: 2.0,
            case: 1,
            mask: None,
            epsilon: 0.0,
            scheme: SchemeArg::Em,
            steps: 1000,
            batch: 10_000,
            seed: 0,
            alpha: 1.0,
            init: InitArg::Normal,
        }
    }
}

impl SampleCfg {
    pub fn validate(&self) -> Result<(), CliError> {
        check(self.steps > 0 && self.batch > 0, "steps", "steps and batch must be >= 1")?;
        check(self.alpha.is_finite() && self.alpha >= 0.0, "alpha", "must be >= 0")?;
        check(self.epsilon.is_finite(), "epsilon", "must be finite")?;
        check(self.sigma0 > 0.0 && self.t_end > 0.0, "sigma0", "sigma0 and t_end must be > 0")?;
        check(
            self.dataset != DatasetArg::Swissroll || self.model.is_some(),
            "model",
            "the Swiss roll has no exact score; pass a trained model",
        )
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    #[arg(long, value_enum, default_value_t = DatasetArg::Swissroll)]
    pub dataset: DatasetArg,
    #[arg(long, value_enum, default_value_t = WeightArg::Default)]
    pub weight: WeightArg,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 400)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 8000)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 0.5)]
    pub decay: f64,
    /// Lower end of the training time range as a fraction of `T`.
    #[arg(long, default_value_t = 0.01)]
    pub t_min_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model file to compare against in `sml.csv`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub sml_points: usize,
    #[arg(long, default_value_t = 5000)]
    pub sml_eval: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            dataset: DatasetArg::Swissroll,
            weight: WeightArg::Default,
            steps: 20_000,
            batch: 400,
            lr: 0.01,
            decay_every: 8000,
            decay: 0.5,
            t_min_frac: 0.01,
            seed: 0,
            baseline: None,
            sml_points: 100,
            sml_eval: 5000,
        }
    }
}

impl TrainCfg {
    pub fn validate(&self) -> Result<(), CliError> {
        check(self.dataset != DatasetArg::Gaussian, "dataset", "training supports swissroll, gmm1d, gmm2d")?;
        check(self.sml_points >= 2 && self.sml_eval >= 1, "sml_points", "need sml_points >= 2 and sml_eval >= 1")?;
        self.core()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn core(&self) -> difflab_core::TrainConfig {
        difflab_core::TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            decay_every: self.decay_every,
            decay: self.decay,
            t_min_frac: self.t_min_frac,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsCfg {
    /// Reference samples (CSV, header `x0,x1,...`); fixes the bin range.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    /// Directions for the sliced W1 in 2D.
    #[arg(long, default_value_t = 64)]
    pub n_proj: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Default for MetricsCfg {
    fn default() -> Self {
        Self {
            a: PathBuf::new(),
            b: PathBuf::new(),
            bins: 100,
            n_proj: 64,
            seed: 0,
        }
    }
}

impl MetricsCfg {
    pub fn validate(&self) -> Result<(), CliError> {
        check(!self.a.as_os_str().is_empty() && !self.b.as_os_str().is_empty(), "a", "both `a` and `b` are required")?;
        check(self.bins >= 1, "bins", "must be >= 1")?;
        check(self.n_proj >= 32, "n_proj", "must be >= 32")
    }

    /// Relative paths in a config file resolve against its directory.
    fn rebase(&mut self, dir: &Path) {
        for p in [&mut self.a, &mut self.b] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Oracle,
    Fpsolve,
    Sweep,
    Sample,
    Train,
    Metrics,
}

/// One experiment, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Job {
    Oracle(OracleCfg),
    Fpsolve(FpsolveCfg),
    Sweep(SweepCfg),
    Sample(SampleCfg),
    Train(TrainCfg),
    Metrics(MetricsCfg),
}

/// On-disk form: `experiment = "<name>"` plus an optional section of that name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Option<Experiment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpsolve: Option<FpsolveCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainCfg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsCfg>,
}

impl Job {
    pub fn experiment(&self) -> Experiment {
        match self {
            Job::Oracle(_) => Experiment::Oracle,
            Job::Fpsolve(_) => Experiment::Fpsolve,
            Job::Sweep(_) => Experiment::Sweep,
            Job::Sample(_) => Experiment::Sample,
            Job::Train(_) => Experiment::Train,
            Job::Metrics(_) => Experiment::Metrics,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            Job::Oracle(c) => c.validate(),
            Job::Fpsolve(c) => c.validate(),
            Job::Sweep(c) => c.validate(),
            Job::Sample(c) => c.validate(),
            Job::Train(c) => c.validate(),
            Job::Metrics(c) => c.validate(),
        }
    }

    /// Seeds that drive any randomness in the job.
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Job::Sweep(c) if c.sources.contains(&SourceArg::Mc) => vec![c.mc_seed],
            Job::Sample(c) => vec![c.seed],
            Job::Train(c) => vec![c.seed],
            Job::Metrics(c) => vec![c.seed],
            _ => vec![],
        }
    }

    pub fn to_config(&self) -> RunConfig {
        let mut rc = RunConfig {
            experiment: Some(self.experiment()),
            ..RunConfig::default()
        };
        match self.clone() {
            Job::Oracle(c) => rc.oracle = Some(c),
            Job::Fpsolve(c) => rc.fpsolve = Some(c),
            Job::Sweep(c) => rc.sweep = Some(c),
            Job::Sample(c) => rc.sample = Some(c),
            Job::Train(c) => rc.train = Some(c),
            Job::Metrics(c) => rc.metrics = Some(c),
        }
        rc
    }
}

impl RunConfig {
    /// Parse a config file, or the `[config]` table of a run manifest.
    pub fn load(path: &Path) -> Result<Job, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut job = Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if let Job::Metrics(m) = &mut job {
            m.rebase(path.parent().unwrap_or(Path::new(".")));
        }
        Ok(job)
    }

    pub fn parse(text: &str) -> Result<Job, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        if table.is_empty() {
            return Err("config is empty; expected `experiment = \"oracle|fpsolve|sweep|sample|train|metrics\"`".into());
        }
        let table = match table.get("config") {
            Some(toml::Value::Table(inner)) if table.contains_key("run") => inner.clone(),
            _ => table,
        };
        let rc: RunConfig = table.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        rc.into_job()
    }

    fn into_job(self) -> Result<Job, String> {
        let exp = self.experiment.ok_or("missing field `experiment`")?;
        let given: Vec<&str> = [
            ("oracle", self.oracle.is_some()),
            ("fpsolve", self.fpsolve.is_some()),
            ("sweep", self.sweep.is_some()),
            ("sample", self.sample.is_some()),
            ("train", self.train.is_some()),
            ("metrics", self.metrics.is_some()),
        ]
        .iter()
        .filter(|(_, on)| *on)
        .map(|(n, _)| *n)
        .collect();
        let name = toml::Value::try_from(exp).map_err(|e| e.to_string())?;
        let name = name.as_str().unwrap_or_default();
        if let Some(other) = given.iter().find(|g| **g != name) {
            return Err(format!("section [{other}] does not belong to experiment `{name}`"));
        }
        Ok(match exp {
            Experiment::Oracle => Job::Oracle(self.oracle.unwrap_or_default()),
            Experiment::Fpsolve => Job::Fpsolve(self.fpsolve.unwrap_or_default()),
            Experiment::Sweep => Job::Sweep(self.sweep.unwrap_or_default()),
            Experiment::Sample => Job::Sample(self.sample.unwrap_or_default()),
            Experiment::Train => Job::Train(self.train.unwrap_or_default()),
            Experiment::Metrics => Job::Metrics(self.metrics.unwrap_or_default()),
        })
    }
}
