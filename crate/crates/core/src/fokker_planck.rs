//! 1D finite-volume Fokker-Planck solver for the first-order density
//! perturbation `v_t` of the generative process and the leading-order
//! coefficient `L = 1/2 int v_T^2 / p_0`.
//!
//! The generative density obeys `dq/dt = -d/dx (b q - D dq/dx)` with
//! `b = g^2/2 x + (g^2 + h^2)/2 s_t(x)` and `D = h^2/2`. Fluxes are of
//! Scharfetter-Gummel (Chang-Cooper) type at cell faces, zero at the domain
//! ends, so every discrete operator conserves mass exactly. When `D = 0` the
//! face flux is the central average. Time stepping is BDF2 started by one
//! backward-Euler step.

use crate::error::{invalid, LabError, Result};
use crate::schedule::{HProfile, ScheduleParams};
use crate::scores::{Perturbation, ScoreModel, SpatialMode};

/// Edge-cell mass of the reference density above which the domain is rejected.
pub const LEAKAGE_LIMIT: f64 = 1e-6;
/// Cells with `p_0 <= SUPPORT_CUTOFF * max p_0` are excluded from `L`.
pub const SUPPORT_CUTOFF: f64 = 1e-12;
/// Excluded tail above this fraction of `L` makes the quadrature unreliable.
pub const TAIL_LIMIT: f64 = 0.01;

/// Cell-centered grid on `[-R, R]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub half_width: f64,
    pub n: usize,
}

impl Grid1D {
    pub const MIN_CELLS: usize = 400;
    pub const DEFAULT_CELLS: usize = 1600;

    pub fn new(half_width: f64, n: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(invalid("grid.R", format!("must be > 0, got {half_width}")));
        }
        if n < Self::MIN_CELLS {
            return Err(invalid(
                "grid.n",
                format!("need at least {} cells, got {n}", Self::MIN_CELLS),
            ));
        }
        Ok(Self { half_width, n })
    }

    /// `R = 6 max(scale, 1) + 2` with the default cell count.
    pub fn for_scale(scale: f64) -> Self {
        Self {
            half_width: 6.0 * scale.max(1.0) + 2.0,
            n: Self::DEFAULT_CELLS,
        }
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n)
            .map(|i| -self.half_width + (i as f64 + 0.5) * dx)
            .collect()
    }

    /// Interior faces `x_{1}, ..., x_{n-1}`.
    fn interior_faces(&self) -> Vec<f64> {
        let dx = self.dx();
        (1..self.n).map(|j| -self.half_width + j as f64 * dx).collect()
    }

    /// Sum of `f` over cells times `dx`.
    pub fn integral(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() * self.dx()
    }
}

/// Generative dynamics around an exact 1D score.
#[derive(Clone, Copy)]
pub struct FpProblem<'a> {
    /// Exact score with closed-form log-density, in forward time.
    pub model: &'a dyn ScoreModel,
    pub schedule: ScheduleParams,
    pub h: HProfile,
    /// Error field; `epsilon` is ignored (the equation is linear in it).
    pub pert: Perturbation,
}

impl<'a> FpProblem<'a> {
    pub fn new(
        model: &'a dyn ScoreModel,
        schedule: ScheduleParams,
        h: HProfile,
        pert: Perturbation,
    ) -> Result<Self> {
        if model.dim() != 1 {
            return Err(LabError::DimensionMismatch {
                expected: 1,
                got: model.dim(),
            });
        }
        if model.log_density(0.0, &[0.0]).is_none() {
            return Err(invalid("model", "needs a closed-form log-density"));
        }
        schedule.validate()?;
        h.validate()?;
        pert.validate(schedule.t_end)?;
        Ok(Self {
            model,
            schedule,
            h,
            pert,
        })
    }

    fn t_end(&self) -> f64 {
        self.schedule.t_end
    }

    /// Largest `h^2` over the horizon (`beta` is affine, so an endpoint).
    pub fn max_hsq(&self) -> f64 {
        let a = self.h.h_at(&self.schedule, 0.0);
        let b = self.h.h_at(&self.schedule, self.t_end());
        (a * a).max(b * b)
    }

    /// Reference step `1e-3 T / (1 + h^2)`.
    pub fn default_dt(&self) -> f64 {
        1e-3 * self.t_end() / (1.0 + self.max_hsq())
    }

    /// First step tried by [`solve_leading_l`]. BDF2 is accurate well above
    /// the reference step; refinement then halves it.
    pub fn start_dt(&self) -> f64 {
        4.0 * self.default_dt()
    }

    /// Density `p_{T - t_gen}` at the points `xs`.
    pub fn density(&self, t_gen: f64, xs: &[f64]) -> Vec<f64> {
        let t_fwd = self.t_end() - t_gen;
        xs.iter()
            .map(|&x| self.model.log_density(t_fwd, &[x]).unwrap_or(f64::NAN).exp())
            .collect()
    }
}

/// Face coefficients of the discrete operator at one time.
struct Faces {
    /// Flux `F_j = a_j q_{j-1} - b_j q_j` on interior faces.
    a: Vec<f64>,
    b: Vec<f64>,
    /// `(g^2 + h^2)/2 * field * p` on interior faces, before the mask factor.
    src: Vec<f64>,
}

struct Workspace<'p, 'a> {
    problem: &'p FpProblem<'a>,
    grid: Grid1D,
    faces: Vec<f64>,
    score: Vec<f64>,
    density: Vec<f64>,
    coef: Faces,
    /// Forward-sweep scratch for the tridiagonal solve.
    sweep: Vec<f64>,
}

/// `w / (e^w - 1)`.
#[inline]
fn bernoulli(w: f64) -> f64 {
    if w.abs() < 1e-4 {
        1.0 - 0.5 * w + w * w / 12.0
    } else {
        w / w.exp_m1()
    }
}

impl<'p, 'a> Workspace<'p, 'a> {
    fn new(problem: &'p FpProblem<'a>, grid: Grid1D) -> Self {
        let faces = grid.interior_faces();
        let m = faces.len();
        Self {
            problem,
            grid,
            faces,
            score: vec![0.0; m],
            density: vec![0.0; m],
            coef: Faces {
                a: vec![0.0; m],
                b: vec![0.0; m],
                src: vec![0.0; m],
            },
            sweep: vec![0.0; grid.n],
        }
    }

    /// Fill the face coefficients at `t_gen`; the source only if requested.
    fn assemble(&mut self, t_gen: f64, with_source: bool) {
        let p = self.problem;
        let t_fwd = p.t_end() - t_gen;
        let g = p.schedule.g_rev(t_gen);
        let h = p.h.h_at(&p.schedule, t_gen);
        let (g2, h2) = (g * g, h * h);
        let diff = 0.5 * h2;
        let dx = self.grid.dx();
        p.model.score_batch(t_fwd, &self.faces, &mut self.score);
        let Faces { a, b, src } = &mut self.coef;
        for j in 0..self.faces.len() {
            let drift = 0.5 * g2 * self.faces[j] + 0.5 * (g2 + h2) * self.score[j];
            if diff > 0.0 {
                let w = drift * dx / diff;
                let bw = bernoulli(w);
                // B(-w) = B(w) + w
                a[j] = diff / dx * (bw + w);
                b[j] = diff / dx * bw;
            } else {
                a[j] = 0.5 * drift;
                b[j] = -0.5 * drift;
            }
        }
        if with_source {
            let c = 0.5 * (g2 + h2);
            if !p.model.log_density_batch(t_fwd, &self.faces, &mut self.density) {
                self.density.iter_mut().for_each(|d| *d = f64::NAN);
            }
            for (j, sj) in src.iter_mut().enumerate().take(self.faces.len()) {
                let field = match p.pert.mode {
                    SpatialMode::ScoreProportional => self.score[j],
                    SpatialMode::Linear { gain } => gain * self.faces[j],
                };
                *sj = c * field * self.density[j].exp();
            }
        }
    }

    /// Solve `(c I - dt A) x = rhs` in place, `A` being the assembled flux operator.
    fn solve_implicit(&mut self, c: f64, dt: f64, rhs: &mut [f64]) {
        let f = &self.coef;
        let n = rhs.len();
        let k = dt / self.grid.dx();
        // Face j sits between cells j and j + 1. Row i has
        // lower = -k a_{i-1}, diag = c + k (b_{i-1} + a_i), upper = -k b_i.
        let cp = &mut self.sweep;
        let mut denom = c + k * f.a[0];
        cp[0] = -k * f.b[0] / denom;
        rhs[0] /= denom;
        for i in 1..n {
            let lower = -k * f.a[i - 1];
            let right = if i + 1 == n { 0.0 } else { f.a[i] };
            denom = c + k * (f.b[i - 1] + right) - lower * cp[i - 1];
            cp[i] = if i + 1 == n { 0.0 } else { -k * f.b[i] / denom };
            rhs[i] = (rhs[i] - lower * rhs[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= cp[i] * rhs[i + 1];
        }
    }

    /// Add `-dt * weight * div(src)` into `rhs`.
    fn add_source(&self, weight: f64, dt: f64, rhs: &mut [f64]) {
        let k = weight * dt / self.grid.dx();
        for (j, s) in self.coef.src.iter().enumerate() {
            // face j carries flux out of cell j into cell j + 1
            rhs[j] -= k * s;
            rhs[j + 1] += k * s;
        }
    }
}

/// Result of one perturbation solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSolution {
    pub v: Vec<f64>,
    /// Nominal step (segments between mask breakpoints round it down).
    pub dt: f64,
    pub steps: usize,
    /// `int v_T` (zero up to rounding).
    pub mass: f64,
}

fn check_dt(problem: &FpProblem, dt: f64) -> Result<()> {
    let limit = 50.0 * problem.default_dt();
    if !(dt > 0.0 && dt <= limit) {
        return Err(LabError::UnstableStep {
            dt,
            suggested: problem.default_dt(),
        });
    }
    Ok(())
}

/// Largest edge-cell mass of the reference density at `t in {0, T/2, T}`.
pub fn boundary_mass(problem: &FpProblem, grid: &Grid1D) -> f64 {
    let dx = grid.dx();
    let edges = [-grid.half_width + 0.5 * dx, grid.half_width - 0.5 * dx];
    let t_end = problem.t_end();
    [0.0, 0.5 * t_end, t_end]
        .iter()
        .map(|&t| problem.density(t, &edges).iter().sum::<f64>() * dx)
        .fold(0.0, f64::max)
}

/// Integrate from `t0` to `t1` with steps of at most `dt`. With a source, the
/// step grid is aligned to the mask discontinuities and BDF2 restarts at each.
fn march(
    problem: &FpProblem,
    grid: Grid1D,
    init: &[f64],
    (t0, t1): (f64, f64),
    dt: f64,
    with_source: bool,
) -> (Vec<f64>, usize) {
    let mut ws = Workspace::new(problem, grid);
    let t_end = problem.t_end();
    let mut cuts = vec![t0];
    if with_source {
        cuts.extend(
            problem
                .pert
                .mask
                .breakpoints(t_end)
                .into_iter()
                .filter(|&c| c > t0 && c < t1),
        );
    }
    cuts.push(t1);
    let mut cur = init.to_vec();
    let mut prev = vec![0.0; grid.n];
    let mut rhs = vec![0.0; grid.n];
    let mut total = 0;
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        let steps = ((b - a) / dt).ceil() as usize;
        let h = (b - a) / steps as f64;
        for k in 0..steps {
            let ta = a + k as f64 * h;
            let tb = if k + 1 == steps { b } else { ta + h };
            let mask = &problem.pert.mask;
            let m = if !with_source {
                0.0
            } else if mask.breakpoints(t_end).is_empty() {
                mask.value(tb, t_end)
            } else {
                // constant within an aligned segment
                mask.average(ta, tb, t_end)
            };
            ws.assemble(tb, m != 0.0);
            let c = if k == 0 {
                rhs.copy_from_slice(&cur);
                1.0
            } else {
                for i in 0..grid.n {
                    rhs[i] = 2.0 * cur[i] - 0.5 * prev[i];
                }
                1.5
            };
            if m != 0.0 {
                ws.add_source(m, h, &mut rhs);
            }
            ws.solve_implicit(c, h, &mut rhs);
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut cur, &mut rhs);
        }
        total += steps;
    }
    (cur, total)
}

/// First-order density perturbation `v_T` from `v_0 = 0`.
pub fn evolve_perturbation(
    problem: &FpProblem,
    grid: &Grid1D,
    dt: f64,
) -> Result<PerturbationSolution> {
    check_dt(problem, dt)?;
    let leak = boundary_mass(problem, grid);
    if leak > LEAKAGE_LIMIT {
        return Err(LabError::DomainTooSmall {
            mass: leak,
            limit: LEAKAGE_LIMIT,
        });
    }
    let (v, steps) = march(
        problem,
        *grid,
        &vec![0.0; grid.n],
        (0.0, problem.t_end()),
        dt,
        true,
    );
    let mass = grid.integral(&v);
    Ok(PerturbationSolution { v, dt, steps, mass })
}

/// Homogeneous propagator `Phi_{t0 -> t1}` applied to `mu`, with steps of at most `dt`.
pub fn propagate(
    problem: &FpProblem,
    grid: &Grid1D,
    mu: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    check_dt(problem, dt)?;
    if mu.len() != grid.n {
        return Err(LabError::DimensionMismatch {
            expected: grid.n,
            got: mu.len(),
        });
    }
    if !(0.0 <= t0 && t0 <= t1 && t1 <= problem.t_end()) {
        return Err(invalid("t", format!("need 0 <= {t0} <= {t1} <= T")));
    }
    Ok(march(problem, *grid, mu, (t0, t1), dt, false).0)
}

/// `|| Phi_{t->r} Phi_{s->t} mu - Phi_{s->r} mu ||_1`.
pub fn semigroup_check(
    problem: &FpProblem,
    grid: &Grid1D,
    mu: &[f64],
    (s, t, r): (f64, f64, f64),
    dt: f64,
) -> Result<f64> {
    let two = propagate(problem, grid, &propagate(problem, grid, mu, s, t, dt)?, t, r, dt)?;
    let one = propagate(problem, grid, mu, s, r, dt)?;
    Ok(grid.integral(
        &two.iter()
            .zip(&one)
            .map(|(a, b)| (a - b).abs())
            .collect::<Vec<_>>(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadingPde {
    pub value: f64,
    /// Lower bound on the excluded tail contribution.
    pub tail: f64,
}

/// `L = 1/2 int v^2 / p0` over the cells where `p0 > SUPPORT_CUTOFF * max p0`.
pub fn leading_l_pde(v: &[f64], p0: &[f64], grid: &Grid1D) -> Result<LeadingPde> {
    if v.len() != p0.len() || v.len() != grid.n {
        return Err(LabError::DimensionMismatch {
            expected: grid.n,
            got: v.len().min(p0.len()),
        });
    }
    let pmax = p0.iter().copied().fold(0.0, f64::max);
    let cut = (SUPPORT_CUTOFF * pmax).max(1e-300);
    let (mut inside, mut tail) = (0.0, 0.0);
    for (&vi, &pi) in v.iter().zip(p0) {
        if pi > cut {
            inside += vi * vi / pi;
        } else {
            tail += vi * vi / cut;
        }
    }
    let dx = grid.dx();
    let value = 0.5 * inside * dx;
    let tail = 0.5 * tail * dx;
    if tail > TAIL_LIMIT * value && tail > 0.0 {
        return Err(LabError::UnreliableQuadrature {
            fraction: tail / (value + tail),
        });
    }
    Ok(LeadingPde { value, tail })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpOptions {
    /// Fixed step; `None` starts from the default and refines.
    pub dt: Option<f64>,
    /// Relative change in `L` between successive halvings that stops refinement.
    pub refine_tol: f64,
    pub max_refinements: usize,
}

impl Default for FpOptions {
    fn default() -> Self {
        Self {
            dt: None,
            refine_tol: 0.005,
            max_refinements: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpLeading {
    pub value: f64,
    pub tail: f64,
    pub dt: f64,
    /// `(dt, L)` for every solve performed.
    pub history: Vec<(f64, f64)>,
    pub converged: bool,
    pub mass: f64,
    pub v: Vec<f64>,
}

/// `L(h)` from the PDE, halving `dt` until successive values agree.
pub fn solve_leading_l(problem: &FpProblem, grid: &Grid1D, opts: &FpOptions) -> Result<FpLeading> {
    let p0 = problem.density(problem.t_end(), &grid.centers());
    let eval = |dt: f64| -> Result<(PerturbationSolution, LeadingPde)> {
        let sol = evolve_perturbation(problem, grid, dt)?;
        let l = leading_l_pde(&sol.v, &p0, grid)?;
        Ok((sol, l))
    };
    let mut dt = opts.dt.unwrap_or_else(|| problem.start_dt());
    let (mut sol, mut l) = eval(dt)?;
    let mut history = vec![(sol.dt, l.value)];
    let mut converged = opts.dt.is_some();
    if opts.dt.is_none() {
        for _ in 0..opts.max_refinements {
            dt *= 0.5;
            let (s2, l2) = eval(dt)?;
            history.push((s2.dt, l2.value));
            let change = (l2.value - l.value).abs();
            sol = s2;
            let prev = std::mem::replace(&mut l, l2);
            if change <= opts.refine_tol * l.value.abs() || (l.value == 0.0 && prev.value == 0.0) {
                converged = true;
                break;
            }
        }
    }
    Ok(FpLeading {
        value: l.value,
        tail: l.tail,
        dt: sol.dt,
        history,
        converged,
        mass: sol.mass,
        v: sol.v,
    })
}

/// Potential `V = (1 + 1/h^2) U - x^2 / (2 h^2)` of the unit-time generator,
/// with `U = -log p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialDiag {
    pub hsq: f64,
}

impl PotentialDiag {
    pub fn new(hsq: f64) -> Result<Self> {
        if !(hsq.is_finite() && hsq > 0.0) {
            return Err(invalid("hsq", format!("must be > 0, got {hsq}")));
        }
        Ok(Self { hsq })
    }

    #[inline]
    pub fn potential(&self, u: f64, x: f64) -> f64 {
        (1.0 + 1.0 / self.hsq) * u - x * x / (2.0 * self.hsq)
    }

    /// `(U, V, rho)` on the grid centers at generative time `t_gen`, with
    /// `rho` normalized to unit grid mass.
    pub fn on_grid(
        &self,
        model: &dyn ScoreModel,
        t_fwd: f64,
        grid: &Grid1D,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let xs = grid.centers();
        let u: Vec<f64> = xs
            .iter()
            .map(|&x| -model.log_density(t_fwd, &[x]).unwrap_or(f64::NAN))
            .collect();
        let v: Vec<f64> = u.iter().zip(&xs).map(|(&u, &x)| self.potential(u, x)).collect();
        let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
        let mut rho: Vec<f64> = v.iter().map(|&vi| (vmin - vi).exp()).collect();
        let z = grid.integral(&rho);
        rho.iter_mut().for_each(|r| *r /= z);
        (u, v, rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{Gaussian1D, TimeMask};

    fn problem(g: &Gaussian1D, hsq: f64, case: u8) -> FpProblem<'_> {
        FpProblem::new(
            g,
            g.schedule,
            HProfile::ConstUnitTime(hsq.sqrt()),
            Perturbation::case(case, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_mask_gives_zero() {
        let g = Gaussian1D::new(0.5, 2.0).unwrap();
        let mut p = problem(&g, 1.0, 1);
        p.pert.mask = TimeMask::Constant(0.0);
        let grid = Grid1D::new(8.0, 400).unwrap();
        let sol = evolve_perturbation(&p, &grid, p.default_dt() * 10.0).unwrap();
        assert!(sol.steps > 0);
        assert!(sol.v.iter().all(|&v| v == 0.0));
        assert_eq!(leading_l_pde(&sol.v, &vec![1.0; 400], &grid).unwrap().value, 0.0);
    }

    #[test]
    fn operator_conserves_mass() {
        let g = Gaussian1D::new(0.3, 2.0).unwrap();
        for hsq in [0.0, 2.0] {
            let p = problem(&g, hsq, 1);
            let grid = Grid1D::new(8.0, 400).unwrap();
            let mut ws = Workspace::new(&p, grid);
            ws.assemble(0.7, false);
            let f = &ws.coef;
            // apply A to an arbitrary vector through its flux form
            let q: Vec<f64> = (0..400).map(|i| ((i * 37 % 101) as f64).sin()).collect();
            let mut total = 0.0;
            for i in 0..400 {
                let left = if i == 0 { 0.0 } else { f.a[i - 1] * q[i - 1] - f.b[i - 1] * q[i] };
                let right = if i == 399 { 0.0 } else { f.a[i] * q[i] - f.b[i] * q[i + 1] };
                total += left - right;
            }
            assert!(total.abs() < 1e-10, "hsq={hsq}: {total}");
        }
    }

    #[test]
    fn refuses_oversized_step() {
        let g = Gaussian1D::new(0.5, 2.0).unwrap();
        let p = problem(&g, 20.0, 1);
        let grid = Grid1D::new(8.0, 400).unwrap();
        let err = evolve_perturbation(&p, &grid, 0.5).unwrap_err();
        assert!(matches!(err, LabError::UnstableStep { .. }));
    }

    #[test]
    fn small_domain_rejected() {
        let g = Gaussian1D::new(0.5, 2.0).unwrap();
        let p = problem(&g, 1.0, 1);
        let grid = Grid1D::new(2.0, 400).unwrap();
        let err = evolve_perturbation(&p, &grid, p.default_dt()).unwrap_err();
        assert!(matches!(err, LabError::DomainTooSmall { .. }));
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(8.0, 399).is_err());
        assert!(Grid1D::new(-1.0, 800).is_err());
        let g = Grid1D::for_scale(0.2);
        assert_eq!(g.half_width, 8.0);
        assert!((g.dx() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn tail_rule() {
        let grid = Grid1D::new(1.0, 400).unwrap();
        let mut p0 = vec![1.0; 400];
        p0[0] = 1e-20;
        let mut v = vec![0.01; 400];
        v[0] = 1e-10;
        assert!(leading_l_pde(&v, &p0, &grid).is_ok());
        v[0] = 1.0;
        assert!(matches!(
            leading_l_pde(&v, &p0, &grid),
            Err(LabError::UnreliableQuadrature { .. })
        ));
    }

    #[test]
    fn potential_limit() {
        let g = Gaussian1D::new(0.2, 2.0).unwrap();
        let grid = Grid1D::new(4.0, 400).unwrap();
        let (u, v, rho) = PotentialDiag::new(1e4).unwrap().on_grid(&g, 0.5, &grid);
        for (a, b) in u.iter().zip(&v) {
            assert!((a - b).abs() <= 1e-3 * a.abs().max(1.0));
        }
        assert!((grid.integral(&rho) - 1.0).abs() < 1e-12);
    }
}
