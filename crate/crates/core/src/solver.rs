//! Bilateral-space quadratic assembly and the preconditioned CG solve.
//!
//! The pixel-space objective (a bistochastized smoothness term plus a
//! confidence-weighted data term) collapses to the vertex-space quadratic
//! ½yᵀAy − bᵀy + c with A = λ(D_m − D_n B̄ D_n) + diag(S·c) and
//! b = S(c∘t). A is applied matrix-free; diag(A) has the closed form
//! λ(m − 2D·n²) + S·c because the grid blur has constant diagonal 2D.

use std::time::Instant;

use crate::domain_transform::{dt_filter, DtParams};
use crate::error::{Error, Result};
use crate::grid::{BilateralGrid, Bistochastization, GridParams, ReferenceImage};
use crate::imaging::{yuv_to_rgb, Raster};
use crate::pyramid::{GridPyramid, HierPrecond};

/// Per-pixel target and confidence.
#[derive(Debug, Clone)]
pub struct Problem {
    pub target: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl Problem {
    pub fn new(target: Vec<f64>, confidence: Vec<f64>) -> Result<Self> {
        if target.len() != confidence.len() {
            return Err(Error::DimensionMismatch {
                what: "problem target/confidence",
                expected: target.len(),
                got: confidence.len(),
            });
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("target contains non-finite values".into()));
        }
        if confidence.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "confidence must be finite and non-negative".into(),
            ));
        }
        Ok(Self { target, confidence })
    }

    /// A problem with confidence 1 everywhere.
    pub fn uniform_confidence(target: Vec<f64>) -> Result<Self> {
        let c = vec![1.0; target.len()];
        Self::new(target, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    Jacobi,
    Hierarchical,
    /// Plain CG; only useful as a baseline in benchmarks.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initialization {
    Flat,
    Hierarchical,
}

/// Iteration budget, preconditioner choice, and the pyramid weight schedules.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub n_iters: usize,
    /// Optional early exit when ‖r‖₂ ≤ tol·‖b‖₂. Off by default; the
    /// default mode is a fixed iteration count.
    pub tol: Option<f64>,
    pub preconditioner: Preconditioner,
    pub init: Initialization,
    pub precond_alpha: f64,
    pub precond_beta: f64,
    pub init_alpha: f64,
    pub init_beta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_iters: 25,
            tol: None,
            preconditioner: Preconditioner::Hierarchical,
            init: Initialization::Hierarchical,
            precond_alpha: 2.0,
            precond_beta: 5.0,
            init_alpha: 4.0,
            init_beta: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters < 1 {
            return Err(Error::InvalidParameter("n_iters must be >= 1".into()));
        }
        if let Some(t) = self.tol {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidParameter("tol must be positive".into()));
            }
        }
        for (name, a) in [("precond_alpha", self.precond_alpha), ("init_alpha", self.init_alpha)] {
            if !(a.is_finite() && a > 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be > 1, got {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn needs_pyramid(&self) -> bool {
        self.preconditioner == Preconditioner::Hierarchical
            || self.init == Initialization::Hierarchical
    }
}

/// Anything that maps a vertex vector to a vertex vector linearly.
pub trait LinearOperator {
    fn apply(&self, v: &[f64]) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> Vec<f64>> LinearOperator for F {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self(v)
    }
}

/// Inverse-diagonal preconditioner.
pub struct JacobiPrecond {
    inv_diag: Vec<f64>,
}

/// Builds the Jacobi preconditioner, y ↦ y / diag(A).
pub fn jacobi_precond(diag_a: &[f64]) -> Result<JacobiPrecond> {
    let mut inv_diag = Vec::with_capacity(diag_a.len());
    for (i, &d) in diag_a.iter().enumerate() {
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "non-positive diagonal entry {d} at vertex {i}; the system is not assembled for Jacobi preconditioning"
            )));
        }
        inv_diag.push(1.0 / d);
    }
    Ok(JacobiPrecond { inv_diag })
}

impl LinearOperator for JacobiPrecond {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(self.inv_diag.iter()).map(|(&x, &d)| x * d).collect()
    }
}

/// Identity preconditioner (plain CG).
pub struct IdentityPrecond;

impl LinearOperator for IdentityPrecond {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
}

/// The assembled vertex-space quadratic. A itself stays matrix-free.
pub struct BilateralSystem<'a> {
    grid: &'a BilateralGrid,
    n: &'a [f64],
    m: Vec<f64>,
    pub lambda: f64,
    /// S·c, cached; diag(A) = λ(m − 2D·n²) + sc.
    pub sc: Vec<f64>,
    pub diag_a: Vec<f64>,
    pub b: Vec<f64>,
    /// ½(c∘t)ᵀt, carried for loss reporting only.
    pub c_scalar: f64,
}

/// Assembles A, b, diag(A) and the loss constant from a problem.
pub fn assemble<'a>(
    grid: &'a BilateralGrid,
    bistoch: &'a Bistochastization,
    problem: &Problem,
    lambda: f64,
) -> Result<BilateralSystem<'a>> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    if problem.target.len() != grid.npixels() {
        return Err(Error::DimensionMismatch {
            what: "problem size vs grid",
            expected: grid.npixels(),
            got: problem.target.len(),
        });
    }
    if problem.confidence.iter().any(|&c| c < 0.0) {
        return Err(Error::InvalidParameter("negative confidence".into()));
    }
    let ct: Vec<f64> = problem
        .confidence
        .iter()
        .zip(problem.target.iter())
        .map(|(&c, &t)| c * t)
        .collect();
    let b = grid.splat(&ct)?;
    let sc = grid.splat(&problem.confidence)?;
    if lambda == 0.0 && sc.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidParameter(
            "lambda = 0 requires positive confidence mass at every vertex".into(),
        ));
    }
    let m = grid.counts_f64();
    let two_d = grid.blur_diag();
    let diag_a: Vec<f64> = m
        .iter()
        .zip(bistoch.n.iter())
        .zip(sc.iter())
        // The smoothness diagonal m − 2D·n² is non-negative at the
        // bistochastization fixed point; clamp out cancellation noise.
        .map(|((&mi, &ni), &sci)| lambda * (mi - two_d * ni * ni).max(0.0) + sci)
        .collect();
    let c_scalar = 0.5
        * ct.iter()
            .zip(problem.target.iter())
            .map(|(&cti, &ti)| cti * ti)
            .sum::<f64>();
    Ok(BilateralSystem {
        grid,
        n: &bistoch.n,
        m,
        lambda,
        sc,
        diag_a,
        b,
        c_scalar,
    })
}

impl<'a> BilateralSystem<'a> {
    pub fn grid(&self) -> &'a BilateralGrid {
        self.grid
    }

    pub fn nverts(&self) -> usize {
        self.grid.nverts()
    }

    pub fn bistoch_n(&self) -> &[f64] {
        self.n
    }

    /// A·y = λ(m∘y − n∘B̄(n∘y)) + sc∘y.
    pub fn apply_a(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.nverts() {
            return Err(Error::DimensionMismatch {
                what: "apply_a input",
                expected: self.nverts(),
                got: y.len(),
            });
        }
        let ny: Vec<f64> = self.n.iter().zip(y.iter()).map(|(&n, &v)| n * v).collect();
        let mut bny = vec![0.0; y.len()];
        self.grid.blur_into(&ny, &mut bny);
        Ok((0..y.len())
            .map(|i| self.lambda * (self.m[i] * y[i] - self.n[i] * bny[i]) + self.sc[i] * y[i])
            .collect())
    }

    /// ½yᵀAy − bᵀy + c, the value of the quadratic objective at y.
    pub fn quadratic_loss(&self, y: &[f64]) -> Result<f64> {
        let ay = self.apply_a(y)?;
        let yay: f64 = y.iter().zip(ay.iter()).map(|(&a, &b)| a * b).sum();
        let by: f64 = self.b.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum();
        Ok(0.5 * yay - by + self.c_scalar)
    }

    /// yᵀ(D_m − D_n B̄ D_n)y, the unscaled smoothness quadratic.
    pub fn smoothness_quad(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.nverts() {
            return Err(Error::DimensionMismatch {
                what: "smoothness_quad input",
                expected: self.nverts(),
                got: y.len(),
            });
        }
        let ny: Vec<f64> = self.n.iter().zip(y.iter()).map(|(&n, &v)| n * v).collect();
        let mut bny = vec![0.0; y.len()];
        self.grid.blur_into(&ny, &mut bny);
        let mut acc = 0.0;
        for i in 0..y.len() {
            acc += y[i] * (self.m[i] * y[i] - self.n[i] * bny[i]);
        }
        Ok(acc)
    }
}

impl LinearOperator for BilateralSystem<'_> {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.apply_a(v).expect("apply_a on mismatched length")
    }
}

/// y_flat = S(c∘t) / S(c), the minimizer of the data term alone.
/// Vertices with no confidence mass get 0 and are left to the smoothness
/// term during optimization.
pub fn flat_init(grid: &BilateralGrid, problem: &Problem) -> Result<Vec<f64>> {
    let ct: Vec<f64> = problem
        .confidence
        .iter()
        .zip(problem.target.iter())
        .map(|(&c, &t)| c * t)
        .collect();
    let num = grid.splat(&ct)?;
    let den = grid.splat(&problem.confidence)?;
    Ok(num
        .iter()
        .zip(den.iter())
        .map(|(&n, &d)| if d > 0.0 { n / d } else { 0.0 })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients.
///
/// Runs the classic r/d/q recurrence from `y0` for `n_iters` iterations,
/// or until ‖r‖₂ ≤ tol·‖b‖₂ when a tolerance is supplied. Returns an error
/// naming the iteration if the iterates go non-finite.
pub fn pcg(
    a: &dyn LinearOperator,
    b: &[f64],
    y0: &[f64],
    m_inv: &dyn LinearOperator,
    n_iters: usize,
    tol: Option<f64>,
) -> Result<Vec<f64>> {
    pcg_observed(a, b, y0, m_inv, n_iters, tol, |_, _| {})
}

/// [`pcg`] with a per-iteration observer; called with (iteration, state)
/// starting at iteration 0 (the initial state).
pub fn pcg_observed(
    a: &dyn LinearOperator,
    b: &[f64],
    y0: &[f64],
    m_inv: &dyn LinearOperator,
    n_iters: usize,
    tol: Option<f64>,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    if y0.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "pcg initial state",
            expected: b.len(),
            got: y0.len(),
        });
    }
    if n_iters < 1 {
        return Err(Error::InvalidParameter("pcg requires n_iters >= 1".into()));
    }
    let target = tol.map(|t| t * norm2(b));
    let mut x = y0.to_vec();
    let ax = a.apply(&x);
    let mut r: Vec<f64> = b.iter().zip(ax.iter()).map(|(&bi, &ai)| bi - ai).collect();
    let mut d = m_inv.apply(&r);
    let mut delta_new = dot(&r, &d);
    if !delta_new.is_finite() {
        return Err(Error::NumericalFailure {
            what: "pcg",
            iteration: 0,
        });
    }
    observe(0, &x);
    let mut i = 0;
    while i < n_iters {
        // delta_new = rᵀM⁻¹r vanishes only at the exact solution.
        if delta_new == 0.0 {
            break;
        }
        if let Some(t) = target {
            if norm2(&r) <= t {
                break;
            }
        }
        let q = a.apply(&d);
        let alpha = delta_new / dot(&d, &q);
        if !alpha.is_finite() {
            return Err(Error::NumericalFailure {
                what: "pcg",
                iteration: i + 1,
            });
        }
        for j in 0..x.len() {
            x[j] += alpha * d[j];
            r[j] -= alpha * q[j];
        }
        let s = m_inv.apply(&r);
        let delta_old = delta_new;
        delta_new = dot(&r, &s);
        if !delta_new.is_finite() {
            return Err(Error::NumericalFailure {
                what: "pcg",
                iteration: i + 1,
            });
        }
        let beta = delta_new / delta_old;
        for j in 0..d.len() {
            d[j] = s[j] + beta * d[j];
        }
        i += 1;
        observe(i, &x);
    }
    Ok(x)
}

/// A grid, its bistochastization, and (when needed) its pyramid, built once
/// and reused across solves that share a reference image.
pub struct GridContext {
    pub grid: BilateralGrid,
    pub bistoch: Bistochastization,
    pub pyramid: Option<GridPyramid>,
}

impl GridContext {
    pub fn build(
        reference: &ReferenceImage,
        grid_params: &GridParams,
        config: &SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        let grid = BilateralGrid::build(reference, grid_params)?;
        let bistoch = grid.bistochastize_default()?;
        let pyramid = if config.needs_pyramid() {
            Some(GridPyramid::build(&grid))
        } else {
            None
        };
        Ok(Self {
            grid,
            bistoch,
            pyramid,
        })
    }

    /// The pyramid, building it on demand if the context was created
    /// without one.
    pub fn pyramid_or_build(&mut self) -> &GridPyramid {
        if self.pyramid.is_none() {
            self.pyramid = Some(GridPyramid::build(&self.grid));
        }
        self.pyramid.as_ref().unwrap()
    }
}

/// Timings and iteration diagnostics from one solve.
#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub construction_ms: f64,
    pub optimization_ms: f64,
    /// Quadratic loss per PCG iteration (index 0 = initial state).
    /// Populated by the traced entry points only.
    pub iteration_losses: Vec<f64>,
    pub nverts: usize,
    pub pcg_iterations: usize,
}

/// A sliced solution with its final loss and run statistics.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    /// Per-pixel output.
    pub output: Vec<f64>,
    /// ½yᵀAy − bᵀy + c at the returned solution.
    pub loss: f64,
    pub stats: SolveStats,
}

pub(crate) fn initial_state(
    ctx: &GridContext,
    problem: &Problem,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    match config.init {
        Initialization::Flat => flat_init(&ctx.grid, problem),
        Initialization::Hierarchical => {
            let pyr = ctx
                .pyramid
                .as_ref()
                .expect("hierarchical init requires a pyramid in the context");
            pyr.hier_init(&ctx.grid, problem, config.init_alpha, config.init_beta)
        }
    }
}

pub(crate) fn build_precond<'p>(
    ctx: &'p GridContext,
    diag_a: &[f64],
    config: &SolverConfig,
) -> Result<Box<dyn LinearOperator + 'p>> {
    Ok(match config.preconditioner {
        Preconditioner::Jacobi => Box::new(jacobi_precond(diag_a)?),
        Preconditioner::Hierarchical => {
            let pyr = ctx
                .pyramid
                .as_ref()
                .expect("hierarchical preconditioner requires a pyramid in the context");
            Box::new(pyr.hier_precond(diag_a, config.precond_alpha, config.precond_beta)?)
        }
        Preconditioner::None => Box::new(IdentityPrecond),
    })
}

fn solve_on_context(
    ctx: &GridContext,
    problem: &Problem,
    config: &SolverConfig,
    lambda: f64,
    trace: bool,
) -> Result<(Vec<f64>, f64, Vec<f64>, usize)> {
    let sys = assemble(&ctx.grid, &ctx.bistoch, problem, lambda)?;
    let y0 = initial_state(ctx, problem, config)?;
    let precond = build_precond(ctx, &sys.diag_a, config)?;
    let mut losses = Vec::new();
    let mut iterations = 0;
    let y = pcg_observed(
        &sys,
        &sys.b,
        &y0,
        precond.as_ref(),
        config.n_iters,
        config.tol,
        |it, x| {
            iterations = it;
            if trace {
                losses.push(sys.quadratic_loss(x).expect("loss on in-flight state"));
            }
        },
    )?;
    let loss = sys.quadratic_loss(&y)?;
    let pixels = ctx.grid.slice(&y)?;
    Ok((pixels, loss, losses, iterations))
}

/// Solves one problem over an already-built context. Shares grid,
/// bistochastization, and pyramid work across repeated solves.
pub fn solve_with_context(
    ctx: &GridContext,
    problem: &Problem,
    config: &SolverConfig,
    lambda: f64,
) -> Result<SolveOutput> {
    let t0 = Instant::now();
    let (output, loss, _, iterations) = solve_on_context(ctx, problem, config, lambda, false)?;
    Ok(SolveOutput {
        output,
        loss,
        stats: SolveStats {
            construction_ms: 0.0,
            optimization_ms: t0.elapsed().as_secs_f64() * 1e3,
            iteration_losses: Vec::new(),
            nverts: ctx.grid.nverts(),
            pcg_iterations: iterations,
        },
    })
}

/// [`solve_with_context`] recording the quadratic loss at every iteration.
pub fn solve_with_context_traced(
    ctx: &GridContext,
    problem: &Problem,
    config: &SolverConfig,
    lambda: f64,
) -> Result<SolveOutput> {
    let t0 = Instant::now();
    let (output, loss, losses, iterations) = solve_on_context(ctx, problem, config, lambda, true)?;
    Ok(SolveOutput {
        output,
        loss,
        stats: SolveStats {
            construction_ms: 0.0,
            optimization_ms: t0.elapsed().as_secs_f64() * 1e3,
            iteration_losses: losses,
            nverts: ctx.grid.nverts(),
            pcg_iterations: iterations,
        },
    })
}

/// An RGB guide for the domain transform, reconstructed from the reference.
pub(crate) fn guide_from_reference(reference: &ReferenceImage) -> Result<Raster> {
    let w = reference.width();
    let h = reference.height();
    match reference.chroma() {
        Some((u, v)) => {
            let mut data = Vec::with_capacity(3 * w * h);
            data.extend_from_slice(reference.luma());
            data.extend_from_slice(u);
            data.extend_from_slice(v);
            yuv_to_rgb(&Raster::new(w, h, 3, data)?)
        }
        None => Raster::new(w, h, 1, reference.luma().to_vec()),
    }
}

fn run_solve(
    reference: &ReferenceImage,
    problem: &Problem,
    grid_params: &GridParams,
    config: &SolverConfig,
    lambda: f64,
    dt_post: Option<&DtParams>,
    trace: bool,
) -> Result<SolveOutput> {
    let t0 = Instant::now();
    let ctx = GridContext::build(reference, grid_params, config)?;
    let construction_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let (mut output, loss, losses, iterations) =
        solve_on_context(&ctx, problem, config, lambda, trace)?;
    if let Some(dt) = dt_post {
        let guide = guide_from_reference(reference)?;
        let raster = Raster::new(
            reference.width(),
            reference.height(),
            1,
            output.iter().map(|&v| v as f32).collect(),
        )?;
        let filtered = dt_filter(&raster, &guide, dt)?;
        output = filtered.channel(0).iter().map(|&v| v as f64).collect();
    }
    Ok(SolveOutput {
        output,
        loss,
        stats: SolveStats {
            construction_ms,
            optimization_ms: t1.elapsed().as_secs_f64() * 1e3,
            iteration_losses: losses,
            nverts: ctx.grid.nverts(),
            pcg_iterations: iterations,
        },
    })
}

/// The full pipeline: build grid, bistochastize, assemble, initialize,
/// run PCG, slice, and optionally post-filter with the domain transform.
pub fn solve(
    reference: &ReferenceImage,
    problem: &Problem,
    grid_params: &GridParams,
    config: &SolverConfig,
    lambda: f64,
    dt_post: Option<&DtParams>,
) -> Result<SolveOutput> {
    run_solve(reference, problem, grid_params, config, lambda, dt_post, false)
}

/// [`solve`] recording the quadratic loss at every PCG iteration.
pub fn solve_traced(
    reference: &ReferenceImage,
    problem: &Problem,
    grid_params: &GridParams,
    config: &SolverConfig,
    lambda: f64,
    dt_post: Option<&DtParams>,
) -> Result<SolveOutput> {
    run_solve(reference, problem, grid_params, config, lambda, dt_post, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{dense_system, matvec, solve_dense};
    use crate::grid::GridParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray_ref(w: usize, h: usize, seed: u64) -> ReferenceImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let luma: Vec<f32> = (0..w * h).map(|_| rng.gen_range(0.0..255.0)).collect();
        ReferenceImage::new_gray(w, h, luma).unwrap()
    }

    fn jacobi_flat(n_iters: usize, tol: Option<f64>) -> SolverConfig {
        SolverConfig {
            n_iters,
            tol,
            preconditioner: Preconditioner::Jacobi,
            init: Initialization::Flat,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn single_vertex_system_by_hand() {
        let img = ReferenceImage::new_gray(1, 2, vec![10.0, 10.0]).unwrap();
        let grid = BilateralGrid::build(&img, &GridParams::new(16.0, 8.0, 8.0).unwrap()).unwrap();
        let bi = grid.bistochastize(32, 1e-14).unwrap();
        let problem = Problem::new(vec![0.0, 2.0], vec![1.0, 1.0]).unwrap();
        let sys = assemble(&grid, &bi, &problem, 1.0).unwrap();
        assert!((sys.diag_a[0] - 2.0).abs() < 1e-12, "smoothness term must vanish");
        assert_eq!(sys.b, vec![2.0]);
        assert!((sys.c_scalar - 2.0).abs() < 1e-12);
        let precond = jacobi_precond(&sys.diag_a).unwrap();
        let y = pcg(&sys, &sys.b, &[0.0], &precond, 4, None).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_confidence_gives_zero_solution() {
        // A ramp image: every vertex is linked, so the smoothness diagonal
        // stays positive and Jacobi is well-defined.
        let luma: Vec<f32> = (0..32).map(|i| (i * 8) as f32).collect();
        let img = ReferenceImage::new_gray(8, 4, luma).unwrap();
        let grid = BilateralGrid::build(&img, &GridParams::new(2.0, 8.0, 8.0).unwrap()).unwrap();
        let bi = grid.bistochastize(256, 1e-10).unwrap();
        let problem = Problem::new(vec![5.0; 32], vec![0.0; 32]).unwrap();
        let sys = assemble(&grid, &bi, &problem, 1.0).unwrap();
        assert!(sys.b.iter().all(|&v| v == 0.0));
        let y0 = flat_init(&grid, &problem).unwrap();
        assert!(y0.iter().all(|&v| v == 0.0));
        let precond = jacobi_precond(&sys.diag_a).unwrap();
        let y = pcg(&sys, &sys.b, &y0, &precond, 25, None).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_zero_requires_full_mass() {
        let img = gray_ref(4, 4, 3);
        let grid = BilateralGrid::build(&img, &GridParams::new(2.0, 16.0, 8.0).unwrap()).unwrap();
        let bi = grid.bistochastize_default().unwrap();
        let mut c = vec![1.0; 16];
        let ok = Problem::new(vec![1.0; 16], c.clone()).unwrap();
        assert!(assemble(&grid, &bi, &ok, 0.0).is_ok());
        c[0] = 0.0;
        // vertex holding pixel 0 may still be covered by other pixels; zero
        // out everything mapping there to force an empty-mass vertex
        let v0 = grid.pixel_to_vertex()[0];
        for (i, &v) in grid.pixel_to_vertex().iter().enumerate() {
            if v == v0 {
                c[i] = 0.0;
            }
        }
        let bad = Problem::new(vec![1.0; 16], c).unwrap();
        assert!(assemble(&grid, &bi, &bad, 0.0).is_err());
    }

    #[test]
    fn apply_a_matches_dense_system() {
        let img = gray_ref(6, 5, 11);
        let grid = BilateralGrid::build(&img, &GridParams::new(2.0, 30.0, 8.0).unwrap()).unwrap();
        let bi = grid.bistochastize(512, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let problem = Problem::new(
            (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            (0..30).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let sys = assemble(&grid, &bi, &problem, 0.7).unwrap();
        let nv = grid.nverts();
        let dense = dense_system(&sys);
        let y: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ay = sys.apply_a(&y).unwrap();
        let ay_dense = matvec(&dense, nv, &y);
        for i in 0..nv {
            assert!((ay[i] - ay_dense[i]).abs() < 1e-9, "vertex {i}");
        }
        // diag(A) closed form agrees with the dense diagonal
        for i in 0..nv {
            assert!((sys.diag_a[i] - dense[i * nv + i]).abs() < 1e-9);
        }
    }

    #[test]
    fn apply_a_on_ones_is_sc_after_bistochastization() {
        let img = gray_ref(8, 8, 21);
        let grid = BilateralGrid::build(&img, &GridParams::new(3.0, 25.0, 8.0).unwrap()).unwrap();
        let bi = grid.bistochastize(2000, 1e-13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let problem = Problem::new(
            (0..64).map(|_| rng.gen_range(0.0..10.0)).collect(),
            (0..64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let sys = assemble(&grid, &bi, &problem, 2.0).unwrap();
        let ones = vec![1.0; grid.nverts()];
        let a1 = sys.apply_a(&ones).unwrap();
        let max_m = grid.counts_f64().iter().cloned().fold(0.0, f64::max);
        for (i, &v) in a1.iter().enumerate() {
            assert!(
                (v - sys.sc[i]).abs() <= 2.0 * 10.0 * 1e-13 * max_m + 1e-12,
                "vertex {i}: {v} vs {}",
                sys.sc[i]
            );
        }
    }

    #[test]
    fn apply_a_is_symmetric() {
        let img = gray_ref(7, 7, 31);
        let grid = BilateralGrid::build(&img, &GridParams::new(2.5, 20.0, 8.0).unwrap()).unwrap();
        let bi = grid.bistochastize_default().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let problem = Problem::new(
            (0..49).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..49).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let sys = assemble(&grid, &bi, &problem, 1.3).unwrap();
        let nv = grid.nverts();
        for _ in 0..8 {
            let u: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let au = sys.apply_a(&u).unwrap();
            let av = sys.apply_a(&v).unwrap();
            let uav = dot(&u, &av);
            let vau = dot(&v, &au);
            let nu = norm2(&u);
            let nvn = norm2(&v);
            assert!((uav - vau).abs() <= 1e-10 * nu * nvn);
            let uau = dot(&u, &au);
            assert!(uau >= -1e-8 * nu * nu, "A must be PSD, got {uau}");
        }
    }

    #[test]
    fn flat_init_examples() {
        let img = ReferenceImage::new_gray(1, 2, vec![10.0, 10.0]).unwrap();
        let grid = BilateralGrid::build(&img, &GridParams::new(16.0, 8.0, 8.0).unwrap()).unwrap();
        let p = Problem::new(vec![0.0, 4.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(flat_init(&grid, &p).unwrap(), vec![3.0]);
        let hole = Problem::new(vec![5.0, 5.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(flat_init(&grid, &hole).unwrap(), vec![0.0]);

        let img2 = gray_ref(5, 4, 41);
        let grid2 = BilateralGrid::build(&img2, &GridParams::new(2.0, 30.0, 8.0).unwrap()).unwrap();
        let constant = Problem::new(vec![2.5; 20], vec![0.7; 20]).unwrap();
        let y = flat_init(&grid2, &constant).unwrap();
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn pcg_identity_system_converges_in_one_iteration() {
        let b = vec![1.0, -2.0, 3.5];
        let id = |v: &[f64]| v.to_vec();
        let y = pcg(&id, &b, &[0.0, 0.0, 0.0], &id, 8, None).unwrap();
        for i in 0..3 {
            assert_eq!(y[i], b[i]);
        }
    }

    #[test]
    fn pcg_two_by_two_by_hand() {
        let apply = |v: &[f64]| vec![4.0 * v[0] + v[1], v[0] + 3.0 * v[1]];
        let id = |v: &[f64]| v.to_vec();
        let y = pcg(&apply, &[1.0, 2.0], &[0.0, 0.0], &id, 2, None).unwrap();
        assert!((y[0] - 1.0 / 11.0).abs() < 1e-10);
        assert!((y[1] - 7.0 / 11.0).abs() < 1e-10);
    }

    #[test]
    fn pcg_matches_dense_solve_on_random_spd_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let n = rng.gen_range(20..120);
            // SPD by construction: MᵀM + I
            let mut mmat = vec![0.0; n * n];
            for v in mmat.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = if i == j { 1.0 } else { 0.0 };
                    for k in 0..n {
                        acc += mmat[k * n + i] * mmat[k * n + j];
                    }
                    a[i * n + j] = acc;
                }
            }
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a_ref = a.clone();
            let apply = move |v: &[f64]| matvec(&a_ref, n, v);
            let id = |v: &[f64]| v.to_vec();
            let y = pcg(&apply, &b, &vec![0.0; n], &id, n + 10, Some(1e-13)).unwrap();
            let exact = solve_dense(&a, n, &b).unwrap();
            let diff = y
                .iter()
                .zip(exact.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale = norm2(&exact).max(1e-12);
            assert!(diff / scale <= 1e-6, "trial {trial}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn pcg_rejects_nan_inputs_with_iteration_index() {
        let apply = |v: &[f64]| vec![f64::NAN * v[0]];
        let id = |v: &[f64]| v.to_vec();
        match pcg(&apply, &[1.0], &[0.0], &id, 4, None) {
            Err(Error::NumericalFailure { iteration, .. }) => assert_eq!(iteration, 0),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn jacobi_preconditioner_examples() {
        let p = jacobi_precond(&[1.0, 1.0]).unwrap();
        assert_eq!(p.apply(&[3.0, -4.0]), vec![3.0, -4.0]);
        let p2 = jacobi_precond(&[2.0, 4.0]).unwrap();
        assert_eq!(p2.apply(&[2.0, 4.0]), vec![1.0, 1.0]);
        assert!(jacobi_precond(&[1.0, 0.0]).is_err());
        assert!(jacobi_precond(&[1.0, -2.0]).is_err());
        // symmetric PD as an operator
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..4.0)).collect();
        let op = jacobi_precond(&d).unwrap();
        for _ in 0..4 {
            let u: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!((dot(&op.apply(&u), &v) - dot(&u, &op.apply(&v))).abs() < 1e-12);
            assert!(dot(&op.apply(&u), &u) > 0.0);
        }
    }

    #[test]
    fn constant_target_is_reproduced() {
        let img = gray_ref(8, 6, 55);
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let c: Vec<f64> = (0..48).map(|_| rng.gen_range(0.1..1.0)).collect();
        let problem = Problem::new(vec![42.0; 48], c).unwrap();
        let out = solve(
            &img,
            &problem,
            &GridParams::new(3.0, 20.0, 8.0).unwrap(),
            &jacobi_flat(64, Some(1e-12)),
            2.5,
            None,
        )
        .unwrap();
        for &v in &out.output {
            assert!((v - 42.0).abs() < 1e-5);
        }
    }

    #[test]
    fn vanishing_lambda_recovers_per_vertex_means() {
        let img = gray_ref(6, 6, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let t: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..9.0)).collect();
        let problem = Problem::uniform_confidence(t.clone()).unwrap();
        let gp = GridParams::new(2.0, 25.0, 8.0).unwrap();
        let out = solve(&img, &problem, &gp, &jacobi_flat(128, Some(1e-13)), 1e-12, None).unwrap();
        let grid = BilateralGrid::build(&img, &gp).unwrap();
        let means = {
            let s = grid.splat(&t).unwrap();
            let m = grid.counts_f64();
            grid.slice(&s.iter().zip(m.iter()).map(|(&a, &b)| a / b).collect::<Vec<_>>())
                .unwrap()
        };
        for i in 0..36 {
            assert!((out.output[i] - means[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn sliced_solution_matches_dense_oracle() {
        let img = gray_ref(8, 8, 99);
        let gp = GridParams::new(2.0, 40.0, 8.0).unwrap();
        let grid = BilateralGrid::build(&img, &gp).unwrap();
        let bi = grid.bistochastize(2000, 1e-13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let problem = Problem::new(
            (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            (0..64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let lambda = 1.7;
        let out = solve(&img, &problem, &gp, &jacobi_flat(grid.nverts() + 20, Some(1e-12)), lambda, None)
            .unwrap();
        let sys = assemble(&grid, &bi, &problem, lambda).unwrap();
        let dense = dense_system(&sys);
        let y = solve_dense(&dense, grid.nverts(), &sys.b).unwrap();
        let oracle = grid.slice(&y).unwrap();
        let num: f64 = out
            .output
            .iter()
            .zip(oracle.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = norm2(&oracle).max(1e-12);
        assert!(num / den <= 1e-6, "rel l2 {}", num / den);
    }

    #[test]
    fn pcg_loss_is_monotone_non_increasing() {
        let img = gray_ref(12, 12, 123);
        let mut rng = ChaCha8Rng::seed_from_u64(124);
        let problem = Problem::new(
            (0..144).map(|_| rng.gen_range(0.0..255.0)).collect(),
            (0..144).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let out = solve_traced(
            &img,
            &problem,
            &GridParams::new(3.0, 16.0, 8.0).unwrap(),
            &jacobi_flat(30, None),
            1.0,
            None,
        )
        .unwrap();
        let losses = &out.stats.iteration_losses;
        assert!(losses.len() > 5);
        for w in losses.windows(2) {
            let slack = 1e-9 * w[0].abs().max(1.0);
            assert!(w[1] <= w[0] + slack, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn scaling_confidence_and_lambda_together_preserves_the_argmin() {
        let img = gray_ref(7, 6, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(201);
        let t: Vec<f64> = (0..42).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let c: Vec<f64> = (0..42).map(|_| rng.gen_range(0.05..1.0)).collect();
        let gp = GridParams::new(2.0, 30.0, 8.0).unwrap();
        let cfg = jacobi_flat(256, Some(1e-13));
        let p1 = Problem::new(t.clone(), c.clone()).unwrap();
        let s = 3.7;
        let p2 = Problem::new(t, c.iter().map(|&v| v * s).collect()).unwrap();
        let o1 = solve(&img, &p1, &gp, &cfg, 0.9, None).unwrap();
        let o2 = solve(&img, &p2, &gp, &cfg, 0.9 * s, None).unwrap();
        for i in 0..42 {
            assert!((o1.output[i] - o2.output[i]).abs() < 1e-8);
        }
    }
}
