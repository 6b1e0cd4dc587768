//! Analytic backward pass through the solver: gradients with respect to the
//! target and confidence via one additional least-squares solve.
//!
//! For ŷ = A⁻¹b and x̂ = Sᵀŷ, the implicit-function route gives
//! ∂f/∂b = A⁻¹(S ∂f/∂x̂) and ∂f/∂diag(A) = −(∂f/∂b)∘ŷ; those chain onto
//! the inputs as ∂f/∂t = c∘Sᵀ(∂f/∂b) and
//! ∂f/∂c = Sᵀ(∂f/∂diag A) + Sᵀ(∂f/∂b)∘t. Only diag(A) matters because the
//! off-diagonal entries do not depend on t or c.

use crate::error::{Error, Result};
use crate::pyramid::GridPyramid;
use crate::solver::{
    build_precond, jacobi_precond, pcg, BilateralSystem, GridContext, IdentityPrecond,
    Preconditioner, Problem, SolverConfig,
};

/// Gradients of a downstream loss with respect to the solver inputs.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub d_target: Vec<f64>,
    pub d_confidence: Vec<f64>,
    pub d_b: Vec<f64>,
    pub d_diag_a: Vec<f64>,
}

/// Backpropagates `grad_xhat` = ∂f/∂x̂ through a solved system.
///
/// `y_hat` must be the converged forward solution of `sys`. The backward
/// solve reuses the forward preconditioner kind and iteration budget; the
/// pyramid is rebuilt on demand when the config asks for the hierarchical
/// preconditioner and none is supplied. Needs nothing from the forward pass
/// beyond `y_hat` itself.
pub fn solve_backward(
    sys: &BilateralSystem,
    problem: &Problem,
    y_hat: &[f64],
    grad_xhat: &[f64],
    config: &SolverConfig,
    pyramid: Option<&GridPyramid>,
) -> Result<GradientBundle> {
    let grid = sys.grid();
    if y_hat.len() != grid.nverts() {
        return Err(Error::DimensionMismatch {
            what: "solve_backward y_hat",
            expected: grid.nverts(),
            got: y_hat.len(),
        });
    }
    if grad_xhat.len() != grid.npixels() {
        return Err(Error::DimensionMismatch {
            what: "solve_backward grad_xhat",
            expected: grid.npixels(),
            got: grad_xhat.len(),
        });
    }
    let rhs = grid.splat(grad_xhat)?;

    let needs_pyr = config.preconditioner == Preconditioner::Hierarchical;
    let owned_pyramid;
    let pyr = match (needs_pyr, pyramid) {
        (true, Some(p)) => Some(p),
        (true, None) => {
            owned_pyramid = GridPyramid::build(grid);
            Some(&owned_pyramid)
        }
        (false, _) => None,
    };
    let d_b = backward_pcg(sys, &rhs, config, pyr)?;

    let d_diag_a: Vec<f64> = d_b.iter().zip(y_hat.iter()).map(|(&g, &y)| -g * y).collect();
    let sliced_db = grid.slice(&d_b)?;
    let sliced_ddiag = grid.slice(&d_diag_a)?;
    let d_target: Vec<f64> = problem
        .confidence
        .iter()
        .zip(sliced_db.iter())
        .map(|(&c, &g)| c * g)
        .collect();
    let d_confidence: Vec<f64> = sliced_ddiag
        .iter()
        .zip(sliced_db.iter())
        .zip(problem.target.iter())
        .map(|((&gd, &gb), &t)| gd + gb * t)
        .collect();
    Ok(GradientBundle {
        d_target,
        d_confidence,
        d_b,
        d_diag_a,
    })
}

fn backward_pcg(
    sys: &BilateralSystem,
    rhs: &[f64],
    config: &SolverConfig,
    pyr: Option<&GridPyramid>,
) -> Result<Vec<f64>> {
    let zero = vec![0.0; rhs.len()];
    match config.preconditioner {
        Preconditioner::Hierarchical => {
            let p = pyr.expect("pyramid is built above for the hierarchical preconditioner");
            let precond = p.hier_precond(&sys.diag_a, config.precond_alpha, config.precond_beta)?;
            pcg(sys, rhs, &zero, &precond, config.n_iters, config.tol)
        }
        Preconditioner::Jacobi => {
            let precond = jacobi_precond(&sys.diag_a)?;
            pcg(sys, rhs, &zero, &precond, config.n_iters, config.tol)
        }
        Preconditioner::None => pcg(sys, rhs, &zero, &IdentityPrecond, config.n_iters, config.tol),
    }
}

/// Convenience: forward-solve a problem on a context and return both the
/// vertex solution and the assembled system pieces tests and pipelines need.
pub fn forward_vertex_solution(
    ctx: &GridContext,
    problem: &Problem,
    config: &SolverConfig,
    lambda: f64,
) -> Result<Vec<f64>> {
    let sys = crate::solver::assemble(&ctx.grid, &ctx.bistoch, problem, lambda)?;
    let y0 = crate::solver::flat_init(&ctx.grid, problem)?;
    let precond = build_precond(ctx, &sys.diag_a, config)?;
    pcg(&sys, &sys.b, &y0, precond.as_ref(), config.n_iters, config.tol)
}
