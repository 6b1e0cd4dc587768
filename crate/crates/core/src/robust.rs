//! Robust bilateral solver: Geman-McClure IRLS around the linear solver,
//! plus the edge-aware variance confidence initializer.

use crate::domain_transform::{dt_filter, dt_variance, DtParams};
use crate::error::{Error, Result};
use crate::grid::{GridParams, ReferenceImage};
use crate::imaging::Raster;
use crate::solver::{
    assemble, build_precond, initial_state, pcg, GridContext, Problem, SolverConfig,
};

/// ρ(e) = e² / (σ² + e²), a smooth surrogate for the l0 norm.
pub fn gm_rho(e: f64, sigma_gm: f64) -> f64 {
    let e2 = e * e;
    e2 / (sigma_gm * sigma_gm + e2)
}

/// The IRLS weight of the Geman-McClure loss: w(e) = 2σ² / (σ² + e²)².
/// Equals ρ'(e)/e for e ≠ 0.
pub fn gm_weight(e: f64, sigma_gm: f64) -> f64 {
    let s2 = sigma_gm * sigma_gm;
    let d = s2 + e * e;
    2.0 * s2 / (d * d)
}

/// Which penalty drives the reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustLoss {
    GemanMcclure,
    /// Plain weighted squared error: the weights never change, so the loop
    /// reproduces the ordinary solver.
    SquaredError,
}

#[derive(Debug, Clone)]
pub struct RobustParams {
    pub sigma_gm: f64,
    pub n_irls: usize,
    pub solver: SolverConfig,
    pub loss: RobustLoss,
}

impl RobustParams {
    pub fn new(sigma_gm: f64, n_irls: usize, solver: SolverConfig) -> Result<Self> {
        if !(sigma_gm.is_finite() && sigma_gm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_gm must be positive, got {sigma_gm}"
            )));
        }
        if n_irls < 1 {
            return Err(Error::InvalidParameter("n_irls must be >= 1".into()));
        }
        Ok(Self {
            sigma_gm,
            n_irls,
            solver,
            loss: RobustLoss::GemanMcclure,
        })
    }
}

/// Output of the IRLS loop.
#[derive(Debug, Clone)]
pub struct RobustOutput {
    /// Final sliced solution (after the optional domain-transform post-pass).
    pub output: Vec<f64>,
    /// Robust objective per outer iteration: (λ/2)·yᵀ(D_m − D_n B̄ D_n)y + Σρ.
    /// With the Geman-McClure weight definition this is the functional the
    /// reweighting monotonically decreases.
    pub losses: Vec<f64>,
    /// Weights in effect after the last reweighting step.
    pub final_confidence: Vec<f64>,
}

/// Alternates bilateral solves with Geman-McClure reweighting. The grid and
/// its bistochastization are built once; only diag(A) and b change between
/// iterations.
pub fn robust_solve(
    reference: &ReferenceImage,
    target: &[f64],
    c_init: &[f64],
    params: &RobustParams,
    grid_params: &GridParams,
    lambda: f64,
    dt_post: Option<&DtParams>,
) -> Result<RobustOutput> {
    if target.len() != reference.npixels() || c_init.len() != reference.npixels() {
        return Err(Error::DimensionMismatch {
            what: "robust_solve target/confidence",
            expected: reference.npixels(),
            got: target.len(),
        });
    }
    if c_init.iter().any(|&c| !(c.is_finite() && c >= 0.0)) {
        return Err(Error::InvalidParameter(
            "initial confidence must be finite and non-negative".into(),
        ));
    }
    let ctx = GridContext::build(reference, grid_params, &params.solver)?;
    let mut c = c_init.to_vec();
    let mut x = vec![0.0; target.len()];
    let mut losses = Vec::with_capacity(params.n_irls);
    for _ in 0..params.n_irls {
        let problem = Problem::new(target.to_vec(), c.clone())?;
        let sys = assemble(&ctx.grid, &ctx.bistoch, &problem, lambda)?;
        let y0 = initial_state(&ctx, &problem, &params.solver)?;
        let precond = build_precond(&ctx, &sys.diag_a, &params.solver)?;
        let y = pcg(
            &sys,
            &sys.b,
            &y0,
            precond.as_ref(),
            params.solver.n_iters,
            params.solver.tol,
        )?;
        x = ctx.grid.slice(&y)?;
        let residuals: Vec<f64> = x.iter().zip(target.iter()).map(|(&a, &b)| a - b).collect();
        let data_term: f64 = match params.loss {
            RobustLoss::GemanMcclure => residuals.iter().map(|&e| gm_rho(e, params.sigma_gm)).sum(),
            RobustLoss::SquaredError => residuals
                .iter()
                .zip(c_init.iter())
                .map(|(&e, &w)| w * e * e)
                .sum(),
        };
        losses.push(0.5 * lambda * sys.smoothness_quad(&y)? + data_term);
        if params.loss == RobustLoss::GemanMcclure {
            for (ci, &e) in c.iter_mut().zip(residuals.iter()) {
                *ci = gm_weight(e, params.sigma_gm);
            }
        }
    }
    if let Some(dt) = dt_post {
        let guide = crate::solver::guide_from_reference(reference)?;
        let raster = Raster::from_f64(reference.width(), reference.height(), &x)?;
        x = dt_filter(&raster, &guide, dt)?.channel_f64(0);
    }
    Ok(RobustOutput {
        output: x,
        losses,
        final_confidence: c,
    })
}

/// Default confidence-initializer parameters; `stereo_preset` matches the
/// stereo post-processing setup (and zeroes the 80 leftmost columns).
#[derive(Debug, Clone, Copy)]
pub struct ConfidenceInitParams {
    pub sigma_dt: f64,
    pub dt_sigma_xy: f64,
    pub dt_sigma_rgb: f64,
    pub zero_left_columns: usize,
}

impl Default for ConfidenceInitParams {
    fn default() -> Self {
        Self {
            sigma_dt: 2.0,
            dt_sigma_xy: 32.0,
            dt_sigma_rgb: 32.0,
            zero_left_columns: 0,
        }
    }
}

impl ConfidenceInitParams {
    pub fn stereo_preset() -> Self {
        Self {
            zero_left_columns: 80,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_dt", self.sigma_dt),
            ("dt_sigma_xy", self.dt_sigma_xy),
            ("dt_sigma_rgb", self.dt_sigma_rgb),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Confidence from edge-aware depth variance: c = exp(−V / 2σ_dt²) with
/// V = DT(Z²) − DT(Z)² clamped at zero, then the leftmost columns zeroed.
pub fn variance_confidence(
    depth: &Raster,
    guide: &Raster,
    params: &ConfidenceInitParams,
) -> Result<Raster> {
    params.validate()?;
    if depth.channels() != 1 {
        return Err(Error::InvalidParameter(
            "variance_confidence expects single-channel depth".into(),
        ));
    }
    let dt = DtParams::new(params.dt_sigma_xy, params.dt_sigma_rgb)?;
    let v = dt_variance(depth, guide, &dt)?;
    let scale = 1.0 / (2.0 * params.sigma_dt * params.sigma_dt);
    let mut data: Vec<f32> = v
        .channel(0)
        .iter()
        .map(|&vv| ((-(vv as f64) * scale).exp()) as f32)
        .collect();
    let w = depth.width();
    let cols = params.zero_left_columns.min(w);
    for y in 0..depth.height() {
        for x in 0..cols {
            data[y * w + x] = 0.0;
        }
    }
    Raster::new(w, depth.height(), 1, data)
}
