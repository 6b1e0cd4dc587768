//! Multiscale bilateral-space pyramid: lift/project between vertex space and
//! pyramid space, the hierarchical preconditioner, and push-pull
//! initialization.
//!
//! Coarser levels are built by halving the integer vertex coordinates and
//! coalescing duplicates until a single vertex remains. Level 0 of a pyramid
//! vector is the bilateral-space copy itself; coarser levels count upward,
//! which is the indexing the z-weight schedule uses.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::BilateralGrid;
use crate::solver::{LinearOperator, Problem};

/// Push-pull denominators at or below this threshold yield 0.
pub const PUSH_PULL_EPS: f64 = 1e-12;

/// Per-level weight: 1 for the bilateral-space copy, α^{−(β+k)} above it.
pub fn zweight(k: usize, alpha: f64, beta: f64) -> f64 {
    if k == 0 {
        1.0
    } else {
        alpha.powf(-(beta + k as f64))
    }
}

struct LevelMap {
    /// Coarse vertex index for every vertex of the finer level.
    parent: Vec<u32>,
    coarse_size: usize,
}

/// The chain of splat maps S_0 … S_{K−1} over vertex coordinates.
pub struct GridPyramid {
    maps: Vec<LevelMap>,
    /// Vertex counts per level, base first.
    sizes: Vec<usize>,
}

/// Per-level coefficients; `levels[0]` is the bilateral-space copy.
#[derive(Debug, Clone)]
pub struct PyramidVector {
    pub levels: Vec<Vec<f64>>,
}

impl GridPyramid {
    /// Halves vertex coordinates and coalesces until one vertex remains.
    /// Deterministic: coarse vertices appear in first-visit order of the
    /// finer level.
    pub fn build(grid: &BilateralGrid) -> Self {
        let dims = grid.dims();
        let mut coords: Vec<i32> = (0..grid.nverts())
            .flat_map(|v| grid.vertex_coord(v).to_vec())
            .collect();
        let mut size = grid.nverts();
        let mut maps = Vec::new();
        let mut sizes = vec![size];
        while size > 1 {
            let mut cell_to_coarse: HashMap<Vec<i32>, u32> = HashMap::with_capacity(size / 2 + 1);
            let mut parent = Vec::with_capacity(size);
            let mut next_coords: Vec<i32> = Vec::new();
            for v in 0..size {
                let halved: Vec<i32> = coords[v * dims..(v + 1) * dims]
                    .iter()
                    .map(|&c| c.div_euclid(2))
                    .collect();
                let idx = *cell_to_coarse.entry(halved.clone()).or_insert_with(|| {
                    next_coords.extend_from_slice(&halved);
                    (next_coords.len() / dims - 1) as u32
                });
                parent.push(idx);
            }
            let coarse_size = next_coords.len() / dims;
            maps.push(LevelMap {
                parent,
                coarse_size,
            });
            sizes.push(coarse_size);
            coords = next_coords;
            size = coarse_size;
        }
        Self { maps, sizes }
    }

    /// Number of coarsening maps K; a pyramid vector has K + 1 levels.
    pub fn num_maps(&self) -> usize {
        self.maps.len()
    }

    /// Vertex counts per level, the base level first.
    pub fn level_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn base_size(&self) -> usize {
        self.sizes[0]
    }

    /// P(y): all partial splat products, bottom-up.
    pub fn lift(&self, y: &[f64]) -> Result<PyramidVector> {
        if y.len() != self.base_size() {
            return Err(Error::DimensionMismatch {
                what: "pyramid lift input",
                expected: self.base_size(),
                got: y.len(),
            });
        }
        let mut levels = Vec::with_capacity(self.maps.len() + 1);
        levels.push(y.to_vec());
        for map in &self.maps {
            let fine = levels.last().unwrap();
            let mut coarse = vec![0.0; map.coarse_size];
            for (i, &p) in map.parent.iter().enumerate() {
                coarse[p as usize] += fine[i];
            }
            levels.push(coarse);
        }
        Ok(PyramidVector { levels })
    }

    /// Pᵀ(z): accumulate the transposed splat chains, top-down.
    pub fn project(&self, z: &PyramidVector) -> Result<Vec<f64>> {
        if z.levels.len() != self.maps.len() + 1 {
            return Err(Error::DimensionMismatch {
                what: "pyramid project level count",
                expected: self.maps.len() + 1,
                got: z.levels.len(),
            });
        }
        for (k, level) in z.levels.iter().enumerate() {
            if level.len() != self.sizes[k] {
                return Err(Error::DimensionMismatch {
                    what: "pyramid project level size",
                    expected: self.sizes[k],
                    got: level.len(),
                });
            }
        }
        let mut acc = z.levels[self.maps.len()].clone();
        for k in (0..self.maps.len()).rev() {
            let map = &self.maps[k];
            let mut next = z.levels[k].clone();
            for (i, &p) in map.parent.iter().enumerate() {
                next[i] += acc[p as usize];
            }
            acc = next;
        }
        Ok(acc)
    }

    /// The hierarchical preconditioner of the assembled system:
    /// y ↦ Pᵀ(z_weight ∘ P(1) ∘ P(y) / P(diag A)). The per-coefficient
    /// multiplier is precomputed once.
    pub fn hier_precond(&self, diag_a: &[f64], alpha: f64, beta: f64) -> Result<HierPrecond<'_>> {
        if diag_a.len() != self.base_size() {
            return Err(Error::DimensionMismatch {
                what: "hier_precond diag",
                expected: self.base_size(),
                got: diag_a.len(),
            });
        }
        if diag_a.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
            return Err(Error::InvalidParameter(
                "hierarchical preconditioner requires a positive diagonal".into(),
            ));
        }
        let ones = self.lift(&vec![1.0; self.base_size()])?;
        let diag = self.lift(diag_a)?;
        let mut multiplier = ones;
        for (k, level) in multiplier.levels.iter_mut().enumerate() {
            let zw = zweight(k, alpha, beta);
            for (i, v) in level.iter_mut().enumerate() {
                *v = zw * *v / diag.levels[k][i];
            }
        }
        Ok(HierPrecond {
            pyramid: self,
            multiplier,
        })
    }

    /// Push-pull initialization: the ratio of two pyramid-filtered fields,
    /// Pᵀ(zw∘P(S(c∘t))/P(1)) over Pᵀ(zw∘P(S(c))/P(1)).
    pub fn hier_init(
        &self,
        grid: &BilateralGrid,
        problem: &Problem,
        alpha: f64,
        beta: f64,
    ) -> Result<Vec<f64>> {
        let ct: Vec<f64> = problem
            .confidence
            .iter()
            .zip(problem.target.iter())
            .map(|(&c, &t)| c * t)
            .collect();
        let sct = grid.splat(&ct)?;
        let sc = grid.splat(&problem.confidence)?;
        let ones = self.lift(&vec![1.0; self.base_size()])?;
        let push_pull = |field: &[f64]| -> Result<Vec<f64>> {
            let mut z = self.lift(field)?;
            for (k, level) in z.levels.iter_mut().enumerate() {
                let zw = zweight(k, alpha, beta);
                for (i, v) in level.iter_mut().enumerate() {
                    *v = zw * *v / ones.levels[k][i];
                }
            }
            self.project(&z)
        };
        let num = push_pull(&sct)?;
        let den = push_pull(&sc)?;
        Ok(num
            .iter()
            .zip(den.iter())
            .map(|(&n, &d)| if d > PUSH_PULL_EPS { n / d } else { 0.0 })
            .collect())
    }
}

/// Precomputed Pᵀ D P operator; symmetric and positive definite because the
/// base-level weight is 1/diag(A) > 0 and every coarse weight is positive.
pub struct HierPrecond<'a> {
    pyramid: &'a GridPyramid,
    multiplier: PyramidVector,
}

impl LinearOperator for HierPrecond<'_> {
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut z = self.pyramid.lift(v).expect("length checked at construction");
        for (level, mult) in z.levels.iter_mut().zip(self.multiplier.levels.iter()) {
            for (x, &m) in level.iter_mut().zip(mult.iter()) {
                *x *= m;
            }
        }
        self.pyramid.project(&z).expect("shape is self-consistent")
    }
}
