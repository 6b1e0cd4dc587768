//! Simplified bilateral grid: hard-assignment splat/slice, the grid blur,
//! and bistochastization.
//!
//! Pixels are binned by flooring their (x, y, luma[, u, v]) coordinates
//! against the grid bandwidths. Each occupied cell is a vertex; splatting
//! scatter-adds pixel values onto vertices and slicing gathers them back.
//! Because the assignment is hard, S·Sᵀ is the diagonal count matrix, which
//! is what makes the bistochastized affinity factorization work.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Sentinel for a missing neighbor link.
pub const NO_NEIGHBOR: u32 = u32::MAX;

/// Default bistochastization iteration cap.
pub const BISTOCH_MAX_ITERS: usize = 64;
/// Default bistochastization convergence tolerance (max-norm, relative to max count).
pub const BISTOCH_TOL: f64 = 1e-6;

/// Reference image in YUV, the domain the grid is built over.
///
/// Channel values are expected in [0, 255]. Grayscale references carry no
/// chroma planes and produce a 3-D (x, y, luma) grid instead of the 5-D
/// color grid.
#[derive(Debug, Clone)]
pub struct ReferenceImage {
    width: usize,
    height: usize,
    luma: Vec<f32>,
    chroma: Option<(Vec<f32>, Vec<f32>)>,
}

impl ReferenceImage {
    pub fn new_color(
        width: usize,
        height: usize,
        luma: Vec<f32>,
        chroma_u: Vec<f32>,
        chroma_v: Vec<f32>,
    ) -> Result<Self> {
        Self::validate_plane(width, height, &luma, "luma")?;
        Self::validate_plane(width, height, &chroma_u, "chroma_u")?;
        Self::validate_plane(width, height, &chroma_v, "chroma_v")?;
        Ok(Self {
            width,
            height,
            luma,
            chroma: Some((chroma_u, chroma_v)),
        })
    }

    pub fn new_gray(width: usize, height: usize, luma: Vec<f32>) -> Result<Self> {
        Self::validate_plane(width, height, &luma, "luma")?;
        Ok(Self {
            width,
            height,
            luma,
            chroma: None,
        })
    }

    fn validate_plane(width: usize, height: usize, plane: &[f32], name: &str) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "reference image must be non-empty, got {width}x{height}"
            )));
        }
        if plane.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "reference image plane",
                expected: width * height,
                got: plane.len(),
            });
        }
        if plane.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "reference image {name} plane contains non-finite values"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn npixels(&self) -> usize {
        self.width * self.height
    }

    pub fn luma(&self) -> &[f32] {
        &self.luma
    }

    pub fn chroma(&self) -> Option<(&[f32], &[f32])> {
        self.chroma.as_ref().map(|(u, v)| (u.as_slice(), v.as_slice()))
    }

    pub fn is_color(&self) -> bool {
        self.chroma.is_some()
    }
}

/// Grid bandwidths: spatial, luma, and chroma support of the smoother.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    pub sigma_xy: f64,
    pub sigma_l: f64,
    pub sigma_uv: f64,
}

impl GridParams {
    pub fn new(sigma_xy: f64, sigma_l: f64, sigma_uv: f64) -> Result<Self> {
        let p = Self {
            sigma_xy,
            sigma_l,
            sigma_uv,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_xy", self.sigma_xy),
            ("sigma_l", self.sigma_l),
            ("sigma_uv", self.sigma_uv),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The simplified bilateral grid.
///
/// Vertex order is the first-visit order of a row-major pixel scan, so two
/// builds from the same image and parameters are identical.
#[derive(Debug, Clone)]
pub struct BilateralGrid {
    width: usize,
    height: usize,
    dims: usize,
    pixel_to_vertex: Vec<u32>,
    /// nverts * dims integer cell coordinates, row-major per vertex.
    vertex_coords: Vec<i32>,
    /// nverts * dims * 2 links; [v][d][0] is the -1 side, [v][d][1] the +1 side.
    neighbors: Vec<u32>,
    splat_counts: Vec<u32>,
}

impl BilateralGrid {
    /// Bins every pixel of `reference` and wires up the vertex lattice.
    pub fn build(reference: &ReferenceImage, params: &GridParams) -> Result<Self> {
        params.validate()?;
        let width = reference.width();
        let height = reference.height();
        let npixels = reference.npixels();
        let dims = if reference.is_color() { 5 } else { 3 };

        let mut cell_to_vertex: HashMap<[i32; 5], u32> = HashMap::with_capacity(npixels / 4 + 1);
        let mut pixel_to_vertex = vec![0u32; npixels];
        let mut vertex_coords: Vec<i32> = Vec::new();
        let mut splat_counts: Vec<u32> = Vec::new();

        let luma = reference.luma();
        let chroma = reference.chroma();
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let mut key = [0i32; 5];
                key[0] = (x as f64 / params.sigma_xy).floor() as i32;
                key[1] = (y as f64 / params.sigma_xy).floor() as i32;
                key[2] = (luma[i] as f64 / params.sigma_l).floor() as i32;
                if let Some((u, v)) = chroma {
                    key[3] = (u[i] as f64 / params.sigma_uv).floor() as i32;
                    key[4] = (v[i] as f64 / params.sigma_uv).floor() as i32;
                }
                let vert = *cell_to_vertex.entry(key).or_insert_with(|| {
                    vertex_coords.extend_from_slice(&key[..dims]);
                    splat_counts.push(0);
                    (splat_counts.len() - 1) as u32
                });
                splat_counts[vert as usize] += 1;
                pixel_to_vertex[i] = vert;
            }
        }

        let nverts = splat_counts.len();
        let mut neighbors = vec![NO_NEIGHBOR; nverts * dims * 2];
        for v in 0..nverts {
            let mut key = [0i32; 5];
            key[..dims].copy_from_slice(&vertex_coords[v * dims..(v + 1) * dims]);
            for d in 0..dims {
                let orig = key[d];
                key[d] = orig - 1;
                if let Some(&u) = cell_to_vertex.get(&key) {
                    neighbors[(v * dims + d) * 2] = u;
                }
                key[d] = orig + 1;
                if let Some(&u) = cell_to_vertex.get(&key) {
                    neighbors[(v * dims + d) * 2 + 1] = u;
                }
                key[d] = orig;
            }
        }

        Ok(Self {
            width,
            height,
            dims,
            pixel_to_vertex,
            vertex_coords,
            neighbors,
            splat_counts,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn npixels(&self) -> usize {
        self.width * self.height
    }

    pub fn nverts(&self) -> usize {
        self.splat_counts.len()
    }

    /// Grid dimensionality D: 5 for color references, 3 for grayscale.
    pub fn dims(&self) -> usize {
        self.dims
    }

    /// The constant diagonal of the grid blur, 2D.
    pub fn blur_diag(&self) -> f64 {
        (2 * self.dims) as f64
    }

    pub fn pixel_to_vertex(&self) -> &[u32] {
        &self.pixel_to_vertex
    }

    pub fn splat_counts(&self) -> &[u32] {
        &self.splat_counts
    }

    /// Splat counts as f64, the m vector.
    pub fn counts_f64(&self) -> Vec<f64> {
        self.splat_counts.iter().map(|&c| c as f64).collect()
    }

    pub fn vertex_coord(&self, v: usize) -> &[i32] {
        &self.vertex_coords[v * self.dims..(v + 1) * self.dims]
    }

    pub fn neighbor(&self, v: usize, dim: usize, plus_side: bool) -> Option<usize> {
        let idx = self.neighbors[(v * self.dims + dim) * 2 + usize::from(plus_side)];
        (idx != NO_NEIGHBOR).then_some(idx as usize)
    }

    /// S·values: scatter-add each pixel value into its vertex.
    pub fn splat(&self, pixel_values: &[f64]) -> Result<Vec<f64>> {
        if pixel_values.len() != self.npixels() {
            return Err(Error::DimensionMismatch {
                what: "splat input",
                expected: self.npixels(),
                got: pixel_values.len(),
            });
        }
        let mut out = vec![0.0; self.nverts()];
        for (i, &v) in self.pixel_to_vertex.iter().enumerate() {
            out[v as usize] += pixel_values[i];
        }
        Ok(out)
    }

    /// Sᵀ·values: every pixel receives its vertex's value.
    pub fn slice(&self, vertex_values: &[f64]) -> Result<Vec<f64>> {
        if vertex_values.len() != self.nverts() {
            return Err(Error::DimensionMismatch {
                what: "slice input",
                expected: self.nverts(),
                got: vertex_values.len(),
            });
        }
        Ok(self
            .pixel_to_vertex
            .iter()
            .map(|&v| vertex_values[v as usize])
            .collect())
    }

    /// B̄·values: 2D on the diagonal plus the sum of a [1, 2, 1] kernel
    /// along each grid dimension (summed, not composed).
    pub fn blur(&self, vertex_values: &[f64]) -> Result<Vec<f64>> {
        if vertex_values.len() != self.nverts() {
            return Err(Error::DimensionMismatch {
                what: "blur input",
                expected: self.nverts(),
                got: vertex_values.len(),
            });
        }
        let mut out = vec![0.0; self.nverts()];
        self.blur_into(vertex_values, &mut out);
        Ok(out)
    }

    pub(crate) fn blur_into(&self, vertex_values: &[f64], out: &mut [f64]) {
        let diag = self.blur_diag();
        let dims = self.dims;
        for v in 0..self.nverts() {
            let mut acc = diag * vertex_values[v];
            let base = (v * dims) * 2;
            for link in &self.neighbors[base..base + dims * 2] {
                if *link != NO_NEIGHBOR {
                    acc += vertex_values[*link as usize];
                }
            }
            out[v] = acc;
        }
    }
}

/// Result of the bistochastization fixed-point iteration.
///
/// At convergence n∘(B̄n) equals the splat counts m, which makes the
/// normalized affinity Sᵀ D_m⁻¹ D_n B̄ D_n D_m⁻¹ S doubly stochastic.
#[derive(Debug, Clone)]
pub struct Bistochastization {
    pub n: Vec<f64>,
    /// max |n∘(B̄n) − m| / max(m) at exit.
    pub residual: f64,
    pub iterations_used: usize,
}

impl BilateralGrid {
    /// Runs n ← sqrt((n∘m)/(B̄n)) from n = 1 until the residual drops
    /// below `tol` or `max_iters` is reached.
    pub fn bistochastize(&self, max_iters: usize, tol: f64) -> Result<Bistochastization> {
        if max_iters < 1 {
            return Err(Error::InvalidParameter(
                "bistochastize requires max_iters >= 1".into(),
            ));
        }
        let m = self.counts_f64();
        let max_m = m.iter().cloned().fold(f64::MIN, f64::max);
        let mut n = vec![1.0; self.nverts()];
        let mut bn = vec![0.0; self.nverts()];
        let mut residual = f64::INFINITY;
        let mut iterations_used = 0;
        for it in 1..=max_iters {
            self.blur_into(&n, &mut bn);
            for i in 0..n.len() {
                if bn[i] <= 0.0 {
                    // Impossible with positive n and a positive blur diagonal.
                    return Err(Error::NumericalFailure {
                        what: "bistochastize (blur produced a non-positive entry)",
                        iteration: it,
                    });
                }
                n[i] = (n[i] * m[i] / bn[i]).sqrt();
            }
            self.blur_into(&n, &mut bn);
            residual = n
                .iter()
                .zip(bn.iter())
                .zip(m.iter())
                .map(|((&ni, &bni), &mi)| (ni * bni - mi).abs())
                .fold(0.0, f64::max)
                / max_m;
            iterations_used = it;
            if residual <= tol {
                break;
            }
        }
        Ok(Bistochastization {
            n,
            residual,
            iterations_used,
        })
    }

    /// Bistochastize with the default iteration cap and tolerance.
    pub fn bistochastize_default(&self) -> Result<Bistochastization> {
        self.bistochastize(BISTOCH_MAX_ITERS, BISTOCH_TOL)
    }
}
