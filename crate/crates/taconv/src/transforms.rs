//! The six filter-space perturbation transforms and multi-branch basis banks.
//!
//! A transform turns each discretized basis function into a "wiggled" copy:
//! geometric displacement fields resampled bilinearly (rotation-scaling,
//! elastic), Gaussian smoothing (blur), an additive Gaussian bump (noise), or
//! zeroing masks (object occlusion, snow). All randomness is drawn once per
//! branch from the spec's seed, so a branch is a fixed linear map (plus a
//! weight-independent bump for noise) applied identically to every function.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisStack, Grid};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// One filter transform with its parameters. `Identity` ignores everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    RotationScaling {
        alpha: f64,
        theta: f64,
    },
    Elastic {
        alpha: f64,
        sigma: f64,
        seed: u64,
    },
    GaussianBlur {
        sigma: f64,
    },
    GaussianNoise {
        alpha: f64,
        sigma: f64,
        /// Replace the deterministic bump with seeded i.i.d. Gaussian values.
        #[serde(default)]
        random: bool,
        #[serde(default)]
        seed: u64,
    },
    ObjectOcclusion {
        radius: f64,
        seed: u64,
    },
    SnowOcclusion {
        n_lines: usize,
        slope_lo: f64,
        slope_hi: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    RotationScaling,
    Elastic,
    GaussianBlur,
    GaussianNoise,
    ObjectOcclusion,
    SnowOcclusion,
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::RotationScaling => "rotation_scaling",
            TransformKind::Elastic => "elastic",
            TransformKind::GaussianBlur => "gaussian_blur",
            TransformKind::GaussianNoise => "gaussian_noise",
            TransformKind::ObjectOcclusion => "object_occlusion",
            TransformKind::SnowOcclusion => "snow_occlusion",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "identity" => Ok(TransformKind::Identity),
            "rotation_scaling" => Ok(TransformKind::RotationScaling),
            "elastic" => Ok(TransformKind::Elastic),
            "gaussian_blur" | "blur" => Ok(TransformKind::GaussianBlur),
            "gaussian_noise" | "noise" => Ok(TransformKind::GaussianNoise),
            "object_occlusion" | "occlusion" => Ok(TransformKind::ObjectOcclusion),
            "snow_occlusion" | "snow" => Ok(TransformKind::SnowOcclusion),
            other => Err(Error::Usage(format!("unknown transform kind '{}'", other))),
        }
    }
}

impl TransformSpec {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformSpec::Identity => TransformKind::Identity,
            TransformSpec::RotationScaling { .. } => TransformKind::RotationScaling,
            TransformSpec::Elastic { .. } => TransformKind::Elastic,
            TransformSpec::GaussianBlur { .. } => TransformKind::GaussianBlur,
            TransformSpec::GaussianNoise { .. } => TransformKind::GaussianNoise,
            TransformSpec::ObjectOcclusion { .. } => TransformKind::ObjectOcclusion,
            TransformSpec::SnowOcclusion { .. } => TransformKind::SnowOcclusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Usage(msg));
        match *self {
            TransformSpec::Identity => Ok(()),
            TransformSpec::RotationScaling { alpha, .. } => {
                if alpha < 0.0 {
                    return bad(format!("rotation-scaling alpha must be >= 0, got {}", alpha));
                }
                Ok(())
            }
            TransformSpec::Elastic { alpha, sigma, .. } => {
                if alpha < 0.0 {
                    return bad(format!("elastic alpha must be >= 0, got {}", alpha));
                }
                if !(sigma > 0.0) {
                    return bad(format!("elastic sigma must be > 0, got {}", sigma));
                }
                Ok(())
            }
            TransformSpec::GaussianBlur { sigma } => {
                if sigma < 0.0 {
                    return bad(format!("blur sigma must be >= 0, got {}", sigma));
                }
                Ok(())
            }
            TransformSpec::GaussianNoise { alpha, sigma, .. } => {
                if alpha < 0.0 {
                    return bad(format!("noise alpha must be >= 0, got {}", alpha));
                }
                if !(sigma > 0.0) {
                    return bad(format!("noise sigma must be > 0, got {}", sigma));
                }
                Ok(())
            }
            TransformSpec::ObjectOcclusion { radius, .. } => {
                if radius < 0.0 {
                    return bad(format!("occlusion radius must be >= 0, got {}", radius));
                }
                Ok(())
            }
            TransformSpec::SnowOcclusion { slope_lo, slope_hi, .. } => {
                if !(slope_lo < slope_hi) {
                    return bad(format!(
                        "snow slope range must satisfy lo < hi, got [{}, {})",
                        slope_lo, slope_hi
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Per-grid-point target coordinates (in centered grid units).
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub h: usize,
    pub w: usize,
    pub tx: Vec<f64>,
    pub ty: Vec<f64>,
}

impl DisplacementField {
    pub fn identity(grid: &Grid) -> Self {
        DisplacementField { h: grid.h, w: grid.w, tx: grid.x.clone(), ty: grid.y.clone() }
    }
}

/// First-order rotation-scaling field:
/// `x' = x + alpha (x cos th + y sin th)`, `y' = y + alpha (-x sin th + y cos th)`.
/// The center `(0,0)` maps to itself.
pub fn displace_rotation_scaling(grid: &Grid, alpha: f64, theta: f64) -> DisplacementField {
    let (c, s) = (theta.cos(), theta.sin());
    let mut tx = Vec::with_capacity(grid.x.len());
    let mut ty = Vec::with_capacity(grid.y.len());
    for p in 0..grid.x.len() {
        let (x, y) = (grid.x[p], grid.y[p]);
        tx.push(x + alpha * (x * c + y * s));
        ty.push(y + alpha * (-x * s + y * c));
    }
    DisplacementField { h: grid.h, w: grid.w, tx, ty }
}

/// Local elastic field built in three steps: an affine map fitted from three
/// corner anchors displaced by `U(-alpha, alpha)`, a per-axis Gaussian-bump
/// displacement `x' = x + alpha * exp(-x^2 / 2 sigma^2) / sqrt(2 pi sigma^2)`,
/// and their composition via bilinear interpolation of the bump displacement
/// at the affine targets (zero displacement outside the grid).
pub fn displace_elastic(
    grid: &Grid,
    alpha: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<DisplacementField> {
    if alpha == 0.0 {
        // Zero anchor shifts and a vanishing bump: exactly the identity.
        return Ok(DisplacementField::identity(grid));
    }
    if !(sigma > 0.0) {
        return Err(Error::Usage(format!("elastic sigma must be > 0, got {}", sigma)));
    }
    let cx = (grid.w as f64 - 1.0) / 2.0;
    let cy = (grid.h as f64 - 1.0) / 2.0;
    // Three corner anchors; never collinear, so the affine fit is exact.
    let anchors = [(-cx, -cy), (cx, -cy), (-cx, cy)];
    let targets: Vec<(f64, f64)> = anchors
        .iter()
        .map(|&(x, y)| (x + rng.gen_range(-alpha..alpha), y + rng.gen_range(-alpha..alpha)))
        .collect();
    let affine = fit_affine(&anchors, &targets)?;

    // Bump displacement discretized on the grid (displacement, not targets).
    let norm = 1.0 / (2.0 * PI * sigma * sigma).sqrt();
    let bump = |v: f64| alpha * norm * (-(v * v) / (2.0 * sigma * sigma)).exp();
    let bx: Vec<f64> = grid.x.iter().map(|&x| bump(x)).collect();
    let by: Vec<f64> = grid.y.iter().map(|&y| bump(y)).collect();

    let mut tx = Vec::with_capacity(grid.x.len());
    let mut ty = Vec::with_capacity(grid.y.len());
    for p in 0..grid.x.len() {
        let (x, y) = (grid.x[p], grid.y[p]);
        let xt = affine[0] * x + affine[1] * y + affine[2];
        let yt = affine[3] * x + affine[4] * y + affine[5];
        let dx = interp_plane(&bx, grid, xt, yt);
        let dy = interp_plane(&by, grid, xt, yt);
        tx.push(xt + dx);
        ty.push(yt + dy);
    }
    Ok(DisplacementField { h: grid.h, w: grid.w, tx, ty })
}

/// Solve the 2x3 affine map sending each anchor to its target.
fn fit_affine(anchors: &[(f64, f64); 3], targets: &[(f64, f64)]) -> Result<[f64; 6]> {
    let (x0, y0) = anchors[0];
    let (x1, y1) = anchors[1];
    let (x2, y2) = anchors[2];
    let det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
    if det.abs() < 1e-12 {
        return Err(Error::Numerical("collinear anchor triple in elastic transform".into()));
    }
    let solve_row = |t0: f64, t1: f64, t2: f64| -> (f64, f64, f64) {
        // a*x + b*y + c = t at the three anchors, by Cramer's rule on the
        // differenced system.
        let a = ((t1 - t0) * (y2 - y0) - (t2 - t0) * (y1 - y0)) / det;
        let b = ((x1 - x0) * (t2 - t0) - (x2 - x0) * (t1 - t0)) / det;
        let c = t0 - a * x0 - b * y0;
        (a, b, c)
    };
    let (a, b, c) = solve_row(targets[0].0, targets[1].0, targets[2].0);
    let (d, e, f) = solve_row(targets[0].1, targets[1].1, targets[2].1);
    Ok([a, b, c, d, e, f])
}

/// Bilinear read of a plane at centered coordinates; outside the grid the
/// plane reads as zero.
fn interp_plane(plane: &[f64], grid: &Grid, x: f64, y: f64) -> f64 {
    let cx = (grid.w as f64 - 1.0) / 2.0;
    let cy = (grid.h as f64 - 1.0) / 2.0;
    bilinear_zero(plane, grid.h, grid.w, x + cx, y + cy)
}

/// Bilinear sample in index coordinates with zero padding outside.
fn bilinear_zero(plane: &[f64], h: usize, w: usize, col: f64, row: f64) -> f64 {
    let c0 = col.floor();
    let r0 = row.floor();
    let fc = col - c0;
    let fr = row - r0;
    let mut acc = 0.0;
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let r = r0 + dr;
            let c = c0 + dc;
            if r >= 0.0 && r < h as f64 && c >= 0.0 && c < w as f64 {
                acc += wr * wc * plane[r as usize * w + c as usize];
            }
        }
    }
    acc
}

/// Pull-back resampling: output at grid point `p` is the input read at the
/// field's target coordinate, bilinearly, zero outside the grid. Linear in
/// the function values.
pub fn resample_bilinear(func: &[f64], h: usize, w: usize, field: &DisplacementField) -> Vec<f64> {
    assert_eq!(func.len(), h * w, "function extent does not match grid");
    assert_eq!((field.h, field.w), (h, w), "field extent does not match grid");
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    (0..h * w)
        .map(|p| bilinear_zero(func, h, w, field.tx[p] + cx, field.ty[p] + cy))
        .collect()
}

/// Discretized Gaussian kernel with unit mass; support `ceil(6 sigma)`
/// rounded up to odd. `sigma` below 1e-6 degenerates to the delta kernel.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    if sigma < 1e-6 {
        return vec![1.0];
    }
    let mut support = (6.0 * sigma).ceil() as usize;
    if support % 2 == 0 {
        support += 1;
    }
    let r = (support / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Convolve a plane with an isotropic Gaussian, zero padded, output cropped
/// to the input extent. Separable: one pass per axis.
pub fn blur_plane(func: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k1 = gaussian_kernel_1d(sigma);
    if k1.len() == 1 {
        return func.to_vec();
    }
    let r = (k1.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, &kv) in k1.iter().enumerate() {
                let sx = x + i as isize - r;
                if sx >= 0 && sx < w as isize {
                    acc += kv * func[(y * w as isize + sx) as usize];
                }
            }
            tmp[(y * w as isize + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, &kv) in k1.iter().enumerate() {
                let sy = y + i as isize - r;
                if sy >= 0 && sy < h as isize {
                    acc += kv * tmp[(sy * w as isize + x) as usize];
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

/// Gaussian-blur a basis function.
pub fn blur_basis(func: &[f64], k: usize, sigma_b: f64) -> Vec<f64> {
    blur_plane(func, k, k, sigma_b)
}

/// Centered 2-D Gaussian density `exp(-(x^2+y^2)/2 sigma^2) / (2 pi sigma^2)`
/// evaluated on the grid.
pub fn gaussian_bump(grid: &Grid, sigma: f64) -> Vec<f64> {
    let norm = 1.0 / (2.0 * PI * sigma * sigma);
    (0..grid.x.len())
        .map(|p| {
            let (x, y) = (grid.x[p], grid.y[p]);
            norm * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Additive noise transform: `psi + alpha * G_sigma`, deterministic.
pub fn noise_basis(func: &[f64], grid: &Grid, alpha: f64, sigma: f64) -> Vec<f64> {
    let bump = gaussian_bump(grid, sigma);
    func.iter().zip(&bump).map(|(f, b)| f + alpha * b).collect()
}

/// Circular occlusion mask: pixels within Euclidean distance `radius` of a
/// center drawn from the discrete uniform over the grid are zeroed.
pub fn occlusion_mask(grid: &Grid, radius: f64, rng: &mut impl Rng) -> Vec<bool> {
    let ci = rng.gen_range(0..grid.h);
    let cj = rng.gen_range(0..grid.w);
    let (cx, cy) = (grid.x[ci * grid.w + cj], grid.y[ci * grid.w + cj]);
    (0..grid.x.len())
        .map(|p| {
            let dx = grid.x[p] - cx;
            let dy = grid.y[p] - cy;
            (dx * dx + dy * dy).sqrt() <= radius
        })
        .collect()
}

pub fn occlude_basis(func: &[f64], grid: &Grid, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    apply_mask(func, &occlusion_mask(grid, radius, rng))
}

/// Line-shaped snow masks: each line passes through a uniformly drawn grid
/// point with a slope from `U[lo, hi)`, rasterized one pixel wide by integer
/// stepping along the major axis across the whole grid.
pub fn snow_mask(
    grid: &Grid,
    n_lines: usize,
    slope_range: (f64, f64),
    rng: &mut impl Rng,
) -> Vec<bool> {
    let (h, w) = (grid.h, grid.w);
    let mut mask = vec![false; h * w];
    for _ in 0..n_lines {
        let i0 = rng.gen_range(0..h) as f64;
        let j0 = rng.gen_range(0..w) as f64;
        let slope = rng.gen_range(slope_range.0..slope_range.1);
        rasterize_line(&mut mask, h, w, i0, j0, slope);
    }
    mask
}

/// Mark pixels on the line through `(row0, col0)` with `d(row)/d(col) =
/// slope`, stepping along whichever axis the line advances fastest.
pub(crate) fn rasterize_line(mask: &mut [bool], h: usize, w: usize, row0: f64, col0: f64, slope: f64) {
    if slope.abs() <= 1.0 {
        for col in 0..w {
            let row = (row0 + slope * (col as f64 - col0)).round();
            if row >= 0.0 && row < h as f64 {
                mask[row as usize * w + col] = true;
            }
        }
    } else {
        let inv = 1.0 / slope;
        for row in 0..h {
            let col = (col0 + inv * (row as f64 - row0)).round();
            if col >= 0.0 && col < w as f64 {
                mask[row * w + col as usize] = true;
            }
        }
    }
}

pub fn snow_basis(
    func: &[f64],
    grid: &Grid,
    n_lines: usize,
    slope_range: (f64, f64),
    rng: &mut impl Rng,
) -> Vec<f64> {
    apply_mask(func, &snow_mask(grid, n_lines, slope_range, rng))
}

fn apply_mask(func: &[f64], mask: &[bool]) -> Vec<f64> {
    func.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect()
}

/// A transform with all randomness drawn, ready to apply to any plane.
/// Everything except the noise bump is linear in the function values.
#[derive(Debug, Clone)]
pub enum MaterializedTransform {
    Identity,
    Field(DisplacementField),
    Blur { sigma: f64 },
    AddBump { bump: Vec<f64> },
    Mask { mask: Vec<bool> },
}

impl MaterializedTransform {
    /// Draw the transform's random parameters (once) from the spec's seed.
    pub fn from_spec(spec: &TransformSpec, grid: &Grid) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            TransformSpec::Identity => MaterializedTransform::Identity,
            TransformSpec::RotationScaling { alpha, theta } => {
                MaterializedTransform::Field(displace_rotation_scaling(grid, alpha, theta))
            }
            TransformSpec::Elastic { alpha, sigma, seed } => {
                let mut rng = rng_from(seed);
                MaterializedTransform::Field(displace_elastic(grid, alpha, sigma, &mut rng)?)
            }
            TransformSpec::GaussianBlur { sigma } => MaterializedTransform::Blur { sigma },
            TransformSpec::GaussianNoise { alpha, sigma, random, seed } => {
                let bump = if random {
                    let mut rng = rng_from(seed);
                    (0..grid.x.len())
                        .map(|_| {
                            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                            let u2: f64 = rng.gen();
                            alpha * (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
                        })
                        .collect()
                } else {
                    gaussian_bump(grid, sigma)
                        .into_iter()
                        .map(|b| alpha * b)
                        .collect()
                };
                MaterializedTransform::AddBump { bump }
            }
            TransformSpec::ObjectOcclusion { radius, seed } => {
                let mut rng = rng_from(seed);
                MaterializedTransform::Mask { mask: occlusion_mask(grid, radius, &mut rng) }
            }
            TransformSpec::SnowOcclusion { n_lines, slope_lo, slope_hi, seed } => {
                let mut rng = rng_from(seed);
                MaterializedTransform::Mask {
                    mask: snow_mask(grid, n_lines, (slope_lo, slope_hi), &mut rng),
                }
            }
        })
    }

    pub fn apply(&self, func: &[f64], h: usize, w: usize) -> Vec<f64> {
        match self {
            MaterializedTransform::Identity => func.to_vec(),
            MaterializedTransform::Field(field) => resample_bilinear(func, h, w, field),
            MaterializedTransform::Blur { sigma } => blur_plane(func, h, w, *sigma),
            MaterializedTransform::AddBump { bump } => {
                func.iter().zip(bump).map(|(f, b)| f + b).collect()
            }
            MaterializedTransform::Mask { mask } => apply_mask(func, mask),
        }
    }
}

/// Per-branch stacks of transformed basis functions. Branch 0 is always the
/// untransformed basis; the bank is immutable once built and shared behind
/// `Arc`s with every forward pass that synthesizes kernels from it.
#[derive(Debug, Clone)]
pub struct BasisBank {
    pub k: usize,
    pub n_basis: usize,
    branches: Vec<std::sync::Arc<Vec<f64>>>,
    pub branch_specs: Vec<TransformSpec>,
}

impl BasisBank {
    pub fn branches(&self) -> usize {
        self.branches.len()
    }

    /// Raw `[n_basis][k][k]` values for one branch.
    pub fn branch(&self, b: usize) -> &[f64] {
        &self.branches[b]
    }

    pub fn branch_arc(&self, b: usize) -> std::sync::Arc<Vec<f64>> {
        std::sync::Arc::clone(&self.branches[b])
    }

    pub fn branch_stack(&self, b: usize) -> BasisStack {
        BasisStack { n_basis: self.n_basis, k: self.k, data: self.branches[b].as_ref().clone() }
    }
}

/// Build a bank from the untransformed basis and one spec per extra branch.
/// All specs must share one transform kind.
pub fn build_transform_bank(base: &BasisStack, specs: &[TransformSpec]) -> Result<BasisBank> {
    if let Some(first) = specs.first() {
        for s in specs {
            if s.kind() != first.kind() {
                return Err(Error::Usage(format!(
                    "mixed transform kinds in one bank: {} vs {}",
                    first.kind().name(),
                    s.kind().name()
                )));
            }
        }
    }
    let grid = crate::basis::make_grid(base.k)?;
    let kk = base.k * base.k;
    let mut branches = vec![std::sync::Arc::new(base.data.clone())];
    for spec in specs {
        let mat = MaterializedTransform::from_spec(spec, &grid)?;
        let mut data = Vec::with_capacity(base.data.len());
        for i in 0..base.n_basis {
            data.extend(mat.apply(base.function(i), base.k, base.k));
        }
        debug_assert_eq!(data.len(), base.n_basis * kk);
        branches.push(std::sync::Arc::new(data));
    }
    let mut branch_specs = vec![TransformSpec::Identity];
    branch_specs.extend_from_slice(specs);
    Ok(BasisBank { k: base.k, n_basis: base.n_basis, branches, branch_specs })
}

/// Default branch parameters: a geometric ramp of intensity over branches,
/// seeds derived per branch. `n` is the number of transformed branches.
pub fn default_branch_specs(kind: TransformKind, n: usize, seed: u64) -> Vec<TransformSpec> {
    let ramp = |max: f64| -> Vec<f64> {
        // max / 2^(n-1), ..., max / 2, max
        (0..n).map(|i| max / f64::powi(2.0, (n - 1 - i) as i32)).collect()
    };
    let bseed = |i: usize| crate::rng::derive_seed_n(seed, "branch", i as u64);
    match kind {
        TransformKind::Identity => vec![TransformSpec::Identity; n],
        TransformKind::RotationScaling => ramp(0.6)
            .into_iter()
            .map(|alpha| TransformSpec::RotationScaling { alpha, theta: PI / 4.0 })
            .collect(),
        TransformKind::Elastic => ramp(1.6)
            .into_iter()
            .enumerate()
            .map(|(i, alpha)| TransformSpec::Elastic { alpha, sigma: 1.0, seed: bseed(i) })
            .collect(),
        TransformKind::GaussianBlur => ramp(1.2)
            .into_iter()
            .map(|sigma| TransformSpec::GaussianBlur { sigma })
            .collect(),
        TransformKind::GaussianNoise => ramp(0.4)
            .into_iter()
            .enumerate()
            .map(|(i, alpha)| TransformSpec::GaussianNoise {
                alpha,
                sigma: 1.0,
                random: false,
                seed: bseed(i),
            })
            .collect(),
        TransformKind::ObjectOcclusion => ramp(2.0)
            .into_iter()
            .enumerate()
            .map(|(i, radius)| TransformSpec::ObjectOcclusion { radius, seed: bseed(i) })
            .collect(),
        TransformKind::SnowOcclusion => (0..n)
            .map(|i| TransformSpec::SnowOcclusion {
                n_lines: 1 + i / 2,
                slope_lo: -2.0,
                slope_hi: 2.0,
                seed: bseed(i),
            })
            .collect(),
    }
}

/// Transform a tensor plane-by-plane; used for image-space perturbations
/// that reuse the filter-space field machinery.
pub fn apply_field_to_image(image: &Tensor, field: &DisplacementField) -> Result<Tensor> {
    let s = &image.shape;
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(image.data.len());
    for ch in 0..c {
        let plane = &image.data[ch * h * w..(ch + 1) * h * w];
        data.extend(resample_bilinear(plane, h, w, field));
    }
    Tensor::new(vec![c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{centered_grid, eval_basis, make_grid, synthesize_kernel, BasisSpec};
    use crate::rng::rng_from;
    use rand::Rng;

    fn l2(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn rotation_scaling_alpha_zero_is_identity() {
        let grid = make_grid(5).unwrap();
        let f = displace_rotation_scaling(&grid, 0.0, 1.2);
        assert_eq!(f.tx, grid.x);
        assert_eq!(f.ty, grid.y);
    }

    #[test]
    fn rotation_scaling_theta_half_pi_is_first_order_rotation() {
        let grid = make_grid(5).unwrap();
        let alpha = 0.25;
        let f = displace_rotation_scaling(&grid, alpha, PI / 2.0);
        for p in 0..25 {
            let (x, y) = (grid.x[p], grid.y[p]);
            // cos(pi/2) is ~6e-17 rather than 0; allow that roundoff.
            assert!((f.tx[p] - (x + alpha * y)).abs() < 1e-15);
            assert!((f.ty[p] - (y - alpha * x)).abs() < 1e-15);
        }
    }

    #[test]
    fn rotation_scaling_theta_zero_is_pure_scaling_exactly() {
        let grid = make_grid(5).unwrap();
        // Dyadic alpha on an integer grid: both routes are exact in floats.
        let alpha = 0.25;
        let f = displace_rotation_scaling(&grid, alpha, 0.0);
        for p in 0..25 {
            assert_eq!(f.tx[p], (1.0 + alpha) * grid.x[p]);
            assert_eq!(f.ty[p], (1.0 + alpha) * grid.y[p]);
        }
    }

    #[test]
    fn rotation_scaling_center_is_fixed() {
        let grid = make_grid(5).unwrap();
        let f = displace_rotation_scaling(&grid, 0.7, 1.1);
        assert_eq!(f.tx[12], 0.0);
        assert_eq!(f.ty[12], 0.0);
    }

    #[test]
    fn elastic_alpha_zero_is_identity_and_seed_deterministic() {
        let grid = make_grid(5).unwrap();
        let f = displace_elastic(&grid, 0.0, 1.0, &mut rng_from(1)).unwrap();
        assert_eq!(f.tx, grid.x);
        assert_eq!(f.ty, grid.y);

        let a = displace_elastic(&grid, 0.5, 1.0, &mut rng_from(9)).unwrap();
        let b = displace_elastic(&grid, 0.5, 1.0, &mut rng_from(9)).unwrap();
        assert_eq!(a.tx, b.tx);
        assert_eq!(a.ty, b.ty);
    }

    #[test]
    fn elastic_displacement_bounded_by_alpha_terms() {
        // |field - identity| <= alpha * (max affine shift contribution) +
        // peak bump density; checked against direct evaluation.
        let grid = make_grid(5).unwrap();
        let alpha = 0.3;
        let sigma = 1.0;
        for seed in 0..20u64 {
            let f = displace_elastic(&grid, alpha, sigma, &mut rng_from(seed)).unwrap();
            let peak = alpha / (2.0 * PI * sigma * sigma).sqrt();
            // Corner displacements <= alpha each; an affine interpolation of
            // corner shifts over the grid (incl. the extrapolated corner) is
            // bounded by 3*alpha; the bump adds at most `peak` per axis.
            let bound = 3.0 * alpha + peak + 1e-12;
            for p in 0..25 {
                assert!((f.tx[p] - grid.x[p]).abs() <= bound);
                assert!((f.ty[p] - grid.y[p]).abs() <= bound);
            }
        }
    }

    #[test]
    fn resample_identity_field_is_exact_copy() {
        let grid = make_grid(5).unwrap();
        let mut rng = rng_from(2);
        let f: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let id = DisplacementField::identity(&grid);
        assert_eq!(resample_bilinear(&f, 5, 5, &id), f);
    }

    #[test]
    fn resample_constant_in_bounds_preserves_constant() {
        let grid = make_grid(5).unwrap();
        // Small in-bounds displacement: partition of unity keeps constants.
        let field = displace_rotation_scaling(&grid, 0.1, 0.3);
        let f = vec![3.25; 25];
        let out = resample_bilinear(&f, 5, 5, &field);
        for p in 0..25 {
            let (x, y) = (field.tx[p], field.ty[p]);
            if x.abs() <= 2.0 && y.abs() <= 2.0 {
                assert!((out[p] - 3.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_is_linear_in_function_values() {
        let grid = make_grid(5).unwrap();
        let field = displace_elastic(&grid, 0.8, 1.0, &mut rng_from(4)).unwrap();
        let mut rng = rng_from(5);
        let f: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = resample_bilinear(&combo, 5, 5, &field);
        let rf = resample_bilinear(&f, 5, 5, &field);
        let rg = resample_bilinear(&g, 5, 5, &field);
        for p in 0..25 {
            assert!((lhs[p] - (a * rf[p] + b * rg[p])).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let mut rng = rng_from(6);
        let f: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(blur_basis(&f, 5, 0.0), f);
        assert_eq!(blur_basis(&f, 5, 1e-7), f);
    }

    #[test]
    fn blur_semigroup_on_15x15() {
        // Blurring a unit-mass discretized Gaussian of width 1 with width 1
        // approximates a Gaussian of width sqrt(2); L2 error < 2%.
        let n = 15;
        let grid = centered_grid(n, n);
        let discrete_gauss = |s: f64| -> Vec<f64> {
            let mut g: Vec<f64> = (0..n * n)
                .map(|p| {
                    let (x, y) = (grid.x[p], grid.y[p]);
                    (-(x * x + y * y) / (2.0 * s * s)).exp()
                })
                .collect();
            let total: f64 = g.iter().sum();
            g.iter_mut().for_each(|v| *v /= total);
            g
        };
        let start = discrete_gauss(1.0);
        let blurred = blur_plane(&start, n, n, 1.0);
        let target = discrete_gauss(std::f64::consts::SQRT_2);
        let diff: Vec<f64> = blurred.iter().zip(&target).map(|(a, b)| a - b).collect();
        let rel = l2(&diff) / l2(&target);
        assert!(rel < 0.02, "semigroup L2 error {}", rel);
    }

    #[test]
    fn blur_preserves_or_loses_mass_only_to_crop() {
        let mut rng = rng_from(7);
        let f: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
        let before: f64 = f.iter().sum();
        let after: f64 = blur_basis(&f, 5, 1.0).iter().sum();
        assert!(after <= before + 1e-12);
    }

    #[test]
    fn noise_alpha_zero_identity_and_additive() {
        let grid = make_grid(5).unwrap();
        let mut rng = rng_from(8);
        let f: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let same = noise_basis(&f, &grid, 0.0, 1.0);
        assert_eq!(same, f);

        // noise(f) - f is independent of f and equals the bump on zero input.
        let g: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nf = noise_basis(&f, &grid, 0.3, 1.0);
        let ng = noise_basis(&g, &grid, 0.3, 1.0);
        let zero = noise_basis(&vec![0.0; 25], &grid, 0.3, 1.0);
        let center = zero[12];
        assert!(zero.iter().all(|&v| v <= center));
        for p in 0..25 {
            assert!(((nf[p] - f[p]) - (ng[p] - g[p])).abs() < 1e-15);
            assert!(((nf[p] - f[p]) - zero[p]).abs() < 1e-15);
        }
    }

    #[test]
    fn occlusion_radius_zero_zeroes_at_most_center_pixel() {
        let grid = make_grid(5).unwrap();
        let mask = occlusion_mask(&grid, 0.0, &mut rng_from(10));
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn occlusion_radius_covering_grid_zeroes_everything() {
        let grid = make_grid(5).unwrap();
        let f = vec![1.0; 25];
        let out = occlude_basis(&f, &grid, 5.0 * std::f64::consts::SQRT_2, &mut rng_from(3));
        assert_eq!(out, vec![0.0; 25]);
    }

    #[test]
    fn occlusion_count_matches_distance_scan_oracle() {
        let grid = make_grid(5).unwrap();
        for seed in 0..10u64 {
            let radius = 1.5;
            let mask = occlusion_mask(&grid, radius, &mut rng_from(seed));
            // Re-derive the seeded center the same way, then scan distances.
            let mut rng = rng_from(seed);
            let ci = rng.gen_range(0..5usize);
            let cj = rng.gen_range(0..5usize);
            let expected = (0..25)
                .filter(|&p| {
                    let dx = grid.x[p] - grid.x[ci * 5 + cj];
                    let dy = grid.y[p] - grid.y[ci * 5 + cj];
                    (dx * dx + dy * dy).sqrt() <= radius
                })
                .count();
            assert_eq!(mask.iter().filter(|&&m| m).count(), expected);
        }
    }

    #[test]
    fn snow_zero_lines_is_identity_and_seeded_masks_repeat() {
        let grid = make_grid(5).unwrap();
        let f: Vec<f64> = (0..25).map(|i| i as f64).collect();
        assert_eq!(snow_basis(&f, &grid, 0, (-2.0, 2.0), &mut rng_from(1)), f);
        let a = snow_mask(&grid, 3, (-2.0, 2.0), &mut rng_from(5));
        let b = snow_mask(&grid, 3, (-2.0, 2.0), &mut rng_from(5));
        assert_eq!(a, b);
    }

    #[test]
    fn snow_matches_rasterizer_oracle() {
        let grid = make_grid(7).unwrap();
        for seed in 0..10u64 {
            let mask = snow_mask(&grid, 2, (-2.0, 2.0), &mut rng_from(seed));
            // Independent integer-stepping rasterizer from the same draws.
            let mut rng = rng_from(seed);
            let mut expect = vec![false; 49];
            for _ in 0..2 {
                let i0 = rng.gen_range(0..7usize) as f64;
                let j0 = rng.gen_range(0..7usize) as f64;
                let s: f64 = rng.gen_range(-2.0..2.0);
                if s.abs() <= 1.0 {
                    for col in 0..7usize {
                        let row = (i0 + s * (col as f64 - j0)).round() as i64;
                        if (0..7).contains(&row) {
                            expect[row as usize * 7 + col] = true;
                        }
                    }
                } else {
                    for row in 0..7usize {
                        let col = (j0 + (row as f64 - i0) / s).round() as i64;
                        if (0..7).contains(&col) {
                            expect[row * 7 + col as usize] = true;
                        }
                    }
                }
            }
            assert_eq!(mask, expect);
        }
    }

    #[test]
    fn bank_identity_only_and_alpha_zero_branches() {
        let spec = BasisSpec::with_count(5, 1.5, 6).unwrap();
        let base = eval_basis(&spec, &make_grid(5).unwrap()).unwrap();
        let bank = build_transform_bank(&base, &[]).unwrap();
        assert_eq!(bank.branches(), 1);
        assert_eq!(bank.branch(0), base.data.as_slice());

        let zero_specs = vec![
            TransformSpec::RotationScaling { alpha: 0.0, theta: 0.4 },
            TransformSpec::RotationScaling { alpha: 0.0, theta: 1.0 },
        ];
        let bank = build_transform_bank(&base, &zero_specs).unwrap();
        for b in 1..bank.branches() {
            assert_eq!(bank.branch(b), bank.branch(0));
        }
    }

    #[test]
    fn bank_alpha_zero_identity_for_every_kind() {
        let spec = BasisSpec::with_count(5, 1.5, 4).unwrap();
        let base = eval_basis(&spec, &make_grid(5).unwrap()).unwrap();
        let zeroish: Vec<TransformSpec> = vec![
            TransformSpec::RotationScaling { alpha: 0.0, theta: 0.7 },
            TransformSpec::Elastic { alpha: 0.0, sigma: 1.0, seed: 3 },
            TransformSpec::GaussianBlur { sigma: 0.0 },
            TransformSpec::GaussianNoise { alpha: 0.0, sigma: 1.0, random: false, seed: 0 },
            TransformSpec::SnowOcclusion { n_lines: 0, slope_lo: -1.0, slope_hi: 1.0, seed: 4 },
        ];
        for s in zeroish {
            let bank = build_transform_bank(&base, std::slice::from_ref(&s)).unwrap();
            assert_eq!(bank.branch(1), bank.branch(0), "kind {:?}", s.kind());
        }
    }

    #[test]
    fn bank_rejects_mixed_kinds() {
        let spec = BasisSpec::with_count(5, 1.5, 4).unwrap();
        let base = eval_basis(&spec, &make_grid(5).unwrap()).unwrap();
        let mixed = vec![
            TransformSpec::GaussianBlur { sigma: 0.5 },
            TransformSpec::Elastic { alpha: 0.5, sigma: 1.0, seed: 1 },
        ];
        assert!(build_transform_bank(&base, &mixed).is_err());
    }

    #[test]
    fn transform_commutes_with_linear_combination() {
        // T[sum w_i psi_i] == sum w_i T[psi_i] for the linear kinds.
        let spec = BasisSpec::complete(5, 1.5).unwrap();
        let base = eval_basis(&spec, &make_grid(5).unwrap()).unwrap();
        let mut rng = rng_from(33);
        let w: Vec<f64> = (0..base.n_basis).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kinds: Vec<TransformSpec> = vec![
            TransformSpec::RotationScaling { alpha: 0.4, theta: 0.9 },
            TransformSpec::Elastic { alpha: 0.8, sigma: 1.0, seed: 11 },
            TransformSpec::GaussianBlur { sigma: 0.8 },
            TransformSpec::ObjectOcclusion { radius: 1.2, seed: 12 },
            TransformSpec::SnowOcclusion { n_lines: 2, slope_lo: -2.0, slope_hi: 2.0, seed: 13 },
        ];
        for s in kinds {
            let bank = build_transform_bank(&base, std::slice::from_ref(&s)).unwrap();
            let kernel = synthesize_kernel(&w, &base).unwrap();
            let grid = make_grid(5).unwrap();
            let t_kernel = MaterializedTransform::from_spec(&s, &grid)
                .unwrap()
                .apply(&kernel, 5, 5);
            let synth_t = synthesize_kernel(&w, &bank.branch_stack(1)).unwrap();
            for p in 0..25 {
                assert!(
                    (t_kernel[p] - synth_t[p]).abs() < 1e-10,
                    "kind {:?}: {} vs {}",
                    s.kind(),
                    t_kernel[p],
                    synth_t[p]
                );
            }
        }
    }

    #[test]
    fn noise_difference_is_weight_independent_bump() {
        let spec = BasisSpec::with_count(5, 1.5, 9).unwrap();
        let base = eval_basis(&spec, &make_grid(5).unwrap()).unwrap();
        let grid = make_grid(5).unwrap();
        let s = TransformSpec::GaussianNoise { alpha: 0.25, sigma: 1.0, random: false, seed: 0 };
        let t = MaterializedTransform::from_spec(&s, &grid).unwrap();
        let mut rng = rng_from(40);
        let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel = synthesize_kernel(&w, &base).unwrap();
        let transformed = t.apply(&kernel, 5, 5);
        let bump_on_zero = t.apply(&vec![0.0; 25], 5, 5);
        for p in 0..25 {
            assert!(((transformed[p] - kernel[p]) - bump_on_zero[p]).abs() < 1e-15);
        }
    }

    #[test]
    fn banks_are_bit_reproducible() {
        let spec = BasisSpec::with_count(5, 1.5, 8).unwrap();
        let base = eval_basis(&spec, &make_grid(5).unwrap()).unwrap();
        let specs = default_branch_specs(TransformKind::Elastic, 4, 77);
        let a = build_transform_bank(&base, &specs).unwrap();
        let b = build_transform_bank(&base, &specs).unwrap();
        for i in 0..a.branches() {
            let bits_a: Vec<u64> = a.branch(i).iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.branch(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn default_branch_specs_ramp() {
        let specs = default_branch_specs(TransformKind::RotationScaling, 4, 0);
        let alphas: Vec<f64> = specs
            .iter()
            .map(|s| match s {
                TransformSpec::RotationScaling { alpha, .. } => *alpha,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(alphas, vec![0.075, 0.15, 0.3, 0.6]);
    }
}
