//! Fixed 2-D Gaussian–Hermite filter basis.
//!
//! Each basis function is `A * (1/sigma^2) * H_n(x/sigma) * H_m(y/sigma) *
//! exp(-(x^2+y^2)/(2 sigma^2))` discretized on an integer grid centered at
//! the filter origin. Kernels are synthesized as trainable linear
//! combinations of these functions; with `k*k` functions the basis is
//! complete and any `k x k` kernel is exactly representable.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Centered coordinate grid. `x` and `y` are row-major per-pixel coordinate
/// planes; for filters the spacing is one pixel and the center is `(0,0)`.
#[derive(Debug, Clone)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Centered grid for possibly rectangular, possibly even extents. Even
/// extents get half-integer coordinates.
pub(crate) fn centered_grid(h: usize, w: usize) -> Grid {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut x = Vec::with_capacity(h * w);
    let mut y = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            x.push(j as f64 - cx);
            y.push(i as f64 - cy);
        }
    }
    Grid { h, w, x, y }
}

/// Integer-spaced filter grid centered at `(0,0)`; `k` must be odd.
pub fn make_grid(k: usize) -> Result<Grid> {
    if k % 2 == 0 {
        return Err(Error::Usage(format!("filter size must be odd, got {}", k)));
    }
    Ok(centered_grid(k, k))
}

/// Physicists' Hermite polynomial via the recurrence
/// `H_{n+1} = 2x H_n - 2n H_{n-1}` with `H_0 = 1`, `H_1 = 2x`.
pub fn hermite(n: u32, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0 * x,
        _ => {
            let mut prev = 1.0;
            let mut cur = 2.0 * x;
            for i in 1..n {
                let next = 2.0 * x * cur - 2.0 * f64::from(i) * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Parameters of the discretized basis.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisSpec {
    /// Odd filter size in pixels.
    pub k: usize,
    /// Gaussian envelope scale in pixels.
    pub sigma: f64,
    /// Hermite order pairs `(n, m)`, one per basis function.
    pub orders: Vec<(u32, u32)>,
    /// Scale each discretized function to unit L2 norm.
    pub normalize: bool,
}

impl BasisSpec {
    /// Complete basis: all `k*k` order pairs with `n, m < k`.
    pub fn complete(k: usize, sigma: f64) -> Result<Self> {
        Self::with_count(k, sigma, k * k)
    }

    /// The `count` lowest-order pairs. Orders are drawn from the pool
    /// `n, m in 0..k` sorted by total order `n+m` then `n`: on a k-point
    /// grid a polynomial of degree >= k coincides pointwise with a lower
    /// degree one, so capping the per-axis order keeps the discretized
    /// functions linearly independent.
    pub fn with_count(k: usize, sigma: f64, count: usize) -> Result<Self> {
        if k % 2 == 0 || k < 3 {
            return Err(Error::Usage(format!("basis size must be odd and >= 3, got {}", k)));
        }
        if !(sigma > 0.0) {
            return Err(Error::Usage(format!("basis sigma must be positive, got {}", sigma)));
        }
        if count == 0 || count > k * k {
            return Err(Error::Usage(format!(
                "basis function count must be in 1..={}, got {}",
                k * k,
                count
            )));
        }
        let mut orders: Vec<(u32, u32)> = (0..k as u32)
            .flat_map(|n| (0..k as u32).map(move |m| (n, m)))
            .collect();
        orders.sort_by_key(|&(n, m)| (n + m, n, m));
        orders.truncate(count);
        Ok(BasisSpec { k, sigma, orders, normalize: true })
    }

    pub fn n_basis(&self) -> usize {
        self.orders.len()
    }
}

/// Discretized basis functions, `n_basis` stacked `k x k` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisStack {
    pub n_basis: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl BasisStack {
    pub fn function(&self, i: usize) -> &[f64] {
        let kk = self.k * self.k;
        &self.data[i * kk..(i + 1) * kk]
    }
}

/// Evaluate every `(n, m)` pair of `spec` on `grid`.
pub fn eval_basis(spec: &BasisSpec, grid: &Grid) -> Result<BasisStack> {
    if grid.h != spec.k || grid.w != spec.k {
        return Err(Error::Shape(format!(
            "grid is {}x{} but basis expects {0}x{0} with k={}",
            grid.h, grid.w, spec.k
        )));
    }
    let kk = spec.k * spec.k;
    let s = spec.sigma;
    let mut data = Vec::with_capacity(spec.orders.len() * kk);
    for &(n, m) in &spec.orders {
        let start = data.len();
        for p in 0..kk {
            let (x, y) = (grid.x[p], grid.y[p]);
            let v = (1.0 / (s * s))
                * hermite(n, x / s)
                * hermite(m, y / s)
                * (-(x * x + y * y) / (2.0 * s * s)).exp();
            data.push(v);
        }
        if spec.normalize {
            let norm = data[start..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 0.0 {
                return Err(Error::Numerical(format!(
                    "basis function ({},{}) vanishes on the grid",
                    n, m
                )));
            }
            data[start..].iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(BasisStack { n_basis: spec.orders.len(), k: spec.k, data })
}

/// Weighted sum of basis functions: `kappa = sum_i w_i psi_i`.
pub fn synthesize_kernel(w: &[f64], basis: &BasisStack) -> Result<Vec<f64>> {
    if w.len() != basis.n_basis {
        return Err(Error::Shape(format!(
            "{} weights for {} basis functions",
            w.len(),
            basis.n_basis
        )));
    }
    let kk = basis.k * basis.k;
    let mut out = vec![0.0; kk];
    for (i, &wi) in w.iter().enumerate() {
        for (o, &f) in out.iter_mut().zip(basis.function(i)) {
            *o += wi * f;
        }
    }
    Ok(out)
}

/// Least-squares projection of a `k x k` kernel onto the basis. For a
/// complete basis the reconstruction is exact to machine precision.
pub fn project_kernel(basis: &BasisStack, kernel: &[f64]) -> Result<Vec<f64>> {
    let kk = basis.k * basis.k;
    if kernel.len() != kk {
        return Err(Error::Shape(format!(
            "kernel has {} values, expected {}",
            kernel.len(),
            kk
        )));
    }
    // Columns are the vectorized basis functions.
    let a = DMatrix::from_fn(kk, basis.n_basis, |r, c| basis.function(c)[r]);
    let b = DMatrix::from_column_slice(kk, 1, kernel);
    let svd = a.svd(true, true);
    let w = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::Numerical(format!("basis projection failed: {}", e)))?;
    Ok(w.column(0).iter().copied().collect())
}

/// Gram matrix `G[i][j] = <psi_i, psi_j>` of the discretized functions.
pub fn gram_matrix(basis: &BasisStack) -> Vec<f64> {
    let n = basis.n_basis;
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = basis
                .function(i)
                .iter()
                .zip(basis.function(j))
                .map(|(a, b)| a * b)
                .sum();
            g[i * n + j] = dot;
            g[j * n + i] = dot;
        }
    }
    g
}

/// Numerical rank and condition number of the Gram matrix via SVD.
pub fn gram_rank_cond(basis: &BasisStack) -> (usize, f64) {
    let n = basis.n_basis;
    let g = gram_matrix(basis);
    let m = DMatrix::from_row_slice(n, n, &g);
    let svd = m.svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let smax = sv[0];
    let rank = sv.iter().filter(|&&s| s > smax * n as f64 * f64::EPSILON).count();
    let smin = *sv.last().unwrap();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    (rank, cond)
}
