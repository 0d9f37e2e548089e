//! Kernel density estimates used for the representation plots.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{self, ExecPolicy};
use crate::tensor::Tensor;

/// Modified Bessel function of the first kind, order zero, by power series.
///
/// Terms are added until one falls below `1e-15` relative to the running sum.
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < 1e-15 * sum {
            return sum;
        }
        k += 1.0;
    }
}

/// Density samples on a uniform grid over `[0, 2π)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeCircle {
    pub theta: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCircle {
    /// Periodic trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        let h = 2.0 * PI / self.theta.len() as f64;
        self.density.iter().sum::<f64>() * h
    }
}

/// Von Mises-Fisher kernel density of angles on the circle.
pub fn vmf_kde(angles: &[f64], kappa: f64, grid_size: usize) -> Result<KdeCircle> {
    if angles.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if !(kappa > 0.0) || grid_size < 8 {
        return Err(Error::Config(format!(
            "vmf_kde needs kappa > 0 and grid_size >= 8 (got {kappa}, {grid_size})"
        )));
    }
    // exp(k cos) / I0(k) evaluated as exp(k (cos - 1)) / (I0(k) e^-k)
    let norm = angles.len() as f64 * 2.0 * PI * bessel_i0(kappa) * (-kappa).exp();
    let theta: Vec<f64> = (0..grid_size)
        .map(|k| 2.0 * PI * k as f64 / grid_size as f64)
        .collect();
    let density = parallel::map_indices(ExecPolicy::default(), grid_size, |k| {
        let th = theta[k];
        angles
            .iter()
            .map(|&a| (kappa * ((th - a).cos() - 1.0)).exp())
            .sum::<f64>()
            / norm
    });
    Ok(KdeCircle { theta, density })
}

/// Rectangular evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2d {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2d {
    pub fn square(half_width: f64, n: usize) -> Self {
        Self {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
            nx: n,
            ny: n,
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        linspace(self.y_min, self.y_max, self.ny)
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(a + b) / 2.0];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Density on a 2-D grid; `density[iy * nx + ix]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdePlane {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdePlane {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.density[iy * self.xs.len() + ix]
    }
}

/// Product-Gaussian KDE with an isotropic bandwidth.
pub fn gaussian_kde_2d(points: &Tensor, bandwidth: f64, grid: Grid2d) -> Result<KdePlane> {
    let (n, d) = points.require_matrix("gaussian_kde_2d")?;
    if d != 2 {
        return Err(Error::Shape(format!(
            "gaussian_kde_2d expects [N, 2], got width {d}"
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let xs = grid.xs();
    let ys = grid.ys();
    let norm = (n.max(1) as f64) * 2.0 * PI * bandwidth * bandwidth;
    let inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let rows = parallel::map_indices(ExecPolicy::default(), ys.len(), |iy| {
        xs.iter()
            .map(|&x| {
                points
                    .row_iter()
                    .map(|p| {
                        let (dx, dy) = (x - p[0], ys[iy] - p[1]);
                        (-(dx * dx + dy * dy) * inv2h2).exp()
                    })
                    .sum::<f64>()
                    / norm
            })
            .collect::<Vec<f64>>()
    });
    Ok(KdePlane {
        xs,
        ys,
        density: rows.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn i0_reference() {
        assert_eq!(bessel_i0(0.0), 1.0);
        assert!((bessel_i0(4.0) - 11.30192195213633).abs() < 1e-11);
        assert!((bessel_i0(1.0) - 1.2660658777520082).abs() < 1e-14);
    }

    #[test]
    fn vmf_single_peak() {
        let k = vmf_kde(&[0.0], 4.0, 360).unwrap();
        let want = 4f64.exp() / (2.0 * PI * bessel_i0(4.0));
        assert!((k.density[0] - want).abs() < 1e-12);
        assert!((k.density[0] - 0.7689).abs() < 1e-4);
        let max = k.density.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, k.density[0]);
    }

    #[test]
    fn vmf_normalized_and_symmetric() {
        let k = vmf_kde(&[0.3, 0.3 + PI], 10.0, 256).unwrap();
        assert!((k.integral() - 1.0).abs() < 1e-2);
        for i in 0..128 {
            assert!((k.density[i] - k.density[i + 128]).abs() < 1e-12);
        }
        assert!(vmf_kde(&[], 1.0, 16).is_err());
        assert!(vmf_kde(&[0.0], 1.0, 4).is_err());
    }

    #[test]
    fn kde_2d_peak_and_symmetry() {
        let p = Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let grid = Grid2d::square(1.0, 21);
        let k = gaussian_kde_2d(&p, 0.1, grid).unwrap();
        let (mut best, mut bi) = (f64::MIN, 0);
        for (i, &v) in k.density.iter().enumerate() {
            assert!(v >= 0.0);
            if v > best {
                best = v;
                bi = i;
            }
        }
        assert_eq!((bi % 21, bi / 21), (13, 8));

        let two = Tensor::from_rows(&[vec![0.4, 0.1], vec![-0.4, -0.1]]).unwrap();
        let k = gaussian_kde_2d(&two, 0.2, grid).unwrap();
        for iy in 0..21 {
            for ix in 0..21 {
                assert!((k.at(ix, iy) - k.at(20 - ix, 20 - iy)).abs() < 1e-10);
            }
        }
    }
}
