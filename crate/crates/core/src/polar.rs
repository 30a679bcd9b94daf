//! Polar-angle parametrization of unit vectors.
//!
//! For `d`-dimensional `β` and angles `θ_1 … θ_{d−1}`:
//!
//! ```text
//! β_s = sin θ_1 ⋯ sin θ_{s−1} · cos θ_s     (s < d)
//! β_d = sin θ_1 ⋯ sin θ_{d−1}
//! ```
//!
//! with `θ_s ∈ [0, π]` for `s ≤ d−2` and `θ_{d−1} ∈ [0, 2π]`. An angle of
//! `π/2` zeroes its coordinate exactly; trigonometric values are snapped at
//! multiples of `π/2` so the correspondence holds in floating point.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::{Error, Result};

/// Prefix products below this are treated as zero in gradients.
const PREFIX_UNDERFLOW: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct PolarAngles {
    angles: Vec<f64>,
}

impl PolarAngles {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        let pa = PolarAngles { angles };
        pa.validate()?;
        Ok(pa)
    }

    /// All angles at `π/2`: the unit vector `e_d`.
    pub fn spiked(dim: usize) -> Self {
        PolarAngles {
            angles: vec![FRAC_PI_2; dim.saturating_sub(1)],
        }
    }

    /// Dimension `d` of the represented unit vector.
    pub fn dim(&self) -> usize {
        self.angles.len() + 1
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.angles
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.angles
    }

    /// Admissible interval of angle `r` (0-based).
    pub fn bound(&self, r: usize) -> (f64, f64) {
        angle_bound(r, self.angles.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.angles.len();
        for (r, &a) in self.angles.iter().enumerate() {
            let (lo, hi) = angle_bound(r, n);
            if !(a >= lo && a <= hi) {
                return Err(Error::invalid(format!(
                    "angle {r} = {a} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn to_unit(&self) -> Vec<f64> {
        polar_to_unit_slice(&self.angles)
    }
}

/// Bounds of angle `r` among `n` angles: `[0, π]`, or `[0, 2π]` for the last.
pub fn angle_bound(r: usize, n: usize) -> (f64, f64) {
    if r + 1 == n {
        (0.0, 2.0 * PI)
    } else {
        (0.0, PI)
    }
}

/// `(sin, cos)` with exact zeros and unit values at multiples of `π/2`.
#[inline]
pub fn sin_cos_snapped(a: f64) -> (f64, f64) {
    if a == 0.0 {
        (0.0, 1.0)
    } else if a == FRAC_PI_2 {
        (1.0, 0.0)
    } else if a == PI {
        (0.0, -1.0)
    } else if a == 3.0 * FRAC_PI_2 {
        (-1.0, 0.0)
    } else if a == 2.0 * PI {
        (0.0, 1.0)
    } else {
        a.sin_cos()
    }
}

fn polar_to_unit_slice(angles: &[f64]) -> Vec<f64> {
    let d = angles.len() + 1;
    let mut out = Vec::with_capacity(d);
    let mut prefix = 1.0;
    for &a in angles {
        let (s, c) = sin_cos_snapped(a);
        out.push(prefix * c);
        prefix *= s;
    }
    out.push(prefix);
    out
}

/// Unit vector of the given angles, built with a running sine product.
pub fn polar_to_unit(theta: &PolarAngles) -> Result<Vec<f64>> {
    theta.validate()?;
    Ok(theta.to_unit())
}

/// Inverse of [`polar_to_unit`]. Once the remaining tail of `β` is exactly
/// zero the leftover angles are set to `π/2`.
pub fn unit_to_polar(beta: &[f64]) -> Result<PolarAngles> {
    let d = beta.len();
    if d < 2 {
        return Err(Error::invalid("unit vector needs dimension at least 2"));
    }
    let norm2: f64 = beta.iter().map(|b| b * b).sum();
    if !((norm2.sqrt() - 1.0).abs() <= 1e-8) {
        return Err(Error::invalid(format!(
            "vector norm {} is not 1",
            norm2.sqrt()
        )));
    }
    // suffix sums of squares: tail[s] = Σ_{l≥s} β_l²
    let mut tail = vec![0.0; d + 1];
    for s in (0..d).rev() {
        tail[s] = tail[s + 1] + beta[s] * beta[s];
    }
    let mut angles = Vec::with_capacity(d - 1);
    for s in 0..d - 1 {
        if tail[s] == 0.0 {
            angles.push(FRAC_PI_2);
            continue;
        }
        if s == d - 2 {
            let mut a = beta[d - 1].atan2(beta[d - 2]);
            if a < 0.0 {
                a += 2.0 * PI;
            }
            angles.push(a);
        } else {
            angles.push(tail[s + 1].sqrt().atan2(beta[s]));
        }
    }
    Ok(PolarAngles { angles })
}

/// Gradient of `x · β(θ)` with respect to the angles, in `O(d)`.
///
/// With prefix products `P_{r−1} = Π_{l<r} sin θ_l` and the suffix
/// accumulator `Q_r = x_{r+1} c_{r+1} + sin θ_{r+1} Q_{r+1}` (`c_d = 1`),
/// the derivative is `P_{r−1} (cos θ_r Q_r − x_r sin θ_r)`.
pub fn grad_projection(theta: &PolarAngles, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != theta.dim() {
        return Err(Error::dim("projection vector", theta.dim(), x.len()));
    }
    let mut out = vec![0.0; theta.len()];
    grad_projection_into(theta.as_slice(), x, &mut out);
    Ok(out)
}

/// Slice form of [`grad_projection`]; `x.len()` must be `angles.len() + 1`.
pub fn grad_projection_into(angles: &[f64], x: &[f64], out: &mut [f64]) {
    let n = angles.len();
    debug_assert_eq!(x.len(), n + 1);
    debug_assert_eq!(out.len(), n);
    if n == 0 {
        return;
    }
    let sc: Vec<(f64, f64)> = angles.iter().map(|&a| sin_cos_snapped(a)).collect();
    // suffix pass: q[r] = Q_r
    let mut q = vec![0.0; n];
    q[n - 1] = x[n];
    for r in (0..n - 1).rev() {
        let (s_next, c_next) = sc[r + 1];
        q[r] = x[r + 1] * c_next + s_next * q[r + 1];
    }
    let mut prefix: f64 = 1.0;
    for r in 0..n {
        let (s, c) = sc[r];
        out[r] = if prefix.abs() < PREFIX_UNDERFLOW {
            0.0
        } else {
            prefix * (c * q[r] - x[r] * s)
        };
        prefix *= s;
    }
}
