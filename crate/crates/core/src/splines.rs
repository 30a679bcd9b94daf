//! B-spline bases, even tensor-product surfaces and the monotone time warp.
//!
//! Bases use clamped knot vectors with uniformly spaced interior knots.
//! Surfaces are made even in each argument by tying coefficient `m` to its
//! mirror `K−1−m` (0-based), so on a domain symmetric about zero the surface
//! satisfies `a(u, v) = a(−u, v) = a(u, −v)`. Evaluation goes through the
//! *folded* basis `B_m + B_{K−1−m}`, which has `⌈K/2⌉` members.

use crate::{Error, Result};

/// Largest supported spline degree; lets the hot paths use stack buffers.
pub const MAX_DEGREE: usize = 7;

/// Slack allowed when a coordinate lands just outside the basis domain
/// through floating-point rounding.
const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    num_basis: usize,
    knots: Vec<f64>,
    lo: f64,
    hi: f64,
}

/// Builds a clamped basis with `num_basis` functions of the given degree on
/// `[lo, hi]`, interior knots equally spaced.
pub fn make_basis(num_basis: usize, degree: usize, lo: f64, hi: f64) -> Result<SplineBasis> {
    SplineBasis::uniform(num_basis, degree, lo, hi)
}

impl SplineBasis {
    pub fn uniform(num_basis: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::invalid(format!(
                "spline degree {degree} exceeds maximum {MAX_DEGREE}"
            )));
        }
        if num_basis < degree + 1 {
            return Err(Error::invalid(format!(
                "need at least {} basis functions for degree {degree}, got {num_basis}",
                degree + 1
            )));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("bad basis domain [{lo}, {hi}]")));
        }
        let segments = num_basis - degree;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        knots.extend(std::iter::repeat_n(lo, degree + 1));
        for i in 1..segments {
            knots.push(lo + (hi - lo) * i as f64 / segments as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(SplineBasis {
            degree,
            num_basis,
            knots,
            lo,
            hi,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Number of members of the folded (mirror-tied) basis.
    pub fn folded_len(&self) -> usize {
        self.num_basis.div_ceil(2)
    }

    fn check(&self, x: f64) -> Result<f64> {
        if x.is_nan() || x < self.lo - DOMAIN_SLACK || x > self.hi + DOMAIN_SLACK {
            return Err(Error::Domain {
                value: x,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(x.clamp(self.lo, self.hi))
    }

    /// Knot span `s` with `knots[s] <= x < knots[s+1]`; the right endpoint
    /// belongs to the last nonempty span.
    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let n = self.num_basis;
        if x >= self.knots[n] {
            return n - 1;
        }
        // upper_bound over the active knot range
        let mut lo = p;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x >= self.knots[mid] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Nonzero basis functions of degree `deg` at `x` in span `s`
    /// (indices `s−deg ..= s`), by the triangular Cox–de Boor scheme.
    fn basis_funs(&self, s: usize, x: f64, deg: usize, out: &mut [f64; MAX_DEGREE + 1]) {
        let t = &self.knots;
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        out[0] = 1.0;
        for j in 1..=deg {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { out[r] / denom } else { 0.0 };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Writes the `degree+1` nonzero values (and derivatives, when asked) at
    /// `x` and returns the index of the first one.
    pub fn eval_nonzero(
        &self,
        x: f64,
        vals: &mut [f64; MAX_DEGREE + 1],
        ders: Option<&mut [f64; MAX_DEGREE + 1]>,
    ) -> Result<usize> {
        let x = self.check(x)?;
        let p = self.degree;
        let s = self.span(x);
        self.basis_funs(s, x, p, vals);
        if let Some(ders) = ders {
            ders.iter_mut().for_each(|d| *d = 0.0);
            if p > 0 {
                let mut lower = [0.0; MAX_DEGREE + 1];
                self.basis_funs(s, x, p - 1, &mut lower);
                let t = &self.knots;
                let pf = p as f64;
                // lower[r] is N_{s-p+1+r, p-1}
                for (k, d) in ders.iter_mut().enumerate().take(p + 1) {
                    let i = s - p + k;
                    let mut acc = 0.0;
                    if k >= 1 {
                        let denom = t[i + p] - t[i];
                        if denom > 0.0 {
                            acc += pf * lower[k - 1] / denom;
                        }
                    }
                    if k < p {
                        let denom = t[i + p + 1] - t[i + 1];
                        if denom > 0.0 {
                            acc -= pf * lower[k] / denom;
                        }
                    }
                    *d = acc;
                }
            }
        }
        Ok(s - p)
    }

    /// All `K` basis values at `x`.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        let mut vals = [0.0; MAX_DEGREE + 1];
        let start = self.eval_nonzero(x, &mut vals, None)?;
        let mut out = vec![0.0; self.num_basis];
        out[start..=start + self.degree].copy_from_slice(&vals[..=self.degree]);
        Ok(out)
    }

    /// All `K` basis derivatives at `x`.
    pub fn eval_deriv(&self, x: f64) -> Result<Vec<f64>> {
        let mut vals = [0.0; MAX_DEGREE + 1];
        let mut ders = [0.0; MAX_DEGREE + 1];
        let start = self.eval_nonzero(x, &mut vals, Some(&mut ders))?;
        let mut out = vec![0.0; self.num_basis];
        out[start..=start + self.degree].copy_from_slice(&ders[..=self.degree]);
        Ok(out)
    }

    /// Folded basis values and derivatives: entry `a` collects basis
    /// functions `a` and `K−1−a`. Both slices must have `folded_len()` slots.
    pub fn eval_folded(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> Result<()> {
        let h = self.folded_len();
        debug_assert!(vals.len() >= h && ders.len() >= h);
        let mut v = [0.0; MAX_DEGREE + 1];
        let mut d = [0.0; MAX_DEGREE + 1];
        let start = self.eval_nonzero(x, &mut v, Some(&mut d))?;
        vals[..h].iter_mut().for_each(|x| *x = 0.0);
        ders[..h].iter_mut().for_each(|x| *x = 0.0);
        for r in 0..=self.degree {
            let a = fold_index(start + r, self.num_basis);
            vals[a] += v[r];
            ders[a] += d[r];
        }
        Ok(())
    }
}

/// Mirror-tied free index of basis function `m` (0-based) among `k`.
pub fn fold_index(m: usize, k: usize) -> usize {
    m.min(k - 1 - m)
}

/// Basis values at `x` (Cox–de Boor).
pub fn eval_basis(basis: &SplineBasis, x: f64) -> Result<Vec<f64>> {
    basis.eval(x)
}

/// Basis derivatives at `x` via the degree-lowering formula.
pub fn eval_basis_deriv(basis: &SplineBasis, x: f64) -> Result<Vec<f64>> {
    basis.eval_deriv(x)
}

/// Coefficients of an even tensor-product surface.
///
/// Only the `⌈K_u/2⌉ × ⌈K_v/2⌉` free coefficients are stored; the full grid
/// is derived through the mirror tie, so tied entries are equal by
/// construction. A `k_u` of zero marks a surface that is constant along its
/// first argument (a univariate spline in the second).
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceCoefficients {
    k_u: usize,
    k_v: usize,
    h_u: usize,
    h_v: usize,
    free: Vec<f64>,
}

impl SurfaceCoefficients {
    pub fn zeros(k_u: usize, k_v: usize) -> Self {
        let h_u = if k_u == 0 { 1 } else { k_u.div_ceil(2) };
        let h_v = k_v.div_ceil(2);
        SurfaceCoefficients {
            k_u,
            k_v,
            h_u,
            h_v,
            free: vec![0.0; h_u * h_v],
        }
    }

    /// Surface constant in its first argument.
    pub fn univariate(k_v: usize) -> Self {
        Self::zeros(0, k_v)
    }

    pub fn from_free(k_u: usize, k_v: usize, free: Vec<f64>) -> Result<Self> {
        let mut s = Self::zeros(k_u, k_v);
        if free.len() != s.free.len() {
            return Err(Error::dim("surface free coefficients", s.free.len(), free.len()));
        }
        s.free = free;
        Ok(s)
    }

    pub fn constant(k_u: usize, k_v: usize, c: f64) -> Self {
        let mut s = Self::zeros(k_u, k_v);
        s.free.iter_mut().for_each(|x| *x = c);
        s
    }

    pub fn k_u(&self) -> usize {
        self.k_u
    }

    pub fn k_v(&self) -> usize {
        self.k_v
    }

    /// Free-grid shape `(⌈K_u/2⌉, ⌈K_v/2⌉)`.
    pub fn free_shape(&self) -> (usize, usize) {
        (self.h_u, self.h_v)
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn free(&self) -> &[f64] {
        &self.free
    }

    pub fn free_mut(&mut self) -> &mut [f64] {
        &mut self.free
    }

    /// Grid entry `λ_{mm'}` (0-based) of the full tied grid.
    pub fn get(&self, m: usize, m_prime: usize) -> f64 {
        let a = if self.k_u == 0 { 0 } else { fold_index(m, self.k_u) };
        let b = fold_index(m_prime, self.k_v);
        self.free[a * self.h_v + b]
    }

    /// Full `K_u × K_v` grid, row `m`, column `m'`.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let rows = self.k_u.max(1);
        (0..rows)
            .map(|m| (0..self.k_v).map(|mp| self.get(m, mp)).collect())
            .collect()
    }

    /// Value and partials from precomputed folded basis values.
    #[inline]
    pub fn eval_folded(&self, fu: &[f64], dfu: &[f64], fv: &[f64], dfv: &[f64]) -> (f64, f64, f64) {
        let (mut val, mut du, mut dv) = (0.0, 0.0, 0.0);
        for a in 0..self.h_u {
            let row = &self.free[a * self.h_v..(a + 1) * self.h_v];
            let mut inner = 0.0;
            let mut inner_d = 0.0;
            for b in 0..self.h_v {
                inner += row[b] * fv[b];
                inner_d += row[b] * dfv[b];
            }
            val += fu[a] * inner;
            du += dfu[a] * inner;
            dv += fu[a] * inner_d;
        }
        (val, du, dv)
    }
}

/// Pair of bases spanning a surface's two arguments. A missing `u` basis
/// means the surface ignores its first argument.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceBasis {
    pub u: Option<SplineBasis>,
    pub v: SplineBasis,
}

impl SurfaceBasis {
    pub fn folded_u_len(&self) -> usize {
        self.u.as_ref().map_or(1, |b| b.folded_len())
    }

    pub fn folded_v_len(&self) -> usize {
        self.v.folded_len()
    }

    pub fn eval_folded_u(&self, u: f64, vals: &mut [f64], ders: &mut [f64]) -> Result<()> {
        match &self.u {
            Some(b) => b.eval_folded(u, vals, ders),
            None => {
                vals[0] = 1.0;
                ders[0] = 0.0;
                Ok(())
            }
        }
    }

    pub fn zero_surface(&self) -> SurfaceCoefficients {
        SurfaceCoefficients::zeros(self.u.as_ref().map_or(0, |b| b.num_basis()), self.v.num_basis())
    }
}

/// Evaluates `Σ_m Σ_m' λ_mm' B_m(u) B_m'(v)` with its exact partials.
pub fn eval_surface(
    coeffs: &SurfaceCoefficients,
    bx: &SplineBasis,
    bz: &SplineBasis,
    u: f64,
    v: f64,
) -> Result<(f64, f64, f64)> {
    if coeffs.k_u != bx.num_basis() || coeffs.k_v != bz.num_basis() {
        return Err(Error::invalid("surface coefficients do not match bases"));
    }
    let (hu, hv) = (bx.folded_len(), bz.folded_len());
    let mut fu = vec![0.0; hu];
    let mut dfu = vec![0.0; hu];
    let mut fv = vec![0.0; hv];
    let mut dfv = vec![0.0; hv];
    bx.eval_folded(u, &mut fu, &mut dfu)?;
    bz.eval_folded(v, &mut fv, &mut dfv)?;
    Ok(coeffs.eval_folded(&fu, &dfu, &fv, &dfv))
}

/// Monotone map `[0,1] → [0,1]` with spline coefficients given by the
/// normalized cumulative sums of latent increments `δ ∈ (0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneTimeFn {
    deltas: Vec<f64>,
}

impl MonotoneTimeFn {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        let tf = MonotoneTimeFn { deltas };
        tf.validate()?;
        Ok(tf)
    }

    /// `K′−1` equal increments, giving equally spaced coefficients.
    pub fn uniform(num_basis: usize) -> Self {
        MonotoneTimeFn {
            deltas: vec![0.5; num_basis.saturating_sub(1).max(1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return Err(Error::InvalidState("time function needs at least one increment".into()));
        }
        for (i, &d) in self.deltas.iter().enumerate() {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::InvalidState(format!("delta[{i}] = {d} outside (0,1)")));
            }
        }
        Ok(())
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn set_deltas(&mut self, deltas: &[f64]) {
        self.deltas.copy_from_slice(deltas);
    }

    pub fn num_basis(&self) -> usize {
        self.deltas.len() + 1
    }

    /// Spline coefficients `λ_1 = 0 ≤ … ≤ λ_K′ = 1`.
    pub fn coefficients(&self) -> Vec<f64> {
        let total: f64 = self.deltas.iter().sum();
        let mut out = Vec::with_capacity(self.deltas.len() + 1);
        out.push(0.0);
        let mut acc = 0.0;
        for (l, d) in self.deltas.iter().enumerate() {
            acc += d;
            if l + 1 == self.deltas.len() {
                out.push(1.0);
            } else {
                out.push(acc / total);
            }
        }
        out
    }

    /// Value and δ-gradient given the time basis values at `t`.
    ///
    /// With `S = Σ δ`, `∂F/∂δ_i = (Σ_{m>i} B_m(t) − F(t)) / S` (1-based).
    pub fn eval_with_basis(&self, basis_vals: &[f64], grad: &mut [f64]) -> f64 {
        let coeffs = self.coefficients();
        let value: f64 = coeffs.iter().zip(basis_vals).map(|(c, b)| c * b).sum();
        let total: f64 = self.deltas.iter().sum();
        let mut tail = 0.0;
        for i in (0..self.deltas.len()).rev() {
            tail += basis_vals[i + 1];
            grad[i] = (tail - value) / total;
        }
        value
    }
}

/// Evaluates the time warp and its gradient with respect to the increments.
pub fn eval_timefn(tf: &MonotoneTimeFn, basis: &SplineBasis, t: f64) -> Result<(f64, Vec<f64>)> {
    tf.validate()?;
    if basis.num_basis() != tf.num_basis() {
        return Err(Error::dim("time basis size", tf.num_basis(), basis.num_basis()));
    }
    let vals = basis.eval(t)?;
    let mut grad = vec![0.0; tf.deltas.len()];
    let value = tf.eval_with_basis(&vals, &mut grad);
    Ok((value, grad))
}
