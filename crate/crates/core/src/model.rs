//! Data, parameter state, likelihood, gradients and conjugate conditionals.
//!
//! The mean of observation `(i, j, t)` is
//!
//! ```text
//! a_0j(u_i, v_ij) − a_1j(u_i, v_ij) F_0(t) + τ_i + offset
//! ```
//!
//! with `u_i = X_i·β(θ)` and `v_ij = Z_i·η(α)`. The base variant shares one
//! `α` and has no random effects; the region-wise variant carries one `α_j`
//! per region plus subject effects under a DP scale mixture; the no-SNP
//! variant drops `X` so the surfaces depend on `v` alone.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky_jittered, dot, sample_precision_form, RowMatrix};
use crate::polar::{angle_bound, grad_projection_into, PolarAngles};
use crate::priors::{
    dp_update, log_angle_prior_into, log_coeff_prior, sample_last_spike, sample_spike,
    DPMixtureState, DpHyper, InclusionIndicators, SpikeSlabConfig,
};
use crate::splines::{MonotoneTimeFn, SplineBasis, SurfaceBasis, SurfaceCoefficients};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Base,
    RandomEffectRegionwise,
    NoSnp,
}

impl VariantKind {
    pub fn uses_x(self) -> bool {
        !matches!(self, VariantKind::NoSnp)
    }

    pub fn has_random_effects(self) -> bool {
        !matches!(self, VariantKind::Base)
    }

    pub fn regionwise_alpha(self) -> bool {
        !matches!(self, VariantKind::Base)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantKind::Base => "base",
            VariantKind::RandomEffectRegionwise => "random_effect_regionwise",
            VariantKind::NoSnp => "no_snp",
        })
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(VariantKind::Base),
            "random_effect_regionwise" | "random-effect-regionwise" => {
                Ok(VariantKind::RandomEffectRegionwise)
            }
            "no_snp" | "no-snp" => Ok(VariantKind::NoSnp),
            other => Err(Error::invalid(format!("unknown variant '{other}'"))),
        }
    }
}

/// Model variant and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub kind: VariantKind,
    /// Prior standard deviation of surface coefficients.
    pub a: f64,
    /// Gamma shape of the error precision.
    pub d1: f64,
    /// Gamma rate of the error precision.
    pub d2: f64,
    pub spike: SpikeSlabConfig,
    /// Surface basis size per axis.
    pub basis_k: usize,
    /// Time-warp basis size.
    pub basis_kprime: usize,
    pub degree: usize,
    pub dp: DpHyper,
}

impl VariantSpec {
    pub fn new(kind: VariantKind, basis_k: usize, basis_kprime: usize) -> Self {
        VariantSpec {
            kind,
            a: 10.0,
            d1: 1.0,
            d2: 1.0,
            spike: SpikeSlabConfig::default(),
            basis_k,
            basis_kprime,
            degree: 3,
            dp: DpHyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::invalid(format!("a must be positive, got {}", self.a)));
        }
        if !(self.d1 > 0.0 && self.d2 > 0.0) {
            return Err(Error::invalid("d1 and d2 must be positive"));
        }
        if self.basis_k < self.degree + 1 || self.basis_kprime < self.degree + 1 {
            return Err(Error::invalid(format!(
                "basis sizes must be at least {} (got K={}, K'={})",
                self.degree + 1,
                self.basis_k,
                self.basis_kprime
            )));
        }
        Ok(())
    }
}

/// One observed outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject: usize,
    pub region: usize,
    /// Visit time on the original scale (months).
    pub time_raw: f64,
    /// Visit time rescaled to `[0, 1]`.
    pub time: f64,
    pub value: f64,
}

/// Longitudinal outcomes with unit-normalized covariate rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
    x: Option<RowMatrix>,
    z: RowMatrix,
    regions: usize,
}

fn normalize_rows(m: &mut RowMatrix, name: &str) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("{name} row {i}")));
        }
        if norm == 0.0 {
            return Err(Error::invalid(format!("{name} row {i} is identically zero")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

impl Dataset {
    /// Builds a dataset, normalizing every covariate row to unit length.
    pub fn new(
        observations: Vec<Observation>,
        x: Option<RowMatrix>,
        mut z: RowMatrix,
        regions: usize,
    ) -> Result<Self> {
        let n = z.rows();
        if n == 0 {
            return Err(Error::Empty("no subjects".into()));
        }
        if regions == 0 {
            return Err(Error::invalid("region count must be positive"));
        }
        let x = match x {
            Some(mut x) => {
                if x.rows() != n {
                    return Err(Error::dim("rows of X", n, x.rows()));
                }
                normalize_rows(&mut x, "X")?;
                Some(x)
            }
            None => None,
        };
        normalize_rows(&mut z, "Z")?;
        for (r, o) in observations.iter().enumerate() {
            if o.subject >= n {
                return Err(Error::invalid(format!(
                    "observation {r}: subject {} outside 0..{n}",
                    o.subject
                )));
            }
            if o.region >= regions {
                return Err(Error::invalid(format!(
                    "observation {r}: region {} outside 0..{regions}",
                    o.region
                )));
            }
            if !(0.0..=1.0).contains(&o.time) {
                return Err(Error::Domain {
                    value: o.time,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
            if !o.value.is_finite() {
                return Err(Error::NonFinite(format!("observation {r} value")));
            }
        }
        Ok(Dataset {
            observations,
            x,
            z,
            regions,
        })
    }

    /// Same covariates with a different set of observations.
    pub fn with_observations(&self, observations: Vec<Observation>) -> Result<Self> {
        Dataset::new(observations, self.x.clone(), self.z.clone(), self.regions)
    }

    /// Same design with outcome values replaced (in observation order).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.observations.len() {
            return Err(Error::dim("outcome values", self.observations.len(), values.len()));
        }
        let mut out = self.clone();
        for (o, &v) in out.observations.iter_mut().zip(values) {
            o.value = v;
        }
        Ok(out)
    }

    pub fn without_x(&self) -> Self {
        let mut out = self.clone();
        out.x = None;
        out
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn x(&self) -> Option<&RowMatrix> {
        self.x.as_ref()
    }

    pub fn z(&self) -> &RowMatrix {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.z.rows()
    }

    pub fn p(&self) -> usize {
        self.x.as_ref().map_or(0, |x| x.cols())
    }

    pub fn k(&self) -> usize {
        self.z.cols()
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn num_obs(&self) -> usize {
        self.observations.len()
    }

    /// Distinct visit times of subject `i`.
    pub fn visits(&self, i: usize) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .observations
            .iter()
            .filter(|o| o.subject == i)
            .map(|o| o.time)
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

/// All sampled unknowns.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub theta: Option<PolarAngles>,
    pub gamma: Option<InclusionIndicators>,
    pub alpha: Vec<PolarAngles>,
    pub intercept: Vec<SurfaceCoefficients>,
    pub slope: Vec<SurfaceCoefficients>,
    pub timefn: MonotoneTimeFn,
    pub sigma2: f64,
    pub random_effects: Vec<f64>,
    /// Global level absorbing the mean of the random effects.
    pub offset: f64,
    pub dp: Option<DPMixtureState>,
}

impl ModelState {
    pub fn beta(&self) -> Option<Vec<f64>> {
        self.theta.as_ref().map(|t| t.to_unit())
    }

    pub fn eta(&self, a: usize) -> Vec<f64> {
        self.alpha[a].to_unit()
    }

    /// Checks every component invariant.
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.theta {
            t.validate()?;
            let g = self
                .gamma
                .as_ref()
                .ok_or_else(|| Error::InvalidState("angles without indicators".into()))?;
            if g.len() != t.len() {
                return Err(Error::dim("indicators", t.len(), g.len()));
            }
        }
        for a in &self.alpha {
            a.validate()?;
        }
        self.timefn.validate()?;
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidState(format!("sigma2 = {}", self.sigma2)));
        }
        if self.random_effects.iter().any(|v| !v.is_finite()) || !self.offset.is_finite() {
            return Err(Error::NonFinite("random effects".into()));
        }
        for s in self.intercept.iter().chain(&self.slope) {
            if s.free().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("surface coefficients".into()));
            }
        }
        Ok(())
    }
}

/// Gradients of the log posterior for the non-conjugate blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBlocks {
    pub theta: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub deltas: Vec<f64>,
}

/// Continuous block updated by HMC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    /// Angles `θ_start..θ_end`.
    Theta { start: usize, end: usize },
    Alpha(usize),
    Deltas,
}

#[derive(Clone, Copy, Debug, Default)]
struct Needs {
    theta: bool,
    alpha: bool,
    delta: bool,
}

struct Eval {
    rss: f64,
    wu: Vec<f64>,
    wv: Vec<f64>,
    gdelta: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Group {
    subject: usize,
    region: usize,
    start: usize,
    end: usize,
}

/// Per-subject folded basis values of both surface arguments.
struct Bases {
    fu: Vec<f64>,
    dfu: Vec<f64>,
    fv: Vec<f64>,
    dfv: Vec<f64>,
}

/// A dataset paired with a variant: bases, observation grouping and the
/// current outcome vector.
#[derive(Clone, Debug)]
pub struct Model<'a> {
    data: &'a Dataset,
    spec: VariantSpec,
    surface: SurfaceBasis,
    time: SplineBasis,
    groups: Vec<Group>,
    /// Observation indices in group order.
    order: Vec<usize>,
    /// Outcomes in group order.
    y: Vec<f64>,
    /// Time basis rows in group order, `K′` per observation.
    tb: Vec<f64>,
    /// Number of observations per subject.
    counts: Vec<usize>,
}

impl<'a> Model<'a> {
    pub fn new(data: &'a Dataset, spec: VariantSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind.uses_x() {
            match data.x() {
                None => {
                    return Err(Error::invalid(format!(
                        "variant {} needs a high-dimensional covariate matrix",
                        spec.kind
                    )))
                }
                Some(x) if x.cols() < 2 => return Err(Error::dim("columns of X (minimum)", 2, x.cols())),
                _ => {}
            }
        }
        if data.k() < 2 {
            return Err(Error::dim("columns of Z (minimum)", 2, data.k()));
        }
        let v = SplineBasis::uniform(spec.basis_k, spec.degree, -1.0, 1.0)?;
        let u = if spec.kind.uses_x() {
            Some(v.clone())
        } else {
            None
        };
        let time = SplineBasis::uniform(spec.basis_kprime, spec.degree, 0.0, 1.0)?;

        let mut order: Vec<usize> = (0..data.num_obs()).collect();
        let obs = data.observations();
        order.sort_by_key(|&r| (obs[r].subject, obs[r].region));
        let mut groups: Vec<Group> = Vec::new();
        for (pos, &r) in order.iter().enumerate() {
            let o = &obs[r];
            match groups.last_mut() {
                Some(g) if g.subject == o.subject && g.region == o.region => g.end = pos + 1,
                _ => groups.push(Group {
                    subject: o.subject,
                    region: o.region,
                    start: pos,
                    end: pos + 1,
                }),
            }
        }
        let kp = spec.basis_kprime;
        let mut tb = vec![0.0; order.len() * kp];
        for (pos, &r) in order.iter().enumerate() {
            let vals = time.eval(obs[r].time)?;
            tb[pos * kp..(pos + 1) * kp].copy_from_slice(&vals);
        }
        let y = order.iter().map(|&r| obs[r].value).collect();
        let mut counts = vec![0; data.n()];
        for o in obs {
            counts[o.subject] += 1;
        }
        Ok(Model {
            data,
            spec,
            surface: SurfaceBasis { u, v },
            time,
            groups,
            order,
            y,
            tb,
            counts,
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn spec_mut(&mut self) -> &mut VariantSpec {
        &mut self.spec
    }

    pub fn surface_basis(&self) -> &SurfaceBasis {
        &self.surface
    }

    pub fn time_basis(&self) -> &SplineBasis {
        &self.time
    }

    pub fn num_obs(&self) -> usize {
        self.y.len()
    }

    /// Number of η directions: one shared or one per region.
    pub fn num_alpha(&self) -> usize {
        if self.spec.kind.regionwise_alpha() {
            self.data.regions()
        } else {
            1
        }
    }

    fn alpha_index(&self, region: usize) -> usize {
        if self.spec.kind.regionwise_alpha() {
            region
        } else {
            0
        }
    }

    /// Replaces the outcome vector (given in observation order).
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.y.len() {
            return Err(Error::dim("outcome values", self.y.len(), values.len()));
        }
        for (pos, &r) in self.order.iter().enumerate() {
            self.y[pos] = values[r];
        }
        Ok(())
    }

    /// Outcomes in observation order.
    pub fn values(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.y.len()];
        for (pos, &r) in self.order.iter().enumerate() {
            out[r] = self.y[pos];
        }
        out
    }

    /// Starting point: angles at the spike mode, `α` at `π/2`, `δ = 0.5`,
    /// zero surfaces, `σ²` at the sample variance, indicators off.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelState> {
        let mode = self.spec.spike.spike_mode();
        let (theta, gamma) = if self.spec.kind.uses_x() {
            let p = self.data.p();
            (
                Some(PolarAngles::new(vec![mode; p - 1])?),
                Some(InclusionIndicators::all(p - 1, false)),
            )
        } else {
            (None, None)
        };
        let k = self.data.k();
        let alpha = vec![PolarAngles::new(vec![PI / 2.0; k - 1])?; self.num_alpha()];
        let j = self.data.regions();
        let mean = self.y.iter().sum::<f64>() / self.y.len().max(1) as f64;
        let var = self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (self.y.len().max(2) - 1) as f64;
        let (random_effects, dp) = if self.spec.kind.has_random_effects() {
            let dp = DPMixtureState::sample_prior(self.spec.dp, self.data.n(), rng)?;
            (vec![0.0; self.data.n()], Some(dp))
        } else {
            (Vec::new(), None)
        };
        Ok(ModelState {
            theta,
            gamma,
            alpha,
            intercept: vec![self.surface.zero_surface(); j],
            slope: vec![self.surface.zero_surface(); j],
            timefn: MonotoneTimeFn::uniform(self.spec.basis_kprime),
            sigma2: if var > 0.0 && var.is_finite() { var } else { 1.0 },
            random_effects,
            offset: 0.0,
            dp,
        })
    }

    /// Joint draw of every unknown from its prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelState> {
        let cfg = &self.spec.spike;
        let (theta, gamma) = if self.spec.kind.uses_x() {
            let n = self.data.p() - 1;
            let gamma: Vec<bool> = (0..n).map(|_| rng.random_bool(cfg.q())).collect();
            let angles = (0..n)
                .map(|r| {
                    let last = r + 1 == n;
                    let (lo, hi) = angle_bound(r, n);
                    match (gamma[r], last) {
                        (true, _) => rng.random_range(lo..hi),
                        (false, false) => sample_spike(cfg, rng),
                        (false, true) => sample_last_spike(cfg, rng),
                    }
                })
                .collect();
            (
                Some(PolarAngles::new(angles)?),
                Some(InclusionIndicators::new(gamma)),
            )
        } else {
            (None, None)
        };
        let k = self.data.k();
        let alpha = (0..self.num_alpha())
            .map(|_| {
                let angles = (0..k - 1)
                    .map(|r| {
                        let (lo, hi) = angle_bound(r, k - 1);
                        rng.random_range(lo..hi)
                    })
                    .collect();
                PolarAngles::new(angles)
            })
            .collect::<Result<Vec<_>>>()?;
        let coef = Normal::new(0.0, self.spec.a).expect("positive scale");
        let mut draw_surface = || {
            let mut s = self.surface.zero_surface();
            s.free_mut().iter_mut().for_each(|v| *v = coef.sample(rng));
            s
        };
        let j = self.data.regions();
        let intercept: Vec<_> = (0..j).map(|_| draw_surface()).collect();
        let slope: Vec<_> = (0..j).map(|_| draw_surface()).collect();
        let deltas = (0..self.spec.basis_kprime - 1)
            .map(|_| rng.random_range(f64::EPSILON..1.0))
            .collect();
        let precision = Gamma::new(self.spec.d1, 1.0 / self.spec.d2)
            .expect("positive gamma")
            .sample(rng);
        let (random_effects, dp) = if self.spec.kind.has_random_effects() {
            let dp = DPMixtureState::sample_prior(self.spec.dp, self.data.n(), rng)?;
            let tau = (0..self.data.n())
                .map(|i| Normal::new(0.0, dp.variance_of(i).sqrt()).unwrap().sample(rng))
                .collect();
            (tau, Some(dp))
        } else {
            (Vec::new(), None)
        };
        Ok(ModelState {
            theta,
            gamma,
            alpha,
            intercept,
            slope,
            timefn: MonotoneTimeFn::new(deltas)?,
            sigma2: 1.0 / precision,
            random_effects,
            offset: 0.0,
            dp,
        })
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        if self.spec.kind.uses_x() {
            let t = state
                .theta
                .as_ref()
                .ok_or_else(|| Error::InvalidState("missing angles for X".into()))?;
            if t.dim() != self.data.p() {
                return Err(Error::dim("direction of X", self.data.p(), t.dim()));
            }
        } else if state.theta.is_some() {
            return Err(Error::InvalidState("variant without X carries angles".into()));
        }
        if state.alpha.len() != self.num_alpha() {
            return Err(Error::dim("number of Z directions", self.num_alpha(), state.alpha.len()));
        }
        if state.intercept.len() != self.data.regions() || state.slope.len() != self.data.regions() {
            return Err(Error::dim("surfaces per role", self.data.regions(), state.intercept.len()));
        }
        if state.timefn.num_basis() != self.spec.basis_kprime {
            return Err(Error::dim("time basis size", self.spec.basis_kprime, state.timefn.num_basis()));
        }
        if self.spec.kind.has_random_effects() && state.random_effects.len() != self.data.n() {
            return Err(Error::dim("random effects", self.data.n(), state.random_effects.len()));
        }
        Ok(())
    }

    fn bases(&self, state: &ModelState) -> Result<Bases> {
        let n = self.data.n();
        let hu = self.surface.folded_u_len();
        let hv = self.surface.folded_v_len();
        let na = self.num_alpha();
        let mut u = vec![0.0; n];
        if let (Some(theta), Some(x)) = (&state.theta, self.data.x()) {
            let beta = theta.to_unit();
            for (i, ui) in u.iter_mut().enumerate() {
                *ui = dot(x.row(i), &beta).clamp(-1.0, 1.0);
            }
        }
        let mut fu = vec![0.0; n * hu];
        let mut dfu = vec![0.0; n * hu];
        for i in 0..n {
            self.surface.eval_folded_u(
                u[i],
                &mut fu[i * hu..(i + 1) * hu],
                &mut dfu[i * hu..(i + 1) * hu],
            )?;
        }
        let etas: Vec<Vec<f64>> = state.alpha.iter().map(|a| a.to_unit()).collect();
        let mut v = vec![0.0; n * na];
        let mut fv = vec![0.0; n * na * hv];
        let mut dfv = vec![0.0; n * na * hv];
        for i in 0..n {
            let zi = self.data.z().row(i);
            for (a, eta) in etas.iter().enumerate() {
                let idx = i * na + a;
                v[idx] = dot(zi, eta).clamp(-1.0, 1.0);
                self.surface.v.eval_folded(
                    v[idx],
                    &mut fv[idx * hv..(idx + 1) * hv],
                    &mut dfv[idx * hv..(idx + 1) * hv],
                )?;
            }
        }
        Ok(Bases {
            fu,
            dfu,
            fv,
            dfv,
        })
    }

    /// Single pass over the observations: residual sum of squares and the
    /// residual-weighted partials needed for the requested gradients.
    fn evaluate(&self, state: &ModelState, needs: Needs) -> Result<Eval> {
        self.check_state(state)?;
        let n = self.data.n();
        let na = self.num_alpha();
        let hu = self.surface.folded_u_len();
        let hv = self.surface.folded_v_len();
        let kp = self.spec.basis_kprime;
        let b = self.bases(state)?;
        let lambda = state.timefn.coefficients();
        let total: f64 = state.timefn.deltas().iter().sum();
        let mut rss = 0.0;
        let mut wu = vec![0.0; if needs.theta { n } else { 0 }];
        let mut wv = vec![0.0; if needs.alpha { n * na } else { 0 }];
        let mut gdelta = vec![0.0; if needs.delta { kp - 1 } else { 0 }];
        for g in &self.groups {
            let i = g.subject;
            let idx = i * na + self.alpha_index(g.region);
            let (fu, dfu) = (&b.fu[i * hu..(i + 1) * hu], &b.dfu[i * hu..(i + 1) * hu]);
            let (fv, dfv) = (&b.fv[idx * hv..(idx + 1) * hv], &b.dfv[idx * hv..(idx + 1) * hv]);
            let (a0, a0u, a0v) = state.intercept[g.region].eval_folded(fu, dfu, fv, dfv);
            let (a1, a1u, a1v) = state.slope[g.region].eval_folded(fu, dfu, fv, dfv);
            let shift = state.random_effects.get(i).copied().unwrap_or(0.0) + state.offset;
            let (mut su, mut sv) = (0.0, 0.0);
            for pos in g.start..g.end {
                let tb = &self.tb[pos * kp..(pos + 1) * kp];
                let f0 = dot(&lambda, tb);
                let r = self.y[pos] - (a0 - a1 * f0 + shift);
                rss += r * r;
                su += r * (a0u - a1u * f0);
                sv += r * (a0v - a1v * f0);
                if needs.delta {
                    let mut tail = 0.0;
                    for l in (0..kp - 1).rev() {
                        tail += tb[l + 1];
                        gdelta[l] -= r * a1 * (tail - f0) / total;
                    }
                }
            }
            if needs.theta {
                wu[i] += su;
            }
            if needs.alpha {
                wv[idx] += sv;
            }
        }
        let inv = 1.0 / state.sigma2;
        wu.iter_mut().chain(wv.iter_mut()).chain(gdelta.iter_mut()).for_each(|w| *w *= inv);
        Ok(Eval {
            rss,
            wu,
            wv,
            gdelta,
        })
    }

    fn loglik_from_rss(&self, rss: f64, sigma2: f64) -> f64 {
        let n = self.num_obs() as f64;
        -0.5 * n * (2.0 * PI * sigma2).ln() - rss / (2.0 * sigma2)
    }

    /// Mean of observation `(i, j, t)`.
    pub fn fitted_mean(&self, state: &ModelState, i: usize, j: usize, t: f64) -> Result<f64> {
        self.check_state(state)?;
        if i >= self.data.n() || j >= self.data.regions() {
            return Err(Error::invalid(format!("index ({i}, {j}) out of range")));
        }
        let (value, _) = self.regression_at(state, i, j, t)?;
        Ok(value + state.random_effects.get(i).copied().unwrap_or(0.0))
    }

    /// Regression function `a_0 − a_1 F_0 + offset` at one point, with `F_0`.
    fn regression_at(&self, state: &ModelState, i: usize, j: usize, t: f64) -> Result<(f64, f64)> {
        let hu = self.surface.folded_u_len();
        let hv = self.surface.folded_v_len();
        let mut fu = vec![0.0; hu];
        let mut dfu = vec![0.0; hu];
        let mut fv = vec![0.0; hv];
        let mut dfv = vec![0.0; hv];
        let u = match (&state.theta, self.data.x()) {
            (Some(th), Some(x)) => dot(x.row(i), &th.to_unit()).clamp(-1.0, 1.0),
            _ => 0.0,
        };
        let v = dot(self.data.z().row(i), &state.alpha[self.alpha_index(j)].to_unit()).clamp(-1.0, 1.0);
        self.surface.eval_folded_u(u, &mut fu, &mut dfu)?;
        self.surface.v.eval_folded(v, &mut fv, &mut dfv)?;
        let (a0, _, _) = state.intercept[j].eval_folded(&fu, &dfu, &fv, &dfv);
        let (a1, _, _) = state.slope[j].eval_folded(&fu, &dfu, &fv, &dfv);
        let mut grad = vec![0.0; self.spec.basis_kprime - 1];
        let f0 = state.timefn.eval_with_basis(&self.time.eval(t)?, &mut grad);
        Ok((a0 - a1 * f0 + state.offset, f0))
    }

    fn group_values(&self, state: &ModelState, with_effects: bool) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let na = self.num_alpha();
        let hu = self.surface.folded_u_len();
        let hv = self.surface.folded_v_len();
        let kp = self.spec.basis_kprime;
        let b = self.bases(state)?;
        let lambda = state.timefn.coefficients();
        let mut out = vec![0.0; self.num_obs()];
        for g in &self.groups {
            let i = g.subject;
            let idx = i * na + self.alpha_index(g.region);
            let (fu, dfu) = (&b.fu[i * hu..(i + 1) * hu], &b.dfu[i * hu..(i + 1) * hu]);
            let (fv, dfv) = (&b.fv[idx * hv..(idx + 1) * hv], &b.dfv[idx * hv..(idx + 1) * hv]);
            let (a0, _, _) = state.intercept[g.region].eval_folded(fu, dfu, fv, dfv);
            let (a1, _, _) = state.slope[g.region].eval_folded(fu, dfu, fv, dfv);
            let tau = if with_effects {
                state.random_effects.get(i).copied().unwrap_or(0.0)
            } else {
                0.0
            };
            for pos in g.start..g.end {
                let f0 = dot(&lambda, &self.tb[pos * kp..(pos + 1) * kp]);
                out[self.order[pos]] = a0 - a1 * f0 + state.offset + tau;
            }
        }
        Ok(out)
    }

    /// Fitted means of every observation, in observation order.
    pub fn fitted_values(&self, state: &ModelState) -> Result<Vec<f64>> {
        self.group_values(state, true)
    }

    /// Regression function (without subject effects) at every observation.
    pub fn regression_values(&self, state: &ModelState) -> Result<Vec<f64>> {
        self.group_values(state, false)
    }

    pub fn residual_sum_of_squares(&self, state: &ModelState) -> Result<f64> {
        Ok(self.evaluate(state, Needs::default())?.rss)
    }

    pub fn log_likelihood(&self, state: &ModelState) -> Result<f64> {
        let e = self.evaluate(state, Needs::default())?;
        Ok(self.loglik_from_rss(e.rss, state.sigma2))
    }

    fn log_prior_terms(&self, state: &ModelState, theta_grad: Option<&mut [f64]>) -> Result<f64> {
        let cfg = &self.spec.spike;
        let mut total = 0.0;
        for s in state.intercept.iter().chain(&state.slope) {
            total += log_coeff_prior(s, self.spec.a)?;
        }
        if let (Some(theta), Some(gamma)) = (&state.theta, &state.gamma) {
            let mut scratch;
            let g = match theta_grad {
                Some(g) => g,
                None => {
                    scratch = vec![0.0; theta.len()];
                    &mut scratch[..]
                }
            };
            total += log_angle_prior_into(theta.as_slice(), gamma.as_slice(), cfg, g);
            let on = gamma.model_size() as f64;
            total += on * cfg.q().ln() + (gamma.len() as f64 - on) * (1.0 - cfg.q()).ln();
        }
        for a in &state.alpha {
            let n = a.len();
            total -= (n as f64 - 1.0) * PI.ln() + (2.0 * PI).ln();
        }
        total += -(self.spec.d1 - 1.0) * state.sigma2.ln() - self.spec.d2 / state.sigma2;
        if let Some(dp) = &state.dp {
            for (i, &tau) in state.random_effects.iter().enumerate() {
                let s = dp.variance_of(i);
                total += -0.5 * (2.0 * PI * s).ln() - tau * tau / (2.0 * s);
            }
        }
        Ok(total)
    }

    /// Log posterior up to an additive constant.
    pub fn log_posterior(&self, state: &ModelState) -> Result<f64> {
        let ll = self.log_likelihood(state)?;
        Ok(ll + self.log_prior_terms(state, None)?)
    }

    /// Gradients of the log posterior for `θ`, each `α` and `δ`.
    pub fn grad_blocks(&self, state: &ModelState) -> Result<GradBlocks> {
        let needs = Needs {
            theta: state.theta.is_some(),
            alpha: true,
            delta: true,
        };
        let e = self.evaluate(state, needs)?;
        let mut theta = vec![0.0; state.theta.as_ref().map_or(0, |t| t.len())];
        if let Some(th) = &state.theta {
            let mut prior_grad = vec![0.0; th.len()];
            self.log_prior_terms(state, Some(&mut prior_grad))?;
            self.theta_likelihood_grad(th, &e.wu, &mut theta);
            theta.iter_mut().zip(&prior_grad).for_each(|(g, p)| *g += p);
        }
        let alpha = (0..self.num_alpha())
            .map(|a| self.alpha_likelihood_grad(&state.alpha[a], a, &e.wv))
            .collect();
        Ok(GradBlocks {
            theta,
            alpha,
            deltas: e.gdelta,
        })
    }

    fn theta_likelihood_grad(&self, theta: &PolarAngles, wu: &[f64], out: &mut [f64]) {
        let x = self.data.x().expect("variant uses X");
        let mut xw = vec![0.0; x.cols()];
        for (i, &w) in wu.iter().enumerate() {
            if w != 0.0 {
                xw.iter_mut().zip(x.row(i)).for_each(|(acc, xi)| *acc += w * xi);
            }
        }
        grad_projection_into(theta.as_slice(), &xw, out);
    }

    fn alpha_likelihood_grad(&self, alpha: &PolarAngles, a: usize, wv: &[f64]) -> Vec<f64> {
        let na = self.num_alpha();
        let z = self.data.z();
        let mut zw = vec![0.0; z.cols()];
        for i in 0..self.data.n() {
            let w = wv[i * na + a];
            zw.iter_mut().zip(z.row(i)).for_each(|(acc, zi)| *acc += w * zi);
        }
        let mut out = vec![0.0; alpha.len()];
        grad_projection_into(alpha.as_slice(), &zw, &mut out);
        out
    }

    /// Current values of a block.
    pub fn block_values(&self, state: &ModelState, block: Block) -> Vec<f64> {
        match block {
            Block::Theta { start, end } => {
                state.theta.as_ref().expect("angles").as_slice()[start..end].to_vec()
            }
            Block::Alpha(a) => state.alpha[a].as_slice().to_vec(),
            Block::Deltas => state.timefn.deltas().to_vec(),
        }
    }

    pub fn set_block(&self, state: &mut ModelState, block: Block, values: &[f64]) {
        match block {
            Block::Theta { start, end } => {
                state.theta.as_mut().expect("angles").as_mut_slice()[start..end]
                    .copy_from_slice(values)
            }
            Block::Alpha(a) => state.alpha[a].as_mut_slice().copy_from_slice(values),
            Block::Deltas => state.timefn.set_deltas(values),
        }
    }

    pub fn block_bounds(&self, state: &ModelState, block: Block) -> Vec<(f64, f64)> {
        match block {
            Block::Theta { start, end } => {
                let n = state.theta.as_ref().map_or(0, |t| t.len());
                (start..end).map(|r| angle_bound(r, n)).collect()
            }
            Block::Alpha(a) => {
                let n = state.alpha[a].len();
                (0..n).map(|r| angle_bound(r, n)).collect()
            }
            Block::Deltas => vec![(0.0, 1.0); state.timefn.deltas().len()],
        }
    }

    /// Conditional log density of one block (up to a constant) and its
    /// gradient, for a state whose block already holds the query point.
    pub fn block_log_density(&self, state: &ModelState, block: Block) -> Result<(f64, Vec<f64>)> {
        let needs = Needs {
            theta: matches!(block, Block::Theta { .. }),
            alpha: matches!(block, Block::Alpha(_)),
            delta: matches!(block, Block::Deltas),
        };
        let e = self.evaluate(state, needs)?;
        let ll = self.loglik_from_rss(e.rss, state.sigma2);
        match block {
            Block::Theta { start, end } => {
                let th = state.theta.as_ref().expect("angles");
                let gamma = state.gamma.as_ref().expect("indicators");
                let mut prior_grad = vec![0.0; th.len()];
                let lp = log_angle_prior_into(
                    th.as_slice(),
                    gamma.as_slice(),
                    &self.spec.spike,
                    &mut prior_grad,
                );
                let mut g = vec![0.0; th.len()];
                self.theta_likelihood_grad(th, &e.wu, &mut g);
                let grad = (start..end).map(|r| g[r] + prior_grad[r]).collect();
                Ok((ll + lp, grad))
            }
            Block::Alpha(a) => Ok((ll, self.alpha_likelihood_grad(&state.alpha[a], a, &e.wv))),
            Block::Deltas => Ok((ll, e.gdelta)),
        }
    }

    /// Mean and precision of the joint normal conditional of region `j`'s
    /// free coefficients, ordered `(intercept, slope)`.
    pub fn surface_conditional(&self, state: &ModelState, j: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (prec, lin) = self.surface_normal_equations(state, j)?;
        let chol = cholesky_jittered(prec.clone(), "surface conditional")?;
        Ok((chol.solve(&lin), prec))
    }

    fn surface_normal_equations(&self, state: &ModelState, j: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_state(state)?;
        let na = self.num_alpha();
        let hu = self.surface.folded_u_len();
        let hv = self.surface.folded_v_len();
        let m = hu * hv;
        let kp = self.spec.basis_kprime;
        let b = self.bases(state)?;
        let lambda = state.timefn.coefficients();
        let inv = 1.0 / state.sigma2;
        let mut xtx = DMatrix::<f64>::zeros(2 * m, 2 * m);
        let mut xty = DVector::<f64>::zeros(2 * m);
        let mut tvec = vec![0.0; m];
        for g in self.groups.iter().filter(|g| g.region == j) {
            let i = g.subject;
            let idx = i * na + self.alpha_index(j);
            let fu = &b.fu[i * hu..(i + 1) * hu];
            let fv = &b.fv[idx * hv..(idx + 1) * hv];
            for a in 0..hu {
                for c in 0..hv {
                    tvec[a * hv + c] = fu[a] * fv[c];
                }
            }
            let shift = state.random_effects.get(i).copied().unwrap_or(0.0) + state.offset;
            let (mut c0, mut c1, mut c2, mut y0, mut y1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for pos in g.start..g.end {
                let f0 = dot(&lambda, &self.tb[pos * kp..(pos + 1) * kp]);
                let y = self.y[pos] - shift;
                c0 += 1.0;
                c1 += f0;
                c2 += f0 * f0;
                y0 += y;
                y1 += y * f0;
            }
            for r in 0..m {
                if tvec[r] == 0.0 {
                    continue;
                }
                xty[r] += y0 * tvec[r];
                xty[m + r] -= y1 * tvec[r];
                for c in 0..m {
                    let tt = tvec[r] * tvec[c];
                    xtx[(r, c)] += c0 * tt;
                    xtx[(r, m + c)] -= c1 * tt;
                    xtx[(m + r, c)] -= c1 * tt;
                    xtx[(m + r, m + c)] += c2 * tt;
                }
            }
        }
        let mut prec = xtx * inv;
        let prior = 1.0 / (self.spec.a * self.spec.a);
        for r in 0..2 * m {
            prec[(r, r)] += prior;
        }
        Ok((prec, xty * inv))
    }

    /// Draws every region's surface coefficients from their conditionals.
    pub fn gibbs_surfaces<R: Rng + ?Sized>(&self, state: &mut ModelState, rng: &mut R) -> Result<()> {
        let m = self.surface.folded_u_len() * self.surface.folded_v_len();
        for j in 0..self.data.regions() {
            let (prec, lin) = self.surface_normal_equations(state, j)?;
            let chol = cholesky_jittered(prec, "surface conditional")?;
            let draw = sample_precision_form(&chol, &lin, rng);
            state.intercept[j].free_mut().copy_from_slice(&draw.as_slice()[..m]);
            state.slope[j].free_mut().copy_from_slice(&draw.as_slice()[m..]);
        }
        Ok(())
    }

    /// Shape and rate of the gamma conditional of `1/σ²`.
    pub fn sigma2_conditional(&self, state: &ModelState) -> Result<(f64, f64)> {
        let rss = self.residual_sum_of_squares(state)?;
        Ok((
            self.spec.d1 + self.num_obs() as f64 / 2.0,
            self.spec.d2 + rss / 2.0,
        ))
    }

    pub fn gibbs_sigma2<R: Rng + ?Sized>(&self, state: &mut ModelState, rng: &mut R) -> Result<f64> {
        let (shape, rate) = self.sigma2_conditional(state)?;
        let precision = Gamma::new(shape, 1.0 / rate)
            .map_err(|e| Error::NonFinite(format!("precision conditional: {e}")))?
            .sample(rng);
        state.sigma2 = 1.0 / precision;
        Ok(state.sigma2)
    }

    /// Draws subject effects, updates the DP mixture, then recenters the
    /// effects to mean zero, moving their mean into the global offset.
    pub fn gibbs_random_effects<R: Rng + ?Sized>(&self, state: &mut ModelState, rng: &mut R) -> Result<()> {
        let conds = self.random_effect_conditionals(state)?;
        for (tau, (m, v)) in state.random_effects.iter_mut().zip(conds) {
            *tau = m + v.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let dp = state.dp.as_ref().expect("checked above");
        state.dp = Some(dp_update(&state.random_effects, dp, rng));
        let n = state.random_effects.len().max(1) as f64;
        let mean = state.random_effects.iter().sum::<f64>() / n;
        state.random_effects.iter_mut().for_each(|t| *t -= mean);
        state.offset += mean;
        debug!("random effects recentered by {mean:.4}");
        Ok(())
    }

    /// Mean and variance of the normal conditional of each `τ_i`.
    pub fn random_effect_conditionals(&self, state: &ModelState) -> Result<Vec<(f64, f64)>> {
        let dp = state
            .dp
            .as_ref()
            .ok_or_else(|| Error::InvalidState("variant has no random effects".into()))?;
        let values = self.fitted_values(state)?;
        let mut sums = vec![0.0; self.data.n()];
        for (pos, &r) in self.order.iter().enumerate() {
            let i = self.data.observations()[r].subject;
            sums[i] += self.y[pos] - (values[r] - state.random_effects[i]);
        }
        Ok((0..self.data.n())
            .map(|i| {
                let prec = self.counts[i] as f64 / state.sigma2 + 1.0 / dp.variance_of(i);
                let var = 1.0 / prec;
                (var * sums[i] / state.sigma2, var)
            })
            .collect())
    }

    /// Draws outcomes from the likelihood at `state` (observation order).
    pub fn simulate_values<R: Rng + ?Sized>(&self, state: &ModelState, rng: &mut R) -> Result<Vec<f64>> {
        let sd = state.sigma2.sqrt();
        Ok(self
            .fitted_values(state)?
            .into_iter()
            .map(|m| m + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect())
    }

    /// Root mean squared difference of the two regression functions over
    /// the observed `(i, j, t)` triples.
    pub fn empirical_distance(&self, a: &ModelState, b: &ModelState) -> Result<f64> {
        let fa = self.regression_values(a)?;
        let fb = self.regression_values(b)?;
        if fa.is_empty() {
            return Err(Error::Empty("no observations".into()));
        }
        let ss: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum();
        Ok((ss / fa.len() as f64).sqrt())
    }
}
