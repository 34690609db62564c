//! Concrete drift `Ψ` and noise `B` coefficients with their structural
//! constants.
//!
//! `Ψ(u, μ)` is a pointwise nonlinearity `φ` applied on the collocation grid
//! after a measure-dependent shift of its argument. `B(u, μ)` is diagonal:
//! noise mode `k` drives eigenmode `k` with amplitude `s_k h(u_k − α z_k)`
//! averaged over the atoms `z` of `μ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{second_moment, EmpiricalMeasure};
use crate::spectral::{Field, NormSpace, SobolevScale, SpectralOperator};

/// Scalar nondecreasing Lipschitz map `φ` with `φ(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nonlinearity {
    Identity,
    Tanh {
        amplitude: f64,
        width: f64,
    },
    /// Two-phase Stefan law with a regularized plateau on `[0, rho]`.
    Stefan {
        k1: f64,
        k2: f64,
        rho: f64,
        #[serde(default = "default_delta_reg")]
        delta_reg: f64,
    },
    /// `|r|^{m−1} r` on `|r| ≤ r_clip`, continued linearly outside.
    PowerRegularized { m: f64, r_clip: f64 },
    /// Piecewise-linear interpolation of `(x, y)` knots, extended with the
    /// end slopes.
    Custom { knots: Vec<[f64; 2]> },
}

fn default_delta_reg() -> f64 {
    0.01
}

impl Nonlinearity {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match self {
            Nonlinearity::Identity => Ok(()),
            Nonlinearity::Tanh { amplitude, width } => {
                if !(*amplitude >= 0.0 && amplitude.is_finite()) || !(*width > 0.0) {
                    return bad(format!("tanh needs amplitude >= 0, width > 0 (got {amplitude}, {width})"));
                }
                Ok(())
            }
            Nonlinearity::Stefan { k1, k2, rho, delta_reg } => {
                if !(*k1 >= 0.0 && *k2 >= 0.0 && *rho >= 0.0 && *delta_reg >= 0.0) {
                    return bad("stefan slopes and plateau width must be >= 0".into());
                }
                Ok(())
            }
            Nonlinearity::PowerRegularized { m, r_clip } => {
                if !(*m > 1.0) || !(*r_clip > 0.0 && r_clip.is_finite()) {
                    return bad(format!("power law needs m > 1 and r_clip > 0 (got {m}, {r_clip})"));
                }
                Ok(())
            }
            Nonlinearity::Custom { knots } => {
                if knots.len() < 2 {
                    return bad("custom nonlinearity needs at least two knots".into());
                }
                if knots.iter().flatten().any(|v| !v.is_finite()) {
                    return bad("custom knots must be finite".into());
                }
                for w in knots.windows(2) {
                    if !(w[1][0] > w[0][0]) {
                        return bad("custom knot abscissae must increase strictly".into());
                    }
                    if w[1][1] < w[0][1] {
                        return bad("custom nonlinearity must be nondecreasing".into());
                    }
                }
                if self.phi(0.0) != 0.0 {
                    return bad("custom nonlinearity must vanish at 0".into());
                }
                Ok(())
            }
        }
    }

    #[inline]
    pub fn phi(&self, r: f64) -> f64 {
        match self {
            Nonlinearity::Identity => r,
            Nonlinearity::Tanh { amplitude, width } => amplitude * (r / width).tanh(),
            Nonlinearity::Stefan { k1, k2, rho, delta_reg } => {
                if r < 0.0 {
                    k1 * r
                } else if r <= *rho {
                    delta_reg * r
                } else {
                    delta_reg * rho + k2 * (r - rho)
                }
            }
            Nonlinearity::PowerRegularized { m, r_clip } => {
                let a = r.abs();
                if a <= *r_clip {
                    a.powf(m - 1.0) * r
                } else {
                    let edge = r_clip.powf(*m);
                    let slope = m * r_clip.powf(m - 1.0);
                    r.signum() * (edge + slope * (a - r_clip))
                }
            }
            Nonlinearity::Custom { knots } => {
                let n = knots.len();
                let seg = knots.partition_point(|k| k[0] <= r).clamp(1, n - 1);
                let [x0, y0] = knots[seg - 1];
                let [x1, y1] = knots[seg];
                y0 + (y1 - y0) / (x1 - x0) * (r - x0)
            }
        }
    }

    /// Global Lipschitz constant of `φ`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Tanh { amplitude, width } => amplitude / width,
            Nonlinearity::Stefan { k1, k2, delta_reg, .. } => k1.max(*k2).max(*delta_reg),
            Nonlinearity::PowerRegularized { m, r_clip } => m * r_clip.powf(m - 1.0),
            Nonlinearity::Custom { knots } => knots
                .windows(2)
                .map(|w| (w[1][1] - w[0][1]) / (w[1][0] - w[0][0]))
                .fold(0.0, f64::max),
        }
    }
}

/// Measure functional entering the argument of `φ`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coupling {
    #[default]
    None,
    /// `φ(r + κ √μ(‖·‖²_H))`
    SecondMomentRoot { kappa: f64 },
    /// `φ(r − κ (1−L)^{−1/2} m_μ)` with `m_μ` the barycenter of `μ`.
    MeanShift { kappa: f64 },
}

impl Coupling {
    pub fn kappa(&self) -> f64 {
        match self {
            Coupling::None => 0.0,
            Coupling::SecondMomentRoot { kappa } | Coupling::MeanShift { kappa } => *kappa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub coupling: Coupling,
}

/// Precomputed measure statistic of a [`Coupling`], shared by all particles
/// evaluated against the same law.
#[derive(Debug, Clone, PartialEq)]
pub enum Shift {
    None,
    Scalar(f64),
    Grid(Vec<f64>),
}

impl DriftSpec {
    pub fn new(nonlinearity: Nonlinearity, coupling: Coupling) -> Self {
        DriftSpec { nonlinearity, coupling }
    }

    pub fn validate(&self) -> Result<()> {
        self.nonlinearity.validate()?;
        let k = self.coupling.kappa();
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::InvalidParameter(format!("coupling kappa must be >= 0, got {k}")));
        }
        Ok(())
    }

    pub fn is_measure_free(&self) -> bool {
        self.coupling.kappa() == 0.0
    }

    pub fn lipschitz(&self) -> f64 {
        self.nonlinearity.lipschitz()
    }

    pub fn shift(&self, op: &SpectralOperator, mu: &EmpiricalMeasure) -> Result<Shift> {
        if mu.dim() != op.n() {
            return Err(Error::DimensionMismatch {
                expected: op.n(),
                got: mu.dim(),
            });
        }
        Ok(match self.coupling {
            _ if self.is_measure_free() => Shift::None,
            Coupling::None => Shift::None,
            Coupling::SecondMomentRoot { kappa } => {
                Shift::Scalar(kappa * second_moment(mu, op, NormSpace::F12Dual)?.sqrt())
            }
            Coupling::MeanShift { kappa } => {
                let m = Field(mu.mean());
                let smooth = op.scale_apply(SobolevScale(-0.5), &m)?;
                let mut g = op.to_grid(&smooth)?;
                g.iter_mut().for_each(|x| *x *= -kappa);
                Shift::Grid(g)
            }
        })
    }

    /// `Ψ(u)` for a precomputed shift; `grid` is scratch of length `N`.
    pub(crate) fn apply(&self, op: &SpectralOperator, u: &[f64], shift: &Shift, grid: &mut [f64], out: &mut [f64]) {
        if matches!(self.nonlinearity, Nonlinearity::Identity) && matches!(shift, Shift::None) {
            out.copy_from_slice(u);
            return;
        }
        let basis = op.basis();
        basis.to_grid(u, grid);
        match shift {
            Shift::None => grid.iter_mut().for_each(|g| *g = self.nonlinearity.phi(*g)),
            Shift::Scalar(s) => grid.iter_mut().for_each(|g| *g = self.nonlinearity.phi(*g + s)),
            Shift::Grid(sh) => grid
                .iter_mut()
                .zip(sh)
                .for_each(|(g, s)| *g = self.nonlinearity.phi(*g + s)),
        }
        basis.from_grid(grid, out);
    }

    /// `Ψ(u, μ)`
    pub fn eval_psi(&self, op: &SpectralOperator, u: &Field, mu: &EmpiricalMeasure) -> Result<Field> {
        op.check(u.coeffs())?;
        let shift = self.shift(op, mu)?;
        let mut grid = vec![0.0; op.n()];
        let mut out = vec![0.0; op.n()];
        self.apply(op, u.coeffs(), &shift, &mut grid, &mut out);
        Ok(Field(out))
    }

    /// Pointwise map `r ↦ Ψ(r, μ)` at grid node `j`.
    pub fn eval_scalar(&self, r: f64, shift: &Shift, j: usize) -> f64 {
        match shift {
            Shift::None => self.nonlinearity.phi(r),
            Shift::Scalar(s) => self.nonlinearity.phi(r + s),
            Shift::Grid(g) => self.nonlinearity.phi(r + g[j]),
        }
    }
}

/// Diagonal `B^α` noise with base maps `g_k(x) = s_k h(x_k) e_k`,
/// `s_k = amplitude (1+λ_k)^{−damping}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Number of driven modes; `None` selects `min(N, 16)`.
    #[serde(default, rename = "K")]
    pub modes: Option<usize>,
    pub amplitude: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub slope: f64,
    /// If set, `h(r) = offset + slope·w·tanh(r/w)`; otherwise affine.
    #[serde(default)]
    pub saturation: Option<f64>,
    #[serde(default)]
    pub coupling_alpha: f64,
    /// Atoms of `μ` averaged over; `None` uses all of them.
    #[serde(default)]
    pub mixture_size: Option<usize>,
}

fn default_damping() -> f64 {
    1.0
}

impl NoiseSpec {
    /// Additive noise `s_k` on every mode, no state or law dependence.
    pub fn additive(amplitude: f64) -> Self {
        NoiseSpec {
            modes: None,
            amplitude,
            damping: 1.0,
            offset: 1.0,
            slope: 0.0,
            saturation: None,
            coupling_alpha: 0.0,
            mixture_size: None,
        }
    }

    pub fn zero() -> Self {
        NoiseSpec::additive(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.amplitude, self.damping, self.offset, self.slope, self.coupling_alpha];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("noise parameters must be finite".into()));
        }
        if self.modes == Some(0) {
            return Err(Error::InvalidParameter("noise needs K >= 1".into()));
        }
        if let Some(w) = self.saturation {
            if !(w > 0.0) {
                return Err(Error::InvalidParameter("noise saturation width must be > 0".into()));
            }
        }
        if self.mixture_size == Some(0) {
            return Err(Error::InvalidParameter("mixture_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn modes_for(&self, op: &SpectralOperator) -> usize {
        self.modes.unwrap_or(op.n().min(16)).min(op.n())
    }

    pub fn is_measure_free(&self) -> bool {
        self.coupling_alpha == 0.0
    }

    /// Per-mode scale `s_k`.
    pub fn scales(&self, op: &SpectralOperator) -> Vec<f64> {
        op.lambdas()[..self.modes_for(op)]
            .iter()
            .map(|l| self.amplitude * (1.0 + l).powf(-self.damping))
            .collect()
    }

    #[inline]
    fn h(&self, r: f64) -> f64 {
        match self.saturation {
            None => self.offset + self.slope * r,
            Some(w) => self.offset + self.slope * w * (r / w).tanh(),
        }
    }

    fn atoms(&self, mu: &EmpiricalMeasure) -> usize {
        self.mixture_size.map_or(mu.len(), |s| s.min(mu.len()))
    }

    /// Barycentric coefficients of the mixture atoms, used by the affine
    /// shortcut.
    pub(crate) fn law_mean(&self, mu: &EmpiricalMeasure) -> Vec<f64> {
        let n = self.atoms(mu);
        let mut m = vec![0.0; mu.dim()];
        for i in 0..n {
            for (a, b) in m.iter_mut().zip(mu.particle(i)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= n as f64);
        m
    }

    /// Amplitude of `B(u, μ) e_k` on eigenmode `k`.
    pub(crate) fn amplitude_at(
        &self,
        scales: &[f64],
        k: usize,
        u: &[f64],
        mu: Option<&EmpiricalMeasure>,
        mean: Option<&[f64]>,
    ) -> f64 {
        let a = self.coupling_alpha;
        if a == 0.0 {
            return scales[k] * self.h(u[k]);
        }
        let mu = mu.expect("law required for coupled noise");
        if self.saturation.is_none() {
            let m = mean.map_or_else(|| self.law_mean(mu)[k], |m| m[k]);
            return scales[k] * self.h(u[k] - a * m);
        }
        let n = self.atoms(mu);
        let s: f64 = (0..n).map(|i| self.h(u[k] - a * mu.particle(i)[k])).sum();
        scales[k] * s / n as f64
    }

    /// `B(u, μ) e_k`
    pub fn eval_noise(&self, op: &SpectralOperator, u: &Field, mu: &EmpiricalMeasure, k: usize) -> Result<Field> {
        op.check(u.coeffs())?;
        let modes = self.modes_for(op);
        if k >= modes {
            return Err(Error::ModeOutOfRange { index: k, modes });
        }
        if mu.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if mu.dim() != op.n() {
            return Err(Error::DimensionMismatch {
                expected: op.n(),
                got: mu.dim(),
            });
        }
        let scales = self.scales(op);
        let mut out = vec![0.0; op.n()];
        out[k] = self.amplitude_at(&scales, k, u.coeffs(), Some(mu), None);
        Ok(Field(out))
    }

    /// `C₀` with `‖g(x) − g(y)‖²_{L₂(U,H)} ≤ C₀ ‖x − y‖²_H`.
    pub fn c0(&self, op: &SpectralOperator) -> f64 {
        let smax = self.scales(op).iter().map(|s| s * s).fold(0.0, f64::max);
        self.slope * self.slope * smax
    }

    /// Lipschitz constant `K₁` of `B^α` for the triple of the (A4) estimate.
    pub fn k1(&self, op: &SpectralOperator) -> f64 {
        let c0 = self.c0(op);
        let a2 = self.coupling_alpha * self.coupling_alpha;
        if c0 <= 1.0 {
            2.0 * c0.max(a2)
        } else {
            2.0 * c0 * a2.max(1.0)
        }
    }

    /// Growth constant `K₂` of the Hilbert–Schmidt-into-`L²` bound.
    pub fn k2(&self, op: &SpectralOperator) -> f64 {
        let scales = self.scales(op);
        let lambdas = op.lambdas();
        let sum_s2: f64 = scales.iter().map(|s| s * s).sum();
        let max_s2 = scales.iter().map(|s| s * s).fold(0.0, f64::max);
        let max_s2w = scales
            .iter()
            .zip(lambdas)
            .map(|(s, l)| s * s * (1.0 + l))
            .fold(0.0, f64::max);
        let sl2 = self.slope * self.slope;
        let a2 = self.coupling_alpha * self.coupling_alpha;
        (2.0 * self.offset * self.offset * sum_s2)
            .max(4.0 * sl2 * max_s2)
            .max(4.0 * sl2 * a2 * max_s2w)
    }

    /// `‖B(0, δ₀)‖²_{L₂(U,H)}`
    pub fn zero_state_hs_h(&self, op: &SpectralOperator) -> f64 {
        self.scales(op)
            .iter()
            .zip(op.lambdas())
            .map(|(s, l)| s * s * self.offset * self.offset / (1.0 + l))
            .sum()
    }
}

/// Declared structural constants of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConstants {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    pub c: f64,
    pub delta: f64,
    pub alpha_coer: f64,
    pub f_bound: f64,
}

impl ModelConstants {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let named = [
            ("alpha0", self.alpha0),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("K1", self.k1),
            ("K2", self.k2),
            ("f_bound", self.f_bound),
        ];
        for (n, x) in named {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("{n} must be a finite nonnegative number, got {x}"));
            }
        }
        if !(self.alpha1 > 0.0 && self.alpha1.is_finite()) {
            v.push(format!("alpha1 must be > 0, got {}", self.alpha1));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            v.push(format!("delta must be > 0, got {}", self.delta));
        }
        if !(self.alpha_coer > 1.0) {
            v.push(format!("alpha_coer must be > 1, got {}", self.alpha_coer));
        }
        if !self.c.is_finite() {
            v.push("c must be finite".into());
        }
        v
    }

    /// Every constant multiplied by `f` (the sign-free ones only).
    pub fn scaled(&self, f: f64) -> Self {
        ModelConstants {
            alpha0: self.alpha0 * f,
            alpha1: self.alpha1 * f,
            alpha2: self.alpha2 * f,
            alpha3: self.alpha3 * f,
            k1: self.k1 * f,
            k2: self.k2 * f,
            c: self.c * f,
            delta: self.delta * f,
            alpha_coer: self.alpha_coer,
            f_bound: self.f_bound * f,
        }
    }
}

/// The pair `(Ψ, B)` with its declared constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub drift: DriftSpec,
    pub noise: NoiseSpec,
    pub constants: ModelConstants,
}

impl ModelSpec {
    /// Constants read off the closed-form estimates for the built-in
    /// families; `c` is supplied by the caller.
    pub fn derived_constants(drift: &DriftSpec, noise: &NoiseSpec, op: &SpectralOperator, c: f64) -> ModelConstants {
        let lip = drift.lipschitz();
        let kappa = drift.coupling.kappa();
        ModelConstants {
            alpha0: lip * kappa.max(1.0),
            alpha1: if lip > 0.0 { 1.0 / lip } else { 1.0 },
            alpha2: lip * kappa * kappa,
            alpha3: 0.0,
            k1: noise.k1(op),
            k2: noise.k2(op),
            c,
            delta: 1.0,
            alpha_coer: 2.0,
            f_bound: 2.0 * noise.zero_state_hs_h(op),
        }
    }

    pub fn with_derived_constants(drift: DriftSpec, noise: NoiseSpec, op: &SpectralOperator, c: f64) -> Self {
        let constants = Self::derived_constants(&drift, &noise, op, c);
        ModelSpec { drift, noise, constants }
    }

    pub fn is_measure_free(&self) -> bool {
        self.drift.is_measure_free() && self.noise.is_measure_free()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.drift.validate() {
            v.push(e.to_string());
        }
        if let Err(e) = self.noise.validate() {
            v.push(e.to_string());
        }
        v.extend(self.constants.validate());
        v
    }
}
