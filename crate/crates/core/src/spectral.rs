//! Diagonal spectral model of a negative definite self-adjoint operator `L`
//! on the 1-D torus.
//!
//! Everything is expressed in the orthonormal eigenbasis of `L`: a [`Field`]
//! is its coefficient vector and every function of `L` (the semigroup, the
//! Bessel potentials `(1 - L)^s`, resolvents) acts as a per-mode multiplier.
//! The eigenbasis is the real Fourier basis `1, √2 cos(2πx), √2 sin(2πx),
//! √2 cos(4πx), …`, so mode `k` carries frequency `(k + 1) / 2`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A state in `L²(μ_M)` given by its coordinates in the eigenbasis of `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Field(pub(crate) Vec<f64>);

impl Field {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "field coefficient {i} is not finite"
            )));
        }
        Ok(Field(coeffs))
    }

    pub fn zeros(n: usize) -> Self {
        Field(vec![0.0; n])
    }

    /// The `k`-th basis vector.
    pub fn unit(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Field(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn sub(&self, other: &Field) -> Field {
        Field(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scaled(&self, s: f64) -> Field {
        Field(self.0.iter().map(|a| a * s).collect())
    }

    /// `|u|₂`
    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// `⟨u, v⟩₂`
    pub fn dot(&self, other: &Field) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl AsRef<[f64]> for Field {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Exponent `s` of the scale `(1 - L)^s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobolevScale(pub f64);

/// The three spaces of the Gelfand triple `V = L² ⊂ H = F₁,₂* ⊂ V*`, plus
/// the Bessel potential space `F₁,₂` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSpace {
    L2,
    F12,
    F12Dual,
}

impl NormSpace {
    #[inline]
    fn weight(self, lambda: f64) -> f64 {
        match self {
            NormSpace::L2 => 1.0,
            NormSpace::F12 => 1.0 + lambda,
            NormSpace::F12Dual => 1.0 / (1.0 + lambda),
        }
    }
}

/// Node count and accuracy target for the gamma-transform quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraturePolicy {
    pub nodes: usize,
    /// Relative tolerance checked against the rule with half the nodes.
    pub tol: f64,
}

impl Default for QuadraturePolicy {
    fn default() -> Self {
        QuadraturePolicy {
            nodes: 64,
            tol: 1e-10,
        }
    }
}

/// Diagonal realization of `L`: `L e_k = -λ_k e_k`.
#[derive(Clone)]
pub struct SpectralOperator {
    label: String,
    lambdas: Vec<f64>,
    basis: OnceLock<Arc<TorusBasis>>,
}

impl std::fmt::Debug for SpectralOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralOperator")
            .field("label", &self.label)
            .field("lambdas", &self.lambdas)
            .finish()
    }
}

impl PartialEq for SpectralOperator {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.lambdas == other.lambdas
    }
}

impl SpectralOperator {
    /// Operator with an explicit spectrum of `-L`.
    pub fn from_spectrum(label: impl Into<String>, lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::InvalidParameter("operator needs N >= 1 modes".into()));
        }
        if let Some((k, l)) = lambdas
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l >= 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "eigenvalue {k} of -L is {l}; must be finite and >= 0"
            )));
        }
        Ok(SpectralOperator {
            label: label.into(),
            lambdas,
            basis: OnceLock::new(),
        })
    }

    /// `L = -(-Δ)^α` on the torus: `λ_k = |ω_k|^{2α}` with `ω = 0, 1, 1, 2, 2, …`.
    pub fn fractional_laplacian(n: usize, alpha: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("operator needs N >= 1 modes".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha outside (0,1]: {alpha}"
            )));
        }
        let lambdas = (0..n)
            .map(|k| {
                let w = frequency(k) as f64;
                if w == 0.0 {
                    0.0
                } else {
                    w.powf(2.0 * alpha)
                }
            })
            .collect();
        Self::from_spectrum(format!("fractional_laplacian(alpha={alpha})"), lambdas)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of retained modes.
    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn max_lambda(&self) -> f64 {
        self.lambdas.iter().cloned().fold(0.0, f64::max)
    }

    pub(crate) fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// `(1 - L)^s u`
    pub fn scale_apply(&self, s: SobolevScale, u: &Field) -> Result<Field> {
        self.check(&u.0)?;
        if s.0 == 0.0 {
            return Ok(u.clone());
        }
        Ok(Field(
            u.0.iter()
                .zip(&self.lambdas)
                .map(|(c, l)| (1.0 + l).powf(s.0) * c)
                .collect(),
        ))
    }

    pub fn norm(&self, space: NormSpace, u: &Field) -> Result<f64> {
        self.check(&u.0)?;
        Ok(self.norm_sq_slice(space, &u.0).sqrt())
    }

    /// Inner product of `space`, computed from the weights that define `norm`.
    pub fn inner(&self, space: NormSpace, u: &Field, v: &Field) -> Result<f64> {
        self.check(&u.0)?;
        self.check(&v.0)?;
        Ok(self.inner_slice(space, &u.0, &v.0))
    }

    #[inline]
    pub(crate) fn norm_sq_slice(&self, space: NormSpace, u: &[f64]) -> f64 {
        u.iter()
            .zip(&self.lambdas)
            .map(|(c, l)| space.weight(*l) * c * c)
            .sum()
    }

    #[inline]
    pub(crate) fn inner_slice(&self, space: NormSpace, u: &[f64], v: &[f64]) -> f64 {
        u.iter()
            .zip(v)
            .zip(&self.lambdas)
            .map(|((a, b), l)| space.weight(*l) * a * b)
            .sum()
    }

    /// Squared distance `‖u - v‖²` in `space`.
    #[inline]
    pub(crate) fn dist_sq_slice(&self, space: NormSpace, u: &[f64], v: &[f64]) -> f64 {
        u.iter()
            .zip(v)
            .zip(&self.lambdas)
            .map(|((a, b), l)| {
                let d = a - b;
                space.weight(*l) * d * d
            })
            .sum()
    }

    /// `T_t u = e^{tL} u`
    pub fn semigroup(&self, t: f64, u: &Field) -> Result<Field> {
        if !(t >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "semigroup time must be >= 0, got {t}"
            )));
        }
        self.check(&u.0)?;
        Ok(Field(
            u.0.iter()
                .zip(&self.lambdas)
                .map(|(c, l)| (-t * l).exp() * c)
                .collect(),
        ))
    }

    /// Per-mode multipliers of the gamma-transform `V_r`, evaluated by
    /// generalized Gauss–Laguerre quadrature of the Bochner integral.
    ///
    /// Mode `k` integrates `s^{r/2-1} e^{-s} e^{-λ_k s}`. The substitution
    /// `s = t/β` with `β` the largest power of two not above `1 + λ_k`
    /// leaves a decaying factor `e^{-c t}`, `0 ≤ c < 1`, for every eigenvalue.
    pub fn gamma_multipliers(&self, r: f64, policy: &QuadraturePolicy) -> Result<Vec<f64>> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma-transform order must be > 0, got {r}"
            )));
        }
        if policy.nodes < 2 {
            return Err(Error::InvalidParameter("quadrature needs >= 2 nodes".into()));
        }
        let a = 0.5 * r - 1.0;
        let fine = laguerre_rule(policy.nodes, a);
        let coarse = laguerre_rule(policy.nodes / 2, a);
        let mut out = Vec::with_capacity(self.n());
        for &l in &self.lambdas {
            let beta = (1.0 + l).log2().floor().exp2();
            let c = (1.0 + l) / beta - 1.0;
            let prefactor = beta.powf(-0.5 * r);
            let hi = prefactor * fine.integrate(|t| (-c * t).exp());
            let lo = prefactor * coarse.integrate(|t| (-c * t).exp());
            let est = (hi - lo).abs() / hi.abs().max(f64::MIN_POSITIVE);
            if !(est <= policy.tol) {
                return Err(Error::Quadrature {
                    tol: policy.tol,
                    estimate: est,
                });
            }
            out.push(hi);
        }
        Ok(out)
    }

    /// `V_r u = Γ(r/2)^{-1} ∫₀^∞ s^{r/2-1} e^{-s} T_s u ds`
    pub fn gamma_transform(&self, r: f64, u: &Field, policy: &QuadraturePolicy) -> Result<Field> {
        self.check(&u.0)?;
        let m = self.gamma_multipliers(r, policy)?;
        Ok(Field(u.0.iter().zip(&m).map(|(c, w)| c * w).collect()))
    }

    /// `√δ (δ - L)^{-1/2} u`
    pub fn resolvent_sqrt(&self, delta: f64, u: &Field) -> Result<Field> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!("delta must be > 0, got {delta}")));
        }
        self.check(&u.0)?;
        Ok(Field(
            u.0.iter()
                .zip(&self.lambdas)
                .map(|(c, l)| (delta / (delta + l)).sqrt() * c)
                .collect(),
        ))
    }

    /// Per-mode factors of `P = (δ - ε)(δ - L)^{-1}`.
    pub fn p_operator(&self, delta: f64, eps: f64) -> Vec<f64> {
        self.lambdas.iter().map(|l| (delta - eps) / (delta + l)).collect()
    }

    pub(crate) fn basis(&self) -> &TorusBasis {
        self.basis.get_or_init(|| Arc::new(TorusBasis::new(self.n())))
    }

    /// Point values `u(x_j)`, `x_j = j/N`.
    pub fn to_grid(&self, u: &Field) -> Result<Vec<f64>> {
        self.check(&u.0)?;
        let mut g = vec![0.0; self.n()];
        self.basis().to_grid(&u.0, &mut g);
        Ok(g)
    }

    pub fn from_grid(&self, g: &[f64]) -> Result<Field> {
        self.check(g)?;
        let mut c = vec![0.0; self.n()];
        self.basis().from_grid(g, &mut c);
        Ok(Field(c))
    }
}

/// Frequency of mode `k` in the real Fourier ordering.
pub fn frequency(k: usize) -> usize {
    k.div_ceil(2)
}

#[derive(Serialize, Deserialize)]
struct OperatorRepr {
    label: String,
    #[serde(rename = "N")]
    n: usize,
    lambdas: Vec<f64>,
}

impl Serialize for SpectralOperator {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        OperatorRepr {
            label: self.label.clone(),
            n: self.n(),
            lambdas: self.lambdas.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpectralOperator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = OperatorRepr::deserialize(d)?;
        if repr.n != repr.lambdas.len() {
            return Err(serde::de::Error::custom(format!(
                "N = {} but {} eigenvalues given",
                repr.n,
                repr.lambdas.len()
            )));
        }
        SpectralOperator::from_spectrum(repr.label, repr.lambdas).map_err(serde::de::Error::custom)
    }
}

/// Sampled real Fourier basis on `N` equispaced points; `matrix[j*N + k] = e_k(x_j)`.
#[derive(Debug)]
pub(crate) struct TorusBasis {
    n: usize,
    matrix: Vec<f64>,
}

impl TorusBasis {
    fn new(n: usize) -> Self {
        let mut matrix = vec![0.0; n * n];
        for j in 0..n {
            let x = j as f64 / n as f64;
            for k in 0..n {
                let w = frequency(k) as f64;
                matrix[j * n + k] = if k == 0 {
                    1.0
                } else if 2 * frequency(k) == n {
                    // Nyquist mode: only the cosine survives, with unit norm.
                    (2.0 * PI * w * x).cos()
                } else if k % 2 == 1 {
                    2f64.sqrt() * (2.0 * PI * w * x).cos()
                } else {
                    2f64.sqrt() * (2.0 * PI * w * x).sin()
                };
            }
        }
        TorusBasis { n, matrix }
    }

    #[inline]
    pub(crate) fn to_grid(&self, c: &[f64], g: &mut [f64]) {
        for (j, gj) in g.iter_mut().enumerate() {
            let row = &self.matrix[j * self.n..(j + 1) * self.n];
            *gj = row.iter().zip(c).map(|(e, c)| e * c).sum();
        }
    }

    #[inline]
    pub(crate) fn from_grid(&self, g: &[f64], c: &mut [f64]) {
        c.iter_mut().for_each(|x| *x = 0.0);
        for (j, gj) in g.iter().enumerate() {
            let row = &self.matrix[j * self.n..(j + 1) * self.n];
            for (ck, e) in c.iter_mut().zip(row) {
                *ck += e * gj;
            }
        }
        let inv = 1.0 / self.n as f64;
        c.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Generalized Gauss–Laguerre rule for the weight `t^a e^{-t}`, normalized
/// so the weights sum to one.
#[derive(Debug)]
struct LaguerreRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl LaguerreRule {
    fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * f(*t))
            .sum()
    }
}

fn laguerre_rule(n: usize, a: f64) -> Arc<LaguerreRule> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), Arc<LaguerreRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, a.to_bits());
    if let Some(rule) = cache.lock().unwrap().get(&key) {
        return rule.clone();
    }
    let rule = Arc::new(golub_welsch(n, a));
    cache.lock().unwrap().insert(key, rule.clone());
    rule
}

// Nodes are the eigenvalues of the Jacobi matrix of the Laguerre
// recurrence; weights are the squared first eigenvector components.
fn golub_welsch(n: usize, a: f64) -> LaguerreRule {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = 2.0 * i as f64 + a + 1.0;
        if i + 1 < n {
            let b = (((i + 1) as f64) * ((i + 1) as f64 + a)).sqrt();
            jac[(i, i + 1)] = b;
            jac[(i + 1, i)] = b;
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    LaguerreRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractional_laplacian_spectrum() {
        let op = SpectralOperator::fractional_laplacian(3, 1.0).unwrap();
        assert_eq!(op.lambdas(), &[0.0, 1.0, 1.0]);
        let op = SpectralOperator::fractional_laplacian(3, 0.5).unwrap();
        assert_eq!(op.lambdas(), &[0.0, 1.0, 1.0]);
        let op = SpectralOperator::fractional_laplacian(5, 0.5).unwrap();
        // direct evaluation of |ω|^{2α} for ω = 0, 1, 1, 2, 2
        let direct: Vec<f64> = [0.0f64, 1.0, 1.0, 2.0, 2.0]
            .iter()
            .map(|w| if *w == 0.0 { 0.0 } else { w.powf(2.0 * 0.5) })
            .collect();
        assert_eq!(op.lambdas(), direct.as_slice());
        assert_eq!(op.lambdas(), &[0.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn fractional_laplacian_rejects_bad_input() {
        assert!(SpectralOperator::fractional_laplacian(0, 1.0).is_err());
        assert!(SpectralOperator::fractional_laplacian(4, 0.0).is_err());
        assert!(SpectralOperator::fractional_laplacian(4, 1.5).is_err());
        assert!(SpectralOperator::from_spectrum("bad", vec![0.0, -1.0]).is_err());
    }

    #[test]
    fn scale_apply_cases() {
        let op = SpectralOperator::from_spectrum("t", vec![0.0, 3.0]).unwrap();
        let e1 = Field::unit(2, 1);
        let out = op.scale_apply(SobolevScale(-0.5), &e1).unwrap();
        assert_eq!(out.coeffs(), &[0.0, 0.5]);
        let u = Field::new(vec![0.3, -1.7]).unwrap();
        assert_eq!(op.scale_apply(SobolevScale(0.0), &u).unwrap(), u);

        let op = SpectralOperator::from_spectrum("t", vec![1.0]).unwrap();
        let u = Field::new(vec![0.7]).unwrap();
        let up = op.scale_apply(SobolevScale(0.5), &u).unwrap();
        let back = op.scale_apply(SobolevScale(-0.5), &up).unwrap();
        assert!((back.coeffs()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn norms() {
        let op = SpectralOperator::from_spectrum("t", vec![0.0, 3.0]).unwrap();
        let u = Field::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(op.norm(NormSpace::F12, &u).unwrap(), 5f64.sqrt());
        assert_eq!(op.norm(NormSpace::F12Dual, &u).unwrap(), 1.25f64.sqrt());
        let z = Field::zeros(2);
        for s in [NormSpace::L2, NormSpace::F12, NormSpace::F12Dual] {
            assert_eq!(op.norm(s, &z).unwrap(), 0.0);
        }
        assert!(matches!(
            op.norm(NormSpace::L2, &Field::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn semigroup_cases() {
        let op = SpectralOperator::from_spectrum("t", vec![0.0, 1.0, 2.0]).unwrap();
        let u = Field::new(vec![0.2, -0.4, 0.9]).unwrap();
        assert_eq!(op.semigroup(0.0, &u).unwrap(), u);
        let t = op.semigroup(2f64.ln(), &Field::unit(3, 1)).unwrap();
        assert!((t.coeffs()[1] - 0.5).abs() < 1e-15);
        let unit = u.scaled(1.0 / u.l2_norm());
        assert!(op.semigroup(1.0, &unit).unwrap().l2_norm() <= 1.0);
        assert!(op.semigroup(-1.0, &u).is_err());
    }

    #[test]
    fn gamma_transform_matches_bessel_potential() {
        let policy = QuadraturePolicy::default();
        let op = SpectralOperator::from_spectrum("t", vec![3.0]).unwrap();
        let v = op.gamma_transform(1.0, &Field::unit(1, 0), &policy).unwrap();
        assert!((v.coeffs()[0] - 0.5).abs() < 1e-12);
        let op = SpectralOperator::from_spectrum("t", vec![1.0]).unwrap();
        let v = op.gamma_transform(2.0, &Field::unit(1, 0), &policy).unwrap();
        assert!((v.coeffs()[0] - 0.5).abs() < 1e-12);

        let op = SpectralOperator::from_spectrum("t", vec![0.0, 1.0, 2.0]).unwrap();
        let u = Field::new(vec![0.37, -1.2, 2.5]).unwrap();
        let quad = op.gamma_transform(1.0, &u, &policy).unwrap();
        let exact = op.scale_apply(SobolevScale(-0.5), &u).unwrap();
        for (q, e) in quad.coeffs().iter().zip(exact.coeffs()) {
            assert!(((q - e) / e).abs() <= 1e-8);
        }
    }

    #[test]
    fn gamma_transform_errors() {
        let op = SpectralOperator::fractional_laplacian(4, 1.0).unwrap();
        let u = Field::zeros(4);
        assert!(op.gamma_transform(0.0, &u, &QuadraturePolicy::default()).is_err());
        assert!(op.gamma_transform(-1.0, &u, &QuadraturePolicy::default()).is_err());
        // two nodes cannot resolve the integrand to 1e-15
        let crude = QuadraturePolicy { nodes: 2, tol: 1e-15 };
        let op = SpectralOperator::from_spectrum("t", vec![0.45]).unwrap();
        assert!(matches!(
            op.gamma_transform(0.3, &Field::unit(1, 0), &crude),
            Err(Error::Quadrature { .. })
        ));
    }

    #[test]
    fn grid_transform_is_orthonormal() {
        for n in [1, 2, 5, 8, 9] {
            let op = SpectralOperator::fractional_laplacian(n, 1.0).unwrap();
            for k in 0..n {
                let g = op.to_grid(&Field::unit(n, k)).unwrap();
                let back = op.from_grid(&g).unwrap();
                for (l, c) in back.coeffs().iter().enumerate() {
                    let want = if l == k { 1.0 } else { 0.0 };
                    assert!((c - want).abs() < 1e-13, "n={n} k={k} l={l} c={c}");
                }
            }
        }
    }

    #[test]
    fn operator_json_shape() {
        let op = SpectralOperator::fractional_laplacian(3, 1.0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&op).unwrap();
        assert_eq!(v["N"], 3);
        assert_eq!(v["lambdas"], serde_json::json!([0.0, 1.0, 1.0]));
        let back: SpectralOperator = serde_json::from_value(v).unwrap();
        assert_eq!(back, op);
        let bad = serde_json::json!({"label": "x", "N": 2, "lambdas": [0.0]});
        assert!(serde_json::from_value::<SpectralOperator>(bad).is_err());
    }
}
