//! Uniform empirical measures on `H = F₁,₂*`, Wasserstein-2 transport in the
//! dual norm and the discounted sup-metric on measure flows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spectral::{Field, NormSpace, SpectralOperator};
use crate::stats::median;

/// `M` equally weighted atoms in `R^N`, stored particle-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    data: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(particles: Vec<Field>) -> Result<Self> {
        let first = particles.first().ok_or(Error::EmptyMeasure)?;
        let dim = first.len();
        let mut data = Vec::with_capacity(dim * particles.len());
        for p in &particles {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            data.extend_from_slice(p.coeffs());
        }
        Ok(EmpiricalMeasure { dim, data })
    }

    /// Builds a measure from `M·dim` particle-major coefficients.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite particle coordinate".into()));
        }
        Ok(EmpiricalMeasure { dim, data })
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: &Field) -> Self {
        EmpiricalMeasure {
            dim: x.len(),
            data: x.coeffs().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn to_fields(&self) -> Vec<Field> {
        self.particles().map(|p| Field(p.to_vec())).collect()
    }

    /// Barycenter, accumulated in particle order.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.particles() {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let inv = 1.0 / self.len() as f64;
        m.iter_mut().for_each(|a| *a *= inv);
        m
    }

    fn check_dim(&self, op: &SpectralOperator) -> Result<()> {
        if self.dim != op.n() {
            return Err(Error::DimensionMismatch {
                expected: op.n(),
                got: self.dim,
            });
        }
        Ok(())
    }
}

/// `μ(‖·‖²_space) = (1/M) Σ ‖ξ_i‖²_space`
pub fn second_moment(mu: &EmpiricalMeasure, op: &SpectralOperator, space: NormSpace) -> Result<f64> {
    mu.check_dim(op)?;
    Ok(mu.particles().map(|p| op.norm_sq_slice(space, p)).sum::<f64>() / mu.len() as f64)
}

/// Time-indexed family of empirical measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureFlow {
    times: Vec<f64>,
    measures: Vec<EmpiricalMeasure>,
}

impl MeasureFlow {
    pub fn new(times: Vec<f64>, measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        if times.is_empty() || times.len() != measures.len() {
            return Err(Error::GridMismatch(format!(
                "{} nodes but {} measures",
                times.len(),
                measures.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::GridMismatch("flow times must increase strictly".into()));
        }
        let (m, d) = (measures[0].len(), measures[0].dim());
        if measures.iter().any(|mu| mu.len() != m || mu.dim() != d) {
            return Err(Error::GridMismatch(
                "all measures of a flow must share M and dimension".into(),
            ));
        }
        Ok(MeasureFlow { times, measures })
    }

    /// The flow that stays at `mu` on every node.
    pub fn constant(times: Vec<f64>, mu: &EmpiricalMeasure) -> Result<Self> {
        let measures = vec![mu.clone(); times.len()];
        MeasureFlow::new(times, measures)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn measures(&self) -> &[EmpiricalMeasure] {
        &self.measures
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the last node `≤ t`, i.e. piecewise-constant from the left.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            return Err(Error::GridMismatch(format!(
                "time {t} precedes the first flow node {}",
                self.times[0]
            )));
        }
        Ok(idx - 1)
    }

    pub fn at(&self, t: f64) -> Result<&EmpiricalMeasure> {
        Ok(&self.measures[self.index_at(t)?])
    }

    /// Appends `other`, replacing a shared boundary node by `other`'s.
    pub fn append(&mut self, other: MeasureFlow) -> Result<()> {
        let mut times = other.times.into_iter().peekable();
        let mut measures = other.measures.into_iter();
        if let (Some(&first), Some(&last)) = (times.peek(), self.times.last()) {
            if first == last {
                self.times.pop();
                self.measures.pop();
            } else if first < last {
                return Err(Error::GridMismatch("appended flow overlaps".into()));
            }
        }
        for (t, m) in times.zip(&mut measures) {
            if let Some(mu0) = self.measures.first() {
                if m.len() != mu0.len() || m.dim() != mu0.dim() {
                    return Err(Error::GridMismatch("appended flow changes M".into()));
                }
            }
            self.times.push(t);
            self.measures.push(m);
        }
        Ok(())
    }
}

/// Solver selection for [`w2`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum OtMethod {
    /// Optimal assignment (equal particle counts).
    Exact,
    /// Debiased log-domain Sinkhorn with regularization `reg_scale · median(C)`.
    Entropic {
        #[serde(default = "default_reg_scale")]
        reg_scale: f64,
        #[serde(default = "default_sinkhorn_iter")]
        max_iter: usize,
    },
    /// Exact for `M ≤ 64`, entropic with defaults above.
    Auto,
}

fn default_reg_scale() -> f64 {
    0.01
}

fn default_sinkhorn_iter() -> usize {
    500
}

impl Default for OtMethod {
    fn default() -> Self {
        OtMethod::Auto
    }
}

impl OtMethod {
    pub fn entropic(reg_scale: f64) -> Self {
        OtMethod::Entropic {
            reg_scale,
            max_iter: default_sinkhorn_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// `sigma[i]` is the atom of `ν` matched to atom `i` of `μ`.
    Assignment(Vec<usize>),
    /// Row-major coupling matrix with marginals `1/M_μ`, `1/M_ν`.
    Coupling { rows: usize, cols: usize, matrix: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub method: String,
    /// Transport cost `W²` (or the debiased divergence for entropic plans).
    pub cost: f64,
    pub plan: PlanKind,
    pub iterations: usize,
}

/// Cost matrix `C_ij = ‖x_i − y_j‖²_{F12dual}`, assembled in parallel by rows.
pub fn cost_matrix(op: &SpectralOperator, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<f64> {
    let m = nu.len();
    let mut c = vec![0.0; mu.len() * m];
    c.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let x = mu.particle(i);
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = op.dist_sq_slice(NormSpace::F12Dual, x, nu.particle(j));
        }
    });
    c
}

/// `𝕎_{2,H}(μ, ν)` together with the optimal (or entropic) plan.
pub fn w2(
    op: &SpectralOperator,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    method: OtMethod,
) -> Result<(f64, TransportPlan)> {
    mu.check_dim(op)?;
    nu.check_dim(op)?;
    let method = match method {
        OtMethod::Auto if mu.len() <= 64 && mu.len() == nu.len() => OtMethod::Exact,
        OtMethod::Auto => OtMethod::entropic(default_reg_scale()),
        m => m,
    };
    match method {
        OtMethod::Exact => {
            if mu.len() != nu.len() {
                return Err(Error::UnequalSupport {
                    left: mu.len(),
                    right: nu.len(),
                });
            }
            let n = mu.len();
            let c = cost_matrix(op, mu, nu);
            let sigma = assignment(&c, n);
            let total: f64 = sigma.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum();
            let cost = total / n as f64;
            Ok((
                cost.sqrt(),
                TransportPlan {
                    method: "exact".into(),
                    cost,
                    plan: PlanKind::Assignment(sigma),
                    iterations: n,
                },
            ))
        }
        OtMethod::Entropic { reg_scale, max_iter } => {
            if !(reg_scale > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "entropic reg_scale must be > 0, got {reg_scale}"
                )));
            }
            let (n, m) = (mu.len(), nu.len());
            let cxy = cost_matrix(op, mu, nu);
            let med = median(&cxy);
            let base = if med > 0.0 {
                med
            } else {
                cxy.iter().sum::<f64>() / cxy.len() as f64
            };
            if base == 0.0 {
                let matrix = vec![1.0 / (n * m) as f64; n * m];
                return Ok((
                    0.0,
                    TransportPlan {
                        method: "entropic".into(),
                        cost: 0.0,
                        plan: PlanKind::Coupling { rows: n, cols: m, matrix },
                        iterations: 0,
                    },
                ));
            }
            let reg = reg_scale * base;
            let xy = sinkhorn(&cxy, n, m, reg, max_iter)?;
            let cxx = cost_matrix(op, mu, mu);
            let xx = sinkhorn(&cxx, n, n, reg, max_iter)?;
            let cyy = cost_matrix(op, nu, nu);
            let yy = sinkhorn(&cyy, m, m, reg, max_iter)?;
            let div = xy.dual - 0.5 * xx.dual - 0.5 * yy.dual;
            Ok((
                div.max(0.0).sqrt(),
                TransportPlan {
                    method: "entropic".into(),
                    cost: div,
                    plan: PlanKind::Coupling {
                        rows: n,
                        cols: m,
                        matrix: xy.plan,
                    },
                    iterations: xy.iterations + xx.iterations + yy.iterations,
                },
            ))
        }
        OtMethod::Auto => unreachable!(),
    }
}

/// Minimum-cost perfect matching on a square `n × n` row-major cost matrix
/// by successive shortest augmenting paths with dual potentials.
pub fn assignment(c: &[f64], n: usize) -> Vec<usize> {
    // 1-based internal indexing; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        sigma[p[j] - 1] = j - 1;
    }
    sigma
}

struct SinkhornOutput {
    dual: f64,
    plan: Vec<f64>,
    iterations: usize,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

const SINKHORN_TOL: f64 = 1e-10;

/// Plain sweeps at the target level before Newton steps take over.
const NEWTON_AFTER: usize = 100;

/// Log-domain Sinkhorn with geometric `ε`-scaling down to `reg`, finished by
/// damped Newton steps on the dual when plain sweeps stall. Iterations are
/// counted at the target regularization only.
fn sinkhorn(c: &[f64], n: usize, m: usize, reg: f64, max_iter: usize) -> Result<SinkhornOutput> {
    let la = -(n as f64).ln();
    let lb = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let cmax = c.iter().cloned().fold(0.0, f64::max);
    let mut eps = cmax.max(reg);

    let sweep = |f: &mut [f64], g: &mut [f64], eps: f64| {
        for (i, fi) in f.iter_mut().enumerate() {
            let row = &c[i * m..(i + 1) * m];
            *fi = -eps * log_sum_exp(row.iter().zip(g.iter()).map(|(cij, gj)| lb + (gj - cij) / eps));
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = -eps * log_sum_exp((0..n).map(|i| la + (f[i] - c[i * m + j]) / eps));
        }
    };

    while eps > reg {
        for _ in 0..20 {
            sweep(&mut f, &mut g, eps);
        }
        eps = (eps * 0.5).max(reg);
    }
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < max_iter {
        if iterations >= NEWTON_AFTER {
            newton_step(c, n, m, reg, &mut f, &mut g);
        }
        sweep(&mut f, &mut g, reg);
        iterations += 1;
        err = row_error(c, n, m, reg, &f, &g);
        if err <= SINKHORN_TOL {
            break;
        }
    }
    if !(err <= SINKHORN_TOL) {
        return Err(Error::SinkhornDivergence {
            iterations,
            error: err,
        });
    }
    let plan = plan_matrix(c, n, m, reg, &f, &g);
    let dual = f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64;
    Ok(SinkhornOutput {
        dual,
        plan,
        iterations,
    })
}

fn plan_matrix(c: &[f64], n: usize, m: usize, reg: f64, f: &[f64], g: &[f64]) -> Vec<f64> {
    let lab = -((n * m) as f64).ln();
    let mut plan = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            plan[i * m + j] = (lab + (f[i] + g[j] - c[i * m + j]) / reg).exp();
        }
    }
    plan
}

fn row_error(c: &[f64], n: usize, m: usize, reg: f64, f: &[f64], g: &[f64]) -> f64 {
    let lab = -((n * m) as f64).ln();
    (0..n)
        .map(|i| {
            let s: f64 = (0..m).map(|j| (lab + (f[i] + g[j] - c[i * m + j]) / reg).exp()).sum();
            (s * n as f64 - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Entropic dual objective `⟨f,a⟩ + ⟨g,b⟩ − ε Σ P_ij`.
fn dual_objective(c: &[f64], n: usize, m: usize, reg: f64, f: &[f64], g: &[f64]) -> f64 {
    let mass: f64 = plan_matrix(c, n, m, reg, f, g).iter().sum();
    f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64 - reg * mass
}

/// One Newton ascent step on the dual with the last `g` pinned, which
/// removes the constant shift `(f + t, g − t)` from the Hessian's kernel.
fn newton_step(c: &[f64], n: usize, m: usize, reg: f64, f: &mut [f64], g: &mut [f64]) {
    let p = plan_matrix(c, n, m, reg, f, g);
    let dim = n + m - 1;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut grad = DVector::<f64>::zeros(dim);
    for i in 0..n {
        let r: f64 = p[i * m..(i + 1) * m].iter().sum();
        h[(i, i)] = r / reg;
        grad[i] = 1.0 / n as f64 - r;
    }
    for j in 0..m - 1 {
        let col: f64 = (0..n).map(|i| p[i * m + j]).sum();
        h[(n + j, n + j)] = col / reg;
        grad[n + j] = 1.0 / m as f64 - col;
        for i in 0..n {
            h[(i, n + j)] = p[i * m + j] / reg;
            h[(n + j, i)] = p[i * m + j] / reg;
        }
    }
    let scale = (0..dim).map(|k| h[(k, k)]).fold(0.0, f64::max);
    let mut shift = 0.0;
    let chol = loop {
        let mut hs = h.clone();
        for k in 0..dim {
            hs[(k, k)] += shift;
        }
        if let Some(ch) = hs.cholesky() {
            break ch;
        }
        shift = if shift == 0.0 { 1e-14 * scale } else { shift * 100.0 };
        if shift > scale {
            return;
        }
    };
    let dir = chol.solve(&grad);
    let slope = grad.dot(&dir);
    if !(slope > 0.0) {
        return;
    }
    let d0 = dual_objective(c, n, m, reg, f, g);
    let mut t = 1.0;
    for _ in 0..30 {
        let ft: Vec<f64> = (0..n).map(|i| f[i] + t * dir[i]).collect();
        let gt: Vec<f64> = (0..m).map(|j| if j + 1 < m { g[j] + t * dir[n + j] } else { g[j] }).collect();
        let dt = dual_objective(c, n, m, reg, &ft, &gt);
        if dt.is_finite() && dt >= d0 + 1e-4 * t * slope {
            f.copy_from_slice(&ft);
            g.copy_from_slice(&gt);
            return;
        }
        t *= 0.5;
    }
}

/// `sup_{r ∈ [s,t]} e^{−λ r} 𝕎₂(A(r), B(r))` over the shared grid nodes.
pub fn flow_distance(
    op: &SpectralOperator,
    a: &MeasureFlow,
    b: &MeasureFlow,
    lambda_disc: f64,
    window: Option<(f64, f64)>,
    method: OtMethod,
) -> Result<f64> {
    let sel = |f: &MeasureFlow| -> Vec<usize> {
        (0..f.len())
            .filter(|&i| window.is_none_or(|(s, t)| f.times[i] >= s && f.times[i] <= t))
            .collect()
    };
    let ia = sel(a);
    let ib = sel(b);
    if ia.len() != ib.len() || ia.iter().zip(&ib).any(|(&i, &j)| a.times[i] != b.times[j]) {
        return Err(Error::GridMismatch(
            "flows do not share their nodes on the window".into(),
        ));
    }
    if ia.is_empty() {
        return Err(Error::GridMismatch("no flow nodes inside the window".into()));
    }
    let vals: Vec<Result<f64>> = ia
        .par_iter()
        .zip(ib.par_iter())
        .map(|(&i, &j)| {
            let (w, _) = w2(op, &a.measures[i], &b.measures[j], method)?;
            Ok((-lambda_disc * a.times[i]).exp() * w)
        })
        .collect();
    let mut best: f64 = 0.0;
    for v in vals {
        best = best.max(v?);
    }
    Ok(best)
}
