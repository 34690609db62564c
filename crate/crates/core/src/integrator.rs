//! Time stepping for frozen-law and interacting particle ensembles.
//!
//! One step of the default semi-implicit scheme reads, mode by mode,
//!
//! ```text
//! X⁺_k = (X_k − Δt a_k Ψ_k(X, μ) + B_k(X, μ) ΔW_k) / (1 + Δt λ a_k),   a_k = λ_k + ε,
//! ```
//!
//! which solves the viscous part `λ(L − ε)X` exactly and treats `Ψ` and the
//! noise explicitly. The drift-implicit variant replaces `Ψ(X)` by `Ψ(X⁺)`
//! and resolves the step by a damped fixed-point iteration.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, MeasureFlow};
use crate::model::{ModelSpec, Shift};
use crate::rng::{aux_rng, standard_normal, NoisePlan, NoiseStream};
use crate::spectral::{NormSpace, SpectralOperator};

/// Uniform grid `t_j = origin + (first + j) Δt`, `j = 0..=n_steps`.
///
/// Sub-grids produced by [`TimeGrid::window`] keep the parent's origin and
/// offset so node times and noise step indices agree bitwise with the
/// parent grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    origin: f64,
    dt: f64,
    first: usize,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidParameter("time grid needs n_steps >= 1".into()));
        }
        let dt = (t_end - t_start) / n_steps as f64;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "time grid needs t_end > t_start (got [{t_start}, {t_end}])"
            )));
        }
        Ok(TimeGrid {
            origin: t_start,
            dt,
            first: 0,
            n_steps,
        })
    }

    /// The `n_steps`-step sub-grid starting at local node `start`.
    pub fn window(&self, start: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || start + n_steps > self.n_steps {
            return Err(Error::GridMismatch(format!(
                "window [{start}, {}] outside grid of {} steps",
                start + n_steps,
                self.n_steps
            )));
        }
        Ok(TimeGrid {
            origin: self.origin,
            dt: self.dt,
            first: self.first + start,
            n_steps,
        })
    }

    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        self.origin + (self.first + j) as f64 * self.dt
    }

    /// Global step index of local step `j`, used to address noise.
    #[inline]
    pub fn step_index(&self, j: usize) -> usize {
        self.first + j
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|j| self.node(j)).collect()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn t_start(&self) -> f64 {
        self.node(0)
    }

    pub fn t_end(&self) -> f64 {
        self.node(self.n_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScheme {
    #[default]
    SemiImplicit,
    DriftImplicit,
}

/// Regularization parameters and scheme shared by every particle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepConfig {
    pub eps: f64,
    pub lam: f64,
    pub scheme: StepScheme,
}

impl StepConfig {
    pub fn new(eps: f64, lam: f64, scheme: StepScheme) -> Self {
        StepConfig { eps, lam, scheme }
    }
}

/// Where the law entering the coefficients came from.
#[derive(Debug, Clone, PartialEq)]
pub enum LawSource {
    Frozen(Arc<MeasureFlow>),
    Interacting,
    /// Loaded from disk; the driving flow was not persisted.
    Detached,
}

impl LawSource {
    fn tag(&self) -> &'static str {
        match self {
            LawSource::Frozen(_) => "frozen",
            LawSource::Interacting => "interacting",
            LawSource::Detached => "detached",
        }
    }
}

/// `M` particle paths on a time grid with the provenance that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub grid: TimeGrid,
    /// One measure per grid node.
    pub paths: Vec<EmpiricalMeasure>,
    pub noise: NoisePlan,
    pub model: ModelSpec,
    pub step: StepConfig,
    pub law: LawSource,
}

impl TrajectoryEnsemble {
    pub fn particles(&self) -> usize {
        self.paths[0].len()
    }

    pub fn dim(&self) -> usize {
        self.paths[0].dim()
    }

    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.paths.last().expect("non-empty trajectory")
    }

    pub fn initial(&self) -> &EmpiricalMeasure {
        &self.paths[0]
    }

    /// Law flow sampled every `stride` nodes, always including the last one.
    pub fn law_flow(&self, stride: usize) -> MeasureFlow {
        let idx = flow_indices(self.grid.n_steps(), stride);
        let times = idx.iter().map(|&j| self.grid.node(j)).collect();
        let measures = idx.iter().map(|&j| self.paths[j].clone()).collect();
        MeasureFlow::new(times, measures).expect("grid nodes increase")
    }

    /// Bitwise equality of the sampled paths.
    pub fn same_paths(&self, other: &TrajectoryEnsemble) -> bool {
        self.paths.len() == other.paths.len()
            && self.paths.iter().zip(&other.paths).all(|(a, b)| {
                a.dim() == b.dim()
                    && a.as_flat().len() == b.as_flat().len()
                    && a.as_flat().iter().zip(b.as_flat()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Per-particle `sup_j ‖X_i(t_j)‖²_space`.
    pub fn sup_norm_sq(&self, op: &SpectralOperator, space: NormSpace) -> Vec<f64> {
        let mut sup = vec![0.0f64; self.particles()];
        for mu in &self.paths {
            for (s, p) in sup.iter_mut().zip(mu.particles()) {
                *s = s.max(op.norm_sq_slice(space, p));
            }
        }
        sup
    }

    /// Per-node ensemble statistics as CSV.
    pub fn stats_csv(&self, op: &SpectralOperator) -> String {
        let mut s = String::from("t,mean_l2_sq,mean_h_sq,mean_f12_sq,max_l2_sq\n");
        for (j, mu) in self.paths.iter().enumerate() {
            let m = mu.len() as f64;
            let (mut l2, mut h, mut f, mut mx) = (0.0, 0.0, 0.0, 0.0f64);
            for p in mu.particles() {
                let a = op.norm_sq_slice(NormSpace::L2, p);
                l2 += a;
                h += op.norm_sq_slice(NormSpace::F12Dual, p);
                f += op.norm_sq_slice(NormSpace::F12, p);
                mx = mx.max(a);
            }
            let _ = writeln!(s, "{},{},{},{},{}", self.grid.node(j), l2 / m, h / m, f / m, mx);
        }
        s
    }

    /// Writes `<base>.bin` (little-endian coefficients, node-major) and the
    /// `<base>.json` sidecar; returns both paths.
    pub fn save(&self, base: &Path) -> Result<(PathBuf, PathBuf)> {
        let bin = base.with_extension("bin");
        let json = base.with_extension("json");
        let mut w = BufWriter::new(fs::File::create(&bin)?);
        w.write_all(MAGIC)?;
        for v in [self.particles(), self.dim(), self.paths.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for mu in &self.paths {
            for x in mu.as_flat() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        let sidecar = Sidecar {
            format: "ddspme-trajectory-v1".into(),
            model_hash: model_hash(&self.model),
            model: self.model.clone(),
            seed: self.noise.seed,
            noise_modes: self.noise.modes,
            grid: self.grid,
            eps: self.step.eps,
            lam: self.step.lam,
            scheme: self.step.scheme,
            particles: self.particles(),
            dim: self.dim(),
            nodes: self.paths.len(),
            law: self.law.tag().into(),
        };
        fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
        Ok((bin, json))
    }

    pub fn load(base: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(base.with_extension("json"))?)?;
        let mut r = BufReader::new(fs::File::open(base.with_extension("bin"))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Io("not a trajectory container".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word) as usize;
        }
        let [m, n, nodes] = header;
        if (m, n, nodes) != (sidecar.particles, sidecar.dim, sidecar.nodes) {
            return Err(Error::Io("container header disagrees with sidecar".into()));
        }
        let mut paths = Vec::with_capacity(nodes);
        for _ in 0..nodes {
            let mut data = vec![0.0; m * n];
            for x in data.iter_mut() {
                r.read_exact(&mut word)?;
                *x = f64::from_le_bytes(word);
            }
            paths.push(EmpiricalMeasure::from_flat(n, data)?);
        }
        Ok(TrajectoryEnsemble {
            grid: sidecar.grid,
            paths,
            noise: NoisePlan::new(sidecar.seed, sidecar.noise_modes),
            model: sidecar.model,
            step: StepConfig::new(sidecar.eps, sidecar.lam, sidecar.scheme),
            law: LawSource::Detached,
        })
    }
}

const MAGIC: &[u8; 8] = b"DDSPTRJ1";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    model_hash: String,
    model: ModelSpec,
    seed: u64,
    noise_modes: usize,
    grid: TimeGrid,
    eps: f64,
    lam: f64,
    scheme: StepScheme,
    particles: usize,
    dim: usize,
    nodes: usize,
    law: String,
}

/// Hex SHA-256 of the canonical JSON form of a model.
pub fn model_hash(model: &ModelSpec) -> String {
    let bytes = serde_json::to_vec(model).expect("model serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Local node indices `0, stride, 2·stride, …, n`.
pub fn flow_indices(n_steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut idx: Vec<usize> = (0..=n_steps).step_by(stride).collect();
    if *idx.last().unwrap() != n_steps {
        idx.push(n_steps);
    }
    idx
}

/// Initial law from which particles are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitLaw {
    /// Independent coefficients `mean_k + scale (1+λ_k)^{−decay} Z_k`.
    Gaussian {
        scale: f64,
        #[serde(default)]
        decay: f64,
        #[serde(default)]
        mean: Option<Vec<f64>>,
    },
    /// Every particle starts at the same state.
    Dirac { coeffs: Vec<f64> },
}

impl InitLaw {
    pub fn sample(&self, op: &SpectralOperator, particles: usize, seed: u64) -> Result<EmpiricalMeasure> {
        if particles == 0 {
            return Err(Error::EmptyMeasure);
        }
        let n = op.n();
        match self {
            InitLaw::Gaussian { scale, decay, mean } => {
                if !(*scale >= 0.0 && scale.is_finite()) {
                    return Err(Error::InvalidParameter(format!("init scale must be >= 0, got {scale}")));
                }
                if let Some(m) = mean {
                    op.check(m)?;
                }
                let sd: Vec<f64> = op.lambdas().iter().map(|l| scale * (1.0 + l).powf(-decay)).collect();
                let mut rng = aux_rng(seed, u64::MAX);
                let mut data = Vec::with_capacity(n * particles);
                for _ in 0..particles {
                    for k in 0..n {
                        let m = mean.as_ref().map_or(0.0, |m| m[k]);
                        data.push(m + sd[k] * standard_normal(&mut rng));
                    }
                }
                EmpiricalMeasure::from_flat(n, data)
            }
            InitLaw::Dirac { coeffs } => {
                op.check(coeffs)?;
                EmpiricalMeasure::from_flat(n, coeffs.repeat(particles))
            }
        }
    }
}

/// Measure statistics needed by the coefficients, computed once per law.
struct PreparedLaw<'a> {
    shift: Shift,
    noise_mean: Option<Vec<f64>>,
    measure: Option<&'a EmpiricalMeasure>,
}

/// Per-run constants of the scheme.
struct Stepper<'a> {
    op: &'a SpectralOperator,
    model: &'a ModelSpec,
    step: StepConfig,
    dt: f64,
    a: Vec<f64>,
    denom: Vec<f64>,
    scales: Vec<f64>,
}

const INNER_TOL: f64 = 1e-10;
const INNER_MAX_ITER: usize = 50;

struct Scratch {
    grid: Vec<f64>,
    psi: Vec<f64>,
    dw: Vec<f64>,
    rhs: Vec<f64>,
    y: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, k: usize) -> Self {
        Scratch {
            grid: vec![0.0; n],
            psi: vec![0.0; n],
            dw: vec![0.0; k],
            rhs: vec![0.0; n],
            y: vec![0.0; n],
        }
    }
}

impl<'a> Stepper<'a> {
    fn new(op: &'a SpectralOperator, model: &'a ModelSpec, step: StepConfig, dt: f64) -> Self {
        let a: Vec<f64> = op.lambdas().iter().map(|l| l + step.eps).collect();
        let denom = a.iter().map(|ak| 1.0 + dt * step.lam * ak).collect();
        Stepper {
            op,
            model,
            step,
            dt,
            a,
            denom,
            scales: model.noise.scales(op),
        }
    }

    fn prepare<'m>(&self, mu: &'m EmpiricalMeasure) -> Result<PreparedLaw<'m>> {
        let shift = self.model.drift.shift(self.op, mu)?;
        let noise = &self.model.noise;
        let coupled = !noise.is_measure_free();
        Ok(PreparedLaw {
            shift,
            noise_mean: (coupled && noise.saturation.is_none()).then(|| noise.law_mean(mu)),
            measure: coupled.then_some(mu),
        })
    }

    #[inline]
    fn amplitude(&self, k: usize, x: &[f64], law: &PreparedLaw<'_>) -> f64 {
        self.model
            .noise
            .amplitude_at(&self.scales, k, x, law.measure, law.noise_mean.as_deref())
    }

    /// Advances one particle; `out` receives `X⁺`.
    fn advance(&self, x: &[f64], law: &PreparedLaw<'_>, s: &mut Scratch, out: &mut [f64], step: usize) -> Result<()> {
        let n = x.len();
        s.rhs.copy_from_slice(x);
        for k in 0..self.scales.len() {
            s.rhs[k] += self.amplitude(k, x, law) * s.dw[k];
        }
        let drift = &self.model.drift;
        drift.apply(self.op, x, &law.shift, &mut s.grid, &mut s.psi);
        for k in 0..n {
            out[k] = (s.rhs[k] - self.dt * self.a[k] * s.psi[k]) / self.denom[k];
        }
        if self.step.scheme == StepScheme::SemiImplicit {
            return Ok(());
        }
        let mut omega = 1.0;
        let mut prev = f64::INFINITY;
        let mut res = f64::INFINITY;
        for _ in 0..INNER_MAX_ITER {
            drift.apply(self.op, out, &law.shift, &mut s.grid, &mut s.psi);
            res = 0.0;
            let mut norm = 0.0;
            for k in 0..n {
                s.y[k] = (s.rhs[k] - self.dt * self.a[k] * s.psi[k]) / self.denom[k];
                let d = s.y[k] - out[k];
                res += d * d;
                norm += out[k] * out[k];
            }
            res = res.sqrt();
            if !res.is_finite() {
                break;
            }
            if res <= INNER_TOL * (1.0 + norm.sqrt()) {
                out.copy_from_slice(&s.y);
                return Ok(());
            }
            if res > prev {
                omega *= 0.5;
            }
            prev = res;
            for k in 0..n {
                out[k] += omega * (s.y[k] - out[k]);
            }
        }
        Err(Error::InnerSolve { step, residual: res })
    }
}

fn check_inputs(
    op: &SpectralOperator,
    model: &ModelSpec,
    step: &StepConfig,
    init: &EmpiricalMeasure,
    noise: &NoisePlan,
) -> Result<()> {
    for (name, v) in [("eps", step.eps), ("lambda", step.lam)] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::InvalidParameter(format!("{name} must lie in [0,1), got {v}")));
        }
    }
    if init.dim() != op.n() {
        return Err(Error::DimensionMismatch {
            expected: op.n(),
            got: init.dim(),
        });
    }
    let k = model.noise.modes_for(op);
    if noise.modes != k {
        return Err(Error::InvalidParameter(format!(
            "noise plan drives {} modes but the model uses K = {k}",
            noise.modes
        )));
    }
    if let Err(e) = model.drift.validate().and(model.noise.validate()) {
        return Err(e);
    }
    Ok(())
}

fn run(
    op: &SpectralOperator,
    model: &ModelSpec,
    step: StepConfig,
    law: LawSource,
    init: &EmpiricalMeasure,
    grid: &TimeGrid,
    noise: &NoisePlan,
) -> Result<TrajectoryEnsemble> {
    check_inputs(op, model, &step, init, noise)?;
    if let LawSource::Frozen(flow) = &law {
        flow.index_at(grid.t_start())?;
        if flow.measures()[0].dim() != op.n() {
            return Err(Error::DimensionMismatch {
                expected: op.n(),
                got: flow.measures()[0].dim(),
            });
        }
    }
    let stepper = Stepper::new(op, model, step, grid.dt());
    let n = op.n();
    let m = init.len();
    let k = noise.modes;
    let mut streams: Vec<NoiseStream> = (0..m).map(|i| noise.stream(i)).collect();
    let mut paths = Vec::with_capacity(grid.n_steps() + 1);
    paths.push(init.clone());
    for j in 0..grid.n_steps() {
        let gstep = grid.step_index(j);
        let current = paths.last().unwrap();
        let mu = match &law {
            LawSource::Frozen(flow) => flow.at(grid.node(j))?,
            _ => current,
        };
        let prepared = stepper.prepare(mu)?;
        let mut next = vec![0.0; m * n];
        let results: Vec<Result<()>> = next
            .par_chunks_mut(n)
            .zip(streams.par_iter_mut())
            .enumerate()
            .map_init(
                || Scratch::new(n, k),
                |s, (i, (out, stream))| {
                    stream.increments(gstep, grid.dt(), &mut s.dw);
                    stepper.advance(current.particle(i), &prepared, s, out, gstep)?;
                    if out.iter().any(|v| !v.is_finite()) {
                        return Err(Error::BlowUp { step: gstep, particle: i });
                    }
                    Ok(())
                },
            )
            .collect();
        for r in results {
            r?;
        }
        paths.push(EmpiricalMeasure::from_flat(n, next)?);
    }
    Ok(TrajectoryEnsemble {
        grid: *grid,
        paths,
        noise: *noise,
        model: model.clone(),
        step,
        law,
    })
}

/// Integrates every particle against a prescribed measure flow, read
/// piecewise-constant from the left.
pub fn integrate_frozen(
    op: &SpectralOperator,
    model: &ModelSpec,
    step: StepConfig,
    flow: &Arc<MeasureFlow>,
    init: &EmpiricalMeasure,
    grid: &TimeGrid,
    noise: &NoisePlan,
) -> Result<TrajectoryEnsemble> {
    run(op, model, step, LawSource::Frozen(flow.clone()), init, grid, noise)
}

/// Integrates the particle system whose coefficients see the current
/// empirical law of the ensemble itself.
pub fn integrate_interacting(
    op: &SpectralOperator,
    model: &ModelSpec,
    step: StepConfig,
    init: &EmpiricalMeasure,
    grid: &TimeGrid,
    noise: &NoisePlan,
) -> Result<TrajectoryEnsemble> {
    run(op, model, step, LawSource::Interacting, init, grid, noise)
}

/// Largest explicit step for which the drift update stays monotone.
pub fn explicit_dt_bound(op: &SpectralOperator, model: &ModelSpec, eps: f64) -> f64 {
    let lip = model.drift.lipschitz();
    let amax = op.max_lambda() + eps;
    if lip * amax == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (lip * amax)
    }
}

/// Discrete Itô balance for `‖X‖²_H` and the sign checks through
/// `P = (δ − ε)(δ − L)^{−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Ensemble-mean defect of each step.
    pub residuals: Vec<f64>,
    /// Running sum of `residuals`.
    pub cumulative: Vec<f64>,
    /// Running ensemble mean of `2⟨Ψ, X⟩₂ Δt`.
    pub drift_work: Vec<f64>,
    /// Running ensemble mean of `Σ_k ‖B e_k‖²_H Δt`.
    pub noise_qv: Vec<f64>,
    /// `max_n |cumulative_n|`
    pub max_residual: f64,
    pub delta: f64,
    /// Largest `2⟨Ψ(u)−Ψ(v), (P−I)(u−v)⟩₂` over neighbouring particle pairs.
    pub max_pair_surrogate: f64,
    /// Largest `2⟨Ψ(X), PX − X⟩₂` over particles.
    pub max_self_form: f64,
}

pub fn ito_ledger(traj: &TrajectoryEnsemble, op: &SpectralOperator, delta: f64) -> Result<EnergyReport> {
    if !(delta > traj.step.eps) {
        return Err(Error::InvalidParameter(format!(
            "delta must exceed eps ({} vs {})",
            delta, traj.step.eps
        )));
    }
    let flow = match &traj.law {
        LawSource::Detached => {
            return Err(Error::MissingProvenance(
                "trajectory was loaded without the law that drove it".into(),
            ))
        }
        LawSource::Frozen(f) => Some(f.clone()),
        LawSource::Interacting => None,
    };
    let grid = &traj.grid;
    let dt = grid.dt();
    let n = op.n();
    let m = traj.particles();
    let stepper = Stepper::new(op, &traj.model, traj.step, dt);
    let p = op.p_operator(delta, traj.step.eps);
    let lambdas = op.lambdas();
    let h_w: Vec<f64> = lambdas.iter().map(|l| 1.0 / (1.0 + l)).collect();
    let k = traj.noise.modes;

    let mut residuals = Vec::with_capacity(grid.n_steps());
    let (mut cum, mut work, mut qv) = (Vec::new(), Vec::new(), Vec::new());
    let (mut c_res, mut c_work, mut c_qv) = (0.0, 0.0, 0.0);
    let mut max_pair = f64::NEG_INFINITY;
    let mut max_self = f64::NEG_INFINITY;
    for j in 0..grid.n_steps() {
        let x_now = &traj.paths[j];
        let x_next = &traj.paths[j + 1];
        let mu = match &flow {
            Some(f) => f.at(grid.node(j))?,
            None => x_now,
        };
        let prepared = stepper.prepare(mu)?;
        let gstep = grid.step_index(j);
        let per: Vec<(f64, f64, f64, Vec<f64>)> = (0..m)
            .into_par_iter()
            .map_init(
                || Scratch::new(n, k),
                |s, i| {
                    let x = x_now.particle(i);
                    let y = x_next.particle(i);
                    traj.noise.increments(i, gstep, dt, &mut s.dw);
                    traj.model.drift.apply(op, x, &prepared.shift, &mut s.grid, &mut s.psi);
                    let mut drift_h = 0.0;
                    let mut noise_h = 0.0;
                    let mut mart = 0.0;
                    for q in 0..n {
                        let aq = -stepper.a[q] * (s.psi[q] + traj.step.lam * x[q]);
                        drift_h += h_w[q] * aq * x[q];
                    }
                    for q in 0..k {
                        let b = stepper.amplitude(q, x, &prepared);
                        noise_h += h_w[q] * b * b;
                        mart += h_w[q] * b * s.dw[q] * x[q];
                    }
                    let lhs = op.norm_sq_slice(NormSpace::F12Dual, y) - op.norm_sq_slice(NormSpace::F12Dual, x);
                    let rhs = 2.0 * drift_h * dt + noise_h * dt + 2.0 * mart;
                    let psi_x: f64 = s.psi.iter().zip(x).map(|(a, b)| a * b).sum();
                    (lhs - rhs, 2.0 * psi_x * dt, noise_h * dt, s.psi.clone())
                },
            )
            .collect();
        let inv = 1.0 / m as f64;
        let r: f64 = per.iter().map(|t| t.0).sum::<f64>() * inv;
        c_res += r;
        c_work += per.iter().map(|t| t.1).sum::<f64>() * inv;
        c_qv += per.iter().map(|t| t.2).sum::<f64>() * inv;
        residuals.push(r);
        cum.push(c_res);
        work.push(c_work);
        qv.push(c_qv);
        for i in 0..m {
            let x = x_now.particle(i);
            let psi = &per[i].3;
            let self_form: f64 = (0..n).map(|q| psi[q] * (p[q] - 1.0) * x[q]).sum::<f64>() * 2.0;
            max_self = max_self.max(self_form);
            if m > 1 {
                let i2 = (i + 1) % m;
                let z = x_now.particle(i2);
                let psi2 = &per[i2].3;
                let pair: f64 = (0..n)
                    .map(|q| (psi[q] - psi2[q]) * (p[q] - 1.0) * (x[q] - z[q]))
                    .sum::<f64>()
                    * 2.0;
                max_pair = max_pair.max(pair);
            }
        }
    }
    let max_residual = cum.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    Ok(EnergyReport {
        residuals,
        cumulative: cum,
        drift_work: work,
        noise_qv: qv,
        max_residual,
        delta,
        max_pair_surrogate: if m > 1 { max_pair } else { 0.0 },
        max_self_form: max_self,
    })
}

/// Summed raw increments `Σ_j ΔW_k(t_j)` for one particle, used as an oracle.
pub fn summed_increments(noise: &NoisePlan, particle: usize, grid: &TimeGrid) -> Vec<f64> {
    let mut total = vec![0.0; noise.modes];
    let mut buf = vec![0.0; noise.modes];
    let mut s = noise.stream(particle);
    for j in 0..grid.n_steps() {
        s.increments(grid.step_index(j), grid.dt(), &mut buf);
        for (t, b) in total.iter_mut().zip(&buf) {
            *t += b;
        }
    }
    total
}

/// Random `u64` from an auxiliary stream, for deriving sub-seeds.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    aux_rng(seed, purpose).next_u64()
}
