//! Picard iteration of the law map `Φ` on measure flows.
//!
//! Within a window `[s, s + t₀]` the iterates are `μ_{k+1} = law(X^{μ_k})`,
//! where `X^{μ_k}` is integrated against the frozen flow `μ_k` with the same
//! noise every time. Windows of length `θ/ĉ` are chained until `T`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{flow_indices, integrate_frozen, LawSource, StepConfig, TimeGrid, TrajectoryEnsemble};
use crate::measure::{flow_distance, EmpiricalMeasure, MeasureFlow, OtMethod};
use crate::model::ModelSpec;
use crate::rng::NoisePlan;
use crate::spectral::SpectralOperator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    /// Working contraction constant; falls back to the model's `c`, then to
    /// a bootstrap estimate.
    #[serde(default)]
    pub c_hat: Option<f64>,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Grid steps between stored flow nodes.
    #[serde(default = "default_stride")]
    pub flow_stride: usize,
    #[serde(default = "default_ot")]
    pub ot: OtMethod,
}

fn default_theta() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    50
}
fn default_stride() -> usize {
    1
}
fn default_ot() -> OtMethod {
    OtMethod::Exact
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            c_hat: None,
            theta: default_theta(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            flow_stride: default_stride(),
            ot: default_ot(),
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.theta > 0.0 && self.theta < 1.0) {
            v.push(format!("theta must lie in (0,1), got {}", self.theta));
        }
        if !(self.tol > 0.0) {
            v.push(format!("tol must be > 0, got {}", self.tol));
        }
        if self.max_iter == 0 {
            v.push("max_iter must be >= 1".into());
        }
        if self.flow_stride == 0 {
            v.push("flow_stride must be >= 1".into());
        }
        if let Some(c) = self.c_hat {
            if !(c > 0.0 && c.is_finite()) {
                v.push(format!("c_hat must be > 0, got {c}"));
            }
        }
        v
    }
}

/// Bookkeeping of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardDiagnostics {
    pub window: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub c_hat: f64,
    pub lambda_disc: f64,
    /// `d_k = d(μ_k, μ_{k+1})`
    pub distances: Vec<f64>,
    /// `d_k / d_{k−1}`
    pub ratios: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PicardDiagnostics {
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (k, d) in self.distances.iter().enumerate() {
            let r = if k == 0 { String::new() } else { self.ratios[k - 1].to_string() };
            s.push_str(&format!("{},{},{},{}\n", self.window, k, d, r));
        }
        s
    }
}

pub const DIAGNOSTICS_CSV_HEADER: &str = "window,iteration,d_k,ratio\n";

fn window_flow_times(grid: &TimeGrid, stride: usize) -> Vec<f64> {
    flow_indices(grid.n_steps(), stride)
        .into_iter()
        .map(|j| grid.node(j))
        .collect()
}

fn check_model(model: &ModelSpec) -> Result<()> {
    if let Some(v) = model.validate().into_iter().next() {
        return Err(Error::InvalidParameter(v));
    }
    Ok(())
}

/// Fixed point of `Φ` on one window, starting from the constant flow at `init`.
#[allow(clippy::too_many_arguments)]
pub fn picard_window(
    op: &SpectralOperator,
    model: &ModelSpec,
    step: StepConfig,
    init: &EmpiricalMeasure,
    grid: &TimeGrid,
    config: &PicardConfig,
    c_hat: f64,
    noise: &NoisePlan,
) -> Result<(Arc<MeasureFlow>, TrajectoryEnsemble, PicardDiagnostics)> {
    if let Some(v) = config.validate().into_iter().next() {
        return Err(Error::InvalidParameter(v));
    }
    check_model(model)?;
    if !(c_hat > 0.0) {
        return Err(Error::InvalidParameter(format!("c_hat must be > 0, got {c_hat}")));
    }
    let len = grid.t_end() - grid.t_start();
    let t0 = config.theta / c_hat;
    if len > t0 * (1.0 + 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "window length {len} exceeds theta/c_hat = {t0}"
        )));
    }
    let lambda_disc = 0.5 * c_hat;
    let mut flow = Arc::new(MeasureFlow::constant(window_flow_times(grid, config.flow_stride), init)?);
    let mut distances = Vec::new();
    let mut ratios = Vec::new();
    for k in 0..config.max_iter {
        let traj = integrate_frozen(op, model, step, &flow, init, grid, noise)?;
        let next = traj.law_flow(config.flow_stride);
        let d = flow_distance(op, &flow, &next, lambda_disc, None, config.ot)?;
        if let Some(prev) = distances.last() {
            ratios.push(if *prev > 0.0 { d / prev } else { 0.0 });
        }
        distances.push(d);
        if d <= config.tol {
            let diag = PicardDiagnostics {
                window: 0,
                t_start: grid.t_start(),
                t_end: grid.t_end(),
                c_hat,
                lambda_disc,
                distances,
                ratios,
                iterations: k + 1,
                converged: true,
            };
            return Ok((flow, traj, diag));
        }
        flow = Arc::new(next);
    }
    Err(Error::PicardNotConverged {
        iterations: config.max_iter,
        last_ratio: ratios.last().copied().unwrap_or(f64::NAN),
    })
}

/// Result of [`estimate_contraction`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionEstimate {
    pub distance_in: f64,
    pub distance_out: f64,
    pub ratio: f64,
    /// `ratio² / (t − s)`
    pub c_hat: f64,
}

/// Measures `d(Φμ⁰, Φν⁰) / d(μ⁰, ν⁰)` under common noise on one window.
///
/// The seed flows must live on the window's flow nodes for `stride`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_contraction(
    op: &SpectralOperator,
    model: &ModelSpec,
    step: StepConfig,
    init: &EmpiricalMeasure,
    grid: &TimeGrid,
    mu0: &Arc<MeasureFlow>,
    nu0: &Arc<MeasureFlow>,
    noise: &NoisePlan,
    lambda_disc: f64,
    stride: usize,
    ot: OtMethod,
) -> Result<ContractionEstimate> {
    let d_in = flow_distance(op, mu0, nu0, lambda_disc, None, ot)?;
    if d_in == 0.0 {
        return Err(Error::ZeroDistance);
    }
    let a = integrate_frozen(op, model, step, mu0, init, grid, noise)?.law_flow(stride);
    let b = integrate_frozen(op, model, step, nu0, init, grid, noise)?.law_flow(stride);
    let d_out = flow_distance(op, &a, &b, lambda_disc, None, ot)?;
    let ratio = d_out / d_in;
    Ok(ContractionEstimate {
        distance_in: d_in,
        distance_out: d_out,
        ratio,
        c_hat: ratio * ratio / (grid.t_end() - grid.t_start()),
    })
}

/// Constant seed flows at `init` and at `init` dilated by `factor`, on the
/// flow nodes of `grid`.
pub fn seed_flows(init: &EmpiricalMeasure, grid: &TimeGrid, stride: usize, factor: f64) -> Result<(Arc<MeasureFlow>, Arc<MeasureFlow>)> {
    let times = window_flow_times(grid, stride);
    let dilated = EmpiricalMeasure::from_flat(init.dim(), init.as_flat().iter().map(|x| x * factor).collect())?;
    Ok((
        Arc::new(MeasureFlow::constant(times.clone(), init)?),
        Arc::new(MeasureFlow::constant(times, &dilated)?),
    ))
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub trajectory: TrajectoryEnsemble,
    pub flow: Arc<MeasureFlow>,
    pub diagnostics: Vec<PicardDiagnostics>,
    pub c_hat: f64,
    pub window_steps: usize,
}

/// Picks `ĉ`: explicit setting, then the declared `c`, then a bootstrap
/// contraction estimate on the leading tenth of the grid.
pub fn resolve_c_hat(
    op: &SpectralOperator,
    model: &ModelSpec,
    step: StepConfig,
    init: &EmpiricalMeasure,
    grid: &TimeGrid,
    config: &PicardConfig,
    noise: &NoisePlan,
) -> Result<f64> {
    if let Some(c) = config.c_hat {
        return Ok(c);
    }
    if model.constants.c > 0.0 {
        return Ok(model.constants.c);
    }
    let horizon = grid.t_end() - grid.t_start();
    let probe = grid.window(0, (grid.n_steps() / 10).max(1))?;
    let (mu0, nu0) = seed_flows(init, &probe, config.flow_stride, 1.5)?;
    let est = match estimate_contraction(op, model, step, init, &probe, &mu0, &nu0, noise, 0.0, config.flow_stride, config.ot) {
        Ok(e) => e,
        Err(Error::ZeroDistance) => return Ok(config.theta / horizon),
        Err(e) => return Err(e),
    };
    Ok(if est.c_hat > 0.0 { est.c_hat } else { config.theta / horizon })
}

/// Chains fixed-point windows over the whole grid.
pub fn solve(
    op: &SpectralOperator,
    model: &ModelSpec,
    step: StepConfig,
    init: &EmpiricalMeasure,
    grid: &TimeGrid,
    config: &PicardConfig,
    noise: &NoisePlan,
) -> Result<Solution> {
    if let Some(v) = config.validate().into_iter().next() {
        return Err(Error::InvalidParameter(v));
    }
    let c_hat = resolve_c_hat(op, model, step, init, grid, config, noise)?;
    let t0 = config.theta / c_hat;
    let window_steps = (((t0 / grid.dt()) * (1.0 + 1e-12)).floor() as usize).clamp(1, grid.n_steps());
    let mut start = 0;
    let mut current = init.clone();
    let mut paths: Vec<EmpiricalMeasure> = Vec::with_capacity(grid.n_steps() + 1);
    let mut flow: Option<MeasureFlow> = None;
    let mut diagnostics = Vec::new();
    let mut w = 0;
    while start < grid.n_steps() {
        let n = window_steps.min(grid.n_steps() - start);
        let sub = grid.window(start, n)?;
        let (f, traj, mut diag) = picard_window(op, model, step, &current, &sub, config, c_hat, noise)
            .map_err(|e| Error::Window { window: w, source: Box::new(e) })?;
        diag.window = w;
        diagnostics.push(diag);
        let skip = usize::from(!paths.is_empty());
        paths.extend(traj.paths.into_iter().skip(skip));
        current = paths.last().unwrap().clone();
        let f = Arc::try_unwrap(f).unwrap_or_else(|a| (*a).clone());
        match flow.as_mut() {
            None => flow = Some(f),
            Some(acc) => acc.append(f)?,
        }
        start += n;
        w += 1;
    }
    let flow = Arc::new(flow.expect("at least one window"));
    Ok(Solution {
        trajectory: TrajectoryEnsemble {
            grid: *grid,
            paths,
            noise: *noise,
            model: model.clone(),
            step,
            law: LawSource::Frozen(flow.clone()),
        },
        flow,
        diagnostics,
        c_hat,
        window_steps,
    })
}
