//! Sampling-based falsifiers for the monotonicity, Lipschitz, coercivity
//! and noise hypotheses.
//!
//! Each sample is generated from its own counter-addressed stream, so a probe
//! is reproducible for a given seed regardless of thread count, and any
//! reported witness can be regenerated and re-evaluated in isolation.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{second_moment, w2, EmpiricalMeasure, OtMethod};
use crate::model::{DriftSpec, ModelConstants, ModelSpec, NoiseSpec};
use crate::rng::{aux_rng, standard_normal, uniform};
use crate::spectral::{NormSpace, SpectralOperator};

/// Relative floating-point allowance folded into every violation.
const SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    /// Monotonicity with a common law.
    A1Diagonal,
    /// Monotonicity with independent laws.
    A1Cross,
    /// Lipschitz continuity of `Ψ` in `|·|₂ + 𝕎₂`.
    A2,
    /// Cocoercivity-type lower bound on `2⟨ΔΨ, Δu⟩₂`.
    A3,
    /// Lipschitz continuity of `B` into `L₂(U, H)`.
    A4Lipschitz,
    /// Hilbert–Schmidt growth of `B` into `L₂(U, L²)`.
    A4Growth,
}

/// Random sample generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSampler {
    pub seed: u64,
    /// Standard deviation of sampled coordinates.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Atoms per sampled law.
    #[serde(default = "default_atoms")]
    pub atoms: usize,
}

fn default_scale() -> f64 {
    1.0
}

fn default_atoms() -> usize {
    4
}

impl ProbeSampler {
    pub fn new(seed: u64) -> Self {
        ProbeSampler {
            seed,
            scale: default_scale(),
            atoms: default_atoms(),
        }
    }

    /// Deterministic sample `index` for operator dimension `n`.
    pub fn sample(&self, index: usize, n: usize) -> ProbeSample {
        let mut rng = aux_rng(self.seed, 0x5052_0000_0000 + index as u64);
        let normal_vec = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| self.scale * standard_normal(rng)).collect()
        };
        let near = |rng: &mut ChaCha8Rng| 10f64.powf(-6.0 * uniform(rng));
        let u = normal_vec(&mut rng, n);
        let close_v = uniform(&mut rng) < 0.5;
        let v = if close_v {
            let h = near(&mut rng);
            u.iter().map(|x| x + h * self.scale * standard_normal(&mut rng)).collect()
        } else {
            normal_vec(&mut rng, n)
        };
        let mu = normal_vec(&mut rng, n * self.atoms);
        let close_nu = uniform(&mut rng) < 0.5;
        let nu = if close_nu {
            let h = near(&mut rng);
            mu.iter().map(|x| x + h * self.scale * standard_normal(&mut rng)).collect()
        } else {
            normal_vec(&mut rng, n * self.atoms)
        };
        let r = 2.0 * self.scale * standard_normal(&mut rng);
        let close_s = uniform(&mut rng) < 0.5;
        let s = if close_s {
            let h = near(&mut rng);
            if uniform(&mut rng) < 0.5 {
                r + h
            } else {
                r - h
            }
        } else {
            2.0 * self.scale * standard_normal(&mut rng)
        };
        let node = (uniform(&mut rng) * n as f64) as usize;
        ProbeSample {
            index,
            u,
            v,
            mu: EmpiricalMeasure::from_flat(n, mu).expect("sampled law"),
            nu: EmpiricalMeasure::from_flat(n, nu).expect("sampled law"),
            r,
            s,
            node: node.min(n - 1),
        }
    }
}

/// One probe input: two states, two laws, two scalars and a grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub index: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub mu: EmpiricalMeasure,
    pub nu: EmpiricalMeasure,
    pub r: f64,
    pub s: f64,
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub hypothesis: Hypothesis,
    pub samples: usize,
    /// `≤ 0` means every sample satisfied the inequality.
    pub worst_violation: f64,
    pub estimated_constant: f64,
    pub witness: Option<ProbeSample>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.worst_violation <= 0.0
    }

    /// Re-evaluates the stored witness, if any.
    pub fn reevaluate(&self, target: &ProbeTarget<'_>) -> Option<f64> {
        self.witness
            .as_ref()
            .map(|w| evaluate(self.hypothesis, target, w).violation)
    }
}

/// What a probe is run against.
#[derive(Debug, Clone, Copy)]
pub struct ProbeTarget<'a> {
    pub op: &'a SpectralOperator,
    pub drift: Option<&'a DriftSpec>,
    pub noise: Option<&'a NoiseSpec>,
    pub constants: Option<&'a ModelConstants>,
}

impl<'a> ProbeTarget<'a> {
    pub fn model(op: &'a SpectralOperator, model: &'a ModelSpec) -> Self {
        ProbeTarget {
            op,
            drift: Some(&model.drift),
            noise: Some(&model.noise),
            constants: Some(&model.constants),
        }
    }
}

struct Evaluation {
    violation: f64,
    /// Contribution to the constant estimate; `None` for degenerate samples.
    ratio: Option<f64>,
}

fn with_slack(lhs: f64, rhs: f64) -> f64 {
    lhs - rhs - SLACK * (lhs.abs() + rhs.abs())
}

fn exact_w2(op: &SpectralOperator, a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    w2(op, a, b, OtMethod::Exact).expect("equal-size probe laws").0
}

fn noise_amplitudes(noise: &NoiseSpec, op: &SpectralOperator, u: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
    let scales = noise.scales(op);
    let mean = noise.law_mean(mu);
    (0..scales.len())
        .map(|k| noise.amplitude_at(&scales, k, u, Some(mu), Some(&mean)))
        .collect()
}

fn evaluate(h: Hypothesis, t: &ProbeTarget<'_>, x: &ProbeSample) -> Evaluation {
    let op = t.op;
    let n = op.n();
    let psi = |u: &[f64], mu: &EmpiricalMeasure| -> Vec<f64> {
        let d = t.drift.expect("drift probe needs a drift");
        let shift = d.shift(op, mu).expect("probe law dimension");
        let mut grid = vec![0.0; n];
        let mut out = vec![0.0; n];
        d.apply(op, u, &shift, &mut grid, &mut out);
        out
    };
    let constants = || t.constants.expect("probe needs declared constants");
    match h {
        Hypothesis::A1Diagonal | Hypothesis::A1Cross => {
            let d = t.drift.expect("drift probe needs a drift");
            let other = if h == Hypothesis::A1Diagonal { &x.mu } else { &x.nu };
            let sm = d.shift(op, &x.mu).expect("probe law dimension");
            let sn = d.shift(op, other).expect("probe law dimension");
            let ds = x.s - x.r;
            let prod = (d.eval_scalar(x.s, &sm, x.node) - d.eval_scalar(x.r, &sn, x.node)) * ds;
            Evaluation {
                violation: with_slack(-prod, 0.0),
                ratio: (ds != 0.0).then(|| prod / (ds * ds)),
            }
        }
        Hypothesis::A2 => {
            let a0 = constants().alpha0;
            let pu = psi(&x.u, &x.mu);
            let pv = psi(&x.v, &x.nu);
            let dpsi = dist(&pu, &pv);
            let rhs = dist(&x.u, &x.v) + exact_w2(op, &x.mu, &x.nu);
            Evaluation {
                violation: with_slack(dpsi, a0 * rhs),
                ratio: (rhs > 0.0).then(|| dpsi / rhs),
            }
        }
        Hypothesis::A3 => {
            let c = constants();
            let pu = psi(&x.u, &x.mu);
            let pv = psi(&x.v, &x.nu);
            let dp: Vec<f64> = pu.iter().zip(&pv).map(|(a, b)| a - b).collect();
            let du: Vec<f64> = x.u.iter().zip(&x.v).map(|(a, b)| a - b).collect();
            let pair = 2.0 * dp.iter().zip(&du).map(|(a, b)| a * b).sum::<f64>();
            let dp2 = dp.iter().map(|a| a * a).sum::<f64>();
            let w = exact_w2(op, &x.mu, &x.nu);
            let du_h = op.norm_sq_slice(NormSpace::F12Dual, &du);
            let rhs = c.alpha1 * dp2 - c.alpha2 * w * w - c.alpha3 * du_h;
            Evaluation {
                violation: with_slack(rhs, pair),
                ratio: (dp2 > 0.0).then(|| (pair + c.alpha2 * w * w + c.alpha3 * du_h) / dp2),
            }
        }
        Hypothesis::A4Lipschitz => {
            let noise = t.noise.expect("noise probe needs a noise spec");
            let k1 = constants().k1;
            let bu = noise_amplitudes(noise, op, &x.u, &x.mu);
            let bv = noise_amplitudes(noise, op, &x.v, &x.nu);
            let lhs: f64 = bu
                .iter()
                .zip(&bv)
                .zip(op.lambdas())
                .map(|((a, b), l)| (a - b) * (a - b) / (1.0 + l))
                .sum();
            let w = exact_w2(op, &x.mu, &x.nu);
            let rhs = op.dist_sq_slice(NormSpace::F12Dual, &x.u, &x.v) + w * w;
            Evaluation {
                violation: with_slack(lhs, k1 * rhs),
                ratio: (rhs > 0.0).then(|| lhs / rhs),
            }
        }
        Hypothesis::A4Growth => {
            let noise = t.noise.expect("noise probe needs a noise spec");
            let k2 = constants().k2;
            let b = noise_amplitudes(noise, op, &x.u, &x.mu);
            let lhs: f64 = b.iter().map(|a| a * a).sum();
            let u2: f64 = x.u.iter().map(|a| a * a).sum();
            let rhs = 1.0 + u2 + second_moment(&x.mu, op, NormSpace::F12Dual).expect("probe law");
            Evaluation {
                violation: with_slack(lhs, k2 * rhs),
                ratio: Some(lhs / rhs),
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs `n` samples of hypothesis `h` and aggregates them deterministically:
/// the witness is the first sample attaining the worst violation.
pub fn run_probe(h: Hypothesis, target: &ProbeTarget<'_>, sampler: &ProbeSampler, n: usize) -> Result<AssumptionReport> {
    if n == 0 {
        return Err(Error::InvalidParameter("probe needs at least one sample".into()));
    }
    match h {
        Hypothesis::A1Diagonal | Hypothesis::A1Cross | Hypothesis::A2 | Hypothesis::A3 if target.drift.is_none() => {
            return Err(Error::InvalidParameter("drift probe without a drift".into()))
        }
        Hypothesis::A4Lipschitz | Hypothesis::A4Growth if target.noise.is_none() => {
            return Err(Error::InvalidParameter("noise probe without a noise spec".into()))
        }
        Hypothesis::A2 | Hypothesis::A3 | Hypothesis::A4Lipschitz | Hypothesis::A4Growth
            if target.constants.is_none() =>
        {
            return Err(Error::InvalidParameter("probe needs declared constants".into()))
        }
        _ => {}
    }
    if let Some(c) = target.constants {
        if h == Hypothesis::A3 && !(c.alpha1 > 0.0) {
            return Err(Error::InvalidParameter("A3 probe needs alpha1 > 0".into()));
        }
    }
    if sampler.atoms == 0 {
        return Err(Error::InvalidParameter("sampler needs at least one atom".into()));
    }
    let dim = target.op.n();
    let evals: Vec<(f64, Option<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let e = evaluate(h, target, &sampler.sample(i, dim));
            (e.violation, e.ratio)
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, (v, _)) in evals.iter().enumerate() {
        if *v > worst {
            worst = *v;
            arg = i;
        }
    }
    let ratios = evals.iter().filter_map(|(_, r)| *r);
    let estimated_constant = match h {
        Hypothesis::A1Diagonal | Hypothesis::A1Cross | Hypothesis::A3 => ratios.fold(f64::INFINITY, f64::min),
        _ => ratios.fold(0.0, f64::max),
    };
    Ok(AssumptionReport {
        hypothesis: h,
        samples: n,
        worst_violation: worst,
        estimated_constant,
        witness: (worst > 0.0).then(|| sampler.sample(arg, dim)),
    })
}

/// Monotonicity probe in the requested mode.
pub fn probe_a1(drift: &DriftSpec, op: &SpectralOperator, sampler: &ProbeSampler, n: usize, cross: bool) -> Result<AssumptionReport> {
    let target = ProbeTarget {
        op,
        drift: Some(drift),
        noise: None,
        constants: None,
    };
    let h = if cross { Hypothesis::A1Cross } else { Hypothesis::A1Diagonal };
    run_probe(h, &target, sampler, n)
}

/// Every hypothesis against a full model, in a fixed order.
pub fn probe_model(model: &ModelSpec, op: &SpectralOperator, sampler: &ProbeSampler, n: usize) -> Result<Vec<AssumptionReport>> {
    let target = ProbeTarget::model(op, model);
    [
        Hypothesis::A1Diagonal,
        Hypothesis::A1Cross,
        Hypothesis::A2,
        Hypothesis::A3,
        Hypothesis::A4Lipschitz,
        Hypothesis::A4Growth,
    ]
    .into_iter()
    .map(|h| run_probe(h, &target, sampler, n))
    .collect()
}
