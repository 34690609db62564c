//! Experiment configuration schema.
//!
//! A config is a single JSON document. Every block rejects unknown keys, so
//! a typo fails at parse time instead of silently falling back to a default.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ddspme_core::integrator::{explicit_dt_bound, InitLaw, StepConfig};
use ddspme_core::picard::PicardConfig;
use ddspme_core::probe::ProbeSampler;
use ddspme_core::{ModelSpec, NoisePlan, OtMethod, SpectralOperator, StepScheme, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Solve,
    PicardDiagnose,
    SweepLambda,
    SweepEpsilon,
    ProbeAssumptions,
    Apriori,
    OracleOt,
    Validate,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Solve,
        Task::PicardDiagnose,
        Task::SweepLambda,
        Task::SweepEpsilon,
        Task::ProbeAssumptions,
        Task::Apriori,
        Task::OracleOt,
        Task::Validate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Solve => "solve",
            Task::PicardDiagnose => "picard-diagnose",
            Task::SweepLambda => "sweep-lambda",
            Task::SweepEpsilon => "sweep-epsilon",
            Task::ProbeAssumptions => "probe-assumptions",
            Task::Apriori => "apriori",
            Task::OracleOt => "oracle-ot",
            Task::Validate => "validate",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorConfig {
    FractionalLaplacian {
        #[serde(rename = "N")]
        n: usize,
        alpha: f64,
    },
    Explicit {
        #[serde(default = "default_label")]
        label: String,
        lambdas: Vec<f64>,
    },
}

fn default_label() -> String {
    "explicit".into()
}

impl OperatorConfig {
    pub fn build(&self) -> ddspme_core::error::Result<SpectralOperator> {
        match self {
            OperatorConfig::FractionalLaplacian { n, alpha } => SpectralOperator::fractional_laplacian(*n, *alpha),
            OperatorConfig::Explicit { label, lambdas } => SpectralOperator::from_spectrum(label.clone(), lambdas.clone()),
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            OperatorConfig::FractionalLaplacian { n, alpha } => {
                if *n == 0 {
                    v.push("operator.N must be >= 1".into());
                }
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    v.push(format!("operator.alpha outside (0,1]: {alpha}"));
                }
            }
            OperatorConfig::Explicit { lambdas, .. } => {
                if lambdas.is_empty() {
                    v.push("operator.lambdas must be non-empty".into());
                }
                if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                    v.push("operator.lambdas must be finite and >= 0".into());
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
    #[serde(rename = "M")]
    pub particles: usize,
    /// Overrides the noise block's mode count when set.
    #[serde(rename = "K", default)]
    pub modes: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub scheme: StepScheme,
    pub init: InitLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_atoms")]
    pub atoms: usize,
}

fn default_samples() -> usize {
    10_000
}
fn default_scale() -> f64 {
    1.0
}
fn default_atoms() -> usize {
    4
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            samples: default_samples(),
            seed: 0,
            scale: default_scale(),
            atoms: default_atoms(),
        }
    }
}

impl ProbeConfig {
    pub fn sampler(&self) -> ProbeSampler {
        ProbeSampler {
            seed: self.seed,
            scale: self.scale,
            atoms: self.atoms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task the config was written for; the command line decides what runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    pub operator: OperatorConfig,
    pub model: ModelSpec,
    pub run: RunConfig,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    /// Transport method for the `oracle-ot` task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ot: Option<OtMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

/// Seeds handed to each random consumer, all derived from `run.seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub run_seed: u64,
    pub noise_seed: u64,
    pub init_seed: u64,
    pub probe_seed: u64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Schema(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of the canonical serialization with `task` set to the task
    /// being run.
    pub fn hash(&self, task: Task) -> String {
        let mut c = self.clone();
        c.task = Some(task);
        c.output = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> SeedProvenance {
        use ddspme_core::integrator::derive_seed;
        SeedProvenance {
            run_seed: self.run.seed,
            noise_seed: derive_seed(self.run.seed, 1),
            init_seed: derive_seed(self.run.seed, 2),
            probe_seed: self.probe.as_ref().map_or(0, |p| p.seed),
        }
    }

    /// Model with the run block's mode override applied.
    pub fn model(&self) -> ModelSpec {
        let mut m = self.model.clone();
        if let Some(k) = self.run.modes {
            m.noise.modes = Some(k);
        }
        m
    }

    pub fn grid(&self) -> ddspme_core::error::Result<TimeGrid> {
        TimeGrid::new(0.0, self.run.horizon, self.run.n_steps)
    }

    pub fn step(&self) -> StepConfig {
        StepConfig::new(self.run.eps, self.run.lambda, self.run.scheme)
    }

    pub fn noise_plan(&self, op: &SpectralOperator) -> NoisePlan {
        NoisePlan::new(self.seeds().noise_seed, self.model().noise.modes_for(op))
    }

    /// Every schema-level and invariant violation, without running anything.
    pub fn violations(&self, task: Task) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.operator.violations());
        let model = self.model();
        v.extend(model.validate().into_iter().map(|s| format!("model: {s}")));
        v.extend(self.picard.validate().into_iter().map(|s| format!("picard: {s}")));

        let r = &self.run;
        if !(r.horizon > 0.0 && r.horizon.is_finite()) {
            v.push(format!("run.T must be > 0, got {}", r.horizon));
        }
        if r.n_steps == 0 {
            v.push("run.n_steps must be >= 1".into());
        }
        if r.particles == 0 {
            v.push("run.M must be >= 1".into());
        }
        if r.modes == Some(0) {
            v.push("run.K must be >= 1".into());
        }
        if !(0.0..1.0).contains(&r.eps) {
            v.push(format!("run.eps must lie in [0,1), got {}", r.eps));
        }
        if !(0.0..1.0).contains(&r.lambda) {
            v.push(format!("run.lambda must lie in [0,1), got {}", r.lambda));
        }

        if let Ok(op) = self.operator.build() {
            let k = model.noise.modes_for(&op);
            if k > op.n() {
                v.push(format!("noise modes K = {k} exceed operator size N = {}", op.n()));
            }
            if let InitLaw::Dirac { coeffs } = &r.init {
                if coeffs.len() != op.n() {
                    v.push(format!("run.init.coeffs has {} entries, operator has N = {}", coeffs.len(), op.n()));
                }
            }
            if let InitLaw::Gaussian { mean: Some(m), .. } = &r.init {
                if m.len() != op.n() {
                    v.push(format!("run.init.mean has {} entries, operator has N = {}", m.len(), op.n()));
                }
            }
            if r.scheme == StepScheme::SemiImplicit && r.horizon > 0.0 && r.n_steps > 0 {
                let dt = r.horizon / r.n_steps as f64;
                let bound = explicit_dt_bound(&op, &model, r.eps);
                if dt > bound {
                    v.push(format!(
                        "dt = {dt} exceeds the explicit-scheme stability bound 1/(Lip(psi)*max(lambda_k+eps)) = {bound}"
                    ));
                }
            }
        }

        match task {
            Task::SweepLambda | Task::SweepEpsilon => match &self.sweep {
                None => v.push(format!("task {task} needs a sweep block")),
                Some(s) => {
                    let mut d = s.values.clone();
                    if d.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
                        v.push("sweep.values must lie in (0,1)".into());
                    }
                    d.sort_by(f64::total_cmp);
                    d.dedup();
                    if d.len() < 3 {
                        v.push("sweep.values needs >= 3 distinct values".into());
                    }
                }
            },
            Task::ProbeAssumptions => {
                if let Some(p) = &self.probe {
                    if p.samples == 0 {
                        v.push("probe.samples must be >= 1".into());
                    }
                    if p.atoms == 0 {
                        v.push("probe.atoms must be >= 1".into());
                    }
                    if !(p.scale > 0.0) {
                        v.push("probe.scale must be > 0".into());
                    }
                }
            }
            _ => {}
        }
        if let Some(OtMethod::Entropic { reg_scale, max_iter }) = self.ot {
            if !(reg_scale > 0.0) {
                v.push("ot.reg_scale must be > 0".into());
            }
            if max_iter == 0 {
                v.push("ot.max_iter must be >= 1".into());
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "operator": {"kind": "fractional_laplacian", "N": 4, "alpha": 1.0},
        "model": {
            "drift": {"nonlinearity": {"kind": "identity"}},
            "noise": {"amplitude": 0.0},
            "constants": {"alpha0": 1.0, "alpha1": 1.0, "alpha2": 0.0, "alpha3": 0.0,
                          "K1": 0.0, "K2": 0.0, "c": 1.0, "delta": 1.0, "alpha_coer": 2.0, "f_bound": 0.0}
        },
        "run": {"T": 1.0, "n_steps": 100, "M": 4, "seed": 1, "init": {"kind": "gaussian", "scale": 1.0}}
    }"#;

    #[test]
    fn minimal_config_is_valid() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert!(c.violations(Task::Solve).is_empty(), "{:?}", c.violations(Task::Solve));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replacen("\"seed\": 1", "\"seed\": 1, \"sead\": 2", 1);
        assert!(matches!(ExperimentConfig::parse(&bad), Err(CliError::Schema(_))));
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
    }

    #[test]
    fn hash_ignores_output_but_not_task() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        assert_eq!(a.hash(Task::Solve), b.hash(Task::Solve));
        assert_ne!(a.hash(Task::Solve), a.hash(Task::Apriori));
    }
}
