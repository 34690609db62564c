use ddspme_core::approx::{apriori_check, epsilon_sweep, lambda_sweep, SweepTable};
use ddspme_core::integrator::{derive_seed, explicit_dt_bound};
use ddspme_core::measure::cost_matrix;
use ddspme_core::picard::{estimate_contraction, seed_flows, solve, Solution, DIAGNOSTICS_CSV_HEADER};
use ddspme_core::probe::{probe_model, AssumptionReport, Hypothesis};
use ddspme_core::{w2, EmpiricalMeasure, OtMethod, SpectralOperator, TrajectoryEnsemble};
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, Task};
use crate::error::CliError;
use crate::manifest::ManifestWriter;

/// Parsed config together with the objects every task needs.
pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub op: SpectralOperator,
    pub strict: bool,
}

impl Context<'_> {
    fn init(&self) -> Result<EmpiricalMeasure, CliError> {
        let seeds = self.config.seeds();
        Ok(self.config.run.init.sample(&self.op, self.config.run.particles, seeds.init_seed)?)
    }

    fn solve(&self) -> Result<Solution, CliError> {
        let c = self.config;
        let init = self.init()?;
        Ok(solve(
            &self.op,
            &c.model(),
            c.step(),
            &init,
            &c.grid()?,
            &c.picard,
            &c.noise_plan(&self.op),
        )?)
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable output")
}

pub fn dispatch(task: Task, ctx: &Context<'_>, out: &mut ManifestWriter) -> Result<(), CliError> {
    match task {
        Task::Solve => run_solve(ctx, out),
        Task::PicardDiagnose => run_picard_diagnose(ctx, out),
        Task::SweepLambda | Task::SweepEpsilon => run_sweep(task, ctx, out),
        Task::ProbeAssumptions => run_probes(ctx, out),
        Task::Apriori => run_apriori(ctx, out),
        Task::OracleOt => run_oracle_ot(ctx, out),
        Task::Validate => unreachable!("validate is handled before dispatch"),
    }
}

fn diagnostics_csv(sol: &Solution) -> String {
    let mut s = DIAGNOSTICS_CSV_HEADER.to_string();
    for d in &sol.diagnostics {
        s.push_str(&d.csv_rows());
    }
    s
}

fn save_trajectory(traj: &TrajectoryEnsemble, out: &mut ManifestWriter) -> Result<(), CliError> {
    let base = out.dir().join("trajectory");
    traj.save(&base)?;
    out.record("trajectory.bin");
    out.record("trajectory.json");
    Ok(())
}

fn run_solve(ctx: &Context<'_>, out: &mut ManifestWriter) -> Result<(), CliError> {
    let sol = ctx.solve()?;
    save_trajectory(&sol.trajectory, out)?;
    out.write("stats.csv", sol.trajectory.stats_csv(&ctx.op))?;
    out.write("picard.csv", diagnostics_csv(&sol))?;
    let summary = json!({
        "c_hat": sol.c_hat,
        "window_steps": sol.window_steps,
        "windows": sol.diagnostics,
    });
    out.write("solve_summary.json", to_json(&summary))
}

fn run_picard_diagnose(ctx: &Context<'_>, out: &mut ManifestWriter) -> Result<(), CliError> {
    let c = ctx.config;
    let sol = ctx.solve()?;
    out.write("picard.csv", diagnostics_csv(&sol))?;

    let grid = c.grid()?;
    let first = grid.window(0, sol.window_steps.min(grid.n_steps()))?;
    let init = ctx.init()?;
    let (mu0, nu0) = seed_flows(&init, &first, c.picard.flow_stride, 1.5)?;
    let estimate = estimate_contraction(
        &ctx.op,
        &c.model(),
        c.step(),
        &init,
        &first,
        &mu0,
        &nu0,
        &c.noise_plan(&ctx.op),
        sol.c_hat / 2.0,
        c.picard.flow_stride,
        c.picard.ot,
    );
    let estimate = match estimate {
        Ok(e) => Some(e),
        Err(ddspme_core::error::Error::ZeroDistance) => None,
        Err(e) => return Err(e.into()),
    };
    let t0 = first.t_end() - first.t_start();
    let windows: Vec<_> = sol
        .diagnostics
        .iter()
        .map(|d| {
            let max_ratio = d.ratios.iter().cloned().fold(f64::NAN, f64::max);
            json!({
                "window": d.window,
                "t_start": d.t_start,
                "t_end": d.t_end,
                "iterations": d.iterations,
                "converged": d.converged,
                "final_distance": d.distances.last(),
                "max_ratio": if max_ratio.is_nan() { None } else { Some(max_ratio) },
            })
        })
        .collect();
    let summary = json!({
        "c_hat": sol.c_hat,
        "window_length": t0,
        "ratio_reference": (sol.c_hat * t0).sqrt(),
        "windows": windows,
        "contraction_estimate": estimate.map(|e| json!({
            "distance_in": e.distance_in,
            "distance_out": e.distance_out,
            "ratio": e.ratio,
            "implied_c_hat": e.c_hat,
        })),
    });
    out.write("picard_summary.json", to_json(&summary))
}

fn run_sweep(task: Task, ctx: &Context<'_>, out: &mut ManifestWriter) -> Result<(), CliError> {
    let c = ctx.config;
    let values = &c.sweep.as_ref().expect("validated sweep block").values;
    let init = ctx.init()?;
    let (model, grid, noise) = (c.model(), c.grid()?, c.noise_plan(&ctx.op));
    let sweep = if task == Task::SweepLambda { lambda_sweep } else { epsilon_sweep };
    let table: SweepTable = sweep(&ctx.op, &model, c.step(), values, &init, &grid, &noise, &c.picard)?;
    let stem = if task == Task::SweepLambda { "sweep_lambda" } else { "sweep_epsilon" };
    out.write(&format!("{stem}.csv"), table.to_csv())?;
    let summary = json!({
        "parameter": if task == Task::SweepLambda { "lambda" } else { "epsilon" },
        "values": values,
        "slope": table.slope,
        "intercept": table.intercept,
        "points": table.rows.len(),
    });
    out.write(&format!("{stem}_summary.json"), to_json(&summary))
}

/// Hypotheses whose failure aborts a `--strict` run. The cross-law
/// monotonicity probe is reported but never gates.
pub fn gating(h: Hypothesis) -> bool {
    h != Hypothesis::A1Cross
}

fn run_probes(ctx: &Context<'_>, out: &mut ManifestWriter) -> Result<(), CliError> {
    let p = ctx.config.probe.clone().unwrap_or_default();
    let reports: Vec<AssumptionReport> = probe_model(&ctx.config.model(), &ctx.op, &p.sampler(), p.samples)?;
    out.write("probes.json", to_json(&reports))?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| gating(r.hypothesis) && !r.passed())
        .map(|r| format!("{:?}", r.hypothesis))
        .collect();
    if ctx.strict && !failed.is_empty() {
        return Err(CliError::ProbeFailure(failed));
    }
    Ok(())
}

fn run_apriori(ctx: &Context<'_>, out: &mut ManifestWriter) -> Result<(), CliError> {
    let sol = ctx.solve()?;
    let report = apriori_check(&sol.trajectory, &ctx.config.model.constants, &ctx.op)?;
    out.write("apriori.json", to_json(&report))
}

fn permutation_w2_sq(c: &[f64], m: usize) -> f64 {
    fn go(c: &[f64], m: usize, k: usize, p: &mut Vec<usize>, acc: f64, best: &mut f64) {
        if k == m {
            *best = best.min(acc);
            return;
        }
        for i in k..m {
            p.swap(k, i);
            go(c, m, k + 1, p, acc + c[k * m + p[k]], best);
            p.swap(k, i);
        }
    }
    let mut best = f64::INFINITY;
    go(c, m, 0, &mut (0..m).collect(), 0.0, &mut best);
    best / m as f64
}

fn run_oracle_ot(ctx: &Context<'_>, out: &mut ManifestWriter) -> Result<(), CliError> {
    let c = ctx.config;
    let seeds = c.seeds();
    let m = c.run.particles;
    let mu = c.run.init.sample(&ctx.op, m, seeds.init_seed)?;
    let nu = c.run.init.sample(&ctx.op, m, derive_seed(seeds.init_seed, 1))?;
    let mut csv = String::from("method,M,value,iterations\n");
    let (exact, plan) = w2(&ctx.op, &mu, &nu, OtMethod::Exact)?;
    csv.push_str(&format!("exact,{m},{exact},{}\n", plan.iterations));
    if m <= 8 {
        let brute = permutation_w2_sq(&cost_matrix(&ctx.op, &mu, &nu), m).sqrt();
        csv.push_str(&format!("permutation,{m},{brute},0\n"));
    }
    let entropic: Vec<OtMethod> = match c.ot {
        Some(e @ OtMethod::Entropic { .. }) => vec![e],
        _ => [1.0, 0.1, 0.01].iter().map(|&r| OtMethod::entropic(r)).collect(),
    };
    for method in entropic {
        let OtMethod::Entropic { reg_scale, .. } = method else { unreachable!() };
        let (v, plan) = w2(&ctx.op, &mu, &nu, method)?;
        csv.push_str(&format!("entropic(reg_scale={reg_scale}),{m},{v},{}\n", plan.iterations));
    }
    out.write("ot.csv", csv)
}

/// The `validate` task's report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<String>,
    pub explicit_dt_bound: Option<f64>,
}

pub fn validation_report(config: &ExperimentConfig, task: Task) -> ValidationReport {
    let violations = config.violations(task);
    let bound = config
        .operator
        .build()
        .ok()
        .map(|op| explicit_dt_bound(&op, &config.model(), config.run.eps))
        .filter(|b| b.is_finite());
    ValidationReport {
        valid: violations.is_empty(),
        violations,
        explicit_dt_bound: bound,
    }
}
