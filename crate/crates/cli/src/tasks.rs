use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use levy_bsde::generator::{compute_bounds, truncate_generator, BoundCertificate};
use levy_bsde::hgen::{default_schedule, solve_h_limit, HGeneratorSpec, HLimitSettings, HSolver};
use levy_bsde::interp::MonotoneCubic;
use levy_bsde::io::{read_solution, write_norm_table, write_paths, write_pdie, write_solution};
use levy_bsde::levy::{sample_paths, PathBundle};
use levy_bsde::malliavin::{solve_derivative_bsde, Direction};
use levy_bsde::pdie::{check_forward_conditions, solve_pdie, ForwardConditionBox, PdieSettings};
use levy_bsde::solver::{solve_markov_dp, solve_picard_regression};
use levy_bsde::verify::{check_bounds, default_slack};
use levy_bsde::{DiscreteSolution, GeneratorSpec, TimeGrid};
use serde_json::json;

use crate::config::{BoundsConfig, Config, Method};
use crate::{write_json, CliError, Task, TaskOutput};

pub(crate) fn dispatch(task: Task, cfg: &Config, seed: u64, out: &Path) -> Result<TaskOutput, CliError> {
    match task {
        Task::Simulate => simulate(cfg, seed, out),
        Task::Solve => solve(cfg, seed, out),
        Task::Verify => verify(cfg, seed, out),
        Task::Malliavin => malliavin(cfg, seed, out),
        Task::Hlimit => hlimit(cfg, seed, out),
        Task::Pdie => pdie(cfg, out),
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn solver_tolerances(cfg: &Config) -> serde_json::Value {
    let dp = cfg.dp_settings();
    json!({
        "method": cfg.solver.method,
        "picard_tol": cfg.solver.tol,
        "picard_max_iter": cfg.solver.max_iter,
        "basis_degree": cfg.solver.basis,
        "dp_inner_tol": dp.inner_tol,
        "dp_inner_max_iter": dp.inner_max_iter,
        "dp_gh_order": dp.gh_order,
        "dp_max_jumps": dp.max_jumps,
    })
}

fn bundle(cfg: &Config, seed: u64) -> Result<PathBundle, CliError> {
    Ok(sample_paths(&cfg.model()?, &cfg.grid()?, cfg.solver.paths, seed)?)
}

/// `Y` at time 0 from the initial state `0`.
fn y0(sol: &DiscreteSolution) -> f64 {
    match sol.states() {
        Some(states) => MonotoneCubic::new(states, &sol.y[..states.len()]).eval(0.0),
        None => sol.mean_y(0),
    }
}

fn certificate(cfg: &Config, spec: &GeneratorSpec) -> Result<BoundCertificate, CliError> {
    let atoms = cfg.atoms()?;
    let horizon = cfg.solver.grid.horizon;
    match cfg.bounds {
        BoundsConfig::Auto => compute_bounds(spec, &cfg.terminal()?, &atoms, horizon)
            .map_err(|e| CliError::Invalid(format!("bounds: {e}"))),
        BoundsConfig::Explicit { r, q, p } => Ok(BoundCertificate::explicit(r, q, p, horizon, &spec.rho, &atoms)?),
    }
}

fn solve_with(cfg: &Config, spec: &GeneratorSpec, seed: u64) -> Result<DiscreteSolution, CliError> {
    let atoms = cfg.atoms()?;
    match cfg.solver.method {
        Method::Picard => {
            let b = bundle(cfg, seed)?;
            Ok(solve_picard_regression(&cfg.model()?, spec, &cfg.terminal()?, &b, &cfg.picard_settings())?)
        }
        Method::Dp => {
            let lattice = cfg.solver.lattice.as_ref().map(|l| l.nodes()).unwrap_or_default();
            let g = cfg.terminal_fn();
            Ok(solve_markov_dp(
                &cfg.forward()?,
                spec,
                |x| g(x),
                &atoms,
                &lattice,
                &cfg.grid()?,
                &cfg.dp_settings(),
            )?)
        }
    }
}

fn convergence(sol: &DiscreteSolution) -> Result<(), CliError> {
    if sol.diagnostics.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(sol.diagnostics.warnings.join("; ")))
    }
}

fn simulate(cfg: &Config, seed: u64, out: &Path) -> Result<TaskOutput, CliError> {
    let b = bundle(cfg, seed)?;
    write_paths(create(out, "paths.csv")?, &b, cfg.solver.max_paths)?;
    Ok(TaskOutput {
        outputs: vec!["paths.csv".into()],
        tolerances: json!({}),
        outcome: Ok(()),
    })
}

fn solve(cfg: &Config, seed: u64, out: &Path) -> Result<TaskOutput, CliError> {
    let mut spec = cfg.generator();
    let mut cert = None;
    if cfg.solver.truncate {
        let c = certificate(cfg, &spec)?;
        spec = truncate_generator(&spec, &c, &cfg.atoms()?);
        cert = Some(c.summary());
    }
    let sol = solve_with(cfg, &spec, seed)?;
    write_solution(create(out, "solution.csv")?, &sol, cfg.solver.max_paths)?;
    let summary = json!({
        "generator": spec.name,
        "y0": y0(&sol),
        "certificate": cert,
        "diagnostics": sol.diagnostics,
    });
    Ok(TaskOutput {
        outputs: vec!["solution.csv".into(), write_json(out, "summary.json", &summary)?],
        tolerances: solver_tolerances(cfg),
        outcome: convergence(&sol),
    })
}

fn verify(cfg: &Config, seed: u64, out: &Path) -> Result<TaskOutput, CliError> {
    let vcfg = cfg.verify.clone().unwrap_or_default();
    let spec = cfg.generator();
    let cert = certificate(cfg, &spec)?;
    let sol = match &vcfg.solution {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::Invalid(format!("verify.solution: cannot open {path}: {e}")))?;
            read_solution(file, &cfg.atoms()?).map_err(|e| CliError::Invalid(format!("verify.solution: {e}")))?
        }
        None => solve_with(cfg, &spec, seed)?,
    };
    let slack = default_slack(&sol, vcfg.slack_c);
    let report = check_bounds(&sol, &cert, slack)?;
    let summary = json!({
        "certificate": cert.summary(),
        "slack": slack,
        "ok": report.ok(),
        "report": report,
    });
    let outcome = if report.ok() {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.ok)
            .map(|c| format!("{} exceeded by {:.6e}", c.check, c.worst))
            .collect();
        Err(CliError::Verification(failed.join(", ")))
    };
    Ok(TaskOutput {
        outputs: vec![write_json(out, "verify.json", &summary)?],
        tolerances: json!({ "slack": slack, "slack_c": vcfg.slack_c }),
        outcome,
    })
}

fn malliavin(cfg: &Config, seed: u64, out: &Path) -> Result<TaskOutput, CliError> {
    let mcfg = cfg
        .malliavin
        .as_ref()
        .ok_or_else(|| CliError::Invalid("malliavin: block required for this task".into()))?;
    if cfg.solver.method != Method::Picard {
        return Err(CliError::Invalid("solver.method: the malliavin task needs \"picard\"".into()));
    }
    let model = cfg.model()?;
    let spec = cfg.generator();
    let term = cfg.terminal()?;
    let settings = cfg.picard_settings();
    let b = bundle(cfg, seed)?;
    let base = solve_picard_regression(&model, &spec, &term, &b, &settings)?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    let mut outcome = convergence(&base);
    for (k, d) in mcfg.directions.iter().enumerate() {
        let dir = Direction { r: d.r, v: d.v };
        let dsol = solve_derivative_bsde(&spec, &base, &term, dir, &b, &settings)?;
        let name = format!("derivative_{k}.csv");
        write_solution(create(out, &name)?, &dsol, cfg.solver.max_paths)?;
        outputs.push(name);
        let node = b.grid().first_at_or_after(d.r)?;
        rows.push(json!({
            "r": d.r,
            "v": d.v,
            "node": node,
            "mean_dy": dsol.mean_y(node),
            "converged": dsol.diagnostics.converged,
        }));
        if outcome.is_ok() {
            outcome = convergence(&dsol);
        }
    }
    outputs.push(write_json(out, "malliavin.json", &json!({ "directions": rows }))?);
    Ok(TaskOutput {
        outputs,
        tolerances: solver_tolerances(cfg),
        outcome,
    })
}

fn hlimit(cfg: &Config, seed: u64, out: &Path) -> Result<TaskOutput, CliError> {
    let hcfg = cfg
        .hlimit
        .as_ref()
        .ok_or_else(|| CliError::Invalid("hlimit: block required for this task".into()))?;
    let model = cfg.model()?;
    let term = cfg.terminal()?;
    let hspec = HGeneratorSpec::exponential_utility(cfg.generator(), hcfg.alpha)?;
    let settings = HLimitSettings {
        schedule: hcfg.schedule.clone().unwrap_or_else(default_schedule),
        cauchy_tol: hcfg.cauchy_tol,
        ..HLimitSettings::default()
    };
    let res = match cfg.solver.method {
        Method::Picard => {
            let b = bundle(cfg, seed)?;
            let solver = HSolver::Paths {
                bundle: &b,
                settings: cfg.picard_settings(),
            };
            solve_h_limit(&hspec, &term, &model, &solver, &settings)?
        }
        Method::Dp => {
            let lattice = cfg.solver.lattice.as_ref().map(|l| l.nodes()).unwrap_or_default();
            let g = cfg.terminal_fn();
            let tf = move |x: f64| g(x);
            let forward = cfg.forward()?;
            let grid: TimeGrid = cfg.grid()?;
            let solver = HSolver::Lattice {
                forward: &forward,
                terminal_fn: &tf,
                lattice: &lattice,
                grid: &grid,
                settings: cfg.dp_settings(),
            };
            solve_h_limit(&hspec, &term, &model, &solver, &settings)?
        }
    };
    write_norm_table(create(out, "norms.csv")?, &res.table)?;
    write_solution(create(out, "solution.csv")?, &res.solution, cfg.solver.max_paths)?;
    let summary = json!({
        "converged": res.converged,
        "last_n": res.last_n,
        "y0": y0(&res.solution),
        "certificate": res.certificate.summary(),
        "diagnostics": res.solution.diagnostics,
    });
    let outcome = if res.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!(
            "cutoff schedule exhausted at n = {} above cauchy_tol {}",
            res.last_n, hcfg.cauchy_tol
        )))
    };
    let mut tol = solver_tolerances(cfg);
    tol["cauchy_tol"] = json!(hcfg.cauchy_tol);
    Ok(TaskOutput {
        outputs: vec!["norms.csv".into(), "solution.csv".into(), write_json(out, "summary.json", &summary)?],
        tolerances: tol,
        outcome,
    })
}

fn pdie(cfg: &Config, out: &Path) -> Result<TaskOutput, CliError> {
    let pcfg = cfg
        .pdie
        .as_ref()
        .ok_or_else(|| CliError::Invalid("pdie: block required for this task".into()))?;
    let atoms = cfg.atoms()?;
    let forward = cfg.forward()?;
    let space = pcfg.space.nodes();
    let grid = TimeGrid::uniform(cfg.solver.grid.horizon, pcfg.steps)?;
    let g = cfg.terminal_fn();
    let p = solve_pdie(&forward, &cfg.generator(), |x| g(x), &atoms, &space, &grid, &PdieSettings::default())?;
    write_pdie(create(out, "pdie.csv")?, &p)?;
    let conditions = check_forward_conditions(&forward, &ForwardConditionBox::new((pcfg.space.lo, pcfg.space.hi), atoms));
    let u0 = MonotoneCubic::new(&space, p.slice(0)).eval(0.0);
    let summary = json!({
        "u0": u0,
        "forward_conditions": conditions,
        "diagnostics": p.diagnostics,
    });
    Ok(TaskOutput {
        outputs: vec!["pdie.csv".into(), write_json(out, "summary.json", &summary)?],
        tolerances: json!({ "scheme": "imex", "steps": pcfg.steps }),
        outcome: Ok(()),
    })
}
