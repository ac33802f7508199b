//! Command-line front end: validate problem files, run the solvers, audit
//! instances end to end, extract policies, and simulate state paths. Every
//! run writes its artifacts plus a manifest of output digests, and reruns
//! with the same inputs are byte-identical.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use switchbench::hjb::{self, SpaceTimeGrid};
use switchbench::io::{
    self, config_hash, content_hash, load_problem, resolve_grids, OutDir, ResolvedGrids,
};
use switchbench::lattice::{simulate_paths, Lattice, TimeGrid};
use switchbench::problem::{validate, ProbePlan, SwitchingProblem, ValidationReport};
use switchbench::rbsde::{
    bounding_bsdes, monotone_solve, picard_solve, replicate, PicardConfig,
};
use switchbench::snell::{
    jump_report, solve_capped_stages, solve_full, ValueField,
};
use switchbench::strategy::{
    admissibility_bound, brute_force_value, evaluate_policy, realize_on_chain, Policy,
};
use switchbench::{Error, Result};

#[derive(Parser)]
#[command(name = "switchbench", version, about = "Optimal multi-mode switching solvers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the structural and probabilistic assumptions of a problem file.
    Validate {
        file: PathBuf,
    },
    /// Solve an instance and export value surfaces, logs, and a manifest.
    Solve {
        file: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Switch budget for the capped method.
        #[arg(long, default_value_t = 1)]
        cap: usize,
        /// Stage count for the monotone method.
        #[arg(long, default_value_t = 120)]
        stages: usize,
        /// Exponential transform rate for the monotone method.
        #[arg(long)]
        alpha: Option<f64>,
        /// Contraction weight override for the fixed-point method.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full consistency battery on one instance.
    Crosscheck {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract and evaluate a near-optimal switching rule.
    Policy {
        file: PathBuf,
        /// Allowed shortfall below the optimal value.
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// Starting mode, 1-based.
        #[arg(long, default_value_t = 1)]
        mode: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw reproducible state paths and dump them in binary form.
    Simulate {
        file: PathBuf,
        /// Path count; defaults to the problem file's grids.paths.
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Method {
    Tree,
    Capped,
    Picard,
    Monotone,
    Hjb,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Tree => "tree",
            Method::Capped => "capped",
            Method::Picard => "picard",
            Method::Monotone => "monotone",
            Method::Hjb => "hjb",
        }
    }
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("SWITCHBENCH_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Validate { file } => cmd_validate(&file),
        Cmd::Solve {
            file,
            method,
            cap,
            stages,
            alpha,
            beta,
            out,
        } => cmd_solve(&file, method, cap, stages, alpha, beta, &out),
        Cmd::Crosscheck { file, out } => cmd_crosscheck(&file, &out),
        Cmd::Policy {
            file,
            eps,
            mode,
            out,
        } => cmd_policy(&file, eps, mode, &out),
        Cmd::Simulate { file, paths, out } => cmd_simulate(&file, paths, &out),
    }
}

fn print_report(report: &ValidationReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::Parse(format!("report: {e}")))?;
    bytes.push(b'\n');
    use std::io::Write;
    std::io::stdout().write_all(&bytes)?;
    Ok(())
}

fn failing_checks(report: &ValidationReport) -> String {
    report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("({}) {}", c.name, c.note))
        .collect::<Vec<_>>()
        .join("; ")
}

fn cmd_validate(file: &Path) -> Result<u8> {
    let (p, _, _) = load_problem(file)?;
    let report = validate(&p, &ProbePlan::for_problem(&p))?;
    print_report(&report)?;
    if report.passed {
        Ok(0)
    } else {
        eprintln!("validation failed: assumption {}", failing_checks(&report));
        Ok(2)
    }
}

/// Loads and validates; solver commands refuse instances that fail the
/// assumption checks.
fn load_validated(file: &Path) -> Result<(SwitchingProblem, io::ProblemFile, Vec<u8>)> {
    let (p, pf, bytes) = load_problem(file)?;
    let report = validate(&p, &ProbePlan::for_problem(&p))?;
    if !report.passed {
        print_report(&report)?;
        return Err(Error::Domain(format!(
            "validation failed: assumption {}",
            failing_checks(&report)
        )));
    }
    Ok((p, pf, bytes))
}

fn build_lattice(p: &SwitchingProblem, grids: &ResolvedGrids) -> Result<Lattice> {
    let grid = TimeGrid::for_problem(p, grids.max_dt)?;
    Lattice::build(p, grid)
}

#[derive(Serialize)]
struct SolveSummary {
    method: &'static str,
    roots: Vec<f64>,
    n_layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage_roots: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage_violation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jump_checked: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jump_residual_max: Option<f64>,
}

impl SolveSummary {
    fn new(method: Method, roots: Vec<f64>, n_layers: usize) -> SolveSummary {
        SolveSummary {
            method: method.name(),
            roots,
            n_layers,
            cap: None,
            stage_roots: None,
            stage_violation: None,
            jump_checked: None,
            jump_residual_max: None,
        }
    }
}

fn cmd_solve(
    file: &Path,
    method: Method,
    cap: usize,
    stages: usize,
    alpha: Option<f64>,
    beta: Option<f64>,
    out_path: &Path,
) -> Result<u8> {
    let (p, pf, bytes) = load_validated(file)?;
    let grids = resolve_grids(&p, &pf.grids);
    let mut out = OutDir::create(out_path)?;

    let summary = match method {
        Method::Tree | Method::Capped | Method::Picard | Method::Monotone => {
            let lat = build_lattice(&p, &grids)?;
            let (field, mut summary) = match method {
                Method::Tree => {
                    let field = solve_full(&p, &lat)?;
                    let s = SolveSummary::new(method, field.roots(), field.n_layers());
                    (field, s)
                }
                Method::Capped => {
                    let all = solve_capped_stages(&p, &lat, cap)?;
                    let stage_roots: Vec<Vec<f64>> = all.iter().map(|f| f.roots()).collect();
                    let field = all.into_iter().last().unwrap();
                    let mut s = SolveSummary::new(method, field.roots(), field.n_layers());
                    s.cap = Some(cap);
                    s.stage_roots = Some(stage_roots);
                    (field, s)
                }
                Method::Picard => {
                    let cfg = PicardConfig {
                        beta,
                        ..PicardConfig::default()
                    };
                    let sol = picard_solve(&p, &lat, &cfg)?;
                    out.write_json("picard_log.json", &sol.log)?;
                    out.write("distances.csv", &io::distances_csv(&sol.log)?)?;
                    let s = SolveSummary::new(method, sol.field.roots(), sol.field.n_layers());
                    (sol.field, s)
                }
                Method::Monotone => {
                    let res = monotone_solve(&p, &lat, stages, alpha)?;
                    let stage_roots: Vec<Vec<f64>> =
                        res.stages.iter().map(|f| f.roots()).collect();
                    let field = res.stages.into_iter().last().unwrap();
                    let mut s = SolveSummary::new(method, field.roots(), field.n_layers());
                    s.stage_roots = Some(stage_roots);
                    s.stage_violation = Some(res.violation);
                    (field, s)
                }
                Method::Hjb => unreachable!(),
            };
            let jumps = jump_report(&p, &lat, &field)?;
            summary.jump_checked = Some(jumps.checked);
            summary.jump_residual_max = Some(jumps.max_residual);
            out.write("values.csv", &io::value_layer_csv(&field, &lat, 0)?)?;
            out.write("jumps.csv", &io::jump_csv(&jumps)?)?;
            summary
        }
        Method::Hjb => {
            let grid = SpaceTimeGrid::build(&p, grids.max_dt, grids.h, grids.half_width)?;
            let sol = hjb::solve_qvi(&p, &grid)?;
            let rep = hjb::viscosity_residual(&p, &sol)?;
            out.write("values.csv", &io::pde_layer_csv(&sol, 0)?)?;
            out.write_json("residuals.json", &rep)?;
            SolveSummary::new(method, sol.roots(), grid.time.n_layers())
        }
    };

    out.write_json("summary.json", &summary)?;
    let cfg_hash = config_hash(&[
        ("command", "solve".into()),
        ("method", summary.method.into()),
        ("cap", cap.to_string()),
        ("stages", stages.to_string()),
        ("alpha", format!("{alpha:?}")),
        ("beta", format!("{beta:?}")),
        ("max_dt", format!("{}", grids.max_dt)),
        ("h", format!("{}", grids.h)),
        ("half_width", format!("{}", grids.half_width)),
    ]);
    out.finish("solve", cfg_hash, content_hash(&bytes), p.seed)?;
    for (i, r) in summary.roots.iter().enumerate() {
        println!("mode {}: Y0 = {}", i + 1, io::fmt_num(*r));
    }
    println!("outputs -> {}", out_path.display());
    Ok(0)
}

fn cmd_policy(file: &Path, eps: f64, mode: usize, out_path: &Path) -> Result<u8> {
    let (p, pf, bytes) = load_validated(file)?;
    if mode < 1 || mode > p.q {
        return Err(Error::Domain(format!(
            "start mode {mode} outside 1..={}",
            p.q
        )));
    }
    let start = mode - 1;
    let grids = resolve_grids(&p, &pf.grids);
    let lat = build_lattice(&p, &grids)?;
    let field = if p.drivers.is_none() {
        solve_full(&p, &lat)?
    } else {
        picard_solve(&p, &lat, &PicardConfig::default())?.field
    };
    let policy = Policy::new(&p, &lat, &field, eps)?;
    let pv = evaluate_policy(&policy, start)?;
    let root = field.root(start);

    let mut out = OutDir::create(out_path)?;
    let chain = (0..lat.n_layers() - 1).all(|m| !lat.branches(m));
    if chain {
        let events = realize_on_chain(&policy, start)?;
        out.write("events.csv", &io::events_csv(&events)?)?;
    }

    #[derive(Serialize)]
    struct PolicySummary {
        eps: f64,
        start_mode: usize,
        value: f64,
        root: f64,
        meets_slack: bool,
        expected_switches: f64,
        expected_cost: f64,
        switch_cap: usize,
        deterministic_chain: bool,
    }
    let summary = PolicySummary {
        eps,
        start_mode: mode,
        value: pv.value,
        root,
        meets_slack: pv.value >= root - eps,
        expected_switches: pv.expected_switches,
        expected_cost: pv.expected_cost,
        switch_cap: policy.cap,
        deterministic_chain: chain,
    };
    out.write_json("policy.json", &summary)?;
    let cfg_hash = config_hash(&[
        ("command", "policy".into()),
        ("eps", format!("{eps}")),
        ("mode", mode.to_string()),
        ("max_dt", format!("{}", grids.max_dt)),
    ]);
    out.finish("policy", cfg_hash, content_hash(&bytes), p.seed)?;
    println!(
        "policy value {} against optimum {} (slack {})",
        io::fmt_num(pv.value),
        io::fmt_num(root),
        io::fmt_num(root - pv.value)
    );
    if !summary.meets_slack {
        return Err(Error::Numerical(format!(
            "policy fell more than {eps} short of the optimal value"
        )));
    }
    println!("outputs -> {}", out_path.display());
    Ok(0)
}

fn cmd_simulate(file: &Path, paths: Option<usize>, out_path: &Path) -> Result<u8> {
    let (p, pf, bytes) = load_validated(file)?;
    let grids = resolve_grids(&p, &pf.grids);
    let n_paths = paths.unwrap_or(grids.paths);
    let grid = TimeGrid::for_problem(&p, grids.max_dt)?;
    let set = simulate_paths(&p, &grid, n_paths, p.seed)?;

    let ml = grid.n_layers();
    let mut mean = 0.0;
    for path in 0..n_paths {
        mean += set.state(path, ml - 1);
    }
    mean /= n_paths as f64;
    let mut var = 0.0;
    for path in 0..n_paths {
        var += (set.state(path, ml - 1) - mean).powi(2);
    }
    var /= n_paths as f64;

    let mut out = OutDir::create(out_path)?;
    out.write("paths.swb1", &io::paths_blob(&set))?;
    #[derive(Serialize)]
    struct SimSummary {
        n_paths: usize,
        n_layers: usize,
        terminal_mean: f64,
        terminal_variance: f64,
    }
    out.write_json(
        "summary.json",
        &SimSummary {
            n_paths,
            n_layers: ml,
            terminal_mean: mean,
            terminal_variance: var,
        },
    )?;
    let cfg_hash = config_hash(&[
        ("command", "simulate".into()),
        ("paths", n_paths.to_string()),
        ("max_dt", format!("{}", grids.max_dt)),
    ]);
    out.finish("simulate", cfg_hash, content_hash(&bytes), p.seed)?;
    println!(
        "{n_paths} paths, terminal mean {} variance {}",
        io::fmt_num(mean),
        io::fmt_num(var)
    );
    println!("outputs -> {}", out_path.display());
    Ok(0)
}

#[derive(Serialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "UPPERCASE")]
enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Serialize)]
struct CheckOutcome {
    name: &'static str,
    status: Status,
    detail: String,
}

impl CheckOutcome {
    fn report(name: &'static str, status: Status, detail: String) -> CheckOutcome {
        let tag = match status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIPPED",
        };
        println!("{name}: {tag} {detail}");
        CheckOutcome {
            name,
            status,
            detail,
        }
    }

    fn pass_if(name: &'static str, ok: bool, detail: String) -> CheckOutcome {
        CheckOutcome::report(name, if ok { Status::Pass } else { Status::Fail }, detail)
    }

    fn skip(name: &'static str, why: &str) -> CheckOutcome {
        CheckOutcome::report(name, Status::Skipped, why.to_string())
    }
}

const ORACLE_MAX_MODES: usize = 3;
const ORACLE_MAX_DEPTH: usize = 5;
const ORACLE_MAX_SWITCHES: usize = 4;

fn cmd_crosscheck(file: &Path, out_path: &Path) -> Result<u8> {
    let (p, pf, bytes) = load_problem(file)?;
    let grids = resolve_grids(&p, &pf.grids);
    let mut out = OutDir::create(out_path)?;
    let mut checks: Vec<CheckOutcome> = Vec::new();

    let report = validate(&p, &ProbePlan::for_problem(&p))?;
    checks.push(CheckOutcome::pass_if(
        "validate",
        report.passed,
        if report.passed {
            "all assumption checks hold".into()
        } else {
            format!("assumption {}", failing_checks(&report))
        },
    ));
    if !report.passed {
        out.write_json("crosscheck.json", &checks)?;
        out.finish(
            "crosscheck",
            config_hash(&[("command", "crosscheck".into())]),
            content_hash(&bytes),
            p.seed,
        )?;
        eprintln!("crosscheck aborted: validation failed");
        return Ok(2);
    }

    let rates = p.drivers.is_none();
    match build_lattice(&p, &grids) {
        Ok(lat) => {
            let field = if rates {
                solve_full(&p, &lat)?
            } else {
                picard_solve(&p, &lat, &PicardConfig::default())?.field
            };
            checks.extend(oracle_checks(&p, &lat, &field, rates)?);
            checks.push(sandwich_check(&p, &lat, &field, rates)?);
            checks.push(policy_check(&p, &lat, &field, rates)?);
            checks.push(jump_check(&p, &lat, &field)?);
            checks.extend(picard_checks(&p, &lat, rates)?);
            checks.push(pde_tree_check(&p, &grids, rates));
        }
        // no tree at this resolution; the differential legs still run
        Err(Error::Size(why)) => {
            for name in [
                "oracle_full",
                "capped_oracle",
                "capped_sandwich",
                "policy_eps",
                "jump_identity",
                "picard",
                "monotone_vs_picard",
                "pde_tree",
            ] {
                checks.push(CheckOutcome::skip(name, &why));
            }
        }
        Err(e) => return Err(e),
    }
    checks.push(pde_residual_check(&p, &grids));

    out.write_json("crosscheck.json", &checks)?;
    out.finish(
        "crosscheck",
        config_hash(&[
            ("command", "crosscheck".into()),
            ("max_dt", format!("{}", grids.max_dt)),
            ("h", format!("{}", grids.h)),
            ("half_width", format!("{}", grids.half_width)),
        ]),
        content_hash(&bytes),
        p.seed,
    )?;

    let failed = checks.iter().any(|c| c.status == Status::Fail);
    if failed {
        eprintln!("crosscheck found failures");
        Ok(2)
    } else {
        Ok(0)
    }
}

fn oracle_checks(
    p: &SwitchingProblem,
    lat: &Lattice,
    field: &ValueField,
    rates: bool,
) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if !rates {
        out.push(CheckOutcome::skip("oracle_full", "needs rate payoffs"));
        out.push(CheckOutcome::skip("capped_oracle", "needs rate payoffs"));
        return Ok(out);
    }
    if p.q > ORACLE_MAX_MODES || lat.grid.n_branching_steps() > ORACLE_MAX_DEPTH {
        let why = format!(
            "instance exceeds oracle bounds ({} modes, {} branching steps)",
            p.q,
            lat.grid.n_branching_steps()
        );
        out.push(CheckOutcome::skip("oracle_full", &why));
        out.push(CheckOutcome::skip("capped_oracle", &why));
        return Ok(out);
    }
    let bound = admissibility_bound(p, field);
    if bound > ORACLE_MAX_SWITCHES {
        out.push(CheckOutcome::skip(
            "oracle_full",
            &format!("switch budget {bound} exceeds the oracle cap {ORACLE_MAX_SWITCHES}"),
        ));
    } else {
        let mut worst = 0.0f64;
        for i in 0..p.q {
            let oracle = brute_force_value(p, lat, i, bound)?;
            worst = worst.max((field.root(i) - oracle).abs());
        }
        out.push(CheckOutcome::pass_if(
            "oracle_full",
            worst <= 1e-12,
            format!("max root gap {worst:.3e} over {} modes", p.q),
        ));
    }

    let stages = solve_capped_stages(p, lat, 2)?;
    let mut worst = 0.0f64;
    for (n, stage) in stages.iter().enumerate() {
        for i in 0..p.q {
            let oracle = brute_force_value(p, lat, i, n)?;
            worst = worst.max((stage.root(i) - oracle).abs());
        }
    }
    out.push(CheckOutcome::pass_if(
        "capped_oracle",
        worst <= 1e-12,
        format!("max gap {worst:.3e} over switch budgets 0..=2"),
    ));
    Ok(out)
}

fn sandwich_check(
    p: &SwitchingProblem,
    lat: &Lattice,
    field: &ValueField,
    rates: bool,
) -> Result<CheckOutcome> {
    if !rates {
        return Ok(CheckOutcome::skip(
            "capped_sandwich",
            "stagewise budget fields need rate payoffs",
        ));
    }
    let cap = p.q * (lat.n_layers() - 1);
    let stages = solve_capped_stages(p, lat, cap)?;
    let mut worst_drop = 0.0f64;
    for w in stages.windows(2) {
        let mut drop = 0.0f64;
        for m in 0..w[0].n_layers() {
            for i in 0..p.q {
                for j in 0..w[0].values[m][i].len() {
                    drop = drop.max(w[0].values[m][i][j] - w[1].values[m][i][j]);
                }
            }
        }
        worst_drop = worst_drop.max(drop);
    }
    let stable_at = stages.iter().position(|s| s.bitwise_eq(field));
    let bounds = bounding_bsdes(p, lat)?;
    let lower = replicate(&bounds.lower, p.q);
    let upper = replicate(&bounds.upper, p.q);
    let mut outside = 0.0f64;
    for s in &stages {
        for m in 0..s.n_layers() {
            for i in 0..p.q {
                for j in 0..s.values[m][i].len() {
                    let v = s.values[m][i][j];
                    outside = outside
                        .max(lower.values[m][i][j] - v)
                        .max(v - upper.values[m][i][j]);
                }
            }
        }
    }
    let ok = worst_drop <= 1e-12 && stable_at.is_some() && outside <= 1e-9;
    Ok(CheckOutcome::pass_if(
        "capped_sandwich",
        ok,
        format!(
            "monotone within {worst_drop:.1e}, bounded within {outside:.1e}, stabilized at stage {:?} of cap {cap}",
            stable_at
        ),
    ))
}

fn policy_check(
    p: &SwitchingProblem,
    lat: &Lattice,
    field: &ValueField,
    rates: bool,
) -> Result<CheckOutcome> {
    if !rates {
        return Ok(CheckOutcome::skip(
            "policy_eps",
            "policy payoffs are defined for rate instances",
        ));
    }
    let mut worst_slack = f64::INFINITY;
    let mut worst_over = 0.0f64;
    for eps in [0.1, 0.01] {
        let policy = Policy::new(p, lat, field, eps)?;
        for i in 0..p.q {
            let pv = evaluate_policy(&policy, i)?;
            let slack = pv.value - (field.root(i) - eps);
            worst_slack = worst_slack.min(slack);
            worst_over = worst_over.max(pv.value - field.root(i));
            if pv.expected_switches > policy.cap as f64 {
                return Ok(CheckOutcome::pass_if(
                    "policy_eps",
                    false,
                    format!(
                        "expected switches {} exceed the budget {}",
                        pv.expected_switches, policy.cap
                    ),
                ));
            }
        }
    }
    Ok(CheckOutcome::pass_if(
        "policy_eps",
        worst_slack >= 0.0 && worst_over <= 1e-9,
        format!("worst slack {worst_slack:.3e}, overshoot {worst_over:.3e}"),
    ))
}

fn jump_check(
    p: &SwitchingProblem,
    lat: &Lattice,
    field: &ValueField,
) -> Result<CheckOutcome> {
    let report = jump_report(p, lat, field)?;
    let ok = report.max_residual <= 1e-10
        && (p.has_cost_jumps() || report.records.is_empty());
    Ok(CheckOutcome::pass_if(
        "jump_identity",
        ok,
        format!(
            "{} jumps, identity residual {:.3e} over {} checks",
            report.records.len(),
            report.max_residual,
            report.checked
        ),
    ))
}

fn picard_checks(
    p: &SwitchingProblem,
    lat: &Lattice,
    rates: bool,
) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if rates {
        out.push(CheckOutcome::skip("picard", "no coupled drivers"));
        out.push(CheckOutcome::skip("monotone_vs_picard", "no coupled drivers"));
        return Ok(out);
    }
    let sol = picard_solve(p, lat, &PicardConfig::default())?;
    let mut contracting = sol.log.converged;
    for w in sol.log.distances.windows(2) {
        if w[0] > 0.0 && w[1] >= w[0] {
            contracting = false;
        }
    }
    let restart = picard_solve(
        p,
        lat,
        &PicardConfig {
            init: Some(sol.field.clone()),
            ..PicardConfig::default()
        },
    )?;
    let restart_dist = restart.log.distances.last().copied().unwrap_or(0.0);
    out.push(CheckOutcome::pass_if(
        "picard",
        contracting && restart_dist <= 1e-10,
        format!(
            "{} iterates, converged {}, restart distance {restart_dist:.3e}",
            sol.log.distances.len(),
            sol.log.converged
        ),
    ));

    let monotone_declared = p.drivers.as_ref().map(|d| d.monotone).unwrap_or(false);
    let alpha = if monotone_declared {
        None
    } else {
        Some(p.lipschitz())
    };
    let res = monotone_solve(p, lat, 120, alpha)?;
    let last = res.stages.last().unwrap();
    let gap = last.max_abs_diff(&sol.field);
    out.push(CheckOutcome::pass_if(
        "monotone_vs_picard",
        gap <= 1e-9 && res.violation <= 1e-12,
        format!(
            "sup gap {gap:.3e} after {} stages, stage violation {:.1e}",
            res.stages.len() - 1,
            res.violation
        ),
    ));
    Ok(out)
}

fn pde_tree_check(p: &SwitchingProblem, grids: &ResolvedGrids, rates: bool) -> CheckOutcome {
    if !rates {
        return CheckOutcome::skip("pde_tree", "tree leg needs rate payoffs");
    }
    match hjb::compare_tree_pde(p, grids.max_dt, grids.h, grids.half_width) {
        Err(e) => CheckOutcome::pass_if("pde_tree", false, format!("{e}")),
        Ok(cmp) => {
            let tol = if p.sigma.is_zero() { 1e-12 } else { 5e-2 };
            CheckOutcome::pass_if(
                "pde_tree",
                cmp.max_gap <= tol,
                format!("root gap {:.3e} against tolerance {tol:.0e}", cmp.max_gap),
            )
        }
    }
}

fn pde_residual_check(p: &SwitchingProblem, grids: &ResolvedGrids) -> CheckOutcome {
    let run = || -> Result<(f64, f64, f64, f64, usize)> {
        let grid = SpaceTimeGrid::build(p, grids.max_dt, grids.h, grids.half_width)?;
        let sol = hjb::solve_qvi(p, &grid)?;
        let rep = hjb::viscosity_residual(p, &sol)?;
        Ok((
            rep.interior_fraction(),
            rep.active_fraction(),
            rep.terminal_max,
            rep.jump_identity_max,
            rep.interior_checked,
        ))
    };
    match run() {
        Err(e) => CheckOutcome::pass_if("pde_residuals", false, format!("{e}")),
        Ok((interior, active, terminal, jump, checked)) => CheckOutcome::pass_if(
            "pde_residuals",
            interior >= 0.99 && active == 1.0 && terminal <= 1e-12 && jump <= 1e-12,
            format!(
                "interior {:.4} of {checked}, active {active:.4}, terminal {terminal:.1e}, jump {jump:.1e}",
                interior
            ),
        ),
    }
}
