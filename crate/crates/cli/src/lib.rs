//! Subcommands of the `codesign` binary: `simulate`, `optimize`, `analyze`
//! and `sweep`, with all file output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use codesign::config::{self, RunConfig, Setup};
use codesign::device::reduced_coupling;
use codesign::entangler::{
    makhlin_invariants, nearest_named_class, pe_functional, pe_membership, volume_probe, weyl_coordinates,
    ProbeReport, TugboatParams,
};
use codesign::hilbert::ComplexMatrix;
use codesign::objective::{invariant_trace, resolve_steps, Evaluation, InvariantSample};
use codesign::optimize::{run_codesign, JsonlWriter, Termination};
use codesign::propagate::{computational_labels, population_traces, Frame, TimeGrid};
use codesign::Error;

/// Samples drawn for the Weyl-volume membership probe logged with each run.
pub const PROBE_SAMPLES: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("not converged: {0}")]
    Convergence(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Optimization(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Options shared by the config-driven subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Environment variables; only `CODESIGN_*` entries are used.
    pub env: Vec<(String, String)>,
}

/// Reads the config, applies environment and `--seed` overrides.
pub fn load_config(opts: &RunOptions) -> Result<RunConfig, CliError> {
    let mut tree = config::read_tree(&opts.config)?;
    config::apply_env_overrides(&mut tree, opts.env.clone())?;
    let mut cfg = config::from_value(tree)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn simulate(opts: &RunOptions) -> Result<(), CliError> {
    let cfg = load_config(opts)?;
    let setup = cfg.setup()?;
    let problem = &setup.problem;
    let device = *problem.device();
    let gates = &problem.goal().gates;
    let gate = match &cfg.simulate.gate {
        Some(name) => gates
            .iter()
            .find(|g| &g.name == name)
            .ok_or_else(|| CliError::Validation(format!("at `simulate.gate`: no gate named `{name}`")))?,
        None => &gates[0],
    };
    let policy = problem.goal().frame;

    // control waveforms
    let points = cfg.output.waveform_points.max(2);
    let mut csv = String::from("t_ns,channel,envelope,quadrature,drive\n");
    for k in 0..points {
        let t = gate.duration * k as f64 / (points - 1) as f64;
        for p in &gate.pulses {
            let kind = device.channel(&p.channel)?.kind;
            let _ = writeln!(
                csv,
                "{t:e},{},{:e},{:e},{:e}",
                p.channel,
                p.pulse.envelope(t),
                p.pulse.drag_quadrature(t),
                p.pulse.drive_value(t, kind)
            );
        }
    }
    write_file(&opts.out.join(&cfg.output.waveforms), &csv)?;

    // populations of the computational initial states
    let frame = Frame::for_policy(policy, &device, &gate.pulses);
    let grid = TimeGrid::new(gate.duration, resolve_steps(&device, gate, policy)?, gate.n_samples)?;
    let initial = computational_labels(&device.layout());
    let table = population_traces(&device, &gate.pulses, &grid, &frame, &initial, cfg.simulate.basis)?;
    let mut csv = String::from("t_ns,initial,state,population\n");
    for (i, init) in table.initial_states.iter().enumerate() {
        for (k, t) in table.times.iter().enumerate() {
            for (s, state) in table.basis_states.iter().enumerate() {
                let _ = writeln!(csv, "{t:e},{init},{state},{:e}", table.values[i][k][s]);
            }
        }
    }
    write_file(&opts.out.join(&cfg.output.populations), &csv)?;

    // invariants and d(g) along the gate
    #[derive(Serialize)]
    struct Trace<'a> {
        gate: &'a str,
        samples: Vec<InvariantSample>,
    }
    let samples = invariant_trace(&device, gate, policy, problem.goal().dressing)?;
    write_file(
        &opts.out.join(&cfg.output.invariants),
        &to_json(&Trace {
            gate: &gate.name,
            samples,
        })?,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub status: Termination,
    pub converged: bool,
    pub threshold: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub evaluations: usize,
    pub chi_initial: f64,
    pub chi_final: f64,
    pub best: Evaluation,
    pub best_parameters: BTreeMap<String, f64>,
    pub tugboat: TugboatParams,
    pub weyl_map: &'static str,
    pub probe: ProbeReport,
    pub config: serde_json::Value,
}

fn run_setup(cfg: &RunConfig, setup: &Setup, out: &Path) -> Result<RunSummary, CliError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let log_path = out.join(&cfg.output.log);
    let file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut writer = JsonlWriter::new(std::io::BufWriter::new(file));
    let result = run_codesign(&setup.problem, &setup.optimizer, setup.seed, |rec| writer.write(rec))?;
    drop(writer);
    write_file(&out.join(&cfg.output.summary), &result.log.to_csv())?;

    let chi_initial = reduced_coupling(setup.problem.device())?;
    let best_values: Vec<f64> = setup
        .problem
        .parameters()
        .iter()
        .map(|p| result.best_parameters[&p.name])
        .collect();
    let (device, _) = setup.problem.instantiate(&best_values)?;
    let summary = RunSummary {
        seed: setup.seed,
        status: result.status,
        converged: result.best.goal < setup.threshold,
        threshold: setup.threshold,
        iterations: result.iterations,
        restarts: result.restarts,
        evaluations: result.evaluations,
        chi_initial,
        chi_final: reduced_coupling(&device)?,
        best: result.best.clone(),
        best_parameters: result.best_parameters.clone(),
        tugboat: result.tugboat,
        weyl_map: setup.problem.goal().weyl_map.name(),
        probe: volume_probe(PROBE_SAMPLES, setup.seed),
        config: cfg.to_value()?,
    };
    write_file(&out.join(&cfg.output.run), &to_json(&summary)?)?;
    Ok(summary)
}

/// Runs the co-design loop; fails with a convergence error when the best
/// goal does not reach the threshold.
pub fn optimize(opts: &RunOptions) -> Result<RunSummary, CliError> {
    let cfg = load_config(opts)?;
    let setup = cfg.setup()?;
    let summary = run_setup(&cfg, &setup, &opts.out)?;
    if !summary.converged {
        return Err(CliError::Convergence(format!(
            "best goal {:e} not below threshold {:e}",
            summary.best.goal, summary.threshold
        )));
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub value: f64,
    pub chi_initial: f64,
    pub chi_final: f64,
    pub goal: f64,
    pub eps_single: Option<f64>,
    pub eps_entangler: Option<f64>,
    pub leakage: f64,
    pub converged: bool,
}

pub const SWEEP_HEADER: &str = "index,value,chi_initial,chi_final,goal,eps_I,eps_II,leakage,converged";

/// One optimization per value of `parameter` (a dotted config path), run
/// concurrently, plus an aggregate CSV. `override_sweep` replaces the
/// config's sweep block.
pub fn sweep(opts: &RunOptions, override_sweep: Option<(String, Vec<f64>)>) -> Result<Vec<SweepRow>, CliError> {
    let mut cfg = load_config(opts)?;
    if let Some((parameter, values)) = override_sweep {
        cfg.sweep = Some(config::SweepConfig { parameter, values });
    }
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Validation("at `sweep`: no sweep block or --parameter given".into()))?;
    if spec.values.is_empty() {
        return Err(CliError::Validation("at `sweep.values`: empty value list".into()));
    }
    // validate every child before launching any
    let children = spec
        .values
        .iter()
        .map(|&v| {
            let child = cfg.with_path(&spec.parameter, v)?;
            let setup = child.setup()?;
            Ok((child, setup))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let rows = children
        .par_iter()
        .enumerate()
        .map(|(k, (child, setup))| {
            let dir = opts.out.join(format!("run_{k:03}"));
            let s = run_setup(child, setup, &dir)?;
            Ok(SweepRow {
                index: k,
                value: spec.values[k],
                chi_initial: s.chi_initial,
                chi_final: s.chi_final,
                goal: s.best.goal,
                eps_single: s.best.eps_single,
                eps_entangler: s.best.eps_entangler,
                leakage: s.best.leakage,
                converged: s.converged,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{:e},{:e},{},{},{:e},{}",
            r.index,
            r.value,
            r.chi_initial,
            r.chi_final,
            r.goal,
            opt(r.eps_single),
            opt(r.eps_entangler),
            r.leakage,
            r.converged
        );
    }
    write_file(&opts.out.join(&cfg.output.aggregate), &csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub invariants: [f64; 3],
    pub weyl: [f64; 3],
    pub perfect_entangler: bool,
    pub pe_functional: f64,
    pub nearest_class: &'static str,
    pub class_distance: f64,
}

/// Parses a row-major 4x4 matrix of `[re, im]` pairs.
pub fn parse_matrix(text: &str) -> Result<ComplexMatrix, CliError> {
    let rows: Vec<Vec<[f64; 2]>> =
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("matrix file: {e}")))?;
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return Err(CliError::Validation("matrix file: expected 4 rows of 4 [re, im] pairs".into()));
    }
    let entries: Vec<Complex64> = rows.iter().flatten().map(|&[re, im]| Complex64::new(re, im)).collect();
    Ok(ComplexMatrix::from_rows(4, &entries))
}

pub fn analyze_matrix(u: &ComplexMatrix) -> Result<AnalysisReport, CliError> {
    let err = u.unitarity_error();
    if err > 1e-6 {
        return Err(CliError::Validation(format!("matrix is not unitary (deviation {err:e})")));
    }
    let g = makhlin_invariants(u)?;
    let w = weyl_coordinates(u)?;
    let inside = pe_membership(&w);
    let (name, distance) = nearest_named_class(&w);
    Ok(AnalysisReport {
        invariants: [g.g1, g.g2, g.g3],
        weyl: w.as_array(),
        perfect_entangler: inside,
        pe_functional: pe_functional(&g, inside),
        nearest_class: name,
        class_distance: distance,
    })
}

/// Analyzes a matrix file; the JSON report is returned and, with `out`,
/// also written there.
pub fn analyze(matrix: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let text = fs::read_to_string(matrix).map_err(|e| io_err(matrix, e))?;
    let report = analyze_matrix(&parse_matrix(&text)?)?;
    let json = to_json(&report)?;
    if let Some(path) = out {
        write_file(path, &json)?;
    }
    Ok(json)
}
