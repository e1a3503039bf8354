use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use vbl_core::alloc::{
    allocate as run_algorithm, decoupling_allocate, sa_allocate, Algorithm, AllocationResult,
    BudgetProblem, SaSchedule,
};
use vbl_core::scene::{generate_paper_scenario, generate_toy_scenario};
use vbl_core::validate::run_monte_carlo;
use vbl_core::{BitAllocation, Scenario};

use crate::files::{self, AllocationFile};
use crate::Tuning;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Core(#[from] vbl_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Core(e) => e.code(),
        }
    }

    /// 2 for bad input, 3 for numerical failure.
    pub fn exit_status(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

pub fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: vbl_core::Error| e.to_string())
}

#[derive(Debug, Clone)]
pub struct BudgetRange(pub Vec<u64>);

pub fn parse_budget_range(s: &str) -> Result<BudgetRange, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(format!("expected start:stop:step, got '{s}'"));
    };
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("'{t}': {e}"));
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if step == 0 || start == 0 || stop < start {
        return Err(format!("need 0 < start <= stop and step > 0, got '{s}'"));
    }
    Ok(BudgetRange((start..=stop).step_by(step as usize).collect()))
}

fn problem(scenario: &Scenario, budget: u64, tuning: &Tuning, seed: u64) -> BudgetProblem {
    BudgetProblem {
        scenario: scenario.clone(),
        budget,
        delta: tuning.delta,
        rounding_trials: tuning.rounding_trials,
        rng_seed: seed,
    }
}

fn schedule(tuning: &Tuning) -> SaSchedule {
    SaSchedule {
        initial_temperature: tuning.sa_initial_temperature,
        cooling_factor: tuning.sa_cooling,
        moves_per_temperature: tuning.sa_moves,
        stop_acceptance: tuning.sa_stop_acceptance,
        ..SaSchedule::default()
    }
}

fn solve(problem: &BudgetProblem, algo: Algorithm, tuning: &Tuning) -> vbl_core::Result<AllocationResult> {
    match algo {
        Algorithm::Decoupling => decoupling_allocate(problem, tuning.rounds),
        Algorithm::Annealing => sa_allocate(problem, &schedule(tuning)),
        other => run_algorithm(problem, other),
    }
}

fn wall_ms(r: &AllocationResult) -> f64 {
    r.wall_time.as_secs_f64() * 1e3
}

pub fn gen(toy: bool, seed: u64, out: &Path) -> Result<(), CliError> {
    let scenario = if toy {
        generate_toy_scenario(seed)
    } else {
        generate_paper_scenario(seed)
    };
    files::write_json(out, &scenario)?;
    let layout = scenario.layout();
    println!(
        "vehicles={} features={} D={} fim={}x{}",
        layout.n_vehicles,
        layout.n_features,
        layout.dim(),
        layout.fim_dim(),
        layout.fim_dim()
    );
    Ok(())
}

pub fn allocate(
    scenario_path: &Path,
    budget: u64,
    algo: Algorithm,
    tuning: &Tuning,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let scenario = files::read_scenario(scenario_path)?;
    let result = solve(&problem(&scenario, budget, tuning, seed), algo, tuning)?;
    let file = AllocationFile {
        algorithm: algo.name().to_string(),
        budget,
        seed,
        m_star: result.m_star,
        speb: result.speb,
        rel_speb_root_m: result.speb.sqrt(),
        iterations: result.iterations,
        wall_ms: wall_ms(&result),
        bits: result.allocation.bits().to_vec(),
    };
    files::write_json(out, &file)?;
    println!(
        "algorithm={} budget={budget} rel_speb_root_m={} speb={} m_star={} wall_ms={:.1}",
        algo,
        file.rel_speb_root_m,
        file.speb,
        file.m_star,
        file.wall_ms
    );
    for note in &result.diagnostics {
        eprintln!("note: {note}");
    }
    Ok(())
}

struct Cell {
    budget: u64,
    algo: Algorithm,
    outcome: Result<AllocationResult, vbl_core::Error>,
}

pub fn sweep(
    scenario_path: &Path,
    budgets: &[u64],
    algos: &[Algorithm],
    jobs: usize,
    tuning: &Tuning,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let scenario = files::read_scenario(scenario_path)?;
    let tasks: Vec<(u64, Algorithm)> = budgets
        .iter()
        .flat_map(|&b| algos.iter().map(move |&a| (b, a)))
        .collect();
    let results: Mutex<Vec<Option<Cell>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(budget, algo)) = tasks.get(k) else {
                    break;
                };
                let started = Instant::now();
                let outcome = solve(&problem(&scenario, budget, tuning, seed), algo, tuning);
                eprintln!(
                    "B={budget} {algo}: {} ({:.1} s)",
                    match &outcome {
                        Ok(r) => format!("rel_speb_root_m={:.6}", r.speb.sqrt()),
                        Err(e) => format!("error {}", e.code()),
                    },
                    started.elapsed().as_secs_f64()
                );
                results.lock().expect("no panics while holding the lock")[k] = Some(Cell {
                    budget,
                    algo,
                    outcome,
                });
            });
        }
    });
    let cells: Vec<Cell> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every task ran"))
        .collect();

    let any_error = cells.iter().any(|c| c.outcome.is_err());
    let mut writer = files::csv_writer(out)?;
    let mut header = vec![
        "budget",
        "algorithm",
        "seed",
        "rel_speb_root_m",
        "wall_ms",
        "m_star",
        "iterations",
    ];
    if any_error {
        header.push("error");
    }
    let csv_err = |e: csv::Error| CliError::Parse {
        path: out.display().to_string(),
        message: e.to_string(),
    };
    writer.write_record(&header).map_err(csv_err)?;
    for cell in &cells {
        let mut row = vec![cell.budget.to_string(), cell.algo.name().to_string(), seed.to_string()];
        match &cell.outcome {
            Ok(r) => {
                row.extend([
                    r.speb.sqrt().to_string(),
                    format!("{:.3}", wall_ms(r)),
                    r.m_star.to_string(),
                    r.iterations.to_string(),
                ]);
                if any_error {
                    row.push(String::new());
                }
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 4));
                row.push(format!("{}: {e}", e.code()));
            }
        }
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| CliError::io(out, e))?;
    println!("{} rows written to {}", cells.len(), out.display());
    Ok(())
}

pub fn validate(
    scenario_path: &Path,
    allocation_path: &Path,
    trials: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let scenario = files::read_scenario(scenario_path)?;
    let file = files::read_allocation(allocation_path)?;
    let allocation = BitAllocation::new(scenario.layout(), file.bits)?;
    let report = run_monte_carlo(&scenario, &allocation, trials, seed)?;

    let mut writer = files::csv_writer(out)?;
    let csv_err = |e: csv::Error| CliError::Parse {
        path: out.display().to_string(),
        message: e.to_string(),
    };
    writer
        .write_record([
            "kind",
            "trial",
            "epsilon_t",
            "epsilon_r",
            "epsilon_r_features",
            "bound",
            "ratio",
            "failures",
            "error",
        ])
        .map_err(csv_err)?;
    let num = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
    for t in &report.per_trial {
        writer
            .write_record([
                "trial".to_string(),
                t.trial.to_string(),
                num(t.epsilon_t),
                num(t.epsilon_r),
                num(t.epsilon_r_features),
                String::new(),
                String::new(),
                String::new(),
                t.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
    }
    writer
        .write_record([
            "summary".to_string(),
            report.trials.to_string(),
            String::new(),
            num(report.empirical_relative_mse),
            String::new(),
            num(report.bound),
            num(report.ratio),
            report.failures.to_string(),
            String::new(),
        ])
        .map_err(csv_err)?;
    writer.flush().map_err(|e| CliError::io(out, e))?;
    println!(
        "trials={} failures={} mean_epsilon_r={} bound={} ratio={}",
        report.trials, report.failures, report.empirical_relative_mse, report.bound, report.ratio
    );
    Ok(())
}
