//! Bit allocation under a total budget `B`: minimize the relative SPEB over
//! nonnegative integer allocations summing to `B`.
//!
//! Four strategies share one [`SpebEvaluator`]:
//!
//! - [`uniform_allocate`]: equal split, remainder to the first entries.
//! - [`vgd_allocate`]: for each camera/range split `m` on a grid, start from
//!   noise-weighted proportional bits and run projected gradient descent on
//!   the continuous relaxation; keep the best `m`, then discretize (moving
//!   on to the next `m` when no rounding of it is observable).
//! - [`decoupling_allocate`]: for each `m`, reshape the camera bits into a
//!   features x (axis, vehicle) matrix and the range bits into a symmetric
//!   vehicle matrix, and re-optimize one row or column at a time with its
//!   sum held fixed.
//! - [`sa_allocate`]: simulated annealing over integer allocations with
//!   single-bit transfer moves.

use std::cmp::Ordering;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use web_time::Instant;

use crate::error::{Error, Result};
use crate::fisher::{BitAllocation, Layout, SpebEvaluator};
use crate::scene::Scenario;

/// Lower bound on every entry during continuous optimization.
pub const B_MIN: f64 = 0.01;
/// Relative objective change that ends a descent loop.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-5;

const RANDOM_STEP_REDRAWS: usize = 20;
const MAX_DESCENT_ITERATIONS: usize = 1000;
const SA_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Uniform,
    Vgd,
    Decoupling,
    Annealing,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Uniform,
        Algorithm::Vgd,
        Algorithm::Decoupling,
        Algorithm::Annealing,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Uniform => "uniform",
            Algorithm::Vgd => "vgd",
            Algorithm::Decoupling => "decouple",
            Algorithm::Annealing => "sa",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown algorithm '{s}'")))
    }
}

/// One instance of the budget-constrained allocation problem.
#[derive(Debug, Clone)]
pub struct BudgetProblem {
    pub scenario: Scenario,
    /// Total bit budget `B`.
    pub budget: u64,
    /// Grid step for the camera share `m`.
    pub delta: f64,
    pub rounding_trials: usize,
    pub rng_seed: u64,
}

impl BudgetProblem {
    pub fn new(scenario: Scenario, budget: u64) -> BudgetProblem {
        BudgetProblem {
            scenario,
            budget,
            delta: 0.05,
            rounding_trials: 100,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> BudgetProblem {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget < 1 {
            return Err(Error::InvalidInput("budget must be at least one bit".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.rounding_trials < 1 {
            return Err(Error::InvalidInput("rounding_trials must be >= 1".into()));
        }
        self.scenario.validate()
    }

    /// Interior grid `delta, 2 delta, ...` strictly below one.
    pub fn ratio_grid(&self) -> Vec<f64> {
        (1..)
            .map(|k| k as f64 * self.delta)
            .take_while(|m| *m < 1.0 - 1e-12)
            .collect()
    }
}

/// Independent deterministic stream for one unit of work.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    /// Integer-valued allocation summing to the budget.
    pub allocation: BitAllocation,
    /// Relative SPEB of `allocation`, m^2.
    pub speb: f64,
    /// Camera share: the winning grid ratio for the grid-based algorithms,
    /// the realized share of camera bits otherwise.
    pub m_star: f64,
    /// Descent iterations (VGD), inner steps (decoupling) or evaluated moves
    /// (annealing), summed over the whole run.
    pub iterations: usize,
    pub wall_time: Duration,
    pub algorithm: Algorithm,
    /// Objective after each accepted step of the selected run.
    pub trace: Vec<f64>,
    pub diagnostics: Vec<String>,
}

impl AllocationResult {
    pub fn integer_bits(&self) -> Vec<u64> {
        self.allocation.bits().iter().map(|b| *b as u64).collect()
    }
}

/// Runs `algorithm` with default configuration.
pub fn allocate(problem: &BudgetProblem, algorithm: Algorithm) -> Result<AllocationResult> {
    match algorithm {
        Algorithm::Uniform => uniform_allocate(problem),
        Algorithm::Vgd => vgd_allocate(problem),
        Algorithm::Decoupling => decoupling_allocate(problem, DecouplingConfig::default().rounds),
        Algorithm::Annealing => sa_allocate(problem, &SaSchedule::default()),
    }
}

fn finish(
    evaluator: &SpebEvaluator,
    bits: Vec<f64>,
    speb: Option<f64>,
    m_star: Option<f64>,
    meta: (Algorithm, usize, Instant),
    trace: Vec<f64>,
    diagnostics: Vec<String>,
) -> Result<AllocationResult> {
    let allocation = BitAllocation::new(evaluator.layout(), bits)?;
    let speb = match speb {
        Some(p) => p,
        None => evaluator.speb(allocation.bits())?,
    };
    let m_star = m_star.unwrap_or_else(|| allocation.camera_share());
    Ok(AllocationResult {
        allocation,
        speb,
        m_star,
        iterations: meta.1,
        wall_time: meta.2.elapsed(),
        algorithm: meta.0,
        trace,
        diagnostics,
    })
}

/// `floor(B / D)` bits everywhere, one extra bit for the first `B mod D`
/// entries.
pub fn uniform_allocate(problem: &BudgetProblem) -> Result<AllocationResult> {
    let start = Instant::now();
    problem.validate()?;
    let evaluator = SpebEvaluator::new(&problem.scenario)?;
    let bits = uniform_bits(evaluator.layout().dim(), problem.budget);
    finish(
        &evaluator,
        bits,
        None,
        None,
        (Algorithm::Uniform, 0, start),
        Vec::new(),
        Vec::new(),
    )
}

fn uniform_bits(dim: usize, budget: u64) -> Vec<f64> {
    let base = budget / dim as u64;
    let extra = (budget % dim as u64) as usize;
    (0..dim)
        .map(|k| (base + u64::from(k < extra)) as f64)
        .collect()
}

/// Starting point for gradient descent: `m B` camera bits and `(1 - m) B`
/// range bits, each spread proportionally to `1 / (sigma' log2 W)`.
pub fn initial_allocation(m: f64, problem: &BudgetProblem) -> Result<BitAllocation> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::InvalidInput(format!("ratio m must lie in (0, 1), got {m}")));
    }
    let evaluator = SpebEvaluator::new(&problem.scenario)?;
    BitAllocation::new(
        evaluator.layout(),
        proportional_bits(&evaluator, m, problem.budget as f64),
    )
}

fn proportional_bits(evaluator: &SpebEvaluator, m: f64, budget: f64) -> Vec<f64> {
    let layout = evaluator.layout();
    let weights: Vec<f64> = (0..layout.dim())
        .map(|k| {
            let n = evaluator.noise(k);
            1.0 / (n.sigma_prime * n.half_range.log2())
        })
        .collect();
    let cam = layout.camera_len();
    let cam_sum: f64 = weights[..cam].iter().sum();
    let range_sum: f64 = weights[cam..].iter().sum();
    weights
        .iter()
        .enumerate()
        .map(|(k, w)| {
            if k < cam {
                m * budget * w / cam_sum
            } else {
                (1.0 - m) * budget * w / range_sum
            }
        })
        .collect()
}

/// Euclidean projection of `values` onto `{x >= lower, sum x = total}`.
pub fn project_capped_simplex(values: &mut [f64], lower: f64, total: f64) {
    let n = values.len();
    if n == 0 {
        return;
    }
    let lower = lower.min(total / n as f64);
    let mass = total - lower * n as f64;
    let mut sorted: Vec<f64> = values.iter().map(|v| v - lower).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (k, v) in sorted.iter().enumerate() {
        cumulative += v;
        let candidate = (cumulative - mass) / (k + 1) as f64;
        if v - candidate > 0.0 {
            tau = candidate;
        }
    }
    for v in values.iter_mut() {
        *v = (*v - lower - tau).max(0.0) + lower;
    }
}

fn objective(evaluator: &SpebEvaluator, bits: &[f64]) -> f64 {
    evaluator.speb(bits).unwrap_or(f64::INFINITY)
}

/// Variance-based gradient descent tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VgdConfig {
    pub b_min: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Initial scale (bits) of the random step.
    pub base_step: f64,
}

impl Default for VgdConfig {
    fn default() -> Self {
        VgdConfig {
            b_min: B_MIN,
            tolerance: CONVERGENCE_TOLERANCE,
            max_iterations: MAX_DESCENT_ITERATIONS,
            base_step: 1.0,
        }
    }
}

struct Descent {
    bits: Vec<f64>,
    speb: f64,
    iterations: usize,
    trace: Vec<f64>,
}

/// A set of entries whose sum is held fixed during a projected step.
#[derive(Debug, Clone)]
struct Block {
    indices: Vec<usize>,
    total: f64,
}

impl Block {
    fn new(indices: Vec<usize>, bits: &[f64]) -> Block {
        let total = indices.iter().map(|&k| bits[k]).sum();
        Block { indices, total }
    }
}

/// `bits + eta * direction`, projected block by block.
fn step_along(bits: &[f64], direction: &[f64], blocks: &[Block], eta: f64, lower: f64) -> Vec<f64> {
    let mut out = bits.to_vec();
    for block in blocks {
        let mut sub: Vec<f64> = block
            .indices
            .iter()
            .map(|&k| bits[k] + eta * direction[k])
            .collect();
        project_capped_simplex(&mut sub, lower, block.total);
        for (&k, v) in block.indices.iter().zip(sub) {
            out[k] = v;
        }
    }
    out
}

/// Negative gradient scaled per block so that its largest component in
/// each block has magnitude one.
fn normalized_direction(grad: &[f64], blocks: &[Block]) -> Option<Vec<f64>> {
    let mut d = vec![0.0; grad.len()];
    let mut any = false;
    for block in blocks {
        let scale = block.indices.iter().map(|&k| grad[k].abs()).fold(0.0, f64::max);
        if !(scale > 0.0 && scale.is_finite()) {
            continue;
        }
        any = true;
        for &k in &block.indices {
            d[k] = -grad[k] / scale;
        }
    }
    any.then_some(d)
}

/// Golden-section search for the best step on `(0, upper]` after expanding
/// the bracket while the objective keeps falling.
fn line_search<F: Fn(f64) -> f64>(phi: F, start: f64, current: f64) -> (f64, f64) {
    const GOLD: f64 = 0.618_033_988_749_895;
    let mut hi = start;
    let mut f_hi = phi(hi);
    let mut prev = (0.0, current);
    let mut expansions = 0;
    while f_hi < prev.1 && expansions < 30 {
        prev = (hi, f_hi);
        hi *= 2.0;
        f_hi = phi(hi);
        expansions += 1;
    }
    let mut lo = 0.0;
    let (mut best_eta, mut best_f) = if prev.1 < current { prev } else { (0.0, current) };
    if f_hi < best_f {
        return (hi, f_hi);
    }
    let mut a = lo + (1.0 - GOLD) * (hi - lo);
    let mut b = lo + GOLD * (hi - lo);
    let mut fa = phi(a);
    let mut fb = phi(b);
    for _ in 0..40 {
        if (hi - lo) <= 1e-3 * hi.max(1e-12) {
            break;
        }
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = lo + (1.0 - GOLD) * (hi - lo);
            fa = phi(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + GOLD * (hi - lo);
            fb = phi(b);
        }
    }
    for (eta, f) in [(a, fa), (b, fb)] {
        if f < best_f {
            best_eta = eta;
            best_f = f;
        }
    }
    (best_eta, best_f)
}

fn vgd_descent<R: Rng>(
    evaluator: &SpebEvaluator,
    mut bits: Vec<f64>,
    config: &VgdConfig,
    rng: &mut R,
) -> Result<Descent> {
    let thresholds = evaluator.concavity_thresholds();
    let layout = evaluator.layout();
    let (cameras, ranges): (Vec<usize>, Vec<usize>) = (0..bits.len()).partition(|&k| layout.is_camera(k));
    let blocks: Vec<Block> = [cameras, ranges]
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(|b| Block::new(b, &bits))
        .collect();
    bits = step_along(&bits, &vec![0.0; bits.len()], &blocks, 0.0, config.b_min);

    let mut speb = evaluator.speb(&bits)?;
    let mut trace = vec![speb];
    let mut base = config.base_step;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let (_, grad) = evaluator.speb_and_gradient(&bits)?;
        let Some(direction) = normalized_direction(&grad, &blocks) else {
            break;
        };
        let candidate = |eta: f64| step_along(&bits, &direction, &blocks, eta, config.b_min);
        let concave_regime = bits.iter().zip(&thresholds).all(|(b, t)| b >= t);

        let accepted = if concave_regime {
            let (eta, value) = line_search(|eta| objective(evaluator, &candidate(eta)), base, speb);
            (value < speb).then(|| {
                base = eta.max(1e-6);
                (candidate(eta), value)
            })
        } else {
            let mut found = None;
            for _ in 0..RANDOM_STEP_REDRAWS {
                let eta = rng.random::<f64>() * base;
                let next = candidate(eta);
                let value = objective(evaluator, &next);
                if value < speb {
                    found = Some((next, value));
                    base = (base * 1.5).min(64.0);
                    break;
                }
                base *= 0.5;
            }
            found
        };

        let Some((next, value)) = accepted else {
            break;
        };
        iterations += 1;
        let change = ((value - speb) / speb).abs();
        bits = next;
        speb = value;
        trace.push(speb);
        if change <= config.tolerance {
            break;
        }
    }
    Ok(Descent {
        bits,
        speb,
        iterations,
        trace,
    })
}

struct GridWinner {
    m: f64,
    index: usize,
    descent: Descent,
}

/// Discretizes the grid candidates in order of their continuous bound (ties
/// to the lower ratio) and keeps the first one whose rounding is observable.
fn round_best(
    evaluator: &SpebEvaluator,
    problem: &BudgetProblem,
    mut candidates: Vec<GridWinner>,
    meta: (Algorithm, usize, Instant),
    mut diagnostics: Vec<String>,
) -> Result<AllocationResult> {
    candidates.sort_by(|a, b| {
        a.descent
            .speb
            .partial_cmp(&b.descent.speb)
            .unwrap_or(Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    for candidate in candidates {
        let mut rng = stream_rng(problem.rng_seed, candidate.index as u64 + (1 << 20));
        match discretize(
            evaluator,
            &candidate.descent.bits,
            problem.budget,
            problem.rounding_trials,
            &mut rng,
        ) {
            Ok(rounded) => {
                return finish(
                    evaluator,
                    rounded.allocation.into_bits(),
                    Some(rounded.speb),
                    Some(candidate.m),
                    meta,
                    candidate.descent.trace,
                    diagnostics,
                )
            }
            Err(Error::Unobservable { .. }) => diagnostics.push(format!(
                "m = {:.3}: continuous bound {:.6e}, every rounding trial unobservable",
                candidate.m, candidate.descent.speb
            )),
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoFeasibleAllocation { diagnostics })
}

/// Variance-based gradient descent with default tuning.
pub fn vgd_allocate(problem: &BudgetProblem) -> Result<AllocationResult> {
    vgd_allocate_with(problem, &VgdConfig::default())
}

pub fn vgd_allocate_with(problem: &BudgetProblem, config: &VgdConfig) -> Result<AllocationResult> {
    let start = Instant::now();
    problem.validate()?;
    let evaluator = SpebEvaluator::new(&problem.scenario)?;
    let budget = problem.budget as f64;
    let mut diagnostics = Vec::new();
    let mut candidates = Vec::new();
    let mut iterations = 0;
    for (index, m) in problem.ratio_grid().into_iter().enumerate() {
        let mut rng = stream_rng(problem.rng_seed, index as u64);
        let init = proportional_bits(&evaluator, m, budget);
        match vgd_descent(&evaluator, init, config, &mut rng) {
            Ok(d) => {
                iterations += d.iterations;
                candidates.push(GridWinner {
                    m,
                    index,
                    descent: d,
                });
            }
            Err(e) => diagnostics.push(format!("m = {m:.3}: {e}")),
        }
    }
    round_best(
        &evaluator,
        problem,
        candidates,
        (Algorithm::Vgd, iterations, start),
        diagnostics,
    )
}

/// Row/column decoupled optimization tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecouplingConfig {
    pub rounds: usize,
    pub inner_steps: usize,
    pub tolerance: f64,
    pub b_min: f64,
}

impl Default for DecouplingConfig {
    fn default() -> Self {
        DecouplingConfig {
            rounds: 5,
            inner_steps: 50,
            tolerance: CONVERGENCE_TOLERANCE,
            b_min: B_MIN,
        }
    }
}

/// Index groups optimized one at a time: rows then columns of the camera
/// matrix (features x (axis, vehicle)), then rows then columns of the
/// symmetric range matrix.
pub fn decoupling_groups(layout: Layout) -> Vec<Vec<usize>> {
    let (nf, nv) = (layout.n_features, layout.n_vehicles);
    let mut groups = Vec::new();
    for i in 0..nf {
        groups.push(
            (0..2)
                .flat_map(|k| (0..nv).map(move |j| layout.camera_index(i, j, k)))
                .collect(),
        );
    }
    for k in 0..2 {
        for j in 0..nv {
            groups.push((0..nf).map(|i| layout.camera_index(i, j, k)).collect());
        }
    }
    let range_rows: Vec<Vec<usize>> = (0..nv)
        .map(|a| {
            (0..nv)
                .filter(|&b| b != a)
                .map(|b| layout.range_index(a.min(b), a.max(b)))
                .collect()
        })
        .collect();
    // the matrix is symmetric, so its columns are its rows
    groups.extend(range_rows.iter().cloned());
    groups.extend(range_rows);
    groups.retain(|g| g.len() > 1);
    groups
}

/// Projected gradient descent on one group with its sum held fixed.
/// Returns the number of accepted steps.
fn optimize_group(
    evaluator: &SpebEvaluator,
    bits: &mut Vec<f64>,
    speb: &mut f64,
    group: &[usize],
    config: &DecouplingConfig,
) -> Result<usize> {
    let blocks = [Block::new(group.to_vec(), bits)];
    let mut eta = 1.0;
    let mut steps = 0;
    for _ in 0..config.inner_steps {
        let (_, grad) = evaluator.speb_and_gradient(bits)?;
        let Some(direction) = normalized_direction(&grad, &blocks) else {
            break;
        };
        let mut accepted = None;
        for _ in 0..RANDOM_STEP_REDRAWS {
            let next = step_along(bits, &direction, &blocks, eta, config.b_min);
            let value = objective(evaluator, &next);
            if value < *speb {
                accepted = Some((next, value));
                break;
            }
            eta *= 0.5;
        }
        let Some((next, value)) = accepted else {
            break;
        };
        steps += 1;
        let change = (*speb - value) / *speb;
        *bits = next;
        *speb = value;
        eta = (eta * 2.0).min(64.0);
        if change <= config.tolerance {
            break;
        }
    }
    Ok(steps)
}

/// Decoupled row/column optimization with `n_rounds` sweeps per grid ratio.
pub fn decoupling_allocate(problem: &BudgetProblem, n_rounds: usize) -> Result<AllocationResult> {
    decoupling_allocate_with(
        problem,
        &DecouplingConfig {
            rounds: n_rounds,
            ..DecouplingConfig::default()
        },
    )
}

pub fn decoupling_allocate_with(problem: &BudgetProblem, config: &DecouplingConfig) -> Result<AllocationResult> {
    let start = Instant::now();
    problem.validate()?;
    let evaluator = SpebEvaluator::new(&problem.scenario)?;
    let layout = evaluator.layout();
    let groups = decoupling_groups(layout);
    let budget = problem.budget as f64;
    let mut diagnostics = Vec::new();
    let mut candidates = Vec::new();
    let mut iterations = 0;
    for (index, m) in problem.ratio_grid().into_iter().enumerate() {
        let cam = m * budget / layout.camera_len() as f64;
        let range = (1.0 - m) * budget / layout.range_len() as f64;
        let mut bits: Vec<f64> = (0..layout.dim())
            .map(|k| if layout.is_camera(k) { cam } else { range })
            .collect();
        let run = (|| -> Result<Descent> {
            let mut speb = evaluator.speb(&bits)?;
            let mut trace = vec![speb];
            let mut steps = 0;
            for _ in 0..config.rounds {
                for group in &groups {
                    steps += optimize_group(&evaluator, &mut bits, &mut speb, group, config)?;
                    trace.push(speb);
                }
            }
            Ok(Descent {
                bits: bits.clone(),
                speb,
                iterations: steps,
                trace,
            })
        })();
        match run {
            Ok(d) => {
                iterations += d.iterations;
                candidates.push(GridWinner {
                    m,
                    index,
                    descent: d,
                });
            }
            Err(e) => diagnostics.push(format!("m = {m:.3}: {e}")),
        }
    }
    round_best(
        &evaluator,
        problem,
        candidates,
        (Algorithm::Decoupling, iterations, start),
        diagnostics,
    )
}

/// Annealing schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaSchedule {
    /// `None`: chosen so that about 80% of 100 sampled moves from the
    /// starting point would be accepted.
    pub initial_temperature: Option<f64>,
    pub cooling_factor: f64,
    pub moves_per_temperature: usize,
    /// Stop once the acceptance rate at a temperature drops below this.
    pub stop_acceptance: f64,
    /// Stop once the temperature falls below this fraction of the initial.
    pub min_temperature_ratio: f64,
}

impl Default for SaSchedule {
    fn default() -> Self {
        SaSchedule {
            initial_temperature: None,
            cooling_factor: 0.95,
            moves_per_temperature: 200,
            stop_acceptance: 0.01,
            min_temperature_ratio: 1e-6,
        }
    }
}

impl SaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.cooling_factor > 0.0 && self.cooling_factor < 1.0) {
            return Err(Error::InvalidInput("cooling factor must lie in (0, 1)".into()));
        }
        if self.moves_per_temperature < 1 {
            return Err(Error::InvalidInput("moves_per_temperature must be >= 1".into()));
        }
        if let Some(t) = self.initial_temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidInput("initial temperature must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Picks two distinct entries and moves one bit from a nonempty one to the
/// other. Returns `(from, to)`.
fn propose_transfer<R: Rng>(bits: &[f64], rng: &mut R) -> Option<(usize, usize)> {
    let n = bits.len();
    if n < 2 {
        return None;
    }
    for _ in 0..1000 {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        if bits[a] >= 1.0 {
            return Some((a, b));
        }
        if bits[b] >= 1.0 {
            return Some((b, a));
        }
    }
    None
}

/// Simulated annealing from a random integer allocation.
pub fn sa_allocate(problem: &BudgetProblem, schedule: &SaSchedule) -> Result<AllocationResult> {
    sa_allocate_observed(problem, schedule, |_, _| {})
}

/// As [`sa_allocate`], calling `observe(bits, speb)` on every accepted
/// state (including the starting point).
pub fn sa_allocate_observed<F: FnMut(&[f64], f64)>(
    problem: &BudgetProblem,
    schedule: &SaSchedule,
    mut observe: F,
) -> Result<AllocationResult> {
    let start = Instant::now();
    problem.validate()?;
    schedule.validate()?;
    let evaluator = SpebEvaluator::new(&problem.scenario)?;
    let dim = evaluator.layout().dim();
    let mut rng = stream_rng(problem.rng_seed, SA_STREAM);

    let mut bits = vec![0.0; dim];
    for _ in 0..problem.budget {
        bits[rng.random_range(0..dim)] += 1.0;
    }
    let mut current = objective(&evaluator, &bits);
    observe(&bits, current);
    let mut best = (bits.clone(), current);
    let mut trace = vec![current];
    let mut evaluations = 0;

    let t0 = match schedule.initial_temperature {
        Some(t) => t,
        None => {
            let mut worse = Vec::new();
            for _ in 0..100 {
                if let Some((from, to)) = propose_transfer(&bits, &mut rng) {
                    let mut trial = bits.clone();
                    trial[from] -= 1.0;
                    trial[to] += 1.0;
                    let delta = objective(&evaluator, &trial) - current;
                    evaluations += 1;
                    if delta.is_finite() && delta > 0.0 {
                        worse.push(delta);
                    }
                }
            }
            if worse.is_empty() || !current.is_finite() {
                1e-3 * if current.is_finite() { current } else { 1.0 }
            } else {
                // exp(-mean / T0) = 0.8
                let mean = worse.iter().sum::<f64>() / worse.len() as f64;
                -mean / 0.8f64.ln()
            }
        }
    };

    let mut temperature = t0;
    loop {
        let mut accepted = 0;
        for _ in 0..schedule.moves_per_temperature {
            let Some((from, to)) = propose_transfer(&bits, &mut rng) else {
                break;
            };
            bits[from] -= 1.0;
            bits[to] += 1.0;
            let value = objective(&evaluator, &bits);
            evaluations += 1;
            let delta = value - current;
            // an unobservable state accepts any move
            let take = if !current.is_finite() || delta <= 0.0 {
                true
            } else if delta.is_finite() && temperature > 0.0 {
                rng.random::<f64>() < (-delta / temperature).exp()
            } else {
                false
            };
            if take {
                accepted += 1;
                current = value;
                observe(&bits, current);
                trace.push(current);
                if current < best.1 {
                    best = (bits.clone(), current);
                }
            } else {
                bits[from] += 1.0;
                bits[to] -= 1.0;
            }
        }
        let rate = accepted as f64 / schedule.moves_per_temperature as f64;
        if rate < schedule.stop_acceptance || temperature < schedule.min_temperature_ratio * t0 {
            break;
        }
        temperature *= schedule.cooling_factor;
    }

    if !best.1.is_finite() {
        return Err(Error::Unobservable {
            condition: f64::INFINITY,
        });
    }
    finish(
        &evaluator,
        best.0,
        Some(best.1),
        None,
        (Algorithm::Annealing, evaluations, start),
        trace,
        vec![format!("initial temperature {t0:e}")],
    )
}

/// Result of [`discretize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rounding {
    pub allocation: BitAllocation,
    pub speb: f64,
    /// Objective of every trial (infinite for unobservable ones).
    pub trial_spebs: Vec<f64>,
}

/// Floors every entry, then hands the `R = B - sum(floor)` leftover bits to
/// `R` distinct entries chosen uniformly at random, independently per trial;
/// keeps the trial with the smallest bound.
pub fn discretize<R: Rng>(
    evaluator: &SpebEvaluator,
    real_bits: &[f64],
    budget: u64,
    trials: usize,
    rng: &mut R,
) -> Result<Rounding> {
    let dim = evaluator.layout().dim();
    if real_bits.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: real_bits.len(),
        });
    }
    let sum: f64 = real_bits.iter().sum();
    if sum > budget as f64 + 1e-6 {
        return Err(Error::InvalidInput(format!(
            "allocation sums to {sum}, above the budget {budget}"
        )));
    }
    if trials < 1 {
        return Err(Error::InvalidInput("need at least one rounding trial".into()));
    }
    let floors: Vec<f64> = real_bits.iter().map(|b| b.max(0.0).floor()).collect();
    let floor_sum: u64 = floors.iter().map(|b| *b as u64).sum();
    let leftover = budget.saturating_sub(floor_sum) as usize;
    let full_passes = (leftover / dim) as f64;
    let partial = leftover % dim;

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut trial_spebs = Vec::with_capacity(trials);
    let trial_count = if partial == 0 { 1 } else { trials };
    for _ in 0..trial_count {
        let mut bits: Vec<f64> = floors.iter().map(|b| b + full_passes).collect();
        if partial > 0 {
            for k in sample(rng, dim, partial) {
                bits[k] += 1.0;
            }
        }
        let value = objective(evaluator, &bits);
        trial_spebs.push(value);
        if best.as_ref().is_none_or(|(_, v)| value < *v) {
            best = Some((bits, value));
        }
    }
    let (bits, speb) = best.expect("at least one trial");
    if !speb.is_finite() {
        return Err(Error::Unobservable {
            condition: f64::INFINITY,
        });
    }
    Ok(Rounding {
        allocation: BitAllocation::new(evaluator.layout(), bits)?,
        speb,
        trial_spebs,
    })
}
