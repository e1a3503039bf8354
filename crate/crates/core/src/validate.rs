//! Monte Carlo check of the bound: simulate quantized measurements,
//! estimate every position by weighted nonlinear least squares, remove the
//! best global translation and compare the remaining error with the
//! relative SPEB.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::alloc::stream_rng;
use crate::error::{Error, Result};
use crate::fisher::{projection_basis, BitAllocation, SpebEvaluator};
use crate::measurement::{simulate_observation_set, MeasurementModel, ObservationSet};
use crate::scene::Scenario;

/// Standard deviation (m) of the per-coordinate jitter added to the truth
/// to initialize each Monte Carlo estimate.
pub const INIT_JITTER: f64 = 0.1;
pub const MAX_ITERATIONS: usize = 100;
pub const COST_TOLERANCE: f64 = 1e-10;

fn check_stacked(truth: &[f64], estimate: &[f64]) -> Result<()> {
    if truth.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    if truth.is_empty() || truth.len() % 3 != 0 {
        return Err(Error::InvalidInput(format!(
            "stacked position vector length {} is not a positive multiple of 3",
            truth.len()
        )));
    }
    Ok(())
}

/// Optimal translation `alpha0` taking `estimate` towards `truth`, and the
/// translated estimate.
pub fn align_translation(truth: &[f64], estimate: &[f64]) -> Result<(Vector3<f64>, Vec<f64>)> {
    check_stacked(truth, estimate)?;
    let nodes = truth.len() / 3;
    let mut alpha = Vector3::zeros();
    for (k, (t, e)) in truth.iter().zip(estimate).enumerate() {
        alpha[k % 3] += t - e;
    }
    alpha /= nodes as f64;
    let aligned = estimate
        .iter()
        .enumerate()
        .map(|(k, e)| e + alpha[k % 3])
        .collect();
    Ok((alpha, aligned))
}

/// `(epsilon_t, epsilon_r)`: squared error explained by the optimal global
/// translation, and the squared error left after removing it.
pub fn relative_error(truth: &[f64], estimate: &[f64]) -> Result<(f64, f64)> {
    let (alpha, aligned) = align_translation(truth, estimate)?;
    let nodes = (truth.len() / 3) as f64;
    let eps_t = nodes * alpha.norm_squared();
    let eps_r = truth
        .iter()
        .zip(&aligned)
        .map(|(t, a)| (t - a) * (t - a))
        .sum();
    Ok((eps_t, eps_r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateState {
    /// Stacked positions, features first, m.
    pub positions: Vec<f64>,
    pub iterations: usize,
    /// Weighted squared residual after each accepted step.
    pub cost_trace: Vec<f64>,
}

struct Residual {
    index: usize,
    observed: f64,
    weight: f64,
}

fn residual_list(observations: &ObservationSet, scenario: &Scenario) -> Vec<Residual> {
    let layout = scenario.layout();
    let mut out = Vec::with_capacity(observations.scalar_count());
    for p in &observations.pixels {
        for axis in 0..2 {
            if let Some(observed) = p.coords[axis] {
                out.push(Residual {
                    index: layout.camera_index(p.feature, p.vehicle, axis),
                    observed,
                    weight: 1.0 / p.variances[axis],
                });
            }
        }
    }
    for r in &observations.ranges {
        out.push(Residual {
            index: layout.range_index(r.pair.0, r.pair.1),
            observed: r.value,
            weight: 1.0 / r.variance,
        });
    }
    out
}

/// Weighted cost, plus the reduced normal matrix and gradient when `full`.
fn evaluate(
    model: &MeasurementModel,
    residuals: &[Residual],
    positions: &[f64],
    basis: &DMatrix<f64>,
    full: bool,
) -> Result<(f64, Option<(DMatrix<f64>, DVector<f64>)>)> {
    let dim = positions.len();
    let mut cost = 0.0;
    let mut normal = if full { DMatrix::zeros(dim, dim) } else { DMatrix::zeros(0, 0) };
    let mut rhs = DVector::zeros(if full { dim } else { 0 });
    for r in residuals {
        let lin = model.linearize_one(positions, r.index)?;
        let e = r.observed - lin.value;
        cost += r.weight * e * e;
        if full {
            let (a, b) = lin.nodes;
            let d = lin.direction;
            for (na, sa) in [(a, 1.0), (b, -1.0)] {
                for ra in 0..3 {
                    rhs[3 * na + ra] += r.weight * sa * d[ra] * e;
                    for (nb, sb) in [(a, 1.0), (b, -1.0)] {
                        for rb in 0..3 {
                            normal[(3 * na + ra, 3 * nb + rb)] += r.weight * sa * sb * d[ra] * d[rb];
                        }
                    }
                }
            }
        }
    }
    if !cost.is_finite() {
        return Err(Error::EstimationFailure {
            iterations: 0,
            reason: "non-finite cost".into(),
            cost_trace: vec![cost],
        });
    }
    let reduced = full.then(|| {
        let ut = basis.transpose();
        (&ut * &normal * basis, &ut * &rhs)
    });
    Ok((cost, reduced))
}

/// Damped Gauss-Newton over positions with the centroid pinned to the
/// centroid of `init`. Steps that would put a feature behind a camera are
/// rejected like any other non-improving step.
pub fn estimate_positions(
    observations: &ObservationSet,
    scenario: &Scenario,
    init: &[f64],
) -> Result<EstimateState> {
    let layout = scenario.layout();
    if init.len() != layout.fim_dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.fim_dim(),
            got: init.len(),
        });
    }
    if observations.is_empty() {
        return Err(Error::InvalidInput("no observations to estimate from".into()));
    }
    let model = MeasurementModel::new(scenario)?;
    let residuals = residual_list(observations, scenario);
    let basis = projection_basis(layout.n_features, layout.n_vehicles)?.u;

    let fail = |iterations: usize, reason: &str, trace: &[f64]| Error::EstimationFailure {
        iterations,
        reason: reason.to_string(),
        cost_trace: trace.to_vec(),
    };

    let mut positions = init.to_vec();
    let (mut cost, _) = evaluate(&model, &residuals, &positions, &basis, false)
        .map_err(|e| fail(0, &format!("initialization: {e}"), &[]))?;
    let mut trace = vec![cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS && cost > 0.0 {
        iterations += 1;
        let (_, reduced) = evaluate(&model, &residuals, &positions, &basis, true)
            .map_err(|e| fail(iterations, &e.to_string(), &trace))?;
        let (normal, gradient) = reduced.expect("full evaluation");
        if normal.clone().cholesky().is_none() {
            return Err(fail(iterations, "singular normal equations", &trace));
        }
        let mut improved = None;
        while lambda < 1e16 {
            let mut damped = normal.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += lambda * normal[(k, k)];
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = &basis * chol.solve(&gradient);
            let candidate: Vec<f64> = positions.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
            match evaluate(&model, &residuals, &candidate, &basis, false) {
                Ok((c, _)) if c <= cost => {
                    improved = Some((candidate, c));
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        let Some((next, next_cost)) = improved else {
            // no damping level improves the cost: local minimum
            break;
        };
        lambda = (lambda / 10.0).max(1e-12);
        let change = (cost - next_cost) / cost;
        positions = next;
        cost = next_cost;
        trace.push(cost);
        if change < COST_TOLERANCE {
            break;
        }
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(fail(iterations, "diverged", &trace));
    }
    Ok(EstimateState {
        positions,
        iterations,
        cost_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub epsilon_t: f64,
    pub epsilon_r: f64,
    /// Part of `epsilon_r` carried by the feature points alone.
    pub epsilon_r_features: f64,
    /// Set when the estimate failed; the error fields are then NaN.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub trials: usize,
    pub failures: usize,
    /// Mean `epsilon_r` over successful trials, m^2.
    pub empirical_relative_mse: f64,
    /// Relative SPEB of the allocation, m^2.
    pub bound: f64,
    pub ratio: f64,
    pub per_trial: Vec<TrialRecord>,
}

fn run_trial(
    scenario: &Scenario,
    allocation: &BitAllocation,
    seed: u64,
    trial: usize,
) -> Result<(f64, f64, f64)> {
    let mut rng = stream_rng(seed, trial as u64);
    let observations = simulate_observation_set(scenario, allocation, &mut rng)?;
    let truth = scenario.stacked_positions();
    let init: Vec<f64> = truth
        .iter()
        .map(|t| t + INIT_JITTER * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let estimate = estimate_positions(&observations, scenario, &init)?;
    let (eps_t, eps_r) = relative_error(&truth, &estimate.positions)?;
    let (_, aligned) = align_translation(&truth, &estimate.positions)?;
    let features = 3 * scenario.features.len();
    let eps_features = truth[..features]
        .iter()
        .zip(&aligned[..features])
        .map(|(t, a)| (t - a) * (t - a))
        .sum();
    Ok((eps_t, eps_r, eps_features))
}

/// Runs `trials` independent simulate / estimate / align rounds. Trial `t`
/// draws from its own stream derived from `(seed, t)`.
pub fn run_monte_carlo(
    scenario: &Scenario,
    allocation: &BitAllocation,
    trials: usize,
    seed: u64,
) -> Result<McReport> {
    if trials < 1 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    scenario.validate()?;
    allocation.check_layout(scenario.layout())?;
    let bound = SpebEvaluator::new(scenario)?.speb(allocation.bits())?;

    let mut per_trial = Vec::with_capacity(trials);
    for trial in 0..trials {
        per_trial.push(match run_trial(scenario, allocation, seed, trial) {
            Ok((epsilon_t, epsilon_r, epsilon_r_features)) => TrialRecord {
                trial,
                epsilon_t,
                epsilon_r,
                epsilon_r_features,
                error: None,
            },
            Err(e) if e.is_numerical() => TrialRecord {
                trial,
                epsilon_t: f64::NAN,
                epsilon_r: f64::NAN,
                epsilon_r_features: f64::NAN,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        });
    }
    let ok: Vec<f64> = per_trial
        .iter()
        .filter(|t| t.error.is_none())
        .map(|t| t.epsilon_r)
        .collect();
    let failures = trials - ok.len();
    let empirical = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    };
    Ok(McReport {
        trials,
        failures,
        empirical_relative_mse: empirical,
        bound,
        ratio: empirical / bound,
        per_trial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{PixelObservation, RangeObservation};
    use crate::scene::generate_toy_scenario;
    use approx::assert_relative_eq;

    fn random_stack(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..3 * n).map(|_| rng.random_range(-5.0..5.0)).collect()
    }

    /// Exact, unquantized observations of the true positions.
    fn exact_observations(scenario: &Scenario) -> ObservationSet {
        let layout = scenario.layout();
        let model = MeasurementModel::new(scenario).unwrap();
        let truth = scenario.stacked_positions();
        let mut out = ObservationSet::default();
        for feature in 0..layout.n_features {
            for vehicle in 0..layout.n_vehicles {
                let value = |axis| {
                    model
                        .linearize_one(&truth, layout.camera_index(feature, vehicle, axis))
                        .unwrap()
                        .value
                };
                out.pixels.push(PixelObservation {
                    feature,
                    vehicle,
                    coords: [Some(value(0)), Some(value(1))],
                    variances: [1600.0; 2],
                });
            }
        }
        for (a, b) in layout.pairs() {
            out.ranges.push(RangeObservation {
                pair: (a, b),
                value: model.linearize_one(&truth, layout.range_index(a, b)).unwrap().value,
                variance: 16.0,
            });
        }
        out
    }

    #[test]
    fn pure_translation_is_removed() {
        let truth = random_stack(6, 1);
        let t = Vector3::new(0.3, -1.2, 2.5);
        let est: Vec<f64> = truth.iter().enumerate().map(|(k, v)| v - t[k % 3]).collect();
        let (alpha, aligned) = align_translation(&truth, &est).unwrap();
        assert_relative_eq!(alpha, t, epsilon = 1e-12);
        for (a, b) in aligned.iter().zip(&truth) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let (eps_t, eps_r) = relative_error(&truth, &est).unwrap();
        assert_relative_eq!(eps_t, 6.0 * t.norm_squared(), epsilon = 1e-10);
        assert!(eps_r < 1e-20);
        assert_eq!(relative_error(&truth, &truth).unwrap(), (0.0, 0.0));
        assert_eq!(align_translation(&truth, &truth).unwrap().0, Vector3::zeros());
    }

    #[test]
    fn alignment_matches_brute_force_minimizer() {
        let truth = random_stack(5, 2);
        let est = random_stack(5, 3);
        let (alpha, aligned) = align_translation(&truth, &est).unwrap();
        let cost = |a: &Vector3<f64>| -> f64 {
            truth
                .iter()
                .zip(&est)
                .enumerate()
                .map(|(k, (t, e))| (t - e - a[k % 3]).powi(2))
                .sum()
        };
        // grid, then shrinking coordinate search
        let mut best = Vector3::zeros();
        let mut best_cost = f64::INFINITY;
        for i in -40..=40 {
            for j in -40..=40 {
                for k in -40..=40 {
                    let a = Vector3::new(i as f64, j as f64, k as f64) * 0.25;
                    let c = cost(&a);
                    if c < best_cost {
                        best = a;
                        best_cost = c;
                    }
                }
            }
        }
        let mut h = 0.25;
        while h > 1e-10 {
            let mut moved = false;
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut a = best;
                    a[axis] += sign * h;
                    let c = cost(&a);
                    if c < best_cost {
                        best = a;
                        best_cost = c;
                        moved = true;
                    }
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        assert_relative_eq!(alpha, best, epsilon = 1e-6);
        // realigning is a fixed point
        let (again, _) = align_translation(&truth, &aligned).unwrap();
        assert!(again.norm() < 1e-12);
    }

    #[test]
    fn error_decomposition_holds() {
        for seed in 0..20 {
            let truth = random_stack(7, 100 + seed);
            let est = random_stack(7, 200 + seed);
            let total: f64 = truth.iter().zip(&est).map(|(a, b)| (a - b) * (a - b)).sum();
            let (eps_t, eps_r) = relative_error(&truth, &est).unwrap();
            assert_relative_eq!(eps_t + eps_r, total, max_relative = 1e-9);
        }
        assert!(relative_error(&[0.0; 6], &[0.0; 3]).is_err());
        assert!(relative_error(&[0.0; 4], &[0.0; 4]).is_err());
    }

    #[test]
    fn exact_data_is_a_fixed_point() {
        let s = generate_toy_scenario(0);
        let obs = exact_observations(&s);
        let truth = s.stacked_positions();
        let est = estimate_positions(&obs, &s, &truth).unwrap();
        assert_eq!(est.positions, truth);
    }

    #[test]
    fn exact_data_recovers_truth_from_perturbed_start() {
        let s = generate_toy_scenario(1);
        let obs = exact_observations(&s);
        let truth = s.stacked_positions();
        let mut rng = stream_rng(5, 0);
        let init: Vec<f64> = truth
            .iter()
            .map(|t| t + 0.05 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let est = estimate_positions(&obs, &s, &init).unwrap();
        let (_, aligned) = align_translation(&truth, &est.positions).unwrap();
        for (a, t) in aligned.iter().zip(&truth) {
            assert!((a - t).abs() < 1e-8, "{a} vs {t}");
        }
        assert!(est.cost_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn translated_initialization_leaves_relative_error_unchanged() {
        let s = generate_toy_scenario(2);
        let alloc = BitAllocation::filled(s.layout(), 16.0);
        let mut rng = stream_rng(8, 0);
        let obs = simulate_observation_set(&s, &alloc, &mut rng).unwrap();
        let truth = s.stacked_positions();
        let init: Vec<f64> = truth
            .iter()
            .map(|t| t + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let shifted: Vec<f64> = init.iter().enumerate().map(|(k, v)| v + [1.5, -0.7, 0.2][k % 3]).collect();
        let a = estimate_positions(&obs, &s, &init).unwrap();
        let b = estimate_positions(&obs, &s, &shifted).unwrap();
        let (_, ra) = relative_error(&truth, &a.positions).unwrap();
        let (_, rb) = relative_error(&truth, &b.positions).unwrap();
        assert_relative_eq!(ra, rb, max_relative = 1e-9);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_consistent() {
        let s = generate_toy_scenario(3);
        let alloc = BitAllocation::filled(s.layout(), 16.0);
        let a = run_monte_carlo(&s, &alloc, 5, 42).unwrap();
        let b = run_monte_carlo(&s, &alloc, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failures, 0);
        for t in &a.per_trial {
            assert!(t.epsilon_t >= 0.0 && t.epsilon_r >= 0.0);
            assert!(t.epsilon_r_features <= t.epsilon_r);
        }
        let single = run_monte_carlo(&s, &alloc, 1, 7).unwrap();
        assert_eq!(single, run_monte_carlo(&s, &alloc, 1, 7).unwrap());
        assert!(run_monte_carlo(&s, &alloc, 0, 7).is_err());
    }

    #[test]
    fn no_observations_is_rejected() {
        let s = generate_toy_scenario(0);
        let truth = s.stacked_positions();
        assert!(matches!(
            estimate_positions(&ObservationSet::default(), &s, &truth),
            Err(Error::InvalidInput(_))
        ));
    }
}
