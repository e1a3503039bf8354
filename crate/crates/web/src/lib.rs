//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every exported function returns a JSON string. Failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use vbl_core::alloc::{allocate, stream_rng, Algorithm, BudgetProblem};
use vbl_core::measurement::{effective_variance, quantize};
use vbl_core::scene::{generate_paper_scenario, generate_toy_scenario};
use vbl_core::Scenario;

/// Largest number of budgets one curve request may evaluate.
pub const MAX_CURVE_POINTS: usize = 64;
pub const MAX_DRAWS: usize = 1_000_000;

fn scenario(preset: &str, seed: u64) -> Result<Scenario, String> {
    match preset {
        "toy" => Ok(generate_toy_scenario(seed)),
        "paper" => Ok(generate_paper_scenario(seed)),
        other => Err(format!("unknown preset '{other}' (expected toy or paper)")),
    }
}

fn to_json<T: Serialize>(result: Result<T, String>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).expect("serializable"),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub budget: u64,
    /// Square root of the relative bound in metres; `None` if the allocation failed.
    pub rel_speb_root_m: Option<f64>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub algorithm: String,
    pub points: Vec<CurvePoint>,
}

pub fn budget_curve(
    preset: &str,
    seed: u64,
    algorithm: &str,
    budgets: &[u64],
) -> Result<Curve, String> {
    let s = scenario(preset, seed)?;
    let algo: Algorithm = algorithm.parse().map_err(|e: vbl_core::Error| e.to_string())?;
    if budgets.is_empty() || budgets.len() > MAX_CURVE_POINTS {
        return Err(format!("need 1 to {MAX_CURVE_POINTS} budgets, got {}", budgets.len()));
    }
    let points = budgets
        .iter()
        .map(|&budget| {
            let problem = BudgetProblem::new(s.clone(), budget).with_seed(seed);
            match allocate(&problem, algo) {
                Ok(r) => CurvePoint {
                    budget,
                    rel_speb_root_m: Some(r.speb.sqrt()),
                    wall_ms: r.wall_time.as_secs_f64() * 1e3,
                    error: None,
                },
                Err(e) => CurvePoint {
                    budget,
                    rel_speb_root_m: None,
                    wall_ms: 0.0,
                    error: Some(format!("{}: {e}", e.code())),
                },
            }
        })
        .collect();
    Ok(Curve {
        algorithm: algo.name().to_string(),
        points,
    })
}

/// Bits of one allocation arranged for drawing.
#[derive(Debug, Serialize)]
pub struct AllocationMap {
    pub n_features: usize,
    pub n_vehicles: usize,
    /// `camera[axis][feature][vehicle]`.
    pub camera: Vec<Vec<Vec<f64>>>,
    /// Symmetric vehicle-by-vehicle matrix, zero diagonal.
    pub range: Vec<Vec<f64>>,
    pub rel_speb_root_m: f64,
    pub camera_share: f64,
    pub wall_ms: f64,
}

pub fn allocation_map(preset: &str, seed: u64, budget: u64, algorithm: &str) -> Result<AllocationMap, String> {
    let s = scenario(preset, seed)?;
    let algo: Algorithm = algorithm.parse().map_err(|e: vbl_core::Error| e.to_string())?;
    let problem = BudgetProblem::new(s, budget).with_seed(seed);
    let r = allocate(&problem, algo).map_err(|e| format!("{}: {e}", e.code()))?;
    let layout = r.allocation.layout();
    let bits = r.allocation.bits();
    let (nf, nv) = (layout.n_features, layout.n_vehicles);
    let camera = (0..2)
        .map(|axis| {
            (0..nf)
                .map(|i| (0..nv).map(|j| bits[layout.camera_index(i, j, axis)]).collect())
                .collect()
        })
        .collect();
    let mut range = vec![vec![0.0; nv]; nv];
    for (a, b) in layout.pairs() {
        let v = bits[layout.range_index(a, b)];
        range[a][b] = v;
        range[b][a] = v;
    }
    Ok(AllocationMap {
        n_features: nf,
        n_vehicles: nv,
        camera,
        range,
        rel_speb_root_m: r.speb.sqrt(),
        camera_share: r.allocation.camera_share(),
        wall_ms: r.wall_time.as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    /// Reconstruction levels of the quantizer grid that were hit.
    pub levels: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub mse: f64,
    /// Predicted mean squared error `sigma'^2 + W^2 / (2^b - 1)^2`.
    pub predicted_mse: f64,
    pub clamped: u64,
}

/// Quantizes `draws` noisy readings of `x` and counts the output levels.
pub fn quantizer_histogram(
    x: f64,
    sigma: f64,
    half_range: f64,
    bits: u32,
    draws: usize,
    seed: u64,
) -> Result<Histogram, String> {
    if !(1..=MAX_DRAWS).contains(&draws) {
        return Err(format!("draws must be in 1..={MAX_DRAWS}"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err("sigma must be finite and non-negative".into());
    }
    let mut rng = stream_rng(seed, 0);
    let mut counts = std::collections::BTreeMap::<i64, u64>::new();
    let (mut sum, mut sq, mut clamped) = (0.0, 0.0, 0);
    let mut step = 0.0;
    for _ in 0..draws {
        let noisy = x + sigma * rng.sample::<f64, _>(StandardNormal);
        let q = quantize(noisy, half_range, bits, &mut rng).map_err(|e| e.to_string())?;
        step = q.step;
        *counts.entry((q.value / q.step).round() as i64).or_default() += 1;
        sum += q.value;
        sq += (q.value - x).powi(2);
        clamped += q.clamped as u64;
    }
    let n = draws as f64;
    Ok(Histogram {
        levels: counts.keys().map(|&k| k as f64 * step).collect(),
        counts: counts.values().copied().collect(),
        mean: sum / n,
        mse: sq / n,
        predicted_mse: effective_variance(sigma, half_range, bits as f64),
        clamped,
    })
}

// Exported integers are u32 so the page can pass plain JS numbers.

/// `budgets` is a comma-separated list.
#[wasm_bindgen(js_name = budgetCurve)]
pub fn budget_curve_json(preset: &str, seed: u32, algorithm: &str, budgets: &str) -> String {
    let parsed: Result<Vec<u64>, String> = budgets
        .split(',')
        .map(|t| t.trim().parse::<u64>().map_err(|e| format!("'{t}': {e}")))
        .collect();
    to_json(parsed.and_then(|b| budget_curve(preset, seed.into(), algorithm, &b)))
}

#[wasm_bindgen(js_name = allocationMap)]
pub fn allocation_map_json(preset: &str, seed: u32, budget: u32, algorithm: &str) -> String {
    to_json(allocation_map(preset, seed.into(), budget.into(), algorithm))
}

#[wasm_bindgen(js_name = quantizerHistogram)]
pub fn quantizer_histogram_json(x: f64, sigma: f64, half_range: f64, bits: u32, draws: u32, seed: u32) -> String {
    to_json(quantizer_histogram(x, sigma, half_range, bits, draws as usize, seed.into()))
}
