//! Measurement models: pinhole projection, inter-vehicle range, the
//! probabilistic quantizer and the resulting effective noise variance.

use std::f64::consts::LN_2;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fisher::{BitAllocation, Layout, Measurement};
use crate::scene::{Scenario, VehiclePose, DEPTH_EPSILON};

/// Largest bit count for which `2^b - 1` is an exact integer in `f64`.
pub const MAX_QUANTIZER_BITS: u32 = 52;

/// Photographing (or ranging) noise and the half width of the quantizer
/// input range for one scalar measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma_prime: f64,
    pub half_range: f64,
}

impl NoiseSpec {
    pub fn new(sigma_prime: f64, half_range: f64) -> Result<NoiseSpec> {
        if !(sigma_prime > 0.0 && sigma_prime.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise std must be positive, got {sigma_prime}"
            )));
        }
        if !(half_range > 0.0 && half_range.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "half range must be positive, got {half_range}"
            )));
        }
        Ok(NoiseSpec {
            sigma_prime,
            half_range,
        })
    }

    pub fn effective_variance(&self, bits: f64) -> f64 {
        effective_variance(self.sigma_prime, self.half_range, bits)
    }

    /// Fisher weight `1 / sigma^2`; zero for an untransmitted measurement.
    ///
    /// Written as `t^2 / (sigma'^2 t^2 + W^2)` with `t = 2^b - 1` so that it
    /// stays accurate as `b -> 0`.
    pub fn information(&self, bits: f64) -> f64 {
        if !(bits > 0.0) {
            return 0.0;
        }
        let t = (bits * LN_2).exp_m1();
        let s2 = self.sigma_prime * self.sigma_prime;
        let w2 = self.half_range * self.half_range;
        if t.is_infinite() {
            return 1.0 / s2;
        }
        t * t / (s2 * t * t + w2)
    }

    /// Derivative of [`information`](Self::information) with respect to the
    /// bit count.
    pub fn information_slope(&self, bits: f64) -> f64 {
        if !(bits > 0.0) {
            return 0.0;
        }
        let t = (bits * LN_2).exp_m1();
        if !t.is_finite() {
            return 0.0;
        }
        let s2 = self.sigma_prime * self.sigma_prime;
        let w2 = self.half_range * self.half_range;
        let denom = s2 * t * t + w2;
        2.0 * t * w2 * LN_2 * (t + 1.0) / (denom * denom)
    }

    /// `log2(W / sigma')`: above this many bits the quantization variance is
    /// below the photographing variance and the weight is concave in `b`.
    pub fn concavity_threshold(&self) -> f64 {
        (self.half_range / self.sigma_prime).log2()
    }
}

/// `sigma'^2 + W^2 / (2^b - 1)^2`, continuous in real `b`; infinite at
/// `b <= 0` (measurement not transmitted).
pub fn effective_variance(sigma_prime: f64, half_range: f64, bits: f64) -> f64 {
    if !(bits > 0.0) {
        return f64::INFINITY;
    }
    let t = (bits * LN_2).exp_m1();
    sigma_prime * sigma_prime + (half_range / t).powi(2)
}

/// Noiseless pixel coordinates of `point` seen from `pose`.
pub fn project(point: &Vector3<f64>, pose: &VehiclePose, k: &Matrix3<f64>) -> Result<Vector2<f64>> {
    let u = k * pose.rotation.transpose() * (point - pose.position);
    let depth = u.z;
    if !(depth > DEPTH_EPSILON) {
        return Err(Error::Cheirality {
            feature: usize::MAX,
            vehicle: usize::MAX,
            depth,
        });
    }
    Ok(Vector2::new(u.x / depth, u.y / depth))
}

pub fn true_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm()
}

/// Output of [`quantize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantized {
    pub value: f64,
    /// Grid spacing `2W / (2^b - 1)`.
    pub step: f64,
    /// The input was outside `[0, 2W]` and was clamped first.
    pub clamped: bool,
}

/// Probabilistic (randomized-rounding) quantizer on `[0, 2W]` with `2^b`
/// levels: rounds up with probability equal to the fractional position
/// inside the cell, so the output is unbiased for in-range input.
pub fn quantize<R: Rng + ?Sized>(x: f64, half_range: f64, bits: u32, rng: &mut R) -> Result<Quantized> {
    if bits < 1 || bits > MAX_QUANTIZER_BITS {
        return Err(Error::InvalidInput(format!(
            "quantizer needs 1..={MAX_QUANTIZER_BITS} bits, got {bits}"
        )));
    }
    if !(half_range > 0.0 && half_range.is_finite()) || !x.is_finite() {
        return Err(Error::InvalidInput("quantizer input must be finite".into()));
    }
    let top = 2.0 * half_range;
    let clamped = !(0.0..=top).contains(&x);
    let x = x.clamp(0.0, top);
    let cells = ((1u64 << bits) - 1) as f64;
    let step = top / cells;
    let n = (x / step).floor().min(cells - 1.0);
    let frac = ((x - n * step) / step).clamp(0.0, 1.0);
    let level = if rng.random::<f64>() < frac { n + 1.0 } else { n };
    Ok(Quantized {
        value: level * step,
        step,
        clamped,
    })
}

/// Noiseless measurement value and its gradient with respect to the first
/// node of the pair. The gradient with respect to the second node is the
/// negation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub value: f64,
    pub direction: Vector3<f64>,
    /// Node indices into the stacked position vector (features first).
    pub nodes: (usize, usize),
}

/// Evaluates every scalar measurement of a scenario at arbitrary node
/// positions. Camera orientations and intrinsics are fixed.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    layout: Layout,
    /// Rows of `K R_j^T` for each vehicle.
    view: Vec<Matrix3<f64>>,
}

impl MeasurementModel {
    pub fn new(scenario: &Scenario) -> Result<MeasurementModel> {
        let k = scenario.calibration()?;
        Ok(MeasurementModel {
            layout: scenario.layout(),
            view: scenario
                .vehicles
                .iter()
                .map(|v| k * v.rotation.transpose())
                .collect(),
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Linearizes measurement `index` at stacked `positions`.
    pub fn linearize_one(&self, positions: &[f64], index: usize) -> Result<Linearization> {
        let node = |n: usize| Vector3::new(positions[3 * n], positions[3 * n + 1], positions[3 * n + 2]);
        match self.layout.measurement(index) {
            Measurement::Pixel {
                feature,
                vehicle,
                axis,
            } => {
                let a = self.layout.feature_node(feature);
                let b = self.layout.vehicle_node(vehicle);
                let view = &self.view[vehicle];
                let u = view * (node(a) - node(b));
                let depth = u.z;
                if !(depth > DEPTH_EPSILON) {
                    return Err(Error::Cheirality {
                        feature,
                        vehicle,
                        depth,
                    });
                }
                let row_k = view.row(axis).transpose();
                let row_3 = view.row(2).transpose();
                // f_ij3 v_k - f_ijk v_3 with f_ijk = v_k^T d / depth^2
                let direction = row_k / depth - row_3 * (u[axis] / (depth * depth));
                Ok(Linearization {
                    value: u[axis] / depth,
                    direction,
                    nodes: (a, b),
                })
            }
            Measurement::Range { first, second } => {
                let a = self.layout.vehicle_node(first);
                let b = self.layout.vehicle_node(second);
                let diff = node(a) - node(b);
                let dist = diff.norm();
                if !(dist > DEPTH_EPSILON) {
                    return Err(Error::DegenerateGeometry(format!(
                        "vehicles {first} and {second} coincide"
                    )));
                }
                Ok(Linearization {
                    value: dist,
                    direction: diff / dist,
                    nodes: (a, b),
                })
            }
        }
    }

    /// All measurements in allocation order.
    pub fn linearize(&self, positions: &[f64]) -> Result<Vec<Linearization>> {
        if positions.len() != self.layout.fim_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.fim_dim(),
                got: positions.len(),
            });
        }
        (0..self.layout.dim())
            .map(|idx| self.linearize_one(positions, idx))
            .collect()
    }
}

/// Noise specification of measurement `index` of a scenario.
pub fn noise_spec(scenario: &Scenario, index: usize) -> NoiseSpec {
    let layout = scenario.layout();
    match layout.measurement(index) {
        Measurement::Pixel { axis, .. } => NoiseSpec {
            sigma_prime: scenario.sigma_pixel[index],
            half_range: scenario.pixel_half_range[axis],
        },
        Measurement::Range { .. } => NoiseSpec {
            sigma_prime: scenario.sigma_range[index - layout.camera_len()],
            half_range: scenario.range_half_range,
        },
    }
}

/// Quantized image coordinates of one feature seen by one vehicle. An axis
/// is `None` when it was allocated zero bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelObservation {
    pub feature: usize,
    pub vehicle: usize,
    pub coords: [Option<f64>; 2],
    /// Effective variance the estimator assigns to each transmitted axis.
    pub variances: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeObservation {
    pub pair: (usize, usize),
    pub value: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    pub pixels: Vec<PixelObservation>,
    pub ranges: Vec<RangeObservation>,
    /// Number of noisy values that fell outside `[0, 2W]` and were clamped.
    pub clamped: usize,
}

impl ObservationSet {
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty() && self.ranges.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.pixels
            .iter()
            .map(|p| p.coords.iter().flatten().count())
            .sum::<usize>()
            + self.ranges.len()
    }
}

/// Draws one set of noisy, quantized measurements.
///
/// Bit counts are rounded to the nearest integer; zero-bit entries are not
/// transmitted. Image coordinates already live in `[0, resolution]`, which
/// is `[0, 2W_k]` when `W_k` is half the resolution.
pub fn simulate_observation_set<R: Rng + ?Sized>(
    scenario: &Scenario,
    allocation: &BitAllocation,
    rng: &mut R,
) -> Result<ObservationSet> {
    let layout = scenario.layout();
    allocation.check_layout(layout)?;
    let model = MeasurementModel::new(scenario)?;
    let truth = scenario.stacked_positions();
    let bits = allocation.bits();

    let mut out = ObservationSet::default();
    let mut draw = |index: usize, clamped: &mut usize| -> Result<Option<(f64, f64)>> {
        let b = bits[index].round();
        if b < 1.0 {
            return Ok(None);
        }
        let noise = noise_spec(scenario, index);
        let lin = model.linearize_one(&truth, index)?;
        let gauss: f64 = rng.sample(StandardNormal);
        let q = quantize(
            lin.value + noise.sigma_prime * gauss,
            noise.half_range,
            b as u32,
            rng,
        )?;
        *clamped += usize::from(q.clamped);
        Ok(Some((q.value, noise.effective_variance(b))))
    };

    for feature in 0..layout.n_features {
        for vehicle in 0..layout.n_vehicles {
            let mut obs = PixelObservation {
                feature,
                vehicle,
                coords: [None; 2],
                variances: [f64::INFINITY; 2],
            };
            for axis in 0..2 {
                let index = layout.camera_index(feature, vehicle, axis);
                if let Some((value, var)) = draw(index, &mut out.clamped)? {
                    obs.coords[axis] = Some(value);
                    obs.variances[axis] = var;
                }
            }
            if obs.coords.iter().any(Option::is_some) {
                out.pixels.push(obs);
            }
        }
    }
    for (first, second) in layout.pairs() {
        let index = layout.range_index(first, second);
        if let Some((value, variance)) = draw(index, &mut out.clamped)? {
            out.ranges.push(RangeObservation {
                pair: (first, second),
                value,
                variance,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_paper_scenario, generate_toy_scenario};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_pose() -> VehiclePose {
        VehiclePose {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    #[test]
    fn projection_examples() {
        let k = Matrix3::identity();
        let pose = identity_pose();
        let on_axis = project(&Vector3::new(0.0, 0.0, 1.0), &pose, &k).unwrap();
        assert_eq!(on_axis, Vector2::new(0.0, 0.0));
        let p = project(&Vector3::new(1.0, 1.0, 2.0), &pose, &k).unwrap();
        assert_eq!(p, Vector2::new(0.5, 0.5));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &pose, &k),
            Err(Error::Cheirality { .. })
        ));
    }

    #[test]
    fn projection_matches_homogeneous_form() {
        // [y; 1] = K [R^T, -R^T x] [p; 1] / lambda, written out with a 3x4
        // camera matrix instead of the difference form used by `project`.
        let s = generate_paper_scenario(3);
        let k = s.calibration().unwrap();
        for f in s.features.iter().take(10) {
            for v in &s.vehicles {
                let rt = v.rotation.transpose();
                let t = -rt * v.position;
                let mut cam = nalgebra::Matrix3x4::zeros();
                cam.fixed_view_mut::<3, 3>(0, 0).copy_from(&(k * rt));
                cam.set_column(3, &(k * t));
                let h = cam * f.position.push(1.0);
                let expect = Vector2::new(h.x / h.z, h.y / h.z);
                let got = project(&f.position, v, &k).unwrap();
                assert_relative_eq!(got, expect, max_relative = 1e-9, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(true_distance(&Vector3::zeros(), &Vector3::x()), 1.0);
        assert_eq!(true_distance(&Vector3::x(), &Vector3::x()), 0.0);
        let s = generate_paper_scenario(0);
        let d = true_distance(&s.vehicles[0].position, &s.vehicles[1].position);
        let chord = 2.0 * 5.0 * (std::f64::consts::PI / 5.0).sin();
        assert_relative_eq!(d, chord, epsilon = 1e-12);
        assert_relative_eq!(d, 5.877_852_522_924_732, epsilon = 1e-12);
    }

    #[test]
    fn effective_variance_examples() {
        assert_relative_eq!(effective_variance(40.0, 1024.0, 60.0), 1600.0, epsilon = 1e-9);
        let b = (1024.0f64 / 40.0 + 1.0).log2();
        assert_relative_eq!(effective_variance(40.0, 1024.0, b), 3200.0, max_relative = 1e-12);
        // 1600 + 1024^2 / 31^2
        assert_relative_eq!(
            effective_variance(40.0, 1024.0, 5.0),
            2_691.130_072_840_790_8,
            max_relative = 1e-12
        );
        assert_eq!(effective_variance(40.0, 1024.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn information_slope_matches_finite_difference() {
        let n = NoiseSpec::new(40.0, 1632.0).unwrap();
        for b in [0.3, 1.0, 2.5, 5.0, 9.0, 14.0] {
            let h = 1e-6;
            let fd = (n.information(b + h) - n.information(b - h)) / (2.0 * h);
            assert_relative_eq!(n.information_slope(b), fd, max_relative = 1e-6);
            assert_relative_eq!(n.information(b), 1.0 / n.effective_variance(b), max_relative = 1e-12);
        }
        assert_eq!(n.information(0.0), 0.0);
        assert_eq!(n.information_slope(0.0), 0.0);
    }

    #[test]
    fn variance_decreasing_and_convex_above_threshold() {
        let n = NoiseSpec::new(40.0, 1024.0).unwrap();
        let start = n.concavity_threshold();
        let h = 0.05;
        let mut b = start;
        while b < start + 15.0 {
            let v = |x| n.effective_variance(x);
            assert!(v(b + h) < v(b));
            assert!(v(b + h) - 2.0 * v(b) + v(b - h) >= 0.0);
            b += h;
        }
    }

    #[test]
    fn quantize_on_grid_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = 10.0;
        let step = 2.0 * w / 15.0;
        for n in 0..=15 {
            let x = n as f64 * step;
            for _ in 0..20 {
                let q = quantize(x, w, 4, &mut rng).unwrap();
                assert_relative_eq!(q.value, x, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn quantize_one_bit_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 20_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let q = quantize(5.0, 5.0, 1, &mut rng).unwrap();
            assert!(q.value == 0.0 || q.value == 10.0);
            sum += q.value;
        }
        // standard error 5 / sqrt(n)
        assert!((sum / draws as f64 - 5.0).abs() < 4.0 * 5.0 / (draws as f64).sqrt());
    }

    #[test]
    fn quantize_clamps_and_rejects_zero_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = quantize(-3.0, 1.0, 3, &mut rng).unwrap();
        assert!(q.clamped);
        assert_eq!(q.value, 0.0);
        let q = quantize(2.5, 1.0, 3, &mut rng).unwrap();
        assert!(q.clamped);
        assert_relative_eq!(q.value, 2.0);
        assert!(quantize(0.5, 1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn quantize_monte_carlo_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = 100.0;
        let x = 0.3 * 2.0 * w;
        let step = 2.0 * w / 15.0;
        let n = 100_000;
        let vals: Vec<f64> = (0..n).map(|_| quantize(x, w, 4, &mut rng).unwrap().value).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - x).abs() <= 4.0 * (var / (n - 1) as f64).sqrt());
        // two-point distribution: variance is at most step^2 / 4
        assert!(var <= step * step / 4.0 * (1.0 + 1e-9));
    }

    #[test]
    fn simulation_zero_bits_is_empty() {
        let s = generate_toy_scenario(0);
        let alloc = BitAllocation::filled(s.layout(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = simulate_observation_set(&s, &alloc, &mut rng).unwrap();
        assert!(obs.is_empty());
    }

    #[test]
    fn simulation_fine_grid_matches_noisy_values() {
        let s = generate_toy_scenario(1);
        let layout = s.layout();
        let alloc = BitAllocation::filled(layout, 32.0);
        let seed = 9;
        let obs = simulate_observation_set(&s, &alloc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(obs.scalar_count(), layout.dim());
        assert_eq!(obs.clamped, 0);

        // Replay the noise stream: one Gaussian and one uniform per scalar.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = MeasurementModel::new(&s).unwrap();
        let truth = s.stacked_positions();
        let mut noisy = vec![0.0; layout.dim()];
        let mut order: Vec<usize> = Vec::new();
        for f in 0..layout.n_features {
            for v in 0..layout.n_vehicles {
                order.push(layout.camera_index(f, v, 0));
                order.push(layout.camera_index(f, v, 1));
            }
        }
        order.extend(layout.pairs().map(|(a, b)| layout.range_index(a, b)));
        for idx in order {
            let g: f64 = rng.sample(StandardNormal);
            let _: f64 = rng.random();
            let spec = noise_spec(&s, idx);
            noisy[idx] = model.linearize_one(&truth, idx).unwrap().value + spec.sigma_prime * g;
        }
        for p in &obs.pixels {
            for axis in 0..2 {
                let idx = layout.camera_index(p.feature, p.vehicle, axis);
                let step = 2.0 * s.pixel_half_range[axis] / ((1u64 << 32) - 1) as f64;
                assert!((p.coords[axis].unwrap() - noisy[idx]).abs() <= step);
            }
        }
        for r in &obs.ranges {
            let idx = layout.range_index(r.pair.0, r.pair.1);
            let step = 2.0 * s.range_half_range / ((1u64 << 32) - 1) as f64;
            assert!((r.value - noisy[idx]).abs() <= step);
        }
    }

    #[test]
    fn simulation_is_deterministic_in_seed() {
        let s = generate_toy_scenario(2);
        let alloc = BitAllocation::filled(s.layout(), 6.0);
        let a = simulate_observation_set(&s, &alloc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = simulate_observation_set(&s, &alloc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulation_rejects_wrong_dimension() {
        let s = generate_toy_scenario(2);
        let other = generate_paper_scenario(0);
        let alloc = BitAllocation::filled(other.layout(), 6.0);
        let err = simulate_observation_set(&s, &alloc, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantize_lands_on_adjacent_grid_points(
                x in 0.0f64..1.0, w in 0.1f64..500.0, bits in 1u32..20, seed in any::<u64>()
            ) {
                let x = x * 2.0 * w;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = quantize(x, w, bits, &mut rng).unwrap();
                let level = q.value / q.step;
                prop_assert!((level - level.round()).abs() < 1e-9);
                prop_assert!(q.value >= x - q.step * (1.0 + 1e-9));
                prop_assert!(q.value <= x + q.step * (1.0 + 1e-9));
                prop_assert!(!q.clamped);
            }
        }
    }
}
