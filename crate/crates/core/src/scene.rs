//! World model: vehicles with calibrated cameras, feature points and the
//! per-measurement noise configuration.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::Layout;

/// Minimum depth (m) for a feature to count as in front of a camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

const ROTATION_TOLERANCE: f64 = 1e-9;

/// Pinhole camera description shared by all vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in millimetres.
    pub focal_length: f64,
    /// Sensor width in millimetres.
    pub sensor_width: f64,
    /// Sensor height in millimetres.
    pub sensor_height: f64,
    pub resolution_x: f64,
    pub resolution_y: f64,
    pub skew: f64,
    /// Principal point in pixels.
    pub principal_point: [f64; 2],
}

impl CameraIntrinsics {
    /// Intrinsics with the principal point at the image centre and zero skew.
    pub fn centered(
        focal_length: f64,
        sensor: [f64; 2],
        resolution: [f64; 2],
    ) -> CameraIntrinsics {
        CameraIntrinsics {
            focal_length,
            sensor_width: sensor[0],
            sensor_height: sensor[1],
            resolution_x: resolution[0],
            resolution_y: resolution[1],
            skew: 0.0,
            principal_point: [resolution[0] / 2.0, resolution[1] / 2.0],
        }
    }

    /// 600 mm lens on a 36 x 23.9 mm sensor imaged at 3264 x 2488 pixels.
    pub fn paper() -> CameraIntrinsics {
        CameraIntrinsics::centered(600.0, [36.0, 23.9], [3264.0, 2488.0])
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("focal_length", self.focal_length),
            ("sensor_width", self.sensor_width),
            ("sensor_height", self.sensor_height),
            ("resolution_x", self.resolution_x),
            ("resolution_y", self.resolution_y),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !self.skew.is_finite() || !self.principal_point.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput(
                "skew and principal point must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Half of the image extent per axis: the quantizer range `[0, 2W]`
    /// exactly covers the image.
    pub fn half_resolution(&self) -> [f64; 2] {
        [self.resolution_x / 2.0, self.resolution_y / 2.0]
    }
}

/// Calibration matrix `K` in pixels.
///
/// Focal lengths are converted from millimetres with the pixel pitch of each
/// sensor axis: `f_x = focal * resolution_x / sensor_width`.
pub fn build_calibration_matrix(intrinsics: &CameraIntrinsics) -> Result<Matrix3<f64>> {
    intrinsics.validate()?;
    let fx = intrinsics.focal_length * intrinsics.resolution_x / intrinsics.sensor_width;
    let fy = intrinsics.focal_length * intrinsics.resolution_y / intrinsics.sensor_height;
    let [cx, cy] = intrinsics.principal_point;
    Ok(Matrix3::new(
        fx,
        intrinsics.skew,
        cx,
        0.0,
        fy,
        cy,
        0.0,
        0.0,
        1.0,
    ))
}

/// Camera centre and orientation of one vehicle. `rotation` maps camera
/// coordinates to world coordinates, so `rotation^T (p - position)` is the
/// point in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehiclePose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl VehiclePose {
    /// Pose whose optical axis points from `position` toward `target`, with
    /// the image "down" direction aligned with world -z.
    pub fn looking_at(position: Vector3<f64>, target: Vector3<f64>) -> Result<VehiclePose> {
        let forward = target - position;
        let norm = forward.norm();
        if norm <= DEPTH_EPSILON {
            return Err(Error::DegenerateGeometry(
                "camera target coincides with camera centre".into(),
            ));
        }
        let forward = forward / norm;
        let mut right = forward.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Ok(VehiclePose {
            position,
            rotation: Matrix3::from_columns(&[right, down, forward]),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("vehicle position not finite".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        if !(err <= ROTATION_TOLERANCE) || self.rotation.determinant() <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "rotation is not a proper orthonormal matrix (|R^T R - I| = {err:e})"
            )));
        }
        Ok(())
    }

    /// Depth of a world point along this camera's optical axis.
    pub fn depth(&self, point: &Vector3<f64>) -> f64 {
        self.rotation.column(2).dot(&(point - self.position))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    pub position: Vector3<f64>,
}

/// The ground-truth world and all noise parameters.
///
/// `sigma_pixel` follows the camera block of the bit allocation (axis-major,
/// then feature, then vehicle); `sigma_range` follows the lexicographic pair
/// order of the range block. See [`Layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ScenarioDoc", try_from = "ScenarioDoc")]
pub struct Scenario {
    pub vehicles: Vec<VehiclePose>,
    pub features: Vec<FeaturePoint>,
    pub intrinsics: CameraIntrinsics,
    pub sigma_pixel: Vec<f64>,
    pub sigma_range: Vec<f64>,
    /// `W_1, W_2` in pixels.
    pub pixel_half_range: [f64; 2],
    /// `W_3` in metres.
    pub range_half_range: f64,
    pub seed: Option<u64>,
}

impl Scenario {
    pub fn layout(&self) -> Layout {
        Layout::new(self.features.len(), self.vehicles.len())
    }

    pub fn calibration(&self) -> Result<Matrix3<f64>> {
        build_calibration_matrix(&self.intrinsics)
    }

    /// Checks every structural invariant, including cheirality.
    pub fn validate(&self) -> Result<()> {
        if self.vehicles.len() < 2 {
            return Err(Error::InvalidInput("at least two vehicles are required".into()));
        }
        if self.features.is_empty() {
            return Err(Error::InvalidInput("at least one feature point is required".into()));
        }
        self.intrinsics.validate()?;
        for v in &self.vehicles {
            v.validate()?;
        }
        if !self.features.iter().all(|f| f.position.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("feature position not finite".into()));
        }
        let layout = self.layout();
        if self.sigma_pixel.len() != layout.camera_len() {
            return Err(Error::InvalidInput(format!(
                "expected {} pixel noise entries, got {}",
                layout.camera_len(),
                self.sigma_pixel.len()
            )));
        }
        if self.sigma_range.len() != layout.range_len() {
            return Err(Error::InvalidInput(format!(
                "expected {} range noise entries, got {}",
                layout.range_len(),
                self.sigma_range.len()
            )));
        }
        let all_positive = |v: &[f64]| v.iter().all(|s| s.is_finite() && *s > 0.0);
        if !all_positive(&self.sigma_pixel) || !all_positive(&self.sigma_range) {
            return Err(Error::InvalidInput("noise std must be positive".into()));
        }
        if !all_positive(&self.pixel_half_range) || !all_positive(&[self.range_half_range]) {
            return Err(Error::InvalidInput("half ranges W_k must be positive".into()));
        }
        if let Some((feature, vehicle, depth)) = first_cheirality_violation(self) {
            return Err(Error::Cheirality {
                feature,
                vehicle,
                depth,
            });
        }
        Ok(())
    }

    /// Stacked node positions: all features, then all vehicles.
    pub fn stacked_positions(&self) -> Vec<f64> {
        self.features
            .iter()
            .map(|f| f.position)
            .chain(self.vehicles.iter().map(|v| v.position))
            .flat_map(|p| [p.x, p.y, p.z])
            .collect()
    }

    /// Replaces every noise std by a multiple of itself.
    pub fn scale_noise(&mut self, factor: f64) {
        self.sigma_pixel.iter_mut().for_each(|s| *s *= factor);
        self.sigma_range.iter_mut().for_each(|s| *s *= factor);
    }
}

fn first_cheirality_violation(scenario: &Scenario) -> Option<(usize, usize, f64)> {
    for (i, f) in scenario.features.iter().enumerate() {
        for (j, v) in scenario.vehicles.iter().enumerate() {
            let depth = v.depth(&f.position);
            if !(depth > DEPTH_EPSILON) {
                return Some((i, j, depth));
            }
        }
    }
    None
}

/// True iff every feature lies strictly in front of every camera.
pub fn cheirality_check(scenario: &Scenario) -> bool {
    first_cheirality_violation(scenario).is_none()
}

/// Vehicles on a horizontal circle looking at its centre, features uniform in
/// an axis-aligned cuboid centred at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RingConfig {
    pub n_vehicles: usize,
    pub n_features: usize,
    pub radius: f64,
    /// Angular extent over which vehicles are spread (radians); vehicle `j`
    /// sits at angle `arc * j / n_vehicles`.
    pub arc: f64,
    /// Full edge lengths of the feature cuboid (m).
    pub cuboid: [f64; 3],
    pub intrinsics: CameraIntrinsics,
    pub sigma_pixel: f64,
    pub sigma_range: f64,
    pub range_half_range: f64,
    /// Defaults to half the image resolution.
    pub pixel_half_range: Option<[f64; 2]>,
}

impl RingConfig {
    /// Five vehicles on a 5 m circle, seventy features in a 5 x 5 x 2 m
    /// cuboid, `W_3 = 250` m, pixel noise 40 px, range noise 4 m.
    pub fn paper() -> RingConfig {
        RingConfig {
            n_vehicles: 5,
            n_features: 70,
            radius: 5.0,
            arc: 2.0 * PI,
            cuboid: [5.0, 5.0, 2.0],
            intrinsics: CameraIntrinsics::paper(),
            sigma_pixel: 40.0,
            sigma_range: 4.0,
            range_half_range: 250.0,
            pixel_half_range: None,
        }
    }

    /// Two vehicles a quarter turn apart on a 50 m circle observing three
    /// features; small enough for brute-force oracles, and every projection
    /// lands inside the image.
    pub fn toy() -> RingConfig {
        RingConfig {
            n_vehicles: 2,
            n_features: 3,
            radius: 50.0,
            arc: PI,
            cuboid: [1.6, 1.6, 1.0],
            ..RingConfig::paper()
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Scenario> {
        if self.n_vehicles < 2 || self.n_features < 1 {
            return Err(Error::InvalidInput(
                "ring scenario needs >= 2 vehicles and >= 1 feature".into(),
            ));
        }
        let vehicles = (0..self.n_vehicles)
            .map(|j| {
                let angle = self.arc * j as f64 / self.n_vehicles as f64;
                let position =
                    Vector3::new(self.radius * angle.cos(), self.radius * angle.sin(), 0.0);
                VehiclePose::looking_at(position, Vector3::zeros())
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..self.n_features)
            .map(|_| {
                let mut p = Vector3::zeros();
                for (axis, extent) in self.cuboid.iter().enumerate() {
                    p[axis] = (rng.random::<f64>() - 0.5) * extent;
                }
                FeaturePoint { position: p }
            })
            .collect();

        let layout = Layout::new(self.n_features, self.n_vehicles);
        let scenario = Scenario {
            vehicles,
            features,
            intrinsics: self.intrinsics,
            sigma_pixel: vec![self.sigma_pixel; layout.camera_len()],
            sigma_range: vec![self.sigma_range; layout.range_len()],
            pixel_half_range: self
                .pixel_half_range
                .unwrap_or_else(|| self.intrinsics.half_resolution()),
            range_half_range: self.range_half_range,
            seed: Some(seed),
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// The simulation scenario with five vehicles and seventy feature points.
pub fn generate_paper_scenario(seed: u64) -> Scenario {
    RingConfig::paper()
        .generate(seed)
        .expect("paper ring configuration is always valid")
}

/// Two vehicles and three features.
pub fn generate_toy_scenario(seed: u64) -> Scenario {
    RingConfig::toy()
        .generate(seed)
        .expect("toy ring configuration is always valid")
}

// ---------------------------------------------------------------------------
// JSON document form. Rotations are stored as row-major 9-arrays.

#[derive(Serialize, Deserialize)]
struct VehicleDoc {
    position: [f64; 3],
    rotation: [f64; 9],
}

#[derive(Serialize, Deserialize)]
struct NoiseDoc {
    pixel_std: Vec<f64>,
    range_std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RangesDoc {
    pixel_half_width: [f64; 2],
    range_half_width: f64,
}

#[derive(Serialize, Deserialize)]
struct ScenarioDoc {
    vehicles: Vec<VehicleDoc>,
    features: Vec<[f64; 3]>,
    intrinsics: CameraIntrinsics,
    noise: NoiseDoc,
    ranges: RangesDoc,
    seed: Option<u64>,
}

impl From<Scenario> for ScenarioDoc {
    fn from(s: Scenario) -> ScenarioDoc {
        ScenarioDoc {
            vehicles: s
                .vehicles
                .iter()
                .map(|v| {
                    let r = &v.rotation;
                    VehicleDoc {
                        position: v.position.into(),
                        rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
                    }
                })
                .collect(),
            features: s.features.iter().map(|f| f.position.into()).collect(),
            intrinsics: s.intrinsics,
            noise: NoiseDoc {
                pixel_std: s.sigma_pixel,
                range_std: s.sigma_range,
            },
            ranges: RangesDoc {
                pixel_half_width: s.pixel_half_range,
                range_half_width: s.range_half_range,
            },
            seed: s.seed,
        }
    }
}

impl TryFrom<ScenarioDoc> for Scenario {
    type Error = Error;

    fn try_from(doc: ScenarioDoc) -> Result<Scenario> {
        let scenario = Scenario {
            vehicles: doc
                .vehicles
                .iter()
                .map(|v| VehiclePose {
                    position: Vector3::from(v.position),
                    rotation: Matrix3::from_row_slice(&v.rotation),
                })
                .collect(),
            features: doc
                .features
                .iter()
                .map(|p| FeaturePoint {
                    position: Vector3::from(*p),
                })
                .collect(),
            intrinsics: doc.intrinsics,
            sigma_pixel: doc.noise.pixel_std,
            sigma_range: doc.noise.range_std,
            pixel_half_range: doc.ranges.pixel_half_width,
            range_half_range: doc.ranges.range_half_width,
            seed: doc.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}
