//! Toy forest world: spawn lattice, obstacles, target placement, collision and
//! success tests, and task configuration sampling.
//!
//! World frame: `x` and `y` span the ground plane, `z` points up. Heading
//! (yaw) is measured from `+x` towards `+y`, so a positive yaw rate turns the
//! vehicle towards its right-hand side.

mod dynamics;
mod render;

pub use dynamics::{step, ActionCommand, DynamicsParams, RigidState};
pub use render::{cast_ray, project, render, CameraBasis, CameraModel, Hit, Projection, RenderedFrame, Surface, SKY_COLOR};

use crate::geometry::Vec3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Radius of the interception sphere around the target centre.
pub const SUCCESS_RADIUS: f64 = 5.0;
/// Default radius of the vehicle's bounding sphere.
pub const QUAD_RADIUS: f64 = 0.3;
/// Altitude the vehicle spawns at and the demonstrator holds.
pub const NOMINAL_ALTITUDE: f64 = 2.5;
/// Number of spawn/target locations.
pub const SPAWN_COUNT: usize = 25;
/// Ordered (start, target) pairs over the spawn lattice.
pub const PAIR_COUNT: usize = SPAWN_COUNT * (SPAWN_COUNT - 1);
/// Version tag of the world JSON document.
pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("non-finite simulator input: {0}")]
    NonFinite(&'static str),
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("requested {requested} configurations but only {available} ordered pairs exist")]
    TooManyConfigurations { requested: usize, available: usize },
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("world document version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed world document: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Cylinder { radius: f64 },
    Box { half_x: f64, half_y: f64 },
}

/// Obstacle resting on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 2],
    pub height: f64,
    pub color: [u8; 3],
}

impl Obstacle {
    pub fn cylinder(center: [f64; 2], radius: f64, height: f64, color: [u8; 3]) -> Self {
        Self { shape: Shape::Cylinder { radius }, center, height, color }
    }

    pub fn cuboid(center: [f64; 2], half_x: f64, half_y: f64, height: f64, color: [u8; 3]) -> Self {
        Self { shape: Shape::Box { half_x, half_y }, center, height, color }
    }

    /// Euclidean distance from `p` to the solid (zero inside).
    pub fn distance_to(&self, p: Vec3) -> f64 {
        let dz = (p.z - self.height).max(-p.z).max(0.0);
        let dxy = match self.shape {
            Shape::Cylinder { radius } => {
                let dx = p.x - self.center[0];
                let dy = p.y - self.center[1];
                ((dx * dx + dy * dy).sqrt() - radius).max(0.0)
            }
            Shape::Box { half_x, half_y } => {
                let dx = ((p.x - self.center[0]).abs() - half_x).max(0.0);
                let dy = ((p.y - self.center[1]).abs() - half_y).max(0.0);
                (dx * dx + dy * dy).sqrt()
            }
        };
        (dxy * dxy + dz * dz).sqrt()
    }

    /// Largest horizontal reach from the centre.
    pub fn footprint_radius(&self) -> f64 {
        match self.shape {
            Shape::Cylinder { radius } => radius,
            Shape::Box { half_x, half_y } => (half_x * half_x + half_y * half_y).sqrt(),
        }
    }

    /// Point on the vertical axis at the given height, clamped to the solid.
    pub fn axis_point(&self, z: f64) -> Vec3 {
        Vec3::new(self.center[0], self.center[1], z.clamp(0.0, self.height))
    }

    fn validate(&self) -> Result<(), WorldError> {
        let ok = match self.shape {
            Shape::Cylinder { radius } => radius > 0.0,
            Shape::Box { half_x, half_y } => half_x > 0.0 && half_y > 0.0,
        };
        if !ok || !(self.height > 0.0) {
            return Err(WorldError::Invalid(format!("degenerate obstacle {self:?}")));
        }
        Ok(())
    }
}

/// Axis-aligned target vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetBox {
    pub center: Vec3,
    pub half: Vec3,
}

impl TargetBox {
    pub const COLOR: [u8; 3] = [235, 200, 25];

    pub fn top_center(&self) -> Vec3 {
        Vec3::new(self.center.x, self.center.y, self.center.z + self.half.z)
    }

    pub fn distance_to(&self, p: Vec3) -> f64 {
        let d = Vec3::new(
            ((p.x - self.center.x).abs() - self.half.x).max(0.0),
            ((p.y - self.center.y).abs() - self.half.y).max(0.0),
            ((p.z - self.center.z).abs() - self.half.z).max(0.0),
        );
        d.norm()
    }
}

/// Time step, dynamics, camera and episode length shared by every closed-loop
/// run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub dt: f64,
    pub dynamics: DynamicsParams,
    pub camera: CameraModel,
    pub timeout_steps: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { dt: 0.1, dynamics: DynamicsParams::default(), camera: CameraModel::default(), timeout_steps: 600 }
    }
}

/// Generation parameters for [`WorldConfig::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub area_size: f64,
    pub tree_count: usize,
    pub rock_count: usize,
    /// Minimum horizontal gap between an obstacle surface and any spawn point.
    pub spawn_clearance: f64,
    pub target_extent: [f64; 3],
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            area_size: 100.0,
            tree_count: 45,
            rock_count: 10,
            spawn_clearance: 4.0,
            target_extent: [4.0, 2.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub area_size: f64,
    pub spawn_points: Vec<[f64; 2]>,
    pub obstacles: Vec<Obstacle>,
    pub target_extent: [f64; 3],
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct WorldDocument {
    version: u32,
    #[serde(flatten)]
    world: WorldConfig,
}

impl WorldConfig {
    /// The 5x5 lattice inset from the edges by a tenth of the side.
    pub fn spawn_lattice(area_size: f64) -> Vec<[f64; 2]> {
        let step = area_size / 5.0;
        let inset = step / 2.0;
        let mut pts = Vec::with_capacity(SPAWN_COUNT);
        for row in 0..5 {
            for col in 0..5 {
                pts.push([inset + col as f64 * step, inset + row as f64 * step]);
            }
        }
        pts
    }

    /// An empty world (no obstacles) with the standard lattice.
    pub fn empty(area_size: f64, seed: u64) -> Self {
        Self {
            area_size,
            spawn_points: Self::spawn_lattice(area_size),
            obstacles: Vec::new(),
            target_extent: WorldParams::default().target_extent,
            seed,
        }
    }

    /// Forest generated by rejection sampling; deterministic in `seed`.
    pub fn generate(params: &WorldParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spawn_points = Self::spawn_lattice(params.area_size);
        let target_reach = 0.5 * (params.target_extent[0].powi(2) + params.target_extent[1].powi(2)).sqrt();
        let keep_out = params.spawn_clearance.max(target_reach + 1.0);
        let mut obstacles: Vec<Obstacle> = Vec::new();
        let total = params.tree_count + params.rock_count;
        let mut attempts = 0;
        while obstacles.len() < total && attempts < 100_000 {
            attempts += 1;
            let is_tree = obstacles.len() < params.tree_count;
            let center = [
                rng.random_range(0.0..params.area_size),
                rng.random_range(0.0..params.area_size),
            ];
            let candidate = if is_tree {
                let shade = rng.random_range(0..40u8);
                Obstacle::cylinder(
                    center,
                    rng.random_range(0.3..0.8),
                    rng.random_range(6.0..14.0),
                    [90 + shade, 60 + shade / 2, 35],
                )
            } else {
                let grey = rng.random_range(100..150u8);
                Obstacle::cuboid(
                    center,
                    rng.random_range(0.4..1.2),
                    rng.random_range(0.4..1.2),
                    rng.random_range(1.0..3.5),
                    [grey, grey, grey.saturating_add(8)],
                )
            };
            let reach = candidate.footprint_radius();
            let clear_of_spawns = spawn_points.iter().all(|s| {
                let d = ((s[0] - center[0]).powi(2) + (s[1] - center[1]).powi(2)).sqrt();
                d - reach >= keep_out
            });
            let clear_of_others = obstacles.iter().all(|o| {
                let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
                d - reach - o.footprint_radius() >= 2.0
            });
            if clear_of_spawns && clear_of_others {
                obstacles.push(candidate);
            }
        }
        Self {
            area_size: params.area_size,
            spawn_points,
            obstacles,
            target_extent: params.target_extent,
            seed,
        }
    }

    /// The world every default experiment runs in.
    pub fn default_world() -> Self {
        Self::generate(&WorldParams::default(), 7)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.spawn_points.len() != SPAWN_COUNT {
            return Err(WorldError::Invalid(format!(
                "expected {SPAWN_COUNT} spawn points, found {}",
                self.spawn_points.len()
            )));
        }
        let reach = 0.5 * (self.target_extent[0].powi(2) + self.target_extent[1].powi(2)).sqrt();
        for o in &self.obstacles {
            o.validate()?;
            for (i, s) in self.spawn_points.iter().enumerate() {
                let p = Vec3::new(s[0], s[1], 0.0);
                if o.distance_to(p) <= reach {
                    return Err(WorldError::Invalid(format!("spawn point {i} overlaps an obstacle")));
                }
            }
        }
        Ok(())
    }

    pub fn target_box(&self, spawn_index: usize) -> TargetBox {
        let s = self.spawn_points[spawn_index];
        let half = Vec3::new(self.target_extent[0] / 2.0, self.target_extent[1] / 2.0, self.target_extent[2] / 2.0);
        TargetBox { center: Vec3::new(s[0], s[1], half.z), half }
    }

    pub fn scene(&self, config: &Configuration) -> Scene<'_> {
        Scene { world: self, target: Some(self.target_box(config.target_index)) }
    }

    pub fn start_state(&self, config: &Configuration) -> RigidState {
        let s = self.spawn_points[config.start_index];
        RigidState::at(Vec3::new(s[0], s[1], NOMINAL_ALTITUDE), config.initial_yaw)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.area_size && p.y <= self.area_size && p.z >= 0.0
    }

    /// Stable 64-bit digest of the world's canonical JSON form.
    pub fn hash(&self) -> u64 {
        twox_hash::XxHash64::oneshot(0, self.to_json().as_bytes())
    }

    pub fn to_json(&self) -> String {
        let doc = WorldDocument { version: WORLD_FORMAT_VERSION, world: self.clone() };
        serde_json::to_string_pretty(&doc).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != WORLD_FORMAT_VERSION {
            return Err(WorldError::Version { found: version, expected: WORLD_FORMAT_VERSION });
        }
        let doc: WorldDocument = serde_json::from_value(value)?;
        doc.world.validate()?;
        Ok(doc.world)
    }
}

/// Geometry visible to the camera: the static world plus the placed target.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub world: &'a WorldConfig,
    pub target: Option<TargetBox>,
}

impl<'a> Scene<'a> {
    pub fn without_target(world: &'a WorldConfig) -> Self {
        Self { world, target: None }
    }
}

/// One task instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub start_index: usize,
    pub target_index: usize,
    pub initial_yaw: f64,
}

impl Configuration {
    /// Start-to-target straight-line distance.
    pub fn straight_line(&self, world: &WorldConfig) -> f64 {
        (world.target_box(self.target_index).center - world.start_state(self).position).norm()
    }
}

/// Draws `count` distinct ordered (start, target) pairs without replacement,
/// each with a uniformly sampled initial heading.
pub fn sample_configurations(world: &WorldConfig, count: usize, seed: u64) -> Result<Vec<Configuration>, WorldError> {
    let n = world.spawn_points.len();
    let available = n * n.saturating_sub(1);
    if count > available {
        return Err(WorldError::TooManyConfigurations { requested: count, available });
    }
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    Ok(pairs
        .into_iter()
        .take(count)
        .map(|(start_index, target_index)| Configuration {
            start_index,
            target_index,
            initial_yaw: rng.random_range(-PI..PI),
        })
        .collect())
}

/// True iff the vehicle's bounding sphere strictly penetrates an obstacle, the
/// target, or the ground while moving.
pub fn check_collision(state: &RigidState, scene: &Scene<'_>, quad_radius: f64) -> bool {
    let p = state.position;
    let moving = state.linear_velocity.norm() > 0.0;
    if p.z < quad_radius && moving {
        return true;
    }
    if let Some(t) = &scene.target {
        if t.distance_to(p) < quad_radius {
            return true;
        }
    }
    scene.world.obstacles.iter().any(|o| o.distance_to(p) < quad_radius)
}

/// True iff the vehicle is within [`SUCCESS_RADIUS`] of the target centre.
pub fn is_success(state: &RigidState, config: &Configuration, world: &WorldConfig) -> bool {
    (state.position - world.target_box(config.target_index).center).norm() <= SUCCESS_RADIUS
}
