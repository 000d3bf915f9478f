//! Scripted expert: search-then-approach flight with obstacle avoidance, and
//! a synthetic gaze stream following four fixation patterns.

use crate::data::{Outcome, Source, StepRecord, Trajectory};
use crate::features::kinematic_features;
use crate::geometry::{wrap_angle, Vec3};
use crate::world::{
    cast_ray, check_collision, is_success, project, render, step, ActionCommand, CameraBasis, CameraModel,
    Configuration, RigidState, Scene, SimSettings, Surface, WorldConfig, WorldError, NOMINAL_ALTITUDE, QUAD_RADIUS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    /// Normalised yaw command while scanning.
    pub search_yaw_rate: f64,
    /// Depth below which the avoidance term engages, metres.
    pub avoid_distance: f64,
    /// Obstacles closer than this attract gaze, metres.
    pub gaze_obstacle_distance: f64,
    /// Saccade dwell per fixation, seconds.
    pub saccade_dwell: f64,
    /// Horizontal gaze offset toward the turn direction.
    pub lead_fraction: f64,
    pub jitter_sigma: f64,
    pub jitter: bool,
    /// Steps the target stays "seen" after leaving view.
    pub memory_steps: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            search_yaw_rate: 0.6,
            avoid_distance: 6.0,
            gaze_obstacle_distance: 12.0,
            saccade_dwell: 0.3,
            lead_fraction: 0.25,
            jitter_sigma: 0.02,
            jitter: true,
            memory_steps: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OraclePhase {
    Search,
    Approach,
    Done,
}

impl OraclePhase {
    pub fn tag(self) -> u8 {
        match self {
            OraclePhase::Search => 0,
            OraclePhase::Approach => 1,
            OraclePhase::Done => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GazePattern {
    MotionLeading,
    TargetFixation,
    Saccade,
    ObstacleFixation,
}

impl GazePattern {
    pub const ALL: [GazePattern; 4] =
        [GazePattern::MotionLeading, GazePattern::TargetFixation, GazePattern::Saccade, GazePattern::ObstacleFixation];

    pub fn tag(self) -> u8 {
        match self {
            GazePattern::MotionLeading => 0,
            GazePattern::TargetFixation => 1,
            GazePattern::Saccade => 2,
            GazePattern::ObstacleFixation => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

/// Normalised image coordinates, `(0, 0)` top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    pub u: f64,
    pub v: f64,
}

impl GazePoint {
    pub const CENTER: GazePoint = GazePoint { u: 0.5, v: 0.5 };

    pub fn clamped(u: f64, v: f64) -> Self {
        Self { u: u.clamp(0.0, 1.0), v: v.clamp(0.0, 1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct GazePatternState {
    pub active_pattern: GazePattern,
    /// Obstacle index currently fixated during a saccade sequence.
    pub saccade_anchor_index: usize,
    pub dwell_remaining: f64,
    pub jitter_rng: ChaCha8Rng,
}

impl GazePatternState {
    pub fn new(seed: u64) -> Self {
        Self {
            active_pattern: GazePattern::MotionLeading,
            saccade_anchor_index: 0,
            dwell_remaining: 0.0,
            jitter_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6761_7a65),
        }
    }
}

const DWELL_TOLERANCE: f64 = 1e-9;
const VISIT_RADIUS: f64 = 6.0;
const STEER_GAIN: f64 = 1.3;
const ALTITUDE_GAIN: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
enum SearchMode {
    Scan { swept: f64 },
    Travel { goal: usize },
}

/// Stateful expert for one configuration.
#[derive(Debug, Clone)]
pub struct Oracle<'w> {
    pub params: OracleParams,
    world: &'w WorldConfig,
    config: Configuration,
    camera: CameraModel,
    phase: OraclePhase,
    steps_since_seen: Option<usize>,
    visited: Vec<bool>,
    mode: SearchMode,
    last_yaw: Option<f64>,
}

impl<'w> Oracle<'w> {
    pub fn new(world: &'w WorldConfig, config: Configuration, params: OracleParams, camera: CameraModel) -> Self {
        let mut visited = vec![false; world.spawn_points.len()];
        visited[config.start_index] = true;
        Self {
            params,
            world,
            config,
            camera,
            phase: OraclePhase::Search,
            steps_since_seen: None,
            visited,
            mode: SearchMode::Scan { swept: 0.0 },
            last_yaw: None,
        }
    }

    pub fn phase(&self) -> OraclePhase {
        self.phase
    }

    fn scene(&self) -> Scene<'w> {
        self.world.scene(&self.config)
    }

    pub fn target_visible(&self, state: &RigidState) -> bool {
        let scene = self.scene();
        let top = scene.target.expect("scene has a target").top_center();
        project(top, state, &self.camera, &scene).visible
    }

    /// Updates and returns the phase for `state`.
    pub fn observe(&mut self, state: &RigidState) -> OraclePhase {
        if is_success(state, &self.config, self.world) {
            self.phase = OraclePhase::Done;
            return self.phase;
        }
        if self.target_visible(state) {
            self.steps_since_seen = Some(0);
        } else if let Some(n) = self.steps_since_seen.as_mut() {
            *n += 1;
        }
        self.phase = match self.steps_since_seen {
            Some(n) if n <= self.params.memory_steps => OraclePhase::Approach,
            _ => OraclePhase::Search,
        };
        self.phase
    }

    /// Velocity command for `state` in the current phase.
    pub fn action(&mut self, state: &RigidState) -> ActionCommand {
        let swept = self.last_yaw.map_or(0.0, |y| wrap_angle(state.yaw - y).abs());
        self.last_yaw = Some(state.yaw);
        let p = state.position;
        for (i, s) in self.world.spawn_points.iter().enumerate() {
            if (s[0] - p.x).hypot(s[1] - p.y) < VISIT_RADIUS {
                self.visited[i] = true;
            }
        }
        let vertical = (ALTITUDE_GAIN * (NOMINAL_ALTITUDE - p.z)).clamp(-1.0, 1.0);
        let target = self.world.target_box(self.config.target_index).center;
        let (mut forward, mut lateral, mut yaw) = match self.phase {
            OraclePhase::Done => return ActionCommand::ZERO,
            OraclePhase::Approach => steer(state, target, 8.0),
            OraclePhase::Search if self.steps_since_seen.is_some() => steer(state, target, 8.0),
            OraclePhase::Search => self.search(state, swept),
        };
        if let Some((d_min, side)) = self.nearest_obstacle_ahead(state) {
            let s = 1.0 - d_min / self.params.avoid_distance;
            lateral += side * (0.3 + 0.7 * s);
            yaw += side * 0.5 * s;
            forward *= 0.3 + 0.7 * (1.0 - s);
        }
        forward = forward.clamp(-1.0, 1.0);
        lateral = lateral.clamp(-1.0, 1.0);
        yaw = yaw.clamp(-1.0, 1.0);
        ActionCommand::new(forward, lateral, vertical, yaw)
    }

    fn search(&mut self, state: &RigidState, swept: f64) -> (f64, f64, f64) {
        loop {
            match self.mode {
                SearchMode::Scan { swept: total } => {
                    let total = total + swept;
                    if total < TAU {
                        self.mode = SearchMode::Scan { swept: total };
                        return (0.0, 0.0, self.params.search_yaw_rate);
                    }
                    match self.nearest_unvisited(state.position) {
                        Some(goal) => self.mode = SearchMode::Travel { goal },
                        None => {
                            self.visited.iter_mut().for_each(|v| *v = false);
                            self.mode = SearchMode::Scan { swept: 0.0 };
                            return (0.0, 0.0, self.params.search_yaw_rate);
                        }
                    }
                }
                SearchMode::Travel { goal } => {
                    if self.visited[goal] {
                        self.mode = SearchMode::Scan { swept: 0.0 };
                        return (0.0, 0.0, self.params.search_yaw_rate);
                    }
                    let s = self.world.spawn_points[goal];
                    return steer(state, Vec3::new(s[0], s[1], NOMINAL_ALTITUDE), 6.0);
                }
            }
        }
    }

    fn nearest_unvisited(&self, p: Vec3) -> Option<usize> {
        self.world
            .spawn_points
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.visited[*i])
            .min_by(|(_, a), (_, b)| {
                let da = (a[0] - p.x).hypot(a[1] - p.y);
                let db = (b[0] - p.x).hypot(b[1] - p.y);
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
    }

    /// Closest obstacle depth in the central third of the image and the side
    /// (+1 right, -1 left) to move toward to avoid it.
    fn nearest_obstacle_ahead(&self, state: &RigidState) -> Option<(f64, f64)> {
        let cam = &self.camera;
        let basis = CameraBasis::from_state(state);
        let scene = Scene::without_target(self.world);
        let (c0, c1) = (cam.width / 3, cam.width - cam.width / 3);
        let (r0, r1) = (cam.height / 3, cam.height - cam.height / 3);
        let mut d_min = f64::INFINITY;
        let mut col_sum = 0.0;
        let mut count = 0usize;
        for row in r0..r1 {
            for col in c0..c1 {
                let dir = basis.pixel_ray(cam, col, row);
                if let Some(hit) = cast_ray(&scene, basis.origin, dir) {
                    if matches!(hit.surface, Surface::Obstacle(_)) && hit.distance < self.params.avoid_distance {
                        d_min = d_min.min(hit.distance);
                        col_sum += col as f64 + 0.5;
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return None;
        }
        let centroid = col_sum / count as f64;
        let side = if centroid <= cam.width as f64 / 2.0 { 1.0 } else { -1.0 };
        Some((d_min, side))
    }
}

/// Proportional heading control toward `goal`; forward speed falls off with
/// heading error and within `slow_radius` of the goal.
fn steer(state: &RigidState, goal: Vec3, slow_radius: f64) -> (f64, f64, f64) {
    let d = goal - state.position;
    let dist = d.x.hypot(d.y);
    let err = wrap_angle(d.y.atan2(d.x) - state.yaw);
    let yaw = (STEER_GAIN * err).clamp(-1.0, 1.0);
    let speed = (dist / slow_radius).clamp(0.3, 1.0);
    let align = (1.0 - err.abs() / 0.8).max(0.0);
    (speed * align, 0.0, yaw)
}

/// Oracle-side view of the world needed to place gaze.
#[derive(Debug, Clone, Copy)]
pub struct GazeContext<'a> {
    pub world: &'a WorldConfig,
    pub config: &'a Configuration,
    pub camera: &'a CameraModel,
    pub params: &'a OracleParams,
}

/// Picks the active pattern and the gaze point for one step. `yaw_command` is
/// the yaw-rate component of the action issued at this step.
pub fn oracle_gaze(
    ctx: &GazeContext<'_>,
    state: &RigidState,
    phase: OraclePhase,
    yaw_command: f64,
    mut ps: GazePatternState,
    dt: f64,
) -> (GazePoint, GazePatternState) {
    let scene = ctx.world.scene(ctx.config);
    let target_top = scene.target.expect("scene has a target").top_center();
    let tp = project(target_top, state, ctx.camera, &scene);
    let nearby: Vec<usize> = ctx
        .world
        .obstacles
        .iter()
        .enumerate()
        .filter(|(_, o)| o.distance_to(state.position) <= ctx.params.gaze_obstacle_distance)
        .filter(|(_, o)| project(o.axis_point(state.position.z), state, ctx.camera, &scene).in_frustum)
        .map(|(i, _)| i)
        .collect();
    let obstacle_gaze = |i: usize| {
        let p = project(ctx.world.obstacles[i].axis_point(state.position.z), state, ctx.camera, &scene);
        (p.u, p.v)
    };

    let previous = ps.active_pattern;
    let (u, v) = if phase == OraclePhase::Approach && tp.visible {
        ps.active_pattern = GazePattern::TargetFixation;
        (tp.u, tp.v)
    } else if nearby.len() >= 2 {
        ps.active_pattern = GazePattern::Saccade;
        if previous != GazePattern::Saccade || !nearby.contains(&ps.saccade_anchor_index) {
            let next = nearby.iter().copied().find(|&i| i > ps.saccade_anchor_index && previous == GazePattern::Saccade);
            ps.saccade_anchor_index = next.unwrap_or(nearby[0]);
            ps.dwell_remaining = ctx.params.saccade_dwell;
        } else {
            ps.dwell_remaining -= dt;
            if ps.dwell_remaining <= DWELL_TOLERANCE {
                let pos = nearby.iter().position(|&i| i == ps.saccade_anchor_index).unwrap_or(0);
                ps.saccade_anchor_index = nearby[(pos + 1) % nearby.len()];
                ps.dwell_remaining += ctx.params.saccade_dwell;
            }
        }
        obstacle_gaze(ps.saccade_anchor_index)
    } else if nearby.len() == 1 {
        ps.active_pattern = GazePattern::ObstacleFixation;
        obstacle_gaze(nearby[0])
    } else {
        ps.active_pattern = GazePattern::MotionLeading;
        let sign = if yaw_command > 0.0 {
            1.0
        } else if yaw_command < 0.0 {
            -1.0
        } else {
            0.0
        };
        (0.5 + ctx.params.lead_fraction * sign, 0.5)
    };
    ps.dwell_remaining = ps.dwell_remaining.max(0.0);
    let (mut u, mut v) = (u, v);
    if ctx.params.jitter && ctx.params.jitter_sigma > 0.0 {
        let n = Normal::new(0.0, ctx.params.jitter_sigma).expect("positive sigma");
        u += n.sample(&mut ps.jitter_rng);
        v += n.sample(&mut ps.jitter_rng);
    }
    (GazePoint::clamped(u, v), ps)
}

/// Flies the oracle from the configuration's start until success or timeout
/// and records every step.
pub fn run_demonstration(
    config: &Configuration,
    world: &WorldConfig,
    seed: u64,
    params: &OracleParams,
    sim: &SimSettings,
) -> Result<Trajectory, WorldError> {
    let scene = world.scene(config);
    let mut oracle = Oracle::new(world, *config, *params, sim.camera);
    let ctx = GazeContext { world, config, camera: &sim.camera, params };
    let mut gaze_state = GazePatternState::new(seed);
    let mut state = world.start_state(config);
    let mut steps = Vec::new();
    for t in 0..sim.timeout_steps {
        let phase = oracle.observe(&state);
        if phase == OraclePhase::Done {
            break;
        }
        let frame = render(&state, &scene, &sim.camera);
        let action = oracle.action(&state);
        let (gaze, gs) = oracle_gaze(&ctx, &state, phase, action.yaw_rate, gaze_state, sim.dt);
        gaze_state = gs;
        steps.push(StepRecord {
            index: t as u32,
            depth: frame.depth_f32(),
            rgb: frame.rgb,
            kin: kinematic_features(&state).map(|v| v as f32),
            action: action.to_array().map(|v| v as f32),
            gaze: [gaze.u as f32, gaze.v as f32],
            collision: check_collision(&state, &scene, QUAD_RADIUS),
            phase: phase.tag(),
            pattern: gaze_state.active_pattern.tag(),
        });
        state = step(&state, &action, sim.dt, &sim.dynamics)?;
    }
    let outcome = if is_success(&state, config, world) { Outcome::Success } else { Outcome::Timeout };
    Ok(Trajectory {
        source: Source::Oracle,
        outcome,
        seed,
        config: *config,
        world_hash: world.hash(),
        width: sim.camera.width as u16,
        height: sim.camera.height as u16,
        final_position: state.position.to_array(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Obstacle;

    fn quiet() -> OracleParams {
        OracleParams { jitter: false, ..Default::default() }
    }

    #[test]
    fn dead_ahead_target_flies_straight() {
        let w = WorldConfig::empty(100.0, 0);
        // start (10, 50), target (30, 50): 20 m along +x
        let cfg = Configuration { start_index: 10, target_index: 11, initial_yaw: 0.0 };
        let mut o = Oracle::new(&w, cfg, quiet(), CameraModel::default());
        let s = w.start_state(&cfg);
        assert_eq!(o.observe(&s), OraclePhase::Approach);
        let a = o.action(&s);
        assert!(a.forward > 0.0 && a.yaw_rate.abs() < 0.05, "{a:?}");
    }

    #[test]
    fn avoids_obstacle_ahead() {
        let mut w = WorldConfig::empty(100.0, 0);
        // slightly left of the heading: push right
        w.obstacles.push(Obstacle::cylinder([13.0, 49.7], 0.6, 10.0, [100, 70, 40]));
        let cfg = Configuration { start_index: 10, target_index: 14, initial_yaw: 0.0 };
        let mut o = Oracle::new(&w, cfg, quiet(), CameraModel::default());
        let s = w.start_state(&cfg);
        o.observe(&s);
        let a = o.action(&s);
        assert!(a.lateral > 0.0 && a.yaw_rate >= 0.0, "{a:?}");
        w.obstacles[0].center = [13.0, 50.3];
        let mut o = Oracle::new(&w, cfg, quiet(), CameraModel::default());
        o.observe(&s);
        let a = o.action(&s);
        assert!(a.lateral < 0.0, "{a:?}");
    }

    #[test]
    fn within_success_radius_is_done() {
        let w = WorldConfig::empty(100.0, 0);
        let cfg = Configuration { start_index: 10, target_index: 11, initial_yaw: 0.0 };
        let mut o = Oracle::new(&w, cfg, quiet(), CameraModel::default());
        let s = RigidState::at(Vec3::new(27.0, 50.0, 2.5), 0.0);
        assert_eq!(o.observe(&s), OraclePhase::Done);
        assert_eq!(o.action(&s), ActionCommand::ZERO);
    }

    #[test]
    fn target_fixation_matches_projection() {
        let w = WorldConfig::empty(100.0, 0);
        let cfg = Configuration { start_index: 10, target_index: 11, initial_yaw: 0.2 };
        let params = quiet();
        let cam = CameraModel::default();
        let ctx = GazeContext { world: &w, config: &cfg, camera: &cam, params: &params };
        let s = w.start_state(&cfg);
        let (g, ps) = oracle_gaze(&ctx, &s, OraclePhase::Approach, 0.3, GazePatternState::new(0), 0.1);
        let p = project(w.target_box(11).top_center(), &s, &cam, &w.scene(&cfg));
        assert!((g.u - p.u).abs() < 1e-6 && (g.v - p.v).abs() < 1e-6);
        assert_eq!(ps.active_pattern, GazePattern::TargetFixation);
    }

    #[test]
    fn motion_leading_offsets_toward_turn() {
        let w = WorldConfig::empty(100.0, 0);
        let cfg = Configuration { start_index: 10, target_index: 11, initial_yaw: 3.0 };
        let params = quiet();
        let cam = CameraModel::default();
        let ctx = GazeContext { world: &w, config: &cfg, camera: &cam, params: &params };
        let s = w.start_state(&cfg);
        let (g, _) = oracle_gaze(&ctx, &s, OraclePhase::Search, 0.6, GazePatternState::new(0), 0.1);
        assert_eq!((g.u, g.v), (0.75, 0.5));
        let (g, _) = oracle_gaze(&ctx, &s, OraclePhase::Search, -0.2, GazePatternState::new(0), 0.1);
        assert_eq!((g.u, g.v), (0.25, 0.5));
    }

    #[test]
    fn saccade_alternates_every_dwell() {
        let mut w = WorldConfig::empty(100.0, 0);
        w.obstacles.push(Obstacle::cylinder([60.0, 55.0], 0.5, 10.0, [100, 70, 40]));
        w.obstacles.push(Obstacle::cylinder([58.0, 45.0], 0.5, 10.0, [100, 70, 40]));
        let cfg = Configuration { start_index: 0, target_index: 1, initial_yaw: 0.0 };
        let params = quiet();
        let cam = CameraModel::default();
        let ctx = GazeContext { world: &w, config: &cfg, camera: &cam, params: &params };
        let s = RigidState::at(Vec3::new(50.0, 50.0, 2.5), 0.0);
        let mut ps = GazePatternState::new(0);
        let mut anchors = Vec::new();
        for _ in 0..12 {
            let (g, next) = oracle_gaze(&ctx, &s, OraclePhase::Search, 0.0, ps, 0.1);
            ps = next;
            assert_eq!(ps.active_pattern, GazePattern::Saccade);
            let expect = project(w.obstacles[ps.saccade_anchor_index].axis_point(2.5), &s, &cam, &w.scene(&cfg));
            assert!((g.u - expect.u).abs() < 1e-12);
            anchors.push(ps.saccade_anchor_index);
        }
        assert_eq!(anchors, vec![0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn demonstration_in_empty_world_succeeds_quickly_and_repeats() {
        let w = WorldConfig::empty(100.0, 0);
        let cfg = Configuration { start_index: 10, target_index: 11, initial_yaw: 0.0 };
        let sim = SimSettings::default();
        let t = run_demonstration(&cfg, &w, 3, &OracleParams::default(), &sim).unwrap();
        assert_eq!(t.outcome, Outcome::Success);
        assert!(t.steps.len() < 100);
        t.validate().unwrap();
        let again = run_demonstration(&cfg, &w, 3, &OracleParams::default(), &sim).unwrap();
        assert_eq!(t.to_bytes(), again.to_bytes());
    }
}
