//! Closed-loop rollouts, navigation metrics, seed aggregation and the paired
//! signed-rank test.

use crate::features::{hog_f32, kinematic_features, stack_frames, FeatureError, FrameBuffer, STACK_DELTA};
use crate::oracle::{GazePoint, Oracle, OracleParams};
use crate::policy::{PolicyError, PolicyInput, PolicyNetwork};
use crate::world::{
    check_collision, is_success, render, step, ActionCommand, Configuration, RenderedFrame, RigidState, SimSettings,
    WorldConfig, WorldError, QUAD_RADIUS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
}

/// Rollout protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSettings {
    pub repeats: usize,
    /// Standard deviation of the initial position perturbation, metres.
    pub position_sigma: f64,
    /// Standard deviation of the initial yaw perturbation, degrees.
    pub yaw_sigma_deg: f64,
    /// Ticks each controller decision is held for.
    pub action_repeat: usize,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self { repeats: 5, position_sigma: 0.1, yaw_sigma_deg: 1.0, action_repeat: 1 }
    }
}

impl RolloutSettings {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.repeats == 0 || self.action_repeat == 0 {
            return Err(EvalError::Invalid("repeats and action_repeat must be positive".into()));
        }
        if !(self.position_sigma >= 0.0 && self.yaw_sigma_deg >= 0.0) {
            return Err(EvalError::Invalid("perturbation sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// What a controller sees at one tick.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub tick: usize,
    pub state: &'a RigidState,
    /// Present when [`Controller::needs_frames`] is true.
    pub frame: Option<&'a RenderedFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: ActionCommand,
    pub gaze: Option<GazePoint>,
}

impl Decision {
    pub const HOVER: Decision = Decision { action: ActionCommand::ZERO, gaze: None };
}

pub trait Controller {
    fn needs_frames(&self) -> bool {
        true
    }

    /// Called before the first tick of every rollout.
    fn begin(&mut self, config: &Configuration, seed: u64) -> Result<(), EvalError>;

    fn act(&mut self, obs: &Observation<'_>) -> Result<Decision, EvalError>;

    /// Called on ticks where the previous decision is held.
    fn observe(&mut self, _obs: &Observation<'_>) -> Result<(), EvalError> {
        Ok(())
    }
}

/// Always commands zero velocity.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn needs_frames(&self) -> bool {
        false
    }

    fn begin(&mut self, _: &Configuration, _: u64) -> Result<(), EvalError> {
        Ok(())
    }

    fn act(&mut self, _: &Observation<'_>) -> Result<Decision, EvalError> {
        Ok(Decision::HOVER)
    }
}

/// The privileged demonstrator driving the vehicle directly.
pub struct OracleController<'w> {
    world: &'w WorldConfig,
    params: OracleParams,
    sim: SimSettings,
    oracle: Option<Oracle<'w>>,
}

impl<'w> OracleController<'w> {
    pub fn new(world: &'w WorldConfig, params: OracleParams, sim: SimSettings) -> Self {
        Self { world, params, sim, oracle: None }
    }
}

impl Controller for OracleController<'_> {
    fn needs_frames(&self) -> bool {
        false
    }

    fn begin(&mut self, config: &Configuration, _: u64) -> Result<(), EvalError> {
        self.oracle = Some(Oracle::new(self.world, *config, self.params, self.sim.camera));
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<Decision, EvalError> {
        let oracle = self.oracle.as_mut().ok_or_else(|| EvalError::Invalid("act before begin".into()))?;
        oracle.observe(obs.state);
        Ok(Decision { action: oracle.action(obs.state), gaze: None })
    }
}

/// Runs a trained network on rendered observations.
#[derive(Debug, Clone)]
pub struct PolicyController {
    net: PolicyNetwork<f32>,
    frames: FrameBuffer,
}

impl PolicyController {
    pub fn new(net: PolicyNetwork<f32>) -> Self {
        Self { net, frames: FrameBuffer::new(STACK_DELTA + 1) }
    }

    pub fn network(&self) -> &PolicyNetwork<f32> {
        &self.net
    }

    fn record<'a>(&mut self, obs: &Observation<'a>) -> Result<(usize, &'a RenderedFrame), EvalError> {
        let frame = obs.frame.ok_or_else(|| EvalError::Invalid("policy controller needs rendered frames".into()))?;
        let c = &self.net.config;
        if frame.width != c.width || frame.height != c.height {
            return Err(EvalError::Invalid(format!(
                "camera renders {}x{}, network expects {}x{}",
                frame.width, frame.height, c.width, c.height
            )));
        }
        Ok((self.frames.push(frame.rgb.clone()), frame))
    }
}

impl Controller for PolicyController {
    fn begin(&mut self, _: &Configuration, _: u64) -> Result<(), EvalError> {
        self.frames.clear();
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<Decision, EvalError> {
        let (t, frame) = self.record(obs)?;
        let (w, h, hog_params) = (frame.width, frame.height, self.net.config.hog);
        let hog = hog_f32(&frame.depth_f32(), w, h, &hog_params)?;
        let stacked = stack_frames(&self.frames, t, STACK_DELTA)?;
        let kin = kinematic_features(obs.state).map(|v| v as f32);
        let (a, g) = self.net.predict(&PolicyInput { batch: 1, frames: &stacked, hog: &hog, kin: &kin })?;
        Ok(Decision {
            action: ActionCommand::new(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64),
            gaze: Some(GazePoint { u: g[0] as f64, v: g[1] as f64 }),
        })
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<(), EvalError> {
        self.record(obs).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub configuration: Configuration,
    pub repeat: usize,
    pub success: bool,
    pub collided: bool,
    /// Sum of per-tick position deltas, metres.
    pub path_length: f64,
    /// Start-to-target distance, metres.
    pub straight_line: f64,
    pub steps: usize,
    pub final_distance: f64,
}

/// Seed of the perturbation stream for one `(configuration, repeat)` pair.
pub fn rollout_seed(seed: u64, config: &Configuration, repeat: usize) -> u64 {
    let mut bytes = Vec::with_capacity(40);
    for v in [seed, config.start_index as u64, config.target_index as u64, config.initial_yaw.to_bits(), repeat as u64] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    twox_hash::XxHash64::oneshot(0x726f_6c6c, &bytes)
}

/// One closed-loop episode from a perturbed start.
pub fn rollout_once(
    ctrl: &mut dyn Controller,
    world: &WorldConfig,
    config: &Configuration,
    repeat: usize,
    seed: u64,
    settings: &RolloutSettings,
    sim: &SimSettings,
) -> Result<RolloutResult, EvalError> {
    settings.validate()?;
    let stream = rollout_seed(seed, config, repeat);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let pos_noise = Normal::new(0.0, settings.position_sigma).map_err(|e| EvalError::Invalid(e.to_string()))?;
    let yaw_noise = Normal::new(0.0, settings.yaw_sigma_deg.to_radians()).map_err(|e| EvalError::Invalid(e.to_string()))?;
    let scene = world.scene(config);
    let mut state = world.start_state(config);
    state.position.x += pos_noise.sample(&mut rng);
    state.position.y += pos_noise.sample(&mut rng);
    state.position.z += pos_noise.sample(&mut rng);
    state.yaw = crate::geometry::wrap_angle(state.yaw + yaw_noise.sample(&mut rng));

    ctrl.begin(config, stream)?;
    let render_frames = ctrl.needs_frames();
    let mut collided = check_collision(&state, &scene, QUAD_RADIUS);
    let mut path_length = 0.0;
    let mut decision = Decision::HOVER;
    let mut ticks = 0;
    while ticks < sim.timeout_steps && !is_success(&state, config, world) {
        let frame = render_frames.then(|| render(&state, &scene, &sim.camera));
        let obs = Observation { tick: ticks, state: &state, frame: frame.as_ref() };
        if ticks % settings.action_repeat == 0 {
            decision = ctrl.act(&obs)?;
        } else {
            ctrl.observe(&obs)?;
        }
        let next = step(&state, &decision.action, sim.dt, &sim.dynamics)?;
        path_length += (next.position - state.position).norm();
        state = next;
        collided |= check_collision(&state, &scene, QUAD_RADIUS);
        ticks += 1;
    }
    Ok(RolloutResult {
        configuration: *config,
        repeat,
        success: is_success(&state, config, world),
        collided,
        path_length,
        straight_line: config.straight_line(world),
        steps: ticks,
        final_distance: world.target_box(config.target_index).distance_to(state.position),
    })
}

/// `settings.repeats` episodes of one configuration.
pub fn rollout(
    ctrl: &mut dyn Controller,
    world: &WorldConfig,
    config: &Configuration,
    seed: u64,
    settings: &RolloutSettings,
    sim: &SimSettings,
) -> Result<Vec<RolloutResult>, EvalError> {
    (0..settings.repeats).map(|r| rollout_once(ctrl, world, config, r, seed, settings, sim)).collect()
}

/// Every configuration in order, `settings.repeats` times each.
pub fn evaluate(
    ctrl: &mut dyn Controller,
    world: &WorldConfig,
    configs: &[Configuration],
    seed: u64,
    settings: &RolloutSettings,
    sim: &SimSettings,
) -> Result<Vec<RolloutResult>, EvalError> {
    let mut out = Vec::with_capacity(configs.len() * settings.repeats);
    for c in configs {
        out.extend(rollout(ctrl, world, c, seed, settings, sim)?);
    }
    Ok(out)
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

/// Successful rollouts as a percentage of all rollouts.
pub fn completion_rate(results: &[RolloutResult]) -> f64 {
    percent(results.iter().filter(|r| r.success).count(), results.len())
}

/// Rollouts with at least one collision as a percentage of all rollouts.
pub fn collision_rate(results: &[RolloutResult]) -> f64 {
    percent(results.iter().filter(|r| r.collided).count(), results.len())
}

/// Success weighted by path length, averaged over all rollouts.
pub fn spl(results: &[RolloutResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for r in results {
        if !(r.straight_line > 0.0) {
            return Err(EvalError::Invalid(format!("straight-line distance {} must be positive", r.straight_line)));
        }
        if r.success {
            sum += r.straight_line / r.path_length.max(r.straight_line);
        }
    }
    Ok(sum / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub completion: f64,
    pub collision: f64,
    pub spl: f64,
}

impl SeedMetrics {
    pub fn from_results(results: &[RolloutResult]) -> Result<Self, EvalError> {
        Ok(Self { completion: completion_rate(results), collision: collision_rate(results), spl: spl(results)? })
    }
}

/// Per-seed values with their mean and standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero for a single value.
    pub stderr: f64,
}

impl Stat {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / n };
        let stderr = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Self { values, mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub completion: Stat,
    pub collision: Stat,
    pub spl: Stat,
}

pub fn aggregate(seeds: &[SeedMetrics]) -> MetricsSummary {
    MetricsSummary {
        completion: Stat::new(seeds.iter().map(|s| s.completion).collect()),
        collision: Stat::new(seeds.iter().map(|s| s.collision).collect()),
        spl: Stat::new(seeds.iter().map(|s| s.spl).collect()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// Smaller of the positive and negative signed-rank sums.
    pub statistic: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p_value: f64,
    /// False when the normal approximation was used (`n > EXACT_LIMIT`).
    pub exact: bool,
}

pub const EXACT_LIMIT: usize = 20;

/// Ranks of `values` (1-based, ties averaged), doubled so they are integers.
pub fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share rank (i + j + 2) / 2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test of `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<PairedTestResult, EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Invalid(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid("non-finite difference".into()));
    }
    let n = d.len();
    if n == 0 {
        return Ok(PairedTestResult { statistic: 0.0, n: 0, p_value: 1.0, exact: true });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let plus: u64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let w2 = plus.min(total - plus);
    let statistic = w2 as f64 / 2.0;
    if n <= EXACT_LIMIT {
        // counts[s] = number of sign assignments with doubled positive sum s
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let extreme: u64 = counts
            .iter()
            .enumerate()
            .filter(|&(s, _)| (s as u64).min(total - s as u64) <= w2)
            .map(|(_, c)| c)
            .sum();
        let p_value = extreme as f64 / 2f64.powi(n as i32);
        return Ok(PairedTestResult { statistic, n, p_value, exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p_value = (erfc(z / std::f64::consts::SQRT_2)).min(1.0);
    Ok(PairedTestResult { statistic, n, p_value, exact: false })
}

/// One seed's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Name of the evaluated checkpoint, if any.
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub metrics: SeedMetrics,
    pub rollouts: Vec<RolloutResult>,
}

/// Evaluation of one model variant over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seeds: Vec<SeedReport>,
    pub summary: MetricsSummary,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, seeds: Vec<SeedReport>) -> Self {
        let summary = aggregate(&seeds.iter().map(|s| s.metrics).collect::<Vec<_>>());
        Self { model: model.into(), seeds, summary }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Invalid(e.to_string()))
    }
}

/// Plain-text comparison table with one row per report.
pub fn results_table(reports: &[EvalReport]) -> String {
    let cell = |s: &Stat, digits: usize| format!("{:.*} ± {:.*}", digits, s.mean, digits, s.stderr);
    let width = reports.iter().map(|r| r.model.chars().count()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>20}  {:>20}  {:>15}", "Model", "Completion Rate (%)", "Collision Rate (%)", "SPL").unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<width$}  {:>20}  {:>20}  {:>15}",
            r.model,
            cell(&r.summary.completion, 2),
            cell(&r.summary.collision, 2),
            cell(&r.summary.spl, 3)
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(success: bool, collided: bool, l: f64, p: f64) -> RolloutResult {
        RolloutResult {
            configuration: Configuration { start_index: 0, target_index: 1, initial_yaw: 0.0 },
            repeat: 0,
            success,
            collided,
            path_length: p,
            straight_line: l,
            steps: 1,
            final_distance: 0.0,
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(spl(&[result(true, false, 10.0, 10.0)]).unwrap(), 1.0);
        assert_eq!(spl(&[result(false, false, 10.0, 10.0)]).unwrap(), 0.0);
        assert_eq!(spl(&[result(true, false, 10.0, 20.0)]).unwrap(), 0.5);
        assert_eq!(spl(&[result(true, false, 10.0, 9.0)]).unwrap(), 1.0);
        assert!(spl(&[result(true, false, 0.0, 9.0)]).is_err());
        let mut rs: Vec<_> = (0..200).map(|i| result(i < 61, i >= 95, 10.0, 12.0)).collect();
        assert_eq!(completion_rate(&rs), 30.5);
        assert_eq!(collision_rate(&rs), 52.5);
        rs.reverse();
        assert_eq!(completion_rate(&rs), 30.5);
        assert_eq!(completion_rate(&[]), 0.0);
    }

    #[test]
    fn aggregation_examples() {
        let s = Stat::new(vec![10.0, 20.0]);
        assert_eq!((s.mean, s.stderr), (15.0, 5.0));
        assert_eq!(Stat::new(vec![3.0; 6]).stderr, 0.0);
        // hand computation: mean 3.5, sample variance 3.5, stderr sqrt(3.5 / 6)
        let s = Stat::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(s.mean, 3.5);
        assert!((s.stderr - (3.5f64 / 6.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(doubled_ranks(&[1.0, 2.0, 3.0, 4.0, 1.0]), vec![3, 6, 8, 10, 3]);
        assert_eq!(doubled_ranks(&[5.0, 5.0, 5.0]), vec![4, 4, 4]);
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[2.0, 3.0, 4.0, 5.0, 6.0, 7.0], &[1.0; 6]).unwrap();
        assert_eq!((r.n, r.statistic, r.p_value), (6, 0.0, 0.03125));
        let r = wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.n, r.p_value), (0, 1.0));
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, -1.0], &[0.0; 5]).unwrap();
        assert_eq!((r.statistic, r.p_value), (1.5, 6.0 / 32.0));
        assert!(wilcoxon_signed_rank(&[1.0], &[]).is_err());
    }

    #[test]
    fn normal_approximation_for_large_samples() {
        let a: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&a, &[0.0; 30]).unwrap();
        assert!(!r.exact && r.p_value < 1e-5);
        // z = (232.5 - 0.5) / sqrt(2363.75) for n = 30 with no ties
        let z = 232.0 / 2363.75f64.sqrt();
        assert!((r.p_value - erfc(z / std::f64::consts::SQRT_2)).abs() < 1e-15);
    }

    #[test]
    fn table_layout() {
        let rs = vec![result(true, false, 10.0, 10.0)];
        let seeds = vec![SeedReport { seed: 0, checkpoint: None, metrics: SeedMetrics::from_results(&rs).unwrap(), rollouts: rs }];
        let table = results_table(&[EvalReport::new("Gaze BC", seeds)]);
        assert!(table.lines().nth(1).unwrap().starts_with("Gaze BC"));
        assert!(table.contains("100.00 ± 0.00") && table.contains("1.000 ± 0.000"));
    }
}
