use anyhow::{ensure, Context, Result};
use gazebc::data::{Dataset, Trajectory};
use gazebc::eval::{rollout_once, Controller, Decision, EvalError, Observation, PolicyController, RolloutResult, RolloutSettings};
use gazebc::features::HogParams;
use gazebc::oracle::{GazePoint, OraclePhase};
use gazebc::policy::{PolicyInput, PolicyNetwork};
use gazebc::world::{Configuration, SimSettings, WorldConfig};
use image::{Rgb, RgbImage};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const TRUTH_COLOR: [u8; 3] = [255, 0, 255];
pub const PREDICTION_COLOR: [u8; 3] = [0, 255, 255];
/// Normalised distance under which a prediction counts as on target.
pub const AGREEMENT_RADIUS: f64 = 0.15;

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub out: PathBuf,
    /// Earlier markers drawn behind the current one.
    pub trail: usize,
    /// Integer upscaling of the exported frames.
    pub scale: u32,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self { out: PathBuf::from("replay"), trail: 8, scale: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ReplayStats {
    pub frames: usize,
    /// Frames carrying both a recorded and a predicted gaze.
    pub compared: usize,
    pub within: usize,
    pub approach_compared: usize,
    pub approach_within: usize,
}

impl ReplayStats {
    pub fn approach_agreement(&self) -> Option<f64> {
        (self.approach_compared > 0).then(|| self.approach_within as f64 / self.approach_compared as f64)
    }
}

/// Pixel centre of a normalised gaze point in a `w` x `h` image.
pub fn marker_pixel(gaze: [f64; 2], w: u32, h: u32) -> (i64, i64) {
    ((gaze[0] * (w - 1) as f64).round() as i64, (gaze[1] * (h - 1) as f64).round() as i64)
}

fn blend(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    let px = img.get_pixel_mut(x as u32, y as u32);
    for c in 0..3 {
        px[c] = (alpha * color[c] as f64 + (1.0 - alpha) * px[c] as f64).round() as u8;
    }
}

/// Filled disc of `radius` pixels blended at `alpha`.
pub fn draw_marker(img: &mut RgbImage, center: (i64, i64), radius: f64, color: [u8; 3], alpha: f64) {
    let r = radius.ceil() as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius {
                blend(img, center.0 + dx, center.1 + dy, color, alpha);
            }
        }
    }
}

/// Opacity of the marker `age` frames in the past; the current marker is opaque.
pub fn trail_alpha(age: usize, trail: usize) -> f64 {
    1.0 - age as f64 / (trail + 1) as f64
}

fn upscale(rgb: &[u8], w: u32, h: u32, scale: u32) -> RgbImage {
    RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let i = 3 * ((y / scale) * w + x / scale) as usize;
        Rgb([rgb[i], rgb[i + 1], rgb[i + 2]])
    })
}

fn write_frames(frames: &[Vec<u8>], w: u32, h: u32, tracks: &[(&[Option<[f64; 2]>], [u8; 3])], opts: &ReplayOptions) -> Result<()> {
    ensure!(opts.scale >= 1, "--scale must be at least 1");
    std::fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let radius = 1.5 * opts.scale as f64;
    for (t, rgb) in frames.iter().enumerate() {
        let mut img = upscale(rgb, w, h, opts.scale);
        let (iw, ih) = img.dimensions();
        for (track, color) in tracks {
            for age in (0..=opts.trail.min(t)).rev() {
                if let Some(g) = track[t - age] {
                    draw_marker(&mut img, marker_pixel(g, iw, ih), radius, *color, trail_alpha(age, opts.trail));
                }
            }
        }
        let path = frame_path(&opts.out, t);
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Eval-mode gaze predictions for every step of `t`.
pub fn predict_gazes(net: &mut PolicyNetwork<f32>, t: &Trajectory, hog: HogParams) -> Result<Vec<[f64; 2]>> {
    let data = Dataset::from_trajectories([t], t.width as usize, t.height as usize, hog)?;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let b = data.batch(chunk);
        let (_, g) = net.predict(&PolicyInput { batch: b.size, frames: &b.frames, hog: &b.hog, kin: &b.kin })?;
        out.extend(g.chunks(2).map(|p| [p[0] as f64, p[1] as f64]));
    }
    Ok(out)
}

/// Writes one PNG per recorded step with the recorded gaze in magenta and,
/// given a network, its prediction in cyan.
pub fn replay_trajectory(t: &Trajectory, net: Option<&mut PolicyNetwork<f32>>, opts: &ReplayOptions) -> Result<ReplayStats> {
    t.validate()?;
    let truth: Vec<Option<[f64; 2]>> = t.steps.iter().map(|s| Some([s.gaze[0] as f64, s.gaze[1] as f64])).collect();
    let predicted: Option<Vec<Option<[f64; 2]>>> = match net {
        Some(net) => {
            let hog = net.config.hog;
            Some(predict_gazes(net, t, hog)?.into_iter().map(Some).collect())
        }
        None => None,
    };
    let mut stats = ReplayStats { frames: t.steps.len(), ..Default::default() };
    if let Some(p) = &predicted {
        for ((s, g), q) in t.steps.iter().zip(&truth).zip(p) {
            let (g, q) = (g.unwrap(), q.unwrap());
            let close = ((g[0] - q[0]).powi(2) + (g[1] - q[1]).powi(2)).sqrt() <= AGREEMENT_RADIUS;
            stats.compared += 1;
            stats.within += usize::from(close);
            if s.phase == OraclePhase::Approach.tag() {
                stats.approach_compared += 1;
                stats.approach_within += usize::from(close);
            }
        }
    }
    let frames: Vec<Vec<u8>> = t.steps.iter().map(|s| s.rgb.clone()).collect();
    let mut tracks: Vec<(&[Option<[f64; 2]>], [u8; 3])> = vec![(&truth, TRUTH_COLOR)];
    if let Some(p) = &predicted {
        tracks.push((p, PREDICTION_COLOR));
    }
    write_frames(&frames, t.width as u32, t.height as u32, &tracks, opts)?;
    Ok(stats)
}

struct Recorder<'c> {
    inner: &'c mut PolicyController,
    frames: Vec<Vec<u8>>,
    gazes: Vec<Option<[f64; 2]>>,
    last: Option<GazePoint>,
}

impl Recorder<'_> {
    fn push(&mut self, obs: &Observation<'_>) {
        if let Some(f) = obs.frame {
            self.frames.push(f.rgb.clone());
            self.gazes.push(self.last.map(|g| [g.u, g.v]));
        }
    }
}

impl Controller for Recorder<'_> {
    fn begin(&mut self, config: &Configuration, seed: u64) -> Result<(), EvalError> {
        self.frames.clear();
        self.gazes.clear();
        self.last = None;
        self.inner.begin(config, seed)
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<Decision, EvalError> {
        let d = self.inner.act(obs)?;
        self.last = d.gaze;
        self.push(obs);
        Ok(d)
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<(), EvalError> {
        self.inner.observe(obs)?;
        self.push(obs);
        Ok(())
    }
}

/// Flies `net` on one configuration and writes its view with the predicted
/// gaze in cyan.
pub fn replay_rollout(
    world: &WorldConfig,
    config: &Configuration,
    net: PolicyNetwork<f32>,
    sim: &SimSettings,
    seed: u64,
    opts: &ReplayOptions,
) -> Result<(RolloutResult, ReplayStats)> {
    let (w, h) = (sim.camera.width as u32, sim.camera.height as u32);
    let mut ctrl = PolicyController::new(net);
    let mut rec = Recorder { inner: &mut ctrl, frames: Vec::new(), gazes: Vec::new(), last: None };
    let settings = RolloutSettings { repeats: 1, ..Default::default() };
    let result = rollout_once(&mut rec, world, config, 0, seed, &settings, sim)?;
    write_frames(&rec.frames, w, h, &[(&rec.gazes, PREDICTION_COLOR)], opts)?;
    Ok((result, ReplayStats { frames: rec.frames.len(), ..Default::default() }))
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marker_geometry() {
        assert_eq!(marker_pixel([0.0, 0.0], 64, 48), (0, 0));
        assert_eq!(marker_pixel([1.0, 1.0], 64, 48), (63, 47));
        assert_eq!(marker_pixel([0.5, 0.5], 64, 48), (32, 24));
        assert_eq!(trail_alpha(0, 8), 1.0);
        assert!(trail_alpha(8, 8) > 0.0 && trail_alpha(8, 8) < trail_alpha(1, 8));
    }

    #[test]
    fn marker_blends_into_the_image() {
        let mut img = RgbImage::new(9, 9);
        draw_marker(&mut img, (4, 4), 1.5, TRUTH_COLOR, 1.0);
        assert_eq!(img.get_pixel(4, 4).0, TRUTH_COLOR);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        draw_marker(&mut img, (0, 0), 0.0, PREDICTION_COLOR, 0.5);
        assert_eq!(img.get_pixel(0, 0).0, [0, 128, 128]);
        draw_marker(&mut img, (-5, 20), 2.0, PREDICTION_COLOR, 1.0);
    }
}
