//! Per-pixel ray casting against the ground plane, obstacles and the target.

use super::{RigidState, Scene, Shape, TargetBox};
use crate::geometry::Vec3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SKY_COLOR: [u8; 3] = [150, 195, 235];
const GROUND_COLORS: [[u8; 3]; 2] = [[92, 128, 60], [110, 140, 70]];
const GROUND_TILE: f64 = 5.0;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub horizontal_fov: f64,
    pub width: usize,
    pub height: usize,
    pub max_depth: f64,
    /// Deterministic per-pixel colour dither keyed on the world seed.
    #[serde(default)]
    pub dither: bool,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { horizontal_fov: PI / 2.0, width: 64, height: 48, max_depth: 120.0, dither: false }
    }
}

impl CameraModel {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    fn tan_half_h(&self) -> f64 {
        (self.horizontal_fov / 2.0).tan()
    }

    fn tan_half_v(&self) -> f64 {
        self.tan_half_h() * self.height as f64 / self.width as f64
    }
}

/// Camera frame derived from the vehicle orientation.
#[derive(Debug, Clone, Copy)]
pub struct CameraBasis {
    pub origin: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
}

impl CameraBasis {
    pub fn from_state(state: &RigidState) -> Self {
        let (sy, cy) = state.yaw.sin_cos();
        let (sp, cp) = state.pitch.sin_cos();
        let (sr, cr) = state.roll.sin_cos();
        let forward = Vec3::new(cp * cy, cp * sy, sp);
        let right0 = Vec3::new(-sy, cy, 0.0);
        let up0 = Vec3::new(-sp * cy, -sp * sy, cp);
        Self {
            origin: state.position,
            forward,
            right: right0 * cr - up0 * sr,
            up: right0 * sr + up0 * cr,
        }
    }

    /// Unit ray through the centre of pixel `(col, row)`.
    pub fn pixel_ray(&self, camera: &CameraModel, col: usize, row: usize) -> Vec3 {
        let a = (2.0 * (col as f64 + 0.5) / camera.width as f64 - 1.0) * camera.tan_half_h();
        let b = (1.0 - 2.0 * (row as f64 + 0.5) / camera.height as f64) * camera.tan_half_v();
        (self.forward + self.right * a + self.up * b).normalized()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Ground,
    Obstacle(usize),
    Target,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub distance: f64,
    pub normal: Vec3,
    pub surface: Surface,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB.
    pub rgb: Vec<u8>,
    /// Row-major hit distance in metres, `max_depth` on a miss.
    pub depth: Vec<f64>,
}

impl RenderedFrame {
    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn depth_at(&self, col: usize, row: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    /// Depth rounded to single precision, as stored on disk.
    pub fn depth_f32(&self) -> Vec<f32> {
        self.depth.iter().map(|&d| d as f32).collect()
    }
}

fn ray_cylinder(o: Vec3, d: Vec3, cx: f64, cy: f64, r: f64, h: f64) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |t: f64, n: Vec3| {
        if t > HIT_EPS && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    let ox = o.x - cx;
    let oy = o.y - cy;
    let a = d.x * d.x + d.y * d.y;
    if a > 0.0 {
        let b = ox * d.x + oy * d.y;
        let c = ox * ox + oy * oy - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            // numerically stable root pair
            let q = if b >= 0.0 { -(b + sq) } else { -b + sq };
            let (mut t0, mut t1) = (q / a, if q != 0.0 { c / q } else { -b / a });
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            for t in [t0, t1] {
                let z = o.z + t * d.z;
                if (0.0..=h).contains(&z) {
                    let n = Vec3::new((ox + t * d.x) / r, (oy + t * d.y) / r, 0.0);
                    consider(t, n);
                }
            }
        }
    }
    if d.z != 0.0 {
        let t = (h - o.z) / d.z;
        let px = ox + t * d.x;
        let py = oy + t * d.y;
        if px * px + py * py <= r * r {
            consider(t, Vec3::new(0.0, 0.0, 1.0));
        }
    }
    best
}

fn ray_aabb(o: Vec3, d: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, Vec3)> {
    let o = o.to_array();
    let d = d.to_array();
    let lo = lo.to_array();
    let hi = hi.to_array();
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (a, b) = {
            let t1 = (lo[k] - o[k]) * inv;
            let t2 = (hi[k] - o[k]) * inv;
            if t1 <= t2 { (t1, t2) } else { (t2, t1) }
        };
        if a > t_near {
            t_near = a;
            near_axis = k;
        }
        if b < t_far {
            t_far = b;
            far_axis = k;
        }
    }
    if t_near > t_far {
        return None;
    }
    let normal_for = |axis: usize, sign: f64| {
        let mut n = [0.0; 3];
        n[axis] = sign;
        Vec3::new(n[0], n[1], n[2])
    };
    if t_near > HIT_EPS {
        Some((t_near, normal_for(near_axis, -d[near_axis].signum())))
    } else if t_far > HIT_EPS {
        Some((t_far, normal_for(far_axis, d[far_axis].signum())))
    } else {
        None
    }
}

fn ray_target(o: Vec3, d: Vec3, t: &TargetBox) -> Option<(f64, Vec3)> {
    ray_aabb(o, d, t.center - t.half, t.center + t.half)
}

/// Nearest intersection of the ray `origin + t * dir` (`dir` unit length).
pub fn cast_ray(scene: &Scene<'_>, origin: Vec3, dir: Vec3) -> Option<Hit> {
    cast_ray_filtered(scene, origin, dir, None)
}

fn cast_ray_filtered(scene: &Scene<'_>, origin: Vec3, dir: Vec3, candidates: Option<&[usize]>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut take = |hit: Option<(f64, Vec3)>, surface: Surface| {
        if let Some((t, normal)) = hit {
            if best.is_none_or(|b| t < b.distance) {
                best = Some(Hit { distance: t, normal, surface });
            }
        }
    };
    if dir.z < 0.0 && origin.z >= 0.0 {
        let t = -origin.z / dir.z;
        take(if t > HIT_EPS { Some((t, Vec3::new(0.0, 0.0, 1.0))) } else { None }, Surface::Ground);
    }
    let obstacles = &scene.world.obstacles;
    let mut test = |i: usize| {
        let ob = &obstacles[i];
        let hit = match ob.shape {
            Shape::Cylinder { radius } => ray_cylinder(origin, dir, ob.center[0], ob.center[1], radius, ob.height),
            Shape::Box { half_x, half_y } => ray_aabb(
                origin,
                dir,
                Vec3::new(ob.center[0] - half_x, ob.center[1] - half_y, 0.0),
                Vec3::new(ob.center[0] + half_x, ob.center[1] + half_y, ob.height),
            ),
        };
        take(hit, Surface::Obstacle(i));
    };
    match candidates {
        Some(c) => c.iter().for_each(|&i| test(i)),
        None => (0..obstacles.len()).for_each(&mut test),
    }
    if let Some(t) = &scene.target {
        take(ray_target(origin, dir, t), Surface::Target);
    }
    best
}

const LIGHT: Vec3 = Vec3::new(0.4, 0.3, 0.866);

fn shade(base: [u8; 3], normal: Vec3) -> [u8; 3] {
    let l = LIGHT.normalized();
    let k = 0.6 + 0.4 * normal.dot(l).max(0.0);
    base.map(|c| (c as f64 * k).round().clamp(0.0, 255.0) as u8)
}

fn surface_color(scene: &Scene<'_>, hit: &Hit, point: Vec3) -> [u8; 3] {
    match hit.surface {
        Surface::Ground => {
            let parity = ((point.x / GROUND_TILE).floor() + (point.y / GROUND_TILE).floor()).rem_euclid(2.0) as usize;
            GROUND_COLORS[parity]
        }
        Surface::Obstacle(i) => shade(scene.world.obstacles[i].color, hit.normal),
        Surface::Target => shade(TargetBox::COLOR, hit.normal),
    }
}

fn dither_offset(seed: u64, pixel: usize) -> i16 {
    let h = twox_hash::XxHash64::oneshot(seed, &(pixel as u64).to_le_bytes());
    (h % 9) as i16 - 4
}

/// Renders the scene from the vehicle's forward camera.
pub fn render(state: &RigidState, scene: &Scene<'_>, camera: &CameraModel) -> RenderedFrame {
    let basis = CameraBasis::from_state(state);
    // Every pixel ray has a positive forward component, so anything wholly
    // behind the image plane can be skipped.
    let candidates: Vec<usize> = scene
        .world
        .obstacles
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            let c = Vec3::new(o.center[0], o.center[1], o.height / 2.0);
            let r = (o.footprint_radius().powi(2) + (o.height / 2.0).powi(2)).sqrt();
            (c - basis.origin).dot(basis.forward) > -r - 1e-9
        })
        .map(|(i, _)| i)
        .collect();
    let n = camera.pixel_count();
    let mut rgb = vec![0u8; 3 * n];
    let mut depth = vec![camera.max_depth; n];
    for row in 0..camera.height {
        for col in 0..camera.width {
            let idx = row * camera.width + col;
            let dir = basis.pixel_ray(camera, col, row);
            let mut color = SKY_COLOR;
            if let Some(hit) = cast_ray_filtered(scene, basis.origin, dir, Some(&candidates)) {
                if hit.distance <= camera.max_depth {
                    depth[idx] = hit.distance;
                    color = surface_color(scene, &hit, basis.origin + dir * hit.distance);
                }
            }
            if camera.dither {
                let off = dither_offset(scene.world.seed, idx);
                color = color.map(|c| (c as i16 + off).clamp(0, 255) as u8);
            }
            rgb[3 * idx..3 * idx + 3].copy_from_slice(&color);
        }
    }
    RenderedFrame { width: camera.width, height: camera.height, rgb, depth }
}

/// Normalised image coordinates of a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Horizontal, 0 at the left edge. NaN when the point is behind the camera.
    pub u: f64,
    /// Vertical, 0 at the top edge. NaN when the point is behind the camera.
    pub v: f64,
    pub in_frustum: bool,
    /// In the frustum and not occluded.
    pub visible: bool,
}

impl Projection {
    /// Index of the pixel whose centre is nearest to `(u, v)`.
    pub fn nearest_pixel(&self, camera: &CameraModel) -> Option<(usize, usize)> {
        if !self.in_frustum {
            return None;
        }
        let col = ((self.u * camera.width as f64).floor() as usize).min(camera.width - 1);
        let row = ((self.v * camera.height as f64).floor() as usize).min(camera.height - 1);
        Some((col, row))
    }
}

/// Pinhole projection with an occlusion test by a single ray cast.
pub fn project(point: Vec3, state: &RigidState, camera: &CameraModel, scene: &Scene<'_>) -> Projection {
    let basis = CameraBasis::from_state(state);
    let rel = point - basis.origin;
    let xf = rel.dot(basis.forward);
    if xf <= 0.0 {
        return Projection { u: f64::NAN, v: f64::NAN, in_frustum: false, visible: false };
    }
    let u = 0.5 + 0.5 * (rel.dot(basis.right) / xf) / camera.tan_half_h();
    let v = 0.5 - 0.5 * (rel.dot(basis.up) / xf) / camera.tan_half_v();
    let in_frustum = (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v);
    let visible = in_frustum && {
        let dist = rel.norm();
        match cast_ray(scene, basis.origin, rel * (1.0 / dist)) {
            Some(hit) => hit.distance >= dist - 1e-6 * dist.max(1.0),
            None => true,
        }
    };
    Projection { u, v, in_frustum, visible }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Obstacle, WorldConfig};

    fn cam_odd() -> CameraModel {
        CameraModel { width: 65, height: 49, ..Default::default() }
    }

    #[test]
    fn sky_only_when_pitched_up() {
        let w = WorldConfig::empty(100.0, 0);
        let scene = Scene::without_target(&w);
        let mut s = RigidState::at(Vec3::new(50.0, 50.0, 5.0), 0.0);
        s.pitch = 1.2;
        let f = render(&s, &scene, &CameraModel::default());
        assert!(f.depth.iter().all(|&d| d == 120.0));
        assert!(f.rgb.chunks(3).all(|c| c == SKY_COLOR));
    }

    #[test]
    fn cylinder_on_axis_depth() {
        let mut w = WorldConfig::empty(100.0, 0);
        w.obstacles.push(Obstacle::cylinder([60.0, 50.0], 1.0, 20.0, [100, 70, 40]));
        let scene = Scene::without_target(&w);
        let s = RigidState::at(Vec3::new(50.0, 50.0, 5.0), 0.0);
        let cam = cam_odd();
        let f = render(&s, &scene, &cam);
        assert!((f.depth_at(32, 24) - 9.0).abs() < 1e-6);
    }

    #[test]
    fn render_is_deterministic() {
        let w = WorldConfig::default_world();
        let cfg = crate::world::Configuration { start_index: 3, target_index: 17, initial_yaw: 1.0 };
        let scene = w.scene(&cfg);
        let s = w.start_state(&cfg);
        let cam = CameraModel::default();
        assert_eq!(render(&s, &scene, &cam), render(&s, &scene, &cam));
        let dithered = CameraModel { dither: true, ..cam };
        assert_eq!(render(&s, &scene, &dithered), render(&s, &scene, &dithered));
    }

    #[test]
    fn projection_examples() {
        let w = WorldConfig::empty(100.0, 0);
        let scene = Scene::without_target(&w);
        let s = RigidState::at(Vec3::new(50.0, 50.0, 5.0), 0.0);
        let cam = CameraModel::default();
        let p = project(Vec3::new(60.0, 50.0, 5.0), &s, &cam, &scene);
        assert!((p.u - 0.5).abs() < 1e-12 && (p.v - 0.5).abs() < 1e-12 && p.visible);
        // half the horizontal FOV to the right (positive y)
        let p = project(Vec3::new(60.0, 60.0, 5.0), &s, &cam, &scene);
        assert!((p.u - 1.0).abs() < 1e-12);
        let p = project(Vec3::new(49.0, 50.0, 5.0), &s, &cam, &scene);
        assert!(!p.visible && !p.in_frustum);
    }

    #[test]
    fn occluded_point_is_not_visible() {
        let mut w = WorldConfig::empty(100.0, 0);
        w.obstacles.push(Obstacle::cylinder([55.0, 50.0], 1.0, 20.0, [100, 70, 40]));
        let scene = Scene::without_target(&w);
        let s = RigidState::at(Vec3::new(50.0, 50.0, 5.0), 0.0);
        let p = project(Vec3::new(70.0, 50.0, 5.0), &s, &CameraModel::default(), &scene);
        assert!(p.in_frustum && !p.visible);
    }

    #[test]
    fn target_top_projects_onto_target_pixels() {
        let w = WorldConfig::empty(100.0, 0);
        let cfg = crate::world::Configuration { start_index: 10, target_index: 12, initial_yaw: 0.0 };
        let scene = w.scene(&cfg);
        let s = w.start_state(&cfg);
        let cam = CameraModel::default();
        let top = scene.target.unwrap().top_center();
        let p = project(top + Vec3::new(0.0, 0.0, -0.05), &s, &cam, &scene);
        assert!(p.in_frustum);
        let (c, r) = p.nearest_pixel(&cam).unwrap();
        let f = render(&s, &scene, &cam);
        let px = f.pixel(c, r);
        assert!(px[0] > 3 * px[2] && px[1] > 3 * px[2] && px[0] > 120, "{px:?}");
    }
}
