//! Deterministic toy driving scenes: textured billboards standing on a
//! ground plane in front of a distant wall, seen by a pinhole camera and a
//! row-subsampled depth scanner.
//!
//! LiDAR points are back-projected from pixel centres of the dense depth
//! render, so projecting them with the bundled calibration lands every
//! point on the pixel it came from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pcproj::{Calibration, Point, PointCloud};
use crate::pseudolabel::{LabelGrid, MaskSet};
use crate::tensor::Tensor;

/// Distance of the back wall in metres.
pub const WALL_DEPTH: f64 = 50.0;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place {0} non-overlapping objects")]
    Placement(usize),
    #[error("unknown degradation mode {0:?}")]
    UnknownMode(String),
    #[error("strength {0} outside [0, 1]")]
    Strength(f64),
}

/// Scene parameters. Object count, sizes, depths and motion are drawn from
/// `seed` within the given ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub focal: f64,
    /// Principal point row.
    pub horizon_row: f64,
    pub camera_height: f64,
    pub n_moving: usize,
    pub n_static: usize,
    /// Object distance range in metres.
    pub depth_range: (f64, f64),
    /// Object width and height ranges in metres.
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    /// Lateral speed range in metres per frame for moving objects.
    pub speed_range: (f64, f64),
    /// Every `lidar_row_step`-th image row carries scanner returns.
    pub lidar_row_step: usize,
    /// Rows above this fraction of the image height have no returns.
    pub lidar_top_fraction: f64,
    /// Independent per-return dropout probability.
    pub lidar_dropout: f64,
    /// Standard deviation of additive RGB noise.
    pub pixel_noise: f64,
    /// Indices of objects flagged as weak LiDAR reflectors; see [`degrade`].
    pub low_reflectivity: Vec<usize>,
}

impl SceneSpec {
    /// 64×128, five frames, the given moving/static split.
    pub fn toy(seed: u64, n_moving: usize, n_static: usize) -> Self {
        Self {
            seed,
            height: 64,
            width: 128,
            frames: 5,
            focal: 90.0,
            horizon_row: 24.0,
            camera_height: 1.6,
            n_moving,
            n_static,
            depth_range: (6.0, 16.0),
            width_range: (1.6, 3.6),
            height_range: (1.3, 2.2),
            speed_range: (0.15, 0.35),
            lidar_row_step: 2,
            lidar_top_fraction: 0.3,
            lidar_dropout: 0.05,
            pixel_noise: 0.02,
            low_reflectivity: Vec::new(),
        }
    }

    /// Toy spec with 2–4 objects, at most one of them static, drawn from `seed`.
    pub fn sample_toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5CE4E);
        let n = rng.gen_range(2..=4);
        let still = rng.gen_range(0..=1);
        Self::toy(seed, n - still, still)
    }

    pub fn n_objects(&self) -> usize {
        self.n_moving + self.n_static
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.n_objects() == 0 {
            return bad("at least one object required");
        }
        if self.low_reflectivity.iter().any(|&k| k >= self.n_objects()) {
            return bad("low-reflectivity index out of range");
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("frames and image size must be positive");
        }
        let (lo, hi) = self.depth_range;
        if !(1.0..=70.0).contains(&lo) || !(1.0..=70.0).contains(&hi) || lo > hi {
            return bad("object depths must lie within [1, 70] m");
        }
        if !(self.focal > 0.0) || self.lidar_row_step == 0 {
            return bad("focal and lidar row step must be positive");
        }
        if !(0.0..1.0).contains(&self.lidar_dropout) || !(0.0..=1.0).contains(&self.lidar_top_fraction) {
            return bad("lidar fractions out of range");
        }
        Ok(())
    }

    /// KITTI-like calibration: scanner axes (x forward, y left, z up),
    /// mounted 0.27 m behind and 0.08 m above the camera.
    pub fn calibration(&self) -> Calibration<f64> {
        let mut c = Calibration::pinhole(self.focal, self.width as f64 / 2.0, self.horizon_row);
        c.lidar_to_camera = [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]];
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Stripes { period: f64, amplitude: f64 },
    Checker { cell: f64, amplitude: f64 },
    Gradient { amplitude: f64 },
}

/// One billboard object. Positions in camera metres (x right).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub width: f64,
    pub height: f64,
    pub depth: f64,
    pub x0: f64,
    /// Lateral metres per frame; zero for static objects.
    pub velocity: f64,
    pub color: [f64; 3],
    pub texture: Texture,
    pub reflectance: f64,
    pub low_reflectivity: bool,
}

impl SceneObject {
    pub fn is_moving(&self) -> bool {
        self.velocity != 0.0
    }

    fn center_x(&self, t: usize) -> f64 {
        self.x0 + self.velocity * t as f64
    }

    /// Whether the camera-frame point `(x, y)` on the object plane is inside.
    fn contains(&self, x: f64, y: f64, t: usize, ground_y: f64) -> bool {
        let dx = x - self.center_x(t);
        let top = ground_y - self.height;
        match self.shape {
            Shape::Rectangle => dx.abs() <= self.width / 2.0 && y >= top && y <= ground_y,
            Shape::Ellipse => {
                let cy = ground_y - self.height / 2.0;
                (dx / (self.width / 2.0)).powi(2) + ((y - cy) / (self.height / 2.0)).powi(2) <= 1.0
            }
        }
    }

    /// Pixel-space column range over all frames and row range.
    fn screen_box(&self, spec: &SceneSpec) -> (f64, f64, f64, f64) {
        let f = spec.focal;
        let cx = spec.width as f64 / 2.0;
        let last = spec.frames.saturating_sub(1);
        let xs = [self.center_x(0), self.center_x(last)];
        let left = xs.iter().cloned().fold(f64::INFINITY, f64::min) - self.width / 2.0;
        let right = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + self.width / 2.0;
        let top = spec.horizon_row + f * (spec.camera_height - self.height) / self.depth;
        let bottom = spec.horizon_row + f * spec.camera_height / self.depth;
        (cx + f * left / self.depth, cx + f * right / self.depth, top, bottom)
    }
}

/// Data of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameData {
    /// `[H, W, 3]`, values are multiples of 1/255 in `[0, 1]`.
    pub rgb: Tensor<f32>,
    pub cloud: PointCloud<f32>,
    /// Object label (index + 1, 0 = background) of every point.
    pub point_objects: Vec<u16>,
    /// Instance labels of all objects.
    pub gt: LabelGrid,
    /// Instance labels of moving objects only (same numbering as `gt`).
    pub motion: LabelGrid,
}

impl FrameData {
    pub fn gt_masks(&self) -> MaskSet {
        self.gt.to_masks(self.cloud.frame_id)
    }

    pub fn motion_masks(&self) -> MaskSet {
        self.motion.to_masks(self.cloud.frame_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub calibration: Calibration<f64>,
    pub objects: Vec<SceneObject>,
    pub frames: Vec<FrameData>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn sample_object(spec: &SceneSpec, rng: &mut ChaCha8Rng, moving: bool) -> SceneObject {
    let depth = rng.gen_range(spec.depth_range.0..=spec.depth_range.1);
    let width = rng.gen_range(spec.width_range.0..=spec.width_range.1);
    let height = rng.gen_range(spec.height_range.0..=spec.height_range.1);
    let half_fov = (spec.width as f64 / 2.0 - 2.0) * depth / spec.focal;
    let velocity = if moving {
        let v = rng.gen_range(spec.speed_range.0..=spec.speed_range.1);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    } else {
        0.0
    };
    let travel = velocity * spec.frames.saturating_sub(1) as f64;
    let lo = -half_fov + width / 2.0 - travel.min(0.0);
    let hi = half_fov - width / 2.0 - travel.max(0.0);
    let x0 = if lo < hi { rng.gen_range(lo..hi) } else { 0.0 };
    let texture = match rng.gen_range(0..3) {
        0 => Texture::Stripes {
            period: rng.gen_range(0.3..0.8),
            amplitude: rng.gen_range(0.05..0.15),
        },
        1 => Texture::Checker {
            cell: rng.gen_range(0.3..0.7),
            amplitude: rng.gen_range(0.05..0.15),
        },
        _ => Texture::Gradient {
            amplitude: rng.gen_range(0.1..0.25),
        },
    };
    SceneObject {
        shape: if rng.gen_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse },
        width,
        height,
        depth,
        x0,
        velocity,
        color: hsv(rng.gen(), rng.gen_range(0.55..0.95), rng.gen_range(0.55..0.95)),
        texture,
        reflectance: rng.gen_range(0.4..0.9),
        low_reflectivity: false,
    }
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>, SynthError> {
    const GAP: f64 = 2.0;
    for _ in 0..50 {
        let mut objects: Vec<SceneObject> = Vec::new();
        let mut boxes = Vec::new();
        'objects: for k in 0..spec.n_objects() {
            for _ in 0..100 {
                let o = sample_object(spec, rng, k < spec.n_moving);
                let b = o.screen_box(spec);
                let inside = b.0 >= 1.0 && b.1 <= spec.width as f64 - 2.0 && b.2 >= 0.0 && b.3 <= spec.height as f64 - 1.0;
                let clear = boxes.iter().all(|q: &(f64, f64, f64, f64)| {
                    b.1 + GAP < q.0 || q.1 + GAP < b.0 || b.3 + GAP < q.2 || q.3 + GAP < b.2
                });
                if inside && clear {
                    boxes.push(b);
                    objects.push(o);
                    continue 'objects;
                }
            }
            break;
        }
        if objects.len() == spec.n_objects() {
            return Ok(objects);
        }
    }
    Err(SynthError::Placement(spec.n_objects()))
}

/// Renders a scene bundle; identical specs give bitwise-identical bundles.
pub fn generate(spec: &SceneSpec) -> Result<SceneBundle, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut objects = place_objects(spec, &mut rng)?;
    for &k in &spec.low_reflectivity {
        if let Some(o) = objects.get_mut(k) {
            o.low_reflectivity = true;
        }
    }
    let calibration = spec.calibration();
    let (h, w) = (spec.height, spec.width);
    let (f, cx, cy) = (spec.focal, w as f64 / 2.0, spec.horizon_row);
    let ground_y = spec.camera_height;
    let sky = hsv(rng.gen_range(0.5..0.7), rng.gen_range(0.1..0.3), rng.gen_range(0.6..0.8));
    let ground = hsv(rng.gen_range(0.05..0.15), rng.gen_range(0.1..0.3), rng.gen_range(0.3..0.45));
    let top_row = (spec.lidar_top_fraction * h as f64).ceil() as usize;

    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut rgb = Vec::with_capacity(h * w * 3);
        let mut gt = LabelGrid::new(h, w);
        let mut motion = LabelGrid::new(h, w);
        let mut points = Vec::new();
        let mut point_objects = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let (dx, dy) = ((c as f64 - cx) / f, (r as f64 - cy) / f);
                let mut z = if dy > 0.0 { (ground_y / dy).min(WALL_DEPTH) } else { WALL_DEPTH };
                let mut hit = None;
                for (k, o) in objects.iter().enumerate() {
                    if o.depth < z && o.contains(dx * o.depth, dy * o.depth, t, ground_y) {
                        z = o.depth;
                        hit = Some(k);
                    }
                }
                let (x, y) = (dx * z, dy * z);
                let mut color = match hit {
                    Some(k) => {
                        let o = &objects[k];
                        let (u, v) = (x - o.center_x(t), y - (ground_y - o.height));
                        let shade = match o.texture {
                            Texture::Stripes { period, amplitude } => amplitude * (2.0 * std::f64::consts::PI * v / period).sin(),
                            Texture::Checker { cell, amplitude } => {
                                let odd = ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2) == 1;
                                if odd {
                                    amplitude
                                } else {
                                    -amplitude
                                }
                            }
                            Texture::Gradient { amplitude } => amplitude * (v / o.height - 0.5),
                        };
                        o.color.map(|ch| ch + shade)
                    }
                    None if dy > 0.0 && z < WALL_DEPTH => {
                        let fade = 0.15 * (z / WALL_DEPTH);
                        ground.map(|ch| ch + fade)
                    }
                    None => {
                        let fade = 0.15 * (r as f64 / h as f64);
                        sky.map(|ch| ch - fade)
                    }
                };
                for ch in &mut color {
                    *ch = (*ch + spec.pixel_noise * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
                    rgb.push(((*ch * 255.0).round() / 255.0) as f32);
                }
                let label = hit.map_or(0, |k| k as u16 + 1);
                gt.labels[r * w + c] = label;
                if hit.is_some_and(|k| objects[k].is_moving()) {
                    motion.labels[r * w + c] = label;
                }
                let dropped = rng.gen_bool(spec.lidar_dropout);
                if r >= top_row && (r % spec.lidar_row_step) == spec.lidar_row_step - 1 && !dropped {
                    let lidar = calibration.rect_to_lidar([x, y, z]).expect("invertible calibration");
                    points.push(Point {
                        x: lidar[0] as f32,
                        y: lidar[1] as f32,
                        z: lidar[2] as f32,
                        reflectance: hit.map_or(0.2, |k| objects[k].reflectance) as f32,
                    });
                    point_objects.push(label);
                }
            }
        }
        frames.push(FrameData {
            rgb: Tensor::from_vec(&[h, w, 3], rgb).unwrap(),
            cloud: PointCloud::new(points, t as u64),
            point_objects,
            gt,
            motion,
        });
    }
    Ok(SceneBundle {
        spec: spec.clone(),
        calibration,
        objects,
        frames,
    })
}

/// Sensor degradations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradeMode {
    /// Dims RGB toward black; point clouds untouched.
    Night,
    /// Removes points of objects flagged `low_reflectivity`; RGB untouched.
    LowReflectivity,
}

impl std::str::FromStr for DegradeMode {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "night" => Ok(Self::Night),
            "low_reflectivity" => Ok(Self::LowReflectivity),
            other => Err(SynthError::UnknownMode(other.to_string())),
        }
    }
}

/// Applies a degradation of `strength ∈ [0, 1]`. Low-reflectivity removal
/// drops `ceil(strength·n)` of each flagged object's `n` points per frame.
pub fn degrade(bundle: &SceneBundle, mode: DegradeMode, strength: f64) -> Result<SceneBundle, SynthError> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(SynthError::Strength(strength));
    }
    let mut out = bundle.clone();
    if strength == 0.0 {
        return Ok(out);
    }
    match mode {
        DegradeMode::Night => {
            let keep = (1.0 - strength) as f32;
            for fr in &mut out.frames {
                fr.rgb = fr.rgb.map(|v| ((v * keep * 255.0).round() / 255.0).clamp(0.0, 1.0));
            }
        }
        DegradeMode::LowReflectivity => {
            let mut rng = ChaCha8Rng::seed_from_u64(bundle.spec.seed ^ 0x10_4EF1);
            for fr in &mut out.frames {
                let mut drop = vec![false; fr.point_objects.len()];
                for (k, o) in bundle.objects.iter().enumerate() {
                    if !o.low_reflectivity {
                        continue;
                    }
                    let idx: Vec<usize> = (0..drop.len()).filter(|&i| fr.point_objects[i] == k as u16 + 1).collect();
                    let n = (strength * idx.len() as f64).ceil() as usize;
                    for j in rand::seq::index::sample(&mut rng, idx.len(), n.min(idx.len())) {
                        drop[idx[j]] = true;
                    }
                }
                let mut keep = drop.iter().map(|d| !d);
                fr.cloud.points.retain(|_| keep.next().unwrap());
                let mut keep = drop.iter().map(|d| !d);
                fr.point_objects.retain(|_| keep.next().unwrap());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motion_and_gt_counts_follow_spec() {
        let b = generate(&SceneSpec::toy(3, 1, 0)).unwrap();
        assert!(b.frames.iter().all(|f| f.motion_masks().len() == 1));
        let b = generate(&SceneSpec::toy(4, 2, 1)).unwrap();
        for f in &b.frames {
            assert_eq!(f.gt_masks().len(), 3);
            assert_eq!(f.motion_masks().len(), 2);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SceneSpec::toy(0, 0, 0)).is_err());
        let mut s = SceneSpec::toy(0, 1, 0);
        s.depth_range = (0.5, 10.0);
        assert!(generate(&s).is_err());
        let mut s = SceneSpec::toy(0, 30, 0);
        s.width_range = (5.0, 6.0);
        assert!(matches!(generate(&s), Err(SynthError::Placement(30))));
        assert!("fog".parse::<DegradeMode>().is_err());
    }

    #[test]
    fn degrade_identity_and_night() {
        let b = generate(&SceneSpec::toy(5, 1, 1)).unwrap();
        assert_eq!(degrade(&b, DegradeMode::Night, 0.0).unwrap(), b);
        let n = degrade(&b, DegradeMode::Night, 1.0).unwrap();
        for (x, y) in n.frames.iter().zip(&b.frames) {
            assert!(x.rgb.data().iter().all(|&v| v == 0.0));
            assert_eq!(x.cloud, y.cloud);
        }
    }
}
