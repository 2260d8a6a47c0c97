//! Front-view projection of LiDAR point clouds.
//!
//! A point cloud is mapped through a KITTI-style calibration chain
//! (`P2 · R0_rect · Tr_velo_to_cam`) onto an `H'×W'` grid whose pixels carry
//! the rectified camera-frame coordinates of the hit point plus its distance
//! to the camera centre. Pixels without a point hold the fill vector
//! `(f, f, f, f)` and are excluded from the valid set.

mod io;

pub use io::{read_calibration, read_front_view, read_velodyne, write_calibration, write_front_view, write_velodyne};

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of channels per front-view pixel: X, Y, Z, d.
pub const FV_CHANNELS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ProjError {
    #[error("calibration contains non-finite entries")]
    NonFiniteCalibration,
    #[error("projection matrix has a zero focal entry")]
    ZeroFocal,
    #[error("front-view size must be positive, got {height}x{width}")]
    ZeroSize { height: usize, width: usize },
    #[error("degenerate normalization range on channel {channel}")]
    DegenerateStats { channel: usize },
    #[error("drop ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub reflectance: T,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud<T> {
    pub points: Vec<Point<T>>,
    pub frame_id: u64,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>, frame_id: u64) -> Self {
        Self { points, frame_id }
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| Point {
                    x: U::lit(p.x.as_f64()),
                    y: U::lit(p.y.as_f64()),
                    z: U::lit(p.z.as_f64()),
                    reflectance: U::lit(p.reflectance.as_f64()),
                })
                .collect(),
            frame_id: self.frame_id,
        }
    }
}

/// KITTI-style camera calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration<T> {
    /// `P2`: rectified camera coordinates to homogeneous pixels.
    pub projection: [[T; 4]; 3],
    /// `R0_rect`.
    pub rectification: [[T; 3]; 3],
    /// `Tr_velo_to_cam`.
    pub lidar_to_camera: [[T; 4]; 3],
}

impl<T: Scalar> Calibration<T> {
    /// Pinhole camera with identity extrinsics: LiDAR frame == camera frame.
    pub fn pinhole(focal: T, cx: T, cy: T) -> Self {
        let (z, o) = (T::zero(), T::one());
        Self {
            projection: [[focal, z, cx, z], [z, focal, cy, z], [z, z, o, z]],
            rectification: [[o, z, z], [z, o, z], [z, z, o]],
            lidar_to_camera: [[o, z, z, z], [z, o, z, z], [z, z, o, z]],
        }
    }

    pub fn validate(&self) -> Result<(), ProjError> {
        let finite = self.projection.iter().flatten().all(|v| v.is_finite())
            && self.rectification.iter().flatten().all(|v| v.is_finite())
            && self.lidar_to_camera.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(ProjError::NonFiniteCalibration);
        }
        if self.projection[0][0] == T::zero() || self.projection[1][1] == T::zero() {
            return Err(ProjError::ZeroFocal);
        }
        Ok(())
    }

    /// LiDAR point to rectified camera coordinates.
    pub fn lidar_to_rect(&self, p: [T; 3]) -> [T; 3] {
        let tr = &self.lidar_to_camera;
        let mut cam = [T::zero(); 3];
        for (r, out) in cam.iter_mut().enumerate() {
            *out = tr[r][0] * p[0] + tr[r][1] * p[1] + tr[r][2] * p[2] + tr[r][3];
        }
        mat3_mul_vec(&self.rectification, cam)
    }

    /// Inverse of [`Self::lidar_to_rect`]; `None` when the chain is singular.
    pub fn rect_to_lidar(&self, p: [T; 3]) -> Option<[T; 3]> {
        let r0_inv = mat3_inverse(&self.rectification)?;
        let cam = mat3_mul_vec(&r0_inv, p);
        let tr = &self.lidar_to_camera;
        let rot = [
            [tr[0][0], tr[0][1], tr[0][2]],
            [tr[1][0], tr[1][1], tr[1][2]],
            [tr[2][0], tr[2][1], tr[2][2]],
        ];
        let rot_inv = mat3_inverse(&rot)?;
        let shifted = [cam[0] - tr[0][3], cam[1] - tr[1][3], cam[2] - tr[2][3]];
        Some(mat3_mul_vec(&rot_inv, shifted))
    }

    /// Homogeneous projection `(u·w, v·w, w)` of a rectified point.
    pub fn project_rect(&self, p: [T; 3]) -> [T; 3] {
        let pm = &self.projection;
        let mut out = [T::zero(); 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = pm[r][0] * p[0] + pm[r][1] * p[1] + pm[r][2] * p[2] + pm[r][3];
        }
        out
    }

    /// Camera centre in rectified coordinates, `-M⁻¹·p4` for `P = [M | p4]`.
    pub fn camera_center(&self) -> [T; 3] {
        let pm = &self.projection;
        let m = [
            [pm[0][0], pm[0][1], pm[0][2]],
            [pm[1][0], pm[1][1], pm[1][2]],
            [pm[2][0], pm[2][1], pm[2][2]],
        ];
        match mat3_inverse(&m) {
            Some(inv) => {
                let c = mat3_mul_vec(&inv, [pm[0][3], pm[1][3], pm[2][3]]);
                [-c[0], -c[1], -c[2]]
            }
            None => [T::zero(); 3],
        }
    }

    /// Pixel `(row, col)` a rectified point rounds to, if it lies in front of
    /// the camera. Bounds are not checked.
    pub fn pixel_of_rect(&self, p: [T; 3]) -> Option<(i64, i64)> {
        if p[2] <= T::zero() {
            return None;
        }
        let h = self.project_rect(p);
        if h[2] <= T::zero() {
            return None;
        }
        let u = h[0] / h[2];
        let v = h[1] / h[2];
        if !u.is_finite() || !v.is_finite() {
            return None;
        }
        Some((v.round().as_f64() as i64, u.round().as_f64() as i64))
    }
}

fn mat3_mul_vec<T: Scalar>(m: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    let mut out = [T::zero(); 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
    }
    out
}

fn mat3_inverse<T: Scalar>(m: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let inv = T::one() / det;
    Some([
        [
            c00 * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            c01 * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            c02 * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ])
}

/// `H'×W'×4` grid of `(X, Y, Z, d)` with an explicit valid-pixel set.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontViewImage<T> {
    height: usize,
    width: usize,
    fill: T,
    data: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Scalar> FrontViewImage<T> {
    /// All-fill image with an empty valid set.
    pub fn empty(height: usize, width: usize, fill: T) -> Self {
        Self {
            height,
            width,
            fill,
            data: vec![fill; height * width * FV_CHANNELS],
            valid: vec![false; height * width],
        }
    }

    /// Builds an image from raw channels, deriving the valid set as the
    /// pixels that differ from the fill vector.
    pub fn from_raw(height: usize, width: usize, fill: T, data: Vec<T>) -> Option<Self> {
        if data.len() != height * width * FV_CHANNELS {
            return None;
        }
        let valid = data
            .chunks_exact(FV_CHANNELS)
            .map(|px| px.iter().any(|&v| v != fill))
            .collect();
        Some(Self {
            height,
            width,
            fill,
            data,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fill(&self) -> T {
        self.fill
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Row-major validity flags, one per pixel.
    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid pixel coordinates in row-major order.
    pub fn valid_set(&self) -> Vec<(usize, usize)> {
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn pixel(&self, row: usize, col: usize) -> [T; 4] {
        let o = (row * self.width + col) * FV_CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2], self.data[o + 3]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, value: [T; 4]) {
        let idx = row * self.width + col;
        self.data[idx * FV_CHANNELS..(idx + 1) * FV_CHANNELS].copy_from_slice(&value);
        self.valid[idx] = true;
    }

    pub fn clear_pixel(&mut self, row: usize, col: usize) {
        let idx = row * self.width + col;
        let fill = self.fill;
        self.data[idx * FV_CHANNELS..(idx + 1) * FV_CHANNELS].fill(fill);
        self.valid[idx] = false;
    }

    /// Image as a `[H', W', 4]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.height, self.width, FV_CHANNELS], self.data.clone())
            .expect("consistent front-view buffer")
    }

    /// Rectified-frame points stored at valid pixels, with their pixels.
    pub fn points(&self) -> Vec<((usize, usize), [T; 3])> {
        self.valid_set()
            .into_iter()
            .map(|(r, c)| {
                let p = self.pixel(r, c);
                ((r, c), [p[0], p[1], p[2]])
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> FrontViewImage<U> {
        FrontViewImage {
            height: self.height,
            width: self.width,
            fill: U::lit(self.fill.as_f64()),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Projects a point cloud onto the front-view grid.
///
/// The nearest point (smallest `d`) wins a pixel; at equal distance the
/// lowest input index wins. Sub-pixel positions round to the nearest pixel.
pub fn project_front_view<T: Scalar>(
    pc: &PointCloud<T>,
    calib: &Calibration<T>,
    height: usize,
    width: usize,
    fill: T,
) -> Result<FrontViewImage<T>, ProjError> {
    if height == 0 || width == 0 {
        return Err(ProjError::ZeroSize { height, width });
    }
    calib.validate()?;
    let center = calib.camera_center();
    let mut best: Vec<Option<(T, [T; 3])>> = vec![None; height * width];
    for p in &pc.points {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            continue;
        }
        let rect = calib.lidar_to_rect([p.x, p.y, p.z]);
        let Some((row, col)) = calib.pixel_of_rect(rect) else {
            continue;
        };
        if row < 0 || col < 0 || row >= height as i64 || col >= width as i64 {
            continue;
        }
        let d = ((rect[0] - center[0]).powi(2) + (rect[1] - center[1]).powi(2) + (rect[2] - center[2]).powi(2)).sqrt();
        let slot = &mut best[row as usize * width + col as usize];
        match slot {
            Some((bd, _)) if *bd <= d => {}
            _ => *slot = Some((d, rect)),
        }
    }
    let mut fv = FrontViewImage::empty(height, width, fill);
    for (idx, hit) in best.into_iter().enumerate() {
        if let Some((d, r)) = hit {
            fv.set_pixel(idx / width, idx % width, [r[0], r[1], r[2], d]);
        }
    }
    Ok(fv)
}

/// Pixels removed by [`drop_points`].
#[derive(Clone, Debug, PartialEq)]
pub struct DropRecord {
    /// Dropped `(row, col)` pixels in row-major order.
    pub dropped: Vec<(usize, usize)>,
    pub drop_ratio: f64,
    pub rng_seed: u64,
}

/// Resets a random `round(ratio·|P|)` subset of valid pixels to the fill
/// vector. Deterministic for a given seed.
pub fn drop_points<T: Scalar>(
    fv: &FrontViewImage<T>,
    drop_ratio: f64,
    seed: u64,
) -> Result<(FrontViewImage<T>, DropRecord), ProjError> {
    if !(0.0..=1.0).contains(&drop_ratio) {
        return Err(ProjError::InvalidRatio(drop_ratio));
    }
    let valid = fv.valid_set();
    let count = (drop_ratio * valid.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample(&mut rng, valid.len(), count.min(valid.len())).into_vec();
    chosen.sort_unstable();
    let mut out = fv.clone();
    let dropped: Vec<(usize, usize)> = chosen.into_iter().map(|i| valid[i]).collect();
    for &(r, c) in &dropped {
        out.clear_pixel(r, c);
    }
    Ok((
        out,
        DropRecord {
            dropped,
            drop_ratio,
            rng_seed: seed,
        },
    ))
}

/// Per-channel min/max over valid pixels of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub min: [T; 4],
    pub max: [T; 4],
}

impl<T: Scalar> ChannelStats<T> {
    /// Min/max across the valid pixels of all images; `None` if none are valid.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a FrontViewImage<T>>) -> Option<Self> {
        let mut stats: Option<Self> = None;
        for fv in images {
            for (r, c) in fv.valid_set() {
                let px = fv.pixel(r, c);
                let s = stats.get_or_insert(Self { min: px, max: px });
                for ch in 0..FV_CHANNELS {
                    s.min[ch] = s.min[ch].min(px[ch]);
                    s.max[ch] = s.max[ch].max(px[ch]);
                }
            }
        }
        stats
    }
}

/// Min-max normalizes valid pixels to `[0, 1]`; fill pixels are untouched.
pub fn normalize_front_view<T: Scalar>(
    fv: &FrontViewImage<T>,
    stats: &ChannelStats<T>,
) -> Result<FrontViewImage<T>, ProjError> {
    for ch in 0..FV_CHANNELS {
        if !(stats.max[ch] > stats.min[ch]) {
            return Err(ProjError::DegenerateStats { channel: ch });
        }
    }
    let mut out = fv.clone();
    for (idx, &valid) in fv.valid.iter().enumerate() {
        if !valid {
            continue;
        }
        for ch in 0..FV_CHANNELS {
            let v = &mut out.data[idx * FV_CHANNELS + ch];
            *v = (*v - stats.min[ch]) / (stats.max[ch] - stats.min[ch]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64, z: f64) -> Point<f64> {
        Point {
            x,
            y,
            z,
            reflectance: 0.5,
        }
    }

    #[test]
    fn empty_cloud_gives_all_fill() {
        let calib = Calibration::pinhole(100.0, 32.0, 16.0);
        let fv = project_front_view(&PointCloud::default(), &calib, 32, 64, 0.0).unwrap();
        assert_eq!(fv.num_valid(), 0);
        assert!(fv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_lands_at_principal_point() {
        let calib = Calibration::pinhole(100.0, 32.0, 16.0);
        let pc = PointCloud::new(vec![pt(0.0, 0.0, 5.0)], 0);
        let fv = project_front_view(&pc, &calib, 32, 64, 0.0).unwrap();
        assert_eq!(fv.valid_set(), vec![(16, 32)]);
        assert_eq!(fv.pixel(16, 32), [0.0, 0.0, 5.0, 5.0]);
    }

    #[test]
    fn nearer_point_wins_collision() {
        let calib = Calibration::pinhole(100.0, 32.0, 16.0);
        // Same ray, d = 7 then d = 3.
        let pc = PointCloud::new(vec![pt(0.0, 0.0, 7.0), pt(0.0, 0.0, 3.0)], 0);
        let fv = project_front_view(&pc, &calib, 32, 64, 0.0).unwrap();
        assert_eq!(fv.pixel(16, 32)[3], 3.0);
    }

    #[test]
    fn equal_distance_tie_keeps_first_point() {
        let calib = Calibration::pinhole(100.0, 32.0, 16.0);
        // Both round to (16, 32) at the same distance.
        let a = pt(0.001, 0.0, 5.0);
        let b = pt(-0.001, 0.0, 5.0);
        let fv = project_front_view(&PointCloud::new(vec![a, b], 0), &calib, 32, 64, 0.0).unwrap();
        assert_eq!(fv.pixel(16, 32)[0], 0.001);
    }

    #[test]
    fn points_behind_or_outside_are_ignored() {
        let calib = Calibration::pinhole(100.0, 32.0, 16.0);
        let pc = PointCloud::new(vec![pt(0.0, 0.0, -5.0), pt(100.0, 0.0, 1.0)], 0);
        let fv = project_front_view(&pc, &calib, 32, 64, 0.0).unwrap();
        assert_eq!(fv.num_valid(), 0);
    }

    #[test]
    fn distance_is_euclidean_not_depth() {
        let calib = Calibration::pinhole(10.0, 32.0, 16.0);
        let pc = PointCloud::new(vec![pt(3.0, 0.0, 4.0)], 0);
        let fv = project_front_view(&pc, &calib, 32, 64, 0.0).unwrap();
        let (r, c) = fv.valid_set()[0];
        assert!((fv.pixel(r, c)[3] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let calib = Calibration::pinhole(100.0, 32.0, 16.0);
        assert!(matches!(
            project_front_view(&PointCloud::default(), &calib, 0, 4, 0.0),
            Err(ProjError::ZeroSize { .. })
        ));
        let mut bad = calib.clone();
        bad.rectification[1][1] = f64::NAN;
        assert!(matches!(
            project_front_view(&PointCloud::default(), &bad, 4, 4, 0.0),
            Err(ProjError::NonFiniteCalibration)
        ));
    }

    #[test]
    fn camera_center_accounts_for_baseline() {
        let mut calib = Calibration::<f64>::pinhole(100.0, 32.0, 16.0);
        // P = K [I | t] with t = (-0.5, 0, 0) → centre at (0.5, 0, 0).
        calib.projection[0][3] = -50.0;
        let c = calib.camera_center();
        assert!((c[0] - 0.5).abs() < 1e-12 && c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
    }

    fn grid_image(n: usize) -> FrontViewImage<f64> {
        let mut fv = FrontViewImage::empty(10, 10, 0.0);
        for k in 0..n {
            fv.set_pixel(k / 10, k % 10, [k as f64, 1.0, 2.0, 3.0 + k as f64]);
        }
        fv
    }

    #[test]
    fn drop_ratio_extremes() {
        let fv = grid_image(37);
        let (same, rec) = drop_points(&fv, 0.0, 1).unwrap();
        assert_eq!(same, fv);
        assert!(rec.dropped.is_empty());
        let (none, rec) = drop_points(&fv, 1.0, 1).unwrap();
        assert_eq!(none.num_valid(), 0);
        assert_eq!(rec.dropped, fv.valid_set());
        assert!(none.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drop_twenty_percent_is_reproducible() {
        let fv = grid_image(100);
        let (a, ra) = drop_points(&fv, 0.2, 42).unwrap();
        let (b, rb) = drop_points(&fv, 0.2, 42).unwrap();
        assert_eq!(ra.dropped.len(), 20);
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(a.num_valid(), 80);
        assert!(drop_points(&fv, 1.5, 0).is_err());
    }

    #[test]
    fn normalization_maps_range_and_skips_fill() {
        let mut fv = FrontViewImage::empty(2, 2, 0.0);
        fv.set_pixel(0, 0, [5.0, -5.0, 0.0, 10.0]);
        let stats = ChannelStats {
            min: [0.0, -10.0, -1.0, 0.0],
            max: [10.0, 10.0, 1.0, 10.0],
        };
        let out = normalize_front_view(&fv, &stats).unwrap();
        assert_eq!(out.pixel(0, 0), [0.5, 0.25, 0.5, 1.0]);
        // Fill stays at 0 even though the Y channel minimum is negative.
        assert_eq!(out.pixel(1, 1), [0.0; 4]);
        let flat = ChannelStats {
            min: [0.0; 4],
            max: [1.0, 1.0, 0.0, 1.0],
        };
        assert!(matches!(
            normalize_front_view(&fv, &flat),
            Err(ProjError::DegenerateStats { channel: 2 })
        ));
    }

    #[test]
    fn values_at_dataset_min_normalize_to_zero() {
        let fv = grid_image(5).map_valid(|_| [2.0, 2.0, 2.0, 2.0]);
        let stats = ChannelStats {
            min: [2.0; 4],
            max: [4.0; 4],
        };
        let out = normalize_front_view(&fv, &stats).unwrap();
        for (r, c) in fv.valid_set() {
            assert_eq!(out.pixel(r, c), [0.0; 4]);
        }
    }

    impl FrontViewImage<f64> {
        fn map_valid(mut self, f: impl Fn([f64; 4]) -> [f64; 4]) -> Self {
            for (r, c) in self.valid_set() {
                let v = f(self.pixel(r, c));
                self.set_pixel(r, c, v);
            }
            self
        }
    }
}
