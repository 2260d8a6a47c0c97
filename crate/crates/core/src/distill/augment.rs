//! Student-input augmentation with recorded, replayable transforms.
//!
//! Geometric ops (crop-resize, then horizontal flip) use nearest-neighbour
//! sampling everywhere so that an input and a mask transformed by the same
//! record stay pixel-aligned.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::losses::Modality;
use crate::pcproj::{drop_points, FrontViewImage, FV_CHANNELS};
use crate::pseudolabel::{nearest_source, Candidate, Mask, MaskSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("record expects {expected:?} inputs, got {got:?}")]
    Size { expected: (usize, usize), got: (usize, usize) },
    #[error("crop window {0:?} is not invertible on the grid")]
    Window(CropWindow),
}

/// Per-op probabilities and magnitudes for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: f64,
    pub crop: f64,
    /// Smallest crop side as a fraction of the full side.
    pub crop_min_scale: f64,
    /// Colour jitter for RGB, additive Gaussian noise for front views.
    pub jitter: f64,
    pub jitter_strength: f64,
    /// Random point removal (front views only).
    pub drop: f64,
    pub drop_ratio: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: 0.0,
            crop: 0.0,
            crop_min_scale: 0.75,
            jitter: 0.0,
            jitter_strength: 0.0,
            drop: 0.0,
            drop_ratio: 0.0,
        }
    }

    /// Flip, crop-resize and colour jitter, each with probability 0.4.
    pub fn rgb_default() -> Self {
        Self {
            flip: 0.4,
            crop: 0.4,
            jitter: 0.4,
            jitter_strength: 0.25,
            ..Self::none()
        }
    }

    /// Data jittering only, with probability 0.4.
    pub fn lidar_default() -> Self {
        Self {
            jitter: 0.4,
            jitter_strength: 0.01,
            ..Self::none()
        }
    }

    /// Jittering, point drop, flip and crop-resize, each with probability 0.4.
    pub fn lidar_dense() -> Self {
        Self {
            flip: 0.4,
            crop: 0.4,
            drop: 0.4,
            drop_ratio: 0.1,
            ..Self::lidar_default()
        }
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Photometric op; carries no geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhotoOp {
    Color { brightness: f64, contrast: f64, saturation: f64 },
    Noise { sigma: f64 },
    Drop { ratio: f64 },
}

/// Everything needed to replay an augmentation on inputs and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRecord {
    pub height: usize,
    pub width: usize,
    pub flip: bool,
    /// Cropped region, resized back to `height × width`.
    pub crop: Option<CropWindow>,
    pub photometric: Vec<PhotoOp>,
    pub seed: u64,
}

impl AugmentRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            flip: false,
            crop: None,
            photometric: Vec::new(),
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop.is_none() && self.photometric.is_empty()
    }

    pub fn is_geometric_identity(&self) -> bool {
        !self.flip && self.crop.is_none()
    }

    /// Output-over-input scale of the crop-resize, `(rows, cols)`.
    pub fn resize_factors(&self) -> (f64, f64) {
        match self.crop {
            Some(c) => (self.height as f64 / c.height as f64, self.width as f64 / c.width as f64),
            None => (1.0, 1.0),
        }
    }

    /// Draws a record for one clip. All frames of the clip share it.
    pub fn sample(cfg: &AugmentConfig, branch: Modality, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Every draw happens regardless of outcome so the stream layout is
        // fixed and changing one probability leaves the other ops intact.
        let flip = rng.gen::<f64>() < cfg.flip;
        let do_crop = rng.gen::<f64>() < cfg.crop;
        let scale = rng.gen_range(cfg.crop_min_scale.clamp(0.05, 1.0)..=1.0);
        let (u, v) = (rng.gen::<f64>(), rng.gen::<f64>());
        let do_jitter = rng.gen::<f64>() < cfg.jitter;
        let mut jitter_draw = || rng.gen_range(-1.0..=1.0) * cfg.jitter_strength;
        let color = PhotoOp::Color {
            brightness: 1.0 + jitter_draw(),
            contrast: 1.0 + jitter_draw(),
            saturation: 1.0 + jitter_draw(),
        };
        let do_drop = rng.gen::<f64>() < cfg.drop;

        let crop = do_crop.then(|| {
            let ch = ((height as f64 * scale).round() as usize).clamp(1, height);
            let cw = ((width as f64 * scale).round() as usize).clamp(1, width);
            CropWindow {
                top: ((height - ch) as f64 * u).floor() as usize,
                left: ((width - cw) as f64 * v).floor() as usize,
                height: ch,
                width: cw,
            }
        });
        let mut photometric = Vec::new();
        if do_jitter && cfg.jitter_strength > 0.0 {
            photometric.push(match branch {
                Modality::Rgb => color,
                Modality::Lidar => PhotoOp::Noise { sigma: cfg.jitter_strength },
            });
        }
        if do_drop && branch == Modality::Lidar && cfg.drop_ratio > 0.0 {
            photometric.push(PhotoOp::Drop { ratio: cfg.drop_ratio });
        }
        Self {
            height,
            width,
            flip,
            crop: (crop != Some(full_window(height, width))).then_some(crop).flatten(),
            photometric,
            seed,
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<(), AugmentError> {
        if (h, w) != (self.height, self.width) {
            return Err(AugmentError::Size {
                expected: (self.height, self.width),
                got: (h, w),
            });
        }
        if let Some(c) = self.crop {
            if c.height == 0 || c.width == 0 || c.top + c.height > h || c.left + c.width > w {
                return Err(AugmentError::Window(c));
            }
        }
        Ok(())
    }

    /// Source pixel of every output pixel, row-major.
    fn source_index(&self) -> Vec<usize> {
        let c = self.crop.unwrap_or(full_window(self.height, self.width));
        let rows: Vec<usize> = (0..self.height).map(|i| c.top + nearest_source(i, self.height, c.height)).collect();
        let cols: Vec<usize> = (0..self.width)
            .map(|j| {
                let j = if self.flip { self.width - 1 - j } else { j };
                c.left + nearest_source(j, self.width, c.width)
            })
            .collect();
        rows.iter().flat_map(|&r| cols.iter().map(move |&col| r * self.width + col)).collect()
    }
}

fn full_window(height: usize, width: usize) -> CropWindow {
    CropWindow {
        top: 0,
        left: 0,
        height,
        width,
    }
}

/// Input to [`augment`].
#[derive(Clone, Debug, PartialEq)]
pub enum AugmentInput<T> {
    /// `[H, W, 3]` RGB in `[0, 1]`.
    Frame(Tensor<T>),
    FrontView(FrontViewImage<T>),
}

/// Samples a record for `input` and applies it.
pub fn augment<T: Scalar>(
    input: &AugmentInput<T>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(AugmentInput<T>, AugmentRecord), AugmentError> {
    match input {
        AugmentInput::Frame(f) => {
            let rec = AugmentRecord::sample(cfg, Modality::Rgb, f.shape()[0], f.shape()[1], seed);
            Ok((AugmentInput::Frame(apply_rgb(f, &rec)?), rec))
        }
        AugmentInput::FrontView(fv) => {
            let rec = AugmentRecord::sample(cfg, Modality::Lidar, fv.height(), fv.width(), seed);
            Ok((AugmentInput::FrontView(apply_front_view(fv, &rec, 0)?), rec))
        }
    }
}

/// Applies a record to one `[H, W, C]` RGB frame.
pub fn apply_rgb<T: Scalar>(frame: &Tensor<T>, rec: &AugmentRecord) -> Result<Tensor<T>, AugmentError> {
    let s = frame.shape();
    rec.check(s[0], s[1])?;
    let c = s[2];
    let mut out = if rec.is_geometric_identity() {
        frame.clone()
    } else {
        let src = rec.source_index();
        let data = src.iter().flat_map(|&p| frame.data()[p * c..(p + 1) * c].iter().copied()).collect();
        Tensor::from_vec(s, data).unwrap()
    };
    for op in &rec.photometric {
        if let PhotoOp::Color { brightness, contrast, saturation } = *op {
            color_jitter(&mut out, brightness, contrast, saturation);
        }
    }
    Ok(out)
}

fn color_jitter<T: Scalar>(img: &mut Tensor<T>, brightness: f64, contrast: f64, saturation: f64) {
    let c = img.last_dim();
    let data = img.data_mut();
    let n = (data.len() / c).max(1) as f64;
    let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / (n * c as f64);
    for px in data.chunks_exact_mut(c) {
        let gray = px.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
        for v in px.iter_mut() {
            let x = gray + saturation * (v.as_f64() - gray);
            let x = mean + contrast * (x - mean);
            *v = T::lit((brightness * x).clamp(0.0, 1.0));
        }
    }
}

/// Applies a record to a front view. `frame` decorrelates the noise of
/// different frames sharing one record.
pub fn apply_front_view<T: Scalar>(
    fv: &FrontViewImage<T>,
    rec: &AugmentRecord,
    frame: u64,
) -> Result<FrontViewImage<T>, AugmentError> {
    rec.check(fv.height(), fv.width())?;
    let mut out = if rec.is_geometric_identity() {
        fv.clone()
    } else {
        let mut out = FrontViewImage::empty(fv.height(), fv.width(), fv.fill());
        for (i, p) in rec.source_index().into_iter().enumerate() {
            let (r, c) = (p / fv.width(), p % fv.width());
            if fv.is_valid(r, c) {
                out.set_pixel(i / fv.width(), i % fv.width(), fv.pixel(r, c));
            }
        }
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rec.seed ^ 0xA5A5_0000_0000 ^ frame.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for op in &rec.photometric {
        match *op {
            PhotoOp::Noise { sigma } => {
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                for (r, c) in out.valid_set() {
                    let mut px = out.pixel(r, c);
                    for v in px.iter_mut().take(FV_CHANNELS) {
                        *v += T::lit(normal.sample(&mut rng));
                    }
                    out.set_pixel(r, c, px);
                }
            }
            PhotoOp::Drop { ratio } => {
                out = drop_points(&out, ratio, rng.gen()).expect("ratio in [0, 1]").0;
            }
            PhotoOp::Color { .. } => {}
        }
    }
    Ok(out)
}

/// Geometric part of a record applied to one mask.
pub fn align_mask(mask: &Mask, rec: &AugmentRecord) -> Result<Mask, AugmentError> {
    rec.check(mask.height(), mask.width())?;
    if rec.is_geometric_identity() {
        return Ok(mask.clone());
    }
    let src = rec.source_index();
    Ok(Mask::from_vec(mask.height(), mask.width(), src.iter().map(|&p| mask.data()[p]).collect()))
}

/// Aligns every mask of a set; masks cropped away stay in place as empty
/// masks so indices are preserved.
pub fn align_targets(targets: &MaskSet, rec: &AugmentRecord) -> Result<MaskSet, AugmentError> {
    let masks = targets.masks.iter().map(|m| align_mask(m, rec)).collect::<Result<_, _>>()?;
    Ok(MaskSet {
        masks,
        ..targets.clone()
    })
}

pub fn align_candidates(cands: &[Candidate], rec: &AugmentRecord) -> Result<Vec<Candidate>, AugmentError> {
    cands
        .iter()
        .map(|c| {
            Ok(Candidate {
                mask: align_mask(&c.mask, rec)?,
                ..c.clone()
            })
        })
        .collect()
}
