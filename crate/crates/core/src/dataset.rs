//! On-disk scene layout, manifest, and in-memory training sequences.
//!
//! ```text
//! root/manifest.txt          "name split frames" per line, '#' comments
//! root/<name>/calib.txt
//! root/<name>/rgb_TTT.ppm     binary P6, 8 bit
//! root/<name>/velodyne_TTT.bin
//! root/<name>/gt_TTT.pgm      16-bit instance labels
//! root/<name>/motion_TTT.pgm
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::pcproj::{self, project_front_view, Calibration, FrontViewImage, PointCloud, ProjError};
use crate::pseudolabel::{read_label_pgm, write_label_pgm, LabelGrid, MaskSet, PseudoError};
use crate::synthgen::{degrade, generate, DegradeMode, SceneBundle, SceneSpec, SynthError};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Proj(#[from] ProjError),
    #[error(transparent)]
    Labels(#[from] PseudoError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Dataset split of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
    /// Held-out scenes with night degradation.
    Night,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Night => "night",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "night" => Ok(Split::Night),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    pub frames: usize,
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let mut s = String::from("# name split frames\n");
    for e in entries {
        s.push_str(&format!("{} {} {}\n", e.name, e.split, e.frames));
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, s).map_err(io_err(&path))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(format_err(&path, format!("line {}: expected 3 fields", n + 1)));
        }
        out.push(ManifestEntry {
            name: f[0].to_string(),
            split: f[1].parse().map_err(|e: String| format_err(&path, format!("line {}: {e}", n + 1)))?,
            frames: f[2].parse().map_err(|_| format_err(&path, format!("line {}: bad frame count", n + 1)))?,
        });
    }
    Ok(out)
}

pub fn encode_ppm(rgb: &Tensor<f32>) -> Vec<u8> {
    let s = rgb.shape();
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(rgb.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Binary 8-bit PPM to `[H, W, 3]` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err("expected an 8-bit binary PPM (P6, maxval 255)".into());
    }
    let w: usize = fields[1].parse().map_err(|_| "bad PPM width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad PPM height")?;
    let data = bytes.get(pos + 1..pos + 1 + h * w * 3).ok_or("truncated PPM data")?;
    Ok(Tensor::from_vec(&[h, w, 3], data.iter().map(|&b| f32::from(b) / 255.0).collect()).unwrap())
}

/// One scene loaded for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub split: Split,
    pub calibration: Calibration<f64>,
    pub rgb: Vec<Tensor<f32>>,
    pub clouds: Vec<PointCloud<f32>>,
    /// Unnormalized front views at image resolution, fill 0.
    pub front_views: Vec<FrontViewImage<f32>>,
    pub gt: Vec<MaskSet>,
    pub motion: Vec<MaskSet>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn height(&self) -> usize {
        self.rgb[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb[0].shape()[1]
    }

    pub fn from_bundle(name: &str, split: Split, bundle: &SceneBundle) -> Result<Self, DataError> {
        let frames = &bundle.frames;
        Self::assemble(
            name,
            split,
            bundle.calibration.clone(),
            frames.iter().map(|f| f.rgb.clone()).collect(),
            frames.iter().map(|f| f.cloud.clone()).collect(),
            frames.iter().map(|f| f.gt.clone()).collect(),
            frames.iter().map(|f| f.motion.clone()).collect(),
        )
    }

    fn assemble(
        name: &str,
        split: Split,
        calibration: Calibration<f64>,
        rgb: Vec<Tensor<f32>>,
        clouds: Vec<PointCloud<f32>>,
        gt: Vec<LabelGrid>,
        motion: Vec<LabelGrid>,
    ) -> Result<Self, DataError> {
        let (h, w) = (rgb[0].shape()[0], rgb[0].shape()[1]);
        let front_views = clouds
            .iter()
            .map(|c| Ok(project_front_view(&c.cast::<f64>(), &calibration, h, w, 0.0)?.cast::<f32>()))
            .collect::<Result<Vec<_>, DataError>>()?;
        let gt = gt.iter().enumerate().map(|(t, g)| g.to_masks(t as u64)).collect();
        let motion = motion.iter().enumerate().map(|(t, g)| g.to_masks(t as u64)).collect();
        Ok(Self {
            name: name.to_string(),
            split,
            calibration,
            rgb,
            clouds,
            front_views,
            gt,
            motion,
        })
    }
}

fn frame_path(dir: &Path, kind: &str, t: usize, ext: &str) -> PathBuf {
    dir.join(format!("{kind}_{t:03}.{ext}"))
}

/// Writes a bundle under `root/name` and returns its manifest entry.
pub fn write_scene(root: &Path, name: &str, split: Split, bundle: &SceneBundle) -> Result<ManifestEntry, DataError> {
    let dir = root.join(name);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    pcproj::write_calibration(&dir.join("calib.txt"), &bundle.calibration)?;
    for (t, f) in bundle.frames.iter().enumerate() {
        let p = frame_path(&dir, "rgb", t, "ppm");
        fs::write(&p, encode_ppm(&f.rgb)).map_err(io_err(&p))?;
        pcproj::write_velodyne(&frame_path(&dir, "velodyne", t, "bin"), &f.cloud)?;
        write_label_pgm(&frame_path(&dir, "gt", t, "pgm"), &f.gt)?;
        write_label_pgm(&frame_path(&dir, "motion", t, "pgm"), &f.motion)?;
    }
    Ok(ManifestEntry {
        name: name.to_string(),
        split,
        frames: bundle.frames.len(),
    })
}

pub fn load_scene(root: &Path, entry: &ManifestEntry) -> Result<Sequence, DataError> {
    let dir = root.join(&entry.name);
    if entry.frames == 0 {
        return Err(format_err(&dir, "scene has no frames"));
    }
    let calibration = pcproj::read_calibration(&dir.join("calib.txt"))?;
    let (mut rgb, mut clouds, mut gt, mut motion) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in 0..entry.frames {
        let p = frame_path(&dir, "rgb", t, "ppm");
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let img = decode_ppm(&bytes).map_err(|e| format_err(&p, e))?;
        if let Some(first) = rgb.first() {
            if Tensor::shape(first) != img.shape() {
                return Err(format_err(&p, "frame size differs within scene"));
            }
        }
        rgb.push(img);
        clouds.push(pcproj::read_velodyne(&frame_path(&dir, "velodyne", t, "bin"), t as u64)?);
        let (h, w) = (rgb[0].shape()[0], rgb[0].shape()[1]);
        for (kind, out) in [("gt", &mut gt), ("motion", &mut motion)] {
            let p = frame_path(&dir, kind, t, "pgm");
            let g = read_label_pgm(&p)?;
            if (g.height, g.width) != (h, w) {
                return Err(format_err(&p, format!("labels {}x{} vs image {h}x{w}", g.height, g.width)));
            }
            out.push(g);
        }
    }
    Sequence::assemble(&entry.name, entry.split, calibration, rgb, clouds, gt, motion)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>, DataError> {
    read_manifest(root)?.iter().map(|e| load_scene(root, e)).collect()
}

/// Composition of a generated toy dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetConfig {
    pub seed: u64,
    pub train: usize,
    /// Night-degraded training scenes, distinct from the day ones.
    pub night_train: usize,
    pub test: usize,
    /// Night-degraded copies of the first test scenes.
    pub night_test: usize,
    pub night_strength: f64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 20,
            night_train: 5,
            test: 5,
            night_test: 5,
            night_strength: 0.9,
        }
    }
}

/// Named scenes of a toy dataset. Night scenes carry no motion masks:
/// optical flow is not expected to work on near-black frames.
pub fn toy_scenes(cfg: &ToyDatasetConfig) -> Result<Vec<(String, Split, SceneBundle)>, SynthError> {
    let scene_seed = |group: u64, i: usize| cfg.seed.wrapping_mul(1_000_003).wrapping_add(group * 100_000 + i as u64);
    let night = |b: &SceneBundle| -> Result<SceneBundle, SynthError> {
        let mut d = degrade(b, DegradeMode::Night, cfg.night_strength)?;
        for f in &mut d.frames {
            f.motion = LabelGrid::new(f.motion.height, f.motion.width);
        }
        Ok(d)
    };
    let mut out = Vec::new();
    for i in 0..cfg.train {
        out.push((format!("train_{i:03}"), Split::Train, generate(&SceneSpec::sample_toy(scene_seed(0, i)))?));
    }
    for i in 0..cfg.night_train {
        let b = generate(&SceneSpec::sample_toy(scene_seed(1, i)))?;
        out.push((format!("train_night_{i:03}"), Split::Train, night(&b)?));
    }
    let mut tests = Vec::new();
    for i in 0..cfg.test {
        tests.push(generate(&SceneSpec::sample_toy(scene_seed(2, i)))?);
    }
    for (i, b) in tests.iter().enumerate().take(cfg.night_test) {
        out.push((format!("test_night_{i:03}"), Split::Night, night(b)?));
    }
    for (i, b) in tests.into_iter().enumerate() {
        out.push((format!("test_{i:03}"), Split::Test, b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = generate(&SceneSpec::toy(2, 1, 1)).unwrap();
        let entry = write_scene(dir.path(), "scene_a", Split::Train, &bundle).unwrap();
        write_manifest(dir.path(), std::slice::from_ref(&entry)).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0], Sequence::from_bundle("scene_a", Split::Train, &bundle).unwrap());
    }

    #[test]
    fn manifest_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "a train\n").unwrap();
        assert!(read_manifest(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST_FILE), "# only comments\n").unwrap();
        assert!(read_manifest(dir.path()).unwrap().is_empty());
    }
}
