use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Calibration, FrontViewImage, Point, PointCloud, ProjError, FV_CHANNELS};

const FV_MAGIC: &[u8; 4] = b"FVIM";

fn format_err(path: &Path, reason: impl Into<String>) -> ProjError {
    ProjError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Reads a KITTI velodyne scan: packed little-endian `f32` (x, y, z, r).
pub fn read_velodyne(path: &Path, frame_id: u64) -> Result<PointCloud<f32>, ProjError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(format_err(path, format!("size {} is not a multiple of 16", bytes.len())));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
            Point {
                x: f(0),
                y: f(1),
                z: f(2),
                reflectance: f(3),
            }
        })
        .collect();
    Ok(PointCloud { points, frame_id })
}

pub fn write_velodyne(path: &Path, pc: &PointCloud<f32>) -> Result<(), ProjError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.reflectance] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_row<const N: usize>(path: &Path, key: &str, values: &[f64]) -> Result<Vec<[f64; N]>, ProjError> {
    if values.len() % N != 0 {
        return Err(format_err(path, format!("{key}: expected a multiple of {N} values")));
    }
    Ok(values.chunks_exact(N).map(|c| c.try_into().unwrap()).collect())
}

/// Parses `KEY: v1 v2 ...` calibration text with keys `P2`, `R0_rect`,
/// `Tr_velo_to_cam`. Other keys are ignored.
pub fn read_calibration(path: &Path) -> Result<Calibration<f64>, ProjError> {
    let text = fs::read_to_string(path)?;
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        if !matches!(key, "P2" | "R0_rect" | "Tr_velo_to_cam") {
            continue;
        }
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format_err(path, format!("{key}: {e}")))?;
        match (key, values.len()) {
            ("P2", 12) => {
                let rows = parse_row::<4>(path, key, &values)?;
                p2 = Some([rows[0], rows[1], rows[2]]);
            }
            ("R0_rect", 9) => {
                let rows = parse_row::<3>(path, key, &values)?;
                r0 = Some([rows[0], rows[1], rows[2]]);
            }
            ("Tr_velo_to_cam", 12) => {
                let rows = parse_row::<4>(path, key, &values)?;
                tr = Some([rows[0], rows[1], rows[2]]);
            }
            (_, n) => return Err(format_err(path, format!("{key}: unexpected {n} values"))),
        }
    }
    let calib = Calibration {
        projection: p2.ok_or_else(|| format_err(path, "missing P2"))?,
        rectification: r0.ok_or_else(|| format_err(path, "missing R0_rect"))?,
        lidar_to_camera: tr.ok_or_else(|| format_err(path, "missing Tr_velo_to_cam"))?,
    };
    calib.validate()?;
    Ok(calib)
}

pub fn write_calibration(path: &Path, calib: &Calibration<f64>) -> Result<(), ProjError> {
    fn join<'a>(rows: impl Iterator<Item = &'a f64>) -> String {
        rows.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
    }
    let text = format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        join(calib.projection.iter().flatten()),
        join(calib.rectification.iter().flatten()),
        join(calib.lidar_to_camera.iter().flatten()),
    );
    fs::write(path, text)?;
    Ok(())
}

/// Front-view file: `"FVIM"`, u32 height, u32 width, f32 fill, then
/// `H'·W'·4` little-endian `f32` values, row-major.
pub fn write_front_view(path: &Path, fv: &FrontViewImage<f32>) -> Result<(), ProjError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FV_MAGIC)?;
    w.write_all(&(fv.height() as u32).to_le_bytes())?;
    w.write_all(&(fv.width() as u32).to_le_bytes())?;
    w.write_all(&fv.fill().to_le_bytes())?;
    for v in fv.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_front_view(path: &Path) -> Result<FrontViewImage<f32>, ProjError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != FV_MAGIC {
        return Err(format_err(path, "missing FVIM header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let height = u32_at(4);
    let width = u32_at(8);
    let fill = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let expected = 16 + height * width * FV_CHANNELS * 4;
    if bytes.len() != expected {
        return Err(format_err(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FrontViewImage::from_raw(height, width, fill, data).ok_or_else(|| format_err(path, "inconsistent size"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velodyne_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000000.bin");
        let pc = PointCloud::new(
            vec![Point {
                x: 1.5,
                y: -2.0,
                z: 0.25,
                reflectance: 0.9,
            }],
            0,
        );
        write_velodyne(&path, &pc).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16);
        assert_eq!(read_velodyne(&path, 0).unwrap(), pc);
    }

    #[test]
    fn calibration_parses_kitti_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        fs::write(
            &path,
            "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n\
             P2: 7.2e2 0 6.0e2 4.4e1 0 7.2e2 1.7e2 2.1e-1 0 0 1 2.7e-3\n\
             R0_rect: 1 0 0 0 1 0 0 0 1\n\
             Tr_velo_to_cam: 0 -1 0 0 0 0 -1 -0.08 1 0 0 -0.27\n\
             Tr_imu_to_velo: 1 0 0 0 0 1 0 0 0 0 1 0\n",
        )
        .unwrap();
        let c = read_calibration(&path).unwrap();
        assert_eq!(c.projection[0][0], 720.0);
        assert_eq!(c.projection[2][3], 2.7e-3);
        assert_eq!(c.lidar_to_camera[1][3], -0.08);
        let back = dir.path().join("back.txt");
        write_calibration(&back, &c).unwrap();
        assert_eq!(read_calibration(&back).unwrap(), c);
    }

    #[test]
    fn calibration_missing_key_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        fs::write(&path, "P2: 1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(read_calibration(&path).is_err());
    }

    #[test]
    fn front_view_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fvim");
        let mut fv = FrontViewImage::<f32>::empty(2, 3, 0.0);
        fv.set_pixel(1, 2, [1.0, 2.0, 3.0, 4.0]);
        write_front_view(&path, &fv).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 2 * 3 * 4 * 4);
        assert_eq!(&bytes[..4], b"FVIM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        let back = read_front_view(&path).unwrap();
        assert_eq!(back, fv);
        assert_eq!(back.valid_set(), vec![(1, 2)]);
    }
}
