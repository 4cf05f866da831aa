//! Grayscale slice images (binary PGM) of a volume.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use xai3d_core::volume::{minmax_normalize, Volume3D};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(format!("axis must be x, y or z, got {s:?}")),
        }
    }
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    fn name(self) -> &'static str {
        ["x", "y", "z"][self.index()]
    }
}

/// One image per slice: `(cols, rows, pixels)`. The two remaining axes map
/// to columns and rows in x, y, z order.
pub fn slice_images(v: &Volume3D, axis: Axis) -> Vec<(usize, usize, Vec<u8>)> {
    let n = minmax_normalize(v);
    let dims = v.dims();
    let a = axis.index();
    let (c_ax, r_ax) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    (0..dims.0[a])
        .map(|k| {
            let (cols, rows) = (dims.0[c_ax], dims.0[r_ax]);
            let mut px = Vec::with_capacity(cols * rows);
            for r in 0..rows {
                for c in 0..cols {
                    let mut p = [0usize; 3];
                    p[a] = k;
                    p[c_ax] = c;
                    p[r_ax] = r;
                    px.push((255.0 * n.get(p[0], p[1], p[2])).round() as u8);
                }
            }
            (cols, rows, px)
        })
        .collect()
}

pub fn emit_slices(v: &Volume3D, axis: Axis, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (k, (cols, rows, px)) in slice_images(v, axis).into_iter().enumerate() {
        let path = out_dir.join(format!("slice_{}_{k:03}.pgm", axis.name()));
        let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
        bytes.extend_from_slice(&px);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use xai3d_core::Dims;

    #[test]
    fn constant_volume_gives_uniform_black_images() {
        let v = Volume3D::filled(Dims::new(3, 4, 5), 2.0);
        let imgs = slice_images(&v, Axis::Y);
        assert_eq!(imgs.len(), 4);
        for (c, r, px) in imgs {
            assert_eq!((c, r), (3, 5));
            assert!(px.iter().all(|&p| p == 0));
        }
    }

    #[test]
    fn pixels_follow_rounding() {
        let dims = Dims::new(2, 3, 2);
        let v = Volume3D::from_fn(dims, |x, y, z| (x + 2 * y + 6 * z) as f64).unwrap();
        let imgs = slice_images(&v, Axis::Z);
        assert_eq!(imgs.len(), 2);
        for (z, (cols, rows, px)) in imgs.iter().enumerate() {
            assert_eq!((*cols, *rows), (2, 3));
            for y in 0..3 {
                for x in 0..2 {
                    let want = (255.0 * (x + 2 * y + 6 * z) as f64 / 11.0).round() as u8;
                    assert_eq!(px[x + 2 * y], want);
                }
            }
        }
    }

    #[test]
    fn files_are_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::from_fn(Dims::new(2, 2, 3), |x, _, _| x as f64).unwrap();
        let paths = emit_slices(&v, Axis::X, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let bytes = fs::read(&paths[1]).unwrap();
        assert!(bytes.starts_with(b"P5\n2 3\n255\n"));
        assert!(bytes[11..].iter().all(|&p| p == 255));
    }
}
