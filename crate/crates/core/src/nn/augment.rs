use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use super::spec::AugmentConfig;
use crate::error::{Error, Result};
use crate::volume::{apply_affine, AffineTransform3D, Interpolation, Volume3D};

/// Random rotation in the x–y plane about the volume centre followed by an
/// integer x/y shift. Zero ranges leave the input untouched.
pub fn augment<R: Rng>(x: &Volume3D, cfg: &AugmentConfig, rng: &mut R) -> Result<Volume3D> {
    let angle = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let s = cfg.max_shift as i64;
    let (sx, sy) = if s > 0 {
        (rng.gen_range(-s..=s), rng.gen_range(-s..=s))
    } else {
        (0, 0)
    };
    shift_rotate(x, angle, [sx, sy, 0])
}

/// Deterministic core of [`augment`].
pub fn shift_rotate(x: &Volume3D, angle: f64, shift: [i64; 3]) -> Result<Volume3D> {
    let dims = x.dims();
    if angle == 0.0 && shift == [0, 0, 0] {
        return Ok(x.clone());
    }
    let shift_f = shift.map(|v| v as f64);
    let t = if angle == 0.0 {
        AffineTransform3D::translation(shift_f).with_interpolation(Interpolation::Nearest)
    } else {
        let centre = [
            (dims.w() as f64 - 1.0) / 2.0,
            (dims.h() as f64 - 1.0) / 2.0,
            (dims.d() as f64 - 1.0) / 2.0,
        ];
        let r = AffineTransform3D::rotation_z_about(angle, centre);
        let t = r.translation_vector();
        AffineTransform3D::new(
            *r.linear(),
            [t[0] + shift_f[0], t[1] + shift_f[1], t[2] + shift_f[2]],
            Interpolation::Trilinear,
        )?
    };
    apply_affine(x, &t, dims)
}

/// ZCA whitening `W = U (Λ + ε)^(-1/2) Uᵀ` over the voxel covariance of a
/// training set, stored in low-rank form: directions outside the sample span
/// have zero variance and are scaled by `ε^(-1/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZcaWhitener {
    pub mean: Vec<f64>,
    /// Orthonormal eigenvectors, one per row.
    pub basis: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub epsilon: f64,
}

pub const ZCA_EPSILON: f64 = 1e-2;

impl ZcaWhitener {
    pub fn fit(samples: &[&[f64]], epsilon: f64) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidArgument("ZCA needs at least two samples".into()));
        }
        let p = samples[0].len();
        if samples.iter().any(|s| s.len() != p) {
            return Err(Error::Shape("ZCA samples differ in length".into()));
        }
        let mut mean = vec![0.0; p];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(*s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centred: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum::<f64>() / n as f64
        });
        let eig = SymmetricEigen::new(gram);
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let mut basis = Vec::new();
        let mut eigenvalues = Vec::new();
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= 1e-12 * max_ev.max(1e-300) {
                continue;
            }
            // covariance eigenvector = Xᵀu / sqrt(n λ)
            let norm = (n as f64 * lambda).sqrt();
            let mut v = vec![0.0; p];
            for (i, row) in centred.iter().enumerate() {
                let u = eig.eigenvectors[(i, k)];
                for (t, &x) in v.iter_mut().zip(row) {
                    *t += u * x / norm;
                }
            }
            basis.push(v);
            eigenvalues.push(lambda);
        }
        Ok(ZcaWhitener {
            mean,
            basis,
            eigenvalues,
            epsilon,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let base = 1.0 / self.epsilon.sqrt();
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let mut out: Vec<f64> = centred.iter().map(|v| v * base).collect();
        for (u, &lambda) in self.basis.iter().zip(&self.eigenvalues) {
            let coef =
                u.iter().zip(&centred).map(|(a, b)| a * b).sum::<f64>() * (1.0 / (lambda + self.epsilon).sqrt() - base);
            for (o, &ui) in out.iter_mut().zip(u) {
                *o += coef * ui;
            }
        }
        out
    }
}
