//! Dense 3D scalar volumes and the numeric primitives shared by every stage
//! of the pipeline.
//!
//! Voxels are stored row-major with x varying fastest: the voxel at
//! `(x, y, z)` lives at `x + w * (y + h * z)`. Every module indexes through
//! [`Dims::index`] and [`Dims::coords`] so attribution maps and inputs never
//! drift out of alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Volume extent `[w, h, d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(w: usize, h: usize, d: usize) -> Self {
        Dims([w, h, d])
    }

    pub fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let w = self.0[0];
        let h = self.0[1];
        [i % w, (i / w) % h, i / (w * h)]
    }

    #[inline]
    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.0[a])
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Dense 3D scalar field. Immutable once built; every voxel is finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume3D {
    dims: Dims,
    data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spacing: Option<[f64; 3]>,
}

impl Volume3D {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.0.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be positive, got {dims}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} voxels for dims {dims} (expected {})",
                data.len(),
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {:?} = {}", dims.coords(i), data[i])));
        }
        Ok(Volume3D {
            dims,
            data,
            spacing: None,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(value.is_finite());
        assert!(!dims.is_empty(), "volume dims must be positive");
        Volume3D {
            dims,
            data: vec![value; dims.len()],
            spacing: None,
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.d() {
            for y in 0..dims.h() {
                for x in 0..dims.w() {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        self.spacing = Some(spacing);
        Ok(self)
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Voxelwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume3D> {
        let mut out = Volume3D::new(self.dims, self.data.iter().map(|&v| f(v)).collect())?;
        out.spacing = self.spacing;
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Volume3D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn ensure_dims(&self, expected: Dims) -> Result<()> {
        if self.dims != expected {
            return Err(Error::DimensionMismatch {
                expected: expected.0,
                actual: self.dims.0,
            });
        }
        Ok(())
    }
}

/// Ordered, strictly positive weights for [`weighted_average`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightTensor(Vec<f64>);

impl WeightTensor {
    /// Six-component weights used when collapsing PCA components.
    pub const PCA_SIX: [f64; 6] = [0.85, 0.7, 0.5, 0.3, 0.1, 0.001];

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty weight tensor".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "weights must be strictly positive, got {w}"
            )));
        }
        Ok(WeightTensor(weights))
    }

    pub fn pca_six() -> Self {
        WeightTensor(Self::PCA_SIX.to_vec())
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<Vec<f64>> for WeightTensor {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightTensor::new(v)
    }
}

impl From<WeightTensor> for Vec<f64> {
    fn from(w: WeightTensor) -> Self {
        w.0
    }
}

/// Voxelwise `Σ wᵢ·xᵢ / Σ wᵢ`.
pub fn weighted_average(volumes: &[&Volume3D], w: &WeightTensor) -> Result<Volume3D> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidArgument("weighted_average of an empty list".into()))?;
    if volumes.len() != w.len() {
        return Err(Error::Shape(format!(
            "{} volumes but {} weights",
            volumes.len(),
            w.len()
        )));
    }
    let dims = first.dims();
    for v in volumes {
        v.ensure_dims(dims)?;
    }
    let total = w.sum();
    let mut acc = vec![0.0; dims.len()];
    for (v, &wi) in volumes.iter().zip(w.weights()) {
        for (a, &x) in acc.iter_mut().zip(v.data()) {
            *a += wi * x;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Volume3D::new(dims, acc)
}

/// Rescale to `[0, 1]`. A constant volume maps to all zeros.
pub fn minmax_normalize(v: &Volume3D) -> Volume3D {
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data().iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.len()]
    };
    Volume3D {
        dims: v.dims(),
        data,
        spacing: v.spacing(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Trilinear,
}

/// Affine map from source voxel coordinates to output voxel coordinates:
/// `p_out = linear · p_src + translation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform3D {
    linear: [[f64; 3]; 3],
    translation: [f64; 3],
    #[serde(default)]
    interpolation: Interpolation,
}

impl AffineTransform3D {
    pub fn new(linear: [[f64; 3]; 3], translation: [f64; 3], interpolation: Interpolation) -> Result<Self> {
        let t = AffineTransform3D {
            linear,
            translation,
            interpolation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        AffineTransform3D {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            interpolation: Interpolation::Trilinear,
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        AffineTransform3D {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn scaling(s: [f64; 3]) -> Result<Self> {
        Self::new(
            [[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]],
            [0.0; 3],
            Interpolation::Trilinear,
        )
    }

    /// Rotation by `radians` in the x–y plane about the point `center`.
    pub fn rotation_z_about(radians: f64, center: [f64; 3]) -> Self {
        let (s, c) = radians.sin_cos();
        let linear = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        // t = center - R·center
        let mut translation = [0.0; 3];
        for r in 0..3 {
            let rc: f64 = (0..3).map(|k| linear[r][k] * center[k]).sum();
            translation[r] = center[r] - rc;
        }
        AffineTransform3D {
            linear,
            translation,
            interpolation: Interpolation::Trilinear,
        }
    }

    pub fn with_interpolation(mut self, mode: Interpolation) -> Self {
        self.interpolation = mode;
        self
    }

    pub fn linear(&self) -> &[[f64; 3]; 3] {
        &self.linear
    }

    pub fn translation_vector(&self) -> [f64; 3] {
        self.translation
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.linear;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::SingularTransform { det });
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("affine translation".into()));
        }
        Ok(())
    }

    /// Inverse as (linear, translation), via the adjugate. Exact for the
    /// identity and for signed permutation matrices.
    fn inverse_parts(&self) -> Result<([[f64; 3]; 3], [f64; 3])> {
        self.validate()?;
        let m = &self.linear;
        let det = self.determinant();
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                inv[r][c] = adj[r][c] / det;
            }
        }
        let mut t = [0.0; 3];
        for r in 0..3 {
            t[r] = -(0..3).map(|k| inv[r][k] * self.translation[k]).sum::<f64>();
        }
        Ok((inv, t))
    }
}

/// Resample `v` into a grid of `out_dims` by inverse-mapping every output
/// voxel. Samples that land outside the source domain are 0.
pub fn apply_affine(v: &Volume3D, t: &AffineTransform3D, out_dims: Dims) -> Result<Volume3D> {
    let (inv, shift) = t.inverse_parts()?;
    if out_dims.is_empty() {
        return Err(Error::InvalidArgument("empty output dims".into()));
    }
    let mut out = Vec::with_capacity(out_dims.len());
    for z in 0..out_dims.d() {
        for y in 0..out_dims.h() {
            for x in 0..out_dims.w() {
                let p = [x as f64, y as f64, z as f64];
                let mut s = [0.0; 3];
                for r in 0..3 {
                    s[r] = inv[r][0] * p[0] + inv[r][1] * p[1] + inv[r][2] * p[2] + shift[r];
                }
                out.push(match t.interpolation {
                    Interpolation::Nearest => sample_nearest(v, s),
                    Interpolation::Trilinear => sample_trilinear(v, s),
                });
            }
        }
    }
    Volume3D::new(out_dims, out)
}

fn sample_nearest(v: &Volume3D, s: [f64; 3]) -> f64 {
    let p = [s[0].round() as i64, s[1].round() as i64, s[2].round() as i64];
    if v.dims().contains(p) {
        v.get(p[0] as usize, p[1] as usize, p[2] as usize)
    } else {
        0.0
    }
}

/// Trilinear sample with zero outside the grid. Positions more than one
/// voxel outside contribute nothing.
fn sample_trilinear(v: &Volume3D, s: [f64; 3]) -> f64 {
    let dims = v.dims();
    let base = [s[0].floor(), s[1].floor(), s[2].floor()];
    let frac = [s[0] - base[0], s[1] - base[1], s[2] - base[2]];
    let b = [base[0] as i64, base[1] as i64, base[2] as i64];
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut wgt = 1.0;
        let mut p = [0i64; 3];
        for a in 0..3 {
            p[a] = b[a] + o[a] as i64;
            wgt *= if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if wgt == 0.0 || !dims.contains(p) {
            continue;
        }
        acc += wgt * v.get(p[0] as usize, p[1] as usize, p[2] as usize);
    }
    acc
}

/// Trilinear resize with half-voxel-centred sampling and edge clamping.
/// Used to lift coarse activation maps to input resolution.
pub fn resize_trilinear(v: &Volume3D, out_dims: Dims) -> Result<Volume3D> {
    let src = v.dims();
    if src == out_dims {
        return Ok(v.clone());
    }
    let axis_samples = |a: usize| -> Vec<(usize, usize, f64)> {
        let n_in = src.0[a];
        let n_out = out_dims.0[a];
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let (sx, sy, sz) = (axis_samples(0), axis_samples(1), axis_samples(2));
    let mut out = Vec::with_capacity(out_dims.len());
    for &(z0, z1, fz) in &sz {
        for &(y0, y1, fy) in &sy {
            for &(x0, x1, fx) in &sx {
                let c00 = v.get(x0, y0, z0) * (1.0 - fx) + v.get(x1, y0, z0) * fx;
                let c10 = v.get(x0, y1, z0) * (1.0 - fx) + v.get(x1, y1, z0) * fx;
                let c01 = v.get(x0, y0, z1) * (1.0 - fx) + v.get(x1, y0, z1) * fx;
                let c11 = v.get(x0, y1, z1) * (1.0 - fx) + v.get(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                out.push(c0 * (1.0 - fz) + c1 * fz);
            }
        }
    }
    Volume3D::new(out_dims, out)
}

/// Pearson correlation. Errors when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "pearson over series of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0) || !(sbb > 0.0) {
        return Err(Error::UndefinedCorrelation(format!(
            "zero variance (var_a = {:e}, var_b = {:e})",
            saa / n,
            sbb / n
        )));
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    if !r.is_finite() {
        return Err(Error::NonFinite("pearson".into()));
    }
    Ok(r.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: Dims, data: &[f64]) -> Volume3D {
        Volume3D::new(dims, data.to_vec()).unwrap()
    }

    fn random_volume(dims: Dims, rng: &mut ChaCha8Rng) -> Volume3D {
        Volume3D::new(dims, (0..dims.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(Volume3D::new(Dims::cube(1), vec![f64::NAN]).is_err());
        assert!(Volume3D::new(Dims::cube(2), vec![0.0; 7]).is_err());
        assert!(Volume3D::new(Dims::new(0, 1, 1), vec![]).is_err());
    }

    #[test]
    fn index_layout_is_x_fastest() {
        let d = Dims::new(3, 4, 5);
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 3);
        assert_eq!(d.index(0, 0, 1), 12);
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }

    #[test]
    fn weighted_average_hand_arithmetic() {
        let a = vol(Dims::cube(1), &[2.0]);
        let b = vol(Dims::cube(1), &[4.0]);
        let w = WeightTensor::new(vec![1.0, 3.0]).unwrap();
        let g = weighted_average(&[&a, &b], &w).unwrap();
        assert_eq!(g.data(), &[3.5]);
    }

    #[test]
    fn weighted_average_of_identical_volumes_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(Dims::cube(3), &mut rng);
        let refs = vec![&v; 6];
        let g = weighted_average(&refs, &WeightTensor::pca_six()).unwrap();
        assert!(g.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn weighted_average_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = Dims::cube(4);
        let vols: Vec<Volume3D> = (0..6).map(|_| random_volume(dims, &mut rng)).collect();
        let w = WeightTensor::pca_six();
        let refs: Vec<&Volume3D> = vols.iter().collect();
        let g = weighted_average(&refs, &w).unwrap();
        for i in 0..dims.len() {
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..6 {
                num += WeightTensor::PCA_SIX[k] * vols[k].data()[i];
                den += WeightTensor::PCA_SIX[k];
            }
            assert!((g.data()[i] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_average_errors() {
        let a = vol(Dims::cube(1), &[1.0]);
        let b = vol(Dims::cube(2), &[0.0; 8]);
        let w2 = WeightTensor::new(vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            weighted_average(&[&a, &b], &w2),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(weighted_average(&[], &w2).is_err());
        assert!(weighted_average(&[&a], &w2).is_err());
        assert!(WeightTensor::new(vec![1.0, 0.0]).is_err());
        assert!(WeightTensor::new(vec![1.0, -2.0]).is_err());
        assert!(WeightTensor::new(vec![]).is_err());
    }

    #[test]
    fn minmax_examples() {
        let v = vol(Dims::new(3, 1, 1), &[1.0, 3.0, 5.0]);
        assert_eq!(minmax_normalize(&v).data(), &[0.0, 0.5, 1.0]);
        let c = vol(Dims::new(3, 1, 1), &[7.0, 7.0, 7.0]);
        assert_eq!(minmax_normalize(&c).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_affine_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(Dims::new(4, 5, 3), &mut rng);
        for mode in [Interpolation::Nearest, Interpolation::Trilinear] {
            let t = AffineTransform3D::identity().with_interpolation(mode);
            let out = apply_affine(&v, &t, v.dims()).unwrap();
            assert_eq!(out.data(), v.data());
        }
    }

    #[test]
    fn integer_translation_shifts_and_zero_fills() {
        let dims = Dims::new(4, 3, 2);
        let v = Volume3D::from_fn(dims, |x, y, z| 1.0 + (x + 10 * y + 100 * z) as f64).unwrap();
        let t = AffineTransform3D::translation([1.0, 0.0, 0.0]).with_interpolation(Interpolation::Nearest);
        let out = apply_affine(&v, &t, dims).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                // out(x) = v(x - 1); x = 0 has no source
                assert_eq!(out.get(0, y, z), 0.0);
                for x in 1..4 {
                    assert_eq!(out.get(x, y, z), v.get(x - 1, y, z));
                }
            }
        }
        // shifting the other way empties the trailing face
        let back = AffineTransform3D::translation([-1.0, 0.0, 0.0]).with_interpolation(Interpolation::Nearest);
        let out = apply_affine(&v, &back, dims).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                assert_eq!(out.get(3, y, z), 0.0);
                assert_eq!(out.get(0, y, z), v.get(1, y, z));
            }
        }
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let dims = Dims::cube(3);
        // asymmetric marker: distinct value per voxel
        let v = Volume3D::from_fn(dims, |x, y, z| (x + 3 * y + 9 * z) as f64 + 1.0).unwrap();
        // 90° about z through the centre (1,1,1): (x, y) -> (2 - y, x)
        let t = AffineTransform3D::new(
            [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            [2.0, 0.0, 0.0],
            Interpolation::Trilinear,
        )
        .unwrap();
        let out = apply_affine(&v, &t, dims).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let (ox, oy) = (2 - y, x);
                    assert_eq!(out.get(ox, oy, z), v.get(x, y, z));
                }
            }
        }
        let rot = AffineTransform3D::rotation_z_about(std::f64::consts::FRAC_PI_2, [1.0; 3]);
        let out2 = apply_affine(&v, &rot, dims).unwrap();
        assert!(out2.max_abs_diff(&out) < 1e-9);
    }

    #[test]
    fn singular_transform_rejected() {
        let t = AffineTransform3D::new(
            [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            Interpolation::Nearest,
        );
        assert!(matches!(t, Err(Error::SingularTransform { .. })));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let v = Volume3D::filled(Dims::cube(2), 0.25);
        let r = resize_trilinear(&v, Dims::cube(8)).unwrap();
        assert!(r.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_matches_two_pass_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let a: Vec<f64> = (0..70).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| 0.3 * x + rng.gen_range(-1.0..1.0)).collect();
        let n = 70.0;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let oracle = cov / (sa * sb);
        assert!((pearson(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn equal_weights_give_arithmetic_mean(
            vals in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 8), 1..6),
            w in 0.01f64..100.0,
        ) {
            let vols: Vec<Volume3D> = vals.iter().map(|v| vol(Dims::cube(2), v)).collect();
            let refs: Vec<&Volume3D> = vols.iter().collect();
            let g = weighted_average(&refs, &WeightTensor::new(vec![w; vols.len()]).unwrap()).unwrap();
            for i in 0..8 {
                let mean = vals.iter().map(|v| v[i]).sum::<f64>() / vals.len() as f64;
                prop_assert!((g.data()[i] - mean).abs() < 1e-12);
            }
        }

        #[test]
        fn weighted_average_scale_invariant(
            vals in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 8), 2..5),
            ws in prop::collection::vec(0.01f64..10.0, 5),
            c in 0.001f64..1000.0,
        ) {
            let vols: Vec<Volume3D> = vals.iter().map(|v| vol(Dims::cube(2), v)).collect();
            let refs: Vec<&Volume3D> = vols.iter().collect();
            let w = WeightTensor::new(ws[..vols.len()].to_vec()).unwrap();
            let ws2 = WeightTensor::new(w.weights().iter().map(|x| x * c).collect()).unwrap();
            let a = weighted_average(&refs, &w).unwrap();
            let b = weighted_average(&refs, &ws2).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }

        #[test]
        fn minmax_preserves_order(vals in prop::collection::vec(-1e3f64..1e3, 27)) {
            let v = vol(Dims::cube(3), &vals);
            let n = minmax_normalize(&v);
            prop_assert!(n.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            for i in 0..27 {
                for j in 0..27 {
                    if vals[i] < vals[j] {
                        prop_assert!(n.data()[i] <= n.data()[j]);
                    }
                }
            }
            let argmax = |d: &[f64]| d.iter().enumerate().fold(0, |b, (i, &x)| if x > d[b] { i } else { b });
            let argmin = |d: &[f64]| d.iter().enumerate().fold(0, |b, (i, &x)| if x < d[b] { i } else { b });
            prop_assert_eq!(argmax(&vals), argmax(n.data()));
            prop_assert_eq!(argmin(&vals), argmin(n.data()));
        }

        #[test]
        fn pearson_symmetric_and_affine_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 5..40),
            scale in 0.1f64..10.0,
            offset in -5.0f64..5.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(-2.0..2.0)).collect();
            if let (Ok(r1), Ok(r2)) = (pearson(&a, &b), pearson(&b, &a)) {
                prop_assert!((r1 - r2).abs() < 1e-12);
                let a2: Vec<f64> = a.iter().map(|x| scale * x + offset).collect();
                let r3 = pearson(&a2, &b).unwrap();
                prop_assert!((r1 - r3).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r1));
            }
        }
    }
}
