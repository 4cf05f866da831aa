//! Cohort-level explanations: PCA over per-subject maps, six-component
//! weighted totals, and the three-way fusion with its ablation table.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cohort::{Hemisphere, Modality};
use crate::error::{Error, Result};
use crate::local::Scorer;
use crate::metrics::{score_global, ExplanationScore, PerturbationPolicy};
use crate::volume::{
    apply_affine, minmax_normalize, weighted_average, AffineTransform3D, Dims, Volume3D, WeightTensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub dims: Dims,
    pub mean: Vec<f64>,
    /// Orthonormal voxel-space directions, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues matching `components`.
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub total_variance: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top-`k` principal components of the samples (subjects as observations,
/// voxels as features). Uses the `n×n` Gram matrix when there are fewer
/// samples than voxels.
pub fn fit_pca(samples: &[&Volume3D], k: usize) -> Result<PcaModel> {
    let n = samples.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "PCA needs 1 <= k <= samples, got k = {k} with {n} samples"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two samples".into()));
    }
    let dims = samples[0].dims();
    for s in samples {
        s.ensure_dims(dims)?;
    }
    let p = dims.len();
    let mut mean = vec![0.0; p];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.data().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let denom = (n - 1) as f64;
    let total_variance: f64 = centred.iter().map(|c| dot(c, c)).sum::<f64>() / denom;
    if !(total_variance > 0.0) {
        return Err(Error::ZeroVariance(format!("{n} identical samples")));
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = if n < p {
        let gram = DMatrix::from_fn(n, n, |i, j| dot(&centred[i], &centred[j]) / denom);
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .map(|c| {
                let lambda = eig.eigenvalues[c];
                let mut v = vec![0.0; p];
                for (i, row) in centred.iter().enumerate() {
                    let u = eig.eigenvectors[(i, c)];
                    for (t, x) in v.iter_mut().zip(row) {
                        *t += u * x;
                    }
                }
                let norm = dot(&v, &v).sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|t| *t /= norm);
                }
                (lambda, v)
            })
            .collect()
    } else {
        let cov = DMatrix::from_fn(p, p, |a, b| centred.iter().map(|c| c[a] * c[b]).sum::<f64>() / denom);
        let eig = SymmetricEigen::new(cov);
        (0..p)
            .map(|c| (eig.eigenvalues[c], eig.eigenvectors.column(c).iter().copied().collect()))
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let tol = 1e-12 * total_variance;
    let rank = pairs.iter().filter(|(l, _)| *l > tol).count();
    if rank < k {
        return Err(Error::InvalidArgument(format!(
            "data has rank {rank}, fewer than the {k} requested components"
        )));
    }
    pairs.truncate(k);
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (lambda, mut v) in pairs {
        fix_sign(&mut v);
        components.push(v);
        eigenvalues.push(lambda);
    }
    let explained_variance_ratio = eigenvalues.iter().map(|l| l / total_variance).collect();
    Ok(PcaModel {
        dims,
        mean,
        components,
        eigenvalues,
        explained_variance_ratio,
        total_variance,
    })
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn variance_captured(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    pub fn project(&self, x: &Volume3D) -> Result<Vec<f64>> {
        x.ensure_dims(self.dims)?;
        let c: Vec<f64> = x.data().iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(self.components.iter().map(|u| dot(u, &c)).collect())
    }

    /// Mean plus the projection onto the first `k` components.
    pub fn reconstruct(&self, x: &Volume3D, k: usize) -> Result<Volume3D> {
        let coef = self.project(x)?;
        let mut out = self.mean.clone();
        for (u, a) in self.components.iter().zip(&coef).take(k) {
            for (o, ui) in out.iter_mut().zip(u) {
                *o += a * ui;
            }
        }
        Volume3D::new(self.dims, out)
    }

    /// Component `i` on the voxel grid, without normalization.
    pub fn component_raw(&self, i: usize) -> Result<Volume3D> {
        let c = self
            .components
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("component {i} out of range (k = {})", self.k())))?;
        Volume3D::new(self.dims, c.clone())
    }

    /// Component `i` on the voxel grid, scaled to [0, 1].
    pub fn component_volume(&self, i: usize) -> Result<Volume3D> {
        Ok(minmax_normalize(&self.component_raw(i)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    TotalShape,
    TotalShap,
    TotalGradcam,
    Framework,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::TotalShape => "total_shape",
            Source::TotalShap => "total_shap",
            Source::TotalGradcam => "total_gradcam",
            Source::Framework => "framework",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalExplanation {
    /// Values in [0, 1].
    pub map: Volume3D,
    pub source: Source,
    pub class_index: Option<usize>,
    pub modality: Option<Modality>,
    pub hemisphere: Option<Hemisphere>,
    /// Weights used to combine the contributing volumes.
    pub weights: Vec<f64>,
}

impl GlobalExplanation {
    pub fn tagged(mut self, class_index: usize, modality: Modality, hemisphere: Hemisphere) -> Self {
        self.class_index = Some(class_index);
        self.modality = Some(modality);
        self.hemisphere = Some(hemisphere);
        self
    }
}

/// Weighted average of the normalized component volumes, normalized again.
pub fn total_from_pca(m: &PcaModel, w: &WeightTensor, source: Source) -> Result<GlobalExplanation> {
    if m.k() != w.len() {
        return Err(Error::Shape(format!("{} components but {} weights", m.k(), w.len())));
    }
    let vols: Vec<Volume3D> = (0..m.k()).map(|i| m.component_volume(i)).collect::<Result<_>>()?;
    let refs: Vec<&Volume3D> = vols.iter().collect();
    Ok(GlobalExplanation {
        map: minmax_normalize(&weighted_average(&refs, w)?),
        source,
        class_index: None,
        modality: None,
        hemisphere: None,
        weights: w.weights().to_vec(),
    })
}

/// Fusion weights in the fixed order (shape, shap, gradcam); always a
/// permutation of 0.85, 0.5 and 0.1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub struct FusionWeights([f64; 3]);

pub const FUSION_CODES: [u16; 6] = [851, 815, 185, 158, 518, 581];

fn digit_weight(d: u16) -> Option<f64> {
    match d {
        8 => Some(0.85),
        5 => Some(0.5),
        1 => Some(0.1),
        _ => None,
    }
}

impl FusionWeights {
    /// `851` means shape 0.85, shap 0.5, gradcam 0.1.
    pub fn from_code(code: u16) -> Result<Self> {
        let digits = [code / 100, code / 10 % 10, code % 10];
        let mut sorted = digits;
        sorted.sort();
        if code >= 1000 || sorted != [1, 5, 8] {
            return Err(Error::InvalidArgument(format!(
                "fusion code {code} is not a permutation of 8, 5, 1"
            )));
        }
        Ok(FusionWeights(digits.map(|d| digit_weight(d).expect("checked digit"))))
    }

    pub fn code(&self) -> u16 {
        self.0.iter().fold(0, |acc, w| {
            acc * 10
                + if *w == 0.85 {
                    8
                } else if *w == 0.5 {
                    5
                } else {
                    1
                }
        })
    }

    pub fn weights(&self) -> [f64; 3] {
        self.0
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights([0.85, 0.5, 0.1])
    }
}

impl TryFrom<u16> for FusionWeights {
    type Error = Error;
    fn try_from(code: u16) -> Result<Self> {
        Self::from_code(code)
    }
}

impl From<FusionWeights> for u16 {
    fn from(w: FusionWeights) -> u16 {
        w.code()
    }
}

/// Three-way weighted average before normalization.
pub fn fuse_raw(shape: &Volume3D, shap: &Volume3D, gradcam: &Volume3D, w: FusionWeights) -> Result<Volume3D> {
    weighted_average(&[shape, shap, gradcam], &WeightTensor::new(w.0.to_vec())?)
}

/// Optional per-source transforms into the total-Shape grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub shape: Option<AffineTransform3D>,
    pub shap: Option<AffineTransform3D>,
    pub gradcam: Option<AffineTransform3D>,
}

fn aligned(v: &Volume3D, t: Option<&AffineTransform3D>, dims: Dims) -> Result<Volume3D> {
    match t {
        Some(t) => apply_affine(v, t, dims),
        None => Ok(v.clone()),
    }
}

pub fn fuse_framework(
    shape: &GlobalExplanation,
    shap: &GlobalExplanation,
    gradcam: &GlobalExplanation,
    w: FusionWeights,
    align: &Alignment,
) -> Result<GlobalExplanation> {
    let dims = shape.map.dims();
    let a = aligned(&shape.map, align.shape.as_ref(), dims)?;
    let b = aligned(&shap.map, align.shap.as_ref(), dims)?;
    let c = aligned(&gradcam.map, align.gradcam.as_ref(), dims)?;
    Ok(GlobalExplanation {
        map: minmax_normalize(&fuse_raw(&a, &b, &c, w)?),
        source: Source::Framework,
        class_index: shape.class_index,
        modality: shape.modality,
        hemisphere: shape.hemisphere,
        weights: w.0.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub code: u16,
    pub explanation: GlobalExplanation,
    pub score: ExplanationScore,
}

/// Fuses and scores every weight permutation.
pub fn run_ablation(
    shape: &GlobalExplanation,
    shap: &GlobalExplanation,
    gradcam: &GlobalExplanation,
    align: &Alignment,
    f: &dyn Scorer,
    pol: &PerturbationPolicy,
) -> Result<Vec<AblationRow>> {
    FUSION_CODES
        .iter()
        .map(|&code| {
            let explanation = fuse_framework(shape, shap, gradcam, FusionWeights::from_code(code)?, align)?;
            let score = score_global(shape, &explanation, f, pol)?;
            Ok(AblationRow {
                code,
                explanation,
                score,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("code,hemisphere,modality,class,faithfulness,complexity\n");
    for r in rows {
        let e = &r.explanation;
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.code,
            e.hemisphere.map_or(String::new(), |h| h.to_string()),
            e.modality.map_or(String::new(), |m| m.to_string()),
            e.class_index.map_or(String::new(), |c| c.to_string()),
            r.score.faithfulness,
            r.score.complexity
        ));
    }
    s
}
