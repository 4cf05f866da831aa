//! Per-input attributions: 3D GradCAM and Shapley values over supervoxels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Act, TrainedModel, NUM_CLASSES};
use crate::volume::{minmax_normalize, resize_trilinear, Dims, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradcam,
    Shap,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Gradcam => "gradcam",
            Method::Shap => "shap",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub map: Volume3D,
    pub method: Method,
    pub class_index: usize,
    pub subject: String,
}

/// Assignment of every voxel to one of `d` nonempty segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelPartition {
    dims: Dims,
    labels: Vec<usize>,
    segments: Vec<Vec<usize>>,
}

impl SupervoxelPartition {
    pub fn from_labels(dims: Dims, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "partition has {} labels for {} voxels",
                labels.len(),
                dims.len()
            )));
        }
        let d = labels.iter().max().map_or(0, |m| m + 1);
        let mut segments = vec![Vec::new(); d];
        for (i, &l) in labels.iter().enumerate() {
            segments[l].push(i);
        }
        if let Some(k) = segments.iter().position(|s| s.is_empty()) {
            return Err(Error::InvalidArgument(format!("segment {k} is empty")));
        }
        Ok(SupervoxelPartition { dims, labels, segments })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Number of segments `d`.
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn segment(&self, i: usize) -> &[usize] {
        &self.segments[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.len()).collect()
    }

    /// Sum of `v` over each segment.
    pub fn segment_sums(&self, v: &Volume3D) -> Result<Vec<f64>> {
        v.ensure_dims(self.dims)?;
        Ok(self
            .segments
            .iter()
            .map(|s| s.iter().map(|&i| v.data()[i]).sum())
            .collect())
    }

    /// Spreads one value per segment over that segment's voxels.
    pub fn broadcast(&self, values: &[f64]) -> Result<Volume3D> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for {} segments",
                values.len(),
                self.len()
            )));
        }
        Volume3D::new(self.dims, self.labels.iter().map(|&l| values[l]).collect())
    }

    /// `x` on segments where `keep` is set, `baseline` elsewhere.
    pub fn compose(&self, x: &Volume3D, baseline: &Volume3D, keep: &[bool]) -> Volume3D {
        let data = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| if keep[l] { x.data()[i] } else { baseline.data()[i] })
            .collect();
        Volume3D::new(self.dims, data).expect("finite inputs")
    }
}

/// Axis-aligned blocks of `block` voxels per side; edge blocks may be
/// smaller. Segments are numbered x-fastest over the block grid.
pub fn make_partition(dims: Dims, block: usize) -> Result<SupervoxelPartition> {
    make_partition_blocks(dims, [block; 3])
}

pub fn make_partition_blocks(dims: Dims, block: [usize; 3]) -> Result<SupervoxelPartition> {
    if block.contains(&0) {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    let grid: Vec<usize> = (0..3).map(|a| dims.0[a].div_ceil(block[a])).collect();
    let labels = (0..dims.len())
        .map(|i| {
            let [x, y, z] = dims.coords(i);
            x / block[0] + grid[0] * (y / block[1] + grid[1] * (z / block[2]))
        })
        .collect();
    SupervoxelPartition::from_labels(dims, labels)
}

/// `n` blocks per axis (fewer when an axis is shorter than `n`).
pub fn grid_partition(dims: Dims, n: usize) -> Result<SupervoxelPartition> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "grid must have at least one block per axis".into(),
        ));
    }
    make_partition_blocks(dims, dims.0.map(|len| len.div_ceil(n).max(1)))
}

/// A black-box scalar function of a volume.
pub trait Scorer: Sync {
    fn score(&self, x: &Volume3D) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&Volume3D) -> Result<f64> + Sync,
{
    fn score(&self, x: &Volume3D) -> Result<f64> {
        self(x)
    }
}

/// The pre-softmax score of one class.
pub struct ModelScorer<'a> {
    pub model: &'a TrainedModel,
    pub class_index: usize,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, x: &Volume3D) -> Result<f64> {
        Ok(self.model.scores(x)?[self.class_index])
    }
}

fn checked_score(f: &dyn Scorer, x: &Volume3D) -> Result<f64> {
    let y = f.score(x)?;
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::NonFinite("scorer returned a non-finite value".into()))
    }
}

/// `ReLU(Σₙ αⁿ Aⁿ)` with `αⁿ` the spatial mean of `∂y/∂Aⁿ`, at the
/// resolution of the feature maps.
pub fn gradcam_from_activation(a: &Act, grad: &Act) -> Result<Volume3D> {
    if a.channels != grad.channels || a.dims != grad.dims {
        return Err(Error::Shape("activation and gradient shapes differ".into()));
    }
    let z = a.dims.len() as f64;
    let mut cam = vec![0.0; a.dims.len()];
    for c in 0..a.channels {
        let alpha = grad.plane(c).iter().sum::<f64>() / z;
        for (t, v) in cam.iter_mut().zip(a.plane(c)) {
            *t += alpha * v;
        }
    }
    Volume3D::new(a.dims, cam.into_iter().map(|v| v.max(0.0)).collect())
}

/// GradCAM over the final convolution level, upsampled to the input grid
/// and scaled to [0, 1].
pub fn gradcam3d(m: &TrainedModel, x: &Volume3D, class_index: usize, subject: &str) -> Result<AttributionMap> {
    let (a, g) = m.grad_wrt_activation(x, class_index)?;
    let cam = gradcam_from_activation(&a, &g)?;
    let up = if cam.dims() == x.dims() {
        cam
    } else {
        resize_trilinear(&cam, x.dims())?
    };
    Ok(AttributionMap {
        map: minmax_normalize(&up),
        method: Method::Gradcam,
        class_index,
        subject: subject.to_string(),
    })
}

pub const MAX_EXACT_SEGMENTS: usize = 16;

fn check_shapley_inputs(x: &Volume3D, p: &SupervoxelPartition, baseline: &Volume3D) -> Result<()> {
    x.ensure_dims(p.dims())?;
    baseline.ensure_dims(p.dims())
}

/// Exact Shapley values per segment by enumerating all `2^d` coalitions.
/// Withheld segments take the baseline.
pub fn shapley_exact(f: &dyn Scorer, x: &Volume3D, p: &SupervoxelPartition, baseline: &Volume3D) -> Result<Vec<f64>> {
    check_shapley_inputs(x, p, baseline)?;
    let d = p.len();
    if d > MAX_EXACT_SEGMENTS {
        return Err(Error::InvalidArgument(format!(
            "exact Shapley needs at most {MAX_EXACT_SEGMENTS} segments, got {d}"
        )));
    }
    let values: Vec<f64> = (0..1usize << d)
        .into_par_iter()
        .map(|mask| {
            let keep: Vec<bool> = (0..d).map(|i| mask >> i & 1 == 1).collect();
            checked_score(f, &p.compose(x, baseline, &keep))
        })
        .collect::<Result<_>>()?;
    // w(s) = s!(d−s−1)!/d!
    let mut fact = vec![1.0f64; d + 1];
    for k in 1..=d {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..d).map(|s| fact[s] * fact[d - s - 1] / fact[d]).collect();
    let mut phi = vec![0.0; d];
    for (i, ph) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in 0..1usize << d {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                *ph += weight[s] * (values[mask | bit] - values[mask]);
            }
        }
    }
    Ok(phi)
}

/// Permutation-sampling estimate of the Shapley values. Each permutation
/// adds segments one at a time starting from the baseline and credits
/// every segment with its marginal change.
pub fn shapley_sampled(
    f: &dyn Scorer,
    x: &Volume3D,
    p: &SupervoxelPartition,
    baseline: &Volume3D,
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_shapley_inputs(x, p, baseline)?;
    if n_permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let d = p.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..n_permutations)
        .map(|_| {
            let mut o: Vec<usize> = (0..d).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let empty = checked_score(f, baseline)?;
    let contributions: Vec<Vec<f64>> = perms
        .par_iter()
        .map(|order| {
            let mut keep = vec![false; d];
            let mut prev = empty;
            let mut out = vec![0.0; d];
            for &i in order {
                keep[i] = true;
                let cur = checked_score(f, &p.compose(x, baseline, &keep))?;
                out[i] = cur - prev;
                prev = cur;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut phi = vec![0.0; d];
    for c in &contributions {
        for (t, v) in phi.iter_mut().zip(c) {
            *t += v;
        }
    }
    phi.iter_mut().for_each(|t| *t /= n_permutations as f64);
    Ok(phi)
}

/// How Shapley values are computed for model explanations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapConfig {
    /// Supervoxel block edge in voxels; `None` uses a quarter of each axis.
    pub block: Option<usize>,
    /// Permutations when the partition is too large for exact enumeration.
    pub permutations: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            block: None,
            permutations: 8,
        }
    }
}

impl ShapConfig {
    pub fn partition(&self, dims: Dims) -> Result<SupervoxelPartition> {
        match self.block {
            Some(b) => make_partition(dims, b),
            None => grid_partition(dims, 4),
        }
    }
}

/// Shapley map of a model's class score with a zero baseline: exact for
/// small partitions, sampled otherwise.
pub fn shap_map(
    m: &TrainedModel,
    x: &Volume3D,
    class_index: usize,
    subject: &str,
    cfg: &ShapConfig,
    seed: u64,
) -> Result<AttributionMap> {
    if class_index >= NUM_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "class index {class_index} out of range"
        )));
    }
    let p = cfg.partition(x.dims())?;
    let f = ModelScorer { model: m, class_index };
    let baseline = Volume3D::zeros(x.dims());
    let phi = if p.len() <= MAX_EXACT_SEGMENTS {
        shapley_exact(&f, x, &p, &baseline)?
    } else {
        shapley_sampled(&f, x, &p, &baseline, cfg.permutations, seed)?
    };
    Ok(AttributionMap {
        map: p.broadcast(&phi)?,
        method: Method::Shap,
        class_index,
        subject: subject.to_string(),
    })
}
