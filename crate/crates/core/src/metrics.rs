//! Faithfulness (correlation form) and complexity (entropy form) scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::GlobalExplanation;
use crate::local::{grid_partition, Scorer, SupervoxelPartition};
use crate::volume::{pearson, Dims, Volume3D};

/// How perturbed inputs are drawn for faithfulness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationPolicy {
    /// Value written into removed segments.
    pub baseline: f64,
    pub draws: usize,
    /// Segments per axis of the metric partition.
    pub grid: usize,
    pub seed: u64,
}

impl Default for PerturbationPolicy {
    fn default() -> Self {
        PerturbationPolicy {
            baseline: 0.0,
            draws: 70,
            grid: 4,
            seed: 0,
        }
    }
}

impl PerturbationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.draws < 2 {
            return Err(Error::InvalidArgument("faithfulness needs at least two draws".into()));
        }
        if !self.baseline.is_finite() {
            return Err(Error::InvalidArgument("baseline must be finite".into()));
        }
        Ok(())
    }

    pub fn partition(&self, dims: Dims) -> Result<SupervoxelPartition> {
        grid_partition(dims, self.grid)
    }

    /// Segment subsets: each draw picks a size uniformly in `[1, d/2]`, then
    /// a uniform subset of that size.
    pub fn subsets(&self, d: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let max = (d / 2).max(1);
        (0..self.draws)
            .map(|_| {
                let k = rng.gen_range(1..=max);
                rand::seq::index::sample(&mut rng, d, k).into_vec()
            })
            .collect()
    }
}

/// `x` with the voxels of the given segments set to `value`.
pub fn remove_segments(x: &Volume3D, p: &SupervoxelPartition, segments: &[usize], value: f64) -> Volume3D {
    let mut data = x.data().to_vec();
    for &s in segments {
        for &i in p.segment(s) {
            data[i] = value;
        }
    }
    Volume3D::new(x.dims(), data).expect("finite values")
}

/// Pearson correlation, over the policy's draws, between the summed
/// attribution of the removed segments and the resulting drop in score.
pub fn faithfulness(f: &dyn Scorer, g: &Volume3D, x: &Volume3D, pol: &PerturbationPolicy) -> Result<f64> {
    faithfulness_with_partition(f, g, x, &pol.partition(x.dims())?, pol)
}

pub fn faithfulness_with_partition(
    f: &dyn Scorer,
    g: &Volume3D,
    x: &Volume3D,
    p: &SupervoxelPartition,
    pol: &PerturbationPolicy,
) -> Result<f64> {
    pol.validate()?;
    g.ensure_dims(x.dims())?;
    let gs = p.segment_sums(g)?;
    let fx = f.score(x)?;
    let subsets = pol.subsets(p.len());
    let drops: Vec<f64> = subsets
        .par_iter()
        .map(|s| Ok(fx - f.score(&remove_segments(x, p, s, pol.baseline))?))
        .collect::<Result<_>>()?;
    if drops.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("scorer returned a non-finite value".into()));
    }
    let sums: Vec<f64> = subsets.iter().map(|s| s.iter().map(|&i| gs[i]).sum()).collect();
    pearson(&sums, &drops).map_err(|e| match e {
        Error::UndefinedCorrelation(msg) => Error::UndefinedCorrelation(format!(
            "faithfulness over {} draws: {msg}; the model output or the attribution is constant under perturbation",
            subsets.len()
        )),
        e => e,
    })
}

/// Entropy of the attribution-magnitude distribution over segments.
pub fn complexity(g: &Volume3D, p: &SupervoxelPartition) -> Result<f64> {
    complexity_of_segments(&p.segment_sums(g)?)
}

pub fn complexity_of_segments(gs: &[f64]) -> Result<f64> {
    let total: f64 = gs.iter().map(|v| v.abs()).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidArgument("complexity of an all-zero attribution".into()));
    }
    Ok(gs
        .iter()
        .map(|v| v.abs() / total)
        .filter(|&q| q > 0.0)
        .map(|q| -q * q.ln())
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationScore {
    pub faithfulness: f64,
    pub complexity: f64,
    pub n_perturbations: usize,
    pub baseline: f64,
    pub partition_d: usize,
}

pub fn score_explanation(
    f: &dyn Scorer,
    g: &Volume3D,
    x: &Volume3D,
    pol: &PerturbationPolicy,
) -> Result<ExplanationScore> {
    let p = pol.partition(x.dims())?;
    Ok(ExplanationScore {
        faithfulness: faithfulness_with_partition(f, g, x, &p, pol)?,
        complexity: complexity(g, &p)?,
        n_perturbations: pol.draws,
        baseline: pol.baseline,
        partition_d: p.len(),
    })
}

/// Scores a global explanation with the total-Shape map as the model input.
pub fn score_global(
    total_shape: &GlobalExplanation,
    candidate: &GlobalExplanation,
    f: &dyn Scorer,
    pol: &PerturbationPolicy,
) -> Result<ExplanationScore> {
    score_explanation(f, &candidate.map, &total_shape.map, pol)
}

/// One line of the scores table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub method: String,
    pub hemisphere: String,
    pub modality: String,
    pub class_index: usize,
    pub score: ExplanationScore,
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("method,hemisphere,modality,class,faithfulness,complexity\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.method, r.hemisphere, r.modality, r.class_index, r.score.faithfulness, r.score.complexity
        ));
    }
    s
}
