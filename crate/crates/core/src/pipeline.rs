//! In-memory pipeline stages shared by the command-line tool and tests:
//! local explanations for a set of subjects, PCA totals, fusion and scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::{
    fit_pca, fuse_framework, run_ablation, AblationRow, Alignment, FusionWeights, GlobalExplanation, PcaModel, Source,
};
use crate::local::{gradcam3d, shap_map, AttributionMap, Method, ModelScorer, ShapConfig};
use crate::metrics::{score_global, ExplanationScore, PerturbationPolicy};
use crate::nn::TrainedModel;
use crate::volume::{Volume3D, WeightTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    /// Classes whose scores are explained; each gets its own maps and PCA.
    pub classes: Vec<usize>,
    pub methods: Vec<Method>,
    pub shap: ShapConfig,
    /// Cap on explained subjects (first in cohort order).
    pub max_subjects: Option<usize>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            classes: vec![0, 1],
            methods: vec![Method::Gradcam, Method::Shap],
            shap: ShapConfig::default(),
            max_subjects: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    pub weights: WeightTensor,
    /// Fit PCA on every subject instead of only the explained class.
    pub pooled: bool,
    pub fusion: FusionWeights,
    #[serde(default)]
    pub alignment: Alignment,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            weights: WeightTensor::pca_six(),
            pooled: false,
            fusion: FusionWeights::default(),
            alignment: Alignment::default(),
        }
    }
}

impl AggregateConfig {
    pub fn components(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SubjectInput<'a> {
    pub id: &'a str,
    pub label: usize,
    pub volume: &'a Volume3D,
}

/// Indices of the subjects entering aggregation: the explained class (or
/// everyone when pooled), capped at `max`.
pub fn select_subjects(subjects: &[SubjectInput], class_index: usize, pooled: bool, max: Option<usize>) -> Vec<usize> {
    subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| pooled || s.label == class_index)
        .map(|(i, _)| i)
        .take(max.unwrap_or(usize::MAX))
        .collect()
}

/// Local maps for each subject; Shapley sampling seeds are `seed + i`.
pub fn explain_subjects(
    model: &TrainedModel,
    subjects: &[SubjectInput],
    method: Method,
    class_index: usize,
    shap: &ShapConfig,
    seed: u64,
) -> Result<Vec<AttributionMap>> {
    subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| match method {
            Method::Gradcam => gradcam3d(model, s.volume, class_index, s.id),
            Method::Shap => shap_map(model, s.volume, class_index, s.id, shap, seed.wrapping_add(i as u64)),
        })
        .collect()
}

/// PCA over the samples followed by the weighted six-component total.
pub fn total_map(
    samples: &[&Volume3D],
    weights: &WeightTensor,
    source: Source,
) -> Result<(GlobalExplanation, PcaModel)> {
    let pca = fit_pca(samples, weights.len())?;
    let total = crate::global::total_from_pca(&pca, weights, source)?;
    Ok((total, pca))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSet {
    pub shape: GlobalExplanation,
    pub shap: GlobalExplanation,
    pub gradcam: GlobalExplanation,
    pub framework: GlobalExplanation,
    /// Variance captured by the components of each total.
    pub variance_captured: [f64; 3],
}

/// Totals for inputs and both attribution methods, plus their fusion.
pub fn aggregate(
    inputs: &[&Volume3D],
    shap_maps: &[&Volume3D],
    gradcam_maps: &[&Volume3D],
    cfg: &AggregateConfig,
) -> Result<GlobalSet> {
    if inputs.is_empty() || shap_maps.is_empty() || gradcam_maps.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregation needs inputs and both map sets".into(),
        ));
    }
    let (shape, p0) = total_map(inputs, &cfg.weights, Source::TotalShape)?;
    let (shap, p1) = total_map(shap_maps, &cfg.weights, Source::TotalShap)?;
    let (gradcam, p2) = total_map(gradcam_maps, &cfg.weights, Source::TotalGradcam)?;
    let framework = fuse_framework(&shape, &shap, &gradcam, cfg.fusion, &cfg.alignment)?;
    Ok(GlobalSet {
        shape,
        shap,
        gradcam,
        framework,
        variance_captured: [p0.variance_captured(), p1.variance_captured(), p2.variance_captured()],
    })
}

/// Scores of total-SHAP, total-GradCam and the fused map, in that order.
pub fn score_set(
    model: &TrainedModel,
    set: &GlobalSet,
    class_index: usize,
    pol: &PerturbationPolicy,
) -> Result<Vec<(Source, ExplanationScore)>> {
    let f = ModelScorer { model, class_index };
    [&set.shap, &set.gradcam, &set.framework]
        .into_iter()
        .map(|g| Ok((g.source, score_global(&set.shape, g, &f, pol)?)))
        .collect()
}

pub fn ablate_set(
    model: &TrainedModel,
    set: &GlobalSet,
    class_index: usize,
    align: &Alignment,
    pol: &PerturbationPolicy,
) -> Result<Vec<AblationRow>> {
    let f = ModelScorer { model, class_index };
    run_ablation(&set.shape, &set.shap, &set.gradcam, align, &f, pol)
}
