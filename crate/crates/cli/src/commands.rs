//! Pipeline stages. Each reads the artifacts of earlier stages from the
//! output directory and writes its own.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use xai3d_core::atlas::{histogram_csv, make_synthetic_atlas, register_to_atlas, save_atlas, threshold_histogram};
use xai3d_core::cohort::{
    generate_cohort, read_volume, split, write_volume, CohortManifest, Group, ManifestEntry, VolumeFile, VolumeMeta,
};
use xai3d_core::global::{ablation_csv, GlobalExplanation, Source};
use xai3d_core::local::Method;
use xai3d_core::metrics::{scores_csv, PerturbationPolicy, ScoreRow};
use xai3d_core::nn::{load_checkpoint, save_checkpoint, train, LabeledCohort, LabeledExample, TrainedModel};
use xai3d_core::pipeline::{
    ablate_set, aggregate, explain_subjects, score_set, select_subjects, GlobalSet, SubjectInput,
};
use xai3d_core::volume::{AffineTransform3D, Volume3D};

use crate::config::{stage_seed, RunConfig};
use crate::error::CliError;
use crate::slices::{emit_slices, Axis};

type Result<T> = std::result::Result<T, CliError>;

/// Where every artifact lives under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn manifest(&self) -> PathBuf {
        self.cohort_dir().join("manifest.json")
    }

    pub fn model_dir(&self, g: Group) -> PathBuf {
        self.root.join("models").join(g.tag())
    }

    pub fn model(&self, g: Group) -> PathBuf {
        self.model_dir(g).join("model.bin")
    }

    pub fn explain_dir(&self, g: Group, class: usize, m: Method) -> PathBuf {
        self.root
            .join("explanations")
            .join(g.tag())
            .join(format!("class{class}"))
            .join(m.to_string())
    }

    pub fn global_dir(&self, g: Group, class: usize) -> PathBuf {
        self.root.join("global").join(g.tag()).join(format!("class{class}"))
    }

    pub fn global_map(&self, g: Group, class: usize, s: Source) -> PathBuf {
        self.global_dir(g, class).join(format!("{s}.xv3d"))
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }

    pub fn atlas_dir(&self) -> PathBuf {
        self.root.join("atlas")
    }

    pub fn histogram(&self, g: Group, class: usize) -> PathBuf {
        self.atlas_dir().join(format!("{}_class{class}_histogram.csv", g.tag()))
    }

    pub fn slices_dir(&self, g: Group, class: usize) -> PathBuf {
        self.root.join("slices").join(format!("{}_class{class}", g.tag()))
    }

    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Records the configuration hash, seed and tool version.
pub fn write_run_manifest(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    write_json(
        &layout.run_manifest(),
        &json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
        }),
    )
}

fn load_manifest(layout: &Layout) -> Result<CohortManifest> {
    require(&layout.manifest(), "generate")?;
    Ok(CohortManifest::load(&layout.manifest())?)
}

pub fn cmd_generate(cfg: &RunConfig, layout: &Layout) -> Result<CohortManifest> {
    let mut params = cfg.cohort.clone();
    params.seed = stage_seed(cfg.seed, "cohort");
    let dir = layout.cohort_dir();
    let manifest = generate_cohort(&params, &dir)?;
    let manifest = split(&manifest, cfg.split, stage_seed(cfg.seed, "split"))?;
    manifest.save(&layout.manifest())?;
    write_run_manifest(cfg, layout)?;
    Ok(manifest)
}

struct GroupData {
    entries: Vec<ManifestEntry>,
    volumes: Vec<Volume3D>,
}

impl GroupData {
    fn inputs(&self) -> Vec<SubjectInput<'_>> {
        self.entries
            .iter()
            .zip(&self.volumes)
            .map(|(e, v)| SubjectInput {
                id: &e.subject,
                label: e.label,
                volume: v,
            })
            .collect()
    }
}

fn load_group(layout: &Layout, manifest: &CohortManifest, g: Group) -> Result<GroupData> {
    let entries: Vec<ManifestEntry> = manifest.entries_for(g).cloned().collect();
    let volumes = entries
        .iter()
        .map(|e| {
            let path = layout.cohort_dir().join(&e.path);
            require(&path, "generate")?;
            let v = read_volume(&path)?.volume;
            v.ensure_dims(manifest.dims)?;
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(GroupData { entries, volumes })
}

pub fn cmd_train(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let manifest = load_manifest(layout)?;
    for g in manifest.groups() {
        let data = load_group(layout, &manifest, g)?;
        let cohort = LabeledCohort {
            examples: data
                .entries
                .iter()
                .zip(&data.volumes)
                .map(|(e, v)| LabeledExample {
                    subject: e.subject.clone(),
                    volume: v.clone(),
                    label: e.label,
                    split: e.split,
                })
                .collect(),
        };
        let mut tc = cfg.training.clone();
        tc.split = cfg.split;
        tc.seed = stage_seed(cfg.seed, &format!("train:{}", g.tag()));
        let (model, report) = train(cfg.network.spec(manifest.dims), &cohort, &tc)?;
        let dir = layout.model_dir(g);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        save_checkpoint(&model, &layout.model(g))?;
        write_text(&dir.join("train_report.csv"), &report.to_csv())?;
        write_json(
            &dir.join("train_summary.json"),
            &json!({
                "best_epoch": report.best_epoch,
                "stopped_epoch": report.stopped_epoch,
                "stopped_early": report.stopped_early,
                "train_accuracy": report.train_accuracy,
                "val_accuracy": report.val_accuracy,
                "test_accuracy": report.test_accuracy,
                "test_loss": report.test_loss,
            }),
        )?;
    }
    write_run_manifest(cfg, layout)
}

fn load_model(layout: &Layout, g: Group) -> Result<TrainedModel> {
    require(&layout.model(g), "train")?;
    Ok(load_checkpoint(&layout.model(g))?)
}

fn selected<'a>(cfg: &RunConfig, inputs: &[SubjectInput<'a>], class: usize) -> Vec<SubjectInput<'a>> {
    select_subjects(inputs, class, cfg.aggregate.pooled, cfg.explain.max_subjects)
        .into_iter()
        .map(|i| inputs[i])
        .collect()
}

fn map_path(layout: &Layout, g: Group, class: usize, m: Method, subject: &str) -> PathBuf {
    layout.explain_dir(g, class, m).join(format!("{subject}.xv3d"))
}

pub fn cmd_explain(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let manifest = load_manifest(layout)?;
    for g in manifest.groups() {
        let model = load_model(layout, g)?;
        let data = load_group(layout, &manifest, g)?;
        let inputs = data.inputs();
        for &class in &cfg.explain.classes {
            let subjects = selected(cfg, &inputs, class);
            for &method in &cfg.explain.methods {
                let seed = stage_seed(cfg.seed, &format!("explain:{}:{class}", g.tag()));
                let maps = explain_subjects(&model, &subjects, method, class, &cfg.explain.shap, seed)?;
                for m in maps {
                    let mut meta = VolumeMeta::new(m.map.dims(), format!("{method} attribution"));
                    meta.subject = Some(m.subject.clone());
                    meta.modality = Some(g.modality);
                    meta.hemisphere = Some(g.hemisphere);
                    meta.method = Some(method.to_string());
                    meta.class_index = Some(class);
                    write_volume(
                        &map_path(layout, g, class, method, &m.subject),
                        &VolumeFile { volume: m.map, meta },
                    )?;
                }
            }
        }
    }
    write_run_manifest(cfg, layout)
}

fn read_global(layout: &Layout, g: Group, class: usize, s: Source) -> Result<GlobalExplanation> {
    let path = layout.global_map(g, class, s);
    require(&path, "aggregate")?;
    Ok(GlobalExplanation {
        map: read_volume(&path)?.volume,
        source: s,
        class_index: Some(class),
        modality: Some(g.modality),
        hemisphere: Some(g.hemisphere),
        weights: vec![],
    })
}

fn read_set(layout: &Layout, g: Group, class: usize) -> Result<GlobalSet> {
    Ok(GlobalSet {
        shape: read_global(layout, g, class, Source::TotalShape)?,
        shap: read_global(layout, g, class, Source::TotalShap)?,
        gradcam: read_global(layout, g, class, Source::TotalGradcam)?,
        framework: read_global(layout, g, class, Source::Framework)?,
        variance_captured: [f64::NAN; 3],
    })
}

pub fn cmd_aggregate(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    for m in [Method::Gradcam, Method::Shap] {
        if !cfg.explain.methods.contains(&m) {
            return Err(CliError::Config(format!(
                "aggregation needs {m} maps in explain.methods"
            )));
        }
    }
    let manifest = load_manifest(layout)?;
    for g in manifest.groups() {
        let data = load_group(layout, &manifest, g)?;
        let inputs = data.inputs();
        for &class in &cfg.explain.classes {
            let subjects = selected(cfg, &inputs, class);
            let read_maps = |m: Method| -> Result<Vec<Volume3D>> {
                subjects
                    .iter()
                    .map(|s| {
                        let p = map_path(layout, g, class, m, s.id);
                        require(&p, "explain")?;
                        Ok(read_volume(&p)?.volume)
                    })
                    .collect()
            };
            let shap = read_maps(Method::Shap)?;
            let gradcam = read_maps(Method::Gradcam)?;
            let xs: Vec<&Volume3D> = subjects.iter().map(|s| s.volume).collect();
            let set = aggregate(
                &xs,
                &shap.iter().collect::<Vec<_>>(),
                &gradcam.iter().collect::<Vec<_>>(),
                &cfg.aggregate,
            )?;
            for e in [&set.shape, &set.shap, &set.gradcam, &set.framework] {
                let mut meta = VolumeMeta::new(e.map.dims(), format!("global explanation {}", e.source));
                meta.modality = Some(g.modality);
                meta.hemisphere = Some(g.hemisphere);
                meta.method = Some(e.source.to_string());
                meta.class_index = Some(class);
                write_volume(
                    &layout.global_map(g, class, e.source),
                    &VolumeFile {
                        volume: e.map.clone(),
                        meta,
                    },
                )?;
            }
            let [shape, shap_v, gradcam_v] = set.variance_captured;
            write_json(
                &layout.global_dir(g, class).join("pca.json"),
                &json!({
                    "subjects": subjects.len(),
                    "components": cfg.aggregate.components(),
                    "weights": cfg.aggregate.weights,
                    "variance_captured": {
                        "total_shape": shape,
                        "total_shap": shap_v,
                        "total_gradcam": gradcam_v,
                    },
                    "fusion_code": cfg.aggregate.fusion.code(),
                }),
            )?;
        }
    }
    write_run_manifest(cfg, layout)
}

fn metric_policy(cfg: &RunConfig) -> PerturbationPolicy {
    PerturbationPolicy {
        seed: stage_seed(cfg.seed, "metrics"),
        ..cfg.metrics.clone()
    }
}

pub fn cmd_evaluate(cfg: &RunConfig, layout: &Layout) -> Result<Vec<ScoreRow>> {
    let manifest = load_manifest(layout)?;
    let pol = metric_policy(cfg);
    let mut rows = Vec::new();
    for g in manifest.groups() {
        let model = load_model(layout, g)?;
        for &class in &cfg.explain.classes {
            let set = read_set(layout, g, class)?;
            for (source, score) in score_set(&model, &set, class, &pol)? {
                rows.push(ScoreRow {
                    method: source.to_string(),
                    hemisphere: g.hemisphere.to_string(),
                    modality: g.modality.to_string(),
                    class_index: class,
                    score,
                });
            }
        }
    }
    write_text(&layout.scores(), &scores_csv(&rows))?;
    write_run_manifest(cfg, layout)?;
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let manifest = load_manifest(layout)?;
    let pol = metric_policy(cfg);
    let mut csv = String::new();
    for g in manifest.groups() {
        let model = load_model(layout, g)?;
        for &class in &cfg.explain.classes {
            let set = read_set(layout, g, class)?;
            let rows = ablate_set(&model, &set, class, &cfg.aggregate.alignment, &pol)?;
            let part = ablation_csv(&rows);
            if csv.is_empty() {
                csv.push_str(&part);
            } else {
                csv.extend(part.lines().skip(1).map(|l| format!("{l}\n")));
            }
        }
    }
    write_text(&layout.ablation(), &csv)?;
    write_run_manifest(cfg, layout)?;
    Ok(csv)
}

pub fn cmd_atlas_report(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let manifest = load_manifest(layout)?;
    let atlas = make_synthetic_atlas(manifest.dims, cfg.atlas.regions, stage_seed(cfg.seed, "atlas"))?;
    save_atlas(&atlas, &layout.atlas_dir())?;
    let t = cfg.atlas.transform.clone().unwrap_or_else(AffineTransform3D::identity);
    for g in manifest.groups() {
        for &class in &cfg.explain.classes {
            let fw = read_global(layout, g, class, Source::Framework)?;
            let registered = register_to_atlas(&fw.map, &atlas, &t)?;
            let hists = cfg
                .atlas
                .thresholds
                .iter()
                .map(|&f| threshold_histogram(&registered, &atlas, f))
                .collect::<xai3d_core::Result<Vec<_>>>()?;
            write_text(&layout.histogram(g, class), &histogram_csv(&hists))?;
        }
    }
    write_run_manifest(cfg, layout)
}

/// Axial slices of every fused map.
pub fn cmd_report_slices(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let manifest = load_manifest(layout)?;
    for g in manifest.groups() {
        for &class in &cfg.explain.classes {
            let fw = read_global(layout, g, class, Source::Framework)?;
            emit_slices(&fw.map, Axis::Z, &layout.slices_dir(g, class))?;
        }
    }
    Ok(())
}

/// Every stage in order.
pub fn cmd_run(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    cmd_generate(cfg, layout)?;
    cmd_train(cfg, layout)?;
    cmd_explain(cfg, layout)?;
    cmd_aggregate(cfg, layout)?;
    cmd_evaluate(cfg, layout)?;
    cmd_ablate(cfg, layout)?;
    cmd_atlas_report(cfg, layout)?;
    cmd_report_slices(cfg, layout)
}
