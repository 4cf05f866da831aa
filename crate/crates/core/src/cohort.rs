//! Volume files, cohort manifests, subject-level splitting and the synthetic
//! cohort generator.
//!
//! Volume file layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `XV3D`                            |
//! | 4      | 4    | format version (`1`)                    |
//! | 8      | 12   | dims `w, h, d` as `u32`                 |
//! | 20     | 1    | value encoding (`1` = f32 LE)           |
//! | 21     | 1    | voxel layout (`0` = row-major, x fastest) |
//! | 22     | 2    | reserved, zero                          |
//! | 24     | 4·n  | payload                                 |
//!
//! Metadata lives in a JSON sidecar next to the volume (`.json` extension).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume3D};

pub const MAGIC: &[u8; 4] = b"XV3D";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
const ENCODING_F32_LE: u8 = 1;
const LAYOUT_X_FASTEST: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Skeleton,
    Surface,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hemisphere {
    L,
    R,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Skeleton => "skeleton",
            Modality::Surface => "surface",
        })
    }
}

impl std::fmt::Display for Hemisphere {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Hemisphere::L => "L",
            Hemisphere::R => "R",
        })
    }
}

/// One (modality, hemisphere) input stream; every subject has one volume
/// per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub modality: Modality,
    pub hemisphere: Hemisphere,
}

impl Group {
    pub fn tag(&self) -> String {
        format!("{}_{}", self.modality, self.hemisphere)
    }
}

impl Default for Group {
    fn default() -> Self {
        Group {
            modality: Modality::Skeleton,
            hemisphere: Hemisphere::L,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hemisphere: Option<Hemisphere>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    #[serde(default)]
    pub provenance: String,
}

impl VolumeMeta {
    pub fn new(dims: Dims, provenance: impl Into<String>) -> Self {
        VolumeMeta {
            dims,
            subject: None,
            label: None,
            modality: None,
            hemisphere: None,
            method: None,
            class_index: None,
            spacing: None,
            provenance: provenance.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub volume: Volume3D,
    pub meta: VolumeMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Encodes the binary part of a volume file. Voxels are narrowed to f32.
pub fn encode_volume(v: &Volume3D) -> Vec<u8> {
    let dims = v.dims();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for n in dims.0 {
        bytes.extend_from_slice(&(n as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&[ENCODING_F32_LE, LAYOUT_X_FASTEST, 0, 0]);
    for &x in v.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    bytes
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        for (f, b) in found.iter_mut().zip(bytes) {
            *f = *b;
        }
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION || bytes[20] != ENCODING_F32_LE || bytes[21] != LAYOUT_X_FASTEST {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let dims = Dims([u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize]);
    let expected = HEADER_LEN + 4 * dims.len();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume3D::new(dims, data)
}

pub fn write_volume(path: &Path, file: &VolumeFile) -> Result<()> {
    if file.meta.dims != file.volume.dims() {
        return Err(Error::DimensionMismatch {
            expected: file.volume.dims().0,
            actual: file.meta.dims.0,
        });
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_volume(&file.volume)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&file.meta).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_volume(path: &Path) -> Result<VolumeFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut volume = decode_volume(path, &bytes)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: VolumeMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    if meta.dims != volume.dims() {
        return Err(Error::DimensionMismatch {
            expected: volume.dims().0,
            actual: meta.dims.0,
        });
    }
    if let Some(s) = meta.spacing {
        volume = volume.with_spacing(s)?;
    }
    Ok(VolumeFile { volume, meta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Validation = 1,
    Test = 2,
}

/// Per-class shuffled assignment: each class contributes
/// `round(f·n_class)` subjects to train and validation, the rest to test.
pub fn stratified_split(labels: &[usize], fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; labels.len()];
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    for class in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (fractions[0] * n).round() as usize;
        let n_val = ((fractions[1] * n).round() as usize).min(idx.len() - n_train.min(idx.len()));
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
        for (s, f) in [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .zip(fractions)
        {
            if f > 0.0 && !idx.iter().any(|&i| out[i] == s) {
                return Err(Error::DegenerateSplit(format!(
                    "class {class} ({} subjects) has no {s:?} members",
                    idx.len()
                )));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub label: usize,
    pub modality: Modality,
    pub hemisphere: Hemisphere,
    /// Relative to the manifest directory.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub dims: Dims,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_fractions: Option<[f64; 3]>,
    pub entries: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Subject ids in first-appearance order, with their labels.
    pub fn subjects(&self) -> Vec<(String, usize)> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            if seen.insert(e.subject.clone()) {
                out.push((e.subject.clone(), e.label));
            }
        }
        out
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut g: Vec<Group> = self
            .entries
            .iter()
            .map(|e| Group {
                modality: e.modality,
                hemisphere: e.hemisphere,
            })
            .collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn entries_for(&self, group: Group) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(move |e| e.modality == group.modality && e.hemisphere == group.hemisphere)
    }
}

/// Assigns subject-level splits; every volume of a subject gets the same
/// split.
pub fn split(manifest: &CohortManifest, fractions: [f64; 3], seed: u64) -> Result<CohortManifest> {
    let subjects = manifest.subjects();
    let labels: Vec<usize> = subjects.iter().map(|(_, l)| *l).collect();
    let assignment = stratified_split(&labels, fractions, seed)?;
    let by_subject: std::collections::HashMap<&str, Split> = subjects
        .iter()
        .zip(&assignment)
        .map(|((s, _), a)| (s.as_str(), *a))
        .collect();
    let mut out = manifest.clone();
    out.split_fractions = Some(fractions);
    for e in &mut out.entries {
        e.split = Some(by_subject[e.subject.as_str()]);
    }
    Ok(out)
}

/// The class-1 structure: a curved tube along a circular arc that drifts
/// in z. Positions are fractions of the volume extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeSpec {
    pub center: [f64; 3],
    /// Arc radius as a fraction of the width.
    pub radius: f64,
    pub arc_degrees: f64,
    /// Tube radius in voxels.
    pub thickness: f64,
    pub amplitude: f64,
    /// Per-subject amplitude is uniform in `amplitude·[1 − j, 1 + j]`.
    pub amplitude_jitter: f64,
}

impl Default for RidgeSpec {
    fn default() -> Self {
        RidgeSpec {
            center: [0.62, 0.6, 0.5],
            radius: 0.22,
            arc_degrees: 150.0,
            thickness: 1.0,
            amplitude: 1.0,
            amplitude_jitter: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortParams {
    pub n_subjects: usize,
    pub dims: Dims,
    pub ridge: RidgeSpec,
    /// Scale of per-subject variability (smooth modes plus a tenth as much
    /// voxelwise noise). Zero gives noise-free volumes.
    pub noise: f64,
    /// Number of smooth per-subject variation modes.
    pub modes: usize,
    /// Scale of the shared smooth background.
    pub background: f64,
    pub groups: Vec<Group>,
    /// Flip labels uniformly at random (chance-level control cohorts).
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for CohortParams {
    fn default() -> Self {
        CohortParams {
            n_subjects: 200,
            dims: Dims::cube(16),
            ridge: RidgeSpec::default(),
            noise: 0.1,
            modes: 3,
            background: 1.0,
            groups: vec![Group::default()],
            shuffle_labels: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVolume {
    pub group: Group,
    pub volume: Volume3D,
    /// 1 on planted voxels, 0 elsewhere.
    pub mask: Volume3D,
}

#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub id: String,
    pub label: usize,
    pub volumes: Vec<SyntheticVolume>,
}

impl SyntheticSubject {
    pub fn volume(&self, group: Group) -> Option<&SyntheticVolume> {
        self.volumes.iter().find(|v| v.group == group)
    }
}

fn gaussian_blob(dims: Dims, centre: [f64; 3], sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims.len());
    for z in 0..dims.d() {
        for y in 0..dims.h() {
            for x in 0..dims.w() {
                let d2 =
                    (x as f64 - centre[0]).powi(2) + (y as f64 - centre[1]).powi(2) + (z as f64 - centre[2]).powi(2);
                out.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    out
}

fn random_centre<R: Rng>(dims: Dims, rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(0.0..dims.w() as f64),
        rng.gen_range(0.0..dims.h() as f64),
        rng.gen_range(0.0..dims.d() as f64),
    ]
}

/// Smooth field: a sum of broad Gaussian blobs.
fn smooth_field<R: Rng>(dims: Dims, blobs: usize, signed: bool, rng: &mut R) -> Vec<f64> {
    let sigma = dims.0.iter().copied().max().unwrap_or(1) as f64 / 4.0;
    let mut f = vec![0.0; dims.len()];
    for _ in 0..blobs {
        let amp = if signed {
            rng.gen_range(-1.0..1.0)
        } else {
            rng.gen_range(0.2..0.5)
        };
        let b = gaussian_blob(dims, random_centre(dims, rng), sigma);
        for (t, v) in f.iter_mut().zip(b) {
            *t += amp * v;
        }
    }
    f
}

/// Planted-ridge mask for a hemisphere (the right hemisphere mirrors x).
pub fn ridge_mask(dims: Dims, spec: &RidgeSpec, hemisphere: Hemisphere) -> Volume3D {
    let ext = [dims.w() as f64, dims.h() as f64, dims.d() as f64];
    let mut c = [
        spec.center[0] * ext[0],
        spec.center[1] * ext[1],
        spec.center[2] * ext[2],
    ];
    if hemisphere == Hemisphere::R {
        c[0] = ext[0] - 1.0 - c[0];
    }
    let r = spec.radius * ext[0];
    let arc = spec.arc_degrees.to_radians();
    let samples = 400;
    let curve: Vec<[f64; 3]> = (0..=samples)
        .map(|k| {
            let t = k as f64 / samples as f64;
            let th = t * arc;
            let sx = if hemisphere == Hemisphere::R { -1.0 } else { 1.0 };
            [
                c[0] + sx * r * th.cos(),
                c[1] + r * th.sin(),
                c[2] + (t - 0.5) * 0.25 * ext[2],
            ]
        })
        .collect();
    let t2 = spec.thickness * spec.thickness;
    Volume3D::from_fn(dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let near = curve
            .iter()
            .any(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2) <= t2);
        if near {
            1.0
        } else {
            0.0
        }
    })
    .expect("finite mask")
}

fn box_blur(dims: Dims, v: &[f64]) -> Vec<f64> {
    let mut cur = v.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for i in 0..cur.len() {
            let p = dims.coords(i);
            let mut s = 0.0;
            let mut n = 0.0;
            for off in [-1i64, 0, 1] {
                let mut q = [p[0] as i64, p[1] as i64, p[2] as i64];
                q[axis] += off;
                if dims.contains(q) {
                    s += cur[dims.index(q[0] as usize, q[1] as usize, q[2] as usize)];
                    n += 1.0;
                }
            }
            next[i] = s / n;
        }
        cur = next;
    }
    cur
}

/// Builds the cohort in memory. Subject `i` has label `i % 2` unless labels
/// are shuffled.
pub fn synthesize_cohort(params: &CohortParams) -> Result<Vec<SyntheticSubject>> {
    if params.n_subjects < 20 {
        return Err(Error::InvalidArgument(format!(
            "cohort needs at least 20 subjects, got {}",
            params.n_subjects
        )));
    }
    if params.groups.is_empty() {
        return Err(Error::InvalidArgument("cohort needs at least one group".into()));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(Error::InvalidArgument("noise level must be nonnegative".into()));
    }
    let dims = params.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // shared per-group structure
    let mut shared = Vec::new();
    for &g in &params.groups {
        let background = smooth_field(dims, 4, false, &mut rng)
            .into_iter()
            .map(|v| params.background * (v + 0.2))
            .collect::<Vec<f64>>();
        let modes: Vec<Vec<f64>> = (0..params.modes)
            .map(|_| {
                let f = smooth_field(dims, 3, true, &mut rng);
                let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
                f.into_iter().map(|v| v / rms.max(1e-12)).collect()
            })
            .collect();
        shared.push((g, background, modes, ridge_mask(dims, &params.ridge, g.hemisphere)));
    }
    let labels: Vec<usize> = if params.shuffle_labels {
        let mut l: Vec<usize> = (0..params.n_subjects).map(|i| i % 2).collect();
        l.shuffle(&mut rng);
        l
    } else {
        (0..params.n_subjects).map(|i| i % 2).collect()
    };
    let empty = Volume3D::zeros(dims);
    let mut subjects = Vec::with_capacity(params.n_subjects);
    for i in 0..params.n_subjects {
        // planted structure follows the true class even when labels are shuffled
        let planted = i % 2 == 1;
        let j = params.ridge.amplitude_jitter;
        let amp = params.ridge.amplitude * rng.gen_range((1.0 - j)..=(1.0 + j));
        let mut volumes = Vec::new();
        for (g, background, modes, mask) in &shared {
            let mut v = background.clone();
            for m in modes {
                let c: f64 = rng.sample(StandardNormal);
                for (t, mv) in v.iter_mut().zip(m) {
                    *t += params.noise * c * mv;
                }
            }
            if params.noise > 0.0 {
                for t in v.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *t += 0.1 * params.noise * e;
                }
            }
            if planted {
                for (t, mv) in v.iter_mut().zip(mask.data()) {
                    *t += amp * mv;
                }
            }
            if g.modality == Modality::Surface {
                v = box_blur(dims, &v);
            }
            volumes.push(SyntheticVolume {
                group: *g,
                volume: Volume3D::new(dims, v)?,
                mask: if planted { mask.clone() } else { empty.clone() },
            });
        }
        subjects.push(SyntheticSubject {
            id: format!("sub-{:04}", i + 1),
            label: labels[i],
            volumes,
        });
    }
    Ok(subjects)
}

/// Writes the cohort under `dir` (one volume and one mask file per subject
/// and group) and returns its manifest, saved as `dir/manifest.json`.
pub fn generate_cohort(params: &CohortParams, dir: &Path) -> Result<CohortManifest> {
    let subjects = synthesize_cohort(params)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for s in &subjects {
        for sv in &s.volumes {
            let stem = format!("{}_{}", s.id, sv.group.tag());
            let path = PathBuf::from(format!("{stem}.xv3d"));
            let mask_path = PathBuf::from(format!("{stem}_mask.xv3d"));
            let mut meta = VolumeMeta::new(params.dims, "synthetic cohort");
            meta.subject = Some(s.id.clone());
            meta.label = Some(s.label);
            meta.modality = Some(sv.group.modality);
            meta.hemisphere = Some(sv.group.hemisphere);
            write_volume(
                &dir.join(&path),
                &VolumeFile {
                    volume: sv.volume.clone(),
                    meta: meta.clone(),
                },
            )?;
            meta.provenance = "synthetic cohort ground-truth mask".into();
            write_volume(
                &dir.join(&mask_path),
                &VolumeFile {
                    volume: sv.mask.clone(),
                    meta,
                },
            )?;
            entries.push(ManifestEntry {
                subject: s.id.clone(),
                label: s.label,
                modality: sv.group.modality,
                hemisphere: sv.group.hemisphere,
                path,
                mask_path: Some(mask_path),
                split: None,
            });
        }
    }
    let manifest = CohortManifest {
        dims: params.dims,
        seed: params.seed,
        split_fractions: None,
        entries,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
