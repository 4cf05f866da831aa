//! Probabilistic region atlases and voxel-per-region histograms of the
//! highest-valued explanation voxels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{read_volume, write_volume, VolumeFile, VolumeMeta};
use crate::error::{Error, Result};
use crate::volume::{apply_affine, AffineTransform3D, Dims, Volume3D};

/// Label for voxels outside every region.
pub const NA: &str = "NA";
pub const THRESHOLDS: [f64; 3] = [0.05, 0.10, 0.20];

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilisticAtlas {
    names: Vec<String>,
    regions: Vec<Volume3D>,
}

impl ProbabilisticAtlas {
    pub fn new(names: Vec<String>, regions: Vec<Volume3D>) -> Result<Self> {
        if names.is_empty() || names.len() != regions.len() {
            return Err(Error::InvalidArgument(format!(
                "atlas needs one name per region, got {} names and {} volumes",
                names.len(),
                regions.len()
            )));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() || names.iter().any(|n| n == NA) {
            return Err(Error::InvalidArgument(
                "region names must be unique and not \"NA\"".into(),
            ));
        }
        let dims = regions[0].dims();
        for r in &regions {
            r.ensure_dims(dims)?;
            if r.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument("region probabilities must lie in [0, 1]".into()));
            }
        }
        for i in 0..dims.len() {
            let s: f64 = regions.iter().map(|r| r.data()[i]).sum();
            if s > 1.0 + 1e-6 {
                return Err(Error::InvalidArgument(format!("probabilities at voxel {i} sum to {s}")));
            }
        }
        Ok(ProbabilisticAtlas { names, regions })
    }

    pub fn dims(&self) -> Dims {
        self.regions[0].dims()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn regions(&self) -> &[Volume3D] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Most probable region at a voxel (lowest index on ties), or `None`
    /// where every probability is zero.
    pub fn region_at(&self, voxel: usize) -> Option<usize> {
        let mut best = None;
        let mut best_p = 0.0;
        for (r, vol) in self.regions.iter().enumerate() {
            let p = vol.data()[voxel];
            if p > best_p {
                best_p = p;
                best = Some(r);
            }
        }
        best
    }
}

/// Gaussian blobs at random positions, scaled so probabilities at each voxel
/// sum to at most one; small values are cut to zero so the atlas has
/// unassigned voxels.
pub fn make_synthetic_atlas(dims: Dims, n_regions: usize, seed: u64) -> Result<ProbabilisticAtlas> {
    if n_regions == 0 {
        return Err(Error::InvalidArgument("atlas needs at least one region".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = dims.0.map(|n| n as f64);
    let size = ext.iter().cloned().fold(1.0, f64::max);
    let blobs: Vec<([f64; 3], f64)> = (0..n_regions)
        .map(|_| {
            let c = [
                rng.gen_range(0.0..ext[0]),
                rng.gen_range(0.0..ext[1]),
                rng.gen_range(0.0..ext[2]),
            ];
            (c, rng.gen_range(size / 8.0..size / 4.0))
        })
        .collect();
    let mut raw = vec![vec![0.0; dims.len()]; n_regions];
    for i in 0..dims.len() {
        let p = dims.coords(i).map(|v| v as f64);
        let mut total = 0.0;
        for (r, (c, s)) in blobs.iter().enumerate() {
            let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            raw[r][i] = (-d2 / (2.0 * s * s)).exp();
            total += raw[r][i];
        }
        let scale = 1.0 / total.max(1.0);
        for r in raw.iter_mut() {
            let v = r[i] * scale;
            r[i] = if v < 0.05 { 0.0 } else { v };
        }
    }
    let names = (1..=n_regions).map(|k| format!("region_{k:02}")).collect();
    let regions = raw.into_iter().map(|d| Volume3D::new(dims, d)).collect::<Result<_>>()?;
    ProbabilisticAtlas::new(names, regions)
}

/// Resamples an explanation onto the atlas grid.
pub fn register_to_atlas(g: &Volume3D, a: &ProbabilisticAtlas, t: &AffineTransform3D) -> Result<Volume3D> {
    apply_affine(g, t, a.dims())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionHistogram {
    pub fraction: f64,
    pub selected: usize,
    /// Atlas regions in order, then `NA`.
    pub counts: Vec<(String, usize)>,
}

impl RegionHistogram {
    pub fn count(&self, region: &str) -> Option<usize> {
        self.counts.iter().find(|(n, _)| n == region).map(|(_, c)| *c)
    }
}

/// Number of voxels kept at a threshold: `⌈fraction·V⌉`, tolerant of
/// rounding just above an integer.
pub fn selected_count(fraction: f64, voxels: usize) -> usize {
    ((fraction * voxels as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Assigns the highest `⌈fraction·V⌉` voxels (ties by ascending index) to
/// their most probable region.
pub fn threshold_histogram(g: &Volume3D, a: &ProbabilisticAtlas, fraction: f64) -> Result<RegionHistogram> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold fraction {fraction} outside (0, 1)"
        )));
    }
    g.ensure_dims(a.dims())?;
    let n = selected_count(fraction, g.len());
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&i, &j| g.data()[j].total_cmp(&g.data()[i]).then(i.cmp(&j)));
    let mut counts = vec![0usize; a.len() + 1];
    for &i in &order[..n] {
        counts[a.region_at(i).unwrap_or(a.len())] += 1;
    }
    let names = a.names().iter().cloned().chain(std::iter::once(NA.to_string()));
    Ok(RegionHistogram {
        fraction,
        selected: n,
        counts: names.zip(counts).collect(),
    })
}

pub fn histogram_csv(hists: &[RegionHistogram]) -> String {
    let mut s = String::from("region,threshold,count\n");
    for h in hists {
        for (name, c) in &h.counts {
            s.push_str(&format!("{name},{:.6},{c}\n", h.fraction));
        }
    }
    s
}

#[derive(Serialize, Deserialize)]
struct AtlasManifest {
    dims: Dims,
    names: Vec<String>,
    files: Vec<PathBuf>,
}

/// Writes one volume per region plus `atlas.json`.
pub fn save_atlas(a: &ProbabilisticAtlas, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, vol) in a.names().iter().zip(a.regions()) {
        let file = PathBuf::from(format!("{name}.xv3d"));
        write_volume(
            &dir.join(&file),
            &VolumeFile {
                volume: vol.clone(),
                meta: VolumeMeta::new(vol.dims(), format!("atlas region {name}")),
            },
        )?;
        files.push(file);
    }
    let m = AtlasManifest {
        dims: a.dims(),
        names: a.names().to_vec(),
        files,
    };
    let path = dir.join("atlas.json");
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_atlas(dir: &Path) -> Result<ProbabilisticAtlas> {
    let path = dir.join("atlas.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: AtlasManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let regions = m
        .files
        .iter()
        .map(|f| {
            let v = read_volume(&dir.join(f))?.volume;
            v.ensure_dims(m.dims)?;
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    ProbabilisticAtlas::new(m.names, regions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selects_exact_count() {
        let dims = Dims::new(10, 10, 10);
        let g = Volume3D::from_fn(dims, |x, y, z| ((x * 37 + y * 11 + z * 5) % 17) as f64).unwrap();
        let a = ProbabilisticAtlas::new(vec!["all".into()], vec![Volume3D::filled(dims, 1.0)]).unwrap();
        let h = threshold_histogram(&g, &a, 0.20).unwrap();
        assert_eq!(h.selected, 200);
        assert_eq!(h.count("all"), Some(200));
        assert_eq!(h.count(NA), Some(0));
    }

    #[test]
    fn ties_break_by_index() {
        let dims = Dims::new(10, 1, 1);
        let g = Volume3D::filled(dims, 1.0);
        let left = Volume3D::from_fn(dims, |x, _, _| if x < 3 { 1.0 } else { 0.0 }).unwrap();
        let a = ProbabilisticAtlas::new(vec!["left".into()], vec![left]).unwrap();
        let h = threshold_histogram(&g, &a, 0.25).unwrap();
        assert_eq!(h.selected, 3);
        assert_eq!(h.count("left"), Some(3));
        let h = threshold_histogram(&g, &a, 0.5).unwrap();
        assert_eq!((h.count("left"), h.count(NA)), (Some(3), Some(2)));
    }

    #[test]
    fn rejects_bad_fraction_and_atlas() {
        let dims = Dims::cube(2);
        let a = ProbabilisticAtlas::new(vec!["r".into()], vec![Volume3D::filled(dims, 0.5)]).unwrap();
        for f in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(threshold_histogram(&Volume3D::zeros(dims), &a, f).is_err());
        }
        let half = Volume3D::filled(dims, 0.6);
        assert!(ProbabilisticAtlas::new(vec!["a".into(), "b".into()], vec![half.clone(), half.clone()]).is_err());
        assert!(ProbabilisticAtlas::new(vec!["a".into(), "a".into()], vec![half.clone(), half]).is_err());
    }

    #[test]
    fn synthetic_atlas_invariants() {
        for seed in 0..100 {
            let a = make_synthetic_atlas(Dims::new(8, 7, 6), 5, seed).unwrap();
            assert_eq!(a.len(), 5);
            for i in 0..a.dims().len() {
                let s: f64 = a.regions().iter().map(|r| r.data()[i]).sum();
                assert!(s <= 1.0 + 1e-6);
            }
        }
        assert_eq!(
            make_synthetic_atlas(Dims::cube(6), 3, 9).unwrap(),
            make_synthetic_atlas(Dims::cube(6), 3, 9).unwrap()
        );
        assert!(make_synthetic_atlas(Dims::cube(6), 0, 9).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = make_synthetic_atlas(Dims::cube(6), 3, 1).unwrap();
        save_atlas(&a, dir.path()).unwrap();
        let b = load_atlas(dir.path()).unwrap();
        assert_eq!(b.names(), a.names());
        for (x, y) in a.regions().iter().zip(b.regions()) {
            assert!(x.max_abs_diff(y) < 1e-7);
        }
    }

    #[test]
    fn csv_layout() {
        let h = RegionHistogram {
            fraction: 0.05,
            selected: 3,
            counts: vec![("r1".into(), 2), (NA.into(), 1)],
        };
        assert_eq!(
            histogram_csv(&[h]),
            "region,threshold,count\nr1,0.050000,2\nNA,0.050000,1\n"
        );
    }
}
