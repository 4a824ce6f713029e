//! Phantom datasets: spec generation, on-disk layout and loading.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::grid::Dims;
use crate::nn::Scan;
use crate::phantom::{generate_phantom, PhantomError, PhantomSpec};
use crate::preprocess::normalize_intensity;
use crate::topo_loss::AdjacencySet;
use crate::volume_io::{read_volume, write_volume, VolumeGrid};

use super::ExperimentError;

fn d_train() -> usize {
    20
}
fn d_test() -> usize {
    10
}
fn d_teeth() -> u16 {
    8
}
fn d_size() -> [usize; 3] {
    [48, 48, 48]
}
fn d_axes() -> [f64; 3] {
    [6.0, 2.5, 2.5]
}
fn d_gap() -> f64 {
    1.0
}
fn d_noise() -> f64 {
    0.1
}
fn d_holed() -> usize {
    1
}
fn d_hole_radius() -> f64 {
    1.5
}

/// Recipe for a family of phantoms sharing one arc layout. Each scan draws its
/// own holed teeth and noise seed from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "d_train")]
    pub train: usize,
    #[serde(default = "d_test")]
    pub test: usize,
    #[serde(default = "d_teeth")]
    pub tooth_count: u16,
    /// Grid size `[d, h, w]`.
    #[serde(default = "d_size")]
    pub size: [usize; 3],
    /// Tooth semi-axes `[z, y, x]`.
    #[serde(default = "d_axes")]
    pub semi_axes: [f64; 3],
    #[serde(default = "d_gap")]
    pub gap: f64,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    #[serde(default = "d_holed")]
    pub holed_per_scan: usize,
    /// Radius of the tunnel through each holed tooth.
    #[serde(default = "d_hole_radius")]
    pub hole_radius: f64,
    /// Explicit specs; when present they replace the generated ones and are
    /// split into the first `train` and the remaining scans.
    #[serde(default)]
    pub specs: Option<Vec<PhantomSpec>>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: d_train(),
            test: d_test(),
            tooth_count: d_teeth(),
            size: d_size(),
            semi_axes: d_axes(),
            gap: d_gap(),
            noise_sigma: d_noise(),
            holed_per_scan: d_holed(),
            hole_radius: d_hole_radius(),
            specs: None,
        }
    }
}

impl DatasetConfig {
    pub fn dims(&self) -> Dims {
        Dims::new(self.size[0], self.size[1], self.size[2])
    }

    /// `(train, test)` phantom specs, deterministic in `seed`.
    pub fn resolve(&self, seed: u64) -> Result<(Vec<PhantomSpec>, Vec<PhantomSpec>), PhantomError> {
        if let Some(specs) = &self.specs {
            let cut = self.train.min(specs.len());
            return Ok((specs[..cut].to_vec(), specs[cut..].to_vec()));
        }
        if self.holed_per_scan > self.tooth_count as usize {
            return Err(PhantomError::InvalidParameter(
                "holed_per_scan exceeds tooth_count".into(),
            ));
        }
        let mut base = PhantomSpec::fitted(self.tooth_count, self.dims(), self.semi_axes, self.gap, Vec::new(), 0)?;
        base.noise_sigma = self.noise_sigma;
        base.hole_radius = self.hole_radius;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut all = Vec::with_capacity(self.train + self.test);
        for _ in 0..self.train + self.test {
            let mut spec = base.clone();
            let mut teeth: Vec<u16> = (1..=self.tooth_count).collect();
            let mut holed = Vec::with_capacity(self.holed_per_scan);
            for _ in 0..self.holed_per_scan {
                holed.push(teeth.swap_remove(rng.gen_range(0..teeth.len())));
            }
            holed.sort_unstable();
            spec.holed_teeth = holed;
            spec.seed = rng.gen();
            all.push(spec);
        }
        let test = all.split_off(self.train);
        Ok((all, test))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Manifest entry for one generated scan, with its ground-truth topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub id: String,
    pub split: Split,
    /// Paths relative to the dataset directory.
    pub volume: String,
    pub mask: String,
    pub spec: PhantomSpec,
    pub components: usize,
    pub adjacency: AdjacencySet,
    pub tooth_b1: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub scans: Vec<ScanEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generate every scan into `dir` and return the manifest (not yet written).
pub fn write_dataset(
    dir: &Path,
    train: &[PhantomSpec],
    test: &[PhantomSpec],
    config: serde_json::Value,
) -> Result<Manifest, ExperimentError> {
    let mut scans = Vec::new();
    let splits = train.iter().map(|s| (Split::Train, s)).chain(test.iter().map(|s| (Split::Test, s)));
    for (i, (split, spec)) in splits.enumerate() {
        let id = format!("scan_{i:03}");
        let ph = generate_phantom(spec)?;
        let sub = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        std::fs::create_dir_all(dir.join(sub))?;
        let volume = format!("{sub}/{id}_volume.tqvx");
        let mask = format!("{sub}/{id}_mask.tqvx");
        write_volume(dir.join(&volume), &VolumeGrid::Scalar(ph.volume))?;
        write_volume(dir.join(&mask), &VolumeGrid::Labels(ph.mask))?;
        scans.push(ScanEntry {
            id,
            split,
            volume,
            mask,
            spec: spec.clone(),
            components: spec.tooth_count as usize,
            adjacency: ph.adjacency,
            tooth_b1: ph.tooth_b1,
        });
    }
    Ok(Manifest { config, scans })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ExperimentError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load and normalise the scans of one split.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Scan>, ExperimentError> {
    manifest
        .scans
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_entry(dir, e))
        .collect()
}

fn load_entry(dir: &Path, e: &ScanEntry) -> Result<Scan, ExperimentError> {
    let read = |rel: &str| -> Result<VolumeGrid, ExperimentError> {
        let p: PathBuf = dir.join(rel);
        read_volume(&p).map_err(|err| ExperimentError::Data(format!("{}: {err}", p.display())))
    };
    let volume = read(&e.volume)?.into_scalar()?;
    let mask = read(&e.mask)?.into_labels()?;
    if volume.dims() != mask.dims() {
        return Err(ExperimentError::Data(format!("{}: volume and mask dims differ", e.id)));
    }
    Ok(Scan {
        id: e.id.clone(),
        volume: normalize_intensity(&volume).volume,
        mask,
    })
}

/// Generate and normalise scans in memory, without touching the disk.
pub fn scans_from_specs(specs: &[PhantomSpec], prefix: &str) -> Result<Vec<Scan>, PhantomError> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let ph = generate_phantom(spec)?;
            Ok(Scan {
                id: format!("{prefix}_{i:03}"),
                volume: normalize_intensity(&ph.volume).volume,
                mask: ph.mask,
            })
        })
        .collect()
}
