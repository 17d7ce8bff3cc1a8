//! Dataset generation and the JSON manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! train/manifest.json   train/mixture/<id>.png   train/target/<id>.png
//! test/manifest.json    test/mixture/<id>.png    test/target/<id>.png
//! ```
//!
//! Transmission sources are sorted by file name. A permutation drawn from
//! stream `u64::MAX` of the seeded generator assigns the first
//! `floor(n · train_fraction)` of them to the training split, so no
//! transmission image appears in both splits. Transmission `t` (sorted
//! position) draws its reflections from stream `2^63 + t`: distinct ones when
//! enough sources exist, with replacement otherwise. Its `j`-th sample has
//! index `t · reflections_per_transmission + j`, which also names the files.

use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{synthesize_pair, BetaMode, CropRect, SynthConfig};
use crate::error::{invalid_input, Error, Result};
use crate::fsutil;
use crate::imgcore::{read_png, write_png};

pub const MANIFEST_VERSION: u32 = 1;

const SPLIT_STREAM: u64 = u64::MAX;
const REFLECTION_STREAM_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    /// Relative to the manifest's directory.
    pub mixture_path: String,
    pub target_path: String,
    /// Source file names within their input directories.
    pub transmission_src: String,
    pub reflection_src: String,
    pub alpha: f64,
    pub sigma: f64,
    pub offsets: Option<[isize; 2]>,
    pub mode: BetaMode,
    pub beta: f64,
    pub index: u64,
    pub crop: CropRect,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    pub config: SynthConfig,
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("malformed manifest {}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest {} has version {}, expected {MANIFEST_VERSION}",
                path.display(),
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_bytes_atomic(path, self.to_json().as_bytes())
    }

    /// Transmission sources referenced by this manifest, deduplicated in order.
    pub fn transmission_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for s in &self.samples {
            if !ids.contains(&s.transmission_src.as_str()) {
                ids.push(&s.transmission_src);
            }
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Manifest,
    pub test: Manifest,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.samples.len() + self.test.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(invalid_input!("{} is not a directory", dir.display()));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(invalid_input!("no PNG files in {}", dir.display()));
    }
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Sorted transmission positions assigned to the training split.
pub(crate) fn train_positions(n: usize, cfg: &SynthConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let n_train = (n as f64 * cfg.train_fraction).floor() as usize;
    let mut train = order[..n_train.min(n)].to_vec();
    train.sort_unstable();
    train
}

fn reflection_choices(t: usize, n_refl: usize, cfg: &SynthConfig) -> Vec<usize> {
    let k = cfg.reflections_per_transmission;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(REFLECTION_STREAM_BASE + t as u64);
    if k <= n_refl {
        index::sample(&mut rng, n_refl, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n_refl)).collect()
    }
}

pub fn generate_dataset(
    transmission_dir: &Path,
    reflection_dir: &Path,
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<Dataset> {
    cfg.validate()?;
    let transmissions = list_pngs(transmission_dir)?;
    let reflections = list_pngs(reflection_dir)?;
    let train = train_positions(transmissions.len(), cfg);

    let mut manifests = [("train", Vec::new()), ("test", Vec::new())];
    for dir in ["train", "test"] {
        for kind in ["mixture", "target"] {
            fsutil::create_dir_all(&out_dir.join(dir).join(kind))?;
        }
    }

    let k = cfg.reflections_per_transmission;
    for (t, t_path) in transmissions.iter().enumerate() {
        let t_img = read_png(t_path)?;
        let split = usize::from(train.binary_search(&t).is_err());
        let (split_name, samples) = &mut manifests[split];
        for (j, r) in reflection_choices(t, reflections.len(), cfg).into_iter().enumerate() {
            let r_path = &reflections[r];
            let index = (t * k + j) as u64;
            let pair = synthesize_pair(&t_img, &read_png(r_path)?, cfg, index)?;
            let id = format!("{index:06}");
            let mixture_path = format!("mixture/{id}.png");
            let target_path = format!("target/{id}.png");
            let split_dir = out_dir.join(&**split_name);
            write_png(&pair.mixture, &split_dir.join(&mixture_path))?;
            write_png(&pair.target, &split_dir.join(&target_path))?;
            let p = pair.provenance;
            samples.push(ManifestSample {
                id,
                mixture_path,
                target_path,
                transmission_src: file_name(t_path),
                reflection_src: file_name(r_path),
                alpha: p.alpha,
                sigma: p.sigma,
                offsets: p.offsets,
                mode: p.mode,
                beta: p.beta,
                index,
                crop: p.crop,
                noise_seed: p.noise_seed,
            });
        }
    }

    let [(_, train_samples), (_, test_samples)] = manifests;
    let make = |split: &str, samples| Manifest {
        version: MANIFEST_VERSION,
        split: split.to_string(),
        config: cfg.clone(),
        samples,
    };
    let dataset = Dataset {
        train: make("train", train_samples),
        test: make("test", test_samples),
        train_path: out_dir.join("train").join("manifest.json"),
        test_path: out_dir.join("test").join("manifest.json"),
    };
    dataset.train.save(&dataset.train_path)?;
    dataset.test.save(&dataset.test_path)?;
    Ok(dataset)
}
