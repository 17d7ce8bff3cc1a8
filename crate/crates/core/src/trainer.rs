//! Mini-batch training and PSNR evaluation.
//!
//! Training minimizes the combined loss averaged over mini-batches with Adam.
//! Epoch `e` visits the samples in a permutation drawn from stream `e` of a
//! ChaCha8 generator seeded with `seed`; the last batch of an epoch may be
//! short. Every pair is decoded before the first step, so a missing or
//! mismatched file fails the run before any weight changes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::fsutil;
use crate::imgcore::{psnr, read_png};
use crate::loss::{combined_loss_graph, load_extractor_weights, ExtractorConfig, FeatureExtractor, LossWeights};
use crate::model::{build_network, image_to_tensor, save_checkpoint, tensor_to_image, ModelConfig, Network};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, Tensor4};
use crate::synthesis::Manifest;

/// Mean PSNR reported for the synthetic test set and for the external benchmark.
pub const REFERENCE_PSNR_SYNTHETIC: f64 = 29.08;
pub const REFERENCE_PSNR_BENCHMARK: f64 = 18.70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub manifest: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Pretrained extractor weights; the seeded extractor is used when unset.
    pub extractor_weights: Option<PathBuf>,
    pub extractor: ExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 20,
            lambda: crate::loss::DEFAULT_LAMBDA,
            seed: 0,
            checkpoint_every: 0,
            manifest: PathBuf::from("data/train/manifest.json"),
            checkpoint_path: None,
            log_path: None,
            extractor_weights: None,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "beta1 and beta2 must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        LossWeights::new(self.lambda).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Named training setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small model and batch, runs in minutes on a laptop CPU.
    Desk,
    /// Tiny model for end-to-end checks on a handful of samples.
    Smoke,
    /// Full-size network, batch 64, 150 epochs. Not runnable on a CPU in reasonable time.
    Paper,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Desk, Profile::Smoke, Profile::Paper];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Smoke => "smoke",
            Profile::Paper => "paper",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn configs(self) -> (TrainConfig, ModelConfig) {
        match self {
            Profile::Desk => (
                TrainConfig::default(),
                ModelConfig {
                    filters: 16,
                    inner_kernel: 3,
                    outer_kernel: 3,
                    stage1_convs: 3,
                    stage2_convs: 3,
                    stage2_deconvs: 3,
                    stage3_deconvs: 3,
                    skip_pairs: vec![(5, 2)],
                    ..ModelConfig::default()
                },
            ),
            Profile::Smoke => (
                TrainConfig {
                    lr: 1e-2,
                    batch_size: 8,
                    epochs: 300,
                    extractor: ExtractorConfig::from_channels(&[3, 4, 4, 8, 8, 8], 3, 0x5EED),
                    ..TrainConfig::default()
                },
                ModelConfig::test_scale(8, 3),
            ),
            Profile::Paper => (
                TrainConfig {
                    batch_size: 64,
                    epochs: 150,
                    ..TrainConfig::default()
                },
                ModelConfig::default(),
            ),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub extractor_checksum: String,
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub wall_time_ms: u64,
}

impl TrainLog {
    /// One JSON object per step.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.steps {
            out.push_str(&serde_json::to_string(r).expect("step record serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: TrainLog,
}

/// A decoded manifest entry.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub id: String,
    pub mixture: Tensor4,
    pub target: Tensor4,
}

fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
}

fn load_pair(manifest_path: &Path, id: &str, mixture: &str, target: &str) -> Result<LoadedPair> {
    let m = read_png(&resolve(manifest_path, mixture))?;
    let t = read_png(&resolve(manifest_path, target))?;
    if m.dims() != t.dims() {
        return Err(Error::Data(format!(
            "sample {id}: mixture is {:?} but target is {:?}",
            m.dims(),
            t.dims()
        )));
    }
    Ok(LoadedPair {
        id: id.to_string(),
        mixture: image_to_tensor(&m),
        target: image_to_tensor(&t),
    })
}

/// Decodes every pair of the manifest, failing on the first unreadable one.
pub fn load_pairs(manifest_path: &Path) -> Result<Vec<LoadedPair>> {
    let manifest = Manifest::load(manifest_path)?;
    manifest
        .samples
        .iter()
        .map(|s| {
            load_pair(manifest_path, &s.id, &s.mixture_path, &s.target_path)
                .map_err(|e| Error::Data(format!("sample {}: {e}", s.id)))
        })
        .collect()
}

/// Sample order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn build_extractor(cfg: &TrainConfig) -> Result<FeatureExtractor> {
    match &cfg.extractor_weights {
        Some(path) => load_extractor_weights(path, &cfg.extractor, false),
        None => FeatureExtractor::seeded(&cfg.extractor),
    }
}

fn write_log(log: &TrainLog, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fsutil::write_bytes_atomic(p, log.to_ndjson().as_bytes()),
        None => Ok(()),
    }
}

/// Trains a freshly initialized network on the manifest named in `cfg`.
pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let pairs = load_pairs(&cfg.manifest)?;
    train_on(cfg, build_network(model_cfg)?, &pairs)
}

/// Trains `network` on already decoded pairs.
pub fn train_on(cfg: &TrainConfig, mut network: Network, pairs: &[LoadedPair]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("the training set is empty".into()));
    }
    if cfg.batch_size > 1 {
        let dims = pairs[0].mixture.dims();
        if let Some(p) = pairs.iter().find(|p| p.mixture.dims() != dims) {
            return Err(Error::Data(format!(
                "sample {} is {:?} but {} is {:?}; batching needs equal sizes",
                p.id,
                p.mixture.dims(),
                pairs[0].id,
                dims
            )));
        }
    }
    let fx = build_extractor(cfg)?;
    let weights = LossWeights::new(cfg.lambda)?;
    let mut adam = AdamState::new(cfg.adam(), network.params());
    let mut log = TrainLog {
        seed: cfg.seed,
        config: cfg.clone(),
        model: network.config().clone(),
        extractor_checksum: fx.checksum().to_string(),
        steps: Vec::new(),
        epoch_mean_loss: Vec::with_capacity(cfg.epochs),
        wall_time_ms: 0,
    };
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(pairs.len(), cfg.seed, epoch);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LoadedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let x = Tensor4::stack(&batch.iter().map(|p| &p.mixture).collect::<Vec<_>>())?;
            let y = Tensor4::stack(&batch.iter().map(|p| &p.target).collect::<Vec<_>>())?;

            let mut g = Graph::new();
            let params = network.bind(&mut g, true);
            let bound = fx.bind(&mut g);
            let xv = g.constant(x);
            let yv = g.constant(y);
            let (out, _) = network.forward_graph(&mut g, &params, xv)?;
            let losses = combined_loss_graph(&mut g, &fx, &bound, out, yv, weights)?;
            let loss = g.value(losses.total).item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    loss,
                    batch: batch.iter().map(|p| p.id.clone()).collect(),
                });
            }
            g.backward(losses.total)?;
            let grads: Vec<&[f64]> = params
                .iter()
                .map(|&v| g.grad(v).ok_or_else(|| invalid_arg!("parameter without gradient")))
                .collect::<Result<_>>()?;
            adam_step(network.params_mut(), &grads, &mut adam)?;

            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                l2: g.value(losses.l2).item(),
                perceptual: losses.perceptual.map_or(0.0, |p| g.value(p).item()),
                elapsed_ms: start.elapsed().as_millis() as u64,
            });
            epoch_sum += loss;
            batches += 1;
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(path) = &cfg.checkpoint_path {
                    save_checkpoint(&network, path)?;
                    write_log(&log, cfg.log_path.as_deref())?;
                }
            }
        }
        log.epoch_mean_loss.push(epoch_sum / batches as f64);
    }
    log.wall_time_ms = start.elapsed().as_millis() as u64;
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&network, path)?;
    }
    write_log(&log, cfg.log_path.as_deref())?;
    Ok(TrainOutcome { network, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePsnr {
    pub synthetic_set: f64,
    pub benchmark_set: f64,
}

/// PSNR of one sample. Infinite values (exact reconstruction) serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub psnr: Option<f64>,
    pub baseline_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// What the outputs are compared against.
    pub target: String,
    pub reference_mean_psnr: ReferencePsnr,
    pub num_samples: usize,
    pub num_failed: usize,
    pub empty: bool,
    /// Means over the samples that evaluated; `null` when none did.
    pub mean_psnr: Option<f64>,
    pub baseline_mean_psnr: Option<f64>,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_bytes_atomic(path, self.to_json().as_bytes())
    }
}

fn score(net: &Network, pair: &LoadedPair) -> Result<(f64, f64)> {
    let (out, _) = net.forward(&pair.mixture, false)?;
    let output = tensor_to_image(&out, 0)?;
    let mixture = tensor_to_image(&pair.mixture, 0)?;
    let target = tensor_to_image(&pair.target, 0)?;
    Ok((psnr(&output, &target, 1.0)?, psnr(&mixture, &target, 1.0)?))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every manifest entry; unreadable or mismatched samples become error
/// entries and do not stop the run. Only a missing or malformed manifest fails.
pub fn evaluate(net: &Network, manifest_path: &Path) -> Result<EvalReport> {
    let manifest = Manifest::load(manifest_path)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut ok = Vec::new();
    for s in &manifest.samples {
        let result = load_pair(manifest_path, &s.id, &s.mixture_path, &s.target_path).and_then(|p| score(net, &p));
        samples.push(match result {
            Ok((p, b)) => {
                ok.push((p, b));
                SampleScore {
                    id: s.id.clone(),
                    psnr: Some(p),
                    baseline_psnr: Some(b),
                    error: None,
                }
            }
            Err(e) => SampleScore {
                id: s.id.clone(),
                psnr: None,
                baseline_psnr: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(EvalReport {
        target: "alpha * T, gamma-encoded (the synthesized target image)".into(),
        reference_mean_psnr: ReferencePsnr {
            synthetic_set: REFERENCE_PSNR_SYNTHETIC,
            benchmark_set: REFERENCE_PSNR_BENCHMARK,
        },
        num_samples: samples.len(),
        num_failed: samples.len() - ok.len(),
        empty: samples.is_empty(),
        mean_psnr: mean(ok.iter().map(|v| v.0)),
        baseline_mean_psnr: mean(ok.iter().map(|v| v.1)),
        samples,
    })
}
