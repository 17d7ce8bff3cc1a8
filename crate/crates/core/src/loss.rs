//! Training objective.
//!
//! * Pixel loss: mean of squared differences over every element,
//!   `L₂ = (1 / numel) Σ (F(I) − αT)²`.
//! * Perceptual loss over a frozen extractor with stages `φ₁..φ_M`:
//!   `L_feat = Σᵢ ‖φᵢ(αT) − φᵢ(F(I))‖² / (Wᵢ·Hᵢ)`, with each stage term
//!   normalized by its own spatial size. Channels are summed, not averaged.
//!   For a batch of `N` items the sum is further divided by `N`, i.e. it is the
//!   per-image loss averaged over the batch.
//! * Combined: `L = L₂ + λ·L_feat`, `λ = 0.001` by default.
//!
//! # Extractor weight file
//!
//! ```text
//! magic        8 bytes  "UNRFFEXT"
//! version      u32      1
//! stage_count  u32
//! per stage    u32 in_channels, u32 out_channels, u32 kernel
//! params       f64 little-endian, per stage: weights (out × in × k × k) then bias (out)
//! ```
//!
//! Each stage is a stride-1 same-padding convolution followed by a ReLU.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid_arg, CheckpointError, Error, Result};
use crate::fsutil;
use crate::model::checkpoint::Reader;
use crate::nn::{ConvLayerSpec, ConvShape, Graph, Tensor4, Var};

pub const EXTRACTOR_MAGIC: &[u8; 8] = b"UNRFFEXT";
pub const EXTRACTOR_VERSION: u32 = 1;
pub const DEFAULT_LAMBDA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub stages: Vec<StageShape>,
    /// Seed for the randomly initialized provider.
    pub seed: u64,
}

impl Default for ExtractorConfig {
    /// Five 3×3 stages, `3 → 8 → 8 → 16 → 16 → 16` channels.
    fn default() -> Self {
        Self::from_channels(&[3, 8, 8, 16, 16, 16], 3, 0x5EED)
    }
}

impl ExtractorConfig {
    pub fn from_channels(channels: &[usize], kernel: usize, seed: u64) -> Self {
        let stages = channels
            .windows(2)
            .map(|w| StageShape {
                in_channels: w[0],
                out_channels: w[1],
                kernel,
            })
            .collect();
        Self { stages, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(invalid_arg!("lambda must be finite and >= 0, got {lambda}"));
        }
        Ok(Self { lambda })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

/// Frozen multi-stage convolutional feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<ConvLayerSpec>,
    checksum: String,
}

impl FeatureExtractor {
    pub fn from_stages(stages: Vec<ConvLayerSpec>) -> Result<Self> {
        if stages.is_empty() {
            return Err(invalid_arg!("feature extractor needs at least one stage"));
        }
        for pair in stages.windows(2) {
            if pair[0].shape.out_channels != pair[1].shape.in_channels {
                return Err(invalid_arg!(
                    "extractor stages do not chain: {:?} then {:?}",
                    pair[0].shape,
                    pair[1].shape
                ));
            }
        }
        if stages.iter().any(|s| s.shape.transposed) {
            return Err(invalid_arg!("extractor stages must be plain convolutions"));
        }
        let mut fx = Self {
            stages,
            checksum: String::new(),
        };
        fx.checksum = hex(&Sha256::digest(fx.to_bytes()));
        Ok(fx)
    }

    /// Fan-in scaled uniform weights; stage `i` draws from stream `i` of `cfg.seed`.
    pub fn seeded(cfg: &ExtractorConfig) -> Result<Self> {
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(ConvLayerSpec::init(
                    ConvShape::new(s.in_channels, s.out_channels, s.kernel, false)?,
                    cfg.seed,
                    i as u64,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_stages(stages)
    }

    pub fn stages(&self) -> &[ConvLayerSpec] {
        &self.stages
    }

    pub fn stage_shapes(&self) -> Vec<StageShape> {
        self.stages
            .iter()
            .map(|s| StageShape {
                in_channels: s.shape.in_channels,
                out_channels: s.shape.out_channels,
                kernel: s.shape.kernel,
            })
            .collect()
    }

    /// SHA-256 of the serialized weight file, hex encoded.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn max_kernel(&self) -> usize {
        self.stages.iter().map(|s| s.shape.kernel).max().unwrap_or(1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EXTRACTOR_MAGIC);
        out.extend_from_slice(&EXTRACTOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.stages.len() as u32).to_le_bytes());
        for s in &self.stages {
            for v in [s.shape.in_channels, s.shape.out_channels, s.shape.kernel] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        for s in &self.stages {
            for v in s.weights.data().iter().chain(s.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        r.magic(EXTRACTOR_MAGIC, EXTRACTOR_VERSION)?;
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let (i, o, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            shapes.push(ConvShape::new(i, o, k, false).map_err(|e| CheckpointError::Header(e.to_string()))?);
        }
        let mut stages = Vec::with_capacity(count);
        for shape in shapes {
            let n = shape
                .weight_dims()
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Header(format!("stage {shape:?} is too large")))?;
            let weights =
                Tensor4::new(shape.weight_dims(), r.f64s(n)?).map_err(|e| CheckpointError::Shape(e.to_string()))?;
            let bias = Tensor4::new(shape.bias_dims(), r.f64s(shape.out_channels)?)
                .map_err(|e| CheckpointError::Shape(e.to_string()))?;
            stages.push(ConvLayerSpec { shape, weights, bias });
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Shape(format!(
                "{} trailing bytes after the parameters",
                r.remaining()
            )));
        }
        Self::from_stages(stages).map_err(|e| CheckpointError::Shape(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_bytes_atomic(path, &self.to_bytes())
    }

    /// Adds the weights to `g` as constants; they never receive gradients.
    pub fn bind(&self, g: &mut Graph) -> BoundExtractor {
        let vars = self
            .stages
            .iter()
            .map(|s| (g.constant(s.weights.clone()), g.constant(s.bias.clone())))
            .collect();
        BoundExtractor { vars }
    }

    /// Feature maps of every stage for `x`.
    pub fn features(&self, x: &Tensor4) -> Result<Vec<Tensor4>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let feats = self.features_graph(&mut g, &bound, xv)?;
        Ok(feats.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn features_graph(&self, g: &mut Graph, bound: &BoundExtractor, x: Var) -> Result<Vec<Var>> {
        let [_, c, h, w] = g.value(x).dims();
        let k = self.max_kernel();
        if h < k || w < k {
            return Err(invalid_arg!(
                "input {h}x{w} is smaller than the extractor's {k}x{k} kernels"
            ));
        }
        if c != self.stages[0].shape.in_channels {
            return Err(invalid_arg!(
                "extractor expects {} channels, got {c}",
                self.stages[0].shape.in_channels
            ));
        }
        let mut h_var = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for (s, &(wv, bv)) in self.stages.iter().zip(&bound.vars) {
            let pre = g.conv(h_var, wv, bv, s.shape)?;
            h_var = g.relu(pre);
            out.push(h_var);
        }
        Ok(out)
    }
}

/// Graph handles of an extractor's weights.
#[derive(Debug, Clone)]
pub struct BoundExtractor {
    vars: Vec<(Var, Var)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads extractor weights and audits their shapes against `declared`.
/// A missing file yields the seeded provider when `fallback` is set.
pub fn load_extractor_weights(path: &Path, declared: &ExtractorConfig, fallback: bool) -> Result<FeatureExtractor> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && fallback => return FeatureExtractor::seeded(declared),
        Err(e) => return Err(Error::io(path, e)),
    };
    let fx = FeatureExtractor::from_bytes(&bytes)?;
    if fx.stage_shapes() != declared.stages {
        return Err(CheckpointError::Shape(format!(
            "extractor file stages {:?} differ from the declared {:?}",
            fx.stage_shapes(),
            declared.stages
        ))
        .into());
    }
    Ok(fx)
}

/// Scalar handles of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l2: Var,
    /// Absent when `λ = 0`, in which case the extractor is not evaluated.
    pub perceptual: Option<Var>,
}

pub fn l2_loss_graph(g: &mut Graph, output: Var, target: Var) -> Result<Var> {
    g.mean_sq_diff(output, target)
}

pub fn perceptual_loss_graph(
    g: &mut Graph,
    fx: &FeatureExtractor,
    bound: &BoundExtractor,
    output: Var,
    target: Var,
) -> Result<Var> {
    g.value(output).expect_same_dims(g.value(target), "perceptual loss")?;
    let n = g.value(output).batch() as f64;
    let fo = fx.features_graph(g, bound, output)?;
    let ft = fx.features_graph(g, bound, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fo.into_iter().zip(ft) {
        let [_, _, h, w] = g.value(a).dims();
        let term = g.sq_diff(b, a, 1.0 / ((w * h) as f64 * n))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has at least one stage"))
}

pub fn combined_loss_graph(
    g: &mut Graph,
    fx: &FeatureExtractor,
    bound: &BoundExtractor,
    output: Var,
    target: Var,
    weights: LossWeights,
) -> Result<LossVars> {
    let l2 = l2_loss_graph(g, output, target)?;
    if weights.lambda == 0.0 {
        return Ok(LossVars {
            total: l2,
            l2,
            perceptual: None,
        });
    }
    let perceptual = perceptual_loss_graph(g, fx, bound, output, target)?;
    let scaled = g.scale(perceptual, weights.lambda);
    let total = g.add(l2, scaled)?;
    Ok(LossVars {
        total,
        l2,
        perceptual: Some(perceptual),
    })
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub l2: f64,
    pub perceptual: f64,
}

pub fn l2_loss(output: &Tensor4, target: &Tensor4) -> Result<f64> {
    let mut g = Graph::new();
    let (o, t) = (g.constant(output.clone()), g.constant(target.clone()));
    let l = l2_loss_graph(&mut g, o, t)?;
    Ok(g.value(l).item())
}

pub fn perceptual_loss(fx: &FeatureExtractor, output: &Tensor4, target: &Tensor4) -> Result<f64> {
    let mut g = Graph::new();
    let bound = fx.bind(&mut g);
    let (o, t) = (g.constant(output.clone()), g.constant(target.clone()));
    let l = perceptual_loss_graph(&mut g, fx, &bound, o, t)?;
    Ok(g.value(l).item())
}

pub fn combined_loss(
    output: &Tensor4,
    target: &Tensor4,
    fx: &FeatureExtractor,
    weights: LossWeights,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let bound = fx.bind(&mut g);
    let (o, t) = (g.constant(output.clone()), g.constant(target.clone()));
    let vars = combined_loss_graph(&mut g, fx, &bound, o, t, weights)?;
    Ok(LossValues {
        total: g.value(vars.total).item(),
        l2: g.value(vars.l2).item(),
        perceptual: vars.perceptual.map_or(0.0, |p| g.value(p).item()),
    })
}
