//! The three-stage reflection removal encoder-decoder.
//!
//! Layers are named `conv1..convC` and `deconv1..deconvD` in network order.
//! With the default depths (6 / 6 / 6 / 6):
//!
//! 1. **Feature extraction**: `conv1..conv6`, each followed by a ReLU.
//! 2. **Reflection recovery**: `conv7..conv12` then `deconv1..deconv6`, each
//!    followed by a ReLU. Each skip pair `(c, d)` adds the (post-ReLU) output
//!    of `conv_c` to the pre-activation of `deconv_d`.
//! 3. **Junction**: `relu(conv6 − deconv6)` removes the recovered reflection features.
//! 4. **Transmission restoration**: `deconv7..deconv12`, ReLU after each except
//!    the last, which maps the features to 3 channels and stays linear.
//!
//! Every layer is stride 1 with same padding, so the network is fully
//! convolutional. The first two convolutions and the last two deconvolutions
//! use `outer_kernel`; all others use `inner_kernel`.

pub(crate) mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::imgcore::{EncodedImage, CHANNELS};
use crate::nn::{ConvLayerSpec, ConvShape, Graph, Tensor4, Var};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

const MAX_CHANNELS: usize = 1 << 16;
const MAX_KERNEL: usize = 255;
const MAX_LAYERS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub filters: usize,
    pub inner_kernel: usize,
    pub outer_kernel: usize,
    pub stage1_convs: usize,
    pub stage2_convs: usize,
    pub stage2_deconvs: usize,
    pub stage3_deconvs: usize,
    /// `(conv index, deconv index)`, both 1-based network-wide names.
    pub skip_pairs: Vec<(usize, usize)>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            filters: 64,
            inner_kernel: 5,
            outer_kernel: 5,
            stage1_convs: 6,
            stage2_convs: 6,
            stage2_deconvs: 6,
            stage3_deconvs: 6,
            skip_pairs: vec![(8, 5), (10, 3)],
            in_channels: 3,
            out_channels: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// One layer per stage, no skips.
    pub fn test_scale(filters: usize, kernel: usize) -> Self {
        Self {
            filters,
            inner_kernel: kernel,
            outer_kernel: kernel,
            stage1_convs: 1,
            stage2_convs: 1,
            stage2_deconvs: 1,
            stage3_deconvs: 1,
            skip_pairs: Vec::new(),
            ..Self::default()
        }
    }

    pub fn num_convs(&self) -> usize {
        self.stage1_convs.saturating_add(self.stage2_convs)
    }

    pub fn num_deconvs(&self) -> usize {
        self.stage2_deconvs.saturating_add(self.stage3_deconvs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.filters == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("filters and channel counts must be positive".into());
        }
        // Bounds keep parameter counts far from usize overflow, even for a corrupted checkpoint header.
        if self.filters.max(self.in_channels).max(self.out_channels) > MAX_CHANNELS
            || self.inner_kernel.max(self.outer_kernel) > MAX_KERNEL
            || self.num_convs().saturating_add(self.num_deconvs()) > MAX_LAYERS
        {
            return bad(format!(
                "limits are {MAX_CHANNELS} channels, {MAX_KERNEL}x{MAX_KERNEL} kernels and {MAX_LAYERS} layers"
            ));
        }
        if self.inner_kernel.is_multiple_of(2) || self.outer_kernel.is_multiple_of(2) {
            return bad(format!(
                "kernel sizes must be odd, got {} and {}",
                self.inner_kernel, self.outer_kernel
            ));
        }
        if [
            self.stage1_convs,
            self.stage2_convs,
            self.stage2_deconvs,
            self.stage3_deconvs,
        ]
        .contains(&0)
        {
            return bad("every stage needs at least one layer".into());
        }
        let convs = self.stage1_convs + 1..=self.num_convs();
        let deconvs = 1..=self.stage2_deconvs;
        for &(c, d) in &self.skip_pairs {
            if !convs.contains(&c) || !deconvs.contains(&d) {
                return bad(format!(
                    "skip pair (conv{c}, deconv{d}) must connect conv{}..conv{} to deconv1..deconv{}",
                    convs.start(),
                    convs.end(),
                    deconvs.end()
                ));
            }
        }
        Ok(())
    }

    /// Layer geometries in network order: convolutions, then deconvolutions.
    pub fn layer_shapes(&self) -> Result<Vec<ConvShape>> {
        self.validate()?;
        let (nc, nd, f) = (self.num_convs(), self.num_deconvs(), self.filters);
        let mut shapes = Vec::with_capacity(nc + nd);
        for c in 1..=nc {
            let k = if c <= 2 { self.outer_kernel } else { self.inner_kernel };
            let cin = if c == 1 { self.in_channels } else { f };
            shapes.push(ConvShape::new(cin, f, k, false)?);
        }
        for d in 1..=nd {
            let k = if d + 1 >= nd {
                self.outer_kernel
            } else {
                self.inner_kernel
            };
            let cout = if d == nd { self.out_channels } else { f };
            shapes.push(ConvShape::new(f, cout, k, true)?);
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_shapes()?.iter().map(ConvShape::param_count).sum())
    }

    pub fn max_kernel(&self) -> usize {
        self.inner_kernel.max(self.outer_kernel)
    }
}

/// Intermediate feature maps, each `N × filters × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTaps {
    pub conv6_out: Tensor4,
    pub deconv6_out: Tensor4,
    pub junction_out: Tensor4,
}

/// Graph handles of the tapped feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapVars {
    pub conv6_out: Var,
    pub deconv6_out: Var,
    pub junction_out: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    shapes: Vec<ConvShape>,
    /// `[w1, b1, w2, b2, …]` in layer order.
    params: Vec<Tensor4>,
}

/// Builds a network with fan-in scaled uniform weights (see
/// [`ConvLayerSpec::init`]); layer `i` draws from stream `i` of `cfg.seed`.
pub fn build_network(cfg: &ModelConfig) -> Result<Network> {
    let shapes = cfg.layer_shapes()?;
    let mut params = Vec::with_capacity(2 * shapes.len());
    for (i, &shape) in shapes.iter().enumerate() {
        let layer = ConvLayerSpec::init(shape, cfg.seed, i as u64);
        params.push(layer.weights);
        params.push(layer.bias);
    }
    Ok(Network {
        config: cfg.clone(),
        shapes,
        params,
    })
}

impl Network {
    /// Wraps explicit parameters, checking them against the config.
    pub fn from_params(cfg: &ModelConfig, params: Vec<Tensor4>) -> Result<Self> {
        let shapes = cfg.layer_shapes()?;
        if params.len() != 2 * shapes.len() {
            return Err(invalid_arg!(
                "expected {} parameter tensors, got {}",
                2 * shapes.len(),
                params.len()
            ));
        }
        for (i, s) in shapes.iter().enumerate() {
            if params[2 * i].dims() != s.weight_dims() || params[2 * i + 1].dims() != s.bias_dims() {
                return Err(invalid_arg!("parameters of layer {i} do not match {s:?}"));
            }
        }
        Ok(Self {
            config: cfg.clone(),
            shapes,
            params,
        })
    }

    /// Weights that make the whole network the identity on non-negative
    /// inputs: every stage-1 and stage-3 layer passes the first channels
    /// through its center tap, every stage-2 layer is zero, so the junction
    /// returns the stage-1 features unchanged.
    pub fn identity(cfg: &ModelConfig) -> Result<Self> {
        if cfg.in_channels != cfg.out_channels || cfg.in_channels > cfg.filters {
            return Err(invalid_arg!("identity network needs in = out channels <= filters"));
        }
        let shapes = cfg.layer_shapes()?;
        let stage2 = cfg.stage1_convs..cfg.num_convs() + cfg.stage2_deconvs;
        let mut params = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            let mut layer = ConvLayerSpec::zeros(*s);
            if !stage2.contains(&i) {
                let kk = s.kernel * s.kernel;
                let center = kk / 2;
                let [_, d1, _, _] = s.weight_dims();
                for ch in 0..cfg.in_channels {
                    layer.weights.data_mut()[(ch * d1 + ch) * kk + center] = 1.0;
                }
            }
            params.push(layer.weights);
            params.push(layer.bias);
        }
        Self::from_params(cfg, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[ConvShape] {
        &self.shapes
    }

    pub fn params(&self) -> &[Tensor4] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor4] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor4::len).sum()
    }

    /// Adds the parameters to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, dims: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = dims;
        let k = self.config.max_kernel();
        if c != self.config.in_channels {
            return Err(invalid_arg!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            ));
        }
        if h < k || w < k {
            return Err(invalid_arg!(
                "input {h}x{w} is smaller than the largest kernel ({k}x{k})"
            ));
        }
        Ok(())
    }

    fn layer(&self, g: &mut Graph, params: &[Var], i: usize, x: Var) -> Result<Var> {
        g.conv(x, params[2 * i], params[2 * i + 1], self.shapes[i])
    }

    /// Stage 1; returns the output of every convolution in it.
    pub(crate) fn stage1(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.config.stage1_convs);
        let mut h = x;
        for i in 0..self.config.stage1_convs {
            let pre = self.layer(g, params, i, h)?;
            h = g.relu(pre);
            outs.push(h);
        }
        Ok(outs)
    }

    /// Stage 2 from the last stage-1 feature map; returns the last deconvolution output.
    pub(crate) fn stage2(&self, g: &mut Graph, params: &[Var], features: Var) -> Result<Var> {
        let cfg = &self.config;
        let mut conv_outs = Vec::with_capacity(cfg.stage2_convs);
        let mut h = features;
        for i in cfg.stage1_convs..cfg.num_convs() {
            let pre = self.layer(g, params, i, h)?;
            h = g.relu(pre);
            conv_outs.push(h);
        }
        for d in 1..=cfg.stage2_deconvs {
            let mut pre = self.layer(g, params, cfg.num_convs() + d - 1, h)?;
            for &(c, _) in cfg.skip_pairs.iter().filter(|&&(_, to)| to == d) {
                pre = g.add(pre, conv_outs[c - cfg.stage1_convs - 1])?;
            }
            h = g.relu(pre);
        }
        Ok(h)
    }

    /// Stage 3 from the junction output; returns the raw network output.
    pub(crate) fn stage3(&self, g: &mut Graph, params: &[Var], junction: Var) -> Result<Var> {
        let cfg = &self.config;
        let first = cfg.num_convs() + cfg.stage2_deconvs;
        let last = self.shapes.len() - 1;
        let mut h = junction;
        for i in first..=last {
            let pre = self.layer(g, params, i, h)?;
            h = if i == last { pre } else { g.relu(pre) };
        }
        Ok(h)
    }

    /// Records the forward pass on `g` using parameter handles from [`bind`](Self::bind).
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<(Var, TapVars)> {
        if params.len() != self.params.len() {
            return Err(invalid_arg!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            ));
        }
        self.check_input(g.value(x).dims())?;
        let features = *self.stage1(g, params, x)?.last().expect("stage 1 is non-empty");
        let recovered = self.stage2(g, params, features)?;
        let diff = g.sub(features, recovered)?;
        let junction = g.relu(diff);
        let out = self.stage3(g, params, junction)?;
        Ok((
            out,
            TapVars {
                conv6_out: features,
                deconv6_out: recovered,
                junction_out: junction,
            },
        ))
    }

    /// Raw (unclamped) output for an `N × 3 × H × W` input, optionally with taps.
    pub fn forward(&self, input: &Tensor4, capture_taps: bool) -> Result<(Tensor4, Option<NetworkTaps>)> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let (out, taps) = self.forward_graph(&mut g, &params, x)?;
        let taps = capture_taps.then(|| NetworkTaps {
            conv6_out: g.value(taps.conv6_out).clone(),
            deconv6_out: g.value(taps.deconv6_out).clone(),
            junction_out: g.value(taps.junction_out).clone(),
        });
        Ok((g.take_value(out), taps))
    }
}

/// `1 × 3 × H × W` tensor holding the image's planes.
pub fn image_to_tensor(img: &EncodedImage) -> Tensor4 {
    let (h, w) = img.dims();
    Tensor4::from_parts([1, CHANNELS, h, w], img.data().to_vec())
}

/// Batch item `n` of a 3-channel tensor, clamped to `[0, 1]`.
pub fn tensor_to_image(t: &Tensor4, n: usize) -> Result<EncodedImage> {
    if t.channels() != CHANNELS || n >= t.batch() {
        return Err(invalid_arg!(
            "cannot take image {n} from a tensor with dims {:?}",
            t.dims()
        ));
    }
    EncodedImage::from_planar_clamped(t.height(), t.width(), t.item_at(n).into_data())
}

impl Network {
    /// Clamped network output for a single image.
    pub fn infer(&self, img: &EncodedImage) -> Result<EncodedImage> {
        let (out, _) = self.forward(&image_to_tensor(img), false)?;
        tensor_to_image(&out, 0)
    }
}
