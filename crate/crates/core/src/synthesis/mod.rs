//! Reflection-tainted training pairs.
//!
//! A mixture is formed in linear light as
//!
//! ```text
//! I = clamp(α·T + β·(R ∗ G ∗ K) + n, 0, 1)
//! ```
//!
//! where `G` is a defocus Gaussian, `K` is either the identity (single
//! reflection, `β = 1 − α`) or a two-pulse ghosting kernel with amplitudes
//! `1 − √α` and `√α − α` (double reflection, `β = 1`), and `n` is optional
//! zero-mean Gaussian sensor noise. The stored pair is the gamma-encoded
//! mixture and the gamma-encoded attenuated transmission `α·T`.
//!
//! All per-sample randomness comes from a `ChaCha8Rng` seeded with the config
//! seed and switched to stream `index`, so a sample is a pure function of its
//! sources, the config and its index.

mod dataset;
mod kernel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_input, Error, Result};
use crate::imgcore::{
    crop_random, decode_gamma, encode_gamma, random_crop_origin, resize_bilinear, EncodedImage, GammaParam, Image,
    LinearImage,
};

pub use dataset::{generate_dataset, list_pngs, Dataset, Manifest, ManifestSample, MANIFEST_VERSION};
pub use kernel::{convolve2d, double_reflection_kernel, gaussian_kernel, pulse_amplitudes, Kernel2D};

/// How the reflection weight `β` and the ghosting kernel `K` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// `β = 1 − α`, `K` = identity.
    Complement,
    /// `β = 1`, `K` carries the two surface reflections.
    DoubleReflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Transmittance α, drawn uniformly from this closed interval.
    pub alpha_range: [f64; 2],
    /// Defocus Gaussian standard deviation σ, drawn uniformly from this closed interval.
    pub sigma_range: [f64; 2],
    pub beta_mode: BetaMode,
    /// Ghost displacement magnitude per axis in pixels; each axis also gets a random sign.
    pub offset_range: [usize; 2],
    pub noise_std: f64,
    /// Side of the square training patch.
    pub patch_size: usize,
    pub reflections_per_transmission: usize,
    pub gamma: GammaParam,
    /// Fraction of transmission images assigned to the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            alpha_range: [0.75, 0.8],
            sigma_range: [1.0, 5.0],
            beta_mode: BetaMode::Complement,
            offset_range: [3, 10],
            noise_std: 0.0,
            patch_size: 128,
            reflections_per_transmission: 18,
            gamma: GammaParam::DEFAULT,
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.alpha_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!(
                "alpha_range must satisfy 0 < lo <= hi <= 1, got {:?}",
                self.alpha_range
            )));
        }
        let [s0, s1] = self.sigma_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_range must satisfy 0 < lo <= hi, got {:?}",
                self.sigma_range
            )));
        }
        let [o0, o1] = self.offset_range;
        if o0 == 0 || o0 > o1 {
            return Err(Error::Config(format!(
                "offset_range must satisfy 1 <= lo <= hi, got {:?}",
                self.offset_range
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        if self.patch_size == 0 || self.reflections_per_transmission == 0 {
            return Err(Error::Config(
                "patch_size and reflections_per_transmission must be positive".into(),
            ));
        }
        let blur_side = 2 * (3.0 * s1).ceil() as usize + 1;
        let ghost_side = 2 * o1 + 1;
        if self.patch_size < blur_side.max(ghost_side) {
            return Err(Error::Config(format!(
                "patch_size {} cannot hold the {blur_side}x{blur_side} blur or {ghost_side}x{ghost_side} ghost kernel",
                self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!(
                "train_fraction must lie in [0, 1], got {}",
                self.train_fraction
            )));
        }
        GammaParam::new(self.gamma.value()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Explicit parameters of one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixParams {
    pub alpha: f64,
    pub beta: f64,
    /// Defocus kernel `G`; `None` is the identity.
    pub blur: Option<Kernel2D>,
    /// Ghosting kernel `K`; `None` is the identity.
    pub ghost: Option<Kernel2D>,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl MixParams {
    pub fn plain(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            blur: None,
            ghost: None,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }
}

/// `clamp(α·T + β·(R ∗ G ∗ K) + n, 0, 1)` in linear light. `G` is applied
/// before `K`, each with edge replication.
pub fn composite(t: &LinearImage, r: &LinearImage, p: &MixParams) -> Result<LinearImage> {
    if t.dims() != r.dims() {
        return Err(invalid_arg!(
            "transmission {:?} and reflection {:?} differ in shape",
            t.dims(),
            r.dims()
        ));
    }
    if !(p.alpha.is_finite() && p.beta.is_finite() && p.noise_std >= 0.0) {
        return Err(invalid_arg!("mixing weights must be finite and noise_std >= 0"));
    }
    let mut out: Vec<f64> = t.data().iter().map(|&v| p.alpha * v).collect();
    if p.beta != 0.0 {
        let mut refl = r.clone();
        if let Some(g) = &p.blur {
            refl = convolve2d(&refl, g)?;
        }
        if let Some(k) = &p.ghost {
            refl = convolve2d(&refl, k)?;
        }
        for (o, &v) in out.iter_mut().zip(refl.data()) {
            *o += p.beta * v;
        }
    }
    if p.noise_std > 0.0 {
        let normal = Normal::new(0.0, p.noise_std).map_err(|e| invalid_arg!("{e}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
        for o in &mut out {
            *o += normal.sample(&mut rng);
        }
    }
    let (h, w) = t.dims();
    Image::from_planar_clamped(h, w, out)
}

/// Square reflection crop, recorded so a sample can be regenerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Everything drawn while synthesizing one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub index: u64,
    pub seed: u64,
    pub mode: BetaMode,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    /// Ghost displacement `(dy, dx)`; present in double-reflection mode only.
    pub offsets: Option<[isize; 2]>,
    pub crop: CropRect,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub mixture: EncodedImage,
    pub target: EncodedImage,
    pub provenance: Provenance,
}

/// Random quantities of one sample, in the order they are drawn from stream `index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleDraw {
    pub alpha: f64,
    pub sigma: f64,
    pub offsets: [isize; 2],
    /// Unit-interval draw that picks the reflection crop side.
    pub crop_fraction: f64,
    pub crop_seed: u64,
    pub noise_seed: u64,
}

pub fn draw_sample(cfg: &SynthConfig, index: u64) -> SampleDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let alpha = rng.random_range(cfg.alpha_range[0]..=cfg.alpha_range[1]);
    let sigma = rng.random_range(cfg.sigma_range[0]..=cfg.sigma_range[1]);
    let mut offsets = [0isize; 2];
    for o in &mut offsets {
        let magnitude = rng.random_range(cfg.offset_range[0]..=cfg.offset_range[1]) as isize;
        *o = if rng.random::<bool>() { magnitude } else { -magnitude };
    }
    SampleDraw {
        alpha,
        sigma,
        offsets,
        crop_fraction: rng.random(),
        crop_seed: rng.random(),
        noise_seed: rng.random(),
    }
}

/// Side of the square reflection crop: between half the shorter source side
/// (but never below the patch) and the full shorter side.
fn crop_side(dims: (usize, usize), patch: usize, fraction: f64) -> usize {
    let full = dims.0.min(dims.1);
    let lo = patch.max(full.div_ceil(2)).min(full);
    let span = (full - lo + 1) as f64;
    lo + ((fraction * span) as usize).min(full - lo)
}

/// Synthesizes sample `index` from one transmission and one reflection source.
///
/// Both sources are decoded to linear light; the transmission is resized to the
/// patch, the reflection is randomly cropped and then resized to the patch so
/// reflected objects appear smaller. The mixture and `α·T` are gamma-encoded.
pub fn synthesize_pair(
    t_src: &EncodedImage,
    r_src: &EncodedImage,
    cfg: &SynthConfig,
    index: u64,
) -> Result<SamplePair> {
    cfg.validate()?;
    let patch = cfg.patch_size;
    for (name, img) in [("transmission", t_src), ("reflection", r_src)] {
        let (h, w) = img.dims();
        if h < patch || w < patch {
            return Err(invalid_input!(
                "{name} source {h}x{w} is smaller than the {patch}x{patch} patch"
            ));
        }
    }
    let draw = draw_sample(cfg, index);

    let t = resize_bilinear(&decode_gamma(t_src, cfg.gamma)?, patch, patch)?;
    let side = crop_side(r_src.dims(), patch, draw.crop_fraction);
    let (top, left) = random_crop_origin(r_src.dims(), side, side, draw.crop_seed)?;
    let r = crop_random(&decode_gamma(r_src, cfg.gamma)?, side, side, draw.crop_seed)?;
    let r = resize_bilinear(&r, patch, patch)?;

    let (beta, ghost, offsets) = match cfg.beta_mode {
        BetaMode::Complement => (1.0 - draw.alpha, None, None),
        // At α = 1 both pulses vanish and so does the reflection term.
        BetaMode::DoubleReflection if draw.alpha >= 1.0 => (0.0, None, Some(draw.offsets)),
        BetaMode::DoubleReflection => {
            let k = double_reflection_kernel(draw.alpha, (draw.offsets[0], draw.offsets[1]))?;
            (1.0, Some(k), Some(draw.offsets))
        }
    };
    let params = MixParams {
        alpha: draw.alpha,
        beta,
        blur: Some(gaussian_kernel(draw.sigma)?),
        ghost,
        noise_std: cfg.noise_std,
        noise_seed: draw.noise_seed,
    };
    let mixture = composite(&t, &r, &params)?;
    let target = composite(&t, &r, &MixParams::plain(draw.alpha, 0.0))?;

    Ok(SamplePair {
        mixture: encode_gamma(&mixture, cfg.gamma)?,
        target: encode_gamma(&target, cfg.gamma)?,
        provenance: Provenance {
            index,
            seed: cfg.seed,
            mode: cfg.beta_mode,
            alpha: draw.alpha,
            beta,
            sigma: draw.sigma,
            offsets,
            crop: CropRect { top, left, size: side },
            noise_seed: draw.noise_seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::CHANNELS;

    fn random_encoded(seed: u64, h: usize, w: usize) -> EncodedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..CHANNELS * h * w).map(|_| rng.random::<f64>()).collect();
        EncodedImage::from_planar(h, w, data).unwrap()
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            patch_size: 32,
            seed: 17,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        SynthConfig::default().validate().unwrap();
        let bad = [
            SynthConfig {
                alpha_range: [0.8, 0.7],
                ..SynthConfig::default()
            },
            SynthConfig {
                alpha_range: [0.0, 0.7],
                ..SynthConfig::default()
            },
            SynthConfig {
                sigma_range: [0.0, 1.0],
                ..SynthConfig::default()
            },
            SynthConfig {
                offset_range: [0, 3],
                ..SynthConfig::default()
            },
            SynthConfig {
                noise_std: -0.1,
                ..SynthConfig::default()
            },
            SynthConfig {
                reflections_per_transmission: 0,
                ..SynthConfig::default()
            },
            SynthConfig {
                train_fraction: 1.5,
                ..SynthConfig::default()
            },
            // sigma 5 needs a 31x31 blur kernel.
            SynthConfig {
                patch_size: 30,
                ..SynthConfig::default()
            },
            SynthConfig {
                patch_size: 32,
                offset_range: [3, 16],
                ..SynthConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        SynthConfig {
            patch_size: 31,
            ..SynthConfig::default()
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn composite_uniform_reference() {
        let t = LinearImage::filled(4, 4, 0.5).unwrap();
        let r = LinearImage::filled(4, 4, 0.2).unwrap();
        let out = composite(&t, &r, &MixParams::plain(0.8, 0.2)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.44).abs() < 1e-15));
    }

    #[test]
    fn composite_limits() {
        let t = random_encoded(1, 6, 6).retag::<crate::imgcore::Linear>();
        let r = random_encoded(2, 6, 6).retag::<crate::imgcore::Linear>();
        let only_t = composite(&t, &r, &MixParams::plain(0.7, 0.0)).unwrap();
        for (o, v) in only_t.data().iter().zip(t.data()) {
            assert_eq!(*o, 0.7 * v);
        }
        let sum = composite(&t, &r, &MixParams::plain(1.0, 1.0)).unwrap();
        for ((o, a), b) in sum.data().iter().zip(t.data()).zip(r.data()) {
            assert_eq!(*o, (a + b).min(1.0));
        }
        assert!(composite(
            &t,
            &LinearImage::filled(5, 6, 0.1).unwrap(),
            &MixParams::plain(1.0, 1.0)
        )
        .is_err());
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let t = LinearImage::filled(8, 8, 0.5).unwrap();
        let r = LinearImage::filled(8, 8, 0.5).unwrap();
        let mut p = MixParams::plain(0.8, 0.2);
        p.noise_std = 0.3;
        p.noise_seed = 9;
        let a = composite(&t, &r, &p).unwrap();
        assert_eq!(a, composite(&t, &r, &p).unwrap());
        assert!(a.data().iter().any(|&v| v != 0.5));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthesize_is_deterministic() {
        let t = random_encoded(3, 40, 36);
        let r = random_encoded(4, 64, 50);
        let cfg = small_cfg();
        let a = synthesize_pair(&t, &r, &cfg, 5).unwrap();
        assert_eq!(a, synthesize_pair(&t, &r, &cfg, 5).unwrap());
        assert_ne!(
            a.provenance.alpha,
            synthesize_pair(&t, &r, &cfg, 6).unwrap().provenance.alpha
        );
        assert_eq!(a.mixture.dims(), (32, 32));
        assert_eq!(a.target.dims(), (32, 32));
        assert!(a.provenance.crop.size >= 32 && a.provenance.crop.size <= 50);
    }

    #[test]
    fn unit_alpha_double_reflection_leaves_target() {
        let t = random_encoded(5, 32, 32);
        let r = random_encoded(6, 32, 32);
        let cfg = SynthConfig {
            alpha_range: [1.0, 1.0],
            beta_mode: BetaMode::DoubleReflection,
            ..small_cfg()
        };
        let pair = synthesize_pair(&t, &r, &cfg, 0).unwrap();
        assert_eq!(pair.mixture, pair.target);
    }

    #[test]
    fn double_reflection_records_offsets() {
        let cfg = SynthConfig {
            beta_mode: BetaMode::DoubleReflection,
            ..small_cfg()
        };
        let pair = synthesize_pair(&random_encoded(7, 32, 32), &random_encoded(8, 40, 40), &cfg, 3).unwrap();
        let [dy, dx] = pair.provenance.offsets.unwrap();
        for o in [dy, dx] {
            assert!((3..=10).contains(&o.unsigned_abs()));
        }
        assert_eq!(pair.provenance.beta, 1.0);
        assert_ne!(pair.mixture, pair.target);
    }

    #[test]
    fn undersized_sources_rejected() {
        let cfg = small_cfg();
        let big = random_encoded(9, 40, 40);
        let small = random_encoded(10, 31, 40);
        assert!(matches!(
            synthesize_pair(&small, &big, &cfg, 0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            synthesize_pair(&big, &small, &cfg, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn crop_side_bounds() {
        assert_eq!(crop_side((100, 80), 32, 0.0), 40);
        assert_eq!(crop_side((100, 80), 32, 0.999_999), 80);
        assert_eq!(crop_side((40, 40), 32, 0.0), 32);
        assert_eq!(crop_side((32, 32), 32, 0.5), 32);
    }

    #[test]
    fn draws_stay_in_configured_ranges() {
        let cfg = SynthConfig::default();
        for index in 0..10_000 {
            let d = draw_sample(&cfg, index);
            assert!((0.75..=0.8).contains(&d.alpha));
            assert!((1.0..=5.0).contains(&d.sigma));
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = [
            SynthConfig {
                alpha_range: [0.0, 0.5],
                ..Default::default()
            },
            SynthConfig {
                alpha_range: [0.8, 0.7],
                ..Default::default()
            },
            SynthConfig {
                sigma_range: [0.0, 1.0],
                ..Default::default()
            },
            SynthConfig {
                offset_range: [0, 3],
                ..Default::default()
            },
            SynthConfig {
                noise_std: -1.0,
                ..Default::default()
            },
            SynthConfig {
                train_fraction: 1.5,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn composite_monotone_in_alpha(seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0, beta in 0.0f64..0.5) {
                let t = random_encoded(seed, 5, 5).retag::<crate::imgcore::Linear>();
                let r = random_encoded(seed + 1, 5, 5).retag::<crate::imgcore::Linear>();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                // alpha ≤ 1 and beta ≤ 0.5 keep the pre-clamp values at most 1.5; compare
                // clamped outputs, which preserve the ordering.
                let x = composite(&t, &r, &MixParams::plain(lo, beta)).unwrap();
                let y = composite(&t, &r, &MixParams::plain(hi, beta)).unwrap();
                for (p, q) in x.data().iter().zip(y.data()) {
                    prop_assert!(p <= q);
                    prop_assert!((0.0..=1.0).contains(p));
                }
            }
        }
    }
}
