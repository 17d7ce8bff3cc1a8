//! RGB images with real-valued pixels, gamma conversions, resampling and PSNR.
//!
//! Pixels are stored channel-planar (`[c][y][x]`) as `f64` in `[0, 1]`. The
//! color space is a type parameter so that linear-light and gamma-encoded
//! buffers cannot be mixed by accident: [`EncodedImage`] is what lives in PNG
//! files and what the network sees, [`LinearImage`] is what compositing
//! operates on.
//!
//! # Gamma convention
//!
//! A single *decoding exponent* `g` maps encoded values to linear light:
//! `linear = encoded^g`, and `encoded = linear^(1/g)`. The default `g = 2.2`
//! is the usual display gamma. Writing the relationship as
//! `X = (X')^(1/γ)` corresponds to `g = 1/γ`.
//!
//! # Bilinear resampling
//!
//! [`resize_bilinear`] uses corner-aligned sampling. For an output row `y` in
//! `0..H'` the source coordinate is `sy = y · (H − 1) / (H' − 1)` (and `sy = 0`
//! when `H' = 1`); columns likewise. With `y0 = floor(sy)`, `y1 = min(y0 + 1, H − 1)`,
//! `fy = sy − y0` and the same for `x`, the output is
//!
//! ```text
//! out = (1−fy)·((1−fx)·p(y0,x0) + fx·p(y0,x1)) + fy·((1−fx)·p(y1,x0) + fx·p(y1,x1))
//! ```
//!
//! The four corners of the output coincide with the four corners of the input.

use std::fmt;
use std::io::BufWriter;
use std::marker::PhantomData;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_input, Error, Result};

pub const CHANNELS: usize = 3;

/// Marker for gamma-encoded (display-referred) pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoded {}

/// Marker for linear-light pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linear {}

pub trait ColorSpace: fmt::Debug + Clone + Copy + PartialEq + 'static {}
impl ColorSpace for Encoded {}
impl ColorSpace for Linear {}

/// An `H × W × 3` image, channel-planar, every value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<S: ColorSpace> {
    height: usize,
    width: usize,
    data: Vec<f64>,
    space: PhantomData<S>,
}

pub type EncodedImage = Image<Encoded>;
pub type LinearImage = Image<Linear>;

impl<S: ColorSpace> Image<S> {
    /// Wraps planar data, rejecting non-finite or out-of-range values.
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_arg!("image dimensions must be positive, got {height}x{width}"));
        }
        if data.len() != CHANNELS * height * width {
            return Err(invalid_arg!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                CHANNELS * height * width,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid_input!("pixel value {v} is not a finite value in [0, 1]"));
        }
        Ok(Self::from_raw(height, width, data))
    }

    /// Wraps planar data after clamping every value into `[0, 1]`.
    /// NaN is rejected since it has no meaningful clamp.
    pub fn from_planar_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(invalid_input!("NaN pixel value"));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_planar(height, width, data)
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), CHANNELS * height * width);
        Self {
            height,
            width,
            data,
            space: PhantomData,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_planar(height, width, vec![value; CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// All values, channel-planar.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data.iter().map(|&v| f(v)).collect()
    }

    /// Reinterprets the buffer in another color space without touching values.
    #[cfg(test)]
    pub(crate) fn retag<T: ColorSpace>(self) -> Image<T> {
        Image::from_raw(self.height, self.width, self.data)
    }
}

/// The decoding exponent `g` in `linear = encoded^g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GammaParam(f64);

impl GammaParam {
    pub const DEFAULT: GammaParam = GammaParam(2.2);

    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(invalid_arg!("gamma must be a positive finite number, got {gamma}"));
        }
        Ok(Self(gamma))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for GammaParam {
    fn default() -> Self {
        Self::DEFAULT
    }
}

fn check_gamma(g: GammaParam) -> Result<f64> {
    // GammaParam can be deserialized without going through `new`.
    GammaParam::new(g.0).map(GammaParam::value)
}

pub fn decode_gamma(img: &EncodedImage, g: GammaParam) -> Result<LinearImage> {
    let exp = check_gamma(g)?;
    let data = img.map_values(|v| v.powf(exp));
    Image::from_planar(img.height, img.width, data)
}

pub fn encode_gamma(img: &LinearImage, g: GammaParam) -> Result<EncodedImage> {
    let exp = 1.0 / check_gamma(g)?;
    let data = img.map_values(|v| v.powf(exp));
    Image::from_planar(img.height, img.width, data)
}

/// Corner-aligned bilinear resize; see the module docs for the exact formula.
pub fn resize_bilinear<S: ColorSpace>(img: &Image<S>, new_height: usize, new_width: usize) -> Result<Image<S>> {
    if new_height == 0 || new_width == 0 {
        return Err(invalid_arg!(
            "resize target must be at least 1x1, got {new_height}x{new_width}"
        ));
    }
    if (new_height, new_width) == img.dims() {
        return Ok(img.clone());
    }
    let rows = sample_positions(img.height, new_height);
    let cols = sample_positions(img.width, new_width);
    let mut out = Vec::with_capacity(CHANNELS * new_height * new_width);
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        for &(y0, y1, fy) in &rows {
            let r0 = &plane[y0 * img.width..(y0 + 1) * img.width];
            let r1 = &plane[y1 * img.width..(y1 + 1) * img.width];
            for &(x0, x1, fx) in &cols {
                let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
                let bottom = (1.0 - fx) * r1[x0] + fx * r1[x1];
                out.push((1.0 - fy) * top + fy * bottom);
            }
        }
    }
    // Convex combinations of [0, 1] values stay in range up to rounding.
    Image::from_planar_clamped(new_height, new_width, out)
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let s = if dst == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Copies the `height × width` window whose top-left corner is `(top, left)`.
pub fn crop<S: ColorSpace>(img: &Image<S>, top: usize, left: usize, height: usize, width: usize) -> Result<Image<S>> {
    if height == 0 || width == 0 || top + height > img.height || left + width > img.width {
        return Err(invalid_arg!(
            "crop {height}x{width} at ({top}, {left}) does not fit inside a {}x{} image",
            img.height,
            img.width
        ));
    }
    let mut out = Vec::with_capacity(CHANNELS * height * width);
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        for y in top..top + height {
            let row = y * img.width;
            out.extend_from_slice(&plane[row + left..row + left + width]);
        }
    }
    Ok(Image::from_raw(height, width, out))
}

/// Top-left corner used by [`crop_random`].
///
/// A `ChaCha8Rng` seeded with `seed` draws the row offset uniformly from
/// `0..=H−crop_h`, then the column offset from `0..=W−crop_w`.
pub fn random_crop_origin(dims: (usize, usize), crop_h: usize, crop_w: usize, seed: u64) -> Result<(usize, usize)> {
    let (h, w) = dims;
    if crop_h == 0 || crop_w == 0 || crop_h > h || crop_w > w {
        return Err(invalid_arg!(
            "crop {crop_h}x{crop_w} does not fit inside a {h}x{w} image"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - crop_h);
    let left = rng.random_range(0..=w - crop_w);
    Ok((top, left))
}

pub fn crop_random<S: ColorSpace>(img: &Image<S>, crop_h: usize, crop_w: usize, seed: u64) -> Result<Image<S>> {
    let (top, left) = random_crop_origin(img.dims(), crop_h, crop_w, seed)?;
    crop(img, top, left, crop_h, crop_w)
}

/// Peak signal-to-noise ratio in decibels over all pixels and channels.
///
/// Identical inputs yield `f64::INFINITY`.
pub fn psnr<S: ColorSpace>(a: &Image<S>, b: &Image<S>, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(invalid_arg!(
            "PSNR needs equal shapes, got {}x{} and {}x{}",
            a.height,
            a.width,
            b.height,
            b.width
        ));
    }
    psnr_values(&a.data, &b.data, peak)
}

/// PSNR over two equally long value slices.
pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid_arg!("PSNR needs two non-empty slices of equal length"));
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(invalid_arg!("PSNR peak must be positive, got {peak}"));
    }
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Reads an 8-bit PNG (any color type) as RGB, mapping each byte `v` to `v / 255`.
pub fn read_png(path: &Path) -> Result<EncodedImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; CHANNELS * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..CHANNELS {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Image::from_raw(h, w, data))
}

/// Quantizes a `[0, 1]` value to 8 bits, rounding half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes an 8-bit RGB PNG atomically (temporary file in the same directory, then rename).
pub fn write_png<S: ColorSpace>(img: &Image<S>, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let mut bytes = Vec::with_capacity(CHANNELS * h * w);
    for i in 0..h * w {
        for c in 0..CHANNELS {
            bytes.push(quantize(img.data[c * h * w + i]));
        }
    }
    crate::fsutil::write_atomic(path, |file| {
        let encoder = image::codecs::png::PngEncoder::new(BufWriter::new(file));
        image::ImageEncoder::write_image(encoder, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(std::io::Error::other)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> EncodedImage {
        let n = CHANNELS * h * w;
        let data = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Image::from_planar(h, w, data).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_non_finite() {
        assert!(EncodedImage::from_planar(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(EncodedImage::from_planar(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(EncodedImage::from_planar(1, 1, vec![0.0, 0.0]).is_err());
        assert!(EncodedImage::from_planar_clamped(1, 1, vec![-0.5, 1.5, f64::INFINITY]).is_ok());
    }

    #[test]
    fn gamma_known_values() {
        let img = EncodedImage::from_planar(1, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let lin = decode_gamma(&img, GammaParam::DEFAULT).unwrap();
        // 0.5^2.2 = exp(2.2 ln 0.5), evaluated independently to 1e-12.
        assert!((lin.data()[1] - 0.217_637_640_824_031_3).abs() < 1e-12);
        assert_eq!(lin.data()[0], 0.0);
        assert_eq!(lin.data()[2], 1.0);

        let back = EncodedImage::from_planar(1, 1, vec![0.21764, 0.21764, 0.21764]).unwrap();
        let enc = encode_gamma(&back.retag(), GammaParam::DEFAULT).unwrap();
        assert!((enc.data()[0] - 0.5).abs() < 1e-4);

        let one = GammaParam::new(1.0).unwrap();
        let img = ramp(3, 4);
        assert_eq!(decode_gamma(&img, one).unwrap().data(), img.data());
        assert_eq!(encode_gamma(&img.clone().retag(), one).unwrap().data(), img.data());
    }

    #[test]
    fn gamma_rejects_bad_exponent() {
        assert!(GammaParam::new(0.0).is_err());
        assert!(GammaParam::new(-1.0).is_err());
        assert!(GammaParam::new(f64::NAN).is_err());
        let bad: GammaParam = serde_json::from_str("-2.0").unwrap();
        assert!(decode_gamma(&ramp(1, 1), bad).is_err());
    }

    #[test]
    fn resize_matches_hand_evaluation() {
        // Each channel is [[0, 1], [0, 1]].
        let plane = [0.0, 1.0, 0.0, 1.0];
        let data: Vec<f64> = plane.iter().cycle().take(12).copied().collect();
        let img = EncodedImage::from_planar(2, 2, data).unwrap();
        let out = resize_bilinear(&img, 2, 3).unwrap();
        for c in 0..CHANNELS {
            for y in 0..2 {
                assert_eq!(out.get(c, y, 0), 0.0);
                assert_eq!(out.get(c, y, 1), 0.5);
                assert_eq!(out.get(c, y, 2), 1.0);
            }
        }
    }

    #[test]
    fn resize_identity_and_errors() {
        let img = ramp(5, 7);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
        assert!(resize_bilinear(&img, 0, 3).is_err());
        assert!(resize_bilinear(&img, 3, 0).is_err());
        let one = resize_bilinear(&img, 1, 1).unwrap();
        assert_eq!(one.get(0, 0, 0), img.get(0, 0, 0));
    }

    #[test]
    fn crop_full_size_and_bounds() {
        let img = ramp(6, 5);
        assert_eq!(crop_random(&img, 6, 5, 42).unwrap(), img);
        assert!(crop_random(&img, 7, 5, 0).is_err());
        assert!(crop_random(&img, 6, 6, 0).is_err());
        let c = crop(&img, 2, 1, 3, 2).unwrap();
        assert_eq!(c.get(1, 0, 0), img.get(1, 2, 1));
        assert_eq!(c.get(2, 2, 1), img.get(2, 4, 2));
    }

    #[test]
    fn crop_offsets_follow_seeded_stream() {
        let img = EncodedImage::filled(1000, 1000, 0.5).unwrap();
        for seed in [1u64, 2, 99] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let top: usize = rng.random_range(0..=872);
            let left: usize = rng.random_range(0..=872);
            assert_eq!(random_crop_origin(img.dims(), 128, 128, seed).unwrap(), (top, left));
        }
        let a = random_crop_origin(img.dims(), 128, 128, 1).unwrap();
        let b = random_crop_origin(img.dims(), 128, 128, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(
            crop_random(&ramp(40, 30), 8, 8, 5).unwrap(),
            crop_random(&ramp(40, 30), 8, 8, 5).unwrap()
        );
    }

    #[test]
    fn psnr_known_values() {
        let a = EncodedImage::filled(4, 4, 0.2).unwrap();
        let b = EncodedImage::filled(4, 4, 0.3).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let gain = psnr(&a, &b, 2.0).unwrap() - psnr(&a, &b, 1.0).unwrap();
        assert!((gain - 6.020_599_913_279_624).abs() < 1e-9);
        assert!(psnr(&a, &EncodedImage::filled(4, 5, 0.2).unwrap(), 1.0).is_err());
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
        assert_eq!(quantize(2.0), 255);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data = (0..CHANNELS * 3 * 5).map(|i| ((i * 17) % 256) as f64 / 255.0).collect();
        let img = EncodedImage::from_planar(3, 5, data).unwrap();
        write_png(&img, &path).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn image_strategy() -> impl Strategy<Value = EncodedImage> {
            (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
                proptest::collection::vec(0.0f64..=1.0, CHANNELS * h * w)
                    .prop_map(move |d| EncodedImage::from_planar(h, w, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn gamma_round_trip(img in image_strategy(), g in 0.1f64..10.0) {
                let g = GammaParam::new(g).unwrap();
                let back = encode_gamma(&decode_gamma(&img, g).unwrap(), g).unwrap();
                for (a, b) in img.data().iter().zip(back.data()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }

            #[test]
            fn decode_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, g in 0.1f64..10.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let img = EncodedImage::from_planar(1, 1, vec![lo, hi, hi]).unwrap();
                let lin = decode_gamma(&img, GammaParam::new(g).unwrap()).unwrap();
                prop_assert!(lin.data()[0] <= lin.data()[1]);
            }

            #[test]
            fn resize_preserves_constants(v in 0.0f64..=1.0, h in 1usize..9, w in 1usize..9, nh in 1usize..12, nw in 1usize..12) {
                let img = EncodedImage::filled(h, w, v).unwrap();
                let out = resize_bilinear(&img, nh, nw).unwrap();
                prop_assert_eq!(out.dims(), (nh, nw));
                for &x in out.data() {
                    prop_assert!((x - v).abs() < 1e-12);
                }
            }

            #[test]
            fn psnr_symmetric_and_shift_detecting(img in image_strategy(), c in 0.01f64..0.5) {
                let shifted: Vec<f64> = img.data().iter().map(|v| v + c).collect();
                let d = psnr_values(img.data(), &shifted, 1.0).unwrap();
                prop_assert!((d + 20.0 * c.log10()).abs() < 1e-6);
                let other = EncodedImage::from_planar_clamped(img.height(), img.width(), shifted).unwrap();
                prop_assert_eq!(psnr(&img, &other, 1.0).unwrap(), psnr(&other, &img, 1.0).unwrap());
            }
        }
    }
}
