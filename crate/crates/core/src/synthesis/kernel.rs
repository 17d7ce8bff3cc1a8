use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::imgcore::{Image, LinearImage, CHANNELS};

/// A small odd-sized 2-D kernel. Tap `(r, c)` sits at offset
/// `(r − height/2, c − width/2)` from the kernel center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel2D {
    height: usize,
    width: usize,
    taps: Vec<f64>,
}

impl Kernel2D {
    pub fn new(height: usize, width: usize, taps: Vec<f64>) -> Result<Self> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(invalid_arg!("kernel dimensions must be odd, got {height}x{width}"));
        }
        if taps.len() != height * width {
            return Err(invalid_arg!(
                "kernel {height}x{width} needs {} taps, got {}",
                height * width,
                taps.len()
            ));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(invalid_arg!("kernel taps must be finite"));
        }
        Ok(Self { height, width, taps })
    }

    pub fn identity() -> Self {
        Self {
            height: 1,
            width: 1,
            taps: vec![1.0],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at offset `(dy, dx)` from the center, zero outside the support.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = dy + (self.height / 2) as isize;
        let c = dx + (self.width / 2) as isize;
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            return 0.0;
        }
        self.taps[r as usize * self.width + c as usize]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Full 2-D convolution of two kernels; the result applied once equals
    /// applying `self` then `other` away from image borders.
    pub fn compose(&self, other: &Kernel2D) -> Kernel2D {
        let h = self.height + other.height - 1;
        let w = self.width + other.width - 1;
        let mut taps = vec![0.0; h * w];
        for r1 in 0..self.height {
            for c1 in 0..self.width {
                let a = self.taps[r1 * self.width + c1];
                if a == 0.0 {
                    continue;
                }
                for r2 in 0..other.height {
                    for c2 in 0..other.width {
                        taps[(r1 + r2) * w + c1 + c2] += a * other.taps[r2 * other.width + c2];
                    }
                }
            }
        }
        Kernel2D {
            height: h,
            width: w,
            taps,
        }
    }
}

/// Normalized isotropic Gaussian truncated at radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel2D> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid_arg!("Gaussian sigma must be positive, got {sigma}"));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let size = 2 * radius + 1;
    let denom = 2.0 * sigma * sigma;
    let mut taps = Vec::with_capacity(size * size);
    for r in 0..size {
        let dy = r as f64 - radius as f64;
        for c in 0..size {
            let dx = c as f64 - radius as f64;
            taps.push((-(dy * dy + dx * dx) / denom).exp());
        }
    }
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    Kernel2D::new(size, size, taps)
}

/// Amplitudes of the two reflections off the front and back glass surfaces
/// for transmittance `alpha`: `(1 − √α, √α − α)`.
pub fn pulse_amplitudes(alpha: f64) -> (f64, f64) {
    let root = alpha.sqrt();
    (1.0 - root, root - alpha)
}

/// Two-pulse ghosting kernel: `1 − √α` at the center and `√α − α` at `offset`.
pub fn double_reflection_kernel(alpha: f64, offset: (isize, isize)) -> Result<Kernel2D> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid_arg!("transmittance must lie in (0, 1), got {alpha}"));
    }
    let (dy, dx) = offset;
    if dy == 0 && dx == 0 {
        return Err(invalid_arg!("double-reflection offset must be nonzero"));
    }
    let radius = dy.unsigned_abs().max(dx.unsigned_abs());
    let size = 2 * radius + 1;
    let (first, second) = pulse_amplitudes(alpha);
    let mut taps = vec![0.0; size * size];
    taps[radius * size + radius] = first;
    let r = (radius as isize + dy) as usize;
    let c = (radius as isize + dx) as usize;
    taps[r * size + c] = second;
    Kernel2D::new(size, size, taps)
}

/// Same-size 2-D convolution with edge replication:
/// `out(y, x) = Σ k(u, v) · img(clamp(y − u), clamp(x − v))` over kernel offsets `(u, v)`.
///
/// A single off-center tap at `(dy, dx)` therefore shifts content by `+(dy, dx)`.
/// The result is clamped into `[0, 1]`; for non-negative kernels whose taps sum
/// to at most one (every kernel the synthesis pipeline builds) the clamp never binds.
pub fn convolve2d(img: &LinearImage, k: &Kernel2D) -> Result<LinearImage> {
    let (h, w) = img.dims();
    if k.height > h || k.width > w {
        return Err(invalid_arg!(
            "kernel {}x{} is larger than the {h}x{w} image",
            k.height,
            k.width
        ));
    }
    let (ry, rx) = ((k.height / 2) as isize, (k.width / 2) as isize);
    // Column lookup per horizontal offset, with replication at the borders.
    let col_index: Vec<Vec<usize>> = (-rx..=rx)
        .map(|v| {
            (0..w as isize)
                .map(|x| (x - v).clamp(0, w as isize - 1) as usize)
                .collect()
        })
        .collect();
    let mut out = vec![0.0; CHANNELS * h * w];
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        let dst_plane = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h as isize {
            let dst = &mut dst_plane[y as usize * w..(y as usize + 1) * w];
            for u in -ry..=ry {
                let sy = (y - u).clamp(0, h as isize - 1) as usize;
                let src = &plane[sy * w..(sy + 1) * w];
                for (vi, cols) in col_index.iter().enumerate() {
                    let tap = k.taps[(u + ry) as usize * k.width + vi];
                    if tap == 0.0 {
                        continue;
                    }
                    for (d, &sx) in dst.iter_mut().zip(cols) {
                        *d += tap * src[sx];
                    }
                }
            }
        }
    }
    Image::from_planar_clamped(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LinearImage {
        let data = (0..CHANNELS * h * w).map(|_| rng.random::<f64>()).collect();
        LinearImage::from_planar(h, w, data).unwrap()
    }

    /// Four nested loops straight from the definition.
    fn reference_convolve(img: &LinearImage, k: &Kernel2D) -> Vec<f64> {
        let (h, w) = img.dims();
        let (ry, rx) = ((k.height() / 2) as isize, (k.width() / 2) as isize);
        let mut out = Vec::new();
        for c in 0..CHANNELS {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0;
                    for u in -ry..=ry {
                        for v in -rx..=rx {
                            let sy = (y - u).clamp(0, h as isize - 1) as usize;
                            let sx = (x - v).clamp(0, w as isize - 1) as usize;
                            acc += k.at(u, v) * img.get(c, sy, sx);
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn gaussian_shape_and_normalization() {
        for sigma in [0.3, 1.0, 1.7, 2.5, 5.0] {
            let k = gaussian_kernel(sigma).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-9);
            assert!(k.taps().iter().all(|&t| t >= 0.0));
            assert_eq!(k.height(), 2 * (3.0 * sigma).ceil() as usize + 1);
        }
        assert_eq!(gaussian_kernel(1.0).unwrap().height(), 7);
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn gaussian_center_tap_matches_direct_summation() {
        // Normalizer accumulated separately in the order of increasing radius.
        let mut z = 0.0f64;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                z += (-f64::from(dy * dy + dx * dx) / 2.0).exp();
            }
        }
        // 1 / Z for the 7x7 truncated unit Gaussian.
        assert!((1.0 / z - 0.159_241_125_690_702_5).abs() < 1e-12);
        let k = gaussian_kernel(1.0).unwrap();
        assert!((k.at(0, 0) - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn double_pulse_amplitudes() {
        let k = double_reflection_kernel(0.81, (3, -4)).unwrap();
        assert_eq!(k.height(), 9);
        assert!((k.at(0, 0) - 0.1).abs() < 1e-15);
        assert!((k.at(3, -4) - 0.09).abs() < 1e-15);
        assert_eq!(k.taps().iter().filter(|&&t| t != 0.0).count(), 2);
        for alpha in [0.1, 0.5, 0.75, 0.999_999] {
            let k = double_reflection_kernel(alpha, (0, 2)).unwrap();
            assert!((k.sum() - (1.0 - alpha)).abs() < 1e-15);
        }
        let (a, b) = pulse_amplitudes(1.0);
        assert_eq!((a, b), (0.0, 0.0));
        assert!(double_reflection_kernel(1.0, (1, 1)).is_err());
        assert!(double_reflection_kernel(0.0, (1, 1)).is_err());
        assert!(double_reflection_kernel(0.5, (0, 0)).is_err());
    }

    #[test]
    fn convolve_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 6, 5);
        assert_eq!(convolve2d(&img, &Kernel2D::identity()).unwrap(), img);
        let flat = LinearImage::filled(9, 9, 0.37).unwrap();
        let out = convolve2d(&flat, &gaussian_kernel(1.2).unwrap()).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        assert!(convolve2d(&img, &gaussian_kernel(1.0).unwrap()).is_err());
    }

    #[test]
    fn convolve_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let img = random_image(&mut rng, 8, 8);
            // Non-negative taps summing below one keep the output in [0, 1].
            let taps: Vec<f64> = (0..9).map(|_| rng.random::<f64>() / 9.0).collect();
            let k = Kernel2D::new(3, 3, taps).unwrap();
            let got = convolve2d(&img, &k).unwrap();
            for (a, b) in got.data().iter().zip(reference_convolve(&img, &k)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pulse_shifts_content_by_offset() {
        let mut data = vec![0.0; CHANNELS * 9 * 9];
        data[4 * 9 + 4] = 1.0;
        let img = LinearImage::from_planar(9, 9, data).unwrap();
        let k = double_reflection_kernel(0.64, (2, -1)).unwrap();
        let out = convolve2d(&img, &k).unwrap();
        assert!((out.get(0, 4, 4) - 0.2).abs() < 1e-15);
        assert!((out.get(0, 6, 3) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn composed_kernel_is_sequential_application_on_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 24, 24);
        let g = gaussian_kernel(1.0).unwrap();
        let k = double_reflection_kernel(0.78, (2, 3)).unwrap();
        let once = convolve2d(&img, &g.compose(&k)).unwrap();
        let twice = convolve2d(&convolve2d(&img, &g).unwrap(), &k).unwrap();
        // Interior: farther than both radii combined from every border.
        let margin = g.height() / 2 + k.height() / 2;
        for c in 0..CHANNELS {
            for y in margin..24 - margin {
                for x in margin..24 - margin {
                    assert!((once.get(c, y, x) - twice.get(c, y, x)).abs() < 1e-6);
                }
            }
        }
    }
}
