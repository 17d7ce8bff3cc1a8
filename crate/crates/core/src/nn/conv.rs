//! Stride-1, same-padding convolution and its transpose.
//!
//! Both use zero padding of `p = (k − 1) / 2` and cross-correlation indexing.
//! With input `x`, weights `W` and bias `b`:
//!
//! ```text
//! conv2d:  y[o](r, c) = b[o] + Σ_i Σ_{u,v} W[o, i, u, v] · x[i](r + u − p, c + v − p)
//! tconv2d: y[j](r, c) = b[j] + Σ_i Σ_{u,v} W[i, j, u, v] · x[i](r − u + p, c − v + p)
//! ```
//!
//! Convolution weights are laid out `out × in × k × k`; transposed-convolution
//! weights are laid out `in × out × k × k`. Under this layout a conv layer
//! mapping `A → B` channels and a transposed layer mapping `B → A` channels
//! share one weight tensor, and with zero bias they are exact adjoints:
//! `⟨conv2d(x, W), y⟩ = ⟨x, tconv2d(y, W)⟩`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor4;
use crate::error::{invalid_arg, Result};

/// Geometry of one layer; weights live elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub transposed: bool,
}

impl ConvShape {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, transposed: bool) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(invalid_arg!("channel counts must be positive"));
        }
        if kernel.is_multiple_of(2) {
            return Err(invalid_arg!("kernel size must be odd, got {kernel}"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            transposed,
        })
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        let k = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, k, k]
        } else {
            [self.out_channels, self.in_channels, k, k]
        }
    }

    pub fn bias_dims(&self) -> [usize; 4] {
        [1, self.out_channels, 1, 1]
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// Flat index of the weight connecting input channel `i` to output channel `o` at tap `t`.
    fn widx(&self, o: usize, i: usize, t: usize) -> usize {
        let kk = self.kernel * self.kernel;
        if self.transposed {
            (i * self.out_channels + o) * kk + t
        } else {
            (o * self.in_channels + i) * kk + t
        }
    }

    /// Spatial displacement read by tap `(u, v)`: output `(r, c)` reads input `(r + dy, c + dx)`.
    fn shift(&self, u: usize, v: usize) -> (isize, isize) {
        let p = self.pad();
        let (dy, dx) = (u as isize - p, v as isize - p);
        if self.transposed {
            (-dy, -dx)
        } else {
            (dy, dx)
        }
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(invalid_arg!(
                "layer expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            ));
        }
        Ok(())
    }

    fn check_params(&self, w: &Tensor4, b: &Tensor4) -> Result<()> {
        if w.dims() != self.weight_dims() || b.dims() != self.bias_dims() {
            return Err(invalid_arg!(
                "parameter dims {:?}/{:?} do not match layer {:?}",
                w.dims(),
                b.dims(),
                self
            ));
        }
        Ok(())
    }
}

/// A layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerSpec {
    pub shape: ConvShape,
    pub weights: Tensor4,
    pub bias: Tensor4,
}

impl ConvLayerSpec {
    pub fn zeros(shape: ConvShape) -> Self {
        Self {
            shape,
            weights: Tensor4::zeros(shape.weight_dims()),
            bias: Tensor4::zeros(shape.bias_dims()),
        }
    }

    /// Weights uniform in `±sqrt(6 / fan_in)` with `fan_in = in_channels · k²`,
    /// zero bias, drawn from `ChaCha8Rng` seeded with `seed` on stream `stream`.
    pub fn init(shape: ConvShape, seed: u64, stream: u64) -> Self {
        let fan_in = (shape.in_channels * shape.kernel * shape.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.weight_dims().iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Self {
            shape,
            weights: Tensor4::from_parts(shape.weight_dims(), data),
            bias: Tensor4::zeros(shape.bias_dims()),
        }
    }
}

/// `dst(r, c) += a · src(r + dy, c + dx)` wherever the source is inside the plane.
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, a: f64) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s0 = (x0 as isize + dx) as usize;
        let s = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += a * sv;
        }
    }
}

/// `Σ g(r, c) · src(r + dy, c + dx)` over positions where the source is inside the plane.
fn shifted_dot(g: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    let mut acc = 0.0;
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let s0 = (x0 as isize + dx) as usize;
        let gr = &g[y * w + x0..y * w + x1];
        let sr = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
        acc += gr.iter().zip(sr).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// Output positions `t` in `0..n` with `t + d` also in `0..n`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn forward(shape: &ConvShape, x: &Tensor4, w: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    shape.check_input(x)?;
    shape.check_params(w, b)?;
    let [n, _, h, wd] = x.dims();
    let hw = h * wd;
    let k = shape.kernel;
    let (wv, bv) = (w.data(), b.data());
    let mut out = vec![0.0; n * shape.out_channels * hw];
    for (plane_idx, dst) in out.chunks_exact_mut(hw).enumerate() {
        let (item, o) = (plane_idx / shape.out_channels, plane_idx % shape.out_channels);
        dst.fill(bv[o]);
        for i in 0..shape.in_channels {
            let src = x.plane(item, i);
            for u in 0..k {
                for v in 0..k {
                    let a = wv[shape.widx(o, i, u * k + v)];
                    if a != 0.0 {
                        let (dy, dx) = shape.shift(u, v);
                        shifted_axpy(dst, src, h, wd, dy, dx, a);
                    }
                }
            }
        }
    }
    Ok(Tensor4::from_parts([n, shape.out_channels, h, wd], out))
}

/// Gradient with respect to the layer input.
pub(crate) fn backward_input(shape: &ConvShape, grad_out: &Tensor4, w: &Tensor4, x_dims: [usize; 4]) -> Vec<f64> {
    let [n, _, h, wd] = x_dims;
    let hw = h * wd;
    let k = shape.kernel;
    let wv = w.data();
    let mut gx = vec![0.0; n * shape.in_channels * hw];
    for (plane_idx, dst) in gx.chunks_exact_mut(hw).enumerate() {
        let (item, i) = (plane_idx / shape.in_channels, plane_idx % shape.in_channels);
        for o in 0..shape.out_channels {
            let g = grad_out.plane(item, o);
            for u in 0..k {
                for v in 0..k {
                    let a = wv[shape.widx(o, i, u * k + v)];
                    if a != 0.0 {
                        let (dy, dx) = shape.shift(u, v);
                        shifted_axpy(dst, g, h, wd, -dy, -dx, a);
                    }
                }
            }
        }
    }
    gx
}

/// Gradients with respect to the weights and the bias.
pub(crate) fn backward_params(shape: &ConvShape, grad_out: &Tensor4, x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let [n, _, h, wd] = x.dims();
    let k = shape.kernel;
    let mut gw = vec![0.0; shape.weight_dims().iter().product()];
    let mut gb = vec![0.0; shape.out_channels];
    for o in 0..shape.out_channels {
        for item in 0..n {
            let g = grad_out.plane(item, o);
            gb[o] += g.iter().sum::<f64>();
            for i in 0..shape.in_channels {
                let src = x.plane(item, i);
                for u in 0..k {
                    for v in 0..k {
                        let (dy, dx) = shape.shift(u, v);
                        gw[shape.widx(o, i, u * k + v)] += shifted_dot(g, src, h, wd, dy, dx);
                    }
                }
            }
        }
    }
    (gw, gb)
}

/// Stride-1 same-padding convolution (cross-correlation).
pub fn conv2d(x: &Tensor4, spec: &ConvLayerSpec) -> Result<Tensor4> {
    if spec.shape.transposed {
        return Err(invalid_arg!("conv2d called with a transposed layer"));
    }
    forward(&spec.shape, x, &spec.weights, &spec.bias)
}

/// Stride-1 same-padding transposed convolution, the adjoint of [`conv2d`].
pub fn tconv2d(x: &Tensor4, spec: &ConvLayerSpec) -> Result<Tensor4> {
    if !spec.shape.transposed {
        return Err(invalid_arg!("tconv2d called with a non-transposed layer"));
    }
    forward(&spec.shape, x, &spec.weights, &spec.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
        let n = dims.iter().product();
        Tensor4::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, shape: ConvShape) -> ConvLayerSpec {
        ConvLayerSpec {
            shape,
            weights: random_tensor(rng, shape.weight_dims()),
            bias: random_tensor(rng, shape.bias_dims()),
        }
    }

    /// Six nested loops over the defining sum.
    fn conv_reference(x: &Tensor4, l: &ConvLayerSpec) -> Tensor4 {
        let [n, ci, h, w] = x.dims();
        let co = l.shape.out_channels;
        let k = l.shape.kernel as isize;
        let p = k / 2;
        let mut out = Tensor4::zeros([n, co, h, w]);
        let wdims = l.weights.dims();
        for b in 0..n {
            for o in 0..co {
                for r in 0..h as isize {
                    for c in 0..w as isize {
                        let mut acc = l.bias.data()[o];
                        for i in 0..ci {
                            for u in 0..k {
                                for v in 0..k {
                                    let (sr, sc) = (r + u - p, c + v - p);
                                    if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                        continue;
                                    }
                                    let widx = ((o * wdims[1] + i) * k as usize + u as usize) * k as usize + v as usize;
                                    acc += l.weights.data()[widx] * x.at(b, i, sr as usize, sc as usize);
                                }
                            }
                        }
                        let idx = ((b * co + o) * h + r as usize) * w + c as usize;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, [2, 1, 4, 5]);
        for transposed in [false, true] {
            let mut l = ConvLayerSpec::zeros(ConvShape::new(1, 1, 1, transposed).unwrap());
            l.weights.data_mut()[0] = 1.0;
            assert_eq!(forward(&l.shape, &x, &l.weights, &l.bias).unwrap(), x);
            let mut b = ConvLayerSpec::zeros(ConvShape::new(1, 3, 3, transposed).unwrap());
            b.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
            let y = forward(&b.shape, &x, &b.weights, &b.bias).unwrap();
            assert_eq!(y.dims(), [2, 3, 4, 5]);
            assert!(y.plane(1, 2).iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let mut l = random_layer(
            &mut ChaCha8Rng::seed_from_u64(2),
            ConvShape::new(2, 3, 3, true).unwrap(),
        );
        l.bias.data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let y = tconv2d(&Tensor4::zeros([1, 2, 3, 3]), &l).unwrap();
        assert!(y.plane(0, 1).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, [1, 2, 5, 5]);
        let l = random_layer(&mut rng, ConvShape::new(2, 3, 3, false).unwrap());
        let got = conv2d(&x, &l).unwrap();
        for (a, b) in got.data().iter().zip(conv_reference(&x, &l).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let shape = ConvShape::new(2, 3, 5, false).unwrap();
            let mut conv = random_layer(&mut rng, shape);
            conv.bias = Tensor4::zeros(shape.bias_dims());
            let tshape = ConvShape::new(3, 2, 5, true).unwrap();
            let tconv = ConvLayerSpec {
                shape: tshape,
                weights: conv.weights.clone(),
                bias: Tensor4::zeros(tshape.bias_dims()),
            };
            let x = random_tensor(&mut rng, [2, 2, 6, 7]);
            let y = random_tensor(&mut rng, [2, 3, 6, 7]);
            let lhs = conv2d(&x, &conv).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&tconv2d(&y, &tconv).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn errors_on_mismatch() {
        let l = ConvLayerSpec::zeros(ConvShape::new(2, 2, 3, false).unwrap());
        assert!(conv2d(&Tensor4::zeros([1, 3, 4, 4]), &l).is_err());
        assert!(tconv2d(&Tensor4::zeros([1, 2, 4, 4]), &l).is_err());
        assert!(ConvShape::new(1, 1, 4, false).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let shape = ConvShape::new(4, 8, 5, false).unwrap();
        let a = ConvLayerSpec::init(shape, 9, 0);
        assert_eq!(a, ConvLayerSpec::init(shape, 9, 0));
        assert_ne!(a, ConvLayerSpec::init(shape, 9, 1));
        let bound = (6.0f64 / 100.0).sqrt();
        assert!(a.weights.data().iter().all(|v| v.abs() <= bound));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn preserves_spatial_dims(h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5, 9]), t in any::<bool>()) {
                let l = ConvLayerSpec::init(ConvShape::new(2, 3, k, t).unwrap(), 0, 0);
                let y = forward(&l.shape, &Tensor4::filled([1, 2, h, w], 0.5), &l.weights, &l.bias).unwrap();
                prop_assert_eq!(y.dims(), [1, 3, h, w]);
            }

            #[test]
            fn linear_in_input_and_weights(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = ConvShape::new(2, 2, 3, seed % 2 == 0).unwrap();
                let mut l = random_layer(&mut rng, shape);
                l.bias = Tensor4::zeros(shape.bias_dims());
                let x = random_tensor(&mut rng, [1, 2, 4, 4]);
                let y = random_tensor(&mut rng, [1, 2, 4, 4]);
                let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
                let lhs = forward(&shape, &Tensor4::new(x.dims(), mix).unwrap(), &l.weights, &l.bias).unwrap();
                let fx = forward(&shape, &x, &l.weights, &l.bias).unwrap();
                let fy = forward(&shape, &y, &l.weights, &l.bias).unwrap();
                for ((o, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
                    prop_assert!((o - (a * p + b * q)).abs() < 1e-9);
                }
                let w2 = random_tensor(&mut rng, shape.weight_dims());
                let wmix: Vec<f64> = l.weights.data().iter().zip(w2.data()).map(|(p, q)| a * p + b * q).collect();
                let lhs = forward(&shape, &x, &Tensor4::new(shape.weight_dims(), wmix).unwrap(), &l.bias).unwrap();
                let f2 = forward(&shape, &x, &w2, &l.bias).unwrap();
                for ((o, p), q) in lhs.data().iter().zip(fx.data()).zip(f2.data()) {
                    prop_assert!((o - (a * p + b * q)).abs() < 1e-9);
                }
            }
        }
    }
}
