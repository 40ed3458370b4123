//! Layer primitives with hand-written gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Geometry of a valid (unpadded) convolution: `(rows, cols)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub kernel: (usize, usize),
    pub filters: usize,
}

impl ConvSpec {
    pub const fn new(stride: (usize, usize), kernel: (usize, usize), filters: usize) -> Self {
        ConvSpec { stride, kernel, filters }
    }

    /// `⌊(in − kernel)/stride⌋ + 1` per spatial axis.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [h, w, _] = input;
        if h < self.kernel.0 || w < self.kernel.1 {
            return Err(Error::Shape(format!(
                "kernel {:?} larger than input {h}×{w}",
                self.kernel
            )));
        }
        Ok([
            (h - self.kernel.0) / self.stride.0 + 1,
            (w - self.kernel.1) / self.stride.1 + 1,
            self.filters,
        ])
    }
}

/// Convolution followed by a rectifier. Weights are laid out
/// `kernel_rows × kernel_cols × in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(spec: ConvSpec, in_channels: usize) -> Self {
        let n = spec.kernel.0 * spec.kernel.1 * in_channels * spec.filters;
        ConvLayer { spec, in_channels, weights: vec![0.0; n], bias: vec![0.0; spec.filters] }
    }

    /// He initialization: `N(0, 2/fan_in)` weights, zero bias.
    pub fn he_init(spec: ConvSpec, in_channels: usize, rng: &mut impl Rng) -> Self {
        let mut layer = ConvLayer::zeros(spec, in_channels);
        let fan_in = (spec.kernel.0 * spec.kernel.1 * in_channels) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        layer.weights.iter_mut().for_each(|w| *w = normal.sample(rng));
        layer
    }

    #[inline]
    fn weight_row(&self, ky: usize, kx: usize, ci: usize) -> &[f64] {
        let f = self.spec.filters;
        let o = ((ky * self.spec.kernel.1 + kx) * self.in_channels + ci) * f;
        &self.weights[o..o + f]
    }
}

/// Valid convolution with rectified output.
pub fn conv2d_forward(x: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    if x.channels != layer.in_channels {
        return Err(Error::Shape(format!(
            "layer expects {} input channels, got {}",
            layer.in_channels, x.channels
        )));
    }
    let [oh, ow, of] = layer.spec.output_shape(x.shape())?;
    let mut out = Tensor::zeros(oh, ow, of);
    let (sy, sx) = layer.spec.stride;
    let (ky_n, kx_n) = layer.spec.kernel;
    for y in 0..oh {
        for xo in 0..ow {
            let o = (y * ow + xo) * of;
            let acc = &mut out.data[o..o + of];
            acc.copy_from_slice(&layer.bias);
            for ky in 0..ky_n {
                for kx in 0..kx_n {
                    let px = x.pixel(y * sy + ky, xo * sx + kx);
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (a, w) in acc.iter_mut().zip(layer.weight_row(ky, kx, ci)) {
                            *a += xv * w;
                        }
                    }
                }
            }
            for a in acc.iter_mut() {
                if *a < 0.0 {
                    *a = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward pass through conv + rectifier. `out` is the forward output (used
/// as the rectifier mask); gradients are accumulated into `grad`. Returns the
/// gradient with respect to `x` when `want_input_grad` is set.
pub fn conv2d_backward(
    x: &Tensor,
    out: &Tensor,
    grad_out: &Tensor,
    layer: &ConvLayer,
    grad: &mut ConvGrad,
    want_input_grad: bool,
) -> Option<Tensor> {
    let (sy, sx) = layer.spec.stride;
    let (ky_n, kx_n) = layer.spec.kernel;
    let of = layer.spec.filters;
    let mut grad_x = want_input_grad.then(|| Tensor::zeros(x.height, x.width, x.channels));
    let mut g = vec![0.0; of];
    for y in 0..out.height {
        for xo in 0..out.width {
            let o = (y * out.width + xo) * of;
            let mut any = false;
            for f in 0..of {
                g[f] = if out.data[o + f] > 0.0 { grad_out.data[o + f] } else { 0.0 };
                any |= g[f] != 0.0;
            }
            if !any {
                continue;
            }
            for (b, gv) in grad.bias.iter_mut().zip(&g) {
                *b += gv;
            }
            for ky in 0..ky_n {
                for kx in 0..kx_n {
                    let (iy, ix) = (y * sy + ky, xo * sx + kx);
                    let xo_off = x.offset(iy, ix, 0);
                    for ci in 0..x.channels {
                        let wo = ((ky * kx_n + kx) * layer.in_channels + ci) * of;
                        let xv = x.data[xo_off + ci];
                        if xv != 0.0 {
                            for (gw, gv) in grad.weights[wo..wo + of].iter_mut().zip(&g) {
                                *gw += xv * gv;
                            }
                        }
                        if let Some(gx) = grad_x.as_mut() {
                            let s: f64 = layer.weights[wo..wo + of].iter().zip(&g).map(|(w, gv)| w * gv).sum();
                            gx.data[xo_off + ci] += s;
                        }
                    }
                }
            }
        }
    }
    grad_x
}

/// Fully connected layer with a single output, `z = b + w·x`, initialized
/// with variance `1/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Dense {
    pub fn init(inputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (inputs.max(1) as f64).sqrt()).expect("finite std");
        Dense { weights: (0..inputs).map(|_| normal.sample(rng)).collect(), bias: 0.0 }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Shape(format!("dense layer expects {} inputs, got {}", self.weights.len(), x.len())));
        }
        Ok(self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }

    /// Accumulates parameter gradients for upstream `dz` into `grad` and
    /// returns the input gradient.
    pub fn backward(&self, x: &[f64], dz: f64, grad: &mut Dense) -> Vec<f64> {
        grad.bias += dz;
        for (g, v) in grad.weights.iter_mut().zip(x) {
            *g += dz * v;
        }
        self.weights.iter().map(|w| w * dz).collect()
    }
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// All-pairs absolute differences: `D(r, k, c) = |L0[r](c) − L1[k](c)|` where
/// `L[i·W + j] = L(i, j)` flattens the spatial grid.
pub fn delta_layer(l0: &Tensor, l1: &Tensor) -> Result<Tensor> {
    if l0.shape() != l1.shape() {
        return Err(Error::Validation(format!("delta inputs differ: {:?} vs {:?}", l0.shape(), l1.shape())));
    }
    let n = l0.height * l0.width;
    let c = l0.channels;
    let mut out = Tensor::zeros(n, n, c);
    for r in 0..n {
        let a = &l0.data[r * c..(r + 1) * c];
        for k in 0..n {
            let b = &l1.data[k * c..(k + 1) * c];
            let o = (r * n + k) * c;
            for ((d, x), y) in out.data[o..o + c].iter_mut().zip(a).zip(b) {
                *d = (x - y).abs();
            }
        }
    }
    Ok(out)
}

/// Gradient of `delta_layer` with respect to both inputs.
pub fn delta_backward(l0: &Tensor, l1: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let n = l0.height * l0.width;
    let c = l0.channels;
    let mut g0 = Tensor::zeros(l0.height, l0.width, c);
    let mut g1 = Tensor::zeros(l1.height, l1.width, c);
    for r in 0..n {
        for k in 0..n {
            let o = (r * n + k) * c;
            for ch in 0..c {
                let g = grad_out.data[o + ch];
                if g == 0.0 {
                    continue;
                }
                let diff = l0.data[r * c + ch] - l1.data[k * c + ch];
                let s = if diff > 0.0 {
                    g
                } else if diff < 0.0 {
                    -g
                } else {
                    0.0
                };
                g0.data[r * c + ch] += s;
                g1.data[k * c + ch] -= s;
            }
        }
    }
    (g0, g1)
}

/// The delta layer fused with the first convolution of the delta head. Each
/// strip of `kernel_rows` delta rows is built on the fly and convolved, so the
/// full `HW × HW × C` tensor is never held in memory. Produces bit-identical
/// output to `conv2d_forward(&delta_layer(l0, l1)?, layer)`.
pub fn delta_conv_fused(l0: &Tensor, l1: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    if l0.shape() != l1.shape() {
        return Err(Error::Validation(format!("delta inputs differ: {:?} vs {:?}", l0.shape(), l1.shape())));
    }
    let n = l0.height * l0.width;
    let c = l0.channels;
    let [oh, ow, of] = layer.spec.output_shape([n, n, c])?;
    let (sy, _) = layer.spec.stride;
    let ky_n = layer.spec.kernel.0;
    let mut out = Tensor::zeros(oh, ow, of);
    let mut strip = Tensor::zeros(ky_n, n, c);
    for y in 0..oh {
        for ky in 0..ky_n {
            let r = y * sy + ky;
            let a = &l0.data[r * c..(r + 1) * c];
            for k in 0..n {
                let b = &l1.data[k * c..(k + 1) * c];
                let o = (ky * n + k) * c;
                for ((d, x), yv) in strip.data[o..o + c].iter_mut().zip(a).zip(b) {
                    *d = (x - yv).abs();
                }
            }
        }
        let row = conv2d_forward(&strip, &ConvLayer { spec: ConvSpec { stride: (1, layer.spec.stride.1), ..layer.spec }, ..layer.clone() })?;
        debug_assert_eq!(row.height, 1);
        let o = y * ow * of;
        out.data[o..o + ow * of].copy_from_slice(&row.data);
    }
    Ok(out)
}

/// Cyclic cross-correlation of two `1 × W × C` feature volumes:
/// `corr(k) = Σ_{j,c} L1(j, c)·L0((j + k) mod W, c)`.
pub fn correlation(l0: &Tensor, l1: &Tensor) -> Result<Vec<f64>> {
    if l0.shape() != l1.shape() || l0.height != 1 {
        return Err(Error::Validation(format!(
            "correlation needs matching 1×W×C volumes, got {:?} and {:?}",
            l0.shape(),
            l1.shape()
        )));
    }
    let (w, c) = (l0.width, l0.channels);
    // one cyclic copy of l0 so every lag reads a contiguous window
    let padded = l0.wrap_pad_columns(w);
    Ok((0..w)
        .map(|k| {
            let window = &padded.data[k * c..(k + w) * c];
            window.iter().zip(&l1.data).map(|(a, b)| a * b).sum()
        })
        .collect())
}

/// Gradient of `correlation` with respect to `(l0, l1)`.
pub fn correlation_backward(l0: &Tensor, l1: &Tensor, grad_corr: &[f64]) -> (Tensor, Tensor) {
    let (w, c) = (l0.width, l0.channels);
    let mut g0 = Tensor::zeros(1, w, c);
    let mut g1 = Tensor::zeros(1, w, c);
    for (k, &g) in grad_corr.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for j in 0..w {
            let m = (j + k) % w;
            for ch in 0..c {
                g1.data[j * c + ch] += g * l0.data[m * c + ch];
                g0.data[m * c + ch] += g * l1.data[j * c + ch];
            }
        }
    }
    (g0, g1)
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    // Quadruple-loop reference with no zero-skipping and textbook indexing.
    fn naive_conv(x: &Tensor, l: &ConvLayer) -> Tensor {
        let oh = (x.height - l.spec.kernel.0) / l.spec.stride.0 + 1;
        let ow = (x.width - l.spec.kernel.1) / l.spec.stride.1 + 1;
        let f = l.spec.filters;
        let mut out = Tensor::zeros(oh, ow, f);
        for y in 0..oh {
            for xo in 0..ow {
                for fo in 0..f {
                    let mut s = l.bias[fo];
                    for ky in 0..l.spec.kernel.0 {
                        for kx in 0..l.spec.kernel.1 {
                            for ci in 0..l.in_channels {
                                let w = l.weights[((ky * l.spec.kernel.1 + kx) * l.in_channels + ci) * f + fo];
                                s += w * x.at(y * l.spec.stride.0 + ky, xo * l.spec.stride.1 + kx, ci);
                            }
                        }
                    }
                    *out.at_mut(y, xo, fo) = s.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn output_shape_matches_first_leg_row() {
        let spec = ConvSpec::new((2, 2), (5, 15), 16);
        assert_eq!(spec.output_shape([64, 900, 1]).unwrap(), [30, 443, 16]);
    }

    #[test]
    fn one_by_one_kernel_arithmetic() {
        let layer = ConvLayer { spec: ConvSpec::new((1, 1), (1, 1), 1), in_channels: 1, weights: vec![2.0], bias: vec![-1.0] };
        let x = Tensor::from_vec(1, 1, 1, vec![3.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &layer).unwrap().data, vec![5.0]);
    }

    #[test]
    fn kernel_larger_than_input_is_shape_error() {
        let layer = ConvLayer::zeros(ConvSpec::new((1, 1), (3, 3), 1), 1);
        let x = Tensor::zeros(2, 5, 1);
        assert!(matches!(conv2d_forward(&x, &layer), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (stride, kernel, cin, f) in [((1, 1), (3, 3), 2, 3), ((2, 1), (3, 5), 3, 4), ((2, 2), (2, 4), 1, 2), ((1, 3), (1, 3), 5, 2)] {
            let layer = ConvLayer {
                spec: ConvSpec::new(stride, kernel, f),
                in_channels: cin,
                weights: (0..kernel.0 * kernel.1 * cin * f).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bias: (0..f).map(|_| rng.random_range(-0.5..0.5)).collect(),
            };
            let x = random_tensor(&mut rng, 9, 13, cin);
            let a = conv2d_forward(&x, &layer).unwrap();
            let b = naive_conv(&x, &layer);
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn delta_of_equal_volumes_vanishes_on_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_tensor(&mut rng, 1, 6, 3);
        let d = delta_layer(&l, &l).unwrap();
        for r in 0..6 {
            assert!(d.pixel(r, r).iter().all(|v| *v == 0.0));
        }
        // spatially constant volumes give an all-zero delta
        let flat = Tensor::from_vec(1, 6, 3, [0.3, -0.2, 1.0].repeat(6)).unwrap();
        assert!(delta_layer(&flat, &flat).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_two_by_one_by_hand() {
        let (a, b, c, d) = (0.5, -1.0, 2.0, 0.25);
        let l0 = Tensor::from_vec(1, 2, 1, vec![a, b]).unwrap();
        let l1 = Tensor::from_vec(1, 2, 1, vec![c, d]).unwrap();
        let out = delta_layer(&l0, &l1).unwrap();
        assert_eq!(out.shape(), [2, 2, 1]);
        assert_eq!(out.data, vec![(a - c).abs(), (a - d).abs(), (b - c).abs(), (b - d).abs()]);
    }

    #[test]
    fn delta_shape_mismatch() {
        assert!(delta_layer(&Tensor::zeros(1, 3, 2), &Tensor::zeros(1, 4, 2)).is_err());
    }

    #[test]
    fn fused_delta_conv_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l0 = random_tensor(&mut rng, 1, 45, 6);
        let l1 = random_tensor(&mut rng, 1, 45, 6);
        let layer = ConvLayer::he_init(ConvSpec::new((1, 15), (1, 15), 4), 6, &mut rng);
        let a = conv2d_forward(&delta_layer(&l0, &l1).unwrap(), &layer).unwrap();
        let b = delta_conv_fused(&l0, &l1, &layer).unwrap();
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    // Naive double loop over an explicitly padded copy.
    fn naive_correlation(l0: &Tensor, l1: &Tensor) -> Vec<f64> {
        let w = l0.width;
        let mut padded = vec![vec![0.0; l0.channels]; 2 * w];
        for (j, p) in padded.iter_mut().enumerate() {
            for c in 0..l0.channels {
                p[c] = l0.at(0, j % w, c);
            }
        }
        let mut out = vec![0.0; w];
        for (k, o) in out.iter_mut().enumerate() {
            for j in 0..w {
                for c in 0..l0.channels {
                    *o += l1.at(0, j, c) * padded[j + k][c];
                }
            }
        }
        out
    }

    #[test]
    fn correlation_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let l0 = random_tensor(&mut rng, 1, 360, 8);
            let l1 = random_tensor(&mut rng, 1, 360, 8);
            let a = correlation(&l0, &l1).unwrap();
            let b = naive_correlation(&l0, &l1);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
