//! Layer kernels with hand-written forward and backward passes.
//!
//! Convolutions are lowered to patch gathering plus a matrix multiply. Work is
//! split over the batch; weight gradients are summed per fixed-size group of
//! samples and the group sums are then added in sample order, so results do
//! not depend on how many worker threads ran.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, Scalar, Shape, Tensor};

pub const KERNEL: usize = 3;

/// Samples per partial weight-gradient sum.
const REDUCE_GROUP: usize = 8;

/// 3x3 convolution with "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `(3, 3, c_in, c_out)`
    pub weights: Tensor<T>,
    /// `(c_out)`
    pub bias: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    /// `(n_in, n_out)`
    pub weights: Tensor<T>,
    /// `(n_out)`
    pub bias: Tensor<T>,
}

/// Output extent and leading pad for "same" padding along one axis.
///
/// The output has `ceil(extent / stride)` positions. Total padding is whatever
/// the 3-wide window needs to cover that many positions; the leading edge gets
/// the floor of half of it and the trailing edge the remainder.
pub fn same_padding(extent: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + KERNEL).saturating_sub(extent);
    (out, total / 2)
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize) -> Result<Self> {
        let layer = ConvLayer {
            weights,
            bias,
            stride,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let dims = self.weights.dims();
        if dims.len() != 4 || dims[0] != KERNEL || dims[1] != KERNEL {
            return Err(Error::shape(format!(
                "conv weights must be (3,3,c_in,c_out), got {}",
                self.weights.shape()
            )));
        }
        if self.bias.dims() != [dims[3]] {
            return Err(Error::shape(format!(
                "conv bias must be ({}), got {}",
                dims[3],
                self.bias.shape()
            )));
        }
        if self.stride == 0 {
            return Err(Error::shape("conv stride must be positive"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[3]
    }

    fn geometry(&self, input: &Tensor<T>) -> Result<ConvGeometry> {
        let [n, h, w, c] = input.as_image("conv2d")?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let (oh, pad_top) = same_padding(h, self.stride);
        let (ow, pad_left) = same_padding(w, self.stride);
        Ok(ConvGeometry {
            n,
            h,
            w,
            ci: c,
            co: self.out_channels(),
            oh,
            ow,
            pad_top,
            pad_left,
            stride: self.stride,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
}

impl ConvGeometry {
    fn in_len(&self) -> usize {
        self.h * self.w * self.ci
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow * self.co
    }

    fn patch_len(&self) -> usize {
        KERNEL * KERNEL * self.ci
    }

    /// Input row/col for output position `o` and tap `d`, or `None` in the padding.
    #[inline]
    fn source(&self, o: usize, d: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + d).checked_sub(pad).filter(|&v| v < extent)
    }

    /// Gathers one sample's receptive fields into `(oh*ow, 9*ci)` rows ordered
    /// `(dy, dx, c)`, matching the flattened weight layout.
    fn gather<T: Scalar>(&self, sample: &[T], patches: &mut [T]) {
        let ci = self.ci;
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut patches[(oy * self.ow + ox) * plen..][..plen];
                for dy in 0..KERNEL {
                    let sy = self.source(oy, dy, self.pad_top, self.h);
                    for dx in 0..KERNEL {
                        let dst = &mut row[(dy * KERNEL + dx) * ci..][..ci];
                        match (sy, self.source(ox, dx, self.pad_left, self.w)) {
                            (Some(y), Some(x)) => {
                                dst.copy_from_slice(&sample[(y * self.w + x) * ci..][..ci])
                            }
                            _ => dst.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`gather`](Self::gather): accumulates patch gradients back
    /// onto the input positions they were read from.
    fn scatter_add<T: Scalar>(&self, patches: &[T], sample: &mut [T]) {
        let ci = self.ci;
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &patches[(oy * self.ow + ox) * plen..][..plen];
                for dy in 0..KERNEL {
                    let Some(y) = self.source(oy, dy, self.pad_top, self.h) else {
                        continue;
                    };
                    for dx in 0..KERNEL {
                        let Some(x) = self.source(ox, dx, self.pad_left, self.w) else {
                            continue;
                        };
                        let src = &row[(dy * KERNEL + dx) * ci..][..ci];
                        let dst = &mut sample[(y * self.w + x) * ci..][..ci];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    layer.validate()?;
    let g = layer.geometry(input)?;
    let positions = g.oh * g.ow;
    let weights = layer.weights.data();
    let bias = layer.bias.data();
    let mut out = vec![T::zero(); g.n * g.out_len()];

    out.par_chunks_mut(g.out_len())
        .zip(input.data().par_chunks(g.in_len()))
        .for_each_init(
            || vec![T::zero(); positions * g.patch_len()],
            |patches, (out_sample, in_sample)| {
                g.gather(in_sample, patches);
                for row in out_sample.chunks_exact_mut(g.co) {
                    row.copy_from_slice(bias);
                }
                gemm(patches, weights, out_sample, positions, g.patch_len(), g.co);
            },
        );

    Ok(Tensor::from_parts(
        Shape::new(&[g.n, g.oh, g.ow, g.co])?,
        out,
    ))
}

/// Gradients of `sum(conv2d_forward(input, layer) * grad_out)`.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_inner(input, layer, grad_out, true)
}

/// As [`conv2d_backward`]; when `need_input` is false the input gradient is
/// left at zero and its computation skipped.
pub(crate) fn conv2d_backward_inner<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    layer.validate()?;
    let g = layer.geometry(input)?;
    if grad_out.dims() != [g.n, g.oh, g.ow, g.co] {
        return Err(Error::shape(format!(
            "conv grad_out must be ({},{},{},{}), got {}",
            g.n,
            g.oh,
            g.ow,
            g.co,
            grad_out.shape()
        )));
    }
    let positions = g.oh * g.ow;
    let plen = g.patch_len();
    let weights = layer.weights.data();
    let mut grad_input = vec![T::zero(); input.len()];

    let partials: Vec<(Vec<T>, Vec<T>)> = grad_input
        .par_chunks_mut(REDUCE_GROUP * g.in_len())
        .zip(input.data().par_chunks(REDUCE_GROUP * g.in_len()))
        .zip(grad_out.data().par_chunks(REDUCE_GROUP * g.out_len()))
        .map(|((gin_group, in_group), gout_group)| {
            let mut gw = vec![T::zero(); plen * g.co];
            let mut gb = vec![T::zero(); g.co];
            let mut patches = vec![T::zero(); positions * plen];
            let mut gpatches = vec![T::zero(); if need_input { positions * plen } else { 0 }];
            for ((gin, inp), gout) in gin_group
                .chunks_exact_mut(g.in_len())
                .zip(in_group.chunks_exact(g.in_len()))
                .zip(gout_group.chunks_exact(g.out_len()))
            {
                g.gather(inp, &mut patches);
                gemm_at_b(&patches, gout, &mut gw, positions, plen, g.co);
                for row in gout.chunks_exact(g.co) {
                    for (b, &v) in gb.iter_mut().zip(row) {
                        *b = *b + v;
                    }
                }
                if need_input {
                    gpatches.fill(T::zero());
                    gemm_a_bt(gout, weights, &mut gpatches, positions, g.co, plen);
                    g.scatter_add(&gpatches, gin);
                }
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![T::zero(); plen * g.co];
    let mut grad_b = vec![T::zero(); g.co];
    for (gw, gb) in &partials {
        add_assign(&mut grad_w, gw);
        add_assign(&mut grad_b, gb);
    }

    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape().clone(), grad_input),
        weights: Tensor::from_parts(layer.weights.shape().clone(), grad_w),
        bias: Tensor::from_parts(layer.bias.shape().clone(), grad_b),
    })
}

fn add_assign<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

pub fn relu_forward<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_parts(t.shape().clone(), data)
}

/// Passes `grad_out` where the forward input was strictly positive. The
/// derivative at exactly zero is taken as zero.
pub fn relu_backward<T: Scalar>(t: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(t, grad_out, "relu_backward")?;
    let data = t
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(t.shape().clone(), data))
}

pub fn global_avg_pool_forward<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.spatial_mean()
}

pub fn global_avg_pool_backward<T: Scalar>(
    t: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = t.as_image("global_avg_pool_backward")?;
    if grad_out.dims() != [n, c] {
        return Err(Error::shape(format!(
            "pool grad_out must be ({n},{c}), got {}",
            grad_out.shape()
        )));
    }
    let scale = T::one() / T::of((h * w) as f64);
    let mut data = Vec::with_capacity(t.len());
    for g in grad_out.data().chunks_exact(c) {
        let spread: Vec<T> = g.iter().map(|&v| v * scale).collect();
        for _ in 0..h * w {
            data.extend_from_slice(&spread);
        }
    }
    Ok(Tensor::from_parts(t.shape().clone(), data))
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let layer = DenseLayer { weights, bias };
        layer.validate()?;
        Ok(layer)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let (_, n_out) = self.weights.as_matrix("dense weights")?;
        if self.bias.dims() != [n_out] {
            return Err(Error::shape(format!(
                "dense bias must be ({n_out}), got {}",
                self.bias.shape()
            )));
        }
        Ok(())
    }

    pub fn in_features(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weights.dims()[1]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, f) = x.as_matrix("dense input")?;
        if f != self.in_features() {
            return Err(Error::shape(format!(
                "dense layer expects {} features, got {f}",
                self.in_features()
            )));
        }
        Ok(n)
    }
}

pub fn dense_forward<T: Scalar>(x: &Tensor<T>, layer: &DenseLayer<T>) -> Result<Tensor<T>> {
    layer.validate()?;
    let n = layer.check_input(x)?;
    let (n_in, n_out) = (layer.in_features(), layer.out_features());
    let mut out = Vec::with_capacity(n * n_out);
    for _ in 0..n {
        out.extend_from_slice(layer.bias.data());
    }
    gemm(x.data(), layer.weights.data(), &mut out, n, n_in, n_out);
    Tensor::new(&[n, n_out], out)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &DenseLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    layer.validate()?;
    let n = layer.check_input(x)?;
    let (n_in, n_out) = (layer.in_features(), layer.out_features());
    if grad_out.dims() != [n, n_out] {
        return Err(Error::shape(format!(
            "dense grad_out must be ({n},{n_out}), got {}",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * n_in];
    gemm_a_bt(g, layer.weights.data(), &mut gx, n, n_out, n_in);
    let mut gw = vec![T::zero(); n_in * n_out];
    gemm_at_b(x.data(), g, &mut gw, n, n_in, n_out);
    let mut gb = vec![T::zero(); n_out];
    for row in g.chunks_exact(n_out) {
        add_assign(&mut gb, row);
    }
    Ok(DenseGrads {
        input: Tensor::from_parts(x.shape().clone(), gx),
        weights: Tensor::from_parts(layer.weights.shape().clone(), gw),
        bias: Tensor::from_parts(layer.bias.shape().clone(), gb),
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.as_matrix("softmax input")?;
    if k < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 classes, got {k}")));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e = *e / sum;
        }
    }
    Ok(Tensor::from_parts(logits.shape().clone(), out))
}

/// Index of the largest entry per row; ties go to the lower index.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = t.as_matrix("argmax input")?;
    Ok(t.data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
