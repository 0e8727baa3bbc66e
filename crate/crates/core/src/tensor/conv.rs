//! 2-D convolution with symmetric "same" zero padding.
//!
//! The padding rule matches the aligned-cropping discipline used by the
//! pyramid: stride-s "same" output extent is ceil(in/s), and when the total
//! padding is odd the extra row/column goes on the bottom/right.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Same,
    Valid,
}

/// Static convolution weights: (C_out, C_in, J, K) plus optional per-output
/// channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T: Scalar> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvKernel<T> {
    /// Kernel extents must be odd so "same" padding is well defined.
    pub fn new(weights: Tensor<T>, bias: Option<Tensor<T>>) -> Result<ConvKernel<T>> {
        let s = weights.shape();
        if s.h % 2 == 0 || s.w % 2 == 0 {
            return Err(Error::InvalidArgument {
                op: "ConvKernel::new",
                msg: format!("kernel extents must be odd, got {}x{}", s.h, s.w),
            });
        }
        if let Some(b) = &bias {
            if b.data().len() != s.n {
                return Err(Error::InvalidArgument {
                    op: "ConvKernel::new",
                    msg: format!(
                        "bias length {} does not match {} output channels",
                        b.data().len(),
                        s.n
                    ),
                });
            }
        }
        Ok(ConvKernel { weights, bias })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c
    }

    pub fn extents(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s.h, s.w)
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: Pad) -> usize {
    match pad {
        Pad::Same => input.div_ceil(stride),
        Pad::Valid => {
            if input < kernel {
                0
            } else {
                (input - kernel) / stride + 1
            }
        }
    }
}

/// Top/left padding for a given axis. Total pad = max((out-1)*s + k - in, 0),
/// split evenly with the surplus on the bottom/right.
fn pad_before(input: usize, kernel: usize, stride: usize, pad: Pad) -> usize {
    match pad {
        Pad::Valid => 0,
        Pad::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            total / 2
        }
    }
}

/// Convolve `x` (N, C_in, H, W) with `k`, producing (N, C_out, OH, OW).
///
/// For each output element the taps accumulate in fixed (c_in, j, k) order
/// on top of the bias, so the result is bitwise reproducible.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    stride: usize,
    pad: Pad,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if stride == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            msg: "stride must be positive".into(),
        });
    }
    if xs.c != k.c_in() {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: format!("input {}", xs),
            rhs: format!("kernel {}", k.weights.shape()),
        });
    }
    let (kj, kk) = k.extents();
    let oh = out_extent(xs.h, kj, stride, pad);
    let ow = out_extent(xs.w, kk, stride, pad);
    let pt = pad_before(xs.h, kj, stride, pad) as isize;
    let pl = pad_before(xs.w, kk, stride, pad) as isize;

    let co = k.c_out();
    let mut out = Tensor::zeros(Shape::new(xs.n, co, oh, ow));
    let w = k.weights.data();
    let ws = k.weights.shape();

    for n in 0..xs.n {
        for o in 0..co {
            // bias seeds the accumulator
            if let Some(b) = &k.bias {
                let bv = b.data()[o];
                let base = out.shape().index(n, o, 0, 0);
                for v in &mut out.data_mut()[base..base + oh * ow] {
                    *v = bv;
                }
            }
            for ci in 0..xs.c {
                for j in 0..kj {
                    for kx in 0..kk {
                        let wv = w[ws.index(o, ci, j, kx)];
                        for y in 0..oh {
                            let ih = (y * stride) as isize + j as isize - pt;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let xrow = xs.index(n, ci, ih as usize, 0);
                            let orow = out.shape().index(n, o, y, 0);
                            if stride == 1 {
                                // iw = ow + kx - pl; clamp to the valid window
                                let shift = kx as isize - pl;
                                let x_lo = shift.max(0) as usize;
                                let x_hi =
                                    ((xs.w as isize).min(ow as isize + shift)).max(0) as usize;
                                if x_lo >= x_hi {
                                    continue;
                                }
                                let o_lo = (x_lo as isize - shift) as usize;
                                let len = x_hi - x_lo;
                                let xst = xrow + x_lo;
                                let ost = orow + o_lo;
                                let (xd, od) =
                                    split_src_dst(x.data(), out.data_mut(), xst, ost, len);
                                for i in 0..len {
                                    od[i] += wv * xd[i];
                                }
                            } else {
                                for ox in 0..ow {
                                    let iw = (ox * stride) as isize + kx as isize - pl;
                                    if iw < 0 || iw >= xs.w as isize {
                                        continue;
                                    }
                                    let v = x.data()[xrow + iw as usize];
                                    out.data_mut()[orow + ox] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

// Borrow disjoint read/write windows from two distinct buffers.
#[inline(always)]
fn split_src_dst<'a, T>(
    src: &'a [T],
    dst: &'a mut [T],
    src_at: usize,
    dst_at: usize,
    len: usize,
) -> (&'a [T], &'a mut [T]) {
    (&src[src_at..src_at + len], &mut dst[dst_at..dst_at + len])
}

/// Gradients returned by `conv2d_backward`.
pub struct ConvGrads<T: Scalar> {
    pub grad_x: Tensor<T>,
    pub grad_w: Tensor<T>,
    /// Present iff the kernel has a bias.
    pub grad_bias: Option<Tensor<T>>,
}

/// Backward pass of `conv2d`: scatters `grad_out` through the taps.
///
/// grad_x accumulates in fixed (c_out, j, k) order per input element and
/// grad_w in (n, oh, ow) order per weight, matching the forward determinism
/// guarantee.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    stride: usize,
    pad: Pad,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let (kj, kk) = k.extents();
    let oh = out_extent(xs.h, kj, stride, pad);
    let ow = out_extent(xs.w, kk, stride, pad);
    let gs = grad_out.shape();
    if gs != Shape::new(xs.n, k.c_out(), oh, ow) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: gs.to_string(),
            rhs: Shape::new(xs.n, k.c_out(), oh, ow).to_string(),
        });
    }
    let pt = pad_before(xs.h, kj, stride, pad) as isize;
    let pl = pad_before(xs.w, kk, stride, pad) as isize;

    let mut grad_x = Tensor::zeros(xs);
    let mut grad_w = Tensor::zeros(k.weights.shape());
    let ws = k.weights.shape();
    let w = k.weights.data();

    for n in 0..xs.n {
        for o in 0..k.c_out() {
            for ci in 0..xs.c {
                for j in 0..kj {
                    for kx in 0..kk {
                        let wv = w[ws.index(o, ci, j, kx)];
                        let mut wacc = T::zero();
                        for y in 0..oh {
                            let ih = (y * stride) as isize + j as isize - pt;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let xrow = xs.index(n, ci, ih as usize, 0);
                            let grow = gs.index(n, o, y, 0);
                            for ox in 0..ow {
                                let iw = (ox * stride) as isize + kx as isize - pl;
                                if iw < 0 || iw >= xs.w as isize {
                                    continue;
                                }
                                let g = grad_out.data()[grow + ox];
                                grad_x.data_mut()[xrow + iw as usize] += wv * g;
                                wacc += g * x.data()[xrow + iw as usize];
                            }
                        }
                        grad_w.data_mut()[ws.index(o, ci, j, kx)] += wacc;
                    }
                }
            }
        }
    }

    let grad_bias = k.bias.as_ref().map(|b| {
        let mut gb = Tensor::zeros(b.shape());
        for n in 0..gs.n {
            for o in 0..gs.c {
                let mut acc = T::zero();
                let base = gs.index(n, o, 0, 0);
                for &g in &grad_out.data()[base..base + oh * ow] {
                    acc += g;
                }
                gb.data_mut()[o] += acc;
            }
        }
        gb
    });

    Ok(ConvGrads {
        grad_x,
        grad_w,
        grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, rand_uniform, relative_diff};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct six-nested-loop convolution, written before conv2d and kept
    /// independent of it.
    fn conv_oracle(x: &Tensor<f64>, k: &ConvKernel<f64>, stride: usize, pad: Pad) -> Tensor<f64> {
        let xs = x.shape();
        let (kj, kk) = k.extents();
        let oh = out_extent(xs.h, kj, stride, pad);
        let ow = out_extent(xs.w, kk, stride, pad);
        let pt = pad_before(xs.h, kj, stride, pad) as isize;
        let pl = pad_before(xs.w, kk, stride, pad) as isize;
        let mut out = Tensor::zeros(Shape::new(xs.n, k.c_out(), oh, ow));
        for n in 0..xs.n {
            for o in 0..k.c_out() {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = k.bias.as_ref().map(|b| b.data()[o]).unwrap_or(0.0);
                        for ci in 0..xs.c {
                            for j in 0..kj {
                                for kx in 0..kk {
                                    let ih = (y * stride) as isize + j as isize - pt;
                                    let iw = (xo * stride) as isize + kx as isize - pl;
                                    if ih >= 0
                                        && ih < xs.h as isize
                                        && iw >= 0
                                        && iw < xs.w as isize
                                    {
                                        acc += k.weights.at(o, ci, j, kx)
                                            * x.at(n, ci, ih as usize, iw as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, o, y, xo, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let k = ConvKernel::new(w, None).unwrap();
        let y = conv2d(&x, &k, 1, Pad::Same).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel_passes_through() {
        let mut r = rng(7);
        let x: Tensor<f32> = rand_uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut r);
        // 2x2 identity as a 1x1 kernel
        let w = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k = ConvKernel::new(w, None).unwrap();
        let y = conv2d(&x, &k, 1, Pad::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut r = rng(8);
        let x: Tensor<f64> = rand_uniform(Shape::new(2, 3, 7, 5), -1.0, 1.0, &mut r);
        let w: Tensor<f64> = rand_uniform(Shape::new(4, 3, 3, 3), -1.0, 1.0, &mut r);
        let b: Tensor<f64> = rand_uniform(Shape::new(1, 1, 1, 4), -0.5, 0.5, &mut r);
        let k = ConvKernel::new(w, Some(b)).unwrap();
        for (stride, pad) in [(1, Pad::Same), (2, Pad::Same), (1, Pad::Valid)] {
            let got = conv2d(&x, &k, stride, pad).unwrap();
            let want = conv_oracle(&x, &k, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-6, "stride {stride} pad {pad:?}");
            }
        }
    }

    #[test]
    fn same_pad_stride2_uses_ceil_rule() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 7, 10));
        let w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        let k = ConvKernel::new(w, None).unwrap();
        let y = conv2d(&x, &k, 2, Pad::Same).unwrap();
        assert_eq!((y.shape().h, y.shape().w), (4, 5));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(Shape::new(2, 4, 1, 1));
        let k = ConvKernel::new(w, None).unwrap();
        let err = conv2d(&x, &k, 1, Pad::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 3, 4, 4)") && msg.contains("(2, 4, 1, 1)"), "{msg}");
    }

    #[test]
    fn rejects_even_kernel() {
        let w = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 3));
        assert!(ConvKernel::new(w, None).is_err());
    }

    #[test]
    fn linear_in_input_when_bias_free() {
        let mut r = rng(9);
        let x: Tensor<f64> = rand_uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut r);
        let y: Tensor<f64> = rand_uniform(x.shape(), -1.0, 1.0, &mut r);
        let w: Tensor<f64> = rand_uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0, &mut r);
        let k = ConvKernel::new(w, None).unwrap();
        let (alpha, beta) = (0.7, -1.3);
        let lhs = conv2d(
            &add(&x.scale(alpha), &y.scale(beta)).unwrap(),
            &k,
            1,
            Pad::Same,
        )
        .unwrap();
        let rhs = add(
            &conv2d(&x, &k, 1, Pad::Same).unwrap().scale(alpha),
            &conv2d(&y, &k, 1, Pad::Same).unwrap().scale(beta),
        )
        .unwrap();
        assert!(relative_diff(&lhs, &rhs) < 1e-5);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(10);
        let x: Tensor<f64> = rand_uniform(Shape::new(2, 2, 5, 4), -1.0, 1.0, &mut r);
        let w: Tensor<f64> = rand_uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut r);
        let b: Tensor<f64> = rand_uniform(Shape::new(1, 1, 1, 3), -0.5, 0.5, &mut r);
        let k = ConvKernel::new(w, Some(b)).unwrap();
        for (stride, pad) in [(1, Pad::Same), (2, Pad::Same)] {
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let grad_out: Tensor<f64> = rand_uniform(y.shape(), -1.0, 1.0, &mut r);
            let grads = conv2d_backward(&x, &k, stride, pad, &grad_out).unwrap();

            let loss = |x: &Tensor<f64>, k: &ConvKernel<f64>| -> f64 {
                let y = conv2d(x, k, stride, pad).unwrap();
                y.data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(a, g)| a * g)
                    .sum()
            };
            let h = 1e-6;
            // spot-check a deterministic sample of elements in each group
            for idx in (0..x.data().len()).step_by(7) {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= h;
                let num = (loss(&xp, &k) - loss(&xm, &k)) / (2.0 * h);
                assert!(
                    (num - grads.grad_x.data()[idx]).abs() < 1e-4 * num.abs().max(1.0),
                    "grad_x[{idx}] stride {stride}"
                );
            }
            for idx in (0..k.weights.data().len()).step_by(5) {
                let mut kp = k.clone();
                kp.weights.data_mut()[idx] += h;
                let mut km = k.clone();
                km.weights.data_mut()[idx] -= h;
                let num = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h);
                assert!(
                    (num - grads.grad_w.data()[idx]).abs() < 1e-4 * num.abs().max(1.0),
                    "grad_w[{idx}] stride {stride}"
                );
            }
            let gb = grads.grad_bias.as_ref().unwrap();
            for idx in 0..3 {
                let mut kp = k.clone();
                kp.bias.as_mut().unwrap().data_mut()[idx] += h;
                let mut km = k.clone();
                km.bias.as_mut().unwrap().data_mut()[idx] -= h;
                let num = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h);
                assert!((num - gb.data()[idx]).abs() < 1e-4 * num.abs().max(1.0));
            }
        }
    }
}
