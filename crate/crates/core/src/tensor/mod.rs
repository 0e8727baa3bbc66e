//! Minimal dense 4-axis tensor engine.
//!
//! Everything downstream composes the primitives here: convolution,
//! element-wise arithmetic, upsampling with aligned cropping, region
//! cropping, reductions and activations. Each forward operation has a
//! hand-derived backward counterpart (`*_backward`) that takes the saved
//! inputs plus the upstream gradient and returns input gradients.
//!
//! Tensors are plain owned values in `(N, C, H, W)` row-major layout.
//! Operations never mutate their inputs and always return fresh tensors,
//! so values can be shared freely across threads. All accumulations use a
//! fixed per-element summation order, which makes every op bitwise
//! deterministic for a given element type.
//!
//! The element type is a compile-time parameter (`f32` or `f64`), so mixing
//! precisions inside an expression is unrepresentable rather than a runtime
//! error. `f32` is the compute default; `f64` exists for gradient checking,
//! where single-precision rounding would drown the finite-difference signal.

mod conv;
mod sample;
pub mod serial;

use std::fmt;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvKernel, Pad};
pub use sample::{
    bilinear_resize, bilinear_resize_backward, crop_to, crop_to_backward, roi_align,
    roi_align_backward, upsample2_nearest, upsample2_nearest_backward, RoiBox,
};
pub use serial::{read_named_tensor, write_named_tensor};

use crate::error::{Error, Result};

/// Compute precision tag carried by the serialization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Single,
    Double,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::Single => 0,
            DType::Double => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::Single),
            1 => Some(DType::Double),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::Single => write!(f, "single"),
            DType::Double => write!(f, "double"),
        }
    }
}

/// Element types the engine computes in.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const DTYPE: DType;
    const BYTES: usize;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::Single;
    const BYTES: usize = 4;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::Double;
    const BYTES: usize = 8;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Extents of a 4-axis tensor: batch, channel, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major index of `(n, c, h, w)`.
    #[inline(always)]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense `(N, C, H, W)` tensor, row-major, the universal value type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor {
            shape,
            data: vec![T::zero(); shape.count()],
        }
    }

    pub fn ones(shape: Shape) -> Tensor<T> {
        Tensor::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Tensor<T> {
        Tensor {
            shape,
            data: vec![value; shape.count()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.count() {
            return Err(Error::InvalidArgument {
                op: "Tensor::from_vec",
                msg: format!(
                    "shape {} needs {} values, got {}",
                    shape,
                    shape.count(),
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// A 2-axis value (matrix) stored with N = C = 1.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Tensor<T>> {
        Tensor::from_vec(Shape::new(1, 1, rows, cols), data)
    }

    /// A 1-axis value (vector) stored with N = C = H = 1.
    pub fn vector(data: Vec<T>) -> Tensor<T> {
        let len = data.len();
        Tensor {
            shape: Shape::new(1, 1, 1, len),
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor<T>> {
        if shape.count() != self.data.len() {
            return Err(Error::InvalidArgument {
                op: "reshape",
                msg: format!("cannot view {} as {}", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert element type; used to run one set of seeded parameters in
    /// both precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    fn check_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.to_string(),
                rhs: other.shape.to_string(),
            });
        }
        Ok(())
    }
}

/// z = x + y, same shape.
pub fn add<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_same_shape(y, "add")?;
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| a + b)
        .collect();
    Ok(Tensor {
        shape: x.shape,
        data,
    })
}

pub fn sub<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_same_shape(y, "sub")?;
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| a - b)
        .collect();
    Ok(Tensor {
        shape: x.shape,
        data,
    })
}

/// Element-wise product. `y` may have N = 1, in which case it is broadcast
/// over the batch axis of `x`; all other axes must match exactly.
pub fn eltwise_mul<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape;
    let ys = y.shape;
    let broadcast = ys.n == 1 && xs.n != 1;
    if !(xs == ys || (broadcast && xs.c == ys.c && xs.h == ys.h && xs.w == ys.w)) {
        return Err(Error::ShapeMismatch {
            op: "eltwise_mul",
            lhs: xs.to_string(),
            rhs: ys.to_string(),
        });
    }
    let mut out = Tensor::zeros(xs);
    let per_sample = xs.c * xs.h * xs.w;
    for n in 0..xs.n {
        let yoff = if broadcast { 0 } else { n * per_sample };
        let xoff = n * per_sample;
        for i in 0..per_sample {
            out.data[xoff + i] = x.data[xoff + i] * y.data[yoff + i];
        }
    }
    Ok(out)
}

/// Gradients of `eltwise_mul` wrt both inputs. When `y` was broadcast over
/// the batch, its gradient sums the batch contributions.
pub fn eltwise_mul_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    grad_out.check_same_shape(x, "eltwise_mul_backward")?;
    let xs = x.shape;
    let ys = y.shape;
    let broadcast = ys.n == 1 && xs.n != 1;
    let mut gx = Tensor::zeros(xs);
    let mut gy = Tensor::zeros(ys);
    let per_sample = xs.c * xs.h * xs.w;
    for n in 0..xs.n {
        let yoff = if broadcast { 0 } else { n * per_sample };
        let xoff = n * per_sample;
        for i in 0..per_sample {
            gx.data[xoff + i] = grad_out.data[xoff + i] * y.data[yoff + i];
            gy.data[yoff + i] += grad_out.data[xoff + i] * x.data[xoff + i];
        }
    }
    Ok((gx, gy))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.maxv(T::zero()))
}

/// dL/dx = dL/dy where x > 0, else 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor {
        shape: x.shape,
        data,
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Takes the forward *output* s = sigmoid(x): dL/dx = dL/dy · s · (1 − s).
pub fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = out
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor {
        shape: out.shape,
        data,
    }
}

/// Softmax over the channel axis, independently per (n, h, w) pixel.
/// Output channels sum to 1.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let mut m = x.at(n, 0, h, w);
                for c in 1..s.c {
                    m = m.maxv(x.at(n, c, h, w));
                }
                let mut z = T::zero();
                for c in 0..s.c {
                    z += (x.at(n, c, h, w) - m).exp();
                }
                for c in 0..s.c {
                    out.set(n, c, h, w, (x.at(n, c, h, w) - m).exp() / z);
                }
            }
        }
    }
    out
}

/// Takes the forward output s: dL/dx_c = s_c · (g_c − Σ_k g_k s_k) per pixel.
pub fn softmax_channels_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = out.shape;
    let mut gx = Tensor::zeros(s);
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let mut dot = T::zero();
                for c in 0..s.c {
                    dot += grad_out.at(n, c, h, w) * out.at(n, c, h, w);
                }
                for c in 0..s.c {
                    let v = out.at(n, c, h, w) * (grad_out.at(n, c, h, w) - dot);
                    gx.set(n, c, h, w, v);
                }
            }
        }
    }
    gx
}

/// Sum over the channel axis: (N, C, H, W) -> (N, 1, H, W).
pub fn sum_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = out.at(n, 0, h, w) + x.at(n, c, h, w);
                    out.set(n, 0, h, w, v);
                }
            }
        }
    }
    out
}

pub fn sum_channels_backward<T: Scalar>(x_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape);
    for n in 0..x_shape.n {
        for c in 0..x_shape.c {
            for h in 0..x_shape.h {
                for w in 0..x_shape.w {
                    gx.set(n, c, h, w, grad_out.at(n, 0, h, w));
                }
            }
        }
    }
    gx
}

/// Copy channels [from, to) into a new tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if from >= to || to > s.c {
        return Err(Error::InvalidArgument {
            op: "slice_channels",
            msg: format!("range [{from}, {to}) invalid for {} channels", s.c),
        });
    }
    let os = Shape::new(s.n, to - from, s.h, s.w);
    let mut out = Tensor::zeros(os);
    let plane = s.h * s.w;
    for n in 0..s.n {
        for (oc, c) in (from..to).enumerate() {
            let src = s.index(n, c, 0, 0);
            let dst = os.index(n, oc, 0, 0);
            out.data[dst..dst + plane].copy_from_slice(&x.data[src..src + plane]);
        }
    }
    Ok(out)
}

/// Concatenate along the channel axis; inverse of a sequence of
/// `slice_channels` calls.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::InvalidArgument {
        op: "concat_channels",
        msg: "no parts".into(),
    })?;
    let s0 = first.shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: s0.to_string(),
                rhs: s.to_string(),
            });
        }
        c_total += s.c;
    }
    let os = Shape::new(s0.n, c_total, s0.h, s0.w);
    let mut out = Tensor::zeros(os);
    let plane = s0.h * s0.w;
    for n in 0..s0.n {
        let mut oc = 0;
        for p in parts {
            for c in 0..p.shape().c {
                let src = p.shape().index(n, c, 0, 0);
                let dst = os.index(n, oc, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&p.data[src..src + plane]);
                oc += 1;
            }
        }
    }
    Ok(out)
}

/// Matrix product of two 2-axis values (tensors with N = C = 1).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape, b.shape);
    if sa.n != 1 || sa.c != 1 || sb.n != 1 || sb.c != 1 {
        return Err(Error::InvalidArgument {
            op: "matmul",
            msg: format!("expects 2-axis values, got {} and {}", sa, sb),
        });
    }
    if sa.w != sb.h {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: format!("{}x{}", sa.h, sa.w),
            rhs: format!("{}x{}", sb.h, sb.w),
        });
    }
    let (m, k, n) = (sa.h, sa.w, sb.w);
    let mut out = Tensor::zeros(Shape::new(1, 1, m, n));
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

/// Gradients of `matmul`: dA = G·Bᵀ, dB = Aᵀ·G.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k, n) = (a.shape.h, a.shape.w, b.shape.w);
    let mut ga = Tensor::zeros(a.shape);
    let mut gb = Tensor::zeros(b.shape);
    for i in 0..m {
        for p in 0..k {
            let mut acc = T::zero();
            for j in 0..n {
                acc += grad_out.data[i * n + j] * b.data[p * n + j];
            }
            ga.data[i * k + p] = acc;
        }
    }
    for p in 0..k {
        for j in 0..n {
            let mut acc = T::zero();
            for i in 0..m {
                acc += a.data[i * k + p] * grad_out.data[i * n + j];
            }
            gb.data[p * n + j] = acc;
        }
    }
    Ok((ga, gb))
}

/// Transpose of a 2-axis value.
pub fn transpose2<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape.h, a.shape.w);
    let mut out = Tensor::zeros(Shape::new(1, 1, n, m));
    for i in 0..m {
        for j in 0..n {
            out.data[j * m + i] = a.data[i * n + j];
        }
    }
    out
}

/// Largest |x − y| over all elements divided by the largest |y|; the global
/// relative disagreement used by the oracle-equivalence suites.
pub fn relative_diff<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> f64 {
    assert_eq!(x.shape, y.shape, "relative_diff: shape mismatch");
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (a, b) in x.data.iter().zip(&y.data) {
        num = num.max((a.to_f64() - b.to_f64()).abs());
        den = den.max(b.to_f64().abs());
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Deterministic uniform fill in [lo, hi) from the caller's RNG.
pub fn rand_uniform<T: Scalar, R: rand::Rng>(
    shape: Shape,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Tensor<T> {
    let data = (0..shape.count())
        .map(|_| T::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor { shape, data }
}
