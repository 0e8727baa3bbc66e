//! Instance mask prediction and the unified panoptic layer.
//!
//! Three interchangeable instance heads operate on RoI crops of the basis:
//!
//! * vector — a length-C_b embedding, channel-wise weighted sum;
//! * full — a projection `t` plus a dense 4x14x14 attention tensor read
//!   straight from the embedding (784 attention values per instance);
//! * factored — the same projection plus 16 attention factors; attention
//!   maps are assembled as Q_k = U_kᵀ Σ_k V_k from shared 4x14 factor
//!   matrices, cutting the per-instance attention values from 784 to 16.
//!
//! The panoptic layer is one 1x1 convolution over the basis whose weight
//! matrix concatenates static stuff columns with dynamic thing columns
//! (mean instance embeddings); all logits come out of a single matrix
//! multiplication, stuff channels first.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pyramid::BasisOutput;
use crate::tensor::{
    bilinear_resize, bilinear_resize_backward, eltwise_mul, matmul, matmul_backward, roi_align,
    roi_align_backward, sigmoid_scalar, sum_channels, sum_channels_backward, RoiBox, Scalar,
    Shape, Tensor,
};

/// Number of projected channels (bases) blended per instance.
pub const K_PROJ: usize = 4;
/// Spatial resolution of the attention maps.
pub const ATTN_RES: usize = 14;
/// Rank of the attention decomposition (rows of U_k, V_k).
pub const ATTN_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Vector,
    Full,
    Factored,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<HeadKind> {
        match s {
            "vector" => Ok(HeadKind::Vector),
            "full" => Ok(HeadKind::Full),
            "factored" => Ok(HeadKind::Factored),
            other => Err(Error::Config(format!(
                "unknown head kind '{other}' (expected vector|full|factored)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Vector => "vector",
            HeadKind::Full => "full",
            HeadKind::Factored => "factored",
        }
    }
}

/// How a raw dense embedding read from E_l decomposes into head parameters.
///
/// The vector head is a single length-C_b vector serving both the mask and
/// the panoptic thing column. The full/factored heads carry a projection
/// `t` (length C_b·K) plus their attention parameters; in panoptic mode a
/// leading length-C_b vector part is prepended for the thing column, since
/// the dynamic weight columns must match the basis width.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingLayout {
    pub head: HeadKind,
    pub basis_width: usize,
    pub panoptic: bool,
}

impl EmbeddingLayout {
    pub fn dim(&self) -> usize {
        let mask = match self.head {
            HeadKind::Vector => self.basis_width,
            HeadKind::Full => self.basis_width * K_PROJ + K_PROJ * ATTN_RES * ATTN_RES,
            HeadKind::Factored => self.basis_width * K_PROJ + K_PROJ * ATTN_RANK,
        };
        mask + self.pano_offset()
    }

    /// Where the mask parameters start within the raw embedding.
    fn pano_offset(&self) -> usize {
        if self.panoptic && self.head != HeadKind::Vector {
            self.basis_width
        } else {
            0
        }
    }

    /// The slice used as the panoptic thing column, when panoptic mode is on.
    pub fn pano_part<'a, T>(&self, raw: &'a [T]) -> Option<&'a [T]> {
        self.panoptic.then(|| &raw[0..self.basis_width])
    }

    pub fn split<'a, T: Scalar>(&self, raw: &'a [T]) -> Result<MaskEmbedding<'a, T>> {
        if raw.len() != self.dim() {
            return Err(Error::InvalidArgument {
                op: "EmbeddingLayout::split",
                msg: format!("embedding length {} but layout needs {}", raw.len(), self.dim()),
            });
        }
        let m = &raw[self.pano_offset()..];
        let tk = self.basis_width * K_PROJ;
        Ok(match self.head {
            HeadKind::Vector => MaskEmbedding::Vector(&m[0..self.basis_width]),
            HeadKind::Full => MaskEmbedding::Full {
                t: &m[0..tk],
                q: &m[tk..tk + K_PROJ * ATTN_RES * ATTN_RES],
            },
            HeadKind::Factored => MaskEmbedding::Factored {
                t: &m[0..tk],
                s: &m[tk..tk + K_PROJ * ATTN_RANK],
            },
        })
    }
}

/// Borrowed view of the mask-head parameters inside a raw embedding.
#[derive(Debug, Clone, Copy)]
pub enum MaskEmbedding<'a, T: Scalar> {
    Vector(&'a [T]),
    Full { t: &'a [T], q: &'a [T] },
    Factored { t: &'a [T], s: &'a [T] },
}

/// Shared attention factor matrices U_k, V_k (4 x 14 each, K_PROJ pairs),
/// network parameters shared by every instance.
#[derive(Debug, Clone)]
pub struct SharedFactors<T: Scalar> {
    pub u: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> SharedFactors<T> {
    pub fn init<R: Rng>(rng: &mut R) -> SharedFactors<T> {
        let normal = Normal::new(0.0, (1.0 / ATTN_RES as f64).sqrt()).unwrap();
        let mk = |rng: &mut R| {
            let data = (0..ATTN_RANK * ATTN_RES)
                .map(|_| T::from_f64(normal.sample(rng)))
                .collect();
            Tensor::from_vec(Shape::new(1, 1, ATTN_RANK, ATTN_RES), data).unwrap()
        };
        SharedFactors {
            u: (0..K_PROJ).map(|_| mk(rng)).collect(),
            v: (0..K_PROJ).map(|_| mk(rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> SharedFactors<T> {
        SharedFactors {
            u: self.u.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: self.v.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Total shared parameter count (2 · K_PROJ · 4 · 14 = 448).
    pub fn count(&self) -> usize {
        self.u.iter().chain(&self.v).map(|t| t.data().len()).sum()
    }
}

/// Static stuff columns of the unified panoptic weight matrix, with an
/// optional bias on the stuff channels (zero-initialized).
#[derive(Debug, Clone)]
pub struct PanopticHead<T: Scalar> {
    /// (C_b x C_stuff) as a 2-axis value.
    pub w_stuff: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> PanopticHead<T> {
    pub fn init<R: Rng>(basis_width: usize, c_stuff: usize, rng: &mut R) -> PanopticHead<T> {
        let normal = Normal::new(0.0, (1.0 / basis_width as f64).sqrt()).unwrap();
        let data = (0..basis_width * c_stuff)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        PanopticHead {
            w_stuff: Tensor::matrix(basis_width, c_stuff, data).unwrap(),
            bias: Some(Tensor::zeros(Shape::new(1, 1, 1, c_stuff))),
        }
    }

    pub fn c_stuff(&self) -> usize {
        self.w_stuff.shape().w
    }

    pub fn basis_width(&self) -> usize {
        self.w_stuff.shape().h
    }
}

/// RoI crop of the basis map for one instance box (image coordinates).
pub fn crop_basis<T: Scalar>(
    f: &BasisOutput<T>,
    b: RoiBox,
    crop_size: usize,
) -> Result<Tensor<T>> {
    roi_align(&f.f, b, f.stride, crop_size, crop_size)
}

pub fn crop_basis_backward<T: Scalar>(
    f: &BasisOutput<T>,
    b: RoiBox,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    roi_align_backward(f.f.shape(), b, f.stride, grad_out)
}

/// Project the cropped bases (1, D, S, S) to K_PROJ channels with the
/// flattened 1x1 kernel `t` (row-major D x K).
pub fn project<T: Scalar>(r: &Tensor<T>, t: &[T], k_proj: usize) -> Result<Tensor<T>> {
    let s = r.shape();
    let d = s.c;
    if t.len() != d * k_proj {
        return Err(Error::InvalidArgument {
            op: "project",
            msg: format!("t has length {}, needs D*K = {}", t.len(), d * k_proj),
        });
    }
    let os = Shape::new(s.n, k_proj, s.h, s.w);
    let mut out = Tensor::zeros(os);
    let plane = s.h * s.w;
    for n in 0..s.n {
        for k in 0..k_proj {
            let dst = os.index(n, k, 0, 0);
            for dch in 0..d {
                let tv = t[dch * k_proj + k];
                let src = s.index(n, dch, 0, 0);
                for i in 0..plane {
                    out.data_mut()[dst + i] += tv * r.data()[src + i];
                }
            }
        }
    }
    Ok(out)
}

pub fn project_backward<T: Scalar>(
    r: &Tensor<T>,
    t: &[T],
    k_proj: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let s = r.shape();
    let d = s.c;
    let mut grad_r = Tensor::zeros(s);
    let mut grad_t = vec![T::zero(); t.len()];
    let plane = s.h * s.w;
    for n in 0..s.n {
        for k in 0..k_proj {
            let g0 = grad_out.shape().index(n, k, 0, 0);
            for dch in 0..d {
                let src = s.index(n, dch, 0, 0);
                let tv = t[dch * k_proj + k];
                let mut acc = T::zero();
                for i in 0..plane {
                    let g = grad_out.data()[g0 + i];
                    grad_r.data_mut()[src + i] += tv * g;
                    acc += g * r.data()[src + i];
                }
                grad_t[dch * k_proj + k] += acc;
            }
        }
    }
    (grad_r, grad_t)
}

/// Assemble per-instance attention maps Q_k = U_kᵀ diag(s_k) V_k, one
/// 14x14 map per projected channel, each of rank at most ATTN_RANK.
pub fn assemble_attention<T: Scalar>(s: &[T], shared: &SharedFactors<T>) -> Result<Tensor<T>> {
    if s.len() != K_PROJ * ATTN_RANK {
        return Err(Error::InvalidArgument {
            op: "assemble_attention",
            msg: format!("s has length {}, needs {}", s.len(), K_PROJ * ATTN_RANK),
        });
    }
    let mut q = Tensor::zeros(Shape::new(1, K_PROJ, ATTN_RES, ATTN_RES));
    for k in 0..K_PROJ {
        let u = &shared.u[k];
        let v = &shared.v[k];
        for dch in 0..ATTN_RANK {
            let sv = s[k * ATTN_RANK + dch];
            for p in 0..ATTN_RES {
                let up = u.at(0, 0, dch, p) * sv;
                for qq in 0..ATTN_RES {
                    let cur = q.at(0, k, p, qq);
                    q.set(0, k, p, qq, cur + up * v.at(0, 0, dch, qq));
                }
            }
        }
    }
    Ok(q)
}

pub fn assemble_attention_backward<T: Scalar>(
    s: &[T],
    shared: &SharedFactors<T>,
    grad_q: &Tensor<T>,
) -> (Vec<T>, SharedFactors<T>) {
    let mut grad_s = vec![T::zero(); s.len()];
    let mut grad_shared = shared.zeros_like();
    for k in 0..K_PROJ {
        let u = &shared.u[k];
        let v = &shared.v[k];
        for dch in 0..ATTN_RANK {
            let sv = s[k * ATTN_RANK + dch];
            let mut gs = T::zero();
            for p in 0..ATTN_RES {
                let up = u.at(0, 0, dch, p);
                let mut gu = T::zero();
                for qq in 0..ATTN_RES {
                    let g = grad_q.at(0, k, p, qq);
                    let vq = v.at(0, 0, dch, qq);
                    gs += g * up * vq;
                    gu += g * vq;
                    let cur = grad_shared.v[k].at(0, 0, dch, qq);
                    grad_shared.v[k].set(0, 0, dch, qq, cur + g * up * sv);
                }
                let cur = grad_shared.u[k].at(0, 0, dch, p);
                grad_shared.u[k].set(0, 0, dch, p, cur + gu * sv);
            }
            grad_s[k * ATTN_RANK + dch] = gs;
        }
    }
    (grad_s, grad_shared)
}

/// Blend projected crop channels with (bilinearly resized) attention maps:
/// Σ_k r_proj[k] ∘ resize(q[k]). Returns raw mask logits (1, 1, S, S);
/// sigmoid is applied downstream by the loss or at emission.
pub fn blend<T: Scalar>(r_proj: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
    let s = r_proj.shape();
    if q.shape().c != s.c {
        return Err(Error::ShapeMismatch {
            op: "blend",
            lhs: s.to_string(),
            rhs: q.shape().to_string(),
        });
    }
    let qr = bilinear_resize(q, s.h, s.w);
    Ok(sum_channels(&eltwise_mul(r_proj, &qr)?))
}

pub fn blend_backward<T: Scalar>(
    r_proj: &Tensor<T>,
    q: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = r_proj.shape();
    let qr = bilinear_resize(q, s.h, s.w);
    let grad_prod = sum_channels_backward(s, grad_out);
    let (grad_r, grad_qr) = crate::tensor::eltwise_mul_backward(r_proj, &qr, &grad_prod)?;
    let grad_q = bilinear_resize_backward(q.shape(), &grad_qr);
    Ok((grad_r, grad_q))
}

/// Channel-wise weighted sum of the crop: Σ_c e[c] · r[c].
pub fn vector_blend<T: Scalar>(r: &Tensor<T>, e: &[T]) -> Result<Tensor<T>> {
    let s = r.shape();
    if e.len() != s.c {
        return Err(Error::InvalidArgument {
            op: "vector_blend",
            msg: format!("embedding length {} but crop has {} channels", e.len(), s.c),
        });
    }
    let os = Shape::new(s.n, 1, s.h, s.w);
    let mut out = Tensor::zeros(os);
    let plane = s.h * s.w;
    for n in 0..s.n {
        let dst = os.index(n, 0, 0, 0);
        for (c, &ev) in e.iter().enumerate() {
            let src = s.index(n, c, 0, 0);
            for i in 0..plane {
                out.data_mut()[dst + i] += ev * r.data()[src + i];
            }
        }
    }
    Ok(out)
}

pub fn vector_blend_backward<T: Scalar>(
    r: &Tensor<T>,
    e: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let s = r.shape();
    let mut grad_r = Tensor::zeros(s);
    let mut grad_e = vec![T::zero(); e.len()];
    let plane = s.h * s.w;
    for n in 0..s.n {
        let g0 = grad_out.shape().index(n, 0, 0, 0);
        for (c, &ev) in e.iter().enumerate() {
            let src = s.index(n, c, 0, 0);
            let mut acc = T::zero();
            for i in 0..plane {
                let g = grad_out.data()[g0 + i];
                grad_r.data_mut()[src + i] += ev * g;
                acc += g * r.data()[src + i];
            }
            grad_e[c] += acc;
        }
    }
    (grad_r, grad_e)
}

/// Arithmetic mean of a non-empty set of equal-length embeddings.
pub fn mean_embedding<T: Scalar>(es: &[Vec<T>]) -> Result<Vec<T>> {
    let first = es.first().ok_or(Error::InvalidArgument {
        op: "mean_embedding",
        msg: "no embeddings assigned (N_c = 0 contributes no thing channel)".into(),
    })?;
    let len = first.len();
    let mut out = vec![T::zero(); len];
    for e in es {
        if e.len() != len {
            return Err(Error::InvalidArgument {
                op: "mean_embedding",
                msg: format!("embedding lengths differ: {} vs {}", len, e.len()),
            });
        }
        for (o, &v) in out.iter_mut().zip(e) {
            *o += v;
        }
    }
    let inv = T::one() / T::from_f64(es.len() as f64);
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// Unified panoptic logits: per-pixel inner products of the basis with the
/// columns of [W_stuff, ē_1 .. ē_k], computed as one matrix multiplication.
/// Stuff channels come first; the optional bias applies to them only.
pub fn panoptic_logits<T: Scalar>(
    f: &Tensor<T>,
    head: &PanopticHead<T>,
    things: &[Vec<T>],
) -> Result<Tensor<T>> {
    let s = f.shape();
    let cb = head.basis_width();
    if s.c != cb {
        return Err(Error::ShapeMismatch {
            op: "panoptic_logits",
            lhs: format!("basis {}", s),
            rhs: format!("head expects {} channels", cb),
        });
    }
    for (i, e) in things.iter().enumerate() {
        if e.len() != cb {
            return Err(Error::InvalidArgument {
                op: "panoptic_logits",
                msg: format!("thing embedding {i} has length {}, needs {}", e.len(), cb),
            });
        }
    }
    let w_pano = assemble_w_pano(head, things);
    let f_flat = f.reshape(Shape::new(1, 1, cb, s.h * s.w))?;
    let y = matmul(&crate::tensor::transpose2(&w_pano), &f_flat)?;
    let c_total = head.c_stuff() + things.len();
    let mut out = y.reshape(Shape::new(1, c_total, s.h, s.w))?;
    if let Some(b) = &head.bias {
        for c in 0..head.c_stuff() {
            let bv = b.data()[c];
            let base = out.shape().index(0, c, 0, 0);
            for v in &mut out.data_mut()[base..base + s.h * s.w] {
                *v += bv;
            }
        }
    }
    Ok(out)
}

fn assemble_w_pano<T: Scalar>(head: &PanopticHead<T>, things: &[Vec<T>]) -> Tensor<T> {
    let cb = head.basis_width();
    let c_total = head.c_stuff() + things.len();
    let mut w = Tensor::zeros(Shape::new(1, 1, cb, c_total));
    for d in 0..cb {
        for c in 0..head.c_stuff() {
            w.set(0, 0, d, c, head.w_stuff.at(0, 0, d, c));
        }
        for (i, e) in things.iter().enumerate() {
            w.set(0, 0, d, head.c_stuff() + i, e[d]);
        }
    }
    w
}

pub struct PanopticGrads<T: Scalar> {
    pub grad_f: Tensor<T>,
    pub grad_w_stuff: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
    pub grad_things: Vec<Vec<T>>,
}

pub fn panoptic_logits_backward<T: Scalar>(
    f: &Tensor<T>,
    head: &PanopticHead<T>,
    things: &[Vec<T>],
    grad_out: &Tensor<T>,
) -> Result<PanopticGrads<T>> {
    let s = f.shape();
    let cb = head.basis_width();
    let c_total = head.c_stuff() + things.len();
    let w_pano = assemble_w_pano(head, things);
    let f_flat = f.reshape(Shape::new(1, 1, cb, s.h * s.w))?;
    let g_flat = grad_out.reshape(Shape::new(1, 1, c_total, s.h * s.w))?;
    // y = W_panoᵀ · F  =>  dW_panoᵀ = G·Fᵀ, dF = W_pano·G
    let (g_wt, grad_f_flat) = matmul_backward(&crate::tensor::transpose2(&w_pano), &f_flat, &g_flat)?;
    let g_w = crate::tensor::transpose2(&g_wt);
    let grad_f = grad_f_flat.reshape(s)?;

    let mut grad_w_stuff = Tensor::zeros(head.w_stuff.shape());
    let mut grad_things = vec![vec![T::zero(); cb]; things.len()];
    for d in 0..cb {
        for c in 0..head.c_stuff() {
            grad_w_stuff.set(0, 0, d, c, g_w.at(0, 0, d, c));
        }
        for i in 0..things.len() {
            grad_things[i][d] = g_w.at(0, 0, d, head.c_stuff() + i);
        }
    }
    let grad_bias = head.bias.as_ref().map(|b| {
        let mut gb = Tensor::zeros(b.shape());
        for c in 0..head.c_stuff() {
            let mut acc = T::zero();
            let base = grad_out.shape().index(0, c, 0, 0);
            for &g in &grad_out.data()[base..base + s.h * s.w] {
                acc += g;
            }
            gb.data_mut()[c] = acc;
        }
        gb
    });
    Ok(PanopticGrads {
        grad_f,
        grad_w_stuff,
        grad_bias,
        grad_things,
    })
}

/// Decoded panoptic labeling: the winning channel per pixel, stuff-first
/// channel order, ties broken toward the lowest channel index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    pub h: usize,
    pub w: usize,
    pub c_stuff: usize,
    /// Winning channel index per pixel (row-major).
    pub channel: Vec<u32>,
}

impl PanopticMap {
    /// 0 for stuff pixels, i+1 for pixels won by thing channel i.
    pub fn instance_id(&self, idx: usize) -> u32 {
        let c = self.channel[idx] as usize;
        if c < self.c_stuff {
            0
        } else {
            (c - self.c_stuff + 1) as u32
        }
    }
}

/// Per-pixel argmax over all channels of a single-sample logits tensor.
pub fn panoptic_decode<T: Scalar>(logits: &Tensor<T>, c_stuff: usize) -> PanopticMap {
    let s = logits.shape();
    let mut channel = vec![0u32; s.h * s.w];
    for h in 0..s.h {
        for w in 0..s.w {
            let mut best = 0usize;
            let mut best_v = logits.at(0, 0, h, w);
            for c in 1..s.c {
                let v = logits.at(0, c, h, w);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            channel[h * s.w + w] = best as u32;
        }
    }
    PanopticMap {
        h: s.h,
        w: s.w,
        c_stuff,
        channel,
    }
}

/// Per-instance and shared parameter counts for a head configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub head: HeadKind,
    /// Attention values carried per instance (784 full, 16 factored).
    pub per_instance_attention: usize,
    /// Projection values carried per instance (t, or the vector itself).
    pub per_instance_projection: usize,
    pub per_instance_total: usize,
    /// Values shared across instances (U/V matrices for factored).
    pub shared: usize,
}

pub fn count_params(head: HeadKind, basis_width: usize) -> ParamCounts {
    let (attn, proj, shared) = match head {
        HeadKind::Vector => (0, basis_width, 0),
        HeadKind::Full => (K_PROJ * ATTN_RES * ATTN_RES, basis_width * K_PROJ, 0),
        HeadKind::Factored => (
            K_PROJ * ATTN_RANK,
            basis_width * K_PROJ,
            2 * K_PROJ * ATTN_RANK * ATTN_RES,
        ),
    };
    ParamCounts {
        head,
        per_instance_attention: attn,
        per_instance_projection: proj,
        per_instance_total: attn + proj,
        shared,
    }
}

/// Deterministic color for a decoded channel so panoptic maps render the
/// same everywhere: stuff gets muted tones, instances bright ones.
pub fn channel_color(map: &PanopticMap, channel: u32) -> [u8; 3] {
    let c = channel as u64;
    if (channel as usize) < map.c_stuff {
        let g = 60 + ((c * 97) % 120) as u8;
        [g / 2, g, (g as u16 * 3 / 2).min(255) as u8]
    } else {
        let i = c - map.c_stuff as u64;
        [
            (80 + (i * 131) % 176) as u8,
            (40 + (i * 53) % 180) as u8,
            (60 + (i * 197) % 160) as u8,
        ]
    }
}

/// Render the decoded map as an RGB byte plane (row-major, 3 bytes/pixel).
pub fn panoptic_to_rgb(map: &PanopticMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.h * map.w * 3);
    for &ch in &map.channel {
        out.extend_from_slice(&channel_color(map, ch));
    }
    out
}

/// Render single-instance mask logits as grayscale after sigmoid (0-255).
pub fn mask_to_gray<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    logits
        .data()
        .iter()
        .map(|&v| (sigmoid_scalar(v).to_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_uniform, relative_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn project_identity_rows_pass_through() {
        let mut r = rng(70);
        // K_proj = C_b = 4 with t = identity
        let x: Tensor<f64> = rand_uniform(Shape::new(1, 4, 5, 5), -1.0, 1.0, &mut r);
        let mut t = vec![0.0; 16];
        for d in 0..4 {
            t[d * 4 + d] = 1.0;
        }
        let y = project(&x, &t, 4).unwrap();
        assert!(relative_diff(&y, &x) < 1e-12);
    }

    #[test]
    fn project_constant_input_gives_column_sums() {
        let mut r = rng(71);
        let x = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 2.5);
        let t: Vec<f64> = (0..3 * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = project(&x, &t, 4).unwrap();
        for k in 0..4 {
            let col_sum: f64 = (0..3).map(|d| t[d * 4 + k]).sum();
            for h in 0..4 {
                for w in 0..4 {
                    assert!((y.at(0, k, h, w) - col_sum * 2.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn project_matches_per_pixel_matvec_oracle() {
        let mut r = rng(72);
        let x: Tensor<f64> = rand_uniform(Shape::new(1, 6, 3, 4), -1.0, 1.0, &mut r);
        let t: Vec<f64> = (0..6 * K_PROJ).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = project(&x, &t, K_PROJ).unwrap();
        for h in 0..3 {
            for w in 0..4 {
                for k in 0..K_PROJ {
                    let mut acc = 0.0;
                    for d in 0..6 {
                        acc += t[d * K_PROJ + k] * x.at(0, d, h, w);
                    }
                    assert!((y.at(0, k, h, w) - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn project_rejects_bad_length() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2));
        assert!(project(&x, &[0.0; 7], 4).is_err());
    }

    #[test]
    fn attention_one_hot_gives_outer_product() {
        let mut r = rng(73);
        let shared = SharedFactors::<f64>::init(&mut r);
        let (k, d) = (2usize, 3usize);
        let mut s = vec![0.0; K_PROJ * ATTN_RANK];
        s[k * ATTN_RANK + d] = 1.0;
        let q = assemble_attention(&s, &shared).unwrap();
        for kk in 0..K_PROJ {
            for p in 0..ATTN_RES {
                for qq in 0..ATTN_RES {
                    let want = if kk == k {
                        shared.u[k].at(0, 0, d, p) * shared.v[k].at(0, 0, d, qq)
                    } else {
                        0.0
                    };
                    assert!((q.at(0, kk, p, qq) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_zero_factors_give_zero() {
        let mut r = rng(74);
        let shared = SharedFactors::<f32>::init(&mut r);
        let q = assemble_attention(&[0.0; 16], &shared).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_matches_dense_triple_product_oracle() {
        let mut r = rng(75);
        let shared = SharedFactors::<f64>::init(&mut r);
        let s: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let q = assemble_attention(&s, &shared).unwrap();
        // dense 14x4 · 4x4 · 4x14 product, written independently
        for k in 0..K_PROJ {
            for p in 0..ATTN_RES {
                for qq in 0..ATTN_RES {
                    let mut acc = 0.0;
                    for d in 0..ATTN_RANK {
                        acc += shared.u[k].at(0, 0, d, p)
                            * s[k * ATTN_RANK + d]
                            * shared.v[k].at(0, 0, d, qq);
                    }
                    assert!((q.at(0, k, p, qq) - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn attention_is_linear_in_s() {
        let mut r = rng(76);
        let shared = SharedFactors::<f64>::init(&mut r);
        let s1: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s2: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (alpha, beta) = (0.4, -1.7);
        let mix: Vec<f64> = s1
            .iter()
            .zip(&s2)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let qm = assemble_attention(&mix, &shared).unwrap();
        let q1 = assemble_attention(&s1, &shared).unwrap();
        let q2 = assemble_attention(&s2, &shared).unwrap();
        let want = crate::tensor::add(&q1.scale(alpha), &q2.scale(beta)).unwrap();
        assert!(relative_diff(&qm, &want) < 1e-12);
    }

    /// Jacobi eigenvalue iteration on QᵀQ; eigenvalues are squared singular
    /// values. Test-only oracle, independent of the assembly path.
    fn singular_values(m: &Tensor<f64>, k: usize) -> Vec<f64> {
        let n = ATTN_RES;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..n {
                    acc += m.at(0, k, p, i) * m.at(0, k, p, j);
                }
                a[i * n + j] = acc;
            }
        }
        for _sweep in 0..60 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    let apq = a[i * n + j];
                    if apq.abs() < 1e-18 {
                        continue;
                    }
                    let app = a[i * n + i];
                    let aqq = a[j * n + j];
                    let theta = 0.5 * (aqq - app) / apq;
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for l in 0..n {
                        let ail = a[i * n + l];
                        let ajl = a[j * n + l];
                        a[i * n + l] = c * ail - s * ajl;
                        a[j * n + l] = s * ail + c * ajl;
                    }
                    for l in 0..n {
                        let ali = a[l * n + i];
                        let alj = a[l * n + j];
                        a[l * n + i] = c * ali - s * alj;
                        a[l * n + j] = s * ali + c * alj;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i].max(0.0).sqrt()).collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev
    }

    #[test]
    fn assembled_attention_has_rank_at_most_four() {
        let mut r = rng(77);
        let shared = SharedFactors::<f64>::init(&mut r);
        for _ in 0..20 {
            let s: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
            let q = assemble_attention(&s, &shared).unwrap();
            for k in 0..K_PROJ {
                let sv = singular_values(&q, k);
                assert!(
                    sv[ATTN_RANK] <= 1e-5 * sv[0].max(1e-30),
                    "sigma_5 = {} vs sigma_1 = {}",
                    sv[ATTN_RANK],
                    sv[0]
                );
            }
        }
    }

    #[test]
    fn blend_with_ones_is_channel_sum() {
        let mut r = rng(78);
        let rp: Tensor<f64> = rand_uniform(Shape::new(1, K_PROJ, 14, 14), -1.0, 1.0, &mut r);
        let q = Tensor::<f64>::ones(Shape::new(1, K_PROJ, ATTN_RES, ATTN_RES));
        let y = blend(&rp, &q).unwrap();
        let want = sum_channels(&rp);
        assert!(relative_diff(&y, &want) < 1e-12);
    }

    #[test]
    fn blend_left_half_indicator_masks_right() {
        // one projected channel, q = indicator of the left half, no resize
        let mut r = rng(79);
        let rp: Tensor<f64> = rand_uniform(Shape::new(1, 1, 14, 14), -1.0, 1.0, &mut r);
        let mut q = Tensor::<f64>::zeros(Shape::new(1, 1, 14, 14));
        for h in 0..14 {
            for w in 0..7 {
                q.set(0, 0, h, w, 1.0);
            }
        }
        let y = blend(&rp, &q).unwrap();
        for h in 0..14 {
            for w in 7..14 {
                assert_eq!(y.at(0, 0, h, w), 0.0);
            }
            for w in 0..7 {
                assert_eq!(y.at(0, 0, h, w), rp.at(0, 0, h, w));
            }
        }
    }

    #[test]
    fn blend_matches_scalar_loop_oracle() {
        let mut r = rng(80);
        let rp: Tensor<f64> = rand_uniform(Shape::new(1, K_PROJ, 28, 28), -1.0, 1.0, &mut r);
        let q: Tensor<f64> =
            rand_uniform(Shape::new(1, K_PROJ, ATTN_RES, ATTN_RES), -1.0, 1.0, &mut r);
        let y = blend(&rp, &q).unwrap();
        let qr = bilinear_resize(&q, 28, 28);
        for h in 0..28 {
            for w in 0..28 {
                let mut acc = 0.0;
                for k in 0..K_PROJ {
                    acc += rp.at(0, k, h, w) * qr.at(0, k, h, w);
                }
                assert!((y.at(0, 0, h, w) - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn vector_blend_basics_and_oracle() {
        let mut r = rng(81);
        let x: Tensor<f64> = rand_uniform(Shape::new(1, 5, 4, 4), -1.0, 1.0, &mut r);
        // one-hot selects a channel
        let mut e = vec![0.0; 5];
        e[2] = 1.0;
        let y = vector_blend(&x, &e).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                assert_eq!(y.at(0, 0, h, w), x.at(0, 2, h, w));
            }
        }
        // zero embedding, zero logits
        let y = vector_blend(&x, &[0.0; 5]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        // random case against a scalar loop
        let e: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = vector_blend(&x, &e).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                let mut acc = 0.0;
                for c in 0..5 {
                    acc += e[c] * x.at(0, c, h, w);
                }
                assert!((y.at(0, 0, h, w) - acc).abs() < 1e-12);
            }
        }
        // length mismatch rejected
        assert!(vector_blend(&x, &[0.0; 4]).is_err());
    }

    #[test]
    fn blend_of_constant_attention_equals_vector_blend() {
        // constant q per channel folds through the projection into a
        // vector embedding e_d = Σ_k t[d,k]·c_k
        let mut r = rng(82);
        let d = 6;
        let crop: Tensor<f64> = rand_uniform(Shape::new(1, d, 16, 16), -1.0, 1.0, &mut r);
        let t: Vec<f64> = (0..d * K_PROJ).map(|_| r.gen_range(-1.0..1.0)).collect();
        let consts: Vec<f64> = (0..K_PROJ).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut q = Tensor::<f64>::zeros(Shape::new(1, K_PROJ, ATTN_RES, ATTN_RES));
        for k in 0..K_PROJ {
            for p in 0..ATTN_RES {
                for qq in 0..ATTN_RES {
                    q.set(0, k, p, qq, consts[k]);
                }
            }
        }
        let via_blend = blend(&project(&crop, &t, K_PROJ).unwrap(), &q).unwrap();
        let e: Vec<f64> = (0..d)
            .map(|dd| (0..K_PROJ).map(|k| t[dd * K_PROJ + k] * consts[k]).sum())
            .collect();
        let via_vector = vector_blend(&crop, &e).unwrap();
        assert!(relative_diff(&via_blend, &via_vector) < 1e-10);
    }

    #[test]
    fn mean_embedding_cases() {
        let single = vec![vec![1.0f64, 2.0, 3.0]];
        assert_eq!(mean_embedding(&single).unwrap(), vec![1.0, 2.0, 3.0]);
        let opposite = vec![vec![1.0f64, -2.0], vec![-1.0, 2.0]];
        assert_eq!(mean_embedding(&opposite).unwrap(), vec![0.0, 0.0]);
        let mut r = rng(83);
        let es: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let m = mean_embedding(&es).unwrap();
        for c in 0..4 {
            let want: f64 = es.iter().map(|e| e[c]).sum::<f64>() / 5.0;
            assert!((m[c] - want).abs() < 1e-12);
        }
        assert!(mean_embedding::<f64>(&[]).is_err());
    }

    #[test]
    fn panoptic_logits_no_things_is_pure_semantic() {
        let mut r = rng(84);
        let head = PanopticHead::<f64>::init(8, 5, &mut r);
        let f: Tensor<f64> = rand_uniform(Shape::new(1, 8, 6, 6), -1.0, 1.0, &mut r);
        let y = panoptic_logits(&f, &head, &[]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, 6, 6));
    }

    #[test]
    fn panoptic_one_hot_basis_reads_embedding() {
        let mut r = rng(85);
        let mut head = PanopticHead::<f64>::init(8, 3, &mut r);
        head.bias = None;
        let mut f = Tensor::<f64>::zeros(Shape::new(1, 8, 4, 4));
        let c = 5;
        for h in 0..4 {
            for w in 0..4 {
                f.set(0, c, h, w, 1.0);
            }
        }
        let e: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = panoptic_logits(&f, &head, std::slice::from_ref(&e)).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                assert!((y.at(0, 3, h, w) - e[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn panoptic_matches_per_pixel_matvec_oracle() {
        let mut r = rng(86);
        let head = PanopticHead::<f64>::init(6, 4, &mut r);
        let f: Tensor<f64> = rand_uniform(Shape::new(1, 6, 5, 3), -1.0, 1.0, &mut r);
        let things: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let y = panoptic_logits(&f, &head, &things).unwrap();
        for h in 0..5 {
            for w in 0..3 {
                for c in 0..4 {
                    let mut acc = head.bias.as_ref().unwrap().data()[c];
                    for d in 0..6 {
                        acc += head.w_stuff.at(0, 0, d, c) * f.at(0, d, h, w);
                    }
                    assert!((y.at(0, c, h, w) - acc).abs() < 1e-5);
                }
                for (i, e) in things.iter().enumerate() {
                    let mut acc = 0.0;
                    for d in 0..6 {
                        acc += e[d] * f.at(0, d, h, w);
                    }
                    assert!((y.at(0, 4 + i, h, w) - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn stuff_logits_ignore_thing_list() {
        let mut r = rng(87);
        let head = PanopticHead::<f64>::init(6, 4, &mut r);
        let f: Tensor<f64> = rand_uniform(Shape::new(1, 6, 4, 4), -1.0, 1.0, &mut r);
        let no_things = panoptic_logits(&f, &head, &[]).unwrap();
        let things: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let with_things = panoptic_logits(&f, &head, &things).unwrap();
        for c in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(no_things.at(0, c, h, w), with_things.at(0, c, h, w));
                }
            }
        }
    }

    #[test]
    fn panoptic_rejects_wrong_embedding_length() {
        let mut r = rng(88);
        let head = PanopticHead::<f64>::init(6, 4, &mut r);
        let f = Tensor::<f64>::zeros(Shape::new(1, 6, 2, 2));
        assert!(panoptic_logits(&f, &head, &[vec![0.0; 5]]).is_err());
    }

    #[test]
    fn decode_uniform_stuff_and_two_instances() {
        let mut logits = Tensor::<f32>::zeros(Shape::new(1, 4, 4, 6));
        // stuff channel 0 wins everywhere by default
        for h in 0..4 {
            for w in 0..6 {
                logits.set(0, 0, h, w, 1.0);
            }
        }
        let m = panoptic_decode(&logits, 2);
        assert!(m.channel.iter().all(|&c| c == 0));
        assert!((0..24).all(|i| m.instance_id(i) == 0));

        // two disjoint thing-dominant regions
        for h in 0..2 {
            for w in 0..3 {
                logits.set(0, 2, h, w, 5.0);
            }
        }
        for h in 2..4 {
            for w in 3..6 {
                logits.set(0, 3, h, w, 5.0);
            }
        }
        let m = panoptic_decode(&logits, 2);
        assert_eq!(m.instance_id(0), 1);
        assert_eq!(m.instance_id(3 * 6 + 5), 2);
        assert_eq!(m.instance_id(5), 0);
    }

    #[test]
    fn decode_matches_argmax_oracle_and_tie_break() {
        let mut r = rng(89);
        let logits: Tensor<f64> = rand_uniform(Shape::new(1, 5, 6, 6), -1.0, 1.0, &mut r);
        let m = panoptic_decode(&logits, 2);
        for h in 0..6 {
            for w in 0..6 {
                let mut best = 0;
                for c in 1..5 {
                    if logits.at(0, c, h, w) > logits.at(0, best, h, w) {
                        best = c;
                    }
                }
                assert_eq!(m.channel[h * 6 + w], best as u32);
            }
        }
        // exact ties go to the lowest channel
        let tied = Tensor::<f64>::full(Shape::new(1, 3, 1, 1), 0.25);
        assert_eq!(panoptic_decode(&tied, 1).channel[0], 0);
    }

    #[test]
    fn decode_is_shift_invariant() {
        let mut r = rng(90);
        let logits: Tensor<f64> = rand_uniform(Shape::new(1, 5, 5, 5), -1.0, 1.0, &mut r);
        let shifted = logits.map(|v| v + 7.5);
        assert_eq!(panoptic_decode(&logits, 2), panoptic_decode(&shifted, 2));
    }

    #[test]
    fn parameter_accounting() {
        let full = count_params(HeadKind::Full, 32);
        assert_eq!(full.per_instance_attention, 784);
        let factored = count_params(HeadKind::Factored, 32);
        assert_eq!(factored.per_instance_attention, 16);
        assert_eq!(factored.shared, 448);
        let vector = count_params(HeadKind::Vector, 32);
        assert_eq!(vector.per_instance_total, 32);
        // both attention heads carry t of length C_b * K
        assert_eq!(full.per_instance_projection, 128);
        assert_eq!(factored.per_instance_projection, 128);
    }

    #[test]
    fn embedding_layout_dims() {
        let l = EmbeddingLayout {
            head: HeadKind::Vector,
            basis_width: 32,
            panoptic: true,
        };
        assert_eq!(l.dim(), 32);
        let l = EmbeddingLayout {
            head: HeadKind::Factored,
            basis_width: 32,
            panoptic: false,
        };
        assert_eq!(l.dim(), 128 + 16);
        let l = EmbeddingLayout {
            head: HeadKind::Factored,
            basis_width: 32,
            panoptic: true,
        };
        assert_eq!(l.dim(), 32 + 128 + 16);
        let l = EmbeddingLayout {
            head: HeadKind::Full,
            basis_width: 32,
            panoptic: false,
        };
        assert_eq!(l.dim(), 128 + 784);
    }

    #[test]
    fn head_backwards_match_finite_differences() {
        let mut r = rng(91);
        let d = 4;
        let crop: Tensor<f64> = rand_uniform(Shape::new(1, d, 6, 6), -1.0, 1.0, &mut r);
        let grad_out: Tensor<f64> = rand_uniform(Shape::new(1, 1, 6, 6), -1.0, 1.0, &mut r);
        let h = 1e-6;

        // vector_blend
        let e: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (gr, ge) = vector_blend_backward(&crop, &e, &grad_out);
        let loss = |c: &Tensor<f64>, e: &[f64]| -> f64 {
            vector_blend(c, e)
                .unwrap()
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(a, g)| a * g)
                .sum()
        };
        for i in 0..crop.data().len() {
            let mut p = crop.clone();
            p.data_mut()[i] += h;
            let mut m = crop.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&p, &e) - loss(&m, &e)) / (2.0 * h);
            assert!((num - gr.data()[i]).abs() < 1e-5 * num.abs().max(1.0));
        }
        for i in 0..d {
            let mut p = e.clone();
            p[i] += h;
            let mut m = e.clone();
            m[i] -= h;
            let num = (loss(&crop, &p) - loss(&crop, &m)) / (2.0 * h);
            assert!((num - ge[i]).abs() < 1e-5 * num.abs().max(1.0));
        }

        // project + blend + attention composition
        let t: Vec<f64> = (0..d * K_PROJ).map(|_| r.gen_range(-1.0..1.0)).collect();
        let shared = SharedFactors::<f64>::init(&mut r);
        let s: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let full_loss = |crop: &Tensor<f64>, t: &[f64], s: &[f64], sh: &SharedFactors<f64>| -> f64 {
            let rp = project(crop, t, K_PROJ).unwrap();
            let q = assemble_attention(s, sh).unwrap();
            blend(&rp, &q)
                .unwrap()
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(a, g)| a * g)
                .sum()
        };
        // analytic chain
        let rp = project(&crop, &t, K_PROJ).unwrap();
        let q = assemble_attention(&s, &shared).unwrap();
        let (g_rp, g_q) = blend_backward(&rp, &q, &grad_out).unwrap();
        let (g_crop, g_t) = project_backward(&crop, &t, K_PROJ, &g_rp);
        let (g_s, g_shared) = assemble_attention_backward(&s, &shared, &g_q);
        for i in (0..crop.data().len()).step_by(3) {
            let mut p = crop.clone();
            p.data_mut()[i] += h;
            let mut m = crop.clone();
            m.data_mut()[i] -= h;
            let num = (full_loss(&p, &t, &s, &shared) - full_loss(&m, &t, &s, &shared)) / (2.0 * h);
            assert!((num - g_crop.data()[i]).abs() < 1e-5 * num.abs().max(1.0));
        }
        for i in 0..t.len() {
            let mut p = t.clone();
            p[i] += h;
            let mut m = t.clone();
            m[i] -= h;
            let num = (full_loss(&crop, &p, &s, &shared) - full_loss(&crop, &m, &s, &shared)) / (2.0 * h);
            assert!((num - g_t[i]).abs() < 1e-5 * num.abs().max(1.0));
        }
        for i in 0..s.len() {
            let mut p = s.clone();
            p[i] += h;
            let mut m = s.clone();
            m[i] -= h;
            let num = (full_loss(&crop, &t, &p, &shared) - full_loss(&crop, &t, &m, &shared)) / (2.0 * h);
            assert!((num - g_s[i]).abs() < 1e-5 * num.abs().max(1.0));
        }
        for k in 0..K_PROJ {
            for i in (0..ATTN_RANK * ATTN_RES).step_by(5) {
                let mut p = shared.clone();
                p.u[k].data_mut()[i] += h;
                let mut m = shared.clone();
                m.u[k].data_mut()[i] -= h;
                let num = (full_loss(&crop, &t, &s, &p) - full_loss(&crop, &t, &s, &m)) / (2.0 * h);
                assert!((num - g_shared.u[k].data()[i]).abs() < 1e-5 * num.abs().max(1.0));
            }
        }

        // panoptic layer
        let mut r2 = rng(92);
        let head = PanopticHead::<f64>::init(d, 3, &mut r2);
        let f: Tensor<f64> = rand_uniform(Shape::new(1, d, 5, 5), -1.0, 1.0, &mut r2);
        let things: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..d).map(|_| r2.gen_range(-1.0..1.0)).collect())
            .collect();
        let y = panoptic_logits(&f, &head, &things).unwrap();
        let g_out: Tensor<f64> = rand_uniform(y.shape(), -1.0, 1.0, &mut r2);
        let grads = panoptic_logits_backward(&f, &head, &things, &g_out).unwrap();
        let ploss = |f: &Tensor<f64>, head: &PanopticHead<f64>, things: &[Vec<f64>]| -> f64 {
            panoptic_logits(f, head, things)
                .unwrap()
                .data()
                .iter()
                .zip(g_out.data())
                .map(|(a, g)| a * g)
                .sum()
        };
        for i in 0..f.data().len() {
            let mut p = f.clone();
            p.data_mut()[i] += h;
            let mut m = f.clone();
            m.data_mut()[i] -= h;
            let num = (ploss(&p, &head, &things) - ploss(&m, &head, &things)) / (2.0 * h);
            assert!((num - grads.grad_f.data()[i]).abs() < 1e-5 * num.abs().max(1.0));
        }
        for i in 0..head.w_stuff.data().len() {
            let mut p = head.clone();
            p.w_stuff.data_mut()[i] += h;
            let mut m = head.clone();
            m.w_stuff.data_mut()[i] -= h;
            let num = (ploss(&f, &p, &things) - ploss(&f, &m, &things)) / (2.0 * h);
            assert!((num - grads.grad_w_stuff.data()[i]).abs() < 1e-5 * num.abs().max(1.0));
        }
        for ti in 0..2 {
            for i in 0..d {
                let mut p = things.clone();
                p[ti][i] += h;
                let mut m = things.clone();
                m[ti][i] -= h;
                let num = (ploss(&f, &head, &p) - ploss(&f, &head, &m)) / (2.0 * h);
                assert!((num - grads.grad_things[ti][i]).abs() < 1e-5 * num.abs().max(1.0));
            }
        }
    }
}
