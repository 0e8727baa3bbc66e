//! Feature plumbing around DR1Conv: input padding, a strided backbone stub
//! emitting a 5-level pyramid, the shared tower + top layer producing
//! context factors and dense embeddings, and the DR1Basis top-down
//! aggregation into one high-resolution basis map.
//!
//! Sizing discipline: every downsample uses the ceil rule with the surplus
//! padding on the bottom/right, and every 2x upsample is cropped on the
//! right/bottom to the extents of the level below it. The input only needs
//! to be divisible by the output stride (4), never by the deepest level's
//! stride.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dr1conv::{
    dr1conv_backward, dr1conv_forward, Dr1ConvLayer, DynamicFactors,
};
use crate::error::{Error, Result};
use crate::tensor::{
    add, bilinear_resize, bilinear_resize_backward, concat_channels, conv2d, conv2d_backward,
    crop_to, crop_to_backward, relu, relu_backward, slice_channels, upsample2_nearest,
    upsample2_nearest_backward, ConvKernel, Pad, Scalar, Shape, Tensor,
};

/// Pyramid levels; P_l sits at stride 2^l relative to the padded input.
pub const LEVELS: [u8; 5] = [3, 4, 5, 6, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Structural knobs for the backbone/tower/basis stack.
#[derive(Debug, Clone, Copy)]
pub struct PyramidConfig {
    /// Channel width of the backbone pyramid and the tower (C_p).
    pub tower_width: usize,
    /// Number of shared conv+relu blocks in the tower.
    pub tower_depth: usize,
    /// Channel width of the basis features (C_b).
    pub basis_width: usize,
    /// Channel width of the dense embedding maps E_l.
    pub emb_dim: usize,
    /// Stride of the emitted basis map: 4 (one extra upsample) or 8 (P_3).
    pub emit_stride: usize,
    pub upsample: UpsampleMode,
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tower_width == 0 || self.basis_width == 0 || self.emb_dim == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.emit_stride != 4 && self.emit_stride != 8 {
            return Err(Error::Config(format!(
                "emit_stride must be 4 or 8, got {}",
                self.emit_stride
            )));
        }
        Ok(())
    }

    /// Channels emitted by the top conv: [A : B : E].
    pub fn top_channels(&self) -> usize {
        2 * self.basis_width + self.emb_dim
    }
}

/// Backbone FPN stand-in output: P3..P7 plus the padded input extents they
/// were computed from.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: BTreeMap<u8, Tensor<T>>,
    pub input_h: usize,
    pub input_w: usize,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Validates the level size rule: extent(P_l) = ceil(extent(P_{l-1}) / 2)
    /// anchored at extent(P_3) = ceil(input / 8).
    pub fn new(levels: BTreeMap<u8, Tensor<T>>, input_h: usize, input_w: usize) -> Result<Self> {
        let (mut eh, mut ew) = (input_h.div_ceil(8), input_w.div_ceil(8));
        for l in LEVELS {
            let t = levels.get(&l).ok_or_else(|| {
                Error::Invariant(format!("pyramid is missing level {l}"))
            })?;
            let s = t.shape();
            if (s.h, s.w) != (eh, ew) {
                return Err(Error::Invariant(format!(
                    "level {l} has extents {}x{}, size rule wants {}x{}",
                    s.h, s.w, eh, ew
                )));
            }
            eh = eh.div_ceil(2);
            ew = ew.div_ceil(2);
        }
        Ok(FeaturePyramid {
            levels,
            input_h,
            input_w,
        })
    }

    pub fn level(&self, l: u8) -> &Tensor<T> {
        &self.levels[&l]
    }
}

/// Per-level dynamic factors and dense instance embeddings from the top layer.
#[derive(Debug, Clone)]
pub struct ContextPyramid<T: Scalar> {
    pub context: BTreeMap<u8, DynamicFactors<T>>,
    pub embeddings: BTreeMap<u8, Tensor<T>>,
}

/// The basis feature map F plus its stride relative to the padded input.
#[derive(Debug, Clone)]
pub struct BasisOutput<T: Scalar> {
    pub f: Tensor<T>,
    pub stride: usize,
}

/// Zero-pad bottom/right so both extents are multiples of `divisibility`.
/// Returns the padded image and the original extents for final un-cropping.
pub fn pad_input<T: Scalar>(image: &Tensor<T>, divisibility: usize) -> (Tensor<T>, (usize, usize)) {
    let s = image.shape();
    let d = divisibility.max(1);
    let ph = s.h.div_ceil(d) * d;
    let pw = s.w.div_ceil(d) * d;
    if (ph, pw) == (s.h, s.w) {
        return (image.clone(), (s.h, s.w));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ph, pw));
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                let src = s.index(n, c, h, 0);
                let dst = out.shape().index(n, c, h, 0);
                let (w, data) = (s.w, image.data());
                out.data_mut()[dst..dst + w].copy_from_slice(&data[src..src + w]);
            }
        }
    }
    (out, (s.h, s.w))
}

/// Strided 3x3 conv+relu stack standing in for the ResNet-FPN backbone.
#[derive(Debug, Clone)]
pub struct BackboneParams<T: Scalar> {
    /// Three stride-2 convs taking the image to P3 (stride 8).
    pub stem: Vec<ConvKernel<T>>,
    /// One stride-2 conv per extra level: P4, P5, P6, P7.
    pub down: Vec<ConvKernel<T>>,
}

/// He-normal initialized conv kernel. The bias starts at a small positive
/// value instead of zero: over a fully dead relu window the pre-activation
/// equals the bias exactly, and a zero bias would park it on the relu kink
/// where analytic gradients and finite differences legitimately disagree.
pub fn he_kernel<T: Scalar, R: Rng>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> ConvKernel<T> {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let data = (0..c_out * c_in * k * k)
        .map(|_| T::from_f64(normal.sample(rng)))
        .collect();
    let w = Tensor::from_vec(Shape::new(c_out, c_in, k, k), data).unwrap();
    let b = Tensor::full(Shape::new(1, 1, 1, c_out), T::from_f64(0.01));
    ConvKernel::new(w, Some(b)).unwrap()
}

impl<T: Scalar> BackboneParams<T> {
    pub fn init<R: Rng>(cfg: &PyramidConfig, rng: &mut R) -> BackboneParams<T> {
        let cp = cfg.tower_width;
        let stem = vec![
            he_kernel(cp, 3, 3, rng),
            he_kernel(cp, cp, 3, rng),
            he_kernel(cp, cp, 3, rng),
        ];
        let down = (0..4).map(|_| he_kernel(cp, cp, 3, rng)).collect();
        BackboneParams { stem, down }
    }
}

/// Run the backbone stub on a padded image. Fails if any spatial extent
/// would collapse to zero (empty input).
pub fn backbone_stub<T: Scalar>(
    image: &Tensor<T>,
    params: &BackboneParams<T>,
) -> Result<FeaturePyramid<T>> {
    let s = image.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::InvalidArgument {
            op: "backbone_stub",
            msg: format!("image too small: {}", s),
        });
    }
    let (py, cache) = backbone_forward(image, params)?;
    drop(cache);
    Ok(py)
}

pub struct BackboneCache<T: Scalar> {
    /// (input, pre-activation) per conv, stem first then the downsamplers.
    steps: Vec<(Tensor<T>, Tensor<T>)>,
}

pub fn backbone_forward<T: Scalar>(
    image: &Tensor<T>,
    params: &BackboneParams<T>,
) -> Result<(FeaturePyramid<T>, BackboneCache<T>)> {
    let s = image.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::InvalidArgument {
            op: "backbone_stub",
            msg: format!("image too small: {}", s),
        });
    }
    let mut steps = Vec::new();
    let mut x = image.clone();
    for k in &params.stem {
        let pre = conv2d(&x, k, 2, Pad::Same)?;
        let out = relu(&pre);
        steps.push((x, pre));
        x = out;
    }
    let mut levels = BTreeMap::new();
    levels.insert(3u8, x.clone());
    for (i, k) in params.down.iter().enumerate() {
        let pre = conv2d(&x, k, 2, Pad::Same)?;
        let out = relu(&pre);
        steps.push((x, pre));
        x = out.clone();
        levels.insert(4 + i as u8, out);
    }
    let py = FeaturePyramid::new(levels, s.h, s.w)?;
    Ok((py, BackboneCache { steps }))
}

/// Backward through the backbone stub. `grad_levels` carries dL/dP_l.
pub fn backbone_backward<T: Scalar>(
    params: &BackboneParams<T>,
    cache: &BackboneCache<T>,
    grad_levels: &BTreeMap<u8, Tensor<T>>,
) -> Result<BackboneParams<T>> {
    let mut grads = BackboneParams {
        stem: params.stem.iter().map(zero_like_kernel).collect(),
        down: params.down.iter().map(zero_like_kernel).collect(),
    };
    // Down chain first (P7 back to P3), accumulating into the P3 gradient.
    let mut grad_out: Option<Tensor<T>> = None;
    for i in (0..params.down.len()).rev() {
        let level = 4 + i as u8;
        let mut g = grad_levels[&level].clone();
        if let Some(go) = grad_out {
            g = add(&g, &go)?;
        }
        let (input, pre) = &cache.steps[params.stem.len() + i];
        let g_pre = relu_backward(pre, &g);
        let cg = conv2d_backward(input, &params.down[i], 2, Pad::Same, &g_pre)?;
        grads.down[i].weights = cg.grad_w;
        grads.down[i].bias = cg.grad_bias;
        grad_out = Some(cg.grad_x);
    }
    let mut g = grad_levels[&3].clone();
    if let Some(go) = grad_out {
        g = add(&g, &go)?;
    }
    let mut grad_next = g;
    for i in (0..params.stem.len()).rev() {
        let (input, pre) = &cache.steps[i];
        let g_pre = relu_backward(pre, &grad_next);
        let cg = conv2d_backward(input, &params.stem[i], 2, Pad::Same, &g_pre)?;
        grads.stem[i].weights = cg.grad_w;
        grads.stem[i].bias = cg.grad_bias;
        grad_next = cg.grad_x;
    }
    Ok(grads)
}

fn zero_like_kernel<T: Scalar>(k: &ConvKernel<T>) -> ConvKernel<T> {
    ConvKernel {
        weights: Tensor::zeros(k.weights.shape()),
        bias: k.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
    }
}

/// Shared-across-levels tower blocks plus the single top conv emitting
/// 2·C_b + E_dim channels, split in [A : B : E] order.
#[derive(Debug, Clone)]
pub struct TowerParams<T: Scalar> {
    pub blocks: Vec<ConvKernel<T>>,
    pub top: ConvKernel<T>,
}

impl<T: Scalar> TowerParams<T> {
    /// The bias of the A and B channel groups is initialized to one, so the
    /// untrained basis starts out as the vanilla static path and learns its
    /// modulation from there.
    pub fn init<R: Rng>(cfg: &PyramidConfig, rng: &mut R) -> TowerParams<T> {
        let cp = cfg.tower_width;
        let blocks = (0..cfg.tower_depth).map(|_| he_kernel(cp, cp, 3, rng)).collect();
        let mut top = he_kernel(cfg.top_channels(), cp, 3, rng);
        // scale the top weights down so factors start close to their bias
        top.weights = top.weights.scale(T::from_f64(0.1));
        let bias = top.bias.as_mut().unwrap();
        for c in 0..2 * cfg.basis_width {
            bias.data_mut()[c] = T::one();
        }
        TowerParams { blocks, top }
    }
}

/// Saved (input, pre-activation) pairs of a conv+relu chain.
type ConvChainSteps<T> = Vec<(Tensor<T>, Tensor<T>)>;

pub struct TowerCache<T: Scalar> {
    /// Per level: the chain steps of every block, then the top conv input.
    per_level: BTreeMap<u8, (ConvChainSteps<T>, Tensor<T>)>,
    basis_width: usize,
    emb_dim: usize,
}

/// Run the shared tower + top on every pyramid level and split the result
/// into (A_l, B_l, E_l).
pub fn tower_top<T: Scalar>(
    p: &FeaturePyramid<T>,
    params: &TowerParams<T>,
    cfg: &PyramidConfig,
) -> Result<ContextPyramid<T>> {
    let (ctx, cache) = tower_top_forward(p, params, cfg)?;
    drop(cache);
    Ok(ctx)
}

pub fn tower_top_forward<T: Scalar>(
    p: &FeaturePyramid<T>,
    params: &TowerParams<T>,
    cfg: &PyramidConfig,
) -> Result<(ContextPyramid<T>, TowerCache<T>)> {
    if params.top.c_out() != cfg.top_channels() {
        return Err(Error::Config(format!(
            "top conv emits {} channels, config expects {}",
            params.top.c_out(),
            cfg.top_channels()
        )));
    }
    let cb = cfg.basis_width;
    let mut context = BTreeMap::new();
    let mut embeddings = BTreeMap::new();
    let mut per_level = BTreeMap::new();
    for l in LEVELS {
        let mut x = p.level(l).clone();
        let mut steps = Vec::new();
        for k in &params.blocks {
            let pre = conv2d(&x, k, 1, Pad::Same)?;
            let out = relu(&pre);
            steps.push((x, pre));
            x = out;
        }
        let top_out = conv2d(&x, &params.top, 1, Pad::Same)?;
        let a = slice_channels(&top_out, 0, cb)?;
        let b = slice_channels(&top_out, cb, 2 * cb)?;
        let e = slice_channels(&top_out, 2 * cb, 2 * cb + cfg.emb_dim)?;
        context.insert(l, DynamicFactors { a_map: a, b_map: b });
        embeddings.insert(l, e);
        per_level.insert(l, (steps, x));
    }
    Ok((
        ContextPyramid {
            context,
            embeddings,
        },
        TowerCache {
            per_level,
            basis_width: cb,
            emb_dim: cfg.emb_dim,
        },
    ))
}

/// Parameter gradients and the per-level dL/dP_l from the tower backward.
pub type TowerGrads<T> = (TowerParams<T>, BTreeMap<u8, Tensor<T>>);

/// Backward through tower + top. Gradients on A/B/E arrive per level;
/// returns parameter gradients and dL/dP_l per level.
pub fn tower_top_backward<T: Scalar>(
    params: &TowerParams<T>,
    cache: &TowerCache<T>,
    grad_ctx: &BTreeMap<u8, DynamicFactors<T>>,
    grad_emb: &BTreeMap<u8, Tensor<T>>,
) -> Result<TowerGrads<T>> {
    let mut grads = TowerParams {
        blocks: params.blocks.iter().map(zero_like_kernel).collect(),
        top: zero_like_kernel(&params.top),
    };
    let mut grad_p = BTreeMap::new();
    for (&l, (steps, top_in)) in &cache.per_level {
        let gf = &grad_ctx[&l];
        let ge = &grad_emb[&l];
        let grad_top_out = concat_channels(&[&gf.a_map, &gf.b_map, ge])?;
        debug_assert_eq!(
            grad_top_out.shape().c,
            2 * cache.basis_width + cache.emb_dim
        );
        let cg = conv2d_backward(top_in, &params.top, 1, Pad::Same, &grad_top_out)?;
        accumulate_kernel(&mut grads.top, &cg.grad_w, cg.grad_bias.as_ref())?;
        let mut g = cg.grad_x;
        for i in (0..steps.len()).rev() {
            let (input, pre) = &steps[i];
            let g_pre = relu_backward(pre, &g);
            let cg = conv2d_backward(input, &params.blocks[i], 1, Pad::Same, &g_pre)?;
            accumulate_kernel(&mut grads.blocks[i], &cg.grad_w, cg.grad_bias.as_ref())?;
            g = cg.grad_x;
        }
        grad_p.insert(l, g);
    }
    Ok((grads, grad_p))
}

fn accumulate_kernel<T: Scalar>(
    into: &mut ConvKernel<T>,
    grad_w: &Tensor<T>,
    grad_b: Option<&Tensor<T>>,
) -> Result<()> {
    into.weights = add(&into.weights, grad_w)?;
    if let (Some(b), Some(gb)) = (into.bias.as_mut(), grad_b) {
        *b = add(b, gb)?;
    }
    Ok(())
}

/// Per-level lateral 3x3 convs (C_p -> C_b) and per-level DR1Conv blocks.
#[derive(Debug, Clone)]
pub struct BasisParams<T: Scalar> {
    pub laterals: BTreeMap<u8, ConvKernel<T>>,
    pub dr1: BTreeMap<u8, Dr1ConvLayer<T>>,
}

impl<T: Scalar> BasisParams<T> {
    pub fn init<R: Rng>(cfg: &PyramidConfig, rng: &mut R) -> BasisParams<T> {
        let mut laterals = BTreeMap::new();
        let mut dr1 = BTreeMap::new();
        for l in LEVELS {
            laterals.insert(l, he_kernel(cfg.basis_width, cfg.tower_width, 3, rng));
            dr1.insert(
                l,
                Dr1ConvLayer::new(he_kernel(cfg.basis_width, cfg.basis_width, 3, rng)).unwrap(),
            );
        }
        BasisParams { laterals, dr1 }
    }
}

fn upsample2<T: Scalar>(x: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    match mode {
        UpsampleMode::Nearest => upsample2_nearest(x),
        UpsampleMode::Bilinear => {
            let s = x.shape();
            bilinear_resize(x, 2 * s.h, 2 * s.w)
        }
    }
}

fn upsample2_backward<T: Scalar>(
    x_shape: Shape,
    grad_out: &Tensor<T>,
    mode: UpsampleMode,
) -> Tensor<T> {
    match mode {
        UpsampleMode::Nearest => upsample2_nearest_backward(x_shape, grad_out),
        UpsampleMode::Bilinear => bilinear_resize_backward(x_shape, grad_out),
    }
}

/// Per level: the lateral input P_l, the summed DR1Conv input, and the
/// factors used.
type BasisLevelCache<T> = (Tensor<T>, Tensor<T>, DynamicFactors<T>);

pub struct BasisCache<T: Scalar> {
    per_level: BTreeMap<u8, BasisLevelCache<T>>,
    /// F_l tensors keyed by level (needed for upsample backward shapes).
    f_levels: BTreeMap<u8, Tensor<T>>,
    emit: (usize, usize),
    stride: usize,
    mode: UpsampleMode,
}

/// Top-down aggregation (Eq-style recurrence):
/// F_l = DR1Conv_{A_l,B_l}(Conv3x3(P_l) + crop(up2(F_{l+1}))), F_8 = 0,
/// emitted at stride 4 via one final upsample of F_3 (or at stride 8 raw).
pub fn dr1basis<T: Scalar>(
    p: &FeaturePyramid<T>,
    c: &ContextPyramid<T>,
    params: &BasisParams<T>,
    cfg: &PyramidConfig,
) -> Result<BasisOutput<T>> {
    let (out, cache) = dr1basis_forward(p, c, params, cfg)?;
    drop(cache);
    Ok(out)
}

pub fn dr1basis_forward<T: Scalar>(
    p: &FeaturePyramid<T>,
    c: &ContextPyramid<T>,
    params: &BasisParams<T>,
    cfg: &PyramidConfig,
) -> Result<(BasisOutput<T>, BasisCache<T>)> {
    cfg.validate()?;
    let mut per_level = BTreeMap::new();
    let mut f_levels: BTreeMap<u8, Tensor<T>> = BTreeMap::new();
    let mut above: Option<Tensor<T>> = None;
    for &l in LEVELS.iter().rev() {
        let p_l = p.level(l);
        let lat = conv2d(p_l, &params.laterals[&l], 1, Pad::Same)?;
        let sum = match &above {
            None => lat, // F_8 = 0
            Some(f_up) => {
                let up = upsample2(f_up, cfg.upsample);
                let want = p_l.shape();
                if up.shape().h < want.h || up.shape().w < want.w {
                    return Err(Error::Invariant(format!(
                        "upsampled level {} is {} but level below needs {}x{}",
                        l + 1,
                        up.shape(),
                        want.h,
                        want.w
                    )));
                }
                let cropped = crop_to(&up, want.h, want.w)?;
                add(&lat, &cropped)?
            }
        };
        let factors = c.context.get(&l).ok_or_else(|| {
            Error::Invariant(format!("context pyramid is missing level {l}"))
        })?;
        let f_l = dr1conv_forward(&sum, factors, &params.dr1[&l])?;
        per_level.insert(l, (p_l.clone(), sum, factors.clone()));
        f_levels.insert(l, f_l.clone());
        above = Some(f_l);
    }
    let f3 = above.expect("level 3 always present");
    let (eh, ew) = (p.input_h.div_ceil(4), p.input_w.div_ceil(4));
    let out = if cfg.emit_stride == 4 {
        let up = upsample2(&f3, cfg.upsample);
        BasisOutput {
            f: crop_to(&up, eh, ew)?,
            stride: 4,
        }
    } else {
        BasisOutput { f: f3, stride: 8 }
    };
    let emit = (out.f.shape().h, out.f.shape().w);
    Ok((
        out,
        BasisCache {
            per_level,
            f_levels,
            emit,
            stride: cfg.emit_stride,
            mode: cfg.upsample,
        },
    ))
}

/// Gradients produced by `dr1basis_backward`.
pub struct BasisGrads<T: Scalar> {
    pub params: BasisParams<T>,
    pub grad_p: BTreeMap<u8, Tensor<T>>,
    pub grad_ctx: BTreeMap<u8, DynamicFactors<T>>,
}

pub fn dr1basis_backward<T: Scalar>(
    params: &BasisParams<T>,
    cache: &BasisCache<T>,
    grad_f: &Tensor<T>,
) -> Result<BasisGrads<T>> {
    if (grad_f.shape().h, grad_f.shape().w) != cache.emit {
        return Err(Error::ShapeMismatch {
            op: "dr1basis_backward",
            lhs: grad_f.shape().to_string(),
            rhs: format!("emitted {}x{}", cache.emit.0, cache.emit.1),
        });
    }
    let f3_shape = cache.f_levels[&3].shape();
    let mut grad_fl = if cache.stride == 4 {
        let up_shape = Shape::new(f3_shape.n, f3_shape.c, 2 * f3_shape.h, 2 * f3_shape.w);
        let g_up = crop_to_backward(up_shape, grad_f);
        upsample2_backward(f3_shape, &g_up, cache.mode)
    } else {
        grad_f.clone()
    };

    let mut out = BasisGrads {
        params: BasisParams {
            laterals: params
                .laterals
                .iter()
                .map(|(l, k)| (*l, zero_like_kernel(k)))
                .collect(),
            dr1: params
                .dr1
                .iter()
                .map(|(l, k)| {
                    (*l, Dr1ConvLayer::new(zero_like_kernel(k.kernel())).unwrap())
                })
                .collect(),
        },
        grad_p: BTreeMap::new(),
        grad_ctx: BTreeMap::new(),
    };

    for l in LEVELS {
        let (p_l, sum, factors) = &cache.per_level[&l];
        let g = dr1conv_backward(sum, factors, &params.dr1[&l], &grad_fl)?;
        out.grad_ctx.insert(
            l,
            DynamicFactors {
                a_map: g.grad_a,
                b_map: g.grad_b,
            },
        );
        let dr1_grads = out.params.dr1.get_mut(&l).unwrap();
        dr1_grads.kernel_mut().weights = g.grad_w;
        dr1_grads.kernel_mut().bias = g.grad_bias;

        let cg = conv2d_backward(p_l, &params.laterals[&l], 1, Pad::Same, &g.grad_x)?;
        let lat_grads = out.params.laterals.get_mut(&l).unwrap();
        lat_grads.weights = cg.grad_w;
        lat_grads.bias = cg.grad_bias;
        out.grad_p.insert(l, cg.grad_x);

        if l < 7 {
            // the sum also fed crop(up2(F_{l+1}))
            let f_above = cache.f_levels[&(l + 1)].shape();
            let up_shape = Shape::new(f_above.n, f_above.c, 2 * f_above.h, 2 * f_above.w);
            let g_crop = crop_to_backward(up_shape, &g.grad_x);
            grad_fl = upsample2_backward(f_above, &g_crop, cache.mode);
        }
    }
    Ok(out)
}

/// Which dynamic factors to replace with all-ones; the ablation
/// configurations for isolating what A and B each contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knockout {
    None,
    AOnly,
    BOnly,
    Both,
}

/// Replace the masked factor maps with all-ones. `AOnly` keeps A and wipes
/// B, `BOnly` the reverse. Idempotent.
pub fn knockout<T: Scalar>(c: &ContextPyramid<T>, which: Knockout) -> ContextPyramid<T> {
    let context = c
        .context
        .iter()
        .map(|(&l, f)| {
            let shape = f.a_map.shape();
            let nf = match which {
                Knockout::None => f.clone(),
                Knockout::AOnly => DynamicFactors {
                    a_map: f.a_map.clone(),
                    b_map: Tensor::ones(shape),
                },
                Knockout::BOnly => DynamicFactors {
                    a_map: Tensor::ones(shape),
                    b_map: f.b_map.clone(),
                },
                Knockout::Both => DynamicFactors::ones(shape),
            };
            (l, nf)
        })
        .collect();
    ContextPyramid {
        context,
        embeddings: c.embeddings.clone(),
    }
}

/// Independently coded static top-down reference: the same parameters with
/// every DR1Conv replaced by its plain static convolution. The ablation
/// baseline; `dr1basis` with both factors knocked out must equal this
/// bitwise.
pub fn fpn_reference<T: Scalar>(
    p: &FeaturePyramid<T>,
    params: &BasisParams<T>,
    cfg: &PyramidConfig,
) -> Result<BasisOutput<T>> {
    cfg.validate()?;
    let mut above: Option<Tensor<T>> = None;
    for &l in LEVELS.iter().rev() {
        let p_l = p.level(l);
        let lat = conv2d(p_l, &params.laterals[&l], 1, Pad::Same)?;
        let sum = match &above {
            None => lat,
            Some(f_up) => {
                let up = upsample2(f_up, cfg.upsample);
                let cropped = crop_to(&up, p_l.shape().h, p_l.shape().w)?;
                add(&lat, &cropped)?
            }
        };
        above = Some(conv2d(&sum, params.dr1[&l].kernel(), 1, Pad::Same)?);
    }
    let f3 = above.expect("level 3 always present");
    let (eh, ew) = (p.input_h.div_ceil(4), p.input_w.div_ceil(4));
    if cfg.emit_stride == 4 {
        let up = upsample2(&f3, cfg.upsample);
        Ok(BasisOutput {
            f: crop_to(&up, eh, ew)?,
            stride: 4,
        })
    } else {
        Ok(BasisOutput { f: f3, stride: 8 })
    }
}
