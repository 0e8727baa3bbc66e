//! End-to-end model assembly: backbone stub -> shared tower + top layer ->
//! DR1Basis -> instance and panoptic heads, with a hand-chained backward
//! pass over the whole graph.
//!
//! Detection is teacher-forced: ground-truth boxes stand in for the
//! out-of-scope detector, both for reading embeddings at box centers and
//! for cropping the basis.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::heads::{
    assemble_attention, assemble_attention_backward, blend, blend_backward, crop_basis,
    crop_basis_backward, mean_embedding, panoptic_decode, panoptic_logits,
    panoptic_logits_backward, project, project_backward, vector_blend, vector_blend_backward,
    EmbeddingLayout, HeadKind, MaskEmbedding, PanopticHead, PanopticMap, SharedFactors, K_PROJ,
};
use crate::pyramid::{
    backbone_forward, dr1basis_forward, dr1basis_backward, pad_input, tower_top_backward,
    tower_top_forward, BackboneParams, BasisOutput, BasisParams, ContextPyramid, FeaturePyramid,
    PyramidConfig, TowerParams, UpsampleMode, LEVELS,
};
use crate::tensor::{
    add, conv2d, conv2d_backward, ConvKernel, Pad, RoiBox, Scalar, Shape, Tensor,
};
use crate::train::{
    assignments, mask_loss, mask_loss_backward, panoptic_loss, panoptic_loss_backward,
    read_embedding, scatter_embedding_grad, Assignment, LossReport,
};

/// Everything that defines a model apart from its weights.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub basis_width: usize,
    pub tower_width: usize,
    pub tower_depth: usize,
    pub head: HeadKind,
    /// Unified panoptic mode; off = instance-only.
    pub panoptic: bool,
    pub crop_size: usize,
    pub divisibility: usize,
    pub emit_stride: usize,
    pub upsample: UpsampleMode,
    pub n_stuff: u16,
    pub n_thing: u16,
    pub aux_weight: f64,
    /// 0 = derive from the head kind; anything else overrides E_dim.
    pub emb_dim_override: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn layout(&self) -> EmbeddingLayout {
        EmbeddingLayout {
            head: self.head,
            basis_width: self.basis_width,
            panoptic: self.panoptic,
        }
    }

    pub fn emb_dim(&self) -> usize {
        if self.emb_dim_override != 0 {
            self.emb_dim_override
        } else {
            self.layout().dim()
        }
    }

    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            tower_width: self.tower_width,
            tower_depth: self.tower_depth,
            basis_width: self.basis_width,
            emb_dim: self.emb_dim(),
            emit_stride: self.emit_stride,
            upsample: self.upsample,
        }
    }

    pub fn semantic_classes(&self) -> usize {
        (self.n_stuff + self.n_thing) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid().validate()?;
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if self.n_stuff == 0 {
            return Err(Error::Config("need at least one stuff class".into()));
        }
        if self.emb_dim_override != 0 && self.emb_dim_override != self.layout().dim() {
            return Err(Error::Config(format!(
                "emb_dim override {} does not match the {} head layout ({} values)",
                self.emb_dim_override,
                self.head.name(),
                self.layout().dim()
            )));
        }
        Ok(())
    }
}

/// A small config for fast tests and double-precision gradient checks.
pub fn tiny_config(basis_width: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        basis_width,
        tower_width: 4,
        tower_depth: 1,
        head: HeadKind::Vector,
        panoptic: true,
        crop_size: 8,
        divisibility: 4,
        emit_stride: 4,
        upsample: UpsampleMode::Nearest,
        n_stuff: 3,
        n_thing: 3,
        aux_weight: 0.3,
        emb_dim_override: 0,
        seed,
    }
}

/// All trainable tensors, grouped by subsystem. Gradients reuse the same
/// structure.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub backbone: BackboneParams<T>,
    pub tower: TowerParams<T>,
    pub basis: BasisParams<T>,
    pub shared: SharedFactors<T>,
    pub pano: PanopticHead<T>,
    pub aux: ConvKernel<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig) -> ModelParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pcfg = cfg.pyramid();
        let backbone = BackboneParams::init(&pcfg, &mut rng);
        let tower = TowerParams::init(&pcfg, &mut rng);
        let basis = BasisParams::init(&pcfg, &mut rng);
        let shared = SharedFactors::init(&mut rng);
        let pano = PanopticHead::init(cfg.basis_width, cfg.n_stuff as usize, &mut rng);
        let aux = crate::pyramid::he_kernel(cfg.semantic_classes(), cfg.basis_width, 1, &mut rng);
        ModelParams {
            backbone,
            tower,
            basis,
            shared,
            pano,
            aux,
        }
    }

    pub fn zeros_like(&self) -> ModelParams<T> {
        let zk = |k: &ConvKernel<T>| ConvKernel {
            weights: Tensor::zeros(k.weights.shape()),
            bias: k.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        };
        ModelParams {
            backbone: BackboneParams {
                stem: self.backbone.stem.iter().map(zk).collect(),
                down: self.backbone.down.iter().map(zk).collect(),
            },
            tower: TowerParams {
                blocks: self.tower.blocks.iter().map(zk).collect(),
                top: zk(&self.tower.top),
            },
            basis: BasisParams {
                laterals: self.basis.laterals.iter().map(|(l, k)| (*l, zk(k))).collect(),
                dr1: self
                    .basis
                    .dr1
                    .iter()
                    .map(|(l, k)| {
                        (
                            *l,
                            crate::dr1conv::Dr1ConvLayer::new(zk(k.kernel())).unwrap(),
                        )
                    })
                    .collect(),
            },
            shared: self.shared.zeros_like(),
            pano: PanopticHead {
                w_stuff: Tensor::zeros(self.pano.w_stuff.shape()),
                bias: self.pano.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
            },
            aux: zk(&self.aux),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        fn push_kernel<'a, T: Scalar>(
            out: &mut Vec<(String, &'a Tensor<T>)>,
            name: String,
            k: &'a ConvKernel<T>,
        ) {
            out.push((format!("{name}.weight"), &k.weights));
            if let Some(b) = &k.bias {
                out.push((format!("{name}.bias"), b));
            }
        }
        for (i, k) in self.backbone.stem.iter().enumerate() {
            push_kernel(&mut out, format!("backbone.stem{i}"), k);
        }
        for (i, k) in self.backbone.down.iter().enumerate() {
            push_kernel(&mut out, format!("backbone.down{i}"), k);
        }
        for (i, k) in self.tower.blocks.iter().enumerate() {
            push_kernel(&mut out, format!("tower.block{i}"), k);
        }
        push_kernel(&mut out, "tower.top".to_string(), &self.tower.top);
        for (l, k) in &self.basis.laterals {
            push_kernel(&mut out, format!("basis.lateral{l}"), k);
        }
        for (l, k) in &self.basis.dr1 {
            push_kernel(&mut out, format!("basis.dr1_{l}"), k.kernel());
        }
        for (i, u) in self.shared.u.iter().enumerate() {
            out.push((format!("heads.shared.u{i}"), u));
        }
        for (i, v) in self.shared.v.iter().enumerate() {
            out.push((format!("heads.shared.v{i}"), v));
        }
        out.push(("heads.pano.w_stuff".to_string(), &self.pano.w_stuff));
        if let Some(b) = &self.pano.bias {
            out.push(("heads.pano.bias".to_string(), b));
        }
        push_kernel(&mut out, "heads.aux".to_string(), &self.aux);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        fn push_kernel<'a, T: Scalar>(
            out: &mut Vec<(String, &'a mut Tensor<T>)>,
            name: String,
            k: &'a mut ConvKernel<T>,
        ) {
            out.push((format!("{name}.weight"), &mut k.weights));
            if let Some(b) = k.bias.as_mut() {
                out.push((format!("{name}.bias"), b));
            }
        }
        for (i, k) in self.backbone.stem.iter_mut().enumerate() {
            push_kernel(&mut out, format!("backbone.stem{i}"), k);
        }
        for (i, k) in self.backbone.down.iter_mut().enumerate() {
            push_kernel(&mut out, format!("backbone.down{i}"), k);
        }
        for (i, k) in self.tower.blocks.iter_mut().enumerate() {
            push_kernel(&mut out, format!("tower.block{i}"), k);
        }
        push_kernel(&mut out, "tower.top".to_string(), &mut self.tower.top);
        for (l, k) in self.basis.laterals.iter_mut() {
            push_kernel(&mut out, format!("basis.lateral{l}"), k);
        }
        for (l, k) in self.basis.dr1.iter_mut() {
            push_kernel(&mut out, format!("basis.dr1_{l}"), k.kernel_mut());
        }
        for (i, u) in self.shared.u.iter_mut().enumerate() {
            out.push((format!("heads.shared.u{i}"), u));
        }
        for (i, v) in self.shared.v.iter_mut().enumerate() {
            out.push((format!("heads.shared.v{i}"), v));
        }
        out.push(("heads.pano.w_stuff".to_string(), &mut self.pano.w_stuff));
        if let Some(b) = self.pano.bias.as_mut() {
            out.push(("heads.pano.bias".to_string(), b));
        }
        push_kernel(&mut out, "heads.aux".to_string(), &mut self.aux);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ModelParams<T>,
}

/// One teacher-forced instance prediction with everything the backward
/// pass or an evaluator needs.
pub struct PredOutput<T: Scalar> {
    pub assignment: Assignment,
    /// Raw embedding read at the center cell.
    pub raw_emb: Vec<T>,
    /// RoI crop of the basis (1, C_b, S, S).
    pub crop: Tensor<T>,
    /// Mask logits (1, 1, S, S).
    pub logits: Tensor<T>,
    /// Binarized ground-truth mask crop, same extents.
    pub gt_crop: Tensor<T>,
    pub roi: RoiBox,
}

/// Forward evaluation of one scene (no gradients).
pub struct SceneEval<T: Scalar> {
    pub losses: LossReport,
    pub preds: Vec<PredOutput<T>>,
    pub basis: BasisOutput<T>,
    pub pano_logits: Option<Tensor<T>>,
    pub aux_logits: Tensor<T>,
    pub original_extents: (usize, usize),
}

impl<T: Scalar> SceneEval<T> {
    /// Decode a logits tensor at image resolution: bilinearly upsample by
    /// the basis stride, crop the padding back off, then take the per-pixel
    /// argmax. Upsampling the logits rather than the decoded labels keeps
    /// region boundaries at pixel rather than stride granularity.
    pub fn decode_at_image(
        &self,
        logits: &Tensor<T>,
        scene: &Scene,
        c_stuff: usize,
    ) -> Result<PanopticMap> {
        let s = logits.shape();
        let stride = self.basis.stride;
        let up = crate::tensor::bilinear_resize(logits, s.h * stride, s.w * stride);
        let cropped = crate::tensor::crop_to(&up, scene.height(), scene.width())?;
        Ok(panoptic_decode(&cropped, c_stuff))
    }

    /// Decoded panoptic labels at image resolution, following the scene
    /// convention: stuff class, or c_stuff + instance index.
    pub fn panoptic_image_labels(&self, scene: &Scene, c_stuff: usize) -> Option<Vec<u32>> {
        let logits = self.pano_logits.as_ref()?;
        let map = self.decode_at_image(logits, scene, c_stuff).ok()?;
        Some(map.channel)
    }
}

/// Decoded outputs for emission.
pub struct Inference<T: Scalar> {
    pub eval: SceneEval<T>,
    pub panoptic: Option<PanopticMap>,
}

/// Forward activations and caches of the shared trunk.
struct TrunkForward<T: Scalar> {
    original_extents: (usize, usize),
    pyramid: FeaturePyramid<T>,
    bb_cache: crate::pyramid::BackboneCache<T>,
    ctx: ContextPyramid<T>,
    tower_cache: crate::pyramid::TowerCache<T>,
    basis: BasisOutput<T>,
    basis_cache: crate::pyramid::BasisCache<T>,
}

struct PredGrads<T: Scalar> {
    assignment: Assignment,
    grad_basis: Tensor<T>,
    grad_emb_raw: Vec<T>,
    grad_shared: Option<SharedFactors<T>>,
    loss: f64,
    iou: f64,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig) -> Model<T> {
        let params = ModelParams::init(&cfg);
        Model { cfg, params }
    }

    /// Overwrite parameters from named checkpoint tensors. Optimizer-state
    /// entries (momentum/..., state/...) are ignored here; missing model
    /// tensors or shape mismatches are errors.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, param) in self.params.named_tensors_mut() {
            let t = tensors.get(&name).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing tensor '{name}'"))
            })?;
            if t.shape() != param.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor '{name}' has shape {}, model wants {}",
                    t.shape(),
                    param.shape()
                )));
            }
            *param = t.clone();
        }
        Ok(())
    }

    fn forward_trunk(&self, scene: &Scene) -> Result<TrunkForward<T>> {
        let image: Tensor<T> = scene.image.cast();
        let (padded, orig) = pad_input(&image, self.cfg.divisibility);
        let (pyramid, bb_cache) = backbone_forward(&padded, &self.params.backbone)?;
        let (ctx, tower_cache) = tower_top_forward(&pyramid, &self.params.tower, &self.cfg.pyramid())?;
        let (basis, basis_cache) =
            dr1basis_forward(&pyramid, &ctx, &self.params.basis, &self.cfg.pyramid())?;
        Ok(TrunkForward {
            original_extents: orig,
            pyramid,
            bb_cache,
            ctx,
            tower_cache,
            basis,
            basis_cache,
        })
    }

    fn gt_mask_crop(&self, scene: &Scene, instance: usize, roi: RoiBox) -> Result<Tensor<T>> {
        let (h, w) = (scene.height(), scene.width());
        let inst = &scene.instances[instance];
        let mask_t = Tensor::from_vec(
            Shape::new(1, 1, h, w),
            inst.mask.iter().map(|&m| T::from_f64(m as f64)).collect(),
        )?;
        let crop = crate::tensor::roi_align(&mask_t, roi, 1, self.cfg.crop_size, self.cfg.crop_size)?;
        Ok(crop.map(|v| if v.to_f64() > 0.5 { T::one() } else { T::zero() }))
    }

    fn pred_forward(
        &self,
        scene: &Scene,
        ctx: &ContextPyramid<T>,
        basis: &BasisOutput<T>,
        a: Assignment,
    ) -> Result<PredOutput<T>> {
        let inst = &scene.instances[a.instance];
        let roi = RoiBox::new(
            inst.bbox[0] as f64,
            inst.bbox[1] as f64,
            inst.bbox[2] as f64,
            inst.bbox[3] as f64,
        );
        let raw_emb = read_embedding(&ctx.embeddings[&a.level], a.cell);
        let crop = crop_basis(basis, roi, self.cfg.crop_size)?;
        let logits = self.mask_head_forward(&crop, &raw_emb)?;
        let gt_crop = self.gt_mask_crop(scene, a.instance, roi)?;
        Ok(PredOutput {
            assignment: a,
            raw_emb,
            crop,
            logits,
            gt_crop,
            roi,
        })
    }

    fn mask_head_forward(&self, crop: &Tensor<T>, raw_emb: &[T]) -> Result<Tensor<T>> {
        match self.cfg.layout().split(raw_emb)? {
            MaskEmbedding::Vector(e) => vector_blend(crop, e),
            MaskEmbedding::Full { t, q } => {
                let rp = project(crop, t, K_PROJ)?;
                let q = Tensor::from_vec(
                    Shape::new(1, K_PROJ, crate::heads::ATTN_RES, crate::heads::ATTN_RES),
                    q.to_vec(),
                )?;
                blend(&rp, &q)
            }
            MaskEmbedding::Factored { t, s } => {
                let rp = project(crop, t, K_PROJ)?;
                let q = assemble_attention(s, &self.params.shared)?;
                blend(&rp, &q)
            }
        }
    }

    /// Backward through one prediction's head given dL/dlogits. Returns the
    /// basis gradient via the crop, the raw-embedding gradient, and the
    /// shared-factor gradient when the factored head is active.
    fn pred_backward(
        &self,
        pred: &PredOutput<T>,
        grad_logits: &Tensor<T>,
        basis: &BasisOutput<T>,
    ) -> Result<PredGrads<T>> {
        let layout = self.cfg.layout();
        let mut grad_raw = vec![T::zero(); pred.raw_emb.len()];
        let mut grad_shared = None;
        let off = if layout.panoptic && layout.head != HeadKind::Vector {
            layout.basis_width
        } else {
            0
        };
        let grad_crop = match layout.split(&pred.raw_emb)? {
            MaskEmbedding::Vector(e) => {
                let (gr, ge) = vector_blend_backward(&pred.crop, e, grad_logits);
                grad_raw[off..off + ge.len()].copy_from_slice(&ge);
                gr
            }
            MaskEmbedding::Full { t, q } => {
                let rp = project(&pred.crop, t, K_PROJ)?;
                let qt = Tensor::from_vec(
                    Shape::new(1, K_PROJ, crate::heads::ATTN_RES, crate::heads::ATTN_RES),
                    q.to_vec(),
                )?;
                let (g_rp, g_q) = blend_backward(&rp, &qt, grad_logits)?;
                let (gr, gt) = project_backward(&pred.crop, t, K_PROJ, &g_rp);
                grad_raw[off..off + gt.len()].copy_from_slice(&gt);
                grad_raw[off + gt.len()..off + gt.len() + g_q.data().len()]
                    .copy_from_slice(g_q.data());
                gr
            }
            MaskEmbedding::Factored { t, s } => {
                let rp = project(&pred.crop, t, K_PROJ)?;
                let q = assemble_attention(s, &self.params.shared)?;
                let (g_rp, g_q) = blend_backward(&rp, &q, grad_logits)?;
                let (gr, gt) = project_backward(&pred.crop, t, K_PROJ, &g_rp);
                let (gs, gsh) = assemble_attention_backward(s, &self.params.shared, &g_q);
                grad_raw[off..off + gt.len()].copy_from_slice(&gt);
                grad_raw[off + gt.len()..off + gt.len() + gs.len()].copy_from_slice(&gs);
                grad_shared = Some(gsh);
                gr
            }
        };
        let grad_basis = crop_basis_backward(basis, pred.roi, &grad_crop);
        Ok(PredGrads {
            assignment: pred.assignment,
            grad_basis,
            grad_emb_raw: grad_raw,
            grad_shared,
            loss: 0.0,
            iou: 0.0,
        })
    }

    /// Downsample a row-major per-pixel label map to basis resolution by
    /// sampling each stride-cell center, clamped to the original extents.
    fn labels_at_basis(&self, labels: &[u32], scene: &Scene, basis: &BasisOutput<T>) -> Vec<u32> {
        let (h, w) = (scene.height(), scene.width());
        let s = basis.f.shape();
        let stride = basis.stride;
        let mut out = vec![0u32; s.h * s.w];
        for i in 0..s.h {
            for j in 0..s.w {
                let y = (stride * i + stride / 2).min(h - 1);
                let x = (stride * j + stride / 2).min(w - 1);
                out[i * s.w + j] = labels[y * w + x];
            }
        }
        out
    }

    /// Per-instance panoptic thing embeddings: the mean of the assigned
    /// raw embeddings' vector parts.
    fn thing_embeddings(&self, preds: &[PredOutput<T>], n_instances: usize) -> Result<Vec<Vec<T>>> {
        let layout = self.cfg.layout();
        let mut per_instance: Vec<Vec<Vec<T>>> = vec![Vec::new(); n_instances];
        for p in preds {
            let part = layout
                .pano_part(&p.raw_emb)
                .expect("panoptic mode")
                .to_vec();
            per_instance[p.assignment.instance].push(part);
        }
        per_instance.iter().map(|es| mean_embedding(es)).collect()
    }

    /// Full forward pass with losses (no gradients kept).
    pub fn forward_scene(&self, scene: &Scene) -> Result<SceneEval<T>> {
        self.cfg.validate()?;
        let trunk = self.forward_trunk(scene)?;
        let (orig, pyramid, ctx, basis) =
            (trunk.original_extents, trunk.pyramid, trunk.ctx, trunk.basis);
        let extents: BTreeMap<u8, (usize, usize)> = LEVELS
            .iter()
            .map(|&l| {
                let s = pyramid.level(l).shape();
                (l, (s.h, s.w))
            })
            .collect();
        let preds = assignments(scene, &extents)
            .into_iter()
            .map(|a| self.pred_forward(scene, &ctx, &basis, a))
            .collect::<Result<Vec<_>>>()?;

        let mask = if preds.is_empty() {
            0.0
        } else {
            let mut acc = 0.0;
            for p in &preds {
                acc += mask_loss(&p.logits, &p.gt_crop)?;
            }
            acc / preds.len() as f64
        };

        let (pano_logits_t, pano) = if self.cfg.panoptic {
            let things = self.thing_embeddings(&preds, scene.instances.len())?;
            let logits = panoptic_logits(&basis.f, &self.params.pano, &things)?;
            let labels =
                self.labels_at_basis(&scene.panoptic_label_map(self.cfg.n_stuff as usize), scene, &basis);
            let loss = panoptic_loss(&logits, &labels)?;
            (Some(logits), loss)
        } else {
            (None, 0.0)
        };

        let aux_logits = conv2d(&basis.f, &self.params.aux, 1, Pad::Same)?;
        let aux_labels = self.labels_at_basis(&scene.semantic_label_map(), scene, &basis);
        let aux = panoptic_loss(&aux_logits, &aux_labels)?;

        Ok(SceneEval {
            losses: LossReport {
                mask_loss: mask,
                panoptic_loss: pano,
                aux_semantic_loss: aux,
                aux_weight: self.cfg.aux_weight,
            },
            preds,
            basis,
            pano_logits: pano_logits_t,
            aux_logits,
            original_extents: orig,
        })
    }

    /// Loss, full parameter gradients, and the scene's mean mask IoU.
    /// Strictly single-threaded; `loss_and_grads_parallel` fans the
    /// per-instance head work out over the installed rayon pool.
    pub fn loss_and_grads(&self, scene: &Scene) -> Result<(LossReport, ModelParams<T>, f64)> {
        self.loss_and_grads_inner(scene, false)
    }

    pub fn loss_and_grads_parallel(
        &self,
        scene: &Scene,
    ) -> Result<(LossReport, ModelParams<T>, f64)> {
        self.loss_and_grads_inner(scene, true)
    }

    fn loss_and_grads_inner(
        &self,
        scene: &Scene,
        parallel: bool,
    ) -> Result<(LossReport, ModelParams<T>, f64)> {
        self.cfg.validate()?;
        let TrunkForward {
            pyramid,
            bb_cache,
            ctx,
            tower_cache,
            basis,
            basis_cache,
            ..
        } = self.forward_trunk(scene)?;
        let extents: BTreeMap<u8, (usize, usize)> = LEVELS
            .iter()
            .map(|&l| {
                let s = pyramid.level(l).shape();
                (l, (s.h, s.w))
            })
            .collect();
        let assigned = assignments(scene, &extents);
        let n_preds = assigned.len();

        // Per-prediction forward + head backward; independent across
        // predictions, parallelized when a rayon pool is installed.
        let run = |a: &Assignment| -> Result<(PredOutput<T>, PredGrads<T>)> {
            let pred = self.pred_forward(scene, &ctx, &basis, *a)?;
            let loss = mask_loss(&pred.logits, &pred.gt_crop)?;
            // d(mean over preds of per-pred mean BCE)
            let grad_logits = mask_loss_backward(&pred.logits, &pred.gt_crop)
                .scale(T::from_f64(1.0 / n_preds.max(1) as f64));
            let mut grads = self.pred_backward(&pred, &grad_logits, &basis)?;
            grads.loss = loss;
            let pm: Vec<u8> = pred
                .logits
                .data()
                .iter()
                .map(|&v| u8::from(v.to_f64() > 0.0))
                .collect();
            let gm: Vec<u8> = pred
                .gt_crop
                .data()
                .iter()
                .map(|&v| u8::from(v.to_f64() > 0.5))
                .collect();
            grads.iou = crate::data::iou(&pm, &gm)?;
            Ok((pred, grads))
        };
        let results: Vec<(PredOutput<T>, PredGrads<T>)> = if parallel {
            assigned.par_iter().map(run).collect::<Result<Vec<_>>>()?
        } else {
            assigned.iter().map(run).collect::<Result<Vec<_>>>()?
        };
        let (preds, pred_grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();

        let mask = if preds.is_empty() {
            0.0
        } else {
            pred_grads.iter().map(|g| g.loss).sum::<f64>() / n_preds as f64
        };
        let mean_iou = if preds.is_empty() {
            1.0
        } else {
            pred_grads.iter().map(|g| g.iou).sum::<f64>() / n_preds as f64
        };

        let mut grads = self.params.zeros_like();
        let mut grad_basis_f = Tensor::zeros(basis.f.shape());
        // level -> embedding-map gradient
        let mut grad_emb: BTreeMap<u8, Tensor<T>> = ctx
            .embeddings
            .iter()
            .map(|(&l, t)| (l, Tensor::zeros(t.shape())))
            .collect();

        // instance branch contributions, reduced in assignment order
        for g in &pred_grads {
            grad_basis_f = add(&grad_basis_f, &g.grad_basis)?;
            let gm = grad_emb.get_mut(&g.assignment.level).unwrap();
            scatter_embedding_grad(gm, g.assignment.cell, &g.grad_emb_raw);
            if let Some(sh) = &g.grad_shared {
                for k in 0..K_PROJ {
                    grads.shared.u[k] = add(&grads.shared.u[k], &sh.u[k])?;
                    grads.shared.v[k] = add(&grads.shared.v[k], &sh.v[k])?;
                }
            }
        }

        // unified panoptic branch
        let mut pano_loss = 0.0;
        if self.cfg.panoptic {
            let things = self.thing_embeddings(&preds, scene.instances.len())?;
            let logits = panoptic_logits(&basis.f, &self.params.pano, &things)?;
            let labels = self.labels_at_basis(
                &scene.panoptic_label_map(self.cfg.n_stuff as usize),
                scene,
                &basis,
            );
            pano_loss = panoptic_loss(&logits, &labels)?;
            let grad_logits = panoptic_loss_backward(&logits, &labels)?;
            let pg = panoptic_logits_backward(&basis.f, &self.params.pano, &things, &grad_logits)?;
            grad_basis_f = add(&grad_basis_f, &pg.grad_f)?;
            grads.pano.w_stuff = add(&grads.pano.w_stuff, &pg.grad_w_stuff)?;
            if let (Some(b), Some(gb)) = (grads.pano.bias.as_mut(), pg.grad_bias.as_ref()) {
                *b = add(b, gb)?;
            }
            // mean-embedding backward: each contributing read gets 1/N_c of
            // the thing-column gradient, into the vector part of the raw
            // embedding
            let mut counts = vec![0usize; scene.instances.len()];
            for p in &preds {
                counts[p.assignment.instance] += 1;
            }
            for p in &preds {
                let inst = p.assignment.instance;
                let share = T::from_f64(1.0 / counts[inst].max(1) as f64);
                let gvec: Vec<T> = pg.grad_things[inst].iter().map(|&g| g * share).collect();
                let gm = grad_emb.get_mut(&p.assignment.level).unwrap();
                scatter_embedding_grad(gm, p.assignment.cell, &gvec);
            }
        }

        // auxiliary semantic head
        let aux_logits = conv2d(&basis.f, &self.params.aux, 1, Pad::Same)?;
        let aux_labels = self.labels_at_basis(&scene.semantic_label_map(), scene, &basis);
        let aux_loss = panoptic_loss(&aux_logits, &aux_labels)?;
        let grad_aux_logits =
            panoptic_loss_backward(&aux_logits, &aux_labels)?.scale(T::from_f64(self.cfg.aux_weight));
        let aux_grads = conv2d_backward(&basis.f, &self.params.aux, 1, Pad::Same, &grad_aux_logits)?;
        grads.aux.weights = aux_grads.grad_w;
        grads.aux.bias = aux_grads.grad_bias;
        grad_basis_f = add(&grad_basis_f, &aux_grads.grad_x)?;

        // pyramid backward: basis -> tower/top -> backbone
        let bg = dr1basis_backward(&self.params.basis, &basis_cache, &grad_basis_f)?;
        grads.basis = bg.params;
        let (tower_grads, grad_p_tower) =
            tower_top_backward(&self.params.tower, &tower_cache, &bg.grad_ctx, &grad_emb)?;
        grads.tower = tower_grads;
        let mut grad_levels = BTreeMap::new();
        for l in LEVELS {
            grad_levels.insert(l, add(&bg.grad_p[&l], &grad_p_tower[&l])?);
        }
        grads.backbone =
            crate::pyramid::backbone_backward(&self.params.backbone, &bb_cache, &grad_levels)?;

        let report = LossReport {
            mask_loss: mask,
            panoptic_loss: pano_loss,
            aux_semantic_loss: aux_loss,
            aux_weight: self.cfg.aux_weight,
        };
        Ok((report, grads, mean_iou))
    }

    /// Inference on one scene with teacher-forced boxes: per-instance mask
    /// logits plus the decoded image-resolution panoptic map (panoptic
    /// mode) or the decoded auxiliary semantic map otherwise.
    pub fn infer(&self, scene: &Scene) -> Result<Inference<T>> {
        let eval = self.forward_scene(scene)?;
        let c_stuff = self.cfg.n_stuff as usize;
        let panoptic = match &eval.pano_logits {
            Some(logits) => Some(eval.decode_at_image(logits, scene, c_stuff)?),
            None => Some(eval.decode_at_image(&eval.aux_logits.clone(), scene, c_stuff)?),
        };
        Ok(Inference { eval, panoptic })
    }
}
