//! Training support: per-pixel losses, teacher-forced embedding
//! assignment, momentum SGD, finite-difference gradient checking,
//! checkpointing, and the toy end-to-end training loop.

pub mod model;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::pyramid::LEVELS;
use crate::tensor::serial::Cursor;
use crate::tensor::{read_named_tensor, write_named_tensor, Scalar, Shape, Tensor};

pub use model::{Inference, Model, ModelConfig, ModelParams, PredOutput, SceneEval};

/// Loss components of one training step. The total is the weighted sum
/// mask + panoptic + aux_weight * aux, with 0.3 as the default weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub mask_loss: f64,
    pub panoptic_loss: f64,
    pub aux_semantic_loss: f64,
    pub aux_weight: f64,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.mask_loss + self.panoptic_loss + self.aux_weight * self.aux_semantic_loss
    }
}

/// Mean binary cross-entropy with logits, in the log-sum-exp form
/// max(z,0) - z*y + ln(1 + exp(-|z|)) that never overflows.
pub fn mask_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "mask_loss",
            lhs: pred.shape().to_string(),
            rhs: gt.shape().to_string(),
        });
    }
    let mut acc = 0.0f64;
    for (&z, &y) in pred.data().iter().zip(gt.data()) {
        let (z, y) = (z.to_f64(), y.to_f64());
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidArgument {
                op: "mask_loss",
                msg: format!("ground truth value {y} is not binary"),
            });
        }
        acc += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
    }
    Ok(acc / pred.data().len() as f64)
}

/// d(mean BCE)/dlogits = (sigmoid(z) - y) / count.
pub fn mask_loss_backward<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Tensor<T> {
    let inv = T::from_f64(1.0 / pred.data().len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&z, &y)| (crate::tensor::sigmoid_scalar(z) - y) * inv)
        .collect();
    Tensor::from_vec(pred.shape(), data).expect("same shape")
}

/// Mean per-pixel softmax cross-entropy of (1, C, H, W) logits against a
/// row-major H*W label map with labels in [0, C).
pub fn panoptic_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u32]) -> Result<f64> {
    let s = logits.shape();
    if labels.len() != s.h * s.w {
        return Err(Error::ShapeMismatch {
            op: "panoptic_loss",
            lhs: format!("{} labels", labels.len()),
            rhs: format!("{}x{} logits", s.h, s.w),
        });
    }
    let mut acc = 0.0f64;
    for h in 0..s.h {
        for w in 0..s.w {
            let label = labels[h * s.w + w] as usize;
            if label >= s.c {
                return Err(Error::InvalidArgument {
                    op: "panoptic_loss",
                    msg: format!("label {label} out of range for {} channels", s.c),
                });
            }
            let mut m = f64::NEG_INFINITY;
            for c in 0..s.c {
                m = m.max(logits.at(0, c, h, w).to_f64());
            }
            let mut z = 0.0f64;
            for c in 0..s.c {
                z += (logits.at(0, c, h, w).to_f64() - m).exp();
            }
            acc += m + z.ln() - logits.at(0, label, h, w).to_f64();
        }
    }
    Ok(acc / (s.h * s.w) as f64)
}

/// d(mean CE)/dlogits = (softmax - onehot) / (H*W).
pub fn panoptic_loss_backward<T: Scalar>(logits: &Tensor<T>, labels: &[u32]) -> Result<Tensor<T>> {
    let s = logits.shape();
    let soft = crate::tensor::softmax_channels(logits);
    let mut grad = soft;
    let inv = T::from_f64(1.0 / (s.h * s.w) as f64);
    for h in 0..s.h {
        for w in 0..s.w {
            let label = labels[h * s.w + w] as usize;
            if label >= s.c {
                return Err(Error::InvalidArgument {
                    op: "panoptic_loss_backward",
                    msg: format!("label {label} out of range for {} channels", s.c),
                });
            }
            let v = grad.at(0, label, h, w) - T::one();
            grad.set(0, label, h, w, v);
            for c in 0..s.c {
                let v = grad.at(0, c, h, w) * inv;
                grad.set(0, c, h, w, v);
            }
        }
    }
    Ok(grad)
}

/// FCOS-style size ranges: level l owns boxes whose max side falls in
/// [2^(l+2), 2^(l+3)). Boxes below every range land on level 3, above
/// every range on level 7.
pub fn assign_level(max_side: u32) -> u8 {
    for l in LEVELS {
        // first level whose upper bound admits the box; boxes below the
        // first range land on level 3 this way
        if max_side < 1u32 << (l + 3) {
            return l;
        }
    }
    7
}

/// One teacher-forced read: instance index, owning level, and the level
/// cell holding the box center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub instance: usize,
    pub level: u8,
    /// (row, col) in the level grid.
    pub cell: (usize, usize),
}

/// Map each ground-truth box to its owning level and center cell.
pub fn assignments(scene: &Scene, level_extents: &BTreeMap<u8, (usize, usize)>) -> Vec<Assignment> {
    scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let level = assign_level(inst.max_side());
            let stride = 1usize << level;
            let cx = (inst.bbox[0] + inst.bbox[2]) as usize / 2;
            let cy = (inst.bbox[1] + inst.bbox[3]) as usize / 2;
            let (eh, ew) = level_extents[&level];
            Assignment {
                instance: i,
                level,
                cell: ((cy / stride).min(eh - 1), (cx / stride).min(ew - 1)),
            }
        })
        .collect()
}

/// Per-instance embedding lists read at ground-truth box centers from the
/// owning level's dense embedding map (N_c = 1 per owning level).
pub fn embedding_assignment<T: Scalar>(
    scene: &Scene,
    ctx: &crate::pyramid::ContextPyramid<T>,
) -> Vec<Vec<Vec<T>>> {
    let extents: BTreeMap<u8, (usize, usize)> = ctx
        .embeddings
        .iter()
        .map(|(&l, t)| (l, (t.shape().h, t.shape().w)))
        .collect();
    let mut out = vec![Vec::new(); scene.instances.len()];
    for a in assignments(scene, &extents) {
        let e = read_embedding(&ctx.embeddings[&a.level], a.cell);
        out[a.instance].push(e);
    }
    out
}

/// All channels of a dense map at one cell.
pub fn read_embedding<T: Scalar>(e_map: &Tensor<T>, cell: (usize, usize)) -> Vec<T> {
    let s = e_map.shape();
    (0..s.c).map(|c| e_map.at(0, c, cell.0, cell.1)).collect()
}

pub fn scatter_embedding_grad<T: Scalar>(
    grad_map: &mut Tensor<T>,
    cell: (usize, usize),
    grad: &[T],
) {
    for (c, &g) in grad.iter().enumerate() {
        let cur = grad_map.at(0, c, cell.0, cell.1);
        grad_map.set(0, c, cell.0, cell.1, cur + g);
    }
}

/// One momentum-SGD update: v <- momentum * v + g; p <- p - lr * v.
/// Rejects non-finite gradients, naming the parameter.
pub fn sgd_step<T: Scalar>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !grad.is_all_finite() {
        return Err(Error::NonFinite {
            what: format!("gradient of {name}"),
        });
    }
    let m = T::from_f64(momentum);
    let step = T::from_f64(lr);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut().iter_mut())
    {
        *v = m * *v + g;
        *p -= step * *v;
    }
    Ok(())
}

/// Momentum state for every named parameter tensor.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    pub velocity: BTreeMap<String, Tensor<T>>,
    pub lr: f64,
    pub momentum: f64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: &ModelParams<T>, lr: f64, momentum: f64) -> Optimizer<T> {
        let velocity = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, Tensor::zeros(t.shape())))
            .collect();
        Optimizer {
            velocity,
            lr,
            momentum,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        let grad_map: BTreeMap<String, &Tensor<T>> = grads.named_tensors().into_iter().collect();
        for (name, param) in params.named_tensors_mut() {
            let grad = grad_map.get(&name).ok_or_else(|| {
                Error::Invariant(format!("no gradient for parameter {name}"))
            })?;
            let velocity = self
                .velocity
                .get_mut(&name)
                .ok_or_else(|| Error::Invariant(format!("no velocity for parameter {name}")))?;
            sgd_step(&name, param, grad, velocity, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GradCheckGroup>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative disagreement with an absolute fallback for frozen parameters
/// whose analytic and numeric gradients are both ~0.
fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d <= 1e-8 {
        0.0
    } else {
        d / analytic.abs().max(numeric.abs())
    }
}

/// Central-difference check of analytic gradients for a set of named
/// parameter groups. `loss` re-evaluates the model fragment from the
/// (possibly perturbed) groups; `analytic` are the gradients under test.
/// The step is 1e-5 * max(1, |θ|) per element. At most `max_per_group`
/// elements per group are probed, spread deterministically.
pub fn gradcheck_groups(
    groups: &[(String, Tensor<f64>)],
    loss: &mut dyn FnMut(&[(String, Tensor<f64>)]) -> f64,
    analytic: &[(String, Tensor<f64>)],
    tolerance: f64,
    max_per_group: usize,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        tolerance,
        groups: Vec::new(),
    };
    for (gi, (name, tensor)) in groups.iter().enumerate() {
        let grad = &analytic[gi].1;
        assert_eq!(analytic[gi].0, *name, "group order mismatch");
        let len = tensor.data().len();
        let stride = len.div_ceil(max_per_group.max(1)).max(1);
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        for idx in (0..len).step_by(stride) {
            let theta = tensor.data()[idx];
            let h = 1e-5 * theta.abs().max(1.0);
            let mut probe = groups.to_vec();
            probe[gi].1.data_mut()[idx] = theta + h;
            let lp = loss(&probe);
            probe[gi].1.data_mut()[idx] = theta - h;
            let lm = loss(&probe);
            let numeric = (lp - lm) / (2.0 * h);
            max_rel = max_rel.max(grad_rel_err(grad.data()[idx], numeric));
            checked += 1;
        }
        report.groups.push(GradCheckGroup {
            name: name.clone(),
            max_rel_err: max_rel,
            checked,
        });
    }
    report
}

/// End-to-end gradient check of a double-precision model on one scene:
/// every named parameter group is probed against central differences.
pub fn gradcheck_model(
    model: &Model<f64>,
    scene: &Scene,
    tolerance: f64,
    max_per_group: usize,
) -> Result<GradCheckReport> {
    let (_, grads, _) = model.loss_and_grads(scene)?;
    let analytic: Vec<(String, Tensor<f64>)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let groups: Vec<(String, Tensor<f64>)> = model
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut eval = |probe: &[(String, Tensor<f64>)]| -> f64 {
        let mut m = model.clone();
        for ((_, dst), (_, src)) in m.params.named_tensors_mut().into_iter().zip(probe) {
            *dst = src.clone();
        }
        let (report, _, _) = m.loss_and_grads(scene).expect("probe eval");
        report.total()
    };
    Ok(gradcheck_groups(
        &groups,
        &mut eval,
        &analytic,
        tolerance,
        max_per_group,
    ))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"DR1K";
const CHECKPOINT_VERSION: u32 = 1;
/// Optimizer state rides along as ordinary named tensors.
pub const MOMENTUM_PREFIX: &str = "momentum/";
pub const ITERATION_TENSOR: &str = "state/iteration";

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub iteration: u64,
    pub config_echo: String,
}

pub fn encode_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    optimizer: Option<&Optimizer<T>>,
    iteration: u64,
    config_echo: &str,
) -> Vec<u8> {
    let mut named: Vec<(String, Tensor<T>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    if let Some(opt) = optimizer {
        for (n, v) in &opt.velocity {
            named.push((format!("{MOMENTUM_PREFIX}{n}"), v.clone()));
        }
    }
    named.push((
        ITERATION_TENSOR.to_string(),
        Tensor::from_vec(
            Shape::new(1, 1, 1, 1),
            vec![T::from_f64(iteration as f64)],
        )
        .unwrap(),
    ));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (n, t) in &named {
        write_named_tensor(&mut out, n, t);
    }
    out.extend_from_slice(config_echo.as_bytes());
    out
}

pub fn decode_checkpoint<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut cur = Cursor::new(buf);
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = cur.read_u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = cur.read_u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_named_tensor::<T>(&mut cur)?;
        tensors.insert(name, t);
    }
    let echo_off = cur.offset();
    let echo = cur.take(buf.len() - echo_off, "config echo")?;
    let config_echo = std::str::from_utf8(echo)
        .map_err(|e| Error::Parse {
            offset: echo_off,
            msg: format!("config echo is not UTF-8: {e}"),
        })?
        .to_string();
    let iteration = tensors
        .get(ITERATION_TENSOR)
        .map(|t| t.data()[0].to_f64() as u64)
        .unwrap_or(0);
    Ok(Checkpoint {
        tensors,
        iteration,
        config_echo,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    optimizer: Option<&Optimizer<T>>,
    iteration: u64,
    config_echo: &str,
) -> Result<()> {
    fs::write(path, encode_checkpoint(params, optimizer, iteration, config_echo))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: u64,
    /// Linear learning-rate warm-up over this many leading iterations
    /// (0 disables it). Keeps the early momentum steps from blowing up at
    /// higher base rates.
    pub warmup: u64,
    /// 1 = deterministic replay; more threads parallelize per-instance head
    /// work and forfeit bitwise replay.
    pub threads: usize,
}

impl TrainConfig {
    /// Effective learning rate at a (0-based) iteration.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if self.warmup > 0 && iteration < self.warmup {
            self.lr * (iteration + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

pub const METRICS_HEADER: &str = "iteration,mask_loss,panoptic_loss,aux_loss,total,mean_iou";

pub struct TrainOutput<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub iteration: u64,
    pub metrics_csv: String,
    /// Set when training aborted on a non-finite loss.
    pub diverged_at: Option<u64>,
}

/// Iterate scenes cyclically, one SGD step per scene. Resuming from a
/// checkpoint continues exactly where the original run stopped.
pub fn train_loop<T: Scalar>(
    scenes: &[Scene],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint<T>>,
) -> Result<TrainOutput<T>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train_loop",
            msg: "empty dataset".into(),
        });
    }
    let mut model: Model<T> = Model::init(cfg.model.clone());
    let mut optimizer = Optimizer::new(&model.params, cfg.lr, cfg.momentum);
    let mut start_iter = 0u64;
    if let Some(ck) = resume {
        model.load_tensors(&ck.tensors)?;
        for (name, v) in optimizer.velocity.iter_mut() {
            if let Some(t) = ck.tensors.get(&format!("{MOMENTUM_PREFIX}{name}")) {
                *v = t.clone();
            }
        }
        start_iter = ck.iteration;
    }
    let pool = (cfg.threads > 1)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))
        })
        .transpose()?;

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut diverged_at = None;
    let mut iteration = start_iter;
    while iteration < cfg.iterations {
        let scene = &scenes[(iteration % scenes.len() as u64) as usize];
        let (report, grads, mean_iou) = match &pool {
            Some(p) => p.install(|| model.loss_and_grads_parallel(scene))?,
            None => model.loss_and_grads(scene)?,
        };
        if !report.total().is_finite() {
            diverged_at = Some(iteration);
            break;
        }
        optimizer.lr = cfg.lr_at(iteration);
        optimizer.step(&mut model.params, &grads)?;
        iteration += 1;
        metrics.push_str(&format!(
            "{},{},{},{},{},{}\n",
            iteration,
            report.mask_loss,
            report.panoptic_loss,
            report.aux_semantic_loss,
            report.total(),
            mean_iou
        ));
    }
    Ok(TrainOutput {
        model,
        optimizer,
        iteration,
        metrics_csv: metrics,
        diverged_at,
    })
}

/// Held-out quality: mean instance-mask IoU at crop resolution and
/// panoptic pixel accuracy at image resolution.
pub struct EvalReport {
    pub mean_mask_iou: f64,
    pub panoptic_pixel_accuracy: f64,
    pub scenes: usize,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, scenes: &[Scene]) -> Result<EvalReport> {
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    for scene in scenes {
        let eval = model.forward_scene(scene)?;
        for pred in &eval.preds {
            let pred_mask: Vec<u8> = pred
                .logits
                .data()
                .iter()
                .map(|&v| u8::from(v.to_f64() > 0.0))
                .collect();
            let gt_mask: Vec<u8> = pred
                .gt_crop
                .data()
                .iter()
                .map(|&v| u8::from(v.to_f64() > 0.5))
                .collect();
            iou_sum += crate::data::iou(&pred_mask, &gt_mask)?;
            iou_count += 1;
        }
        if let Some(decoded) = eval.panoptic_image_labels(scene, model.cfg.n_stuff as usize) {
            let gt = scene.panoptic_label_map(model.cfg.n_stuff as usize);
            for (a, b) in decoded.iter().zip(&gt) {
                correct += usize::from(a == b);
                total += 1;
            }
        }
    }
    Ok(EvalReport {
        mean_mask_iou: if iou_count == 0 {
            1.0
        } else {
            iou_sum / iou_count as f64
        },
        panoptic_pixel_accuracy: if total == 0 {
            1.0
        } else {
            correct as f64 / total as f64
        },
        scenes: scenes.len(),
    })
}
