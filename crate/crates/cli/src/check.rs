//! The `check` command: oracle-equivalence, gradient, shape-invariant and
//! parameter-count suites with one pass/fail line each.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dr1mask_core::data::{generate, DatasetSpec};
use dr1mask_core::dr1conv::{
    dr1conv_backward, dr1conv_forward, oracle_general_kernel, oracle_rank1_pointwise,
    Dr1ConvLayer, DynamicFactors, KernelVariant,
};
use dr1mask_core::heads::{count_params, HeadKind};
use dr1mask_core::pyramid::{
    backbone_stub, dr1basis, fpn_reference, knockout, pad_input, tower_top, BackboneParams,
    BasisParams, Knockout, PyramidConfig, TowerParams, UpsampleMode,
};
use dr1mask_core::tensor::{
    rand_uniform, relative_diff, ConvKernel, Scalar, Shape, Tensor,
};
use dr1mask_core::train::{gradcheck_groups, gradcheck_model, model::tiny_config, Model};

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run the verification suites, optionally filtered by a name substring.
/// `inject_fault` deliberately corrupts one equivalence comparison so the
/// harness itself can be shown to catch failures.
pub fn run_check(only: Option<&str>, inject_fault: bool) -> Vec<SuiteResult> {
    let all: Vec<(&'static str, fn(bool) -> SuiteResult)> = vec![
        ("dr1conv/equivalence-single", equivalence_single),
        ("dr1conv/equivalence-double", equivalence_double),
        ("dr1conv/variant-gap", variant_gap),
        ("dr1conv/rank1-minors", rank1_minors),
        ("gradcheck/dr1conv-op", gradcheck_op),
        ("gradcheck/end-to-end", gradcheck_end_to_end),
        ("shapes/aligned-pyramid", aligned_pyramid),
        ("pyramid/knockout-bitwise", knockout_bitwise),
        ("params/counts", param_counts),
    ];
    all.into_iter()
        .filter(|(name, _)| only.map_or(true, |f| name.contains(f)))
        .map(|(name, f)| {
            let fault_here = inject_fault && name == "dr1conv/equivalence-single";
            f(fault_here)
        })
        .collect()
}

fn equivalence_sweep<T: Scalar>(tol: f64, fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1C0);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for &c in &[1usize, 2, 4, 8] {
        for &k in &[1usize, 3] {
            for _ in 0..6 {
                let h = rng.gen_range(2..=12);
                let w = rng.gen_range(2..=12);
                let s = Shape::new(1, c, h, w);
                let x: Tensor<T> = rand_uniform(s, -1.0, 1.0, &mut rng);
                let f = DynamicFactors {
                    a_map: rand_uniform(s, -1.0, 1.0, &mut rng),
                    b_map: rand_uniform(s, -1.0, 1.0, &mut rng),
                };
                let w_t: Tensor<T> = rand_uniform(Shape::new(c, c, k, k), -1.0, 1.0, &mut rng);
                let layer = Dr1ConvLayer::new(ConvKernel::new(w_t.clone(), None).unwrap()).unwrap();
                let mut fast = dr1conv_forward(&x, &f, &layer).unwrap();
                if fault && cases == 0 {
                    let v = fast.data()[0];
                    fast.data_mut()[0] = v + T::from_f64(0.001);
                }
                let oracle = oracle_general_kernel(&x, &f, &layer, KernelVariant::PostSum).unwrap();
                worst = worst.max(relative_diff(&fast, &oracle));
                if k == 1 {
                    let m = Tensor::matrix(c, c, w_t.data().to_vec()).unwrap();
                    let pw = oracle_rank1_pointwise(&x, &f, &m).unwrap();
                    worst = worst.max(relative_diff(&fast, &pw));
                }
                cases += 1;
            }
        }
    }
    (
        worst <= tol,
        format!("{cases} cases, worst rel diff {worst:.3e} (tol {tol:.0e})"),
    )
}

fn equivalence_single(fault: bool) -> SuiteResult {
    let (passed, detail) = equivalence_sweep::<f32>(1e-5, fault);
    SuiteResult {
        name: "dr1conv/equivalence-single",
        passed,
        detail,
    }
}

fn equivalence_double(_fault: bool) -> SuiteResult {
    let (passed, detail) = equivalence_sweep::<f64>(1e-10, false);
    SuiteResult {
        name: "dr1conv/equivalence-double",
        passed,
        detail,
    }
}

/// Reports (never hides) how far the per-tap and post-sum readings of the
/// general-kernel form drift apart for a 3x3 kernel with spatially varying
/// B; the post-sum form is canonical and drives the fast path.
fn variant_gap(_fault: bool) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE34);
    let s = Shape::new(1, 4, 10, 10);
    let x: Tensor<f64> = rand_uniform(s, -1.0, 1.0, &mut rng);
    let f = DynamicFactors {
        a_map: rand_uniform(s, -1.0, 1.0, &mut rng),
        b_map: rand_uniform(s, -1.0, 1.0, &mut rng),
    };
    let w: Tensor<f64> = rand_uniform(Shape::new(4, 4, 3, 3), -1.0, 1.0, &mut rng);
    let layer = Dr1ConvLayer::new(ConvKernel::new(w, None).unwrap()).unwrap();
    let e3 = oracle_general_kernel(&x, &f, &layer, KernelVariant::PerTap).unwrap();
    let e4 = oracle_general_kernel(&x, &f, &layer, KernelVariant::PostSum).unwrap();
    let gap = relative_diff(&e3, &e4);
    SuiteResult {
        name: "dr1conv/variant-gap",
        passed: gap > 0.0, // the variants genuinely differ for 3x3 kernels
        detail: format!("per-tap vs post-sum differ by {gap:.3} rel for 3x3 varying B (post-sum canonical)"),
    }
}

fn rank1_minors(_fault: bool) -> SuiteResult {
    // sample per-position factor pairs from a real tower context
    let cfg = PyramidConfig {
        tower_width: 8,
        tower_depth: 2,
        basis_width: 6,
        emb_dim: 4,
        emit_stride: 4,
        upsample: UpsampleMode::Nearest,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xAB1);
    let backbone = BackboneParams::<f32>::init(&cfg, &mut rng);
    let tower = TowerParams::<f32>::init(&cfg, &mut rng);
    let image: Tensor<f32> = rand_uniform(Shape::new(1, 3, 48, 40), 0.0, 1.0, &mut rng);
    let (padded, _) = pad_input(&image, 4);
    let pyramid = backbone_stub(&padded, &backbone).unwrap();
    let ctx = tower_top(&pyramid, &tower, &cfg).unwrap();

    let mut samples = 0usize;
    let mut worst = 0.0f64;
    'outer: loop {
        for (_l, f) in ctx.context.iter() {
            let s = f.a_map.shape();
            for _ in 0..40 {
                let h = rng.gen_range(0..s.h);
                let w = rng.gen_range(0..s.w);
                let a: Vec<f64> = (0..s.c).map(|c| f.a_map.at(0, c, h, w) as f64).collect();
                let b: Vec<f64> = (0..s.c).map(|c| f.b_map.at(0, c, h, w) as f64).collect();
                let mut norm = 0.0f64;
                for &bv in &b {
                    for &av in &a {
                        norm = norm.max((bv * av).abs());
                    }
                }
                for i0 in 0..s.c {
                    for i1 in (i0 + 1)..s.c {
                        for j0 in 0..s.c {
                            for j1 in (j0 + 1)..s.c {
                                let det = (b[i0] * a[j0]) * (b[i1] * a[j1])
                                    - (b[i0] * a[j1]) * (b[i1] * a[j0]);
                                worst = worst.max(det.abs() / norm.max(1e-30));
                            }
                        }
                    }
                }
                samples += 1;
                if samples >= 1000 {
                    break 'outer;
                }
            }
        }
    }
    SuiteResult {
        name: "dr1conv/rank1-minors",
        passed: worst <= 1e-6,
        detail: format!("{samples} positions, worst normalized 2x2 minor {worst:.3e}"),
    }
}

fn gradcheck_op(_fault: bool) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let s = Shape::new(1, 3, 5, 5);
    let x: Tensor<f64> = rand_uniform(s, -1.0, 1.0, &mut rng);
    let a: Tensor<f64> = rand_uniform(s, -1.0, 1.0, &mut rng);
    let b: Tensor<f64> = rand_uniform(s, -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = rand_uniform(Shape::new(3, 3, 3, 3), -1.0, 1.0, &mut rng);
    let target: Tensor<f64> = rand_uniform(s, -1.0, 1.0, &mut rng);

    let groups = vec![
        ("x".to_string(), x.clone()),
        ("a".to_string(), a.clone()),
        ("b".to_string(), b.clone()),
        ("w".to_string(), w.clone()),
    ];
    let mut loss = |g: &[(String, Tensor<f64>)]| -> f64 {
        let layer = Dr1ConvLayer::new(ConvKernel::new(g[3].1.clone(), None).unwrap()).unwrap();
        let f = DynamicFactors {
            a_map: g[1].1.clone(),
            b_map: g[2].1.clone(),
        };
        dr1conv_forward(&g[0].1, &f, &layer)
            .unwrap()
            .data()
            .iter()
            .zip(target.data())
            .map(|(v, t)| 0.5 * (v - t) * (v - t))
            .sum()
    };
    let layer = Dr1ConvLayer::new(ConvKernel::new(w.clone(), None).unwrap()).unwrap();
    let f = DynamicFactors {
        a_map: a.clone(),
        b_map: b.clone(),
    };
    let y = dr1conv_forward(&x, &f, &layer).unwrap();
    let grad_out = dr1mask_core::tensor::sub(&y, &target).unwrap();
    let g = dr1conv_backward(&x, &f, &layer, &grad_out).unwrap();
    let analytic = vec![
        ("x".to_string(), g.grad_x),
        ("a".to_string(), g.grad_a),
        ("b".to_string(), g.grad_b),
        ("w".to_string(), g.grad_w),
    ];
    let report = gradcheck_groups(&groups, &mut loss, &analytic, 1e-4, 64);
    SuiteResult {
        name: "gradcheck/dr1conv-op",
        passed: report.passed(),
        detail: format!("worst rel err {:.3e} over {} groups (tol 1e-4)", report.worst(), report.groups.len()),
    }
}

fn gradcheck_end_to_end(_fault: bool) -> SuiteResult {
    let scenes = generate(&DatasetSpec {
        seed: 11,
        count: 1,
        height: 16,
        width: 16,
        n_stuff_classes: 3,
        n_thing_classes: 3,
        min_instances: 1,
        max_instances: 1,
    });
    let model: Model<f64> = Model::init(tiny_config(4, 6));
    match gradcheck_model(&model, &scenes[0], 1e-3, 8) {
        Ok(report) => SuiteResult {
            name: "gradcheck/end-to-end",
            passed: report.passed(),
            detail: format!(
                "worst rel err {:.3e} over {} parameter groups (tol 1e-3)",
                report.worst(),
                report.groups.len()
            ),
        },
        Err(e) => SuiteResult {
            name: "gradcheck/end-to-end",
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn aligned_pyramid(_fault: bool) -> SuiteResult {
    let cfg = PyramidConfig {
        tower_width: 4,
        tower_depth: 1,
        basis_width: 4,
        emb_dim: 4,
        emit_stride: 4,
        upsample: UpsampleMode::Nearest,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11);
    let backbone = BackboneParams::<f32>::init(&cfg, &mut rng);
    let tower = TowerParams::<f32>::init(&cfg, &mut rng);
    let basis = BasisParams::<f32>::init(&cfg, &mut rng);
    let mut checked = 0usize;
    for _ in 0..40 {
        let h = rng.gen_range(16..=257);
        let w = rng.gen_range(16..=257);
        let image: Tensor<f32> = rand_uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng);
        let (padded, _) = pad_input(&image, 4);
        let ps = padded.shape();
        let pyramid = match backbone_stub(&padded, &backbone) {
            Ok(p) => p,
            Err(e) => {
                return SuiteResult {
                    name: "shapes/aligned-pyramid",
                    passed: false,
                    detail: format!("{h}x{w}: {e}"),
                }
            }
        };
        let ctx = tower_top(&pyramid, &tower, &cfg).unwrap();
        match dr1basis(&pyramid, &ctx, &basis, &cfg) {
            Ok(out) => {
                let want = (ps.h / 4, ps.w / 4);
                if (out.f.shape().h, out.f.shape().w) != want {
                    return SuiteResult {
                        name: "shapes/aligned-pyramid",
                        passed: false,
                        detail: format!(
                            "{h}x{w}: basis {} but padded/4 is {}x{}",
                            out.f.shape(),
                            want.0,
                            want.1
                        ),
                    };
                }
            }
            Err(e) => {
                return SuiteResult {
                    name: "shapes/aligned-pyramid",
                    passed: false,
                    detail: format!("{h}x{w}: {e}"),
                }
            }
        }
        checked += 1;
    }
    SuiteResult {
        name: "shapes/aligned-pyramid",
        passed: true,
        detail: format!("{checked} random extents in [16, 257], all crops feasible, stride-4 exact"),
    }
}

fn knockout_bitwise(_fault: bool) -> SuiteResult {
    let cfg = PyramidConfig {
        tower_width: 8,
        tower_depth: 2,
        basis_width: 4,
        emb_dim: 4,
        emit_stride: 4,
        upsample: UpsampleMode::Nearest,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x0FF);
    let backbone = BackboneParams::<f32>::init(&cfg, &mut rng);
    let tower = TowerParams::<f32>::init(&cfg, &mut rng);
    let basis = BasisParams::<f32>::init(&cfg, &mut rng);
    let image: Tensor<f32> = rand_uniform(Shape::new(1, 3, 56, 44), 0.0, 1.0, &mut rng);
    let (padded, _) = pad_input(&image, 4);
    let pyramid = backbone_stub(&padded, &backbone).unwrap();
    let ctx = tower_top(&pyramid, &tower, &cfg).unwrap();
    let masked = knockout(&ctx, Knockout::Both);
    let dynamic = dr1basis(&pyramid, &masked, &basis, &cfg).unwrap();
    let reference = fpn_reference(&pyramid, &basis, &cfg).unwrap();
    let equal = dynamic.f == reference.f;
    SuiteResult {
        name: "pyramid/knockout-bitwise",
        passed: equal,
        detail: if equal {
            "A=B=1 basis is bit-identical to the static reference".to_string()
        } else {
            format!(
                "mismatch: rel diff {:.3e}",
                relative_diff(&dynamic.f, &reference.f)
            )
        },
    }
}

fn param_counts(_fault: bool) -> SuiteResult {
    let mut checks: BTreeMap<&str, bool> = BTreeMap::new();
    let full = count_params(HeadKind::Full, 32);
    let factored = count_params(HeadKind::Factored, 32);
    let vector = count_params(HeadKind::Vector, 32);
    checks.insert("full attention = 784", full.per_instance_attention == 784);
    checks.insert("factored attention = 16", factored.per_instance_attention == 16);
    checks.insert("shared U/V = 448", factored.shared == 448);
    checks.insert("vector = C_b", vector.per_instance_total == 32);
    let passed = checks.values().all(|&v| v);
    SuiteResult {
        name: "params/counts",
        passed,
        detail: checks
            .iter()
            .map(|(k, v)| format!("{k}: {}", if *v { "ok" } else { "WRONG" }))
            .collect::<Vec<_>>()
            .join(", "),
    }
}
