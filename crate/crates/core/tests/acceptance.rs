//! Acceptance gate. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `VOXCL_ACCEPTANCE=1,3,9` restricts the run to the listed criteria.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use voxcl_core::config::RunConfig;
use voxcl_core::eval::{class_dice, dice_score, predict_volume};
use voxcl_core::loss::{info_nce, info_nce_oracle, info_nce_value};
use voxcl_core::model::*;
use voxcl_core::phantom::{generate_phantom, PhantomSpec};
use voxcl_core::sampler::{extract_patch, sample_patch_pair, PatchSpec, SamplerConfig};
use voxcl_core::tensor::{Graph, Tensor, Var};
use voxcl_core::train::*;
use voxcl_core::volume::{
    compute_body_mask, decode_labels, decode_volume, encode_labels, encode_volume, preprocess, Grid3, LabelGrid,
    PreprocessConfig, Volume,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(vec![n, d], 1.0, rng);
    for row in t.data_mut().chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks_exact(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect()).unwrap()
}

fn to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()).unwrap()
}

fn loss_oracle_equivalence() -> Outcome {
    let mut rng = common::rng(1);
    let (mut worst64, mut worst32, mut worst_literal) = (0.0f64, 0.0f64, 0.0f64);
    let mut worst32_at = 0.0;
    for case in 0..100 {
        let n = rng.random_range(2..=64);
        let tau = [0.05, 0.1, 0.5][case % 3];
        let (z1, z2) = (unit_rows(n, 128, &mut rng), unit_rows(n, 128, &mut rng));
        let oracle = info_nce_oracle(&z1, &z2, tau).unwrap();
        worst_literal = worst_literal
            .max((oracle - common::info_nce_literal(&rows(&z1), &rows(&z2), tau)).abs() / oracle.abs().max(1.0));
        worst64 = worst64.max((info_nce_value(&z1, &z2, tau).unwrap() - oracle).abs());
        // The 32-bit path is judged against the oracle on its own rounded inputs.
        let (a, b) = (to_f32(&z1), to_f32(&z2));
        let oracle32 = info_nce_oracle(&to_f64(&a), &to_f64(&b), tau).unwrap();
        let dev = (info_nce_value(&a, &b, tau).unwrap() - oracle32).abs();
        if dev > worst32 {
            worst32 = dev;
            worst32_at = oracle32;
        }
    }
    outcome(
        worst64 <= 1e-10 && worst32 <= 1e-5 && worst_literal <= 1e-9,
        format!(
            "64-bit max |diff| {worst64:.2e} (tol 1e-10), 32-bit max |diff| {worst32:.2e} at loss {worst32_at:.1} \
             (tol 1e-5), oracle vs literal loops {worst_literal:.1e}"
        ),
    )
}

fn analytic_anchors() -> Outcome {
    let mut rng = common::rng(2);
    let mut ok = true;
    let mut notes = Vec::new();
    let (a, b) = (unit_rows(1, 16, &mut rng), unit_rows(1, 16, &mut rng));
    let single = info_nce_value(&a, &b, 0.1).unwrap();
    let single32 = info_nce_value(&to_f32(&a), &to_f32(&b), 0.1).unwrap();
    ok &= single == 0.0 && single32 == 0.0;
    notes.push(format!("N=1 loss {single} / {single32}"));
    let z = unit_rows(1, 16, &mut rng);
    let pair = Tensor::new(vec![2, 16], [z.data(), z.data()].concat()).unwrap();
    let target = 4.0 * 3f64.ln();
    let mut worst = 0.0f64;
    for tau in [0.05, 1.0, 100.0] {
        worst = worst.max((info_nce_value(&pair, &pair, tau).unwrap() - target).abs());
    }
    ok &= worst <= 1e-9;
    notes.push(format!("N=2 identical max |loss - 4 log 3| {worst:.1e} over tau in {{0.05, 1, 100}}"));
    outcome(ok, notes.join("; "))
}

const H: f64 = 1e-5;

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> voxcl_core::Result<Var> {
    let w = g.constant(Tensor::randn(g.shape(out).to_vec(), 1.0, &mut common::rng(seed)));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn gradient_checks() -> Outcome {
    let mut r = common::rng(3);
    let mut per_op: Vec<(&str, f64)> = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> voxcl_core::Result<Var>| {
        per_op.push((name, common::gradcheck(&inputs, H, f)));
    };
    let x = Tensor::randn(vec![2, 2, 5, 4, 3], 1.0, &mut r);
    let w = Tensor::randn(vec![3, 2, 3, 3, 2], 1.0, &mut r);
    let b = Tensor::randn(vec![3], 1.0, &mut r);
    check("conv3d", vec![x.clone(), w, b], &|g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), [2, 1, 1], [1, 1, 0])?;
        project(g, y, 10)
    });
    let s = Tensor::randn(vec![2], 1.0, &mut r);
    let h = Tensor::randn(vec![2], 1.0, &mut r);
    check("instance_norm3d", vec![x.clone(), s, h], &|g, v| {
        let y = g.instance_norm3d(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 11)
    });
    check("upsample3d", vec![Tensor::randn(vec![1, 2, 2, 3, 2], 1.0, &mut r)], &|g, v| {
        let y = g.upsample3d(v[0], [2, 2, 2])?;
        project(g, y, 12)
    });
    let m = Tensor::randn(vec![5, 6], 1.0, &mut r);
    let lw = Tensor::randn(vec![4, 6], 1.0, &mut r);
    let lb = Tensor::randn(vec![4], 1.0, &mut r);
    check("linear", vec![m.clone(), lw.clone(), lb], &|g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 13)
    });
    check("matmul_nt", vec![m.clone(), lw], &|g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        project(g, y, 14)
    });
    check("l2_normalize", vec![m.clone()], &|g, v| {
        let y = g.l2_normalize(v[0])?;
        project(g, y, 15)
    });
    // Bounded away from zero so the ReLU kink is never straddled.
    let away = Tensor::from_fn(vec![3, 4], |i| if i % 2 == 0 { 0.1 + 0.07 * i as f64 } else { -0.2 - 0.05 * i as f64 });
    let other = Tensor::randn(vec![3, 4], 1.0, &mut r);
    check("add/sub/mul/scale/relu", vec![away, other.clone()], &|g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let p = g.mul(d, v[1])?;
        let re = g.relu(v[0])?;
        let t = g.add(p, re)?;
        let t = g.scale(t, 0.7)?;
        project(g, t, 16)
    });
    check("logsumexp_last", vec![other.clone()], &|g, v| {
        let y = g.logsumexp_last(v[0])?;
        project(g, y, 17)
    });
    let distinct = Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.37).sin() + i as f64 * 0.01);
    check("max_last", vec![distinct], &|g, v| {
        let y = g.max_last(v[0])?;
        project(g, y, 18)
    });
    check("concat/take", vec![other, Tensor::randn(vec![3, 2], 1.0, &mut r)], &|g, v| {
        let cat = g.concat(&[v[0], v[1]], 1)?;
        let t = g.take(cat, &[0, 3, 5, 7, 11, 17])?;
        project(g, t, 19)
    });
    let index = vec![[0, 1, 2, 1], [1, 0, 0, 2], [1, 2, 3, 0]];
    check("gather_voxels", vec![x.clone()], &|g, v| {
        let y = g.gather_voxels(v[0], &index)?;
        project(g, y, 20)
    });
    let labels: Vec<usize> = (0..2 * 5 * 4 * 3).map(|i| i % 2).collect();
    check("cross_entropy", vec![x], &|g, v| g.cross_entropy(v[0], &labels));
    check("info_nce", vec![unit_rows(4, 6, &mut r), unit_rows(4, 6, &mut r)], &|g, v| info_nce(g, v[0], v[1], 0.1));
    let (op_name, op_worst) = per_op.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });

    let pipeline = tiny_pipeline_gradcheck();
    outcome(
        op_worst <= 1e-6 && pipeline <= 1e-4,
        format!(
            "{} ops, worst per-op relative error {op_worst:.1e} ({op_name}, tol 1e-6); tiny pipeline {pipeline:.1e} (tol 1e-4)",
            per_op.len()
        ),
    )
}

/// L=2, C0=2, patch 8×8×4, n=1, m=4 over every backbone and projector weight.
fn tiny_pipeline_gradcheck() -> f64 {
    use voxcl_core::sampler::{assemble_batch, SampleSource};
    use voxcl_core::train::contrastive_loss;

    let mut rng = common::rng(4);
    let config = FpnConfig { levels: 2, base_channels: 2, projector_hidden: 8, projection_dim: 4, ..FpnConfig::default() };
    let volume = Volume::new(Grid3::from_fn([12, 12, 6], |_, _, _| rng.random_range(-100.0..100.0)), [1.0, 1.0, 2.0]).unwrap();
    let mask = compute_body_mask(&volume, &PreprocessConfig::default());
    let batch = assemble_batch(
        &[SampleSource { volume: &volume, mask: &mask, seed: 5 }],
        &PatchSpec { extents: [8, 8, 4] },
        &SamplerConfig { m: 4, ..SamplerConfig::default() },
        &Default::default(),
    )
    .unwrap();
    let patches = to_f64(&batch.patches);
    let mut params: Params<f64> = init_backbone(&config, &mut rng).unwrap();
    params.extend(init_projector::<f64>(&config, &mut rng));
    let names: Vec<String> = params.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = params.values().cloned().collect();
    common::gradcheck(&inputs, 1e-6, |g, v| {
        let vars: ParamVars = names.iter().cloned().zip(v.iter().copied()).collect();
        let x = g.constant(patches.clone());
        contrastive_loss(g, &vars, &config, x, &batch.pairs, 0.5)
    })
}

fn representation_arithmetic() -> Outcome {
    let full = FpnConfig::full_scale();
    let shapes = pyramid_shapes(&full, 1, [64, 64, 32]).unwrap();
    let channels: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
    let dim = representation_dim(&full);
    let want: Vec<usize> = (0..6).map(|l| 16 << l).collect();
    outcome(
        dim == 1008 && channels == want && channels.iter().sum::<usize>() == dim,
        format!("representation_dim {dim}, level channels {channels:?}"),
    )
}

fn random_params(mut p: Params, rng: &mut impl Rng) -> Params {
    for t in p.values_mut() {
        *t = Tensor::randn(t.shape().to_vec(), 0.5, rng);
    }
    p
}

fn linear_head_equivalence() -> Outcome {
    let mut rng = common::rng(5);
    let config = FpnConfig::default();
    let k = 4;
    let dim = representation_dim(&config);
    let mut worst = 0.0f32;
    let mut voxels = 0;
    for pyramid in 0..5 {
        let input = Tensor::randn(vec![1, 1, 16, 16, 8], 1.0, &mut rng);
        let backbone: Params = init_backbone(&config, &mut common::rng(50 + pyramid)).unwrap();
        let head = random_params(init_linear_head(&config, k), &mut rng);
        let mut g = Graph::<f32>::new();
        let bv = ParamVars::new(&mut g, &backbone, false);
        let x = g.constant(input);
        let maps = fpn_forward(&mut g, &bv, &config, x).unwrap();
        let hv = ParamVars::new(&mut g, &head, false);
        let logits = linear_head_forward(&mut g, &hv, &config, &maps).unwrap();
        let logits = g.value(logits).clone();
        // Dense W = [W_0 | W_1 | W_2] over the concatenated representation.
        let mut w = vec![0.0f32; k * dim];
        let mut off = 0;
        for l in config.rep_levels() {
            let wl = &head[&format!("head.level{l}.weight")];
            let c = config.channels(l);
            for o in 0..k {
                w[o * dim + off..o * dim + off + c].copy_from_slice(&wl.data()[o * c..(o + 1) * c]);
            }
            off += c;
        }
        let bias = &head["head.level0.bias"];
        let picks: Vec<(usize, [usize; 3])> =
            (0..10).map(|_| (0, [rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..8)])).collect();
        let h = gather_representation(&mut g, &maps, &config, &picks).unwrap();
        let h = g.value(h).clone();
        for (i, &(_, v)) in picks.iter().enumerate() {
            for o in 0..k {
                let dense: f32 = bias.data()[o] + (0..dim).map(|j| w[o * dim + j] * h.data()[i * dim + j]).sum::<f32>();
                worst = worst.max((dense - logits.at(&[0, o, v[0], v[1], v[2]])).abs());
            }
            voxels += 1;
        }
    }
    outcome(worst <= 1e-5, format!("{voxels} voxels over 5 pyramids, max abs diff {worst:.1e} (tol 1e-5)"))
}

fn random_volume(rng: &mut impl Rng, max_extent: usize, air_prob: f64) -> Volume {
    let dims = [0; 3].map(|_| rng.random_range(1..=max_extent));
    let data = (0..dims.iter().product::<usize>())
        .map(|_| if rng.random_bool(air_prob) { rng.random_range(-1100.0..-501.0) } else { rng.random_range(-499.0..300.0) })
        .collect();
    Volume::new(Grid3::new(dims, data).unwrap(), [1.0; 3]).unwrap()
}

fn body_mask_oracle() -> Outcome {
    let cfg = PreprocessConfig::default();
    let mut rng = common::rng(6);
    let matches = |v: &Volume| {
        let air: Vec<bool> = v.intensities.data().iter().map(|&x| x < cfg.body_threshold_hu).collect();
        let oracle = common::bfs_corner_air(&air, v.dims());
        let got: Vec<bool> = compute_body_mask(v, &cfg).0.data().iter().map(|b| !b).collect();
        got == oracle
    };
    let mut agree = 0;
    for case in 0..200 {
        agree += matches(&random_volume(&mut rng, 16, [0.3, 0.5, 0.7, 0.9][case % 4])) as usize;
    }
    // A closed shell around an air cavity: the cavity belongs to the body.
    let shell = Volume::new(
        Grid3::from_fn([12, 12, 12], |x, y, z| {
            let d = [x, y, z].map(|c| (c as i32 - 6).abs()).into_iter().max().unwrap();
            if d == 3 { 40.0 } else { -1000.0 }
        }),
        [1.0; 3],
    )
    .unwrap();
    let mask = compute_body_mask(&shell, &cfg);
    let cavity_is_body = mask.is_body(6, 6, 6) && !mask.is_body(0, 0, 0) && matches(&shell);
    outcome(
        agree == 200 && cavity_is_body,
        format!("{agree}/200 random volumes equal the BFS oracle; enclosed cavity kept as body: {cavity_is_body}"),
    )
}

fn sampler_invariants() -> Outcome {
    let spec = PatchSpec::default();
    let cfg = SamplerConfig::default();
    let aug = Default::default();
    let mut rng = common::rng(7);
    let (mut pairs, mut good) = (0, 0);
    for seed in 0..20 {
        let lv = generate_phantom(&PhantomSpec::default(), 7000 + seed).unwrap();
        let p = preprocess(&lv.volume, None, &PreprocessConfig::default(), spec.extents).unwrap();
        let (v, mask) = (p.volume, p.mask);
        for _ in 0..50 {
            let pair = sample_patch_pair(&v, &mask, &spec, &cfg, &aug, &mut rng).unwrap();
            let g = &pair.geometry;
            let raw = g.origins.map(|o| extract_patch(&v, o, spec.extents));
            let distinct = g.positions.iter().collect::<HashSet<_>>().len() == cfg.m && g.positions.len() == cfg.m;
            let each = g.positions.iter().enumerate().all(|(i, pos)| {
                let in_body = mask.is_body(pos[0], pos[1], pos[2]);
                let in_overlap = (0..2).all(|k| (0..3).all(|a| g.origins[k][a] <= pos[a] && pos[a] < g.origins[k][a] + spec.extents[a]));
                let locals = (0..2).all(|k| (0..3).all(|a| g.locals[k][i][a] + g.origins[k][a] == pos[a]));
                let world = v.intensities.get(pos[0], pos[1], pos[2]);
                let raw_equal = (0..2).all(|k| {
                    let l = g.locals[k][i];
                    raw[k].get(l[0], l[1], l[2]).to_bits() == world.to_bits()
                });
                in_body && in_overlap && locals && raw_equal
            });
            pairs += 1;
            good += (distinct && each) as usize;
        }
    }
    outcome(good == pairs, format!("{good}/{pairs} pairs satisfy every invariant (m = {})", cfg.m))
}

/// Runtime budget for the desk-scale run, stated for 8 cores and scaled to
/// the cores actually available.
const DESK_BUDGET_8_CORES: Duration = Duration::from_secs(60 * 60);

struct SeedResult {
    initial: f64,
    initial_per_term: f64,
    final_mean: f64,
    log_target: f64,
    pretrained_dice: f64,
    random_dice: f64,
    all_finite: bool,
}

fn desk_run(seed: u64) -> SeedResult {
    let mut run = RunConfig::default();
    run.seed = seed;
    run.model.levels = 3;
    run.model.base_channels = 8;
    run.pretrain.total_batches = 2000;
    run.pretrain.volumes_per_batch = 4;
    run.sampler.m = 128;
    run.loss.temperature = 0.1;
    run.pretrain.adam.lr = 3e-4;
    let spec = PhantomSpec::default();
    assert_eq!(spec.extents, [64, 64, 32]);
    let prep = |i: u64| {
        let lv = generate_phantom(&spec, i).unwrap();
        Sample::prepare(format!("p{i}"), &lv.volume, Some(&lv.labels), &run.preprocess, &run.pretrain.patch).unwrap()
    };
    let base = 1_000_000 * (seed + 1);
    let unlabeled: Vec<Sample> = (0..100).map(|i| prep(base + i)).collect();
    let labeled: Vec<Sample> = (0..30).map(|i| prep(base + 500 + i)).collect();
    let (train, held_out) = split_validation(unlabeled, &run);
    let out = pretrain(&run, &train, &held_out, None, None).unwrap();
    let first = &out.validation[0];
    assert_eq!(first.step, 0);
    let window_start = run.pretrain.total_batches.saturating_sub(100);
    let tail: Vec<f64> = out.validation.iter().filter(|v| v.step > window_start).map(|v| v.loss).collect();
    let pairs = (run.pretrain.volumes_per_batch.min(held_out.len()) * run.sampler.m) as f64;

    let classes = run.probe.num_classes;
    let probe_dice = |ckpt: &Checkpoint| {
        let head = train_probe(ckpt, &run, &labeled[..20], true, None).unwrap();
        let predictor = Predictor::from_checkpoint(&head).unwrap();
        let mut total = 0.0;
        for s in &labeled[20..] {
            let seg = predict_volume(&predictor, &s.volume, run.pretrain.patch.extents, run.probe.window, 4).unwrap();
            let d = class_dice(&seg, s.labels.as_ref().unwrap(), classes).unwrap();
            total += d.iter().sum::<f64>() / d.len() as f64;
        }
        total / 10.0
    };
    let random = PretrainState::init(&run).unwrap().checkpoint(&run);
    SeedResult {
        initial: first.loss,
        initial_per_term: first.per_term,
        final_mean: tail.iter().sum::<f64>() / tail.len() as f64,
        log_target: (2.0 * pairs - 1.0).ln(),
        pretrained_dice: probe_dice(&out.checkpoint),
        random_dice: probe_dice(&random),
        all_finite: out.losses.iter().all(|l| l.is_finite()),
    }
}

fn desk_scale_utility() -> Outcome {
    let start = Instant::now();
    let results: Vec<SeedResult> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3).map(|seed| s.spawn(move || desk_run(seed))).collect();
        handles.into_iter().map(|h| h.join().expect("desk run")).collect()
    });
    let elapsed = start.elapsed();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let budget = DESK_BUDGET_8_CORES * 8 / cores as u32;
    let mut lines = Vec::new();
    let mut a = true;
    for (seed, r) in results.iter().enumerate() {
        let ratio = r.final_mean / r.initial;
        let near_log = (r.initial_per_term - r.log_target).abs() <= 0.15 * r.log_target;
        a &= ratio <= 0.5 && near_log && r.all_finite;
        lines.push(format!(
            "seed {seed}: val {:.1} -> {:.1} (x{ratio:.3}), initial per-term {:.3} vs log(2N-1) {:.3}, \
             macro-Dice pretrained {:.4} random {:.4}",
            r.initial, r.final_mean, r.initial_per_term, r.log_target, r.pretrained_dice, r.random_dice
        ));
    }
    let gap = results.iter().map(|r| r.pretrained_dice - r.random_dice).sum::<f64>() / results.len() as f64;
    let b = gap >= 0.05;
    let timely = elapsed <= budget;
    outcome(
        a && b && timely,
        format!(
            "(a) {} (b) mean Dice gap {gap:.4} (need >= 0.05) {}; runtime {:.0} s on {cores} core(s), budget {:.0} s\n    {}",
            if a { "ok" } else { "FAILED" },
            if b { "ok" } else { "FAILED" },
            elapsed.as_secs_f64(),
            budget.as_secs_f64(),
            lines.join("\n    ")
        ),
    )
}

fn finetune_schedule() -> Outcome {
    let s = FinetuneSchedule::full_length();
    let frozen = [0, 1, 7_500, 14_999].iter().all(|&t| backbone_lr(t, &s) == 0.0);
    let start = backbone_lr(15_000, &s);
    let end = backbone_lr(16_200, &s);
    let mid = backbone_lr(15_600, &s);
    let want = 3e-5 * 10f64.sqrt();
    let rel = (mid - want).abs() / want;
    outcome(
        frozen && start == 3e-5 && end == 3e-4 && rel <= 1e-12,
        format!("frozen before 15000: {frozen}; lr(15000) = {start:e}, lr(16200) = {end:e}, lr(15600) rel err {rel:.1e}"),
    )
}

fn tiny_run(seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.seed = seed;
    run.model = FpnConfig { levels: 2, base_channels: 2, projector_hidden: 16, projection_dim: 8, ..FpnConfig::default() };
    run.pretrain.patch.extents = [8, 8, 4];
    run.pretrain.volumes_per_batch = 1;
    run.pretrain.validation_volumes = 1;
    run.pretrain.validation_batches = 1;
    run.sampler.m = 4;
    run
}

fn determinism_and_persistence() -> Outcome {
    let mut run = tiny_run(10);
    run.pretrain.total_batches = 10;
    run.pretrain.checkpoint_every = 5;
    run.pretrain.validation_every = 5;
    // Soft-tissue noise with one bright block.
    let samples: Vec<Sample> = (0..4)
        .map(|i| {
            let mut rng = common::rng(100 + i);
            let hu = Grid3::from_fn([16, 16, 8], |x, y, z| {
                let bright = (3..8).contains(&x) && (3..8).contains(&y) && (2..6).contains(&z);
                (if bright { 150.0 } else { 0.0 }) + rng.random_range(-40.0..40.0)
            });
            let volume = Volume::new(hu, [1.0, 1.0, 2.0]).unwrap();
            Sample::prepare(format!("t{i}"), &volume, None, &run.preprocess, &run.pretrain.patch).unwrap()
        })
        .collect();
    let (train, val) = split_validation(samples, &run);
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = pretrain(&run, &train, &val, Some(dirs[0].path()), None).unwrap();
    let b = pretrain(&run, &train, &val, Some(dirs[1].path()), None).unwrap();
    let full = std::fs::read(dirs[0].path().join("final.vxckpt")).unwrap();
    let same_run = full == std::fs::read(dirs[1].path().join("final.vxckpt")).unwrap()
        && a.checkpoint.encode().unwrap() == b.checkpoint.encode().unwrap();

    let round_trip = Checkpoint::decode(&full).unwrap().encode().unwrap() == full;

    let mut rng = common::rng(11);
    let volume = Volume::new(Grid3::from_fn([5, 7, 3], |_, _, _| rng.random_range(-1000.0f32..1000.0)), [0.7, 0.9, 2.5]).unwrap();
    let bytes = encode_volume(&volume);
    let rvol = encode_volume(&decode_volume(&bytes).unwrap()) == bytes;
    let labels: LabelGrid = Grid3::from_fn([5, 7, 3], |x, y, z| ((x * y + z) % 4) as u16);
    let bytes = encode_labels(&labels);
    let rseg = encode_labels(&decode_labels(&bytes).unwrap()) == bytes;

    let mid = load_checkpoint(&dirs[0].path().join("ckpt_000005.vxckpt")).unwrap();
    let resumed = pretrain(&run, &train, &val, Some(dirs[2].path()), Some(&mid)).unwrap();
    let resume = resumed.checkpoint.encode().unwrap() == full;
    outcome(
        same_run && round_trip && rvol && rseg && resume,
        format!(
            "10-step reruns identical: {same_run}; checkpoint round trip: {round_trip}; RVOL1: {rvol}; RSEG1: {rseg}; \
             resume from step 5: {resume}"
        ),
    )
}

fn set_dice(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

fn dice_anchors() -> Outcome {
    let dims = [4, 4, 2];
    let a: LabelGrid = Grid3::from_fn(dims, |x, _, _| (x < 2) as u16);
    let disjoint: LabelGrid = Grid3::from_fn(dims, |x, _, _| (x >= 2) as u16);
    // |P| = |G| = 16, |P ∩ G| = 8.
    let half: LabelGrid = Grid3::from_fn(dims, |x, _, _| (1..3).contains(&x) as u16);
    let identical = dice_score(&a, &a, 1).unwrap();
    let zero = dice_score(&a, &disjoint, 1).unwrap();
    let halfway = dice_score(&a, &half, 1).unwrap();
    let mut rng = common::rng(12);
    let mut symmetric = 0;
    for _ in 0..100 {
        let dims = [rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..5)];
        let p: LabelGrid = Grid3::from_fn(dims, |_, _, _| rng.random_range(0..3u16));
        let q: LabelGrid = Grid3::from_fn(dims, |_, _, _| rng.random_range(0..3u16));
        let members = |g: &LabelGrid| -> HashSet<usize> { g.data().iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect() };
        let pq = dice_score(&p, &q, 1).unwrap();
        symmetric += (pq == dice_score(&q, &p, 1).unwrap() && (pq - set_dice(&members(&p), &members(&q))).abs() <= 1e-15) as usize;
    }
    outcome(
        identical == 1.0 && zero == 0.0 && halfway == 0.5 && symmetric == 100,
        format!("identical {identical}, disjoint {zero}, half overlap {halfway}, symmetric pairs {symmetric}/100"),
    )
}

type Criterion = (u32, &'static str, Option<Duration>, fn() -> Outcome);

static LAST_PANIC: Mutex<Option<String>> = Mutex::new(None);

fn main() -> ExitCode {
    // Keep the report to one line per criterion.
    std::panic::set_hook(Box::new(|info| {
        let at = info.location().map_or(String::new(), |l| format!("{}:{}", l.file(), l.line()));
        let msg = info
            .payload()
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| info.payload().downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        *LAST_PANIC.lock().unwrap() = Some(format!("{at}: {msg}"));
    }));
    let criteria: [Criterion; 11] = [
        (1, "loss-oracle equivalence", Some(Duration::from_secs(10)), loss_oracle_equivalence),
        (2, "analytic InfoNCE anchors", None, analytic_anchors),
        (3, "gradient checks", Some(Duration::from_secs(300)), gradient_checks),
        (4, "representation arithmetic", Some(Duration::from_secs(1)), representation_arithmetic),
        (5, "linear-head equivalence", None, linear_head_equivalence),
        (6, "body-mask oracle", None, body_mask_oracle),
        (7, "sampler invariants", None, sampler_invariants),
        (8, "desk-scale utility", None, desk_scale_utility),
        (9, "fine-tune schedule", None, finetune_schedule),
        (10, "determinism and persistence", None, determinism_and_persistence),
        (11, "Dice metric anchors", None, dice_anchors),
    ];
    let only: Option<Vec<u32>> = std::env::var("VOXCL_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| outcome(false, format!("panicked at {}", LAST_PANIC.lock().unwrap().take().unwrap_or_default())));
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let pass = result.pass && in_time;
        failed += !pass as usize;
        let budget = limit.map_or(String::new(), |l| format!(" (limit {:.0} s)", l.as_secs_f64()));
        println!(
            "criterion {id:>2} {} {name}: {} [{:.2} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    }
}
