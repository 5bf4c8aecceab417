//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria. The target
//! exits nonzero when a gating criterion fails. Criterion 9 compares two
//! training runs at reduced scale, so it is reported but not gating.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use ccnet::cli::{main_with_args, predict_case, DataSection};
use ccnet::datapipe::{
    preprocess, sample_patch, split, synth_generate, Case, PatchSpec, PreprocessConfig, SplitSpec, SynthConfig,
};
use ccnet::inference::{binarize, coverage, sliding_window_predict, window_origins, DEFAULT_STRIDE};
use ccnet::metrics::{asd, dice, hd95, jaccard, surface_distances};
use ccnet::nn::Module;
use ccnet::training::{
    compute_gradients, evaluate_loss, sharpen, sharpen_value, supervised_loss, total_loss, train,
    train_step, unsupervised_loss, Batch, TrainConfig, TrainData, TrainMode, TrainState,
};
use ccnet::{ArchConfig, CcNet, Grid, Mask, ProbabilityMap, Role, SkipConfig, Tensor, Volume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    title: &'static str,
    budget: Option<Duration>,
    // a failing non-gating criterion is reported but does not fail the target
    gating: bool,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, title: "reference-scale numbers", budget: None, gating: true, run: c1_scale_statement },
    Criterion { id: 2, title: "architecture invariants", budget: Some(Duration::from_secs(60)), gating: true, run: c2_architecture },
    Criterion { id: 3, title: "loss identities", budget: Some(Duration::from_secs(60)), gating: true, run: c3_losses },
    Criterion { id: 4, title: "sharpening", budget: None, gating: true, run: c4_sharpen },
    Criterion { id: 5, title: "gradient contract", budget: Some(Duration::from_secs(300)), gating: true, run: c5_gradients },
    Criterion { id: 6, title: "metric oracles", budget: None, gating: true, run: c6_metrics },
    Criterion { id: 7, title: "sliding window", budget: None, gating: true, run: c7_sliding_window },
    Criterion { id: 8, title: "overfit sanity", budget: Some(Duration::from_secs(900)), gating: true, run: c8_overfit },
    Criterion { id: 9, title: "semi-supervised gain", budget: None, gating: false, run: c9_semi_supervised_gain },
    Criterion { id: 10, title: "determinism", budget: None, gating: true, run: c10_determinism },
    Criterion { id: 11, title: "ablation plumbing", budget: None, gating: true, run: c11_ablation },
];

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut gating_failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = t.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(m), Some(b)) if elapsed > b => Err(format!("{m}; runtime {elapsed:.1?} over budget {b:?}")),
            (o, _) => o,
        };
        let (tag, msg) = match outcome {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                if c.gating {
                    gating_failed += 1;
                    ("FAIL", m)
                } else {
                    ("FAIL (non-gating)", m)
                }
            }
        };
        println!("criterion {:>2} {tag} [{}] ({:.1}s) {msg}", c.id, c.title, elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed ({gating_failed} gating)", ran - failed);
    if gating_failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_tensor<F: ccnet::Real>(rng: &mut ChaCha8Rng, batch: usize, dims: [usize; 3]) -> Tensor<F> {
    let n = batch * dims.iter().product::<usize>();
    let data = (0..n).map(|_| F::from_f64c(rng.random_range(-1.0..1.0))).collect();
    Tensor::from_vec(batch, 1, dims, data).unwrap()
}

fn bits<F: ccnet::Real>(t: &[F]) -> Vec<u64> {
    t.iter().map(|v| v.to_f64c().to_bits()).collect()
}

// 1

fn c1_scale_statement() -> Outcome {
    Ok("Dice 89.82% (10% labels) and 91.27% (20% labels) need the gated left-atrium challenge data \
        and GPU-scale training; not desk-reproducible, criteria 2-11 substitute property checks"
        .into())
}

// 2

fn c2_architecture() -> Outcome {
    let (a1, a2) = (SkipConfig::for_role(Role::Aux1), SkipConfig::for_role(Role::Aux2));
    let s1: BTreeSet<usize> = a1.skip_layers().into_iter().collect();
    let s2: BTreeSet<usize> = a2.skip_layers().into_iter().collect();
    let off1: BTreeSet<usize> = (1..=4).filter(|l| !s1.contains(l)).collect();
    let off2: BTreeSet<usize> = (1..=4).filter(|l| !s2.contains(l)).collect();
    ensure(off1 == [2, 4].into() && off2 == [1, 3].into(), || {
        format!("disabled skips aux1 {off1:?}, aux2 {off2:?}")
    })?;
    ensure(
        s1.is_disjoint(&s2) && s1.union(&s2).copied().collect::<BTreeSet<_>>() == (1..=4).collect(),
        || "aux skip sets do not partition {1,2,3,4}".into(),
    )?;
    ensure(SkipConfig::for_role(Role::Main).skip_layers() == vec![1, 2, 3, 4], || {
        "main model must keep every skip".into()
    })?;

    let arch = ArchConfig {
        base_channels: 4,
        ..Default::default()
    };
    let net: CcNet<f32> = ok(CcNet::new(&arch, 7))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Tensor<f32> = random_tensor(&mut rng, 1, [32, 32, 32]);
    let mut report = Vec::new();
    for (role, unused) in [(Role::Aux1, [1usize, 3]), (Role::Aux2, [2, 4])] {
        let m = net.model(role);
        let feats = ok(m.encode(&x))?;
        let clean = ok(m.decode(&feats))?;
        let mut noisy = feats.clone();
        for &l in &unused {
            for v in noisy.level_mut(l).data_mut() {
                *v += rng.random_range(-10.0f32..10.0);
            }
        }
        let out = ok(m.decode(&noisy))?;
        ensure(bits(out.tensor().data()) == bits(clean.tensor().data()), || {
            format!("{role} output changed under noise in a_{unused:?}")
        })?;
        // control: the same noise on a consumed level must be visible
        let used = SkipConfig::for_role(role).consumed_levels()[0];
        let mut control = feats.clone();
        for v in control.level_mut(used).data_mut() {
            *v += 10.0;
        }
        let moved = ok(m.decode(&control))?;
        ensure(bits(moved.tensor().data()) != bits(clean.tensor().data()), || {
            format!("{role} ignores consumed level a_{used}")
        })?;
        report.push(format!("{role} invariant to a_{:?}", unused));
    }
    let pm = net.model(Role::Main).param_count();
    let p1 = net.model(Role::Aux1).param_count();
    let p2 = net.model(Role::Aux2).param_count();
    ensure(p1 < pm && p2 < pm, || format!("params main {pm}, aux1 {p1}, aux2 {p2}"))?;
    Ok(format!(
        "skips aux1 {s1:?} / aux2 {s2:?} partition 1..4; {}; params main {pm} > aux1 {p1}, aux2 {p2}",
        report.join(", ")
    ))
}

// 3

fn fg_map(batch: usize, dims: [usize; 3], fg: &[f64]) -> ProbabilityMap<f64> {
    ProbabilityMap::from_foreground(batch, dims, fg).unwrap()
}

fn c3_losses() -> Outcome {
    let dims = [8, 8, 8];
    let n = 2 * 512;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let onehot: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let mut worst_unsup: f64 = 0.0;
    for fg in [onehot.clone(), vec![0.5; n]] {
        let p = fg_map(2, dims, &fg);
        let y = ok(sharpen(&p, 0.1))?;
        let u = ok(unsupervised_loss(&p, &p, &p, &y, &y, &y))?;
        worst_unsup = worst_unsup.max(u.abs());
    }
    ensure(worst_unsup == 0.0, || format!("unsupervised loss {worst_unsup:e} on fixed points"))?;

    let labels = Tensor::from_vec(2, 1, dims, onehot.clone()).unwrap();
    let perfect = fg_map(2, dims, &onehot);
    let sup = ok(supervised_loss(
        &perfect,
        &perfect,
        &perfect,
        Some(&labels),
        ccnet::training::Reduction::Mean,
    ))?;
    ensure(sup <= 1e-4, || format!("supervised loss {sup:e} on perfect predictions"))?;

    // hand-computed weighted sums, including a real forward pass
    let cfg = TrainConfig {
        max_iteration: 200,
        lambda_s: 0.3,
        lambda_u_max: 1.0,
        patch: PatchSpec::new([16, 16, 16]).unwrap(),
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for (t, sup, unsup) in [(0, 1.7, 0.2), (50, 0.9, 0.05), (100, 0.4, 0.3), (200, 0.1, 0.01), (350, 2.0, 1.0)] {
        let ramp = (-5.0 * (1.0 - (t as f64 / 200.0).min(1.0)).powi(2)).exp();
        let hand = 0.3 * sup + 1.0 * ramp * unsup;
        worst = worst.max((total_loss(sup, unsup, t, &cfg) - hand).abs());
    }
    let arch = ArchConfig {
        base_channels: 2,
        ..Default::default()
    };
    let mut net: CcNet<f64> = ok(CcNet::new(&arch, 5))?;
    let images = random_tensor(&mut rng, 2, [16, 16, 16]);
    let lab = Tensor::from_vec(
        1,
        1,
        [16, 16, 16],
        (0..4096).map(|i| f64::from(u8::from(i % 16 < 7))).collect(),
    )
    .unwrap();
    let batch = ok(Batch::new(images, lab))?;
    for t in [0, 70, 200] {
        let l = ok(evaluate_loss(&mut net, &cfg, &batch, t))?;
        let ramp = (-5.0 * (1.0 - t as f64 / 200.0).powi(2)).exp();
        let hand = 0.3 * l.sup + ramp * l.unsup;
        worst = worst.max((l.total - hand).abs()).max((l.lambda_u - ramp).abs());
        ensure(l.unsup > 0.0 && l.sup > 0.0, || "forward pass produced a degenerate loss".into())?;
    }
    ensure(worst <= 1e-12, || format!("total loss deviates from weighted sum by {worst:e}"))?;
    Ok(format!(
        "L_unsup on one-hot and uniform-0.5 = {worst_unsup}; L_sup(perfect) = {sup:.2e}; weighted-sum max deviation {worst:.1e}"
    ))
}

// 4

fn sharpen_oracle(p: f64, t: f64) -> f64 {
    let a = p.powf(1.0 / t);
    let b = (1.0 - p).powf(1.0 / t);
    a / (a + b)
}

fn c4_sharpen() -> Outcome {
    for t in [0.1, 0.5, 1.0] {
        for p in [0.0, 0.5, 1.0] {
            let s = sharpen_value(p, t);
            ensure(s == p, || format!("sharpen({p}, T={t}) = {s}"))?;
        }
        let grid: Vec<f64> = (0..=1000).map(|i| sharpen_value(i as f64 / 1000.0, t)).collect();
        ensure(grid.windows(2).all(|w| w[0] <= w[1]), || format!("not monotone at T={t}"))?;
        ensure(
            grid[..500].iter().all(|&v| v < 0.5) && grid[501..].iter().all(|&v| v > 0.5),
            || format!("sharpening crosses 0.5 off-centre at T={t}"),
        )?;
    }
    let map = fg_map(1, [3, 1, 1], &[0.0, 0.5, 1.0]);
    let y = ok(sharpen(&map, 0.1))?;
    ensure(y.foreground(0) == [0.0, 0.5, 1.0], || "map-level fixed points moved".into())?;
    let s = sharpen_value(0.6, 0.1);
    let oracle = sharpen_oracle(0.6, 0.1);
    ensure((s - 0.98296).abs() <= 1e-4 && (s - oracle).abs() <= 1e-12, || {
        format!("sharpen(0.6, 0.1) = {s}, oracle {oracle}")
    })?;
    Ok(format!(
        "fixed points exact, 1001-point grid monotone, sharpen(0.6, T=0.1) = {s:.6} (oracle {oracle:.6}, pinned 0.98296)"
    ))
}

// 5

fn grads_of(net: &CcNet<f64>) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    net.visit("", &mut |name, p| {
        if p.trainable {
            out.push((name.to_string(), p.grad.clone()))
        }
    });
    out
}

fn bump(net: &mut CcNet<f64>, name: &str, index: usize, delta: f64) {
    net.visit_mut("", &mut |n, p| {
        if n == name {
            p.value[index] += delta;
        }
    });
}

fn c5_gradients() -> Outcome {
    let arch = ArchConfig {
        base_channels: 2,
        ..Default::default()
    };
    let cfg = TrainConfig {
        max_iteration: 100,
        labeled_per_batch: 1,
        unlabeled_per_batch: 1,
        patch: PatchSpec::new([16, 16, 16]).unwrap(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = [16, 16, 16];
    let images: Tensor<f64> = random_tensor(&mut rng, 2, dims);
    let sphere: Vec<f64> = (0..4096)
        .map(|i| {
            let (x, y, z) = ((i % 16) as f64, ((i / 16) % 16) as f64, (i / 256) as f64);
            f64::from(u8::from((x - 7.5).powi(2) + (y - 8.0).powi(2) + (z - 6.5).powi(2) < 25.0))
        })
        .collect();
    let labels = Tensor::from_vec(1, 1, dims, sphere).unwrap();
    let batch = ok(Batch::new(images.clone(), labels))?;
    let iteration = 50;

    let mut net: CcNet<f64> = ok(CcNet::new(&arch, 11))?;
    ok(compute_gradients(&mut net, &cfg, &batch, iteration))?;
    let analytic = grads_of(&net);

    // sample entries from every role; skip those with |g| too small for a relative test
    let mut candidates: Vec<(String, usize, f64)> = analytic
        .iter()
        .flat_map(|(n, g)| g.iter().enumerate().map(move |(i, &v)| (n.clone(), i, v)))
        .filter(|(_, _, g)| g.abs() > 1e-6)
        .collect();
    candidates.shuffle(&mut rng);
    let mut picked: Vec<(String, usize, f64)> = Vec::new();
    for role in ["main/", "aux1/", "aux2/"] {
        picked.extend(candidates.iter().filter(|c| c.0.starts_with(role)).take(10).cloned());
    }
    ensure(picked.len() >= 20, || format!("only {} checkable parameters", picked.len()))?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for (name, i, g) in &picked {
        bump(&mut net, name, *i, h);
        let plus = ok(evaluate_loss(&mut net, &cfg, &batch, iteration))?.total;
        bump(&mut net, name, *i, -2.0 * h);
        let minus = ok(evaluate_loss(&mut net, &cfg, &batch, iteration))?.total;
        bump(&mut net, name, *i, h);
        let fd = (plus - minus) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs());
        if rel > worst {
            worst = rel;
            worst_name = format!("{name}[{i}]: analytic {g:e}, numeric {fd:e}");
        }
    }
    ensure(worst <= 1e-3, || format!("relative error {worst:.2e} at {worst_name}"))?;

    // detached pseudo-labels and no labeled case: nothing reaches the main model
    let detached = TrainConfig {
        detach_pseudo_labels: true,
        ..cfg.clone()
    };
    let unlabeled = ok(Batch::new(images, Tensor::zeros(0, 1, dims)))?;
    let l = ok(compute_gradients(&mut net, &detached, &unlabeled, iteration))?;
    let mut main_nonzero = 0usize;
    net.visit_role(Role::Main, &mut |_, p| main_nonzero += p.grad.iter().filter(|&&g| g != 0.0).count());
    let mut aux_nonzero = 0usize;
    for r in [Role::Aux1, Role::Aux2] {
        net.visit_role(r, &mut |_, p| aux_nonzero += p.grad.iter().filter(|&&g| g != 0.0).count());
    }
    ensure(l.sup == 0.0 && main_nonzero == 0, || {
        format!("L_sup {} and {main_nonzero} nonzero main-model gradients", l.sup)
    })?;
    ensure(aux_nonzero > 0, || "auxiliary models received no gradient".into())?;
    Ok(format!(
        "{} parameters (f64, base 2, 16^3, batch 2) max relative error {worst:.2e}; detached main gradient exactly 0 ({aux_nonzero} aux entries nonzero)",
        picked.len()
    ))
}

// 6

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Mask {
    let density = rng.random_range(0.05..0.6);
    Grid::from_fn(dims, |_| rng.random_bool(density))
}

fn oracle_surface(m: &Mask) -> Vec<[usize; 3]> {
    let d = m.dims();
    let mut out = Vec::new();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if !*m.get([x, y, z]) {
                    continue;
                }
                let p = [x as isize, y as isize, z as isize];
                let offsets = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                let edge = offsets.iter().any(|o| {
                    let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                    if (0..3).any(|a| q[a] < 0 || q[a] >= d[a] as isize) {
                        return true;
                    }
                    !*m.get([q[0] as usize, q[1] as usize, q[2] as usize])
                });
                if edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn oracle_distances(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Option<Vec<f64>> {
    let (sa, sb) = (oracle_surface(a), oracle_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| {
        set.iter()
            .map(|q| {
                (0..3)
                    .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    d.extend(sb.iter().map(|p| nearest(p, &sa)));
    Some(d)
}

fn oracle_hd95(d: &[f64]) -> f64 {
    let mut v = d.to_vec();
    v.sort_by(f64::total_cmp);
    let r = 0.95 * (v.len() - 1) as f64;
    let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
    v[lo] * (1.0 - (r - lo as f64)) + v[hi] * (r - lo as f64)
}

fn c6_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dims = [8, 8, 8];
    let mut worst: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    let mut undefined = 0;
    for k in 0..100 {
        let a = random_mask(&mut rng, dims);
        let b = random_mask(&mut rng, dims);
        let spacing = if k % 2 == 0 {
            [1.0, 1.0, 1.0]
        } else {
            [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]
        };
        let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            inter += usize::from(x && y);
            na += usize::from(x);
            nb += usize::from(y);
        }
        let d_oracle = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        let union = na + nb - inter;
        let j_oracle = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let d = ok(dice(&a, &b))?;
        let j = ok(jaccard(&a, &b))?;
        worst = worst.max((d - d_oracle).abs()).max((j - j_oracle).abs());
        worst_identity = worst_identity.max((j - d / (2.0 - d)).abs());
        let oracle = oracle_distances(&a, &b, spacing);
        let (h, s) = (ok(hd95(&a, &b, spacing))?, ok(asd(&a, &b, spacing))?);
        match oracle {
            None => {
                undefined += 1;
                ensure(h.is_none() && s.is_none(), || format!("pair {k}: distances should be undefined"))?;
            }
            Some(dist) => {
                let (h, s) = (h.ok_or("hd95 undefined")?, s.ok_or("asd undefined")?);
                let s_oracle = dist.iter().sum::<f64>() / dist.len() as f64;
                worst = worst.max((h - oracle_hd95(&dist)).abs()).max((s - s_oracle).abs());
            }
        }
        if let (Some(d1), Some(d2)) = (
            ok(surface_distances(&a, &b, spacing))?,
            ok(surface_distances(&a, &b, spacing.map(|v| 2.0 * v)))?,
        ) {
            ensure(d1.iter().zip(&d2).all(|(x, y)| 2.0 * x == *y), || {
                format!("pair {k}: doubled spacing is not exactly 2x")
            })?;
            let doubled = spacing.map(|v| 2.0 * v);
            ensure(
                ok(hd95(&a, &b, doubled))? == h.map(|v| 2.0 * v) && ok(asd(&a, &b, doubled))? == s.map(|v| 2.0 * v),
                || format!("pair {k}: doubled spacing does not double hd95/asd exactly"),
            )?;
        }
    }
    // one empty-surface pair is always exercised
    let empty = Mask::filled(dims, false);
    let any = random_mask(&mut rng, dims);
    ensure(ok(hd95(&empty, &any, [1.0; 3]))?.is_none(), || "empty mask must give undefined hd95".into())?;
    ensure(worst <= 1e-9, || format!("max deviation from brute force {worst:e}"))?;
    ensure(worst_identity <= 1e-12, || format!("jaccard identity off by {worst_identity:e}"))?;
    Ok(format!(
        "100 pairs: max |metric - brute force| {worst:.1e}, |J - D/(2-D)| {worst_identity:.1e}, doubling exact, {undefined} undefined-surface pairs"
    ))
}

// 7

fn c7_sliding_window() -> Outcome {
    let arch = ArchConfig {
        base_channels: 2,
        ..Default::default()
    };
    let mut net: CcNet<f32> = ok(CcNet::new(&arch, 13))?;
    // zero head weights with a biased foreground logit make every patch constant
    let logit = 0.7f32;
    let expected = 1.0 / (1.0 + (-logit).exp());
    net.visit_role_mut(Role::Main, &mut |name, p| {
        if name.ends_with("head.weight") {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        } else if name.ends_with("head.bias") {
            p.value = vec![0.0, logit];
        }
    });
    let dims = [140, 140, 88];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let volume = ok(Volume::new(
        "const",
        Grid::from_fn(dims, |_| rng.random_range(-2.0f32..2.0)),
        [1.0; 3],
    ))?;
    let patch = PatchSpec::default();
    let probs = ok(sliding_window_predict(&net.main(), &volume, &patch, DEFAULT_STRIDE))?;
    let dev = probs
        .foreground(0)
        .iter()
        .map(|&v| (f64::from(v) - f64::from(expected)).abs())
        .fold(0.0, f64::max);
    ensure(dev <= 1e-6, || format!("max deviation {dev:e} from constant {expected}"))?;

    // independent sweep: every stride step plus an edge-aligned final window
    let mut count = vec![0u32; dims.iter().product()];
    let starts = |len: usize, p: usize, s: usize| {
        let mut v: Vec<usize> = Vec::new();
        let mut o = 0;
        while o + p <= len {
            v.push(o);
            o += s;
        }
        if v.last() != Some(&(len - p)) {
            v.push(len - p);
        }
        v
    };
    let sx = starts(dims[0], patch.size[0], DEFAULT_STRIDE[0]);
    let sy = starts(dims[1], patch.size[1], DEFAULT_STRIDE[1]);
    let sz = starts(dims[2], patch.size[2], DEFAULT_STRIDE[2]);
    for &oz in &sz {
        for &oy in &sy {
            for &ox in &sx {
                for z in oz..oz + patch.size[2] {
                    for y in oy..oy + patch.size[1] {
                        for x in ox..ox + patch.size[0] {
                            count[x + dims[0] * (y + dims[1] * z)] += 1;
                        }
                    }
                }
            }
        }
    }
    let lib = coverage(dims, patch.size, DEFAULT_STRIDE);
    let windows = window_origins(dims, patch.size, DEFAULT_STRIDE).len();
    ensure(windows == sx.len() * sy.len() * sz.len(), || format!("{windows} windows"))?;
    ensure(lib.data() == count.as_slice(), || "coverage differs from the independent sweep".into())?;
    let min = count.iter().copied().min().unwrap_or(0);
    ensure(min >= 1, || format!("uncovered voxels (min count {min})"))?;
    Ok(format!(
        "constant {expected:.6} reconstructed within {dev:.1e} on 140x140x88; {windows} windows, min coverage {min}"
    ))
}

// 8

fn c8_overfit() -> Outcome {
    let cases = ok(synth_generate(&SynthConfig {
        n_cases: 2,
        dims: [64, 64, 64],
        ..Default::default()
    }))?;
    let pp = PreprocessConfig::default();
    let cases: Vec<Case> = ok(cases.iter().map(|c| preprocess(c, &pp)).collect())?;
    let cfg = TrainConfig {
        max_iteration: 300,
        labeled_per_batch: 2,
        unlabeled_per_batch: 0,
        patch: ok(PatchSpec::new([32, 32, 32]))?,
        ..Default::default()
    };
    let arch = ArchConfig {
        base_channels: 4,
        ..Default::default()
    };
    let data = ok(TrainData::new(cases.clone(), Vec::new(), &cfg.patch))?;
    let state = ok(train(&cfg, &arch, data, None))?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut scores = Vec::new();
    for i in 0..16 {
        let (img, lab) = ok(sample_patch(&cases[i % 2], &cfg.patch, &mut rng))?;
        let x: Tensor<f32> = ok(Tensor::from_grids([&img]))?;
        let p = ok(state.net.main().forward(&x))?;
        scores.push(ok(dice(&binarize(&p, 0.5), lab.as_ref().ok_or("missing label")?))?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let min = scores.iter().copied().fold(1.0, f64::min);
    ensure(mean >= 0.90, || format!("training-patch Dice {mean:.4} < 0.90"))?;
    Ok(format!(
        "main-model Dice on 16 training patches {mean:.4} (min {min:.3}) after 300 iterations, base 4, final L_sup {:.3}",
        state.history.last().map_or(f64::NAN, |r| r.l_sup)
    ))
}

// 9

/// Reduced geometry so three seeds of both arms fit a CPU budget.
const C9_DIMS: [usize; 3] = [48, 48, 32];
const C9_PATCH: [usize; 3] = [32, 32, 16];
const C9_BASE: usize = 4;
const C9_SEEDS: [u64; 3] = [1, 2, 3];

fn c9_arm(seed: u64, mode: TrainMode) -> Result<f64, String> {
    let cases = ok(synth_generate(&SynthConfig {
        n_cases: 50,
        dims: C9_DIMS,
        seed,
        ..Default::default()
    }))?;
    let s = ok(split(
        cases,
        &SplitSpec {
            train_count: 40,
            test_count: 10,
            labeled_fraction: 0.1,
            seed,
        },
    ))?;
    let pp = PreprocessConfig::default();
    let labeled: Vec<Case> = ok(s.labeled.iter().map(|c| preprocess(c, &pp)).collect())?;
    let unlabeled: Vec<Case> = ok(s.unlabeled.iter().map(|c| preprocess(&c.unlabeled(), &pp)).collect())?;
    let cfg = TrainConfig {
        max_iteration: 1000,
        seed,
        mode,
        patch: ok(PatchSpec::new(C9_PATCH))?,
        ..Default::default()
    };
    let arch = ArchConfig {
        base_channels: C9_BASE,
        ..Default::default()
    };
    let state = ok(train(&cfg, &arch, ok(TrainData::new(labeled, unlabeled, &cfg.patch))?, None))?;
    let mut total = 0.0;
    for c in &s.test {
        let m = ok(predict_case(&state.net, c, &DataSection::default(), &cfg.patch, DEFAULT_STRIDE, 0.5))?;
        total += ok(dice(&m, c.label.as_ref().ok_or("test case without label")?))?;
    }
    Ok(total / s.test.len() as f64)
}

fn c9_semi_supervised_gain() -> Outcome {
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    for seed in C9_SEEDS {
        let cc = c9_arm(seed, TrainMode::CcNet)?;
        let sup = c9_arm(seed, TrainMode::SupervisedOnly)?;
        rows.push(format!("seed {seed}: cc {cc:.4} vs sup {sup:.4}"));
        gaps.push(cc - sup);
    }
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let msg = format!("mean test Dice gap {gap:+.4} ({})", rows.join("; "));
    ensure(gap >= 0.0, || msg.clone())?;
    Ok(msg)
}

// 10

fn c10_determinism() -> Outcome {
    let cases = ok(synth_generate(&SynthConfig {
        n_cases: 4,
        dims: [40, 40, 24],
        ..Default::default()
    }))?;
    let cfg = TrainConfig {
        max_iteration: 10,
        seed: 1337,
        labeled_per_batch: 1,
        unlabeled_per_batch: 1,
        patch: ok(PatchSpec::new([32, 32, 16]))?,
        ..Default::default()
    };
    let arch = ArchConfig {
        base_channels: 4,
        ..Default::default()
    };
    let run = || -> Result<(Vec<u64>, Vec<u64>), String> {
        let data = ok(TrainData::new(cases[..1].to_vec(), cases[1..].to_vec(), &cfg.patch))?;
        let st = ok(train(&cfg, &arch, data, None))?;
        let trace = st
            .history
            .iter()
            .flat_map(|r| [r.l_sup, r.l_unsup, r.lambda_u, r.l_total, r.lr])
            .map(f64::to_bits)
            .collect();
        let mut params = Vec::new();
        st.net.visit("", &mut |_, p| params.extend(p.value.iter().map(|v| u64::from(v.to_bits()))));
        Ok((trace, params))
    };
    let (t1, p1) = run()?;
    let (t2, p2) = run()?;
    ensure(t1.len() == 50, || format!("trace has {} entries", t1.len()))?;
    ensure(t1 == t2, || "loss traces differ".into())?;
    ensure(p1 == p2, || "final parameters differ".into())?;
    Ok(format!("10-step traces and {} final parameters bit-identical across two seed-1337 runs", p1.len()))
}

// 11

fn c11_ablation() -> Outcome {
    let arch = ArchConfig {
        base_channels: 2,
        shared_encoder: true,
        ..Default::default()
    };
    let cfg = TrainConfig {
        max_iteration: 3,
        labeled_per_batch: 1,
        unlabeled_per_batch: 1,
        patch: ok(PatchSpec::new([16, 16, 16]))?,
        ..Default::default()
    };
    let mut state = ok(TrainState::<f32>::new(cfg, &arch))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Tensor<f32> = random_tensor(&mut rng, 2, [16, 16, 16]);
    let labels = Tensor::from_vec(1, 1, [16, 16, 16], (0..4096).map(|i| f32::from(u8::from(i % 3 == 0))).collect())
        .unwrap();
    let batch = ok(Batch::new(x.clone(), labels))?;
    let identical = |net: &CcNet<f32>| -> Result<bool, String> {
        let f: Vec<_> = Role::ALL.iter().map(|&r| net.model(r).encode(&x)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        Ok(f.windows(2).all(|w| {
            w[0].levels().iter().zip(w[1].levels()).all(|(a, b)| bits(a.data()) == bits(b.data()))
        }))
    };
    ensure(identical(&state.net)?, || "shared encoder features differ before training".into())?;
    for _ in 0..3 {
        ok(train_step(&mut state, &batch))?;
    }
    ensure(identical(&state.net)?, || "shared encoder features differ after training".into())?;
    let shared = state.net.distinct_encoder_param_count();

    let dir = ok(tempfile::tempdir())?;
    let wd = dir.path();
    std::fs::write(
        wd.join("ablate.toml"),
        r#"
[synth]
n_cases = 5
dims = [32, 32, 32]
train_count = 4
gzip = false

[data]
labeled_fraction = 0.25

[arch]
base_channels = 2

[train]
max_iteration = 2
labeled_per_batch = 1
unlabeled_per_batch = 1
patch = [32, 32, 16]
checkpoint_every = 2
"#,
    )
    .map_err(|e| e.to_string())?;
    let cli = |args: &[&str]| {
        let mut v = vec!["ccnet", "--workdir", wd.to_str().unwrap()];
        v.extend_from_slice(args);
        main_with_args(v)
    };
    ensure(cli(&["synth", "--config", "ablate.toml"]) == 0, || "synth failed".into())?;
    ensure(cli(&["ablate", "--config", "ablate.toml", "--mode", "lambda-s"]) == 0, || {
        "lambda_s sweep failed".into()
    })?;
    ensure(cli(&["ablate", "--config", "ablate.toml", "--mode", "encoder"]) == 0, || {
        "encoder ablation failed".into()
    })?;
    let settings = |file: &str| -> Result<Vec<String>, String> {
        let mut r = ok(csv::Reader::from_path(Path::new(wd).join("ablate").join(file)))?;
        r.records().map(|rec| ok(rec).map(|rec| rec[0].to_string())).collect()
    };
    let sweep = settings("lambda_s.csv")?;
    let grid = [0.1, 0.3, 0.5, 0.7, 1.0];
    ensure(sweep.len() == grid.len(), || format!("{} sweep rows for {} settings", sweep.len(), grid.len()))?;
    ensure(sweep.iter().any(|s| s == "lambda_s=0.3"), || format!("0.3 missing from {sweep:?}"))?;
    let enc = settings("encoder.csv")?;
    ensure(enc == ["independent", "shared"], || format!("encoder rows {enc:?}"))?;
    Ok(format!(
        "shared encoder features bit-identical across 3 models before and after 3 steps ({shared} encoder params); \
         sweep rows {sweep:?}; encoder rows {enc:?}"
    ))
}
