//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use wepsam::gbvs::{
    build_dissimilarity_chain, concentrate, equilibrium_distribution, gbvs_saliency, MarkovChain,
    EQUILIBRIUM_MAX_ITER, EQUILIBRIUM_TOL,
};
use wepsam::imagecore::{save_pgm, save_ppm, Tensor};
use wepsam::metrics::{
    auc_against, auc_borji, auc_judd, borji_negatives, cc, kl_div, nss, sim, FixationMap,
};
use wepsam::net::{
    backward, conv2d, conv2d_backward, fully_connected, fully_connected_backward, init_params,
    maxout, maxout_backward, maxpool2, maxpool2_backward, mse_loss, relu, relu_backward, NetSpec,
};
use wepsam::synth::{corpus, SceneParams};
use wepsam::train::{predict, prepare_target, train_on, Dataset, Stage, TrainConfig};
use wepsam::weakset::entropy;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Max relative error of a layer's analytic gradients over 10 seeds.
fn layer_check(name: &str, mut one: impl FnMut(u64) -> f64) -> Result<f64, String> {
    let worst = (0..10).map(&mut one).fold(0.0, f64::max);
    check(worst < 1e-6, || format!("{name}: max rel err {worst:e}"))?;
    Ok(worst)
}

fn conv_seed(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w, f) = (2, 6, 5, 3);
    let k = if seed % 2 == 0 { 3 } else { 5 };
    let x = normal_vec(&mut r, c * h * w, 1.0);
    let wt = normal_vec(&mut r, f * c * k * k, 1.0);
    let b = normal_vec(&mut r, f, 1.0);
    let probe = normal_vec(&mut r, f * h * w, 1.0);
    let (xs, ws, bs) = ([c, h, w], [f, c, k, k], [f]);
    let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
        dot(
            &probe,
            conv2d(&tensor(&xs, x.to_vec()), &tensor(&ws, wt.to_vec()), &tensor(&bs, b.to_vec()))
                .unwrap()
                .data(),
        )
    };
    let g = conv2d_backward(
        &tensor(&xs, x.clone()),
        &tensor(&ws, wt.clone()),
        &tensor(&bs, b.clone()),
        &tensor(&[f, h, w], probe.clone()),
    )
    .unwrap();
    let nx = numeric_grad(&x, |v| loss(v, &wt, &b));
    let nw = numeric_grad(&wt, |v| loss(&x, v, &b));
    let nb = numeric_grad(&b, |v| loss(&x, &wt, v));
    max_rel_err(g.input.data(), &nx)
        .max(max_rel_err(g.weight.data(), &nw))
        .max(max_rel_err(g.bias.data(), &nb))
}

fn fc_seed(seed: u64) -> f64 {
    let mut r = rng(100 + seed);
    let (n, m) = (7, 5);
    let x = normal_vec(&mut r, n, 1.0);
    let wt = normal_vec(&mut r, m * n, 1.0);
    let b = normal_vec(&mut r, m, 1.0);
    let probe = normal_vec(&mut r, m, 1.0);
    let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
        let y = fully_connected(
            &tensor(&[n], x.to_vec()),
            &tensor(&[m, n], wt.to_vec()),
            &tensor(&[m], b.to_vec()),
        )
        .unwrap();
        dot(&probe, y.data())
    };
    let g = fully_connected_backward(
        &tensor(&[n], x.clone()),
        &tensor(&[m, n], wt.clone()),
        &tensor(&[m], b.clone()),
        &tensor(&[m], probe.clone()),
    )
    .unwrap();
    max_rel_err(g.input.data(), &numeric_grad(&x, |v| loss(v, &wt, &b)))
        .max(max_rel_err(g.weight.data(), &numeric_grad(&wt, |v| loss(&x, v, &b))))
        .max(max_rel_err(g.bias.data(), &numeric_grad(&b, |v| loss(&x, &wt, v))))
}

fn relu_seed(seed: u64) -> f64 {
    let mut r = rng(200 + seed);
    let shape = [2, 3, 4];
    let x = separated_vec(&mut r, 24, 1e-3);
    let probe = normal_vec(&mut r, 24, 1.0);
    let g = relu_backward(&tensor(&shape, x.clone()), &tensor(&shape, probe.clone())).unwrap();
    let n = numeric_grad(&x, |v| dot(&probe, relu(&tensor(&shape, v.to_vec())).data()));
    max_rel_err(g.data(), &n)
}

fn maxpool_seed(seed: u64) -> f64 {
    let mut r = rng(300 + seed);
    let shape = [2, 4, 6];
    let x = separated_vec(&mut r, 48, 1e-3);
    let probe = normal_vec(&mut r, 12, 1.0);
    let g = maxpool2_backward(&tensor(&shape, x.clone()), &tensor(&[2, 2, 3], probe.clone())).unwrap();
    let n = numeric_grad(&x, |v| dot(&probe, maxpool2(&tensor(&shape, v.to_vec())).unwrap().data()));
    max_rel_err(g.data(), &n)
}

fn maxout_seed(seed: u64) -> f64 {
    let mut r = rng(400 + seed);
    let x = separated_vec(&mut r, 12, 1e-3);
    let probe = normal_vec(&mut r, 4, 1.0);
    let g = maxout_backward(&tensor(&[12], x.clone()), 3, &tensor(&[4], probe.clone())).unwrap();
    let n = numeric_grad(&x, |v| dot(&probe, maxout(&tensor(&[12], v.to_vec()), 3).unwrap().data()));
    max_rel_err(g.data(), &n)
}

fn mse_seed(seed: u64) -> f64 {
    let mut r = rng(500 + seed);
    let p = normal_vec(&mut r, 10, 1.0);
    let t = normal_vec(&mut r, 10, 1.0);
    let tt = tensor(&[10], t);
    let (_, g) = mse_loss(&tensor(&[10], p.clone()), &tt).unwrap();
    let n = numeric_grad(&p, |v| mse_loss(&tensor(&[10], v.to_vec()), &tt).unwrap().0);
    max_rel_err(g.data(), &n)
}

/// Returns (max rel err, skipped coordinates, total coordinates).
fn end_to_end_seed(seed: u64) -> Result<(f64, usize, usize), String> {
    let spec = reduced_spec();
    let mut r = rng(600 + seed);
    let params = random_params(&spec, &mut r, 0.3);
    let input = normal_vec(&mut r, 3 * 16 * 16, 1.0);
    let target: Vec<f64> = (0..spec.outputs()).map(|_| r.random::<f64>()).collect();
    let (loss, grads) = backward(&spec, &params, &input, &target).map_err(|e| e.to_string())?;
    let (out, base_pattern) = oracle_forward(&spec, &params, &input);
    let oracle_loss = mse(&out, &target);
    check(rel_err(loss, oracle_loss) < 1e-12, || {
        format!("forward mismatch: {loss} vs oracle {oracle_loss}")
    })?;
    let flat = flatten(&params);
    let analytic = flatten(&grads);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut p = flat.clone();
    for i in 0..flat.len() {
        let mut eval = |v: f64| {
            p[i] = v;
            let (o, pat) = oracle_forward(&spec, &unflatten(&spec, &p), &input);
            (mse(&o, &target), pat == base_pattern)
        };
        let (up, same_up) = eval(flat[i] + FD_STEP);
        let (down, same_down) = eval(flat[i] - FD_STEP);
        p[i] = flat[i];
        if !(same_up && same_down) {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok((worst, skipped, flat.len()))
}

fn criterion_1() -> Outcome {
    let mut parts = Vec::new();
    for (name, f) in [
        ("conv", conv_seed as fn(u64) -> f64),
        ("fc", fc_seed),
        ("relu", relu_seed),
        ("maxpool", maxpool_seed),
        ("maxout", maxout_seed),
        ("mse", mse_seed),
    ] {
        let worst = layer_check(name, f)?;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let mut worst = 0.0f64;
    let (mut skipped, mut total) = (0, 0);
    for seed in 0..10 {
        let (w, s, t) = end_to_end_seed(seed)?;
        worst = worst.max(w);
        skipped += s;
        total += t;
    }
    check(worst < 1e-4, || format!("end-to-end max rel err {worst:e}"))?;
    check(skipped * 20 <= total, || {
        format!("{skipped} of {total} coordinates crossed a kink")
    })?;
    parts.push(format!("end-to-end {worst:.1e} ({skipped}/{total} kink-crossing coords skipped)"));
    Ok(parts.join(", "))
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let (sal, fix) = random_map_pair(&mut r, 8, 8);
        let a = auc_judd(&sal, &fix).map_err(|e| e.to_string())?;
        worst = worst.max((a - brute_auc_judd(&sal, &fix)).abs());
        let splits = borji_negatives(&fix, 3, seed).map_err(|e| e.to_string())?;
        let mut mean = 0.0;
        for negs in &splits {
            let brute = brute_auc_split(&sal, &fix, negs);
            worst = worst.max((auc_against(&sal, &fix, negs).unwrap() - brute).abs());
            mean += brute / 3.0;
        }
        worst = worst.max((auc_borji(&sal, &fix, 3, seed).unwrap() - mean).abs());
    }
    check(worst <= 1e-12, || format!("AUC oracle deviation {worst:e}"))?;

    let s = tensor(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let g = tensor(&[2, 2], vec![1.0, 1.0, 2.0, 2.0]);
    let all = FixationMap::new(Tensor::full(vec![2, 2], 1.0)).unwrap();
    let corner = FixationMap::new(tensor(&[2, 2], vec![0.0, 0.0, 0.0, 1.0])).unwrap();
    let z = tensor(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]);
    let identities = [
        ("cc self", (cc(&s, &s).unwrap() - 1.0).abs() < 1e-12),
        ("sim self", (sim(&s, &s).unwrap() - 1.0).abs() < 1e-12),
        ("kl self", kl_div(&s, &s).unwrap() <= 1e-9),
        ("nss all fixated", nss(&s, &all).unwrap().abs() < 1e-12),
        ("cc hand", (cc(&s, &g).unwrap() - 2.0 / 5f64.sqrt()).abs() < 1e-12),
        (
            "sim hand",
            (sim(&tensor(&[1, 3], vec![0.5, 0.5, 0.0]), &tensor(&[1, 3], vec![0.25, 0.25, 0.5])).unwrap() - 0.5)
                .abs()
                < 1e-12,
        ),
        (
            "kl hand",
            (kl_div(&tensor(&[1, 2], vec![0.9, 0.1]), &tensor(&[1, 2], vec![1.0, 1.0])).unwrap()
                - (0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln()))
            .abs()
                < 1e-9,
        ),
        ("nss hand", (nss(&z, &corner).unwrap() - 1.5 / 1.25f64.sqrt()).abs() < 1e-12),
    ];
    for (name, ok) in identities {
        check(ok, || format!("{name} failed"))?;
    }
    let hand = tensor(&[3, 3], vec![0.9, 0.1, 0.1, 0.1, 0.5, 0.1, 0.1, 0.1, 0.2]);
    let mut m = vec![0.0; 9];
    m[0] = 1.0;
    m[4] = 1.0;
    let hf = FixationMap::new(tensor(&[3, 3], m)).unwrap();
    check(auc_judd(&hand, &hf).unwrap() == brute_auc_judd(&hand, &hf), || "3x3 hand case".into())?;
    Ok(format!("100 random 8x8 pairs, max AUC deviation {worst:.1e}; CC/SIM/KL/NSS identities and hand cases hold"))
}

fn random_chain(r: &mut impl Rng, n: usize) -> MarkovChain {
    let mut p: Vec<f64> = (0..n * n).map(|_| r.random::<f64>().powi(4)).collect();
    for row in p.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    MarkovChain::from_dense(n, p)
}

/// Power iteration stops on the residual `‖vP − v‖₁`, which bounds the
/// error only up to the inverse spectral gap. Lattice chains with a local
/// falloff mix in ~50-300 steps, so the oracle comparison runs at a residual
/// tolerance of 1e-10; the default 1e-9 is reported alongside.
const ORACLE_TOL: f64 = 1e-10;

fn criterion_3() -> Outcome {
    let mut worst_l1 = 0.0f64;
    let mut worst_default = 0.0f64;
    let mut worst_sum = 0.0f64;
    for seed in 0..50u64 {
        let mut r = rng(2000 + seed);
        let chain = if seed % 2 == 0 {
            let n = r.random_range(2..=64);
            random_chain(&mut r, n)
        } else {
            let side = r.random_range(2..=8);
            let f = Tensor::from_fn_2d(side, side, |_, _| r.random::<f64>());
            build_dissimilarity_chain(&f, 0.15 * side as f64).map_err(|e| e.to_string())?
        };
        let n = chain.len();
        let dense: Vec<f64> = (0..n).flat_map(|a| chain.row(a).to_vec()).collect();
        let oracle = dense_stationary(n, &dense);
        let l1 = |v: &[f64]| -> f64 { v.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).sum() };
        for (tol, worst) in [(ORACLE_TOL, &mut worst_l1), (EQUILIBRIUM_TOL, &mut worst_default)] {
            let eq = equilibrium_distribution(&chain, tol, EQUILIBRIUM_MAX_ITER).map_err(|e| e.to_string())?;
            check(eq.converged && eq.residual <= tol, || format!("seed {seed}: residual {:e}", eq.residual))?;
            *worst = worst.max(l1(&eq.distribution));
            worst_sum = worst_sum.max((eq.distribution.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst_l1 <= 1e-8, || format!("L1 to dense solve {worst_l1:e}"))?;
    check(worst_sum <= 1e-12, || format!("sum deviates by {worst_sum:e}"))?;

    let mut act = Tensor::full(vec![4, 4], 0.1);
    act.data_mut()[6] = 1.0;
    let before = act.max() / act.sum();
    let out = concentrate(&act, 0.15 * 4.0).map_err(|e| e.to_string())?;
    let after = out.max() / out.sum();
    check(after > before, || format!("peak share {before} -> {after}"))?;
    Ok(format!(
        "50 chains: max L1 {worst_l1:.1e} at tol {ORACLE_TOL:e} ({worst_default:.1e} at default tol {EQUILIBRIUM_TOL:e}), \
         max |sum-1| {worst_sum:.1e}; 4x4 peak share {before:.4} -> {after:.4}"
    ))
}

fn criterion_4() -> Outcome {
    let constant = entropy(&Tensor::full(vec![32, 32], 0.37)).unwrap();
    let half = entropy(&Tensor::from_fn_2d(32, 32, |i, _| if i < 16 { 0.0 } else { 1.0 })).unwrap();
    let uniform = entropy(&Tensor::from_fn_2d(32, 32, |i, j| ((i * 32 + j) % 256) as f64 / 256.0 + 1.0 / 512.0)).unwrap();
    check(constant.abs() <= 1e-12, || format!("constant {constant}"))?;
    check((half - 1.0).abs() <= 1e-12, || format!("half/half {half}"))?;
    check((uniform - 8.0).abs() <= 1e-12, || format!("uniform {uniform}"))?;
    Ok(format!("constant {constant}, half/half {half}, 256-bin uniform {uniform}"))
}

fn criterion_5() -> Outcome {
    let spec = NetSpec::compact();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let scenes = corpus(200, &SceneParams::default(), seed);
        let mut weak: Vec<(f64, String, _, _)> = Vec::new();
        for (k, s) in scenes.iter().enumerate() {
            let map = gbvs_saliency(&s.image).map_err(|e| e.to_string())?.into_tensor();
            weak.push((entropy(&map).unwrap(), format!("img{k:03}"), s.image.clone(), map));
        }
        weak.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let kept: Vec<_> = weak.into_iter().take(150).map(|(_, id, img, map)| (id, img, map)).collect();
        let wtrain = Dataset::from_images(&spec, &kept[..135]).map_err(|e| e.to_string())?;
        let wval = Dataset::from_images(&spec, &kept[135..]).map_err(|e| e.to_string())?;
        let mut pre_cfg = TrainConfig::new(Stage::Pretrain);
        pre_cfg.arch = spec;
        pre_cfg.epochs = 50;
        pre_cfg.seed = seed;
        let (pretrained, _) = train_on(&wtrain, &wval, &pre_cfg, init_params(&spec, seed).unwrap())
            .map_err(|e| e.to_string())?;

        let gt: Vec<_> = scenes
            .iter()
            .enumerate()
            .map(|(k, s)| (format!("img{k:03}"), s.image.clone(), s.density.clone()))
            .collect();
        let gtrain = Dataset::from_images(&spec, &gt[..160]).map_err(|e| e.to_string())?;
        let gval = Dataset::from_images(&spec, &gt[160..]).map_err(|e| e.to_string())?;
        let mut ft = TrainConfig::new(Stage::Finetune);
        ft.arch = spec;
        ft.epochs = 3;
        ft.seed = seed;
        let (_, from_pre) = train_on(&gtrain, &gval, &ft, pretrained).map_err(|e| e.to_string())?;
        let random = init_params(&spec, seed + 1000).unwrap();
        let (_, from_rand) = train_on(&gtrain, &gval, &ft, random).map_err(|e| e.to_string())?;
        let (a, b) = (from_pre.rows[0].train_loss, from_rand.rows[0].train_loss);
        if a < b {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {a:.4e} vs {b:.4e}"));
    }
    let detail = format!("pretrained lower in {wins}/5 ({})", rows.join("; "));
    check(wins >= 4, || detail.clone())?;
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let spec = NetSpec::compact();
    let scene = &corpus(1, &SceneParams::default(), 11)[0];
    let items = vec![("one".to_string(), scene.image.clone(), scene.density.clone())];
    let data = Dataset::from_images(&spec, &items).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::new(Stage::Finetune);
    cfg.arch = spec;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    cfg.lr_start = 1.0;
    cfg.lr_end = 1.0;
    let (params, log) = train_on(&data, &data, &cfg, init_params(&spec, 0).unwrap()).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = log.rows.iter().map(|r| r.train_loss).collect();
    check(losses[..10].windows(2).all(|w| w[1] < w[0]), || {
        format!("loss not strictly decreasing over 10 epochs: {:?}", &losses[..10])
    })?;
    let last = *losses.last().unwrap();
    check(last < 1e-3, || format!("final loss {last:e}"))?;
    let pred = predict(&params, &scene.image).map_err(|e| e.to_string())?;
    let full_cc = cc(pred.tensor(), &scene.density).map_err(|e| e.to_string())?;
    let target32 = prepare_target(&spec, &scene.density).unwrap();
    let net_cc = cc(
        &wepsam::train::predict_network(&params, &scene.image).unwrap(),
        &tensor(&[32, 32], target32.iter().map(|&v| v as f64).collect()),
    )
    .unwrap();
    check(full_cc > 0.95, || format!("CC {full_cc}"))?;
    Ok(format!("final loss {last:.2e}, CC {full_cc:.4} at full resolution, {net_cc:.4} at 32x32"))
}

fn write_toy_set(dir: &Path, count: usize, seed: u64) {
    let (img_dir, map_dir) = (dir.join("images"), dir.join("maps"));
    std::fs::create_dir_all(&img_dir).unwrap();
    std::fs::create_dir_all(&map_dir).unwrap();
    for (k, s) in corpus(count, &SceneParams::default(), seed).iter().enumerate() {
        save_ppm(img_dir.join(format!("s{k}.ppm")), &s.image).unwrap();
        save_pgm(map_dir.join(format!("s{k}.pgm")), &s.density).unwrap();
    }
}

fn pretrain_run(data: &Path, out: &Path, seed: &str) -> Result<(Vec<u8>, Vec<u8>), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_wepsam"))
        .args(["pretrain", "--images"])
        .arg(data.join("images"))
        .arg("--maps")
        .arg(data.join("maps"))
        .arg("--out-dir")
        .arg(out)
        .args(["--epochs", "3", "--batch-size", "2", "--arch", "compact", "--seed", seed])
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || {
        format!("pretrain failed: {}", String::from_utf8_lossy(&status.stderr))
    })?;
    let ckpt = std::fs::read(out.join("final.ckpt")).map_err(|e| e.to_string())?;
    let csv = std::fs::read(out.join("loss.csv")).map_err(|e| e.to_string())?;
    Ok((ckpt, csv))
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_toy_set(tmp.path(), 8, 21);
    let a = pretrain_run(tmp.path(), &tmp.path().join("run_a"), "3")?;
    let b = pretrain_run(tmp.path(), &tmp.path().join("run_b"), "3")?;
    check(a.0 == b.0, || "checkpoints differ".into())?;
    check(a.1 == b.1, || "loss CSVs differ".into())?;
    let c = pretrain_run(tmp.path(), &tmp.path().join("run_c"), "4")?;
    check(c.0 != a.0, || "seed has no effect on the checkpoint".into())?;
    Ok(format!(
        "two seed-3 runs: identical checkpoint ({} bytes) and loss CSV; seed 4 differs",
        a.0.len()
    ))
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome, Duration); 7] = [
        ("1", "gradient correctness", criterion_1, Duration::from_secs(60)),
        ("2", "metric oracle equivalence", criterion_2, Duration::from_secs(60)),
        ("3", "Markov-chain correctness", criterion_3, Duration::from_secs(60)),
        ("4", "entropy formula", criterion_4, Duration::from_secs(60)),
        ("5", "pretraining effect", criterion_5, Duration::from_secs(15 * 60)),
        ("6", "overfit smoke test", criterion_6, Duration::from_secs(120)),
        ("7", "determinism", criterion_7, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (id, name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".into()))
            .and_then(|detail| {
                let t = start.elapsed();
                check(t <= budget, || format!("took {t:.1?}, budget {budget:?}"))?;
                Ok(detail)
            });
        let t = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS in {t:.1?}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL in {t:.1?}: {why}");
            }
        }
    }
    println!(
        "criterion 8 (published benchmark scores): NOT RUN, not reproducible without the withheld benchmark ground truth"
    );
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
