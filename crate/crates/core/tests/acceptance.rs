//! One line per criterion; exits nonzero if any gated criterion fails.

use std::time::Instant;

use aqs_tensor::gradcheck::run_case;
use aqs_tensor::{Conv2dOptions, OptimizerState, Tape, Tensor};
use aqsnet::data::{generate_scenes, make_batch, sqa_ground_truth, write_dataset, Mask, SceneConfig, SqaTriplet};
use aqsnet::gradcheck::all_cases;
use aqsnet::layers::{Ctx, Mode};
use aqsnet::loss::{combine_terms, combined_loss, one_hot, segmentation_loss, LossConfig};
use aqsnet::metrics::{confusion_counts, f1, MetricsReport};
use aqsnet::train::{evaluate, train, train_step, AllBackground, TrainConfig};
use aqsnet::{Ablation, AqsNet, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// First seeded run of the desk-scale benchmark (compact model, seed 0).
const LOCKED_MISSED_F1: f64 = 73.80;
const LOCKED_MISTAKEN_F1: f64 = 70.81;
/// Absolute F1 points the trained scores may fall below the locked ones.
const LOCK_TOLERANCE: f64 = 2.0;
const F1_TOLERANCE: f64 = 0.005;
const LOSS_TOLERANCE: f64 = 1e-6;
const FLOAT_ORACLE_TOLERANCE: f64 = 1e-6;
const TRAIN_SCENES: usize = 256;
const TEST_SCENES: usize = 64;
const CPU_BUDGET_SECS: f64 = 600.0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn table_f1() -> Outcome {
    let rows = [
        (34.940, 70.326, 46.685),
        (64.691, 52.308, 57.844),
        (51.196, 62.748, 56.386),
        (55.497, 60.698, 57.981),
        (51.376, 63.734, 56.892),
        (59.383, 61.132, 60.245),
    ];
    let worst = rows.iter().map(|&(p, r, f)| (f1(p, r) - f).abs()).fold(0.0, f64::max);
    outcome(worst <= F1_TOLERANCE, format!("6 (P, R) pairs, max |F1 - printed| = {worst:.2e} (tol {F1_TOLERANCE})"))
}

fn shape_parity() -> Outcome {
    let cfg = ModelConfig::default();
    let net = AqsNet::<f32>::new(&cfg).unwrap();
    let neck_dims = |ctx: &mut Ctx<f32>, image, mask| -> Vec<Vec<usize>> {
        let out = net.forward(ctx, image, mask).unwrap();
        out.neck.iter().map(|&v| ctx.tape.dims(v).to_vec()).collect()
    };
    let mut ctx = Ctx::with_tape(&net.store, Mode::Eval, Tape::shape_only());
    let (i, m) = (ctx.tape.placeholder(&[1, 3, 512, 512]), ctx.tape.placeholder(&[1, 1, 512, 512]));
    let big = neck_dims(&mut ctx, i, m);
    let expected = |s: usize| -> Vec<Vec<usize>> {
        [(64, 4), (128, 8), (256, 16), (512, 16)].iter().map(|&(c, r)| vec![1, c, s / r, s / r]).collect()
    };
    let mut ctx = Ctx::new(&net.store, Mode::Eval);
    let mut r = rng(0);
    let i = ctx.tape.input(Tensor::uniform(vec![1, 3, 64, 64], 0.0, 1.0, &mut r));
    let m = ctx.tape.input(Tensor::new(vec![1, 1, 64, 64], (0..4096).map(|_| r.random_range(0..2) as f32).collect()).unwrap());
    let small = neck_dims(&mut ctx, i, m);
    let ok = big == expected(512) && small == expected(64);
    outcome(ok, format!("512x512 neck {big:?}; 64x64 neck {small:?}"))
}

fn frozen_invariant() -> Outcome {
    let data = generate_scenes(&SceneConfig::default(), 0, 4).unwrap();
    let items: Vec<&SqaTriplet> = data.iter().collect();
    let batch = make_batch(&items).unwrap();
    let mut net = AqsNet::new(&ModelConfig::compact()).unwrap();
    let (vit, resnet) = (net.store.digest("vit."), net.store.digest("resnet."));
    let cfg = TrainConfig::default();
    let mut opt = OptimizerState::new(cfg.adam(), &net.store);
    let mut nonzero = true;
    for step in 0..5 {
        nonzero &= train_step(&mut net, &mut opt, &batch, &cfg.loss, step).unwrap().total > 0.0;
    }
    let vit_same = net.store.digest("vit.") == vit;
    let resnet_changed = net.store.digest("resnet.") != resnet;
    outcome(nonzero && vit_same && resnet_changed, format!("5 steps: vit unchanged = {vit_same}, resnet changed = {resnet_changed}"))
}

fn gradient_suite() -> Outcome {
    let cases = all_cases();
    let mut worst = (0.0, "");
    let mut failed = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let report = run_case(case, 10, 7000 + i as u64).unwrap();
        if report.max_rel_err > worst.0 {
            worst = (report.max_rel_err, report.name);
        }
        if !report.passed {
            failed.push(report.name);
        }
    }
    outcome(
        failed.is_empty(),
        format!("{} cases x 10 trials, worst {:.2e} ({}), failing {failed:?}", cases.len(), worst.0, worst.1),
    )
}

fn loss_sanity() -> Outcome {
    let mut r = rng(1);
    let labels: Vec<u8> = (0..2 * 8 * 8).map(|_| r.random_range(0..3)).collect();
    let mut tape = Tape::<f64>::new();
    let mut hot = one_hot::<f64>(&labels, 2, 8, 8).unwrap();
    hot.data_mut().iter_mut().for_each(|v| *v *= 1e6);
    let x = tape.input(hot.clone());
    let a = tape.input(hot);
    let l = combined_loss(&mut tape, x, Some(a), &labels, &labels, &LossConfig::default()).unwrap();
    let perfect = tape.data(l.total)[0];

    let x = tape.input(Tensor::zeros(vec![2, 3, 8, 8]));
    let l = segmentation_loss(&mut tape, x, &labels, &LossConfig::default()).unwrap();
    let ce = tape.data(l.ce)[0];

    let (c, d) = (tape.input(Tensor::scalar(0.4)), tape.input(Tensor::scalar(0.2)));
    let l = combine_terms(&mut tape, c, d, &LossConfig::default()).unwrap();
    let mix = tape.data(l)[0];

    let ok = perfect < 1e-3 && (ce - 3f64.ln()).abs() < LOSS_TOLERANCE && (mix - 0.3).abs() < 1e-12;
    outcome(ok, format!("perfect {perfect:.2e}, uniform CE - ln3 = {:.2e}, (0.4, 0.2) -> {mix}", ce - 3f64.ln()))
}

fn conv_loop(x: &Tensor<f64>, w: &Tensor<f64>, opts: Conv2dOptions) -> Vec<f64> {
    let (n, cin, h, wd) = x.nchw().unwrap();
    let (cout, _, k, _) = w.nchw().unwrap();
    let span = opts.dilation * (k - 1) + 1;
    let ho = (h + 2 * opts.padding - span) / opts.stride + 1;
    let wo = (wd + 2 * opts.padding - span) / opts.stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * opts.stride + ky * opts.dilation) as i64 - opts.padding as i64;
                                let ix = (ox * opts.stride + kx * opts.dilation) as i64 - opts.padding as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[b, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn conv_tape(x: &Tensor<f64>, w: &Tensor<f64>, opts: Conv2dOptions) -> Vec<f64> {
    let mut t = Tape::new();
    let (xv, wv) = (t.input(x.clone()), t.input(w.clone()));
    let y = t.conv2d(xv, wv, None, opts).unwrap();
    t.data(y).to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn binary(w: usize, h: usize, r: &mut ChaCha8Rng) -> Mask {
    Mask::new(w, h, (0..w * h).map(|_| r.random_bool(0.4) as u8).collect()).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(2);
    let mut bad = Vec::new();
    let (mut conv_err, mut dilated_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (seg, gt) = (binary(64, 64, &mut r), binary(64, 64, &mut r));
        let oracle: Vec<u8> =
            seg.data.iter().zip(&gt.data).map(|(&s, &g)| if g > s { 1 } else if s > g { 2 } else { 0 }).collect();
        if sqa_ground_truth(&seg, &gt).unwrap() != oracle {
            bad.push("sqa_ground_truth");
        }
        for class in 0..3u8 {
            let c = confusion_counts(&oracle, &sqa_ground_truth(&gt, &seg).unwrap(), class).unwrap();
            let rev = sqa_ground_truth(&gt, &seg).unwrap();
            let mut o = [0u64; 4];
            for (&p, &g) in oracle.iter().zip(&rev) {
                o[match (p == class, g == class) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                }] += 1;
            }
            if [c.tp, c.fp, c.tn, c.fn_] != o {
                bad.push("confusion_counts");
            }
        }

        let (cin, cout, k) = (r.random_range(1..4), r.random_range(1..4), [1, 3, 5][r.random_range(0..3)]);
        let x = Tensor::randn(vec![r.random_range(1..3), cin, r.random_range(k..12), r.random_range(k..12)], 1.0, &mut r);
        let w = Tensor::randn(vec![cout, cin, k, k], 1.0, &mut r);
        let opts = Conv2dOptions::new(r.random_range(1..3), r.random_range(0..k), 1);
        conv_err = conv_err.max(max_diff(&conv_tape(&x, &w, opts), &conv_loop(&x, &w, opts)));

        let rate = [1, 2, 3, 6][r.random_range(0..4)];
        let x = Tensor::randn(vec![1, cin, r.random_range(1..14), r.random_range(1..14)], 1.0, &mut r);
        let w = Tensor::randn(vec![cout, cin, 3, 3], 1.0, &mut r);
        let opts = Conv2dOptions::same(3, rate);
        dilated_err = dilated_err.max(max_diff(&conv_tape(&x, &w, opts), &conv_loop(&x, &w, opts)));

        let m = binary(r.random_range(1..16), r.random_range(1..16), &mut r);
        let radius = r.random_range(0..4usize);
        let ri = radius as isize;
        let mut dil = Mask::empty(m.width, m.height);
        let mut ero = Mask::empty(m.width, m.height);
        for y in 0..m.height as isize {
            for x in 0..m.width as isize {
                let (mut any, mut all) = (false, true);
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        if dx * dx + dy * dy <= ri * ri {
                            let v = m.get(x + dx, y + dy) == 1;
                            any |= v;
                            all &= v;
                        }
                    }
                }
                let p = y as usize * m.width + x as usize;
                (dil.data[p], ero.data[p]) = (any as u8, all as u8);
            }
        }
        if m.dilate(radius) != dil || m.erode(radius) != ero {
            bad.push("morphology");
        }
    }
    if conv_err > FLOAT_ORACLE_TOLERANCE {
        bad.push("conv2d");
    }
    if dilated_err > FLOAT_ORACLE_TOLERANCE {
        bad.push("dilated conv2d");
    }
    bad.dedup();
    outcome(bad.is_empty(), format!("100 instances each; conv max err {conv_err:.1e}, dilated {dilated_err:.1e}; mismatches {bad:?}"))
}

fn benchmark(seed: u64) -> (Vec<SqaTriplet>, Vec<SqaTriplet>) {
    let cfg = SceneConfig { seed, ..SceneConfig::default() };
    let all = generate_scenes(&cfg, 0, TRAIN_SCENES + TEST_SCENES).unwrap();
    let (train, test) = all.split_at(TRAIN_SCENES);
    (train.to_vec(), test.to_vec())
}

fn fit(cfg: &ModelConfig, seed: u64, train_set: &[SqaTriplet]) -> AqsNet {
    let mut net = AqsNet::new(&ModelConfig { seed, ..cfg.clone() }).unwrap();
    train(&mut net, train_set, &TrainConfig { seed, ..TrainConfig::default() }, |_| {}).unwrap();
    net
}

fn scores(m: &MetricsReport) -> String {
    format!("missed F1 {:.2}, mistaken F1 {:.2}, OA {:.2}", m.missed.f1, m.mistaken.f1, m.oa)
}

fn desk_training(trained: &MetricsReport, test: &[SqaTriplet], secs: f64) -> Outcome {
    let untrained = evaluate(&AqsNet::new(&ModelConfig::compact()).unwrap(), test, 8).unwrap();
    let background = evaluate(&AllBackground, test, 8).unwrap();
    let beats = |t: f64, u: f64, b: f64| t > u && t > b;
    let better = beats(trained.missed.f1, untrained.missed.f1, background.missed.f1)
        && beats(trained.mistaken.f1, untrained.mistaken.f1, background.mistaken.f1);
    let locked = trained.missed.f1 >= LOCKED_MISSED_F1 - LOCK_TOLERANCE && trained.mistaken.f1 >= LOCKED_MISTAKEN_F1 - LOCK_TOLERANCE;
    outcome(
        better && locked && secs <= CPU_BUDGET_SECS,
        format!(
            "trained [{}] vs untrained [{}] vs all-background [{}]; locked ({LOCKED_MISSED_F1:.2}, {LOCKED_MISTAKEN_F1:.2}) -{LOCK_TOLERANCE}; {secs:.0}s",
            scores(trained),
            scores(&untrained),
            scores(&background)
        ),
    )
}

fn ablation_trend(seed0_full: &MetricsReport, train_set: &[SqaTriplet], test: &[SqaTriplet]) -> Outcome {
    let full = ModelConfig::compact();
    let base = ModelConfig::compact().with_ablation(Ablation::Baseline);
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let f = if seed == 0 { *seed0_full } else { evaluate(&fit(&full, seed, train_set), test, 8).unwrap() };
        let b = evaluate(&fit(&base, seed, train_set), test, 8).unwrap();
        wins += (f.missed.f1 > b.missed.f1) as usize;
        rows.push(format!("seed {seed}: {:.2} vs {:.2}", f.missed.f1, b.missed.f1));
    }
    outcome(wins >= 2, format!("full vs baseline missed F1, {}; wins {wins}/3", rows.join(", ")))
}

fn determinism() -> Outcome {
    let cfg = SceneConfig { seed: 5, ..SceneConfig::default() };
    let run = || {
        let data = generate_scenes(&cfg, 0, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &cfg, 0, &data).unwrap();
        let hashes: Vec<_> = manifest.scenes.iter().map(|e| e.sha256.clone()).collect();
        let mut net = AqsNet::new(&ModelConfig::compact()).unwrap();
        let log = train(&mut net, &data[..8], &TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() }, |_| {}).unwrap();
        let metrics = evaluate(&net, &data[8..], 4).unwrap().to_json();
        (hashes, serde_json::to_string(&log).unwrap(), metrics)
    };
    let (a, b) = (run(), run());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    outcome(same.iter().all(|&s| s), format!("dataset hashes / loss trajectory / metrics JSON identical: {same:?}"))
}

fn main() {
    let mut gated_failures = 0;
    let mut report = |id: usize, name: &str, gated: bool, o: Outcome| {
        let status = match (o.passed, gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        println!("criterion {id} [{status}] {name}: {}", o.detail);
        if gated && !o.passed {
            gated_failures += 1;
        }
    };
    report(1, "reference F1 consistency", true, table_f1());
    report(2, "shape parity", true, shape_parity());
    report(3, "frozen backbone", true, frozen_invariant());
    report(4, "gradient suite", true, gradient_suite());
    report(5, "loss sanity", true, loss_sanity());
    report(6, "oracle equivalence", true, oracle_equivalence());

    let (train_set, test) = benchmark(0);
    let start = Instant::now();
    let net = fit(&ModelConfig::compact(), 0, &train_set);
    let trained = evaluate(&net, &test, 8).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(7, "desk-scale training", true, desk_training(&trained, &test, secs));
    report(8, "ablation trend (informational)", false, ablation_trend(&trained, &train_set, &test));
    report(9, "determinism", true, determinism());

    if gated_failures > 0 {
        println!("{gated_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
