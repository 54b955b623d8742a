//! Acceptance checks, one line per criterion. Run with
//! `cargo test --release --test acceptance` for realistic timings.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use nrdiff::bank::{build_bank, select_noise, NoiseBank};
use nrdiff::channel::{
    decode_packet, encode_packet, index_bits, index_region, payload_report, ChannelModel,
    CodecConfig,
};
use nrdiff::controller::{evaluate_checkpoint, run_training, validation_items, StopReason, TrainingConfig};
use nrdiff::dataset::{generate_scenes, Split};
use nrdiff::denoiser::{gradient_check, GradCheckOptions, TrainBatch, TrainExample};
use nrdiff::diffusion::{forward_diffuse, predict_x0, NoiseSchedule, ScheduleKind};
use nrdiff::experiments::fd_comparison;
use nrdiff::pipeline::{end_to_end, IndexPolicy, RunConfig, TxConfig};
use nrdiff::rng;
use nrdiff::semantics::{scene_conditions, SceneParams, DEFAULT_EDGE_THRESHOLD};
use nrdiff::{DenoiserConfig, DenoiserModel, Error, SemanticCondition, Shape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: u32, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_time = took <= budget;
    let pass = o.pass && in_time;
    println!(
        "{} criterion {id} ({name}): {} [{:.1}s of {:.0}s]{}",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        budget.as_secs_f64(),
        if in_time { "" } else { " over time budget" }
    );
    pass
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn schedule_algebra() -> Outcome {
    let mut r = rng::seeded(rng::derive_seed(1, rng::stream::TEST, 1));
    let mut worst_ab = 0.0f64;
    let configs = [(100, 1e-4, 0.02), (100, 1e-3, 0.2), (1000, 1e-4, 0.02), (10, 0.05, 0.5), (1, 0.3, 0.3)];
    for &(steps, lo, hi) in &configs {
        let s = NoiseSchedule::new(steps, ScheduleKind::Linear, lo, hi).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=steps {
            let beta = if steps == 1 {
                lo
            } else {
                lo + (hi - lo) * (t - 1) as f64 / (steps - 1) as f64
            };
            prod *= 1.0 - beta;
            worst_ab = worst_ab.max(rel(s.alpha_bar(t), prod));
        }
    }
    let s = NoiseSchedule::new(100, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
    let shape = Shape::new(3, 8, 8);
    let mut worst_x0 = 0.0f64;
    for _ in 0..100 {
        let t = r.gen_range(1..=s.steps());
        let x0 = Tensor::from_vec(shape, (0..shape.numel()).map(|_| r.gen_range(-1.0..=1.0)).collect()).unwrap();
        let eps = Tensor::randn(shape, &mut r);
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let back = predict_x0(&xt, t, &eps, &s).unwrap();
        let err = back.zip_map(&x0, |a, b| a - b).unwrap().norm() / x0.norm();
        worst_x0 = worst_x0.max(err);
    }
    outcome(
        worst_ab < 1e-12 && worst_x0 < 1e-10,
        format!("alpha_bar rel err {worst_ab:.1e}, x0 reconstruction rel err {worst_x0:.1e}"),
    )
}

fn random_condition(r: &mut impl Rng, k: usize, h: usize, w: usize) -> SemanticCondition {
    let seg = (0..h * w).map(|_| r.gen_range(0..k as u8)).collect();
    let edges = (0..h * w).map(|_| r.gen_range(0..=1u8)).collect();
    SemanticCondition::new(k, h, w, seg, edges).unwrap()
}

fn gradients() -> Outcome {
    let config = DenoiserConfig::default();
    let mut model = DenoiserModel::new(config, 3).unwrap();
    model.randomize_head(4);
    let shape = config.image_shape();
    let bank = build_bank(5, 4, shape).unwrap();
    let scene = generate_scenes(6, Split::Test, 1, &SceneParams::default()).unwrap().remove(0);
    let cond = scene_conditions(&scene, DEFAULT_EDGE_THRESHOLD).unwrap();
    let batch = TrainBatch {
        examples: vec![
            TrainExample {
                x0: scene.image.clone(),
                cond: cond.to_channels(),
                t: 40,
                index: 1,
            },
            TrainExample {
                x0: scene.image.clone(),
                cond: cond.to_channels(),
                t: 3,
                index: 2,
            },
        ],
    };
    let opts = GradCheckOptions {
        samples: 128,
        seed: 8,
        corrupt_tensor: None,
    };
    // Central differences at 1e-3: smaller steps are dominated by round-off.
    let clean = gradient_check(&model, &batch, &bank, model.schedule(), 1e-3, &opts).unwrap();
    let mutated = gradient_check(
        &model,
        &batch,
        &bank,
        model.schedule(),
        1e-3,
        &GradCheckOptions {
            corrupt_tensor: Some((0, 1.1)),
            ..opts
        },
    )
    .unwrap();
    outcome(
        clean.checked >= 100 && clean.max_relative_error < 1e-4 && mutated.max_relative_error >= 1e-4,
        format!(
            "{} params, max rel err {:.1e}; scaled gradient gives {:.1e}",
            clean.checked, clean.max_relative_error, mutated.max_relative_error
        ),
    )
}

fn selector_oracle() -> Outcome {
    let mut r = rng::seeded(rng::derive_seed(2, rng::stream::TEST, 3));
    let mut mismatches = 0;
    let mut ties_exercised = 0;
    for case in 0..50 {
        let n = r.gen_range(1..=64);
        let shape = Shape::new(r.gen_range(1..=3), r.gen_range(2..=8), r.gen_range(2..=8));
        let d = shape.numel();
        let mut vectors: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        // Every other instance duplicates vectors so that exact ties occur.
        if case % 2 == 1 && n > 1 {
            for i in (1..n).step_by(2) {
                vectors[i] = vectors[i - 1].clone();
            }
            vectors.reverse();
            ties_exercised += 1;
        }
        let bank = NoiseBank::from_vectors(case, shape, vectors.clone()).unwrap();
        let steps = r.gen_range(1..=100);
        let s = NoiseSchedule::new(steps, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
        let x0 = Tensor::from_vec(shape, (0..d).map(|_| r.gen_range(-1.0..=1.0)).collect()).unwrap();

        let ab = (1..=steps).map(|t| {
            let beta = if steps == 1 { 1e-3 } else { 1e-3 + (0.2 - 1e-3) * (t - 1) as f64 / (steps - 1) as f64 };
            1.0 - beta
        }).product::<f64>();
        let target = (d as f64).sqrt() * (1.0 - 1.0 / (4.0 * d as f64));
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, v) in vectors.iter().enumerate() {
            let norm = x0
                .data()
                .iter()
                .zip(v)
                .map(|(&x, &e)| {
                    let y = ab.sqrt() * x + (1.0 - ab).sqrt() * e as f64;
                    y * y
                })
                .sum::<f64>()
                .sqrt();
            let gap = (norm - target).abs();
            if gap < best.0 {
                best = (gap, i);
            }
        }
        if select_noise(&bank, &x0, &s).unwrap().best_index != best.1 {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches}/50 mismatches against brute force, {ties_exercised} instances with ties"),
    )
}

fn payload_accounting() -> Outcome {
    let bits_ok = [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (1000, 10), (1024, 10), (1025, 11)]
        .iter()
        .all(|&(n, b)| index_bits(n) == b);
    let mut r = rng::seeded(4);
    let m = random_condition(&mut r, 5, 32, 32);
    let rep = payload_report(&m, 1000, 3, &CodecConfig::default());
    let ratio = rep.latent_to_index_ratio();
    outcome(
        bits_ok && rep.index_bits == 10 && rep.raw_latent_bits >= 90_000 && ratio > 5000.0,
        format!(
            "N=1000 needs {} index bits, raw latent {} bits, ratio {ratio:.0}x",
            rep.index_bits, rep.raw_latent_bits
        ),
    )
}

fn codec_guarantees() -> Outcome {
    let cfg = CodecConfig::default();
    let mut r = rng::seeded(rng::derive_seed(5, rng::stream::TEST, 5));

    // 104 header bits plus 5 per pixel at 9x9 gives 509; 10x9 clears 512.
    let m = random_condition(&mut r, 5, 10, 9);
    let n = 1000;
    let clean = encode_packet(&m, 777, n, &cfg).unwrap();
    let protected = clean.len() - index_bits(n);
    let payload = protected / 5;
    let mut patterns = 0usize;
    let mut exact = true;
    for g in 0..payload {
        for a in 0..5 {
            for b in a..5 {
                let mut bits = clean.clone();
                bits[5 * g + a] ^= true;
                if b != a {
                    bits[5 * g + b] ^= true;
                }
                let d = decode_packet(&bits, &cfg).unwrap();
                exact &= d.condition == m && d.index == 777;
                patterns += 1;
            }
        }
    }

    let mut round_trip = true;
    for _ in 0..1000 {
        let n = r.gen_range(1..=4096);
        let index = r.gen_range(0..n);
        let (k, h, w) = (r.gen_range(1..=16), r.gen_range(1..=12), r.gen_range(1..=12));
        let m = random_condition(&mut r, k, h, w);
        let cfg = CodecConfig {
            run_length: r.gen_bool(0.5),
            ..cfg
        };
        let d = decode_packet(&encode_packet(&m, index, n, &cfg).unwrap(), &cfg).unwrap();
        round_trip &= d.condition == m && d.index == index;
    }

    // Index field alone at p = 0.3: every packet decodes, every index lands in range.
    let mut index_only_ok = 0;
    let mut wrapped = 0;
    let m = random_condition(&mut r, 5, 8, 8);
    for trial in 0..1000u64 {
        let index = r.gen_range(0..n);
        let bits = encode_packet(&m, index, n, &cfg).unwrap();
        let region = index_region(bits.len(), n, &cfg);
        let noisy = ChannelModel::binary_symmetric(0.3, trial).unwrap().transmit_range(&bits, region);
        if let Ok(d) = decode_packet(&noisy, &cfg) {
            if d.index < n {
                index_only_ok += 1;
            }
            wrapped += d.diagnostics.index_wrapped as usize;
        }
    }

    // Whole packet at p = 0.3: decoding may declare loss, but never an out-of-range index.
    let mut whole_decoded = 0;
    let mut whole_bad = 0;
    for trial in 0..1000u64 {
        let index = r.gen_range(0..n);
        let bits = encode_packet(&m, index, n, &cfg).unwrap();
        let noisy = ChannelModel::binary_symmetric(0.3, 10_000 + trial).unwrap().transmit(&bits);
        match decode_packet(&noisy, &cfg) {
            Ok(d) => {
                whole_decoded += 1;
                if d.index >= d.bank_size {
                    whole_bad += 1;
                }
            }
            Err(Error::PacketLost(_)) => {}
            Err(_) => whole_bad += 1,
        }
    }

    outcome(
        payload >= 512 && exact && round_trip && index_only_ok == 1000 && whole_bad == 0,
        format!(
            "{patterns} patterns over {payload} payload bits exact: {exact}; 1000 round trips exact: {round_trip}; \
             p=0.3 on index: {index_only_ok}/1000 in range ({wrapped} wrapped); \
             p=0.3 on whole packet: {whole_decoded} decoded, {whole_bad} out of range"
        ),
    )
}

fn fd_equivalence() -> Outcome {
    let params = SceneParams::default();
    let scenes = generate_scenes(9, Split::Test, 16, &params).unwrap();
    let x0s: Vec<Tensor> = scenes.into_iter().map(|s| s.image).collect();
    let s = NoiseSchedule::new(100, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
    let bank = build_bank(7, 1000, x0s[0].shape()).unwrap();
    let rows = fd_comparison(&x0s, &bank, &s, 5, 11).unwrap();
    let dpsnr = rows.iter().map(|r| (r.psnr_fd - r.psnr_nrfd).abs()).fold(0.0, f64::max);
    let dnmi = rows.iter().map(|r| (r.nmi_fd - r.nmi_nrfd).abs()).fold(0.0, f64::max);
    let monotone = |f: fn(&nrdiff::experiments::FdRow) -> f64| rows.windows(2).all(|w| f(&w[1]) <= f(&w[0]) + 0.5);
    let mono = monotone(|r| r.psnr_fd) && monotone(|r| r.psnr_nrfd);
    outcome(
        dpsnr < 1.0 && dnmi < 0.05 && mono,
        format!(
            "{} steps over 16 images: max |dPSNR| {dpsnr:.3} dB, max |dNMI| {dnmi:.4}, decreasing: {mono}",
            rows.len()
        ),
    )
}

struct Trained {
    model: DenoiserModel,
    bank: NoiseBank,
    stop_step: u64,
}

fn convergence(slot: &mut Option<Trained>) -> Outcome {
    let config = TrainingConfig::default();
    let params = SceneParams::default();
    let train = generate_scenes(config.seed, Split::Train, 256, &params).unwrap();
    let validation = generate_scenes(config.seed, Split::Validation, config.validation_size, &params).unwrap();
    let out = run_training(&train, &validation, &config, None).unwrap();
    let items = validation_items(&validation, config.edge_threshold).unwrap();
    let seed = rng::derive_seed(config.seed, rng::stream::VALIDATION, 0);
    let schedule = config.denoiser.schedule().unwrap();
    let trained = evaluate_checkpoint(&out.model, &out.bank, &schedule, &items, seed).unwrap();
    let untrained_model = DenoiserModel::new(config.denoiser, config.seed).unwrap();
    let untrained = evaluate_checkpoint(&untrained_model, &out.bank, &schedule, &items, seed).unwrap();
    let stop = out.log.stop_step();
    let early = out.log.stop_reason == Some(StopReason::EarlyStop) && stop < config.max_steps;
    let improvement = 1.0 - trained / untrained;
    *slot = Some(Trained {
        model: out.model,
        bank: out.bank,
        stop_step: stop,
    });
    outcome(
        early && improvement >= 0.5,
        format!(
            "stopped at step {stop} ({}), proxy {trained:.4} vs untrained {untrained:.4}, {:.0}% lower",
            out.log.stop_reason.map(|r| r.to_string()).unwrap_or_default(),
            improvement * 100.0
        ),
    )
}

fn random_index_robustness(trained: Option<&Trained>) -> Outcome {
    let Some(t) = trained else {
        return outcome(false, "no trained model".into());
    };
    let scenes = generate_scenes(21, Split::Test, 64, &SceneParams::default()).unwrap();
    let schedule = t.model.schedule();
    let base = RunConfig {
        seed: 21,
        stop_step: t.stop_step,
        ..RunConfig::default()
    };
    let random = RunConfig {
        tx: TxConfig {
            index_policy: IndexPolicy::Random(99),
            ..TxConfig::default()
        },
        ..base.clone()
    };
    let mut completed = 0;
    let mut well_formed = 0;
    let (mut sum_correct, mut sum_random) = (0.0, 0.0);
    for (i, scene) in scenes.iter().enumerate() {
        let correct = end_to_end(i as u64, scene, &t.bank, &t.model, schedule, &base);
        let swapped = end_to_end(i as u64, scene, &t.bank, &t.model, schedule, &random);
        if let (Ok((Some(_), c)), Ok((Some(img), s))) = (correct, swapped) {
            completed += 1;
            let ok = img.image.is_finite() && img.image.data().iter().all(|v| v.abs() <= 1.0);
            well_formed += ok as usize;
            sum_correct += c.proxy.unwrap();
            sum_random += s.proxy.unwrap();
        }
    }
    let n = scenes.len() as f64;
    outcome(
        completed == 64 && well_formed == 64,
        format!(
            "{completed}/64 completed, {well_formed}/64 finite and in range; mean proxy correct {:.4}, random {:.4}, degradation {:+.4}",
            sum_correct / n,
            sum_random / n,
            (sum_random - sum_correct) / n
        ),
    )
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_nrdiff"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let common = [
        "--generate", "--image-size", "16", "--bank-size", "64", "--train-scenes", "16",
        "--validation-scenes", "2", "--test-scenes", "4", "--max-steps", "10", "--check-interval", "5",
        "--seed", "5",
    ];
    let mut runs = Vec::new();
    // Both executions use the same paths, since the frozen config records them.
    let root = tmp.path().join("run");
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&root);
        let p = |s: &str| root.join(s).to_string_lossy().into_owned();
        let art = p("train");
        let steps: Vec<(&str, Vec<String>)> = vec![
            ("train", vec!["--out".into(), art.clone()]),
            ("tx", vec!["--artifacts".into(), art.clone(), "--out".into(), p("tx")]),
            (
                "rx",
                vec!["--artifacts".into(), art.clone(), "--packet".into(), p("tx/packet.bin"), "--out".into(), p("rx")],
            ),
            ("run", vec!["--artifacts".into(), art.clone(), "--channel-p".into(), "0.05".into(), "--out".into(), p("run")]),
            ("fd-compare", vec!["--fd-images".into(), "4".into(), "--out".into(), p("fd")]),
        ];
        let mut outputs = Vec::new();
        for (cmd, extra) in &steps {
            let mut args: Vec<&str> = vec![cmd];
            args.extend(common.iter().copied());
            args.extend(extra.iter().map(String::as_str));
            if !cli(&args) {
                return outcome(false, format!("{cmd} failed"));
            }
        }
        for dir in ["train", "tx", "rx", "run", "fd"] {
            outputs.push((dir, snapshot(&root.join(dir))));
        }
        runs.push(outputs);
    }
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0)
        .collect();
    let files: usize = runs[0].iter().map(|(_, f)| f.len()).sum();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{files} output files identical across two executions")
        } else {
            format!("outputs differ in {differing:?}")
        },
    )
}

fn main() {
    // Quiet listing runs from `cargo test -- --list` and filters.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // ACCEPTANCE_ONLY=2,9 restricts the run to those criteria.
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id) || (id == 7 && o.contains(&8)));
    let secs = Duration::from_secs;
    let mut trained = None;
    let mut results = Vec::new();
    let mut run = |id: u32, name: &str, budget: u64, f: &mut dyn FnMut() -> Outcome| {
        if wanted(id) {
            results.push(report(id, name, secs(budget), f));
        }
    };
    run(1, "schedule and forward algebra", 10, &mut schedule_algebra);
    run(2, "gradient correctness", 60, &mut gradients);
    run(3, "noise selector oracle", 10, &mut selector_oracle);
    run(4, "payload accounting", 1, &mut payload_accounting);
    run(5, "codec guarantees", 60, &mut codec_guarantees);
    run(6, "forward diffusion equivalence", 300, &mut fd_equivalence);
    run(7, "toy convergence with early stopping", 1800, &mut || convergence(&mut trained));
    run(8, "random index robustness", 600, &mut || random_index_robustness(trained.as_ref()));
    run(9, "determinism", 120, &mut determinism);
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
