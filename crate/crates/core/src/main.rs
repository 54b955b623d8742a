use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use nrdiff::bank::{build_bank, load_bank, save_bank, NoiseBank};
use nrdiff::channel::{self, pack_bits, unpack_bits, CodecConfig};
use nrdiff::config::{Resolved, Settings, KEYS};
use nrdiff::controller::run_training;
use nrdiff::dataset::{generate_scenes, load_dataset, save_dataset, Split};
use nrdiff::denoiser::{
    gradient_check, load_checkpoint, save_checkpoint, Architecture, DenoiserConfig,
    DenoiserModel, GradCheckOptions, TrainBatch, TrainExample,
};
use nrdiff::error::{Error, Result};
use nrdiff::experiments::{ablation_csv, ablation_svg, fd_comparison, fd_csv, fd_svg, nb_size_ablation};
use nrdiff::image_io::write_farbfeld;
use nrdiff::metrics::{perceptual_proxy, psnr, DEFAULT_PEAK};
use nrdiff::pipeline::{
    metrics_csv, run_scenes, rx, scene_seeds, tx, MetricsRow, RxConfig, RxInit,
};
use nrdiff::semantics::{scene_conditions, Scene, SemanticCondition};
use nrdiff::tensor::Tensor;

const MODEL_FILE: &str = "model.dgn";
const BANK_FILE: &str = "bank.nbk";
const TRAIN_SUMMARY: &str = "train.txt";
const TX_SUMMARY: &str = "tx.txt";
const RESOLVED_CONFIG: &str = "config.txt";

fn flag_name(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn cli() -> Command {
    let mut cmd = Command::new("nrdiff")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Noise-bank restricted diffusion: train, transmit, regenerate")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args_override_self(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("key=value settings file, applied before flags"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .global(true)
                .help("Run directory receiving all outputs"),
        );
    for k in KEYS {
        let mut arg = Arg::new(k.name)
            .long(flag_name(k.name))
            .value_name("VALUE")
            .global(true)
            .action(ArgAction::Set)
            .help(format!("{} [default: {}]", k.help, k.default));
        if k.default == "true" || k.default == "false" {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        cmd = cmd.arg(arg);
    }
    cmd.subcommands([
        Command::new("train").about("Train the denoiser with early stopping; writes model, bank and logs"),
        Command::new("tx").about("Encode one test scene into a packet using shared artifacts"),
        Command::new("rx").about("Decode a packet and regenerate the image"),
        Command::new("run").about("Send test scenes through tx, channel and rx; writes metrics"),
        Command::new("ablate-nb").about("Train once per bank size and report the final proxy"),
        Command::new("fd-compare").about("Compare plain and bank-restricted forward diffusion"),
        Command::new("gen-data").about("Write train, validation and test scene datasets"),
        Command::new("verify").about("Gradient check, bank statistics and codec self-tests"),
    ])
}

struct Ctx {
    settings: Settings,
    cfg: Resolved,
    out: Option<PathBuf>,
}

impl Ctx {
    fn from_matches(m: &ArgMatches) -> Result<Self> {
        let mut settings = Settings::default();
        let sub = m.subcommand().map(|(_, s)| s).unwrap_or(m);
        if let Some(path) = sub.get_one::<String>("config") {
            settings.apply_file(Path::new(path))?;
        }
        for k in KEYS {
            if let Some(v) = sub.get_one::<String>(k.name) {
                settings.set(k.name, v, "flag")?;
            }
        }
        let cfg = settings.resolve()?;
        Ok(Ctx {
            settings,
            cfg,
            out: sub.get_one::<String>("out").map(PathBuf::from),
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("--out DIR is required for this command"))
    }

    /// Creates the run directory and freezes the resolved settings there.
    fn open_run_dir(&self) -> Result<&Path> {
        let out = self.out_dir()?;
        fs::create_dir_all(out)?;
        fs::write(out.join(RESOLVED_CONFIG), self.settings.to_text())?;
        Ok(out)
    }

    fn scenes(&self, split: Split, count: usize) -> Result<Vec<Scene>> {
        let sub = match split {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        if let Some(dir) = &self.cfg.data_dir {
            if !dir.is_dir() {
                return Err(Error::config(format!("dataset directory {} does not exist", dir.display())));
            }
            let scenes = load_dataset(&dir.join(sub))?;
            if scenes.len() < count {
                return Err(Error::format(format!(
                    "{} holds {} {sub} scenes, {count} needed",
                    dir.display(),
                    scenes.len()
                )));
            }
            return Ok(scenes.into_iter().take(count).collect());
        }
        if self.cfg.generate {
            return generate_scenes(self.cfg.seed, split, count, &self.cfg.scenes);
        }
        Err(Error::config("no dataset: set --data-dir or pass --generate"))
    }

    fn artifacts_dir(&self) -> Result<&Path> {
        self.cfg
            .artifacts
            .as_deref()
            .ok_or_else(|| Error::config("--artifacts DIR (output of train) is required"))
    }

    fn load_artifacts(&self) -> Result<(DenoiserModel, NoiseBank, u64)> {
        let dir = self.artifacts_dir()?;
        let model = load_checkpoint(&dir.join(MODEL_FILE)).map_err(|e| e.at("loading model"))?;
        let bank = load_bank(&dir.join(BANK_FILE)).map_err(|e| e.at("loading bank"))?;
        if bank.shape() != model.config().image_shape() {
            return Err(Error::format(format!(
                "bank shape {} does not match model shape {}",
                bank.shape(),
                model.config().image_shape()
            )));
        }
        let stop_step = fs::read_to_string(dir.join(TRAIN_SUMMARY))
            .ok()
            .and_then(|s| kv_lookup(&s, "stop_step"))
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        Ok((model, bank, stop_step))
    }

    fn write_csv(&self, out: &Path, name: &str, csv: &str, svg: Option<String>) -> Result<()> {
        fs::write(out.join(format!("{name}.csv")), csv)?;
        if let (true, Some(svg)) = (self.cfg.svg, svg) {
            fs::write(out.join(format!("{name}.svg")), svg)?;
        }
        Ok(())
    }
}

fn kv_lookup(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let train = ctx.scenes(Split::Train, ctx.cfg.train_scenes)?;
    let validation = ctx.scenes(Split::Validation, ctx.cfg.training.validation_size)?;
    let out = ctx.open_run_dir()?;
    let outcome = run_training(&train, &validation, &ctx.cfg.training, Some(out))?;
    save_checkpoint(&outcome.model, &out.join(MODEL_FILE))?;
    save_bank(&outcome.bank, &out.join(BANK_FILE), ctx.cfg.bank_file_mode)?;
    let log = &outcome.log;
    log.write_csvs(&out.join("loss.csv"), &out.join("score.csv"))?;
    let mut summary = format!(
        "stop_reason={}\nstop_step={}\nchecks={}\n",
        log.stop_reason.map(|r| r.to_string()).unwrap_or_default(),
        log.stop_step(),
        log.checks.len()
    );
    if let Some(best) = log.best_check() {
        summary.push_str(&format!("best_step={}\nbest_score={}\n", best.step, best.score));
    }
    fs::write(out.join(TRAIN_SUMMARY), &summary)?;
    eprint!("{summary}");
    Ok(())
}

fn test_scene(ctx: &Ctx) -> Result<Scene> {
    let id = ctx.cfg.scene_id;
    let scenes = ctx.scenes(Split::Test, id + 1)?;
    Ok(scenes.into_iter().nth(id).expect("count checked"))
}

fn cmd_tx(ctx: &Ctx) -> Result<()> {
    let (model, bank, _) = ctx.load_artifacts()?;
    let scene = test_scene(ctx)?;
    let out = ctx.open_run_dir()?;
    let seeds = scene_seeds(ctx.cfg.seed, ctx.cfg.scene_id as u64);
    let sent = tx(
        &scene.image,
        &scene.labels,
        &bank,
        model.schedule(),
        &ctx.cfg.run.tx.for_scene(&seeds),
    )?;
    let bytes = pack_bits(&sent.bits);
    fs::write(out.join("packet.bin"), &bytes)?;
    fs::write(out.join("packet.hex"), format!("{}\n", hex::encode(&bytes)))?;
    let p = &sent.payload;
    let summary = format!(
        "scene_id={}\nindex_tx={}\nbank_size={}\nradius={}\ntheoretical_radius={}\n\
         raw_latent_bits={}\ncondition_bits={}\nindex_bits={}\ncoded_bits={}\npacket_bytes={}\n",
        ctx.cfg.scene_id,
        sent.index,
        bank.len(),
        sent.radius.per_index_radius[sent.index],
        sent.radius.theoretical_radius,
        p.raw_latent_bits,
        p.condition_bits,
        p.index_bits,
        p.coded_total_bits,
        p.packet_bytes
    );
    fs::write(out.join(TX_SUMMARY), &summary)?;
    eprint!("{summary}");
    Ok(())
}

fn read_packet(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "hex") {
        let text: String = String::from_utf8_lossy(&raw)
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        return hex::decode(text)
            .map_err(|e| Error::format(format!("{}: bad hex: {e}", path.display())));
    }
    Ok(raw)
}

fn cmd_rx(ctx: &Ctx) -> Result<()> {
    let packet_path = ctx
        .cfg
        .packet
        .clone()
        .ok_or_else(|| Error::config("--packet FILE is required"))?;
    if ctx.cfg.run.oracle_rx {
        return Err(Error::config(
            "rx_init=oracle needs the true latent, which only run has",
        ));
    }
    let (model, bank, stop_step) = ctx.load_artifacts()?;
    let bits = unpack_bits(&read_packet(&packet_path)?);
    // The tx summary next to the packet (if any) names the source scene; it is
    // only used for scoring, never by the receiver itself.
    let sidecar = packet_path
        .parent()
        .map(|d| d.join(TX_SUMMARY))
        .and_then(|p| fs::read_to_string(p).ok());
    let scene_id: u64 = sidecar
        .as_deref()
        .and_then(|s| kv_lookup(s, "scene_id"))
        .and_then(|v| v.parse().ok())
        .unwrap_or(ctx.cfg.scene_id as u64);
    let seeds = scene_seeds(ctx.cfg.seed, scene_id);
    let config = RxConfig {
        codec: ctx.cfg.run.tx.codec,
        init: RxInit::DroppedTerm,
        sampler_seed: seeds.sampler,
    };
    let result = rx(&bits, &bank, &model, model.schedule(), &config)?;
    let out = ctx.open_run_dir()?;
    write_farbfeld(&out.join("regenerated.ff"), &result.image)?;
    let d = &result.diagnostics;
    fs::write(
        out.join("rx.txt"),
        format!(
            "index_rx={}\nstrong_groups_repaired={}\nweak_groups_repaired={}\nlabels_clamped={}\nindex_wrapped={}\n",
            result.index, d.strong_groups_repaired, d.weak_groups_repaired, d.labels_clamped, d.index_wrapped
        ),
    )?;
    fs::write(out.join("metadata.txt"), ctx.cfg.run.metadata(&bank))?;
    log::info!("decode {:?}, sample {:?}", result.timings.decode, result.timings.sample);

    let Some(index_tx) = sidecar
        .as_deref()
        .and_then(|s| kv_lookup(s, "index_tx"))
        .and_then(|v| v.parse().ok())
    else {
        log::warn!("no {TX_SUMMARY} next to the packet; skipping metrics");
        return Ok(());
    };
    let mut scoring = ctx.cfg.clone();
    scoring.scene_id = scene_id as usize;
    let source = test_scene(&Ctx {
        settings: ctx.settings.clone(),
        cfg: scoring,
        out: None,
    })?;
    let row = MetricsRow {
        scene_id,
        seed: ctx.cfg.seed,
        n: bank.len(),
        p: 0.0,
        index_tx,
        index_rx: Some(result.index),
        proxy: Some(perceptual_proxy(&source.image, &result.image)?),
        psnr: Some(psnr(&source.image, &result.image, DEFAULT_PEAK)?),
        payload_bits_condition: channel::condition_bits(&result.condition, ctx.cfg.run.tx.codec.run_length) as u64,
        payload_bits_index: channel::index_bits(bank.len()) as u64,
        stop_step,
    };
    fs::write(out.join("metrics.csv"), metrics_csv(&[row]))?;
    Ok(())
}

fn cmd_run(ctx: &Ctx) -> Result<()> {
    let (model, bank, stop_step) = ctx.load_artifacts()?;
    let scenes = ctx.scenes(Split::Test, ctx.cfg.test_scenes)?;
    let out = ctx.open_run_dir()?;
    let mut run = ctx.cfg.run.clone();
    run.stop_step = stop_step;
    let rows = run_scenes(&scenes, &bank, &model, model.schedule(), &run)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&rows))?;
    fs::write(out.join("metadata.txt"), run.metadata(&bank))?;
    let scored: Vec<f64> = rows.iter().filter_map(|r| r.proxy).collect();
    let mean = scored.iter().sum::<f64>() / scored.len().max(1) as f64;
    eprintln!(
        "scenes={} lost={} mean_proxy={mean:.4}",
        rows.len(),
        rows.len() - scored.len()
    );
    Ok(())
}

fn cmd_fd_compare(ctx: &Ctx) -> Result<()> {
    let shape = ctx.cfg.training.denoiser.image_shape();
    let schedule = ctx.cfg.training.denoiser.schedule()?;
    let bank = match &ctx.cfg.artifacts {
        Some(dir) => load_bank(&dir.join(BANK_FILE))?,
        None => build_bank(ctx.cfg.training.bank_seed, ctx.cfg.training.bank_size, shape)?,
    };
    let x0s: Vec<Tensor> = ctx
        .scenes(Split::Test, ctx.cfg.fd_images)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let rows = fd_comparison(&x0s, &bank, &schedule, ctx.cfg.fd_stride, ctx.cfg.seed)?;
    let out = ctx.open_run_dir()?;
    ctx.write_csv(out, "fd", &fd_csv(&rows), Some(fd_svg(&rows)))
}

fn cmd_ablate(ctx: &Ctx) -> Result<()> {
    let train = ctx.scenes(Split::Train, ctx.cfg.train_scenes)?;
    let validation = ctx.scenes(Split::Validation, ctx.cfg.training.validation_size)?;
    let out = ctx.open_run_dir()?;
    let rows = nb_size_ablation(
        &ctx.cfg.ablate_sizes,
        &ctx.cfg.ablate_seeds,
        &ctx.cfg.training,
        &train,
        &validation,
    )?;
    ctx.write_csv(out, "ablation", &ablation_csv(&rows), Some(ablation_svg(&rows)))
}

fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let out = ctx.open_run_dir()?;
    let c = &ctx.cfg;
    for (split, name, count) in [
        (Split::Train, "train", c.train_scenes),
        (Split::Validation, "validation", c.training.validation_size),
        (Split::Test, "test", c.test_scenes),
    ] {
        save_dataset(&out.join(name), &generate_scenes(c.seed, split, count, &c.scenes)?)?;
    }
    Ok(())
}

fn check(name: &str, ok: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn cmd_verify(ctx: &Ctx) -> Result<()> {
    let mut all = true;

    for arch in [Architecture::PixelMlp, Architecture::UNet] {
        let config = DenoiserConfig {
            architecture: arch,
            base_channels: 4,
            time_dim: 4,
            height: 8,
            width: 8,
            steps: 20,
            ..DenoiserConfig::default()
        };
        let mut model = DenoiserModel::new(config, ctx.cfg.seed)?;
        model.randomize_head(ctx.cfg.seed ^ 1);
        let shape = config.image_shape();
        let bank = build_bank(ctx.cfg.seed, 4, shape)?;
        let scene = generate_scenes(ctx.cfg.seed, Split::Test, 1, &Default::default())?.remove(0);
        let cond: SemanticCondition = scene_conditions(&scene, ctx.cfg.training.edge_threshold)?;
        let cond = downsample_condition(&cond, 8);
        let batch = TrainBatch {
            examples: vec![TrainExample {
                x0: bank.tensor(1)?.clamp(-1.0, 1.0),
                cond: cond.to_channels(),
                t: 7,
                index: 2,
            }],
        };
        let rep = gradient_check(&model, &batch, &bank, model.schedule(), 1e-3, &GradCheckOptions::default())?;
        all &= check(
            &format!("gradient check ({arch:?})"),
            rep.max_relative_error < 1e-4,
            format!("max relative error {:.2e} over {} coordinates", rep.max_relative_error, rep.checked),
        );
    }

    let shape = ctx.cfg.training.denoiser.image_shape();
    let bank = build_bank(ctx.cfg.training.bank_seed, ctx.cfg.training.bank_size, shape)?;
    let v = bank.all_vectors();
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    all &= check(
        "bank statistics",
        mean.abs() < 4.0 / n.sqrt() && (var - 1.0).abs() < 0.05,
        format!("mean {mean:.2e}, variance {var:.4} over {} entries", v.len()),
    );
    all &= check(
        "bank regeneration",
        bank.matches_seed(),
        "every vector reproduces from its seed".into(),
    );

    let codec = CodecConfig::default();
    let m = SemanticCondition::new(5, 2, 2, vec![0, 4, 2, 3], vec![1, 0, 0, 1])?;
    let clean = channel::encode_packet(&m, 5, 8, &codec)?;
    let strong = clean.len() - channel::index_bits(8);
    let mut patterns = 0usize;
    let mut ok = true;
    for g in 0..strong / 5 {
        for a in 0..5 {
            for b in a..5 {
                let mut bits = clean.clone();
                bits[5 * g + a] ^= true;
                if b != a {
                    bits[5 * g + b] ^= true;
                }
                let d = channel::decode_packet(&bits, &codec)?;
                ok &= d.condition == m && d.index == 5;
                patterns += 1;
            }
        }
    }
    all &= check(
        "strong code",
        ok,
        format!("{patterns} single and double flip patterns decoded exactly"),
    );

    if all {
        Ok(())
    } else {
        Err(Error::format("verification failed"))
    }
}

/// Nearest-neighbour shrink of a condition to `size`×`size`.
fn downsample_condition(m: &SemanticCondition, size: usize) -> SemanticCondition {
    let (h, w) = (m.height(), m.width());
    let pick = |v: &[u8]| -> Vec<u8> {
        (0..size * size)
            .map(|p| v[(p / size) * h / size * w + (p % size) * w / size])
            .collect()
    };
    SemanticCondition::new(m.num_classes(), size, size, pick(m.segmentation()), pick(m.edges()))
        .expect("shrunk maps stay valid")
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    let ctx = Ctx::from_matches(m)?;
    if ctx.cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(ctx.cfg.threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    match m.subcommand_name() {
        Some("train") => cmd_train(&ctx),
        Some("tx") => cmd_tx(&ctx),
        Some("rx") => cmd_rx(&ctx),
        Some("run") => cmd_run(&ctx),
        Some("ablate-nb") => cmd_ablate(&ctx),
        Some("fd-compare") => cmd_fd_compare(&ctx),
        Some("gen-data") => cmd_gen_data(&ctx),
        Some("verify") => cmd_verify(&ctx),
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
