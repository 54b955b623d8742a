//! Transmitter, receiver and end-to-end runs.
//!
//! The receiver only ever sees packet bits plus the artifacts shared once in
//! advance (bank, model, schedule). Since it cannot know `x_0`, it starts the
//! reverse chain from `x_T = √(1−ᾱ_T)·ε_η(i)`; an oracle mode that is handed
//! the true `x_T` exists to measure what the dropped term costs.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use crate::bank::{select_noise, NoiseBank, RadiusReport};
use crate::channel::{
    decode_packet, encode_packet, index_region, payload_report, ChannelModel, CodecConfig,
    DecodeDiagnostics, PayloadReport,
};
use crate::diffusion::{nr_forward_diffuse, sample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result, ResultExt};
use crate::metrics::{perceptual_proxy, psnr, DEFAULT_PEAK};
use crate::rng;
use crate::semantics::{extract_conditions, Scene, SemanticCondition, DEFAULT_EDGE_THRESHOLD, NUM_CLASSES};
use crate::tensor::Tensor;

/// How the transmitter picks the bank index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexPolicy {
    /// Radius-matched selection.
    Selected,
    /// Uniformly random index drawn from this seed, ignoring the image.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxConfig {
    pub codec: CodecConfig,
    pub edge_threshold: f64,
    pub num_classes: usize,
    pub index_policy: IndexPolicy,
}

impl Default for TxConfig {
    fn default() -> Self {
        TxConfig {
            codec: CodecConfig::default(),
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            num_classes: NUM_CLASSES,
            index_policy: IndexPolicy::Selected,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxArtifacts {
    /// Index placed in the packet.
    pub index: usize,
    pub condition: SemanticCondition,
    pub radius: RadiusReport,
    pub bits: Vec<bool>,
    pub payload: PayloadReport,
    /// True `x_T` for the sent index. Never transmitted; only for oracle runs.
    pub latent: Tensor,
}

pub fn tx(
    image: &Tensor,
    labels: &[u8],
    bank: &NoiseBank,
    schedule: &NoiseSchedule,
    config: &TxConfig,
) -> Result<TxArtifacts> {
    let condition = extract_conditions(image, labels, config.num_classes, config.edge_threshold)?;
    let radius = select_noise(bank, image, schedule)?;
    let index = match config.index_policy {
        IndexPolicy::Selected => radius.best_index,
        IndexPolicy::Random(seed) => rng::seeded(seed).gen_range(0..bank.len()),
    };
    let bits = encode_packet(&condition, index, bank.len(), &config.codec)?;
    let payload = payload_report(&condition, bank.len(), image.shape().channels, &config.codec);
    let latent = nr_forward_diffuse(image, schedule.steps(), bank, index, schedule)?;
    Ok(TxArtifacts {
        index,
        condition,
        radius,
        bits,
        payload,
        latent,
    })
}

/// Starting point of the receiver's reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub enum RxInit {
    /// `x_T = √(1−ᾱ_T)·ε_η(i)`.
    DroppedTerm,
    /// The true `x_T`, delivered out of band.
    Oracle(Tensor),
}

impl RxInit {
    pub fn tag(&self) -> &'static str {
        match self {
            RxInit::DroppedTerm => "dropped-term",
            RxInit::Oracle(_) => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RxConfig {
    pub codec: CodecConfig,
    pub init: RxInit,
    pub sampler_seed: u64,
}

impl Default for RxConfig {
    fn default() -> Self {
        RxConfig {
            codec: CodecConfig::default(),
            init: RxInit::DroppedTerm,
            sampler_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub decode: Duration,
    pub sample: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RxResult {
    pub image: Tensor,
    pub condition: SemanticCondition,
    pub index: usize,
    pub diagnostics: DecodeDiagnostics,
    pub timings: StageTimings,
}

pub fn rx<P: NoisePredictor + ?Sized>(
    bits: &[bool],
    bank: &NoiseBank,
    model: &P,
    schedule: &NoiseSchedule,
    config: &RxConfig,
) -> Result<RxResult> {
    let start = Instant::now();
    let packet = decode_packet(bits, &config.codec)?;
    let decode = start.elapsed();
    if packet.bank_size != bank.len() {
        log::warn!(
            "packet announces a bank of {} vectors, shared bank has {}",
            packet.bank_size,
            bank.len()
        );
    }
    let index = packet.index % bank.len();
    let x_t = match &config.init {
        RxInit::DroppedTerm => {
            let scale = (1.0 - schedule.final_alpha_bar()).sqrt();
            bank.tensor(index)?.map(|v| scale * v)
        }
        RxInit::Oracle(x) => x.clone(),
    };
    let start = Instant::now();
    let image = sample(model, &packet.condition, &x_t, schedule, config.sampler_seed)?;
    let sample_time = start.elapsed();
    Ok(RxResult {
        image,
        condition: packet.condition,
        index,
        diagnostics: packet.diagnostics,
        timings: StageTimings {
            decode,
            sample: sample_time,
        },
    })
}

/// Which part of the coded packet the channel touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelScope {
    Whole,
    IndexOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tx: TxConfig,
    pub oracle_rx: bool,
    pub channel_p: f64,
    pub channel_scope: ChannelScope,
    /// Everything random in a run derives from this and the scene id.
    pub seed: u64,
    /// Training step of the model, recorded in the metrics row.
    pub stop_step: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tx: TxConfig::default(),
            oracle_rx: false,
            channel_p: 0.0,
            channel_scope: ChannelScope::Whole,
            seed: 0,
            stop_step: 0,
        }
    }
}

impl RunConfig {
    pub fn rx_init_tag(&self) -> &'static str {
        if self.oracle_rx {
            "oracle"
        } else {
            "dropped-term"
        }
    }

    /// key=value lines for the run sidecar.
    pub fn metadata(&self, bank: &NoiseBank) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        kv("rx_init", self.rx_init_tag().to_string());
        kv("run_seed", self.seed.to_string());
        kv("bank_seed", bank.seed().to_string());
        kv("bank_size", bank.len().to_string());
        kv("channel", "binary-symmetric".to_string());
        kv("channel_p", self.channel_p.to_string());
        kv(
            "channel_scope",
            match self.channel_scope {
                ChannelScope::Whole => "whole",
                ChannelScope::IndexOnly => "index-only",
            }
            .to_string(),
        );
        kv("strong_code_factor", self.tx.codec.strong.factor().to_string());
        kv("weak_code_factor", self.tx.codec.weak.factor().to_string());
        kv("run_length", self.tx.codec.run_length.to_string());
        kv(
            "index_policy",
            match self.tx.index_policy {
                IndexPolicy::Selected => "selected".to_string(),
                IndexPolicy::Random(_) => "random".to_string(),
            },
        );
        kv("stop_step", self.stop_step.to_string());
        s
    }
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "scene_id",
    "seed",
    "N",
    "p",
    "index_tx",
    "index_rx",
    "proxy",
    "psnr",
    "payload_bits_condition",
    "payload_bits_index",
    "stop_step",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scene_id: u64,
    pub seed: u64,
    pub n: usize,
    pub p: f64,
    pub index_tx: usize,
    /// `None` (blank in CSV) when the packet was lost.
    pub index_rx: Option<usize>,
    pub proxy: Option<f64>,
    pub psnr: Option<f64>,
    pub payload_bits_condition: u64,
    pub payload_bits_index: u64,
    pub stop_step: u64,
}

fn blank<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    /// True when the receiver could not decode the packet.
    pub fn lost(&self) -> bool {
        self.index_rx.is_none()
    }

    pub fn csv_header() -> String {
        METRICS_COLUMNS.join(",")
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.scene_id,
            self.seed,
            self.n,
            self.p,
            self.index_tx,
            blank(self.index_rx),
            blank(self.proxy),
            blank(self.psnr),
            self.payload_bits_condition,
            self.payload_bits_index,
            self.stop_step
        )
    }
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.csv_line())
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = MetricsRow::csv_header();
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Seeds one scene of a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSeeds {
    pub channel: u64,
    pub sampler: u64,
    pub index: u64,
}

pub fn scene_seeds(run_seed: u64, scene_id: u64) -> SceneSeeds {
    SceneSeeds {
        channel: rng::derive_seed(run_seed, rng::stream::CHANNEL, scene_id),
        sampler: rng::derive_seed(run_seed, rng::stream::SAMPLER, scene_id),
        index: rng::derive_seed(run_seed, rng::stream::EXPERIMENT, scene_id),
    }
}

impl TxConfig {
    /// Per-scene variant: a random index policy gets its own draw per scene.
    pub fn for_scene(&self, seeds: &SceneSeeds) -> TxConfig {
        let mut c = *self;
        if let IndexPolicy::Random(base) = c.index_policy {
            c.index_policy = IndexPolicy::Random(base ^ seeds.index);
        }
        c
    }
}

/// tx → channel → rx → metrics for one scene. A packet the receiver cannot
/// decode is not an error here: the row is returned with the rx-side fields
/// empty and no regenerated image.
pub fn end_to_end<P: NoisePredictor + ?Sized>(
    scene_id: u64,
    scene: &Scene,
    bank: &NoiseBank,
    model: &P,
    schedule: &NoiseSchedule,
    config: &RunConfig,
) -> Result<(Option<RxResult>, MetricsRow)> {
    let seeds = scene_seeds(config.seed, scene_id);
    let tx_config = config.tx.for_scene(&seeds);
    let sent = tx(&scene.image, &scene.labels, bank, schedule, &tx_config).stage("tx")?;

    let mut channel = ChannelModel::binary_symmetric(config.channel_p, seeds.channel).stage("channel")?;
    let received = match config.channel_scope {
        ChannelScope::Whole => channel.transmit(&sent.bits),
        ChannelScope::IndexOnly => {
            let region = index_region(sent.bits.len(), bank.len(), &config.tx.codec);
            channel.transmit_range(&sent.bits, region)
        }
    };

    let rx_config = RxConfig {
        codec: config.tx.codec,
        init: if config.oracle_rx {
            RxInit::Oracle(sent.latent.clone())
        } else {
            RxInit::DroppedTerm
        },
        sampler_seed: seeds.sampler,
    };
    let mut row = MetricsRow {
        scene_id,
        seed: config.seed,
        n: bank.len(),
        p: config.channel_p,
        index_tx: sent.index,
        index_rx: None,
        proxy: None,
        psnr: None,
        payload_bits_condition: sent.payload.condition_bits,
        payload_bits_index: sent.payload.index_bits,
        stop_step: config.stop_step,
    };
    let result = match rx(&received, bank, model, schedule, &rx_config) {
        Ok(r) => r,
        Err(Error::PacketLost(msg)) => {
            log::warn!("scene {scene_id}: packet lost ({msg})");
            return Ok((None, row));
        }
        Err(e) => return Err(e).stage("rx"),
    };
    log::debug!(
        "scene {scene_id}: decode {:?}, sample {:?}",
        result.timings.decode,
        result.timings.sample
    );

    row.index_rx = Some(result.index);
    row.proxy = Some(perceptual_proxy(&scene.image, &result.image).stage("metrics")?);
    row.psnr = Some(psnr(&scene.image, &result.image, DEFAULT_PEAK).stage("metrics")?);
    Ok((Some(result), row))
}

/// [`end_to_end`] over many scenes in parallel; scene `i` gets id `i`.
pub fn run_scenes<P: NoisePredictor + Sync + ?Sized>(
    scenes: &[Scene],
    bank: &NoiseBank,
    model: &P,
    schedule: &NoiseSchedule,
    config: &RunConfig,
) -> Result<Vec<MetricsRow>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| end_to_end(i as u64, s, bank, model, schedule, config).map(|(_, row)| row))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::build_bank;
    use crate::channel::index_bits;
    use crate::dataset::{generate_scenes, Split};
    use crate::diffusion::NoiseSchedule;
    use crate::error::Error;
    use crate::semantics::SceneParams;
    use crate::tensor::Shape;

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise(&self, x: &Tensor, _: usize, _: &SemanticCondition) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    fn setup(n: usize) -> (Vec<Scene>, NoiseBank, NoiseSchedule) {
        let params = SceneParams {
            height: 16,
            width: 16,
            ..SceneParams::default()
        };
        let scenes = generate_scenes(2, Split::Train, 3, &params).unwrap();
        let bank = build_bank(5, n, Shape::new(3, 16, 16)).unwrap();
        let schedule = NoiseSchedule::new(10, crate::diffusion::ScheduleKind::Linear, 1e-2, 0.5).unwrap();
        (scenes, bank, schedule)
    }

    #[test]
    fn tx_is_deterministic_and_picks_best_index() {
        let (scenes, bank, schedule) = setup(16);
        let s = &scenes[0];
        let a = tx(&s.image, &s.labels, &bank, &schedule, &TxConfig::default()).unwrap();
        let b = tx(&s.image, &s.labels, &bank, &schedule, &TxConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.index, a.radius.best_index);
        assert_eq!(a.payload.index_bits, index_bits(16) as u64);
    }

    #[test]
    fn single_vector_bank_sends_zero() {
        let (scenes, bank, schedule) = setup(1);
        let s = &scenes[0];
        let a = tx(&s.image, &s.labels, &bank, &schedule, &TxConfig::default()).unwrap();
        let r = rx(&a.bits, &bank, &Zero, &schedule, &RxConfig::default()).unwrap();
        assert_eq!(r.index, 0);
    }

    #[test]
    fn noiseless_round_trip_and_schema() {
        let (scenes, bank, schedule) = setup(16);
        let cfg = RunConfig::default();
        let (r, row) = end_to_end(0, &scenes[1], &bank, &Zero, &schedule, &cfg).unwrap();
        let r = r.unwrap();
        assert_eq!(Some(row.index_tx), row.index_rx);
        assert!(r.image.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(row.csv_line().split(',').count(), METRICS_COLUMNS.len());
        let again = end_to_end(0, &scenes[1], &bank, &Zero, &schedule, &cfg).unwrap();
        assert_eq!(again.1, row);
        assert_eq!(again.0.unwrap().image, r.image);
        assert!(cfg.metadata(&bank).contains("rx_init=dropped-term\n"));
    }

    #[test]
    fn every_index_yields_a_valid_image() {
        let (scenes, bank, schedule) = setup(8);
        let s = &scenes[0];
        let sent = tx(&s.image, &s.labels, &bank, &schedule, &TxConfig::default()).unwrap();
        for i in 0..bank.len() {
            let bits = encode_packet(&sent.condition, i, bank.len(), &CodecConfig::default()).unwrap();
            let r = rx(&bits, &bank, &Zero, &schedule, &RxConfig::default()).unwrap();
            assert_eq!(r.index, i);
            assert!(r.image.is_finite());
            assert!(r.image.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn lost_header_is_an_error() {
        let (_, bank, schedule) = setup(4);
        let err = rx(&[false; 600], &bank, &Zero, &schedule, &RxConfig::default()).unwrap_err();
        assert!(matches!(err, Error::PacketLost(_)));
    }

    #[test]
    fn lost_packet_leaves_blank_fields() {
        let (scenes, bank, schedule) = setup(4);
        let cfg = RunConfig {
            channel_p: 0.5,
            ..RunConfig::default()
        };
        let rows = run_scenes(&scenes, &bank, &Zero, &schedule, &cfg).unwrap();
        assert_eq!(rows.len(), scenes.len());
        let lost = rows.iter().find(|r| r.lost()).expect("p=0.5 loses a packet");
        let line = lost.csv_line();
        assert_eq!(line.split(',').count(), METRICS_COLUMNS.len());
        assert!(line.contains(",,,"));
    }
}
