//! Run settings: a fixed table of keys with defaults, overridden first by a
//! `key=value` file and then by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bank::BankFileMode;
use crate::channel::{Code, CodecConfig};
use crate::controller::TrainingConfig;
use crate::denoiser::{Architecture, DenoiserConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::pipeline::{ChannelScope, IndexPolicy, RunConfig, TxConfig};
use crate::semantics::{SceneParams, NUM_CLASSES};

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default,
        help,
    }
}

pub const KEYS: &[KeySpec] = &[
    key("seed", "0", "Base seed for every random stream"),
    key("threads", "0", "Worker threads, 0 uses all cores"),
    key("data_dir", "", "Dataset directory written by gen-data"),
    key("generate", "false", "Generate scenes in memory when data_dir is empty"),
    key("train_scenes", "256", "Training scenes to generate"),
    key("validation_scenes", "16", "Held-out scenes scored at each check"),
    key("test_scenes", "32", "Scenes sent by run"),
    key("image_size", "32", "Scene height and width in pixels"),
    key("min_objects", "1", "Fewest objects per scene"),
    key("max_objects", "5", "Most objects per scene"),
    key("edge_threshold", "0.25", "Gradient magnitude above which a pixel is an edge"),
    key("architecture", "unet", "Denoiser layout: unet or mlp"),
    key("base_channels", "8", "Width of the first denoiser level"),
    key("time_dim", "8", "Number of sinusoidal time features (even)"),
    key("diffusion_steps", "100", "Number of diffusion steps T"),
    key("beta_start", "0.001", "First variance of the linear schedule"),
    key("beta_end", "0.2", "Last variance of the linear schedule"),
    key("bank_size", "1000", "Noise bank size N"),
    key("bank_seed", "7", "Seed the noise bank is drawn from"),
    key("bank_file_mode", "seed-only", "Bank file contents: seed-only or full"),
    key("optimizer", "adam", "Update rule: adam or sgd"),
    key("learning_rate", "0.001", "Optimizer step size"),
    key("batch_size", "8", "Examples per training step"),
    key("max_steps", "20000", "Training step budget"),
    key("check_interval", "1000", "Steps between validation checks"),
    key("target_score", "0.25", "Stop when the validation proxy is at or below this"),
    key("strong_repeat", "5", "Repetition factor protecting header and condition"),
    key("weak_repeat", "1", "Repetition factor protecting the index, 1 for none"),
    key("run_length", "false", "Run-length code segmentation rows"),
    key("channel_p", "0", "Bit flip probability of the channel"),
    key("channel_scope", "whole", "Bits exposed to the channel: whole or index-only"),
    key("rx_init", "dropped-term", "Receiver start point: dropped-term or oracle"),
    key("index_policy", "selected", "Transmitted index: selected or random"),
    key("artifacts", "", "Directory holding model.dgn and bank.nbk from train"),
    key("scene_id", "0", "Test scene sent by tx"),
    key("packet", "", "Packet file read by rx, binary or .hex"),
    key("fd_images", "16", "Images averaged by fd-compare"),
    key("fd_stride", "10", "Step stride of fd-compare"),
    key("ablate_sizes", "10,1000,10000", "Bank sizes trained by ablate-nb"),
    key("ablate_seeds", "0", "Seeds trained by ablate-nb"),
    key("svg", "true", "Also write SVG plots next to CSV files"),
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

/// Raw string values for every key, plus where each came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<&'static str, (String, &'static str)>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: KEYS
                .iter()
                .map(|k| (k.name, (k.default.to_string(), "default")))
                .collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, name: &str, value: &str, origin: &'static str) -> Result<()> {
        let spec = key_spec(name)
            .ok_or_else(|| Error::config(format!("unknown config key '{name}'")))?;
        self.values.insert(spec.name, (value.trim().to_string(), origin));
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &'static str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{origin} line {}: expected key=value", n + 1))
            })?;
            self.set(k.trim(), v, origin)
                .map_err(|e| Error::config(format!("{origin} line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        self.apply_text(&text, "config file")
    }

    pub fn get(&self, name: &str) -> &str {
        &self.values[name].0
    }

    pub fn origin(&self, name: &str) -> &'static str {
        self.values[name].1
    }

    fn parse<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(name)
            .parse()
            .map_err(|e| Error::config(format!("{name}={}: {e}", self.get(name))))
    }

    fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(name)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::config(format!("{name} entry '{s}': {e}")))
            })
            .collect()
    }

    fn choice<T: Copy>(&self, name: &str, options: &[(&str, T)]) -> Result<T> {
        let v = self.get(name);
        options
            .iter()
            .find(|(k, _)| *k == v)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(k, _)| *k).collect();
                Error::config(format!("{name}={v}: expected one of {}", names.join(", ")))
            })
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        let v = self.get(name);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Persisted form: every key, one per line, in table order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{}={}\n", k.name, self.get(k.name)))
            .collect()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let size: usize = self.parse("image_size")?;
        let repeat = |name: &str| -> Result<Code> {
            Ok(match self.parse::<usize>(name)? {
                1 => Code::None,
                n => Code::Repetition(n),
            })
        };
        let codec = CodecConfig {
            strong: repeat("strong_repeat")?,
            weak: repeat("weak_repeat")?,
            run_length: self.parse("run_length")?,
        };
        codec.validate()?;
        let denoiser = DenoiserConfig {
            architecture: self.choice(
                "architecture",
                &[("unet", Architecture::UNet), ("mlp", Architecture::PixelMlp)],
            )?,
            image_channels: 3,
            cond_channels: NUM_CLASSES + 1,
            time_dim: self.parse("time_dim")?,
            base_channels: self.parse("base_channels")?,
            height: size,
            width: size,
            steps: self.parse("diffusion_steps")?,
            beta_start: self.parse("beta_start")?,
            beta_end: self.parse("beta_end")?,
        };
        let training = TrainingConfig {
            denoiser,
            target_score: self.parse("target_score")?,
            check_interval: self.parse("check_interval")?,
            validation_size: self.parse("validation_scenes")?,
            max_steps: self.parse("max_steps")?,
            batch_size: self.parse("batch_size")?,
            learning_rate: self.parse("learning_rate")?,
            optimizer: self.choice(
                "optimizer",
                &[("adam", OptimizerKind::Adam), ("sgd", OptimizerKind::Sgd)],
            )?,
            bank_size: self.parse("bank_size")?,
            bank_seed: self.parse("bank_seed")?,
            seed: self.parse("seed")?,
            edge_threshold: self.parse("edge_threshold")?,
        };
        training.validate()?;
        let seed = training.seed;
        let run = RunConfig {
            tx: TxConfig {
                codec,
                edge_threshold: training.edge_threshold,
                num_classes: NUM_CLASSES,
                index_policy: self.choice(
                    "index_policy",
                    &[("selected", IndexPolicy::Selected), ("random", IndexPolicy::Random(seed))],
                )?,
            },
            oracle_rx: self.choice("rx_init", &[("dropped-term", false), ("oracle", true)])?,
            channel_p: self.parse("channel_p")?,
            channel_scope: self.choice(
                "channel_scope",
                &[("whole", ChannelScope::Whole), ("index-only", ChannelScope::IndexOnly)],
            )?,
            seed,
            stop_step: 0,
        };
        if !(0.0..=0.5).contains(&run.channel_p) {
            return Err(Error::config(format!("channel_p={} outside [0, 0.5]", run.channel_p)));
        }
        let scenes = SceneParams {
            height: size,
            width: size,
            min_objects: self.parse("min_objects")?,
            max_objects: self.parse("max_objects")?,
        };
        if scenes.min_objects > scenes.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        Ok(Resolved {
            seed,
            threads: self.parse("threads")?,
            data_dir: self.path("data_dir"),
            generate: self.parse("generate")?,
            train_scenes: self.parse("train_scenes")?,
            test_scenes: self.parse("test_scenes")?,
            scenes,
            training,
            run,
            bank_file_mode: self.choice(
                "bank_file_mode",
                &[("seed-only", BankFileMode::SeedOnly), ("full", BankFileMode::FullVectors)],
            )?,
            artifacts: self.path("artifacts"),
            scene_id: self.parse("scene_id")?,
            packet: self.path("packet"),
            fd_images: self.parse("fd_images")?,
            fd_stride: self.parse("fd_stride")?,
            ablate_sizes: self.list("ablate_sizes")?,
            ablate_seeds: self.list("ablate_seeds")?,
            svg: self.parse("svg")?,
        })
    }
}

/// Typed view of [`Settings`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub threads: usize,
    pub data_dir: Option<PathBuf>,
    pub generate: bool,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scenes: SceneParams,
    pub training: TrainingConfig,
    pub run: RunConfig,
    pub bank_file_mode: BankFileMode,
    pub artifacts: Option<PathBuf>,
    pub scene_id: usize,
    pub packet: Option<PathBuf>,
    pub fd_images: usize,
    pub fd_stride: usize,
    pub ablate_sizes: Vec<usize>,
    pub ablate_seeds: Vec<u64>,
    pub svg: bool,
}
