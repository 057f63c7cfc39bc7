//! Flat key=value run configuration (`section.key=value` lines).
//!
//! Every key has a default; unknown keys are an error naming the key and
//! line. `#` starts a comment.

use crate::error::{Error, Result};
use crate::expert::Modality;
use crate::synth::{parse_script, script_to_string, RegimeName};
use crate::train::{Stage, TrainConfig};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data_frames: usize,
    pub data_width: usize,
    pub data_height: usize,
    pub data_actors: usize,
    pub data_seed: u64,
    pub data_script: Vec<(usize, RegimeName)>,
    pub data_negatives_per_frame: usize,

    pub train_lr: f64,
    pub train_fusion_lr: f64,
    pub train_momentum: f64,
    pub train_batch: usize,
    pub train_epochs: usize,
    pub train_fusion_epochs: usize,
    pub train_dropout: f64,
    pub train_seed: u64,
    pub train_modalities: Vec<Modality>,

    pub detect_scales: Vec<usize>,
    pub detect_aspect: f64,
    pub detect_stride_fraction: f64,
    pub detect_nms_iou: f64,

    pub eval_iou: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_frames: 2000,
            data_width: 96,
            data_height: 96,
            data_actors: 3,
            data_seed: 11,
            data_script: vec![(0, RegimeName::BrightIndoor)],
            data_negatives_per_frame: 10,
            train_lr: 0.01,
            train_fusion_lr: 0.005,
            train_momentum: 0.9,
            train_batch: 64,
            train_epochs: 10,
            train_fusion_epochs: 10,
            train_dropout: 0.5,
            train_seed: 7,
            train_modalities: vec![Modality::Rgb, Modality::Depth],
            detect_scales: vec![32, 48, 64],
            detect_aspect: 0.5,
            detect_stride_fraction: 0.25,
            detect_nms_iou: 0.3,
            eval_iou: 0.6,
        }
    }
}

fn bad_value(key: &str, value: &str, source: &str, line: usize) -> Error {
    Error::Config(format!(
        "bad value `{value}` for key `{key}` at {source}:{line}"
    ))
}

impl Config {
    /// Applies one `key=value` assignment; `source`/`line` feed error text.
    pub fn set(&mut self, key: &str, value: &str, source: &str, line: usize) -> Result<()> {
        macro_rules! parse {
            ($field:expr) => {
                $field = value
                    .trim()
                    .parse()
                    .map_err(|_| bad_value(key, value, source, line))?
            };
        }
        match key {
            "data.frames" => parse!(self.data_frames),
            "data.width" => parse!(self.data_width),
            "data.height" => parse!(self.data_height),
            "data.actors" => parse!(self.data_actors),
            "data.seed" => parse!(self.data_seed),
            "data.negatives_per_frame" => parse!(self.data_negatives_per_frame),
            "data.script" => {
                self.data_script =
                    parse_script(value.trim()).map_err(|_| bad_value(key, value, source, line))?
            }
            "train.lr" => parse!(self.train_lr),
            "train.fusion_lr" => parse!(self.train_fusion_lr),
            "train.momentum" => parse!(self.train_momentum),
            "train.batch" => parse!(self.train_batch),
            "train.epochs" => parse!(self.train_epochs),
            "train.fusion_epochs" => parse!(self.train_fusion_epochs),
            "train.dropout" => parse!(self.train_dropout),
            "train.seed" => parse!(self.train_seed),
            "train.modalities" => {
                self.train_modalities = value
                    .split(',')
                    .map(|s| Modality::from_name(s.trim()))
                    .collect::<Result<_>>()
                    .map_err(|_| bad_value(key, value, source, line))?
            }
            "detect.scales" => {
                self.detect_scales = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad_value(key, value, source, line))?
            }
            "detect.aspect" => parse!(self.detect_aspect),
            "detect.stride_fraction" => parse!(self.detect_stride_fraction),
            "detect.nms_iou" => parse!(self.detect_nms_iou),
            "eval.iou" => parse!(self.eval_iou),
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` at {source}:{line}"
                )))
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str, source: &str) -> Result<Config> {
        let mut config = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "expected key=value at {source}:{}, got `{raw}`",
                    i + 1
                ))
            })?;
            config.set(key.trim(), value, source, i + 1)?;
        }
        Ok(config)
    }

    pub fn parse_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(Error::io(format!("reading config {}", path.display())))?;
        Config::parse_str(&text, &path.display().to_string())
    }

    /// Every key in sorted order, post-defaults; the run-manifest form.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "data.actors={}", self.data_actors);
        let _ = writeln!(s, "data.frames={}", self.data_frames);
        let _ = writeln!(s, "data.height={}", self.data_height);
        let _ = writeln!(
            s,
            "data.negatives_per_frame={}",
            self.data_negatives_per_frame
        );
        let _ = writeln!(s, "data.script={}", script_to_string(&self.data_script));
        let _ = writeln!(s, "data.seed={}", self.data_seed);
        let _ = writeln!(s, "data.width={}", self.data_width);
        let _ = writeln!(s, "detect.aspect={}", self.detect_aspect);
        let _ = writeln!(
            s,
            "detect.nms_iou={}",
            self.detect_nms_iou
        );
        let scales: Vec<String> = self.detect_scales.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "detect.scales={}", scales.join(","));
        let _ = writeln!(
            s,
            "detect.stride_fraction={}",
            self.detect_stride_fraction
        );
        let _ = writeln!(s, "eval.iou={}", self.eval_iou);
        let _ = writeln!(s, "train.batch={}", self.train_batch);
        let _ = writeln!(s, "train.dropout={}", self.train_dropout);
        let _ = writeln!(s, "train.epochs={}", self.train_epochs);
        let _ = writeln!(s, "train.fusion_epochs={}", self.train_fusion_epochs);
        let _ = writeln!(s, "train.fusion_lr={}", self.train_fusion_lr);
        let _ = writeln!(s, "train.lr={}", self.train_lr);
        let mods: Vec<&str> = self.train_modalities.iter().map(|m| m.name()).collect();
        let _ = writeln!(s, "train.modalities={}", mods.join(","));
        let _ = writeln!(s, "train.momentum={}", self.train_momentum);
        let _ = writeln!(s, "train.seed={}", self.train_seed);
        s
    }

    /// Stage-1 hyperparameters (experts and the channel baseline).
    pub fn stage1(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train_lr,
            momentum: self.train_momentum,
            batch_size: self.train_batch,
            epochs: self.train_epochs,
            dropout_rate: self.train_dropout,
            seed: self.train_seed,
            stage: Stage::Experts,
        }
    }

    /// Stage-2 hyperparameters (gate and the late-fusion head).
    pub fn stage2(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train_fusion_lr,
            momentum: self.train_momentum,
            batch_size: self.train_batch,
            epochs: self.train_fusion_epochs,
            dropout_rate: self.train_dropout,
            seed: self.train_seed,
            stage: Stage::Fusion,
        }
    }
}
