//! The pipeline commands behind the `fusedet` binary: data generation,
//! staged training, detection, evaluation and reporting.

use crate::manifest::{build_dir_atomic, write_atomic, RunManifest};
use crate::svg::LinePlot;
use fusedet_core::checkpoint::{dir_hash, load_fused, save_expert, save_fused};
use fusedet_core::config::Config;
use fusedet_core::detect::{
    generate_proposals, nms, read_detections, score_windows, write_detections, Detection,
    DetectionsHeader,
};
use fusedet_core::error::Error;
use fusedet_core::eval::{
    average_precision, equal_error_rate, match_detections, pr_curve, write_metrics,
    MetricsReport, Outcome,
};
use fusedet_core::expert::Modality;
use fusedet_core::fusion::{FusedModel, FusionHead, Scheme};
use fusedet_core::rng::{derive_seed, rng_from};
use fusedet_core::synth::{
    generate_sequence, read_dataset_meta, read_frames, write_dataset, EnvironmentRegime,
};
use fusedet_core::train::{
    extract_crops, split_range, train_channel_net, train_experts, train_gate, train_late_head,
    Split,
};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Command failures carrying the process exit code.
#[derive(Debug)]
pub enum CommandError {
    /// Exit 2: bad configuration or flags.
    Config(Error),
    /// Exit 3: a required upstream artifact is missing.
    Dependency(String),
    /// Exit 4: bad or missing data.
    Data(Error),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::Dependency(_) => 3,
            CommandError::Data(_) => 4,
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Config(e) => write!(f, "{e}"),
            CommandError::Dependency(m) => write!(f, "dependency error: {m}"),
            CommandError::Data(e) => write!(f, "{e}"),
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, CommandError>;

fn config_err(e: Error) -> CommandError {
    CommandError::Config(e)
}

fn data_err(e: Error) -> CommandError {
    match e {
        Error::Config(_) | Error::Parameter(_) => CommandError::Config(e),
        other => CommandError::Data(other),
    }
}

/// Generates a synthetic dataset under `out` per the data configuration.
pub fn cmd_gen_data(config: &Config, out: &Path) -> CmdResult<()> {
    let script: Vec<(usize, EnvironmentRegime)> = config
        .data_script
        .iter()
        .map(|(start, name)| (*start, EnvironmentRegime::preset(*name)))
        .collect();
    let mut manifest = RunManifest::start("gen-data", config, config.data_seed);
    manifest.put("output", out.display().to_string());
    build_dir_atomic(out, |tmp| {
        let frames = generate_sequence(
            config.data_frames,
            &script,
            (config.data_height, config.data_width),
            config.data_actors,
            config.data_seed,
        )?;
        write_dataset(&frames, tmp, config.data_seed)?;
        manifest.write(&tmp.join("manifest.txt"))
    })
    .map_err(data_err)
}

/// Which component `cmd_train` builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Experts,
    Gate,
    Late,
    Channel,
}

impl TrainStage {
    pub fn name(self) -> &'static str {
        match self {
            TrainStage::Experts => "experts",
            TrainStage::Gate => "gate",
            TrainStage::Late => "late",
            TrainStage::Channel => "channel",
        }
    }

    pub fn from_name(name: &str) -> CmdResult<TrainStage> {
        match name {
            "experts" => Ok(TrainStage::Experts),
            "gate" => Ok(TrainStage::Gate),
            "late" => Ok(TrainStage::Late),
            "channel" => Ok(TrainStage::Channel),
            other => Err(CommandError::Config(Error::Config(format!(
                "unknown training stage `{other}`"
            )))),
        }
    }
}

fn loss_log(losses: &[f64]) -> String {
    let mut s = String::from("epoch\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{l}");
    }
    s
}

fn load_frames_for_split(
    data_dir: &Path,
    split: Split,
) -> CmdResult<Vec<fusedet_core::synth::MultimodalFrame>> {
    let meta = read_dataset_meta(data_dir).map_err(data_err)?;
    let range = split_range(meta.frame_count, split);
    read_frames(data_dir, &meta, range).map_err(data_err)
}

fn expert_dir(out: &Path, modality: Modality) -> PathBuf {
    out.join("experts").join(modality.name())
}

/// Trains one pipeline stage and writes its checkpoints under `out`.
pub fn cmd_train(stage: TrainStage, config: &Config, data_dir: &Path, out: &Path) -> CmdResult<()> {
    let modalities = config.train_modalities.clone();
    if modalities.is_empty() {
        return Err(CommandError::Config(Error::Config(
            "train.modalities must name at least one modality".into(),
        )));
    }
    let mut manifest = RunManifest::start(
        &format!("train-{}", stage.name()),
        config,
        config.train_seed,
    );
    manifest.put("input.data", data_dir.display().to_string());
    manifest.put("output", out.display().to_string());

    match stage {
        TrainStage::Experts => {
            let frames = load_frames_for_split(data_dir, Split::Train)?;
            let mut crop_rng = rng_from(derive_seed(config.train_seed, "crops-train", 0));
            let crops = extract_crops(
                &frames,
                &modalities,
                config.data_negatives_per_frame,
                Split::Train,
                &mut crop_rng,
            )
            .map_err(data_err)?;
            drop(frames);
            let result =
                train_experts(&crops, &modalities, &config.stage1()).map_err(data_err)?;
            manifest.put("crops.positives", crops.positives.to_string());
            manifest.put("crops.negatives", crops.negatives.to_string());
            build_dir_atomic(&out.join("experts"), |tmp| {
                for (i, net) in result.experts.iter().enumerate() {
                    let m = modalities[i];
                    let dir = tmp.join(m.name());
                    save_expert(net, &dir)?;
                    std::fs::write(dir.join("loss.tsv"), loss_log(&result.epoch_losses[i]))
                        .map_err(Error::io("writing loss.tsv"))?;
                    // single-expert model: the uniform mixture over one net
                    let single =
                        FusedModel::new(vec![net.clone()], FusionHead::Average)?;
                    save_fused(
                        &single,
                        &tmp.join(format!("single-{}", m.name())),
                        &[format!("../{}", m.name())],
                    )?;
                }
                let average = FusedModel::new(result.experts.clone(), FusionHead::Average)?;
                let refs: Vec<String> =
                    modalities.iter().map(|m| format!("../{}", m.name())).collect();
                save_fused(&average, &tmp.join("fused-average"), &refs)?;
                manifest.write(&tmp.join("manifest.txt"))
            })
            .map_err(data_err)
        }
        TrainStage::Gate | TrainStage::Late => {
            let mut experts = Vec::new();
            let mut hashes = Vec::new();
            for &m in &modalities {
                let dir = expert_dir(out, m);
                if !dir.join("manifest.txt").exists() {
                    return Err(CommandError::Dependency(format!(
                        "expert checkpoint {} not found; run --stage experts first",
                        dir.display()
                    )));
                }
                experts.push(fusedet_core::checkpoint::load_expert(&dir).map_err(data_err)?);
                hashes.push(dir_hash(&dir).map_err(data_err)?);
            }
            for (m, h) in modalities.iter().zip(&hashes) {
                manifest.put(&format!("expert_hash.{}", m.name()), h.clone());
            }
            let frames = load_frames_for_split(data_dir, Split::GateVal)?;
            let mut crop_rng = rng_from(derive_seed(config.train_seed, "crops-gateval", 0));
            let crops = extract_crops(
                &frames,
                &modalities,
                config.data_negatives_per_frame,
                Split::GateVal,
                &mut crop_rng,
            )
            .map_err(data_err)?;
            drop(frames);
            let refs: Vec<String> = modalities
                .iter()
                .map(|m| format!("../../experts/{}", m.name()))
                .collect();
            if stage == TrainStage::Gate {
                let (gate, losses) =
                    train_gate(&experts, &crops, &config.stage2()).map_err(data_err)?;
                build_dir_atomic(&out.join("fusion-gate"), |tmp| {
                    let mode = FusedModel::new(
                        experts.clone(),
                        FusionHead::Mode(gate.clone()),
                    )?;
                    save_fused(&mode, &tmp.join("fused-mode"), &refs)?;
                    // switching reuses the soft-trained gate, hardened at inference
                    let switch =
                        FusedModel::new(experts.clone(), FusionHead::Switch(gate.clone()))?;
                    save_fused(&switch, &tmp.join("fused-switch"), &refs)?;
                    std::fs::write(tmp.join("loss.tsv"), loss_log(&losses))
                        .map_err(Error::io("writing loss.tsv"))?;
                    manifest.write(&tmp.join("manifest.txt"))
                })
                .map_err(data_err)
            } else {
                let (head, losses) =
                    train_late_head(&experts, &crops, &config.stage2()).map_err(data_err)?;
                build_dir_atomic(&out.join("fusion-late"), |tmp| {
                    let late = FusedModel::new(experts.clone(), FusionHead::Late(head.clone()))?;
                    save_fused(&late, &tmp.join("fused-late"), &refs)?;
                    std::fs::write(tmp.join("loss.tsv"), loss_log(&losses))
                        .map_err(Error::io("writing loss.tsv"))?;
                    manifest.write(&tmp.join("manifest.txt"))
                })
                .map_err(data_err)
            }
        }
        TrainStage::Channel => {
            let frames = load_frames_for_split(data_dir, Split::Train)?;
            let mut crop_rng = rng_from(derive_seed(config.train_seed, "crops-train", 0));
            let crops = extract_crops(
                &frames,
                &modalities,
                config.data_negatives_per_frame,
                Split::Train,
                &mut crop_rng,
            )
            .map_err(data_err)?;
            drop(frames);
            let (net, losses) =
                train_channel_net(&crops, &modalities, &config.stage1()).map_err(data_err)?;
            build_dir_atomic(&out.join("channel"), |tmp| {
                let model = FusedModel::new(
                    vec![],
                    FusionHead::Channel {
                        net: net.clone(),
                        order: modalities.clone(),
                    },
                )?;
                save_fused(&model, &tmp.join("fused-channel"), &[])?;
                std::fs::write(tmp.join("loss.tsv"), loss_log(&losses))
                    .map_err(Error::io("writing loss.tsv"))?;
                manifest.write(&tmp.join("manifest.txt"))
            })
            .map_err(data_err)
        }
    }
}

/// Runs proposals → scoring → NMS over the test split and writes the
/// detections file.
pub fn cmd_detect(
    model_dir: &Path,
    data_dir: &Path,
    split: Split,
    out_file: &Path,
    config: &Config,
) -> CmdResult<()> {
    if split != Split::Test {
        return Err(CommandError::Config(Error::Config(
            "only the test split can be scored".into(),
        )));
    }
    if !model_dir.join("manifest.txt").exists() {
        return Err(CommandError::Dependency(format!(
            "model checkpoint {} not found",
            model_dir.display()
        )));
    }
    let model = load_fused(model_dir).map_err(data_err)?;
    let meta = read_dataset_meta(data_dir).map_err(data_err)?;
    let range = split_range(meta.frame_count, split);
    let frames = read_frames(data_dir, &meta, range.clone()).map_err(data_err)?;
    let proposals = generate_proposals(
        (meta.height, meta.width),
        &config.detect_scales,
        config.detect_aspect,
        config.detect_stride_fraction,
    )
    .map_err(config_err)?;
    if !(config.detect_nms_iou > 0.0 && config.detect_nms_iou < 1.0) {
        return Err(CommandError::Config(Error::Config(format!(
            "detect.nms_iou must be in (0,1), got {}",
            config.detect_nms_iou
        ))));
    }

    let per_frame: Vec<fusedet_core::Result<Vec<Detection>>> = frames
        .par_iter()
        .map(|frame| {
            let scored = score_windows(&model, frame, &proposals.boxes)?;
            Ok(nms(&scored, config.detect_nms_iou))
        })
        .collect();
    let mut detections = Vec::new();
    for r in per_frame {
        detections.extend(r.map_err(data_err)?);
    }

    let gate_columns = match model.scheme() {
        Scheme::Mode | Scheme::Switch => model.experts.len(),
        _ => 0,
    };
    let header = DetectionsHeader {
        scheme: model.scheme().name().to_string(),
        experts: model.modalities().iter().map(|m| m.name().to_string()).collect(),
        frames: range,
        gate_columns,
    };
    let mut manifest = RunManifest::start("detect", config, config.train_seed);
    manifest.put("input.model", model_dir.display().to_string());
    manifest.put("input.data", data_dir.display().to_string());
    manifest.put("output", out_file.display().to_string());
    manifest.put("proposals.per_frame", proposals.boxes.len().to_string());
    if !proposals.skipped_scales.is_empty() {
        manifest.put(
            "proposals.skipped_scales",
            format!("{:?}", proposals.skipped_scales),
        );
    }

    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| data_err(Error::io("creating output parent")(e)))?;
        }
    }
    let tmp = out_file.with_extension("tsv.partial");
    write_detections(&tmp, &header, &detections).map_err(data_err)?;
    std::fs::rename(&tmp, out_file)
        .map_err(|e| data_err(Error::io("renaming detections file")(e)))?;
    manifest
        .write(&manifest_path_for(out_file))
        .map_err(data_err)
}

fn manifest_path_for(out_file: &Path) -> PathBuf {
    let stem = out_file
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".into());
    out_file
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(format!("{stem}.manifest.txt"))
}

/// Matches a detections file against the dataset's annotations and writes
/// the metrics report plus the PR curve.
pub fn cmd_eval(
    detections_file: &Path,
    data_dir: &Path,
    iou_threshold: f64,
    out: &Path,
) -> CmdResult<()> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(CommandError::Config(Error::Config(format!(
            "iou threshold must be in (0,1), got {iou_threshold}"
        ))));
    }
    let (header, detections) = read_detections(detections_file).map_err(data_err)?;
    let meta = read_dataset_meta(data_dir).map_err(data_err)?;
    if header.frames.end > meta.frame_count {
        return Err(CommandError::Data(Error::Input(format!(
            "detections cover frames {:?} but the dataset has only {}",
            header.frames, meta.frame_count
        ))));
    }
    let mut by_frame: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        if !header.frames.contains(&d.frame_index) {
            return Err(CommandError::Data(Error::Input(format!(
                "detection on frame {} outside the scored range {:?}",
                d.frame_index, header.frames
            ))));
        }
        by_frame.entry(d.frame_index).or_default().push(d);
    }
    let empty: Vec<Detection> = Vec::new();
    let mut scored: Vec<(f64, Outcome)> = Vec::new();
    let mut total_positives = 0usize;
    let mut total_annotations = 0usize;
    for frame_idx in header.frames.clone() {
        let anns = &meta.annotations[frame_idx];
        total_annotations += anns.len();
        total_positives += anns.iter().filter(|a| !a.occluded).count();
        let dets = by_frame.get(&frame_idx).unwrap_or(&empty);
        let result = match_detections(dets, anns, iou_threshold);
        for (det, (outcome, _)) in dets.iter().zip(&result.labels) {
            scored.push((det.score, *outcome));
        }
    }
    let curve = pr_curve(&scored, total_positives).map_err(data_err)?;
    let ap = average_precision(&curve);
    let eer = equal_error_rate(&curve);
    let report = MetricsReport {
        ap,
        eer: eer.value,
        recall_at_eer: eer.recall,
        iou_threshold,
        n_frames: header.frames.len(),
        n_annotations: total_annotations,
    };
    let mut manifest = RunManifest::start("eval", &Config::default(), 0);
    manifest.put("input.detections", detections_file.display().to_string());
    manifest.put("input.data", data_dir.display().to_string());
    manifest.put("iou_threshold", iou_threshold.to_string());
    manifest.put("output", out.display().to_string());
    build_dir_atomic(out, |tmp| {
        write_metrics(tmp, &report, &curve)?;
        manifest.write(&tmp.join("manifest.txt"))
    })
    .map_err(data_err)
}

struct RunSummary {
    input: String,
    method: String,
    report: MetricsReport,
}

/// Aggregates evaluated runs into a comparison table and, for gated runs,
/// a per-frame mean gate-weight timeline with an SVG plot.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> CmdResult<()> {
    if run_dirs.is_empty() {
        return Err(CommandError::Config(Error::Config(
            "report needs at least one evaluated run directory".into(),
        )));
    }
    let mut summaries = Vec::new();
    let mut timelines: Vec<(String, Vec<String>, BTreeMap<usize, Vec<f64>>)> = Vec::new();
    for dir in run_dirs {
        let metrics_dir = dir.join("metrics");
        if !metrics_dir.join("metrics.txt").exists() {
            return Err(CommandError::Data(Error::Input(format!(
                "no metrics found under {}; run eval first",
                dir.display()
            ))));
        }
        let report = fusedet_core::eval::read_metrics(&metrics_dir).map_err(data_err)?;
        let (header, detections) =
            read_detections(&dir.join("detections.tsv")).map_err(data_err)?;
        let method = if header.scheme == "average" && header.experts.len() == 1 {
            "single".to_string()
        } else {
            header.scheme.clone()
        };
        summaries.push(RunSummary {
            input: header.experts.join("-"),
            method,
            report,
        });
        if header.gate_columns > 0 {
            let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
            for d in &detections {
                if let Some(g) = &d.gate {
                    let entry = sums
                        .entry(d.frame_index)
                        .or_insert_with(|| (vec![0.0; g.len()], 0));
                    for (acc, v) in entry.0.iter_mut().zip(g) {
                        *acc += v;
                    }
                    entry.1 += 1;
                }
            }
            let means: BTreeMap<usize, Vec<f64>> = sums
                .into_iter()
                .map(|(f, (sum, n))| (f, sum.iter().map(|s| s / n as f64).collect()))
                .collect();
            let name = dir
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "run".into());
            timelines.push((name, header.experts.clone(), means));
        }
    }

    let mut manifest = RunManifest::start("report", &Config::default(), 0);
    for dir in run_dirs {
        manifest.put("input.run", dir.display().to_string());
    }
    manifest.put("output", out.display().to_string());

    build_dir_atomic(out, |tmp| {
        let mut table = String::from("input\tmethod\tap\trecall_at_eer\teer\n");
        for s in &summaries {
            let _ = writeln!(
                table,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                s.input, s.method, s.report.ap, s.report.recall_at_eer, s.report.eer
            );
        }
        write_atomic(&tmp.join("table.tsv"), table.as_bytes())?;

        for (name, experts, means) in &timelines {
            let mut tsv = String::from("frame_index");
            for e in experts {
                let _ = write!(tsv, "\tg_{e}");
            }
            tsv.push('\n');
            for (frame, g) in means {
                let _ = write!(tsv, "{frame}");
                for v in g {
                    let _ = write!(tsv, "\t{v}");
                }
                tsv.push('\n');
            }
            write_atomic(&tmp.join(format!("gate_timeline-{name}.tsv")), tsv.as_bytes())?;

            let mut plot = LinePlot::new(
                &format!("mean gate weights per frame ({name})"),
                "frame",
                "gate weight",
            );
            let palette = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
            for (i, e) in experts.iter().enumerate() {
                let points: Vec<(f64, f64)> = means
                    .iter()
                    .map(|(f, g)| (*f as f64, g[i]))
                    .collect();
                plot.add_series(&format!("g_{e}"), palette[i % palette.len()], points);
            }
            write_atomic(
                &tmp.join(format!("gate_timeline-{name}.svg")),
                plot.render().as_bytes(),
            )?;
        }
        manifest.write(&tmp.join("manifest.txt"))
    })
    .map_err(data_err)
}
