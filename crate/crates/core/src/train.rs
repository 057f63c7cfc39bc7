//! Two-stage training.
//!
//! Stage 1 trains each per-modality expert end-to-end on window crops with
//! cross-entropy and momentum SGD. Stage 2 freezes the experts and trains
//! the fusion stage (gating network or late head) on a held-out split,
//! with expert dropout kept active so the fusion sees augmented features.
//! The channel-fusion baseline follows the stage-1 protocol over stacked
//! input channels.

use crate::detect::BoundingBox;
use crate::error::{Error, Result};
use crate::expert::{
    build_expert, build_stacked_net, colorize_depth, ExpertNet, InputKind, Modality, ModalityMap,
    DEPTH_COLOR_RANGE_M, WINDOW_SIDE,
};
use crate::fusion::{late_head_graph, GatingNet};
use crate::img::crop_resize;
use crate::optim::sgd_step;
use crate::rng::{derive_seed, rng_from};
use crate::synth::MultimodalFrame;
use crate::tape::Var;
use crate::tensor::Tensor as GenTensor;
use crate::{Params, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const CLASS_BACKGROUND: usize = 0;
pub const CLASS_HUMAN: usize = 1;
pub const CLASS_COUNT: usize = 2;

/// Negatives must stay below this IoU against every annotation.
pub const NEGATIVE_IOU_MAX: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Experts,
    Fusion,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub stage: Stage,
}

impl TrainConfig {
    pub fn stage1(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            dropout_rate: 0.5,
            seed,
            stage: Stage::Experts,
        }
    }

    pub fn stage2(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            dropout_rate: 0.5,
            seed,
            stage: Stage::Fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be non-negative and finite, got {}",
                self.learning_rate
            )));
        }
        if self.momentum < 0.0 {
            return Err(Error::Config("momentum must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Position-based frame split: train, fusion-validation, test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    GateVal,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::GateVal => "gate-val",
            Split::Test => "test",
        }
    }
}

/// 60/20/20 split by sequence position.
pub fn split_ranges(frame_count: usize) -> [std::ops::Range<usize>; 3] {
    let train_end = frame_count * 6 / 10;
    let gateval_end = frame_count * 8 / 10;
    [
        0..train_end,
        train_end..gateval_end,
        gateval_end..frame_count,
    ]
}

pub fn split_range(frame_count: usize, split: Split) -> std::ops::Range<usize> {
    let [train, gateval, test] = split_ranges(frame_count);
    match split {
        Split::Train => train,
        Split::GateVal => gateval,
        Split::Test => test,
    }
}

/// One training window: per-modality crops plus the class label.
#[derive(Debug, Clone)]
pub struct CropSample {
    pub inputs: ModalityMap,
    pub label: usize,
    pub frame_index: usize,
}

#[derive(Debug, Clone)]
pub struct CropDataset {
    pub samples: Vec<CropSample>,
    pub split: Split,
    pub modalities: Vec<Modality>,
    pub positives: usize,
    pub negatives: usize,
    pub skipped_frames: usize,
}

/// Extracts training crops from annotated frames: every non-occluded
/// annotation becomes a positive resized to the classifier window;
/// `negatives_per_frame` random windows with IoU below
/// [`NEGATIVE_IOU_MAX`] against every annotation become negatives.
pub fn extract_crops(
    frames: &[MultimodalFrame],
    modalities: &[Modality],
    negatives_per_frame: usize,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<CropDataset> {
    if modalities.is_empty() {
        return Err(Error::Input("no modalities requested".into()));
    }
    let mut samples = Vec::new();
    let mut positives = 0;
    let mut negatives = 0;
    let mut skipped_frames = 0;
    for frame in frames {
        let (h, w) = frame.size();
        if h < WINDOW_SIDE || w < WINDOW_SIDE {
            skipped_frames += 1;
            continue;
        }
        // per-frame modality sources; colorize depth once per frame
        let mut sources = ModalityMap::new();
        for &m in modalities {
            let t = match m {
                Modality::Rgb => frame.rgb.clone(),
                Modality::Depth => colorize_depth(&frame.depth, DEPTH_COLOR_RANGE_M)?,
                Modality::Motion => frame.motion.clone(),
            };
            sources.insert(m, t);
        }
        let crop = |bbox: &BoundingBox| -> Result<ModalityMap> {
            let mut inputs = ModalityMap::new();
            for &m in modalities {
                inputs.insert(
                    m,
                    crop_resize(
                        sources.get(m)?,
                        bbox.x_min as usize,
                        bbox.y_min as usize,
                        bbox.x_max as usize,
                        bbox.y_max as usize,
                        WINDOW_SIDE,
                    )?,
                );
            }
            Ok(inputs)
        };
        for ann in frame.annotations.iter().filter(|a| !a.occluded) {
            samples.push(CropSample {
                inputs: crop(&ann.bbox)?,
                label: CLASS_HUMAN,
                frame_index: frame.frame_index,
            });
            positives += 1;
        }
        let max_h = h.min(64).max(WINDOW_SIDE);
        for _ in 0..negatives_per_frame {
            let mut found = None;
            for _attempt in 0..50 {
                let win_h = rng.gen_range(WINDOW_SIDE..=max_h);
                let win_w = (win_h / 2).max(WINDOW_SIDE / 2).min(w);
                if win_h > h || win_w > w {
                    continue;
                }
                let x = rng.gen_range(0..=(w - win_w));
                let y = rng.gen_range(0..=(h - win_h));
                let bbox = BoundingBox::new(
                    x as f64,
                    y as f64,
                    (x + win_w) as f64,
                    (y + win_h) as f64,
                )?;
                let clear = frame
                    .annotations
                    .iter()
                    .all(|a| crate::eval::iou(&bbox, &a.bbox) < NEGATIVE_IOU_MAX);
                if clear {
                    found = Some(bbox);
                    break;
                }
            }
            if let Some(bbox) = found {
                samples.push(CropSample {
                    inputs: crop(&bbox)?,
                    label: CLASS_BACKGROUND,
                    frame_index: frame.frame_index,
                });
                negatives += 1;
            }
        }
    }
    Ok(CropDataset {
        samples,
        split,
        modalities: modalities.to_vec(),
        positives,
        negatives,
        skipped_frames,
    })
}

fn one_hot_labels(samples: &[&CropSample]) -> Tensor {
    let mut data = vec![0.0; samples.len() * CLASS_COUNT];
    for (i, s) in samples.iter().enumerate() {
        data[i * CLASS_COUNT + s.label] = 1.0;
    }
    GenTensor::from_raw(vec![samples.len(), CLASS_COUNT], data)
}

fn batch_for_input(samples: &[&CropSample], input: &InputKind) -> Result<Tensor> {
    let channels = input.channel_count();
    let mut data = Vec::with_capacity(samples.len() * channels * WINDOW_SIDE * WINDOW_SIDE);
    for s in samples {
        let t = match input {
            InputKind::Single(m) => s.inputs.get(*m)?.clone(),
            InputKind::Stacked(order) => s.inputs.stacked(order)?,
        };
        data.extend_from_slice(t.data());
    }
    Ok(GenTensor::from_raw(
        vec![samples.len(), channels, WINDOW_SIDE, WINDOW_SIDE],
        data,
    ))
}

/// Stage-1 result: the trained experts plus per-expert, per-epoch mean loss.
#[derive(Debug)]
pub struct ExpertTraining {
    pub experts: Vec<ExpertNet>,
    pub epoch_losses: Vec<Vec<f64>>,
}

/// Trains one classifier end-to-end on its (possibly stacked) input.
fn train_net(
    net: &mut ExpertNet,
    crops: &CropDataset,
    config: &TrainConfig,
    label: &str,
) -> Result<Vec<f64>> {
    let mut dropout_rng = rng_from(derive_seed(config.seed, "dropout", string_tag(label)));
    net.dropout_rate = config.dropout_rate;
    let mut losses = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..crops.samples.len()).collect();
    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng_from(derive_seed(
            config.seed,
            &format!("shuffle-{label}"),
            epoch as u64,
        ));
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let batch: Vec<&CropSample> = chunk.iter().map(|&i| &crops.samples[i]).collect();
            let xs = batch_for_input(&batch, &net.input)?;
            let ys = one_hot_labels(&batch);
            let mut tape = Tape::new();
            let vars = net.params.stage(&mut tape);
            let x = tape.leaf(xs, false);
            let (_, posterior) = net.graph(&mut tape, &vars, x, true, &mut dropout_rng)?;
            let loss = tape.cross_entropy(posterior, ys)?;
            tape.backward(loss)?;
            net.params.absorb_grads(&tape, &vars)?;
            sgd_step(&mut net.params, config.learning_rate, config.momentum)?;
            epoch_loss += tape.value(loss).data()[0] * batch.len() as f64;
        }
        losses.push(epoch_loss / crops.samples.len() as f64);
    }
    Ok(losses)
}

fn string_tag(s: &str) -> u64 {
    s.bytes().fold(0u64, |acc, b| {
        acc.wrapping_mul(131).wrapping_add(u64::from(b))
    })
}

/// Stage 1: builds and trains one expert per modality, independently and
/// in parallel (disjoint state, per-expert derived seeds).
pub fn train_experts(
    crops: &CropDataset,
    modalities: &[Modality],
    config: &TrainConfig,
) -> Result<ExpertTraining> {
    config.validate()?;
    if config.stage != Stage::Experts {
        return Err(Error::State("train_experts requires stage=experts".into()));
    }
    if crops.samples.is_empty() {
        return Err(Error::Input("empty crop dataset".into()));
    }
    if modalities.is_empty() {
        return Err(Error::Input("no modalities to train".into()));
    }
    let results: Vec<Result<(ExpertNet, Vec<f64>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = modalities
            .iter()
            .map(|&modality| {
                scope.spawn(move || {
                    let init_seed =
                        derive_seed(config.seed, "expert-init", string_tag(modality.name()));
                    let mut rng = rng_from(init_seed);
                    let mut net = build_expert(
                        modality,
                        (modality.channel_count(), WINDOW_SIDE, WINDOW_SIDE),
                        CLASS_COUNT,
                        &mut rng,
                    )?;
                    net.init_seed = init_seed;
                    let losses = train_net(&mut net, crops, config, modality.name())?;
                    Ok((net, losses))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("expert training thread panicked"))
            .collect()
    });
    let mut experts = Vec::with_capacity(modalities.len());
    let mut epoch_losses = Vec::with_capacity(modalities.len());
    for r in results {
        let (net, losses) = r?;
        experts.push(net);
        epoch_losses.push(losses);
    }
    Ok(ExpertTraining {
        experts,
        epoch_losses,
    })
}

/// The tape handles of one staged fusion batch.
pub struct FusionBatchGraph {
    pub loss: Var,
    /// Gate weights, present for the gated objective.
    pub gate_out: Option<Var>,
    pub expert_vars: Vec<BTreeMap<String, Var>>,
    pub head_vars: BTreeMap<String, Var>,
}

/// Records the full gated-mixture objective on a tape: every expert's
/// forward (dropout active when `training`), feature concatenation, the
/// gate, the convex mixture and the cross-entropy loss.
pub fn mode_batch_graph(
    tape: &mut Tape,
    experts: &[ExpertNet],
    gate: &GatingNet,
    inputs: &[Tensor],
    labels: Tensor,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FusionBatchGraph> {
    if inputs.len() != experts.len() {
        return Err(Error::Input(format!(
            "{} input batches for {} experts",
            inputs.len(),
            experts.len()
        )));
    }
    let mut expert_vars = Vec::with_capacity(experts.len());
    let mut features = Vec::with_capacity(experts.len());
    let mut posteriors = Vec::with_capacity(experts.len());
    for (expert, xs) in experts.iter().zip(inputs) {
        let vars = expert.params.stage(tape);
        let x = tape.leaf(xs.clone(), false);
        let (f, p) = expert.graph(tape, &vars, x, training, rng)?;
        expert_vars.push(vars);
        features.push(f);
        posteriors.push(p);
    }
    let r = tape.concat_cols(&features)?;
    let head_vars = gate.params.stage(tape);
    let g = gate.graph(tape, &head_vars, r)?;
    let fused = tape.mix_combine(g, &posteriors)?;
    let loss = tape.cross_entropy(fused, labels)?;
    Ok(FusionBatchGraph {
        loss,
        gate_out: Some(g),
        expert_vars,
        head_vars,
    })
}

/// Records the late-fusion objective: expert forwards, concatenation, the
/// two-layer head and the loss.
pub fn late_batch_graph(
    tape: &mut Tape,
    experts: &[ExpertNet],
    head: &Params,
    inputs: &[Tensor],
    labels: Tensor,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FusionBatchGraph> {
    if inputs.len() != experts.len() {
        return Err(Error::Input(format!(
            "{} input batches for {} experts",
            inputs.len(),
            experts.len()
        )));
    }
    let mut expert_vars = Vec::with_capacity(experts.len());
    let mut features = Vec::with_capacity(experts.len());
    for (expert, xs) in experts.iter().zip(inputs) {
        let vars = expert.params.stage(tape);
        let x = tape.leaf(xs.clone(), false);
        let (f, _) = expert.graph(tape, &vars, x, training, rng)?;
        expert_vars.push(vars);
        features.push(f);
    }
    let r = tape.concat_cols(&features)?;
    let head_vars = head.stage(tape);
    let f = late_head_graph(tape, &head_vars, r, training, rng)?;
    let loss = tape.cross_entropy(f, labels)?;
    Ok(FusionBatchGraph {
        loss,
        gate_out: None,
        expert_vars,
        head_vars,
    })
}

fn check_frozen(experts: &[ExpertNet]) -> Result<()> {
    for (i, e) in experts.iter().enumerate() {
        if e.params.any_trainable() {
            return Err(Error::State(format!(
                "expert {i} ({}) still has trainable parameters; freeze before fusion training",
                e.input.label()
            )));
        }
    }
    Ok(())
}

fn expert_batches(experts: &[ExpertNet], batch: &[&CropSample]) -> Result<Vec<Tensor>> {
    experts
        .iter()
        .map(|e| batch_for_input(batch, &e.input))
        .collect()
}

/// Stage 2: trains the gating network on a held-out split with the expert
/// weights frozen and expert dropout active.
pub fn train_gate(
    experts: &[ExpertNet],
    crops: &CropDataset,
    config: &TrainConfig,
) -> Result<(GatingNet, Vec<f64>)> {
    config.validate()?;
    if config.stage != Stage::Fusion {
        return Err(Error::State("train_gate requires stage=fusion".into()));
    }
    check_frozen(experts)?;
    if crops.samples.is_empty() {
        return Err(Error::Input("empty crop dataset".into()));
    }
    let feature_dim: usize = experts.iter().map(|e| e.feature_len()).sum();
    let mut init_rng = rng_from(derive_seed(config.seed, "gate-init", 0));
    let mut gate = GatingNet::new(feature_dim, experts.len(), &mut init_rng)?;
    let mut dropout_rng = rng_from(derive_seed(config.seed, "gate-dropout", 0));
    let mut indices: Vec<usize> = (0..crops.samples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng_from(derive_seed(config.seed, "gate-shuffle", epoch as u64));
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let batch: Vec<&CropSample> = chunk.iter().map(|&i| &crops.samples[i]).collect();
            let inputs = expert_batches(experts, &batch)?;
            let labels = one_hot_labels(&batch);
            let mut tape = Tape::new();
            let graph = mode_batch_graph(
                &mut tape,
                experts,
                &gate,
                &inputs,
                labels,
                true,
                &mut dropout_rng,
            )?;
            tape.backward(graph.loss)?;
            gate.params.absorb_grads(&tape, &graph.head_vars)?;
            sgd_step(&mut gate.params, config.learning_rate, config.momentum)?;
            epoch_loss += tape.value(graph.loss).data()[0] * batch.len() as f64;
        }
        losses.push(epoch_loss / crops.samples.len() as f64);
    }
    Ok((gate, losses))
}

/// Stage 2 for the late-fusion baseline: same frozen-expert protocol, but
/// the trained component is the two-layer head over `r(x)`.
pub fn train_late_head(
    experts: &[ExpertNet],
    crops: &CropDataset,
    config: &TrainConfig,
) -> Result<(Params, Vec<f64>)> {
    config.validate()?;
    if config.stage != Stage::Fusion {
        return Err(Error::State("train_late_head requires stage=fusion".into()));
    }
    check_frozen(experts)?;
    if crops.samples.is_empty() {
        return Err(Error::Input("empty crop dataset".into()));
    }
    let feature_dim: usize = experts.iter().map(|e| e.feature_len()).sum();
    let mut init_rng = rng_from(derive_seed(config.seed, "late-init", 0));
    let mut head = crate::fusion::build_late_head(feature_dim, CLASS_COUNT, &mut init_rng)?;
    let mut dropout_rng = rng_from(derive_seed(config.seed, "late-dropout", 0));
    let mut indices: Vec<usize> = (0..crops.samples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng_from(derive_seed(config.seed, "late-shuffle", epoch as u64));
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let batch: Vec<&CropSample> = chunk.iter().map(|&i| &crops.samples[i]).collect();
            let inputs = expert_batches(experts, &batch)?;
            let labels = one_hot_labels(&batch);
            let mut tape = Tape::new();
            let graph = late_batch_graph(
                &mut tape,
                experts,
                &head,
                &inputs,
                labels,
                true,
                &mut dropout_rng,
            )?;
            tape.backward(graph.loss)?;
            head.absorb_grads(&tape, &graph.head_vars)?;
            sgd_step(&mut head, config.learning_rate, config.momentum)?;
            epoch_loss += tape.value(graph.loss).data()[0] * batch.len() as f64;
        }
        losses.push(epoch_loss / crops.samples.len() as f64);
    }
    Ok((head, losses))
}

/// Channel-fusion baseline: one network over stacked channels, trained
/// end-to-end from scratch with the stage-1 protocol.
pub fn train_channel_net(
    crops: &CropDataset,
    order: &[Modality],
    config: &TrainConfig,
) -> Result<(ExpertNet, Vec<f64>)> {
    config.validate()?;
    if config.stage != Stage::Experts {
        return Err(Error::State(
            "train_channel_net follows the stage-1 protocol (stage=experts)".into(),
        ));
    }
    if crops.samples.is_empty() {
        return Err(Error::Input("empty crop dataset".into()));
    }
    let init_seed = derive_seed(config.seed, "expert-init", string_tag("channel"));
    let mut rng = rng_from(init_seed);
    let mut net = build_stacked_net(order, WINDOW_SIDE, WINDOW_SIDE, CLASS_COUNT, &mut rng)?;
    net.init_seed = init_seed;
    let losses = train_net(&mut net, crops, config, "channel")?;
    Ok((net, losses))
}

/// Mean inference-mode loss of the gated mixture over a crop dataset;
/// `gate = None` evaluates the uniform-weight mixture instead.
pub fn fusion_dataset_loss(
    experts: &[ExpertNet],
    gate: Option<&GatingNet>,
    crops: &CropDataset,
) -> Result<f64> {
    if crops.samples.is_empty() {
        return Err(Error::Input("empty crop dataset".into()));
    }
    let mut total = 0.0;
    let batch_size = 256;
    let all: Vec<&CropSample> = crops.samples.iter().collect();
    for chunk in all.chunks(batch_size) {
        let labels = one_hot_labels(chunk);
        let mut features = Vec::with_capacity(experts.len());
        let mut posts = Vec::with_capacity(experts.len());
        for e in experts {
            let xs = batch_for_input(chunk, &e.input)?;
            let (f, p) = e.forward_batch(&xs, false, None)?;
            features.push(f);
            posts.push(p);
        }
        let g = match gate {
            Some(gate) => {
                let refs: Vec<&Tensor> = features.iter().collect();
                let r = crate::ops::concat_cols(&refs)?;
                crate::fusion::gate_forward_batch(gate, &r)?
            }
            None => GenTensor::filled(
                vec![chunk.len(), experts.len()],
                1.0 / experts.len() as f64,
            ),
        };
        let post_refs: Vec<&Tensor> = posts.iter().collect();
        let fused = crate::ops::mix_combine(&g, &post_refs)?;
        let loss = crate::ops::cross_entropy_loss(&fused, &labels)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / crops.samples.len() as f64)
}
