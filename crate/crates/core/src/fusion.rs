//! The gating network and the five fusion schemes.
//!
//! A fused model runs one expert per modality and combines their class
//! posteriors. The adaptive scheme (`mode`) feeds the concatenated
//! last-pool feature maps through a small two-layer gating network whose
//! softmax output weights the experts; `switch` hardens that weighting to
//! the argmax expert; `average` is the uniform mixture; `late` trains a
//! classifier head directly on the concatenated features; `channel` is a
//! single network over all modalities stacked as input channels.

use crate::error::{Error, Result};
use crate::expert::{expert_forward, ExpertNet, ExpertOutput, Modality, ModalityMap};
use crate::ops;
use crate::optim::he_init;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor as GenTensor;
use crate::{Params, Real, Tensor};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Hidden width of the gating network and the late-fusion head.
pub const FUSION_HIDDEN: usize = 64;
/// Dropout applied between the late-fusion head's two layers in training.
pub const LATE_HEAD_DROPOUT: f64 = 0.5;

const SIMPLEX_TOL: f64 = 1e-6;

/// Two-layer network mapping the concatenated feature vector `r(x)` to a
/// probability vector over the experts.
#[derive(Debug, Clone)]
pub struct GatingNet {
    pub params: Params,
    pub input_dim: usize,
    pub expert_count: usize,
}

impl GatingNet {
    /// He-initialized gate: affine(D→64)–relu–affine(64→M)–softmax.
    pub fn new(input_dim: usize, expert_count: usize, rng: &mut ChaCha8Rng) -> Result<GatingNet> {
        if input_dim == 0 || expert_count == 0 {
            return Err(Error::Config(format!(
                "gating network needs positive dimensions, got {input_dim}x{expert_count}"
            )));
        }
        let mut params = Params::new();
        params.insert(
            "gate.w1",
            he_init(vec![input_dim, FUSION_HIDDEN], input_dim, rng),
            true,
        )?;
        params.insert("gate.b1", GenTensor::zeros(vec![FUSION_HIDDEN]), true)?;
        params.insert(
            "gate.w2",
            he_init(vec![FUSION_HIDDEN, expert_count], FUSION_HIDDEN, rng),
            true,
        )?;
        params.insert("gate.b2", GenTensor::zeros(vec![expert_count]), true)?;
        Ok(GatingNet {
            params,
            input_dim,
            expert_count,
        })
    }

    /// Records the gate on a tape over a `[B,D]` feature batch, returning
    /// the `[B,M]` softmax weights.
    pub fn graph(
        &self,
        tape: &mut Tape<Real>,
        vars: &BTreeMap<String, Var>,
        r: Var,
    ) -> Result<Var> {
        let v = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::State(format!("parameter `{name}` not staged")))
        };
        let h = tape.affine(r, v("gate.w1")?, v("gate.b1")?)?;
        let h = tape.relu(h);
        let logits = tape.affine(h, v("gate.w2")?, v("gate.b2")?)?;
        tape.softmax(logits)
    }
}

/// Maps the concatenated feature vector to expert weights on the simplex.
pub fn gate_forward(gate: &GatingNet, r: &Tensor) -> Result<Tensor> {
    if r.shape() != [gate.input_dim] {
        return Err(Error::Dimension(format!(
            "gate input has shape {:?}, expected [{}]",
            r.shape(),
            gate.input_dim
        )));
    }
    let h = ops::affine(r, gate.params.tensor("gate.w1")?, gate.params.tensor("gate.b1")?)?;
    let h = ops::relu(&h);
    let logits = ops::affine(&h, gate.params.tensor("gate.w2")?, gate.params.tensor("gate.b2")?)?;
    ops::softmax(&logits)
}

/// Batched gate forward over `[B,D]`, returning `[B,M]`.
pub fn gate_forward_batch(gate: &GatingNet, r: &Tensor) -> Result<Tensor> {
    match *r.shape() {
        [_, d] if d == gate.input_dim => {}
        ref other => {
            return Err(Error::Dimension(format!(
                "gate batch input has shape {other:?}, expected [B,{}]",
                gate.input_dim
            )))
        }
    }
    let h = ops::affine(r, gate.params.tensor("gate.w1")?, gate.params.tensor("gate.b1")?)?;
    let h = ops::relu(&h);
    let logits = ops::affine(&h, gate.params.tensor("gate.w2")?, gate.params.tensor("gate.b2")?)?;
    ops::softmax(&logits)
}

/// Stacks the experts' last-pool feature maps along the filter axis and
/// flattens row-major: the gating input `r(x)`.
pub fn concat_features(outputs: &[ExpertOutput]) -> Result<Tensor> {
    if outputs.is_empty() {
        return Err(Error::Input("no expert outputs to concatenate".into()));
    }
    let (h0, w0) = match *outputs[0].features.shape() {
        [_, h, w] => (h, w),
        ref other => {
            return Err(Error::Dimension(format!(
                "feature map must be [N,h,w], got {other:?}"
            )))
        }
    };
    let mut data = Vec::new();
    for (i, out) in outputs.iter().enumerate() {
        match *out.features.shape() {
            [_, h, w] if (h, w) == (h0, w0) => data.extend_from_slice(out.features.data()),
            ref other => {
                return Err(Error::Dimension(format!(
                    "expert {i} feature map {other:?} disagrees with [{h0},{w0}] spatial size"
                )))
            }
        }
    }
    let len = data.len();
    Ok(GenTensor::new(vec![len], data)?)
}

fn validate_simplex(g: &Tensor, what: &str) -> Result<()> {
    if g.rank() != 1 {
        return Err(Error::Input(format!(
            "{what} must be a vector, got shape {:?}",
            g.shape()
        )));
    }
    let sum: f64 = g.data().iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Input(format!("{what} sums to {sum}, expected 1")));
    }
    if g.data().iter().any(|&v| v < -SIMPLEX_TOL) {
        return Err(Error::Input(format!("{what} has negative entries")));
    }
    Ok(())
}

fn validate_posteriors(posteriors: &[Tensor]) -> Result<usize> {
    if posteriors.is_empty() {
        return Err(Error::Input("empty posterior list".into()));
    }
    let classes = posteriors[0].len();
    for (i, p) in posteriors.iter().enumerate() {
        if p.rank() != 1 || p.len() != classes {
            return Err(Error::Dimension(format!(
                "posterior {i} has shape {:?}, expected [{classes}]",
                p.shape()
            )));
        }
        validate_simplex(p, &format!("posterior {i}"))?;
    }
    Ok(classes)
}

/// Convex mixture `F = Σ_i g_i·f_i`; `F` is itself a probability vector.
pub fn mode_combine(g: &Tensor, posteriors: &[Tensor]) -> Result<Tensor> {
    validate_simplex(g, "gate vector")?;
    let classes = validate_posteriors(posteriors)?;
    if g.len() != posteriors.len() {
        return Err(Error::Dimension(format!(
            "gate has {} entries but {} posteriors were given",
            g.len(),
            posteriors.len()
        )));
    }
    let mut out = vec![0.0; classes];
    for (gi, p) in g.data().iter().zip(posteriors) {
        for (o, &f) in out.iter_mut().zip(p.data()) {
            *o += gi * f;
        }
    }
    Ok(GenTensor::new(vec![classes], out)?)
}

/// Uniform mixture of the posteriors.
pub fn average_fusion(posteriors: &[Tensor]) -> Result<Tensor> {
    let classes = validate_posteriors(posteriors)?;
    let scale = 1.0 / posteriors.len() as f64;
    let mut out = vec![0.0; classes];
    for p in posteriors {
        for (o, &f) in out.iter_mut().zip(p.data()) {
            *o += scale * f;
        }
    }
    Ok(GenTensor::new(vec![classes], out)?)
}

/// Hard selection: the posterior of the expert with the largest gate
/// weight; ties break toward the lowest expert index.
pub fn switch_fusion(g: &Tensor, posteriors: &[Tensor]) -> Result<Tensor> {
    validate_simplex(g, "gate vector")?;
    validate_posteriors(posteriors)?;
    if g.len() != posteriors.len() {
        return Err(Error::Dimension(format!(
            "gate has {} entries but {} posteriors were given",
            g.len(),
            posteriors.len()
        )));
    }
    let mut best = 0;
    for (i, &v) in g.data().iter().enumerate() {
        if v > g.data()[best] {
            best = i;
        }
    }
    Ok(posteriors[best].clone())
}

/// Builds a late-fusion head: affine(D→64)–relu–dropout–affine(64→C)–softmax.
pub fn build_late_head(
    input_dim: usize,
    class_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Params> {
    if input_dim == 0 || class_count < 2 {
        return Err(Error::Config(format!(
            "late head needs positive dims and >=2 classes, got {input_dim}x{class_count}"
        )));
    }
    let mut params = Params::new();
    params.insert(
        "head.w1",
        he_init(vec![input_dim, FUSION_HIDDEN], input_dim, rng),
        true,
    )?;
    params.insert("head.b1", GenTensor::zeros(vec![FUSION_HIDDEN]), true)?;
    params.insert(
        "head.w2",
        he_init(vec![FUSION_HIDDEN, class_count], FUSION_HIDDEN, rng),
        true,
    )?;
    params.insert("head.b2", GenTensor::zeros(vec![class_count]), true)?;
    Ok(params)
}

/// Late-fusion forward over `r(x)` (rank 1) or a `[B,D]` batch.
pub fn late_fusion_forward(
    head: &Params,
    r: &Tensor,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let w1 = head.tensor("head.w1")?;
    let expected = w1.shape()[0];
    let got = *r.shape().last().unwrap_or(&0);
    if got != expected {
        return Err(Error::Dimension(format!(
            "late head input has shape {:?}, expected trailing dimension {expected}",
            r.shape()
        )));
    }
    let h = ops::affine(r, w1, head.tensor("head.b1")?)?;
    let h = ops::relu(&h);
    let h = match (training, rng) {
        (true, Some(rng)) => ops::dropout(&h, LATE_HEAD_DROPOUT, rng, true)?,
        (true, None) => {
            return Err(Error::Parameter(
                "training-mode late fusion requires an RNG".into(),
            ))
        }
        (false, _) => h,
    };
    let logits = ops::affine(&h, head.tensor("head.w2")?, head.tensor("head.b2")?)?;
    ops::softmax(&logits)
}

/// Records the late head on a tape over a `[B,D]` feature batch.
pub fn late_head_graph(
    tape: &mut Tape<Real>,
    vars: &BTreeMap<String, Var>,
    r: Var,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let v = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter `{name}` not staged")))
    };
    let h = tape.affine(r, v("head.w1")?, v("head.b1")?)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, LATE_HEAD_DROPOUT, rng, training)?;
    let logits = tape.affine(h, v("head.w2")?, v("head.b2")?)?;
    tape.softmax(logits)
}

/// Single multi-channel network over stacked modalities.
pub fn channel_fusion_forward(net: &ExpertNet, stacked: &Tensor) -> Result<Tensor> {
    if *stacked.shape() != [net.input_size.0, net.input_size.1, net.input_size.2] {
        return Err(Error::Dimension(format!(
            "stacked input shape {:?} does not match channel net input {:?}",
            stacked.shape(),
            net.input_size
        )));
    }
    Ok(expert_forward(net, stacked, false, None)?.posterior)
}

/// How expert posteriors are combined into the fused output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Mode,
    Average,
    Switch,
    Late,
    Channel,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Mode,
        Scheme::Average,
        Scheme::Switch,
        Scheme::Late,
        Scheme::Channel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Mode => "mode",
            Scheme::Average => "average",
            Scheme::Switch => "switch",
            Scheme::Late => "late",
            Scheme::Channel => "channel",
        }
    }

    pub fn from_name(name: &str) -> Result<Scheme> {
        Scheme::ALL
            .iter()
            .copied()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Input(format!("unknown fusion scheme `{name}`")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scheme-specific parameters of a [`FusedModel`].
#[derive(Debug, Clone)]
pub enum FusionHead {
    Mode(GatingNet),
    Switch(GatingNet),
    Average,
    Late(Params),
    Channel { net: ExpertNet, order: Vec<Modality> },
}

impl FusionHead {
    pub fn scheme(&self) -> Scheme {
        match self {
            FusionHead::Mode(_) => Scheme::Mode,
            FusionHead::Switch(_) => Scheme::Switch,
            FusionHead::Average => Scheme::Average,
            FusionHead::Late(_) => Scheme::Late,
            FusionHead::Channel { .. } => Scheme::Channel,
        }
    }
}

/// Experts plus a fusion head.
#[derive(Debug, Clone)]
pub struct FusedModel {
    /// Ordered experts; empty for the channel scheme, whose network lives
    /// in the head.
    pub experts: Vec<ExpertNet>,
    pub head: FusionHead,
}

impl FusedModel {
    pub fn new(experts: Vec<ExpertNet>, head: FusionHead) -> Result<FusedModel> {
        let model = FusedModel { experts, head };
        model.validate()?;
        Ok(model)
    }

    pub fn scheme(&self) -> Scheme {
        self.head.scheme()
    }

    /// Modalities the model consumes, in expert (or channel) order.
    pub fn modalities(&self) -> Vec<Modality> {
        match &self.head {
            FusionHead::Channel { order, .. } => order.clone(),
            _ => self
                .experts
                .iter()
                .filter_map(|e| match &e.input {
                    crate::expert::InputKind::Single(m) => Some(*m),
                    crate::expert::InputKind::Stacked(_) => None,
                })
                .collect(),
        }
    }

    pub fn class_count(&self) -> Result<usize> {
        match &self.head {
            FusionHead::Channel { net, .. } => Ok(net.class_count),
            _ => self
                .experts
                .first()
                .map(|e| e.class_count)
                .ok_or_else(|| Error::Config("fused model has no experts".into())),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.experts.iter().map(|e| e.feature_len()).sum()
    }

    fn validate(&self) -> Result<()> {
        match &self.head {
            FusionHead::Channel { net, order } => {
                if !self.experts.is_empty() {
                    return Err(Error::Config(
                        "channel fusion carries its own network; expert list must be empty".into(),
                    ));
                }
                let expected: usize = order.iter().map(|m| m.channel_count()).sum();
                if net.input_size.0 != expected {
                    return Err(Error::Config(format!(
                        "channel net expects {} channels but order {:?} delivers {expected}",
                        net.input_size.0, order
                    )));
                }
                Ok(())
            }
            head => {
                if self.experts.is_empty() {
                    return Err(Error::Config("fused model has no experts".into()));
                }
                let classes = self.experts[0].class_count;
                if self.experts.iter().any(|e| e.class_count != classes) {
                    return Err(Error::Config(
                        "experts disagree on class count".into(),
                    ));
                }
                match head {
                    FusionHead::Mode(g) | FusionHead::Switch(g) => {
                        if g.input_dim != self.feature_dim() {
                            return Err(Error::Config(format!(
                                "gate input dim {} does not match concatenated features {}",
                                g.input_dim,
                                self.feature_dim()
                            )));
                        }
                        if g.expert_count != self.experts.len() {
                            return Err(Error::Config(format!(
                                "gate weights {} experts but model has {}",
                                g.expert_count,
                                self.experts.len()
                            )));
                        }
                        Ok(())
                    }
                    FusionHead::Late(p) => {
                        let w1 = p.tensor("head.w1")?;
                        if w1.shape()[0] != self.feature_dim() {
                            return Err(Error::Config(format!(
                                "late head input dim {} does not match features {}",
                                w1.shape()[0],
                                self.feature_dim()
                            )));
                        }
                        Ok(())
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

/// Runs every expert on its modality window, builds `r(x)`, and dispatches
/// on the fusion scheme. Returns the fused posterior plus, for the gated
/// schemes, the gate vector for logging.
pub fn fused_forward(
    model: &FusedModel,
    window: &ModalityMap,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, Option<Tensor>)> {
    match &model.head {
        FusionHead::Channel { net, order } => {
            let stacked = window.stacked(order)?;
            let f = channel_fusion_forward(net, &stacked)?;
            Ok((f, None))
        }
        head => {
            let mut outputs = Vec::with_capacity(model.experts.len());
            for expert in &model.experts {
                let modality = match &expert.input {
                    crate::expert::InputKind::Single(m) => *m,
                    crate::expert::InputKind::Stacked(_) => {
                        return Err(Error::Config(
                            "stacked expert inside a multi-expert fusion model".into(),
                        ))
                    }
                };
                let x = window.get(modality)?;
                outputs.push(expert_forward(expert, x, training, rng.as_deref_mut())?);
            }
            let posteriors: Vec<Tensor> = outputs.iter().map(|o| o.posterior.clone()).collect();
            match head {
                FusionHead::Average => Ok((average_fusion(&posteriors)?, None)),
                FusionHead::Mode(gate) => {
                    let r = concat_features(&outputs)?;
                    let g = gate_forward(gate, &r)?;
                    Ok((mode_combine(&g, &posteriors)?, Some(g)))
                }
                FusionHead::Switch(gate) => {
                    let r = concat_features(&outputs)?;
                    let g = gate_forward(gate, &r)?;
                    Ok((switch_fusion(&g, &posteriors)?, Some(g)))
                }
                FusionHead::Late(params) => {
                    let r = concat_features(&outputs)?;
                    let f = late_fusion_forward(params, &r, training, rng)?;
                    Ok((f, None))
                }
                FusionHead::Channel { .. } => unreachable!(),
            }
        }
    }
}
