//! Per-modality expert networks.
//!
//! Each expert is a small three-block convolutional classifier that exposes
//! both its last-pooling feature map (the gating network's input) and its
//! softmax class posterior. Depth frames are jet-colorized to three
//! channels before they reach the depth expert.

use crate::error::{Error, Result};
use crate::ops;
use crate::optim::he_init;
use crate::rng::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor as GenTensor;
use crate::{Params, Real, Tensor};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Side length of every classifier input window.
pub const WINDOW_SIDE: usize = 32;
/// Dropout rate applied after the last pooling stage in training mode.
pub const EXPERT_DROPOUT: f64 = 0.5;
/// Depth interval mapped onto the jet colormap, in meters.
pub const DEPTH_COLOR_RANGE_M: (f64, f64) = (0.5, 8.0);

const CONV1_FILTERS: usize = 16;
const CONV2_FILTERS: usize = 32;
const CONV3_FILTERS: usize = 64;

/// An aligned input channel group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Depth,
    Motion,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Motion];

    /// Channels delivered to the classifier: rgb 3, depth 3 after
    /// colorization, motion 1.
    pub fn channel_count(self) -> usize {
        match self {
            Modality::Rgb | Modality::Depth => 3,
            Modality::Motion => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Motion => "motion",
        }
    }

    pub fn from_name(name: &str) -> Result<Modality> {
        match name {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "motion" => Ok(Modality::Motion),
            other => Err(Error::Input(format!("unknown modality `{other}`"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What a network consumes: one modality, or several stacked along the
/// channel axis (the channel-fusion baseline).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputKind {
    Single(Modality),
    Stacked(Vec<Modality>),
}

impl InputKind {
    pub fn channel_count(&self) -> usize {
        match self {
            InputKind::Single(m) => m.channel_count(),
            InputKind::Stacked(ms) => ms.iter().map(|m| m.channel_count()).sum(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            InputKind::Single(m) => m.name().to_string(),
            InputKind::Stacked(ms) => format!(
                "stacked:{}",
                ms.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
            ),
        }
    }

    pub fn from_label(label: &str) -> Result<InputKind> {
        if let Some(rest) = label.strip_prefix("stacked:") {
            let ms = rest
                .split(',')
                .map(Modality::from_name)
                .collect::<Result<Vec<_>>>()?;
            if ms.is_empty() {
                return Err(Error::Input("stacked input with no modalities".into()));
            }
            Ok(InputKind::Stacked(ms))
        } else {
            Modality::from_name(label).map(InputKind::Single)
        }
    }
}

/// Per-modality crops (or full frames) keyed by modality.
#[derive(Debug, Clone, Default)]
pub struct ModalityMap {
    entries: Vec<(Modality, Tensor)>,
}

impl ModalityMap {
    pub fn new() -> Self {
        ModalityMap::default()
    }

    pub fn insert(&mut self, modality: Modality, tensor: Tensor) {
        match self.entries.iter_mut().find(|(m, _)| *m == modality) {
            Some((_, t)) => *t = tensor,
            None => self.entries.push((modality, tensor)),
        }
    }

    pub fn get(&self, modality: Modality) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(m, _)| *m == modality)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Input(format!("missing modality `{modality}`")))
    }

    pub fn has(&self, modality: Modality) -> bool {
        self.entries.iter().any(|(m, _)| *m == modality)
    }

    /// Stacks the listed modalities along the channel axis, in order.
    pub fn stacked(&self, order: &[Modality]) -> Result<Tensor> {
        if order.is_empty() {
            return Err(Error::Input("empty channel order".into()));
        }
        let first = self.get(order[0])?;
        let (h, w) = match *first.shape() {
            [_, h, w] => (h, w),
            ref other => {
                return Err(Error::Dimension(format!(
                    "modality tensor must be [C,H,W], got {other:?}"
                )))
            }
        };
        let total: usize = order.iter().map(|m| m.channel_count()).sum();
        let mut data = Vec::with_capacity(total * h * w);
        for &m in order {
            let t = self.get(m)?;
            if t.shape() != [m.channel_count(), h, w] {
                return Err(Error::Dimension(format!(
                    "modality `{m}` has shape {:?}, expected [{},{h},{w}]",
                    t.shape(),
                    m.channel_count()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Ok(GenTensor::new(vec![total, h, w], data)?)
    }
}

/// Feature map from the last pooling stage plus the class posterior.
#[derive(Debug, Clone)]
pub struct ExpertOutput {
    /// `[N,h,w]` feature map; dropout-scaled in training mode.
    pub features: Tensor,
    /// Probability vector over the classes, length `C`.
    pub posterior: Tensor,
}

/// A three-conv-block classifier with a linear softmax head.
///
/// Architecture: conv(C_in→16, 5×5, pad 2)–relu–pool2 →
/// conv(16→32, 5×5, pad 2)–relu–pool2 → conv(32→64, 3×3, pad 1)–relu–pool2
/// → affine → softmax. The feature map handed to fusion is the output of
/// the last pooling stage.
#[derive(Debug, Clone)]
pub struct ExpertNet {
    pub input: InputKind,
    /// (channels, height, width) of the input window.
    pub input_size: (usize, usize, usize),
    pub class_count: usize,
    /// (filters, height, width) of the last-pool feature map.
    pub feature_shape: (usize, usize, usize),
    pub dropout_rate: f64,
    pub init_seed: u64,
    pub params: Params,
}

/// Builds a single-modality expert with He-initialized weights.
pub fn build_expert(
    modality: Modality,
    input_size: (usize, usize, usize),
    class_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ExpertNet> {
    build_net(InputKind::Single(modality), input_size, class_count, rng)
}

/// Builds a network over several modalities stacked as input channels.
pub fn build_stacked_net(
    order: &[Modality],
    height: usize,
    width: usize,
    class_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ExpertNet> {
    let kind = InputKind::Stacked(order.to_vec());
    let channels = kind.channel_count();
    build_net(kind, (channels, height, width), class_count, rng)
}

fn build_net(
    input: InputKind,
    input_size: (usize, usize, usize),
    class_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ExpertNet> {
    let (c, h, w) = input_size;
    if c != input.channel_count() {
        return Err(Error::Config(format!(
            "input `{}` delivers {} channels but input_size says {c}",
            input.label(),
            input.channel_count()
        )));
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be divisible by 8 (three pool-by-2 stages)"
        )));
    }
    if class_count < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {class_count}"
        )));
    }
    let feature_shape = (CONV3_FILTERS, h / 8, w / 8);
    let feat_len = CONV3_FILTERS * (h / 8) * (w / 8);
    let mut params = Params::new();
    params.insert(
        "conv1.weight",
        he_init(vec![CONV1_FILTERS, c, 5, 5], c * 25, rng),
        true,
    )?;
    params.insert("conv1.bias", GenTensor::zeros(vec![CONV1_FILTERS]), true)?;
    params.insert(
        "conv2.weight",
        he_init(
            vec![CONV2_FILTERS, CONV1_FILTERS, 5, 5],
            CONV1_FILTERS * 25,
            rng,
        ),
        true,
    )?;
    params.insert("conv2.bias", GenTensor::zeros(vec![CONV2_FILTERS]), true)?;
    params.insert(
        "conv3.weight",
        he_init(
            vec![CONV3_FILTERS, CONV2_FILTERS, 3, 3],
            CONV2_FILTERS * 9,
            rng,
        ),
        true,
    )?;
    params.insert("conv3.bias", GenTensor::zeros(vec![CONV3_FILTERS]), true)?;
    params.insert(
        "head.weight",
        he_init(vec![feat_len, class_count], feat_len, rng),
        true,
    )?;
    params.insert("head.bias", GenTensor::zeros(vec![class_count]), true)?;
    Ok(ExpertNet {
        input,
        input_size,
        class_count,
        feature_shape,
        dropout_rate: EXPERT_DROPOUT,
        init_seed: 0,
        params,
    })
}

impl ExpertNet {
    pub fn feature_len(&self) -> usize {
        let (n, h, w) = self.feature_shape;
        n * h * w
    }

    pub fn freeze(&mut self) {
        self.params.set_all_trainable(false);
    }

    /// Inference pass over one `[C,H,W]` window; no dropout, no RNG.
    pub fn infer(&self, x: &Tensor) -> Result<ExpertOutput> {
        expert_forward(self, x, false, None)
    }

    /// Batched forward over `[B,C,H,W]`, returning flattened features
    /// `[B,D]` and posteriors `[B,C]`.
    pub fn forward_batch(
        &self,
        xs: &Tensor,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tensor)> {
        match *xs.shape() {
            [_, c, h, w] if (c, h, w) == self.input_size => {}
            ref other => {
                return Err(Error::Dimension(format!(
                    "batch shape {other:?} does not match expert input {:?}",
                    self.input_size
                )))
            }
        }
        let batch = xs.shape()[0];
        let pooled = self.conv_stack(xs)?;
        let dropped = match (training, rng) {
            (true, Some(rng)) => ops::dropout(&pooled, self.dropout_rate, rng, true)?,
            (true, None) => {
                return Err(Error::Parameter(
                    "training-mode forward requires an RNG".into(),
                ))
            }
            (false, _) => pooled,
        };
        let features = dropped.reshape(vec![batch, self.feature_len()])?;
        let logits = ops::affine(
            &features,
            self.params.tensor("head.weight")?,
            self.params.tensor("head.bias")?,
        )?;
        let posterior = ops::softmax(&logits)?;
        Ok((features, posterior))
    }

    fn conv_stack(&self, xs: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let c1 = ops::conv2d(xs, p.tensor("conv1.weight")?, p.tensor("conv1.bias")?, 1, 2)?;
        let r1 = ops::relu(&c1);
        let p1 = ops::maxpool2d(&r1, 2, 2)?;
        let c2 = ops::conv2d(&p1, p.tensor("conv2.weight")?, p.tensor("conv2.bias")?, 1, 2)?;
        let r2 = ops::relu(&c2);
        let p2 = ops::maxpool2d(&r2, 2, 2)?;
        let c3 = ops::conv2d(&p2, p.tensor("conv3.weight")?, p.tensor("conv3.bias")?, 1, 1)?;
        let r3 = ops::relu(&c3);
        ops::maxpool2d(&r3, 2, 2)
    }

    /// Records the expert's forward pass on a tape. Returns flattened
    /// feature `[B,D]` and posterior `[B,C]` vars. `vars` must come from
    /// staging `self.params`.
    pub fn graph(
        &self,
        tape: &mut Tape<Real>,
        vars: &BTreeMap<String, Var>,
        x: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let batch = tape.value(x).shape()[0];
        let v = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::State(format!("parameter `{name}` not staged")))
        };
        let c1 = tape.conv2d(x, v("conv1.weight")?, v("conv1.bias")?, 1, 2)?;
        let r1 = tape.relu(c1);
        let p1 = tape.maxpool2d(r1, 2, 2)?;
        let c2 = tape.conv2d(p1, v("conv2.weight")?, v("conv2.bias")?, 1, 2)?;
        let r2 = tape.relu(c2);
        let p2 = tape.maxpool2d(r2, 2, 2)?;
        let c3 = tape.conv2d(p2, v("conv3.weight")?, v("conv3.bias")?, 1, 1)?;
        let r3 = tape.relu(c3);
        let pooled = tape.maxpool2d(r3, 2, 2)?;
        let dropped = tape.dropout(pooled, self.dropout_rate, rng, training)?;
        let features = tape.reshape(dropped, vec![batch, self.feature_len()])?;
        let logits = tape.affine(features, v("head.weight")?, v("head.bias")?)?;
        let posterior = tape.softmax(logits)?;
        Ok((features, posterior))
    }
}

/// One forward pass over a single window, returning the last-pool feature
/// map and the class posterior. In training mode dropout is applied after
/// the last pool, before the classifier head, so the returned features are
/// the dropout-scaled ones the head saw.
pub fn expert_forward(
    net: &ExpertNet,
    x: &Tensor,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ExpertOutput> {
    if *x.shape() != [net.input_size.0, net.input_size.1, net.input_size.2] {
        return Err(Error::Dimension(format!(
            "window shape {:?} does not match expert input {:?}",
            x.shape(),
            net.input_size
        )));
    }
    let batched = x.clone().reshape(vec![
        1,
        net.input_size.0,
        net.input_size.1,
        net.input_size.2,
    ])?;
    let (features, posteriors) = net.forward_batch(&batched, training, rng)?;
    let (n, h, w) = net.feature_shape;
    Ok(ExpertOutput {
        features: features.reshape(vec![n, h, w])?,
        posterior: posteriors.reshape(vec![net.class_count])?,
    })
}

/// Derives the deterministic init seed for the `index`-th expert of a run.
pub fn expert_init_seed(run_seed: u64, label: &str) -> u64 {
    derive_seed(run_seed, "expert-init", label_index(label))
}

fn label_index(label: &str) -> u64 {
    label.bytes().fold(0u64, |acc, b| {
        acc.wrapping_mul(31).wrapping_add(u64::from(b))
    })
}

/// Maps a single-channel depth image in meters onto a three-channel jet
/// image in `[0,1]`. Values are clamped to `range`; invalid readings
/// (zero or non-finite) map to black.
pub fn colorize_depth(depth: &Tensor, range: (f64, f64)) -> Result<Tensor> {
    let (min_m, max_m) = range;
    if !(max_m > min_m) || !min_m.is_finite() || !max_m.is_finite() {
        return Err(Error::Parameter(format!(
            "degenerate depth range ({min_m}, {max_m})"
        )));
    }
    let (h, w) = match *depth.shape() {
        [1, h, w] => (h, w),
        ref other => {
            return Err(Error::Dimension(format!(
                "depth image must be [1,H,W], got {other:?}"
            )))
        }
    };
    let mut out = vec![0.0; 3 * h * w];
    let plane = h * w;
    for (i, &v) in depth.data().iter().enumerate() {
        if v == 0.0 || !v.is_finite() {
            continue; // invalid reading stays black
        }
        let t = ((v - min_m) / (max_m - min_m)).clamp(0.0, 1.0);
        let (r, g, b) = jet(t);
        out[i] = r;
        out[plane + i] = g;
        out[2 * plane + i] = b;
    }
    Ok(GenTensor::new(vec![3, h, w], out)?)
}

/// Four-knot piecewise-linear jet: blue → cyan → yellow → red.
fn jet(t: f64) -> (f64, f64, f64) {
    let t = t.clamp(0.0, 1.0);
    if t <= 1.0 / 3.0 {
        let u = 3.0 * t;
        (0.0, u, 1.0)
    } else if t <= 2.0 / 3.0 {
        let u = 3.0 * (t - 1.0 / 3.0);
        (u, 1.0, 1.0 - u)
    } else {
        let u = 3.0 * (t - 2.0 / 3.0);
        (1.0, 1.0 - u, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn built_expert_has_documented_feature_shape() {
        let mut rng = rng_from(1);
        let net = build_expert(Modality::Rgb, (3, 32, 32), 2, &mut rng).unwrap();
        assert_eq!(net.feature_shape, (64, 4, 4));
        assert_eq!(net.feature_len(), 1024);
        assert_eq!(net.params.len(), 8);
    }

    #[test]
    fn same_seed_builds_bit_identical_params() {
        let a = build_expert(Modality::Depth, (3, 32, 32), 2, &mut rng_from(9)).unwrap();
        let b = build_expert(Modality::Depth, (3, 32, 32), 2, &mut rng_from(9)).unwrap();
        for (name, entry) in a.params.iter() {
            assert_eq!(
                entry.tensor.data(),
                b.params.tensor(name).unwrap().data(),
                "{name}"
            );
        }
    }

    #[test]
    fn indivisible_input_size_is_rejected() {
        let mut rng = rng_from(1);
        assert!(matches!(
            build_expert(Modality::Rgb, (3, 30, 30), 2, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn posterior_is_a_probability_vector() {
        let mut rng = rng_from(4);
        let net = build_expert(Modality::Motion, (1, 32, 32), 2, &mut rng).unwrap();
        let x = GenTensor::from_fn(vec![1, 32, 32], |i| ((i % 7) as f64) / 7.0);
        let out = net.infer(&x).unwrap();
        let sum: f64 = out.posterior.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(out.features.shape(), &[64, 4, 4]);
    }

    #[test]
    fn zeroed_head_gives_uniform_posterior() {
        let mut rng = rng_from(4);
        let mut net = build_expert(Modality::Rgb, (3, 32, 32), 2, &mut rng).unwrap();
        let len = net.params.tensor("head.weight").unwrap().len();
        net.params.get_mut("head.weight").unwrap().tensor = GenTensor::zeros(vec![len / 2, 2])
            .reshape(vec![len / 2, 2])
            .unwrap();
        let x = GenTensor::from_fn(vec![3, 32, 32], |i| ((i % 11) as f64) / 11.0);
        let out = net.infer(&x).unwrap();
        for &p in out.posterior.data() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_is_pure() {
        let mut rng = rng_from(6);
        let net = build_expert(Modality::Rgb, (3, 32, 32), 2, &mut rng).unwrap();
        let x = GenTensor::from_fn(vec![3, 32, 32], |i| ((i % 13) as f64) / 13.0);
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert_eq!(a.posterior.data(), b.posterior.data());
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn wrong_window_shape_is_a_dimension_error() {
        let mut rng = rng_from(6);
        let net = build_expert(Modality::Rgb, (3, 32, 32), 2, &mut rng).unwrap();
        let x = GenTensor::<f64>::zeros(vec![3, 16, 16]);
        assert!(matches!(net.infer(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn colorize_endpoints_and_invalid_pixels() {
        let depth = GenTensor::new(vec![1, 1, 3], vec![0.5, 8.0, 0.0]).unwrap();
        let img = colorize_depth(&depth, (0.5, 8.0)).unwrap();
        // min -> blue
        assert_eq!(
            (img.data()[0], img.data()[3], img.data()[6]),
            (0.0, 0.0, 1.0)
        );
        // max -> red
        assert_eq!(
            (img.data()[1], img.data()[4], img.data()[7]),
            (1.0, 0.0, 0.0)
        );
        // invalid -> black
        assert_eq!(
            (img.data()[2], img.data()[5], img.data()[8]),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn colorize_rejects_degenerate_range() {
        let depth = GenTensor::<f64>::zeros(vec![1, 2, 2]);
        assert!(matches!(
            colorize_depth(&depth, (3.0, 3.0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn colormap_channels_stay_in_unit_range_and_red_grows() {
        let mut last_r = -1.0;
        for i in 0..=100 {
            let (r, g, b) = jet(i as f64 / 100.0);
            for v in [r, g, b] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(r >= last_r, "red channel must be monotone along the map");
            last_r = r;
        }
    }

    #[test]
    fn stacked_map_orders_channels() {
        let mut map = ModalityMap::new();
        map.insert(Modality::Rgb, GenTensor::filled(vec![3, 2, 2], 0.1));
        map.insert(Modality::Depth, GenTensor::filled(vec![3, 2, 2], 0.9));
        let stacked = map.stacked(&[Modality::Rgb, Modality::Depth]).unwrap();
        assert_eq!(stacked.shape(), &[6, 2, 2]);
        assert_eq!(stacked.data()[0], 0.1);
        assert_eq!(stacked.data()[3 * 4], 0.9);
        assert!(map.stacked(&[Modality::Motion]).is_err());
    }
}
