//! Dense multiscale sliding-window detection.
//!
//! Proposals are enumerated per scale on a fixed grid, cropped per
//! modality, resized to the classifier window, scored through a fused
//! model, and reduced by greedy non-maximum suppression. Scoring batches
//! all windows of a frame through the experts once; several fusion heads
//! can share that work via [`WindowBank`].

use crate::error::{Error, Result};
use crate::expert::{
    colorize_depth, ExpertNet, InputKind, Modality, DEPTH_COLOR_RANGE_M, WINDOW_SIDE,
};
use crate::fusion::{
    average_fusion, gate_forward_batch, late_fusion_forward, mode_combine, switch_fusion,
    FusedModel, FusionHead,
};
use crate::img::crop_resize;
use crate::ops;
use crate::synth::MultimodalFrame;
use crate::tensor::Tensor as GenTensor;
use crate::train::CLASS_HUMAN;
use crate::Tensor;

/// Axis-aligned pixel box, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<BoundingBox> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("non-finite box coordinates {b:?}")));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(Error::Input(format!("box {b:?} has non-positive area")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// One scored window, with the gate vector when the scheme produced one.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub gate: Option<Vec<f64>>,
    pub frame_index: usize,
}

/// Proposal grid plus the scales that did not fit the frame.
#[derive(Debug, Clone)]
pub struct Proposals {
    pub boxes: Vec<BoundingBox>,
    pub skipped_scales: Vec<usize>,
}

/// Enumerates windows of each scale (window height in pixels) with width
/// `scale·aspect`, stepped by `max(1, round(stride_fraction·scale))`,
/// fully inside the frame; ordered by scale, then row, then column.
pub fn generate_proposals(
    frame_size: (usize, usize),
    scales: &[usize],
    aspect: f64,
    stride_fraction: f64,
) -> Result<Proposals> {
    let (frame_h, frame_w) = frame_size;
    if scales.is_empty() {
        return Err(Error::Input("no proposal scales given".into()));
    }
    if !(aspect > 0.0) || !aspect.is_finite() {
        return Err(Error::Parameter(format!("aspect ratio {aspect} invalid")));
    }
    if !(stride_fraction > 0.0) || !stride_fraction.is_finite() {
        return Err(Error::Parameter(format!(
            "stride fraction {stride_fraction} invalid"
        )));
    }
    let mut boxes = Vec::new();
    let mut skipped = Vec::new();
    for &scale in scales {
        let h = scale;
        let w = (scale as f64 * aspect).round() as usize;
        if h == 0 || w == 0 || h > frame_h || w > frame_w {
            skipped.push(scale);
            continue;
        }
        let stride = ((stride_fraction * scale as f64).round() as usize).max(1);
        let mut y = 0;
        while y + h <= frame_h {
            let mut x = 0;
            while x + w <= frame_w {
                boxes.push(BoundingBox {
                    x_min: x as f64,
                    y_min: y as f64,
                    x_max: (x + w) as f64,
                    y_max: (y + h) as f64,
                });
                x += stride;
            }
            y += stride;
        }
    }
    Ok(Proposals {
        boxes,
        skipped_scales: skipped,
    })
}

/// Greedy non-maximum suppression: keep a detection iff its IoU with every
/// previously kept detection stays below `iou_threshold`. Output is sorted
/// by descending score, ties by enumeration order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    debug_assert!(iou_threshold > 0.0 && iou_threshold < 1.0);
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        let overlaps = kept
            .iter()
            .any(|k| crate::eval::iou(&k.bbox, &cand.bbox) >= iou_threshold);
        if !overlaps {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Batched expert outputs over one frame's proposal windows.
pub struct WindowBank {
    /// Flattened feature batch per expert, `[N, D_i]`.
    pub features: Vec<Tensor>,
    /// Posterior batch per expert, `[N, C]`.
    pub posteriors: Vec<Tensor>,
    pub window_count: usize,
}

fn frame_source(frame: &MultimodalFrame, modality: Modality) -> Result<Tensor> {
    match modality {
        Modality::Rgb => Ok(frame.rgb.clone()),
        Modality::Depth => colorize_depth(&frame.depth, DEPTH_COLOR_RANGE_M),
        Modality::Motion => Ok(frame.motion.clone()),
    }
}

fn crop_batch(source: &Tensor, proposals: &[BoundingBox]) -> Result<Tensor> {
    let channels = source.shape()[0];
    let side = WINDOW_SIDE;
    let mut data = Vec::with_capacity(proposals.len() * channels * side * side);
    for b in proposals {
        let crop = crop_resize(
            source,
            b.x_min as usize,
            b.y_min as usize,
            b.x_max as usize,
            b.y_max as usize,
            side,
        )?;
        data.extend_from_slice(crop.data());
    }
    Ok(GenTensor::from_raw(
        vec![proposals.len(), channels, side, side],
        data,
    ))
}

/// Runs every expert over every proposal window of the frame, once.
pub fn score_expert_windows(
    experts: &[ExpertNet],
    frame: &MultimodalFrame,
    proposals: &[BoundingBox],
) -> Result<WindowBank> {
    let mut features = Vec::with_capacity(experts.len());
    let mut posteriors = Vec::with_capacity(experts.len());
    let mut sources: Vec<(Modality, Tensor)> = Vec::new();
    for expert in experts {
        let modality = match &expert.input {
            InputKind::Single(m) => *m,
            InputKind::Stacked(_) => {
                return Err(Error::Config(
                    "stacked network cannot serve as a per-modality expert".into(),
                ))
            }
        };
        let source = match sources.iter().find(|(m, _)| *m == modality) {
            Some((_, s)) => s.clone(),
            None => {
                let s = frame_source(frame, modality)?;
                sources.push((modality, s.clone()));
                s
            }
        };
        let batch = crop_batch(&source, proposals)?;
        let (f, p) = expert.forward_batch(&batch, false, None)?;
        features.push(f);
        posteriors.push(p);
    }
    Ok(WindowBank {
        features,
        posteriors,
        window_count: proposals.len(),
    })
}

fn row(t: &Tensor, i: usize) -> Tensor {
    let cols = t.shape()[1];
    GenTensor::from_raw(vec![cols], t.data()[i * cols..(i + 1) * cols].to_vec())
}

/// Applies one fusion head to a scored bank. `expert_indices` selects and
/// orders the bank experts this head was trained over.
pub fn apply_head(
    head: &FusionHead,
    expert_indices: &[usize],
    bank: &WindowBank,
    proposals: &[BoundingBox],
    frame_index: usize,
) -> Result<Vec<Detection>> {
    let n = bank.window_count;
    debug_assert_eq!(n, proposals.len());
    for &i in expert_indices {
        if i >= bank.posteriors.len() {
            return Err(Error::Input(format!("expert index {i} outside the bank")));
        }
    }
    let concat_r = || -> Result<Tensor> {
        let parts: Vec<&Tensor> = expert_indices.iter().map(|&i| &bank.features[i]).collect();
        ops::concat_cols(&parts)
    };
    let mut detections = Vec::with_capacity(n);
    match head {
        FusionHead::Average => {
            for w in 0..n {
                let posts: Vec<Tensor> = expert_indices
                    .iter()
                    .map(|&i| row(&bank.posteriors[i], w))
                    .collect();
                let f = average_fusion(&posts)?;
                detections.push(Detection {
                    bbox: proposals[w],
                    score: f.data()[CLASS_HUMAN],
                    gate: None,
                    frame_index,
                });
            }
        }
        FusionHead::Mode(gate) | FusionHead::Switch(gate) => {
            let r = concat_r()?;
            let g = gate_forward_batch(gate, &r)?;
            let hard = matches!(head, FusionHead::Switch(_));
            for w in 0..n {
                let posts: Vec<Tensor> = expert_indices
                    .iter()
                    .map(|&i| row(&bank.posteriors[i], w))
                    .collect();
                let g_row = row(&g, w);
                let f = if hard {
                    switch_fusion(&g_row, &posts)?
                } else {
                    mode_combine(&g_row, &posts)?
                };
                detections.push(Detection {
                    bbox: proposals[w],
                    score: f.data()[CLASS_HUMAN],
                    gate: Some(g_row.into_data()),
                    frame_index,
                });
            }
        }
        FusionHead::Late(params) => {
            let r = concat_r()?;
            let f = late_fusion_forward(params, &r, false, None)?;
            let classes = f.shape()[1];
            for w in 0..n {
                detections.push(Detection {
                    bbox: proposals[w],
                    score: f.data()[w * classes + CLASS_HUMAN],
                    gate: None,
                    frame_index,
                });
            }
        }
        FusionHead::Channel { .. } => {
            return Err(Error::Input(
                "channel fusion scores frames directly; use score_channel_windows".into(),
            ))
        }
    }
    Ok(detections)
}

/// Scores windows through the channel-fusion network: all modalities are
/// stacked along the channel axis at the frame level, then cropped.
pub fn score_channel_windows(
    net: &ExpertNet,
    order: &[Modality],
    frame: &MultimodalFrame,
    proposals: &[BoundingBox],
) -> Result<Vec<Detection>> {
    let mut channel_sources = Vec::new();
    for &m in order {
        channel_sources.push(frame_source(frame, m)?);
    }
    let stacked_frame = stack_channels(&channel_sources)?;
    let batch = crop_batch(&stacked_frame, proposals)?;
    let (_, posts) = net.forward_batch(&batch, false, None)?;
    let classes = posts.shape()[1];
    Ok(proposals
        .iter()
        .enumerate()
        .map(|(w, bbox)| Detection {
            bbox: *bbox,
            score: posts.data()[w * classes + CLASS_HUMAN],
            gate: None,
            frame_index: frame.frame_index,
        })
        .collect())
}

fn stack_channels(sources: &[Tensor]) -> Result<Tensor> {
    let (h, w) = match *sources[0].shape() {
        [_, h, w] => (h, w),
        ref other => {
            return Err(Error::Dimension(format!(
                "frame source must be [C,H,W], got {other:?}"
            )))
        }
    };
    let total: usize = sources.iter().map(|s| s.shape()[0]).sum();
    let mut data = Vec::with_capacity(total * h * w);
    for s in sources {
        if s.shape()[1] != h || s.shape()[2] != w {
            return Err(Error::Dimension(
                "frame sources disagree on spatial size".into(),
            ));
        }
        data.extend_from_slice(s.data());
    }
    Ok(GenTensor::from_raw(vec![total, h, w], data))
}

/// Crops every proposal per modality, runs the fused model in inference
/// mode, and returns one detection per proposal in enumeration order
/// (`score = F[human]`).
pub fn score_windows(
    model: &FusedModel,
    frame: &MultimodalFrame,
    proposals: &[BoundingBox],
) -> Result<Vec<Detection>> {
    for modality in model.modalities() {
        // surface missing modalities before any compute
        frame_source(frame, modality)?;
    }
    match &model.head {
        FusionHead::Channel { net, order } => {
            score_channel_windows(net, order, frame, proposals)
        }
        head => {
            let bank = score_expert_windows(&model.experts, frame, proposals)?;
            let indices: Vec<usize> = (0..model.experts.len()).collect();
            apply_head(head, &indices, &bank, proposals, frame.frame_index)
        }
    }
}

// ---------------------------------------------------------------------------
// Detections file
// ---------------------------------------------------------------------------

/// Sidecar info of a detections file.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionsHeader {
    pub scheme: String,
    /// Expert order; gate columns follow it.
    pub experts: Vec<String>,
    /// Frame range the detector ran over (half-open).
    pub frames: std::ops::Range<usize>,
    pub gate_columns: usize,
}

/// Writes tab-separated rows `frame_index, x_min, y_min, x_max, y_max,
/// score[, g_1..g_M]` under a single `#`-header naming the scheme, the
/// expert order and the scored frame range.
pub fn write_detections(
    path: &std::path::Path,
    header: &DetectionsHeader,
    detections: &[Detection],
) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "# scheme={} experts={} frames={}..{} gate_columns={}",
        header.scheme,
        header.experts.join(","),
        header.frames.start,
        header.frames.end,
        header.gate_columns
    );
    for d in detections {
        let _ = write!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}",
            d.frame_index, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.score
        );
        match (&d.gate, header.gate_columns) {
            (Some(g), n) if g.len() == n => {
                for v in g {
                    let _ = write!(text, "\t{v}");
                }
            }
            (None, 0) => {}
            (gate, n) => {
                return Err(Error::Input(format!(
                    "detection carries {} gate values but header declares {n}",
                    gate.as_ref().map_or(0, Vec::len)
                )))
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(Error::io(format!("writing {}", path.display())))
}

pub fn read_detections(
    path: &std::path::Path,
) -> Result<(DetectionsHeader, Vec<Detection>)> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(Error::io(format!("reading {name}")))?;
    let bad = |line: usize, message: String| Error::Parse {
        file: name.clone(),
        offset: line as u64,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| bad(0, "empty detections file".into()))?;
    let header = parse_detections_header(first).map_err(|m| bad(1, m))?;
    let mut detections = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 + header.gate_columns {
            return Err(bad(
                i + 1,
                format!(
                    "expected {} columns, got {}",
                    6 + header.gate_columns,
                    cols.len()
                ),
            ));
        }
        let frame_index: usize = cols[0]
            .parse()
            .map_err(|_| bad(i + 1, "bad frame index".into()))?;
        let nums: Vec<f64> = cols[1..6]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(i + 1, "bad numeric column".into()))?;
        let bbox = BoundingBox::new(nums[0], nums[1], nums[2], nums[3])
            .map_err(|e| bad(i + 1, e.to_string()))?;
        let gate = if header.gate_columns > 0 {
            Some(
                cols[6..]
                    .iter()
                    .map(|c| c.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(i + 1, "bad gate column".into()))?,
            )
        } else {
            None
        };
        detections.push(Detection {
            bbox,
            score: nums[4],
            gate,
            frame_index,
        });
    }
    Ok((header, detections))
}

fn parse_detections_header(line: &str) -> std::result::Result<DetectionsHeader, String> {
    let rest = line
        .strip_prefix('#')
        .ok_or_else(|| "header must start with #".to_string())?;
    let mut scheme = None;
    let mut experts = Vec::new();
    let mut frames = None;
    let mut gate_columns = 0usize;
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format!("bad header field `{field}`"))?;
        match k {
            "scheme" => scheme = Some(v.to_string()),
            "experts" => {
                experts = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(str::to_string).collect()
                }
            }
            "frames" => {
                let (a, b) = v
                    .split_once("..")
                    .ok_or_else(|| format!("bad frames range `{v}`"))?;
                let start: usize = a.parse().map_err(|_| "bad range start".to_string())?;
                let end: usize = b.parse().map_err(|_| "bad range end".to_string())?;
                frames = Some(start..end);
            }
            "gate_columns" => {
                gate_columns = v.parse().map_err(|_| "bad gate_columns".to_string())?
            }
            other => return Err(format!("unknown header field `{other}`")),
        }
    }
    Ok(DetectionsHeader {
        scheme: scheme.ok_or_else(|| "header missing scheme".to_string())?,
        experts,
        frames: frames.ok_or_else(|| "header missing frames range".to_string())?,
        gate_columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(bbox: BoundingBox, score: f64) -> Detection {
        Detection {
            bbox,
            score,
            gate: None,
            frame_index: 0,
        }
    }

    #[test]
    fn full_frame_window_yields_one_proposal() {
        let p = generate_proposals((96, 96), &[96], 1.0, 1.0).unwrap();
        assert_eq!(p.boxes.len(), 1);
        assert_eq!(p.boxes[0], bb(0.0, 0.0, 96.0, 96.0));
        assert!(p.skipped_scales.is_empty());
    }

    #[test]
    fn proposal_count_matches_enumeration_arithmetic() {
        // scale 32, aspect 0.5 -> 32x16 window, stride 8:
        // x steps: (96-16)/8+1 = 11, y steps: (96-32)/8+1 = 9 -> 99
        let p = generate_proposals((96, 96), &[32], 0.5, 0.25).unwrap();
        assert_eq!(p.boxes.len(), 99);
    }

    #[test]
    fn two_scales_add_their_counts_and_big_scales_are_skipped() {
        let single_a = generate_proposals((96, 96), &[32], 0.5, 0.25).unwrap();
        let single_b = generate_proposals((96, 96), &[48], 0.5, 0.25).unwrap();
        let both = generate_proposals((96, 96), &[32, 48], 0.5, 0.25).unwrap();
        assert_eq!(both.boxes.len(), single_a.boxes.len() + single_b.boxes.len());
        let skippy = generate_proposals((96, 96), &[32, 200], 0.5, 0.25).unwrap();
        assert_eq!(skippy.skipped_scales, vec![200]);
        assert_eq!(skippy.boxes.len(), single_a.boxes.len());
    }

    #[test]
    fn proposals_never_leave_the_frame() {
        for (h, w) in [(96usize, 96usize), (64, 80), (48, 96)] {
            let p = generate_proposals((h, w), &[24, 32, 48], 0.5, 0.3).unwrap();
            for b in &p.boxes {
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0);
                assert!(b.x_max <= w as f64 && b.y_max <= h as f64);
            }
        }
    }

    #[test]
    fn nms_suppresses_duplicates_and_keeps_disjoint() {
        let a = det(bb(0.0, 0.0, 10.0, 10.0), 0.9);
        let b = det(bb(0.0, 0.0, 10.0, 10.0), 0.8);
        let kept = nms(&[a.clone(), b], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let c = det(bb(50.0, 50.0, 60.0, 60.0), 0.3);
        let kept = nms(&[a, c], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_iou_arithmetic_case() {
        // IoU of (0,0,10,10) and (5,0,15,10) is 50/150 = 1/3 > 0.3
        let a = det(bb(0.0, 0.0, 10.0, 10.0), 0.9);
        let b = det(bb(5.0, 0.0, 15.0, 10.0), 0.8);
        let kept = nms(&[a, b], 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_output_is_sorted_subset_with_bounded_pairwise_iou() {
        let mut rng = crate::rng::rng_from(17);
        use rand::Rng;
        let dets: Vec<Detection> = (0..60)
            .map(|_| {
                let x = rng.gen_range(0.0..80.0);
                let y = rng.gen_range(0.0..80.0);
                let w = rng.gen_range(4.0..16.0);
                let h = rng.gen_range(4.0..16.0);
                det(bb(x, y, x + w, y + h), rng.gen::<f64>())
            })
            .collect();
        let kept = nms(&dets, 0.4);
        assert!(kept.len() <= dets.len());
        for pair in kept.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                assert!(crate::eval::iou(&kept[i].bbox, &kept[j].bbox) < 0.4);
            }
        }
    }

    #[test]
    fn detections_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.tsv");
        let header = DetectionsHeader {
            scheme: "mode".into(),
            experts: vec!["rgb".into(), "depth".into()],
            frames: 160..200,
            gate_columns: 2,
        };
        let dets = vec![
            Detection {
                bbox: bb(0.0, 0.0, 16.0, 32.0),
                score: 0.8125,
                gate: Some(vec![0.25, 0.75]),
                frame_index: 160,
            },
            Detection {
                bbox: bb(8.0, 8.0, 24.0, 40.0),
                score: 0.0625,
                gate: Some(vec![0.5, 0.5]),
                frame_index: 161,
            },
        ];
        write_detections(&path, &header, &dets).unwrap();
        let (h2, d2) = read_detections(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(d2.len(), 2);
        assert_eq!(d2[0].bbox, dets[0].bbox);
        assert_eq!(d2[0].score, dets[0].score);
        assert_eq!(d2[0].gate, dets[0].gate);
        assert_eq!(d2[1].frame_index, 161);
    }

    #[test]
    fn gate_column_mismatch_is_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.tsv");
        let header = DetectionsHeader {
            scheme: "average".into(),
            experts: vec!["rgb".into()],
            frames: 0..1,
            gate_columns: 0,
        };
        let det = Detection {
            bbox: bb(0.0, 0.0, 1.0, 1.0),
            score: 0.5,
            gate: Some(vec![1.0]),
            frame_index: 0,
        };
        assert!(write_detections(&path, &header, &[det]).is_err());
    }
}
