//! Acceptance gate: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them). The heavy relative-ordering
//! experiment trains the full model zoo on a scripted 2000-frame dataset
//! and checks the fusion ordering and gate behavior.

use fusedet_cli::commands::{cmd_detect, cmd_eval, cmd_gen_data, cmd_train, TrainStage};
use fusedet_core::checkpoint::dir_hash;
use fusedet_core::config::Config;
use fusedet_core::detect::{
    apply_head, generate_proposals, nms, score_channel_windows, score_expert_windows,
    BoundingBox, Detection,
};
use fusedet_core::eval::{
    average_precision, equal_error_rate, match_detections, pr_curve, read_metrics, Outcome,
    PrCurve,
};
use fusedet_core::expert::{build_expert, Modality};
use fusedet_core::fusion::{
    average_fusion, gate_forward, mode_combine, switch_fusion, FusionHead, GatingNet,
};
use fusedet_core::ops::softmax;
use fusedet_core::optim::finite_difference_check;
use fusedet_core::rng::{derive_seed, rng_from};
use fusedet_core::synth::{
    generate_sequence, read_dataset_meta, Annotation, EnvironmentRegime, RegimeName,
};
use fusedet_core::tensor::Tensor as GenTensor;
use fusedet_core::train::{
    extract_crops, fusion_dataset_loss, mode_batch_graph, split_range, train_channel_net,
    train_experts, train_gate, train_late_head, Split, TrainConfig,
};
use fusedet_core::{Params, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

// =========================================================================
// AC-1: gradient correctness of the full composite
// =========================================================================

#[test]
fn ac1_gradient_correctness_of_the_full_composite() {
    let start = Instant::now();
    // one synthetic window per modality, real 32x32 experts, gate, mixture
    let frames = generate_sequence(
        1,
        &[(0, EnvironmentRegime::preset(RegimeName::BrightIndoor))],
        (96, 96),
        2,
        401,
    )
    .unwrap();
    let mut crop_rng = rng_from(402);
    let crops = extract_crops(
        &frames,
        &[Modality::Rgb, Modality::Depth],
        1,
        Split::Train,
        &mut crop_rng,
    )
    .unwrap();
    let sample = &crops.samples[0];
    let batch = |m: Modality| -> Tensor {
        let t = sample.inputs.get(m).unwrap().clone();
        t.reshape(vec![1, m.channel_count(), 32, 32]).unwrap()
    };
    let inputs = vec![batch(Modality::Rgb), batch(Modality::Depth)];
    let labels = GenTensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();

    let mut init_rng = rng_from(403);
    let experts = vec![
        build_expert(Modality::Rgb, (3, 32, 32), 2, &mut init_rng).unwrap(),
        build_expert(Modality::Depth, (3, 32, 32), 2, &mut init_rng).unwrap(),
    ];
    let dim: usize = experts.iter().map(|e| e.feature_len()).sum();
    let gate = GatingNet::new(dim, 2, &mut init_rng).unwrap();

    // analytic gradients from one tape pass (inference mode: deterministic)
    let mut tape = Tape::new();
    let mut rng = rng_from(404);
    let graph = mode_batch_graph(
        &mut tape,
        &experts,
        &gate,
        &inputs,
        labels.clone(),
        false,
        &mut rng,
    )
    .unwrap();
    tape.backward(graph.loss).unwrap();

    let mut combined = Params::new();
    for (i, e) in experts.iter().enumerate() {
        for (name, entry) in e.params.iter() {
            let mut tensor = entry.tensor.clone();
            tensor
                .set_grad(tape.grad(graph.expert_vars[i][name]).unwrap().to_vec())
                .unwrap();
            combined
                .insert(&format!("expert{i}.{name}"), tensor, true)
                .unwrap();
        }
    }
    for (name, entry) in gate.params.iter() {
        let mut tensor = entry.tensor.clone();
        tensor
            .set_grad(tape.grad(graph.head_vars[name]).unwrap().to_vec())
            .unwrap();
        combined.insert(name, tensor, true).unwrap();
    }

    let loss_fn = |params: &Params| {
        let mut experts = experts.clone();
        let mut gate = gate.clone();
        for (i, e) in experts.iter_mut().enumerate() {
            for name in e.params.names().cloned().collect::<Vec<_>>() {
                e.params.get_mut(&name).unwrap().tensor = params
                    .tensor(&format!("expert{i}.{name}"))
                    .unwrap()
                    .clone();
            }
        }
        for name in gate.params.names().cloned().collect::<Vec<_>>() {
            gate.params.get_mut(&name).unwrap().tensor = params.tensor(&name).unwrap().clone();
        }
        let mut tape = Tape::new();
        let mut rng = rng_from(404);
        let graph = mode_batch_graph(
            &mut tape,
            &experts,
            &gate,
            &inputs,
            labels.clone(),
            false,
            &mut rng,
        )?;
        Ok(tape.value(graph.loss).data()[0])
    };

    let mut fd_rng = rng_from(405);
    let max_rel = finite_difference_check(loss_fn, &mut combined, 1e-4, 50, &mut fd_rng).unwrap();
    assert!(
        max_rel < 1e-3,
        "AC-1 FAIL: max relative gradient error {max_rel:e} (limit 1e-3)"
    );
    println!(
        "AC-1 PASS: composite gradient check, max relative error {max_rel:.3e} < 1e-3 ({} tensors x 50 coords, eps 1e-4) in {:.1}s",
        combined.len(),
        start.elapsed().as_secs_f64()
    );
}

// =========================================================================
// AC-2: simplex and convexity invariants, 10,000 randomized trials
// =========================================================================

#[test]
fn ac2_simplex_and_convexity_invariants() {
    let start = Instant::now();
    let mut rng = rng_from(777);
    let gate = GatingNet::new(64, 3, &mut rng).unwrap();
    let trials = 10_000;
    for trial in 0..trials {
        let m = 2 + (trial % 3);
        let c = 2 + (trial % 4);
        let posteriors: Vec<Tensor> = (0..m)
            .map(|_| {
                let logits = GenTensor::from_fn(vec![c], |_| rng.gen::<f64>() * 8.0 - 4.0);
                softmax(&logits).unwrap()
            })
            .collect();
        let g = softmax(&GenTensor::from_fn(vec![m], |_| {
            rng.gen::<f64>() * 8.0 - 4.0
        }))
        .unwrap();

        // gate simplex on the real gating network
        let r = GenTensor::from_fn(vec![64], |_| rng.gen::<f64>() * 2.0 - 1.0);
        let gate_out = gate_forward(&gate, &r).unwrap();
        let sum: f64 = gate_out.data().iter().sum();
        assert!(
            (sum - 1.0).abs() < 1e-12 && gate_out.data().iter().all(|&v| v > 0.0),
            "AC-2 FAIL: gate output off the simplex (sum {sum})"
        );

        // convexity bounds for the soft and hard mixtures
        let fused = mode_combine(&g, &posteriors).unwrap();
        let avg = average_fusion(&posteriors).unwrap();
        let hard = switch_fusion(&g, &posteriors).unwrap();
        for ci in 0..c {
            let lo = posteriors
                .iter()
                .map(|p| p.data()[ci])
                .fold(f64::INFINITY, f64::min);
            let hi = posteriors
                .iter()
                .map(|p| p.data()[ci])
                .fold(f64::NEG_INFINITY, f64::max);
            for (what, v) in [
                ("mixture", fused.data()[ci]),
                ("average", avg.data()[ci]),
                ("switch", hard.data()[ci]),
            ] {
                assert!(
                    v >= lo - 1e-12 && v <= hi + 1e-12,
                    "AC-2 FAIL: {what} violates convexity at class {ci}"
                );
            }
        }

        // uniform gate equals averaging within 1e-12 per coordinate
        let uniform = GenTensor::filled(vec![m], 1.0 / m as f64);
        let via_gate = mode_combine(&uniform, &posteriors).unwrap();
        for (a, b) in via_gate.data().iter().zip(avg.data()) {
            assert!(
                (a - b).abs() <= 1e-12,
                "AC-2 FAIL: uniform gate != averaging ({a} vs {b})"
            );
        }

        // one-hot gate equals switching exactly
        let winner = trial % m;
        let onehot = GenTensor::from_fn(vec![m], |i| if i == winner { 1.0 } else { 0.0 });
        let via_vertex = mode_combine(&onehot, &posteriors).unwrap();
        let via_switch = switch_fusion(&onehot, &posteriors).unwrap();
        assert_eq!(
            via_vertex.data(),
            via_switch.data(),
            "AC-2 FAIL: one-hot gate differs from switching"
        );
    }
    println!(
        "AC-2 PASS: {trials} randomized trials of gate simplex, convexity, uniform==average, one-hot==switch in {:.1}s",
        start.elapsed().as_secs_f64()
    );
}

// =========================================================================
// AC-3: freeze contract and bit-identical reproducibility
// =========================================================================

fn ac3_config() -> Config {
    let text = "\
data.frames=200\n\
data.width=64\n\
data.height=64\n\
data.actors=2\n\
data.seed=31\n\
data.script=0:dark-indoor,50:bright-outdoor,100:dark-indoor,150:bright-outdoor\n\
data.negatives_per_frame=6\n\
train.epochs=2\n\
train.fusion_epochs=2\n\
train.batch=64\n\
train.seed=17\n\
detect.scales=32,48\n\
";
    Config::parse_str(text, "ac3").unwrap()
}

fn run_ac3_pipeline(root: &std::path::Path) -> (String, String, String, String) {
    let config = ac3_config();
    let data = root.join("data");
    cmd_gen_data(&config, &data).unwrap();
    let run = root.join("run");
    cmd_train(TrainStage::Experts, &config, &data, &run).unwrap();
    let rgb_before = dir_hash(&run.join("experts/rgb")).unwrap();
    let depth_before = dir_hash(&run.join("experts/depth")).unwrap();
    cmd_train(TrainStage::Gate, &config, &data, &run).unwrap();
    let rgb_after = dir_hash(&run.join("experts/rgb")).unwrap();
    let depth_after = dir_hash(&run.join("experts/depth")).unwrap();
    assert_eq!(
        (&rgb_before, &depth_before),
        (&rgb_after, &depth_after),
        "AC-3 FAIL: expert checkpoints changed during fusion training"
    );
    let dets = root.join("detections.tsv");
    cmd_detect(
        &run.join("fusion-gate/fused-mode"),
        &data,
        Split::Test,
        &dets,
        &config,
    )
    .unwrap();
    cmd_eval(&dets, &data, config.eval_iou, &root.join("metrics")).unwrap();
    let metrics = std::fs::read_to_string(root.join("metrics/metrics.txt")).unwrap();
    let detections = std::fs::read_to_string(&dets).unwrap();
    (rgb_after, depth_after, metrics, detections)
}

fn checkpoint_tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().to_string();
                // manifests record wall-clock duration
                if rel.ends_with("manifest.txt") {
                    continue;
                }
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn ac3_freeze_contract_and_bit_identical_reruns() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let (rgb_a, depth_a, metrics_a, dets_a) = run_ac3_pipeline(&a);
    let (rgb_b, depth_b, metrics_b, dets_b) = run_ac3_pipeline(&b);
    assert_eq!(rgb_a, rgb_b, "AC-3 FAIL: rgb checkpoint differs across reruns");
    assert_eq!(depth_a, depth_b, "AC-3 FAIL: depth checkpoint differs across reruns");
    assert_eq!(metrics_a, metrics_b, "AC-3 FAIL: metrics differ across reruns");
    assert_eq!(dets_a, dets_b, "AC-3 FAIL: detections differ across reruns");
    let tree_a = checkpoint_tree(&a.join("run"));
    let tree_b = checkpoint_tree(&b.join("run"));
    assert_eq!(tree_a.len(), tree_b.len());
    for ((ra, ba), (rb, bb)) in tree_a.iter().zip(&tree_b) {
        assert_eq!(ra, rb);
        assert_eq!(ba, bb, "AC-3 FAIL: {ra} differs byte-wise across reruns");
    }
    println!(
        "AC-3 PASS: two-stage pipeline on 200 frames, expert hashes stable across gate training, rerun bit-identical ({} files) in {:.1}s",
        tree_a.len(),
        start.elapsed().as_secs_f64()
    );
}

// =========================================================================
// AC-4: metric oracles against independently coded brute-force references
// =========================================================================

mod reference {
    use super::*;

    /// Exact IoU for integer-aligned boxes by counting unit cells.
    pub fn iou_by_cells(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let mut inter = 0u64;
        let (ax0, ay0, ax1, ay1) = (a.x_min as i64, a.y_min as i64, a.x_max as i64, a.y_max as i64);
        let (bx0, by0, bx1, by1) = (b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64);
        for y in ay0..ay1 {
            for x in ax0..ax1 {
                if x >= bx0 && x < bx1 && y >= by0 && y < by1 {
                    inter += 1;
                }
            }
        }
        let area_a = ((ax1 - ax0) * (ay1 - ay0)) as u64;
        let area_b = ((bx1 - bx0) * (by1 - by0)) as u64;
        let union = area_a + area_b - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Greedy matching, coded from the policy statement: highest score
    /// first; best unmatched annotation by IoU at or above the threshold
    /// (lowest index on ties); occluded match is ignored and consumes the
    /// annotation; no match is a false positive.
    pub fn greedy_labels(
        dets: &[Detection],
        anns: &[Annotation],
        thr: f64,
    ) -> Vec<Outcome> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));
        let mut taken = vec![false; anns.len()];
        let mut labels = vec![Outcome::FalsePositive; dets.len()];
        for i in idx {
            let mut best_ann = None;
            let mut best_iou = -1.0;
            for (k, ann) in anns.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                let o = fusedet_core::eval::iou(&dets[i].bbox, &ann.bbox);
                if o >= thr && o > best_iou {
                    best_iou = o;
                    best_ann = Some(k);
                }
            }
            if let Some(k) = best_ann {
                taken[k] = true;
                labels[i] = if anns[k].occluded {
                    Outcome::Ignored
                } else {
                    Outcome::TruePositive
                };
            }
        }
        labels
    }

    /// Average precision recomputed exhaustively: every distinct score is
    /// a threshold; interpolated precision at each recall is found by
    /// rescanning all points.
    pub fn ap_exhaustive(scored: &[(f64, Outcome)], total_positives: usize) -> f64 {
        let mut thresholds: Vec<f64> = scored
            .iter()
            .filter(|(_, o)| *o != Outcome::Ignored)
            .map(|(s, _)| *s)
            .collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut points: Vec<(f64, f64)> = vec![(0.0, 1.0)]; // (recall, precision)
        for &t in &thresholds {
            let tp = scored
                .iter()
                .filter(|(s, o)| *s >= t && *o == Outcome::TruePositive)
                .count();
            let fp = scored
                .iter()
                .filter(|(s, o)| *s >= t && *o == Outcome::FalsePositive)
                .count();
            let p = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            points.push((tp as f64 / total_positives as f64, p));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(r, _) in &points {
            if r > prev {
                let best = points
                    .iter()
                    .filter(|(r2, _)| *r2 >= r)
                    .map(|(_, p2)| *p2)
                    .fold(0.0, f64::max);
                ap += (r - prev) * best;
                prev = r;
            }
        }
        ap
    }

    /// Equal error rate scanned directly over the curve points.
    pub fn eer_scan(curve: &PrCurve) -> f64 {
        for p in &curve.points {
            if p.precision == p.recall {
                return p.precision;
            }
        }
        for w in curve.points.windows(2) {
            let d0 = w[0].precision - w[0].recall;
            let d1 = w[1].precision - w[1].recall;
            if (d0 > 0.0) != (d1 > 0.0) {
                let t = d0 / (d0 - d1);
                return w[0].precision + t * (w[1].precision - w[0].precision);
            }
        }
        let best = curve
            .points
            .iter()
            .min_by(|a, b| {
                (a.precision - a.recall)
                    .abs()
                    .total_cmp(&(b.precision - b.recall).abs())
            })
            .unwrap();
        (best.precision + best.recall) / 2.0
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<Annotation>) {
    let n_dets = rng.gen_range(0..=4);
    let n_anns = rng.gen_range(0..=3);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x0 = rng.gen_range(0..80) as f64;
        let y0 = rng.gen_range(0..80) as f64;
        let w = rng.gen_range(4..16) as f64;
        let h = rng.gen_range(4..16) as f64;
        BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap()
    };
    let mut anns: Vec<Annotation> = (0..n_anns)
        .map(|track_id| Annotation {
            bbox: rand_box(rng),
            occluded: rng.gen::<f64>() < 0.3,
            track_id,
        })
        .collect();
    // keep at least one countable positive so the PR curve is defined
    if !anns.is_empty() && anns.iter().all(|a| a.occluded) {
        anns[0].occluded = false;
    }
    let dets: Vec<Detection> = (0..n_dets)
        .map(|i| {
            // half the detections sit near an annotation, half are noise
            let bbox = if !anns.is_empty() && rng.gen::<bool>() {
                let a = &anns[rng.gen_range(0..anns.len())].bbox;
                let dx = rng.gen_range(-4..=4) as f64;
                let dy = rng.gen_range(-4..=4) as f64;
                BoundingBox::new(
                    (a.x_min + dx).max(0.0),
                    (a.y_min + dy).max(0.0),
                    (a.x_max + dx).max(1.0),
                    (a.y_max + dy).max(1.0),
                )
                .unwrap()
            } else {
                rand_box(rng)
            };
            Detection {
                bbox,
                score: rng.gen::<f64>(),
                gate: None,
                frame_index: i,
            }
        })
        .collect();
    (dets, anns)
}

#[test]
fn ac4_metric_oracles_agree_with_brute_force_references() {
    let start = Instant::now();

    // (a) the hand-built five-detection instance
    let hand = vec![
        (0.95, Outcome::TruePositive),
        (0.90, Outcome::FalsePositive),
        (0.80, Outcome::TruePositive),
        (0.60, Outcome::FalsePositive),
        (0.40, Outcome::TruePositive),
    ];
    let curve = pr_curve(&hand, 3).unwrap();
    let ap = average_precision(&curve);
    let ap_ref = reference::ap_exhaustive(&hand, 3);
    assert!(
        (ap - ap_ref).abs() <= 1e-12,
        "AC-4 FAIL: hand-instance AP {ap} vs reference {ap_ref}"
    );
    let eer = equal_error_rate(&curve).value;
    let eer_ref = reference::eer_scan(&curve);
    assert!((eer - eer_ref).abs() <= 1e-12, "AC-4 FAIL: hand-instance EER");

    // (b) 1,000 random small instances
    let mut rng = rng_from(4242);
    let mut checked_curves = 0;
    for trial in 0..1000 {
        let (dets, anns) = random_instance(&mut rng);
        let thr = if trial % 2 == 0 { 0.4 } else { 0.6 };

        // IoU against the cell-counting oracle on every pair
        for d in &dets {
            for a in &anns {
                let fast = fusedet_core::eval::iou(&d.bbox, &a.bbox);
                let slow = reference::iou_by_cells(&d.bbox, &a.bbox);
                assert!(
                    (fast - slow).abs() <= 1e-12,
                    "AC-4 FAIL: IoU {fast} vs grid {slow} (trial {trial})"
                );
            }
        }

        // exact label agreement with the independent greedy reference
        let result = match_detections(&dets, &anns, thr);
        let ref_labels = reference::greedy_labels(&dets, &anns, thr);
        for (i, ((got, _), want)) in result.labels.iter().zip(&ref_labels).enumerate() {
            assert_eq!(
                got, want,
                "AC-4 FAIL: label mismatch at det {i}, trial {trial}"
            );
        }

        let total_positives = anns.iter().filter(|a| !a.occluded).count();
        if total_positives == 0 {
            continue;
        }
        let scored: Vec<(f64, Outcome)> = dets
            .iter()
            .zip(&result.labels)
            .map(|(d, (o, _))| (d.score, *o))
            .collect();
        let curve = pr_curve(&scored, total_positives).unwrap();
        let ap = average_precision(&curve);
        let ap_ref = reference::ap_exhaustive(&scored, total_positives);
        assert!(
            (ap - ap_ref).abs() <= 1e-12,
            "AC-4 FAIL: AP {ap} vs reference {ap_ref} (trial {trial})"
        );
        let eer = equal_error_rate(&curve).value;
        let eer_ref = reference::eer_scan(&curve);
        assert!(
            (eer - eer_ref).abs() <= 1e-12,
            "AC-4 FAIL: EER {eer} vs reference {eer_ref} (trial {trial})"
        );
        checked_curves += 1;
    }
    println!(
        "AC-4 PASS: hand instance plus 1000 random instances agree with brute-force references ({checked_curves} curves within 1e-12) in {:.1}s",
        start.elapsed().as_secs_f64()
    );
}

// =========================================================================
// AC-5: relative-ordering experiment
// =========================================================================

struct SchemeEval {
    name: &'static str,
    ap: f64,
    eer: f64,
}

fn evaluate_scheme(
    name: &'static str,
    detections: &[Vec<Detection>],
    frames: &[fusedet_core::synth::MultimodalFrame],
    iou_thr: f64,
) -> SchemeEval {
    let mut scored = Vec::new();
    let mut total_positives = 0;
    for (dets, frame) in detections.iter().zip(frames) {
        let result = match_detections(dets, &frame.annotations, iou_thr);
        for (d, (o, _)) in dets.iter().zip(&result.labels) {
            scored.push((d.score, *o));
        }
        total_positives += frame.annotations.iter().filter(|a| !a.occluded).count();
    }
    let curve = pr_curve(&scored, total_positives).unwrap();
    SchemeEval {
        name,
        ap: average_precision(&curve),
        eer: equal_error_rate(&curve).value,
    }
}

#[test]
fn ac5_relative_ordering_experiment() {
    let start = Instant::now();
    let modalities = [Modality::Rgb, Modality::Depth];

    // 2000 frames alternating rgb-hostile and depth-hostile regimes
    let script: Vec<(usize, EnvironmentRegime)> = (0..8)
        .map(|i| {
            let name = if i % 2 == 0 {
                RegimeName::DarkIndoor
            } else {
                RegimeName::BrightOutdoor
            };
            (i * 250, EnvironmentRegime::preset(name))
        })
        .collect();
    let data_seed = 11;
    let train_seed = 7;
    let frames = generate_sequence(2000, &script, (96, 96), 3, data_seed).unwrap();
    println!("AC-5: dataset generated in {:.0}s", start.elapsed().as_secs_f64());

    let [train_range, gateval_range, test_range] = fusedet_core::train::split_ranges(frames.len());
    let negatives = 6;
    let mut crop_rng = rng_from(derive_seed(train_seed, "crops-train", 0));
    let train_crops = extract_crops(
        &frames[train_range],
        &modalities,
        negatives,
        Split::Train,
        &mut crop_rng,
    )
    .unwrap();
    let mut crop_rng = rng_from(derive_seed(train_seed, "crops-gateval", 0));
    let gateval_crops = extract_crops(
        &frames[gateval_range],
        &modalities,
        negatives,
        Split::GateVal,
        &mut crop_rng,
    )
    .unwrap();

    let mut stage1_cfg = TrainConfig::stage1(train_seed);
    stage1_cfg.epochs = 2;
    let stage1 = train_experts(&train_crops, &modalities, &stage1_cfg).unwrap();
    for (m, losses) in modalities.iter().zip(&stage1.epoch_losses) {
        println!("AC-5: {m} expert losses {losses:?}");
    }
    let mut experts = stage1.experts;
    for e in experts.iter_mut() {
        e.freeze();
    }
    println!("AC-5: experts trained at {:.0}s", start.elapsed().as_secs_f64());

    let mut stage2_cfg = TrainConfig::stage2(train_seed);
    stage2_cfg.epochs = 2;

    // fusion training and the channel baseline are independent; overlap them
    let ((gate, gate_losses, late_head), (channel_net, channel_losses)) = std::thread::scope(|s| {
        let experts_ref = &experts;
        let gateval_ref = &gateval_crops;
        let train_ref = &train_crops;
        let cfg2 = stage2_cfg.clone();
        let cfg1 = stage1_cfg.clone();
        let fusion_thread = s.spawn(move || {
            let (gate, losses) = train_gate(experts_ref, gateval_ref, &cfg2).unwrap();
            let (late, _) = train_late_head(experts_ref, gateval_ref, &cfg2).unwrap();
            (gate, losses, late)
        });
        let channel_thread = s.spawn(move || {
            train_channel_net(train_ref, &[Modality::Rgb, Modality::Depth], &cfg1).unwrap()
        });
        (fusion_thread.join().unwrap(), channel_thread.join().unwrap())
    });
    println!(
        "AC-5: fusion stages trained at {:.0}s (gate losses {gate_losses:?}, channel losses {channel_losses:?})",
        start.elapsed().as_secs_f64()
    );
    drop(train_crops);

    // trained gate must beat the uniform mixture on its validation split
    let gate_loss = fusion_dataset_loss(&experts, Some(&gate), &gateval_crops).unwrap();
    let uniform_loss = fusion_dataset_loss(&experts, None, &gateval_crops).unwrap();
    assert!(
        gate_loss < uniform_loss,
        "AC-5 FAIL: trained gate loss {gate_loss} not below uniform {uniform_loss}"
    );
    drop(gateval_crops);

    // score the test split once per expert bank; every shared-feature
    // scheme reuses the same forward passes
    let test_frames = &frames[test_range.clone()];
    let proposals = generate_proposals((96, 96), &[32, 48, 64], 0.5, 0.25).unwrap();
    let heads: Vec<(&'static str, FusionHead, Vec<usize>)> = vec![
        ("mode", FusionHead::Mode(gate.clone()), vec![0, 1]),
        ("switch", FusionHead::Switch(gate.clone()), vec![0, 1]),
        ("average", FusionHead::Average, vec![0, 1]),
        ("late", FusionHead::Late(late_head), vec![0, 1]),
        ("single-rgb", FusionHead::Average, vec![0]),
        ("single-depth", FusionHead::Average, vec![1]),
    ];
    use rayon::prelude::*;
    let nms_iou = 0.3;
    let per_frame: Vec<(Vec<Vec<Detection>>, Vec<Detection>)> = test_frames
        .par_iter()
        .map(|frame| {
            let bank = score_expert_windows(&experts, frame, &proposals.boxes).unwrap();
            let per_head: Vec<Vec<Detection>> = heads
                .iter()
                .map(|(_, head, indices)| {
                    let dets =
                        apply_head(head, indices, &bank, &proposals.boxes, frame.frame_index)
                            .unwrap();
                    nms(&dets, nms_iou)
                })
                .collect();
            let channel_dets = nms(
                &score_channel_windows(
                    &channel_net,
                    &[Modality::Rgb, Modality::Depth],
                    frame,
                    &proposals.boxes,
                )
                .unwrap(),
                nms_iou,
            );
            (per_head, channel_dets)
        })
        .collect();
    println!("AC-5: test split scored at {:.0}s", start.elapsed().as_secs_f64());

    let mut results: Vec<SchemeEval> = Vec::new();
    for (h, (name, _, _)) in heads.iter().enumerate() {
        let dets: Vec<Vec<Detection>> = per_frame.iter().map(|(ph, _)| ph[h].clone()).collect();
        results.push(evaluate_scheme(name, &dets, test_frames, 0.6));
    }
    let channel_dets: Vec<Vec<Detection>> =
        per_frame.iter().map(|(_, ch)| ch.clone()).collect();
    results.push(evaluate_scheme("channel", &channel_dets, test_frames, 0.6));

    let mut table = String::from("AC-5 results (IoU 0.6):\n");
    for r in &results {
        let _ = writeln!(table, "  {:<13} AP {:.4}  EER {:.4}", r.name, r.ap, r.eer);
    }
    println!("{table}");

    let ap_of = |name: &str| results.iter().find(|r| r.name == name).unwrap().ap;
    let mode_ap = ap_of("mode");

    // (i) adaptive mixture beats each single expert by at least 5 points
    for single in ["single-rgb", "single-depth"] {
        let single_ap = ap_of(single);
        assert!(
            mode_ap >= single_ap + 0.05,
            "AC-5 FAIL (i): mode AP {mode_ap:.4} not >= {single} AP {single_ap:.4} + 0.05"
        );
    }
    // (ii) adaptive mixture at least matches averaging and switching
    for other in ["average", "switch"] {
        let other_ap = ap_of(other);
        assert!(
            mode_ap >= other_ap,
            "AC-5 FAIL (ii): mode AP {mode_ap:.4} below {other} AP {other_ap:.4}"
        );
    }

    // (iii)+(iv) gate weights track the regime on the test frames
    let mode_idx = 0;
    let mut sums: BTreeMap<RegimeName, (f64, f64, usize)> = BTreeMap::new();
    for ((per_head, _), frame) in per_frame.iter().zip(test_frames) {
        for d in &per_head[mode_idx] {
            let g = d.gate.as_ref().unwrap();
            let e = sums.entry(frame.regime).or_insert((0.0, 0.0, 0));
            e.0 += g[0];
            e.1 += g[1];
            e.2 += 1;
        }
    }
    let mean = |r: RegimeName| {
        let (rgb, depth, n) = sums[&r];
        (rgb / n as f64, depth / n as f64)
    };
    let (dark_rgb, dark_depth) = mean(RegimeName::DarkIndoor);
    let (out_rgb, out_depth) = mean(RegimeName::BrightOutdoor);
    println!(
        "AC-5 gate means: dark-indoor g_rgb={dark_rgb:.3} g_depth={dark_depth:.3}; bright-outdoor g_rgb={out_rgb:.3} g_depth={out_depth:.3}"
    );
    assert!(
        dark_depth > 0.5,
        "AC-5 FAIL (iii): mean g_depth {dark_depth:.3} not above 0.5 on dark-indoor frames"
    );
    assert!(
        out_rgb > 0.5,
        "AC-5 FAIL (iii): mean g_rgb {out_rgb:.3} not above 0.5 on bright-outdoor frames"
    );
    let regime_gap = (dark_rgb - out_rgb).abs();
    assert!(
        regime_gap > 0.15,
        "AC-5 FAIL (iv): |mean g_rgb| regime gap {regime_gap:.3} not above 0.15"
    );

    println!(
        "AC-5 PASS: mode AP {mode_ap:.4} clears both singles by 5 points, matches averaging/switching, gate tracks the regime (gap {regime_gap:.3}) in {:.0}s",
        start.elapsed().as_secs_f64()
    );
}

// =========================================================================
// AC-6: pipeline echo test
// =========================================================================

#[test]
fn ac6_ground_truth_echo_scores_perfectly() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = Config::parse_str(
        "data.frames=60\ndata.width=64\ndata.height=64\ndata.actors=2\ndata.seed=19\ndata.script=0:bright-indoor,30:blur\n",
        "ac6",
    )
    .unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&config, &data).unwrap();
    let meta = read_dataset_meta(&data).unwrap();
    let range = split_range(meta.frame_count, Split::Test);
    let mut text = format!(
        "# scheme=average experts=rgb frames={}..{} gate_columns=0\n",
        range.start, range.end
    );
    let mut echoed = 0;
    for frame in range.clone() {
        for ann in &meta.annotations[frame] {
            let _ = writeln!(
                text,
                "{frame}\t{}\t{}\t{}\t{}\t1",
                ann.bbox.x_min, ann.bbox.y_min, ann.bbox.x_max, ann.bbox.y_max
            );
            echoed += 1;
        }
    }
    assert!(echoed > 0, "test dataset must annotate the test split");
    let dets = dir.path().join("echo.tsv");
    std::fs::write(&dets, text).unwrap();
    let metrics_dir = dir.path().join("metrics");
    cmd_eval(&dets, &data, 0.6, &metrics_dir).unwrap();
    let report = read_metrics(&metrics_dir).unwrap();
    assert_eq!(report.ap, 1.0, "AC-6 FAIL: echo AP {} != 1.0", report.ap);
    assert_eq!(report.eer, 1.0, "AC-6 FAIL: echo EER {} != 1.0", report.eer);
    println!(
        "AC-6 PASS: {echoed} echoed ground-truth boxes give AP=1.0 and EER=1.0 exactly in {:.1}s",
        start.elapsed().as_secs_f64()
    );
}
