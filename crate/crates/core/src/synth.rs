//! Deterministic generator of aligned multimodal frame sequences.
//!
//! Scenes are textured rectangle-and-ellipse "people" moving on linear
//! tracks over a textured background, rendered into rgb, depth (meters,
//! 0 = invalid) and a frame-difference motion channel. A scripted
//! environment regime corrupts each modality per frame: lighting and blur
//! hit rgb, range limits, pixel dropout and speckle hit depth.

use crate::detect::BoundingBox;
use crate::error::{Error, Result};
use crate::img::box_blur;
use crate::rng::{derive_seed, next_gaussian, rng_from};
use crate::tensor::{read_mdtf, write_mdtf, Tensor as GenTensor};
use crate::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

/// Pairwise overlap fraction above which the farther actor is occluded.
pub const OCCLUSION_OVERLAP: f64 = 0.4;

const ACTOR_MIN_H: usize = 32;
const ACTOR_MAX_H: usize = 56;
const ACTOR_DEPTH_RANGE_M: (f64, f64) = (1.8, 6.5);
const BACKGROUND_DEPTH_M: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RegimeName {
    BrightIndoor,
    DarkIndoor,
    BrightOutdoor,
    Blur,
}

impl RegimeName {
    pub const ALL: [RegimeName; 4] = [
        RegimeName::BrightIndoor,
        RegimeName::DarkIndoor,
        RegimeName::BrightOutdoor,
        RegimeName::Blur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeName::BrightIndoor => "bright-indoor",
            RegimeName::DarkIndoor => "dark-indoor",
            RegimeName::BrightOutdoor => "bright-outdoor",
            RegimeName::Blur => "blur",
        }
    }

    pub fn from_name(name: &str) -> Result<RegimeName> {
        RegimeName::ALL
            .iter()
            .copied()
            .find(|r| r.name() == name)
            .ok_or_else(|| Error::Input(format!("unknown regime `{name}`")))
    }
}

impl std::fmt::Display for RegimeName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// rgb corruption: `clip(brightness·(contrast·(v−0.5)+0.5) + N(0,σ))`,
/// then box blur.
#[derive(Debug, Clone, Copy)]
pub struct RgbNoise {
    pub brightness: f64,
    pub contrast: f64,
    pub sigma: f64,
    pub blur: usize,
}

/// depth corruption: dropout to 0, 0 beyond the reliable range, speckle.
#[derive(Debug, Clone, Copy)]
pub struct DepthNoise {
    pub dropout: f64,
    pub max_range_m: f64,
    pub speckle: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EnvironmentRegime {
    pub name: RegimeName,
    pub rgb_noise: RgbNoise,
    pub depth_noise: DepthNoise,
}

impl EnvironmentRegime {
    pub fn new(name: RegimeName, rgb_noise: RgbNoise, depth_noise: DepthNoise) -> Result<Self> {
        if !(0.0..=1.0).contains(&depth_noise.dropout) {
            return Err(Error::Parameter(format!(
                "depth dropout {} outside [0,1]",
                depth_noise.dropout
            )));
        }
        for (what, v) in [
            ("brightness", rgb_noise.brightness),
            ("contrast", rgb_noise.contrast),
            ("max depth range", depth_noise.max_range_m),
        ] {
            if !(v > 0.0) {
                return Err(Error::Parameter(format!("{what} must be positive, got {v}")));
            }
        }
        if rgb_noise.sigma < 0.0 || depth_noise.speckle < 0.0 {
            return Err(Error::Parameter("noise sigmas must be non-negative".into()));
        }
        Ok(EnvironmentRegime {
            name,
            rgb_noise,
            depth_noise,
        })
    }

    /// Canonical parameter table. Dark hurts rgb; the outdoor range limit
    /// and dropout hurt depth; blur hurts both mildly.
    pub fn preset(name: RegimeName) -> EnvironmentRegime {
        let (rgb, depth) = match name {
            RegimeName::BrightIndoor => (
                RgbNoise {
                    brightness: 1.0,
                    contrast: 1.0,
                    sigma: 0.02,
                    blur: 1,
                },
                DepthNoise {
                    dropout: 0.02,
                    max_range_m: 9.0,
                    speckle: 0.03,
                },
            ),
            RegimeName::DarkIndoor => (
                RgbNoise {
                    brightness: 0.08,
                    contrast: 0.7,
                    sigma: 0.04,
                    blur: 1,
                },
                DepthNoise {
                    dropout: 0.02,
                    max_range_m: 9.0,
                    speckle: 0.03,
                },
            ),
            RegimeName::BrightOutdoor => (
                RgbNoise {
                    brightness: 1.25,
                    contrast: 1.1,
                    sigma: 0.02,
                    blur: 1,
                },
                DepthNoise {
                    dropout: 0.25,
                    max_range_m: 4.0,
                    speckle: 0.10,
                },
            ),
            RegimeName::Blur => (
                RgbNoise {
                    brightness: 0.9,
                    contrast: 0.9,
                    sigma: 0.03,
                    blur: 5,
                },
                DepthNoise {
                    dropout: 0.10,
                    max_range_m: 7.0,
                    speckle: 0.06,
                },
            ),
        };
        EnvironmentRegime {
            name,
            rgb_noise: rgb,
            depth_noise: depth,
        }
    }

    /// A regime that changes nothing; useful for clean-scene tests.
    pub fn identity(name: RegimeName) -> EnvironmentRegime {
        EnvironmentRegime {
            name,
            rgb_noise: RgbNoise {
                brightness: 1.0,
                contrast: 1.0,
                sigma: 0.0,
                blur: 1,
            },
            depth_noise: DepthNoise {
                dropout: 0.0,
                max_range_m: f64::INFINITY,
                speckle: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub occluded: bool,
    pub track_id: usize,
}

/// Aligned per-modality images plus ground truth and the regime label
/// that generated them.
#[derive(Debug, Clone)]
pub struct MultimodalFrame {
    /// `[3,H,W]` in `[0,1]`.
    pub rgb: Tensor,
    /// `[1,H,W]` meters; 0 encodes an invalid reading.
    pub depth: Tensor,
    /// `[1,H,W]` frame-difference magnitude in `[0,1]`.
    pub motion: Tensor,
    pub annotations: Vec<Annotation>,
    pub regime: RegimeName,
    pub frame_index: usize,
}

impl MultimodalFrame {
    pub fn size(&self) -> (usize, usize) {
        (self.rgb.shape()[1], self.rgb.shape()[2])
    }
}

struct Actor {
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    w: usize,
    h: usize,
    depth: f64,
    color: [f64; 3],
    stripe: usize,
}

impl Actor {
    /// Top-left corner at frame `t`, reflecting off the frame borders.
    fn position(&self, t: usize, frame_w: usize, frame_h: usize) -> (usize, usize) {
        let x = reflect(self.x0 + self.vx * t as f64, (frame_w - self.w) as f64);
        let y = reflect(self.y0 + self.vy * t as f64, (frame_h - self.h) as f64);
        (x.round() as usize, y.round() as usize)
    }
}

fn reflect(p: f64, hi: f64) -> f64 {
    if hi <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * hi;
    let q = p.rem_euclid(period);
    if q <= hi {
        q
    } else {
        period - q
    }
}

/// Mean absolute channel difference of two aligned images, one channel out.
pub fn motion_channel(prev_rgb: &Tensor, cur_rgb: &Tensor) -> Result<Tensor> {
    if prev_rgb.shape() != cur_rgb.shape() {
        return Err(Error::Dimension(format!(
            "motion inputs disagree: {:?} vs {:?}",
            prev_rgb.shape(),
            cur_rgb.shape()
        )));
    }
    let (c, h, w) = match *cur_rgb.shape() {
        [c, h, w] => (c, h, w),
        ref other => {
            return Err(Error::Dimension(format!(
                "motion input must be [C,H,W], got {other:?}"
            )))
        }
    };
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ci in 0..c {
        for i in 0..plane {
            out[i] += (cur_rgb.data()[ci * plane + i] - prev_rgb.data()[ci * plane + i]).abs();
        }
    }
    let scale = 1.0 / c as f64;
    for v in out.iter_mut() {
        *v = (*v * scale).clamp(0.0, 1.0);
    }
    Ok(GenTensor::new(vec![1, h, w], out)?)
}

/// Applies a regime to a clean frame: rgb brightness/contrast/noise/blur,
/// depth dropout/range-limit/speckle; the motion channel is recomputed
/// from the corrupted rgb pair (zeros when `prev_rgb` is absent).
/// Annotations are unchanged.
pub fn corrupt_modality(
    frame: &MultimodalFrame,
    regime: &EnvironmentRegime,
    rng: &mut ChaCha8Rng,
    prev_rgb: Option<&Tensor>,
) -> Result<MultimodalFrame> {
    let n = &regime.rgb_noise;
    let rgb_data: Vec<f64> = frame
        .rgb
        .data()
        .iter()
        .map(|&v| {
            let base = n.brightness * (n.contrast * (v - 0.5) + 0.5);
            let noisy = if n.sigma > 0.0 {
                base + next_gaussian(rng) * n.sigma
            } else {
                base
            };
            noisy.clamp(0.0, 1.0)
        })
        .collect();
    let rgb = box_blur(
        &GenTensor::new(frame.rgb.shape().to_vec(), rgb_data)?,
        n.blur,
    )?;

    let d = &regime.depth_noise;
    let depth_data: Vec<f64> = frame
        .depth
        .data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                return 0.0; // already invalid
            }
            if d.dropout > 0.0 && rng.gen::<f64>() < d.dropout {
                return 0.0;
            }
            if v > d.max_range_m {
                return 0.0;
            }
            if d.speckle > 0.0 {
                (v + next_gaussian(rng) * d.speckle).max(0.01)
            } else {
                v
            }
        })
        .collect();
    let depth = GenTensor::new(frame.depth.shape().to_vec(), depth_data)?;

    let motion = match prev_rgb {
        Some(prev) => motion_channel(prev, &rgb)?,
        None => GenTensor::zeros(frame.motion.shape().to_vec()),
    };

    Ok(MultimodalFrame {
        rgb,
        depth,
        motion,
        annotations: frame.annotations.clone(),
        regime: regime.name,
        frame_index: frame.frame_index,
    })
}

/// Active regime at frame `t` under a validated script.
pub fn regime_at<'a>(
    script: &'a [(usize, EnvironmentRegime)],
    t: usize,
) -> &'a EnvironmentRegime {
    let mut active = &script[0].1;
    for (start, regime) in script {
        if *start <= t {
            active = regime;
        } else {
            break;
        }
    }
    active
}

fn validate_script(script: &[(usize, EnvironmentRegime)], frame_count: usize) -> Result<()> {
    if script.is_empty() {
        return Err(Error::Config("regime script is empty".into()));
    }
    if script[0].0 != 0 {
        return Err(Error::Config(format!(
            "regime script must start at frame 0, got {}",
            script[0].0
        )));
    }
    for pair in script.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::Config(format!(
                "regime script starts must strictly increase ({} then {})",
                pair[0].0, pair[1].0
            )));
        }
    }
    if let Some((start, _)) = script.iter().find(|(s, _)| *s >= frame_count) {
        return Err(Error::Config(format!(
            "regime script start {start} beyond frame count {frame_count}"
        )));
    }
    Ok(())
}

/// Renders a deterministic sequence: textured background, `actor_count`
/// moving actors, per-frame regime corruption, annotations with occlusion
/// flags (pairwise overlap above [`OCCLUSION_OVERLAP`] marks the farther
/// actor), and a motion channel from consecutive corrupted rgb frames.
pub fn generate_sequence(
    frame_count: usize,
    script: &[(usize, EnvironmentRegime)],
    size: (usize, usize),
    actor_count: usize,
    seed: u64,
) -> Result<Vec<MultimodalFrame>> {
    let (height, width) = size;
    validate_script(script, frame_count)?;
    if height < 16 || width < 16 {
        return Err(Error::Config(format!(
            "frame size {height}x{width} too small"
        )));
    }
    if actor_count > 0 && (height < ACTOR_MIN_H || width < ACTOR_MIN_H / 2) {
        return Err(Error::Config(format!(
            "actors of minimum height {ACTOR_MIN_H} do not fit a {height}x{width} frame"
        )));
    }

    let (bg_rgb, bg_depth) = render_background(height, width, seed);
    let actors = spawn_actors(actor_count, height, width, seed)?;

    let mut frames = Vec::with_capacity(frame_count);
    let mut prev_rgb: Option<Tensor> = None;
    for t in 0..frame_count {
        let clean = render_clean_frame(t, &bg_rgb, &bg_depth, &actors, height, width)?;
        let regime = regime_at(script, t);
        let mut rng = rng_from(derive_seed(seed, "corrupt", t as u64));
        let corrupted = corrupt_modality(&clean, regime, &mut rng, prev_rgb.as_ref())?;
        prev_rgb = Some(corrupted.rgb.clone());
        frames.push(corrupted);
    }
    Ok(frames)
}

fn render_background(height: usize, width: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = rng_from(derive_seed(seed, "background", 0));
    let plane = height * width;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    for y in 0..height {
        for x in 0..width {
            let checker = if (x / 12 + y / 12) % 2 == 0 { 0.05 } else { -0.05 };
            let v: f64 = 0.42 + checker + rng.gen_range(-0.04..0.04);
            let i = y * width + x;
            rgb[i] = (v + 0.03).clamp(0.0, 1.0);
            rgb[plane + i] = v.clamp(0.0, 1.0);
            rgb[2 * plane + i] = (v - 0.03).clamp(0.0, 1.0);
            depth[i] = BACKGROUND_DEPTH_M + rng.gen_range(-0.15..0.15);
        }
    }
    (
        GenTensor::from_raw(vec![3, height, width], rgb),
        GenTensor::from_raw(vec![1, height, width], depth),
    )
}

fn spawn_actors(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Actor>> {
    let mut rng = rng_from(derive_seed(seed, "actors", 0));
    let mut actors = Vec::with_capacity(count);
    for _ in 0..count {
        let max_h = ACTOR_MAX_H.min(height).min(width * 2);
        if max_h < ACTOR_MIN_H {
            return Err(Error::Config(format!(
                "actor of height {ACTOR_MIN_H} larger than frame {height}x{width}"
            )));
        }
        let h = rng.gen_range(ACTOR_MIN_H..=max_h);
        let w = (h / 2).max(1);
        let mut vx: f64;
        let mut vy: f64;
        loop {
            vx = rng.gen_range(-1.5..1.5);
            vy = rng.gen_range(-1.5..1.5);
            if vx.abs() + vy.abs() > 0.4 {
                break;
            }
        }
        let mut spawn = |span: usize| -> f64 {
            if span == 0 {
                0.0
            } else {
                rng.gen_range(0.0..span as f64)
            }
        };
        actors.push(Actor {
            x0: spawn(width - w),
            y0: spawn(height - h),
            vx,
            vy,
            w,
            h,
            depth: rng.gen_range(ACTOR_DEPTH_RANGE_M.0..ACTOR_DEPTH_RANGE_M.1),
            color: [
                rng.gen_range(0.55..0.95),
                rng.gen_range(0.15..0.75),
                rng.gen_range(0.05..0.55),
            ],
            stripe: rng.gen_range(3..8),
        });
    }
    Ok(actors)
}

fn render_clean_frame(
    t: usize,
    bg_rgb: &Tensor,
    bg_depth: &Tensor,
    actors: &[Actor],
    height: usize,
    width: usize,
) -> Result<MultimodalFrame> {
    let plane = height * width;
    let mut rgb = bg_rgb.data().to_vec();
    let mut depth = bg_depth.data().to_vec();

    // far-to-near painter's order
    let mut order: Vec<usize> = (0..actors.len()).collect();
    order.sort_by(|&a, &b| actors[b].depth.total_cmp(&actors[a].depth));

    let mut boxes: Vec<(usize, BoundingBox)> = Vec::with_capacity(actors.len());
    for &ai in &order {
        let actor = &actors[ai];
        let (x, y) = actor.position(t, width, height);
        let body_top = y + actor.h / 4;
        let head_cx = x as f64 + actor.w as f64 / 2.0;
        let head_cy = y as f64 + actor.h as f64 / 8.0;
        let head_rx = (actor.w as f64 / 4.0).max(1.0);
        let head_ry = (actor.h as f64 / 8.0).max(1.0);
        for py in y..(y + actor.h).min(height) {
            for px in x..(x + actor.w).min(width) {
                let in_body = py >= body_top;
                let in_head = {
                    let dx = (px as f64 + 0.5 - head_cx) / head_rx;
                    let dy = (py as f64 + 0.5 - head_cy) / head_ry;
                    dx * dx + dy * dy <= 1.0
                };
                if !(in_body || in_head) {
                    continue;
                }
                let factor = if (py / actor.stripe) % 2 == 0 { 1.0 } else { 0.72 };
                let i = py * width + px;
                for c in 0..3 {
                    rgb[c * plane + i] = (actor.color[c] * factor).clamp(0.0, 1.0);
                }
                depth[i] = actor.depth;
            }
        }
        boxes.push((
            ai,
            BoundingBox::new(
                x as f64,
                y as f64,
                (x + actor.w) as f64,
                (y + actor.h) as f64,
            )?,
        ));
    }

    boxes.sort_by_key(|(ai, _)| *ai);
    let mut annotations = Vec::with_capacity(boxes.len());
    for (ai, bbox) in &boxes {
        let mut occluded = false;
        for (aj, other) in &boxes {
            if ai == aj || actors[*aj].depth >= actors[*ai].depth {
                continue; // only nearer actors can cover this one
            }
            let inter = bbox.intersection_area(other);
            if inter / bbox.area() > OCCLUSION_OVERLAP {
                occluded = true;
                break;
            }
        }
        annotations.push(Annotation {
            bbox: *bbox,
            occluded,
            track_id: *ai,
        });
    }

    Ok(MultimodalFrame {
        rgb: GenTensor::from_raw(vec![3, height, width], rgb),
        depth: GenTensor::from_raw(vec![1, height, width], depth),
        motion: GenTensor::zeros(vec![1, height, width]),
        annotations,
        regime: RegimeName::BrightIndoor,
        frame_index: t,
    })
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

/// Sidecar data of a written dataset: everything except the tensors.
#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub seed: u64,
    pub script: Vec<(usize, RegimeName)>,
    /// Per frame, in index order.
    pub regimes: Vec<RegimeName>,
    pub annotations: Vec<Vec<Annotation>>,
}

pub fn script_to_string(script: &[(usize, RegimeName)]) -> String {
    let mut s = String::new();
    for (i, (start, name)) in script.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{start}:{name}");
    }
    s
}

pub fn parse_script(s: &str) -> Result<Vec<(usize, RegimeName)>> {
    let mut script = Vec::new();
    for part in s.split(',') {
        let (start, name) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad script entry `{part}`, want start:regime")))?;
        let start: usize = start
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad script frame index `{start}`")))?;
        script.push((start, RegimeName::from_name(name.trim())?));
    }
    Ok(script)
}

/// Writes `frames/NNNNNN.{rgb,depth,motion}.mdtf`, `annotations.tsv`,
/// `regimes.tsv` and `meta.txt` under `dir`.
pub fn write_dataset(frames: &[MultimodalFrame], dir: &Path, seed: u64) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Input("refusing to write an empty dataset".into()));
    }
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(Error::io("creating frames dir"))?;

    let (h, w) = frames[0].size();
    let mut annotations = String::new();
    let mut regimes = String::new();
    let mut script: Vec<(usize, RegimeName)> = Vec::new();
    for frame in frames {
        let idx = frame.frame_index;
        write_mdtf(&frame.rgb, &frames_dir.join(format!("{idx:06}.rgb.mdtf")))?;
        write_mdtf(&frame.depth, &frames_dir.join(format!("{idx:06}.depth.mdtf")))?;
        write_mdtf(
            &frame.motion,
            &frames_dir.join(format!("{idx:06}.motion.mdtf")),
        )?;
        for ann in &frame.annotations {
            let _ = writeln!(
                annotations,
                "{idx}\t{}\t{}\t{}\t{}\t{}\t{}",
                ann.track_id,
                ann.bbox.x_min,
                ann.bbox.y_min,
                ann.bbox.x_max,
                ann.bbox.y_max,
                u8::from(ann.occluded)
            );
        }
        let _ = writeln!(regimes, "{idx}\t{}", frame.regime);
        if script.last().map(|(_, r)| *r) != Some(frame.regime) {
            script.push((idx, frame.regime));
        }
    }
    std::fs::write(dir.join("annotations.tsv"), annotations)
        .map_err(Error::io("writing annotations.tsv"))?;
    std::fs::write(dir.join("regimes.tsv"), regimes).map_err(Error::io("writing regimes.tsv"))?;
    let meta = format!(
        "width={w}\nheight={h}\nframes={}\nseed={seed}\nscript={}\n",
        frames.len(),
        script_to_string(&script)
    );
    std::fs::write(dir.join("meta.txt"), meta).map_err(Error::io("writing meta.txt"))
}

fn parse_meta_line(line: &str, lineno: usize, file: &str) -> Result<(String, String)> {
    line.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Parse {
            file: file.to_string(),
            offset: lineno as u64,
            message: format!("expected key=value, got `{line}`"),
        })
}

/// Reads everything except the per-frame tensors.
pub fn read_dataset_meta(dir: &Path) -> Result<DatasetMeta> {
    let meta_path = dir.join("meta.txt");
    let meta_name = meta_path.display().to_string();
    let text = std::fs::read_to_string(&meta_path).map_err(Error::io("reading meta.txt"))?;
    let mut width = None;
    let mut height = None;
    let mut frame_count = None;
    let mut seed = None;
    let mut script = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = parse_meta_line(line, i + 1, &meta_name)?;
        match k.as_str() {
            "width" => width = v.parse().ok(),
            "height" => height = v.parse().ok(),
            "frames" => frame_count = v.parse().ok(),
            "seed" => seed = v.parse().ok(),
            "script" => script = Some(parse_script(&v)?),
            other => {
                return Err(Error::Parse {
                    file: meta_name,
                    offset: (i + 1) as u64,
                    message: format!("unknown meta key `{other}`"),
                })
            }
        }
    }
    let (width, height, frame_count, seed, script) =
        match (width, height, frame_count, seed, script) {
            (Some(w), Some(h), Some(f), Some(s), Some(sc)) => (w, h, f, s, sc),
            _ => {
                return Err(Error::Parse {
                    file: meta_name,
                    offset: 0,
                    message: "meta.txt missing one of width/height/frames/seed/script".into(),
                })
            }
        };

    let regimes_path = dir.join("regimes.tsv");
    let regimes_name = regimes_path.display().to_string();
    let mut regimes = vec![None; frame_count];
    let file = std::fs::File::open(&regimes_path).map_err(Error::io("reading regimes.tsv"))?;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io("reading regimes.tsv"))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let parse = |v: Option<&str>, what: &str| -> Result<String> {
            v.map(str::to_string).ok_or_else(|| Error::Parse {
                file: regimes_name.clone(),
                offset: (i + 1) as u64,
                message: format!("missing {what}"),
            })
        };
        let idx: usize = parse(cols.next(), "frame index")?
            .parse()
            .map_err(|_| Error::Parse {
                file: regimes_name.clone(),
                offset: (i + 1) as u64,
                message: "bad frame index".into(),
            })?;
        if idx >= frame_count {
            return Err(Error::Parse {
                file: regimes_name.clone(),
                offset: (i + 1) as u64,
                message: format!("frame index {idx} outside dataset of {frame_count}"),
            });
        }
        regimes[idx] = Some(RegimeName::from_name(&parse(cols.next(), "regime")?)?);
    }
    let regimes: Vec<RegimeName> = regimes
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.ok_or_else(|| Error::Parse {
                file: regimes_name.clone(),
                offset: 0,
                message: format!("frame {i} has no regime row"),
            })
        })
        .collect::<Result<_>>()?;

    let ann_path = dir.join("annotations.tsv");
    let ann_name = ann_path.display().to_string();
    let mut annotations: Vec<Vec<Annotation>> = vec![Vec::new(); frame_count];
    let file = std::fs::File::open(&ann_path).map_err(Error::io("reading annotations.tsv"))?;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io("reading annotations.tsv"))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |message: String| Error::Parse {
            file: ann_name.clone(),
            offset: (i + 1) as u64,
            message,
        };
        if cols.len() != 7 {
            return Err(bad(format!("expected 7 columns, got {}", cols.len())));
        }
        let idx: usize = cols[0].parse().map_err(|_| bad("bad frame index".into()))?;
        if idx >= frame_count {
            return Err(bad(format!("frame index {idx} outside dataset")));
        }
        let track_id: usize = cols[1].parse().map_err(|_| bad("bad track id".into()))?;
        let nums: Vec<f64> = cols[2..6]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad box coordinate".into()))?;
        let bbox = BoundingBox::new(nums[0], nums[1], nums[2], nums[3])
            .map_err(|e| bad(e.to_string()))?;
        if bbox.x_max > width as f64 || bbox.y_max > height as f64 {
            return Err(bad(format!(
                "box {bbox:?} outside {width}x{height} image bounds"
            )));
        }
        let occluded = match cols[6] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("bad occluded flag `{other}`"))),
        };
        annotations[idx].push(Annotation {
            bbox,
            occluded,
            track_id,
        });
    }

    Ok(DatasetMeta {
        width,
        height,
        frame_count,
        seed,
        script,
        regimes,
        annotations,
    })
}

/// Loads the frames of `range` (tensors included) from a dataset dir.
pub fn read_frames(
    dir: &Path,
    meta: &DatasetMeta,
    range: std::ops::Range<usize>,
) -> Result<Vec<MultimodalFrame>> {
    if range.end > meta.frame_count {
        return Err(Error::Input(format!(
            "frame range {range:?} outside dataset of {}",
            meta.frame_count
        )));
    }
    let frames_dir = dir.join("frames");
    let expect_shape = |t: &Tensor, want: &[usize], path: &Path| -> Result<()> {
        if t.shape() != want {
            return Err(Error::Parse {
                file: path.display().to_string(),
                offset: 0,
                message: format!("tensor shape {:?}, expected {want:?}", t.shape()),
            });
        }
        Ok(())
    };
    range
        .map(|idx| {
            let rgb_path = frames_dir.join(format!("{idx:06}.rgb.mdtf"));
            let depth_path = frames_dir.join(format!("{idx:06}.depth.mdtf"));
            let motion_path = frames_dir.join(format!("{idx:06}.motion.mdtf"));
            let rgb = read_mdtf(&rgb_path)?;
            let depth = read_mdtf(&depth_path)?;
            let motion = read_mdtf(&motion_path)?;
            expect_shape(&rgb, &[3, meta.height, meta.width], &rgb_path)?;
            expect_shape(&depth, &[1, meta.height, meta.width], &depth_path)?;
            expect_shape(&motion, &[1, meta.height, meta.width], &motion_path)?;
            Ok(MultimodalFrame {
                rgb,
                depth,
                motion,
                annotations: meta.annotations[idx].clone(),
                regime: meta.regimes[idx],
                frame_index: idx,
            })
        })
        .collect()
}

/// Loads a whole dataset back into memory.
pub fn read_dataset(dir: &Path) -> Result<Vec<MultimodalFrame>> {
    let meta = read_dataset_meta(dir)?;
    read_frames(dir, &meta, 0..meta.frame_count)
}
