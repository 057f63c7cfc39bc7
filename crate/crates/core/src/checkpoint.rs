//! Model checkpoints.
//!
//! A checkpoint directory holds `manifest.txt` (key=value lines describing
//! the architecture) plus one MDTF tensor file per named parameter. Fused
//! models additionally record their scheme and ordered references to the
//! expert checkpoints they were trained over.

use crate::error::{Error, Result};
use crate::expert::{ExpertNet, InputKind, Modality};
use crate::fusion::{FusedModel, FusionHead, GatingNet};
use crate::tensor::{read_mdtf, write_mdtf};
use crate::Params;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const EXPERT_FORMAT: &str = "expert-checkpoint-v1";
const EXPERT_ARCH: &str = "conv16-5x5-p2/pool2/conv32-5x5-p2/pool2/conv64-3x3-p1/pool2/fc-softmax";
const FUSED_FORMAT: &str = "fused-checkpoint-v1";

fn write_manifest(dir: &Path, lines: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in lines {
        let _ = writeln!(text, "{k}={v}");
    }
    std::fs::write(dir.join("manifest.txt"), text).map_err(Error::io("writing manifest.txt"))
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("manifest.txt");
    let name = path.display().to_string();
    let text = std::fs::read_to_string(&path).map_err(Error::io(format!("reading {name}")))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: name.clone(),
            offset: (i + 1) as u64,
            message: format!("expected key=value, got `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn manifest_get<'a>(map: &'a BTreeMap<String, String>, key: &str, dir: &Path) -> Result<&'a str> {
    map.get(key).map(String::as_str).ok_or_else(|| Error::Parse {
        file: dir.join("manifest.txt").display().to_string(),
        offset: 0,
        message: format!("missing manifest key `{key}`"),
    })
}

fn save_params(params: &Params, dir: &Path) -> Result<()> {
    for (name, entry) in params.iter() {
        write_mdtf(&entry.tensor, &dir.join(format!("{name}.mdtf")))?;
    }
    Ok(())
}

fn load_params(dir: &Path, names: &str) -> Result<Params> {
    let mut params = Params::new();
    if names.is_empty() {
        return Ok(params);
    }
    for name in names.split(',') {
        let tensor = read_mdtf(&dir.join(format!("{name}.mdtf")))?;
        params.insert(name, tensor, false)?;
    }
    Ok(params)
}

fn param_list(params: &Params) -> String {
    params.names().cloned().collect::<Vec<_>>().join(",")
}

/// Writes an expert checkpoint under `dir` (created if missing).
pub fn save_expert(net: &ExpertNet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io("creating checkpoint dir"))?;
    let (c, h, w) = net.input_size;
    let (fh, fw) = (net.feature_shape.1, net.feature_shape.2);
    write_manifest(
        dir,
        &[
            ("format", EXPERT_FORMAT.to_string()),
            ("arch", EXPERT_ARCH.to_string()),
            ("input", net.input.label()),
            ("channels", c.to_string()),
            ("height", h.to_string()),
            ("width", w.to_string()),
            ("classes", net.class_count.to_string()),
            ("feature", format!("{}x{fh}x{fw}", net.feature_shape.0)),
            ("dropout", net.dropout_rate.to_string()),
            ("seed", net.init_seed.to_string()),
            ("params", param_list(&net.params)),
        ],
    )?;
    save_params(&net.params, dir)
}

/// Loads an expert checkpoint; parameters come back non-trainable.
pub fn load_expert(dir: &Path) -> Result<ExpertNet> {
    let map = read_manifest(dir)?;
    let bad = |message: String| Error::Parse {
        file: dir.join("manifest.txt").display().to_string(),
        offset: 0,
        message,
    };
    if manifest_get(&map, "format", dir)? != EXPERT_FORMAT {
        return Err(bad(format!(
            "expected {EXPERT_FORMAT}, got {}",
            map["format"]
        )));
    }
    if manifest_get(&map, "arch", dir)? != EXPERT_ARCH {
        return Err(bad(format!("unsupported architecture {}", map["arch"])));
    }
    let input = InputKind::from_label(manifest_get(&map, "input", dir)?)?;
    let parse_usize = |key: &str| -> Result<usize> {
        manifest_get(&map, key, dir)?
            .parse()
            .map_err(|_| bad(format!("bad integer for `{key}`")))
    };
    let channels = parse_usize("channels")?;
    let height = parse_usize("height")?;
    let width = parse_usize("width")?;
    let classes = parse_usize("classes")?;
    let dropout: f64 = manifest_get(&map, "dropout", dir)?
        .parse()
        .map_err(|_| bad("bad dropout rate".into()))?;
    let seed: u64 = manifest_get(&map, "seed", dir)?
        .parse()
        .map_err(|_| bad("bad seed".into()))?;
    if channels != input.channel_count() {
        return Err(bad(format!(
            "input `{}` implies {} channels, manifest says {channels}",
            input.label(),
            input.channel_count()
        )));
    }
    let params = load_params(dir, manifest_get(&map, "params", dir)?)?;
    let net = ExpertNet {
        input,
        input_size: (channels, height, width),
        class_count: classes,
        feature_shape: (64, height / 8, width / 8),
        dropout_rate: dropout,
        init_seed: seed,
        params,
    };
    validate_expert_shapes(&net, dir)?;
    let feature = format!(
        "{}x{}x{}",
        net.feature_shape.0, net.feature_shape.1, net.feature_shape.2
    );
    if manifest_get(&map, "feature", dir)? != feature {
        return Err(bad(format!(
            "manifest feature shape {} disagrees with architecture {feature}",
            map["feature"]
        )));
    }
    Ok(net)
}

fn validate_expert_shapes(net: &ExpertNet, dir: &Path) -> Result<()> {
    let (c, h, w) = net.input_size;
    let feat_len = net.feature_len();
    let expected: [(&str, Vec<usize>); 8] = [
        ("conv1.weight", vec![16, c, 5, 5]),
        ("conv1.bias", vec![16]),
        ("conv2.weight", vec![32, 16, 5, 5]),
        ("conv2.bias", vec![32]),
        ("conv3.weight", vec![64, 32, 3, 3]),
        ("conv3.bias", vec![64]),
        ("head.weight", vec![feat_len, net.class_count]),
        ("head.bias", vec![net.class_count]),
    ];
    let _ = (h, w);
    if net.params.len() != expected.len() {
        return Err(Error::Parse {
            file: dir.display().to_string(),
            offset: 0,
            message: format!(
                "checkpoint has {} parameters, expected {}",
                net.params.len(),
                expected.len()
            ),
        });
    }
    for (name, shape) in expected {
        let t = net.params.tensor(name)?;
        if t.shape() != shape {
            return Err(Error::Parse {
                file: dir.display().to_string(),
                offset: 0,
                message: format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                ),
            });
        }
    }
    Ok(())
}

fn modality_list(ms: &[Modality]) -> String {
    ms.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
}

/// Writes a fused-model checkpoint. `expert_refs` are the paths (relative
/// to `dir`) of the expert checkpoints, in expert order; the channel
/// scheme instead embeds its network under `dir/net`.
pub fn save_fused(model: &FusedModel, dir: &Path, expert_refs: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io("creating checkpoint dir"))?;
    let mut lines: Vec<(&str, String)> = vec![
        ("format", FUSED_FORMAT.to_string()),
        ("scheme", model.scheme().name().to_string()),
        ("experts", expert_refs.join(",")),
    ];
    let mut hashes = Vec::new();
    for r in expert_refs {
        hashes.push(dir_hash(&dir.join(r))?);
    }
    lines.push(("expert_hashes", hashes.join(",")));
    match &model.head {
        FusionHead::Average => {
            if expert_refs.len() != model.experts.len() {
                return Err(Error::Input(format!(
                    "{} expert refs for {} experts",
                    expert_refs.len(),
                    model.experts.len()
                )));
            }
            lines.push(("params", String::new()));
            write_manifest(dir, &lines)
        }
        FusionHead::Mode(gate) | FusionHead::Switch(gate) => {
            if expert_refs.len() != model.experts.len() {
                return Err(Error::Input(format!(
                    "{} expert refs for {} experts",
                    expert_refs.len(),
                    model.experts.len()
                )));
            }
            lines.push(("params", param_list(&gate.params)));
            write_manifest(dir, &lines)?;
            save_params(&gate.params, dir)
        }
        FusionHead::Late(params) => {
            if expert_refs.len() != model.experts.len() {
                return Err(Error::Input(format!(
                    "{} expert refs for {} experts",
                    expert_refs.len(),
                    model.experts.len()
                )));
            }
            lines.push(("params", param_list(params)));
            write_manifest(dir, &lines)?;
            save_params(params, dir)
        }
        FusionHead::Channel { net, order } => {
            lines.push(("channel_order", modality_list(order)));
            lines.push(("params", String::new()));
            write_manifest(dir, &lines)?;
            save_expert(net, &dir.join("net"))
        }
    }
}

/// Loads a fused model, resolving expert references relative to `dir`.
pub fn load_fused(dir: &Path) -> Result<FusedModel> {
    let map = read_manifest(dir)?;
    let bad = |message: String| Error::Parse {
        file: dir.join("manifest.txt").display().to_string(),
        offset: 0,
        message,
    };
    if manifest_get(&map, "format", dir)? != FUSED_FORMAT {
        return Err(bad(format!("expected {FUSED_FORMAT}, got {}", map["format"])));
    }
    let scheme = crate::fusion::Scheme::from_name(manifest_get(&map, "scheme", dir)?)?;
    let refs = manifest_get(&map, "experts", dir)?;
    let mut experts = Vec::new();
    if !refs.is_empty() {
        for r in refs.split(',') {
            experts.push(load_expert(&dir.join(r))?);
        }
    }
    let head = match scheme {
        crate::fusion::Scheme::Average => FusionHead::Average,
        crate::fusion::Scheme::Mode | crate::fusion::Scheme::Switch => {
            let params = load_params(dir, manifest_get(&map, "params", dir)?)?;
            let w1 = params.tensor("gate.w1")?;
            let w2 = params.tensor("gate.w2")?;
            let gate = GatingNet {
                input_dim: w1.shape()[0],
                expert_count: w2.shape()[1],
                params,
            };
            if scheme == crate::fusion::Scheme::Mode {
                FusionHead::Mode(gate)
            } else {
                FusionHead::Switch(gate)
            }
        }
        crate::fusion::Scheme::Late => {
            let params = load_params(dir, manifest_get(&map, "params", dir)?)?;
            FusionHead::Late(params)
        }
        crate::fusion::Scheme::Channel => {
            let order = manifest_get(&map, "channel_order", dir)?
                .split(',')
                .map(Modality::from_name)
                .collect::<Result<Vec<_>>>()?;
            let net = load_expert(&dir.join("net"))?;
            FusionHead::Channel { net, order }
        }
    };
    FusedModel::new(experts, head)
}

/// SHA-256 over the directory's files: sorted relative paths, each hashed
/// as `path\0length\0bytes`. Stable across machines for identical content.
pub fn dir_hash(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        let abs = dir.join(rel);
        let bytes = std::fs::read(&abs).map_err(Error::io(format!("reading {}", abs.display())))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update([0u8]);
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries =
        std::fs::read_dir(dir).map_err(Error::io(format!("listing {}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(Error::io("reading dir entry"))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("entry under root")
                .to_path_buf();
            out.push(rel);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::build_expert;
    use crate::rng::rng_from;

    #[test]
    fn expert_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from(5);
        let net = build_expert(Modality::Depth, (3, 32, 32), 2, &mut rng).unwrap();
        save_expert(&net, dir.path()).unwrap();
        let back = load_expert(dir.path()).unwrap();
        assert_eq!(back.input, net.input);
        assert_eq!(back.input_size, net.input_size);
        assert_eq!(back.feature_shape, net.feature_shape);
        for (name, e) in net.params.iter() {
            assert_eq!(e.tensor.data(), back.params.tensor(name).unwrap().data());
        }
        assert!(!back.params.any_trainable());
    }

    #[test]
    fn fused_checkpoint_round_trips_every_scheme() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from(6);
        let rgb = build_expert(Modality::Rgb, (3, 32, 32), 2, &mut rng).unwrap();
        let depth = build_expert(Modality::Depth, (3, 32, 32), 2, &mut rng).unwrap();
        save_expert(&rgb, &dir.path().join("experts/rgb")).unwrap();
        save_expert(&depth, &dir.path().join("experts/depth")).unwrap();
        let refs = vec![
            "../experts/rgb".to_string(),
            "../experts/depth".to_string(),
        ];

        let gate = GatingNet::new(2048, 2, &mut rng).unwrap();
        let mode = FusedModel::new(
            vec![rgb.clone(), depth.clone()],
            FusionHead::Mode(gate.clone()),
        )
        .unwrap();
        let mode_dir = dir.path().join("fused-mode");
        save_fused(&mode, &mode_dir, &refs).unwrap();
        let back = load_fused(&mode_dir).unwrap();
        assert_eq!(back.scheme(), crate::fusion::Scheme::Mode);
        assert_eq!(back.experts.len(), 2);
        match &back.head {
            FusionHead::Mode(g) => {
                assert_eq!(g.input_dim, 2048);
                assert_eq!(
                    g.params.tensor("gate.w1").unwrap().data(),
                    gate.params.tensor("gate.w1").unwrap().data()
                );
            }
            other => panic!("wrong head {other:?}"),
        }

        let avg = FusedModel::new(vec![rgb.clone(), depth.clone()], FusionHead::Average).unwrap();
        let avg_dir = dir.path().join("fused-average");
        save_fused(&avg, &avg_dir, &refs).unwrap();
        assert_eq!(
            load_fused(&avg_dir).unwrap().scheme(),
            crate::fusion::Scheme::Average
        );

        let net = crate::expert::build_stacked_net(
            &[Modality::Rgb, Modality::Depth],
            32,
            32,
            2,
            &mut rng,
        )
        .unwrap();
        let channel = FusedModel::new(
            vec![],
            FusionHead::Channel {
                net,
                order: vec![Modality::Rgb, Modality::Depth],
            },
        )
        .unwrap();
        let ch_dir = dir.path().join("fused-channel");
        save_fused(&channel, &ch_dir, &[]).unwrap();
        let back = load_fused(&ch_dir).unwrap();
        assert_eq!(back.scheme(), crate::fusion::Scheme::Channel);
    }

    #[test]
    fn dir_hash_is_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from(7);
        let net = build_expert(Modality::Rgb, (3, 32, 32), 2, &mut rng).unwrap();
        save_expert(&net, dir.path()).unwrap();
        let a = dir_hash(dir.path()).unwrap();
        let b = dir_hash(dir.path()).unwrap();
        assert_eq!(a, b);
        // flip one byte
        let victim = dir.path().join("conv1.bias.mdtf");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&victim, bytes).unwrap();
        assert_ne!(dir_hash(dir.path()).unwrap(), a);
    }
}
