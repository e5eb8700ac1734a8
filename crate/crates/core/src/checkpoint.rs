//! Model checkpoints.
//!
//! A checkpoint is a directory holding
//!
//! * `manifest.toml`: format tag, seed, model config, the split used for
//!   training, a SHA-256 of the run config, one [`MlpSpec`] per network, and a
//!   table locating every parameter tensor inside `params.bin`;
//! * `params.bin`: all parameters as little-endian IEEE-754 f64, row-major,
//!   in table order (`m_s`, `m_t`, `d_d`, `d_s`; within a network
//!   `w0, b0, w1, b1, ...`). The manifest also records its SHA-256.
//!
//! Loading reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::data::{SplitSpec, View};
use crate::error::{Error, Result};
use crate::nets::{
    Group, Linear, MappingNet, Mlp, MlpSpec, Model, ModelConfig, SimilarityDiscriminator, ViewDiscriminator,
};
use crate::trainer::param_names;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "xview-checkpoint/1";

/// Provenance stored next to the weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub split: SplitSpec,
    /// SHA-256 of the archived run config text.
    pub config_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: String,
    feature_dim: usize,
    params_sha256: String,
    meta: CheckpointMeta,
    model: ModelConfig,
    nets: Vec<NetEntry>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetEntry {
    group: String,
    spec: MlpSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Position of the first element, counted in f64 values.
    offset: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut nets = Vec::new();
    let mut params = Vec::new();
    for g in Group::ALL {
        let net = model.net(g);
        nets.push(NetEntry {
            group: g.name().into(),
            spec: net.spec().clone(),
        });
        for (p, name) in net.params().zip(param_names(g, net.layers().len())) {
            params.push(ParamEntry {
                name,
                shape: p.shape().to_vec(),
                offset: bytes.len() / 8,
            });
            for v in p.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        feature_dim: model.feature_dim(),
        params_sha256: sha256_hex(&bytes),
        meta: meta.clone(),
        model: model.config.clone(),
        nets,
        params,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, &bytes).map_err(|e| Error::io(&ppath, e))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let bad = |detail: String| Error::Format {
        path: mpath.clone(),
        detail,
    };
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if m.format != FORMAT {
        return Err(bad(format!("unsupported format {:?}", m.format)));
    }
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if sha256_hex(&bytes) != m.params_sha256 {
        return Err(Error::Format {
            path: ppath,
            detail: "checksum does not match the manifest".into(),
        });
    }
    if bytes.len() % 8 != 0 {
        return Err(bad(format!("{PARAMS_FILE} length {} is not a multiple of 8", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    if m.nets.len() != Group::ALL.len() {
        return Err(bad(format!("expected {} networks, found {}", Group::ALL.len(), m.nets.len())));
    }
    let mut entries = m.params.iter();
    let mut used = 0;
    let mut tensor = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let e = entries
            .next()
            .ok_or_else(|| bad(format!("parameter table ends before {name}")))?;
        if e.name != name || e.shape != shape {
            return Err(bad(format!(
                "expected {name} {shape:?}, table has {} {:?}",
                e.name, e.shape
            )));
        }
        let len: usize = shape.iter().product();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| bad(format!("{name} runs past the end of {PARAMS_FILE}")))?;
        used += len;
        Tensor::new(shape.to_vec(), data.to_vec())
    };
    let mut nets = Vec::new();
    for (g, entry) in Group::ALL.iter().zip(&m.nets) {
        if entry.group != g.name() {
            return Err(bad(format!("expected network {}, found {}", g.name(), entry.group)));
        }
        let names = param_names(*g, entry.spec.layer_dims().len());
        let mut layers = Vec::new();
        for ((fi, fo), pair) in entry.spec.layer_dims().into_iter().zip(names.chunks(2)) {
            layers.push(Linear {
                weight: tensor(&pair[0], &[fi, fo])?,
                bias: tensor(&pair[1], &[fo])?,
            });
        }
        nets.push(Mlp::from_layers(entry.spec.clone(), layers)?);
    }
    if used != values.len() {
        return Err(bad(format!("{} values in {PARAMS_FILE}, table covers {used}", values.len())));
    }
    let [m_s, m_t, d_d, d_s]: [Mlp; 4] = nets.try_into().expect("four networks");
    if m_s.spec().input_dim != m.feature_dim {
        return Err(Error::dim("checkpoint feature_dim", &[m.feature_dim], &[m_s.spec().input_dim]));
    }
    Ok(Checkpoint {
        model: Model {
            config: m.model,
            source: MappingNet { view: View::Source, net: m_s },
            target: MappingNet { view: View::Target, net: m_t },
            view_disc: ViewDiscriminator { net: d_d },
            sim_disc: SimilarityDiscriminator { net: d_s },
        },
        meta: m.meta,
    })
}
