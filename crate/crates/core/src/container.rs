//! On-disk model format.
//!
//! ```text
//! "ABCM" | version: u16 LE | manifest length: u32 LE | manifest | payload
//! ```
//!
//! The manifest is UTF-8 `key = value` lines: widths, gate settings, an
//! optional keep plan, free-form `meta.*` entries, and one `tensor` line per
//! parameter (`tensor = <name> <d0,d1,..>`) in payload order. The payload is
//! the tensors' f32 values, little-endian, back to back.

use std::fs;
use std::path::Path;

use crate::abcm::{GateConfig, GateMode};
use crate::codec::{ChannelConfig, CodecModel};
use crate::error::{Error, Result};
use crate::pruner::KeepPlan;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABCM";
pub const VERSION: u16 = 1;

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("bad integer list `{v}`: {e}")))
}

/// Serialize with extra `meta.<key>` manifest lines.
pub fn encode_model(model: &CodecModel, meta: &[(String, String)]) -> Vec<u8> {
    let cfg = model.config();
    let gate = model.gate_config();
    let mut m = String::new();
    let mut line = |k: &str, v: &str| {
        m.push_str(k);
        m.push_str(" = ");
        m.push_str(v);
        m.push('\n');
    };
    line("analysis", &join(&cfg.analysis));
    line("synthesis", &join(&cfg.synthesis));
    line("kernel", &cfg.kernel.to_string());
    line("stride", &cfg.stride.to_string());
    line("abcm", if model.has_abcm() { "true" } else { "false" });
    line("gate_mode", gate.mode.as_str());
    line("epsilon", &gate.epsilon.to_string());
    line("tau", &gate.tau.to_string());
    if let Some(plan) = &model.keep_plan {
        line("plan_analysis", &join(&plan.original().analysis));
        line("plan_synthesis", &join(&plan.original().synthesis));
        line("keep_plan", &plan.encode());
    }
    for (k, v) in meta {
        line(&format!("meta.{k}"), &v.replace('\n', " "));
    }
    let params = model.named_parameters();
    for (name, t) in &params {
        line("tensor", &format!("{name} {}", join(t.shape())));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    out.extend_from_slice(m.as_bytes());
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// A decoded model file.
#[derive(Debug)]
pub struct ModelFile {
    pub model: CodecModel,
    pub meta: Vec<(String, String)>,
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let manifest = bytes
        .get(10..10 + mlen)
        .ok_or_else(|| Error::Format("manifest runs past end of file".into()))?;
    let manifest =
        std::str::from_utf8(manifest).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let payload = &bytes[10 + mlen..];

    let mut kv: Vec<(&str, &str)> = Vec::new();
    for l in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = l
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("bad manifest line `{l}`")))?;
        kv.push((k, v));
    }
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("bad `{key}`")))
    };
    let float = |key: &str| -> Result<f32> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("bad `{key}`")))
    };
    let config = ChannelConfig {
        analysis: split(get("analysis")?)?,
        synthesis: split(get("synthesis")?)?,
        kernel: num("kernel")?,
        stride: num("stride")?,
    };
    let gate = GateConfig {
        mode: get("gate_mode")?.parse::<GateMode>()?,
        epsilon: float("epsilon")?,
        tau: float("tau")?,
    };
    let abcm = match get("abcm")? {
        "true" => true,
        "false" => false,
        other => return Err(Error::Format(format!("bad `abcm` value `{other}`"))),
    };
    let mut model = CodecModel::new(config, Some(gate), &mut RngState::new(0))?;
    if !abcm {
        model.strip_abcm();
    }
    if let Ok(text) = get("keep_plan") {
        let original = ChannelConfig {
            analysis: split(get("plan_analysis")?)?,
            synthesis: split(get("plan_synthesis")?)?,
            kernel: model.config().kernel,
            stride: model.config().stride,
        };
        let plan = KeepPlan::decode(&original, text)?;
        if plan.config() != model.config() {
            return Err(Error::Format("keep plan widths disagree with model widths".into()));
        }
        model.keep_plan = Some(plan);
    }

    let table: Vec<(&str, Vec<usize>)> = kv
        .iter()
        .filter(|(k, _)| *k == "tensor")
        .map(|(_, v)| {
            let (name, shape) = v
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad tensor entry `{v}`")))?;
            Ok((name, split(shape)?))
        })
        .collect::<Result<_>>()?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if table.len() != expected.len()
        || table
            .iter()
            .zip(&expected)
            .any(|((n, s), (en, es))| n != en || s != es)
    {
        return Err(Error::Format("tensor table does not match the declared layout".into()));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != 4 * total {
        return Err(Error::Format(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            4 * total
        )));
    }
    let mut offset = 0;
    for (p, (_, shape)) in model.parameters_mut().into_iter().zip(&expected) {
        let n: usize = shape.iter().product();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        *p = Tensor::param(shape, data)?;
    }
    let meta = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.to_string())))
        .collect();
    Ok(ModelFile { model, meta })
}

pub fn save_model(path: &Path, model: &CodecModel, meta: &[(String, String)]) -> Result<()> {
    fs::write(path, encode_model(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
