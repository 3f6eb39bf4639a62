//! Denoiser checkpoints.
//!
//! A checkpoint is a UTF-8 text header followed by a binary payload:
//!
//! ```text
//! lesionsynth-checkpoint v1
//! [config]
//! <TrainConfig as flat TOML, one key per line>
//! [tensors]
//! <name> <offset> <d0>x<d1>x...
//! end
//! <payload: DTF1 tensors back to back>
//! ```
//!
//! Offsets count bytes from the first payload byte (right after `end\n`).

use std::fs;
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::diffusion::net::DenoiserNet;
use crate::diffusion::train::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "lesionsynth-checkpoint v1";

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

/// Header + payload container shared by every parameter checkpoint.
pub(crate) fn encode(magic: &str, config: &str, params: &ParamSet<f32>) -> Vec<u8> {
    let mut header = format!("{magic}\n[config]\n{config}");
    if !header.ends_with('\n') {
        header.push('\n');
    }
    header.push_str("[tensors]\n");
    let mut payload = Vec::new();
    for (_, name, t) in params.iter() {
        let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{name} {} {}\n", payload.len(), dims.join("x")));
        t.write_dtf1(&mut payload).expect("writing to a Vec cannot fail");
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

/// Inverse of [`encode`]: the config text and the parameters in file order.
pub(crate) fn decode(magic: &str, bytes: &[u8]) -> Result<(String, ParamSet<f32>)> {
    const END: &[u8] = b"\nend\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end marker"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[split + END.len()..];
    let mut lines = header.lines();
    if lines.next() != Some(magic) {
        return Err(bad("bad magic line"));
    }
    if lines.next() != Some("[config]") {
        return Err(bad("missing [config] section"));
    }
    let mut config = String::new();
    for line in lines.by_ref() {
        if line == "[tensors]" {
            break;
        }
        config.push_str(line);
        config.push('\n');
    }
    let mut params = ParamSet::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let (Some(name), Some(offset), Some(dims), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(format!("bad tensor line `{line}`")));
        };
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
        let dims: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad dims in `{line}`"))))
            .collect::<Result<_>>()?;
        let slice = payload
            .get(offset..)
            .ok_or_else(|| bad(format!("offset {offset} past payload")))?;
        let t = Tensor::read_dtf1(slice)?;
        if t.dims() != dims.as_slice() {
            return Err(bad(format!("{name}: index dims {dims:?} vs stored {:?}", t.dims())));
        }
        params.add(name, t);
    }
    Ok((config, params))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn to_bytes(net: &DenoiserNet<f32>, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let config = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    Ok(encode(MAGIC, &config, net.params()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(DenoiserNet<f32>, TrainConfig)> {
    let (config, params) = decode(MAGIC, bytes)?;
    let cfg: TrainConfig = toml::from_str(&config).map_err(|e| bad(e.to_string()))?;
    let net = cfg.with_prediction(DenoiserNet::from_params(cfg.net_config(), &params)?)?;
    Ok((net, cfg))
}

pub fn save(path: &Path, net: &DenoiserNet<f32>, cfg: &TrainConfig) -> Result<()> {
    write_file(path, &to_bytes(net, cfg)?)
}

pub fn load(path: &Path) -> Result<(DenoiserNet<f32>, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
