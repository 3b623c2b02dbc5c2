//! Checkpoint files.
//!
//! A plain-text header followed by a binary payload:
//!
//! ```text
//! MSKD-CHECKPOINT 1
//! kind full|pruned
//! config {"in_channels":3,...}
//! tensors <count>
//! <name> <byte offset into payload> <d0>x<d1>x...
//! ...
//! end
//! ```
//!
//! The payload is the concatenation of one tensor record per manifest line
//! (see [`crate::autodiff::serialize`]), in manifest order.

use std::io::Write;
use std::path::Path;

use crate::autodiff::serialize::{read_tensor, record_len, write_tensor};
use crate::autodiff::{ParamStore, Scalar};
use crate::error::{Error, Result};
use crate::network::{InferenceNet, NetConfig, Network};

const HEADER: &str = "MSKD-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Full(Network<f32>),
    Pruned(InferenceNet<f32>),
}

impl Checkpoint {
    /// The backbone-only view, pruning a full checkpoint if needed.
    pub fn into_inference(self) -> InferenceNet<f32> {
        match self {
            Checkpoint::Full(n) => n.prune_for_inference(),
            Checkpoint::Pruned(n) => n,
        }
    }

    pub fn config(&self) -> &NetConfig {
        match self {
            Checkpoint::Full(n) => &n.config,
            Checkpoint::Pruned(n) => &n.config,
        }
    }
}

fn encode<T: Scalar>(kind: &str, config: &NetConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let config_json = serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    let mut head = format!("{HEADER}\nkind {kind}\nconfig {config_json}\ntensors {}\n", params.len());
    let mut offset = 0;
    for e in params.entries() {
        let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("{} {} {}\n", e.name, offset, dims.join("x")));
        offset += record_len(e.value.shape());
    }
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.reserve(offset);
    for e in params.entries() {
        write_tensor(&mut out, &e.value)?;
    }
    Ok(out)
}

pub fn encode_network<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    encode("full", &net.config, &net.params)
}

pub fn encode_inference<T: Scalar>(net: &InferenceNet<T>) -> Result<Vec<u8>> {
    encode("pruned", &net.config, &net.params)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, net: &Network<T>) -> Result<()> {
    write_file(path, &encode_network(net)?)
}

pub fn save_inference_checkpoint<T: Scalar>(path: &Path, net: &InferenceNet<T>) -> Result<()> {
    write_file(path, &encode_inference(net)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("unterminated header line at byte {}", *pos)))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("header is not UTF-8".into()))
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| Error::Format(format!("expected `{key} ...`, got `{line}`")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if next_line(bytes, &mut pos)? != HEADER {
        return Err(Error::Format("not a checkpoint (bad header line)".into()));
    }
    let kind = field(next_line(bytes, &mut pos)?, "kind")?.to_string();
    let config: NetConfig = serde_json::from_str(field(next_line(bytes, &mut pos)?, "config")?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count: usize = field(next_line(bytes, &mut pos)?, "tensors")?
        .parse()
        .map_err(|e| Error::Format(format!("tensor count: {e}")))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(bytes, &mut pos)?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad manifest line `{line}`")));
        }
        let offset: usize = parts[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad offset in `{line}`")))?;
        let shape = if parts[2].is_empty() {
            vec![]
        } else {
            parts[2]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("bad shape in `{line}`")))?
        };
        manifest.push((parts[0].to_string(), offset, shape));
    }
    if next_line(bytes, &mut pos)? != "end" {
        return Err(Error::Format("manifest not terminated by `end`".into()));
    }
    let payload = &bytes[pos..];

    let full = Network::<f32>::build(config, 0)?;
    let mut ckpt = match kind.as_str() {
        "full" => Checkpoint::Full(full),
        "pruned" => Checkpoint::Pruned(full.prune_for_inference()),
        other => return Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
    };
    let store = match &mut ckpt {
        Checkpoint::Full(n) => &mut n.params,
        Checkpoint::Pruned(n) => &mut n.params,
    };
    if store.len() != manifest.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors but the configured network has {}",
            manifest.len(),
            store.len()
        )));
    }
    for (id, (name, offset, shape)) in store.ids().collect::<Vec<_>>().into_iter().zip(manifest) {
        let entry = store.entry(id);
        if entry.name != name || entry.value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "manifest entry `{name}` {shape:?} does not match network tensor `{}` {:?}",
                entry.name,
                entry.value.shape()
            )));
        }
        let mut slice = payload
            .get(offset..)
            .ok_or_else(|| Error::Format(format!("offset {offset} of `{name}` past end of payload")))?;
        let t = read_tensor::<f32, _>(&mut slice)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!("record for `{name}` has shape {:?}", t.shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok(ckpt)
}
