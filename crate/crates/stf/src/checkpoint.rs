//! Checkpoints: a text header followed by named tensors in creation order.
//!
//! ```text
//! STF-CHECKPOINT 1
//! stream <name>
//! [config]
//! key = value ...
//! [layout]
//! <layout file text>
//! [end]
//! ```
//! After the header: u32 tensor count, then per tensor a u32 name length,
//! the UTF-8 name, a u8 kind (0 trainable, 1 buffer) and a `TNSR` blob.

use std::path::Path;

use stf_core::network::Model;
use stf_core::params::{ParamKind, ParamStore};
use stf_core::real::Real;
use stf_core::streams::Stream;
use stf_core::topology::Layout;

use crate::binary::{decode_tensor, encode_tensor, read_file, write_file, Reader};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::text::{format_layout, parse_key_values, parse_layout};

const HEADER: &str = "STF-CHECKPOINT 1";

pub struct Checkpoint<R: Real> {
    pub stream: Stream,
    pub config: RunConfig,
    pub layout: Layout,
    pub model: Model,
    pub params: ParamStore<R>,
}

pub fn encode<R: Real>(
    stream: Stream,
    config: &RunConfig,
    layout: &Layout,
    params: &ParamStore<R>,
) -> Vec<u8> {
    let header = format!(
        "{HEADER}\nstream {stream}\n[config]\n{}[layout]\n{}[end]\n",
        config.to_text(),
        format_layout(layout)
    );
    let mut out = header.into_bytes();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        encode_tensor(&e.value.cast::<f64>(), &mut out);
    }
    out
}

pub fn save<R: Real>(
    path: &Path,
    stream: Stream,
    config: &RunConfig,
    layout: &Layout,
    params: &ParamStore<R>,
) -> Result<()> {
    write_file(path, &encode(stream, config, layout, params))
}

fn section<'a>(path: &Path, text: &'a str, start: &str, end: &str) -> Result<&'a str> {
    let missing = || {
        CliError::format(
            path,
            format!("checkpoint header lacks a {start} ... {end} section"),
        )
    };
    let from = text.find(&format!("{start}\n")).ok_or_else(missing)? + start.len() + 1;
    let len = text[from..].find(&format!("{end}\n")).ok_or_else(missing)?;
    Ok(&text[from..from + len])
}

/// Rebuilds the model from the header and fills it with the stored tensors.
/// Names, order, kinds and shapes must match the rebuilt store exactly.
pub fn decode<R: Real>(path: &Path, bytes: &[u8]) -> Result<Checkpoint<R>> {
    const END: &[u8] = b"[end]\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| CliError::format(path, "not a checkpoint: missing header terminator"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| CliError::format(path, "checkpoint header is not UTF-8"))?;
    let mut head_lines = header.lines();
    if head_lines.next() != Some(HEADER) {
        return Err(CliError::format(
            path,
            format!("not a checkpoint: expected '{HEADER}'"),
        ));
    }
    let stream: Stream = head_lines
        .next()
        .and_then(|l| l.strip_prefix("stream "))
        .ok_or_else(|| CliError::format(path, "checkpoint header lacks a stream line"))?
        .parse()?;
    let config = RunConfig::from_map(&parse_key_values(
        path,
        section(path, header, "[config]", "[layout]")?,
    )?)?;
    let layout = parse_layout(path, section(path, header, "[layout]", "[end]")?)?;
    let (model, mut params) = Model::build::<R>(&config.model, &layout, config.train.seed)?;

    let mut r = Reader::new(path, &bytes[split..]);
    let count = r.u32("tensor count")? as usize;
    if count != params.len() {
        return Err(r.fail(format_args!(
            "checkpoint holds {count} tensors, the configured model has {}",
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let kind = r.u8("kind")?;
        let entry = params.entry(id);
        let expected_kind = u8::from(entry.kind == ParamKind::Buffer);
        if name != entry.name || kind != expected_kind {
            return Err(r.fail(format_args!(
                "found tensor '{name}' (kind {kind}), model expects '{}'",
                entry.name
            )));
        }
        let t = decode_tensor(&mut r)?;
        if t.shape() != entry.value.shape() {
            return Err(r.fail(format_args!(
                "'{name}' has shape {:?}, model expects {:?}",
                t.shape(),
                entry.value.shape()
            )));
        }
        *params.get_mut(id) = t.cast();
    }
    r.finish()?;
    Ok(Checkpoint {
        stream,
        config,
        layout,
        model,
        params,
    })
}

pub fn load<R: Real>(path: &Path) -> Result<Checkpoint<R>> {
    decode(path, &read_file(path)?)
}
