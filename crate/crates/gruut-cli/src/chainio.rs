//! On-disk run artifacts: binary chain exports and the registry CSV.
//!
//! A chain export is the canonical chain plus the parameters needed to
//! re-run selection over it (t, m, confirmation depth, fork-choice
//! alpha), so the trace tool needs nothing but this file and the
//! registry. Blocks are stored as length-prefixed canonical encodings,
//! genesis first.

use gruut::{Block, Roster, RosterEntry};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"GRUUTCH1";

#[derive(Debug, Clone)]
pub struct ChainExport {
    pub t: u32,
    pub m: u32,
    pub r: u64,
    pub alpha: (u64, u64),
    pub blocks: Vec<Block>,
}

pub fn write_chain(path: &Path, export: &ChainExport) -> std::io::Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&export.t.to_be_bytes());
    buf.extend_from_slice(&export.m.to_be_bytes());
    buf.extend_from_slice(&export.r.to_be_bytes());
    buf.extend_from_slice(&export.alpha.0.to_be_bytes());
    buf.extend_from_slice(&export.alpha.1.to_be_bytes());
    buf.extend_from_slice(&(export.blocks.len() as u32).to_be_bytes());
    for b in &export.blocks {
        let body = b.encode();
        buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
        buf.extend_from_slice(&body);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)
}

fn take<'a>(data: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], String> {
    if data.len() < n {
        return Err(format!("chain export truncated in {what}"));
    }
    let (head, rest) = data.split_at(n);
    *data = rest;
    Ok(head)
}

fn take_u32(data: &mut &[u8], what: &str) -> Result<u32, String> {
    Ok(u32::from_be_bytes(take(data, 4, what)?.try_into().unwrap()))
}

fn take_u64(data: &mut &[u8], what: &str) -> Result<u64, String> {
    Ok(u64::from_be_bytes(take(data, 8, what)?.try_into().unwrap()))
}

pub fn read_chain(path: &Path) -> Result<ChainExport, String> {
    let raw = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut data = raw.as_slice();
    let magic = take(&mut data, 8, "magic")?;
    if magic != MAGIC {
        return Err(format!("{}: not a chain export", path.display()));
    }
    let t = take_u32(&mut data, "header")?;
    let m = take_u32(&mut data, "header")?;
    let r = take_u64(&mut data, "header")?;
    let alpha = (take_u64(&mut data, "header")?, take_u64(&mut data, "header")?);
    let count = take_u32(&mut data, "header")? as usize;
    let mut blocks = Vec::with_capacity(count);
    for i in 0..count {
        let len = take_u32(&mut data, "block frame")? as usize;
        let body = take(&mut data, len, "block body")?;
        let block =
            Block::decode(body).map_err(|e| format!("block {i} does not decode: {e:?}"))?;
        blocks.push(block);
    }
    if !data.is_empty() {
        return Err("trailing bytes after the last block".into());
    }
    if blocks.is_empty() {
        return Err("chain export holds no blocks".into());
    }
    Ok(ChainExport { t, m, r, alpha, blocks })
}

pub const REGISTRY_CSV_HEADER: &str = "role,network_id_hex,join_height";

pub fn write_registry(path: &Path, mergers: &Roster, signers: &Roster) -> std::io::Result<()> {
    let mut out = String::from(REGISTRY_CSV_HEADER);
    out.push('\n');
    for (role, roster) in [("merger", mergers), ("signer", signers)] {
        for e in roster.iter() {
            out.push_str(role);
            out.push(',');
            out.push_str(&hex::encode(e.network_id));
            out.push(',');
            out.push_str(&e.join_height.to_string());
            out.push('\n');
        }
    }
    fs::write(path, out)
}

/// Reads a registry CSV back into (mergers, signers). Entries are active;
/// an exported registry only lists members.
pub fn read_registry(path: &Path) -> Result<(Roster, Roster), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == REGISTRY_CSV_HEADER => {}
        _ => return Err(format!("{}: missing registry header", path.display())),
    }
    let mut mergers = Roster::new();
    let mut signers = Roster::new();
    for (idx, line) in lines.enumerate() {
        let ln = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(format!("registry line {ln}: expected 3 fields"));
        }
        let id_bytes =
            hex::decode(parts[1]).map_err(|_| format!("registry line {ln}: bad hex id"))?;
        let network_id: [u8; 32] = id_bytes
            .try_into()
            .map_err(|_| format!("registry line {ln}: id must be 32 bytes"))?;
        let join_height: u64 = parts[2]
            .trim()
            .parse()
            .map_err(|_| format!("registry line {ln}: bad join height"))?;
        let entry = RosterEntry { network_id, join_height, active: true };
        match parts[0].trim() {
            "merger" => mergers.insert(entry),
            "signer" => signers.insert(entry),
            other => return Err(format!("registry line {ln}: unknown role `{other}`")),
        }
    }
    if mergers.is_empty() || signers.is_empty() {
        return Err("registry needs at least one merger and one signer".into());
    }
    Ok((mergers, signers))
}
