//! Binary model checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "SLOTGRPH" | u32 version | u64 header_len | header (UTF-8)
//! u32 tensor_count | per tensor: u32 name_len, name, u8 trainable, u64 rows, u64 cols, f64 × rows·cols
//! sha256 of everything above (32 bytes)
//! ```
//!
//! The header is a run of `@name count` sections: the model configuration as
//! `key=value` lines, the word vocabulary, label names and description
//! overrides. Loading rebuilds the model from the header and then overwrites
//! every tensor, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::corpus::LabelVocab;
use crate::encoder::WordVocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"SLOTGRPH";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn section(out: &mut String, name: &str, lines: &[String]) {
    out.push_str(&format!("@{name} {}\n", lines.len()));
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
}

fn header(model: &Model) -> String {
    let labels = model.labels();
    let mut out = String::new();
    let config: Vec<String> = model.config().pairs().iter().map(|(k, v)| format!("{k}={v}")).collect();
    section(&mut out, "config", &config);
    section(&mut out, "words", model.words().words());
    section(&mut out, "intents", labels.intents());
    section(&mut out, "slot_types", labels.slot_types());
    let desc: Vec<String> = labels
        .description_overrides()
        .iter()
        .map(|(name, d)| format!("{name}\t{d}"))
        .collect();
    section(&mut out, "descriptions", &desc);
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let h = header(model);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(h.as_bytes());
    let entries = model.store.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(u8::from(e.trainable));
        let (rows, cols) = e.value.dim();
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in e.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size overflow"))
    }

    fn string(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("invalid UTF-8"))
    }
}

struct Header {
    config: ModelConfig,
    words: Vec<String>,
    intents: Vec<String>,
    slot_types: Vec<String>,
    descriptions: Vec<(String, String)>,
}

fn parse_header(text: &str) -> Result<Header> {
    let mut lines = text.lines();
    let mut next_section = |expected: &str| -> Result<Vec<&str>> {
        let head = lines.next().ok_or_else(|| corrupt("header ends early"))?;
        let count = head
            .strip_prefix('@')
            .and_then(|h| h.split_once(' '))
            .filter(|(name, _)| *name == expected)
            .and_then(|(_, n)| n.parse::<usize>().ok())
            .ok_or_else(|| corrupt(format!("expected section `{expected}`, found `{head}`")))?;
        (0..count)
            .map(|_| lines.next().ok_or_else(|| corrupt(format!("section `{expected}` ends early"))))
            .collect()
    };
    let mut config = ModelConfig::default();
    for line in next_section("config")? {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("config line `{line}`")))?;
        if !config.set(k, v)? {
            return Err(corrupt(format!("unknown config key `{k}`")));
        }
    }
    let owned = |v: Vec<&str>| v.into_iter().map(str::to_string).collect::<Vec<_>>();
    let words = owned(next_section("words")?);
    let intents = owned(next_section("intents")?);
    let slot_types = owned(next_section("slot_types")?);
    let descriptions = next_section("descriptions")?
        .into_iter()
        .map(|line| {
            line.split_once('\t')
                .map(|(n, d)| (n.to_string(), d.to_string()))
                .ok_or_else(|| corrupt(format!("description line `{line}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        config,
        words,
        intents,
        slot_types,
        descriptions,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::VersionMismatch("not a model checkpoint".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    if bytes.len() < r.pos + DIGEST_LEN {
        return Err(corrupt("missing checksum"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let mut r = Reader { buf: body, pos: r.pos };

    let header_len = r.usize()?;
    let h = parse_header(r.string(header_len)?)?;
    let mut labels = LabelVocab::new(h.intents, h.slot_types)?;
    for (name, desc) in &h.descriptions {
        labels.set_description(name, desc)?;
    }
    let words = WordVocab::from_words(h.words)?;
    let mut model = Model::new(h.config, labels, words)?;

    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(corrupt(format!(
            "{count} tensors stored, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let trainable = r.u8()? != 0;
        let rows = r.usize()?;
        let cols = r.usize()?;
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt("size overflow"))?;
        let data = r.take(n.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .store
            .find(name)
            .ok_or_else(|| corrupt(format!("unknown tensor `{name}`")))?;
        if model.store.is_trainable(id) != trainable {
            return Err(corrupt(format!("tensor `{name}` trainability differs")));
        }
        let value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        model
            .store
            .set(id, value)
            .map_err(|_| corrupt(format!("tensor `{name}` has shape ({rows}, {cols})")))?;
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing data"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
