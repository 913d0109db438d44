//! JSON image documents with hex-encoded addresses and words.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Invariant, InvariantError, Perm, ProgramImage, Section};
use crate::phantom::PhantomConfig;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("malformed image document: {0}")]
    Parse(String),
    #[error("{0}")]
    Invariant(#[from] InvariantError),
}

impl LoadError {
    /// Name of the violated invariant, if the document parsed.
    pub fn invariant(&self) -> Option<Invariant> {
        match self {
            LoadError::Invariant(e) => Some(e.invariant),
            LoadError::Parse(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionDoc {
    name: String,
    base: String,
    perm: String,
    words: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageDoc {
    entry: String,
    trap_mode: bool,
    sections: Vec<SectionDoc>,
    symbols: BTreeMap<String, String>,
    bbl_starts: Vec<String>,
    trap_locations: Vec<String>,
}

pub fn hex32(v: u32) -> String {
    format!("0x{v:08x}")
}

pub fn parse_hex32(s: &str) -> Result<u32, String> {
    let body = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).ok_or_else(|| format!("'{s}' lacks 0x"))?;
    u32::from_str_radix(body, 16).map_err(|e| format!("'{s}': {e}"))
}

/// Serializes an image to its canonical JSON text.
pub fn save(image: &ProgramImage) -> String {
    let doc = ImageDoc {
        entry: hex32(image.entry),
        trap_mode: image.trap_mode,
        sections: image
            .sections
            .iter()
            .map(|s| SectionDoc {
                name: s.name.clone(),
                base: hex32(s.base),
                perm: s.perm.as_str().to_string(),
                words: s.words.iter().map(|&w| hex32(w)).collect(),
            })
            .collect(),
        symbols: image.symbols.iter().map(|(k, &v)| (k.clone(), hex32(v))).collect(),
        bbl_starts: image.bbl_starts.iter().map(|&v| hex32(v)).collect(),
        trap_locations: image.trap_locations.iter().map(|&v| hex32(v)).collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("image documents always serialize");
    text.push('\n');
    text
}

/// Parses and verifies an image document against the given phantom configuration.
pub fn load(document: &str, cfg: &PhantomConfig) -> Result<ProgramImage, LoadError> {
    let doc: ImageDoc = serde_json::from_str(document).map_err(|e| LoadError::Parse(e.to_string()))?;
    let p = |s: &str| parse_hex32(s).map_err(LoadError::Parse);
    let mut sections = Vec::with_capacity(doc.sections.len());
    for s in &doc.sections {
        let perm = match s.perm.as_str() {
            "rx" => Perm::Rx,
            "rw" => Perm::Rw,
            other => return Err(LoadError::Parse(format!("unknown permission '{other}'"))),
        };
        let words = s.words.iter().map(|w| p(w)).collect::<Result<_, _>>()?;
        sections.push(Section { name: s.name.clone(), base: p(&s.base)?, perm, words });
    }
    let image = ProgramImage {
        entry: p(&doc.entry)?,
        trap_mode: doc.trap_mode,
        sections,
        symbols: doc.symbols.iter().map(|(k, v)| Ok((k.clone(), p(v)?))).collect::<Result<_, LoadError>>()?,
        bbl_starts: doc.bbl_starts.iter().map(|v| p(v)).collect::<Result<_, _>>()?,
        trap_locations: doc.trap_locations.iter().map(|v| p(v)).collect::<Result<_, _>>()?,
        relocs: Vec::new(),
    };
    image.validate(cfg)?;
    Ok(image)
}
