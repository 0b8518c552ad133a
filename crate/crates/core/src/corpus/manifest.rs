//! Corpus persistence: WAV files plus a JSON manifest carrying the
//! alignment spans and labels that the audio itself cannot.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runio::write_atomic;

use super::{load_wav, write_wav_i16, Span, Utterance};

/// One manifest row. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub sample_rate: u32,
    pub word_spans: Vec<Span>,
    pub phone_spans: Vec<Span>,
    pub label: Option<u32>,
}

/// Write the corpus under `dir`: 16-bit WAVs in `audio/` and a
/// `manifest.json` array beside them. Returns the manifest path.
pub fn save_corpus(dir: &Path, corpus: &[Utterance]) -> Result<PathBuf> {
    let audio = dir.join("audio");
    std::fs::create_dir_all(&audio)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for u in corpus {
        u.validate()?;
        let rel = format!("audio/{}.wav", u.id);
        write_wav_i16(&dir.join(&rel), &u.samples, u.sample_rate)?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            path: rel,
            sample_rate: u.sample_rate,
            word_spans: u.word_spans.clone(),
            phone_spans: u.phone_spans.clone(),
            label: u.label,
        });
    }
    let manifest = dir.join("manifest.json");
    write_atomic(&manifest, serde_json::to_string_pretty(&entries)?.as_bytes())?;
    Ok(manifest)
}

/// Load a corpus from its manifest. Audio paths resolve relative to the
/// manifest's directory; each utterance is re-validated after loading.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<Utterance>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(manifest_path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    entries
        .into_iter()
        .map(|e| {
            let mut u = load_wav(&base.join(&e.path))?;
            if u.sample_rate != e.sample_rate {
                return Err(Error::ingest(
                    "sample_rate",
                    format!(
                        "manifest says {} but {} contains {}",
                        e.sample_rate, e.path, u.sample_rate
                    ),
                ));
            }
            u.id = e.id;
            u.word_spans = e.word_spans;
            u.phone_spans = e.phone_spans;
            u.label = e.label;
            u.validate()?;
            Ok(u)
        })
        .collect()
}
