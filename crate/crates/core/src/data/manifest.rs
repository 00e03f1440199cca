//! JSON-lines corpus manifests: `{"id": str, "text": str, "frames": path}` per
//! line, with an optional `"durations"` array of per-token frame counts.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mtf::{read_tensor_file, write_tensor_file};
use super::vocab::Vocab;
use super::Utterance;
use crate::align::Durations;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub text: String,
    pub frames: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations: Option<Vec<usize>>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::invalid("manifest", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Resolves an entry's frame path against the manifest's directory.
pub fn frames_path(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.frames);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads one manifest entry as an utterance.
pub fn load_entry(manifest: &Path, entry: &ManifestEntry, vocab: &Vocab) -> Result<Utterance> {
    let tokens = vocab.tokenize(&entry.text)?;
    let frames = read_tensor_file(frames_path(manifest, entry))?;
    let true_durations = entry.durations.clone().map(Durations::new).transpose()?;
    Utterance::new(
        entry.id.clone(),
        entry.text.clone(),
        tokens,
        frames,
        true_durations,
    )
}

pub fn load_corpus(manifest: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let manifest = manifest.as_ref();
    read_manifest(manifest)?
        .iter()
        .map(|e| load_entry(manifest, e, vocab))
        .collect()
}

/// Writes each utterance's frames to `dir/<id>.mtf` and an index to
/// `dir/manifest.jsonl`; returns the manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, utts: &[Utterance]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    for u in utts {
        let file = format!("{}.mtf", u.id);
        write_tensor_file(dir.join(&file), &u.frames)?;
        let entry = ManifestEntry {
            id: u.id.clone(),
            text: u.text.clone(),
            frames: file,
            durations: u.true_durations.as_ref().map(|d| d.as_slice().to_vec()),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_reports_bad_ones() {
        let text = "{\"id\":\"a\",\"text\":\"hi\",\"frames\":\"a.mtf\"}\n\n{\"id\":\"b\",\"text\":\"yo\",\"frames\":\"/x/b.mtf\",\"durations\":[2,3]}\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].durations, Some(vec![2, 3]));
        assert_eq!(
            frames_path(Path::new("/data/m.jsonl"), &m[0]),
            PathBuf::from("/data/a.mtf")
        );
        assert_eq!(
            frames_path(Path::new("/data/m.jsonl"), &m[1]),
            PathBuf::from("/x/b.mtf")
        );
        let err = parse_manifest("{\"id\":\"a\"}\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
