//! On-disk corpus formats.
//!
//! Manifest: UTF-8, one row per utterance, tab-separated
//! `id<TAB>feature_path<TAB>transcription[<TAB>translation]`, `#` comments.
//! Feature file: little-endian binary, magic `STFE`, u32 T_s, u32 d_feat,
//! then T_s * d_feat IEEE-754 f32, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use super::vocab::Vocabulary;
use super::{AsrUtterance, Features, Utterance};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STFE";

pub fn write_features(path: &Path, f: &Features) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * f.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(f.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(f.cols as u32).to_le_bytes());
    for v in &f.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_features(path: &Path) -> Result<Features> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() < 12 || &buf[0..4] != MAGIC {
        return Err(Error::Format(format!("{}: missing STFE header", path.display())));
    }
    let rows = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if rows == 0 {
        return Err(Error::Format(format!("{}: feature file declares T_s=0", path.display())));
    }
    let expected = 12 + 4 * rows * cols;
    if buf.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes on disk but header {rows}x{cols} implies {expected}",
            path.display(),
            buf.len()
        )));
    }
    let data = buf[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Features::new(rows, cols, data))
}

fn write_manifest_rows(dir: &Path, rows: Vec<(String, PathBuf, String, Option<String>)>) -> Result<()> {
    let manifest = dir.join("manifest.tsv");
    let mut body = String::from("# id\tfeature_path\ttranscription\ttranslation\n");
    for (id, feat, x, y) in rows {
        body.push_str(&id);
        body.push('\t');
        body.push_str(&feat.display().to_string());
        body.push('\t');
        body.push_str(&x);
        if let Some(y) = y {
            body.push('\t');
            body.push_str(&y);
        }
        body.push('\n');
    }
    fs::write(&manifest, body).map_err(|e| Error::io(manifest.display().to_string(), e))
}

fn prepare_dir(dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(feat_dir.display().to_string(), e))?;
    Ok(feat_dir)
}

/// Write manifest.tsv, vocab.txt and one feature file per utterance.
pub fn write_corpus(corpus: &[Utterance], vocab: &Vocabulary, dir: &Path) -> Result<()> {
    let feat_dir = prepare_dir(dir)?;
    vocab.save(&dir.join("vocab.txt"))?;
    let mut rows = Vec::with_capacity(corpus.len());
    for u in corpus {
        let feat_path = feat_dir.join(format!("{}.stfe", u.id));
        write_features(&feat_path, &u.speech)?;
        rows.push((
            u.id.clone(),
            PathBuf::from("feats").join(format!("{}.stfe", u.id)),
            vocab.ids_to_string(&u.transcription),
            Some(vocab.ids_to_string(&u.translation)),
        ));
    }
    write_manifest_rows(dir, rows)
}

/// Same layout without the translation column.
pub fn write_asr_corpus(corpus: &[AsrUtterance], vocab: &Vocabulary, dir: &Path) -> Result<()> {
    let feat_dir = prepare_dir(dir)?;
    vocab.save(&dir.join("vocab.txt"))?;
    let mut rows = Vec::with_capacity(corpus.len());
    for u in corpus {
        let feat_path = feat_dir.join(format!("{}.stfe", u.id));
        write_features(&feat_path, &u.speech)?;
        rows.push((
            u.id.clone(),
            PathBuf::from("feats").join(format!("{}.stfe", u.id)),
            vocab.ids_to_string(&u.transcription),
            None,
        ));
    }
    write_manifest_rows(dir, rows)
}

/// Manifest contents; the translation column decides which kind it is.
#[derive(Debug)]
pub enum LoadedManifest {
    St(Vec<Utterance>),
    Asr(Vec<AsrUtterance>),
}

impl LoadedManifest {
    pub fn st(self) -> Result<Vec<Utterance>> {
        match self {
            LoadedManifest::St(v) => Ok(v),
            LoadedManifest::Asr(_) => Err(Error::Format("manifest has no translation column".into())),
        }
    }

    pub fn asr(self) -> Vec<AsrUtterance> {
        match self {
            LoadedManifest::St(v) => v.into_iter().map(AsrUtterance::from).collect(),
            LoadedManifest::Asr(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LoadedManifest::St(v) => v.len(),
            LoadedManifest::Asr(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn load_manifest(path: &Path, vocab: &Vocabulary) -> Result<LoadedManifest> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut st: Vec<Utterance> = Vec::new();
    let mut asr: Vec<AsrUtterance> = Vec::new();
    let mut kind: Option<bool> = None; // Some(true) = ST rows seen

    for (lineno, line) in body.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 && cols.len() != 4 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: format!("expected 3 or 4 tab-separated columns, got {}", cols.len()),
            });
        }
        let has_translation = cols.len() == 4;
        match kind {
            None => kind = Some(has_translation),
            Some(k) if k != has_translation => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: line_no,
                    message: "mixed ASR and ST rows in one manifest".into(),
                })
            }
            _ => {}
        }
        let map_err = |e: Error| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        };
        let speech = read_features(&base.join(cols[1])).map_err(map_err)?;
        let transcription = vocab.string_to_ids(cols[2]).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        super::check_token_ids(&transcription, vocab.len(), "transcription", cols[0])?;
        if has_translation {
            let translation = vocab.string_to_ids(cols[3]).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
            st.push(Utterance { id: cols[0].to_string(), speech, transcription, translation });
        } else {
            asr.push(AsrUtterance { id: cols[0].to_string(), speech, transcription });
        }
    }

    Ok(match kind {
        Some(false) => LoadedManifest::Asr(asr),
        _ => LoadedManifest::St(st),
    })
}
