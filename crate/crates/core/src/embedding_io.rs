//! Frame-embedding files and dataset manifests.
//!
//! Embedding file layout (little-endian):
//!
//! | bytes      | content                              |
//! |------------|--------------------------------------|
//! | 0..4       | magic `TDE1`                         |
//! | 4..8       | `u32` frame count `T`                |
//! | 8..12      | `u32` embedding width `D`            |
//! | 12..       | `T·D` `f32` values, frame-major      |
//!
//! Manifests are comma-separated text with the header `id,path,label`.
//! Relative paths resolve against the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TDE1";
const HEADER_LEN: usize = 12;
pub const MANIFEST_HEADER: &str = "id,path,label";

/// Utterance-level class. Index 0 is bonafide, 1 is spoof.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("unknown label {other:?} (expected bonafide or spoof)")),
        }
    }
}

/// A `T × D` embedding matrix for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddingSequence {
    pub utterance_id: String,
    frames: Tensor,
}

impl FrameEmbeddingSequence {
    pub fn new(utterance_id: impl Into<String>, frames: Tensor) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::Input(format!(
                "embedding sequence must be T×D, got {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[0] < 2 {
            return Err(Error::Input(format!(
                "embedding sequence needs T >= 2 frames, got {}",
                frames.shape()[0]
            )));
        }
        if !frames.all_finite() {
            return Err(Error::Input("embedding sequence contains non-finite values".into()));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            frames,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Serializes a `T × D` matrix into the embedding file layout.
pub fn encode_embedding(frames: &Tensor) -> Result<Vec<u8>> {
    let shape = frames.shape();
    if shape.len() != 2 || shape[0] < 2 || shape[1] < 1 {
        return Err(Error::Contract(format!(
            "embedding files need T >= 2 and D >= 1, got {shape:?}"
        )));
    }
    let t = u32::try_from(shape[0]).map_err(|_| Error::Contract("T exceeds u32".into()))?;
    let d = u32::try_from(shape[1]).map_err(|_| Error::Contract("D exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + frames.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&t.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    for &v in frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if t < 2 || d < 1 {
        return Err(format(format!("header declares T={t}, D={d}")));
    }
    let expected = HEADER_LEN + t * d * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[t, d], data)
}

pub fn write_embedding_file(seq: &FrameEmbeddingSequence, path: &Path) -> Result<()> {
    let bytes = encode_embedding(seq.frames())?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads an embedding file; the utterance id is the file stem.
pub fn read_embedding_file(path: &Path) -> Result<FrameEmbeddingSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let frames = decode_embedding(&bytes, path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FrameEmbeddingSequence::new(id, frames).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub file_path: String,
    pub label: Label,
}

/// Splits text into lines accepting both LF and CRLF endings.
pub(crate) fn text_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l))
}

/// Parses manifest text. `origin` is used only in error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestRecord>> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text_lines(text).enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
        Some((_, other)) => {
            return Err(parse_err(1, format!("expected header {MANIFEST_HEADER:?}, got {other:?}")))
        }
        None => return Err(parse_err(1, "empty manifest".into())),
    }
    let mut records: Vec<ManifestRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, file, label] = fields[..] else {
            return Err(parse_err(lineno, format!("expected 3 fields, got {}", fields.len())));
        };
        if id.is_empty() {
            return Err(parse_err(lineno, "empty utterance id".into()));
        }
        let label = label.parse::<Label>().map_err(|r| parse_err(lineno, r))?;
        if !seen.insert(id.to_string()) {
            return Err(Error::Validation(format!(
                "{}:{lineno}: duplicate utterance id {id:?}",
                origin.display()
            )));
        }
        records.push(ManifestRecord {
            utterance_id: id.to_string(),
            file_path: file.to_string(),
            label,
        });
    }
    Ok(records)
}

/// Loads a manifest without opening any of the referenced files.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    parse_manifest(&text, path)
}

pub fn format_manifest(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        if r.utterance_id.contains(',') || r.file_path.contains(',') {
            return Err(Error::Contract(format!(
                "manifest fields may not contain commas: {:?}",
                r.utterance_id
            )));
        }
        out.push_str(&format!("{},{},{}\n", r.utterance_id, r.file_path, r.label));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let text = format_manifest(records)?;
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// A loaded manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn open(path: &Path) -> Result<Self> {
        let records = load_manifest(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, records })
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.file_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads the embedding for `record`; failures name the utterance.
    pub fn load(&self, record: &ManifestRecord) -> Result<FrameEmbeddingSequence> {
        let path = self.resolve(record);
        let mut seq = read_embedding_file(&path).map_err(|e| match e {
            Error::Io { context, source } => Error::Io {
                context: format!("utterance {}: {context}", record.utterance_id),
                source,
            },
            other => other,
        })?;
        seq.utterance_id = record.utterance_id.clone();
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(t: usize, d: usize) -> FrameEmbeddingSequence {
        let data = (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect();
        FrameEmbeddingSequence::new("u", Tensor::new(&[t, d], data).unwrap()).unwrap()
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tde");
        write_embedding_file(&seq(3, 2), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 36);
        let back = read_embedding_file(&p).unwrap();
        assert_eq!(back.utterance_id, "a");
        assert_eq!(back.frames().shape(), &[3, 2]);
    }

    #[test]
    fn single_frame_rejected() {
        let t = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!(FrameEmbeddingSequence::new("x", t.clone()).is_err());
        assert!(matches!(encode_embedding(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tde");
        let mut bytes = encode_embedding(seq(3, 2).frames()).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_embedding_file(&p), Err(Error::Format { .. })));

        let bytes = encode_embedding(seq(3, 2).frames()).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_embedding_file(&p),
            Err(Error::Truncated { expected: 36, found: 32, .. })
        ));

        let missing = dir.path().join("nope.tde");
        assert!(read_embedding_file(&missing).unwrap_err().is_io());
    }

    #[test]
    fn manifest_parsing() {
        let text = "id,path,label\r\na,a.tde,bonafide\r\nb,b.tde,spoof\r\n";
        let recs = parse_manifest(text, Path::new("m.csv")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].label, Label::Spoof);

        let bad = "id,path,label\na,a.tde,fake\n";
        match parse_manifest(bad, Path::new("m.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        let dup = "id,path,label\na,a.tde,spoof\na,b.tde,spoof\n";
        assert!(matches!(parse_manifest(dup, Path::new("m.csv")), Err(Error::Validation(_))));
        assert!(parse_manifest("x,y\n", Path::new("m.csv")).is_err());
    }

    #[test]
    fn missing_embedding_surfaces_only_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.csv");
        fs::write(&mp, "id,path,label\nghost,ghost.tde,spoof\n").unwrap();
        let m = Manifest::open(&mp).unwrap();
        assert_eq!(m.len(), 1);
        let err = m.load(&m.records[0]).unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("ghost"));
    }

    proptest! {
        #[test]
        fn embedding_round_trip(t in 2usize..20, d in 1usize..8, seed in any::<u64>()) {
            let data: Vec<f64> = (0..t * d)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 37.0)
                .collect();
            let frames = Tensor::new(&[t, d], data).unwrap();
            let bytes = encode_embedding(&frames).unwrap();
            let back = decode_embedding(&bytes, Path::new("p")).unwrap();
            for (a, b) in frames.data().iter().zip(back.data()) {
                prop_assert_eq!(*a as f32, *b as f32);
            }
            prop_assert_eq!(encode_embedding(&back).unwrap(), bytes);
        }
    }
}
