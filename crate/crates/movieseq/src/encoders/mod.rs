//! Per-frame embeddings and the temporal projector that lifts them into
//! model space. Frames are referenced either by synthetic seed (the toy
//! encoder hashes the seed into a unit vector) or by row index into a
//! precomputed embedding file.

pub mod projector;
pub mod text;

pub use projector::{Projector, ProjectorConfig};

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::{stream, Rng};

#[derive(Debug, Error)]
pub enum EncError {
    #[error("no embedding row {0} in the backing file")]
    MissingEmbedding(u64),
    #[error("frame encoder is file-backed but got a synthetic frame reference")]
    SyntheticRefInFileMode,
    #[error("payload has {got} frames but the projector supports at most {max}")]
    TooManyFrames { got: usize, max: usize },
    #[error("bad embedding file: {0}")]
    BadFile(String),
    #[error("no embedding for sentence {0:?}")]
    MissingSentence(String),
    #[error("{0}: {1}")]
    Io(String, String),
}

/// A single frame: either a synthetic seed or a row in an embedding file.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FrameRef {
    Seed(u64),
    Row(u64),
}

/// An ordered run of frames, optionally timestamped. Images are payloads
/// with exactly one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPayload {
    pub frames: Vec<FrameRef>,
    pub timestamps: Option<Vec<f64>>,
}

impl VisualPayload {
    pub fn new(frames: Vec<FrameRef>) -> Self {
        Self {
            frames,
            timestamps: None,
        }
    }

    /// A payload of `n` synthetic frames derived from one seed. Equal
    /// (seed, n) always produce the same frame references.
    pub fn synthetic(seed: u64, n: usize) -> Self {
        Self::new((0..n).map(|i| FrameRef::Seed(stream(seed, i as u64))).collect())
    }

    /// A payload covering rows [start, end) of an embedding file.
    pub fn rows(start: u64, end: u64) -> Self {
        Self::new((start..end).map(FrameRef::Row).collect())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Resample to exactly `n` frames with the midpoint rule; duplicates
    /// frames when `n` exceeds the frame count.
    pub fn subsample(&self, n: usize) -> Self {
        let idx = sample_frames(self.frames.len(), n);
        Self {
            frames: idx.iter().map(|&i| self.frames[i].clone()).collect(),
            timestamps: self
                .timestamps
                .as_ref()
                .map(|ts| idx.iter().map(|&i| ts[i]).collect()),
        }
    }
}

/// Midpoint frame sampling: index i of n maps to floor((i + 0.5) * total / n),
/// clipped to the valid range. Nondecreasing by construction.
pub fn sample_frames(total_frames: usize, n: usize) -> Vec<usize> {
    assert!(total_frames >= 1 && n >= 1);
    (0..n)
        .map(|i| {
            let raw = ((i as f64 + 0.5) * total_frames as f64 / n as f64).floor() as usize;
            raw.min(total_frames - 1)
        })
        .collect()
}

const EMB_MAGIC: &[u8; 4] = b"MSQE";
const EMB_VERSION: u32 = 1;

/// In-memory table of row-indexed frame or sentence embeddings, with a small
/// binary file format: magic, version, count, d_v (all little-endian u32),
/// then count x d_v little-endian f32.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub d_v: usize,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(d_v: usize) -> Self {
        Self { d_v, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.d_v);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: u64) -> Option<&Vec<f64>> {
        self.rows.get(i as usize)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(EMB_MAGIC);
        buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d_v as u32).to_le_bytes());
        for row in &self.rows {
            for &x in row {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| EncError::Io(path.display().to_string(), e.to_string()))?;
        f.write_all(&buf)
            .map_err(|e| EncError::Io(path.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EncError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| EncError::Io(path.display().to_string(), e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncError> {
        if bytes.len() < 16 || &bytes[0..4] != EMB_MAGIC {
            return Err(EncError::BadFile("missing magic".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if u32_at(4) != EMB_VERSION {
            return Err(EncError::BadFile(format!("unsupported version {}", u32_at(4))));
        }
        let count = u32_at(8) as usize;
        let d_v = u32_at(12) as usize;
        let expected = 16 + count * d_v * 4;
        if bytes.len() != expected {
            return Err(EncError::BadFile(format!(
                "expected {expected} bytes for {count} rows of dim {d_v}, got {}",
                bytes.len()
            )));
        }
        let mut rows = Vec::with_capacity(count);
        let mut off = 16;
        for _ in 0..count {
            let mut row = Vec::with_capacity(d_v);
            for _ in 0..d_v {
                row.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
                off += 4;
            }
            rows.push(row);
        }
        Ok(Self { d_v, rows })
    }
}

/// Produces one embedding per frame: a seeded deterministic toy encoder, or
/// lookups into a precomputed table.
#[derive(Debug, Clone)]
pub enum FrameEncoder {
    Toy { seed: u64, d_v: usize },
    File(EmbeddingTable),
}

impl FrameEncoder {
    pub fn d_v(&self) -> usize {
        match self {
            FrameEncoder::Toy { d_v, .. } => *d_v,
            FrameEncoder::File(t) => t.d_v,
        }
    }

    pub fn encode_frame(&self, frame: &FrameRef) -> Result<Vec<f64>, EncError> {
        match self {
            FrameEncoder::Toy { seed, d_v } => {
                let key = match frame {
                    FrameRef::Seed(s) => *s,
                    FrameRef::Row(r) => stream(0x6672616d65, *r),
                };
                let mut rng = Rng::new(stream(*seed, key));
                let mut v: Vec<f64> = (0..*d_v).map(|_| rng.gauss()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= norm);
                Ok(v)
            }
            FrameEncoder::File(table) => match frame {
                FrameRef::Row(r) => table
                    .row(*r)
                    .cloned()
                    .ok_or(EncError::MissingEmbedding(*r)),
                FrameRef::Seed(_) => Err(EncError::SyntheticRefInFileMode),
            },
        }
    }

    /// One embedding per frame, order preserved.
    pub fn encode(&self, payload: &VisualPayload) -> Result<Vec<Vec<f64>>, EncError> {
        payload.frames.iter().map(|f| self.encode_frame(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_frames_identity() {
        assert_eq!(sample_frames(4, 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn sample_frames_midpoints() {
        assert_eq!(sample_frames(8, 4), vec![1, 3, 5, 7]);
    }

    #[test]
    fn sample_frames_upsamples_with_clipping() {
        let idx = sample_frames(3, 8);
        assert_eq!(idx.len(), 8);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        assert!(idx.iter().all(|&i| i < 3));
        // Oracle: evaluate the formula directly.
        let oracle: Vec<usize> = (0..8)
            .map(|i| (((i as f64 + 0.5) * 3.0 / 8.0).floor() as usize).min(2))
            .collect();
        assert_eq!(idx, oracle);
    }

    #[test]
    fn image_payload_has_one_frame() {
        let enc = FrameEncoder::Toy { seed: 1, d_v: 8 };
        let img = VisualPayload::synthetic(5, 1);
        assert_eq!(enc.encode(&img).unwrap().len(), 1);
    }

    #[test]
    fn toy_encoder_is_deterministic_and_unit_norm() {
        let enc = FrameEncoder::Toy { seed: 1, d_v: 16 };
        for i in 0..100u64 {
            let a = enc.encode_frame(&FrameRef::Seed(i)).unwrap();
            let b = enc.encode_frame(&FrameRef::Seed(i)).unwrap();
            assert_eq!(a, b);
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        }
    }

    #[test]
    fn file_encoder_reports_missing_rows() {
        let mut table = EmbeddingTable::new(4);
        table.push(vec![1.0, 0.0, 0.0, 0.0]);
        let enc = FrameEncoder::File(table);
        assert!(enc.encode_frame(&FrameRef::Row(0)).is_ok());
        assert!(matches!(
            enc.encode_frame(&FrameRef::Row(3)),
            Err(EncError::MissingEmbedding(3))
        ));
    }

    #[test]
    fn embedding_table_round_trips() {
        let dir = std::env::temp_dir().join(format!("msq_emb_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bin");
        let mut table = EmbeddingTable::new(3);
        table.push(vec![0.5, -1.25, 2.0]);
        table.push(vec![0.0, 1.0, -3.5]);
        table.save(&path).unwrap();
        let back = EmbeddingTable::load(&path).unwrap();
        assert_eq!(back.d_v, 3);
        assert_eq!(back.len(), 2);
        assert_eq!(back.row(1), table.row(1));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut table = EmbeddingTable::new(3);
        table.push(vec![1.0, 2.0, 3.0]);
        let dir = std::env::temp_dir().join(format!("msq_emb_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        table.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        assert!(EmbeddingTable::from_bytes(&bytes).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
