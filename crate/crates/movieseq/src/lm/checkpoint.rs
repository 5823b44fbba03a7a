//! Binary checkpoint format: magic, format version, a key-value text block
//! (model and projector config plus caller extras), seed, step, then named
//! tensors as (name length, name, rank, dims, little-endian f32 data). Adam
//! moments ride along as `adam.m.*` / `adam.v.*` pseudo-tensors so a resumed
//! run replays the uninterrupted trajectory exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{LMConfig, LmError, TrainState};
use crate::encoders::ProjectorConfig;

const MAGIC: &[u8; 4] = b"MSQC";
const VERSION: u32 = 1;

fn config_block(cfg: &LMConfig, proj: &ProjectorConfig, extra: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("cfg.d_model", cfg.d_model.to_string());
    kv("cfg.n_layers", cfg.n_layers.to_string());
    kv("cfg.n_heads", cfg.n_heads.to_string());
    kv("cfg.vocab_size", cfg.vocab_size.to_string());
    kv("cfg.max_len", cfg.max_len.to_string());
    kv("cfg.lora_rank", cfg.lora_rank.to_string());
    kv("cfg.lora_alpha", cfg.lora_alpha.to_string());
    kv("cfg.learning_rate", cfg.learning_rate.to_string());
    kv("cfg.max_new_tokens", cfg.max_new_tokens.to_string());
    kv("proj.d_v", proj.d_v.to_string());
    kv("proj.max_frames", proj.max_frames.to_string());
    kv("proj.n_heads", proj.n_heads.to_string());
    kv("proj.ff_mult", proj.ff_mult.to_string());
    for (k, v) in extra {
        kv(&format!("x.{k}"), v.clone());
    }
    s
}

fn parse_block(
    block: &str,
) -> Result<(LMConfig, ProjectorConfig, BTreeMap<String, String>), LmError> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for line in block.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| LmError::BadCheckpoint(format!("bad config line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        map.get(k)
            .ok_or_else(|| LmError::BadCheckpoint(format!("missing config key {k}")))
    };
    let num = |k: &str| -> Result<usize, LmError> {
        get(k)?
            .parse()
            .map_err(|_| LmError::BadCheckpoint(format!("bad integer for {k}")))
    };
    let fnum = |k: &str| -> Result<f64, LmError> {
        get(k)?
            .parse()
            .map_err(|_| LmError::BadCheckpoint(format!("bad float for {k}")))
    };
    let cfg = LMConfig {
        d_model: num("cfg.d_model")?,
        n_layers: num("cfg.n_layers")?,
        n_heads: num("cfg.n_heads")?,
        vocab_size: num("cfg.vocab_size")?,
        max_len: num("cfg.max_len")?,
        lora_rank: num("cfg.lora_rank")?,
        lora_alpha: fnum("cfg.lora_alpha")?,
        learning_rate: fnum("cfg.learning_rate")?,
        max_new_tokens: num("cfg.max_new_tokens")?,
    };
    let proj = ProjectorConfig {
        d_v: num("proj.d_v")?,
        d_model: cfg.d_model,
        max_frames: num("proj.max_frames")?,
        n_heads: num("proj.n_heads")?,
        ff_mult: num("proj.ff_mult")?,
    };
    let extra = map
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("x.").map(|k| (k.to_string(), v)))
        .collect();
    Ok((cfg, proj, extra))
}

pub fn save_checkpoint(
    state: &TrainState,
    path: &Path,
    extra: &BTreeMap<String, String>,
) -> Result<(), LmError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let block = config_block(&state.cfg, &state.projector.cfg, extra);
    buf.extend_from_slice(&(block.len() as u32).to_le_bytes());
    buf.extend_from_slice(block.as_bytes());
    buf.extend_from_slice(&state.seed.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());

    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for t in state.store.iter() {
        entries.push((t.name.clone(), t.dims.clone(), t.data.clone()));
        if t.trainable {
            entries.push((format!("adam.m.{}", t.name), t.dims.clone(), t.m.clone()));
            entries.push((format!("adam.v.{}", t.name), t.dims.clone(), t.v.clone()));
        }
    }
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, data) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| LmError::Io(path.display().to_string(), e.to_string()))?;
    f.write_all(&buf)
        .map_err(|e| LmError::Io(path.display().to_string(), e.to_string()))
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<(&LMConfig, &ProjectorConfig)>,
) -> Result<(TrainState, BTreeMap<String, String>), LmError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| LmError::Io(path.display().to_string(), e.to_string()))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], LmError> {
        if *off + n > bytes.len() {
            return Err(LmError::BadCheckpoint("truncated file".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != MAGIC {
        return Err(LmError::BadCheckpoint("missing magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(LmError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let block_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let block = std::str::from_utf8(take(&mut off, block_len)?)
        .map_err(|_| LmError::BadCheckpoint("config block is not UTF-8".into()))?
        .to_string();
    let (cfg, proj_cfg, extra) = parse_block(&block)?;
    if let Some((want_cfg, want_proj)) = expected {
        if *want_cfg != cfg {
            return Err(LmError::ConfigMismatch(format!(
                "checkpoint model config {cfg:?} != expected {want_cfg:?}"
            )));
        }
        if *want_proj != proj_cfg {
            return Err(LmError::ConfigMismatch(format!(
                "checkpoint projector config {proj_cfg:?} != expected {want_proj:?}"
            )));
        }
    }
    let seed = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let step = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;

    let mut state = TrainState::new(cfg, proj_cfg, seed)?;
    state.step = step;
    let mut seen = 0usize;
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut off, name_len)?)
            .map_err(|_| LmError::BadCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = take(&mut off, numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();

        let (kind, target) = if let Some(rest) = name.strip_prefix("adam.m.") {
            (1u8, rest.to_string())
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            (2u8, rest.to_string())
        } else {
            (0u8, name.clone())
        };
        let id = state
            .store
            .id(&target)
            .ok_or_else(|| LmError::BadCheckpoint(format!("unknown tensor {name}")))?;
        let tensor = state.store.tensor_mut(id);
        if tensor.dims != dims {
            return Err(LmError::BadCheckpoint(format!(
                "tensor {name} has dims {dims:?}, expected {:?}",
                tensor.dims
            )));
        }
        match kind {
            0 => tensor.data = data,
            1 => tensor.m = data,
            _ => tensor.v = data,
        }
        seen += 1;
    }
    if seen != count {
        return Err(LmError::BadCheckpoint("tensor count mismatch".into()));
    }
    Ok((state, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::FrameEncoder;
    use crate::seqcore::{pack, Vocabulary};

    fn setup() -> (TrainState, Vocabulary, FrameEncoder) {
        let vocab = Vocabulary::from_texts(["a b c d yes no"]);
        let cfg = LMConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            vocab_size: vocab.size(),
            max_len: 64,
            lora_rank: 4,
            learning_rate: 1e-2,
            ..LMConfig::default()
        };
        let proj = ProjectorConfig {
            d_v: 16,
            d_model: 32,
            max_frames: 8,
            n_heads: 4,
            ff_mult: 2,
        };
        let state = TrainState::new(cfg, proj, 5).unwrap();
        let enc = FrameEncoder::Toy { seed: 9, d_v: 16 };
        (state, vocab, enc)
    }

    #[test]
    fn save_load_round_trips_exactly_after_f32_quantization() {
        let (mut state, vocab, enc) = setup();
        let sample = crate::lm::model::tests::tiny_sample(&vocab, "yes no");
        let packed = pack(&sample, &vocab, 64).unwrap();
        for _ in 0..3 {
            crate::lm::train_step(&mut state, &[packed.clone()], &enc).unwrap();
        }
        state.store.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut extra = BTreeMap::new();
        extra.insert("note".to_string(), "hello".to_string());
        save_checkpoint(&state, &path, &extra).unwrap();
        let (loaded, extra2) = load_checkpoint(&path, Some((&state.cfg, &state.projector.cfg))).unwrap();
        assert_eq!(extra2.get("note").map(String::as_str), Some("hello"));
        assert_eq!(loaded.step, state.step);
        for (a, b) in state.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data, "tensor {} diverged", a.name);
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }
        // Continuing to train both replays identical losses.
        let (mut s1, mut s2) = (state, loaded);
        for _ in 0..3 {
            let l1 = crate::lm::train_step(&mut s1, &[packed.clone()], &enc).unwrap();
            let l2 = crate::lm::train_step(&mut s2, &[packed.clone()], &enc).unwrap();
            assert_eq!(l1.to_bits(), l2.to_bits());
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let (mut state, _vocab, _enc) = setup();
        state.store.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &path, &BTreeMap::new()).unwrap();
        let mut other = state.cfg;
        other.n_layers += 1;
        assert!(matches!(
            load_checkpoint(&path, Some((&other, &state.projector.cfg))),
            Err(LmError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let (state, _vocab, _enc) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &path, &BTreeMap::new()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(LmError::BadCheckpoint(_))
        ));
    }
}
