//! Run configuration: model and projector hyperparameters, per-task frame
//! counts, context budgets, and paths. Config files are flat UTF-8
//! `key = value` lines; `#` starts a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::encoders::ProjectorConfig;
use crate::lm::LMConfig;

use super::manifest::Task;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub plots_dir: Option<PathBuf>,
    pub subs_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lm: LMConfig,
    pub proj: ProjectorConfig,
    /// Frames per video by task; identification uses every available frame.
    pub frames_ad: usize,
    pub frames_caption: usize,
    pub frames_retrieve: usize,
    pub frames_mcq: usize,
    pub frames_classify: usize,
    /// Token budget for plot and subtitle context text.
    pub context_budget: usize,
    /// Default sentence-window size for temporal plot sampling.
    pub plot_window: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Toy text-embedder dimension (plot retrieval, caption retrieval).
    pub embed_dim: usize,
    /// Cap records per task when co-training on concatenated manifests.
    pub per_task_limit: Option<usize>,
    /// Rephrase training questions with the template pools.
    pub rephrase: bool,
    /// Explicit label set for classification (else derived from records).
    pub labels: Option<Vec<String>>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lm: LMConfig::default(),
            proj: ProjectorConfig::default(),
            frames_ad: 8,
            frames_caption: 32,
            frames_retrieve: 32,
            frames_mcq: 32,
            frames_classify: 64,
            context_budget: 512,
            plot_window: 5,
            seed: 0,
            epochs: 20,
            batch_size: 8,
            embed_dim: 64,
            per_task_limit: None,
            rephrase: false,
            labels: None,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Frames to sample per video for a task; None means keep every frame.
    pub fn frames_for(&self, task: Task) -> Option<usize> {
        match task {
            Task::Ad => Some(self.frames_ad),
            Task::Caption => Some(self.frames_caption),
            Task::Retrieve => Some(self.frames_retrieve),
            Task::Mcq => Some(self.frames_mcq),
            Task::Classify => Some(self.frames_classify),
            Task::Identify => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key = value", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let parse_usize = || value.parse::<usize>().map_err(|_| format!("bad integer {value:?}"));
        let parse_u64 = || value.parse::<u64>().map_err(|_| format!("bad integer {value:?}"));
        let parse_f64 = || value.parse::<f64>().map_err(|_| format!("bad float {value:?}"));
        let parse_bool = || match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(format!("bad boolean {value:?}")),
        };
        match key {
            "d_model" => {
                self.lm.d_model = parse_usize()?;
                self.proj.d_model = self.lm.d_model;
            }
            "n_layers" => self.lm.n_layers = parse_usize()?,
            "n_heads" => self.lm.n_heads = parse_usize()?,
            "max_len" => self.lm.max_len = parse_usize()?,
            "lora_rank" => self.lm.lora_rank = parse_usize()?,
            "lora_alpha" => self.lm.lora_alpha = parse_f64()?,
            "learning_rate" => self.lm.learning_rate = parse_f64()?,
            "max_new_tokens" => self.lm.max_new_tokens = parse_usize()?,
            "d_v" => self.proj.d_v = parse_usize()?,
            "max_frames" => self.proj.max_frames = parse_usize()?,
            "proj_heads" => self.proj.n_heads = parse_usize()?,
            "proj_ff_mult" => self.proj.ff_mult = parse_usize()?,
            "frames_ad" => self.frames_ad = parse_usize()?,
            "frames_caption" => self.frames_caption = parse_usize()?,
            "frames_retrieve" => self.frames_retrieve = parse_usize()?,
            "frames_mcq" => self.frames_mcq = parse_usize()?,
            "frames_classify" => self.frames_classify = parse_usize()?,
            "context_budget" => self.context_budget = parse_usize()?,
            "plot_window" => self.plot_window = parse_usize()?,
            "seed" => self.seed = parse_u64()?,
            "epochs" => self.epochs = parse_usize()?,
            "batch_size" => self.batch_size = parse_usize()?,
            "embed_dim" => self.embed_dim = parse_usize()?,
            "per_task_limit" => self.per_task_limit = Some(parse_usize()?),
            "rephrase" => self.rephrase = parse_bool()?,
            "labels" => {
                self.labels = Some(value.split(',').map(|s| s.trim().to_string()).collect())
            }
            "vocab" => self.paths.vocab = Some(PathBuf::from(value)),
            "manifest" => self.paths.manifest = Some(PathBuf::from(value)),
            "embeddings" => self.paths.embeddings = Some(PathBuf::from(value)),
            "plots_dir" => self.paths.plots_dir = Some(PathBuf::from(value)),
            "subs_dir" => self.paths.subs_dir = Some(PathBuf::from(value)),
            "templates_dir" => self.paths.templates_dir = Some(PathBuf::from(value)),
            "checkpoints" => self.paths.checkpoints = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Flat key/value echo for reports and checkpoint extras.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("d_model", self.lm.d_model.to_string());
        put("n_layers", self.lm.n_layers.to_string());
        put("n_heads", self.lm.n_heads.to_string());
        put("max_len", self.lm.max_len.to_string());
        put("lora_rank", self.lm.lora_rank.to_string());
        put("lora_alpha", self.lm.lora_alpha.to_string());
        put("learning_rate", self.lm.learning_rate.to_string());
        put("max_new_tokens", self.lm.max_new_tokens.to_string());
        put("d_v", self.proj.d_v.to_string());
        put("max_frames", self.proj.max_frames.to_string());
        put("proj_heads", self.proj.n_heads.to_string());
        put("proj_ff_mult", self.proj.ff_mult.to_string());
        put("frames_ad", self.frames_ad.to_string());
        put("frames_caption", self.frames_caption.to_string());
        put("frames_retrieve", self.frames_retrieve.to_string());
        put("frames_mcq", self.frames_mcq.to_string());
        put("frames_classify", self.frames_classify.to_string());
        put("context_budget", self.context_budget.to_string());
        put("plot_window", self.plot_window.to_string());
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("embed_dim", self.embed_dim.to_string());
        if let Some(n) = self.per_task_limit {
            put("per_task_limit", n.to_string());
        }
        put("rephrase", self.rephrase.to_string());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stated_values() {
        let c = RunConfig::default();
        assert_eq!(c.lm.lora_rank, 16);
        assert_eq!(c.lm.lora_alpha, 16.0);
        assert_eq!(c.lm.learning_rate, 3e-5);
        assert_eq!(c.lm.max_new_tokens, 64);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.context_budget, 512);
        assert_eq!(c.frames_ad, 8);
        assert_eq!(c.frames_caption, 32);
        assert_eq!(c.frames_retrieve, 32);
        assert_eq!(c.frames_mcq, 32);
        assert_eq!(c.frames_classify, 64);
        assert_eq!(c.frames_for(Task::Identify), None);
    }

    #[test]
    fn parse_and_override() {
        let mut c = RunConfig::default();
        c.apply_text("d_model = 32 # comment\nepochs = 2\nrephrase = true\nlabels = a, b\nseed = 9")
            .unwrap();
        assert_eq!(c.lm.d_model, 32);
        assert_eq!(c.proj.d_model, 32);
        assert_eq!(c.epochs, 2);
        assert!(c.rephrase);
        assert_eq!(c.labels.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("nope = 1").is_err());
    }
}
