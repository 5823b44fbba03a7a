//! Decoder-only transformer with a frozen randomly-initialized base,
//! trainable input embeddings, LoRA adapters on every attention and
//! feed-forward linear map, a masked autoregressive loss over answer tokens,
//! and greedy decoding.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    answer_loglik, forward, generate, loss, loss_grad, masked_nll, train_step, TrainState,
};

use thiserror::Error;

use crate::encoders::EncError;
use crate::seqcore::SeqError;
use crate::store::{Init, ParamStore, TensorId};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("sequence length {len} exceeds model max length {max}")]
    OverLength { len: usize, max: usize },
    #[error("no masked positions to compute a loss over")]
    EmptyMask,
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error(transparent)]
    Enc(#[from] EncError),
    #[error(transparent)]
    Seq(#[from] SeqError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LMConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// LoRA rank; 0 disables the adapters entirely.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub learning_rate: f64,
    pub max_new_tokens: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 0,
            max_len: 1024,
            lora_rank: 16,
            lora_alpha: 16.0,
            learning_rate: 3e-5,
            max_new_tokens: 64,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.d_model % self.n_heads != 0 {
            return Err(LmError::ConfigMismatch(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(LmError::ConfigMismatch("vocab_size is zero".into()));
        }
        Ok(())
    }
}

/// A frozen weight with an optional low-rank adapter: y = W x + (alpha/r) B(A x).
/// B starts at zero so the initial map equals the frozen one exactly.
#[derive(Debug, Clone)]
pub struct LoRALinear {
    pub w: TensorId,
    pub adapter: Option<(TensorId, TensorId)>,
    pub out_dim: usize,
    pub in_dim: usize,
    pub rank: usize,
    pub scale: f64,
}

impl LoRALinear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Self {
        let w = store.add(
            name,
            &[out_dim, in_dim],
            false,
            Init::Gauss {
                std: 1.0 / (in_dim as f64).sqrt(),
            },
            seed,
        );
        let adapter = (rank > 0).then(|| {
            let a = store.add(
                &format!("{name}.lora_a"),
                &[rank, in_dim],
                true,
                Init::Gauss {
                    std: 1.0 / (in_dim as f64).sqrt(),
                },
                seed,
            );
            let b = store.add(&format!("{name}.lora_b"), &[out_dim, rank], true, Init::Zeros, seed);
            (a, b)
        });
        Self {
            w,
            adapter,
            out_dim,
            in_dim,
            rank,
            scale: if rank > 0 { alpha / rank as f64 } else { 0.0 },
        }
    }

    /// Forward; returns (y, A x) where the adapter activation is kept for the
    /// backward pass.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        let mut y = crate::nn::linear(x, store.data(self.w), self.out_dim, self.in_dim);
        let ax = self.adapter.map(|(a, b)| {
            let ax = crate::nn::linear(x, store.data(a), self.rank, self.in_dim);
            let bax = crate::nn::linear(&ax, store.data(b), self.out_dim, self.rank);
            for (yi, bi) in y.iter_mut().zip(&bax) {
                *yi += self.scale * bi;
            }
            ax
        });
        (y, ax)
    }

    /// Accumulate adapter gradients and return dL/dx. The frozen weight never
    /// receives a gradient.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        dy: &[f64],
        x: &[f64],
        ax: &Option<Vec<f64>>,
    ) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        crate::nn::linear_bwd_x(&mut dx, dy, store.data(self.w), self.in_dim);
        if let (Some((a, b)), Some(ax)) = (self.adapter, ax) {
            let sdy: Vec<f64> = dy.iter().map(|d| d * self.scale).collect();
            let mut db = vec![0.0; self.out_dim * self.rank];
            crate::nn::linear_bwd_w(&mut db, &sdy, ax);
            let mut d_ax = vec![0.0; self.rank];
            crate::nn::linear_bwd_x(&mut d_ax, &sdy, store.data(b), self.rank);
            let mut da = vec![0.0; self.rank * self.in_dim];
            crate::nn::linear_bwd_w(&mut da, &d_ax, x);
            crate::nn::linear_bwd_x(&mut dx, &d_ax, store.data(a), self.in_dim);
            store.add_grad(a, &da);
            store.add_grad(b, &db);
        }
        dx
    }
}

/// Exact parameter accounting over a state's tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
}

pub fn count_trainable(state: &TrainState) -> ParamCounts {
    let (trainable, frozen) = state.store.count_params();
    ParamCounts {
        trainable,
        frozen,
        fraction: trainable as f64 / (trainable + frozen) as f64,
    }
}
