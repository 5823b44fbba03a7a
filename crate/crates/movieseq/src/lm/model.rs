//! Forward/backward passes, the masked answer loss, the training step, and
//! greedy decoding.

use std::ops::Range;

use super::{LMConfig, LmError, LoRALinear};
use crate::encoders::projector::ProjectorCache;
use crate::encoders::{FrameEncoder, Projector, ProjectorConfig};
use crate::nn;
use crate::seqcore::{PackedSequence, SeqError, Slot, TokenId, EOS};
use crate::store::{Init, ParamStore, TensorId};

struct Layer {
    ln1_g: TensorId,
    ln1_b: TensorId,
    wq: LoRALinear,
    wk: LoRALinear,
    wv: LoRALinear,
    wo: LoRALinear,
    ln2_g: TensorId,
    ln2_b: TensorId,
    w1: LoRALinear,
    w2: LoRALinear,
}

struct LmModel {
    emb: TensorId,
    pos: TensorId,
    layers: Vec<Layer>,
    lnf_g: TensorId,
    lnf_b: TensorId,
    head: TensorId,
}

/// Everything a run owns: parameters (frozen base plus trainable embeddings,
/// adapters, and projector), optimizer moments, the step counter, and the
/// seed that reproduces it all.
pub struct TrainState {
    pub cfg: LMConfig,
    pub store: ParamStore,
    pub projector: Projector,
    model: LmModel,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: LMConfig, proj_cfg: ProjectorConfig, seed: u64) -> Result<Self, LmError> {
        cfg.validate()?;
        if proj_cfg.d_model != cfg.d_model {
            return Err(LmError::ConfigMismatch(format!(
                "projector d_model {} != model d_model {}",
                proj_cfg.d_model, cfg.d_model
            )));
        }
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let emb = store.add("emb", &[cfg.vocab_size, d], true, Init::Gauss { std: 0.08 }, seed);
        let pos = store.add("pos", &[cfg.max_len, d], false, Init::Gauss { std: 0.02 }, seed);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("l{l}.{s}");
            let lora = |store: &mut ParamStore, name: String, out_dim: usize, in_dim: usize| {
                LoRALinear::init(store, &name, out_dim, in_dim, cfg.lora_rank, cfg.lora_alpha, seed)
            };
            layers.push(Layer {
                ln1_g: store.add(&p("ln1.g"), &[d], false, Init::Ones, seed),
                ln1_b: store.add(&p("ln1.b"), &[d], false, Init::Zeros, seed),
                wq: lora(&mut store, p("attn.wq"), d, d),
                wk: lora(&mut store, p("attn.wk"), d, d),
                wv: lora(&mut store, p("attn.wv"), d, d),
                wo: lora(&mut store, p("attn.wo"), d, d),
                ln2_g: store.add(&p("ln2.g"), &[d], false, Init::Ones, seed),
                ln2_b: store.add(&p("ln2.b"), &[d], false, Init::Zeros, seed),
                w1: lora(&mut store, p("ff.w1"), 4 * d, d),
                w2: lora(&mut store, p("ff.w2"), d, 4 * d),
            });
        }
        let lnf_g = store.add("lnf.g", &[d], false, Init::Ones, seed);
        let lnf_b = store.add("lnf.b", &[d], false, Init::Zeros, seed);
        let head = store.add(
            "head",
            &[cfg.vocab_size, d],
            false,
            Init::Gauss {
                std: 1.0 / (d as f64).sqrt(),
            },
            seed,
        );
        let projector = Projector::init(&mut store, proj_cfg, seed);
        Ok(Self {
            cfg,
            store,
            projector,
            model: LmModel {
                emb,
                pos,
                layers,
                lnf_g,
                lnf_b,
                head,
            },
            step: 0,
            seed,
        })
    }

    pub fn proj_cfg(&self) -> ProjectorConfig {
        self.projector.cfg
    }
}

struct LayerCache {
    n1: Vec<Vec<f64>>,
    c1: Vec<nn::LnCache>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    ax_q: Vec<Option<Vec<f64>>>,
    ax_k: Vec<Option<Vec<f64>>>,
    ax_v: Vec<Option<Vec<f64>>>,
    ax_o: Vec<Option<Vec<f64>>>,
    attn: nn::AttnCache,
    attn_out: Vec<Vec<f64>>,
    n2: Vec<Vec<f64>>,
    c2: Vec<nn::LnCache>,
    h: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    ax_1: Vec<Option<Vec<f64>>>,
    ax_2: Vec<Option<Vec<f64>>>,
}

struct Artifacts {
    logits: Vec<Vec<f64>>,
    layer_caches: Vec<LayerCache>,
    cf: Vec<nn::LnCache>,
    proj_caches: Vec<(ProjectorCache, Range<usize>)>,
}

fn project_visuals(
    state: &TrainState,
    packed: &PackedSequence,
    encoder: &FrameEncoder,
) -> Result<(Vec<Vec<f64>>, Vec<(ProjectorCache, Range<usize>)>), LmError> {
    let mut flat: Vec<Vec<f64>> = Vec::with_capacity(packed.visual_slots.len());
    let mut caches = Vec::new();
    for group in &packed.visual_groups {
        let frames: Result<Vec<Vec<f64>>, _> = packed.visual_slots[group.clone()]
            .iter()
            .map(|f| encoder.encode_frame(f))
            .collect();
        let (outs, cache) = state.projector.forward_cached(&state.store, &frames?)?;
        flat.extend(outs);
        caches.push((cache, group.clone()));
    }
    Ok((flat, caches))
}

fn forward_impl(
    state: &TrainState,
    packed: &PackedSequence,
    encoder: &FrameEncoder,
) -> Result<Artifacts, LmError> {
    let cfg = &state.cfg;
    let len = packed.len();
    if len > cfg.max_len {
        return Err(LmError::OverLength {
            len,
            max: cfg.max_len,
        });
    }
    let (vis, proj_caches) = project_visuals(state, packed, encoder)?;
    let d = cfg.d_model;
    let store = &state.store;
    let emb = store.data(state.model.emb);
    let pos = store.data(state.model.pos);
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(len);
    for (i, slot) in packed.slots.iter().enumerate() {
        let base: &[f64] = match slot {
            Slot::Token(t) => {
                let t = *t as usize;
                if t >= cfg.vocab_size {
                    return Err(LmError::Seq(SeqError::InvalidId(t as u32)));
                }
                &emb[t * d..(t + 1) * d]
            }
            Slot::Visual(j) => &vis[*j],
        };
        x.push(base.iter().zip(&pos[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect());
    }

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &state.model.layers {
        let g1 = store.data(layer.ln1_g);
        let b1 = store.data(layer.ln1_b);
        let mut n1 = Vec::with_capacity(len);
        let mut c1 = Vec::with_capacity(len);
        for xi in &x {
            let (y, c) = nn::layernorm(xi, g1, b1);
            n1.push(y);
            c1.push(c);
        }
        let mut q = Vec::with_capacity(len);
        let mut k = Vec::with_capacity(len);
        let mut v = Vec::with_capacity(len);
        let mut ax_q = Vec::with_capacity(len);
        let mut ax_k = Vec::with_capacity(len);
        let mut ax_v = Vec::with_capacity(len);
        for n in &n1 {
            let (qq, aq) = layer.wq.forward(store, n);
            let (kk, ak) = layer.wk.forward(store, n);
            let (vv, av) = layer.wv.forward(store, n);
            q.push(qq);
            k.push(kk);
            v.push(vv);
            ax_q.push(aq);
            ax_k.push(ak);
            ax_v.push(av);
        }
        let (attn_out, attn) = nn::mha(&q, &k, &v, cfg.n_heads, true);
        let mut a = Vec::with_capacity(len);
        let mut ax_o = Vec::with_capacity(len);
        for (xi, ao) in x.iter().zip(&attn_out) {
            let (o, axo) = layer.wo.forward(store, ao);
            a.push(xi.iter().zip(&o).map(|(p, q)| p + q).collect::<Vec<f64>>());
            ax_o.push(axo);
        }
        let g2 = store.data(layer.ln2_g);
        let b2 = store.data(layer.ln2_b);
        let mut n2 = Vec::with_capacity(len);
        let mut c2 = Vec::with_capacity(len);
        for ai in &a {
            let (y, c) = nn::layernorm(ai, g2, b2);
            n2.push(y);
            c2.push(c);
        }
        let mut h = Vec::with_capacity(len);
        let mut s = Vec::with_capacity(len);
        let mut ax_1 = Vec::with_capacity(len);
        let mut ax_2 = Vec::with_capacity(len);
        let mut f = Vec::with_capacity(len);
        for (ai, ni) in a.iter().zip(&n2) {
            let (hi, a1) = layer.w1.forward(store, ni);
            let si: Vec<f64> = hi.iter().map(|&x| nn::silu(x)).collect();
            let (oi, a2) = layer.w2.forward(store, &si);
            f.push(ai.iter().zip(&oi).map(|(p, q)| p + q).collect::<Vec<f64>>());
            h.push(hi);
            s.push(si);
            ax_1.push(a1);
            ax_2.push(a2);
        }
        layer_caches.push(LayerCache {
            n1,
            c1,
            q,
            k,
            v,
            ax_q,
            ax_k,
            ax_v,
            ax_o,
            attn,
            attn_out,
            n2,
            c2,
            h,
            s,
            ax_1,
            ax_2,
        });
        x = f;
    }

    let gf = store.data(state.model.lnf_g);
    let bf = store.data(state.model.lnf_b);
    let head = store.data(state.model.head);
    let mut cf = Vec::with_capacity(len);
    let mut logits = Vec::with_capacity(len);
    for xi in &x {
        let (y, c) = nn::layernorm(xi, gf, bf);
        logits.push(nn::linear(&y, head, cfg.vocab_size, d));
        cf.push(c);
    }

    Ok(Artifacts {
        logits,
        layer_caches,
        cf,
        proj_caches,
    })
}

/// Causal logits for every position; token slots embed through the input
/// table, visual slots inject their projected vectors.
pub fn forward(
    state: &TrainState,
    packed: &PackedSequence,
    encoder: &FrameEncoder,
) -> Result<Vec<Vec<f64>>, LmError> {
    forward_impl(state, packed, encoder).map(|a| a.logits)
}

/// Mean negative log-likelihood over masked targets. `logits[i]` scores
/// `targets[i]`; positions with `mask[i] == false` contribute nothing.
pub fn masked_nll(logits: &[Vec<f64>], targets: &[TokenId], mask: &[bool]) -> Result<f64, LmError> {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len(), mask.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..logits.len() {
        if mask[i] {
            total -= nn::log_softmax_at(&logits[i], targets[i] as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(LmError::EmptyMask);
    }
    Ok(total / count as f64)
}

/// Next-token targets and mask aligned with `logits[..len-1]`.
fn shift_targets(packed: &PackedSequence) -> (Vec<TokenId>, Vec<bool>) {
    let n = packed.len().saturating_sub(1);
    let mut targets = vec![0u32; n];
    let mut mask = vec![false; n];
    for i in 0..n {
        if let Slot::Token(t) = packed.slots[i + 1] {
            targets[i] = t;
            mask[i] = packed.loss_mask[i + 1];
        }
    }
    (targets, mask)
}

/// Teacher-forced mean NLL of the answer tokens (and terminating EOS) of one
/// packed training sample.
pub fn loss(
    state: &TrainState,
    packed: &PackedSequence,
    encoder: &FrameEncoder,
) -> Result<f64, LmError> {
    let logits = forward(state, packed, encoder)?;
    let (targets, mask) = shift_targets(packed);
    masked_nll(&logits[..targets.len()], &targets, &mask)
}

fn backward(state: &mut TrainState, packed: &PackedSequence, art: &Artifacts, dlogits: &[Vec<f64>]) {
    let cfg = state.cfg;
    let d = cfg.d_model;
    let len = art.logits.len();

    // Head is frozen; only propagate into the final hidden states.
    let mut dx: Vec<Vec<f64>> = {
        let store = &mut state.store;
        let mut dgf = vec![0.0; d];
        let mut dbf = vec![0.0; d];
        let out: Vec<Vec<f64>> = {
            let head = store.data(state.model.head);
            let gf = store.data(state.model.lnf_g);
            (0..len)
                .map(|i| {
                    let mut dh = vec![0.0; d];
                    nn::linear_bwd_x(&mut dh, &dlogits[i], head, d);
                    nn::layernorm_bwd(&dh, &art.cf[i], gf, &mut dgf, &mut dbf)
                })
                .collect()
        };
        store.add_grad(state.model.lnf_g, &dgf);
        store.add_grad(state.model.lnf_b, &dbf);
        out
    };

    for (layer, cache) in state.model.layers.iter().zip(&art.layer_caches).rev() {
        let store = &mut state.store;
        // FF branch: f = a + W2 silu(W1 ln2(a))
        let mut dg2 = vec![0.0; d];
        let mut db2 = vec![0.0; d];
        let mut da: Vec<Vec<f64>> = dx.clone();
        for i in 0..len {
            let ds = layer.w2.backward(store, &dx[i], &cache.s[i], &cache.ax_2[i]);
            let dh: Vec<f64> = ds
                .iter()
                .zip(&cache.h[i])
                .map(|(dsi, &hi)| dsi * nn::silu_grad(hi))
                .collect();
            let dn2 = layer.w1.backward(store, &dh, &cache.n2[i], &cache.ax_1[i]);
            let dai = {
                let g2 = store.data(layer.ln2_g);
                nn::layernorm_bwd(&dn2, &cache.c2[i], g2, &mut dg2, &mut db2)
            };
            for c in 0..d {
                da[i][c] += dai[c];
            }
        }
        store.add_grad(layer.ln2_g, &dg2);
        store.add_grad(layer.ln2_b, &db2);

        // Attention branch: a = x + Wo mha(Wq n1, Wk n1, Wv n1)
        let mut d_attn_out: Vec<Vec<f64>> = Vec::with_capacity(len);
        for i in 0..len {
            d_attn_out.push(layer.wo.backward(store, &da[i], &cache.attn_out[i], &cache.ax_o[i]));
        }
        let (dq, dk, dv) = nn::mha_bwd(
            &d_attn_out,
            &cache.q,
            &cache.k,
            &cache.v,
            cfg.n_heads,
            &cache.attn,
        );
        let mut dg1 = vec![0.0; d];
        let mut db1 = vec![0.0; d];
        let mut dx_next: Vec<Vec<f64>> = da;
        for i in 0..len {
            let mut dn1 = layer.wq.backward(store, &dq[i], &cache.n1[i], &cache.ax_q[i]);
            let dn1k = layer.wk.backward(store, &dk[i], &cache.n1[i], &cache.ax_k[i]);
            let dn1v = layer.wv.backward(store, &dv[i], &cache.n1[i], &cache.ax_v[i]);
            for c in 0..d {
                dn1[c] += dn1k[c] + dn1v[c];
            }
            let dxi = {
                let g1 = store.data(layer.ln1_g);
                nn::layernorm_bwd(&dn1, &cache.c1[i], g1, &mut dg1, &mut db1)
            };
            for c in 0..d {
                dx_next[i][c] += dxi[c];
            }
        }
        store.add_grad(layer.ln1_g, &dg1);
        store.add_grad(layer.ln1_b, &db1);
        dx = dx_next;
    }

    // Input splice: token slots flow into the embedding table, visual slots
    // into the projector. The position table is frozen.
    let mut dvis: Vec<Vec<f64>> = vec![vec![0.0; d]; packed.visual_slots.len()];
    let emb_id = state.model.emb;
    for (i, slot) in packed.slots.iter().enumerate() {
        match slot {
            Slot::Token(t) => {
                let row = *t as usize;
                let tensor = state.store.tensor_mut(emb_id);
                if tensor.trainable {
                    for (g, c) in tensor.grad[row * d..(row + 1) * d].iter_mut().zip(&dx[i]) {
                        *g += c;
                    }
                }
            }
            Slot::Visual(j) => dvis[*j] = dx[i].clone(),
        }
    }
    for (cache, range) in &art.proj_caches {
        let dout = dvis[range.clone()].to_vec();
        state.projector.backward(&mut state.store, cache, &dout);
    }
}

/// Accumulate gradients of the batch-mean masked NLL into the store without
/// touching the optimizer. Returns the loss.
pub fn loss_grad(
    state: &mut TrainState,
    batch: &[PackedSequence],
    encoder: &FrameEncoder,
) -> Result<f64, LmError> {
    assert!(!batch.is_empty(), "empty batch");
    let total_masked: usize = batch
        .iter()
        .map(|p| shift_targets(p).1.iter().filter(|&&m| m).count())
        .sum();
    if total_masked == 0 {
        return Err(LmError::EmptyMask);
    }
    state.store.zero_grads();
    let scale = 1.0 / total_masked as f64;
    let mut total_nll = 0.0;
    for packed in batch {
        let art = forward_impl(state, packed, encoder)?;
        let (targets, mask) = shift_targets(packed);
        let mut dlogits = vec![vec![0.0; state.cfg.vocab_size]; art.logits.len()];
        for i in 0..targets.len() {
            if !mask[i] {
                continue;
            }
            total_nll -= nn::log_softmax_at(&art.logits[i], targets[i] as usize);
            let mut probs = art.logits[i].clone();
            nn::softmax(&mut probs);
            for (dl, p) in dlogits[i].iter_mut().zip(&probs) {
                *dl = p * scale;
            }
            dlogits[i][targets[i] as usize] -= scale;
        }
        backward(state, packed, &art, &dlogits);
    }
    Ok(total_nll * scale)
}

/// One optimizer step over a batch. Gradients flow only into the input
/// embeddings, the projector, and the LoRA adapters; returns the pre-update
/// mean loss over all masked positions in the batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &[PackedSequence],
    encoder: &FrameEncoder,
) -> Result<f64, LmError> {
    let loss = loss_grad(state, batch, encoder)?;
    state.step += 1;
    let lr = state.cfg.learning_rate;
    state.store.adam_step(lr, 0.9, 0.95, 1e-8, state.step);
    Ok(loss)
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from a prefix that ends after the assistant tag. Stops at
/// EOS or after `max_new` tokens; the returned tokens exclude EOS.
pub fn generate(
    state: &TrainState,
    prefix: &PackedSequence,
    encoder: &FrameEncoder,
    max_new: usize,
) -> Result<Vec<TokenId>, LmError> {
    if prefix.len() + max_new > state.cfg.max_len {
        return Err(LmError::OverLength {
            len: prefix.len() + max_new,
            max: state.cfg.max_len,
        });
    }
    let mut work = prefix.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = forward(state, &work, encoder)?;
        let next = argmax_lowest(logits.last().expect("nonempty prefix")) as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
        work.slots.push(Slot::Token(next));
        work.loss_mask.push(false);
    }
    Ok(out)
}

/// Length-normalized log-likelihood of `answer` teacher-forced after the
/// prefix. Empty answers score negative infinity.
pub fn answer_loglik(
    state: &TrainState,
    prefix: &PackedSequence,
    answer: &[TokenId],
    encoder: &FrameEncoder,
) -> Result<f64, LmError> {
    if answer.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let len = prefix.len() + answer.len();
    if len > state.cfg.max_len {
        return Err(LmError::OverLength {
            len,
            max: state.cfg.max_len,
        });
    }
    let mut work = prefix.clone();
    for &t in answer {
        work.slots.push(Slot::Token(t));
        work.loss_mask.push(false);
    }
    let logits = forward(state, &work, encoder)?;
    let mut total = 0.0;
    for (j, &t) in answer.iter().enumerate() {
        total += nn::log_softmax_at(&logits[prefix.len() - 1 + j], t as usize);
    }
    Ok(total / answer.len() as f64)
}
