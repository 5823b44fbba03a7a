//! Single-block temporal transformer that maps per-frame embeddings (d_v)
//! into model space (d_model). Each frame run gets a learned temporal
//! position row added before full (non-causal) self-attention; every
//! parameter here is trainable.

use super::EncError;
use crate::nn;
use crate::store::{Init, ParamStore, TensorId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorConfig {
    pub d_v: usize,
    pub d_model: usize,
    pub max_frames: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_v: 32,
            d_model: 64,
            max_frames: 64,
            n_heads: 4,
            ff_mult: 4,
        }
    }
}

#[derive(Debug, Clone)]
struct Ids {
    pos: TensorId,
    ln1_g: TensorId,
    ln1_b: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
    wo: TensorId,
    ln2_g: TensorId,
    ln2_b: TensorId,
    w1: TensorId,
    w2: TensorId,
    out: TensorId,
}

#[derive(Debug, Clone)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    ids: Ids,
}

pub struct ProjectorCache {
    n1: Vec<Vec<f64>>,
    c1: Vec<nn::LnCache>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: nn::AttnCache,
    attn_out: Vec<Vec<f64>>,
    n2: Vec<Vec<f64>>,
    c2: Vec<nn::LnCache>,
    h: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
}

pub const TENSOR_NAMES: [&str; 12] = [
    "proj.pos",
    "proj.ln1.g",
    "proj.ln1.b",
    "proj.attn.wq",
    "proj.attn.wk",
    "proj.attn.wv",
    "proj.attn.wo",
    "proj.ln2.g",
    "proj.ln2.b",
    "proj.ff.w1",
    "proj.ff.w2",
    "proj.out",
];

impl Projector {
    /// Register the projector tensors in the store.
    pub fn init(store: &mut ParamStore, cfg: ProjectorConfig, seed: u64) -> Self {
        assert_eq!(cfg.d_v % cfg.n_heads, 0, "d_v must divide into heads");
        let d = cfg.d_v;
        let ff = cfg.ff_mult * d;
        let attn_std = 1.0 / (d as f64).sqrt();
        let ids = Ids {
            pos: store.add("proj.pos", &[cfg.max_frames, d], true, Init::Gauss { std: 0.02 }, seed),
            ln1_g: store.add("proj.ln1.g", &[d], true, Init::Ones, seed),
            ln1_b: store.add("proj.ln1.b", &[d], true, Init::Zeros, seed),
            wq: store.add("proj.attn.wq", &[d, d], true, Init::Gauss { std: attn_std }, seed),
            wk: store.add("proj.attn.wk", &[d, d], true, Init::Gauss { std: attn_std }, seed),
            wv: store.add("proj.attn.wv", &[d, d], true, Init::Gauss { std: attn_std }, seed),
            wo: store.add("proj.attn.wo", &[d, d], true, Init::Gauss { std: attn_std }, seed),
            ln2_g: store.add("proj.ln2.g", &[d], true, Init::Ones, seed),
            ln2_b: store.add("proj.ln2.b", &[d], true, Init::Zeros, seed),
            w1: store.add("proj.ff.w1", &[ff, d], true, Init::Gauss { std: attn_std }, seed),
            w2: store.add(
                "proj.ff.w2",
                &[d, ff],
                true,
                Init::Gauss { std: 1.0 / (ff as f64).sqrt() },
                seed,
            ),
            out: store.add("proj.out", &[cfg.d_model, d], true, Init::Gauss { std: attn_std }, seed),
        };
        Self { cfg, ids }
    }

    /// Resolve an already-registered projector (e.g. after checkpoint load).
    pub fn attach(store: &ParamStore, cfg: ProjectorConfig) -> Option<Self> {
        let ids = Ids {
            pos: store.id("proj.pos")?,
            ln1_g: store.id("proj.ln1.g")?,
            ln1_b: store.id("proj.ln1.b")?,
            wq: store.id("proj.attn.wq")?,
            wk: store.id("proj.attn.wk")?,
            wv: store.id("proj.attn.wv")?,
            wo: store.id("proj.attn.wo")?,
            ln2_g: store.id("proj.ln2.g")?,
            ln2_b: store.id("proj.ln2.b")?,
            w1: store.id("proj.ff.w1")?,
            w2: store.id("proj.ff.w2")?,
            out: store.id("proj.out")?,
        };
        Some(Self { cfg, ids })
    }

    /// Project one frame run; output length equals input length, each output
    /// has dimension d_model.
    pub fn forward(&self, store: &ParamStore, frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EncError> {
        self.forward_cached(store, frames).map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        store: &ParamStore,
        frames: &[Vec<f64>],
    ) -> Result<(Vec<Vec<f64>>, ProjectorCache), EncError> {
        let d = self.cfg.d_v;
        let ff = self.cfg.ff_mult * d;
        if frames.len() > self.cfg.max_frames {
            return Err(EncError::TooManyFrames {
                got: frames.len(),
                max: self.cfg.max_frames,
            });
        }
        let pos = store.data(self.ids.pos);
        let x: Vec<Vec<f64>> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| f.iter().zip(&pos[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect())
            .collect();

        let g1 = store.data(self.ids.ln1_g);
        let b1 = store.data(self.ids.ln1_b);
        let mut n1 = Vec::with_capacity(x.len());
        let mut c1 = Vec::with_capacity(x.len());
        for xi in &x {
            let (y, c) = nn::layernorm(xi, g1, b1);
            n1.push(y);
            c1.push(c);
        }

        let wq = store.data(self.ids.wq);
        let wk = store.data(self.ids.wk);
        let wv = store.data(self.ids.wv);
        let q: Vec<Vec<f64>> = n1.iter().map(|n| nn::linear(n, wq, d, d)).collect();
        let k: Vec<Vec<f64>> = n1.iter().map(|n| nn::linear(n, wk, d, d)).collect();
        let v: Vec<Vec<f64>> = n1.iter().map(|n| nn::linear(n, wv, d, d)).collect();
        let (attn_out, attn) = nn::mha(&q, &k, &v, self.cfg.n_heads, false);

        let wo = store.data(self.ids.wo);
        let a: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn_out)
            .map(|(xi, ao)| {
                let o = nn::linear(ao, wo, d, d);
                xi.iter().zip(&o).map(|(p, q)| p + q).collect()
            })
            .collect();

        let g2 = store.data(self.ids.ln2_g);
        let b2 = store.data(self.ids.ln2_b);
        let mut n2 = Vec::with_capacity(a.len());
        let mut c2 = Vec::with_capacity(a.len());
        for ai in &a {
            let (y, c) = nn::layernorm(ai, g2, b2);
            n2.push(y);
            c2.push(c);
        }

        let w1 = store.data(self.ids.w1);
        let w2 = store.data(self.ids.w2);
        let h: Vec<Vec<f64>> = n2.iter().map(|n| nn::linear(n, w1, ff, d)).collect();
        let s: Vec<Vec<f64>> = h
            .iter()
            .map(|hi| hi.iter().map(|&x| nn::silu(x)).collect())
            .collect();
        let f: Vec<Vec<f64>> = a
            .iter()
            .zip(&s)
            .map(|(ai, si)| {
                let o = nn::linear(si, w2, d, ff);
                ai.iter().zip(&o).map(|(p, q)| p + q).collect()
            })
            .collect();

        let wout = store.data(self.ids.out);
        let y: Vec<Vec<f64>> = f
            .iter()
            .map(|fi| nn::linear(fi, wout, self.cfg.d_model, d))
            .collect();

        Ok((
            y,
            ProjectorCache {
                n1,
                c1,
                q,
                k,
                v,
                attn,
                attn_out,
                n2,
                c2,
                h,
                s,
                f,
            },
        ))
    }

    /// Accumulate gradients for all projector tensors given dL/d(output).
    /// Returns dL/d(frame embeddings), unused with fixed encoders.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ProjectorCache,
        dout: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let d = self.cfg.d_v;
        let ff = self.cfg.ff_mult * d;
        let len = dout.len();

        let mut d_out_w = vec![0.0; self.cfg.d_model * d];
        let mut df: Vec<Vec<f64>> = vec![vec![0.0; d]; len];
        {
            let wout = store.data(self.ids.out);
            for i in 0..len {
                nn::linear_bwd_w(&mut d_out_w, &dout[i], &cache.f[i]);
                nn::linear_bwd_x(&mut df[i], &dout[i], wout, d);
            }
        }

        // FF branch: f = a + W2 silu(W1 n2)
        let mut dw1 = vec![0.0; ff * d];
        let mut dw2 = vec![0.0; d * ff];
        let mut dg2 = vec![0.0; d];
        let mut db2 = vec![0.0; d];
        let mut da: Vec<Vec<f64>> = df.clone();
        {
            let w1 = store.data(self.ids.w1);
            let w2 = store.data(self.ids.w2);
            let g2 = store.data(self.ids.ln2_g);
            for i in 0..len {
                let mut ds = vec![0.0; ff];
                nn::linear_bwd_w(&mut dw2, &df[i], &cache.s[i]);
                nn::linear_bwd_x(&mut ds, &df[i], w2, ff);
                let dh: Vec<f64> = ds
                    .iter()
                    .zip(&cache.h[i])
                    .map(|(dsi, &hi)| dsi * nn::silu_grad(hi))
                    .collect();
                let mut dn2 = vec![0.0; d];
                nn::linear_bwd_w(&mut dw1, &dh, &cache.n2[i]);
                nn::linear_bwd_x(&mut dn2, &dh, w1, d);
                let dai = nn::layernorm_bwd(&dn2, &cache.c2[i], g2, &mut dg2, &mut db2);
                for c in 0..d {
                    da[i][c] += dai[c];
                }
            }
        }

        // Attention branch: a = x + Wo mha(Wq n1, Wk n1, Wv n1)
        let mut dwo = vec![0.0; d * d];
        let mut d_attn_out: Vec<Vec<f64>> = vec![vec![0.0; d]; len];
        {
            let wo = store.data(self.ids.wo);
            for i in 0..len {
                nn::linear_bwd_w(&mut dwo, &da[i], &cache.attn_out[i]);
                nn::linear_bwd_x(&mut d_attn_out[i], &da[i], wo, d);
            }
        }
        let (dq, dk, dv) = nn::mha_bwd(
            &d_attn_out,
            &cache.q,
            &cache.k,
            &cache.v,
            self.cfg.n_heads,
            &cache.attn,
        );
        let mut dwq = vec![0.0; d * d];
        let mut dwk = vec![0.0; d * d];
        let mut dwv = vec![0.0; d * d];
        let mut dg1 = vec![0.0; d];
        let mut db1 = vec![0.0; d];
        let mut dx: Vec<Vec<f64>> = da.clone();
        {
            let wq = store.data(self.ids.wq);
            let wk = store.data(self.ids.wk);
            let wv = store.data(self.ids.wv);
            let g1 = store.data(self.ids.ln1_g);
            for i in 0..len {
                let mut dn1 = vec![0.0; d];
                nn::linear_bwd_w(&mut dwq, &dq[i], &cache.n1[i]);
                nn::linear_bwd_x(&mut dn1, &dq[i], wq, d);
                nn::linear_bwd_w(&mut dwk, &dk[i], &cache.n1[i]);
                nn::linear_bwd_x(&mut dn1, &dk[i], wk, d);
                nn::linear_bwd_w(&mut dwv, &dv[i], &cache.n1[i]);
                nn::linear_bwd_x(&mut dn1, &dv[i], wv, d);
                let dxi = nn::layernorm_bwd(&dn1, &cache.c1[i], g1, &mut dg1, &mut db1);
                for c in 0..d {
                    dx[i][c] += dxi[c];
                }
            }
        }

        // x = frame + pos[i]
        let mut dpos = vec![0.0; self.cfg.max_frames * d];
        for (i, dxi) in dx.iter().enumerate() {
            for c in 0..d {
                dpos[i * d + c] += dxi[c];
            }
        }

        store.add_grad(self.ids.out, &d_out_w);
        store.add_grad(self.ids.w1, &dw1);
        store.add_grad(self.ids.w2, &dw2);
        store.add_grad(self.ids.ln2_g, &dg2);
        store.add_grad(self.ids.ln2_b, &db2);
        store.add_grad(self.ids.wo, &dwo);
        store.add_grad(self.ids.wq, &dwq);
        store.add_grad(self.ids.wk, &dwk);
        store.add_grad(self.ids.wv, &dwv);
        store.add_grad(self.ids.ln1_g, &dg1);
        store.add_grad(self.ids.ln1_b, &db1);
        store.add_grad(self.ids.pos, &dpos);

        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{FrameEncoder, FrameRef};

    fn setup(d_v: usize, d_model: usize, max_frames: usize) -> (ParamStore, Projector) {
        let mut store = ParamStore::new();
        let proj = Projector::init(
            &mut store,
            ProjectorConfig {
                d_v,
                d_model,
                max_frames,
                n_heads: 4,
                ff_mult: 4,
            },
            42,
        );
        (store, proj)
    }

    fn frames(n: usize, d_v: usize) -> Vec<Vec<f64>> {
        let enc = FrameEncoder::Toy { seed: 7, d_v };
        (0..n)
            .map(|i| enc.encode_frame(&FrameRef::Seed(i as u64)).unwrap())
            .collect()
    }

    #[test]
    fn output_length_and_dim_are_preserved() {
        let (store, proj) = setup(16, 24, 8);
        for k in 1..=8 {
            let y = proj.forward(&store, &frames(k, 16)).unwrap();
            assert_eq!(y.len(), k);
            assert!(y.iter().all(|v| v.len() == 24));
        }
    }

    #[test]
    fn too_many_frames_is_an_error() {
        let (store, proj) = setup(16, 24, 4);
        assert!(matches!(
            proj.forward(&store, &frames(5, 16)),
            Err(EncError::TooManyFrames { got: 5, max: 4 })
        ));
    }

    #[test]
    fn zero_position_table_makes_projection_permutation_equivariant() {
        let (mut store, proj) = setup(16, 24, 8);
        let pos = store.id("proj.pos").unwrap();
        store.data_mut(pos).iter_mut().for_each(|x| *x = 0.0);
        let mut fs = frames(4, 16);
        let y = proj.forward(&store, &fs).unwrap();
        fs.swap(1, 3);
        let y2 = proj.forward(&store, &fs).unwrap();
        let close = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
        };
        assert!(close(&y[1], &y2[3]));
        assert!(close(&y[3], &y2[1]));
        assert!(close(&y[0], &y2[0]));
    }

    #[test]
    fn nonzero_positions_break_frame_swaps() {
        let (store, proj) = setup(16, 24, 8);
        let mut fs = frames(4, 16);
        let y = proj.forward(&store, &fs).unwrap();
        fs.swap(1, 3);
        let y2 = proj.forward(&store, &fs).unwrap();
        let diff: f64 = y
            .iter()
            .flatten()
            .zip(y2.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, proj) = setup(16, 8, 6);
        let fs = frames(3, 16);
        // Fixed linear functional of the output as the scalar loss.
        let weights: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..8).map(|j| ((i * 8 + j) as f64 * 0.37).sin()).collect())
            .collect();
        let loss = |store: &ParamStore| -> f64 {
            let y = proj.forward(store, &fs).unwrap();
            y.iter()
                .zip(&weights)
                .map(|(yi, wi)| yi.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        store.zero_grads();
        let (_, cache) = proj.forward_cached(&store, &fs).unwrap();
        proj.backward(&mut store, &cache, &weights);
        let eps = 1e-5;
        for name in TENSOR_NAMES {
            let id = store.id(name).unwrap();
            let n = store.data(id).len();
            for i in 0..n {
                let orig = store.data(id)[i];
                store.data_mut(id)[i] = orig + eps;
                let up = loss(&store);
                store.data_mut(id)[i] = orig - eps;
                let down = loss(&store);
                store.data_mut(id)[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = store.grad(id)[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom <= 1e-4,
                    "{name}[{i}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }
}
