//! Dense-layer math shared by the projector and the language model:
//! row-major linear maps, layer norm, SiLU, multi-head attention, and their
//! hand-written backward passes. Everything is f64 so finite-difference
//! gradient checks are meaningful.

pub const LN_EPS: f64 = 1e-5;

/// y = W x with W row-major [out_dim x in_dim].
pub fn linear(x: &[f64], w: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

pub fn linear_bwd_w(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let in_dim = x.len();
    for (o, &d) in dy.iter().enumerate() {
        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
        for (r, &xi) in row.iter_mut().zip(x) {
            *r += d * xi;
        }
    }
}

pub fn linear_bwd_x(dx: &mut [f64], dy: &[f64], w: &[f64], in_dim: usize) {
    for (o, &d) in dy.iter().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for (xi, &wi) in dx.iter_mut().zip(row) {
            *xi += d * wi;
        }
    }
}

pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: f64,
}

/// y = g * (x - mean) / sqrt(var + eps) + b.
pub fn layernorm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let y = xhat
        .iter()
        .zip(g)
        .zip(b)
        .map(|((xh, gi), bi)| xh * gi + bi)
        .collect();
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates dg/db.
pub fn layernorm_bwd(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    for i in 0..dy.len() {
        dg[i] += dy[i] * cache.xhat[i];
        db[i] += dy[i];
    }
    let dxhat: Vec<f64> = dy.iter().zip(g).map(|(d, gi)| d * gi).collect();
    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat = dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(dxh, xh)| cache.rstd * (dxh - mean_dxhat - xh * mean_dxhat_xhat))
        .collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// In-place stable softmax.
pub fn softmax(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// log(softmax(x)[target]) without materializing the probabilities.
pub fn log_softmax_at(x: &[f64], target: usize) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x[target] - lse
}

pub struct AttnCache {
    /// probs[h][i] is the softmaxed score row of query i in head h
    /// (length i+1 when causal, full length otherwise).
    pub probs: Vec<Vec<Vec<f64>>>,
    pub causal: bool,
}

/// Multi-head scaled dot-product attention over one sequence.
/// q, k, v: per-position vectors of width d = n_heads * head_dim.
pub fn mha(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    n_heads: usize,
    causal: bool,
) -> (Vec<Vec<f64>>, AttnCache) {
    let len = q.len();
    let d = q[0].len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; d]; len];
    let mut probs = vec![Vec::with_capacity(len); n_heads];
    for h in 0..n_heads {
        let lo = h * hd;
        let hi = lo + hd;
        for i in 0..len {
            let jmax = if causal { i + 1 } else { len };
            let mut row: Vec<f64> = (0..jmax)
                .map(|j| {
                    q[i][lo..hi]
                        .iter()
                        .zip(&k[j][lo..hi])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            softmax(&mut row);
            for (j, &p) in row.iter().enumerate() {
                for c in lo..hi {
                    out[i][c] += p * v[j][c];
                }
            }
            probs[h].push(row);
        }
    }
    (out, AttnCache { probs, causal })
}

/// Backward of `mha`. Returns (dq, dk, dv).
#[allow(clippy::type_complexity)]
pub fn mha_bwd(
    dout: &[Vec<f64>],
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    n_heads: usize,
    cache: &AttnCache,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let len = q.len();
    let d = q[0].len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![vec![0.0; d]; len];
    let mut dk = vec![vec![0.0; d]; len];
    let mut dv = vec![vec![0.0; d]; len];
    for h in 0..n_heads {
        let lo = h * hd;
        let hi = lo + hd;
        for i in 0..len {
            let row = &cache.probs[h][i];
            let jmax = row.len();
            // dp_ij = dout_i . v_j ; dv_j += p_ij dout_i
            let mut dp = vec![0.0; jmax];
            for j in 0..jmax {
                let mut acc = 0.0;
                for c in lo..hi {
                    acc += dout[i][c] * v[j][c];
                    dv[j][c] += row[j] * dout[i][c];
                }
                dp[j] = acc;
            }
            // softmax backward: ds = p * (dp - sum(p*dp))
            let dot: f64 = row.iter().zip(&dp).map(|(p, d)| p * d).sum();
            for j in 0..jmax {
                let ds = row[j] * (dp[j] - dot) * scale;
                for c in lo..hi {
                    dq[i][c] += ds * k[j][c];
                    dk[j][c] += ds * q[i][c];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randv(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gauss() * 0.5).collect()
    }

    #[test]
    fn linear_matches_manual() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let y = linear(&[1.0, 0.0, -1.0], &w, 2, 3);
        assert_eq!(y, vec![-2.0, -2.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut x = vec![1.0, 2.0, 3.0];
        softmax(&mut x);
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(x[2] > x[1] && x[1] > x[0]);
    }

    #[test]
    fn layernorm_grad_matches_finite_difference() {
        let mut rng = Rng::new(11);
        let x = randv(&mut rng, 6);
        let g = randv(&mut rng, 6);
        let b = randv(&mut rng, 6);
        let dy = randv(&mut rng, 6);
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = layernorm(x, &g, &b);
            y.iter().zip(&dy).map(|(a, c)| a * c).sum()
        };
        let (_, cache) = layernorm(&x, &g, &b);
        let mut dg = vec![0.0; 6];
        let mut db = vec![0.0; 6];
        let dx = layernorm_bwd(&dy, &cache, &g, &mut dg, &mut db);
        let eps = 1e-6;
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!(
                (num - dx[i]).abs() < 1e-7,
                "dx[{i}] analytic {} numeric {num}",
                dx[i]
            );
        }
    }

    #[test]
    fn mha_grad_matches_finite_difference() {
        let mut rng = Rng::new(5);
        let len = 3;
        let d = 4;
        let q: Vec<Vec<f64>> = (0..len).map(|_| randv(&mut rng, d)).collect();
        let k: Vec<Vec<f64>> = (0..len).map(|_| randv(&mut rng, d)).collect();
        let v: Vec<Vec<f64>> = (0..len).map(|_| randv(&mut rng, d)).collect();
        let dout: Vec<Vec<f64>> = (0..len).map(|_| randv(&mut rng, d)).collect();
        for causal in [false, true] {
            let loss = |q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]| -> f64 {
                let (out, _) = mha(q, k, v, 2, causal);
                out.iter()
                    .zip(&dout)
                    .map(|(o, d)| o.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            };
            let (_, cache) = mha(&q, &k, &v, 2, causal);
            let (dq, dk, dv) = mha_bwd(&dout, &q, &k, &v, 2, &cache);
            let eps = 1e-6;
            for (which, (analytic, base)) in
                [(0, (&dq, &q)), (1, (&dk, &k)), (2, (&dv, &v))]
            {
                for i in 0..len {
                    for c in 0..d {
                        let perturb = |delta: f64| {
                            let mut qq = q.clone();
                            let mut kk = k.clone();
                            let mut vv = v.clone();
                            let target = match which {
                                0 => &mut qq,
                                1 => &mut kk,
                                _ => &mut vv,
                            };
                            target[i][c] = base[i][c] + delta;
                            loss(&qq, &kk, &vv)
                        };
                        let num = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                        let ana = analytic[i][c];
                        assert!(
                            (num - ana).abs() < 1e-6,
                            "causal={causal} tensor {which} [{i}][{c}] analytic {ana} numeric {num}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn causal_mha_ignores_future() {
        let mut rng = Rng::new(9);
        let d = 4;
        let q: Vec<Vec<f64>> = (0..3).map(|_| randv(&mut rng, d)).collect();
        let k: Vec<Vec<f64>> = (0..3).map(|_| randv(&mut rng, d)).collect();
        let v: Vec<Vec<f64>> = (0..3).map(|_| randv(&mut rng, d)).collect();
        let (out, _) = mha(&q, &k, &v, 2, true);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2[2] = randv(&mut rng, d);
        v2[2] = randv(&mut rng, d);
        let (out2, _) = mha(&q, &k2, &v2, 2, true);
        assert_eq!(out[0], out2[0]);
        assert_eq!(out[1], out2[1]);
        assert_ne!(out[2], out2[2]);
    }
}
