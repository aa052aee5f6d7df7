//! Row-wise transformer primitives with hand-written backward passes.

use crate::error::{shape_err, Result};

use super::{dot, lit, Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err!(
            "layer norm width {d}, gamma {}, beta {}",
            gamma.len(),
            beta.len()
        ));
    }
    let n = lit::<T>(d as f64);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + lit(LN_EPS)).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for ((o, h), (&g, &b)) in y.row_mut(r).iter_mut().zip(xh).zip(gamma.iter().zip(beta)) {
            *o = h * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &LayerNormCache<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = dy.cols();
    let n = lit::<T>(d as f64);
    let mut dx = dy.clone();
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            let dxh = dyr[j] * gamma[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        let rs = cache.rstd[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            let dxh = dyr[j] * gamma[j];
            *o = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    /// `[batch][head][t][s]` attention weights, zero above the diagonal.
    probs: Vec<T>,
    batch: usize,
    seq: usize,
    heads: usize,
}

/// Multi-head causal self-attention over `batch` sequences of length `seq`
/// packed as rows `b·seq + t` of `q`, `k`, `v`.
pub fn causal_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    q.expect_same_shape(k)?;
    q.expect_same_shape(v)?;
    let d = q.cols();
    if q.rows() != batch * seq || !d.is_multiple_of(heads) {
        return Err(shape_err!(
            "attention rows {} for batch {batch}×{seq}, width {d} over {heads} heads",
            q.rows()
        ));
    }
    let dh = d / heads;
    let scale = T::one() / lit::<T>(dh as f64).sqrt();
    let mut out = Tensor::zeros(&[batch * seq, d]);
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..seq {
                let qt = &q.row(b * seq + t)[cols.clone()];
                let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                for s in 0..=t {
                    p[s] = dot(qt, &k.row(b * seq + s)[cols.clone()]) * scale;
                }
                super::softmax_row(&mut p[..=t]);
                let o = &mut out.row_mut(b * seq + t)[cols.clone()];
                for s in 0..=t {
                    let w = p[s];
                    for (ov, &vv) in o.iter_mut().zip(&v.row(b * seq + s)[cols.clone()]) {
                        *ov += w * vv;
                    }
                }
            }
        }
    }
    Ok((
        out,
        AttentionCache {
            probs,
            batch,
            seq,
            heads,
        },
    ))
}

/// Returns `(dq, dk, dv)`.
pub fn causal_attention_backward<T: Real>(
    dout: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &AttentionCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let AttentionCache {
        probs,
        batch,
        seq,
        heads,
    } = cache;
    let (batch, seq, heads) = (*batch, *seq, *heads);
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / lit::<T>(dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[batch * seq, d]);
    let mut dk = Tensor::zeros(&[batch * seq, d]);
    let mut dv = Tensor::zeros(&[batch * seq, d]);
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..seq {
                let p = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                let dot_t = &dout.row(b * seq + t)[cols.clone()];
                let mut row_dot = T::zero();
                for s in 0..=t {
                    dp[s] = dot(dot_t, &v.row(b * seq + s)[cols.clone()]);
                    row_dot += dp[s] * p[s];
                    let dvs = &mut dv.row_mut(b * seq + s)[cols.clone()];
                    for (g, &o) in dvs.iter_mut().zip(dot_t) {
                        *g += p[s] * o;
                    }
                }
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - row_dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let ks = k.row(b * seq + s)[cols.clone()].to_vec();
                    let dqt = &mut dq.row_mut(b * seq + t)[cols.clone()];
                    for (g, kv) in dqt.iter_mut().zip(ks) {
                        *g += ds * kv;
                    }
                    let qt = q.row(b * seq + t)[cols.clone()].to_vec();
                    let dks = &mut dk.row_mut(b * seq + s)[cols.clone()];
                    for (g, qv) in dks.iter_mut().zip(qt) {
                        *g += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, Rng};

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut rng = Rng::new(2);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 16], 3.0);
        let (y, _) = layer_norm(&x, &[1.0; 16], &[0.0; 16]).unwrap();
        for r in 0..4 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 16.0;
            let var: f64 = y.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let mut rng = Rng::new(9);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 6], 1.0);
        let g: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let w: Tensor<f64> = rng.normal_tensor(&[3, 6], 1.0);
        let loss = |xs: &[f64]| {
            let x = Tensor::matrix(3, 6, xs.to_vec()).unwrap();
            let (y, _) = layer_norm(&x, &g, &b).unwrap();
            y.data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(loss, x.data(), 1e-6).unwrap();
        let (_, cache) = layer_norm(&x, &g, &b).unwrap();
        let (dx, _, _) = layer_norm_backward(&w, &cache, &g);
        for (a, b) in dx.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_is_causal_and_backward_matches_fd() {
        let mut rng = Rng::new(4);
        let (batch, seq, d, heads) = (2, 4, 6, 2);
        let q: Tensor<f64> = rng.normal_tensor(&[batch * seq, d], 1.0);
        let k: Tensor<f64> = rng.normal_tensor(&[batch * seq, d], 1.0);
        let v: Tensor<f64> = rng.normal_tensor(&[batch * seq, d], 1.0);
        let w: Tensor<f64> = rng.normal_tensor(&[batch * seq, d], 1.0);
        let (out, cache) = causal_attention(&q, &k, &v, batch, seq, heads).unwrap();
        // first position attends only to itself
        assert!(out
            .row(0)
            .iter()
            .zip(v.row(0))
            .all(|(a, b)| (a - b).abs() < 1e-12));

        let (dq, dk, dv) = causal_attention_backward(&w, &q, &k, &v, &cache);
        let obj = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let (o, _) = causal_attention(q, k, v, batch, seq, heads).unwrap();
            o.data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let shape = [batch * seq, d];
        let mk = |xs: &[f64]| Tensor::new(shape.to_vec(), xs.to_vec()).unwrap();
        let fq = finite_diff_grad(|xs| obj(&mk(xs), &k, &v), q.data(), 1e-6).unwrap();
        let fk = finite_diff_grad(|xs| obj(&q, &mk(xs), &v), k.data(), 1e-6).unwrap();
        let fv = finite_diff_grad(|xs| obj(&q, &k, &mk(xs)), v.data(), 1e-6).unwrap();
        for (an, fd) in [(dq, fq), (dk, fk), (dv, fv)] {
            for (a, b) in an.data().iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax_row(&[1000.0f64, 0.0]);
        assert!(l[0].abs() < 1e-12);
        assert!((l[1] + 1000.0).abs() < 1e-9);
    }
}
