//! Pre-norm transformer encoder layers over token tensors `[n, 1, L, D]`.

use rand::Rng;

use super::gemm::gemm;
use super::params::{fan_in_uniform, Grads, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                &[dout, din],
                fan_in_uniform(rng, dout * din, din),
            ),
            bias: store.add(format!("{name}.bias"), &[dout], vec![0.0; dout]),
            din,
            dout,
        }
    }

    /// `x` is a row-major `rows × din` matrix.
    pub fn forward(&self, ps: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let b = ps.get(self.bias);
        let mut y: Vec<f32> = (0..rows).flat_map(|_| b.iter().copied()).collect();
        gemm(rows, self.din, self.dout, x, false, ps.get(self.weight), true, &mut y, 1.0);
        y
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &[f32],
        gy: &[f32],
        rows: usize,
        grads: Option<&mut Grads>,
    ) -> Vec<f32> {
        if let Some(g) = grads {
            let mut dw = vec![0.0; self.dout * self.din];
            gemm(self.dout, rows, self.din, gy, true, x, false, &mut dw, 0.0);
            g.accumulate(self.weight, &dw);
            let mut db = vec![0.0; self.dout];
            for row in gy.chunks(self.dout) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            g.accumulate(self.bias, &db);
        }
        let mut dx = vec![0.0; rows * self.din];
        gemm(rows, self.dout, self.din, gy, false, ps.get(self.weight), false, &mut dx, 0.0);
        dx
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f32,
}

pub struct LayerNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            weight: store.add(format!("{name}.weight"), &[dim], vec![1.0; dim]),
            bias: store.add(format!("{name}.bias"), &[dim], vec![0.0; dim]),
            dim,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f32]) -> (Vec<f32>, LayerNormCache) {
        let (g, b) = (ps.get(self.weight), ps.get(self.bias));
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / self.dim);
        for ((row, out), xh) in x
            .chunks(self.dim)
            .zip(y.chunks_mut(self.dim))
            .zip(xhat.chunks_mut(self.dim))
        {
            let mean = row.iter().sum::<f32>() / self.dim as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / self.dim as f32;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            for i in 0..self.dim {
                xh[i] = (row[i] - mean) * inv;
                out[i] = xh[i] * g[i] + b[i];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &LayerNormCache,
        gy: &[f32],
        grads: Option<&mut Grads>,
    ) -> Vec<f32> {
        let g = ps.get(self.weight);
        let d = self.dim as f32;
        let mut dx = vec![0.0; gy.len()];
        let mut dgamma = vec![0.0; self.dim];
        let mut dbeta = vec![0.0; self.dim];
        for (((gr, xh), out), inv) in gy
            .chunks(self.dim)
            .zip(cache.xhat.chunks(self.dim))
            .zip(dx.chunks_mut(self.dim))
            .zip(&cache.inv_std)
        {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..self.dim {
                let gh = gr[i] * g[i];
                sum_g += gh;
                sum_gx += gh * xh[i];
                dgamma[i] += gr[i] * xh[i];
                dbeta[i] += gr[i];
            }
            for i in 0..self.dim {
                let gh = gr[i] * g[i];
                out[i] = inv * (gh - sum_g / d - xh[i] * sum_gx / d);
            }
        }
        if let Some(gs) = grads {
            gs.accumulate(self.weight, &dgamma);
            gs.accumulate(self.bias, &dbeta);
        }
        dx
    }
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + 0.044715 * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward(x: &[f32], gy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let t = (GELU_K * (v + 0.044715 * v * v * v)).tanh();
            let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    x: Vec<f32>,
    qkv: Vec<f32>,
    /// Softmax weights per head, `heads × L × L`.
    probs: Vec<f32>,
    merged: Vec<f32>,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim must divide into heads");
        SelfAttention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
        }
    }

    fn head_slice(&self, qkv: &[f32], rows: usize, which: usize, head: usize) -> Vec<f32> {
        let dh = self.dim / self.heads;
        let off = which * self.dim + head * dh;
        let mut out = Vec::with_capacity(rows * dh);
        for r in 0..rows {
            out.extend_from_slice(&qkv[r * 3 * self.dim + off..r * 3 * self.dim + off + dh]);
        }
        out
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f32], rows: usize) -> (Vec<f32>, AttentionCache) {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = self.qkv.forward(ps, x, rows);
        let mut probs = vec![0.0; self.heads * rows * rows];
        let mut merged = vec![0.0; rows * self.dim];
        for h in 0..self.heads {
            let q = self.head_slice(&qkv, rows, 0, h);
            let k = self.head_slice(&qkv, rows, 1, h);
            let v = self.head_slice(&qkv, rows, 2, h);
            let p = &mut probs[h * rows * rows..(h + 1) * rows * rows];
            gemm(rows, dh, rows, &q, false, &k, true, p, 0.0);
            for row in p.chunks_mut(rows) {
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut s = 0.0;
                for e in row.iter_mut() {
                    *e = (*e * scale - m).exp();
                    s += *e;
                }
                row.iter_mut().for_each(|e| *e /= s);
            }
            let mut o = vec![0.0; rows * dh];
            gemm(rows, rows, dh, p, false, &v, false, &mut o, 0.0);
            for r in 0..rows {
                merged[r * self.dim + h * dh..r * self.dim + (h + 1) * dh]
                    .copy_from_slice(&o[r * dh..(r + 1) * dh]);
            }
        }
        let y = self.proj.forward(ps, &merged, rows);
        (
            y,
            AttentionCache {
                x: x.to_vec(),
                qkv,
                probs,
                merged,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &AttentionCache,
        gy: &[f32],
        rows: usize,
        mut grads: Option<&mut Grads>,
    ) -> Vec<f32> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let dmerged = self
            .proj
            .backward(ps, &cache.merged, gy, rows, grads.as_deref_mut());
        let mut dqkv = vec![0.0; rows * 3 * self.dim];
        for h in 0..self.heads {
            let q = self.head_slice(&cache.qkv, rows, 0, h);
            let k = self.head_slice(&cache.qkv, rows, 1, h);
            let v = self.head_slice(&cache.qkv, rows, 2, h);
            let p = &cache.probs[h * rows * rows..(h + 1) * rows * rows];
            let mut d_o = Vec::with_capacity(rows * dh);
            for r in 0..rows {
                d_o.extend_from_slice(&dmerged[r * self.dim + h * dh..r * self.dim + (h + 1) * dh]);
            }
            let mut dp = vec![0.0; rows * rows];
            gemm(rows, dh, rows, &d_o, false, &v, true, &mut dp, 0.0);
            let mut dv = vec![0.0; rows * dh];
            gemm(rows, rows, dh, p, true, &d_o, false, &mut dv, 0.0);
            // softmax backward, folded with the score scale
            for (dprow, prow) in dp.chunks_mut(rows).zip(p.chunks(rows)) {
                let dot: f32 = dprow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, pv) in dprow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let mut dq = vec![0.0; rows * dh];
            gemm(rows, rows, dh, &dp, false, &k, false, &mut dq, 0.0);
            let mut dk = vec![0.0; rows * dh];
            gemm(rows, rows, dh, &dp, true, &q, false, &mut dk, 0.0);
            for r in 0..rows {
                let base = r * 3 * self.dim + h * dh;
                dqkv[base..base + dh].copy_from_slice(&dq[r * dh..(r + 1) * dh]);
                dqkv[base + self.dim..base + self.dim + dh].copy_from_slice(&dk[r * dh..(r + 1) * dh]);
                dqkv[base + 2 * self.dim..base + 2 * self.dim + dh]
                    .copy_from_slice(&dv[r * dh..(r + 1) * dh]);
            }
        }
        self.qkv.backward(ps, &cache.x, &dqkv, rows, grads)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Vec<f32>,
    hidden_pre: Vec<f32>,
    hidden: Vec<f32>,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, mlp_dim),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), mlp_dim, dim),
        }
    }

    /// One sample, `rows × dim`.
    pub fn forward(&self, ps: &ParamStore, x: &[f32], rows: usize) -> (Vec<f32>, BlockCache) {
        let (h1, ln1) = self.norm1.forward(ps, x);
        let (a, attn) = self.attn.forward(ps, &h1, rows);
        let y: Vec<f32> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let (h2, ln2) = self.norm2.forward(ps, &y);
        let hidden_pre = self.fc1.forward(ps, &h2, rows);
        let hidden = gelu(&hidden_pre);
        let m = self.fc2.forward(ps, &hidden, rows);
        let z = y.iter().zip(&m).map(|(p, q)| p + q).collect();
        (
            z,
            BlockCache {
                ln1,
                attn,
                ln2,
                ln2_out: h2,
                hidden_pre,
                hidden,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &BlockCache,
        gz: &[f32],
        rows: usize,
        mut grads: Option<&mut Grads>,
    ) -> Vec<f32> {
        let dhidden = self
            .fc2
            .backward(ps, &cache.hidden, gz, rows, grads.as_deref_mut());
        let dpre = gelu_backward(&cache.hidden_pre, &dhidden);
        let dh2 = self
            .fc1
            .backward(ps, &cache.ln2_out, &dpre, rows, grads.as_deref_mut());
        let dy_norm = self.norm2.backward(ps, &cache.ln2, &dh2, grads.as_deref_mut());
        let gy: Vec<f32> = gz.iter().zip(&dy_norm).map(|(a, b)| a + b).collect();
        let dh1 = self
            .attn
            .backward(ps, &cache.attn, &gy, rows, grads.as_deref_mut());
        let dx_norm = self.norm1.backward(ps, &cache.ln1, &dh1, grads);
        gy.iter().zip(&dx_norm).map(|(a, b)| a + b).collect()
    }
}

/// `[n, c, h, w]` feature map to `[n, 1, h*w, c]` tokens.
pub fn to_tokens(x: &Tensor) -> Tensor {
    let (c, hw) = (x.c(), x.h() * x.w());
    let mut t = Tensor::zeros([x.n(), 1, hw, c]);
    for (src, dst) in x.data.chunks(c * hw).zip(t.data.chunks_mut(c * hw)) {
        for ch in 0..c {
            for p in 0..hw {
                dst[p * c + ch] = src[ch * hw + p];
            }
        }
    }
    t
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (hw, c) = (t.h(), t.w());
    assert_eq!(hw, h * w);
    let mut x = Tensor::zeros([t.n(), c, h, w]);
    for (src, dst) in t.data.chunks(c * hw).zip(x.data.chunks_mut(c * hw)) {
        for p in 0..hw {
            for ch in 0..c {
                dst[ch * hw + p] = src[p * c + ch];
            }
        }
    }
    x
}
