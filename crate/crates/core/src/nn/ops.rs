//! Parameter-free and per-channel layers.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.shape, x.data.iter().map(|v| v.max(0.0)).collect())
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    Tensor::from_vec(
        gy.shape,
        y.data
            .iter()
            .zip(&gy.data)
            .map(|(y, g)| if *y > 0.0 { *g } else { 0.0 })
            .collect(),
    )
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_vec(
        x.shape,
        x.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
    )
}

/// Gradient of the logistic function given its *output*.
pub fn sigmoid_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    Tensor::from_vec(
        gy.shape,
        y.data
            .iter()
            .zip(&gy.data)
            .map(|(y, g)| g * y * (1.0 - y))
            .collect(),
    )
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (h, w) = (x.h(), x.w());
    let mut y = Tensor::zeros([x.n(), x.c(), 2 * h, 2 * w]);
    for (src, dst) in x.data.chunks(h * w).zip(y.data.chunks_mut(4 * h * w)) {
        for r in 0..2 * h {
            for c in 0..2 * w {
                dst[r * 2 * w + c] = src[(r / 2) * w + c / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward(gy: &Tensor) -> Tensor {
    let (h, w) = (gy.h() / 2, gy.w() / 2);
    let mut gx = Tensor::zeros([gy.n(), gy.c(), h, w]);
    for (src, dst) in gy.data.chunks(4 * h * w).zip(gx.data.chunks_mut(h * w)) {
        for r in 0..2 * h {
            for c in 0..2 * w {
                dst[(r / 2) * w + c / 2] += src[r * 2 * w + c];
            }
        }
    }
    gx
}

/// 3×3 max pooling, stride 2, padding 1. Returns the output and the flat
/// per-plane argmax index of each output element.
pub fn maxpool3x3s2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut y = Tensor::zeros([x.n(), x.c(), oh, ow]);
    let mut arg = vec![0u32; y.data.len()];
    for ((src, dst), a) in x
        .data
        .chunks(h * w)
        .zip(y.data.chunks_mut(oh * ow))
        .zip(arg.chunks_mut(oh * ow))
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                dst[oy * ow + ox] = best;
                a[oy * ow + ox] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool3x3s2_backward(in_shape: [usize; 4], arg: &[u32], gy: &Tensor) -> Tensor {
    let plane = in_shape[2] * in_shape[3];
    let oplane = gy.h() * gy.w();
    let mut gx = Tensor::zeros(in_shape);
    for ((dst, g), a) in gx
        .data
        .chunks_mut(plane)
        .zip(gy.data.chunks(oplane))
        .zip(arg.chunks(oplane))
    {
        for (gv, &i) in g.iter().zip(a) {
            dst[i as usize] += gv;
        }
    }
    gx
}

/// Batch normalization with fixed running statistics: a per-channel affine
/// map whose scale and shift are trainable while mean and variance are
/// buffers.
#[derive(Clone, Debug)]
pub struct FrozenBatchNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
}

impl FrozenBatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        FrozenBatchNorm {
            weight: store.add(format!("{name}.weight"), &[channels], vec![1.0; channels]),
            bias: store.add(format!("{name}.bias"), &[channels], vec![0.0; channels]),
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                &[channels],
                vec![0.0; channels],
            ),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                &[channels],
                vec![1.0; channels],
            ),
            eps: 1e-5,
        }
    }

    fn inv_std(&self, ps: &ParamStore) -> Vec<f32> {
        ps.get(self.running_var)
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect()
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let inv = self.inv_std(ps);
        let (g, b, m) = (
            ps.get(self.weight),
            ps.get(self.bias),
            ps.get(self.running_mean),
        );
        let plane = x.h() * x.w();
        let c = x.c();
        let mut y = x.clone();
        for (i, chunk) in y.data.chunks_mut(plane).enumerate() {
            let ch = i % c;
            let scale = g[ch] * inv[ch];
            let shift = b[ch] - m[ch] * scale;
            chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        y
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        gy: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let inv = self.inv_std(ps);
        let (g, m) = (ps.get(self.weight), ps.get(self.running_mean));
        let plane = x.h() * x.w();
        let c = x.c();
        let mut gx = gy.clone();
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for (i, (gchunk, xchunk)) in gx
            .data
            .chunks_mut(plane)
            .zip(x.data.chunks(plane))
            .enumerate()
        {
            let ch = i % c;
            for (gv, xv) in gchunk.iter_mut().zip(xchunk) {
                dbeta[ch] += *gv;
                dgamma[ch] += *gv * (xv - m[ch]) * inv[ch];
                *gv *= g[ch] * inv[ch];
            }
        }
        if let Some(gr) = grads {
            gr.accumulate(self.weight, &dgamma);
            gr.accumulate(self.bias, &dbeta);
        }
        gx
    }
}
