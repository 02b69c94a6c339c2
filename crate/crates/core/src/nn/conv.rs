use rand::Rng;
use rayon::prelude::*;

use super::gemm::gemm;
use super::params::{fan_in_uniform, Grads, ParamId, ParamStore};
use super::tensor::Tensor;

/// 2-D convolution, square kernel, symmetric zero padding.
///
/// Weight layout is `[out, in, k, k]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            fan_in_uniform(rng, cout * fan_in, fan_in),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[cout], vec![0.0; cout]));
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.cin, "conv input channels");
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Tensor::zeros([x.n(), self.cout, oh, ow]);
        let weight = ps.get(self.weight);
        let bias = self.bias.map(|b| ps.get(b));
        let kk = self.cin * self.k * self.k;
        let out_len = self.cout * oh * ow;
        y.data
            .par_chunks_mut(out_len)
            .zip(x.data.par_chunks(x.sample_len()))
            .for_each(|(ys, xs)| {
                if let Some(b) = bias {
                    for (co, chunk) in ys.chunks_mut(oh * ow).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = b[co]);
                    }
                }
                let beta = if bias.is_some() { 1.0 } else { 0.0 };
                if self.is_pointwise() {
                    gemm(self.cout, kk, oh * ow, weight, false, xs, false, ys, beta);
                } else {
                    let cols = self.im2col(xs, h, w, oh, ow);
                    gemm(self.cout, kk, oh * ow, weight, false, &cols, false, ys, beta);
                }
            });
        y
    }

    /// Returns the input gradient; parameter gradients are accumulated into
    /// `grads` when given and skipped otherwise.
    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        gy: &Tensor,
        grads: Option<&mut Grads>,
    ) -> Tensor {
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(gy.shape, [x.n(), self.cout, oh, ow]);
        let weight = ps.get(self.weight);
        let kk = self.cin * self.k * self.k;
        let want_params = grads.is_some();
        let mut dx = Tensor::zeros(x.shape);

        let partials: Vec<Option<(Vec<f32>, Vec<f32>)>> = dx
            .data
            .par_chunks_mut(x.sample_len())
            .zip(x.data.par_chunks(x.sample_len()))
            .zip(gy.data.par_chunks(gy.sample_len()))
            .map(|((dxs, xs), gys)| {
                let cols = if self.is_pointwise() {
                    None
                } else {
                    Some(self.im2col(xs, h, w, oh, ow))
                };
                let col_ref: &[f32] = cols.as_deref().unwrap_or(xs);
                let partial = want_params.then(|| {
                    let mut dw = vec![0.0; self.cout * kk];
                    gemm(self.cout, oh * ow, kk, gys, false, col_ref, true, &mut dw, 0.0);
                    let db: Vec<f32> = gys.chunks(oh * ow).map(|c| c.iter().sum()).collect();
                    (dw, db)
                });
                if self.is_pointwise() {
                    gemm(kk, self.cout, oh * ow, weight, true, gys, false, dxs, 0.0);
                } else {
                    let mut dcols = vec![0.0; kk * oh * ow];
                    gemm(kk, self.cout, oh * ow, weight, true, gys, false, &mut dcols, 0.0);
                    self.col2im(&dcols, dxs, h, w, oh, ow);
                }
                partial
            })
            .collect();

        if let Some(g) = grads {
            // reduce in sample order so results do not depend on scheduling
            for (dw, db) in partials.into_iter().flatten() {
                g.accumulate(self.weight, &dw);
                if let Some(b) = self.bias {
                    g.accumulate(b, &db);
                }
            }
        }
        dx
    }

    fn im2col(&self, xs: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.k;
        let mut cols = vec![0.0; self.cin * k * k * oh * ow];
        for ci in 0..self.cin {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], dxs: &mut [f32], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.k;
        for ci in 0..self.cin {
            let plane = &mut dxs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, s) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}
