//! Sequential layer graphs with residual blocks, shared by the encoders and
//! the decoder heads.

use crate::nn::ops::{self, FrozenBatchNorm};
use crate::nn::{Conv2d, Grads, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Bn(FrozenBatchNorm),
    Relu,
    MaxPool,
    Upsample2x,
    Residual(Box<Residual>),
}

/// `relu(main(x) + shortcut(x))`, identity shortcut when `shortcut` is empty.
#[derive(Clone, Debug)]
pub struct Residual {
    pub main: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

pub enum LayerCache {
    Input(Tensor),
    Output(Tensor),
    Pool { in_shape: [usize; 4], arg: Vec<u32> },
    Shape,
    Residual {
        main: Vec<LayerCache>,
        shortcut: Vec<LayerCache>,
        out: Tensor,
    },
}

/// Runs `layers` on `x`. With `keep` the per-layer caches needed by
/// [`backward_seq`] are returned; without it the cache list is empty.
pub fn forward_seq(
    layers: &[Layer],
    ps: &ParamStore,
    x: Tensor,
    keep: bool,
) -> (Tensor, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(if keep { layers.len() } else { 0 });
    let mut cur = x;
    for layer in layers {
        let (next, cache) = forward_one(layer, ps, cur, keep);
        if keep {
            caches.push(cache);
        }
        cur = next;
    }
    (cur, caches)
}

fn forward_one(layer: &Layer, ps: &ParamStore, x: Tensor, keep: bool) -> (Tensor, LayerCache) {
    match layer {
        Layer::Conv(c) => {
            let y = c.forward(ps, &x);
            (y, LayerCache::Input(x))
        }
        Layer::Bn(b) => {
            let y = b.forward(ps, &x);
            (y, LayerCache::Input(x))
        }
        Layer::Relu => {
            let y = ops::relu(&x);
            let cache = if keep {
                LayerCache::Output(y.clone())
            } else {
                LayerCache::Shape
            };
            (y, cache)
        }
        Layer::MaxPool => {
            let in_shape = x.shape;
            let (y, arg) = ops::maxpool3x3s2(&x);
            (y, LayerCache::Pool { in_shape, arg })
        }
        Layer::Upsample2x => (ops::upsample2x(&x), LayerCache::Shape),
        Layer::Residual(r) => {
            let (mut main, main_c) = forward_seq(&r.main, ps, x.clone(), keep);
            let (short, short_c) = if r.shortcut.is_empty() {
                (x, Vec::new())
            } else {
                forward_seq(&r.shortcut, ps, x, keep)
            };
            main.add_assign(&short);
            let out = ops::relu(&main);
            let cache = if keep {
                LayerCache::Residual {
                    main: main_c,
                    shortcut: short_c,
                    out: out.clone(),
                }
            } else {
                LayerCache::Shape
            };
            (out, cache)
        }
    }
}

pub fn backward_seq(
    layers: &[Layer],
    ps: &ParamStore,
    caches: &[LayerCache],
    gy: Tensor,
    mut grads: Option<&mut Grads>,
) -> Tensor {
    assert_eq!(layers.len(), caches.len(), "forward was run without caches");
    let mut g = gy;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = backward_one(layer, ps, cache, g, grads.as_deref_mut());
    }
    g
}

fn backward_one(
    layer: &Layer,
    ps: &ParamStore,
    cache: &LayerCache,
    gy: Tensor,
    grads: Option<&mut Grads>,
) -> Tensor {
    match (layer, cache) {
        (Layer::Conv(c), LayerCache::Input(x)) => c.backward(ps, x, &gy, grads),
        (Layer::Bn(b), LayerCache::Input(x)) => b.backward(ps, x, &gy, grads),
        (Layer::Relu, LayerCache::Output(y)) => ops::relu_backward(y, &gy),
        (Layer::MaxPool, LayerCache::Pool { in_shape, arg }) => {
            ops::maxpool3x3s2_backward(*in_shape, arg, &gy)
        }
        (Layer::Upsample2x, LayerCache::Shape) => ops::upsample2x_backward(&gy),
        (
            Layer::Residual(r),
            LayerCache::Residual {
                main,
                shortcut,
                out,
            },
        ) => {
            let mut grads = grads;
            let g_sum = ops::relu_backward(out, &gy);
            let mut gx = backward_seq(&r.main, ps, main, g_sum.clone(), grads.as_deref_mut());
            let g_short = if r.shortcut.is_empty() {
                g_sum
            } else {
                backward_seq(&r.shortcut, ps, shortcut, g_sum, grads)
            };
            gx.add_assign(&g_short);
            gx
        }
        _ => unreachable!("layer/cache mismatch"),
    }
}

/// Output channel count after running `layers` on `cin` channels.
pub fn out_channels(layers: &[Layer], cin: usize) -> usize {
    layers.iter().fold(cin, |c, l| match l {
        Layer::Conv(conv) => conv.cout,
        Layer::Residual(r) => out_channels(&r.main, c),
        _ => c,
    })
}
