use rand::Rng;

use super::layers::{backward_seq, forward_seq, out_channels, Layer, LayerCache, Residual};
use super::spec::{EncoderKind, EncoderSpec, VitSpec, DOWNSAMPLE};
use crate::nn::ops::FrozenBatchNorm;
use crate::nn::transformer::{from_tokens, to_tokens, BlockCache, LayerNorm, LayerNormCache, TransformerBlock};
use crate::nn::{Conv2d, Grads, ParamId, ParamStore, Tensor};

/// Site-agnostic encoder: 3-channel input to a feature map at 1/16 of the
/// input resolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub params: ParamStore,
    body: Vec<Layer>,
    vit: Option<VitHead>,
    out_channels: usize,
}

#[derive(Clone, Debug)]
struct VitHead {
    patch: Conv2d,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    grid: (usize, usize),
}

pub struct EncoderCache {
    body: Vec<LayerCache>,
    vit: Option<VitCache>,
}

struct VitCache {
    patch_in: Tensor,
    blocks: Vec<Vec<BlockCache>>,
    norm: Vec<LayerNormCache>,
}

impl Encoder {
    pub fn build<R: Rng + ?Sized>(spec: &EncoderSpec, input_hw: (usize, usize), rng: &mut R) -> Self {
        let mut ps = ParamStore::new();
        let (body, vit) = match spec.kind {
            EncoderKind::TinyCnn => (tiny_cnn(&mut ps, rng, spec.tiny_widths), None),
            EncoderKind::Res18 => (resnet_basic(&mut ps, rng, [2, 2, 2, 2]), None),
            EncoderKind::Res34 => (resnet_basic(&mut ps, rng, [3, 4, 6, 3]), None),
            EncoderKind::Res50 => (resnet_bottleneck(&mut ps, rng, "", &[3, 4, 6, 3]), None),
            EncoderKind::VitHybrid => {
                let body = resnet_bottleneck(&mut ps, rng, "backbone.", &spec.vit.stem_blocks);
                let cin = out_channels(&body, 3);
                let grid = (input_hw.0 / DOWNSAMPLE, input_hw.1 / DOWNSAMPLE);
                (body, Some(vit_head(&mut ps, rng, &spec.vit, cin, grid)))
            }
        };
        let out_channels = match &vit {
            Some(_) => spec.vit.dim,
            None => out_channels(&body, 3),
        };
        Encoder {
            spec: spec.clone(),
            params: ps,
            body,
            vit,
            out_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: Tensor, keep: bool) -> (Tensor, EncoderCache) {
        let ps = &self.params;
        let (feat, body) = forward_seq(&self.body, ps, x, keep);
        let Some(vit) = &self.vit else {
            return (feat, EncoderCache { body, vit: None });
        };
        let (gh, gw) = (feat.h(), feat.w());
        assert_eq!((gh, gw), vit.grid, "hybrid encoder built for a different input size");
        let emb = vit.patch.forward(ps, &feat);
        let mut tokens = to_tokens(&emb);
        let rows = gh * gw;
        let pos = ps.get(vit.pos);
        let mut block_caches = Vec::new();
        let mut norm_caches = Vec::new();
        for i in 0..tokens.n() {
            let s = tokens.sample_mut(i);
            s.iter_mut().zip(pos).for_each(|(t, p)| *t += p);
            let mut cur = s.to_vec();
            let mut caches = Vec::new();
            for b in &vit.blocks {
                let (next, c) = b.forward(ps, &cur, rows);
                if keep {
                    caches.push(c);
                }
                cur = next;
            }
            let (out, nc) = vit.norm.forward(ps, &cur);
            s.copy_from_slice(&out);
            if keep {
                block_caches.push(caches);
                norm_caches.push(nc);
            }
        }
        let out = from_tokens(&tokens, gh, gw);
        let vit_cache = keep.then(|| VitCache {
            patch_in: feat,
            blocks: block_caches,
            norm: norm_caches,
        });
        (out, EncoderCache { body, vit: vit_cache })
    }

    pub fn backward(&self, cache: &EncoderCache, gy: Tensor, mut grads: Option<&mut Grads>) -> Tensor {
        let ps = &self.params;
        let g_feat = match (&self.vit, &cache.vit) {
            (None, _) => gy,
            (Some(vit), Some(vc)) => {
                let rows = vit.grid.0 * vit.grid.1;
                let mut gt = to_tokens(&gy);
                let mut dpos = vec![0.0f32; rows * vit.patch.cout];
                for i in 0..gt.n() {
                    let s = gt.sample_mut(i);
                    let mut g = vit.norm.backward(ps, &vc.norm[i], s, grads.as_deref_mut());
                    for (b, c) in vit.blocks.iter().zip(&vc.blocks[i]).rev() {
                        g = b.backward(ps, c, &g, rows, grads.as_deref_mut());
                    }
                    dpos.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                    s.copy_from_slice(&g);
                }
                if let Some(gr) = grads.as_deref_mut() {
                    gr.accumulate(vit.pos, &dpos);
                }
                let g_emb = from_tokens(&gt, vit.grid.0, vit.grid.1);
                vit.patch.backward(ps, &vc.patch_in, &g_emb, grads.as_deref_mut())
            }
            (Some(_), None) => panic!("encoder forward was run without caches"),
        };
        backward_seq(&self.body, ps, &cache.body, g_feat, grads)
    }
}

fn tiny_cnn<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, widths: [usize; 4]) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(Layer::Conv(Conv2d::new(ps, rng, &format!("stages.{i}.0"), cin, w, 3, 2, 1, true)));
        layers.push(Layer::Relu);
        layers.push(Layer::Conv(Conv2d::new(ps, rng, &format!("stages.{i}.1"), w, w, 3, 1, 1, true)));
        layers.push(Layer::Relu);
        cin = w;
    }
    layers
}

fn conv_bn<R: Rng + ?Sized>(
    ps: &mut ParamStore,
    rng: &mut R,
    conv_name: &str,
    bn_name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> [Layer; 2] {
    [
        Layer::Conv(Conv2d::new(ps, rng, conv_name, cin, cout, k, stride, k / 2, false)),
        Layer::Bn(FrozenBatchNorm::new(ps, bn_name, cout)),
    ]
}

fn stem<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, prefix: &str) -> Vec<Layer> {
    let mut v = Vec::from(conv_bn(ps, rng, &format!("{prefix}conv1"), &format!("{prefix}bn1"), 3, 64, 7, 2));
    v.push(Layer::Relu);
    v.push(Layer::MaxPool);
    v
}

fn downsample<R: Rng + ?Sized>(
    ps: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    stride: usize,
) -> Vec<Layer> {
    if stride == 1 && cin == cout {
        return Vec::new();
    }
    Vec::from(conv_bn(ps, rng, &format!("{name}.downsample.0"), &format!("{name}.downsample.1"), cin, cout, 1, stride))
}

/// ResNet-18/34 layout with torchvision parameter names. The last stage
/// keeps stride 1 so the output stays at 1/16 resolution.
fn resnet_basic<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, blocks: [usize; 4]) -> Vec<Layer> {
    let mut layers = stem(ps, rng, "");
    let mut cin = 64;
    for (stage, (&n, &width)) in blocks.iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for b in 0..n {
            let stride = if b == 0 && (stage == 1 || stage == 2) { 2 } else { 1 };
            let name = format!("layer{}.{b}", stage + 1);
            let mut main = Vec::from(conv_bn(ps, rng, &format!("{name}.conv1"), &format!("{name}.bn1"), cin, width, 3, stride));
            main.push(Layer::Relu);
            main.extend(conv_bn(ps, rng, &format!("{name}.conv2"), &format!("{name}.bn2"), width, width, 3, 1));
            let shortcut = downsample(ps, rng, &name, cin, width, stride);
            layers.push(Layer::Residual(Box::new(Residual { main, shortcut })));
            cin = width;
        }
    }
    layers
}

/// ResNet-50 style bottleneck stages (stride on the 3×3 convolution). The
/// fourth stage, when present, keeps stride 1.
fn resnet_bottleneck<R: Rng + ?Sized>(
    ps: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    blocks: &[usize],
) -> Vec<Layer> {
    let mut layers = stem(ps, rng, prefix);
    let mut cin = 64;
    for (stage, (&n, &width)) in blocks.iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        let cout = width * 4;
        for b in 0..n {
            let stride = if b == 0 && (stage == 1 || stage == 2) { 2 } else { 1 };
            let name = format!("{prefix}layer{}.{b}", stage + 1);
            let mut main = Vec::from(conv_bn(ps, rng, &format!("{name}.conv1"), &format!("{name}.bn1"), cin, width, 1, 1));
            main.push(Layer::Relu);
            main.extend(conv_bn(ps, rng, &format!("{name}.conv2"), &format!("{name}.bn2"), width, width, 3, stride));
            main.push(Layer::Relu);
            main.extend(conv_bn(ps, rng, &format!("{name}.conv3"), &format!("{name}.bn3"), width, cout, 1, 1));
            let shortcut = downsample(ps, rng, &name, cin, cout, stride);
            layers.push(Layer::Residual(Box::new(Residual { main, shortcut })));
            cin = cout;
        }
    }
    layers
}

fn vit_head<R: Rng + ?Sized>(
    ps: &mut ParamStore,
    rng: &mut R,
    spec: &VitSpec,
    cin: usize,
    grid: (usize, usize),
) -> VitHead {
    let patch = Conv2d::new(ps, rng, "patch_embed", cin, spec.dim, 1, 1, 0, true);
    let tokens = grid.0 * grid.1;
    let pos_init: Vec<f32> = (0..tokens * spec.dim).map(|_| rng.gen_range(-0.02..0.02)).collect();
    let pos = ps.add("pos_embed", &[tokens, spec.dim], pos_init);
    let blocks = (0..spec.depth)
        .map(|i| TransformerBlock::new(ps, rng, &format!("blocks.{i}"), spec.dim, spec.heads, spec.mlp_dim))
        .collect();
    let norm = LayerNorm::new(ps, "norm", spec.dim);
    VitHead {
        patch,
        pos,
        blocks,
        norm,
        grid,
    }
}
