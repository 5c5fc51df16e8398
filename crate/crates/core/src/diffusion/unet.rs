//! Timestep-conditioned U-Net noise predictor.
//!
//! Three resolution levels (28 -> 14 -> 7 for the default image size) with one
//! residual block per level on each side, skip concatenation between mirrored
//! levels, and a 3x3 output head. Every block output is addressable through a
//! [`LayerId`] so that pooled activations can be harvested as features.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{silu, silu_backward, Conv2d, ConvCache, GroupNorm, Linear, NormCache};
use super::params::{Grads, ParamStore};
use super::tensor::{
    avg_pool2, avg_pool2_backward, concat, split_channels, upsample2, upsample2_backward,
    FeatureMap, Scalar,
};
use super::DiffusionError;

/// A probe-able block of the denoiser, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerId {
    Enc1,
    Enc2,
    Bottleneck,
    Dec1,
    Dec2,
}

impl LayerId {
    pub const ALL: [LayerId; 5] = [
        LayerId::Enc1,
        LayerId::Enc2,
        LayerId::Bottleneck,
        LayerId::Dec1,
        LayerId::Dec2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerId::Enc1 => "enc1",
            LayerId::Enc2 => "enc2",
            LayerId::Bottleneck => "bottleneck",
            LayerId::Dec1 => "dec1",
            LayerId::Dec2 => "dec2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Prefix shared by every parameter belonging to this block.
    pub fn param_prefix(self) -> String {
        format!("{}.", self.as_str())
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerId {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| DiffusionError::UnknownLayer(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channel widths of (level 1, level 2, bottleneck).
    pub widths: [usize; 3],
    pub embed_dim: usize,
    pub group_cap: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            image_size: 28,
            in_channels: 1,
            widths: [32, 64, 128],
            embed_dim: 64,
            group_cap: 8,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(DiffusionError::Shape(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.widths.contains(&0) || self.in_channels == 0 || self.group_cap == 0 {
            return Err(DiffusionError::Shape("zero width in architecture".into()));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(DiffusionError::Shape(format!(
                "embedding dimension {} must be even and >= 2",
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Pooled feature dimensionality of a layer (its channel width).
    pub fn layer_dim(&self, layer: LayerId) -> usize {
        let [w1, w2, wb] = self.widths;
        match layer {
            LayerId::Enc1 | LayerId::Dec2 => w1,
            LayerId::Enc2 | LayerId::Dec1 => w2,
            LayerId::Bottleneck => wb,
        }
    }
}

/// Sinusoidal timestep embedding of even dimension `dim`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::of(arg.sin());
        out[i + half] = T::of(arg.cos());
    }
    out
}

/// `conv -> norm -> silu -> +time -> conv -> norm -> silu`, plus a residual path.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub cin: usize,
    pub cout: usize,
    conv1: Conv2d,
    norm1: GroupNorm,
    temb: Linear,
    conv2: Conv2d,
    norm2: GroupNorm,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T> {
    c1: ConvCache<T>,
    g1: NormCache<T>,
    n1: FeatureMap<T>,
    c2: ConvCache<T>,
    g2: NormCache<T>,
    n2: FeatureMap<T>,
    skip: Option<ConvCache<T>>,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        arch: &Architecture,
    ) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3);
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), cout, arch.group_cap);
        let temb = Linear::new(store, rng, &format!("{name}.temb"), arch.embed_dim, cout);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3);
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), cout, arch.group_cap);
        let skip = (cin != cout)
            .then(|| Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1));
        Self {
            cin,
            cout,
            conv1,
            norm1,
            temb,
            conv2,
            norm2,
            skip,
        }
    }

    fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        emb: &[T],
    ) -> (FeatureMap<T>, ResBlockCache<T>) {
        let (a1, c1) = self.conv1.forward(p, x);
        let (n1, g1) = self.norm1.forward(p, &a1);
        let mut h1 = silu(&n1);
        let tproj = self.temb.forward(p, emb);
        let hw = h1.plane();
        for (c, chunk) in h1.data.chunks_mut(hw).enumerate() {
            for v in chunk.iter_mut() {
                *v += tproj[c];
            }
        }
        let (a2, c2) = self.conv2.forward(p, &h1);
        let (n2, g2) = self.norm2.forward(p, &a2);
        let mut out = silu(&n2);
        let skip = match &self.skip {
            Some(conv) => {
                let (r, cache) = conv.forward(p, x);
                out.add_assign(&r);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        (
            out,
            ResBlockCache {
                c1,
                g1,
                n1,
                c2,
                g2,
                n2,
                skip,
            },
        )
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &ResBlockCache<T>,
        emb: &[T],
        dout: &FeatureMap<T>,
        g: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let dn2 = silu_backward(&cache.n2, dout);
        let da2 = self.norm2.backward(p, &cache.g2, &dn2, g);
        let dh1 = self
            .conv2
            .backward(p, &cache.c2, &da2, g, true)
            .expect("input grad requested");
        let dt: Vec<T> = (0..self.cout)
            .map(|c| dh1.channel(c).iter().copied().sum::<T>())
            .collect();
        self.temb.backward(emb, &dt, g);
        let dn1 = silu_backward(&cache.n1, &dh1);
        let da1 = self.norm1.backward(p, &cache.g1, &dn1, g);
        let dx_main = self.conv1.backward(p, &cache.c1, &da1, g, need_input_grad);
        let dx_skip = match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => conv.backward(p, sc, dout, g, need_input_grad),
            _ => need_input_grad.then(|| dout.clone()),
        };
        match (dx_main, dx_skip) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct UNet {
    blocks: [ResBlock; 5],
    head: Conv2d,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    emb: Vec<T>,
    caches: Vec<ResBlockCache<T>>,
    head: ConvCache<T>,
    outputs: Vec<FeatureMap<T>>,
}

impl<T: Scalar> Trace<T> {
    /// Raw activation of a block for this forward pass.
    pub fn block_output(&self, layer: LayerId) -> &FeatureMap<T> {
        &self.outputs[layer.index()]
    }

    pub fn pooled(&self, layer: LayerId) -> Vec<T> {
        self.outputs[layer.index()].mean_pool()
    }
}

/// Noise predictor `eps_theta(x_t, t)` with its parameter store.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    arch: Architecture,
    net: UNet,
    params: ParamStore<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, DiffusionError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let [w1, w2, wb] = arch.widths;
        let blocks = [
            ResBlock::new(&mut params, &mut rng, "enc1", arch.in_channels, w1, &arch),
            ResBlock::new(&mut params, &mut rng, "enc2", w1, w2, &arch),
            ResBlock::new(&mut params, &mut rng, "bottleneck", w2, wb, &arch),
            ResBlock::new(&mut params, &mut rng, "dec1", wb + w2, w2, &arch),
            ResBlock::new(&mut params, &mut rng, "dec2", w2 + w1, w1, &arch),
        ];
        let head = Conv2d::new(&mut params, &mut rng, "head", w1, arch.in_channels, 3);
        Ok(Self {
            arch,
            net: UNet { blocks, head },
            params,
        })
    }

    /// Rebuilds a network around an existing parameter store, checking that
    /// every expected tensor is present with the expected shape.
    pub fn with_params(arch: Architecture, params: ParamStore<T>) -> Result<Self, DiffusionError> {
        let mut fresh = Self::new(arch, 0)?;
        if fresh.params.len() != params.len() {
            return Err(DiffusionError::Checkpoint(format!(
                "expected {} tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for t in fresh.params.tensors_mut() {
            let id = params
                .find(&t.name)
                .ok_or_else(|| DiffusionError::Checkpoint(format!("missing tensor {}", t.name)))?;
            let src = &params.tensors()[id.0];
            if src.shape != t.shape {
                return Err(DiffusionError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, src.shape, t.shape
                )));
            }
            t.data.copy_from_slice(&src.data);
        }
        Ok(fresh)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Feature layers in forward order with their pooled dimensionalities.
    pub fn feature_layers(&self) -> Vec<(LayerId, usize)> {
        LayerId::ALL
            .iter()
            .map(|&l| (l, self.arch.layer_dim(l)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            arch: self.arch,
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<(), DiffusionError> {
        let s = self.arch.image_size;
        if (x.c, x.h, x.w) != (self.arch.in_channels, s, s) {
            return Err(DiffusionError::Shape(format!(
                "input {}x{}x{} does not match {}x{s}x{s}",
                x.c, x.h, x.w, self.arch.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        x: &FeatureMap<T>,
        t: usize,
    ) -> Result<(FeatureMap<T>, Trace<T>), DiffusionError> {
        self.check_input(x)?;
        let p = &self.params;
        let b = &self.net.blocks;
        let emb = timestep_embedding::<T>(t, self.arch.embed_dim);
        let (h1, k1) = b[0].forward(p, x, &emb);
        let (h2, k2) = b[1].forward(p, &avg_pool2(&h1), &emb);
        let (hb, kb) = b[2].forward(p, &avg_pool2(&h2), &emb);
        let (d1, kd1) = b[3].forward(p, &concat(&upsample2(&hb), &h2), &emb);
        let (d2, kd2) = b[4].forward(p, &concat(&upsample2(&d1), &h1), &emb);
        let (out, head) = self.net.head.forward(p, &d2);
        Ok((
            out,
            Trace {
                emb,
                caches: vec![k1, k2, kb, kd1, kd2],
                head,
                outputs: vec![h1, h2, hb, d1, d2],
            },
        ))
    }

    pub fn predict(&self, x: &FeatureMap<T>, t: usize) -> Result<FeatureMap<T>, DiffusionError> {
        self.forward(x, t).map(|(out, _)| out)
    }

    /// Full backward pass from the gradient of the predicted noise.
    pub fn backward(&self, trace: &Trace<T>, dout: &FeatureMap<T>, g: &mut Grads<T>) {
        let p = &self.params;
        let b = &self.net.blocks;
        let [w1, w2, wb] = self.arch.widths;
        let emb = &trace.emb;
        let dd2 = self
            .net
            .head
            .backward(p, &trace.head, dout, g, true)
            .expect("input grad");
        let dc2 = b[4]
            .backward(p, &trace.caches[4], emb, &dd2, g, true)
            .expect("input grad");
        let (du2, dh1_skip) = split_channels(&dc2, w2);
        let dd1 = upsample2_backward(&du2);
        let dc1 = b[3]
            .backward(p, &trace.caches[3], emb, &dd1, g, true)
            .expect("input grad");
        let (du1, dh2_skip) = split_channels(&dc1, wb);
        let dhb = upsample2_backward(&du1);
        let dp2 = b[2]
            .backward(p, &trace.caches[2], emb, &dhb, g, true)
            .expect("input grad");
        let mut dh2 = avg_pool2_backward(&dp2);
        dh2.add_assign(&dh2_skip);
        let dp1 = b[1]
            .backward(p, &trace.caches[1], emb, &dh2, g, true)
            .expect("input grad");
        let mut dh1 = avg_pool2_backward(&dp1);
        dh1.add_assign(&dh1_skip);
        debug_assert_eq!(dh1.c, w1);
        b[0].backward(p, &trace.caches[0], emb, &dh1, g, false);
    }

    /// Gradients of one block's parameters given the gradient of that block's
    /// output, treating the block input as a constant.
    pub fn backward_block(
        &self,
        layer: LayerId,
        trace: &Trace<T>,
        dout: &FeatureMap<T>,
        g: &mut Grads<T>,
    ) {
        let i = layer.index();
        self.net.blocks[i].backward(&self.params, &trace.caches[i], &trace.emb, dout, g, false);
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.numel()
    }
}
