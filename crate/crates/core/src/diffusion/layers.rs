//! Convolution, group normalization, linear projection and SiLU, each with an
//! explicit backward pass.

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{FeatureMap, Scalar};

const GN_EPS: f64 = 1e-5;

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect()
}

/// Square-kernel convolution, stride 1, "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    col: Vec<T>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = cin * k * k;
        let weight = store.push(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            uniform_init(rng, cout * fan_in, fan_in),
        );
        let bias = store.push(
            format!("{name}.bias"),
            vec![cout],
            uniform_init(rng, cout, fan_in),
        );
        Self {
            cin,
            cout,
            k,
            weight,
            bias,
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col<T: Scalar>(&self, x: &FeatureMap<T>) -> Vec<T> {
        if self.k == 1 {
            return x.data.clone();
        }
        let (h, w, k) = (x.h, x.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut col = vec![T::zero(); self.patch() * hw];
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for xx in x0..x1 {
                            drow[xx] = srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], h: usize, w: usize) -> FeatureMap<T> {
        if self.k == 1 {
            return FeatureMap::from_vec(self.cin, h, w, col.to_vec());
        }
        let k = self.k;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut out = FeatureMap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let dst = &mut out.data[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for xx in x0..x1 {
                            dst[sy as usize * w + (xx as isize + dx) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
    ) -> (FeatureMap<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let col = self.im2col(x);
        let bias = p.get(self.bias);
        let mut out = FeatureMap::zeros(self.cout, x.h, x.w);
        for (o, chunk) in out.data.chunks_mut(hw).enumerate() {
            chunk.fill(bias[o]);
        }
        let kk = self.patch();
        T::gemm(
            self.cout,
            kk,
            hw,
            T::one(),
            p.get(self.weight),
            kk as isize,
            1,
            &col,
            hw as isize,
            1,
            T::one(),
            &mut out.data,
            hw as isize,
            1,
        );
        (out, ConvCache { col, h: x.h, w: x.w })
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &FeatureMap<T>,
        g: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let hw = cache.h * cache.w;
        let kk = self.patch();
        T::gemm(
            self.cout,
            hw,
            kk,
            T::one(),
            &dy.data,
            hw as isize,
            1,
            &cache.col,
            1,
            hw as isize,
            T::one(),
            g.get_mut(self.weight),
            kk as isize,
            1,
        );
        let db = g.get_mut(self.bias);
        for (o, chunk) in dy.data.chunks(hw).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![T::zero(); kk * hw];
        T::gemm(
            kk,
            self.cout,
            hw,
            T::one(),
            p.get(self.weight),
            1,
            kk as isize,
            &dy.data,
            hw as isize,
            1,
            T::zero(),
            &mut dcol,
            hw as isize,
            1,
        );
        Some(self.col2im(&dcol, cache.h, cache.w))
    }
}

/// Group normalization with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Largest group count `<= cap` that divides `channels`.
pub fn group_count(channels: usize, cap: usize) -> usize {
    (1..=cap.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        group_cap: usize,
    ) -> Self {
        let gamma = store.push(
            format!("{name}.gamma"),
            vec![channels],
            vec![T::one(); channels],
        );
        let beta = store.push(
            format!("{name}.beta"),
            vec![channels],
            vec![T::zero(); channels],
        );
        Self {
            channels,
            groups: group_count(channels, group_cap),
            gamma,
            beta,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
    ) -> (FeatureMap<T>, NormCache<T>) {
        let hw = x.plane();
        let span = self.channels / self.groups * hw;
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let n = T::of(span as f64);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for gi in 0..self.groups {
            let seg = &x.data[gi * span..(gi + 1) * span];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(GN_EPS)).sqrt();
            inv_std.push(inv);
            for (d, &v) in xhat[gi * span..(gi + 1) * span].iter_mut().zip(seg) {
                *d = (v - mean) * inv;
            }
        }
        let mut out = FeatureMap::zeros(x.c, x.h, x.w);
        for c in 0..x.c {
            let (gm, bt) = (gamma[c], beta[c]);
            for (o, &xh) in out.data[c * hw..(c + 1) * hw]
                .iter_mut()
                .zip(&xhat[c * hw..(c + 1) * hw])
            {
                *o = gm * xh + bt;
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &FeatureMap<T>,
        g: &mut Grads<T>,
    ) -> FeatureMap<T> {
        let hw = dy.plane();
        let cpg = self.channels / self.groups;
        let span = cpg * hw;
        let gamma = p.get(self.gamma);
        {
            let dgamma = g.get_mut(self.gamma);
            for c in 0..self.channels {
                dgamma[c] += dy.data[c * hw..(c + 1) * hw]
                    .iter()
                    .zip(&cache.xhat[c * hw..(c + 1) * hw])
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
            }
        }
        {
            let dbeta = g.get_mut(self.beta);
            for c in 0..self.channels {
                dbeta[c] += dy.channel(c).iter().copied().sum::<T>();
            }
        }
        let n = T::of(span as f64);
        let mut dx = FeatureMap::zeros(dy.c, dy.h, dy.w);
        let mut dxhat = vec![T::zero(); span];
        for gi in 0..self.groups {
            let base = gi * span;
            for (i, d) in dxhat.iter_mut().enumerate() {
                let c = (base + i) / hw;
                *d = dy.data[base + i] * gamma[c];
            }
            let xh = &cache.xhat[base..base + span];
            let sum_d = dxhat.iter().copied().sum::<T>();
            let sum_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            let k = cache.inv_std[gi] / n;
            for i in 0..span {
                dx.data[base + i] = k * (n * dxhat[i] - sum_d - xh[i] * sum_dx);
            }
        }
        dx
    }
}

/// Dense projection `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let weight = store.push(
            format!("{name}.weight"),
            vec![dout, din],
            uniform_init(rng, dout * din, din),
        );
        let bias = store.push(format!("{name}.bias"), vec![dout], uniform_init(rng, dout, din));
        Self {
            din,
            dout,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let w = p.get(self.weight);
        let b = p.get(self.bias);
        (0..self.dout)
            .map(|o| {
                w[o * self.din..(o + 1) * self.din]
                    .iter()
                    .zip(x)
                    .map(|(&a, &v)| a * v)
                    .sum::<T>()
                    + b[o]
            })
            .collect()
    }

    /// Parameter gradients only; the input is a fixed embedding.
    pub fn backward<T: Scalar>(&self, x: &[T], dy: &[T], g: &mut Grads<T>) {
        {
            let dw = g.get_mut(self.weight);
            for o in 0..self.dout {
                for i in 0..self.din {
                    dw[o * self.din + i] += dy[o] * x[i];
                }
            }
        }
        let db = g.get_mut(self.bias);
        for o in 0..self.dout {
            db[o] += dy[o];
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

/// `dy * d silu(x)/dx`, given the pre-activation `x`.
pub fn silu_backward<T: Scalar>(x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &d)| {
                let s = sigmoid(v);
                d * s * (T::one() + v * (T::one() - s))
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(w: &[f64], b: &[f64], x: &FeatureMap<f64>, cout: usize, k: usize) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; cout * x.h * x.w];
        for o in 0..cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = b[o];
                    for ci in 0..x.c {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let sy = y + ky - pad;
                                let sx = xx + kx - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = ((o * x.c + ci) * k + ky as usize) * k + kx as usize;
                                acc += w[wi] * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out[(o * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3);
        let x = FeatureMap::from_vec(
            2,
            4,
            5,
            (0..40).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let (y, _) = conv.forward(&store, &x);
        let expect = naive_conv(store.get(conv.weight), store.get(conv.bias), &x, 3, 3);
        for (a, b) in y.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn group_count_divides() {
        assert_eq!(group_count(32, 8), 8);
        assert_eq!(group_count(6, 8), 6);
        assert_eq!(group_count(12, 8), 6);
        assert_eq!(group_count(1, 8), 1);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "n", 4, 2);
        let x = FeatureMap::from_vec(4, 1, 3, (0..12).map(|v| (v * v) as f64).collect());
        let (y, _) = gn.forward(&store, &x);
        for g in 0..2 {
            let seg = &y.data[g * 6..(g + 1) * 6];
            let mean: f64 = seg.iter().sum::<f64>() / 6.0;
            let var: f64 = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
