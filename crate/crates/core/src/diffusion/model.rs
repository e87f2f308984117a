use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::nn::{avg_pool2, avg_pool2_backward, silu, silu_backward, upsample2, upsample2_backward, Conv2d, ParamLayout, Real, Tensor};

/// Condition token. `NULL_TOKEN` is the unconditional token.
pub type Token = usize;
pub const NULL_TOKEN: Token = 0;

/// Shape of the denoiser.
///
/// `widths[l]` is the channel count at resolution level `l` (level 0 is full
/// resolution). Two coordinate channels are appended to the input so the
/// network knows where a pixel sits in the full frame, which lets the same
/// weights denoise patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    /// Number of condition tokens including the null token.
    pub vocab: usize,
}

impl UNetConfig {
    pub fn toy(shape: Shape, vocab: usize) -> Self {
        Self { height: shape.height, width: shape.width, channels: shape.channels, widths: vec![16, 32, 64], time_dim: 16, vocab }
    }

    pub fn image_shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("unet needs at least one non-zero width"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time embedding dimension must be even and >= 2"));
        }
        if self.vocab == 0 || self.channels == 0 {
            return Err(Error::invalid("vocab and channels must be positive"));
        }
        let f = 1 << (self.widths.len() - 1);
        if self.height % f != 0 || self.width % f != 0 {
            return Err(Error::invalid(format!("image {}x{} not divisible by {f}", self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv: Conv2d,
    w: usize,
    b: usize,
    time: usize,
    tok: usize,
}

/// Parameter layout and layer geometry derived from a [`UNetConfig`].
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub layout: ParamLayout,
    enc: Vec<Block>,
    mid: Block,
    dec: Vec<Block>,
    out: (Conv2d, usize, usize),
}

pub struct UNetCache<T> {
    n: usize,
    phi: Vec<T>,
    tokens: Vec<Token>,
    enc_in: Vec<Tensor<T>>,
    enc_pre: Vec<Tensor<T>>,
    mid_in: Tensor<T>,
    mid_pre: Tensor<T>,
    dec_in: Vec<Tensor<T>>,
    dec_pre: Vec<Tensor<T>>,
    out_in: Tensor<T>,
}

/// Sinusoidal embedding of a timestep index.
pub fn time_features<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut f = vec![T::zero(); dim];
    for k in 0..half {
        let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        f[k] = T::of(a.sin());
        f[half + k] = T::of(a.cos());
    }
    f
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let d = config.time_dim;
        let block = |layout: &mut ParamLayout, name: String, cin: usize, cout: usize| {
            let conv = Conv2d::same(cin, cout, 3);
            let w = layout.push(format!("{name}.conv.w"), &[cout, cin, 3, 3]);
            let b = layout.push(format!("{name}.conv.b"), &[cout]);
            let time = layout.push(format!("{name}.time.w"), &[cout, d]);
            let tok = layout.push(format!("{name}.token"), &[config.vocab, cout]);
            Block { conv, w, b, time, tok }
        };
        let ws = &config.widths;
        let levels = ws.len();
        let mut enc = Vec::new();
        let mut cin = config.channels + 2;
        for (l, &c) in ws.iter().enumerate() {
            enc.push(block(&mut layout, format!("enc{l}"), cin, c));
            cin = c;
        }
        let mid = block(&mut layout, "mid".into(), ws[levels - 1], ws[levels - 1]);
        let mut dec = Vec::new();
        for l in (1..levels).rev() {
            dec.push(block(&mut layout, format!("dec{l}"), ws[l] + ws[l - 1], ws[l - 1]));
        }
        let out_conv = Conv2d::same(ws[0], config.channels, 3);
        let ow = layout.push("out.conv.w", &[config.channels, ws[0], 3, 3]);
        let ob = layout.push("out.conv.b", &[config.channels]);
        Ok(Self { config, layout, enc, mid, dec, out: (out_conv, ow, ob) })
    }

    pub fn init(&self, seed: u64) -> Vec<f32> {
        let mut rng = crate::rng::rng(seed);
        crate::nn::init_params(&self.layout, |g| g.shape[1..].iter().product(), &mut rng)
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    /// Conv bias + time projection + token embedding, per (channel, sample).
    fn block_bias<T: Real>(&self, params: &[T], blk: &Block, phi: &[T], tokens: &[Token]) -> Vec<T> {
        let cout = blk.conv.cout;
        let n = tokens.len();
        let d = self.config.time_dim;
        let cb = self.layout.slice(params, blk.b);
        let tw = self.layout.slice(params, blk.time);
        let te = self.layout.slice(params, blk.tok);
        let mut bias = vec![T::zero(); cout * n];
        for c in 0..cout {
            for (s, &tok) in tokens.iter().enumerate() {
                let mut v = cb[c] + te[tok * cout + c];
                for k in 0..d {
                    v += tw[c * d + k] * phi[s * d + k];
                }
                bias[c * n + s] = v;
            }
        }
        bias
    }

    fn block_bias_backward<T: Real>(&self, grads: &mut [T], blk: &Block, g: &[T], phi: &[T], tokens: &[Token]) {
        let cout = blk.conv.cout;
        let n = tokens.len();
        let d = self.config.time_dim;
        for c in 0..cout {
            for (s, &tok) in tokens.iter().enumerate() {
                let gv = g[c * n + s];
                grads[self.layout.group(blk.b).offset + c] += gv;
                grads[self.layout.group(blk.tok).offset + tok * cout + c] += gv;
                let tw = self.layout.group(blk.time).offset + c * d;
                for k in 0..d {
                    grads[tw + k] += gv * phi[s * d + k];
                }
            }
        }
    }

    fn run_block<T: Real>(&self, params: &[T], blk: &Block, x: &Tensor<T>, phi: &[T], tokens: &[Token]) -> Tensor<T> {
        let mut pre = blk.conv.forward(x, self.layout.slice(params, blk.w), None);
        pre.add_channel_bias(&self.block_bias(params, blk, phi, tokens));
        pre
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        blk: &Block,
        dpre: &Tensor<T>,
        input: &Tensor<T>,
        cache: &UNetCache<T>,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        self.block_bias_backward(grads, blk, &dpre.channel_sums(), &cache.phi, &cache.tokens);
        let wr = self.layout.group(blk.w).range();
        blk.conv.backward(dpre, input, self.layout.slice(params, blk.w), &mut grads[wr], None, want_dx)
    }

    /// Coordinate channels for a `h x w` window whose top-left corner sits at
    /// `origin` inside the full frame.
    fn coords<T: Real>(&self, n: usize, h: usize, w: usize, origin: (usize, usize)) -> Tensor<T> {
        let (fh, fw) = (self.config.height, self.config.width);
        let lin = |i: usize, len: usize| if len > 1 { -1.0 + 2.0 * i as f64 / (len - 1) as f64 } else { 0.0 };
        let mut t = Tensor::zeros(2, n, h, w);
        for s in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let a = t.at(0, s, y, x);
                    t.data[a] = T::of(lin(origin.0 + y, fh));
                    let b = t.at(1, s, y, x);
                    t.data[b] = T::of(lin(origin.1 + x, fw));
                }
            }
        }
        t
    }

    pub fn check_inputs<T: Real>(&self, x: &Tensor<T>, ts: &[usize], tokens: &[Token]) -> Result<()> {
        if x.c != self.config.channels {
            return Err(Error::shape(self.config.channels, x.c));
        }
        let f = 1 << (self.config.widths.len() - 1);
        if x.h % f != 0 || x.w % f != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::invalid(format!("input {}x{} not divisible by {f}", x.h, x.w)));
        }
        if ts.len() != x.n || tokens.len() != x.n {
            return Err(Error::shape(x.n, (ts.len(), tokens.len())));
        }
        if let Some(&tok) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::UnknownToken(tok));
        }
        Ok(())
    }

    /// Predicts the noise in `x` (values on the internal [-1, 1] scale).
    /// `ts` are schedule indices, one per sample.
    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>, ts: &[usize], tokens: &[Token], origin: (usize, usize)) -> (Tensor<T>, UNetCache<T>) {
        let n = x.n;
        let d = self.config.time_dim;
        let mut phi = Vec::with_capacity(n * d);
        for &t in ts {
            phi.extend(time_features::<T>(t, d));
        }
        let mut cache = UNetCache {
            n,
            phi,
            tokens: tokens.to_vec(),
            enc_in: vec![],
            enc_pre: vec![],
            mid_in: Tensor::zeros(0, 0, 0, 0),
            mid_pre: Tensor::zeros(0, 0, 0, 0),
            dec_in: vec![],
            dec_pre: vec![],
            out_in: Tensor::zeros(0, 0, 0, 0),
        };
        let mut skips: Vec<Tensor<T>> = Vec::new();
        let mut inp = x.clone().concat_channels(&self.coords(n, x.h, x.w, origin));
        for (l, blk) in self.enc.iter().enumerate() {
            if l > 0 {
                inp = avg_pool2(skips.last().expect("previous level"));
            }
            let pre = self.run_block(params, blk, &inp, &cache.phi, tokens);
            skips.push(silu(&pre));
            cache.enc_in.push(std::mem::replace(&mut inp, Tensor::zeros(0, 0, 0, 0)));
            cache.enc_pre.push(pre);
        }
        let deepest = skips.last().expect("at least one level");
        let pre = self.run_block(params, &self.mid, deepest, &cache.phi, tokens);
        let mut u = silu(&pre);
        cache.mid_in = deepest.clone();
        cache.mid_pre = pre;
        for (i, blk) in self.dec.iter().enumerate() {
            let level = self.enc.len() - 1 - i;
            let cat = upsample2(&u).concat_channels(&skips[level - 1]);
            let pre = self.run_block(params, blk, &cat, &cache.phi, tokens);
            u = silu(&pre);
            cache.dec_in.push(cat);
            cache.dec_pre.push(pre);
        }
        let (oc, ow, ob) = self.out;
        let y = oc.forward(&u, self.layout.slice(params, ow), Some(self.layout.slice(params, ob)));
        cache.out_in = u;
        (y, cache)
    }

    /// Backpropagates `dy` (gradient w.r.t. the predicted noise). Returns the
    /// parameter gradient and, if requested, the gradient w.r.t. `x`.
    pub fn backward<T: Real>(&self, params: &[T], cache: &UNetCache<T>, dy: &Tensor<T>, want_dx: bool) -> (Vec<T>, Option<Tensor<T>>) {
        let mut grads = vec![T::zero(); params.len()];
        let (oc, ow, ob) = self.out;
        debug_assert_eq!(ob, ow + 1);
        let (gw, gb) = crate::nn::split_pair(&self.layout, &mut grads, ow);
        let mut du = oc.backward(dy, &cache.out_in, self.layout.slice(params, ow), gw, Some(gb), true).expect("dx requested");
        let levels = self.enc.len();
        let mut dskip: Vec<Option<Tensor<T>>> = vec![None; levels];
        for (i, blk) in self.dec.iter().enumerate().rev() {
            let level = levels - 1 - i;
            let dpre = silu_backward(&cache.dec_pre[i], &du);
            let dcat = self.block_backward(params, &mut grads, blk, &dpre, &cache.dec_in[i], cache, true).expect("dx requested");
            let (dup, dsk) = dcat.split_channels(self.config.widths[level]);
            du = upsample2_backward(&dup);
            accumulate(&mut dskip[level - 1], dsk);
        }
        let dpre = silu_backward(&cache.mid_pre, &du);
        let dmid = self.block_backward(params, &mut grads, &self.mid, &dpre, &cache.mid_in, cache, true).expect("dx requested");
        accumulate(&mut dskip[levels - 1], dmid);
        let mut dx = None;
        for l in (0..levels).rev() {
            let dh = dskip[l].take().expect("every level receives gradient");
            let dpre = silu_backward(&cache.enc_pre[l], &dh);
            let need = l > 0 || want_dx;
            let dinp = self.block_backward(params, &mut grads, &self.enc[l], &dpre, &cache.enc_in[l], cache, need);
            match (l, dinp) {
                (0, Some(d)) => dx = Some(d.split_channels(self.config.channels).0),
                (0, None) => {}
                (_, Some(d)) => accumulate(&mut dskip[l - 1], avg_pool2_backward(&d)),
                (_, None) => unreachable!("input gradient requested"),
            }
        }
        debug_assert_eq!(cache.n, dy.n);
        (grads, dx)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(s) => s.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// A denoiser: architecture plus its parameter vector.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub net: UNet,
    pub params: Vec<f32>,
}

impl DenoiserModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let net = UNet::new(config)?;
        let params = net.init(seed);
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn image_shape(&self) -> Shape {
        self.net.config.image_shape()
    }

    pub fn vocab(&self) -> usize {
        self.net.config.vocab
    }

    /// Grows the token tables so `token` is valid. New rows copy the null
    /// token's embedding, so a fresh token starts out meaning "unconditional".
    pub fn ensure_token(&mut self, token: Token) -> Result<()> {
        if token < self.vocab() {
            return Ok(());
        }
        let mut cfg = self.net.config.clone();
        cfg.vocab = token + 1;
        let net = UNet::new(cfg)?;
        let mut params = vec![0.0f32; net.layout.total()];
        for g in net.layout.groups() {
            let old = self.net.layout.find(&g.name).expect("same group names");
            let src = &self.params[old.range()];
            let dst = &mut params[g.range()];
            if g.name.ends_with(".token") {
                let c = g.shape[1];
                dst[..src.len()].copy_from_slice(src);
                for row in old.shape[0]..g.shape[0] {
                    dst[row * c..(row + 1) * c].copy_from_slice(&src[..c]);
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
        *self = Self { net, params };
        Ok(())
    }

    /// Overwrites the embedding of `token` with that of `from`.
    pub fn copy_token_embedding(&mut self, from: Token, token: Token) -> Result<()> {
        for t in [from, token] {
            if t >= self.vocab() {
                return Err(Error::UnknownToken(t));
            }
        }
        let groups: Vec<_> = self.net.layout.groups().iter().filter(|g| g.name.ends_with(".token")).cloned().collect();
        for g in groups {
            let c = g.shape[1];
            let base = g.offset;
            for k in 0..c {
                self.params[base + token * c + k] = self.params[base + from * c + k];
            }
        }
        Ok(())
    }

    /// Noise prediction for a batch of images on the internal scale.
    pub fn predict(&self, x: &Tensor<f32>, ts: &[usize], tokens: &[Token], origin: (usize, usize)) -> Result<Tensor<f32>> {
        self.net.check_inputs(x, ts, tokens)?;
        Ok(self.net.forward(&self.params, x, ts, tokens, origin).0)
    }

    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.params {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Packs [0,1] images into a tensor on the internal [-1,1] scale.
pub fn to_internal(images: &[&Image]) -> Tensor<f32> {
    Tensor::from_images(images, 2.0, -1.0)
}

/// Unpacks internal-scale tensors back to [0,1] images (no clamping).
pub fn from_internal(t: &Tensor<f32>) -> Vec<Image> {
    t.to_images(0.5, 0.5)
}
