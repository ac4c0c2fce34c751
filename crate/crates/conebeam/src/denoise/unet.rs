//! From-scratch 2D U-Net: parameter layout, forward pass, and exact
//! reverse-mode gradients.
//!
//! Encoder level l applies [conv k×k, ReLU] ×2 at c₀·2ˡ channels then a 2×2
//! max-pool; the bottleneck doubles channels once more; each decoder level
//! upsamples 2× (nearest neighbour), halves channels with a conv (+ReLU),
//! concatenates the encoder skip, and applies [conv, ReLU] ×2; a final 1×1
//! conv maps back to one channel. All convs use "same" zero padding.
//! `depth = 0` degenerates to a single k×k conv (1 → 1 channel, no
//! activation), the configuration the convolution oracle tests pin down.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture descriptor: pooling depth, channels at the first level, and
/// the square kernel size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetArch {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
}

impl UNetArch {
    /// Desk-scale default: trains on a CPU in minutes while exercising every
    /// code path of the full-size network.
    pub fn desk() -> Self {
        Self { depth: 2, base_channels: 16, kernel_size: 3 }
    }

    /// Full-size configuration: four pooling levels, 64 channels, 3×3 kernels.
    pub fn full() -> Self {
        Self { depth: 4, base_channels: 64, kernel_size: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidSpec(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.depth > 0 && self.base_channels == 0 {
            return Err(Error::InvalidSpec("base_channels must be >= 1".into()));
        }
        if self.depth > 8 {
            return Err(Error::InvalidSpec(format!("depth {} is unreasonable", self.depth)));
        }
        Ok(())
    }

    /// (c_in, c_out, k) of every conv layer in declaration order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let k = self.kernel_size;
        if self.depth == 0 {
            return vec![(1, 1, k)];
        }
        let c = |l: usize| self.base_channels << l;
        let mut shapes = Vec::new();
        for l in 0..self.depth {
            let cin = if l == 0 { 1 } else { c(l - 1) };
            shapes.push((cin, c(l), k));
            shapes.push((c(l), c(l), k));
        }
        shapes.push((c(self.depth - 1), c(self.depth), k));
        shapes.push((c(self.depth), c(self.depth), k));
        for l in (0..self.depth).rev() {
            shapes.push((c(l + 1), c(l), k)); // up conv after nearest upsample
            shapes.push((2 * c(l), c(l), k)); // after skip concatenation
            shapes.push((c(l), c(l), k));
        }
        shapes.push((self.base_channels, 1, 1));
        shapes
    }
}

/// One convolution layer: weights `[c_out][c_in][k][k]` (flattened), biases
/// `[c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Self { c_in, c_out, k, weights: vec![0.0; c_out * c_in * k * k], bias: vec![0.0; c_out] }
    }
}

/// Trained weights of one stage denoiser plus its recorded input
/// normalization scale (0 = not yet set).
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub arch: UNetArch,
    pub convs: Vec<ConvLayer>,
    pub norm_scale: f64,
}

impl DenoiserParams {
    pub fn zeros(arch: UNetArch) -> Result<Self> {
        arch.validate()?;
        let convs =
            arch.layer_shapes().into_iter().map(|(ci, co, k)| ConvLayer::zeros(ci, co, k)).collect();
        Ok(Self { arch, convs, norm_scale: 0.0 })
    }

    /// He-normal kernels (std √(2 / fan_in)), zero biases, deterministic in
    /// the seed.
    pub fn he_init(arch: UNetArch, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        for conv in &mut params.convs {
            let std = (2.0 / (conv.c_in * conv.k * conv.k) as f64).sqrt();
            for w in &mut conv.weights {
                let n: f64 = StandardNormal.sample(&mut rng);
                *w = n * std;
            }
        }
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.layer_shapes();
        if shapes.len() != self.convs.len() {
            return Err(Error::InvalidSpec(format!(
                "{} conv layers, architecture wants {}",
                self.convs.len(),
                shapes.len()
            )));
        }
        for (i, ((ci, co, k), conv)) in shapes.into_iter().zip(&self.convs).enumerate() {
            if (conv.c_in, conv.c_out, conv.k) != (ci, co, k)
                || conv.weights.len() != co * ci * k * k
                || conv.bias.len() != co
            {
                return Err(Error::InvalidSpec(format!("conv {i} has inconsistent shape")));
            }
            if conv.weights.iter().chain(&conv.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("conv {i} parameters")));
            }
        }
        Ok(())
    }

    pub fn n_parameters(&self) -> usize {
        self.convs.iter().map(|c| c.weights.len() + c.bias.len()).sum()
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub convs: Vec<ConvLayer>,
}

impl Gradients {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        Self {
            convs: params
                .convs
                .iter()
                .map(|c| ConvLayer::zeros(c.c_in, c.c_out, c.k))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.convs {
            for x in &mut c.weights {
                *x *= s;
            }
            for x in &mut c.bias {
                *x *= s;
            }
        }
    }
}

/// A channel-major feature map.
#[derive(Clone, Debug)]
pub(crate) struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feat {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    fn channel(&self, i: usize) -> &[f64] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }
}

/// out[o] += conv(in, w[o]); "same" zero padding, stride 1, cross-correlation.
fn conv_forward(layer: &ConvLayer, input: &Feat) -> Feat {
    let (h, w) = (input.h, input.w);
    let k = layer.k;
    let p = (k / 2) as isize;
    let mut out = Feat::zeros(layer.c_out, h, w);
    for o in 0..layer.c_out {
        let out_ch = &mut out.data[o * h * w..(o + 1) * h * w];
        let b = layer.bias[o];
        for v in out_ch.iter_mut() {
            *v = b;
        }
        for i in 0..layer.c_in {
            let in_ch = input.channel(i);
            let w_base = (o * layer.c_in + i) * k * k;
            for dy in 0..k {
                let oy = dy as isize - p;
                let y_lo = (-oy).max(0) as usize;
                let y_hi = ((h as isize).min(h as isize - oy)).max(0) as usize;
                for dx in 0..k {
                    let wv = layer.weights[w_base + dy * k + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox = dx as isize - p;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize).min(w as isize - ox)).max(0) as usize;
                    for y in y_lo..y_hi {
                        let src_row = ((y as isize + oy) as usize) * w;
                        let dst_row = y * w;
                        let src = &in_ch[(src_row as isize + x_lo as isize + ox) as usize
                            ..(src_row as isize + x_hi as isize + ox) as usize];
                        let dst = &mut out_ch[dst_row + x_lo..dst_row + x_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a conv layer: fills `grad` (weights/bias) and returns the
/// gradient w.r.t. the layer input.
fn conv_backward(layer: &ConvLayer, input: &Feat, gout: &Feat, grad: &mut ConvLayer) -> Feat {
    let (h, w) = (input.h, input.w);
    let k = layer.k;
    let p = (k / 2) as isize;
    let mut gin = Feat::zeros(layer.c_in, h, w);
    for o in 0..layer.c_out {
        let g_ch = gout.channel(o);
        grad.bias[o] += g_ch.iter().sum::<f64>();
        for i in 0..layer.c_in {
            let in_ch = input.channel(i);
            let gin_ch = &mut gin.data[i * h * w..(i + 1) * h * w];
            let w_base = (o * layer.c_in + i) * k * k;
            for dy in 0..k {
                let oy = dy as isize - p;
                let y_lo = (-oy).max(0) as usize;
                let y_hi = ((h as isize).min(h as isize - oy)).max(0) as usize;
                for dx in 0..k {
                    let ox = dx as isize - p;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = ((w as isize).min(w as isize - ox)).max(0) as usize;
                    let wv = layer.weights[w_base + dy * k + dx];
                    let mut wg = 0.0;
                    for y in y_lo..y_hi {
                        let src_row = ((y as isize + oy) as usize) * w;
                        let s_lo = (src_row as isize + x_lo as isize + ox) as usize;
                        let s_hi = (src_row as isize + x_hi as isize + ox) as usize;
                        let g_row = &g_ch[y * w + x_lo..y * w + x_hi];
                        let in_row = &in_ch[s_lo..s_hi];
                        let gin_row = &mut gin_ch[s_lo..s_hi];
                        for ((g, s), gi) in g_row.iter().zip(in_row).zip(gin_row) {
                            wg += g * s;
                            *gi += wv * g;
                        }
                    }
                    grad.weights[w_base + dy * k + dx] += wg;
                }
            }
        }
    }
    gin
}

fn relu_inplace(x: &mut Feat) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward of ReLU given the **post-activation** values.
fn relu_backward_inplace(g: &mut Feat, post: &Feat) {
    for (gv, &pv) in g.data.iter_mut().zip(&post.data) {
        if pv <= 0.0 {
            *gv = 0.0;
        }
    }
}

fn maxpool2(input: &Feat) -> (Feat, Vec<u32>) {
    let (c, h, w) = (input.c, input.h, input.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Feat::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let src = input.channel(ch);
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * y + dy) * w + 2 * x + dx;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out.data[ch * oh * ow + y * ow + x] = best;
                arg[ch * oh * ow + y * ow + x] = best_idx;
            }
        }
    }
    (out, arg)
}

fn maxpool2_backward(gout: &Feat, arg: &[u32], in_h: usize, in_w: usize) -> Feat {
    let mut gin = Feat::zeros(gout.c, in_h, in_w);
    let plane_out = gout.h * gout.w;
    let plane_in = in_h * in_w;
    for ch in 0..gout.c {
        for i in 0..plane_out {
            gin.data[ch * plane_in + arg[ch * plane_out + i] as usize] +=
                gout.data[ch * plane_out + i];
        }
    }
    gin
}

fn upsample2(input: &Feat) -> Feat {
    let (c, h, w) = (input.c, input.h, input.w);
    let mut out = Feat::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = &mut out.data[ch * 4 * h * w..(ch + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let r0 = 2 * y * 2 * w + 2 * x;
                let r1 = (2 * y + 1) * 2 * w + 2 * x;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r1] = v;
                dst[r1 + 1] = v;
            }
        }
    }
    out
}

fn upsample2_backward(gout: &Feat) -> Feat {
    let (c, oh, ow) = (gout.c, gout.h / 2, gout.w / 2);
    let mut gin = Feat::zeros(c, oh, ow);
    for ch in 0..c {
        let src = gout.channel(ch);
        let dst = &mut gin.data[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let r0 = 2 * y * gout.w + 2 * x;
                let r1 = (2 * y + 1) * gout.w + 2 * x;
                dst[y * ow + x] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    gin
}

fn concat(a: &Feat, b: &Feat) -> Feat {
    let mut out = Feat::zeros(a.c + b.c, a.h, a.w);
    out.data[..a.data.len()].copy_from_slice(&a.data);
    out.data[a.data.len()..].copy_from_slice(&b.data);
    out
}

struct EncCache {
    x_in: Feat,
    a_out: Feat,
    b_out: Feat,
    pool_arg: Vec<u32>,
}

struct DecCache {
    up_in: Feat,
    up_out: Feat,
    cat: Feat,
    a_out: Feat,
    b_out: Feat,
}

pub(crate) struct ForwardCache {
    enc: Vec<EncCache>,
    bot_in: Feat,
    bot_a: Feat,
    bot_b: Feat,
    dec: Vec<DecCache>, // execution order: level depth-1 .. 0
    final_in: Feat,
}

fn check_input(params: &DenoiserParams, h: usize, w: usize, len: usize) -> Result<()> {
    if h * w != len {
        return Err(Error::DimMismatch(format!("patch length {len} != {h}x{w}")));
    }
    let div = 1usize << params.arch.depth;
    if h % div != 0 || w % div != 0 {
        return Err(Error::InvalidSpec(format!(
            "patch sides {h}x{w} must be divisible by 2^depth = {div}"
        )));
    }
    Ok(())
}

pub(crate) fn forward_cached(params: &DenoiserParams, patch: &Feat) -> (Feat, ForwardCache) {
    let depth = params.arch.depth;
    if depth == 0 {
        let out = conv_forward(&params.convs[0], patch);
        return (
            out,
            ForwardCache {
                enc: Vec::new(),
                bot_in: patch.clone(),
                bot_a: Feat::zeros(0, 0, 0),
                bot_b: Feat::zeros(0, 0, 0),
                dec: Vec::new(),
                final_in: Feat::zeros(0, 0, 0),
            },
        );
    }
    let mut enc = Vec::with_capacity(depth);
    let mut cur = patch.clone();
    for l in 0..depth {
        let x_in = cur;
        let mut a = conv_forward(&params.convs[2 * l], &x_in);
        relu_inplace(&mut a);
        let mut b = conv_forward(&params.convs[2 * l + 1], &a);
        relu_inplace(&mut b);
        let (pooled, arg) = maxpool2(&b);
        enc.push(EncCache { x_in, a_out: a, b_out: b, pool_arg: arg });
        cur = pooled;
    }
    let bot_in = cur;
    let mut bot_a = conv_forward(&params.convs[2 * depth], &bot_in);
    relu_inplace(&mut bot_a);
    let mut bot_b = conv_forward(&params.convs[2 * depth + 1], &bot_a);
    relu_inplace(&mut bot_b);

    let mut dec = Vec::with_capacity(depth);
    let mut cur = bot_b.clone();
    for (pos, l) in (0..depth).rev().enumerate() {
        let base = 2 * depth + 2 + 3 * pos;
        let up_in = upsample2(&cur);
        let mut up_out = conv_forward(&params.convs[base], &up_in);
        relu_inplace(&mut up_out);
        let cat = concat(&enc[l].b_out, &up_out);
        let mut a = conv_forward(&params.convs[base + 1], &cat);
        relu_inplace(&mut a);
        let mut b = conv_forward(&params.convs[base + 2], &a);
        relu_inplace(&mut b);
        dec.push(DecCache { up_in, up_out, cat, a_out: a, b_out: b.clone() });
        cur = b;
    }
    let final_in = cur;
    let out = conv_forward(&params.convs[5 * depth + 2], &final_in);
    (out, ForwardCache { enc, bot_in, bot_a, bot_b, dec, final_in })
}

pub(crate) fn backward_cached(
    params: &DenoiserParams,
    cache: &ForwardCache,
    upstream: &Feat,
    grads: &mut Gradients,
) -> Feat {
    let depth = params.arch.depth;
    if depth == 0 {
        return conv_backward(&params.convs[0], &cache.bot_in, upstream, &mut grads.convs[0]);
    }
    // Final 1x1 conv.
    let mut g = conv_backward(
        &params.convs[5 * depth + 2],
        &cache.final_in,
        upstream,
        &mut grads.convs[5 * depth + 2],
    );
    // Decoder levels in reverse execution order; accumulate skip gradients.
    let mut skip_grads: Vec<Option<Feat>> = (0..depth).map(|_| None).collect();
    for (pos, l) in (0..depth).rev().enumerate().rev() {
        let base = 2 * depth + 2 + 3 * pos;
        let d = &cache.dec[pos];
        relu_backward_inplace(&mut g, &d.b_out);
        let mut ga = conv_backward(&params.convs[base + 2], &d.a_out, &g, &mut grads.convs[base + 2]);
        relu_backward_inplace(&mut ga, &d.a_out);
        let gcat = conv_backward(&params.convs[base + 1], &d.cat, &ga, &mut grads.convs[base + 1]);
        // Split: first c_l channels belong to the encoder skip.
        let c_skip = cache.enc[l].b_out.c;
        let plane = gcat.h * gcat.w;
        let skip = Feat {
            c: c_skip,
            h: gcat.h,
            w: gcat.w,
            data: gcat.data[..c_skip * plane].to_vec(),
        };
        let mut gup = Feat {
            c: gcat.c - c_skip,
            h: gcat.h,
            w: gcat.w,
            data: gcat.data[c_skip * plane..].to_vec(),
        };
        skip_grads[l] = Some(skip);
        relu_backward_inplace(&mut gup, &d.up_out);
        let gups =
            conv_backward(&params.convs[base], &d.up_in, &gup, &mut grads.convs[base]);
        g = upsample2_backward(&gups);
    }
    // Bottleneck.
    relu_backward_inplace(&mut g, &cache.bot_b);
    let mut ga = conv_backward(
        &params.convs[2 * depth + 1],
        &cache.bot_a,
        &g,
        &mut grads.convs[2 * depth + 1],
    );
    relu_backward_inplace(&mut ga, &cache.bot_a);
    let mut g = conv_backward(&params.convs[2 * depth], &cache.bot_in, &ga, &mut grads.convs[2 * depth]);
    // Encoder levels, deepest first, joining the skip gradients.
    for l in (0..depth).rev() {
        let e = &cache.enc[l];
        let mut gb = maxpool2_backward(&g, &e.pool_arg, e.b_out.h, e.b_out.w);
        if let Some(s) = &skip_grads[l] {
            for (a, b) in gb.data.iter_mut().zip(&s.data) {
                *a += b;
            }
        }
        relu_backward_inplace(&mut gb, &e.b_out);
        let mut ga = conv_backward(&params.convs[2 * l + 1], &e.a_out, &gb, &mut grads.convs[2 * l + 1]);
        relu_backward_inplace(&mut ga, &e.a_out);
        g = conv_backward(&params.convs[2 * l], &e.x_in, &ga, &mut grads.convs[2 * l]);
    }
    g
}

/// Run the denoiser on one `h × w` patch (row-major). The sides must be
/// divisible by 2^depth.
pub fn unet_forward(params: &DenoiserParams, patch: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    check_input(params, h, w, patch.len())?;
    let input = Feat { c: 1, h, w, data: patch.to_vec() };
    let (out, _) = forward_cached(params, &input);
    Ok(out.data)
}

/// Exact reverse-mode parameter gradients for one patch, given the upstream
/// gradient w.r.t. the network output.
pub fn unet_backward(
    params: &DenoiserParams,
    patch: &[f64],
    upstream: &[f64],
    h: usize,
    w: usize,
) -> Result<Gradients> {
    check_input(params, h, w, patch.len())?;
    if upstream.len() != h * w {
        return Err(Error::DimMismatch(format!(
            "upstream gradient length {} != {h}x{w}",
            upstream.len()
        )));
    }
    let input = Feat { c: 1, h, w, data: patch.to_vec() };
    let (_, cache) = forward_cached(params, &input);
    let mut grads = Gradients::zeros_like(params);
    let g = Feat { c: 1, h, w, data: upstream.to_vec() };
    backward_cached(params, &cache, &g, &mut grads);
    Ok(grads)
}

/// Forward pass plus the mean-squared-error loss and its parameter gradients
/// against `target`; the primitive one training step is built from.
pub fn unet_loss_grad(
    params: &DenoiserParams,
    patch: &[f64],
    target: &[f64],
    h: usize,
    w: usize,
) -> Result<(f64, Gradients)> {
    check_input(params, h, w, patch.len())?;
    if target.len() != h * w {
        return Err(Error::DimMismatch(format!("target length {} != {h}x{w}", target.len())));
    }
    let input = Feat { c: 1, h, w, data: patch.to_vec() };
    let (out, cache) = forward_cached(params, &input);
    let n = (h * w) as f64;
    let loss =
        out.data.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let upstream = Feat {
        c: 1,
        h,
        w,
        data: out.data.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect(),
    };
    let mut grads = Gradients::zeros_like(params);
    backward_cached(params, &cache, &upstream, &mut grads);
    Ok((loss, grads))
}
