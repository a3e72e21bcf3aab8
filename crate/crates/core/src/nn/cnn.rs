//! Upsampling decoder from the `16 × 16 × 64` MLP output to the
//! `64 × 64 × 4` layout latent. Each stage is a nearest-neighbour 2×
//! upsample followed by a same-padded convolution; the activation sits
//! between stages. Tensors cross the public API in HWC order.

use serde::{Deserialize, Serialize};

use super::{Activation, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::rng::{gaussian_vec, rng_from_seed};
use crate::{LAYOUT_SHAPE, LOW_MLP_SHAPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnDecoderConfig {
    pub input_shape: [usize; 3],
    pub output_shape: [usize; 3],
    /// Channel count entering each stage followed by the final output
    /// channels, e.g. `[64, 16, 4]` for two stages.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub activation: Activation,
}

impl Default for CnnDecoderConfig {
    fn default() -> Self {
        Self {
            input_shape: [LOW_MLP_SHAPE.0, LOW_MLP_SHAPE.1, LOW_MLP_SHAPE.2],
            output_shape: [LAYOUT_SHAPE.0, LAYOUT_SHAPE.1, LAYOUT_SHAPE.2],
            channels: vec![64, 16, 4],
            kernel_size: 3,
            activation: Activation::Gelu,
        }
    }
}

impl CnnDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let [ih, iw, ic] = self.input_shape;
        let [oh, ow, oc] = self.output_shape;
        if self.channels.len() != 3 {
            return Err(Error::Config(
                "cnn decoder needs exactly two upsampling stages".into(),
            ));
        }
        if ih * 4 != oh || iw * 4 != ow {
            return Err(Error::Config(
                "cnn decoder must double the spatial side twice".into(),
            ));
        }
        if self.channels[0] != ic || self.channels[2] != oc || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "channel schedule {:?} inconsistent with shapes",
                self.channels
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CnnDecoder {
    config: CnnDecoderConfig,
    pub params: ParamStore,
}

pub struct CnnCache {
    upsampled: Vec<Vec<f64>>,
    pre_act: Vec<Vec<f64>>,
}

impl CnnDecoder {
    pub fn new(config: CnnDecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::default();
        let k = config.kernel_size;
        for s in 0..config.channels.len() - 1 {
            let (cin, cout) = (config.channels[s], config.channels[s + 1]);
            let scale = (1.0 / (cin * k * k) as f64).sqrt();
            let w = gaussian_vec(&mut rng, cout * cin * k * k)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            params.push(format!("stage{s}.weight"), vec![cout, cin, k, k], w);
            params.push(format!("stage{s}.bias"), vec![cout], vec![0.0; cout]);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CnnDecoderConfig {
        &self.config
    }

    fn stages(&self) -> usize {
        self.config.channels.len() - 1
    }

    pub fn input_len(&self) -> usize {
        self.config.input_shape.iter().product()
    }

    pub fn forward(&self, input_hwc: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(input_hwc, false)?.0)
    }

    pub fn forward_train(&self, input_hwc: &[f64]) -> Result<(Vec<f64>, CnnCache)> {
        let (out, cache) = self.run(input_hwc, true)?;
        Ok((out, cache.expect("training pass keeps a cache")))
    }

    fn run(&self, input_hwc: &[f64], keep: bool) -> Result<(Vec<f64>, Option<CnnCache>)> {
        if input_hwc.len() != self.input_len() {
            return Err(Error::dims(
                "cnn decoder input",
                format!("{:?}", self.config.input_shape),
                input_hwc.len(),
            ));
        }
        let [mut h, mut w, c] = self.config.input_shape;
        let mut x = hwc_to_chw(input_hwc, h, w, c);
        let mut cache = CnnCache {
            upsampled: Vec::new(),
            pre_act: Vec::new(),
        };
        let k = self.config.kernel_size;
        for s in 0..self.stages() {
            let (cin, cout) = (self.config.channels[s], self.config.channels[s + 1]);
            let up = upsample2(&x, cin, h, w);
            h *= 2;
            w *= 2;
            let y = conv2d_same(
                &up,
                cin,
                h,
                w,
                self.params.get(2 * s),
                self.params.get(2 * s + 1),
                cout,
                k,
            );
            if keep {
                cache.upsampled.push(up);
            }
            if s + 1 < self.stages() {
                let act = self.config.activation;
                x = y.iter().map(|&v| act.apply(v)).collect();
                if keep {
                    cache.pre_act.push(y);
                }
            } else {
                x = y;
            }
        }
        let out_c = *self.config.channels.last().unwrap();
        Ok((chw_to_hwc(&x, h, w, out_c), keep.then_some(cache)))
    }

    /// Accumulates parameter gradients and returns the input gradient (HWC).
    pub fn backward(
        &self,
        cache: &CnnCache,
        grad_out_hwc: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let [oh, ow, oc] = self.config.output_shape;
        let mut g = hwc_to_chw(grad_out_hwc, oh, ow, oc);
        let (mut h, mut w) = (oh, ow);
        let k = self.config.kernel_size;
        for s in (0..self.stages()).rev() {
            let (cin, cout) = (self.config.channels[s], self.config.channels[s + 1]);
            if s + 1 < self.stages() {
                let act = self.config.activation;
                g.iter_mut()
                    .zip(&cache.pre_act[s])
                    .for_each(|(gv, p)| *gv *= act.grad(*p));
            }
            let (gw, rest) = grads.split_at_mut(2 * s + 1);
            let g_up = conv2d_same_backward(
                &cache.upsampled[s],
                cin,
                h,
                w,
                self.params.get(2 * s),
                cout,
                k,
                &g,
                &mut gw[2 * s],
                &mut rest[0],
            );
            h /= 2;
            w /= 2;
            g = upsample2_backward(&g_up, cin, h, w);
        }
        let [ih, iw, ic] = self.config.input_shape;
        chw_to_hwc(&g, ih, iw, ic)
    }
}

pub(crate) fn hwc_to_chw(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + xx] = x[(y * w + xx) * c + ch];
            }
        }
    }
    out
}

pub(crate) fn chw_to_hwc(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(y * w + xx) * c + ch] = x[(ch * h + y) * w + xx];
            }
        }
    }
    out
}

fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &x[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]; `h`, `w` are the low-resolution sizes.
fn upsample2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &g[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            let dst = &mut out[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            for (xx, v) in src.iter().enumerate() {
                dst[xx / 2] += v;
            }
        }
    }
    out
}

/// Overlap of an output row range with a shifted input, as
/// `(out_start, out_end)` such that `out_start + d` stays in bounds.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let start = (-d).max(0) as usize;
    let end = (len as isize - d).min(len as isize).max(0) as usize;
    (start, end.max(start))
}

/// Zero-padded same-size convolution over CHW planes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_same(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = span(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * w + (x0 as isize + dx) as usize
                            ..sy * w + (x1 as isize + dx) as usize];
                        axpy(wv, srow, &mut o[y * w + x0..y * w + x1]);
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_same`]: accumulates into `gw`, `gb` and returns
/// the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_same_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    grad_out: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let plane = h * w;
    let mut gin = vec![0.0; cin * plane];
    for co in 0..cout {
        let g = &grad_out[co * plane..(co + 1) * plane];
        gb[co] += g.iter().sum::<f64>();
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            let gi = &mut gin[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = span(w, dx);
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x0 as isize + dx) as usize;
                        let s1 = sy * w + (x1 as isize + dx) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        acc += dot(grow, &src[s0..s1]);
                        if wv != 0.0 {
                            axpy(wv, grow, &mut gi[s0..s1]);
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    gin
}
