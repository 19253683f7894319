//! Layers with explicit forward/backward passes.
//!
//! A layer caches what its backward pass needs only when the forward pass is
//! run with `record = true`. Parameter gradients accumulate into the
//! [`ParamStore`]; call `zero_grad` between steps.

use rand::Rng;

use super::params::{Init, ParamId, ParamKind, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::rng::PipelineRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass settings.
#[derive(Debug, Clone, Copy)]
pub struct Pass {
    pub mode: Mode,
    /// Keep activations for a later backward pass.
    pub record: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        mode: Mode::Train,
        record: true,
    };
    pub const EVAL: Pass = Pass {
        mode: Mode::Eval,
        record: false,
    };
    /// Frozen sub-network during training: running statistics, no caching.
    pub const FROZEN: Pass = Pass {
        mode: Mode::Eval,
        record: false,
    };
}

/// Output columns `lo..hi` whose input column `ox * s + base` lies in `0..w`.
fn valid_range(wo: usize, s: isize, base: isize, w: usize) -> (usize, usize) {
    let lo = if base >= 0 { 0 } else { ((-base + s - 1) / s) as usize };
    let hi = if (w as isize) <= base {
        0
    } else {
        (((w as isize - 1 - base) / s) + 1) as usize
    };
    (lo.min(wo), hi.min(wo))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// False for the first layer of a network, whose input needs no gradient.
    pub input_grad: bool,
    cache: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut PipelineRng,
    ) -> Self {
        let fan_out = cout * kernel * kernel;
        let weight = ps.add(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            ParamKind::Weight,
            Init::KaimingNormal { fan: fan_out },
            rng,
        );
        Conv2d {
            weight,
            cin,
            cout,
            kernel,
            stride,
            padding,
            input_grad: true,
            cache: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Samples per im2col chunk, bounding the column buffer to ~16 MB.
    fn chunk(&self, n: usize, p: usize) -> usize {
        let kk = self.cin * self.kernel * self.kernel;
        ((1 << 22) / (kk * p).max(1)).clamp(1, n.max(1))
    }

    /// Writes sample columns into `cols` (row stride `ld`) at column `off`.
    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32], ld: usize, off: usize) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let p = ho * wo;
        let (s, pad) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * ld + off..row * ld + off + p];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - pad;
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = valid_range(wo, s, kj as isize - pad, w);
                        out[..lo].iter_mut().for_each(|v| *v = 0.0);
                        out[hi.max(lo)..].iter_mut().for_each(|v| *v = 0.0);
                        let base = kj as isize - pad;
                        for ox in lo..hi {
                            out[ox] = src[(ox as isize * s + base) as usize];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, gx: &mut [f32], ld: usize, off: usize) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let (s, pad) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.cin {
            let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * ld + off..];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = valid_range(wo, s, kj as isize - pad, w);
                        let base = kj as isize - pad;
                        let row_src = &src[oy * wo..(oy + 1) * wo];
                        for ox in lo..hi {
                            dst[(ox as isize * s + base) as usize] += row_src[ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, ps: &mut ParamStore, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.cin, "conv expects {} input channels", self.cin);
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.cin * self.kernel * self.kernel;
        let p = ho * wo;
        let cout = self.cout;
        let wt = ps.value(self.weight);
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        let nb = self.chunk(n, p);
        let mut cols = vec![0.0; kk * nb * p];
        let mut ybuf = vec![0.0; cout * nb * p];
        for start in (0..n).step_by(nb) {
            let m = nb.min(n - start);
            let ld = m * p;
            for b in 0..m {
                let xb = &x.data[(start + b) * c * h * w..(start + b + 1) * c * h * w];
                self.im2col(xb, h, w, &mut cols, ld, b * p);
            }
            gemm(
                cout,
                kk,
                ld,
                wt,
                (kk as isize, 1),
                &cols,
                (ld as isize, 1),
                0.0,
                &mut ybuf,
            );
            for b in 0..m {
                let ob = &mut out.data[(start + b) * cout * p..(start + b + 1) * cout * p];
                for co in 0..cout {
                    ob[co * p..(co + 1) * p].copy_from_slice(&ybuf[co * ld + b * p..co * ld + (b + 1) * p]);
                }
            }
        }
        self.cache = pass.record.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, ps: &mut ParamStore, gy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without recorded forward");
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.cin * self.kernel * self.kernel;
        let p = ho * wo;
        let cout = self.cout;
        let mut gx = if self.input_grad {
            Tensor::zeros(&x.shape)
        } else {
            Tensor::empty()
        };
        let nb = self.chunk(n, p);
        let mut cols = vec![0.0; kk * nb * p];
        let mut dcols = if self.input_grad {
            vec![0.0; kk * nb * p]
        } else {
            Vec::new()
        };
        let mut gbuf = vec![0.0; cout * nb * p];
        let mut gw = std::mem::take(&mut ps.get_mut(self.weight).grad);
        let weight = ps.value(self.weight);
        for start in (0..n).step_by(nb) {
            let m = nb.min(n - start);
            let ld = m * p;
            for b in 0..m {
                let xb = &x.data[(start + b) * c * h * w..(start + b + 1) * c * h * w];
                self.im2col(xb, h, w, &mut cols, ld, b * p);
                let gyb = &gy.data[(start + b) * cout * p..(start + b + 1) * cout * p];
                for co in 0..cout {
                    gbuf[co * ld + b * p..co * ld + (b + 1) * p].copy_from_slice(&gyb[co * p..(co + 1) * p]);
                }
            }
            // gW (cout x kk) += gY (cout x ld) * cols^T (ld x kk)
            gemm(
                cout,
                ld,
                kk,
                &gbuf,
                (ld as isize, 1),
                &cols,
                (1, ld as isize),
                1.0,
                &mut gw,
            );
            if self.input_grad {
                gemm(
                    kk,
                    cout,
                    ld,
                    weight,
                    (1, kk as isize),
                    &gbuf,
                    (ld as isize, 1),
                    0.0,
                    &mut dcols,
                );
                for b in 0..m {
                    let gxb = &mut gx.data[(start + b) * c * h * w..(start + b + 1) * c * h * w];
                    self.col2im(&dcols, h, w, gxb, ld, b * p);
                }
            }
        }
        ps.get_mut(self.weight).grad = gw;
        gx
    }
}

/// Batch normalization over (N, H, W) per channel; also used for (N, C)
/// activations, treated as H = W = 1.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: Vec<usize>,
    train: bool,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        &[n, c, h, w] => (n, c, h * w),
        &[n, c] => (n, c, 1),
        s => panic!("batch norm expects 2-d or 4-d input, got {s:?}"),
    }
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut PipelineRng) -> Self {
        BatchNorm {
            gamma: ps.add(
                &format!("{name}.weight"),
                &[channels],
                ParamKind::Weight,
                Init::Ones,
                rng,
            ),
            beta: ps.add(
                &format!("{name}.bias"),
                &[channels],
                ParamKind::Weight,
                Init::Zeros,
                rng,
            ),
            running_mean: ps.add(
                &format!("{name}.running_mean"),
                &[channels],
                ParamKind::Buffer,
                Init::Zeros,
                rng,
            ),
            running_var: ps.add(
                &format!("{name}.running_var"),
                &[channels],
                ParamKind::Buffer,
                Init::Ones,
                rng,
            ),
            channels,
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward(&mut self, ps: &mut ParamStore, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, hw) = channel_layout(&x.shape);
        assert_eq!(c, self.channels);
        let m = n * hw;
        let train = pass.mode == Mode::Train;
        if train {
            assert!(
                m > 1,
                "batch norm in training mode needs more than one value per channel"
            );
        }
        let (mean, var): (Vec<f32>, Vec<f32>) = if train {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let s = &x.data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    mean[ch] += s.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for b in 0..n {
                for ch in 0..c {
                    let s = &x.data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    var[ch] += s.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            let mom = self.momentum as f64;
            let unbias = m as f64 / (m as f64 - 1.0);
            let rm = &mut ps.get_mut(self.running_mean).value;
            for ch in 0..c {
                rm[ch] = ((1.0 - mom) * rm[ch] as f64 + mom * mean[ch]) as f32;
            }
            let rv = &mut ps.get_mut(self.running_var).value;
            for ch in 0..c {
                rv[ch] = ((1.0 - mom) * rv[ch] as f64 + mom * var[ch] * unbias) as f32;
            }
            (
                mean.iter().map(|&v| v as f32).collect(),
                var.iter().map(|&v| v as f32).collect(),
            )
        } else {
            (
                ps.value(self.running_mean).to_vec(),
                ps.value(self.running_var).to_vec(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = ps.value(self.gamma);
        let beta = ps.value(self.beta);
        let mut out = Tensor::zeros(&x.shape);
        let mut xhat = if pass.record { vec![0.0; x.numel()] } else { Vec::new() };
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for i in r {
                    let xh = (x.data[i] - mu) * is;
                    out.data[i] = xh * g + bt;
                    if pass.record {
                        xhat[i] = xh;
                    }
                }
            }
        }
        self.cache = pass.record.then(|| BnCache {
            xhat,
            inv_std,
            shape: x.shape.clone(),
            train,
        });
        out
    }

    pub fn backward(&mut self, ps: &mut ParamStore, gy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batch norm backward without recorded forward");
        let (n, c, hw) = channel_layout(&cache.shape);
        let m = (n * hw) as f64;
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    dgamma[ch] += (gy.data[i] * cache.xhat[i]) as f64;
                    dbeta[ch] += gy.data[i] as f64;
                }
            }
        }
        let gamma = ps.value(self.gamma).to_vec();
        let mut gx = Tensor::zeros(&cache.shape);
        for b in 0..n {
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                let (mg, mb) = ((dgamma[ch] / m) as f32, (dbeta[ch] / m) as f32);
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    gx.data[i] = if cache.train {
                        scale * (gy.data[i] - mb - cache.xhat[i] * mg)
                    } else {
                        scale * gy.data[i]
                    };
                }
            }
        }
        let g = &mut ps.get_mut(self.gamma).grad;
        for ch in 0..c {
            g[ch] += dgamma[ch] as f32;
        }
        let g = &mut ps.get_mut(self.beta).grad;
        for ch in 0..c {
            g[ch] += dbeta[ch] as f32;
        }
        gx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let out = Tensor::from_vec(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect());
        self.mask = pass.record.then(|| x.data.iter().map(|&v| v > 0.0).collect());
        out
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without recorded forward");
        let data = gy
            .data
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::from_vec(&gy.shape, data)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = if pass.record {
            vec![0usize; out.numel()]
        } else {
            Vec::new()
        };
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data[o] = best;
                    if pass.record {
                        arg[o] = best_i;
                    }
                }
            }
        }
        self.cache = pass.record.then(|| (arg, x.shape.clone()));
        out
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (arg, shape) = self.cache.take().expect("maxpool backward without recorded forward");
        let mut gx = Tensor::zeros(&shape);
        for (o, &i) in arg.iter().enumerate() {
            gx.data[i] += gy.data[o];
        }
        gx
    }
}

/// (N, C, H, W) -> (N, C) spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let data = (0..n * c)
            .map(|pl| x.data[pl * hw..(pl + 1) * hw].iter().sum::<f32>() / hw as f32)
            .collect();
        self.shape = pass.record.then(|| x.shape.clone());
        Tensor::from_vec(&[n, c], data)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let shape = self.shape.take().expect("pool backward without recorded forward");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let mut gx = Tensor::zeros(&shape);
        for pl in 0..n * c {
            let g = gy.data[pl] / hw as f32;
            gx.data[pl * hw..(pl + 1) * hw].iter_mut().for_each(|v| *v = g);
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut PipelineRng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Linear {
            weight: ps.add(
                &format!("{name}.weight"),
                &[fan_out, fan_in],
                ParamKind::Weight,
                Init::Uniform { bound },
                rng,
            ),
            bias: ps.add(
                &format!("{name}.bias"),
                &[fan_out],
                ParamKind::Weight,
                Init::Uniform { bound },
                rng,
            ),
            fan_in,
            fan_out,
            cache: None,
        }
    }

    pub fn forward(&mut self, ps: &mut ParamStore, x: &Tensor, pass: Pass) -> Tensor {
        let (n, f) = x.dims2();
        assert_eq!(f, self.fan_in, "linear expects {} features", self.fan_in);
        let (o, i) = (self.fan_out, self.fan_in);
        let bias = ps.value(self.bias);
        let mut out = Tensor::zeros(&[n, o]);
        for r in 0..n {
            out.data[r * o..(r + 1) * o].copy_from_slice(bias);
        }
        gemm(
            n,
            i,
            o,
            &x.data,
            (i as isize, 1),
            ps.value(self.weight),
            (1, i as isize),
            1.0,
            &mut out.data,
        );
        self.cache = pass.record.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, ps: &mut ParamStore, gy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without recorded forward");
        let (n, _) = x.dims2();
        let (o, i) = (self.fan_out, self.fan_in);
        let mut gw = std::mem::take(&mut ps.get_mut(self.weight).grad);
        gemm(
            o,
            n,
            i,
            &gy.data,
            (1, o as isize),
            &x.data,
            (i as isize, 1),
            1.0,
            &mut gw,
        );
        ps.get_mut(self.weight).grad = gw;
        let gb = &mut ps.get_mut(self.bias).grad;
        for r in 0..n {
            for (g, &v) in gb.iter_mut().zip(&gy.data[r * o..(r + 1) * o]) {
                *g += v;
            }
        }
        let mut gx = Tensor::zeros(&[n, i]);
        gemm(
            n,
            o,
            i,
            &gy.data,
            (o as isize, 1),
            ps.value(self.weight),
            (i as isize, 1),
            0.0,
            &mut gx.data,
        );
        gx
    }
}

/// Inverted dropout driven by the layer's own seeded stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f32,
    rng: PipelineRng,
    mask: Option<Vec<f32>>,
}

impl Dropout {
    pub fn new(p: f32, rng: PipelineRng) -> Self {
        Dropout { p, rng, mask: None }
    }

    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        if pass.mode == Mode::Eval || self.p == 0.0 {
            self.mask = pass.record.then(|| vec![1.0; x.numel()]);
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f32> = (0..x.numel())
            .map(|_| {
                if self.rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out = Tensor::from_vec(&x.shape, x.data.iter().zip(&mask).map(|(a, m)| a * m).collect());
        self.mask = pass.record.then_some(mask);
        out
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("dropout backward without recorded forward");
        Tensor::from_vec(&gy.shape, gy.data.iter().zip(&mask).map(|(g, m)| g * m).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
    cache: Option<Vec<usize>>,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut PipelineRng) -> Self {
        Embedding {
            table: ps.add(
                &format!("{name}.weight"),
                &[rows, dim],
                ParamKind::Weight,
                Init::KaimingNormal { fan: 2 },
                rng,
            ),
            rows,
            dim,
            cache: None,
        }
    }

    pub fn forward(&mut self, ps: &mut ParamStore, idx: &[usize], pass: Pass) -> Tensor {
        let t = ps.value(self.table);
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            assert!(i < self.rows, "embedding index {i} out of range");
            data.extend_from_slice(&t[i * self.dim..(i + 1) * self.dim]);
        }
        self.cache = pass.record.then(|| idx.to_vec());
        Tensor::from_vec(&[idx.len(), self.dim], data)
    }

    pub fn backward(&mut self, ps: &mut ParamStore, gy: &Tensor) {
        let idx = self.cache.take().expect("embedding backward without recorded forward");
        let g = &mut ps.get_mut(self.table).grad;
        for (r, &i) in idx.iter().enumerate() {
            for d in 0..self.dim {
                g[i * self.dim + d] += gy.data[r * self.dim + d];
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    out: Option<Tensor>,
}

impl Sigmoid {
    pub fn forward(&mut self, x: &Tensor, pass: Pass) -> Tensor {
        let out = Tensor::from_vec(&x.shape, x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect());
        self.out = pass.record.then(|| out.clone());
        out
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let y = self.out.take().expect("sigmoid backward without recorded forward");
        Tensor::from_vec(
            &gy.shape,
            gy.data.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect(),
        )
    }
}

/// Conv followed by batch norm; the unit every residual block is built from.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        conv_name: &str,
        bn_name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut PipelineRng,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(ps, conv_name, cin, cout, kernel, stride, padding, rng),
            bn: BatchNorm::new(ps, bn_name, cout, rng),
        }
    }

    pub fn forward(&mut self, ps: &mut ParamStore, x: &Tensor, pass: Pass) -> Tensor {
        let h = self.conv.forward(ps, x, pass);
        self.bn.forward(ps, &h, pass)
    }

    pub fn backward(&mut self, ps: &mut ParamStore, gy: &Tensor) -> Tensor {
        let g = self.bn.backward(ps, gy);
        self.conv.backward(ps, &g)
    }
}

/// Two 3x3 conv-bn layers with an identity or projected shortcut.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub first: ConvBn,
    pub second: ConvBn,
    pub downsample: Option<ConvBn>,
    relu1: Relu,
    relu_out: Relu,
}

impl BasicBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut PipelineRng) -> Self {
        let first = ConvBn::new(
            ps,
            &format!("{name}.conv1"),
            &format!("{name}.bn1"),
            cin,
            cout,
            3,
            stride,
            1,
            rng,
        );
        let second = ConvBn::new(
            ps,
            &format!("{name}.conv2"),
            &format!("{name}.bn2"),
            cout,
            cout,
            3,
            1,
            1,
            rng,
        );
        let downsample = (stride != 1 || cin != cout).then(|| {
            ConvBn::new(
                ps,
                &format!("{name}.downsample.0"),
                &format!("{name}.downsample.1"),
                cin,
                cout,
                1,
                stride,
                0,
                rng,
            )
        });
        BasicBlock {
            first,
            second,
            downsample,
            relu1: Relu::default(),
            relu_out: Relu::default(),
        }
    }

    pub fn forward(&mut self, ps: &mut ParamStore, x: &Tensor, pass: Pass) -> Tensor {
        let h = self.first.forward(ps, x, pass);
        let h = self.relu1.forward(&h, pass);
        let mut h = self.second.forward(ps, &h, pass);
        match &mut self.downsample {
            Some(ds) => h.add_assign(&ds.forward(ps, x, pass)),
            None => h.add_assign(x),
        }
        self.relu_out.forward(&h, pass)
    }

    pub fn backward(&mut self, ps: &mut ParamStore, gy: &Tensor) -> Tensor {
        let g = self.relu_out.backward(gy);
        let gm = self.second.backward(ps, &g);
        let gm = self.relu1.backward(&gm);
        let mut gx = self.first.backward(ps, &gm);
        match &mut self.downsample {
            Some(ds) => gx.add_assign(&ds.backward(ps, &g)),
            None => gx.add_assign(&g),
        }
        gx
    }
}
