//! Minimal layers with hand-written backward passes.
//!
//! Activations are batches of instances stored one per row, each row laid out
//! height-major then width then channel. Fully connected layers treat a row as
//! a flat vector, so flattening is free.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// A batch of activations, one instance per row.
#[derive(Debug, Clone)]
pub struct Act {
    pub data: Array2<f64>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Act {
    pub fn new(data: Array2<f64>, height: usize, width: usize, channels: usize) -> Self {
        debug_assert_eq!(data.ncols(), height * width * channels);
        Self {
            data,
            height,
            width,
            channels,
        }
    }

    pub fn flat(data: Array2<f64>) -> Self {
        let c = data.ncols();
        Self::new(data, 1, 1, c)
    }

    pub fn batch(&self) -> usize {
        self.data.nrows()
    }
}

fn uniform_init(rng: &mut Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

/// 2-D convolution, stride 1, zero padding, implemented as im2col + GEMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `(out_channels, kernel * kernel * in_channels)`, columns ordered (ky, kx, c).
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_height: usize,
    in_width: usize,
    out_height: usize,
    out_width: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let weight = uniform_init(rng, (out_channels, fan_in), (6.0 / fan_in as f64).sqrt());
        let bias = Array1::zeros(out_channels);
        Self {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let h = (height + 2 * self.padding).checked_sub(self.kernel)? + 1;
        let w = (width + 2 * self.padding).checked_sub(self.kernel)? + 1;
        Some((h, w))
    }

    pub fn forward(&self, x: &Act) -> (Act, ConvCache) {
        let (n, h, w, c) = (x.batch(), x.height, x.width, x.channels);
        debug_assert_eq!(c, self.in_channels);
        let (oh, ow) = self.output_size(h, w).expect("input smaller than kernel");
        let k = self.kernel;
        let p = self.padding as isize;
        let kkc = k * k * c;
        let mut cols = Array2::<f64>::zeros((n * oh * ow, kkc));
        for b in 0..n {
            let src = x.data.row(b);
            let src = src.as_slice().expect("contiguous activations");
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = (b * oh + oy) * ow + ox;
                    let mut dst = cols.row_mut(r);
                    let dst = dst.as_slice_mut().unwrap();
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s0 = (iy as usize * w + ix as usize) * c;
                            let d0 = (ky * k + kx) * c;
                            dst[d0..d0 + c].copy_from_slice(&src[s0..s0 + c]);
                        }
                    }
                }
            }
        }
        let mut out = cols.dot(&self.weight.t());
        out += &self.bias;
        let out = out
            .into_shape_with_order((n, oh * ow * self.out_channels))
            .expect("contiguous conv output");
        let cache = ConvCache {
            cols,
            in_height: h,
            in_width: w,
            out_height: oh,
            out_width: ow,
        };
        (Act::new(out, oh, ow, self.out_channels), cache)
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: &Array2<f64>,
        grads: &mut Conv2d,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let n = dout.nrows();
        let (oh, ow) = (cache.out_height, cache.out_width);
        let dout2 = dout
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * oh * ow, self.out_channels))
            .expect("contiguous gradient");
        grads.weight += &dout2.t().dot(&cache.cols);
        grads.bias += &dout2.sum_axis(Axis(0));
        if !want_input {
            return None;
        }
        let dcols = dout2.dot(&self.weight);
        let (h, w, c, k) = (cache.in_height, cache.in_width, self.in_channels, self.kernel);
        let p = self.padding as isize;
        let mut dx = Array2::<f64>::zeros((n, h * w * c));
        for b in 0..n {
            let mut dst = dx.row_mut(b);
            let dst = dst.as_slice_mut().unwrap();
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = (b * oh + oy) * ow + ox;
                    let src = dcols.row(r);
                    let src = src.as_slice().unwrap();
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d0 = (iy as usize * w + ix as usize) * c;
                            let s0 = (ky * k + kx) * c;
                            for (d, s) in dst[d0..d0 + c].iter_mut().zip(&src[s0..s0 + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Non-overlapping max pooling with a square window; trailing rows/columns
/// that do not fill a window are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool {
    pub size: usize,
}

#[derive(Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_cols: usize,
}

impl MaxPool {
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.size, width / self.size)
    }

    pub fn forward(&self, x: &Act) -> (Act, PoolCache) {
        let (n, h, w, c) = (x.batch(), x.height, x.width, x.channels);
        let (oh, ow) = self.output_size(h, w);
        let sz = self.size;
        let mut out = Array2::<f64>::zeros((n, oh * ow * c));
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            let src = x.data.row(b);
            let src = src.as_slice().unwrap();
            let mut dst = out.row_mut(b);
            let dst = dst.as_slice_mut().unwrap();
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..sz {
                            for dx in 0..sz {
                                let idx = ((oy * sz + dy) * w + ox * sz + dx) * c + ch;
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dst[(oy * ow + ox) * c + ch] = best;
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let cache = PoolCache {
            argmax,
            in_cols: h * w * c,
        };
        (Act::new(out, oh, ow, c), cache)
    }

    pub fn backward(&self, cache: &PoolCache, dout: &Array2<f64>) -> Array2<f64> {
        let n = dout.nrows();
        let per = dout.ncols();
        let mut dx = Array2::<f64>::zeros((n, cache.in_cols));
        for b in 0..n {
            for j in 0..per {
                dx[[b, cache.argmax[b * per + j]]] += dout[[b, j]];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `(out_features, in_features)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: uniform_init(rng, (out_features, in_features), bound),
            bias: Array1::from_shape_simple_fn(out_features, || rng.random_range(-bound..=bound)),
        }
    }

    /// He-uniform weights and zero bias, for layers followed by a rectifier.
    pub fn new_relu(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Self {
            weight: uniform_init(rng, (out_features, in_features), (6.0 / in_features as f64).sqrt()),
            bias: Array1::zeros(out_features),
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        out
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, input: &Array2<f64>, dout: &Array2<f64>, grads: &mut Linear, want_input: bool) -> Option<Array2<f64>> {
        grads.weight += &dout.t().dot(input);
        grads.bias += &dout.sum_axis(Axis(0));
        want_input.then(|| dout.dot(&self.weight))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool(MaxPool),
    Linear(Linear),
}

#[derive(Debug)]
pub enum LayerCache {
    Conv(ConvCache),
    /// Post-activation output; its sign pattern is the ReLU mask.
    Relu(Array2<f64>),
    Pool(PoolCache),
    Linear(Array2<f64>),
}

impl Layer {
    pub fn forward(&self, x: Act) -> (Act, LayerCache) {
        match self {
            Layer::Conv(conv) => {
                let (y, cache) = conv.forward(&x);
                (y, LayerCache::Conv(cache))
            }
            Layer::Relu => {
                let mut y = x;
                y.data.mapv_inplace(|v| v.max(0.0));
                let cache = LayerCache::Relu(y.data.clone());
                (y, cache)
            }
            Layer::MaxPool(pool) => {
                let (y, cache) = pool.forward(&x);
                (y, LayerCache::Pool(cache))
            }
            Layer::Linear(lin) => {
                let y = lin.forward(&x.data);
                (Act::flat(y), LayerCache::Linear(x.data))
            }
        }
    }

    /// Forward without keeping anything for backward.
    pub fn infer(&self, x: Act) -> Act {
        match self {
            Layer::Conv(conv) => conv.forward(&x).0,
            Layer::Relu => {
                let mut y = x;
                y.data.mapv_inplace(|v| v.max(0.0));
                y
            }
            Layer::MaxPool(pool) => pool.forward(&x).0,
            Layer::Linear(lin) => Act::flat(lin.forward(&x.data)),
        }
    }

    pub fn backward(&self, cache: &LayerCache, dout: Array2<f64>, grads: &mut Layer, want_input: bool) -> Option<Array2<f64>> {
        match (self, cache, grads) {
            (Layer::Conv(conv), LayerCache::Conv(c), Layer::Conv(g)) => conv.backward(c, &dout, g, want_input),
            (Layer::Relu, LayerCache::Relu(out), Layer::Relu) => {
                let mut d = dout;
                ndarray::Zip::from(&mut d).and(out).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                });
                Some(d)
            }
            (Layer::MaxPool(pool), LayerCache::Pool(c), Layer::MaxPool(_)) => Some(pool.backward(c, &dout)),
            (Layer::Linear(lin), LayerCache::Linear(input), Layer::Linear(g)) => lin.backward(input, &dout, g, want_input),
            _ => unreachable!("layer, cache and gradient kinds must match"),
        }
    }

    pub fn zeros_like(&self) -> Layer {
        match self {
            Layer::Conv(c) => Layer::Conv(Conv2d {
                weight: Array2::zeros(c.weight.dim()),
                bias: Array1::zeros(c.bias.len()),
                ..c.clone()
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool(p) => Layer::MaxPool(*p),
            Layer::Linear(l) => Layer::Linear(Linear::zeros(l.in_features(), l.out_features())),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv(c) => vec![c.weight.as_slice().unwrap(), c.bias.as_slice().unwrap()],
            Layer::Linear(l) => vec![l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()],
            Layer::Relu | Layer::MaxPool(_) => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv(c) => vec![c.weight.as_slice_mut().unwrap(), c.bias.as_slice_mut().unwrap()],
            Layer::Linear(l) => vec![l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()],
            Layer::Relu | Layer::MaxPool(_) => vec![],
        }
    }
}

/// Rows `rows` of `m`, in the given order.
pub fn select_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

/// Copy `src` into rows `offset..` of `dst`.
pub fn put_rows(dst: &mut Array2<f64>, offset: usize, src: &Array2<f64>) {
    dst.slice_mut(s![offset..offset + src.nrows(), ..]).assign(src);
}
