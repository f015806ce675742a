//! Layer stacks with explicit reverse-mode gradients.
//!
//! A [`Sequential`] forward pass can record a [`Trace`] of every activation;
//! `backward` walks the trace in reverse, optionally accumulating parameter
//! gradients and optionally accepting extra gradient seeds at intermediate
//! activations (used by multi-layer feature losses).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::par;
use crate::tensor::{matmul, Layout, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out][in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out][in][k][k]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Conv(Conv2d<T>),
    LeakyRelu,
    Tanh,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    /// Reinterprets each sample as `[c, h, w]`.
    Reshape([usize; 3]),
    GlobalAvgPool,
    /// 2x2 average pooling with stride 2.
    AvgPool2,
    /// Per-sample division by the L2 norm.
    L2Normalize,
}

fn he_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect()
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: he_normal(rng, in_dim * out_dim, in_dim),
            bias: vec![T::zero(); out_dim],
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let kernel = 3;
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad: 1,
            weight: he_normal(rng, out_c * in_c * kernel * kernel, in_c * kernel * kernel),
            bias: vec![T::zero(); out_c],
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let ohw = oh * ow;
        for ci in 0..self.in_c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel;
        let ohw = oh * ow;
        for ci in 0..self.in_c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Layer<T> {
    pub fn out_shape(&self, s: [usize; 4]) -> [usize; 4] {
        match self {
            Layer::Linear(l) => [s[0], l.out_dim, 1, 1],
            Layer::Conv(c) => {
                let (oh, ow) = c.out_hw(s[2], s[3]);
                [s[0], c.out_c, oh, ow]
            }
            Layer::LeakyRelu | Layer::Tanh | Layer::L2Normalize => s,
            Layer::Upsample2 => [s[0], s[1], s[2] * 2, s[3] * 2],
            Layer::Reshape(r) => [s[0], r[0], r[1], r[2]],
            Layer::GlobalAvgPool => [s[0], s[1], 1, 1],
            Layer::AvgPool2 => [s[0], s[1], s[2] / 2, s[3] / 2],
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Linear(_) | Layer::Conv(_) => 2,
            _ => 0,
        }
    }

    fn check_input(&self, s: [usize; 4]) {
        match self {
            Layer::Linear(l) => assert_eq!(
                s[1] * s[2] * s[3],
                l.in_dim,
                "linear layer expects {} inputs, got shape {s:?}",
                l.in_dim
            ),
            Layer::Conv(c) => assert_eq!(s[1], c.in_c, "conv expects {} channels", c.in_c),
            Layer::Reshape(r) => assert_eq!(s[1] * s[2] * s[3], r.iter().product::<usize>()),
            Layer::AvgPool2 => assert!(s[2] % 2 == 0 && s[3] % 2 == 0, "pooling needs even sizes, got {s:?}"),
            _ => {}
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        self.check_input(s);
        let os = self.out_shape(s);
        match self {
            Layer::Linear(l) => {
                let n = s[0];
                let mut out = Vec::with_capacity(n * l.out_dim);
                for _ in 0..n {
                    out.extend_from_slice(&l.bias);
                }
                matmul(
                    n,
                    l.in_dim,
                    l.out_dim,
                    x.data(),
                    Layout::Plain,
                    &l.weight,
                    Layout::Transposed,
                    &mut out,
                    true,
                );
                Tensor::from_vec(os, out)
            }
            Layer::Conv(c) => {
                let (h, w) = (s[2], s[3]);
                let ohw = os[2] * os[3];
                let ck2 = c.in_c * c.kernel * c.kernel;
                let in_len = x.sample_len();
                let mut out = Tensor::zeros(os);
                let xd = x.data();
                par::for_each_chunk_mut(out.data_mut(), c.out_c * ohw, |i, o| {
                    let mut cols = vec![T::zero(); ck2 * ohw];
                    c.im2col(&xd[i * in_len..(i + 1) * in_len], h, w, &mut cols);
                    for (oc, row) in o.chunks_mut(ohw).enumerate() {
                        row.fill(c.bias[oc]);
                    }
                    matmul(
                        c.out_c,
                        ck2,
                        ohw,
                        &c.weight,
                        Layout::Plain,
                        &cols,
                        Layout::Plain,
                        o,
                        true,
                    );
                });
                out
            }
            Layer::LeakyRelu => {
                let a = T::of(LEAKY_SLOPE);
                let data = x
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * a })
                    .collect();
                Tensor::from_vec(os, data)
            }
            Layer::Tanh => Tensor::from_vec(os, x.data().iter().map(|v| v.tanh()).collect()),
            Layer::Upsample2 => {
                let mut out = Tensor::zeros(os);
                let (h, w) = (s[2], s[3]);
                let ow = os[3];
                let xd = x.data();
                for (p, plane) in out.data_mut().chunks_mut(4 * h * w).enumerate() {
                    let src = &xd[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            plane[y * ow + xx] = src[(y / 2) * w + xx / 2];
                        }
                    }
                }
                out
            }
            Layer::Reshape(_) => x.clone().reshaped(os),
            Layer::GlobalAvgPool => {
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let data = x
                    .data()
                    .chunks(hw)
                    .map(|plane| plane.iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::from_vec(os, data)
            }
            Layer::AvgPool2 => {
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let q = T::of(0.25);
                let mut out = Tensor::zeros(os);
                for (plane, src) in out.data_mut().chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
                    for y in 0..h {
                        for xx in 0..w {
                            plane[(y / 2) * ow + xx / 2] += src[y * w + xx] * q;
                        }
                    }
                }
                out
            }
            Layer::L2Normalize => {
                let mut out = x.clone();
                let l = x.sample_len();
                for row in out.data_mut().chunks_mut(l) {
                    let norm = (row.iter().map(|v| *v * *v).sum::<T>() + T::of(NORM_EPS)).sqrt();
                    for v in row.iter_mut() {
                        *v = *v / norm;
                    }
                }
                out
            }
        }
    }

    /// Gradient of the layer given its input `x`, output `y` and upstream `dy`.
    /// Parameter gradients are added into `pgrad` when supplied.
    fn backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
        pgrad: Option<(&mut [T], &mut [T])>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let s = x.shape();
        match self {
            Layer::Linear(l) => {
                let n = s[0];
                if let Some((gw, gb)) = pgrad {
                    matmul(
                        l.out_dim,
                        n,
                        l.in_dim,
                        dy.data(),
                        Layout::Transposed,
                        x.data(),
                        Layout::Plain,
                        gw,
                        true,
                    );
                    for row in dy.data().chunks(l.out_dim) {
                        for (g, d) in gb.iter_mut().zip(row) {
                            *g += *d;
                        }
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); n * l.in_dim];
                    matmul(
                        n,
                        l.out_dim,
                        l.in_dim,
                        dy.data(),
                        Layout::Plain,
                        &l.weight,
                        Layout::Plain,
                        &mut dx,
                        false,
                    );
                    Tensor::from_vec(s, dx)
                })
            }
            Layer::Conv(c) => conv_backward(c, x, dy, pgrad, need_dx),
            Layer::LeakyRelu => {
                let a = T::of(LEAKY_SLOPE);
                need_dx.then(|| {
                    let data = x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { g * a })
                        .collect();
                    Tensor::from_vec(s, data)
                })
            }
            Layer::Tanh => need_dx.then(|| {
                let data = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&o, &g)| g * (T::one() - o * o))
                    .collect();
                Tensor::from_vec(s, data)
            }),
            Layer::Upsample2 => need_dx.then(|| {
                let mut dx = Tensor::zeros(s);
                let (h, w) = (s[2], s[3]);
                let ow = 2 * w;
                let dd = dy.data();
                for (p, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &dd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for yy in 0..2 * h {
                        for xx in 0..ow {
                            plane[(yy / 2) * w + xx / 2] += src[yy * ow + xx];
                        }
                    }
                }
                dx
            }),
            Layer::Reshape(_) => need_dx.then(|| dy.clone().reshaped(s)),
            Layer::GlobalAvgPool => need_dx.then(|| {
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut data = Vec::with_capacity(x.data().len());
                for &g in dy.data() {
                    data.extend(std::iter::repeat_n(g * inv, hw));
                }
                Tensor::from_vec(s, data)
            }),
            Layer::AvgPool2 => need_dx.then(|| {
                let (h, w) = (s[2], s[3]);
                let ow = w / 2;
                let q = T::of(0.25);
                let mut dx = Tensor::zeros(s);
                for (plane, src) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks((h / 2) * ow)) {
                    for y in 0..h {
                        for xx in 0..w {
                            plane[y * w + xx] = src[(y / 2) * ow + xx / 2] * q;
                        }
                    }
                }
                dx
            }),
            Layer::L2Normalize => need_dx.then(|| {
                let l = x.sample_len();
                let mut dx = dy.clone();
                for i in 0..s[0] {
                    let xi = x.sample(i);
                    let yi = y.sample(i);
                    let norm = (xi.iter().map(|v| *v * *v).sum::<T>() + T::of(NORM_EPS)).sqrt();
                    let dot: T = yi.iter().zip(dy.sample(i)).map(|(a, b)| *a * *b).sum();
                    let row = &mut dx.data_mut()[i * l..(i + 1) * l];
                    for (d, yv) in row.iter_mut().zip(yi) {
                        *d = (*d - *yv * dot) / norm;
                    }
                }
                dx
            }),
        }
    }
}

type SampleGrads<T> = (Option<Vec<T>>, Option<(Vec<T>, Vec<T>)>);

fn conv_backward<T: Real>(
    c: &Conv2d<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    pgrad: Option<(&mut [T], &mut [T])>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = c.out_hw(h, w);
    let ohw = oh * ow;
    let ck2 = c.in_c * c.kernel * c.kernel;
    let want_params = pgrad.is_some();
    let per_sample: Vec<SampleGrads<T>> = par::map_range(s[0], |i| {
        let dyi = dy.sample(i);
        let mut cols = vec![T::zero(); ck2 * ohw];
        let pg = want_params.then(|| {
            c.im2col(x.sample(i), h, w, &mut cols);
            let mut gw = vec![T::zero(); c.weight.len()];
            matmul(
                c.out_c,
                ohw,
                ck2,
                dyi,
                Layout::Plain,
                &cols,
                Layout::Transposed,
                &mut gw,
                false,
            );
            let gb = dyi.chunks(ohw).map(|r| r.iter().copied().sum()).collect();
            (gw, gb)
        });
        let dx = need_dx.then(|| {
            matmul(
                ck2,
                c.out_c,
                ohw,
                &c.weight,
                Layout::Transposed,
                dyi,
                Layout::Plain,
                &mut cols,
                false,
            );
            let mut dx = vec![T::zero(); x.sample_len()];
            c.col2im(&cols, h, w, &mut dx);
            dx
        });
        (dx, pg)
    });
    let mut dx_all = need_dx.then(|| Vec::with_capacity(x.data().len()));
    let mut pgrad = pgrad;
    for (dx, pg) in per_sample {
        if let (Some(all), Some(d)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&d);
        }
        if let (Some((gw, gb)), Some((sw, sb))) = (pgrad.as_mut(), pg) {
            for (a, b) in gw.iter_mut().zip(&sw) {
                *a += *b;
            }
            for (a, b) in gb.iter_mut().zip(&sb) {
                *a += *b;
            }
        }
    }
    dx_all.map(|d| Tensor::from_vec(s, d))
}

/// Recorded activations of a traced forward pass; `acts[0]` is the input.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub acts: Vec<Tensor<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds at least the input")
    }
}

/// One gradient buffer per parameter array, in [`Sequential::param_shapes`] order.
pub type ParamGrads<T> = Vec<Vec<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur);
        }
        cur
    }

    pub fn forward_traced(&self, x: Tensor<T>) -> Trace<T> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for l in &self.layers {
            let next = l.forward(acts.last().unwrap());
            acts.push(next);
        }
        Trace { acts }
    }

    /// Backpropagates `seeds` (pairs of activation index and gradient; index
    /// `layers.len()` is the output). Returns the input gradient if `need_input`.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        seeds: Vec<(usize, Tensor<T>)>,
        mut grads: Option<&mut ParamGrads<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let n_layers = self.layers.len();
        assert_eq!(trace.acts.len(), n_layers + 1, "trace from another network");
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; n_layers + 1];
        for (idx, g) in seeds {
            assert_eq!(g.shape(), trace.acts[idx].shape(), "seed shape at act {idx}");
            match &mut pending[idx] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        let mut slot_of = Vec::with_capacity(n_layers);
        let mut slots = 0;
        for l in &self.layers {
            slot_of.push(slots);
            slots += l.param_count();
        }
        let mut cur: Option<Tensor<T>> = pending[n_layers].take();
        for i in (0..n_layers).rev() {
            let Some(dy) = cur.take() else {
                cur = pending[i].take();
                continue;
            };
            let layer = &self.layers[i];
            let pg = match (grads.as_deref_mut(), layer.param_count()) {
                (Some(g), 2) => {
                    let (a, b) = g[slot_of[i]..].split_at_mut(1);
                    Some((a[0].as_mut_slice(), b[0].as_mut_slice()))
                }
                _ => None,
            };
            let need_dx = i > 0 || need_input;
            let dx = layer.backward(&trace.acts[i], &trace.acts[i + 1], &dy, pg, need_dx);
            cur = match (dx, pending[i].take()) {
                (Some(mut d), Some(extra)) => {
                    d.add_assign(&extra);
                    Some(d)
                }
                (d, extra) => d.or(extra),
            };
        }
        if need_input {
            cur
        } else {
            None
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Linear(li) => {
                    out.push(vec![li.out_dim, li.in_dim]);
                    out.push(vec![li.out_dim]);
                }
                Layer::Conv(c) => {
                    out.push(vec![c.out_c, c.in_c, c.kernel, c.kernel]);
                    out.push(vec![c.out_c]);
                }
                _ => {}
            }
        }
        out
    }

    /// Parameter arrays named `layers.{i}.weight` / `layers.{i}.bias`.
    pub fn named_params(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = match l {
                Layer::Linear(li) => (&li.weight, &li.bias),
                Layer::Conv(c) => (&c.weight, &c.bias),
                _ => continue,
            };
            out.push((format!("layers.{i}.weight"), w.as_slice()));
            out.push((format!("layers.{i}.bias"), b.as_slice()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Linear(li) => {
                    out.push(&mut li.weight);
                    out.push(&mut li.bias);
                }
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        self.param_shapes()
            .iter()
            .map(|s| vec![T::zero(); s.iter().product()])
            .collect()
    }

    pub fn param_len(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        Sequential {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Linear(li) => Layer::Linear(Linear {
                        in_dim: li.in_dim,
                        out_dim: li.out_dim,
                        weight: cv(&li.weight),
                        bias: cv(&li.bias),
                    }),
                    Layer::Conv(c) => Layer::Conv(Conv2d {
                        in_c: c.in_c,
                        out_c: c.out_c,
                        kernel: c.kernel,
                        stride: c.stride,
                        pad: c.pad,
                        weight: cv(&c.weight),
                        bias: cv(&c.bias),
                    }),
                    Layer::LeakyRelu => Layer::LeakyRelu,
                    Layer::Tanh => Layer::Tanh,
                    Layer::Upsample2 => Layer::Upsample2,
                    Layer::Reshape(r) => Layer::Reshape(*r),
                    Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                    Layer::AvgPool2 => Layer::AvgPool2,
                    Layer::L2Normalize => Layer::L2Normalize,
                })
                .collect(),
        }
    }
}
