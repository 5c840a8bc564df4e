//! A small U-Net with hand-written forward and backward passes.
//!
//! Activations are `channels x height x width`, channel-major. Each encoder
//! level is two 3x3 conv+ReLU blocks followed by 2x2 max pooling; each decoder
//! level upsamples (nearest), applies a 3x3 conv+ReLU, concatenates the skip
//! and applies two more conv+ReLU blocks. A 1x1 conv produces the logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            d: vec![0.0; c * h * w],
        }
    }

    fn plane(&self, c: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.d[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

/// Output range `lo..hi` for which `i + off` stays inside `0..n`.
#[inline]
fn valid(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

impl Conv {
    fn new(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            cin,
            cout,
            k,
            w: (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect(),
            b: vec![0.0; cout],
        }
    }

    fn forward(&self, x: &Act) -> Act {
        debug_assert_eq!(x.c, self.cin);
        let (h, w, k) = (x.h, x.w, self.k);
        let hw = h * w;
        let p = (k / 2) as isize;
        let mut out = Act::zeros(self.cout, h, w);
        for co in 0..self.cout {
            let o = &mut out.d[co * hw..(co + 1) * hw];
            o.fill(self.b[co]);
            for ci in 0..self.cin {
                let inp = x.plane(ci);
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = valid(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = valid(w, dx);
                        let wv = self.w[((co * self.cin + ci) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let irow = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (a, b) in orow.iter_mut().zip(irow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(&self, x: &Act, gy: &Act, gw: &mut [f32], gb: &mut [f32]) -> Act {
        let (h, w, k) = (x.h, x.w, self.k);
        let hw = h * w;
        let p = (k / 2) as isize;
        let mut gx = Act::zeros(self.cin, h, w);
        for co in 0..self.cout {
            let g = gy.plane(co);
            gb[co] += g.iter().sum::<f32>();
            for ci in 0..self.cin {
                let inp = x.plane(ci);
                let gxi = &mut gx.d[ci * hw..(ci + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = valid(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = valid(w, dx);
                        let widx = ((co * self.cin + ci) * k + ky) * k + kx;
                        let wv = self.w[widx];
                        let mut acc = 0.0f32;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let irow = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            let xrow = &mut gxi[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for ((gv, iv), xv) in grow.iter().zip(irow).zip(xrow.iter_mut()) {
                                acc += gv * iv;
                                *xv += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        gx
    }
}

fn relu_inplace(a: &mut Act) {
    a.d.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_backward(out: &Act, g: &mut Act) {
    for (gv, &o) in g.d.iter_mut().zip(&out.d) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
}

fn maxpool(x: &Act) -> (Act, Vec<u32>) {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, h, w);
    let mut idx = vec![0u32; x.c * h * w];
    for c in 0..x.c {
        let inp = x.plane(c);
        for y in 0..h {
            for xx in 0..w {
                let mut best = (f32::NEG_INFINITY, 0usize);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy) * x.w + 2 * xx + dx;
                    if inp[i] > best.0 {
                        best = (inp[i], i);
                    }
                }
                let o = c * h * w + y * w + xx;
                out.d[o] = best.0;
                idx[o] = best.1 as u32;
            }
        }
    }
    (out, idx)
}

fn maxpool_backward(g: &Act, idx: &[u32], h: usize, w: usize) -> Act {
    let mut gx = Act::zeros(g.c, h, w);
    let n = g.h * g.w;
    for c in 0..g.c {
        for i in 0..n {
            gx.d[c * h * w + idx[c * n + i] as usize] += g.d[c * n + i];
        }
    }
    gx
}

fn upsample2(x: &Act) -> Act {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.d[c * h * w + y * w + xx] = x.d[c * x.h * x.w + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

fn upsample2_backward(g: &Act) -> Act {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut gx = Act::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..g.h {
            for x in 0..g.w {
                gx.d[c * h * w + (y / 2) * w + x / 2] += g.d[c * g.h * g.w + y * g.w + x];
            }
        }
    }
    gx
}

fn concat(a: &Act, b: &Act) -> Act {
    let mut d = Vec::with_capacity(a.d.len() + b.d.len());
    d.extend_from_slice(&a.d);
    d.extend_from_slice(&b.d);
    Act {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        d,
    }
}

fn split(g: &Act, first: usize) -> (Act, Act) {
    let n = first * g.h * g.w;
    (
        Act {
            c: first,
            h: g.h,
            w: g.w,
            d: g.d[..n].to_vec(),
        },
        Act {
            c: g.c - first,
            h: g.h,
            w: g.w,
            d: g.d[n..].to_vec(),
        },
    )
}

/// Per-conv gradients, in the same order as the network's convolutions.
pub(crate) type Grads = Vec<(Vec<f32>, Vec<f32>)>;

pub(crate) struct Cache {
    inputs: Vec<Act>,
    outputs: Vec<Act>,
    pools: Vec<(Vec<u32>, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Network {
    pub levels: usize,
    pub base: usize,
    pub convs: Vec<Conv>,
}

impl Network {
    pub fn new(levels: usize, base: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = |i: usize| base << i;
        let mut convs = Vec::new();
        for i in 0..levels {
            let cin = if i == 0 { 3 } else { ch(i - 1) };
            convs.push(Conv::new(cin, ch(i), 3, &mut rng));
            convs.push(Conv::new(ch(i), ch(i), 3, &mut rng));
        }
        for i in (0..levels - 1).rev() {
            convs.push(Conv::new(ch(i + 1), ch(i), 3, &mut rng));
            convs.push(Conv::new(2 * ch(i), ch(i), 3, &mut rng));
            convs.push(Conv::new(ch(i), ch(i), 3, &mut rng));
        }
        convs.push(Conv::new(base, 1, 1, &mut rng));
        Self { levels, base, convs }
    }

    pub fn zero_grads(&self) -> Grads {
        self.convs
            .iter()
            .map(|c| (vec![0.0; c.w.len()], vec![0.0; c.b.len()]))
            .collect()
    }

    fn conv_relu(&self, k: usize, x: Act, cache: Option<&mut Cache>) -> Act {
        let mut y = self.convs[k].forward(&x);
        relu_inplace(&mut y);
        if let Some(c) = cache {
            c.inputs[k] = x;
            c.outputs[k] = y.clone();
        }
        y
    }

    fn run(&self, input: Act, mut cache: Option<&mut Cache>) -> Act {
        let l = self.levels;
        let mut x = input;
        let mut skips = Vec::with_capacity(l);
        let mut k = 0;
        for i in 0..l {
            if i > 0 {
                let (h, w) = (x.h, x.w);
                let (p, idx) = maxpool(&x);
                if let Some(c) = cache.as_deref_mut() {
                    c.pools.push((idx, h, w));
                }
                x = p;
            }
            x = self.conv_relu(k, x, cache.as_deref_mut());
            x = self.conv_relu(k + 1, x, cache.as_deref_mut());
            k += 2;
            if i + 1 < l {
                skips.push(x.clone());
            }
        }
        for i in (0..l - 1).rev() {
            let u = self.conv_relu(k, upsample2(&x), cache.as_deref_mut());
            let cat = concat(&skips[i], &u);
            x = self.conv_relu(k + 1, cat, cache.as_deref_mut());
            x = self.conv_relu(k + 2, x, cache.as_deref_mut());
            k += 3;
        }
        let logits = self.convs[k].forward(&x);
        if let Some(c) = cache {
            c.inputs[k] = x;
        }
        logits
    }

    pub fn forward(&self, input: Act) -> Act {
        self.run(input, None)
    }

    pub fn forward_train(&self, input: Act) -> (Act, Cache) {
        let n = self.convs.len();
        let mut cache = Cache {
            inputs: vec![Act::zeros(0, 0, 0); n],
            outputs: vec![Act::zeros(0, 0, 0); n],
            pools: Vec::new(),
        };
        let logits = self.run(input, Some(&mut cache));
        (logits, cache)
    }

    pub fn backward(&self, cache: &Cache, g_logits: &Act, grads: &mut Grads) {
        let l = self.levels;
        let mut k = self.convs.len() - 1;
        let (gw, gb) = &mut grads[k];
        let mut g = self.convs[k].backward(&cache.inputs[k], g_logits, gw, gb);

        let conv_relu_back = |k: usize, mut g: Act, grads: &mut Grads| {
            relu_backward(&cache.outputs[k], &mut g);
            let (gw, gb) = &mut grads[k];
            self.convs[k].backward(&cache.inputs[k], &g, gw, gb)
        };

        let mut skip_grads: Vec<Option<Act>> = vec![None; l];
        for i in 0..l - 1 {
            k -= 3;
            g = conv_relu_back(k + 2, g, grads);
            let g_cat = conv_relu_back(k + 1, g, grads);
            let (g_skip, g_u) = split(&g_cat, self.base << i);
            skip_grads[i] = Some(g_skip);
            let g_up = conv_relu_back(k, g_u, grads);
            g = upsample2_backward(&g_up);
        }
        for i in (0..l).rev() {
            if let Some(sg) = skip_grads[i].take() {
                for (a, b) in g.d.iter_mut().zip(&sg.d) {
                    *a += b;
                }
            }
            g = conv_relu_back(2 * i + 1, g, grads);
            g = conv_relu_back(2 * i, g, grads);
            if i > 0 {
                let (idx, h, w) = &cache.pools[i - 1];
                g = maxpool_backward(&g, idx, *h, *w);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(|c| c.w.len() + c.b.len()).sum()
    }
}

pub(crate) struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &Network, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.zero_grads(),
            v: net.zero_grads(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for (((conv, (gw, gb)), (mw, mb)), (vw, vb)) in net
            .convs
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            update(&mut conv.w, gw, mw, vw);
            update(&mut conv.b, gb, mb, vb);
        }
    }
}
