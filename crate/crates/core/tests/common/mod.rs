//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sadi_core::{Module, Tensor};

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct six-loop dilated convolution with zero padding.
pub fn conv_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize, dil: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for b in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let r = (i * stride + u * dil) as isize - pad as isize;
                                let q = (j * stride + v * dil) as isize - pad as isize;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    acc += x.get(&[b, c, r as usize, q as usize]) * w.get(&[o, c, u, v]);
                                }
                            }
                        }
                    }
                    out.set(&[b, o, i, j], acc);
                }
            }
        }
    }
    out
}

/// Adds a per-channel bias to `[N, C, H, W]`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let c = x.shape()[1];
    let plane = x.shape()[2] * x.shape()[3];
    Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[(i / plane) % c])
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

/// Sets every parameter whose name contains `part` to `value`.
pub fn fill_params<M: Module>(m: &mut M, part: &str, value: f64) {
    m.visit_mut(&mut |p| {
        if p.name.contains(part) {
            p.value.data_mut().fill(value);
        }
    });
}

/// Overwrites every parameter with uniform draws in `[-scale, scale]`.
pub fn randomize<M: Module>(m: &mut M, rng: &mut ChaCha8Rng, scale: f64) {
    m.visit_mut(&mut |p| {
        for v in p.value.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    });
}

fn conv_layer(x: &Tensor, c: &sadi_core::nn::Conv2d) -> Tensor {
    let y = conv_reference(x, &c.weight.value, c.stride, c.padding, c.dilation);
    match &c.bias {
        Some(b) => add_bias(&y, &b.value),
        None => y,
    }
}

/// `relu(conv2(relu(conv1 x)) + shortcut(x))` from loops.
pub fn basic_block_reference(x: &Tensor, p: &sadi_core::nn::BasicBlockParams) -> Tensor {
    let h = relu(&conv_layer(x, &p.conv1));
    let main = conv_layer(&h, &p.conv2);
    let short = match &p.projection {
        Some(q) => conv_layer(x, q),
        None => x.clone(),
    };
    relu(&add(&main, &short))
}

pub fn unit_reference(x: &Tensor, u: &sadi_core::nn::Unit) -> Tensor {
    match u {
        sadi_core::nn::Unit::Basic(p) => basic_block_reference(x, p),
        sadi_core::nn::Unit::Dilated(_) => panic!("reference covers basic units only"),
    }
}

pub fn conv_layer_reference(x: &Tensor, c: &sadi_core::nn::Conv2d) -> Tensor {
    conv_layer(x, c)
}

/// 2x2 max pooling with stride 2.
pub fn maxpool_reference(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(&[s[0], s[1], s[2] / 2, s[3] / 2]);
    for b in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] / 2 {
                for j in 0..s[3] / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        m = m.max(x.get(&[b, c, 2 * i + di, 2 * j + dj]));
                    }
                    out.set(&[b, c, i, j], m);
                }
            }
        }
    }
    out
}

pub fn upsample_reference(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(&[s[0], s[1], s[2] * f, s[3] * f]);
    for b in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] * f {
                for j in 0..s[3] * f {
                    out.set(&[b, c, i, j], x.get(&[b, c, i / f, j / f]));
                }
            }
        }
    }
    out
}
