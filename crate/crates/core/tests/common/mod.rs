//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use actpaint_core::autodiff::{GradTape, Var};
use actpaint_core::ops::{Padding, PaddingMode};
use actpaint_core::rng::SplitMix64;
use actpaint_core::{ModelBundle, Result, Tensor};

pub fn fixture_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture(name: &str) -> ModelBundle {
    ModelBundle::load(fixture_dir(name)).expect("fixture loads")
}

/// Uniform values in `[-scale, scale)`.
pub fn uniform(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

fn padded_index(i: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    if (0..n as isize).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PaddingMode::Zeros => None,
        PaddingMode::Circular => Some(i.rem_euclid(n as isize) as usize),
    }
}

/// Direct seven-loop cross-correlation.
pub fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: Padding) -> Tensor<f64> {
    let [n, cin, h, wd]: [usize; 4] = x.shape().try_into().unwrap();
    let [cout, _, kh, kw]: [usize; 4] = w.shape().try_into().unwrap();
    let p = pad.width;
    let ho = (h + 2 * p - kh) / stride + 1;
    let wo = (wd + 2 * p - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b_ in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - p as isize;
                                let ix = (ox * stride + kx) as isize - p as isize;
                                let (Some(iy), Some(ix)) = (padded_index(iy, h, pad.mode), padded_index(ix, wd, pad.mode))
                                else {
                                    continue;
                                };
                                acc += x.at(b_, i, iy, ix) * w.at(o, i, ky, kx);
                            }
                        }
                    }
                    out[((b_ * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

/// Transposed convolution with zero padding via zero insertion: dilate the
/// input by the stride, pad by `k - 1 - p` and correlate with the flipped,
/// channel-swapped kernel.
pub fn conv_transpose2d_zero_insertion(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, p: usize) -> Tensor<f64> {
    let [n, cin, h, wd]: [usize; 4] = x.shape().try_into().unwrap();
    let [_, cout, kh, kw]: [usize; 4] = w.shape().try_into().unwrap();
    assert!(p < kh && p < kw);
    let (hd, wdd) = ((h - 1) * stride + 1, (wd - 1) * stride + 1);
    let (py, px) = (kh - 1 - p, kw - 1 - p);
    let (hp, wp) = (hd + 2 * py, wdd + 2 * px);
    let mut dil = vec![0.0; n * cin * hp * wp];
    for b in 0..n {
        for c in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    dil[((b * cin + c) * hp + py + y * stride) * wp + px + xx * stride] = x.at(b, c, y, xx);
                }
            }
        }
    }
    let dil = Tensor::new(&[n, cin, hp, wp], dil).unwrap();
    let mut flipped = vec![0.0; cout * cin * kh * kw];
    for i in 0..cin {
        for o in 0..cout {
            for ky in 0..kh {
                for kx in 0..kw {
                    flipped[((o * cin + i) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] = w.at(i, o, ky, kx);
                }
            }
        }
    }
    let flipped = Tensor::new(&[cout, cin, kh, kw], flipped).unwrap();
    conv2d_oracle(&dil, &flipped, None, 1, Padding::NONE)
}

/// Transposed convolution with circular padding as a modular scatter.
pub fn conv_transpose2d_circular_scatter(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, p: usize) -> Tensor<f64> {
    let [n, cin, h, wd]: [usize; 4] = x.shape().try_into().unwrap();
    let [_, cout, kh, kw]: [usize; 4] = w.shape().try_into().unwrap();
    let ho = (h - 1) * stride + kh - 2 * p;
    let wo = (wd - 1) * stride + kw - 2 * p;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for i in 0..cin {
            for o in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = ((y * stride + ky) as isize - p as isize).rem_euclid(ho as isize) as usize;
                                let ox = ((xx * stride + kx) as isize - p as isize).rem_euclid(wo as isize) as usize;
                                out[((b * cout + o) * ho + oy) * wo + ox] += x.at(b, i, y, xx) * w.at(i, o, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

/// Per-channel weighted mean written as a plain double loop.
pub fn masked_mean_oracle(act: &[f64], c: usize, h: usize, w: usize, mask: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            total += mask[y * w + x];
        }
    }
    for (ch, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += act[(ch * h + y) * w + x] * mask[y * w + x];
            }
        }
        *o = acc / total;
    }
    out
}

pub fn cosine_oracle(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Outcome of a central finite-difference comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub coords: usize,
    /// Coordinates with relative error below the threshold.
    pub within: usize,
    pub max_abs: f64,
    pub max_rel: f64,
}

impl GradCheck {
    pub const REL_TOL: f64 = 1e-4;
    pub const ABS_TOL: f64 = 1e-2;
    pub const MIN_FRACTION: f64 = 0.95;

    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-6);
        self.coords += 1;
        if rel < Self::REL_TOL {
            self.within += 1;
        }
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.coords += other.coords;
        self.within += other.within;
        self.max_abs = self.max_abs.max(other.max_abs);
        self.max_rel = self.max_rel.max(other.max_rel);
    }

    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.coords.max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.coords > 0 && self.fraction() >= Self::MIN_FRACTION && self.max_abs < Self::ABS_TOL
    }
}

pub const FD_STEP: f64 = 1e-3;

/// Checks the tape gradient of `sum(f(inputs) ⊙ r)` for a fixed random
/// projection `r` against central differences on every input coordinate.
pub fn fd_check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let projection = std::cell::RefCell::new(None::<Tensor<f64>>);
    let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.value(out)?.shape().to_vec();
        let r = projection
            .borrow_mut()
            .get_or_insert_with(|| uniform(&mut SplitMix64::new(seed ^ 0x5eed), &shape, 1.0))
            .clone();
        let r = tape.constant(r);
        let prod = tape.mul(out, r)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss)?.item()?;
        let g = if grads {
            let g = tape.backward(loss)?;
            vars.iter().map(|&v| g.get(v).cloned()).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok((value, g))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut check = GradCheck::default();
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let shifted = |delta: f64| {
                let mut xs = inputs.to_vec();
                let mut data = xs[k].data().to_vec();
                data[i] += delta;
                xs[k] = Tensor::new(x.shape(), data).unwrap();
                eval(&xs, false).map(|(v, _)| v)
            };
            let numeric = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
            check.record(analytic[k].data()[i], numeric);
        }
    }
    Ok(check)
}
