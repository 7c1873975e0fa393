//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every value produced through a [`GradTape`] is appended to the tape in
//! execution order, which is therefore a topological order of the
//! computation. [`GradTape::backward`] walks that order in reverse and
//! visits each record once; gradients of values used several times are
//! summed. Frozen parameters (weights, masks, targets) are captured by
//! shared reference and never receive gradients.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Record<T: Scalar> {
    Leaf,
    Constant,
    Conv2d {
        input: usize,
        weight: Arc<Tensor<T>>,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        input: usize,
        weight: Arc<Tensor<T>>,
        stride: usize,
        padding: Padding,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    Activation {
        input: usize,
        kind: Activation,
    },
    Affine {
        input: usize,
        scale: Arc<Vec<T>>,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Replicate {
        input: usize,
    },
    Resize {
        input: usize,
    },
    Clamp {
        input: usize,
        lo: T,
        hi: T,
    },
    Compose {
        inside: usize,
        outside: usize,
        mask: Arc<Vec<bool>>,
    },
    MaskedMean {
        input: usize,
        weights: Arc<Vec<T>>,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Abs {
        input: usize,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    record: Record<T>,
    requires_grad: bool,
}

/// Single-writer recording of differentiable operations.
pub struct GradTape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    leaves: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Result<&Tensor<T>> {
        if var.tape != self.tape || var.index >= self.leaves.len() || !self.leaves[var.index] {
            return Err(Error::Gradient(format!(
                "variable {} is not a marked leaf of this tape",
                var.index
            )));
        }
        self.grads[var.index]
            .as_ref()
            .ok_or_else(|| Error::Gradient("leaf received no gradient".into()))
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Gradient("variable belongs to another tape".into()));
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<T>, record: Record<T>, inputs: &[usize]) -> Var {
        let requires_grad = match record {
            Record::Leaf => true,
            Record::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            record,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Registers a tensor; it becomes a gradient leaf when
    /// [`Tensor::requires_grad`] is set.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        if tensor.requires_grad() {
            self.push(tensor, Record::Leaf, &[])
        } else {
            self.push(tensor, Record::Constant, &[])
        }
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Record::Leaf, &[])
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Record::Constant, &[])
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(var)?].value)
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.nodes[self.index(var)?].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: &Arc<Tensor<T>>,
        bias: Option<&[T]>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::conv2d(&self.nodes[i].value, weight, bias, stride, padding)?;
        let record = Record::Conv2d {
            input: i,
            weight: Arc::clone(weight),
            stride,
            padding,
        };
        Ok(self.push(value, record, &[i]))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: &Arc<Tensor<T>>,
        bias: Option<&[T]>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::conv_transpose2d(&self.nodes[i].value, weight, bias, stride, padding)?;
        let record = Record::ConvTranspose2d {
            input: i,
            weight: Arc::clone(weight),
            stride,
            padding,
        };
        Ok(self.push(value, record, &[i]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::upsample_nearest(&self.nodes[i].value, factor)?;
        Ok(self.push(value, Record::Upsample { input: i, factor }, &[i]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::activation(&self.nodes[i].value, kind)?;
        Ok(self.push(value, Record::Activation { input: i, kind }, &[i]))
    }

    pub fn affine_channel(&mut self, x: Var, scale: &Arc<Vec<T>>, shift: &[T]) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::affine_channel(&self.nodes[i].value, scale, shift)?;
        let record = Record::Affine {
            input: i,
            scale: Arc::clone(scale),
        };
        Ok(self.push(value, record, &[i]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = ops::concat_channels(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(value, Record::Concat { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn replicate_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::replicate_spatial(&self.nodes[i].value, h, w)?;
        Ok(self.push(value, Record::Replicate { input: i }, &[i]))
    }

    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::resize_nearest(&self.nodes[i].value, h, w)?;
        Ok(self.push(value, Record::Resize { input: i }, &[i]))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::clamp(&self.nodes[i].value, lo, hi);
        Ok(self.push(value, Record::Clamp { input: i, lo, hi }, &[i]))
    }

    /// Builds a `1×C×H×W` activation map holding `inside` where `mask` is set
    /// and `outside` elsewhere. Both operands are length-`C` vectors.
    pub fn compose_masked(
        &mut self,
        inside: Var,
        outside: Var,
        mask: &Arc<Vec<bool>>,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        const OP: &str = "compose_masked";
        let (ii, io) = (self.index(inside)?, self.index(outside)?);
        let (a, b) = (&self.nodes[ii].value, &self.nodes[io].value);
        if a.rank() != 1 || a.shape() != b.shape() {
            return Err(Error::shape(
                OP,
                format!("expected two equal-length vectors, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        if mask.len() != h * w {
            return Err(Error::shape(OP, format!("mask has {} cells for {h}x{w}", mask.len())));
        }
        let c = a.numel();
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let (vin, vout) = (a.data()[ch], b.data()[ch]);
            data.extend(mask.iter().map(|&m| if m { vin } else { vout }));
        }
        let value = Tensor::from_parts(vec![1, c, h, w], data);
        let record = Record::Compose {
            inside: ii,
            outside: io,
            mask: Arc::clone(mask),
        };
        Ok(self.push(value, record, &[ii, io]))
    }

    /// Weighted spatial mean of a `1×C×H×W` tensor, producing a length-`C` vector.
    pub fn masked_mean(&mut self, x: Var, weights: &Arc<Vec<T>>) -> Result<Var> {
        let i = self.index(x)?;
        let v = ops::masked_channel_mean(&self.nodes[i].value, weights)?;
        let value = Tensor::from_parts(vec![v.len()], v);
        let record = Record::MaskedMean {
            input: i,
            weights: Arc::clone(weights),
        };
        Ok(self.push(value, record, &[i]))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        if self.nodes[ia].value.shape() != self.nodes[ib].value.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[ia].value.shape(),
                    self.nodes[ib].value.shape()
                ),
            ));
        }
        Ok((ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "sub")?;
        let data = zip_with(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x - y);
        let value = Tensor::from_parts(self.nodes[ia].value.shape().to_vec(), data).ensure_finite("sub")?;
        Ok(self.push(value, Record::Sub { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "mul")?;
        let data = zip_with(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x * y);
        let value = Tensor::from_parts(self.nodes[ia].value.shape().to_vec(), data).ensure_finite("mul")?;
        Ok(self.push(value, Record::Mul { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let value = self.nodes[i].value.map(|v| v.abs());
        Ok(self.push(value, Record::Abs { input: i }, &[i]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let s: T = self.nodes[i].value.data().iter().copied().sum();
        let value = Tensor::scalar(s)?;
        Ok(self.push(value, Record::Sum { input: i }, &[i]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let n = self.nodes[i].value.numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s: T = self.nodes[i].value.data().iter().copied().sum();
        let value = Tensor::scalar(s / T::from_usize(n).unwrap_or_else(T::one))?;
        Ok(self.push(value, Record::Mean { input: i }, &[i]))
    }

    /// Mean absolute deviation between `x` and `target`.
    pub fn l1_loss(&mut self, x: Var, target: Var) -> Result<Var> {
        let d = self.sub(x, target)?;
        let a = self.abs(d)?;
        self.mean(a)
    }

    /// Propagates d(loss)/d(value) back to every marked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let leaves: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| matches!(n.record, Record::Leaf))
            .collect();
        if !leaves.iter().any(|&l| l) {
            return Err(Error::Gradient("no marked leaves on tape".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));

        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.record, Record::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (target, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                accumulate(&mut grads[target], contribution);
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Gradient(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            leaves,
        })
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        Ok(match &node.record {
            Record::Leaf | Record::Constant => Vec::new(),
            Record::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (_, _, h, w) = val(*input).dims4("conv2d")?;
                vec![(*input, ops::conv2d_input_grad(g, weight, *stride, *padding, h, w)?)]
            }
            Record::ConvTranspose2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let (_, _, h, w) = val(*input).dims4("conv_transpose2d")?;
                vec![(
                    *input,
                    ops::conv_transpose2d_input_grad(g, weight, *stride, *padding, h, w)?,
                )]
            }
            Record::Upsample { input, factor } => {
                vec![(*input, ops::upsample_nearest_backward(g, *factor)?)]
            }
            Record::Activation { input, kind } => {
                vec![(*input, ops::activation_backward(val(*input), &node.value, g, *kind))]
            }
            Record::Affine { input, scale } => {
                vec![(*input, ops::affine_channel_backward(g, scale)?)]
            }
            Record::Concat { a, b } => {
                let (_, ca, _, _) = val(*a).dims4("concat_channels")?;
                let (ga, gb) = ops::split_channels(g, ca)?;
                vec![(*a, ga), (*b, gb)]
            }
            Record::Replicate { input } => {
                let summed = ops::spatial_sum(g)?;
                vec![(*input, summed.reshape(val(*input).shape())?)]
            }
            Record::Resize { input } => {
                let (_, _, h, w) = val(*input).dims4("resize_nearest")?;
                vec![(*input, ops::resize_nearest_backward(g, h, w)?)]
            }
            Record::Clamp { input, lo, hi } => {
                let x = val(*input);
                let data = zip_with(x, g, |xv, gv| if xv >= *lo && xv <= *hi { gv } else { T::zero() });
                vec![(*input, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Record::Compose {
                inside,
                outside,
                mask,
            } => {
                let c = val(*inside).numel();
                let hw = mask.len();
                let mut gi = vec![T::zero(); c];
                let mut go = vec![T::zero(); c];
                for ch in 0..c {
                    for (&m, &gv) in mask.iter().zip(&g.data()[ch * hw..(ch + 1) * hw]) {
                        if m {
                            gi[ch] = gi[ch] + gv;
                        } else {
                            go[ch] = go[ch] + gv;
                        }
                    }
                }
                vec![
                    (*inside, Tensor::from_parts(vec![c], gi)),
                    (*outside, Tensor::from_parts(vec![c], go)),
                ]
            }
            Record::MaskedMean { input, weights } => {
                let x = val(*input);
                let total: T = weights.iter().copied().sum();
                let mut data = Vec::with_capacity(x.numel());
                for &gc in g.data() {
                    data.extend(weights.iter().map(|&m| gc * m / total));
                }
                vec![(*input, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Record::Sub { a, b } => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Record::Mul { a, b } => {
                let ga = zip_with(g, val(*b), |gv, bv| gv * bv);
                let gb = zip_with(g, val(*a), |gv, av| gv * av);
                vec![
                    (*a, Tensor::from_parts(g.shape().to_vec(), ga)),
                    (*b, Tensor::from_parts(g.shape().to_vec(), gb)),
                ]
            }
            Record::Abs { input } => {
                // Subgradient 0 at the kink.
                let x = val(*input);
                let data = zip_with(x, g, |xv, gv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                vec![(*input, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Record::Sum { input } => {
                let x = val(*input);
                vec![(*input, Tensor::full(x.shape(), g.data()[0]))]
            }
            Record::Mean { input } => {
                let x = val(*input);
                let n = T::from_usize(x.numel()).unwrap_or_else(T::one);
                vec![(*input, Tensor::full(x.shape(), g.data()[0] / n))]
            }
        })
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        None => *slot = Some(contribution),
        Some(existing) => {
            let data = zip_with(existing, &contribution, |a, b| a + b);
            *slot = Some(Tensor::from_parts(existing.shape().to_vec(), data));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn l1_gradient_is_sign_with_zero_at_ties() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[3.0, -1.0, 2.0]).unwrap());
        let y = tape.constant(Tensor::from_f64(&[3], &[1.0, 0.0, 2.0]).unwrap());
        let d = tape.sub(x, y).unwrap();
        let a = tape.abs(d).unwrap();
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1], &[3.0]).unwrap());
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let t = tape.mul(s1, s2).unwrap();
        let grads = tape.backward(t).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.leaf(Tensor::from_f32(&[2], &[1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Gradient(_))));
    }

    #[test]
    fn no_leaves_rejected() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.constant(Tensor::from_f32(&[1], &[1.0]).unwrap());
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Gradient(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut a = GradTape::<f32>::new();
        let mut b = GradTape::<f32>::new();
        let xa = a.leaf(Tensor::from_f32(&[1], &[1.0]).unwrap());
        let xb = b.leaf(Tensor::from_f32(&[1], &[1.0]).unwrap());
        let s = a.sum(xa).unwrap();
        let grads = a.backward(s).unwrap();
        assert!(grads.get(xb).is_err());
        assert!(a.sum(xb).is_err());
    }

    #[test]
    fn non_leaf_lookup_rejected() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.leaf(Tensor::from_f32(&[1], &[1.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(s).is_err());
    }

    #[test]
    fn input_honors_requires_grad_flag() {
        let mut tape = GradTape::<f32>::new();
        let x = tape.input(Tensor::from_f32(&[1], &[1.0]).unwrap().with_grad());
        let c = tape.input(Tensor::from_f32(&[1], &[1.0]).unwrap());
        assert!(tape.requires_grad(x).unwrap());
        assert!(!tape.requires_grad(c).unwrap());
    }
}
