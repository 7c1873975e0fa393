use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradTape, Var};
use crate::bundle::{Hook, NodeValues};
use crate::error::{Error, Result};
use crate::intervention::{ActivationVector, GridSpec, Provenance};
use crate::ops::cosine_similarity;
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{stream, Pipeline};

/// How the LayerY target vector is obtained from a generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureTarget {
    /// Spatial mean of LayerY for the image of `seed`.
    SpatialMean { seed: u64 },
    /// One random LayerY pixel of the image of `seed`.
    RandomPixel { seed: u64 },
    Explicit { values: Vec<f64> },
}

impl FeatureTarget {
    pub fn resolve<T: Scalar>(&self, pipe: &Pipeline<'_, T>) -> Result<Vec<f64>> {
        let to_f64 = |v: Vec<T>| v.into_iter().map(|x| x.to_f64_lossy()).collect();
        match self {
            Self::SpatialMean { seed } => {
                let (image, _) = pipe.generator.forward_seed(*seed, &[])?;
                Ok(to_f64(pipe.pooled_features(&image)?))
            }
            Self::RandomPixel { seed } => {
                let (image, _) = pipe.generator.forward_seed(*seed, &[])?;
                let act = pipe.features(&image)?;
                let mut rng = SplitMix64::new(derive_seed(*seed, stream::TARGET));
                let (x, y) = (rng.below(pipe.layer_y.width), rng.below(pipe.layer_y.height));
                Ok(to_f64(act.pixel(0, y, x)?))
            }
            Self::Explicit { values } => Ok(values.clone()),
        }
    }
}

/// Parameters of one two-vector inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSpec {
    /// Target vector at LayerY.
    pub target: Vec<f64>,
    pub grid_size: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Seeds the baseline image and the initial vectors.
    pub seed: u64,
    /// Starting `(v1, v2)`; random extracted pixels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<(Vec<f64>, Vec<f64>)>,
}

impl InversionSpec {
    pub const DEFAULT_STEPS: usize = 512;
    pub const DEFAULT_STEP_SIZE: f64 = 0.05;

    pub fn new(target: Vec<f64>, grid_size: usize, seed: u64) -> Self {
        Self {
            target,
            grid_size,
            steps: Self::DEFAULT_STEPS,
            step_size: Self::DEFAULT_STEP_SIZE,
            seed,
            init: None,
        }
    }

    fn validate<T: Scalar>(&self, pipe: &Pipeline<'_, T>) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Precondition("inversion needs at least one step".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Precondition(format!("step size {} must be positive", self.step_size)));
        }
        if self.target.len() != pipe.layer_y.channels {
            return Err(Error::shape(
                "invert",
                format!(
                    "target has {} channels, `{}` has {}",
                    self.target.len(),
                    pipe.layer_y.name,
                    pipe.layer_y.channels
                ),
            ));
        }
        if self.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "invert" });
        }
        if let Some((a, b)) = &self.init {
            if a.len() != pipe.layer_x.channels || b.len() != pipe.layer_x.channels {
                return Err(Error::shape(
                    "invert",
                    format!("init vectors must have {} channels", pipe.layer_x.channels),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    /// Best iterate; `v2` is unused for grid size 0.
    pub v1: ActivationVector,
    pub v2: ActivationVector,
    pub best_loss: f64,
    pub best_step: usize,
    /// Loss of every iterate, including the initial one.
    pub loss_curve: Vec<f64>,
    pub reconstruction_cosine: f64,
    /// Cosine at the initial vectors.
    pub initial_cosine: f64,
}

struct Evaluation<T: Scalar> {
    loss: f64,
    pooled: Vec<T>,
    grads: Option<(Tensor<T>, Tensor<T>)>,
}

/// Loss context shared by every step of one inversion.
pub struct InversionObjective<'p, 'a, T: Scalar> {
    pipe: &'p Pipeline<'a, T>,
    baseline: NodeValues<T>,
    mask: Arc<Vec<bool>>,
    pool: Arc<Vec<T>>,
    target: Tensor<T>,
}

impl<'p, 'a, T: Scalar> InversionObjective<'p, 'a, T> {
    pub fn new(pipe: &'p Pipeline<'a, T>, grid: GridSpec, seed: u64, target: &[f64]) -> Result<Self> {
        let inputs = pipe.generator.inputs_for_seed(seed)?;
        let (baseline, _) = pipe.generator.run_nodes(&inputs, &[], None)?;
        let (lx, ly) = (&pipe.layer_x, &pipe.layer_y);
        Ok(Self {
            pipe,
            baseline,
            mask: Arc::new(grid.mask(lx.height, lx.width)),
            pool: Arc::new(vec![T::one(); ly.height * ly.width]),
            target: Tensor::from_f64(&[target.len()], target)?,
        })
    }

    /// Builds the taped loss for `(v1, v2)`; returns the tape, both leaves,
    /// the pooled features and the loss variable.
    fn build(&self, v1: &[T], v2: &[T]) -> Result<(GradTape<T>, Var, Var, Var, Var)> {
        let pipe = self.pipe;
        let (lx, ly) = (&pipe.layer_x, &pipe.layer_y);
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::vector(v1.to_vec())?);
        let b = tape.leaf(Tensor::vector(v2.to_vec())?);
        let act = tape.compose_masked(a, b, &self.mask, lx.height, lx.width)?;
        let image = pipe.generator.forward_from_layer_taped(&mut tape, &self.baseline, lx, act)?;
        let (h, w) = pipe.extractor_extent();
        let shape = tape.value(image)?.shape().to_vec();
        let image = if shape[2..] == [h, w] {
            image
        } else {
            tape.resize_nearest(image, h, w)?
        };
        let feats = pipe.extractor.features_taped(&mut tape, image, ly)?;
        let pooled = tape.masked_mean(feats, &self.pool)?;
        let target = tape.constant(self.target.clone());
        let loss = tape.l1_loss(pooled, target)?;
        Ok((tape, a, b, pooled, loss))
    }

    fn evaluate(&self, v1: &[T], v2: &[T], with_grad: bool) -> Result<Evaluation<T>> {
        let (tape, a, b, pooled, loss) = self.build(v1, v2)?;
        let loss_value = tape.value(loss)?.item()?.to_f64_lossy();
        let pooled = tape.value(pooled)?.data().to_vec();
        let grads = if with_grad {
            let g = tape.backward(loss)?;
            Some((g.get(a)?.clone(), g.get(b)?.clone()))
        } else {
            None
        };
        Ok(Evaluation {
            loss: loss_value,
            pooled,
            grads,
        })
    }

    /// Loss value only.
    pub fn loss(&self, v1: &[T], v2: &[T]) -> Result<f64> {
        Ok(self.evaluate(v1, v2, false)?.loss)
    }

    /// Loss and its gradient with respect to both vectors.
    pub fn loss_and_grad(&self, v1: &[T], v2: &[T]) -> Result<(f64, Vec<T>, Vec<T>)> {
        let e = self.evaluate(v1, v2, true)?;
        let (g1, g2) = e.grads.expect("requested");
        Ok((e.loss, g1.into_data(), g2.into_data()))
    }
}

fn optimized(pipe: &Pipeline<'_, impl Scalar>, tag: &str, seed: u64, grid: usize, values: Vec<f32>) -> ActivationVector {
    ActivationVector {
        id: format!("{}@inv{seed}:g{grid}:{tag}", pipe.layer_x.name),
        name: format!("inversion seed {seed} grid {grid} {tag}"),
        layer: pipe.layer_x.name.clone(),
        provenance: Provenance::Optimized,
        values,
    }
}

fn initial_vectors<T: Scalar>(pipe: &Pipeline<'_, T>, spec: &InversionSpec) -> Result<(Vec<T>, Vec<T>)> {
    if let Some((a, b)) = &spec.init {
        let cast = |v: &Vec<f64>| v.iter().map(|&x| T::from_f64_lossy(x)).collect();
        return Ok((cast(a), cast(b)));
    }
    let layer = &pipe.layer_x;
    let (_, trace) = pipe.generator.forward_seed(spec.seed, &[Hook::capture(&layer.name)])?;
    let act = trace.activation(&layer.name)?;
    let mut rng = SplitMix64::new(derive_seed(spec.seed, stream::INIT));
    let mut pick = || -> Result<Vec<T>> {
        let (x, y) = (rng.below(layer.width), rng.below(layer.height));
        act.pixel(0, y, x)
    };
    Ok((pick()?, pick()?))
}

fn step_error(step: usize, last: Option<f64>, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Gradient(_) => Error::NonFiniteLoss {
            step,
            last_finite_loss: last,
        },
        other => other,
    }
}

/// Lowest-loss iterate seen so far.
struct Iterate<T> {
    loss: f64,
    step: usize,
    v1: Vec<T>,
    v2: Vec<T>,
    pooled: Vec<T>,
}

/// Fits one vector on the grid blocks and one on the gaps (a single vector
/// everywhere for grid size 0) so that the spatially pooled LayerY features
/// of the generated image match the target under mean absolute error.
/// Plain gradient descent with best-iterate tracking.
pub fn invert<T: Scalar>(pipe: &Pipeline<'_, T>, spec: &InversionSpec) -> Result<InversionResult> {
    spec.validate(pipe)?;
    let grid = GridSpec::new(spec.grid_size);
    let objective = InversionObjective::new(pipe, grid, spec.seed, &spec.target)?;
    let (mut v1, mut v2) = initial_vectors(pipe, spec)?;
    let step = T::from_f64_lossy(spec.step_size);
    let target: Vec<T> = spec.target.iter().map(|&x| T::from_f64_lossy(x)).collect();

    let mut curve = Vec::with_capacity(spec.steps + 1);
    let mut best: Option<Iterate<T>> = None;
    let mut initial_cosine = 0.0;
    for i in 0..=spec.steps {
        let last = curve.last().copied();
        let want_grad = i < spec.steps;
        let e = objective
            .evaluate(&v1, &v2, want_grad)
            .map_err(|err| step_error(i, last, err))?;
        if !e.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: i,
                last_finite_loss: last,
            });
        }
        if i == 0 {
            initial_cosine = cosine_similarity(&e.pooled, &target)?;
        }
        curve.push(e.loss);
        if best.as_ref().is_none_or(|b| e.loss < b.loss) {
            best = Some(Iterate {
                loss: e.loss,
                step: i,
                v1: v1.clone(),
                v2: v2.clone(),
                pooled: e.pooled.clone(),
            });
        }
        if let Some((g1, g2)) = e.grads {
            for (v, g) in v1.iter_mut().zip(g1.data()) {
                *v = *v - step * *g;
            }
            if spec.grid_size > 0 {
                for (v, g) in v2.iter_mut().zip(g2.data()) {
                    *v = *v - step * *g;
                }
            }
        }
    }
    let Iterate {
        loss: best_loss,
        step: best_step,
        v1: b1,
        v2: b2,
        pooled,
    } = best.expect("at least one iterate");
    let to_f32 = |v: Vec<T>| v.into_iter().map(|x| x.to_f32_lossy()).collect();
    Ok(InversionResult {
        v1: optimized(pipe, "v1", spec.seed, spec.grid_size, to_f32(b1)),
        v2: optimized(pipe, "v2", spec.seed, spec.grid_size, to_f32(b2)),
        best_loss,
        best_step,
        loss_curve: curve,
        reconstruction_cosine: cosine_similarity(&pooled, &target)?,
        initial_cosine,
    })
}
