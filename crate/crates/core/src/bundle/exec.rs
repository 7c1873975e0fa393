//! Graph execution with named-layer hooks, in plain and taped form.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{GradTape, Var};
use crate::error::{Error, Result};
use crate::intervention::LabelPatch;
use crate::ops;
use crate::rng::{derive_seed, sample_noise, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{InputKind, LayerRef, ModelBundle, Node, Op, Role};

pub type Inputs<T = f32> = BTreeMap<String, Tensor<T>>;

/// What to do when execution reaches a hooked layer.
#[derive(Debug, Clone)]
pub enum HookAction<T: Scalar = f32> {
    /// Record the layer's activations in the trace.
    Capture,
    /// Substitute the whole activation tensor.
    Replace(Tensor<T>),
    /// Substitute individual pixels according to a label grid.
    Paint(Arc<LabelPatch<T>>),
}

#[derive(Debug, Clone)]
pub struct Hook<T: Scalar = f32> {
    pub layer: String,
    pub action: HookAction<T>,
}

impl<T: Scalar> Hook<T> {
    pub fn capture(layer: impl Into<String>) -> Self {
        Self {
            layer: layer.into(),
            action: HookAction::Capture,
        }
    }

    pub fn replace(layer: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            layer: layer.into(),
            action: HookAction::Replace(tensor),
        }
    }

    pub fn paint(layer: impl Into<String>, patch: LabelPatch<T>) -> Self {
        Self {
            layer: layer.into(),
            action: HookAction::Paint(Arc::new(patch)),
        }
    }
}

/// Activations captured during one forward pass.
#[derive(Debug, Clone)]
pub struct ExecutionTrace<T: Scalar = f32> {
    pub captured: BTreeMap<String, Tensor<T>>,
    pub output: Tensor<T>,
    pub seed: Option<u64>,
}

impl<T: Scalar> ExecutionTrace<T> {
    pub fn activation(&self, layer: &str) -> Result<&Tensor<T>> {
        self.captured
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(format!("{layer} (not captured)")))
    }
}

/// Layer name to captured activation.
pub type Captures<T> = BTreeMap<String, Tensor<T>>;

/// Every node value of one plain execution.
#[derive(Debug, Clone)]
pub struct NodeValues<T: Scalar = f32> {
    values: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> NodeValues<T> {
    pub fn get(&self, node: usize) -> Option<&Tensor<T>> {
        self.values.get(node).and_then(Option::as_ref)
    }
}

fn eval_plain<T: Scalar>(node: &Node<T>, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match &node.op {
        Op::Input { name } => Err(Error::UnknownInput(name.clone())),
        Op::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => ops::conv2d(args[0], weight, bias.as_deref().map(Vec::as_slice), *stride, *padding),
        Op::ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        } => ops::conv_transpose2d(args[0], weight, bias.as_deref().map(Vec::as_slice), *stride, *padding),
        Op::UpsampleNearest { factor } => ops::upsample_nearest(args[0], *factor),
        Op::Activation(kind) => ops::activation(args[0], *kind),
        Op::AffineChannel { scale, shift } => ops::affine_channel(args[0], scale, shift),
        Op::ConcatChannels => ops::concat_channels(args[0], args[1]),
        Op::ReplicateSpatial { height, width } => ops::replicate_spatial(args[0], *height, *width),
    }
}

fn eval_taped<T: Scalar>(tape: &mut GradTape<T>, node: &Node<T>, args: &[Var]) -> Result<Var> {
    match &node.op {
        Op::Input { name } => Err(Error::UnknownInput(name.clone())),
        Op::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => tape.conv2d(args[0], weight, bias.as_deref().map(Vec::as_slice), *stride, *padding),
        Op::ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        } => tape.conv_transpose2d(args[0], weight, bias.as_deref().map(Vec::as_slice), *stride, *padding),
        Op::UpsampleNearest { factor } => tape.upsample_nearest(args[0], *factor),
        Op::Activation(kind) => tape.activation(args[0], *kind),
        Op::AffineChannel { scale, shift } => tape.affine_channel(args[0], scale, shift),
        Op::ConcatChannels => tape.concat_channels(args[0], args[1]),
        Op::ReplicateSpatial { height, width } => tape.replicate_spatial(args[0], *height, *width),
    }
}

impl<T: Scalar> ModelBundle<T> {
    /// Deterministic inputs for `seed`: noise inputs are standard normal,
    /// condition inputs pick one row of the condition table.
    pub fn inputs_for_seed(&self, seed: u64) -> Result<Inputs<T>> {
        let mut inputs = Inputs::new();
        let mut first_noise = true;
        for (k, spec) in self.input_specs().iter().enumerate() {
            let tensor = match spec.kind {
                InputKind::Noise => {
                    let s = if first_noise { seed } else { derive_seed(seed, k as u64) };
                    first_noise = false;
                    sample_noise(s, &spec.shape)?
                }
                InputKind::Condition => {
                    let table = self
                        .conditions()
                        .ok_or_else(|| Error::InvalidGraph("no condition table".into()))?;
                    let (count, dim) = (table.shape()[0], table.shape()[1]);
                    let row = SplitMix64::new(derive_seed(seed, 1000 + k as u64)).below(count);
                    Tensor::new(&[1, dim], table.data()[row * dim..(row + 1) * dim].to_vec())?
                }
                InputKind::Image => {
                    return Err(Error::Precondition(format!(
                        "image input `{}` cannot be derived from a seed",
                        spec.name
                    )))
                }
            };
            inputs.insert(spec.name.clone(), tensor);
        }
        Ok(inputs)
    }

    fn check_inputs(&self, inputs: &Inputs<T>) -> Result<()> {
        for spec in self.input_specs() {
            let t = inputs
                .get(&spec.name)
                .ok_or_else(|| Error::UnknownInput(format!("{} (not supplied)", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "forward",
                    format!("input `{}` expects {:?}, got {:?}", spec.name, spec.shape, t.shape()),
                ));
            }
        }
        if let Some(extra) = inputs.keys().find(|k| !self.input_specs().iter().any(|s| &s.name == *k)) {
            return Err(Error::UnknownInput(extra.clone()));
        }
        Ok(())
    }

    fn hooks_by_node<'h>(&self, hooks: &'h [Hook<T>]) -> Result<BTreeMap<usize, Vec<&'h Hook<T>>>> {
        let mut by_node: BTreeMap<usize, Vec<&Hook<T>>> = BTreeMap::new();
        for hook in hooks {
            let layer = self.layer(&hook.layer)?;
            match &hook.action {
                HookAction::Replace(t) if t.shape() != self.node_shape(layer.node) => {
                    return Err(Error::shape(
                        "forward",
                        format!(
                            "replacement for `{}` has shape {:?}, layer is {:?}",
                            hook.layer,
                            t.shape(),
                            self.node_shape(layer.node)
                        ),
                    ))
                }
                HookAction::Paint(p) if (p.height, p.width) != (layer.height, layer.width) => {
                    return Err(Error::shape(
                        "forward",
                        format!(
                            "label grid {}x{} does not match layer `{}` ({}x{})",
                            p.height, p.width, hook.layer, layer.height, layer.width
                        ),
                    ))
                }
                _ => {}
            }
            by_node.entry(layer.node).or_default().push(hook);
        }
        Ok(by_node)
    }

    /// Runs the nodes needed for `targets` (all nodes when `None`) and
    /// applies hooks in declaration order at each hooked layer.
    pub fn run_nodes(
        &self,
        inputs: &Inputs<T>,
        hooks: &[Hook<T>],
        targets: Option<&[usize]>,
    ) -> Result<(NodeValues<T>, Captures<T>)> {
        self.check_inputs(inputs)?;
        let by_node = self.hooks_by_node(hooks)?;
        let needed = match targets {
            None => vec![true; self.nodes().len()],
            Some(ts) => {
                let mut need = vec![false; self.nodes().len()];
                for &t in ts {
                    for (n, a) in self.ancestors(t).into_iter().enumerate() {
                        need[n] |= a;
                    }
                }
                need
            }
        };
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes().len()];
        let mut captured = BTreeMap::new();
        for node in self.nodes() {
            if !needed[node.id] {
                continue;
            }
            let mut value = match &node.op {
                Op::Input { name } => inputs[name].clone(),
                _ => {
                    let args: Vec<&Tensor<T>> = node
                        .inputs
                        .iter()
                        .map(|&i| values[i].as_ref().expect("inputs precede consumers"))
                        .collect();
                    eval_plain(node, &args)?
                }
            };
            if let Some(hs) = by_node.get(&node.id) {
                for hook in hs {
                    match &hook.action {
                        HookAction::Capture => {
                            captured.insert(hook.layer.clone(), value.clone());
                        }
                        HookAction::Replace(t) => value = t.clone(),
                        HookAction::Paint(patch) => value = patch.apply(&value)?,
                    }
                }
            }
            values[node.id] = Some(value);
        }
        Ok((NodeValues { values }, captured))
    }

    /// Full forward pass; generator outputs are clamped to `[-1, 1]`.
    pub fn forward(&self, inputs: &Inputs<T>, hooks: &[Hook<T>]) -> Result<(Tensor<T>, ExecutionTrace<T>)> {
        let out_node = self.output_node();
        let (mut values, captured) = self.run_nodes(inputs, hooks, Some(&[out_node]))?;
        let raw = values.values[out_node].take().expect("output computed");
        let output = match self.role() {
            Role::Generator => ops::clamp(&raw, -T::one(), T::one()),
            Role::FeatureExtractor => raw,
        };
        let trace = ExecutionTrace {
            captured,
            output: output.clone(),
            seed: None,
        };
        Ok((output, trace))
    }

    /// Forward pass on the deterministic inputs of `seed`.
    pub fn forward_seed(&self, seed: u64, hooks: &[Hook<T>]) -> Result<(Tensor<T>, ExecutionTrace<T>)> {
        let inputs = self.inputs_for_seed(seed)?;
        let (out, mut trace) = self.forward(&inputs, hooks)?;
        trace.seed = Some(seed);
        Ok((out, trace))
    }

    /// Activations of `layer` for a single image input.
    pub fn features(&self, image: &Tensor<T>, layer: &LayerRef) -> Result<Tensor<T>> {
        let spec = self.image_input()?;
        let mut inputs = Inputs::new();
        inputs.insert(spec.name.clone(), image.clone());
        let (mut values, _) = self.run_nodes(&inputs, &[], Some(&[layer.node]))?;
        Ok(values.values[layer.node].take().expect("layer computed"))
    }

    /// Re-runs the part of the graph downstream of `layer` on a tape, with
    /// the layer's value replaced by `replacement`. Everything else is taken
    /// from `baseline` as constants. Returns the (clamped) output.
    pub fn forward_from_layer_taped(
        &self,
        tape: &mut GradTape<T>,
        baseline: &NodeValues<T>,
        layer: &LayerRef,
        replacement: Var,
    ) -> Result<Var> {
        if tape.value(replacement)?.shape() != self.node_shape(layer.node) {
            return Err(Error::shape(
                "forward",
                format!(
                    "replacement {:?} for layer `{}` {:?}",
                    tape.value(replacement)?.shape(),
                    layer.name,
                    self.node_shape(layer.node)
                ),
            ));
        }
        let downstream = self.descendants(layer.node);
        let mut vars: Vec<Option<Var>> = vec![None; self.nodes().len()];
        vars[layer.node] = Some(replacement);
        for node in &self.nodes()[layer.node + 1..] {
            if !downstream[node.id] {
                continue;
            }
            let mut args = Vec::with_capacity(node.inputs.len());
            for &i in &node.inputs {
                let v = match vars[i] {
                    Some(v) => v,
                    None => {
                        let value = baseline
                            .get(i)
                            .ok_or_else(|| Error::Precondition(format!("baseline lacks node {i}")))?;
                        let v = tape.constant(value.clone());
                        vars[i] = Some(v);
                        v
                    }
                };
                args.push(v);
            }
            vars[node.id] = Some(eval_taped(tape, node, &args)?);
        }
        let out = vars[self.output_node()]
            .ok_or_else(|| Error::Precondition(format!("output does not depend on layer `{}`", layer.name)))?;
        match self.role() {
            Role::Generator => tape.clamp(out, -T::one(), T::one()),
            Role::FeatureExtractor => Ok(out),
        }
    }

    /// Taped pass from the image input up to `layer`.
    pub fn features_taped(&self, tape: &mut GradTape<T>, image: Var, layer: &LayerRef) -> Result<Var> {
        let spec = self.image_input()?;
        if tape.value(image)?.shape() != spec.shape.as_slice() {
            return Err(Error::shape(
                "features",
                format!("image {:?}, expected {:?}", tape.value(image)?.shape(), spec.shape),
            ));
        }
        let needed = self.ancestors(layer.node);
        let mut vars: Vec<Option<Var>> = vec![None; self.nodes().len()];
        for node in &self.nodes()[..=layer.node] {
            if !needed[node.id] {
                continue;
            }
            let v = match &node.op {
                Op::Input { name } if *name == spec.name => image,
                Op::Input { name } => return Err(Error::UnknownInput(name.clone())),
                _ => {
                    let args: Vec<Var> = node.inputs.iter().map(|&i| vars[i].expect("ordered")).collect();
                    eval_taped(tape, node, &args)?
                }
            };
            vars[node.id] = Some(v);
        }
        Ok(vars[layer.node].expect("layer computed"))
    }
}
