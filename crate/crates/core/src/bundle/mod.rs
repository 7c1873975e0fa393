//! Model bundles: a validated operation DAG plus its frozen weights.

pub mod conformance;
pub mod exec;
pub mod format;
pub mod receptive;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

pub use conformance::{ConformanceDoc, ConformanceReport};
pub use exec::{ExecutionTrace, Hook, HookAction, Inputs, NodeValues};
pub use format::{CONDITIONS_FILE, CONFORMANCE_FILE, FORMAT_TAG, GRAPH_FILE, WEIGHTS_FILE};
pub use format::{ConditionsSpec, GraphDoc, InputKind, InputSpec, NodeSpec, OpSpec, OutputSpec, Role, WeightEntry};

use crate::error::{Error, Result};
use crate::ops::{Activation, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Executable operation with weights resolved.
#[derive(Debug, Clone)]
pub enum Op<T: Scalar> {
    Input {
        name: String,
    },
    Conv2d {
        weight: Arc<Tensor<T>>,
        bias: Option<Arc<Vec<T>>>,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        weight: Arc<Tensor<T>>,
        bias: Option<Arc<Vec<T>>>,
        stride: usize,
        padding: Padding,
    },
    UpsampleNearest {
        factor: usize,
    },
    Activation(Activation),
    AffineChannel {
        scale: Arc<Vec<T>>,
        shift: Arc<Vec<T>>,
    },
    ConcatChannels,
    ReplicateSpatial {
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Node<T: Scalar> {
    pub id: usize,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub name: Option<String>,
}

/// A named, hookable layer resolved against a bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRef {
    pub role: Role,
    pub name: String,
    pub node: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Immutable model: graph, weights and optional condition vectors.
#[derive(Debug, Clone)]
pub struct ModelBundle<T: Scalar = f32> {
    doc: GraphDoc,
    nodes: Vec<Node<T>>,
    shapes: Vec<Vec<usize>>,
    layers: BTreeMap<String, usize>,
    weights: BTreeMap<String, Arc<Tensor<T>>>,
    conditions: Option<Arc<Tensor<T>>>,
}

impl ModelBundle<f32> {
    /// Loads and fully validates a bundle directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let graph_path = dir.join(format::GRAPH_FILE);
        let text = fs::read_to_string(&graph_path).map_err(|e| Error::io(&graph_path, e))?;
        let doc = GraphDoc::parse(&text)?;
        let weights_path = dir.join(format::WEIGHTS_FILE);
        let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        let cond_path = dir.join(format::CONDITIONS_FILE);
        let conditions = if cond_path.exists() {
            Some(fs::read(&cond_path).map_err(|e| Error::io(&cond_path, e))?)
        } else {
            None
        };
        Self::from_parts(doc, &blob, conditions.as_deref())
    }

    /// Validates a parsed graph against its weight blob (payload + CRC trailer).
    pub fn from_parts(doc: GraphDoc, blob: &[u8], conditions: Option<&[u8]>) -> Result<Self> {
        let payload = format::verify_blob(blob)?;
        let found = crc32fast::hash(payload);
        if found != doc.weights_crc32 {
            return Err(Error::Checksum {
                expected: doc.weights_crc32,
                found,
            });
        }
        if doc.format != format::FORMAT_TAG {
            return Err(Error::InvalidGraph(format!(
                "unsupported format tag `{}`",
                doc.format
            )));
        }

        let mut weights = BTreeMap::new();
        let mut expected_offset = 0usize;
        for entry in &doc.weights {
            let numel: usize = entry.shape.iter().product();
            if entry.length != numel * 4 || entry.offset != expected_offset {
                return Err(Error::shape(
                    "load_bundle",
                    format!(
                        "weight `{}` declares offset {} length {}, expected offset {expected_offset} length {}",
                        entry.name,
                        entry.offset,
                        entry.length,
                        numel * 4
                    ),
                ));
            }
            let end = entry.offset + entry.length;
            if end > payload.len() {
                return Err(Error::shape(
                    "load_bundle",
                    format!("weight `{}` extends past the blob", entry.name),
                ));
            }
            let values = format::f32_from_le(&payload[entry.offset..end]);
            let tensor = Tensor::new(&entry.shape, values).map_err(|e| match e {
                Error::NonFinite { .. } => Error::InvalidGraph(format!("weight `{}` is not finite", entry.name)),
                other => other,
            })?;
            if weights.insert(entry.name.clone(), Arc::new(tensor)).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate weight `{}`", entry.name)));
            }
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::shape(
                "load_bundle",
                format!("blob holds {} bytes, weights cover {expected_offset}", payload.len()),
            ));
        }

        let conditions = match (&doc.conditions, conditions) {
            (Some(spec), Some(bytes)) => {
                if bytes.len() != spec.count * spec.dim * 4 {
                    return Err(Error::shape(
                        "load_bundle",
                        format!(
                            "conditions.bin has {} bytes, expected {}x{} floats",
                            bytes.len(),
                            spec.count,
                            spec.dim
                        ),
                    ));
                }
                Some(Arc::new(Tensor::new(&[spec.count, spec.dim], format::f32_from_le(bytes))?))
            }
            (Some(_), None) => {
                return Err(Error::InvalidGraph("graph declares conditions but conditions.bin is missing".into()))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidGraph("conditions.bin present but not declared".into()))
            }
            (None, None) => None,
        };

        Self::assemble(doc, weights, conditions)
    }
}

impl<T: Scalar> ModelBundle<T> {
    fn assemble(
        doc: GraphDoc,
        weights: BTreeMap<String, Arc<Tensor<T>>>,
        conditions: Option<Arc<Tensor<T>>>,
    ) -> Result<Self> {
        let bundle = Self::assemble_unchecked_output(doc, weights, conditions)?;
        let produced = &bundle.shapes[bundle.doc.output.node];
        if *produced != bundle.doc.output.shape {
            return Err(Error::shape(
                "load_bundle",
                format!(
                    "declared output shape {:?}, graph produces {:?}",
                    bundle.doc.output.shape, produced
                ),
            ));
        }
        Ok(bundle)
    }

    fn assemble_unchecked_output(
        doc: GraphDoc,
        weights: BTreeMap<String, Arc<Tensor<T>>>,
        conditions: Option<Arc<Tensor<T>>>,
    ) -> Result<Self> {
        let mut input_names = BTreeSet::new();
        for spec in &doc.inputs {
            if !input_names.insert(spec.name.as_str()) {
                return Err(Error::InvalidGraph(format!("duplicate input `{}`", spec.name)));
            }
            if spec.kind == InputKind::Condition {
                let dim = doc
                    .conditions
                    .as_ref()
                    .ok_or_else(|| Error::InvalidGraph("condition input without conditions spec".into()))?
                    .dim;
                if spec.shape != [1, dim] {
                    return Err(Error::shape(
                        "load_bundle",
                        format!("condition input `{}` must have shape [1, {dim}]", spec.name),
                    ));
                }
            }
        }

        let weight = |name: &str, shape_check: &dyn Fn(&[usize]) -> bool| -> Result<Arc<Tensor<T>>> {
            let w = weights
                .get(name)
                .ok_or_else(|| Error::InvalidGraph(format!("missing weight `{name}`")))?;
            if !shape_check(w.shape()) {
                return Err(Error::shape(
                    "load_bundle",
                    format!("weight `{name}` has unexpected shape {:?}", w.shape()),
                ));
            }
            Ok(Arc::clone(w))
        };
        let vector = |name: &str, len: usize| -> Result<Arc<Vec<T>>> {
            let w = weight(name, &|s| s == [len])?;
            Ok(Arc::new(w.data().to_vec()))
        };

        let mut nodes = Vec::with_capacity(doc.nodes.len());
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(doc.nodes.len());
        let mut layers = BTreeMap::new();
        let mut consumed = vec![false; doc.nodes.len()];

        for (pos, spec) in doc.nodes.iter().enumerate() {
            if spec.id != pos {
                return Err(Error::InvalidGraph(format!(
                    "node at position {pos} has id {}; nodes must be stored in id order",
                    spec.id
                )));
            }
            if spec.inputs.len() != spec.op.arity() {
                return Err(Error::InvalidGraph(format!(
                    "node {pos} ({}) takes {} inputs, got {}",
                    spec.op.kind(),
                    spec.op.arity(),
                    spec.inputs.len()
                )));
            }
            for &src in &spec.inputs {
                if src >= pos {
                    return Err(Error::InvalidGraph(format!(
                        "node {pos} consumes node {src}, which does not precede it (cycle or order violation)"
                    )));
                }
                consumed[src] = true;
            }
            if let Some(name) = &spec.name {
                if layers.insert(name.clone(), pos).is_some() {
                    return Err(Error::InvalidGraph(format!("duplicate layer name `{name}`")));
                }
            }
            let in_shape = |k: usize| shapes[spec.inputs[k]].as_slice();
            let (op, shape) = match &spec.op {
                OpSpec::Input { input } => {
                    let s = doc
                        .inputs
                        .iter()
                        .find(|i| &i.name == input)
                        .ok_or_else(|| Error::UnknownInput(input.clone()))?;
                    (Op::Input { name: input.clone() }, s.shape.clone())
                }
                OpSpec::Conv2d {
                    weight: wname,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = weight(wname, &|s| s.len() == 4)?;
                    let (o, i, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                    let [n, c, h, wd] = dims4(in_shape(0), pos)?;
                    if c != i || *stride == 0 {
                        return Err(Error::shape(
                            "load_bundle",
                            format!("node {pos}: conv2d weight {:?} vs input {:?}", w.shape(), in_shape(0)),
                        ));
                    }
                    let (hp, wp) = (h + 2 * padding.width, wd + 2 * padding.width);
                    if hp < kh || wp < kw {
                        return Err(Error::shape("load_bundle", format!("node {pos}: kernel exceeds input")));
                    }
                    let bias = bias.as_deref().map(|b| vector(b, o)).transpose()?;
                    let shape = vec![n, o, (hp - kh) / stride + 1, (wp - kw) / stride + 1];
                    (
                        Op::Conv2d {
                            weight: w,
                            bias,
                            stride: *stride,
                            padding: *padding,
                        },
                        shape,
                    )
                }
                OpSpec::ConvTranspose2d {
                    weight: wname,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = weight(wname, &|s| s.len() == 4)?;
                    let (i, o, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                    let [n, c, h, wd] = dims4(in_shape(0), pos)?;
                    let full_h = (h - 1) * stride + kh;
                    let full_w = (wd - 1) * stride + kw;
                    if c != i || *stride == 0 || full_h <= 2 * padding.width || full_w <= 2 * padding.width {
                        return Err(Error::shape(
                            "load_bundle",
                            format!("node {pos}: conv_transpose2d weight {:?} vs input {:?}", w.shape(), in_shape(0)),
                        ));
                    }
                    let bias = bias.as_deref().map(|b| vector(b, o)).transpose()?;
                    let shape = vec![n, o, full_h - 2 * padding.width, full_w - 2 * padding.width];
                    (
                        Op::ConvTranspose2d {
                            weight: w,
                            bias,
                            stride: *stride,
                            padding: *padding,
                        },
                        shape,
                    )
                }
                OpSpec::UpsampleNearest { factor } => {
                    if *factor < 1 {
                        return Err(Error::invalid("upsample_nearest", "factor must be at least 1"));
                    }
                    let [n, c, h, w] = dims4(in_shape(0), pos)?;
                    (Op::UpsampleNearest { factor: *factor }, vec![n, c, h * factor, w * factor])
                }
                OpSpec::Activation { activation } => {
                    activation.validate()?;
                    (Op::Activation(*activation), in_shape(0).to_vec())
                }
                OpSpec::AffineChannel { scale, shift } => {
                    let [_, c, _, _] = dims4(in_shape(0), pos)?;
                    (
                        Op::AffineChannel {
                            scale: vector(scale, c)?,
                            shift: vector(shift, c)?,
                        },
                        in_shape(0).to_vec(),
                    )
                }
                OpSpec::ConcatChannels => {
                    let [na, ca, ha, wa] = dims4(in_shape(0), pos)?;
                    let [nb, cb, hb, wb] = dims4(in_shape(1), pos)?;
                    if (na, ha, wa) != (nb, hb, wb) {
                        return Err(Error::shape(
                            "load_bundle",
                            format!("node {pos}: concat of {:?} and {:?}", in_shape(0), in_shape(1)),
                        ));
                    }
                    (Op::ConcatChannels, vec![na, ca + cb, ha, wa])
                }
                OpSpec::ReplicateSpatial { height, width } => {
                    let (n, c) = match in_shape(0) {
                        [n, c] | [n, c, 1, 1] => (*n, *c),
                        other => {
                            return Err(Error::shape(
                                "load_bundle",
                                format!("node {pos}: replicate_spatial needs a vector input, got {other:?}"),
                            ))
                        }
                    };
                    if *height == 0 || *width == 0 {
                        return Err(Error::invalid("replicate_spatial", "empty target extent"));
                    }
                    (
                        Op::ReplicateSpatial {
                            height: *height,
                            width: *width,
                        },
                        vec![n, c, *height, *width],
                    )
                }
            };
            nodes.push(Node {
                id: pos,
                op,
                inputs: spec.inputs.clone(),
                name: spec.name.clone(),
            });
            shapes.push(shape);
        }

        if nodes.is_empty() {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        let sinks: Vec<usize> = (0..nodes.len()).filter(|&i| !consumed[i]).collect();
        if sinks != [doc.output.node] {
            return Err(Error::InvalidGraph(format!(
                "graph must have exactly one output node ({}), found sinks {sinks:?}",
                doc.output.node
            )));
        }
        for (name, &node) in &layers {
            let s = &shapes[node];
            if s.len() != 4 || s[2] == 0 || s[3] == 0 {
                return Err(Error::InvalidGraph(format!("layer `{name}` has no spatial extent")));
            }
        }
        let referenced: BTreeSet<&str> = doc
            .nodes
            .iter()
            .flat_map(|n| match &n.op {
                OpSpec::Conv2d { weight, bias, .. } | OpSpec::ConvTranspose2d { weight, bias, .. } => {
                    let mut v = vec![weight.as_str()];
                    v.extend(bias.as_deref());
                    v
                }
                OpSpec::AffineChannel { scale, shift } => vec![scale.as_str(), shift.as_str()],
                _ => vec![],
            })
            .collect();
        if let Some(unused) = weights.keys().find(|k| !referenced.contains(k.as_str())) {
            return Err(Error::InvalidGraph(format!("weight `{unused}` is not referenced")));
        }

        Ok(Self {
            doc,
            nodes,
            shapes,
            layers,
            weights,
            conditions,
        })
    }

    /// Converts every weight to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        let weights: BTreeMap<String, Arc<Tensor<U>>> = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>())))
            .collect();
        let conditions = self.conditions.as_ref().map(|c| Arc::new(c.cast::<U>()));
        ModelBundle::assemble(self.doc.clone(), weights, conditions).expect("cast of a validated bundle")
    }

    pub fn doc(&self) -> &GraphDoc {
        &self.doc
    }

    pub fn name(&self) -> &str {
        &self.doc.name
    }

    pub fn role(&self) -> Role {
        self.doc.role
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node_shape(&self, node: usize) -> &[usize] {
        &self.shapes[node]
    }

    pub fn output_node(&self) -> usize {
        self.doc.output.node
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.doc.output.shape
    }

    pub fn input_specs(&self) -> &[InputSpec] {
        &self.doc.inputs
    }

    pub fn conditions(&self) -> Option<&Tensor<T>> {
        self.conditions.as_deref()
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    /// All named layers in graph order.
    pub fn layers(&self) -> Vec<LayerRef> {
        let mut refs: Vec<LayerRef> = self
            .layers
            .keys()
            .map(|name| self.layer(name).expect("known layer"))
            .collect();
        refs.sort_by_key(|l| l.node);
        refs
    }

    pub fn layer(&self, name: &str) -> Result<LayerRef> {
        let &node = self
            .layers
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        let s = &self.shapes[node];
        Ok(LayerRef {
            role: self.doc.role,
            name: name.to_string(),
            node,
            channels: s[1],
            height: s[2],
            width: s[3],
        })
    }

    /// The single image input of a feature extractor.
    pub fn image_input(&self) -> Result<&InputSpec> {
        let mut images = self.doc.inputs.iter().filter(|i| i.kind == InputKind::Image);
        match (images.next(), images.next()) {
            (Some(spec), None) => Ok(spec),
            _ => Err(Error::InvalidGraph(format!(
                "bundle `{}` must declare exactly one image input",
                self.doc.name
            ))),
        }
    }

    /// Serializes the bundle in canonical form.
    pub fn to_files(&self) -> Result<(String, Vec<u8>, Option<Vec<u8>>)> {
        let mut payload = Vec::new();
        for entry in &self.doc.weights {
            let w = &self.weights[&entry.name];
            payload.extend(format::f32_to_le(w.data().iter().map(|v| v.to_f32_lossy())));
        }
        let (blob, crc) = format::seal_blob(payload);
        let mut doc = self.doc.clone();
        doc.weights_crc32 = crc;
        let conditions = self
            .conditions
            .as_ref()
            .map(|c| format::f32_to_le(c.data().iter().map(|v| v.to_f32_lossy())));
        Ok((doc.to_canonical_json()?, blob, conditions))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (graph, blob, conditions) = self.to_files()?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(format::GRAPH_FILE, graph.as_bytes())?;
        write(format::WEIGHTS_FILE, &blob)?;
        if let Some(c) = conditions {
            write(format::CONDITIONS_FILE, &c)?;
        }
        Ok(())
    }

    /// Nodes reachable from `from` (inclusive).
    pub fn descendants(&self, from: usize) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        mark[from] = true;
        for node in &self.nodes[from + 1..] {
            if node.inputs.iter().any(|&i| mark[i]) {
                mark[node.id] = true;
            }
        }
        mark
    }

    /// Nodes `to` depends on (inclusive).
    pub fn ancestors(&self, to: usize) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        mark[to] = true;
        for node in self.nodes[..=to].iter().rev() {
            if mark[node.id] {
                for &i in &node.inputs {
                    mark[i] = true;
                }
            }
        }
        mark
    }
}

fn dims4(shape: &[usize], node: usize) -> Result<[usize; 4]> {
    shape.try_into().map_err(|_| {
        Error::shape(
            "load_bundle",
            format!("node {node}: expected rank-4 input, got {shape:?}"),
        )
    })
}

/// Programmatic construction of bundles (fixtures, tests).
#[derive(Debug, Clone)]
pub struct BundleBuilder {
    name: String,
    role: Role,
    inputs: Vec<InputSpec>,
    nodes: Vec<NodeSpec>,
    weights: Vec<(String, Tensor<f32>)>,
    conditions: Option<Tensor<f32>>,
}

impl BundleBuilder {
    pub fn new(name: impl Into<String>, role: Role) -> Self {
        Self {
            name: name.into(),
            role,
            inputs: Vec::new(),
            nodes: Vec::new(),
            weights: Vec::new(),
            conditions: None,
        }
    }

    /// Declares an input and returns the node reading it.
    pub fn input(&mut self, name: &str, shape: &[usize], kind: InputKind) -> usize {
        self.inputs.push(InputSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind,
        });
        self.node(
            OpSpec::Input {
                input: name.to_string(),
            },
            &[],
            None,
        )
    }

    /// Condition vectors (`count × dim`) shipped in `conditions.bin`.
    pub fn conditions(&mut self, table: Tensor<f32>) -> &mut Self {
        self.conditions = Some(table);
        self
    }

    pub fn weight(&mut self, name: &str, tensor: Tensor<f32>) -> String {
        self.weights.push((name.to_string(), tensor));
        name.to_string()
    }

    pub fn node(&mut self, op: OpSpec, inputs: &[usize], name: Option<&str>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(NodeSpec {
            id,
            op,
            inputs: inputs.to_vec(),
            name: name.map(str::to_string),
        });
        id
    }

    pub fn build(self, output: usize) -> Result<ModelBundle<f32>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.weights {
            let bytes = format::f32_to_le(t.data().iter().copied());
            entries.push(WeightEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                length: bytes.len(),
            });
            payload.extend(bytes);
        }
        let (blob, crc) = format::seal_blob(payload);
        let conditions = self.conditions.as_ref().map(|c| ConditionsSpec {
            count: c.shape()[0],
            dim: c.shape()[1],
        });
        let cond_bytes = self
            .conditions
            .as_ref()
            .map(|c| format::f32_to_le(c.data().iter().copied()));
        let mut doc = GraphDoc {
            format: format::FORMAT_TAG.to_string(),
            name: self.name,
            role: self.role,
            inputs: self.inputs,
            conditions,
            nodes: self.nodes,
            output: OutputSpec {
                node: output,
                shape: Vec::new(),
            },
            weights: entries,
            weights_crc32: crc,
        };
        let weights = self
            .weights
            .into_iter()
            .map(|(name, t)| (name, Arc::new(t)))
            .collect();
        let conditions = self.conditions.map(Arc::new);
        let draft = ModelBundle::assemble_unchecked_output(doc.clone(), weights, conditions)?;
        doc.output.shape = draft.shapes[output].clone();
        ModelBundle::from_parts(doc, &blob, cond_bytes.as_deref())
    }
}
