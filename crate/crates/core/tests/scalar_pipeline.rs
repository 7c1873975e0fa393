//! End-to-end check of the visualization and pooling pipeline against a
//! standalone scalar interpreter that reads the bundle files directly.

mod common;

use std::collections::BTreeMap;
use std::fs;

use serde_json::Value;

use actpaint_core::analysis::{visualize, Background, Pipeline};
use actpaint_core::intervention::extract_vector;
use actpaint_core::ops::{Padding, PaddingMode};
use actpaint_core::{GridSpec, Hook, ModelBundle, Tensor};

use common::{
    conv2d_oracle, conv_transpose2d_circular_scatter, conv_transpose2d_zero_insertion, fixture_dir,
    masked_mean_oracle,
};

struct ScalarModel {
    graph: Value,
    weights: BTreeMap<String, Tensor<f64>>,
}

/// Pixel replacement applied to one named node.
struct Paint<'a> {
    layer: &'a str,
    mask: &'a [bool],
    vector: &'a [f64],
}

impl ScalarModel {
    fn load(name: &str) -> Self {
        let dir = fixture_dir(name);
        let graph: Value = serde_json::from_str(&fs::read_to_string(dir.join("graph.json")).unwrap()).unwrap();
        let blob = fs::read(dir.join("weights.bin")).unwrap();
        let mut weights = BTreeMap::new();
        for w in graph["weights"].as_array().unwrap() {
            let offset = w["offset"].as_u64().unwrap() as usize;
            let length = w["length"].as_u64().unwrap() as usize;
            let values: Vec<f64> = blob[offset..offset + length]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            let shape: Vec<usize> = w["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).collect();
            weights.insert(w["name"].as_str().unwrap().to_string(), Tensor::new(&shape, values).unwrap());
        }
        Self { graph, weights }
    }

    fn weight(&self, node: &Value, key: &str) -> &Tensor<f64> {
        &self.weights[node[key].as_str().unwrap()]
    }

    fn run(&self, inputs: &BTreeMap<String, Tensor<f64>>, paint: Option<&Paint<'_>>) -> Tensor<f64> {
        let nodes = self.graph["nodes"].as_array().unwrap();
        let mut values: Vec<Tensor<f64>> = Vec::with_capacity(nodes.len());
        for node in nodes {
            let arg = |k: usize| &values[node["inputs"][k].as_u64().unwrap() as usize];
            let mut out = match node["op"].as_str().unwrap() {
                "input" => inputs[node["input"].as_str().unwrap()].clone(),
                "conv2d" => {
                    let bias = node.get("bias").map(|_| self.weight(node, "bias").data().to_vec());
                    conv2d_oracle(
                        arg(0),
                        self.weight(node, "weight"),
                        bias.as_deref(),
                        node["stride"].as_u64().unwrap() as usize,
                        padding(&node["padding"]),
                    )
                }
                "conv_transpose2d" => {
                    let pad = padding(&node["padding"]);
                    let stride = node["stride"].as_u64().unwrap() as usize;
                    let w = self.weight(node, "weight");
                    let mut y = match pad.mode {
                        PaddingMode::Zeros => conv_transpose2d_zero_insertion(arg(0), w, stride, pad.width),
                        PaddingMode::Circular => conv_transpose2d_circular_scatter(arg(0), w, stride, pad.width),
                    };
                    if node.get("bias").is_some() {
                        y = add_channel_bias(&y, self.weight(node, "bias").data());
                    }
                    y
                }
                "affine_channel" => {
                    let (scale, shift) = (self.weight(node, "scale").data(), self.weight(node, "shift").data());
                    per_channel(arg(0), |c, v| v * scale[c] + shift[c])
                }
                "activation" => {
                    let act = &node["activation"];
                    let f: Box<dyn Fn(f64) -> f64> = match act["kind"].as_str().unwrap() {
                        "relu" => Box::new(|v: f64| v.max(0.0)),
                        "leaky_relu" => {
                            let alpha = act["alpha"].as_f64().unwrap();
                            Box::new(move |v: f64| if v > 0.0 { v } else { alpha * v })
                        }
                        "tanh" => Box::new(f64::tanh),
                        "sigmoid" => Box::new(|v: f64| 1.0 / (1.0 + (-v).exp())),
                        other => panic!("activation {other}"),
                    };
                    per_channel(arg(0), |_, v| f(v))
                }
                "upsample_nearest" => {
                    let f = node["factor"].as_u64().unwrap() as usize;
                    let [n, c, h, w]: [usize; 4] = arg(0).shape().try_into().unwrap();
                    let mut data = Vec::with_capacity(n * c * h * w * f * f);
                    for p in 0..n * c {
                        for y in 0..h * f {
                            for x in 0..w * f {
                                data.push(arg(0).data()[p * h * w + (y / f) * w + x / f]);
                            }
                        }
                    }
                    Tensor::new(&[n, c, h * f, w * f], data).unwrap()
                }
                "replicate_spatial" => {
                    let (h, w) = (node["height"].as_u64().unwrap() as usize, node["width"].as_u64().unwrap() as usize);
                    let src = arg(0).data();
                    let data = src.iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect();
                    Tensor::new(&[1, src.len(), h, w], data).unwrap()
                }
                "concat_channels" => {
                    let (a, b) = (arg(0), arg(1));
                    let [_, ca, h, w]: [usize; 4] = a.shape().try_into().unwrap();
                    let cb = b.shape()[1];
                    let data = a.data().iter().chain(b.data()).copied().collect();
                    Tensor::new(&[1, ca + cb, h, w], data).unwrap()
                }
                other => panic!("scalar interpreter has no `{other}`"),
            };
            if let Some(p) = paint.filter(|p| node.get("name").and_then(Value::as_str) == Some(p.layer)) {
                let [_, c, h, w]: [usize; 4] = out.shape().try_into().unwrap();
                let mut data = out.data().to_vec();
                for ch in 0..c {
                    for i in 0..h * w {
                        if p.mask[i] {
                            data[ch * h * w + i] = p.vector[ch];
                        }
                    }
                }
                out = Tensor::new(out.shape(), data).unwrap();
            }
            values.push(out);
        }
        let output = self.graph["output"]["node"].as_u64().unwrap() as usize;
        let out = values.swap_remove(output);
        if self.graph["role"] == "generator" {
            per_channel(&out, |_, v| v.clamp(-1.0, 1.0))
        } else {
            out
        }
    }

    fn node_output(&self, name: &str, inputs: &BTreeMap<String, Tensor<f64>>) -> Tensor<f64> {
        // Truncate the graph at the named node.
        let nodes = self.graph["nodes"].as_array().unwrap();
        let id = nodes.iter().position(|n| n.get("name").and_then(Value::as_str) == Some(name)).unwrap();
        let mut graph = self.graph.clone();
        graph["nodes"] = Value::Array(nodes[..=id].to_vec());
        graph["output"]["node"] = id.into();
        graph["role"] = "feature_extractor".into();
        ScalarModel { graph, weights: self.weights.clone() }.run(inputs, None)
    }
}

fn padding(v: &Value) -> Padding {
    let width = v["width"].as_u64().unwrap() as usize;
    match v["mode"].as_str().unwrap() {
        "circular" => Padding::circular(width),
        _ => Padding::zeros(width),
    }
}

fn per_channel(t: &Tensor<f64>, f: impl Fn(usize, f64) -> f64) -> Tensor<f64> {
    let [_, c, h, w]: [usize; 4] = t.shape().try_into().unwrap();
    let data = t.data().iter().enumerate().map(|(i, &v)| f((i / (h * w)) % c, v)).collect();
    Tensor::new(t.shape(), data).unwrap()
}

fn add_channel_bias(t: &Tensor<f64>, bias: &[f64]) -> Tensor<f64> {
    per_channel(t, |c, v| v + bias[c])
}

/// Nearest-neighbour source index by the pixel-center rule, in floating point.
fn center_index(i: usize, src: usize, dst: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

#[test]
fn masked_features_match_scalar_reimplementation() {
    let gen32 = ModelBundle::load(fixture_dir("toygen-v1")).unwrap();
    let (gen, fx) = (gen32.cast::<f64>(), ModelBundle::load(fixture_dir("toyfx-v1")).unwrap().cast::<f64>());
    let (gen_ref, fx_ref) = (ScalarModel::load("toygen-v1"), ScalarModel::load("toyfx-v1"));
    let pipe = Pipeline::new(&gen, "up2.conv1", &fx, "stage3").unwrap();
    let (lx, ly) = (pipe.layer_x.clone(), pipe.layer_y.clone());

    for (seed, px, py, g) in [(3u64, 5usize, 9usize, 2usize), (11, 0, 15, 3), (40, 12, 1, 0)] {
        let inputs = gen.inputs_for_seed(seed).unwrap();

        let (baseline, _) = gen.forward_seed(seed, &[]).unwrap();
        let dev = baseline.max_abs_diff(&gen_ref.run(&inputs, None)).unwrap();
        assert!(dev < 1e-6, "seed {seed}: forward {dev}");

        // Vector extraction.
        let act = gen_ref.node_output(&lx.name, &inputs);
        let vector: Vec<f64> = (0..lx.channels).map(|c| act.at(0, c, py, px)).collect();
        let (_, trace) = gen.forward_seed(seed, &[Hook::capture(&lx.name)]).unwrap();
        let extracted = extract_vector(&trace, &lx, px, py).unwrap();
        let dev = extracted.values.iter().zip(&vector).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-6, "extraction {dev}");
        // Both sides paint the f32-stored vector.
        let stored: Vec<f64> = extracted.values.iter().map(|&v| v as f64).collect();

        // Painted generator output.
        let mask = GridSpec::new(g).mask(lx.height, lx.width);
        let paint = Paint { layer: &lx.name, mask: &mask, vector: &stored };
        let image_ref = gen_ref.run(&inputs, Some(&paint));
        let vis = visualize(&gen, &lx, &extracted, GridSpec::new(g), Background::Original, seed).unwrap();
        let dev = vis.image.max_abs_diff(&image_ref).unwrap();
        assert!(dev < 1e-6, "seed {seed}: image {dev}");

        // Extractor features at layer_y pooled with the grid mask resized to its extent.
        let mut fx_inputs = BTreeMap::new();
        fx_inputs.insert("image".to_string(), image_ref);
        let feats = fx_ref.node_output(&ly.name, &fx_inputs);
        let weights: Vec<f64> = (0..ly.height)
            .flat_map(|i| (0..ly.width).map(move |j| (i, j)))
            .map(|(i, j)| {
                let on = mask[center_index(i, lx.height, ly.height) * lx.width + center_index(j, lx.width, ly.width)];
                if on { 1.0 } else { 0.0 }
            })
            .collect();
        let want = masked_mean_oracle(feats.data(), ly.channels, ly.height, ly.width, &weights);
        let got = pipe.masked_feature_vector(&vis.image, &mask).unwrap();
        let dev = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-6, "seed {seed}: pooled {dev}");
    }
}

#[test]
fn single_pixel_mask_pools_the_matching_feature_pixel() {
    let gen = ModelBundle::load(fixture_dir("toygen-v1")).unwrap().cast::<f64>();
    let fx = ModelBundle::load(fixture_dir("toyfx-v1")).unwrap().cast::<f64>();
    let pipe = Pipeline::new(&gen, "up2.conv1", &fx, "stage3").unwrap();
    let (lx, ly) = (pipe.layer_x.clone(), pipe.layer_y.clone());
    let (image, _) = gen.forward_seed(6, &[]).unwrap();
    let feats = pipe.features(&image).unwrap();
    for (y, x) in [(1usize, 1usize), (7, 13), (15, 3)] {
        let mut mask = vec![false; lx.height * lx.width];
        mask[y * lx.width + x] = true;
        let pooled = pipe.masked_feature_vector(&image, &mask).unwrap();
        // The feature pixels whose center sample lands on (y, x).
        let block: Vec<(usize, usize)> = (0..ly.height)
            .flat_map(|i| (0..ly.width).map(move |j| (i, j)))
            .filter(|&(i, j)| center_index(i, lx.height, ly.height) == y && center_index(j, lx.width, ly.width) == x)
            .collect();
        assert!(!block.is_empty());
        for (c, got) in pooled.iter().enumerate() {
            let mean = block.iter().map(|&(i, j)| feats.at(0, c, i, j)).sum::<f64>() / block.len() as f64;
            assert!((got - mean).abs() < 1e-12);
        }
    }
}
