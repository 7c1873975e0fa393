//! On-disk schema of a bundle directory.
//!
//! `graph.json` is written in canonical form: keys sorted, two-space
//! indentation, trailing newline. `weights.bin` is the concatenation of all
//! weight tensors as little-endian `f32`, followed by the CRC32 of those
//! bytes (little-endian `u32`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Activation, Padding};

pub const FORMAT_TAG: &str = "actpaint-bundle/1";
pub const GRAPH_FILE: &str = "graph.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONDITIONS_FILE: &str = "conditions.bin";
pub const CONFORMANCE_FILE: &str = "conformance.json";

pub(crate) const KNOWN_OPS: &[&str] = &[
    "input",
    "conv2d",
    "conv_transpose2d",
    "upsample_nearest",
    "activation",
    "affine_channel",
    "concat_channels",
    "replicate_spatial",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    FeatureExtractor,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Generator => "generator",
            Role::FeatureExtractor => "feature_extractor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Noise,
    Condition,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: InputKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionsSpec {
    pub count: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub node: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpSpec {
    Input {
        input: String,
    },
    Conv2d {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        stride: usize,
        padding: Padding,
    },
    UpsampleNearest {
        factor: usize,
    },
    Activation {
        activation: Activation,
    },
    AffineChannel {
        scale: String,
        shift: String,
    },
    ConcatChannels,
    ReplicateSpatial {
        height: usize,
        width: usize,
    },
}

impl OpSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            OpSpec::Input { .. } => "input",
            OpSpec::Conv2d { .. } => "conv2d",
            OpSpec::ConvTranspose2d { .. } => "conv_transpose2d",
            OpSpec::UpsampleNearest { .. } => "upsample_nearest",
            OpSpec::Activation { .. } => "activation",
            OpSpec::AffineChannel { .. } => "affine_channel",
            OpSpec::ConcatChannels => "concat_channels",
            OpSpec::ReplicateSpatial { .. } => "replicate_spatial",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpSpec::Input { .. } => 0,
            OpSpec::ConcatChannels => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: usize,
    #[serde(flatten)]
    pub op: OpSpec,
    #[serde(default)]
    pub inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Parsed `graph.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub format: String,
    pub name: String,
    pub role: Role,
    pub inputs: Vec<InputSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<ConditionsSpec>,
    pub nodes: Vec<NodeSpec>,
    pub output: OutputSpec,
    pub weights: Vec<WeightEntry>,
    pub weights_crc32: u32,
}

impl GraphDoc {
    /// Parses graph JSON, reporting op kinds outside the closed set by name.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if let Some(nodes) = raw.get("nodes").and_then(|n| n.as_array()) {
            for node in nodes {
                match node.get("op").and_then(|o| o.as_str()) {
                    Some(op) if KNOWN_OPS.contains(&op) => {}
                    Some(op) => return Err(Error::UnknownOp(op.to_string())),
                    None => return Err(Error::InvalidGraph("node without `op` field".into())),
                }
            }
        }
        Ok(serde_json::from_value(raw)?)
    }

    /// Canonical text: sorted keys, two-space indent, trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        // serde_json::Value maps are ordered by key.
        let value = serde_json::to_value(self)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }
}

/// Splits `weights.bin` into payload and verifies the trailing CRC32.
pub fn verify_blob(blob: &[u8]) -> Result<&[u8]> {
    if blob.len() < 4 {
        return Err(Error::Checksum {
            expected: 0,
            found: crc32fast::hash(blob),
        });
    }
    let (payload, trailer) = blob.split_at(blob.len() - 4);
    let expected = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
    let found = crc32fast::hash(payload);
    if expected != found {
        return Err(Error::Checksum { expected, found });
    }
    Ok(payload)
}

pub fn seal_blob(mut payload: Vec<u8>) -> (Vec<u8>, u32) {
    let crc = crc32fast::hash(&payload);
    payload.extend_from_slice(&crc.to_le_bytes());
    (payload, crc)
}

pub fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect()
}

pub fn f32_to_le(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_named() {
        let text = r#"{"nodes":[{"id":0,"op":"attention","inputs":[]}]}"#;
        match GraphDoc::parse(text) {
            Err(Error::UnknownOp(op)) => assert_eq!(op, "attention"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blob_checksum_detects_truncation() {
        let (blob, _) = seal_blob(f32_to_le([1.0, 2.0, 3.0]));
        assert!(verify_blob(&blob).is_ok());
        assert!(matches!(
            verify_blob(&blob[..blob.len() - 2]),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn node_spec_json_shape() {
        let node = NodeSpec {
            id: 3,
            op: OpSpec::Activation {
                activation: Activation::LeakyRelu { alpha: 0.2 },
            },
            inputs: vec![2],
            name: Some("up1.conv1".into()),
        };
        let v = serde_json::to_value(&node).unwrap();
        assert_eq!(v["op"], "activation");
        assert_eq!(v["activation"]["kind"], "leaky_relu");
        let back: NodeSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, node);
    }
}
