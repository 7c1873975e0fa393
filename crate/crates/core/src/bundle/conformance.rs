//! Cross-implementation probe values stored next to a bundle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sample_noise;
use crate::scalar::Scalar;

use super::exec::Inputs;
use super::{InputKind, ModelBundle, CONFORMANCE_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceCase {
    pub seed: u64,
    pub output_shape: Vec<usize>,
    pub output_sum: f64,
    pub output_abs_sum: f64,
    pub probes: Vec<Probe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceDoc {
    pub format: String,
    pub bundle: String,
    pub weights_crc32: u32,
    pub tolerance: f64,
    pub cases: Vec<ConformanceCase>,
}

impl ConformanceDoc {
    pub fn load(bundle_dir: impl AsRef<Path>) -> Result<Self> {
        let path = bundle_dir.as_ref().join(CONFORMANCE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Largest deviations observed against a [`ConformanceDoc`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub cases: usize,
    pub probes: usize,
    pub max_probe_error: f64,
    /// Sum deviation relative to the absolute sum.
    pub max_relative_sum_error: f64,
    pub tolerance: f64,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.max_probe_error <= self.tolerance && self.max_relative_sum_error <= self.tolerance
    }
}

impl<T: Scalar> ModelBundle<T> {
    /// Inputs used for conformance probing: seeded inputs for generators,
    /// a standard-normal image for feature extractors.
    pub fn probe_inputs(&self, seed: u64) -> Result<Inputs<T>> {
        if self.input_specs().iter().any(|s| s.kind == InputKind::Image) {
            let spec = self.image_input()?;
            let mut inputs = Inputs::new();
            inputs.insert(spec.name.clone(), sample_noise(seed, &spec.shape)?);
            return Ok(inputs);
        }
        self.inputs_for_seed(seed)
    }

    /// Runs every recorded case and measures the deviations.
    pub fn check_conformance(&self, doc: &ConformanceDoc) -> Result<ConformanceReport> {
        if doc.weights_crc32 != self.doc().weights_crc32 {
            return Err(Error::Checksum {
                expected: doc.weights_crc32,
                found: self.doc().weights_crc32,
            });
        }
        let mut report = ConformanceReport {
            cases: doc.cases.len(),
            probes: 0,
            max_probe_error: 0.0,
            max_relative_sum_error: 0.0,
            tolerance: doc.tolerance,
        };
        for case in &doc.cases {
            let (out, _) = self.forward(&self.probe_inputs(case.seed)?, &[])?;
            if out.shape() != case.output_shape.as_slice() {
                return Err(Error::shape(
                    "conformance",
                    format!("seed {}: output {:?}, recorded {:?}", case.seed, out.shape(), case.output_shape),
                ));
            }
            let data = out.to_f64_vec();
            for p in &case.probes {
                let v = data
                    .get(p.index)
                    .ok_or_else(|| Error::OutOfRange(format!("probe index {}", p.index)))?;
                report.max_probe_error = report.max_probe_error.max((v - p.value).abs());
                report.probes += 1;
            }
            let sum: f64 = data.iter().sum();
            let rel = (sum - case.output_sum).abs() / case.output_abs_sum.max(1.0);
            report.max_relative_sum_error = report.max_relative_sum_error.max(rel);
        }
        Ok(report)
    }
}
