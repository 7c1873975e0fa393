//! Bundle lookup, vector references and palette files.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use actpaint_core::bundle::GRAPH_FILE;
use actpaint_core::image::Rgb;
use actpaint_core::intervention::extract_vector;
use actpaint_core::{ActivationVector, Hook, ModelBundle, VectorLibrary};

use crate::CliError;

pub const CACHE_ENV: &str = "ACTPAINT_CACHE";

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

/// Resolves a bundle argument: a literal directory, then
/// `$ACTPAINT_CACHE/<name>`, then the built-in fixtures.
pub fn bundle_path(spec: &str) -> Result<PathBuf, CliError> {
    let mut candidates = vec![PathBuf::from(spec)];
    if let Some(cache) = std::env::var_os(CACHE_ENV) {
        candidates.push(PathBuf::from(cache).join(spec));
    }
    candidates.push(fixtures_dir().join(spec));
    candidates
        .into_iter()
        .find(|p| p.join(GRAPH_FILE).is_file())
        .ok_or_else(|| CliError::Usage(format!("bundle `{spec}` not found (checked path, ${CACHE_ENV}, fixtures)")))
}

pub fn load_bundle(spec: &str) -> Result<ModelBundle, CliError> {
    let path = bundle_path(spec)?;
    ModelBundle::load(&path).map_err(|e| CliError::Usage(format!("cannot load bundle {}: {e}", path.display())))
}

/// Parses `PATH#ID` (relative paths resolve against `base`) or
/// `extract:SEED:LAYER:X:Y`.
pub fn vector(reference: &str, generator: &ModelBundle, base: &Path) -> Result<ActivationVector, CliError> {
    if let Some(rest) = reference.strip_prefix("extract:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [seed, layer, x, y] = parts[..] else {
            return Err(CliError::Usage(format!("`{reference}`: expected extract:SEED:LAYER:X:Y")));
        };
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| CliError::Usage(format!("`{reference}`: `{s}` is not a number")))
        };
        let (seed, x, y) = (num(seed)?, num(x)? as usize, num(y)? as usize);
        let layer_ref = generator.layer(layer).map_err(CliError::invalid)?;
        let (_, trace) = generator.forward_seed(seed, &[Hook::capture(layer)])?;
        return extract_vector(&trace, &layer_ref, x, y).map_err(CliError::invalid);
    }
    let (path, id) = reference
        .rsplit_once('#')
        .ok_or_else(|| CliError::Usage(format!("`{reference}`: expected LIBRARY.json#ID")))?;
    let path = base.join(path);
    let lib = VectorLibrary::load(&path).map_err(CliError::invalid)?;
    lib.get(id).cloned().map_err(CliError::invalid)
}

#[derive(Debug, Deserialize)]
pub struct PaletteEntry {
    pub label: u32,
    pub color: Rgb,
    pub vector: String,
}

/// `palette.json`: colors of the mask image and the vector each one paints.
#[derive(Debug, Deserialize)]
pub struct PaletteFile {
    #[serde(default = "keep_green")]
    pub keep: Rgb,
    pub entries: Vec<PaletteEntry>,
}

fn keep_green() -> Rgb {
    [0, 255, 0]
}

impl PaletteFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read palette {}: {e}", path.display())))?;
        let file: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid palette {}: {e}", path.display())))?;
        if file.entries.iter().any(|e| e.label == 0) {
            return Err(CliError::Usage("palette label 0 is reserved for the keep color".into()));
        }
        Ok(file)
    }
}
