use std::collections::BTreeMap;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Value};

use actpaint_core::analysis::{tileability_scan, visualize, Background, Pipeline};
use actpaint_core::image::{montage, RgbImage};
use actpaint_core::intervention::{extract_vector, palette_decode, resample_labels, InterventionMask, LabelGrid};
use actpaint_core::{ops, ActivationVector, GridSpec, Hook, Tensor};

use crate::error::{ApiError, ApiResult};
use crate::state::{AppState, JobStatus, Session};

pub(crate) fn api() -> Router<AppState> {
    Router::new()
        .route("/api/model", get(model))
        .route("/api/session", post(create_session))
        .route("/api/extract", post(extract))
        .route("/api/library", get(library))
        .route("/api/visualize", post(visualize_vector))
        .route("/api/paint", post(paint))
        .route("/api/scan", post(scan))
        .route("/api/job/{id}", get(job))
}

const THUMBNAIL: usize = 64;
const MAX_SCAN_SAMPLES: usize = 4096;

fn png_base64(image: &Tensor) -> ApiResult<String> {
    Ok(BASE64.encode(RgbImage::from_tensor(image)?.encode_png()?))
}

/// Runs engine work off the async executor.
async fn blocking<R: Send + 'static>(f: impl FnOnce() -> ApiResult<R> + Send + 'static) -> ApiResult<R> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn library_vector(state: &AppState, id: &str) -> ApiResult<ActivationVector> {
    let lib = state.0.library.lock().expect("library poisoned");
    Ok(lib.get(id)?.clone())
}

async fn model(State(state): State<AppState>) -> Json<Value> {
    let describe = |b: &actpaint_core::ModelBundle| {
        let layers: Vec<Value> = b
            .layers()
            .iter()
            .map(|l| json!({ "name": l.name, "C": l.channels, "H": l.height, "W": l.width }))
            .collect();
        json!({
            "name": b.name(),
            "role": b.role(),
            "inputs": b.input_specs(),
            "output_shape": b.output_shape(),
            "layers": layers,
        })
    };
    let mut body = describe(&state.0.generator);
    body["extractor"] = state.0.extractor.as_deref().map_or(Value::Null, describe);
    Json(body)
}

#[derive(Deserialize)]
struct SessionRequest {
    seed: u64,
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<SessionRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = payload?;
    let generator = state.0.generator.clone();
    let (png, trace) = blocking(move || {
        let hooks: Vec<Hook> = generator.layer_names().map(Hook::capture).collect();
        let (image, trace) = generator.forward_seed(req.seed, &hooks)?;
        Ok((RgbImage::from_tensor(&image)?.encode_png()?, trace))
    })
    .await?;
    let id = state.new_session_id();
    let image = BASE64.encode(&png);
    state.insert_session(Session {
        id: id.clone(),
        seed: req.seed,
        baseline_png: png,
        trace,
        created: Instant::now(),
    });
    Ok(Json(json!({ "session_id": id, "seed": req.seed, "image": image })))
}

#[derive(Deserialize)]
struct ExtractRequest {
    session_id: String,
    layer: String,
    x: usize,
    y: usize,
    #[serde(default)]
    name: Option<String>,
}

async fn extract(
    State(state): State<AppState>,
    payload: Result<Json<ExtractRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = payload?;
    let session = state.session(&req.session_id)?;
    let session = session.lock().await;
    let layer = state.0.generator.layer(&req.layer)?;
    let mut vector = extract_vector(&session.trace, &layer, req.x, req.y)?;
    if let Some(name) = req.name.filter(|n| !n.is_empty()) {
        vector.name = name;
    }
    let id = vector.id.clone();
    state.update_library(|lib| lib.insert(vector.clone()))?;
    state.0.thumbnails.lock().expect("thumbnail cache poisoned").remove(&id);
    Ok(Json(json!({ "vector_id": id, "vector": vector })))
}

/// Grid-2 visualization of `vector` on the thumbnail seed, resized to 64×64.
fn thumbnail(state: &AppState, vector: &ActivationVector) -> ApiResult<String> {
    let generator = &state.0.generator;
    let layer = generator.layer(&vector.layer)?;
    let vis = visualize(
        generator,
        &layer,
        vector,
        GridSpec::new(2),
        Background::Original,
        state.config().thumbnail_seed,
    )?;
    let image = ops::resize_nearest(&vis.image, THUMBNAIL, THUMBNAIL)?;
    png_base64(&image)
}

async fn library(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let vectors = state.0.library.lock().expect("library poisoned").vectors.clone();
    let st = state.clone();
    let entries = blocking(move || {
        let mut out = Vec::with_capacity(vectors.len());
        for v in vectors {
            let cached = st.0.thumbnails.lock().expect("thumbnail cache poisoned").get(&v.id).cloned();
            let thumb = match cached {
                Some(t) => t,
                None => {
                    let t = thumbnail(&st, &v)?;
                    st.0.thumbnails
                        .lock()
                        .expect("thumbnail cache poisoned")
                        .insert(v.id.clone(), t.clone());
                    t
                }
            };
            out.push(json!({
                "id": v.id,
                "name": v.name,
                "layer": v.layer,
                "provenance": v.provenance,
                "channels": v.values.len(),
                "thumbnail": thumb,
            }));
        }
        Ok(out)
    })
    .await?;
    Ok(Json(json!({ "vectors": entries })))
}

#[derive(Deserialize)]
struct VisualizeRequest {
    vector_id: String,
    grid_size: usize,
    #[serde(default)]
    background: Background,
    #[serde(default)]
    seed: u64,
}

async fn visualize_vector(
    State(state): State<AppState>,
    payload: Result<Json<VisualizeRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = payload?;
    let vector = library_vector(&state, &req.vector_id)?;
    let generator = state.0.generator.clone();
    let image = blocking(move || {
        let layer = generator.layer(&vector.layer)?;
        let vis = visualize(&generator, &layer, &vector, GridSpec::new(req.grid_size), req.background, req.seed)?;
        png_base64(&vis.image)
    })
    .await?;
    Ok(Json(json!({ "image": image })))
}

/// Labels as a JSON grid of rows, or a base64 PNG plus its color legend.
#[derive(Deserialize)]
#[serde(untagged)]
enum LabelsInput {
    Grid(Vec<Vec<u32>>),
    Png {
        png: String,
        /// Label (as a decimal string key) to mask color.
        colors: BTreeMap<String, [u8; 3]>,
        #[serde(default = "keep_green")]
        keep: [u8; 3],
    },
}

fn keep_green() -> [u8; 3] {
    [0, 255, 0]
}

impl LabelsInput {
    fn decode(self) -> ApiResult<LabelGrid> {
        match self {
            LabelsInput::Grid(rows) => Ok(LabelGrid::from_rows(&rows)?),
            LabelsInput::Png { png, colors, keep } => {
                let bytes = BASE64
                    .decode(png.as_bytes())
                    .map_err(|e| ApiError::unprocessable("bad_labels", format!("labels.png is not base64: {e}")))?;
                let image = RgbImage::decode_png(&bytes)?;
                let palette = colors
                    .into_iter()
                    .map(|(label, c)| {
                        label.parse::<u32>().map(|l| (c, l)).map_err(|_| {
                            ApiError::unprocessable("bad_labels", format!("color key `{label}` is not a label number"))
                        })
                    })
                    .collect::<ApiResult<Vec<_>>>()?;
                Ok(palette_decode(&image, &palette, keep)?)
            }
        }
    }
}

#[derive(Deserialize)]
struct PaintRequest {
    session_id: String,
    layer: String,
    labels: LabelsInput,
    #[serde(default)]
    palette: BTreeMap<u32, String>,
}

async fn paint(
    State(state): State<AppState>,
    payload: Result<Json<PaintRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = payload?;
    let session = state.session(&req.session_id)?;
    // Held for the whole request: one writer per session.
    let session = session.lock().await;
    let layer = state.0.generator.layer(&req.layer)?;
    let labels = req.labels.decode()?;
    let labels = if (labels.height, labels.width) == (layer.height, layer.width) {
        labels
    } else {
        resample_labels(&labels, layer.height, layer.width)
    };
    let mut palette = BTreeMap::new();
    for (label, id) in &req.palette {
        if *label == 0 {
            return Err(ApiError::unprocessable("bad_labels", "label 0 is reserved for keep"));
        }
        palette.insert(*label, library_vector(&state, id)?);
    }
    let mask = InterventionMask { labels, palette };
    if let Some(other) = mask.layer_name()?.filter(|l| *l != layer.name) {
        return Err(actpaint_core::Error::MixedLayers {
            first: layer.name.clone(),
            second: other.to_string(),
        }
        .into());
    }
    let patch = mask.resolve::<f32>(&layer)?;
    let generator = state.0.generator.clone();
    let seed = session.seed;
    let image = blocking(move || {
        let (image, _) = generator.forward_seed(seed, &[Hook::paint(layer.name.clone(), patch)])?;
        png_base64(&image)
    })
    .await?;
    Ok(Json(json!({ "image": image })))
}

#[derive(Deserialize)]
struct ScanRequest {
    layer: String,
    feature_layer: String,
    grid_size: usize,
    samples: usize,
    #[serde(default)]
    seed: u64,
}

async fn scan(
    State(state): State<AppState>,
    payload: Result<Json<ScanRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = payload?;
    let Some(extractor) = state.0.extractor.clone() else {
        return Err(ApiError::unprocessable("no_extractor", "server was started without a feature extractor"));
    };
    if req.samples == 0 || req.samples > MAX_SCAN_SAMPLES {
        return Err(ApiError::unprocessable(
            "precondition",
            format!("samples must be within 1..={MAX_SCAN_SAMPLES}"),
        ));
    }
    let generator = state.0.generator.clone();
    // Validate layer names now so bad requests fail fast instead of as a job.
    Pipeline::new(&generator, &req.layer, &extractor, &req.feature_layer)?;
    let job = state.new_job();
    let st = state.clone();
    let job_id = job.clone();
    tokio::spawn(async move {
        let Ok(_permit) = st.0.scan_slots.clone().acquire_owned().await else {
            return;
        };
        st.set_job(&job_id, JobStatus::Running);
        let result = blocking(move || {
            let pipe = Pipeline::new(&generator, &req.layer, &extractor, &req.feature_layer)?;
            let out = tileability_scan(&pipe, req.samples, GridSpec::new(req.grid_size), req.seed)?;
            let strip = |samples: Vec<&actpaint_core::analysis::ScanSample>| -> ApiResult<String> {
                let grid = samples.iter().map(|s| s.grid.clone()).collect();
                let full = samples.iter().map(|s| s.full.clone()).collect();
                Ok(BASE64.encode(montage(&[grid, full], 2)?.encode_png()?))
            };
            Ok(json!({
                "layer": req.layer,
                "feature_layer": req.feature_layer,
                "grid_size": req.grid_size,
                "samples": req.samples,
                "seed": req.seed,
                "records": out.records().collect::<Vec<_>>(),
                "top4": strip(out.top(4))?,
                "bottom4": strip(out.bottom(4))?,
            }))
        })
        .await;
        let status = match result {
            Ok(report) => JobStatus::Done { report },
            Err(e) => JobStatus::Failed {
                error: json!({ "code": e.code, "message": e.message, "detail": e.detail }),
            },
        };
        st.set_job(&job_id, status);
    });
    Ok(Json(json!({ "job_id": job })))
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let status = state.job(&id)?;
    let mut body = serde_json::to_value(status).map_err(|e| ApiError::internal(e.to_string()))?;
    body["job_id"] = json!(id);
    Ok(Json(body))
}
