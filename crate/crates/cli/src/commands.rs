use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Value};

use actpaint_core::analysis::{
    grid_size_sweep, invert, tileability_scan, visualize, write_scan_report, write_sweep_report, FeatureTarget,
    InversionSpec, Pipeline, SweepSpec, TargetMode,
};
use actpaint_core::image::{montage, RgbImage};
use actpaint_core::intervention::{palette_decode, resample_labels, InterventionMask, LabelGrid};
use actpaint_core::{GridSpec, Hook, ModelBundle, VectorLibrary};
use actpaint_service::{AppState, ServiceConfig};

use crate::args::*;
use crate::resolve::{self, PaletteFile};
use crate::CliError;

/// How generator output reaches an extractor with a different input size.
const EXTRACTOR_RESIZE: &str = "nearest";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))
}

fn config_value(command: &Command) -> Value {
    let mut v = serde_json::to_value(command).expect("flags serialize");
    if matches!(command, Command::Scan(_) | Command::Sweep(_) | Command::Invert(_)) {
        v["extractor_resize"] = json!(EXTRACTOR_RESIZE);
    }
    v
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(actpaint_core::Error::from)?;
    text.push('\n');
    write(path, text.as_bytes())
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("actpaint: {}", msg.as_ref());
}

pub fn run(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Generate(a) => generate(command, a),
        Command::Visualize(a) => visualize_grids(command, a),
        Command::Scan(a) => scan(command, a),
        Command::Sweep(a) => sweep(command, a),
        Command::Invert(a) => invert_target(command, a),
        Command::Paint(a) => paint(command, a),
        Command::Serve(a) => serve(a),
    }
}

fn generate(command: &Command, a: &GenerateArgs) -> Result<(), CliError> {
    let gen = resolve::load_bundle(&a.models.generator)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("config.json"), &config_value(command))?;
    for &seed in &a.seeds {
        let (image, _) = gen.forward_seed(seed, &[])?;
        write(&a.out.join(format!("seed_{seed}.png")), &RgbImage::from_tensor(&image)?.encode_png()?)?;
        progress(format!("generated seed {seed}"));
    }
    Ok(())
}

fn grid_label(g: usize) -> String {
    if g == 0 {
        "full".into()
    } else {
        format!("grid{g}")
    }
}

fn visualize_grids(command: &Command, a: &VisualizeArgs) -> Result<(), CliError> {
    let gen = resolve::load_bundle(&a.models.generator)?;
    let vector = resolve::vector(&a.vector, &gen, Path::new("."))?;
    let layer = gen.layer(&vector.layer).map_err(CliError::invalid)?;
    vector.check_layer(&layer).map_err(CliError::invalid)?;
    if a.grids.is_empty() {
        return Err(CliError::Usage("--grids needs at least one size".into()));
    }
    prepare_out(&a.out)?;
    write_json(&a.out.join("config.json"), &config_value(command))?;
    let mut row = Vec::new();
    for (i, &g) in a.grids.iter().enumerate() {
        let vis = visualize(&gen, &layer, &vector, GridSpec::new(g), a.background, a.seed)?;
        let img = RgbImage::from_tensor(&vis.image)?;
        write(&a.out.join(format!("{i:02}_{}.png", grid_label(g))), &img.encode_png()?)?;
        row.push(img);
        progress(format!("rendered {}", grid_label(g)));
    }
    write(&a.out.join("strip.png"), &montage(&[row], 2)?.encode_png()?)
}

fn pipeline_bundles(a: &Analysis) -> Result<(ModelBundle, ModelBundle), CliError> {
    let gen = resolve::load_bundle(&a.generator)?;
    let fx = resolve::load_bundle(&a.extractor)?;
    Pipeline::new(&gen, &a.layer, &fx, &a.feature_layer).map_err(CliError::invalid)?;
    Ok((gen, fx))
}

fn scan(command: &Command, a: &ScanArgs) -> Result<(), CliError> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let (gen, fx) = pipeline_bundles(&a.analysis)?;
    let pipe = Pipeline::new(&gen, &a.analysis.layer, &fx, &a.analysis.feature_layer)?;
    progress(format!("scanning {} samples at grid {}", a.samples, a.grid));
    let out = tileability_scan(&pipe, a.samples, GridSpec::new(a.grid), a.seed)?;
    let files = write_scan_report(&a.out, &config_value(command), &out)?;
    progress(format!("wrote {} files to {}", files.files.len(), a.out.display()));
    Ok(())
}

fn sweep(command: &Command, a: &SweepArgs) -> Result<(), CliError> {
    let (gen, fx) = pipeline_bundles(&a.analysis)?;
    let pipe = Pipeline::new(&gen, &a.analysis.layer, &fx, &a.analysis.feature_layer)?;
    let spec = SweepSpec {
        sizes: a.sizes.clone(),
        targets: a.targets,
        repeats: a.repeats,
        steps: a.steps,
        step_size: a.step_size,
        seed: a.seed,
        target_mode: a.target_mode,
    };
    if spec.sizes.is_empty() || spec.targets == 0 || spec.repeats == 0 || spec.steps == 0 {
        return Err(CliError::Usage("sizes, targets, repeats and steps must be non-empty/positive".into()));
    }
    progress(format!(
        "sweeping {} sizes x {} targets x {} repeats",
        spec.sizes.len(),
        spec.targets,
        spec.repeats
    ));
    let out = grid_size_sweep(&pipe, &spec)?;
    write_sweep_report(&a.out, &config_value(command), &out)?;
    println!("{}", serde_json::to_string_pretty(&out.summary()).map_err(actpaint_core::Error::from)?);
    Ok(())
}

fn invert_target(command: &Command, a: &InvertArgs) -> Result<(), CliError> {
    let (gen, fx) = pipeline_bundles(&a.analysis)?;
    let pipe = Pipeline::new(&gen, &a.analysis.layer, &fx, &a.analysis.feature_layer)?;
    let target = match a.target_mode {
        TargetMode::SpatialMean => FeatureTarget::SpatialMean { seed: a.target_seed },
        TargetMode::RandomPixel => FeatureTarget::RandomPixel { seed: a.target_seed },
    };
    let target = target.resolve(&pipe)?;
    let spec = InversionSpec {
        target: target.clone(),
        grid_size: a.grid,
        steps: a.steps,
        step_size: a.step_size,
        seed: a.seed,
        init: None,
    };
    if a.steps == 0 || a.step_size.is_nan() || a.step_size <= 0.0 {
        return Err(CliError::Usage("--steps must be at least 1 and --step-size positive".into()));
    }
    prepare_out(&a.out)?;
    let config = config_value(command);
    write_json(&a.out.join("config.json"), &config)?;
    progress(format!("inverting grid {} for {} steps", a.grid, a.steps));
    let result = invert(&pipe, &spec)?;

    let layer = &pipe.layer_x;
    let mask = GridSpec::new(a.grid).mask(layer.height, layer.width);
    let labels = LabelGrid::new(
        layer.height,
        layer.width,
        mask.iter().map(|&m| if m || a.grid == 0 { 1 } else { 2 }).collect(),
    )?;
    let palette = BTreeMap::from([(1, result.v1.clone()), (2, result.v2.clone())]);
    let patch = InterventionMask { labels, palette }.resolve::<f32>(layer)?;
    let (image, _) = gen.forward_seed(a.seed, &[Hook::paint(&layer.name, patch)])?;
    write(&a.out.join("reconstruction.png"), &RgbImage::from_tensor(&image)?.encode_png()?)?;
    let (target_image, _) = gen.forward_seed(a.target_seed, &[])?;
    write(&a.out.join("target.png"), &RgbImage::from_tensor(&target_image)?.encode_png()?)?;

    let mut curve = String::from("step,loss\n");
    for (i, l) in result.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    write(&a.out.join("loss.csv"), curve.as_bytes())?;
    write_json(&a.out.join("report.json"), &json!({ "config": config, "target": target, "result": result }))?;

    if let Some(path) = &a.library {
        let mut lib = if path.exists() { VectorLibrary::load(path)? } else { VectorLibrary::default() };
        lib.insert(result.v1.clone());
        if a.grid > 0 {
            lib.insert(result.v2.clone());
        }
        lib.save(path)?;
    }
    progress(format!(
        "best loss {:.5} at step {}, reconstruction cosine {:.4}",
        result.best_loss, result.best_step, result.reconstruction_cosine
    ));
    Ok(())
}

fn paint(command: &Command, a: &PaintArgs) -> Result<(), CliError> {
    let gen = resolve::load_bundle(&a.models.generator)?;
    let layer = gen.layer(&a.layer).map_err(CliError::invalid)?;
    let palette_file = PaletteFile::load(&a.palette)?;
    let base = a.palette.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let mask_image = RgbImage::load_png(&a.mask).map_err(CliError::invalid)?;
    let colors: Vec<_> = palette_file.entries.iter().map(|e| (e.color, e.label)).collect();
    let labels = palette_decode(&mask_image, &colors, palette_file.keep).map_err(CliError::invalid)?;
    let labels = resample_labels(&labels, layer.height, layer.width);
    let mut palette = BTreeMap::new();
    for entry in &palette_file.entries {
        palette.insert(entry.label, resolve::vector(&entry.vector, &gen, &base)?);
    }
    let mask = InterventionMask { labels, palette };
    let patch = mask.resolve::<f32>(&layer).map_err(CliError::invalid)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join("config.json"), &config_value(command))?;
    write_json(&a.out.join("labels.json"), &mask.labels.rows())?;
    for &seed in &a.seeds {
        let (image, _) = gen.forward_seed(seed, &[Hook::paint(&layer.name, patch.clone())])?;
        write(&a.out.join(format!("seed_{seed}.png")), &RgbImage::from_tensor(&image)?.encode_png()?)?;
        progress(format!("painted seed {seed}"));
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let gen = resolve::load_bundle(&a.models.generator)?;
    let fx = match a.extractor.as_str() {
        "none" => None,
        name => Some(resolve::load_bundle(name)?),
    };
    let addr: SocketAddr = format!("{}:{}", a.bind, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad --bind/--port: {e}")))?;
    let config = ServiceConfig {
        session_timeout: Duration::from_secs(a.session_timeout),
        max_concurrent_scans: a.max_scans.max(1),
        library_path: a.library.clone(),
        ui_dir: a.ui_dir.clone(),
        cors_origin: a.cors_origin.clone(),
        ..ServiceConfig::default()
    };
    let state = AppState::new(gen, fx, config).map_err(CliError::invalid)?;
    let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("<runtime>")))?;
    progress(format!("listening on http://{addr}"));
    runtime
        .block_on(actpaint_service::serve(addr, state))
        .map_err(io_err(Path::new("<listener>")))
}
