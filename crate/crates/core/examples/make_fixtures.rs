//! Regenerates the committed fixture bundles.
//!
//! Usage: `cargo run -p actpaint-core --example make_fixtures [OUT_DIR]`
//! (defaults to `crates/core/fixtures`). Output is deterministic.

use std::path::PathBuf;

use actpaint_core::bundle::{BundleBuilder, InputKind, OpSpec, Role};
use actpaint_core::ops::{Activation, Padding, PaddingMode};
use actpaint_core::rng::{derive_seed, sample_noise};
use actpaint_core::{ModelBundle, Result, Tensor};

const LEAK: Activation = Activation::LeakyRelu { alpha: 0.2 };

struct Recipe {
    builder: BundleBuilder,
    seed: u64,
    stream: u64,
    mode: PaddingMode,
}

impl Recipe {
    fn new(name: &str, role: Role, seed: u64, mode: PaddingMode) -> Self {
        Self {
            builder: BundleBuilder::new(name, role),
            seed,
            stream: 0,
            mode,
        }
    }

    fn gaussian(&mut self, shape: &[usize], std: f64, mean: f64) -> Tensor {
        self.stream += 1;
        let t: Tensor = sample_noise(derive_seed(self.seed, self.stream), shape).expect("finite noise");
        t.map(|v| (mean + std * v as f64) as f32)
    }

    fn pad(&self, width: usize) -> Padding {
        Padding { width, mode: self.mode }
    }

    fn weight(&mut self, name: &str, shape: &[usize], gain: f64, fan_in: usize) -> String {
        let t = self.gaussian(shape, gain / (fan_in as f64).sqrt(), 0.0);
        self.builder.weight(name, t)
    }

    fn bias(&mut self, name: &str, n: usize) -> String {
        let t = self.gaussian(&[n], 0.05, 0.0);
        self.builder.weight(name, t)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, x: usize, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> usize {
        self.conv_gain(x, name, [cin, cout, k, stride, pad], bias, 2f64.sqrt())
    }

    fn conv_gain(&mut self, x: usize, name: &str, [cin, cout, k, stride, pad]: [usize; 5], bias: bool, gain: f64) -> usize {
        let weight = self.weight(&format!("{name}.weight"), &[cout, cin, k, k], gain, cin * k * k);
        let bias = bias.then(|| self.bias(&format!("{name}.bias"), cout));
        let padding = self.pad(pad);
        self.builder.node(
            OpSpec::Conv2d {
                weight,
                bias,
                stride,
                padding,
            },
            &[x],
            Some(name),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t(&mut self, x: usize, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> usize {
        // Each output pixel of a stride-s transposed conv sees (k/s)^2 taps per channel.
        let fan_in = cin * (k / stride).pow(2);
        let weight = self.weight(&format!("{name}.weight"), &[cin, cout, k, k], 2f64.sqrt(), fan_in);
        let padding = self.pad(pad);
        self.builder.node(
            OpSpec::ConvTranspose2d {
                weight,
                bias: None,
                stride,
                padding,
            },
            &[x],
            Some(name),
        )
    }

    /// Frozen per-channel normalization followed by a leaky ReLU.
    fn norm_act(&mut self, x: usize, name: &str, c: usize) -> usize {
        self.norm_then(x, name, c, LEAK)
    }

    fn norm_then(&mut self, x: usize, name: &str, c: usize, activation: Activation) -> usize {
        let scale = self.gaussian(&[c], 0.1, 1.0);
        let shift = self.gaussian(&[c], 0.1, 0.0);
        let scale = self.builder.weight(&format!("{name}.norm.scale"), scale);
        let shift = self.builder.weight(&format!("{name}.norm.shift"), shift);
        let y = self.builder.node(OpSpec::AffineChannel { scale, shift }, &[x], None);
        self.act(y, activation)
    }

    fn act(&mut self, x: usize, activation: Activation) -> usize {
        self.builder.node(OpSpec::Activation { activation }, &[x], None)
    }

    fn upsample(&mut self, x: usize) -> usize {
        self.builder.node(OpSpec::UpsampleNearest { factor: 2 }, &[x], None)
    }
}

fn toy_generator(name: &str, mode: PaddingMode) -> Result<ModelBundle> {
    let mut r = Recipe::new(name, Role::Generator, 42, mode);
    let table = r.gaussian(&[6, 4], 1.0, 0.0);
    r.builder.conditions(table);
    let z = r.builder.input("z", &[1, 16, 8, 8], InputKind::Noise);
    let class = r.builder.input("class", &[1, 4], InputKind::Condition);

    let x = r.conv(z, "stem", 16, 32, 3, 2, 1, true);
    let x = r.norm_act(x, "stem", 32);
    let c = r
        .builder
        .node(OpSpec::ReplicateSpatial { height: 4, width: 4 }, &[class], None);
    let x = r.builder.node(OpSpec::ConcatChannels, &[x, c], None);
    let x = r.upsample(x);
    let x = r.conv(x, "up1.conv1", 36, 32, 3, 1, 1, false);
    let x = r.norm_act(x, "up1", 32);
    let x = r.upsample(x);
    let x = r.conv(x, "up2.conv1", 32, 16, 3, 1, 1, false);
    // Smooth activations downstream of the probed 16x16 layer keep the
    // inversion loss differentiable for finite-difference checks.
    let x = r.norm_then(x, "up2", 16, Activation::Tanh);
    let x = r.conv_t(x, "up3.conv1", 16, 8, 4, 2, 1);
    let x = r.norm_then(x, "up3", 8, Activation::Tanh);
    let x = r.conv_t(x, "up4.conv1", 8, 4, 2, 2, 0);
    let x = r.act(x, Activation::Tanh);
    let x = r.conv_gain(x, "to_rgb", [4, 3, 1, 1, 0], true, 0.6);
    let out = r.act(x, Activation::Tanh);
    r.builder.build(out)
}

fn toy_extractor() -> Result<ModelBundle> {
    let mut r = Recipe::new("toyfx-v1", Role::FeatureExtractor, 7, PaddingMode::Circular);
    let mut x = r.builder.input("image", &[1, 3, 64, 64], InputKind::Image);
    let mut cin = 3;
    for (i, cout) in [8, 16, 32].into_iter().enumerate() {
        let name = format!("stage{}", i + 1);
        x = r.conv(x, &name, cin, cout, 3, 2, 1, true);
        x = r.norm_then(x, &name, cout, Activation::Tanh);
        cin = cout;
    }
    r.builder.build(x)
}

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    let bundles = [
        toy_generator("toygen-v1", PaddingMode::Circular)?,
        toy_generator("toygen-zeropad-v1", PaddingMode::Zeros)?,
        toy_extractor()?,
    ];
    for b in &bundles {
        let dir = out.join(b.name());
        b.save(&dir)?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}
