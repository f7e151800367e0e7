//! Synthetic visual imitation task.
//!
//! A scene is a textured square on a textured background under a per-channel
//! tint; the "action" to imitate is the square's center. A ridge regressor on
//! normalized pixels plays the policy. Texture and tint pools are split so
//! that test scenes show appearances never seen in training, and the
//! robustness experiment compares training on original images with training
//! on partially inverted ones while always testing on originals.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::neumaier_sum;
use crate::codec::save_latent_as_image;
use crate::error::{Error, Result};
use crate::inversion::{stem_preprocess, InversionConfig, InversionMethod};
use crate::latent::Latent;
use crate::noise::{uniforms, NoiseKey};
use crate::pipeline::{stream_id_for, DatasetManifest, Record, Split, MANIFEST_FILE};
use crate::schedule::{NoiseSchedule, ScheduleKind};

/// Valid range of square centers along each axis.
pub const CENTER_MIN: f64 = 0.1;
pub const CENTER_MAX: f64 = 0.9;
pub const TINT_MIN: f64 = 0.6;
pub const TINT_MAX: f64 = 1.4;
pub const DEFAULT_RADIUS: f64 = 0.05;

const TEXTURE_SEED: u64 = 0x7465_7874_7572_6573;
const TEXTURE_COMPONENTS: usize = 4;
const MAX_FREQUENCY: f64 = 6.0;
const SCENE_STEP: u32 = 0x5343_454e;
const CATEGORY_STEP: u32 = 0x4341_5447;

/// Intensity levels in `[0, 1]` before tinting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub background: f64,
    pub foreground: f64,
    pub texture_amplitude: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            background: 0.3,
            foreground: 0.7,
            texture_amplitude: 0.3,
        }
    }
}

/// A sum of plane waves keyed by id. Id 0 is flat.
#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<([f64; 3], f64, f64, f64)>,
}

impl Texture {
    fn new(id: u32) -> Self {
        if id == 0 {
            return Self { waves: Vec::new() };
        }
        let u: Vec<f64> = uniforms(NoiseKey::new(TEXTURE_SEED, id as u64, 0))
            .take(TEXTURE_COMPONENTS * 6)
            .collect();
        let waves = u
            .chunks_exact(6)
            .map(|c| {
                let freq = |v: f64| (v * (2.0 * MAX_FREQUENCY + 1.0)).floor() - MAX_FREQUENCY;
                let amp = [0.5 + 0.5 * c[0], 0.5 + 0.5 * c[1], 0.5 + 0.5 * c[2]];
                let fx = freq(c[3]);
                let fy = if fx == 0.0 { 1.0 + (c[4] * MAX_FREQUENCY).floor() } else { freq(c[4]) };
                (amp, fx, fy, TAU * c[5])
            })
            .collect();
        Self { waves }
    }

    /// Roughly in `[-1, 1]`.
    fn value(&self, c: usize, u: f64, v: f64) -> f64 {
        if self.waves.is_empty() {
            return 0.0;
        }
        let s: f64 = self
            .waves
            .iter()
            .map(|(a, fx, fy, ph)| a[c] * (TAU * (fx * u + fy * v) + ph).sin())
            .sum();
        s / TEXTURE_COMPONENTS as f64
    }
}

fn check_tint(tint: [f64; 3]) -> Result<()> {
    if tint.iter().any(|t| !(TINT_MIN..=TINT_MAX).contains(t)) {
        return Err(Error::Config(format!(
            "tint {tint:?} outside [{TINT_MIN}, {TINT_MAX}]"
        )));
    }
    Ok(())
}

/// Renders `3 x size x size` from a per-pixel foreground mask.
fn render_masked(
    size: usize,
    fg_texture: u32,
    bg_texture: u32,
    tint: [f64; 3],
    style: &RenderStyle,
    inside: impl Fn(usize, usize) -> bool,
) -> Result<Latent> {
    let fg = Texture::new(fg_texture);
    let bg = Texture::new(bg_texture);
    let mut data = Vec::with_capacity(3 * size * size);
    for (c, &k) in tint.iter().enumerate() {
        for y in 0..size {
            let v = (y as f64 + 0.5) / size as f64;
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64;
                let i = if inside(x, y) {
                    style.foreground + style.texture_amplitude * fg.value(c, u, v)
                } else {
                    style.background + style.texture_amplitude * bg.value(c, u, v)
                };
                data.push(2.0 * (k * i).clamp(0.0, 1.0) - 1.0);
            }
        }
    }
    Latent::from_f64(vec![3, size, size], &data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub px: f64,
    pub py: f64,
    pub fg_texture: u32,
    pub bg_texture: u32,
    pub tint: [f64; 3],
}

/// Side length of the square in pixels.
pub fn square_side(size: usize) -> usize {
    (size / 5).max(1)
}

/// `(left, top, side)` of the square, or an error when it would leave the image.
pub fn square_bounds(params: &SceneParams, size: usize) -> Result<(usize, usize, usize)> {
    let side = square_side(size);
    let edge = |p: f64| (p * size as f64 - side as f64 / 2.0).round();
    let (l, t) = (edge(params.px), edge(params.py));
    let fits = |e: f64| e >= 0.0 && e + side as f64 <= size as f64;
    if !(params.px.is_finite() && params.py.is_finite() && fits(l) && fits(t)) {
        return Err(Error::InvalidRange(format!(
            "square at ({}, {}) does not fit a {size}x{size} image",
            params.px, params.py
        )));
    }
    Ok((l as usize, t as usize, side))
}

pub fn render_scene(params: &SceneParams, size: usize, style: &RenderStyle) -> Result<Latent> {
    check_tint(params.tint)?;
    let (l, t, side) = square_bounds(params, size)?;
    render_masked(size, params.fg_texture, params.bg_texture, params.tint, style, |x, y| {
        (l..l + side).contains(&x) && (t..t + side).contains(&y)
    })
}

/// Train-only and test-only members of a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Pool<T> {
    fn members(&self, split: Split) -> &[T] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn default_textures() -> Pool<u32> {
    Pool {
        train: vec![1, 2, 3],
        test: (4..=11).collect(),
    }
}

fn default_tints() -> Pool<[f64; 3]> {
    Pool {
        train: vec![[1.0, 1.0, 1.0], [1.05, 1.0, 0.95]],
        test: vec![
            [1.3, 1.1, 0.8],
            [0.8, 0.95, 1.3],
            [0.7, 0.7, 0.7],
            [1.25, 1.25, 1.25],
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub textures: Pool<u32>,
    pub tints: Pool<[f64; 3]>,
    pub style: RenderStyle,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 200,
            size: 32,
            textures: default_textures(),
            tints: default_tints(),
            style: RenderStyle::default(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_test == 0 {
            return Err(Error::Config("dataset must contain at least one scene".into()));
        }
        if self.size < 5 {
            return Err(Error::Config(format!("image size {} is below 5", self.size)));
        }
        for (split, n) in [(Split::Train, self.n_train), (Split::Test, self.n_test)] {
            if n > 0 && (self.textures.members(split).is_empty() || self.tints.members(split).is_empty()) {
                return Err(Error::Empty(format!("{split:?} texture or tint pool is empty")));
            }
        }
        for t in self.tints.train.iter().chain(&self.tints.test) {
            check_tint(*t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub split: Split,
    pub params: SceneParams,
}

fn pick<T: Copy>(pool: &[T], u: f64) -> T {
    pool[((u * pool.len() as f64) as usize).min(pool.len() - 1)]
}

/// Scene parameters: `n_train` scenes from the train pools followed by
/// `n_test` from the test pools, positions uniform over the valid region.
pub fn generate_scenes(config: &GeneratorConfig) -> Result<Vec<Scene>> {
    config.validate()?;
    let mut scenes = Vec::with_capacity(config.n_train + config.n_test);
    for (split, n, tag) in [(Split::Train, config.n_train, 0u64), (Split::Test, config.n_test, 1)] {
        for i in 0..n {
            let u: Vec<f64> = uniforms(NoiseKey::new(config.seed, (tag << 32) | i as u64, SCENE_STEP))
                .take(5)
                .collect();
            let span = CENTER_MAX - CENTER_MIN;
            let params = SceneParams {
                px: CENTER_MIN + span * u[0],
                py: CENTER_MIN + span * u[1],
                fg_texture: pick(config.textures.members(split), u[2]),
                bg_texture: pick(config.textures.members(split), u[3]),
                tint: pick(config.tints.members(split), u[4]),
            };
            let prefix = if split == Split::Train { "train" } else { "test" };
            scenes.push(Scene {
                id: format!("{prefix}-{i:05}"),
                split,
                params,
            });
        }
    }
    Ok(scenes)
}

/// A rendered image with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Latent,
    pub label: Vec<f64>,
}

pub fn render_samples(scenes: &[Scene], size: usize, style: &RenderStyle) -> Result<Vec<Sample>> {
    scenes
        .par_iter()
        .map(|s| {
            Ok(Sample {
                id: s.id.clone(),
                image: render_scene(&s.params, size, style)?,
                label: vec![s.params.px, s.params.py],
            })
        })
        .collect()
}

/// Renders the scenes as PNG files into `dir` and writes a manifest with
/// labels `(px, py)`.
pub fn generate_dataset(config: &GeneratorConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes = generate_scenes(config)?;
    let records = scenes
        .par_iter()
        .map(|s| {
            let name = format!("{}.png", s.id);
            save_latent_as_image(&render_scene(&s.params, config.size, &config.style)?, dir.join(&name))?;
            let mut r = Record::new(s.id.clone(), name, s.split);
            r.label = Some(vec![s.params.px, s.params.py]);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(dir, records)?;
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Shapes of the category set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Square, Shape::Disk, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disk => "disk",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Membership for offsets from the image center, in units of the image side.
    fn contains(self, dx: f64, dy: f64) -> bool {
        const H: f64 = 0.3;
        let r2 = dx * dx + dy * dy;
        match self {
            Shape::Square => dx.abs() <= H && dy.abs() <= H,
            Shape::Disk => r2 <= H * H,
            Shape::Triangle => dy.abs() <= H && dx.abs() <= (dy + H) / 2.0,
            Shape::Cross => {
                (dx.abs() <= H / 3.0 && dy.abs() <= H) || (dy.abs() <= H / 3.0 && dx.abs() <= H)
            }
            Shape::Ring => r2 <= H * H && r2 >= H * H / 4.0,
        }
    }
}

/// Same shape within a category; texture and tint vary per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CategoryConfig {
    pub per_category: usize,
    pub size: usize,
    pub seed: u64,
    pub style: RenderStyle,
    /// Textures are drawn from `1..=texture_count`.
    pub texture_count: u32,
    /// Per-channel tint range.
    pub tint_range: (f64, f64),
}

impl Default for CategoryConfig {
    fn default() -> Self {
        Self {
            per_category: 8,
            size: 32,
            seed: 0,
            style: RenderStyle {
                background: 0.1,
                foreground: 0.8,
                texture_amplitude: 0.05,
            },
            texture_count: 64,
            tint_range: (0.9, 1.1),
        }
    }
}

pub fn render_shape(
    shape: Shape,
    size: usize,
    fg_texture: u32,
    bg_texture: u32,
    tint: [f64; 3],
    style: &RenderStyle,
) -> Result<Latent> {
    check_tint(tint)?;
    render_masked(size, fg_texture, bg_texture, tint, style, |x, y| {
        let c = |p: usize| (p as f64 + 0.5) / size as f64 - 0.5;
        shape.contains(c(x), c(y))
    })
}

/// `(category, image)` pairs, categories in [`Shape::ALL`] order.
pub fn category_set(config: &CategoryConfig) -> Result<Vec<(String, Latent)>> {
    if config.per_category == 0 || config.texture_count == 0 {
        return Err(Error::Config("category set needs images and textures".into()));
    }
    let (lo, hi) = config.tint_range;
    let jobs: Vec<(Shape, usize)> = Shape::ALL
        .iter()
        .flat_map(|&s| (0..config.per_category).map(move |i| (s, i)))
        .collect();
    jobs.par_iter()
        .map(|&(shape, i)| {
            let stream = ((shape as u64) << 32) | i as u64;
            let u: Vec<f64> = uniforms(NoiseKey::new(config.seed, stream, CATEGORY_STEP)).take(5).collect();
            let tex = |v: f64| 1 + ((v * config.texture_count as f64) as u32).min(config.texture_count - 1);
            let tint = [u[2], u[3], u[4]].map(|v| lo + (hi - lo) * v);
            let img = render_shape(shape, config.size, tex(u[0]), tex(u[1]), tint, &config.style)?;
            Ok((shape.name().to_string(), img))
        })
        .collect()
}

/// Writes the category set as PNGs plus a manifest with categories.
pub fn write_category_set(config: &CategoryConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let set = category_set(config)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(set.len());
    for (cat, img) in &set {
        let k = counts.entry(cat).or_default();
        let id = format!("{cat}-{k:02}");
        *k += 1;
        let name = format!("{id}.png");
        save_latent_as_image(img, dir.join(&name))?;
        let mut r = Record::new(id, name, Split::Train);
        r.category = Some(cat.clone());
        records.push(r);
    }
    let manifest = DatasetManifest::new(dir, records)?;
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Linear map from normalized pixels to labels.
///
/// Features are each image standardized to zero mean and unit variance, then
/// standardized per feature with statistics frozen at fit time.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    shape: Vec<usize>,
    label_dim: usize,
    /// Row-major `label_dim x feature_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    lambda: f64,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
}

fn image_features(x: &Latent) -> Result<Vec<f64>> {
    let v = x.to_f64();
    let n = v.len() as f64;
    let mean = neumaier_sum(v.iter().copied()) / n;
    let var = neumaier_sum(v.iter().map(|a| (a - mean) * (a - mean))) / n;
    if !(var > 0.0) {
        return Err(Error::Degenerate("constant image has no features".into()));
    }
    let s = var.sqrt();
    Ok(v.into_iter().map(|a| (a - mean) / s).collect())
}

impl RegressorModel {
    /// Always predicts `bias`.
    pub fn constant(shape: Vec<usize>, bias: Vec<f64>) -> Self {
        let d: usize = shape.iter().product();
        Self {
            label_dim: bias.len(),
            weights: vec![0.0; bias.len() * d],
            shape,
            bias,
            lambda: 0.0,
            feature_mean: vec![0.0; d],
            feature_scale: vec![1.0; d],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn feature_mean(&self) -> &[f64] {
        &self.feature_mean
    }

    pub fn feature_scale(&self) -> &[f64] {
        &self.feature_scale
    }

    /// Frobenius norm of the weights.
    pub fn weight_norm(&self) -> f64 {
        neumaier_sum(self.weights.iter().map(|w| w * w)).sqrt()
    }

    fn normalized(&self, x: &Latent) -> Result<Vec<f64>> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        let mut f = image_features(x)?;
        for ((v, m), s) in f.iter_mut().zip(&self.feature_mean).zip(&self.feature_scale) {
            *v = (*v - m) / s;
        }
        Ok(f)
    }

    pub fn predict(&self, x: &Latent) -> Result<Vec<f64>> {
        let z = self.normalized(x)?;
        let d = self.feature_dim();
        Ok((0..self.label_dim)
            .map(|k| {
                let w = &self.weights[k * d..(k + 1) * d];
                self.bias[k] + w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }
}

/// Closed-form ridge regression, `min |Z W - Yc|^2 + lambda |W|^2`, solved in
/// the primal when features do not outnumber samples and in the dual otherwise.
pub fn fit_regressor(images: &[&Latent], labels: &[&[f64]], lambda: f64) -> Result<RegressorModel> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge strength must be positive, got {lambda}")));
    }
    let n = images.len();
    if n < 2 {
        return Err(Error::Empty(format!("need at least 2 samples, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    let k = labels[0].len();
    if k == 0 || labels.iter().any(|l| l.len() != k) {
        return Err(Error::Config("labels must share a nonzero dimension".into()));
    }
    for x in &images[1..] {
        images[0].ensure_same_shape(x)?;
    }
    let feats = images
        .par_iter()
        .map(|x| image_features(x))
        .collect::<Result<Vec<_>>>()?;
    let d = feats[0].len();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for j in 0..d {
        let m = neumaier_sum(feats.iter().map(|f| f[j])) / n as f64;
        let var = neumaier_sum(feats.iter().map(|f| (f[j] - m) * (f[j] - m))) / n as f64;
        mean[j] = m;
        scale[j] = var.sqrt();
    }
    if scale.iter().all(|&s| s == 0.0) {
        return Err(Error::Degenerate("all features are identical across samples".into()));
    }
    for s in &mut scale {
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let z = DMatrix::from_fn(n, d, |i, j| (feats[i][j] - mean[j]) / scale[j]);
    let bias: Vec<f64> = (0..k)
        .map(|c| neumaier_sum(labels.iter().map(|l| l[c])) / n as f64)
        .collect();
    let yc = DMatrix::from_fn(n, k, |i, c| labels[i][c] - bias[c]);
    let singular = || Error::Degenerate("ridge system is not positive definite".into());
    let w = if d <= n {
        let gram = z.transpose() * &z + DMatrix::identity(d, d) * lambda;
        gram.cholesky().ok_or_else(singular)?.solve(&(z.transpose() * &yc))
    } else {
        let gram = &z * z.transpose() + DMatrix::identity(n, n) * lambda;
        let alpha = gram.cholesky().ok_or_else(singular)?.solve(&yc);
        z.transpose() * alpha
    };
    let mut weights: Vec<f64> = Vec::with_capacity(k * d);
    for c in 0..k {
        weights.extend(w.column(c).iter().copied());
    }
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("ridge solution is not finite".into()));
    }
    Ok(RegressorModel {
        shape: images[0].shape().to_vec(),
        label_dim: k,
        weights,
        bias,
        lambda,
        feature_mean: mean,
        feature_scale: scale,
    })
}

pub fn fit_samples(samples: &[Sample], lambda: f64) -> Result<RegressorModel> {
    let images: Vec<&Latent> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<&[f64]> = samples.iter().map(|s| s.label.as_slice()).collect();
    fit_regressor(&images, &labels, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean squared Euclidean error.
    pub mse: f64,
    /// Fraction of predictions within the success radius.
    pub success_rate: f64,
}

pub fn evaluate(model: &RegressorModel, samples: &[Sample], radius: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    if !(radius >= 0.0) {
        return Err(Error::Config(format!("success radius must be nonnegative, got {radius}")));
    }
    let errs = samples
        .par_iter()
        .map(|s| {
            let p = model.predict(&s.image)?;
            if p.len() != s.label.len() {
                return Err(Error::LengthMismatch {
                    expected: p.len(),
                    actual: s.label.len(),
                });
            }
            Ok(p.iter().zip(&s.label).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = errs.len() as f64;
    Ok(EvalReport {
        mse: neumaier_sum(errs.iter().copied()) / n,
        success_rate: errs.iter().filter(|&&e| e.sqrt() <= radius).count() as f64 / n,
    })
}

/// Loads the labeled records of a manifest as samples.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest
        .records()
        .par_iter()
        .map(|r| {
            let label = r
                .label
                .clone()
                .ok_or_else(|| Error::Manifest(format!("record `{}` has no label", r.id)))?;
            Ok(Sample {
                id: r.id.clone(),
                image: manifest.load_latent(r)?,
                label,
            })
        })
        .collect()
}

pub fn fit_regressor_manifest(manifest: &DatasetManifest, lambda: f64) -> Result<RegressorModel> {
    fit_samples(&load_samples(manifest)?, lambda)
}

pub fn evaluate_manifest(model: &RegressorModel, manifest: &DatasetManifest, radius: f64) -> Result<EvalReport> {
    evaluate(model, &load_samples(manifest)?, radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// `(t_stop, T)` for each inverted arm.
    pub arms: Vec<(usize, usize)>,
    pub schedule: ScheduleKind,
    pub method: InversionMethod,
    pub size: usize,
    pub n_train: usize,
    /// Fresh in-distribution scenes for the train-distribution evaluation.
    pub n_eval: usize,
    /// Held-out-appearance scenes for the generalization evaluation.
    pub n_test: usize,
    pub textures: Pool<u32>,
    pub tints: Pool<[f64; 3]>,
    pub style: RenderStyle,
    pub lambda: f64,
    pub radius: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            arms: [0, 5, 10, 15, 20, 25].iter().map(|&t| (t, 50)).collect(),
            schedule: ScheduleKind::Cosine,
            method: InversionMethod::Ddpm,
            size: 32,
            n_train: 200,
            n_eval: 100,
            n_test: 200,
            textures: default_textures(),
            tints: default_tints(),
            style: RenderStyle::default(),
            lambda: 10.0,
            radius: DEFAULT_RADIUS,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < 2 {
            return Err(Error::Config("robustness experiment needs at least 2 seeds".into()));
        }
        for &(t, n) in &self.arms {
            InversionConfig {
                method: self.method,
                t_stop: t,
                total_steps: n,
                ..Default::default()
            }
            .validate()?;
        }
        self.generator(0).validate()
    }

    fn generator(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_train: self.n_train + self.n_eval,
            n_test: self.n_test,
            size: self.size,
            textures: self.textures.clone(),
            tints: self.tints.clone(),
            style: self.style,
            seed,
        }
    }
}

pub const CONDITION_ORG: &str = "org";
pub const CONDITION_STEM: &str = "stem";
pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_GEN: &str = "gen";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub t_stop: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub split: String,
    pub mse: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

/// Median of a nonempty list; mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

impl ExperimentReport {
    fn select<'a>(&'a self, condition: &'a str, t_stop: usize, total: usize, split: &'a str) -> impl Iterator<Item = &'a ReportRow> {
        self.rows.iter().filter(move |r| {
            r.condition == condition && r.t_stop == t_stop && r.total_steps == total && r.split == split
        })
    }

    /// Median `(mse, success_rate)` over seeds for one cell.
    pub fn median(&self, condition: &str, t_stop: usize, total: usize, split: &str) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.select(condition, t_stop, total, split).collect();
        let mse = median(&rows.iter().map(|r| r.mse).collect::<Vec<_>>())?;
        let succ = median(&rows.iter().map(|r| r.success_rate).collect::<Vec<_>>())?;
        Some((mse, succ))
    }

    pub fn org_median(&self, split: &str) -> Option<(f64, f64)> {
        self.median(CONDITION_ORG, 0, 0, split)
    }

    /// Inverted arms with `t_stop > 0`, in row order.
    pub fn stem_arms(&self) -> Vec<(usize, usize)> {
        let mut arms = Vec::new();
        for r in &self.rows {
            if r.condition == CONDITION_STEM && r.t_stop > 0 && !arms.contains(&(r.t_stop, r.total_steps)) {
                arms.push((r.t_stop, r.total_steps));
            }
        }
        arms
    }

    /// The `t_stop > 0` arm with the lowest median generalization MSE.
    pub fn best_stem_arm(&self) -> Option<((usize, usize), f64)> {
        self.stem_arms()
            .into_iter()
            .filter_map(|(t, n)| self.median(CONDITION_STEM, t, n, SPLIT_GEN).map(|m| ((t, n), m.0)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Header `condition,t_stop,T,seed,split,mse,success_rate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,t_stop,T,seed,split,mse,success_rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.9e},{:.6}\n",
                r.condition, r.t_stop, r.total_steps, r.seed, r.split, r.mse, r.success_rate
            ));
        }
        out
    }

    /// Header `condition,t_stop,T,split,median_mse,median_success_rate`.
    pub fn summary_csv(&self) -> String {
        let mut cells: Vec<(String, usize, usize, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.condition.clone(), r.t_stop, r.total_steps, r.split.clone());
            if !cells.contains(&key) {
                cells.push(key);
            }
        }
        let mut out = String::from("condition,t_stop,T,split,median_mse,median_success_rate\n");
        for (c, t, n, s) in cells {
            let (mse, succ) = self.median(&c, t, n, &s).expect("cell has rows");
            out.push_str(&format!("{c},{t},{n},{s},{mse:.9e},{succ:.6}\n"));
        }
        out
    }
}

fn eval_rows(
    model: &RegressorModel,
    condition: &str,
    (t_stop, total): (usize, usize),
    seed: u64,
    sets: [(&str, &[Sample]); 2],
    radius: f64,
) -> Result<Vec<ReportRow>> {
    sets.iter()
        .map(|(split, samples)| {
            let e = evaluate(model, samples, radius)?;
            Ok(ReportRow {
                condition: condition.to_string(),
                t_stop,
                total_steps: total,
                seed,
                split: split.to_string(),
                mse: e.mse,
                success_rate: e.success_rate,
            })
        })
        .collect()
}

fn run_cell(config: &ExperimentConfig, seed: u64) -> Result<Vec<ReportRow>> {
    let scenes = generate_scenes(&config.generator(seed))?;
    let samples = render_samples(&scenes, config.size, &config.style)?;
    let (train_dist, gen) = samples.split_at(config.n_train + config.n_eval);
    let (fit_set, id_eval) = train_dist.split_at(config.n_train);
    let sets = [(SPLIT_TRAIN, id_eval), (SPLIT_GEN, gen)];

    let org = fit_samples(fit_set, config.lambda)?;
    let mut rows = eval_rows(&org, CONDITION_ORG, (0, 0), seed, sets, config.radius)?;
    let mut schedules: BTreeMap<usize, NoiseSchedule> = BTreeMap::new();
    for &(t, n) in &config.arms {
        if !schedules.contains_key(&n) {
            schedules.insert(n, NoiseSchedule::with_defaults(config.schedule, n)?);
        }
        let inv = InversionConfig {
            method: config.method,
            t_stop: t,
            total_steps: n,
            seed,
            ..Default::default()
        };
        let schedule = &schedules[&n];
        let inverted = fit_set
            .par_iter()
            .map(|s| {
                Ok(Sample {
                    image: stem_preprocess(&s.image, &inv, schedule, stream_id_for(&s.id))?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = fit_samples(&inverted, config.lambda)?;
        rows.extend(eval_rows(&model, CONDITION_STEM, (t, n), seed, sets, config.radius)?);
    }
    Ok(rows)
}

/// Fits one model per condition and seed on (possibly inverted) training
/// images and evaluates every model on original images.
pub fn robustness_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let cells = config
        .seeds
        .par_iter()
        .map(|&s| run_cell(config, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        rows: cells.into_iter().flatten().collect(),
    })
}
