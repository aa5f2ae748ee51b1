//! Bi-temporal samples: synthetic generation, PNG I/O and tiling.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::INPUT_MULTIPLE;
use crate::tensor::Tensor;

/// One co-registered pair with its change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `3×H×W`, values in `[0, 1]`.
    pub t1: Tensor<f32>,
    pub t2: Tensor<f32>,
    /// Row-major `H×W`, 1 = change.
    pub label: Vec<u8>,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.t1.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t1.shape()[2]
    }

    /// Mirrors all three rasters.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> SamplePair {
        let (h, w) = (self.height(), self.width());
        let src = |i: usize, j: usize| {
            let si = if vertical { h - 1 - i } else { i };
            let sj = if horizontal { w - 1 - j } else { j };
            si * w + sj
        };
        let flip_img = |t: &Tensor<f32>| {
            Tensor::from_fn([3, h, w], |k| {
                let (c, q) = (k / (h * w), k % (h * w));
                t.data()[c * h * w + src(q / w, q % w)]
            })
        };
        SamplePair {
            id: self.id.clone(),
            t1: flip_img(&self.t1),
            t2: flip_img(&self.t2),
            label: (0..h * w).map(|q| self.label[src(q / w, q % w)]).collect(),
        }
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of changed shapes per pair.
    pub changed_shapes: (usize, usize),
    /// Inclusive range of unchanged distractor shapes per pair.
    pub static_shapes: (usize, usize),
    /// Inclusive range of shape side lengths in pixels.
    pub shape_size: (usize, usize),
    /// Per-channel additive offset applied to the whole second image, drawn
    /// from `±jitter`.
    pub jitter: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 250,
            height: 64,
            width: 64,
            changed_shapes: (1, 3),
            static_shapes: (1, 3),
            shape_size: (8, 20),
            jitter: 0.1,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(INPUT_MULTIPLE) || !self.width.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Config(format!(
                "extents {}×{} must be positive multiples of {INPUT_MULTIPLE}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.shape_size;
        if lo == 0 || lo > hi || hi > self.height.min(self.width) {
            return Err(Error::Config(format!("shape_size {lo}..={hi} does not fit the image")));
        }
        if self.changed_shapes.0 > self.changed_shapes.1 || self.static_shapes.0 > self.static_shapes.1 {
            return Err(Error::Config("shape count ranges must be ordered".into()));
        }
        if !(self.jitter >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("jitter and noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// An axis-aligned filled shape inside its bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub color: [f32; 3],
}

impl Shape {
    pub fn covers(&self, i: usize, j: usize) -> bool {
        if i < self.top || j < self.left || i >= self.top + self.height || j >= self.left + self.width {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let ry = self.height as f64 / 2.0;
                let rx = self.width as f64 / 2.0;
                let dy = (i - self.top) as f64 + 0.5 - ry;
                let dx = (j - self.left) as f64 + 0.5 - rx;
                (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
            }
        }
    }
}

/// What happens to a changed shape between the two dates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Change {
    Inserted,
    Removed,
}

/// Scene description before rasterization.
#[derive(Clone, Debug)]
pub struct Scene {
    pub background: [[f64; 4]; 3],
    pub statics: Vec<Shape>,
    pub changes: Vec<(Shape, Change)>,
    pub offset: [f32; 3],
}

fn random_shape(rng: &mut impl Rng, cfg: &SynthConfig) -> Shape {
    let (lo, hi) = cfg.shape_size;
    let height = rng.random_range(lo..=hi);
    let width = rng.random_range(lo..=hi);
    let mut color = [0.0f32; 3];
    for c in &mut color {
        // dark or bright per channel, away from the mid-tone background
        *c = if rng.random_bool(0.5) {
            rng.random_range(0.0..0.2)
        } else {
            rng.random_range(0.8..1.0)
        };
    }
    Shape {
        kind: if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse },
        top: rng.random_range(0..=cfg.height - height),
        left: rng.random_range(0..=cfg.width - width),
        height,
        width,
        color,
    }
}

/// Deterministic scene for sample `index`: an independent stream per index.
pub fn scene(cfg: &SynthConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let mut background = [[0.0; 4]; 3];
    for b in &mut background {
        // base tone, two low-frequency waves and a phase
        *b = [
            rng.random_range(0.35..0.65),
            rng.random_range(0.02..0.08),
            rng.random_range(0.05..0.25),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
    }
    let n_static = rng.random_range(cfg.static_shapes.0..=cfg.static_shapes.1);
    let statics = (0..n_static).map(|_| random_shape(&mut rng, cfg)).collect();
    let n_changed = rng.random_range(cfg.changed_shapes.0..=cfg.changed_shapes.1);
    let changes = (0..n_changed)
        .map(|_| {
            let s = random_shape(&mut rng, cfg);
            let c = if rng.random_bool(0.5) { Change::Inserted } else { Change::Removed };
            (s, c)
        })
        .collect();
    let mut offset = [0.0f32; 3];
    for o in &mut offset {
        *o = if cfg.jitter > 0.0 {
            rng.random_range(-cfg.jitter..=cfg.jitter) as f32
        } else {
            0.0
        };
    }
    Scene {
        background,
        statics,
        changes,
        offset,
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterizes `scene`. Noise comes from its own stream so the layout does not
/// depend on the noise level.
pub fn render(cfg: &SynthConfig, index: u64, scene: &Scene) -> SamplePair {
    let (h, w) = (cfg.height, cfg.width);
    let mut bg = vec![0.0f32; 3 * h * w];
    for (c, b) in scene.background.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let v = b[0] + b[2] * ((i as f64 * b[1] + b[3]).sin() * (j as f64 * b[1] * 1.3 + b[3] * 0.7).cos());
                bg[c * h * w + i * w + j] = v as f32;
            }
        }
    }
    let mut t1 = bg.clone();
    let mut t2 = bg;
    let mut label = vec![0u8; h * w];
    let paint = |img: &mut [f32], s: &Shape| {
        for i in s.top..s.top + s.height {
            for j in s.left..s.left + s.width {
                if s.covers(i, j) {
                    for c in 0..3 {
                        img[c * h * w + i * w + j] = s.color[c];
                    }
                }
            }
        }
    };
    for s in &scene.statics {
        paint(&mut t1, s);
        paint(&mut t2, s);
    }
    for (s, change) in &scene.changes {
        match change {
            Change::Inserted => paint(&mut t2, s),
            Change::Removed => paint(&mut t1, s),
        }
        for i in s.top..s.top + s.height {
            for j in s.left..s.left + s.width {
                if s.covers(i, j) {
                    label[i * w + j] = 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_6500_0000);
    rng.set_stream(index);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    for (k, v) in t2.iter_mut().enumerate() {
        *v += scene.offset[k / (h * w)];
    }
    for img in [&mut t1, &mut t2] {
        for v in img.iter_mut() {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
            *v = quantize(*v + n);
        }
    }
    SamplePair {
        id: format!("{index:05}"),
        t1: Tensor::new([3, h, w], t1).expect("3·H·W values"),
        t2: Tensor::new([3, h, w], t2).expect("3·H·W values"),
        label,
    }
}

/// Samples `range` of the infinite deterministic sequence defined by `cfg`.
pub fn generate_range(cfg: &SynthConfig, range: Range<u64>) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    Ok(range.map(|i| render(cfg, i, &scene(cfg, i))).collect())
}

/// The first `cfg.count` samples.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    generate_range(cfg, 0..cfg.count as u64)
}

// ----- PNG I/O ---------------------------------------------------------------

/// Names of the three subdirectories of a dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirLayout {
    pub t1: String,
    pub t2: String,
    pub label: String,
}

impl Default for DirLayout {
    fn default() -> Self {
        Self {
            t1: "A".into(),
            t2: "B".into(),
            label: "label".into(),
        }
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Reads an 8-bit RGB PNG as `3×H×W` values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([3, h, w], |k| {
        let (c, q) = (k / (h * w), k % (h * w));
        f32::from(raw[q * 3 + c]) / 255.0
    }))
}

/// Reads a mask PNG; any nonzero luma is change. Returns `(mask, H, W)`.
pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.as_raw().iter().map(|&v| u8::from(v != 0)).collect(), h, w))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn save_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("RGB image must be 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let raw: Vec<u8> = (0..h * w * 3)
        .map(|k| {
            let (q, c) = (k / 3, k % 3);
            (d[c * h * w + q].clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    save_rgb_bytes(path, w, h, raw)
}

pub fn save_rgb_bytes(path: &Path, width: usize, height: usize, raw: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    let img = RgbImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::shape(format!("{} bytes for a {width}×{height} RGB image", 3 * width * height)))?;
    img.save(path).map_err(image_err(path))
}

/// Writes a binary mask as 0/255 grayscale.
pub fn save_mask(path: &Path, mask: &[u8], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::shape(format!("{} mask values for {height}×{width}", mask.len())));
    }
    ensure_parent(path)?;
    let raw = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, raw).expect("length checked");
    img.save(path).map_err(image_err(path))
}

/// Loads a pair and optional mask; without a mask the label is all zeros.
pub fn load_pair(t1: &Path, t2: &Path, label: Option<&Path>) -> Result<SamplePair> {
    let a = load_rgb(t1)?;
    let b = load_rgb(t2)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{} is {:?} but {} is {:?}",
            t1.display(),
            a.shape(),
            t2.display(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let label = match label {
        Some(p) => {
            let (m, mh, mw) = load_mask(p)?;
            if (mh, mw) != (h, w) {
                return Err(Error::shape(format!("{} is {mh}×{mw}, images are {h}×{w}", p.display())));
            }
            m
        }
        None => vec![0; h * w],
    };
    let id = t1.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok(SamplePair { id, t1: a, t2: b, label })
}

/// Writes `root/{A,B,label}/<id>.png` for every sample; returns the paths.
pub fn write_dataset(root: &Path, layout: &DirLayout, samples: &[SamplePair]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(samples.len() * 3);
    for s in samples {
        let name = format!("{}.png", s.id);
        let (p1, p2, pl) = (
            root.join(&layout.t1).join(&name),
            root.join(&layout.t2).join(&name),
            root.join(&layout.label).join(&name),
        );
        save_rgb(&p1, &s.t1)?;
        save_rgb(&p2, &s.t2)?;
        save_mask(&pl, &s.label, s.height(), s.width())?;
        written.extend([p1, p2, pl]);
    }
    Ok(written)
}

/// Ids of every `<id>.png` under `root/<t1 dir>`, sorted.
pub fn list_ids(root: &Path, layout: &DirLayout) -> Result<Vec<String>> {
    let dir = root.join(&layout.t1);
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    Ok(ids)
}

/// Loads every sample of a dataset directory.
pub fn load_dataset(root: &Path, layout: &DirLayout) -> Result<Vec<SamplePair>> {
    list_ids(root, layout)?
        .iter()
        .map(|id| {
            let name = format!("{id}.png");
            load_pair(
                &root.join(&layout.t1).join(&name),
                &root.join(&layout.t2).join(&name),
                Some(&root.join(&layout.label).join(&name)),
            )
        })
        .collect()
}

// ----- tiling ----------------------------------------------------------------

/// Tile origins along one axis: every `stride` from 0, plus one tile flush with
/// the far border when the regular grid leaves a remainder.
pub fn tile_anchors(extent: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if tile == 0 || stride == 0 {
        return Err(Error::shape("tile size and stride must be positive"));
    }
    if tile > extent {
        return Err(Error::shape(format!("tile {tile} exceeds extent {extent}")));
    }
    let mut anchors: Vec<usize> = (0..=extent - tile).step_by(stride).collect();
    if anchors.last() != Some(&(extent - tile)) {
        anchors.push(extent - tile);
    }
    Ok(anchors)
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let w = t.shape()[2];
    let h = t.shape()[1];
    Tensor::from_fn([3, size, size], |k| {
        let (c, q) = (k / (size * size), k % (size * size));
        t.data()[c * h * w + (top + q / size) * w + left + q % size]
    })
}

/// Aligned square crops of all three rasters.
pub fn tile(sample: &SamplePair, size: usize, stride: usize) -> Result<Vec<SamplePair>> {
    if !size.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::shape(format!("tile size {size} is not a multiple of {INPUT_MULTIPLE}")));
    }
    let (h, w) = (sample.height(), sample.width());
    let rows = tile_anchors(h, size, stride)?;
    let cols = tile_anchors(w, size, stride)?;
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &top in &rows {
        for &left in &cols {
            out.push(SamplePair {
                id: format!("{}_r{top}_c{left}", sample.id),
                t1: crop(&sample.t1, top, left, size),
                t2: crop(&sample.t2, top, left, size),
                label: (0..size * size)
                    .map(|q| sample.label[(top + q / size) * w + left + q % size])
                    .collect(),
            });
        }
    }
    Ok(out)
}
