//! Procedural class-conditional images and binary PPM I/O.
//!
//! Each class is a shape family (circle, stripes, checkerboard, ...) paired with
//! its own colour palette. Position, size, phase and hue are jittered per image
//! from a seeded stream, so a dataset is a pure function of its arguments.

use std::fs;
use std::path::{Path, PathBuf};

use ctf_tensor::SeedStream;
use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};

/// RGB image with values in [0, 1], stored row-major as HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(CtfError::Shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len(), "image sizes differ");
        let s: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        s / self.pixels.len() as f64
    }

    /// Side-by-side concatenation of equally tall images with a `gap`-pixel white separator.
    pub fn hstack(images: &[Image], gap: usize) -> Result<Image> {
        let first = images.first().ok_or_else(|| CtfError::Shape("hstack of no images".into()))?;
        let h = first.height;
        if images.iter().any(|im| im.height != h) {
            return Err(CtfError::Shape("hstack needs equal heights".into()));
        }
        let w: usize = images.iter().map(|im| im.width).sum::<usize>() + gap * (images.len() - 1);
        let mut out = Image::filled(h, w, [1.0, 1.0, 1.0]);
        let mut x0 = 0;
        for im in images {
            for y in 0..h {
                let src = &im.pixels[y * im.width * 3..(y + 1) * im.width * 3];
                out.pixels[(y * w + x0) * 3..(y * w + x0 + im.width) * 3].copy_from_slice(src);
            }
            x0 += im.width + gap;
        }
        Ok(out)
    }

    /// Vertical concatenation of equally wide images.
    pub fn vstack(images: &[Image], gap: usize) -> Result<Image> {
        let first = images.first().ok_or_else(|| CtfError::Shape("vstack of no images".into()))?;
        let w = first.width;
        if images.iter().any(|im| im.width != w) {
            return Err(CtfError::Shape("vstack needs equal widths".into()));
        }
        let h: usize = images.iter().map(|im| im.height).sum::<usize>() + gap * (images.len() - 1);
        let mut pixels = Vec::with_capacity(h * w * 3);
        for (i, im) in images.iter().enumerate() {
            if i > 0 {
                pixels.extend(std::iter::repeat(1.0).take(gap * w * 3));
            }
            pixels.extend_from_slice(&im.pixels);
        }
        Image::new(h, w, pixels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps the items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self { images: vec![], labels: vec![], class_count: self.class_count, split: self.split, seed: self.seed }
    }
}

/// Number of distinct shape families; classes beyond this reuse a family with a new palette.
pub const FAMILY_COUNT: usize = 10;

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Jitter {
    cx: f32,
    cy: f32,
    size: f32,
    phase: f32,
    hue: f32,
}

/// Foreground weight in [0, 1] of family `family` at pixel centre (x, y).
fn coverage(family: usize, j: &Jitter, x: f32, y: f32, w: f32, h: f32) -> f32 {
    let (dx, dy) = (x - j.cx, y - j.cy);
    let unit = w.min(h) / 32.0;
    let inside = |b: bool| if b { 1.0 } else { 0.0 };
    match family {
        0 => inside(dx * dx + dy * dy <= (j.size * unit).powi(2)),
        1 => inside(dx.abs() <= j.size * unit && dy.abs() <= 0.7 * j.size * unit),
        2 => {
            let period = 8.0 * unit;
            inside((x + y + j.phase * unit).rem_euclid(period) < period / 2.0)
        }
        3 => (1.0 - (dx * dx + dy * dy).sqrt() / (1.6 * j.size * unit)).clamp(0.0, 1.0),
        4 => {
            let cell = 8.0 * unit;
            let cx = ((x + j.phase * unit) / cell).floor() as i64;
            let cy = ((y + j.phase * unit) / cell).floor() as i64;
            inside((cx + cy).rem_euclid(2) == 0)
        }
        5 => {
            let period = 8.0 * unit;
            inside((y + j.phase * unit).rem_euclid(period) < period / 2.0)
        }
        6 => {
            let r = (dx * dx + dy * dy).sqrt();
            inside(r <= j.size * unit && r >= (j.size - 3.5) * unit)
        }
        7 => {
            let arm = 3.5 * unit;
            inside((dx.abs() <= arm && dy.abs() <= j.size * unit) || (dy.abs() <= arm && dx.abs() <= j.size * unit))
        }
        8 => ((y + j.phase * unit) / h).clamp(0.0, 1.0),
        _ => {
            // upward triangle: apex above centre, base below
            let s = j.size * unit;
            let t = (dy + s) / (2.0 * s);
            inside((0.0..=1.0).contains(&t) && dx.abs() <= t * s)
        }
    }
}

fn render(class: usize, class_count: usize, height: usize, width: usize, rng: &mut SeedStream) -> Image {
    let family = class % FAMILY_COUNT;
    let (w, h) = (width as f32, height as f32);
    let unit = w.min(h) / 32.0;
    let j = Jitter {
        cx: w / 2.0 + (rng.uniform() as f32 - 0.5) * 8.0 * unit,
        cy: h / 2.0 + (rng.uniform() as f32 - 0.5) * 8.0 * unit,
        size: 8.0 + rng.uniform() as f32 * 3.0,
        phase: rng.uniform() as f32 * 8.0,
        hue: (rng.uniform() as f32 - 0.5) * 0.04,
    };
    let base_hue = (class as f32 * 0.618_034).rem_euclid(1.0) + j.hue;
    let tier = (class / FAMILY_COUNT) as f32 / (class_count.div_ceil(FAMILY_COUNT)) as f32;
    let bg = hsv(base_hue + 0.5, 0.35, 0.2 + 0.15 * tier);
    let fg = hsv(base_hue, 0.8, 0.95 - 0.2 * tier);
    let mut pixels = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let c = coverage(family, &j, x as f32 + 0.5, y as f32 + 0.5, w, h);
            for ch in 0..3 {
                pixels.push((bg[ch] + c * (fg[ch] - bg[ch])).clamp(0.0, 1.0));
            }
        }
    }
    Image { height, width, pixels }
}

/// `per_class` images of each of `class_count` classes, ordered class-major.
pub fn generate_dataset(
    class_count: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
    split: Split,
) -> Result<LabeledDataset> {
    if class_count < 2 {
        return Err(CtfError::Parameter(format!("need at least 2 classes, got {class_count}")));
    }
    if height == 0 || width == 0 {
        return Err(CtfError::Parameter("image dimensions must be positive".into()));
    }
    let stream = SeedStream::new(seed).split(split.name());
    let mut images = Vec::with_capacity(class_count * per_class);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for class in 0..class_count {
        for i in 0..per_class {
            let mut rng = stream.split_index((class * per_class + i) as u64);
            images.push(render(class, class_count, height, width, &mut rng));
            labels.push(class);
        }
    }
    Ok(LabeledDataset { images, labels, class_count, split, seed })
}

/// Binary PPM ("P6", maxval 255).
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| CtfError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| CtfError::io(path, e))?;
    decode_ppm(&bytes)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(CtfError::format(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CtfError::format(start as u64, format!("{what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(CtfError::format(0, "missing P6 magic"));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos as u64;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(CtfError::format(maxval_at, format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    if width == 0 || height == 0 {
        return Err(CtfError::format(maxval_at, "zero image dimension"));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(CtfError::format(r.pos as u64, "expected whitespace after maxval"));
    }
    let start = r.pos + 1;
    let need = width * height * 3;
    let have = bytes.len() - start;
    if have < need {
        return Err(CtfError::format(
            bytes.len() as u64,
            format!("truncated payload: expected {need} bytes, found {have}"),
        ));
    }
    let pixels = bytes[start..start + need].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, pixels)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub path: String,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub class_count: usize,
    pub seed: u64,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every image as PPM plus a `manifest.json` listing (path, class) pairs.
pub fn export_dataset(ds: &LabeledDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CtfError::io(dir, e))?;
    let mut items = Vec::with_capacity(ds.len());
    for (i, (img, &class)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = format!("img_{i:05}.ppm");
        write_ppm(img, &dir.join(&name))?;
        items.push(ManifestItem { path: name, class });
    }
    let manifest = Manifest { split: ds.split, class_count: ds.class_count, seed: ds.seed, items };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| CtfError::io(&path, e))?;
    Ok(path)
}

/// Loads a dataset from a directory containing `manifest.json`; paths are relative to it.
pub fn import_dataset(dir: &Path) -> Result<LabeledDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| CtfError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let mut images = Vec::with_capacity(manifest.items.len());
    let mut labels = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        if item.class >= manifest.class_count {
            return Err(CtfError::Index(format!("class {} in manifest of {} classes", item.class, manifest.class_count)));
        }
        images.push(read_ppm(&dir.join(&item.path))?);
        labels.push(item.class);
    }
    Ok(LabeledDataset { images, labels, class_count: manifest.class_count, split: manifest.split, seed: manifest.seed })
}
