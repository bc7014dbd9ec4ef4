//! Synthetic bi-temporal pairs with planted changes and domain shifts, and
//! the PNG triplet dataset layout (`A/`, `B/`, `label/`).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub const NORM_MEAN: [f64; 3] = [123.675, 116.28, 103.53];
pub const NORM_STD: [f64; 3] = [58.395, 57.12, 57.375];
pub const SHIFT_META_FILE: &str = "shift_meta.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub image_size: usize,
    pub objects: (usize, usize),
    pub object_size: (usize, usize),
    /// Probability that an object is present at only one of the two times.
    pub change_prob: f64,
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub channel_offset: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            image_size: 64,
            objects: (1, 4),
            object_size: (6, 20),
            change_prob: 0.5,
            gain: (0.85, 1.15),
            bias: (-15.0, 15.0),
            channel_offset: (-10.0, 10.0),
            noise_sigma: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// No objects and no shift.
    pub fn null(image_size: usize) -> Self {
        Self {
            count: 1,
            image_size,
            objects: (0, 0),
            gain: (1.0, 1.0),
            bias: (0.0, 0.0),
            channel_offset: (0.0, 0.0),
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("synth config: {what}")));
        if self.image_size < 16 {
            return bad(&format!("image_size {} < 16", self.image_size));
        }
        if self.objects.0 > self.objects.1 {
            return bad("object count range is reversed");
        }
        let (s0, s1) = self.object_size;
        if s0 == 0 || s0 > s1 || s1 > self.image_size {
            return bad("object size range must satisfy 0 < min <= max <= image_size");
        }
        for (name, (lo, hi)) in [
            ("gain", self.gain),
            ("bias", self.bias),
            ("channel_offset", self.channel_offset),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(&format!("{name} range ({lo}, {hi}) is not ordered"));
            }
        }
        if self.gain.0 <= 0.0 {
            return bad("gain must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.change_prob) {
            return bad("change_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Half-open pixel box `[x0, x1) x [y0, y1)`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    /// Pixel centers inside `((x - cx) / rx)^2 + ((y - cy) / ry)^2 <= 1`.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub shape: Shape,
    pub color: [u8; 3],
    pub in_a: bool,
    pub in_b: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftMeta {
    pub gain: f64,
    pub bias: f64,
    pub channel_offsets: [f64; 3],
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub img_a: RgbImage,
    pub img_b: RgbImage,
    /// `{0, 1}` change mask.
    pub mask: GrayImage,
    pub shift_meta: ShiftMeta,
    /// Objects in paint order; later objects cover earlier ones.
    pub objects: Vec<PlantedObject>,
}

/// Index of the topmost object covering each pixel at one time, or `None`.
pub fn rasterize(objects: &[PlantedObject], size: usize, time_b: bool) -> Vec<Option<usize>> {
    let mut top = vec![None; size * size];
    for (k, o) in objects.iter().enumerate() {
        if (time_b && !o.in_b) || (!time_b && !o.in_a) {
            continue;
        }
        for y in 0..size {
            for x in 0..size {
                if o.shape.contains(x, y) {
                    top[y * size + x] = Some(k);
                }
            }
        }
    }
    top
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Smooth value-noise texture in `[-1, 1]`, bilinear over an 8-pixel lattice.
fn value_noise<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Vec<f64> {
    let cell = 8;
    let g = size / cell + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / cell as f64;
            let fx = x as f64 / cell as f64;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |yy: usize, xx: usize| lattice[yy * g + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn contrasting_color<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3]) -> [u8; 3] {
    loop {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let d: f64 = (0..3).map(|i| (c[i] as f64 - base[i]).abs()).sum::<f64>() / 3.0;
        if d >= 60.0 {
            return c;
        }
    }
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Shape {
    let n = cfg.image_size;
    let (s0, s1) = cfg.object_size;
    let w = rng.random_range(s0..=s1);
    let h = rng.random_range(s0..=s1);
    let x0 = rng.random_range(0..=n - w);
    let y0 = rng.random_range(0..=n - h);
    if rng.random_bool(0.5) {
        Shape::Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        }
    } else {
        Shape::Ellipse {
            cx: x0 as f64 + w as f64 / 2.0,
            cy: y0 as f64 + h as f64 / 2.0,
            rx: w as f64 / 2.0,
            ry: h as f64 / 2.0,
        }
    }
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Applies gain, bias, channel offsets and sensor noise to one image.
pub fn apply_shift<R: Rng + ?Sized>(img: &RgbImage, shift: &ShiftMeta, rng: &mut R) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            let z: f64 = if shift.noise_sigma > 0.0 {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            let v = shift.gain * p[c] as f64 + shift.bias + shift.channel_offsets[c] + shift.noise_sigma * z;
            p[c] = quantize(v);
        }
    }
    out
}

pub fn generate_pair<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SamplePair> {
    cfg.validate()?;
    let n = cfg.image_size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..170.0));
    let lum = value_noise(rng, n);
    let tint: Vec<Vec<f64>> = (0..3).map(|_| value_noise(rng, n)).collect();
    let ground = RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let i = y as usize * n + x as usize;
        Rgb(std::array::from_fn(|c| quantize(base[c] + 30.0 * lum[i] + 8.0 * tint[c][i])))
    });

    let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
    let objects: Vec<PlantedObject> = (0..count)
        .map(|_| {
            let shape = random_shape(rng, cfg);
            let color = contrasting_color(rng, base);
            let (in_a, in_b) = if rng.random_bool(cfg.change_prob) {
                if rng.random_bool(0.5) {
                    (true, false)
                } else {
                    (false, true)
                }
            } else {
                (true, true)
            };
            PlantedObject {
                shape,
                color,
                in_a,
                in_b,
            }
        })
        .collect();

    let paint = |top: &[Option<usize>]| {
        let mut img = ground.clone();
        for (i, t) in top.iter().enumerate() {
            if let Some(k) = t {
                img.put_pixel((i % n) as u32, (i / n) as u32, Rgb(objects[*k].color));
            }
        }
        img
    };
    let top_a = rasterize(&objects, n, false);
    let top_b = rasterize(&objects, n, true);
    let img_a = paint(&top_a);
    let pre_b = paint(&top_b);
    let mask = GrayImage::from_fn(n as u32, n as u32, |x, y| {
        let i = y as usize * n + x as usize;
        Luma([(top_a[i] != top_b[i]) as u8])
    });

    let shift_meta = ShiftMeta {
        gain: uniform(rng, cfg.gain),
        bias: uniform(rng, cfg.bias),
        channel_offsets: std::array::from_fn(|_| uniform(rng, cfg.channel_offset)),
        noise_sigma: cfg.noise_sigma,
    };
    let img_b = apply_shift(&pre_b, &shift_meta, rng);
    Ok(SamplePair {
        img_a,
        img_b,
        mask,
        shift_meta,
        objects,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for pair `index`, independent of every other pair.
pub fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed) ^ index as u64))
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    (0..cfg.count)
        .map(|i| generate_pair(cfg, &mut pair_rng(cfg.seed, i)))
        .collect()
}

pub fn pair_id(index: usize) -> String {
    format!("{index:05}")
}

#[derive(Serialize, Deserialize)]
struct ShiftLine {
    id: String,
    #[serde(flatten)]
    meta: ShiftMeta,
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_dataset(pairs: &[SamplePair], dir: &Path) -> Result<()> {
    for sub in ["A", "B", "label"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let meta_path = dir.join(SHIFT_META_FILE);
    let file = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut meta = BufWriter::new(file);
    for (i, p) in pairs.iter().enumerate() {
        let id = pair_id(i);
        let name = format!("{id}.png");
        save_png(&p.img_a, &dir.join("A").join(&name))?;
        save_png(&p.img_b, &dir.join("B").join(&name))?;
        let label = GrayImage::from_fn(p.mask.width(), p.mask.height(), |x, y| {
            Luma([p.mask.get_pixel(x, y)[0] * 255])
        });
        save_png(&label, &dir.join("label").join(&name))?;
        let line = serde_json::to_string(&ShiftLine {
            id,
            meta: p.shift_meta.clone(),
        })?;
        writeln!(meta, "{line}").map_err(|e| Error::io(&meta_path, e))?;
    }
    meta.flush().map_err(|e| Error::io(&meta_path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub a: RgbImage,
    pub b: RgbImage,
    /// `{0, 1}` per pixel, row-major.
    pub label: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub shift_meta: Vec<ShiftMeta>,
}

impl Dataset {
    pub fn from_pairs(pairs: &[SamplePair]) -> Self {
        Self {
            samples: pairs
                .iter()
                .enumerate()
                .map(|(i, p)| Sample {
                    id: pair_id(i),
                    a: p.img_a.clone(),
                    b: p.img_b.clone(),
                    label: p.mask.as_raw().clone(),
                })
                .collect(),
            shift_meta: pairs.iter().map(|p| p.shift_meta.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            shift_meta: Vec::new(),
        }
    }

    /// Normalized time-A and time-B tensors plus flattened labels for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Vec<u8>)> {
        let first = self
            .samples
            .get(*indices.first().ok_or_else(|| Error::Usage("empty batch".into()))?)
            .ok_or_else(|| Error::Usage("batch index out of range".into()))?;
        let (w, h) = first.a.dimensions();
        let per = Dims::new(1, 3, h as usize, w as usize);
        let mut a = Vec::with_capacity(indices.len() * per.numel());
        let mut b = Vec::with_capacity(indices.len() * per.numel());
        let mut labels = Vec::with_capacity(indices.len() * per.plane());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Usage(format!("batch index {i} out of range")))?;
            if s.a.dimensions() != (w, h) || s.b.dimensions() != (w, h) || s.label.len() != per.plane() {
                return Err(Error::shape(
                    "batch",
                    "height",
                    format!("sample {} does not match {per}", s.id),
                ));
            }
            a.extend(normalize(&s.a).into_data());
            b.extend(normalize(&s.b).into_data());
            labels.extend_from_slice(&s.label);
        }
        let dims = Dims::new(indices.len(), 3, h as usize, w as usize);
        Ok((Tensor::new(dims, a)?, Tensor::new(dims, b)?, labels))
    }
}

/// Per-channel `(v - mean) / std` as a `1 x 3 x H x W` tensor.
pub fn normalize(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        (img.get_pixel(x as u32, y as u32)[c] as f64 - NORM_MEAN[c]) / NORM_STD[c]
    })
}

fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let ids_a = list_ids(&dir.join("A"))?;
    let ids_b = list_ids(&dir.join("B"))?;
    let ids_l = list_ids(&dir.join("label"))?;
    for (ids, others) in [
        (&ids_a, [&ids_b, &ids_l]),
        (&ids_b, [&ids_a, &ids_l]),
        (&ids_l, [&ids_a, &ids_b]),
    ] {
        for id in ids.iter() {
            if others.iter().any(|o| o.binary_search(id).is_err()) {
                return Err(Error::Integrity {
                    id: id.clone(),
                    detail: "missing counterpart among A/, B/ and label/".into(),
                });
            }
        }
    }
    let mut samples = Vec::with_capacity(ids_a.len());
    for id in ids_a {
        let name = format!("{id}.png");
        let a = open_image(&dir.join("A").join(&name))?.to_rgb8();
        let b = open_image(&dir.join("B").join(&name))?.to_rgb8();
        let l = open_image(&dir.join("label").join(&name))?.to_luma8();
        if a.dimensions() != b.dimensions() || a.dimensions() != l.dimensions() {
            return Err(Error::Integrity {
                id,
                detail: "image and label sizes differ".into(),
            });
        }
        let label = l.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
        samples.push(Sample { id, a, b, label });
    }
    let meta_path = dir.join(SHIFT_META_FILE);
    let mut shift_meta = Vec::new();
    if meta_path.exists() {
        let f = fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&meta_path, e))?;
            if !line.trim().is_empty() {
                shift_meta.push(serde_json::from_str::<ShiftLine>(&line)?.meta);
            }
        }
    }
    Ok(Dataset { samples, shift_meta })
}
