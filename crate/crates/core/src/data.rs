//! Dataset indexing, image IO, and training-pair assembly.
//!
//! Datasets follow the MVTec AD layout:
//! `<root>/<category>/train/good/*.png`,
//! `<root>/<category>/test/<defect>/*.png`,
//! `<root>/<category>/ground_truth/<defect>/<stem>_mask.png`.
//!
//! Raw images are 3 x H x W tensors in [0,1]; model inputs are standardized
//! with fixed per-channel constants. Entry lists are sorted by path so
//! iteration order never depends on directory enumeration order.

use crate::autodiff::resize_bilinear;
use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::synthesis::{SynthesisConfig, SynthesizedAnomaly};
use crate::tensor::{dims2, dims3, from_vec, slice_of, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::{Path, PathBuf};

/// Standard ImageNet channel statistics; the pretrained teacher assumes
/// inputs standardized with these.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub image_path: PathBuf,
    pub label: Label,
    pub mask_path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    pub split: Split,
    pub entries: Vec<Entry>,
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image_file(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Scan one category split into a sorted index. Train entries are all
/// normal; anomalous test entries must have a resolvable ground-truth mask.
pub fn load_dataset(root: &Path, category: &str, split: Split) -> Result<DatasetIndex> {
    let cat_dir = root.join(category);
    let split_dir = cat_dir.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::DatasetNotFound(split_dir));
    }
    let mut entries = Vec::new();
    match split {
        Split::Train => {
            let good = split_dir.join("good");
            if !good.is_dir() {
                return Err(Error::DatasetNotFound(good));
            }
            for p in list_images(&good)? {
                entries.push(Entry {
                    image_path: p,
                    label: Label::Normal,
                    mask_path: None,
                });
            }
        }
        Split::Test => {
            let mut defect_dirs: Vec<PathBuf> = std::fs::read_dir(&split_dir)
                .map_err(|e| Error::io(&split_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            defect_dirs.sort();
            for dir in defect_dirs {
                let defect = dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                let normal = defect == "good";
                for p in list_images(&dir)? {
                    let mask_path = if normal {
                        None
                    } else {
                        let stem = p
                            .file_stem()
                            .and_then(|s| s.to_str())
                            .ok_or_else(|| Error::CorruptDataset(format!("bad file name {p:?}")))?;
                        let mask = cat_dir
                            .join("ground_truth")
                            .join(&defect)
                            .join(format!("{stem}_mask.png"));
                        if !mask.is_file() {
                            return Err(Error::CorruptDataset(format!(
                                "missing mask for {} (expected {})",
                                p.display(),
                                mask.display()
                            )));
                        }
                        Some(mask)
                    };
                    entries.push(Entry {
                        image_path: p,
                        label: if normal { Label::Normal } else { Label::Anomalous },
                        mask_path,
                    });
                }
            }
        }
    }
    entries.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        category: category.to_string(),
        split,
        entries,
    })
}

/// Per-channel standardization constants.
#[derive(Clone, Copy, Debug)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl Normalization {
    pub fn apply(&self, raw: &Tensor) -> Tensor {
        let (c, h, w) = dims3(raw);
        assert_eq!(c, 3);
        let xs = slice_of(raw);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..3 {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for p in 0..h * w {
                out[ch * h * w + p] = (xs[ch * h * w + p] - m) / s;
            }
        }
        from_vec(&[c, h, w], out)
    }

    pub fn invert(&self, norm: &Tensor) -> Tensor {
        let (c, h, w) = dims3(norm);
        assert_eq!(c, 3);
        let xs = slice_of(norm);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..3 {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for p in 0..h * w {
                out[ch * h * w + p] = xs[ch * h * w + p] * s + m;
            }
        }
        from_vec(&[c, h, w], out)
    }
}

/// Decode an RGB image, convert to [0,1], and bilinearly resize to
/// `input_size` squared. The resize runs on our own kernel so results are
/// stable regardless of decoder-side resampling.
pub fn load_image_raw(path: &Path, input_size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    for (y, row) in img.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = px.0[ch] as f64 / 255.0;
            }
        }
    }
    let t = from_vec(&[3, h, w], data);
    if h == input_size && w == input_size {
        Ok(t)
    } else {
        Ok(resize_bilinear(&t, input_size, input_size))
    }
}

/// Standardized model input.
pub fn load_image(path: &Path, input_size: usize, norm: &Normalization) -> Result<Tensor> {
    Ok(norm.apply(&load_image_raw(path, input_size)?))
}

/// Ground-truth mask: nearest-neighbor resize, then binarize at the 8-bit
/// midpoint so interpolation never invents gray values.
pub fn load_mask(path: &Path, input_size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f64; input_size * input_size];
    for oy in 0..input_size {
        let sy = ((oy as f64 + 0.5) * h as f64 / input_size as f64 - 0.5)
            .round()
            .clamp(0.0, (h - 1) as f64) as u32;
        for ox in 0..input_size {
            let sx = ((ox as f64 + 0.5) * w as f64 / input_size as f64 - 0.5)
                .round()
                .clamp(0.0, (w - 1) as f64) as u32;
            let v = img.get_pixel(sx, sy).0[0];
            out[oy * input_size + ox] = if v as f64 > 127.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(from_vec(&[input_size, input_size], out))
}

/// Write a [0,1] RGB tensor as an 8-bit image; format from the extension.
pub fn save_rgb(path: &Path, raw: &Tensor) -> Result<()> {
    let (c, h, w) = dims3(raw);
    assert_eq!(c, 3, "save_rgb expects 3 channels");
    let xs = slice_of(raw);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(xs[y * w + x]),
                to_u8(xs[(h + y) * w + x]),
                to_u8(xs[(2 * h + y) * w + x]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Write a [0,1] single-channel tensor as an 8-bit grayscale image.
pub fn save_gray(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = dims2(map);
    let xs = slice_of(map);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(xs[y * w + x])]));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Where synthesis textures come from. "self" reuses other training images
/// under random augmentation so the pipeline runs without external data.
pub enum TextureSource {
    SelfAugment { pool: Vec<PathBuf> },
    Directory { files: Vec<PathBuf> },
}

impl TextureSource {
    pub fn from_config(cfg: &SynthesisConfig, train_index: &DatasetIndex) -> Result<Self> {
        if cfg.texture_source == "self" {
            let pool: Vec<PathBuf> = train_index
                .entries
                .iter()
                .map(|e| e.image_path.clone())
                .collect();
            if pool.is_empty() {
                return Err(Error::Config(
                    "texture_source \"self\" needs a nonempty training set".into(),
                ));
            }
            Ok(TextureSource::SelfAugment { pool })
        } else {
            let dir = PathBuf::from(&cfg.texture_source);
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "texture directory {} does not exist",
                    dir.display()
                )));
            }
            let files = list_images(&dir)?;
            if files.is_empty() {
                return Err(Error::Config(format!(
                    "texture directory {} contains no images",
                    dir.display()
                )));
            }
            Ok(TextureSource::Directory { files })
        }
    }

    /// Draw one texture as a raw [0,1] tensor at `input_size` squared.
    /// Self-augmented textures get random flips, quarter rotations, and a
    /// per-channel affine color jitter.
    pub fn sample(&self, input_size: usize, exclude: Option<&Path>, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "texture"));
        match self {
            TextureSource::Directory { files } => {
                let p = files.choose(&mut rng).expect("nonempty checked at build");
                load_image_raw(p, input_size)
            }
            TextureSource::SelfAugment { pool } => {
                let candidates: Vec<&PathBuf> = match exclude {
                    Some(ex) if pool.len() > 1 => {
                        pool.iter().filter(|p| p.as_path() != ex).collect()
                    }
                    _ => pool.iter().collect(),
                };
                let p = candidates[rng.random_range(0..candidates.len())];
                let mut t = load_image_raw(p, input_size)?;
                if rng.random_range(0..2) == 1 {
                    t = flip_h(&t);
                }
                if rng.random_range(0..2) == 1 {
                    t = flip_v(&t);
                }
                for _ in 0..rng.random_range(0..4u32) {
                    t = rot90(&t);
                }
                let xs = slice_of(&t);
                let mut out = Vec::with_capacity(xs.len());
                let (_, h, w) = dims3(&t);
                for ch in 0..3 {
                    let scale: f64 = rng.random_range(0.4..1.8);
                    let shift: f64 = rng.random_range(-0.4..0.4);
                    for p in 0..h * w {
                        out.push((xs[ch * h * w + p] * scale + shift).clamp(0.0, 1.0));
                    }
                }
                Ok(from_vec(&[3, h, w], out))
            }
        }
    }
}

fn flip_h(t: &Tensor) -> Tensor {
    let (c, h, w) = dims3(t);
    let xs = slice_of(t);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = xs[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    from_vec(&[c, h, w], out)
}

fn flip_v(t: &Tensor) -> Tensor {
    let (c, h, w) = dims3(t);
    let xs = slice_of(t);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            out[(ch * h + y) * w..(ch * h + y + 1) * w]
                .copy_from_slice(&xs[(ch * h + (h - 1 - y)) * w..(ch * h + (h - y)) * w]);
        }
    }
    from_vec(&[c, h, w], out)
}

fn rot90(t: &Tensor) -> Tensor {
    let (c, h, w) = dims3(t);
    let xs = slice_of(t);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * w + x) * h + (h - 1 - y)] = xs[(ch * h + y) * w + x];
            }
        }
    }
    from_vec(&[c, w, h], out)
}

/// One normal-anomalous input pair. Raw images are kept alongside the
/// standardized ones for previews and reconstruction tests.
pub struct TrainingPair {
    pub normal: Tensor,
    pub anomalous: Tensor,
    pub normal_raw: Tensor,
    pub anomalous_raw: Tensor,
    pub gt_mask: Tensor,
    pub foreground: Tensor,
    pub beta: f64,
}

/// Bundle of everything pair assembly needs besides the image itself.
pub struct Synthesizer<'a> {
    pub cfg: &'a SynthesisConfig,
    pub textures: &'a TextureSource,
    pub norm: Normalization,
    pub input_size: usize,
}

/// Assemble a training pair from a raw normal image. Fully determined by
/// (image, seed): texture choice, augmentation, noise, and opacity all
/// derive from `seed`.
pub fn make_training_pair(
    normal_raw: &Tensor,
    source_path: Option<&Path>,
    synth: &Synthesizer,
    seed: u64,
) -> Result<TrainingPair> {
    let texture = synth.textures.sample(synth.input_size, source_path, seed)?;
    let fg = match synth.cfg.foreground_mode {
        crate::synthesis::ForegroundMode::Auto => {
            crate::synthesis::extract_foreground(normal_raw, &synth.cfg.foreground)
        }
        crate::synthesis::ForegroundMode::Full => {
            let (_, h, w) = dims3(normal_raw);
            crate::synthesis::full_foreground(h, w)
        }
    };
    let SynthesizedAnomaly { image, mask, beta } =
        crate::synthesis::synthesize_with_foreground(normal_raw, &texture, &fg, synth.cfg, seed)?;
    Ok(TrainingPair {
        normal: synth.norm.apply(normal_raw),
        anomalous: synth.norm.apply(&image),
        normal_raw: normal_raw.clone(),
        anomalous_raw: image,
        gt_mask: mask,
        foreground: fg.data,
        beta,
    })
}

