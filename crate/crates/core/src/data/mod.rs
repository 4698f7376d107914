//! Image ingestion and encoding: the six-channel color encoding
//! [r,g,b,1-r,1-g,1-b], zero-channel padding for hypercomplex models,
//! crop/flip augmentation, a deterministic synthetic shapes dataset, and a
//! folder-per-class loader with a plain-text manifest cache.

mod synth;

pub use synth::synth_shapes;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HxError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_CACHE: &str = "hx_manifest.tsv";

/// Decoded RGB image, channel-major [3,H,W], values in [0,1].
#[derive(Clone, Debug)]
pub struct ImageBuf {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> ImageBuf {
        debug_assert_eq!(data.len(), 3 * h * w);
        ImageBuf { h, w, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct SampleMeta {
    pub rel_path: String,
    pub label: usize,
    pub split: Split,
    /// Ground-truth shape box [x0, y0, x1, y1), present for synthetic data.
    pub bbox: Option<[usize; 4]>,
}

/// Index over one dataset: sorted class names, per-sample metadata, decoded
/// images, and a deterministic train/test split.
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<SampleMeta>,
    pub split_seed: u64,
    pub warnings: Vec<String>,
    images: Vec<ImageBuf>,
}

pub const TRAIN_FRACTION: f64 = 0.75;

impl DatasetManifest {
    pub(crate) fn assemble(
        root: PathBuf,
        classes: Vec<String>,
        mut samples: Vec<SampleMeta>,
        images: Vec<ImageBuf>,
        split_seed: u64,
        warnings: Vec<String>,
    ) -> DatasetManifest {
        // deterministic per-class split: shuffle indices, first 75% train
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        for (class, idxs) in by_class {
            let mut order = idxs.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
            rng.set_stream(class as u64 + 1);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let train_count = ((order.len() as f64) * TRAIN_FRACTION).round() as usize;
            for (rank, &i) in order.iter().enumerate() {
                samples[i].split = if rank < train_count {
                    Split::Train
                } else {
                    Split::Test
                };
            }
        }
        DatasetManifest {
            root,
            classes,
            samples,
            split_seed,
            warnings,
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image(&self, i: usize) -> &ImageBuf {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn class_samples(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].label == class)
            .collect()
    }

    /// One "relative/path<TAB>class_index" line per sample.
    pub fn index_text(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&format!("{}\t{}\n", s.rel_path, s.label));
        }
        out
    }
}

/// [r,g,b] -> [r,g,b,1-r,1-g,1-b]. Values must already lie in [0,1].
pub fn encode_six_channel(rgb: &ImageBuf) -> Result<Vec<f32>> {
    for &v in &rgb.data {
        if !(0.0..=1.0).contains(&v) {
            return Err(HxError::Dataset(format!(
                "pixel value {v} outside [0,1]; normalize before encoding"
            )));
        }
    }
    let plane = rgb.h * rgb.w;
    let mut out = vec![0.0f32; 6 * plane];
    out[..3 * plane].copy_from_slice(&rgb.data);
    for c in 0..3 {
        for p in 0..plane {
            out[(c + 3) * plane + p] = 1.0 - rgb.data[c * plane + p];
        }
    }
    Ok(out)
}

/// Append zero channels up to `target` (8 for quaternion-like models).
pub fn pad_channels(six: &[f32], plane: usize, target: usize) -> Vec<f32> {
    debug_assert_eq!(six.len() % plane, 0);
    let have = six.len() / plane;
    debug_assert!(target >= have);
    let mut out = vec![0.0f32; target * plane];
    out[..six.len()].copy_from_slice(six);
    out
}

/// Two zero padding channels after the six-channel encoding.
pub fn pad_quaternion(six: &[f32], plane: usize) -> Vec<f32> {
    pad_channels(six, plane, 8)
}

/// Encode an RGB image for a model expecting `target_channels`.
pub fn encode_for_model(rgb: &ImageBuf, target_channels: usize) -> Result<Vec<f32>> {
    let six = encode_six_channel(rgb)?;
    if target_channels == 6 {
        Ok(six)
    } else {
        Ok(pad_channels(&six, rgb.h * rgb.w, target_channels))
    }
}

/// Stack encoded samples into an input tensor [N, C, H, W].
pub fn batch_tensor(images: &[Vec<f32>], channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * channels * h * w);
    for img in images {
        debug_assert_eq!(img.len(), channels * h * w);
        data.extend_from_slice(img);
    }
    Tensor::from_vec(&[images.len(), channels, h, w], data)
}

/// Channelwise bilinear resize.
pub fn bilinear_resize(
    src: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    if oh == h && ow == w {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; channels * oh * ow];
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for c in 0..channels {
        let plane = &src[c * h * w..][..h * w];
        for y in 0..oh {
            // align sample centers
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f32;
            for x in 0..ow {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out[(c * oh + y) * ow + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub fn hflip(img: &ImageBuf) -> ImageBuf {
    let mut data = vec![0.0f32; img.data.len()];
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                data[(c * img.h + y) * img.w + x] =
                    img.data[(c * img.h + y) * img.w + (img.w - 1 - x)];
            }
        }
    }
    ImageBuf::new(img.h, img.w, data)
}

/// Crop a square window and bilinearly resize back to the source size.
pub fn resized_crop(img: &ImageBuf, top: usize, left: usize, side: usize) -> ImageBuf {
    debug_assert!(top + side <= img.h && left + side <= img.w);
    let mut crop = vec![0.0f32; 3 * side * side];
    for c in 0..3 {
        for y in 0..side {
            let src = (c * img.h + top + y) * img.w + left;
            let dst = (c * side + y) * side;
            crop[dst..dst + side].copy_from_slice(&img.data[src..src + side]);
        }
    }
    ImageBuf::new(img.h, img.w, bilinear_resize(&crop, 3, side, side, img.h, img.w))
}

/// Training augmentation, applied before encoding: random resized crop with
/// area scale 0.6..1.0 and horizontal flip with p = 0.5. The per-sample rng
/// stream makes results independent of worker scheduling.
pub fn augment(img: &ImageBuf, rng: &mut impl Rng) -> ImageBuf {
    let min_side = img.h.min(img.w);
    let area_scale = rng.gen_range(0.6..=1.0f64);
    let side = ((min_side as f64) * area_scale.sqrt()).round() as usize;
    let side = side.clamp(1, min_side);
    let top = rng.gen_range(0..=img.h - side);
    let left = rng.gen_range(0..=img.w - side);
    let cropped = resized_crop(img, top, left, side);
    if rng.gen_bool(0.5) {
        hflip(&cropped)
    } else {
        cropped
    }
}

/// Deterministic augmentation stream per (seed, sample id, epoch).
pub fn augment_rng(seed: u64, sample_id: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) ^ (sample_id as u64) ^ 0x517c_c1b7_2722_0a95);
    rng
}

fn decode_file(path: &Path, image_size: usize) -> Result<ImageBuf> {
    let img = image::open(path)?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut chw = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                chw[(c * h + y) * w + x] = px[c] as f32 / 255.0;
            }
        }
    }
    // test-time geometry: resize the short side, then center crop
    let scale = image_size as f32 / h.min(w) as f32;
    let (rh, rw) = (
        ((h as f32 * scale).round() as usize).max(image_size),
        ((w as f32 * scale).round() as usize).max(image_size),
    );
    let resized = bilinear_resize(&chw, 3, h, w, rh, rw);
    let top = (rh - image_size) / 2;
    let left = (rw - image_size) / 2;
    let mut out = vec![0.0f32; 3 * image_size * image_size];
    for c in 0..3 {
        for y in 0..image_size {
            let src = (c * rh + top + y) * rw + left;
            let dst = (c * image_size + y) * image_size;
            out[dst..dst + image_size].copy_from_slice(&resized[src..src + image_size]);
        }
    }
    Ok(ImageBuf::new(image_size, image_size, out))
}

/// Load a folder-per-class dataset (PNG or PPM files). Class indices follow
/// sorted directory names; sample order is sorted within each class, so the
/// manifest is independent of filesystem enumeration order. Unreadable
/// files are skipped with a warning; an empty class is an error.
pub fn load_image_folder(root: &Path, image_size: usize, split_seed: u64) -> Result<DatasetManifest> {
    let cache_path = root.join(MANIFEST_CACHE);
    let listing: Vec<(String, usize)>;
    let classes: Vec<String>;

    if cache_path.is_file() {
        let text = std::fs::read_to_string(&cache_path)?;
        let mut entries = Vec::new();
        let mut class_set: BTreeMap<usize, ()> = BTreeMap::new();
        for line in text.lines() {
            let (rel, cls) = line.split_once('\t').ok_or_else(|| {
                HxError::Dataset(format!("malformed manifest line {line:?}"))
            })?;
            let cls: usize = cls
                .parse()
                .map_err(|_| HxError::Dataset(format!("bad class index in {line:?}")))?;
            class_set.insert(cls, ());
            entries.push((rel.to_string(), cls));
        }
        let mut names: Vec<String> = entries
            .iter()
            .map(|(rel, _)| rel.split('/').next().unwrap_or("").to_string())
            .collect();
        names.sort();
        names.dedup();
        classes = names;
        listing = entries;
    } else {
        let mut class_dirs: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                class_dirs.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(HxError::Dataset(format!(
                "no class directories under {}",
                root.display()
            )));
        }
        let mut entries = Vec::new();
        for (ci, cname) in class_dirs.iter().enumerate() {
            let mut files: Vec<String> = Vec::new();
            for entry in std::fs::read_dir(root.join(cname))? {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let lower = name.to_lowercase();
                if lower.ends_with(".png") || lower.ends_with(".ppm") || lower.ends_with(".pgm") {
                    files.push(name);
                }
            }
            files.sort();
            for f in files {
                entries.push((format!("{cname}/{f}"), ci));
            }
        }
        classes = class_dirs;
        listing = entries;
    }

    let mut samples = Vec::new();
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    let mut per_class_count = vec![0usize; classes.len()];
    for (rel, cls) in &listing {
        match decode_file(&root.join(rel), image_size) {
            Ok(img) => {
                samples.push(SampleMeta {
                    rel_path: rel.clone(),
                    label: *cls,
                    split: Split::Train,
                    bbox: None,
                });
                images.push(img);
                per_class_count[*cls] += 1;
            }
            Err(e) => warnings.push(format!("skipped {rel}: {e}")),
        }
    }
    for (ci, &count) in per_class_count.iter().enumerate() {
        if count == 0 {
            return Err(HxError::Dataset(format!(
                "class {:?} has no readable samples",
                classes[ci]
            )));
        }
    }

    let manifest = DatasetManifest::assemble(
        root.to_path_buf(),
        classes,
        samples,
        images,
        split_seed,
        warnings,
    );
    if !cache_path.is_file() {
        std::fs::write(&cache_path, manifest.index_text())?;
    }
    Ok(manifest)
}
