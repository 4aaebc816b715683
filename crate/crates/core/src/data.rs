//! Folder datasets (`<root>/images/*`, `<root>/masks/*.png`) and batching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ImageBatch, MaskBatch};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
/// Gray levels strictly above this are foreground.
pub const MASK_THRESHOLD: u8 = 127;
pub const DEFAULT_IMAGE_SIZE: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Stem-paired, stem-sorted list of image/mask files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub samples: Vec<Sample>,
}

fn has_image_ext(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn list_by_stem(dir: &Path, masks_only_png: bool) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = if masks_only_png {
            path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")).unwrap_or(false)
        } else {
            has_image_ext(&path)
        };
        if !ok || !path.is_file() {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset(format!(
                "duplicate stem `{stem}`: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn check_decodable(path: &Path) -> Result<()> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(())
}

/// Scans `<root>/images` and `<root>/masks`, pairing files by stem.
pub fn load_manifest(root: &Path, name: &str) -> Result<DatasetManifest> {
    let images = list_by_stem(&root.join("images"), false)?;
    let masks = list_by_stem(&root.join("masks"), true)?;
    let unpaired: Vec<&str> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: unpaired files for stems: {}",
            root.display(),
            unpaired.join(", ")
        )));
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("{}: empty dataset", root.display())));
    }
    let samples = images
        .into_iter()
        .map(|(stem, image)| {
            let mask = masks[&stem].clone();
            check_decodable(&image)?;
            check_decodable(&mask)?;
            Ok(Sample { stem, image, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        name: name.to_string(),
        split: Split::Train,
        samples,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn image_paths(&self) -> Vec<&Path> {
        self.samples.iter().map(|s| s.image.as_path()).collect()
    }

    pub fn mask_paths(&self) -> Vec<&Path> {
        self.samples.iter().map(|s| s.mask.as_path()).collect()
    }

    /// Concatenates several manifests; stems are prefixed with the source
    /// name so identically named files stay distinct.
    pub fn merge(name: &str, parts: &[DatasetManifest]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Dataset("nothing to merge".into()));
        }
        let mut samples: Vec<Sample> = parts
            .iter()
            .flat_map(|m| {
                m.samples.iter().map(move |s| Sample {
                    stem: if parts.len() > 1 {
                        format!("{}/{}", m.name, s.stem)
                    } else {
                        s.stem.clone()
                    },
                    image: s.image.clone(),
                    mask: s.mask.clone(),
                })
            })
            .collect();
        samples.sort_by(|a, b| a.stem.cmp(&b.stem));
        Ok(Self {
            name: name.to_string(),
            split: parts[0].split,
            samples,
        })
    }

    /// One `stem<TAB>image<TAB>mask` line per sample.
    pub fn to_listing(&self) -> String {
        self.samples
            .iter()
            .map(|s| format!("{}\t{}\t{}\n", s.stem, s.image.display(), s.mask.display()))
            .collect()
    }

    pub fn from_listing(name: &str, text: &str) -> Result<Self> {
        let samples = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let cols: Vec<&str> = line.split('\t').collect();
                match cols.as_slice() {
                    [stem, image, mask] => Ok(Sample {
                        stem: stem.to_string(),
                        image: PathBuf::from(image),
                        mask: PathBuf::from(mask),
                    }),
                    _ => Err(Error::Dataset(format!(
                        "manifest line {}: expected 3 tab-separated fields",
                        i + 1
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        Ok(Self {
            name: name.to_string(),
            split: Split::Train,
            samples,
        })
    }

    pub fn write_listing(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_listing()).map_err(|e| Error::io(path, e))
    }

    pub fn read_listing(path: &Path, name: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_listing(name, &text)
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open_image(path)?.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(open_image(path)?.to_luma8())
}

/// Bilinear resize to `size × size`, scaled to `[0, 1]`, shape `[size, size, 3]`.
pub fn prepare_image(img: &RgbImage, height: usize, width: usize) -> Vec<f32> {
    let resized = if img.dimensions() == (width as u32, height as u32) {
        img.clone()
    } else {
        imageops::resize(img, width as u32, height as u32, FilterType::Triangle)
    };
    resized.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect()
}

/// Nearest-neighbour resize then thresholding at [`MASK_THRESHOLD`].
pub fn prepare_mask(mask: &GrayImage, height: usize, width: usize) -> Vec<u8> {
    let resized = if mask.dimensions() == (width as u32, height as u32) {
        mask.clone()
    } else {
        imageops::resize(mask, width as u32, height as u32, FilterType::Nearest)
    };
    resized.as_raw().iter().map(|&v| u8::from(v > MASK_THRESHOLD)).collect()
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: ImageBatch,
    pub masks: MaskBatch,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub image_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub hflip: bool,
    pub vflip: bool,
    /// Per-batch rescale by {0.75, 1, 1.25}, rounded to a multiple of 32.
    pub multi_scale: bool,
    /// Batches prepared ahead on a worker thread; 0 prepares inline.
    pub prefetch: usize,
}

impl BatchOptions {
    pub fn new(batch_size: usize, image_size: usize) -> Self {
        Self {
            batch_size,
            image_size,
            shuffle: false,
            seed: 0,
            hflip: false,
            vflip: false,
            multi_scale: false,
            prefetch: 0,
        }
    }
}

/// Sample order for one pass: identity, or a seeded permutation.
pub fn sample_order(n: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

fn load_batch(manifest: &DatasetManifest, idx: &[usize], opts: &BatchOptions, batch_no: usize) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (batch_no as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let size = if opts.multi_scale {
        let rate = [0.75, 1.0, 1.25][rng.random_range(0..3)];
        ((((opts.image_size as f64 * rate) / 32.0).round() as usize) * 32).max(32)
    } else {
        opts.image_size
    };
    let b = idx.len();
    let mut pixels = Vec::with_capacity(b * size * size * 3);
    let mut masks = Vec::with_capacity(b * size * size);
    let mut ids = Vec::with_capacity(b);
    for &i in idx {
        let s = &manifest.samples[i];
        pixels.extend(prepare_image(&read_rgb(&s.image)?, size, size));
        masks.extend(prepare_mask(&read_gray(&s.mask)?, size, size));
        ids.push(s.stem.clone());
    }
    let mut pixels = Array4::from_shape_vec((b, size, size, 3), pixels).map_err(|e| Error::shape(e.to_string()))?;
    let mut masks = Array4::from_shape_vec((b, size, size, 1), masks).map_err(|e| Error::shape(e.to_string()))?;
    for i in 0..b {
        let flip_h = opts.hflip && rng.random_bool(0.5);
        let flip_v = opts.vflip && rng.random_bool(0.5);
        for (flip, axis) in [(flip_h, Axis(1)), (flip_v, Axis(0))] {
            if flip {
                pixels.index_axis_mut(Axis(0), i).invert_axis(axis);
                masks.index_axis_mut(Axis(0), i).invert_axis(axis);
            }
        }
    }
    // invert_axis only flips strides; make the layout standard again
    let pixels = pixels.as_standard_layout().to_owned();
    let masks = masks.as_standard_layout().to_owned();
    Ok(Batch {
        images: ImageBatch::new(pixels)?,
        masks: MaskBatch::new(masks)?,
        ids,
    })
}

/// Ordered stream of batches; the last batch may be smaller.
pub struct BatchStream {
    inner: StreamInner,
}

enum StreamInner {
    Inline {
        manifest: DatasetManifest,
        chunks: std::vec::IntoIter<Vec<usize>>,
        opts: BatchOptions,
        next_no: usize,
    },
    Prefetch(mpsc::IntoIter<Result<Batch>>),
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.inner {
            StreamInner::Inline {
                manifest,
                chunks,
                opts,
                next_no,
            } => {
                let idx = chunks.next()?;
                let out = load_batch(manifest, &idx, opts, *next_no);
                *next_no += 1;
                Some(out)
            }
            StreamInner::Prefetch(rx) => rx.next(),
        }
    }
}

pub fn make_batches(manifest: &DatasetManifest, opts: BatchOptions) -> Result<BatchStream> {
    if opts.batch_size < 1 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if opts.image_size < 1 {
        return Err(Error::invalid("image size must be at least 1"));
    }
    let order = sample_order(manifest.len(), opts.shuffle, opts.seed);
    let chunks: Vec<Vec<usize>> = order.chunks(opts.batch_size).map(<[usize]>::to_vec).collect();
    if opts.prefetch == 0 {
        return Ok(BatchStream {
            inner: StreamInner::Inline {
                manifest: manifest.clone(),
                chunks: chunks.into_iter(),
                opts,
                next_no: 0,
            },
        });
    }
    let (tx, rx) = mpsc::sync_channel(opts.prefetch);
    let manifest = manifest.clone();
    thread::spawn(move || {
        for (no, idx) in chunks.iter().enumerate() {
            let batch = load_batch(&manifest, idx, &opts, no);
            let failed = batch.is_err();
            if tx.send(batch).is_err() || failed {
                break;
            }
        }
    });
    Ok(BatchStream {
        inner: StreamInner::Prefetch(rx.into_iter()),
    })
}
