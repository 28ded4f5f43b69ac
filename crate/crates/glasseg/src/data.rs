//! Corpus ingestion, augmentation, inference resizing, dataset statistics,
//! and a synthetic corpus generator for desk-scale runs.
//!
//! Corpus layout on disk: `<root>/image/*.{png,jpg,jpeg}` paired with
//! `<root>/mask/<stem>.png` (8-bit grayscale, value >= 128 means glass).

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::resize_bilinear;

/// Gray values at or above this decode to glass.
pub const MASK_GLASS_THRESHOLD: u8 = 128;

/// Default square side images are resized to for training and inference.
pub const DEFAULT_SIZE: usize = 352;

/// One image/mask pair. The image is 3xHxW in [0, 1] before backbone
/// normalization; the mask has the same spatial size.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub image: Array3<f64>,
    pub mask: Array2<bool>,
}

impl SamplePair {
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    /// Glass pixels / total pixels.
    pub fn area_fraction(&self) -> f64 {
        let n = self.mask.len();
        self.mask.iter().filter(|&&g| g).count() as f64 / n as f64
    }
}

pub fn decode_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn decode_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = p.0[0] >= MASK_GLASS_THRESHOLD;
    }
    Ok(out)
}

/// Load all pairs under `root`, sorted lexicographically by id. Every image
/// must have a mask named `<stem>.png`; decode errors name the file.
pub fn load_corpus(root: &Path) -> Result<Vec<SamplePair>> {
    let image_dir = root.join("image");
    let mask_dir = root.join("mask");
    if !image_dir.is_dir() || !mask_dir.is_dir() {
        return Err(Error::Data(format!(
            "corpus root {} must contain image/ and mask/",
            root.display()
        )));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&image_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    entries.sort();

    let mut pairs = Vec::with_capacity(entries.len());
    for img_path in entries {
        let stem = img_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad file name {}", img_path.display())))?
            .to_string();
        let mask_path = mask_dir.join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(Error::MissingCounterpart(img_path));
        }
        let image = decode_image(&img_path)?;
        let mask = decode_mask(&mask_path)?;
        let (_, h, w) = image.dim();
        if mask.dim() != (h, w) {
            return Err(Error::Data(format!(
                "{stem}: image {h}x{w} vs mask {}x{}",
                mask.dim().0,
                mask.dim().1
            )));
        }
        pairs.push(SamplePair {
            id: stem,
            image,
            mask,
        });
    }
    Ok(pairs)
}

/// Bilinear resize of a 3xHxW image (half-pixel centers).
pub fn resize_image(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, _, _) = image.dim();
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = image.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resize_bilinear(&plane, out_h, out_w));
    }
    out
}

/// Nearest-neighbor mask resize; keeps the mask strictly binary.
pub fn resize_mask_nearest(mask: &Array2<bool>, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let src = |o: usize, out_len: usize, in_len: usize| -> usize {
        let s = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
        s.round().clamp(0.0, (in_len - 1) as f64) as usize
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        mask[(src(i, out_h, h), src(j, out_w, w))]
    })
}

/// Mirror image and mask about the vertical axis.
pub fn flip_horizontal(sample: &SamplePair) -> SamplePair {
    let (_, _, w) = sample.image.dim();
    let (_, mw) = sample.mask.dim();
    SamplePair {
        id: sample.id.clone(),
        image: Array3::from_shape_fn(sample.image.dim(), |(c, i, j)| {
            sample.image[(c, i, w - 1 - j)]
        }),
        mask: Array2::from_shape_fn(sample.mask.dim(), |(i, j)| sample.mask[(i, mw - 1 - j)]),
    }
}

/// Resize image (bilinear) and mask (nearest) to a common square side.
pub fn resize_pair(sample: &SamplePair, side: usize) -> SamplePair {
    SamplePair {
        id: sample.id.clone(),
        image: resize_image(&sample.image, side, side),
        mask: resize_mask_nearest(&sample.mask, side, side),
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct AugmentConfig {
    /// Square side at scale 1.0.
    pub base_size: usize,
    /// Multi-scale factors; one is drawn uniformly per call.
    pub scales: Vec<f64>,
    pub flip_prob: f64,
    /// When off, scale is fixed at 1.0.
    pub multiscale: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            base_size: DEFAULT_SIZE,
            scales: vec![0.75, 1.0, 1.25],
            flip_prob: 0.5,
            multiscale: true,
        }
    }
}

impl AugmentConfig {
    /// Draw a training side length: scale * base_size, rounded.
    pub fn draw_side<R: Rng>(&self, rng: &mut R) -> usize {
        let s = if self.multiscale {
            *self.scales.choose(rng).expect("nonempty scale set")
        } else {
            1.0
        };
        (s * self.base_size as f64).round() as usize
    }
}

/// Random horizontal flip plus multi-scale square resize, identical
/// parameters for image and mask. Deterministic under a fixed rng state.
pub fn augment_train<R: Rng>(sample: &SamplePair, rng: &mut R, cfg: &AugmentConfig) -> SamplePair {
    let flip = rng.gen_bool(cfg.flip_prob);
    let side = cfg.draw_side(rng);
    let flipped;
    let source = if flip {
        flipped = flip_horizontal(sample);
        &flipped
    } else {
        sample
    };
    resize_pair(source, side)
}

/// Maps a square prediction back to the original image size.
pub struct RestoreFn {
    orig_h: usize,
    orig_w: usize,
}

impl RestoreFn {
    pub fn restore(&self, pred: &Array2<f64>) -> Array2<f64> {
        resize_bilinear(pred, self.orig_h, self.orig_w)
    }
}

/// Bilinear resize to `side` x `side` for inference, with a closure-like
/// handle that resizes the prediction back to the original size.
pub fn prepare_inference(image: &Array3<f64>, side: usize) -> Result<(Array3<f64>, RestoreFn)> {
    let (_, h, w) = image.dim();
    if h < 2 || w < 2 || side < 2 {
        return Err(Error::Data(format!("degenerate size {h}x{w} -> {side}")));
    }
    Ok((
        resize_image(image, side, side),
        RestoreFn {
            orig_h: h,
            orig_w: w,
        },
    ))
}

pub const HEATMAP_SIDE: usize = 64;
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub count: usize,
    /// Mean of masks resized to 64x64; values in [0, 1].
    pub location_heatmap: Vec<Vec<f64>>,
    /// Glass-area fraction, 10 uniform bins over [0, 1].
    pub area_histogram: [u64; HISTOGRAM_BINS],
    /// |mean intensity inside - outside|, 10 uniform bins over [0, 1].
    pub contrast_histogram: [u64; HISTOGRAM_BINS],
}

fn bin_of(v: f64) -> usize {
    ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

/// Mean gray intensity inside vs outside the mask; 0 when either region is
/// empty (the difference is undefined for one-class masks).
pub fn contrast_of(sample: &SamplePair) -> f64 {
    let (_, h, w) = sample.image.dim();
    let mut inside = (0.0, 0u64);
    let mut outside = (0.0, 0u64);
    for i in 0..h {
        for j in 0..w {
            let gray =
                (sample.image[(0, i, j)] + sample.image[(1, i, j)] + sample.image[(2, i, j)]) / 3.0;
            if sample.mask[(i, j)] {
                inside.0 += gray;
                inside.1 += 1;
            } else {
                outside.0 += gray;
                outside.1 += 1;
            }
        }
    }
    if inside.1 == 0 || outside.1 == 0 {
        return 0.0;
    }
    (inside.0 / inside.1 as f64 - outside.0 / outside.1 as f64).abs()
}

pub fn compute_stats(corpus: &[SamplePair]) -> Result<DatasetStats> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut heat = Array2::<f64>::zeros((HEATMAP_SIDE, HEATMAP_SIDE));
    let mut area_histogram = [0u64; HISTOGRAM_BINS];
    let mut contrast_histogram = [0u64; HISTOGRAM_BINS];
    for s in corpus {
        let as_f = s.mask.mapv(|g| if g { 1.0 } else { 0.0 });
        heat += &resize_bilinear(&as_f, HEATMAP_SIDE, HEATMAP_SIDE);
        area_histogram[bin_of(s.area_fraction())] += 1;
        contrast_histogram[bin_of(contrast_of(s))] += 1;
    }
    heat.mapv_inplace(|v| (v / corpus.len() as f64).clamp(0.0, 1.0));
    Ok(DatasetStats {
        count: corpus.len(),
        location_heatmap: heat.outer_iter().map(|r| r.to_vec()).collect(),
        area_histogram,
        contrast_histogram,
    })
}

/// Synthetic pair: smooth random background, one rectangular "glass" region
/// rendered as a blurred copy of the background plus an additive highlight,
/// and the exact rectangle as the mask. Area fraction lands in [0.05, 0.6].
fn synth_sample(index: usize, side: usize, seed: u64) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);

    // Low-frequency background: random coarse grid upsampled bilinearly.
    let coarse = 6;
    let mut image = Array3::<f64>::zeros((3, side, side));
    for c in 0..3 {
        let grid = Array2::from_shape_fn((coarse, coarse), |_| rng.gen_range(0.15..0.85));
        image
            .index_axis_mut(ndarray::Axis(0), c)
            .assign(&resize_bilinear(&grid, side, side));
    }
    // Fine texture so the glass blur is visible.
    for v in image.iter_mut() {
        *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }

    // Rectangle with area fraction in [0.05, 0.6].
    let (r0, r1, c0, c1) = loop {
        let rh = rng.gen_range(side / 4..=(4 * side / 5).max(side / 4 + 1));
        let rw = rng.gen_range(side / 4..=(4 * side / 5).max(side / 4 + 1));
        let frac = (rh * rw) as f64 / (side * side) as f64;
        if !(0.05..=0.6).contains(&frac) {
            continue;
        }
        let r0 = rng.gen_range(0..=side - rh);
        let c0 = rng.gen_range(0..=side - rw);
        break (r0, r0 + rh, c0, c0 + rw);
    };
    let mask = Array2::from_shape_fn((side, side), |(i, j)| {
        (r0..r1).contains(&i) && (c0..c1).contains(&j)
    });

    // Blur the glass region (3x3 box over the background) and add a
    // diagonal highlight band.
    let blurred = image.clone();
    let hl_row = rng.gen_range(r0..r1) as f64;
    let hl_gain = rng.gen_range(0.15..0.3);
    for c in 0..3 {
        for i in r0..r1 {
            for j in c0..c1 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let si = i as i64 + di;
                        let sj = j as i64 + dj;
                        if si >= 0 && sj >= 0 && (si as usize) < side && (sj as usize) < side {
                            acc += blurred[(c, si as usize, sj as usize)];
                            n += 1.0;
                        }
                    }
                }
                let band = (-(((i as f64 - hl_row) - (j as f64 - c0 as f64) * 0.3).powi(2))
                    / (2.0 * (side as f64 / 24.0).powi(2)))
                .exp();
                image[(c, i, j)] = (acc / n + hl_gain * band).clamp(0.0, 1.0);
            }
        }
    }

    SamplePair {
        id: format!("synth_{index:03}"),
        image,
        mask,
    }
}

/// Reproducible synthetic corpus: identical (n, side, seed) gives identical
/// samples, independent of generation order.
pub fn make_synthetic_corpus(n: usize, side: usize, seed: u64) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus needs n >= 1".into()));
    }
    if side < 32 {
        return Err(Error::Config("synthetic side must be >= 32".into()));
    }
    Ok((0..n).map(|i| synth_sample(i, side, seed)).collect())
}

pub fn image_to_rgb8(image: &Array3<f64>) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image[(c, y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_gray8(mask: &Array2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[(y as usize, x as usize)] { 255 } else { 0 }])
    })
}

pub fn probability_to_gray8(pred: &Array2<f64>) -> GrayImage {
    let (h, w) = pred.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(pred[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Write a corpus to `<root>/image/*.png` + `<root>/mask/*.png`.
pub fn write_corpus(corpus: &[SamplePair], root: &Path) -> Result<()> {
    let image_dir = root.join("image");
    let mask_dir = root.join("mask");
    std::fs::create_dir_all(&image_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    for s in corpus {
        image_to_rgb8(&s.image).save(image_dir.join(format!("{}.png", s.id)))?;
        mask_to_gray8(&s.mask).save(mask_dir.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

fn render_histogram(hist: &[u64; HISTOGRAM_BINS]) -> GrayImage {
    let (w, h) = (HISTOGRAM_BINS as u32 * 12, 64u32);
    let max = (*hist.iter().max().unwrap()).max(1);
    GrayImage::from_fn(w, h, |x, y| {
        let bin = (x / 12) as usize;
        let bar = (hist[bin] as f64 / max as f64 * (h - 2) as f64) as u32;
        image::Luma([if h - 1 - y <= bar && x % 12 != 11 {
            255
        } else {
            16
        }])
    })
}

/// Emit stats.json plus rendered heatmap and histogram PNGs into `dir`.
pub fn write_stats(stats: &DatasetStats, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(stats)
        .map_err(|e| Error::Data(format!("stats serialization: {e}")))?;
    std::fs::write(dir.join("stats.json"), json)?;

    let heat = Array2::from_shape_fn((HEATMAP_SIDE, HEATMAP_SIDE), |(i, j)| {
        stats.location_heatmap[i][j]
    });
    probability_to_gray8(&heat).save(dir.join("location_heatmap.png"))?;
    render_histogram(&stats.area_histogram).save(dir.join("area_histogram.png"))?;
    render_histogram(&stats.contrast_histogram).save(dir.join("contrast_histogram.png"))?;
    Ok(())
}
