//! Frame sources, clip sampling and the crop/mask augmentation pipeline.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ClipConfig, DataConfig};
use crate::depth_head::UPSAMPLE;
use crate::error::{Error, Result};

/// Frame rate assumed for generated videos.
pub const SYNTHETIC_FPS: f64 = 60.0;

/// One decoded frame. RGB is `H × W × 3` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: Array3<f64>,
    pub depth: Array2<f64>,
    pub valid: Array2<bool>,
    /// Per-object visible masks; empty for sources without annotations.
    pub gt: Vec<Array2<bool>>,
}

pub trait FrameSource: Send + Sync {
    fn id(&self) -> &str;
    fn fps(&self) -> f64;
    fn frame_count(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Frame>;
}

impl fmt::Debug for dyn FrameSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FrameSource({}, {} frames)", self.id(), self.frame_count())
    }
}

/// `T` temporally strided frames with aligned depth priors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub frames: Vec<Array3<f64>>,
    pub depth: Vec<Array2<f64>>,
    pub valid: Vec<Array2<bool>>,
    /// `gt_masks[t][k]`: object `k` in frame `t`.
    pub gt_masks: Vec<Vec<Array2<bool>>>,
    pub source_id: String,
    pub start_index: usize,
    pub indices: Vec<usize>,
}

impl FrameClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Union of object masks for frame `t`.
    pub fn foreground(&self, t: usize) -> Option<Array2<bool>> {
        let masks = self.gt_masks.get(t)?;
        let first = masks.first()?;
        let mut fg = Array2::from_elem(first.dim(), false);
        for m in masks {
            ndarray::Zip::from(&mut fg).and(m).for_each(|a, &b| *a |= b);
        }
        Some(fg)
    }
}

/// Frame step between consecutive clip frames.
pub fn frame_stride(fps: f64, stride_s: f64) -> usize {
    ((fps * stride_s).round() as usize).max(1)
}

/// Number of source frames a clip starting at any index spans.
pub fn clip_span(fps: f64, clip: &ClipConfig) -> usize {
    (clip.frames - 1) * frame_stride(fps, clip.stride_s) + 1
}

pub fn sample_clip(source: &dyn FrameSource, t0: usize, clip: &ClipConfig) -> Result<FrameClip> {
    let stride = frame_stride(source.fps(), clip.stride_s);
    let indices: Vec<usize> = (0..clip.frames).map(|i| t0 + i * stride).collect();
    let last = *indices.last().ok_or(Error::InsufficientFrames { needed: 1, available: 0 })?;
    if last >= source.frame_count() {
        return Err(Error::InsufficientFrames {
            needed: last + 1,
            available: source.frame_count(),
        });
    }
    let mut out = FrameClip {
        frames: Vec::with_capacity(indices.len()),
        depth: Vec::with_capacity(indices.len()),
        valid: Vec::with_capacity(indices.len()),
        gt_masks: Vec::with_capacity(indices.len()),
        source_id: source.id().to_string(),
        start_index: t0,
        indices: indices.clone(),
    };
    for &i in &indices {
        let f = source.frame(i)?;
        out.frames.push(f.rgb);
        out.depth.push(f.depth);
        out.valid.push(f.valid);
        out.gt_masks.push(f.gt);
    }
    Ok(out)
}

/// Square pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

impl Rect {
    /// Random square sub-rectangle covering `area` of `self`.
    fn sub(&self, area: f64, rng: &mut impl Rng) -> Rect {
        let size = ((area.sqrt() * self.size as f64).round() as usize).clamp(1, self.size);
        let slack = self.size - size;
        Rect {
            y: self.y + rng.random_range(0..=slack),
            x: self.x + rng.random_range(0..=slack),
            size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub window: Rect,
    pub region: Rect,
    pub crops: [Rect; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCrop {
    pub clean: Array3<f64>,
    /// `clean` with occluded patches zeroed; fed to the student.
    pub student: Array3<f64>,
    /// Raster-ordered patch occlusion flags (`true` = occluded).
    pub occluded: Vec<bool>,
    /// Depth prior and validity at decoder resolution (`16×` the patch
    /// grid).
    pub depth: Array2<f64>,
    pub valid: Array2<bool>,
}

/// Two global crops for every frame of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub frames: Vec<[GlobalCrop; 2]>,
    pub geometry: CropGeometry,
    pub multicrop_scale: [f64; 2],
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Bilinear resample of `rect` from an `H × W × 3` image to `n × n`.
pub fn resize_bilinear(image: &Array3<f64>, rect: Rect, n: usize) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let scale = rect.size as f64 / n as f64;
    let coords = |offset: usize, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|i| {
                let s = (offset as f64 + (i as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(limit - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(rect.y, h);
    let xs = coords(rect.x, w);
    Array3::from_shape_fn((n, n, c), |(i, j, ch)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
        let bottom = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resample of `rect` from a 2-D map to `n × n`.
pub fn resize_nearest<T: Clone>(map: &Array2<T>, rect: Rect, n: usize) -> Array2<T> {
    let (h, w) = map.dim();
    let scale = rect.size as f64 / n as f64;
    let index = |offset: usize, i: usize, limit: usize| {
        ((offset as f64 + (i as f64 + 0.5) * scale).floor() as usize).min(limit - 1)
    };
    Array2::from_shape_fn((n, n), |(i, j)| map[[index(rect.y, i, h), index(rect.x, j, w)]].clone())
}

/// Chooses exactly `count` of the `grid × grid` patches as a union of
/// random rectangles; the last rectangle is truncated to hit the count.
pub fn block_mask(grid: usize, count: usize, rng: &mut impl Rng) -> Vec<bool> {
    let total = grid * grid;
    let count = count.min(total);
    let mut mask = vec![false; total];
    let mut chosen = 0;
    let max_side = (grid / 2).max(1);
    while chosen < count {
        let bh = rng.random_range(1..=max_side);
        let bw = rng.random_range(1..=max_side);
        let y0 = rng.random_range(0..=grid - bh);
        let x0 = rng.random_range(0..=grid - bw);
        'block: for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                if chosen == count {
                    break 'block;
                }
                let k = y * grid + x;
                if !mask[k] {
                    mask[k] = true;
                    chosen += 1;
                }
            }
        }
    }
    mask
}

fn occlude(image: &Array3<f64>, occluded: &[bool], patch: usize) -> Array3<f64> {
    let grid = image.dim().1 / patch;
    let mut out = image.clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        if occluded[(y / patch) * grid + x / patch] {
            *v = 0.0;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn global_crop(
    clip: &FrameClip,
    t: usize,
    rect: Rect,
    cfg: &ClipConfig,
    patch_size: usize,
    masked: usize,
    blur_sigma0: Option<f64>,
    rng: &mut impl Rng,
) -> GlobalCrop {
    let n = cfg.crop_size;
    let grid = n / patch_size;
    let clean = resize_bilinear(&clip.frames[t], rect, n);
    let occluded = block_mask(grid, masked, rng);
    let student = occlude(&clean, &occluded, patch_size);
    let depth_size = grid * UPSAMPLE;
    let mut depth = resize_nearest(&clip.depth[t], rect, depth_size);
    if let Some(s0) = blur_sigma0 {
        depth = blur_depth(&depth, s0, depth_size);
    }
    GlobalCrop {
        clean,
        student,
        occluded,
        depth,
        valid: resize_nearest(&clip.valid[t], rect, depth_size),
    }
}

/// Samples one crop geometry for the clip and applies it to every frame.
///
/// `blur_sigma0` blurs the resized depth crops, with the blur width taken
/// from the depth crop.
pub fn crop_and_augment(
    clip: &FrameClip,
    cfg: &ClipConfig,
    patch_size: usize,
    blur_sigma0: Option<f64>,
    rng: &mut impl Rng,
) -> Result<CropSet> {
    let (h, w, _) = clip.frames.first().ok_or(Error::NoData)?.dim();
    if h < cfg.window || w < cfg.window {
        return Err(Error::FrameTooSmall {
            height: h,
            width: w,
            required: cfg.window,
        });
    }
    let window = Rect {
        y: rng.random_range(0..=h - cfg.window),
        x: rng.random_range(0..=w - cfg.window),
        size: cfg.window,
    };
    let region = window.sub(uniform(rng, cfg.global_scale), rng);
    let crops = [
        region.sub(uniform(rng, cfg.multicrop_scale), rng),
        region.sub(uniform(rng, cfg.multicrop_scale), rng),
    ];
    let n = cfg.crop_size;
    let grid = n / patch_size;
    let masked = (cfg.mask_ratio * (grid * grid) as f64).floor() as usize;
    let mut frames = Vec::with_capacity(clip.len());
    for t in 0..clip.len() {
        let a = global_crop(clip, t, crops[0], cfg, patch_size, masked, blur_sigma0, rng);
        let b = global_crop(clip, t, crops[1], cfg, patch_size, masked, blur_sigma0, rng);
        frames.push([a, b]);
    }
    Ok(CropSet {
        frames,
        geometry: CropGeometry { window, region, crops },
        multicrop_scale: cfg.multicrop_scale,
    })
}

/// Normalized discrete Gaussian of radius `⌈3σ⌉` (at least 1).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with `σ = σ₀·W/224` and edge-clamped borders.
pub fn blur_depth(depth: &Array2<f64>, sigma0: f64, crop_width: usize) -> Array2<f64> {
    let sigma = sigma0 * crop_width as f64 / 224.0;
    if !(sigma > 0.0) {
        return depth.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = depth.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * depth[[y, clamp(x as isize + i as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v: f64 = k
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * rows[[clamp(y as isize + i as isize - r, h), x]])
            .sum();
        v.clamp(0.0, 1.0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

/// One rigid object; positions are in pixels at frame `0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: [f64; 2],
    /// Pixels per frame, `[dy, dx]`.
    pub velocity: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
    pub depth: f64,
}

/// Procedurally rendered moving-shapes video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub id: String,
    pub size: usize,
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
    /// Background translation in pixels per frame (`[dy, dx]`).
    pub pan: [f64; 2],
    pub texture_phase: [f64; 4],
    pub texture_tint: [f64; 3],
}

impl SyntheticVideo {
    /// Random video of `1..=max_objects` shapes.
    pub fn random(id: String, size: usize, frames: usize, max_objects: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let per_frame = s / SYNTHETIC_FPS;
        let count = rng.random_range(1..=max_objects.max(1));
        let shapes = [Shape::Disc, Shape::Square, Shape::Triangle];
        let objects = (0..count)
            .map(|_| ObjectSpec {
                shape: shapes[rng.random_range(0..shapes.len())],
                center: [rng.random_range(0.25 * s..0.75 * s), rng.random_range(0.25 * s..0.75 * s)],
                velocity: [
                    rng.random_range(-0.08..0.08) * per_frame,
                    rng.random_range(-0.08..0.08) * per_frame,
                ],
                radius: rng.random_range(0.15 * s..0.3 * s),
                color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                depth: rng.random_range(0.05..0.35),
            })
            .collect();
        SyntheticVideo {
            id,
            size,
            frames,
            objects,
            pan: [
                rng.random_range(-0.05..0.05) * per_frame,
                rng.random_range(-0.05..0.05) * per_frame,
            ],
            texture_phase: [
                rng.random_range(0.0..6.3),
                rng.random_range(0.0..6.3),
                rng.random_range(0.0..6.3),
                rng.random_range(0.0..6.3),
            ],
            texture_tint: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
        }
    }

    fn covers(obj: &ObjectSpec, t: f64, y: f64, x: f64) -> bool {
        let cy = obj.center[0] + obj.velocity[0] * t;
        let cx = obj.center[1] + obj.velocity[1] * t;
        let (dy, dx) = (y - cy, x - cx);
        let r = obj.radius;
        match obj.shape {
            Shape::Disc => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
            // Apex up, base at `cy + r/2`.
            Shape::Triangle => dy <= r * 0.5 && dy >= -r && dx.abs() <= (dy + r) / 1.5 * 3f64.sqrt() / 2.0,
        }
    }

    pub fn render(&self, index: usize) -> Frame {
        let n = self.size;
        let t = index as f64;
        let s = n as f64;
        let [p0, p1, p2, p3] = self.texture_phase;
        let mut rgb = Array3::zeros((n, n, 3));
        let mut depth = Array2::zeros((n, n));
        let mut gt: Vec<Array2<bool>> = self.objects.iter().map(|_| Array2::from_elem((n, n), false)).collect();
        for y in 0..n {
            for x in 0..n {
                let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
                let (by, bx) = ((yc + self.pan[0] * t) / s, (xc + self.pan[1] * t) / s);
                let tex = 0.5
                    + 0.25 * (std::f64::consts::TAU * 3.0 * bx + p0).sin() * (std::f64::consts::TAU * 2.0 * by + p1).cos()
                    + 0.15 * (std::f64::consts::TAU * 7.0 * (bx + by) + p2).sin()
                    + 0.1 * (std::f64::consts::TAU * 11.0 * by + p3).sin();
                for c in 0..3 {
                    rgb[[y, x, c]] = (tex * self.texture_tint[c] * 1.2).clamp(0.0, 1.0);
                }
                depth[[y, x]] = 0.6 + 0.4 * (1.0 - y as f64 / (n - 1).max(1) as f64);
                let mut top = None;
                for (k, obj) in self.objects.iter().enumerate() {
                    if Self::covers(obj, t, yc, xc) {
                        top = Some(k);
                    }
                }
                if let Some(k) = top {
                    let obj = &self.objects[k];
                    let cy = obj.center[0] + obj.velocity[0] * t;
                    let cx = obj.center[1] + obj.velocity[1] * t;
                    // Faint stripes move with the object.
                    let stripe = 0.9 + 0.1 * (((yc - cy) + (xc - cx)) * 0.4).sin();
                    for c in 0..3 {
                        rgb[[y, x, c]] = (obj.color[c] * stripe).clamp(0.0, 1.0);
                    }
                    depth[[y, x]] = obj.depth;
                    gt[k][[y, x]] = true;
                }
            }
        }
        Frame {
            rgb,
            depth,
            valid: Array2::from_elem((n, n), true),
            gt,
        }
    }
}

impl FrameSource for SyntheticVideo {
    fn id(&self) -> &str {
        &self.id
    }

    fn fps(&self) -> f64 {
        SYNTHETIC_FPS
    }

    fn frame_count(&self) -> usize {
        self.frames
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        if index >= self.frames {
            return Err(Error::InsufficientFrames {
                needed: index + 1,
                available: self.frames,
            });
        }
        Ok(self.render(index))
    }
}

pub fn gen_synthetic(data: &DataConfig, rng: &mut impl Rng) -> Vec<SyntheticVideo> {
    (0..data.synthetic_videos)
        .map(|i| {
            SyntheticVideo::random(
                format!("synthetic-{i:03}"),
                data.frame_size,
                data.synthetic_frames,
                data.max_objects,
                rng,
            )
        })
        .collect()
}

/// Dataset generated from `seed` alone.
pub fn synthetic_dataset(data: &DataConfig, seed: u64) -> Vec<SyntheticVideo> {
    gen_synthetic(data, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Content hash over every video's definition and its first and last
/// rendered frames.
pub fn dataset_hash(videos: &[SyntheticVideo]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in videos {
        h.update(serde_json::to_vec(v).expect("video spec serializes"));
        for i in [0, v.frames.saturating_sub(1)] {
            let f = v.render(i);
            for x in f.rgb.iter().chain(f.depth.iter()) {
                h.update(x.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

/// `manifest.json` of a frame directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fps: f64,
    pub frame_count: usize,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
    if !(m.fps.is_finite() && m.fps > 0.0) {
        return Err(Error::Manifest(format!("fps must be positive, got {}", m.fps)));
    }
    Ok(m)
}

fn frame_path(root: &Path, dir: &str, index: usize) -> PathBuf {
    root.join(dir).join(format!("{index:08}.png"))
}

fn gt_path(root: &Path, index: usize, object: usize) -> PathBuf {
    root.join("gt").join(format!("{index:08}_obj{object}.png"))
}

/// Decodes a PNG into an `H × W × 3` image in `[0, 1]`.
pub fn decode_rgb_png(bytes: &[u8]) -> std::result::Result<Array3<f64>, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| e.to_string())?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Decodes a grayscale PNG into depth in `[0, 1]` plus a validity mask.
/// Pixel value `0` marks missing depth.
pub fn decode_depth_png(bytes: &[u8]) -> std::result::Result<(Array2<f64>, Array2<bool>), String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| e.to_string())?
        .to_luma16();
    let (w, h) = img.dimensions();
    let raw = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]);
    Ok((raw.mapv(|v| v as f64 / u16::MAX as f64), raw.mapv(|v| v != 0)))
}

fn decode_mask_png(bytes: &[u8]) -> std::result::Result<Array2<bool>, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| e.to_string())?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

/// `frames/`, `depth/`, optional `gt/`, and `manifest.json`.
#[derive(Debug, Clone)]
pub struct FrameDirectory {
    root: PathBuf,
    id: String,
    manifest: Manifest,
}

impl FrameDirectory {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = parse_manifest(&text)?;
        let id = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.display().to_string());
        Ok(Self { root, id, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FrameSource for FrameDirectory {
    fn id(&self) -> &str {
        &self.id
    }

    fn fps(&self) -> f64 {
        self.manifest.fps
    }

    fn frame_count(&self) -> usize {
        self.manifest.frame_count
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        let path = frame_path(&self.root, "frames", index);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rgb = decode_rgb_png(&bytes).map_err(|message| Error::Image { path: path.clone(), message })?;
        let dpath = frame_path(&self.root, "depth", index);
        let bytes = fs::read(&dpath).map_err(|_| Error::MissingDepth(index))?;
        let (depth, valid) = decode_depth_png(&bytes).map_err(|message| Error::Image { path: dpath.clone(), message })?;
        if depth.dim() != (rgb.dim().0, rgb.dim().1) {
            return Err(Error::Image {
                path: dpath,
                message: format!("depth is {:?} but frame is {:?}", depth.dim(), (rgb.dim().0, rgb.dim().1)),
            });
        }
        let mut gt = Vec::new();
        loop {
            let p = gt_path(&self.root, index, gt.len());
            let Ok(bytes) = fs::read(&p) else { break };
            gt.push(decode_mask_png(&bytes).map_err(|message| Error::Image { path: p.clone(), message })?);
        }
        Ok(Frame { rgb, depth, valid, gt })
    }
}

fn save_png<P, C>(img: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn rgb_to_image(rgb: &Array3<f64>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w, _) = rgb.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (rgb[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes a video in the frame-directory layout, with ground truth.
pub fn persist(video: &dyn FrameSource, root: &Path) -> Result<()> {
    for dir in ["frames", "depth", "gt"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for i in 0..video.frame_count() {
        let f = video.frame(i)?;
        save_png(rgb_to_image(&f.rgb), &frame_path(root, "frames", i))?;
        let (h, w) = f.depth.dim();
        let depth = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            let v = if f.valid[[y, x]] {
                // Keep valid pixels distinguishable from the missing marker.
                ((f.depth[[y, x]].clamp(0.0, 1.0) * u16::MAX as f64).round() as u16).max(1)
            } else {
                0
            };
            Luma([v])
        });
        save_png(depth, &frame_path(root, "depth", i))?;
        for (k, m) in f.gt.iter().enumerate() {
            let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([if m[[y as usize, x as usize]] { 255u8 } else { 0 }]));
            save_png(img, &gt_path(root, i, k))?;
        }
    }
    let manifest = Manifest {
        fps: video.fps(),
        frame_count: video.frame_count(),
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Opens every source named by the data config: either a generated
/// synthetic set, or a directory of frame directories (or a single one).
pub fn open_sources(data: &DataConfig, seed: u64) -> Result<Vec<Box<dyn FrameSource>>> {
    if data.source == "synthetic" {
        return Ok(synthetic_dataset(data, seed)
            .into_iter()
            .map(|v| Box::new(v) as Box<dyn FrameSource>)
            .collect());
    }
    let root = PathBuf::from(&data.source);
    if root.join("manifest.json").is_file() {
        return Ok(vec![Box::new(FrameDirectory::open(root)?)]);
    }
    let entries = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Invalid(format!("no frame directories under {}", root.display())));
    }
    dirs.into_iter()
        .map(|d| Ok(Box::new(FrameDirectory::open(d)?) as Box<dyn FrameSource>))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn small_video(objects: Vec<ObjectSpec>, frames: usize) -> SyntheticVideo {
        SyntheticVideo {
            id: "v".into(),
            size: 32,
            frames,
            objects,
            pan: [0.0, 0.3],
            texture_phase: [0.0, 1.0, 2.0, 3.0],
            texture_tint: [0.5, 0.5, 0.5],
        }
    }

    fn disc(center: [f64; 2], velocity: [f64; 2]) -> ObjectSpec {
        ObjectSpec {
            shape: Shape::Disc,
            center,
            velocity,
            radius: 5.0,
            color: [1.0, 0.0, 0.0],
            depth: 0.2,
        }
    }

    #[test]
    fn clip_indices_follow_fps_stride() {
        let v = small_video(vec![disc([16.0, 16.0], [0.0, 0.0])], 421);
        let clip = ClipConfig {
            frames: 8,
            ..ClipConfig::default()
        };
        let c = sample_clip(&v, 0, &clip).unwrap();
        assert_eq!(c.indices, (0..8).map(|i| i * 60).collect::<Vec<_>>());
        let single = ClipConfig { frames: 1, ..clip.clone() };
        assert_eq!(sample_clip(&v, 5, &single).unwrap().len(), 1);
        let short = small_video(vec![], 7);
        let dense = ClipConfig {
            frames: 8,
            stride_s: 1.0 / 60.0,
            ..clip
        };
        assert!(matches!(
            sample_clip(&short, 0, &dense),
            Err(Error::InsufficientFrames { needed: 8, available: 7 })
        ));
    }

    #[test]
    fn static_object_keeps_its_mask() {
        let v = small_video(vec![disc([16.0, 16.0], [0.0, 0.0])], 10);
        let first = v.render(0).gt;
        for t in 1..10 {
            assert_eq!(v.render(t).gt, first);
        }
        assert!(first[0].iter().any(|&b| b));
    }

    #[test]
    fn exiting_object_leaves_empty_masks() {
        // Radius 5 at x = 16 moving 5 px/frame clears the 32-px frame by t = 5.
        let v = small_video(vec![disc([16.0, 16.0], [0.0, 5.0])], 10);
        for t in 0..10 {
            let any = v.render(t).gt[0].iter().any(|&b| b);
            assert_eq!(any, t < 5, "frame {t}");
        }
    }

    #[test]
    fn synthetic_values_in_range_and_hash_stable() {
        let mut data = RunConfig::default().data;
        data.synthetic_videos = 2;
        data.synthetic_frames = 3;
        data.frame_size = 32;
        let a = synthetic_dataset(&data, 9);
        let b = synthetic_dataset(&data, 9);
        assert_eq!(dataset_hash(&a), dataset_hash(&b));
        assert_ne!(dataset_hash(&a), dataset_hash(&synthetic_dataset(&data, 10)));
        for v in &a {
            let f = v.render(1);
            assert!(f.rgb.iter().all(|x| (0.0..=1.0).contains(x)));
            assert!(f.depth.iter().all(|x| (0.0..=1.0).contains(x)));
            assert!((1..=3).contains(&f.gt.len()));
        }
    }

    fn clip_of(frame: Frame) -> FrameClip {
        FrameClip {
            frames: vec![frame.rgb],
            depth: vec![frame.depth],
            valid: vec![frame.valid],
            gt_masks: vec![frame.gt],
            source_id: "x".into(),
            start_index: 0,
            indices: vec![0],
        }
    }

    fn coordinate_frame(n: usize) -> Frame {
        Frame {
            rgb: Array3::from_shape_fn((n, n, 3), |(y, x, c)| if c == 0 { x as f64 / n as f64 } else { y as f64 / n as f64 }),
            depth: Array2::from_shape_fn((n, n), |(_, x)| x as f64 / n as f64),
            valid: Array2::from_elem((n, n), true),
            gt: vec![],
        }
    }

    #[test]
    fn full_scale_centered_crop_is_identity() {
        let frame = coordinate_frame(32);
        let cfg = ClipConfig {
            window: 32,
            crop_size: 32,
            global_scale: [1.0, 1.0],
            multicrop_scale: [1.0, 1.0],
            mask_ratio: 0.0,
            ..ClipConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = crop_and_augment(&clip_of(frame.clone()), &cfg, 16, None, &mut rng).unwrap();
        let full = Rect { y: 0, x: 0, size: 32 };
        assert_eq!(set.geometry.region, full);
        for c in &set.frames[0] {
            assert_eq!(c.clean, frame.rgb);
            assert_eq!(c.student, frame.rgb);
            assert_eq!(c.depth, frame.depth);
        }
    }

    #[test]
    fn crops_are_seeded_and_mask_counts_exact() {
        let v = small_video(vec![disc([16.0, 16.0], [0.0, 1.0])], 3);
        let clip = ClipConfig {
            frames: 2,
            stride_s: 1.0 / 60.0,
            window: 32,
            crop_size: 32,
            mask_ratio: 0.3,
            ..ClipConfig::default()
        };
        let c = sample_clip(&v, 0, &clip).unwrap();
        let a = crop_and_augment(&c, &clip, 8, Some(0.3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = crop_and_augment(&c, &clip, 8, Some(0.3), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        for crop in a.frames.iter().flatten() {
            assert_eq!(crop.occluded.iter().filter(|&&o| o).count(), 4); // ⌊0.3·16⌋
            assert!(crop.depth.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn rgb_and_depth_move_in_lockstep() {
        let n = 64;
        let cfg = ClipConfig {
            window: 64,
            crop_size: 32,
            global_scale: [0.3, 0.9],
            multicrop_scale: [0.3, 0.9],
            ..ClipConfig::default()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = crop_and_augment(&clip_of(coordinate_frame(n)), &cfg, 16, None, &mut rng).unwrap();
            for crop in &set.frames[0] {
                for y in 0..32 {
                    for x in 0..32 {
                        // Bilinear of a linear ramp vs nearest sample: within one source pixel.
                        assert!((crop.clean[[y, x, 0]] - crop.depth[[y, x]]).abs() <= 1.0 / n as f64 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn small_frames_are_rejected() {
        let cfg = ClipConfig::default();
        let err = crop_and_augment(&clip_of(coordinate_frame(32)), &cfg, 16, None, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::FrameTooSmall { .. })));
    }

    #[test]
    fn block_mask_exact_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for count in [0, 1, 7, 35, 36] {
            let m = block_mask(6, count, &mut rng);
            assert_eq!(m.iter().filter(|&&b| b).count(), count);
        }
    }

    #[test]
    fn blur_examples() {
        let d = Array2::from_shape_fn((9, 9), |(y, x)| ((y * 9 + x) % 7) as f64 / 7.0);
        assert_eq!(blur_depth(&d, 0.0, 224), d);
        let flat = Array2::from_elem((9, 9), 0.4);
        assert!(blur_depth(&flat, 0.5, 224).iter().all(|v| (v - 0.4).abs() < 1e-12));

        // Impulse vs a dense 2-D convolution with the outer-product kernel.
        let mut imp = Array2::zeros((15, 15));
        imp[[7, 7]] = 1.0;
        let out = blur_depth(&imp, 0.3, 224);
        let k = gaussian_kernel(0.3);
        let r = k.len() as isize / 2;
        for y in 0..15isize {
            for x in 0..15isize {
                let mut acc = 0.0;
                for i in -r..=r {
                    for j in -r..=r {
                        let (sy, sx) = ((y + i).clamp(0, 14), (x + j).clamp(0, 14));
                        acc += k[(i + r) as usize] * k[(j + r) as usize] * imp[[sy as usize, sx as usize]];
                    }
                }
                assert!((out[[y as usize, x as usize]] - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn manifest_validation() {
        assert_eq!(
            parse_manifest(r#"{"fps": 30, "frame_count": 5}"#).unwrap(),
            Manifest { fps: 30.0, frame_count: 5 }
        );
        assert!(parse_manifest(r#"{"fps": 0, "frame_count": 5}"#).is_err());
        assert!(parse_manifest(r#"{"fps": 30}"#).is_err());
        assert!(parse_manifest("not json").is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = small_video(vec![disc([10.0, 12.0], [0.5, 0.5]), disc([20.0, 20.0], [0.0, 0.0])], 3);
        persist(&v, dir.path()).unwrap();
        let src = FrameDirectory::open(dir.path()).unwrap();
        assert_eq!((src.fps(), src.frame_count()), (60.0, 3));
        for i in 0..3 {
            let a = v.render(i);
            let b = src.frame(i).unwrap();
            assert_eq!(a.gt, b.gt);
            assert!(b.valid.iter().all(|&x| x));
            assert!(a.depth.iter().zip(b.depth.iter()).all(|(x, y)| (x - y).abs() < 1e-4));
            assert!(a.rgb.iter().zip(b.rgb.iter()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
        fs::remove_file(dir.path().join("depth/00000001.png")).unwrap();
        assert!(matches!(src.frame(1), Err(Error::MissingDepth(1))));
    }
}
