//! Localization IoU on annotated clips, a k-NN probe, attention dumps and
//! metric plots.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{clip_span, open_sources, resize_bilinear, resize_nearest, sample_clip, FrameClip, ObjectSpec, Rect, Shape, SyntheticVideo};
use crate::metrics::{parse_iou, parse_metrics};
use crate::proto::{delineate, Delineation};
use crate::vit::{Network, NetworkParams, Taps};

/// Mixed into the run seed so evaluation clips differ from training clips.
const EVAL_SALT: u64 = 0x5eed_e7a1;

/// `|a ∩ b| / |a ∪ b|`; two empty masks count as a perfect match.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Patch-grid version of a pixel mask: a patch is foreground when at least
/// half of its pixels are.
pub fn downsample_majority(mask: &Array2<bool>, patch: usize) -> Vec<bool> {
    let (h, w) = mask.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let mut fg = 0;
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    fg += mask[[y, x]] as usize;
                }
            }
            out.push(2 * fg >= patch * patch);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub mean_best_iou: f64,
    /// Best-head IoU for each evaluated clip.
    pub per_clip: Vec<f64>,
    pub per_head_mean: Vec<f64>,
    /// `per_head[c][n]`: mean IoU of head `n` over clip `c`'s frames.
    pub per_head: Vec<Vec<f64>>,
}

/// Deterministic evaluation view: the centered window resized to the model
/// input.
pub fn eval_view(cfg: &RunConfig, frame: &Array3<f64>) -> Result<(Array3<f64>, Rect)> {
    let (h, w, _) = frame.dim();
    let size = cfg.clip.window.min(h).min(w);
    let rect = Rect {
        y: (h - size) / 2,
        x: (w - size) / 2,
        size,
    };
    Ok((resize_bilinear(frame, rect, cfg.clip.crop_size), rect))
}

/// Fixed-seed annotated clips drawn from the configured data source.
pub fn eval_clips(cfg: &RunConfig) -> Result<Vec<FrameClip>> {
    let seed = cfg.seed ^ EVAL_SALT;
    let sources = open_sources(&cfg.data, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(cfg.eval.clips);
    for i in 0..cfg.eval.clips {
        let src = &sources[i % sources.len()];
        let span = clip_span(src.fps(), &cfg.clip);
        if span > src.frame_count() {
            return Err(Error::InsufficientFrames {
                needed: span,
                available: src.frame_count(),
            });
        }
        let t0 = rng.random_range(0..=src.frame_count() - span);
        clips.push(sample_clip(src.as_ref(), t0, &cfg.clip)?);
    }
    Ok(clips)
}

/// Proto-object masks of `params` for one model-resolution image.
pub fn delineate_image(net: &Network, params: &NetworkParams, image: &Array3<f64>) -> Result<Delineation> {
    let taps = Taps {
        attention: true,
        patches: true,
        middle: false,
    };
    let feats = net.encode(params, std::slice::from_ref(image), taps)?.remove(0);
    delineate(
        feats.attention.as_ref().expect("attention tap"),
        feats.patches.as_ref().expect("patch tap"),
    )
}

/// Best-head mask IoU against the union of annotated objects.
///
/// Frames without visible foreground are skipped, as are clips without
/// any annotated frame.
pub fn localize(net: &Network, params: &NetworkParams, cfg: &RunConfig, clips: &[FrameClip]) -> Result<LocalizationReport> {
    let heads = net.heads();
    let mut per_head = Vec::new();
    for clip in clips {
        let mut sums = vec![0.0; heads];
        let mut frames = 0usize;
        for t in 0..clip.len() {
            let Some(fg) = clip.foreground(t) else { continue };
            let (image, rect) = eval_view(cfg, &clip.frames[t])?;
            let gt = downsample_majority(&resize_nearest(&fg, rect, cfg.clip.crop_size), net.patch_size());
            if !gt.iter().any(|&b| b) {
                continue;
            }
            let d = delineate_image(net, params, &image)?;
            for (s, m) in sums.iter_mut().zip(&d.masks) {
                *s += iou(m, &gt);
            }
            frames += 1;
        }
        if frames == 0 {
            log::warn!("clip {}@{} has no annotated foreground; skipped", clip.source_id, clip.start_index);
            continue;
        }
        per_head.push(sums.into_iter().map(|s| s / frames as f64).collect::<Vec<f64>>());
    }
    if per_head.is_empty() {
        return Err(Error::NoData);
    }
    let per_clip: Vec<f64> = per_head
        .iter()
        .map(|h| h.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let n = per_clip.len() as f64;
    let per_head_mean = (0..heads)
        .map(|k| per_head.iter().map(|h| h[k]).sum::<f64>() / n)
        .collect();
    Ok(LocalizationReport {
        mean_best_iou: per_clip.iter().sum::<f64>() / n,
        per_clip,
        per_head_mean,
        per_head,
    })
}

/// Leave-one-out cosine k-NN accuracy over row embeddings.
///
/// Neighbours are ranked by similarity, then index. The vote goes to the
/// most frequent label, ties broken by summed similarity and then by the
/// smaller label.
pub fn knn_accuracy(embeddings: &Mat, labels: &[usize], k: usize) -> f64 {
    let n = embeddings.nrows();
    assert_eq!(n, labels.len());
    if n < 2 {
        return if n == 1 { 1.0 } else { 0.0 };
    }
    let mut unit = embeddings.to_owned();
    for mut r in unit.rows_mut() {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        r.mapv_inplace(|x| x / norm);
    }
    let sims = unit.dot(&unit.t());
    let k = k.clamp(1, n - 1);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut correct = 0;
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| sims[[i, b]].total_cmp(&sims[[i, a]]).then(a.cmp(&b)));
        let mut votes = vec![(0usize, 0.0f64); classes];
        for &j in &order[..k] {
            votes[labels[j]].0 += 1;
            votes[labels[j]].1 += sims[[i, j]];
        }
        let mut best = 0;
        for c in 1..classes {
            let (a, b) = (votes[c], votes[best]);
            if a.0 > b.0 || (a.0 == b.0 && a.1 > b.1) {
                best = c;
            }
        }
        correct += (best == labels[i]) as usize;
    }
    correct as f64 / n as f64
}

/// Labeled toy images: one shape per image, label = shape kind.
pub fn toy_knn_set(size: usize, per_class: usize, seed: u64) -> Vec<(Array3<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
    let shapes = [Shape::Disc, Shape::Square, Shape::Triangle];
    let mut out = Vec::with_capacity(per_class * shapes.len());
    for i in 0..per_class {
        for (label, &shape) in shapes.iter().enumerate() {
            let mut v = SyntheticVideo::random(format!("knn-{i}-{label}"), size, 1, 1, &mut rng);
            let s = size as f64;
            v.objects = vec![ObjectSpec {
                shape,
                center: [rng.random_range(0.35 * s..0.65 * s), rng.random_range(0.35 * s..0.65 * s)],
                velocity: [0.0, 0.0],
                radius: rng.random_range(0.2 * s..0.3 * s),
                color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                depth: 0.2,
            }];
            out.push((v.render(0).rgb, label));
        }
    }
    out
}

/// k-NN accuracy of final CLS embeddings on [`toy_knn_set`].
pub fn knn_probe(net: &Network, params: &NetworkParams, cfg: &RunConfig) -> Result<f64> {
    let set = toy_knn_set(cfg.clip.crop_size, cfg.eval.knn_per_class, cfg.seed);
    let mut rows = Vec::with_capacity(set.len());
    for (img, _) in &set {
        rows.push(net.encode(params, std::slice::from_ref(img), Taps::NONE)?.remove(0).cls);
    }
    let d = rows[0].len();
    let emb = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
    let labels: Vec<usize> = set.iter().map(|(_, l)| *l).collect();
    Ok(knn_accuracy(&emb, &labels, cfg.eval.knn_k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub localization: LocalizationReport,
    pub knn_accuracy: f64,
}

fn gray_image(values: &[f64], grid: usize, scale: usize) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    let n = (grid * scale) as u32;
    ImageBuffer::from_fn(n, n, |x, y| {
        let i = (y as usize / scale) * grid + x as usize / scale;
        Luma([(values[i].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `{prefix}_head{n}_map.png` (min-max scaled soft map) and
/// `{prefix}_head{n}_mask.png` for every head, upscaled to pixels.
pub fn write_attention_pngs(dir: &Path, prefix: &str, d: &Delineation, patch: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = d.soft_maps.ncols();
    let grid = (s as f64).sqrt().round() as usize;
    let mut files = Vec::new();
    for (n, mask) in d.masks.iter().enumerate() {
        let row = d.soft_maps.row(n);
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let scaled: Vec<f64> = row.iter().map(|v| (v - lo) / span).collect();
        let bits: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
        for (kind, values) in [("map", &scaled), ("mask", &bits)] {
            let path = dir.join(format!("{prefix}_head{n}_{kind}.png"));
            save(&gray_image(values, grid, patch), &path)?;
            files.push(path);
        }
    }
    Ok(files)
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 360;
const MARGIN: u32 = 24;
const SERIES_COLORS: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line chart of several series sharing one x axis. No text, so output
/// bytes depend only on the data.
pub fn line_plot(xs: &[f64], series: &[Vec<f64>]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, right, top, bottom) = (MARGIN as i64, (PLOT_W - MARGIN) as i64, MARGIN as i64, (PLOT_H - MARGIN) as i64);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, bottom), (left, top), axis);
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 0.5, lo.max(0.0) + 0.5) };
    let (x_lo, x_hi) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |x: f64| left + ((x - x_lo) / x_span * (right - left) as f64).round() as i64;
    let py = |y: f64| bottom - ((y - lo) / (hi - lo) * (bottom - top) as f64).round() as i64;
    for (k, ys) in series.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[k % SERIES_COLORS.len()]);
        let points: Vec<(i64, i64)> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| (px(x), py(y)))
            .collect();
        if let [only] = points.as_slice() {
            draw_line(&mut img, *only, *only, color);
        }
        for w in points.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSummary {
    pub files: Vec<PathBuf>,
    /// Number of series on the loss plot.
    pub loss_series: usize,
}

/// Writes `loss_curves.png` from a metrics CSV, plus `iou_curve.png` when
/// an `iou.csv` sits next to it.
pub fn emit_plots(metrics_csv: &Path, out_dir: &Path) -> Result<PlotSummary> {
    let text = fs::read_to_string(metrics_csv).map_err(|e| Error::io(metrics_csv, e))?;
    let rows = parse_metrics(&text)?;
    if rows.is_empty() {
        return Err(Error::NoData);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let xs: Vec<f64> = rows.iter().map(|r| r.iter as f64).collect();
    let series: Vec<Vec<f64>> = (0..4).map(|k| rows.iter().map(|r| r.losses()[k]).collect()).collect();
    let mut files = Vec::new();
    let loss_path = out_dir.join("loss_curves.png");
    save(&line_plot(&xs, &series), &loss_path)?;
    files.push(loss_path);
    let iou_csv = metrics_csv.with_file_name("iou.csv");
    if let Ok(text) = fs::read_to_string(&iou_csv) {
        let rows = parse_iou(&text)?;
        if !rows.is_empty() {
            let xs: Vec<f64> = rows.iter().map(|r| r.iter as f64).collect();
            let ys = vec![rows.iter().map(|r| r.mean_best_iou).collect()];
            let path = out_dir.join("iou_curve.png");
            save(&line_plot(&xs, &ys), &path)?;
            files.push(path);
        }
    }
    Ok(PlotSummary {
        files,
        loss_series: series.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn iou_examples() {
        let all = vec![true; 8];
        let mut m = vec![false; 8];
        m[2] = true;
        m[5] = true;
        m[6] = true;
        assert_eq!(iou(&m, &all), 3.0 / 8.0);
        assert_eq!(iou(&m, &m), 1.0);
        assert_eq!(iou(&m, &all), iou(&all, &m));
    }

    #[test]
    fn iou_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a: Vec<bool> = (0..20).map(|_| rng.random_bool(0.4)).collect();
            let b: Vec<bool> = (0..20).map(|_| rng.random_bool(0.4)).collect();
            let sa: std::collections::BTreeSet<usize> = (0..20).filter(|&i| a[i]).collect();
            let sb: std::collections::BTreeSet<usize> = (0..20).filter(|&i| b[i]).collect();
            let union = sa.union(&sb).count();
            let expected = if union == 0 { 1.0 } else { sa.intersection(&sb).count() as f64 / union as f64 };
            assert_eq!(iou(&a, &b), expected);
        }
    }

    #[test]
    fn majority_vote_ties_are_foreground() {
        let m = array![[true, false, false, false], [true, false, false, true], [false, false, true, true], [false, false, true, true]];
        assert_eq!(downsample_majority(&m, 2), vec![true, false, false, true]);
        let one = array![[true, false], [false, false]];
        assert_eq!(downsample_majority(&one, 2), vec![false]);
    }

    #[test]
    fn knn_examples() {
        // Each point duplicated once: the duplicate is always the nearest.
        let base = array![[1.0, 0.0, 0.2], [0.1, 1.0, 0.0], [0.3, 0.3, 1.0]];
        let emb = ndarray::concatenate![ndarray::Axis(0), base, base];
        assert_eq!(knn_accuracy(&emb, &[0, 1, 2, 0, 1, 2], 1), 1.0);
        let single = Array2::from_shape_fn((5, 3), |(i, j)| ((i + 2 * j) % 5) as f64);
        assert_eq!(knn_accuracy(&single, &[0; 5], 3), 1.0);
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 24;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let emb = Array2::from_shape_fn((n, 4), |(i, j)| {
            let centre = if labels[i] == 0 { [1.0, 0.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0, 0.0] };
            centre[j] + rng.random_range(-0.7..0.7)
        });
        let k = 5;
        let cos = |a: usize, b: usize| {
            let (x, y) = (emb.row(a), emb.row(b));
            let dot = |u: ndarray::ArrayView1<f64>, v: ndarray::ArrayView1<f64>| -> f64 { u.dot(&v) };
            dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt())
        };
        let mut correct = 0;
        for i in 0..n {
            let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (cos(i, j), j)).collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let ones = others[..k].iter().filter(|(_, j)| labels[*j] == 1).count();
            let pred = usize::from(ones * 2 > k);
            correct += (pred == labels[i]) as usize;
        }
        assert!((knn_accuracy(&emb, &labels, k) - correct as f64 / n as f64).abs() < 1e-15);
    }

    fn write_csv(dir: &Path, rows: usize) -> PathBuf {
        let mut text = String::from(crate::metrics::METRICS_HEADER);
        text.push('\n');
        for i in 0..rows {
            let v = 1.0 / (i + 1) as f64;
            text.push_str(&format!("{i},{v},{},{},{},0.1,0.2,0.9\n", v / 2.0, v / 3.0, v * 1.5));
        }
        let path = dir.join("metrics.csv");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn plots_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), 10);
        let a = emit_plots(&csv, &dir.path().join("a")).unwrap();
        let b = emit_plots(&csv, &dir.path().join("b")).unwrap();
        assert_eq!(a.loss_series, 4);
        assert_eq!(a.files.len(), 1);
        assert_eq!(fs::read(&a.files[0]).unwrap(), fs::read(&b.files[0]).unwrap());
    }

    #[test]
    fn empty_csv_has_no_data() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), 0);
        let err = emit_plots(&csv, dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "no data");
    }
}
