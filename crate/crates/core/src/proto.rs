//! Proto-object delineation from attention heads and saliency-weighted
//! aggregation over a random subset of them.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::vit::AttentionTaps;

/// `o_n = (A_n · q_n)ᵀ`: attention-weighted average of a head's queries.
pub fn synthesize_prototype(a_n: &[f64], q_n: &Mat) -> Vec<f64> {
    assert_eq!(a_n.len(), q_n.nrows(), "attention row length must match query rows");
    let mut o = vec![0.0; q_n.ncols()];
    for (a, row) in a_n.iter().zip(q_n.rows()) {
        for (o, q) in o.iter_mut().zip(row.iter()) {
            *o += a * q;
        }
    }
    o
}

/// `M_n,i = (e_i/‖e_i‖) · o_n`.
pub fn soft_assign(e: &Mat, o_n: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(e.ncols(), o_n.len(), "prototype width must match embedding width");
    e.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::ZeroNormEmbedding(i));
            }
            Ok(row.iter().zip(o_n).map(|(x, o)| x * o).sum::<f64>() / norm)
        })
        .collect()
}

/// `M_n > mean(M_n)`, falling back to the first argmax when nothing exceeds
/// the mean.
pub fn binarize_mask(m: &[f64]) -> Vec<bool> {
    if m.is_empty() {
        return Vec::new();
    }
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    let mut mask: Vec<bool> = m.iter().map(|&v| v > mean).collect();
    if !mask.iter().any(|&b| b) {
        let mut best = 0;
        for (i, &v) in m.iter().enumerate() {
            if v > m[best] {
                best = i;
            }
        }
        mask[best] = true;
    }
    mask
}

/// Zeroes every pixel whose patch is masked out. The patch grid is square
/// and raster-ordered.
pub fn apply_mask(image: &Array3<f64>, mask: &[bool], patch_size: usize) -> Result<Array3<f64>> {
    let (h, w, _) = image.dim();
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::IndivisibleDims { height: h, width: w, patch: patch_size });
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    if mask.len() != gh * gw {
        return Err(Error::Invalid(format!(
            "mask has {} entries but the image has {gh}x{gw} patches",
            mask.len()
        )));
    }
    let mut out = image.clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        if !mask[(y / patch_size) * gw + x / patch_size] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Uniform `K`-subset of `0..N` without replacement, in ascending order.
pub fn sample_subset(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(k <= n, "subset size {k} exceeds {n} proto-objects");
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Saliency `s_n` (mean patch attention mass of head `n`) and weights
/// `w = softmax(s/τ_w)` over `subset`.
pub fn saliency_weights(patch_mass: &Mat, subset: &[usize], tau_w: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(!subset.is_empty(), "saliency needs a non-empty subset");
    let s: Vec<f64> = subset.iter().map(|&n| patch_mass.row(n).mean().unwrap_or(0.0)).collect();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = s.iter().map(|v| ((v - max) / tau_w).exp()).collect();
    let total: f64 = exp.iter().sum();
    (s, exp.into_iter().map(|e| e / total).collect())
}

/// `f_agg = Σ w_n f_n`.
pub fn aggregate(f: &[&[f64]], w: &[f64]) -> Vec<f64> {
    assert_eq!(f.len(), w.len());
    assert!(!f.is_empty());
    let mut out = vec![0.0; f[0].len()];
    for (row, &wn) in f.iter().zip(w) {
        assert_eq!(row.len(), out.len());
        for (o, v) in out.iter_mut().zip(row.iter()) {
            *o += wn * v;
        }
    }
    out
}

/// Per-head prototypes, soft maps and binary masks for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Delineation {
    /// `N × D`. Head `n`'s prototype occupies its own `D_h` channel slice
    /// and is zero elsewhere.
    pub prototypes: Mat,
    /// `N × S`.
    pub soft_maps: Mat,
    pub masks: Vec<Vec<bool>>,
}

/// Runs prototype synthesis, soft assignment and thresholding for every
/// head.
///
/// A head's query lives in its own `D_h`-wide subspace while `e` is
/// `D`-wide, so each prototype is placed into that head's channel block of
/// a `D`-vector before alignment.
pub fn delineate(attention: &AttentionTaps, e: &Mat) -> Result<Delineation> {
    let heads = attention.queries.len();
    let (s, d) = e.dim();
    let dh = d / heads;
    let mut prototypes = Mat::zeros((heads, d));
    let mut soft_maps = Array2::zeros((heads, s));
    let mut masks = Vec::with_capacity(heads);
    for n in 0..heads {
        let a_n = attention.maps.row(n).to_vec();
        let o = synthesize_prototype(&a_n, &attention.queries[n]);
        assert_eq!(o.len(), dh, "query width must be D / heads");
        prototypes.row_mut(n).slice_mut(ndarray::s![n * dh..(n + 1) * dh]).assign(&ndarray::ArrayView1::from(&o));
        let m = soft_assign(e, prototypes.row(n).as_slice().expect("contiguous"))?;
        masks.push(binarize_mask(&m));
        soft_maps.row_mut(n).assign(&ndarray::ArrayView1::from(&m));
    }
    Ok(Delineation {
        prototypes,
        soft_maps,
        masks,
    })
}

/// `P_n = X ⊙ Up(Mask_n)` for every head.
pub fn masked_views(image: &Array3<f64>, delineation: &Delineation, patch_size: usize) -> Result<Vec<Array3<f64>>> {
    delineation
        .masks
        .iter()
        .map(|m| apply_mask(image, m, patch_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prototype_selection_and_convexity() {
        let q = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(synthesize_prototype(&[0.0, 1.0, 0.0], &q), vec![3.0, 4.0]);
        let same = array![[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]];
        let o = synthesize_prototype(&[1.0 / 3.0; 3], &same);
        assert!((o[0] - 0.5).abs() < 1e-15 && (o[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn prototype_matches_dense_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Mat::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0));
        let a = array![[0.1, 0.2, 0.3, 0.4]];
        let oracle = a.dot(&q);
        let o = synthesize_prototype(a.row(0).as_slice().unwrap(), &q);
        for (x, y) in o.iter().zip(oracle.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_assign_examples() {
        let o = [0.6, 0.8];
        let e = array![[0.6, 0.8], [0.6, 0.8]];
        let m = soft_assign(&e, &o).unwrap();
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let o = [3.0, 4.0];
        let e = array![[3.0, 4.0]];
        assert!((soft_assign(&e, &o).unwrap()[0] - 5.0).abs() < 1e-12);
        let perp = array![[-4.0, 3.0]];
        assert_eq!(soft_assign(&perp, &o).unwrap()[0], 0.0);
        let zero = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(soft_assign(&zero, &o), Err(Error::ZeroNormEmbedding(1))));
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize_mask(&[1.0, 2.0, 3.0, 4.0]), vec![false, false, true, true]);
        assert_eq!(binarize_mask(&[2.0; 4]), vec![true, false, false, false]);
        assert_eq!(binarize_mask(&[0.1, 0.2, 9.0, 0.0, 0.1]), vec![false, false, true, false, false]);
    }

    #[test]
    fn mask_expansion() {
        let img = Array3::from_elem((4, 4, 3), 1.0);
        assert_eq!(apply_mask(&img, &[true; 4], 2).unwrap(), img);
        let checker = [true, false, false, true];
        let out = apply_mask(&img, &checker, 2).unwrap();
        // Kronecker product of the 2×2 mask with a 2×2 block of ones.
        let grid = array![[1.0, 0.0], [0.0, 1.0]];
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(out[[y, x, c]], grid[[y / 2, x / 2]]);
                }
            }
        }
        assert!(apply_mask(&img, &[true; 3], 2).is_err());
    }

    #[test]
    fn subset_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_subset(6, 6, &mut rng), (0..6).collect::<Vec<_>>());
        assert_eq!(sample_subset(6, 1, &mut rng).len(), 1);
    }

    #[test]
    fn subset_frequencies_are_uniform() {
        let (n, k, draws) = (6usize, 3usize, 10_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            for i in sample_subset(n, k, &mut rng) {
                counts[i] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "{c} vs {expected}");
        }
    }

    #[test]
    fn saliency_examples() {
        let mass = array![[0.1, 0.3], [0.2, 0.2], [0.0, 0.4], [0.9, 0.9]];
        let (s, w) = saliency_weights(&mass, &[0, 1, 2], 0.1);
        assert!(s.iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

        let mass = array![[0.1, 0.1], [0.3, 0.3], [0.2, 0.2]];
        let (_, w) = saliency_weights(&mass, &[0, 1, 2], 1e-4);
        assert!(w[1] > 0.999);

        let (s, w) = saliency_weights(&mass, &[0, 1, 2], 0.1);
        let e: Vec<f64> = s.iter().map(|v| (v / 0.1).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in w.iter().zip(e.iter()) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        let v = [1.0, -2.0, 0.5];
        assert_eq!(aggregate(&[&v, &v], &[0.4, 0.6]), v.to_vec());
        let a = [1.0, 2.0];
        let b = [5.0, 7.0];
        assert_eq!(aggregate(&[&a, &b], &[0.0, 1.0]), b.to_vec());
        let out = aggregate(&[&a, &b], &[0.25, 0.75]);
        assert_eq!(out, vec![0.25 * 1.0 + 0.75 * 5.0, 0.25 * 2.0 + 0.75 * 7.0]);
    }

    #[test]
    fn delineation_places_prototype_in_head_block() {
        let attention = AttentionTaps {
            maps: array![[1.0, 0.0], [0.0, 1.0]],
            patch_mass: array![[0.5, 0.1], [0.1, 0.5]],
            queries: vec![array![[1.0], [0.0]], array![[0.0], [2.0]]],
        };
        let e = array![[1.0, -1.0], [-1.0, 1.0]];
        let d = delineate(&attention, &e).unwrap();
        assert_eq!(d.prototypes, array![[1.0, 0.0], [0.0, 2.0]]);
        assert_eq!(d.masks, vec![vec![true, false], vec![false, true]]);
    }
}
