//! Metric implementations against brute-force oracles: AUROC against
//! O(n^2) pairwise counting, PRO against a literal per-threshold recount.

use dmdd_core::metrics::{auroc, pixel_auroc, pro};
use dmdd_core::synthesis::label_regions_8;
use dmdd_core::tensor::{from_vec, slice_of, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Literal PRO recount: every distinct map value as threshold, full scan
/// of every pixel per threshold, trapezoid to the limit.
fn exhaustive_pro(maps: &[Tensor], masks: &[Tensor], fpr_limit: f64) -> f64 {
    let mut thresholds: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.iter().copied())
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    // Region lists per image.
    let mut regions: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    let mut n_neg = 0usize;
    for (img, mask) in masks.iter().enumerate() {
        let h = mask.shape()[0];
        let w = mask.shape()[1];
        for r in label_regions_8(slice_of(mask), h, w) {
            regions.push((img, r));
        }
        n_neg += slice_of(mask).iter().filter(|&&v| v == 0.0).count();
    }

    let mut curve = vec![(0.0f64, 0.0f64)];
    for &t in &thresholds {
        let mut overlap_sum = 0.0;
        for (img, px) in &regions {
            let map = &maps[*img];
            let hit = px.iter().filter(|(y, x)| map[[*y, *x]] > t).count();
            overlap_sum += hit as f64 / px.len() as f64;
        }
        let mut fp = 0usize;
        for (map, mask) in maps.iter().zip(masks) {
            let h = mask.shape()[0];
            let w = mask.shape()[1];
            for y in 0..h {
                for x in 0..w {
                    if mask[[y, x]] == 0.0 && map[[y, x]] > t {
                        fp += 1;
                    }
                }
            }
        }
        curve.push((fp as f64 / n_neg as f64, overlap_sum / regions.len() as f64));
    }

    let mut area = 0.0;
    for k in 1..curve.len() {
        let (x0, y0) = curve[k - 1];
        let (x1, y1) = curve[k];
        if x1 <= fpr_limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            if x0 < fpr_limit {
                let f = (fpr_limit - x0) / (x1 - x0);
                let yc = y0 + f * (y1 - y0);
                area += (fpr_limit - x0) * (y0 + yc) / 2.0;
            }
            return area / fpr_limit;
        }
    }
    let (x_last, y_last) = *curve.last().unwrap();
    if x_last < fpr_limit {
        area += (fpr_limit - x_last) * y_last;
    }
    area / fpr_limit
}

#[test]
fn auroc_trivial_cases() {
    assert_eq!(auroc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
    let v = auroc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
    assert!((v - 0.5).abs() < 1e-12);
    assert!(auroc(&[0.3, 0.4], &[1, 1]).is_err());
}

#[test]
fn auroc_matches_pairwise_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    for instance in 0..50 {
        let n = rng.random_range(5..=200);
        let quantized = instance % 2 == 0;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let s: f64 = rng.random_range(0.0..1.0);
            scores.push(if quantized { (s * 8.0).round() / 8.0 } else { s });
            labels.push(rng.random_range(0..2) as u8);
        }
        // Force both classes.
        labels[0] = 1;
        labels[n - 1] = 0;
        let fast = auroc(&scores, &labels).unwrap();
        let slow = pairwise_auroc(&scores, &labels);
        assert!(
            (fast - slow).abs() < 1e-9,
            "instance {instance}: {fast} vs {slow}"
        );
    }
}

#[test]
fn pixel_auroc_trivial_cases() {
    // Map equals mask with a small jitter keeping order: perfect ranking.
    let mask = from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let map = from_vec(&[2, 2], vec![0.99, 0.01, 0.02, 0.98]);
    assert_eq!(pixel_auroc(&[map.clone()], &[mask.clone()]).unwrap(), 1.0);
    let inv = from_vec(&[2, 2], vec![0.01, 0.99, 0.98, 0.02]);
    assert_eq!(pixel_auroc(&[inv], &[mask]).unwrap(), 0.0);
}

#[test]
fn pro_trivial_cases() {
    let mask = from_vec(
        &[4, 4],
        vec![
            1.0, 1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    // Prediction identical to the mask: full overlap before any FP.
    let map = mask.clone();
    let v = pro(&[map], &[mask.clone()], 0.3, 10_000).unwrap();
    assert!((v - 1.0).abs() < 1e-12, "exact prediction: {v}");
    // All-zero prediction: nothing ever crosses a threshold.
    let zero = from_vec(&[4, 4], vec![0.0; 16]);
    let v = pro(&[zero], &[mask], 0.3, 10_000).unwrap();
    assert!(v.abs() < 1e-12, "zero prediction: {v}");
}

#[test]
fn pro_matches_exhaustive_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    for instance in 0..50 {
        let n_images = rng.random_range(1..=3);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        let mut any_region = false;
        for img in 0..n_images {
            let quantized = instance % 3 == 0;
            let mut map = Vec::with_capacity(64);
            for _ in 0..64 {
                let v: f64 = rng.random_range(0.0..1.0);
                map.push(if quantized { (v * 6.0).round() / 6.0 } else { v });
            }
            let mut mask = vec![0.0; 64];
            // Up to 3 small rectangles; merging keeps the count <= 3.
            let n_rects = if img == 0 {
                rng.random_range(1..=3)
            } else {
                rng.random_range(0..=3)
            };
            for _ in 0..n_rects {
                let y0 = rng.random_range(0..7);
                let x0 = rng.random_range(0..7);
                let hh = rng.random_range(1..=2usize);
                let ww = rng.random_range(1..=2usize);
                for y in y0..(y0 + hh).min(8) {
                    for x in x0..(x0 + ww).min(8) {
                        mask[y * 8 + x] = 1.0;
                    }
                }
            }
            if mask.iter().any(|&v| v != 0.0) {
                any_region = true;
            }
            maps.push(from_vec(&[8, 8], map));
            masks.push(from_vec(&[8, 8], mask));
        }
        if !any_region {
            masks[0][[4, 4]] = 1.0;
        }
        let fast = pro(&maps, &masks, 0.3, 10_000).unwrap();
        let slow = exhaustive_pro(&maps, &masks, 0.3);
        assert!(
            (fast - slow).abs() < 1e-6,
            "instance {instance}: {fast} vs {slow}"
        );
    }
}

#[test]
fn auroc_invariant_under_monotone_transform() {
    let mut rng = ChaCha20Rng::seed_from_u64(29);
    let scores: Vec<f64> = (0..80).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut labels: Vec<u8> = (0..80).map(|_| rng.random_range(0..2) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    let base = auroc(&scores, &labels).unwrap();
    let exp: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
    let affine: Vec<f64> = scores.iter().map(|&s| 4.0 * s + 11.0).collect();
    assert!((auroc(&exp, &labels).unwrap() - base).abs() < 1e-12);
    assert!((auroc(&affine, &labels).unwrap() - base).abs() < 1e-12);
}

#[test]
fn pro_invariant_under_common_monotone_transform() {
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let map: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut mask = vec![0.0; 64];
    for p in [9, 10, 17, 18, 44, 45] {
        mask[p] = 1.0;
    }
    let maps = [from_vec(&[8, 8], map.clone())];
    let masks = [from_vec(&[8, 8], mask)];
    let base = pro(&maps, &masks, 0.3, 10_000).unwrap();
    let warped = [from_vec(
        &[8, 8],
        map.iter().map(|&v| (3.0 * v).exp()).collect(),
    )];
    let w = pro(&warped, &masks, 0.3, 10_000).unwrap();
    assert!((base - w).abs() < 1e-9, "{base} vs {w}");
}

#[test]
fn pro_requires_a_region_and_both_pixel_classes() {
    let map = from_vec(&[4, 4], vec![0.5; 16]);
    let empty = from_vec(&[4, 4], vec![0.0; 16]);
    assert!(pro(&[map.clone()], &[empty], 0.3, 10_000).is_err());
    let full = from_vec(&[4, 4], vec![1.0; 16]);
    assert!(pro(&[map], &[full], 0.3, 10_000).is_err());
}

#[test]
fn pro_quantile_subsampling_stays_close_to_exact() {
    let mut rng = ChaCha20Rng::seed_from_u64(37);
    let map: Vec<f64> = (0..4096).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut mask = vec![0.0; 4096];
    for y in 20..28 {
        for x in 30..44 {
            mask[y * 64 + x] = 1.0;
        }
    }
    let maps = [from_vec(&[64, 64], map)];
    let masks = [from_vec(&[64, 64], mask)];
    let exact = pro(&maps, &masks, 0.3, 10_000).unwrap();
    let coarse = pro(&maps, &masks, 0.3, 512).unwrap();
    assert!((exact - coarse).abs() < 0.01, "{exact} vs {coarse}");
}
