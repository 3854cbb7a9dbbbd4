//! Threshold-free evaluation metrics: image AUROC, pooled pixel AUROC, and
//! per-region overlap (PRO).
//!
//! PRO convention, pinned for the oracle tests: predictions are `map > t`
//! with thresholds swept over the distinct map values in descending order
//! (capped at 10,000 quantile-spaced values). Per threshold, the overlap
//! |pred n region| / |region| is averaged over every 8-connected
//! ground-truth region across all images, and the false-positive rate is
//! pooled over all normal pixels. The overlap-vs-FPR curve is integrated
//! by trapezoid from FPR 0 to `fpr_limit` (linear interpolation at the
//! crossing, horizontal extension if the curve ends early) and normalized
//! by `fpr_limit`.

use crate::error::{Error, Result};
use crate::tensor::{dims2, slice_of, Tensor};
use serde::{Deserialize, Serialize};

pub const PRO_MAX_THRESHOLDS: usize = 10_000;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub i_auc: f64,
    pub p_auc: f64,
    pub pro: f64,
    pub n_images: usize,
    pub fpr_limit: f64,
}

/// Exact rank-based AUROC (Mann-Whitney with midrank tie correction).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "auroc: scores and labels differ in length".into(),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auroc needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("non-finite score"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Midrank of the tie group [i, j], 1-based ranks.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUROC over the pooled pixel population of all maps.
pub fn pixel_auroc(maps: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::InvalidArgument(
            "pixel_auroc: map and mask counts differ".into(),
        ));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.shape() != mask.shape() {
            return Err(Error::ShapeMismatch(format!(
                "map {:?} vs mask {:?}",
                map.shape(),
                mask.shape()
            )));
        }
        scores.extend(map.iter().copied());
        labels.extend(mask.iter().map(|&v| if v != 0.0 { 1u8 } else { 0u8 }));
    }
    auroc(&scores, &labels)
}

/// Per-region overlap integrated over false-positive rate.
pub fn pro(maps: &[Tensor], masks: &[Tensor], fpr_limit: f64, max_thresholds: usize) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::InvalidArgument(
            "pro: map and mask counts differ".into(),
        ));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fpr_limit must lie in (0,1], got {fpr_limit}"
        )));
    }

    // Flatten pixels with region membership: region id per anomalous pixel,
    // None for normal pixels.
    struct Px {
        value: f64,
        region: Option<usize>,
    }
    let mut pixels: Vec<Px> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    let mut n_neg = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        if map.shape() != mask.shape() {
            return Err(Error::ShapeMismatch(format!(
                "map {:?} vs mask {:?}",
                map.shape(),
                mask.shape()
            )));
        }
        let (h, w) = dims2(mask);
        let ms = slice_of(mask);
        let vs = slice_of(map);
        let regions = crate::synthesis::label_regions_8(ms, h, w);
        let mut region_of = vec![usize::MAX; h * w];
        for r in regions {
            let rid = region_sizes.len();
            region_sizes.push(r.len());
            for (y, x) in r {
                region_of[y * w + x] = rid;
            }
        }
        for p in 0..h * w {
            if ms[p] != 0.0 {
                pixels.push(Px {
                    value: vs[p],
                    region: Some(region_of[p]),
                });
            } else {
                n_neg += 1;
                pixels.push(Px {
                    value: vs[p],
                    region: None,
                });
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::UndefinedMetric(
            "pro needs at least one anomalous region".into(),
        ));
    }
    if n_neg == 0 {
        return Err(Error::UndefinedMetric("pro needs normal pixels for FPR".into()));
    }

    let mut thresholds: Vec<f64> = pixels.iter().map(|p| p.value).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("non-finite map value"));
    thresholds.dedup();
    if thresholds.len() > max_thresholds {
        let n = thresholds.len();
        let mut picked = Vec::with_capacity(max_thresholds);
        for k in 0..max_thresholds {
            picked.push(thresholds[k * (n - 1) / (max_thresholds - 1)]);
        }
        picked.dedup();
        thresholds = picked;
    }
    thresholds.reverse();

    // Descending sweep: lowering the threshold only adds predicted pixels,
    // so FP counts and per-region hit fractions update incrementally.
    pixels.sort_by(|a, b| b.value.partial_cmp(&a.value).expect("non-finite map value"));
    let n_regions = region_sizes.len() as f64;
    let mut hit_ratio_sum = 0.0;
    let mut fp = 0usize;
    let mut cursor = 0usize;
    // Curve starts at FPR 0 with zero overlap (empty prediction).
    let mut curve: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for &t in &thresholds {
        while cursor < pixels.len() && pixels[cursor].value > t {
            match pixels[cursor].region {
                Some(r) => hit_ratio_sum += 1.0 / region_sizes[r] as f64,
                None => fp += 1,
            }
            cursor += 1;
        }
        curve.push((fp as f64 / n_neg as f64, hit_ratio_sum / n_regions));
    }

    // Trapezoid up to the limit; interpolate at the crossing.
    let mut area = 0.0;
    for k in 1..curve.len() {
        let (x0, y0) = curve[k - 1];
        let (x1, y1) = curve[k];
        if x1 <= fpr_limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            if x0 < fpr_limit {
                let f = (fpr_limit - x0) / (x1 - x0);
                let y_cross = y0 + f * (y1 - y0);
                area += (fpr_limit - x0) * (y0 + y_cross) / 2.0;
            }
            return Ok(area / fpr_limit);
        }
    }
    // Curve never reached the limit: extend horizontally at the last value.
    let (x_last, y_last) = *curve.last().expect("nonempty curve");
    if x_last < fpr_limit {
        area += (fpr_limit - x_last) * y_last;
    }
    Ok(area / fpr_limit)
}

/// Full evaluation over per-image maps/masks/scores.
pub fn evaluate(
    scores: &[f64],
    labels: &[u8],
    maps: &[Tensor],
    masks: &[Tensor],
    fpr_limit: f64,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        i_auc: auroc(scores, labels)?,
        p_auc: pixel_auroc(maps, masks)?,
        pro: pro(maps, masks, fpr_limit, PRO_MAX_THRESHOLDS)?,
        n_images: scores.len(),
        fpr_limit,
    })
}
