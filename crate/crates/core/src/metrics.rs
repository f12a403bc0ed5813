//! Ranking and segmentation metrics: AUROC, AP, F1-max and PRO.
//!
//! Every function returns `None` when the metric is undefined for its input
//! (for example a single-class label set) instead of a placeholder value.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ImageScore, Model};
use crate::synth::ImageSample;
use crate::tensor::Tensor;
use crate::train::csv_err;

/// Default FPR integration limit for PRO.
pub const PRO_FPR_LIMIT: f64 = 0.3;
/// Largest exact threshold sweep for PRO; larger maps use this many quantiles.
pub const PRO_MAX_THRESHOLDS: usize = 256;
/// Pixel metrics subsample above this many pixels.
pub const MAX_PIXELS: usize = 1_000_000;

fn counts(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

/// Indices sorted by descending score, split into groups of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann–Whitney AUROC with half credit for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let (p, n) = counts(labels);
    if p == 0 || n == 0 {
        return None;
    }
    // Walk ascending groups; each positive beats all negatives seen so far.
    let mut neg_below = 0usize;
    let mut twice_u = 0u128;
    for g in tie_groups(scores).into_iter().rev() {
        let gp = g.iter().filter(|&&i| labels[i]).count();
        let gn = g.len() - gp;
        twice_u += (2 * gp * neg_below + gp * gn) as u128;
        neg_below += gn;
    }
    Some(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// Step-wise AP over tie-grouped thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let (p, _) = counts(labels);
    if p == 0 {
        return None;
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores) {
        let gp = g.iter().filter(|&&i| labels[i]).count();
        tp += gp;
        seen += g.len();
        if gp > 0 {
            ap += (gp as f64 / p as f64) * (tp as f64 / seen as f64);
        }
    }
    Some(ap)
}

/// Best F1 over thresholds at every distinct score (`score ≥ t` is positive).
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let (p, _) = counts(labels);
    if p == 0 {
        return None;
    }
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    for g in tie_groups(scores) {
        let gp = g.iter().filter(|&&i| labels[i]).count();
        tp += gp;
        fp += g.len() - gp;
        best = best.max(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + (p - tp) as f64));
    }
    Some(best)
}

/// 8-connected components of a binary mask; `0` is background, regions are `1..`.
pub fn label_regions(mask: &Tensor) -> (Vec<usize>, usize) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let on = |i: usize| mask.data()[i] > 0.5;
    let mut labels = vec![0usize; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !on(start) || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if on(j) && labels[j] == 0 {
                        labels[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Normalized area under a piecewise-linear `(fpr, value)` curve on
/// `[0, limit]`. Points must be sorted by FPR; the curve is held flat left of
/// its first point.
pub fn integrate_curve(points: &[(f64, f64)], limit: f64) -> f64 {
    let Some(&(f0, v0)) = points.first() else {
        return 0.0;
    };
    let mut area = f0.min(limit) * v0;
    for pair in points.windows(2) {
        let ((fa, va), (fb, vb)) = (pair[0], pair[1]);
        if fa >= limit {
            break;
        }
        if fb <= fa {
            continue;
        }
        let end = fb.min(limit);
        let v_end = va + (vb - va) * (end - fa) / (fb - fa);
        area += (end - fa) * (va + v_end) / 2.0;
    }
    let (fl, vl) = *points.last().unwrap();
    if fl < limit {
        area += (limit - fl) * vl;
    }
    area / limit
}

/// Per-region overlap integrated up to `fpr_limit`.
pub fn pro(maps: &[Tensor], masks: &[Tensor], fpr_limit: f64) -> Result<Option<f64>> {
    if maps.len() != masks.len() {
        return Err(Error::Contract(format!(
            "{} maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Contract(format!("FPR limit {fpr_limit} outside (0,1]")));
    }
    // Per pixel: value and region id (0 for normal pixels), regions numbered globally.
    let mut values = Vec::new();
    let mut region = Vec::new();
    let mut sizes = vec![0usize];
    for (map, mask) in maps.iter().zip(masks) {
        if map.shape() != mask.shape() || map.rank() != 2 {
            return Err(Error::dim("pro", map.shape(), mask.shape()));
        }
        let (ids, n) = label_regions(mask);
        let base = sizes.len() - 1;
        sizes.extend(std::iter::repeat_n(0, n));
        for (v, id) in map.data().iter().zip(ids) {
            values.push(*v);
            let g = if id == 0 { 0 } else { base + id };
            sizes[g] += 1;
            region.push(g);
        }
    }
    let regions = sizes.len() - 1;
    let negatives = sizes[0];
    if regions == 0 || negatives == 0 {
        return Ok(None);
    }

    let groups = tie_groups(&values);
    let keep: Vec<bool> = if groups.len() <= PRO_MAX_THRESHOLDS {
        vec![true; groups.len()]
    } else {
        let mut k = vec![false; groups.len()];
        let last = groups.len() - 1;
        for q in 0..PRO_MAX_THRESHOLDS {
            k[(q * last + (PRO_MAX_THRESHOLDS - 1) / 2) / (PRO_MAX_THRESHOLDS - 1)] = true;
        }
        k[last] = true;
        k
    };
    let mut fp = 0usize;
    let mut overlap = 0.0;
    let mut points = Vec::new();
    for (g, take) in groups.iter().zip(keep) {
        for &i in g {
            match region[i] {
                0 => fp += 1,
                r => overlap += 1.0 / sizes[r] as f64,
            }
        }
        if take {
            points.push((fp as f64 / negatives as f64, overlap / regions as f64));
        }
    }
    Ok(Some(integrate_curve(&points, fpr_limit)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub image_auroc: Option<f64>,
    pub image_f1max: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_pro: Option<f64>,
    pub pixel_ap: Option<f64>,
    pub image_pos: usize,
    pub image_neg: usize,
    pub pixel_pos: usize,
    pub pixel_neg: usize,
    /// Pixels entering pixel AUROC/AP after any subsampling.
    pub pixels_used: usize,
}

impl MetricsReport {
    /// Computes every metric from image scores and full-resolution maps.
    pub fn compute(
        scores: &[f64],
        labels: &[bool],
        maps: &[Tensor],
        masks: &[Tensor],
        seed: u64,
    ) -> Result<Self> {
        let mut px_scores = Vec::new();
        let mut px_labels = Vec::new();
        for (m, g) in maps.iter().zip(masks) {
            px_scores.extend_from_slice(m.data());
            px_labels.extend(g.data().iter().map(|&v| v > 0.5));
        }
        let (pixel_pos, pixel_neg) = counts(&px_labels);
        if px_scores.len() > MAX_PIXELS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pick = sample(&mut rng, px_scores.len(), MAX_PIXELS).into_vec();
            pick.sort_unstable();
            px_scores = pick.iter().map(|&i| px_scores[i]).collect();
            px_labels = pick.iter().map(|&i| px_labels[i]).collect();
        }
        let (image_pos, image_neg) = counts(labels);
        Ok(Self {
            image_auroc: auroc(scores, labels),
            image_f1max: f1_max(scores, labels),
            image_ap: average_precision(scores, labels),
            pixel_auroc: auroc(&px_scores, &px_labels),
            pixel_pro: pro(maps, masks, PRO_FPR_LIMIT)?,
            pixel_ap: average_precision(&px_scores, &px_labels),
            image_pos,
            image_neg,
            pixel_pos,
            pixel_neg,
            pixels_used: px_scores.len(),
        })
    }

    /// Metric values in table order.
    pub fn values(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("image_auroc", self.image_auroc),
            ("image_f1max", self.image_f1max),
            ("image_ap", self.image_ap),
            ("pixel_auroc", self.pixel_auroc),
            ("pixel_pro", self.pixel_pro),
            ("pixel_ap", self.pixel_ap),
        ]
    }
}

/// Scores every sample (in parallel) and computes the report.
pub fn evaluate(model: &Model, samples: &[ImageSample]) -> Result<(MetricsReport, Vec<ImageScore>)> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let scored: Vec<ImageScore> = samples
        .par_iter()
        .map(|s| model.score_pixels(&s.pixels))
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = scored.iter().map(|s| s.raw).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label == 1).collect();
    let maps: Vec<Tensor> = scored.iter().map(|s| s.map.clone()).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = MetricsReport::compute(&raw, &labels, &maps, &masks, model.config().seed)?;
    Ok((report, scored))
}

pub const METRICS_HEADER: [&str; 13] = [
    "split",
    "family",
    "image_auroc",
    "image_f1max",
    "image_ap",
    "pixel_auroc",
    "pixel_pro",
    "pixel_ap",
    "image_pos",
    "image_neg",
    "pixel_pos",
    "pixel_neg",
    "pixels_used",
];

/// One CSV row per `(split, family)`; undefined metrics are written as `NA`.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for (split, family, r) in rows {
        let mut rec = vec![split.clone(), family.clone()];
        rec.extend(r.values().iter().map(|(_, v)| match v {
            Some(x) => format!("{x}"),
            None => "NA".into(),
        }));
        rec.extend(
            [r.image_pos, r.image_neg, r.pixel_pos, r.pixel_neg, r.pixels_used].map(|c| c.to_string()),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_cases() {
        assert_eq!(
            auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]),
            Some(1.0)
        );
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(auroc(&[0.3, 0.4], &[true, true]), None);
        // One of the two positives ties its negative.
        assert_eq!(auroc(&[0.7, 0.5, 0.5], &[true, true, false]), Some(0.75));
    }

    #[test]
    fn ap_and_f1_cases() {
        assert_eq!(
            average_precision(&[0.9, 0.1, 0.2], &[true, false, false]),
            Some(1.0)
        );
        assert_eq!(average_precision(&[0.1, 0.9], &[true, false]), Some(0.5));
        assert_eq!(average_precision(&[0.1, 0.9], &[false, false]), None);
        assert_eq!(f1_max(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(f1_max(&[0.1], &[false]), None);
        // Reversed ranking on a balanced set: the lowest threshold is best.
        let f = f1_max(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn regions_use_eight_connectivity() {
        let m = Tensor::new([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(label_regions(&m).1, 1);
        let m = Tensor::new([3, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(label_regions(&m).1, 4);
    }

    #[test]
    fn pro_cases() {
        let mut mask = Tensor::zeros([4, 4]);
        for i in [5, 6, 9, 10] {
            mask.data_mut()[i] = 1.0;
        }
        assert_eq!(pro(&[mask.clone()], &[mask.clone()], 0.3).unwrap(), Some(1.0));
        // A constant map predicts everything at its one threshold: coverage 1.
        let flat = Tensor::full([4, 4], 0.4);
        assert_eq!(pro(&[flat], &[mask.clone()], 0.3).unwrap(), Some(1.0));
        // Covering half the region at zero FPR, then everything at FPR 1.
        let mut half = Tensor::zeros([4, 4]);
        half.data_mut()[5] = 1.0;
        half.data_mut()[6] = 1.0;
        let v = pro(&[half], &[mask.clone()], 0.3).unwrap().unwrap();
        assert!((v - (0.5 + 0.5 * 0.3 / 2.0)).abs() < 1e-12);
        assert_eq!(
            pro(&[Tensor::zeros([2, 2])], &[Tensor::zeros([2, 2])], 0.3).unwrap(),
            None
        );
    }

    #[test]
    fn pro_quantile_sweep_stays_close_to_exact() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mask = Tensor::zeros([64, 64]);
        for y in 10..20 {
            for x in 30..45 {
                mask.data_mut()[y * 64 + x] = 1.0;
            }
        }
        let map = Tensor::new(
            [64, 64],
            mask.data()
                .iter()
                .map(|m| 0.3 * m + rng.random::<f64>())
                .collect(),
        )
        .unwrap();
        let v = pro(&[map], &[mask], 0.3).unwrap().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn csv_writes_na_for_undefined() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let r = MetricsReport {
            image_auroc: Some(0.75),
            ..MetricsReport::default()
        };
        write_metrics_csv(&p, &[("eval".into(), "C".into(), r)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        assert!(lines[1].starts_with("eval,C,0.75,NA,NA,NA,NA,NA,"));
    }

    proptest! {
        #[test]
        fn auroc_is_antisymmetric_without_ties(scores in prop::collection::vec(-1e3f64..1e3, 2..30), seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<bool> = scores.iter().map(|_| rng.random()).collect();
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            prop_assume!(sorted.len() == scores.len());
            if let Some(a) = auroc(&scores, &labels) {
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
