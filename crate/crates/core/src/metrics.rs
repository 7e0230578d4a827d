//! Segmentation and reconstruction metrics: foreground adjusted Rand
//! index, foreground mean segmentation covering, max-intersection
//! foreground IoU/Dice, and both MSE reporting conventions.
//!
//! Predicted partitions come from a per-pixel argmax over the decoder's
//! slot masks. Images whose ground truth makes a metric undefined are
//! skipped and counted rather than averaged in.

use crate::scenegen::SceneSample;
use crate::tensor::Element;
use std::collections::HashMap;

fn comb2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Hubert-Arabie adjusted Rand index between two labelings of the same
/// elements. Exact integer combinatorics until the final division.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as u64;
    if n < 2 {
        return 1.0;
    }
    let mut cells: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *cells.entry((*x, *y)).or_insert(0) += 1;
        *rows.entry(*x).or_insert(0) += 1;
        *cols.entry(*y).or_insert(0) += 1;
    }
    let s: u64 = cells.values().map(|c| comb2(*c)).sum();
    let ra: u64 = rows.values().map(|c| comb2(*c)).sum();
    let cb: u64 = cols.values().map(|c| comb2(*c)).sum();
    let total = comb2(n);
    let expected = (ra as u128 * cb as u128) as f64 / total as f64;
    let max = 0.5 * (ra + cb) as f64;
    if (max - expected).abs() < 1e-12 {
        // both partitions trivial; identical by convention
        return 1.0;
    }
    (s as f64 - expected) / (max - expected)
}

/// Per-pixel argmax over K soft masks laid out `[K, HW]`.
pub fn argmax_labels<E: Element>(masks: &[E], k: usize, hw: usize) -> Vec<u32> {
    debug_assert_eq!(masks.len(), k * hw);
    let mut out = vec![0u32; hw];
    for (p, o) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = masks[p];
        for ki in 1..k {
            let v = masks[ki * hw + p];
            if v > best_v {
                best_v = v;
                best = ki;
            }
        }
        *o = best as u32;
    }
    out
}

/// ARI restricted to ground-truth foreground pixels. None when fewer than
/// two foreground pixels exist.
pub fn ari_fg(pred: &[u32], gt_labels: &[u8]) -> Option<f64> {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (i, l) in gt_labels.iter().enumerate() {
        if *l != 0 {
            p.push(pred[i]);
            g.push(*l as u32);
        }
    }
    if g.len() < 2 {
        return None;
    }
    Some(adjusted_rand_index(&g, &p))
}

fn iou_counts(inter: usize, a: usize, b: usize) -> f64 {
    let union = a + b - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean segmentation covering over ground-truth foreground instances:
/// each instance is covered by its best-IoU predicted mask. Returns
/// (size-weighted, unweighted); None without GT instances.
pub fn msc_fg(pred: &[u32], k: usize, sample: &SceneSample) -> Option<(f64, f64)> {
    if sample.n_sprites == 0 {
        return None;
    }
    let mut weighted = 0.0;
    let mut unweighted = 0.0;
    let mut total_size = 0usize;
    // pred mask sizes by label
    let mut pred_sizes = vec![0usize; k];
    for l in pred {
        pred_sizes[*l as usize] += 1;
    }
    for inst in 0..sample.n_sprites {
        let id = (inst + 1) as u8;
        let size = sample.labels.iter().filter(|l| **l == id).count();
        let mut inter = vec![0usize; k];
        for (p, l) in pred.iter().zip(&sample.labels) {
            if *l == id {
                inter[*p as usize] += 1;
            }
        }
        let cover = (0..k)
            .map(|ki| iou_counts(inter[ki], pred_sizes[ki], size))
            .fold(0.0f64, f64::max);
        weighted += size as f64 * cover;
        unweighted += cover;
        total_size += size;
    }
    if total_size == 0 {
        return None;
    }
    Some((
        weighted / total_size as f64,
        unweighted / sample.n_sprites as f64,
    ))
}

/// IoU and Dice of two binary masks. Disjoint masks score (0, 0).
pub fn iou_dice(pred_mask: &[bool], gt_mask: &[bool]) -> (f64, f64) {
    let mut inter = 0usize;
    let mut p_size = 0usize;
    let mut g_size = 0usize;
    for (p, g) in pred_mask.iter().zip(gt_mask) {
        if *p {
            p_size += 1;
        }
        if *g {
            g_size += 1;
        }
        if *p && *g {
            inter += 1;
        }
    }
    if p_size + g_size == 0 {
        return (0.0, 0.0);
    }
    (
        iou_counts(inter, p_size, g_size),
        2.0 * inter as f64 / (p_size + g_size) as f64,
    )
}

/// Foreground extraction: the predicted mask with maximum intersection
/// against the GT foreground is scored with IoU and Dice. None when the
/// foreground is empty.
pub fn fg_extraction(pred: &[u32], k: usize, gt_foreground: &[bool]) -> Option<(f64, f64)> {
    let fg_size = gt_foreground.iter().filter(|b| **b).count();
    if fg_size == 0 {
        return None;
    }
    let mut inter = vec![0usize; k];
    for (p, fg) in pred.iter().zip(gt_foreground) {
        if *fg {
            inter[*p as usize] += 1;
        }
    }
    let chosen = (0..k)
        .max_by_key(|ki| (inter[*ki], std::cmp::Reverse(*ki)))
        .unwrap();
    let chosen_mask: Vec<bool> = pred.iter().map(|p| *p as usize == chosen).collect();
    Some(iou_dice(&chosen_mask, gt_foreground))
}

/// The slot mask whose intersection with the GT background is largest;
/// rendering colors it black.
pub fn background_slot(pred: &[u32], k: usize, gt_background: &[bool]) -> usize {
    let mut inter = vec![0usize; k];
    for (p, bg) in pred.iter().zip(gt_background) {
        if *bg {
            inter[*p as usize] += 1;
        }
    }
    (0..k).max_by_key(|ki| (inter[*ki], std::cmp::Reverse(*ki))).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MseConvention {
    PerPixel,
    /// per-pixel mean multiplied by the pixel count (H*W)
    SlateTotal,
}

/// Mean squared error over all channels and pixels, in both conventions.
pub fn mse_values<E: Element>(recon: &[E], image: &[E], hw: usize) -> (f64, f64) {
    debug_assert_eq!(recon.len(), image.len());
    let mut acc = 0.0f64;
    for (r, t) in recon.iter().zip(image) {
        let d = r.as_f64() - t.as_f64();
        acc += d * d;
    }
    let per_pixel = acc / recon.len() as f64;
    (per_pixel, per_pixel * hw as f64)
}

pub fn mse_report<E: Element>(
    recon: &[E],
    image: &[E],
    hw: usize,
    convention: MseConvention,
) -> f64 {
    let (pp, total) = mse_values(recon, image, hw);
    match convention {
        MseConvention::PerPixel => pp,
        MseConvention::SlateTotal => total,
    }
}

/// Per-image metric row. None marks a metric skipped for degenerate GT.
#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub ari_fg: Option<f64>,
    pub msc_fg: Option<f64>,
    pub msc_fg_unweighted: Option<f64>,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub mse_per_pixel: f64,
    pub mse_slate: f64,
}

/// Scores one image given the per-pixel soft masks `[K, HW]` and the
/// reconstruction against its scene sample.
pub fn evaluate_image<E: Element>(
    masks: &[E],
    k: usize,
    recon: &[E],
    sample: &SceneSample,
) -> ImageMetrics {
    let hw = sample.size * sample.size;
    let pred = argmax_labels(masks, k, hw);
    let image: Vec<E> = sample.image_tensor::<E>().to_vec();
    let (mse_per_pixel, mse_slate) = mse_values(recon, &image, hw);
    let msc = msc_fg(&pred, k, sample);
    let fg = sample
        .background_mask()
        .iter()
        .map(|b| !b)
        .collect::<Vec<bool>>();
    let iou_dice = fg_extraction(&pred, k, &fg);
    ImageMetrics {
        ari_fg: ari_fg(&pred, &sample.labels),
        msc_fg: msc.map(|m| m.0),
        msc_fg_unweighted: msc.map(|m| m.1),
        iou: iou_dice.map(|v| v.0),
        dice: iou_dice.map(|v| v.1),
        mse_per_pixel,
        mse_slate,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
    pub skipped: usize,
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> Summary {
    let mut kept = Vec::new();
    let mut skipped = 0usize;
    for v in values {
        match v {
            Some(x) => kept.push(x),
            None => skipped += 1,
        }
    }
    let count = kept.len();
    if count == 0 {
        return Summary {
            mean: f64::NAN,
            stddev: f64::NAN,
            count,
            skipped,
        };
    }
    let mean = kept.iter().sum::<f64>() / count as f64;
    let stddev = if count > 1 {
        (kept.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary {
        mean,
        stddev,
        count,
        skipped,
    }
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "ari_fg",
    "msc_fg",
    "msc_fg_unweighted",
    "miou",
    "dice",
    "mse_per_pixel",
    "mse_slate",
];

/// Dataset-level report: one row per image plus summary rows.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
    /// free-form tag, e.g. "sprites2->sprites4" for transfer runs
    pub tag: String,
}

impl MetricReport {
    pub fn column(&self, name: &str) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| match name {
                "ari_fg" => r.ari_fg,
                "msc_fg" => r.msc_fg,
                "msc_fg_unweighted" => r.msc_fg_unweighted,
                "miou" => r.iou,
                "dice" => r.dice,
                "mse_per_pixel" => Some(r.mse_per_pixel),
                "mse_slate" => Some(r.mse_slate),
                _ => panic!("unknown metric column {name}"),
            })
            .collect()
    }

    pub fn summary(&self, name: &str) -> Summary {
        summarize(self.column(name).into_iter())
    }

    pub fn mean(&self, name: &str) -> f64 {
        self.summary(name).mean
    }

    /// One row per image, then mean / stddev (sample) / skipped rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image");
        for c in METRIC_COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => String::new(),
        };
        for (i, r) in self.rows.iter().enumerate() {
            let cells = [
                fmt(r.ari_fg),
                fmt(r.msc_fg),
                fmt(r.msc_fg_unweighted),
                fmt(r.iou),
                fmt(r.dice),
                fmt(Some(r.mse_per_pixel)),
                fmt(Some(r.mse_slate)),
            ];
            out.push_str(&format!("{i},{}\n", cells.join(",")));
        }
        for (label, pick) in [
            ("mean", 0usize),
            ("stddev", 1),
            ("skipped", 2),
        ] {
            let mut cells = Vec::new();
            for c in METRIC_COLUMNS {
                let s = self.summary(c);
                cells.push(match pick {
                    0 => format!("{:.6}", s.mean),
                    1 => format!("{:.6}", s.stddev),
                    _ => format!("{}", s.skipped),
                });
            }
            out.push_str(&format!("{label},{}\n", cells.join(",")));
        }
        out
    }
}
