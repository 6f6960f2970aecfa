//! Quantitative measures over predictions plus report assembly.
//!
//! Image-level: pixel MSE and a feature-cosine similarity score computed
//! with a frozen prompt encoder standing in for a large pretrained image
//! encoder. Map-level: edge precision/recall/F1, segmentation scores
//! (pixel accuracy, mean accuracy, mean IoU), depth delta-1, and angular
//! error statistics for unit-normal fields, all with fixed conventions for
//! degenerate denominators. [`export_judge_bundle`] writes the composite
//! image, scoring prompt, and score stub for optional external judging.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::OpCategory;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::prompt::PromptEncoder;
use crate::scalar::Scalar;

/// Binarization threshold used when reading edge maps from gray values.
pub const EDGE_THRESHOLD: f64 = 0.5;

/// Default depth agreement threshold.
pub const DEPTH_DELTA: f64 = 1.25;

/// Angular accuracy thresholds in degrees.
pub const NORMAL_THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over every channel of every pixel.
pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let n = pred.data.len();
    let mut acc = 0.0f64;
    for (p, g) in pred.data.iter().zip(&gt.data) {
        let d = (*p as f64) - (*g as f64);
        acc += d * d;
    }
    Ok(acc / n as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm feature vector in similarity".into()));
    }
    Ok(dot / (na * nb))
}

/// Cosine similarity of mean-pooled frozen-encoder features.
pub fn clip_i<F: Scalar>(pred: &Image, gt: &Image, encoder: &PromptEncoder<F>) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let fa = encoder.features(pred)?;
    let fb = encoder.features(gt)?;
    cosine(&fa, &fb)
}

/// Threshold a gray map into {0,1} at [`EDGE_THRESHOLD`] (>= is positive).
pub fn binarize_map(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v >= EDGE_THRESHOLD)).collect()
}

/// Exact pixel-match edge scores. Degenerate conventions: with no
/// predicted positives, precision is 1 when the ground truth is also
/// empty and 0 otherwise; recall mirrors this for empty ground truth;
/// F1 is 0 whenever P + R is 0.
pub fn edge_prf(pred: &[u8], gt: &[u8]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("edge maps differ in length: {} vs {}", pred.len(), gt.len())));
    }
    for &v in pred.iter().chain(gt) {
        if v > 1 {
            return Err(Error::Shape(format!("edge map entry {v} is not binary")));
        }
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fne += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 {
        if tp + fne == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fne == 0 {
        if tp + fp == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fne) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

/// Confusion-matrix segmentation scores: pixel accuracy, mean per-class
/// recall over classes present in the ground truth, and mean IoU over
/// classes present in either map.
pub fn seg_scores(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("label maps differ in length: {} vs {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("label maps are empty".into()));
    }
    let mut confusion = vec![0usize; n_classes * n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::Shape(format!(
                "label out of range: pred {p}, gt {g}, n_classes {n_classes}"
            )));
        }
        confusion[g * n_classes + p] += 1;
    }
    let total = pred.len() as f64;
    let mut trace = 0usize;
    let mut acc_sum = 0.0;
    let mut acc_count = 0usize;
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    for c in 0..n_classes {
        let tp = confusion[c * n_classes + c];
        trace += tp;
        let gt_row: usize = (0..n_classes).map(|j| confusion[c * n_classes + j]).sum();
        let pred_col: usize = (0..n_classes).map(|i| confusion[i * n_classes + c]).sum();
        if gt_row > 0 {
            acc_sum += tp as f64 / gt_row as f64;
            acc_count += 1;
        }
        let union = gt_row + pred_col - tp;
        if union > 0 {
            iou_sum += tp as f64 / union as f64;
            iou_count += 1;
        }
    }
    let mean_acc = if acc_count == 0 { 0.0 } else { acc_sum / acc_count as f64 };
    let mean_iou = if iou_count == 0 { 0.0 } else { iou_sum / iou_count as f64 };
    Ok((trace as f64 / total, mean_acc, mean_iou))
}

/// Fraction of pixels whose depth ratio max(p/g, g/p) is strictly below
/// the threshold.
pub fn depth_delta1(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("depth maps differ in length: {} vs {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("depth maps are empty".into()));
    }
    let mut hits = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p <= 0.0 || g <= 0.0 || !p.is_finite() || !g.is_finite() {
            return Err(Error::Numeric(format!("nonpositive depth value: pred {p}, gt {g}")));
        }
        if (p / g).max(g / p) < threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalStats {
    pub mean_deg: f64,
    pub median_deg: f64,
    /// Fractions of pixels with angular error strictly below 11.25, 22.5,
    /// and 30 degrees.
    pub acc: [f64; 3],
}

fn renormalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numeric("zero-length normal vector".into()));
    }
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::Numeric(format!("normal vector norm {norm} is not within 1e-3 of 1")));
    }
    Ok([v[0] / norm, v[1] / norm, v[2] / norm])
}

/// Angular error statistics between two unit-vector fields (xyz triples).
/// Even-length medians take the midpoint of the two central values.
pub fn normal_angular(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<NormalStats> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("normal fields differ in length: {} vs {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("normal fields are empty".into()));
    }
    let mut angles = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let p = renormalize(p)?;
        let g = renormalize(g)?;
        let dot = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).clamp(-1.0, 1.0);
        angles.push(dot.acos().to_degrees());
    }
    let mean = angles.iter().sum::<f64>() / angles.len() as f64;
    let mut sorted = angles.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mut acc = [0.0; 3];
    for (i, th) in NORMAL_THRESHOLDS.iter().enumerate() {
        acc[i] = angles.iter().filter(|&&a| a < *th).count() as f64 / n as f64;
    }
    Ok(NormalStats { mean_deg: mean, median_deg: median, acc })
}

/// Map RGB pixels onto palette indices by nearest color (squared
/// distance); ties resolve to the lowest palette index.
pub fn labels_from_rgb(img: &Image, palette: &[[f32; 3]]) -> Vec<usize> {
    assert!(!palette.is_empty(), "palette is empty");
    let mut out = Vec::with_capacity(img.width * img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, c) in palette.iter().enumerate() {
                let d: f64 = (0..3).map(|k| ((p[k] - c[k]) as f64).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            out.push(best);
        }
    }
    out
}

// ---- aggregation and reports ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (n-1 denominator; 0 for singletons).
pub fn mean_std(values: &[f64]) -> Stat {
    assert!(!values.is_empty(), "cannot aggregate zero values");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stat { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricColumn {
    pub name: String,
    pub higher_is_better: bool,
}

impl MetricColumn {
    pub fn new(name: &str, higher_is_better: bool) -> Self {
        MetricColumn { name: name.into(), higher_is_better }
    }

    pub fn marker(&self) -> char {
        if self.higher_is_better {
            '\u{2191}'
        } else {
            '\u{2193}'
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub task_id: usize,
    pub task: String,
    pub category: OpCategory,
    pub query_index: usize,
    /// One value per report column, in column order.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub key: String,
    pub count: usize,
    pub stats: Vec<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub columns: Vec<MetricColumn>,
    pub per_instance: Vec<InstanceEntry>,
    pub per_task: Vec<GroupRow>,
    pub per_category: Vec<GroupRow>,
    pub overall: GroupRow,
}

fn aggregate_group(key: String, entries: &[&InstanceEntry], n_cols: usize) -> GroupRow {
    let stats = (0..n_cols)
        .map(|c| mean_std(&entries.iter().map(|e| e.values[c]).collect::<Vec<f64>>()))
        .collect();
    GroupRow { key, count: entries.len(), stats }
}

impl MetricReport {
    /// Aggregate per-instance values into task, category, and overall rows.
    /// Tasks appear in first-seen order; categories in fixed registry
    /// order, skipping empty ones.
    pub fn build(split: &str, columns: Vec<MetricColumn>, per_instance: Vec<InstanceEntry>) -> Result<Self> {
        if per_instance.is_empty() {
            return Err(Error::Config(format!("no instances to report for split '{split}'")));
        }
        let n_cols = columns.len();
        for e in &per_instance {
            if e.values.len() != n_cols {
                return Err(Error::Shape(format!(
                    "instance for task '{}' has {} values, report has {} columns",
                    e.task,
                    e.values.len(),
                    n_cols
                )));
            }
        }
        let mut task_order: Vec<usize> = Vec::new();
        for e in &per_instance {
            if !task_order.contains(&e.task_id) {
                task_order.push(e.task_id);
            }
        }
        let per_task = task_order
            .iter()
            .map(|&tid| {
                let entries: Vec<&InstanceEntry> =
                    per_instance.iter().filter(|e| e.task_id == tid).collect();
                let name = entries[0].task.clone();
                aggregate_group(name, &entries, n_cols)
            })
            .collect();
        let per_category = OpCategory::all()
            .iter()
            .filter_map(|&cat| {
                let entries: Vec<&InstanceEntry> =
                    per_instance.iter().filter(|e| e.category == cat).collect();
                if entries.is_empty() {
                    None
                } else {
                    Some(aggregate_group(cat.to_string(), &entries, n_cols))
                }
            })
            .collect();
        let all: Vec<&InstanceEntry> = per_instance.iter().collect();
        let overall = aggregate_group("overall".into(), &all, n_cols);
        Ok(MetricReport { split: split.into(), columns, per_instance, per_task, per_category, overall })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text table: one row per task, per category, and
    /// overall; one column per metric with a direction marker.
    pub fn render_text(&self) -> String {
        let label_width = self
            .per_task
            .iter()
            .chain(&self.per_category)
            .map(|r| r.key.len() + 9)
            .chain([self.split.len() + 7, "overall".len()])
            .max()
            .unwrap_or(8)
            .max(8);
        let cell = |s: &Stat| format!("{:.6} \u{00b1} {:.6}", s.mean, s.std);
        let col_width = cell(&Stat { mean: 0.0, std: 0.0 }).len().max(
            self.columns.iter().map(|c| c.name.len() + 2).max().unwrap_or(0),
        );
        let mut out = String::new();
        out.push_str(&format!("split: {}\n", self.split));
        out.push_str(&format!("{:label_width$}", ""));
        for c in &self.columns {
            out.push_str(&format!("  {:>col_width$}", format!("{} {}", c.name, c.marker())));
        }
        out.push('\n');
        let mut row = |label: &str, g: &GroupRow| {
            let mut line = format!("{label:label_width$}");
            for s in &g.stats {
                line.push_str(&format!("  {:>col_width$}", cell(s)));
            }
            line.push('\n');
            out.push_str(&line);
        };
        for g in &self.per_task {
            row(&format!("task     {}", g.key), g);
        }
        for g in &self.per_category {
            row(&format!("category {}", g.key), g);
        }
        row("overall", &self.overall);
        out
    }
}

// ---- judge bundle export ----

/// Verbatim scoring prompt for the two-column composite protocol.
pub const JUDGE_PROMPT: &str = "\
You are given a composite image with two columns.

The left column contains three images arranged vertically:
Left Column: A (original image), A1 (edited version of A), B (another original image).

The right column contains two images: B1 and B2, which are two independently edited versions of image B.

Your task is to independently score B1 and B2 based on two dimensions:

1. Edit Consistency (1-5):
How visually consistent is the edited image (B1 or B2) with the original image B?
Focus: Are key objects, colors, and structures consistent with the source?

2. Edit Accuracy (1-5):
Assess how accurately the editing operation applied to B (to produce B1 or B2) mirrors the transformation seen from A -> A1.
Focus: Did the editor apply similar changes, in the correct location, with the same degree of modification?

Avoid giving tied scores unless B1 and B2 are truly indistinguishable.
Ensure scores reflect nuanced differences in both consistency and accuracy between B1 and B2.
Be critical. Reserve scores of 4-5 for highly consistent/accurate edits. Be objective and concise in your assessment.

Return your answer in the following JSON format:
{ \"B1\": {\"consistency\":<1-5>, \"accuracy\":<1-5>}, \"B2\": {\"consistency\":<1-5>, \"accuracy\":<1-5>} }
";

/// Empty score sheet accompanying each bundle, to be filled externally.
pub const JUDGE_SCORE_STUB: &str = "\
{
  \"B1\": { \"consistency\": null, \"accuracy\": null },
  \"B2\": { \"consistency\": null, \"accuracy\": null }
}
";

/// Write the judging artifacts for one comparison: a 2-column, 3-row
/// composite (left: exemplar source A, exemplar target A1, query source B;
/// right: the two candidate edits B1, B2 over a black filler tile), the
/// scoring prompt, and a JSON score stub. Deterministic byte-for-byte.
pub fn export_judge_bundle(
    prm: &Image,
    reference: &Image,
    src: &Image,
    pred1: &Image,
    pred2: &Image,
    out_dir: &Path,
) -> Result<()> {
    for (img, what) in [(reference, "exemplar target"), (src, "query source"), (pred1, "first prediction"), (pred2, "second prediction")] {
        if img.width != prm.width || img.height != prm.height {
            return Err(Error::Shape(format!(
                "{what} is {}x{}, expected {}x{} to tile the composite",
                img.width, img.height, prm.width, prm.height
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (tw, th) = (prm.width, prm.height);
    let mut composite = Image::new(2 * tw, 3 * th);
    let black = Image::new(tw, th);
    let tiles: [(&Image, usize, usize); 6] = [
        (prm, 0, 0),
        (reference, 0, 1),
        (src, 0, 2),
        (pred1, 1, 0),
        (pred2, 1, 1),
        (&black, 1, 2),
    ];
    for (img, col, row) in tiles {
        for y in 0..th {
            for x in 0..tw {
                composite.set_pixel(col * tw + x, row * th + y, img.pixel(x, y));
            }
        }
    }
    composite.write_ppm(&out_dir.join("composite.ppm"))?;
    let prompt_path = out_dir.join("judge_prompt.txt");
    fs::write(&prompt_path, JUDGE_PROMPT).map_err(|e| Error::io(&prompt_path, e))?;
    let scores_path = out_dir.join("scores.json");
    fs::write(&scores_path, JUDGE_SCORE_STUB).map_err(|e| Error::io(&scores_path, e))?;
    Ok(())
}
