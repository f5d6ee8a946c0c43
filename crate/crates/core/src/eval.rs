//! Detection AP50, masked-concept accuracy, attention diversity, and
//! plot-data tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::world::ClassSplit;

pub const MATCH_IOU: f64 = 0.5;
pub const NMS_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: String,
    pub confidence: f64,
}

/// Ground-truth boxes and labels of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub labels: Vec<String>,
}

/// Greedy per-class non-maximum suppression; output sorted by confidence.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.label != d.label || k.bbox.iou(&d.bbox) < iou) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// All-point interpolated AP from detections already sorted by descending
/// confidence, given their true-positive flags.
pub fn average_precision(tp: &[bool], n_gt: usize) -> (f64, PrCurve) {
    let mut curve = PrCurve::default();
    if n_gt == 0 {
        return (0.0, curve);
    }
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        curve.precision.push(hits as f64 / (k + 1) as f64);
        curve.recall.push(hits as f64 / n_gt as f64);
    }
    let mut envelope = curve.precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve.recall.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    (ap, curve)
}

/// True-positive flags for one class, in descending-confidence order.
/// Each prediction claims the unmatched ground truth it overlaps most.
fn match_class(results: &[Vec<Detection>], truth: &[GroundTruth], class: &str) -> (Vec<bool>, usize) {
    let mut preds: Vec<(usize, &Detection)> = results
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.label == class).map(move |d| (i, d)))
        .collect();
    preds.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let gts: Vec<Vec<BBox>> = truth
        .iter()
        .map(|t| t.boxes.iter().zip(&t.labels).filter(|(_, l)| *l == class).map(|(b, _)| *b).collect())
        .collect();
    let n_gt = gts.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(preds.len());
    for (img, d) in preds {
        let Some(candidates) = gts.get(img) else {
            tp.push(false);
            continue;
        };
        let best = candidates
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[img][*j])
            .map(|(j, g)| (j, d.bbox.iou(g)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, iou)) if iou >= MATCH_IOU => {
                used[img][j] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    (tp, n_gt)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<String, f64>,
    pub novel: f64,
    pub base: f64,
    pub all: f64,
    #[serde(skip)]
    pub curves: BTreeMap<String, PrCurve>,
}

/// Per-class AP at IoU 0.5, averaged within the base, novel, and combined
/// groups. Classes without ground truth are left out of the means; an
/// empty group scores 0.
pub fn compute_ap50(results: &[Vec<Detection>], truth: &[GroundTruth], split: &ClassSplit) -> ApReport {
    let mut report = ApReport::default();
    for class in split.all() {
        let (tp, n_gt) = match_class(results, truth, &class);
        if n_gt == 0 {
            continue;
        }
        let (ap, curve) = average_precision(&tp, n_gt);
        report.per_class.insert(class.clone(), ap);
        report.curves.insert(class, curve);
    }
    let mean = |pred: &dyn Fn(&str) -> bool| {
        let v: Vec<f64> = report.per_class.iter().filter(|(c, _)| pred(c)).map(|(_, a)| *a).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    report.novel = mean(&|c| split.is_novel(c));
    report.base = mean(&|c| split.is_base(c));
    report.all = mean(&|_| true);
    report
}

/// Fraction of correct masked-concept predictions.
pub fn mlm_accuracy(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::degenerate("no masked concepts to score"));
    }
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mean pairwise total variation between concept rows of one record.
pub fn record_diversity(scores: &Tensor) -> Option<f64> {
    let n = scores.rows();
    if n < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            sum += total_variation(scores.row_slice(i), scores.row_slice(j));
            pairs += 1;
        }
    }
    Some(sum / pairs as f64)
}

/// Corpus mean of [`record_diversity`] over records with two or more
/// concepts; 0 when there are none.
pub fn attention_diversity(records: &[Tensor]) -> f64 {
    let v: Vec<f64> = records.iter().filter_map(record_diversity).collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Precision and recall of noise flags against planted noise, plus the
/// scores a random flagger with the same flag rate would get.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseDetection {
    pub precision: f64,
    pub recall: f64,
    pub chance_precision: f64,
    pub chance_recall: f64,
    pub flagged: usize,
    pub planted: usize,
    pub concepts: usize,
}

pub fn noise_detection(flags: &[bool], planted: &[bool]) -> NoiseDetection {
    assert_eq!(flags.len(), planted.len());
    let n = flags.len();
    let flagged = flags.iter().filter(|&&f| f).count();
    let n_planted = planted.iter().filter(|&&p| p).count();
    let both = flags.iter().zip(planted).filter(|(f, p)| **f && **p).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    NoiseDetection {
        precision: ratio(both, flagged),
        recall: ratio(both, n_planted),
        chance_precision: ratio(n_planted, n),
        chance_recall: ratio(flagged, n),
        flagged,
        planted: n_planted,
        concepts: n,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50_novel: f64,
    pub ap50_base: f64,
    pub ap50_all: f64,
    pub mlm_accuracy: f64,
    pub attention_tv: f64,
    pub per_class: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseDetection>,
}

/// One attention row ready for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub caption_id: usize,
    pub concept: String,
    pub proposal: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub class: String,
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub seed: u64,
    pub novel: f64,
    pub base: f64,
    pub all: f64,
}

pub const ATTENTION_FILE: &str = "attention.csv";
pub const PR_FILE: &str = "pr_curves.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const REPORT_FILE: &str = "report.json";

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line: 0, message: format!("{other:?}") },
    }
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Writes the report and the attention, PR-curve, and ablation tables
/// into `dir`.
pub fn emit_plot_data(dir: &Path, report: &EvalReport, curves: &BTreeMap<String, PrCurve>, attention: &[AttentionRow], ablation: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(report).expect("report serializes"))?;
    write_csv(&dir.join(ATTENTION_FILE), &["caption_id", "concept", "proposal", "x1", "y1", "x2", "y2", "score"], attention)?;
    let pr: Vec<PrPoint> = curves
        .iter()
        .flat_map(|(c, curve)| {
            curve.precision.iter().zip(&curve.recall).enumerate().map(move |(k, (p, r))| PrPoint {
                class: c.clone(),
                rank: k + 1,
                precision: *p,
                recall: *r,
            })
        })
        .collect();
    write_csv(&dir.join(PR_FILE), &["class", "rank", "precision", "recall"], &pr)?;
    write_csv(&dir.join(ABLATION_FILE), &["row", "seed", "novel", "base", "all"], ablation)?;
    Ok(())
}
