//! Independent loop-based reference implementations and random instance
//! generators shared by the property suite and the acceptance harness.
#![allow(dead_code)]

use ovd_distill::bbox::BBox;
use ovd_distill::eval::{Detection, GroundTruth};
use ovd_distill::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Rows drawn from a Dirichlet-ish distribution: positive, summing to one.
pub fn random_distribution_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let w: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        for (c, x) in w.iter().enumerate() {
            t.set(r, c, x / s);
        }
    }
    t
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Similarity-weighted grounding, one token at a time.
pub fn grounding_s(tokens: &Tensor, regions: &Tensor) -> f64 {
    let mut total = 0.0;
    for t in 0..tokens.rows() {
        let sims: Vec<f64> = (0..regions.rows()).map(|j| dotp(tokens.row_slice(t), regions.row_slice(j))).collect();
        let z = lse(&sims);
        for s in &sims {
            total += (s - z).exp() * s;
        }
    }
    total / tokens.rows() as f64
}

/// Attention-weighted grounding as a triple loop over concepts, regions,
/// and feature dimensions.
pub fn grounding_a(concepts: &Tensor, regions: &Tensor, attention: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..concepts.rows() {
        for j in 0..regions.rows() {
            let mut d = 0.0;
            for k in 0..concepts.cols() {
                d += concepts.get(i, k) * regions.get(j, k);
            }
            total += attention.get(i, j) * d;
        }
    }
    total / concepts.rows() as f64
}

fn reduce(xs: &[f64], mean: bool) -> f64 {
    let s: f64 = xs.iter().sum();
    if mean {
        s / xs.len() as f64
    } else {
        s
    }
}

/// Image-to-text plus text-to-image cross-entropy on the diagonal.
pub fn contrastive(scores: &Tensor, mean: bool) -> f64 {
    let n = scores.rows();
    let mut i2t = Vec::new();
    let mut t2i = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|t| scores.get(i, t)).collect();
        let col: Vec<f64> = (0..n).map(|k| scores.get(k, i)).collect();
        i2t.push(lse(&row) - scores.get(i, i));
        t2i.push(lse(&col) - scores.get(i, i));
    }
    reduce(&i2t, mean) + reduce(&t2i, mean)
}

/// Distillation with the attention score as numerator; when
/// `attention_positive` the denominator's positive term also uses it.
pub fn distill(s: &Tensor, a: &[f64], attention_positive: bool, mean: bool) -> f64 {
    let n = s.rows();
    let cell = |i: usize, t: usize| if attention_positive && i == t { a[i] } else { s.get(i, t) };
    let mut i2t = Vec::new();
    let mut t2i = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|t| cell(i, t)).collect();
        let col: Vec<f64> = (0..n).map(|k| cell(k, i)).collect();
        i2t.push(-(a[i] - lse(&row)));
        t2i.push(-(a[i] - lse(&col)));
    }
    reduce(&i2t, mean) + reduce(&t2i, mean)
}

/// Hinge on the pairwise exclusive-attention margin, summed over ordered
/// concept pairs.
pub fn divergence(scores: &Tensor, blocks: &[Vec<usize>], alpha: f64, exponent: f64) -> f64 {
    let n = blocks.len();
    let mut starts = vec![0];
    for b in blocks {
        starts.push(starts.last().unwrap() + b.len());
    }
    let mut margin = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for col in starts[i]..starts[i + 1] {
                margin += scores.get(i, col) - scores.get(j, col);
            }
        }
    }
    (alpha - margin / (n as f64).powf(exponent)).max(0.0)
}

/// Top-`k` proposals per concept by rank counting: a proposal is kept when
/// fewer than `k` others beat it (higher similarity, or equal and earlier).
pub fn prefilter(concepts: &Tensor, proposals: &Tensor, k: usize) -> Vec<Vec<usize>> {
    (0..concepts.rows())
        .map(|c| {
            let sims: Vec<f64> = (0..proposals.rows()).map(|j| dotp(concepts.row_slice(c), proposals.row_slice(j))).collect();
            (0..sims.len())
                .filter(|&j| {
                    let better = (0..sims.len()).filter(|&o| sims[o] > sims[j] || (sims[o] == sims[j] && o < j)).count();
                    better < k
                })
                .collect()
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Per-class AP50 by brute force: of every ordering of the class's
/// predictions, keep the one whose confidences never increase, match
/// greedily, then sum the interpolated precision at each hit.
pub fn ap50_for_class(results: &[Vec<Detection>], truth: &[GroundTruth], class: &str) -> Option<f64> {
    let preds: Vec<(usize, Detection)> = results
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.label == class).map(move |d| (i, d.clone())))
        .collect();
    let n_gt: usize = truth.iter().map(|t| t.labels.iter().filter(|l| *l == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let order = permutations(preds.len())
        .into_iter()
        .find(|p| p.windows(2).all(|w| preds[w[0]].1.confidence >= preds[w[1]].1.confidence))
        .expect("a sorted ordering exists");
    let mut used: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.boxes.len()]).collect();
    let mut hits = Vec::new();
    for &p in &order {
        let (img, d) = &preds[p];
        let mut best: Option<(usize, f64)> = None;
        if let Some(t) = truth.get(*img) {
            for (j, (b, l)) in t.boxes.iter().zip(&t.labels).enumerate() {
                if l != class || used[*img][j] {
                    continue;
                }
                let iou = d.bbox.iou(b);
                if best.map_or(true, |(_, v)| iou > v) {
                    best = Some((j, iou));
                }
            }
        }
        match best {
            Some((j, iou)) if iou >= 0.5 => {
                used[*img][j] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    let precision: Vec<f64> = (0..hits.len()).map(|k| hits[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64).collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            ap += precision[k..].iter().cloned().fold(0.0, f64::max) / n_gt as f64;
        }
    }
    Some(ap)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0.0..20.0);
    let y = rng.gen_range(0.0..20.0);
    BBox::new(x, y, x + rng.gen_range(4.0..12.0), y + rng.gen_range(4.0..12.0))
}

/// A few images with at most four predictions in total, some of them
/// jittered copies of ground-truth boxes so that hits occur.
pub fn random_detection_instance(rng: &mut ChaCha8Rng, classes: &[&str]) -> (Vec<Vec<Detection>>, Vec<GroundTruth>) {
    let images = rng.gen_range(1..=2);
    let mut truth = Vec::new();
    for _ in 0..images {
        let n = rng.gen_range(0..=2);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
        let labels = (0..n).map(|_| classes[rng.gen_range(0..classes.len())].to_string()).collect();
        truth.push(GroundTruth { boxes, labels });
    }
    let mut results = vec![Vec::new(); images];
    let n_pred = rng.gen_range(1..=4);
    for _ in 0..n_pred {
        let img = rng.gen_range(0..images);
        let t: &GroundTruth = &truth[img];
        let (bbox, label) = if !t.boxes.is_empty() && rng.gen_bool(0.7) {
            let j = rng.gen_range(0..t.boxes.len());
            let b = t.boxes[j];
            let jx = rng.gen_range(-2.0..2.0);
            let jy = rng.gen_range(-2.0..2.0);
            let label = if rng.gen_bool(0.8) { t.labels[j].clone() } else { classes[rng.gen_range(0..classes.len())].to_string() };
            (BBox::new(b.x1 + jx, b.y1 + jy, b.x2 + jx, b.y2 + jy), label)
        } else {
            (random_box(rng), classes[rng.gen_range(0..classes.len())].to_string())
        };
        results[img].push(Detection { bbox, label, confidence: rng.gen_range(0.0..1.0) });
    }
    (results, truth)
}
