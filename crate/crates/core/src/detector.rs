//! The student: a toy open-vocabulary detector.
//!
//! A fixed filter-bank backbone produces per-pixel channels. Boxes are
//! described by grid-pooled channel means (read from integral images),
//! scored for objectness, and projected to unit-norm region features that
//! are classified by dot product against frozen class text embeddings.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::grammar::Vocabulary;
use crate::params::{glorot, ParamStore};
use crate::tensor::Tensor;
use crate::world::Image;

pub const BACKGROUND: &str = "background";
const CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub n_proposals: usize,
    pub embedding_dim: usize,
    /// Multiplier on cosine logits (the inverse of a softmax temperature).
    pub logit_scale: f64,
    pub anchor_stride: usize,
    pub anchor_sizes: Vec<f64>,
    pub pool_grid: usize,
    pub hidden_dim: usize,
    pub objectness_hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            n_proposals: 16,
            embedding_dim: 32,
            logit_scale: 1.0 / 0.07,
            anchor_stride: 6,
            anchor_sizes: vec![14.0, 19.0, 25.0],
            pool_grid: 4,
            hidden_dim: 64,
            objectness_hidden: 16,
        }
    }
}

impl DetectorConfig {
    pub fn raw_dim(&self) -> usize {
        self.pool_grid * self.pool_grid * CHANNELS + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_proposals == 0 || self.embedding_dim == 0 || self.pool_grid == 0 || self.anchor_stride == 0 {
            return Err(Error::config("detector sizes must be positive"));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| *s <= 0.0) {
            return Err(Error::config("anchor sizes must be positive"));
        }
        if self.logit_scale <= 0.0 {
            return Err(Error::config("logit scale must be positive"));
        }
        Ok(())
    }
}

/// Integral images of the fixed backbone channels.
///
/// Channels: foreground strength, foreground-masked RGB, and four oriented
/// gradient energies of the foreground map.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    /// `(h + 1) x (w + 1) x CHANNELS`
    integral: Vec<f64>,
}

impl FeatureMap {
    pub fn new(image: &Image) -> Self {
        let (w, h) = (image.width, image.height);
        let bg = border_median(image);
        let mut fg = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let d: f64 = (0..3).map(|c| (image.intensity(x, y, c) - bg[c]).abs()).sum();
                fg[y * w + x] = d.min(1.0);
            }
        }
        let at = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                0.0
            } else {
                fg[y as usize * w + x as usize]
            }
        };
        let mut chans = vec![0.0; w * h * CHANNELS];
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as isize, y as isize);
                let f = fg[y * w + x];
                let gx = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
                let gy = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
                let px = &mut chans[(y * w + x) * CHANNELS..(y * w + x + 1) * CHANNELS];
                px[0] = f;
                for c in 0..3 {
                    px[1 + c] = f * image.intensity(x, y, c);
                }
                px[4] = gx.abs();
                px[5] = gy.abs();
                px[6] = (gx + gy).abs() * std::f64::consts::FRAC_1_SQRT_2;
                px[7] = (gx - gy).abs() * std::f64::consts::FRAC_1_SQRT_2;
            }
        }
        let stride = (w + 1) * CHANNELS;
        let mut integral = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let v = chans[(y * w + x) * CHANNELS + c];
                    let up = integral[y * stride + (x + 1) * CHANNELS + c];
                    let left = integral[(y + 1) * stride + x * CHANNELS + c];
                    let diag = integral[y * stride + x * CHANNELS + c];
                    integral[(y + 1) * stride + (x + 1) * CHANNELS + c] = v + up + left - diag;
                }
            }
        }
        FeatureMap { width: w, height: h, integral }
    }

    /// Channel sums over pixel rectangle `[x0, x1) x [y0, y1)`.
    fn rect_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize, out: &mut [f64; CHANNELS]) {
        let stride = (self.width + 1) * CHANNELS;
        for (c, o) in out.iter_mut().enumerate() {
            let i = |x: usize, y: usize| self.integral[y * stride + x * CHANNELS + c];
            *o = i(x1, y1) - i(x0, y1) - i(x1, y0) + i(x0, y0);
        }
    }

    fn clamp_px(&self, v: f64, max: usize) -> usize {
        (v.round().max(0.0) as usize).min(max)
    }

    /// Raw descriptor of a box: grid-cell channel means, mean foreground
    /// in a surrounding band, and normalized box size.
    pub fn describe(&self, b: &BBox, grid: usize, out: &mut Vec<f64>) {
        let (w, h) = (self.width, self.height);
        let mut sums = [0.0; CHANNELS];
        for gy in 0..grid {
            for gx in 0..grid {
                let cx0 = b.x1 + b.width() * gx as f64 / grid as f64;
                let cx1 = b.x1 + b.width() * (gx + 1) as f64 / grid as f64;
                let cy0 = b.y1 + b.height() * gy as f64 / grid as f64;
                let cy1 = b.y1 + b.height() * (gy + 1) as f64 / grid as f64;
                let (x0, x1) = (self.clamp_px(cx0, w), self.clamp_px(cx1, w));
                let (y0, y1) = (self.clamp_px(cy0, h), self.clamp_px(cy1, h));
                let area = ((x1.saturating_sub(x0)) * (y1.saturating_sub(y0))) as f64;
                if area > 0.0 {
                    self.rect_sum(x0, y0, x1, y1, &mut sums);
                    out.extend(sums.iter().map(|s| s / area));
                } else {
                    out.extend([0.0; CHANNELS]);
                }
            }
        }
        let inner = b.clip(w as f64, h as f64);
        let outer = b.expand(1.5).clip(w as f64, h as f64);
        let rect = |r: &BBox| {
            (self.clamp_px(r.x1, w), self.clamp_px(r.y1, h), self.clamp_px(r.x2, w), self.clamp_px(r.y2, h))
        };
        let (ix0, iy0, ix1, iy1) = rect(&inner);
        let (ox0, oy0, ox1, oy1) = rect(&outer);
        let mut s_in = [0.0; CHANNELS];
        let mut s_out = [0.0; CHANNELS];
        if ix1 > ix0 && iy1 > iy0 {
            self.rect_sum(ix0, iy0, ix1, iy1, &mut s_in);
        }
        if ox1 > ox0 && oy1 > oy0 {
            self.rect_sum(ox0, oy0, ox1, oy1, &mut s_out);
        }
        let band_area = ((ox1 - ox0) * (oy1 - oy0)) as f64 - ((ix1.saturating_sub(ix0)) * (iy1.saturating_sub(iy0))) as f64;
        out.push(if band_area > 0.0 { (s_out[0] - s_in[0]) / band_area } else { 0.0 });
        out.push(b.width() / w as f64);
        out.push(b.height() / h as f64);
    }

    pub fn describe_all(&self, boxes: &[BBox], grid: usize) -> Tensor {
        let mut data = Vec::with_capacity(boxes.len() * (grid * grid * CHANNELS + 3));
        for b in boxes {
            self.describe(b, grid, &mut data);
        }
        let cols = grid * grid * CHANNELS + 3;
        Tensor::from_vec(boxes.len(), cols, data)
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

fn border_median(image: &Image) -> [f64; 3] {
    let (w, h) = (image.width, image.height);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut vals: Vec<u8> = Vec::with_capacity(2 * (w + h));
        for x in 0..w {
            vals.push(image.pixel(x, 0)[c]);
            vals.push(image.pixel(x, h - 1)[c]);
        }
        for y in 0..h {
            vals.push(image.pixel(0, y)[c]);
            vals.push(image.pixel(w - 1, y)[c]);
        }
        vals.sort_unstable();
        *o = vals[vals.len() / 2] as f64 / 255.0;
    }
    out
}

/// Square anchors on a regular grid, row-major by center then size.
pub fn anchor_grid(width: usize, height: usize, stride: usize, sizes: &[f64]) -> Vec<BBox> {
    let mut out = Vec::new();
    let offset = stride as f64 / 2.0;
    let ny = height / stride;
    let nx = width / stride;
    for iy in 0..ny.max(1) {
        for ix in 0..nx.max(1) {
            let cx = offset + (ix * stride) as f64;
            let cy = offset + (iy * stride) as f64;
            for &s in sizes {
                out.push(BBox::from_center(cx, cy, s, s));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposal {
    pub anchor_index: usize,
    pub anchor: BBox,
    /// Anchor refined by the regression head.
    pub bbox: BBox,
    pub feature: Vec<f64>,
    pub objectness: f64,
}

/// Frozen class text embeddings plus a learnable background vector.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub classes: Vec<String>,
    pub class_embeddings: Tensor,
    pub background: Tensor,
    pub logit_scale: f64,
}

impl ClassifierHead {
    pub fn new(classes: &[String], vocab: &Vocabulary, background: Tensor, logit_scale: f64) -> Result<Self> {
        let rows = classes
            .iter()
            .map(|c| vocab.id(c).map_err(|_| Error::UnknownConcept(c.clone())).and_then(|id| vocab.embedding(id)))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::config("classifier needs at least one class"));
        }
        Ok(ClassifierHead { classes: classes.to_vec(), class_embeddings: Tensor::from_rows(&rows), background, logit_scale })
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }
}

/// Argmax over `classes ∪ {background}` of scaled dot products; ties go to
/// the lexicographically smallest name. Returns the label and its softmax
/// probability.
pub fn classify_region(r: &[f64], head: &ClassifierHead, classes: &[String]) -> Result<(String, f64)> {
    if classes.is_empty() {
        return Err(Error::config("empty classification vocabulary"));
    }
    let mut scored: Vec<(String, f64)> = Vec::with_capacity(classes.len() + 1);
    for c in classes {
        let i = head.index_of(c).ok_or_else(|| Error::UnknownConcept(c.clone()))?;
        let s = crate::tensor::dot(r, head.class_embeddings.row_slice(i));
        scored.push((c.clone(), head.logit_scale * s));
    }
    let bg = unit(head.background.data());
    scored.push((BACKGROUND.to_string(), head.logit_scale * crate::tensor::dot(r, &bg)));
    let lse = crate::autograd::log_sum_exp(&scored.iter().map(|s| s.1).collect::<Vec<_>>());
    let best = scored
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .expect("non-empty");
    Ok((best.0.clone(), (best.1 - lse).exp()))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    crate::tensor::normalize(&mut v);
    v
}

/// Parameter names of the student.
pub mod names {
    pub const OBJ_W1: &str = "student.objectness.w1";
    pub const OBJ_B1: &str = "student.objectness.b1";
    pub const OBJ_W2: &str = "student.objectness.w2";
    pub const OBJ_B2: &str = "student.objectness.b2";
    pub const ROI_W1: &str = "student.region.w1";
    pub const ROI_B1: &str = "student.region.b1";
    pub const ROI_W2: &str = "student.region.w2";
    pub const ROI_B2: &str = "student.region.b2";
    pub const BOX_W: &str = "student.box.w";
    pub const BOX_B: &str = "student.box.b";
    pub const BACKGROUND: &str = "student.background";
}

/// The student detector's architecture; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Student {
    pub config: DetectorConfig,
    pub anchors: Vec<BBox>,
    pub image_size: (usize, usize),
}

/// Graph handles for one image's region-head outputs.
pub struct RegionOutputs {
    /// `n x d`, unit rows.
    pub features: Var,
    /// `n x 4` box deltas.
    pub deltas: Var,
}

impl Student {
    pub fn new(config: DetectorConfig, image_size: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let anchors = anchor_grid(image_size.1, image_size.0, config.anchor_stride, &config.anchor_sizes);
        Ok(Student { config, anchors, image_size })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        use names::*;
        let c = &self.config;
        let raw = c.raw_dim();
        store.insert(OBJ_W1, glorot(seed, OBJ_W1, raw, c.objectness_hidden));
        store.insert(OBJ_B1, Tensor::zeros(1, c.objectness_hidden));
        store.insert(OBJ_W2, glorot(seed, OBJ_W2, c.objectness_hidden, 1));
        store.insert(OBJ_B2, Tensor::scalar(-2.0));
        store.insert(ROI_W1, glorot(seed, ROI_W1, raw, c.hidden_dim));
        store.insert(ROI_B1, Tensor::zeros(1, c.hidden_dim));
        store.insert(ROI_W2, glorot(seed, ROI_W2, c.hidden_dim, c.embedding_dim));
        store.insert(ROI_B2, Tensor::zeros(1, c.embedding_dim));
        store.insert(BOX_W, glorot(seed, BOX_W, c.hidden_dim, 4).map(|x| 0.1 * x));
        store.insert(BOX_B, Tensor::zeros(1, 4));
        store.insert(BACKGROUND, glorot(seed, BACKGROUND, 1, c.embedding_dim));
    }

    /// Objectness logits (`n x 1`) for raw box descriptors.
    pub fn objectness_logits(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Var {
        use names::*;
        let w1 = g.param_by_name(store, OBJ_W1);
        let b1 = g.param_by_name(store, OBJ_B1);
        let w2 = g.param_by_name(store, OBJ_W2);
        let b2 = g.param_by_name(store, OBJ_B2);
        let h = g.linear(raw, w1, b1);
        let h = g.gelu(h);
        g.linear(h, w2, b2)
    }

    pub fn region_head(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> RegionOutputs {
        use names::*;
        let w1 = g.param_by_name(store, ROI_W1);
        let b1 = g.param_by_name(store, ROI_B1);
        let w2 = g.param_by_name(store, ROI_W2);
        let b2 = g.param_by_name(store, ROI_B2);
        let bw = g.param_by_name(store, BOX_W);
        let bb = g.param_by_name(store, BOX_B);
        let h = g.linear(raw, w1, b1);
        let h = g.gelu(h);
        let e = g.linear(h, w2, b2);
        let features = g.l2_normalize_rows(e);
        let deltas = g.linear(h, bw, bb);
        RegionOutputs { features, deltas }
    }

    /// Scaled logits `n x (|classes| + bg?)` of unit features against class
    /// embeddings; the background column, when requested, is last.
    pub fn class_logits(&self, g: &mut Graph, store: &ParamStore, features: Var, class_embeddings: &Tensor, with_background: bool) -> Var {
        let emb = g.constant(class_embeddings.clone());
        let table = if with_background {
            let bg = g.param_by_name(store, names::BACKGROUND);
            let bg = g.l2_normalize_rows(bg);
            g.concat_rows(&[emb, bg])
        } else {
            emb
        };
        let s = g.matmul_t(features, table);
        g.scale(s, self.config.logit_scale)
    }

    /// Objectness probabilities for every anchor, without a gradient tape.
    pub fn anchor_objectness(&self, fm: &FeatureMap, store: &ParamStore) -> Vec<f64> {
        let mut g = Graph::new();
        let raw = g.constant(fm.describe_all(&self.anchors, self.config.pool_grid));
        let logits = self.objectness_logits(&mut g, store, raw);
        g.value(logits).data().iter().map(|&x| sigmoid(x)).collect()
    }

    /// Indices of the `n` highest-objectness anchors (ties: lower index).
    pub fn top_anchors(&self, objectness: &[f64], n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..objectness.len()).collect();
        order.sort_by(|&a, &b| objectness[b].total_cmp(&objectness[a]).then(a.cmp(&b)));
        order.truncate(n);
        order
    }

    /// Exactly `n_proposals` proposals ranked by objectness.
    pub fn propose_regions(&self, image: &Image, store: &ParamStore, n_proposals: usize) -> Vec<RegionProposal> {
        let fm = FeatureMap::new(image);
        let obj = self.anchor_objectness(&fm, store);
        let mut idx = self.top_anchors(&obj, n_proposals);
        // Fewer anchors than requested: repeat the ranking cyclically.
        let base = idx.clone();
        while idx.len() < n_proposals && !base.is_empty() {
            idx.push(base[idx.len() % base.len()]);
        }
        let boxes: Vec<BBox> = idx.iter().map(|&i| self.anchors[i]).collect();
        let mut g = Graph::new();
        let raw = g.constant(fm.describe_all(&boxes, self.config.pool_grid));
        let out = self.region_head(&mut g, store, raw);
        let feats = g.value(out.features);
        let deltas = g.value(out.deltas);
        let (h, w) = self.image_size;
        idx.iter()
            .enumerate()
            .map(|(k, &a)| RegionProposal {
                anchor_index: a,
                anchor: self.anchors[a],
                bbox: self.anchors[a].apply_deltas(deltas.row_slice(k)).clip(w as f64, h as f64),
                feature: feats.row_slice(k).to_vec(),
                objectness: obj[a],
            })
            .collect()
    }

    /// The whole-image region `r_g`, through the same head as proposals.
    pub fn global_region(&self, g: &mut Graph, store: &ParamStore, fm: &FeatureMap) -> Var {
        let raw = g.constant(fm.describe_all(&[fm.full_box()], self.config.pool_grid));
        self.region_head(g, store, raw).features
    }
}

/// Components of the detection loss.
#[derive(Clone, Copy, Debug)]
pub struct DetLossParts {
    pub cls: Var,
    pub reg: Var,
    pub rpn: Var,
}

impl DetLossParts {
    pub fn total(&self, g: &mut Graph) -> Var {
        let a = g.add(self.cls, self.reg);
        g.add(a, self.rpn)
    }
}

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.3;

/// Assignment of one proposal against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Positive(usize),
    Background,
    Ignore,
}

pub fn assign(b: &BBox, gt: &[BBox]) -> Assignment {
    let best = gt.iter().enumerate().map(|(i, g)| (i, b.iou(g))).max_by(|a, b| a.1.total_cmp(&b.1));
    match best {
        Some((i, iou)) if iou >= POSITIVE_IOU => Assignment::Positive(i),
        Some((_, iou)) if iou >= NEGATIVE_IOU => Assignment::Ignore,
        _ => Assignment::Background,
    }
}

/// `L_cls + L_reg + L_rpn`.
///
/// * `obj_logits`: `A x 1` objectness logits for `anchors`.
/// * `class_logits`: `P x (V + 1)` with background last, for `proposal_boxes`.
/// * `deltas`: `P x 4` regression outputs relative to `proposal_boxes`.
/// * `gt_labels` index the first `V` logit columns.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    g: &mut Graph,
    anchors: &[BBox],
    obj_logits: Var,
    proposal_boxes: &[BBox],
    class_logits: Var,
    deltas: Var,
    gt_boxes: &[BBox],
    gt_labels: &[usize],
) -> DetLossParts {
    assert_eq!(gt_boxes.len(), gt_labels.len());
    let bg_col = g.shape(class_logits).1 - 1;

    // L_rpn: binary CE of objectness against the IoU >= 0.5 indicator.
    let targets: Vec<f64> = anchors
        .iter()
        .map(|a| if gt_boxes.iter().any(|b| a.iou(b) >= POSITIVE_IOU) { 1.0 } else { 0.0 })
        .collect();
    let t = g.constant(Tensor::from_vec(anchors.len(), 1, targets));
    let sp = g.softplus(obj_logits);
    let tx = g.mul(t, obj_logits);
    let bce = g.sub(sp, tx);
    let rpn = g.mean(bce);

    let mut cls_rows = Vec::new();
    let mut cls_targets = Vec::new();
    let mut pos_rows = Vec::new();
    let mut reg_targets = Vec::new();
    for (k, b) in proposal_boxes.iter().enumerate() {
        match assign(b, gt_boxes) {
            Assignment::Positive(i) => {
                cls_rows.push(k);
                cls_targets.push(gt_labels[i]);
                pos_rows.push(k);
                reg_targets.extend(b.deltas_to(&gt_boxes[i]));
            }
            Assignment::Background => {
                cls_rows.push(k);
                cls_targets.push(bg_col);
            }
            Assignment::Ignore => {}
        }
    }
    let cls = if cls_rows.is_empty() {
        g.scalar(0.0)
    } else {
        let rows = g.gather_rows(class_logits, &cls_rows);
        g.cross_entropy(rows, &cls_targets)
    };
    let reg = if pos_rows.is_empty() {
        g.scalar(0.0)
    } else {
        let d = g.gather_rows(deltas, &pos_rows);
        let target = g.constant(Tensor::from_vec(pos_rows.len(), 4, reg_targets));
        let diff = g.sub(d, target);
        let sl = g.smooth_l1(diff);
        let s = g.sum(sl);
        g.scale(s, 1.0 / pos_rows.len() as f64)
    };
    DetLossParts { cls, reg, rpn }
}

/// Mean over concepts of the cross-entropy of `f(r_g)` against each concept.
///
/// `logits` is the `1 x V` score row over `scoring_classes`.
pub fn image_pseudo_loss(g: &mut Graph, logits: Var, concepts: &[String], scoring_classes: &[String]) -> Result<Var> {
    if concepts.is_empty() {
        return Err(Error::degenerate("image pseudo-label loss needs at least one concept"));
    }
    let targets = concepts
        .iter()
        .map(|c| scoring_classes.iter().position(|s| s == c).ok_or_else(|| Error::UnknownConcept(c.clone())))
        .collect::<Result<Vec<_>>>()?;
    let rows = g.gather_rows(logits, &vec![0; targets.len()]);
    Ok(g.cross_entropy(rows, &targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, check_params};
    use crate::grammar::Grammar;
    use crate::world::{SceneObject, SceneSpec, World};

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tiny_iou_proposal_is_background() {
        let mut g = Graph::new();
        let anchors = [BBox::new(0.0, 0.0, 2.0, 2.0)];
        let obj = g.constant(Tensor::zeros(1, 1));
        let logits = g.input(Tensor::zeros(1, 3));
        let deltas = g.input(Tensor::zeros(1, 4));
        let parts = detection_loss(&mut g, &anchors, obj, &anchors, logits, deltas, &[BBox::new(1.0, 1.0, 3.0, 3.0)], &[0]);
        assert_eq!(assign(&anchors[0], &[BBox::new(1.0, 1.0, 3.0, 3.0)]), Assignment::Background);
        // background target under uniform logits over 3 outcomes
        assert!((g.scalar_value(parts.cls) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(g.scalar_value(parts.reg), 0.0);
    }

    #[test]
    fn perfect_predictions_have_near_zero_cls_and_reg() {
        let gt = [BBox::new(10.0, 10.0, 30.0, 30.0)];
        let props = [BBox::new(11.0, 9.0, 31.0, 29.0), BBox::new(40.0, 40.0, 60.0, 60.0)];
        let mut g = Graph::new();
        let obj = g.constant(Tensor::zeros(2, 1));
        let mut logits = Tensor::zeros(2, 3);
        logits.set(0, 1, 100.0);
        logits.set(1, 2, 100.0);
        let lv = g.constant(logits);
        let d = props[0].deltas_to(&gt[0]);
        let mut deltas = Tensor::zeros(2, 4);
        deltas.row_slice_mut(0).copy_from_slice(&d);
        let dv = g.constant(deltas);
        let parts = detection_loss(&mut g, &props, obj, &props, lv, dv, &gt, &[1]);
        assert!(g.scalar_value(parts.cls) < 1e-6);
        assert!(g.scalar_value(parts.reg) < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_v_plus_one() {
        let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let props = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 30.0, 40.0, 40.0)];
        let mut g = Graph::new();
        let obj = g.constant(Tensor::zeros(2, 1));
        let lv = g.constant(Tensor::zeros(2, 5));
        let dv = g.constant(Tensor::zeros(2, 4));
        let parts = detection_loss(&mut g, &props, obj, &props, lv, dv, &gt, &[3]);
        assert!((g.scalar_value(parts.cls) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_means_all_negative_rpn() {
        let anchors = [BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(2.0, 2.0, 8.0, 8.0)];
        let mut g = Graph::new();
        let obj = g.constant(Tensor::from_vec(2, 1, vec![0.3, -1.2]));
        let lv = g.constant(Tensor::zeros(2, 3));
        let dv = g.constant(Tensor::zeros(2, 4));
        let parts = detection_loss(&mut g, &anchors, obj, &anchors, lv, dv, &[], &[]);
        let expected = (crate::autograd::softplus(0.3) + crate::autograd::softplus(-1.2)) / 2.0;
        assert!((g.scalar_value(parts.rpn) - expected).abs() < 1e-12);
        assert_eq!(g.scalar_value(parts.reg), 0.0);
        // every proposal is background
        assert!((g.scalar_value(parts.cls) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn image_loss_analytics() {
        let classes = names(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]);
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(1, 10));
        let l = image_pseudo_loss(&mut g, uniform, &names(&["c"]), &classes).unwrap();
        assert!((g.scalar_value(l) - 10f64.ln()).abs() < 1e-12);
        assert!((10f64.ln() - 2.3026).abs() < 1e-4);

        let mut onehot = Tensor::zeros(1, 10);
        onehot.set(0, 2, 200.0);
        let oh = g.constant(onehot);
        let l = image_pseudo_loss(&mut g, oh, &names(&["c"]), &classes).unwrap();
        assert!(g.scalar_value(l) < 1e-12);

        let row = g.constant(Tensor::row(&[0.5, -0.2, 1.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.1]));
        let la = image_pseudo_loss(&mut g, row, &names(&["a"]), &classes).unwrap();
        let lb = image_pseudo_loss(&mut g, row, &names(&["f"]), &classes).unwrap();
        let lab = image_pseudo_loss(&mut g, row, &names(&["a", "f"]), &classes).unwrap();
        let (a, b) = (g.scalar_value(la), g.scalar_value(lb));
        assert!((g.scalar_value(lab) - (a + b) / 2.0).abs() < 1e-12);

        assert!(matches!(image_pseudo_loss(&mut g, row, &names(&["zebra"]), &classes), Err(Error::UnknownConcept(_))));
    }

    fn head() -> (ClassifierHead, Vocabulary) {
        let vocab = Grammar::default().vocabulary(5, 16).unwrap();
        let classes = names(&["circle", "square", "ring"]);
        // background orthogonal to the circle embedding
        let circle = vocab.embedding(vocab.id("circle").unwrap()).unwrap().to_vec();
        let mut bg = vocab.embedding(vocab.id("square").unwrap()).unwrap().to_vec();
        let proj = crate::tensor::dot(&bg, &circle);
        for (b, c) in bg.iter_mut().zip(&circle) {
            *b -= proj * c;
        }
        (ClassifierHead::new(&classes, &vocab, Tensor::row(&bg), 1.0 / 0.07).unwrap(), vocab)
    }

    #[test]
    fn classify_self_similarity_and_background() {
        let (h, vocab) = head();
        let circle = vocab.embedding(vocab.id("circle").unwrap()).unwrap().to_vec();
        assert_eq!(classify_region(&circle, &h, &h.classes).unwrap().0, "circle");
        let bg = unit(h.background.data());
        // make bg orthogonal to all classes for the second case
        let h2 = ClassifierHead { class_embeddings: Tensor::from_rows(&[vec![0.0; 16], vec![0.0; 16], vec![0.0; 16]]), ..h.clone() };
        assert_eq!(classify_region(&bg, &h2, &h2.classes).unwrap().0, BACKGROUND);
        assert!(matches!(classify_region(&circle, &h, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn classify_ties_break_lexicographically() {
        let (h, _) = head();
        let zero = vec![0.0; 16];
        // all logits equal: "background" sorts first
        assert_eq!(classify_region(&zero, &h, &h.classes).unwrap().0, BACKGROUND);
    }

    #[test]
    fn classify_is_scale_invariant() {
        let (h, vocab) = head();
        let mut r = vocab.embedding(vocab.id("ring").unwrap()).unwrap().to_vec();
        r[0] += 0.3;
        crate::tensor::normalize(&mut r);
        let base = classify_region(&r, &h, &h.classes).unwrap().0;
        for s in [0.01, 0.5, 3.0, 40.0] {
            let hs = ClassifierHead { logit_scale: s, ..h.clone() };
            assert_eq!(classify_region(&r, &hs, &hs.classes).unwrap().0, base);
        }
    }

    fn scene_image() -> Image {
        let w = World::default();
        let spec = SceneSpec {
            seed: 0,
            objects: vec![
                SceneObject { class_name: "square".into(), color: "red".into(), center: [20, 20], size: 16 },
                SceneObject { class_name: "ring".into(), color: "blue".into(), center: [44, 40], size: 20 },
            ],
            image_size: (64, 64),
            relations: vec![],
            planted_noise: None,
        };
        w.render_image(&spec)
    }

    #[test]
    fn proposals_are_ranked_and_sized() {
        let student = Student::new(DetectorConfig::default(), (64, 64)).unwrap();
        let mut store = ParamStore::new();
        student.init_params(&mut store, 1);
        let props = student.propose_regions(&scene_image(), &store, 16);
        assert_eq!(props.len(), 16);
        assert!(props.windows(2).all(|w| w[0].objectness >= w[1].objectness));
        for p in &props {
            assert_eq!(p.feature.len(), 32);
            let n: f64 = p.feature.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(student.propose_regions(&scene_image(), &store, 128).len(), 128);
    }

    #[test]
    fn uniform_image_still_yields_finite_proposals() {
        let student = Student::new(DetectorConfig::default(), (64, 64)).unwrap();
        let mut store = ParamStore::new();
        student.init_params(&mut store, 1);
        let blank = Image::filled(64, 64, [24, 24, 24]);
        let props = student.propose_regions(&blank, &store, 16);
        assert_eq!(props.len(), 16);
        assert!(props.iter().all(|p| p.objectness.is_finite() && p.feature.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn integral_pooling_matches_direct_mean() {
        let img = scene_image();
        let fm = FeatureMap::new(&img);
        let b = BBox::new(12.0, 12.0, 28.0, 28.0);
        let mut out = Vec::new();
        fm.describe(&b, 1, &mut out);
        let mut direct = 0.0;
        for y in 12..28 {
            for x in 12..28 {
                let d: f64 = (0..3).map(|c| (img.intensity(x, y, c) - 24.0 / 255.0).abs()).sum();
                direct += d.min(1.0);
            }
        }
        assert!((out[0] - direct / 256.0).abs() < 1e-12, "fg mean {}", out[0]);
        assert!(out[0] > 0.5);
        let empty = BBox::new(0.0, 50.0, 8.0, 58.0);
        out.clear();
        fm.describe(&empty, 1, &mut out);
        assert!(out[0].abs() < 1e-12);
    }

    #[test]
    fn detection_loss_gradients_match_finite_differences() {
        let student = Student::new(DetectorConfig { embedding_dim: 8, hidden_dim: 8, objectness_hidden: 4, pool_grid: 2, ..Default::default() }, (64, 64)).unwrap();
        let mut store = ParamStore::new();
        student.init_params(&mut store, 3);
        let fm = FeatureMap::new(&scene_image());
        let vocab = Grammar::default().vocabulary(2, 8).unwrap();
        let classes = names(&["circle", "square"]);
        let emb = ClassifierHead::new(&classes, &vocab, Tensor::zeros(1, 8), 5.0).unwrap().class_embeddings;
        let gt = [BBox::new(12.0, 12.0, 28.0, 28.0)];
        // one positive (IoU ~0.70) and one background proposal, away from thresholds
        let props = [BBox::new(13.0, 14.0, 29.0, 30.0), BBox::new(40.0, 2.0, 56.0, 18.0)];
        let anchors = [props[0], props[1], BBox::new(10.0, 10.0, 27.0, 27.0)];
        let raw_a = fm.describe_all(&anchors, 2);
        let raw_p = fm.describe_all(&props, 2);
        let loss = |g: &mut Graph, s: &ParamStore| {
            let ra = g.constant(raw_a.clone());
            let obj = student.objectness_logits(g, s, ra);
            let rp = g.constant(raw_p.clone());
            let out = student.region_head(g, s, rp);
            let logits = student.class_logits(g, s, out.features, &emb, true);
            let parts = detection_loss(g, &anchors, obj, &props, logits, out.deltas, &gt, &[1]);
            parts.total(g)
        };
        let ids: Vec<_> = store.ids().collect();
        let report = check_params(&store, &ids, 1e-4, loss).unwrap();
        assert!(report.checked > 100);
    }

    #[test]
    fn image_loss_gradient_wrt_global_feature() {
        let classes = names(&["a", "b", "c"]);
        let r = Tensor::row(&[0.3, -0.5, 0.8]);
        let emb = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        check_inputs(&[r], 1e-4, |g, v| {
            let n = g.l2_normalize_rows(v[0]);
            let e = g.constant(emb.clone());
            let s = g.matmul_t(n, e);
            let logits = g.scale(s, 5.0);
            image_pseudo_loss(g, logits, &names(&["a", "c"]), &classes).unwrap()
        })
        .unwrap();
    }
}
