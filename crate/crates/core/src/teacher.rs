//! The teacher: a fusion transformer over masked caption tokens and
//! pre-filtered region tokens, trained with masked concept prediction and
//! an object divergence constraint on its attention.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::grammar::{embed_tokens, MaskedView, Vocabulary};
use crate::params::{glorot, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub divergence_alpha: f64,
    /// Layer whose attention is recorded; `None` means the last.
    pub divergence_layer: Option<usize>,
    /// Proposals kept per concept by the pre-filter.
    pub top_k: usize,
    /// The margin is divided by `|C|^normalizer_exponent`.
    pub normalizer_exponent: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            layers: 2,
            heads: 4,
            model_dim: 32,
            feedforward_dim: 64,
            divergence_alpha: 0.5,
            divergence_layer: None,
            top_k: 4,
            normalizer_exponent: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.feedforward_dim == 0 {
            return Err(Error::config("fusion sizes must be positive"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads)));
        }
        if self.divergence_alpha <= 0.0 {
            return Err(Error::config("divergence_alpha must be positive"));
        }
        if let Some(l) = self.divergence_layer {
            if l >= self.layers {
                return Err(Error::config(format!("divergence_layer {l} out of range")));
            }
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be positive"));
        }
        Ok(())
    }

    pub fn record_layer(&self) -> usize {
        self.divergence_layer.unwrap_or(self.layers - 1)
    }
}

/// Per-concept proposal subsets and their concatenation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredProposals {
    /// Proposal indices kept for each concept, ascending.
    pub per_concept: Vec<Vec<usize>>,
    /// Concatenation of `per_concept` in concept order, duplicates kept.
    pub union_order: Vec<usize>,
}

impl FilteredProposals {
    /// Column range of concept `i`'s block inside `union_order`.
    pub fn block(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.per_concept[..i].iter().map(Vec::len).sum();
        start..start + self.per_concept[i].len()
    }

    pub fn num_concepts(&self) -> usize {
        self.per_concept.len()
    }

    /// Keeps only the listed concepts, preserving block order.
    pub fn select(&self, keep: &[usize]) -> FilteredProposals {
        let per_concept: Vec<Vec<usize>> = keep.iter().map(|&i| self.per_concept[i].clone()).collect();
        let union_order = per_concept.iter().flatten().copied().collect();
        FilteredProposals { per_concept, union_order }
    }
}

/// For each concept the `k` proposals with the largest dot product (ties
/// favour the lower index), listed in proposal order.
pub fn prefilter_proposals(concepts: &[&[f64]], proposals: &Tensor, k: usize) -> Result<FilteredProposals> {
    if k == 0 {
        return Err(Error::config("K must be positive"));
    }
    if proposals.rows() == 0 {
        return Err(Error::degenerate("no proposals to filter"));
    }
    let mut per_concept = Vec::with_capacity(concepts.len());
    for c in concepts {
        let sims: Vec<f64> = (0..proposals.rows()).map(|j| dot(c, proposals.row_slice(j))).collect();
        if sims.iter().any(|s| s.is_nan()) {
            return Err(Error::degenerate("non-finite proposal similarity"));
        }
        let mut order: Vec<usize> = (0..sims.len()).collect();
        // partial_cmp so that -0.0 and 0.0 tie
        order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
        per_concept.push(order);
    }
    let union_order = per_concept.iter().flatten().copied().collect();
    Ok(FilteredProposals { per_concept, union_order })
}

/// Head-averaged attention of each masked concept over the region tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// Row `i` belongs to the view masking concept `i`; columns follow
    /// `FilteredProposals::union_order`.
    pub scores: Tensor,
    pub layer: usize,
    pub head_averaged: bool,
}

pub struct FusionOutput {
    /// `views x V` logits at each view's mask position.
    pub mask_logits: Var,
    /// `views x |P|`, rows sum to one.
    pub attention: Var,
    pub layer: usize,
}

impl FusionOutput {
    pub fn record(&self, g: &Graph) -> AttentionRecord {
        AttentionRecord { scores: g.value(self.attention).clone(), layer: self.layer, head_averaged: true }
    }
}

pub mod names {
    pub const PREFIX: &str = "teacher.";
    pub const REGION_W: &str = "teacher.region.w";
    pub const REGION_B: &str = "teacher.region.b";
    pub const BOX_W: &str = "teacher.box.w";
    pub const TYPE_TEXT: &str = "teacher.type.text";
    pub const TYPE_REGION: &str = "teacher.type.region";
    pub const FINAL_GAIN: &str = "teacher.final.gain";
    pub const FINAL_BIAS: &str = "teacher.final.bias";
    pub const MLM_W: &str = "teacher.mlm.w";
    pub const MLM_B: &str = "teacher.mlm.b";

    pub fn layer(l: usize, what: &str) -> String {
        format!("teacher.layer{l}.{what}")
    }
}

/// Sinusoidal position code, scaled down so it does not swamp unit-norm
/// word embeddings.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    let scale = 1.0 / (dim as f64).sqrt();
    for p in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 * freq;
            t.set(p, i, scale * if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: FusionConfig,
    pub vocab_size: usize,
    pub image_size: (usize, usize),
}

impl Teacher {
    pub fn new(config: FusionConfig, vocab_size: usize, image_size: (usize, usize)) -> Result<Self> {
        config.validate()?;
        Ok(Teacher { config, vocab_size, image_size })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        use names::*;
        let d = self.config.model_dim;
        let ff = self.config.feedforward_dim;
        store.insert(REGION_W, glorot(seed, REGION_W, d, d));
        store.insert(REGION_B, Tensor::zeros(1, d));
        store.insert(BOX_W, glorot(seed, BOX_W, 4, d));
        store.insert(TYPE_TEXT, glorot(seed, TYPE_TEXT, 1, d).map(|x| 0.1 * x));
        store.insert(TYPE_REGION, glorot(seed, TYPE_REGION, 1, d).map(|x| 0.1 * x));
        for l in 0..self.config.layers {
            for ln in ["ln1", "ln2"] {
                store.insert(layer(l, &format!("{ln}.gain")), Tensor::filled(1, d, 1.0));
                store.insert(layer(l, &format!("{ln}.bias")), Tensor::zeros(1, d));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                let name = layer(l, w);
                let init = glorot(seed, &name, d, d);
                store.insert(name, init);
            }
            store.insert(layer(l, "bo"), Tensor::zeros(1, d));
            let (w1, w2) = (layer(l, "ff.w1"), layer(l, "ff.w2"));
            let i1 = glorot(seed, &w1, d, ff);
            let i2 = glorot(seed, &w2, ff, d);
            store.insert(w1, i1);
            store.insert(layer(l, "ff.b1"), Tensor::zeros(1, ff));
            store.insert(w2, i2);
            store.insert(layer(l, "ff.b2"), Tensor::zeros(1, d));
        }
        store.insert(FINAL_GAIN, Tensor::filled(1, d, 1.0));
        store.insert(FINAL_BIAS, Tensor::zeros(1, d));
        store.insert(MLM_W, glorot(seed, MLM_W, d, self.vocab_size));
        store.insert(MLM_B, Tensor::zeros(1, self.vocab_size));
    }

    fn norm(&self, g: &mut Graph, store: &ParamStore, x: Var, gain: &str, bias: &str) -> Var {
        let n = g.layer_norm_rows(x, 1e-5);
        let gv = g.param_by_name(store, gain);
        let bv = g.param_by_name(store, bias);
        let s = g.mul_row(n, gv);
        g.add_row(s, bv)
    }

    /// Runs every masked view of one caption jointly with the region tokens.
    ///
    /// `regions` are the `|P| x d` features in `union_order`, `boxes` their
    /// pixel boxes. The caller decides whether `regions` carries gradient.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        views: &[MaskedView],
        regions: Var,
        boxes: &[BBox],
    ) -> Result<FusionOutput> {
        use names::*;
        let d = self.config.model_dim;
        let (n_regions, rd) = g.shape(regions);
        if rd != d || vocab.embedding_dim() != d {
            return Err(Error::config(format!(
                "dimension mismatch: regions {rd}, words {}, model {d}",
                vocab.embedding_dim()
            )));
        }
        if boxes.len() != n_regions {
            return Err(Error::config("one box per region token required"));
        }
        if views.is_empty() || n_regions == 0 {
            return Err(Error::degenerate("fusion needs at least one view and one region"));
        }
        let text_len = views[0].token_ids.len();
        if views.iter().any(|v| v.token_ids.len() != text_len) {
            return Err(Error::config("views of one caption must share a length"));
        }
        let seq = text_len + n_regions;
        let heads = self.config.heads;
        let dh = d / heads;

        let pos = sinusoidal_positions(text_len, d);
        let mut text_rows = Vec::with_capacity(views.len() * text_len * d);
        for v in views {
            let e = embed_tokens(&v.token_ids, vocab)?;
            text_rows.extend(e.zip_map(&pos, |a, b| a + b).into_data());
        }
        let text = g.constant(Tensor::from_vec(views.len() * text_len, d, text_rows));
        let tt = g.param_by_name(store, TYPE_TEXT);
        let text = g.add_row(text, tt);

        let (h, w) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let box_data: Vec<f64> = boxes.iter().flat_map(|b| [b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h]).collect();
        let box_in = g.constant(Tensor::from_vec(n_regions, 4, box_data));
        let rw = g.param_by_name(store, REGION_W);
        let rb = g.param_by_name(store, REGION_B);
        let bw = g.param_by_name(store, BOX_W);
        let tr = g.param_by_name(store, TYPE_REGION);
        let r = g.linear(regions, rw, rb);
        let bx = g.matmul(box_in, bw);
        let r = g.add(r, bx);
        let region_tokens = g.add_row(r, tr);

        let mut blocks = Vec::with_capacity(2 * views.len());
        for v in 0..views.len() {
            let rows: Vec<usize> = (v * text_len..(v + 1) * text_len).collect();
            blocks.push(g.gather_rows(text, &rows));
            blocks.push(region_tokens);
        }
        let mut x = g.concat_rows(&blocks);

        let record_layer = self.config.record_layer();
        let mut attention = None;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.config.layers {
            let hn = self.norm(g, store, x, &layer(l, "ln1.gain"), &layer(l, "ln1.bias"));
            let wq = g.param_by_name(store, &layer(l, "wq"));
            let wk = g.param_by_name(store, &layer(l, "wk"));
            let wv = g.param_by_name(store, &layer(l, "wv"));
            let q_all = g.matmul(hn, wq);
            let k_all = g.matmul(hn, wk);
            let v_all = g.matmul(hn, wv);
            let mut view_outs = Vec::with_capacity(views.len());
            let mut mask_rows = Vec::new();
            for (vi, view) in views.iter().enumerate() {
                let rows: Vec<usize> = (vi * seq..(vi + 1) * seq).collect();
                let q = g.gather_rows(q_all, &rows);
                let k = g.gather_rows(k_all, &rows);
                let v = g.gather_rows(v_all, &rows);
                let mut head_outs = Vec::with_capacity(heads);
                let mut head_mask = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let qh = g.slice_cols(q, hd * dh, dh);
                    let kh = g.slice_cols(k, hd * dh, dh);
                    let vh = g.slice_cols(v, hd * dh, dh);
                    let s = g.matmul_t(qh, kh);
                    let s = g.scale(s, scale);
                    let p = g.softmax_rows(s);
                    if l == record_layer {
                        head_mask.push(g.row(p, view.masked_position));
                    }
                    head_outs.push(g.matmul(p, vh));
                }
                if l == record_layer {
                    let mut acc = head_mask[0];
                    for &m in &head_mask[1..] {
                        acc = g.add(acc, m);
                    }
                    let avg = g.scale(acc, 1.0 / heads as f64);
                    mask_rows.push(g.slice_cols(avg, text_len, n_regions));
                }
                view_outs.push(g.concat_cols(&head_outs));
            }
            if l == record_layer {
                let stacked = g.concat_rows(&mask_rows);
                attention = Some(g.sum_normalize_rows(stacked));
            }
            let att = g.concat_rows(&view_outs);
            let wo = g.param_by_name(store, &layer(l, "wo"));
            let bo = g.param_by_name(store, &layer(l, "bo"));
            let o = g.linear(att, wo, bo);
            x = g.add(x, o);

            let hn = self.norm(g, store, x, &layer(l, "ln2.gain"), &layer(l, "ln2.bias"));
            let w1 = g.param_by_name(store, &layer(l, "ff.w1"));
            let b1 = g.param_by_name(store, &layer(l, "ff.b1"));
            let w2 = g.param_by_name(store, &layer(l, "ff.w2"));
            let b2 = g.param_by_name(store, &layer(l, "ff.b2"));
            let f = g.linear(hn, w1, b1);
            let f = g.gelu(f);
            let f = g.linear(f, w2, b2);
            x = g.add(x, f);
        }

        let mask_idx: Vec<usize> = views.iter().enumerate().map(|(vi, v)| vi * seq + v.masked_position).collect();
        let m = g.gather_rows(x, &mask_idx);
        let m = self.norm(g, store, m, FINAL_GAIN, FINAL_BIAS);
        let mw = g.param_by_name(store, MLM_W);
        let mb = g.param_by_name(store, MLM_B);
        let mask_logits = g.linear(m, mw, mb);
        Ok(FusionOutput { mask_logits, attention: attention.expect("record layer in range"), layer: record_layer })
    }
}

/// Mean cross-entropy of the mask logits against the concept word ids.
pub fn mlm_loss(g: &mut Graph, mask_logits: Var, targets: &[usize]) -> Var {
    g.cross_entropy(mask_logits, targets)
}

/// Indicator of concept `i`'s column block, as a `1 x |P|` row.
fn block_indicator(filtered: &FilteredProposals, i: usize) -> Tensor {
    let mut t = Tensor::zeros(1, filtered.union_order.len());
    for k in filtered.block(i) {
        t.set(0, k, 1.0);
    }
    t
}

/// `[alpha - margin / |C|^e]_+` where margin sums, over ordered concept
/// pairs `(i, j)`, the attention concept `i` puts on its own proposals
/// minus what concept `j` puts there.
///
/// Differences are taken pairwise so identical rows give a margin of
/// exactly zero.
pub fn divergence_loss(g: &mut Graph, attention: Var, filtered: &FilteredProposals, alpha: f64, exponent: f64) -> Var {
    let n = filtered.num_concepts();
    assert_eq!(g.shape(attention), (n, filtered.union_order.len()), "attention rows must align with concepts");
    let mut terms = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        let own = g.row(attention, i);
        let mask = g.constant(block_indicator(filtered, i));
        for j in (0..n).filter(|&j| j != i) {
            let other = g.row(attention, j);
            let diff = g.sub(own, other);
            terms.push(g.mul(diff, mask));
        }
    }
    let margin = if terms.is_empty() {
        g.scalar(0.0)
    } else {
        let all = g.concat_rows(&terms);
        g.sum(all)
    };
    let scaled = g.scale(margin, 1.0 / (n as f64).powf(exponent));
    let gap = g.rsub_scalar(alpha, scaled);
    g.relu(gap)
}

/// Plain-number version of [`divergence_loss`].
pub fn divergence_value(scores: &Tensor, filtered: &FilteredProposals, alpha: f64, exponent: f64) -> f64 {
    let n = filtered.num_concepts();
    let mut margin = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            for k in filtered.block(i) {
                margin += scores.get(i, k) - scores.get(j, k);
            }
        }
    }
    (alpha - margin / (n as f64).powf(exponent)).max(0.0)
}

/// Divergence plus MLM loss. Passing `alpha = None` drops the divergence
/// term, which gives the vanilla masked-language-modeling teacher.
pub fn dmlm_loss(
    g: &mut Graph,
    out: &FusionOutput,
    filtered: &FilteredProposals,
    targets: &[usize],
    alpha: Option<f64>,
    exponent: f64,
) -> Var {
    let mlm = mlm_loss(g, out.mask_logits, targets);
    match alpha {
        Some(a) => {
            let div = divergence_loss(g, out.attention, filtered, a, exponent);
            g.add(div, mlm)
        }
        None => mlm,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPrediction {
    pub predicted: usize,
    pub is_noise: bool,
}

/// Argmax word per view (ties to the lower id) and whether it disagrees
/// with the caption's concept.
pub fn predict_masked_and_flag_noise(mask_logits: &Tensor, targets: &[usize]) -> Vec<MaskPrediction> {
    (0..mask_logits.rows())
        .map(|i| {
            let row = mask_logits.row_slice(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            MaskPrediction { predicted: best, is_noise: best != targets[i] }
        })
        .collect()
}
