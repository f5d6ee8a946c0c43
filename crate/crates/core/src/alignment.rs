//! Region-text alignment objectives and stage-wise loss assembly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Similarity-weighted grounding score between `tokens` (`n_T x d`) and
/// `regions` (`n_R x d`): per token a softmax over regions of the dot
/// products weights those same dot products; tokens are averaged.
pub fn grounding_score_s(g: &mut Graph, tokens: Var, regions: Var) -> Result<Var> {
    let (nt, _) = g.shape(tokens);
    let (nr, _) = g.shape(regions);
    if nt == 0 || nr == 0 {
        return Err(Error::degenerate("grounding needs tokens and regions"));
    }
    let sims = g.matmul_t(tokens, regions);
    let weights = g.softmax_rows(sims);
    let weighted = g.mul(weights, sims);
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / nt as f64))
}

/// Attention-weighted grounding score: `(1/|C|) sum_i sum_j A_ij <c_i, r_j>`.
/// The attention is treated as a constant target.
pub fn grounding_score_a(g: &mut Graph, concepts: Var, regions: Var, attention: &Tensor) -> Result<Var> {
    let (nc, _) = g.shape(concepts);
    if nc == 0 {
        return Err(Error::degenerate("every concept was removed"));
    }
    let sims = g.matmul_t(concepts, regions);
    if g.shape(sims) != attention.shape() {
        return Err(Error::config("attention shape does not match concepts x regions"));
    }
    let a = g.constant(attention.clone());
    let weighted = g.mul(a, sims);
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / nc as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchReduction {
    #[default]
    Mean,
    Sum,
}

fn reduce(g: &mut Graph, per_item: Var, reduction: BatchReduction) -> Var {
    match reduction {
        BatchReduction::Mean => g.mean(per_item),
        BatchReduction::Sum => g.sum(per_item),
    }
}

/// Per-row `-log softmax(row)[diag]` for a square score matrix.
fn diagonal_nll(g: &mut Graph, scores: Var) -> Var {
    let n = g.shape(scores).0;
    let ls = g.log_softmax_rows(scores);
    let idx: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let picked = g.pick(ls, &idx);
    g.scale(picked, -1.0)
}

/// Bidirectional contrastive caption loss.
///
/// `scores[i][t]` is the grounding score of caption `t` against image `i`.
/// The image-to-text term normalizes each row over captions, the
/// text-to-image term each column over images.
pub fn contrastive_caption_loss(g: &mut Graph, scores: Var, reduction: BatchReduction) -> Result<Var> {
    let (r, c) = g.shape(scores);
    if r != c || r == 0 {
        return Err(Error::degenerate("contrastive loss needs a non-empty square score matrix"));
    }
    let i2t = diagonal_nll(g, scores);
    let st = g.transpose(scores);
    let t2i = diagonal_nll(g, st);
    let a = reduce(g, i2t, reduction);
    let b = reduce(g, t2i, reduction);
    Ok(g.add(a, b))
}

/// Score matrix `M[i][t] = <tokens_t, regions_i>_S`.
pub fn score_matrix_s(g: &mut Graph, token_sets: &[Var], region_sets: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(region_sets.len());
    for &r in region_sets {
        let mut cells = Vec::with_capacity(token_sets.len());
        for &t in token_sets {
            cells.push(grounding_score_s(g, t, r)?);
        }
        rows.push(g.concat_cols(&cells));
    }
    Ok(g.concat_rows(&rows))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillDenominator {
    /// Every caption in the denominator is scored with the S-score.
    #[default]
    SimilarityOnly,
    /// The positive term in the denominator uses the attention score.
    AttentionPositive,
}

/// Attention-based contrastive distillation.
///
/// `s_scores[i][t]` is the S-score of caption `t`'s (noise-filtered)
/// concepts against image `i`; `a_scores` (`n x 1`) holds the attention
/// score of each positive pair. Returns the image-to-text plus
/// text-to-image terms.
pub fn distill_loss(
    g: &mut Graph,
    s_scores: Var,
    a_scores: Var,
    denominator: DistillDenominator,
    reduction: BatchReduction,
) -> Result<Var> {
    let (n, c) = g.shape(s_scores);
    if n != c || g.shape(a_scores) != (n, 1) {
        return Err(Error::config("distillation needs an n x n S matrix and n attention scores"));
    }
    if n == 0 {
        return Ok(g.scalar(0.0));
    }
    let denom_scores = match denominator {
        DistillDenominator::SimilarityOnly => s_scores,
        DistillDenominator::AttentionPositive => {
            // swap the diagonal for the attention scores
            let mut eye = Tensor::zeros(n, n);
            for i in 0..n {
                eye.set(i, i, 1.0);
            }
            let eye_v = g.constant(eye.clone());
            let off = g.constant(eye.map(|x| 1.0 - x));
            let kept = g.mul(s_scores, off);
            let ones = g.constant(Tensor::filled(1, n, 1.0));
            let a_cols = g.matmul(a_scores, ones);
            let diag = g.mul(a_cols, eye_v);
            g.add(kept, diag)
        }
    };
    let row_lse = row_log_sum_exp(g, denom_scores);
    let t = g.transpose(denom_scores);
    let col_lse = row_log_sum_exp(g, t);
    let i2t = g.sub(row_lse, a_scores);
    let t2i = g.sub(col_lse, a_scores);
    let a = reduce(g, i2t, reduction);
    let b = reduce(g, t2i, reduction);
    Ok(g.add(a, b))
}

fn row_log_sum_exp(g: &mut Graph, m: Var) -> Var {
    // log sum exp = x_0 - log softmax(x)_0
    let n = g.shape(m).0;
    let ls = g.log_softmax_rows(m);
    let idx: Vec<(usize, usize)> = (0..n).map(|i| (i, 0)).collect();
    let first = g.pick(m, &idx);
    let lsf = g.pick(ls, &idx);
    g.sub(first, lsf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Det,
    Cap,
    Img,
    Divmlm,
    Distill,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::Det, Component::Cap, Component::Img, Component::Divmlm, Component::Distill];

    pub fn name(self) -> &'static str {
        match self {
            Component::Det => "det",
            Component::Cap => "cap",
            Component::Img => "img",
            Component::Divmlm => "divmlm",
            Component::Distill => "distill",
        }
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown loss component {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn components(self) -> &'static [Component] {
        use Component::*;
        match self {
            Stage::Baseline => &[Det, Cap, Img],
            Stage::Stage1 => &[Det, Cap, Img, Divmlm],
            Stage::Stage2 => &[Det, Cap, Img, Divmlm, Distill],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Baseline => "baseline",
            Stage::Stage1 => "1",
            Stage::Stage2 => "2",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Stage::Baseline),
            "1" | "stage1" => Ok(Stage::Stage1),
            "2" | "stage2" => Ok(Stage::Stage2),
            _ => Err(Error::config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub det: f64,
    pub cap: f64,
    pub img: f64,
    pub divmlm: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { det: 1.0, cap: 0.1, img: 0.1, divmlm: 0.1, distill: 0.1 }
    }
}

impl LossWeights {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Det => self.det,
            Component::Cap => self.cap,
            Component::Img => self.img,
            Component::Divmlm => self.divmlm,
            Component::Distill => self.distill,
        }
    }
}

/// Named loss values of one step plus their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub det: Option<f64>,
    pub cap: Option<f64>,
    pub img: Option<f64>,
    pub divmlm: Option<f64>,
    pub distill: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn get(&self, c: Component) -> Option<f64> {
        match c {
            Component::Det => self.det,
            Component::Cap => self.cap,
            Component::Img => self.img,
            Component::Divmlm => self.divmlm,
            Component::Distill => self.distill,
        }
    }

    pub fn set(&mut self, c: Component, v: f64) {
        let slot = match c {
            Component::Det => &mut self.det,
            Component::Cap => &mut self.cap,
            Component::Img => &mut self.img,
            Component::Divmlm => &mut self.divmlm,
            Component::Distill => &mut self.distill,
        };
        *slot = Some(v);
    }
}

/// Components a stage sums, after removing those disabled by `enabled`.
pub fn active_components(stage: Stage, enabled: &[Component]) -> Vec<Component> {
    stage.components().iter().copied().filter(|c| enabled.contains(c)).collect()
}

/// Weighted total of the stage's active components; a missing one is a
/// configuration error.
pub fn assemble_losses(stage: Stage, components: &mut LossBundle, weights: &LossWeights, enabled: &[Component]) -> Result<f64> {
    let mut total = 0.0;
    for c in active_components(stage, enabled) {
        let v = components.get(c).ok_or_else(|| Error::config(format!("stage {stage} needs the {} loss", c.name())))?;
        total += weights.get(c) * v;
    }
    components.total = total;
    Ok(total)
}

/// Graph counterpart of [`assemble_losses`].
pub fn assemble_loss_vars(
    g: &mut Graph,
    stage: Stage,
    components: &[(Component, Var)],
    weights: &LossWeights,
    enabled: &[Component],
) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for c in active_components(stage, enabled) {
        let v = components
            .iter()
            .find(|(k, _)| *k == c)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::config(format!("stage {stage} needs the {} loss", c.name())))?;
        let w = g.scale(v, weights.get(c));
        total = g.add(total, w);
    }
    Ok(total)
}
