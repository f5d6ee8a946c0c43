//! Closed caption grammar, vocabulary, caption parsing and masked views.
//!
//! Object concepts are identified by membership in the grammar's concept
//! list. Each concept occurrence gets its own masked copy of the caption.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::tensor::{normalize, Tensor};

pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordKind {
    Filler,
    Concept,
    Relation,
}

impl WordKind {
    fn flag(self) -> &'static str {
        match self {
            WordKind::Filler => "filler",
            WordKind::Concept => "concept",
            WordKind::Relation => "relation",
        }
    }
}

/// Word list with kinds and a frozen embedding table.
///
/// The mask token is not a word; its id is `len()`.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    kinds: Vec<WordKind>,
    index: HashMap<String, usize>,
    seed: u64,
    embeddings: Tensor,
}

impl Vocabulary {
    /// Builds a vocabulary from `(word, kind)` pairs in order.
    pub fn new(entries: &[(String, WordKind)], seed: u64, embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let mut words = Vec::with_capacity(entries.len());
        let mut kinds = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (w, k) in entries {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::config(format!("invalid vocabulary word `{w}`")));
            }
            if w == MASK_TOKEN {
                return Err(Error::config("the mask token cannot be a vocabulary word"));
            }
            if let Some(&prev) = index.get(w) {
                if kinds[prev] != *k {
                    return Err(Error::config(format!("word `{w}` listed with two kinds")));
                }
                continue;
            }
            index.insert(w.clone(), words.len());
            words.push(w.clone());
            kinds.push(*k);
        }
        let mut rows: Vec<Vec<f64>> = words.iter().map(|w| word_embedding(seed, w, embedding_dim)).collect();
        rows.push(word_embedding(seed, MASK_TOKEN, embedding_dim));
        Ok(Vocabulary { words, kinds, index, seed, embeddings: Tensor::from_rows(&rows) })
    }

    /// Convenience constructor from three word lists.
    pub fn from_lists(fillers: &[&str], concepts: &[&str], relations: &[&str], seed: u64, dim: usize) -> Result<Self> {
        let mut entries = Vec::new();
        entries.extend(fillers.iter().map(|w| (w.to_string(), WordKind::Filler)));
        entries.extend(relations.iter().map(|w| (w.to_string(), WordKind::Relation)));
        entries.extend(concepts.iter().map(|w| (w.to_string(), WordKind::Concept)));
        Self::new(&entries, seed, dim)
    }

    /// Number of real words (excludes the mask token).
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        self.words.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        if id == self.mask_id() {
            Some(MASK_TOKEN)
        } else {
            self.words.get(id).map(String::as_str)
        }
    }

    pub fn kind(&self, id: usize) -> Option<WordKind> {
        self.kinds.get(id).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn concept_words(&self) -> impl Iterator<Item = &str> {
        self.words_of(WordKind::Concept)
    }

    pub fn relation_words(&self) -> impl Iterator<Item = &str> {
        self.words_of(WordKind::Relation)
    }

    fn words_of(&self, kind: WordKind) -> impl Iterator<Item = &str> {
        self.words.iter().zip(&self.kinds).filter(move |(_, k)| **k == kind).map(|(w, _)| w.as_str())
    }

    /// Frozen embedding table, `(len() + 1) x d`; the last row is the mask token.
    pub fn embedding_table(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embedding(&self, id: usize) -> Result<&[f64]> {
        if id > self.mask_id() {
            return Err(Error::UnknownToken(format!("#{id}")));
        }
        Ok(self.embeddings.row_slice(id))
    }

    /// One word per line: `word<space>flag`.
    pub fn to_vocab_file(&self) -> String {
        let mut out = String::new();
        for (w, k) in self.words.iter().zip(&self.kinds) {
            out.push_str(w);
            out.push(' ');
            out.push_str(k.flag());
            out.push('\n');
        }
        out
    }

    pub fn from_vocab_file(text: &str, seed: u64, dim: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default();
            let kind = match parts.next() {
                None | Some("filler") => WordKind::Filler,
                Some("concept") => WordKind::Concept,
                Some("relation") => WordKind::Relation,
                Some(other) => {
                    return Err(Error::Parse { line: n + 1, message: format!("unknown flag `{other}`") });
                }
            };
            if parts.next().is_some() {
                return Err(Error::Parse { line: n + 1, message: "trailing fields".into() });
            }
            entries.push((word.to_string(), kind));
        }
        Self::new(&entries, seed, dim)
    }
}

/// Unit-norm Gaussian vector determined by `(seed, word)` alone.
pub fn word_embedding(seed: u64, word: &str, dim: usize) -> Vec<f64> {
    let mut rng = seeded_rng(seed, &format!("word:{word}"));
    let mut v: Vec<f64> = (0..dim)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    normalize(&mut v);
    v
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub word_ids: Vec<usize>,
    pub concept_positions: Vec<usize>,
    pub relation_positions: Vec<usize>,
}

impl Caption {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    pub fn concept_ids(&self) -> Vec<usize> {
        self.concept_positions.iter().map(|&p| self.word_ids[p]).collect()
    }

    pub fn concepts<'v>(&self, vocab: &'v Vocabulary) -> Vec<&'v str> {
        self.concept_ids().into_iter().filter_map(|id| vocab.word(id)).collect()
    }
}

/// Tokenizes on single spaces and tags concept and relation positions.
pub fn parse_caption(text: &str, vocab: &Vocabulary) -> Result<Caption> {
    if text.trim().is_empty() {
        return Err(Error::EmptyCaption);
    }
    let mut word_ids = Vec::new();
    let mut concept_positions = Vec::new();
    let mut relation_positions = Vec::new();
    for (pos, w) in text.split(' ').enumerate() {
        let id = vocab.id(w)?;
        match vocab.kind(id) {
            Some(WordKind::Concept) => concept_positions.push(pos),
            Some(WordKind::Relation) => relation_positions.push(pos),
            _ => {}
        }
        word_ids.push(id);
    }
    Ok(Caption { text: text.to_string(), word_ids, concept_positions, relation_positions })
}

/// A copy of a caption with exactly one concept occurrence masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedView {
    pub masked_concept_index: usize,
    pub masked_position: usize,
    pub target: usize,
    pub token_ids: Vec<usize>,
}

pub fn make_masked_views(caption: &Caption, vocab: &Vocabulary) -> Vec<MaskedView> {
    caption
        .concept_positions
        .iter()
        .enumerate()
        .map(|(k, &pos)| {
            let mut token_ids = caption.word_ids.clone();
            token_ids[pos] = vocab.mask_id();
            MaskedView { masked_concept_index: k, masked_position: pos, target: caption.word_ids[pos], token_ids }
        })
        .collect()
}

/// Looks up frozen embeddings, one row per token.
pub fn embed_tokens(token_ids: &[usize], vocab: &Vocabulary) -> Result<Tensor> {
    let rows = token_ids.iter().map(|&id| vocab.embedding(id)).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, vocab.embedding_dim()));
    }
    Ok(Tensor::from_rows(&rows))
}

/// How captions are presented to the learner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    #[default]
    Full,
    OnlyConcepts,
    SingleWord,
}

impl CaptionMode {
    /// Rewrites a parsed caption. `OnlyConcepts` joins concepts with `,`;
    /// `SingleWord` keeps the first concept. Concept-free captions are kept.
    pub fn apply(self, caption: &Caption, vocab: &Vocabulary) -> Result<Caption> {
        let concepts = caption.concepts(vocab);
        let text = match self {
            CaptionMode::Full => return Ok(caption.clone()),
            _ if concepts.is_empty() => return Ok(caption.clone()),
            CaptionMode::OnlyConcepts => concepts.join(" , "),
            CaptionMode::SingleWord => concepts[0].to_string(),
        };
        parse_caption(&text, vocab)
    }
}

/// Geometric relation between two objects, rendered through the grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Above, Relation::Below, Relation::LeftOf, Relation::RightOf];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationPhrases {
    pub above: String,
    pub below: String,
    pub left_of: String,
    pub right_of: String,
}

/// Grammar definition, loadable from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub concepts: Vec<String>,
    pub attributes: Vec<String>,
    pub determiners: Vec<String>,
    pub conjunction: String,
    pub separator: String,
    pub relations: RelationPhrases,
}

impl Default for Grammar {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Grammar {
            concepts: s(&["circle", "square", "triangle", "star", "cross", "ring"]),
            attributes: s(&["red", "green", "blue", "yellow"]),
            determiners: s(&["a", "the"]),
            conjunction: "and".into(),
            separator: ",".into(),
            relations: RelationPhrases {
                above: "above".into(),
                below: "below".into(),
                left_of: "left of".into(),
                right_of: "right of".into(),
            },
        }
    }
}

/// One object mention: `<determiner> [attribute] <concept>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    pub determiner: usize,
    pub attribute: Option<String>,
    pub concept: String,
}

impl Grammar {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Grammar = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grammar serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::config("grammar has no concepts"));
        }
        if self.determiners.is_empty() {
            return Err(Error::config("grammar has no determiners"));
        }
        Ok(())
    }

    pub fn phrase(&self, rel: Relation) -> &str {
        match rel {
            Relation::Above => &self.relations.above,
            Relation::Below => &self.relations.below,
            Relation::LeftOf => &self.relations.left_of,
            Relation::RightOf => &self.relations.right_of,
        }
    }

    /// The vocabulary induced by the grammar. The first word of each
    /// relation phrase is the relation word; the rest are fillers.
    pub fn vocabulary(&self, seed: u64, dim: usize) -> Result<Vocabulary> {
        let mut entries: Vec<(String, WordKind)> = Vec::new();
        let mut push = |w: &str, k: WordKind| entries.push((w.to_string(), k));
        for d in &self.determiners {
            push(d, WordKind::Filler);
        }
        push(&self.conjunction, WordKind::Filler);
        push(&self.separator, WordKind::Filler);
        for a in &self.attributes {
            push(a, WordKind::Filler);
        }
        for rel in Relation::ALL {
            let mut words = self.phrase(rel).split(' ');
            if let Some(head) = words.next() {
                push(head, WordKind::Relation);
            }
            for w in words {
                push(w, WordKind::Filler);
            }
        }
        for c in &self.concepts {
            push(c, WordKind::Concept);
        }
        Vocabulary::new(&entries, seed, dim)
    }

    fn render_mention(&self, m: &Mention, out: &mut Vec<String>) {
        out.push(self.determiners[m.determiner % self.determiners.len()].clone());
        if let Some(a) = &m.attribute {
            out.push(a.clone());
        }
        out.push(m.concept.clone());
    }

    /// Renders mentions in order. Mentions 0 and 1 are joined by `relation`
    /// when given, otherwise by the conjunction; later mentions are appended
    /// with the conjunction.
    pub fn render(&self, mentions: &[Mention], relation: Option<Relation>) -> String {
        let mut out = Vec::new();
        for (i, m) in mentions.iter().enumerate() {
            if i == 1 {
                match relation {
                    Some(r) => out.extend(self.phrase(r).split(' ').map(str::to_string)),
                    None => out.push(self.conjunction.clone()),
                }
            } else if i > 1 {
                out.push(self.conjunction.clone());
            }
            self.render_mention(m, &mut out);
        }
        out.join(" ")
    }
}
