//! Configuration, training schedule, evaluation, and ablation runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    active_components, assemble_loss_vars, contrastive_caption_loss, distill_loss, grounding_score_a,
    score_matrix_s, BatchReduction, Component, DistillDenominator, LossBundle, LossWeights, Stage,
};
use crate::autograd::{softmax_in_place, Graph, Var};
use crate::bbox::BBox;
use crate::checkpoint::Checkpoint;
use crate::detector::{detection_loss, image_pseudo_loss, ClassifierHead, DetectorConfig, FeatureMap, Student};
use crate::error::{Error, Result};
use crate::eval::{
    attention_diversity, compute_ap50, emit_plot_data, mlm_accuracy, nms, noise_detection, AblationRow, AttentionRow,
    Detection, EvalReport, GroundTruth, NoiseDetection, PrCurve, NMS_IOU,
};
use crate::grammar::{make_masked_views, parse_caption, Caption, CaptionMode, Grammar, MaskedView, Vocabulary};
use crate::optim::{OptimizerConfig, RmsProp};
use crate::params::{seeded_rng, ParamStore};
use crate::teacher::{dmlm_loss, predict_masked_and_flag_noise, prefilter_proposals, FilteredProposals, FusionConfig, FusionOutput, MaskPrediction, Teacher};
use crate::tensor::Tensor;
use crate::world::{read_dataset, ClassSplit, Corpus, CorpusConfig, DetectionSample, Image, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub baseline_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Captions (and detection images) per optimizer step.
    pub batch_size: usize,
    /// Seed of the frozen word embeddings.
    pub vocab_seed: u64,
    pub caption_mode: CaptionMode,
    pub noise_removal: bool,
    /// Loss components allowed to contribute; the ablation mask.
    pub enabled: Vec<Component>,
    /// Train the teacher with the divergence constraint; off gives the
    /// vanilla masked-language-modeling teacher.
    pub divergence: bool,
    /// Stop gradients from teacher losses reaching the student in stage 2.
    pub detach_teacher_regions: bool,
    pub distill_denominator: DistillDenominator,
    pub batch_reduction: BatchReduction,
    /// Trailing fraction of captions held out for teacher diagnostics.
    pub heldout_fraction: f64,
    pub max_detections: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub detector: DetectorConfig,
    pub fusion: FusionConfig,
    pub corpus: CorpusConfig,
    pub world: WorldConfig,
    pub grammar_file: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            // Sized so the three-seed ablation fits an hour on one core.
            baseline_epochs: 6,
            stage1_epochs: 6,
            stage2_epochs: 6,
            batch_size: 8,
            vocab_seed: 7,
            caption_mode: CaptionMode::Full,
            noise_removal: true,
            enabled: Component::ALL.to_vec(),
            divergence: true,
            detach_teacher_regions: true,
            distill_denominator: DistillDenominator::SimilarityOnly,
            batch_reduction: BatchReduction::Mean,
            heldout_fraction: 0.1,
            max_detections: 16,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            detector: DetectorConfig::default(),
            fusion: FusionConfig::default(),
            corpus: CorpusConfig::default(),
            world: WorldConfig::default(),
            grammar_file: None,
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| Error::config(format!("empty config key {key:?}")))?;
    let mut cur = root;
    for p in parts {
        let table = cur.as_table_mut().ok_or_else(|| Error::config(format!("{key}: not a table")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| Error::config(format!("{key}: not a table")))?;
    // A string override of a list field may be a comma-separated list.
    let value = match (table.get(leaf), value) {
        (Some(toml::Value::Array(_)), toml::Value::String(s)) => {
            toml::Value::Array(s.split(',').filter(|x| !x.is_empty()).map(|x| toml::Value::String(x.trim().to_string())).collect())
        }
        (_, v) => v,
    };
    table.insert(leaf.to_string(), value);
    Ok(())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies dotted `key value` overrides such as `fusion.top_k 10`.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut root, k, parse_override_value(v))?;
        }
        let cfg: TrainConfig = root.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::config("heldout_fraction must lie in [0, 1)"));
        }
        if self.optimizer.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        let w = &self.weights;
        if [w.det, w.cap, w.img, w.divmlm, w.distill].iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.detector.embedding_dim != self.fusion.model_dim {
            return Err(Error::config("detector embedding_dim must equal fusion model_dim"));
        }
        self.detector.validate()?;
        self.fusion.validate()?;
        Ok(())
    }

    pub fn grammar(&self) -> Result<Grammar> {
        match &self.grammar_file {
            Some(p) => Grammar::from_toml(&fs::read_to_string(p)?),
            None => Ok(Grammar::default()),
        }
    }

    /// Hash over every field that shapes the model's parameters.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct ModelShape<'a> {
            detector: &'a DetectorConfig,
            fusion: &'a FusionConfig,
            vocab_seed: u64,
            grammar: Option<String>,
            split: &'a ClassSplit,
            image_size: usize,
        }
        let shape = ModelShape {
            detector: &self.detector,
            fusion: &self.fusion,
            vocab_seed: self.vocab_seed,
            grammar: self.grammar().ok().map(|g| g.to_toml()),
            split: &self.corpus.split,
            image_size: self.world.image_size,
        };
        let digest = Sha256::digest(serde_json::to_vec(&shape).expect("shape serializes"));
        digest[..12].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Frozen vocabulary plus model architectures.
#[derive(Clone, Debug)]
pub struct Models {
    pub vocab: Vocabulary,
    pub split: ClassSplit,
    pub student: Student,
    pub teacher: Teacher,
    pub base_head: ClassifierHead,
    /// Base then novel classes; the open-vocabulary scoring set.
    pub all_head: ClassifierHead,
}

impl Models {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let grammar = cfg.grammar()?;
        let d = cfg.detector.embedding_dim;
        let vocab = grammar.vocabulary(cfg.vocab_seed, d)?;
        let split = cfg.corpus.split.clone();
        split.validate()?;
        let size = (cfg.world.image_size, cfg.world.image_size);
        let student = Student::new(cfg.detector.clone(), size)?;
        let teacher = Teacher::new(cfg.fusion.clone(), vocab.len(), size)?;
        let zero = Tensor::zeros(1, d);
        let base_head = ClassifierHead::new(&split.base, &vocab, zero.clone(), cfg.detector.logit_scale)?;
        let all_head = ClassifierHead::new(&split.all(), &vocab, zero, cfg.detector.logit_scale)?;
        Ok(Models { vocab, split, student, teacher, base_head, all_head })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.student.init_params(&mut store, seed);
        self.teacher.init_params(&mut store, seed);
        store
    }
}

/// A caption sample parsed against the vocabulary.
#[derive(Clone, Debug)]
pub struct PreparedCaption {
    pub id: usize,
    pub image: Image,
    pub caption: Caption,
    pub views: Vec<MaskedView>,
    pub concepts: Vec<String>,
    /// Whether each concept was planted as noise.
    pub planted: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub detection: Vec<DetectionSample>,
    pub train_captions: Vec<PreparedCaption>,
    pub heldout_captions: Vec<PreparedCaption>,
    pub eval: Vec<DetectionSample>,
}

pub fn prepare(corpus: Corpus, models: &Models, cfg: &TrainConfig) -> Result<Prepared> {
    let n = corpus.captions.len();
    let heldout = ((n as f64) * cfg.heldout_fraction).round() as usize;
    let mut captions = Vec::with_capacity(n);
    for (id, s) in corpus.captions.into_iter().enumerate() {
        let parsed = parse_caption(&s.caption_text, &models.vocab)?;
        let caption = cfg.caption_mode.apply(&parsed, &models.vocab)?;
        let concepts: Vec<String> = caption.concepts(&models.vocab).into_iter().map(String::from).collect();
        let planted = (0..concepts.len()).map(|i| s.planted_noise.as_ref().is_some_and(|p| p.concept_index == i)).collect();
        let views = make_masked_views(&caption, &models.vocab);
        captions.push(PreparedCaption { id, image: s.image, caption, views, concepts, planted });
    }
    let heldout_captions = captions.split_off(n - heldout);
    for s in &corpus.detection {
        if let Some(l) = s.labels.iter().find(|l| !models.split.is_base(l)) {
            return Err(Error::config(format!("detection annotation `{l}` is not a base class")));
        }
    }
    Ok(Prepared { detection: corpus.detection, train_captions: captions, heldout_captions, eval: corpus.eval })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: String,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub stage: String,
    pub epoch: usize,
    pub steps: usize,
    pub mean: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stage: String,
    pub epoch: usize,
    pub history: Vec<EpochSummary>,
    #[serde(default)]
    pub evaluations: Vec<EvalReport>,
    pub checkpoint: Option<PathBuf>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load_or_new(dir: &Path, hash: &str) -> Result<Self> {
        let p = dir.join(Self::FILE);
        if p.exists() {
            let m: RunManifest = serde_json::from_str(&fs::read_to_string(&p)?).map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
            if m.config_hash != hash {
                return Err(Error::config(format!("run directory belongs to config {}, not {hash}", m.config_hash)));
            }
            Ok(m)
        } else {
            Ok(RunManifest { config_hash: hash.to_string(), ..Default::default() })
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochSummary>,
    /// Weighted total loss of every step, in order.
    pub trace: Vec<f64>,
}

/// Student forward on one caption image.
struct CaptionPass {
    regions: Var,
    values: Tensor,
    boxes: Vec<BBox>,
    global: Var,
}

struct TeacherPass {
    filtered: FilteredProposals,
    output: FusionOutput,
    predictions: Vec<MaskPrediction>,
    attention: Tensor,
}

/// Everything needed to train and evaluate from one configuration.
pub struct Session {
    pub cfg: TrainConfig,
    pub models: Models,
    pub data: Prepared,
    pub hash: String,
}

impl Session {
    pub fn new(cfg: TrainConfig, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        let models = Models::new(&cfg)?;
        let data = prepare(corpus, &models, &cfg)?;
        let hash = cfg.config_hash();
        Ok(Session { cfg, models, data, hash })
    }

    /// Reads the dataset named by `cfg.data_dir`.
    pub fn load(cfg: TrainConfig) -> Result<Self> {
        if !cfg.data_dir.join(crate::world::MANIFEST_FILE).exists() {
            return Err(Error::config(format!("no dataset at {}", cfg.data_dir.display())));
        }
        let corpus = read_dataset(&cfg.data_dir)?;
        Session::new(cfg, corpus)
    }

    pub fn init_params(&self) -> ParamStore {
        self.models.init_params(self.cfg.seed)
    }

    fn steps_per_epoch(&self) -> usize {
        let n = if self.data.train_captions.is_empty() { self.data.detection.len() } else { self.data.train_captions.len() };
        n.div_ceil(self.cfg.batch_size).max(1)
    }

    fn order(&self, kind: &str, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seeded_rng(self.cfg.seed, &format!("order/{kind}/{epoch}")));
        idx
    }

    /// Components this stage actually optimizes.
    fn live_components(&self, stage: Stage) -> Vec<Component> {
        active_components(stage, &self.cfg.enabled).into_iter().filter(|c| self.cfg.weights.get(*c) > 0.0).collect()
    }

    fn detection_image_loss(&self, g: &mut Graph, store: &ParamStore, sample: &DetectionSample) -> Result<Var> {
        let student = &self.models.student;
        let dc = &student.config;
        let fm = FeatureMap::new(&sample.image);
        let raw_anchors = g.constant(fm.describe_all(&student.anchors, dc.pool_grid));
        let obj = student.objectness_logits(g, store, raw_anchors);
        let obj_vals: Vec<f64> = g.value(obj).data().to_vec();
        let mut boxes: Vec<BBox> = student.top_anchors(&obj_vals, dc.n_proposals).into_iter().map(|i| student.anchors[i]).collect();
        boxes.extend(sample.boxes.iter().copied());
        let raw = g.constant(fm.describe_all(&boxes, dc.pool_grid));
        let out = student.region_head(g, store, raw);
        let logits = student.class_logits(g, store, out.features, &self.models.base_head.class_embeddings, true);
        let labels = sample
            .labels
            .iter()
            .map(|l| self.models.base_head.index_of(l).ok_or_else(|| Error::UnknownConcept(l.clone())))
            .collect::<Result<Vec<_>>>()?;
        let parts = detection_loss(g, &student.anchors, obj, &boxes, logits, out.deltas, &sample.boxes, &labels);
        Ok(parts.total(g))
    }

    fn caption_pass(&self, g: &mut Graph, store: &ParamStore, image: &Image) -> CaptionPass {
        let student = &self.models.student;
        let dc = &student.config;
        let fm = FeatureMap::new(image);
        let obj = student.anchor_objectness(&fm, store);
        let boxes: Vec<BBox> = student.top_anchors(&obj, dc.n_proposals).into_iter().map(|i| student.anchors[i]).collect();
        let raw = g.constant(fm.describe_all(&boxes, dc.pool_grid));
        let regions = student.region_head(g, store, raw).features;
        let values = g.value(regions).clone();
        let global = student.global_region(g, store, &fm);
        CaptionPass { regions, values, boxes, global }
    }

    fn concept_embeddings(&self, ids: &[usize]) -> Result<Tensor> {
        let rows = ids.iter().map(|&i| self.models.vocab.embedding(i).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows))
    }

    fn teacher_pass(&self, g: &mut Graph, store: &ParamStore, cap: &PreparedCaption, pass: &CaptionPass, detach: bool) -> Result<TeacherPass> {
        let ids = cap.caption.concept_ids();
        let emb = self.concept_embeddings(&ids)?;
        let rows: Vec<&[f64]> = (0..emb.rows()).map(|i| emb.row_slice(i)).collect();
        let filtered = prefilter_proposals(&rows, &pass.values, self.cfg.fusion.top_k)?;
        let source = if detach { g.detach(pass.regions) } else { pass.regions };
        let p = g.gather_rows(source, &filtered.union_order);
        let boxes: Vec<BBox> = filtered.union_order.iter().map(|&i| pass.boxes[i]).collect();
        let output = self.models.teacher.forward(g, store, &self.models.vocab, &cap.views, p, &boxes)?;
        let targets: Vec<usize> = cap.views.iter().map(|v| v.target).collect();
        let predictions = predict_masked_and_flag_noise(g.value(output.mask_logits), &targets);
        let attention = g.value(output.attention).clone();
        Ok(TeacherPass { filtered, output, predictions, attention })
    }

    fn mean_of(g: &mut Graph, terms: &[Var]) -> Option<Var> {
        let (&first, rest) = terms.split_first()?;
        let mut acc = first;
        for &t in rest {
            acc = g.add(acc, t);
        }
        Some(g.scale(acc, 1.0 / terms.len() as f64))
    }

    /// Builds the stage loss for one step; returns the graph, the total,
    /// and the raw component values.
    pub fn step_loss(&self, store: &ParamStore, stage: Stage, det_batch: &[usize], cap_batch: &[usize]) -> Result<(Graph, Var, LossBundle)> {
        let live = self.live_components(stage);
        let has = |c: Component| live.contains(&c);
        let mut g = Graph::new();
        let mut comps: Vec<(Component, Var)> = Vec::new();

        if has(Component::Det) {
            let mut terms = Vec::new();
            for &i in det_batch {
                terms.push(self.detection_image_loss(&mut g, store, &self.data.detection[i])?);
            }
            let det = Self::mean_of(&mut g, &terms).unwrap_or_else(|| g.scalar(0.0));
            comps.push((Component::Det, det));
        }

        let needs_captions = [Component::Cap, Component::Img, Component::Divmlm, Component::Distill].iter().any(|&c| has(c));
        if needs_captions && !cap_batch.is_empty() {
            let caps: Vec<&PreparedCaption> = cap_batch.iter().map(|&i| &self.data.train_captions[i]).collect();
            let passes: Vec<CaptionPass> = caps.iter().map(|c| self.caption_pass(&mut g, store, &c.image)).collect();

            if has(Component::Cap) {
                let words = caps
                    .iter()
                    .map(|c| self.concept_embeddings(&c.caption.word_ids).map(|t| g.constant(t)))
                    .collect::<Result<Vec<_>>>()?;
                let regions: Vec<Var> = passes.iter().map(|p| p.regions).collect();
                let m = score_matrix_s(&mut g, &words, &regions)?;
                let cap = contrastive_caption_loss(&mut g, m, self.cfg.batch_reduction)?;
                comps.push((Component::Cap, cap));
            }

            let teacher_needed = has(Component::Divmlm) || has(Component::Distill);
            let detach = stage == Stage::Stage2 && self.cfg.detach_teacher_regions;
            let mut teacher: Vec<Option<TeacherPass>> = Vec::with_capacity(caps.len());
            for (c, p) in caps.iter().zip(&passes) {
                teacher.push(if teacher_needed && !c.views.is_empty() { Some(self.teacher_pass(&mut g, store, c, p, detach)?) } else { None });
            }

            // Concepts kept after noise removal, per caption.
            let remove_noise = stage == Stage::Stage2 && self.cfg.noise_removal;
            let kept: Vec<Vec<usize>> = caps
                .iter()
                .zip(&teacher)
                .map(|(c, t)| match t {
                    Some(t) if remove_noise => (0..c.concepts.len()).filter(|&i| !t.predictions[i].is_noise).collect(),
                    _ => (0..c.concepts.len()).collect(),
                })
                .collect();

            if has(Component::Divmlm) {
                let mut terms = Vec::new();
                for (c, t) in caps.iter().zip(&teacher) {
                    if let Some(t) = t {
                        let targets: Vec<usize> = c.views.iter().map(|v| v.target).collect();
                        let alpha = self.cfg.divergence.then_some(self.cfg.fusion.divergence_alpha);
                        terms.push(dmlm_loss(&mut g, &t.output, &t.filtered, &targets, alpha, self.cfg.fusion.normalizer_exponent));
                    }
                }
                let v = Self::mean_of(&mut g, &terms).unwrap_or_else(|| g.scalar(0.0));
                comps.push((Component::Divmlm, v));
            }

            if has(Component::Img) {
                let emb = g.constant(self.models.all_head.class_embeddings.clone());
                let mut terms = Vec::new();
                for ((c, p), k) in caps.iter().zip(&passes).zip(&kept) {
                    if k.is_empty() {
                        continue;
                    }
                    let names: Vec<String> = k.iter().map(|&i| c.concepts[i].clone()).collect();
                    let s = g.matmul_t(p.global, emb);
                    let logits = g.scale(s, self.models.all_head.logit_scale);
                    terms.push(image_pseudo_loss(&mut g, logits, &names, &self.models.all_head.classes)?);
                }
                let v = Self::mean_of(&mut g, &terms).unwrap_or_else(|| g.scalar(0.0));
                comps.push((Component::Img, v));
            }

            if has(Component::Distill) {
                let valid: Vec<usize> = (0..caps.len()).filter(|&i| teacher[i].is_some() && !kept[i].is_empty()).collect();
                let v = if valid.is_empty() {
                    g.scalar(0.0)
                } else {
                    let mut concept_sets = Vec::with_capacity(valid.len());
                    for &i in &valid {
                        let ids: Vec<usize> = kept[i].iter().map(|&k| caps[i].caption.concept_ids()[k]).collect();
                        concept_sets.push(g.constant(self.concept_embeddings(&ids)?));
                    }
                    let regions: Vec<Var> = valid.iter().map(|&i| passes[i].regions).collect();
                    let s = score_matrix_s(&mut g, &concept_sets, &regions)?;
                    let mut a_scores = Vec::with_capacity(valid.len());
                    for (n, &i) in valid.iter().enumerate() {
                        let t = teacher[i].as_ref().expect("valid pairs ran the teacher");
                        let rows: Vec<Vec<f64>> = kept[i].iter().map(|&k| t.attention.row_slice(k).to_vec()).collect();
                        let att = Tensor::from_rows(&rows);
                        let p = g.gather_rows(passes[i].regions, &t.filtered.union_order);
                        a_scores.push(grounding_score_a(&mut g, concept_sets[n], p, &att)?);
                    }
                    let a = g.concat_rows(&a_scores);
                    distill_loss(&mut g, s, a, self.cfg.distill_denominator, self.cfg.batch_reduction)?
                };
                comps.push((Component::Distill, v));
            }
        }

        // Components with nothing to score this step count as zero.
        for c in &live {
            if !comps.iter().any(|(k, _)| k == c) {
                let z = g.scalar(0.0);
                comps.push((*c, z));
            }
        }
        let total = assemble_loss_vars(&mut g, stage, &comps, &self.cfg.weights, &live)?;
        let mut bundle = LossBundle { total: g.scalar_value(total), ..Default::default() };
        for (c, v) in &comps {
            bundle.set(*c, g.scalar_value(*v));
        }
        Ok((g, total, bundle))
    }

    /// Trains `stage` until `epochs` stage epochs are complete, starting
    /// from `start` (a checkpoint of an earlier stage, or of this stage to
    /// resume) or from fresh parameters.
    pub fn train(&self, stage: Stage, epochs: usize, start: Option<&Checkpoint>, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        self.train_with_hook(stage, epochs, start, log, &mut |_| Ok(()))
    }

    /// Like [`Session::train`], calling `on_epoch` with each epoch-boundary
    /// checkpoint.
    pub fn train_with_hook(
        &self,
        stage: Stage,
        epochs: usize,
        start: Option<&Checkpoint>,
        mut log: Option<&mut dyn Write>,
        on_epoch: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let stage_name = stage.to_string();
        let mut opt = RmsProp::new(self.cfg.optimizer.clone());
        let (mut store, mut epoch, mut stage_epoch, mut step) = match start {
            Some(ck) => {
                if ck.config_hash != self.hash {
                    return Err(Error::config(format!("checkpoint config hash {} does not match {}", ck.config_hash, self.hash)));
                }
                ck.restore_optimizer(&mut opt)?;
                let resumed = if ck.stage == stage_name { ck.stage_epoch } else { 0 };
                (ck.params.clone(), ck.epoch, resumed, ck.step)
            }
            None => (self.init_params(), 0, 0, 0),
        };
        let steps = self.steps_per_epoch();
        let total_steps = (epochs * steps) as u64;
        let mut history = Vec::new();
        let mut trace = Vec::new();
        let b = self.cfg.batch_size;
        while stage_epoch < epochs {
            let cap_order = self.order("captions", self.data.train_captions.len(), epoch);
            let det_order = self.order("detection", self.data.detection.len(), epoch);
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            for s in 0..steps {
                let cap_batch: Vec<usize> = cap_order.iter().skip(s * b).take(b).copied().collect();
                let det_batch: Vec<usize> = if det_order.is_empty() {
                    Vec::new()
                } else {
                    (0..b).map(|k| det_order[(s * b + k) % det_order.len()]).collect()
                };
                let (g, total, bundle) = self.step_loss(&store, stage, &det_batch, &cap_batch)?;
                if !bundle.total.is_finite() {
                    return Err(Error::degenerate(format!("non-finite loss at step {step}")));
                }
                let grads = g.backward(total);
                let pg = g.param_grads(&grads);
                let factor = self.cfg.optimizer.schedule.factor((stage_epoch * steps + s) as u64, total_steps);
                opt.step(&mut store, &pg, factor);
                step += 1;
                trace.push(bundle.total);
                for c in Component::ALL {
                    if let Some(v) = bundle.get(c) {
                        *sums.entry(c.name().to_string()).or_default() += v;
                    }
                }
                *sums.entry("total".into()).or_default() += bundle.total;
                if let Some(w) = log.as_deref_mut() {
                    let rec = StepRecord { step, stage: stage_name.clone(), epoch, losses: bundle };
                    writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
                }
            }
            epoch += 1;
            stage_epoch += 1;
            let mean = sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect();
            history.push(EpochSummary { stage: stage_name.clone(), epoch, steps, mean });
            on_epoch(&Checkpoint::capture(&self.hash, &stage_name, (epoch, stage_epoch), step, &store, &opt))?;
        }
        let checkpoint = Checkpoint::capture(&self.hash, &stage_name, (epoch, stage_epoch), step, &store, &opt);
        Ok(TrainOutcome { checkpoint, history, trace })
    }

    pub fn run_baseline(&self, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        self.train(Stage::Baseline, self.cfg.baseline_epochs, None, log)
    }

    pub fn run_stage1(&self, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        self.train(Stage::Stage1, self.cfg.stage1_epochs, None, log)
    }

    pub fn run_stage2(&self, stage1: &Checkpoint, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        self.train(Stage::Stage2, self.cfg.stage2_epochs, Some(stage1), log)
    }

    /// Open-vocabulary detections on one image: each proposal takes its
    /// most probable non-background class, then per-class NMS.
    pub fn detect(&self, store: &ParamStore, image: &Image) -> Vec<Detection> {
        let head = &self.models.all_head;
        let mut bg = store.value(store.id(crate::detector::names::BACKGROUND)).data().to_vec();
        crate::tensor::normalize(&mut bg);
        let props = self.models.student.propose_regions(image, store, self.cfg.detector.n_proposals);
        let mut dets = Vec::with_capacity(props.len());
        for p in props {
            let mut logits: Vec<f64> = (0..head.classes.len())
                .map(|c| head.logit_scale * crate::tensor::dot(&p.feature, head.class_embeddings.row_slice(c)))
                .collect();
            logits.push(head.logit_scale * crate::tensor::dot(&p.feature, &bg));
            softmax_in_place(&mut logits);
            let (best, prob) = logits[..head.classes.len()]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, v)| (i, *v))
                .expect("non-empty class set");
            if p.bbox.is_valid() {
                dets.push(Detection { bbox: p.bbox, label: head.classes[best].clone(), confidence: prob });
            }
        }
        let mut kept = nms(dets, NMS_IOU);
        kept.truncate(self.cfg.max_detections);
        kept
    }

    /// Teacher outputs on held-out captions: masked predictions and
    /// attention records.
    pub fn teacher_diagnostics(&self, store: &ParamStore, captions: &[PreparedCaption]) -> Result<Vec<(usize, FilteredProposals, Vec<BBox>, Vec<MaskPrediction>, Tensor)>> {
        let mut out = Vec::new();
        for (n, c) in captions.iter().enumerate() {
            if c.views.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let pass = self.caption_pass(&mut g, store, &c.image);
            let t = self.teacher_pass(&mut g, store, c, &pass, true)?;
            let boxes = t.filtered.union_order.iter().map(|&i| pass.boxes[i]).collect();
            out.push((n, t.filtered, boxes, t.predictions, t.attention));
        }
        Ok(out)
    }

    pub fn evaluate(&self, store: &ParamStore) -> Result<Evaluation> {
        let results: Vec<Vec<Detection>> = self.data.eval.iter().map(|s| self.detect(store, &s.image)).collect();
        let truth: Vec<GroundTruth> = self.data.eval.iter().map(|s| GroundTruth { boxes: s.boxes.clone(), labels: s.labels.clone() }).collect();
        let ap = compute_ap50(&results, &truth, &self.models.split);

        let held = &self.data.heldout_captions;
        let diag = self.teacher_diagnostics(store, held)?;
        let mut correct = Vec::new();
        let mut flags = Vec::new();
        let mut planted = Vec::new();
        let mut records = Vec::new();
        let mut attention = Vec::new();
        for (n, _, boxes, preds, att) in &diag {
            let cap = &held[*n];
            for (i, p) in preds.iter().enumerate() {
                correct.push(!p.is_noise);
                flags.push(p.is_noise);
                planted.push(cap.planted[i]);
                for (k, b) in boxes.iter().enumerate() {
                    attention.push(AttentionRow {
                        caption_id: cap.id,
                        concept: cap.concepts[i].clone(),
                        proposal: k,
                        x1: b.x1,
                        y1: b.y1,
                        x2: b.x2,
                        y2: b.y2,
                        score: att.get(i, k),
                    });
                }
            }
            records.push(att.clone());
        }
        let noise = (!flags.is_empty() && planted.iter().any(|&p| p)).then(|| noise_detection(&flags, &planted));
        let report = EvalReport {
            ap50_novel: ap.novel,
            ap50_base: ap.base,
            ap50_all: ap.all,
            mlm_accuracy: if correct.is_empty() { 0.0 } else { mlm_accuracy(&correct)? },
            attention_tv: attention_diversity(&records),
            per_class: ap.per_class.clone(),
            noise,
        };
        Ok(Evaluation { report, curves: ap.curves, attention })
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    pub curves: BTreeMap<String, PrCurve>,
    pub attention: Vec<AttentionRow>,
}

impl Evaluation {
    pub fn noise(&self) -> Option<NoiseDetection> {
        self.report.noise
    }

    pub fn write(&self, dir: &Path, ablation: &[AblationRow]) -> Result<()> {
        emit_plot_data(dir, &self.report, &self.curves, &self.attention, ablation)
    }
}

/// A named ablation configuration.
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub name: &'static str,
    pub enabled: Vec<Component>,
    pub two_stage: bool,
    pub divergence: bool,
    pub caption_mode: CaptionMode,
    pub noise_removal: bool,
}

/// Loss ablation rows, caption modes, and noise removal on/off.
pub fn ablation_specs() -> Vec<AblationSpec> {
    use Component::*;
    let spec = |name, enabled: &[Component], two_stage, divergence, caption_mode, noise_removal| AblationSpec {
        name,
        enabled: enabled.to_vec(),
        two_stage,
        divergence,
        caption_mode,
        noise_removal,
    };
    let all = [Det, Cap, Img, Divmlm, Distill];
    vec![
        spec("det", &[Det], false, true, CaptionMode::Full, true),
        spec("det+cap", &[Det, Cap], false, true, CaptionMode::Full, true),
        spec("det+cap+img", &[Det, Cap, Img], false, true, CaptionMode::Full, true),
        spec("+divmlm", &[Det, Cap, Img, Divmlm], false, true, CaptionMode::Full, true),
        spec("+distill w/o divmlm", &all, true, false, CaptionMode::Full, true),
        spec("all", &all, true, true, CaptionMode::Full, true),
        spec("caption=only_concepts", &all, true, true, CaptionMode::OnlyConcepts, true),
        spec("caption=single_word", &all, true, true, CaptionMode::SingleWord, true),
        spec("noise_removal=off", &all, true, true, CaptionMode::Full, false),
    ]
}

/// Trains and evaluates one ablation row from `base` and the corpus.
pub fn run_ablation(base: &TrainConfig, corpus: &Corpus, spec: &AblationSpec) -> Result<AblationRow> {
    let mut cfg = base.clone();
    cfg.enabled = spec.enabled.clone();
    cfg.divergence = spec.divergence;
    cfg.caption_mode = spec.caption_mode;
    cfg.noise_removal = spec.noise_removal;
    let session = Session::new(cfg, corpus.clone())?;
    let store = if spec.two_stage {
        let s1 = session.run_stage1(None)?;
        session.run_stage2(&s1.checkpoint, None)?.checkpoint.params
    } else if spec.enabled.contains(&Component::Divmlm) {
        session.run_stage1(None)?.checkpoint.params
    } else {
        session.run_baseline(None)?.checkpoint.params
    };
    let r = session.evaluate(&store)?.report;
    Ok(AblationRow { row: spec.name.to_string(), seed: base.seed, novel: r.ap50_novel, base: r.ap50_base, all: r.ap50_all })
}

/// Every ablation row for every seed.
pub fn run_ablation_grid(base: &TrainConfig, corpus: &Corpus, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        for spec in ablation_specs() {
            rows.push(run_ablation(&cfg, corpus, &spec)?);
        }
    }
    Ok(rows)
}

/// Median per row over seeds, as `(row, novel, base, all)`.
pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<(String, f64, f64, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.row.as_str()) {
            names.push(&r.row);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let pick = |f: &dyn Fn(&AblationRow) -> f64| median(&rows.iter().filter(|r| r.row == n).map(f).collect::<Vec<_>>());
            (n.to_string(), pick(&|r| r.novel), pick(&|r| r.base), pick(&|r| r.all))
        })
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Human-readable name of a stage checkpoint file.
pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("stage-{stage}.ckpt"))
}
