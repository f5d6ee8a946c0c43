//! Procedural shapes world: scenes, rasterized images, box annotations,
//! relational captions and on-disk corpora.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::grammar::{Grammar, Mention, Relation};
use crate::params::seeded_rng;

/// Base/novel class partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

impl Default for ClassSplit {
    fn default() -> Self {
        ClassSplit {
            base: ["circle", "square", "triangle", "star"].map(String::from).to_vec(),
            novel: ["cross", "ring"].map(String::from).to_vec(),
        }
    }
}

impl ClassSplit {
    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() && self.novel.is_empty() {
            return Err(Error::config("empty class split"));
        }
        if let Some(c) = self.base.iter().find(|c| self.novel.contains(c)) {
            return Err(Error::config(format!("class `{c}` is both base and novel")));
        }
        Ok(())
    }

    /// Base classes followed by novel classes.
    pub fn all(&self) -> Vec<String> {
        self.base.iter().chain(&self.novel).cloned().collect()
    }

    pub fn is_base(&self, class: &str) -> bool {
        self.base.iter().any(|c| c == class)
    }

    pub fn is_novel(&self, class: &str) -> bool {
        self.novel.iter().any(|c| c == class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Ring,
}

impl ShapeKind {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "circle" => ShapeKind::Circle,
            "square" => ShapeKind::Square,
            "triangle" => ShapeKind::Triangle,
            "star" => ShapeKind::Star,
            "cross" => ShapeKind::Cross,
            "ring" => ShapeKind::Ring,
            _ => return None,
        })
    }

    /// Membership test in the object's normalized frame, `u, v` in `[-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeKind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Cross => (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0),
            ShapeKind::Star => point_in_polygon(u, v, &star_polygon()),
        }
    }
}

fn star_polygon() -> [(f64, f64); 10] {
    let mut pts = [(0.0, 0.0); 10];
    for (k, p) in pts.iter_mut().enumerate() {
        let r = if k % 2 == 0 { 1.0 } else { 0.45 };
        let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
        *p = (r * a.cos(), r * a.sin());
    }
    pts
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: [u8; 3],
    pub colors: Vec<(String, [u8; 3])>,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            background: [24, 24, 24],
            colors: vec![
                ("red".into(), [220, 40, 40]),
                ("green".into(), [40, 200, 70]),
                ("blue".into(), [60, 90, 235]),
                ("yellow".into(), [230, 210, 40]),
            ],
        }
    }
}

/// Knobs of the procedural world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: u32,
    pub max_size: u32,
    /// Minimum center offset for a spatial relation to hold.
    pub relation_margin: f64,
    /// Minimum empty gap between object boxes.
    pub gap: f64,
    pub palette: Palette,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 14,
            max_size: 24,
            relation_margin: 4.0,
            gap: 2.0,
            palette: Palette::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_name: String,
    pub color: String,
    pub center: [i32; 2],
    pub size: u32,
}

impl SceneObject {
    pub fn bbox(&self) -> BBox {
        let h = self.size as f64 / 2.0;
        let (cx, cy) = (self.center[0] as f64, self.center[1] as f64);
        BBox::new(cx - h, cy - h, cx + h, cy + h)
    }
}

/// A caption concept swapped for a class absent from the scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedNoise {
    pub concept_index: usize,
    pub original: String,
    pub planted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub image_size: (usize, usize),
    pub relations: Vec<(usize, Relation, usize)>,
    pub planted_noise: Option<PlantedNoise>,
}

/// Row-major 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image { height, width, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Intensity in `[0, 1]` of channel `c` at `(x, y)`.
    pub fn intensity(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
    }

    pub fn count_not(&self, rgb: [u8; 3]) -> usize {
        self.data.chunks_exact(3).filter(|p| *p != rgb).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Image(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
        Ok(Image { height: img.height() as usize, width: img.width() as usize, data: img.into_raw() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSample {
    pub image: Image,
    pub caption_text: String,
    /// Ground truth for tests and diagnostics only; never read by training.
    pub planted_noise: Option<PlantedNoise>,
    pub scene_boxes: Vec<BBox>,
    pub scene_labels: Vec<String>,
}

/// Which classes a scene may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePool {
    /// Base classes only (detection data).
    Base,
    /// Any class.
    All,
    /// At least one base and one novel object (evaluation data).
    Mixed,
}

pub struct GeneratedScene {
    pub spec: SceneSpec,
    pub detection: Option<DetectionSample>,
    pub caption: CaptionSample,
}

/// The world: geometry/color config plus the caption grammar.
#[derive(Clone, Debug, Default)]
pub struct World {
    pub config: WorldConfig,
    pub grammar: Grammar,
}

impl World {
    pub fn new(config: WorldConfig, grammar: Grammar) -> Result<Self> {
        if config.min_objects == 0 || config.min_objects > config.max_objects {
            return Err(Error::config("invalid object count range"));
        }
        if config.min_size < 2 || config.min_size > config.max_size || config.max_size as usize >= config.image_size {
            return Err(Error::config("invalid object size range"));
        }
        for (name, _) in &config.palette.colors {
            if !grammar.attributes.contains(name) {
                return Err(Error::config(format!("palette color `{name}` missing from grammar attributes")));
            }
        }
        Ok(World { config, grammar })
    }

    fn color_rgb(&self, name: &str) -> [u8; 3] {
        self.config
            .palette
            .colors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| *c)
            .unwrap_or([255, 255, 255])
    }

    pub fn relation_holds(&self, subject: &SceneObject, rel: Relation, object: &SceneObject) -> bool {
        let m = self.config.relation_margin;
        let (sx, sy) = (subject.center[0] as f64, subject.center[1] as f64);
        let (ox, oy) = (object.center[0] as f64, object.center[1] as f64);
        match rel {
            Relation::Above => sy + m <= oy,
            Relation::Below => sy >= oy + m,
            Relation::LeftOf => sx + m <= ox,
            Relation::RightOf => sx >= ox + m,
        }
    }

    fn place_objects<R: Rng>(&self, rng: &mut R, classes: &[String]) -> Vec<SceneObject> {
        let cfg = &self.config;
        let colors: Vec<&String> = cfg.palette.colors.iter().map(|(n, _)| n).collect();
        let mut objects: Vec<SceneObject> = Vec::new();
        for class in classes {
            for _ in 0..200 {
                let half = rng.gen_range(cfg.min_size / 2..=cfg.max_size / 2);
                let size = half * 2;
                let lo = half as i32;
                let hi = (cfg.image_size as u32 - half) as i32;
                let candidate = SceneObject {
                    class_name: class.clone(),
                    color: colors[rng.gen_range(0..colors.len())].clone(),
                    center: [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)],
                    size,
                };
                let b = candidate.bbox().expand(1.0);
                let clear = objects.iter().all(|o| {
                    let ob = o.bbox();
                    let g = cfg.gap;
                    b.x2 + g <= ob.x1 || ob.x2 + g <= b.x1 || b.y2 + g <= ob.y1 || ob.y2 + g <= b.y1
                });
                if clear {
                    objects.push(candidate);
                    break;
                }
            }
        }
        objects
    }

    fn pick_classes<R: Rng>(&self, rng: &mut R, split: &ClassSplit, pool: ScenePool) -> Result<Vec<String>> {
        let cfg = &self.config;
        let all = split.all();
        let choose = |rng: &mut R, from: &[String]| from[rng.gen_range(0..from.len())].clone();
        match pool {
            ScenePool::All => {
                let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
                Ok((0..n).map(|_| choose(rng, &all)).collect())
            }
            ScenePool::Base => {
                if split.base.is_empty() {
                    return Err(Error::config("no base classes"));
                }
                let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
                Ok((0..n).map(|_| choose(rng, &split.base)).collect())
            }
            ScenePool::Mixed => {
                if split.base.is_empty() || split.novel.is_empty() || cfg.max_objects < 2 {
                    return Err(Error::config("mixed scenes need base and novel classes and two objects"));
                }
                let n = rng.gen_range(cfg.min_objects.max(2)..=cfg.max_objects);
                let mut classes = vec![choose(rng, &split.base), choose(rng, &split.novel)];
                classes.extend((2..n).map(|_| choose(rng, &all)));
                classes.shuffle(rng);
                Ok(classes)
            }
        }
    }

    /// Generates one scene and its samples; pure in `(seed, config)`.
    pub fn generate_scene(&self, seed: u64, split: &ClassSplit, noise_rate: f64, pool: ScenePool) -> Result<GeneratedScene> {
        split.validate()?;
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(Error::config(format!("noise_rate {noise_rate} outside [0, 1]")));
        }
        let mut rng = seeded_rng(seed, "scene");
        let mut objects = Vec::new();
        for _ in 0..100 {
            let classes = self.pick_classes(&mut rng, split, pool)?;
            objects = self.place_objects(&mut rng, &classes);
            let complete = match pool {
                ScenePool::Mixed => {
                    objects.iter().any(|o| split.is_base(&o.class_name))
                        && objects.iter().any(|o| split.is_novel(&o.class_name))
                }
                _ => !objects.is_empty(),
            };
            if complete {
                break;
            }
        }

        let mut relations = Vec::new();
        let mut relation = None;
        if objects.len() >= 2 {
            let holds: Vec<Relation> =
                Relation::ALL.into_iter().filter(|&r| self.relation_holds(&objects[0], r, &objects[1])).collect();
            if !holds.is_empty() {
                let r = holds[rng.gen_range(0..holds.len())];
                relations.push((0, r, 1));
                relation = Some(r);
            }
        }

        let mut mentions: Vec<Mention> = objects
            .iter()
            .map(|o| Mention {
                determiner: rng.gen_range(0..self.grammar.determiners.len()),
                attribute: Some(o.color.clone()),
                concept: o.class_name.clone(),
            })
            .collect();

        let mut planted_noise = None;
        if !mentions.is_empty() && rng.gen_bool(noise_rate) {
            let absent: Vec<String> =
                split.all().into_iter().filter(|c| !objects.iter().any(|o| &o.class_name == c)).collect();
            if !absent.is_empty() {
                let k = rng.gen_range(0..mentions.len());
                let planted = absent[rng.gen_range(0..absent.len())].clone();
                planted_noise = Some(PlantedNoise {
                    concept_index: k,
                    original: mentions[k].concept.clone(),
                    planted: planted.clone(),
                });
                mentions[k].concept = planted;
            }
        }
        let caption_text = self.grammar.render(&mentions, relation);

        let size = self.config.image_size;
        let spec = SceneSpec { seed, objects, image_size: (size, size), relations, planted_noise };
        let image = self.render_image(&spec);

        let (base_boxes, base_labels): (Vec<BBox>, Vec<String>) = spec
            .objects
            .iter()
            .filter(|o| split.is_base(&o.class_name))
            .map(|o| (o.bbox(), o.class_name.clone()))
            .unzip();
        let detection = (!base_boxes.is_empty())
            .then(|| DetectionSample { image: image.clone(), boxes: base_boxes, labels: base_labels });
        let caption = CaptionSample {
            image,
            caption_text,
            planted_noise: spec.planted_noise.clone(),
            scene_boxes: spec.objects.iter().map(SceneObject::bbox).collect(),
            scene_labels: spec.objects.iter().map(|o| o.class_name.clone()).collect(),
        };
        Ok(GeneratedScene { spec, detection, caption })
    }

    /// Rasterizes filled shapes on a uniform background; a pixel is
    /// foreground when its center lies inside the shape.
    pub fn render_image(&self, spec: &SceneSpec) -> Image {
        let (h, w) = spec.image_size;
        let mut img = Image::filled(h, w, self.config.palette.background);
        for obj in &spec.objects {
            let Some(kind) = ShapeKind::from_name(&obj.class_name) else { continue };
            let rgb = self.color_rgb(&obj.color);
            let half = obj.size as f64 / 2.0;
            let b = obj.bbox().clip(w as f64, h as f64);
            let (cx, cy) = (obj.center[0] as f64, obj.center[1] as f64);
            for y in b.y1.floor() as usize..(b.y2.ceil() as usize).min(h) {
                for x in b.x1.floor() as usize..(b.x2.ceil() as usize).min(w) {
                    let u = (x as f64 + 0.5 - cx) / half;
                    let v = (y as f64 + 0.5 - cy) / half;
                    if kind.contains(u, v) {
                        img.set_pixel(x, y, rgb);
                    }
                }
            }
        }
        img
    }
}

/// Sizes and seeds of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub detection_count: usize,
    pub caption_count: usize,
    pub eval_count: usize,
    pub noise_rate: f64,
    pub split: ClassSplit,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            detection_count: 1000,
            caption_count: 2000,
            eval_count: 500,
            noise_rate: 0.0,
            split: ClassSplit::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub detection: Vec<DetectionSample>,
    pub captions: Vec<CaptionSample>,
    /// Held-out scenes annotated with every class, base and novel.
    pub eval: Vec<DetectionSample>,
}

fn scene_seed(seed: u64, kind: &str, index: usize) -> u64 {
    use rand::RngCore;
    seeded_rng(seed, &format!("{kind}:{index}")).next_u64()
}

pub fn generate_corpus(world: &World, cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.split.validate()?;
    let mut corpus = Corpus::default();
    let mut i = 0;
    while corpus.detection.len() < cfg.detection_count {
        let scene = world.generate_scene(scene_seed(cfg.seed, "detection", i), &cfg.split, 0.0, ScenePool::Base)?;
        corpus.detection.extend(scene.detection);
        i += 1;
    }
    for i in 0..cfg.caption_count {
        let scene = world.generate_scene(scene_seed(cfg.seed, "caption", i), &cfg.split, cfg.noise_rate, ScenePool::All)?;
        corpus.captions.push(scene.caption);
    }
    for i in 0..cfg.eval_count {
        let scene = world.generate_scene(scene_seed(cfg.seed, "eval", i), &cfg.split, 0.0, ScenePool::Mixed)?;
        let c = scene.caption;
        corpus.eval.push(DetectionSample { image: c.image, boxes: c.scene_boxes, labels: c.scene_labels });
    }
    Ok(corpus)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RecordKind {
    Detection,
    Caption,
    Eval,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    kind: RecordKind,
    image: String,
    boxes: Vec<BBox>,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default)]
    planted_noise: Option<PlantedNoise>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

/// Writes `manifest.jsonl` plus one PNG per sample under `images/`.
pub fn write_dataset(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    let mut write = |kind: RecordKind, idx: usize, image: &Image, rec: ManifestRecord| -> Result<()> {
        let name = format!("{IMAGE_DIR}/{}_{idx:05}.png", serde_json::to_value(kind).unwrap().as_str().unwrap());
        image.save_png(&dir.join(&name))?;
        let rec = ManifestRecord { image: name, ..rec };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        Ok(())
    };
    for (i, s) in corpus.detection.iter().enumerate() {
        let rec = ManifestRecord {
            kind: RecordKind::Detection,
            image: String::new(),
            boxes: s.boxes.clone(),
            labels: s.labels.clone(),
            caption: None,
            planted_noise: None,
        };
        write(RecordKind::Detection, i, &s.image, rec)?;
    }
    for (i, s) in corpus.captions.iter().enumerate() {
        let rec = ManifestRecord {
            kind: RecordKind::Caption,
            image: String::new(),
            boxes: s.scene_boxes.clone(),
            labels: s.scene_labels.clone(),
            caption: Some(s.caption_text.clone()),
            planted_noise: s.planted_noise.clone(),
        };
        write(RecordKind::Caption, i, &s.image, rec)?;
    }
    for (i, s) in corpus.eval.iter().enumerate() {
        let rec = ManifestRecord {
            kind: RecordKind::Eval,
            image: String::new(),
            boxes: s.boxes.clone(),
            labels: s.labels.clone(),
            caption: None,
            planted_noise: None,
        };
        write(RecordKind::Eval, i, &s.image, rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Corpus> {
    let file = fs::File::open(dir.join(MANIFEST_FILE))?;
    let mut corpus = Corpus::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: n + 1, message };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.boxes.len() != rec.labels.len() {
            return Err(parse_err("boxes and labels differ in length".into()));
        }
        let image = Image::load_png(&dir.join(&rec.image))?;
        match rec.kind {
            RecordKind::Detection => corpus.detection.push(DetectionSample { image, boxes: rec.boxes, labels: rec.labels }),
            RecordKind::Eval => corpus.eval.push(DetectionSample { image, boxes: rec.boxes, labels: rec.labels }),
            RecordKind::Caption => corpus.captions.push(CaptionSample {
                image,
                caption_text: rec.caption.ok_or_else(|| parse_err("caption record without caption".into()))?,
                planted_noise: rec.planted_noise,
                scene_boxes: rec.boxes,
                scene_labels: rec.labels,
            }),
        }
    }
    Ok(corpus)
}
