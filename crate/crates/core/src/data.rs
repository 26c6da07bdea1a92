//! Labeled datasets, few-shot sampling, and the synthetic shift benchmark.
//!
//! The benchmark stands in for an ImageNet-style task: a latent concept world
//! rendered into low-dimensional raw vectors, an ID domain, four shifted
//! domains sharing the label space, and a captioned web-style corpus whose
//! images span all domains.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Matrix;
use crate::retrieval::{load_corpus, Corpus, CorpusRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftTag {
    Id,
    Ood(String),
}

impl ShiftTag {
    pub fn is_ood(&self) -> bool {
        matches!(self, ShiftTag::Ood(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    pub shift: ShiftTag,
    pub class_names: Vec<String>,
    /// One raw input per row.
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        shift: ShiftTag,
        class_names: Vec<String>,
        inputs: Matrix,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            split,
            shift,
            class_names,
            inputs,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.nrows() != self.labels.len() {
            return Err(Error::shape(format!(
                "{}: {} inputs for {} labels",
                self.name,
                self.inputs.nrows(),
                self.labels.len()
            )));
        }
        let k = self.class_names.len();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::arg(format!("{}: label {bad} outside [0, {k})", self.name)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            split: self.split,
            shift: self.shift.clone(),
            class_names: self.class_names.clone(),
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `index<TAB>label<TAB>v0,v1,...` per row.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, (row, y)) in self.inputs.rows().into_iter().zip(&self.labels).enumerate() {
            write!(w, "{i}\t{y}\t")?;
            write_vector(&mut w, row.iter())?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(
        reader: R,
        source: &Path,
        name: &str,
        split: Split,
        shift: ShiftTag,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err(format!("expected 3 fields, got {}", f.len())));
            }
            let y: usize = f[1].parse().map_err(|_| err(format!("bad label {:?}", f[1])))?;
            let v = parse_vector(f[2]).map_err(err)?;
            if let Some(first) = rows.first() {
                if first.len() != v.len() {
                    return Err(err(format!("expected {} values, got {}", first.len(), v.len())));
                }
            }
            rows.push(v);
            labels.push(y);
        }
        let dim = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let inputs = Matrix::from_shape_vec((labels.len(), dim), flat).map_err(|e| Error::shape(e.to_string()))?;
        Self::new(name, split, shift, class_names, inputs, labels)
    }
}

fn write_vector<'a, W: Write>(w: &mut W, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    for (j, v) in values.enumerate() {
        if j > 0 {
            w.write_all(b",")?;
        }
        write!(w, "{v}")?;
    }
    Ok(())
}

fn parse_vector(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect()
}

/// `m` examples per class, drawn without replacement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub shots: usize,
    pub seed: u64,
    /// Dataset indices, one list per class.
    pub indices: Vec<Vec<usize>>,
}

impl FewShotSplit {
    /// All selected indices, class by class.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.indices.iter().flatten().copied().collect()
    }

    pub fn apply(&self, dataset: &LabeledDataset) -> LabeledDataset {
        dataset.subset(&self.flat_indices(), format!("{}_{}shot", dataset.name, self.shots))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn sample_few_shot(dataset: &LabeledDataset, shots: usize, seed: u64) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(Error::arg("shots must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(dataset.num_classes());
    for (k, mut pool) in dataset.class_indices().into_iter().enumerate() {
        if pool.len() < shots {
            return Err(Error::InsufficientData {
                class: dataset.class_names[k].clone(),
                available: pool.len(),
                required: shots,
            });
        }
        pool.shuffle(&mut rng);
        pool.truncate(shots);
        pool.sort_unstable();
        indices.push(pool);
    }
    Ok(FewShotSplit { shots, seed, indices })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Extra isotropic noise.
    Noise,
    /// Rotation of the raw space in random coordinate planes.
    Rotation,
    /// Constant offset of every input.
    MeanShift,
    /// Each class blended toward a fixed confuser class.
    StyleMix,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::Noise,
        ShiftKind::MeanShift,
        ShiftKind::StyleMix,
        ShiftKind::Rotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Noise => "noise",
            ShiftKind::Rotation => "rotation",
            ShiftKind::MeanShift => "mean_shift",
            ShiftKind::StyleMix => "style_mix",
        }
    }

    pub fn default_magnitude(self) -> f64 {
        match self {
            ShiftKind::Noise => 1.0,
            ShiftKind::Rotation => 0.5,
            ShiftKind::MeanShift => 1.0,
            ShiftKind::StyleMix => 0.35,
        }
    }

    fn caption_templates(self) -> &'static [&'static str] {
        match self {
            ShiftKind::Noise => &[
                "a blurry photo of a {}.",
                "a bad photo of a {}.",
                "a grainy picture of the {} at night",
            ],
            ShiftKind::Rotation => &["a rendering of a {}.", "art of the {}.", "a cartoon {} on a poster"],
            ShiftKind::MeanShift => &[
                "a sketch of a {}.",
                "a drawing of a {}.",
                "a pencil sketch of the {} by my kid",
            ],
            ShiftKind::StyleMix => &[
                "a close-up photo of a {}.",
                "a cluttered scene with a {} in it",
                "a {} half hidden behind other things",
            ],
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(ShiftKind::Noise),
            "rotation" => Ok(ShiftKind::Rotation),
            "mean_shift" => Ok(ShiftKind::MeanShift),
            "style_mix" => Ok(ShiftKind::StyleMix),
            other => Err(Error::arg(format!("unknown shift kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

impl ShiftSpec {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

/// Parses `kind` or `kind:magnitude`.
impl FromStr for ShiftSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, mag) = match s.split_once(':') {
            Some((k, m)) => {
                let kind: ShiftKind = k.parse()?;
                let mag = m
                    .parse::<f64>()
                    .map_err(|_| Error::arg(format!("bad magnitude in {s:?}")))?;
                (kind, mag)
            }
            None => {
                let kind: ShiftKind = s.parse()?;
                (kind, kind.default_magnitude())
            }
        };
        if !(mag >= 0.0 && mag.is_finite()) {
            return Err(Error::arg(format!("magnitude in {s:?} must be >= 0")));
        }
        Ok(ShiftSpec { kind, magnitude: mag })
    }
}

const CONCEPT_NAMES: &[&str] = &[
    "dog",
    "cat",
    "lemon",
    "umbrella",
    "goldfish",
    "tractor",
    "violin",
    "pelican",
    "teddy bear",
    "school bus",
    "volcano",
    "strawberry",
    "castle",
    "penguin",
    "fire truck",
    "mushroom",
    "guitar",
    "zebra",
    "lighthouse",
    "pineapple",
    "kangaroo",
    "canoe",
    "cactus",
    "owl",
];

const PHOTO_TEMPLATES: &[&str] = &[
    "a photo of a {}.",
    "a photo of the large {}.",
    "a photo of the small {}.",
    "my {} on a sunny day",
];

const DISTRACTOR_CAPTIONS: &[&str] = &[
    "view from the hotel window",
    "sunset over the bay",
    "my new shoes",
    "a bowl of soup",
    "screenshot of a spreadsheet",
    "the concatenate function explained",
    "wedding table decorations",
    "an empty parking lot",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub num_classes: usize,
    pub raw_dim: usize,
    pub latent_dim: usize,
    /// ID training pool per class; validation is 20% of it.
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub shifts: Vec<ShiftSpec>,
    pub corpus_size: usize,
    /// Non-task concepts that only appear in the corpus.
    pub extra_concepts: usize,
    pub within_class_std: f64,
    pub sensor_noise: f64,
    /// Fraction of class-naming captions whose image shows another concept.
    pub caption_noise: f64,
    /// Fraction of captions that name no concept.
    pub distractor_rate: f64,
    /// Probability a corpus image is drawn in the ID ("photo") domain.
    pub corpus_photo_rate: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            raw_dim: 32,
            latent_dim: 16,
            n_per_class: 100,
            n_test_per_class: 100,
            shifts: ShiftKind::ALL
                .iter()
                .map(|&kind| ShiftSpec {
                    kind,
                    magnitude: kind.default_magnitude(),
                })
                .collect(),
            corpus_size: 4000,
            extra_concepts: 10,
            within_class_std: 1.0,
            sensor_noise: 0.1,
            caption_noise: 0.1,
            distractor_rate: 0.08,
            corpus_photo_rate: 0.4,
            seed: 0,
        }
    }
}

/// Raw payloads referenced by corpus records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PayloadStore {
    index: HashMap<String, usize>,
    refs: Vec<String>,
    data: Vec<Array1<f64>>,
}

impl PayloadStore {
    pub fn insert(&mut self, payload_ref: String, value: Array1<f64>) -> Result<()> {
        if self.index.contains_key(&payload_ref) {
            return Err(Error::arg(format!("duplicate payload {payload_ref:?}")));
        }
        self.index.insert(payload_ref.clone(), self.data.len());
        self.refs.push(payload_ref);
        self.data.push(value);
        Ok(())
    }

    pub fn get(&self, payload_ref: &str) -> Option<&Array1<f64>> {
        self.index.get(payload_ref).map(|&i| &self.data[i])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Stacks the referenced payloads into rows.
    pub fn gather<S: AsRef<str>>(&self, refs: &[S]) -> Result<Matrix> {
        let dim = self.data.first().map_or(0, Array1::len);
        let mut out = Matrix::zeros((refs.len(), dim));
        for (mut row, r) in out.rows_mut().into_iter().zip(refs) {
            let v = self
                .get(r.as_ref())
                .ok_or_else(|| Error::arg(format!("unknown payload {:?}", r.as_ref())))?;
            row.assign(v);
        }
        Ok(out)
    }

    /// `payload_ref<TAB>v0,v1,...` per line, insertion order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (r, v) in self.refs.iter().zip(&self.data) {
            write!(w, "{r}\t")?;
            write_vector(&mut w, v.iter())?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R, source: &Path) -> Result<Self> {
        let mut store = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                message,
            };
            let (r, v) = line
                .split_once('\t')
                .ok_or_else(|| err("expected payload_ref<TAB>values".into()))?;
            let v = parse_vector(v).map_err(err)?;
            store
                .insert(r.to_string(), Array1::from(v))
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(store)
    }
}

/// ID splits, OOD test sets, and the captioned corpus of one task.
#[derive(Clone, Debug)]
pub struct ShiftBenchmark {
    pub config: BenchmarkConfig,
    pub class_names: Vec<String>,
    pub id_train: LabeledDataset,
    pub id_val: LabeledDataset,
    pub id_test: LabeledDataset,
    pub ood: Vec<LabeledDataset>,
    pub corpus: Corpus,
    pub payloads: PayloadStore,
}

struct World {
    prototypes: Matrix,
    render: Matrix,
    mean_shift: Array1<f64>,
    rotation_pairs: Vec<(usize, usize)>,
    num_classes: usize,
    within_std: f64,
    sensor_noise: f64,
}

impl World {
    fn sample_latent(&self, rng: &mut ChaCha8Rng, concept: usize) -> Array1<f64> {
        let proto = self.prototypes.row(concept);
        proto.mapv(|m| m + self.within_std * rng.sample::<f64, _>(StandardNormal))
    }

    fn render_clean(&self, rng: &mut ChaCha8Rng, concept: usize) -> Array1<f64> {
        let z = self.sample_latent(rng, concept);
        let x = self.render.dot(&z);
        x.mapv(|v| v + self.sensor_noise * rng.sample::<f64, _>(StandardNormal))
    }

    fn confuser(&self, concept: usize) -> usize {
        if concept < self.num_classes {
            (concept + 1) % self.num_classes
        } else {
            concept
        }
    }

    fn render(&self, rng: &mut ChaCha8Rng, concept: usize, shift: Option<ShiftSpec>) -> Array1<f64> {
        let mut x = self.render_clean(rng, concept);
        let Some(spec) = shift else { return x };
        let m = spec.magnitude;
        match spec.kind {
            ShiftKind::Noise => {
                x.mapv_inplace(|v| v + m * rng.sample::<f64, _>(StandardNormal));
            }
            ShiftKind::MeanShift => {
                x.scaled_add(m, &self.mean_shift);
            }
            ShiftKind::Rotation => {
                let angle = m * std::f64::consts::FRAC_PI_2;
                let (s, c) = angle.sin_cos();
                for &(a, b) in &self.rotation_pairs {
                    let (xa, xb) = (x[a], x[b]);
                    x[a] = c * xa - s * xb;
                    x[b] = s * xa + c * xb;
                }
            }
            ShiftKind::StyleMix => {
                let other = self.render_clean(rng, self.confuser(concept));
                x = x * (1.0 - m) + other * m;
            }
        }
        x
    }
}

fn concept_names(total: usize) -> Vec<String> {
    (0..total)
        .map(|i| match CONCEPT_NAMES.get(i) {
            Some(n) => n.to_string(),
            None => format!("concept{i}"),
        })
        .collect()
}

/// Generates the full benchmark deterministically from `config.seed`.
pub fn generate_shift_benchmark(config: &BenchmarkConfig) -> Result<ShiftBenchmark> {
    if config.num_classes < 2 {
        return Err(Error::arg("benchmark needs at least 2 classes"));
    }
    if config.shifts.is_empty() {
        return Err(Error::arg("at least one shift kind is required"));
    }
    if config.raw_dim < 2 || config.latent_dim == 0 || config.n_per_class == 0 {
        return Err(Error::arg("raw_dim >= 2, latent_dim >= 1, n_per_class >= 1 required"));
    }
    let mut names = std::collections::HashSet::new();
    for s in &config.shifts {
        if !names.insert(s.name()) {
            return Err(Error::arg(format!("shift kind {} listed twice", s.name())));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total_concepts = config.num_classes + config.extra_concepts;
    let all_names = concept_names(total_concepts);
    let class_names: Vec<String> = all_names[..config.num_classes].to_vec();

    let normal = |rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64| {
        Matrix::from_shape_simple_fn((r, c), || std * rng.sample::<f64, _>(StandardNormal))
    };
    let prototypes = normal(&mut rng, total_concepts, config.latent_dim, 1.0);
    let render = normal(
        &mut rng,
        config.raw_dim,
        config.latent_dim,
        1.0 / (config.latent_dim as f64).sqrt(),
    );
    let mean_shift = Array1::from_shape_simple_fn(config.raw_dim, || rng.sample::<f64, _>(StandardNormal));
    let mut perm: Vec<usize> = (0..config.raw_dim).collect();
    perm.shuffle(&mut rng);
    let rotation_pairs = perm.chunks_exact(2).map(|p| (p[0], p[1])).collect();
    let world = World {
        prototypes,
        render,
        mean_shift,
        rotation_pairs,
        num_classes: config.num_classes,
        within_std: config.within_class_std,
        sensor_noise: config.sensor_noise,
    };

    let make = |rng: &mut ChaCha8Rng, per_class: usize, shift: Option<ShiftSpec>, name: &str, split, tag| {
        let k = config.num_classes;
        let mut inputs = Matrix::zeros((per_class * k, config.raw_dim));
        let mut labels = Vec::with_capacity(per_class * k);
        for c in 0..k {
            for _ in 0..per_class {
                let row = labels.len();
                inputs.row_mut(row).assign(&world.render(rng, c, shift));
                labels.push(c);
            }
        }
        LabeledDataset::new(name, split, tag, class_names.clone(), inputs, labels)
    };

    let val_per_class = (config.n_per_class as f64 * 0.2).ceil() as usize;
    let id_train = make(
        &mut rng,
        config.n_per_class,
        None,
        "id_train",
        Split::Train,
        ShiftTag::Id,
    )?;
    let id_val = make(&mut rng, val_per_class.max(1), None, "id_val", Split::Val, ShiftTag::Id)?;
    let id_test = make(
        &mut rng,
        config.n_test_per_class,
        None,
        "id_test",
        Split::Test,
        ShiftTag::Id,
    )?;
    let mut ood = Vec::with_capacity(config.shifts.len());
    for spec in &config.shifts {
        let name = format!("ood_{}", spec.name());
        ood.push(make(
            &mut rng,
            config.n_test_per_class,
            Some(*spec),
            &name,
            Split::Test,
            ShiftTag::Ood(spec.name().to_string()),
        )?);
    }

    let (corpus, payloads) = generate_corpus(&mut rng, &world, config, &all_names)?;
    Ok(ShiftBenchmark {
        config: config.clone(),
        class_names,
        id_train,
        id_val,
        id_test,
        ood,
        corpus,
        payloads,
    })
}

fn generate_corpus(
    rng: &mut ChaCha8Rng,
    world: &World,
    config: &BenchmarkConfig,
    names: &[String],
) -> Result<(Corpus, PayloadStore)> {
    let k = config.num_classes;
    let total = names.len();
    // Long-tailed concept frequencies.
    let weights: Vec<f64> = (0..total)
        .map(|c| {
            let base = 1.0 / ((c % k.max(1)) as f64 + 1.0).sqrt();
            if c < k {
                base
            } else {
                0.6 * base
            }
        })
        .collect();
    let weight_sum: f64 = weights.iter().sum();
    let pick_concept = |rng: &mut ChaCha8Rng| {
        let mut u = rng.random::<f64>() * weight_sum;
        for (c, w) in weights.iter().enumerate() {
            if u < *w {
                return c;
            }
            u -= w;
        }
        total - 1
    };

    let mut records = Vec::with_capacity(config.corpus_size);
    let mut payloads = PayloadStore::default();
    for i in 0..config.corpus_size {
        let id = format!("c{i:06}");
        let payload_ref = format!("p{i:06}");
        let named = pick_concept(rng);
        let shift = if rng.random::<f64>() < config.corpus_photo_rate {
            None
        } else {
            let spec = config.shifts[rng.random_range(0..config.shifts.len())];
            let scale = rng.random_range(0.3..1.3);
            Some(ShiftSpec {
                kind: spec.kind,
                magnitude: spec.magnitude * scale,
            })
        };
        let caption = if rng.random::<f64>() < config.distractor_rate {
            DISTRACTOR_CAPTIONS[rng.random_range(0..DISTRACTOR_CAPTIONS.len())].to_string()
        } else {
            let templates = match shift {
                None => PHOTO_TEMPLATES,
                Some(s) => s.kind.caption_templates(),
            };
            templates[rng.random_range(0..templates.len())].replacen("{}", &names[named], 1)
        };
        let shown = if rng.random::<f64>() < config.caption_noise {
            rng.random_range(0..total)
        } else {
            named
        };
        payloads.insert(payload_ref.clone(), world.render(rng, shown, shift))?;
        records.push(CorpusRecord {
            id,
            caption,
            payload_ref,
        });
    }
    Ok((Corpus::from_records(records)?, payloads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TaskManifest {
    format_version: u32,
    class_names: Vec<String>,
    ood_sets: Vec<String>,
    config: BenchmarkConfig,
}

const TASK_FORMAT_VERSION: u32 = 1;

impl ShiftBenchmark {
    pub fn ood_sets(&self) -> &[LabeledDataset] {
        &self.ood
    }

    /// Writes `task.json`, `classes.txt`, `<split>/data.tsv`, `corpus.tsv`
    /// and `payloads.tsv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = TaskManifest {
            format_version: TASK_FORMAT_VERSION,
            class_names: self.class_names.clone(),
            ood_sets: self.ood.iter().map(|d| d.name.clone()).collect(),
            config: self.config.clone(),
        };
        fs::write(dir.join("task.json"), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join("classes.txt"), self.class_names.join("\n") + "\n")?;
        for ds in self.all_datasets() {
            let sub = dir.join(&ds.name);
            fs::create_dir_all(&sub)?;
            let mut w = BufWriter::new(File::create(sub.join("data.tsv"))?);
            ds.write_tsv(&mut w)?;
            w.flush()?;
        }
        self.corpus.save(&dir.join("corpus.tsv"))?;
        let mut w = BufWriter::new(File::create(dir.join("payloads.tsv"))?);
        self.payloads.write_tsv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TaskManifest = serde_json::from_str(&fs::read_to_string(dir.join("task.json"))?)?;
        if manifest.format_version != TASK_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported task format {}",
                manifest.format_version
            )));
        }
        let read = |name: &str, split, shift| -> Result<LabeledDataset> {
            let path: PathBuf = dir.join(name).join("data.tsv");
            LabeledDataset::read_tsv(
                BufReader::new(File::open(&path)?),
                &path,
                name,
                split,
                shift,
                manifest.class_names.clone(),
            )
        };
        let id_train = read("id_train", Split::Train, ShiftTag::Id)?;
        let id_val = read("id_val", Split::Val, ShiftTag::Id)?;
        let id_test = read("id_test", Split::Test, ShiftTag::Id)?;
        let ood = manifest
            .ood_sets
            .iter()
            .map(|n| {
                let tag = n.strip_prefix("ood_").unwrap_or(n).to_string();
                read(n, Split::Test, ShiftTag::Ood(tag))
            })
            .collect::<Result<Vec<_>>>()?;
        let corpus = load_corpus(&dir.join("corpus.tsv"))?;
        let pp = dir.join("payloads.tsv");
        let payloads = PayloadStore::read_tsv(BufReader::new(File::open(&pp)?), &pp)?;
        Ok(Self {
            config: manifest.config,
            class_names: manifest.class_names,
            id_train,
            id_val,
            id_test,
            ood,
            corpus,
            payloads,
        })
    }

    pub fn all_datasets(&self) -> Vec<&LabeledDataset> {
        let mut v = vec![&self.id_train, &self.id_val, &self.id_test];
        v.extend(self.ood.iter());
        v
    }

    /// ID test followed by every OOD test set.
    pub fn test_sets(&self) -> Vec<&LabeledDataset> {
        let mut v = vec![&self.id_test];
        v.extend(self.ood.iter());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkConfig {
        BenchmarkConfig {
            num_classes: 3,
            raw_dim: 6,
            latent_dim: 4,
            n_per_class: 10,
            n_test_per_class: 5,
            corpus_size: 50,
            extra_concepts: 2,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn few_shot_full_class_and_determinism() {
        let b = generate_shift_benchmark(&small()).unwrap();
        let all = sample_few_shot(&b.id_train, 10, 1).unwrap();
        assert_eq!(all.indices[0], (0..10).collect::<Vec<_>>());
        let a = sample_few_shot(&b.id_train, 4, 7).unwrap();
        let again = sample_few_shot(&b.id_train, 4, 7).unwrap();
        assert_eq!(a, again);
        assert!(a.indices.iter().all(|c| c.len() == 4));
        let sub = a.apply(&b.id_train);
        assert_eq!(sub.len(), 12);
    }

    #[test]
    fn few_shot_names_starved_class() {
        let b = generate_shift_benchmark(&small()).unwrap();
        match sample_few_shot(&b.id_train, 11, 0) {
            Err(Error::InsufficientData { class, .. }) => assert_eq!(class, "dog"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shift_specs_parse() {
        assert_eq!(
            "noise:0.5".parse::<ShiftSpec>().unwrap(),
            ShiftSpec {
                kind: ShiftKind::Noise,
                magnitude: 0.5
            }
        );
        assert!("blur".parse::<ShiftSpec>().is_err());
        assert!("noise:-1".parse::<ShiftSpec>().is_err());
    }

    #[test]
    fn benchmark_shapes_and_label_space() {
        let b = generate_shift_benchmark(&small()).unwrap();
        assert_eq!(b.ood.len(), 4);
        assert_eq!(b.id_val.len(), 3 * 2);
        for ds in b.all_datasets() {
            assert_eq!(ds.class_names, b.class_names);
            assert_eq!(ds.inputs.ncols(), 6);
        }
        assert_eq!(b.corpus.len(), 50);
        assert_eq!(b.payloads.len(), 50);
    }

    #[test]
    fn benchmark_is_deterministic_and_round_trips() {
        let a = generate_shift_benchmark(&small()).unwrap();
        let b = generate_shift_benchmark(&small()).unwrap();
        assert_eq!(a.id_train, b.id_train);
        assert_eq!(a.ood, b.ood);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let loaded = ShiftBenchmark::load(dir.path()).unwrap();
        assert_eq!(loaded.id_test, a.id_test);
        assert_eq!(loaded.ood, a.ood);
        assert_eq!(loaded.corpus.records(), a.corpus.records());
        assert_eq!(loaded.payloads, a.payloads);
    }

    #[test]
    fn duplicate_or_missing_shift_rejected() {
        let mut c = small();
        c.shifts.clear();
        assert!(generate_shift_benchmark(&c).is_err());
        let mut c = small();
        c.shifts = vec!["noise".parse().unwrap(), "noise:2".parse().unwrap()];
        assert!(generate_shift_benchmark(&c).is_err());
    }
}
