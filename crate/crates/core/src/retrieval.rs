//! Caption-corpus retrieval: whole-word string matching per class, then
//! text-to-text similarity ranking with a per-class cap.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{render_template, tokenize, DualEncoderModel, Matrix};

/// Per-class cap used for the full-scale recipe.
pub const DEFAULT_CAP: usize = 500;

/// Query text the captions are ranked against.
pub const DEFAULT_REFERENCE_TEMPLATE: &str = "a photo of a {}.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub caption: String,
    pub payload_ref: String,
}

/// Immutable, ordered caption corpus.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    records: Vec<CorpusRecord>,
    tokens: Vec<Vec<String>>,
}

impl Corpus {
    pub fn from_records(records: Vec<CorpusRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            validate_record(r).map_err(|m| Error::arg(format!("record {i}: {m}")))?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::arg(format!("record {i}: duplicate id {:?}", r.id)));
            }
        }
        let tokens = records.iter().map(|r| tokenize(&r.caption)).collect();
        Ok(Self { records, tokens })
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            writeln!(w, "{}\t{}\t{}", r.id, r.caption, r.payload_ref)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_tsv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn validate_record(r: &CorpusRecord) -> std::result::Result<(), String> {
    if r.id.is_empty() {
        return Err("empty id".into());
    }
    if r.caption.trim().is_empty() {
        return Err("empty caption".into());
    }
    for field in [&r.id, &r.caption, &r.payload_ref] {
        if field.contains(['\t', '\n', '\r']) {
            return Err("field contains a tab or newline".into());
        }
    }
    Ok(())
}

/// Reads `id<TAB>caption<TAB>payload_ref` lines. Blank lines are skipped;
/// any other malformed line fails with its 1-based line number.
pub fn ingest_corpus<R: BufRead>(reader: R, source: &Path) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let parse_err = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: lineno,
            message,
        };
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let record = CorpusRecord {
            id: fields[0].to_string(),
            caption: fields[1].to_string(),
            payload_ref: fields[2].to_string(),
        };
        validate_record(&record).map_err(parse_err)?;
        if !seen.insert(record.id.clone()) {
            return Err(parse_err(format!("duplicate id {:?}", record.id)));
        }
        records.push(record);
    }
    Corpus::from_records(records)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    ingest_corpus(BufReader::new(File::open(path)?), path)
}

fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

/// Indices (corpus order) of records whose caption contains `class_name` or a
/// synonym as a case-insensitive whole-word phrase.
pub fn match_class<S: AsRef<str>>(corpus: &Corpus, class_name: &str, synonyms: &[S]) -> Result<Vec<usize>> {
    let phrases: Vec<Vec<String>> = std::iter::once(class_name)
        .chain(synonyms.iter().map(AsRef::as_ref))
        .map(tokenize)
        .filter(|p| !p.is_empty())
        .collect();
    if tokenize(class_name).is_empty() {
        return Err(Error::arg(format!("class name {class_name:?} has no words")));
    }
    Ok(corpus
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, toks)| phrases.iter().any(|p| contains_phrase(toks, p)))
        .map(|(i, _)| i)
        .collect())
}

/// Keeps the `cap` candidates most similar to the class prompt embedding.
///
/// `caption_embeddings` rows are indexed by corpus position. Ties keep corpus
/// order. Returns `(corpus index, cosine similarity)` sorted by descending
/// similarity.
pub fn rank_and_cap(
    candidates: &[usize],
    class_prompt_embedding: ndarray::ArrayView1<f64>,
    caption_embeddings: &HashMap<usize, ndarray::Array1<f64>>,
    cap: Option<usize>,
) -> Result<Vec<(usize, f64)>> {
    if cap == Some(0) {
        return Err(Error::arg("cap must be >= 1"));
    }
    let mut scored = candidates
        .iter()
        .map(|&i| {
            caption_embeddings
                .get(&i)
                .map(|e| (i, e.dot(&class_prompt_embedding)))
                .ok_or_else(|| Error::arg(format!("no caption embedding for record {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if let Some(cap) = cap {
        scored.truncate(cap);
    }
    Ok(scored)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEntry {
    pub record: CorpusRecord,
    pub label: usize,
    pub class_name: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class_name: String,
    /// Records whose caption matched, before the cap.
    pub matched: usize,
    /// Records kept after the cap.
    pub retained: usize,
}

/// Retrieved examples grouped by class (class order), each group sorted by
/// descending similarity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDataset {
    pub entries: Vec<RetrievedEntry>,
    pub per_class_counts: Vec<ClassCount>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOptions {
    /// `None` keeps every match.
    pub cap: Option<usize>,
    pub reference_template: String,
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self {
            cap: Some(DEFAULT_CAP),
            reference_template: DEFAULT_REFERENCE_TEMPLATE.to_string(),
            synonyms: BTreeMap::new(),
        }
    }
}

const EMBED_CHUNK: usize = 256;

fn embed_captions(
    corpus: &Corpus,
    indices: &BTreeSet<usize>,
    model: &DualEncoderModel,
) -> Result<HashMap<usize, ndarray::Array1<f64>>> {
    let order: Vec<usize> = indices.iter().copied().collect();
    let mut out = HashMap::with_capacity(order.len());
    for chunk in order.chunks(EMBED_CHUNK) {
        let captions: Vec<&str> = chunk.iter().map(|&i| corpus.records[i].caption.as_str()).collect();
        let emb: Matrix = model.encode_text(&captions)?;
        for (&i, row) in chunk.iter().zip(emb.rows()) {
            out.insert(i, row.to_owned());
        }
    }
    Ok(out)
}

pub fn retrieve_all<S: AsRef<str>>(
    corpus: &Corpus,
    class_names: &[S],
    model: &DualEncoderModel,
    cap: Option<usize>,
) -> Result<RetrievedDataset> {
    let options = RetrievalOptions {
        cap,
        ..RetrievalOptions::default()
    };
    retrieve_all_with(corpus, class_names, model, &options)
}

/// Union over classes of `rank_and_cap(match_class(..))`. A class without
/// matches is reported with zero counts.
pub fn retrieve_all_with<S: AsRef<str>>(
    corpus: &Corpus,
    class_names: &[S],
    model: &DualEncoderModel,
    options: &RetrievalOptions,
) -> Result<RetrievedDataset> {
    if options.cap == Some(0) {
        return Err(Error::arg("cap must be >= 1"));
    }
    let mut unique = HashSet::new();
    for name in class_names {
        if !unique.insert(name.as_ref().to_lowercase()) {
            return Err(Error::arg(format!("duplicate class name {:?}", name.as_ref())));
        }
    }
    let no_synonyms = Vec::new();
    let matches = class_names
        .iter()
        .map(|name| {
            let syn = options.synonyms.get(name.as_ref()).unwrap_or(&no_synonyms);
            match_class(corpus, name.as_ref(), syn)
        })
        .collect::<Result<Vec<_>>>()?;
    let all: BTreeSet<usize> = matches.iter().flatten().copied().collect();
    let caption_emb = embed_captions(corpus, &all, model)?;

    let mut dataset = RetrievedDataset::default();
    for (label, (name, candidates)) in class_names.iter().zip(&matches).enumerate() {
        let name = name.as_ref();
        let query = render_template(&options.reference_template, name)?;
        let query_emb = model.encode_text(&[query])?;
        let ranked = rank_and_cap(candidates, query_emb.row(0), &caption_emb, options.cap)?;
        dataset.per_class_counts.push(ClassCount {
            class_name: name.to_string(),
            matched: candidates.len(),
            retained: ranked.len(),
        });
        for (idx, score) in ranked {
            dataset.entries.push(RetrievedEntry {
                record: corpus.records[idx].clone(),
                label,
                class_name: name.to_string(),
                score,
            });
        }
    }
    Ok(dataset)
}

impl RetrievedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `id<TAB>caption<TAB>payload_ref<TAB>class<TAB>score` per entry; the
    /// score is the shortest decimal that round-trips to the same `f64`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                e.record.id, e.record.caption, e.record.payload_ref, e.class_name, e.score
            )?;
        }
        Ok(())
    }

    pub fn to_tsv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("fields are UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_tsv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Parses the TSV form back; labels are positions in `class_names`.
    pub fn read_tsv<R: BufRead, S: AsRef<str>>(reader: R, source: &Path, class_names: &[S]) -> Result<Self> {
        let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_ref(), i)).collect();
        let mut dataset = RetrievedDataset {
            entries: Vec::new(),
            per_class_counts: class_names
                .iter()
                .map(|c| ClassCount {
                    class_name: c.as_ref().to_string(),
                    matched: 0,
                    retained: 0,
                })
                .collect(),
        };
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: PathBuf::from(source),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, got {}", f.len())));
            }
            let label = *index
                .get(f[3])
                .ok_or_else(|| err(format!("unknown class {:?}", f[3])))?;
            let score: f64 = f[4].parse().map_err(|_| err(format!("bad score {:?}", f[4])))?;
            dataset.per_class_counts[label].retained += 1;
            dataset.per_class_counts[label].matched += 1;
            dataset.entries.push(RetrievedEntry {
                record: CorpusRecord {
                    id: f[0].into(),
                    caption: f[1].into(),
                    payload_ref: f[2].into(),
                },
                label,
                class_name: f[3].into(),
                score,
            });
        }
        Ok(dataset)
    }

    pub fn load<S: AsRef<str>>(path: &Path, class_names: &[S]) -> Result<Self> {
        Self::read_tsv(BufReader::new(File::open(path)?), path, class_names)
    }

    /// Long-tail report: `class<TAB>matched<TAB>retained`, most retained first.
    pub fn histogram(&self) -> String {
        let mut rows = self.per_class_counts.clone();
        rows.sort_by(|a, b| b.retained.cmp(&a.retained).then(b.matched.cmp(&a.matched)));
        let mut out = String::from("class\tmatched\tretained\n");
        for r in rows {
            out.push_str(&format!("{}\t{}\t{}\n", r.class_name, r.matched, r.retained));
        }
        out
    }
}
