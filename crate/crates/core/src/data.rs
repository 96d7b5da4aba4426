//! Datasets: documents of page images, question/answer samples, the
//! MP-DocVQA annotation format and a deterministic synthetic corpus.
//!
//! # On-disk layout
//!
//! A split directory holds `annotations.json` and an `images/` directory.
//! The annotation file follows the public MP-DocVQA release:
//!
//! ```json
//! {
//!   "dataset_name": "synthetic-kv",
//!   "dataset_split": "train",
//!   "dataset_version": "1.0",
//!   "data": [
//!     {
//!       "questionId": 17,
//!       "question": "what is the value of AB?",
//!       "doc_id": "doc0003",
//!       "page_ids": ["doc0003_p0", "doc0003_p1"],
//!       "answers": ["42"],
//!       "answer_page_idx": 1
//!     }
//!   ]
//! }
//! ```
//!
//! Page `id` is read from `images/<id>.pgm` (binary or ASCII PGM; `.ppm`,
//! `.png` and `.jpg` are also accepted and converted to gray by averaging
//! the channels). Unknown record fields are ignored so the original release
//! files load unchanged.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render_text, GlyphFont, RasterImage};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";
const IMAGE_EXTENSIONS: [&str; 5] = ["pgm", "ppm", "png", "jpg", "jpeg"];

/// Where the pixels of a page come from.
#[derive(Debug, Clone)]
pub enum PageSource {
    File(PathBuf),
    Memory(Arc<RasterImage>),
}

/// A page of a document, decoded on demand.
#[derive(Debug, Clone)]
pub struct PageRef {
    id: String,
    source: PageSource,
}

impl PageRef {
    pub fn file(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        PageRef {
            id: id.into(),
            source: PageSource::File(path.into()),
        }
    }

    pub fn memory(id: impl Into<String>, image: RasterImage) -> Self {
        PageRef {
            id: id.into(),
            source: PageSource::Memory(Arc::new(image)),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> &PageSource {
        &self.source
    }

    /// Decodes the page. Held pages are shared, file pages are read anew.
    pub fn load(&self) -> Result<Arc<RasterImage>> {
        match &self.source {
            PageSource::Memory(img) => Ok(Arc::clone(img)),
            PageSource::File(path) => read_gray_image(path).map(Arc::new).map_err(|message| Error::Data {
                page: self.id.clone(),
                message,
            }),
        }
    }
}

/// Ordered pages of one document.
#[derive(Debug, Clone)]
pub struct Document {
    id: String,
    pages: Vec<PageRef>,
}

impl Document {
    pub fn new(id: impl Into<String>, pages: Vec<PageRef>) -> Result<Self> {
        let id = id.into();
        if pages.is_empty() {
            return Err(Error::Contract(format!("document `{id}` has no pages")));
        }
        Ok(Document { id, pages })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pages(&self) -> &[PageRef] {
        &self.pages
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn page_ids(&self) -> Vec<String> {
        self.pages.iter().map(|p| p.id.clone()).collect()
    }
}

/// One question about a document with its answers and evidence page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub question_id: String,
    pub question: String,
    pub doc_id: String,
    pub answers: Vec<String>,
    pub answer_page_idx: usize,
}

/// A split: questions plus the documents they refer to.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    split: String,
    documents: Vec<Document>,
    index: HashMap<String, usize>,
    samples: Vec<QASample>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        documents: Vec<Document>,
        samples: Vec<QASample>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            if index.insert(d.id.clone(), i).is_some() {
                return Err(Error::Contract(format!("document `{}` listed twice", d.id)));
            }
        }
        for s in &samples {
            let doc = index
                .get(&s.doc_id)
                .map(|&i| &documents[i])
                .ok_or_else(|| Error::Contract(format!("question {} refers to unknown document `{}`", s.question_id, s.doc_id)))?;
            if s.answer_page_idx >= doc.page_count() {
                return Err(Error::Contract(format!(
                    "question {} names page {} of a {}-page document",
                    s.question_id,
                    s.answer_page_idx,
                    doc.page_count()
                )));
            }
            if s.answers.is_empty() {
                return Err(Error::Contract(format!("question {} has no answers", s.question_id)));
            }
        }
        Ok(Dataset {
            name: name.into(),
            split: split.into(),
            documents,
            index,
            samples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn samples(&self) -> &[QASample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.index.get(doc_id).map(|&i| &self.documents[i])
    }

    /// Document of `sample`; always present by construction.
    pub fn document_of(&self, sample: &QASample) -> &Document {
        &self.documents[self.index[&sample.doc_id]]
    }

    /// Number of documents per page count.
    pub fn page_histogram(&self) -> BTreeMap<usize, usize> {
        page_histogram(self.documents.iter().map(Document::page_count))
    }
}

/// Count of documents per page length.
pub fn page_histogram(lengths: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for l in lengths {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}

// ---------------------------------------------------------------------------
// Images

/// Decodes an image file to 8-bit gray. Multi-channel images are converted
/// by averaging the colour channels; deeper samples are scaled to 8 bits.
pub fn read_gray_image(path: &Path) -> std::result::Result<RasterImage, String> {
    let img = image::ImageReader::open(path)
        .map_err(|e| format!("cannot open {}: {e}", path.display()))?
        .with_guessed_format()
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?
        .decode()
        .map_err(|e| format!("cannot decode {}: {e}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| ((p[0] as u16 + p[1] as u16 + p[2] as u16 + 1) / 3) as u8)
            .collect(),
    };
    RasterImage::from_pixels(w, h, pixels).ok_or_else(|| format!("{} has no pixels", path.display()))
}

/// Writes `img` as a binary (P5) PGM file.
pub fn write_pgm(img: &RasterImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(img.pixels(), img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn resolve_image(images_dir: &Path, page_id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| images_dir.join(format!("{page_id}.{ext}")))
        .find(|p| p.is_file())
}

// ---------------------------------------------------------------------------
// Annotation format

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile<R> {
    #[serde(default)]
    dataset_name: String,
    #[serde(default)]
    dataset_split: String,
    #[serde(default)]
    dataset_version: String,
    data: Vec<R>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum QuestionId {
    Number(u64),
    Text(String),
}

impl QuestionId {
    fn into_string(self) -> String {
        match self {
            QuestionId::Number(n) => n.to_string(),
            QuestionId::Text(s) => s,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    #[serde(rename = "questionId")]
    question_id: QuestionId,
    question: String,
    doc_id: String,
    page_ids: Vec<String>,
    answers: Vec<String>,
    answer_page_idx: usize,
}

/// Loads an MP-DocVQA style annotation file, resolving page ids against
/// `images_dir`. Pixels are decoded lazily when a page is used.
pub fn load_mpdocvqa(annotations_path: &Path, images_dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(annotations_path).map_err(|e| Error::io(annotations_path, e))?;
    let top: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: None,
        message: e.to_string(),
    })?;
    let header = |key: &str| top.get(key).and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let (name, split) = (header("dataset_name"), header("dataset_split"));
    let records = top.get("data").and_then(|d| d.as_array()).ok_or_else(|| Error::Parse {
        record: None,
        message: "missing `data` array".into(),
    })?;

    let mut documents: Vec<Document> = Vec::new();
    let mut doc_index: HashMap<String, usize> = HashMap::new();
    let mut samples = Vec::with_capacity(records.len());
    for (i, raw) in records.iter().enumerate() {
        let parse_err = |message: String| Error::Parse {
            record: Some(i),
            message,
        };
        let rec = AnnotationRecord::deserialize(raw).map_err(|e| parse_err(e.to_string()))?;
        if rec.page_ids.is_empty() {
            return Err(parse_err("empty `page_ids`".into()));
        }
        if rec.answers.is_empty() {
            return Err(parse_err("empty `answers`".into()));
        }
        if rec.answer_page_idx >= rec.page_ids.len() {
            return Err(parse_err(format!(
                "answer_page_idx {} out of range for {} pages",
                rec.answer_page_idx,
                rec.page_ids.len()
            )));
        }
        match doc_index.get(&rec.doc_id) {
            Some(&d) => {
                if documents[d].pages.iter().map(PageRef::id).ne(rec.page_ids.iter().map(String::as_str)) {
                    return Err(parse_err(format!("page list of `{}` differs from an earlier record", rec.doc_id)));
                }
            }
            None => {
                let pages = rec
                    .page_ids
                    .iter()
                    .map(|pid| {
                        resolve_image(images_dir, pid)
                            .map(|path| PageRef::file(pid.clone(), path))
                            .ok_or_else(|| Error::Data {
                                page: pid.clone(),
                                message: format!("no image found in {}", images_dir.display()),
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                doc_index.insert(rec.doc_id.clone(), documents.len());
                documents.push(Document::new(rec.doc_id.clone(), pages)?);
            }
        }
        samples.push(QASample {
            question_id: rec.question_id.into_string(),
            question: rec.question,
            doc_id: rec.doc_id,
            answers: rec.answers,
            answer_page_idx: rec.answer_page_idx,
        });
    }
    Dataset::new(name, split, documents, samples)
}

/// Loads a split directory (`annotations.json` + `images/`).
pub fn load_split_dir(dir: &Path) -> Result<Dataset> {
    load_mpdocvqa(&dir.join(ANNOTATIONS_FILE), &dir.join(IMAGES_DIR))
}

/// Writes `dataset` to `dir` in exactly the loader's format. Question ids
/// made of digits are written as numbers, as in the public release.
pub fn write_split_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for doc in &dataset.documents {
        for page in &doc.pages {
            let img = page.load()?;
            write_pgm(&img, &images.join(format!("{}.pgm", page.id)))?;
        }
    }
    let data = dataset
        .samples
        .iter()
        .map(|s| AnnotationRecord {
            question_id: s
                .question_id
                .parse::<u64>()
                .ok()
                .filter(|n| n.to_string() == s.question_id)
                .map_or_else(|| QuestionId::Text(s.question_id.clone()), QuestionId::Number),
            question: s.question.clone(),
            doc_id: s.doc_id.clone(),
            page_ids: dataset.document_of(s).page_ids(),
            answers: s.answers.clone(),
            answer_page_idx: s.answer_page_idx,
        })
        .collect();
    let file = AnnotationFile {
        dataset_name: dataset.name.clone(),
        dataset_split: dataset.split.clone(),
        dataset_version: "1.0".into(),
        data,
    };
    let path = dir.join(ANNOTATIONS_FILE);
    let json = serde_json::to_string_pretty(&file).expect("annotations serialize");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Generator settings for the key-value page corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_documents: usize,
    pub min_pages: usize,
    pub max_pages: usize,
    /// `KEY: VALUE` lines per page, one per text line from the top.
    pub facts_per_page: usize,
    /// Questions asked about each document (capped by its fact slots).
    pub questions_per_doc: usize,
    pub key_alphabet: String,
    pub key_len: usize,
    pub value_alphabet: String,
    pub value_len: usize,
    pub page_width: usize,
    pub page_height: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_documents: 200,
            min_pages: 4,
            max_pages: 8,
            facts_per_page: 1,
            questions_per_doc: 5,
            key_alphabet: "ABCDEF".into(),
            key_len: 2,
            value_alphabet: "0123456789".into(),
            value_len: 2,
            page_width: 120,
            page_height: 32,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn key_space(&self) -> usize {
        let n = self.key_alphabet.chars().count();
        n.checked_pow(self.key_len as u32).unwrap_or(usize::MAX)
    }

    pub fn validate(&self, font: &GlyphFont) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_documents == 0 || self.min_pages == 0 || self.facts_per_page == 0 || self.questions_per_doc == 0 {
            return fail("documents, pages, facts and questions must all be at least 1".into());
        }
        if self.min_pages > self.max_pages {
            return fail(format!("page range {}:{} is empty", self.min_pages, self.max_pages));
        }
        if self.key_len == 0 || self.value_len == 0 || self.key_alphabet.is_empty() || self.value_alphabet.is_empty() {
            return fail("key and value alphabets and lengths must be non-empty".into());
        }
        for (what, alphabet) in [("key", &self.key_alphabet), ("value", &self.value_alphabet)] {
            let chars: Vec<char> = alphabet.chars().collect();
            if let Some(c) = chars.iter().find(|c| !font.has_glyph(**c)) {
                return fail(format!("{what} alphabet character {c:?} has no glyph"));
            }
            if (1..chars.len()).any(|i| chars[..i].contains(&chars[i])) {
                return fail(format!("{what} alphabet repeats a character"));
            }
        }
        if self.key_space() < self.questions_per_doc + 1 {
            return fail(format!(
                "{} keys cannot keep {} question keys unique with distractors",
                self.key_space(),
                self.questions_per_doc
            ));
        }
        let line_px = (self.key_len + 2 + self.value_len) * font.glyph_width();
        if line_px > self.page_width {
            return fail(format!("fact lines need {line_px} px but pages are {} px wide", self.page_width));
        }
        if self.facts_per_page * font.glyph_height() > self.page_height {
            return fail(format!(
                "{} fact lines do not fit a {} px page",
                self.facts_per_page, self.page_height
            ));
        }
        Ok(())
    }
}

pub fn question_text(key: &str) -> String {
    format!("what is the value of {key}?")
}

fn random_word<R: Rng>(rng: &mut R, alphabet: &[char], len: usize) -> String {
    (0..len).map(|_| *alphabet.choose(rng).expect("non-empty alphabet")).collect()
}

fn all_keys(alphabet: &[char], len: usize) -> Vec<String> {
    let mut keys = vec![String::new()];
    for _ in 0..len {
        keys = keys
            .iter()
            .flat_map(|k| alphabet.iter().map(move |c| format!("{k}{c}")))
            .collect();
    }
    keys
}

/// Renders one page from its `KEY: VALUE` lines.
pub fn render_fact_page(facts: &[(String, String)], font: &GlyphFont, width: usize, height: usize) -> RasterImage {
    let mut page = RasterImage::blank(width, height);
    for (line, (k, v)) in facts.iter().enumerate() {
        let strip = render_text(&format!("{k}: {v}"), font, width);
        page.blit(&strip, 0, line * font.glyph_height());
    }
    page
}

/// Builds the synthetic corpus in memory. Every question key occurs on its
/// gold page only; all other lines carry distractor keys that are never
/// asked about in that document.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    let font = GlyphFont::embedded();
    cfg.validate(&font)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let key_chars: Vec<char> = cfg.key_alphabet.chars().collect();
    let value_chars: Vec<char> = cfg.value_alphabet.chars().collect();
    let keys = all_keys(&key_chars, cfg.key_len);

    let mut documents = Vec::with_capacity(cfg.n_documents);
    let mut samples = Vec::new();
    for d in 0..cfg.n_documents {
        let doc_id = format!("doc{d:04}");
        let n_pages = rng.random_range(cfg.min_pages..=cfg.max_pages);
        let n_q = cfg.questions_per_doc.min(n_pages * cfg.facts_per_page);

        let mut pool = keys.clone();
        pool.shuffle(&mut rng);
        let distractors = pool.split_off(n_q);
        let question_keys = pool;

        let mut slots: Vec<(usize, usize)> = (0..n_pages)
            .flat_map(|p| (0..cfg.facts_per_page).map(move |l| (p, l)))
            .collect();
        slots.shuffle(&mut rng);

        let mut lines: Vec<Vec<Option<(String, String)>>> = vec![vec![None; cfg.facts_per_page]; n_pages];
        for (key, &(p, l)) in question_keys.iter().zip(&slots) {
            let value = random_word(&mut rng, &value_chars, cfg.value_len);
            lines[p][l] = Some((key.clone(), value.clone()));
            samples.push(QASample {
                question_id: samples.len().to_string(),
                question: question_text(key),
                doc_id: doc_id.clone(),
                answers: vec![value],
                answer_page_idx: p,
            });
        }
        let mut pages = Vec::with_capacity(n_pages);
        for (p, page_lines) in lines.into_iter().enumerate() {
            let taken: Vec<String> = page_lines.iter().flatten().map(|(k, _)| k.clone()).collect();
            let mut free: Vec<&String> = distractors.iter().filter(|k| !taken.contains(k)).collect();
            free.shuffle(&mut rng);
            let mut free = free.into_iter().cycle();
            let facts: Vec<(String, String)> = page_lines
                .into_iter()
                .map(|slot| {
                    slot.unwrap_or_else(|| {
                        let k = free.next().expect("distractor keys exist").clone();
                        (k, random_word(&mut rng, &value_chars, cfg.value_len))
                    })
                })
                .collect();
            let img = render_fact_page(&facts, &font, cfg.page_width, cfg.page_height);
            pages.push(PageRef::memory(format!("{doc_id}_p{p}"), img));
        }
        documents.push(Document::new(doc_id, pages)?);
    }
    Dataset::new("synthetic-kv", "all", documents, samples)
}

/// Document-level partition into train/valid/test. Train and valid sizes
/// are `round(fraction * documents)`; test takes the remainder.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let m = dataset.documents.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * m as f64).round() as usize).min(m);
    let n_valid = ((fractions[1] * m as f64).round() as usize).min(m - n_train);
    let bounds = [0, n_train, n_train + n_valid, m];
    let names = ["train", "valid", "test"];
    let parts: Vec<Dataset> = (0..3)
        .map(|s| {
            let mut chosen: Vec<usize> = order[bounds[s]..bounds[s + 1]].to_vec();
            chosen.sort_unstable();
            let docs: Vec<Document> = chosen.iter().map(|&i| dataset.documents[i].clone()).collect();
            let ids: std::collections::HashSet<&str> = docs.iter().map(Document::id).collect();
            let samples = dataset
                .samples
                .iter()
                .filter(|q| ids.contains(q.doc_id.as_str()))
                .cloned()
                .collect();
            Dataset::new(dataset.name.clone(), names[s], docs, samples)
        })
        .collect::<Result<_>>()?;
    Ok(parts.try_into().expect("three parts"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_documents: 6,
            min_pages: 2,
            max_pages: 5,
            questions_per_doc: 3,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    /// Finds `needle` among the rendered line strips of `page` by pixel
    /// comparison against a freshly rendered key.
    fn page_contains_key(page: &RasterImage, key: &str, font: &GlyphFont) -> bool {
        let probe = render_text(&format!("{key}:"), font, page.width());
        let w = probe.width().min(font.glyph_width() * (key.len() + 1));
        (0..page.height() / font.glyph_height()).any(|line| {
            let y0 = line * font.glyph_height();
            (0..font.glyph_height()).all(|dy| page.row(y0 + dy)[..w] == probe.row(dy)[..w])
        })
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a.samples(), b.samples());
        for (da, db) in a.documents().iter().zip(b.documents()) {
            for (pa, pb) in da.pages().iter().zip(db.pages()) {
                assert_eq!(pa.load().unwrap(), pb.load().unwrap());
            }
        }
    }

    #[test]
    fn every_question_has_exactly_one_evidence_page() {
        let font = GlyphFont::embedded();
        let ds = gen_synthetic(&SynthConfig {
            n_documents: 20,
            ..small()
        })
        .unwrap();
        for s in ds.samples() {
            let key = s.question.trim_start_matches("what is the value of ").trim_end_matches('?');
            let doc = ds.document_of(s);
            let hits: Vec<usize> = (0..doc.page_count())
                .filter(|&p| page_contains_key(&doc.pages()[p].load().unwrap(), key, &font))
                .collect();
            assert_eq!(hits, vec![s.answer_page_idx], "{}", s.question);
        }
    }

    #[test]
    fn single_document_three_pages_one_question() {
        let font = GlyphFont::embedded();
        let ds = gen_synthetic(&SynthConfig {
            n_documents: 1,
            min_pages: 3,
            max_pages: 3,
            questions_per_doc: 1,
            ..small()
        })
        .unwrap();
        assert_eq!(ds.len(), 1);
        let s = &ds.samples()[0];
        let key = &s.question[21..23];
        let hits = ds.documents()[0]
            .pages()
            .iter()
            .filter(|p| page_contains_key(&p.load().unwrap(), key, &font))
            .count();
        assert_eq!(hits, 1);
    }

    #[test]
    fn histogram_matches_generated_lengths() {
        let ds = gen_synthetic(&SynthConfig {
            n_documents: 200,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut expect = BTreeMap::new();
        for d in ds.documents() {
            *expect.entry(d.page_count()).or_insert(0usize) += 1;
        }
        assert_eq!(ds.page_histogram(), expect);
        assert_eq!(expect.values().sum::<usize>(), 200);
        assert!(expect.keys().all(|k| (4..=8).contains(k)));
        assert_eq!(page_histogram([1, 1, 5]), BTreeMap::from([(1, 2), (5, 1)]));
        assert!(page_histogram([]).is_empty());
    }

    #[test]
    fn tiny_key_space_is_rejected() {
        let cfg = SynthConfig {
            key_alphabet: "AB".into(),
            key_len: 1,
            questions_per_doc: 2,
            ..small()
        };
        assert!(matches!(gen_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = gen_synthetic(&SynthConfig {
            n_documents: 200,
            questions_per_doc: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let [tr, va, te] = split(&ds, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(
            (tr.documents().len(), va.documents().len(), te.documents().len()),
            (160, 20, 20)
        );
        assert_eq!(tr.len() + va.len() + te.len(), ds.len());
        for d in va.documents().iter().chain(te.documents()) {
            assert!(tr.document(d.id()).is_none());
        }
        let again = split(&ds, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(again[0].samples(), tr.samples());
        let [all, none, _] = split(&ds, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((all.len(), none.len()), (ds.len(), 0));
        assert!(split(&ds, [0.5, 0.1, 0.1], 1).is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let ds = gen_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_split_dir(&ds, dir.path()).unwrap();
        let back = load_split_dir(dir.path()).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.name(), ds.name());
        assert_eq!(back.documents().len(), ds.documents().len());
        for (a, b) in ds.documents().iter().zip(back.documents()) {
            assert_eq!(a.id(), b.id());
            assert_eq!(a.page_ids(), b.page_ids());
            for (pa, pb) in a.pages().iter().zip(b.pages()) {
                assert_eq!(pa.load().unwrap(), pb.load().unwrap());
            }
        }
    }

    fn fixture(dir: &Path, records: serde_json::Value, pages: &[&str]) {
        fs::create_dir_all(dir.join(IMAGES_DIR)).unwrap();
        for p in pages {
            write_pgm(&RasterImage::blank(4, 3), &dir.join(IMAGES_DIR).join(format!("{p}.pgm"))).unwrap();
        }
        let top = serde_json::json!({"dataset_name": "MP-DocVQA", "dataset_split": "val", "data": records});
        fs::write(dir.join(ANNOTATIONS_FILE), top.to_string()).unwrap();
    }

    #[test]
    fn loads_two_question_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let records = serde_json::json!([
            {"questionId": 49153, "question": "what is the date?", "doc_id": "ffbf0023", "page_ids": ["ffbf0023_p0", "ffbf0023_p1"],
             "answers": ["1/8/93", "January 8, 1993"], "answer_page_idx": 1, "data_split": "val"},
            {"questionId": 24580, "question": "who signed?", "doc_id": "ffbf0023", "page_ids": ["ffbf0023_p0", "ffbf0023_p1"],
             "answers": ["T. F. Riehl"], "answer_page_idx": 0}
        ]);
        fixture(dir.path(), records, &["ffbf0023_p0", "ffbf0023_p1"]);
        let ds = load_split_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.split(), "val");
        assert_eq!(ds.samples()[0].question_id, "49153");
        assert_eq!(ds.samples()[0].answer_page_idx, 1);
        assert_eq!(ds.samples()[1].answer_page_idx, 0);
        assert_eq!(ds.documents().len(), 1);
        assert_eq!(*ds.documents()[0].pages()[1].load().unwrap(), RasterImage::blank(4, 3));
    }

    #[test]
    fn missing_image_names_the_page() {
        let dir = tempfile::tempdir().unwrap();
        let records = serde_json::json!([
            {"questionId": 1, "question": "q", "doc_id": "d", "page_ids": ["d_p0", "d_p1"], "answers": ["a"], "answer_page_idx": 0}
        ]);
        fixture(dir.path(), records, &["d_p0"]);
        match load_split_dir(dir.path()) {
            Err(Error::Data { page, .. }) => assert_eq!(page, "d_p1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_image_fails_on_decode_with_page_id() {
        let dir = tempfile::tempdir().unwrap();
        let records = serde_json::json!([
            {"questionId": 1, "question": "q", "doc_id": "d", "page_ids": ["d_p0"], "answers": ["a"], "answer_page_idx": 0}
        ]);
        fixture(dir.path(), records, &[]);
        fs::write(dir.path().join(IMAGES_DIR).join("d_p0.pgm"), b"P5\n4 3\n255\n\x00").unwrap();
        let ds = load_split_dir(dir.path()).unwrap();
        match ds.documents()[0].pages()[0].load() {
            Err(Error::Data { page, .. }) => assert_eq!(page, "d_p0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_record_index() {
        let dir = tempfile::tempdir().unwrap();
        let records = serde_json::json!([
            {"questionId": 1, "question": "q", "doc_id": "d", "page_ids": ["d_p0"], "answers": ["a"], "answer_page_idx": 0},
            {"questionId": 2, "question": "q", "doc_id": "d", "page_ids": ["d_p0"], "answers": ["a"]}
        ]);
        fixture(dir.path(), records, &["d_p0"]);
        match load_split_dir(dir.path()) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, Some(1)),
            other => panic!("unexpected {other:?}"),
        }
        let records = serde_json::json!([
            {"questionId": 1, "question": "q", "doc_id": "d", "page_ids": ["d_p0"], "answers": ["a"], "answer_page_idx": 3}
        ]);
        fixture(dir.path(), records, &["d_p0"]);
        assert!(matches!(load_split_dir(dir.path()), Err(Error::Parse { record: Some(0), .. })));
    }

    #[test]
    fn long_document_loads() {
        let dir = tempfile::tempdir().unwrap();
        let pages: Vec<String> = (0..793).map(|i| format!("big_p{i}")).collect();
        let refs: Vec<&str> = pages.iter().map(String::as_str).collect();
        let records = serde_json::json!([
            {"questionId": 7, "question": "q", "doc_id": "big", "page_ids": pages, "answers": ["a"], "answer_page_idx": 792}
        ]);
        fixture(dir.path(), records, &refs);
        let ds = load_split_dir(dir.path()).unwrap();
        assert_eq!(ds.page_histogram(), BTreeMap::from([(793, 1)]));
    }

    #[test]
    fn color_images_are_channel_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let img = image::RgbImage::from_raw(2, 1, vec![30, 60, 90, 255, 255, 255]).unwrap();
        img.save(&path).unwrap();
        let gray = read_gray_image(&path).unwrap();
        assert_eq!(gray.pixels(), &[60, 255]);
    }
}
