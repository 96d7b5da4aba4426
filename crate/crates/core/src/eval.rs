//! Inference pipeline and metrics.
//!
//! Every page of a document is rendered together with the question,
//! encoded and scored on its own; the best page is picked and the answer
//! is decoded from that page's encoder feature. Only one page is resident
//! at a time, whatever the document length.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Document, QASample};
use crate::error::{Error, Result};
use crate::model::{EncoderFeature, VqaModel};
use crate::render::{question_page_patches, GlyphFont, RasterImage};
use crate::scalar::Scalar;
use crate::scorer::{PageScorer, RelevanceScore};

/// Similarity threshold below which a prediction scores zero.
pub const ANLS_TAU: f64 = 0.5;

// ---------------------------------------------------------------------------
// Metrics

/// Edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    strsim::levenshtein(a, b)
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Best thresholded normalized similarity of `pred` against any of `gts`.
pub fn anls_single(pred: &str, gts: &[impl AsRef<str>], tau: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Contract("ANLS needs at least one ground-truth answer".into()));
    }
    let p = normalize(pred);
    let p_len = p.chars().count();
    Ok(gts
        .iter()
        .map(|gt| {
            let g = normalize(gt.as_ref());
            let denom = p_len.max(g.chars().count());
            let nl = if denom == 0 {
                0.0
            } else {
                levenshtein(&p, &g) as f64 / denom as f64
            };
            if nl < tau {
                1.0 - nl
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max))
}

/// Mean of per-question similarities.
pub fn anls(per_question: &[f64]) -> Result<f64> {
    if per_question.is_empty() {
        return Err(Error::Contract("ANLS over zero questions".into()));
    }
    Ok(per_question.iter().sum::<f64>() / per_question.len() as f64)
}

/// Percentage of positions where prediction and gold agree.
pub fn page_accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() || predicted.is_empty() {
        return Err(Error::Contract(format!(
            "page accuracy needs equal non-empty lists, got {} and {}",
            predicted.len(),
            gold.len()
        )));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

/// Per-page relevance scores of one document for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageScores {
    pub doc_id: String,
    pub scores: Vec<RelevanceScore>,
}

impl PageScores {
    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.value()).collect()
    }
}

/// Index of the highest score; the lowest index wins ties.
pub fn top1(scores: &PageScores) -> Result<usize> {
    top1_values(&scores.values())
}

pub fn top1_values(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Contract("top-1 over zero pages".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// The four (page correct?) x (exact answer?) cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    PageRightAnswerExact,
    PageRightAnswerInexact,
    PageWrongAnswerExact,
    PageWrongAnswerInexact,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::PageRightAnswerExact,
        Quadrant::PageRightAnswerInexact,
        Quadrant::PageWrongAnswerExact,
        Quadrant::PageWrongAnswerInexact,
    ];

    pub fn of(page_correct: bool, anls: f64) -> Self {
        match (page_correct, anls == 1.0) {
            (true, true) => Quadrant::PageRightAnswerExact,
            (true, false) => Quadrant::PageRightAnswerInexact,
            (false, true) => Quadrant::PageWrongAnswerExact,
            (false, false) => Quadrant::PageWrongAnswerInexact,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantCell {
    pub quadrant: Quadrant,
    pub count: usize,
    /// Share of all questions in percent, rounded to two decimals.
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantReport {
    pub total: usize,
    pub cells: [QuadrantCell; 4],
}

impl QuadrantReport {
    pub fn count(&self, q: Quadrant) -> usize {
        self.cells[q.index()].count
    }

    pub fn pct(&self, q: Quadrant) -> f64 {
        self.cells[q.index()].pct
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn quadrant_report(per_question: &[(bool, f64)]) -> Result<QuadrantReport> {
    if per_question.is_empty() {
        return Err(Error::Contract("quadrant report over zero questions".into()));
    }
    let mut counts = [0usize; 4];
    for &(ok, a) in per_question {
        counts[Quadrant::of(ok, a).index()] += 1;
    }
    let total = per_question.len();
    let cells = Quadrant::ALL.map(|q| QuadrantCell {
        quadrant: q,
        count: counts[q.index()],
        pct: round2(100.0 * counts[q.index()] as f64 / total as f64),
    });
    Ok(QuadrantReport { total, cells })
}

/// Headline numbers of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub questions: usize,
    pub anls: f64,
    pub page_accuracy_pct: f64,
    pub quadrants: QuadrantReport,
    /// Page count -> number of documents of that length.
    pub page_histogram: BTreeMap<usize, usize>,
}

impl MetricsReport {
    /// Summarizes per-question results; the histogram counts each
    /// distinct document once.
    pub fn from_results(results: &[QuestionResult]) -> Result<Self> {
        let per_anls: Vec<f64> = results.iter().map(|r| r.anls).collect();
        let pred: Vec<usize> = results.iter().map(|r| r.pred_page).collect();
        let gold: Vec<usize> = results.iter().map(|r| r.gold_page).collect();
        let quad: Vec<(bool, f64)> = results.iter().map(|r| (r.pred_page == r.gold_page, r.anls)).collect();
        let mut docs = BTreeMap::new();
        for r in results {
            docs.entry(r.doc_id.as_str()).or_insert(r.n_pages);
        }
        Ok(MetricsReport {
            questions: results.len(),
            anls: anls(&per_anls)?,
            page_accuracy_pct: page_accuracy(&pred, &gold)?,
            quadrants: quadrant_report(&quad)?,
            page_histogram: crate::data::page_histogram(docs.into_values()),
        })
    }
}

impl fmt::Display for QuadrantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:<9} {:>7} {:>8}", "page correct", "ANLS==1", "count", "pct")?;
        for c in &self.cells {
            let (page, exact) = match c.quadrant {
                Quadrant::PageRightAnswerExact => ("yes", "yes"),
                Quadrant::PageRightAnswerInexact => ("yes", "no"),
                Quadrant::PageWrongAnswerExact => ("no", "yes"),
                Quadrant::PageWrongAnswerInexact => ("no", "no"),
            };
            writeln!(f, "{page:<14} {exact:<9} {:>7} {:>8.2}", c.count, c.pct)?;
        }
        write!(f, "{:<24} {:>7}", "total", self.total)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "questions          {}", self.questions)?;
        writeln!(f, "ANLS               {:.4}", self.anls)?;
        writeln!(f, "page accuracy (%)  {:.2}", self.page_accuracy_pct)?;
        writeln!(f)?;
        writeln!(f, "{}", self.quadrants)?;
        writeln!(f)?;
        writeln!(f, "{:<8} {:>9}", "pages", "documents")?;
        for (pages, docs) in &self.page_histogram {
            writeln!(f, "{pages:<8} {docs:>9}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pipeline

/// Outcome for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub doc_id: String,
    pub n_pages: usize,
    pub pred_page: usize,
    pub gold_page: usize,
    pub answer: String,
    pub anls: f64,
}

/// Selected page and generated answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Answer {
    pub page: usize,
    pub answer: String,
    pub scores: PageScores,
}

/// Read-only model + scorer bundle used for inference.
#[derive(Debug)]
pub struct Pipeline<'a, T> {
    model: &'a VqaModel<T>,
    scorer: &'a PageScorer<T>,
    font: GlyphFont,
}

impl<'a, T: Scalar> Pipeline<'a, T> {
    pub fn new(model: &'a VqaModel<T>, scorer: &'a PageScorer<T>) -> Result<Self> {
        if scorer.d_model() != model.config().d_model {
            return Err(Error::Config(format!(
                "scorer width {} does not match model width {}",
                scorer.d_model(),
                model.config().d_model
            )));
        }
        Ok(Pipeline {
            model,
            scorer,
            font: GlyphFont::embedded(),
        })
    }

    pub fn model(&self) -> &VqaModel<T> {
        self.model
    }

    pub fn scorer(&self) -> &PageScorer<T> {
        self.scorer
    }

    pub fn font(&self) -> &GlyphFont {
        &self.font
    }

    /// Encoder feature of `question` fused with one page image.
    pub fn page_feature(&self, question: &str, page: &RasterImage) -> Result<EncoderFeature<T>> {
        page_feature(self.model, &self.font, question, page)
    }

    fn load_page(doc: &Document, index: usize) -> Result<std::sync::Arc<RasterImage>> {
        doc.pages()[index].load().map_err(|e| match e {
            Error::Data { page, message } => Error::Data {
                page,
                message: format!("page index {index}: {message}"),
            },
            other => other,
        })
    }

    /// Scores every page in order, one page in memory at a time.
    pub fn score_document(&self, question: &str, doc: &Document) -> Result<PageScores> {
        let mut scores = Vec::with_capacity(doc.page_count());
        for k in 0..doc.page_count() {
            let page = Self::load_page(doc, k)?;
            let feature = self.page_feature(question, &page)?;
            scores.push(self.scorer.score(&feature)?);
        }
        Ok(PageScores {
            doc_id: doc.id().to_string(),
            scores,
        })
    }

    /// Picks the best page and decodes the answer from it.
    pub fn answer_question(&self, question: &str, doc: &Document, max_answer_len: usize) -> Result<Answer> {
        let scores = self.score_document(question, doc)?;
        let page = top1(&scores)?;
        let img = Self::load_page(doc, page)?;
        let feature = self.page_feature(question, &img)?;
        let answer = self.model.generate_answer(&feature, max_answer_len)?;
        Ok(Answer { page, answer, scores })
    }

    pub fn evaluate_sample(&self, dataset: &Dataset, sample: &QASample) -> Result<QuestionResult> {
        let doc = dataset.document_of(sample);
        let a = self.answer_question(&sample.question, doc, self.model.config().max_answer_len)?;
        Ok(QuestionResult {
            question_id: sample.question_id.clone(),
            doc_id: sample.doc_id.clone(),
            n_pages: doc.page_count(),
            pred_page: a.page,
            gold_page: sample.answer_page_idx,
            anls: anls_single(&a.answer, &sample.answers, ANLS_TAU)?,
            answer: a.answer,
        })
    }

    /// Evaluates every question (in parallel); results keep input order.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<Vec<QuestionResult>> {
        dataset
            .samples()
            .par_iter()
            .map(|s| self.evaluate_sample(dataset, s))
            .collect()
    }
}

/// Encoder feature of `question` fused with `page`.
pub fn page_feature<T: Scalar>(
    model: &VqaModel<T>,
    font: &GlyphFont,
    question: &str,
    page: &RasterImage,
) -> Result<EncoderFeature<T>> {
    let grid = question_page_patches::<T>(question, page, font, model.config().layout());
    model.encode(&grid)
}

/// Answers decoded from the gold page of each question, scored by ANLS.
/// This isolates answer generation from page retrieval.
pub fn gold_page_anls<T: Scalar>(model: &VqaModel<T>, dataset: &Dataset) -> Result<f64> {
    let font = GlyphFont::embedded();
    let per: Vec<f64> = dataset
        .samples()
        .par_iter()
        .map(|s| {
            let page = dataset.document_of(s).pages()[s.answer_page_idx].load()?;
            let f = page_feature(model, &font, &s.question, &page)?;
            let answer = model.generate_answer(&f, model.config().max_answer_len)?;
            anls_single(&answer, &s.answers, ANLS_TAU)
        })
        .collect::<Result<_>>()?;
    anls(&per)
}

/// Writes results as JSON lines.
pub fn write_results(results: &[QuestionResult], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in results {
        let line = serde_json::to_string(r).expect("result serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<QuestionResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                record: Some(i),
                message: e.to_string(),
            })
        })
        .collect()
}
