//! Dataset ingestion and the internal example format. External corpora
//! (SQuAD-style JSON, MARCO-style JSONL) are converted once into a
//! line-per-example JSONL that everything downstream consumes.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::max_rouge_span;
use crate::text::{align_byte_span, char_to_byte, tokenize, Token};

/// Answers that mean "this question has no answer in the passages".
const NO_ANSWER_SENTINEL: &str = "No Answer Present.";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Passage {
    pub text: String,
    pub tokens: Vec<Token>,
    /// Relevance tag from the source corpus, when it has one.
    #[serde(default)]
    pub is_selected: bool,
}

impl Passage {
    pub fn new(text: &str, is_selected: bool) -> Self {
        Passage {
            text: text.to_string(),
            tokens: tokenize(text),
            is_selected,
        }
    }

    pub fn token_texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    /// Original text covered by an inclusive token range.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        &self.text[self.tokens[start].start..self.tokens[end].end]
    }
}

/// Token-index answer span within one passage, ends inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanTarget {
    pub passage: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub question_tokens: Vec<Token>,
    pub passages: Vec<Passage>,
    /// Gold answer strings; empty means the question is unanswerable.
    pub answers: Vec<String>,
    #[serde(default)]
    pub query_type: Option<String>,
    /// Training target; None until derived or when underivable.
    #[serde(default)]
    pub span: Option<SpanTarget>,
}

impl Example {
    /// Gold strings for metric computation; unanswerable questions
    /// score against the empty string.
    pub fn golds(&self) -> Vec<String> {
        if self.answers.is_empty() {
            vec![String::new()]
        } else {
            self.answers.clone()
        }
    }

    pub fn span_text(&self) -> Option<&str> {
        self.span
            .map(|s| self.passages[s.passage].span_text(s.start, s.end))
    }
}

// ── SQuAD-style JSON ─────────────────────────────────────────────────

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
    #[serde(default)]
    is_impossible: bool,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    /// Offset in code points, as published.
    answer_start: usize,
}

/// Counters for examples an ingester could not convert.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub examples: usize,
    /// Answerable questions whose gold offsets align to no token span.
    pub skipped_unalignable: usize,
    /// Queries arriving with an empty passage list.
    pub skipped_empty: usize,
}

/// Read a SQuAD-style JSON file. Each question becomes a one-passage
/// example; the first answer's character offsets are aligned to a
/// token span. Questions whose answer cannot be aligned are skipped
/// and counted.
pub fn read_squad(path: &Path) -> Result<(Vec<Example>, IngestStats)> {
    let file: SquadFile = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(path)?,
    ))?;
    let mut out = Vec::new();
    let mut stats = IngestStats::default();
    let mut seen_ids = std::collections::BTreeSet::new();
    for article in file.data {
        for para in article.paragraphs {
            let passage = Passage::new(&para.context, true);
            for qa in para.qas {
                if !seen_ids.insert(qa.id.clone()) {
                    return Err(Error::parse(
                        path.display().to_string(),
                        format!("duplicate question id {:?}", qa.id),
                    ));
                }
                let answers: Vec<String> = if qa.is_impossible {
                    Vec::new()
                } else {
                    qa.answers.iter().map(|a| a.text.clone()).collect()
                };
                let span = if qa.is_impossible {
                    None
                } else {
                    match qa
                        .answers
                        .first()
                        .and_then(|a| squad_span(&para.context, &passage.tokens, a))
                    {
                        Some(s) => Some(s),
                        None => {
                            stats.skipped_unalignable += 1;
                            continue;
                        }
                    }
                };
                out.push(Example {
                    id: qa.id,
                    question_tokens: tokenize(&qa.question),
                    question: qa.question,
                    passages: vec![passage.clone()],
                    answers,
                    query_type: None,
                    span,
                });
            }
        }
    }
    stats.examples = out.len();
    Ok((out, stats))
}

fn squad_span(context: &str, tokens: &[Token], ans: &SquadAnswer) -> Option<SpanTarget> {
    let start = char_to_byte(context, ans.answer_start)?;
    let end = char_to_byte(context, ans.answer_start + ans.text.chars().count())?;
    align_byte_span(tokens, start, end).map(|(s, e)| SpanTarget {
        passage: 0,
        start: s,
        end: e,
    })
}

// ── MARCO-style JSONL ────────────────────────────────────────────────

#[derive(Deserialize)]
struct MarcoLine {
    query_id: serde_json::Value,
    query: String,
    #[serde(default)]
    query_type: Option<String>,
    passages: Vec<MarcoPassage>,
    #[serde(default)]
    answers: Vec<String>,
}

#[derive(Deserialize)]
struct MarcoPassage {
    passage_text: String,
    #[serde(default)]
    is_selected: i64,
}

fn id_string(v: &serde_json::Value) -> String {
    match v.as_str() {
        Some(s) => s.to_string(),
        None => v.to_string(),
    }
}

/// Read MARCO-style JSONL: one query with candidate passages per line.
/// Answer spans are not present in the source; run span derivation
/// after ingestion. Queries with no passages are skipped and counted.
pub fn read_marco(path: &Path) -> Result<(Vec<Example>, IngestStats)> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut stats = IngestStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MarcoLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?;
        if rec.passages.is_empty() {
            stats.skipped_empty += 1;
            continue;
        }
        let answers: Vec<String> = rec
            .answers
            .into_iter()
            .map(|a| a.trim().to_string())
            .filter(|a| !a.is_empty() && a != NO_ANSWER_SENTINEL)
            .collect();
        out.push(Example {
            id: id_string(&rec.query_id),
            question_tokens: tokenize(&rec.query),
            question: rec.query,
            passages: rec
                .passages
                .iter()
                .map(|p| Passage::new(&p.passage_text, p.is_selected != 0))
                .collect(),
            answers,
            query_type: rec.query_type,
            span: None,
        });
    }
    stats.examples = out.len();
    Ok((out, stats))
}

// ── internal JSONL format ────────────────────────────────────────────

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Outcome counts from span derivation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpanStats {
    /// Examples that already carried a span.
    pub kept: usize,
    /// Spans newly assigned by the labeler.
    pub derived: usize,
    /// Unanswerable examples labeled with the empty span.
    pub no_answer: usize,
    /// Answerable examples whose answer overlaps no passage span.
    pub unmatched: usize,
    /// Total best-span ROUGE-L over derived examples.
    pub score_sum: f64,
}

impl SpanStats {
    /// Mean best ROUGE-L over the answerable examples the labeler saw:
    /// the score an oracle extractive reader could reach on this data.
    pub fn rouge_upper_bound(&self) -> f64 {
        let n = self.derived + self.unmatched;
        if n == 0 {
            0.0
        } else {
            self.score_sum / n as f64
        }
    }
}

/// Label examples with extractive spans maximizing ROUGE-L against the
/// first gold answer. Examples that already have spans keep them.
pub fn derive_spans(examples: &mut [Example], max_len: usize, beta: f64) -> SpanStats {
    let mut stats = SpanStats::default();
    for ex in examples.iter_mut() {
        if ex.span.is_some() {
            stats.kept += 1;
            continue;
        }
        if ex.answers.is_empty() {
            stats.no_answer += 1;
            continue;
        }
        let passages: Vec<Vec<String>> = ex.passages.iter().map(|p| p.token_texts()).collect();
        let mut found = None;
        for ans in &ex.answers {
            if let Some(label) = max_rouge_span(&passages, ans, max_len, beta) {
                found = Some(label);
                break;
            }
        }
        match found {
            Some(label) => {
                ex.span = Some(SpanTarget {
                    passage: label.passage,
                    start: label.start,
                    end: label.end,
                });
                stats.derived += 1;
                stats.score_sum += label.score;
            }
            None => stats.unmatched += 1,
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQUAD_SAMPLE: &str = r#"{
      "version": "1.1",
      "data": [{
        "title": "Museum",
        "paragraphs": [{
          "context": "The V&A Theatre & Performance galleries opened in March 2009. They hold material about live performance.",
          "qas": [
            {"id": "q1", "question": "When did the galleries open?",
             "answers": [{"text": "March 2009", "answer_start": 50}]},
            {"id": "q2", "question": "What do they hold?",
             "answers": [{"text": "material about live performance", "answer_start": 72}]},
            {"id": "q3", "question": "Unanswerable?", "answers": [], "is_impossible": true}
          ]
        }]
      }]
    }"#;

    #[test]
    fn squad_ingestion_aligns_spans() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("squad.json");
        std::fs::write(&path, SQUAD_SAMPLE).unwrap();
        let (exs, stats) = read_squad(&path).unwrap();
        assert_eq!(exs.len(), 3);
        assert_eq!(stats.examples, 3);
        assert_eq!(stats.skipped_unalignable, 0);

        let q1 = &exs[0];
        let span = q1.span.unwrap();
        assert_eq!(q1.span_text().unwrap(), "March 2009");
        assert_eq!(span.passage, 0);

        let q2 = &exs[1];
        assert_eq!(q2.span_text().unwrap(), "material about live performance");

        let q3 = &exs[2];
        assert!(q3.span.is_none());
        assert!(q3.answers.is_empty());
        assert_eq!(q3.golds(), vec![String::new()]);
    }

    #[test]
    fn squad_offsets_are_code_points() {
        let json = r#"{"data":[{"paragraphs":[{
          "context": "Le café Procope ouvrit en 1686.",
          "qas": [{"id":"q","question":"Quand?","answers":[{"text":"1686","answer_start":26}]}]
        }]}]}"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, json).unwrap();
        let (exs, _) = read_squad(&path).unwrap();
        assert_eq!(exs[0].span_text().unwrap(), "1686");
    }

    #[test]
    fn squad_duplicate_ids_rejected() {
        let json = r#"{"data":[{"paragraphs":[{
          "context": "Rome is big.",
          "qas": [
            {"id":"dup","question":"q1","answers":[{"text":"Rome","answer_start":0}]},
            {"id":"dup","question":"q2","answers":[{"text":"big","answer_start":8}]}
          ]}]}]}"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, json).unwrap();
        let err = read_squad(&path).unwrap_err().to_string();
        assert!(err.contains("dup"), "{err}");
    }

    #[test]
    fn squad_unalignable_answer_skipped_and_counted() {
        // answer_start points past the end of the context
        let json = r#"{"data":[{"paragraphs":[{
          "context": "Rome is big.",
          "qas": [
            {"id":"ok","question":"q1","answers":[{"text":"Rome","answer_start":0}]},
            {"id":"bad","question":"q2","answers":[{"text":"Rome","answer_start":500}]}
          ]}]}]}"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, json).unwrap();
        let (exs, stats) = read_squad(&path).unwrap();
        assert_eq!(exs.len(), 1);
        assert_eq!(stats.skipped_unalignable, 1);
        assert_eq!(exs[0].id, "ok");
    }

    const MARCO_SAMPLE: &str = concat!(
        r#"{"query_id": 9652, "query": "what collection does the gallery hold", "query_type": "DESCRIPTION", "#,
        r#""passages": [{"passage_text": "The gallery holds paintings and sculpture.", "is_selected": 1}, "#,
        r#"{"passage_text": "Trains run hourly to the city.", "is_selected": 0}], "#,
        r#""answers": ["paintings and sculpture"]}"#,
        "\n",
        r#"{"query_id": "9653", "query": "is there an answer", "passages": [{"passage_text": "Nothing relevant."}], "answers": ["No Answer Present."]}"#,
        "\n"
    );

    #[test]
    fn marco_ingestion_and_no_answer_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("marco.jsonl");
        std::fs::write(&path, MARCO_SAMPLE).unwrap();
        let (exs, _) = read_marco(&path).unwrap();
        assert_eq!(exs.len(), 2);

        assert_eq!(exs[0].id, "9652");
        assert_eq!(exs[0].query_type.as_deref(), Some("DESCRIPTION"));
        assert_eq!(exs[0].passages.len(), 2);
        assert!(exs[0].passages[0].is_selected);
        assert!(!exs[0].passages[1].is_selected);
        assert!(exs[0].span.is_none());

        assert_eq!(exs[1].id, "9653");
        assert!(exs[1].answers.is_empty(), "sentinel answer filtered");
    }

    #[test]
    fn derive_spans_labels_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("marco.jsonl");
        std::fs::write(&path, MARCO_SAMPLE).unwrap();
        let (mut exs, _) = read_marco(&path).unwrap();
        let stats = derive_spans(&mut exs, 50, 1.0);
        assert_eq!(stats.derived, 1);
        assert_eq!(stats.no_answer, 1);
        assert_eq!(stats.unmatched, 0);
        assert_eq!(stats.kept, 0);

        let span = exs[0].span.unwrap();
        assert_eq!(span.passage, 0);
        assert_eq!(exs[0].span_text().unwrap(), "paintings and sculpture");
    }

    #[test]
    fn derive_spans_counts_unmatched() {
        let mut exs = vec![Example {
            id: "x".into(),
            question: "q".into(),
            question_tokens: tokenize("q"),
            passages: vec![Passage::new("alpha beta gamma", false)],
            answers: vec!["zebra".into()],
            query_type: None,
            span: None,
        }];
        let stats = derive_spans(&mut exs, 50, 1.0);
        assert_eq!(stats.unmatched, 1);
        assert!(exs[0].span.is_none());
    }

    #[test]
    fn jsonl_round_trip_preserves_examples() {
        let dir = tempfile::tempdir().unwrap();
        let marco = dir.path().join("marco.jsonl");
        std::fs::write(&marco, MARCO_SAMPLE).unwrap();
        let (mut exs, _) = read_marco(&marco).unwrap();
        derive_spans(&mut exs, 50, 1.0);

        let out = dir.path().join("prepared.jsonl");
        write_examples(&out, &exs).unwrap();
        let back = read_examples(&out).unwrap();
        assert_eq!(back.len(), exs.len());
        assert_eq!(back[0].id, exs[0].id);
        assert_eq!(back[0].span, exs[0].span);
        assert_eq!(back[0].passages[0].tokens, exs[0].passages[0].tokens);
        assert_eq!(back[1].answers, exs[1].answers);
    }
}
