//! Answer-quality metrics: normalization, exact match, token F1,
//! ROUGE-L, corpus BLEU-4, the max-ROUGE span labeler used to derive
//! extractive training spans, and evaluation breakdown buckets.

use std::collections::HashMap;

/// SQuAD-style normalization: lowercase, delete ASCII punctuation,
/// drop standalone articles, collapse whitespace.
pub fn normalize(s: &str) -> String {
    normalize_tokens(s).join(" ")
}

/// The token sequence `normalize` joins.
pub fn normalize_tokens(s: &str) -> Vec<String> {
    eval_tokens(s)
        .into_iter()
        .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
        .collect()
}

/// Tokens for ROUGE/BLEU: lowercased, punctuation deleted, articles
/// kept (they count as matchable content for n-gram metrics).
pub fn eval_tokens(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped.split_whitespace().map(|t| t.to_string()).collect()
}

/// 1.0 when the normalized prediction equals any normalized gold.
pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize(pred);
    if golds.iter().any(|g| normalize(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut common = 0i64;
    for t in pred {
        let e = counts.entry(t.as_str()).or_insert(0);
        if *e > 0 {
            common += 1;
            *e -= 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Bag-of-tokens F1 over normalized tokens, max across golds.
pub fn f1_score(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_tokens(pred);
    golds
        .iter()
        .map(|g| f1_single(&p, &normalize_tokens(g)))
        .fold(0.0, f64::max)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_single(pred: &[String], gold: &[String], beta: f64) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let lcs = lcs_len(pred, gold) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / pred.len() as f64;
    let r = lcs / gold.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// LCS-based ROUGE-L F measure over eval tokens, max across golds.
/// `beta` weights recall (1.0 is the balanced default).
pub fn rouge_l(pred: &str, golds: &[String], beta: f64) -> f64 {
    let p = eval_tokens(pred);
    golds
        .iter()
        .map(|g| rouge_l_single(&p, &eval_tokens(g), beta))
        .fold(0.0, f64::max)
}

/// Per-corpus BLEU-4 sufficient statistics; accumulate one prediction
/// at a time with [`BleuStats::add`] and read the corpus score at the
/// end. Denominators for n ≥ 2 are add-one smoothed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub match_n: [u64; 4],
    pub total_n: [u64; 4],
    pub pred_len: u64,
    pub ref_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn add(&mut self, pred: &str, refs: &[String]) {
        let p = eval_tokens(pred);
        let rs: Vec<Vec<String>> = refs.iter().map(|r| eval_tokens(r)).collect();
        self.pred_len += p.len() as u64;
        // closest reference length; ties go to the shorter reference
        if let Some(best) = rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(p.len()), l))
        {
            self.ref_len += best as u64;
        }
        for n in 1..=4usize {
            let pc = ngram_counts(&p, n);
            let rcs: Vec<_> = rs.iter().map(|r| ngram_counts(r, n)).collect();
            let mut matched = 0u64;
            for (gram, &c) in &pc {
                let clip = rcs
                    .iter()
                    .map(|m| m.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched += c.min(clip);
            }
            self.match_n[n - 1] += matched;
            self.total_n[n - 1] += p.len().saturating_sub(n - 1) as u64;
        }
    }

    pub fn merge(&mut self, other: &BleuStats) {
        for i in 0..4 {
            self.match_n[i] += other.match_n[i];
            self.total_n[i] += other.total_n[i];
        }
        self.pred_len += other.pred_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self) -> f64 {
        if self.total_n[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0f64;
        for n in 0..4usize {
            let smooth = if n == 0 { 0.0 } else { 1.0 };
            let num = self.match_n[n] as f64 + smooth;
            let den = self.total_n[n] as f64 + smooth;
            if num == 0.0 || den == 0.0 {
                return 0.0;
            }
            log_sum += 0.25 * (num / den).ln();
        }
        let bp = if self.pred_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.pred_len.max(1) as f64).exp()
        } else {
            1.0
        };
        bp * log_sum.exp()
    }
}

/// Location of a labeled span: token range (inclusive) within one
/// passage of an example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanLabel {
    pub passage: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Find the token span (at most `max_len` tokens) across all passages
/// whose text maximizes ROUGE-L against `answer`. Ties resolve to the
/// earliest passage, then earliest start, then shortest span. Returns
/// None when the answer normalizes to nothing or no span scores above
/// zero (callers treat that as an empty-answer example).
pub fn max_rouge_span(
    passages: &[Vec<String>],
    answer: &str,
    max_len: usize,
    beta: f64,
) -> Option<SpanLabel> {
    let gold = eval_tokens(answer);
    if gold.is_empty() {
        return None;
    }
    let b2 = beta * beta;
    let mut best: Option<SpanLabel> = None;
    for (pi, raw) in passages.iter().enumerate() {
        let norm: Vec<Vec<String>> = raw.iter().map(|t| eval_tokens(t)).collect();
        for s in 0..raw.len() {
            // grow the span one raw token at a time, extending the LCS
            // table by one row per normalized token added
            let mut prev = vec![0usize; gold.len() + 1];
            let mut cur = vec![0usize; gold.len() + 1];
            let mut span_norm_len = 0usize;
            for e in s..raw.len().min(s + max_len) {
                for t in &norm[e] {
                    for (j, y) in gold.iter().enumerate() {
                        cur[j + 1] = if t == y {
                            prev[j] + 1
                        } else {
                            cur[j].max(prev[j + 1])
                        };
                    }
                    std::mem::swap(&mut prev, &mut cur);
                    cur.fill(0);
                    span_norm_len += 1;
                }
                if span_norm_len == 0 {
                    continue;
                }
                let lcs = prev[gold.len()] as f64;
                if lcs == 0.0 {
                    continue;
                }
                let p = lcs / span_norm_len as f64;
                let r = lcs / gold.len() as f64;
                let score = (1.0 + b2) * r * p / (r + b2 * p);
                if best.map_or(true, |b| score > b.score) {
                    best = Some(SpanLabel {
                        passage: pi,
                        start: s,
                        end: e,
                        score,
                    });
                }
            }
        }
    }
    best
}

pub const LENGTH_BUCKETS: [&str; 7] = ["1", "2", "3", "4", "5", "6-10", "11+"];

pub fn answer_length_bucket(n_tokens: usize) -> &'static str {
    match n_tokens {
        0 | 1 => "1",
        2 => "2",
        3 => "3",
        4 => "4",
        5 => "5",
        6..=10 => "6-10",
        _ => "11+",
    }
}

pub const QUESTION_TYPES: [&str; 8] =
    ["what", "who", "when", "which", "where", "why", "how", "other"];

/// Bucket a question by its first word. An explicit tag wins when it
/// names one of the known types; otherwise the question's first word
/// decides, and anything unrecognized is "other".
pub fn question_type(tag: Option<&str>, question: &str) -> &'static str {
    if let Some(t) = tag {
        let t = t.trim().to_lowercase();
        if let Some(known) = QUESTION_TYPES[..7].iter().find(|&&q| q == t) {
            return known;
        }
    }
    if let Some(word) = question.split_whitespace().next() {
        let w: String = word
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect::<String>()
            .to_lowercase();
        if let Some(known) = QUESTION_TYPES[..7].iter().find(|&&q| q == w) {
            return known;
        }
    }
    "other"
}
