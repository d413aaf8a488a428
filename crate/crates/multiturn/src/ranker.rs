//! Letter-trigram convolutional passage ranker and the span/score
//! combination rules for multi-passage answering.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Stamp, RANKER_MAGIC};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tape::{Tape, Value};
use crate::tensor::{Scalar, Tensor};
use crate::text::trigram_counts;
use crate::trainer::{accumulate_grads, AdaDelta, GradMap};

/// Shared convolutional tower applied to both passage and question.
#[derive(Clone, Debug)]
pub struct RankerParams<S: Scalar> {
    pub conv_w: Tensor<S>,
    pub conv_b: Tensor<S>,
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
    pub buckets: u32,
    pub window: usize,
}

pub struct BoundRanker {
    pub conv_w: Value,
    pub conv_b: Value,
    pub proj_w: Value,
    pub proj_b: Value,
}

impl<S: Scalar> RankerParams<S> {
    pub fn new(cfg: &Config, rng: &mut impl Rng) -> Self {
        let k = cfg.ranker_filters;
        let cols = cfg.trigram_buckets as usize * cfg.ranker_window;
        RankerParams {
            conv_w: Tensor::xavier(k, cols, rng).with_grad(),
            conv_b: Tensor::zeros(&[k]).with_grad(),
            proj_w: Tensor::xavier(cfg.ranker_proj, k, rng).with_grad(),
            proj_b: Tensor::zeros(&[cfg.ranker_proj]).with_grad(),
            buckets: cfg.trigram_buckets,
            window: cfg.ranker_window,
        }
    }

    pub fn zeros(cfg: &Config) -> Self {
        let k = cfg.ranker_filters;
        let cols = cfg.trigram_buckets as usize * cfg.ranker_window;
        RankerParams {
            conv_w: Tensor::zeros(&[k, cols]).with_grad(),
            conv_b: Tensor::zeros(&[k]).with_grad(),
            proj_w: Tensor::zeros(&[cfg.ranker_proj, k]).with_grad(),
            proj_b: Tensor::zeros(&[cfg.ranker_proj]).with_grad(),
            buckets: cfg.trigram_buckets,
            window: cfg.ranker_window,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f("ranker.conv_w".into(), &self.conv_w);
        f("ranker.conv_b".into(), &self.conv_b);
        f("ranker.proj_w".into(), &self.proj_w);
        f("ranker.proj_b".into(), &self.proj_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f("ranker.conv_w".into(), &mut self.conv_w);
        f("ranker.conv_b".into(), &mut self.conv_b);
        f("ranker.proj_w".into(), &mut self.proj_w);
        f("ranker.proj_b".into(), &mut self.proj_b);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundRanker {
        BoundRanker {
            conv_w: tape.leaf(self.conv_w.clone()),
            conv_b: tape.leaf(self.conv_b.clone()),
            proj_w: tape.leaf(self.proj_w.clone()),
            proj_b: tape.leaf(self.proj_b.clone()),
        }
    }

    pub fn save(&self, path: &Path, stamp: Stamp) -> Result<()> {
        let mut entries = Vec::new();
        self.visit(&mut |name, t| entries.push((name, t)));
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        checkpoint::save_named(&mut w, RANKER_MAGIC, &entries, stamp)?;
        use std::io::Write;
        w.flush()?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, expected: Stamp) -> Result<()> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut loaded = checkpoint::load_named(&mut r, RANKER_MAGIC)?;
        checkpoint::check_stamp(loaded.stamp, expected)?;
        checkpoint::fill_from(&mut loaded, |f| self.visit_mut(&mut |n, t| f(n, t)))
    }
}

/// Aggregated letter-trigram counts for one word, sorted by bucket id.
pub fn word_trigram_counts<S: Scalar>(word: &str, buckets: u32) -> Vec<(u32, S)> {
    trigram_counts(word, buckets)
        .into_iter()
        .map(|(id, c)| (id, S::from_f64(c as f64)))
        .collect()
}

/// Per-word count vectors for a token sequence.
pub fn text_trigram_counts<'a, S: Scalar>(
    tokens: impl IntoIterator<Item = &'a str>,
    buckets: u32,
) -> Vec<Vec<(u32, S)>> {
    tokens
        .into_iter()
        .map(|w| word_trigram_counts(w, buckets))
        .collect()
}

/// Tower forward: counts → conv + position max-pool → projection.
pub fn tower<S: Scalar>(
    tape: &mut Tape<S>,
    p: &RankerParams<S>,
    b: &BoundRanker,
    words: Vec<Vec<(u32, S)>>,
) -> Result<Value> {
    let pooled = tape.sparse_conv_maxpool(b.conv_w, b.conv_b, words, p.buckets as usize, p.window)?;
    let v = tape.matmul(b.proj_w, pooled)?;
    tape.add(v, b.proj_b)
}

/// Relevance score on the tape; cosine guards zero vectors to 0.
pub fn score_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    p: &RankerParams<S>,
    b: &BoundRanker,
    passage: Vec<Vec<(u32, S)>>,
    question: Vec<Vec<(u32, S)>>,
) -> Result<Value> {
    let vp = tower(tape, p, b, passage)?;
    let vq = tower(tape, p, b, question)?;
    tape.cosine(vp, vq)
}

/// Inference-time relevance of a (passage, question) pair in [-1, 1].
pub fn ranker_score<'a, S: Scalar>(
    params: &RankerParams<S>,
    passage: impl IntoIterator<Item = &'a str>,
    question: impl IntoIterator<Item = &'a str>,
) -> Result<f64> {
    let mut tape: Tape<S> = Tape::new(0);
    let bound = params.bind(&mut tape);
    let pc = text_trigram_counts(passage, params.buckets);
    let qc = text_trigram_counts(question, params.buckets);
    if pc.is_empty() || qc.is_empty() {
        return Err(Error::EmptyInput("ranker_score"));
    }
    let r = score_on_tape(&mut tape, params, &bound, pc, qc)?;
    Ok(Scalar::to_f64(tape.data(r)[0]))
}

/// One ranking query: tokenized question, candidate passages, and
/// which candidates are relevant.
#[derive(Clone, Debug)]
pub struct RankQuery {
    pub question: Vec<String>,
    pub passages: Vec<Vec<String>>,
    pub relevant: Vec<bool>,
}

impl RankQuery {
    /// All-relevant or all-irrelevant queries carry no training signal.
    pub fn degenerate(&self) -> bool {
        let rel = self.relevant.iter().filter(|&&r| r).count();
        rel == 0 || rel == self.relevant.len()
    }
}

/// Softmax-over-candidates loss for one query, averaged over the
/// relevant passages: −log exp(γ·r_rel) / Σ_j exp(γ·r_j).
pub fn query_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &RankerParams<S>,
    bound: &BoundRanker,
    query: &RankQuery,
    gamma: f64,
) -> Result<Value> {
    let qc: Vec<Vec<(u32, S)>> =
        text_trigram_counts(query.question.iter().map(|s| s.as_str()), params.buckets);
    let vq = tower(tape, params, bound, qc)?;
    let mut scores = Vec::with_capacity(query.passages.len());
    for p in &query.passages {
        let pc: Vec<Vec<(u32, S)>> =
            text_trigram_counts(p.iter().map(|s| s.as_str()), params.buckets);
        let vp = tower(tape, params, bound, pc)?;
        scores.push(tape.cosine(vp, vq)?);
    }
    let r = tape.concat_rows(&scores)?;
    let scaled = tape.scale(r, S::from_f64(gamma));
    let probs = tape.softmax(scaled, 1)?;
    let mut acc: Option<Value> = None;
    let mut rel_count = 0usize;
    for (j, &is_rel) in query.relevant.iter().enumerate() {
        if !is_rel {
            continue;
        }
        rel_count += 1;
        let pj = tape.slice(probs, j, j + 1)?;
        let lj = tape.log(pj);
        acc = Some(match acc {
            None => lj,
            Some(a) => tape.add(a, lj)?,
        });
    }
    let acc = acc.ok_or(Error::EmptyInput("query_loss"))?;
    Ok(tape.scale(acc, S::from_f64(-1.0 / rel_count as f64)))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RankerEpoch {
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

/// One seeded epoch of per-query AdaDelta updates. Degenerate queries
/// are skipped and counted.
pub fn ranker_epoch<S: Scalar>(
    params: &mut RankerParams<S>,
    opt: &mut AdaDelta,
    queries: &[RankQuery],
    gamma: f64,
    seed: u64,
) -> Result<RankerEpoch> {
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut stats = RankerEpoch::default();
    for qi in order {
        let q = &queries[qi];
        if q.degenerate() {
            stats.skipped += 1;
            continue;
        }
        let mut tape: Tape<S> = Tape::new(seed ^ qi as u64);
        let bound = params.bind(&mut tape);
        let named: Vec<(String, Value)> = {
            let mut v = Vec::new();
            let mut idx = 0usize;
            params.visit(&mut |name, _| {
                v.push((name, Value(idx)));
                idx += 1;
            });
            v
        };
        let loss = query_loss(&mut tape, params, &bound, q, gamma)?;
        let loss_val = Scalar::to_f64(tape.data(loss)[0]);
        if !loss_val.is_finite() {
            return Err(Error::TrainAbort(format!(
                "non-finite ranker loss {loss_val} on query {qi}"
            )));
        }
        stats.loss += loss_val;
        stats.used += 1;
        let grads = tape.backward(loss)?;
        let mut acc = GradMap::new();
        accumulate_grads(&grads, &named, &mut acc);
        params.visit_mut(&mut |name, t| {
            if let Some(g) = acc.get(&name) {
                opt.step(&name, t, g);
            }
        });
    }
    if stats.used > 0 {
        stats.loss /= stats.used as f64;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Combination of reader spans with ranker scores

/// Reader output for one passage: best constrained span and its
/// probability, with the empty marker set when the probability fell
/// below the floor.
#[derive(Clone, Debug)]
pub struct PassageSpan {
    pub text: String,
    pub prob: f64,
    pub empty: bool,
}

impl PassageSpan {
    pub fn new(text: String, prob: f64, floor: f64) -> Self {
        let empty = prob < floor;
        PassageSpan { text, prob, empty }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub choice: Option<usize>,
    pub answer: String,
}

/// Multiplicative combination: argmax_j prob_j · (r_j+1)/2 over
/// passages that produced a real span. Empty-marked passages never win
/// (they carry no answer); if every passage is empty the prediction is
/// empty.
pub fn combine(spans: &[PassageSpan], scores: &[f64]) -> Result<Combined> {
    if spans.is_empty() || spans.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "combine",
            lhs: vec![spans.len()],
            rhs: vec![scores.len()],
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, (s, &r)) in spans.iter().zip(scores).enumerate() {
        if s.empty {
            continue;
        }
        let weight = s.prob * (r + 1.0) / 2.0;
        if best.is_none_or(|(_, w)| weight > w) {
            best = Some((j, weight));
        }
    }
    Ok(match best {
        Some((j, _)) => Combined {
            choice: Some(j),
            answer: spans[j].text.clone(),
        },
        None => Combined {
            choice: None,
            answer: String::new(),
        },
    })
}

/// Upper-bound selection: always the reader's span from the gold passage.
pub fn oracle_select(spans: &[PassageSpan], gold: Option<usize>) -> Result<Combined> {
    let g = gold.ok_or_else(|| Error::config("oracle selection requires a gold passage index"))?;
    if g >= spans.len() {
        return Err(Error::IndexOutOfRange {
            what: "gold passage",
            index: g,
            len: spans.len(),
        });
    }
    Ok(Combined {
        choice: Some(g),
        answer: if spans[g].empty {
            String::new()
        } else {
            spans[g].text.clone()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.trigram_buckets = 23;
        cfg.ranker_filters = 4;
        cfg.ranker_window = 2;
        cfg.ranker_proj = 3;
        cfg.gamma = 10.0;
        cfg
    }

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn identical_texts_score_one() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = RankerParams::<f64>::new(&cfg, &mut rng);
        let text = ["同", "the", "cat", "sat"];
        let r = ranker_score(&params, text.iter().copied(), text.iter().copied()).unwrap();
        assert!((r - 1.0).abs() < 1e-9, "self similarity {r}");
    }

    #[test]
    fn zero_weights_guard_to_zero() {
        let cfg = tiny_cfg();
        let params = RankerParams::<f64>::zeros(&cfg);
        let r = ranker_score(&params, ["alpha", "beta"].into_iter(), ["gamma"].into_iter())
            .unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn empty_text_is_an_error() {
        let cfg = tiny_cfg();
        let params = RankerParams::<f64>::zeros(&cfg);
        assert!(ranker_score(&params, [].into_iter(), ["x"].into_iter()).is_err());
    }

    #[test]
    fn word_counts_ignore_word_order() {
        let a = word_trigram_counts::<f64>("reorder", 23);
        let b = word_trigram_counts::<f64>("reorder", 23);
        assert_eq!(a, b);
        // permuting words permutes the sequence but not each word's counts
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = RankerParams::<f64>::new(&cfg, &mut rng);
        let q = ["what", "is", "it"];
        let r1 = ranker_score(&params, ["red", "ball", "falls"].into_iter(), q.into_iter()).unwrap();
        let r2 = ranker_score(&params, ["falls", "red", "ball"].into_iter(), q.into_iter()).unwrap();
        assert_ne!(r1, r2, "window 2 conv should see order");
    }

    #[test]
    fn duplicate_trigrams_accumulate() {
        let counts = word_trigram_counts::<f64>("aaaa", 23);
        let total: f64 = counts.iter().map(|&(_, c)| c).sum();
        // "#aaaa#" has 4 trigrams, "aaa" twice among them
        assert_eq!(total, 4.0);
        assert!(counts.iter().any(|&(_, c)| c >= 2.0));
    }

    #[test]
    fn zero_weight_loss_is_log_j() {
        let cfg = tiny_cfg();
        let params = RankerParams::<f64>::zeros(&cfg);
        for j in [2usize, 3, 5] {
            let query = RankQuery {
                question: toks(&["what", "now"]),
                passages: (0..j).map(|i| toks(&[&format!("word{i}"), "tail"])).collect(),
                relevant: (0..j).map(|i| i == 0).collect(),
            };
            let mut tape: Tape<f64> = Tape::new(0);
            let bound = params.bind(&mut tape);
            let loss = query_loss(&mut tape, &params, &bound, &query, cfg.gamma).unwrap();
            let got = tape.data(loss)[0];
            assert!(
                (got - (j as f64).ln()).abs() < 1e-12,
                "J={j}: loss {got} vs {}",
                (j as f64).ln()
            );
        }
    }

    #[test]
    fn query_loss_gradcheck() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = RankerParams::<f64>::new(&cfg, &mut rng);
        let query = RankQuery {
            question: toks(&["which", "one"]),
            passages: vec![toks(&["red", "ball"]), toks(&["blue", "sky", "high"])],
            relevant: vec![true, false],
        };
        let eval = |p: &RankerParams<f64>| -> f64 {
            let mut tape: Tape<f64> = Tape::new(0);
            let bound = p.bind(&mut tape);
            let loss = query_loss(&mut tape, p, &bound, &query, cfg.gamma).unwrap();
            tape.data(loss)[0]
        };
        let mut tape: Tape<f64> = Tape::new(0);
        let bound = params.bind(&mut tape);
        let named: Vec<(String, Value)> = {
            let mut v = Vec::new();
            let mut idx = 0;
            params.visit(&mut |n, _| {
                v.push((n, Value(idx)));
                idx += 1;
            });
            v
        };
        let loss = query_loss(&mut tape, &params, &bound, &query, cfg.gamma).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut acc = GradMap::new();
        accumulate_grads(&grads, &named, &mut acc);

        let h = 1e-6;
        let mut checked = 0;
        let tensor_names: Vec<(String, usize)> = {
            let mut v = Vec::new();
            params.visit(&mut |n, t| v.push((n, t.data().len())));
            v
        };
        for (name, len) in tensor_names {
            let zero = vec![0.0; len];
            let analytic = acc.get(&name).unwrap_or(&zero).clone();
            for i in (0..len).step_by((len / 4).max(1)) {
                let bump = |params: &mut RankerParams<f64>, d: f64| {
                    params.visit_mut(&mut |n, t| {
                        if n == name {
                            t.data_mut()[i] += d;
                        }
                    });
                };
                bump(&mut params, h);
                let plus = eval(&params);
                bump(&mut params, -2.0 * h);
                let minus = eval(&params);
                bump(&mut params, h);
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic[i];
                assert!(
                    (a - fd).abs() <= 1e-7 + 1e-4 * a.abs().max(fd.abs()),
                    "{name}[{i}]: analytic {a} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }

    #[test]
    fn disjoint_pair_separates_after_training() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = RankerParams::<f64>::new(&cfg, &mut rng);
        let mut opt = AdaDelta::new(0.5, 0.95, 1e-6);
        let query = RankQuery {
            question: toks(&["where", "is", "tokyo"]),
            passages: vec![
                toks(&["tokyo", "sits", "in", "japan"]),
                toks(&["llamas", "chew", "grass"]),
            ],
            relevant: vec![true, false],
        };
        let queries = vec![query.clone()];
        for epoch in 0..60 {
            ranker_epoch(&mut params, &mut opt, &queries, cfg.gamma, 100 + epoch).unwrap();
        }
        let q: Vec<&str> = query.question.iter().map(|s| s.as_str()).collect();
        let rel = ranker_score(
            &params,
            query.passages[0].iter().map(|s| s.as_str()),
            q.iter().copied(),
        )
        .unwrap();
        let irr = ranker_score(
            &params,
            query.passages[1].iter().map(|s| s.as_str()),
            q.iter().copied(),
        )
        .unwrap();
        assert!(rel > irr, "rel {rel} vs irrel {irr}");
    }

    #[test]
    fn degenerate_queries_are_skipped_and_counted() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = RankerParams::<f64>::new(&cfg, &mut rng);
        let mut opt = AdaDelta::new(0.5, 0.95, 1e-6);
        let queries = vec![
            RankQuery {
                question: toks(&["q"]),
                passages: vec![toks(&["a"]), toks(&["b"])],
                relevant: vec![true, true],
            },
            RankQuery {
                question: toks(&["q"]),
                passages: vec![toks(&["a"]), toks(&["b"])],
                relevant: vec![false, false],
            },
            RankQuery {
                question: toks(&["q"]),
                passages: vec![toks(&["a"]), toks(&["b"])],
                relevant: vec![true, false],
            },
        ];
        let stats = ranker_epoch(&mut params, &mut opt, &queries, cfg.gamma, 7).unwrap();
        assert_eq!(stats.skipped, 2);
        assert_eq!(stats.used, 1);
    }

    #[test]
    fn combine_picks_highest_product() {
        let spans = vec![
            PassageSpan::new("first".into(), 0.9, 1e-4),
            PassageSpan::new("second".into(), 0.8, 1e-4),
        ];
        // r̃ = 0.1 and 0.9 → r = -0.8 and 0.8
        let out = combine(&spans, &[-0.8, 0.8]).unwrap();
        assert_eq!(out.choice, Some(1));
        assert_eq!(out.answer, "second");
    }

    #[test]
    fn combine_single_passage_and_all_empty() {
        let one = vec![PassageSpan::new("only".into(), 0.5, 1e-4)];
        let out = combine(&one, &[-0.99]).unwrap();
        assert_eq!(out.choice, Some(0));
        assert_eq!(out.answer, "only");

        let empty = vec![
            PassageSpan::new("x".into(), 1e-6, 1e-4),
            PassageSpan::new("y".into(), 0.0, 1e-4),
        ];
        let out = combine(&empty, &[0.5, 0.5]).unwrap();
        assert_eq!(out.choice, None);
        assert_eq!(out.answer, "");
    }

    #[test]
    fn combine_ignores_empty_even_when_first() {
        let spans = vec![
            PassageSpan::new("ghost".into(), 1e-9, 1e-4),
            PassageSpan::new("real".into(), 0.2, 1e-4),
        ];
        let out = combine(&spans, &[1.0, -1.0]).unwrap();
        // real passage has weight 0 but still beats the empty marker
        assert_eq!(out.choice, Some(1));
        assert_eq!(out.answer, "real");
    }

    #[test]
    fn combine_choice_invariant_to_common_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let j = rng.random_range(1..6);
            let spans: Vec<PassageSpan> = (0..j)
                .map(|i| PassageSpan::new(format!("s{i}"), rng.random::<f64>(), 1e-4))
                .collect();
            let rtilde: Vec<f64> = (0..j).map(|_| rng.random::<f64>()).collect();
            let c: f64 = rng.random::<f64>() * 0.9 + 0.1;
            let scores: Vec<f64> = rtilde.iter().map(|&x| 2.0 * x - 1.0).collect();
            let scaled: Vec<f64> = rtilde.iter().map(|&x| 2.0 * (c * x) - 1.0).collect();
            let a = combine(&spans, &scores).unwrap();
            let b = combine(&spans, &scaled).unwrap();
            assert_eq!(a.choice, b.choice);
        }
    }

    #[test]
    fn oracle_contract() {
        let spans = vec![
            PassageSpan::new("a".into(), 0.9, 1e-4),
            PassageSpan::new("b".into(), 0.1, 1e-4),
            PassageSpan::new("c".into(), 0.4, 1e-4),
        ];
        let out = oracle_select(&spans, Some(1)).unwrap();
        assert_eq!(out.choice, Some(1));
        assert_eq!(out.answer, "b");
        assert!(oracle_select(&spans, None).is_err());
        assert!(oracle_select(&spans, Some(3)).is_err());

        // single passage: same answer as combine
        let one = vec![PassageSpan::new("solo".into(), 0.7, 1e-4)];
        assert_eq!(
            oracle_select(&one, Some(0)).unwrap().answer,
            combine(&one, &[0.3]).unwrap().answer
        );
    }

    #[test]
    fn checkpoint_round_trip_with_ranker_magic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src = RankerParams::<f64>::new(&cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranker.ckpt");
        let stamp = Stamp {
            config_hash: 11,
            vocab_hash: 22,
        };
        src.save(&path, stamp).unwrap();

        // model magic must not open a ranker checkpoint
        let mut r = std::io::BufReader::new(std::fs::File::open(&path).unwrap());
        assert!(checkpoint::load_named(&mut r, checkpoint::MODEL_MAGIC).is_err());

        let mut dst = RankerParams::<f64>::zeros(&cfg);
        dst.load(&path, stamp).unwrap();
        assert_eq!(
            (src.conv_w.data()[0] as f32),
            (dst.conv_w.data()[0] as f32)
        );
        assert_eq!(src.proj_w.data().len(), dst.proj_w.data().len());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let run = || -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut params = RankerParams::<f64>::new(&cfg, &mut rng);
            let mut opt = AdaDelta::new(0.5, 0.95, 1e-6);
            let queries = vec![RankQuery {
                question: toks(&["who", "won"]),
                passages: vec![toks(&["the", "team", "won"]), toks(&["rain", "fell"])],
                relevant: vec![true, false],
            }];
            for e in 0..5 {
                ranker_epoch(&mut params, &mut opt, &queries, cfg.gamma, e).unwrap();
            }
            params.conv_w.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
