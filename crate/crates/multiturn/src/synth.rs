//! Synthetic corpora with known structure: an overfit sanity set, a
//! multi-hop chain task, an OOV-salted variant task for the embedding
//! ablation, and a multi-passage ranking task with disjoint distractor
//! vocabulary. Every generator is a pure function of its seed.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, Passage, SpanTarget};
use crate::text::tokenize;

const CONSONANTS: [char; 12] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// Pronounceable CVCVC word, distinct across a pool by construction.
fn coin_word(rng: &mut impl Rng) -> String {
    let mut w = String::with_capacity(5);
    for i in 0..5 {
        if i % 2 == 0 {
            w.push(*CONSONANTS.choose(rng).unwrap());
        } else {
            w.push(*VOWELS.choose(rng).unwrap());
        }
    }
    w
}

/// A pool of distinct coined words, none colliding with `reserved`.
fn word_pool(n: usize, reserved: &[&str], rng: &mut impl Rng) -> Vec<String> {
    let mut seen: std::collections::BTreeSet<String> =
        reserved.iter().map(|s| s.to_string()).collect();
    let mut pool = Vec::with_capacity(n);
    while pool.len() < n {
        let w = coin_word(rng);
        if seen.insert(w.clone()) {
            pool.push(w);
        }
    }
    pool
}

/// Single-passage example whose answer span is given by token indices
/// into `tokens`.
fn span_example(id: String, question: &[&str], tokens: &[&str], start: usize, end: usize) -> Example {
    let text = tokens.join(" ");
    let passage = Passage::new(&text, true);
    debug_assert_eq!(
        passage.tokens.len(),
        tokens.len(),
        "tokenizer split a synthetic word"
    );
    let answer = passage.span_text(start, end).to_string();
    let q = question.join(" ");
    Example {
        id,
        question_tokens: tokenize(&q),
        question: q,
        passages: vec![passage],
        answers: vec![answer],
        query_type: None,
        span: Some(SpanTarget {
            passage: 0,
            start,
            end,
        }),
    }
}

/// Copy task for the overfit criterion: passages of 20..=40 tokens from
/// a 200-word vocabulary; the question is the three tokens preceding the
/// answer span, the answer the following 1..=2 tokens.
pub fn overfit_corpus(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = word_pool(200, &[], &mut rng);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(20..=40);
        let tokens: Vec<&str> = (0..len)
            .map(|_| pool.choose(&mut rng).unwrap().as_str())
            .collect();
        let span_len = rng.random_range(1..=2usize);
        let start = rng.random_range(3..=len - span_len);
        let end = start + span_len - 1;
        let question: Vec<&str> = tokens[start - 3..start].to_vec();
        out.push(span_example(
            format!("overfit-{i:03}"),
            &question,
            &tokens,
            start,
            end,
        ));
    }
    out
}

/// Knobs for the chain task.
#[derive(Clone, Copy, Debug)]
pub struct ChainSpec {
    /// Link facts per chain; the answer sits at the end of the chain.
    pub hops: usize,
    /// Interleaved chains per passage (1 gold + distractors).
    pub chains: usize,
    /// Entity pool size per role.
    pub pool: usize,
}

impl Default for ChainSpec {
    fn default() -> Self {
        ChainSpec {
            hops: 3,
            chains: 3,
            pool: 20,
        }
    }
}

const CHAIN_VERBS: [&str; 3] = ["met", "saw", "kept"];

/// One multi-hop example: `chains` parallel chains of `hops` link facts
/// each, fact order shuffled; the question names one chain's head and
/// the answer is that chain's tail object.
fn chain_example(
    id: String,
    spec: &ChainSpec,
    roles: &[Vec<String>],
    objects: &[String],
    rng: &mut impl Rng,
) -> Example {
    // one entity per role per chain, distinct within a role
    let picks: Vec<Vec<&str>> = roles
        .iter()
        .map(|pool| {
            let mut chosen: Vec<&str> = Vec::new();
            while chosen.len() < spec.chains {
                let w = pool.choose(rng).unwrap().as_str();
                if !chosen.contains(&w) {
                    chosen.push(w);
                }
            }
            chosen
        })
        .collect();
    let mut tails: Vec<&str> = Vec::new();
    while tails.len() < spec.chains {
        let w = objects.choose(rng).unwrap().as_str();
        if !tails.contains(&w) {
            tails.push(w);
        }
    }

    // facts[(chain, hop)] = [subject, verb, object, "."]
    let mut facts: Vec<(usize, Vec<&str>)> = Vec::new();
    for c in 0..spec.chains {
        for h in 0..spec.hops {
            let subj = picks[h][c];
            let obj = if h + 1 < spec.hops {
                picks[h + 1][c]
            } else {
                tails[c]
            };
            let verb = CHAIN_VERBS[h % CHAIN_VERBS.len()];
            facts.push((c, vec![subj, verb, obj, "."]));
        }
    }
    facts.shuffle(rng);

    let gold_chain = rng.random_range(0..spec.chains);
    let mut tokens: Vec<&str> = Vec::with_capacity(facts.len() * 4);
    let mut answer_pos = 0usize;
    for (chain, fact) in &facts {
        if *chain == gold_chain && fact[2] == tails[gold_chain] {
            answer_pos = tokens.len() + 2;
        }
        tokens.extend(fact.iter().copied());
    }
    let head = picks[0][gold_chain];
    let question = vec!["what", "did", head, "get"];
    span_example(id, &question, &tokens, answer_pos, answer_pos)
}

/// Train/dev corpora for the multi-hop criterion.
pub fn multihop_corpus(
    n_train: usize,
    n_dev: usize,
    spec: ChainSpec,
    seed: u64,
) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reserved = ["what", "did", "get", "met", "saw", "kept"];
    let roles: Vec<Vec<String>> = (0..spec.hops)
        .map(|_| word_pool(spec.pool, &reserved, &mut rng))
        .collect();
    let objects = word_pool(spec.pool, &reserved, &mut rng);
    let train = (0..n_train)
        .map(|i| chain_example(format!("hop-train-{i:04}"), &spec, &roles, &objects, &mut rng))
        .collect();
    let dev = (0..n_dev)
        .map(|i| chain_example(format!("hop-dev-{i:04}"), &spec, &roles, &objects, &mut rng))
        .collect();
    (train, dev)
}

/// Surface variant that shares the stem's letters but is a new word.
fn variant_of(stem: &str, rng: &mut impl Rng) -> String {
    match rng.random_range(0..3) {
        0 => format!("{stem}s"),
        1 => format!("{stem}ed"),
        _ => {
            let last = stem.chars().last().unwrap();
            format!("{stem}{last}a")
        }
    }
}

/// Lookup task for the embedding ablation: each passage lists
/// entity-holds-object facts and the question names one entity. Train
/// uses base entity forms; dev replaces every entity with an unseen
/// surface variant, so word-level lookup degrades to UNK while
/// character and trigram channels still see the stems.
pub fn ablation_corpus(
    n_train: usize,
    n_dev: usize,
    seed: u64,
) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reserved = ["what", "does", "hold", "holds"];
    let entities = word_pool(16, &reserved, &mut rng);
    let objects = word_pool(16, &reserved, &mut rng);
    let facts_per = 4usize;

    let make = |id: String, salt: bool, rng: &mut ChaCha8Rng| -> Example {
        let mut ents: Vec<String> = Vec::new();
        while ents.len() < facts_per {
            let e = entities.choose(rng).unwrap().clone();
            if !ents.contains(&e) {
                ents.push(e);
            }
        }
        if salt {
            for e in ents.iter_mut() {
                *e = variant_of(e, rng);
            }
        }
        let mut objs: Vec<&str> = Vec::new();
        while objs.len() < facts_per {
            let o = objects.choose(rng).unwrap().as_str();
            if !objs.contains(&o) {
                objs.push(o);
            }
        }
        let queried = rng.random_range(0..facts_per);
        let mut tokens: Vec<&str> = Vec::new();
        let mut answer_pos = 0usize;
        for k in 0..facts_per {
            if k == queried {
                answer_pos = tokens.len() + 2;
            }
            tokens.extend([ents[k].as_str(), "holds", objs[k], "."]);
        }
        let question = vec!["what", "does", ents[queried].as_str(), "hold"];
        span_example(id, &question, &tokens, answer_pos, answer_pos)
    };

    let train = (0..n_train)
        .map(|i| make(format!("abl-train-{i:04}"), false, &mut rng))
        .collect();
    let dev = (0..n_dev)
        .map(|i| make(format!("abl-dev-{i:04}"), true, &mut rng))
        .collect();
    (train, dev)
}

/// Multi-passage ranking task: each query gets one relevant passage
/// sharing its vocabulary and `passages_per - 1` distractors drawn from
/// a disjoint pool. The relevant passage carries the answer span and
/// the is_selected tag.
pub fn ranker_corpus(
    n_train: usize,
    n_dev: usize,
    passages_per: usize,
    seed: u64,
) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relevant_pool = word_pool(60, &[], &mut rng);
    let reserved: Vec<&str> = relevant_pool.iter().map(|s| s.as_str()).collect();
    let distractor_pool = word_pool(60, &reserved, &mut rng);

    let make = |id: String, rng: &mut ChaCha8Rng| -> Example {
        let q_words: Vec<&str> = relevant_pool
            .choose_multiple(rng, 4)
            .map(|s| s.as_str())
            .collect();
        let extra: Vec<&str> = relevant_pool
            .choose_multiple(rng, 4)
            .map(|s| s.as_str())
            .collect();
        let answer_len = rng.random_range(1..=2usize);
        let answer: Vec<&str> = relevant_pool
            .choose_multiple(rng, answer_len)
            .map(|s| s.as_str())
            .collect();

        let mut body: Vec<&str> = q_words.iter().chain(&extra).copied().collect();
        body.shuffle(rng);
        let insert_at = rng.random_range(0..=body.len());
        let mut rel_tokens: Vec<&str> = Vec::with_capacity(body.len() + answer.len());
        rel_tokens.extend(&body[..insert_at]);
        let start = rel_tokens.len();
        rel_tokens.extend(&answer);
        let end = rel_tokens.len() - 1;
        rel_tokens.extend(&body[insert_at..]);

        let gold_idx = rng.random_range(0..passages_per);
        let mut passages = Vec::with_capacity(passages_per);
        for j in 0..passages_per {
            if j == gold_idx {
                passages.push(Passage::new(&rel_tokens.join(" "), true));
            } else {
                let len = rng.random_range(8..=14);
                let toks: Vec<&str> = (0..len)
                    .map(|_| distractor_pool.choose(rng).unwrap().as_str())
                    .collect();
                passages.push(Passage::new(&toks.join(" "), false));
            }
        }
        let answer_text = passages[gold_idx].span_text(start, end).to_string();
        let q = q_words.join(" ");
        Example {
            id,
            question_tokens: tokenize(&q),
            question: q,
            passages,
            answers: vec![answer_text],
            query_type: None,
            span: Some(SpanTarget {
                passage: gold_idx,
                start,
                end,
            }),
        }
    };

    let train = (0..n_train)
        .map(|i| make(format!("rank-train-{i:04}"), &mut rng))
        .collect();
    let dev = (0..n_dev)
        .map(|i| make(format!("rank-dev-{i:04}"), &mut rng))
        .collect();
    (train, dev)
}
