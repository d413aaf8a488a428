//! Experiment orchestration: dataset preparation, the epoch loop with
//! early stopping and checkpointing, evaluation reports with
//! breakdowns, prediction and turn-analysis dumps, the mode/channel
//! grid, and ranker training plus span/score combination.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, Stamp};
use crate::config::{Channels, Config, Mode};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::layers::{encode_pair, EncodeSettings, TokenIds};
use crate::metrics::{
    answer_length_bucket, eval_tokens, exact_match, f1_score, question_type, rouge_l, BleuStats,
    QUESTION_TYPES,
};
use crate::ranker::{self, PassageSpan, RankQuery, RankerParams};
use crate::reasoner::{run_episode, Episode, EpisodeSettings, ModelParams};
use crate::tape::Tape;
use crate::tensor::Scalar;
use crate::text::{load_pretrained, CharVocab, Vocab};
use crate::trainer::{derive_seed, train_batch, AdaDelta, TrainInstance};

/// Text-pipeline state shared by every run over one corpus.
pub struct Pipeline {
    pub vocab: Vocab,
    pub chars: CharVocab,
}

impl Pipeline {
    /// Vocabularies come from the training split only.
    pub fn build(train: &[Example], cfg: &Config) -> Self {
        let mut words: Vec<&str> = Vec::new();
        for ex in train {
            for t in &ex.question_tokens {
                words.push(&t.text);
            }
            for p in &ex.passages {
                for t in &p.tokens {
                    words.push(&t.text);
                }
            }
        }
        Pipeline {
            vocab: Vocab::build(words.iter().copied(), cfg.min_count),
            chars: CharVocab::build(words.iter().copied()),
        }
    }

    /// Checkpoint stamp: model-semantics config hash plus vocabulary
    /// hash, so weights refuse to load under a different architecture
    /// or preprocessing while staying portable across data paths.
    pub fn stamp(&self, cfg: &Config) -> Stamp {
        Stamp {
            config_hash: cfg.model_fingerprint(),
            vocab_hash: self.vocab.fingerprint(),
        }
    }

    pub fn token_ids(&self, tokens: &[String], cfg: &Config) -> TokenIds {
        TokenIds::build(
            tokens.iter().map(|s| s.as_str()),
            &self.vocab,
            &self.chars,
            cfg.trigram_buckets,
        )
    }

    /// Reader training instance on the example's gold passage; None when
    /// no span label exists (kept for prediction, excluded from training).
    pub fn instance(&self, ex: &Example, cfg: &Config) -> Option<TrainInstance> {
        let span = ex.span?;
        let passage = &ex.passages[span.passage];
        Some(TrainInstance {
            question: self.token_ids(
                &ex.question_tokens
                    .iter()
                    .map(|t| t.text.clone())
                    .collect::<Vec<_>>(),
                cfg,
            ),
            passage: self.token_ids(&passage.token_texts(), cfg),
            gold: (span.start, span.end),
        })
    }

    /// Fresh model with seeded init and optional pretrained vectors.
    pub fn init_model<S: Scalar>(&self, cfg: &Config) -> Result<ModelParams<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = ModelParams::new(cfg, self.vocab.len(), self.chars.len(), &mut rng);
        if let Some(path) = &cfg.vectors_path {
            let (table, _found) = load_pretrained(path, &self.vocab, cfg.word_dim, cfg.seed)?;
            model
                .layers
                .embed
                .set_word_table(table, cfg.train_word_embeddings);
        }
        Ok(model)
    }
}

/// Load reader weights from a checkpoint into a freshly shaped model,
/// verifying the architecture and vocabulary stamps. Pretrained
/// vectors are not consulted; every weight comes from the file.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    cfg: &Config,
    pipe: &Pipeline,
) -> Result<ModelParams<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelParams::new(cfg, pipe.vocab.len(), pipe.chars.len(), &mut rng);
    checkpoint::load_model(path, &mut model, pipe.stamp(cfg))?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, Serialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: Option<f64>,
    pub em: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub model: ModelParams<S>,
    pub curve: Vec<CurveRow>,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub epochs_run: usize,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Loss-curve CSV: epoch,split,loss,EM,F1.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("epoch,split,loss,EM,F1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.split,
            fmt_opt(r.loss),
            fmt_opt(r.em),
            fmt_opt(r.f1)
        );
    }
    out
}

/// Epoch loop with seeded shuffles, dev-F1 early stopping (patience
/// from config), and best-dev model retention. An empty dev split
/// disables early stopping and the model from the last epoch wins.
pub fn train_model<S: Scalar>(
    cfg: &Config,
    pipe: &Pipeline,
    train: &[Example],
    dev: &[Example],
) -> Result<TrainOutcome<S>> {
    let instances: Vec<TrainInstance> = train
        .iter()
        .filter_map(|ex| pipe.instance(ex, cfg))
        .collect();
    if instances.is_empty() {
        return Err(Error::config("training dataset has no labeled examples"));
    }

    let mut model: ModelParams<S> = pipe.init_model(cfg)?;
    let mut opt = AdaDelta::from_config(cfg);
    let mut curve = Vec::new();
    let mut best: Option<(ModelParams<S>, usize, f64)> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let stats = train_batch(
                &mut model,
                &mut opt,
                &batch,
                cfg,
                epoch as u64,
                batches as u64 * cfg.batch_size as u64,
            )?;
            loss_sum += stats.loss;
            batches += 1;
        }
        curve.push(CurveRow {
            epoch,
            split: "train",
            loss: Some(loss_sum / batches as f64),
            em: None,
            f1: None,
        });

        if !dev.is_empty() {
            let report = evaluate(&model, cfg, pipe, dev)?;
            curve.push(CurveRow {
                epoch,
                split: "dev",
                loss: None,
                em: Some(report.em),
                f1: Some(report.f1),
            });
            let improved = best.as_ref().is_none_or(|&(_, _, f)| report.f1 > f);
            if improved {
                best = Some((model.clone(), epoch, report.f1));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }

    let (model, best_epoch, best_f1) = match best {
        Some(b) => b,
        None => (model, epochs_run.saturating_sub(1), f64::NAN),
    };
    Ok(TrainOutcome {
        model,
        curve,
        best_epoch,
        best_f1,
        epochs_run,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, Serialize)]
pub struct ExampleEval {
    pub id: String,
    pub prediction: String,
    pub em: f64,
    pub f1: f64,
    pub rouge: f64,
    pub bleu: f64,
    pub length_bucket: &'static str,
    pub q_type: &'static str,
    pub stop_turn: usize,
    pub decision_start: usize,
    pub decision_end: usize,
    pub pi: Vec<f64>,
    #[serde(skip)]
    pub bleu_stats: BleuStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct Breakdown {
    pub key: String,
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub rouge: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub rouge: f64,
    pub bleu: f64,
    pub count: usize,
    pub by_length: Vec<Breakdown>,
    pub by_type: Vec<Breakdown>,
    pub rows: Vec<ExampleEval>,
}

/// Run one inference episode for an example's reading passage.
fn infer_episode<S: Scalar>(
    model: &ModelParams<S>,
    cfg: &Config,
    pipe: &Pipeline,
    ex: &Example,
    passage_idx: usize,
    seed: u64,
) -> Result<Episode> {
    let q_tokens: Vec<String> = ex.question_tokens.iter().map(|t| t.text.clone()).collect();
    let question = pipe.token_ids(&q_tokens, cfg);
    let passage = pipe.token_ids(&ex.passages[passage_idx].token_texts(), cfg);
    let mut tape: Tape<S> = Tape::new(seed);
    let bound = model.bind(&mut tape);
    let enc = encode_pair(
        &mut tape,
        &bound.layers,
        &question,
        &passage,
        &EncodeSettings::from_config(cfg, false),
    )?;
    let settings = EpisodeSettings::from_config(cfg, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_episode(&mut tape, &bound.reasoner, &enc, &settings, &mut rng)
}

/// Score one predicted string against an example's gold answers.
fn score_row(
    ex: &Example,
    prediction: String,
    ep: Option<&Episode>,
    beta: f64,
) -> ExampleEval {
    let golds = ex.golds();
    let em = exact_match(&prediction, &golds);
    let f1 = f1_score(&prediction, &golds);
    debug_assert!(em <= f1 + 1e-12, "EM {em} > F1 {f1}");
    let rouge = rouge_l(&prediction, &golds, beta);
    let mut bleu_stats = BleuStats::default();
    bleu_stats.add(&prediction, &golds);
    let (stop_turn, decision, pi) = match ep {
        Some(e) => (e.stop_turn, e.decision_turns(), e.pi.clone()),
        None => (0, (0, 0), Vec::new()),
    };
    ExampleEval {
        id: ex.id.clone(),
        prediction,
        em,
        f1,
        rouge,
        bleu: bleu_stats.score(),
        length_bucket: answer_length_bucket(eval_tokens(&golds[0]).len()),
        q_type: question_type(ex.query_type.as_deref(), &ex.question),
        stop_turn,
        decision_start: decision.0,
        decision_end: decision.1,
        pi,
        bleu_stats,
    }
}

fn aggregate(rows: Vec<ExampleEval>) -> EvalReport {
    let n = rows.len() as f64;
    let em = rows.iter().map(|r| r.em).sum::<f64>() / n;
    let f1 = rows.iter().map(|r| r.f1).sum::<f64>() / n;
    let rouge = rows.iter().map(|r| r.rouge).sum::<f64>() / n;
    let mut corpus = BleuStats::default();
    for r in &rows {
        corpus.merge(&r.bleu_stats);
    }

    let bucket_table = |keys: Vec<&str>, key_of: &dyn Fn(&ExampleEval) -> &str| -> Vec<Breakdown> {
        keys.into_iter()
            .filter_map(|k| {
                let members: Vec<&ExampleEval> =
                    rows.iter().filter(|r| key_of(r) == k).collect();
                if members.is_empty() {
                    return None;
                }
                let c = members.len() as f64;
                Some(Breakdown {
                    key: k.to_string(),
                    count: members.len(),
                    em: members.iter().map(|r| r.em).sum::<f64>() / c,
                    f1: members.iter().map(|r| r.f1).sum::<f64>() / c,
                    rouge: members.iter().map(|r| r.rouge).sum::<f64>() / c,
                })
            })
            .collect()
    };
    let by_length = bucket_table(
        vec!["1", "2", "3", "4", "5", "6-10", "11+"],
        &|r| r.length_bucket,
    );
    let by_type = bucket_table(QUESTION_TYPES.to_vec(), &|r| r.q_type);

    EvalReport {
        em,
        f1,
        rouge,
        bleu: corpus.score(),
        count: rows.len(),
        by_length,
        by_type,
        rows,
    }
}

/// Reader evaluation over a dataset: each example is read on its gold
/// passage (first passage when unlabeled) and scored against the raw
/// answers.
pub fn evaluate<S: Scalar>(
    model: &ModelParams<S>,
    cfg: &Config,
    pipe: &Pipeline,
    examples: &[Example],
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let pidx = ex.span.map(|s| s.passage).unwrap_or(0);
        let ep = infer_episode(model, cfg, pipe, ex, pidx, derive_seed(cfg.seed, !0, i as u64))?;
        let prediction = ex.passages[pidx].span_text(ep.span.0, ep.span.1).to_string();
        rows.push(score_row(ex, prediction, Some(&ep), cfg.rouge_beta));
    }
    Ok(aggregate(rows))
}

/// Per-example report as a JSON array, row order preserved.
pub fn eval_json(report: &EvalReport) -> String {
    let mut out = serde_json::to_string_pretty(&report.rows).expect("report serializes");
    out.push('\n');
    out
}

/// Aggregates and breakdown tables as TSV.
pub fn eval_tsv(report: &EvalReport) -> String {
    let mut out = String::from("section\tkey\tcount\tEM\tF1\tROUGE-L\tBLEU\n");
    let _ = writeln!(
        out,
        "aggregate\tall\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        report.count, report.em, report.f1, report.rouge, report.bleu
    );
    for b in &report.by_length {
        let _ = writeln!(
            out,
            "answer_length\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t",
            b.key, b.count, b.em, b.f1, b.rouge
        );
    }
    for b in &report.by_type {
        let _ = writeln!(
            out,
            "question_type\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t",
            b.key, b.count, b.em, b.f1, b.rouge
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Prediction and turn analysis

/// id → detokenized answer for every example (gold passage when
/// labeled, first passage otherwise).
pub fn predict<S: Scalar>(
    model: &ModelParams<S>,
    cfg: &Config,
    pipe: &Pipeline,
    examples: &[Example],
) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let pidx = ex.span.map(|s| s.passage).unwrap_or(0);
        let ep = infer_episode(model, cfg, pipe, ex, pidx, derive_seed(cfg.seed, !0, i as u64))?;
        let answer = ex.passages[pidx].span_text(ep.span.0, ep.span.1).to_string();
        out.insert(ex.id.clone(), answer);
    }
    Ok(out)
}

pub fn predictions_json(preds: &BTreeMap<String, String>) -> String {
    let mut out = serde_json::to_string_pretty(preds).expect("map serializes");
    out.push('\n');
    out
}

/// Per-(example, turn) trace: τ, π, and that turn's argmax span.
pub fn trace_csv<S: Scalar>(
    model: &ModelParams<S>,
    cfg: &Config,
    pipe: &Pipeline,
    examples: &[Example],
) -> Result<String> {
    let mut out = String::from("id,turn,tau,pi,start,end\n");
    for (i, ex) in examples.iter().enumerate() {
        let pidx = ex.span.map(|s| s.passage).unwrap_or(0);
        let ep = infer_episode(model, cfg, pipe, ex, pidx, derive_seed(cfg.seed, !0, i as u64))?;
        for (t, turn) in ep.turns.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{}",
                ex.id,
                t + 1,
                turn.tau,
                ep.pi[t],
                turn.span.0,
                turn.span.1
            );
        }
    }
    Ok(out)
}

/// Stop-turn and decision-turn histograms over a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TurnTable {
    /// stops[t] = episodes stopping at turn t+1; same layout for the
    /// backward-looking decision start/end turns.
    pub stops: Vec<usize>,
    pub dec_start: Vec<usize>,
    pub dec_end: Vec<usize>,
}

pub fn analyze_turns<S: Scalar>(
    model: &ModelParams<S>,
    cfg: &Config,
    pipe: &Pipeline,
    examples: &[Example],
) -> Result<TurnTable> {
    let t_max = cfg.effective_t_max();
    let mut table = TurnTable {
        stops: vec![0; t_max],
        dec_start: vec![0; t_max],
        dec_end: vec![0; t_max],
    };
    for (i, ex) in examples.iter().enumerate() {
        let pidx = ex.span.map(|s| s.passage).unwrap_or(0);
        let ep = infer_episode(model, cfg, pipe, ex, pidx, derive_seed(cfg.seed, !0, i as u64))?;
        let (ds, de) = ep.decision_turns();
        table.stops[ep.stop_turn - 1] += 1;
        table.dec_start[ds - 1] += 1;
        table.dec_end[de - 1] += 1;
    }
    Ok(table)
}

pub fn turns_csv(table: &TurnTable) -> String {
    let mut out = String::from("turn,stops,decision_start,decision_end\n");
    for t in 0..table.stops.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            t + 1,
            table.stops[t],
            table.dec_start[t],
            table.dec_end[t]
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Run artifacts

/// Write the standard artifact set for one training run.
pub fn write_training_run<S: Scalar>(
    out_dir: &Path,
    cfg: &Config,
    pipe: &Pipeline,
    outcome: &TrainOutcome<S>,
    dev_report: Option<&EvalReport>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    cfg.write_resolved(out_dir)?;
    std::fs::write(out_dir.join("curve.csv"), curve_csv(&outcome.curve))?;
    checkpoint::save_model(&out_dir.join("model.ckpt"), &outcome.model, pipe.stamp(cfg))?;
    if let Some(report) = dev_report {
        std::fs::write(out_dir.join("eval.json"), eval_json(report))?;
        std::fs::write(out_dir.join("eval.tsv"), eval_tsv(report))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Grid

#[derive(Clone, Debug)]
pub struct GridCell {
    pub mode: Mode,
    pub channels: Channels,
    pub seed: u64,
    pub em: f64,
    pub f1: f64,
    pub rouge: f64,
    pub bleu: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Train and evaluate every (mode, channels, seed) cell sequentially.
/// Per-cell artifacts land in `out_dir/<mode>-<channels>-s<seed>/`
/// when an output directory is given.
pub fn run_grid<S: Scalar>(
    base: &Config,
    train: &[Example],
    dev: &[Example],
    out_dir: Option<&Path>,
) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for &mode in &base.grid_modes {
        for &channels in &base.grid_channels {
            for &seed in &base.grid_seeds {
                let mut cfg = base.clone();
                cfg.mode = mode;
                cfg.embedding_channels = channels;
                cfg.seed = seed;
                let pipe = Pipeline::build(train, &cfg);
                let outcome: TrainOutcome<S> = train_model(&cfg, &pipe, train, dev)?;
                let report = evaluate(&outcome.model, &cfg, &pipe, dev)?;
                if let Some(dir) = out_dir {
                    let cell_dir = dir.join(format!("{mode}-{channels}-s{seed}"));
                    write_training_run(&cell_dir, &cfg, &pipe, &outcome, Some(&report))?;
                    let turns = analyze_turns(&outcome.model, &cfg, &pipe, dev)?;
                    std::fs::write(cell_dir.join("turns.csv"), turns_csv(&turns))?;
                }
                cells.push(GridCell {
                    mode,
                    channels,
                    seed,
                    em: report.em,
                    f1: report.f1,
                    rouge: report.rouge,
                    bleu: report.bleu,
                    best_epoch: outcome.best_epoch,
                    epochs_run: outcome.epochs_run,
                });
            }
        }
    }
    Ok(cells)
}

/// Grid summary; one row per cell plus a mean row per (mode, channels).
pub fn grid_tsv(cells: &[GridCell]) -> String {
    let mut out = String::from("mode\tchannels\tseed\tEM\tF1\tROUGE-L\tBLEU\tbest_epoch\tepochs\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            c.mode, c.channels, c.seed, c.em, c.f1, c.rouge, c.bleu, c.best_epoch, c.epochs_run
        );
    }
    let mut groups: Vec<(Mode, Channels)> = Vec::new();
    for c in cells {
        if !groups.contains(&(c.mode, c.channels)) {
            groups.push((c.mode, c.channels));
        }
    }
    for (mode, channels) in groups {
        let members: Vec<&GridCell> = cells
            .iter()
            .filter(|c| c.mode == mode && c.channels == channels)
            .collect();
        let n = members.len() as f64;
        let _ = writeln!(
            out,
            "{}\t{}\tmean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t\t",
            mode,
            channels,
            members.iter().map(|c| c.em).sum::<f64>() / n,
            members.iter().map(|c| c.f1).sum::<f64>() / n,
            members.iter().map(|c| c.rouge).sum::<f64>() / n,
            members.iter().map(|c| c.bleu).sum::<f64>() / n,
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Ranker wiring

/// Ranking queries from ingested multi-passage examples; relevance is
/// the per-passage is_selected tag.
pub fn rank_queries(examples: &[Example]) -> Vec<RankQuery> {
    examples
        .iter()
        .map(|ex| RankQuery {
            question: ex.question_tokens.iter().map(|t| t.text.clone()).collect(),
            passages: ex.passages.iter().map(|p| p.token_texts()).collect(),
            relevant: ex.passages.iter().map(|p| p.is_selected).collect(),
        })
        .collect()
}

pub struct RankerOutcome<S: Scalar> {
    pub params: RankerParams<S>,
    pub epochs: Vec<ranker::RankerEpoch>,
    pub skipped: usize,
}

/// Seeded multi-epoch ranker training.
pub fn train_ranker<S: Scalar>(cfg: &Config, queries: &[RankQuery]) -> Result<RankerOutcome<S>> {
    if queries.is_empty() {
        return Err(Error::config("ranker training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = RankerParams::new(cfg, &mut rng);
    let mut opt = AdaDelta::from_config(cfg);
    let mut epochs = Vec::with_capacity(cfg.ranker_epochs);
    for epoch in 0..cfg.ranker_epochs {
        let stats = ranker::ranker_epoch(
            &mut params,
            &mut opt,
            queries,
            cfg.gamma,
            derive_seed(cfg.seed, epoch as u64, 0x7261_6e6b),
        )?;
        epochs.push(stats);
    }
    let skipped = epochs.last().map(|e| e.skipped).unwrap_or(0);
    Ok(RankerOutcome {
        params,
        epochs,
        skipped,
    })
}

/// Ranker scores for every passage of one example.
pub fn score_passages<S: Scalar>(
    params: &RankerParams<S>,
    ex: &Example,
) -> Result<Vec<f64>> {
    let q: Vec<String> = ex.question_tokens.iter().map(|t| t.text.clone()).collect();
    ex.passages
        .iter()
        .map(|p| {
            ranker::ranker_score(
                params,
                p.token_texts().iter().map(|s| s.as_str()),
                q.iter().map(|s| s.as_str()),
            )
        })
        .collect()
}

/// Fraction of examples whose is_selected passage gets the strictly
/// first argmax score.
pub fn ranker_top1<S: Scalar>(params: &RankerParams<S>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::config("ranker evaluation set is empty"));
    }
    let mut hits = 0usize;
    for ex in examples {
        let scores = score_passages(params, ex)?;
        let gold = ex.passages.iter().position(|p| p.is_selected);
        let top = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        if gold.is_some() && top == gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Reader output on every passage of one example, with the empty-span
/// floor applied.
pub fn passage_spans<S: Scalar>(
    model: &ModelParams<S>,
    cfg: &Config,
    pipe: &Pipeline,
    ex: &Example,
    seed: u64,
) -> Result<Vec<PassageSpan>> {
    let mut out = Vec::with_capacity(ex.passages.len());
    for (j, p) in ex.passages.iter().enumerate() {
        let ep = infer_episode(model, cfg, pipe, ex, j, derive_seed(seed, j as u64, 0))?;
        let text = p.span_text(ep.span.0, ep.span.1).to_string();
        out.push(PassageSpan::new(text, ep.span_score, cfg.empty_floor));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CombineReport {
    pub combine_em: f64,
    pub combine_rouge: f64,
    pub oracle_em: f64,
    pub oracle_rouge: f64,
    pub count: usize,
}

/// Combined (reader × ranker) answering versus gold-passage oracle
/// selection over a multi-passage dataset.
pub fn combine_eval<S: Scalar>(
    model: &ModelParams<S>,
    rparams: &RankerParams<S>,
    cfg: &Config,
    pipe: &Pipeline,
    examples: &[Example],
) -> Result<CombineReport> {
    if examples.is_empty() {
        return Err(Error::config("combine evaluation set is empty"));
    }
    let mut combine_em = 0.0;
    let mut combine_rouge = 0.0;
    let mut oracle_em = 0.0;
    let mut oracle_rouge = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let spans = passage_spans(model, cfg, pipe, ex, derive_seed(cfg.seed, !0, i as u64))?;
        let scores = score_passages(rparams, ex)?;
        let golds = ex.golds();

        let combined = ranker::combine(&spans, &scores)?;
        combine_em += exact_match(&combined.answer, &golds);
        combine_rouge += rouge_l(&combined.answer, &golds, cfg.rouge_beta);

        let gold_idx = ex.passages.iter().position(|p| p.is_selected);
        let oracle = ranker::oracle_select(&spans, gold_idx)?;
        oracle_em += exact_match(&oracle.answer, &golds);
        oracle_rouge += rouge_l(&oracle.answer, &golds, cfg.rouge_beta);
    }
    let n = examples.len() as f64;
    Ok(CombineReport {
        combine_em: combine_em / n,
        combine_rouge: combine_rouge / n,
        oracle_em: oracle_em / n,
        oracle_rouge: oracle_rouge / n,
        count: examples.len(),
    })
}
