//! Shared by the gradcheck and acceptance targets: a finite-difference
//! sweep over every parameter of the full differentiable stack
//! (embedding channels, co-attention, memory encoder, multi-turn
//! reasoner, contrastive-reward loss) on one toy instance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use multiturn::config::{Channels, Config, Mode};
use multiturn::layers::{encode_pair, EncodeSettings, TokenIds};
use multiturn::reasoner::{run_episode, Episode, EpisodeSettings, ModelParams};
use multiturn::tape::Tape;
use multiturn::text::{CharVocab, Vocab};
use multiturn::trainer::{bind_model_named, instance_loss, TrainOpts};

const GOLD: (usize, usize) = (1, 3);

fn toy_config() -> Config {
    let mut cfg = Config::default();
    cfg.word_dim = 5;
    cfg.char_dim = 3;
    cfg.char_filters = 3;
    cfg.char_window = 2;
    cfg.trigram_dim = 3;
    cfg.trigram_filters = 3;
    cfg.trigram_buckets = 13;
    cfg.embedding_channels = Channels::WordChar3gram;
    cfg.hidden_dim = 4;
    cfg.highway_layers = 1;
    cfg.t_max = 5;
    cfg.mode = Mode::Dynamic;
    cfg.dropout_embed = 0.0;
    cfg.dropout_gru = 0.0;
    cfg.train_word_embeddings = true;
    cfg
}

struct Fixture {
    cfg: Config,
    question: TokenIds,
    passage: TokenIds,
}

fn fixture() -> (Fixture, ModelParams<f64>) {
    let cfg = toy_config();
    let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build(words.iter().map(|s| s.as_str()), 1);
    let chars = CharVocab::build(words.iter().map(|s| s.as_str()));

    let q = ["w3", "w7", "w11"];
    let p = ["w0", "w3", "w5", "w7", "w12", "w19"];
    let question = TokenIds::build(q.iter().copied(), &vocab, &chars, cfg.trigram_buckets);
    let passage = TokenIds::build(p.iter().copied(), &vocab, &chars, cfg.trigram_buckets);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = ModelParams::new(&cfg, vocab.len(), chars.len(), &mut rng);
    (
        Fixture {
            cfg,
            question,
            passage,
        },
        model,
    )
}

fn episode(fx: &Fixture, model: &ModelParams<f64>) -> (Tape<f64>, Episode) {
    let mut tape = Tape::new(0);
    let bound = model.bind(&mut tape);
    let enc = encode_pair(
        &mut tape,
        &bound.layers,
        &fx.question,
        &fx.passage,
        &EncodeSettings::from_config(&fx.cfg, true),
    )
    .unwrap();
    let settings = EpisodeSettings::from_config(&fx.cfg, true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ep = run_episode(&mut tape, &bound.reasoner, &enc, &settings, &mut rng).unwrap();
    (tape, ep)
}

/// The exact function the tape differentiates: detached answer-path
/// weights and advantages are frozen at base-point values while the
/// distributions and the on-tape stop masses move with the parameters.
fn frozen_loss(fx: &Fixture, model: &ModelParams<f64>, pi0: &[f64], adv0: &[f64]) -> f64 {
    let (tape, ep) = episode(fx, model);
    let mut loss = 0.0;
    for (t, turn) in ep.turns.iter().enumerate() {
        let ys = tape.data(turn.y_s)[GOLD.0].max(1e-12).ln();
        let ye = tape.data(turn.y_e)[GOLD.1].max(1e-12).ln();
        loss -= pi0[t] * (ys + ye);
        loss -= adv0[t] * tape.data(turn.pi_v)[0];
    }
    loss
}

fn perturb(model: &mut ModelParams<f64>, name: &str, idx: usize, delta: f64) {
    model.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[idx] += delta;
        }
    });
}

pub struct GradSweep {
    pub checked: usize,
    /// |analytic - fd| / max(|analytic|, |fd|, 1e-5), worst coordinate.
    /// The floor keeps finite-difference noise on near-zero gradients
    /// from masquerading as relative error.
    pub max_rel: f64,
    pub worst: String,
    /// Coordinates violating |analytic - fd| <= 1e-8 + 1e-3 * magnitude.
    pub violations: Vec<String>,
}

pub fn grad_sweep() -> GradSweep {
    let (fx, mut model) = fixture();

    let mut tape = Tape::new(0);
    let (bound, named) = bind_model_named(&mut tape, &model);
    let enc = encode_pair(
        &mut tape,
        &bound.layers,
        &fx.question,
        &fx.passage,
        &EncodeSettings::from_config(&fx.cfg, true),
    )
    .unwrap();
    let settings = EpisodeSettings::from_config(&fx.cfg, true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ep = run_episode(&mut tape, &bound.reasoner, &enc, &settings, &mut rng).unwrap();
    let opts = TrainOpts::expected_contrastive();
    let il = instance_loss(&mut tape, &ep, GOLD, &opts, &mut rng).unwrap();
    let pi0 = ep.pi.clone();
    let adv0 = il.advantages.clone();

    // the frozen evaluator must reproduce the graph's base-point value
    let base = frozen_loss(&fx, &model, &pi0, &adv0);
    assert!(
        (base - il.loss).abs() < 1e-12,
        "frozen evaluator drifted: {base} vs {}",
        il.loss
    );

    let grads = tape.backward(il.total).unwrap();
    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit(&mut |name, t| names.push((name, t.data().len())));
    let analytic: Vec<Vec<f64>> = named
        .iter()
        .zip(&names)
        .map(|((_, v), (_, len))| {
            grads
                .get(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; *len])
        })
        .collect();

    let h = 1e-5;
    let mut sweep = GradSweep {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
        violations: Vec::new(),
    };
    for ((name, len), a) in names.iter().zip(&analytic) {
        for i in 0..*len {
            perturb(&mut model, name, i, h);
            let up = frozen_loss(&fx, &model, &pi0, &adv0);
            perturb(&mut model, name, i, -2.0 * h);
            let down = frozen_loss(&fx, &model, &pi0, &adv0);
            perturb(&mut model, name, i, h);
            let fd = (up - down) / (2.0 * h);
            let err = (a[i] - fd).abs();
            let rel = err / a[i].abs().max(fd.abs()).max(1e-5);
            if rel > sweep.max_rel {
                sweep.max_rel = rel;
                sweep.worst = format!("{name}[{i}]: analytic {} fd {fd}", a[i]);
            }
            if err > 1e-8 + 1e-3 * a[i].abs().max(fd.abs()) {
                sweep
                    .violations
                    .push(format!("{name}[{i}]: analytic {} vs fd {fd}", a[i]));
            }
            sweep.checked += 1;
        }
    }
    sweep
}
