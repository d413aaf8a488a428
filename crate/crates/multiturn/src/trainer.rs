//! Loss construction for the termination policy and answer heads,
//! AdaDelta optimization, and single-batch training steps. Epoch
//! orchestration lives in the harness.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{Advantage, Config};
use crate::error::{Error, Result};
use crate::layers::TokenIds;
use crate::reasoner::{run_episode, BoundModel, Episode, EpisodeSettings, ModelParams};
use crate::tape::{Gradients, Tape, Value};
use crate::tensor::{Scalar, Tensor};

/// Loss-shape switches, all from the run config.
#[derive(Clone, Copy, Debug)]
pub struct TrainOpts {
    pub advantage: Advantage,
    pub reward_grad_to_answer: bool,
    pub sampled_termination: bool,
}

impl TrainOpts {
    pub fn from_config(cfg: &Config) -> Self {
        TrainOpts {
            advantage: cfg.advantage,
            reward_grad_to_answer: cfg.reward_grad_to_answer,
            sampled_termination: cfg.sampled_termination,
        }
    }

    pub fn expected_contrastive() -> Self {
        TrainOpts {
            advantage: Advantage::Contrastive,
            reward_grad_to_answer: false,
            sampled_termination: false,
        }
    }
}

/// Tape handles and diagnostics for one example's loss.
#[derive(Clone, Debug)]
pub struct InstanceLoss {
    pub total: Value,
    pub loss: f64,
    pub rewards: Vec<f64>,
    pub baseline: f64,
    pub advantages: Vec<f64>,
}

/// Detached per-turn rewards r_t = y_s[s*]·y_e[e*] and the stop-mass
/// baseline b = Σ_t π_t·r_t.
fn detached_rewards<S: Scalar>(
    tape: &Tape<S>,
    ep: &Episode,
    gold: (usize, usize),
) -> (Vec<f64>, f64) {
    let rewards: Vec<f64> = ep
        .turns
        .iter()
        .map(|t| {
            Scalar::to_f64(tape.data(t.y_s)[gold.0]) * Scalar::to_f64(tape.data(t.y_e)[gold.1])
        })
        .collect();
    let baseline = rewards.iter().zip(&ep.pi).map(|(r, p)| r * p).sum();
    (rewards, baseline)
}

fn advantage_of(r: f64, baseline: f64, kind: Advantage) -> f64 {
    match kind {
        Advantage::Contrastive => {
            if baseline <= 1e-12 {
                0.0
            } else {
                r / baseline - 1.0
            }
        }
        Advantage::Additive => r - baseline,
    }
}

/// Contrastive-reward objective for one episode.
///
/// Expected form (default): L_ans = −Σ_t π̄_t(log y_s^t[s*] + log y_e^t[e*])
/// with π̄ detached, plus L_term = −Σ_t π_t·Ā_t where the advantage
/// Ā_t = r̄_t/b̄ − 1 (or r̄_t − b̄) is detached unless
/// reward_grad_to_answer routes live rewards through it. Sampled form:
/// one stop turn drawn from π̄ gives a single-turn cross-entropy plus
/// −log π_{t*}·Ā_{t*}.
pub fn instance_loss<S: Scalar>(
    tape: &mut Tape<S>,
    ep: &Episode,
    gold: (usize, usize),
    opts: &TrainOpts,
    rng: &mut impl Rng,
) -> Result<InstanceLoss> {
    let n = tape.shape(ep.turns[0].y_s)[0];
    let (s_star, e_star) = gold;
    if s_star > e_star || e_star >= n {
        return Err(Error::IndexOutOfRange {
            what: "gold span",
            index: e_star,
            len: n,
        });
    }

    let (rewards, baseline) = detached_rewards(tape, ep, gold);
    let advantages: Vec<f64> = rewards
        .iter()
        .map(|&r| advantage_of(r, baseline, opts.advantage))
        .collect();

    let log_pair = |tape: &mut Tape<S>, t: usize| -> Result<Value> {
        let turn = &ep.turns[t];
        let ys = tape.slice(turn.y_s, s_star, s_star + 1)?;
        let ye = tape.slice(turn.y_e, e_star, e_star + 1)?;
        let ls = tape.log(ys);
        let le = tape.log(ye);
        tape.add(ls, le)
    };

    let live_advantage = |tape: &mut Tape<S>, t: usize| -> Result<Value> {
        let turn = &ep.turns[t];
        let ys = tape.slice(turn.y_s, s_star, s_star + 1)?;
        let ye = tape.slice(turn.y_e, e_star, e_star + 1)?;
        let r = tape.mul(ys, ye)?;
        Ok(match opts.advantage {
            Advantage::Contrastive => {
                if baseline <= 1e-12 {
                    tape.constant(Tensor::scalar(S::zero()))
                } else {
                    let scaled = tape.scale(r, S::from_f64(1.0 / baseline));
                    tape.add_const(scaled, S::from_f64(-1.0))
                }
            }
            Advantage::Additive => tape.add_const(r, S::from_f64(-baseline)),
        })
    };

    let total = if opts.sampled_termination {
        // single-sample REINFORCE estimate of the expected objective
        let u: f64 = rng.random();
        let mut cum = 0f64;
        let mut t_star = ep.turns.len() - 1;
        for (t, &p) in ep.pi.iter().enumerate() {
            cum += p;
            if u < cum {
                t_star = t;
                break;
            }
        }
        let pair = log_pair(tape, t_star)?;
        let l_ans = tape.scale(pair, S::from_f64(-1.0));
        let log_pi = tape.log(ep.turns[t_star].pi_v);
        let term = if opts.reward_grad_to_answer {
            let a = live_advantage(tape, t_star)?;
            let prod = tape.mul(log_pi, a)?;
            Some(tape.scale(prod, S::from_f64(-1.0)))
        } else if advantages[t_star] != 0.0 {
            Some(tape.scale(log_pi, S::from_f64(-advantages[t_star])))
        } else {
            None
        };
        match term {
            Some(lt) => tape.add(l_ans, lt)?,
            None => l_ans,
        }
    } else {
        let mut ans_acc: Option<Value> = None;
        for t in 0..ep.turns.len() {
            if ep.pi[t] == 0.0 {
                continue; // exact zero mass contributes nothing
            }
            let pair = log_pair(tape, t)?;
            let weighted = tape.scale(pair, S::from_f64(ep.pi[t]));
            ans_acc = Some(match ans_acc {
                None => weighted,
                Some(a) => tape.add(a, weighted)?,
            });
        }
        let ans_acc = ans_acc.ok_or(Error::EmptyInput("instance_loss"))?;
        let l_ans = tape.scale(ans_acc, S::from_f64(-1.0));

        let mut term_acc: Option<Value> = None;
        for t in 0..ep.turns.len() {
            let contrib = if opts.reward_grad_to_answer {
                let a = live_advantage(tape, t)?;
                Some(tape.mul(ep.turns[t].pi_v, a)?)
            } else if advantages[t] != 0.0 {
                Some(tape.scale(ep.turns[t].pi_v, S::from_f64(advantages[t])))
            } else {
                None
            };
            if let Some(c) = contrib {
                term_acc = Some(match term_acc {
                    None => c,
                    Some(a) => tape.add(a, c)?,
                });
            }
        }
        match term_acc {
            Some(acc) => {
                let l_term = tape.scale(acc, S::from_f64(-1.0));
                tape.add(l_ans, l_term)?
            }
            None => l_ans,
        }
    };

    Ok(InstanceLoss {
        loss: Scalar::to_f64(tape.data(total)[0]),
        total,
        rewards,
        baseline,
        advantages,
    })
}

// ---------------------------------------------------------------------------
// AdaDelta

#[derive(Clone, Debug, Default)]
struct AdaState {
    eg2: Vec<f64>,
    ed2: Vec<f64>,
}

/// Per-parameter AdaDelta with f64 accumulators keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdaDelta {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    state: BTreeMap<String, AdaState>,
    pub skipped: usize,
}

impl AdaDelta {
    pub fn new(lr: f64, rho: f64, eps: f64) -> Self {
        AdaDelta {
            lr,
            rho,
            eps,
            state: BTreeMap::new(),
            skipped: 0,
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        Self::new(cfg.lr, cfg.rho, cfg.epsilon)
    }

    /// E[g²] ← ρE[g²]+(1−ρ)g²; Δ = −lr·√(E[Δ²]+ε)/√(E[g²]+ε)·g;
    /// E[Δ²] ← ρE[Δ²]+(1−ρ)Δ²; param += Δ. Non-finite gradients skip
    /// the whole tensor and are counted.
    pub fn step<S: Scalar>(&mut self, name: &str, param: &mut Tensor<S>, grad: &[f64]) -> bool {
        if grad.iter().any(|g| !g.is_finite()) {
            eprintln!("warning: non-finite gradient for {name}, update skipped");
            self.skipped += 1;
            return false;
        }
        let st = self.state.entry(name.to_string()).or_insert_with(|| AdaState {
            eg2: vec![0.0; grad.len()],
            ed2: vec![0.0; grad.len()],
        });
        debug_assert_eq!(st.eg2.len(), grad.len());
        let data = param.data_mut();
        for (i, &g) in grad.iter().enumerate() {
            st.eg2[i] = self.rho * st.eg2[i] + (1.0 - self.rho) * g * g;
            let delta = -self.lr * ((st.ed2[i] + self.eps).sqrt() / (st.eg2[i] + self.eps).sqrt()) * g;
            st.ed2[i] = self.rho * st.ed2[i] + (1.0 - self.rho) * delta * delta;
            data[i] = S::from_f64(Scalar::to_f64(data[i]) + delta);
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Batch plumbing

pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Bind the model onto a fresh tape, returning the bound handles plus
/// the (name, leaf) pairs in declaration order.
pub fn bind_model_named<S: Scalar>(
    tape: &mut Tape<S>,
    model: &ModelParams<S>,
) -> (BoundModel, Vec<(String, Value)>) {
    let start = tape.len();
    let bound = model.bind(tape);
    let mut named = Vec::new();
    let mut idx = start;
    model.visit(&mut |name, t| {
        debug_assert_eq!(tape.shape(Value(idx)), t.shape());
        named.push((name, Value(idx)));
        idx += 1;
    });
    debug_assert_eq!(idx, tape.len() - (tape.len() - start - named.len()));
    (bound, named)
}

/// Add this tape's parameter gradients into the accumulator.
pub fn accumulate_grads<S: Scalar>(
    grads: &Gradients<S>,
    named: &[(String, Value)],
    acc: &mut GradMap,
) {
    for (name, v) in named {
        if let Some(g) = grads.get(*v) {
            let slot = acc
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (a, &b) in slot.iter_mut().zip(g) {
                *a += Scalar::to_f64(b);
            }
        }
    }
}

/// Scale every accumulated gradient by 1/count (batch mean).
pub fn mean_reduce(acc: &mut GradMap, count: usize) {
    let inv = 1.0 / count as f64;
    for g in acc.values_mut() {
        for x in g.iter_mut() {
            *x *= inv;
        }
    }
}

/// Global-norm clipping; returns the pre-clip norm.
pub fn clip_global_norm(acc: &mut GradMap, clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in acc.values() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in acc.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Apply accumulated gradients to the model.
pub fn apply_grads<S: Scalar>(model: &mut ModelParams<S>, opt: &mut AdaDelta, acc: &GradMap) {
    model.visit_mut(&mut |name, t| {
        if let Some(g) = acc.get(&name) {
            opt.step(&name, t, g);
        }
    });
}

/// One prepared training example.
#[derive(Clone, Debug)]
pub struct TrainInstance {
    pub question: TokenIds,
    pub passage: TokenIds,
    pub gold: (usize, usize),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
}

/// Mix a per-example seed out of (run seed, epoch, example index).
pub fn derive_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Forward/backward over a batch, mean-reduce, clip, AdaDelta step.
/// NaN losses abort with a diagnostic instead of poisoning the model.
pub fn train_batch<S: Scalar>(
    model: &mut ModelParams<S>,
    opt: &mut AdaDelta,
    batch: &[&TrainInstance],
    cfg: &Config,
    epoch: u64,
    base_index: u64,
) -> Result<BatchStats> {
    use rand::SeedableRng;
    if batch.is_empty() {
        return Err(Error::EmptyInput("train_batch"));
    }
    let settings = EpisodeSettings::from_config(cfg, true);
    let enc_settings = crate::layers::EncodeSettings::from_config(cfg, true);
    let opts = TrainOpts::from_config(cfg);

    let mut acc = GradMap::new();
    let mut loss_sum = 0.0;
    let mut reward_sum = 0.0;
    for (k, inst) in batch.iter().enumerate() {
        let ex_seed = derive_seed(cfg.seed, epoch, base_index + k as u64);
        let mut tape: Tape<S> = Tape::new(ex_seed);
        let (bound, named) = bind_model_named(&mut tape, model);
        let enc = crate::layers::encode_pair(
            &mut tape,
            &bound.layers,
            &inst.question,
            &inst.passage,
            &enc_settings,
        )?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ex_seed ^ 0x5bd1_e995);
        let ep = run_episode(&mut tape, &bound.reasoner, &enc, &settings, &mut rng)?;
        let il = instance_loss(&mut tape, &ep, inst.gold, &opts, &mut rng)?;
        if !il.loss.is_finite() {
            return Err(Error::TrainAbort(format!(
                "non-finite loss {} at epoch {epoch} example {}",
                il.loss,
                base_index + k as u64
            )));
        }
        loss_sum += il.loss;
        reward_sum += il
            .rewards
            .iter()
            .zip(&ep.pi)
            .map(|(r, p)| r * p)
            .sum::<f64>();
        let grads = tape.backward(il.total)?;
        accumulate_grads(&grads, &named, &mut acc);
    }

    mean_reduce(&mut acc, batch.len());
    let grad_norm = clip_global_norm(&mut acc, cfg.clip_norm);
    apply_grads(model, opt, &acc);

    Ok(BatchStats {
        loss: loss_sum / batch.len() as f64,
        grad_norm,
        mean_reward: reward_sum / batch.len() as f64,
    })
}
