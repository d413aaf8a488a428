//! Output layer: reasoning-state recurrence over memory reads, the
//! stochastic termination gate, span answer heads, and per-turn traces.

use rand::Rng;

use crate::config::{Config, Decode, Mode};
use crate::error::{Error, Result};
use crate::layers::{
    gru_cell, linear, BoundGru, BoundLayers, BoundLinear, EncodedPair, GruParams, LayersParams,
    LinearParams,
};
use crate::tape::{Tape, Value};
use crate::tensor::{Scalar, Tensor};

/// Hidden widths of the termination feed-forward net.
const TERM_HIDDEN: [usize; 3] = [10, 10, 10];

#[derive(Clone, Debug)]
pub struct ReasonerParams<S: Scalar> {
    pub state_gru: GruParams<S>,
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
    pub term: Vec<LinearParams<S>>,
    pub w_s: Tensor<S>,
    pub w_e: Tensor<S>,
    pub w_ps: Tensor<S>,
    pub w_pe: Tensor<S>,
}

impl<S: Scalar> ReasonerParams<S> {
    pub fn new(hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let dd = 2 * hidden_dim;
        let mut term = Vec::with_capacity(TERM_HIDDEN.len() + 1);
        let mut inp = dd;
        for &h in &TERM_HIDDEN {
            term.push(LinearParams::new(h, inp, rng));
            inp = h;
        }
        term.push(LinearParams::new(1, inp, rng));
        ReasonerParams {
            state_gru: GruParams::new(dd, dd, rng),
            w1: Tensor::xavier(dd, dd, rng).with_grad(),
            w2: Tensor::xavier(dd, dd, rng).with_grad(),
            term,
            w_s: Tensor::randn(&[2 * dd], 0.1, rng).with_grad(),
            w_e: Tensor::randn(&[2 * dd], 0.1, rng).with_grad(),
            w_ps: Tensor::xavier(dd, dd, rng).with_grad(),
            w_pe: Tensor::xavier(dd, dd, rng).with_grad(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        self.state_gru.visit(&format!("{prefix}.state_gru"), f);
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.w2"), &self.w2);
        for (i, l) in self.term.iter().enumerate() {
            l.visit(&format!("{prefix}.term{i}"), f);
        }
        f(format!("{prefix}.w_s"), &self.w_s);
        f(format!("{prefix}.w_e"), &self.w_e);
        f(format!("{prefix}.w_ps"), &self.w_ps);
        f(format!("{prefix}.w_pe"), &self.w_pe);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        self.state_gru.visit_mut(&format!("{prefix}.state_gru"), f);
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.w2"), &mut self.w2);
        for (i, l) in self.term.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.term{i}"), f);
        }
        f(format!("{prefix}.w_s"), &mut self.w_s);
        f(format!("{prefix}.w_e"), &mut self.w_e);
        f(format!("{prefix}.w_ps"), &mut self.w_ps);
        f(format!("{prefix}.w_pe"), &mut self.w_pe);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundReasoner {
        BoundReasoner {
            state_gru: self.state_gru.bind(tape),
            w1: tape.leaf(self.w1.clone()),
            w2: tape.leaf(self.w2.clone()),
            term: self.term.iter().map(|l| l.bind(tape)).collect(),
            w_s: tape.leaf(self.w_s.clone()),
            w_e: tape.leaf(self.w_e.clone()),
            w_ps: tape.leaf(self.w_ps.clone()),
            w_pe: tape.leaf(self.w_pe.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundReasoner {
    pub state_gru: BoundGru,
    pub w1: Value,
    pub w2: Value,
    pub term: Vec<BoundLinear>,
    pub w_s: Value,
    pub w_e: Value,
    pub w_ps: Value,
    pub w_pe: Value,
}

/// The whole trainable model: representation stack plus reasoner.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub layers: LayersParams<S>,
    pub reasoner: ReasonerParams<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new(cfg: &Config, vocab_size: usize, char_vocab_size: usize, rng: &mut impl Rng) -> Self {
        ModelParams {
            layers: LayersParams::new(cfg, vocab_size, char_vocab_size, rng),
            reasoner: ReasonerParams::new(cfg.hidden_dim, rng),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        self.layers.visit("layers", f);
        self.reasoner.visit("reasoner", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        self.layers.visit_mut("layers", f);
        self.reasoner.visit_mut("reasoner", f);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundModel {
        BoundModel {
            layers: self.layers.bind(tape),
            reasoner: self.reasoner.bind(tape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub layers: BoundLayers,
    pub reasoner: BoundReasoner,
}

/// Per-episode switches, all derived from the run config.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeSettings {
    pub t_max: usize,
    pub mode: Mode,
    pub decode: Decode,
    pub lambda: f64,
    pub l_max: usize,
    pub dropout_gru: f64,
    pub training: bool,
}

impl EpisodeSettings {
    pub fn from_config(cfg: &Config, training: bool) -> Self {
        EpisodeSettings {
            t_max: cfg.effective_t_max(),
            mode: cfg.mode,
            decode: cfg.decode,
            lambda: cfg.lambda,
            l_max: cfg.l_max,
            dropout_gru: cfg.dropout_gru,
            training,
        }
    }

    pub fn inference(t_max: usize, mode: Mode) -> Self {
        EpisodeSettings {
            t_max,
            mode,
            decode: Decode::Marginal,
            lambda: 10.0,
            l_max: 50,
            dropout_gru: 0.0,
            training: false,
        }
    }
}

/// One reasoning turn: tape handles for the differentiable pieces plus
/// plain trace values.
#[derive(Clone, Copy, Debug)]
pub struct Turn {
    pub tau_v: Value,
    pub pi_v: Value,
    pub y_s: Value,
    pub y_e: Value,
    pub tau: f64,
    /// unconstrained argmaxes of the two endpoint distributions
    pub arg_s: usize,
    pub arg_e: usize,
    /// constrained span prediction at this turn
    pub span: (usize, usize),
    pub span_score: f64,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub turns: Vec<Turn>,
    /// stop-turn distribution; sums to 1.0 exactly when added left to right
    pub pi: Vec<f64>,
    /// chosen stop turn, 1-based
    pub stop_turn: usize,
    pub span: (usize, usize),
    pub span_score: f64,
    pub state_updates: usize,
}

/// S₀ = [forward state at the last question position; backward state at
/// the first], i.e. the outermost states of the question encoding.
pub fn init_state<S: Scalar>(tape: &mut Tape<S>, hq: Value) -> Result<Value> {
    let shape = tape.shape(hq).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "init_state",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (dd, m) = (shape[0], shape[1]);
    let d = dd / 2;
    let last = tape.col(hq, m - 1)?;
    let fwd = tape.slice(last, 0, d)?;
    let first = tape.col(hq, 0)?;
    let bwd = tape.slice(first, d, dd)?;
    tape.concat_rows(&[fwd, bwd])
}

/// a = softmax over memory positions of λ·cos(w₁mᵢ, w₂S_t);
/// X_t = Σᵢ aᵢ·mᵢ. `w1mp` is the precomputed w₁·Mp, shared across turns.
pub fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    w1mp: Value,
    mp: Value,
    w2: Value,
    state: Value,
    lambda: f64,
) -> Result<(Value, Value)> {
    let w2s = tape.matmul(w2, state)?;
    let cos = tape.cosine_cols(w1mp, w2s)?;
    let scaled = tape.scale(cos, S::from_f64(lambda));
    let a = tape.softmax(scaled, 0)?;
    let x = tape.matmul(mp, a)?;
    Ok((x, a))
}

/// Feed-forward 2d→10→10→10→1 with ReLU hiddens and sigmoid output.
pub fn terminate_prob<S: Scalar>(
    tape: &mut Tape<S>,
    term: &[BoundLinear],
    state: Value,
) -> Result<Value> {
    let mut h = state;
    for (i, l) in term.iter().enumerate() {
        h = linear(tape, l, h)?;
        if i + 1 < term.len() {
            h = tape.relu(h);
        }
    }
    Ok(tape.sigmoid(h))
}

/// One endpoint head: softmax(wᵀ[Mp ; (w_pᵀMp)∘S_t]) over positions,
/// with `pre` = w_pᵀMp precomputed once per episode.
pub fn answer_head<S: Scalar>(
    tape: &mut Tape<S>,
    w: Value,
    pre: Value,
    mp: Value,
    state: Value,
) -> Result<Value> {
    let gated = tape.mul_col_vec(pre, state)?;
    let cat = tape.concat_rows(&[mp, gated])?;
    let scores = tape.matmul(w, cat)?;
    tape.softmax(scores, 0)
}

/// Best span under s ≤ e ≤ s+l_max, maximizing y_s[s]·y_e[e]; first
/// maximum in (s, e) order wins ties.
pub fn constrained_span(y_s: &[f64], y_e: &[f64], l_max: usize) -> (usize, usize, f64) {
    let n = y_s.len();
    let (mut bs, mut be, mut best) = (0usize, 0usize, f64::NEG_INFINITY);
    for s in 0..n {
        let hi = (s + l_max).min(n - 1);
        for e in s..=hi {
            let score = y_s[s] * y_e[e];
            if score > best {
                best = score;
                bs = s;
                be = e;
            }
        }
    }
    (bs, be, best)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (i, &x) in xs.iter().enumerate() {
        if x > best {
            best = x;
            arg = i;
        }
    }
    arg
}

fn to_f64_vec<S: Scalar>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(|&x| Scalar::to_f64(x)).collect()
}

/// Run the reasoning loop over an encoded pair. Turn t reads memory
/// from S_{t−1}, performs the state update to S_t, then evaluates the
/// termination gate and answer heads on S_t, so a fixed-K episode does
/// exactly K state updates. The trace π uses the residual construction:
/// the final entry is 1 minus the running sum, so adding the entries
/// left to right yields exactly 1.0.
pub fn run_episode<S: Scalar>(
    tape: &mut Tape<S>,
    r: &BoundReasoner,
    enc: &EncodedPair,
    settings: &EpisodeSettings,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let t_max = match settings.mode {
        Mode::Single => 1,
        _ => settings.t_max,
    };
    if t_max == 0 {
        return Err(Error::config("t_max must be at least 1"));
    }

    // turn-invariant pieces
    let w1mp = tape.matmul(r.w1, enc.mp)?;
    let w_ps_t = tape.transpose(r.w_ps)?;
    let pre_s = tape.matmul(w_ps_t, enc.mp)?;
    let w_pe_t = tape.transpose(r.w_pe)?;
    let pre_e = tape.matmul(w_pe_t, enc.mp)?;

    let mut state = init_state(tape, enc.hq)?;
    let mut state_updates = 0usize;

    // per-turn τ handles; the final turn is forced to 1
    let mut taus: Vec<Value> = Vec::with_capacity(t_max);
    let mut heads: Vec<(Value, Value)> = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let (x, _a) = attend(tape, w1mp, enc.mp, r.w2, state, settings.lambda)?;
        let x = tape.dropout(x, settings.dropout_gru, settings.training)?;
        state = gru_cell(tape, &r.state_gru, state, x)?;
        state_updates += 1;

        let tau = match settings.mode {
            Mode::Dynamic if t < t_max => terminate_prob(tape, &r.term, state)?,
            Mode::Fixed if t < t_max => tape.constant(Tensor::scalar(S::zero())),
            _ => tape.constant(Tensor::scalar(S::one())),
        };
        taus.push(tau);
        let y_s = answer_head(tape, r.w_s, pre_s, enc.mp, state)?;
        let y_e = answer_head(tape, r.w_e, pre_e, enc.mp, state)?;
        heads.push((y_s, y_e));
    }

    // π_t = τ_t·Π_{k<t}(1−τ_k) on the tape, residual for the last turn
    let mut pi_v: Vec<Value> = Vec::with_capacity(t_max);
    let mut survive: Option<Value> = None;
    for (t, &tau) in taus.iter().enumerate() {
        if t + 1 == t_max {
            let one = tape.constant(Tensor::scalar(S::one()));
            let mut acc: Option<Value> = None;
            for &p in &pi_v {
                acc = Some(match acc {
                    None => p,
                    Some(a) => tape.add(a, p)?,
                });
            }
            let last = match acc {
                None => one,
                Some(a) => tape.sub(one, a)?,
            };
            pi_v.push(last);
        } else {
            let p = match survive {
                None => tau,
                Some(sv) => tape.mul(sv, tau)?,
            };
            pi_v.push(p);
            let neg = tape.scale(tau, S::from_f64(-1.0));
            let om = tape.add_const(neg, S::one());
            survive = Some(match survive {
                None => om,
                Some(sv) => tape.mul(sv, om)?,
            });
        }
    }

    // trace π: clamp each entry into the remaining headroom so the
    // left-to-right float sum lands on exactly 1.0
    let mut pi = vec![0f64; t_max];
    let mut running = 0f64;
    for t in 0..t_max - 1 {
        let raw = Scalar::to_f64(tape.data(pi_v[t])[0]);
        let p = raw.min(1.0 - running).max(0.0);
        pi[t] = p;
        running += p;
    }
    pi[t_max - 1] = (1.0 - running).max(0.0);

    let mut turns = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let (y_s, y_e) = heads[t];
        let ys = to_f64_vec(tape.data(y_s));
        let ye = to_f64_vec(tape.data(y_e));
        let (s, e, score) = constrained_span(&ys, &ye, settings.l_max);
        turns.push(Turn {
            tau_v: taus[t],
            pi_v: pi_v[t],
            y_s,
            y_e,
            tau: Scalar::to_f64(tape.data(taus[t])[0]),
            arg_s: argmax(&ys),
            arg_e: argmax(&ye),
            span: (s, e),
            span_score: score,
        });
    }

    let stop_turn = match settings.decode {
        Decode::Marginal => argmax(&pi) + 1,
        Decode::Greedy => {
            let mut stop = t_max;
            for (t, turn) in turns.iter().enumerate() {
                if turn.tau > 0.5 {
                    stop = t + 1;
                    break;
                }
            }
            stop
        }
        Decode::Sample => {
            let u: f64 = rng.random();
            let mut cum = 0f64;
            let mut stop = t_max;
            for (t, &p) in pi.iter().enumerate() {
                cum += p;
                if u < cum {
                    stop = t + 1;
                    break;
                }
            }
            stop
        }
    };

    let chosen = &turns[stop_turn - 1];
    Ok(Episode {
        span: chosen.span,
        span_score: chosen.span_score,
        turns,
        pi,
        stop_turn,
        state_updates,
    })
}

/// Stabilization turn of each endpoint: the earliest turn from which
/// the endpoint argmax never changes up to the stop turn.
pub fn decision_turn(arg_s: &[usize], arg_e: &[usize], stop_turn: usize) -> (usize, usize) {
    let settle = |args: &[usize]| -> usize {
        let target = args[stop_turn - 1];
        let mut turn = stop_turn;
        for t in (0..stop_turn - 1).rev() {
            if args[t] == target {
                turn = t + 1;
            } else {
                break;
            }
        }
        turn
    };
    (settle(arg_s), settle(arg_e))
}

impl Episode {
    /// (start_turn, end_turn) stabilization per decision_turn.
    pub fn decision_turns(&self) -> (usize, usize) {
        let arg_s: Vec<usize> = self.turns.iter().map(|t| t.arg_s).collect();
        let arg_e: Vec<usize> = self.turns.iter().map(|t| t.arg_e).collect();
        decision_turn(&arg_s, &arg_e, self.stop_turn)
    }
}
