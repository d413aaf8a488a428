//! Representation stack: embedding channels, highway network, BiGRU
//! encoders, co-attention aggregation, and passage memory construction.
//!
//! Parameters live in plain tensors; each episode binds them onto a
//! fresh tape as leaves and runs the forward pass on the bound handles.

use rand::Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tape::{Tape, Value};
use crate::tensor::{Scalar, Tensor};
use crate::text::{letter_trigram_ids, CharVocab, Vocab};

/// Forward-pass switches shared by every layer.
#[derive(Clone, Copy, Debug)]
pub struct EncodeSettings {
    pub dropout_embed: f64,
    pub dropout_gru: f64,
    pub training: bool,
    pub softmax_over_question: bool,
}

impl EncodeSettings {
    pub fn inference() -> Self {
        EncodeSettings {
            dropout_embed: 0.0,
            dropout_gru: 0.0,
            training: false,
            softmax_over_question: false,
        }
    }

    pub fn from_config(cfg: &Config, training: bool) -> Self {
        EncodeSettings {
            dropout_embed: cfg.dropout_embed,
            dropout_gru: cfg.dropout_gru,
            training,
            softmax_over_question: cfg.softmax_over_question,
        }
    }
}

/// Per-token id views of a token sequence, precomputed outside the tape.
#[derive(Clone, Debug, Default)]
pub struct TokenIds {
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    pub trigrams: Vec<Vec<u32>>,
}

impl TokenIds {
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        vocab: &Vocab,
        chars: &CharVocab,
        buckets: u32,
    ) -> TokenIds {
        let mut ids = TokenIds::default();
        for text in texts {
            ids.words.push(vocab.id(text) as usize);
            ids.chars.push(text.chars().map(|c| chars.id(c) as usize).collect());
            ids.trigrams.push(letter_trigram_ids(text, buckets));
        }
        ids
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Parameter groups

#[derive(Clone, Debug)]
pub struct GruParams<S: Scalar> {
    pub wz: Tensor<S>,
    pub uz: Tensor<S>,
    pub wr: Tensor<S>,
    pub ur: Tensor<S>,
    pub wh: Tensor<S>,
    pub uh: Tensor<S>,
}

impl<S: Scalar> GruParams<S> {
    pub fn new(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        GruParams {
            wz: Tensor::xavier(hidden, input, rng).with_grad(),
            uz: Tensor::xavier(hidden, hidden, rng).with_grad(),
            wr: Tensor::xavier(hidden, input, rng).with_grad(),
            ur: Tensor::xavier(hidden, hidden, rng).with_grad(),
            wh: Tensor::xavier(hidden, input, rng).with_grad(),
            uh: Tensor::xavier(hidden, hidden, rng).with_grad(),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            wz: Tensor::zeros(&[hidden, input]).with_grad(),
            uz: Tensor::zeros(&[hidden, hidden]).with_grad(),
            wr: Tensor::zeros(&[hidden, input]).with_grad(),
            ur: Tensor::zeros(&[hidden, hidden]).with_grad(),
            wh: Tensor::zeros(&[hidden, input]).with_grad(),
            uh: Tensor::zeros(&[hidden, hidden]).with_grad(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.wz"), &self.wz);
        f(format!("{prefix}.uz"), &self.uz);
        f(format!("{prefix}.wr"), &self.wr);
        f(format!("{prefix}.ur"), &self.ur);
        f(format!("{prefix}.wh"), &self.wh);
        f(format!("{prefix}.uh"), &self.uh);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.wz"), &mut self.wz);
        f(format!("{prefix}.uz"), &mut self.uz);
        f(format!("{prefix}.wr"), &mut self.wr);
        f(format!("{prefix}.ur"), &mut self.ur);
        f(format!("{prefix}.wh"), &mut self.wh);
        f(format!("{prefix}.uh"), &mut self.uh);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundGru {
        BoundGru {
            wz: tape.leaf(self.wz.clone()),
            uz: tape.leaf(self.uz.clone()),
            wr: tape.leaf(self.wr.clone()),
            ur: tape.leaf(self.ur.clone()),
            wh: tape.leaf(self.wh.clone()),
            uh: tape.leaf(self.uh.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub wz: Value,
    pub uz: Value,
    pub wr: Value,
    pub ur: Value,
    pub wh: Value,
    pub uh: Value,
}

#[derive(Clone, Debug)]
pub struct BiGruParams<S: Scalar> {
    pub fwd: GruParams<S>,
    pub bwd: GruParams<S>,
}

impl<S: Scalar> BiGruParams<S> {
    pub fn new(hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        BiGruParams {
            fwd: GruParams::new(hidden, input, rng),
            bwd: GruParams::new(hidden, input, rng),
        }
    }

    /// Same cell weights in both directions; used by symmetry tests.
    pub fn shared(cell: GruParams<S>) -> Self {
        BiGruParams {
            fwd: cell.clone(),
            bwd: cell,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        self.fwd.visit(&format!("{prefix}.fwd"), f);
        self.bwd.visit(&format!("{prefix}.bwd"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        self.fwd.visit_mut(&format!("{prefix}.fwd"), f);
        self.bwd.visit_mut(&format!("{prefix}.bwd"), f);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundBiGru {
        BoundBiGru {
            fwd: self.fwd.bind(tape),
            bwd: self.bwd.bind(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBiGru {
    pub fwd: BoundGru,
    pub bwd: BoundGru,
}

/// y = Wx + b.
#[derive(Clone, Debug)]
pub struct LinearParams<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    pub fn new(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        LinearParams {
            w: Tensor::xavier(out, inp, rng).with_grad(),
            b: Tensor::zeros(&[out]).with_grad(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundLinear {
        BoundLinear {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Value,
    pub b: Value,
}

/// Wx + b for a vector input.
pub fn linear<S: Scalar>(tape: &mut Tape<S>, p: &BoundLinear, x: Value) -> Result<Value> {
    let wx = tape.matmul(p.w, x)?;
    tape.add(wx, p.b)
}

#[derive(Clone, Debug)]
pub struct HighwayParams<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub wt: Tensor<S>,
    pub bt: Tensor<S>,
}

impl<S: Scalar> HighwayParams<S> {
    /// Gate bias starts at -1 so early training stays near-identity.
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        HighwayParams {
            w: Tensor::xavier(dim, dim, rng).with_grad(),
            b: Tensor::zeros(&[dim]).with_grad(),
            wt: Tensor::xavier(dim, dim, rng).with_grad(),
            bt: Tensor::filled(&[dim], S::from_f64(-1.0)).with_grad(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
        f(format!("{prefix}.wt"), &self.wt);
        f(format!("{prefix}.bt"), &self.bt);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
        f(format!("{prefix}.wt"), &mut self.wt);
        f(format!("{prefix}.bt"), &mut self.bt);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundHighway {
        BoundHighway {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
            wt: tape.leaf(self.wt.clone()),
            bt: tape.leaf(self.bt.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHighway {
    pub w: Value,
    pub b: Value,
    pub wt: Value,
    pub bt: Value,
}

#[derive(Clone, Debug)]
pub struct CharChannel<S: Scalar> {
    pub table: Tensor<S>,
    pub conv_w: Tensor<S>,
    pub conv_b: Tensor<S>,
    pub window: usize,
}

impl<S: Scalar> CharChannel<S> {
    pub fn new(
        char_vocab: usize,
        dim: usize,
        filters: usize,
        window: usize,
        rng: &mut impl Rng,
    ) -> Self {
        CharChannel {
            table: Tensor::randn(&[char_vocab, dim], 0.1, rng).with_grad(),
            conv_w: Tensor::xavier(filters, dim * window, rng).with_grad(),
            conv_b: Tensor::zeros(&[filters]).with_grad(),
            window,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.table"), &self.table);
        f(format!("{prefix}.conv_w"), &self.conv_w);
        f(format!("{prefix}.conv_b"), &self.conv_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.table"), &mut self.table);
        f(format!("{prefix}.conv_w"), &mut self.conv_w);
        f(format!("{prefix}.conv_b"), &mut self.conv_b);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundCharChannel {
        BoundCharChannel {
            table: tape.leaf(self.table.clone()),
            conv_w: tape.leaf(self.conv_w.clone()),
            conv_b: tape.leaf(self.conv_b.clone()),
            window: self.window,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundCharChannel {
    pub table: Value,
    pub conv_w: Value,
    pub conv_b: Value,
    pub window: usize,
}

#[derive(Clone, Debug)]
pub struct TrigramChannel<S: Scalar> {
    pub conv_w: Tensor<S>,
    pub conv_b: Tensor<S>,
    pub buckets: usize,
    pub window: usize,
}

impl<S: Scalar> TrigramChannel<S> {
    pub fn new(buckets: usize, filters: usize, window: usize, rng: &mut impl Rng) -> Self {
        TrigramChannel {
            conv_w: Tensor::xavier(filters, buckets * window, rng).with_grad(),
            conv_b: Tensor::zeros(&[filters]).with_grad(),
            buckets,
            window,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.conv_w"), &self.conv_w);
        f(format!("{prefix}.conv_b"), &self.conv_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.conv_w"), &mut self.conv_w);
        f(format!("{prefix}.conv_b"), &mut self.conv_b);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundTrigramChannel {
        BoundTrigramChannel {
            conv_w: tape.leaf(self.conv_w.clone()),
            conv_b: tape.leaf(self.conv_b.clone()),
            buckets: self.buckets,
            window: self.window,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundTrigramChannel {
    pub conv_w: Value,
    pub conv_b: Value,
    pub buckets: usize,
    pub window: usize,
}

#[derive(Clone, Debug)]
pub struct EmbedParams<S: Scalar> {
    pub word_table: Tensor<S>,
    pub char: Option<CharChannel<S>>,
    pub trigram: Option<TrigramChannel<S>>,
    pub highway: Vec<HighwayParams<S>>,
}

impl<S: Scalar> EmbedParams<S> {
    pub fn new(cfg: &Config, vocab_size: usize, char_vocab_size: usize, rng: &mut impl Rng) -> Self {
        let mut word_table = Tensor::randn(&[vocab_size, cfg.word_dim], 0.1, rng);
        if cfg.train_word_embeddings {
            word_table = word_table.with_grad();
        }
        let char = cfg.embedding_channels.uses_char().then(|| {
            CharChannel::new(char_vocab_size, cfg.char_dim, cfg.char_filters, cfg.char_window, rng)
        });
        let trigram = cfg.embedding_channels.uses_trigram().then(|| {
            TrigramChannel::new(
                cfg.trigram_buckets as usize,
                cfg.trigram_filters,
                cfg.trigram_window,
                rng,
            )
        });
        let e = cfg.embed_dim();
        let highway = (0..cfg.highway_layers).map(|_| HighwayParams::new(e, rng)).collect();
        EmbedParams {
            word_table,
            char,
            trigram,
            highway,
        }
    }

    /// Replace the word table (pretrained vectors); the trainable flag
    /// follows the config, not the incoming tensor.
    pub fn set_word_table(&mut self, table: Tensor<S>, trainable: bool) {
        self.word_table = if trainable { table.with_grad() } else { table };
        self.word_table.requires_grad = trainable;
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.word_table"), &self.word_table);
        if let Some(c) = &self.char {
            c.visit(&format!("{prefix}.char"), f);
        }
        if let Some(t) = &self.trigram {
            t.visit(&format!("{prefix}.trigram"), f);
        }
        for (i, hw) in self.highway.iter().enumerate() {
            hw.visit(&format!("{prefix}.highway{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.word_table"), &mut self.word_table);
        if let Some(c) = &mut self.char {
            c.visit_mut(&format!("{prefix}.char"), f);
        }
        if let Some(t) = &mut self.trigram {
            t.visit_mut(&format!("{prefix}.trigram"), f);
        }
        for (i, hw) in self.highway.iter_mut().enumerate() {
            hw.visit_mut(&format!("{prefix}.highway{i}"), f);
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundEmbed {
        BoundEmbed {
            word_table: tape.leaf(self.word_table.clone()),
            char: self.char.as_ref().map(|c| c.bind(tape)),
            trigram: self.trigram.as_ref().map(|t| t.bind(tape)),
            highway: self.highway.iter().map(|h| h.bind(tape)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundEmbed {
    pub word_table: Value,
    pub char: Option<BoundCharChannel>,
    pub trigram: Option<BoundTrigramChannel>,
    pub highway: Vec<BoundHighway>,
}

/// Everything below the reasoner: embedding, shared question/passage
/// encoder, co-attention weights, and the memory BiGRU.
#[derive(Clone, Debug)]
pub struct LayersParams<S: Scalar> {
    pub embed: EmbedParams<S>,
    pub encoder: BiGruParams<S>,
    pub memory: BiGruParams<S>,
    pub w_c: Tensor<S>,
}

impl<S: Scalar> LayersParams<S> {
    pub fn new(cfg: &Config, vocab_size: usize, char_vocab_size: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden_dim;
        LayersParams {
            embed: EmbedParams::new(cfg, vocab_size, char_vocab_size, rng),
            encoder: BiGruParams::new(d, cfg.embed_dim(), rng),
            memory: BiGruParams::new(d, 8 * d, rng),
            w_c: Tensor::randn(&[6 * d], 0.1, rng).with_grad(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        self.embed.visit(&format!("{prefix}.embed"), f);
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        self.memory.visit(&format!("{prefix}.memory"), f);
        f(format!("{prefix}.w_c"), &self.w_c);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        self.embed.visit_mut(&format!("{prefix}.embed"), f);
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        self.memory.visit_mut(&format!("{prefix}.memory"), f);
        f(format!("{prefix}.w_c"), &mut self.w_c);
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundLayers {
        BoundLayers {
            embed: self.embed.bind(tape),
            encoder: self.encoder.bind(tape),
            memory: self.memory.bind(tape),
            w_c: tape.leaf(self.w_c.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayers {
    pub embed: BoundEmbed,
    pub encoder: BoundBiGru,
    pub memory: BoundBiGru,
    pub w_c: Value,
}

// ---------------------------------------------------------------------------
// Forward passes

/// Per-token embedding: word vector, char-CNN, and letter-trigram
/// channels concatenated, channel dropout on the subword parts, then
/// the highway stack. Output is [e, len].
pub fn embed_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundEmbed,
    ids: &TokenIds,
    dropout_embed: f64,
    training: bool,
) -> Result<Value> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("embed_tokens"));
    }
    let words = tape.gather(p.word_table, &ids.words)?;
    let mut blocks = vec![tape.transpose(words)?];
    if let Some(c) = &p.char {
        let mut cols = Vec::with_capacity(ids.len());
        for char_ids in &ids.chars {
            let rows = tape.gather(c.table, char_ids)?;
            let seq = tape.transpose(rows)?;
            cols.push(tape.conv1d_maxpool(seq, c.conv_w, c.conv_b, c.window)?);
        }
        let m = tape.concat_cols(&cols)?;
        blocks.push(tape.dropout(m, dropout_embed, training)?);
    }
    if let Some(t) = &p.trigram {
        let mut cols = Vec::with_capacity(ids.len());
        for tri in &ids.trigrams {
            let positions: Vec<Vec<(u32, S)>> = tri.iter().map(|&id| vec![(id, S::one())]).collect();
            cols.push(tape.sparse_conv_maxpool(t.conv_w, t.conv_b, positions, t.buckets, t.window)?);
        }
        let m = tape.concat_cols(&cols)?;
        blocks.push(tape.dropout(m, dropout_embed, training)?);
    }
    let mut e = tape.concat_rows(&blocks)?;
    for hw in &p.highway {
        e = highway(tape, hw, e)?;
    }
    Ok(e)
}

/// y = t∘g(Wx+b) + (1−t)∘x with t = σ(Wₜx+bₜ) and ReLU as g.
pub fn highway<S: Scalar>(tape: &mut Tape<S>, p: &BoundHighway, x: Value) -> Result<Value> {
    let wx = tape.matmul(p.w, x)?;
    let lin = tape.add_col_vec(wx, p.b)?;
    let g = tape.relu(lin);
    let tx = tape.matmul(p.wt, x)?;
    let tlin = tape.add_col_vec(tx, p.bt)?;
    let t = tape.sigmoid(tlin);
    let neg_t = tape.scale(t, S::from_f64(-1.0));
    let carry = tape.add_const(neg_t, S::one());
    let through = tape.mul(t, g)?;
    let kept = tape.mul(carry, x)?;
    tape.add(through, kept)
}

/// One GRU step: z=σ(W_z x+U_z h), r=σ(W_r x+U_r h),
/// ĥ=tanh(W x+U(r∘h)), h'=(1−z)∘h+z∘ĥ.
pub fn gru_cell<S: Scalar>(tape: &mut Tape<S>, p: &BoundGru, h: Value, x: Value) -> Result<Value> {
    let zx = tape.matmul(p.wz, x)?;
    let zh = tape.matmul(p.uz, h)?;
    let zs = tape.add(zx, zh)?;
    let z = tape.sigmoid(zs);
    let rx = tape.matmul(p.wr, x)?;
    let rh = tape.matmul(p.ur, h)?;
    let rs = tape.add(rx, rh)?;
    let r = tape.sigmoid(rs);
    let gated = tape.mul(r, h)?;
    let hx = tape.matmul(p.wh, x)?;
    let hu = tape.matmul(p.uh, gated)?;
    let hs = tape.add(hx, hu)?;
    let cand = tape.tanh(hs);
    let neg_z = tape.scale(z, S::from_f64(-1.0));
    let keep_gate = tape.add_const(neg_z, S::one());
    let kept = tape.mul(keep_gate, h)?;
    let updated = tape.mul(z, cand)?;
    tape.add(kept, updated)
}

/// Bidirectional GRU over the columns of `input` ([k, n]); forward and
/// backward state rows concatenate per position into [2d, n]. Input
/// dropout is applied once and shared by both directions.
pub fn bigru<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundBiGru,
    input: Value,
    dropout_gru: f64,
    training: bool,
) -> Result<Value> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "bigru",
            lhs: shape,
            rhs: vec![],
        });
    }
    let n = shape[1];
    let d = tape.shape(p.fwd.uz)[0];
    let x = tape.dropout(input, dropout_gru, training)?;

    let mut h = tape.constant(Tensor::zeros(&[d]));
    let mut fwd = Vec::with_capacity(n);
    for j in 0..n {
        let xj = tape.col(x, j)?;
        h = gru_cell(tape, &p.fwd, h, xj)?;
        fwd.push(h);
    }

    let mut h = tape.constant(Tensor::zeros(&[d]));
    let mut bwd = Vec::with_capacity(n);
    for j in (0..n).rev() {
        let xj = tape.col(x, j)?;
        h = gru_cell(tape, &p.bwd, h, xj)?;
        bwd.push(h);
    }
    bwd.reverse();

    let f = tape.concat_cols(&fwd)?;
    let b = tape.concat_cols(&bwd)?;
    tape.concat_rows(&[f, b])
}

/// w_Cᵀ[a;b;a∘b] for 2d-vectors a, b.
pub fn match_score<S: Scalar>(
    tape: &mut Tape<S>,
    a: Value,
    b: Value,
    w_c: Value,
) -> Result<Value> {
    let ab = tape.mul(a, b)?;
    let cat = tape.concat_rows(&[a, b, ab])?;
    tape.dot(w_c, cat)
}

#[derive(Clone, Copy, Debug)]
pub struct Coattention {
    pub c: Value,
    pub cq: Value,
    pub cp: Value,
    pub u: Value,
}

/// Eq. 1-4: similarity matrix, its normalizations, and the aggregated
/// passage representation U = [Hp; HqCq; Hp∘(HqCq); Hp∘D].
///
/// C is built from the decomposition w_C = [u; v; w]:
/// C[i][j] = uᵀHq[:,i] + vᵀHp[:,j] + (w∘Hq[:,i])ᵀHp[:,j],
/// which equals match_score per entry without materializing the
/// concatenated 6d vectors.
pub fn coattend<S: Scalar>(
    tape: &mut Tape<S>,
    hq: Value,
    hp: Value,
    w_c: Value,
    softmax_over_question: bool,
) -> Result<Coattention> {
    let (sq, sp) = (tape.shape(hq).to_vec(), tape.shape(hp).to_vec());
    if sq.len() != 2 || sp.len() != 2 || sq[0] != sp[0] {
        return Err(Error::ShapeMismatch {
            op: "coattend",
            lhs: sq,
            rhs: sp,
        });
    }
    let dd = sq[0];
    let u_w = tape.slice(w_c, 0, dd)?;
    let v_w = tape.slice(w_c, dd, 2 * dd)?;
    let w_w = tape.slice(w_c, 2 * dd, 3 * dd)?;
    let uq = tape.matmul(u_w, hq)?;
    let vp = tape.matmul(v_w, hp)?;
    let whq = tape.mul_col_vec(hq, w_w)?;
    let whqt = tape.transpose(whq)?;
    let prod = tape.matmul(whqt, hp)?;
    let rowed = tape.add_col_vec(prod, uq)?;
    let c = tape.add_row_vec(rowed, vp)?;
    coattend_from_c(tape, hq, hp, c, softmax_over_question)
}

/// The normalization and aggregation half of coattend, split out so the
/// shift-invariance of the softmaxes can be exercised directly.
pub fn coattend_from_c<S: Scalar>(
    tape: &mut Tape<S>,
    hq: Value,
    hp: Value,
    c: Value,
    softmax_over_question: bool,
) -> Result<Coattention> {
    let axis = if softmax_over_question { 0 } else { 1 };
    let cq = tape.softmax(c, axis)?;
    let colmax = tape.max_axis(c, 0)?;
    let cp = tape.softmax(colmax, 0)?;
    let hq_cq = tape.matmul(hq, cq)?;
    let gated = tape.mul(hp, hq_cq)?;
    let dvec = tape.matmul(hp, cp)?;
    let summary = tape.mul_col_vec(hp, dvec)?;
    let u = tape.concat_rows(&[hp, hq_cq, gated, summary])?;
    Ok(Coattention { c, cq, cp, u })
}

/// Eq. 5: passage memory Mp = BiGRU(U).
pub fn build_memory<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundBiGru,
    u: Value,
    dropout_gru: f64,
    training: bool,
) -> Result<Value> {
    bigru(tape, p, u, dropout_gru, training)
}

/// All tape values the reasoner consumes for one question/passage pair.
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    pub hq: Value,
    pub hp: Value,
    pub c: Value,
    pub cq: Value,
    pub cp: Value,
    pub u: Value,
    pub mp: Value,
}

/// Run the full representation stack on one question/passage pair.
pub fn encode_pair<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundLayers,
    question: &TokenIds,
    passage: &TokenIds,
    s: &EncodeSettings,
) -> Result<EncodedPair> {
    let eq = embed_tokens(tape, &p.embed, question, s.dropout_embed, s.training)?;
    let ep = embed_tokens(tape, &p.embed, passage, s.dropout_embed, s.training)?;
    let hq = bigru(tape, &p.encoder, eq, s.dropout_gru, s.training)?;
    let hp = bigru(tape, &p.encoder, ep, s.dropout_gru, s.training)?;
    let co = coattend(tape, hq, hp, p.w_c, s.softmax_over_question)?;
    let mp = build_memory(tape, &p.memory, co.u, s.dropout_gru, s.training)?;
    Ok(EncodedPair {
        hq,
        hp,
        c: co.c,
        cq: co.cq,
        cp: co.cp,
        u: co.u,
        mp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.word_dim = 6;
        cfg.char_dim = 3;
        cfg.char_filters = 4;
        cfg.char_window = 2;
        cfg.trigram_dim = 3;
        cfg.trigram_filters = 4;
        cfg.trigram_buckets = 17;
        cfg.hidden_dim = 2;
        cfg.train_word_embeddings = true;
        cfg
    }

    fn vocabs() -> (Vocab, CharVocab) {
        let texts = ["the", "cat", "sat", "on", "a", "mat", "why"];
        let v = Vocab::build(texts.iter().copied(), 1);
        let c = CharVocab::build(texts.iter().copied());
        (v, c)
    }

    #[test]
    fn embed_shape_single_token() {
        let cfg = small_config();
        let (v, cv) = vocabs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EmbedParams::<f64>::new(&cfg, v.len(), cv.len(), &mut rng);
        let mut tape = Tape::new(0);
        let bound = params.bind(&mut tape);
        let ids = TokenIds::build(["cat"], &v, &cv, cfg.trigram_buckets);
        let e = embed_tokens(&mut tape, &bound, &ids, 0.0, false).unwrap();
        assert_eq!(tape.shape(e), &[cfg.embed_dim(), 1]);
        assert!(tape.data(e).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn embed_one_char_token_is_finite() {
        let cfg = small_config();
        let (v, cv) = vocabs();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EmbedParams::<f64>::new(&cfg, v.len(), cv.len(), &mut rng);
        let mut tape = Tape::new(0);
        let bound = params.bind(&mut tape);
        let ids = TokenIds::build(["a"], &v, &cv, cfg.trigram_buckets);
        let e = embed_tokens(&mut tape, &bound, &ids, 0.0, false).unwrap();
        assert_eq!(tape.shape(e), &[cfg.embed_dim(), 1]);
        assert!(tape.data(e).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn highway_carry_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = HighwayParams::<f64>::new(5, &mut rng);
        p.bt = Tensor::filled(&[5], -30.0).with_grad();
        let mut tape = Tape::new(0);
        let bound = p.bind(&mut tape);
        let x = tape.leaf(Tensor::randn(&[5, 3], 1.0, &mut rng).with_grad());
        let y = highway(&mut tape, &bound, x).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(x)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let p = GruParams::<f64>::zeros(3, 2);
        let mut tape = Tape::new(0);
        let bound = p.bind(&mut tape);
        let h = tape.leaf(Tensor::vector(vec![0.4, -1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(vec![5.0, 7.0]));
        let h2 = gru_cell(&mut tape, &bound, h, x).unwrap();
        let got = tape.data(h2);
        assert!((got[0] - 0.2).abs() < 1e-12);
        assert!((got[1] + 0.5).abs() < 1e-12);
        assert!((got[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bigru_length_one_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BiGruParams::<f64>::new(3, 2, &mut rng);
        let mut tape = Tape::new(0);
        let bound = p.bind(&mut tape);
        let e = tape.leaf(Tensor::randn(&[2, 1], 1.0, &mut rng));
        let h = bigru(&mut tape, &bound, e, 0.0, false).unwrap();
        assert_eq!(tape.shape(h), &[6, 1]);
    }

    #[test]
    fn bigru_reverse_symmetry_with_shared_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = GruParams::<f64>::new(3, 2, &mut rng);
        let p = BiGruParams::shared(cell);
        let e = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let mut rev = Tensor::zeros(&[2, 4]);
        for i in 0..2 {
            for j in 0..4 {
                rev.data_mut()[i * 4 + (3 - j)] = e.data()[i * 4 + j];
            }
        }

        let mut tape = Tape::new(0);
        let bound = p.bind(&mut tape);
        let ev = tape.leaf(e);
        let h = bigru(&mut tape, &bound, ev, 0.0, false).unwrap();
        let h = tape.value(h).clone();

        let mut tape2 = Tape::new(0);
        let bound2 = p.bind(&mut tape2);
        let rv = tape2.leaf(rev);
        let hr = bigru(&mut tape2, &bound2, rv, 0.0, false).unwrap();
        let hr = tape2.value(hr).clone();

        // column-reverse of bigru(reverse(E)) equals bigru(E) with the
        // forward and backward row blocks swapped
        for i in 0..6 {
            for j in 0..4 {
                let swapped_row = (i + 3) % 6;
                let a = hr.data()[i * 4 + (3 - j)];
                let b = h.data()[swapped_row * 4 + j];
                assert!((a - b).abs() < 1e-12, "row {i} col {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn match_score_hand_cases() {
        let mut tape = Tape::<f64>::new(0);
        let d2 = 4usize;
        let a = tape.leaf(Tensor::filled(&[d2], 1.0));
        let b = tape.leaf(Tensor::filled(&[d2], 1.0));

        let zero = tape.leaf(Tensor::zeros(&[3 * d2]));
        let s0 = match_score(&mut tape, a, b, zero).unwrap();
        assert_eq!(tape.data(s0)[0], 0.0);

        let mut w = vec![0.0; 3 * d2];
        for x in w.iter_mut().skip(2 * d2) {
            *x = 1.0;
        }
        let w1 = tape.leaf(Tensor::vector(w.clone()));
        let s1 = match_score(&mut tape, a, b, w1).unwrap();
        assert!((tape.data(s1)[0] - d2 as f64).abs() < 1e-12);

        let w2 = tape.leaf(Tensor::vector(w.iter().map(|x| 2.0 * x).collect()));
        let s2 = match_score(&mut tape, a, b, w2).unwrap();
        assert!((tape.data(s2)[0] - 2.0 * tape.data(s1)[0]).abs() < 1e-12);
    }

    #[test]
    fn coattend_matches_match_score_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d2, m, n) = (4usize, 2usize, 3usize);
        let hq_t = Tensor::<f64>::randn(&[d2, m], 1.0, &mut rng);
        let hp_t = Tensor::<f64>::randn(&[d2, n], 1.0, &mut rng);
        let wc_t = Tensor::<f64>::randn(&[3 * d2], 1.0, &mut rng);

        let mut tape = Tape::new(0);
        let hq = tape.leaf(hq_t);
        let hp = tape.leaf(hp_t);
        let wc = tape.leaf(wc_t);
        let co = coattend(&mut tape, hq, hp, wc, false).unwrap();
        assert_eq!(tape.shape(co.c), &[m, n]);
        for i in 0..m {
            for j in 0..n {
                let qi = tape.col(hq, i).unwrap();
                let pj = tape.col(hp, j).unwrap();
                let s = match_score(&mut tape, qi, pj, wc).unwrap();
                let direct = tape.data(s)[0];
                let fused = tape.data(co.c)[i * n + j];
                assert!((direct - fused).abs() < 1e-10, "C[{i}][{j}]");
            }
        }
    }

    #[test]
    fn coattend_single_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f64>::new(0);
        let hq = tape.leaf(Tensor::randn(&[4, 1], 1.0, &mut rng));
        let hp = tape.leaf(Tensor::randn(&[4, 1], 1.0, &mut rng));
        let wc = tape.leaf(Tensor::randn(&[12], 1.0, &mut rng));
        let co = coattend(&mut tape, hq, hp, wc, false).unwrap();
        assert_eq!(tape.data(co.cq), &[1.0]);
        assert_eq!(tape.data(co.cp), &[1.0]);
        // with cp = [1], D = Hp itself, so the last block is Hp∘Hp
        let u = tape.data(co.u);
        let hp_d = tape.data(hp);
        for i in 0..4 {
            assert!((u[12 + i] - hp_d[i] * hp_d[i]).abs() < 1e-12);
            assert!((u[i] - hp_d[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn coattend_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d2, m, n) = (4usize, 2usize, 3usize);
        let hq_t = Tensor::<f64>::randn(&[d2, m], 1.0, &mut rng);
        let hp_t = Tensor::<f64>::randn(&[d2, n], 1.0, &mut rng);
        let c_t = Tensor::<f64>::randn(&[m, n], 1.0, &mut rng);

        let mut tape = Tape::new(0);
        let hq = tape.leaf(hq_t.clone());
        let hp = tape.leaf(hp_t.clone());
        let c = tape.leaf(c_t.clone());
        let base = coattend_from_c(&mut tape, hq, hp, c, false).unwrap();
        let shifted_c = tape.add_const(c, 7.5);
        let shifted = coattend_from_c(&mut tape, hq, hp, shifted_c, false).unwrap();
        for (a, b) in tape.data(base.cq).iter().zip(tape.data(shifted.cq)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.data(base.cp).iter().zip(tape.data(shifted.cp)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coattend_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new(0);
        let hq = tape.leaf(Tensor::randn(&[6, 4], 1.0, &mut rng));
        let hp = tape.leaf(Tensor::randn(&[6, 5], 1.0, &mut rng));
        let wc = tape.leaf(Tensor::randn(&[18], 1.0, &mut rng));
        let co = coattend(&mut tape, hq, hp, wc, false).unwrap();
        let cq = tape.data(co.cq);
        for i in 0..4 {
            let row: f64 = cq[i * 5..(i + 1) * 5].iter().sum();
            assert!((row - 1.0).abs() < 1e-5);
        }
        let total: f64 = tape.data(co.cp).iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert_eq!(tape.shape(co.u), &[24, 5]);
        // row-block 0 of U is exactly Hp
        assert_eq!(&tape.data(co.u)[..30], tape.data(hp));
    }

    fn run_memory(p: &BiGruParams<f64>, u_t: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new(0);
        let bound = p.bind(&mut tape);
        let u = tape.leaf(u_t);
        let m = build_memory(&mut tape, &bound, u, 0.0, false).unwrap();
        tape.value(m).clone()
    }

    #[test]
    fn bigru_directional_causality_is_exact() {
        // the forward block of column j can never see later columns and
        // the backward block can never see earlier ones, whatever the
        // weights are
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = BiGruParams::<f64>::new(2, 4, &mut rng);
        let n = 5usize;
        let u_t = Tensor::<f64>::randn(&[4, n], 1.0, &mut rng);

        let mut late = u_t.clone();
        for i in 0..4 {
            late.data_mut()[i * n + (n - 1)] += 5.0;
        }
        let (base, bumped) = (run_memory(&p, u_t.clone()), run_memory(&p, late));
        for row in 0..2 {
            for j in 0..n - 1 {
                assert_eq!(base.data()[row * n + j], bumped.data()[row * n + j]);
            }
        }

        let mut early = u_t.clone();
        for i in 0..4 {
            early.data_mut()[i * n] += 5.0;
        }
        let bumped = run_memory(&p, early);
        for row in 2..4 {
            for j in 1..n {
                assert_eq!(base.data()[row * n + j], bumped.data()[row * n + j]);
            }
        }
    }

    #[test]
    fn memory_zero_recurrence_localizes_columns() {
        // zeroed recurrent matrices leave only the carry (1-z)∘h as a
        // path between columns; zeroing the update-gate input as well
        // pins z at 0.5, so cross-column influence scales by 2^-k and a
        // distant perturbation cannot reach the probed column
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = BiGruParams::<f64>::new(2, 4, &mut rng);
        for g in [&mut p.fwd, &mut p.bwd] {
            g.uz = Tensor::zeros(&[2, 2]).with_grad();
            g.ur = Tensor::zeros(&[2, 2]).with_grad();
            g.uh = Tensor::zeros(&[2, 2]).with_grad();
            g.wz = Tensor::zeros(&[2, 4]).with_grad();
        }
        let n = 60usize;
        let u_t = Tensor::<f64>::randn(&[4, n], 1.0, &mut rng);
        let mut perturbed = u_t.clone();
        for i in 0..4 {
            perturbed.data_mut()[i * n + (n - 1)] += 5.0;
        }
        let (base, bumped) = (run_memory(&p, u_t), run_memory(&p, perturbed));
        for row in 0..4 {
            let (a, b) = (base.data()[row * n], bumped.data()[row * n]);
            assert!((a - b).abs() < 1e-12, "column 0 row {row}: {a} vs {b}");
        }
        // the perturbed column itself must move
        let own: f64 = (0..4)
            .map(|row| (base.data()[row * n + n - 1] - bumped.data()[row * n + n - 1]).abs())
            .sum();
        assert!(own > 1e-3, "perturbation had no local effect");
    }

    #[test]
    fn passage_permutation_permutes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d2, m, n) = (4usize, 2usize, 4usize);
        let hq_t = Tensor::<f64>::randn(&[d2, m], 1.0, &mut rng);
        let hp_t = Tensor::<f64>::randn(&[d2, n], 1.0, &mut rng);
        let wc_t = Tensor::<f64>::randn(&[3 * d2], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut hp_p = Tensor::<f64>::zeros(&[d2, n]);
        for i in 0..d2 {
            for (jp, &j) in perm.iter().enumerate() {
                hp_p.data_mut()[i * n + jp] = hp_t.data()[i * n + j];
            }
        }

        let mut tape = Tape::new(0);
        let hq = tape.leaf(hq_t.clone());
        let hp = tape.leaf(hp_t);
        let wc = tape.leaf(wc_t.clone());
        let a = coattend(&mut tape, hq, hp, wc, false).unwrap();
        let (ua, ca) = (tape.value(a.u).clone(), tape.value(a.c).clone());

        let mut tape2 = Tape::new(0);
        let hq2 = tape2.leaf(hq_t);
        let hp2 = tape2.leaf(hp_p);
        let wc2 = tape2.leaf(wc_t);
        let b = coattend(&mut tape2, hq2, hp2, wc2, false).unwrap();
        let (ub, cb) = (tape2.value(b.u).clone(), tape2.value(b.c).clone());

        for i in 0..m {
            for (jp, &j) in perm.iter().enumerate() {
                assert!((cb.data()[i * n + jp] - ca.data()[i * n + j]).abs() < 1e-12);
            }
        }
        let rows = 4 * d2; // U has 8d = 4·(2d) rows
        for i in 0..rows {
            for (jp, &j) in perm.iter().enumerate() {
                assert!((ub.data()[i * n + jp] - ua.data()[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_stack_gradcheck() {
        // finite differences through embed → encode → coattend → memory
        let cfg = small_config();
        let (v, cv) = vocabs();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = LayersParams::<f64>::new(&cfg, v.len(), cv.len(), &mut rng);
        let q_ids = TokenIds::build(["why", "sat"], &v, &cv, cfg.trigram_buckets);
        let p_ids = TokenIds::build(["the", "cat", "sat"], &v, &cv, cfg.trigram_buckets);
        let settings = EncodeSettings::inference();

        let loss_of = |params: &LayersParams<f64>| -> f64 {
            let mut tape = Tape::new(0);
            let bound = params.bind(&mut tape);
            let enc = encode_pair(&mut tape, &bound, &q_ids, &p_ids, &settings).unwrap();
            let s = tape.sum_all(enc.mp);
            tape.data(s)[0]
        };

        let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
        {
            let mut tape = Tape::new(0);
            let bound = params.bind(&mut tape);
            let bound_leaves = tape.len();
            // bind pushes leaves in visit order on a fresh tape; verify
            // index alignment through the shapes before relying on it
            let mut idx = 0usize;
            params.visit("model", &mut |_name, t| {
                assert_eq!(tape.shape(Value(idx)), t.shape());
                idx += 1;
            });
            assert_eq!(idx, bound_leaves);
            let enc = encode_pair(&mut tape, &bound, &q_ids, &p_ids, &settings).unwrap();
            let s = tape.sum_all(enc.mp);
            let g = tape.backward(s).unwrap();
            let mut idx = 0usize;
            params.visit("model", &mut |name, t| {
                if t.requires_grad {
                    grads.push((name, g.get(Value(idx)).unwrap().to_vec()));
                }
                idx += 1;
            });
        }

        let mut checked = 0usize;
        let h = 1e-5;
        let mut flat: Vec<(String, usize)> = Vec::new();
        params.visit("model", &mut |name, t| {
            if t.requires_grad {
                flat.push((name, t.data().len()));
            }
        });
        for (name, len) in flat {
            let analytic = grads.iter().find(|(n, _)| *n == name).unwrap().1.clone();
            let stride = (len / 3).max(1);
            for i in (0..len).step_by(stride) {
                params.visit_mut("model", &mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += h;
                    }
                });
                let plus = loss_of(&params);
                params.visit_mut("model", &mut |n, t| {
                    if n == name {
                        t.data_mut()[i] -= 2.0 * h;
                    }
                });
                let minus = loss_of(&params);
                params.visit_mut("model", &mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += h;
                    }
                });
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic[i];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((a - fd) / denom).abs() < 1e-3,
                    "{name}[{i}]: analytic {a} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 30, "checked only {checked} coordinates");
    }
}
