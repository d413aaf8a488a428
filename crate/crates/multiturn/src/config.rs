//! Run configuration: plain-text key=value files with `#` comments,
//! strict unknown-key rejection, and a canonical resolved form that is
//! written next to every run's outputs and hashed into checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Reasoning-turn regime for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    /// One turn, no termination gate (T_max treated as 1).
    Single,
    /// Always runs T_max turns and answers at the last one.
    Fixed,
    /// Learned stochastic termination.
    Dynamic,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "fixed" => Ok(Mode::Fixed),
            "dynamic" => Ok(Mode::Dynamic),
            _ => Err(Error::config(format!(
                "mode must be single|fixed|dynamic, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Fixed => "fixed",
            Mode::Dynamic => "dynamic",
        })
    }
}

/// How the stop turn is chosen at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decode {
    /// Stop at the turn with the highest stop probability.
    Marginal,
    /// Draw the stop turn from the stop distribution.
    Sample,
    /// Stop at the first turn whose termination probability exceeds 0.5.
    Greedy,
}

impl FromStr for Decode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(Decode::Marginal),
            "sample" => Ok(Decode::Sample),
            "greedy" => Ok(Decode::Greedy),
            _ => Err(Error::config(format!(
                "decode must be marginal|sample|greedy, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Decode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decode::Marginal => "marginal",
            Decode::Sample => "sample",
            Decode::Greedy => "greedy",
        })
    }
}

/// Which embedding channels feed the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channels {
    Word,
    WordChar,
    WordChar3gram,
}

impl Channels {
    pub fn uses_char(self) -> bool {
        !matches!(self, Channels::Word)
    }

    pub fn uses_trigram(self) -> bool {
        matches!(self, Channels::WordChar3gram)
    }
}

impl FromStr for Channels {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Channels::Word),
            "word+char" => Ok(Channels::WordChar),
            "word+char+3gram" => Ok(Channels::WordChar3gram),
            _ => Err(Error::config(format!(
                "embedding_channels must be word|word+char|word+char+3gram, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Channels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channels::Word => "word",
            Channels::WordChar => "word+char",
            Channels::WordChar3gram => "word+char+3gram",
        })
    }
}

/// Shape of the termination-gate advantage signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Advantage {
    /// r/b − 1: multiplicative contrast against the expected reward.
    Contrastive,
    /// r − b: plain baseline subtraction.
    Additive,
}

impl FromStr for Advantage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Advantage::Contrastive),
            "additive" => Ok(Advantage::Additive),
            _ => Err(Error::config(format!(
                "advantage must be contrastive|additive, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Advantage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Advantage::Contrastive => "contrastive",
            Advantage::Additive => "additive",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    // data locations
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub vectors_path: Option<PathBuf>,
    pub out_dir: PathBuf,

    // vocabulary and embedding channels
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_window: usize,
    pub trigram_dim: usize,
    pub trigram_filters: usize,
    pub trigram_window: usize,
    pub trigram_buckets: u32,
    pub min_count: u64,
    pub embedding_channels: Channels,
    pub train_word_embeddings: bool,

    // representation stack
    pub hidden_dim: usize,
    pub highway_layers: usize,
    pub softmax_over_question: bool,

    // reasoner
    pub t_max: usize,
    pub mode: Mode,
    pub decode: Decode,
    pub lambda: f64,
    pub l_max: usize,
    pub empty_floor: f64,

    // optimization
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub dropout_embed: f64,
    pub dropout_gru: f64,
    pub patience: usize,
    pub advantage: Advantage,
    pub reward_grad_to_answer: bool,
    pub sampled_termination: bool,
    pub rouge_beta: f64,

    // passage ranker
    pub ranker_filters: usize,
    pub ranker_window: usize,
    pub ranker_proj: usize,
    pub gamma: f64,
    pub ranker_epochs: usize,

    // experiment grids
    pub grid_modes: Vec<Mode>,
    pub grid_channels: Vec<Channels>,
    pub grid_seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train_path: None,
            dev_path: None,
            vectors_path: None,
            out_dir: PathBuf::from("out"),

            word_dim: 300,
            char_dim: 16,
            char_filters: 100,
            char_window: 5,
            trigram_dim: 16,
            trigram_filters: 100,
            trigram_window: 1,
            trigram_buckets: 50_000,
            min_count: 1,
            embedding_channels: Channels::WordChar3gram,
            train_word_embeddings: false,

            hidden_dim: 128,
            highway_layers: 2,
            softmax_over_question: false,

            t_max: 5,
            mode: Mode::Dynamic,
            decode: Decode::Marginal,
            lambda: 10.0,
            l_max: 50,
            empty_floor: 1e-4,

            epochs: 30,
            batch_size: 32,
            seed: 42,
            lr: 0.5,
            rho: 0.95,
            epsilon: 1e-6,
            clip_norm: 5.0,
            dropout_embed: 0.15,
            dropout_gru: 0.25,
            patience: 5,
            advantage: Advantage::Contrastive,
            reward_grad_to_answer: false,
            sampled_termination: false,
            rouge_beta: 1.0,

            ranker_filters: 256,
            ranker_window: 5,
            ranker_proj: 128,
            gamma: 10.0,
            ranker_epochs: 10,

            grid_modes: vec![Mode::Single, Mode::Fixed, Mode::Dynamic],
            grid_channels: vec![Channels::Word, Channels::WordChar, Channels::WordChar3gram],
            grid_seeds: vec![1, 2, 3],
        }
    }
}

fn fnv1a(text: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    text.bytes()
        .fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME))
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true|false, got {value:?}"))),
    }
}

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Result<Vec<T>> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::config(format!("{key}: empty list")));
    }
    Ok(items)
}

impl Config {
    /// Parse a key=value config file over the defaults. Blank lines and
    /// `#` comments are ignored; unknown or repeated keys are errors.
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_overrides(&text)
    }

    pub fn from_str_overrides(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_path" => self.train_path = Some(PathBuf::from(value)),
            "dev_path" => self.dev_path = Some(PathBuf::from(value)),
            "vectors_path" => self.vectors_path = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),

            "word_dim" => self.word_dim = parse_num(key, value)?,
            "char_dim" => self.char_dim = parse_num(key, value)?,
            "char_filters" => self.char_filters = parse_num(key, value)?,
            "char_window" => self.char_window = parse_num(key, value)?,
            "trigram_dim" => self.trigram_dim = parse_num(key, value)?,
            "trigram_filters" => self.trigram_filters = parse_num(key, value)?,
            "trigram_window" => self.trigram_window = parse_num(key, value)?,
            "trigram_buckets" => self.trigram_buckets = parse_num(key, value)?,
            "min_count" => self.min_count = parse_num(key, value)?,
            "embedding_channels" => self.embedding_channels = value.parse()?,
            "train_word_embeddings" => self.train_word_embeddings = parse_bool(key, value)?,

            "hidden_dim" => self.hidden_dim = parse_num(key, value)?,
            "highway_layers" => self.highway_layers = parse_num(key, value)?,
            "softmax_over_question" => self.softmax_over_question = parse_bool(key, value)?,

            "t_max" => self.t_max = parse_num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "decode" => self.decode = value.parse()?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "l_max" => self.l_max = parse_num(key, value)?,
            "empty_floor" => self.empty_floor = parse_num(key, value)?,

            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "rho" => self.rho = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "dropout_embed" => self.dropout_embed = parse_num(key, value)?,
            "dropout_gru" => self.dropout_gru = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "advantage" => self.advantage = value.parse()?,
            "reward_grad_to_answer" => self.reward_grad_to_answer = parse_bool(key, value)?,
            "sampled_termination" => self.sampled_termination = parse_bool(key, value)?,
            "rouge_beta" => self.rouge_beta = parse_num(key, value)?,

            "ranker_filters" => self.ranker_filters = parse_num(key, value)?,
            "ranker_window" => self.ranker_window = parse_num(key, value)?,
            "ranker_proj" => self.ranker_proj = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "ranker_epochs" => self.ranker_epochs = parse_num(key, value)?,

            "grid_modes" => self.grid_modes = parse_list(key, value, |s| s.parse())?,
            "grid_channels" => self.grid_channels = parse_list(key, value, |s| s.parse())?,
            "grid_seeds" => self.grid_seeds = parse_list(key, value, |s| parse_num(key, s))?,

            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("char_filters", self.char_filters),
            ("char_window", self.char_window),
            ("trigram_dim", self.trigram_dim),
            ("trigram_filters", self.trigram_filters),
            ("trigram_window", self.trigram_window),
            ("hidden_dim", self.hidden_dim),
            ("t_max", self.t_max),
            ("l_max", self.l_max),
            ("batch_size", self.batch_size),
            ("ranker_filters", self.ranker_filters),
            ("ranker_window", self.ranker_window),
            ("ranker_proj", self.ranker_proj),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.trigram_buckets == 0 {
            return Err(Error::config("trigram_buckets must be positive"));
        }
        for (name, v) in [
            ("dropout_embed", self.dropout_embed),
            ("dropout_gru", self.dropout_gru),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.lambda <= 0.0 {
            return Err(Error::config("lambda must be positive"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho must be in (0, 1)"));
        }
        if self.epsilon <= 0.0 || self.lr <= 0.0 {
            return Err(Error::config("lr and epsilon must be positive"));
        }
        Ok(())
    }

    /// Turn budget after applying the mode: single-turn systems run
    /// exactly one turn whatever t_max says.
    pub fn effective_t_max(&self) -> usize {
        match self.mode {
            Mode::Single => 1,
            _ => self.t_max,
        }
    }

    /// Total embedding width for the active channels.
    pub fn embed_dim(&self) -> usize {
        let mut e = self.word_dim;
        if self.embedding_channels.uses_char() {
            e += self.char_filters;
        }
        if self.embedding_channels.uses_trigram() {
            e += self.trigram_filters;
        }
        e
    }

    /// Canonical key=value rendering: sorted keys, one per line. Equal
    /// configs render identically; parsing it back round-trips.
    pub fn resolved(&self) -> String {
        let mut lines = vec![
            format!("advantage={}", self.advantage),
            format!("batch_size={}", self.batch_size),
            format!("char_dim={}", self.char_dim),
            format!("char_filters={}", self.char_filters),
            format!("char_window={}", self.char_window),
            format!("clip_norm={}", self.clip_norm),
            format!("decode={}", self.decode),
            format!("dropout_embed={}", self.dropout_embed),
            format!("dropout_gru={}", self.dropout_gru),
            format!("empty_floor={}", self.empty_floor),
            format!("embedding_channels={}", self.embedding_channels),
            format!("epochs={}", self.epochs),
            format!("epsilon={}", self.epsilon),
            format!("gamma={}", self.gamma),
            format!(
                "grid_channels={}",
                self.grid_channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!(
                "grid_modes={}",
                self.grid_modes
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!(
                "grid_seeds={}",
                self.grid_seeds
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("hidden_dim={}", self.hidden_dim),
            format!("highway_layers={}", self.highway_layers),
            format!("l_max={}", self.l_max),
            format!("lambda={}", self.lambda),
            format!("lr={}", self.lr),
            format!("min_count={}", self.min_count),
            format!("mode={}", self.mode),
            format!("patience={}", self.patience),
            format!("ranker_epochs={}", self.ranker_epochs),
            format!("ranker_filters={}", self.ranker_filters),
            format!("ranker_proj={}", self.ranker_proj),
            format!("ranker_window={}", self.ranker_window),
            format!("reward_grad_to_answer={}", self.reward_grad_to_answer),
            format!("rho={}", self.rho),
            format!("rouge_beta={}", self.rouge_beta),
            format!("sampled_termination={}", self.sampled_termination),
            format!("seed={}", self.seed),
            format!("softmax_over_question={}", self.softmax_over_question),
            format!("t_max={}", self.t_max),
            format!("train_word_embeddings={}", self.train_word_embeddings),
            format!("trigram_buckets={}", self.trigram_buckets),
            format!("trigram_dim={}", self.trigram_dim),
            format!("trigram_filters={}", self.trigram_filters),
            format!("trigram_window={}", self.trigram_window),
            format!("word_dim={}", self.word_dim),
        ];
        for (key, path) in [
            ("dev_path", &self.dev_path),
            ("train_path", &self.train_path),
            ("vectors_path", &self.vectors_path),
        ] {
            if let Some(p) = path {
                lines.push(format!("{key}={}", p.display()));
            }
        }
        lines.push(format!("out_dir={}", self.out_dir.display()));
        lines.sort();
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// FNV-1a of the resolved rendering; stored in checkpoints so a
    /// model cannot silently load under a different configuration.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(&self.resolved())
    }

    /// Fingerprint of the keys that determine what saved reader
    /// weights mean: architecture shapes, preprocessing, and episode
    /// semantics. Run-environment keys (paths, optimizer settings,
    /// decode rules) stay out so a checkpoint can be evaluated on new
    /// data without a spurious mismatch.
    pub fn model_fingerprint(&self) -> u64 {
        fnv1a(&format!(
            "channels={} char_dim={} char_filters={} char_window={} hidden_dim={} \
             highway_layers={} lambda={} min_count={} mode={} softmax_over_question={} \
             t_max={} trigram_buckets={} trigram_dim={} trigram_filters={} \
             trigram_window={} word_dim={}",
            self.embedding_channels,
            self.char_dim,
            self.char_filters,
            self.char_window,
            self.hidden_dim,
            self.highway_layers,
            self.lambda,
            self.min_count,
            self.mode,
            self.softmax_over_question,
            self.t_max,
            self.trigram_buckets,
            self.trigram_dim,
            self.trigram_filters,
            self.trigram_window,
            self.word_dim,
        ))
    }

    /// Same idea for ranker checkpoints, which share no weights or
    /// vocabulary with the reader.
    pub fn ranker_fingerprint(&self) -> u64 {
        fnv1a(&format!(
            "ranker_filters={} ranker_proj={} ranker_window={} trigram_buckets={}",
            self.ranker_filters, self.ranker_proj, self.ranker_window, self.trigram_buckets,
        ))
    }

    /// Write the resolved config into `dir` as config.resolved.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.resolved())?;
        Ok(path)
    }
}
