//! Text pipeline: tokenization with byte offsets, word and character
//! vocabularies, hashed letter trigrams, pretrained vector ingestion,
//! and answer span alignment.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// One token with byte offsets into the source string, so predictions
/// can be mapped back to the original text.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    fn new(text: &str, start: usize) -> Self {
        Token {
            text: text.to_string(),
            start,
            end: start + text.len(),
        }
    }
}

/// Whitespace-split tokenizer that peels leading and trailing ASCII
/// punctuation into separate tokens and splits the remaining core on
/// '-' and '/', keeping the separators. Offsets are byte positions.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0usize;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        segment_tokens(&text[start..i], start, &mut out);
    }
    out
}

fn segment_tokens(segment: &str, base: usize, out: &mut Vec<Token>) {
    let chars: Vec<(usize, char)> = segment.char_indices().collect();
    let mut lo = 0usize;
    let mut hi = chars.len();

    let mut leading = Vec::new();
    while lo < hi && chars[lo].1.is_ascii_punctuation() {
        leading.push(Token::new(&chars[lo].1.to_string(), base + chars[lo].0));
        lo += 1;
    }
    let mut trailing = Vec::new();
    while hi > lo && chars[hi - 1].1.is_ascii_punctuation() {
        trailing.push(Token::new(&chars[hi - 1].1.to_string(), base + chars[hi - 1].0));
        hi -= 1;
    }
    out.extend(leading);
    if lo < hi {
        let core_start = chars[lo].0;
        let core_end = if hi == chars.len() {
            segment.len()
        } else {
            chars[hi].0
        };
        core_tokens(&segment[core_start..core_end], base + core_start, out);
    }
    out.extend(trailing.into_iter().rev());
}

fn core_tokens(core: &str, base: usize, out: &mut Vec<Token>) {
    let mut piece_start = 0usize;
    for (idx, ch) in core.char_indices() {
        if ch == '-' || ch == '/' {
            if idx > piece_start {
                out.push(Token::new(&core[piece_start..idx], base + piece_start));
            }
            out.push(Token::new(&core[idx..idx + 1], base + idx));
            piece_start = idx + 1;
        }
    }
    if piece_start < core.len() {
        out.push(Token::new(&core[piece_start..], base + piece_start));
    }
}

/// Word vocabulary with reserved PAD (0) and UNK (1) rows. Lookup is
/// case-sensitive with a lowercase fallback before UNK.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Build from token strings: entries are ordered by descending
    /// frequency then lexicographically, so identical corpora yield
    /// identical id assignments.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I, min_count: u64) -> Self {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for tok in tokens {
            *counts.entry(tok).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        words.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        let lower = word.to_lowercase();
        if lower != word {
            if let Some(&i) = self.index.get(lower.as_str()) {
                return i;
            }
        }
        UNK
    }

    /// FNV-1a over the ordered word list; ties checkpoints to the vocab
    /// they were trained with.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for w in &self.words {
            for &b in w.as_bytes() {
                h = fnv1a_step(h, b);
            }
            h = fnv1a_step(h, 0xff);
        }
        h
    }
}

/// Character vocabulary for the char convolution channel, PAD=0 UNK=1.
#[derive(Clone, Debug)]
pub struct CharVocab {
    chars: Vec<char>,
    index: BTreeMap<char, u32>,
}

impl CharVocab {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let mut counts: BTreeMap<char, u64> = BTreeMap::new();
        for tok in tokens {
            for ch in tok.chars() {
                *counts.entry(ch).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut chars = vec!['\u{0}', '\u{1}'];
        chars.extend(ranked.into_iter().map(|(c, _)| c));
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        CharVocab { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn id(&self, ch: char) -> u32 {
        self.index.get(&ch).copied().unwrap_or(UNK)
    }

    pub fn ids(&self, word: &str) -> Vec<u32> {
        word.chars().map(|c| self.id(c)).collect()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a_step(h: u64, b: u8) -> u64 {
    (h ^ b as u64).wrapping_mul(FNV_PRIME)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| fnv1a_step(h, b))
}

/// Hashed ids of the letter trigrams of `word`, in order, duplicates
/// kept. The word is lowercased and wrapped in '#' boundary markers, so
/// "cat" yields trigrams #ca, cat, at#.
pub fn letter_trigram_ids(word: &str, buckets: u32) -> Vec<u32> {
    assert!(buckets > 0);
    let wrapped: Vec<char> = std::iter::once('#')
        .chain(word.to_lowercase().chars())
        .chain(std::iter::once('#'))
        .collect();
    if wrapped.len() < 3 {
        return Vec::new();
    }
    wrapped
        .windows(3)
        .map(|w| {
            let s: String = w.iter().collect();
            (fnv1a(s.as_bytes()) % buckets as u64) as u32
        })
        .collect()
}

/// Aggregated trigram counts for a word, sorted by id.
pub fn trigram_counts(word: &str, buckets: u32) -> Vec<(u32, u32)> {
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for id in letter_trigram_ids(word, buckets) {
        *counts.entry(id).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

/// Read word vectors in the text format `word v1 v2 ... vd`, one word
/// per line. Vocabulary words found in the file (exactly, or lowercased)
/// take the file row; the rest are drawn from N(0, 0.01²); PAD stays
/// zero. Returns the embedding table and how many rows came from the
/// file.
pub fn load_pretrained<S: Scalar>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    seed: u64,
) -> Result<(Tensor<S>, usize)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut rows: BTreeMap<String, Vec<S>> = BTreeMap::new();
    let mut wanted: BTreeMap<&str, ()> = BTreeMap::new();
    for w in vocab.words().iter().skip(2) {
        wanted.insert(w.as_str(), ());
    }
    let lowercase_wanted: BTreeMap<String, ()> = vocab
        .words()
        .iter()
        .skip(2)
        .map(|w| (w.to_lowercase(), ()))
        .collect();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap();
        if !wanted.contains_key(word) && !lowercase_wanted.contains_key(word) {
            continue;
        }
        let vals: Vec<S> = parts
            .map(|p| {
                p.parse::<f64>().map(S::from_f64).map_err(|_| Error::Parse {
                    location: format!("{}:{}", path.display(), lineno + 1),
                    message: format!("bad float {p:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != dim {
            return Err(Error::Parse {
                location: format!("{}:{}", path.display(), lineno + 1),
                message: format!("expected {dim} values, found {}", vals.len()),
            });
        }
        rows.entry(word.to_string()).or_insert(vals);
    }

    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut loaded = 0usize;
    for (i, word) in vocab.words().iter().enumerate() {
        if i == PAD as usize {
            continue;
        }
        let row = rows
            .get(word)
            .or_else(|| rows.get(&word.to_lowercase()));
        let dst = &mut table.data_mut()[i * dim..(i + 1) * dim];
        match row {
            Some(vals) if i != UNK as usize => {
                dst.copy_from_slice(vals);
                loaded += 1;
            }
            _ => {
                for v in dst.iter_mut() {
                    let z: f64 = normal.sample(&mut rng);
                    *v = S::from_f64(z * 0.01);
                }
            }
        }
    }
    Ok((table, loaded))
}

/// Inclusive token index range covering the byte range `[start, end)`,
/// or None when no token overlaps it.
pub fn align_byte_span(tokens: &[Token], start: usize, end: usize) -> Option<(usize, usize)> {
    if start >= end {
        return None;
    }
    let mut first = None;
    let mut last = None;
    for (i, tok) in tokens.iter().enumerate() {
        if tok.end > start && tok.start < end {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    }
}

/// Convert a code point offset (as used by external datasets) to a byte
/// offset into `text`.
pub fn char_to_byte(text: &str, char_idx: usize) -> Option<usize> {
    if char_idx == 0 {
        return Some(0);
    }
    text.char_indices()
        .nth(char_idx)
        .map(|(b, _)| b)
        .or_else(|| {
            if text.chars().count() == char_idx {
                Some(text.len())
            } else {
                None
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn keeps_interior_ampersand_and_splits_standalone() {
        let toks = tokenize("The V&A Theatre & Performance galleries opened in March 2009.");
        assert_eq!(
            texts(&toks),
            vec![
                "The",
                "V&A",
                "Theatre",
                "&",
                "Performance",
                "galleries",
                "opened",
                "in",
                "March",
                "2009",
                "."
            ]
        );
    }

    #[test]
    fn splits_on_hyphen_and_slash_keeping_separators() {
        let toks = tokenize("state-of-the-art km/h");
        assert_eq!(
            texts(&toks),
            vec!["state", "-", "of", "-", "the", "-", "art", "km", "/", "h"]
        );
    }

    #[test]
    fn peels_punctuation_in_text_order() {
        let toks = tokenize("(1874-1880).");
        assert_eq!(texts(&toks), vec!["(", "1874", "-", "1880", ")", "."]);
        let s = "(1874-1880).";
        for t in &toks {
            assert_eq!(&s[t.start..t.end], t.text);
        }
    }

    #[test]
    fn offsets_round_trip_through_source() {
        let s = "  The quick-brown fox's \"den\" (c. 1999)? ";
        for t in tokenize(s) {
            assert_eq!(&s[t.start..t.end], t.text, "token {t:?}");
        }
    }

    #[test]
    fn multibyte_text_is_safe_and_aligned() {
        let s = "naïve café — “smart” apostrophe’s test";
        let toks = tokenize(s);
        for t in &toks {
            assert_eq!(&s[t.start..t.end], t.text);
        }
        // non-ASCII punctuation is not peeled
        assert!(toks.iter().any(|t| t.text == "“smart”"));
    }

    #[test]
    fn fully_punctuation_segment_becomes_char_tokens() {
        assert_eq!(texts(&tokenize("-- !?")), vec!["-", "-", "!", "?"]);
    }

    #[test]
    fn vocab_reserves_pad_and_unk() {
        let v = Vocab::build(["b", "a", "b"], 1);
        assert_eq!(v.word(PAD), "<pad>");
        assert_eq!(v.word(UNK), "<unk>");
        assert_eq!(v.id("b"), 2); // most frequent first
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocab_lowercase_fallback() {
        let v = Vocab::build(["apple"], 1);
        assert_eq!(v.id("Apple"), v.id("apple"));
        assert_eq!(v.id("APPLE"), v.id("apple"));
        let v2 = Vocab::build(["Apple"], 1);
        // exact match wins; lowercase probe of an unknown-case word misses
        assert_eq!(v2.id("Apple"), 2);
        assert_eq!(v2.id("APPLE"), UNK);
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let words = ["pear", "apple", "pear", "quince", "apple", "apple"];
        let a = Vocab::build(words, 1);
        let b = Vocab::build(words, 1);
        assert_eq!(a.words(), b.words());
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), Vocab::build(["other"], 1).fingerprint());
    }

    #[test]
    fn min_count_filters_rare_words() {
        let v = Vocab::build(["a", "a", "b"], 2);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn char_vocab_maps_unknown_to_unk() {
        let cv = CharVocab::build(["abc"]);
        assert!(cv.id('a') >= 2);
        assert_eq!(cv.id('z'), UNK);
        assert_eq!(cv.ids("ab"), vec![cv.id('a'), cv.id('b')]);
    }

    #[test]
    fn trigrams_wrap_with_boundary_markers() {
        let ids = letter_trigram_ids("cat", 1 << 20);
        assert_eq!(ids.len(), 3); // #ca cat at#
        assert_eq!(ids[0], (fnv1a(b"#ca") % (1 << 20)) as u32);
        assert_eq!(ids[1], (fnv1a(b"cat") % (1 << 20)) as u32);
        assert_eq!(ids[2], (fnv1a(b"at#") % (1 << 20)) as u32);
    }

    #[test]
    fn trigrams_lowercase_and_handle_short_words() {
        assert_eq!(
            letter_trigram_ids("CAT", 50000),
            letter_trigram_ids("cat", 50000)
        );
        assert_eq!(letter_trigram_ids("a", 50000).len(), 1); // #a#
        assert_eq!(letter_trigram_ids("", 50000).len(), 0);
    }

    #[test]
    fn trigram_counts_aggregate_duplicates() {
        // #aaaa# has windows #aa aaa aaa aa#
        let counts = trigram_counts("aaaa", 1 << 20);
        assert_eq!(counts.len(), 3);
        let total: u32 = counts.iter().map(|&(_, c)| c).sum();
        assert_eq!(total, 4);
        assert!(counts.iter().any(|&(_, c)| c == 2));
        assert!(counts.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn pretrained_rows_copied_missing_randomized_pad_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "apple 1.0 2.0 3.0").unwrap();
        writeln!(f, "банан -1.0 0.5 0.25").unwrap();
        drop(f);

        let v = Vocab::build(["apple", "банан", "cherry"], 1);
        let (table, loaded) = load_pretrained::<f32>(&path, &v, 3, 7).unwrap();
        assert_eq!(loaded, 2);
        assert_eq!(table.shape(), &[5, 3]);
        let row = |i: u32| &table.data()[i as usize * 3..(i as usize + 1) * 3];
        assert_eq!(row(v.id("apple")), &[1.0, 2.0, 3.0]);
        assert_eq!(row(v.id("банан")), &[-1.0, 0.5, 0.25]);
        assert!(row(PAD).iter().all(|&x| x == 0.0));
        assert!(row(v.id("cherry")).iter().any(|&x| x != 0.0));
        assert!(row(v.id("cherry")).iter().all(|&x| x.abs() < 0.1));
    }

    #[test]
    fn pretrained_lowercase_file_row_serves_capitalized_word() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        std::fs::write(&path, "paris 9.0 9.0\n").unwrap();
        let v = Vocab::build(["Paris"], 1);
        let (table, loaded) = load_pretrained::<f32>(&path, &v, 2, 0).unwrap();
        assert_eq!(loaded, 1);
        assert_eq!(
            &table.data()[v.id("Paris") as usize * 2..][..2],
            &[9.0, 9.0]
        );
    }

    #[test]
    fn pretrained_dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        std::fs::write(&path, "apple 1.0 2.0\n").unwrap();
        let v = Vocab::build(["apple"], 1);
        let err = load_pretrained::<f32>(&path, &v, 3, 0).unwrap_err().to_string();
        assert!(err.contains("expected 3"), "{err}");
    }

    #[test]
    fn span_alignment_covers_overlapping_tokens() {
        let s = "The quick brown fox";
        let toks = tokenize(s);
        // "quick brown" starts at byte 4, ends at 15
        assert_eq!(align_byte_span(&toks, 4, 15), Some((1, 2)));
        // partial overlap still claims the token
        assert_eq!(align_byte_span(&toks, 6, 8), Some((1, 1)));
        assert_eq!(align_byte_span(&toks, 0, s.len()), Some((0, 3)));
        assert_eq!(align_byte_span(&toks, 5, 5), None);
    }

    #[test]
    fn char_offsets_convert_to_bytes() {
        let s = "héllo wörld";
        assert_eq!(char_to_byte(s, 0), Some(0));
        assert_eq!(char_to_byte(s, 1), Some(1));
        assert_eq!(char_to_byte(s, 2), Some(3)); // é is two bytes
        assert_eq!(char_to_byte(s, s.chars().count()), Some(s.len()));
        assert_eq!(char_to_byte(s, 99), None);
    }
}
