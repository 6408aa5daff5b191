//! Corpus ingestion, vocabulary, tokenization, and masked-batch assembly.
//!
//! The tokenizer is deliberately plain: lowercase, split on whitespace,
//! split punctuation into its own tokens. Desk-scale corpora do not need
//! subword models, and nothing downstream depends on one.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Special-token ids are fixed so serialized artifacts stay readable.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Label value for positions that do not participate in the MLM loss.
pub const IGNORE: i64 = -1;

/// Bijective token-string <-> id mapping with the five specials at ids 0..4.
#[derive(Debug, Clone)]
pub struct Vocab {
    id_of: HashMap<String, usize>,
    token_of: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary: specials first, then tokens by descending
    /// frequency, ties broken lexicographically, truncated at `max_size`.
    pub fn build(corpus: &str, max_size: usize) -> Result<Vocab> {
        if max_size < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Config(format!(
                "vocab max_size must be at least {}, got {}",
                SPECIAL_TOKENS.len() + 1,
                max_size
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut saw_any = false;
        for line in corpus.lines() {
            for tok in tokenize(line) {
                saw_any = true;
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(Error::Input("empty corpus: no tokens found".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut token_of: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for (tok, _) in ranked {
            if token_of.len() == max_size {
                break;
            }
            token_of.push(tok);
        }
        Ok(Vocab::from_tokens(token_of))
    }

    fn from_tokens(token_of: Vec<String>) -> Vocab {
        let id_of = token_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { id_of, token_of }
    }

    /// Rebuilds a vocabulary from an explicit token list (line order = id),
    /// with the same validation as `load`: specials in front, no duplicates.
    pub fn from_token_list(token_of: Vec<String>) -> Result<Vocab> {
        if token_of.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Input(format!(
                "token list holds {} entries, fewer than the specials",
                token_of.len()
            )));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if token_of[i] != *want {
                return Err(Error::Input(format!(
                    "token list entry {} is {:?}, expected {:?}",
                    i, token_of[i], want
                )));
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in token_of.iter().enumerate() {
            if let Some(prev) = seen.insert(t.clone(), i) {
                return Err(Error::Input(format!(
                    "token {t:?} appears at both position {prev} and {i}"
                )));
            }
        }
        Ok(Vocab::from_tokens(token_of))
    }

    /// All tokens in id order, for embedding into checkpoints.
    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn size(&self) -> usize {
        self.token_of.len()
    }

    /// Id of a token, falling back to [UNK] for anything unseen.
    pub fn id(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(|s| s.as_str())
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.token_of {
            writeln!(out, "{tok}").expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let token_of: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocab::from_token_list(token_of)
            .map_err(|e| Error::Input(format!("vocab file {}: {e}", path.display())))
    }
}

/// Lowercases and splits a line into word and punctuation tokens.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in line.chars().flat_map(|c| c.to_lowercase()) {
        if ch.is_alphanumeric() || ch == '\'' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// [CLS] + token ids + [SEP], truncated so the result is exactly `max_len`
/// long, right-padded with [PAD]. [SEP] survives truncation.
pub fn encode(sentence: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 3 {
        return Err(Error::Config(format!(
            "max_len must be at least 3 to fit [CLS], one token, and [SEP]; got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for tok in tokenize(sentence) {
        if ids.len() == max_len - 1 {
            break;
        }
        ids.push(vocab.id(&tok));
    }
    ids.push(SEP);
    ids.resize(max_len, PAD);
    Ok(ids)
}

/// How selected positions are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// 80% -> [MASK], 10% -> random non-special token, 10% -> unchanged.
    Bert,
    /// Every selected position becomes [MASK]. Used where tests need the
    /// corruption to be a pure function of the selection.
    ForcedMask,
}

/// One sequence after masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedRow {
    /// Corrupted input ids.
    pub token_ids: Vec<usize>,
    /// Original id where masked, IGNORE elsewhere.
    pub labels: Vec<i64>,
    pub mask_positions: Vec<bool>,
    /// Pre-corruption ids, kept for drift measurement.
    pub original_ids: Vec<usize>,
}

impl MaskedRow {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn masked_count(&self) -> usize {
        self.mask_positions.iter().filter(|&&m| m).count()
    }

    /// Positions holding [PAD].
    pub fn pad_mask(&self) -> Vec<bool> {
        self.original_ids.iter().map(|&id| id == PAD).collect()
    }
}

/// A batch is an immutable collection of rows of equal length.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub rows: Vec<MaskedRow>,
}

impl MaskedBatch {
    pub fn new(rows: Vec<MaskedRow>) -> Result<MaskedBatch> {
        if rows.is_empty() {
            return Err(Error::Input("batch must hold at least one row".into()));
        }
        let s = rows[0].seq_len();
        if rows.iter().any(|r| r.seq_len() != s) {
            return Err(Error::Input("batch rows must share one length".into()));
        }
        Ok(MaskedBatch { rows })
    }

    pub fn seq_len(&self) -> usize {
        self.rows[0].seq_len()
    }
}

fn maskable(id: usize) -> bool {
    id >= SPECIAL_TOKENS.len()
}

/// Selects positions with independent probability `rate` (specials and
/// padding excluded) and corrupts them under `policy`. Deterministic for a
/// fixed rng stream.
pub fn apply_masking<R: Rng>(
    ids: &[usize],
    rate: f64,
    policy: MaskPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedRow> {
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(Error::Config(format!("mask rate must lie in [0, 1], got {rate}")));
    }
    let n = ids.len();
    let mut token_ids = ids.to_vec();
    let mut labels = vec![IGNORE; n];
    let mut mask_positions = vec![false; n];
    for j in 0..n {
        if !maskable(ids[j]) {
            continue;
        }
        if rng.gen::<f64>() >= rate {
            continue;
        }
        mask_positions[j] = true;
        labels[j] = ids[j] as i64;
        token_ids[j] = match policy {
            MaskPolicy::ForcedMask => MASK,
            MaskPolicy::Bert => {
                let u: f64 = rng.gen();
                if u < 0.8 {
                    MASK
                } else if u < 0.9 && vocab_size > SPECIAL_TOKENS.len() {
                    rng.gen_range(SPECIAL_TOKENS.len()..vocab_size)
                } else {
                    ids[j]
                }
            }
        };
    }
    Ok(MaskedRow {
        token_ids,
        labels,
        mask_positions,
        original_ids: ids.to_vec(),
    })
}

/// Masks one extra position when a row came out of `apply_masking` with
/// none, so every row carries a defined MLM loss. No-op when the row has a
/// mask already or holds no maskable token.
pub fn ensure_one_mask<R: Rng>(row: &mut MaskedRow, policy: MaskPolicy, rng: &mut R) {
    if row.masked_count() > 0 {
        return;
    }
    let candidates: Vec<usize> = (0..row.seq_len())
        .filter(|&j| maskable(row.original_ids[j]))
        .collect();
    if candidates.is_empty() {
        return;
    }
    let j = candidates[rng.gen_range(0..candidates.len())];
    row.mask_positions[j] = true;
    row.labels[j] = row.original_ids[j] as i64;
    // corruption is always [MASK] here; the 80/10/10 split applies to the
    // Bernoulli pass, not to this fallback
    let _ = policy;
    row.token_ids[j] = MASK;
}

/// Reads a one-sentence-per-line corpus, dropping lines with no tokens.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !tokenize(l).is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::Input(format!(
            "corpus {} holds no usable lines",
            path.display()
        )));
    }
    Ok(lines)
}

/// Generates a templated synthetic corpus. The text is low-entropy on
/// purpose: each slot draws from a small pool, so a small model can cut its
/// masked-prediction loss quickly and smoke runs finish in minutes.
pub fn synthetic_corpus(lines: usize, seed: u64) -> String {
    use rand::SeedableRng;
    let subjects = [
        "engineer", "pilot", "gardener", "teacher", "sailor", "doctor", "painter", "farmer",
    ];
    let verbs = [
        "repairs", "inspects", "paints", "measures", "cleans", "moves", "opens", "closes",
    ];
    let objects = [
        "engine", "bridge", "window", "ladder", "table", "wheel", "door", "roof",
    ];
    let places = [
        "harbor", "garden", "station", "market", "village", "tower", "field", "shop",
    ];
    let adjectives = ["old", "red", "small", "wet", "tall", "new", "wide", "quiet"];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..lines {
        let s = subjects[rng.gen_range(0..subjects.len())];
        let v = verbs[rng.gen_range(0..verbs.len())];
        let a = adjectives[rng.gen_range(0..adjectives.len())];
        let o = objects[rng.gen_range(0..objects.len())];
        let p = places[rng.gen_range(0..places.len())];
        match rng.gen_range(0..3) {
            0 => writeln!(out, "the {s} {v} the {a} {o} in the {p} .").expect("string write"),
            1 => writeln!(out, "a {s} {v} the {o} near the {a} {p} .").expect("string write"),
            _ => writeln!(out, "the {a} {s} {v} a {o} at the {p} .").expect("string write"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_orders_specials_then_frequency_then_lexicographic() {
        let v = Vocab::build("a b a", 8).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.size(), 7);
        assert_eq!(v.id("[MASK]"), MASK);
        // equal counts fall back to string order
        let v = Vocab::build("b a b a", 8).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
    }

    #[test]
    fn vocab_truncates_at_max_size() {
        let corpus = "one two three four five six seven eight nine ten";
        let v = Vocab::build(corpus, 8).unwrap();
        assert_eq!(v.size(), 8);
        // 3 slots left after specials
        let kept: Vec<_> = (5..8).map(|i| v.token(i).unwrap().to_string()).collect();
        assert_eq!(kept, vec!["eight", "five", "four"]); // all count 1, lexicographic
    }

    #[test]
    fn vocab_rejects_empty_corpus_and_tiny_max_size() {
        assert!(matches!(Vocab::build("", 8), Err(Error::Input(_))));
        assert!(matches!(Vocab::build("  \n\t\n", 8), Err(Error::Input(_))));
        assert!(matches!(Vocab::build("a", 5), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_round_trips_through_a_file() {
        let v = Vocab::build("alpha beta alpha gamma", 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v.size(), v2.size());
        for i in 0..v.size() {
            assert_eq!(v.token(i), v2.token(i));
        }
    }

    #[test]
    fn vocab_load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "[PAD]\n[UNK]\n[CLS]\n[SEP]\nnot_mask\nword\n").unwrap();
        assert!(Vocab::load(&bad).is_err());
        let dup = dir.path().join("dup.txt");
        std::fs::write(&dup, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nword\nword\n").unwrap();
        assert!(Vocab::load(&dup).is_err());
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Hello, World!"),
            vec!["hello", ",", "world", "!"]
        );
        assert_eq!(tokenize("  spaced   out  "), vec!["spaced", "out"]);
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn encode_layout_and_truncation() {
        let v = Vocab::build("a b a", 8).unwrap();
        assert_eq!(encode("a b", &v, 5).unwrap(), vec![CLS, 5, 6, SEP, PAD]);
        assert_eq!(encode("", &v, 4).unwrap(), vec![CLS, SEP, PAD, PAD]);
        assert_eq!(encode("zzz", &v, 4).unwrap(), vec![CLS, UNK, SEP, PAD]);
        // truncation keeps [SEP] as the last real token
        let long = encode("a b a b a b a b", &v, 5).unwrap();
        assert_eq!(long, vec![CLS, 5, 6, 5, SEP]);
        assert!(encode("a", &v, 2).is_err());
    }

    #[test]
    fn masking_rate_zero_and_forced_one() {
        let v = Vocab::build("a b a", 8).unwrap();
        let ids = encode("a b a b", &v, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row = apply_masking(&ids, 0.0, MaskPolicy::Bert, v.size(), &mut rng).unwrap();
        assert_eq!(row.masked_count(), 0);
        assert!(row.labels.iter().all(|&l| l == IGNORE));
        assert_eq!(row.token_ids, row.original_ids);

        let row = apply_masking(&ids, 1.0, MaskPolicy::ForcedMask, v.size(), &mut rng).unwrap();
        for j in 0..ids.len() {
            if ids[j] >= 5 {
                assert!(row.mask_positions[j]);
                assert_eq!(row.token_ids[j], MASK);
                assert_eq!(row.labels[j], ids[j] as i64);
            } else {
                assert!(!row.mask_positions[j], "special at {j} was masked");
                assert_eq!(row.token_ids[j], ids[j]);
                assert_eq!(row.labels[j], IGNORE);
            }
        }
    }

    #[test]
    fn masking_is_reproducible_and_consistent() {
        let v = Vocab::build("a b c d e f g", 16).unwrap();
        let ids = encode("a b c d e f g a b c", &v, 16).unwrap();
        let r1 = apply_masking(
            &ids,
            0.4,
            MaskPolicy::Bert,
            v.size(),
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        let r2 = apply_masking(
            &ids,
            0.4,
            MaskPolicy::Bert,
            v.size(),
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!(r1, r2);
        for j in 0..ids.len() {
            assert_eq!(r1.mask_positions[j], r1.labels[j] != IGNORE);
            if !r1.mask_positions[j] {
                assert_eq!(r1.token_ids[j], r1.original_ids[j]);
            }
        }
    }

    #[test]
    fn masking_selection_count_is_binomial() {
        // 10,000 maskable positions at rate 0.15: expect 1500 +- 3 sigma,
        // sigma = sqrt(10000 * 0.15 * 0.85) ~= 35.7
        let ids = vec![7usize; 10_000];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row = apply_masking(&ids, 0.15, MaskPolicy::ForcedMask, 64, &mut rng).unwrap();
        let n = row.masked_count() as f64;
        assert!((n - 1500.0).abs() < 3.0 * 35.707, "selected {n}");
    }

    #[test]
    fn bert_split_fractions_are_roughly_80_10_10() {
        let ids = vec![9usize; 30_000];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let row = apply_masking(&ids, 1.0, MaskPolicy::Bert, 64, &mut rng).unwrap();
        let n = row.masked_count() as f64;
        let masks = row.token_ids.iter().filter(|&&t| t == MASK).count() as f64;
        let kept = row
            .token_ids
            .iter()
            .zip(&row.original_ids)
            .filter(|(t, o)| t == o)
            .count() as f64;
        // random replacement can reproduce the original id, so "kept" is a
        // slight overcount of the 10% unchanged bucket
        assert!((masks / n - 0.8).abs() < 0.02, "mask fraction {}", masks / n);
        assert!((kept / n - 0.1).abs() < 0.03, "kept fraction {}", kept / n);
    }

    #[test]
    fn ensure_one_mask_only_fires_on_empty_rows() {
        let v = Vocab::build("a b a", 8).unwrap();
        let ids = encode("a b", &v, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut row = apply_masking(&ids, 0.0, MaskPolicy::Bert, v.size(), &mut rng).unwrap();
        ensure_one_mask(&mut row, MaskPolicy::Bert, &mut rng);
        assert_eq!(row.masked_count(), 1);
        let j = row.mask_positions.iter().position(|&m| m).unwrap();
        assert_eq!(row.token_ids[j], MASK);
        assert!(row.original_ids[j] >= 5);

        let before = row.clone();
        ensure_one_mask(&mut row, MaskPolicy::Bert, &mut rng);
        assert_eq!(row, before);

        // a row with no content tokens stays untouched
        let mut empty = apply_masking(&[CLS, SEP, PAD], 1.0, MaskPolicy::Bert, v.size(), &mut rng)
            .unwrap();
        ensure_one_mask(&mut empty, MaskPolicy::Bert, &mut rng);
        assert_eq!(empty.masked_count(), 0);
    }

    #[test]
    fn batch_requires_uniform_row_length() {
        let r1 = MaskedRow {
            token_ids: vec![CLS, SEP],
            labels: vec![IGNORE; 2],
            mask_positions: vec![false; 2],
            original_ids: vec![CLS, SEP],
        };
        let mut r2 = r1.clone();
        r2.token_ids.push(PAD);
        r2.labels.push(IGNORE);
        r2.mask_positions.push(false);
        r2.original_ids.push(PAD);
        assert!(MaskedBatch::new(vec![r1.clone(), r2]).is_err());
        assert!(MaskedBatch::new(vec![]).is_err());
        assert_eq!(MaskedBatch::new(vec![r1]).unwrap().seq_len(), 2);
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_small() {
        let a = synthetic_corpus(4000, 7);
        let b = synthetic_corpus(4000, 7);
        assert_eq!(a, b);
        assert!(a.len() < 1_000_000, "corpus is {} bytes", a.len());
        assert!(a.lines().count() == 4000);
        assert_ne!(a, synthetic_corpus(4000, 8));
        let v = Vocab::build(&a, 512).unwrap();
        assert!(v.size() > 20 && v.size() < 60, "vocab size {}", v.size());
    }
}
