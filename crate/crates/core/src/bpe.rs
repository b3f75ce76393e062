//! Byte pair encoding over normalized IR word streams.
//!
//! Merging happens inside words, starting from characters. A unit that
//! starts a word and a unit that continues one get distinct ids; the
//! continuation form is written with a `##` prefix (`add` -> `add`,
//! `%v12` -> `%v` `##12`). Sentinels and special tokens are atomic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ir::{FUNCTION_SENTINEL, INSTRUCTION_SENTINEL};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const SPECIAL_TOKENS: [&str; 6] = [CLS, SEP, EOS, MASK, PAD, UNK];
pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const PAD_ID: u32 = 4;
pub const UNK_ID: u32 = 5;
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

const ATOMIC_WORDS: [&str; 2] = [INSTRUCTION_SENTINEL, FUNCTION_SENTINEL];
const CONTINUATION: &str = "##";
const FILE_HEADER: &str = "irmatch-bpe v1";
const TOKENS_SECTION: &str = "#tokens";

pub const DEFAULT_VOCAB_SIZE: usize = 8192;
pub const DEFAULT_MIN_FREQ: usize = 2;

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

fn is_atomic(word: &str) -> bool {
    SPECIAL_TOKENS.contains(&word) || ATOMIC_WORDS.contains(&word)
}

fn continuation(unit: &str) -> String {
    format!("{CONTINUATION}{unit}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Result<Self> {
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(Error::format("vocabulary", format!("id {id} must be {special}")));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {tok:?}")));
            }
        }
        let ranks = merges.iter().enumerate().map(|(rank, pair)| (pair.clone(), rank)).collect();
        Ok(Self { merges, ranks, tokens, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Splits one word into merged units (plain strings, no `##`).
    pub fn segment(&self, word: &str) -> Vec<String> {
        if is_atomic(word) {
            return vec![word.to_string()];
        }
        let mut units: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = units
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&rank| (rank, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            units = merge_pair(&units, left, right);
        }
        units
    }

    /// Maps words to ids, applying merges in priority order. Units missing
    /// from the table become `[UNK]`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(words.len());
        for word in words {
            let word = word.as_ref();
            if is_atomic(word) {
                ids.push(self.id(word).unwrap_or(UNK_ID));
                continue;
            }
            for (i, unit) in self.segment(word).into_iter().enumerate() {
                let key = if i == 0 { unit } else { continuation(&unit) };
                ids.push(self.id(&key).unwrap_or(UNK_ID));
            }
        }
        ids
    }

    /// Inverse of [`encode`](Self::encode) up to `[UNK]` loss.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        let mut words: Vec<String> = Vec::new();
        let mut open = false;
        for &id in ids {
            let tok = self.token(id).ok_or(Error::UnknownId { id, size: self.len() })?;
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if open && !is_atomic(tok) => {
                    words.last_mut().expect("open word").push_str(rest);
                }
                _ => {
                    words.push(tok.to_string());
                    open = !is_atomic(tok);
                }
            }
        }
        Ok(words)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FILE_HEADER}").unwrap();
        for (l, r) in &self.merges {
            writeln!(out, "{l}\t{r}").unwrap();
        }
        writeln!(out, "{TOKENS_SECTION}").unwrap();
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{tok}\t{id}").unwrap();
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(FILE_HEADER) {
            return Err(Error::format("vocabulary", format!("missing `{FILE_HEADER}` header")));
        }
        let mut merges = Vec::new();
        let mut tokens = Vec::new();
        let mut in_tokens = false;
        for (n, line) in lines.enumerate() {
            let bad = |what: &str| Error::format("vocabulary", format!("line {}: {what}", n + 2));
            if !in_tokens && line == TOKENS_SECTION {
                in_tokens = true;
                continue;
            }
            let (a, b) = line.split_once('\t').ok_or_else(|| bad("expected two tab-separated fields"))?;
            if in_tokens {
                let id: usize = b.parse().map_err(|_| bad("bad token id"))?;
                if id != tokens.len() {
                    return Err(bad("token ids must be dense and ascending"));
                }
                tokens.push(a.to_string());
            } else {
                merges.push((a.to_string(), b.to_string()));
            }
        }
        if !in_tokens {
            return Err(Error::format("vocabulary", "missing #tokens section"));
        }
        Self::from_parts(merges, tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_file_string())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_str(&std::fs::read_to_string(path)?)
    }
}

fn merge_pair(units: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(units.len());
    let mut i = 0;
    while i < units.len() {
        if i + 1 < units.len() && units[i] == left && units[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(units[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns merges by greedy highest-frequency pair merging within words.
///
/// Every symbol occupies two ids (word-initial and `##` continuation
/// form), so each merge adds up to two tokens. Training stops when the
/// next merge would exceed `vocab_size` or the best pair occurs fewer than
/// `min_freq` times. Ties go to the lexicographically smallest
/// `(left, right)`.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[String]>,
{
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for stream in corpus {
        for word in stream.as_ref() {
            *word_counts.entry(word.clone()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut words: Vec<(Vec<String>, usize)> = Vec::new();
    let mut chars: BTreeSet<char> = BTreeSet::new();
    for (word, count) in &word_counts {
        if is_atomic(word) {
            continue;
        }
        let units: Vec<String> = word.chars().filter(|c| !matches!(c, '\t' | '\n' | '\r')).map(String::from).collect();
        chars.extend(word.chars().filter(|c| !matches!(c, '\t' | '\n' | '\r')));
        if !units.is_empty() {
            words.push((units, *count));
        }
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ATOMIC_WORDS.iter().map(|s| s.to_string()));
    for c in &chars {
        tokens.push(c.to_string());
        tokens.push(continuation(&c.to_string()));
    }
    if vocab_size < tokens.len() {
        return Err(Error::VocabTooSmall { requested: vocab_size, minimum: tokens.len() });
    }
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    let mut merges = Vec::new();
    while tokens.len() + 2 <= vocab_size {
        let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (units, count) in &words {
            for w in units.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        // max count; BTreeMap iteration is ascending so the first maximum
        // is the lexicographically smallest pair
        let mut best: Option<((&str, &str), usize)> = None;
        for (pair, count) in pair_counts {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < min_freq {
            break;
        }
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");
        for form in [merged.clone(), continuation(&merged)] {
            if known.insert(form.clone()) {
                tokens.push(form);
            }
        }
        for (units, _) in &mut words {
            if units.len() > 1 {
                *units = merge_pair(units, &left, &right);
            }
        }
        merges.push((left, right));
    }
    Vocabulary::from_parts(merges, tokens)
}

/// Model input: ids plus attention mask (1 = real token, 0 = `[PAD]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn unpadded(ids: Vec<u32>) -> Self {
        let attention_mask = ids.iter().map(|&id| u8::from(id != PAD_ID)).collect();
        Self { ids, attention_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Drops trailing pad positions.
    pub fn trimmed(&self) -> Self {
        let keep = self.attention_mask.iter().rposition(|&m| m == 1).map_or(0, |p| p + 1);
        Self { ids: self.ids[..keep].to_vec(), attention_mask: self.attention_mask[..keep].to_vec() }
    }
}

/// Lays out `[CLS] a ([SEP] b) [EOS]`, truncating the longer segment
/// first (`b` on ties) and right-padding to `max_len`.
pub fn build_model_input(seq_a: &[u32], seq_b: Option<&[u32]>, max_len: usize) -> TokenSequence {
    assert!(max_len >= 4, "max_len must be at least 4");
    let specials = if seq_b.is_some() { 3 } else { 2 };
    let budget = max_len - specials;
    let mut len_a = seq_a.len();
    let mut len_b = seq_b.map_or(0, <[u32]>::len);
    while len_a + len_b > budget {
        if len_a > len_b {
            len_a -= 1;
        } else {
            len_b -= 1;
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend_from_slice(&seq_a[..len_a]);
    if let Some(b) = seq_b {
        ids.push(SEP_ID);
        ids.extend_from_slice(&b[..len_b]);
    }
    ids.push(EOS_ID);
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let attention_mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    TokenSequence { ids, attention_mask }
}
