//! The unified token space and the interleaved sequence layout.
//!
//! One flat id space covers structural tokens, text words, the SEG
//! control token, and the depth block (DSTART, CODE_0..CODE_{K-1}, DEND).
//! Targets follow the fixed ordering
//!
//! ```text
//! [SEG] [DSTART d_1 .. d_n DEND] [t_1 .. t_m] [EOS]
//! ```
//!
//! and every loss locates the depth region through [`parse_depth_span`],
//! which is total: malformed input yields an absent span, never a panic.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub enum GrammarError {
    DuplicateWord { word: String },
    UnknownWord { word: String },
    BadCodeCount { k: usize },
    CodeOutOfRange { index: usize, k: usize },
    PromptTooLong { len: usize, max: usize },
}

impl core::fmt::Display for GrammarError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GrammarError::DuplicateWord { word } => write!(f, "duplicate word {word:?}"),
            GrammarError::UnknownWord { word } => write!(f, "word {word:?} not in vocabulary"),
            GrammarError::BadCodeCount { k } => write!(f, "codebook size {k} must be at least 1"),
            GrammarError::CodeOutOfRange { index, k } => {
                write!(f, "code index {index} out of range for K = {k}")
            }
            GrammarError::PromptTooLong { len, max } => {
                write!(f, "prompt length {len} exceeds padded length {max}")
            }
        }
    }
}

/// Position role within a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Seg,
    DepthMarker,
    DepthCode,
    Text,
    Pad,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Prompt => "prompt",
            Role::Seg => "seg",
            Role::DepthMarker => "depth_marker",
            Role::DepthCode => "depth_code",
            Role::Text => "text",
            Role::Pad => "pad",
        }
    }
}

/// Token ids with a parallel role mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Location of the depth block inside a sequence: `s` indexes DSTART,
/// `e` indexes DEND, `l = e - s - 1` is the interior length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthSpan {
    pub s: usize,
    pub e: usize,
    pub l: usize,
}

/// Interior length of an optional span; absent spans count as zero.
pub fn interior_len(span: &Option<DepthSpan>) -> usize {
    span.map_or(0, |sp| sp.l)
}

/// Closed vocabulary with the fixed id layout
/// `BOS, EOS, PAD, words.., SEG, DSTART, CODE_0..CODE_{K-1}, DEND`.
///
/// The depth-code ids are contiguous by construction, which the soft
/// reconstruction loss relies on when slicing logit columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    k: usize,
}

/// Template words wrapped around every query: the prompt reads
/// `BOS question <query..> answer`.
pub const TEMPLATE_PREFIX: &str = "question";
pub const TEMPLATE_SUFFIX: &str = "answer";

/// Deterministic id assignment from `(K, word list)`.
pub fn build_vocabulary(k: usize, text_words: &[&str]) -> Result<Vocabulary, GrammarError> {
    if k == 0 {
        return Err(GrammarError::BadCodeCount { k });
    }
    let mut words = Vec::with_capacity(text_words.len());
    for &w in text_words {
        if words.iter().any(|x: &String| x == w) {
            return Err(GrammarError::DuplicateWord {
                word: w.to_string(),
            });
        }
        words.push(w.to_string());
    }
    Ok(Vocabulary { words, k })
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        // BOS, EOS, PAD, words, SEG, DSTART, codes, DEND
        3 + self.words.len() + 1 + self.k + 2
    }

    pub fn code_count(&self) -> usize {
        self.k
    }

    pub fn bos(&self) -> u32 {
        0
    }

    pub fn eos(&self) -> u32 {
        1
    }

    pub fn pad(&self) -> u32 {
        2
    }

    pub fn seg(&self) -> u32 {
        (3 + self.words.len()) as u32
    }

    pub fn dstart(&self) -> u32 {
        self.seg() + 1
    }

    pub fn dend(&self) -> u32 {
        self.dstart() + 1 + self.k as u32
    }

    /// Id of CODE_index.
    pub fn code(&self, index: usize) -> Result<u32, GrammarError> {
        if index >= self.k {
            return Err(GrammarError::CodeOutOfRange {
                index,
                k: self.k,
            });
        }
        Ok(self.dstart() + 1 + index as u32)
    }

    /// The contiguous depth-code id set, half-open.
    pub fn code_ids(&self) -> core::ops::Range<u32> {
        self.dstart() + 1..self.dend()
    }

    pub fn is_code(&self, id: u32) -> bool {
        self.code_ids().contains(&id)
    }

    /// Codebook index of a depth-code id.
    pub fn code_index(&self, id: u32) -> Option<usize> {
        if self.is_code(id) {
            Some((id - self.dstart() - 1) as usize)
        } else {
            None
        }
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| (3 + i) as u32)
    }

    pub fn is_word(&self, id: u32) -> bool {
        (3..3 + self.words.len() as u32).contains(&id)
    }

    /// Surface form for dumps and answer decoding. Structural and depth
    /// tokens render as bracketed names.
    pub fn surface(&self, id: u32) -> String {
        if id == self.bos() {
            return "<bos>".to_string();
        }
        if id == self.eos() {
            return "<eos>".to_string();
        }
        if id == self.pad() {
            return "<pad>".to_string();
        }
        if id == self.seg() {
            return "<seg>".to_string();
        }
        if id == self.dstart() {
            return "<dstart>".to_string();
        }
        if id == self.dend() {
            return "<dend>".to_string();
        }
        if let Some(ci) = self.code_index(id) {
            return alloc::format!("<code_{ci}>");
        }
        if self.is_word(id) {
            return self.words[(id - 3) as usize].clone();
        }
        alloc::format!("<invalid_{id}>")
    }

    /// Token kind label used by the vocabulary dump.
    pub fn kind(&self, id: u32) -> &'static str {
        if id == self.bos() || id == self.eos() || id == self.pad() {
            "structural"
        } else if id == self.seg() {
            "seg"
        } else if id == self.dstart() || id == self.dend() {
            "depth_marker"
        } else if self.is_code(id) {
            "depth_code"
        } else if self.is_word(id) {
            "text"
        } else {
            "invalid"
        }
    }
}

/// Assemble the target region `[SEG][DSTART codes DEND][answer][EOS]`.
pub fn assemble_target(
    codes: &[usize],
    answer_words: &[&str],
    vocab: &Vocabulary,
) -> Result<TokenSequence, GrammarError> {
    let mut ids = Vec::with_capacity(codes.len() + answer_words.len() + 4);
    let mut roles = Vec::with_capacity(ids.capacity());
    ids.push(vocab.seg());
    roles.push(Role::Seg);
    ids.push(vocab.dstart());
    roles.push(Role::DepthMarker);
    for &c in codes {
        ids.push(vocab.code(c)?);
        roles.push(Role::DepthCode);
    }
    ids.push(vocab.dend());
    roles.push(Role::DepthMarker);
    for &w in answer_words {
        let id = vocab.word_id(w).ok_or_else(|| GrammarError::UnknownWord {
            word: w.to_string(),
        })?;
        ids.push(id);
        roles.push(Role::Text);
    }
    ids.push(vocab.eos());
    roles.push(Role::Text);
    Ok(TokenSequence { ids, roles })
}

/// First DSTART, then the first DEND after it; anything else is absent.
/// Interior tokens are not validated here — the losses decide how to
/// treat non-code interiors.
pub fn parse_depth_span(ids: &[u32], vocab: &Vocabulary) -> Option<DepthSpan> {
    let s = ids.iter().position(|&id| id == vocab.dstart())?;
    let e_rel = ids[s + 1..].iter().position(|&id| id == vocab.dend())?;
    let e = s + 1 + e_rel;
    Some(DepthSpan { s, e, l: e - s - 1 })
}

/// `BOS question <query..> answer`, every position role `prompt`.
pub fn build_prompt(
    query_words: &[&str],
    vocab: &Vocabulary,
) -> Result<TokenSequence, GrammarError> {
    let mut ids = Vec::with_capacity(query_words.len() + 3);
    ids.push(vocab.bos());
    for w in core::iter::once(&TEMPLATE_PREFIX)
        .chain(query_words.iter())
        .chain(core::iter::once(&TEMPLATE_SUFFIX))
    {
        let id = vocab.word_id(w).ok_or_else(|| GrammarError::UnknownWord {
            word: w.to_string(),
        })?;
        ids.push(id);
    }
    let roles = alloc::vec![Role::Prompt; ids.len()];
    Ok(TokenSequence { ids, roles })
}

/// Pad a prompt to a fixed length by inserting PAD tokens directly before
/// its final token, so the closing template word keeps its position right
/// before the target and queries start at a fixed offset.
pub fn pad_prompt(
    prompt: &TokenSequence,
    len: usize,
    vocab: &Vocabulary,
) -> Result<TokenSequence, GrammarError> {
    if prompt.len() > len {
        return Err(GrammarError::PromptTooLong {
            len: prompt.len(),
            max: len,
        });
    }
    let mut ids = prompt.ids.clone();
    let mut roles = prompt.roles.clone();
    let insert_at = ids.len().saturating_sub(1);
    while ids.len() < len {
        ids.insert(insert_at, vocab.pad());
        roles.insert(insert_at, Role::Pad);
    }
    Ok(TokenSequence { ids, roles })
}

/// Decode the answer words of a generated sequence: text-word tokens
/// after the depth block (or after SEG when no span parsed), stopping at
/// EOS.
pub fn answer_words(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    let start = match parse_depth_span(ids, vocab) {
        Some(span) => span.e + 1,
        None => 0,
    };
    let mut out = Vec::new();
    for &id in ids.iter().skip(start) {
        if id == vocab.eos() {
            break;
        }
        if vocab.is_word(id) {
            out.push(vocab.surface(id));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn demo_vocab() -> Vocabulary {
        build_vocabulary(8, &["question", "answer", "the", "red", "disc", "is", "nearest"])
            .unwrap()
    }

    #[test]
    fn id_layout_is_dense_and_ordered() {
        let v = demo_vocab();
        // 3 structural + 7 words + SEG + DSTART + 8 codes + DEND = 21
        assert_eq!(v.size(), 21);
        assert_eq!(v.bos(), 0);
        assert_eq!(v.eos(), 1);
        assert_eq!(v.pad(), 2);
        assert_eq!(v.word_id("question"), Some(3));
        assert_eq!(v.seg(), 10);
        assert_eq!(v.dstart(), 11);
        assert_eq!(v.code(0).unwrap(), 12);
        assert_eq!(v.code(7).unwrap(), 19);
        assert_eq!(v.dend(), 20);
        // every id in [0, V) has a kind
        for id in 0..v.size() as u32 {
            assert_ne!(v.kind(id), "invalid", "id {id} unassigned");
        }
    }

    #[test]
    fn spec_sizing_example_holds() {
        // 64 words with K = 128 gives V = 198 and 130 depth-related ids.
        let words: Vec<String> = (0..64).map(|i| alloc::format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
        let v = build_vocabulary(128, &refs).unwrap();
        assert_eq!(v.size(), 198);
        let depth_related = v.code_ids().len() + 2;
        assert_eq!(depth_related, 130);
        assert_eq!(v.code_ids().start, v.dstart() + 1);
        assert_eq!(v.code_ids().end, v.dend());

        let v1 = build_vocabulary(1, &["x"]).unwrap();
        assert_eq!(v1.code_ids().len() + 2, 3);
    }

    #[test]
    fn duplicate_word_is_rejected() {
        let err = build_vocabulary(4, &["a", "b", "a"]).unwrap_err();
        assert_eq!(err, GrammarError::DuplicateWord { word: "a".into() });
    }

    #[test]
    fn rebuild_gives_identical_map() {
        let a = build_vocabulary(16, &["x", "y", "z"]).unwrap();
        let b = build_vocabulary(16, &["x", "y", "z"]).unwrap();
        assert_eq!(a, b);
        for id in 0..a.size() as u32 {
            assert_eq!(a.surface(id), b.surface(id));
        }
    }

    #[test]
    fn assemble_target_has_spec_length_and_roles() {
        let words: Vec<String> = (0..64).map(|i| alloc::format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
        let v = build_vocabulary(128, &refs).unwrap();
        let codes: Vec<usize> = (0..100).map(|i| i % 128).collect();
        let t = assemble_target(&codes, &["w0", "w1", "w2", "w3", "w4", "w5"], &v).unwrap();
        assert_eq!(t.len(), 110);
        assert_eq!(t.roles[0], Role::Seg);
        assert_eq!(t.roles[1], Role::DepthMarker);
        assert_eq!(t.roles[2], Role::DepthCode);
        assert_eq!(t.roles[101], Role::DepthCode);
        assert_eq!(t.roles[102], Role::DepthMarker);
        assert_eq!(t.roles[103], Role::Text);
        assert_eq!(t.roles[109], Role::Text);
        assert_eq!(t.ids[109], v.eos());

        let span = parse_depth_span(&t.ids, &v).unwrap();
        assert_eq!((span.s, span.e, span.l), (1, 102, 100));
    }

    #[test]
    fn empty_answer_target_closes_directly_with_eos() {
        let v = demo_vocab();
        let t = assemble_target(&[0, 1], &[], &v).unwrap();
        assert_eq!(t.ids[t.len() - 2], v.dend());
        assert_eq!(t.ids[t.len() - 1], v.eos());
    }

    #[test]
    fn parse_handles_order_and_absence() {
        let v = demo_vocab();
        let w = v.word_id("red").unwrap();
        // [BOS, DSTART, CODE_7, CODE_0, DEND, w] per the spec example
        let ids = vec![v.bos(), v.dstart(), v.code(7).unwrap(), v.code(0).unwrap(), v.dend(), w];
        let span = parse_depth_span(&ids, &v).unwrap();
        assert_eq!((span.s, span.e, span.l), (1, 4, 2));

        assert_eq!(parse_depth_span(&[v.bos(), w], &v), None);
        // end before start with no later DEND
        assert_eq!(parse_depth_span(&[v.dend(), v.dstart()], &v), None);
        // a later DEND after the first DSTART is picked up
        let ids = vec![v.dend(), v.dstart(), v.code(1).unwrap(), v.dend()];
        let span = parse_depth_span(&ids, &v).unwrap();
        assert_eq!((span.s, span.e, span.l), (1, 3, 1));
        // first-span rule with duplicate markers
        let ids = vec![v.dstart(), v.dend(), v.dstart(), v.dend()];
        let span = parse_depth_span(&ids, &v).unwrap();
        assert_eq!((span.s, span.e), (0, 1));
    }

    #[test]
    fn parse_never_accepts_adjacent_inverted_markers() {
        let v = demo_vocab();
        // DSTART immediately preceded by DEND still parses forward
        let span = parse_depth_span(&[v.dstart(), v.dend()], &v).unwrap();
        assert_eq!(span.l, 0);
    }

    #[test]
    fn prompt_is_templated_and_all_prompt_role() {
        let v = demo_vocab();
        let p = build_prompt(&["red", "disc"], &v).unwrap();
        assert_eq!(p.ids[0], v.bos());
        assert_eq!(p.ids[1], v.word_id("question").unwrap());
        assert_eq!(p.ids[4], v.word_id("answer").unwrap());
        assert!(p.roles.iter().all(|&r| r == Role::Prompt));

        let q1 = build_prompt(&["red", "disc"], &v).unwrap();
        let q2 = build_prompt(&["red", "nearest"], &v).unwrap();
        assert_eq!(q1.len(), q2.len());
        let diffs: Vec<usize> = (0..q1.len()).filter(|&i| q1.ids[i] != q2.ids[i]).collect();
        assert_eq!(diffs, vec![3]);

        let err = build_prompt(&["violet"], &v).unwrap_err();
        assert_eq!(err, GrammarError::UnknownWord { word: "violet".into() });
    }

    #[test]
    fn pad_prompt_keeps_ends_fixed() {
        let v = demo_vocab();
        let p = build_prompt(&["red"], &v).unwrap();
        let padded = pad_prompt(&p, 8, &v).unwrap();
        assert_eq!(padded.len(), 8);
        assert_eq!(padded.ids[0], v.bos());
        assert_eq!(*padded.ids.last().unwrap(), v.word_id("answer").unwrap());
        assert_eq!(padded.roles[4], Role::Pad);
        assert_eq!(
            pad_prompt(&p, 2, &v).unwrap_err(),
            GrammarError::PromptTooLong { len: 4, max: 2 }
        );
    }

    #[test]
    fn answer_words_reads_text_after_the_span() {
        let v = demo_vocab();
        let t = assemble_target(&[0, 1], &["the", "red", "disc"], &v).unwrap();
        assert_eq!(answer_words(&t.ids, &v), vec!["the", "red", "disc"]);
        // no span: all words before EOS
        let ids = vec![v.word_id("is").unwrap(), v.eos(), v.word_id("red").unwrap()];
        assert_eq!(answer_words(&ids, &v), vec!["is"]);
    }

    #[test]
    fn parse_is_total_on_arbitrary_ids() {
        // quick randomized sanity pass; the heavy fuzz lives in the
        // acceptance suite
        let v = demo_vocab();
        let mut rng = crate::rng::Rng::from_seed(99);
        for _ in 0..2000 {
            let len = rng.below(12);
            let ids: Vec<u32> = (0..len).map(|_| rng.below(30) as u32).collect();
            if let Some(span) = parse_depth_span(&ids, &v) {
                assert_eq!(ids[span.s], v.dstart());
                assert_eq!(ids[span.e], v.dend());
                assert!(span.e > span.s);
                assert_eq!(span.l, span.e - span.s - 1);
            }
        }
    }
}
