//! Citation-grounded answer generation.
//!
//! A draft is split into sentences, each sentence's `[n]` markers are resolved
//! against the snippets shown in that round, and every sentence is scored by
//! the verifier against the snippets it cites. Drafting repeats, with the
//! failing sentences fed back, until every sentence is supported or
//! `max_rounds` drafts have been produced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::providers::{Generator, ProviderError, Verifier};
use crate::retrieval::Snippet;

/// Literal that replaces unsupported sentences in strict mode.
pub const ABSTENTION: &str = "N/A";

/// Words that end in a period without ending a sentence, lowercased, without
/// the final period.
pub const ABBREVIATIONS: &[&str] = &[
    "al", "approx", "art", "cf", "co", "corp", "dept", "dr", "e.g", "eq", "eqs", "etc", "fig",
    "figs", "i.e", "inc", "jr", "ltd", "mr", "mrs", "ms", "no", "nos", "pp", "prof", "sec", "sr",
    "st", "u.s", "vol", "vs",
];

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error("invalid grounding config: {0}")]
    Config(String),
    #[error("drafting failed in round {round}: {source}")]
    Draft {
        round: usize,
        #[source]
        source: ProviderError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingMode {
    #[default]
    Standard,
    /// Every sentence needs a verified citation; the rest become [`ABSTENTION`].
    Strict,
}

impl std::str::FromStr for GroundingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "strict" => Ok(Self::Strict),
            other => Err(format!("unknown grounding mode `{other}` (expected standard or strict)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    pub max_rounds: usize,
    pub support_threshold: f64,
    pub mode: GroundingMode,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            support_threshold: 0.5,
            mode: GroundingMode::Standard,
        }
    }
}

impl GroundingConfig {
    pub fn strict() -> Self {
        Self {
            mode: GroundingMode::Strict,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GroundingError> {
        if self.max_rounds == 0 {
            return Err(GroundingError::Config("max_rounds must be at least 1".into()));
        }
        if !(self.support_threshold > 0.0 && self.support_threshold <= 1.0) {
            return Err(GroundingError::Config(format!(
                "support_threshold must lie in (0, 1], got {}",
                self.support_threshold
            )));
        }
        Ok(())
    }
}

/// A sentence located in some text by half-open character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | '\u{201d}' | '\u{2019}')
}

/// Length of a `[digits]` marker starting at `i`, if there is one.
fn marker_len(chars: &[char], i: usize) -> Option<usize> {
    if chars.get(i) != Some(&'[') {
        return None;
    }
    let digits = chars[i + 1..].iter().take_while(|c| c.is_ascii_digit()).count();
    (digits > 0 && chars.get(i + 1 + digits) == Some(&']')).then_some(digits + 2)
}

fn is_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut s = dot;
    while s > 0 && (chars[s - 1].is_alphanumeric() || chars[s - 1] == '.') {
        s -= 1;
    }
    let word: String = chars[s..dot].iter().collect::<String>().to_lowercase();
    let word = word.trim_matches('.');
    !word.is_empty() && ABBREVIATIONS.contains(&word)
}

/// Splits after `.`, `!` or `?` when whitespace and then an uppercase letter
/// or digit follow, unless the period closes a listed abbreviation. Closing
/// quotes and `[n]` markers right after the punctuation stay with the
/// sentence. Spans are trimmed and cover every non-whitespace character.
pub fn segment_sentences(text: &str) -> Vec<SentenceSpan> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;

    let push = |out: &mut Vec<SentenceSpan>, s: usize, e: usize| {
        let mut e = e;
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if e > s {
            out.push(SentenceSpan {
                text: chars[s..e].iter().collect(),
                start_char: s,
                end_char: e,
            });
        }
    };

    while i < n {
        let c = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(i);
        }
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < n && (is_terminal(chars[j]) || is_closer(chars[j])) {
            j += 1;
        }
        loop {
            let ws = chars[j..].iter().take_while(|c| c.is_whitespace() && **c != '\n').count();
            match marker_len(&chars, j + ws) {
                Some(len) => j += ws + len,
                None => break,
            }
        }
        while j < n && is_terminal(chars[j]) {
            j += 1;
        }
        let ws = chars[j..].iter().take_while(|c| c.is_whitespace()).count();
        let next = chars.get(j + ws).copied();
        let boundary = match next {
            None => true,
            Some(nc) => ws > 0 && (nc.is_uppercase() || nc.is_ascii_digit()),
        };
        if boundary && !(c == '.' && is_abbreviation(&chars, i)) {
            push(&mut out, start.take().unwrap_or(i), j);
            i = j;
        } else {
            i += 1;
        }
    }
    if let Some(s) = start {
        push(&mut out, s, n);
    }
    out
}

/// `[n]` marker numbers in order of appearance.
pub fn citation_markers(text: &str) -> Vec<usize> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if let Some(len) = marker_len(&chars, i) {
            let num: String = chars[i + 1..i + len - 1].iter().collect();
            if let Ok(n) = num.parse() {
                out.push(n);
            }
            i += len;
        } else {
            i += 1;
        }
    }
    out
}

/// Removes `[n]` markers and the blank before each one.
pub fn strip_markers(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        if let Some(len) = marker_len(&chars, i) {
            while out.ends_with(' ') {
                out.pop();
            }
            i += len;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out.trim().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Supported,
    Unsupported,
    Abstained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
    /// Resolved chunk ids. For a supported sentence only the cited chunks that
    /// reached the threshold remain.
    pub citations: Vec<String>,
    /// Verifier score per entry of `citations`.
    pub citation_scores: Vec<f64>,
    pub verdict: Verdict,
    /// Best verifier score seen for this sentence, if any was computed.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draft {
    pub text: String,
    pub sentences: Vec<Sentence>,
    pub generation_round: usize,
}

impl Draft {
    pub fn support_rate(&self) -> f64 {
        support_rate(&self.sentences)
    }

    pub fn unsupported(&self) -> impl Iterator<Item = &Sentence> {
        self.sentences
            .iter()
            .filter(|s| s.verdict == Verdict::Unsupported)
    }

    fn settled(&self) -> bool {
        !self.sentences.is_empty() && self.unsupported().next().is_none()
    }
}

fn support_rate(sentences: &[Sentence]) -> f64 {
    if sentences.is_empty() {
        return 0.0;
    }
    let ok = sentences
        .iter()
        .filter(|s| s.verdict == Verdict::Supported)
        .count();
    ok as f64 / sentences.len() as f64
}

/// One verified (sentence span, chunk) link of the final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationTrace {
    pub sentence: usize,
    pub start_char: usize,
    pub end_char: usize,
    pub chunk_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub text: String,
    pub sentences: Vec<Sentence>,
    pub mode: GroundingMode,
    pub rounds_used: usize,
    pub support_rate: f64,
    /// Number of sentences replaced by [`ABSTENTION`] or abstained by the model.
    pub abstentions: usize,
    pub citations: Vec<CitationTrace>,
}

impl GroundedAnswer {
    /// The answer given when there is nothing to ground on.
    pub fn abstained(mode: GroundingMode) -> Self {
        Self {
            text: ABSTENTION.into(),
            sentences: vec![Sentence {
                text: ABSTENTION.into(),
                start_char: 0,
                end_char: ABSTENTION.chars().count(),
                citations: Vec::new(),
                citation_scores: Vec::new(),
                verdict: Verdict::Abstained,
                score: None,
            }],
            mode,
            rounds_used: 0,
            support_rate: 0.0,
            abstentions: 1,
            citations: Vec::new(),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drafting prompt: instructions, question, numbered snippets and, after the
/// first round, the sentences that failed verification.
pub fn build_draft_prompt(
    query: &str,
    snippets: &[Snippet],
    round: usize,
    prior_failures: &[String],
) -> String {
    let mut p = String::new();
    p.push_str("Answer the question using only the numbered snippets.\n");
    p.push_str(
        "Cite each sentence with the number of its supporting snippet in square brackets \
         before the final punctuation, for example: The fee is waived [2].\n",
    );
    p.push_str("If the snippets do not answer the question, reply N/A.\n\n");
    p.push_str(&format!("Question: {}\n\nSnippets:\n", one_line(query)));
    for (i, s) in snippets.iter().enumerate() {
        p.push_str(&format!("[{}] {}\n", i + 1, one_line(&s.text)));
    }
    if round > 1 && !prior_failures.is_empty() {
        p.push_str("\nRevise unsupported claims (the previous draft could not verify these):\n");
        for f in prior_failures {
            p.push_str(&format!("- {}\n", one_line(f)));
        }
    }
    p
}

/// Splits `text` into sentences and resolves their markers against `snippets`.
/// Markers outside `1..=snippets.len()` resolve to nothing.
pub fn parse_draft(text: &str, snippets: &[Snippet], round: usize) -> Draft {
    let sentences = segment_sentences(text)
        .into_iter()
        .map(|span| {
            let mut citations: Vec<String> = Vec::new();
            for n in citation_markers(&span.text) {
                if let Some(s) = n.checked_sub(1).and_then(|i| snippets.get(i)) {
                    if !citations.contains(&s.chunk_id) {
                        citations.push(s.chunk_id.clone());
                    }
                }
            }
            let verdict = if strip_markers(&span.text) == ABSTENTION {
                Verdict::Abstained
            } else {
                Verdict::Unsupported
            };
            Sentence {
                text: span.text,
                start_char: span.start_char,
                end_char: span.end_char,
                citations,
                citation_scores: Vec::new(),
                verdict,
                score: None,
            }
        })
        .collect();
    Draft {
        text: text.to_string(),
        sentences,
        generation_round: round,
    }
}

pub fn draft_answer(
    query: &str,
    snippets: &[Snippet],
    llm: &dyn Generator,
    round: usize,
    prior_failures: &[String],
) -> Result<Draft, ProviderError> {
    let prompt = build_draft_prompt(query, snippets, round, prior_failures);
    let text = llm.generate(&prompt)?;
    Ok(parse_draft(text.trim(), snippets, round))
}

/// Verdict plus the scores behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub verdict: Verdict,
    /// `(chunk_id, score)` for every snippet that was scored.
    pub scores: Vec<(String, f64)>,
    pub best: Option<f64>,
}

/// Supported iff the best verifier score over the cited snippets reaches
/// `threshold`. Uncited sentences are scored against every snippet in
/// standard mode and are unsupported in strict mode. Provider errors yield
/// unsupported.
pub fn verify_sentence(
    sentence: &Sentence,
    snippets: &[Snippet],
    verifier: &dyn Verifier,
    threshold: f64,
    mode: GroundingMode,
) -> Verification {
    let unsupported = |scores| Verification {
        verdict: Verdict::Unsupported,
        scores,
        best: None,
    };
    if sentence.verdict == Verdict::Abstained {
        return Verification {
            verdict: Verdict::Abstained,
            scores: Vec::new(),
            best: None,
        };
    }
    let pool: Vec<&Snippet> = if sentence.citations.is_empty() {
        match mode {
            GroundingMode::Strict => return unsupported(Vec::new()),
            GroundingMode::Standard => snippets.iter().collect(),
        }
    } else {
        sentence
            .citations
            .iter()
            .filter_map(|id| snippets.iter().find(|s| &s.chunk_id == id))
            .collect()
    };
    if pool.is_empty() {
        return unsupported(Vec::new());
    }
    let claim = strip_markers(&sentence.text);
    let passages: Vec<&str> = pool.iter().map(|s| s.text.as_str()).collect();
    let scores = match verifier.verify(&claim, &passages) {
        Ok(s) if s.len() == pool.len() && s.iter().all(|x| x.is_finite()) => s,
        Ok(_) => {
            log::warn!("verifier returned a malformed score list; treating sentence as unsupported");
            return unsupported(Vec::new());
        }
        Err(e) => {
            log::warn!("verifier failed ({e}); treating sentence as unsupported");
            return unsupported(Vec::new());
        }
    };
    let scored: Vec<(String, f64)> = pool
        .iter()
        .zip(&scores)
        .map(|(s, &x)| (s.chunk_id.clone(), x))
        .collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Verification {
        verdict: if best >= threshold {
            Verdict::Supported
        } else {
            Verdict::Unsupported
        },
        scores: scored,
        best: Some(best),
    }
}

fn verify_draft(
    draft: &mut Draft,
    snippets: &[Snippet],
    verifier: &dyn Verifier,
    config: &GroundingConfig,
) {
    let results: Vec<Verification> = draft
        .sentences
        .par_iter()
        .map(|s| verify_sentence(s, snippets, verifier, config.support_threshold, config.mode))
        .collect();
    for (s, v) in draft.sentences.iter_mut().zip(results) {
        s.verdict = v.verdict;
        s.score = v.best;
        if v.verdict == Verdict::Supported {
            // Only passing links are kept; an uncited sentence is attributed
            // to its best-scoring snippet.
            let mut passing: Vec<(String, f64)> = v
                .scores
                .into_iter()
                .filter(|(_, x)| *x >= config.support_threshold)
                .collect();
            if s.citations.is_empty() {
                passing.sort_by(|a, b| b.1.total_cmp(&a.1));
                passing.truncate(1);
            }
            s.citations = passing.iter().map(|(id, _)| id.clone()).collect();
            s.citation_scores = passing.iter().map(|(_, x)| *x).collect();
        } else {
            s.citation_scores = s
                .citations
                .iter()
                .map(|id| {
                    v.scores
                        .iter()
                        .find(|(c, _)| c == id)
                        .map_or(0.0, |(_, x)| *x)
                })
                .collect();
        }
    }
}

/// Rebuilds the text from sentence texts, keeping the original separators,
/// and recomputes the spans against the new text.
fn reassemble(original: &str, sentences: &mut [Sentence], replacements: &[Option<String>]) -> String {
    let chars: Vec<char> = original.chars().collect();
    let mut out = String::new();
    let mut cursor = 0;
    let mut pos = 0;
    for (s, rep) in sentences.iter_mut().zip(replacements) {
        let gap: String = chars[cursor..s.start_char].iter().collect();
        pos += gap.chars().count();
        out.push_str(&gap);
        let body = rep.clone().unwrap_or_else(|| s.text.clone());
        let len = body.chars().count();
        out.push_str(&body);
        cursor = s.end_char;
        s.text = body;
        s.start_char = pos;
        s.end_char = pos + len;
        pos += len;
    }
    out
}

/// Draft, verify, and redraft with feedback until every sentence is supported
/// or `max_rounds` drafts exist. With no snippets the answer is an abstention
/// and no provider is called.
pub fn grounded_generate(
    query: &str,
    snippets: &[Snippet],
    config: &GroundingConfig,
    llm: &dyn Generator,
    verifier: &dyn Verifier,
) -> Result<GroundedAnswer, GroundingError> {
    config.validate()?;
    if snippets.is_empty() {
        return Ok(GroundedAnswer::abstained(config.mode));
    }

    let mut best: Option<Draft> = None;
    let mut failures: Vec<String> = Vec::new();
    let mut rounds = 0;
    for round in 1..=config.max_rounds {
        rounds = round;
        let mut draft = draft_answer(query, snippets, llm, round, &failures)
            .map_err(|source| GroundingError::Draft { round, source })?;
        verify_draft(&mut draft, snippets, verifier, config);
        failures = draft.unsupported().map(|s| strip_markers(&s.text)).collect();
        let settled = draft.settled();
        let better = best
            .as_ref()
            .is_none_or(|b| draft.support_rate() > b.support_rate());
        if better {
            best = Some(draft);
        }
        if settled {
            break;
        }
    }
    let mut draft = best.expect("max_rounds >= 1 produces a draft");

    let replacements: Vec<Option<String>> = draft
        .sentences
        .iter()
        .map(|s| {
            (config.mode == GroundingMode::Strict && s.verdict == Verdict::Unsupported)
                .then(|| ABSTENTION.to_string())
        })
        .collect();
    for (s, r) in draft.sentences.iter_mut().zip(&replacements) {
        if r.is_some() {
            s.verdict = Verdict::Abstained;
            s.citations.clear();
            s.citation_scores.clear();
        }
    }
    let text = reassemble(&draft.text, &mut draft.sentences, &replacements);

    let citations = draft
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.verdict == Verdict::Supported)
        .flat_map(|(i, s)| {
            s.citations
                .iter()
                .zip(&s.citation_scores)
                .map(move |(id, &score)| CitationTrace {
                    sentence: i,
                    start_char: s.start_char,
                    end_char: s.end_char,
                    chunk_id: id.clone(),
                    score,
                })
        })
        .collect();
    let abstentions = draft
        .sentences
        .iter()
        .filter(|s| s.verdict == Verdict::Abstained)
        .count();
    Ok(GroundedAnswer {
        text,
        support_rate: support_rate(&draft.sentences),
        sentences: draft.sentences,
        mode: config.mode,
        rounds_used: rounds,
        abstentions,
        citations,
    })
}
