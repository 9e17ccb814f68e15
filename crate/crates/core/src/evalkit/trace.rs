//! Character-span generation metrics.
//!
//! With `|x|` the number of characters in the union of span set `x`:
//! completeness = |relevant ∩ utilized| / |relevant|,
//! utilization = |utilized| / |context|,
//! context relevance = |relevant| / |context|,
//! hallucination = |unsupported| / (|answer| - |abstained|).
//! A metric whose denominator is zero is undefined (`None`).

use serde::{Deserialize, Serialize};

use super::{EvalError, GoldAnnotation};
use crate::grounding::{GroundedAnswer, Verdict};
use crate::retrieval::Snippet;

pub type CharRange = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAnnotation {
    pub query_id: String,
    pub answer: String,
    /// The retrieved context the answer was generated from.
    pub context: String,
    #[serde(default)]
    pub supported_spans: Vec<CharRange>,
    #[serde(default)]
    pub unsupported_spans: Vec<CharRange>,
    /// Answer spans that are explicit abstentions; excluded from hallucination.
    #[serde(default)]
    pub abstained_spans: Vec<CharRange>,
    #[serde(default)]
    pub relevant_spans: Vec<CharRange>,
    #[serde(default)]
    pub utilized_spans: Vec<CharRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceScores {
    pub completeness: Option<f64>,
    pub utilization: Option<f64>,
    pub context_relevance: Option<f64>,
    pub hallucination: Option<f64>,
}

/// Sorted, disjoint, non-empty ranges covering the same characters.
fn normalize(spans: &[CharRange]) -> Vec<CharRange> {
    let mut v: Vec<CharRange> = spans.iter().copied().filter(|(s, e)| s < e).collect();
    v.sort_unstable();
    let mut out: Vec<CharRange> = Vec::with_capacity(v.len());
    for (s, e) in v {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn measure(spans: &[CharRange]) -> usize {
    normalize(spans).iter().map(|(s, e)| e - s).sum()
}

fn intersect(a: &[CharRange], b: &[CharRange]) -> Vec<CharRange> {
    let (a, b) = (normalize(a), normalize(b));
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let s = a[i].0.max(b[j].0);
        let e = a[i].1.min(b[j].1);
        if s < e {
            out.push((s, e));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl TraceAnnotation {
    /// Spans lie within their texts, and every alphanumeric answer character
    /// outside abstentions is labelled supported or unsupported.
    pub fn validate(&self) -> Result<(), EvalError> {
        let err = |message: String| EvalError::Trace {
            query_id: self.query_id.clone(),
            message,
        };
        let answer_len = self.answer.chars().count();
        let context_len = self.context.chars().count();
        let groups: [(&str, &[CharRange], usize); 5] = [
            ("supported", &self.supported_spans, answer_len),
            ("unsupported", &self.unsupported_spans, answer_len),
            ("abstained", &self.abstained_spans, answer_len),
            ("relevant", &self.relevant_spans, context_len),
            ("utilized", &self.utilized_spans, context_len),
        ];
        for (name, spans, len) in groups {
            if let Some((s, e)) = spans.iter().find(|(s, e)| s > e || *e > len) {
                return Err(err(format!("{name} span {s}..{e} is outside 0..{len}")));
            }
        }
        let labelled = normalize(
            &[&self.supported_spans[..], &self.unsupported_spans, &self.abstained_spans].concat(),
        );
        for (i, c) in self.answer.chars().enumerate() {
            if c.is_alphanumeric() && !labelled.iter().any(|(s, e)| *s <= i && i < *e) {
                return Err(err(format!("answer character {i} ({c:?}) is not labelled")));
            }
        }
        Ok(())
    }
}

pub fn trace_metrics(t: &TraceAnnotation) -> Result<TraceScores, EvalError> {
    t.validate()?;
    let context = t.context.chars().count();
    let relevant = measure(&t.relevant_spans);
    let utilized = measure(&t.utilized_spans);
    let both = measure(&intersect(&t.relevant_spans, &t.utilized_spans));
    let answer = t.answer.chars().count().saturating_sub(measure(&t.abstained_spans));
    let unsupported = measure(&intersect(
        &t.unsupported_spans,
        &[(0, t.answer.chars().count())],
    ));
    Ok(TraceScores {
        completeness: ratio(both, relevant),
        utilization: ratio(utilized, context),
        context_relevance: ratio(relevant, context),
        hallucination: ratio(unsupported, answer),
    })
}

/// Means over the defined values, and how many were undefined.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub queries: usize,
    pub completeness: Option<f64>,
    pub utilization: Option<f64>,
    pub context_relevance: Option<f64>,
    pub hallucination: Option<f64>,
    pub undefined: [usize; 4],
}

pub fn summarize_traces(scores: &[TraceScores]) -> TraceSummary {
    let pick: [fn(&TraceScores) -> Option<f64>; 4] = [
        |s| s.completeness,
        |s| s.utilization,
        |s| s.context_relevance,
        |s| s.hallucination,
    ];
    let mut means = [None; 4];
    let mut undefined = [0; 4];
    for (i, f) in pick.iter().enumerate() {
        let vals: Vec<f64> = scores.iter().filter_map(f).collect();
        undefined[i] = scores.len() - vals.len();
        if !vals.is_empty() {
            means[i] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    TraceSummary {
        queries: scores.len(),
        completeness: means[0],
        utilization: means[1],
        context_relevance: means[2],
        hallucination: means[3],
        undefined,
    }
}

const CONTEXT_SEPARATOR: &str = "\n\n";

/// Annotation of a grounded answer from its own verdicts.
///
/// The context is the snippets joined by blank lines. A snippet cited by a
/// supported sentence counts as utilized in full. Relevant context spans
/// come from `gold` evidence overlapping internal snippets; without gold
/// they are empty and completeness is undefined.
pub fn trace_from_grounded(
    query_id: &str,
    answer: &GroundedAnswer,
    snippets: &[Snippet],
    gold: Option<&GoldAnnotation>,
) -> TraceAnnotation {
    let mut context = String::new();
    let mut offsets = Vec::with_capacity(snippets.len());
    for (i, s) in snippets.iter().enumerate() {
        if i > 0 {
            context.push_str(CONTEXT_SEPARATOR);
        }
        let start = context.chars().count();
        context.push_str(&s.text);
        offsets.push(start);
    }

    let mut t = TraceAnnotation {
        query_id: query_id.to_string(),
        answer: answer.text.clone(),
        context,
        supported_spans: Vec::new(),
        unsupported_spans: Vec::new(),
        abstained_spans: Vec::new(),
        relevant_spans: Vec::new(),
        utilized_spans: Vec::new(),
    };
    for s in &answer.sentences {
        let span = (s.start_char, s.end_char);
        match s.verdict {
            Verdict::Supported => {
                t.supported_spans.push(span);
                for id in &s.citations {
                    for (sn, &off) in snippets.iter().zip(&offsets) {
                        if &sn.chunk_id == id {
                            t.utilized_spans.push((off, off + sn.text.chars().count()));
                        }
                    }
                }
            }
            Verdict::Unsupported => t.unsupported_spans.push(span),
            Verdict::Abstained => t.abstained_spans.push(span),
        }
    }
    if let Some(g) = gold {
        for (sn, &off) in snippets.iter().zip(&offsets) {
            let len = sn.text.chars().count();
            for ev in g.evidence_spans.iter().filter(|e| e.doc_id == sn.doc_id) {
                let s = ev.start_char.max(sn.start_char);
                let e = ev.end_char.min(sn.start_char + len);
                if s < e {
                    t.relevant_spans.push((off + s - sn.start_char, off + e - sn.start_char));
                }
            }
        }
    }
    t.supported_spans = normalize(&t.supported_spans);
    t.unsupported_spans = normalize(&t.unsupported_spans);
    t.abstained_spans = normalize(&t.abstained_spans);
    t.relevant_spans = normalize(&t.relevant_spans);
    t.utilized_spans = normalize(&t.utilized_spans);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(query_id: &str, answer_len: usize, context_len: usize) -> TraceAnnotation {
        TraceAnnotation {
            query_id: query_id.into(),
            answer: "a".repeat(answer_len),
            context: "c".repeat(context_len),
            supported_spans: vec![(0, answer_len)],
            unsupported_spans: vec![],
            abstained_spans: vec![],
            relevant_spans: vec![],
            utilized_spans: vec![],
        }
    }

    #[test]
    fn context_example() {
        let mut t = blank("ctx", 10, 1000);
        t.relevant_spans = vec![(100, 500)];
        t.utilized_spans = vec![(150, 300), (300, 450)];
        let m = trace_metrics(&t).unwrap();
        assert_eq!(m.completeness, Some(0.75));
        assert_eq!(m.utilization, Some(0.3));
        assert_eq!(m.context_relevance, Some(0.4));
        assert_eq!(m.hallucination, Some(0.0));
    }

    #[test]
    fn hallucination_example() {
        let mut t = blank("h", 200, 10);
        t.supported_spans = vec![(0, 150)];
        t.unsupported_spans = vec![(150, 200)];
        assert_eq!(trace_metrics(&t).unwrap().hallucination, Some(0.25));
    }

    #[test]
    fn zero_denominators_are_undefined() {
        let t = blank("z", 0, 0);
        let m = trace_metrics(&t).unwrap();
        assert_eq!(m, TraceScores { completeness: None, utilization: None, context_relevance: None, hallucination: None });
        let s = summarize_traces(&[m, trace_metrics(&blank("y", 4, 4)).unwrap()]);
        assert_eq!(s.undefined, [2, 1, 1, 1]);
        assert_eq!(s.hallucination, Some(0.0));
    }

    #[test]
    fn unlabelled_answer_text_is_rejected() {
        let mut t = blank("u", 10, 10);
        t.supported_spans = vec![(0, 5)];
        assert!(trace_metrics(&t).is_err());
        t.supported_spans = vec![(0, 11)];
        assert!(trace_metrics(&t).is_err());
    }

    #[test]
    fn interval_helpers() {
        assert_eq!(normalize(&[(5, 9), (0, 3), (2, 6), (9, 9)]), [(0, 9)]);
        assert_eq!(intersect(&[(0, 10)], &[(2, 4), (8, 12)]), [(2, 4), (8, 10)]);
        assert_eq!(measure(&[(0, 4), (2, 6)]), 6);
    }
}
