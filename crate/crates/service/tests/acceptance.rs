//! Acceptance run: one PASS/FAIL line per primary criterion.
//!
//! Every check computes its expected values independently of the code under
//! test (brute-force scorers, exhaustive scans, hand counts, a separate SSE
//! frame parser). The process exits non-zero if any criterion fails.

// `!(x >= bound)` is deliberate: NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use hybridqa::config::AppConfig;
use hybridqa::evalkit::{
    ablation_report, evaluate, trace_from_grounded, trace_metrics, ChunkSpans, EvidenceSpan, GoldAnnotation,
    PolicyRun, RetrievalRun, TraceAnnotation, DEFAULT_KS,
};
use hybridqa::grounding::{grounded_generate, GroundingConfig, Verdict, ABSTENTION};
use hybridqa::ingest::{chunk_document, ChunkPolicy, ChunkStore, Document};
use hybridqa::orchestrator::plugins::EchoPlugin;
use hybridqa::orchestrator::DataSourceConfig;
use hybridqa::providers::mock::deterministic_embed;
use hybridqa::providers::{AdversarialLlm, Generator, HashEmbedder, LexicalReranker, LexicalVerifier, ScriptedLlm, Unavailable};
use hybridqa::retrieval::{build_indexes, Hnsw, HnswParams, RetrievalConfig, Snippet, SnippetOrigin, SparseIndex, Bm25Params};
use hybridqa::t2s::fixture::{fixture_executor, fixture_now, fixture_schema};
use hybridqa::t2s::{
    run_with_retry, Dialect, FixedClock, RecordingExecutor, SchemaContext, SqliteExecutor, T2sConfig, T2sContext,
    T2sFinal, T2sResult,
};
use hybridqa_service::http::{router, AppState};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const VOCAB: &[&str] = &[
    "contract", "tenant", "lease", "notice", "payment", "deposit", "clause", "court", "privacy",
    "data", "consent", "policy", "term", "renewal", "breach", "damages", "party", "liability",
    "warranty", "audit", "record", "invoice", "shipping", "refund", "employee", "vacation",
];

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn funnel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let docs: Vec<Document> = (0..1000)
        .map(|i| {
            let n = rng.random_range(5..30);
            Document::new(format!("doc{i:04}"), words(&mut rng, n))
        })
        .collect();
    let store = ChunkStore::from_documents(&docs, &ChunkPolicy::new(64, 8).unwrap()).unwrap();
    ensure!(store.len() == 1000, "store has {} chunks", store.len());
    let started = Instant::now();
    let ix = build_indexes(&store, Arc::new(HashEmbedder::new(64)), &RetrievalConfig::default()).unwrap();
    let cands = ix.hybrid_retrieve("tenant deposit refund notice", 200);
    let distinct: HashSet<&str> = cands.iter().map(|c| c.chunk_id.as_str()).collect();
    ensure!(cands.len() == 200 && distinct.len() == 200, "hybrid_retrieve returned {}", cands.len());
    let sel = ix.rerank_and_select("tenant deposit refund notice", &cands, &LexicalReranker, 50);
    ensure!(sel.snippets.len() == 50, "rerank_and_select returned {}", sel.snippets.len());
    ensure!(sel.snippets.iter().all(|s| distinct.contains(s.chunk_id.as_str())), "snippet outside the candidates");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("1000 chunks -> 200 candidates -> 50 snippets in {} ms", elapsed.as_millis()))
}

fn numbered_words(n: usize) -> String {
    (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ")
}

fn check_chunking(len: usize, window: usize, overlap: usize) -> Result<Vec<usize>, String> {
    let doc = Document::new("d", numbered_words(len));
    let chunks = chunk_document(&doc, &ChunkPolicy::new(window, overlap).unwrap()).map_err(|e| e.to_string())?;
    let stride = window - overlap;
    let mut covered = vec![false; len];
    let mut rebuilt = String::new();
    for (i, c) in chunks.iter().enumerate() {
        ensure!(c.start_token == i * stride, "chunk {i} starts at {}", c.start_token);
        ensure!(c.end_token - c.start_token <= window, "chunk {i} is too long");
        covered[c.start_token..c.end_token].iter_mut().for_each(|x| *x = true);
        // The chunk's own tokens, in order.
        let own: Vec<String> = (c.start_token..c.end_token).map(|t| format!("t{t}")).collect();
        let got: Vec<&str> = c.text.split_whitespace().collect();
        ensure!(got == own, "chunk {i} text does not hold its tokens");
        match chunks.get(i + 1) {
            Some(next) => rebuilt.extend(c.text.chars().take(next.start_char - c.start_char)),
            None => rebuilt.push_str(&c.text),
        }
    }
    ensure!(covered.iter().all(|x| *x), "uncovered tokens for ({len}, {window}, {overlap})");
    ensure!(chunks.last().unwrap().end_token == len, "last chunk stops early");
    ensure!(rebuilt == doc.text, "round trip failed for ({len}, {window}, {overlap})");
    Ok(chunks.iter().map(|c| c.start_token).collect())
}

fn chunking() -> Outcome {
    let starts = check_chunking(2500, 1000, 150)?;
    ensure!(starts == [0, 850, 1700], "starts {starts:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let len = rng.random_range(1..2000);
        let window = rng.random_range(1..300);
        let overlap = rng.random_range(0..window);
        check_chunking(len, window, overlap)?;
    }
    Ok("starts {0, 850, 1700}; 1000 random triples cover and round-trip".into())
}

fn bm25_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let texts: Vec<String> = (0..n)
            .map(|_| {
                let len = rng.random_range(0..40);
                words(&mut rng, len)
            })
            .collect();
        let p = Bm25Params::default();
        let ix = SparseIndex::build(texts.iter().map(String::as_str), p);
        let docs: Vec<Vec<&str>> = texts.iter().map(|t| t.split_whitespace().collect()).collect();
        let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n as f64;
        for _ in 0..5 {
            let qn = rng.random_range(1..5);
            let query: Vec<String> = (0..qn).map(|_| VOCAB.choose(&mut rng).unwrap().to_string()).collect();
            let got = ix.score_all(&query);
            for (d, doc) in docs.iter().enumerate() {
                let mut expected = 0.0;
                for q in &query {
                    let tf = doc.iter().filter(|w| *w == q).count() as f64;
                    if tf > 0.0 {
                        let df = docs.iter().filter(|o| o.contains(&q.as_str())).count() as f64;
                        let idf = (1.0 + (n as f64 - df + 0.5) / (df + 0.5)).ln();
                        let norm = 1.0 - p.b + p.b * doc.len() as f64 / avgdl;
                        expected += idf * tf * (p.k1 + 1.0) / (tf + p.k1 * norm);
                    }
                }
                let rel = if expected == got[d] { 0.0 } else { (expected - got[d]).abs() / expected.abs().max(got[d].abs()) };
                worst = worst.max(rel);
                ensure!(rel <= 1e-9, "doc {d}: {} vs oracle {expected}", got[d]);
            }
        }
    }
    Ok(format!("100 corpora, max relative error {worst:.1e}"))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
}

fn hnsw_recall() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vectors: Vec<Vec<f32>> = (0..10_000)
        .map(|_| {
            let n = rng.random_range(8..40);
            deterministic_embed(&words(&mut rng, n), 64)
        })
        .collect();
    let mut g = Hnsw::new(64, HnswParams { ef_search: 100, ..HnswParams::default() });
    for v in &vectors {
        g.insert(v);
    }
    let (mut strict, mut tie_aware) = (0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(2..8);
        let q = deterministic_embed(&words(&mut rng, n), 64);
        let mut exact: Vec<(usize, f64)> = vectors.iter().enumerate().map(|(i, v)| (i, cosine(&q, v))).collect();
        exact.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let truth: HashSet<usize> = exact[..10].iter().map(|e| e.0).collect();
        let cutoff = exact[9].1;
        let found = g.search(&q, 10, 100);
        strict += found.iter().filter(|(id, _)| truth.contains(&(*id as usize))).count() as f64 / 10.0;
        tie_aware += found
            .iter()
            .filter(|(id, _)| truth.contains(&(*id as usize)) || cosine(&q, &vectors[*id as usize]) >= cutoff - 1e-6)
            .count() as f64
            / 10.0;
    }
    let (strict, tie_aware) = (strict / 100.0, tie_aware / 100.0);
    let elapsed = started.elapsed();
    ensure!(tie_aware >= 0.95, "recall@10 {tie_aware:.3} (id-exact {strict:.3})");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("recall@10 {tie_aware:.3} (id-exact {strict:.3}) in {:.1} s", elapsed.as_secs_f64()))
}

fn snippet(i: usize, text: &str) -> Snippet {
    Snippet {
        chunk_id: format!("chunk{i}"),
        doc_id: format!("doc{i}"),
        seq: 0,
        text: text.into(),
        start_char: 0,
        end_char: text.chars().count(),
        title: String::new(),
        source_uri: String::new(),
        rank: i + 1,
        fused_score: 0.0,
        rerank_score: None,
        origin: SnippetOrigin::Internal,
    }
}

fn grounding() -> Outcome {
    let snippets = vec![
        snippet(0, "Tenants must give sixty days notice before moving out. Deposits are returned within thirty days."),
        snippet(1, "The landlord repairs heating faults within two working days."),
    ];
    for max_rounds in 1..=5 {
        let llm = AdversarialLlm::default();
        let config = GroundingConfig { max_rounds, ..GroundingConfig::strict() };
        let a = grounded_generate("notice", &snippets, &config, &llm, &LexicalVerifier).unwrap();
        ensure!(llm.calls() == max_rounds, "max_rounds {max_rounds}: {} drafting calls", llm.calls());
        ensure!(a.sentences.iter().all(|s| s.verdict != Verdict::Unsupported), "unsupported sentence kept");
        ensure!(
            a.sentences.iter().filter(|s| s.verdict == Verdict::Abstained).all(|s| s.text == ABSTENTION),
            "abstention is not N/A"
        );
        ensure!(a.text.ends_with(" N/A") && !a.text.contains("Zebras"), "text {:?}", a.text);
        let h = trace_metrics(&trace_from_grounded("q", &a, &snippets, None)).unwrap().hallucination;
        ensure!(h == Some(0.0), "hallucination {h:?}");
    }
    let llm = ScriptedLlm::constant("Deposits are returned within thirty days [1]. Pets are banned [2].");
    let a = grounded_generate("q", &snippets, &GroundingConfig::strict(), &llm, &LexicalVerifier).unwrap();
    ensure!(a.text == "Deposits are returned within thirty days [1]. N/A", "text {:?}", a.text);
    Ok("max_rounds 1..=5 drafting calls exact; strict hallucination 0.0; unsupported -> N/A".into())
}

struct Fixture {
    exec: RecordingExecutor<SqliteExecutor>,
    schema: SchemaContext,
    clock: FixedClock,
}

impl Fixture {
    fn new() -> Self {
        let exec = RecordingExecutor::new(fixture_executor().unwrap());
        let schema = fixture_schema(exec.inner(), Dialect::Generic).unwrap();
        Self { exec, schema, clock: FixedClock(fixture_now()) }
    }

    fn run(&self, q: &str, llm: &dyn Generator, config: &T2sConfig) -> T2sResult {
        let ctx = T2sContext { schema: &self.schema, generator: llm, executor: &self.exec, clock: &self.clock };
        run_with_retry(q, &[], &ctx, config)
    }
}

fn fenced(sql: &str) -> String {
    format!("```sql\n{sql}\n```")
}

fn col(r: &T2sResult, name: &str) -> Vec<Value> {
    let t = r.table.as_ref().unwrap();
    let i = t.column_index(name).unwrap();
    t.rows.iter().map(|row| row[i].clone()).collect()
}

fn t2s_scenarios() -> Outcome {
    let cfg = T2sConfig::default();

    let f = Fixture::new();
    let llm = ScriptedLlm::new([
        fenced("SELECT order_id FROM orders WHERE status = 'pending' ORDER BY order_id"),
        fenced("SELECT order_id FROM orders WHERE status = 'open' ORDER BY order_id"),
    ]);
    let r = f.run("which orders are pending?", &llm, &cfg);
    ensure!(r.final_state == T2sFinal::Answered, "introspection: {:?}", r.final_state);
    ensure!(llm.prompts()[1].contains("orders.status ∈ {closed, open, shipped}"), "no introspection hint");
    ensure!(col(&r, "order_id") == [104, 106, 107, 109, 110].map(Value::from), "introspection rows");

    let llm = ScriptedLlm::constant(fenced("SELECT shipment_id, distance FROM shipments ORDER BY shipment_id"));
    let r = f.run("What is the distance in miles of each shipment?", &llm, &cfg);
    ensure!(r.attempts.last().unwrap().sql_text.contains("distance/1609.34"), "miles SQL {:?}", r.attempts);
    ensure!((col(&r, "distance_miles")[0].as_f64().unwrap() - 463000.0 / 1609.34).abs() < 1e-9, "miles value");

    let llm = ScriptedLlm::constant(fenced("SELECT COUNT(*) AS n FROM tracks WHERE genre = 'hip-hop'"));
    let r = f.run("how many hip-hop tracks are there", &llm, &cfg);
    ensure!(col(&r, "n") == [json!(4)], "hip-hop count {:?}", r.table);

    let llm = ScriptedLlm::constant(fenced("SELECT order_id FROM orders ORDER BY order_id"));
    let r = f.run("orders in the last 3 months", &llm, &cfg);
    ensure!(col(&r, "order_id") == [104, 105, 106, 107, 108].map(Value::from), "date window rows");
    ensure!(r.warnings.iter().any(|w| w.contains("3 row(s)")), "no anomaly warning: {:?}", r.warnings);

    let llm = ScriptedLlm::constant(format!(
        "{}\n{}",
        fenced(
            "SELECT al.title AS album, ROUND(SUM(il.unit_price * il.quantity), 2) AS revenue FROM invoice_lines il \
             JOIN tracks t ON t.track_id = il.track_id JOIN albums al ON al.album_id = t.album_id \
             GROUP BY al.title ORDER BY al.title"
        ),
        fenced("SELECT al.title AS album, ar.name AS artist FROM albums al JOIN artists ar ON ar.artist_id = al.artist_id"),
    ));
    let r = f.run("revenue per album and its artist", &llm, &cfg);
    let t = r.table.as_ref().ok_or("two-step: no table")?;
    ensure!(t.columns == ["album", "revenue", "artist"], "merged columns {:?}", t.columns);
    ensure!(t.rows[0] == [json!("City Lights"), json!(11.88), json!("Northbound Crew")], "merged row {:?}", t.rows[0]);

    for sql in ["DROP TABLE orders", "UPDATE orders SET total = 0", "SELECT email FROM customers", "SELECT c.email FROM customers c"] {
        let f = Fixture::new();
        let r = f.run("q", &ScriptedLlm::constant(fenced(sql)), &cfg);
        ensure!(r.final_state == T2sFinal::Rejected, "{sql}: {:?}", r.final_state);
        ensure!(f.exec.calls() == 0, "{sql}: {} executor calls", f.exec.calls());
    }
    Ok("introspection, miles, hip-hop, last 3 months, two-step merge; 4 rejections with 0 executor calls".into())
}

fn bounded_retries() -> Outcome {
    for max_retries in 0..=5 {
        let f = Fixture::new();
        let llm = ScriptedLlm::constant("SELEC broken FROMM orders");
        let r = f.run("how many orders", &llm, &T2sConfig { max_retries, ..T2sConfig::default() });
        ensure!(llm.calls() == max_retries + 1, "max_retries {max_retries}: {} calls", llm.calls());
        ensure!(r.final_state == T2sFinal::ReformulationSuggested, "final {:?}", r.final_state);
    }
    Ok("calls = max_retries + 1 for max_retries 0..=5; final reformulation_suggested".into())
}

fn gold(id: &str, spans: &[(&str, usize, usize)]) -> GoldAnnotation {
    GoldAnnotation {
        query_id: id.into(),
        query: id.into(),
        evidence_spans: spans.iter().map(|&(d, s, e)| EvidenceSpan::new(d, s, e)).collect(),
        reference_answer: None,
        dataset: "synthetic".into(),
    }
}

fn evalkit_oracle() -> Outcome {
    let mut spans = ChunkSpans::default();
    for i in 0..5 {
        spans.insert(format!("c{i}"), EvidenceSpan::new("d1", i * 20, i * 20 + 20));
    }
    spans.insert("e0", EvidenceSpan::new("d2", 0, 50));
    spans.insert("e1", EvidenceSpan::new("d2", 50, 100));
    // (gold spans, ranked, recall@1,2,4, precision@1,2,4), counted by hand.
    let cases: [(&[(&str, usize, usize)], Option<&[&str]>, [f64; 3], [f64; 3]); 10] = [
        (&[("d1", 5, 10)], Some(&["c0", "c1"]), [100.0; 3], [100.0, 50.0, 50.0]),
        (&[("d1", 15, 25)], Some(&["c2", "c1", "c0"]), [0.0, 100.0, 100.0], [0.0, 50.0, 2.0 / 3.0 * 100.0]),
        (&[("d1", 0, 5), ("d2", 60, 70)], Some(&["e1", "c3", "c0", "e0"]), [50.0, 50.0, 100.0], [100.0, 50.0, 50.0]),
        (&[("d2", 49, 51)], Some(&["e1"]), [100.0; 3], [100.0; 3]),
        (&[("d1", 40, 41)], Some(&["c1", "c3", "c4", "c0"]), [0.0; 3], [0.0; 3]),
        (&[("d1", 19, 20)], Some(&["c0", "c4"]), [100.0; 3], [100.0, 50.0, 50.0]),
        (&[("d1", 0, 10)], None, [0.0; 3], [0.0; 3]),
        (&[("d2", 0, 10)], Some(&[]), [0.0; 3], [0.0; 3]),
        (&[("d1", 0, 1), ("d1", 30, 31), ("d2", 90, 95)], Some(&["c1", "c0", "e0", "e1"]), [1.0 / 3.0 * 100.0, 2.0 / 3.0 * 100.0, 100.0], [100.0, 100.0, 75.0]),
        (&[("d2", 0, 20)], Some(&["c0", "c1"]), [0.0; 3], [0.0; 3]),
    ];
    let mut run = RetrievalRun::default();
    let mut g = Vec::new();
    for (i, (sp, ranked, _, _)) in cases.iter().enumerate() {
        let id = format!("q{i:02}");
        g.push(gold(&id, sp));
        if let Some(r) = ranked {
            run.insert(id, r.iter().map(|s| s.to_string()).collect());
        }
    }
    let scores = evaluate(&run, &g, &spans, &[1, 2, 4]).unwrap();
    for (s, (_, _, r, p)) in scores.iter().zip(&cases) {
        ensure!(s.recall == r, "{} recall {:?} != {:?}", s.query_id, s.recall, r);
        ensure!(s.precision == p, "{} precision {:?} != {:?}", s.query_id, s.precision, p);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let n = rng.random_range(1..=50);
        let mut layout = ChunkSpans::default();
        for c in 0..n {
            layout.insert(format!("c{c}"), EvidenceSpan::new("d", c * 10, c * 10 + 10));
        }
        let spans_n = rng.random_range(1..5);
        let gs: Vec<(&str, usize, usize)> = (0..spans_n)
            .map(|_| {
                let s = rng.random_range(0..n * 10);
                ("d", s, rng.random_range(s + 1..=n * 10))
            })
            .collect();
        let mut ids: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut ids[..], &mut rng);
        ids.truncate(rng.random_range(0..=n));
        let mut r = RetrievalRun::default();
        r.insert("q", ids.iter().map(|c| format!("c{c}")).collect());
        let ks: Vec<usize> = (1..=n + 1).collect();
        let s = evaluate(&r, &[gold("q", &gs)], &layout, &ks).unwrap();
        ensure!(s[0].recall.windows(2).all(|w| w[0] <= w[1]), "recall not monotone: {:?}", s[0].recall);
    }

    let report = ablation_report(
        &[
            PolicyRun { label: "500".into(), run: run.clone(), spans: spans.clone() },
            PolicyRun { label: "1000".into(), run, spans },
        ],
        &g,
        &DEFAULT_KS,
    )
    .unwrap();
    let text = report.to_text();
    for line in text.lines().filter(|l| l.starts_with("synthetic") || l.starts_with("ALL")) {
        let n = line.split('|').skip(1).flat_map(str::split_whitespace).filter(|w| w.parse::<f64>().is_ok()).count();
        ensure!(n == 12, "row has {n} numeric columns: {line}");
    }
    ensure!(report.tables.len() == 2, "{} tables", report.tables.len());
    Ok("10-query gold set exact; recall monotone on 500 random runs; 12-column ablation layout".into())
}

fn blank_trace(answer: usize, context: usize) -> TraceAnnotation {
    TraceAnnotation {
        query_id: "t".into(),
        answer: "a".repeat(answer),
        context: "c".repeat(context),
        supported_spans: vec![(0, answer)],
        unsupported_spans: vec![],
        abstained_spans: vec![],
        relevant_spans: vec![],
        utilized_spans: vec![],
    }
}

fn trace_arithmetic() -> Outcome {
    let m = trace_metrics(&blank_trace(150, 400)).unwrap();
    ensure!(m.hallucination == Some(0.0), "extractive hallucination {:?}", m.hallucination);

    let mut t = blank_trace(10, 1000);
    t.relevant_spans = vec![(0, 250), (600, 750)];
    t.utilized_spans = vec![(0, 200), (650, 750)];
    let m = trace_metrics(&t).unwrap();
    ensure!(
        (m.completeness, m.utilization, m.context_relevance) == (Some(0.75), Some(0.3), Some(0.4)),
        "context example {m:?}"
    );

    let mut t = blank_trace(200, 10);
    t.supported_spans = vec![(0, 80), (130, 200)];
    t.unsupported_spans = vec![(80, 130)];
    let m = trace_metrics(&t).unwrap();
    ensure!(m.hallucination == Some(0.25), "hallucination example {:?}", m.hallucination);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spans = |rng: &mut ChaCha8Rng, len: usize| -> Vec<(usize, usize)> {
        (0..rng.random_range(0..6))
            .map(|_| {
                let s = rng.random_range(0..=len);
                (s, rng.random_range(s..=len))
            })
            .collect()
    };
    for _ in 0..1000 {
        let (a, c) = (rng.random_range(0..300), rng.random_range(0..600));
        let mut t = blank_trace(a, c);
        t.supported_spans.clear();
        for i in 0..a {
            match rng.random_range(0..3) {
                0 => t.supported_spans.push((i, i + 1)),
                1 => t.unsupported_spans.push((i, i + 1)),
                _ => t.abstained_spans.push((i, i + 1)),
            }
        }
        t.relevant_spans = spans(&mut rng, c);
        t.utilized_spans = spans(&mut rng, c);
        let m = trace_metrics(&t).unwrap();
        for v in [m.completeness, m.utilization, m.context_relevance, m.hallucination].into_iter().flatten() {
            ensure!((0.0..=1.0).contains(&v), "out of bounds: {m:?}");
        }
    }
    Ok("three worked examples exact; 1000 random annotations within [0,1]".into())
}

/// Validates one SSE body without the library's parser. Returns the number
/// of events.
fn check_wire(body: &str) -> Result<usize, String> {
    const MIDDLE: &[&str] = &["token", "citation", "table", "chart", "sql_trace", "warning"];
    let mut names = Vec::new();
    let mut last_seq: Option<u64> = None;
    ensure!(body.ends_with("\n\n"), "body does not end with a blank line");
    for frame in body.split("\n\n").filter(|f| !f.is_empty()) {
        if frame.starts_with(':') {
            continue;
        }
        let lines: Vec<&str> = frame.split('\n').collect();
        ensure!(lines.len() == 2, "frame has {} lines: {frame:?}", lines.len());
        let name = lines[0].strip_prefix("event: ").ok_or(format!("bad event line {:?}", lines[0]))?;
        let data = lines[1].strip_prefix("data: ").ok_or(format!("bad data line {:?}", lines[1]))?;
        let v: Value = serde_json::from_str(data).map_err(|e| format!("data is not JSON: {e}"))?;
        let seq = v["seq"].as_u64().ok_or("missing seq")?;
        if let Some(prev) = last_seq {
            ensure!(seq > prev, "seq {seq} after {prev}");
        }
        last_seq = Some(seq);
        names.push(name.to_string());
    }
    ensure!(names.first().map(String::as_str) == Some("route"), "first event {:?}", names.first());
    let terminals = names.iter().filter(|n| *n == "done" || *n == "error").count();
    ensure!(terminals == 1, "{terminals} terminal events");
    ensure!(matches!(names.last().map(String::as_str), Some("done" | "error")), "stream does not end terminally");
    for n in &names[1..names.len() - 1] {
        ensure!(MIDDLE.contains(&n.as_str()), "unexpected event {n}");
    }
    Ok(names.len())
}

fn service_app(generator: Option<Arc<dyn Generator>>) -> axum::Router {
    let mut cfg = AppConfig::default();
    cfg.retrieval.top_n = 8;
    cfg.service.datasources.push(DataSourceConfig::fixture("shop"));
    let mut engine = cfg.build_engine().unwrap().with_plugin(EchoPlugin::new("echo"));
    if let Some(g) = generator {
        engine.providers.generator = g;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let docs: Vec<Document> = (0..40)
        .map(|i| {
            let n = rng.random_range(20..80);
            let mut text = String::new();
            for s in 0..n / 8 {
                let w = words(&mut rng, 8);
                text.push_str(&format!("{}{} number {s}. ", w[..1].to_uppercase(), &w[1..]));
            }
            Document::new(format!("doc{i}"), text)
        })
        .collect();
    engine.ingest(&docs, &ChunkPolicy::new(48, 8).unwrap(), None).unwrap();
    let (state, _handle) = AppState::new(Arc::new(engine), cfg);
    router(state)
}

fn random_request(rng: &mut ChaCha8Rng) -> Value {
    let templates: &[&dyn Fn(&mut ChaCha8Rng) -> String] = &[
        &|r| format!("what does the {} say about {}", words(r, 1), words(r, 2)),
        &|r| format!("{}?", words(r, 4)),
        &|_| "how many orders are there".into(),
        &|_| "plot number of orders by status".into(),
        &|_| "total revenue by month".into(),
        &|_| "average distance of shipments in miles".into(),
        &|_| "plot that as a chart".into(),
        &|r| format!("describe this photo of a {}", words(r, 1)),
        &|r| format!("ask echo about {}", words(r, 2)),
        &|r| format!("search the web for {}", words(r, 2)),
        &|_| "zqx vprt ñandú 🚀".into(),
        &|r| format!("orders per status and the {} policy", words(r, 1)),
    ];
    let query = (templates.choose(rng).unwrap())(rng);
    let mut req = json!({
        "session_id": format!("s{}", rng.random_range(0..25)),
        "query": query,
    });
    if rng.random_bool(0.4) {
        req["mode"] = json!("strict");
    }
    match rng.random_range(0..10) {
        0 => req["datasource"] = json!("nowhere"),
        1 | 2 => req["datasource"] = json!("shop"),
        _ => {}
    }
    req
}

fn service_grammar() -> Outcome {
    let manifest = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../Cargo.toml")).unwrap();
    ensure!(!manifest.contains("chat_ui"), "workspace builds the chat UI");
    let members: Vec<String> = std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join(".."))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("Cargo.toml").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ensure!(members.iter().all(|m| m == "core" || m == "service"), "unexpected crates {members:?}");

    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let apps = [
            service_app(None),
            service_app(Some(Arc::new(AdversarialLlm::default()))),
            service_app(Some(Arc::new(Unavailable))),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
        let mut events = 0;
        for i in 0..1000 {
            let app = apps.choose(&mut rng).unwrap().clone();
            let req = random_request(&mut rng);
            let resp = app
                .oneshot(
                    Request::post("/v1/query")
                        .header("content-type", "application/json")
                        .body(Body::from(req.to_string()))
                        .unwrap(),
                )
                .await
                .unwrap();
            ensure!(resp.status() == StatusCode::OK, "query {i} status {}", resp.status());
            let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
            let body = String::from_utf8(bytes.to_vec()).map_err(|e| e.to_string())?;
            events += check_wire(&body).map_err(|e| format!("query {i} {req}: {e}\n{body}"))?;
            let terminal = body.rsplit("event: ").next().unwrap_or("").lines().next().unwrap_or("").to_string();
            *kinds.entry(terminal).or_default() += 1;
        }
        Ok(format!("1000 streams, {events} events, terminals {kinds:?}; no secondary component in the workspace"))
    })
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("funnel conformance", funnel),
        ("chunking arithmetic", chunking),
        ("BM25 oracle equivalence", bm25_oracle),
        ("HNSW recall", hnsw_recall),
        ("grounding loop", grounding),
        ("T2S scenarios", t2s_scenarios),
        ("bounded retries", bounded_retries),
        ("evalkit oracle", evalkit_oracle),
        ("TRACe arithmetic", trace_arithmetic),
        ("service grammar", service_grammar),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name} ({secs:.2} s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{:>2}] {name} ({secs:.2} s): {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
