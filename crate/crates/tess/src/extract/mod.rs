//! Text-to-primitive extraction: prompt construction, candidate scoring over
//! a pluggable completion backend, temperature softmax, margins, and cached
//! orchestration across the four primitive kinds.

pub mod backend;
pub mod cache;
pub mod prompt;
pub mod score;

use std::collections::BTreeMap;

pub use backend::{CompletionBackend, EndpointConfig, HttpBackend, MockBackend, ScoringMode, TokenLogProbs};
pub use cache::{cache_key, CachedResponse, ExtractionCache};
pub use prompt::{build_prompt, scoring_context, PromptSpec};
pub use score::{
    margin, parse_structured_response, predict_label, render_structured_response, temper_softmax,
    LabelDistribution, LabelScores,
};

use crate::error::{Result, TessError};
use crate::primitives::{PrimitiveKind, PrimitiveLabel, ALL_KINDS};

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
/// Probability mass assigned to the parsed label in parse mode; the
/// remainder is spread uniformly over the other candidates.
pub const DELTA_PARSE: f64 = 0.05;

/// One primitive's extraction outcome.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExtractionResult {
    pub kind: PrimitiveKind,
    pub predicted: PrimitiveLabel,
    pub distribution: LabelDistribution,
    pub margin_m: f64,
    pub backend_id: String,
    pub cached: bool,
}

impl ExtractionResult {
    fn from_distribution(dist: LabelDistribution, backend_id: String, cached: bool) -> Self {
        let predicted = predict_label(&dist);
        let margin_m = margin(&dist);
        Self {
            kind: dist.kind,
            predicted,
            distribution: dist,
            margin_m,
            backend_id,
            cached,
        }
    }

    /// Synthesize a confident result directly from a known label (oracle-label
    /// runs on the semi-synthetic benchmark).
    pub fn oracle(label: PrimitiveLabel) -> Self {
        let dist = peaked_distribution(label, DELTA_PARSE);
        Self::from_distribution(dist, "oracle".into(), false)
    }
}

/// Extraction outcomes for one window; kinds that failed carry an error
/// marker instead of aborting the batch.
#[derive(Debug, Clone)]
pub struct WindowExtraction {
    pub results: BTreeMap<PrimitiveKind, ExtractionResult>,
    pub failures: BTreeMap<PrimitiveKind, String>,
}

impl WindowExtraction {
    pub fn get(&self, kind: PrimitiveKind) -> Option<&ExtractionResult> {
        self.results.get(&kind)
    }

    pub fn from_oracle(labels: [PrimitiveLabel; 4]) -> Self {
        let mut results = BTreeMap::new();
        for label in labels {
            results.insert(label.kind(), ExtractionResult::oracle(label));
        }
        Self {
            results,
            failures: BTreeMap::new(),
        }
    }

    /// Marker for windows with no aligned text: every kind missing.
    pub fn empty() -> Self {
        Self {
            results: BTreeMap::new(),
            failures: ALL_KINDS
                .iter()
                .map(|k| (*k, "no aligned text".to_string()))
                .collect(),
        }
    }
}

/// Peaked categorical distribution around `label`: mass `1 - delta` on the
/// label, the rest uniform over the other candidates.
fn peaked_distribution(label: PrimitiveLabel, delta: f64) -> LabelDistribution {
    let n = label.kind().cardinality();
    let rest = delta / (n - 1) as f64;
    let probs = (0..n)
        .map(|i| if i == label.index() { 1.0 - delta } else { rest })
        .collect();
    LabelDistribution {
        kind: label.kind(),
        probs,
        temperature: DEFAULT_TEMPERATURE,
    }
}

/// Score every candidate of `kind` as a continuation of the prompt's
/// output-line prefix.
pub fn score_candidates(
    backend: &dyn CompletionBackend,
    rendered_prompt: &str,
    kind: PrimitiveKind,
) -> Result<LabelScores> {
    if !backend.supports_logprobs() {
        return Err(TessError::ModeUnsupported(format!(
            "backend {} reports no token log-probabilities; use parse mode",
            backend.id()
        )));
    }
    let context = scoring_context(rendered_prompt, kind);
    let mut scores = Vec::with_capacity(kind.cardinality());
    for cand in kind.candidates() {
        let lp = backend.continuation_logprobs(&context, cand)?;
        scores.push(lp.total());
    }
    LabelScores::new(kind, scores)
}

/// Settings for one extraction pass.
#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub scoring_mode: ScoringMode,
    pub temperature: f64,
    pub delta_parse: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            scoring_mode: ScoringMode::Parse,
            temperature: DEFAULT_TEMPERATURE,
            delta_parse: DELTA_PARSE,
        }
    }
}

fn fetch_response(
    backend: &dyn CompletionBackend,
    cache: Option<&ExtractionCache>,
    rendered_prompt: &str,
    opts: &ExtractOptions,
) -> Result<(CachedResponse, bool)> {
    let key = cache_key(&backend.id(), rendered_prompt, opts.scoring_mode);
    if let Some(cache) = cache {
        if let Some(hit) = cache.get(&key) {
            return Ok((hit, true));
        }
    }
    let fresh = match opts.scoring_mode {
        ScoringMode::Parse => CachedResponse::Parse {
            text: backend.complete(rendered_prompt)?,
        },
        ScoringMode::Logprob => {
            if !backend.supports_logprobs() {
                return Err(TessError::ModeUnsupported(format!(
                    "backend {} reports no token log-probabilities; use parse mode",
                    backend.id()
                )));
            }
            let mut scores = Vec::with_capacity(ALL_KINDS.len());
            for kind in ALL_KINDS {
                let context = scoring_context(rendered_prompt, kind);
                let mut per_candidate = Vec::with_capacity(kind.cardinality());
                for cand in kind.candidates() {
                    per_candidate.push(backend.continuation_logprobs(&context, cand)?);
                }
                scores.push((kind, per_candidate));
            }
            CachedResponse::Logprob { scores }
        }
    };
    if let Some(cache) = cache {
        cache.put(&key, &fresh)?;
    }
    Ok((fresh, false))
}

/// Extract all four primitives from one text. Per-kind failures are recorded
/// as missing-extraction markers rather than aborting.
pub fn extract(
    backend: &dyn CompletionBackend,
    cache: Option<&ExtractionCache>,
    text: &str,
    role: &str,
    domain_context: &str,
    opts: &ExtractOptions,
) -> Result<WindowExtraction> {
    let spec = PromptSpec {
        role_description: role.to_string(),
        domain_context: domain_context.to_string(),
        text_content: text.to_string(),
    };
    let rendered = build_prompt(&spec)?;
    let (response, cached) = fetch_response(backend, cache, &rendered, opts)?;
    let backend_id = backend.id();

    let mut results = BTreeMap::new();
    let mut failures = BTreeMap::new();
    match response {
        CachedResponse::Logprob { scores } => {
            let by_kind: BTreeMap<PrimitiveKind, Vec<TokenLogProbs>> = scores.into_iter().collect();
            for kind in ALL_KINDS {
                match by_kind.get(&kind) {
                    Some(per_candidate) if per_candidate.len() == kind.cardinality() => {
                        let totals: Vec<f64> = per_candidate.iter().map(|lp| lp.total()).collect();
                        match LabelScores::new(kind, totals)
                            .and_then(|s| temper_softmax(&s, opts.temperature))
                        {
                            Ok(dist) => {
                                results.insert(
                                    kind,
                                    ExtractionResult::from_distribution(
                                        dist,
                                        backend_id.clone(),
                                        cached,
                                    ),
                                );
                            }
                            Err(e) => {
                                failures.insert(kind, e.to_string());
                            }
                        }
                    }
                    _ => {
                        failures.insert(kind, "incomplete candidate scores".to_string());
                    }
                }
            }
        }
        CachedResponse::Parse { text } => match parse_structured_response(&text) {
            Ok(labels) => {
                for (kind, label) in labels {
                    let dist = peaked_distribution(label, opts.delta_parse);
                    results.insert(
                        kind,
                        ExtractionResult::from_distribution(dist, backend_id.clone(), cached),
                    );
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for kind in ALL_KINDS {
                    failures.insert(kind, msg.clone());
                }
            }
        },
    }
    Ok(WindowExtraction { results, failures })
}

/// Extract for a batch of texts, fanning out over at most
/// `max_parallel` worker threads while preserving input order. Entries of
/// `None` (windows without text) yield empty extractions.
pub fn extract_batch(
    backend: &dyn CompletionBackend,
    cache: Option<&ExtractionCache>,
    texts: &[Option<String>],
    role: &str,
    domain_context: &str,
    opts: &ExtractOptions,
    max_parallel: usize,
) -> Result<Vec<WindowExtraction>> {
    let max_parallel = max_parallel.max(1);
    let mut out: Vec<Option<Result<WindowExtraction>>> = (0..texts.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in texts.chunks(max_parallel).enumerate() {
        let base = chunk_idx * max_parallel;
        let results: Vec<(usize, Result<WindowExtraction>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(i, text)| {
                    scope.spawn(move || {
                        let res = match text {
                            Some(t) => extract(backend, cache, t, role, domain_context, opts),
                            None => Ok(WindowExtraction::empty()),
                        };
                        (base + i, res)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (i, res) in results {
            out[i] = Some(res);
        }
    }
    out.into_iter().map(|r| r.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_backend() -> MockBackend {
        let mut scores = BTreeMap::new();
        for kind in ALL_KINDS {
            for (i, cand) in kind.candidates().iter().enumerate() {
                let tokens = cand.split('-').count();
                // favour candidate index 1 for every kind
                let lp = if i == 1 { -0.1 } else { -2.0 };
                scores.insert((kind, i), vec![lp; tokens]);
            }
        }
        MockBackend::fixed(scores)
    }

    #[test]
    fn score_candidates_sums_tokens() {
        let backend = fixed_backend();
        let spec = PromptSpec {
            role_description: "analyst".into(),
            domain_context: "test".into(),
            text_content: "text".into(),
        };
        let prompt = build_prompt(&spec).unwrap();
        let scores = score_candidates(&backend, &prompt, PrimitiveKind::Lag).unwrap();
        // early-persist (index 1) has 2 tokens at -0.1
        assert!((scores.scores[1] + 0.2).abs() < 1e-12);
        // early-fade (index 0) has 2 tokens at -2.0
        assert!((scores.scores[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn extract_logprob_mode_deterministic() {
        let backend = fixed_backend();
        let opts = ExtractOptions {
            scoring_mode: ScoringMode::Logprob,
            ..Default::default()
        };
        let a = extract(&backend, None, "text body", "analyst", "test", &opts).unwrap();
        let b = extract(&backend, None, "text body", "analyst", "test", &opts).unwrap();
        assert_eq!(a.results.len(), 4);
        assert!(a.failures.is_empty());
        for kind in ALL_KINDS {
            let ra = a.get(kind).unwrap();
            let rb = b.get(kind).unwrap();
            assert_eq!(ra.predicted, rb.predicted);
            assert_eq!(ra.predicted.index(), 1);
            assert_eq!(ra.margin_m, rb.margin_m);
            let sum: f64 = ra.distribution.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(ra.distribution.probs.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn extract_parse_mode_margin() {
        struct ParseOnly;
        impl CompletionBackend for ParseOnly {
            fn id(&self) -> String {
                "parse-only".into()
            }
            fn supports_logprobs(&self) -> bool {
                false
            }
            fn continuation_logprobs(&self, _: &str, _: &str) -> Result<TokenLogProbs> {
                Err(TessError::ModeUnsupported("no logprobs".into()))
            }
            fn complete(&self, _: &str) -> Result<String> {
                Ok("Mean Shift: mild-rise\nVolatility: stable\nShape: trough\nLag: late\n".into())
            }
        }
        let opts = ExtractOptions::default();
        let ext = extract(&ParseOnly, None, "text", "analyst", "ctx", &opts).unwrap();
        let r = ext.get(PrimitiveKind::MeanShift).unwrap();
        assert_eq!(r.predicted.name(), "mild-rise");
        // q = {0.95, 0.0125 x 4} -> margin = ln(0.95 / 0.0125)
        assert!((r.margin_m - 4.330733340286331).abs() < 1e-9);
        // logprob mode on a parse-only backend is redirected
        let lp_opts = ExtractOptions {
            scoring_mode: ScoringMode::Logprob,
            ..Default::default()
        };
        let err = extract(&ParseOnly, None, "text", "analyst", "ctx", &lp_opts).unwrap_err();
        assert!(err.to_string().contains("parse mode"));
    }

    #[test]
    fn extract_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ExtractionCache::open(dir.path().join("c.jsonl")).unwrap();
        let backend = fixed_backend();
        let opts = ExtractOptions {
            scoring_mode: ScoringMode::Logprob,
            ..Default::default()
        };
        let a = extract(&backend, Some(&cache), "same text", "analyst", "ctx", &opts).unwrap();
        let calls_after_first = backend.call_count();
        assert!(calls_after_first > 0);
        let b = extract(&backend, Some(&cache), "same text", "analyst", "ctx", &opts).unwrap();
        assert_eq!(backend.call_count(), calls_after_first, "second call hit the network");
        assert!(!a.get(PrimitiveKind::Shape).unwrap().cached);
        assert!(b.get(PrimitiveKind::Shape).unwrap().cached);
        for kind in ALL_KINDS {
            assert_eq!(
                a.get(kind).unwrap().predicted,
                b.get(kind).unwrap().predicted
            );
        }
    }

    #[test]
    fn extract_batch_preserves_order_and_handles_missing() {
        let backend = fixed_backend();
        let opts = ExtractOptions {
            scoring_mode: ScoringMode::Logprob,
            ..Default::default()
        };
        let texts = vec![Some("a".to_string()), None, Some("b".to_string())];
        let out = extract_batch(&backend, None, &texts, "analyst", "ctx", &opts, 2).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].results.len(), 4);
        assert!(out[1].results.is_empty());
        assert_eq!(out[1].failures.len(), 4);
        assert_eq!(out[2].results.len(), 4);
    }

    #[test]
    fn parse_failure_marks_all_kinds_missing() {
        struct BadParse;
        impl CompletionBackend for BadParse {
            fn id(&self) -> String {
                "bad".into()
            }
            fn supports_logprobs(&self) -> bool {
                false
            }
            fn continuation_logprobs(&self, _: &str, _: &str) -> Result<TokenLogProbs> {
                Err(TessError::ModeUnsupported("no logprobs".into()))
            }
            fn complete(&self, _: &str) -> Result<String> {
                Ok("gibberish".into())
            }
        }
        let ext = extract(
            &BadParse,
            None,
            "text",
            "analyst",
            "ctx",
            &ExtractOptions::default(),
        )
        .unwrap();
        assert!(ext.results.is_empty());
        assert_eq!(ext.failures.len(), 4);
    }
}
