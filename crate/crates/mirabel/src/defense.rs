//! Detect-and-hide retrieval pipeline.
//!
//! Detection runs before top-k on the same score vector the retriever
//! needs anyway; when it fires (and the defense is enabled) the single
//! identified target document is excluded from that request's retrieval.
//! The store is never mutated and nothing persists across queries, so an
//! undetected query goes through a bitwise-identical plain-RAG path.

use serde::Serialize;

use crate::corpus::CorpusStore;
use crate::detector::{detect_scores, profile_excluding, DetectionOutcome, ThresholdVariant};
use crate::error::{Error, Result};
use crate::index::{score_all, top_k, RetrievalResult};

/// Raw prompt template, versioned; golden tests pin these bytes.
pub const PROMPT_TEMPLATE: &str = include_str!("../resources/rag_prompt.txt");

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DefenseConfig {
    pub rho: f64,
    pub variant: ThresholdVariant,
    pub k: usize,
    /// Off means plain-RAG baseline: detection still runs (for logging)
    /// but nothing is hidden.
    pub enabled: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            rho: 0.05,
            variant: ThresholdVariant::Alg1,
            k: 3,
            enabled: true,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("retrieval depth k must be >= 1".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidRho(self.rho));
        }
        Ok(())
    }
}

/// Filled prompt template plus the provenance needed for auditing.
#[derive(Debug, Clone, Serialize)]
pub struct AssembledPrompt {
    pub system_text: String,
    pub user_text: String,
    pub context_ids: Vec<String>,
    pub contexts: Vec<String>,
}

/// Response generator behind the pipeline. The bundled template stub is
/// pure; a real LLM client can implement this instead.
pub trait Generator {
    fn generate(&self, prompt: &AssembledPrompt) -> String;
}

/// Deterministic extractive stand-in for an LLM: answers with the first
/// sentence of the context sharing the most query tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateGenerator;

#[derive(Debug, Clone, Serialize)]
pub struct DefendedResponse {
    pub response: String,
    pub retrieval: RetrievalResult,
    pub detection: DetectionOutcome,
    pub hidden_id: Option<String>,
    /// Diagnostic: whether detection would fire again on the corpus with
    /// the hidden document removed. Only one document is ever hidden.
    pub second_pass_detected: bool,
}

/// Score, detect, and retrieve with the detected target hidden. Returns
/// the retrieval, the detection outcome, and the second-pass diagnostic.
pub fn defended_retrieve(
    store: &CorpusStore,
    query: &[f32],
    config: &DefenseConfig,
) -> Result<(RetrievalResult, DetectionOutcome, bool)> {
    let scores = score_all(store, query)?;
    defended_from_scores(store, &scores, config)
}

/// Same as [`defended_retrieve`] but over an already-computed score
/// vector, for callers that also need the raw scores.
pub fn defended_from_scores(
    store: &CorpusStore,
    scores: &crate::index::ScoreVector,
    config: &DefenseConfig,
) -> Result<(RetrievalResult, DetectionOutcome, bool)> {
    config.validate()?;
    let detection = detect_scores(scores, store, config.rho, config.variant)?;
    let hide = config.enabled && detection.detected;
    let retrieval = if hide {
        let target = detection.target_id.as_deref().expect("detected outcome has target");
        top_k(scores, store, config.k, &[target])
    } else {
        top_k(scores, store, config.k, &[])
    };
    let second_pass = if hide {
        let row = detection.target_row.expect("detected outcome has row");
        match profile_excluding(scores, store, row) {
            Ok(p) => {
                let t = crate::detector::gumbel_threshold(&p, config.rho, config.variant)?;
                p.s_max > t.tau
            }
            // remainder too small to test again
            Err(Error::CorpusTooSmall { .. }) => false,
            Err(e) => return Err(e),
        }
    } else {
        false
    };
    Ok((retrieval, detection, second_pass))
}

fn template_sections() -> (&'static str, &'static str) {
    let body = PROMPT_TEMPLATE
        .strip_prefix("version: 1\n")
        .expect("prompt template version header");
    let (system, user) = body.split_once("User:\n").expect("prompt template User marker");
    let system = system
        .strip_prefix("System:\n")
        .expect("prompt template System marker");
    (system.trim_end_matches('\n'), user.trim_end_matches('\n'))
}

/// Fill the template: contexts joined in rank order, then the query.
pub fn assemble_prompt(
    query_text: &str,
    retrieval: &RetrievalResult,
    store: &CorpusStore,
) -> Result<AssembledPrompt> {
    let (system_text, user_template) = template_sections();
    let mut context_ids = Vec::with_capacity(retrieval.hits.len());
    let mut contexts = Vec::with_capacity(retrieval.hits.len());
    for hit in &retrieval.hits {
        let doc = store
            .get(&hit.doc_id)
            .ok_or_else(|| Error::UnknownDocument(hit.doc_id.clone()))?;
        context_ids.push(doc.id.clone());
        contexts.push(doc.text.clone());
    }
    let joined = contexts.join("\n");
    let user_text = user_template
        .replace("{context}", &joined)
        .replace("{question}", query_text);
    Ok(AssembledPrompt {
        system_text: system_text.to_string(),
        user_text,
        context_ids,
        contexts,
    })
}

impl Generator for TemplateGenerator {
    fn generate(&self, prompt: &AssembledPrompt) -> String {
        let query_tokens: std::collections::BTreeSet<String> = prompt
            .user_text
            .rsplit("Query:")
            .next()
            .map(|q| crate::corpus::tokenize(q.lines().next().unwrap_or("")).collect())
            .unwrap_or_default();
        let mut best: Option<(usize, &str)> = None;
        for ctx in &prompt.contexts {
            let hits = crate::corpus::tokenize(ctx)
                .filter(|t| query_tokens.contains(t))
                .count();
            // strict > keeps the higher-ranked context on ties
            if hits > 0 && best.map_or(true, |(b, _)| hits > b) {
                best = Some((hits, ctx));
            }
        }
        match best {
            Some((_, ctx)) => first_sentence(ctx),
            None => "I don't know".to_string(),
        }
    }
}

fn first_sentence(text: &str) -> String {
    let end = text
        .char_indices()
        .find(|&(_, c)| c == '.' || c == '!' || c == '?')
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(text.len());
    text[..end].trim().to_string()
}

/// End-to-end defended RAG: retrieve (hiding on detection), assemble the
/// prompt, generate.
pub struct DefensePipeline<'a, G: Generator> {
    pub store: &'a CorpusStore,
    pub config: DefenseConfig,
    pub generator: G,
}

impl<'a, G: Generator> DefensePipeline<'a, G> {
    pub fn respond(&self, query_text: &str, query_vec: &[f32]) -> Result<DefendedResponse> {
        let (retrieval, detection, second_pass) =
            defended_retrieve(self.store, query_vec, &self.config)?;
        let prompt = assemble_prompt(query_text, &retrieval, self.store)?;
        let response = self.generator.generate(&prompt);
        let hidden_id = (self.config.enabled && detection.detected)
            .then(|| detection.target_id.clone().expect("detected outcome has target"));
        Ok(DefendedResponse {
            response,
            retrieval,
            detection,
            hidden_id,
            second_pass_detected: second_pass,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusStore, Document, EmbeddingMatrix, EmbeddingProvider, HashEmbedder};

    /// Corpus of `n` random-token documents plus one planted outlier doc
    /// with disjoint vocabulary at row 7.
    fn hashed_store(n: usize) -> (CorpusStore, HashEmbedder) {
        use rand::{Rng, SeedableRng};
        let embedder = HashEmbedder::new(256, 9).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let docs: Vec<Document> = (0..n)
            .map(|i| {
                let text = if i == 7 {
                    "zebra quagga okapi tapir saola gaur banteng markhor argali urial".to_string()
                } else {
                    (0..12)
                        .map(|_| format!("f{}", rng.random_range(0..100u32)))
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                Document::new(format!("d{i}"), text)
            })
            .collect();
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let emb = embedder.embed(&texts).unwrap();
        (CorpusStore::new(docs, emb).unwrap(), embedder)
    }

    fn embed_query(e: &HashEmbedder, text: &str) -> Vec<f32> {
        e.embed(&[text]).unwrap().row(0).to_vec()
    }

    #[test]
    fn undetected_query_is_plain_rag_bitwise() {
        let (store, e) = hashed_store(40);
        let q = embed_query(&e, "f1 f2 f3 f4 f5 f6");
        let cfg = DefenseConfig::default();
        let (defended, detection, second) = defended_retrieve(&store, &q, &cfg).unwrap();
        let plain = top_k(&score_all(&store, &q).unwrap(), &store, cfg.k, &[]);
        assert!(!detection.detected, "benign-style query must not fire");
        assert_eq!(defended, plain);
        assert!(!second);
    }

    #[test]
    fn detected_target_hidden_hits_shift_by_one() {
        let (store, e) = hashed_store(40);
        // attack query: the planted doc's own text
        let q = embed_query(&e, "zebra quagga okapi tapir saola gaur banteng markhor argali urial");
        let cfg = DefenseConfig::default();
        let scores = score_all(&store, &q).unwrap();
        let undefended = top_k(&scores, &store, 4, &[]);
        let (defended, detection, _) = defended_retrieve(&store, &q, &cfg).unwrap();
        assert!(detection.detected);
        assert_eq!(detection.target_id.as_deref(), Some("d7"));
        assert!(!defended.contains("d7"));
        // defended hits equal positions 2..k+1 of the undefended ranking
        let expect: Vec<&str> = undefended.hits[1..4].iter().map(|h| h.doc_id.as_str()).collect();
        let got: Vec<&str> = defended.hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn disabled_defense_never_hides() {
        let (store, e) = hashed_store(40);
        let q = embed_query(&e, "zebra quagga okapi tapir saola gaur banteng markhor argali urial");
        let cfg = DefenseConfig {
            enabled: false,
            ..DefenseConfig::default()
        };
        let (retrieval, detection, second) = defended_retrieve(&store, &q, &cfg).unwrap();
        assert!(detection.detected); // detection still reported
        assert!(retrieval.contains("d7"));
        assert!(!second);
    }

    // Exhaustion edge: hiding the only scoreable document leaves nothing.
    // Exercised at the exclusion layer since detection needs MIN_CORPUS.
    #[test]
    fn hiding_sole_document_leaves_empty_retrieval() {
        let docs = vec![Document::new("only", "text")];
        let emb = EmbeddingMatrix::new(2, vec![1.0, 0.0]).unwrap();
        let store = CorpusStore::new(docs, emb).unwrap();
        let scores = score_all(&store, &[1.0, 0.0]).unwrap();
        let r = top_k(&scores, &store, 3, &["only"]);
        assert!(r.hits.is_empty());
    }

    #[test]
    fn member_and_ablated_corpus_retrievals_match() {
        let (store, e) = hashed_store(60);
        let q = embed_query(&e, "zebra quagga okapi tapir saola gaur banteng markhor argali urial");
        let cfg = DefenseConfig::default();
        let (defended, detection, _) = defended_retrieve(&store, &q, &cfg).unwrap();
        assert!(detection.detected);

        // same query against the corpus with the target absent; plain
        // retrieval there is what "never stored" looks like
        let docs: Vec<Document> = (0..60)
            .filter(|&i| i != 7)
            .map(|i| store.get(&format!("d{i}")).unwrap().clone())
            .collect();
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let emb = e.embed(&texts).unwrap();
        let ablated = CorpusStore::new(docs, emb).unwrap();
        let plain = top_k(
            &score_all(&ablated, &q).unwrap(),
            &ablated,
            cfg.k,
            &[],
        );

        let a: Vec<&str> = defended.hits.iter().map(|h| h.doc_id.as_str()).collect();
        let b: Vec<&str> = plain.hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn idempotent_when_second_pass_silent() {
        let (store, e) = hashed_store(60);
        let q = embed_query(&e, "zebra quagga okapi tapir saola gaur banteng markhor argali urial");
        let cfg = DefenseConfig::default();
        let (first, detection, second) = defended_retrieve(&store, &q, &cfg).unwrap();
        assert!(detection.detected);
        // single distinct outlier: hiding it leaves nothing extreme
        assert!(!second);
        let (again, _, _) = defended_retrieve(&store, &q, &cfg).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn template_bytes_pinned() {
        // golden: the versioned prompt resource must not drift silently
        let expected = "version: 1\nSystem:\nYou are a helpful assistant. Below is a query from a user and some relevant contexts.\nAnswer the question given the information in those contexts. Your answer should be short and concise.\nIf you cannot find the answer to the question, just say \"I don't know\".\nUser:\nContexts: {context}\nQuery: {question}\nAnswer:\n";
        assert_eq!(PROMPT_TEMPLATE, expected);
    }

    fn tiny_store() -> CorpusStore {
        let docs = vec![
            Document::new("a", "Paris is the capital of France. It is large."),
            Document::new("b", "Berlin is the capital of Germany. It is old."),
        ];
        let emb = EmbeddingMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        CorpusStore::new(docs, emb).unwrap()
    }

    #[test]
    fn assembled_prompt_golden() {
        let store = tiny_store();
        let scores = crate::index::ScoreVector::from_raw(vec![0.9, 0.5]);
        let r = top_k(&scores, &store, 2, &[]);
        let p = assemble_prompt("capital of France?", &r, &store).unwrap();
        assert_eq!(p.context_ids, vec!["a", "b"]);
        assert_eq!(
            p.system_text,
            "You are a helpful assistant. Below is a query from a user and some relevant contexts.\nAnswer the question given the information in those contexts. Your answer should be short and concise.\nIf you cannot find the answer to the question, just say \"I don't know\"."
        );
        assert_eq!(
            p.user_text,
            "Contexts: Paris is the capital of France. It is large.\nBerlin is the capital of Germany. It is old.\nQuery: capital of France?\nAnswer:"
        );
    }

    #[test]
    fn empty_retrieval_prompt_keeps_query() {
        let store = tiny_store();
        let r = RetrievalResult { k: 3, hits: vec![] };
        let p = assemble_prompt("anything?", &r, &store).unwrap();
        assert!(p.context_ids.is_empty());
        assert!(p.user_text.contains("Query: anything?"));
        assert!(p.user_text.starts_with("Contexts: \n"));
    }

    #[test]
    fn unknown_context_id_rejected() {
        let store = tiny_store();
        let r = RetrievalResult {
            k: 1,
            hits: vec![crate::index::Hit {
                doc_id: "ghost".into(),
                row: 0,
                score: 0.1,
            }],
        };
        assert!(matches!(
            assemble_prompt("q", &r, &store),
            Err(Error::UnknownDocument(_))
        ));
    }

    fn prompt_with(contexts: &[&str], query: &str) -> AssembledPrompt {
        AssembledPrompt {
            system_text: String::new(),
            user_text: format!("Contexts: ...\nQuery: {query}\nAnswer:"),
            context_ids: (0..contexts.len()).map(|i| format!("c{i}")).collect(),
            contexts: contexts.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn generator_picks_best_overlap() {
        let g = TemplateGenerator;
        // overlap in both, more hits in the second context
        let p = prompt_with(
            &[
                "Rome has one capital mention. Extra tail.",
                "Paris capital France capital city. Second sentence.",
            ],
            "capital of France",
        );
        assert_eq!(g.generate(&p), "Paris capital France capital city.");

        let p = prompt_with(&["Only here: capital fact. Rest.", "unrelated text."], "capital");
        assert_eq!(g.generate(&p), "Only here: capital fact.");
    }

    #[test]
    fn generator_falls_back_without_overlap() {
        let g = TemplateGenerator;
        let p = prompt_with(&["alpha beta.", "gamma delta."], "zeta");
        assert_eq!(g.generate(&p), "I don't know");
        let empty = prompt_with(&[], "anything");
        assert_eq!(g.generate(&empty), "I don't know");
    }

    #[test]
    fn pipeline_end_to_end_hides_and_answers() {
        let (store, e) = hashed_store(40);
        let pipeline = DefensePipeline {
            store: &store,
            config: DefenseConfig::default(),
            generator: TemplateGenerator,
        };
        let text = "zebra quagga okapi tapir saola gaur banteng markhor argali urial";
        let r = pipeline.respond(text, &embed_query(&e, text)).unwrap();
        assert_eq!(r.hidden_id.as_deref(), Some("d7"));
        assert!(!r.retrieval.contains("d7"));
        // the answer cannot come from the hidden target
        assert!(!r.response.contains("zebra"));
    }
}
