//! Synthetic evaluation harness.
//!
//! Builds topic-clustered token corpora, the three query populations
//! (benign, member attack, non-member attack), retrieval-level analogues
//! of the document-extraction attacks, and a calibrated attacker whose
//! labeled trial stream feeds the metrics in [`crate::stats`].
//!
//! Everything is a pure function of `(spec, counts, config)`: two runs
//! with the same inputs produce byte-identical reports.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{CorpusStore, Document, EmbeddingProvider, HashEmbedder};
use crate::defense::{
    assemble_prompt, defended_from_scores, DefenseConfig, Generator, TemplateGenerator,
};
use crate::detector::DetectionOutcome;
use crate::error::{Error, Result};
use crate::index::score_all;
use crate::stats::{
    adjusted_attack_accuracy, classification_metrics, em_containment, ks_two_sample, recall_at_k,
    ConfusionCounts, MetricsReport,
};

/// Size of the vocabulary shared by every topic.
pub const SHARED_VOCAB: usize = 2000;
/// Size of each topic-specific vocabulary.
pub const TOPIC_VOCAB: usize = 400;
/// Probability that a document token comes from its topic vocabulary
/// rather than the shared one.
pub const TOPICALITY: f64 = 0.2;
/// Token length of benign queries.
pub const BENIGN_QUERY_LEN: usize = 12;
/// Number of fixed histogram bins over [-1, 1].
pub const HIST_BINS: usize = 100;

/// Parameters of one synthetic world.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub dim: usize,
    pub doc_token_len: usize,
    pub seed: u64,
    pub member_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topics: 5,
            docs_per_topic: 400,
            // 256 keeps enough hashing collisions that background scores
            // stay smooth; at wider dims the token-overlap quantization
            // gives them a discrete heavy tail the Gumbel model overshoots
            dim: 256,
            doc_token_len: 200,
            seed: 42,
            member_fraction: 0.7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.docs_per_topic == 0 || self.doc_token_len < 20 {
            return Err(Error::Config(
                "synthetic spec needs topics >= 1, docs_per_topic >= 1, doc_token_len >= 20".into(),
            ));
        }
        if !(self.member_fraction > 0.0 && self.member_fraction < 1.0) {
            return Err(Error::Config("member_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Which population a query belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Benign,
    MemberAttack,
    NonMemberAttack,
}

/// How an attack query is derived from its target document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStyle {
    /// First half of the target document.
    HalfDoc,
    /// Document with `removed` tokens deleted uniformly at random.
    Masked { removed: usize },
    /// Order-preserving uniform 40% token subsample.
    Paraphrase,
}

impl Default for AttackStyle {
    fn default() -> Self {
        AttackStyle::HalfDoc
    }
}

impl std::str::FromStr for AttackStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "halfdoc" => Ok(AttackStyle::HalfDoc),
            "masked" => Ok(AttackStyle::Masked { removed: 10 }),
            "paraphrase" => Ok(AttackStyle::Paraphrase),
            other => Err(Error::Config(format!("unknown attack style `{other}`"))),
        }
    }
}

/// Attacker decision statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerMode {
    /// Cosine between the target and the best retrieved document.
    MaxSim,
    /// 1.0 when the target itself is retrieved, else best-hit cosine
    /// capped below 1.
    ContainTopK,
}

impl std::str::FromStr for AttackerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxsim" => Ok(AttackerMode::MaxSim),
            "containtopk" | "contain-top-k" => Ok(AttackerMode::ContainTopK),
            other => Err(Error::Config(format!("unknown attacker mode `{other}`"))),
        }
    }
}

/// One labeled query run through the full pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct AttackTrial {
    pub kind: QueryKind,
    pub query_text: String,
    pub target_id: Option<String>,
    pub attacker_score: f64,
    pub attacker_decision: bool,
    pub detection: DetectionOutcome,
}

/// How many trials of each kind to run. Detection evaluation balances
/// positives and negatives by pairing every member trial with one
/// negative drawn from the benign and non-member pools, so it needs
/// `benign >= ceil(member/2)` and `non_member >= floor(member/2)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrialCounts {
    pub member: usize,
    pub non_member: usize,
    pub benign: usize,
}

impl Default for TrialCounts {
    fn default() -> Self {
        TrialCounts {
            member: 600,
            non_member: 600,
            benign: 600,
        }
    }
}

/// A generated world: member store, held-out non-member documents, and a
/// benign query pool, all deterministic in the spec seed.
pub struct GeneratedWorld {
    pub store: CorpusStore,
    pub non_members: Vec<Document>,
    pub benign_queries: Vec<String>,
    pub embedder: HashEmbedder,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mixture_token(rng: &mut ChaCha8Rng, topic: usize) -> String {
    if rng.random::<f64>() < TOPICALITY {
        format!("t{topic}w{}", rng.random_range(0..TOPIC_VOCAB))
    } else {
        format!("s{}", rng.random_range(0..SHARED_VOCAB))
    }
}

/// Generate the member corpus, non-member documents, and `benign_count`
/// benign queries.
pub fn generate_corpus(spec: &SyntheticSpec, benign_count: usize) -> Result<GeneratedWorld> {
    spec.validate()?;
    let embedder = HashEmbedder::new(spec.dim, splitmix64(spec.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.topics * spec.docs_per_topic;

    let mut docs = Vec::with_capacity(total);
    for idx in 0..total {
        let topic = idx / spec.docs_per_topic;
        let text: Vec<String> = (0..spec.doc_token_len)
            .map(|_| mixture_token(&mut rng, topic))
            .collect();
        docs.push(Document::new(format!("doc{idx}"), text.join(" ")));
    }

    // seed-deterministic member / non-member split
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let member_count = ((total as f64) * spec.member_fraction).round() as usize;
    let mut member_idx = order[..member_count].to_vec();
    let mut non_member_idx = order[member_count..].to_vec();
    member_idx.sort_unstable();
    non_member_idx.sort_unstable();

    let members: Vec<Document> = member_idx.iter().map(|&i| docs[i].clone()).collect();
    let non_members: Vec<Document> = non_member_idx.iter().map(|&i| docs[i].clone()).collect();
    let store = CorpusStore::build(members, &embedder)?;

    // benign queries mix topics token by token: real benign traffic is
    // not concentrated on one topic cluster the way a probe is
    let benign_queries: Vec<String> = (0..benign_count)
        .map(|_| {
            (0..BENIGN_QUERY_LEN)
                .map(|_| {
                    let topic = rng.random_range(0..spec.topics);
                    mixture_token(&mut rng, topic)
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();

    Ok(GeneratedWorld {
        store,
        non_members,
        benign_queries,
        embedder,
    })
}

/// Derive an attack query from a target document.
pub fn make_attack_query(doc: &Document, style: AttackStyle, seed: u64) -> Result<String> {
    let tokens: Vec<&str> = doc.text.split_whitespace().collect();
    if tokens.len() < 10 {
        return Err(Error::DocumentTooShort {
            n: tokens.len(),
            min: 10,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept: Vec<&str> = match style {
        AttackStyle::HalfDoc => tokens[..tokens.len().div_ceil(2)].to_vec(),
        AttackStyle::Masked { removed } => {
            if removed >= tokens.len() {
                return Err(Error::DocumentTooShort {
                    n: tokens.len(),
                    min: removed + 1,
                });
            }
            let mut drop = rand::seq::index::sample(&mut rng, tokens.len(), removed).into_vec();
            drop.sort_unstable();
            let mut di = 0usize;
            tokens
                .iter()
                .enumerate()
                .filter(|&(i, _)| {
                    if di < drop.len() && drop[di] == i {
                        di += 1;
                        false
                    } else {
                        true
                    }
                })
                .map(|(_, &t)| t)
                .collect()
        }
        AttackStyle::Paraphrase => {
            let keep = ((tokens.len() as f64) * 0.4).ceil() as usize;
            let mut idx = rand::seq::index::sample(&mut rng, tokens.len(), keep).into_vec();
            idx.sort_unstable();
            idx.iter().map(|&i| tokens[i]).collect()
        }
    };
    Ok(kept.join(" "))
}

/// Threshold maximizing reference accuracy under the decision rule
/// `score >= threshold => member`; candidates are midpoints of
/// consecutive sorted scores, ties resolved toward the lower threshold.
pub fn calibrate_attacker(reference: &[(f64, bool)]) -> Result<f64> {
    let members = reference.iter().filter(|&&(_, m)| m).count();
    if reference.is_empty() || members == 0 || members == reference.len() {
        return Err(Error::SingleClass);
    }
    let mut scores: Vec<f64> = reference.iter().map(|&(s, _)| s).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut candidates: Vec<f64> = scores.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    candidates.dedup();
    let mut best = (0usize, f64::NAN);
    for &t in &candidates {
        let correct = reference
            .iter()
            .filter(|&&(s, m)| (s >= t) == m)
            .count();
        // strict > keeps the lowest threshold on ties
        if best.1.is_nan() || correct > best.0 {
            best = (correct, t);
        }
    }
    Ok(best.1)
}

/// Attacker statistic for one system response.
pub fn attacker_score(
    retrieval: &crate::index::RetrievalResult,
    target_id: &str,
    target_vec: &[f32],
    store: &CorpusStore,
    mode: AttackerMode,
) -> f64 {
    let Some(best) = retrieval.hits.first() else {
        return 0.0;
    };
    let best_cos: f64 = store
        .embeddings()
        .row(best.row)
        .iter()
        .zip(target_vec)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    match mode {
        AttackerMode::MaxSim => best_cos,
        AttackerMode::ContainTopK => {
            if retrieval.contains(target_id) {
                1.0
            } else {
                best_cos.min(0.999)
            }
        }
    }
}

/// Fixed-bin histograms per query kind: all similarities pooled, and the
/// per-query maximum.
#[derive(Debug, Clone, Serialize)]
pub struct KindHistogram {
    pub pooled: Vec<u64>,
    pub s_max: Vec<u64>,
}

impl KindHistogram {
    fn new() -> Self {
        KindHistogram {
            pooled: vec![0; HIST_BINS],
            s_max: vec![0; HIST_BINS],
        }
    }
}

/// Bin index for a similarity in [-1, 1], edges every 0.02.
pub fn hist_bin(v: f64) -> usize {
    (((v + 1.0) / 0.02).floor() as isize).clamp(0, HIST_BINS as isize - 1) as usize
}

#[derive(Debug, Clone, Serialize)]
pub struct Histograms {
    pub benign: KindHistogram,
    pub member_attack: KindHistogram,
    pub non_member_attack: KindHistogram,
}

impl Histograms {
    fn kind_mut(&mut self, kind: QueryKind) -> &mut KindHistogram {
        match kind {
            QueryKind::Benign => &mut self.benign,
            QueryKind::MemberAttack => &mut self.member_attack,
            QueryKind::NonMemberAttack => &mut self.non_member_attack,
        }
    }
}

/// Everything one experiment run produces.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub detection_counts: ConfusionCounts,
    pub attacker_threshold: f64,
    pub benign_fpr: f64,
    pub second_pass_detections: usize,
    pub histograms: Histograms,
    #[serde(skip)]
    pub trials: Vec<AttackTrial>,
}

struct TrialRun {
    trial: AttackTrial,
    second_pass: bool,
}

/// Run the full pipeline: generate the world, push every query through
/// detection and (possibly disabled) defense, calibrate the attacker on
/// the reference half of the attack trials, and aggregate metrics over
/// the evaluation half. Detection metrics label member-attack queries as
/// positive and a balanced negative sample (half benign, half
/// non-member) as negative.
pub fn run_experiment(
    spec: &SyntheticSpec,
    style: AttackStyle,
    config: &DefenseConfig,
    mode: AttackerMode,
    counts: &TrialCounts,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let world = generate_corpus(spec, counts.benign)?;
    let store = &world.store;
    let benign_negatives = counts.member.div_ceil(2);
    let non_member_negatives = counts.member / 2;
    if counts.benign < benign_negatives || counts.non_member < non_member_negatives {
        return Err(Error::Config(format!(
            "balanced detection evaluation needs benign >= {benign_negatives} and non_member >= {non_member_negatives}"
        )));
    }
    if counts.member > store.len() {
        return Err(Error::Config(format!(
            "member trials ({}) exceed member documents ({})",
            counts.member,
            store.len()
        )));
    }
    if counts.non_member > world.non_members.len() {
        return Err(Error::Config(format!(
            "non-member trials ({}) exceed held-out documents ({})",
            counts.non_member,
            world.non_members.len()
        )));
    }

    let mut pick_rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x7261_6e64));
    let member_targets = rand::seq::index::sample(&mut pick_rng, store.len(), counts.member);
    let non_member_targets =
        rand::seq::index::sample(&mut pick_rng, world.non_members.len(), counts.non_member);

    let mut histograms = Histograms {
        benign: KindHistogram::new(),
        member_attack: KindHistogram::new(),
        non_member_attack: KindHistogram::new(),
    };
    let mut second_pass_detections = 0usize;
    let generator = TemplateGenerator;
    let mut retrieval_gold: Vec<(crate::index::RetrievalResult, String)> = Vec::new();
    let mut answers: Vec<(String, Vec<String>)> = Vec::new();

    let mut run_one = |kind: QueryKind,
                       query_text: String,
                       target: Option<(&str, &[f32])>,
                       histograms: &mut Histograms|
     -> Result<TrialRun> {
        let qvec = world.embedder.embed_one(&query_text)?;
        let scores = score_all(store, &qvec)?;
        let (retrieval, detection, second_pass) = defended_from_scores(store, &scores, config)?;
        let hist = histograms.kind_mut(kind);
        for &s in scores.scores() {
            hist.pooled[hist_bin(f64::from(s))] += 1;
        }
        hist.s_max[hist_bin(detection.profile.s_max)] += 1;
        let (target_id, attacker_score_v) = match target {
            Some((id, vec)) => (
                Some(id.to_string()),
                attacker_score(&retrieval, id, vec, store, mode),
            ),
            None => (None, 0.0),
        };
        if kind == QueryKind::Benign {
            // utility bookkeeping: gold is the undefended top-1 document
            let gold_id = detection.profile.argmax_id.clone();
            let gold_doc = store.get(&gold_id).expect("argmax id resolves");
            let toks: Vec<&str> = gold_doc.text.split_whitespace().collect();
            let mid = toks.len() / 2;
            let gold_phrase = toks[mid..(mid + 5).min(toks.len())].join(" ");
            let prompt = assemble_prompt(&query_text, &retrieval, store)?;
            answers.push((generator.generate(&prompt), vec![gold_phrase]));
            retrieval_gold.push((retrieval.clone(), gold_id));
        }
        Ok(TrialRun {
            trial: AttackTrial {
                kind,
                query_text,
                target_id,
                attacker_score: attacker_score_v,
                attacker_decision: false, // filled after calibration
                detection,
            },
            second_pass,
        })
    };

    let mut member_trials = Vec::with_capacity(counts.member);
    for (i, row) in member_targets.into_iter().enumerate() {
        let doc = store.document(row);
        let qseed = splitmix64(spec.seed ^ (1u64 << 56) ^ (i as u64));
        let text = make_attack_query(doc, style, qseed)?;
        let target_vec = store.embeddings().row(row).to_vec();
        let id = doc.id.clone();
        member_trials.push(run_one(
            QueryKind::MemberAttack,
            text,
            Some((&id, &target_vec)),
            &mut histograms,
        )?);
    }
    let mut non_member_trials = Vec::with_capacity(counts.non_member);
    for (i, di) in non_member_targets.into_iter().enumerate() {
        let doc = &world.non_members[di];
        let qseed = splitmix64(spec.seed ^ (2u64 << 56) ^ (i as u64));
        let text = make_attack_query(doc, style, qseed)?;
        let target_vec = world.embedder.embed_one(&doc.text)?;
        non_member_trials.push(run_one(
            QueryKind::NonMemberAttack,
            text,
            Some((&doc.id, &target_vec)),
            &mut histograms,
        )?);
    }
    let mut benign_trials = Vec::with_capacity(counts.benign);
    for q in &world.benign_queries {
        benign_trials.push(run_one(QueryKind::Benign, q.clone(), None, &mut histograms)?);
    }

    // attacker: 5:5 reference / evaluation split within each class
    let reference: Vec<(f64, bool)> = member_trials[..counts.member / 2]
        .iter()
        .map(|t| (t.trial.attacker_score, true))
        .chain(
            non_member_trials[..counts.non_member / 2]
                .iter()
                .map(|t| (t.trial.attacker_score, false)),
        )
        .collect();
    let threshold = calibrate_attacker(&reference)?;
    for t in member_trials.iter_mut().chain(non_member_trials.iter_mut()) {
        t.trial.attacker_decision = t.trial.attacker_score >= threshold;
    }

    let mut attack_counts = ConfusionCounts::default();
    let mut member_eval_scores = Vec::new();
    let mut non_member_eval_scores = Vec::new();
    for t in &member_trials[counts.member / 2..] {
        attack_counts.record(t.trial.attacker_decision, true);
        member_eval_scores.push(t.trial.attacker_score);
    }
    for t in &non_member_trials[counts.non_member / 2..] {
        attack_counts.record(t.trial.attacker_decision, false);
        non_member_eval_scores.push(t.trial.attacker_score);
    }
    let adjusted = adjusted_attack_accuracy(&attack_counts)?;
    let ks = ks_two_sample(&member_eval_scores, &non_member_eval_scores)?;

    // balanced detection evaluation: member trials positive, half benign
    // plus half non-member negative
    let mut detection_counts = ConfusionCounts::default();
    for t in &member_trials {
        detection_counts.record(t.trial.detection.detected, true);
    }
    for t in &benign_trials[..benign_negatives] {
        detection_counts.record(t.trial.detection.detected, false);
    }
    for t in &non_member_trials[..non_member_negatives] {
        detection_counts.record(t.trial.detection.detected, false);
    }

    let benign_fpr = benign_trials
        .iter()
        .filter(|t| t.trial.detection.detected)
        .count() as f64
        / counts.benign.max(1) as f64;

    let mut report = classification_metrics(&detection_counts)?;
    report.adjusted_accuracy = adjusted;
    report.ks = Some(ks);
    report.r_at_k = Some(recall_at_k(&retrieval_gold)?);
    report.em = Some(em_containment(&answers)?);

    let mut trials = Vec::with_capacity(counts.member + counts.non_member + counts.benign);
    for t in member_trials
        .into_iter()
        .chain(non_member_trials)
        .chain(benign_trials)
    {
        second_pass_detections += usize::from(t.second_pass);
        trials.push(t.trial);
    }

    Ok(ExperimentOutcome {
        report,
        detection_counts,
        attacker_threshold: threshold,
        benign_fpr,
        second_pass_detections,
        histograms,
        trials,
    })
}
