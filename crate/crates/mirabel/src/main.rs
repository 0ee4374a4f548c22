//! Command-line front end: corpus ingestion and embedding, single-query
//! detection, synthetic experiments, histogram export, and scan benchmarks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mirabel::attacksim::{
    run_experiment, AttackStyle, AttackerMode, Histograms, KindHistogram, HIST_BINS,
};
use mirabel::config::{ConfigFile, RunConfig};
use mirabel::corpus::{
    ingest_jsonl, load_embeddings, save_embeddings, CorpusStore, EmbeddingProvider, HashEmbedder,
    RemoteEmbedder,
};
use mirabel::defense::{defended_from_scores, DefenseConfig};
use mirabel::detector::{detect_scores, ThresholdVariant};
use mirabel::error::{Error, Result};
use mirabel::index::{score_all, top_k};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "mirabel", about = "Membership-probe detection and defense for RAG retrieval", version)]
struct Cli {
    /// Cap internal parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a JSONL corpus into a binary embedding file plus manifest.
    Ingest(IngestArgs),
    /// Run detection for one query against a stored corpus.
    Detect(DetectArgs),
    /// Run the synthetic end-to-end experiment and export metrics.
    Simulate(SimulateArgs),
    /// Benchmark plain top-k against detect-and-hide.
    Bench(BenchArgs),
    /// Probe the remote embedding service.
    EmbedServeCheck(EmbedServeCheckArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Corpus JSONL: one {"id", "text"} object per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Output embedding file; a .manifest.json sibling is written too.
    #[arg(long)]
    out: PathBuf,
    /// Embedding provider: "hash" (offline) or "remote".
    #[arg(long, default_value = "hash")]
    provider: String,
    /// Embedding dimension (power of two >= 64 for the hash provider).
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    /// Seed for the hash provider.
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
    /// Remote endpoint; defaults to $MIRABEL_EMBED_ENDPOINT.
    #[arg(long, env = "MIRABEL_EMBED_ENDPOINT")]
    endpoint: Option<String>,
    /// Remote request timeout in seconds.
    #[arg(long, default_value_t = 10)]
    timeout: u64,
    /// Remote retry count for transport errors and 5xx responses.
    #[arg(long, default_value_t = 2)]
    retries: usize,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding file produced by `ingest` (hash provider).
    #[arg(long)]
    embeddings: PathBuf,
    /// Query text, embedded with the same hash parameters as `ingest`.
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    #[arg(long, default_value = "alg1")]
    variant: ThresholdVariant,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics.json, trials.jsonl, and histograms.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    variant: Option<ThresholdVariant>,
    /// Disable the detect-and-hide defense (plain RAG baseline).
    #[arg(long)]
    no_defense: bool,
    /// Attack style: halfdoc, masked, paraphrase.
    #[arg(long)]
    style: Option<AttackStyle>,
    /// Attacker mode: maxsim, containtopk.
    #[arg(long)]
    attacker_mode: Option<AttackerMode>,
    #[arg(long)]
    member_trials: Option<usize>,
    #[arg(long)]
    non_member_trials: Option<usize>,
    #[arg(long)]
    benign_trials: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Optional corpus + embeddings to benchmark against.
    #[arg(long, requires = "embeddings")]
    corpus: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    embeddings: Option<PathBuf>,
    /// Synthetic store size when no files are given.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Number of timed queries.
    #[arg(long, default_value_t = 50)]
    queries: usize,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    #[arg(long, default_value_t = 3)]
    k: usize,
}

#[derive(Args)]
struct EmbedServeCheckArgs {
    #[arg(long, env = "MIRABEL_EMBED_ENDPOINT")]
    endpoint: String,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    timeout: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        // ignore failure if a pool already exists (e.g. repeated init in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::EmbedServeCheck(a) => cmd_embed_serve_check(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Write atomically: temp file in the target directory, then rename.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.as_file().write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

#[derive(Serialize)]
struct Manifest {
    schema_version: u32,
    documents: usize,
    dim: usize,
    provider: String,
    seed: Option<u64>,
    normalized: bool,
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let docs = ingest_jsonl(&a.corpus)?;
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let (matrix, seed) = match a.provider.as_str() {
        "hash" => {
            let e = HashEmbedder::new(a.dim, a.hash_seed)?;
            (e.embed(&texts)?, Some(a.hash_seed))
        }
        "remote" => {
            let endpoint = a.endpoint.ok_or_else(|| {
                Error::Config("remote provider needs --endpoint or MIRABEL_EMBED_ENDPOINT".into())
            })?;
            let e = RemoteEmbedder::new(endpoint, a.dim, Duration::from_secs(a.timeout), a.retries)?;
            (e.embed(&texts)?, None)
        }
        other => return Err(Error::Config(format!("unknown provider `{other}`"))),
    };
    // embeddings go through a temp file as well: no partial output on failure
    let tmp_dir = a.out.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&tmp_dir).map_err(|e| Error::io(&tmp_dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(&tmp_dir).map_err(|e| Error::io(&tmp_dir, e))?;
    save_embeddings(&matrix, tmp.path())?;
    tmp.persist(&a.out).map_err(|e| Error::io(&a.out, e.error))?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        documents: docs.len(),
        dim: matrix.dim(),
        provider: a.provider,
        seed,
        normalized: matrix.is_normalized(),
    };
    let manifest_path = a.out.with_extension("manifest.json");
    write_json(&manifest_path, &manifest)?;
    println!(
        "ingested {} documents at dim {} -> {}",
        docs.len(),
        matrix.dim(),
        a.out.display()
    );
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let docs = ingest_jsonl(&a.corpus)?;
    let matrix = load_embeddings(&a.embeddings)?;
    let store = CorpusStore::new(docs, matrix)?;
    let embedder = HashEmbedder::new(store.dim(), a.hash_seed)?;
    let qvec = embedder.embed_one(&a.query)?;
    let scores = score_all(&store, &qvec)?;
    let outcome = detect_scores(&scores, &store, a.rho, a.variant)?;
    #[derive(Serialize)]
    struct Out<'a> {
        schema_version: u32,
        #[serde(flatten)]
        outcome: &'a mirabel::detector::DetectionOutcome,
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&Out {
            schema_version: SCHEMA_VERSION,
            outcome: &outcome
        })
        .expect("serializable")
    );
    Ok(())
}

fn histogram_csv(h: &Histograms, field: impl Fn(&KindHistogram) -> &[u64]) -> String {
    let mut out = String::from("kind,bin_lo,bin_hi,count\n");
    for (kind, kh) in [
        ("benign", &h.benign),
        ("member_attack", &h.member_attack),
        ("non_member_attack", &h.non_member_attack),
    ] {
        for (i, &c) in field(kh).iter().enumerate() {
            debug_assert!(i < HIST_BINS);
            let lo = -1.0 + 0.02 * i as f64;
            out.push_str(&format!("{kind},{lo:.2},{:.2},{c}\n", lo + 0.02));
        }
    }
    out
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut cfg = RunConfig::with_file(&file)?;
    if let Some(s) = a.seed {
        cfg.spec.seed = s;
    }
    if let Some(r) = a.rho {
        cfg.defense.rho = r;
    }
    if let Some(k) = a.k {
        cfg.defense.k = k;
    }
    if let Some(v) = a.variant {
        cfg.defense.variant = v;
    }
    if a.no_defense {
        cfg.defense.enabled = false;
    }
    if let Some(s) = a.style {
        cfg.style = s;
    }
    if let Some(m) = a.attacker_mode {
        cfg.mode = m;
    }
    if let Some(n) = a.member_trials {
        cfg.counts.member = n;
    }
    if let Some(n) = a.non_member_trials {
        cfg.counts.non_member = n;
    }
    if let Some(n) = a.benign_trials {
        cfg.counts.benign = n;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    cfg.validate()?;

    let outcome = run_experiment(&cfg.spec, cfg.style, &cfg.defense, cfg.mode, &cfg.counts)?;

    #[derive(Serialize)]
    struct MetricsDoc<'a> {
        schema_version: u32,
        spec: &'a mirabel::attacksim::SyntheticSpec,
        defense: &'a DefenseConfig,
        style: AttackStyle,
        attacker_mode: AttackerMode,
        report: &'a mirabel::stats::MetricsReport,
        detection_counts: &'a mirabel::stats::ConfusionCounts,
        attacker_threshold: f64,
        benign_fpr: f64,
        second_pass_detections: usize,
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_json(
        &cfg.out_dir.join("metrics.json"),
        &MetricsDoc {
            schema_version: SCHEMA_VERSION,
            spec: &cfg.spec,
            defense: &cfg.defense,
            style: cfg.style,
            attacker_mode: cfg.mode,
            report: &outcome.report,
            detection_counts: &outcome.detection_counts,
            attacker_threshold: outcome.attacker_threshold,
            benign_fpr: outcome.benign_fpr,
            second_pass_detections: outcome.second_pass_detections,
        },
    )?;

    #[derive(Serialize)]
    struct TrialLine<'a> {
        schema_version: u32,
        #[serde(flatten)]
        trial: &'a mirabel::attacksim::AttackTrial,
    }
    let mut jsonl = Vec::new();
    for trial in &outcome.trials {
        serde_json::to_writer(
            &mut jsonl,
            &TrialLine {
                schema_version: SCHEMA_VERSION,
                trial,
            },
        )
        .expect("serializable");
        jsonl.push(b'\n');
    }
    atomic_write(&cfg.out_dir.join("trials.jsonl"), &jsonl)?;
    atomic_write(
        &cfg.out_dir.join("histogram_pooled.csv"),
        histogram_csv(&outcome.histograms, |k| &k.pooled).as_bytes(),
    )?;
    atomic_write(
        &cfg.out_dir.join("histogram_smax.csv"),
        histogram_csv(&outcome.histograms, |k| &k.s_max).as_bytes(),
    )?;

    println!(
        "adjusted_attack_accuracy={:.4} detection_recall={:.4} ks={:.4} -> {}",
        outcome.report.adjusted_accuracy,
        outcome.report.recall,
        outcome.report.ks.unwrap_or(f64::NAN),
        cfg.out_dir.join("metrics.json").display()
    );
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let store = match (&a.corpus, &a.embeddings) {
        (Some(c), Some(e)) => CorpusStore::new(ingest_jsonl(c)?, load_embeddings(e)?)?,
        _ => {
            // synthetic random unit vectors
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let docs = (0..a.n)
                .map(|i| mirabel::corpus::Document::new(format!("d{i}"), format!("doc {i}")))
                .collect();
            let mut data = vec![0.0f32; a.n * a.dim];
            for row in data.chunks_mut(a.dim) {
                for v in row.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                let norm = (row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>()).sqrt() as f32;
                row.iter_mut().for_each(|v| *v /= norm);
            }
            CorpusStore::new(docs, mirabel::corpus::EmbeddingMatrix::new(a.dim, data)?)?
        }
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let queries: Vec<Vec<f32>> = (0..a.queries.max(1))
        .map(|_| {
            let row = store.embeddings().row(rng.random_range(0..store.len()));
            row.to_vec()
        })
        .collect();
    let config = DefenseConfig {
        rho: a.rho,
        k: a.k,
        ..DefenseConfig::default()
    };

    // warm-up
    for q in queries.iter().take(3) {
        let s = score_all(&store, q)?;
        let _ = top_k(&s, &store, a.k, &[]);
        let _ = defended_from_scores(&store, &s, &config)?;
    }
    let mut plain = Vec::with_capacity(queries.len());
    let mut defended = Vec::with_capacity(queries.len());
    for q in &queries {
        let t0 = Instant::now();
        let s = score_all(&store, q)?;
        let _ = top_k(&s, &store, a.k, &[]);
        plain.push(t0.elapsed().as_secs_f64() * 1e3);

        let t1 = Instant::now();
        let s = score_all(&store, q)?;
        let _ = defended_from_scores(&store, &s, &config)?;
        defended.push(t1.elapsed().as_secs_f64() * 1e3);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (pm, dm) = (mean(&plain), mean(&defended));
    println!(
        "n={} dim={} queries={}\nplain top-k:      mean {:.4} ms, median {:.4} ms\ndetect-and-hide:  mean {:.4} ms, median {:.4} ms\noverhead ratio:   {:.3}",
        store.len(),
        store.dim(),
        queries.len(),
        pm,
        median(plain),
        dm,
        median(defended),
        dm / pm
    );
    Ok(())
}

fn cmd_embed_serve_check(a: EmbedServeCheckArgs) -> Result<()> {
    let e = RemoteEmbedder::new(a.endpoint, a.dim, Duration::from_secs(a.timeout), 0)?;
    let m = e.embed(&["probe one", "probe two"])?;
    println!(
        "embedding service ok: endpoint {}, dim {}, {} vectors, normalized={}",
        e.endpoint(),
        m.dim(),
        m.count(),
        m.is_normalized()
    );
    Ok(())
}
