//! Batch pipeline driver. Each subcommand reads one config file, loads
//! whatever upstream artifacts it needs, writes its own artifact under the
//! configured output directory and drops a `.manifest.json` sidecar beside
//! it (config hash, stage seed, input digests) so reruns can be diffed
//! byte-for-byte.
//!
//! Stage order: `preprocess` → `sample` → `train` → `recommend` →
//! `evaluate` / `audit`; `pipeline` runs all six. `synth` generates a
//! self-contained toy dataset plus a ready-to-run config for it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use clap::{Args, Parser, Subcommand};

use pathrec::config::{RunConfig, SEED_MODEL};
use pathrec::decode::{self, RecommendationList};
use pathrec::ingest::{
    self, chrono_split, graph_with_train, load_interactions, write_interactions, NameSplit,
    SplitDataset,
};
use pathrec::kg::GraphSource;
use pathrec::manifest::Manifest;
use pathrec::metrics::{self, EvalContext};
use pathrec::model::{checkpoint, train as training, Model};
use pathrec::sampler;
use pathrec::synth::{self, SynthConfig};
use pathrec::{EntityId, Error, KnowledgeGraph, Result, Vocabulary};

#[derive(Debug, Parser)]
#[command(
    name = "pathrec",
    version,
    about = "Path-based product recommendation over a knowledge graph",
    after_help = "Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter the raw dataset to a fixed point and split it chronologically
    Preprocess(StageArgs),
    /// Sample user-centric paths from the training graph
    Sample(StageArgs),
    /// Train the causal language model on the sampled paths
    Train(StageArgs),
    /// Decode ranked recommendation paths for every user
    Recommend(DecodeArgs),
    /// Score the recommendations against the held-out interactions
    Evaluate(StageArgs),
    /// Check every recommended path against the graph, hop by hop
    Audit(StageArgs),
    /// Run all six stages in order
    Pipeline(DecodeArgs),
    /// Generate a synthetic dataset and a config file pointing at it
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Run configuration file (INI-style; PATHREC_<SECTION>_<KEY>
    /// environment variables override individual keys)
    #[arg(long, short)]
    pub config: PathBuf,

    /// Worker cap for stages that can parallelize; 0 = available cores
    #[arg(long)]
    pub threads: Option<usize>,

    /// Force reproducible mode
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub stage: StageArgs,

    /// Decode without the graph constraint (ablation; paths may be invalid)
    #[arg(long = "no-graph-constraint")]
    pub no_graph_constraint: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for the generated dataset and config
    #[arg(long, short)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 30)]
    pub users: usize,

    #[arg(long, default_value_t = 60)]
    pub products: usize,

    #[arg(long, default_value_t = 6)]
    pub genres: usize,

    #[arg(long, default_value_t = 80)]
    pub contributors: usize,

    #[arg(long, default_value_t = 3)]
    pub contributors_per_product: usize,

    #[arg(long, default_value_t = 8)]
    pub interactions_per_user: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Skip the planted per-user preference structure
    #[arg(long)]
    pub no_planted: bool,
}

/// Parse the process arguments, run the selected subcommand and map the
/// outcome to an exit code (0 ok, 1 usage/config, 2 data, 3 numeric).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            i32::from(e.exit_class())
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => run_preprocess(&load_config(&a)?),
        Command::Sample(a) => run_sample(&load_config(&a)?),
        Command::Train(a) => run_train(&load_config(&a)?),
        Command::Recommend(a) => run_recommend(&decode_config(&a)?),
        Command::Evaluate(a) => run_evaluate(&load_config(&a)?),
        Command::Audit(a) => run_audit(&load_config(&a)?),
        Command::Pipeline(a) => run_pipeline(&decode_config(&a)?),
        Command::Synth(a) => run_synth(&a),
    }
}

fn load_config(args: &StageArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn decode_config(args: &DecodeArgs) -> Result<RunConfig> {
    let mut cfg = load_config(&args.stage)?;
    if args.no_graph_constraint {
        cfg.decode.constrained = false;
    }
    Ok(cfg)
}

/// Fixed artifact layout under the configured output directory.
pub struct Artifacts {
    pub pre_dir: PathBuf,
    pub triplets: PathBuf,
    pub entity_types: PathBuf,
    pub relations: PathBuf,
    pub interactions: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub stats: PathBuf,
    pub paths: PathBuf,
    pub coverage: PathBuf,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub recommendations: PathBuf,
    pub metrics: PathBuf,
    pub faithfulness: PathBuf,
}

impl Artifacts {
    pub fn new(out_dir: &FsPath) -> Artifacts {
        let pre_dir = out_dir.join("preprocessed");
        Artifacts {
            triplets: pre_dir.join("triplets.tsv"),
            entity_types: pre_dir.join("entity_types.tsv"),
            relations: pre_dir.join("relations.tsv"),
            interactions: pre_dir.join("interactions.tsv"),
            train: pre_dir.join("train.tsv"),
            valid: pre_dir.join("valid.tsv"),
            test: pre_dir.join("test.tsv"),
            stats: pre_dir.join("stats.tsv"),
            pre_dir,
            paths: out_dir.join("paths.tsv"),
            coverage: out_dir.join("coverage.tsv"),
            vocab: out_dir.join("vocab.tsv"),
            checkpoint: out_dir.join("model.ckpt"),
            train_log: out_dir.join("train_log.tsv"),
            recommendations: out_dir.join("recommendations.tsv"),
            metrics: out_dir.join("metrics.tsv"),
            faithfulness: out_dir.join("faithfulness.tsv"),
        }
    }
}

/// Write the sidecar manifest for one artifact: effective config hash,
/// stage seed, plus hashed file inputs and precomputed digests.
fn emit_manifest(
    stage: &str,
    artifact: &FsPath,
    cfg: &RunConfig,
    seed: u64,
    file_inputs: &[(&str, &FsPath)],
    digests: &[(&str, &str)],
) -> Result<()> {
    let mut m = Manifest::new(stage, artifact, &cfg.canonical_text(), seed);
    for (label, path) in file_inputs {
        m.add_input(label, path)?;
    }
    for (label, digest) in digests {
        m.add_digest(label, digest);
    }
    m.write_beside(artifact)?;
    Ok(())
}

/// Load the preprocessed graph source and split, failing with a pointer to
/// `preprocess` when any piece is missing.
fn load_preprocessed(art: &Artifacts) -> Result<(GraphSource, NameSplit)> {
    for file in [
        &art.triplets,
        &art.entity_types,
        &art.relations,
        &art.train,
        &art.valid,
        &art.test,
    ] {
        if !file.is_file() {
            return Err(Error::MissingArtifact {
                path: file.display().to_string(),
                hint: "run `preprocess` first".into(),
            });
        }
    }
    let source = GraphSource::load(&art.triplets, &art.entity_types, &art.relations)?;
    let split = NameSplit {
        train: load_interactions(&art.train)?,
        valid: load_interactions(&art.valid)?,
        test: load_interactions(&art.test)?,
    };
    Ok((source, split))
}

/// Build the training graph (train interactions injected as feedback
/// edges) and its token vocabulary.
fn graph_and_vocab(
    cfg: &RunConfig,
    source: &GraphSource,
    split: &NameSplit,
) -> Result<(KnowledgeGraph, Vocabulary)> {
    let with_train = graph_with_train(source, &split.train, &cfg.data.interaction_relation);
    let kg = with_train.build(&cfg.data.interaction_relation)?;
    let vocab = Vocabulary::build(&kg)?;
    Ok((kg, vocab))
}

fn require(path: &FsPath, producer: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.display().to_string(),
            hint: format!("run `{producer}` to produce it"),
        })
    }
}

pub fn run_preprocess(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.data.out_dir);
    let raw = load_interactions(&cfg.data.interactions)?;
    let source = GraphSource::load(
        &cfg.data.triplets,
        &cfg.data.entity_types,
        &cfg.data.relations,
    )?;
    let (filtered, kept) = ingest::preprocess(
        &raw,
        &source,
        &cfg.preprocess,
        &cfg.data.interaction_relation,
    )?;
    let split = chrono_split(&filtered, cfg.ratios)?;

    fs::create_dir_all(&art.pre_dir)?;
    kept.write(&art.triplets, &art.entity_types, &art.relations)?;
    write_interactions(&art.interactions, &filtered)?;
    write_interactions(&art.train, &split.train)?;
    write_interactions(&art.valid, &split.valid)?;
    write_interactions(&art.test, &split.test)?;
    let mut stats = ingest::stats_report(&kept, &filtered);
    writeln!(stats, "train\t{}", split.train.len()).expect("string write");
    writeln!(stats, "valid\t{}", split.valid.len()).expect("string write");
    writeln!(stats, "test\t{}", split.test.len()).expect("string write");
    fs::write(&art.stats, &stats)?;

    let inputs: [(&str, &FsPath); 4] = [
        ("triplets", &cfg.data.triplets),
        ("entity_types", &cfg.data.entity_types),
        ("relations", &cfg.data.relations),
        ("interactions", &cfg.data.interactions),
    ];
    for artifact in [
        &art.triplets,
        &art.entity_types,
        &art.relations,
        &art.interactions,
        &art.train,
        &art.valid,
        &art.test,
        &art.stats,
    ] {
        emit_manifest("preprocess", artifact, cfg, cfg.seed, &inputs, &[])?;
    }
    println!(
        "[preprocess] kept {} interactions and {} triplets ({} entities); split {}/{}/{} -> {}",
        filtered.len(),
        kept.triplets.len(),
        kept.entity_types.len(),
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        art.pre_dir.display()
    );
    Ok(())
}

pub fn run_sample(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.data.out_dir);
    let (source, split) = load_preprocessed(&art)?;
    let (kg, _) = graph_and_vocab(cfg, &source, &split)?;
    let bound = SplitDataset::bind(&split, &kg)?;
    let by_user = SplitDataset::products_by_user(&bound.train, &kg);

    let ds = sampler::sample_paths(&kg, &by_user, &cfg.sampler)?;
    sampler::write_paths(&art.paths, &ds, &kg)?;
    let coverage = sampler::coverage_report(&ds, &bound.train, &kg)?;
    fs::write(&art.coverage, &coverage)?;

    let inputs: [(&str, &FsPath); 4] = [
        ("triplets", &art.triplets),
        ("entity_types", &art.entity_types),
        ("relations", &art.relations),
        ("train", &art.train),
    ];
    let digests = [("graph", kg.index_digest())];
    let digest_refs: Vec<(&str, &str)> =
        digests.iter().map(|(l, d)| (*l, d.as_str())).collect();
    for artifact in [&art.paths, &art.coverage] {
        emit_manifest("sample", artifact, cfg, cfg.sampler.seed, &inputs, &digest_refs)?;
    }
    println!(
        "[sample] {} unique {}-hop paths for {} users ({} skipped) -> {}",
        ds.len(),
        cfg.sampler.hops,
        ds.per_user.iter().filter(|&&c| c > 0).count(),
        ds.skipped_users.len(),
        art.paths.display()
    );
    Ok(())
}

pub fn run_train(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.data.out_dir);
    let (source, split) = load_preprocessed(&art)?;
    let (kg, vocab) = graph_and_vocab(cfg, &source, &split)?;
    require(&art.paths, "sample")?;
    let paths = sampler::read_paths(&art.paths, &kg)?;
    if paths.is_empty() {
        return Err(Error::EmptyInput("path file"));
    }
    let seqs = paths
        .iter()
        .map(|p| vocab.encode(p))
        .collect::<Result<Vec<_>>>()?;

    let mcfg = cfg
        .model
        .build(cfg.sampler.hops, vocab.size(), cfg.stage_seed(SEED_MODEL))?;
    let mut model = Model::new(mcfg)?;
    let report = training::train(&mut model, &seqs, &cfg.train)?;

    vocab.save(&art.vocab)?;
    checkpoint::save(&model, &vocab.digest(), &art.checkpoint)?;
    let mut log = String::from("# step\tloss\n");
    for (step, loss) in report.losses.iter().enumerate() {
        writeln!(log, "{step}\t{loss}").expect("string write");
    }
    fs::write(&art.train_log, &log)?;

    let inputs: [(&str, &FsPath); 1] = [("paths", &art.paths)];
    let graph_digest = kg.index_digest();
    let vocab_digest = vocab.digest();
    let digests: [(&str, &str); 2] =
        [("graph", graph_digest.as_str()), ("vocabulary", vocab_digest.as_str())];
    for artifact in [&art.checkpoint, &art.train_log, &art.vocab] {
        emit_manifest("train", artifact, cfg, cfg.train.seed, &inputs, &digests)?;
    }
    // Teacher-forced accuracy on a fixed slice, as a cheap learning signal.
    let probe = &seqs[..seqs.len().min(512)];
    let accuracy = training::next_token_accuracy(&model, probe)?;
    println!(
        "[train] {} steps over {} sequences; final loss {:.4}, next-token accuracy {:.3} -> {}",
        cfg.train.steps,
        seqs.len(),
        report.final_loss,
        accuracy,
        art.checkpoint.display()
    );
    Ok(())
}

pub fn run_recommend(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.data.out_dir);
    let (source, split) = load_preprocessed(&art)?;
    let (kg, vocab) = graph_and_vocab(cfg, &source, &split)?;
    require(&art.checkpoint, "train")?;
    let model = checkpoint::load(&art.checkpoint, &vocab.digest())?;

    let bound = SplitDataset::bind(&split, &kg)?;
    let by_user = SplitDataset::products_by_user(&bound.train, &kg);
    let mut lists: Vec<RecommendationList> = Vec::new();
    for user in kg.users() {
        let products: BTreeSet<EntityId> = by_user[user.idx()].iter().copied().collect();
        if products.is_empty() {
            continue; // no feedback edges, so no (user, r_f, ...) prompt
        }
        lists.push(decode::recommend(&model, &kg, &vocab, user, &products, &cfg.decode)?);
    }
    decode::write_recommendations(&lists, &kg, &vocab, &art.recommendations)?;

    let inputs: [(&str, &FsPath); 2] = [("model", &art.checkpoint), ("train", &art.train)];
    let graph_digest = kg.index_digest();
    let vocab_digest = vocab.digest();
    let digests: [(&str, &str); 2] =
        [("graph", graph_digest.as_str()), ("vocabulary", vocab_digest.as_str())];
    emit_manifest(
        "recommend",
        &art.recommendations,
        cfg,
        cfg.decode.seed,
        &inputs,
        &digests,
    )?;
    let items: usize = lists.iter().map(|l| l.items.len()).sum();
    let short = lists.iter().filter(|l| l.incomplete).count();
    println!(
        "[recommend] {} ranked paths across {} users ({} short lists, constraint {}) -> {}",
        items,
        lists.len(),
        short,
        if cfg.decode.constrained { "on" } else { "off" },
        art.recommendations.display()
    );
    Ok(())
}

pub fn run_evaluate(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.data.out_dir);
    let (source, split) = load_preprocessed(&art)?;
    let (kg, vocab) = graph_and_vocab(cfg, &source, &split)?;
    require(&art.recommendations, "recommend")?;
    let lists = decode::read_recommendations(&art.recommendations, &kg, &vocab)?;

    let bound = SplitDataset::bind(&split, &kg)?;
    let mut ranked_by_user: BTreeMap<EntityId, Vec<EntityId>> = BTreeMap::new();
    for list in &lists {
        // Terminals that are not products (possible only without the graph
        // constraint) cannot be recommendations.
        let ranked: Vec<EntityId> = list
            .items
            .iter()
            .filter_map(|item| vocab.entity_of(item.terminal))
            .filter(|&e| kg.is_product(e))
            .collect();
        ranked_by_user.insert(list.user, ranked);
    }
    // Every user with train feedback is on the hook, decoded list or not.
    let by_user = SplitDataset::products_by_user(&bound.train, &kg);
    let recs: Vec<(EntityId, Vec<EntityId>)> = kg
        .users()
        .filter(|u| !by_user[u.idx()].is_empty())
        .map(|u| (u, ranked_by_user.get(&u).cloned().unwrap_or_default()))
        .collect();

    let mut relevant: BTreeMap<EntityId, BTreeSet<EntityId>> = BTreeMap::new();
    for it in &bound.test {
        relevant.entry(it.user).or_default().insert(it.product);
    }
    let genres = match &cfg.data.genre_relation {
        Some(name) => {
            let r = kg
                .relation_id(name)
                .ok_or_else(|| Error::UnknownRelation(name.clone()))?;
            Some(metrics::genre_index(&kg, r))
        }
        None => None,
    };
    let train_users: BTreeSet<EntityId> = bound.train.iter().map(|it| it.user).collect();
    let ctx = EvalContext {
        k: cfg.k,
        relevant,
        popularity: metrics::popularity_counts(&bound.train),
        catalogue_size: kg.n_products(),
        genres,
        novelty_by_user_count: cfg.novelty_by_user_count.then_some(train_users.len()),
    };
    let report = metrics::evaluate(&recs, &ctx);
    fs::write(&art.metrics, report.key_values())?;

    let inputs: [(&str, &FsPath); 3] = [
        ("recommendations", &art.recommendations),
        ("train", &art.train),
        ("test", &art.test),
    ];
    let graph_digest = kg.index_digest();
    let digests: [(&str, &str); 1] = [("graph", graph_digest.as_str())];
    emit_manifest("evaluate", &art.metrics, cfg, cfg.seed, &inputs, &digests)?;
    println!("[evaluate] -> {}", art.metrics.display());
    print!("{}", report.table());
    Ok(())
}

pub fn run_audit(cfg: &RunConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.data.out_dir);
    let (source, split) = load_preprocessed(&art)?;
    let (kg, vocab) = graph_and_vocab(cfg, &source, &split)?;
    require(&art.recommendations, "recommend")?;
    let lists = decode::read_recommendations(&art.recommendations, &kg, &vocab)?;

    let paths: Vec<Option<pathrec::Path>> = lists
        .iter()
        .flat_map(|l| l.items.iter().map(|item| item.path.clone()))
        .collect();
    let report = metrics::audit_faithfulness(&paths, cfg.decode.hops, &kg);
    fs::write(&art.faithfulness, report.key_values())?;

    let inputs: [(&str, &FsPath); 1] = [("recommendations", &art.recommendations)];
    let graph_digest = kg.index_digest();
    let digests: [(&str, &str); 1] = [("graph", graph_digest.as_str())];
    emit_manifest("audit", &art.faithfulness, cfg, cfg.seed, &inputs, &digests)?;
    println!("[audit] -> {}", art.faithfulness.display());
    print!("{}", report.table());
    Ok(())
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<()> {
    run_preprocess(cfg)?;
    run_sample(cfg)?;
    run_train(cfg)?;
    run_recommend(cfg)?;
    run_evaluate(cfg)?;
    run_audit(cfg)
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let scfg = SynthConfig {
        n_users: args.users,
        n_products: args.products,
        n_genres: args.genres,
        n_contributors: args.contributors,
        contributors_per_product: args.contributors_per_product,
        interactions_per_user: args.interactions_per_user,
        planted: !args.no_planted,
        seed: args.seed,
    };
    let data = synth::generate(&scfg)?;
    let paths = data.write(&args.out)?;

    let config_path = args.out.join("config.ini");
    let config_text = synth_config_text(&args.out, args.seed);
    fs::write(&config_path, &config_text)?;

    // The generator has no file inputs; its manifest hashes the parameters.
    let params = format!(
        "users={} products={} genres={} contributors={} contributors_per_product={} \
         interactions_per_user={} planted={} seed={}",
        scfg.n_users,
        scfg.n_products,
        scfg.n_genres,
        scfg.n_contributors,
        scfg.contributors_per_product,
        scfg.interactions_per_user,
        scfg.planted,
        scfg.seed
    );
    for artifact in [
        &paths.triplets,
        &paths.entity_types,
        &paths.relations,
        &paths.interactions,
        &config_path,
    ] {
        Manifest::new("synth", artifact, &params, scfg.seed).write_beside(artifact)?;
    }
    println!(
        "[synth] {} users, {} products, {} interactions, {} triplets -> {}",
        scfg.n_users,
        scfg.n_products,
        data.interactions.len(),
        data.source.triplets.len(),
        args.out.display()
    );
    println!("[synth] try: pathrec pipeline --config {}", config_path.display());
    Ok(())
}

/// Ready-to-run config for a generated dataset. The toy data is already
/// clean, so the filters are set to keep everything.
fn synth_config_text(dir: &FsPath, seed: u64) -> String {
    let file = |name: &str| dir.join(name).display().to_string();
    format!(
        "[data]\n\
         triplets = {}\n\
         entity_types = {}\n\
         relations = {}\n\
         interactions = {}\n\
         interaction_relation = {}\n\
         genre_relation = {}\n\
         out_dir = {}\n\
         \n\
         [preprocess]\n\
         min_count = 1\n\
         min_relation_share = 0.0\n\
         train_ratio = 0.6\n\
         valid_ratio = 0.2\n\
         test_ratio = 0.2\n\
         \n\
         [sampler]\n\
         hops = 3\n\
         sample_size = 50\n\
         \n\
         [model]\n\
         preset = small\n\
         \n\
         [train]\n\
         lr = 0.001\n\
         batch_size = 32\n\
         steps = 300\n\
         \n\
         [decode]\n\
         hops = 3\n\
         n_beams = 30\n\
         n_groups = 5\n\
         diversity_penalty = 0.3\n\
         n_sequences = 100\n\
         top_n = 10\n\
         \n\
         [run]\n\
         seed = {}\n\
         k = 10\n\
         deterministic = true\n",
        file("triplets.tsv"),
        file("entity_types.tsv"),
        file("relations.tsv"),
        file("interactions.tsv"),
        synth::INTERACTION_RELATION,
        synth::GENRE_RELATION,
        dir.join("run").display(),
        seed
    )
}
