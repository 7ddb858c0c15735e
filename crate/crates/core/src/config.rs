//! Run configuration: an INI-style file with `[section]` headers and
//! `key = value` lines. Environment variables named
//! `PATHREC_<SECTION>_<KEY>` override individual file entries; the
//! environment always wins. Cross-stage consistency (hop counts, context
//! length, beam shape) is rejected here, before any stage starts work.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::ingest::PreprocessConfig;
use crate::mix_seed;
use crate::model::train::TrainConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;

pub const ENV_PREFIX: &str = "PATHREC_";

/// Seed streams for the pipeline stages, all derived from the global seed.
pub const SEED_SAMPLER: u64 = 0x5A;
pub const SEED_MODEL: u64 = 0x4D;
pub const SEED_TRAIN: u64 = 0x54;
pub const SEED_DECODE: u64 = 0x44;

/// Every (section, key) the file may contain. Anything else is a typo and
/// is rejected with its line number.
const SCHEMA: &[(&str, &str)] = &[
    ("data", "triplets"),
    ("data", "entity_types"),
    ("data", "relations"),
    ("data", "interactions"),
    ("data", "interaction_relation"),
    ("data", "genre_relation"),
    ("data", "out_dir"),
    ("preprocess", "min_count"),
    ("preprocess", "min_relation_share"),
    ("preprocess", "train_ratio"),
    ("preprocess", "valid_ratio"),
    ("preprocess", "test_ratio"),
    ("sampler", "hops"),
    ("sampler", "sample_size"),
    ("sampler", "restrict_end_to_interacted"),
    ("sampler", "allow_mid_path_users"),
    ("model", "preset"),
    ("model", "d_model"),
    ("model", "n_layers"),
    ("model", "n_heads"),
    ("model", "d_ff"),
    ("model", "context"),
    ("model", "dropout"),
    ("train", "lr"),
    ("train", "batch_size"),
    ("train", "steps"),
    ("train", "weight_decay"),
    ("train", "clip_norm"),
    ("train", "warmup_frac"),
    ("train", "beta1"),
    ("train", "beta2"),
    ("train", "eps"),
    ("decode", "hops"),
    ("decode", "n_beams"),
    ("decode", "n_groups"),
    ("decode", "diversity_penalty"),
    ("decode", "n_sequences"),
    ("decode", "top_n"),
    ("decode", "constrained"),
    ("decode", "score_mean_log"),
    ("run", "seed"),
    ("run", "k"),
    ("run", "novelty_by_user_count"),
    ("run", "threads"),
    ("run", "deterministic"),
];

#[derive(Debug, Clone)]
pub struct DataPaths {
    pub triplets: PathBuf,
    pub entity_types: PathBuf,
    pub relations: PathBuf,
    pub interactions: PathBuf,
    pub interaction_relation: String,
    /// Relation used for the diversity metric, when the graph has one.
    pub genre_relation: Option<String>,
    pub out_dir: PathBuf,
}

/// Model size recipe; the concrete [`ModelConfig`] needs the vocabulary
/// size and context, which are only known once the graph is built.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    /// `small`, `distil-like`, `base-like` or `custom`.
    pub preset: String,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    /// Override for the context length; default fits one path exactly.
    pub context: Option<usize>,
    pub dropout: f64,
}

impl ModelSpec {
    /// Smallest context that fits a full training sequence:
    /// bos + interior (2N+1) + eos.
    pub fn context_for(&self, hops: usize) -> usize {
        self.context.unwrap_or(2 * hops + 3)
    }

    pub fn build(&self, hops: usize, vocab_size: usize, seed: u64) -> Result<ModelConfig> {
        let context = self.context_for(hops);
        let mut cfg = if self.preset == "custom" {
            let need = |v: Option<usize>, name: &str| {
                v.ok_or_else(|| {
                    Error::Config(format!("model preset `custom` requires model.{name}"))
                })
            };
            let d_model = need(self.d_model, "d_model")?;
            ModelConfig {
                d_model,
                n_layers: need(self.n_layers, "n_layers")?,
                n_heads: need(self.n_heads, "n_heads")?,
                d_ff: self.d_ff.unwrap_or(4 * d_model),
                context,
                dropout: 0.0,
                seed,
                vocab_size,
            }
        } else {
            for (v, name) in [
                (self.d_model, "d_model"),
                (self.n_layers, "n_layers"),
                (self.n_heads, "n_heads"),
                (self.d_ff, "d_ff"),
            ] {
                if v.is_some() {
                    return Err(Error::Config(format!(
                        "model.{name} only applies to preset `custom`, not `{}`",
                        self.preset
                    )));
                }
            }
            ModelConfig::preset(&self.preset, context, vocab_size, seed)?
        };
        cfg.dropout = self.dropout;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DataPaths,
    pub preprocess: PreprocessConfig,
    pub ratios: (f64, f64, f64),
    pub sampler: SamplerConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// Global seed; stage seeds are derived from it.
    pub seed: u64,
    /// Ranking cutoff for the evaluation metrics.
    pub k: usize,
    /// Normalize novelty by the train user count instead of the max
    /// product count.
    pub novelty_by_user_count: bool,
    /// Worker cap for stages that can parallelize; 0 = available cores.
    /// Current stages are sequential and deterministic either way.
    pub threads: usize,
    pub deterministic: bool,
}

impl RunConfig {
    /// Read `path`, apply `PATHREC_*` environment overrides, and validate.
    pub fn load(path: &FsPath) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        let env: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        let cfg = RunConfig::from_text(&text, &env, &path.display().to_string())?;
        for (file, label) in [
            (&cfg.data.triplets, "data.triplets"),
            (&cfg.data.entity_types, "data.entity_types"),
            (&cfg.data.relations, "data.relations"),
            (&cfg.data.interactions, "data.interactions"),
        ] {
            if !file.is_file() {
                return Err(Error::Config(format!(
                    "{label} = {} does not exist (generate toy data with `synth` or point it at real files)",
                    file.display()
                )));
            }
        }
        Ok(cfg)
    }

    /// Parse config text plus explicit environment pairs (testable core of
    /// [`RunConfig::load`]; skips the file-existence checks).
    pub fn from_text(text: &str, env: &[(String, String)], origin: &str) -> Result<RunConfig> {
        let mut raw = parse_ini(text, origin)?;
        apply_env(&mut raw, env)?;
        build(raw)
    }

    /// Seed for one stage, derived from the global seed so stages never
    /// share RNG streams.
    pub fn stage_seed(&self, stream: u64) -> u64 {
        mix_seed(self.seed, stream)
    }

    /// Deterministic dump of every effective setting, environment
    /// overrides included. Manifests hash this.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let p = |s: &mut String, sec: &str| writeln!(s, "[{sec}]").unwrap();
        p(&mut s, "data");
        writeln!(s, "triplets = {}", self.data.triplets.display()).unwrap();
        writeln!(s, "entity_types = {}", self.data.entity_types.display()).unwrap();
        writeln!(s, "relations = {}", self.data.relations.display()).unwrap();
        writeln!(s, "interactions = {}", self.data.interactions.display()).unwrap();
        writeln!(s, "interaction_relation = {}", self.data.interaction_relation).unwrap();
        if let Some(g) = &self.data.genre_relation {
            writeln!(s, "genre_relation = {g}").unwrap();
        }
        writeln!(s, "out_dir = {}", self.data.out_dir.display()).unwrap();
        p(&mut s, "preprocess");
        writeln!(s, "min_count = {}", self.preprocess.min_count).unwrap();
        writeln!(s, "min_relation_share = {}", self.preprocess.min_relation_share).unwrap();
        writeln!(s, "train_ratio = {}", self.ratios.0).unwrap();
        writeln!(s, "valid_ratio = {}", self.ratios.1).unwrap();
        writeln!(s, "test_ratio = {}", self.ratios.2).unwrap();
        p(&mut s, "sampler");
        writeln!(s, "hops = {}", self.sampler.hops).unwrap();
        writeln!(s, "sample_size = {}", self.sampler.sample_size).unwrap();
        writeln!(s, "restrict_end_to_interacted = {}", self.sampler.restrict_end_to_interacted)
            .unwrap();
        writeln!(s, "allow_mid_path_users = {}", self.sampler.allow_mid_path_users).unwrap();
        p(&mut s, "model");
        writeln!(s, "preset = {}", self.model.preset).unwrap();
        for (v, name) in [
            (self.model.d_model, "d_model"),
            (self.model.n_layers, "n_layers"),
            (self.model.n_heads, "n_heads"),
            (self.model.d_ff, "d_ff"),
            (self.model.context, "context"),
        ] {
            if let Some(v) = v {
                writeln!(s, "{name} = {v}").unwrap();
            }
        }
        writeln!(s, "dropout = {}", self.model.dropout).unwrap();
        p(&mut s, "train");
        writeln!(s, "lr = {}", self.train.lr).unwrap();
        writeln!(s, "batch_size = {}", self.train.batch_size).unwrap();
        writeln!(s, "steps = {}", self.train.steps).unwrap();
        writeln!(s, "weight_decay = {}", self.train.weight_decay).unwrap();
        writeln!(s, "clip_norm = {}", self.train.clip_norm).unwrap();
        writeln!(s, "warmup_frac = {}", self.train.warmup_frac).unwrap();
        writeln!(s, "beta1 = {}", self.train.beta1).unwrap();
        writeln!(s, "beta2 = {}", self.train.beta2).unwrap();
        writeln!(s, "eps = {}", self.train.eps).unwrap();
        p(&mut s, "decode");
        writeln!(s, "hops = {}", self.decode.hops).unwrap();
        writeln!(s, "n_beams = {}", self.decode.n_beams).unwrap();
        writeln!(s, "n_groups = {}", self.decode.n_groups).unwrap();
        writeln!(s, "diversity_penalty = {}", self.decode.diversity_penalty).unwrap();
        writeln!(s, "n_sequences = {}", self.decode.n_sequences).unwrap();
        writeln!(s, "top_n = {}", self.decode.top_n).unwrap();
        writeln!(s, "constrained = {}", self.decode.constrained).unwrap();
        writeln!(s, "score_mean_log = {}", self.decode.score_mean_log).unwrap();
        p(&mut s, "run");
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "k = {}", self.k).unwrap();
        writeln!(s, "novelty_by_user_count = {}", self.novelty_by_user_count).unwrap();
        writeln!(s, "threads = {}", self.threads).unwrap();
        writeln!(s, "deterministic = {}", self.deterministic).unwrap();
        s
    }
}

struct Raw {
    /// (section, key) -> (value, provenance for error messages).
    map: BTreeMap<(String, String), (String, String)>,
}

fn parse_ini(text: &str, origin: &str) -> Result<Raw> {
    let mut map = BTreeMap::new();
    let mut section: Option<String> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let err = |msg: String| Error::MalformedLine {
            file: origin.to_string(),
            line: lineno,
            msg,
        };
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header".into()))?
                .trim()
                .to_ascii_lowercase();
            if !SCHEMA.iter().any(|(s, _)| *s == name) {
                return Err(err(format!("unknown section `[{name}]`")));
            }
            section = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err("expected `key = value`".into()));
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        let sec = section
            .clone()
            .ok_or_else(|| err(format!("key `{key}` appears before any [section]")))?;
        if !SCHEMA.contains(&(sec.as_str(), key.as_str())) {
            return Err(err(format!("unknown key `{key}` in section `[{sec}]`")));
        }
        let slot = (sec.clone(), key.clone());
        if map.contains_key(&slot) {
            return Err(err(format!("duplicate key `{key}` in section `[{sec}]`")));
        }
        map.insert(slot, (value, format!("{origin}:{lineno}")));
    }
    Ok(Raw { map })
}

/// Environment wins over the file. Unknown `PATHREC_*` names are rejected
/// so typos cannot silently change nothing.
fn apply_env(raw: &mut Raw, env: &[(String, String)]) -> Result<()> {
    for (name, value) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let Some((sec, key)) = rest.split_once('_') else {
            return Err(Error::Config(format!(
                "environment variable `{name}` must look like {ENV_PREFIX}<SECTION>_<KEY>"
            )));
        };
        let sec = sec.to_ascii_lowercase();
        let key = key.to_ascii_lowercase();
        if !SCHEMA.contains(&(sec.as_str(), key.as_str())) {
            return Err(Error::Config(format!(
                "environment variable `{name}` does not name a known config key"
            )));
        }
        raw.map.insert(
            (sec, key),
            (value.clone(), format!("environment variable {name}")),
        );
    }
    Ok(())
}

impl Raw {
    fn take(&mut self, sec: &str, key: &str) -> Option<(String, String)> {
        self.map.remove(&(sec.to_string(), key.to_string()))
    }

    fn parse<T: std::str::FromStr>(&mut self, sec: &str, key: &str, default: T) -> Result<T> {
        match self.take(sec, key) {
            None => Ok(default),
            Some((value, from)) => value.parse().map_err(|_| {
                Error::Config(format!(
                    "{sec}.{key} = `{value}` ({from}) is not a valid {}",
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, sec: &str, key: &str) -> Result<Option<T>> {
        match self.take(sec, key) {
            None => Ok(None),
            Some((value, from)) => value.parse().map(Some).map_err(|_| {
                Error::Config(format!(
                    "{sec}.{key} = `{value}` ({from}) is not a valid {}",
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    fn require_path(&mut self, sec: &str, key: &str) -> Result<PathBuf> {
        match self.take(sec, key) {
            Some((value, _)) if !value.is_empty() => Ok(PathBuf::from(value)),
            _ => Err(Error::Config(format!("missing required key {sec}.{key}"))),
        }
    }
}

fn build(mut raw: Raw) -> Result<RunConfig> {
    let data = DataPaths {
        triplets: raw.require_path("data", "triplets")?,
        entity_types: raw.require_path("data", "entity_types")?,
        relations: raw.require_path("data", "relations")?,
        interactions: raw.require_path("data", "interactions")?,
        interaction_relation: raw
            .take("data", "interaction_relation")
            .map(|(v, _)| v)
            .unwrap_or_else(|| "watched".to_string()),
        genre_relation: raw.take("data", "genre_relation").map(|(v, _)| v),
        out_dir: raw.require_path("data", "out_dir")?,
    };

    let pre_default = PreprocessConfig::default();
    let preprocess = PreprocessConfig {
        min_count: raw.parse("preprocess", "min_count", pre_default.min_count)?,
        min_relation_share: raw.parse(
            "preprocess",
            "min_relation_share",
            pre_default.min_relation_share,
        )?,
    };
    let ratios: (f64, f64, f64) = (
        raw.parse("preprocess", "train_ratio", 0.6)?,
        raw.parse("preprocess", "valid_ratio", 0.2)?,
        raw.parse("preprocess", "test_ratio", 0.2)?,
    );
    if (ratios.0 + ratios.1 + ratios.2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {} + {} + {}",
            ratios.0, ratios.1, ratios.2
        )));
    }

    let seed: u64 = raw.parse("run", "seed", 0)?;

    let s_default = SamplerConfig::default();
    let sampler = SamplerConfig {
        hops: raw.parse("sampler", "hops", s_default.hops)?,
        sample_size: raw.parse("sampler", "sample_size", s_default.sample_size)?,
        seed: mix_seed(seed, SEED_SAMPLER),
        restrict_end_to_interacted: raw.parse(
            "sampler",
            "restrict_end_to_interacted",
            s_default.restrict_end_to_interacted,
        )?,
        allow_mid_path_users: raw.parse(
            "sampler",
            "allow_mid_path_users",
            s_default.allow_mid_path_users,
        )?,
    };
    sampler.validate()?;

    let model = ModelSpec {
        preset: raw
            .take("model", "preset")
            .map(|(v, _)| v)
            .unwrap_or_else(|| "small".to_string()),
        d_model: raw.parse_opt("model", "d_model")?,
        n_layers: raw.parse_opt("model", "n_layers")?,
        n_heads: raw.parse_opt("model", "n_heads")?,
        d_ff: raw.parse_opt("model", "d_ff")?,
        context: raw.parse_opt("model", "context")?,
        dropout: raw.parse("model", "dropout", 0.0)?,
    };
    // Shape problems surface now, not at train time; the vocabulary size
    // is a placeholder.
    model.build(sampler.hops, 4, mix_seed(seed, SEED_MODEL))?;

    let t_default = TrainConfig::default();
    let train = TrainConfig {
        lr: raw.parse("train", "lr", t_default.lr)?,
        beta1: raw.parse("train", "beta1", t_default.beta1)?,
        beta2: raw.parse("train", "beta2", t_default.beta2)?,
        weight_decay: raw.parse("train", "weight_decay", t_default.weight_decay)?,
        eps: raw.parse("train", "eps", t_default.eps)?,
        batch_size: raw.parse("train", "batch_size", t_default.batch_size)?,
        steps: raw.parse("train", "steps", t_default.steps)?,
        clip_norm: raw.parse("train", "clip_norm", t_default.clip_norm)?,
        warmup_frac: raw.parse("train", "warmup_frac", t_default.warmup_frac)?,
        seed: mix_seed(seed, SEED_TRAIN),
    };
    train.validate()?;

    let d_default = DecodeConfig::default();
    let decode = DecodeConfig {
        hops: raw.parse("decode", "hops", sampler.hops)?,
        n_beams: raw.parse("decode", "n_beams", d_default.n_beams)?,
        n_groups: raw.parse("decode", "n_groups", d_default.n_groups)?,
        diversity_penalty: raw.parse("decode", "diversity_penalty", d_default.diversity_penalty)?,
        n_sequences: raw.parse("decode", "n_sequences", d_default.n_sequences)?,
        top_n: raw.parse("decode", "top_n", d_default.top_n)?,
        constrained: raw.parse("decode", "constrained", d_default.constrained)?,
        score_mean_log: raw.parse("decode", "score_mean_log", d_default.score_mean_log)?,
        seed: mix_seed(seed, SEED_DECODE),
    };
    decode.validate()?;
    if decode.hops != sampler.hops {
        return Err(Error::Config(format!(
            "decode.hops = {} must match sampler.hops = {}: the model is trained on {}-hop paths",
            decode.hops, sampler.hops, sampler.hops
        )));
    }
    if model.context_for(sampler.hops) < 2 * sampler.hops + 3 {
        return Err(Error::Config(format!(
            "model.context = {} cannot fit a {}-hop path (needs {})",
            model.context_for(sampler.hops),
            sampler.hops,
            2 * sampler.hops + 3
        )));
    }

    let k = raw.parse("run", "k", 10usize)?;
    if k == 0 {
        return Err(Error::Config("run.k must be >= 1".into()));
    }
    let cfg = RunConfig {
        data,
        preprocess,
        ratios,
        sampler,
        model,
        train,
        decode,
        seed,
        k,
        novelty_by_user_count: raw.parse("run", "novelty_by_user_count", false)?,
        threads: raw.parse("run", "threads", 0usize)?,
        deterministic: raw.parse("run", "deterministic", true)?,
    };
    debug_assert!(raw.map.is_empty(), "schema keys left unconsumed: {:?}", raw.map);
    Ok(cfg)
}
