//! Random-walk extraction of training paths, one batch per user, with
//! deduplication and the UP-COV / PP-COV diagnostics.
//!
//! Walks have exactly N hops. The first hop is forced along the interaction
//! relation to a train product of the user; later steps are uniform over the
//! valid continuations. Per-user sub-seeds keep output independent of user
//! processing order.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::Interaction;
use crate::kg::{EntityId, KnowledgeGraph, Path};
use crate::mix_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Hop count N; interior path length is 2N+1.
    pub hops: usize,
    /// Walk budget K per user (unique paths kept, up to this many).
    pub sample_size: usize,
    pub seed: u64,
    /// Terminal entity must be a train product of the user (true) or any
    /// product (false).
    pub restrict_end_to_interacted: bool,
    /// Permit user entities beyond position 0.
    pub allow_mid_path_users: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            hops: 3,
            sample_size: 50,
            seed: 0,
            restrict_end_to_interacted: true,
            allow_mid_path_users: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops < 1 {
            return Err(Error::Config("sampler hops must be ≥ 1".into()));
        }
        if self.sample_size < 1 {
            return Err(Error::Config("sampler sample_size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Attempt budget per user before giving up on new unique paths.
    pub fn retry_budget(&self) -> usize {
        10 * self.sample_size
    }
}

#[derive(Debug, Clone)]
pub struct PathDataset {
    /// First-occurrence order, grouped by user ascending; no duplicates.
    pub paths: Vec<Path>,
    /// Unique path count per user id.
    pub per_user: Vec<u32>,
    /// Users whose retry budget produced nothing.
    pub skipped_users: Vec<EntityId>,
    pub config: SamplerConfig,
}

impl PathDataset {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// One walk attempt. `None` when a dead end or a failed terminal test
/// discards the walk.
fn walk(
    kg: &KnowledgeGraph,
    user: EntityId,
    train_products: &[EntityId],
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Path> {
    let first = train_products[rng.gen_range(0..train_products.len())];
    let mut hops = Vec::with_capacity(cfg.hops);
    hops.push((kg.interaction_relation(), first));
    let mut cur = first;
    for _ in 1..cfg.hops {
        let n_valid = kg
            .continuations(cur)
            .filter(|&(_, e)| cfg.allow_mid_path_users || !kg.is_user(e))
            .count();
        if n_valid == 0 {
            return None;
        }
        let pick = rng.gen_range(0..n_valid);
        let (r, e) = kg
            .continuations(cur)
            .filter(|&(_, e)| cfg.allow_mid_path_users || !kg.is_user(e))
            .nth(pick)
            .expect("pick < n_valid");
        hops.push((r, e));
        cur = e;
    }
    let terminal_ok = if cfg.restrict_end_to_interacted {
        train_products.binary_search(&cur).is_ok()
    } else {
        kg.is_product(cur)
    };
    terminal_ok.then(|| Path::new(user, hops))
}

/// Sample up to K unique N-hop paths for every user with train feedback.
pub fn sample_paths(
    kg: &KnowledgeGraph,
    train_products_by_user: &[Vec<EntityId>],
    cfg: &SamplerConfig,
) -> Result<PathDataset> {
    cfg.validate()?;
    if train_products_by_user.len() != kg.n_users() {
        return Err(Error::Config(format!(
            "train product table covers {} users, graph has {}",
            train_products_by_user.len(),
            kg.n_users()
        )));
    }
    if train_products_by_user.iter().all(|v| v.is_empty()) {
        return Err(Error::EmptyInput("train interactions"));
    }
    let mut paths = Vec::new();
    let mut per_user = vec![0u32; kg.n_users()];
    let mut skipped = Vec::new();
    for user in kg.users() {
        let products = &train_products_by_user[user.idx()];
        if products.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, user.0 as u64));
        let mut seen: HashSet<Path> = HashSet::new();
        let mut found = 0u32;
        for _ in 0..cfg.retry_budget() {
            if (found as usize) >= cfg.sample_size {
                break;
            }
            if let Some(p) = walk(kg, user, products, cfg, &mut rng) {
                debug_assert!(kg.validate_path(&p).valid);
                if seen.insert(p.clone()) {
                    paths.push(p);
                    found += 1;
                }
            }
        }
        per_user[user.idx()] = found;
        if found == 0 {
            skipped.push(user);
        }
    }
    Ok(PathDataset {
        paths,
        per_user,
        skipped_users: skipped,
        config: cfg.clone(),
    })
}

/// Fraction of catalogue products appearing anywhere in any path.
pub fn product_path_coverage(ds: &PathDataset, catalogue: &BTreeSet<EntityId>) -> Result<f64> {
    if catalogue.is_empty() {
        return Err(Error::EmptyInput("product catalogue"));
    }
    if ds.is_empty() {
        return Err(Error::EmptyInput("path dataset"));
    }
    let mut hit: BTreeSet<EntityId> = BTreeSet::new();
    for p in &ds.paths {
        if catalogue.contains(&p.start) {
            hit.insert(p.start);
        }
        for &(_, e) in &p.hops {
            if catalogue.contains(&e) {
                hit.insert(e);
            }
        }
    }
    Ok(hit.len() as f64 / catalogue.len() as f64)
}

/// Unique (path user, product token in that user's paths) pairs over unique
/// train pairs. Exceeds 1 when paths traverse products the user never
/// interacted with.
pub fn user_product_coverage(
    ds: &PathDataset,
    train: &[Interaction],
    kg: &KnowledgeGraph,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptyInput("train interactions"));
    }
    if ds.is_empty() {
        return Err(Error::EmptyInput("path dataset"));
    }
    let mut path_pairs: BTreeSet<(EntityId, EntityId)> = BTreeSet::new();
    for p in &ds.paths {
        let user = p.start;
        for &(_, e) in &p.hops {
            if kg.is_product(e) {
                path_pairs.insert((user, e));
            }
        }
    }
    let train_pairs: BTreeSet<(EntityId, EntityId)> =
        train.iter().map(|it| (it.user, it.product)).collect();
    Ok(path_pairs.len() as f64 / train_pairs.len() as f64)
}

/// One path per line as space-separated token names; the header comment
/// records the generating config.
pub fn write_paths(path: &FsPath, ds: &PathDataset, kg: &KnowledgeGraph) -> Result<()> {
    let mut s = String::new();
    let c = &ds.config;
    writeln!(
        s,
        "# hops={} sample_size={} seed={} restrict_end_to_interacted={} allow_mid_path_users={}",
        c.hops, c.sample_size, c.seed, c.restrict_end_to_interacted, c.allow_mid_path_users
    )
    .expect("string write");
    for p in &ds.paths {
        writeln!(s, "{}", kg.path_to_names(p)).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Read a path file back; every line must parse and validate against `kg`.
pub fn read_paths(path: &FsPath, kg: &KnowledgeGraph) -> Result<Vec<Path>> {
    let mut out = Vec::new();
    for (lineno, line) in crate::kg::read_lines(path)? {
        let p = kg.path_from_names(&line).map_err(|e| Error::MalformedLine {
            file: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if !kg.validate_path(&p).valid {
            return Err(Error::MalformedLine {
                file: path.display().to_string(),
                line: lineno,
                msg: "path does not exist in the graph".into(),
            });
        }
        out.push(p);
    }
    Ok(out)
}

/// Coverage report mirroring the path-count / UP-COV / PP-COV columns.
pub fn coverage_report(
    ds: &PathDataset,
    train: &[Interaction],
    kg: &KnowledgeGraph,
) -> Result<String> {
    let catalogue: BTreeSet<EntityId> = kg.products().collect();
    let up = user_product_coverage(ds, train, kg)?;
    let pp = product_path_coverage(ds, &catalogue)?;
    let mut s = String::new();
    writeln!(s, "paths\t{}", ds.len()).expect("string write");
    writeln!(s, "users_covered\t{}", ds.per_user.iter().filter(|&&c| c > 0).count())
        .expect("string write");
    writeln!(s, "users_skipped\t{}", ds.skipped_users.len()).expect("string write");
    writeln!(s, "up_cov\t{up:.4}").expect("string write");
    writeln!(s, "pp_cov\t{pp:.4}").expect("string write");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityType, GraphSource};

    fn source(
        triplets: &[(&str, &str, &str)],
        types: &[(&str, EntityType)],
        relations: &[(&str, u32)],
    ) -> GraphSource {
        let mut src = GraphSource::default();
        for &(h, r, t) in triplets {
            src.triplets.push((h.into(), r.into(), t.into()));
        }
        for &(n, ty) in types {
            src.entity_types.insert(n.into(), ty);
        }
        for &(n, id) in relations {
            src.relation_ids.insert(n.into(), id);
        }
        src
    }

    /// u0 watched p0; p0 has one actor; the actor only reaches p0 and p1.
    fn chain_kg() -> (KnowledgeGraph, Vec<Vec<EntityId>>) {
        let src = source(
            &[
                ("u0", "watched", "p0"),
                ("p0", "starred_by", "a0"),
                ("p1", "starred_by", "a0"),
            ],
            &[
                ("u0", EntityType::User),
                ("p0", EntityType::Product),
                ("p1", EntityType::Product),
                ("a0", EntityType::External),
            ],
            &[("watched", 0), ("starred_by", 1)],
        );
        let kg = src.build("watched").unwrap();
        let mut by_user = vec![Vec::new(); kg.n_users()];
        by_user[0] = vec![kg.entity_id("p0").unwrap()];
        (kg, by_user)
    }

    #[test]
    fn forced_walk_yields_the_unique_path() {
        // Drop p1 so the only 3-hop walk loops back over the actor to p0.
        let src = source(
            &[("u0", "watched", "p0"), ("p0", "starred_by", "a0")],
            &[
                ("u0", EntityType::User),
                ("p0", EntityType::Product),
                ("a0", EntityType::External),
            ],
            &[("watched", 0), ("starred_by", 1)],
        );
        let kg = src.build("watched").unwrap();
        let by_user = vec![vec![kg.entity_id("p0").unwrap()]];
        let cfg = SamplerConfig {
            hops: 3,
            sample_size: 1,
            ..Default::default()
        };
        let ds = sample_paths(&kg, &by_user, &cfg).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(
            kg.path_to_names(&ds.paths[0]),
            "u0 watched p0 starred_by a0 starred_by⁻¹ p0"
        );
    }

    #[test]
    fn dead_end_user_is_skipped_with_diagnostic() {
        let src = source(
            &[("u0", "watched", "p0")],
            &[("u0", EntityType::User), ("p0", EntityType::Product)],
            &[("watched", 0)],
        );
        let kg = src.build("watched").unwrap();
        // p0's only edge leads back to a user, banned mid-path.
        let by_user = vec![vec![kg.entity_id("p0").unwrap()]];
        let cfg = SamplerConfig {
            hops: 3,
            sample_size: 5,
            ..Default::default()
        };
        let ds = sample_paths(&kg, &by_user, &cfg).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.skipped_users, vec![EntityId(0)]);
    }

    #[test]
    fn sampled_paths_are_valid_start_correctly_and_respect_k() {
        let (kg, by_user) = chain_kg();
        let cfg = SamplerConfig {
            hops: 3,
            sample_size: 10,
            seed: 7,
            restrict_end_to_interacted: false,
            allow_mid_path_users: false,
        };
        let ds = sample_paths(&kg, &by_user, &cfg).unwrap();
        assert!(!ds.is_empty());
        let mut seen = HashSet::new();
        for p in &ds.paths {
            assert!(kg.validate_path(p).valid);
            assert_eq!(p.hop_count(), 3);
            assert_eq!(p.token_len(), 7);
            assert!(kg.is_user(p.start));
            assert_eq!(p.hops[0].0, kg.interaction_relation());
            assert!(by_user[p.start.idx()].binary_search(&p.hops[0].1).is_ok());
            assert!(kg.is_product(p.terminal()));
            assert!(seen.insert(p.clone()), "duplicate path emitted");
        }
        for (u, &count) in ds.per_user.iter().enumerate() {
            assert!(count as usize <= cfg.sample_size, "user {u} over budget");
        }
    }

    #[test]
    fn mid_path_users_banned_by_default_and_allowed_by_flag() {
        // u1 also watched p0, so a walk can hop p0 -> u1 only if permitted.
        let src = source(
            &[
                ("u0", "watched", "p0"),
                ("u1", "watched", "p0"),
                ("u1", "watched", "p1"),
            ],
            &[
                ("u0", EntityType::User),
                ("u1", EntityType::User),
                ("p0", EntityType::Product),
                ("p1", EntityType::Product),
            ],
            &[("watched", 0)],
        );
        let kg = src.build("watched").unwrap();
        let p0 = kg.entity_id("p0").unwrap();
        let by_user = vec![vec![p0], vec![p0, kg.entity_id("p1").unwrap()]];
        let banned = SamplerConfig {
            hops: 3,
            sample_size: 20,
            restrict_end_to_interacted: false,
            ..Default::default()
        };
        let ds = sample_paths(&kg, &by_user, &banned).unwrap();
        // Without mid-path users p0 is a dead end for everybody.
        assert!(ds.is_empty());

        let allowed = SamplerConfig {
            allow_mid_path_users: true,
            ..banned
        };
        let ds = sample_paths(&kg, &by_user, &allowed).unwrap();
        assert!(!ds.is_empty());
        for p in &ds.paths {
            assert!(kg.validate_path(p).valid);
        }
    }

    #[test]
    fn same_seed_reproduces_byte_identical_dataset() {
        let (kg, by_user) = chain_kg();
        let cfg = SamplerConfig {
            hops: 3,
            sample_size: 10,
            seed: 99,
            restrict_end_to_interacted: false,
            allow_mid_path_users: false,
        };
        let a = sample_paths(&kg, &by_user, &cfg).unwrap();
        let b = sample_paths(&kg, &by_user, &cfg).unwrap();
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.per_user, b.per_user);
    }

    #[test]
    fn coverage_trivial_cases() {
        let (kg, _) = chain_kg();
        let u0 = kg.entity_id("u0").unwrap();
        let p0 = kg.entity_id("p0").unwrap();
        let p1 = kg.entity_id("p1").unwrap();
        let rf = kg.interaction_relation();
        let ds = PathDataset {
            paths: vec![Path::new(u0, vec![(rf, p0)])],
            per_user: vec![1],
            skipped_users: vec![],
            config: SamplerConfig::default(),
        };
        // Catalogue {p0, p1}, paths mention only p0.
        let catalogue: BTreeSet<EntityId> = [p0, p1].into_iter().collect();
        assert_eq!(product_path_coverage(&ds, &catalogue).unwrap(), 0.5);
        // Paths reproduce the train pairs exactly.
        let train = vec![Interaction { user: u0, product: p0, timestamp: 0 }];
        assert_eq!(user_product_coverage(&ds, &train, &kg).unwrap(), 1.0);
        // Half of the train pairs covered, nothing extra.
        let train2 = vec![
            Interaction { user: u0, product: p0, timestamp: 0 },
            Interaction { user: u0, product: p1, timestamp: 1 },
        ];
        assert_eq!(user_product_coverage(&ds, &train2, &kg).unwrap(), 0.5);
        assert!(product_path_coverage(&ds, &BTreeSet::new()).is_err());
        assert!(user_product_coverage(&ds, &[], &kg).is_err());
    }

    #[test]
    fn relaxed_terminal_mode_pushes_up_cov_above_one() {
        let (kg, by_user) = chain_kg();
        let u0 = kg.entity_id("u0").unwrap();
        let p0 = kg.entity_id("p0").unwrap();
        let train = vec![Interaction { user: u0, product: p0, timestamp: 0 }];
        let relaxed = SamplerConfig {
            hops: 3,
            sample_size: 10,
            seed: 3,
            restrict_end_to_interacted: false,
            allow_mid_path_users: false,
        };
        let ds = sample_paths(&kg, &by_user, &relaxed).unwrap();
        let up = user_product_coverage(&ds, &train, &kg).unwrap();
        // Walks reach p1 through the shared actor: 2 pairs over 1 train pair.
        assert_eq!(up, 2.0);

        // Pair-enumeration oracle.
        let mut pairs = BTreeSet::new();
        for p in &ds.paths {
            for &(_, e) in &p.hops {
                if kg.is_product(e) {
                    pairs.insert((p.start, e));
                }
            }
        }
        assert_eq!(up, pairs.len() as f64 / 1.0);

        // Restricted mode keeps the ratio at 1.
        let strict = SamplerConfig {
            restrict_end_to_interacted: true,
            ..relaxed
        };
        let ds = sample_paths(&kg, &by_user, &strict).unwrap();
        assert_eq!(user_product_coverage(&ds, &train, &kg).unwrap(), 1.0);
    }

    #[test]
    fn pp_cov_equals_token_scan_oracle() {
        let (kg, by_user) = chain_kg();
        let cfg = SamplerConfig {
            hops: 3,
            sample_size: 10,
            seed: 5,
            restrict_end_to_interacted: false,
            allow_mid_path_users: false,
        };
        let ds = sample_paths(&kg, &by_user, &cfg).unwrap();
        let catalogue: BTreeSet<EntityId> = kg.products().collect();
        let got = product_path_coverage(&ds, &catalogue).unwrap();
        let mut hit = BTreeSet::new();
        for p in &ds.paths {
            for tok in p.tokens() {
                if let crate::kg::PathToken::Entity(e) = tok {
                    if kg.is_product(e) {
                        hit.insert(e);
                    }
                }
            }
        }
        assert_eq!(got, hit.len() as f64 / catalogue.len() as f64);
    }

    #[test]
    fn path_file_roundtrip() {
        let (kg, by_user) = chain_kg();
        let cfg = SamplerConfig {
            hops: 3,
            sample_size: 10,
            seed: 1,
            restrict_end_to_interacted: false,
            allow_mid_path_users: false,
        };
        let ds = sample_paths(&kg, &by_user, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("paths.txt");
        write_paths(&file, &ds, &kg).unwrap();
        let back = read_paths(&file, &kg).unwrap();
        assert_eq!(back, ds.paths);
    }

    #[test]
    fn read_paths_rejects_non_graph_path() {
        let (kg, _) = chain_kg();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("paths.txt");
        // p1 was never watched by u0.
        std::fs::write(&file, "u0 watched p1\n").unwrap();
        assert!(matches!(
            read_paths(&file, &kg),
            Err(Error::MalformedLine { .. })
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let (kg, by_user) = chain_kg();
        let cfg = SamplerConfig { hops: 0, ..Default::default() };
        assert!(sample_paths(&kg, &by_user, &cfg).is_err());
        let cfg = SamplerConfig { sample_size: 0, ..Default::default() };
        assert!(sample_paths(&kg, &by_user, &cfg).is_err());
    }
}
