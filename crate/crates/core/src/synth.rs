//! Synthetic dataset generator: parameterized toy graphs with users,
//! products, external contributors and genres, plus optional planted
//! per-user preference structure for learning-signal experiments.
//!
//! Products are grouped into genre communities; users interact mostly
//! within their home community; contributors are drawn from a shared pool
//! so communities stay connected. In planted mode each user additionally
//! gets a signature contributor who stars exactly that user's train and
//! test products, making the held-out products reachable along a
//! high-frequency path pattern.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{chrono_split, RawInteraction};
use crate::kg::{EntityType, GraphSource};
use crate::mix_seed;

pub const INTERACTION_RELATION: &str = "watched";
pub const CONTRIBUTOR_RELATION: &str = "starred_by";
pub const GENRE_RELATION: &str = "has_genre";

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_products: usize,
    pub n_genres: usize,
    /// Shared contributor pool (cross-community bridges).
    pub n_contributors: usize,
    pub contributors_per_product: usize,
    /// Distinct products each user interacts with.
    pub interactions_per_user: usize,
    /// Add one signature contributor per user covering their train and
    /// test products.
    pub planted: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 30,
            n_products: 60,
            n_genres: 6,
            n_contributors: 80,
            contributors_per_product: 3,
            interactions_per_user: 8,
            planted: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        if self.n_users == 0 || self.n_products == 0 || self.n_contributors == 0 {
            return bad("users, products and contributors must all be nonzero");
        }
        if self.n_genres == 0 || self.n_genres > self.n_products {
            return bad("need 1 <= genres <= products");
        }
        if self.contributors_per_product > self.n_contributors {
            return bad("contributors_per_product exceeds the contributor pool");
        }
        if self.interactions_per_user < 5 {
            return bad("interactions_per_user must be >= 5 so the chronological split keeps every part nonempty");
        }
        if self.interactions_per_user > self.n_products {
            return bad("interactions_per_user exceeds the product count");
        }
        Ok(())
    }
}

/// A generated dataset, in memory. `source` holds the product-side
/// triplets only; feedback edges enter the graph from the train split.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub source: GraphSource,
    pub interactions: Vec<RawInteraction>,
}

/// Locations of the four files `write` produces.
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub triplets: PathBuf,
    pub entity_types: PathBuf,
    pub relations: PathBuf,
    pub interactions: PathBuf,
}

fn name(prefix: char, i: usize) -> String {
    format!("{prefix}{i:04}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let users: Vec<String> = (0..cfg.n_users).map(|i| name('U', i)).collect();
    let products: Vec<String> = (0..cfg.n_products).map(|i| name('P', i)).collect();
    let contributors: Vec<String> = (0..cfg.n_contributors).map(|i| name('A', i)).collect();
    let genres: Vec<String> = (0..cfg.n_genres).map(|i| name('G', i)).collect();

    let mut source = GraphSource::default();
    source.relation_ids.insert(INTERACTION_RELATION.into(), 0);
    source.relation_ids.insert(CONTRIBUTOR_RELATION.into(), 1);
    source.relation_ids.insert(GENRE_RELATION.into(), 2);
    for u in &users {
        source.entity_types.insert(u.clone(), EntityType::User);
    }
    for p in &products {
        source.entity_types.insert(p.clone(), EntityType::Product);
    }
    for a in &contributors {
        source.entity_types.insert(a.clone(), EntityType::External);
    }
    for g in &genres {
        source.entity_types.insert(g.clone(), EntityType::External);
    }

    // Genre communities round-robin, one genre per product.
    for (i, p) in products.iter().enumerate() {
        source.triplets.push((
            p.clone(),
            GENRE_RELATION.into(),
            genres[i % cfg.n_genres].clone(),
        ));
    }

    // Contributors from the shared pool; duplicates collapse to a set so
    // every product keeps >= 1 contributor edge.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xAC70));
    for p in &products {
        let mut picked = BTreeSet::new();
        while picked.len() < cfg.contributors_per_product {
            picked.insert(rng.gen_range(0..cfg.n_contributors));
        }
        for a in picked {
            source
                .triplets
                .push((p.clone(), CONTRIBUTOR_RELATION.into(), contributors[a].clone()));
        }
    }

    // Interactions: mostly home-community products, topped up globally,
    // distinct per user, strictly increasing timestamps.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1A7E));
    let mut interactions = Vec::new();
    for (u_idx, u) in users.iter().enumerate() {
        let home = u_idx % cfg.n_genres;
        let mut community: Vec<usize> = (0..cfg.n_products)
            .filter(|p| p % cfg.n_genres == home)
            .collect();
        community.shuffle(&mut rng);
        let mut others: Vec<usize> = (0..cfg.n_products)
            .filter(|p| p % cfg.n_genres != home)
            .collect();
        others.shuffle(&mut rng);
        let picks: Vec<usize> = community
            .into_iter()
            .chain(others)
            .take(cfg.interactions_per_user)
            .collect();
        for (t, p) in picks.into_iter().enumerate() {
            interactions.push(RawInteraction {
                user: u.clone(),
                product: products[p].clone(),
                timestamp: 1_000_000 + (t as i64) * 86_400 + u_idx as i64,
            });
        }
    }

    // Signature contributors: S{u} stars exactly u's train and test
    // products (the chronological split the pipeline itself will make),
    // creating one dominant pattern from each user's history to their
    // held-out items.
    if cfg.planted {
        let split = chrono_split(&interactions, (0.6, 0.2, 0.2))?;
        for (u_idx, u) in users.iter().enumerate() {
            let s = name('S', u_idx);
            source.entity_types.insert(s.clone(), EntityType::External);
            let starred: BTreeSet<&String> = split
                .train
                .iter()
                .chain(split.test.iter())
                .filter(|it| &it.user == u)
                .map(|it| &it.product)
                .collect();
            for p in starred {
                source
                    .triplets
                    .push((p.clone(), CONTRIBUTOR_RELATION.into(), s.clone()));
            }
        }
    }

    interactions.sort();
    source.triplets.sort();
    Ok(SynthData {
        source,
        interactions,
    })
}

impl SynthData {
    /// Write the four tab-separated files the loaders expect.
    pub fn write(&self, dir: &FsPath) -> Result<SynthPaths> {
        fs::create_dir_all(dir)?;
        let paths = SynthPaths {
            triplets: dir.join("triplets.tsv"),
            entity_types: dir.join("entity_types.tsv"),
            relations: dir.join("relations.tsv"),
            interactions: dir.join("interactions.tsv"),
        };
        self.source
            .write(&paths.triplets, &paths.entity_types, &paths.relations)?;
        crate::ingest::write_interactions(&paths.interactions, &self.interactions)?;
        Ok(paths)
    }
}
