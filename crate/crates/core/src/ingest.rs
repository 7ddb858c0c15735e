//! Interaction loading, fixed-point preprocessing filters and the
//! chronological train/validation/test split.
//!
//! Filtering happens on name-keyed data so the surviving entities get dense,
//! gap-free ids when the graph is built afterwards. Products are ordered by
//! name inside their id partition, so tie-breaking by product name below is
//! the same thing as tie-breaking by product id.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path as FsPath;

use crate::error::{Error, Result};
use crate::kg::{read_lines, EntityId, EntityType, GraphSource, KnowledgeGraph};

/// One feedback event, keyed by names (pre-id-assignment).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RawInteraction {
    pub user: String,
    pub product: String,
    pub timestamp: i64,
}

/// One feedback event bound to graph ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interaction {
    pub user: EntityId,
    pub product: EntityId,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy)]
pub struct PreprocessConfig {
    /// Users and products below this interaction count are dropped.
    pub min_count: usize,
    /// Relation types below this share of KG triplets are dropped.
    pub min_relation_share: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_count: 5,
            min_relation_share: 0.03,
        }
    }
}

/// `user<TAB>product<TAB>unix_timestamp` per line; `#` comments ignored.
/// Exact duplicate rows are collapsed.
pub fn load_interactions(path: &FsPath) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in read_lines(path)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                file: path.display().to_string(),
                line: lineno,
                msg: "expected user<TAB>product<TAB>timestamp".into(),
            });
        }
        let timestamp: i64 = fields[2].parse().map_err(|_| Error::MalformedLine {
            file: path.display().to_string(),
            line: lineno,
            msg: "timestamp must be an integer".into(),
        })?;
        if timestamp < 0 {
            return Err(Error::MalformedLine {
                file: path.display().to_string(),
                line: lineno,
                msg: "timestamp must be ≥ 0".into(),
            });
        }
        let it = RawInteraction {
            user: fields[0].to_string(),
            product: fields[1].to_string(),
            timestamp,
        };
        if seen.insert(it.clone()) {
            out.push(it);
        }
    }
    Ok(out)
}

/// Write interactions in the format [`load_interactions`] reads.
pub fn write_interactions(path: &FsPath, items: &[RawInteraction]) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::from("# user\tproduct\ttimestamp\n");
    for it in items {
        writeln!(s, "{}\t{}\t{}", it.user, it.product, it.timestamp).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Apply the three dataset filters until nothing changes:
/// 1. interactions with products absent from the KG triplets are dropped,
///    along with those product entities;
/// 2. users and products with fewer than `min_count` interactions are
///    dropped with their interactions (and, for products, their triplets);
/// 3. relation types covering less than `min_relation_share` of the triplets
///    are dropped with all their triplets.
///
/// The interaction relation is exempt from filter 3: it lives in the
/// interaction file, not the triplet file, so its share there is not
/// meaningful. Entities left without any triplet or interaction are removed.
/// Surviving relation ids are re-densified preserving their relative order.
pub fn preprocess(
    interactions: &[RawInteraction],
    source: &GraphSource,
    cfg: &PreprocessConfig,
    interaction_relation: &str,
) -> Result<(Vec<RawInteraction>, GraphSource)> {
    if !source.relation_ids.contains_key(interaction_relation) {
        return Err(Error::UnknownRelation(interaction_relation.to_string()));
    }
    for it in interactions {
        match source.entity_types.get(&it.user) {
            Some(EntityType::User) => {}
            Some(_) => {
                return Err(Error::Config(format!(
                    "interaction user `{}` is not typed `user`",
                    it.user
                )))
            }
            None => return Err(Error::UnknownEntity(it.user.clone())),
        }
    }

    let mut inter: Vec<RawInteraction> = interactions.to_vec();
    let mut triplets = source.triplets.clone();
    let mut dropped_relations: BTreeSet<String> = BTreeSet::new();

    loop {
        let mut changed = false;

        // Filter 1: products absent from the KG.
        let mut kg_members: HashSet<&str> = HashSet::new();
        for (h, _, t) in &triplets {
            kg_members.insert(h);
            kg_members.insert(t);
        }
        let before = inter.len();
        inter.retain(|it| {
            source.entity_types.get(&it.product) == Some(&EntityType::Product)
                && kg_members.contains(it.product.as_str())
        });
        if inter.len() != before {
            changed = true;
        }
        if inter.is_empty() {
            return Err(Error::FilterEmptiedDataset {
                filter: "product-in-kg",
                threshold: "membership in the triplet set".into(),
            });
        }

        // Filter 2: k-core on interaction counts.
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for it in &inter {
            *counts.entry(it.user.as_str()).or_default() += 1;
            *counts.entry(it.product.as_str()).or_default() += 1;
        }
        let victims: HashSet<String> = counts
            .iter()
            .filter(|(_, &c)| c < cfg.min_count)
            .map(|(name, _)| name.to_string())
            .collect();
        if !victims.is_empty() {
            changed = true;
            inter.retain(|it| !victims.contains(&it.user) && !victims.contains(&it.product));
            triplets.retain(|(h, _, t)| !victims.contains(h) && !victims.contains(t));
            if inter.is_empty() {
                return Err(Error::FilterEmptiedDataset {
                    filter: "k-core",
                    threshold: format!("min_count = {}", cfg.min_count),
                });
            }
        }

        // Filter 3: low-share relation types.
        if triplets.is_empty() {
            return Err(Error::FilterEmptiedDataset {
                filter: "relation-share",
                threshold: "no triplets left to carry any relation".into(),
            });
        }
        let total = triplets.len() as f64;
        let mut rel_counts: HashMap<&str, usize> = HashMap::new();
        for (_, r, _) in &triplets {
            *rel_counts.entry(r).or_default() += 1;
        }
        let low: HashSet<String> = rel_counts
            .iter()
            .filter(|(name, &c)| {
                **name != interaction_relation && (c as f64) / total < cfg.min_relation_share
            })
            .map(|(name, _)| name.to_string())
            .collect();
        if !low.is_empty() {
            changed = true;
            dropped_relations.extend(low.iter().cloned());
            triplets.retain(|(_, r, _)| !low.contains(r));
            if triplets.is_empty() {
                return Err(Error::FilterEmptiedDataset {
                    filter: "relation-share",
                    threshold: format!("min_relation_share = {}", cfg.min_relation_share),
                });
            }
        }

        if !changed {
            break;
        }
    }

    // Rebuild the source: only entities still carried by a triplet or an
    // interaction survive; relation ids re-densified in original id order.
    let mut live: HashSet<&str> = HashSet::new();
    for (h, _, t) in &triplets {
        live.insert(h);
        live.insert(t);
    }
    for it in &inter {
        live.insert(&it.user);
        live.insert(&it.product);
    }
    let entity_types: BTreeMap<String, EntityType> = source
        .entity_types
        .iter()
        .filter(|(name, _)| live.contains(name.as_str()))
        .map(|(name, ty)| (name.clone(), *ty))
        .collect();

    let mut used_relations: BTreeSet<&str> = triplets.iter().map(|(_, r, _)| r.as_str()).collect();
    used_relations.insert(interaction_relation);
    let mut surviving: Vec<(&String, u32)> = source
        .relation_ids
        .iter()
        .filter(|(name, _)| used_relations.contains(name.as_str()))
        .map(|(name, &id)| (name, id))
        .collect();
    surviving.sort_by_key(|&(_, id)| id);
    let relation_ids: BTreeMap<String, u32> = surviving
        .into_iter()
        .enumerate()
        .map(|(new_id, (name, _))| (name.clone(), new_id as u32))
        .collect();

    Ok((
        inter,
        GraphSource {
            triplets,
            entity_types,
            relation_ids,
        },
    ))
}

/// Name-keyed split, ready to be written to disk or bound to a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameSplit {
    pub train: Vec<RawInteraction>,
    pub valid: Vec<RawInteraction>,
    pub test: Vec<RawInteraction>,
}

/// Per-user chronological split. Each user's interactions are sorted by
/// timestamp (ties by product name, which equals product-id order), then cut
/// at floor(r1·n) and floor((r1+r2)·n); the remainder goes to test. Users
/// with at least one interaction always keep at least one in train.
pub fn chrono_split(interactions: &[RawInteraction], ratios: (f64, f64, f64)) -> Result<NameSplit> {
    let (r1, r2, r3) = ratios;
    if !(r1 > 0.0 && r2 >= 0.0 && r3 >= 0.0) || (r1 + r2 + r3 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive-train and sum to 1, got ({r1}, {r2}, {r3})"
        )));
    }
    if interactions.is_empty() {
        return Err(Error::EmptyInput("interactions"));
    }
    let mut per_user: BTreeMap<&str, Vec<&RawInteraction>> = BTreeMap::new();
    for it in interactions {
        per_user.entry(&it.user).or_default().push(it);
    }
    let mut split = NameSplit::default();
    for (_, mut items) in per_user {
        items.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.product.cmp(&b.product))
        });
        let n = items.len();
        let mut cut1 = floor_cut(r1, n);
        if cut1 == 0 {
            cut1 = 1;
        }
        let cut2 = floor_cut(r1 + r2, n).max(cut1);
        for (i, it) in items.into_iter().enumerate() {
            let bucket = if i < cut1 {
                &mut split.train
            } else if i < cut2 {
                &mut split.valid
            } else {
                &mut split.test
            };
            bucket.push(it.clone());
        }
    }
    Ok(split)
}

/// floor(ratio·n) with a snap for cumulative ratios like 0.8 that land a
/// hair below the integer they denote.
fn floor_cut(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let f = x.floor();
    if x - f > 1.0 - 1e-9 {
        f as usize + 1
    } else {
        f as usize
    }
}

/// Inject train interactions as interaction-relation triplets so the built
/// graph contains exactly the feedback edges the model may learn from.
pub fn graph_with_train(
    source: &GraphSource,
    train: &[RawInteraction],
    interaction_relation: &str,
) -> GraphSource {
    let mut src = source.clone();
    for it in train {
        src.triplets.push((
            it.user.clone(),
            interaction_relation.to_string(),
            it.product.clone(),
        ));
    }
    src
}

/// Id-bound split plus the per-user train product sets used by the sampler,
/// the decoder's terminal exclusion, and the metrics.
#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl SplitDataset {
    pub fn bind(names: &NameSplit, kg: &KnowledgeGraph) -> Result<Self> {
        let bind_one = |items: &[RawInteraction]| -> Result<Vec<Interaction>> {
            items
                .iter()
                .map(|it| {
                    Ok(Interaction {
                        user: kg
                            .entity_id(&it.user)
                            .ok_or_else(|| Error::UnknownEntity(it.user.clone()))?,
                        product: kg
                            .entity_id(&it.product)
                            .ok_or_else(|| Error::UnknownEntity(it.product.clone()))?,
                        timestamp: it.timestamp,
                    })
                })
                .collect()
        };
        Ok(SplitDataset {
            train: bind_one(&names.train)?,
            valid: bind_one(&names.valid)?,
            test: bind_one(&names.test)?,
        })
    }

    /// Sorted, deduplicated product lists indexed by user id for one part.
    pub fn products_by_user(part: &[Interaction], kg: &KnowledgeGraph) -> Vec<Vec<EntityId>> {
        let mut out = vec![Vec::new(); kg.n_users()];
        for it in part {
            out[it.user.idx()].push(it.product);
        }
        for list in &mut out {
            list.sort_unstable();
            list.dedup();
        }
        out
    }
}

/// Human-readable dataset summary: interaction-side and KG-side size,
/// density over the feedback matrix, sparsity over the entity square, and
/// average degrees.
pub fn stats_report(source: &GraphSource, interactions: &[RawInteraction]) -> String {
    let users: BTreeSet<&str> = source
        .entity_types
        .iter()
        .filter(|(_, t)| **t == EntityType::User)
        .map(|(n, _)| n.as_str())
        .collect();
    let products: BTreeSet<&str> = source
        .entity_types
        .iter()
        .filter(|(_, t)| **t == EntityType::Product)
        .map(|(n, _)| n.as_str())
        .collect();
    let n_entities = source.entity_types.len();
    let n_triplets = source.triplets.len();
    let rel_types: BTreeSet<&str> = source.triplets.iter().map(|(_, r, _)| r.as_str()).collect();
    let density = if users.is_empty() || products.is_empty() {
        0.0
    } else {
        interactions.len() as f64 / (users.len() as f64 * products.len() as f64)
    };
    let sparsity = if n_entities == 0 {
        0.0
    } else {
        n_triplets as f64 / (n_entities as f64 * n_entities as f64)
    };
    let avg_degree = if n_entities == 0 {
        0.0
    } else {
        2.0 * n_triplets as f64 / n_entities as f64
    };
    let per_user = if users.is_empty() {
        0.0
    } else {
        interactions.len() as f64 / users.len() as f64
    };
    let per_product = if products.is_empty() {
        0.0
    } else {
        interactions.len() as f64 / products.len() as f64
    };
    let mut s = String::new();
    s.push_str(&format!("users\t{}\n", users.len()));
    s.push_str(&format!("products\t{}\n", products.len()));
    s.push_str(&format!("interactions\t{}\n", interactions.len()));
    s.push_str(&format!("density\t{density:.6}\t# interactions / (users x products)\n"));
    s.push_str(&format!("entities\t{n_entities}\n"));
    s.push_str("entity_types\t3\t# user, product, external\n");
    s.push_str(&format!("triplets\t{n_triplets}\n"));
    s.push_str(&format!("relation_types\t{}\t# base relations in triplets\n", rel_types.len()));
    s.push_str(&format!("sparsity\t{sparsity:.8}\t# triplets / entities^2\n"));
    s.push_str(&format!("avg_degree\t{avg_degree:.4}\t# 2 x triplets / entities\n"));
    s.push_str(&format!("avg_degree_user\t{per_user:.4}\t# interactions per user\n"));
    s.push_str(&format!("avg_degree_product\t{per_product:.4}\t# interactions per product\n"));
    s
}
