//! Recommendation-quality metrics (utility and beyond-utility, k = 10 by
//! default) and the hop-level faithfulness auditor. All functions are pure
//! over immutable inputs; averages run in sorted user order so results are
//! reproducible bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};

use crate::ingest::Interaction;
use crate::kg::{EntityId, KnowledgeGraph, Path, RelationId};

/// Binary-relevance NDCG: DCG with 1/log2(rank+1) discount over the first
/// k positions, normalized by the ideal DCG of min(|relevant|, k) hits.
/// None when the relevant set is empty (user excluded from averages).
pub fn ndcg_at_k(
    ranked: &[EntityId],
    relevant: &BTreeSet<EntityId>,
    k: usize,
) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    debug_assert!(distinct(ranked), "ranked list must hold distinct items");
    let mut dcg = 0.0;
    for (i, p) in ranked.iter().take(k).enumerate() {
        if relevant.contains(p) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let ideal_hits = relevant.len().min(k);
    let idcg: f64 = (0..ideal_hits).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

/// 1 / rank of the first relevant item in the top k, 0 when none appears.
pub fn mrr_at_k(ranked: &[EntityId], relevant: &BTreeSet<EntityId>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    for (i, p) in ranked.iter().take(k).enumerate() {
        if relevant.contains(p) {
            return Some(1.0 / (i + 1) as f64);
        }
    }
    Some(0.0)
}

pub fn precision_at_k(
    ranked: &[EntityId],
    relevant: &BTreeSet<EntityId>,
    k: usize,
) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|p| relevant.contains(p)).count();
    Some(hits as f64 / k as f64)
}

pub fn recall_at_k(ranked: &[EntityId], relevant: &BTreeSet<EntityId>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|p| relevant.contains(p)).count();
    Some(hits as f64 / relevant.len() as f64)
}

fn distinct(items: &[EntityId]) -> bool {
    let set: BTreeSet<_> = items.iter().collect();
    set.len() == items.len()
}

/// Per-product interaction counts over (train) interactions.
pub fn popularity_counts(train: &[Interaction]) -> BTreeMap<EntityId, u64> {
    let mut counts = BTreeMap::new();
    for it in train {
        *counts.entry(it.product).or_insert(0) += 1;
    }
    counts
}

/// The k most-interacted products; ties broken by ascending product id.
pub fn top_k_popular(popularity: &BTreeMap<EntityId, u64>, k: usize) -> BTreeSet<EntityId> {
    let mut items: Vec<(EntityId, u64)> = popularity.iter().map(|(&p, &c)| (p, c)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    items.into_iter().take(k).map(|(p, _)| p).collect()
}

/// Product → genre entities, read off a designated KG relation.
pub struct GenreIndex {
    pub by_product: BTreeMap<EntityId, BTreeSet<EntityId>>,
    /// Distinct genres reachable from any product.
    pub n_genres: usize,
}

pub fn genre_index(kg: &KnowledgeGraph, genre_relation: RelationId) -> GenreIndex {
    let mut by_product = BTreeMap::new();
    let mut all = BTreeSet::new();
    for p in kg.products() {
        let genres: BTreeSet<EntityId> = kg.neighbors(p, genre_relation).iter().copied().collect();
        all.extend(genres.iter().copied());
        if !genres.is_empty() {
            by_product.insert(p, genres);
        }
    }
    GenreIndex {
        by_product,
        n_genres: all.len(),
    }
}

/// Everything the aggregate evaluation needs besides the lists themselves.
pub struct EvalContext {
    pub k: usize,
    /// Held-out (test) products per user; empty set excludes the user from
    /// relevance metrics.
    pub relevant: BTreeMap<EntityId, BTreeSet<EntityId>>,
    /// Train interaction counts per product.
    pub popularity: BTreeMap<EntityId, u64>,
    /// Number of products in the (post-filter) catalogue.
    pub catalogue_size: usize,
    pub genres: Option<GenreIndex>,
    /// Normalize novelty by user count instead of the max train count.
    pub novelty_by_user_count: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub k: usize,
    /// Users contributing to relevance metrics.
    pub n_users: usize,
    /// Users skipped because their relevant set was empty.
    pub n_excluded: usize,
    pub ndcg: f64,
    pub mrr: f64,
    pub precision: f64,
    pub recall: f64,
    pub serendipity: f64,
    /// None when no genre relation is available.
    pub diversity: Option<f64>,
    pub coverage: f64,
    pub novelty: f64,
    /// Recommended items that carry no genre (diversity blind spots).
    pub items_without_genre: usize,
}

/// Aggregate every metric over per-user ranked product lists.
pub fn evaluate(recs: &[(EntityId, Vec<EntityId>)], ctx: &EvalContext) -> MetricsReport {
    let empty = BTreeSet::new();
    let k = ctx.k;
    let baseline = top_k_popular(&ctx.popularity, k);
    let max_count = ctx.popularity.values().copied().max().unwrap_or(0);

    let mut rel_sums = [0.0f64; 4];
    let mut n_users = 0usize;
    let mut n_excluded = 0usize;
    let mut ser_sum = 0.0;
    let mut ser_n = 0usize;
    let mut div_sum = 0.0;
    let mut div_n = 0usize;
    let mut nov_sum = 0.0;
    let mut nov_n = 0usize;
    let mut items_without_genre = 0usize;
    let mut union: BTreeSet<EntityId> = BTreeSet::new();

    for (user, ranked) in recs {
        let relevant = ctx.relevant.get(user).unwrap_or(&empty);
        match ndcg_at_k(ranked, relevant, k) {
            Some(v) => {
                rel_sums[0] += v;
                rel_sums[1] += mrr_at_k(ranked, relevant, k).unwrap();
                rel_sums[2] += precision_at_k(ranked, relevant, k).unwrap();
                rel_sums[3] += recall_at_k(ranked, relevant, k).unwrap();
                n_users += 1;
            }
            None => n_excluded += 1,
        }
        let top: Vec<EntityId> = ranked.iter().take(k).copied().collect();
        union.extend(top.iter().copied());
        if !top.is_empty() {
            let outside = top.iter().filter(|p| !baseline.contains(p)).count();
            ser_sum += outside as f64 / top.len() as f64;
            ser_n += 1;

            let per_item: f64 = top
                .iter()
                .map(|p| {
                    let count = ctx.popularity.get(p).copied().unwrap_or(0);
                    match ctx.novelty_by_user_count {
                        Some(n_users) if n_users > 0 => 1.0 - count as f64 / n_users as f64,
                        _ if max_count > 0 => 1.0 - count as f64 / max_count as f64,
                        _ => 1.0,
                    }
                })
                .sum::<f64>()
                / top.len() as f64;
            nov_sum += per_item;
            nov_n += 1;

            if let Some(genres) = &ctx.genres {
                let mut seen = BTreeSet::new();
                for p in &top {
                    match genres.by_product.get(p) {
                        Some(g) => seen.extend(g.iter().copied()),
                        None => items_without_genre += 1,
                    }
                }
                let denom = genres.n_genres.min(k);
                if denom > 0 {
                    div_sum += seen.len() as f64 / denom as f64;
                    div_n += 1;
                }
            }
        }
    }

    let avg = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { 0.0 };
    MetricsReport {
        k,
        n_users,
        n_excluded,
        ndcg: avg(rel_sums[0], n_users),
        mrr: avg(rel_sums[1], n_users),
        precision: avg(rel_sums[2], n_users),
        recall: avg(rel_sums[3], n_users),
        serendipity: avg(ser_sum, ser_n),
        diversity: ctx.genres.as_ref().map(|_| avg(div_sum, div_n)),
        coverage: if ctx.catalogue_size > 0 {
            union.len() as f64 / ctx.catalogue_size as f64
        } else {
            0.0
        },
        novelty: avg(nov_sum, nov_n),
        items_without_genre,
    }
}

impl MetricsReport {
    /// Human-readable two-column table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("metric            @{:<4} value\n", self.k));
        s.push_str("------------------------------\n");
        let rows: Vec<(&str, String)> = vec![
            ("ndcg", format!("{:.4}", self.ndcg)),
            ("mrr", format!("{:.4}", self.mrr)),
            ("precision", format!("{:.4}", self.precision)),
            ("recall", format!("{:.4}", self.recall)),
            ("serendipity", format!("{:.4}", self.serendipity)),
            (
                "diversity",
                match self.diversity {
                    Some(v) => format!("{v:.4}"),
                    None => "n/a (no genre relation)".to_string(),
                },
            ),
            ("coverage", format!("{:.4}", self.coverage)),
            ("novelty", format!("{:.4}", self.novelty)),
        ];
        for (name, value) in rows {
            s.push_str(&format!("{name:<22} {value}\n"));
        }
        s.push_str(&format!(
            "users evaluated: {}   excluded (no held-out items): {}\n",
            self.n_users, self.n_excluded
        ));
        if self.items_without_genre > 0 {
            s.push_str(&format!(
                "warning: {} recommended items carry no genre\n",
                self.items_without_genre
            ));
        }
        s
    }

    /// Machine-readable `key\tvalue` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("k\t{}\n", self.k));
        s.push_str(&format!("n_users\t{}\n", self.n_users));
        s.push_str(&format!("n_excluded\t{}\n", self.n_excluded));
        s.push_str(&format!("ndcg\t{}\n", self.ndcg));
        s.push_str(&format!("mrr\t{}\n", self.mrr));
        s.push_str(&format!("precision\t{}\n", self.precision));
        s.push_str(&format!("recall\t{}\n", self.recall));
        s.push_str(&format!("serendipity\t{}\n", self.serendipity));
        match self.diversity {
            Some(v) => s.push_str(&format!("diversity\t{v}\n")),
            None => s.push_str("diversity\tn/a\n"),
        }
        s.push_str(&format!("coverage\t{}\n", self.coverage));
        s.push_str(&format!("novelty\t{}\n", self.novelty));
        s.push_str(&format!("items_without_genre\t{}\n", self.items_without_genre));
        s
    }
}

#[derive(Debug, Clone)]
pub struct FaithfulnessReport {
    pub total: usize,
    /// Audited hop depth N.
    pub hops: usize,
    /// valid_through[i] = fraction of paths whose hops 1..=i+1 all exist.
    pub valid_through: Vec<f64>,
    /// Fraction that are valid end to end at exactly the audited depth.
    pub fully_valid: f64,
}

/// Tabulate cumulative hop-level validity. `None` entries are paths that
/// failed to parse (counted invalid from hop 1). Paths shorter than the
/// audited depth count as invalid beyond their own length.
pub fn audit_faithfulness(
    paths: &[Option<Path>],
    hops: usize,
    kg: &KnowledgeGraph,
) -> FaithfulnessReport {
    let total = paths.len();
    let mut through = vec![0usize; hops];
    let mut fully = 0usize;
    for p in paths {
        let Some(path) = p else { continue };
        let validity = kg.validate_path(path);
        // Hops 1..=valid_hops all exist in the graph.
        let valid_hops = match validity.first_invalid_hop {
            Some(h) => h - 1,
            None => path.hop_count(),
        };
        for slot in through.iter_mut().take(valid_hops) {
            *slot += 1;
        }
        if validity.valid && path.hop_count() == hops {
            fully += 1;
        }
    }
    let frac = |n: usize| if total > 0 { n as f64 / total as f64 } else { 0.0 };
    FaithfulnessReport {
        total,
        hops,
        valid_through: through.into_iter().map(frac).collect(),
        fully_valid: frac(fully),
    }
}

impl FaithfulnessReport {
    pub fn table(&self) -> String {
        let mut s = format!("paths audited: {}\n", self.total);
        for (i, v) in self.valid_through.iter().enumerate() {
            s.push_str(&format!("valid through hop {:<2} {:>8.4}\n", i + 1, v));
        }
        s.push_str(&format!("fully valid        {:>8.4}\n", self.fully_valid));
        s
    }

    pub fn key_values(&self) -> String {
        let mut s = format!("total\t{}\nhops\t{}\n", self.total, self.hops);
        for (i, v) in self.valid_through.iter().enumerate() {
            s.push_str(&format!("valid_through_hop_{}\t{}\n", i + 1, v));
        }
        s.push_str(&format!("fully_valid\t{}\n", self.fully_valid));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityType, GraphSource};
    use std::collections::BTreeMap;

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }

    fn set(ids: &[u32]) -> BTreeSet<EntityId> {
        ids.iter().map(|&i| e(i)).collect()
    }

    #[test]
    fn perfect_topk_scores_one() {
        let ranked: Vec<EntityId> = (0..10).map(e).collect();
        let relevant = set(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(ndcg_at_k(&ranked, &relevant, 10), Some(1.0));
        assert_eq!(precision_at_k(&ranked, &relevant, 10), Some(1.0));
        assert_eq!(recall_at_k(&ranked, &relevant, 10), Some(1.0));
        assert_eq!(mrr_at_k(&ranked, &relevant, 10), Some(1.0));
    }

    #[test]
    fn first_hit_at_rank_three_gives_mrr_third() {
        let ranked: Vec<EntityId> = (0..10).map(e).collect();
        let relevant = set(&[2]);
        assert_eq!(mrr_at_k(&ranked, &relevant, 10), Some(1.0 / 3.0));
    }

    #[test]
    fn single_relevant_at_rank_two_matches_hand_computed_ndcg() {
        // DCG = 1/log2(3), IDCG = 1/log2(2) = 1.
        let ranked = vec![e(5), e(1), e(7)];
        let relevant = set(&[1]);
        let got = ndcg_at_k(&ranked, &relevant, 10).unwrap();
        assert!((got - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((got - 0.6309297535714574).abs() < 1e-12);
    }

    #[test]
    fn empty_relevant_set_excludes_user() {
        let ranked = vec![e(1)];
        assert_eq!(ndcg_at_k(&ranked, &BTreeSet::new(), 10), None);
        assert_eq!(mrr_at_k(&ranked, &BTreeSet::new(), 10), None);
    }

    #[test]
    fn no_hit_in_topk_scores_zero_not_excluded() {
        let ranked = vec![e(1), e(2)];
        let relevant = set(&[9]);
        assert_eq!(ndcg_at_k(&ranked, &relevant, 10), Some(0.0));
        assert_eq!(mrr_at_k(&ranked, &relevant, 10), Some(0.0));
        assert_eq!(precision_at_k(&ranked, &relevant, 10), Some(0.0));
        assert_eq!(recall_at_k(&ranked, &relevant, 10), Some(0.0));
    }

    #[test]
    fn popularity_ties_break_by_product_id() {
        let mut pop = BTreeMap::new();
        pop.insert(e(3), 5u64);
        pop.insert(e(1), 5);
        pop.insert(e(2), 7);
        pop.insert(e(9), 1);
        let top = top_k_popular(&pop, 3);
        assert_eq!(top, set(&[1, 2, 3]), "count desc, then id asc");
    }

    fn ctx(k: usize) -> EvalContext {
        EvalContext {
            k,
            relevant: BTreeMap::new(),
            popularity: BTreeMap::new(),
            catalogue_size: 0,
            genres: None,
            novelty_by_user_count: None,
        }
    }

    #[test]
    fn serendipity_matches_spec_cases() {
        // Baseline = top-2 popular {1, 2}.
        let mut c = ctx(2);
        c.popularity.insert(e(1), 10);
        c.popularity.insert(e(2), 9);
        c.popularity.insert(e(3), 1);
        c.catalogue_size = 4;
        // Identical to baseline → 0; disjoint → 1; half-in → 0.5.
        let r = evaluate(&[(e(100), vec![e(1), e(2)])], &c);
        assert_eq!(r.serendipity, 0.0);
        let r = evaluate(&[(e(100), vec![e(3), e(4)])], &c);
        assert_eq!(r.serendipity, 1.0);
        let r = evaluate(&[(e(100), vec![e(1), e(3)])], &c);
        assert_eq!(r.serendipity, 0.5);
    }

    #[test]
    fn coverage_counts_the_union() {
        let mut c = ctx(10);
        c.catalogue_size = 100;
        let recs: Vec<(EntityId, Vec<EntityId>)> = (0..5)
            .map(|u| (e(1000 + u), (0..10).map(e).collect()))
            .collect();
        assert!((evaluate(&recs, &c).coverage - 0.1).abs() < 1e-15);
        let recs = vec![(e(1000), (0..100).map(e).collect::<Vec<_>>())];
        // Only the top k=10 of a list counts.
        assert!((evaluate(&recs, &c).coverage - 0.1).abs() < 1e-15);
        let recs: Vec<(EntityId, Vec<EntityId>)> = (0..10)
            .map(|u| (e(1000 + u), (u * 10..u * 10 + 10).map(e).collect()))
            .collect();
        assert_eq!(evaluate(&recs, &c).coverage, 1.0);
    }

    #[test]
    fn novelty_matches_direct_formula() {
        let mut c = ctx(3);
        c.popularity.insert(e(1), 8); // the most popular
        c.popularity.insert(e(2), 4);
        c.popularity.insert(e(3), 0);
        c.catalogue_size = 3;
        let r = evaluate(&[(e(100), vec![e(1), e(1)])], &c);
        // Distinctness is the caller's contract; duplicate of most popular
        // still averages to 0 novelty.
        assert_eq!(r.novelty, 0.0);
        let r = evaluate(&[(e(100), vec![e(9), e(8)])], &c);
        assert_eq!(r.novelty, 1.0, "unseen items are maximally novel");
        let r = evaluate(&[(e(100), vec![e(1), e(2), e(3)])], &c);
        let expect = ((1.0 - 1.0) + (1.0 - 0.5) + (1.0 - 0.0)) / 3.0;
        assert!((r.novelty - expect).abs() < 1e-15);
        // Alternative normalization by user count.
        c.novelty_by_user_count = Some(16);
        let r = evaluate(&[(e(100), vec![e(1), e(2)])], &c);
        let expect = ((1.0 - 8.0 / 16.0) + (1.0 - 4.0 / 16.0)) / 2.0;
        assert!((r.novelty - expect).abs() < 1e-15);
    }

    #[test]
    fn diversity_matches_set_count_oracle() {
        let mut by_product = BTreeMap::new();
        // 20 genres exist; recs hit either one or many.
        let mut all = BTreeSet::new();
        for g in 0..20u32 {
            all.insert(e(500 + g));
        }
        for p in 0..10u32 {
            by_product.insert(e(p), set(&[500])); // all same genre
        }
        for p in 10..20u32 {
            by_product.insert(e(p), set(&[500 + (p - 10)])); // distinct genres
        }
        let mut c = ctx(10);
        c.catalogue_size = 20;
        c.genres = Some(GenreIndex {
            by_product: by_product.clone(),
            n_genres: 20,
        });
        let r = evaluate(&[(e(100), (0..10).map(e).collect())], &c);
        assert_eq!(r.diversity, Some(0.1), "one genre over min(20, 10)");
        let r = evaluate(&[(e(100), (10..20).map(e).collect())], &c);
        assert_eq!(r.diversity, Some(1.0));
        // Brute-force oracle on a mixed list.
        let picks: Vec<EntityId> = vec![e(0), e(3), e(11), e(12), e(19)];
        let r = evaluate(&[(e(100), picks.clone())], &c);
        let mut unique = BTreeSet::new();
        for p in &picks {
            unique.extend(by_product[p].iter().copied());
        }
        let oracle = unique.len() as f64 / 10.0;
        assert_eq!(r.diversity, Some(oracle));
        // Missing genre entries are flagged.
        let r = evaluate(&[(e(100), vec![e(0), e(999)])], &c);
        assert_eq!(r.items_without_genre, 1);
    }

    #[test]
    fn three_user_fixture_matches_hand_computation() {
        let mut c = ctx(2);
        c.catalogue_size = 6;
        c.relevant.insert(e(100), set(&[1, 2]));
        c.relevant.insert(e(101), set(&[3]));
        c.relevant.insert(e(102), BTreeSet::new()); // excluded
        c.popularity.insert(e(1), 3);
        c.popularity.insert(e(2), 2);
        c.popularity.insert(e(3), 1);
        let recs = vec![
            (e(100), vec![e(1), e(4)]), // hit at rank 1
            (e(101), vec![e(4), e(3)]), // hit at rank 2
            (e(102), vec![e(5), e(6)]),
        ];
        let r = evaluate(&recs, &c);
        assert_eq!(r.n_users, 2);
        assert_eq!(r.n_excluded, 1);
        // User 100: dcg 1/log2(2)=1, idcg min(2,2)=2 hits → 1 + 1/log2(3).
        let ndcg_a = 1.0 / (1.0 + 1.0 / 3f64.log2());
        // User 101: dcg 1/log2(3), idcg 1.
        let ndcg_b = 1.0 / 3f64.log2();
        assert!((r.ndcg - (ndcg_a + ndcg_b) / 2.0).abs() < 1e-12);
        assert!((r.mrr - (1.0 + 0.5) / 2.0).abs() < 1e-12);
        assert!((r.precision - (0.5 + 0.5) / 2.0).abs() < 1e-12);
        assert!((r.recall - (0.5 + 1.0) / 2.0).abs() < 1e-12);
        // Baseline top-2 = {1, 2}: user100 half outside, others fully.
        assert!((r.serendipity - (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
        // Union {1,3,4,5,6} over catalogue 6.
        assert!((r.coverage - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn user_order_does_not_change_averages() {
        let mut c = ctx(3);
        c.catalogue_size = 50;
        for u in 0..7u32 {
            c.relevant.insert(e(100 + u), set(&[u, u + 1, u + 2]));
        }
        for p in 0..30u32 {
            c.popularity.insert(e(p), (p % 5) as u64);
        }
        let mut recs: Vec<(EntityId, Vec<EntityId>)> = (0..7u32)
            .map(|u| (e(100 + u), vec![e(u + 1), e(u + 7), e(u + 2)]))
            .collect();
        let a = evaluate(&recs, &c);
        recs.reverse();
        let b = evaluate(&recs, &c);
        assert!((a.ndcg - b.ndcg).abs() < 1e-12);
        assert!((a.mrr - b.mrr).abs() < 1e-12);
        assert!((a.serendipity - b.serendipity).abs() < 1e-12);
        assert!((a.novelty - b.novelty).abs() < 1e-12);
        assert!((a.coverage - b.coverage).abs() < 1e-12);
    }

    fn audit_kg() -> KnowledgeGraph {
        let mut entity_types = BTreeMap::new();
        entity_types.insert("u0".into(), EntityType::User);
        entity_types.insert("p0".into(), EntityType::Product);
        entity_types.insert("p1".into(), EntityType::Product);
        entity_types.insert("a0".into(), EntityType::External);
        let mut relation_ids = BTreeMap::new();
        relation_ids.insert("watched".into(), 0u32);
        relation_ids.insert("starred_by".into(), 1u32);
        GraphSource {
            triplets: vec![
                ("u0".into(), "watched".into(), "p0".into()),
                ("p0".into(), "starred_by".into(), "a0".into()),
                ("p1".into(), "starred_by".into(), "a0".into()),
            ],
            entity_types,
            relation_ids,
        }
        .build("watched")
        .unwrap()
    }

    #[test]
    fn fully_valid_paths_audit_clean() {
        let kg = audit_kg();
        let u0 = kg.entity_id("u0").unwrap();
        let p0 = kg.entity_id("p0").unwrap();
        let p1 = kg.entity_id("p1").unwrap();
        let a0 = kg.entity_id("a0").unwrap();
        let watched = kg.relation_id("watched").unwrap();
        let sb = kg.relation_id("starred_by").unwrap();
        let sb_inv = kg.inverse(sb);
        let good = Path::new(u0, vec![(watched, p0), (sb, a0), (sb_inv, p1)]);
        assert!(kg.validate_path(&good).valid);
        let report = audit_faithfulness(&[Some(good.clone()), Some(good)], 3, &kg);
        assert_eq!(report.valid_through, vec![1.0, 1.0, 1.0]);
        assert_eq!(report.fully_valid, 1.0);
    }

    #[test]
    fn hop_two_corruption_in_half_the_set() {
        let kg = audit_kg();
        let u0 = kg.entity_id("u0").unwrap();
        let p0 = kg.entity_id("p0").unwrap();
        let p1 = kg.entity_id("p1").unwrap();
        let a0 = kg.entity_id("a0").unwrap();
        let watched = kg.relation_id("watched").unwrap();
        let sb = kg.relation_id("starred_by").unwrap();
        let sb_inv = kg.inverse(sb);
        let good = Path::new(u0, vec![(watched, p0), (sb, a0), (sb_inv, p1)]);
        // Hop 2 points somewhere the graph does not go (p0 -watched-> u0 is
        // not an edge; watched goes user → product only).
        let bad = Path::new(u0, vec![(watched, p0), (watched, p0), (sb_inv, p1)]);
        assert_eq!(kg.validate_path(&bad).first_invalid_hop, Some(2));
        let report = audit_faithfulness(&[Some(good), Some(bad)], 3, &kg);
        assert_eq!(report.valid_through[0], 1.0, "hop 1 intact everywhere");
        assert_eq!(report.valid_through[1], 0.5);
        assert_eq!(report.valid_through[2], 0.5);
        assert_eq!(report.fully_valid, 0.5);
    }

    #[test]
    fn unparseable_sequences_fail_from_hop_one() {
        let kg = audit_kg();
        let report = audit_faithfulness(&[None, None], 3, &kg);
        assert_eq!(report.valid_through, vec![0.0, 0.0, 0.0]);
        assert_eq!(report.fully_valid, 0.0);
        assert_eq!(report.total, 2);
    }

    #[test]
    fn empty_audit_reports_zeros() {
        let kg = audit_kg();
        let report = audit_faithfulness(&[], 3, &kg);
        assert_eq!(report.total, 0);
        assert_eq!(report.valid_through, vec![0.0, 0.0, 0.0]);
        assert_eq!(report.fully_valid, 0.0);
    }

    #[test]
    fn fractions_never_increase_with_depth() {
        let kg = audit_kg();
        let u0 = kg.entity_id("u0").unwrap();
        let p0 = kg.entity_id("p0").unwrap();
        let p1 = kg.entity_id("p1").unwrap();
        let a0 = kg.entity_id("a0").unwrap();
        let watched = kg.relation_id("watched").unwrap();
        let sb = kg.relation_id("starred_by").unwrap();
        let sb_inv = kg.inverse(sb);
        // A mix of clean, short, corrupted and unparseable paths.
        let paths = vec![
            Some(Path::new(u0, vec![(watched, p0), (sb, a0), (sb_inv, p1)])),
            Some(Path::new(u0, vec![(watched, p0), (sb, a0)])),
            Some(Path::new(u0, vec![(watched, p0), (watched, p0), (sb_inv, p1)])),
            Some(Path::new(u0, vec![(sb, p0), (sb, a0), (sb_inv, p1)])),
            None,
        ];
        let report = audit_faithfulness(&paths, 3, &kg);
        for w in report.valid_through.windows(2) {
            assert!(w[0] >= w[1], "cumulative fractions must not increase");
        }
        assert!(report.fully_valid <= *report.valid_through.last().unwrap() + 1e-15);
        // Through hop 2: the clean 3-hop path and the clean 2-hop path;
        // the latter still cannot be fully valid at depth 3.
        assert_eq!(report.valid_through[1], 2.0 / 5.0);
        assert_eq!(report.fully_valid, 1.0 / 5.0);
    }

    #[test]
    fn renderers_cover_all_fields() {
        let mut c = ctx(10);
        c.catalogue_size = 10;
        c.relevant.insert(e(100), set(&[1]));
        let r = evaluate(&[(e(100), vec![e(1)])], &c);
        let table = r.table();
        for key in ["ndcg", "mrr", "precision", "recall", "serendipity", "coverage", "novelty"] {
            assert!(table.contains(key), "table misses {key}");
            assert!(r.key_values().contains(key));
        }
        assert!(table.contains("n/a"), "genre-less diversity is flagged");
        let kg = audit_kg();
        let f = audit_faithfulness(&[], 2, &kg);
        assert!(f.table().contains("paths audited"));
        assert!(f.key_values().contains("valid_through_hop_2"));
    }
}
