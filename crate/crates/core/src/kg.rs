//! In-memory knowledge graph with typed entities, inverse-closed relations
//! and constant-time reachability queries.
//!
//! The graph is immutable after [`KnowledgeGraph::build`]; every query is
//! read-only. For each base relation `r` an inverse `r + n_base` is
//! synthesized, so traversal can follow every edge in both directions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path as FsPath;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Suffix appended to a base relation name to form its inverse's name.
pub const INVERSE_SUFFIX: &str = "⁻¹";

/// Dense 0-based entity identifier. Users come first, then products,
/// then external entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

/// Dense 0-based relation identifier. Base relations occupy `0..n_base`,
/// inverses `n_base..2*n_base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityType {
    User,
    Product,
    External,
}

impl EntityType {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "user" => Some(EntityType::User),
            "product" => Some(EntityType::Product),
            "external" => Some(EntityType::External),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::User => "user",
            EntityType::Product => "product",
            EntityType::External => "external",
        }
    }
}

/// A single directed edge of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// One token of a path: entities at even positions, relations at odd ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PathToken {
    Entity(EntityId),
    Relation(RelationId),
}

/// An alternating entity/relation sequence `e_0, r_1, e_1, ..., r_N, e_N`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Path {
    pub start: EntityId,
    pub hops: Vec<(RelationId, EntityId)>,
}

impl Path {
    pub fn new(start: EntityId, hops: Vec<(RelationId, EntityId)>) -> Self {
        Path { start, hops }
    }

    /// Number of hops N.
    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    /// Interior token length `2N + 1`.
    pub fn token_len(&self) -> usize {
        2 * self.hops.len() + 1
    }

    /// Terminal entity `e_N` (the start entity for a 0-hop path).
    pub fn terminal(&self) -> EntityId {
        self.hops.last().map(|&(_, e)| e).unwrap_or(self.start)
    }

    /// Tokens in path order.
    pub fn tokens(&self) -> Vec<PathToken> {
        let mut out = Vec::with_capacity(self.token_len());
        out.push(PathToken::Entity(self.start));
        for &(r, e) in &self.hops {
            out.push(PathToken::Relation(r));
            out.push(PathToken::Entity(e));
        }
        out
    }

    /// Parse an alternating token slice back into a path.
    pub fn from_tokens(tokens: &[PathToken]) -> Result<Self> {
        if tokens.len().is_multiple_of(2) {
            return Err(Error::MalformedPath(format!(
                "even token count {}, expected alternating e,r,e,...,e",
                tokens.len()
            )));
        }
        let start = match tokens[0] {
            PathToken::Entity(e) => e,
            PathToken::Relation(r) => {
                return Err(Error::MalformedPath(format!(
                    "position 0 holds relation {r}, expected an entity"
                )))
            }
        };
        let mut hops = Vec::with_capacity(tokens.len() / 2);
        for pair in tokens[1..].chunks(2) {
            let r = match pair[0] {
                PathToken::Relation(r) => r,
                PathToken::Entity(e) => {
                    return Err(Error::MalformedPath(format!(
                        "expected relation, found entity {e}"
                    )))
                }
            };
            let e = match pair[1] {
                PathToken::Entity(e) => e,
                PathToken::Relation(r) => {
                    return Err(Error::MalformedPath(format!(
                        "expected entity, found relation {r}"
                    )))
                }
            };
            hops.push((r, e));
        }
        Ok(Path { start, hops })
    }
}

/// Outcome of validating a path against the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathValidity {
    pub valid: bool,
    /// 1-based index of the first hop whose triplet is missing.
    pub first_invalid_hop: Option<usize>,
}

/// Raw, name-keyed graph data as read from disk, before id assignment.
#[derive(Debug, Clone, Default)]
pub struct GraphSource {
    /// `(head, relation, tail)` by name.
    pub triplets: Vec<(String, String, String)>,
    pub entity_types: BTreeMap<String, EntityType>,
    /// Base relation name -> declared id.
    pub relation_ids: BTreeMap<String, u32>,
}

impl GraphSource {
    pub fn load(
        triplet_file: &FsPath,
        entity_type_file: &FsPath,
        relation_file: &FsPath,
    ) -> Result<Self> {
        let mut src = GraphSource::default();
        for (lineno, line) in read_lines(triplet_file)? {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(triplet_file, lineno, "expected head<TAB>relation<TAB>tail"));
            }
            src.triplets.push((
                fields[0].to_string(),
                fields[1].to_string(),
                fields[2].to_string(),
            ));
        }
        for (lineno, line) in read_lines(entity_type_file)? {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(malformed(entity_type_file, lineno, "expected entity<TAB>type"));
            }
            let ty = EntityType::parse(fields[1]).ok_or_else(|| {
                malformed(entity_type_file, lineno, "type must be user|product|external")
            })?;
            src.entity_types.insert(fields[0].to_string(), ty);
        }
        for (lineno, line) in read_lines(relation_file)? {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(malformed(relation_file, lineno, "expected relation<TAB>id"));
            }
            let id: u32 = fields[1]
                .parse()
                .map_err(|_| malformed(relation_file, lineno, "relation id must be an integer"))?;
            if fields[0].contains(INVERSE_SUFFIX) {
                return Err(malformed(
                    relation_file,
                    lineno,
                    "base relation names may not contain the inverse marker",
                ));
            }
            src.relation_ids.insert(fields[0].to_string(), id);
        }
        Ok(src)
    }

    /// Build the graph, assigning dense entity ids partitioned by type
    /// (users, products, externals; each sorted by name).
    pub fn build(&self, interaction_relation: &str) -> Result<KnowledgeGraph> {
        KnowledgeGraph::build(self, interaction_relation)
    }

    /// Write the three files [`GraphSource::load`] reads.
    pub fn write(
        &self,
        triplet_file: &FsPath,
        entity_type_file: &FsPath,
        relation_file: &FsPath,
    ) -> Result<()> {
        use std::fmt::Write as _;
        let mut s = String::from("# head\trelation\ttail\n");
        for (h, r, t) in &self.triplets {
            writeln!(s, "{h}\t{r}\t{t}").expect("string write");
        }
        fs::write(triplet_file, s)?;

        let mut s = String::from("# entity\ttype\n");
        for (e, ty) in &self.entity_types {
            writeln!(s, "{e}\t{}", ty.as_str()).expect("string write");
        }
        fs::write(entity_type_file, s)?;

        let mut s = String::from("# relation\tid\n");
        for (r, id) in &self.relation_ids {
            writeln!(s, "{r}\t{id}").expect("string write");
        }
        fs::write(relation_file, s)?;
        Ok(())
    }
}

fn malformed(file: &FsPath, line: usize, msg: &str) -> Error {
    Error::MalformedLine {
        file: file.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}

/// Non-empty, non-comment lines of a tab-separated file with 1-based numbers.
pub(crate) fn read_lines(path: &FsPath) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
        path: path.display().to_string(),
        hint: e.to_string(),
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

/// Immutable knowledge graph with a forward index over (entity, relation).
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    entity_types: Vec<EntityType>,
    entity_lookup: HashMap<String, EntityId>,
    /// Base relation names followed by synthesized inverse names.
    relation_names: Vec<String>,
    relation_lookup: HashMap<String, RelationId>,
    n_base_relations: u32,
    n_users: u32,
    n_products: u32,
    interaction_relation: RelationId,
    /// Deduplicated triplets, sorted; inverse edges are not stored here.
    triplets: Vec<Triplet>,
    duplicates_collapsed: usize,
    /// Per entity: (relation, sorted tails), sorted by relation id.
    /// Covers both directions; tails under `inverse(r)` realize the inverse edges.
    adjacency: Vec<Vec<(RelationId, Vec<EntityId>)>>,
}

impl KnowledgeGraph {
    pub fn build(src: &GraphSource, interaction_relation: &str) -> Result<Self> {
        if src.triplets.is_empty() {
            return Err(Error::EmptyGraph);
        }

        // Relation ids come from the name file and must be dense.
        let n_base = src.relation_ids.len() as u32;
        let mut relation_names = vec![String::new(); n_base as usize];
        for (name, &id) in &src.relation_ids {
            if id >= n_base || !relation_names[id as usize].is_empty() {
                return Err(Error::Config(format!(
                    "relation ids must be unique and contiguous in 0..{n_base}, got {id} for `{name}`"
                )));
            }
            relation_names[id as usize] = name.clone();
        }
        for i in 0..n_base as usize {
            relation_names.push(format!("{}{INVERSE_SUFFIX}", relation_names[i]));
        }
        let relation_lookup: HashMap<String, RelationId> = relation_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), RelationId(i as u32)))
            .collect();
        let rf = *src
            .relation_ids
            .get(interaction_relation)
            .ok_or_else(|| Error::UnknownRelation(interaction_relation.to_string()))?;

        // Entity ids: users, then products, then externals, each by name.
        let mut by_type: [Vec<&String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (name, ty) in &src.entity_types {
            let slot = match ty {
                EntityType::User => 0,
                EntityType::Product => 1,
                EntityType::External => 2,
            };
            by_type[slot].push(name);
        }
        let mut entity_names = Vec::with_capacity(src.entity_types.len());
        let mut entity_types = Vec::with_capacity(src.entity_types.len());
        for (slot, ty) in [
            (0, EntityType::User),
            (1, EntityType::Product),
            (2, EntityType::External),
        ] {
            for name in &by_type[slot] {
                entity_names.push((*name).clone());
                entity_types.push(ty);
            }
        }
        let entity_lookup: HashMap<String, EntityId> = entity_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), EntityId(i as u32)))
            .collect();

        let mut set = BTreeSet::new();
        let mut duplicates = 0usize;
        for (head, rel, tail) in &src.triplets {
            let h = *entity_lookup
                .get(head)
                .ok_or_else(|| Error::UnknownEntity(head.clone()))?;
            let t = *entity_lookup
                .get(tail)
                .ok_or_else(|| Error::UnknownEntity(tail.clone()))?;
            let r = src
                .relation_ids
                .get(rel)
                .copied()
                .ok_or_else(|| Error::UnknownRelation(rel.clone()))?;
            if !set.insert(Triplet {
                head: h,
                relation: RelationId(r),
                tail: t,
            }) {
                duplicates += 1;
            }
        }
        let triplets: Vec<Triplet> = set.into_iter().collect();

        let rf = RelationId(rf);
        for t in &triplets {
            if t.relation == rf
                && (entity_types[t.head.idx()] != EntityType::User
                    || entity_types[t.tail.idx()] != EntityType::Product)
            {
                return Err(Error::Config(format!(
                    "interaction relation `{interaction_relation}` must connect user->product, \
                     found {} -> {}",
                    entity_names[t.head.idx()],
                    entity_names[t.tail.idx()]
                )));
            }
        }
        if !triplets.iter().any(|t| t.relation == rf) {
            return Err(Error::Config(format!(
                "interaction relation `{interaction_relation}` does not occur in the triplets"
            )));
        }

        // Forward index over both directions.
        let mut adj: Vec<BTreeMap<RelationId, Vec<EntityId>>> =
            vec![BTreeMap::new(); entity_names.len()];
        for t in &triplets {
            adj[t.head.idx()].entry(t.relation).or_default().push(t.tail);
            let inv = RelationId(t.relation.0 + n_base);
            adj[t.tail.idx()].entry(inv).or_default().push(t.head);
        }
        let adjacency: Vec<Vec<(RelationId, Vec<EntityId>)>> = adj
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|(r, mut tails)| {
                        tails.sort_unstable();
                        tails.dedup();
                        (r, tails)
                    })
                    .collect()
            })
            .collect();

        let n_users = entity_types.iter().filter(|t| **t == EntityType::User).count() as u32;
        let n_products = entity_types
            .iter()
            .filter(|t| **t == EntityType::Product)
            .count() as u32;

        Ok(KnowledgeGraph {
            entity_names,
            entity_types,
            entity_lookup,
            relation_names,
            relation_lookup,
            n_base_relations: n_base,
            n_users,
            n_products,
            interaction_relation: rf,
            triplets,
            duplicates_collapsed: duplicates,
            adjacency,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entity_names.len()
    }

    /// Total relation count including inverses.
    pub fn n_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn n_base_relations(&self) -> usize {
        self.n_base_relations as usize
    }

    pub fn n_triplets(&self) -> usize {
        self.triplets.len()
    }

    pub fn duplicates_collapsed(&self) -> usize {
        self.duplicates_collapsed
    }

    pub fn interaction_relation(&self) -> RelationId {
        self.interaction_relation
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn entity_type(&self, e: EntityId) -> EntityType {
        self.entity_types[e.idx()]
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entity_names[e.idx()]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relation_names[r.idx()]
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_lookup.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_lookup.get(name).copied()
    }

    /// Users occupy ids `0..n_users`.
    pub fn users(&self) -> impl Iterator<Item = EntityId> {
        (0..self.n_users).map(EntityId)
    }

    /// Products occupy ids `n_users..n_users + n_products`.
    pub fn products(&self) -> impl Iterator<Item = EntityId> {
        (self.n_users..self.n_users + self.n_products).map(EntityId)
    }

    pub fn n_users(&self) -> usize {
        self.n_users as usize
    }

    pub fn n_products(&self) -> usize {
        self.n_products as usize
    }

    pub fn is_product(&self, e: EntityId) -> bool {
        self.entity_types[e.idx()] == EntityType::Product
    }

    pub fn is_user(&self, e: EntityId) -> bool {
        self.entity_types[e.idx()] == EntityType::User
    }

    /// Inverse of a relation; the inverse of an inverse is the base relation.
    pub fn inverse(&self, r: RelationId) -> RelationId {
        if r.0 < self.n_base_relations {
            RelationId(r.0 + self.n_base_relations)
        } else {
            RelationId(r.0 - self.n_base_relations)
        }
    }

    /// Tails reachable from `e` via `r`, ascending. Empty when unreachable.
    pub fn neighbors(&self, e: EntityId, r: RelationId) -> &[EntityId] {
        match self.adjacency[e.idx()].binary_search_by_key(&r, |&(rel, _)| rel) {
            Ok(i) => &self.adjacency[e.idx()][i].1,
            Err(_) => &[],
        }
    }

    /// Relations usable from `e`, ascending; each has a nonempty neighbor list.
    pub fn relations_from(&self, e: EntityId) -> impl Iterator<Item = RelationId> + '_ {
        self.adjacency[e.idx()].iter().map(|&(r, _)| r)
    }

    pub fn has_relation_from(&self, e: EntityId, r: RelationId) -> bool {
        !self.neighbors(e, r).is_empty()
    }

    /// All (relation, tail) continuations leaving `e`, in (r, tail) order.
    pub fn continuations(&self, e: EntityId) -> impl Iterator<Item = (RelationId, EntityId)> + '_ {
        self.adjacency[e.idx()]
            .iter()
            .flat_map(|(r, tails)| tails.iter().map(move |&t| (*r, t)))
    }

    /// Whether hop `(head, r, tail)` exists, in either stored direction.
    pub fn has_edge(&self, head: EntityId, r: RelationId, tail: EntityId) -> bool {
        self.neighbors(head, r).binary_search(&tail).is_ok()
    }

    /// Check every hop of a structurally well-formed path.
    pub fn validate_path(&self, p: &Path) -> PathValidity {
        let mut prev = p.start;
        for (i, &(r, e)) in p.hops.iter().enumerate() {
            if !self.has_edge(prev, r, e) {
                return PathValidity {
                    valid: false,
                    first_invalid_hop: Some(i + 1),
                };
            }
            prev = e;
        }
        PathValidity {
            valid: true,
            first_invalid_hop: None,
        }
    }

    /// Validate a raw token slice: malformed alternation is a structural
    /// error, distinct from a missing hop.
    pub fn validate_tokens(&self, tokens: &[PathToken]) -> Result<PathValidity> {
        let path = Path::from_tokens(tokens)?;
        Ok(self.validate_path(&path))
    }

    /// Digest over the full index layout; equal digests mean byte-identical
    /// adjacency structure.
    pub fn index_digest(&self) -> String {
        let mut h = Sha256::new();
        for (e, rows) in self.adjacency.iter().enumerate() {
            h.update((e as u64).to_le_bytes());
            for (r, tails) in rows {
                h.update(r.0.to_le_bytes());
                for t in tails {
                    h.update(t.0.to_le_bytes());
                }
                h.update(u32::MAX.to_le_bytes());
            }
        }
        for name in &self.entity_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for name in &self.relation_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }

    /// Render a path as space-separated token names.
    pub fn path_to_names(&self, p: &Path) -> String {
        let mut out = String::new();
        out.push_str(self.entity_name(p.start));
        for &(r, e) in &p.hops {
            out.push(' ');
            out.push_str(self.relation_name(r));
            out.push(' ');
            out.push_str(self.entity_name(e));
        }
        out
    }

    /// Parse a space-separated token-name line into a path.
    pub fn path_from_names(&self, line: &str) -> Result<Path> {
        let mut tokens = Vec::new();
        for (i, word) in line.split_whitespace().enumerate() {
            if i % 2 == 0 {
                let e = self
                    .entity_id(word)
                    .ok_or_else(|| Error::UnknownEntity(word.to_string()))?;
                tokens.push(PathToken::Entity(e));
            } else {
                let r = self
                    .relation_id(word)
                    .ok_or_else(|| Error::UnknownRelation(word.to_string()))?;
                tokens.push(PathToken::Relation(r));
            }
        }
        Path::from_tokens(&tokens)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Five-triplet toy graph in the shape of a user/movie/actor KG.
    pub(crate) fn toy_source() -> GraphSource {
        let mut src = GraphSource {
            triplets: vec![
                ("u0".into(), "watched".into(), "m0".into()),
                ("u0".into(), "watched".into(), "m1".into()),
                ("m0".into(), "starred_by".into(), "a0".into()),
                ("m1".into(), "starred_by".into(), "a0".into()),
                ("m2".into(), "starred_by".into(), "a0".into()),
            ],
            ..GraphSource::default()
        };
        for (name, ty) in [
            ("u0", EntityType::User),
            ("m0", EntityType::Product),
            ("m1", EntityType::Product),
            ("m2", EntityType::Product),
            ("a0", EntityType::External),
        ] {
            src.entity_types.insert(name.into(), ty);
        }
        src.relation_ids.insert("watched".into(), 0);
        src.relation_ids.insert("starred_by".into(), 1);
        src
    }

    fn one_edge_source() -> GraphSource {
        let mut src = GraphSource {
            triplets: vec![("u0".into(), "watched".into(), "p0".into())],
            ..GraphSource::default()
        };
        src.entity_types.insert("u0".into(), EntityType::User);
        src.entity_types.insert("p0".into(), EntityType::Product);
        src.relation_ids.insert("watched".into(), 0);
        src
    }

    #[test]
    fn single_triplet_has_inverse_closure() {
        let kg = one_edge_source().build("watched").unwrap();
        let u0 = kg.entity_id("u0").unwrap();
        let p0 = kg.entity_id("p0").unwrap();
        let watched = kg.relation_id("watched").unwrap();
        assert_eq!(kg.neighbors(u0, watched), &[p0]);
        assert_eq!(kg.neighbors(p0, kg.inverse(watched)), &[u0]);
        // Direction matters: `watched` does not leave p0.
        assert!(kg.neighbors(p0, watched).is_empty());
    }

    #[test]
    fn empty_triplet_list_is_an_error() {
        let mut src = one_edge_source();
        src.triplets.clear();
        match src.build("watched") {
            Err(Error::EmptyGraph) => {}
            other => panic!("expected EmptyGraph, got {other:?}"),
        }
    }

    #[test]
    fn toy_graph_relation_index_of_actor() {
        let kg = toy_source().build("watched").unwrap();
        let a0 = kg.entity_id("a0").unwrap();
        let starred = kg.relation_id("starred_by").unwrap();
        let rels: Vec<RelationId> = kg.relations_from(a0).collect();
        assert_eq!(rels, vec![kg.inverse(starred)]);
    }

    #[test]
    fn toy_graph_neighbors_match_brute_force() {
        let src = toy_source();
        let kg = src.build("watched").unwrap();
        // Brute-force scan of the triplet list, both directions.
        for e in 0..kg.n_entities() as u32 {
            for r in 0..kg.n_relations() as u32 {
                let e = EntityId(e);
                let r = RelationId(r);
                let mut expect: Vec<EntityId> = kg
                    .triplets()
                    .iter()
                    .filter_map(|t| {
                        if r.0 < kg.n_base_relations() as u32 {
                            (t.head == e && t.relation == r).then_some(t.tail)
                        } else {
                            (t.tail == e && kg.inverse(t.relation) == r).then_some(t.head)
                        }
                    })
                    .collect();
                expect.sort_unstable();
                expect.dedup();
                assert_eq!(kg.neighbors(e, r), expect.as_slice(), "e={e} r={r}");
            }
        }
    }

    #[test]
    fn duplicate_triplets_collapse_with_count() {
        let mut src = one_edge_source();
        src.triplets.push(("u0".into(), "watched".into(), "p0".into()));
        let kg = src.build("watched").unwrap();
        assert_eq!(kg.n_triplets(), 1);
        assert_eq!(kg.duplicates_collapsed(), 1);
    }

    #[test]
    fn unknown_entity_is_structural_error() {
        let mut src = one_edge_source();
        src.triplets.push(("ghost".into(), "watched".into(), "p0".into()));
        match src.build("watched") {
            Err(Error::UnknownEntity(name)) => assert_eq!(name, "ghost"),
            other => panic!("expected UnknownEntity, got {other:?}"),
        }
    }

    #[test]
    fn interaction_relation_must_connect_user_to_product() {
        let mut src = toy_source();
        src.triplets.push(("m0".into(), "watched".into(), "m1".into()));
        assert!(matches!(src.build("watched"), Err(Error::Config(_))));
    }

    #[test]
    fn validate_path_flags_first_missing_hop() {
        let kg = toy_source().build("watched").unwrap();
        let u0 = kg.entity_id("u0").unwrap();
        let m0 = kg.entity_id("m0").unwrap();
        let m2 = kg.entity_id("m2").unwrap();
        let a0 = kg.entity_id("a0").unwrap();
        let watched = kg.relation_id("watched").unwrap();
        let starred = kg.relation_id("starred_by").unwrap();

        let good = Path::new(
            u0,
            vec![(watched, m0), (starred, a0), (kg.inverse(starred), m2)],
        );
        assert_eq!(
            kg.validate_path(&good),
            PathValidity { valid: true, first_invalid_hop: None }
        );

        // Corrupt e_2: m0 is not connected to m2 by starred_by.
        let bad = Path::new(
            u0,
            vec![(watched, m0), (starred, m2), (kg.inverse(starred), m2)],
        );
        assert_eq!(
            kg.validate_path(&bad),
            PathValidity { valid: false, first_invalid_hop: Some(2) }
        );
    }

    #[test]
    fn zero_hop_path_is_valid() {
        let kg = toy_source().build("watched").unwrap();
        let p = Path::new(kg.entity_id("a0").unwrap(), vec![]);
        assert!(kg.validate_path(&p).valid);
    }

    #[test]
    fn malformed_alternation_is_distinct_from_invalid_hop() {
        let kg = toy_source().build("watched").unwrap();
        let u0 = kg.entity_id("u0").unwrap();
        let watched = kg.relation_id("watched").unwrap();
        let toks = vec![PathToken::Entity(u0), PathToken::Entity(u0)];
        assert!(matches!(kg.validate_tokens(&toks), Err(Error::MalformedPath(_))));
        let toks = vec![PathToken::Relation(watched)];
        assert!(matches!(kg.validate_tokens(&toks), Err(Error::MalformedPath(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let a = toy_source().build("watched").unwrap();
        let b = toy_source().build("watched").unwrap();
        assert_eq!(a.index_digest(), b.index_digest());
    }

    #[test]
    fn path_name_roundtrip() {
        let kg = toy_source().build("watched").unwrap();
        let p = kg
            .path_from_names("u0 watched m0 starred_by a0 starred_by⁻¹ m2")
            .unwrap();
        assert_eq!(p.hop_count(), 3);
        assert_eq!(kg.path_to_names(&p), "u0 watched m0 starred_by a0 starred_by⁻¹ m2");
        assert!(kg.validate_path(&p).valid);
    }
}
