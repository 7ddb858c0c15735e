//! Word-level bijection between KG path elements and token ids.
//!
//! Id layout is fixed: specials (bos, eos, pad), then entities in entity-id
//! order, then relations (inverses included) in relation-id order, so
//! `|V| = |E| + |R| + 3` and ids are stable across runs over the same graph.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{hex, read_lines, EntityId, KnowledgeGraph, Path, PathToken, RelationId};

pub const BOS_NAME: &str = "<bos>";
pub const EOS_NAME: &str = "<eos>";
pub const PAD_NAME: &str = "<pad>";
pub const N_SPECIALS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Token type channel; the discriminant indexes the type-embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum TokenType {
    Entity = 0,
    Relation = 1,
    Special = 2,
}

impl TokenType {
    pub fn idx(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenType::Entity => "entity",
            TokenType::Relation => "relation",
            TokenType::Special => "special",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "entity" => Some(TokenType::Entity),
            "relation" => Some(TokenType::Relation),
            "special" => Some(TokenType::Special),
            _ => None,
        }
    }
}

/// A model-ready sequence: ids with their parallel type channel. Positions
/// are implicit, `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub type_ids: Vec<TokenType>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.ids.len()
    }

    /// Token count between bos and eos.
    pub fn interior_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    names: Vec<String>,
    lookup: HashMap<String, TokenId>,
    n_entities: u32,
    n_relations: u32,
}

pub const BOS: TokenId = TokenId(0);
pub const EOS: TokenId = TokenId(1);
pub const PAD: TokenId = TokenId(2);

impl Vocabulary {
    pub fn build(kg: &KnowledgeGraph) -> Result<Self> {
        let n_entities = kg.n_entities() as u32;
        let n_relations = kg.n_relations() as u32;
        let mut names = Vec::with_capacity((N_SPECIALS + n_entities + n_relations) as usize);
        names.push(BOS_NAME.to_string());
        names.push(EOS_NAME.to_string());
        names.push(PAD_NAME.to_string());
        for e in 0..n_entities {
            names.push(kg.entity_name(EntityId(e)).to_string());
        }
        for r in 0..n_relations {
            names.push(kg.relation_name(RelationId(r)).to_string());
        }
        let mut lookup = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if lookup.insert(name.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::Config(format!(
                    "token name collision on `{name}`; entity, relation and special names must be pairwise distinct"
                )));
            }
        }
        Ok(Vocabulary {
            names,
            lookup,
            n_entities,
            n_relations,
        })
    }

    /// `|V| = |E| + |R| + 3`.
    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities as usize
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations as usize
    }

    pub fn entity_token(&self, e: EntityId) -> TokenId {
        debug_assert!(e.0 < self.n_entities);
        TokenId(N_SPECIALS + e.0)
    }

    pub fn relation_token(&self, r: RelationId) -> TokenId {
        debug_assert!(r.0 < self.n_relations);
        TokenId(N_SPECIALS + self.n_entities + r.0)
    }

    /// Entity behind a token, if it is an entity token.
    pub fn entity_of(&self, t: TokenId) -> Option<EntityId> {
        (t.0 >= N_SPECIALS && t.0 < N_SPECIALS + self.n_entities)
            .then(|| EntityId(t.0 - N_SPECIALS))
    }

    pub fn relation_of(&self, t: TokenId) -> Option<RelationId> {
        (t.0 >= N_SPECIALS + self.n_entities && t.idx() < self.size())
            .then(|| RelationId(t.0 - N_SPECIALS - self.n_entities))
    }

    pub fn type_of(&self, t: TokenId) -> TokenType {
        if t.0 < N_SPECIALS {
            TokenType::Special
        } else if t.0 < N_SPECIALS + self.n_entities {
            TokenType::Entity
        } else {
            TokenType::Relation
        }
    }

    pub fn name_of(&self, t: TokenId) -> Result<&str> {
        self.names
            .get(t.idx())
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownToken(format!("id {t}")))
    }

    pub fn id_of(&self, name: &str) -> Option<TokenId> {
        self.lookup.get(name).copied()
    }

    fn path_token_id(&self, tok: PathToken) -> Result<TokenId> {
        match tok {
            PathToken::Entity(e) => {
                if e.0 >= self.n_entities {
                    return Err(Error::UnknownToken(format!("entity id {e}")));
                }
                Ok(self.entity_token(e))
            }
            PathToken::Relation(r) => {
                if r.0 >= self.n_relations {
                    return Err(Error::UnknownToken(format!("relation id {r}")));
                }
                Ok(self.relation_token(r))
            }
        }
    }

    /// Wrap interior tokens in bos/eos and attach the type channel.
    pub fn encode_interior(&self, interior: &[PathToken]) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(interior.len() + 2);
        let mut type_ids = Vec::with_capacity(interior.len() + 2);
        ids.push(BOS);
        type_ids.push(TokenType::Special);
        for &tok in interior {
            let id = self.path_token_id(tok)?;
            type_ids.push(self.type_of(id));
            ids.push(id);
        }
        ids.push(EOS);
        type_ids.push(TokenType::Special);
        Ok(TokenSequence { ids, type_ids })
    }

    pub fn encode(&self, p: &Path) -> Result<TokenSequence> {
        self.encode_interior(&p.tokens())
    }

    /// Inverse of [`encode_interior`]: strip bos/eos, map ids back.
    /// Interior specials and unknown ids are errors naming the token.
    pub fn decode_interior(&self, seq: &TokenSequence) -> Result<Vec<PathToken>> {
        if seq.len() < 2 || seq.ids[0] != BOS || *seq.ids.last().unwrap() != EOS {
            return Err(Error::MalformedPath(
                "sequence must start with <bos> and end with <eos>".into(),
            ));
        }
        let mut out = Vec::with_capacity(seq.len() - 2);
        for &id in &seq.ids[1..seq.len() - 1] {
            if let Some(e) = self.entity_of(id) {
                out.push(PathToken::Entity(e));
            } else if let Some(r) = self.relation_of(id) {
                out.push(PathToken::Relation(r));
            } else {
                return Err(Error::UnknownToken(format!(
                    "`{}` inside path interior",
                    self.name_of(id).unwrap_or("<out of range>")
                )));
            }
        }
        Ok(out)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<Path> {
        Path::from_tokens(&self.decode_interior(seq)?)
    }

    /// `token<TAB>id<TAB>type` per line, id order.
    pub fn save(&self, path: &FsPath) -> Result<()> {
        let mut s = String::new();
        for (i, name) in self.names.iter().enumerate() {
            let ty = self.type_of(TokenId(i as u32));
            writeln!(s, "{name}\t{i}\t{}", ty.as_str()).expect("string write");
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Load a saved vocabulary for inference-only runs; validates the id
    /// layout (specials, entities, relations, dense ascending).
    pub fn load(path: &FsPath) -> Result<Self> {
        let mut rows: Vec<(String, u32, TokenType)> = Vec::new();
        for (lineno, line) in read_lines(path)? {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |msg: &str| Error::MalformedLine {
                file: path.display().to_string(),
                line: lineno,
                msg: msg.into(),
            };
            if fields.len() != 3 {
                return Err(bad("expected token<TAB>id<TAB>type"));
            }
            let id: u32 = fields[1].parse().map_err(|_| bad("id must be an integer"))?;
            let ty = TokenType::parse(fields[2]).ok_or_else(|| bad("unknown token type"))?;
            rows.push((fields[0].to_string(), id, ty));
        }
        rows.sort_by_key(|&(_, id, _)| id);
        let mut names = Vec::with_capacity(rows.len());
        let mut n_entities = 0u32;
        let mut n_relations = 0u32;
        for (i, (name, id, ty)) in rows.iter().enumerate() {
            if *id != i as u32 {
                return Err(Error::VocabularyMismatch {
                    expected: format!("dense id {i}"),
                    found: format!("id {id} for `{name}`"),
                });
            }
            let expected_ty = if *id < N_SPECIALS {
                TokenType::Special
            } else if *ty == TokenType::Entity && n_relations == 0 {
                TokenType::Entity
            } else {
                TokenType::Relation
            };
            if *ty != expected_ty {
                return Err(Error::VocabularyMismatch {
                    expected: format!("{} block at id {id}", expected_ty.as_str()),
                    found: format!("`{name}` typed {}", ty.as_str()),
                });
            }
            match ty {
                TokenType::Entity => n_entities += 1,
                TokenType::Relation => n_relations += 1,
                TokenType::Special => {}
            }
            names.push(name.clone());
        }
        if names.len() < N_SPECIALS as usize
            || names[..N_SPECIALS as usize] != [BOS_NAME, EOS_NAME, PAD_NAME]
        {
            return Err(Error::VocabularyMismatch {
                expected: format!("specials {BOS_NAME},{EOS_NAME},{PAD_NAME} at ids 0..3"),
                found: "different special block".into(),
            });
        }
        let lookup = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), TokenId(i as u32)))
            .collect();
        Ok(Vocabulary {
            names,
            lookup,
            n_entities,
            n_relations,
        })
    }

    /// Digest of the full token list; checkpoints store it so a model is
    /// never applied to a different vocabulary.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityType, GraphSource};
    use proptest::prelude::*;

    fn tiny_kg() -> KnowledgeGraph {
        let mut src = GraphSource {
            triplets: vec![("u0".into(), "watched".into(), "p0".into())],
            ..GraphSource::default()
        };
        src.entity_types.insert("u0".into(), EntityType::User);
        src.entity_types.insert("p0".into(), EntityType::Product);
        src.relation_ids.insert("watched".into(), 0);
        src.build("watched").unwrap()
    }

    fn toy_kg() -> KnowledgeGraph {
        let mut src = GraphSource {
            triplets: vec![
                ("u0".into(), "watched".into(), "m0".into()),
                ("m0".into(), "starred_by".into(), "a0".into()),
                ("m1".into(), "starred_by".into(), "a0".into()),
            ],
            ..GraphSource::default()
        };
        for (n, t) in [
            ("u0", EntityType::User),
            ("m0", EntityType::Product),
            ("m1", EntityType::Product),
            ("a0", EntityType::External),
        ] {
            src.entity_types.insert(n.into(), t);
        }
        src.relation_ids.insert("watched".into(), 0);
        src.relation_ids.insert("starred_by".into(), 1);
        src.build("watched").unwrap()
    }

    #[test]
    fn vocab_size_counts_entities_relations_and_specials() {
        // 2 entities + (1 base + 1 inverse) relations + 3 specials = 7.
        let v = Vocabulary::build(&tiny_kg()).unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.n_entities(), 2);
        assert_eq!(v.n_relations(), 2);
    }

    #[test]
    fn rebuild_gives_identical_assignment() {
        let a = Vocabulary::build(&toy_kg()).unwrap();
        let b = Vocabulary::build(&toy_kg()).unwrap();
        assert_eq!(a.names, b.names);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn encode_wraps_and_types_an_n3_path() {
        let kg = toy_kg();
        let v = Vocabulary::build(&kg).unwrap();
        let p = kg
            .path_from_names("u0 watched m0 starred_by a0 starred_by⁻¹ m1")
            .unwrap();
        let seq = v.encode(&p).unwrap();
        // N=3: 7 interior tokens, 9 with specials.
        assert_eq!(seq.interior_len(), 7);
        assert_eq!(seq.len(), 9);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        for (i, ty) in seq.type_ids[1..8].iter().enumerate() {
            let expect = if i % 2 == 0 { TokenType::Entity } else { TokenType::Relation };
            assert_eq!(*ty, expect, "interior position {i}");
        }
        assert_eq!(v.decode(&seq).unwrap(), p);
    }

    #[test]
    fn empty_interior_is_bos_eos() {
        let v = Vocabulary::build(&tiny_kg()).unwrap();
        let seq = v.encode_interior(&[]).unwrap();
        assert_eq!(seq.ids, vec![BOS, EOS]);
        assert_eq!(v.decode_interior(&seq).unwrap(), Vec::new());
    }

    #[test]
    fn unknown_ids_are_named_errors() {
        let v = Vocabulary::build(&tiny_kg()).unwrap();
        let p = Path::new(EntityId(99), vec![]);
        match v.encode(&p) {
            Err(Error::UnknownToken(msg)) => assert!(msg.contains("99")),
            other => panic!("expected UnknownToken, got {other:?}"),
        }
        // pad inside the interior is not a path token.
        let seq = TokenSequence {
            ids: vec![BOS, PAD, EOS],
            type_ids: vec![TokenType::Special; 3],
        };
        assert!(matches!(v.decode_interior(&seq), Err(Error::UnknownToken(_))));
        assert_eq!(v.id_of("nope"), None);
    }

    #[test]
    fn name_collision_is_rejected() {
        let mut src = GraphSource {
            triplets: vec![("u0".into(), "watched".into(), "watched".into())],
            ..GraphSource::default()
        };
        src.entity_types.insert("u0".into(), EntityType::User);
        // Entity sharing a relation's name breaks the bijection.
        src.entity_types.insert("watched".into(), EntityType::Product);
        src.relation_ids.insert("watched".into(), 0);
        let kg = src.build("watched").unwrap();
        assert!(matches!(Vocabulary::build(&kg), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let v = Vocabulary::build(&toy_kg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        let w = Vocabulary::load(&path).unwrap();
        assert_eq!(v.names, w.names);
        assert_eq!(v.digest(), w.digest());
        assert_eq!(w.n_entities(), v.n_entities());
        assert_eq!(w.n_relations(), v.n_relations());
    }

    #[test]
    fn load_rejects_gapped_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        std::fs::write(&path, "<bos>\t0\tspecial\n<eos>\t1\tspecial\n<pad>\t2\tspecial\nu0\t4\tentity\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(Error::VocabularyMismatch { .. })
        ));
    }

    proptest! {
        /// Roundtrip identity over arbitrary alternating interiors, valid in
        /// the vocabulary though not necessarily in the graph: the bijection
        /// does not depend on graph validity.
        #[test]
        fn roundtrip_identity(hops in 0usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let kg = toy_kg();
            let v = Vocabulary::build(&kg).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let start = EntityId(rng.gen_range(0..kg.n_entities() as u32));
            let hops: Vec<(RelationId, EntityId)> = (0..hops)
                .map(|_| {
                    (
                        RelationId(rng.gen_range(0..kg.n_relations() as u32)),
                        EntityId(rng.gen_range(0..kg.n_entities() as u32)),
                    )
                })
                .collect();
            let p = Path::new(start, hops);
            let seq = v.encode(&p).unwrap();
            prop_assert_eq!(v.decode(&seq).unwrap(), p);
        }

        /// Type tags at even interior positions are entity, odd are relation.
        #[test]
        fn interior_type_parity(hops in 0usize..6) {
            let kg = toy_kg();
            let v = Vocabulary::build(&kg).unwrap();
            let p = Path::new(
                EntityId(0),
                (0..hops).map(|_| (RelationId(0), EntityId(1))).collect(),
            );
            let seq = v.encode(&p).unwrap();
            for (i, ty) in seq.type_ids[1..seq.len() - 1].iter().enumerate() {
                let expect = if i % 2 == 0 { TokenType::Entity } else { TokenType::Relation };
                prop_assert_eq!(*ty, expect);
            }
        }
    }
}
