//! Graph-constrained decoding: a reachability predicate over partially
//! generated paths, logit-level masking, diverse grouped beam search from
//! the (user, interaction-relation) prompt, sequence scoring, and top-n
//! recommendation assembly.
//!
//! The search itself is deterministic: beams expand in sorted order with
//! full tie-breaking (score, then token id, then beam index), so a fixed
//! model yields bit-identical recommendations across runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path as FsPath;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, Path, PathToken};
use crate::model::math::log_sum_exp;
use crate::model::{KvCache, Model};
use crate::vocab::{TokenId, TokenType, Vocabulary, BOS, EOS, PAD};

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub n_beams: usize,
    pub n_groups: usize,
    pub diversity_penalty: f64,
    /// Cap on completed hypotheses accumulated across groups.
    pub n_sequences: usize,
    pub top_n: usize,
    /// Target hop count N; interior sequences run exactly 2N+1 tokens.
    pub hops: usize,
    /// False switches off masking (ablation mode).
    pub constrained: bool,
    /// Score sequences by mean log-probability instead of mean probability.
    pub score_mean_log: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            n_beams: 30,
            n_groups: 5,
            diversity_penalty: 0.3,
            n_sequences: 100,
            top_n: 10,
            hops: 3,
            constrained: true,
            score_mean_log: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_beams == 0 || self.n_groups == 0 {
            return Err(Error::Config("beam and group counts must be ≥ 1".into()));
        }
        if !self.n_beams.is_multiple_of(self.n_groups) {
            return Err(Error::Config(format!(
                "n_beams {} not divisible by n_groups {}",
                self.n_beams, self.n_groups
            )));
        }
        if self.top_n == 0 || self.n_sequences == 0 {
            return Err(Error::Config("top_n and n_sequences must be ≥ 1".into()));
        }
        if self.top_n > self.n_sequences {
            return Err(Error::Config(format!(
                "top_n {} exceeds n_sequences {}",
                self.top_n, self.n_sequences
            )));
        }
        if self.hops == 0 {
            return Err(Error::Config("hop count must be ≥ 1".into()));
        }
        if !(self.diversity_penalty >= 0.0 && self.diversity_penalty.is_finite()) {
            return Err(Error::Config("diversity penalty must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Read-only view of a partially generated path, enough to decide token
/// reachability. The prefix holds interior tokens only (no bos/eos) and
/// starts with the user and interaction-relation tokens.
pub struct ConstraintState<'a> {
    prefix: &'a [TokenId],
    hops: usize,
    train_products: &'a BTreeSet<EntityId>,
}

impl<'a> ConstraintState<'a> {
    pub fn new(
        prefix: &'a [TokenId],
        hops: usize,
        train_products: &'a BTreeSet<EntityId>,
    ) -> Self {
        ConstraintState {
            prefix,
            hops,
            train_products,
        }
    }

    /// Interior length of a complete path: user + N (relation, entity) hops.
    pub fn interior_target(&self) -> usize {
        2 * self.hops + 1
    }

    pub fn is_complete(&self) -> bool {
        self.prefix.len() >= self.interior_target()
    }

    /// True if the next interior token must be a relation.
    pub fn expects_relation(&self) -> bool {
        self.prefix.len() % 2 == 1
    }

    pub fn remaining_hops(&self) -> usize {
        self.hops - self.prefix.len() / 2
    }

    /// True if the next interior token is the terminal entity.
    pub fn at_terminal(&self) -> bool {
        self.prefix.len() == 2 * self.hops
    }
}

/// Reachability predicate: true iff `candidate` may legally extend the
/// state. Checks type parity, graph adjacency, terminal product rules and
/// eos placement; pure, no side effects.
pub fn psi(
    state: &ConstraintState,
    candidate: TokenId,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
) -> bool {
    let len = state.prefix.len();
    if state.is_complete() {
        // A finished path may only be closed with eos.
        return candidate == EOS;
    }
    if len < 2 {
        // States are only defined from the (user, relation) prompt onward.
        return false;
    }
    if candidate == BOS || candidate == EOS || candidate == PAD {
        return false;
    }
    if state.expects_relation() {
        let Some(r) = vocab.relation_of(candidate) else {
            return false;
        };
        let Some(last_e) = vocab.entity_of(state.prefix[len - 1]) else {
            return false;
        };
        kg.has_relation_from(last_e, r)
    } else {
        let Some(e) = vocab.entity_of(candidate) else {
            return false;
        };
        let Some(last_e) = vocab.entity_of(state.prefix[len - 2]) else {
            return false;
        };
        let Some(last_r) = vocab.relation_of(state.prefix[len - 1]) else {
            return false;
        };
        if !kg.has_edge(last_e, last_r, e) {
            return false;
        }
        if state.at_terminal() {
            kg.is_product(e) && !state.train_products.contains(&e)
        } else {
            true
        }
    }
}

/// Set every ψ-false logit to −∞, leave ψ-true logits untouched. Returns
/// false when nothing remains finite (dead beam — caller must prune).
///
/// The valid set is enumerated structurally from the adjacency index
/// rather than by calling [`psi`] per token; tests assert the two agree.
pub fn mask_logits(
    logits: &mut [f64],
    state: &ConstraintState,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
) -> bool {
    let mut keep = vec![false; logits.len()];
    let len = state.prefix.len();
    if state.is_complete() {
        keep[EOS.idx()] = true;
    } else if len < 2 {
        // Nothing is reachable before the (user, relation) prompt.
    } else if state.expects_relation() {
        if let Some(last_e) = vocab.entity_of(state.prefix[len - 1]) {
            for r in kg.relations_from(last_e) {
                keep[vocab.relation_token(r).idx()] = true;
            }
        }
    } else {
        let last_e = vocab.entity_of(state.prefix[len - 2]);
        let last_r = vocab.relation_of(state.prefix[len - 1]);
        if let (Some(last_e), Some(last_r)) = (last_e, last_r) {
            for &e in kg.neighbors(last_e, last_r) {
                if state.at_terminal()
                    && !(kg.is_product(e) && !state.train_products.contains(&e))
                {
                    continue;
                }
                keep[vocab.entity_token(e).idx()] = true;
            }
        }
    }
    let mut any = false;
    for (l, &k) in logits.iter_mut().zip(&keep) {
        if k {
            any = true;
        } else {
            *l = f64::NEG_INFINITY;
        }
    }
    any
}

/// One completed hypothesis: interior tokens (user and relation prompt
/// included), raw pre-mask probability of each generated token (eos
/// excluded), and the search-time selection log-probability.
#[derive(Debug, Clone)]
pub struct DecodedSequence {
    pub interior: Vec<TokenId>,
    pub token_probs: Vec<f64>,
    pub search_logprob: f64,
}

struct Beam {
    cache: KvCache,
    interior: Vec<TokenId>,
    /// Cumulative log-probability under the masked (renormalized) model.
    logprob: f64,
    raw_probs: Vec<f64>,
    /// Next-token logits at the current state.
    logits: Vec<f64>,
}

struct Candidate {
    beam: usize,
    token: TokenId,
    /// logprob + masked log-probability − diversity penalty.
    selection: f64,
    /// logprob + masked log-probability, penalty-free (carried by beams).
    cumulative: f64,
    raw_p: f64,
}

fn check_compatibility(
    model: &Model,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<()> {
    cfg.validate()?;
    if vocab.n_entities() != kg.n_entities() || vocab.n_relations() != kg.n_relations() {
        return Err(Error::VocabularyMismatch {
            expected: format!("{} entities, {} relations", kg.n_entities(), kg.n_relations()),
            found: format!("{} entities, {} relations", vocab.n_entities(), vocab.n_relations()),
        });
    }
    if model.cfg().vocab_size != vocab.size() {
        return Err(Error::VocabularyMismatch {
            expected: format!("model over {} tokens", vocab.size()),
            found: format!("model over {} tokens", model.cfg().vocab_size),
        });
    }
    let needed = 2 * cfg.hops + 3;
    if model.cfg().context < needed {
        return Err(Error::Config(format!(
            "model context {} cannot hold a {}-hop path ({} tokens with bos/eos)",
            model.cfg().context,
            cfg.hops,
            needed
        )));
    }
    Ok(())
}

/// Diverse grouped beam search for one user, starting from the prompt
/// (bos, user, interaction relation). Groups expand sequentially within a
/// step; a group's candidate scores are penalized by diversity_penalty ×
/// (times the token was already chosen this step by earlier groups).
/// Returns up to n_sequences distinct completed hypotheses, best first by
/// selection score (ties: lexicographically smaller token ids first).
pub fn group_beam_search(
    model: &Model,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    user: EntityId,
    train_products: &BTreeSet<EntityId>,
    cfg: &DecodeConfig,
) -> Result<Vec<DecodedSequence>> {
    check_compatibility(model, kg, vocab, cfg)?;
    if !kg.is_user(user) {
        return Err(Error::Config(format!(
            "decode target {} is not a user entity",
            kg.entity_name(user)
        )));
    }
    let user_tok = vocab.entity_token(user);
    let rf_tok = vocab.relation_token(kg.interaction_relation());
    let (prompt_cache, prompt_logits) = model.prefill(
        &[BOS, user_tok, rf_tok],
        &[TokenType::Special, TokenType::Entity, TokenType::Relation],
    )?;

    let group_width = cfg.n_beams / cfg.n_groups;
    let mut groups: Vec<Vec<Beam>> = (0..cfg.n_groups)
        .map(|_| {
            vec![Beam {
                cache: prompt_cache.clone(),
                interior: vec![user_tok, rf_tok],
                logprob: 0.0,
                raw_probs: Vec::new(),
                logits: prompt_logits.to_vec(),
            }]
        })
        .collect();

    // interior grows from 2 to 2N+1 tokens: 2N−1 generation steps.
    let n_steps = 2 * cfg.hops - 1;
    let mut completed: Vec<(f64, Vec<TokenId>, Vec<f64>)> = Vec::new();
    let mut counts = vec![0u32; vocab.size()];

    for step in 0..n_steps {
        let terminal = step == n_steps - 1;
        counts.iter_mut().for_each(|c| *c = 0);
        for group in groups.iter_mut() {
            if group.is_empty() {
                continue;
            }
            let mut cands: Vec<Candidate> = Vec::new();
            for (bi, beam) in group.iter().enumerate() {
                let mut masked = beam.logits.clone();
                if cfg.constrained {
                    let state = ConstraintState::new(&beam.interior, cfg.hops, train_products);
                    if !mask_logits(&mut masked, &state, kg, vocab) {
                        continue; // dead beam
                    }
                }
                let raw_lse = log_sum_exp(&beam.logits);
                let masked_lse = log_sum_exp(&masked);
                for (t, &ml) in masked.iter().enumerate() {
                    if !ml.is_finite() {
                        continue;
                    }
                    let token = TokenId(t as u32);
                    let cumulative = beam.logprob + (ml - masked_lse);
                    let penalty = cfg.diversity_penalty * counts[t] as f64;
                    cands.push(Candidate {
                        beam: bi,
                        token,
                        selection: cumulative - penalty,
                        cumulative,
                        raw_p: (beam.logits[t] - raw_lse).exp(),
                    });
                }
            }
            cands.sort_by(|a, b| {
                b.selection
                    .partial_cmp(&a.selection)
                    .expect("finite selection scores")
                    .then(a.token.cmp(&b.token))
                    .then(a.beam.cmp(&b.beam))
            });

            if terminal {
                // Final interior token: every surviving candidate completes
                // a hypothesis; no further expansion, so the whole fan-out
                // is harvested (this is how 30 beams can yield up to
                // n_sequences results).
                for c in &cands {
                    let src = &group[c.beam];
                    let mut interior = src.interior.clone();
                    interior.push(c.token);
                    let mut probs = src.raw_probs.clone();
                    probs.push(c.raw_p);
                    completed.push((c.selection, interior, probs));
                    counts[c.token.idx()] += 1;
                }
                group.clear();
            } else {
                let mut stepped: Vec<&Candidate> = Vec::new();
                let mut caches: Vec<KvCache> = Vec::new();
                for c in cands.iter().take(group_width) {
                    counts[c.token.idx()] += 1;
                    if !cfg.constrained && c.token == EOS {
                        // Unconstrained early stop: harvest as-is.
                        completed.push((
                            c.selection,
                            group[c.beam].interior.clone(),
                            group[c.beam].raw_probs.clone(),
                        ));
                    } else {
                        stepped.push(c);
                        caches.push(group[c.beam].cache.clone());
                    }
                }
                let mut next: Vec<Beam> = Vec::with_capacity(stepped.len());
                if !stepped.is_empty() {
                    let ids: Vec<TokenId> = stepped.iter().map(|c| c.token).collect();
                    let types: Vec<TokenType> =
                        ids.iter().map(|&t| vocab.type_of(t)).collect();
                    let logits = model.step_many(&mut caches, &ids, &types)?;
                    for (slot, (c, cache)) in stepped.iter().zip(caches).enumerate() {
                        let src = &group[c.beam];
                        let mut interior = src.interior.clone();
                        interior.push(c.token);
                        let mut raw_probs = src.raw_probs.clone();
                        raw_probs.push(c.raw_p);
                        // The diversity term only reorders selection; the
                        // carried log-prob stays penalty-free.
                        next.push(Beam {
                            cache,
                            interior,
                            logprob: c.cumulative,
                            raw_probs,
                            logits: logits.row(slot).to_vec(),
                        });
                    }
                }
                *group = next;
            }
        }
    }

    // Deduplicate identical hypotheses (groups can converge), keeping the
    // best selection score, then cap at n_sequences.
    let mut best: std::collections::BTreeMap<Vec<TokenId>, (f64, Vec<f64>)> =
        std::collections::BTreeMap::new();
    for (sel, interior, probs) in completed {
        match best.get_mut(&interior) {
            Some(slot) if slot.0 >= sel => {}
            Some(slot) => *slot = (sel, probs),
            None => {
                best.insert(interior, (sel, probs));
            }
        }
    }
    let mut out: Vec<DecodedSequence> = best
        .into_iter()
        .map(|(interior, (sel, probs))| DecodedSequence {
            interior,
            token_probs: probs,
            search_logprob: sel,
        })
        .collect();
    out.sort_by(|a, b| {
        b.search_logprob
            .partial_cmp(&a.search_logprob)
            .expect("finite scores")
            .then(a.interior.cmp(&b.interior))
    });
    out.truncate(cfg.n_sequences);
    Ok(out)
}

/// Arithmetic mean of per-token probabilities (or of their logs when
/// `mean_log` is set). Probabilities are the raw model probabilities of
/// the generated tokens, taken before masking.
pub fn score_sequence(token_probs: &[f64], mean_log: bool) -> Result<f64> {
    if token_probs.is_empty() {
        return Err(Error::EmptyInput("token probabilities"));
    }
    debug_assert!(token_probs.iter().all(|&p| p > 0.0 && p <= 1.0));
    let n = token_probs.len() as f64;
    if mean_log {
        Ok(token_probs.iter().map(|p| p.ln()).sum::<f64>() / n)
    } else {
        Ok(token_probs.iter().sum::<f64>() / n)
    }
}

/// One ranked recommendation: the terminal token (a product in constrained
/// mode), its score, the interior tokens and the parsed path when the
/// token sequence forms one.
#[derive(Debug, Clone)]
pub struct Recommendation {
    pub terminal: TokenId,
    pub score: f64,
    pub tokens: Vec<TokenId>,
    pub path: Option<Path>,
    pub token_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RecommendationList {
    pub user: EntityId,
    pub items: Vec<Recommendation>,
    /// True when fewer than top_n distinct terminals were reachable.
    pub incomplete: bool,
    /// Completed hypotheses the list was distilled from.
    pub decoded_sequences: usize,
}

/// Interior tokens → graph path, if they form one (alternating entity /
/// relation tokens of odd length).
pub fn interior_to_path(interior: &[TokenId], vocab: &Vocabulary) -> Option<Path> {
    let mut toks = Vec::with_capacity(interior.len());
    for (i, &t) in interior.iter().enumerate() {
        if i % 2 == 0 {
            toks.push(PathToken::Entity(vocab.entity_of(t)?));
        } else {
            toks.push(PathToken::Relation(vocab.relation_of(t)?));
        }
    }
    Path::from_tokens(&toks).ok()
}

/// Decode paths for one user and distill them into a ranked, deduplicated
/// top-n product list. Sequences are ranked by score descending (ties:
/// lexicographically smaller token ids first) and only the best sequence
/// per distinct terminal is kept.
pub fn recommend(
    model: &Model,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    user: EntityId,
    train_products: &BTreeSet<EntityId>,
    cfg: &DecodeConfig,
) -> Result<RecommendationList> {
    let sequences = group_beam_search(model, kg, vocab, user, train_products, cfg)?;
    let decoded_sequences = sequences.len();
    let mut scored: Vec<(f64, DecodedSequence)> = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.token_probs.is_empty() {
            continue; // degenerate unconstrained early stop before any token
        }
        let score = score_sequence(&seq.token_probs, cfg.score_mean_log)?;
        scored.push((score, seq));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite scores")
            .then(a.1.interior.cmp(&b.1.interior))
    });

    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for (score, seq) in scored {
        let terminal = *seq.interior.last().expect("nonempty interior");
        if !seen.insert(terminal) {
            continue;
        }
        let path = interior_to_path(&seq.interior, vocab);
        if cfg.constrained {
            let p = path.as_ref().expect("constrained decode emits well-formed paths");
            debug_assert!(kg.validate_path(p).valid);
            debug_assert!(kg.is_product(p.terminal()));
            debug_assert!(!train_products.contains(&p.terminal()));
        }
        items.push(Recommendation {
            terminal,
            score,
            tokens: seq.interior,
            path,
            token_probs: seq.token_probs,
        });
        if items.len() == cfg.top_n {
            break;
        }
    }
    let incomplete = items.len() < cfg.top_n;
    Ok(RecommendationList {
        user,
        items,
        incomplete,
        decoded_sequences,
    })
}

/// Write ranked lists as `user TAB rank TAB terminal TAB score TAB tokens…`
/// with one tab-separated token name per column.
pub fn write_recommendations(
    lists: &[RecommendationList],
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    path: &FsPath,
) -> Result<()> {
    let mut s = String::from("# user\trank\tterminal\tscore\tpath tokens…\n");
    for list in lists {
        for (rank, item) in list.items.iter().enumerate() {
            s.push_str(kg.entity_name(list.user));
            s.push('\t');
            s.push_str(&(rank + 1).to_string());
            s.push('\t');
            s.push_str(vocab.name_of(item.terminal)?);
            s.push('\t');
            s.push_str(&format!("{}", item.score));
            for &t in &item.tokens {
                s.push('\t');
                s.push_str(vocab.name_of(t)?);
            }
            s.push('\n');
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Read a recommendations file back into per-user lists (token
/// probabilities are not serialized and come back empty).
pub fn read_recommendations(
    path: &FsPath,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
) -> Result<Vec<RecommendationList>> {
    let mut lists: Vec<RecommendationList> = Vec::new();
    for (lineno, line) in crate::kg::read_lines(path)? {
        let cols: Vec<&str> = line.split('\t').collect();
        let fname = path.display().to_string();
        let fail = |msg: String| Error::MalformedLine {
            file: fname.clone(),
            line: lineno,
            msg,
        };
        if cols.len() < 5 {
            return Err(fail(format!("expected ≥ 5 tab-separated columns, got {}", cols.len())));
        }
        let user = kg
            .entity_id(cols[0])
            .filter(|&e| kg.is_user(e))
            .ok_or_else(|| fail(format!("unknown user `{}`", cols[0])))?;
        let rank: usize = cols[1]
            .parse()
            .map_err(|_| fail(format!("bad rank `{}`", cols[1])))?;
        let score: f64 = cols[3]
            .parse()
            .map_err(|_| fail(format!("bad score `{}`", cols[3])))?;
        let mut tokens = Vec::with_capacity(cols.len() - 4);
        for name in &cols[4..] {
            tokens.push(
                vocab
                    .id_of(name)
                    .ok_or_else(|| fail(format!("unknown token `{name}`")))?,
            );
        }
        let terminal = vocab
            .id_of(cols[2])
            .ok_or_else(|| fail(format!("unknown terminal `{}`", cols[2])))?;
        if tokens.last() != Some(&terminal) {
            return Err(fail("terminal column disagrees with last path token".into()));
        }
        let item = Recommendation {
            terminal,
            score,
            path: interior_to_path(&tokens, vocab),
            tokens,
            token_probs: Vec::new(),
        };
        let start_new = !matches!(lists.last(), Some(l) if l.user == user);
        if start_new {
            if rank != 1 {
                return Err(fail(format!("user block must start at rank 1, got {rank}")));
            }
            lists.push(RecommendationList {
                user,
                items: vec![item],
                incomplete: false,
                decoded_sequences: 0,
            });
        } else {
            let l = lists.last_mut().unwrap();
            if rank != l.items.len() + 1 {
                return Err(fail(format!(
                    "rank {rank} out of order (expected {})",
                    l.items.len() + 1
                )));
            }
            l.items.push(item);
        }
    }
    Ok(lists)
}
