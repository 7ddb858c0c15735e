//! Training loop: decoupled-weight-decay adaptive-moment optimizer with
//! linear warmup, global gradient clipping and a fixed iteration budget,
//! plus finite-difference gradient checking.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Batch, Grads, Model};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::vocab::TokenSequence;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub clip_norm: f64,
    /// Fraction of the budget spent on linear warmup.
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            batch_size: 16,
            steps: 1000,
            clip_norm: 1.0,
            warmup_frac: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("iteration budget must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup fraction must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Effective learning rate at zero-based step `t`: linear warmup over
    /// the first ceil(frac·steps) steps, constant afterwards.
    pub(crate) fn lr_at(&self, t: usize) -> f64 {
        let warmup = ((self.warmup_frac * self.steps as f64).ceil() as usize).max(1);
        if t < warmup {
            self.lr * (t + 1) as f64 / warmup as f64
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Loss after each optimizer step, in step order.
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: usize,
}

impl AdamState {
    fn new(model: &Model) -> AdamState {
        let shapes: Vec<_> = model.p.views().iter().map(|(_, _, a)| a.raw_dim()).collect();
        AdamState {
            m: shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect(),
            v: shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect(),
            t: 0,
        }
    }
}

fn global_norm(grads: &Grads) -> f64 {
    grads
        .0
        .views()
        .iter()
        .map(|(_, _, a)| a.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn diverged(model: &Model, cfg: &TrainConfig, step: usize, losses: &[f64]) -> Error {
    let tail: Vec<String> = losses
        .iter()
        .rev()
        .take(5)
        .rev()
        .map(|l| format!("{l:.6}"))
        .collect();
    Error::Diverged {
        step,
        dump: format!(
            "seed={} lr={} batch_size={} d_model={} n_layers={} n_heads={} recent losses [{}]",
            cfg.seed,
            cfg.lr,
            cfg.batch_size,
            model.cfg.d_model,
            model.cfg.n_layers,
            model.cfg.n_heads,
            tail.join(", ")
        ),
    }
}

/// Run exactly `cfg.steps` optimizer steps over shuffled batches of `seqs`.
pub fn train(model: &mut Model, seqs: &[TokenSequence], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::EmptyInput("training sequences"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x0BA7C4));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD20904));
    let mut queue: Vec<usize> = Vec::new();
    let mut state = AdamState::new(model);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size.min(seqs.len()));
        while picks.len() < cfg.batch_size.min(seqs.len()) {
            if queue.is_empty() {
                queue = (0..seqs.len()).collect();
                queue.shuffle(&mut order_rng);
            }
            picks.push(queue.pop().unwrap());
        }
        let refs: Vec<&TokenSequence> = picks.iter().map(|&i| &seqs[i]).collect();
        let batch = Batch::new(&refs)?;

        let (loss, grads) = match model.loss_and_grads(&batch, Some(&mut dropout_rng)) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(diverged(model, cfg, step, &losses)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(model, cfg, step, &losses));
        }
        losses.push(loss);

        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(diverged(model, cfg, step, &losses));
        }
        let grad_scale = if norm > cfg.clip_norm && cfg.clip_norm > 0.0 {
            cfg.clip_norm / norm
        } else {
            1.0
        };

        state.t += 1;
        let lr_t = cfg.lr_at(step);
        let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
        let gviews = grads.0.views();
        for (slot, (pview, gview)) in model.p.views_mut().into_iter().zip(&gviews).enumerate() {
            let (_, decay, mut p) = pview;
            let (_, _, g) = gview;
            let m = &mut state.m[slot];
            let v = &mut state.v[slot];
            for ((pij, &gij_raw), (mij, vij)) in
                p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gij = gij_raw * grad_scale;
                *mij = cfg.beta1 * *mij + (1.0 - cfg.beta1) * gij;
                *vij = cfg.beta2 * *vij + (1.0 - cfg.beta2) * gij * gij;
                let mhat = *mij / bc1;
                let vhat = *vij / bc2;
                let mut update = mhat / (vhat.sqrt() + cfg.eps);
                if decay {
                    update += cfg.weight_decay * *pij;
                }
                *pij -= lr_t * update;
            }
        }
    }
    let final_loss = *losses.last().unwrap();
    Ok(TrainReport { losses, final_loss })
}

/// Fraction of non-pad targets whose argmax prediction matches, over all
/// sequences (teacher forcing).
pub fn next_token_accuracy(model: &Model, seqs: &[TokenSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyInput("sequences"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for seq in seqs {
        let logits = model.logits(seq)?;
        for i in 0..seq.len() - 1 {
            let tgt = seq.ids[i + 1];
            let row = logits.row(i);
            let mut best = 0usize;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            total += 1;
            if best == tgt.idx() {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("predictable positions"));
    }
    Ok(hits as f64 / total as f64)
}

/// Compare supplied gradients against central finite differences on a
/// sampled parameter subset; returns the max relative error
/// |fd − g| / max(|fd| + |g|, 1e-8).
pub fn grad_check_against(
    model: &mut Model,
    batch: &Batch,
    eps: f64,
    grads: &Grads,
) -> Result<f64> {
    let specs: Vec<(usize, usize)> = {
        // (slot, n_elements) pairs in storage order.
        model
            .p
            .views()
            .iter()
            .enumerate()
            .map(|(i, (_, _, a))| (i, a.len()))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1D);
    let mut max_err = 0.0f64;
    let gviews = grads.0.views();
    for (slot, len) in specs {
        // A handful of random coordinates plus the largest-gradient one.
        let gslice: Vec<f64> = gviews[slot].2.as_slice().expect("standard layout").to_vec();
        let mut coords: Vec<usize> = (0..4.min(len)).map(|_| rng.gen_range(0..len)).collect();
        let argmax = (0..len)
            .max_by(|&a, &b| gslice[a].abs().partial_cmp(&gslice[b].abs()).unwrap())
            .unwrap();
        coords.push(argmax);
        coords.sort_unstable();
        coords.dedup();
        for c in coords {
            let nudge = |m: &mut Model, delta: f64| {
                let mut views = m.p.views_mut();
                views[slot].2.as_slice_mut().expect("standard layout")[c] += delta;
            };
            nudge(model, eps);
            let up = model.loss(batch)?;
            nudge(model, -2.0 * eps);
            let down = model.loss(batch)?;
            nudge(model, eps);
            let fd = (up - down) / (2.0 * eps);
            let g = gslice[c];
            let err = (fd - g).abs() / (fd.abs() + g.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Finite-difference check of the model's own analytic gradients.
pub fn grad_check(model: &mut Model, batch: &Batch, eps: f64) -> Result<f64> {
    let (_, grads) = model.loss_and_grads(batch, None)?;
    grad_check_against(model, batch, eps, &grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::{TokenId, TokenType};

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            ids: ids.iter().map(|&i| TokenId(i)).collect(),
            type_ids: ids
                .iter()
                .map(|&i| {
                    if i < 3 {
                        TokenType::Special
                    } else if i % 2 == 1 {
                        TokenType::Entity
                    } else {
                        TokenType::Relation
                    }
                })
                .collect(),
        }
    }

    fn tiny_cfg(d: usize, layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            n_layers: layers,
            n_heads: heads,
            d_ff: 2 * d,
            context: 12,
            dropout: 0.0,
            seed: 5,
            vocab_size: 12,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut model = Model::new(tiny_cfg(16, 1, 2)).unwrap();
        let before: Vec<_> = model
            .tensors()
            .iter()
            .map(|(n, _)| model.tensor(n).unwrap())
            .collect();
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &[seq(&[0, 5, 6, 1]), seq(&[0, 7, 4, 1])], &cfg).unwrap();
        for ((name, _), old) in model.tensors().iter().zip(before) {
            assert_eq!(model.tensor(name).unwrap(), old, "{name}");
        }
    }

    #[test]
    fn single_path_is_memorized_on_small_preset() {
        let path = seq(&[0, 5, 6, 7, 4, 9, 8, 11, 1]);
        let mut model = Model::new(ModelConfig::preset("small", 12, 12, 3).unwrap()).unwrap();
        let initial = model
            .loss(&Batch::new(&[&path]).unwrap())
            .unwrap();
        let cfg = TrainConfig {
            steps: 500,
            batch_size: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut model, std::slice::from_ref(&path), &cfg).unwrap();
        assert_eq!(report.losses.len(), 500);
        assert!(report.final_loss < initial, "loss must improve");
        let acc = next_token_accuracy(&model, &[path]).unwrap();
        assert_eq!(acc, 1.0, "teacher-forced accuracy after memorization");
    }

    #[test]
    fn same_seed_reproduces_the_run() {
        let data = [seq(&[0, 5, 6, 7, 4, 1]), seq(&[0, 9, 8, 5, 6, 1])];
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut m1 = Model::new(tiny_cfg(16, 2, 2)).unwrap();
        let r1 = train(&mut m1, &data, &cfg).unwrap();
        let mut m2 = Model::new(tiny_cfg(16, 2, 2)).unwrap();
        let r2 = train(&mut m2, &data, &cfg).unwrap();
        assert_eq!(r1.losses, r2.losses);
        for (name, _) in m1.tensors() {
            assert_eq!(m1.tensor(&name).unwrap(), m2.tensor(&name).unwrap(), "{name}");
        }
    }

    #[test]
    fn nan_weights_abort_with_dump() {
        let mut model = Model::new(tiny_cfg(16, 1, 2)).unwrap();
        model.with_tensor_mut("block0.ff.w1", |mut v| v[[0, 0]] = f64::NAN);
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 1,
            ..TrainConfig::default()
        };
        match train(&mut model, &[seq(&[0, 5, 6, 1])], &cfg) {
            Err(Error::Diverged { step: 0, dump }) => {
                assert!(dump.contains("seed="), "dump carries the seed: {dump}");
            }
            other => panic!("expected Diverged, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_and_zero_budget_are_rejected() {
        let mut model = Model::new(tiny_cfg(8, 1, 1)).unwrap();
        assert!(matches!(
            train(&mut model, &[], &TrainConfig::default()),
            Err(Error::EmptyInput("training sequences"))
        ));
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut model, &[seq(&[0, 5, 1])], &cfg).is_err());
    }

    #[test]
    fn warmup_schedule_ramps_then_holds() {
        let cfg = TrainConfig {
            lr: 1e-3,
            steps: 100,
            warmup_frac: 0.05,
            ..TrainConfig::default()
        };
        // 5 warmup steps.
        assert!((cfg.lr_at(0) - 2e-4).abs() < 1e-15);
        assert!((cfg.lr_at(3) - 8e-4).abs() < 1e-15);
        assert_eq!(cfg.lr_at(4), 1e-3);
        assert_eq!(cfg.lr_at(99), 1e-3);
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_model() {
        let mut model = Model::new(tiny_cfg(16, 2, 2)).unwrap();
        let batch = Batch::new(&[&seq(&[0, 5, 6, 7, 4, 1]), &seq(&[0, 9, 8, 1])]).unwrap();
        let err = grad_check(&mut model, &batch, 1e-4).unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn gradients_are_near_exact_without_attention_blocks() {
        let mut model = Model::new(tiny_cfg(8, 0, 1)).unwrap();
        // At init scale (sigma ~ 0.02) the final layernorm's curvature
        // dominates the finite-difference truncation error; scale the
        // embeddings to trained-like magnitude for a well-conditioned
        // evaluation point.
        for table in ["tok_emb", "type_emb", "pos_emb"] {
            model.with_tensor_mut(table, |mut v| v.mapv_inplace(|x| 20.0 * x));
        }
        let batch = Batch::new(&[&seq(&[0, 5, 6, 7, 4, 1])]).unwrap();
        let err = grad_check(&mut model, &batch, 1e-4).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn corrupted_backward_pass_is_caught() {
        let mut model = Model::new(tiny_cfg(16, 2, 2)).unwrap();
        let batch = Batch::new(&[&seq(&[0, 5, 6, 7, 4, 1])]).unwrap();
        let (_, mut grads) = model.loss_and_grads(&batch, None).unwrap();
        for (_, _, mut view) in grads.0.views_mut() {
            view.mapv_inplace(|g| 1.5 * g);
        }
        let err = grad_check_against(&mut model, &batch, 1e-4, &grads).unwrap();
        assert!(err > 1e-1, "mutation must be detected, got {err}");
    }

    #[test]
    fn loss_curve_trends_down_on_repetitive_data() {
        let data = [seq(&[0, 5, 6, 7, 4, 1])];
        let mut model = Model::new(tiny_cfg(16, 1, 2)).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 1,
            lr: 1e-2,
            seed: 2,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &cfg).unwrap();
        let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = report.losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "head {head} tail {tail}");
    }
}
