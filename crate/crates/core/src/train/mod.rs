//! Metric training: tuple mining, the quadruplet objective, Adam and the
//! deterministic training loop.

pub mod gradcheck;
pub mod loss;

pub use gradcheck::gradcheck;
pub use loss::{lazy_quadruplet_loss, LossBreakdown, LossGrads};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    backward_pipeline, forward_pipeline_with_cache, Model, ModelParams, PipelineConfig,
};
use crate::rng::{sample_without_replacement, stream_rng, Stream};
use crate::scene::SceneDatabase;
use crate::world::transform::DomainTransform;

/// One training tuple, referring to scenes by index into the mined database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadrupletTuple {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// A negative that is also far from every chosen negative.
    pub decoy: usize,
}

/// Mine quadruplet tuples by geographic radius.
///
/// For every anchor: positives lie within `r_pos`, negatives beyond `r_neg`,
/// and the decoy lies beyond `r_neg` from the anchor and from every chosen
/// negative. Anchors without a valid positive, enough negatives or any decoy
/// candidate are skipped; an empty result is an error.
pub fn mine_tuples(
    db: &SceneDatabase,
    r_pos: f64,
    r_neg: f64,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Vec<QuadrupletTuple>> {
    if !(r_pos < r_neg) {
        return Err(Error::InvalidArgument(format!(
            "r_pos ({r_pos}) must be smaller than r_neg ({r_neg})"
        )));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("n_pos and n_neg must be positive".into()));
    }
    let scenes = db.scenes();
    let mut tuples = Vec::new();
    for anchor in 0..scenes.len() {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for other in 0..scenes.len() {
            if other == anchor {
                continue;
            }
            let d = scenes[anchor].coord.distance(&scenes[other].coord);
            if d <= r_pos {
                positives.push(other);
            } else if d > r_neg {
                negatives.push(other);
            }
        }
        if positives.is_empty() || negatives.len() < n_neg + 1 {
            continue;
        }
        let mut rng = stream_rng(seed, Stream::Mining, anchor as u64);
        let chosen_pos: Vec<usize> = if positives.len() <= n_pos {
            positives.clone()
        } else {
            sample_without_replacement(&mut rng, positives.len(), n_pos)
                .into_iter()
                .map(|i| positives[i])
                .collect()
        };
        let chosen_neg: Vec<usize> =
            sample_without_replacement(&mut rng, negatives.len(), n_neg)
                .into_iter()
                .map(|i| negatives[i])
                .collect();
        let decoy_candidates: Vec<usize> = negatives
            .iter()
            .copied()
            .filter(|cand| {
                !chosen_neg.contains(cand)
                    && chosen_neg.iter().all(|&n| {
                        scenes[*cand].coord.distance(&scenes[n].coord) > r_neg
                    })
            })
            .collect();
        if decoy_candidates.is_empty() {
            continue;
        }
        let decoy = decoy_candidates[rng.random_range(0..decoy_candidates.len())];
        tuples.push(QuadrupletTuple {
            anchor,
            positives: chosen_pos,
            negatives: chosen_neg,
            decoy,
        });
    }
    if tuples.is_empty() {
        return Err(Error::NoTuples(format!(
            "no anchor of {} scenes has a positive within {r_pos} m plus {} negatives and a decoy beyond {r_neg} m",
            scenes.len(),
            n_neg
        )));
    }
    Ok(tuples)
}

use rand::Rng as _;

/// Adam accumulator state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected update in place.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimMismatch(format!(
                "optimizer state for {} params, got {} / {}",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub steps: usize,
    /// Tuples averaged per optimizer step (clamped to the mined count).
    pub tuples_per_step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Anchor-hinge margin.
    pub alpha: f64,
    /// Decoy-hinge margin.
    pub beta: f64,
    pub r_pos: f64,
    pub r_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            steps: 220,
            tuples_per_step: 2,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            alpha: 0.5,
            beta: 0.2,
            r_pos: 10.0,
            r_neg: 50.0,
            n_pos: 2,
            n_neg: 6,
        }
    }
}

/// Loss history: (step, loss) per optimizer step.
pub type LossHistory = Vec<(usize, f64)>;

/// Train a model of `config` on the scenes of `db`.
///
/// Deterministic per (db, config, hyper, seed). The optional transform is
/// applied inside the pipeline whenever the config enables it.
pub fn train(
    db: &SceneDatabase,
    config: &PipelineConfig,
    transform: Option<DomainTransform>,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Model, LossHistory)> {
    let tuples = mine_tuples(db, hyper.r_pos, hyper.r_neg, hyper.n_pos, hyper.n_neg, seed)?;
    let params = ModelParams::init(config, seed)?;
    let mut model = Model { params, transform };
    let mut theta = model.params.flatten();
    let mut optim = OptimState::new(theta.len(), hyper.lr, hyper.beta1, hyper.beta2, hyper.eps);

    let batch = hyper.tuples_per_step.clamp(1, tuples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut loop_rng = stream_rng(seed, Stream::TrainLoop, 0);
    let mut history = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let mut grads = model.params.zeros_like();
        // Per-tuple losses are summed in tuple order, not visit order, so a
        // full batch yields the exact same value every step.
        let mut batch_losses: Vec<(usize, f64)> = Vec::with_capacity(batch);
        for _ in 0..batch {
            if order.is_empty() {
                order = sample_without_replacement(&mut loop_rng, tuples.len(), tuples.len());
            }
            let index = order.pop().expect("refilled");
            let loss = tuple_backward(db, &model, config, &tuples[index], hyper, &mut grads)?;
            batch_losses.push((index, loss));
        }
        batch_losses.sort_by_key(|(index, _)| *index);
        let batch_loss = batch_losses.iter().map(|(_, l)| l).sum::<f64>() / batch as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: batch_loss,
            });
        }
        let mut flat_grads = grads.flatten();
        if batch > 1 {
            for g in flat_grads.iter_mut() {
                *g /= batch as f64;
            }
        }
        optim.update(&mut theta, &flat_grads)?;
        model.params.unflatten(&theta)?;
        history.push((step, batch_loss));
    }
    Ok((model, history))
}

/// Forward every scene of the tuple, evaluate the loss and accumulate
/// parameter gradients. Returns the tuple loss.
fn tuple_backward(
    db: &SceneDatabase,
    model: &Model,
    config: &PipelineConfig,
    tuple: &QuadrupletTuple,
    hyper: &TrainHyper,
    grads: &mut ModelParams,
) -> Result<f64> {
    let scenes = db.scenes();
    let forward = |idx: usize| forward_pipeline_with_cache(&scenes[idx], model, config);

    let (anchor_desc, anchor_cache) = forward(tuple.anchor)?;
    let mut pos = Vec::with_capacity(tuple.positives.len());
    for &i in &tuple.positives {
        pos.push(forward(i)?);
    }
    let mut neg = Vec::with_capacity(tuple.negatives.len());
    for &i in &tuple.negatives {
        neg.push(forward(i)?);
    }
    let (decoy_desc, decoy_cache) = forward(tuple.decoy)?;

    let pos_refs: Vec<&[f64]> = pos.iter().map(|(d, _)| d.values()).collect();
    let neg_refs: Vec<&[f64]> = neg.iter().map(|(d, _)| d.values()).collect();
    let breakdown = loss::lazy_quadruplet_loss_detailed(
        anchor_desc.values(),
        &pos_refs,
        &neg_refs,
        decoy_desc.values(),
        hyper.alpha,
        hyper.beta,
    )?;
    let loss_grads = loss::lazy_quadruplet_loss_backward(
        anchor_desc.values(),
        &pos_refs,
        &neg_refs,
        decoy_desc.values(),
        &breakdown,
        1.0,
    );

    backward_pipeline(model, config, &anchor_cache, &loss_grads.anchor, grads)?;
    for ((_, cache), g) in pos.iter().zip(&loss_grads.positives) {
        backward_pipeline(model, config, cache, g, grads)?;
    }
    for ((_, cache), g) in neg.iter().zip(&loss_grads.negatives) {
        backward_pipeline(model, config, cache, g, grads)?;
    }
    backward_pipeline(model, config, &decoy_cache, &loss_grads.decoy, grads)?;
    Ok(breakdown.value)
}
