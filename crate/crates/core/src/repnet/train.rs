//! Two-stage pretraining: autoencoding of voxels, then aligning the text
//! encoder to the frozen shape features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2td_numcore::{AdamConfig, AdamState, Tape, Tensor, Var};

use super::losses::{loss_ae, loss_joint, PointBatch};
use super::{RepNet, DEC_COL_PREFIX, DEC_OCC_PREFIX, TEXT_PREFIX, VOXEL_PREFIX};
use crate::config::PretrainConfig;
use crate::error::{CoreError, Result};
use crate::synthdata::{Corpus, Split};

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub steps: Vec<f64>,
}

impl LossCurve {
    /// Means over consecutive windows of `w` steps.
    pub fn smoothed(&self, w: usize) -> Vec<f64> {
        self.steps
            .chunks(w.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

fn set_trainable(net: &mut RepNet, prefixes: &[&str]) {
    net.store.set_all_trainable(false);
    for p in prefixes {
        net.store.set_trainable(&format!("{p}."), true);
    }
}

/// Reconstruction loss of one shape (encode, decode at `batch`) on `tape`.
fn ae_term(tape: &mut Tape, net: &RepNet, grid: &crate::synthdata::VoxelGrid, batch: &PointBatch) -> Result<Var> {
    let f = net.voxel.forward(tape, &net.store, grid)?;
    let p = tape.constant(batch.positions.clone());
    let occ = net.dec_occ.forward(tape, &net.store, f, p)?;
    let col = net.dec_col.forward(tape, &net.store, f, p)?;
    loss_ae(tape, occ, col, batch)
}

/// Stage 1: voxel encoder and both decoders on train-split shapes.
pub fn pretrain_ae(net: &mut RepNet, corpus: &Corpus, cfg: &PretrainConfig, epochs: usize) -> Result<LossCurve> {
    set_trainable(net, &[VOXEL_PREFIX, DEC_OCC_PREFIX, DEC_COL_PREFIX]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.ae_lr));
    let mut order = corpus.shapes_in(Split::Train);
    let mut curve = LossCurve::default();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.ae_batch.max(1)) {
            let mut tape = Tape::new();
            let mut terms = Vec::with_capacity(chunk.len());
            for &s in chunk {
                let batch = PointBatch::sample(
                    &corpus.shapes[s].grid,
                    cfg.ae_points,
                    cfg.ae_occupied_fraction,
                    &mut rng,
                );
                terms.push(ae_term(&mut tape, net, &corpus.shapes[s].grid, &batch)?);
            }
            let loss = mean_of(&mut tape, &terms)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(CoreError::Divergence {
                    stage: "autoencoder pretraining",
                    step: curve.steps.len(),
                });
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut net.store, &tape.param_grads(&grads))?;
            curve.steps.push(value);
        }
        log::info!(
            "ae epoch {epoch}: mean loss {:.5}",
            curve.steps[curve
                .steps
                .len()
                .saturating_sub(order.len().div_ceil(cfg.ae_batch.max(1)))..]
                .iter()
                .sum::<f64>()
                / order.len().div_ceil(cfg.ae_batch.max(1)) as f64
        );
    }
    Ok(curve)
}

/// Stage 2: text encoder only, contrastive against frozen shape features.
/// Each batch holds distinct shapes with one random caption each.
pub fn pretrain_joint(net: &mut RepNet, corpus: &Corpus, cfg: &PretrainConfig, epochs: usize) -> Result<LossCurve> {
    set_trainable(net, &[TEXT_PREFIX]);
    let shapes = corpus.shapes_in(Split::Train);
    let feats: Vec<Vec<f64>> = corpus
        .shapes
        .iter()
        .map(|s| {
            if s.split == Split::Train {
                net.encode_voxels(&s.grid)
            } else {
                Ok(Vec::new())
            }
        })
        .collect::<Result<_>>()?;
    let caps: Vec<Vec<usize>> = (0..corpus.shapes.len()).map(|s| corpus.captions_of(s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.joint_lr));
    let mut order = shapes.clone();
    let mut curve = LossCurve::default();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let start = curve.steps.len();
        for chunk in order.chunks(cfg.joint_batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let picks: Vec<usize> = chunk
                .iter()
                .map(|&s| caps[s][rng.random_range(0..caps[s].len())])
                .collect();
            let mut tape = Tape::new();
            let value = joint_step(&mut tape, net, corpus, &picks, &feats, cfg.alpha)?;
            if !value.1.is_finite() {
                return Err(CoreError::Divergence {
                    stage: "joint pretraining",
                    step: curve.steps.len(),
                });
            }
            let grads = tape.backward(value.0)?;
            opt.step(&mut net.store, &tape.param_grads(&grads))?;
            curve.steps.push(value.1);
        }
        let seg = &curve.steps[start..];
        log::info!(
            "joint epoch {epoch}: mean loss {:.5}",
            seg.iter().sum::<f64>() / seg.len().max(1) as f64
        );
    }
    Ok(curve)
}

fn joint_step(
    tape: &mut Tape,
    net: &RepNet,
    corpus: &Corpus,
    captions: &[usize],
    shape_feats: &[Vec<f64>],
    alpha: f64,
) -> Result<(Var, f64)> {
    let mut rows = Vec::with_capacity(captions.len());
    let mut targets = Vec::with_capacity(captions.len() * net.cfg.d);
    for &c in captions {
        rows.push(net.text.forward(tape, &net.store, &corpus.captions[c].tokens)?);
        targets.extend_from_slice(&shape_feats[corpus.captions[c].shape]);
    }
    let text = tape.concat(&rows, 0)?;
    let shape = tape.constant(Tensor::new(vec![captions.len(), net.cfg.d], targets)?);
    let loss = loss_joint(tape, text, shape, alpha)?;
    let v = tape.value(loss).item();
    Ok((loss, v))
}

pub(crate) fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Mean full-grid reconstruction loss over `shapes`.
pub fn ae_loss_on(net: &RepNet, corpus: &Corpus, shapes: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &s in shapes {
        let mut tape = Tape::new();
        let grid = &corpus.shapes[s].grid;
        let l = ae_term(&mut tape, net, grid, &PointBatch::full(grid))?;
        total += tape.value(l).item();
    }
    Ok(total / shapes.len().max(1) as f64)
}

/// Joint loss over `captions` taken as one batch, with shape features from the
/// current voxel encoder.
pub fn joint_loss_on(net: &RepNet, corpus: &Corpus, captions: &[usize], alpha: f64) -> Result<f64> {
    let mut feats = vec![Vec::new(); corpus.shapes.len()];
    for &c in captions {
        let s = corpus.captions[c].shape;
        if feats[s].is_empty() {
            feats[s] = net.encode_voxels(&corpus.shapes[s].grid)?;
        }
    }
    let mut tape = Tape::new();
    Ok(joint_step(&mut tape, net, corpus, captions, &feats, alpha)?.1)
}
