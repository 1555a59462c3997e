//! End-to-end training: the autoencoding path runs the shape feature through
//! fusion and the widened decoders; the text feature is regressed onto it.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2td_numcore::{AdamConfig, AdamState, Tape, Var};

use super::{FusionPriors, Generator, PriorSource};
use crate::config::FuseConfig;
use crate::error::{CoreError, Result};
use crate::repnet::{loss_ae, mean_of, LossCurve, PointBatch};
use crate::synthdata::{Corpus, Split, VoxelGrid};

/// A train-split caption with priors retrieved for it, its own shape excluded.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub caption: usize,
    pub shape: usize,
    pub priors: FusionPriors,
}

pub fn training_examples(corpus: &Corpus, gen: &Generator, source: &PriorSource<'_>) -> Result<Vec<TrainExample>> {
    corpus
        .captions_in(Split::Train)
        .into_iter()
        .map(|ci| {
            let c = &corpus.captions[ci];
            let f = gen.encode_text(&c.tokens)?;
            let exclude = source.graph.shape_entity(&c.shape_id);
            Ok(TrainExample {
                caption: ci,
                shape: c.shape,
                priors: source.priors(&c.text, &f, exclude)?,
            })
        })
        .collect()
}

/// `ae_weight · L_ae(fused f_s) + reg_weight · ‖f_t − f_s‖₂` for one pair.
pub fn generator_loss(
    tape: &mut Tape,
    gen: &Generator,
    grid: &VoxelGrid,
    tokens: &[usize],
    priors: &FusionPriors,
    batch: &PointBatch,
    cfg: &FuseConfig,
) -> Result<Var> {
    let f_s = gen.voxel.forward(tape, &gen.store, grid)?;
    let f_t = gen.text.forward(tape, &gen.store, tokens)?;
    let pts = tape.constant(batch.positions.clone());
    let (occ, col) = gen.decode_on(tape, f_s, priors, pts)?;
    let ae = loss_ae(tape, occ, col, batch)?;
    let diff = tape.sub(f_t, f_s)?;
    let reg = tape.l2_norm(diff);
    let ae = tape.scale(ae, cfg.ae_weight);
    let reg = tape.scale(reg, cfg.reg_weight);
    Ok(tape.add(ae, reg)?)
}

/// Trains every generator parameter. Each epoch visits every shape that has an
/// example once, with one of its captions drawn at random.
pub fn train_generator(
    gen: &mut Generator,
    corpus: &Corpus,
    examples: &[TrainExample],
    cfg: &FuseConfig,
) -> Result<LossCurve> {
    if examples.is_empty() {
        return Err(CoreError::Invalid("no generator training examples".into()));
    }
    gen.store.set_all_trainable(true);
    let mut by_shape: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_shape.entry(e.shape).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_shape.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs {
        let mut picks: Vec<usize> = groups
            .iter()
            .map(|g| *g.choose(&mut rng).expect("groups are nonempty"))
            .collect();
        picks.shuffle(&mut rng);
        let start = curve.steps.len();
        for chunk in picks.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &examples[i];
                let grid = &corpus.shapes[ex.shape].grid;
                let batch = PointBatch::sample(grid, cfg.points, cfg.occupied_fraction, &mut rng);
                let tokens = &corpus.captions[ex.caption].tokens;
                terms.push(generator_loss(&mut tape, gen, grid, tokens, &ex.priors, &batch, cfg)?);
            }
            let loss = mean_of(&mut tape, &terms)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(CoreError::Divergence {
                    stage: "generator training",
                    step: curve.steps.len(),
                });
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut gen.store, &tape.param_grads(&grads))?;
            curve.steps.push(value);
        }
        let done = &curve.steps[start..];
        log::info!(
            "generator epoch {epoch}: mean loss {:.5}",
            done.iter().sum::<f64>() / done.len().max(1) as f64
        );
    }
    Ok(curve)
}
