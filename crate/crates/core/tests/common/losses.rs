//! Finite-difference checks of the composite training losses through the full
//! models (64-bit, rel. err < 1e-4, five random instances each).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2td_core::causal::{selector_loss, SelectorHeads};
use t2td_core::config::{DiversityConfig, FuseConfig, ModelConfig};
use t2td_core::diversity::{imle_loss, noise, LatentGenerator};
use t2td_core::genfuse::{generator_loss, FusionPriors, Generator};
use t2td_core::repnet::{loss_ae, loss_joint, PointBatch, RepNet};
use t2td_core::synthdata::Corpus;
use t2td_numcore::{grad_check, grad_check_params, NumError, ParamId, ParamStore, Tape, Tensor, Var};

use super::{unit, Check};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 5;

fn within_tol(err: t2td_numcore::Result<f64>, what: String) -> Check {
    match err {
        Ok(e) if e < TOL => Ok(()),
        Ok(e) => Err(format!("{what}: rel err {e:e}")),
        Err(e) => Err(format!("{what}: {e}")),
    }
}

/// Adapts a model-level loss to the numeric crate's error type.
fn on_store(
    f: impl Fn(&mut Tape, &ParamStore) -> t2td_core::Result<Var>,
) -> impl Fn(&mut Tape, &ParamStore) -> t2td_numcore::Result<Var> {
    move |t, s| f(t, s).map_err(|e| NumError::Invalid(e.to_string()))
}

fn on_input(
    f: impl Fn(&mut Tape, Var) -> t2td_core::Result<Var>,
) -> impl Fn(&mut Tape, Var) -> t2td_numcore::Result<Var> {
    move |t, x| f(t, x).map_err(|e| NumError::Invalid(e.to_string()))
}

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 16,
        word_dim: 8,
        max_len: 24,
        heads: 2,
        text_layers: 1,
        ff_hidden: 16,
        dec_hidden: 8,
        seed,
    }
}

/// Moves every parameter off its initial value. Zero-initialized biases put
/// every empty-cell activation exactly on the leaky-ReLU kink, where finite
/// differences are meaningless.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
    }
}

/// Two coordinates of every parameter, positions drawn from `rng`.
fn coords(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| {
            let n = store.get(id).len();
            [(id, rng.random_range(0..n)), (id, rng.random_range(0..n))]
        })
        .collect()
}

/// Joint plus reconstruction loss through both encoders and both decoders.
pub fn pretraining() -> Check {
    let corpus = Corpus::generate(10, 2, 3).unwrap();
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut net = RepNet::new(&tiny_model(s), corpus.tokenizer.vocab_size()).unwrap();
        jitter(&mut net.store, &mut rng);
        let pairs: Vec<usize> = (0..2).map(|i| 2 * (s as usize + i)).collect();
        let batches: Vec<PointBatch> = pairs
            .iter()
            .map(|&c| PointBatch::sample(&corpus.shapes[corpus.captions[c].shape].grid, 32, 0.5, &mut rng))
            .collect();
        let cs = coords(&net.store, &mut rng);
        let RepNet {
            store,
            text,
            voxel,
            dec_occ,
            dec_col,
            ..
        } = &mut net;
        within_tol(
            grad_check_params(
                store,
                &cs,
                EPS,
                on_store(|t, st| {
                    let mut tf = Vec::new();
                    let mut sf = Vec::new();
                    let mut ae = Vec::new();
                    for (&c, b) in pairs.iter().zip(&batches) {
                        let cap = &corpus.captions[c];
                        tf.push(text.forward(t, st, &cap.tokens)?);
                        let f_s = voxel.forward(t, st, &corpus.shapes[cap.shape].grid)?;
                        sf.push(f_s);
                        let p = t.constant(b.positions.clone());
                        let occ = dec_occ.forward(t, st, f_s, p)?;
                        let col = dec_col.forward(t, st, f_s, p)?;
                        ae.push(loss_ae(t, occ, col, b)?);
                    }
                    let (tv, sv) = (t.concat(&tf, 0)?, t.concat(&sf, 0)?);
                    let joint = loss_joint(t, tv, sv, 0.3)?;
                    let total = t.add(ae[0], ae[1])?;
                    Ok(t.add(total, joint)?)
                }),
            ),
            format!("instance {s}"),
        )?;
    }
    Ok(())
}

/// Joint loss with respect to each feature matrix.
pub fn joint() -> Check {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + s);
        let other = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let point = Tensor::randn(&[4, 6], 1.0, &mut rng);
        for text_side in [true, false] {
            within_tol(
                grad_check(
                    on_input(|t, x| {
                        let o = t.constant(other.clone());
                        let (a, b) = if text_side { (x, o) } else { (o, x) };
                        let (a, b) = (t.l2_normalize_rows(a)?, t.l2_normalize_rows(b)?);
                        loss_joint(t, a, b, 0.7)
                    }),
                    &point,
                    EPS,
                ),
                format!("instance {s}"),
            )?;
        }
    }
    Ok(())
}

/// Selector loss with respect to the heads and the target feature.
pub fn selector() -> Check {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + s);
        let (n, d) = (3, 8);
        let mut store = ParamStore::new();
        let heads = SelectorHeads::new(&mut store, n, d, 0.05, s).unwrap();
        jitter(&mut store, &mut rng);
        let copies: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let f_s = Tensor::row(&unit(&mut rng, d));
        let cs = coords(&store, &mut rng);
        within_tol(
            grad_check_params(
                &mut store,
                &cs,
                EPS,
                on_store(|t, st| {
                    let out = heads.forward(t, st, &copies)?;
                    let target = t.constant(f_s.clone());
                    selector_loss(t, out, target)
                }),
            ),
            format!("instance {s} wrt heads"),
        )?;
        within_tol(
            grad_check(
                on_input(|t, x| {
                    let out = heads.forward(t, &store, &copies)?;
                    selector_loss(t, out, x)
                }),
                &f_s,
                EPS,
            ),
            format!("instance {s} wrt target"),
        )?;
    }
    Ok(())
}

/// Generator loss through the fusion module and the extended decoders.
pub fn generator() -> Check {
    let corpus = Corpus::generate(10, 2, 4).unwrap();
    let fuse = FuseConfig {
        d_hat: 8,
        shape_blocks: 1,
        attr_blocks: 1,
        ..FuseConfig::default()
    };
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + s);
        let model = tiny_model(s);
        let mut gen = Generator::new(
            &model,
            &FuseConfig {
                seed: s,
                ..fuse.clone()
            },
            corpus.tokenizer.vocab_size(),
        )
        .unwrap();
        jitter(&mut gen.store, &mut rng);
        let priors = FusionPriors {
            shapes: (0..2).map(|_| unit(&mut rng, model.d)).collect(),
            attributes: (0..(s as usize % 2 + 1)).map(|_| unit(&mut rng, model.d)).collect(),
        };
        let cap = &corpus.captions[s as usize];
        let grid = &corpus.shapes[cap.shape].grid;
        let batch = PointBatch::sample(grid, 64, 0.5, &mut rng);
        let cs = coords(&gen.store, &mut rng);
        let mut store = std::mem::take(&mut gen.store);
        within_tol(
            grad_check_params(
                &mut store,
                &cs,
                EPS,
                on_store(|t, st| {
                    let mut g = gen.clone();
                    g.store = st.clone();
                    generator_loss(t, &g, grid, &cap.tokens, &priors, &batch, &fuse)
                }),
            ),
            format!("instance {s}"),
        )?;
    }
    Ok(())
}

/// Min-over-draws loss through the latent generator.
pub fn imle() -> Check {
    let cfg = DiversityConfig {
        d_z: 4,
        hidden: 8,
        ..DiversityConfig::default()
    };
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + s);
        let d = 6;
        let mut gen = LatentGenerator::new(d, &DiversityConfig { seed: s, ..cfg.clone() }).unwrap();
        jitter(&mut gen.store, &mut rng);
        let f_t = Tensor::row(&unit(&mut rng, d));
        let z = Tensor::from_rows(&noise(&mut rng, 5, cfg.d_z, 1.0)).unwrap();
        let target = unit(&mut rng, d);
        let cs = coords(&gen.store, &mut rng);
        let mut store = std::mem::take(&mut gen.store);
        within_tol(
            grad_check_params(
                &mut store,
                &cs,
                EPS,
                on_store(|t, st| {
                    let mut g = gen.clone();
                    g.store = st.clone();
                    let (f, zz) = (t.constant(f_t.clone()), t.constant(z.clone()));
                    let out = g.forward(t, f, zz)?;
                    imle_loss(t, out, &target)
                }),
            ),
            format!("instance {s}"),
        )?;
    }
    Ok(())
}
