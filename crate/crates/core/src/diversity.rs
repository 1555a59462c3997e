//! Diverse generation: a noise-conditioned generator perturbs the text
//! feature, trained to reach references interpolated toward shape priors.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use t2td_numcore::checkpoint::{load_into, save_store};
use t2td_numcore::nn::{Linear, LEAKY_SLOPE};
use t2td_numcore::{AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};

use crate::config::DiversityConfig;
use crate::error::{CoreError, Result};
use crate::genfuse::{Generator, PriorSource};
use crate::repnet::LossCurve;
use crate::synthdata::{Tokenizer, VoxelGrid};

pub const LATENT_PREFIX: &str = "latent";

/// Interpolated targets; `provenance[i] = (prior index, step index)` of `features[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    pub features: Vec<Vec<f64>>,
    pub provenance: Vec<(usize, usize)>,
}

/// `f_t + (f_p − f_t)·η/σ` for every prior (outer) and step (inner).
pub fn sample_references(f_t: &[f64], priors: &[Vec<f64>], sigma: f64, eta_steps: &[f64]) -> Result<ReferenceSet> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CoreError::Invalid(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if eta_steps.is_empty() {
        return Err(CoreError::Invalid("no interpolation steps".into()));
    }
    let mut features = Vec::with_capacity(priors.len() * eta_steps.len());
    let mut provenance = Vec::with_capacity(features.capacity());
    for (pi, p) in priors.iter().enumerate() {
        if p.len() != f_t.len() {
            return Err(CoreError::Invalid(format!(
                "prior width {} differs from {}",
                p.len(),
                f_t.len()
            )));
        }
        for (si, &eta) in eta_steps.iter().enumerate() {
            let k = eta / sigma;
            features.push(f_t.iter().zip(p).map(|(&t, &q)| t + (q - t) * k).collect());
            provenance.push((pi, si));
        }
    }
    Ok(ReferenceSet { features, provenance })
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Index of the reference closest in cosine distance to any of `outputs`;
/// ties go to the lowest index.
pub fn select_target(outputs: &[Vec<f64>], references: &[Vec<f64>]) -> Result<usize> {
    if references.is_empty() || outputs.is_empty() {
        return Err(CoreError::Invalid(
            "target selection needs outputs and references".into(),
        ));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, r) in references.iter().enumerate() {
        let d = outputs
            .iter()
            .map(|o| cosine_distance(o, r))
            .fold(f64::INFINITY, f64::min);
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// `G(f_t, z) = f_t + W₂·leaky(W₁·[f_t ⊕ z])`.
#[derive(Clone, Debug)]
pub struct LatentGenerator {
    pub store: ParamStore,
    pub l1: Linear,
    pub l2: Linear,
    pub d: usize,
    pub d_z: usize,
}

impl LatentGenerator {
    pub fn new(d: usize, cfg: &DiversityConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let l1 = Linear::new(
            &mut store,
            &format!("{LATENT_PREFIX}.l1"),
            d + cfg.d_z,
            cfg.hidden,
            &mut rng,
        )?;
        let l2 = Linear::new(&mut store, &format!("{LATENT_PREFIX}.l2"), cfg.hidden, d, &mut rng)?;
        Ok(Self {
            store,
            l1,
            l2,
            d,
            d_z: cfg.d_z,
        })
    }

    /// `f_t: 1 x d`, `z: k x d_z` → `k x d`.
    pub fn forward(&self, tape: &mut Tape, f_t: Var, z: Var) -> Result<Var> {
        let (k, _) = tape.value(z).dims2()?;
        let rep = tape.repeat_rows(f_t, k)?;
        let x = tape.concat(&[rep, z], 1)?;
        let h = self.l1.forward(tape, &self.store, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.l2.forward(tape, &self.store, h)?;
        Ok(tape.add(rep, h)?)
    }

    /// One output row per noise row.
    pub fn perturb(&self, f_t: &[f64], z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::row(f_t));
        let zv = tape.constant(Tensor::from_rows(z)?);
        let out = self.forward(&mut tape, f, zv)?;
        Ok(tape.value(out).data().chunks(self.d).map(<[f64]>::to_vec).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_store(&self.store, path)?)
    }

    pub fn load(path: &Path, d: usize, cfg: &DiversityConfig) -> Result<Self> {
        let mut g = Self::new(d, cfg)?;
        load_into(&mut g.store, path)?;
        Ok(g)
    }
}

/// `min_k ‖outputs_k − target‖²`; the minimizing row is picked by value and
/// only it carries gradient.
pub fn imle_loss(tape: &mut Tape, outputs: Var, target: &[f64]) -> Result<Var> {
    let (k, d) = tape.value(outputs).dims2()?;
    if d != target.len() || k == 0 {
        return Err(CoreError::Invalid(format!(
            "{k} x {d} outputs against a target of width {}",
            target.len()
        )));
    }
    let best = tape
        .value(outputs)
        .data()
        .chunks(d)
        .map(|r| r.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc })
        .0;
    let row = tape.slice_rows(outputs, best, best + 1)?;
    let t = tape.constant(Tensor::row(target));
    let diff = tape.sub(row, t)?;
    Ok(tape.sum_squares(diff))
}

/// Unit-normal draws scaled by `std`, one row per draw.
pub fn noise(rng: &mut ChaCha8Rng, rows: usize, width: usize, std: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..rows)
        .map(|_| (0..width).map(|_| std * normal.sample(rng)).collect())
        .collect()
}

/// A frozen text feature with its retrieved shape-prior features.
#[derive(Clone, Debug)]
pub struct ImleItem {
    pub f_t: Vec<f64>,
    pub priors: Vec<Vec<f64>>,
}

/// Per step and item: draw noise, pick the target with the generator fixed,
/// then descend on the min-over-draws squared distance.
pub fn train_imle(gen: &mut LatentGenerator, items: &[ImleItem], cfg: &DiversityConfig) -> Result<LossCurve> {
    let refs: Vec<ReferenceSet> = items
        .iter()
        .map(|it| sample_references(&it.f_t, &it.priors, cfg.sigma, &cfg.eta_steps))
        .collect::<Result<_>>()?;
    let usable: Vec<usize> = (0..items.len()).filter(|&i| !refs[i].features.is_empty()).collect();
    if usable.is_empty() {
        return Err(CoreError::Invalid(
            "no item has shape priors to interpolate toward".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = LossCurve::default();
    let mut order = usable;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let mut total: Option<Var> = None;
            for &i in chunk {
                let z = noise(&mut rng, cfg.draws.max(1), gen.d_z, cfg.noise_std);
                let target_idx = select_target(&gen.perturb(&items[i].f_t, &z)?, &refs[i].features)?;
                let f = tape.constant(Tensor::row(&items[i].f_t));
                let zv = tape.constant(Tensor::from_rows(&z)?);
                let out = gen.forward(&mut tape, f, zv)?;
                let l = imle_loss(&mut tape, out, &refs[i].features[target_idx])?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let Some(total) = total else { continue };
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(CoreError::Divergence {
                    stage: "diversity training",
                    step: curve.steps.len(),
                });
            }
            let g = tape.backward(loss)?;
            opt.step(&mut gen.store, &tape.param_grads(&g))?;
            curve.steps.push(v);
        }
    }
    Ok(curve)
}

/// `count` grids for one query from seeded noise of standard deviation `noise_std`.
#[allow(clippy::too_many_arguments)]
pub fn diversify(
    text: &str,
    count: usize,
    seed: u64,
    noise_std: f64,
    tokenizer: &Tokenizer,
    generator: &Generator,
    latent: &LatentGenerator,
    source: &PriorSource<'_>,
    threshold: f64,
) -> Result<Vec<VoxelGrid>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let f_t = generator.encode_text(&tokenizer.encode(text))?;
    let priors = source.priors(text, &f_t, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = noise(&mut rng, count, latent.d_z, noise_std);
    latent
        .perturb(&f_t, &z)?
        .iter()
        .map(|f| generator.decode_grid(f, &priors, threshold))
        .collect()
}
