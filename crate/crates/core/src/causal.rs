//! Prior-feature selection: the concatenated prior features are split into `n`
//! blocks, thresholded by magnitude, and each masked copy is projected by its
//! own head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2td_numcore::nn::{Linear, LEAKY_SLOPE};
use t2td_numcore::{AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};

use crate::config::CausalConfig;
use crate::error::{CoreError, Result};

pub const CAUSAL_PREFIX: &str = "causal";

/// Concatenates prior features in the given (score) order into `X` of length
/// `n·d`. Fewer than `n` features are padded by repeating the last; extras are dropped.
pub fn concat_priors(features: &[Vec<f64>], n: usize) -> Result<Vec<f64>> {
    let last = features
        .last()
        .ok_or_else(|| CoreError::Invalid("no prior features to concatenate".into()))?;
    let d = last.len();
    let mut x = Vec::with_capacity(n * d);
    for i in 0..n {
        let f = features.get(i).unwrap_or(last);
        if f.len() != d {
            return Err(CoreError::Invalid(format!(
                "prior feature widths {} and {d} differ",
                f.len()
            )));
        }
        x.extend_from_slice(f);
    }
    Ok(x)
}

/// `mask_i[k]` is set iff `k` lies in block `[i·d, (i+1)·d)` and `|X[k]| > t`.
pub fn index_sets(x: &[f64], n: usize, d: usize, t: f64) -> Result<Vec<Vec<bool>>> {
    if x.len() != n * d {
        return Err(CoreError::Invalid(format!(
            "X has length {} but n·d = {}",
            x.len(),
            n * d
        )));
    }
    Ok((0..n)
        .map(|i| x.iter().enumerate().map(|(k, v)| k / d == i && v.abs() > t).collect())
        .collect())
}

/// Masked copies of `X`: kept positions as-is, everything else zero.
pub fn select(x: &[f64], masks: &[Vec<bool>]) -> Vec<Vec<f64>> {
    masks
        .iter()
        .map(|m| x.iter().zip(m).map(|(&v, &k)| if k { v } else { 0.0 }).collect())
        .collect()
}

/// Fails when thresholding removes every dimension, which means the features
/// are on the wrong scale for `t`.
pub fn check_calibration(masks: &[Vec<bool>]) -> Result<()> {
    if masks.iter().all(|m| !m.iter().any(|&b| b)) {
        return Err(CoreError::Config(
            "every prior dimension fell below causal.t; feature scale and threshold are mismatched".into(),
        ));
    }
    Ok(())
}

/// `n` independent projections `J_i: n·d → d` with leaky-ReLU and L2 normalization.
#[derive(Clone, Debug)]
pub struct SelectorHeads {
    pub heads: Vec<Linear>,
    pub n: usize,
    pub d: usize,
    pub t: f64,
}

impl SelectorHeads {
    pub fn new(store: &mut ParamStore, n: usize, d: usize, t: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = (0..n)
            .map(|i| Linear::new(store, &format!("{CAUSAL_PREFIX}.J{i}"), n * d, d, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { heads, n, d, t })
    }

    /// Outputs `x'_i` stacked as an `n x d` matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, copies: &[Vec<f64>]) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.n);
        for (head, c) in self.heads.iter().zip(copies) {
            let x = tape.constant(Tensor::row(c));
            let h = head.forward(tape, store, x)?;
            let h = tape.leaky_relu(h, LEAKY_SLOPE);
            rows.push(tape.l2_normalize_rows(h)?);
        }
        Ok(tape.concat(&rows, 0)?)
    }

    /// Concatenate, threshold, select and project; returns `n` unit vectors.
    pub fn apply(&self, store: &ParamStore, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = concat_priors(features, self.n)?;
        let masks = index_sets(&x, self.n, self.d, self.t)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &select(&x, &masks))?;
        Ok(tape.value(out).data().chunks(self.d).map(<[f64]>::to_vec).collect())
    }
}

/// Negated log-likelihood `−(1/n) Σ_i log softmax_i(f_s · x'ᵀ)` for one item.
/// Its minimum `log n` is reached when all heads score equally against `f_s`.
pub fn selector_loss(tape: &mut Tape, outputs: Var, f_s: Var) -> Result<Var> {
    let logits = tape.matmul_t(f_s, false, outputs, true)?;
    let ls = tape.log_softmax_rows(logits)?;
    let m = tape.mean(ls);
    Ok(tape.neg(m))
}

/// `mean_i (1 − cos(x'_i, f_s))` for unit-norm rows.
pub fn alignment_loss(tape: &mut Tape, outputs: Var, f_s: Var) -> Result<Var> {
    let sims = tape.matmul_t(outputs, false, f_s, true)?;
    let m = tape.mean(sims);
    let one = tape.constant(Tensor::scalar(1.0));
    Ok(tape.sub(one, m)?)
}

/// One training example: prior features in score order and the target shape feature.
pub struct SelectorExample {
    pub priors: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

/// Trains the heads on `examples` with `selector_loss + align_weight · alignment_loss`.
/// Returns the per-step losses.
pub fn train_heads(
    heads: &SelectorHeads,
    store: &mut ParamStore,
    examples: &[SelectorExample],
    cfg: &CausalConfig,
) -> Result<Vec<f64>> {
    let prepared: Vec<(Vec<Vec<f64>>, Tensor)> = examples
        .iter()
        .map(|e| {
            let x = concat_priors(&e.priors, heads.n)?;
            let masks = index_sets(&x, heads.n, heads.d, heads.t)?;
            check_calibration(&masks)?;
            Ok((select(&x, &masks), Tensor::row(&e.target)))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let mut total: Option<Var> = None;
            for &i in chunk {
                let (copies, target) = &prepared[i];
                let out = heads.forward(&mut tape, store, copies)?;
                let fs = tape.constant(target.clone());
                let l = selector_loss(&mut tape, out, fs)?;
                let a = alignment_loss(&mut tape, out, fs)?;
                let a = tape.scale(a, cfg.align_weight);
                let item = tape.add(l, a)?;
                total = Some(match total {
                    Some(t) => tape.add(t, item)?,
                    None => item,
                });
            }
            let Some(total) = total else { continue };
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(CoreError::Divergence {
                    stage: "selector training",
                    step: losses.len(),
                });
            }
            let g = tape.backward(loss)?;
            opt.step(store, &tape.param_grads(&g))?;
            losses.push(v);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: f64 = 0.049787068367863944;

    #[test]
    fn concat_and_pad() {
        assert_eq!(
            concat_priors(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2).unwrap(),
            [1.0, 2.0, 3.0, 4.0]
        );
        let x = concat_priors(&[vec![1.0], vec![2.0], vec![3.0]], 5).unwrap();
        assert_eq!(x, [1.0, 2.0, 3.0, 3.0, 3.0]);
        assert!(concat_priors(&[], 3).is_err());
    }

    #[test]
    fn worked_example() {
        let x = [0.5, 0.0005, -0.2, 0.9];
        let m = index_sets(&x, 2, 2, T).unwrap();
        assert_eq!(m, vec![vec![true, false, false, false], vec![false, false, true, true]]);
        assert_eq!(
            select(&x, &m),
            vec![vec![0.5, 0.0, 0.0, 0.0], vec![0.0, 0.0, -0.2, 0.9]]
        );
    }

    #[test]
    fn boundary_is_strict_and_all_small_is_empty() {
        let m = index_sets(&[T, -T, 0.01, 0.0], 2, 2, T).unwrap();
        assert!(m.iter().flatten().all(|&b| !b));
        assert!(check_calibration(&m).is_err());
    }

    #[test]
    fn select_is_idempotent_and_full_mask_is_identity() {
        let x = [0.3, -0.7, 0.01, 2.0];
        let m = index_sets(&x, 2, 2, T).unwrap();
        let once = select(&x, &m);
        for (c, mask) in once.iter().zip(&m) {
            assert_eq!(&select(c, std::slice::from_ref(mask))[0], c);
        }
        assert_eq!(select(&x, &[vec![true; 4]])[0], x);
        assert_eq!(select(&x, &[vec![false; 4]])[0], [0.0; 4]);
    }

    fn loss_of(rows: &[Vec<f64>], fs: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let o = tape.constant(Tensor::from_rows(rows).unwrap());
        let f = tape.constant(Tensor::row(fs));
        let l = selector_loss(&mut tape, o, f).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn selector_loss_closed_forms() {
        let same = vec![vec![0.6, 0.8]; 4];
        assert!((loss_of(&same, &[1.0, 0.0]) - 4f64.ln()).abs() < 1e-12);
        assert!(loss_of(&[vec![0.3, 0.1]], &[1.0, 2.0]).abs() < 1e-12);
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let perm = vec![rows[2].clone(), rows[0].clone(), rows[1].clone()];
        assert!((loss_of(&rows, &[0.2, 0.9]) - loss_of(&perm, &[0.2, 0.9])).abs() < 1e-12);
    }

    #[test]
    fn each_head_sees_only_its_block() {
        let mut store = ParamStore::new();
        let heads = SelectorHeads::new(&mut store, 3, 4, T, 7).unwrap();
        let feats = vec![
            vec![0.5, -0.5, 0.5, -0.5],
            vec![0.1, 0.9, -0.3, 0.2],
            vec![-0.7, 0.1, 0.1, 0.7],
        ];
        let base = heads.apply(&store, &feats).unwrap();
        let mut zeroed = feats.clone();
        zeroed[1] = vec![0.0; 4];
        zeroed[1][0] = 0.2;
        let pert = heads.apply(&store, &zeroed).unwrap();
        assert_eq!(base[0], pert[0]);
        assert_eq!(base[2], pert[2]);
        assert_ne!(base[1], pert[1]);
        for v in &base {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
