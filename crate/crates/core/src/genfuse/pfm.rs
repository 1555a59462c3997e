//! Two-stage prior fusion: self-attention over `[text; shape priors]`, then
//! cross-attention from per-point features to attribute features.

use rand::Rng;
use t2td_numcore::nn::{Linear, TransformerBlock};
use t2td_numcore::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug)]
pub struct Pfm {
    pub shape_blocks: Vec<TransformerBlock>,
    /// `(d + 3) → d̂`, rows ordered `[code; position]`.
    pub reduce_points: Linear,
    /// `d → d̂`.
    pub reduce_attrs: Linear,
    pub attr_blocks: Vec<TransformerBlock>,
    /// `1 x d` stand-in attribute used when a query matched none.
    pub null_attr: ParamId,
    pub d: usize,
    pub d_hat: usize,
}

impl Pfm {
    /// Every block starts as the identity: an untrained module passes the text
    /// feature through unchanged and the point features ignore the attributes.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_hat: usize,
        shape_blocks: usize,
        attr_blocks: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape_blocks = (0..shape_blocks)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.shape{i}"), d, heads, ff_hidden, true, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let reduce_points = Linear::new(store, &format!("{prefix}.reduce_points"), d + 3, d_hat, rng)?;
        let reduce_attrs = Linear::new(store, &format!("{prefix}.reduce_attrs"), d, d_hat, rng)?;
        let attr_blocks = (0..attr_blocks)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.attr{i}"), d_hat, heads, 2 * d_hat, true, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let null = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect::<Vec<_>>();
        let null_attr = store.add(format!("{prefix}.null_attr"), Tensor::row(&null))?;
        Ok(Self {
            shape_blocks,
            reduce_points,
            reduce_attrs,
            attr_blocks,
            null_attr,
            d,
            d_hat,
        })
    }

    /// `f: 1 x d`, `priors: n x d` (possibly none) → the text slot after stage 1.
    pub fn fuse_shape_priors(&self, tape: &mut Tape, store: &ParamStore, f: Var, priors: Option<Var>) -> Result<Var> {
        let mut seq = match priors {
            Some(p) => tape.concat(&[f, p], 0)?,
            None => f,
        };
        for b in &self.shape_blocks {
            seq = b.forward_self(tape, store, seq, None)?;
        }
        Ok(tape.slice_rows(seq, 0, 1)?)
    }

    /// Attended per-point features `Ŝ'_t: N x d̂` for `S_t = f' ⊕ p`.
    /// The full fused feature is `[f' (shared) ⊕ p ⊕ Ŝ'_t]`.
    pub fn fuse_attributes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_prime: Var,
        attrs: Option<Var>,
        points: Var,
    ) -> Result<Var> {
        let (_, pc) = tape.value(points).dims2()?;
        if pc != 3 {
            return Err(CoreError::Invalid(format!(
                "points must be N x 3, got {:?}",
                tape.shape(points)
            )));
        }
        let w = tape.param(store, self.reduce_points.w);
        let b = tape.param(store, self.reduce_points.b);
        let w_code = tape.slice_rows(w, 0, self.d)?;
        let w_pos = tape.slice_rows(w, self.d, self.d + 3)?;
        let shared = tape.matmul(f_prime, w_code)?;
        let shared = tape.add_row(shared, b)?;
        let h = tape.matmul(points, w_pos)?;
        let mut s = tape.add_row(h, shared)?;
        let attrs = match attrs {
            Some(a) => a,
            None => tape.param(store, self.null_attr),
        };
        let ctx = self.reduce_attrs.forward(tape, store, attrs)?;
        for blk in &self.attr_blocks {
            s = blk.forward_cross(tape, store, s, ctx)?;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module() -> (Pfm, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let pfm = Pfm::new(&mut store, "pfm", 8, 4, 2, 2, 2, 16, &mut rng).unwrap();
        (pfm, store)
    }

    #[test]
    fn untrained_stage_one_is_identity_for_any_prior_count() {
        let (pfm, store) = module();
        let f = [0.1, 0.2, -0.3, 0.4, 0.0, 0.5, -0.6, 0.7];
        for n in 0..3 {
            let mut tape = Tape::new();
            let fv = tape.constant(Tensor::row(&f));
            let p = (n > 0).then(|| tape.constant(Tensor::new(vec![n, 8], vec![0.3; 8 * n]).unwrap()));
            let out = pfm.fuse_shape_priors(&mut tape, &store, fv, p).unwrap();
            assert_eq!(tape.value(out).data(), f);
        }
    }

    #[test]
    fn point_rows_follow_point_order() {
        let (pfm, store) = module();
        let pts = [[0.1, 0.2, 0.3], [-0.5, 0.5, 0.0], [0.1, 0.2, 0.3]];
        let run = |order: &[usize], attrs: bool| {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::row(&[0.2; 8]));
            let a = attrs
                .then(|| tape.constant(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 / 10.0).collect()).unwrap()));
            let p: Vec<f64> = order.iter().flat_map(|&i| pts[i]).collect();
            let p = tape.constant(Tensor::new(vec![order.len(), 3], p).unwrap());
            let s = pfm.fuse_attributes(&mut tape, &store, f, a, p).unwrap();
            tape.value(s).data().chunks(4).map(<[f64]>::to_vec).collect::<Vec<_>>()
        };
        for attrs in [false, true] {
            let fwd = run(&[0, 1, 2], attrs);
            let rev = run(&[2, 1, 0], attrs);
            assert_eq!(fwd[0], rev[2]);
            assert_eq!(fwd[1], rev[1]);
            assert_eq!(fwd[0], fwd[2]);
        }
    }

    #[test]
    fn untrained_attention_ignores_attributes() {
        let (pfm, store) = module();
        let run = |attrs: bool| {
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::row(&[0.2; 8]));
            let a = attrs
                .then(|| tape.constant(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 / 10.0).collect()).unwrap()));
            let p = tape.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.5, 0.5, 0.0]).unwrap());
            let s = pfm.fuse_attributes(&mut tape, &store, f, a, p).unwrap();
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(false), run(true));
    }
}
