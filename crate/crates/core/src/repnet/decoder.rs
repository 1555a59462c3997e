//! Five-layer implicit decoders over `[code ⊕ per-point features]`.

use rand::Rng;
use t2td_numcore::nn::{Linear, LEAKY_SLOPE};
use t2td_numcore::{ParamStore, Tape, Var};

use crate::error::{CoreError, Result};

pub const DECODER_LAYERS: usize = 5;

/// Fully connected stack with leaky-ReLU between layers and a terminal sigmoid.
///
/// The first layer's weight rows are ordered `[code; per-point]`. Because the
/// code is shared by every point, its contribution `code·W_code + b` is
/// computed once and added to each point's `x·W_point`; this equals applying
/// the layer to the explicit row-wise concatenation.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<Linear>,
    pub code_dim: usize,
    pub point_dim: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        code_dim: usize,
        point_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(DECODER_LAYERS);
        let mut width = code_dim + point_dim;
        for i in 0..DECODER_LAYERS {
            let out = if i + 1 == DECODER_LAYERS { out_dim } else { hidden };
            layers.push(Linear::new(store, &format!("{prefix}.fc{i}"), width, out, rng)?);
            width = out;
        }
        Ok(Self {
            layers,
            code_dim,
            point_dim,
        })
    }

    /// Copies `base` into `self`, which must have the same layer widths except
    /// for extra trailing per-point inputs. Their first-layer rows are zeroed, so
    /// `self` computes exactly what `base` does whatever those inputs hold.
    pub fn copy_extended_from(&self, store: &mut ParamStore, base: &Decoder, base_store: &ParamStore) -> Result<()> {
        let compatible = self.code_dim == base.code_dim
            && self.point_dim >= base.point_dim
            && self.layers.len() == base.layers.len()
            && self
                .layers
                .iter()
                .zip(&base.layers)
                .enumerate()
                .all(|(i, (a, b))| a.out_dim == b.out_dim && (i == 0 || a.in_dim == b.in_dim));
        if !compatible {
            return Err(CoreError::Invalid(
                "decoder widths do not extend the base decoder".into(),
            ));
        }
        for (i, (dst, src)) in self.layers.iter().zip(&base.layers).enumerate() {
            let w = base_store.get(src.w).data();
            let target = store.get_mut(dst.w).data_mut();
            if i == 0 {
                target.fill(0.0);
                target[..w.len()].copy_from_slice(w);
            } else {
                target.copy_from_slice(w);
            }
            store
                .get_mut(dst.b)
                .data_mut()
                .copy_from_slice(base_store.get(src.b).data());
        }
        Ok(())
    }

    /// `code: 1 x code_dim`, `points: N x point_dim` → `N x out` in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, code: Var, points: Var) -> Result<Var> {
        let (cr, cc) = tape.value(code).dims2()?;
        let (_, pc) = tape.value(points).dims2()?;
        if cr != 1 || cc != self.code_dim || pc != self.point_dim {
            return Err(CoreError::Invalid(format!(
                "decoder expects 1x{} code and Nx{} points, got {:?} and {:?}",
                self.code_dim,
                self.point_dim,
                tape.shape(code),
                tape.shape(points)
            )));
        }
        let first = &self.layers[0];
        let w = tape.param(store, first.w);
        let b = tape.param(store, first.b);
        let w_code = tape.slice_rows(w, 0, self.code_dim)?;
        let w_point = tape.slice_rows(w, self.code_dim, self.code_dim + self.point_dim)?;
        let shared = tape.matmul(code, w_code)?;
        let shared = tape.add_row(shared, b)?;
        let h = tape.matmul(points, w_point)?;
        let mut h = tape.add_row(h, shared)?;
        for l in &self.layers[1..] {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = l.forward(tape, store, h)?;
        }
        Ok(tape.sigmoid(h))
    }
}
