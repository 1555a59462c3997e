//! Cross-modal contrastive loss and the occupancy/colour reconstruction loss.

use rand::seq::index::sample;
use rand::Rng;
use t2td_numcore::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::synthdata::{grid_points, VoxelGrid};

/// Sampled points with occupancy and masked colour targets.
#[derive(Clone, Debug)]
pub struct PointBatch {
    /// `N x 3` cell centres in `[-1, 1]`.
    pub positions: Tensor,
    /// `N x 1` occupancy in `{0, 1}`.
    pub occ: Tensor,
    /// `N x 3` colour in `[0, 1]`, zero where unoccupied.
    pub color: Tensor,
}

impl PointBatch {
    pub fn full(grid: &VoxelGrid) -> Self {
        let idx: Vec<usize> = (0..grid.len()).collect();
        Self::at(grid, &idx)
    }

    /// `count` distinct cells: up to `occupied_fraction · count` drawn from the
    /// occupied cells, the rest uniformly from all remaining cells. The full grid
    /// when `count ≥ r³`.
    pub fn sample<R: Rng + ?Sized>(grid: &VoxelGrid, count: usize, occupied_fraction: f64, rng: &mut R) -> Self {
        if count >= grid.len() {
            return Self::full(grid);
        }
        let occupied: Vec<usize> = (0..grid.len()).filter(|&i| grid.is_occupied(i)).collect();
        let want = ((count as f64 * occupied_fraction.clamp(0.0, 1.0)).round() as usize).min(occupied.len());
        let mut taken = vec![false; grid.len()];
        let mut idx: Vec<usize> = sample(rng, occupied.len(), want)
            .into_iter()
            .map(|i| occupied[i])
            .collect();
        idx.iter().for_each(|&i| taken[i] = true);
        let rest: Vec<usize> = (0..grid.len()).filter(|&i| !taken[i]).collect();
        idx.extend(sample(rng, rest.len(), count - want).into_iter().map(|i| rest[i]));
        idx.sort_unstable();
        Self::at(grid, &idx)
    }

    pub fn at(grid: &VoxelGrid, idx: &[usize]) -> Self {
        let pts = grid_points(grid.resolution());
        let n = idx.len();
        let mut pos = Vec::with_capacity(3 * n);
        let mut occ = Vec::with_capacity(n);
        let mut color = Vec::with_capacity(3 * n);
        for &i in idx {
            pos.extend_from_slice(&pts[i]);
            occ.push(f64::from(grid.occ()[i]));
            color.extend(grid.rgb()[i].iter().map(|&c| f64::from(c) / 255.0));
        }
        Self {
            positions: Tensor::new(vec![n, 3], pos).expect("n > 0"),
            occ: Tensor::new(vec![n, 1], occ).expect("n > 0"),
            color: Tensor::new(vec![n, 3], color).expect("n > 0"),
        }
    }

    pub fn len(&self) -> usize {
        self.occ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occ.is_empty()
    }
}

/// `(1/n) Σ α·l_i^{t→v} + (1−α)·l_i^{v→t}` over cosine logits without a
/// temperature. Rows of `text` and `shape` must be unit vectors, positives on
/// matching rows.
pub fn loss_joint(tape: &mut Tape, text: Var, shape: Var, alpha: f64) -> Result<Var> {
    let (n, _) = tape.value(text).dims2()?;
    if n == 0 || tape.shape(shape) != tape.shape(text) {
        return Err(CoreError::Invalid(format!(
            "joint loss needs matching nonempty batches, got {:?} and {:?}",
            tape.shape(text),
            tape.shape(shape)
        )));
    }
    let sim = tape.matmul_t(text, false, shape, true)?;
    let sim_t = tape.transpose(sim)?;
    let lt = tape.log_softmax_rows(sim)?;
    let lv = tape.log_softmax_rows(sim_t)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let dt = tape.gather(lt, &diag)?;
    let dv = tape.gather(lv, &diag)?;
    let dt = tape.sum(dt);
    let dv = tape.sum(dv);
    let a = tape.scale(dt, -alpha / n as f64);
    let b = tape.scale(dv, -(1.0 - alpha) / n as f64);
    Ok(tape.add(a, b)?)
}

/// Mean over points of `(ŝ − I_s)² + ‖ĉ·I_s − I_c‖²`; colour predictions at
/// unoccupied points are multiplied by zero and receive no gradient.
pub fn loss_ae(tape: &mut Tape, occ_pred: Var, color_pred: Var, batch: &PointBatch) -> Result<Var> {
    let n = batch.len();
    let target_occ = tape.constant(batch.occ.clone());
    let target_col = tape.constant(batch.color.clone());
    let mask: Vec<f64> = batch.occ.data().iter().flat_map(|&o| [o, o, o]).collect();
    let mask = tape.constant(Tensor::new(vec![n, 3], mask)?);
    let d_occ = tape.sub(occ_pred, target_occ)?;
    let masked = tape.mul(color_pred, mask)?;
    let d_col = tape.sub(masked, target_col)?;
    let s1 = tape.sum_squares(d_occ);
    let s2 = tape.sum_squares(d_col);
    let total = tape.add(s1, s2)?;
    Ok(tape.scale(total, 1.0 / n as f64))
}
