//! Representation network: text encoder, voxel encoder and the occupancy and
//! colour decoders, with autoencoder and cross-modal pretraining.

mod decoder;
mod encoders;
mod losses;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2td_numcore::checkpoint::{load_into, save_store};
use t2td_numcore::{ParamStore, Tape, Tensor};

pub use decoder::{Decoder, DECODER_LAYERS};
pub use encoders::{Conv3d, TextEncoder, VoxelEncoder, VOXEL_CHANNELS};
pub use losses::{loss_ae, loss_joint, PointBatch};
pub(crate) use train::mean_of;
pub use train::{ae_loss_on, joint_loss_on, pretrain_ae, pretrain_joint, LossCurve};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::synthdata::{grid_points, VoxelGrid, RESOLUTION};

pub const TEXT_PREFIX: &str = "text";
pub const VOXEL_PREFIX: &str = "voxel";
pub const DEC_OCC_PREFIX: &str = "dec_s";
pub const DEC_COL_PREFIX: &str = "dec_c";

#[derive(Clone, Debug)]
pub struct RepNet {
    pub cfg: ModelConfig,
    pub vocab: usize,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub voxel: VoxelEncoder,
    pub dec_occ: Decoder,
    pub dec_col: Decoder,
}

impl RepNet {
    pub fn new(cfg: &ModelConfig, vocab: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let voxel = VoxelEncoder::new(&mut store, VOXEL_PREFIX, RESOLUTION, cfg.d, &mut rng)?;
        let dec_occ = Decoder::new(&mut store, DEC_OCC_PREFIX, cfg.d, 3, cfg.dec_hidden, 1, &mut rng)?;
        let dec_col = Decoder::new(&mut store, DEC_COL_PREFIX, cfg.d, 3, cfg.dec_hidden, 3, &mut rng)?;
        let text = TextEncoder::new(&mut store, TEXT_PREFIX, vocab, cfg, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            store,
            text,
            voxel,
            dec_occ,
            dec_col,
        })
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.text.forward(&mut tape, &self.store, tokens)?;
        Ok(tape.value(f).data().to_vec())
    }

    pub fn encode_voxels(&self, grid: &VoxelGrid) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.voxel.forward(&mut tape, &self.store, grid)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Occupancy (`N`) and colour (`3N`) predictions for a feature at `points`.
    pub fn decode(&self, feature: &[f64], points: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let code = tape.constant(Tensor::row(feature));
        let p = tape.constant(points.clone());
        let occ = self.dec_occ.forward(&mut tape, &self.store, code, p)?;
        let col = self.dec_col.forward(&mut tape, &self.store, code, p)?;
        Ok((tape.value(occ).data().to_vec(), tape.value(col).data().to_vec()))
    }

    /// Decodes every cell centre and thresholds occupancy.
    pub fn decode_grid(&self, feature: &[f64], threshold: f64) -> Result<VoxelGrid> {
        let pts = all_points(RESOLUTION);
        let (occ, col) = self.decode(feature, &pts)?;
        VoxelGrid::from_predictions(RESOLUTION, &occ, &col, threshold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_store(&self.store, path)?)
    }

    pub fn load(path: &Path, cfg: &ModelConfig, vocab: usize) -> Result<Self> {
        let mut net = Self::new(cfg, vocab)?;
        load_into(&mut net.store, path)?;
        Ok(net)
    }
}

/// All `r³` cell centres as an `r³ x 3` tensor in grid order.
pub fn all_points(r: usize) -> Tensor {
    let data: Vec<f64> = grid_points(r).into_iter().flatten().collect();
    Tensor::new(vec![r * r * r, 3], data).expect("r > 0")
}
