//! Prior-guided text-to-shape generator: pretrained encoders, the two-stage
//! prior fusion module and decoders widened to the fused per-point feature.

mod pfm;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2td_numcore::checkpoint::{load_into, save_store};
use t2td_numcore::{ParamStore, Tape, Tensor, Var};

pub use pfm::Pfm;
pub use train::{generator_loss, train_generator, training_examples, TrainExample};

use crate::causal::SelectorHeads;
use crate::config::{AblationConfig, FuseConfig, ModelConfig};
use crate::error::{CoreError, Result};
use crate::kgraph::KnowledgeGraph;
use crate::repnet::{all_points, Decoder, RepNet, TextEncoder, VoxelEncoder, TEXT_PREFIX, VOXEL_PREFIX};
use crate::synthdata::{Tokenizer, VoxelGrid, RESOLUTION};

pub const PFM_PREFIX: &str = "pfm";
pub const GEN_OCC_PREFIX: &str = "gen_s";
pub const GEN_COL_PREFIX: &str = "gen_c";

/// Prior features for one query after selection; either list may be empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionPriors {
    /// `F'_p`, one row per selected shape prior.
    pub shapes: Vec<Vec<f64>>,
    /// `F_a`, one row per matched attribute.
    pub attributes: Vec<Vec<f64>>,
}

fn rows_var(tape: &mut Tape, rows: &[Vec<f64>]) -> Result<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.constant(Tensor::from_rows(rows)?)))
}

/// Retrieves and selects priors for a query according to the ablation flags.
pub struct PriorSource<'a> {
    pub graph: &'a KnowledgeGraph,
    /// Selection heads and their parameters; required when `ablation.causal`.
    pub heads: Option<(&'a SelectorHeads, &'a ParamStore)>,
    pub ablation: AblationConfig,
    pub m: usize,
}

impl PriorSource<'_> {
    /// `exclude` names a graph shape entity that must not serve as its own prior.
    pub fn priors(&self, text: &str, query: &[f64], exclude: Option<usize>) -> Result<FusionPriors> {
        let bundle = self.graph.retrieve(text, query, self.m, exclude);
        let mut out = FusionPriors::default();
        if self.ablation.shape_prior && !bundle.shapes.is_empty() {
            let raw: Vec<Vec<f64>> = bundle.shapes.into_iter().map(|s| s.descriptor).collect();
            out.shapes = if self.ablation.causal {
                let (heads, store) = self
                    .heads
                    .ok_or_else(|| CoreError::Missing("selection heads for causal prior selection".into()))?;
                heads.apply(store, &raw)?
            } else {
                raw
            };
        }
        if self.ablation.attr_prior {
            out.attributes = bundle.attributes.into_iter().map(|a| a.descriptor).collect();
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub model: ModelConfig,
    pub fuse: FuseConfig,
    pub vocab: usize,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub voxel: VoxelEncoder,
    pub pfm: Pfm,
    pub dec_occ: Decoder,
    pub dec_col: Decoder,
}

impl Generator {
    /// Randomly initialized; the parameter layout matches [`Generator::from_pretrained`].
    pub fn new(model: &ModelConfig, fuse: &FuseConfig, vocab: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(fuse.seed);
        let mut store = ParamStore::new();
        let voxel = VoxelEncoder::new(&mut store, VOXEL_PREFIX, RESOLUTION, model.d, &mut rng)?;
        let text = TextEncoder::new(&mut store, TEXT_PREFIX, vocab, model, &mut rng)?;
        let pfm = Pfm::new(
            &mut store,
            PFM_PREFIX,
            model.d,
            fuse.d_hat,
            fuse.shape_blocks,
            fuse.attr_blocks,
            model.heads,
            model.ff_hidden,
            &mut rng,
        )?;
        let point_dim = 3 + fuse.d_hat;
        let dec_occ = Decoder::new(
            &mut store,
            GEN_OCC_PREFIX,
            model.d,
            point_dim,
            model.dec_hidden,
            1,
            &mut rng,
        )?;
        let dec_col = Decoder::new(
            &mut store,
            GEN_COL_PREFIX,
            model.d,
            point_dim,
            model.dec_hidden,
            3,
            &mut rng,
        )?;
        Ok(Self {
            model: model.clone(),
            fuse: fuse.clone(),
            vocab,
            store,
            text,
            voxel,
            pfm,
            dec_occ,
            dec_col,
        })
    }

    /// Encoders copied from `net`; decoders copied with zero rows for the
    /// attended features, so before training this decodes like `net`.
    pub fn from_pretrained(net: &RepNet, fuse: &FuseConfig) -> Result<Self> {
        let mut gen = Self::new(&net.cfg, fuse, net.vocab)?;
        gen.store.copy_from(&net.store, &format!("{TEXT_PREFIX}."))?;
        gen.store.copy_from(&net.store, &format!("{VOXEL_PREFIX}."))?;
        gen.dec_occ
            .copy_extended_from(&mut gen.store, &net.dec_occ, &net.store)?;
        gen.dec_col
            .copy_extended_from(&mut gen.store, &net.dec_col, &net.store)?;
        Ok(gen)
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

    /// Fuses `f: 1 x d` with `priors` and decodes at `points: N x 3`;
    /// returns `(occupancy N x 1, colour N x 3)`.
    pub fn decode_on(&self, tape: &mut Tape, f: Var, priors: &FusionPriors, points: Var) -> Result<(Var, Var)> {
        let shapes = rows_var(tape, &priors.shapes)?;
        let attrs = rows_var(tape, &priors.attributes)?;
        let f_prime = self.pfm.fuse_shape_priors(tape, &self.store, f, shapes)?;
        let attended = self.pfm.fuse_attributes(tape, &self.store, f_prime, attrs, points)?;
        let per_point = tape.concat(&[points, attended], 1)?;
        let occ = self.dec_occ.forward(tape, &self.store, f_prime, per_point)?;
        let col = self.dec_col.forward(tape, &self.store, f_prime, per_point)?;
        Ok((occ, col))
    }

    /// `f'_t`: the text slot after shape-prior fusion.
    pub fn fused_feature(&self, f: &[f64], priors: &FusionPriors) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::row(f));
        let shapes = rows_var(&mut tape, &priors.shapes)?;
        let out = self.pfm.fuse_shape_priors(&mut tape, &self.store, fv, shapes)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Decodes every cell centre of the grid; fails when nothing clears `threshold`.
    pub fn decode_grid(&self, f: &[f64], priors: &FusionPriors, threshold: f64) -> Result<VoxelGrid> {
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::row(f));
        let pts = tape.constant(all_points(RESOLUTION));
        let (occ, col) = self.decode_on(&mut tape, fv, priors, pts)?;
        let occ = tape.value(occ).data();
        let grid = VoxelGrid::from_predictions(RESOLUTION, occ, tape.value(col).data(), threshold)?;
        if grid.occupied_count() == 0 {
            return Err(CoreError::EmptyGeneration {
                max_prob: occ.iter().copied().fold(0.0, f64::max),
                threshold,
            });
        }
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_store(&self.store, path)?)
    }

    pub fn load(path: &Path, model: &ModelConfig, fuse: &FuseConfig, vocab: usize) -> Result<Self> {
        let mut gen = Self::new(model, fuse, vocab)?;
        load_into(&mut gen.store, path)?;
        Ok(gen)
    }
}

/// Text in, voxels out: encode, retrieve and select priors, fuse, decode.
pub fn generate(
    text: &str,
    tokenizer: &Tokenizer,
    gen: &Generator,
    source: &PriorSource<'_>,
    threshold: f64,
) -> Result<VoxelGrid> {
    let f = gen.encode_text(&tokenizer.encode(text))?;
    let priors = source.priors(text, &f, None)?;
    gen.decode_grid(&f, &priors, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_shape, BackStyle, Color, HeightTier, ShapeClass, ShapeSpec};

    pub(crate) fn small_model() -> (ModelConfig, FuseConfig) {
        let model = ModelConfig {
            d: 16,
            word_dim: 8,
            heads: 2,
            text_layers: 1,
            ff_hidden: 16,
            dec_hidden: 8,
            ..ModelConfig::default()
        };
        let fuse = FuseConfig {
            d_hat: 8,
            shape_blocks: 1,
            attr_blocks: 1,
            ..FuseConfig::default()
        };
        (model, fuse)
    }

    fn grid() -> VoxelGrid {
        let spec = ShapeSpec {
            class: ShapeClass::Table,
            leg_count: 4,
            height: HeightTier::Medium,
            back: BackStyle::None,
            primary: Color::Red,
            secondary: Color::Blue,
            seed: 0,
        };
        generate_shape(&spec).unwrap()
    }

    #[test]
    fn untrained_generator_decodes_like_the_pretrained_network() {
        let (model, fuse) = small_model();
        let vocab = Tokenizer::default().vocab_size();
        let net = RepNet::new(&model, vocab).unwrap();
        let gen = Generator::from_pretrained(&net, &fuse).unwrap();
        let f = net.encode_voxels(&grid()).unwrap();
        assert_eq!(gen.encode_voxels(&grid()).unwrap(), f);
        let pts = all_points(RESOLUTION);
        let (occ, col) = net.decode(&f, &pts).unwrap();
        let priors = FusionPriors {
            shapes: vec![vec![0.25; 16], vec![-0.25; 16]],
            attributes: vec![vec![0.5; 16]],
        };
        for p in [FusionPriors::default(), priors] {
            let mut tape = Tape::new();
            let fv = tape.constant(Tensor::row(&f));
            let pv = tape.constant(pts.clone());
            let (o, c) = gen.decode_on(&mut tape, fv, &p, pv).unwrap();
            assert_eq!(tape.value(o).data(), occ.as_slice());
            assert_eq!(tape.value(c).data(), col.as_slice());
            assert_eq!(gen.fused_feature(&f, &p).unwrap(), f);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_empty_generation() {
        let (model, fuse) = small_model();
        let vocab = Tokenizer::default().vocab_size();
        let gen = Generator::new(&model, &fuse, vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        gen.save(&path).unwrap();
        let back = Generator::load(&path, &model, &fuse, vocab).unwrap();
        let f = vec![0.25; 16];
        let a = gen.fused_feature(&f, &FusionPriors::default()).unwrap();
        assert_eq!(a, back.fused_feature(&f, &FusionPriors::default()).unwrap());
        match gen.decode_grid(&f, &FusionPriors::default(), 1.0) {
            Err(CoreError::EmptyGeneration { max_prob, threshold }) => {
                assert!(max_prob < 1.0 && max_prob > 0.0);
                assert_eq!(threshold, 1.0);
            }
            other => panic!("expected an empty generation, got {other:?}"),
        }
    }
}
