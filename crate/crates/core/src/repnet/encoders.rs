//! Text and voxel encoders. Both return L2-normalized `1 x d` features.

use rand::Rng;
use t2td_numcore::nn::{LayerNorm, Linear, TransformerBlock, LEAKY_SLOPE};
use t2td_numcore::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::synthdata::{VoxelGrid, PAD};

/// Token + learned positional embeddings, a projection to `d`, pre-norm
/// transformer blocks, a final norm and masked mean pooling.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub proj: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let tokens = store.add(format!("{prefix}.tok"), Tensor::randn(&[vocab, cfg.word_dim], 0.5, rng))?;
        let positions = store.add(
            format!("{prefix}.pos"),
            Tensor::randn(&[cfg.max_len, cfg.word_dim], 0.1, rng),
        )?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), cfg.word_dim, cfg.d, rng)?;
        let blocks = (0..cfg.text_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{prefix}.block{i}"),
                    cfg.d,
                    cfg.heads,
                    cfg.ff_hidden,
                    false,
                    rng,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cfg.d)?;
        Ok(Self {
            tokens,
            positions,
            proj,
            blocks,
            norm,
            max_len: cfg.max_len,
        })
    }

    /// Pad positions never enter the computation: only non-pad rows are
    /// embedded, so they are excluded from both attention and pooling.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.len() != self.max_len {
            return Err(CoreError::Invalid(format!(
                "token sequence of length {} for an encoder of length {}",
                ids.len(),
                self.max_len
            )));
        }
        let (pos, toks): (Vec<usize>, Vec<usize>) = ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD)
            .map(|(p, &t)| (p, t))
            .unzip();
        if toks.is_empty() {
            return Err(CoreError::Invalid("cannot encode an all-pad token sequence".into()));
        }
        let tt = tape.param(store, self.tokens);
        let pt = tape.param(store, self.positions);
        let e = tape.embedding(tt, &toks)?;
        let p = tape.embedding(pt, &pos)?;
        let x = tape.add(e, p)?;
        let mut h = self.proj.forward(tape, store, x)?;
        for b in &self.blocks {
            h = b.forward_self(tape, store, h, None)?;
        }
        let h = self.norm.forward(tape, store, h)?;
        let mask = vec![true; toks.len()];
        let pooled = tape.mean_pool(h, &mask)?;
        Ok(tape.l2_normalize_rows(pooled)?)
    }
}

/// One strided 3D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k3 = kernel.pow(3);
        let bound = (6.0 / ((in_ch + out_ch) * k3) as f64).sqrt();
        let kernels = store.add(
            format!("{name}.w"),
            Tensor::uniform(&[out_ch, in_ch, kernel, kernel, kernel], bound, rng),
        )?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            kernels,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        Ok(tape.conv3d(x, k, Some(b), self.stride, self.pad)?)
    }
}

/// Five convolution blocks: four `k=4, s=2, p=1` halvings `16→8→4→2→1` with
/// channels `4→8→16→32→64`, then a `1³` convolution `64→d`.
#[derive(Clone, Debug)]
pub struct VoxelEncoder {
    pub convs: Vec<Conv3d>,
    pub resolution: usize,
    pub d: usize,
}

pub const VOXEL_CHANNELS: [usize; 5] = [4, 8, 16, 32, 64];

impl VoxelEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        resolution: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if resolution != 16 {
            return Err(CoreError::Config(format!(
                "voxel encoder expects 16^3 input, got {resolution}^3"
            )));
        }
        let mut convs = Vec::new();
        for (i, w) in VOXEL_CHANNELS.windows(2).enumerate() {
            convs.push(Conv3d::new(
                store,
                &format!("{prefix}.conv{i}"),
                w[0],
                w[1],
                4,
                2,
                1,
                rng,
            )?);
        }
        convs.push(Conv3d::new(
            store,
            &format!("{prefix}.conv4"),
            VOXEL_CHANNELS[4],
            d,
            1,
            1,
            0,
            rng,
        )?);
        Ok(Self { convs, resolution, d })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, grid: &VoxelGrid) -> Result<Var> {
        if grid.resolution() != self.resolution {
            return Err(CoreError::Invalid(format!(
                "grid resolution {} does not match encoder resolution {}",
                grid.resolution(),
                self.resolution
            )));
        }
        let mut h = tape.constant(grid.to_input());
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(tape, store, h)?;
            if i < last {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        let flat = tape.reshape(h, &[1, self.d])?;
        Ok(tape.l2_normalize_rows(flat)?)
    }
}
