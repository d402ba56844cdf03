//! The full network: backbone, two BFP level pairs, re-entry of the
//! augmented maps, fusion, pooled descriptors and identity heads.

mod backbone;
pub mod train;

pub use backbone::{blocks, ConvBlock, BLOCK_STRIDES};
pub use train::{Adam, AdamConfig, LossBreakdown, LossConfig, train_step};

use rand::Rng;

use crate::bfp::{bfp_pair, BfpParams, LevelFeatures};
use crate::error::{contract_err, shape_err, Result};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::pooling::{multi_lambda_descriptor, GpConfig};
use crate::tensor::{Tensor, Var};

/// Names of the three learned features, in descriptor order.
pub const FEATURES: [&str; 3] = ["low", "mid", "fused"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Input image `(height, width)`.
    pub image_hw: (usize, usize),
    pub stem_channels: usize,
    /// Channels of the low, middle and high levels.
    pub channels: [usize; 3],
    pub block_depths: [usize; 4],
    /// Convolution within block 2 whose output is the low level; `None` taps
    /// the block output.
    pub low_tap: Option<usize>,
    /// Low-rank bilinear pooling dimension `L`.
    pub rank: usize,
    /// Pooling-space dimension `L'`.
    pub pool_dim: usize,
    pub num_classes: usize,
    pub pooling: GpConfig,
    /// Without BFP the three features are the raw levels.
    pub use_bfp: bool,
    /// Separate block 3/4 weights for the re-entry path.
    pub reentry_copies: bool,
    /// Batch norm on every BFP projection and before each identity head.
    pub batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_hw: (48, 16),
            stem_channels: 8,
            channels: [16, 16, 32],
            block_depths: [1, 1, 1, 1],
            low_tap: None,
            rank: 32,
            pool_dim: 64,
            num_classes: 16,
            pooling: GpConfig::default(),
            use_bfp: true,
            reentry_copies: false,
            batch_norm: true,
        }
    }
}

impl ModelConfig {
    /// Shared grid of the three levels.
    pub fn spatial(&self) -> (usize, usize) {
        let down = BLOCK_STRIDES.iter().product::<usize>();
        (self.image_hw.0 / down, self.image_hw.1 / down)
    }

    pub fn validate(&self) -> Result<()> {
        let down = BLOCK_STRIDES.iter().product::<usize>();
        let (h, w) = self.image_hw;
        if h % down != 0 || w % down != 0 || h < down || w < down {
            return Err(contract_err!("image {h}x{w} must be a positive multiple of {down}"));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.channels.contains(&0) {
            return Err(contract_err!("channel counts must be positive"));
        }
        if self.block_depths.contains(&0) {
            return Err(contract_err!("block depths must be positive"));
        }
        if let Some(t) = self.low_tap {
            if t >= self.block_depths[1] {
                return Err(contract_err!(
                    "low tap {t} outside block 2 of depth {}",
                    self.block_depths[1]
                ));
            }
        }
        if self.rank == 0 || self.pool_dim == 0 {
            return Err(contract_err!("projection dimensions L and L' must be positive"));
        }
        if self.num_classes < 2 {
            return Err(contract_err!("need at least 2 identity classes"));
        }
        self.pooling.validate()
    }

    /// Descriptor width: `d1 + d2 + d3`.
    pub fn descriptor_dim(&self) -> usize {
        self.channels.iter().sum()
    }

    fn feature_dims(&self) -> [usize; 3] {
        self.channels
    }
}

/// Everything a forward pass produces, per batch.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub levels: LevelFeatures,
    /// `A_L`, `A_M` and the fusion map, `[B, D_k, H, W]`.
    pub maps: [Var; 3],
    /// Pooled descriptors `[B, D_k]`.
    pub descriptors: [Var; 3],
    /// Identity logits `[B, C]` per feature.
    pub logits: [Var; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for b in &Self::backbone_blocks(&config) {
            b.init(&mut params, rng)?;
        }
        if config.use_bfp {
            if config.reentry_copies {
                for b in &Self::reentry_blocks(&config)[2..] {
                    b.init(&mut params, rng)?;
                }
            }
            for p in &Self::bfp_params(&config)? {
                p.init(&mut params, config.batch_norm, rng)?;
            }
        }
        for (name, d) in FEATURES.iter().zip(config.feature_dims()) {
            if config.batch_norm {
                params.add_batch_norm(&format!("head_{name}.bn"), d)?;
            }
            params.add_param(
                &format!("head_{name}.weight"),
                Tensor::randn(&[d, config.num_classes], 0.01, rng),
            )?;
        }
        let model = Self { config, params };
        model.check_reentry_closure()?;
        Ok(model)
    }

    /// Rebuilds a model around stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut rng = crate::rng::substream(0, crate::rng::Stream::Init);
        let template = Self::new(config.clone(), &mut rng)?;
        if template.params.len() != params.len() {
            return Err(contract_err!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            ));
        }
        for e in template.params.entries() {
            let got = params.get(&e.name)?;
            let trainable = params.entries().iter().any(|x| x.name == e.name && x.trainable);
            if trainable != e.trainable {
                return Err(contract_err!("tensor {} has the wrong trainable flag", e.name));
            }
            if got.dims() != e.value.dims() {
                return Err(shape_err!(
                    "tensor {} has dims {:?}, expected {:?}",
                    e.name,
                    got.dims(),
                    e.value.dims()
                ));
            }
        }
        Ok(Self { config, params })
    }

    fn backbone_blocks(cfg: &ModelConfig) -> [ConvBlock; 4] {
        blocks("backbone", cfg.in_channels, cfg.stem_channels, cfg.channels, cfg.block_depths)
    }

    fn reentry_blocks(cfg: &ModelConfig) -> [ConvBlock; 4] {
        let prefix = if cfg.reentry_copies { "reentry" } else { "backbone" };
        blocks(prefix, cfg.in_channels, cfg.stem_channels, cfg.channels, cfg.block_depths)
    }

    fn bfp_params(cfg: &ModelConfig) -> Result<[BfpParams; 2]> {
        let [d1, d2, d3] = cfg.channels;
        Ok([
            BfpParams::new("bfp_lm", d1, d2, cfg.rank, cfg.pool_dim)?,
            BfpParams::new("bfp_mh", d2, d3, cfg.rank, cfg.pool_dim)?,
        ])
    }

    /// Augmented maps keep their level's channel count, so `A_L` feeds block 3
    /// and `A_M` adds onto block 3's output.
    fn check_reentry_closure(&self) -> Result<()> {
        if !self.config.use_bfp {
            return Ok(());
        }
        let blocks = Self::reentry_blocks(&self.config);
        let [lm, mh] = Self::bfp_params(&self.config)?;
        if blocks[2].c_in != lm.d_a || blocks[2].c_out != lm.d_b || blocks[3].c_out != mh.d_b {
            return Err(shape_err!("augmented maps cannot re-enter blocks 3 and 4"));
        }
        Ok(())
    }

    /// Names of the BFP projection weights `U, V, U', V'` of both pairs.
    pub fn bfp_projection_names(&self) -> Result<Vec<String>> {
        Ok(Self::bfp_params(&self.config)?
            .iter()
            .flat_map(|p| p.projection_names())
            .collect())
    }

    /// Low, middle and high level maps for `images: [B, C, H, W]`.
    pub fn backbone_forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<LevelFeatures> {
        let (h, w) = self.config.image_hw;
        let d = ctx.g.dims(images);
        if d.len() != 4 || d[1] != self.config.in_channels || d[2] != h || d[3] != w {
            return Err(shape_err!(
                "images {:?} do not match [B, {}, {}, {}]",
                d,
                self.config.in_channels,
                h,
                w
            ));
        }
        let [b1, b2, b3, b4] = Self::backbone_blocks(&self.config);
        let stem = b1.forward(ctx, images)?;
        let tap = self.config.low_tap.unwrap_or(b2.depth - 1);
        let (low, block2) = b2.forward_tapped(ctx, stem, tap)?;
        let mid = b3.forward(ctx, block2)?;
        let high = b4.forward(ctx, mid)?;
        LevelFeatures::new(ctx, low, mid, high)
    }

    /// The full forward pass.
    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<ForwardOutput> {
        let levels = self.backbone_forward(ctx, images)?;
        let maps = if self.config.use_bfp {
            let [lm, mh] = Self::bfp_params(&self.config)?;
            let (a_low, m_from_low) = bfp_pair(ctx, levels.low, levels.mid, &lm)?;
            let (m_from_high, a_high) = bfp_pair(ctx, levels.mid, levels.high, &mh)?;
            let a_mid = ctx.g.add(m_from_low, m_from_high)?;
            let [_, _, b3, b4] = Self::reentry_blocks(&self.config);
            let reentered = b3.forward(ctx, a_low)?;
            let merged = ctx.g.add(reentered, a_mid)?;
            let integrated = b4.forward(ctx, merged)?;
            let fused = ctx.g.add(integrated, a_high)?;
            [a_low, a_mid, fused]
        } else {
            [levels.low, levels.mid, levels.high]
        };

        let n = levels.n();
        let mut descriptors = maps;
        let mut logits = maps;
        for (k, &map) in maps.iter().enumerate() {
            let d = ctx.g.dims(map).to_vec();
            let cells = ctx.g.reshape(map, &[d[0], d[1], n])?;
            let desc = multi_lambda_descriptor(&mut ctx.g, cells, &self.config.pooling)?;
            let head_in = ctx.norm(&format!("head_{}.bn", FEATURES[k]), desc)?;
            let w = ctx.param(&format!("head_{}.weight", FEATURES[k]))?;
            descriptors[k] = desc;
            logits[k] = ctx.g.matmul(head_in, w)?;
        }
        Ok(ForwardOutput {
            levels,
            maps,
            descriptors,
            logits,
        })
    }

    /// Eval-mode retrieval embeddings `[B, d1 + d2 + d3]`, computed in chunks
    /// of `chunk` images.
    pub fn embed(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let dims = images.dims().to_vec();
        if dims.len() != 4 {
            return Err(shape_err!("images must be [B, C, H, W], got {:?}", dims));
        }
        let per = dims[1..].iter().product::<usize>();
        let chunk = chunk.max(1);
        let n_chunks = dims[0].div_ceil(chunk);
        let parts = crate::par::map_indices(n_chunks, |c| -> Result<Vec<f64>> {
            let lo = c * chunk;
            let hi = (lo + chunk).min(dims[0]);
            let mut cd = dims.clone();
            cd[0] = hi - lo;
            let x = Tensor::new(cd, images.data()[lo * per..hi * per].to_vec())?;
            let mut ctx = Ctx::new(&self.params, Mode::Eval);
            let xv = ctx.g.constant(x);
            let out = self.forward(&mut ctx, xv)?;
            let desc = final_descriptor(&mut ctx, &out.descriptors)?;
            Ok(ctx.g.value(desc).data().to_vec())
        });
        let mut data = Vec::with_capacity(dims[0] * self.config.descriptor_dim());
        for p in parts {
            data.extend(p?);
        }
        Tensor::new(vec![dims[0], self.config.descriptor_dim()], data)
    }
}

/// Concatenates the low, middle and fused descriptors, in that order.
pub fn final_descriptor(ctx: &mut Ctx<'_>, descriptors: &[Var; 3]) -> Result<Var> {
    let rows: Vec<usize> = descriptors.iter().map(|&d| ctx.g.dims(d)[0]).collect();
    if rows.iter().any(|&r| r != rows[0]) {
        return Err(contract_err!("descriptor batches differ: {:?}", rows));
    }
    ctx.g.concat_columns(descriptors)
}
