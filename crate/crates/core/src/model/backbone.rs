//! Toy convolutional backbone with four blocks.
//!
//! Blocks 1 and 2 halve the resolution; blocks 3 and 4 keep it, so the outputs
//! of blocks 2, 3 and 4 (the low, middle and high levels) share one grid.

use rand::Rng;

use crate::error::Result;
use crate::nn::{he_normal, Ctx, ParamStore};
use crate::tensor::{Tensor, Var};

pub const BLOCK_STRIDES: [usize; 4] = [2, 2, 1, 1];

/// One block: `depth` 3×3 convolutions with bias and ReLU; the first carries
/// the block stride.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub depth: usize,
    pub stride: usize,
}

impl ConvBlock {
    fn conv_name(&self, i: usize) -> String {
        format!("{}.conv{}", self.prefix, i)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for i in 0..self.depth {
            let c_in = if i == 0 { self.c_in } else { self.c_out };
            let name = self.conv_name(i);
            store.add_param(
                &format!("{name}.weight"),
                he_normal(&[self.c_out, c_in, 3, 3], c_in * 9, rng),
            )?;
            store.add_param(&format!("{name}.bias"), Tensor::zeros(&[self.c_out]))?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_tapped(ctx, x, self.depth - 1)?.1)
    }

    /// Block output together with the output of convolution `tap`.
    pub fn forward_tapped(&self, ctx: &mut Ctx<'_>, x: Var, tap: usize) -> Result<(Var, Var)> {
        let mut h = x;
        let mut tapped = x;
        for i in 0..self.depth {
            let name = self.conv_name(i);
            let w = ctx.param(&format!("{name}.weight"))?;
            let b = ctx.param(&format!("{name}.bias"))?;
            let stride = if i == 0 { self.stride } else { 1 };
            let y = ctx.g.conv2d(h, w, Some(b), stride, 1)?;
            h = ctx.g.relu(y);
            if i == tap {
                tapped = h;
            }
        }
        Ok((tapped, h))
    }
}

/// Blocks 1–4 for the given stem and level channel counts.
pub fn blocks(
    prefix: &str,
    in_channels: usize,
    stem: usize,
    levels: [usize; 3],
    depths: [usize; 4],
) -> [ConvBlock; 4] {
    let chans = [in_channels, stem, levels[0], levels[1], levels[2]];
    std::array::from_fn(|i| ConvBlock {
        prefix: format!("{prefix}.block{}", i + 1),
        c_in: chans[i],
        c_out: chans[i + 1],
        depth: depths[i],
        stride: BLOCK_STRIDES[i],
    })
}
