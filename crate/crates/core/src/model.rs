//! The four-stage hierarchical encoder and the reconstruction decoder.
//!
//! Pipeline for one image:
//! scale layer (7×7 conv, stride 4) + sinusoidal positions → drop masked
//! patches → two multi-window attention stages → two global attention stages,
//! with per-patch 2×2 max pooling and a channel projection between stages →
//! positional downsampling fuses all four stage outputs → mask tokens fill the
//! removed patches → transformer decoder → pixels.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::config::{FusionMode, ModelConfig, IN_CHANNELS, TOKEN_PIXELS};
use crate::dmmsa::{
    block_forward, block_specs, grids_to_tokens, linear, tokens_to_grids, window_conv, window_set, AttentionKind,
    BlockParams, ConvWeights, NormParams, LAYER_NORM_EPS,
};
use crate::error::{config_err, Result};
use crate::kernels::Conv2dGeometry;
use crate::masking::{apply_mask, reassemble, TokenSet};
use crate::params::{Bound, Init, ParamSpec, Part, SpecList};
use crate::posembed::sincos_2d;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SCALE_KERNEL: usize = 7;
const SCALE_STRIDE: usize = 4;
const SCALE_PADDING: usize = 3;

/// Visible-token maps of the four encoder stages.
pub struct StageOutputs<T> {
    pub stages: Vec<TokenSet<Var<T>>>,
}

/// Attention structure of each encoder stage: multi-window in stages 1–2,
/// global in 3–4.
pub fn stage_kinds(config: &ModelConfig) -> Result<[AttentionKind; 4]> {
    let sides = config.stage_grid_sides();
    let mw = |p: usize| -> Result<AttentionKind> {
        Ok(AttentionKind::MultiWindow { p, windows: window_set(p, config.windows)? })
    };
    Ok([mw(sides[0])?, mw(sides[1])?, AttentionKind::Global, AttentionKind::Global])
}

fn stage_prefix(stage: usize, block: usize) -> String {
    format!("encoder.stage{}.block{}", stage + 1, block)
}

/// Every parameter of the autoencoder, encoder first, in initialization order.
pub fn param_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let kinds = stage_kinds(config)?;
    let c = config.channels;
    let mut l = SpecList::new(Part::Encoder);
    l.conv("encoder.scale", c[0], IN_CHANNELS, SCALE_KERNEL);
    for s in 0..4 {
        if s > 0 {
            l.linear(&format!("encoder.down{s}"), c[s - 1], c[s]);
        }
        for b in 0..config.blocks[s] {
            block_specs(&mut l, &stage_prefix(s, b), c[s], &kinds[s], config.kv_conv, config.mlp_ratio);
        }
    }
    let sides = config.stage_grid_sides();
    for i in 1..=3 {
        match config.fusion {
            FusionMode::Cascade => l.conv(&format!("encoder.fuse{i}"), c[i], c[i - 1], 2),
            FusionMode::Parallel => l.conv(&format!("encoder.fuse{i}"), c[3], c[i - 1], sides[i - 1] / sides[3]),
        }
    }

    l.set_part(Part::Decoder);
    let d = config.decoder_width;
    l.push("decoder.mask_token".into(), vec![c[3]], Init::Normal(0.02), false);
    l.linear("decoder.embed", c[3], d);
    for b in 0..config.decoder_depth {
        block_specs(&mut l, &format!("decoder.block{b}"), d, &AttentionKind::Global, config.kv_conv, config.mlp_ratio);
    }
    l.norm("decoder.norm", d);
    l.linear("decoder.head", d, IN_CHANNELS * TOKEN_PIXELS * TOKEN_PIXELS);
    Ok(l.specs)
}

/// Exact number of encoder parameters (decoder and mask token excluded).
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(param_specs(config)?
        .iter()
        .filter(|s| s.part == Part::Encoder)
        .map(ParamSpec::numel)
        .sum())
}

/// Row permutation taking raster-ordered tokens of a `grid·p` square to
/// patch-major order: entry `r` is the raster row of patch-major row `r`.
pub fn raster_to_patch_major(grid: usize, p: usize) -> Vec<usize> {
    let side = grid * p;
    (0..grid * grid * p * p)
        .map(|r| {
            let (patch, cell) = (r / (p * p), r % (p * p));
            let y = (patch / grid) * p + cell / p;
            let x = (patch % grid) * p + cell % p;
            y * side + x
        })
        .collect()
}

/// A configured model: shape bookkeeping plus the fixed tables.
pub struct DyVit<T> {
    config: ModelConfig,
    kinds: [AttentionKind; 4],
    encoder_pos: Tensor<T>,
    raster_to_patch: Vec<usize>,
    decoder_pos: Tensor<T>,
    unpatchify: Rc<Vec<usize>>,
}

impl<T: Scalar> DyVit<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid_side();
        let sides = config.stage_grid_sides();
        let ts = config.token_side();
        let last = grid * sides[3];
        let decoder_pos_raster = sincos_2d::<T>(last, last, config.channels[3])?;
        let perm = raster_to_patch_major(grid, sides[3]);
        let decoder_pos = Tensor::from_vec(
            decoder_pos_raster.shape().to_vec(),
            perm.iter().flat_map(|&r| decoder_pos_raster.row(r).to_vec()).collect(),
        )?;
        Ok(Self {
            config: config.clone(),
            kinds: stage_kinds(config)?,
            encoder_pos: sincos_2d(ts, ts, config.channels[0])?,
            raster_to_patch: raster_to_patch_major(grid, sides[0]),
            decoder_pos,
            unpatchify: Rc::new(unpatchify_index(grid, sides[3])),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage_kinds(&self) -> &[AttentionKind; 4] {
        &self.kinds
    }

    /// Decoder positional table in patch-major token order.
    pub fn decoder_pos(&self) -> &Tensor<T> {
        &self.decoder_pos
    }

    /// `3×H×W` image → patch-major tokens `(n·p₁²) × C₁` with positions added.
    pub fn scale_embed(&self, g: &Graph<T>, b: &Bound<'_, T>, image: &Var<T>) -> Result<Var<T>> {
        let s = self.config.image_size;
        if image.shape() != [IN_CHANNELS, s, s] {
            return Err(config_err!(
                "image shape {:?}, expected [{IN_CHANNELS}, {s}, {s}]",
                image.shape()
            ));
        }
        let x = g.reshape(image, [1, IN_CHANNELS, s, s])?;
        let y = g.conv2d(
            &x,
            b.get("encoder.scale.weight")?,
            Some(b.get("encoder.scale.bias")?),
            Conv2dGeometry::truncating(SCALE_STRIDE, SCALE_PADDING),
        )?;
        let ts = self.config.token_side();
        let c1 = self.config.channels[0];
        let tokens = g.transpose(&g.reshape(&y, [c1, ts * ts])?)?;
        let tokens = g.add(&tokens, &Var::constant(self.encoder_pos.clone()))?;
        g.gather_rows(&tokens, &self.raster_to_patch)
    }

    /// Scale layer, masking, and all four stages.
    pub fn encode(&self, g: &Graph<T>, b: &Bound<'_, T>, image: &Var<T>, keep: &[bool]) -> Result<StageOutputs<T>> {
        if keep.len() != self.config.n_patches() {
            return Err(config_err!(
                "mask over {} patches, model has {}",
                keep.len(),
                self.config.n_patches()
            ));
        }
        let tokens = self.scale_embed(g, b, image)?;
        let set = apply_mask(g, &tokens, keep, self.config.stage_grid_sides()[0])?;
        self.encode_visible(g, b, set)
    }

    /// The four stages applied to already-masked stage-1 tokens.
    pub fn encode_visible(&self, g: &Graph<T>, b: &Bound<'_, T>, set: TokenSet<Var<T>>) -> Result<StageOutputs<T>> {
        let sides = self.config.stage_grid_sides();
        if set.p != sides[0] {
            return Err(config_err!("stage-1 tokens with p = {}, expected {}", set.p, sides[0]));
        }
        let v = set.visible();
        let mut x = set.tokens.clone();
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            if s > 0 {
                x = self.stage_downsample(g, b, &x, v, sides[s - 1], s)?;
            }
            for blk in 0..self.config.blocks[s] {
                let prefix = stage_prefix(s, blk);
                let params = BlockParams::bind(b, &prefix, &self.kinds[s], self.config.kv_conv, self.config.heads[s])?;
                x = block_forward(g, &x, &params, &self.kinds[s], v)?;
            }
            stages.push(TokenSet { tokens: x.clone(), indices: set.indices.clone(), p: sides[s], n: set.n });
        }
        Ok(StageOutputs { stages })
    }

    /// 2×2 max pooling inside every patch grid, then `C_s → C_{s+1}`.
    fn stage_downsample(&self, g: &Graph<T>, b: &Bound<'_, T>, x: &Var<T>, v: usize, p: usize, s: usize) -> Result<Var<T>> {
        stage_downsample(
            g,
            x,
            v,
            p,
            b.get(&format!("encoder.down{s}.weight"))?,
            b.get(&format!("encoder.down{s}.bias"))?,
        )
    }

    /// Fuses the stage outputs into one token map at the last stage's grid.
    pub fn positional_downsample(&self, g: &Graph<T>, b: &Bound<'_, T>, out: &StageOutputs<T>) -> Result<TokenSet<Var<T>>> {
        let st = &out.stages;
        if st.len() != 4 {
            return Err(crate::error::ComaError::Invariant(format!("{} stage outputs", st.len())));
        }
        let v = st[0].visible();
        if st.iter().any(|s| s.indices != st[0].indices) {
            return Err(crate::error::ComaError::Invariant("stages disagree on visible patches".into()));
        }
        let conv = |i: usize| -> Result<ConvWeights<T>> {
            Ok(ConvWeights {
                weight: b.get(&format!("encoder.fuse{i}.weight"))?.clone(),
                bias: b.get(&format!("encoder.fuse{i}.bias"))?.clone(),
            })
        };
        let fused = match self.config.fusion {
            FusionMode::Cascade => {
                let mut y = st[0].tokens.clone();
                for i in 1..=3 {
                    let down = window_conv(g, &y, v, st[i - 1].p, 2, &conv(i)?)?;
                    y = g.add(&down, &st[i].tokens)?;
                }
                y
            }
            FusionMode::Parallel => {
                let mut y = st[3].tokens.clone();
                for i in 1..=3 {
                    let k = st[i - 1].p / st[3].p;
                    let down = window_conv(g, &st[i - 1].tokens, v, st[i - 1].p, k, &conv(i)?)?;
                    y = g.add(&y, &down)?;
                }
                y
            }
        };
        Ok(st[3].with_tokens(fused))
    }

    /// Mask tokens and positions in, pixels out: full token sequence → `3×H×W`.
    pub fn decode(&self, g: &Graph<T>, b: &Bound<'_, T>, full: &Var<T>) -> Result<Var<T>> {
        let mut h = linear(g, full, b.get("decoder.embed.weight")?, b.get("decoder.embed.bias")?)?;
        let kind = AttentionKind::Global;
        for blk in 0..self.config.decoder_depth {
            let params = BlockParams::bind(b, &format!("decoder.block{blk}"), &kind, self.config.kv_conv, self.config.decoder_heads)?;
            h = block_forward(g, &h, &params, &kind, 0)?;
        }
        let norm = NormParams::bind(b, "decoder.norm")?;
        h = g.layer_norm(&h, &norm.gamma, &norm.beta, T::of(LAYER_NORM_EPS))?;
        let pixels = linear(g, &h, b.get("decoder.head.weight")?, b.get("decoder.head.bias")?)?;
        let s = self.config.image_size;
        g.gather(&pixels, self.unpatchify.clone(), [IN_CHANNELS, s, s])
    }

    /// One branch end to end: the reconstruction of `image` seen through `keep`.
    pub fn reconstruct(&self, g: &Graph<T>, b: &Bound<'_, T>, image: &Var<T>, keep: &[bool]) -> Result<Var<T>> {
        let stages = self.encode(g, b, image, keep)?;
        let fused = self.positional_downsample(g, b, &stages)?;
        let full = reassemble(g, &fused, b.get("decoder.mask_token")?, &self.decoder_pos)?;
        self.decode(g, b, &full)
    }
}

/// Pooling plus projection between stages, on patch-major tokens.
pub fn stage_downsample<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    v: usize,
    p: usize,
    w: &Var<T>,
    bias: &Var<T>,
) -> Result<Var<T>> {
    if !p.is_multiple_of(2) {
        return Err(config_err!("cannot halve odd patch grid {p}"));
    }
    let grids = tokens_to_grids(g, x, v, p)?;
    let pooled = g.maxpool2d(&grids, 2)?;
    linear(g, &grids_to_tokens(g, &pooled)?, w, bias)
}

/// Element index taking head outputs `(n·p²) × (3·t²)`, ordered
/// `(channel, row, col)` within a token, to a `3 × H × W` image.
fn unpatchify_index(grid: usize, p: usize) -> Vec<usize> {
    let t = TOKEN_PIXELS;
    let side = grid * p * t;
    let per_token = IN_CHANNELS * t * t;
    let tokens_side = grid * p;
    let mut raster_to_token = vec![0; tokens_side * tokens_side];
    for (r, raster) in raster_to_patch_major(grid, p).into_iter().enumerate() {
        raster_to_token[raster] = r;
    }
    let mut idx = Vec::with_capacity(IN_CHANNELS * side * side);
    for c in 0..IN_CHANNELS {
        for y in 0..side {
            for x in 0..side {
                let token = raster_to_token[(y / t) * tokens_side + x / t];
                idx.push(token * per_token + c * t * t + (y % t) * t + x % t);
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn patch_major_permutation() {
        // 2×2 patches of 2×2 tokens on a 4×4 raster
        assert_eq!(
            raster_to_patch_major(2, 2),
            vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
        );
    }

    #[test]
    fn unpatchify_is_a_permutation() {
        let mut idx = unpatchify_index(2, 1);
        idx.sort_unstable();
        assert!(idx.iter().enumerate().all(|(i, &j)| i == j));
    }

    #[test]
    fn spec_names_are_unique() {
        for cfg in [ModelConfig::dyvit_nano(), ModelConfig::dyvit_s()] {
            let specs = param_specs(&cfg).unwrap();
            let mut names: Vec<_> = specs.iter().map(|s| &s.name).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), specs.len());
        }
    }

    #[test]
    fn scale_embed_token_counts() {
        let cfg = ModelConfig::dyvit_nano();
        let store = ParamStore::<f64>::init(param_specs(&cfg).unwrap(), 0).unwrap();
        let model = DyVit::new(&cfg).unwrap();
        let g = Graph::new();
        let b = store.bind(&g, false);
        let img = Var::constant(Tensor::zeros([3, 64, 64]));
        let tokens = model.scale_embed(&g, &b, &img).unwrap();
        assert_eq!(tokens.shape(), &[16 * 16, 16]);
        let bad = Var::constant(Tensor::zeros([3, 60, 60]));
        assert!(model.scale_embed(&g, &b, &bad).is_err());
    }
}
