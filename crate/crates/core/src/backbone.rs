//! ViT encoder: patch embedding, class token, position embeddings and pre-norm blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{cst, Real, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub channels_in: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
}

impl BackboneConfig {
    /// ViT-Base/16 at 224×224.
    pub fn vit_base() -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            kernel_height: 16,
            kernel_width: 16,
            stride: 16,
            channels_in: 3,
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_hidden_dim: 4 * 768,
        }
    }

    pub fn toy() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            kernel_height: 8,
            kernel_width: 8,
            stride: 8,
            channels_in: 3,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_hidden_dim: 4 * 16,
        }
    }

    /// `(grid rows, grid cols)` of the patch grid.
    pub fn grid(&self) -> Result<(usize, usize)> {
        let rows = ConvGeometry::out_extent(self.image_height, self.kernel_height, self.stride, 0)?;
        let cols = ConvGeometry::out_extent(self.image_width, self.kernel_width, self.stride, 0)?;
        Ok((rows, cols))
    }

    pub fn patch_count(&self) -> Result<usize> {
        patch_count(self)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    /// Every violated constraint, as human-readable messages.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.grid() {
            out.push(format!("backbone: {e}"));
        }
        if self.channels_in == 0 {
            out.push("backbone.channels_in must be positive".into());
        }
        if self.embed_dim == 0 {
            out.push("backbone.embed_dim must be positive".into());
        }
        if self.num_heads == 0 {
            out.push("backbone.num_heads must be positive".into());
        } else if self.embed_dim % self.num_heads != 0 {
            out.push(format!(
                "backbone.embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            out.push("backbone.num_blocks must be at least 1".into());
        }
        if self.mlp_hidden_dim == 0 {
            out.push("backbone.mlp_hidden_dim must be positive".into());
        }
        out
    }
}

/// `N = ((H - K_H)/S + 1) · ((W - K_W)/S + 1)` with zero padding.
pub fn patch_count(config: &BackboneConfig) -> Result<usize> {
    let (rows, cols) = config.grid()?;
    Ok(rows * cols)
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Encoder output `F = LN(z_B)`: row 0 is the global token, rows `1..=N` the local tokens.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub num_patches: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

pub fn block_prefix(index: usize) -> String {
    format!("backbone.block.{index}")
}

impl Backbone {
    /// Registers every backbone parameter in `store` under the `backbone.` prefix.
    /// Blocks are numbered from 1 to `num_blocks`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let d = config.embed_dim;
        let n = config.patch_count()?;
        let gauss = |rng: &mut R, shape: &[usize]| Tensor::<T>::randn(shape, INIT_STD, rng);

        let patch_weight = store.add_param(
            "backbone.patch_embed.weight",
            gauss(
                rng,
                &[d, config.channels_in, config.kernel_height, config.kernel_width],
            ),
        )?;
        let patch_bias = store.add_param("backbone.patch_embed.bias", Tensor::zeros(&[d]))?;
        let cls_token = store.add_param("backbone.cls_token", gauss(rng, &[1, d]))?;
        let pos_embed = store.add_param("backbone.pos_embed", gauss(rng, &[n + 1, d]))?;

        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 1..=config.num_blocks {
            let p = block_prefix(b);
            let h = config.mlp_hidden_dim;
            let mut add = |name: &str, t: Tensor<T>| store.add_param(format!("{p}.{name}"), t);
            let ln1_gamma = add("ln1.gamma", Tensor::full(&[d], T::one()))?;
            let ln1_beta = add("ln1.beta", Tensor::zeros(&[d]))?;
            let wq = add("msa.wq", gauss(rng, &[d, d]))?;
            let bq = add("msa.bq", Tensor::zeros(&[d]))?;
            let wk = add("msa.wk", gauss(rng, &[d, d]))?;
            let bk = add("msa.bk", Tensor::zeros(&[d]))?;
            let wv = add("msa.wv", gauss(rng, &[d, d]))?;
            let bv = add("msa.bv", Tensor::zeros(&[d]))?;
            let wo = add("msa.wo", gauss(rng, &[d, d]))?;
            let bo = add("msa.bo", Tensor::zeros(&[d]))?;
            let ln2_gamma = add("ln2.gamma", Tensor::full(&[d], T::one()))?;
            let ln2_beta = add("ln2.beta", Tensor::zeros(&[d]))?;
            let fc1_w = add("mlp.fc1.weight", gauss(rng, &[d, h]))?;
            let fc1_b = add("mlp.fc1.bias", Tensor::zeros(&[h]))?;
            let fc2_w = add("mlp.fc2.weight", gauss(rng, &[h, d]))?;
            let fc2_b = add("mlp.fc2.bias", Tensor::zeros(&[d]))?;
            blocks.push(BlockParams {
                ln1_gamma,
                ln1_beta,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_gamma,
                ln2_beta,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let norm_gamma = store.add_param("backbone.norm.gamma", Tensor::full(&[d], T::one()))?;
        let norm_beta = store.add_param("backbone.norm.beta", Tensor::zeros(&[d]))?;
        Ok(Self {
            config: config.clone(),
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm_gamma,
            norm_beta,
        })
    }

    fn check_image<T: Real>(&self, g: &Graph<T>, image: Var) -> Result<()> {
        let c = &self.config;
        let expected = [c.channels_in, c.image_height, c.image_width];
        if g.value(image).shape() != expected {
            return Err(Error::dim(format!(
                "image shape {:?}, backbone expects {expected:?}",
                g.value(image).shape()
            )));
        }
        Ok(())
    }

    /// Patch projections `E(x_p^i)` as an `N×D` matrix in row-major grid order, without
    /// class token or position embeddings.
    pub fn patch_projections<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Var> {
        self.check_image(g, image)?;
        let c = &self.config;
        let w = g.param(store, self.patch_weight);
        let b = g.param(store, self.patch_bias);
        let maps = g.conv2d(image, w, c.stride, 0)?;
        let n = c.patch_count()?;
        let flat = g.reshape(maps, &[c.embed_dim, n])?;
        let tokens = g.transpose(flat)?;
        g.add_row(tokens, b)
    }

    /// `z_0 = [x_class; E(x_p^1); ...; E(x_p^N)] + P`
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<Var> {
        let patches = self.patch_projections(g, store, image)?;
        let cls = g.param(store, self.cls_token);
        let seq = g.concat_rows(&[cls, patches])?;
        let pos = g.param(store, self.pos_embed);
        g.add(seq, pos)
    }

    /// Pre-norm encoder block: `z' = z + MSA(LN(z))`, `out = z' + MLP(LN(z'))`.
    pub fn encoder_block<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: &BlockParams,
        z: Var,
    ) -> Result<Var> {
        let (tokens, d) = g.value(z).dims2()?;
        if d != self.config.embed_dim {
            return Err(Error::dim(format!(
                "token width {d}, expected {}",
                self.config.embed_dim
            )));
        }
        let _ = tokens;
        let mut p = |id| g.param(store, id);
        let (ln1_g, ln1_b) = (p(block.ln1_gamma), p(block.ln1_beta));
        let (wq, bq, wk, bk) = (p(block.wq), p(block.bq), p(block.wk), p(block.bk));
        let (wv, bv, wo, bo) = (p(block.wv), p(block.bv), p(block.wo), p(block.bo));
        let (ln2_g, ln2_b) = (p(block.ln2_gamma), p(block.ln2_beta));
        let (fc1_w, fc1_b) = (p(block.fc1_w), p(block.fc1_b));
        let (fc2_w, fc2_b) = (p(block.fc2_w), p(block.fc2_b));

        let x = g.layer_norm(z, ln1_g, ln1_b, LN_EPS)?;
        let attn = self.attention(g, x, [wq, bq, wk, bk, wv, bv, wo, bo])?;
        let z1 = g.add(z, attn)?;

        let x = g.layer_norm(z1, ln2_g, ln2_b, LN_EPS)?;
        let h = g.matmul(x, fc1_w)?;
        let h = g.add_row(h, fc1_b)?;
        let h = g.gelu(h);
        let h = g.matmul(h, fc2_w)?;
        let h = g.add_row(h, fc2_b)?;
        g.add(z1, h)
    }

    /// Scaled dot-product multi-head self-attention over all tokens.
    fn attention<T: Real>(&self, g: &mut Graph<T>, x: Var, w: [Var; 8]) -> Result<Var> {
        let [wq, bq, wk, bk, wv, bv, wo, bo] = w;
        let heads = self.config.num_heads;
        let hd = self.config.head_dim();
        let scale = cst::<T>(1.0 / (hd as f64).sqrt());
        let q = g.matmul(x, wq)?;
        let q = g.add_row(q, bq)?;
        let k = g.matmul(x, wk)?;
        let k = g.add_row(k, bk)?;
        let v = g.matmul(x, wv)?;
        let v = g.add_row(v, bv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores);
            outs.push(g.matmul(probs, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let o = g.matmul(cat, wo)?;
        g.add_row(o, bo)
    }

    /// `F = LN(z_B)` after embedding and all encoder blocks.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<TokenSequence> {
        let mut z = self.embed(g, store, image)?;
        for block in &self.blocks {
            z = self.encoder_block(g, store, block, z)?;
        }
        let ng = g.param(store, self.norm_gamma);
        let nb = g.param(store, self.norm_beta);
        let tokens = g.layer_norm(z, ng, nb, LN_EPS)?;
        Ok(TokenSequence {
            tokens,
            num_patches: self.config.patch_count()?,
        })
    }
}

/// Splits `F` into the global token `G` (`1×D`) and the local tokens `Q` (`N×D`), order preserved.
pub fn split<T: Real>(g: &mut Graph<T>, f: &TokenSequence) -> Result<(Var, Var)> {
    let global = g.slice_rows(f.tokens, 0, 1)?;
    let local = g.slice_rows(f.tokens, 1, f.num_patches)?;
    Ok((global, local))
}
