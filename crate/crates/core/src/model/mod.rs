//! The learnable parts: ViT encoder over visible tokens, the weakened decoder
//! with its pixel head, the squeezed location predictor, the query/momentum
//! feature-encoder pair and the expansive projector.
//!
//! Forward passes come in two flavours. The `*_batch` methods record onto a
//! caller-owned [`Graph`] and work on `batch` equal-length sequences stacked
//! row-wise; the plain methods run one sample through a throwaway graph and
//! return matrices.

mod config;
mod momentum;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig};
pub use momentum::{ema_update, MomentumPair};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::{sincos_pos_embed, PositionalEmbedding};
use crate::params::{trunc_normal, ParamStore};
use crate::tensor::Matrix;

pub const INIT_STD: f64 = 0.02;

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";
pub const MASK_TOKEN: &str = "mask_token";
pub const LOC_HEAD: &str = "loc_head";
pub const FEATURE_Q: &str = "feature_q";
pub const FEATURE_K: &str = "feature_k";
pub const PROJECTOR: &str = "projector";
pub const CLS_HEAD: &str = "head";

/// Which feature encoder of the momentum pair to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Query,
    Key,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Query => FEATURE_Q,
            Branch::Key => FEATURE_K,
        }
    }
}

/// Per-block, per-sample stochastic depth.
pub struct DropPath<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> DropPath<'_, R> {
    /// Row scales for `batch` sequences of `seq` rows at block `block` of
    /// `depth`; the rate grows linearly from 0 at the first block.
    fn scales(&mut self, block: usize, depth: usize, batch: usize, seq: usize) -> Option<Vec<f64>> {
        let rate = if depth > 1 {
            self.rate * block as f64 / (depth - 1) as f64
        } else {
            self.rate
        };
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - rate;
        let mut scales = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let s = if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
            scales.extend(std::iter::repeat_n(s, seq));
        }
        Some(scales)
    }
}

fn linear_params(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.insert(format!("{prefix}.weight"), trunc_normal(fan_in, fan_out, INIT_STD, rng));
    store.insert(format!("{prefix}.bias"), Matrix::zeros(1, fan_out));
}

fn norm_params(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.weight"), Matrix::filled(1, dim, 1.0));
    store.insert(format!("{prefix}.bias"), Matrix::zeros(1, dim));
}

fn block_params(store: &mut ParamStore, prefix: &str, dim: usize, mlp_ratio: usize, rng: &mut impl Rng) {
    norm_params(store, &format!("{prefix}.norm1"), dim);
    linear_params(store, &format!("{prefix}.attn.qkv"), dim, 3 * dim, rng);
    linear_params(store, &format!("{prefix}.attn.proj"), dim, dim, rng);
    norm_params(store, &format!("{prefix}.norm2"), dim);
    linear_params(store, &format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim, rng);
    linear_params(store, &format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim, rng);
}

/// Pre-norm transformer block over `seq`-row sequences.
fn block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    seq: usize,
    heads: usize,
    drop_scales: Option<Vec<f64>>,
) -> Result<Var> {
    let h = g.layer_norm_named(store, &format!("{prefix}.norm1"), x)?;
    let qkv = g.linear(store, &format!("{prefix}.attn.qkv"), h)?;
    let a = g.attention(qkv, seq, heads)?;
    let mut a = g.linear(store, &format!("{prefix}.attn.proj"), a)?;
    if let Some(s) = &drop_scales {
        a = g.row_scale(a, s.clone())?;
    }
    let x = g.add(x, a)?;
    let h = g.layer_norm_named(store, &format!("{prefix}.norm2"), x)?;
    let h = g.linear(store, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let mut h = g.linear(store, &format!("{prefix}.mlp.fc2"), h)?;
    if let Some(s) = drop_scales {
        h = g.row_scale(h, s)?;
    }
    g.add(x, h)
}

fn check_finite(name: &str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(name.to_string()))
    }
}

fn tile(rows: &Matrix, times: usize) -> Matrix {
    let parts: Vec<&Matrix> = std::iter::repeat_n(rows, times).collect();
    Matrix::vstack(&parts).expect("equal widths")
}

/// Model definition plus the fixed positional table.
#[derive(Clone, Debug)]
pub struct Sdmae {
    cfg: ModelConfig,
    pos: PositionalEmbedding,
}

impl Sdmae {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let pos = sincos_pos_embed(cfg.n_tokens(), cfg.encoder.dim, cfg.grid())?;
        Ok(Self { cfg, pos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn pos_embed(&self) -> &PositionalEmbedding {
        &self.pos
    }

    /// Fresh parameters for every pre-training component. The momentum
    /// encoder starts as an exact copy of the query encoder.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.init_encoder(&mut store, rng);
        let c = &self.cfg;
        let (enc, dec) = (c.encoder.dim, c.decoder.dim);
        store.insert(MASK_TOKEN, trunc_normal(1, enc, INIT_STD, rng));
        linear_params(&mut store, &format!("{DECODER}.embed"), enc, dec, rng);
        for i in 0..c.decoder.depth {
            block_params(&mut store, &format!("{DECODER}.blocks.{i}"), dec, 4, rng);
        }
        norm_params(&mut store, &format!("{DECODER}.norm"), dec);
        linear_params(&mut store, &format!("{DECODER}.pred"), dec, c.token_dim(), rng);

        linear_params(&mut store, &format!("{LOC_HEAD}.fc1"), enc, enc / 2, rng);
        linear_params(&mut store, &format!("{LOC_HEAD}.fc2"), enc / 2, c.loc_classes(), rng);

        for i in 0..c.feature_depth {
            block_params(&mut store, &format!("{FEATURE_Q}.blocks.{i}"), dec, 4, rng);
        }
        let query: Vec<(String, Matrix)> = store
            .with_prefix(FEATURE_Q)
            .map(|(rest, m)| (format!("{FEATURE_K}{rest}"), m.clone()))
            .collect();
        for (name, m) in query {
            store.insert(name, m);
        }
        linear_params(&mut store, &format!("{PROJECTOR}.fc1"), dec, 2 * dec, rng);
        linear_params(&mut store, &format!("{PROJECTOR}.fc2"), 2 * dec, dec, rng);
        store
    }

    pub fn init_encoder(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = &self.cfg.encoder;
        linear_params(store, &format!("{ENCODER}.patch_embed"), self.cfg.token_dim(), c.dim, rng);
        store.insert(format!("{ENCODER}.cls_token"), trunc_normal(1, c.dim, INIT_STD, rng));
        for i in 0..c.depth {
            block_params(store, &format!("{ENCODER}.blocks.{i}"), c.dim, c.mlp_ratio, rng);
        }
        norm_params(store, &format!("{ENCODER}.norm"), c.dim);
    }

    /// Zero-initialized linear classifier on the class token.
    pub fn init_classifier(&self, store: &mut ParamStore, classes: usize) {
        store.insert(format!("{CLS_HEAD}.weight"), Matrix::zeros(self.cfg.encoder.dim, classes));
        store.insert(format!("{CLS_HEAD}.bias"), Matrix::zeros(1, classes));
    }

    /// Encodes `batch` stacked sequences of `n_vis` visible tokens.
    ///
    /// `tokens` is `batch·n_vis × D`, `pos_rows` the matching positional
    /// rows. Returns `batch·(1+n_vis) × D'` with each sequence's class token
    /// first.
    pub fn encode_batch<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        pos_rows: Matrix,
        batch: usize,
        mut drop: Option<DropPath<'_, R>>,
    ) -> Result<Var> {
        let c = &self.cfg.encoder;
        let rows = g.value(tokens).rows();
        if batch == 0 || rows % batch != 0 || pos_rows.shape() != (rows, c.dim) {
            return Err(Error::dim(format!(
                "encoder: {rows} token rows, {}x{} positional rows, batch {batch}",
                pos_rows.rows(),
                pos_rows.cols()
            )));
        }
        if g.value(tokens).cols() != self.cfg.token_dim() {
            return Err(Error::dim(format!(
                "encoder expects {}-wide tokens, got {}",
                self.cfg.token_dim(),
                g.value(tokens).cols()
            )));
        }
        let n = rows / batch;
        let x = g.linear(store, &format!("{ENCODER}.patch_embed"), tokens)?;
        let pos = g.constant(pos_rows);
        let x = g.add(x, pos)?;
        let cls = g.param(store, &format!("{ENCODER}.cls_token"))?;
        let stacked = g.concat_rows(vec![x, cls])?;
        let mut idx = Vec::with_capacity(batch * (n + 1));
        for b in 0..batch {
            idx.push(rows);
            idx.extend(b * n..(b + 1) * n);
        }
        let mut h = g.gather_rows(stacked, idx)?;
        for i in 0..c.depth {
            let scales = drop.as_mut().and_then(|d| d.scales(i, c.depth, batch, n + 1));
            h = block(g, store, &format!("{ENCODER}.blocks.{i}"), h, n + 1, c.heads, scales)?;
        }
        g.layer_norm_named(store, &format!("{ENCODER}.norm"), h)
    }

    /// Decoder trunk over `batch` full sequences `(1+N) × D'` (class token
    /// first, mask tokens already merged). Returns the normalized decoder
    /// tokens `batch·(1+N) × dec_dim`.
    pub fn decode_batch(&self, g: &mut Graph, store: &ParamStore, z_all: Var, batch: usize) -> Result<Var> {
        let c = &self.cfg;
        let seq = c.n_tokens() + 1;
        let zv = g.value(z_all);
        if zv.rows() != batch * seq || zv.cols() != c.encoder.dim {
            return Err(Error::dim(format!(
                "decoder expects {}x{} input, got {}x{}",
                batch * seq,
                c.encoder.dim,
                zv.rows(),
                zv.cols()
            )));
        }
        let pos = g.constant(tile(&self.pos.table, batch));
        let h = g.add(z_all, pos)?;
        let mut h = g.linear(store, &format!("{DECODER}.embed"), h)?;
        for i in 0..c.decoder.depth {
            h = block(g, store, &format!("{DECODER}.blocks.{i}"), h, seq, c.decoder.heads, None)?;
        }
        g.layer_norm_named(store, &format!("{DECODER}.norm"), h)
    }

    /// Pixel head on selected decoder rows.
    pub fn pixel_head(&self, g: &mut Graph, store: &ParamStore, dec_tokens: Var, rows: Vec<usize>) -> Result<Var> {
        let picked = g.gather_rows(dec_tokens, rows)?;
        g.linear(store, &format!("{DECODER}.pred"), picked)
    }

    /// Location logits for encoded visible tokens (class token excluded).
    pub fn location_logits(&self, g: &mut Graph, store: &ParamStore, z_vis: Var) -> Result<Var> {
        let h = g.linear(store, &format!("{LOC_HEAD}.fc1"), z_vis)?;
        let h = g.gelu(h);
        g.linear(store, &format!("{LOC_HEAD}.fc2"), h)
    }

    /// Two pre-norm blocks at decoder width over `(1+N)`-row sequences.
    pub fn feature_batch(&self, g: &mut Graph, store: &ParamStore, tokens: Var, branch: Branch) -> Result<Var> {
        let seq = self.cfg.n_tokens() + 1;
        let mut h = tokens;
        for i in 0..self.cfg.feature_depth {
            let prefix = format!("{}.blocks.{i}", branch.prefix());
            h = block(g, store, &prefix, h, seq, self.cfg.feature_heads, None)?;
        }
        Ok(h)
    }

    /// `fc2(gelu(fc1(x)))`, widening to twice the input in between.
    pub fn project_batch(&self, g: &mut Graph, store: &ParamStore, cls: Var) -> Result<Var> {
        let h = g.linear(store, &format!("{PROJECTOR}.fc1"), cls)?;
        let h = g.gelu(h);
        g.linear(store, &format!("{PROJECTOR}.fc2"), h)
    }

    /// Class-token logits of the fine-tuning classifier.
    pub fn classify_batch(&self, g: &mut Graph, store: &ParamStore, encoded: Var, batch: usize) -> Result<Var> {
        let seq = g.value(encoded).rows() / batch;
        let cls = g.gather_rows(encoded, (0..batch).map(|b| b * seq).collect())?;
        g.linear(store, CLS_HEAD, cls)
    }

    // Single-sample entry points.

    /// `(1+N_v) × D'` encoding of one sample's visible tokens. `pos_rows` are
    /// the positional rows of those tokens, in the same order.
    pub fn encode_visible(&self, store: &ParamStore, visible: &Matrix, pos_rows: &Matrix) -> Result<Matrix> {
        check_finite("visible tokens", visible)?;
        check_finite("positional rows", pos_rows)?;
        let mut g = Graph::new();
        let t = g.constant(visible.clone());
        let out = self.encode_batch::<rand_chacha::ChaCha8Rng>(&mut g, store, t, pos_rows.clone(), 1, None)?;
        Ok(g.value(out).clone())
    }

    /// Runs the decoder on one `(1+N) × D'` sequence. Returns the decoder
    /// tokens `(1+N) × dec_dim` and pixel predictions `N × D` (class row
    /// excluded).
    pub fn decode_all(&self, store: &ParamStore, z_all: &Matrix) -> Result<(Matrix, Matrix)> {
        check_finite("decoder input", z_all)?;
        let mut g = Graph::new();
        let z = g.constant(z_all.clone());
        let tokens = self.decode_batch(&mut g, store, z, 1)?;
        let pixels = self.pixel_head(&mut g, store, tokens, (1..=self.cfg.n_tokens()).collect())?;
        Ok((g.value(tokens).clone(), g.value(pixels).clone()))
    }

    pub fn predict_locations(&self, store: &ParamStore, z_vis: &Matrix) -> Result<Matrix> {
        if z_vis.rows() == 0 || z_vis.cols() != self.cfg.encoder.dim {
            return Err(Error::dim(format!(
                "location predictor expects N_v x {} input, got {}x{}",
                self.cfg.encoder.dim,
                z_vis.rows(),
                z_vis.cols()
            )));
        }
        check_finite("location input", z_vis)?;
        let mut g = Graph::new();
        let z = g.constant(z_vis.clone());
        let out = self.location_logits(&mut g, store, z)?;
        Ok(g.value(out).clone())
    }

    pub fn feature_encode(&self, store: &ParamStore, tokens: &Matrix, branch: Branch) -> Result<Matrix> {
        let expect = (self.cfg.n_tokens() + 1, self.cfg.decoder.dim);
        if tokens.shape() != expect {
            return Err(Error::dim(format!(
                "feature encoder expects {}x{} input, got {}x{}",
                expect.0,
                expect.1,
                tokens.rows(),
                tokens.cols()
            )));
        }
        check_finite("feature encoder input", tokens)?;
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let out = self.feature_batch(&mut g, store, t, branch)?;
        Ok(g.value(out).clone())
    }

    pub fn project(&self, store: &ParamStore, cls: &Matrix) -> Result<Matrix> {
        if cls.rows() != 1 || cls.cols() != self.cfg.decoder.dim {
            return Err(Error::dim(format!(
                "projector expects a 1x{} class token, got {}x{}",
                self.cfg.decoder.dim,
                cls.rows(),
                cls.cols()
            )));
        }
        let mut g = Graph::new();
        let c = g.constant(cls.clone());
        let out = self.project_batch(&mut g, store, c)?;
        Ok(g.value(out).clone())
    }
}

/// Parameter counts grouped by component prefix.
pub fn param_count(store: &ParamStore, component: &str) -> usize {
    store.count(&format!("{component}."))
}
