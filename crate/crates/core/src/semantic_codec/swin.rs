//! Swin-style hierarchical transformer pieces: patch partition, window
//! attention with optional cyclic shift, patch merging and its inverse.
//!
//! Token grids are laid out `(batch, rows, cols, dim)` throughout.

use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use candle_nn::{linear, Init, Linear, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, LayerNorm};

/// A `(batch, rows, cols, dim)` grid of tokens.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    tokens: Tensor,
}

impl TokenGrid {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 4 {
            return Err(Error::Shape(format!(
                "token grid must be (batch, rows, cols, dim), got {:?}",
                tokens.dims()
            )));
        }
        Ok(Self { tokens })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tensor(self) -> Tensor {
        self.tokens
    }

    /// `(batch, rows, cols, dim)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.tokens.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn num_tokens(&self) -> usize {
        let (_, r, c, _) = self.dims();
        r * c
    }
}

/// Splits `(batch, H, W, 3)` pixels into non-overlapping `patch × patch` patches.
/// Each token holds the patch pixels in `(row, col, channel)` order, giving a raw
/// token dimension of `patch² · 3`.
pub fn patch_partition(pixels: &Tensor, patch: usize) -> Result<TokenGrid> {
    let (b, h, w, c) = pixels.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::DimensionMismatch(format!(
            "patch size {patch} does not divide image {h}x{w}"
        )));
    }
    let t = pixels
        .reshape((b, h / patch, patch, w / patch, patch, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h / patch, w / patch, patch * patch * c))?;
    TokenGrid::new(t)
}

/// Inverse of [`patch_partition`].
pub fn patch_unpartition(tokens: &TokenGrid, patch: usize) -> Result<Tensor> {
    let (b, gh, gw, d) = tokens.dims();
    if d % (patch * patch) != 0 {
        return Err(Error::DimensionMismatch(format!(
            "token dim {d} is not a multiple of {patch}²"
        )));
    }
    let c = d / (patch * patch);
    Ok(tokens
        .tensor()
        .reshape((b, gh, gw, patch, patch, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, gh * patch, gw * patch, c))?)
}

/// Concatenates each 2×2 neighbourhood into one token, in raster order
/// (top-left, top-right, bottom-left, bottom-right).
pub fn merge_tokens(tokens: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = tokens.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "patch merging needs an even grid, got {h}x{w}"
        )));
    }
    Ok(tokens
        .reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

/// Inverse of [`merge_tokens`]: each token of dim `4c` becomes a 2×2 block of dim `c`.
pub fn unmerge_tokens(tokens: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = tokens.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "token dim {c4} is not divisible by 4"
        )));
    }
    let c = c4 / 4;
    Ok(tokens
        .reshape((b, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * 2, w * 2, c))?)
}

/// `(batch, H, W, C)` → `(batch · windows, ws², C)`, windows in raster order.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / ws, ws, w / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, ws: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = windows.dim(D::Minus1)?;
    let b = windows.dim(0)? / ((h / ws) * (w / ws));
    Ok(windows
        .reshape((b, h / ws, w / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Region label of every position of an `h × w` grid after a cyclic shift by
/// `shift`: positions with different labels were not contiguous before the roll.
pub fn shift_regions(h: usize, w: usize, ws: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            labels.push(band(r, h) * 3 + band(c, w));
        }
    }
    labels
}

/// Additive attention mask `(windows, ws², ws²)` holding `0` where two tokens of
/// a shifted window share a region and `-inf` otherwise.
pub fn shift_attention_mask(h: usize, w: usize, ws: usize, shift: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let labels = shift_regions(h, w, ws, shift);
    let (nh, nw) = (h / ws, w / ws);
    let n = ws * ws;
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wr in 0..nh {
        for wc in 0..nw {
            let window: Vec<usize> = (0..n)
                .map(|i| labels[(wr * ws + i / ws) * w + wc * ws + i % ws])
                .collect();
            for a in &window {
                for b in &window {
                    mask.push(if a == b { 0.0 } else { f64::NEG_INFINITY });
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nh * nw, n, n), device)?.to_dtype(dtype)?)
}

fn relative_position_index(ws: usize) -> Vec<u32> {
    let n = ws * ws;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dr = (i / ws) as i64 - (j / ws) as i64 + ws as i64 - 1;
            let dc = (i % ws) as i64 - (j % ws) as i64 + ws as i64 - 1;
            idx.push((dr * (2 * ws as i64 - 1) + dc) as u32);
        }
    }
    idx
}

/// Layout of one stage of the hierarchical encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SwinStageConfig {
    pub patch_size: usize,
    pub window_size: usize,
    pub shift: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
}

impl SwinStageConfig {
    /// Checks the window layout against a token grid of `rows × cols`.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let ws = self.window_size;
        if ws == 0 || ws > rows || ws > cols {
            return Err(Error::Config(format!(
                "window size {ws} exceeds token grid {rows}x{cols}"
            )));
        }
        if rows % ws != 0 || cols % ws != 0 {
            return Err(Error::Config(format!(
                "window size {ws} does not tile token grid {rows}x{cols}"
            )));
        }
        if self.shift != 0 && self.shift != ws / 2 {
            return Err(Error::Config(format!(
                "shift {} must be 0 or window/2 = {}",
                self.shift,
                ws / 2
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Maps a transmission SNR (dB) to an integer bucket of a learned table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SnrBuckets {
    pub lo_db: i32,
    pub hi_db: i32,
}

impl SnrBuckets {
    pub fn new(lo_db: i32, hi_db: i32) -> Result<Self> {
        if hi_db < lo_db {
            return Err(Error::Config(format!("empty SNR bucket range [{lo_db}, {hi_db}]")));
        }
        Ok(Self { lo_db, hi_db })
    }

    pub fn len(&self) -> usize {
        (self.hi_db - self.lo_db + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rounds to the nearest integer dB and clamps into the table.
    pub fn bucket(&self, snr_db: f64) -> usize {
        let r = snr_db.round().clamp(f64::from(self.lo_db), f64::from(self.hi_db)) as i32;
        (r - self.lo_db) as usize
    }
}

/// SNR-derived conditioning vector injected into a swin block.
#[derive(Debug, Clone)]
pub struct TargetEmbedding {
    pub bucket: usize,
    pub vector: Tensor,
}

impl TargetEmbedding {
    pub fn zeros(dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            bucket: 0,
            vector: Tensor::zeros(dim, dtype, device)?,
        })
    }
}

/// Multi-head self-attention inside non-overlapping windows with a learned
/// relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    ws: usize,
    scale: f64,
}

impl WindowAttention {
    pub fn new(dim: usize, heads: usize, ws: usize, vb: VarBuilder) -> Result<Self> {
        let head_dim = dim / heads;
        let span = 2 * ws - 1;
        let bias_table = vb.get_with_hints(
            (span * span, heads),
            "relative_position_bias",
            Init::Randn { mean: 0.0, stdev: 0.02 },
        )?;
        let index = relative_position_index(ws);
        let bias_index = Tensor::from_vec(index, ws * ws * ws * ws, vb.device())?;
        Ok(Self {
            qkv: linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj: linear(dim, dim, vb.pp("proj"))?,
            bias_table,
            bias_index,
            heads,
            ws,
            scale: 1.0 / (head_dim as f64).sqrt(),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn qkv(&self) -> &Linear {
        &self.qkv
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }

    /// `(heads, ws², ws²)` bias added to the attention logits.
    pub fn position_bias(&self) -> Result<Tensor> {
        let n = self.ws * self.ws;
        Ok(self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    /// `x`: `(batch · windows, ws², dim)`; `mask`: `(windows, ws², ws²)`.
    /// Returns the output and the post-softmax attention `(batch · windows, heads, ws², ws²)`.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.i(0)?.contiguous()? * self.scale)?;
        let k = qkv.i(1)?.contiguous()?;
        let v = qkv.i(2)?.contiguous()?;
        let logits = q.matmul(&k.t()?)?;
        let logits = logits.broadcast_add(&self.position_bias()?.unsqueeze(0)?)?;
        let logits = match mask {
            Some(m) => {
                let nw = m.dim(0)?;
                logits
                    .reshape((bw / nw, nw, self.heads, n, n))?
                    .broadcast_add(&m.unsqueeze(1)?.unsqueeze(0)?)?
                    .reshape((bw, self.heads, n, n))?
            }
            None => logits,
        };
        let probs = softmax_last(&logits)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bw, n, c))?;
        Ok((self.proj.forward(&out)?, probs))
    }
}

/// One W-MSA (shift 0) or SW-MSA (shift = window/2) transformer layer with an
/// SNR-bucket embedding added to the tokens before attention.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    cfg: SwinStageConfig,
    buckets: SnrBuckets,
    snr_table: Tensor,
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Output of [`SwinBlock::forward_with_attention`].
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub output: TokenGrid,
    /// `(batch · windows, heads, ws², ws²)`, windows taken in the shifted frame.
    pub window_attention: Tensor,
}

impl SwinBlock {
    pub fn new(cfg: SwinStageConfig, mlp_ratio: usize, buckets: SnrBuckets, vb: VarBuilder) -> Result<Self> {
        let dim = cfg.embed_dim;
        if cfg.num_heads == 0 || dim % cfg.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {dim} not divisible by {} heads",
                cfg.num_heads
            )));
        }
        Ok(Self {
            cfg,
            buckets,
            snr_table: vb.get_with_hints(
                (buckets.len(), dim),
                "snr_embedding",
                Init::Randn { mean: 0.0, stdev: 0.1 },
            )?,
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            attn: WindowAttention::new(dim, cfg.num_heads, cfg.window_size, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            fc1: linear(dim, mlp_ratio * dim, vb.pp("mlp.fc1"))?,
            fc2: linear(mlp_ratio * dim, dim, vb.pp("mlp.fc2"))?,
        })
    }

    pub fn config(&self) -> &SwinStageConfig {
        &self.cfg
    }

    pub fn attention(&self) -> &WindowAttention {
        &self.attn
    }

    pub fn target_embedding(&self, snr_db: f64) -> Result<TargetEmbedding> {
        let bucket = self.buckets.bucket(snr_db);
        Ok(TargetEmbedding {
            bucket,
            vector: self.snr_table.i(bucket)?,
        })
    }

    pub fn forward(&self, x: &TokenGrid, emb: &TargetEmbedding) -> Result<TokenGrid> {
        Ok(self.forward_with_attention(x, emb)?.output)
    }

    pub fn forward_with_attention(&self, x: &TokenGrid, emb: &TargetEmbedding) -> Result<BlockTrace> {
        let (b, h, w, c) = x.dims();
        self.cfg.validate(h, w)?;
        if c != self.cfg.embed_dim || emb.vector.dims() != [c] {
            return Err(Error::DimensionMismatch(format!(
                "block dim {} got tokens of dim {c} and embedding {:?}",
                self.cfg.embed_dim,
                emb.vector.dims()
            )));
        }
        let ws = self.cfg.window_size;
        // a single window already sees the whole grid
        let shift = if h == ws && w == ws { 0 } else { self.cfg.shift };
        let x = x.tensor().broadcast_add(&emb.vector.to_dtype(x.tensor().dtype())?)?;

        let mut h_tok = self.norm1.forward(&x)?;
        if shift > 0 {
            h_tok = h_tok.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let windows = window_partition(&h_tok, ws)?;
        let mask = if shift > 0 {
            Some(shift_attention_mask(h, w, ws, shift, x.dtype(), x.device())?)
        } else {
            None
        };
        let (attended, probs) = self.attn.forward(&windows, mask.as_ref())?;
        let mut h_tok = window_reverse(&attended, ws, h, w)?;
        if shift > 0 {
            h_tok = h_tok.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        let x = (x + h_tok)?;
        let mlp = self
            .fc2
            .forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.relu()?)?;
        let out = (x + mlp)?;
        debug_assert_eq!(out.dims(), &[b, h, w, c]);
        Ok(BlockTrace {
            output: TokenGrid::new(out)?,
            window_attention: probs,
        })
    }
}

/// Scatters per-window attention `(batch · windows, heads, n, n)` into a dense
/// `(batch, heads, L, L)` matrix over the original (unshifted) token order,
/// zero wherever no window relates two tokens.
pub fn dense_attention(window_attention: &Tensor, rows: usize, cols: usize, ws: usize, shift: usize) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    let (bw, heads, n, _) = window_attention.dims4()?;
    let nw = (rows / ws) * (cols / ws);
    let b = bw / nw;
    let l = rows * cols;
    let probs: Vec<f64> = window_attention.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut dense = vec![vec![vec![vec![0.0; l]; l]; heads]; b];
    // position in the shifted frame → original token index
    let original = |r: usize, c: usize| ((r + shift) % rows) * cols + (c + shift) % cols;
    for bi in 0..b {
        for win in 0..nw {
            let (wr, wc) = (win / (cols / ws), win % (cols / ws));
            for hi in 0..heads {
                for i in 0..n {
                    let ti = original(wr * ws + i / ws, wc * ws + i % ws);
                    for j in 0..n {
                        let tj = original(wr * ws + j / ws, wc * ws + j % ws);
                        let off = (((bi * nw + win) * heads + hi) * n + i) * n + j;
                        dense[bi][hi][ti][tj] = probs[off];
                    }
                }
            }
        }
    }
    Ok(dense)
}

/// Patch merging: 2×2 concatenation, layer norm, projection `4·dim → out_dim`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerge {
    pub fn new(dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(4 * dim, vb.pp("norm"))?,
            reduction: linear(4 * dim, out_dim, vb.pp("reduction"))?,
        })
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        let merged = merge_tokens(x.tensor())?;
        TokenGrid::new(self.reduction.forward(&self.norm.forward(&merged)?)?)
    }
}

/// Decoder-side inverse of [`PatchMerge`]: projection `dim → 4·out_dim`, then
/// each token is split into a 2×2 block.
#[derive(Debug, Clone)]
pub struct PatchSplit {
    expand: Linear,
}

impl PatchSplit {
    pub fn new(dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            expand: linear(dim, 4 * out_dim, vb.pp("expand"))?,
        })
    }

    pub fn forward(&self, x: &TokenGrid) -> Result<TokenGrid> {
        TokenGrid::new(unmerge_tokens(&self.expand.forward(x.tensor())?)?)
    }
}

/// A stack of swin blocks alternating shift 0 and window/2.
#[derive(Debug, Clone)]
pub struct SwinStage {
    blocks: Vec<SwinBlock>,
}

impl SwinStage {
    pub fn new(cfg: SwinStageConfig, mlp_ratio: usize, buckets: SnrBuckets, vb: VarBuilder) -> Result<Self> {
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                let shift = if i % 2 == 1 { cfg.window_size / 2 } else { 0 };
                SwinBlock::new(
                    SwinStageConfig { shift, ..cfg },
                    mlp_ratio,
                    buckets,
                    vb.pp(format!("blocks.{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[SwinBlock] {
        &self.blocks
    }

    pub fn forward(&self, x: &TokenGrid, snr_db: f64) -> Result<TokenGrid> {
        let mut x = x.clone();
        for block in &self.blocks {
            let emb = block.target_embedding(snr_db)?;
            x = block.forward(&x, &emb)?;
        }
        Ok(x)
    }
}
