//! Baseline looped transformer: the full layer stack re-applied `T` times
//! per forward pass, with an append-only per-layer, per-loop KV cache.
//! Also hosts the transformer plumbing (blocks, attention, sampling) shared
//! with the constant-memory variant in [`crate::melt`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init::{seeded_rng, uniform_param};
use crate::tensor::{RotaryTable, Tape, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-6;
pub(crate) const ROTARY_BASE: f64 = 10_000.0;

/// Per-layer transformer parameters.
pub struct LayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub attn_norm_w: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ffn_norm_w: Tensor,
}

/// Embedding, layer stack, final norm and output head.
pub struct StackParams {
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm_w: Tensor,
    pub lm_head: Tensor,
}

impl StackParams {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng, tape: &Tape) -> StackParams {
        let d = config.hidden_dim;
        let df = config.ffn_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut layer = || LayerParams {
            w_q: uniform_param(rng, vec![d, d], scale, tape),
            w_k: uniform_param(rng, vec![d, d], scale, tape),
            w_v: uniform_param(rng, vec![d, d], scale, tape),
            w_o: uniform_param(rng, vec![d, d], scale, tape),
            attn_norm_w: Tensor::param(vec![d], vec![1.0; d], tape),
            ffn_w1: uniform_param(rng, vec![d, df], scale, tape),
            ffn_b1: Tensor::param(vec![df], vec![0.0; df], tape),
            ffn_w2: uniform_param(rng, vec![df, d], 1.0 / (df as f64).sqrt(), tape),
            ffn_b2: Tensor::param(vec![d], vec![0.0; d], tape),
            ffn_norm_w: Tensor::param(vec![d], vec![1.0; d], tape),
        };
        let layers: Vec<LayerParams> = (0..config.n_layers).map(|_| layer()).collect();
        StackParams {
            embedding: uniform_param(rng, vec![config.vocab_size, d], 0.08, tape),
            layers,
            final_norm_w: Tensor::param(vec![d], vec![1.0; d], tape),
            lm_head: uniform_param(rng, vec![d, config.vocab_size], scale, tape),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed.table".to_string(), self.embedding.clone())];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |name: &str, t: &Tensor| (format!("layer{l}.{name}"), t.clone());
            out.push(p("w_q", &layer.w_q));
            out.push(p("w_k", &layer.w_k));
            out.push(p("w_v", &layer.w_v));
            out.push(p("w_o", &layer.w_o));
            out.push(p("attn_norm_w", &layer.attn_norm_w));
            out.push(p("ffn_w1", &layer.ffn_w1));
            out.push(p("ffn_b1", &layer.ffn_b1));
            out.push(p("ffn_w2", &layer.ffn_w2));
            out.push(p("ffn_b2", &layer.ffn_b2));
            out.push(p("ffn_norm_w", &layer.ffn_norm_w));
        }
        out.push(("final_norm.w".to_string(), self.final_norm_w.clone()));
        out.push(("lm_head.w".to_string(), self.lm_head.clone()));
        out
    }

    /// Rebuild from a name -> tensor source (checkpoint loading).
    pub fn from_named(
        n_layers: usize,
        lookup: &mut impl FnMut(&str) -> Result<Tensor>,
    ) -> Result<StackParams> {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            layers.push(LayerParams {
                w_q: lookup(&format!("layer{l}.w_q"))?,
                w_k: lookup(&format!("layer{l}.w_k"))?,
                w_v: lookup(&format!("layer{l}.w_v"))?,
                w_o: lookup(&format!("layer{l}.w_o"))?,
                attn_norm_w: lookup(&format!("layer{l}.attn_norm_w"))?,
                ffn_w1: lookup(&format!("layer{l}.ffn_w1"))?,
                ffn_b1: lookup(&format!("layer{l}.ffn_b1"))?,
                ffn_w2: lookup(&format!("layer{l}.ffn_w2"))?,
                ffn_b2: lookup(&format!("layer{l}.ffn_b2"))?,
                ffn_norm_w: lookup(&format!("layer{l}.ffn_norm_w"))?,
            });
        }
        Ok(StackParams {
            embedding: lookup("embed.table")?,
            layers,
            final_norm_w: lookup("final_norm.w")?,
            lm_head: lookup("lm_head.w")?,
        })
    }

    /// Deep copy with fresh leaf parameters on `tape`.
    pub fn clone_onto(&self, tape: &Tape) -> StackParams {
        let named = self.named_params();
        let mut lookup = |name: &str| -> Result<Tensor> {
            let (_, src) = named
                .iter()
                .find(|(n, _)| n == name)
                .expect("name set is closed");
            Ok(Tensor::param(src.shape(), src.to_vec(), tape))
        };
        StackParams::from_named(self.layers.len(), &mut lookup).expect("clone keeps all names")
    }

    /// Detached frozen copy: plain constants, no tape, no gradients.
    pub fn frozen_copy(&self) -> StackParams {
        let named = self.named_params();
        let mut lookup = |name: &str| -> Result<Tensor> {
            let (_, src) = named
                .iter()
                .find(|(n, _)| n == name)
                .expect("name set is closed");
            Ok(src.detach())
        };
        StackParams::from_named(self.layers.len(), &mut lookup).expect("copy keeps all names")
    }

    pub fn tape(&self) -> Option<Tape> {
        self.embedding.tape()
    }
}

/// Growing row-major matrix used by the inference caches.
#[derive(Clone)]
pub(crate) struct RowMatrix {
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(cols: usize) -> RowMatrix {
        RowMatrix {
            cols,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
    }

    pub fn set_row(&mut self, i: usize, row: &[f64]) {
        let c = self.cols;
        self.data[i * c..(i + 1) * c].copy_from_slice(row);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.rows(), self.cols], self.data.clone())
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }
}

/// Causal multi-head attention over an assembled cache. `q` and `k` arrive
/// unrotated; rotation is applied here with each row's absolute token
/// position, so cached keys can be stored position-free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention(
    q: &Tensor,
    q_positions: &[usize],
    k: &Tensor,
    k_positions: &[usize],
    v: &Tensor,
    w_o: &Tensor,
    n_heads: usize,
    rotary: &RotaryTable,
) -> Result<Tensor> {
    let d = q.cols();
    let hd = d / n_heads;
    let (lq, lk) = (q.rows(), k.rows());
    assert!(lk >= lq, "queries must be the trailing rows of the key range");
    let q_rot = q.apply_rotary(rotary, q_positions, n_heads);
    let k_rot = k.apply_rotary(rotary, k_positions, n_heads);
    let mask = crate::tensor::AttnMask::Causal {
        key_offset: lk - lq,
    };
    let mut head_outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q_rot.slice_cols(h * hd, (h + 1) * hd);
        let kh = k_rot.slice_cols(h * hd, (h + 1) * hd);
        let vh = v.slice_cols(h * hd, (h + 1) * hd);
        let scores = qh.matmul_bt(&kh)?.scale(1.0 / (hd as f64).sqrt());
        let weights = scores.softmax_rows(Some(&mask))?;
        head_outs.push(weights.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    Tensor::concat_cols(&refs)?.matmul(w_o)
}

pub(crate) struct BlockIo {
    /// Post-attention representation (attention output plus residual).
    pub x_attn: Tensor,
    pub x_next: Tensor,
}

/// Attention + FFN with residuals, given the pre-normed input `u` and an
/// assembled KV cache. The caller derives `u` (and the cache) because the
/// two model families source their keys and values differently.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_attn_ffn(
    layer: &LayerParams,
    x: &Tensor,
    u: &Tensor,
    q_positions: &[usize],
    k: &Tensor,
    k_positions: &[usize],
    v: &Tensor,
    n_heads: usize,
    rotary: &RotaryTable,
) -> Result<BlockIo> {
    let q = u.matmul(&layer.w_q)?;
    let attn = attention(&q, q_positions, k, k_positions, v, &layer.w_o, n_heads, rotary)?;
    let x_attn = attn.add(x)?;
    let f = x_attn.rms_norm(&layer.ffn_norm_w, NORM_EPS)?;
    let h1 = f.matmul(&layer.ffn_w1)?.add(&layer.ffn_b1)?;
    let act = h1.mul(&h1.sigmoid())?;
    let ffn = act.matmul(&layer.ffn_w2)?.add(&layer.ffn_b2)?;
    let x_next = ffn.add(&x_attn)?;
    Ok(BlockIo { x_attn, x_next })
}

pub(crate) fn normed(layer: &LayerParams, x: &Tensor) -> Result<Tensor> {
    x.rms_norm(&layer.attn_norm_w, NORM_EPS)
}

/// Untrained cache-sharing strategy applied at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShareMode {
    /// Exact baseline: every loop keeps its own cache.
    None,
    FirstLoop,
    LastLoop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShareStrategy {
    pub mode: ShareMode,
    /// Preserve the exact per-loop cache for prompt positions (prefill).
    pub keep_prompt_cache: bool,
}

impl ShareStrategy {
    pub fn exact() -> ShareStrategy {
        ShareStrategy {
            mode: ShareMode::None,
            keep_prompt_cache: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    Greedy,
    TopP { temperature: f64, top_p: f64 },
}

impl Default for Sampling {
    /// Greedy keeps runs deterministic; evaluation-style nucleus sampling
    /// is the flagged alternative.
    fn default() -> Self {
        Sampling::Greedy
    }
}

pub struct GenerateResult {
    pub tokens: Vec<usize>,
    /// Stored K/V element count at the end of generation.
    pub kv_elements: usize,
}

/// Teacher-forced forward products: per-loop logits and per-layer/per-loop
/// post-attention representations.
pub struct ForwardOutputs {
    /// `[loop]` of `L x vocab`.
    pub per_loop_logits: Vec<Tensor>,
    /// `[loop][layer]` of `L x d`.
    pub post_attn: Vec<Vec<Tensor>>,
    /// Measured stored K/V element count.
    pub cache_elements: usize,
}

pub struct LoopLmModel {
    pub config: ModelConfig,
    pub params: StackParams,
    pub rotary: RotaryTable,
}

impl LoopLmModel {
    pub fn new(config: ModelConfig, seed: u64, tape: &Tape) -> Result<LoopLmModel> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let params = StackParams::init(&config, &mut rng, tape);
        Ok(LoopLmModel::from_parts(config, params))
    }

    pub fn from_parts(config: ModelConfig, params: StackParams) -> LoopLmModel {
        let rotary = RotaryTable::new(config.head_dim(), config.max_seq_len, ROTARY_BASE);
        LoopLmModel {
            config,
            params,
            rotary,
        }
    }

    /// Row `i` of the result is the embedding of `tokens[i]`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        Tensor::embed_rows(&self.params.embedding, tokens)
    }

    pub fn logits_of(&self, x: &Tensor) -> Result<Tensor> {
        x.rms_norm(&self.params.final_norm_w, NORM_EPS)?
            .matmul(&self.params.lm_head)
    }

    /// Fully parallel teacher-forced forward: the hidden state re-enters the
    /// complete layer stack `T` times, the output head is applied to every
    /// loop's output, and each loop appends its own full KV cache.
    pub fn loop_forward(&self, tokens: &[usize]) -> Result<ForwardOutputs> {
        let t_loops = self.config.loops;
        let n_heads = self.config.n_heads;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = self.embed(tokens)?;
        let mut per_loop_logits = Vec::with_capacity(t_loops);
        let mut post_attn = Vec::with_capacity(t_loops);
        let mut cache_elements = 0;
        for _t in 0..t_loops {
            let mut loop_post = Vec::with_capacity(self.config.n_layers);
            for layer in &self.params.layers {
                let u = normed(layer, &x)?;
                let k = u.matmul(&layer.w_k)?;
                let v = u.matmul(&layer.w_v)?;
                cache_elements += k.numel() + v.numel();
                let io = block_attn_ffn(
                    layer, &x, &u, &positions, &k, &positions, &v, n_heads, &self.rotary,
                )?;
                loop_post.push(io.x_attn);
                x = io.x_next;
            }
            per_loop_logits.push(self.logits_of(&x)?);
            post_attn.push(loop_post);
        }
        Ok(ForwardOutputs {
            per_loop_logits,
            post_attn,
            cache_elements,
        })
    }

    pub fn session(&self, strategy: ShareStrategy) -> LoopLmSession<'_> {
        LoopLmSession::new(self, strategy)
    }

    /// Autoregressive generation: exact token-by-token prefill of the
    /// prompt, then `max_new` tokens decoded from the final loop's logits.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        strategy: ShareStrategy,
        sampling: Sampling,
        seed: u64,
    ) -> Result<GenerateResult> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut rng = seeded_rng(seed);
        let mut session = self.session(strategy);
        let budget = self.config.max_seq_len.saturating_sub(prompt.len());
        let max_new = max_new.min(budget);
        let mut tokens = prompt.to_vec();
        let mut logits = Tensor::zeros(vec![1, self.config.vocab_size]);
        for &tok in prompt {
            let per_loop = session.push_token(tok, true)?;
            logits = per_loop.into_iter().last().expect("loops >= 1");
        }
        for _ in 0..max_new {
            let next = sample_token(&logits, sampling, &mut rng);
            tokens.push(next);
            if tokens.len() >= self.config.max_seq_len {
                break;
            }
            let per_loop = session.push_token(next, false)?;
            logits = per_loop.into_iter().last().expect("loops >= 1");
        }
        Ok(GenerateResult {
            tokens,
            kv_elements: session.cache_elements(),
        })
    }
}

pub(crate) fn sample_token(logits: &Tensor, sampling: Sampling, rng: &mut ChaCha8Rng) -> usize {
    match sampling {
        Sampling::Greedy => logits.argmax_row(0),
        Sampling::TopP { temperature, top_p } => {
            let scaled = logits.scale(1.0 / temperature.max(1e-9));
            let probs = scaled
                .softmax_rows(None)
                .expect("unmasked softmax cannot fail")
                .to_vec();
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
            let mut nucleus = Vec::new();
            let mut mass = 0.0;
            for &idx in &order {
                nucleus.push(idx);
                mass += probs[idx];
                if mass >= top_p {
                    break;
                }
            }
            let draw: f64 = rng.gen_range(0.0..mass);
            let mut acc = 0.0;
            for &idx in &nucleus {
                acc += probs[idx];
                if draw < acc {
                    return idx;
                }
            }
            *nucleus.last().expect("nucleus never empty")
        }
    }
}

/// Append-only per-layer, per-loop KV cache; memory grows with
/// `layers x tokens x loops`.
pub struct LoopKvCache {
    /// `[layer][loop]` growing token x d matrices.
    k: Vec<Vec<RowMatrix>>,
    v: Vec<Vec<RowMatrix>>,
    /// Shared per-layer rows used by the first/last-loop strategies.
    k_shared: Vec<RowMatrix>,
    v_shared: Vec<RowMatrix>,
}

impl LoopKvCache {
    fn new(n_layers: usize, loops: usize, d: usize) -> LoopKvCache {
        LoopKvCache {
            k: (0..n_layers)
                .map(|_| (0..loops).map(|_| RowMatrix::new(d)).collect())
                .collect(),
            v: (0..n_layers)
                .map(|_| (0..loops).map(|_| RowMatrix::new(d)).collect())
                .collect(),
            k_shared: (0..n_layers).map(|_| RowMatrix::new(d)).collect(),
            v_shared: (0..n_layers).map(|_| RowMatrix::new(d)).collect(),
        }
    }

    pub fn element_count(&self) -> usize {
        let per_loop: usize = self
            .k
            .iter()
            .flatten()
            .chain(self.v.iter().flatten())
            .map(|m| m.element_count())
            .sum();
        let shared: usize = self
            .k_shared
            .iter()
            .chain(self.v_shared.iter())
            .map(|m| m.element_count())
            .sum();
        per_loop + shared
    }
}

/// Token-by-token decoding session owning its cache; the model parameters
/// are only read.
pub struct LoopLmSession<'m> {
    model: &'m LoopLmModel,
    strategy: ShareStrategy,
    cache: LoopKvCache,
    n_tokens: usize,
    tape: Option<Tape>,
}

impl<'m> LoopLmSession<'m> {
    fn new(model: &'m LoopLmModel, strategy: ShareStrategy) -> LoopLmSession<'m> {
        LoopLmSession {
            model,
            strategy,
            cache: LoopKvCache::new(
                model.config.n_layers,
                model.config.loops,
                model.config.hidden_dim,
            ),
            n_tokens: 0,
            tape: model.params.tape(),
        }
    }

    pub fn cache_elements(&self) -> usize {
        self.cache.element_count()
    }

    pub fn tokens_seen(&self) -> usize {
        self.n_tokens
    }

    /// Run all loops for the next token; returns one `1 x vocab` logits row
    /// per loop. `is_prompt` marks prompt positions for the prefill flag.
    pub fn push_token(&mut self, token: usize, is_prompt: bool) -> Result<Vec<Tensor>> {
        match self.tape.clone() {
            Some(tape) => tape.paused(|| self.push_token_inner(token, is_prompt)),
            None => self.push_token_inner(token, is_prompt),
        }
    }

    fn push_token_inner(&mut self, token: usize, is_prompt: bool) -> Result<Vec<Tensor>> {
        let model = self.model;
        let cfg = &model.config;
        let pos = self.n_tokens;
        let designated = match self.strategy.mode {
            ShareMode::None => usize::MAX,
            ShareMode::FirstLoop => 0,
            ShareMode::LastLoop => cfg.loops - 1,
        };
        let keep_prompt = self.strategy.keep_prompt_cache && is_prompt;
        let mut x = model.embed(&[token])?;
        let mut per_loop_logits = Vec::with_capacity(cfg.loops);
        for t in 0..cfg.loops {
            for (l, layer) in model.params.layers.iter().enumerate() {
                let u = normed(layer, &x)?;
                let k_row = u.matmul(&layer.w_k)?;
                let v_row = u.matmul(&layer.w_v)?;
                // Assemble this loop's key/value history plus the current row.
                // Per-loop prompt rows (when preserved) precede the shared
                // rows; positions stay globally ordered.
                let (k_hist, v_hist) = match self.strategy.mode {
                    ShareMode::None => (self.cache.k[l][t].clone(), self.cache.v[l][t].clone()),
                    _ => {
                        let mut kh = self.cache.k[l][t].clone();
                        kh.data.extend_from_slice(&self.cache.k_shared[l].data);
                        let mut vh = self.cache.v[l][t].clone();
                        vh.data.extend_from_slice(&self.cache.v_shared[l].data);
                        (kh, vh)
                    }
                };
                let k_all = Tensor::concat_rows(&[&k_hist.to_tensor(), &k_row])?;
                let v_all = Tensor::concat_rows(&[&v_hist.to_tensor(), &v_row])?;
                let k_positions: Vec<usize> = (0..=pos).collect();
                let io = block_attn_ffn(
                    layer,
                    &x,
                    &u,
                    &[pos],
                    &k_all,
                    &k_positions,
                    &v_all,
                    cfg.n_heads,
                    &model.rotary,
                )?;
                x = io.x_next;
                let store_per_loop = self.strategy.mode == ShareMode::None || keep_prompt;
                if store_per_loop {
                    self.cache.k[l][t].push_row(&k_row.to_vec());
                    self.cache.v[l][t].push_row(&v_row.to_vec());
                } else if t == designated {
                    self.cache.k_shared[l].push_row(&k_row.to_vec());
                    self.cache.v_shared[l].push_row(&v_row.to_vec());
                }
            }
            per_loop_logits.push(model.logits_of(&x)?);
        }
        self.n_tokens += 1;
        Ok(per_loop_logits)
    }
}
