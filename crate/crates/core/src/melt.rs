//! Constant-memory looped transformer. Each layer keeps one latent row per
//! token, updated across loops by a learnable gate; keys and values are
//! projected from the latent state, so the cache size is independent of the
//! loop count. Includes the simpler aggregation variants used for ablations
//! and the KV interpolation used while transitioning from the per-loop
//! baseline.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::init::{seeded_rng, uniform_param};
use crate::loop_lm::{
    block_attn_ffn, normed, sample_token, ForwardOutputs, GenerateResult, LoopLmModel, RowMatrix,
    Sampling, StackParams, ROTARY_BASE,
};
use crate::tensor::{RotaryTable, Tape, Tensor};

/// Per-layer gate parameters for the latent update.
pub struct GateParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
}

impl GateParams {
    /// Small random couplings with a positive bias, so fresh gates start
    /// near z = 0.73 and lean toward retaining loop-1 state.
    pub fn init(rng: &mut rand_chacha::ChaCha8Rng, d: usize, tape: &Tape) -> GateParams {
        GateParams {
            w_z: uniform_param(rng, vec![d, d], 0.02, tape),
            u_z: uniform_param(rng, vec![d, d], 0.02, tape),
            b_z: Tensor::param(vec![d], vec![1.0; d], tape),
        }
    }

    pub fn zeros(d: usize) -> GateParams {
        GateParams {
            w_z: Tensor::zeros(vec![d, d]),
            u_z: Tensor::zeros(vec![d, d]),
            b_z: Tensor::zeros(vec![d]),
        }
    }
}

/// How the gate combines old state and new input. `SwappedComplement`
/// replaces the `(1 - z)` factor on the input path with `z`; it exists as a
/// deliberately broken wiring for negative-control checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateWiring {
    #[default]
    Standard,
    SwappedComplement,
}

/// Latent aggregation scheme. `Gated` is the trained mechanism; the rest
/// are the parameter-free ablations, plus a clamped-gate mode that runs the
/// gated machinery with a constant gate value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateVariant {
    Gated,
    /// Running mean of the per-loop inputs.
    Mean,
    /// Exponential moving average; `decay` is the weight on the old state.
    Ema { decay: f64 },
    /// Keep only the current loop's input.
    Last,
    /// One scalar gate per token, broadcast over the hidden dimension.
    SingleGated,
    /// Gated machinery with z fixed to a constant (verification aid).
    FixedGate { value: f64 },
}

impl GateVariant {
    pub fn parse(s: &str) -> Result<GateVariant> {
        match s {
            "gated" => Ok(GateVariant::Gated),
            "mean" => Ok(GateVariant::Mean),
            "ema" => Ok(GateVariant::Ema { decay: 0.2 }),
            "last" => Ok(GateVariant::Last),
            "single_gated" => Ok(GateVariant::SingleGated),
            other => Err(Error::Config(format!("unknown gate variant {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GateVariant::Gated => "gated",
            GateVariant::Mean => "mean",
            GateVariant::Ema { .. } => "ema",
            GateVariant::Last => "last",
            GateVariant::SingleGated => "single_gated",
            GateVariant::FixedGate { .. } => "fixed_gate",
        }
    }
}

fn gate_combine(z: &Tensor, h_prev: &Tensor, x: &Tensor, wiring: GateWiring) -> Result<Tensor> {
    match wiring {
        GateWiring::Standard => z.mul(h_prev)?.add(&z.affine(-1.0, 1.0).mul(x)?),
        GateWiring::SwappedComplement => z.mul(h_prev)?.add(&z.mul(x)?),
    }
}

/// Gated momentum update: `z = sigmoid(x W_z + h_prev U_z + b_z)`,
/// `h = z * h_prev + (1 - z) * x`. Inputs are row matrices (`rows x d`);
/// returns the new state and the gate values.
pub fn gated_update(
    x: &Tensor,
    h_prev: &Tensor,
    gp: &GateParams,
    wiring: GateWiring,
) -> Result<(Tensor, Tensor)> {
    let pre = x
        .matmul(&gp.w_z)?
        .add(&h_prev.matmul(&gp.u_z)?)?
        .add(&gp.b_z)?;
    let z = pre.sigmoid();
    let h = gate_combine(&z, h_prev, x, wiring)?;
    Ok((h, z))
}

/// Latent update for loop `loop_index` (1-based, must be >= 2: the first
/// loop always initializes the state to the input directly).
pub fn variant_update(
    variant: GateVariant,
    x: &Tensor,
    h_prev: &Tensor,
    loop_index: usize,
    gates: &GateParams,
    wiring: GateWiring,
) -> Result<Tensor> {
    assert!(loop_index >= 2, "loop 1 initializes the state directly");
    match variant {
        GateVariant::Gated => Ok(gated_update(x, h_prev, gates, wiring)?.0),
        GateVariant::Mean => {
            let t = loop_index as f64;
            h_prev.scale((t - 1.0) / t).add(&x.scale(1.0 / t))
        }
        GateVariant::Ema { decay } => h_prev.scale(decay).add(&x.scale(1.0 - decay)),
        GateVariant::Last => Ok(x.clone()),
        GateVariant::SingleGated => {
            let pre = x
                .matmul(&gates.w_z)?
                .add(&h_prev.matmul(&gates.u_z)?)?
                .add(&gates.b_z)?;
            // scalar gate per token: mean of the pre-activations, then sigmoid
            let z = pre.mean_lastdim().sigmoid();
            match wiring {
                GateWiring::Standard => h_prev
                    .row_scale(&z)?
                    .add(&x.row_scale(&z.affine(-1.0, 1.0))?),
                GateWiring::SwappedComplement => h_prev.row_scale(&z)?.add(&x.row_scale(&z)?),
            }
        }
        GateVariant::FixedGate { value } => {
            let z = Tensor::full(x.shape(), value);
            gate_combine(&z, h_prev, x, wiring)
        }
    }
}

/// `alpha * kv_melt + (1 - alpha) * kv_base`, elementwise. The endpoints
/// return the corresponding operand exactly.
pub fn interpolate_kv(kv_melt: &Tensor, kv_base: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange { alpha });
    }
    if kv_melt.shape() != kv_base.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate_kv",
            lhs: kv_melt.shape(),
            rhs: kv_base.shape(),
        });
    }
    if alpha == 0.0 {
        return Ok(kv_base.clone());
    }
    if alpha == 1.0 {
        return Ok(kv_melt.clone());
    }
    kv_melt.scale(alpha).add(&kv_base.scale(1.0 - alpha))
}

/// Per-layer latent matrix plus the K/V caches derived from it; exactly one
/// row per processed token per layer, no matter how many loops ran.
pub struct LatentKvState {
    layers: Vec<LayerLatent>,
}

struct LayerLatent {
    h: RowMatrix,
    k: RowMatrix,
    v: RowMatrix,
    loops_done: Vec<u32>,
    finalized: Vec<bool>,
}

impl LatentKvState {
    pub fn new(n_layers: usize, d: usize) -> LatentKvState {
        LatentKvState {
            layers: (0..n_layers)
                .map(|_| LayerLatent {
                    h: RowMatrix::new(d),
                    k: RowMatrix::new(d),
                    v: RowMatrix::new(d),
                    loops_done: Vec::new(),
                    finalized: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn rows(&self, layer: usize) -> usize {
        self.layers[layer].h.rows()
    }

    /// Total stored elements across layers: latent plus derived K and V.
    pub fn element_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.h.element_count() + l.k.element_count() + l.v.element_count())
            .sum()
    }

    /// Stored K/V elements only (the cache proper, excluding the latent).
    pub fn kv_element_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.k.element_count() + l.v.element_count())
            .sum()
    }

    pub fn append_row(&mut self, layer: usize, h: &[f64], k: &[f64], v: &[f64]) {
        let s = &mut self.layers[layer];
        s.h.push_row(h);
        s.k.push_row(k);
        s.v.push_row(v);
        s.loops_done.push(1);
        s.finalized.push(false);
    }

    /// Overwrite a row during a later loop. Only the newest (in-progress)
    /// token may be updated here; earlier rows are final.
    pub fn update_row(
        &mut self,
        layer: usize,
        row: usize,
        h: &[f64],
        k: &[f64],
        v: &[f64],
    ) -> Result<()> {
        let s = &mut self.layers[layer];
        let newest = s.h.rows().saturating_sub(1);
        if row != newest {
            return Err(Error::NonNewestUpdate { row, newest });
        }
        s.h.set_row(row, h);
        s.k.set_row(row, k);
        s.v.set_row(row, v);
        s.loops_done[row] += 1;
        Ok(())
    }

    pub fn finalize_newest(&mut self, layer: usize) {
        let s = &mut self.layers[layer];
        if let Some(f) = s.finalized.last_mut() {
            *f = true;
        }
    }

    pub fn loops_done(&self, layer: usize, row: usize) -> u32 {
        self.layers[layer].loops_done[row]
    }

    /// Copies of a layer's stored K and V rows.
    pub fn kv_rows(&self, layer: usize) -> (Vec<f64>, Vec<f64>) {
        (
            self.layers[layer].k.data.clone(),
            self.layers[layer].v.data.clone(),
        )
    }

    fn k_tensor(&self, layer: usize) -> Tensor {
        self.layers[layer].k.to_tensor()
    }

    fn v_tensor(&self, layer: usize) -> Tensor {
        self.layers[layer].v.to_tensor()
    }

    fn h_tensor(&self, layer: usize) -> Tensor {
        self.layers[layer].h.to_tensor()
    }
}

/// Trace of a chunked forward, used to assert that later chunks only ever
/// read finalized latent state from earlier chunks.
#[derive(Debug, Clone, Copy)]
pub struct ChunkTrace {
    pub chunks: usize,
    pub prior_rows_read: usize,
    pub all_prior_finalized: bool,
}

pub struct MeltForward {
    pub outputs: ForwardOutputs,
    pub trace: ChunkTrace,
}

pub struct MeltModel {
    pub config: ModelConfig,
    pub stack: StackParams,
    pub gates: Vec<GateParams>,
    pub variant: GateVariant,
    pub wiring: GateWiring,
    pub rotary: RotaryTable,
}

impl MeltModel {
    pub fn new(config: ModelConfig, seed: u64, tape: &Tape) -> Result<MeltModel> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let stack = StackParams::init(&config, &mut rng, tape);
        let gates = (0..config.n_layers)
            .map(|_| GateParams::init(&mut rng, config.hidden_dim, tape))
            .collect();
        Ok(MeltModel::from_parts(config, stack, gates))
    }

    /// Initialize from a per-loop baseline: copy its weights, add fresh
    /// randomly initialized gates.
    pub fn from_base(base: &LoopLmModel, gate_seed: u64, tape: &Tape) -> Result<MeltModel> {
        let config = base.config.clone();
        config.validate()?;
        let stack = base.params.clone_onto(tape);
        let mut rng = seeded_rng(gate_seed);
        let gates = (0..config.n_layers)
            .map(|_| GateParams::init(&mut rng, config.hidden_dim, tape))
            .collect();
        Ok(MeltModel::from_parts(config, stack, gates))
    }

    pub fn from_parts(
        config: ModelConfig,
        stack: StackParams,
        gates: Vec<GateParams>,
    ) -> MeltModel {
        let rotary = RotaryTable::new(config.head_dim(), config.max_seq_len, ROTARY_BASE);
        MeltModel {
            config,
            stack,
            gates,
            variant: GateVariant::Gated,
            wiring: GateWiring::Standard,
            rotary,
        }
    }

    /// Deep copy with fresh leaf parameters on `tape` (training restart
    /// from a frozen checkpoint).
    pub fn clone_onto(&self, tape: &Tape) -> MeltModel {
        let stack = self.stack.clone_onto(tape);
        let gates = self
            .gates
            .iter()
            .map(|g| GateParams {
                w_z: Tensor::param(g.w_z.shape(), g.w_z.to_vec(), tape),
                u_z: Tensor::param(g.u_z.shape(), g.u_z.to_vec(), tape),
                b_z: Tensor::param(g.b_z.shape(), g.b_z.to_vec(), tape),
            })
            .collect();
        MeltModel::from_parts(self.config.clone(), stack, gates)
            .with_variant(self.variant)
            .with_wiring(self.wiring)
    }

    pub fn with_variant(mut self, variant: GateVariant) -> MeltModel {
        self.variant = variant;
        self
    }

    pub fn with_wiring(mut self, wiring: GateWiring) -> MeltModel {
        self.wiring = wiring;
        self
    }

    /// Stack parameters plus gate parameters under the `gate.` name prefix.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.stack.named_params();
        for (l, g) in self.gates.iter().enumerate() {
            out.push((format!("gate.layer{l}.w_z"), g.w_z.clone()));
            out.push((format!("gate.layer{l}.u_z"), g.u_z.clone()));
            out.push((format!("gate.layer{l}.b_z"), g.b_z.clone()));
        }
        out
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        Tensor::embed_rows(&self.stack.embedding, tokens)
    }

    pub fn logits_of(&self, x: &Tensor) -> Result<Tensor> {
        x.rms_norm(&self.stack.final_norm_w, crate::loop_lm::NORM_EPS)?
            .matmul(&self.stack.lm_head)
    }

    /// Teacher-forced forward in fixed-length chunks. Within a chunk, every
    /// loop updates all chunk tokens in parallel and attends to same-chunk
    /// keys from the current loop's latent state; across chunks only final
    /// latent state is visible. When `alpha < 1`, a per-loop baseline KV is
    /// computed from the same hidden states and blended in.
    pub fn chunk_forward(
        &self,
        tokens: &[usize],
        chunk_size: usize,
        alpha: f64,
    ) -> Result<MeltForward> {
        assert!(chunk_size >= 1, "chunk_size must be at least 1");
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::AlphaOutOfRange { alpha });
        }
        let cfg = &self.config;
        let (n_layers, t_loops, n_heads) = (cfg.n_layers, cfg.loops, cfg.n_heads);
        let blend = alpha < 1.0;

        // Finalized per-chunk tensors from earlier chunks.
        let mut final_k: Vec<Vec<Tensor>> = vec![Vec::new(); n_layers];
        let mut final_v: Vec<Vec<Tensor>> = vec![Vec::new(); n_layers];
        let mut final_h: Vec<Vec<Tensor>> = vec![Vec::new(); n_layers];
        // Per-loop baseline caches from earlier chunks (interpolation only).
        let mut base_k: Vec<Vec<Vec<Tensor>>> = vec![vec![Vec::new(); t_loops]; n_layers];
        let mut base_v: Vec<Vec<Vec<Tensor>>> = vec![vec![Vec::new(); t_loops]; n_layers];
        let mut chunk_final_flags: Vec<bool> = Vec::new();

        let mut logits_chunks: Vec<Vec<Tensor>> = vec![Vec::new(); t_loops];
        let mut post_chunks: Vec<Vec<Vec<Tensor>>> = vec![vec![Vec::new(); n_layers]; t_loops];
        let mut trace = ChunkTrace {
            chunks: 0,
            prior_rows_read: 0,
            all_prior_finalized: true,
        };

        let mut start = 0;
        while start < tokens.len() {
            let end = (start + chunk_size).min(tokens.len());
            let chunk = &tokens[start..end];
            let q_positions: Vec<usize> = (start..end).collect();
            let k_positions: Vec<usize> = (0..end).collect();
            let mut x = self.embed(chunk)?;
            let mut latents: Vec<Option<Tensor>> = vec![None; n_layers];
            let mut chunk_k: Vec<Option<Tensor>> = vec![None; n_layers];
            let mut chunk_v: Vec<Option<Tensor>> = vec![None; n_layers];
            let mut chunk_base_k: Vec<Vec<Tensor>> = vec![Vec::new(); n_layers];
            let mut chunk_base_v: Vec<Vec<Tensor>> = vec![Vec::new(); n_layers];
            for t in 0..t_loops {
                for l in 0..n_layers {
                    let layer = &self.stack.layers[l];
                    let u = normed(layer, &x)?;
                    let h = match latents[l].take() {
                        None => u.clone(),
                        Some(prev) => variant_update(
                            self.variant,
                            &u,
                            &prev,
                            t + 1,
                            &self.gates[l],
                            self.wiring,
                        )?,
                    };
                    let k_chunk = h.matmul(&layer.w_k)?;
                    let v_chunk = h.matmul(&layer.w_v)?;
                    latents[l] = Some(h);

                    for flag in chunk_final_flags.iter() {
                        trace.all_prior_finalized &= *flag;
                    }
                    trace.prior_rows_read += start;

                    let mut k_parts: Vec<&Tensor> = final_k[l].iter().collect();
                    k_parts.push(&k_chunk);
                    let mut v_parts: Vec<&Tensor> = final_v[l].iter().collect();
                    v_parts.push(&v_chunk);
                    let k_melt_all = Tensor::concat_rows(&k_parts)?;
                    let v_melt_all = Tensor::concat_rows(&v_parts)?;

                    let (k_used, v_used) = if blend {
                        let k_base_chunk = u.matmul(&layer.w_k)?;
                        let v_base_chunk = u.matmul(&layer.w_v)?;
                        let mut kb: Vec<&Tensor> = base_k[l][t].iter().collect();
                        kb.push(&k_base_chunk);
                        let mut vb: Vec<&Tensor> = base_v[l][t].iter().collect();
                        vb.push(&v_base_chunk);
                        let k_base_all = Tensor::concat_rows(&kb)?;
                        let v_base_all = Tensor::concat_rows(&vb)?;
                        let k_used = interpolate_kv(&k_melt_all, &k_base_all, alpha)?;
                        let v_used = interpolate_kv(&v_melt_all, &v_base_all, alpha)?;
                        chunk_base_k[l].push(k_base_chunk);
                        chunk_base_v[l].push(v_base_chunk);
                        (k_used, v_used)
                    } else {
                        (k_melt_all, v_melt_all)
                    };

                    let io = block_attn_ffn(
                        layer,
                        &x,
                        &u,
                        &q_positions,
                        &k_used,
                        &k_positions,
                        &v_used,
                        n_heads,
                        &self.rotary,
                    )?;
                    post_chunks[t][l].push(io.x_attn);
                    x = io.x_next;
                    chunk_k[l] = Some(k_chunk);
                    chunk_v[l] = Some(v_chunk);
                }
                logits_chunks[t].push(self.logits_of(&x)?);
            }
            // Chunk complete: expose only final latent state downstream.
            for l in 0..n_layers {
                final_k[l].push(chunk_k[l].take().expect("set in loop"));
                final_v[l].push(chunk_v[l].take().expect("set in loop"));
                final_h[l].push(latents[l].take().expect("set in loop"));
                if blend {
                    for (t, kb) in chunk_base_k[l].drain(..).enumerate() {
                        base_k[l][t].push(kb);
                    }
                    for (t, vb) in chunk_base_v[l].drain(..).enumerate() {
                        base_v[l][t].push(vb);
                    }
                }
            }
            chunk_final_flags.push(true);
            trace.chunks += 1;
            start = end;
        }

        let per_loop_logits = logits_chunks
            .into_iter()
            .map(|parts| {
                let refs: Vec<&Tensor> = parts.iter().collect();
                Tensor::concat_rows(&refs)
            })
            .collect::<Result<Vec<_>>>()?;
        let post_attn = post_chunks
            .into_iter()
            .map(|layers| {
                layers
                    .into_iter()
                    .map(|parts| {
                        let refs: Vec<&Tensor> = parts.iter().collect();
                        Tensor::concat_rows(&refs)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let cache_elements = final_k
            .iter()
            .chain(final_v.iter())
            .chain(final_h.iter())
            .flatten()
            .map(|t| t.numel())
            .sum();
        Ok(MeltForward {
            outputs: ForwardOutputs {
                per_loop_logits,
                post_attn,
                cache_elements,
            },
            trace,
        })
    }

    pub fn session(&self) -> MeltSession<'_> {
        MeltSession::new(self)
    }

    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        sampling: Sampling,
        seed: u64,
    ) -> Result<GenerateResult> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut rng = seeded_rng(seed);
        let mut session = self.session();
        let budget = self.config.max_seq_len.saturating_sub(prompt.len());
        let max_new = max_new.min(budget);
        let mut tokens = prompt.to_vec();
        let mut logits = Tensor::zeros(vec![1, self.config.vocab_size]);
        for &tok in prompt {
            let per_loop = session.push_token(tok)?;
            logits = per_loop.into_iter().last().expect("loops >= 1");
        }
        for _ in 0..max_new {
            let next = sample_token(&logits, sampling, &mut rng);
            tokens.push(next);
            if tokens.len() >= self.config.max_seq_len {
                break;
            }
            let per_loop = session.push_token(next)?;
            logits = per_loop.into_iter().last().expect("loops >= 1");
        }
        Ok(GenerateResult {
            tokens,
            kv_elements: session.state().kv_element_count(),
        })
    }

    /// Largest deviation between the stored K/V rows and a fresh projection
    /// of the stored latent rows; memory dynamics stay decoupled from
    /// retrieval exactly when this is ~0.
    pub fn projection_deviation(&self, state: &LatentKvState) -> Result<f64> {
        let mut worst: f64 = 0.0;
        let run = |worst: &mut f64| -> Result<()> {
            for (l, layer) in self.stack.layers.iter().enumerate() {
                let h = state.h_tensor(l);
                if h.rows() == 0 {
                    continue;
                }
                let k = h.matmul(&layer.w_k)?;
                let v = h.matmul(&layer.w_v)?;
                for (a, b) in k.to_vec().iter().zip(state.k_tensor(l).to_vec()) {
                    *worst = worst.max((a - b).abs());
                }
                for (a, b) in v.to_vec().iter().zip(state.v_tensor(l).to_vec()) {
                    *worst = worst.max((a - b).abs());
                }
            }
            Ok(())
        };
        match self.stack.tape() {
            Some(tape) => tape.paused(|| run(&mut worst))?,
            None => run(&mut worst)?,
        }
        Ok(worst)
    }
}

/// Token-by-token inference session over the shared latent cache. Each
/// token runs all loops before the next token starts; loop 1 appends the
/// token's row, later loops update it in place (update-then-attend).
pub struct MeltSession<'m> {
    model: &'m MeltModel,
    state: LatentKvState,
    n_tokens: usize,
    tape: Option<Tape>,
}

impl<'m> MeltSession<'m> {
    fn new(model: &'m MeltModel) -> MeltSession<'m> {
        MeltSession {
            model,
            state: LatentKvState::new(model.config.n_layers, model.config.hidden_dim),
            n_tokens: 0,
            tape: model.stack.tape(),
        }
    }

    pub fn state(&self) -> &LatentKvState {
        &self.state
    }

    pub fn tokens_seen(&self) -> usize {
        self.n_tokens
    }

    pub fn push_token(&mut self, token: usize) -> Result<Vec<Tensor>> {
        match self.tape.clone() {
            Some(tape) => tape.paused(|| self.push_token_inner(token)),
            None => self.push_token_inner(token),
        }
    }

    fn push_token_inner(&mut self, token: usize) -> Result<Vec<Tensor>> {
        let model = self.model;
        let cfg = &model.config;
        let pos = self.n_tokens;
        let d = cfg.hidden_dim;
        let mut x = model.embed(&[token])?;
        let mut per_loop_logits = Vec::with_capacity(cfg.loops);
        for t in 0..cfg.loops {
            for (l, layer) in model.stack.layers.iter().enumerate() {
                let u = normed(layer, &x)?;
                let h = if t == 0 {
                    u.clone()
                } else {
                    let prev_row = self.state.layers[l].h.data[pos * d..(pos + 1) * d].to_vec();
                    let prev = Tensor::from_vec(vec![1, d], prev_row);
                    variant_update(model.variant, &u, &prev, t + 1, &model.gates[l], model.wiring)?
                };
                let k_row = h.matmul(&layer.w_k)?;
                let v_row = h.matmul(&layer.w_v)?;
                if t == 0 {
                    self.state
                        .append_row(l, &h.to_vec(), &k_row.to_vec(), &v_row.to_vec());
                } else {
                    self.state
                        .update_row(l, pos, &h.to_vec(), &k_row.to_vec(), &v_row.to_vec())?;
                }
                let k_all = self.state.k_tensor(l);
                let v_all = self.state.v_tensor(l);
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
            }
            per_loop_logits.push(model.logits_of(&x)?);
        }
        for l in 0..cfg.n_layers {
            self.state.finalize_newest(l);
        }
        self.n_tokens += 1;
        Ok(per_loop_logits)
    }
}
