//! `melt generate`: autoregressive decoding from a checkpoint, with the
//! untrained cache-sharing strategies for the per-loop baseline and a
//! measured-versus-analytic cache accounting line.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use melt_core::checkpoint::{self, LoadedModel};
use melt_core::loop_lm::{Sampling, ShareMode, ShareStrategy};
use melt_core::memory::{kv_bytes_per_token, CacheMode, MemorySpec};

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Space-separated token ids.
    #[arg(long)]
    pub prompt: String,
    /// Cache handling across loops (per-loop baseline only).
    #[arg(long, default_value = "none", value_parser = ["none", "first_loop", "last_loop"])]
    pub strategy: String,
    /// Preserve the prompt's exact per-loop cache under a sharing strategy.
    #[arg(long)]
    pub keep_prompt_cache: bool,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample with this temperature instead of greedy decoding.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Nucleus mass for sampling (with --temperature).
    #[arg(long, default_value_t = 0.7)]
    pub top_p: f64,
}

fn element_spec(n_layers: usize, hidden_dim: usize, loops: usize, mode: CacheMode) -> MemorySpec {
    // bytes_per_elem 1 turns the byte formula into an element count
    MemorySpec {
        n_layers: n_layers as u64,
        n_kv_heads: 1,
        head_dim: hidden_dim as u64,
        bytes_per_elem: 1,
        loops: loops as u64,
        cache_mode: mode,
    }
}

pub fn run(args: &GenerateArgs) -> Result<i32> {
    let prompt: Vec<usize> = args
        .prompt
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| anyhow::anyhow!("bad token id {t:?}")))
        .collect::<Result<_>>()?;
    let sampling = match args.temperature {
        None => Sampling::Greedy,
        Some(t) => Sampling::TopP {
            temperature: t,
            top_p: args.top_p,
        },
    };
    let mode = match args.strategy.as_str() {
        "none" => ShareMode::None,
        "first_loop" => ShareMode::FirstLoop,
        "last_loop" => ShareMode::LastLoop,
        other => bail!("unknown strategy {other:?}"),
    };
    let strategy = ShareStrategy {
        mode,
        keep_prompt_cache: args.keep_prompt_cache,
    };

    let loaded = checkpoint::load(&args.checkpoint)?;
    let (tokens, measured, analytic) = match &loaded {
        LoadedModel::LoopLm(model) => {
            let out = model.generate(&prompt, args.max_new, strategy, sampling, args.seed)?;
            let cfg = &model.config;
            let total = out.tokens.len() as u64;
            let prompt_len = prompt.len() as u64;
            let per_loop =
                kv_bytes_per_token(&element_spec(cfg.n_layers, cfg.hidden_dim, cfg.loops, CacheMode::PerLoop));
            let shared =
                kv_bytes_per_token(&element_spec(cfg.n_layers, cfg.hidden_dim, cfg.loops, CacheMode::Shared));
            let analytic = match (mode, args.keep_prompt_cache) {
                (ShareMode::None, _) => total * per_loop,
                (_, true) => prompt_len * per_loop + (total - prompt_len) * shared,
                (_, false) => total * shared,
            };
            (out.tokens, out.kv_elements as u64, analytic)
        }
        LoadedModel::Melt(model) => {
            if mode != ShareMode::None {
                return Err(melt_core::Error::StrategyUnsupported.into());
            }
            let out = model.generate(&prompt, args.max_new, sampling, args.seed)?;
            let cfg = &model.config;
            let shared =
                kv_bytes_per_token(&element_spec(cfg.n_layers, cfg.hidden_dim, cfg.loops, CacheMode::Shared));
            let analytic = out.tokens.len() as u64 * shared;
            (out.tokens, out.kv_elements as u64, analytic)
        }
    };

    let rendered: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    println!("{}", rendered.join(" "));
    let matches = measured == analytic;
    println!(
        "kv elements: measured={measured} analytic={analytic} model={} match={matches}",
        loaded.kind_name()
    );
    Ok(if matches { 0 } else { 1 })
}
