//! `melt profile`: closed-form KV and weight memory tables, CSV export,
//! and a live cross-check of the formulas against running sessions.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use melt_core::config::ModelConfig;
use melt_core::loop_lm::{LoopLmModel, ShareStrategy};
use melt_core::melt::MeltModel;
use melt_core::memory::{
    generation_report, kv_bytes_per_token, presets, CacheMode, MemorySpec, PROFILE_SEQ_LEN,
};
use melt_core::tensor::Tape;

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Pinned model presets; omit to describe a custom spec with the
    /// flags below.
    #[arg(long, value_parser = ["melt16", "ouro14", "qwen17", "all"])]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 24)]
    pub layers: u64,
    #[arg(long, default_value_t = 16)]
    pub kv_heads: u64,
    #[arg(long, default_value_t = 128)]
    pub head_dim: u64,
    #[arg(long, default_value_t = 2)]
    pub bytes: u64,
    #[arg(long, default_value_t = 4)]
    pub loops: u64,
    #[arg(long, default_value = "shared", value_parser = ["per_loop", "shared", "standard"])]
    pub mode: String,
    #[arg(long, default_value_t = 1_636_000_000)]
    pub params: u64,
    /// Generation length for the projected columns.
    #[arg(long, default_value_t = PROFILE_SEQ_LEN)]
    pub seq_len: u64,
    /// Add the latent-state line item (excluded from the cache columns).
    #[arg(long)]
    pub include_latent: bool,
    /// Write machine-readable rows here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Measure tiny live sessions and require exact agreement with the
    /// analytic formulas.
    #[arg(long)]
    pub live_check: bool,
}

struct Row {
    name: String,
    spec: MemorySpec,
    n_params: u64,
}

fn rows_for(args: &ProfileArgs) -> Result<Vec<Row>> {
    match args.preset.as_deref() {
        Some("all") | None if args.preset.is_some() => Ok(presets()
            .into_iter()
            .map(|p| Row {
                name: p.name.to_string(),
                spec: p.spec,
                n_params: p.n_params,
            })
            .collect()),
        Some(name) => {
            let p = presets()
                .into_iter()
                .find(|p| p.name == name)
                .ok_or_else(|| anyhow::anyhow!("unknown preset {name:?}"))?;
            Ok(vec![Row {
                name: p.name.to_string(),
                spec: p.spec,
                n_params: p.n_params,
            }])
        }
        None => {
            let cache_mode = match args.mode.as_str() {
                "per_loop" => CacheMode::PerLoop,
                "shared" => CacheMode::Shared,
                "standard" => CacheMode::Standard,
                other => bail!("unknown cache mode {other:?}"),
            };
            Ok(vec![Row {
                name: "custom".to_string(),
                spec: MemorySpec {
                    n_layers: args.layers,
                    n_kv_heads: args.kv_heads,
                    head_dim: args.head_dim,
                    bytes_per_elem: args.bytes,
                    loops: args.loops,
                    cache_mode,
                },
                n_params: args.params,
            }])
        }
    }
}

/// Generate with tiny configured models and demand exact agreement between
/// measured element counts (scaled by the element size) and the formula.
fn live_cross_check() -> Result<bool> {
    let cfg = ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        loops: 3,
        vocab_size: 11,
        max_seq_len: 32,
    };
    let tape = Tape::new();
    let prompt = [1usize, 2, 3];
    let bytes_per_elem = 2u64;

    let base = LoopLmModel::new(cfg.clone(), 12, &tape)?;
    let gen = base.generate(
        &prompt,
        9,
        ShareStrategy::exact(),
        melt_core::loop_lm::Sampling::Greedy,
        0,
    )?;
    let spec = MemorySpec {
        n_layers: cfg.n_layers as u64,
        n_kv_heads: 1,
        head_dim: cfg.hidden_dim as u64,
        bytes_per_elem,
        loops: cfg.loops as u64,
        cache_mode: CacheMode::PerLoop,
    };
    let measured = gen.kv_elements as u64 * bytes_per_elem;
    let analytic = gen.tokens.len() as u64 * kv_bytes_per_token(&spec);
    let loop_ok = measured == analytic;
    println!("live per-loop cache: measured={measured} analytic={analytic} match={loop_ok}");

    let melt = MeltModel::new(cfg.clone(), 13, &tape)?;
    let gen = melt.generate(&prompt, 9, melt_core::loop_lm::Sampling::Greedy, 0)?;
    let spec = MemorySpec {
        cache_mode: CacheMode::Shared,
        ..spec
    };
    let measured = gen.kv_elements as u64 * bytes_per_elem;
    let analytic = gen.tokens.len() as u64 * kv_bytes_per_token(&spec);
    let melt_ok = measured == analytic;
    println!("live shared cache:   measured={measured} analytic={analytic} match={melt_ok}");
    Ok(loop_ok && melt_ok)
}

pub fn run(args: &ProfileArgs) -> Result<i32> {
    let rows = rows_for(args)?;
    println!(
        "{:<8} {:>14} {:>12} {:>14} {:>12}",
        "model", "MB/token", "model GB", "KV@32k GiB", "total GB"
    );
    let mut csv = String::from("model,mb_per_token,model_gb,kv32k_gib,total\n");
    for row in &rows {
        let r = generation_report(&row.spec, row.n_params, args.seq_len);
        println!(
            "{:<8} {:>14.6} {:>12.3} {:>14.2} {:>12.2}",
            row.name,
            r.kv_mb_per_token(),
            r.model_gb(),
            r.kv_gib_at_len(),
            r.total_gb()
        );
        if args.include_latent {
            println!(
                "{:<8} {:>14.6} {:>12} {:>14} {:>12}",
                "  +latent",
                r.latent_bytes_per_token as f64 / 1e6,
                "-",
                "-",
                "-"
            );
        }
        csv.push_str(&format!(
            "{},{:.6},{:.3},{:.2},{:.2}\n",
            row.name,
            r.kv_mb_per_token(),
            r.model_gb(),
            r.kv_gib_at_len(),
            r.total_gb()
        ));
    }
    if let Some(path) = &args.csv {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, &csv)?;
    }
    if args.live_check {
        if !live_cross_check()? {
            return Ok(1);
        }
    }
    Ok(0)
}
