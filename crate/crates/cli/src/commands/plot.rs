//! `melt plot`: static SVG artifacts from a metrics stream, plus the
//! memory-versus-loop-count scaling curves.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use melt_core::memory::{kv_bytes_per_token, CacheMode, MemorySpec};
use serde_json::Value;

use crate::manifest::ManifestTimer;
use crate::svg::{line_chart, Series};

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Metrics JSONL produced by `melt train`.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

pub fn run(args: &PlotArgs, out_dir: &Path) -> Result<i32> {
    let timer = ManifestTimer::start("plot", Default::default(), 0);
    let text = std::fs::read_to_string(&args.metrics)
        .with_context(|| format!("cannot read metrics {}", args.metrics.display()))?;
    let mut phases: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut offset = 0.0;
    let mut last_phase = String::new();
    let mut last_step = 0.0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)?;
        let phase = v["phase"].as_str().unwrap_or("?").to_string();
        let step = v["step"].as_f64().unwrap_or(0.0);
        let loss = v["loss"].as_f64().unwrap_or(f64::NAN);
        if phase != last_phase {
            offset += if phases.is_empty() { 0.0 } else { last_step + 1.0 };
            phases.push((phase.clone(), Vec::new()));
            last_phase = phase;
        }
        last_step = step;
        if let Some((_, pts)) = phases.last_mut() {
            pts.push((offset + step, loss));
        }
    }
    let series: Vec<Series> = phases
        .into_iter()
        .enumerate()
        .map(|(i, (label, points))| Series {
            label,
            color: COLORS[i % COLORS.len()],
            points,
        })
        .collect();
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("loss.svg"),
        line_chart("training loss", "step", "loss", &series),
    )?;

    // per-token cache growth with loop count: append-only versus shared
    let mut per_loop = Vec::new();
    let mut shared = Vec::new();
    for t in 1..=8u64 {
        let mut spec = MemorySpec {
            n_layers: 24,
            n_kv_heads: 16,
            head_dim: 128,
            bytes_per_elem: 2,
            loops: t,
            cache_mode: CacheMode::PerLoop,
        };
        per_loop.push((t as f64, kv_bytes_per_token(&spec) as f64 / 1e6));
        spec.cache_mode = CacheMode::Shared;
        shared.push((t as f64, kv_bytes_per_token(&spec) as f64 / 1e6));
    }
    std::fs::write(
        out_dir.join("memory_vs_loops.svg"),
        line_chart(
            "KV cache per token vs loop count",
            "loops",
            "MB/token",
            &[
                Series {
                    label: "per-loop cache".into(),
                    color: COLORS[0],
                    points: per_loop,
                },
                Series {
                    label: "shared cache".into(),
                    color: COLORS[1],
                    points: shared,
                },
            ],
        ),
    )?;
    timer.write(out_dir)?;
    println!("wrote {}", out_dir.join("loss.svg").display());
    println!("wrote {}", out_dir.join("memory_vs_loops.svg").display());
    Ok(0)
}
