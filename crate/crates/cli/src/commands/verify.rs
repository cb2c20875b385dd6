//! `melt verify`: run the gradient-stability and equivalence suites, emit
//! one JSON object per check, and fail the process if any check fails.

use std::path::Path;

use anyhow::Result;
use clap::Args;
use melt_core::gradcheck;
use melt_core::melt::GateWiring;
use melt_core::verify::{equivalence_suite, jacobian_suite, superhighway_suite, CheckResult};

use crate::manifest::ManifestTimer;

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all",
          value_parser = ["jacobian", "superhighway", "equivalence", "gradients", "all"])]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deliberately mis-wire the gate combine (negative control: the
    /// equivalence suite must then fail).
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

pub fn run(args: &VerifyArgs, out_dir: &Path) -> Result<i32> {
    let timer = ManifestTimer::start("verify", Default::default(), args.seed);
    let wiring = if args.inject_fault {
        GateWiring::SwappedComplement
    } else {
        GateWiring::Standard
    };
    let mut results: Vec<CheckResult> = Vec::new();
    if matches!(args.suite.as_str(), "jacobian" | "all") {
        results.extend(jacobian_suite(args.seed)?);
    }
    if matches!(args.suite.as_str(), "superhighway" | "all") {
        results.extend(superhighway_suite(args.seed)?);
    }
    if matches!(args.suite.as_str(), "equivalence" | "all") {
        results.extend(equivalence_suite(args.seed, wiring)?);
    }
    if matches!(args.suite.as_str(), "gradients" | "all") {
        for r in gradcheck::check_all_ops(args.seed, 5) {
            results.push(CheckResult {
                name: format!("gradcheck_{}", r.name),
                status: if r.pass { "pass" } else { "fail" }.into(),
                metric: r.worst_score,
                tolerance: Some(gradcheck::FD_RTOL),
            });
        }
        let r = gradcheck::check_model_loss(args.seed, 2)?;
        results.push(CheckResult {
            name: "gradcheck_full_model_loss".into(),
            status: if r.pass { "pass" } else { "fail" }.into(),
            metric: r.worst_score,
            tolerance: Some(gradcheck::FD_RTOL),
        });
    }

    for r in &results {
        println!("{}", serde_json::to_string(r)?);
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("verify_report.json"),
        serde_json::to_string_pretty(&results)?,
    )?;
    timer.write(out_dir)?;

    let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.passed()).collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        for f in &failed {
            eprintln!("FAILED: {} (metric {:.3e})", f.name, f.metric);
        }
        Ok(1)
    }
}
