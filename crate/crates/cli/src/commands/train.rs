//! `melt train`: teacher pretraining, the two student phases, and the
//! component-removal ablations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use melt_core::checkpoint::{self, LoadedModel};
use melt_core::melt::GateVariant;
use melt_core::train::{
    train_teacher, Ablation, MeltTrainer, PhaseOutcome, StepMetrics, TeacherHandle,
};
use serde_json::json;

use crate::config::{parse_file, RunConfig};
use crate::manifest::ManifestTimer;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat key=value run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Which stage to run: the frozen teacher, one of the student phases,
    /// or the whole recipe.
    #[arg(long, default_value = "all", value_parser = ["teacher", "1", "2", "all"])]
    pub phase: String,
    /// Latent aggregation variant for the student.
    #[arg(long, default_value = "gated",
          value_parser = ["gated", "mean", "ema", "last", "single_gated"])]
    pub variant: String,
    /// Progressive component removal (each implies the ones before it).
    #[arg(long, default_value = "none",
          value_parser = ["none", "no_align", "no_interp", "no_kd", "no_chunk"])]
    pub ablate: String,
    /// Teacher checkpoint (overrides the config's `teacher_ckpt`).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Student checkpoint to continue from (required for `--phase 2`).
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Output directory (default: under the output root).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct MetricsSink {
    writer: BufWriter<File>,
}

impl MetricsSink {
    fn create(path: &Path) -> Result<MetricsSink> {
        Ok(MetricsSink {
            writer: BufWriter::new(File::create(path)?),
        })
    }

    fn emit(&mut self, m: &StepMetrics) {
        let line = serde_json::to_string(m).expect("metrics serialize");
        let _ = writeln!(self.writer, "{line}");
    }
}

fn load_teacher(path: &Path) -> Result<TeacherHandle> {
    if !path.exists() {
        bail!("missing teacher checkpoint {}", path.display());
    }
    match checkpoint::load(path)? {
        LoadedModel::LoopLm(model) => Ok(TeacherHandle::new(&model)),
        LoadedModel::Melt(_) => bail!(
            "{} holds a shared-cache model; the teacher must be the per-loop baseline",
            path.display()
        ),
    }
}

pub fn run(args: &TrainArgs, out_dir: &Path) -> Result<i32> {
    let cfg: RunConfig = parse_file(&args.config)?;
    let recipe = &cfg.recipe;
    recipe.model.validate()?;
    recipe.task.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let timer = ManifestTimer::start("train", cfg.resolved.clone(), recipe.schedule.seed);
    let mut sink = MetricsSink::create(&out_dir.join("metrics.jsonl"))?;

    let variant = GateVariant::parse(&args.variant)?;
    let ablation = Ablation::parse(&args.ablate)?;
    let teacher_path = args
        .teacher
        .clone()
        .or(cfg.teacher_ckpt.clone())
        .unwrap_or_else(|| out_dir.join("teacher.ckpt"));

    let mut summary = json!({
        "phase": args.phase,
        "variant": args.variant,
        "ablate": args.ablate,
        "seed": recipe.schedule.seed,
        "task": recipe.task.task.name(),
    });

    let teacher = match args.phase.as_str() {
        "teacher" => {
            let (model, _tape) = train_teacher(recipe, &mut |m| sink.emit(&m))?;
            checkpoint::save_loop_lm(&teacher_path, &model)?;
            let acc = melt_core::train::evaluate_loop_lm(recipe, &model)?;
            summary["teacher_accuracy"] = json!(acc);
            summary["teacher_ckpt"] = json!(teacher_path.display().to_string());
            println!("teacher accuracy {acc:.4}");
            finish(out_dir, timer, sink, summary)?;
            return Ok(0);
        }
        "all" => {
            if teacher_path.exists() {
                load_teacher(&teacher_path)?
            } else {
                let (model, _tape) = train_teacher(recipe, &mut |m| sink.emit(&m))?;
                checkpoint::save_loop_lm(&teacher_path, &model)?;
                TeacherHandle::new(&model)
            }
        }
        _ => load_teacher(&teacher_path)?,
    };
    summary["teacher_ckpt"] = json!(teacher_path.display().to_string());

    let trainer = MeltTrainer {
        cfg: recipe,
        teacher: &teacher,
        variant,
        ablation,
    };

    let student: PhaseOutcome = match args.phase.as_str() {
        "2" => {
            let path = args
                .student
                .as_ref()
                .ok_or_else(|| anyhow!("--phase 2 needs --student <phase-1 checkpoint>"))?;
            match checkpoint::load(path)
                .with_context(|| format!("student checkpoint {}", path.display()))?
            {
                LoadedModel::Melt(m) => trainer.resume_student(&m),
                LoadedModel::LoopLm(_) => bail!("--student must be a shared-cache checkpoint"),
            }
        }
        _ => trainer.fresh_student()?,
    };

    if args.phase == "1" || args.phase == "all" {
        trainer.phase1(&student, &mut |m| sink.emit(&m))?;
        let p1_path = out_dir.join("melt_phase1.ckpt");
        checkpoint::save_melt(&p1_path, &student.model)?;
        summary["phase1_ckpt"] = json!(p1_path.display().to_string());
    }
    if args.phase == "2" || args.phase == "all" {
        trainer.phase2(&student, &mut |m| sink.emit(&m))?;
    }
    let final_path = out_dir.join("melt.ckpt");
    checkpoint::save_melt(&final_path, &student.model)?;
    summary["checkpoint"] = json!(final_path.display().to_string());

    let accuracy = trainer.evaluate(&student.model)?;
    summary["accuracy"] = json!(accuracy);
    println!("held-out token accuracy {accuracy:.4}");

    finish(out_dir, timer, sink, summary)?;
    Ok(0)
}

fn finish(
    out_dir: &Path,
    timer: ManifestTimer,
    mut sink: MetricsSink,
    summary: serde_json::Value,
) -> Result<()> {
    sink.writer.flush()?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    timer.write(out_dir)?;
    Ok(())
}
