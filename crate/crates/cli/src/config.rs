//! Flat `key = value` run configuration. Unknown keys and unparsable
//! values are hard errors naming the offending key; every key has a
//! desk-scale default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use melt_core::config::ModelConfig;
use melt_core::corpus::{Task, TaskSpec};
use melt_core::train::{RecipeConfig, TrainSchedule};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub recipe: RecipeConfig,
    /// Where the frozen teacher checkpoint lives (or should be written).
    pub teacher_ckpt: Option<PathBuf>,
    /// Raw resolved key/value view for the manifest snapshot.
    pub resolved: BTreeMap<String, String>,
}

pub fn default_recipe() -> RecipeConfig {
    RecipeConfig {
        model: ModelConfig::desk(),
        task: TaskSpec {
            task: Task::Copy,
            vocab_size: ModelConfig::desk().vocab_size,
            copy_len: 8,
            modular_p: 11,
            problems_per_seq: 4,
        },
        schedule: TrainSchedule::default(),
        train_size: 512,
        eval_size: 64,
    }
}

pub fn parse_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    let mut recipe = default_recipe();
    let mut teacher_ckpt = None;
    let mut resolved = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`, got {raw:?}", lineno + 1);
        };
        let key = key.trim();
        let value = value.trim();
        resolved.insert(key.to_string(), value.to_string());
        apply(&mut recipe, &mut teacher_ckpt, key, value)
            .with_context(|| format!("config key {key:?} (line {})", lineno + 1))?;
    }
    // task vocab always mirrors the model vocab
    recipe.task.vocab_size = recipe.model.vocab_size;
    Ok(RunConfig {
        recipe,
        teacher_ckpt,
        resolved,
    })
}

fn apply(
    recipe: &mut RecipeConfig,
    teacher_ckpt: &mut Option<PathBuf>,
    key: &str,
    value: &str,
) -> Result<()> {
    fn int(v: &str) -> Result<usize> {
        Ok(v.parse::<usize>()?)
    }
    fn num(v: &str) -> Result<f64> {
        Ok(v.parse::<f64>()?)
    }
    match key {
        "n_layers" => recipe.model.n_layers = int(value)?,
        "hidden_dim" => recipe.model.hidden_dim = int(value)?,
        "n_heads" => recipe.model.n_heads = int(value)?,
        "loops" => recipe.model.loops = int(value)?,
        "vocab_size" => recipe.model.vocab_size = int(value)?,
        "max_seq_len" => recipe.model.max_seq_len = int(value)?,
        "task" => recipe.task.task = Task::parse(value)?,
        "copy_len" => recipe.task.copy_len = int(value)?,
        "modular_p" => recipe.task.modular_p = int(value)?,
        "problems_per_seq" => recipe.task.problems_per_seq = int(value)?,
        "train_size" => recipe.train_size = int(value)?,
        "eval_size" => recipe.eval_size = int(value)?,
        "chunk_size" => recipe.schedule.chunk_size = int(value)?,
        "batch_size" => recipe.schedule.batch_size = int(value)?,
        "interp_steps" => recipe.schedule.interp_steps = int(value)?,
        "phase1_steps" => recipe.schedule.phase1_steps = int(value)?,
        "phase2_steps" => recipe.schedule.phase2_steps = int(value)?,
        "teacher_steps" => recipe.schedule.teacher_steps = int(value)?,
        "beta" => recipe.schedule.beta = num(value)?,
        "ce_weight" => recipe.schedule.ce_weight = num(value)?,
        "lr" => recipe.schedule.lr = num(value)?,
        "gate_lr" => recipe.schedule.gate_lr = num(value)?,
        "adam_beta1" => recipe.schedule.adam_beta1 = num(value)?,
        "adam_beta2" => recipe.schedule.adam_beta2 = num(value)?,
        "weight_decay" => recipe.schedule.weight_decay = num(value)?,
        "grad_clip" => recipe.schedule.grad_clip = num(value)?,
        "warmup_steps" => recipe.schedule.warmup_steps = int(value)?,
        "seed" => recipe.schedule.seed = value.parse::<u64>()?,
        "teacher_ckpt" => *teacher_ckpt = Some(PathBuf::from(value)),
        other => bail!("unknown config key {other:?}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_overrides_apply() {
        let cfg = parse_str("seed = 7\nchunk_size=4 # trailing comment\n\n# full line\n").unwrap();
        assert_eq!(cfg.recipe.schedule.seed, 7);
        assert_eq!(cfg.recipe.schedule.chunk_size, 4);
        assert_eq!(cfg.recipe.model.hidden_dim, 64);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_str("learning_rate = 1").unwrap_err();
        assert!(format!("{err:#}").contains("learning_rate"));
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = parse_str("chunk_size = banana").unwrap_err();
        assert!(format!("{err:#}").contains("chunk_size"));
    }
}
