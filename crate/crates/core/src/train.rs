//! Two-phase training recipe. A per-loop baseline teacher is trained from
//! scratch on a synthetic task, then the shared-cache student is fine-tuned
//! from its weights: phase 1 blends baseline and shared-cache KV with a
//! linearly rising interpolation weight under distillation at every loop;
//! phase 2 holds the shared-cache dynamics fixed and adds an attention
//! alignment penalty against the frozen teacher.

use std::time::Instant;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::corpus::{make_corpus, token_accuracy, EvalModel, Example, TaskSpec};
use crate::error::{Error, Result};
use crate::loop_lm::{ForwardOutputs, LoopLmModel, ShareStrategy};
use crate::melt::{GateVariant, MeltModel};
use crate::tensor::{backward, Tape, Tensor};

/// Optimizer and schedule settings, plus phase lengths.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSchedule {
    pub chunk_size: usize,
    /// Steps over which the interpolation weight rises linearly to one.
    pub interp_steps: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub teacher_steps: usize,
    /// Attention-alignment weight (phase 2).
    pub beta: f64,
    /// Weight of the hard-label cross-entropy mixed into the KD loss.
    pub ce_weight: f64,
    pub lr: f64,
    pub gate_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> TrainSchedule {
        TrainSchedule {
            chunk_size: 8,
            interp_steps: 200,
            phase1_steps: 400,
            phase2_steps: 200,
            teacher_steps: 800,
            beta: 0.1,
            ce_weight: 0.5,
            lr: 1e-3,
            gate_lr: 5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            warmup_steps: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Interpolation weight: rises linearly from 0 to 1 over `interp_steps`.
pub fn alpha_schedule(step: usize, interp_steps: usize) -> Result<f64> {
    if interp_steps == 0 {
        return Err(Error::Config(
            "interp_steps must be positive".into(),
        ));
    }
    Ok((step as f64 / interp_steps as f64).min(1.0))
}

/// Progressive training ablations, ordered as each removes one more
/// component: attention alignment, then interpolation, then distillation,
/// and finally chunked processing (fully parallel plain SFT).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    NoAlign,
    NoInterp,
    NoKd,
    NoChunk,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "no_align" => Ok(Ablation::NoAlign),
            "no_interp" => Ok(Ablation::NoInterp),
            "no_kd" => Ok(Ablation::NoKd),
            "no_chunk" => Ok(Ablation::NoChunk),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }

    fn skips_align(&self) -> bool {
        !matches!(self, Ablation::None)
    }

    fn pins_alpha(&self) -> bool {
        matches!(self, Ablation::NoInterp | Ablation::NoKd | Ablation::NoChunk)
    }

    fn drops_kd(&self) -> bool {
        matches!(self, Ablation::NoKd | Ablation::NoChunk)
    }

    fn parallel(&self) -> bool {
        matches!(self, Ablation::NoChunk)
    }
}

/// Frozen per-loop teacher. Parameters are detached constants; the checksum
/// lets callers assert immutability across any number of steps.
pub struct TeacherHandle {
    pub model: LoopLmModel,
}

impl TeacherHandle {
    pub fn new(model: &LoopLmModel) -> TeacherHandle {
        let frozen = LoopLmModel::from_parts(model.config.clone(), model.params.frozen_copy());
        TeacherHandle { model: frozen }
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutputs> {
        self.model.loop_forward(tokens)
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(&self.model.params.named_params())
    }
}

/// FNV-1a over the raw parameter bytes, in registry order.
pub fn params_checksum(params: &[(String, Tensor)]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, t) in params {
        eat(name.as_bytes());
        for v in t.to_vec() {
            eat(&v.to_le_bytes());
        }
    }
    hash
}

/// Mean over loops and positions of KL(teacher || student) on softmaxed
/// logits, plus `ce_weight` times the cross-entropy to hard targets
/// (also averaged over loops).
pub fn kd_all_loops_loss(
    student_logits: &[Tensor],
    teacher_logits: &[Tensor],
    targets: &[Option<usize>],
    ce_weight: f64,
) -> Result<Tensor> {
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::LoopCountMismatch {
            student: student_logits.len(),
            teacher: teacher_logits.len(),
        });
    }
    let t = student_logits.len() as f64;
    let mut total: Option<Tensor> = None;
    for (s, te) in student_logits.iter().zip(teacher_logits) {
        let probs = te.detach().softmax_rows(None)?;
        let kl = s.kl_from_reference(&probs)?;
        let mut term = kl;
        if ce_weight != 0.0 {
            let ce = s.cross_entropy_rows(targets)?;
            term = term.add(&ce.scale(ce_weight))?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("at least one loop").scale(1.0 / t))
}

/// Cross-entropy at every loop against hard targets (teacher pretraining).
pub fn ce_all_loops_loss(per_loop_logits: &[Tensor], targets: &[Option<usize>]) -> Result<Tensor> {
    let t = per_loop_logits.len() as f64;
    let mut total: Option<Tensor> = None;
    for logits in per_loop_logits {
        let ce = logits.cross_entropy_rows(targets)?;
        total = Some(match total {
            None => ce,
            Some(acc) => acc.add(&ce)?,
        });
    }
    Ok(total.expect("at least one loop").scale(1.0 / t))
}

/// `beta / (N*T) * sum over layers and loops of the squared distance
/// between student and teacher post-attention outputs`, where each squared
/// norm is additionally averaged over tokens. Teacher values are detached;
/// no gradient reaches them.
pub fn attention_align_loss(
    post_student: &[Vec<Tensor>],
    post_teacher: &[Vec<Tensor>],
    beta: f64,
) -> Result<Tensor> {
    if post_student.len() != post_teacher.len() {
        return Err(Error::LoopCountMismatch {
            student: post_student.len(),
            teacher: post_teacher.len(),
        });
    }
    let loops = post_student.len();
    let layers = post_student.first().map(|v| v.len()).unwrap_or(0);
    let mut total: Option<Tensor> = None;
    for (s_loop, t_loop) in post_student.iter().zip(post_teacher) {
        if s_loop.len() != layers || t_loop.len() != layers {
            return Err(Error::LoopCountMismatch {
                student: s_loop.len(),
                teacher: t_loop.len(),
            });
        }
        for (s, te) in s_loop.iter().zip(t_loop) {
            let diff = s.sub(&te.detach())?;
            let tokens = s.rows() as f64;
            let sq = diff.mul(&diff)?.sum_all().scale(1.0 / tokens);
            total = Some(match total {
                None => sq,
                Some(acc) => acc.add(&sq)?,
            });
        }
    }
    let sum = total.unwrap_or_else(|| Tensor::scalar(0.0));
    Ok(sum.scale(beta / (layers.max(1) * loops.max(1)) as f64))
}

/// One JSON object per line in the metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub phase: String,
    pub alpha: f64,
    pub loss: f64,
    pub kd: f64,
    pub ce: f64,
    pub align: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

struct AdamSlot {
    name: String,
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay, global-norm clipping, warmup plus
/// cosine decay, and a separate learning rate for gate parameters.
pub struct Optimizer {
    slots: Vec<AdamSlot>,
    t: usize,
    lr: f64,
    gate_lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    grad_clip: f64,
    warmup: usize,
    total_steps: usize,
}

const ADAM_EPS: f64 = 1e-8;
const COSINE_FLOOR: f64 = 0.1;

impl Optimizer {
    pub fn new(
        params: Vec<(String, Tensor)>,
        schedule: &TrainSchedule,
        lr: f64,
        total_steps: usize,
    ) -> Optimizer {
        let slots = params
            .into_iter()
            .map(|(name, tensor)| {
                let n = tensor.numel();
                AdamSlot {
                    name,
                    tensor,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Optimizer {
            slots,
            t: 0,
            lr,
            gate_lr: schedule.gate_lr,
            beta1: schedule.adam_beta1,
            beta2: schedule.adam_beta2,
            weight_decay: schedule.weight_decay,
            grad_clip: schedule.grad_clip,
            warmup: schedule.warmup_steps,
            total_steps,
        }
    }

    pub fn zero_grads(&self) {
        for s in &self.slots {
            s.tensor.zero_grad();
        }
    }

    fn lr_factor(&self) -> f64 {
        let step = self.t;
        if step < self.warmup {
            return (step + 1) as f64 / self.warmup.max(1) as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        COSINE_FLOOR + (1.0 - COSINE_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Clip to the global norm budget and apply one update. Returns the
    /// post-clip gradient norm.
    pub fn step(&mut self) -> f64 {
        let mut sq = 0.0;
        for s in &self.slots {
            if let Some(g) = s.tensor.grad_vec() {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let factor = self.lr_factor();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for s in &mut self.slots {
            let lr = if s.name.starts_with("gate.") {
                self.gate_lr
            } else {
                self.lr
            } * factor;
            let (b1, b2, wd) = (self.beta1, self.beta2, self.weight_decay);
            let (m, v) = (&mut s.m, &mut s.v);
            s.tensor.update_with_grad(|data, grad| {
                for i in 0..data.len() {
                    let g = grad[i] * scale;
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    data[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * data[i]);
                }
            });
        }
        norm.min(self.grad_clip)
    }
}

/// Everything a full run needs: model dimensions, task, schedule, corpus
/// sizes.
#[derive(Clone, Debug)]
pub struct RecipeConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub schedule: TrainSchedule,
    pub train_size: usize,
    pub eval_size: usize,
}

impl RecipeConfig {
    pub fn train_corpus(&self) -> Result<Vec<Example>> {
        make_corpus(&self.task, self.train_size, self.schedule.seed.wrapping_add(1))
    }

    pub fn eval_corpus(&self) -> Result<Vec<Example>> {
        make_corpus(&self.task, self.eval_size, self.schedule.seed.wrapping_add(2))
    }
}

fn batch_of(corpus: &[Example], step: usize, batch: usize) -> Vec<&Example> {
    (0..batch)
        .map(|i| &corpus[(step * batch + i) % corpus.len()])
        .collect()
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NumericAbort { step, value: loss });
    }
    Ok(())
}

/// Train the per-loop baseline from scratch with cross-entropy supervision
/// at every loop. Returns the trained model still attached to its tape.
pub fn train_teacher(
    cfg: &RecipeConfig,
    sink: &mut dyn FnMut(StepMetrics),
) -> Result<(LoopLmModel, Tape)> {
    let tape = Tape::new();
    let model = LoopLmModel::new(cfg.model.clone(), cfg.schedule.seed, &tape)?;
    let corpus = cfg.train_corpus()?;
    let mut opt = Optimizer::new(
        model.params.named_params(),
        &cfg.schedule,
        cfg.schedule.lr,
        cfg.schedule.teacher_steps,
    );
    for step in 0..cfg.schedule.teacher_steps {
        let start = Instant::now();
        tape.clear();
        opt.zero_grads();
        let batch = batch_of(&corpus, step, cfg.schedule.batch_size);
        let mut loss_acc: Option<Tensor> = None;
        for ex in &batch {
            let out = model.loop_forward(&ex.tokens)?;
            let ce = ce_all_loops_loss(&out.per_loop_logits, &ex.ce_targets())?;
            loss_acc = Some(match loss_acc {
                None => ce,
                Some(acc) => acc.add(&ce)?,
            });
        }
        let loss = loss_acc
            .expect("non-empty batch")
            .scale(1.0 / batch.len() as f64);
        let loss_val = loss.item();
        check_finite(step, loss_val)?;
        backward(&loss)?;
        let grad_norm = opt.step();
        sink(StepMetrics {
            step,
            phase: "teacher".into(),
            alpha: 0.0,
            loss: loss_val,
            kd: 0.0,
            ce: loss_val,
            align: 0.0,
            grad_norm,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    tape.clear();
    Ok((model, tape))
}

pub struct PhaseOutcome {
    pub model: MeltModel,
    pub tape: Tape,
}

/// Run phase 1 (and optionally phase 2) on a student initialized from the
/// teacher. `student` may carry a partially trained model to continue from.
#[allow(clippy::too_many_arguments)]
pub struct MeltTrainer<'a> {
    pub cfg: &'a RecipeConfig,
    pub teacher: &'a TeacherHandle,
    pub variant: GateVariant,
    pub ablation: Ablation,
}

impl<'a> MeltTrainer<'a> {
    pub fn fresh_student(&self) -> Result<PhaseOutcome> {
        let tape = Tape::new();
        let model = MeltModel::from_base(
            &self.teacher.model,
            self.cfg.schedule.seed.wrapping_add(1000),
            &tape,
        )?
        .with_variant(self.variant);
        Ok(PhaseOutcome { model, tape })
    }

    /// Continue training a previously saved student.
    pub fn resume_student(&self, model: &MeltModel) -> PhaseOutcome {
        let tape = Tape::new();
        PhaseOutcome {
            model: model.clone_onto(&tape).with_variant(self.variant),
            tape,
        }
    }

    fn student_loss(
        &self,
        model: &MeltModel,
        ex: &Example,
        alpha: f64,
        with_align: bool,
    ) -> Result<(Tensor, f64, f64, f64)> {
        let chunk = if self.ablation.parallel() {
            ex.tokens.len()
        } else {
            self.cfg.schedule.chunk_size
        };
        let fwd = model.chunk_forward(&ex.tokens, chunk, alpha)?;
        let targets = ex.ce_targets();
        if self.ablation.drops_kd() {
            let ce = ce_all_loops_loss(&fwd.outputs.per_loop_logits, &targets)?;
            let v = ce.item();
            return Ok((ce, 0.0, v, 0.0));
        }
        let tout = self.teacher.forward(&ex.tokens)?;
        let kd = kd_all_loops_loss(
            &fwd.outputs.per_loop_logits,
            &tout.per_loop_logits,
            &targets,
            self.cfg.schedule.ce_weight,
        )?;
        let kd_val = kd.item();
        if with_align {
            let align = attention_align_loss(
                &fwd.outputs.post_attn,
                &tout.post_attn,
                self.cfg.schedule.beta,
            )?;
            let align_val = align.item();
            let total = kd.add(&align)?;
            Ok((total, kd_val, 0.0, align_val))
        } else {
            Ok((kd, kd_val, 0.0, 0.0))
        }
    }

    fn run_phase(
        &self,
        outcome: &PhaseOutcome,
        phase: &str,
        steps: usize,
        with_align: bool,
        alpha_of: &dyn Fn(usize) -> Result<f64>,
        sink: &mut dyn FnMut(StepMetrics),
    ) -> Result<()> {
        let corpus = self.cfg.train_corpus()?;
        let mut opt = Optimizer::new(
            outcome.model.named_params(),
            &self.cfg.schedule,
            self.cfg.schedule.lr,
            steps,
        );
        for step in 0..steps {
            let start = Instant::now();
            outcome.tape.clear();
            opt.zero_grads();
            let alpha = alpha_of(step)?;
            let batch = batch_of(&corpus, step, self.cfg.schedule.batch_size);
            let mut total: Option<Tensor> = None;
            let (mut kd_sum, mut ce_sum, mut align_sum) = (0.0, 0.0, 0.0);
            for ex in &batch {
                let (loss, kd, ce, align) = self.student_loss(&outcome.model, ex, alpha, with_align)?;
                kd_sum += kd;
                ce_sum += ce;
                align_sum += align;
                total = Some(match total {
                    None => loss,
                    Some(acc) => acc.add(&loss)?,
                });
            }
            let b = batch.len() as f64;
            let loss = total.expect("non-empty batch").scale(1.0 / b);
            let loss_val = loss.item();
            check_finite(step, loss_val)?;
            backward(&loss)?;
            let grad_norm = opt.step();
            sink(StepMetrics {
                step,
                phase: phase.into(),
                alpha,
                loss: loss_val,
                kd: kd_sum / b,
                ce: ce_sum / b,
                align: align_sum / b,
                grad_norm,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        outcome.tape.clear();
        Ok(())
    }

    /// Phase 1: chunked forward with the interpolation schedule and
    /// distillation at every loop.
    pub fn phase1(
        &self,
        outcome: &PhaseOutcome,
        sink: &mut dyn FnMut(StepMetrics),
    ) -> Result<()> {
        let interp = self.cfg.schedule.interp_steps;
        let pinned = self.ablation.pins_alpha();
        let alpha_of = move |step: usize| -> Result<f64> {
            if pinned {
                Ok(1.0)
            } else {
                alpha_schedule(step, interp)
            }
        };
        self.run_phase(
            outcome,
            "phase1",
            self.cfg.schedule.phase1_steps,
            false,
            &alpha_of,
            sink,
        )
    }

    /// Phase 2: pure shared-cache dynamics plus the attention-alignment
    /// penalty.
    pub fn phase2(
        &self,
        outcome: &PhaseOutcome,
        sink: &mut dyn FnMut(StepMetrics),
    ) -> Result<()> {
        if self.ablation.skips_align() {
            return Ok(());
        }
        self.run_phase(
            outcome,
            "phase2",
            self.cfg.schedule.phase2_steps,
            true,
            &|_| Ok(1.0),
            sink,
        )
    }

    /// Held-out token accuracy under the task's decoding protocol.
    pub fn evaluate(&self, model: &MeltModel) -> Result<f64> {
        let eval = self.cfg.eval_corpus()?;
        token_accuracy(&EvalModel::Melt(model), &self.cfg.task, &eval)
    }
}

/// Held-out accuracy of a per-loop baseline model.
pub fn evaluate_loop_lm(cfg: &RecipeConfig, model: &LoopLmModel) -> Result<f64> {
    let eval = cfg.eval_corpus()?;
    token_accuracy(
        &EvalModel::Loop(model, ShareStrategy::exact()),
        &cfg.task,
        &eval,
    )
}
