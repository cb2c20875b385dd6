//! Central finite-difference oracles for the reverse-mode engine. The
//! numeric side only ever runs forward passes, so it stays independent of
//! the backward path it checks.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::init::{seeded_rng, uniform};
use crate::melt::{gated_update, GateParams, GateWiring};
use crate::tensor::{backward, AttnMask, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
pub const FD_ATOL: f64 = 1e-7;

/// Central differences of a scalar function at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Error score for one coordinate; passing means `score < FD_RTOL`, i.e.
/// `|a - n| < FD_ATOL + FD_RTOL * max(|a|, |n|)`.
pub fn err_score(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (FD_ATOL / FD_RTOL + analytic.abs().max(numeric.abs()))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub trials: usize,
    pub coords: usize,
    pub worst_score: f64,
    pub pass: bool,
}

/// One graph under test: fixed input shapes and a builder that maps leaf
/// tensors to a scalar loss.
struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Box<dyn Fn(&[Tensor]) -> Tensor>,
}

fn proj_loss(out: &Tensor, coeffs: &[f64]) -> Tensor {
    let c = Tensor::from_vec(out.shape(), coeffs[..out.numel()].to_vec());
    out.mul(&c).expect("projection shapes match").sum_all()
}

fn run_case(case: &Case, rng: &mut ChaCha8Rng, trials: usize) -> GradCheck {
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..trials {
        let values: Vec<Vec<f64>> = case
            .shapes
            .iter()
            .map(|s| uniform(rng, s.clone(), 1.5))
            .collect();
        // analytic gradients
        let tape = Tape::new();
        let leaves: Vec<Tensor> = case
            .shapes
            .iter()
            .zip(&values)
            .map(|(s, v)| Tensor::param(s.clone(), v.clone(), &tape))
            .collect();
        let loss = (case.build)(&leaves);
        backward(&loss).expect("loss is scalar");
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| l.grad_vec().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect();

        // numeric gradients input by input
        for (i, _shape) in case.shapes.iter().enumerate() {
            let mut f = |probe: &[f64]| -> f64 {
                let plain: Vec<Tensor> = case
                    .shapes
                    .iter()
                    .zip(&values)
                    .enumerate()
                    .map(|(j, (s, v))| {
                        let data = if j == i { probe.to_vec() } else { v.clone() };
                        Tensor::from_vec(s.clone(), data)
                    })
                    .collect();
                (case.build)(&plain).item()
            };
            let numeric = central_diff(&mut f, &values[i], FD_STEP);
            for (a, n) in analytic[i].iter().zip(&numeric) {
                worst = worst.max(err_score(*a, *n));
                coords += 1;
            }
        }
    }
    GradCheck {
        name: case.name.to_string(),
        trials,
        coords,
        worst_score: worst,
        pass: worst < FD_RTOL,
    }
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let proj: Vec<f64> = uniform(rng, vec![64], 1.0);
    let proj2 = proj.clone();
    let proj3 = proj.clone();
    let proj4 = proj.clone();
    let proj5 = proj.clone();
    let proj6 = proj.clone();
    let proj7 = proj.clone();
    let proj8 = proj.clone();
    let proj9 = proj.clone();
    let proj10 = proj.clone();
    let proj11 = proj.clone();
    let proj12 = proj.clone();
    let proj13 = proj.clone();
    let proj14 = proj.clone();
    let rotary = crate::tensor::RotaryTable::new(4, 8, 10_000.0);
    vec![
        Case {
            name: "add_broadcast",
            shapes: vec![vec![3, 4], vec![4]],
            build: Box::new(move |t| proj_loss(&t[0].add(&t[1]).unwrap(), &proj)),
        },
        Case {
            name: "sub",
            shapes: vec![vec![2, 5], vec![2, 5]],
            build: Box::new(move |t| proj_loss(&t[0].sub(&t[1]).unwrap(), &proj2)),
        },
        Case {
            name: "mul_broadcast",
            shapes: vec![vec![3, 4], vec![4]],
            build: Box::new(move |t| proj_loss(&t[0].mul(&t[1]).unwrap(), &proj3)),
        },
        Case {
            name: "affine",
            shapes: vec![vec![2, 3]],
            build: Box::new(move |t| proj_loss(&t[0].affine(1.7, -0.3), &proj4)),
        },
        Case {
            name: "sigmoid",
            shapes: vec![vec![2, 4]],
            build: Box::new(move |t| proj_loss(&t[0].sigmoid(), &proj5)),
        },
        Case {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            build: Box::new(move |t| proj_loss(&t[0].matmul(&t[1]).unwrap(), &proj6)),
        },
        Case {
            name: "matmul_bt",
            shapes: vec![vec![3, 4], vec![5, 4]],
            build: Box::new(move |t| proj_loss(&t[0].matmul_bt(&t[1]).unwrap(), &proj7)),
        },
        Case {
            name: "softmax_rows",
            shapes: vec![vec![4, 6]],
            build: Box::new(move |t| proj_loss(&t[0].softmax_rows(None).unwrap(), &proj8)),
        },
        Case {
            name: "softmax_rows_causal",
            shapes: vec![vec![4, 4]],
            build: Box::new(move |t| {
                let m = AttnMask::Causal { key_offset: 0 };
                proj_loss(&t[0].softmax_rows(Some(&m)).unwrap(), &proj9)
            }),
        },
        Case {
            name: "rms_norm",
            shapes: vec![vec![3, 8], vec![8]],
            build: Box::new(move |t| proj_loss(&t[0].rms_norm(&t[1], 1e-6).unwrap(), &proj10)),
        },
        Case {
            name: "embed_rows",
            shapes: vec![vec![6, 4]],
            build: Box::new(move |t| {
                proj_loss(&Tensor::embed_rows(&t[0], &[0, 3, 5, 3]).unwrap(), &proj11)
            }),
        },
        Case {
            name: "concat_rows",
            shapes: vec![vec![2, 3], vec![3, 3]],
            build: Box::new(move |t| {
                proj_loss(&Tensor::concat_rows(&[&t[0], &t[1]]).unwrap(), &proj12)
            }),
        },
        Case {
            name: "concat_cols",
            shapes: vec![vec![3, 2], vec![3, 4]],
            build: Box::new(move |t| {
                proj_loss(&Tensor::concat_cols(&[&t[0], &t[1]]).unwrap(), &proj13)
            }),
        },
        Case {
            name: "slice_cols",
            shapes: vec![vec![3, 6]],
            build: Box::new(move |t| proj_loss(&t[0].slice_cols(1, 4), &proj14)),
        },
        Case {
            name: "sum_all",
            shapes: vec![vec![3, 3]],
            build: Box::new(|t| t[0].sum_all()),
        },
        Case {
            name: "mean_all",
            shapes: vec![vec![4, 2]],
            build: Box::new(|t| t[0].mean_all()),
        },
        Case {
            name: "mean_lastdim",
            shapes: vec![vec![3, 5]],
            build: Box::new(|t| t[0].mean_lastdim().sum_all()),
        },
        Case {
            name: "row_scale",
            shapes: vec![vec![3, 4], vec![3]],
            build: Box::new(|t| t[0].row_scale(&t[1]).unwrap().sum_all()),
        },
        Case {
            name: "apply_rotary",
            shapes: vec![vec![3, 8]],
            build: Box::new(move |t| t[0].apply_rotary(&rotary, &[0, 2, 5], 2).sum_all()),
        },
        Case {
            name: "cross_entropy_rows",
            shapes: vec![vec![4, 7]],
            build: Box::new(|t| {
                t[0].cross_entropy_rows(&[Some(2), None, Some(6), Some(0)])
                    .unwrap()
            }),
        },
        Case {
            name: "kl_from_reference",
            shapes: vec![vec![3, 6]],
            build: Box::new(|t| {
                // fixed reference distribution, rows normalized
                let raw = [0.3, 0.1, 0.2, 0.15, 0.15, 0.1];
                let mut p = Vec::new();
                for _ in 0..3 {
                    p.extend_from_slice(&raw);
                }
                let pt = Tensor::from_vec(vec![3, 6], p);
                t[0].kl_from_reference(&pt).unwrap()
            }),
        },
        Case {
            name: "gated_update",
            shapes: vec![
                vec![2, 4],
                vec![2, 4],
                vec![4, 4],
                vec![4, 4],
                vec![4],
            ],
            build: Box::new(|t| {
                let gp = GateParams {
                    w_z: t[2].clone(),
                    u_z: t[3].clone(),
                    b_z: t[4].clone(),
                };
                let (h, _z) = gated_update(&t[0], &t[1], &gp, GateWiring::Standard).unwrap();
                h.mul(&h).unwrap().sum_all()
            }),
        },
        Case {
            name: "composite_chain",
            shapes: vec![vec![3, 4], vec![4, 4], vec![4]],
            build: Box::new(|t| {
                let a = t[0].matmul(&t[1]).unwrap();
                let b = a.rms_norm(&t[2], 1e-6).unwrap();
                let c = b.sigmoid().mul(&b).unwrap();
                let s = c.softmax_rows(None).unwrap();
                s.mul(&s).unwrap().mean_all()
            }),
        },
    ]
}

/// Finite-difference check of every differentiable op plus a composite
/// chain; `trials_per_op` fresh random draws each.
pub fn check_all_ops(seed: u64, trials_per_op: usize) -> Vec<GradCheck> {
    let mut rng = seeded_rng(seed);
    let all = cases(&mut rng);
    all.iter()
        .map(|case| run_case(case, &mut rng, trials_per_op))
        .collect()
}

/// Finite-difference check of the complete training loss on a tiny model:
/// chunked student forward, distillation at every loop against a frozen
/// teacher, and the attention-alignment term. `coords_per_param` random
/// parameter coordinates are perturbed per tensor.
pub fn check_model_loss(seed: u64, coords_per_param: usize) -> crate::error::Result<GradCheck> {
    use crate::config::ModelConfig;
    use crate::loop_lm::LoopLmModel;
    use crate::melt::MeltModel;
    use crate::train::{attention_align_loss, kd_all_loops_loss, TeacherHandle};
    use rand::Rng;

    let cfg = ModelConfig {
        n_layers: 2,
        hidden_dim: 8,
        n_heads: 2,
        loops: 2,
        vocab_size: 7,
        max_seq_len: 8,
    };
    let tokens = [1usize, 5, 2, 6, 3];
    let targets = [None, Some(2), Some(6), Some(3), None];
    let tape = Tape::new();
    let base = LoopLmModel::new(cfg.clone(), seed, &tape)?;
    let teacher = TeacherHandle::new(&base);
    let student = MeltModel::from_base(&base, seed ^ 77, &tape)?;
    let tout = teacher.forward(&tokens)?;

    let loss_of = |student: &MeltModel| -> crate::error::Result<Tensor> {
        let fwd = student.chunk_forward(&tokens, 2, 0.5)?;
        let kd = kd_all_loops_loss(
            &fwd.outputs.per_loop_logits,
            &tout.per_loop_logits,
            &targets,
            0.5,
        )?;
        let align = attention_align_loss(&fwd.outputs.post_attn, &tout.post_attn, 0.1)?;
        kd.add(&align)
    };

    let loss = loss_of(&student)?;
    backward(&loss)?;

    let mut rng = seeded_rng(seed ^ 0x1234);
    let mut worst: f64 = 0.0;
    let mut coords = 0usize;
    for (_name, p) in student.named_params() {
        let analytic = p.grad_vec().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base_vals = p.to_vec();
        for _ in 0..coords_per_param {
            let i = rng.gen_range(0..p.numel());
            let mut probe = base_vals.clone();
            let f = |vals: &[f64], p: &Tensor| -> crate::error::Result<f64> {
                p.set_data(vals);
                let v = tape.paused(|| loss_of(&student));
                Ok(v?.item())
            };
            probe[i] = base_vals[i] + FD_STEP;
            let up = f(&probe, &p)?;
            probe[i] = base_vals[i] - FD_STEP;
            let down = f(&probe, &p)?;
            p.set_data(&base_vals);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(err_score(analytic[i], numeric));
            coords += 1;
        }
    }
    Ok(GradCheck {
        name: "full_model_loss".into(),
        trials: coords,
        coords,
        worst_score: worst,
        pass: worst < FD_RTOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_central_differences() {
        let reports = check_all_ops(7, 5);
        let total: usize = reports.iter().map(|r| r.trials).sum();
        assert!(total >= 100, "need at least 100 trials, got {total}");
        for r in &reports {
            assert!(
                r.pass,
                "{}: worst error score {:.3e} over {} coords",
                r.name, r.worst_score, r.coords
            );
        }
    }

    #[test]
    fn full_model_loss_matches_central_differences() {
        let r = check_model_loss(3, 2).unwrap();
        assert!(r.pass, "worst error score {:.3e}", r.worst_score);
    }
}
