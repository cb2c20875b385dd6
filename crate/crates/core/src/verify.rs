//! Executable checks of the gate's gradient-stability story: the three-term
//! Jacobian decomposition, spectral behavior in the saturated regime, the
//! gradient superhighway across loops, and structural equivalence oracles
//! spanning the other modules.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcheck::central_diff;
use crate::loop_lm::LoopLmModel;
use crate::melt::{
    gated_update, variant_update, GateParams, GateVariant, GateWiring, MeltModel,
};
use crate::tensor::{backward, Tape, Tensor};

/// One verification check: name, pass/fail, the measured metric and the
/// tolerance it was held to (absent for measure-only probes).
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: String,
    pub metric: f64,
    pub tolerance: Option<f64>,
}

impl CheckResult {
    fn gated(name: &str, metric: f64, tolerance: f64, pass: bool) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            status: if pass { "pass" } else { "fail" }.to_string(),
            metric,
            tolerance: Some(tolerance),
        }
    }

    fn measured(name: &str, metric: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            status: "pass".to_string(),
            metric,
            tolerance: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

/// Analytic Jacobian of the gated update w.r.t. the previous latent state,
/// decomposed as `diag(z) + diag(h_prev - x) dz/dh + diag(1 - z) dx/dh`.
/// Entry `(i, j)` is `dh_i / dh_prev_j`; `dz/dh = diag(sigmoid') U_z^T`.
/// In this per-loop setting the layer input is held fixed, so the third
/// term is zero.
pub struct JacobianReport {
    pub d: usize,
    pub j: Vec<f64>,
    pub term1: Vec<f64>,
    pub term2: Vec<f64>,
    pub term3: Vec<f64>,
    pub spectral_radius: f64,
    pub deviation_from_identity: f64,
}

pub fn gate_jacobian(x: &[f64], h_prev: &[f64], gp: &GateParams) -> Result<JacobianReport> {
    let d = x.len();
    assert_eq!(h_prev.len(), d);
    let w = gp.w_z.to_vec();
    let u = gp.u_z.to_vec();
    let b = gp.b_z.to_vec();
    let mut pre = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for j in 0..d {
            s += x[j] * w[j * d + i] + h_prev[j] * u[j * d + i];
        }
        pre[i] = s;
    }
    let z: Vec<f64> = pre.iter().map(|&p| 1.0 / (1.0 + (-p).exp())).collect();
    let mut term1 = vec![0.0; d * d];
    let mut term2 = vec![0.0; d * d];
    let term3 = vec![0.0; d * d];
    for i in 0..d {
        term1[i * d + i] = z[i];
        let sp = z[i] * (1.0 - z[i]);
        for j in 0..d {
            term2[i * d + j] = (h_prev[i] - x[i]) * sp * u[j * d + i];
        }
    }
    let j: Vec<f64> = (0..d * d)
        .map(|k| term1[k] + term2[k] + term3[k])
        .collect();
    let rho = spectral_radius(&j, d)?;
    let mut dev = 0.0;
    for r in 0..d {
        for c in 0..d {
            let idm = if r == c { 1.0 } else { 0.0 };
            let e = j[r * d + c] - idm;
            dev += e * e;
        }
    }
    Ok(JacobianReport {
        d,
        j,
        term1,
        term2,
        term3,
        spectral_radius: rho,
        deviation_from_identity: dev.sqrt(),
    })
}

/// Largest eigenvalue magnitude by power iteration: deterministic seeded
/// start vector, convergence when the estimate moves less than 1e-12
/// (relative), capped at 10_000 iterations. Reliable for the near-diagonal
/// and symmetric matrices used here; complex-dominant pairs may oscillate.
pub fn spectral_radius(m: &[f64], d: usize) -> Result<f64> {
    if m.len() != d * d {
        return Err(Error::NonSquareMatrix {
            rows: if d == 0 { 0 } else { m.len() / d },
            cols: d,
        });
    }
    if d == 0 {
        return Ok(0.0);
    }
    let mut rng = crate::init::seeded_rng(0x5eed);
    let mut v: Vec<f64> = crate::init::uniform(&mut rng, vec![d], 1.0);
    let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= norm0);
    let mut rho = 0.0;
    for _ in 0..10_000 {
        let mut next = vec![0.0; d];
        for i in 0..d {
            let row = &m[i * d..(i + 1) * d];
            next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        next.iter_mut().for_each(|a| *a /= norm);
        let moved = (norm - rho).abs();
        rho = norm;
        v = next;
        if moved < 1e-12 * rho.max(1.0) {
            break;
        }
    }
    Ok(rho)
}

/// Gate parameters that saturate to `z = 1 - epsilon` exactly: zero
/// couplings, bias at the matching sigmoid pre-image.
pub fn saturated_gate_params(d: usize, epsilon: f64) -> GateParams {
    assert!(epsilon > 0.0 && epsilon < 1.0);
    let b = ((1.0 - epsilon) / epsilon).ln();
    let mut gp = GateParams::zeros(d);
    gp.b_z = Tensor::from_vec(vec![d], vec![b; d]);
    gp
}

#[derive(Debug, Clone, Copy)]
pub struct SuperhighwayOutcome {
    /// `|dL/dh_0| / |dL/dh_T|` under the quadratic probe loss.
    pub ratio: f64,
    pub min_z: f64,
}

/// Run `T` latent updates with fixed per-loop inputs, backprop the probe
/// loss `L = 0.5 * |h_T|^2` (whose gradient at `h_T` is `h_T` itself), and
/// report the input/output gradient-norm ratio. For the learned gate the
/// saturation precondition `min z >= 1 - epsilon` is enforced during the
/// forward pass; violations name the offending loop and dimension.
pub fn superhighway_check(
    gates: &GateParams,
    variant: GateVariant,
    xs: &[Vec<f64>],
    h0: &[f64],
    epsilon: f64,
) -> Result<SuperhighwayOutcome> {
    let d = h0.len();
    let tape = Tape::new();
    let h0_t = Tensor::param(vec![1, d], h0.to_vec(), &tape);
    let mut h = h0_t.clone();
    let mut min_z = 1.0f64;
    let required = 1.0 - epsilon;
    for (li, xv) in xs.iter().enumerate() {
        let x = Tensor::from_vec(vec![1, d], xv.clone());
        match variant {
            GateVariant::Gated => {
                let (next, z) = gated_update(&x, &h, gates, GateWiring::Standard)?;
                for (dim, zi) in z.to_vec().iter().enumerate() {
                    min_z = min_z.min(*zi);
                    // small slack for the sigmoid round-trip at the preimage
                    if *zi < required - 1e-12 {
                        return Err(Error::SaturationUnmet {
                            loop_index: li + 1,
                            dim,
                            z: *zi,
                            required,
                        });
                    }
                }
                h = next;
            }
            GateVariant::FixedGate { value } => {
                min_z = min_z.min(value);
                h = variant_update(variant, &x, &h, li + 2, gates, GateWiring::Standard)?;
            }
            other => {
                return Err(Error::Config(format!(
                    "superhighway probe expects a gated variant, got {}",
                    other.name()
                )))
            }
        }
    }
    let loss = h.mul(&h)?.sum_all().scale(0.5);
    backward(&loss)?;
    let grad_out: f64 = h.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
    let grad_in: f64 = h0_t
        .grad_vec()
        .expect("h0 participates")
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    Ok(SuperhighwayOutcome {
        ratio: if grad_out == 0.0 { 0.0 } else { grad_in / grad_out },
        min_z,
    })
}

fn fd_score(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> f64 {
    (analytic - numeric).abs() / (atol / rtol + analytic.abs().max(numeric.abs()))
}

/// Appendix-style Jacobian suite: limit behavior under saturation, the
/// three-term decomposition against central differences, saturation
/// monotonicity, and the contractivity condition. Also measures (without
/// asserting) the full-network Jacobian where the layer input feeds back
/// through attention.
pub fn jacobian_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = crate::init::seeded_rng(seed);
    let d = 8usize;
    let mut out = Vec::new();

    // hard saturation: J -> I
    let mut gp = GateParams::zeros(d);
    gp.b_z = Tensor::from_vec(vec![d], vec![40.0; d]);
    let x = crate::init::uniform(&mut rng, vec![d], 1.0);
    let hp = crate::init::uniform(&mut rng, vec![d], 1.0);
    let rep = gate_jacobian(&x, &hp, &gp)?;
    out.push(CheckResult::gated(
        "jacobian_saturated_identity",
        rep.deviation_from_identity,
        1e-10,
        rep.deviation_from_identity <= 1e-10,
    ));

    // open gate: J -> 0 (sigmoid' vanishes, diag(z) vanishes)
    let mut gp_open = GateParams::zeros(d);
    gp_open.b_z = Tensor::from_vec(vec![d], vec![-40.0; d]);
    let rep_open = gate_jacobian(&x, &hp, &gp_open)?;
    let norm: f64 = rep_open.j.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.push(CheckResult::gated(
        "jacobian_open_gate_vanishes",
        norm,
        1e-10,
        norm <= 1e-10,
    ));

    // decomposition sums to the finite-difference Jacobian
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let tape = Tape::new();
        let gp = GateParams::init(&mut rng, d, &tape);
        let x = crate::init::uniform(&mut rng, vec![d], 1.0);
        let hp = crate::init::uniform(&mut rng, vec![d], 1.0);
        let rep = gate_jacobian(&x, &hp, &gp)?;
        for i in 0..d {
            let gp_ref = &gp;
            let x_ref = &x;
            let mut f = |probe: &[f64]| -> f64 {
                let xt = Tensor::from_vec(vec![1, d], x_ref.clone());
                let ht = Tensor::from_vec(vec![1, d], probe.to_vec());
                let (h, _) = gated_update(&xt, &ht, gp_ref, GateWiring::Standard).unwrap();
                h.to_vec()[i]
            };
            let row = central_diff(&mut f, &hp, 1e-5);
            for jj in 0..d {
                worst = worst.max(fd_score(rep.j[i * d + jj], row[jj], 1e-5, 1e-8));
            }
        }
    }
    out.push(CheckResult::gated(
        "jacobian_three_term_vs_finite_difference",
        worst,
        1e-5,
        worst < 1e-5,
    ));

    // deviation from identity shrinks monotonically as the bias grows
    let mut devs = Vec::new();
    let tape = Tape::new();
    let base = GateParams::init(&mut rng, d, &tape);
    for b in [0.0, 5.0, 10.0, 20.0, 40.0] {
        let gp = GateParams {
            w_z: base.w_z.detach(),
            u_z: base.u_z.detach(),
            b_z: Tensor::from_vec(vec![d], vec![b; d]),
        };
        devs.push(gate_jacobian(&x, &hp, &gp)?.deviation_from_identity);
    }
    let monotone = devs.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    out.push(CheckResult::gated(
        "jacobian_saturation_monotonicity",
        devs.last().copied().unwrap_or(0.0),
        f64::INFINITY,
        monotone,
    ));

    // spectral radius stays near or below one for small recurrent coupling
    let mut worst_rho = 0.0f64;
    for _ in 0..20 {
        let tape = Tape::new();
        let gp = GateParams::init(&mut rng, d, &tape); // |U| entries <= 0.02
        let x = crate::init::uniform(&mut rng, vec![d], 1.0);
        let hp = crate::init::uniform(&mut rng, vec![d], 1.0);
        let rep = gate_jacobian(&x, &hp, &gp)?;
        worst_rho = worst_rho.max(rep.spectral_radius);
    }
    out.push(CheckResult::gated(
        "jacobian_spectral_radius_bounded",
        worst_rho,
        1.0 + 1e-6,
        worst_rho <= 1.0 + 1e-6,
    ));

    // spectral radius unit tests in closed form
    let eye: Vec<f64> = (0..d * d)
        .map(|k| if k / d == k % d { 1.0 } else { 0.0 })
        .collect();
    let rho_eye = spectral_radius(&eye, d)?;
    out.push(CheckResult::gated(
        "spectral_radius_identity",
        rho_eye,
        1e-9,
        (rho_eye - 1.0).abs() < 1e-9,
    ));
    let diag = vec![0.5, 0.0, 0.0, 0.3];
    let rho_diag = spectral_radius(&diag, 2)?;
    out.push(CheckResult::gated(
        "spectral_radius_diagonal",
        rho_diag,
        1e-9,
        (rho_diag - 0.5).abs() < 1e-9,
    ));

    // measured only: full-network Jacobian with the layer input feeding
    // back through attention (third term active); no stated bound
    let probe = full_network_jacobian_probe(seed)?;
    out.push(CheckResult::measured(
        "full_network_jacobian_spectral_radius",
        probe,
    ));

    Ok(out)
}

/// Finite-difference spectral radius of the map `h_prev -> h_next` through
/// one full block where the token's own K/V row derives from `h_prev`
/// (the regime the idealized decomposition excludes). Measured only.
pub fn full_network_jacobian_probe(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        n_layers: 1,
        hidden_dim: 8,
        n_heads: 2,
        loops: 2,
        vocab_size: 7,
        max_seq_len: 8,
    };
    let tape = Tape::new();
    let model = MeltModel::new(cfg.clone(), seed, &tape)?;
    let d = cfg.hidden_dim;
    let mut rng = crate::init::seeded_rng(seed ^ 0xabcd);
    let x_prev = crate::init::uniform(&mut rng, vec![d], 0.5);
    let h_base = crate::init::uniform(&mut rng, vec![d], 0.5);

    let step = |h_prev: &[f64]| -> Vec<f64> {
        tape.paused(|| {
            let layer = &model.stack.layers[0];
            let x = Tensor::from_vec(vec![1, d], x_prev.clone());
            let hp = Tensor::from_vec(vec![1, d], h_prev.to_vec());
            // own-row K/V from the previous latent feeds this loop's input
            let k = hp.matmul(&layer.w_k).unwrap();
            let v = hp.matmul(&layer.w_v).unwrap();
            let u = crate::loop_lm::normed(layer, &x).unwrap();
            let io = crate::loop_lm::block_attn_ffn(
                layer,
                &x,
                &u,
                &[0],
                &k,
                &[0],
                &v,
                cfg.n_heads,
                &model.rotary,
            )
            .unwrap();
            let u_next = crate::loop_lm::normed(layer, &io.x_next).unwrap();
            let (h_next, _) =
                gated_update(&u_next, &hp, &model.gates[0], GateWiring::Standard).unwrap();
            h_next.to_vec()
        })
    };

    let mut jac = vec![0.0; d * d];
    for i in 0..d {
        let mut f = |probe: &[f64]| -> f64 { step(probe)[i] };
        let row = central_diff(&mut f, &h_base, 1e-5);
        jac[i * d..(i + 1) * d].copy_from_slice(&row);
    }
    spectral_radius(&jac, d)
}

/// Superhighway suite: exact gradient preservation under a clamped unit
/// gate, the `(1 - eps)^T` bound at the saturation preimage, a decaying
/// unsaturated control, and the precondition guard.
pub fn superhighway_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = crate::init::seeded_rng(seed);
    let d = 8usize;
    let h0 = crate::init::uniform(&mut rng, vec![d], 1.0);
    let xs: Vec<Vec<f64>> = (0..64)
        .map(|_| crate::init::uniform(&mut rng, vec![d], 1.0))
        .collect();
    let mut out = Vec::new();

    // clamped z = 1: the Jacobian product is exactly the identity
    let mut worst = 0.0f64;
    for t in [1usize, 4, 16, 64] {
        let o = superhighway_check(
            &GateParams::zeros(d),
            GateVariant::FixedGate { value: 1.0 },
            &xs[..t],
            &h0,
            0.0,
        )?;
        worst = worst.max((o.ratio - 1.0).abs());
    }
    out.push(CheckResult::gated(
        "superhighway_clamped_identity",
        worst,
        0.0,
        worst == 0.0,
    ));

    // z = 1 - eps: ratio within [(1-eps)^T - tol, 1 + tol]
    let eps = 1e-3;
    let t = 8usize;
    let gp = saturated_gate_params(d, eps);
    let o = superhighway_check(&gp, GateVariant::Gated, &xs[..t], &h0, eps)?;
    let bound = (1.0 - eps).powi(t as i32);
    let pass = o.ratio >= bound - 1e-6 && o.ratio <= 1.0 + 1e-6;
    out.push(CheckResult::gated(
        "superhighway_saturated_bound",
        o.ratio,
        bound - 1e-6,
        pass,
    ));
    let saturated_ratio = o.ratio;

    // unsaturated control: z ~ 0.5 decays fast and sits strictly below
    let o = superhighway_check(
        &GateParams::zeros(d),
        GateVariant::Gated,
        &xs[..16],
        &h0,
        1.0 - 1e-9,
    )?;
    let pass = o.ratio < 0.9 && o.ratio < saturated_ratio;
    out.push(CheckResult::gated(
        "superhighway_unsaturated_control",
        o.ratio,
        0.9,
        pass,
    ));

    // precondition guard: unsaturated gates with a tight eps must error
    let guard = superhighway_check(
        &GateParams::zeros(d),
        GateVariant::Gated,
        &xs[..4],
        &h0,
        1e-3,
    );
    let fired = matches!(guard, Err(Error::SaturationUnmet { .. }));
    out.push(CheckResult::gated(
        "superhighway_precondition_guard",
        if fired { 1.0 } else { 0.0 },
        1.0,
        fired,
    ));

    Ok(out)
}

fn max_tensor_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.to_vec()
        .iter()
        .zip(b.to_vec())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Structural equivalence oracles over a tiny model: interpolation at zero
/// reproduces the baseline, a single loop is the baseline bit-exactly,
/// chunk size one equals autoregressive replay, the EMA variant equals the
/// clamped-gate machinery, the memory law holds exactly, saturated gates
/// freeze the cache, gates stay inside (0,1), and stored K/V always equal
/// the projected latent. `wiring` lets callers inject the broken gate
/// combine as a negative control.
pub fn equivalence_suite(seed: u64, wiring: GateWiring) -> Result<Vec<CheckResult>> {
    let cfg = ModelConfig::desk();
    let tokens: Vec<usize> = vec![1, 9, 4, 22, 7, 31, 2, 15, 6, 28, 11, 3];
    let mut out = Vec::new();

    // interpolation at zero reproduces the per-loop baseline
    let tape = Tape::new();
    let base = LoopLmModel::new(cfg.clone(), seed, &tape)?;
    let melt = MeltModel::from_base(&base, seed ^ 1, &tape)?.with_wiring(wiring);
    let want = base.loop_forward(&tokens)?;
    let got = melt.chunk_forward(&tokens, 5, 0.0)?;
    let mut diff = 0.0f64;
    for t in 0..cfg.loops {
        diff = diff.max(max_tensor_diff(
            &got.outputs.per_loop_logits[t],
            &want.per_loop_logits[t],
        ));
    }
    out.push(CheckResult::gated("alpha_zero_equals_baseline", diff, 1e-9, diff < 1e-9));

    // one loop is the baseline, bit for bit
    let mut cfg1 = cfg.clone();
    cfg1.loops = 1;
    let base1 = LoopLmModel::new(cfg1.clone(), seed ^ 2, &tape)?;
    let melt1 = MeltModel::from_base(&base1, seed ^ 3, &tape)?.with_wiring(wiring);
    let want1 = base1.loop_forward(&tokens)?;
    let got1 = melt1.chunk_forward(&tokens, 5, 1.0)?;
    let exact = got1.outputs.per_loop_logits[0].to_vec() == want1.per_loop_logits[0].to_vec();
    out.push(CheckResult::gated(
        "single_loop_equals_baseline_bit_exact",
        if exact { 0.0 } else { 1.0 },
        0.0,
        exact,
    ));

    // chunk size one equals token-by-token replay
    let melt_ar = MeltModel::new(cfg.clone(), seed ^ 4, &tape)?.with_wiring(wiring);
    let forced = melt_ar.chunk_forward(&tokens, 1, 1.0)?;
    let mut session = melt_ar.session();
    let mut diff = 0.0f64;
    for (i, &tok) in tokens.iter().enumerate() {
        let per_loop = session.push_token(tok)?;
        for (t, row) in per_loop.iter().enumerate() {
            for c in 0..cfg.vocab_size {
                diff = diff
                    .max((row.get2(0, c) - forced.outputs.per_loop_logits[t].get2(i, c)).abs());
            }
        }
    }
    out.push(CheckResult::gated(
        "chunk_one_equals_autoregressive_replay",
        diff,
        1e-10,
        diff < 1e-10,
    ));

    // EMA variant equals the gated machinery with the gate clamped
    let base_e = LoopLmModel::new(cfg.clone(), seed ^ 5, &tape)?;
    let ema = MeltModel::from_base(&base_e, seed ^ 6, &tape)?
        .with_variant(GateVariant::Ema { decay: 0.2 });
    let fixed = MeltModel::from_base(&base_e, seed ^ 6, &tape)?
        .with_variant(GateVariant::FixedGate { value: 0.2 })
        .with_wiring(wiring);
    let a = ema.chunk_forward(&tokens, 5, 1.0)?;
    let b = fixed.chunk_forward(&tokens, 5, 1.0)?;
    let mut diff = 0.0f64;
    for t in 0..cfg.loops {
        diff = diff.max(max_tensor_diff(
            &a.outputs.per_loop_logits[t],
            &b.outputs.per_loop_logits[t],
        ));
    }
    out.push(CheckResult::gated(
        "ema_equals_fixed_gate",
        diff,
        1e-12,
        diff < 1e-12,
    ));

    // memory law: latent rows per layer equal the token count for every
    // loop depth, and the baseline cache scales linearly
    let mut law_ok = true;
    let mut counts = Vec::new();
    for loops in [1usize, 2, 4, 8] {
        let mut c = cfg.clone();
        c.loops = loops;
        let m = MeltModel::new(c.clone(), seed ^ 7, &tape)?.with_wiring(wiring);
        let mut s = m.session();
        for &t in &tokens {
            s.push_token(t)?;
        }
        counts.push(s.state().element_count());
        law_ok &= s.state().element_count() == c.n_layers * tokens.len() * 3 * c.hidden_dim;
        let b = LoopLmModel::new(c.clone(), seed ^ 8, &tape)?;
        let fw = b.loop_forward(&tokens)?;
        law_ok &= fw.cache_elements == c.n_layers * tokens.len() * loops * 2 * c.hidden_dim;
    }
    law_ok &= counts.windows(2).all(|w| w[0] == w[1]);
    out.push(CheckResult::gated(
        "constant_memory_law",
        if law_ok { 0.0 } else { 1.0 },
        0.0,
        law_ok,
    ));

    // saturated gates freeze the stored cache at its loop-1 value
    let base_s = LoopLmModel::new(cfg.clone(), seed ^ 9, &tape)?;
    let deep = MeltModel::from_base(&base_s, seed ^ 10, &tape)?.with_wiring(wiring);
    for g in &deep.gates {
        g.w_z.set_data(&vec![0.0; g.w_z.numel()]);
        g.u_z.set_data(&vec![0.0; g.u_z.numel()]);
        g.b_z.set_data(&vec![40.0; g.b_z.numel()]);
    }
    let mut c1 = cfg.clone();
    c1.loops = 1;
    let shallow = MeltModel::from_parts(
        c1,
        base_s.params.clone_onto(&tape),
        (0..cfg.n_layers)
            .map(|_| GateParams::zeros(cfg.hidden_dim))
            .collect(),
    );
    let mut sa = deep.session();
    let mut sb = shallow.session();
    let mut diff = 0.0f64;
    for &t in &tokens[..4] {
        sa.push_token(t)?;
        sb.push_token(t)?;
    }
    for l in 0..cfg.n_layers {
        let (ka, va) = sa.state().kv_rows(l);
        let (kb, vb) = sb.state().kv_rows(l);
        for (x, y) in ka.iter().zip(&kb).chain(va.iter().zip(&vb)) {
            diff = diff.max((x - y).abs());
        }
    }
    out.push(CheckResult::gated(
        "saturated_gates_freeze_cache",
        diff,
        1e-12,
        diff < 1e-12,
    ));

    // gate outputs stay strictly inside (0, 1) for bounded inputs
    let mut rng = crate::init::seeded_rng(seed ^ 11);
    let gp = GateParams::init(&mut rng, cfg.hidden_dim, &tape);
    let mut in_range = true;
    let mut worst_margin = 1.0f64;
    for _ in 0..50 {
        let x = Tensor::from_vec(
            vec![1, cfg.hidden_dim],
            crate::init::uniform(&mut rng, vec![cfg.hidden_dim], 3.0),
        );
        let h = Tensor::from_vec(
            vec![1, cfg.hidden_dim],
            crate::init::uniform(&mut rng, vec![cfg.hidden_dim], 3.0),
        );
        let (_, z) = gated_update(&x, &h, &gp, GateWiring::Standard)?;
        for zi in z.to_vec() {
            in_range &= zi > 0.0 && zi < 1.0;
            worst_margin = worst_margin.min(zi.min(1.0 - zi));
        }
    }
    out.push(CheckResult::gated(
        "gate_range_strict",
        worst_margin,
        0.0,
        in_range,
    ));

    // stored K/V rows always equal the projected latent rows
    let m = MeltModel::new(cfg.clone(), seed ^ 12, &tape)?.with_wiring(wiring);
    let mut s = m.session();
    let mut worst = 0.0f64;
    for &t in &tokens[..6] {
        s.push_token(t)?;
        worst = worst.max(m.projection_deviation(s.state())?);
    }
    out.push(CheckResult::gated(
        "projection_consistency",
        worst,
        1e-12,
        worst < 1e-12,
    ));

    Ok(out)
}
