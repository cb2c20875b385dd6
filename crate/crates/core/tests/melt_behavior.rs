//! Behavior of the gated constant-memory model: update-rule contracts, the
//! memory law, and equivalences against the per-loop baseline and against a
//! straight-line scalar reimplementation.

use melt_core::config::ModelConfig;
use melt_core::error::Error;
use melt_core::loop_lm::LoopLmModel;
use melt_core::melt::{
    gated_update, interpolate_kv, variant_update, GateParams, GateVariant, GateWiring,
    LatentKvState, MeltModel,
};
use melt_core::tensor::{Tape, Tensor};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        loops: 3,
        vocab_size: 11,
        max_seq_len: 32,
    }
}

fn row(vals: &[f64]) -> Tensor {
    Tensor::from_vec(vec![1, vals.len()], vals.to_vec())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.to_vec()
        .iter()
        .zip(b.to_vec())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn saturated_gate_retains_state() {
    let d = 4;
    let mut gp = GateParams::zeros(d);
    gp.b_z = Tensor::from_vec(vec![d], vec![40.0; d]);
    let x = row(&[1.0, -2.0, 3.0, 0.5]);
    let h_prev = row(&[0.1, 0.2, 0.3, 0.4]);
    let (h, z) = gated_update(&x, &h_prev, &gp, GateWiring::Standard).unwrap();
    assert!(max_abs_diff(&h, &h_prev) < 1e-12);
    for zi in z.to_vec() {
        assert!((zi - 1.0).abs() < 1e-15);
    }
}

#[test]
fn open_gate_passes_input() {
    let d = 4;
    let mut gp = GateParams::zeros(d);
    gp.b_z = Tensor::from_vec(vec![d], vec![-40.0; d]);
    let x = row(&[1.0, -2.0, 3.0, 0.5]);
    let h_prev = row(&[9.0, 9.0, 9.0, 9.0]);
    let (h, z) = gated_update(&x, &h_prev, &gp, GateWiring::Standard).unwrap();
    assert!(max_abs_diff(&h, &x) < 1e-10);
    for zi in z.to_vec() {
        assert!(zi < 1e-15);
    }
}

#[test]
fn neutral_gate_hits_midpoint() {
    // d=1, all params zero, x=1, h_prev=0: z = sigmoid(0) = 0.5, h = 0.5
    let gp = GateParams::zeros(1);
    let (h, z) = gated_update(&row(&[1.0]), &row(&[0.0]), &gp, GateWiring::Standard).unwrap();
    assert_eq!(z.to_vec(), vec![0.5]);
    assert_eq!(h.to_vec(), vec![0.5]);
}

#[test]
fn gate_values_stay_strictly_inside_unit_interval() {
    // bounded pre-activations keep z strictly interior
    let tape = Tape::new();
    let mut rng = melt_core::init::seeded_rng(5);
    let gp = GateParams::init(&mut rng, 8, &tape);
    for trial in 0..50 {
        let x = Tensor::from_vec(
            vec![1, 8],
            melt_core::init::uniform(&mut rng, vec![8], 3.0),
        );
        let h = Tensor::from_vec(
            vec![1, 8],
            melt_core::init::uniform(&mut rng, vec![8], 3.0),
        );
        let (_, z) = gated_update(&x, &h, &gp, GateWiring::Standard).unwrap();
        for zi in z.to_vec() {
            assert!(zi > 0.0 && zi < 1.0, "trial {trial}: z = {zi}");
        }
    }
}

#[test]
fn variant_trivials() {
    let gp = GateParams::zeros(3);
    let x = row(&[1.0, 2.0, 3.0]);
    let same = x.clone();
    // mean of equal values is unchanged
    let h = variant_update(GateVariant::Mean, &x, &same, 2, &gp, GateWiring::Standard).unwrap();
    assert!(max_abs_diff(&h, &x) < 1e-15);
    // last always takes the input
    let prev = row(&[9.0, 9.0, 9.0]);
    let h = variant_update(GateVariant::Last, &x, &prev, 5, &gp, GateWiring::Standard).unwrap();
    assert_eq!(h.to_vec(), x.to_vec());
    // ema(0.2) hand case: 0.2*1 + 0.8*0 = 0.2
    let h = variant_update(
        GateVariant::Ema { decay: 0.2 },
        &row(&[0.0]),
        &row(&[1.0]),
        2,
        &GateParams::zeros(1),
        GateWiring::Standard,
    )
    .unwrap();
    assert!((h.to_vec()[0] - 0.2).abs() < 1e-15);
}

#[test]
fn running_mean_matches_explicit_average() {
    let gp = GateParams::zeros(2);
    let xs = [row(&[1.0, 4.0]), row(&[3.0, 0.0]), row(&[5.0, 2.0])];
    let mut h = xs[0].clone();
    for (i, x) in xs.iter().enumerate().skip(1) {
        h = variant_update(GateVariant::Mean, x, &h, i + 1, &gp, GateWiring::Standard).unwrap();
    }
    assert!(max_abs_diff(&h, &row(&[3.0, 2.0])) < 1e-12);
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let base = row(&[0.0, 0.0]);
    let melt = row(&[2.0, 2.0]);
    assert_eq!(
        interpolate_kv(&melt, &base, 0.0).unwrap().to_vec(),
        base.to_vec()
    );
    assert_eq!(
        interpolate_kv(&melt, &base, 1.0).unwrap().to_vec(),
        melt.to_vec()
    );
    assert_eq!(
        interpolate_kv(&melt, &base, 0.5).unwrap().to_vec(),
        vec![1.0, 1.0]
    );
    assert!(matches!(
        interpolate_kv(&melt, &base, 1.5),
        Err(Error::AlphaOutOfRange { .. })
    ));
    assert!(matches!(
        interpolate_kv(&melt, &row(&[1.0]), 0.5),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn updating_non_newest_row_is_rejected() {
    let mut state = LatentKvState::new(1, 2);
    state.append_row(0, &[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]);
    state.append_row(0, &[3.0, 4.0], &[0.0, 0.0], &[0.0, 0.0]);
    let r = state.update_row(0, 0, &[9.0, 9.0], &[0.0, 0.0], &[0.0, 0.0]);
    assert!(matches!(r, Err(Error::NonNewestUpdate { row: 0, newest: 1 })));
    state
        .update_row(0, 1, &[9.0, 9.0], &[0.0, 0.0], &[0.0, 0.0])
        .unwrap();
}

#[test]
fn single_loop_matches_baseline_bit_exactly() {
    let tape = Tape::new();
    let mut cfg = tiny_config();
    cfg.loops = 1;
    let base = LoopLmModel::new(cfg.clone(), 21, &tape).unwrap();
    let melt = MeltModel::from_base(&base, 99, &tape).unwrap();
    let tokens = [1, 5, 2, 8, 3, 9, 0];
    let want = base.loop_forward(&tokens).unwrap();
    // both fully parallel (single chunk) and chunked layouts
    for chunk in [tokens.len(), 3] {
        let got = melt.chunk_forward(&tokens, chunk, 1.0).unwrap();
        assert_eq!(
            got.outputs.per_loop_logits[0].to_vec(),
            want.per_loop_logits[0].to_vec(),
            "chunk size {chunk}"
        );
    }
}

#[test]
fn alpha_zero_reproduces_baseline_logits() {
    let tape = Tape::new();
    let cfg = tiny_config();
    let base = LoopLmModel::new(cfg.clone(), 31, &tape).unwrap();
    let melt = MeltModel::from_base(&base, 32, &tape).unwrap();
    let tokens = [4, 1, 7, 2, 9, 3, 6, 5];
    let want = base.loop_forward(&tokens).unwrap();
    for chunk in [tokens.len(), 3] {
        let got = melt.chunk_forward(&tokens, chunk, 0.0).unwrap();
        for t in 0..cfg.loops {
            let diff = max_abs_diff(&got.outputs.per_loop_logits[t], &want.per_loop_logits[t]);
            assert!(diff < 1e-9, "loop {t} chunk {chunk}: {diff}");
        }
    }
}

#[test]
fn chunk_layout_matches_figure_example() {
    // sequence length 4 with chunk size 2 -> exactly 2 chunks
    let tape = Tape::new();
    let melt = MeltModel::new(tiny_config(), 40, &tape).unwrap();
    let out = melt.chunk_forward(&[1, 2, 3, 4], 2, 1.0).unwrap();
    assert_eq!(out.trace.chunks, 2);
    assert!(out.trace.all_prior_finalized);
    assert!(out.trace.prior_rows_read > 0);
    let one = melt.chunk_forward(&[1, 2, 3, 4], 4, 1.0).unwrap();
    assert_eq!(one.trace.chunks, 1);
    assert_eq!(one.trace.prior_rows_read, 0);
}

#[test]
fn chunk_size_one_equals_autoregressive_replay() {
    let tape = Tape::new();
    let melt = MeltModel::new(tiny_config(), 50, &tape).unwrap();
    let tokens = [2, 9, 4, 0, 7, 1];
    let forced = melt.chunk_forward(&tokens, 1, 1.0).unwrap();
    let mut session = melt.session();
    for (i, &tok) in tokens.iter().enumerate() {
        let per_loop = session.push_token(tok).unwrap();
        for (t, got) in per_loop.iter().enumerate() {
            let want = &forced.outputs.per_loop_logits[t];
            for c in 0..11 {
                let diff = (got.get2(0, c) - want.get2(i, c)).abs();
                assert!(diff < 1e-10, "pos {i} loop {t}: {diff}");
            }
        }
    }
}

#[test]
fn constant_memory_law_and_baseline_scaling() {
    let tape = Tape::new();
    for len in [5usize, 12] {
        let tokens: Vec<usize> = (0..len).map(|i| i % 11).collect();
        let mut counts = Vec::new();
        for loops in [1usize, 2, 4, 8] {
            let mut cfg = tiny_config();
            cfg.loops = loops;
            let melt = MeltModel::new(cfg.clone(), 60, &tape).unwrap();
            let mut session = melt.session();
            for &t in &tokens {
                session.push_token(t).unwrap();
            }
            // one row per token per layer regardless of loops
            for l in 0..cfg.n_layers {
                assert_eq!(session.state().rows(l), len);
            }
            assert_eq!(
                session.state().element_count(),
                cfg.n_layers * len * 3 * cfg.hidden_dim
            );
            counts.push(session.state().element_count());

            // per-loop baseline scales linearly in T
            let base = LoopLmModel::new(cfg.clone(), 61, &tape).unwrap();
            let out = base.loop_forward(&tokens).unwrap();
            assert_eq!(
                out.cache_elements,
                cfg.n_layers * len * loops * 2 * cfg.hidden_dim
            );
        }
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn stored_kv_always_tracks_projected_latent() {
    let tape = Tape::new();
    let melt = MeltModel::new(tiny_config(), 70, &tape).unwrap();
    let mut session = melt.session();
    for &t in &[3, 1, 4, 1, 5, 9, 2, 6] {
        session.push_token(t).unwrap();
        let dev = melt.projection_deviation(session.state()).unwrap();
        assert!(dev < 1e-12, "deviation {dev}");
    }
}

#[test]
fn ema_equals_fixed_gate_machinery() {
    let tape = Tape::new();
    let cfg = tiny_config();
    let base = LoopLmModel::new(cfg.clone(), 80, &tape).unwrap();
    let ema = MeltModel::from_base(&base, 81, &tape)
        .unwrap()
        .with_variant(GateVariant::Ema { decay: 0.2 });
    let fixed = MeltModel::from_base(&base, 81, &tape)
        .unwrap()
        .with_variant(GateVariant::FixedGate { value: 0.2 });
    let tokens = [5, 2, 8, 1, 9, 0];
    let a = ema.chunk_forward(&tokens, 3, 1.0).unwrap();
    let b = fixed.chunk_forward(&tokens, 3, 1.0).unwrap();
    for t in 0..cfg.loops {
        let diff = max_abs_diff(
            &a.outputs.per_loop_logits[t],
            &b.outputs.per_loop_logits[t],
        );
        assert!(diff < 1e-12, "loop {t}: {diff}");
    }
}

fn saturate_gates(model: &MeltModel) {
    for g in &model.gates {
        g.w_z.set_data(&vec![0.0; g.w_z.numel()]);
        g.u_z.set_data(&vec![0.0; g.u_z.numel()]);
        g.b_z.set_data(&vec![40.0; g.b_z.numel()]);
    }
}

#[test]
fn saturated_gates_freeze_the_cache_at_loop_one() {
    // with z ~ 1 from loop 2 on, the stored rows never move off their
    // loop-1 values, so a T=3 session stores the same cache as a T=1 one
    let tape = Tape::new();
    let cfg = tiny_config();
    let base = LoopLmModel::new(cfg.clone(), 90, &tape).unwrap();
    let deep = MeltModel::from_base(&base, 91, &tape).unwrap();
    saturate_gates(&deep);
    let mut shallow_cfg = cfg.clone();
    shallow_cfg.loops = 1;
    let shallow = MeltModel::from_parts(
        shallow_cfg,
        base.params.clone_onto(&tape),
        deep.gates.iter().map(|_| GateParams::zeros(16)).collect(),
    );
    let mut a = deep.session();
    let mut b = shallow.session();
    a.push_token(4).unwrap();
    b.push_token(4).unwrap();
    assert_eq!(a.state().loops_done(0, 0), cfg.loops as u32);
    let (ka, _) = a.state().kv_rows(0);
    let (kb, _) = b.state().kv_rows(0);
    for (x, y) in ka.iter().zip(&kb) {
        assert!((x - y).abs() < 1e-12);
    }

    // negative control: swapped complement breaks the freeze
    let broken = MeltModel::from_base(&base, 91, &tape)
        .unwrap()
        .with_wiring(GateWiring::SwappedComplement);
    saturate_gates(&broken);
    let ok = deep.chunk_forward(&[4, 2], 2, 1.0).unwrap();
    let bad = broken.chunk_forward(&[4, 2], 2, 1.0).unwrap();
    let diff = max_abs_diff(
        &ok.outputs.per_loop_logits[cfg.loops - 1],
        &bad.outputs.per_loop_logits[cfg.loops - 1],
    );
    assert!(diff > 1e-6, "swapped wiring should change saturated outputs");
}

/// Straight-line scalar reimplementation of the full forward for a one-layer
/// model, shared with nothing in the library. Tokens are processed one at a
/// time exactly as the inference session defines.
#[test]
fn session_matches_straight_line_oracle() {
    let cfg = ModelConfig {
        n_layers: 1,
        hidden_dim: 4,
        n_heads: 2,
        loops: 3,
        vocab_size: 5,
        max_seq_len: 8,
    };
    let tape = Tape::new();
    let melt = MeltModel::new(cfg.clone(), 123, &tape).unwrap();
    let tokens = [2usize, 4, 1];

    // pull parameters out as plain vectors
    let grab = |name: &str| -> Vec<f64> {
        melt.named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing {name}"))
            .1
            .to_vec()
    };
    let d = 4usize;
    let df = cfg.ffn_dim();
    let hd = 2usize;
    let emb = grab("embed.table");
    let (wq, wk, wv, wo) = (
        grab("layer0.w_q"),
        grab("layer0.w_k"),
        grab("layer0.w_v"),
        grab("layer0.w_o"),
    );
    let (anw, fnw) = (grab("layer0.attn_norm_w"), grab("layer0.ffn_norm_w"));
    let (w1, b1, w2, b2) = (
        grab("layer0.ffn_w1"),
        grab("layer0.ffn_b1"),
        grab("layer0.ffn_w2"),
        grab("layer0.ffn_b2"),
    );
    let (fin_w, head) = (grab("final_norm.w"), grab("lm_head.w"));
    let (wz, uz, bz) = (
        grab("gate.layer0.w_z"),
        grab("gate.layer0.u_z"),
        grab("gate.layer0.b_z"),
    );

    let vecmat = |v: &[f64], m: &[f64], din: usize, dout: usize| -> Vec<f64> {
        (0..dout)
            .map(|j| (0..din).map(|i| v[i] * m[i * dout + j]).sum())
            .collect()
    };
    let rms = |v: &[f64], w: &[f64]| -> Vec<f64> {
        let ms = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        v.iter().zip(w).map(|(a, b)| a * inv * b).collect()
    };
    let rotate = |v: &[f64], pos: usize| -> Vec<f64> {
        let mut out = v.to_vec();
        for h in 0..2 {
            for i in 0..hd / 2 {
                let freq = 10_000f64.powf(-2.0 * i as f64 / hd as f64);
                let ang = pos as f64 * freq;
                let (c, s) = (ang.cos(), ang.sin());
                let i0 = h * hd + 2 * i;
                let (a, b) = (v[i0], v[i0 + 1]);
                out[i0] = a * c - b * s;
                out[i0 + 1] = a * s + b * c;
            }
        }
        out
    };
    let sigmoid = |u: f64| 1.0 / (1.0 + (-u).exp());

    let mut hs: Vec<Vec<f64>> = Vec::new(); // latent rows
    let mut ks: Vec<Vec<f64>> = Vec::new();
    let mut vs: Vec<Vec<f64>> = Vec::new();
    let mut oracle_logits = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate() {
        let mut x: Vec<f64> = emb[tok * d..(tok + 1) * d].to_vec();
        for t in 0..cfg.loops {
            let u = rms(&x, &anw);
            let h = if t == 0 {
                hs.push(u.clone());
                ks.push(vec![0.0; d]);
                vs.push(vec![0.0; d]);
                u.clone()
            } else {
                let prev = hs[pos].clone();
                let zin: Vec<f64> = {
                    let a = vecmat(&u, &wz, d, d);
                    let b = vecmat(&prev, &uz, d, d);
                    (0..d).map(|i| a[i] + b[i] + bz[i]).collect()
                };
                let z: Vec<f64> = zin.iter().map(|&p| sigmoid(p)).collect();
                let h: Vec<f64> = (0..d)
                    .map(|i| z[i] * prev[i] + (1.0 - z[i]) * u[i])
                    .collect();
                hs[pos] = h.clone();
                h
            };
            ks[pos] = vecmat(&h, &wk, d, d);
            vs[pos] = vecmat(&h, &wv, d, d);
            // attention of the single query over rows 0..=pos
            let q = rotate(&vecmat(&u, &wq, d, d), pos);
            let mut ctx = vec![0.0; d];
            for hh in 0..2 {
                let mut scores = Vec::new();
                for (j, krow) in ks.iter().enumerate().take(pos + 1) {
                    let kr = rotate(krow, j);
                    let s: f64 = (0..hd).map(|c| q[hh * hd + c] * kr[hh * hd + c]).sum();
                    scores.push(s / (hd as f64).sqrt());
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for c in 0..hd {
                        ctx[hh * hd + c] += e / sum * vs[j][hh * hd + c];
                    }
                }
            }
            let attn = vecmat(&ctx, &wo, d, d);
            let x_attn: Vec<f64> = (0..d).map(|i| attn[i] + x[i]).collect();
            let f = rms(&x_attn, &fnw);
            let h1: Vec<f64> = {
                let mut v = vecmat(&f, &w1, d, df);
                for (i, b) in v.iter_mut().zip(&b1) {
                    *i += b;
                }
                v
            };
            let act: Vec<f64> = h1.iter().map(|&a| a * sigmoid(a)).collect();
            let ffn: Vec<f64> = {
                let mut v = vecmat(&act, &w2, df, d);
                for (i, b) in v.iter_mut().zip(&b2) {
                    *i += b;
                }
                v
            };
            x = (0..d).map(|i| ffn[i] + x_attn[i]).collect();
        }
        let fin = rms(&x, &fin_w);
        oracle_logits.push(vecmat(&fin, &head, d, cfg.vocab_size));
    }

    let mut session = melt.session();
    for (pos, &tok) in tokens.iter().enumerate() {
        let per_loop = session.push_token(tok).unwrap();
        let got = per_loop.last().unwrap().to_vec();
        for (a, b) in got.iter().zip(&oracle_logits[pos]) {
            assert!((a - b).abs() < 1e-12, "pos {pos}: {a} vs {b}");
        }
    }
}
