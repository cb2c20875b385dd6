use super::*;
use crate::error::Error;

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::from_vec(vec![rows, cols], data.to_vec())
}

/// Scalar-loop softmax oracle, independent of the op's vectorized path.
fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len());
    let mut sum = 0.0;
    for &v in row {
        sum += v.exp();
    }
    for &v in row {
        out.push(v.exp() / sum);
    }
    out
}

#[test]
fn matmul_identity_is_exact() {
    let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let i = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let out = i.matmul(&a).unwrap();
    assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    let out = a.matmul(&i).unwrap();
    assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_case() {
    // [[1,2]] x [[3],[4]] = [[1*3 + 2*4]] = [[11]]
    let a = t2(1, 2, &[1.0, 2.0]);
    let b = t2(2, 1, &[3.0, 4.0]);
    assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![2, 3]);
    match a.matmul(&b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn elementwise_hand_case() {
    let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
    let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]);
    assert_eq!(a.mul(&b).unwrap().to_vec(), vec![3.0, 8.0]);
    assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    assert_eq!(a.sub(&b).unwrap().to_vec(), vec![-2.0, -2.0]);
    assert_eq!(a.scale(2.0).to_vec(), vec![2.0, 4.0]);
}

#[test]
fn broadcast_row_over_matrix() {
    let x = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = Tensor::from_vec(vec![3], vec![10.0, 20.0, 30.0]);
    let out = x.add(&b).unwrap();
    assert_eq!(out.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    // scalar broadcasts everywhere
    let s = Tensor::scalar(1.0);
    assert_eq!(
        x.add(&s).unwrap().to_vec(),
        vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0]
    );
    // non-suffix shapes are rejected
    let bad = Tensor::from_vec(vec![2], vec![0.0, 0.0]);
    assert!(matches!(x.add(&bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn sigmoid_trivials() {
    let x = Tensor::from_vec(vec![3], vec![0.0, 40.0, -40.0]);
    let y = x.sigmoid().to_vec();
    assert_eq!(y[0], 0.5);
    assert!((y[1] - 1.0).abs() < 1e-15);
    assert!(y[2] > 0.0 && y[2] < 1e-15);
}

#[test]
fn softmax_matches_scalar_loop_oracle() {
    let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
    let y = x.softmax_rows(None).unwrap().to_vec();
    let want = softmax_oracle(&[1.0, 2.0, 3.0]);
    for (a, b) in y.iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn softmax_symmetry_and_mask() {
    let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]);
    assert_eq!(x.softmax_rows(None).unwrap().to_vec(), vec![0.5, 0.5]);

    // masked position absorbs all mass onto the visible one
    let x = t2(1, 2, &[3.0, 100.0]);
    let mask = AttnMask::Dense {
        rows: 1,
        cols: 2,
        visible: vec![true, false],
    };
    assert_eq!(x.softmax_rows(Some(&mask)).unwrap().to_vec(), vec![1.0, 0.0]);
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let vals = [0.3, -1.2, 4.0, 2.2, -0.7, 0.0, 8.5, -3.3];
    let x = t2(2, 4, &vals);
    let y = x.softmax_rows(None).unwrap().to_vec();
    for r in 0..2 {
        let s: f64 = y[r * 4..(r + 1) * 4].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let shifted: Vec<f64> = vals.iter().map(|v| v + 7.5).collect();
    let y2 = t2(2, 4, &shifted).softmax_rows(None).unwrap().to_vec();
    for (a, b) in y.iter().zip(&y2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_fully_masked_row_is_error() {
    let x = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let mask = AttnMask::Dense {
        rows: 2,
        cols: 2,
        visible: vec![true, true, false, false],
    };
    match x.softmax_rows(Some(&mask)) {
        Err(Error::FullyMaskedRow { row }) => assert_eq!(row, 1),
        other => panic!("expected fully-masked error, got {other:?}"),
    }
}

#[test]
fn rms_norm_trivials_and_oracle() {
    let w = Tensor::from_vec(vec![4], vec![1.0; 4]);
    // all zeros stay zeros
    let x = t2(1, 4, &[0.0; 4]);
    assert_eq!(x.rms_norm(&w, 1e-8).unwrap().to_vec(), vec![0.0; 4]);

    // mean-square one passes through as eps -> 0
    let x = t2(1, 4, &[1.0, -1.0, 1.0, -1.0]);
    let y = x.rms_norm(&w, 1e-15).unwrap().to_vec();
    for (a, b) in y.iter().zip(&[1.0, -1.0, 1.0, -1.0]) {
        assert!((a - b).abs() < 1e-9);
    }

    // random row against a scalar-loop oracle
    let row = [0.3, -2.0, 1.7, 0.4];
    let wv = [1.2, 0.8, -0.5, 2.0];
    let eps = 1e-6;
    let ms = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
    let want: Vec<f64> = row
        .iter()
        .zip(&wv)
        .map(|(x, w)| x / (ms + eps).sqrt() * w)
        .collect();
    let y = t2(1, 4, &row)
        .rms_norm(&Tensor::from_vec(vec![4], wv.to_vec()), eps)
        .unwrap()
        .to_vec();
    for (a, b) in y.iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn embed_rows_lookup_and_errors() {
    let table = t2(4, 2, &[0.0, 0.1, 1.0, 1.1, 2.0, 2.1, 3.0, 3.1]);
    let out = Tensor::embed_rows(&table, &[3, 1, 1]).unwrap();
    assert_eq!(out.shape(), vec![3, 2]);
    assert_eq!(out.to_vec(), vec![3.0, 3.1, 1.0, 1.1, 1.0, 1.1]);

    let empty = Tensor::embed_rows(&table, &[]).unwrap();
    assert_eq!(empty.shape(), vec![0, 2]);

    assert!(matches!(
        Tensor::embed_rows(&table, &[4]),
        Err(Error::TokenOutOfRange { id: 4, vocab: 4 })
    ));
}

#[test]
fn backward_sum_gives_ones() {
    let tape = Tape::new();
    let x = Tensor::param(vec![3], vec![1.0, 2.0, 3.0], &tape);
    let loss = x.sum_all();
    backward(&loss).unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_square_gives_two_x() {
    let tape = Tape::new();
    let x = Tensor::param(vec![3], vec![1.0, -2.0, 3.0], &tape);
    let loss = x.mul(&x).unwrap().sum_all();
    backward(&loss).unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![2.0, -4.0, 6.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let tape = Tape::new();
    let x = Tensor::param(vec![2], vec![1.0, 1.0], &tape);
    let loss = x.sum_all();
    backward(&loss).unwrap();
    backward(&loss).unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![2.0, 2.0]);
    x.zero_grad();
    backward(&loss).unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_detached_losses() {
    let tape = Tape::new();
    let x = Tensor::param(vec![2], vec![1.0, 2.0], &tape);
    let y = x.scale(2.0);
    assert!(matches!(
        backward(&y),
        Err(Error::NonScalarLoss { .. })
    ));
    let c = Tensor::scalar(1.0);
    assert!(matches!(backward(&c), Err(Error::DetachedLoss)));
}

#[test]
fn paused_tape_records_nothing() {
    let tape = Tape::new();
    let x = Tensor::param(vec![2], vec![1.0, 2.0], &tape);
    let before = tape.len();
    let y = tape.paused(|| x.mul(&x).unwrap().sum_all());
    assert_eq!(tape.len(), before);
    assert!(!y.requires_grad());
}

#[test]
fn cross_entropy_ignores_unsupervised_rows() {
    let logits = t2(2, 3, &[0.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
    // only row 0 supervised: uniform logits, CE = ln(3)
    let loss = logits.cross_entropy_rows(&[Some(1), None]).unwrap();
    assert!((loss.item() - 3.0f64.ln()).abs() < 1e-12);
    // nothing supervised -> detached zero
    let loss = logits.cross_entropy_rows(&[None, None]).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn kl_of_identical_and_uniform_distributions_is_zero() {
    let logits = t2(1, 4, &[0.2, -0.4, 1.3, 0.0]);
    let p = logits.softmax_rows(None).unwrap();
    let kl = logits.kl_from_reference(&p).unwrap().item();
    assert!(kl.abs() < 1e-12);

    let uni_logits = t2(1, 5, &[2.0; 5]);
    let uni_p = Tensor::from_vec(vec![1, 5], vec![0.2; 5]);
    let kl = uni_logits.kl_from_reference(&uni_p).unwrap().item();
    assert!(kl.abs() < 1e-12);
}

#[test]
fn kl_two_class_hand_oracle() {
    // student logits (0, ln3) -> q = (1/4, 3/4); teacher p = (1/2, 1/2)
    let logits = t2(1, 2, &[0.0, 3.0f64.ln()]);
    let p = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]);
    let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let kl = logits.kl_from_reference(&p).unwrap().item();
    assert!((kl - want).abs() < 1e-12);
}

#[test]
fn concat_and_slice_round_trip() {
    let a = t2(1, 2, &[1.0, 2.0]);
    let b = t2(2, 2, &[3.0, 4.0, 5.0, 6.0]);
    let cat = Tensor::concat_rows(&[&a, &b]).unwrap();
    assert_eq!(cat.shape(), vec![3, 2]);
    assert_eq!(cat.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

    let c = t2(2, 1, &[9.0, 10.0]);
    let wide = Tensor::concat_cols(&[&b, &c]).unwrap();
    assert_eq!(wide.shape(), vec![2, 3]);
    assert_eq!(wide.to_vec(), vec![3.0, 4.0, 9.0, 5.0, 6.0, 10.0]);
    let back = wide.slice_cols(0, 2);
    assert_eq!(back.to_vec(), b.to_vec());
}

#[test]
fn rotary_preserves_norm_and_position_zero() {
    let table = RotaryTable::new(4, 8, 10_000.0);
    let x = t2(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 0.0]);
    let y = x.apply_rotary(&table, &[0, 3], 1);
    // position 0 is the identity rotation
    assert_eq!(&y.to_vec()[..4], &x.to_vec()[..4]);
    // rotations preserve the pairwise norms
    let xv = x.to_vec();
    let yv = y.to_vec();
    for pair in 0..2 {
        let nx = xv[4 + 2 * pair].hypot(xv[5 + 2 * pair]);
        let ny = yv[4 + 2 * pair].hypot(yv[5 + 2 * pair]);
        assert!((nx - ny).abs() < 1e-12);
    }
}

#[test]
fn row_scale_and_mean_lastdim() {
    let x = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let s = Tensor::from_vec(vec![2], vec![2.0, 0.5]);
    assert_eq!(x.row_scale(&s).unwrap().to_vec(), vec![2.0, 4.0, 1.5, 2.0]);
    assert_eq!(x.mean_lastdim().to_vec(), vec![1.5, 3.5]);
}
