use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::SbsgError;

const FD_H: f64 = 1e-6;
const FD_REL: f64 = 1e-5;
// Central differences bottom out around eps/h = 1e-10 of the output scale,
// so near-zero gradients need an absolute escape hatch.
const FD_ABS: f64 = 1e-8;

fn grads_close(a: f64, b: f64) -> bool {
    (a - b).abs() < FD_ABS + FD_REL * a.abs().max(b.abs())
}

/// Checks analytic gradients of a scalar-valued function against central
/// finite differences, element by element.
fn check_grads(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&[Tensor]) -> Tensor) {
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| Tensor::new(d.clone(), s).unwrap().with_grad())
        .collect();
    let out = f(&tensors);
    assert_eq!(out.numel(), 1, "gradient check needs a scalar output");
    out.backward().unwrap();

    let eval = |datas: &[Vec<f64>]| -> f64 {
        no_grad(|| {
            let ts: Vec<Tensor> = datas
                .iter()
                .zip(inputs)
                .map(|(d, (_, s))| Tensor::new(d.clone(), s).unwrap())
                .collect();
            f(&ts).item()
        })
    };

    for (ti, (data, _)) in inputs.iter().enumerate() {
        let grad = tensors[ti]
            .grad()
            .unwrap_or_else(|| panic!("input {ti} received no gradient"));
        for ei in 0..data.len() {
            let mut plus: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
            let mut minus = plus.clone();
            plus[ti][ei] += FD_H;
            minus[ti][ei] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            assert!(
                grads_close(grad[ei], fd),
                "input {ti} element {ei}: analytic {} vs fd {fd}",
                grad[ei]
            );
        }
    }
}

fn rand_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

// -- construction and bookkeeping -------------------------------------------

#[test]
fn new_rejects_mismatched_numel() {
    let err = Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
    assert!(matches!(err, SbsgError::Dimension(_)));
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap().with_grad();
    let y = x.scale(2.0);
    assert!(matches!(y.backward(), Err(SbsgError::Contract(_))));
}

#[test]
fn no_grad_suppresses_graph() {
    let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap().with_grad();
    let y = no_grad(|| x.scale(3.0));
    assert!(!y.tracked());
    // Mode restores after the closure.
    let z = x.scale(3.0);
    assert!(z.tracked());
}

#[test]
fn reshape_shares_storage() {
    let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let y = x.reshape(&[4]).unwrap();
    assert!(Rc::ptr_eq(&x.data_rc(), &y.data_rc()));
    assert!(x.reshape(&[3]).is_err());
}

#[test]
fn detach_cuts_history() {
    let x = Tensor::new(vec![1.0], &[1]).unwrap().with_grad();
    let y = x.scale(2.0).detach();
    assert!(!y.tracked());
    assert_eq!(y.data()[0], 2.0);
}

// -- elementwise forward values ---------------------------------------------

#[test]
fn add_broadcasts_trailing_dims() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
    let b = Tensor::new(vec![10.0, 20.0, 30.0], &[3]).unwrap();
    let c = a.add(&b).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
}

#[test]
fn add_broadcasts_middle_dim() {
    // [2,2,2] + [2,1,2]: the middle axis of the rhs stretches.
    let a = Tensor::new((1..=8).map(f64::from).collect(), &[2, 2, 2]).unwrap();
    let b = Tensor::new(vec![100.0, 200.0, 300.0, 400.0], &[2, 1, 2]).unwrap();
    let c = a.add(&b).unwrap();
    assert_eq!(
        c.data(),
        &[101.0, 202.0, 103.0, 204.0, 305.0, 406.0, 307.0, 408.0]
    );
}

#[test]
fn incompatible_shapes_error() {
    let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
    let b = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    assert!(matches!(a.add(&b), Err(SbsgError::Dimension(_))));
}

#[test]
fn mul_sub_neg_values() {
    let a = Tensor::new(vec![1.0, -2.0], &[2]).unwrap();
    let b = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
    assert_eq!(a.mul(&b).unwrap().data(), &[3.0, -8.0]);
    assert_eq!(a.sub(&b).unwrap().data(), &[-2.0, -6.0]);
    assert_eq!(a.neg().data(), &[-1.0, 2.0]);
    assert_eq!(a.add_scalar(1.5).data(), &[2.5, -0.5]);
    assert_eq!(a.relu().data(), &[1.0, 0.0]);
}

// -- matmul ------------------------------------------------------------------

#[test]
fn matmul_2d_known_values() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::new(vec![1.0, 1.0], &[2, 1]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_identity() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
    let eye = Tensor::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
    assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
}

#[test]
fn matmul_broadcasts_batch_dims() {
    // [2,2,2] x [2,2] applies the same rhs to both batch entries.
    let a = Tensor::new((1..=8).map(f64::from).collect(), &[2, 2, 2]).unwrap();
    let b = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 2, 2]);
    assert_eq!(c.data(), a.data());
}

#[test]
fn matmul_rejects_dim_mismatch() {
    let a = Tensor::new(vec![0.0; 6], &[2, 3]).unwrap();
    let b = Tensor::new(vec![0.0; 8], &[4, 2]).unwrap();
    assert!(matches!(a.matmul(&b), Err(SbsgError::Dimension(_))));
}

// -- reductions and normalizations -------------------------------------------

#[test]
fn softmax_known_values() {
    let x = Tensor::new(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
    let y = x.softmax(1).unwrap();
    let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_8, 0.665_240_955_774_821_7];
    for (got, w) in y.data().iter().zip(want) {
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }
    assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_is_shift_invariant() {
    let x = Tensor::new(vec![1000.0, 1001.0, 1002.0], &[3]).unwrap();
    let y = x.softmax(0).unwrap();
    let z = Tensor::new(vec![0.0, 1.0, 2.0], &[3]).unwrap().softmax(0).unwrap();
    for (a, b) in y.data().iter().zip(z.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn log_softmax_matches_softmax_log() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = rand_data(&mut rng, 12);
    let x = Tensor::new(data, &[3, 4]).unwrap();
    let ls = x.log_softmax(1).unwrap();
    let s = x.softmax(1).unwrap();
    for (a, b) in ls.data().iter().zip(s.data()) {
        assert!((a - b.ln()).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_constant_row_yields_bias() {
    // A constant row has zero variance; the normalized value collapses to 0
    // and the output is exactly the bias.
    let x = Tensor::new(vec![5.0; 4], &[1, 4]).unwrap();
    let gain = Tensor::ones(&[4]);
    let bias = Tensor::new(vec![0.5, -0.5, 1.5, 0.0], &[4]).unwrap();
    let y = x.layer_norm(&gain, &bias, 1e-6).unwrap();
    assert_eq!(y.data(), bias.data());
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::new(rand_data(&mut rng, 16), &[2, 8]).unwrap();
    let y = x
        .layer_norm(&Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-9)
        .unwrap();
    for r in 0..2 {
        let row = &y.data()[r * 8..(r + 1) * 8];
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn sum_all_and_grad() {
    let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap().with_grad();
    let s = x.sum_all();
    assert_eq!(s.item(), 6.0);
    s.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn grad_of_sum_x_squared() {
    let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap().with_grad();
    let y = x.mul(&x).unwrap().sum_all();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn grads_accumulate_across_uses() {
    // z = sum(x + x) -> dz/dx = 2 everywhere.
    let x = Tensor::new(vec![1.0, -1.0], &[2]).unwrap().with_grad();
    let z = x.add(&x).unwrap().sum_all();
    z.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

// -- shape ops ----------------------------------------------------------------

#[test]
fn permute_transposes() {
    let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
    let y = x.permute(&[1, 0]).unwrap();
    assert_eq!(y.shape(), &[3, 2]);
    assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    // Applying the permutation twice restores the original layout.
    let z = y.permute(&[1, 0]).unwrap();
    assert_eq!(z.data(), x.data());
    assert!(x.permute(&[0, 0]).is_err());
}

#[test]
fn narrow_extracts_slice() {
    let x = Tensor::new((1..=12).map(f64::from).collect(), &[2, 3, 2]).unwrap();
    let y = x.narrow(1, 1, 2).unwrap();
    assert_eq!(y.shape(), &[2, 2, 2]);
    assert_eq!(y.data(), &[3.0, 4.0, 5.0, 6.0, 9.0, 10.0, 11.0, 12.0]);
    assert!(x.narrow(1, 2, 2).is_err());
}

#[test]
fn embedding_gathers_rows() {
    let table = Tensor::new(vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1], &[3, 2]).unwrap();
    let out = Tensor::embedding(&table, &[2, 0, 2], &[3]).unwrap();
    assert_eq!(out.shape(), &[3, 2]);
    assert_eq!(out.data(), &[2.0, 2.1, 0.0, 0.1, 2.0, 2.1]);
    assert!(matches!(
        Tensor::embedding(&table, &[3], &[1]),
        Err(SbsgError::Vocab(_))
    ));
}

#[test]
fn embedding_grad_scatters_and_accumulates() {
    let table = Tensor::new(vec![0.0; 6], &[3, 2]).unwrap().with_grad();
    // Row 2 is used twice; its gradient rows must sum.
    let out = Tensor::embedding(&table, &[2, 0, 2], &[3]).unwrap();
    out.sum_all().backward().unwrap();
    assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

// -- dropout -------------------------------------------------------------------

#[test]
fn dropout_zero_rate_is_identity() {
    let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.dropout(0.0, &mut || 0.5);
    assert!(Rc::ptr_eq(&x.data_rc(), &y.data_rc()));
}

#[test]
fn dropout_scales_kept_elements() {
    let x = Tensor::new(vec![1.0; 4], &[4]).unwrap().with_grad();
    // Deterministic draws: keep, drop, keep, drop at rate 0.5.
    let draws = [0.1, 0.9, 0.2, 0.8];
    let mut i = 0;
    let y = x.dropout(0.5, &mut || {
        let v = draws[i];
        i += 1;
        v
    });
    assert_eq!(y.data(), &[2.0, 0.0, 2.0, 0.0]);
    y.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 0.0, 2.0, 0.0]);
}

// -- finite-difference gradient checks ----------------------------------------

#[test]
fn fd_add_mul_sub_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_data(&mut rng, 12);
    let b = rand_data(&mut rng, 4);
    check_grads(&[(a.clone(), vec![3, 4]), (b.clone(), vec![4])], |t| {
        t[0].add(&t[1]).unwrap().sum_all()
    });
    check_grads(&[(a.clone(), vec![3, 4]), (b.clone(), vec![4])], |t| {
        t[0].mul(&t[1]).unwrap().mul(&t[0]).unwrap().sum_all()
    });
    check_grads(&[(a, vec![3, 4]), (b, vec![1, 4])], |t| {
        t[0].sub(&t[1]).unwrap().mul(&t[0]).unwrap().sum_all()
    });
}

#[test]
fn fd_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = rand_data(&mut rng, 6);
    let b = rand_data(&mut rng, 12);
    check_grads(&[(a, vec![2, 3]), (b, vec![3, 4])], |t| {
        t[0].matmul(&t[1]).unwrap().sum_all()
    });
}

#[test]
fn fd_matmul_batched_with_broadcast_rhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = rand_data(&mut rng, 2 * 3 * 2);
    let b = rand_data(&mut rng, 2 * 4);
    // Weigh the product so the summed output is sensitive to every element.
    let w = rand_data(&mut rng, 2 * 3 * 4);
    check_grads(&[(a, vec![2, 3, 2]), (b, vec![2, 4])], move |t| {
        let c = t[0].matmul(&t[1]).unwrap();
        let w = Tensor::new(w.clone(), &[2, 3, 4]).unwrap();
        c.mul(&w).unwrap().sum_all()
    });
}

#[test]
fn fd_softmax_and_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = rand_data(&mut rng, 8);
    let w = rand_data(&mut rng, 8);
    let wc = w.clone();
    check_grads(&[(x.clone(), vec![2, 4])], move |t| {
        let w = Tensor::new(wc.clone(), &[2, 4]).unwrap();
        t[0].softmax(1).unwrap().mul(&w).unwrap().sum_all()
    });
    check_grads(&[(x, vec![2, 4])], move |t| {
        let w = Tensor::new(w.clone(), &[2, 4]).unwrap();
        t[0].log_softmax(1).unwrap().mul(&w).unwrap().sum_all()
    });
}

#[test]
fn fd_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = rand_data(&mut rng, 12);
    let g = rand_data(&mut rng, 6);
    let b = rand_data(&mut rng, 6);
    let w = rand_data(&mut rng, 12);
    check_grads(&[(x, vec![2, 6]), (g, vec![6]), (b, vec![6])], move |t| {
        let w = Tensor::new(w.clone(), &[2, 6]).unwrap();
        t[0].layer_norm(&t[1], &t[2], 1e-6)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
    });
}

#[test]
fn fd_relu() {
    // Stay away from the kink at zero so finite differences are valid.
    let x = vec![0.5, -0.7, 1.3, -2.1, 0.9, -0.4];
    check_grads(&[(x, vec![6])], |t| t[0].relu().mul(&t[0]).unwrap().sum_all());
}

#[test]
fn fd_permute_narrow_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = rand_data(&mut rng, 24);
    let w = rand_data(&mut rng, 12);
    check_grads(&[(x, vec![2, 3, 4])], move |t| {
        let y = t[0].permute(&[2, 0, 1]).unwrap(); // [4,2,3]
        let y = y.narrow(0, 1, 2).unwrap(); // [2,2,3]
        let y = y.reshape(&[3, 4]).unwrap();
        let w = Tensor::new(w.clone(), &[3, 4]).unwrap();
        y.mul(&w).unwrap().sum_all()
    });
}

#[test]
fn cat_forward_layout() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
    let c = Tensor::cat(&[&a, &b], 1).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    assert_eq!(c.data()[..], [1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let d = Tensor::cat(&[&a, &a], 0).unwrap();
    assert_eq!(d.shape(), &[4, 2]);
    assert_eq!(d.data()[..4], [1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn cat_rejects_mismatched_shapes() {
    let a = Tensor::zeros(&[2, 2]);
    let b = Tensor::zeros(&[3, 3]);
    assert!(Tensor::cat(&[&a, &b], 0).is_err());
    assert!(Tensor::cat(&[&a, &a], 2).is_err());
    assert!(Tensor::cat(&[], 0).is_err());
}

#[test]
fn fd_cat() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_data(&mut rng, 6);
    let y = rand_data(&mut rng, 3);
    let w = rand_data(&mut rng, 9);
    check_grads(&[(x, vec![3, 2]), (y, vec![3, 1])], move |t| {
        let c = Tensor::cat(&[&t[0], &t[1]], 1).unwrap();
        let w = Tensor::new(w.clone(), &[3, 3]).unwrap();
        c.mul(&w).unwrap().sum_all()
    });
}

#[test]
fn fd_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let table = rand_data(&mut rng, 10);
    let w = rand_data(&mut rng, 6);
    check_grads(&[(table, vec![5, 2])], move |t| {
        let out = Tensor::embedding(&t[0], &[4, 0, 4], &[3]).unwrap();
        let w = Tensor::new(w.clone(), &[3, 2]).unwrap();
        out.mul(&w).unwrap().sum_all()
    });
}

#[test]
fn fd_composite_chain() {
    // A small end-to-end graph exercising most ops together.
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let x = rand_data(&mut rng, 8);
    let w1 = rand_data(&mut rng, 12);
    let g = rand_data(&mut rng, 3);
    let b = rand_data(&mut rng, 3);
    check_grads(
        &[(x, vec![2, 4]), (w1, vec![4, 3]), (g, vec![3]), (b, vec![3])],
        |t| {
            let h = t[0].matmul(&t[1]).unwrap().relu();
            let h = h.layer_norm(&t[2], &t[3], 1e-6).unwrap();
            let p = h.softmax(1).unwrap();
            p.mul(&h).unwrap().sum_all()
        },
    );
}
