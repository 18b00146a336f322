mod common;

use common::*;
use waveletnet::autograd::Tape;
use waveletnet::connectivity::haar_kronecker;
use waveletnet::nn::{Ctx, Module};
use waveletnet::ops::{conv2d_forward, depthwise_conv2d, dfwt};
use waveletnet::{
    adjacency_of_dfwt, adjacency_of_wconv, compose, haar_matrix, wconv_forward, Shape,
    SignConvention, Tensor, WConv, WConvSpec,
};

const A8: [[u8; 8]; 8] = [
    [1, 1, 1, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 1, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 0, 1],
];

const H8: [[i8; 8]; 8] = [
    [1, 0, 0, 0, -1, 0, 0, 0],
    [0, 1, 0, 0, 0, -1, 0, 0],
    [0, 0, 1, 0, 0, 0, -1, 0],
    [0, 0, 0, 1, 0, 0, 0, -1],
    [1, 0, -1, 0, 1, 0, -1, 0],
    [0, 1, 0, -1, 0, 1, 0, -1],
    [1, -1, 1, -1, 1, -1, 1, -1],
    [1, 1, 1, 1, 1, 1, 1, 1],
];

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = rng(1);
    for &(n, k, cin, cout, s) in &[
        (1, 1, 3, 5, 1),
        (5, 3, 4, 6, 1),
        (7, 3, 3, 8, 2),
        (8, 3, 16, 4, 2),
        (6, 1, 8, 8, 2),
    ] {
        let x = uniform(Shape::new(2, n, n, cin), &mut r);
        let w = uniform(Shape::new(k, k, cin, cout), &mut r);
        let want = naive_conv(&x, &w, s);
        let got = conv2d_forward(&x, &w, s).unwrap();
        assert_eq!(got.shape(), want.shape());
        assert!(max_abs(got.data(), want.data()) < 1e-12);
        let got32 = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), s)
            .unwrap()
            .cast::<f64>();
        assert!(max_abs(got32.data(), want.data()) <= 1e-5);
    }
}

#[test]
fn depthwise_matches_nested_loops() {
    let mut r = rng(2);
    for &(n, c, s) in &[(4, 3, 1), (7, 16, 2), (8, 5, 1), (1, 2, 2)] {
        let x = uniform(Shape::new(2, n, n, c), &mut r);
        let w = uniform(Shape::new(3, 3, 1, c), &mut r);
        let want = naive_depthwise(&x, &w, s);
        let got = depthwise_conv2d(&x, &w, s).unwrap();
        assert!(max_abs(got.data(), want.data()) < 1e-12);
    }
}

#[test]
fn same_padding_spatial_extents() {
    let mut r = rng(3);
    let w = uniform(Shape::new(3, 3, 1, 1), &mut r);
    for (n, want) in [(224, 112), (112, 56), (7, 4), (1, 1), (2, 1)] {
        let x = uniform(Shape::new(1, n, n, 1), &mut r);
        assert_eq!(conv2d_forward(&x, &w, 2).unwrap().shape().height(), want);
    }
}

#[test]
fn wconv_matches_block_sparse_dense_kernel() {
    let mut r = rng(4);
    for &(d, dp, kappa, k, s) in &[
        (8, 8, 3, 1, 1),
        (16, 8, 2, 1, 1),
        (8, 16, 1, 3, 2),
        (32, 32, 5, 1, 1),
        (8, 8, 0, 3, 1),
    ] {
        let spec = WConvSpec::new(d, dp, kappa, k, s).unwrap();
        let blocks: Vec<Tensor<f64>> = spec
            .pieces()
            .iter()
            .map(|p| uniform(Shape::new(k, k, p.in_len, p.out_len), &mut r))
            .collect();
        let dense = scatter(d, dp, kappa, k, &blocks);
        let x = uniform(Shape::new(2, 5, 5, d), &mut r);
        let got = wconv_forward(&x, spec, &blocks).unwrap();
        let want = naive_conv(&x, &dense, s);
        assert!(
            max_abs(got.data(), want.data()) < 1e-12,
            "d={d} dp={dp} κ={kappa}"
        );
    }
}

#[test]
fn wconv_parameter_count_matches_scattered_nonzeros() {
    for kappa in 0..=4 {
        let spec = WConvSpec::pointwise(32, 64, kappa).unwrap();
        let blocks: Vec<Tensor<f64>> = spec
            .pieces()
            .iter()
            .map(|p| Tensor::full(Shape::new(1, 1, p.in_len, p.out_len), 1.0))
            .collect();
        let dense = scatter(32, 64, kappa, 1, &blocks);
        let nz = dense.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(spec.param_count(), nz);
        assert_eq!(adjacency_of_wconv(32, 64, kappa).unwrap().nnz(), nz);
    }
}

#[test]
fn adjacency_d8_equals_tabulated_matrix() {
    let a = adjacency_of_wconv(8, 8, 3).unwrap();
    let want: Vec<Vec<u8>> = A8.iter().map(|r| r.to_vec()).collect();
    assert_eq!(a.to_rows(), want);
}

#[test]
fn adjacency_matches_set_form_generator() {
    for k in 2..=8 {
        let d = 1 << k;
        assert_eq!(
            adjacency_of_wconv(d, d, k).unwrap().to_rows(),
            set_form(k),
            "k={k}"
        );
    }
}

#[test]
fn haar_d8_equals_tabulated_matrix() {
    let h = haar_matrix(8, 3, SignConvention::Matrix).unwrap();
    let want: Vec<Vec<i8>> = H8.iter().map(|r| r.to_vec()).collect();
    assert_eq!(h.rows(), want);
    assert_eq!(ref_haar(8, 3, false), want);
}

#[test]
fn haar_matches_independent_trace() {
    for k in 0..=7u32 {
        let d = 1 << k;
        for kappa in 0..=k {
            for (sign, hml) in [
                (SignConvention::Algorithm2, true),
                (SignConvention::Matrix, false),
            ] {
                assert_eq!(
                    haar_matrix(d, kappa, sign).unwrap().rows(),
                    ref_haar(d, kappa, hml)
                );
            }
        }
    }
}

#[test]
fn hand_traced_transform_of_1234() {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = dfwt(&x, 2, SignConvention::Algorithm2).unwrap();
    assert_eq!(y.data(), &[2.0, 2.0, 2.0, 10.0]);
    let h = haar_matrix(4, 2, SignConvention::Algorithm2).unwrap();
    assert_eq!(h.apply(&[1.0, 2.0, 3.0, 4.0]), vec![2.0, 2.0, 2.0, 10.0]);
    assert_eq!(
        h.rows(),
        vec![
            vec![-1, 0, 1, 0],
            vec![0, -1, 0, 1],
            vec![-1, 1, -1, 1],
            vec![1, 1, 1, 1]
        ]
    );
}

#[test]
fn dfwt_matches_reference_vectors() {
    let mut r = rng(6);
    for &d in &[4usize, 8, 16, 64] {
        for kappa in 0..=d.trailing_zeros() {
            let x = uniform(Shape::new(3, 2, 2, d), &mut r);
            let y = dfwt(&x, kappa, SignConvention::Algorithm2).unwrap();
            for (src, dst) in x.data().chunks(d).zip(y.data().chunks(d)) {
                assert!(max_abs(dst, &ref_dfwt(src, kappa, true)) < 1e-12);
            }
        }
    }
}

/// Rows of the Kronecker recursion and the traced matrix coincide once the
/// recursion's columns are permuted by bit reversal.
#[test]
fn kronecker_form_is_a_relabeling_of_the_trace() {
    for k in 1..=6u32 {
        let d = 1usize << k;
        let kron = haar_kronecker(d).unwrap();
        let rev = |j: usize| j.reverse_bits() >> (usize::BITS - k);
        let mut permuted: Vec<Vec<i8>> = kron
            .iter()
            .map(|row| (0..d).map(|j| row[rev(j)]).collect())
            .collect();
        let mut traced = haar_matrix(d, k, SignConvention::Matrix).unwrap().rows();
        permuted.sort();
        traced.sort();
        assert_eq!(permuted, traced, "d={d}");
    }
}

#[test]
fn composition_with_transform_is_full_for_tabulated_pair() {
    let a = adjacency_of_wconv(8, 8, 3).unwrap();
    let w = adjacency_of_dfwt(8, 3).unwrap();
    assert!(compose(&a, &w).unwrap().is_full());
    let abs: Vec<Vec<u8>> = H8
        .iter()
        .map(|r| r.iter().map(|v| (*v != 0) as u8).collect())
        .collect();
    assert_eq!(w.to_rows(), abs);
}

/// Central differences in f64 on a WConv with a weighted-sum loss.
#[test]
fn wconv_gradient_by_central_differences() {
    let mut r = rng(7);
    let spec = WConvSpec::new(8, 8, 2, 3, 1).unwrap();
    let blocks: Vec<Tensor<f64>> = spec
        .pieces()
        .iter()
        .map(|p| uniform(Shape::new(3, 3, p.in_len, p.out_len), &mut r))
        .collect();
    let conv = WConv::new(spec, blocks.clone()).unwrap();
    let x = uniform(Shape::new(2, 4, 4, 8), &mut r);
    let probe = uniform(Shape::new(2, 4, 4, 8), &mut r);
    let loss = |x: &Tensor<f64>, blocks: &[Tensor<f64>]| -> f64 {
        let y = naive_conv(x, &scatter(8, 8, 2, 3, blocks), 1);
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let mut ctx = Ctx::bind(&mut tape, &conv, true);
    let params = ctx.param_vars().to_vec();
    let xv = ctx.tape.param(x.clone());
    let y = conv.record(&mut ctx, xv).unwrap();
    let l = tape.dot(y, &probe).unwrap();
    tape.backward(l).unwrap();

    let eps = 1e-5;
    let gx = tape.grad(xv).unwrap().unwrap().to_vec();
    for i in (0..x.numel()).step_by(7) {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += eps;
        xm.data_mut()[i] -= eps;
        let fd = (loss(&xp, &blocks) - loss(&xm, &blocks)) / (2.0 * eps);
        assert!((fd - gx[i]).abs() < 1e-6, "x[{i}]: {fd} vs {}", gx[i]);
    }
    assert_eq!(params.len(), conv.parameters().len());
    for (p, var) in params.iter().enumerate() {
        let g = tape.grad(*var).unwrap().unwrap().to_vec();
        for i in (0..blocks[p].numel()).step_by(5) {
            let (mut bp, mut bm) = (blocks.clone(), blocks.clone());
            bp[p].data_mut()[i] += eps;
            bm[p].data_mut()[i] -= eps;
            let fd = (loss(&x, &bp) - loss(&x, &bm)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6, "piece {p}[{i}]");
        }
    }
}
