use super::{backward, gradcheck, no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "element {i}: {x} vs {y} (tol {tol})"
        );
    }
}

#[test]
fn matmul_identity() {
    let i2 = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], [2, 2]).unwrap();
    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], [2, 2]).unwrap();
    let y = i2.matmul(&a).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_case() {
    // brute-force dot products: [1,2;3,4] . [5;6] = [17;39]
    let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], [2, 2]).unwrap();
    let b = Tensor::from_vec(vec![5.0, 6.0], [2, 1]).unwrap();
    let y = a.matmul(&b).unwrap();
    assert_eq!(y.dims(), &[2, 1]);
    assert_eq!(y.to_vec(), vec![17.0, 39.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros([2, 3]);
    let b = Tensor::<f64>::zeros([2, 3]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_uniform_and_shift_invariance() {
    let x = Tensor::<f64>::zeros([3]);
    let y = x.softmax(0).unwrap();
    assert_close(&y.to_vec(), &[1.0 / 3.0; 3], 1e-12);

    let mut r = rng(1);
    let x = Tensor::<f64>::randn([4, 5], &mut r);
    let shifted = x.add_scalar(7.25);
    let a = x.softmax(1).unwrap().to_vec();
    let b = shifted.softmax(1).unwrap().to_vec();
    assert_close(&a, &b, 1e-9);
}

#[test]
fn softmax_matches_direct_formula() {
    let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], [3]).unwrap();
    let y = x.softmax(0).unwrap().to_vec();
    // oracle: direct normalization of exponentials
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    for (yi, ei) in y.iter().zip(&e) {
        assert!((yi - ei / s).abs() / (ei / s) < 1e-9);
    }
    let total: f64 = y.iter().sum();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn layernorm_constant_row_is_zeroed() {
    let x = Tensor::<f64>::full([2, 4], 3.7);
    let gain = Tensor::ones([4]);
    let bias = Tensor::zeros([4]);
    let y = x.layernorm(&gain, &bias, 1e-5).unwrap();
    for v in y.to_vec() {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layernorm_normalizes_rows() {
    let mut r = rng(2);
    let x = Tensor::<f64>::randn([6, 8], &mut r);
    let gain = Tensor::ones([8]);
    let bias = Tensor::zeros([8]);
    let y = x.layernorm(&gain, &bias, 1e-5).unwrap().to_vec();
    for row in y.chunks(8) {
        let m: f64 = row.iter().sum::<f64>() / 8.0;
        let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-5, "row mean {m}");
        assert!((v - 1.0).abs() < 1e-4, "row var {v}");
    }
}

#[test]
fn conv2d_one_by_one_identity() {
    let mut r = rng(3);
    let x = Tensor::<f64>::randn([1, 1, 4, 4], &mut r);
    let w = Tensor::from_vec(vec![1.0], [1, 1, 1, 1]).unwrap();
    let y = x.conv2d(&w, 1, 0).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv2d_ones_kernel_on_constant_image() {
    // direct summation: interior of a 3x3 all-ones kernel over constant c is 9c
    let c = 0.5;
    let x = Tensor::<f64>::full([1, 1, 5, 5], c);
    let w = Tensor::ones([1, 1, 3, 3]);
    let y = x.conv2d(&w, 1, 1).unwrap();
    assert_eq!(y.dims(), &[1, 1, 5, 5]);
    let yd = y.to_vec();
    assert!((yd[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
    // corner sees a 2x2 window
    assert!((yd[0] - 4.0 * c).abs() < 1e-12);
}

#[test]
fn conv_transpose_scalar_scaling() {
    let mut r = rng(4);
    let x = Tensor::<f64>::randn([1, 1, 3, 3], &mut r);
    let w = Tensor::from_vec(vec![2.5], [1, 1, 1, 1]).unwrap();
    let y = x.conv_transpose2d(&w, 1, 0, 0).unwrap();
    assert_close(
        &y.to_vec(),
        &x.to_vec().iter().map(|v| v * 2.5).collect::<Vec<_>>(),
        1e-12,
    );
}

#[test]
fn conv_transpose_doubles_spatial_extent() {
    // k=5, stride=2, pad=2, out_pad=1 maps H to exactly 2H
    let x = Tensor::<f64>::zeros([1, 2, 8, 8]);
    let w = Tensor::<f64>::zeros([2, 3, 5, 5]);
    let y = x.conv_transpose2d(&w, 2, 2, 1).unwrap();
    assert_eq!(y.dims(), &[1, 3, 16, 16]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x, w), y> == <x, conv_transpose(y, w)> on random tensors
    let mut r = rng(5);
    for &(stride, pad) in &[(1usize, 1usize), (2, 2)] {
        let x = Tensor::<f64>::randn([2, 3, 8, 8], &mut r);
        let w = Tensor::<f64>::randn([4, 3, 5, 5], &mut r);
        let cx = x.conv2d(&w, stride, pad).unwrap();
        let y = Tensor::<f64>::randn(cx.dims().to_vec(), &mut r);
        let lhs: f64 = cx
            .to_vec()
            .iter()
            .zip(y.to_vec().iter())
            .map(|(a, b)| a * b)
            .sum();
        // adjoint maps the conv output geometry back to the input geometry
        let out_pad = 8 - ((8 + 2 * pad - 5) / stride * stride + 5 - 2 * pad);
        let ty = y.conv_transpose2d(&w, stride, pad, out_pad).unwrap();
        assert_eq!(ty.dims(), x.dims());
        let rhs: f64 = ty
            .to_vec()
            .iter()
            .zip(x.to_vec().iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!(
            (lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-6,
            "stride {stride}: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn detach_blocks_gradient() {
    let x = Tensor::<f64>::var(vec![1.0, 2.0, 3.0], [3]).unwrap();
    let d = x.detach();
    assert_eq!(d.to_vec(), x.to_vec());
    let loss = d.sum_all();
    assert!(backward(&loss).is_err(), "detached graph has no variables");
    assert!(x.grad().is_none());
}

#[test]
fn detach_product_rule_with_severed_branch() {
    // d sum(x * detach(x)) / dx == detach(x): only the live branch counts
    let x = Tensor::<f64>::var(vec![1.5, -2.0, 0.5], [3]).unwrap();
    let frozen = x.detach();
    let loss = x.mul(&frozen).unwrap().sum_all();
    backward(&loss).unwrap();
    assert_close(&x.grad().unwrap(), &[1.5, -2.0, 0.5], 1e-12);

    // finite differences of the surrogate (frozen branch held constant)
    let c = [1.5, -2.0, 0.5];
    let h = 1e-6;
    for j in 0..3 {
        let mut xp = c;
        xp[j] += h;
        let mut xm = c;
        xm[j] -= h;
        let fp: f64 = xp.iter().zip(&c).map(|(a, b)| a * b).sum();
        let fm: f64 = xm.iter().zip(&c).map(|(a, b)| a * b).sum();
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - c[j]).abs() < 1e-6);
    }
}

#[test]
fn straight_through_forward_is_bit_exact() {
    let mut r = rng(6);
    let x = Tensor::<f64>::randn([4, 3, 2], &mut r);
    let reference = Tensor::<f64>::var(
        Tensor::<f64>::randn([3, 2], &mut r).to_vec(),
        [3, 2],
    )
    .unwrap();
    let y = x.straight_through(&reference).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn straight_through_identity_jacobian() {
    let mut r = rng(7);
    let x = Tensor::<f64>::randn([4, 3], &mut r);
    let reference = Tensor::<f64>::var(vec![0.0; 12], [4, 3]).unwrap();
    let y = x.straight_through(&reference).unwrap();
    backward(&y.sum_all()).unwrap();
    assert_close(&reference.grad().unwrap(), &[1.0; 12], 1e-12);
}

#[test]
fn straight_through_batched_reference_sums_over_batch() {
    let mut r = rng(8);
    let x = Tensor::<f64>::randn([5, 2, 3], &mut r);
    let reference = Tensor::<f64>::var(vec![0.0; 6], [2, 3]).unwrap();
    let y = x.straight_through(&reference).unwrap();
    backward(&y.sum_all()).unwrap();
    assert_close(&reference.grad().unwrap(), &[5.0; 6], 1e-12);
}

#[test]
fn straight_through_composed_with_linear_map() {
    // d L(st(x, ref))/d ref equals d L(y)/dy evaluated at y = x
    let mut r = rng(9);
    let x = Tensor::<f64>::randn([2, 2], &mut r);
    let m = Tensor::<f64>::randn([2, 2], &mut r);
    let reference = Tensor::<f64>::var(vec![0.1; 4], [2, 2]).unwrap();
    let st = x.straight_through(&reference).unwrap();
    let loss = st.matmul(&m).unwrap().mul(&st.matmul(&m).unwrap()).unwrap().sum_all();
    backward(&loss).unwrap();
    let got = reference.grad().unwrap();

    let y = Tensor::<f64>::var(x.to_vec(), [2, 2]).unwrap();
    let loss2 = y.matmul(&m).unwrap().mul(&y.matmul(&m).unwrap()).unwrap().sum_all();
    backward(&loss2).unwrap();
    assert_close(&got, &y.grad().unwrap(), 1e-10);
}

#[test]
fn straight_through_no_grad_to_value_argument() {
    let x = Tensor::<f64>::var(vec![1.0, 2.0], [2]).unwrap();
    let reference = Tensor::<f64>::var(vec![0.0, 0.0], [2]).unwrap();
    let y = x.straight_through(&reference).unwrap();
    backward(&y.sum_all()).unwrap();
    assert!(x.grad().is_none());
    assert_eq!(x.grad_or_zeros(), vec![0.0, 0.0]);
}

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::<f64>::var(vec![0.3; 6], [2, 3]).unwrap();
    backward(&x.sum_all()).unwrap();
    assert_close(&x.grad().unwrap(), &[1.0; 6], 1e-12);
}

#[test]
fn backward_fan_out_accumulates() {
    // loss = sum(x) + sum(2x) -> grad = 3
    let x = Tensor::<f64>::var(vec![1.0, -1.0], [2]).unwrap();
    let loss = x.sum_all().add(&x.mul_scalar(2.0).sum_all()).unwrap();
    backward(&loss).unwrap();
    assert_close(&x.grad().unwrap(), &[3.0, 3.0], 1e-12);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::<f64>::var(vec![1.0, 2.0], [2]).unwrap();
    let y = x.mul_scalar(2.0);
    assert!(backward(&y).is_err());
}

#[test]
fn dag_shared_subexpression_equals_tree() {
    // y = s*s with s shared, versus two independent copies of the subtree
    let x = Tensor::<f64>::var(vec![1.0, 2.0, 3.0], [3]).unwrap();
    let s = x.mul_scalar(2.0).add_scalar(1.0);
    let loss = s.mul(&s).unwrap().sum_all();
    backward(&loss).unwrap();
    let dag_grad = x.grad().unwrap();

    let x2 = Tensor::<f64>::var(vec![1.0, 2.0, 3.0], [3]).unwrap();
    let s1 = x2.mul_scalar(2.0).add_scalar(1.0);
    let s2 = x2.mul_scalar(2.0).add_scalar(1.0);
    let loss2 = s1.mul(&s2).unwrap().sum_all();
    backward(&loss2).unwrap();
    assert_close(&dag_grad, &x2.grad().unwrap(), 1e-12);
}

#[test]
fn no_grad_scope_suppresses_graph() {
    let x = Tensor::<f64>::var(vec![1.0], [1]).unwrap();
    let y = no_grad(|| x.mul_scalar(3.0));
    assert!(!y.requires_grad());
    let z = x.mul_scalar(3.0);
    assert!(z.requires_grad());
}

#[test]
fn unreachable_leaf_reads_zero_grad() {
    let x = Tensor::<f64>::var(vec![1.0, 2.0], [2]).unwrap();
    let y = Tensor::<f64>::var(vec![5.0], [1]).unwrap();
    backward(&x.sum_all()).unwrap();
    assert!(y.grad().is_none());
    assert_eq!(y.grad_or_zeros(), vec![0.0]);
}

#[test]
fn broadcast_matches_explicit_tiling() {
    let mut r = rng(10);
    let a = Tensor::<f64>::randn([3, 1, 4], &mut r);
    let b = Tensor::<f64>::randn([2, 4], &mut r);
    let direct = a.add(&b).unwrap();
    let at = a.broadcast_to([3, 2, 4]).unwrap();
    let bt = b.broadcast_to([3, 2, 4]).unwrap();
    let tiled = at.add(&bt).unwrap();
    assert_eq!(direct.to_vec(), tiled.to_vec());
    assert_eq!(direct.dims(), tiled.dims());
}

#[test]
fn gradcheck_matmul_against_finite_differences() {
    // gradient of sum(A.B) w.r.t. A matches central differences
    let mut r = rng(11);
    let a = Tensor::<f64>::var(Tensor::<f64>::randn([3, 4], &mut r).to_vec(), [3, 4]).unwrap();
    let b = Tensor::<f64>::var(Tensor::<f64>::randn([4, 2], &mut r).to_vec(), [4, 2]).unwrap();
    let res = gradcheck::check_fn(
        "matmul",
        &[a, b],
        &|v| v[0].matmul(&v[1]),
        1e-4,
        1e-6,
        &mut r,
    )
    .unwrap();
    assert!(res.pass(), "max rel err {}", res.max_rel_err);
}

#[test]
fn gradcheck_small_suite() {
    // a 3-instance smoke pass; the acceptance suite runs the full 20
    let report = gradcheck::op_suite(1234, 3, 1e-4);
    for line in report.lines() {
        if line.starts_with("FAIL") {
            panic!("{line}");
        }
    }
    assert!(report.all_pass());
}
