use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "index {}: got {} want {} (tol {})",
            i,
            g,
            w,
            tol
        );
    }
}

#[test]
fn matmul_identity() {
    let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let mut rng = Rng::new(1);
    let x = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng);
    let y = eye.matmul(&x).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn matmul_hand_case() {
    let a = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = Tensor::from_vec(&[2, 1], vec![1., 1.]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.to_vec(), vec![3., 7.]);
}

#[test]
fn matmul_shape_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient_vs_finite_differences() {
    let mut rng = Rng::new(7);
    let a = Tensor::param_uniform(&[5, 7], -1.0, 1.0, &mut rng);
    let b = Tensor::param_uniform(&[7, 3], -1.0, 1.0, &mut rng);
    for p in [&a, &b] {
        let err = finite_diff_check(
            &mut || {
                // A fixed quadratic head makes the scalar sensitive to every
                // entry of the product.
                a.matmul(&b)?.mul(&a.matmul(&b)?)?.sum()
            },
            p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "max rel err {}", err);
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = Rng::new(3);
    let x = Tensor::uniform(&[2, 4, 4], 0.0, 1.0, &mut rng);
    let w = Tensor::from_vec(&[2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap();
    let b = Tensor::zeros(&[2]);
    let y = x.conv2d(&w, &b, 0).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv2d_ones_kernel_interior() {
    let c = 0.7;
    let x = Tensor::full(&[1, 5, 5], c);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let b = Tensor::zeros(&[1]);
    let y = x.conv2d(&w, &b, 1).unwrap();
    assert_eq!(y.shape(), &[1, 5, 5]);
    // Interior pixels sum all nine taps; the zero padding shrinks corners.
    let yd = y.to_vec();
    assert!((yd[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
    assert!((yd[0] - 4.0 * c).abs() < 1e-12);
}

#[test]
fn conv2d_channel_mismatch() {
    let x = Tensor::zeros(&[2, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    let b = Tensor::zeros(&[1]);
    assert!(matches!(x.conv2d(&w, &b, 1), Err(Error::Shape { .. })));
}

#[test]
fn conv2d_gradient_vs_finite_differences() {
    let mut rng = Rng::new(11);
    let x = Tensor::param_uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let w = Tensor::param_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = Tensor::param_uniform(&[3], -0.1, 0.1, &mut rng);
    for p in [&x, &w, &b] {
        let err = finite_diff_check(
            &mut || x.conv2d(&w, &b, 1)?.mul(&x.conv2d(&w, &b, 1)?)?.sum(),
            p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "max rel err {}", err);
    }
}

#[test]
fn softmax_rows_uniform_and_stable() {
    let x = Tensor::zeros(&[1, 3]);
    let y = x.softmax_rows().unwrap();
    assert_close(&y.to_vec(), &[1.0 / 3.0; 3], 1e-15);

    let big = Tensor::from_vec(&[1, 2], vec![1000.0, 1000.0]).unwrap();
    let y = big.softmax_rows().unwrap();
    assert_close(&y.to_vec(), &[0.5, 0.5], 1e-15);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::new(5);
    let x = Tensor::uniform(&[6, 9], -30.0, 30.0, &mut rng);
    let y = x.softmax_rows().unwrap();
    let yd = y.to_vec();
    for r in 0..6 {
        let s: f64 = yd[r * 9..(r + 1) * 9].iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "row {} sums to {}", r, s);
    }
}

#[test]
fn softmax_rows_gradient_vs_finite_differences() {
    let mut rng = Rng::new(13);
    let x = Tensor::param_uniform(&[4, 5], -2.0, 2.0, &mut rng);
    let head = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
    let err = finite_diff_check(&mut || x.softmax_rows()?.mul(&head)?.sum(), &x, 1e-5).unwrap();
    assert!(err <= 1e-6, "max rel err {}", err);
}

#[test]
fn sigmoid_at_zero() {
    let x = Tensor::zeros(&[1]);
    assert_eq!(x.sigmoid().unwrap().to_vec(), vec![0.5]);
}

#[test]
fn channel_broadcast_multiply() {
    let x = Tensor::ones(&[2, 2, 2]);
    let s = Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap();
    let y = x.mul_channel(&s).unwrap();
    assert_eq!(y.to_vec(), vec![2., 2., 2., 2., 3., 3., 3., 3.]);
}

#[test]
fn add_gradient_is_one() {
    let mut rng = Rng::new(17);
    let a = Tensor::param_uniform(&[3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
    let err = finite_diff_check(&mut || a.add(&b)?.sum(), &a, 1e-5).unwrap();
    assert!(err <= 1e-9);
    assert_close(&a.grad().unwrap(), &vec![1.0; 9], 1e-15);
}

#[test]
fn avg_pool_global_values_and_gradient() {
    let x = Tensor::from_vec(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    assert_eq!(x.avg_pool_global().unwrap().to_vec(), vec![2.5]);

    let c = Tensor::full(&[3, 4, 4], 0.25);
    assert_close(&c.avg_pool_global().unwrap().to_vec(), &[0.25; 3], 1e-15);

    let p = Tensor::param(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    p.avg_pool_global().unwrap().sum().unwrap().backward().unwrap();
    assert_close(&p.grad().unwrap(), &[0.25; 4], 1e-15);
}

#[test]
fn max_pool_and_upsample_values() {
    let x = Tensor::from_vec(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    assert_eq!(x.max_pool_2x2().unwrap().to_vec(), vec![4.0]);

    let u = Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
    assert_eq!(
        u.upsample_nearest_2x().unwrap().to_vec(),
        vec![5., 5., 5., 5.]
    );

    let odd = Tensor::zeros(&[1, 3, 4]);
    assert!(matches!(odd.max_pool_2x2(), Err(Error::Shape { .. })));
}

#[test]
fn max_pool_gradient_routes_to_argmax() {
    let p = Tensor::param(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    p.max_pool_2x2().unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(p.grad().unwrap(), vec![0., 0., 0., 1.]);
}

#[test]
fn bce_loss_values() {
    let ones = Tensor::ones(&[2, 2]);
    let loss = ones.bce_loss(&ones).unwrap();
    assert!(loss.item() < 1e-6, "clamped perfect prediction, got {}", loss.item());

    let half = Tensor::full(&[2, 2], 0.5);
    let gt = Tensor::from_vec(&[2, 2], vec![0., 1., 1., 0.]).unwrap();
    assert!((half.bce_loss(&gt).unwrap().item() - 2.0f64.ln()).abs() < 1e-12);

    let bad = Tensor::full(&[2, 2], 0.5);
    assert!(matches!(
        half.bce_loss(&bad),
        Err(Error::Validation(_))
    ));
}

#[test]
fn bce_loss_gradient_vs_finite_differences() {
    let mut rng = Rng::new(19);
    let pred = Tensor::param_uniform(&[4, 4], 0.05, 0.95, &mut rng);
    let gt_data: Vec<f64> = (0..16).map(|_| f64::from(rng.next_f64() > 0.5)).collect();
    let gt = Tensor::from_vec(&[4, 4], gt_data).unwrap();
    let err = finite_diff_check(&mut || pred.bce_loss(&gt), &pred, 1e-6).unwrap();
    assert!(err <= 1e-6, "max rel err {}", err);
}

#[test]
fn backward_sum_of_squares() {
    let x = Tensor::param(&[4], vec![1., -2., 3., 0.5]).unwrap();
    x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
    assert_close(&x.grad().unwrap(), &[2., -4., 6., 1.], 1e-12);
}

#[test]
fn backward_disconnected_param_stays_zero() {
    let x = Tensor::param(&[2], vec![1., 2.]).unwrap();
    let unused = Tensor::param(&[2], vec![3., 4.]).unwrap();
    x.sum().unwrap().backward().unwrap();
    assert_eq!(unused.grad().unwrap(), vec![0., 0.]);
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::param(&[2], vec![1., 2.]).unwrap();
    let y = x.mul(&x).unwrap();
    assert!(matches!(y.backward(), Err(Error::Usage(_))));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let x = Tensor::param(&[2], vec![1., 2.]).unwrap();
    let run = |x: &Tensor| x.mul(x).unwrap().sum().unwrap().backward().unwrap();
    run(&x);
    run(&x);
    assert_close(&x.grad().unwrap(), &[4., 8.], 1e-12);
    x.zero_grad();
    run(&x);
    assert_close(&x.grad().unwrap(), &[2., 4.], 1e-12);
}

#[test]
fn chained_conv_relu_bce_gradient() {
    let mut rng = Rng::new(23);
    let x = Tensor::param_uniform(&[2, 4, 4], 0.1, 0.9, &mut rng);
    let w = Tensor::param_uniform(&[1, 2, 3, 3], -0.4, 0.4, &mut rng);
    let b = Tensor::param_uniform(&[1], 0.1, 0.2, &mut rng);
    let gt_data: Vec<f64> = (0..16).map(|_| f64::from(rng.next_f64() > 0.5)).collect();
    let gt = Tensor::from_vec(&[1, 4, 4], gt_data).unwrap();
    for p in [&x, &w, &b] {
        let err = finite_diff_check(
            &mut || x.conv2d(&w, &b, 1)?.relu()?.sigmoid()?.bce_loss(&gt),
            p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "max rel err {}", err);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = Rng::new(29);
    let a = Tensor::uniform(&[7, 5], -3.0, 3.0, &mut rng);
    let b = Tensor::uniform(&[5, 6], -3.0, 3.0, &mut rng);
    let r1 = a.matmul(&b).unwrap().softmax_rows().unwrap().to_vec();
    let r2 = a.matmul(&b).unwrap().softmax_rows().unwrap().to_vec();
    assert_eq!(r1, r2);
}

#[test]
fn upsample_then_block_average_is_identity() {
    let mut rng = Rng::new(31);
    let x = Tensor::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
    let up = x.upsample_nearest_2x().unwrap();
    // Average each 2x2 block by hand and compare with the input.
    let (c, h, w) = (3, 4, 5);
    let ud = up.to_vec();
    let xd = x.to_vec();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += ud[(ch * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj];
                    }
                }
                assert_eq!(acc / 4.0, xd[(ch * h + i) * w + j]);
            }
        }
    }
}

#[test]
fn nonfinite_forward_is_an_error() {
    let x = Tensor::from_vec(&[1], vec![1e308]).unwrap();
    assert!(matches!(
        x.mul(&x),
        Err(Error::NonFinite { .. })
    ));
    assert!(Tensor::from_vec(&[1], vec![f64::NAN]).is_err());
}

#[test]
fn tensor_io_round_trip() {
    let mut rng = Rng::new(37);
    let t = Tensor::uniform(&[2, 3, 4], -10.0, 10.0, &mut rng);
    let mut buf = Vec::new();
    write_tensor(&mut buf, &t).unwrap();
    let back = read_tensor(&mut buf.as_slice()).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.to_vec(), t.to_vec());

    // Scalars (rank 0) survive too.
    let s = Tensor::scalar(3.25);
    let mut buf = Vec::new();
    write_tensor(&mut buf, &s).unwrap();
    let back = read_tensor(&mut buf.as_slice()).unwrap();
    assert_eq!(back.rank(), 0);
    assert_eq!(back.item(), 3.25);

    let mut garbage: &[u8] = b"NOPE";
    assert!(read_tensor(&mut garbage).is_err());
}

#[test]
fn concat_channels_splits_gradient() {
    let a = Tensor::param(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = Tensor::param(&[2, 2, 2], vec![0.; 8]).unwrap();
    let cat = Tensor::concat_channels(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(cat.shape(), &[3, 2, 2]);
    cat.scale(2.0).unwrap().sum().unwrap().backward().unwrap();
    assert_close(&a.grad().unwrap(), &[2.; 4], 1e-15);
    assert_close(&b.grad().unwrap(), &[2.; 8], 1e-15);
}

#[test]
fn transpose_round_trip_and_gradient() {
    let mut rng = Rng::new(41);
    let x = Tensor::param_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let tt = x.transpose().unwrap().transpose().unwrap();
    assert_eq!(tt.to_vec(), x.to_vec());
    let head = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let err = finite_diff_check(&mut || x.transpose()?.mul(&head)?.sum(), &x, 1e-5).unwrap();
    assert!(err <= 1e-9);
}
