use super::*;
use crate::gradcheck;
use crate::Rng;
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

fn assert_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = gradcheck::check(inputs, H, 64, f).unwrap();
    assert!(r.max_rel_err < TOL, "max rel err {} at {:?}", r.max_rel_err, r.worst);
}

/// Reduce any tensor to a scalar through a fixed random projection so that
/// every output component carries a distinct upstream gradient.
fn project(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = rand_t(t.shape(x), seed);
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    t.sum(p)
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let ia = t.matmul(i2, a).unwrap();
    assert_eq!(t.value(ia), t.value(a));
    let col = t.constant(Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap());
    let out = t.matmul(a, col).unwrap();
    assert_eq!(t.value(out).data(), &[2.0, 4.0]);
    assert!(matches!(t.matmul(col, col), Err(Error::Dimension(_))));
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[4, 2], 2);
    let mut t = Tape::new();
    let va = t.param(a.clone());
    let vb = t.param(b.clone());
    let c = t.matmul(va, vb).unwrap();
    let s = t.sum(c).unwrap();
    t.backward(s).unwrap();
    let expect = Tensor::ones(&[3, 2]).matmul(&b.transpose().unwrap()).unwrap();
    assert!(t.grad(va).unwrap().max_abs_diff(&expect) < 1e-12);
    // and the finite-difference oracle agrees
    assert_grad(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum(c)
    });
}

#[test]
fn softmax_examples() {
    let eq = Tensor::new(&[5], vec![0.7; 5]).unwrap();
    for tau in [0.04, 0.1, 1.0, 3.0] {
        let p = softmax_temperature(&eq, tau).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
    let l = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    let p = softmax_temperature(&l, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((p.data()[0] - 0.7311).abs() < 1e-4 && (p.data()[1] - 0.2689).abs() < 1e-4);
    let sharp = softmax_temperature(&l, 0.04).unwrap();
    assert!(sharp.data()[0] > 1.0 - 1e-10);
    assert!(matches!(softmax_temperature(&l, 0.0), Err(Error::Parameter(_))));
    assert!(matches!(softmax_temperature(&l, -1.0), Err(Error::Parameter(_))));
}

#[test]
fn cross_entropy_examples() {
    let p = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
    assert!((cross_entropy(&p, &p).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    let one = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    assert!(cross_entropy(&one, &one).unwrap().abs() < 1e-12);
    let bad = Tensor::new(&[2], vec![0.6, 0.6]).unwrap();
    assert!(matches!(cross_entropy(&bad, &p), Err(Error::Contract(_))));
    assert!(matches!(cross_entropy(&p, &bad), Err(Error::Contract(_))));
}

#[test]
fn gibbs_inequality_over_random_pairs() {
    let mut rng = Rng::new(11);
    for _ in 0..1000 {
        let a = softmax_temperature(&Tensor::randn(&[6], 2.0, &mut rng), 1.0).unwrap();
        let b = softmax_temperature(&Tensor::randn(&[6], 2.0, &mut rng), 1.0).unwrap();
        assert!(cross_entropy(&a, &b).unwrap() >= cross_entropy(&a, &a).unwrap() - 1e-12);
    }
}

#[test]
fn backward_examples() {
    let x = rand_t(&[2, 3, 2], 5);
    let mut t = Tape::new();
    let vx = t.param(x.clone());
    let s = t.sum(vx).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(vx).unwrap(), Tensor::ones(&[2, 3, 2]));

    let mut t = Tape::new();
    let vx = t.param(x.clone());
    let sq = t.mul(vx, vx).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(vx).unwrap().max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-15);

    assert!(matches!(t.backward(vx), Err(Error::Contract(_))));
}

#[test]
fn backward_visits_each_recorded_op_once() {
    let mut t = Tape::new();
    let x = t.param(rand_t(&[3, 3], 1));
    let y = t.gelu(x).unwrap();
    let z = t.add(y, x).unwrap();
    let w = t.mul(z, y).unwrap();
    let s = t.sum(w).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.visited(), t.len());
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(rand_t(&[2, 2], 1));
    let p = t.param(rand_t(&[2, 2], 2));
    let y = t.matmul(c, p).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert!(t.grad(p).is_some());
}

#[test]
fn nonfinite_outputs_are_errors() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[1], vec![1000.0]).unwrap());
    assert!(matches!(t.exp(x), Err(Error::NonFinite("exp"))));
}

#[test]
fn elementwise_gradients() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[3, 4], 2);
    let bias = rand_t(&[4], 3);
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        project(t, s, 9)
    });
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let s = t.sub(v[0], v[1])?;
        project(t, s, 9)
    });
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let s = t.mul(v[0], v[1])?;
        project(t, s, 9)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let s = t.scale(v[0], -1.7)?;
        project(t, s, 9)
    });
    assert_grad(&[a.clone(), bias], |t, v| {
        let s = t.add_bias(v[0], v[1])?;
        project(t, s, 9)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let s = t.exp(v[0])?;
        project(t, s, 9)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let s = t.sigmoid(v[0])?;
        project(t, s, 9)
    });
    assert_grad(&[a.map(|x| 2.0 * x)], |t, v| {
        let s = t.gelu(v[0])?;
        project(t, s, 9)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let s = t.reshape(v[0], &[2, 6])?;
        project(t, s, 9)
    });
    assert_grad(&[a], |t, v| {
        let s = t.scale(v[0], 0.3)?;
        let e = t.exp(s)?;
        t.mean(e)
    });
}

#[test]
fn normalization_and_softmax_gradients() {
    let x = rand_t(&[4, 6], 1);
    let g = rand_t(&[6], 2);
    let b = rand_t(&[6], 3);
    assert_grad(&[x.clone(), g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        project(t, y, 4)
    });
    for tau in [0.1, 1.0] {
        assert_grad(std::slice::from_ref(&x), |t, v| {
            let y = t.softmax_temperature(v[0], tau)?;
            project(t, y, 5)
        });
        assert_grad(std::slice::from_ref(&x), |t, v| {
            let y = t.log_softmax_temperature(v[0], tau)?;
            project(t, y, 5)
        });
    }
    let target = softmax_temperature(&rand_t(&[4, 6], 8), 0.5).unwrap();
    assert_grad(&[x], |t, v| {
        let p = t.softmax_temperature(v[0], 0.7)?;
        t.cross_entropy(&target, p)
    });
}

#[test]
fn structural_gradients() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[2, 4], 2);
    let c = rand_t(&[3, 2], 3);
    assert_grad(&[a.clone(), b.clone()], |t, v| {
        let y = t.concat_rows(v[0], v[1])?;
        project(t, y, 4)
    });
    assert_grad(&[a.clone(), c], |t, v| {
        let y = t.concat_cols(v[0], v[1])?;
        project(t, y, 4)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        project(t, y, 4)
    });
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2, 1])?;
        project(t, y, 4)
    });
    assert_grad(std::slice::from_ref(&b), |t, v| {
        let y = t.repeat_rows(v[0], 3)?;
        project(t, y, 4)
    });
    assert_grad(&[b], |t, v| {
        let y = t.tile_rows(v[0], 3)?;
        project(t, y, 4)
    });
    let img = rand_t(&[2, 3, 2, 3], 6);
    assert_grad(&[img], |t, v| {
        let y = t.upsample2x(v[0])?;
        project(t, y, 4)
    });
}

#[test]
fn conv_gradients_stride_one_and_two() {
    let x = rand_t(&[2, 4, 4, 3], 1);
    for (kernel, stride, cout) in [(3, 1, 5), (3, 2, 4), (1, 1, 2)] {
        let w = Tensor::randn(&[kernel * kernel * 3, cout], 0.3, &mut Rng::new(2));
        assert_grad(&[x.clone(), w], |t, v| {
            let y = t.conv2d(v[0], v[1], kernel, stride)?;
            project(t, y, 3)
        });
    }
}

#[test]
fn conv_matches_direct_sum() {
    let x = rand_t(&[1, 4, 4, 2], 1);
    let w = rand_t(&[18, 3], 2);
    let mut t = Tape::new();
    let vx = t.constant(x.clone());
    let vw = t.constant(w.clone());
    let y = t.conv2d(vx, vw, 3, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 2, 2, 3]);
    let at = |yy: isize, xx: isize, c: usize| {
        if (0..4).contains(&yy) && (0..4).contains(&xx) {
            x.data()[((yy * 4 + xx) as usize) * 2 + c]
        } else {
            0.0
        }
    };
    for oy in 0..2 {
        for ox in 0..2 {
            for o in 0..3 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        for c in 0..2 {
                            let v = at(oy as isize * 2 + ky as isize - 1, ox as isize * 2 + kx as isize - 1, c);
                            s += v * w.data()[((ky * 3 + kx) * 2 + c) * 3 + o];
                        }
                    }
                }
                let got = t.value(y).data()[(oy * 2 + ox) * 3 + o];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_gradients() {
    let q = rand_t(&[2 * 3, 4], 1);
    let k = rand_t(&[2 * 5, 4], 2);
    let v = rand_t(&[2 * 5, 4], 3);
    assert_grad(&[q, k, v], |t, x| {
        let y = t.attention(x[0], x[1], x[2], 2, 2)?;
        project(t, y, 4)
    });
}

#[test]
fn attention_single_key_returns_value() {
    let mut t = Tape::new();
    let q = t.constant(rand_t(&[2 * 7, 6], 1));
    let k = t.constant(rand_t(&[2, 6], 2));
    let v = t.constant(rand_t(&[2, 6], 3));
    let y = t.attention(q, k, v, 2, 3).unwrap();
    let vals = t.value(v).clone();
    for b in 0..2 {
        for r in 0..7 {
            assert_eq!(t.value(y).row(b * 7 + r), vals.row(b));
        }
    }
}

#[test]
fn attention_rejects_bad_geometry() {
    let mut t = Tape::new();
    let q = t.constant(rand_t(&[4, 6], 1));
    let k = t.constant(rand_t(&[4, 5], 2));
    assert!(t.attention(q, k, k, 1, 1).is_err());
    assert!(t.attention(q, q, q, 3, 1).is_err());
    assert!(t.attention(q, q, q, 1, 4).is_err());
}

#[test]
fn composite_attention_block_gradient() {
    // LN → QKV projections → attention → output projection → residual.
    let x = rand_t(&[2 * 4, 8], 1);
    let wq = Tensor::randn(&[8, 8], 0.4, &mut Rng::new(2));
    let wk = Tensor::randn(&[8, 8], 0.4, &mut Rng::new(3));
    let wv = Tensor::randn(&[8, 8], 0.4, &mut Rng::new(4));
    let wo = Tensor::randn(&[8, 8], 0.4, &mut Rng::new(5));
    let g = Tensor::ones(&[8]);
    let b = Tensor::zeros(&[8]);
    assert_grad(&[x, wq, wk, wv, wo, g, b], |t, v| {
        let h = t.layer_norm(v[0], v[5], v[6])?;
        let q = t.matmul(h, v[1])?;
        let k = t.matmul(h, v[2])?;
        let val = t.matmul(h, v[3])?;
        let a = t.attention(q, k, val, 2, 2)?;
        let o = t.matmul(a, v[4])?;
        let r = t.add(o, v[0])?;
        project(t, r, 6)
    });
}

#[test]
fn argmax_preserved_at_low_temperature() {
    let mut rng = Rng::new(4);
    for _ in 0..200 {
        let l = Tensor::randn(&[7], 1.0, &mut rng);
        let p = softmax_temperature(&l, 1e-3).unwrap();
        assert_eq!(argmax(l.data()), argmax(p.data()));
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
}

proptest! {
    #[test]
    fn softmax_slices_are_probability_vectors(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        tau in 0.01f64..5.0,
    ) {
        let t = Tensor::new(&[3, 4], logits).unwrap();
        let p = softmax_temperature(&t, tau).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn moderate_logits_give_interior_probabilities(
        logits in prop::collection::vec(-3.0f64..3.0, 5),
        tau in 0.2f64..5.0,
    ) {
        let t = Tensor::new(&[5], logits).unwrap();
        let p = softmax_temperature(&t, tau).unwrap();
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
