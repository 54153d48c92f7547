use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
}

/// Checks every leaf gradient of `build` against central differences.
fn check(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &leaves);
        // Project onto a fixed random direction so every output element matters.
        let mut prng = ChaCha8Rng::seed_from_u64(99);
        let dir = rand_tensor(&mut prng, g.shape(out));
        let d = g.constant(dir);
        let p = g.mul(out, d);
        let s = g.sum(p);
        let grads = g.backward(s);
        let gs = leaves
            .iter()
            .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v))))
            .collect();
        (g.scalar(s), gs)
    };
    let (_, analytic) = eval(&inputs);
    let eps = 1e-6;
    for (li, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[li].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[li].data_mut()[i] -= eps;
            let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let ana = analytic[li].data()[i];
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(err < 1e-5, "leaf {li} elem {i}: analytic {ana} vs numeric {num}");
        }
    }
}

#[test]
fn elementwise_ops() {
    check(&[&[2, 3, 3], &[2, 3, 3]], 1, |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.mul(a, v[0]);
        let c = g.sub(b, v[1]);
        let d = g.gelu(c);
        let e = g.sigmoid(d);
        let f = g.add_scalar(e, 0.5);
        let h = g.div(d, f);
        g.mul_scalar(h, 1.7)
    });
}

#[test]
fn abs_away_from_kink() {
    check(&[&[4, 4]], 2, |g, v| {
        let s = g.add_scalar(v[0], 3.0);
        g.abs(s)
    });
}

#[test]
fn broadcast_ops() {
    check(&[&[3, 2, 2], &[1], &[3], &[3]], 3, |g, v| {
        let a = g.scale_by(v[0], v[1]);
        let b = g.channel_scale(a, v[2]);
        g.channel_shift(b, v[3])
    });
}

#[test]
fn reductions() {
    check(&[&[3, 4]], 4, |g, v| {
        let m = g.mean_dim0(v[0]);
        let s = g.sum(v[0]);
        let mu = g.mean(v[0]);
        let t = g.scale_by(m, s);
        g.scale_by(t, mu)
    });
}

#[test]
fn conv_variants() {
    check(&[&[2, 5, 6], &[3, 2, 3, 3], &[3]], 5, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1));
    check(&[&[2, 6, 6], &[4, 2, 3, 3], &[4]], 6, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1));
    check(&[&[4, 5, 5], &[4, 1, 3, 3]], 7, |g, v| g.conv2d(v[0], v[1], None, 1, 1, 4));
    check(&[&[3, 4, 4], &[2, 3, 1, 1], &[2]], 8, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1));
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 5, 7]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, None, 2, 1, 1);
    assert_eq!(g.shape(y), &[3, 3, 4]);
    for oc in 0..3 {
        for oy in 0..3 {
            for ox in 0..4 {
                let mut s = 0.0;
                for ic in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..7).contains(&ix) {
                                s += w.data()[((oc * 2 + ic) * 3 + ky) * 3 + kx] * x.data()[(ic * 5 + iy as usize) * 7 + ix as usize];
                            }
                        }
                    }
                }
                assert!((g.value(y).data()[(oc * 3 + oy) * 4 + ox] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn concat_slice_reshape_upsample() {
    check(&[&[2, 3, 3], &[1, 3, 3]], 11, |g, v| {
        let c = g.concat(&[v[0], v[1]]);
        let s = g.slice(c, 1, 2);
        let u = g.upsample2x(s);
        g.reshape(u, &[2, 36])
    });
}

#[test]
fn norms_and_softmax() {
    check(&[&[4, 3, 2]], 12, |g, v| g.channel_norm(v[0], 1e-5));
    check(&[&[2, 3, 5]], 13, |g, v| g.softmax_last(v[0]));
    check(&[&[2, 3, 5]], 14, |g, v| g.l2_normalize_last(v[0], 1e-12));
}

#[test]
fn matmul_all_transposes() {
    for (i, (ta, tb)) in [(false, false), (true, false), (false, true), (true, true)].into_iter().enumerate() {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        check(&[sa, sb], 20 + i as u64, move |g, v| g.matmul(v[0], v[1], ta, tb));
    }
}

#[test]
fn sobel_and_filter() {
    check(&[&[2, 6, 5]], 30, |g, v| g.sobel_magnitude(v[0]));
    let taps = gaussian_taps(3, 1.0);
    check(&[&[2, 6, 5]], 31, move |g, v| g.filter_valid(v[0], &taps));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[2], 1.0));
    let p = g.param(Tensor::full(&[2], 2.0));
    let m = g.mul(c, p);
    let s = g.sum(m);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
}
