use super::*;
use crate::config::Task;
use crate::error::Error;
use crate::losses::total_loss_var;
use crate::text::{encode_text, GrainedDescriptions, TextEncoderProvider};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> Config {
    let mut cfg = Config::desk(Task::Mef);
    cfg.channel_widths = alloc::vec![4, 8, 8];
    cfg.heads = 2;
    cfg.embed_dim = 8;
    cfg.text_native_dim = 8;
    cfg
}

fn smooth_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: [f64; 3] = [rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.5, rng.random::<f64>() * 6.0];
    Image::from_fn(h, w, ColorSpace::Rgb, |y, x, c| {
        0.5 + 0.4 * libm::sin(f[0] * y as f64 + f[1] * x as f64 + f[2] + c as f64)
    })
    .unwrap()
}

fn pair(h: usize, w: usize) -> ImagePair {
    ImagePair::new(smooth_image(1, h, w), smooth_image(2, h, w)).unwrap()
}

fn texts(dim: usize) -> TextFeatureSet {
    let d = GrainedDescriptions::new("thin branches and fine grain", "a tree left of a lamp", "a night street").unwrap();
    encode_text(&d, &TextEncoderProvider::Stub { dim, seed: 5 }).unwrap()
}

/// Sets every modulation strength so text actually reaches the output.
fn with_gamma<T: Real>(model: &mut Model<T>, v: f64) {
    for name in ModelParams::<T>::gamma_names() {
        model.params.get_mut(name).unwrap().data_mut()[0] = T::lit(v);
    }
}

#[test]
fn output_shapes_and_range() {
    let cfg = tiny_cfg();
    let model = Model::<f32>::init(cfg.clone(), 3).unwrap();
    let out = model.forward(&pair(16, 24), &texts(8)).unwrap();
    for img in [&out.fused, &out.intermediate_l1, &out.intermediate_l2] {
        assert_eq!(img.dims(), (16, 24, 3));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let (pa, pb) = encode_visual(&pair(16, 24), &model).unwrap();
    let shapes: Vec<&[usize]> = pa.levels.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, [&[4, 16, 24][..], &[8, 8, 12], &[8, 4, 6]]);
    assert_eq!(pb.levels.len(), 3);
}

#[test]
fn grayscale_inputs_are_lifted_to_rgb() {
    let model = Model::<f32>::init(tiny_cfg(), 3).unwrap();
    let p = pair(16, 16);
    let g = ImagePair::new(p.a.to_grayscale(), p.b.to_grayscale()).unwrap();
    assert_eq!(model.forward(&g, &texts(8)).unwrap().fused.channels(), 3);
}

#[test]
fn sizes_not_divisible_by_four_are_rejected_or_padded() {
    let model = Model::<f32>::init(tiny_cfg(), 3).unwrap();
    let p = pair(18, 16);
    assert!(matches!(model.forward(&p, &texts(8)), Err(Error::Contract(_))));
    let fused = fuse_padded(&model, &p, &texts(8)).unwrap();
    assert_eq!(fused.dims(), (18, 16, 3));
}

#[test]
fn decoder_level_three_is_a_contract_error() {
    let model = Model::<f32>::init(tiny_cfg(), 3).unwrap();
    let mut s = Session::new(&model, false);
    let x = s.graph.constant(Tensor::zeros(&[8, 4, 4]));
    assert!(matches!(s.decode_intermediate(3, x, x), Err(Error::Contract(_))));
    assert!(matches!(s.tgvm(x, x, 0), Err(Error::Contract(_))));
}

#[test]
fn zero_gamma_makes_modulation_an_identity() {
    for mode in [TgvmMode::VisualQuery, TgvmMode::TextQuery] {
        let mut cfg = tiny_cfg();
        cfg.tgvm_mode = mode;
        let mut model = Model::<f64>::init(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::new(&[8, 4, 4], (0..128).map(|_| rng.random::<f64>() - 0.5).collect());
        let t = &texts(8).levels[1];
        assert_eq!(tgvm(&model, &f, t, 2).unwrap(), f);
        with_gamma(&mut model, 0.7);
        assert_ne!(tgvm(&model, &f, t, 2).unwrap(), f);
    }
}

#[test]
fn repeated_text_token_matches_single_token() {
    for mode in [TgvmMode::VisualQuery, TgvmMode::TextQuery] {
        let mut cfg = tiny_cfg();
        cfg.tgvm_mode = mode;
        let mut model = Model::<f64>::init(cfg, 4).unwrap();
        with_gamma(&mut model, 1.0);
        let f = Tensor::new(&[4, 4, 4], (0..64).map(|i| libm::sin(i as f64)).collect());
        let one = TextMatrix::new(1, 8, (0..8).map(|i| i as f64 / 8.0).collect()).unwrap();
        let mut twice = one.data.clone();
        twice.extend_from_slice(&one.data);
        let two = TextMatrix::new(2, 8, twice).unwrap();
        let a = tgvm(&model, &f, &one, 1).unwrap();
        let b = tgvm(&model, &f, &two, 1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn text_is_ignored_without_guidance() {
    let mut cfg = tiny_cfg();
    cfg.ablation.use_tg = false;
    let mut model = Model::<f32>::init(cfg, 4).unwrap();
    with_gamma(&mut model, 1.0);
    let other = {
        let d = GrainedDescriptions::new("x", "y", "z").unwrap();
        encode_text(&d, &TextEncoderProvider::Stub { dim: 8, seed: 9 }).unwrap()
    };
    let p = pair(16, 16);
    assert_eq!(model.forward(&p, &texts(8)).unwrap(), model.forward(&p, &other).unwrap());
}

#[test]
fn text_changes_output_with_guidance() {
    let mut model = Model::<f32>::init(tiny_cfg(), 4).unwrap();
    with_gamma(&mut model, 1.0);
    let other = {
        let d = GrainedDescriptions::new("x", "y", "z").unwrap();
        encode_text(&d, &TextEncoderProvider::Stub { dim: 8, seed: 9 }).unwrap()
    };
    let p = pair(16, 16);
    assert_ne!(model.forward(&p, &texts(8)).unwrap().fused, model.forward(&p, &other).unwrap().fused);
}

#[test]
fn mismatched_text_width_is_a_contract_error() {
    let model = Model::<f32>::init(tiny_cfg(), 4).unwrap();
    assert!(matches!(model.forward(&pair(16, 16), &texts(12)), Err(Error::Contract(_))));
    let mut s = Session::new(&model, false);
    let a = s.graph.constant(Tensor::zeros(&[8, 4, 4]));
    let b = s.graph.constant(Tensor::zeros(&[8, 4, 2]));
    assert!(matches!(s.fuse_and_decode(a, b), Err(Error::Contract(_))));
}

#[test]
fn single_token_broadcasts_one_value() {
    let mut model = Model::<f64>::init(tiny_cfg(), 4).unwrap();
    with_gamma(&mut model, 0.8);
    let f = Tensor::new(&[8, 4, 6], (0..192).map(|i| libm::cos(0.3 * i as f64)).collect());
    let one = TextMatrix::new(1, 8, (0..8).map(|i| 0.1 * i as f64).collect()).unwrap();
    let attn = tgvm_attention(&model, &f, &one, 2).unwrap();
    assert!(attn.data().iter().all(|w| *w == 1.0));
    let out = tgvm(&model, &f, &one, 2).unwrap();
    for c in 0..8 {
        let d0 = out.data()[c * 24] - f.data()[c * 24];
        for i in 1..24 {
            assert!((out.data()[c * 24 + i] - f.data()[c * 24 + i] - d0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    for mode in [TgvmMode::VisualQuery, TgvmMode::TextQuery] {
        let mut cfg = tiny_cfg();
        cfg.tgvm_mode = mode;
        let model = Model::<f32>::init(cfg, 6).unwrap();
        let f = Tensor::new(&[8, 4, 4], (0..128).map(|i| libm::sinf(i as f32)).collect());
        let attn = tgvm_attention(&model, &f, &texts(8).levels[2], 3).unwrap();
        let keys = *attn.shape().last().unwrap();
        for row in attn.data().chunks(keys) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn disabled_guidance_equals_zero_gamma() {
    let cfg = tiny_cfg();
    let mut off = cfg.clone();
    off.ablation.use_tg = false;
    let on = Model::<f32>::init(cfg, 7).unwrap();
    let off = Model::<f32>::init(off, 7).unwrap();
    let p = pair(16, 16);
    assert_eq!(on.forward(&p, &texts(8)).unwrap(), off.forward(&p, &texts(8)).unwrap());
}

#[test]
fn shared_encoder_and_swapped_inputs() {
    let model = Model::<f32>::init(tiny_cfg(), 7).unwrap();
    let x = smooth_image(3, 16, 16);
    let (pa, pb) = encode_visual(&ImagePair::new(x.clone(), x).unwrap(), &model).unwrap();
    assert_eq!(pa, pb);
    let p = pair(16, 16);
    for out in [model.forward(&p, &texts(8)).unwrap(), model.forward(&p.swapped(), &texts(8)).unwrap()] {
        assert!(out.fused.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn encoder_is_finite_under_fuzzing() {
    for seed in 0..100 {
        let model = Model::<f32>::init(tiny_cfg(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = |rng: &mut ChaCha8Rng| Image::from_fn(8, 8, ColorSpace::Rgb, |_, _, _| rng.random::<f64>()).unwrap();
        let p = ImagePair::new(img(&mut rng), img(&mut rng)).unwrap();
        let (pa, pb) = encode_visual(&p, &model).unwrap();
        assert!(pa.levels.iter().chain(&pb.levels).all(|t| t.all_finite()), "seed {seed}");
    }
}

/// Finite differences of a random projection of a decoder output w.r.t. its input features.
fn check_decoder(level: Option<usize>) {
    let model = Model::<f64>::init(tiny_cfg(), 9).unwrap();
    let (c, side) = match level {
        Some(1) => (4, 8),
        Some(_) => (8, 4),
        None => (8, 2),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = c * side * side;
    let fa: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let fb: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let eval = |fa: &[f64], grad: bool| {
        let mut s = Session::new(&model, false);
        let a = s.graph.param(Tensor::from_f64(&[c, side, side], fa));
        let b = s.graph.constant(Tensor::from_f64(&[c, side, side], &fb));
        let out = match level {
            Some(l) => s.decode_intermediate(l, a, b).unwrap(),
            None => s.fuse_and_decode(a, b).unwrap(),
        };
        assert_eq!(&s.graph.shape(out)[1..], &[8, 8]);
        let mut prng = ChaCha8Rng::seed_from_u64(5);
        let dir: Vec<f64> = (0..s.graph.value(out).len()).map(|_| prng.random::<f64>() - 0.5).collect();
        let d = s.graph.constant(Tensor::from_f64(s.graph.shape(out), &dir));
        let m = s.graph.mul(out, d);
        let l = s.graph.sum(m);
        let g = if grad { s.graph.backward(l).get(a).cloned() } else { None };
        (s.graph.scalar(l), g)
    };
    let (_, g) = eval(&fa, true);
    let g = g.unwrap();
    for i in (0..n).step_by(7) {
        let (mut p, mut m) = (fa.clone(), fa.clone());
        p[i] += 1e-6;
        m[i] -= 1e-6;
        let num = (eval(&p, false).0 - eval(&m, false).0) / 2e-6;
        let ana = g.data()[i];
        assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-8) < 1e-3, "{level:?} [{i}]: {ana} vs {num}");
    }
}

#[test]
fn decoders_match_finite_differences() {
    check_decoder(Some(1));
    check_decoder(Some(2));
    check_decoder(None);
}

#[test]
fn native_width_projection() {
    let mut cfg = tiny_cfg();
    cfg.text_native_dim = 12;
    let model = Model::<f32>::init(cfg, 4).unwrap();
    assert!(model.params.get("tgvm1.text_in.w").is_some());
    assert!(model.forward(&pair(16, 16), &texts(12)).is_ok());
}

fn loss_f64(model: &Model<f64>, p: &ImagePair, t: &TextFeatureSet) -> f64 {
    let mut s = Session::new(model, false);
    let out = s.forward(p, t).unwrap();
    let (l, _) = total_loss_var(&mut s.graph, out, p, &model.cfg);
    s.graph.scalar(l)
}

/// Central differences in f64 on a sample of scalars from every parameter tensor.
/// Entries with tiny gradients are skipped: the loss is O(100), so their
/// difference quotients are dominated by rounding.
fn check_gradients<T: Real>(mode: TgvmMode, tol: f64) {
    let mut cfg = tiny_cfg();
    cfg.tgvm_mode = mode;
    let mut model = Model::<T>::init(cfg, 11).unwrap();
    with_gamma(&mut model, 0.5);
    let p = pair(16, 16);
    let t = texts(8);
    let mut s = Session::new(&model, true);
    let out = s.forward(&p, &t).unwrap();
    let (l, _) = total_loss_var(&mut s.graph, out, &p, &model.cfg);
    let grads = s.graph.backward(l);
    let vars = s.param_vars().to_vec();

    let base = Model { cfg: model.cfg.clone(), params: model.params.cast::<f64>() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = 1e-4;
    let mut checked = 0;
    for (pi, name) in model.params.names().iter().enumerate() {
        let n = model.params.tensors()[pi].len();
        for _ in 0..3 {
            let i = rng.random_range(0..n);
            let ana = grads.get(vars[pi]).map(|g| g.data()[i].to_f64_lossy()).unwrap_or(0.0);
            if ana.abs() < 1e-3 {
                continue;
            }
            let quotient = |h: f64| {
                let mut plus = base.clone();
                plus.params.tensors_mut()[pi].data_mut()[i] += h;
                let mut minus = base.clone();
                minus.params.tensors_mut()[pi].data_mut()[i] -= h;
                (loss_f64(&plus, &p, &t) - loss_f64(&minus, &p, &t)) / (2.0 * h)
            };
            // Richardson step cancels the O(h^2) term of the central difference.
            let num = (4.0 * quotient(eps / 2.0) - quotient(eps)) / 3.0;
            let err = (num - ana).abs() / num.abs().max(ana.abs());
            assert!(err < tol, "{name}[{i}]: analytic {ana} vs numeric {num}");
            checked += 1;
        }
    }
    assert!(checked >= 32, "only {checked} gradients were large enough to check");
}

#[test]
fn gradients_match_finite_differences_f64() {
    check_gradients::<f64>(TgvmMode::VisualQuery, 1e-5);
    check_gradients::<f64>(TgvmMode::TextQuery, 1e-5);
}

#[test]
fn gradients_match_finite_differences_f32() {
    check_gradients::<f32>(TgvmMode::VisualQuery, 1e-2);
}

#[test]
fn training_loss_backpropagates_to_every_parameter() {
    let mut model = Model::<f32>::init(tiny_cfg(), 11).unwrap();
    with_gamma(&mut model, 0.5);
    let p = pair(16, 16);
    let mut s = Session::new(&model, true);
    let out = s.forward(&p, &texts(8)).unwrap();
    let (l, bd) = total_loss_var(&mut s.graph, out, &p, &model.cfg);
    assert!(bd.is_finite() && bd.total > 0.0);
    let grads = s.graph.backward(l);
    for (v, name) in s.param_vars().iter().zip(model.params.names()) {
        let g = grads.get(*v).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(g.all_finite() && g.data().iter().any(|x| *x != 0.0), "{name}");
    }
}


