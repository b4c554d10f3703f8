use super::*;

fn image(h: usize, w: usize, seed: u64) -> Image {
    let mut s = seed;
    let data = (0..h * w * 3)
        .map(|_| {
            s = derive_seed(s, &[1]);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    Image::new(h, w, data).unwrap()
}

fn features_of(params: &NetParams<f32>, imgs: &[&Image]) -> Tensor<f32> {
    let mut tape = Tape::new();
    let enc = params.encoder.bind(&mut tape, false);
    let x = tape.constant(images_to_tensor(imgs).unwrap());
    let f = encoder_forward(&mut tape, &params.config, &enc, x).unwrap();
    tape.value(f).clone()
}

#[test]
fn encoder_shape_contract() {
    let p = init_params::<f32>(&NetConfig::default(), 1).unwrap();
    let img = image(64, 64, 3);
    assert_eq!(features_of(&p, &[&img]).shape(), &[1, 64, 16, 16]);
}

#[test]
fn encoder_rejects_indivisible_input() {
    let p = init_params::<f32>(&NetConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let enc = p.encoder.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 3, 30, 32]));
    let err = encoder_forward(&mut tape, &p.config, &enc, x).unwrap_err();
    assert!(err.to_string().contains("divisible by 4"), "{err}");
}

#[test]
fn zero_input_gives_finite_features() {
    let p = init_params::<f32>(&NetConfig::default(), 1).unwrap();
    let img = Image::filled(16, 16, [0.0; 3]);
    let f = features_of(&p, &[&img]);
    assert!(f.is_finite());
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn features_are_deterministic() {
    let img = image(32, 32, 9);
    let a = features_of(&init_params(&NetConfig::default(), 4).unwrap(), &[&img]);
    let b = features_of(&init_params(&NetConfig::default(), 4).unwrap(), &[&img]);
    assert_eq!(a, b);
}

fn head_probs(params: &NetParams<f32>, k: usize, features: Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let head = params.heads[k].bind(&mut tape, false);
    let f = tape.constant(features);
    let out = classifier_forward(&mut tape, &params.config, &head, f).unwrap();
    assert_eq!(tape.shape(out.logits)[2] * DOWNSAMPLE, tape.shape(out.probs)[2]);
    tape.value(out.probs).clone()
}

#[test]
fn zeroed_head_is_uniform() {
    let mut p = init_params::<f32>(&NetConfig::default(), 2).unwrap();
    p.zero_head_outputs();
    let probs = head_probs(&p, 0, Tensor::full(&[1, 64, 4, 4], 0.3));
    assert_eq!(probs.shape(), &[1, 5, 16, 16]);
    assert!(probs.data().iter().all(|&v| (v - 0.2).abs() < 1e-6));
}

#[test]
fn head_probabilities_sum_to_one() {
    let p = init_params::<f32>(&NetConfig::default(), 2).unwrap();
    let img = image(32, 32, 5);
    let probs = head_probs(&p, 1, features_of(&p, &[&img]));
    let (k, hw) = (5, 32 * 32);
    for px in 0..hw {
        let s: f32 = (0..k).map(|c| probs.data()[c * hw + px]).sum();
        assert!((s - 1.0).abs() < 1e-6, "pixel {px}: {s}");
    }
}

#[test]
fn heads_have_distinct_parameters_and_outputs() {
    let p = init_params::<f32>(&NetConfig::default(), 2).unwrap();
    assert_ne!(p.heads[0], p.heads[1]);
    assert_ne!(p.heads[1], p.heads[2]);
    let img = image(32, 32, 5);
    let f = features_of(&p, &[&img]);
    let argmax = |t: &Tensor<f32>| {
        let hw = 32 * 32;
        (0..hw)
            .map(|px| {
                (0..5)
                    .max_by(|&a, &b| t.data()[a * hw + px].total_cmp(&t.data()[b * hw + px]))
                    .unwrap()
            })
            .collect::<Vec<_>>()
    };
    let a = argmax(&head_probs(&p, 0, f.clone()));
    let b = argmax(&head_probs(&p, 1, f));
    let disagree = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    assert!(disagree > 0);
}

fn disc_logits(params: &NetParams<f32>, features: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let d = params.discriminator.bind(&mut tape, false);
    let f = tape.constant(features);
    let out = discriminator_forward(&mut tape, &params.config, &d, f)?;
    Ok(tape.value(out).clone())
}

#[test]
fn discriminator_shape_arithmetic() {
    let p = init_params::<f32>(&NetConfig::default(), 3).unwrap();
    let out = disc_logits(&p, Tensor::full(&[2, 64, 16, 16], 0.1)).unwrap();
    assert_eq!(out.shape(), &[2, 1, 1, 1]);
    let out = disc_logits(&p, Tensor::full(&[1, 64, 64, 16], 0.1)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 2, 1]);
    let err = disc_logits(&p, Tensor::full(&[1, 64, 2, 8], 0.1)).unwrap_err();
    assert!(err.to_string().contains("at least 16×16"), "{err}");
}

#[test]
fn discriminator_is_batch_independent() {
    let p = init_params::<f32>(&NetConfig::default(), 3).unwrap();
    let (a, b) = (image(64, 64, 1), image(64, 64, 2));
    let single = disc_logits(&p, features_of(&p, &[&a])).unwrap();
    let double = disc_logits(&p, features_of(&p, &[&a, &b])).unwrap();
    assert_eq!(double.shape()[0], 2);
    assert_eq!(double.data()[..single.len()], single.data()[..]);
}

#[test]
fn zero_features_give_zero_logits() {
    let p = init_params::<f32>(&NetConfig::default(), 3).unwrap();
    let out = disc_logits(&p, Tensor::zeros(&[1, 64, 16, 16])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn init_is_deterministic_and_he_scaled() {
    let a = init_params::<f32>(&NetConfig::default(), 10).unwrap();
    assert_eq!(a, init_params::<f32>(&NetConfig::default(), 10).unwrap());
    assert_ne!(a, init_params::<f32>(&NetConfig::default(), 11).unwrap());
    for layer in a.encoder.layers.iter().chain(&a.heads[0].layers) {
        if layer.weight.len() < 5000 {
            continue;
        }
        let fan_in = (layer.shape[1] * layer.shape[2] * layer.shape[3]) as f64;
        let n = layer.weight.len() as f64;
        let mean = layer.weight.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = layer.weight.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / fan_in;
        assert!((var - expect).abs() < 0.2 * expect, "{:?}: {var} vs {expect}", layer.shape);
        assert!(layer.bias.iter().all(|&b| b == 0.0));
    }
}

#[test]
fn param_binding_order_matches_tensors() {
    let p = init_params::<f32>(&NetConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let b = p.heads[0].bind(&mut tape, true);
    let vars = b.vars();
    let tensors = p.heads[0].tensors();
    assert_eq!(vars.len(), tensors.len());
    for (v, t) in vars.iter().zip(tensors) {
        assert_eq!(tape.value(*v).data(), &t[..]);
    }
}
