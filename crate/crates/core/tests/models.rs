use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtgan_core::models::{
    is_buffer, Discriminator, DiscriminatorConfig, EncoderConfig, Generator, GeneratorConfig, MetricCnn,
    MetricConfig, ModelError, ModelWeights, Mode, SvddEncoder,
};
use vtgan_core::{Tape, Tensor};

fn noise(n: usize, dim: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn images(n: usize, side: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, 1, side, side], 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v: f32| v.clamp(-1.0, 1.0))
}

fn zero_all(w: &mut ModelWeights, keep: &[&str]) {
    let names: Vec<String> = w.names().map(str::to_string).collect();
    for name in names {
        if is_buffer(&name) || keep.contains(&name.as_str()) {
            continue;
        }
        for v in w.get_mut(&name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
}

#[test]
fn generators_produce_full_size_images() {
    for (cfg, dim) in [(GeneratorConfig::normal(64), 100), (GeneratorConfig::weak(64), 400)] {
        let g = Generator::build(cfg, 1).unwrap();
        let img = g.generate(&noise(1, dim, 2)).unwrap();
        assert_eq!(img.shape(), &[1, 1, 64, 64]);
        assert!(img.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }
}

#[test]
fn zero_weights_give_tanh_of_bias() {
    for cfg in [GeneratorConfig::normal(32), GeneratorConfig::weak(32)] {
        let dim = cfg.noise_dim;
        let mut g = Generator::build(cfg, 3).unwrap();
        zero_all(&mut g.weights, &["g.head.bias"]);
        g.weights.get_mut("g.head.bias").unwrap().data_mut()[0] = 0.7;
        let img = g.generate(&noise(3, dim, 4)).unwrap();
        let first = img.data()[0];
        assert!((first - 0.7f32.tanh()).abs() < 1e-6);
        assert!(img.data().iter().all(|&v| v == first));
    }
}

#[test]
fn weak_generator_is_smaller() {
    for side in [32, 64] {
        let normal = Generator::build(GeneratorConfig::normal(side), 0).unwrap();
        let weak = Generator::build(GeneratorConfig::weak(side), 0).unwrap();
        assert!(weak.weights.param_count() < normal.weights.param_count());
        let dn = Discriminator::build(DiscriminatorConfig::normal(side), 0).unwrap();
        let dw = Discriminator::build(DiscriminatorConfig::weak(side), 0).unwrap();
        assert_eq!(dn.config.layers.len(), 2);
        assert_eq!(dw.config.layers.len(), 1);
    }
}

#[test]
fn discriminator_outputs_probability_and_features() {
    let d = Discriminator::build(DiscriminatorConfig::normal(64), 5).unwrap();
    let mut tape = Tape::new();
    let bound = d.weights.bind(&mut tape, false).unwrap();
    let x = tape.constant(images(2, 64, 6)).unwrap();
    let out = d.forward(&mut tape, &bound, x).unwrap();
    assert_eq!(tape.shape(out.prob), &[2, 1]);
    assert!(tape.value(out.prob).data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(tape.shape(out.features), &[2, 128, 16, 16]);
}

#[test]
fn same_seed_same_weights() {
    let a = Discriminator::build(DiscriminatorConfig::normal(32), 9).unwrap();
    let b = Discriminator::build(DiscriminatorConfig::normal(32), 9).unwrap();
    let c = Discriminator::build(DiscriminatorConfig::normal(32), 10).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_ne!(a.weights, c.weights);
}

#[test]
fn feature_tap_out_of_range_is_rejected() {
    let mut cfg = DiscriminatorConfig::normal(32);
    cfg.feature_tap = 3;
    assert!(matches!(Discriminator::build(cfg, 0), Err(ModelError::Config(_))));
}

#[test]
fn svdd_encoder_is_bias_free_and_linear() {
    let enc = SvddEncoder::build(EncoderConfig::svdd(64), 11).unwrap();
    assert!(enc.weights.names().all(|n| !n.contains("bias")));
    let x = images(2, 64, 12);
    let e = enc.embed(&x).unwrap();
    assert_eq!(e.shape(), &[2, 32]);

    let mut doubled = enc.clone();
    for v in doubled.weights.get_mut("e.embed.weight").unwrap().data_mut() {
        *v *= 2.0;
    }
    let e2 = doubled.embed(&x).unwrap();
    for (a, b) in e.data().iter().zip(e2.data()) {
        assert_eq!(2.0 * a, *b);
    }

    let mut zero = enc.clone();
    zero_all(&mut zero.weights, &[]);
    let ez = zero.embed(&Tensor::zeros(&[1, 1, 64, 64])).unwrap();
    assert!(ez.data().iter().all(|&v| v == 0.0));
}

#[test]
fn metric_embedding_is_unit_norm() {
    let m = MetricCnn::build(MetricConfig::shallow(64), 13).unwrap();
    let mut x = images(3, 64, 14);
    let first = x.row(0).to_vec();
    x.data_mut()[64 * 64..2 * 64 * 64].copy_from_slice(&first);
    let e = m.embed(&x).unwrap();
    assert_eq!(e.shape(), &[3, 64]);
    for i in 0..3 {
        let norm: f32 = e.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
    let cos: f32 = e.row(0).iter().zip(e.row(1)).map(|(a, b)| a * b).sum();
    assert!((cos - 1.0).abs() < 1e-6);
}

#[test]
fn save_load_forward_is_bit_identical() {
    let dir = std::env::temp_dir().join(format!("vtgan-models-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let g = Generator::build(GeneratorConfig::normal(32), 15).unwrap();
    let path = dir.join("g.ckpt");
    g.weights.save(&path).unwrap();
    let loaded = ModelWeights::load(&path, Some(g.config.fingerprint())).unwrap();
    assert_eq!(loaded.to_bytes(), g.weights.to_bytes());
    let g2 = Generator::from_weights(g.config.clone(), loaded).unwrap();
    let z = noise(4, 100, 16);
    assert_eq!(g.generate(&z).unwrap(), g2.generate(&z).unwrap());

    let wrong = GeneratorConfig::weak(32).fingerprint();
    assert!(matches!(ModelWeights::load(&path, Some(wrong)), Err(ModelError::Integrity(_))));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let d = Discriminator::build(DiscriminatorConfig::weak(32), 17).unwrap();
    let bytes = d.weights.to_bytes();
    assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 3], None).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(ModelWeights::from_bytes(&bad, None).is_err());
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(ModelWeights::from_bytes(&nan, None).is_err());
}

#[test]
fn train_mode_reports_batch_stats() {
    let g = Generator::build(GeneratorConfig::normal(32), 18).unwrap();
    let mut tape = Tape::new();
    let bound = g.weights.bind(&mut tape, true).unwrap();
    let z = tape.constant(noise(4, 100, 19)).unwrap();
    let out = g.forward(&mut tape, &bound, z, Mode::Train).unwrap();
    let names: Vec<&str> = out.stats.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["g.project.bn", "g.block1.bn", "g.block2.bn"]);

    let mut tape = Tape::new();
    let bound = g.weights.bind(&mut tape, true).unwrap();
    let z = tape.constant(noise(1, 100, 19)).unwrap();
    assert!(g.forward(&mut tape, &bound, z, Mode::Train).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generator_output_stays_in_range(seed in any::<u64>(), scale in 1.0f32..50.0) {
        let mut g = Generator::build(GeneratorConfig::normal(32), seed).unwrap();
        for name in g.weights.param_names() {
            for v in g.weights.get_mut(&name).unwrap().data_mut() {
                *v *= scale;
            }
        }
        let img = g.generate(&noise(2, 100, seed ^ 1)).unwrap();
        prop_assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
