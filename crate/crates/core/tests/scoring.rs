use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtgan_core::models::{is_buffer, Discriminator, DiscriminatorConfig, EncoderConfig, Generator, GeneratorConfig, SvddEncoder};
use vtgan_core::scoring::{
    best_so_far, discriminator_feature_loss, discriminator_features, initial_latent, latent_search, latent_search_from,
    residual_loss, svdd_distances, svdd_score, variation_score, LatentSearchConfig, ScoreError,
};
use vtgan_core::training::SvddModel;
use vtgan_core::Tensor;

const SIDE: usize = 16;

fn models(seed: u64) -> (Generator, Discriminator) {
    (
        Generator::build(GeneratorConfig::normal(SIDE), seed).unwrap(),
        Discriminator::build(DiscriminatorConfig::normal(SIDE), seed + 1).unwrap(),
    )
}

fn images(n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, 1, SIDE, SIDE], 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v: f32| v.clamp(-1.0, 1.0))
}

fn latents(rows: &[Vec<f32>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn search(steps: usize, restarts: usize, lambda: f64) -> LatentSearchConfig {
    LatentSearchConfig { steps, restarts, lambda, lr: 0.05, seed: 3 }
}

#[test]
fn residual_examples() {
    let x = images(3, 1);
    assert_eq!(residual_loss(&x, &x).unwrap(), vec![0.0; 3]);
    let ones = Tensor::from_fn(&[1, 1, 64, 64], |_| 1.0f32);
    let minus = Tensor::from_fn(&[1, 1, 64, 64], |_| -1.0f32);
    assert_eq!(residual_loss(&ones, &minus).unwrap(), vec![8192.0]);
    assert!(residual_loss(&x, &images(2, 1)).is_err());

    let gx = images(3, 2);
    let got = residual_loss(&x, &gx).unwrap();
    for (i, g) in got.iter().enumerate() {
        let mut acc = 0.0f64;
        for p in 0..SIDE * SIDE {
            acc += (x.data()[i * SIDE * SIDE + p] as f64 - gx.data()[i * SIDE * SIDE + p] as f64).abs();
        }
        assert_eq!(*g, acc);
    }
}

#[test]
fn feature_loss_examples() {
    let (_, d) = models(4);
    let x = images(2, 5);
    let gx = images(2, 6);
    assert_eq!(discriminator_feature_loss(&x, &x, &d).unwrap(), vec![0.0; 2]);

    let got = discriminator_feature_loss(&x, &gx, &d).unwrap();
    let (fx, fg) = (discriminator_features(&d, &x).unwrap(), discriminator_features(&d, &gx).unwrap());
    let per = fx.numel() / 2;
    for (i, g) in got.iter().enumerate() {
        let acc: f64 = (0..per).map(|k| (fx.data()[i * per + k] as f64 - fg.data()[i * per + k] as f64).abs()).sum();
        assert_eq!(*g, acc);
    }

    let mut flat = d.clone();
    let names: Vec<String> = flat.weights.names().map(str::to_string).collect();
    for name in names.iter().filter(|n| !is_buffer(n)) {
        flat.weights.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert_eq!(discriminator_feature_loss(&x, &gx, &flat).unwrap(), vec![0.0; 2]);
}

#[test]
fn search_from_generated_latent_is_a_fixed_point() {
    let (g, d) = models(7);
    let z0 = latents(&[initial_latent(9, 0, 0, 100), initial_latent(9, 1, 0, 100)]);
    let x = g.generate(&z0).unwrap();
    let res = latent_search_from(&x, &g, &d, &z0, &search(1, 1, 0.2)).unwrap();
    for r in &res {
        assert!(r.v <= 1e-3, "V at the generating latent {}", r.v);
        assert_eq!(r.v, variation_score(r.l_r, r.l_d, 0.2));
    }
}

#[test]
fn identities_hold_for_every_result() {
    let (g, d) = models(8);
    let x = images(4, 9);
    let ids = [10, 11, 12, 13];
    let res = latent_search(&x, &ids, &g, &d, &search(8, 2, 0.2), 1).unwrap();
    assert_eq!(res.len(), 4);
    for r in &res {
        assert_eq!(r.v, (1.0 - 0.2) * r.l_r + 0.2 * r.l_d);
        assert!(r.l_r >= 0.0 && r.l_d >= 0.0);
        assert_eq!(r.restarts_used, 2);
        assert_eq!(r.z.len(), 100);
        assert_eq!(r.reconstruction.len(), SIDE * SIDE);
        for trace in &r.traces {
            assert_eq!(trace.len(), 9);
            let best = best_so_far(trace);
            assert!(best.windows(2).all(|w| w[1] <= w[0]));
        }
        let best_final = r.traces.iter().map(|t| best_so_far(t)[8]).fold(f64::INFINITY, f64::min);
        assert!((r.v - best_final).abs() <= 1e-3 * best_final.max(1.0));
    }

    let pure = latent_search(&x, &ids, &g, &d, &search(8, 2, 0.0), 1).unwrap();
    for r in &pure {
        assert_eq!(r.v, r.l_r);
    }
}

#[test]
fn search_is_deterministic_and_independent_of_jobs_and_subsets() {
    let (g, d) = models(10);
    let x = images(5, 11);
    let ids: Vec<u64> = (0..5).collect();
    let cfg = search(4, 2, 0.2);
    let a = latent_search(&x, &ids, &g, &d, &cfg, 1).unwrap();
    let b = latent_search(&x, &ids, &g, &d, &cfg, 3).unwrap();
    assert_eq!(a, b);
    let sub = latent_search(&x.select_rows(&[3]), &[3], &g, &d, &cfg, 1).unwrap();
    assert_eq!(sub[0].v, a[3].v);
    assert_eq!(sub[0].z, a[3].z);
}

#[test]
fn reweighting_keeps_components() {
    let (g, d) = models(12);
    let x = images(2, 13);
    let res = latent_search(&x, &[0, 1], &g, &d, &search(3, 1, 0.2), 1).unwrap();
    for r in &res {
        let zero = r.reweighted(0.0);
        assert_eq!((zero.l_r, zero.l_d, zero.v), (r.l_r, r.l_d, r.l_r));
        let z = Tensor::new(vec![1, 100], r.z.clone()).unwrap();
        let gx = g.generate(&z).unwrap();
        let x_i = x.select_rows(&[res.iter().position(|o| o == r).unwrap()]);
        let l_r = residual_loss(&x_i, &gx).unwrap()[0];
        assert!((l_r - r.l_r).abs() <= 1e-3 * l_r.max(1.0));
    }
}

#[test]
fn bad_search_configs_are_rejected() {
    let (g, d) = models(14);
    let x = images(1, 15);
    for cfg in [search(0, 1, 0.2), search(1, 0, 0.2), search(1, 1, 1.5)] {
        assert!(matches!(latent_search(&x, &[0], &g, &d, &cfg, 1), Err(ScoreError::Config(_))));
    }
    let wrong_side = Tensor::zeros(&[1, 1, 32, 32]);
    assert!(latent_search(&wrong_side, &[0], &g, &d, &search(1, 1, 0.2), 1).is_err());
    assert!(latent_search(&x, &[0, 1], &g, &d, &search(1, 1, 0.2), 1).is_err());
}

#[test]
fn svdd_distance_examples() {
    let e = Tensor::new(vec![1, 2], vec![3.0f32, 4.0]).unwrap();
    assert_eq!(svdd_distances(&e, &[0.0, 0.0]).unwrap(), vec![25.0]);
    assert_eq!(svdd_distances(&e, &[3.0, 4.0]).unwrap(), vec![0.0]);
    assert!(svdd_distances(&e, &[0.0]).is_err());

    let encoder = SvddEncoder::build(EncoderConfig::svdd(SIDE), 16).unwrap();
    let x = images(4, 17);
    let center = encoder.embed(&x.select_rows(&[0])).unwrap().into_data();
    let model = SvddModel { encoder, center };
    let forward = svdd_score(&model, &x).unwrap();
    assert!(forward[0] < 1e-9);
    let reversed = svdd_score(&model, &x.select_rows(&[3, 2, 1, 0])).unwrap();
    let back: Vec<f64> = reversed.into_iter().rev().collect();
    assert_eq!(forward, back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lambda_never_changes_residual_at_fixed_z(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let (g, d) = models(seed % 1000);
        let z0 = latents(&[initial_latent(seed, 0, 0, 100)]);
        let x = images(1, seed ^ 5);
        let a = latent_search_from(&x, &g, &d, &z0, &search(1, 1, 0.0)).unwrap();
        let b = latent_search_from(&x, &g, &d, &z0, &search(1, 1, lambda)).unwrap();
        let gx = g.generate(&z0).unwrap();
        let l_r = residual_loss(&x, &gx).unwrap()[0];
        // Both searches evaluate z0 first; the residual there is the same.
        prop_assert!((a[0].traces[0][0] - l_r).abs() <= 1e-3 * l_r.max(1.0));
        let l_d = discriminator_feature_loss(&x, &gx, &d).unwrap()[0];
        let expected = variation_score(l_r, l_d, lambda);
        prop_assert!((b[0].traces[0][0] - expected).abs() <= 1e-3 * expected.max(1.0));
    }
}
