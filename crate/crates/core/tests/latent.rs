use angiosynth::codec::{ema_blend, CodecWeights};
use angiosynth::config::RunConfig;
use angiosynth::embedder::{infonce_loss, train_embedder, EmbedderConfig, EmbedderWeights};
use angiosynth::linalg::cosine;
use angiosynth::pipeline::{fit_codec, generate_pairs};
use angiosynth::tokens::TokenGrid;
use angiosynth::volume::Image2D;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_codec(patch: usize, channels: usize, rng: &mut ChaCha8Rng) -> CodecWeights {
    let mut w = CodecWeights::zeros(patch, channels);
    for t in w.tensors_mut() {
        t.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    w
}

fn random_image(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Image2D {
    Image2D::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn tiny_run() -> RunConfig {
    RunConfig {
        n_pairs: 4,
        holdout_pairs: 0,
        volume_size: 16,
        codec_epochs: 20,
        ..RunConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // The codec is affine; its linear part is f(x) - f(0).
    #[test]
    fn encode_and_decode_are_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_codec(2, 3, &mut rng);
        let (x, y) = (random_image(4, 6, &mut rng), random_image(4, 6, &mut rng));
        let combo = Image2D::new(
            4,
            6,
            x.data.iter().zip(&y.data).map(|(p, q)| (a * *p as f64 + b * *q as f64) as f32).collect(),
        )
        .unwrap();
        let zero = Image2D::new(4, 6, vec![0.0; 24]).unwrap();
        let enc = |img: &Image2D| w.encode_slice(img).unwrap().data;
        let (fx, fy, fc, f0) = (enc(&x), enc(&y), enc(&combo), enc(&zero));
        for k in 0..fc.len() {
            let expected = a * (fx[k] - f0[k]) + b * (fy[k] - f0[k]);
            prop_assert!(close(fc[k] - f0[k], expected, 1e-6), "encode {k}: {} vs {expected}", fc[k] - f0[k]);
        }

        let tx = TokenGrid::new(2, 3, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ty = TokenGrid::new(2, 3, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tc = TokenGrid::new(2, 3, 3, tx.data.iter().zip(&ty.data).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let dec = |g: &TokenGrid| w.decode_slice(g).unwrap().data;
        let (gx, gy, gc, g0) = (dec(&tx), dec(&ty), dec(&tc), dec(&TokenGrid::zeros(2, 3, 3)));
        for k in 0..gc.len() {
            let lin = |v: &[f32]| v[k] as f64 - g0[k] as f64;
            let expected = a * lin(&gx) + b * lin(&gy);
            prop_assert!(close(lin(&gc), expected, 1e-5), "decode {k}: {} vs {expected}", lin(&gc));
        }
    }

    #[test]
    fn ema_is_a_convex_combination(
        shadow in proptest::collection::vec(-10.0f64..10.0, 1..20),
        decay in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let live: Vec<f64> = shadow.iter().map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut next = shadow.clone();
        ema_blend(&mut next, &live, decay);
        for ((n, s), l) in next.iter().zip(&shadow).zip(&live) {
            prop_assert!(*n >= s.min(*l) - 1e-12 && *n <= s.max(*l) + 1e-12);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        z in proptest::collection::vec(-5.0f64..5.0, 4),
        other in proptest::collection::vec(-5.0f64..5.0, 4),
        scale in 1e-3f64..1e3,
    ) {
        prop_assume!(z.iter().any(|v| v.abs() > 1e-3) && other.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
        let (a, b) = (cosine(&scaled, &other).unwrap(), cosine(&z, &other).unwrap());
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn infonce_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..8, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| (0..n).map(|_| (0..3).map(|_| rng.random_range(0.1..1.0)).collect()).collect();
        let (z, t): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (draw(&mut rng), draw(&mut rng));
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let zp: Vec<_> = order.iter().map(|&i| z[i].clone()).collect();
        let tp: Vec<_> = order.iter().map(|&i| t[i].clone()).collect();
        let (a, b) = (infonce_loss(&z, &t, tau).unwrap(), infonce_loss(&zp, &tp, tau).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn mask_increases_with_head_preactivation(seed in any::<u64>(), bump in 1e-3f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = EmbedderWeights::random(3, 3, &mut rng);
        let grid = TokenGrid::new(3, 3, 3, (0..27).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let low = w.embed_slice(&grid).unwrap().mask;
        w.head_b[0] += bump;
        let high = w.embed_slice(&grid).unwrap().mask;
        for (l, h) in low.iter().zip(&high) {
            prop_assert!(h > l && (0.0..=1.0).contains(h));
        }
    }
}

fn embedder_setup() -> (Vec<angiosynth::phantom::VolumePair>, angiosynth::codec::Codec) {
    let cfg = tiny_run();
    let pairs = generate_pairs(&cfg).unwrap();
    let codec = fit_codec(&cfg, &pairs).unwrap();
    (pairs, codec)
}

fn ecfg(epochs: usize, lr: f64) -> EmbedderConfig {
    EmbedderConfig { embed_channels: 4, epochs, lr, seed: 11, ..EmbedderConfig::default() }
}

#[test]
fn embedder_training_reduces_loss() {
    let (pairs, codec) = embedder_setup();
    let run = train_embedder(&pairs, &codec, &ecfg(200, 3e-3)).unwrap();
    let decile = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (decile(&run.losses[..20]), decile(&run.losses[180..]));
    assert!(last < first, "first decile {first}, last decile {last}");
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let (pairs, codec) = embedder_setup();
    let run = train_embedder(&pairs, &codec, &ecfg(5, 0.0)).unwrap();
    let init = EmbedderWeights::random(4, 4, &mut ChaCha8Rng::seed_from_u64(11));
    assert_eq!(run.embedder.live, init);
    assert_eq!(run.embedder.shadow, init);
}

#[test]
fn embedder_training_is_deterministic() {
    let (pairs, codec) = embedder_setup();
    let a = train_embedder(&pairs, &codec, &ecfg(10, 3e-3)).unwrap();
    let b = train_embedder(&pairs, &codec, &ecfg(10, 3e-3)).unwrap();
    assert_eq!(a.embedder, b.embedder);
    assert_eq!(a.losses, b.losses);
}
