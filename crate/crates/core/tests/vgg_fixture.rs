//! Loads reference weights produced by an independent implementation of the
//! same VGG-19 topology (tools/make_vgg_fixture.py) and checks that
//! activations on a fixed input match the stored reference tensors.

use std::path::PathBuf;

use duonet::models::Vgg19Encoder;
use duonet::tape::Tape;
use duonet::tensor::{read_tensor, Tensor};
use duonet::weights::load_weights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/vgg")
        .join(name)
}

fn max_rel_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

#[test]
fn activations_match_reference_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = Vgg19Encoder::<f32>::new("net1.enc", [8, 16, 32, 64, 64], &mut rng);
    load_weights(&mut encoder, &fixture("weights.duow")).unwrap();

    let input = read_tensor::<f32>(&fixture("input.duot")).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(input).unwrap();
    let (bottleneck, skips) = encoder.forward(&mut tape, x).unwrap();

    let expect = read_tensor::<f32>(&fixture("bottleneck.duot")).unwrap();
    let diff = max_rel_diff(tape.value(bottleneck), &expect);
    assert!(diff < 1e-4, "bottleneck diff {diff}");

    for (i, &skip) in skips.iter().enumerate() {
        let expect = read_tensor::<f32>(&fixture(&format!("skip{i}.duot"))).unwrap();
        let diff = max_rel_diff(tape.value(skip), &expect);
        assert!(diff < 1e-4, "skip {i} diff {diff}");
    }
}

#[test]
fn fixture_weights_reject_mismatched_topology() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // wrong widths: shapes in the file no longer match the model
    let mut encoder = Vgg19Encoder::<f32>::new("net1.enc", [8, 16, 32, 64, 32], &mut rng);
    let err = load_weights(&mut encoder, &fixture("weights.duow")).unwrap_err();
    assert!(err.to_string().contains("expected shape"), "{err}");

    // wrong prefix: every name misses
    let mut encoder = Vgg19Encoder::<f32>::new("enc2", [8, 16, 32, 64, 64], &mut rng);
    let err = load_weights(&mut encoder, &fixture("weights.duow")).unwrap_err();
    assert!(err.to_string().contains("missing parameter"), "{err}");
}
