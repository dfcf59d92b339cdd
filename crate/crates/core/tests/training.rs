use twohand::data::{generate_synthetic, SyntheticSpec};
use twohand::denoiser::{DenoiserNet, NetConfig};
use twohand::diffusion::{train, TrainConfig};

#[test]
fn toy_training_reduces_loss() {
    let data = generate_synthetic(&SyntheticSpec::toy(2, 4000, 11)).unwrap();
    let mut net = DenoiserNet::new(NetConfig::small(), 11);
    let cfg = TrainConfig {
        epochs: 30,
        seed: 11,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let report = train(&mut net, &data, &cfg).unwrap();
    let first = report.epoch_loss[0];
    let last = *report.epoch_loss.last().unwrap();
    println!("{:?} in {:?}", report.epoch_loss, start.elapsed());
    assert!(last < 0.25 * first, "first {first} last {last}");
}
