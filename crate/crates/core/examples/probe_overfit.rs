// Temporary calibration probe. Not part of the deliverable.
use echozoo::data::{generate_labeled_clips, SyntheticParams};
use echozoo::models::{build_model, Family, ModelConfig};
use echozoo::rng::{Prng, Stream};
use echozoo::train::{fit, predict_all, prepare_samples, ExperimentConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let decay: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(80);

    let clips = generate_labeled_clips(
        8,
        (10.0, 80.0),
        &SyntheticParams { height: 24, width: 24, noise_std: 0.0, center_jitter: 0.0, ..Default::default() },
        606,
    )
    .unwrap();
    let samples = prepare_samples(&clips, Family::I3dMini).unwrap();
    let config = ModelConfig {
        width_multiplier: 0.25,
        height: 24,
        width: 24,
        ..ModelConfig::new(Family::I3dMini)
    };
    for checkpoint in [50usize, 100, 150, 200] {
        let mut rng = Prng::new(606, Stream::Init);
        let mut model = build_model(&config, &mut rng).unwrap();
        let exp = ExperimentConfig {
            initial_lr: lr,
            decay_period: decay,
            max_epochs: checkpoint,
            patience: checkpoint,
            batch_size: batch,
            dropout_rate: 0.0,
            seed: 606,
            ..Default::default()
        };
        let t = std::time::Instant::now();
        fit(&mut model, &samples, &samples, &exp).unwrap();
        let preds = predict_all(&mut model, &samples, batch).unwrap();
        let mse: f64 = preds
            .iter()
            .zip(&samples)
            .map(|(p, s)| (p - s.label) * (p - s.label))
            .sum::<f64>()
            / samples.len() as f64;
        println!(
            "batch {batch} lr {lr} decay {decay} epochs {checkpoint}: inference train MSE {mse:.4} ({:.0}s)",
            t.elapsed().as_secs_f64()
        );
    }
}
