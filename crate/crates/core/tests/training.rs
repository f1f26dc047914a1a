use diffgo::diffusion::{forward_diffuse, train_diffgo, ConditionSet, Schedule, TrainConfig, TrainingExample};
use diffgo::noise_codec::SeedBasis;
use diffgo::numerics::gaussian_stream;
use diffgo::scenes::DatasetManifest;

#[test]
fn loss_drops_thirty_percent_on_default_config() {
    let manifest = DatasetManifest::sequential(3000, 50, 0);
    let data: Vec<TrainingExample> = manifest
        .train_scenes()
        .into_iter()
        .map(|s| TrainingExample {
            image: s.image,
            cond: ConditionSet::from_labels(s.label_map),
        })
        .collect();
    let basis = SeedBasis::build(&(1..=128).collect::<Vec<u64>>(), 1024).unwrap();
    let report = train_diffgo(&data, &basis, &Schedule::default_linear(), &TrainConfig::default()).unwrap();
    assert_eq!(report.losses.len(), 2000);
    let (first, last) = report.loss_drop(200).unwrap();
    assert!(last <= 0.7 * first, "loss went from {first} to {last}");
    assert!(report.params.values().iter().all(|v| v.is_finite()));
}

#[test]
fn forward_moments_match_closed_form() {
    let sched = Schedule::default_linear();
    let draws = 10_000;
    let x0 = [0.8f32, -0.6, 0.0];
    for t in [1, sched.steps() / 2, sched.steps()] {
        let ab = sched.alpha_bar(t);
        for &x in &x0 {
            let eps = gaussian_stream(t as u64 * 31 + 7, draws).unwrap();
            let samples: Vec<f64> = eps
                .chunks(1)
                .map(|e| forward_diffuse(&[x], t, e, &sched).unwrap()[0] as f64)
                .collect();
            let mean = samples.iter().sum::<f64>() / draws as f64;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let (mu, sigma2) = (ab.sqrt() * x as f64, 1.0 - ab);
            let mean_se = (sigma2 / draws as f64).sqrt();
            let var_se = sigma2 * (2.0 / (draws - 1) as f64).sqrt();
            assert!((mean - mu).abs() <= 3.0 * mean_se, "t={t}: mean {mean} vs {mu}");
            assert!((var - sigma2).abs() <= 3.0 * var_se, "t={t}: var {var} vs {sigma2}");
        }
    }
}
