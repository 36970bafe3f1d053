use permtpp::ctes::{simulate_dataset, Dataset, SyntheticConfig};
use permtpp::mtpp::{mean_nll, predict_sequence, train_mle, MtppConfig, MtppModel, TrainConfig};
use permtpp::optim::AdamConfig;

fn config(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn poisson_rate_is_recovered() {
    let ds: Dataset<f64> = simulate_dataset(&SyntheticConfig::poisson(2.0, 20.0, 120, 1)).unwrap();
    let train = ds.subset(&(0..100).collect::<Vec<_>>(), "train");
    let test = ds.subset(&(100..120).collect::<Vec<_>>(), "test");
    let cfg = MtppConfig::new(1, 8).with_horizon_from_gap(ds.mean_gap().unwrap());
    let mut model = MtppModel::new(cfg, 0).unwrap();
    let t0 = std::time::Instant::now();
    let report = train_mle(&mut model, &train, None, &config(1e-2, 30)).unwrap();
    let (mut total, mut count) = (0.0, 0);
    for s in &test.sequences {
        for (j, p) in predict_sequence(&model, s).unwrap().iter().enumerate() {
            total += p.time - s.times()[j];
            count += 1;
        }
    }
    let mean_gap = total / count as f64;
    eprintln!("poisson: {:?} {:?} mean gap {mean_gap}", t0.elapsed(), report.train_loss.last());
    assert!((mean_gap - 0.5).abs() < 0.05, "mean predicted gap {mean_gap}");
}

#[test]
fn hawkes_validation_nll_drops() {
    let ds: Dataset<f64> = simulate_dataset(&SyntheticConfig::cyclic_hawkes(200, 2)).unwrap();
    let train = ds.subset(&(0..140).collect::<Vec<_>>(), "train");
    let val = ds.subset(&(140..160).collect::<Vec<_>>(), "val");
    let cfg = MtppConfig::new(3, 16).with_horizon_from_gap(ds.mean_gap().unwrap());
    let mut model = MtppModel::new(cfg, 0).unwrap();
    let t0 = std::time::Instant::now();
    let report = train_mle(&mut model, &train, Some(&val), &config(1e-2, 30)).unwrap();
    let init = report.initial_val_loss.unwrap();
    let last = *report.val_loss.last().unwrap();
    eprintln!("hawkes: {:?} init {init} curve {:?}", t0.elapsed(), report.val_loss);
    assert_eq!(mean_nll(&model, &val).unwrap(), last);
    assert!(last <= 0.8 * init, "validation nll {init} -> {last}");
}
