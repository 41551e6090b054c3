use pbnet_core::config::Config;
use pbnet_core::data::{generate_phantoms, AugmentationPolicy, Normalization, PhantomConfig, Sample};
use pbnet_core::trainer::{train_fold, Schedule};

fn samples(count: usize) -> Vec<Sample> {
    generate_phantoms(&PhantomConfig {
        count,
        height: 32,
        width: 32,
        ..Default::default()
    })
    .unwrap()
    .iter()
    .map(|p| p.to_sample())
    .collect()
}

fn small(schedule: Schedule) -> Config {
    let mut cfg = Config::tiny();
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 2;
    cfg.train.schedule = schedule;
    cfg
}

#[test]
fn logged_learning_rate_follows_the_poly_schedule() {
    let data = samples(4);
    for schedule in [Schedule::PerStep, Schedule::PerEpoch] {
        let cfg = small(schedule);
        let out = train_fold(&cfg, &data, &[], &Normalization::default(), None, None).unwrap();
        assert_eq!(out.steps, 6);
        for (step, epoch, lr, _) in out.log.steps() {
            let t = match schedule {
                Schedule::PerStep => step as f64 / 6.0,
                Schedule::PerEpoch => epoch as f64 / 3.0,
            };
            let expected = cfg.train.base_lr * (1.0 - t).powf(0.9);
            assert!((lr - expected).abs() <= 1e-12, "{schedule:?} step {step}: {lr} vs {expected}");
        }
    }
}

#[test]
fn max_steps_caps_training() {
    let mut cfg = small(Schedule::PerStep);
    cfg.train.max_steps = Some(4);
    let out = train_fold(&cfg, &samples(4), &[], &Normalization::default(), None, None).unwrap();
    assert_eq!(out.steps, 4);
    assert_eq!(out.log.losses().len(), 4);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let data = samples(4);
    let mut cfg = small(Schedule::PerStep);
    cfg.augment = AugmentationPolicy::default();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| train_fold(&cfg, &data[..3], &data[3..], &Normalization::default(), Some(0), Some(d.path())).unwrap())
        .collect();
    assert_eq!(runs[0].log.losses(), runs[1].log.losses());
    let bytes: Vec<_> = dirs.iter().map(|d| std::fs::read(d.path().join("last.safetensors")).unwrap()).collect();
    assert_eq!(bytes[0], bytes[1]);
    assert!(dirs[0].path().join("best.safetensors").exists());
    assert!(dirs[0].path().join("runlog.jsonl").exists());

    cfg.train.seed = 1;
    let other = train_fold(&cfg, &data[..3], &data[3..], &Normalization::default(), Some(0), None).unwrap();
    assert_ne!(other.log.losses(), runs[0].log.losses());
}
