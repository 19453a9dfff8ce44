use butterfly_hessian::factorization::{
    mean_loss, train_rotation_with_restarts, train_with_restarts, RestartPolicy,
};
use butterfly_hessian::synth::{dense_apply, sample_unit_sphere};
use butterfly_hessian::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn angle_to(f: &SymmetricFactorization, h: &nalgebra::DMatrix<f64>) -> f64 {
    average_angle(f, |x| dense_apply(h, x), 1000, Sampler::UnitSphere, 99).unwrap().mean_deg
}

#[test]
fn two_dimensional_matrices_are_represented_exactly() {
    for seed in 0..5 {
        let s = synthetic_hessian(&SyntheticSpec::new(2, 0, seed)).unwrap();
        let xs = sample_unit_sphere(2, 200, seed + 10);
        let samples = TrainSample::from_oracle(&xs, |x| s.apply(x));
        let init = SymmetricFactorization::identity(2).unwrap();
        let cfg = TrainConfig { epochs: 300, rng_seed: seed, lr_decay: 0.99, ..Default::default() };
        let policy = RestartPolicy { max_starts: 4, target_ratio: 1e-10 };
        let out = train_with_restarts(&init, &samples, &cfg, policy, |_, _, _| None).unwrap();
        let a = angle_to(&out.model, &s.h);
        assert!(a < 1.0, "seed {seed}: {a}");
    }
}

#[test]
fn single_givens_learns_any_plane_rotation() {
    for seed in 0..5u64 {
        let theta = ChaCha8Rng::seed_from_u64(seed).random_range(-3.0..3.0);
        let r = ButterflyProduct::from_angles(2, &[theta]).unwrap();
        let xs = sample_unit_sphere(2, 100, seed);
        let samples = TrainSample::from_oracle(&xs, |x| r.apply(x).unwrap());
        let mut q = ButterflyProduct::identity(2).unwrap();
        let cfg = TrainConfig { epochs: 100, lr_q: 0.2, rng_seed: seed, ..Default::default() };
        train_rotation_only(&mut q, &samples, &cfg, |_, _| None).unwrap();
        let a = average_angle_between(|x| q.apply(x).unwrap(), |x| r.apply(x).unwrap(), &xs)
            .unwrap()
            .mean_deg;
        assert!(a < 0.1, "seed {seed}: {a}");
    }
}

#[test]
fn identity_rotation_target_is_kept() {
    let xs = sample_unit_sphere(16, 200, 1);
    let samples = TrainSample::from_oracle(&xs, |x| x.to_vec());
    let mut q = ButterflyProduct::identity(16).unwrap();
    let trace = train_rotation_only(&mut q, &samples, &TrainConfig { epochs: 5, ..Default::default() }, |_, _| None)
        .unwrap();
    assert!(trace.rows.iter().all(|r| r.mean_loss < 1e-28));
    assert_eq!(q, ButterflyProduct::identity(16).unwrap());
}

#[test]
fn small_exact_targets_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = ButterflyProduct::random(8, &mut rng).unwrap();
    let d: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..2.0)).collect();
    let target = SymmetricFactorization::new(q.clone(), d).unwrap();
    let xs = sample_unit_sphere(8, 500, 3);
    let samples = TrainSample::from_oracle(&xs, |x| target.forward(x).unwrap());
    let cfg = TrainConfig { epochs: 200, lr_q: 0.5, lr_d: 0.05, lr_decay: 0.99, rng_seed: 1, ..Default::default() };
    let init = SymmetricFactorization::identity(8).unwrap();
    let out = train_with_restarts(&init, &samples, &cfg, RestartPolicy { max_starts: 40, target_ratio: 1e-6 }, |_, _, _| None)
        .unwrap();
    assert!(out.final_loss <= 1e-6 * out.initial_loss, "{} after {} starts", out.final_loss / out.initial_loss, out.starts);
    assert!(angle_to(&out.model, &target.to_dense()) < 1.0);

    let rot = TrainSample::from_oracle(&xs, |x| q.apply(x).unwrap());
    let cfg = TrainConfig { epochs: 200, lr_q: 0.2, lr_decay: 0.99, rng_seed: 1, ..Default::default() };
    let out = train_rotation_with_restarts(
        &ButterflyProduct::identity(8).unwrap(),
        &rot,
        &cfg,
        RestartPolicy { max_starts: 8, target_ratio: 1e-6 },
        |_, _, _| None,
    )
    .unwrap();
    assert!(out.final_loss <= 1e-6 * out.initial_loss);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let s = synthetic_hessian(&SyntheticSpec::new(16, 3, 4)).unwrap();
    let xs = sample_unit_sphere(16, 200, 5);
    let samples = TrainSample::from_oracle(&xs, |x| s.apply(x));
    let cfg = TrainConfig { epochs: 30, rng_seed: 9, ..Default::default() };
    let run = || {
        let mut f = SymmetricFactorization::identity(16).unwrap();
        let trace = f.train(&samples, &cfg, |_, f| Some(angle_to(f, &s.h))).unwrap();
        (f, trace)
    };
    let (f1, t1) = run();
    let (f2, t2) = run();
    assert_eq!(f1, f2);
    assert_eq!(t1.to_csv(), t2.to_csv());
    let init = mean_loss(&SymmetricFactorization::identity(16).unwrap(), &samples).unwrap();
    assert!(mean_loss(&f1, &samples).unwrap() < 0.5 * init);
    assert!(f1.q.is_projected());
}

#[test]
fn angle_metric_trivial_cases() {
    let s = synthetic_hessian(&SyntheticSpec::new(8, 2, 1)).unwrap();
    let xs = sample_unit_sphere(8, 100, 2);
    // exact, antiparallel, and rescaled models
    let exact = average_angle_between(|x| s.apply(x), |x| s.apply(x), &xs).unwrap();
    assert!(exact.mean_deg < 1e-6);
    let neg = average_angle_between(|x| s.apply(x).iter().map(|v| -v).collect(), |x| s.apply(x), &xs).unwrap();
    assert!((neg.mean_deg - 180.0).abs() < 1e-6);
    let id = SymmetricFactorization::identity(8).unwrap();
    let a = average_angle(&id, |x| x.iter().map(|v| 2.0 * v).collect(), 50, Sampler::UnitSphere, 3).unwrap();
    assert!(a.mean_deg < 1e-6);
    let zero = average_angle(&id, |x| vec![0.0; x.len()], 10, Sampler::UnitSphere, 3);
    assert_eq!(zero, Err(Error::NoValidSamples { skipped: 10 }));
}
