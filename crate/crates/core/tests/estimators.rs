mod common;

use common::{conjugate_posterior, mean_var};
use recast::data::{synthetic_blobs, ToyPosteriorSpec};
use recast::estimators::*;
use recast::experiment::{cmd_toy, ToyFamily, ToyRun};
use recast::model::{predict, ModelSpec, ParameterVector, PriorSpec};
use recast::uncertainty::epistemic;

fn toy_data(run: &ToyRun) -> Vec<f64> {
    match run.target() {
        ToyPosteriorSpec::ConjugateGaussian { data, .. } => data,
        other => panic!("not conjugate: {other:?}"),
    }
}

fn check_conjugate(estimator: EstimatorKind, seed: u64) {
    let run = ToyRun::new(ToyFamily::Conjugate, estimator, seed);
    let (mean, var) = conjugate_posterior(0.0, 1.0, 1.0, &toy_data(&run));
    let report = cmd_toy(&run).unwrap();
    let (em, ev) = (report.empirical.mean, report.empirical.variance);
    println!("{estimator}: mean {em:.5} vs {mean:.5}, variance {ev:.6} vs {var:.6}");
    assert!(((em - mean) / mean).abs() < 0.05);
    assert!(((ev - var) / var).abs() < 0.05);
}

#[test]
fn sgld_recovers_conjugate_posterior() {
    check_conjugate(EstimatorKind::Sgld, 42);
}

#[test]
fn recast_recovers_conjugate_posterior() {
    check_conjugate(EstimatorKind::Recast, 42);
}

#[test]
fn zero_observations_sample_the_prior() {
    let run = ToyRun { observations: 0, ..ToyRun::new(ToyFamily::Conjugate, EstimatorKind::Sgld, 3) };
    let spec = run.target();
    let (_, v) = conjugate_posterior(0.0, 1.0, 1.0, &[]);
    assert_eq!(v, 1.0);
    let (cfg, schedule) = run.preset(v).unwrap();
    let chain = run_sgld(&ToyPotential { spec, start: 0.0 }, &cfg, &schedule).unwrap();
    let x = chain.scalar_samples();
    // standard error from non-overlapping batch means absorbs autocorrelation
    let batches: Vec<f64> = x.chunks_exact(x.len() / 30).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let (m, bv) = mean_var(&batches);
    let se = (bv / batches.len() as f64).sqrt();
    assert!(m.abs() < 3.0 * se, "mean {m} with standard error {se}");
}

#[test]
fn recast_visits_both_modes_and_sgld_one() {
    let recast = cmd_toy(&ToyRun::new(ToyFamily::Bimodal, EstimatorKind::Recast, 42)).unwrap();
    let sgld = cmd_toy(&ToyRun::new(ToyFamily::Bimodal, EstimatorKind::Sgld, 42)).unwrap();
    let (rc, sc) = (recast.coverage.unwrap(), sgld.coverage.unwrap());
    assert!(rc.iter().all(|&c| c >= 0.1), "{rc:?}");
    assert!(sc.iter().any(|&c| c >= 0.95), "{sc:?}");
    assert!(recast.empirical.variance > sgld.empirical.variance);
    // mixture of N(+-2, 0.25) with equal weights
    assert!((recast.analytic.variance - 4.25).abs() < 1e-6);
    assert!(recast.analytic.mean.abs() < 1e-9);
}

#[test]
fn vi_mean_matches_conjugate_posterior() {
    let run = ToyRun::new(ToyFamily::Conjugate, EstimatorKind::Sgld, 0);
    let data = toy_data(&run);
    let (mean, _) = conjugate_posterior(0.0, 1.0, 1.0, &data);
    let pot = ToyPotential { spec: run.target(), start: 0.0 };
    let cfg = SamplerConfig { iterations: 5000, batch_size: 20, burn_in: 0.0, thinning: 1, step_scale: 0.01, ..Default::default() };
    let (q, _) = run_vi(&pot, &cfg, &ScheduleSpec::Constant(1.0)).unwrap();
    assert!(((q.mu[0] - mean) / mean).abs() < 0.05, "{} vs {mean}", q.mu[0]);
}

fn blobs() -> (ModelSpec, recast::data::Dataset) {
    (ModelSpec::mlp(2, &[16], 3), synthetic_blobs(3, 100, 6.0, 5))
}

fn accuracy(p: &Posterior, data: &recast::data::Dataset) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.gather(&idx);
    let preds = draw_predictive(p, &x, 4.min(p.available().unwrap_or(4)), 9).unwrap();
    let hits = preds.iter().zip(&y).filter(|(s, &l)| recast::calibration::argmax(&s.mean()).0 == l).count();
    hits as f64 / y.len() as f64
}

#[test]
fn separable_blobs_are_learned_by_sgd() {
    let (spec, data) = blobs();
    let cfg = SamplerConfig { iterations: 1500, batch_size: 30, step_scale: 0.1, ..Default::default() };
    let fit = train(EstimatorKind::Sgd, &spec, &data, PriorSpec::default(), &cfg, &ScheduleSpec::Constant(1.0), 1).unwrap();
    assert_eq!(fit.posterior.available(), Some(1));
    assert!(accuracy(&fit.posterior, &data) > 0.99);
}

#[test]
fn every_estimator_learns_blobs() {
    let (spec, data) = blobs();
    for (kind, scale) in [
        (EstimatorKind::Sgld, 1e-3),
        (EstimatorKind::Recast, 1e-3),
        (EstimatorKind::Mcd, 0.1),
        (EstimatorKind::Vi, 1e-2),
        (EstimatorKind::Ensemble, 0.1),
    ] {
        let spec = if kind == EstimatorKind::Mcd { spec.clone().with_dropout(0.5) } else { spec.clone() };
        let cfg = SamplerConfig { iterations: 2000, batch_size: 30, step_scale: scale, seed: 1, ..Default::default() };
        let schedule = match kind {
            EstimatorKind::Recast => ScheduleSpec::CosineRestart { eps_max: 1.0, eps_min: 0.0057, period: 400 },
            other => other.default_schedule(),
        };
        let fit = train(kind, &spec, &data, PriorSpec::default(), &cfg, &schedule, 4).unwrap();
        let acc = accuracy(&fit.posterior, &data);
        println!("{kind}: accuracy {acc:.3}");
        assert!(acc > 0.9, "{kind}: {acc}");
    }
}

#[test]
fn ensemble_of_twelve_has_distinct_members() {
    let (spec, data) = blobs();
    let cfg = SamplerConfig { iterations: 50, batch_size: 30, step_scale: 0.1, ..Default::default() };
    let fit = train(EstimatorKind::Ensemble, &spec, &data, PriorSpec::default(), &cfg, &ScheduleSpec::Constant(1.0), DEFAULT_MEMBERS).unwrap();
    let v = fit.posterior.vectors();
    assert_eq!(v.len(), 12);
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            assert_ne!(v[i], v[j]);
        }
    }
}

#[test]
fn identical_member_seeds_leave_no_epistemic_spread() {
    let (spec, data) = blobs();
    let pot = NetPotential::new(&spec, &data, PriorSpec::default()).unwrap();
    let cfg = SamplerConfig { iterations: 50, batch_size: 30, step_scale: 0.1, ..Default::default() };
    let fits = run_ensemble_with_seeds(&pot, &cfg, &ScheduleSpec::Constant(1.0), &[7, 7, 7]).unwrap();
    assert!(fits.windows(2).all(|w| w[0].theta == w[1].theta));
    let samples = fits.into_iter().map(|f| ParameterVector(f.theta)).collect::<Vec<_>>();
    let meta = vec![SampleMeta { iteration: 50, step_size: 0.0 }; 3];
    let set = PosteriorSampleSet::new(spec.clone(), EstimatorKind::Ensemble, samples, meta).unwrap();
    let (x, _) = data.gather(&[0, 1, 2]);
    for s in draw_predictive(&Posterior::Samples(set), &x, 3, 0).unwrap() {
        assert!(epistemic(&s).trace().abs() < 1e-15);
    }
}

#[test]
fn single_draw_equals_predict() {
    let (spec, data) = blobs();
    let cfg = SamplerConfig { iterations: 100, batch_size: 30, step_scale: 0.1, ..Default::default() };
    let fit = train(EstimatorKind::Sgd, &spec, &data, PriorSpec::default(), &cfg, &ScheduleSpec::Constant(1.0), 1).unwrap();
    let (x, _) = data.gather(&[0, 5, 9]);
    let preds = draw_predictive(&fit.posterior, &x, 1, 0).unwrap();
    let theta = ParameterVector(fit.posterior.vectors()[0].to_vec());
    let direct = predict(&spec, &theta, &x, None).unwrap();
    for (i, s) in preds.iter().enumerate() {
        assert_eq!(s.row(0), &direct.data()[i * 3..(i + 1) * 3]);
    }
}

#[test]
fn dropout_draws_differ_and_repeat() {
    let (_, data) = blobs();
    let spec = ModelSpec::mlp(2, &[64], 3).with_dropout(0.5);
    let cfg = SamplerConfig { iterations: 200, batch_size: 30, step_scale: 0.1, ..Default::default() };
    let fit = train(EstimatorKind::Mcd, &spec, &data, PriorSpec::default(), &cfg, &EstimatorKind::Mcd.default_schedule(), 1).unwrap();
    let (x, _) = data.gather(&[0]);
    let a = draw_predictive(&fit.posterior, &x, 2, 4).unwrap();
    let b = draw_predictive(&fit.posterior, &x, 2, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].row(0), a[0].row(1));
    assert!(matches!(
        train(EstimatorKind::Mcd, &ModelSpec::mlp(2, &[8], 3), &data, PriorSpec::default(), &cfg, &ScheduleSpec::Constant(1.0), 1),
        Err(recast::Error::Config(_))
    ));
}

#[test]
fn finite_sets_refuse_extra_draws() {
    let (spec, data) = blobs();
    let cfg = SamplerConfig { iterations: 100, batch_size: 30, step_scale: 0.1, ..Default::default() };
    let fit = train(EstimatorKind::Sgd, &spec, &data, PriorSpec::default(), &cfg, &ScheduleSpec::Constant(1.0), 1).unwrap();
    let (x, _) = data.gather(&[0]);
    assert!(matches!(draw_predictive(&fit.posterior, &x, 2, 0), Err(recast::Error::Range { requested: 2, available: 1 })));
}
