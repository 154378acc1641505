use epcv::ep::Prediction;
use epcv::evaluation::{confusion, true_fmeasure};
use epcv::kernel::{Hyperparams, KernelMode};
use epcv::model_selection::{predict_test, two_step_bias, SelectionOptions};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Positives are a shifted Gaussian blob that overlaps the negatives.
fn imbalanced(rng: &mut ChaCha8Rng, n: usize, n_pos: usize) -> (DMatrix<f64>, Vec<f64>) {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let y: Vec<f64> = (0..n).map(|i| if i < n_pos { 1.0 } else { -1.0 }).collect();
    let x = DMatrix::from_fn(n, 2, |i, j| {
        let shift = if y[i] > 0.0 && j == 0 { 1.8 } else { 0.0 };
        shift + noise.sample(rng)
    });
    (x, y)
}

fn test_f(pred: &[Prediction], y: &[f64]) -> f64 {
    let p: Vec<f64> = pred.iter().map(|q| q.prob_pos).collect();
    true_fmeasure(&confusion(&p, y, 0.5).unwrap(), 0.5).unwrap_or(0.0)
}

#[test]
fn bias_tuning_improves_f_on_rare_positives() {
    let opts = SelectionOptions::default();
    let mut wins = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = imbalanced(&mut rng, 200, 10);
        let (xt, yt) = imbalanced(&mut rng, 1000, 50);
        let init = Hyperparams::initial(2, KernelMode::Ard, false);
        let second = two_step_bias(&x, &y, &init, &opts).unwrap();
        // the bias stage starts from the step-1 parameters and keeps the
        // step-1 sites
        let start = second.trace.records.iter().find(|r| r.stage == 2).unwrap();
        let mut first = second.clone();
        first.best_theta = init.with_values(&start.theta).unwrap();
        let f1 = test_f(&predict_test(&first, &x, &y, &xt, &opts).unwrap(), &yt);
        let f2 = test_f(&predict_test(&second, &x, &y, &xt, &opts).unwrap(), &yt);
        if f2 > f1 {
            wins += 1;
        }
    }
    println!("two-step beat step 1 on {wins} of 20 seeds");
    assert!(wins >= 16, "two-step improved test F on {wins} of 20 seeds");
}
