use diffboost::diffusion::{
    ancestral_sample, posterior_mean_variance, q_sample, reverse_step, NoisePredictor, NoiseSchedule, ScheduleConfig,
};
use diffboost::rng::{seeded, standard_normal_grid};
use ndarray::Array2;
use proptest::prelude::*;

/// Knows the clean image and returns the noise that explains `x_t` exactly.
struct Oracle {
    x0: Array2<f64>,
    schedule: NoiseSchedule,
}

impl NoisePredictor for Oracle {
    type Conditioning = ();

    fn predict_noise(&self, xts: &[Array2<f64>], t: usize, _: &[&()]) -> diffboost::Result<Vec<Array2<f64>>> {
        let ab = self.schedule.alpha_bar(t);
        Ok(xts
            .iter()
            .map(|xt| (xt - &(&self.x0 * ab.sqrt())) / (1.0 - ab).sqrt())
            .collect())
    }
}

#[test]
fn constant_betas_give_geometric_alpha_bar() {
    let s = NoiseSchedule::from_betas(vec![0.1; 10]).unwrap();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!((s.alpha_bar(10) - 0.9f64.powi(10)).abs() < 1e-15);
}

#[test]
fn invalid_schedules_are_refused() {
    assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
    assert!(NoiseSchedule::from_betas(vec![0.5, 1.0]).is_err());
}

#[test]
fn desk_schedule_is_shorter() {
    let s = ScheduleConfig::desk().build().unwrap();
    assert_eq!(s.steps(), 200);
    assert_eq!(s.betas()[0], 1e-4);
}

#[test]
fn reverse_step_spread_matches_posterior_variance() {
    let s = ScheduleConfig::desk().build().unwrap();
    let mut rng = seeded(5);
    let xt = standard_normal_grid(&mut rng, (16, 16));
    let eps = standard_normal_grid(&mut rng, (16, 16));
    let t = 120;
    let p = posterior_mean_variance(&xt, t, &eps, &s).unwrap();
    let draws = 400;
    let mut sq = 0.0;
    for _ in 0..draws {
        let x = reverse_step(&xt, t, &eps, &s, &mut rng).unwrap();
        sq += (&x - &p.mu).mapv(|v| v * v).sum();
    }
    let var = sq / (draws * 256) as f64;
    assert!((var / p.sigma2 - 1.0).abs() < 0.03, "{var} vs {}", p.sigma2);
}

#[test]
fn final_step_is_deterministic() {
    let s = ScheduleConfig::desk().build().unwrap();
    let mut rng = seeded(6);
    let xt = standard_normal_grid(&mut rng, (4, 4));
    let eps = standard_normal_grid(&mut rng, (4, 4));
    let a = reverse_step(&xt, 1, &eps, &s, &mut seeded(1)).unwrap();
    let b = reverse_step(&xt, 1, &eps, &s, &mut seeded(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn oracle_denoiser_recovers_a_constant_image() {
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
    // internal range: 0.6 maps to 0.8 in [0, 1]
    let oracle = Oracle {
        x0: Array2::from_elem((8, 8), 0.6),
        schedule: schedule.clone(),
    };
    let out = ancestral_sample(&oracle, &(), &schedule, (8, 8), &mut seeded(7)).unwrap();
    for v in out.iter() {
        assert!((v - 0.8).abs() < 0.1, "{v}");
    }
}

#[test]
fn bad_steps_and_shapes_are_errors() {
    let s = ScheduleConfig::desk().build().unwrap();
    let x = Array2::zeros((4, 4));
    assert!(q_sample(&x, 0, &x, &s).is_err());
    assert!(q_sample(&x, 201, &x, &s).is_err());
    assert!(q_sample(&x, 1, &Array2::zeros((4, 5)), &s).is_err());
}

proptest! {
    #[test]
    fn accepted_schedules_decrease(steps in 1usize..3000, a in 1e-6f64..0.3, span in 0.0f64..0.6) {
        let b = (a + span).min(0.999);
        if let Ok(s) = NoiseSchedule::linear(steps, a, b) {
            let ab = s.alpha_bars();
            prop_assert_eq!(ab[0], 1.0);
            prop_assert!(ab.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
            for t in 2..=steps.min(50) {
                let v = s.posterior_variance(t);
                prop_assert!(v > 0.0 && v <= s.beta(t));
            }
        }
    }

    #[test]
    fn q_sample_at_zero_noise_scales_the_signal(t in 1usize..=200, v in -1.0f64..1.0) {
        let s = ScheduleConfig::desk().build().unwrap();
        let x0 = Array2::from_elem((3, 3), v);
        let xt = q_sample(&x0, t, &Array2::zeros((3, 3)), &s).unwrap().xt;
        for y in xt.iter() {
            prop_assert!((y - v * s.alpha_bar(t).sqrt()).abs() < 1e-12);
        }
    }
}
