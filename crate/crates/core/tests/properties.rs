use proptest::prelude::*;

use stemob::analysis::latent_distance;
use stemob::attribute::{attribute_loss_ddim, attribute_loss_ddpm, LossModel};
use stemob::inversion::{ddim_denoise, ddim_invert, ddpm_invert, NoisePredictor};
use stemob::{draw_noise, Latent, NoiseKey, NoiseSchedule, ScheduleKind};

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Cosine), Just(ScheduleKind::Linear)]
}

fn latent(len: usize) -> impl Strategy<Value = Latent> {
    prop::collection::vec(-1.0f32..1.0, len).prop_map(move |v| Latent::new(vec![len], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_symmetric_and_bounded(kind in kind(), steps in 2usize..120, x in latent(12), y in latent(12), frac in 0.0f64..1.0) {
        let s = NoiseSchedule::with_defaults(kind, steps).unwrap();
        let t = 1 + ((steps - 1) as f64 * frac) as usize;
        for loss in [attribute_loss_ddpm, attribute_loss_ddim] {
            let a = loss(&x, &y, &s, t).unwrap();
            prop_assert!((0.0..=0.5).contains(&a));
            prop_assert_eq!(a, loss(&y, &x, &s, t).unwrap());
            prop_assert_eq!(loss(&x, &x, &s, t).unwrap(), 0.5);
        }
    }

    #[test]
    fn loss_decreases_with_distance(kind in kind(), d in 0.0f64..10.0, extra in 1e-3f64..10.0, t in 1usize..=50) {
        let s = NoiseSchedule::with_defaults(kind, 50).unwrap();
        for m in [LossModel::Ddpm, LossModel::Ddim] {
            prop_assert!(m.loss_from_distance(d, &s, t).unwrap() >= m.loss_from_distance(d + extra, &s, t).unwrap());
        }
    }

    #[test]
    fn ddpm_noise_depends_only_on_key(x in latent(20), seed: u64, stream: u64, t in 0usize..=50) {
        let s = NoiseSchedule::with_defaults(ScheduleKind::Cosine, 50).unwrap();
        let key = NoiseKey::new(seed, stream, 0);
        let a = ddpm_invert(&x, &s, t, key).unwrap();
        prop_assert_eq!(&a, &ddpm_invert(&x, &s, t, key).unwrap());
        let ab = s.alpha_bar_at(t).unwrap();
        let eps = draw_noise(key.with_step(t as u32), &[20]).unwrap();
        for ((&y, &x0), &e) in a.data().iter().zip(x.data()).zip(eps.data()) {
            let expected = ab.sqrt() * x0 as f64 + (1.0 - ab).sqrt() * e as f64;
            prop_assert!((y as f64 - expected).abs() <= 1e-6 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn ddim_with_oracle_inverts(kind in kind(), x in latent(16), t in 0usize..=40) {
        let s = NoiseSchedule::with_defaults(kind, 40).unwrap();
        let oracle = NoisePredictor::oracle(x.clone(), &s);
        let back = ddim_denoise(&ddim_invert(&x, &s, t, &oracle).unwrap(), &s, t, &oracle).unwrap();
        prop_assert!(latent_distance(&back, &x).unwrap() <= 1e-4 * x.norm().max(1e-3));
    }

    #[test]
    fn zero_predictor_rescales(kind in kind(), x in latent(9), t in 0usize..=30) {
        let s = NoiseSchedule::with_defaults(kind, 30).unwrap();
        let y = ddim_invert(&x, &s, t, &NoisePredictor::Zero).unwrap();
        let scale = s.alpha_bar_at(t).unwrap().sqrt();
        for (&a, &b) in y.data().iter().zip(x.data()) {
            prop_assert!((a as f64 - scale * b as f64).abs() <= 1e-6);
        }
    }
}
