use num_complex::Complex64;
use semcom::channel::{
    awgn_transmit, linear_to_snr_db, pack_complex_slice, power_normalize, sample_noise, snr_db_to_linear,
    transmit_latent, ChannelConfig, ComplexSymbols,
};
use semcom::codec::Latent;
use semcom::rng::rng_from_seed;
use semcom::Result;

use proptest::prelude::*;
use rand::Rng;

#[test]
fn noise_components_have_half_variance_each() {
    let n = 1_000_000;
    for snr in [-3.0, 0.0, 5.0, 10.0] {
        let var = 1.0 / snr_db_to_linear(snr);
        let noise = sample_noise(n, var, &mut rng_from_seed(snr.to_bits()));
        for part in [0usize, 1] {
            let xs: Vec<f64> = noise.iter().map(|c| if part == 0 { c.re } else { c.im }).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = (var / 2.0).sqrt();
            assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean} at {snr} dB");
            assert!((v / (var / 2.0) - 1.0).abs() < 0.01, "variance {v} at {snr} dB");
        }
    }
}

#[test]
fn empirical_snr_at_five_db() -> Result<()> {
    let n = 1_000_000;
    let mut rng = rng_from_seed(42);
    let sym = ComplexSymbols::new((0..n).map(|_| Complex64::new(rng.random(), rng.random())).collect());
    let sent = power_normalize(&sym, 1.0)?;
    let ch = ChannelConfig::new(5.0, 0);
    let recv = awgn_transmit(&sent, &ch, &mut rng_from_seed(7))?;
    let noise: f64 = recv
        .values()
        .iter()
        .zip(sent.values())
        .map(|(r, s)| (r - s).norm_sqr())
        .sum::<f64>()
        / n as f64;
    assert!((linear_to_snr_db(1.0 / noise) - 5.0).abs() < 0.05);
    Ok(())
}

#[test]
fn latent_snr_matches_eta_on_average() -> Result<()> {
    let mut rng = rng_from_seed(3);
    for snr in [0.0, 10.0] {
        let (mut signal, mut noise) = (0.0, 0.0);
        for t in 0..2000 {
            let v: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tx = transmit_latent(&Latent::flat(v)?, &ChannelConfig::new(snr, t), &mut rng_from_seed(t))?;
            signal += tx.sent.values().iter().map(|v| v * v).sum::<f64>();
            noise += tx
                .received
                .values()
                .iter()
                .zip(tx.sent.values())
                .map(|(r, s)| (r - s).powi(2))
                .sum::<f64>();
        }
        let eta = snr_db_to_linear(snr);
        let ratio = signal / noise;
        assert!((ratio / eta - 1.0).abs() < 0.02, "{ratio} vs {eta}");
    }
    Ok(())
}

#[test]
fn noise_variance_examples() {
    assert_eq!(ChannelConfig::new(0.0, 0).noise_variance(), 1.0);
    assert!((ChannelConfig::new(10.0, 0).noise_variance() - 0.1).abs() < 1e-15);
    assert!((snr_db_to_linear(-3.0) - 0.50119).abs() < 1e-5);
}

proptest! {
    #[test]
    fn identical_seed_gives_bitwise_identical_output(
        v in prop::collection::vec(-10.0f64..10.0, 2..64usize).prop_filter("even", |v| v.len() % 2 == 0),
        seed in any::<u64>(),
        snr in -5.0f64..20.0,
    ) {
        prop_assume!(v.iter().any(|x| *x != 0.0));
        let sym = power_normalize(&pack_complex_slice(&v).unwrap(), 1.0).unwrap();
        let ch = ChannelConfig::new(snr, seed);
        let a = awgn_transmit(&sym, &ch, &mut rng_from_seed(seed)).unwrap();
        let b = awgn_transmit(&sym, &ch, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalizing_twice_changes_nothing(v in prop::collection::vec(-10.0f64..10.0, 1..32usize), p in 0.1f64..4.0) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let mut v = v;
        if v.len() % 2 == 1 { v.push(0.5); }
        let once = power_normalize(&pack_complex_slice(&v).unwrap(), p).unwrap();
        let twice = power_normalize(&once, p).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).norm() < 1e-12 * (1.0 + a.norm()));
        }
    }
}
