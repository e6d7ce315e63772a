//! Prototype estimation, Beta sampling and pair sampling.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tally_core::augmentation::{sample_beta, DEFAULT_EPS};
use tally_core::network::{Network, NetworkConfig};
use tally_core::prototypes::PrototypeBank;
use tally_core::sampling::{draw_pair, draw_single, GroupIndex, SamplerStrategy};
use tally_core::synthdata::{generate, DatasetSpec};
use tally_core::training::estimate_full_pass;

/// Two-pass instance statistics of one `[C, H*W]` map.
fn two_pass(map: &[f64], channels: usize, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = map.len() / channels;
    let (mut z, mut mu, mut sigma) = (Vec::new(), Vec::new(), Vec::new());
    for row in map.chunks(hw) {
        let m = row.iter().sum::<f64>() / hw as f64;
        let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
        let s = (var + eps).sqrt();
        z.extend(row.iter().map(|x| (x - m) / s));
        mu.push(m);
        sigma.push(s);
    }
    (z, mu, sigma)
}

#[test]
fn full_pass_estimates_match_two_pass_oracle() {
    let spec = DatasetSpec {
        head_count: 40,
        ..DatasetSpec::new(5, 3)
    };
    let data = generate(&spec).unwrap().train;
    let cfg = NetworkConfig::new(spec.channels, spec.num_classes);
    let net = Network::init(cfg.clone(), 4).unwrap();
    let [channels, h, w] = cfg.hidden_shape();
    let mut bank = PrototypeBank::new(5, 3, channels, h * w, 0.8, true).unwrap();
    estimate_full_pass(&net, &data, &mut bank, DEFAULT_EPS).unwrap();

    let mut r_sum = vec![vec![0.0; channels * h * w]; 5];
    let mut u_sum = vec![vec![0.0; channels]; 3];
    let mut v_sum = vec![vec![0.0; channels]; 3];
    let (mut nc, mut nd) = (vec![0.0; 5], vec![0.0; 3]);
    for (k, e) in data.examples.iter().enumerate() {
        let s = net.feature_values(&data.batch(&[k])).unwrap();
        let (z, mu, sigma) = two_pass(s.data(), channels, DEFAULT_EPS);
        r_sum[e.y].iter_mut().zip(&z).for_each(|(a, b)| *a += b);
        u_sum[e.d].iter_mut().zip(&mu).for_each(|(a, b)| *a += b);
        v_sum[e.d].iter_mut().zip(&sigma).for_each(|(a, b)| *a += b);
        nc[e.y] += 1.0;
        nd[e.d] += 1.0;
    }
    for c in 0..5 {
        let est = bank.class_estimate(c).unwrap();
        for (a, b) in est.iter().zip(&r_sum[c]) {
            assert!((a - b / nc[c]).abs() < 1e-9);
        }
    }
    for d in 0..3 {
        let (u, v) = bank.domain_estimate(d).unwrap();
        for k in 0..channels {
            assert!((u[k] - u_sum[d][k] / nd[d]).abs() < 1e-9);
            assert!((v[k] - v_sum[d][k] / nd[d]).abs() < 1e-9);
        }
    }
}

#[test]
fn beta_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for alpha in [0.2, 0.5, 2.0] {
        let n = 40_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_beta(alpha, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect_var = 1.0 / (4.0 * (2.0 * alpha + 1.0));
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!((mean - 0.5).abs() < 0.01, "alpha {alpha}: mean {mean}");
        assert!((var - expect_var).abs() < 0.01, "alpha {alpha}: var {var} vs {expect_var}");
    }
    assert!(sample_beta(0.0, &mut rng).is_err());
    assert!(sample_beta(f64::NAN, &mut rng).is_err());
}

fn grid() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>)> {
    (2usize..6, 2usize..5).prop_flat_map(|(c, d)| (Just(c), Just(d), prop::collection::vec((0..c, 0..d), 1..120)))
}

proptest! {
    /// Selective pairs draw `i` from any class and `j` from any present
    /// domain; group-balanced draws land in non-empty cells.
    #[test]
    fn sampled_indices_are_valid((c, d, cells) in grid(), seed in any::<u64>()) {
        let (labels, domains): (Vec<usize>, Vec<usize>) = cells.iter().copied().unzip();
        let mut present_classes: Vec<usize> = labels.clone();
        present_classes.sort_unstable();
        present_classes.dedup();
        let index = GroupIndex::build(&labels, &domains, c, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            if let Ok((i, j)) = draw_pair(&index, SamplerStrategy::Selective, &mut rng) {
                prop_assert!(i < labels.len() && j < labels.len());
            }
            if let Ok(i) = draw_single(&index, SamplerStrategy::GroupBalanced, &mut rng) {
                prop_assert!(index.count(labels[i], domains[i]) > 0);
            }
        }
    }

    /// Committing `k` times a constant estimate `x` from zero gives
    /// `(1 - gamma^k) x`.
    #[test]
    fn ema_of_constant_stream(gamma in 0.0f64..0.99, x in -10.0f64..10.0, k in 1usize..20) {
        let mut bank = PrototypeBank::new(1, 1, 1, 1, gamma, false).unwrap();
        for _ in 0..k {
            bank.accumulate(&[x], &[x], &[x.abs()], 0, 0).unwrap();
            bank.commit_epoch();
        }
        let expect = (1.0 - gamma.powi(k as i32)) * x;
        prop_assert!((bank.class_prototype(0).unwrap()[0] - expect).abs() < 1e-9);
        prop_assert!((bank.domain_stats(0).unwrap().0[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn flat_round_trip(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = PrototypeBank::new(3, 2, 2, 4, 0.8, true).unwrap();
        for c in 0..3 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            bank.accumulate(&z, &[0.1, 0.2], &[1.0, 2.0], c, c % 2).unwrap();
        }
        bank.commit_epoch();
        let back = PrototypeBank::from_flat(&bank.layout(), &bank.to_flat()).unwrap();
        prop_assert_eq!(back.to_flat(), bank.to_flat());
    }
}
