use msunet::ica::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows x len` mixtures of three uniform sources with a uniform mixing matrix.
pub fn known_mixing(rows: usize, len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<f64> = (0..3 * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mixing: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = vec![0.0; rows * len];
    for r in 0..rows {
        for c in 0..len {
            x[r * len + c] = (0..3).map(|i| mixing[r * 3 + i] * sources[i * len + c]).sum();
        }
    }
    (x, mixing)
}

/// Components as rows: `3 x rows`.
fn components(m: &[f64], rows: usize) -> Vec<f64> {
    (0..3).flat_map(|i| (0..rows).map(move |r| m[r * 3 + i])).collect()
}

fn max_row_rms(fit: &IcaFit, x: &[f64], len: usize) -> f64 {
    (0..fit.rows())
        .map(|p| {
            let rec = fit.reconstruct_row(p);
            (rec.iter().zip(&x[p * len..(p + 1) * len]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / len as f64).sqrt()
        })
        .fold(0.0, f64::max)
}

#[test]
fn recovers_known_mixing() {
    let (rows, len) = (500, 4000);
    for seed in 0..3 {
        let (x, mixing) = known_mixing(rows, len, seed);
        let fit = ica_fit(&x, rows, len, 3, &IcaConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.explained_fraction > 0.999);
        assert!(max_row_rms(&fit, &x, len) < 1e-6);
        let d = amari_distance(&components(&fit.coefficients, rows), &components(&mixing, rows), 3, rows).unwrap();
        assert!(d < 0.05, "seed {seed}: amari {d}");
    }
}

#[test]
fn pca_only_does_not_unmix() {
    // whitening alone leaves an arbitrary rotation, far from the true mixing
    let (rows, len) = (500, 4000);
    let (x, mixing) = known_mixing(rows, len, 1);
    let cfg = IcaConfig { method: Decomposition::Pca, ..IcaConfig::default() };
    let fit = ica_fit(&x, rows, len, 3, &cfg).unwrap();
    let d = amari_distance(&components(&fit.coefficients, rows), &components(&mixing, rows), 3, rows).unwrap();
    assert!(d > 0.1, "amari {d}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_identity(seed in 0u64..1000, rows in 20usize..60, cols in 3usize..30, dim_frac in 0.0f64..1.0) {
        let dim = 1 + ((cols.min(rows / SAMPLES_PER_DIM) - 1) as f64 * dim_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fit = ica_fit(&x, rows, cols, dim, &IcaConfig { seed, ..IcaConfig::default() }).unwrap();
        prop_assert!((0.0..=1.0).contains(&fit.explained_fraction));
        for p in 0..rows {
            let rec = fit.reconstruct_row(p);
            let resid: Vec<f64> = rec.iter().zip(&x[p * cols..(p + 1) * cols]).map(|(a, b)| b - a).collect();
            let rms = (resid.iter().map(|r| r * r).sum::<f64>() / cols as f64).sqrt();
            prop_assert!((rms - fit.residual_sigma[p]).abs() < 1e-6);
            // reconstruction plus the stored residual gives the input back
            for (j, r) in resid.iter().enumerate() {
                prop_assert!((rec[j] + r - x[p * cols + j]).abs() < 1e-6);
            }
        }
    }
}
