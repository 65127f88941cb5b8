use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use viewcon::contrastive::{
    assemble_projection_batch, cosine_similarity_matrix, nt_xent, nt_xent_tape, LossConfig, ProjectionBatch,
};
use viewcon::diffcore::{grad_check, GradCheckReport, Tensor};
use viewcon::nn::{Architecture, BundleConfig, EncoderConfig, ModelBundle};
use viewcon::signal::{generate_synthetic_dataset, GeneratorParams, Modality, Profile, SyncedSample};
use viewcon::Error;

/// Relative agreement, or absolute agreement at the finite-difference noise
/// floor for near-zero gradients.
fn fd_agrees(report: &GradCheckReport, tol: f64) -> bool {
    report
        .coords
        .iter()
        .all(|c| c.rel_error <= tol || (c.analytic - c.numeric).abs() <= 1e-9)
}

fn gaussian(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(&[rows, d], (0..rows * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Direct summation over every pair, no stabilization.
fn brute_force(z: &Tensor, tau: f64) -> f64 {
    let m = z.shape()[0];
    let n = m / 2;
    let cos = |i: usize, k: usize| {
        let (a, b) = (z.row(i), z.row(k));
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for t in 0..a.len() {
            dot += a[t] * b[t];
            na += a[t] * a[t];
            nb += b[t] * b[t];
        }
        dot / (na.sqrt() * nb.sqrt())
    };
    let mut total = 0.0;
    for i in 0..m {
        let j = if i < n { i + n } else { i - n };
        let num = (cos(i, j) / tau).exp();
        let mut den = 0.0;
        for k in 0..m {
            if k != i {
                den += (cos(i, k) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / m as f64
}

fn loss(z: &Tensor, tau: f64) -> f64 {
    nt_xent(&ProjectionBatch::new(z.clone()).unwrap(), &LossConfig::new(tau).unwrap())
        .unwrap()
        .loss
}

#[test]
fn matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..60 {
        let n = [2, 4, 8][trial % 3];
        let tau = [0.1, 0.5, 1.0][(trial / 3) % 3];
        let z = gaussian(2 * n, 128, &mut rng);
        let (ours, oracle) = (loss(&z, tau), brute_force(&z, tau));
        assert!(((ours - oracle) / oracle).abs() <= 1e-6, "n={n} tau={tau}: {ours} vs {oracle}");
    }
}

#[test]
fn small_temperature_stays_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = gaussian(16, 32, &mut rng);
    let (ours, oracle) = (loss(&z, 0.05), brute_force(&z, 0.05));
    assert!(ours.is_finite());
    assert!(((ours - oracle) / oracle).abs() <= 1e-6);
}

#[test]
fn cosine_hand_case() {
    let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
    let s = cosine_similarity_matrix(&z).unwrap();
    assert!((s.at2(0, 1) - 0.707_106_781_186_547_5).abs() < 1e-12);
    assert_eq!(s.at2(0, 2), 0.0);
    assert_eq!(s.at2(1, 1), 1.0);
}

#[test]
fn swapping_view_blocks_leaves_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 6;
    let z = gaussian(2 * n, 16, &mut rng);
    let mut swapped = z.data()[n * 16..].to_vec();
    swapped.extend_from_slice(&z.data()[..n * 16]);
    let zs = Tensor::new(&[2 * n, 16], swapped).unwrap();
    assert!((loss(&z, 0.5) - loss(&zs, 0.5)).abs() <= 1e-12);
}

#[test]
fn random_embeddings_sit_near_log_of_negatives() {
    let n = 32;
    let target = ((2 * n - 1) as f64).ln();
    let mut sum = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sum += loss(&gaussian(2 * n, 128, &mut rng), 0.5);
    }
    let mean = sum / 10.0;
    assert!((mean - target).abs() <= 0.5, "mean {mean} vs ln 63 {target}");
}

#[test]
fn zero_projection_row_is_numeric_error() {
    let mut z = Tensor::full(&[4, 3], 1.0);
    z.data_mut()[6..9].fill(0.0);
    let err = nt_xent(&ProjectionBatch::new(z).unwrap(), &LossConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("row 2")), "{err}");
}

#[test]
fn invalid_temperature_rejected() {
    assert!(LossConfig::new(0.0).is_err());
    assert!(LossConfig::new(-1.0).is_err());
}

fn tiny_bundle(views: [Modality; 2], seed: u64) -> ModelBundle {
    let p = Profile::desk();
    let encs = views
        .iter()
        .map(|&m| EncoderConfig::new(Architecture::Shallow, p.shape_of(m), 1).with_filters(vec![2, 2, 3]))
        .collect();
    ModelBundle::new(BundleConfig::new(views.to_vec(), encs, true, seed)).unwrap()
}

fn data() -> Vec<SyncedSample> {
    generate_synthetic_dataset(&GeneratorParams::new(1, 0.15, 0.9, 3, Profile::desk())).unwrap()
}

#[test]
fn assembled_batch_layout_and_routing() {
    let samples = data();
    let refs: Vec<&SyncedSample> = samples.iter().take(3).collect();
    for pair in [(Modality::Csi1, Modality::Csi2), (Modality::Csi1, Modality::Pwr)] {
        let b = tiny_bundle([pair.0, pair.1], 0);
        let batch = assemble_projection_batch(&refs, &b, pair).unwrap();
        assert_eq!(batch.z().shape(), &[6, 128]);
        assert_eq!(batch.positive_of(0), 3);
        assert_eq!(batch.positive_of(4), 1);
        assert_eq!(b.encoders[1].config.input_shape, Profile::desk().shape_of(pair.1));
    }
}

#[test]
fn permuting_samples_permutes_rows_and_keeps_loss() {
    let samples = data();
    let b = tiny_bundle([Modality::Csi1, Modality::Csi2], 4);
    let pair = (Modality::Csi1, Modality::Csi2);
    let refs: Vec<&SyncedSample> = samples.iter().take(5).collect();
    let perm = [3, 0, 4, 1, 2];
    let permuted: Vec<&SyncedSample> = perm.iter().map(|&i| refs[i]).collect();
    let a = assemble_projection_batch(&refs, &b, pair).unwrap();
    let p = assemble_projection_batch(&permuted, &b, pair).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert_eq!(p.z().row(new), a.z().row(old));
        assert_eq!(p.z().row(new + 5), a.z().row(old + 5));
    }
    let cfg = LossConfig::default();
    let (la, lp) = (nt_xent(&a, &cfg).unwrap().loss, nt_xent(&p, &cfg).unwrap().loss);
    assert!((la - lp).abs() <= 1e-12);
}

#[test]
fn missing_view_is_data_error_naming_sample() {
    let mut samples = data();
    samples[2].views.remove(&Modality::Csi2);
    let id = samples[2].id;
    let refs: Vec<&SyncedSample> = samples.iter().collect();
    let b = tiny_bundle([Modality::Csi1, Modality::Csi2], 0);
    let err = assemble_projection_batch(&refs, &b, (Modality::Csi1, Modality::Csi2)).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains(&id.to_string())), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn per_element_losses_are_positive(seed in any::<u64>(), n in 2usize..6, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(2 * n, 8, &mut rng);
        let out = nt_xent(&ProjectionBatch::new(z).unwrap(), &LossConfig::new(tau).unwrap()).unwrap();
        prop_assert_eq!(out.per_element.len(), 2 * n);
        prop_assert!(out.per_element.iter().all(|&l| l > 0.0 && l.is_finite()));
        let mean = out.per_element.iter().sum::<f64>() / (2 * n) as f64;
        prop_assert!((mean - out.loss).abs() <= 1e-12);
    }

    #[test]
    fn scaling_rows_changes_nothing(seed in any::<u64>(), n in 2usize..6, row in 0usize..4, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(2 * n, 8, &mut rng);
        let mut zc = z.clone();
        zc.data_mut()[row * 8..(row + 1) * 8].iter_mut().for_each(|v| *v *= c);
        let (s, sc) = (cosine_similarity_matrix(&z).unwrap(), cosine_similarity_matrix(&zc).unwrap());
        for (a, b) in s.data().iter().zip(sc.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!((loss(&z, 0.5) - loss(&zc, 0.5)).abs() <= 1e-9);
    }

    #[test]
    fn similarity_matrix_is_symmetric_and_bounded(seed in any::<u64>(), m in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cosine_similarity_matrix(&gaussian(m, 5, &mut rng)).unwrap();
        for i in 0..m {
            prop_assert_eq!(s.at2(i, i), 1.0);
            for k in 0..m {
                prop_assert_eq!(s.at2(i, k), s.at2(k, i));
                prop_assert!((-1.0..=1.0).contains(&s.at2(i, k)));
            }
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences(seed in any::<u64>(), n in 2usize..4, tau in 0.2f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(2 * n, 6, &mut rng);
        let cfg = LossConfig::new(tau).unwrap();
        let report = grad_check(|t, p| nt_xent_tape(t, p[0], &cfg), &[z], 1e-6, 1e-5).unwrap();
        prop_assert!(fd_agrees(&report, report.tolerance), "worst {:?}", report.worst());
    }
}
