//! IDX ingestion, PCA spectra and reconstruction identities.

use std::fs;

use ndarray::{Array1, Array2, Axis};
use pfgen::pipeline::{
    encode_idx_images, encode_idx_labels, export_pgm, fit_pca, load_idx, read_pgm, PcaModel, PipelineError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out
}

fn good_images(n: u32) -> Vec<u8> {
    let mut b = header(0x803, &[n, 2, 2]);
    b.extend((0..n * 4).map(|i| (i * 17 % 256) as u8));
    b
}

fn good_labels(n: u32) -> Vec<u8> {
    let mut b = header(0x801, &[n]);
    b.extend((0..n).map(|i| (i % 10) as u8));
    b
}

/// Writes the pair to a temp dir and loads it.
fn load_pair(images: &[u8], labels: &[u8]) -> Result<pfgen::pipeline::ImageSet, PipelineError> {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("images"), dir.path().join("labels"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    load_idx(&ip, &lp)
}

#[test]
fn malformed_idx_files_are_rejected_with_structured_errors() {
    // Bad magic: a label file offered as images.
    let e = load_pair(&good_labels(3), &good_labels(3)).unwrap_err();
    assert!(
        matches!(
            e,
            PipelineError::BadMagic {
                found: 0x801,
                expected: 0x803
            }
        ),
        "{e}"
    );

    // Header cut short inside the dimension fields.
    let e = load_pair(&good_images(3)[..10], &good_labels(3)).unwrap_err();
    assert!(matches!(e, PipelineError::Truncated { needed: 12, have: 10 }), "{e}");

    // Payload missing its last byte.
    let img = good_images(3);
    let e = load_pair(&img[..img.len() - 1], &good_labels(3)).unwrap_err();
    assert!(matches!(e, PipelineError::Truncated { needed: 28, have: 27 }), "{e}");

    // Extra bytes after the declared payload.
    let mut img = good_images(3);
    img.extend([0, 0]);
    let e = load_pair(&img, &good_labels(3)).unwrap_err();
    assert!(matches!(e, PipelineError::TrailingBytes { extra: 2 }), "{e}");

    // Image and label counts disagree.
    let e = load_pair(&good_images(3), &good_labels(4)).unwrap_err();
    assert!(
        matches!(e, PipelineError::CountMismatch { images: 3, labels: 4 }),
        "{e}"
    );
    assert!(e.to_string().contains('3') && e.to_string().contains('4'));

    // A label outside 0..=9.
    let mut lab = good_labels(3);
    lab[9] = 42;
    let e = load_pair(&good_images(3), &lab).unwrap_err();
    assert!(matches!(e, PipelineError::BadLabel { index: 1, label: 42 }), "{e}");
}

#[test]
fn valid_idx_files_parse_and_round_trip() {
    let set = load_pair(&good_images(0), &good_labels(0)).unwrap();
    assert!(set.is_empty());

    let mut img = header(0x803, &[1, 28, 28]);
    img.extend([255u8; 784]);
    let set = load_pair(&img, &header(0x801, &[1]).into_iter().chain([7]).collect::<Vec<_>>()).unwrap();
    assert_eq!((set.rows, set.cols, set.labels.clone()), (28, 28, vec![7]));
    assert!(set.images.iter().all(|&p| p == 1.0));

    let set = load_pair(&good_images(5), &good_labels(5)).unwrap();
    assert_eq!(encode_idx_images(2, 2, set.images.view()), good_images(5));
    assert_eq!(encode_idx_labels(&set.labels), good_labels(5));
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Orthonormal columns by Gram-Schmidt.
fn orthonormal(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = gaussian_matrix(dim, count, rng);
    for j in 0..count {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-proj, &qi);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

/// Samples `x = mean + B diag(sd) z` for standard normal `z`.
fn factor_samples(n: usize, basis: &Array2<f64>, sd: &[f64], mean: &Array1<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let z = gaussian_matrix(n, sd.len(), rng) * &Array1::from(sd.to_vec()).insert_axis(Axis(0));
    z.dot(&basis.t()) + mean.view().insert_axis(Axis(0))
}

#[test]
fn three_factor_spectrum_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 20;
    let basis = orthonormal(dim, 3, &mut rng);
    let variances = [9.0, 4.0, 1.0];
    let sd: Vec<f64> = variances.iter().map(|v: &f64| v.sqrt()).collect();
    let mean = Array1::linspace(-1.0, 1.0, dim);
    let x = factor_samples(10_000, &basis, &sd, &mean, &mut rng);
    let pca = fit_pca(x.view(), 3).unwrap();
    for (got, want) in pca.eigenvalues.iter().zip(variances) {
        assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
    }
    // Rank three: the rest of the spectrum is numerically zero.
    assert!(pca.eigenvalues.iter().skip(3).all(|&l| l < 1e-9));
    let gram = pca.components.dot(&pca.components.t());
    let off = (&gram - &Array2::<f64>::eye(3))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(off <= 1e-8, "{off}");
    // Each component lies in the factor subspace.
    for c in pca.components.rows() {
        let inside = basis.t().dot(&c);
        assert!((inside.dot(&inside) - 1.0).abs() < 1e-8);
    }
}

#[test]
fn truncation_error_equals_the_tail_eigenvalue_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 30;
    let basis = orthonormal(dim, dim, &mut rng);
    let sd: Vec<f64> = (0..dim).map(|i| 2.0 * 0.85f64.powi(i as i32)).collect();
    let mean = Array1::from_elem(dim, 0.3);
    let train = factor_samples(10_000, &basis, &sd, &mean, &mut rng);
    let held_out = factor_samples(10_000, &basis, &sd, &mean, &mut rng);
    let k = 8;
    let pca = fit_pca(train.view(), k).unwrap();
    let rec = pca
        .reconstruct_batch(pca.embed_batch(held_out.view()).unwrap().view())
        .unwrap();
    let err = (&rec - &held_out).map(|v| v * v).sum() / held_out.nrows() as f64;
    let tail: f64 = pca.eigenvalues.iter().skip(k).sum();
    assert!((err - tail).abs() / tail < 0.05, "error {err} vs tail {tail}");
}

#[test]
fn full_rank_round_trip_is_exact_and_model_persists() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_matrix(200, 12, &mut rng);
    let pca = fit_pca(x.view(), 12).unwrap();
    let gram = pca.components.dot(&pca.components.t());
    let off = (&gram - &Array2::<f64>::eye(12))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(off <= 1e-8, "{off}");
    let back = pca
        .reconstruct_batch(pca.embed_batch(x.view()).unwrap().view())
        .unwrap();
    let worst = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 1e-10, "{worst}");
    for c in pca.components.rows() {
        let lead = c.iter().fold(0.0f64, |b, &v| if v.abs() > b.abs() { v } else { b });
        assert!(lead > 0.0);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pca.bin");
    pca.save(&path).unwrap();
    assert_eq!(PcaModel::load(&path).unwrap(), pca);
}

#[test]
fn pgm_export_clips_and_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.pgm");
    let px = Array1::from(vec![-0.5, 0.0, 0.5, 1.0, 1.7, 0.25]);
    export_pgm(px.view(), 3, 2, &path).unwrap();
    let (w, h, back) = read_pgm(&path).unwrap();
    assert_eq!((w, h), (3, 2));
    let want = [0.0, 0.0, 128.0 / 255.0, 1.0, 1.0, 64.0 / 255.0];
    for (g, w) in back.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}
