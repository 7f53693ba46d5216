use pokerlab::analysis::{export_projection, pca, pca_project, read_projection, AnalysisError};
use pokerlab::probes::{Label, ProbeSample};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|j| (rng.random::<f64>() - 0.5) * (1.0 + j as f64) + 0.3 * j as f64).collect()).collect()
}

fn refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(|r| r.as_slice()).collect()
}

fn residual(rows: &[Vec<f64>], mean: &[f64], basis: &[Vec<f64>]) -> f64 {
    rows.iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(mean).map(|(x, m)| x - m).collect();
            let mut res = c.clone();
            for b in basis {
                let dot: f64 = c.iter().zip(b).map(|(x, y)| x * y).sum();
                res.iter_mut().zip(b).for_each(|(v, y)| *v -= dot * y);
            }
            res.iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

#[test]
fn result_is_independent_of_row_order() {
    let rows = cloud(200, 6, 1);
    let a = pca(&refs(&rows), 2).unwrap();
    let mut shuffled = rows.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    let b = pca(&refs(&shuffled), 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn projections_are_centred_and_components_orthonormal() {
    let rows = cloud(300, 5, 3);
    let p = pca(&refs(&rows), 3).unwrap();
    let proj: Vec<Vec<f64>> = rows.iter().map(|r| p.project(r)).collect();
    for k in 0..3 {
        assert!((proj.iter().map(|v| v[k]).sum::<f64>() / 300.0).abs() < 1e-9);
        for l in 0..3 {
            let dot: f64 = p.components[k].iter().zip(&p.components[l]).map(|(x, y)| x * y).sum();
            assert!((dot - if k == l { 1.0 } else { 0.0 }).abs() < 1e-9);
        }
    }
    assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn isotropic_cloud_spreads_variance_evenly() {
    // The 2d vertices of a cross-polytope: covariance is a multiple of I.
    let d = 4;
    let rows: Vec<Vec<f64>> = (0..2 * d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if j == i / 2 {
                        if i % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let p = pca(&refs(&rows), 2).unwrap();
    for e in &p.explained_variance {
        assert!((e - 1.0 / d as f64).abs() < 1e-12);
    }
}

#[test]
fn top_components_minimise_reconstruction_error() {
    let rows = cloud(150, 5, 4);
    let p = pca(&refs(&rows), 2).unwrap();
    let best = residual(&rows, &p.mean, &p.components);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let mut u: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut v: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= nu);
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        assert!(residual(&rows, &p.mean, &[u, v]) >= best - 1e-9);
    }
}

#[test]
fn projection_file_round_trip() {
    let samples: Vec<ProbeSample> = cloud(40, 4, 5)
        .into_iter()
        .enumerate()
        .map(|(i, a)| ProbeSample {
            activation: a,
            label: Label::Value(i as f64 / 40.0),
            layer: 2,
            hand_id: i as u64,
            position: 7,
        })
        .collect();
    let proj = pca_project(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_projection(&proj, dir.path()).unwrap();
    assert!(files[0].ends_with("projection_layer2.jsonl"));
    assert_eq!(read_projection(&files[0]).unwrap(), proj);
    assert!(std::fs::read_to_string(&files[1]).unwrap().contains("<circle"));
}

#[test]
fn ragged_rows_are_rejected() {
    let rows = [vec![1.0, 2.0], vec![1.0], vec![0.0, 0.0]];
    assert!(matches!(pca(&refs(&rows), 1), Err(AnalysisError::Ragged)));
}
