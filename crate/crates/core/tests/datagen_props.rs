mod common;

use common::*;
use dem_core::datagen::{
    build_movielens_features, canonical_sigma, convert_colon_format, partition, popularity, read_ratings_csv,
    simulate, synthetic_ratings, write_ratings_csv, RatingsDesign, RatingsRecord, SimDesign, GENRES,
};
use dem_core::io::{read_dataset, write_dataset, DatasetMeta};
use dem_core::lmm::{information_matrices, LmmModel, Theta};
use dem_core::model::EmModel;
use dem_core::runtime::{run_ecme0, RunConfig};
use rand::seq::SliceRandom;

#[test]
fn canonical_covariance_entries() {
    let s = canonical_sigma(3).unwrap();
    let v = [1f64, 2f64.sqrt(), 3f64.sqrt()];
    let r = [[1.0, -0.4, 0.30], [-0.4, 1.0, 0.001], [0.30, 0.001, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((s[(i, j)] - v[i] * r[i][j] * v[j]).abs() < 1e-15);
        }
    }
    assert!((s[(0, 1)] + 0.565_685_424_949_238).abs() < 1e-12);
    let s6 = canonical_sigma(6).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(s6[(i, j)], s[(i, j)]);
            assert_eq!(s6[(i + 3, j + 3)], s[(i, j)]);
            assert_eq!(s6[(i, j + 3)], 0.0);
        }
    }
}

#[test]
fn simulation_is_reproducible() {
    let a = simulate(&SimDesign::new(50, 500, 4, 3, 7)).unwrap();
    let b = simulate(&SimDesign::new(50, 500, 4, 3, 7)).unwrap();
    let c = simulate(&SimDesign::new(50, 500, 4, 3, 8)).unwrap();
    assert_eq!(a.dataset.samples.len(), b.dataset.samples.len());
    for (x, y) in a.dataset.samples.iter().zip(&b.dataset.samples) {
        assert_eq!(x.y(), y.y());
        assert_eq!(x.x(), y.x());
        assert_eq!(x.z(), y.z());
    }
    assert_ne!(a.dataset.samples[0].y(), c.dataset.samples[0].y());
    assert_eq!(a.truth.beta.as_slice(), &[-2.0, 2.0, -2.0, 2.0]);
    assert_eq!(a.truth.tau2, 1.0);
}

#[test]
fn covariates_are_signs_and_residual_mean_is_zero() {
    let sim = simulate(&SimDesign::new(1000, 100_000, 10, 3, 9)).unwrap();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in &sim.dataset.samples {
        assert!(s.x().iter().chain(s.z().iter()).all(|v| *v == 1.0 || *v == -1.0));
        let r = s.y() - s.x() * &sim.truth.beta;
        sum += r.sum();
        n += r.len();
    }
    assert_eq!(n, 100_000);
    // Observations of one sample share b, so Var(Σ r) = Σ_i (n_i τ² + Σ_jl z_jᵀΣz_l),
    // bounded using |z_jᵀΣz_l| ≤ Σ_ab |Σ_ab|.
    let abs_sigma = canonical_sigma(3).unwrap().abs().sum();
    let var: f64 = sim.dataset.samples.iter().map(|s| {
        let ni = s.n_obs() as f64;
        ni + ni * ni * abs_sigma
    }).sum();
    let mean = sum / n as f64;
    let sd = var.sqrt() / n as f64;
    assert!(mean.abs() < 3.0 * sd, "mean {mean}, sd {sd}");
}

#[test]
fn partition_is_a_sample_level_split() {
    let sim = simulate(&SimDesign::new(100, 1000, 2, 3, 10)).unwrap();
    let one = partition(&sim.dataset, 1, 3).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].n_obs(), 1000);
    let parts = partition(&sim.dataset, 10, 3).unwrap();
    assert_eq!(parts.iter().map(|p| p.n_samples()).sum::<usize>(), 100);
    assert_eq!(parts.iter().map(|p| p.n_obs()).sum::<usize>(), 1000);
    let mut ys: Vec<Vec<f64>> = parts.iter().flat_map(|p| p.samples().iter().map(|s| s.y().as_slice().to_vec())).collect();
    let mut want: Vec<Vec<f64>> = sim.dataset.samples.iter().map(|s| s.y().as_slice().to_vec()).collect();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(ys, want);

    let model = LmmModel::new(2, 3);
    let theta = Theta::from_d(sim.truth.beta.clone(), &sim.truth.d(), 1.3).unwrap();
    let whole = model.local_loglik(&theta, &sim.dataset.as_single_subset().unwrap()).unwrap();
    let union: f64 = parts.iter().map(|p| model.local_loglik(&theta, p).unwrap()).sum();
    assert!((whole - union).abs() < 1e-9 * whole.abs());
    assert!(partition(&sim.dataset, 101, 3).is_err());
}

#[test]
fn partition_membership_follows_the_hypergeometric_law() {
    // How many of the first 50 samples land in each subset of 10: hypergeometric(100, 50, 10).
    let sim = simulate(&SimDesign::new(100, 100, 1, 3, 11)).unwrap();
    let first: Vec<f64> = sim.dataset.samples[..50].iter().map(|s| s.y()[0]).collect();
    let mean = 5.0;
    let sd = (10.0 * 0.5 * 0.5 * 90.0 / 99.0f64).sqrt();
    let mut total_sq = 0.0;
    let trials = 40;
    for seed in 0..trials {
        let parts = partition(&sim.dataset, 10, seed).unwrap();
        for p in &parts {
            assert_eq!(p.n_samples(), 10);
            let hits = p.samples().iter().filter(|s| first.contains(&s.y()[0])).count() as f64;
            assert!((hits - mean).abs() <= 3.0 * sd + 1e-12, "{hits}");
            total_sq += (hits - mean).powi(2);
        }
    }
    // The pooled sample variance of the counts matches the hypergeometric variance.
    let var = total_sq / (trials as f64 * 10.0);
    assert!((var / (sd * sd) - 1.0).abs() < 0.3, "variance {var} vs {}", sd * sd);
}

#[test]
fn ecme0_recovers_beta_within_three_standard_errors() {
    let sim = simulate(&SimDesign::new(200, 4000, 4, 3, 12)).unwrap();
    let model = LmmModel::new(4, 3);
    let whole = sim.dataset.as_single_subset().unwrap();
    let config = RunConfig {
        tol: 1e-10,
        max_iter: 5000,
        ..RunConfig::default()
    };
    let fit = run_ecme0(&config, &model, &whole, &Theta::starting(4, 3)).unwrap();
    let info = information_matrices(&model, &fit.theta, std::slice::from_ref(&whole), &[0]).unwrap();
    let cov = inverse(&info.i_obs);
    for j in 0..4 {
        let se = cov[(j, j)].sqrt();
        let z = (fit.theta.beta[j] - sim.truth.beta[j]) / se;
        assert!(z.abs() < 3.0, "β{j}: estimate {} truth {} se {se}", fit.theta.beta[j], sim.truth.beta[j]);
    }
}

fn record(user: u64, movie: u64, rating: f64, ts: i64, genres: u32) -> RatingsRecord {
    RatingsRecord {
        user_id: user,
        movie_id: movie,
        rating,
        timestamp: ts,
        genres,
    }
}

#[test]
fn popularity_examples() {
    assert_eq!(popularity(15, 30), 0.0);
    assert_eq!(popularity(0, 0), 0.0);
    // Thirty earlier ratings, half of them high, then one more to score.
    let mut recs: Vec<RatingsRecord> = (0..30)
        .map(|i| record(100 + i, 7, if i % 2 == 0 { 4.0 } else { 2.0 }, i as i64, 1))
        .collect();
    recs.push(record(1, 7, 3.0, 1000, 1));
    let built = build_movielens_features(&recs).unwrap();
    let idx = built.user_ids.iter().position(|&u| u == 1).unwrap();
    assert_eq!(built.dataset.samples[idx].x()[(0, 4)], 0.0);
    let first = built.user_ids.iter().position(|&u| u == 100).unwrap();
    assert_eq!(built.dataset.samples[first].x()[(0, 4)], 0.0);
}

#[test]
fn previous_examples() {
    let recs = vec![record(5, 1, 4.0, 10, 1), record(5, 2, 2.5, 20, 1), record(5, 3, 3.0, 30, 1)];
    let built = build_movielens_features(&recs).unwrap();
    let x = built.dataset.samples[0].x();
    assert_eq!(x[(0, 5)], 0.0);
    assert_eq!(x[(1, 5)], 1.0);
    assert_eq!(x[(2, 5)], 0.0);
}

#[test]
fn genre_columns_average_within_category() {
    let bit = |name: &str| 1u32 << GENRES.iter().position(|g| *g == name).unwrap();
    let genres = bit("Action") | bit("Comedy") | bit("Drama") | bit("Romance") | bit("IMAX");
    let built = build_movielens_features(&[record(1, 1, 4.0, 1, genres)]).unwrap();
    let x = built.dataset.samples[0].x();
    assert_eq!(x[(0, 0)], 1.0);
    assert_eq!(x[(0, 1)], 0.0);
    assert_eq!(x[(0, 2)], 0.25);
    assert_eq!(x[(0, 3)], 0.5);
    assert_eq!(built.dataset.samples[0].z(), x);
}

/// Straight-from-the-definition features: for every record scan all others.
fn naive_features(recs: &[RatingsRecord]) -> Vec<(u64, Vec<[f64; 2]>)> {
    let mut users: Vec<u64> = recs.iter().map(|r| r.user_id).collect();
    users.sort();
    users.dedup();
    users
        .into_iter()
        .map(|u| {
            let mut mine: Vec<&RatingsRecord> = recs.iter().filter(|r| r.user_id == u).collect();
            mine.sort_by_key(|r| (r.timestamp, r.movie_id));
            let rows = mine
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let mut prior: Vec<&RatingsRecord> =
                        recs.iter().filter(|o| o.movie_id == r.movie_id && o.timestamp < r.timestamp).collect();
                    prior.sort_by_key(|o| (o.timestamp, o.user_id));
                    let window = &prior[prior.len().saturating_sub(30)..];
                    let high = window.iter().filter(|o| o.rating > 3.0).count();
                    let p = (high as f64 + 0.5) / (window.len() as f64 + 1.0);
                    let previous = if j > 0 && mine[j - 1].rating > 3.0 { 1.0 } else { 0.0 };
                    [(p / (1.0 - p)).ln(), previous]
                })
                .collect();
            (u, rows)
        })
        .collect()
}

#[test]
fn ingestion_matches_definition_and_ignores_input_order() {
    let synth = synthetic_ratings(&RatingsDesign { movies: 20, ..RatingsDesign::new(1500, 13) }).unwrap();
    let built = build_movielens_features(&synth.records).unwrap();
    let want = naive_features(&synth.records);
    assert_eq!(built.user_ids, want.iter().map(|(u, _)| *u).collect::<Vec<_>>());
    for (s, (_, rows)) in built.dataset.samples.iter().zip(&want) {
        for (i, row) in rows.iter().enumerate() {
            assert!((s.x()[(i, 4)] - row[0]).abs() < 1e-12);
            assert_eq!(s.x()[(i, 5)], row[1]);
        }
    }

    let mut shuffled = synth.records.clone();
    shuffled.shuffle(&mut rng(3));
    let again = build_movielens_features(&shuffled).unwrap();
    for (a, b) in built.dataset.samples.iter().zip(&again.dataset.samples) {
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
    }
}

#[test]
fn generator_has_ties_and_valid_records() {
    let synth = synthetic_ratings(&RatingsDesign::new(3000, 14)).unwrap();
    assert_eq!(synth.records.len(), 3000);
    assert!(synth.records.iter().all(|r| r.validate().is_ok()));
    assert!(synth.records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    assert!(synth.records.windows(2).any(|w| w[0].timestamp == w[1].timestamp));
    let again = synthetic_ratings(&RatingsDesign::new(3000, 14)).unwrap();
    assert_eq!(synth.records, again.records);
}

#[test]
fn ratings_csv_roundtrip() {
    let synth = synthetic_ratings(&RatingsDesign::new(500, 15)).unwrap();
    let mut buf = Vec::new();
    write_ratings_csv(&mut buf, &synth.records).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("user,movie,rating,timestamp,genres\n"));
    assert_eq!(read_ratings_csv(buf.as_slice()).unwrap(), synth.records);
    let bad = "user,movie,rating,timestamp,genres\n1,2,4.25,10,1\n";
    assert!(read_ratings_csv(bad.as_bytes()).is_err());
    let bad = "user,movie,rating,timestamp,genres\n1,2,4.5,10,1048576\n";
    assert!(read_ratings_csv(bad.as_bytes()).is_err());
}

#[test]
fn colon_format_conversion() {
    let movies = "1::Toy Story (1995)::Animation|Children's|Comedy\n2::Heat (1995)::Action|Crime|Thriller\n3::Odd (2001)::(no genres listed)\n";
    let ratings = "1::1::5::978300760\n1::2::3.5::978300761\n2::3::1::978300762\n";
    let recs = convert_colon_format(ratings.as_bytes(), movies.as_bytes()).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0].genres, (1 << 2) | (1 << 3) | (1 << 4));
    assert_eq!(recs[2].genres, 0);
    assert_eq!(recs[1].rating, 3.5);
    let unknown = "1::X::Space Opera\n";
    assert!(convert_colon_format(ratings.as_bytes(), unknown.as_bytes()).is_err());
    let missing = "9::X::Drama\n";
    assert!(convert_colon_format(ratings.as_bytes(), missing.as_bytes()).is_err());
}

#[test]
fn dataset_file_roundtrip() {
    let sim = simulate(&SimDesign::new(20, 120, 3, 3, 16)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let meta = DatasetMeta::for_dataset(&sim.dataset, "test");
    write_dataset(&path, &sim.dataset, &meta).unwrap();
    let (back, meta_back) = read_dataset(&path).unwrap();
    assert_eq!(meta_back.m, 20);
    for (a, b) in sim.dataset.samples.iter().zip(&back.samples) {
        assert_eq!(a.y(), b.y());
        assert_eq!(a.x(), b.x());
        assert_eq!(a.z(), b.z());
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_dataset(&path).is_err());
}
