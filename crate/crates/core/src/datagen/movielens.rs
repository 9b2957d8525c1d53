//! Ratings records, their text formats, the six-column feature pipeline and a
//! synthetic ratings generator.
//!
//! Each user is one sample with `X_i = Z_i` holding, per rating,
//! `[1, children, comedy, drama, popularity, previous]`. The category columns
//! are the shares of the movie's mapped genres falling in each category, so
//! the intercept plays the role of the Action baseline and the three share
//! columns are contrasts against it.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::{Dataset, Sample, Theta};

/// Genre names in bit order of the genre bitfield.
pub const GENRES: [&str; 19] = [
    "Action",
    "Adventure",
    "Animation",
    "Children",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "IMAX",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

pub const MOVIELENS_COLUMNS: [&str; 6] =
    ["action", "children-action", "comedy-action", "drama-action", "popularity", "previous"];

/// Category per genre bit: 0 action, 1 children, 2 comedy, 3 drama. IMAX
/// belongs to no category.
const CATEGORY: [Option<usize>; 19] = [
    Some(0),
    Some(0),
    Some(1),
    Some(1),
    Some(2),
    Some(3),
    Some(3),
    Some(3),
    Some(0),
    Some(3),
    Some(0),
    None,
    Some(3),
    Some(3),
    Some(3),
    Some(0),
    Some(0),
    Some(3),
    Some(3),
];

const WINDOW: usize = 30;
const HIGH: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingsRecord {
    #[serde(rename = "user")]
    pub user_id: u64,
    #[serde(rename = "movie")]
    pub movie_id: u64,
    pub rating: f64,
    pub timestamp: i64,
    /// Bit `g` set when the movie carries genre `GENRES[g]`.
    pub genres: u32,
}

impl RatingsRecord {
    pub fn validate(&self) -> Result<()> {
        let twice = self.rating * 2.0;
        if !(twice.fract() == 0.0 && (1.0..=10.0).contains(&twice)) {
            return Err(Error::Format(format!(
                "rating {} of user {} for movie {} is not on the 0.5..5.0 half-point grid",
                self.rating, self.user_id, self.movie_id
            )));
        }
        if self.genres >> GENRES.len() != 0 {
            return Err(Error::Format(format!(
                "movie {} has unknown genre flags {:#x}",
                self.movie_id,
                self.genres >> GENRES.len() << GENRES.len()
            )));
        }
        Ok(())
    }
}

/// `logit((l + 0.5) / (n + 1))`.
pub fn popularity(high: usize, count: usize) -> f64 {
    let p = (high as f64 + 0.5) / (count as f64 + 1.0);
    (p / (1.0 - p)).ln()
}

fn category_shares(genres: u32) -> [f64; 4] {
    let mut counts = [0u32; 4];
    for (bit, cat) in CATEGORY.iter().enumerate() {
        if let Some(c) = cat {
            if genres & (1 << bit) != 0 {
                counts[*c] += 1;
            }
        }
    }
    let total: u32 = counts.iter().sum();
    if total == 0 {
        return [0.0; 4];
    }
    counts.map(|c| f64::from(c) / f64::from(total))
}

fn feature_row(genres: u32, pop: f64, previous: bool) -> [f64; 6] {
    let s = category_shares(genres);
    [1.0, s[1], s[2], s[3], pop, if previous { 1.0 } else { 0.0 }]
}

/// Recent ratings of one movie, newest at the back.
#[derive(Default)]
struct MovieHistory(VecDeque<bool>);

impl MovieHistory {
    fn popularity(&self) -> f64 {
        popularity(self.0.iter().filter(|&&h| h).count(), self.0.len())
    }

    fn push(&mut self, high: bool) {
        if self.0.len() == WINDOW {
            self.0.pop_front();
        }
        self.0.push_back(high);
    }
}

/// Per-user samples plus the user id of each sample.
#[derive(Debug, Clone)]
pub struct RatingsDataset {
    pub dataset: Dataset,
    pub user_ids: Vec<u64>,
}

/// Build per-user samples from ratings records in any order.
///
/// Popularity uses the up to 30 most recent ratings of the movie with a
/// strictly earlier timestamp. `previous` follows the order
/// `(timestamp, movie)` within a user and is 0 for the user's first rating.
pub fn build_movielens_features(records: &[RatingsRecord]) -> Result<RatingsDataset> {
    if records.is_empty() {
        return Err(Error::Format("no ratings records".into()));
    }
    for r in records {
        r.validate()?;
    }

    let mut by_time: Vec<usize> = (0..records.len()).collect();
    by_time.sort_by_key(|&i| {
        let r = &records[i];
        (r.timestamp, r.user_id, r.movie_id)
    });
    let mut pop = vec![0.0; records.len()];
    let mut history: HashMap<u64, MovieHistory> = HashMap::new();
    for group in by_time.chunk_by(|&a, &b| records[a].timestamp == records[b].timestamp) {
        for &i in group {
            pop[i] = history
                .get(&records[i].movie_id)
                .map_or_else(|| popularity(0, 0), MovieHistory::popularity);
        }
        for &i in group {
            let r = &records[i];
            history.entry(r.movie_id).or_default().push(r.rating > HIGH);
        }
    }

    let mut by_user: Vec<usize> = (0..records.len()).collect();
    by_user.sort_by_key(|&i| {
        let r = &records[i];
        (r.user_id, r.timestamp, r.movie_id)
    });
    let mut samples = Vec::new();
    let mut user_ids = Vec::new();
    for group in by_user.chunk_by(|&a, &b| records[a].user_id == records[b].user_id) {
        let rows: Vec<[f64; 6]> = group
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let previous = j > 0 && records[group[j - 1]].rating > HIGH;
                feature_row(records[i].genres, pop[i], previous)
            })
            .collect();
        let x = DMatrix::from_fn(rows.len(), 6, |r, c| rows[r][c]);
        let y = DVector::from_iterator(group.len(), group.iter().map(|&i| records[i].rating));
        samples.push(Sample::new(y, x.clone(), x)?);
        user_ids.push(records[group[0]].user_id);
    }
    Ok(RatingsDataset {
        dataset: Dataset::new(samples)?,
        user_ids,
    })
}

/// Read comma-separated records with header `user,movie,rating,timestamp,genres`.
pub fn read_ratings_csv<R: Read>(input: R) -> Result<Vec<RatingsRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let rec: RatingsRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ratings_csv<W: Write>(output: W, records: &[RatingsRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(output);
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

fn genre_bits(list: &str, movie: u64) -> Result<u32> {
    let mut bits = 0u32;
    for name in list.split('|').map(str::trim) {
        if name.is_empty() || name == "(no genres listed)" {
            continue;
        }
        // Older releases spell the children's genre with an apostrophe.
        let name = if name == "Children's" { "Children" } else { name };
        let bit = GENRES
            .iter()
            .position(|g| *g == name)
            .ok_or_else(|| Error::Format(format!("movie {movie}: unknown genre {name:?}")))?;
        bits |= 1 << bit;
    }
    Ok(bits)
}

fn colon_fields(line: &str, want: usize, what: &str, lineno: usize) -> Result<Vec<String>> {
    let fields: Vec<String> = line.split("::").map(str::to_string).collect();
    if fields.len() != want {
        return Err(Error::Format(format!(
            "{what} line {lineno}: expected {want} '::'-separated fields, found {}",
            fields.len()
        )));
    }
    Ok(fields)
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str, lineno: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("{what} line {lineno}: cannot parse {s:?}")))
}

/// Convert the `::`-separated ratings (`user::movie::rating::timestamp`) and
/// movies (`movie::title::Genre|Genre`) files into records.
pub fn convert_colon_format<R1: BufRead, R2: BufRead>(
    ratings: R1,
    movies: R2,
) -> Result<Vec<RatingsRecord>> {
    let mut genres = HashMap::new();
    for (lineno, line) in movies.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = colon_fields(&line, 3, "movies", lineno + 1)?;
        let movie: u64 = parse_field(&f[0], "movies", lineno + 1)?;
        genres.insert(movie, genre_bits(&f[2], movie)?);
    }
    let mut out = Vec::new();
    for (lineno, line) in ratings.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = colon_fields(&line, 4, "ratings", lineno + 1)?;
        let movie_id: u64 = parse_field(&f[1], "ratings", lineno + 1)?;
        let rec = RatingsRecord {
            user_id: parse_field(&f[0], "ratings", lineno + 1)?,
            movie_id,
            rating: parse_field(&f[2], "ratings", lineno + 1)?,
            timestamp: parse_field(&f[3], "ratings", lineno + 1)?,
            genres: *genres.get(&movie_id).ok_or_else(|| {
                Error::Format(format!("ratings line {}: movie {movie_id} not in movies file", lineno + 1))
            })?,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SyntheticRatings {
    pub records: Vec<RatingsRecord>,
    /// Parameter used to draw the latent continuous ratings.
    pub truth: Theta,
}

fn round_to_grid(v: f64) -> f64 {
    ((v.clamp(0.5, 5.0) * 2.0).round()) / 2.0
}

/// Settings of the synthetic ratings generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsDesign {
    pub records: usize,
    /// Average number of ratings per user.
    pub per_user: usize,
    pub movies: usize,
    pub beta: Vec<f64>,
    /// Diagonal of the random-effects covariance `Σ`.
    pub sigma_diag: Vec<f64>,
    pub tau2: f64,
    /// Probability that a record shares the previous record's timestamp.
    pub tie_rate: f64,
    pub seed: u64,
}

impl RatingsDesign {
    pub fn new(records: usize, seed: u64) -> Self {
        RatingsDesign {
            records,
            per_user: 20,
            movies: 300,
            beta: vec![3.2, 0.3, -0.2, 0.4, 0.5, 0.2],
            sigma_diag: vec![0.3; 6],
            tau2: 0.5,
            tie_rate: 0.1,
            seed,
        }
    }
}

/// Ratings drawn from the six-column mixed model itself, in time order.
/// A latent score `xβ + x·b_u + e` is clamped to `[0.5, 5]` and rounded to
/// the half-point grid. Every user rates at least once, and a record that
/// shares its timestamp with the previous one always belongs to a different
/// user.
pub fn synthetic_ratings(design: &RatingsDesign) -> Result<SyntheticRatings> {
    let n_records = design.records;
    if n_records == 0 || design.per_user == 0 || design.movies == 0 {
        return Err(Error::Config("records, per_user and movies must be positive".into()));
    }
    if design.beta.len() != 6 || design.sigma_diag.len() != 6 {
        return Err(Error::Config("beta and sigma_diag need six entries".into()));
    }
    if design.sigma_diag.iter().any(|v| v.is_nan() || *v <= 0.0) || design.tau2.is_nan() || design.tau2 <= 0.0 {
        return Err(Error::Config("variances must be positive".into()));
    }
    if !(0.0..1.0).contains(&design.tie_rate) {
        return Err(Error::Config("tie_rate must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let n_users = (n_records / design.per_user).max(1);
    let n_movies = design.movies;

    let beta = DVector::from_vec(design.beta.clone());
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(design.sigma_diag.clone()));
    let tau2 = design.tau2;
    let truth = Theta::from_d(beta, &(&sigma / tau2), tau2)?;
    let sigma_chol = sigma.map(f64::sqrt);

    let movie_genres: Vec<u32> = (0..n_movies)
        .map(|_| {
            let mut bits = 0u32;
            for _ in 0..rng.random_range(1..=3) {
                bits |= 1 << rng.random_range(0..GENRES.len());
            }
            bits
        })
        .collect();
    let effects: Vec<DVector<f64>> = (0..n_users)
        .map(|_| &sigma_chol * DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();

    let mut users: Vec<usize> = (0..n_users).collect();
    users.extend((n_users..n_records).map(|_| rng.random_range(0..n_users)));
    users.shuffle(&mut rng);

    let mut history: Vec<VecDeque<bool>> = vec![VecDeque::new(); n_movies];
    let mut last_high: Vec<Option<bool>> = vec![None; n_users];
    let mut records = Vec::with_capacity(n_records);
    let mut pending: Vec<(usize, bool)> = Vec::new();
    let mut group_users: Vec<usize> = Vec::new();
    let mut timestamp: i64 = 1_000_000_000;
    let tau = tau2.sqrt();

    for &u in &users {
        let tie = !records.is_empty() && rng.random_bool(design.tie_rate) && !group_users.contains(&u);
        if !tie {
            timestamp += rng.random_range(1..=600);
            for (movie, high) in pending.drain(..) {
                let h: &mut VecDeque<bool> = &mut history[movie];
                if h.len() == WINDOW {
                    h.pop_front();
                }
                h.push_back(high);
            }
            group_users.clear();
        }
        let movie = rng.random_range(0..n_movies);
        let h = &history[movie];
        let l = h.iter().filter(|&&b| b).count() as f64;
        let n = h.len() as f64;
        let p = (l + 0.5) / (n + 1.0);
        let pop = (p / (1.0 - p)).ln();

        let mut counts = [0.0f64; 4];
        for (bit, cat) in CATEGORY.iter().enumerate() {
            if let (Some(c), true) = (cat, movie_genres[movie] & (1 << bit) != 0) {
                counts[*c] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        let share = |c: usize| if total > 0.0 { counts[c] / total } else { 0.0 };
        let prev = match last_high[u] {
            Some(true) => 1.0,
            _ => 0.0,
        };
        let x = DVector::from_vec(vec![1.0, share(1), share(2), share(3), pop, prev]);
        let latent = x.dot(&truth.beta) + x.dot(&effects[u]) + tau * rng.sample::<f64, _>(StandardNormal);
        let rating = round_to_grid(latent);

        records.push(RatingsRecord {
            user_id: u as u64 + 1,
            movie_id: movie as u64 + 1,
            rating,
            timestamp,
            genres: movie_genres[movie],
        });
        pending.push((movie, rating > HIGH));
        last_high[u] = Some(rating > HIGH);
        group_users.push(u);
    }
    Ok(SyntheticRatings { records, truth })
}
