//! Synthetic interaction logs with heterogeneous genre dynamics.
//!
//! Items are split into contiguous genre blocks. Every user follows a
//! latent genre process drawn from one of three populations:
//!
//! * slow drift: rarely changes genre,
//! * multi-band: sticks to a dominant genre with short one-step
//!   excursions,
//! * rapid switch: changes genre almost every step.
//!
//! Within a genre the next item continues a per-genre "series" (the
//! successor of the previous item) with probability `successor_prob` and
//! otherwise follows a Zipf popularity law, so next-item prediction has
//! structure a sequence model can learn beyond popularity.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionLog};
use crate::error::bail;
use crate::rng::SeededRng;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub genres: usize,
    /// Population shares (slow, multi-band, rapid); must sum to 1.
    pub slow_fraction: f64,
    pub multi_fraction: f64,
    pub rapid_fraction: f64,
    /// Per-step genre change probability of slow-drift users.
    pub slow_switch_rate: f64,
    /// Per-step excursion probability of multi-band users.
    pub multi_explore_rate: f64,
    /// Per-step genre change probability of rapid-switch users.
    pub rapid_switch_rate: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub zipf_exponent: f64,
    pub successor_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_users: 4000,
            num_items: 800,
            genres: 8,
            slow_fraction: 0.4,
            multi_fraction: 0.3,
            rapid_fraction: 0.3,
            slow_switch_rate: 0.05,
            multi_explore_rate: 0.3,
            rapid_switch_rate: 0.8,
            min_length: 15,
            max_length: 35,
            zipf_exponent: 1.0,
            successor_prob: 0.6,
            seed: 42,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    SlowDrift,
    MultiBand,
    RapidSwitch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUser {
    pub id: alloc::string::String,
    pub population: Population,
    /// Latent genre at every step.
    pub genres: Vec<usize>,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub log: InteractionLog,
    pub users: Vec<SyntheticUser>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 {
            bail!(Config, "synthetic spec needs at least one user and one item");
        }
        if self.genres == 0 || self.genres > self.num_items {
            bail!(Config, "genres must lie in [1, num_items], got {}", self.genres);
        }
        let fracs = [self.slow_fraction, self.multi_fraction, self.rapid_fraction];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || libm::fabs(fracs.iter().sum::<f64>() - 1.0) > 1e-9 {
            bail!(Config, "population fractions must be in [0, 1] and sum to 1, got {fracs:?}");
        }
        for (name, p) in [
            ("slow_switch_rate", self.slow_switch_rate),
            ("multi_explore_rate", self.multi_explore_rate),
            ("rapid_switch_rate", self.rapid_switch_rate),
            ("successor_prob", self.successor_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{name} must be a probability, got {p}");
            }
        }
        if self.min_length < 1 || self.min_length > self.max_length {
            bail!(Config, "need 1 <= min_length <= max_length, got {}..{}", self.min_length, self.max_length);
        }
        if !(self.zipf_exponent >= 0.0) {
            bail!(Config, "zipf_exponent must be non-negative");
        }
        Ok(())
    }

    /// Exact user counts per population: floors of the shares, remainder to
    /// the rapid-switch group.
    pub fn population_counts(&self) -> [usize; 3] {
        let slow = libm::floor(self.num_users as f64 * self.slow_fraction) as usize;
        let multi = libm::floor(self.num_users as f64 * self.multi_fraction) as usize;
        let slow = slow.min(self.num_users);
        let multi = multi.min(self.num_users - slow);
        [slow, multi, self.num_users - slow - multi]
    }

    /// Item index range (zero-based) of a genre.
    fn genre_items(&self, g: usize) -> core::ops::Range<usize> {
        let lo = g * self.num_items / self.genres;
        let hi = (g + 1) * self.num_items / self.genres;
        lo..hi
    }
}

/// Generates a corpus; a pure function of the spec.
pub fn synth_generate(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let cumulative: Vec<Vec<f64>> = (0..spec.genres)
        .map(|g| {
            let mut acc = 0.0;
            spec.genre_items(g)
                .enumerate()
                .map(|(rank, _)| {
                    acc += 1.0 / libm::pow(rank as f64 + 1.0, spec.zipf_exponent);
                    acc
                })
                .collect()
        })
        .collect();
    let counts = spec.population_counts();
    let populations = [Population::SlowDrift, Population::MultiBand, Population::RapidSwitch];
    let mut users = Vec::with_capacity(spec.num_users);
    let mut records = Vec::new();
    let mut uid = 0usize;
    for (pop, &count) in populations.iter().zip(&counts) {
        for _ in 0..count {
            let len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
            let home = rng.below(spec.genres);
            let mut genre = home;
            let mut genres = Vec::with_capacity(len);
            let mut items: Vec<usize> = Vec::with_capacity(len);
            for step in 0..len {
                if step > 0 {
                    genre = next_genre(spec, *pop, genre, home, &mut rng);
                }
                let range = spec.genre_items(genre);
                let prev_same = step > 0 && genres[step - 1] == genre;
                let item = if prev_same && rng.bernoulli(spec.successor_prob) {
                    let prev = items[step - 1];
                    range.start + (prev - range.start + 1) % range.len()
                } else {
                    range.start + rng.weighted(&cumulative[genre])
                };
                genres.push(genre);
                items.push(item);
            }
            let id = format!("u{uid:06}");
            let mut ts = 1_600_000_000i64 + rng.below(1_000_000) as i64;
            for &item in &items {
                ts += 1 + rng.below(3600) as i64;
                records.push(Interaction { user: id.clone(), item: format!("i{item:06}"), timestamp: ts });
            }
            users.push(SyntheticUser { id, population: *pop, genres, items });
            uid += 1;
        }
    }
    Ok(SyntheticCorpus { log: InteractionLog::new(records), users })
}

fn other_genre(spec: &SynthSpec, current: usize, rng: &mut SeededRng) -> usize {
    if spec.genres == 1 {
        return current;
    }
    let g = rng.below(spec.genres - 1);
    if g >= current {
        g + 1
    } else {
        g
    }
}

fn next_genre(spec: &SynthSpec, pop: Population, current: usize, home: usize, rng: &mut SeededRng) -> usize {
    match pop {
        Population::SlowDrift => {
            if rng.bernoulli(spec.slow_switch_rate) {
                other_genre(spec, current, rng)
            } else {
                current
            }
        }
        Population::MultiBand => {
            if current != home {
                home
            } else if rng.bernoulli(spec.multi_explore_rate) {
                other_genre(spec, home, rng)
            } else {
                home
            }
        }
        Population::RapidSwitch => {
            if rng.bernoulli(spec.rapid_switch_rate) {
                other_genre(spec, current, rng)
            } else {
                current
            }
        }
    }
}
