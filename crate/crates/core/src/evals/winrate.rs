//! Pairwise preference statistics with ties split evenly.

use std::io::Read;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::EvalError;

/// Win / tie / loss counts (or percentages; only ratios matter).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingTally {
    pub wins: f64,
    pub ties: f64,
    pub losses: f64,
}

impl RatingTally {
    pub fn new(wins: f64, ties: f64, losses: f64) -> Self {
        Self { wins, ties, losses }
    }

    pub fn total(&self) -> f64 {
        self.wins + self.ties + self.losses
    }

    /// Wins plus half the ties.
    pub fn effective_wins(&self) -> f64 {
        self.wins + self.ties / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// `(wins + ties / 2) / (wins + ties + losses)`.
pub fn win_rate(tally: &RatingTally) -> Result<f64, EvalError> {
    let total = tally.total();
    if [tally.wins, tally.ties, tally.losses].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(EvalError::InvalidTally);
    }
    if total <= 0.0 {
        return Err(EvalError::ZeroTotal);
    }
    Ok(tally.effective_wins() / total)
}

/// Wilson score interval for the tie-split win rate of `tally`, treating it
/// as `n` Bernoulli trials.
pub fn win_rate_ci(tally: &RatingTally, n: u64, level: f64) -> Result<Interval, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroSamples);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::InvalidLevel(level));
    }
    let p = win_rate(tally)?;
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let n = n as f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Ok(Interval {
        lower: (centre - half).clamp(0.0, p),
        upper: (centre + half).clamp(p, 1.0),
    })
}

#[derive(Debug, Deserialize)]
struct RatingRow {
    #[allow(dead_code)]
    item_id: String,
    outcome: String,
}

/// Reads `item_id,outcome` CSV rows (`win`, `tie` or `loss`) into counts.
pub fn read_ratings<R: Read>(r: R) -> Result<RatingTally, EvalError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = reader.headers().map_err(|e| EvalError::Ratings(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["item_id", "outcome"] {
        return Err(EvalError::Ratings("header must be `item_id,outcome`".into()));
    }
    let mut tally = RatingTally::new(0.0, 0.0, 0.0);
    for (i, row) in reader.deserialize::<RatingRow>().enumerate() {
        let row = row.map_err(|e| EvalError::Ratings(e.to_string()))?;
        match row.outcome.to_ascii_lowercase().as_str() {
            "win" => tally.wins += 1.0,
            "tie" => tally.ties += 1.0,
            "loss" => tally.losses += 1.0,
            other => {
                return Err(EvalError::Ratings(format!(
                    "row {}: unknown outcome {other:?}",
                    i + 2
                )))
            }
        }
    }
    Ok(tally)
}
