//! Teacher-voted triplet relations.
//!
//! For each of the `n` triplets: draw three distinct batch indices (anchor,
//! positive, negative). Every teacher compares, in its own hidden space, the
//! anchor–positive distance `d12` against the anchor–negative distance `d13`
//! and votes +1 when `d12 > d13`, −1 otherwise (ties included). A strictly
//! positive tally swaps positive and negative. The resulting indices address
//! the student's hidden states.
//!
//! Index draws consume exactly three `random_range` calls per triplet:
//! `r1 ∈ [0, n)`, then `r2` from the `n − 1` remaining indices and `r3` from
//! the `n − 2` remaining ones, each taken in increasing index order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl TripletIndex {
    /// Exchanges positive and negative.
    pub fn swapped(self) -> Self {
        TripletIndex {
            anchor: self.anchor,
            positive: self.negative,
            negative: self.positive,
        }
    }
}

/// Distance used by teachers when voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteDistance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl VoteDistance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            VoteDistance::SquaredEuclidean => sq,
            VoteDistance::Euclidean => sq.sqrt(),
        }
    }
}

/// One teacher's pooled hidden states for a batch: `rows × dim`, row-major.
#[derive(Debug, Clone, Copy)]
pub struct HiddenStates<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> HiddenStates<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        HiddenStates { data, dim }
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Draws three distinct indices from `0..n`.
pub fn draw_distinct_three<R: Rng + ?Sized>(rng: &mut R, n: usize) -> (usize, usize, usize) {
    debug_assert!(n >= 3);
    let r1 = rng.random_range(0..n);
    let mut r2 = rng.random_range(0..n - 1);
    if r2 >= r1 {
        r2 += 1;
    }
    let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
    let mut r3 = rng.random_range(0..n - 2);
    if r3 >= lo {
        r3 += 1;
    }
    if r3 >= hi {
        r3 += 1;
    }
    (r1, r2, r3)
}

/// Net vote over teachers: +1 per teacher with `d(anchor, positive) > d(anchor, negative)`, −1 otherwise.
pub fn vote(teachers: &[HiddenStates<'_>], draw: TripletIndex, distance: VoteDistance) -> i64 {
    let mut flag = 0i64;
    for h in teachers {
        let d12 = distance.eval(h.row(draw.anchor), h.row(draw.positive));
        let d13 = distance.eval(h.row(draw.anchor), h.row(draw.negative));
        if d12 > d13 {
            flag += 1;
        } else {
            flag -= 1;
        }
    }
    flag
}

/// Generates `n` voted triplets for a batch of `n` samples.
pub fn generate_triplets<R: Rng + ?Sized>(
    teachers: &[HiddenStates<'_>],
    n: usize,
    distance: VoteDistance,
    rng: &mut R,
) -> Result<Vec<TripletIndex>> {
    if n < 3 {
        return Err(Error::Invalid(format!("triplets need a batch of at least 3, got {n}")));
    }
    if teachers.is_empty() {
        return Err(Error::Invalid("triplet voting needs at least one teacher".into()));
    }
    for (j, h) in teachers.iter().enumerate() {
        if h.dim == 0 || h.data.len() != n * h.dim {
            return Err(Error::Shape(format!(
                "teacher {j} hidden states have {} values, expected {n} × {}",
                h.data.len(),
                h.dim
            )));
        }
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (r1, r2, r3) = draw_distinct_three(rng, n);
        let draw = TripletIndex {
            anchor: r1,
            positive: r2,
            negative: r3,
        };
        out.push(if vote(teachers, draw, distance) > 0 {
            draw.swapped()
        } else {
            draw
        });
    }
    Ok(out)
}
