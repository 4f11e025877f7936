//! Seeded stream mixing a primary and an extended training set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Draw {
    Primary(usize),
    Extended(usize),
}

impl Draw {
    pub fn is_primary(self) -> bool {
        matches!(self, Draw::Primary(_))
    }
}

/// Each draw picks the primary set with probability `p`, then a uniform
/// index inside the chosen set.
#[derive(Clone, Debug)]
pub struct MixedSampler {
    primary: usize,
    extended: usize,
    p: f64,
    rng: ChaCha8Rng,
}

impl MixedSampler {
    pub fn new(primary_len: usize, extended_len: usize, p: f64, seed: u64) -> Result<Self> {
        if primary_len == 0 {
            return Err(NnError::EmptySet("primary"));
        }
        if extended_len == 0 {
            return Err(NnError::EmptySet("extended"));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(NnError::InvalidParameter(format!("mix probability {p} outside [0, 1]")));
        }
        Ok(Self { primary: primary_len, extended: extended_len, p, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn draw(&mut self) -> Draw {
        if self.rng.gen::<f64>() < self.p {
            Draw::Primary(self.rng.gen_range(0..self.primary))
        } else {
            Draw::Extended(self.rng.gen_range(0..self.extended))
        }
    }
}

impl Iterator for MixedSampler {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        Some(self.draw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extreme_probabilities_pick_one_set() {
        assert!(MixedSampler::new(3, 5, 1.0, 1).unwrap().take(500).all(|d| d.is_primary()));
        assert!(MixedSampler::new(3, 5, 0.0, 1).unwrap().take(500).all(|d| !d.is_primary()));
    }

    #[test]
    fn balanced_fraction_and_reproducible() {
        let draws: Vec<Draw> = MixedSampler::new(4, 9, 0.5, 77).unwrap().take(10_000).collect();
        let frac = draws.iter().filter(|d| d.is_primary()).count() as f64 / 1e4;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
        assert!(draws.iter().all(|d| match *d {
            Draw::Primary(i) => i < 4,
            Draw::Extended(i) => i < 9,
        }));
        assert_eq!(draws, MixedSampler::new(4, 9, 0.5, 77).unwrap().take(10_000).collect::<Vec<_>>());
    }

    #[test]
    fn empty_sets_are_errors() {
        assert!(matches!(MixedSampler::new(0, 2, 0.5, 0), Err(NnError::EmptySet("primary"))));
        assert!(matches!(MixedSampler::new(2, 0, 0.5, 0), Err(NnError::EmptySet("extended"))));
    }
}
