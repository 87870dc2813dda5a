//! Synthetic skill datasets: each skill draws tokens from its own contiguous
//! slice of the vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSkillSpec {
    pub skill_label: String,
    /// Token ids `alphabet_start..alphabet_end`.
    pub alphabet_start: u32,
    pub alphabet_end: u32,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl SyntheticSkillSpec {
    pub fn alphabet_size(&self) -> u32 {
        self.alphabet_end.saturating_sub(self.alphabet_start)
    }

    fn overlaps(&self, other: &Self) -> bool {
        self.alphabet_start < other.alphabet_end && other.alphabet_start < self.alphabet_end
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.alphabet_start >= self.alphabet_end {
            return Err(ModelError::InvalidDataset(format!(
                "`{}` has an empty alphabet",
                self.skill_label
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(ModelError::InvalidDataset(format!(
                "`{}` needs 1 <= min_len <= max_len",
                self.skill_label
            )));
        }
        Ok(())
    }
}

/// `n` queries for one skill. The same spec always yields the same queries.
pub fn make_skill_dataset(
    spec: &SyntheticSkillSpec,
    n: usize,
) -> Result<Vec<Vec<u32>>, ModelError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            (0..len)
                .map(|_| rng.random_range(spec.alphabet_start..spec.alphabet_end))
                .collect()
        })
        .collect())
}

/// Fails if any two skills share a token id.
pub fn check_disjoint(specs: &[SyntheticSkillSpec]) -> Result<(), ModelError> {
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.overlaps(b) {
                return Err(ModelError::AlphabetOverlap {
                    a: a.skill_label.clone(),
                    b: b.skill_label.clone(),
                });
            }
        }
    }
    Ok(())
}

pub fn make_skill_datasets(
    specs: &[SyntheticSkillSpec],
    n: usize,
) -> Result<Vec<Vec<Vec<u32>>>, ModelError> {
    check_disjoint(specs)?;
    specs.iter().map(|s| make_skill_dataset(s, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(label: &str, start: u32, end: u32) -> SyntheticSkillSpec {
        SyntheticSkillSpec {
            skill_label: label.into(),
            alphabet_start: start,
            alphabet_end: end,
            min_len: 3,
            max_len: 7,
            seed: 9,
        }
    }

    #[test]
    fn tokens_stay_in_alphabet() {
        let s = spec("a", 10, 20);
        let d = make_skill_dataset(&s, 200).unwrap();
        assert_eq!(d.len(), 200);
        for q in &d {
            assert!((3..=7).contains(&q.len()));
            assert!(q.iter().all(|t| (10..20).contains(t)));
        }
        assert_eq!(d, make_skill_dataset(&s, 200).unwrap());
    }

    #[test]
    fn overlap_detected() {
        assert!(check_disjoint(&[spec("a", 0, 10), spec("b", 10, 20)]).is_ok());
        assert!(matches!(
            check_disjoint(&[spec("a", 0, 11), spec("b", 10, 20)]),
            Err(ModelError::AlphabetOverlap { .. })
        ));
    }

    #[test]
    fn bad_specs() {
        assert!(make_skill_dataset(&spec("a", 5, 5), 1).is_err());
        let mut s = spec("a", 0, 4);
        s.min_len = 8;
        assert!(make_skill_dataset(&s, 1).is_err());
    }
}
