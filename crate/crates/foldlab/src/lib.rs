//! Numerical laboratory for generalized Radon transforms whose canonical
//! relation has fold singularities on both sides.
//!
//! The crate is organised bottom-up: [`jets`] evaluates derivative jets of the
//! defining functions, [`canrel`] turns them into fold quantities, [`models`]
//! provides the built-in families, [`changevars`] normalizes a model at a base
//! point, [`plates`] checks the plate containment lemma, [`dyadic`] builds the
//! frequency-localized pieces `R_{k,ℓ}`, [`normlab`] measures their norms, and
//! [`experiments`] runs config-driven experiments over all of them.

pub mod canrel;
pub mod changevars;
pub mod dyadic;
pub mod error;
pub mod experiments;
pub mod jets;
pub mod linalg;
pub mod models;
pub mod normlab;
pub mod par;
pub mod plates;
pub mod poly;

pub use error::{Error, Result};

/// Candidates within edit distance 3 of `name`, closest first.
pub fn suggest(name: &str, candidates: &[&str]) -> Vec<String> {
    let mut scored: Vec<(usize, &str)> =
        candidates.iter().map(|c| (levenshtein(name, c), *c)).filter(|(d, _)| *d <= 3).collect();
    scored.sort();
    scored.into_iter().map(|(_, c)| c.to_string()).collect()
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != *cb)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    #[test]
    fn suggestions_rank_by_distance() {
        assert_eq!(super::suggest("plate-chek", &["plate-check", "slab-bound"]), vec!["plate-check"]);
        assert!(super::suggest("zzzzzzzzzz", &["xray"]).is_empty());
    }
}
