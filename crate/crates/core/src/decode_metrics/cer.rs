use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CerError {
    #[error("reference is empty")]
    EmptyReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub cer: f64,
}

impl CerReport {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Cell {
    cost: usize,
    indels: usize,
}

/// Unit-cost edit alignment of `hypothesis` against `reference`. Among
/// the minimum-cost alignments the one with the fewest insertions plus
/// deletions is taken, so substitution wins over an insert/delete pair.
/// The result is not clamped: heavy insertion can push it past 1.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<CerReport, CerError> {
    let n = reference.len();
    let m = hypothesis.len();
    if n == 0 {
        return Err(CerError::EmptyReference);
    }
    let width = m + 1;
    let mut d = vec![Cell { cost: 0, indels: 0 }; (n + 1) * width];
    for i in 0..=n {
        d[i * width] = Cell { cost: i, indels: i };
    }
    for j in 0..=m {
        d[j] = Cell { cost: j, indels: j };
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * width + j - 1];
            let sub = Cell {
                cost: diag.cost + usize::from(reference[i - 1] != hypothesis[j - 1]),
                indels: diag.indels,
            };
            let up = d[(i - 1) * width + j];
            let del = Cell { cost: up.cost + 1, indels: up.indels + 1 };
            let left = d[i * width + j - 1];
            let ins = Cell { cost: left.cost + 1, indels: left.indels + 1 };
            d[i * width + j] = sub.min(del).min(ins);
        }
    }
    let best = d[n * width + m];
    // cost = S + D + I, indels = D + I and D - I = n - m pin all three
    let deletions = ((best.indels + n) - m) / 2;
    let insertions = best.indels - deletions;
    let substitutions = best.cost - best.indels;
    Ok(CerReport {
        substitutions,
        deletions,
        insertions,
        ref_len: n,
        cer: best.cost as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn table_six_rows() {
        let r = chars("国务院督察组将督促整改");
        let rows = [
            ("国务院督查组将陆续展开", 0.4545, 5),
            ("国务院督查组将突出整改", 0.2727, 3),
            ("国务院督查组将图书整改", 0.2727, 3),
            ("国务院督查组将督促整改", 0.0909, 1),
        ];
        for (h, want, subs) in rows {
            let rep = cer(&r, &chars(h)).unwrap();
            assert_eq!(format!("{:.4}", rep.cer), format!("{want:.4}"), "{h}");
            assert_eq!(rep.substitutions, subs);
            assert_eq!(rep.deletions + rep.insertions, 0);
        }
    }

    #[test]
    fn trivial_cases() {
        let r = chars("abc");
        assert_eq!(cer(&r, &r).unwrap().cer, 0.0);
        let rep = cer(&r, &[]).unwrap();
        assert_eq!((rep.cer, rep.deletions), (1.0, 3));
        let rep = cer(&chars("a"), &chars("xyz")).unwrap();
        assert_eq!((rep.substitutions, rep.insertions), (1, 2));
        assert_eq!(rep.cer, 3.0);
        assert_eq!(cer::<char>(&[], &r), Err(CerError::EmptyReference));
    }

    #[test]
    fn swap_prefers_substitution() {
        let rep = cer(&chars("ab"), &chars("ba")).unwrap();
        assert_eq!((rep.substitutions, rep.deletions, rep.insertions), (2, 0, 0));
    }
}
