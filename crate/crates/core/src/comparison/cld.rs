//! Compact Letter Display via insert-and-absorb.
//!
//! Start with one letter shared by every policy. For each separated pair
//! `(i, j)`, every letter column holding both is split into a copy without
//! `i` and a copy without `j`; columns contained in another column are then
//! absorbed. The surviving columns are exactly the maximal sets of mutually
//! non-separated policies.

use serde::{Deserialize, Serialize};

use super::{ComparisonError, ComparisonMatrix};

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CldAssignment {
    pub policies: Vec<String>,
    pub letters: Vec<String>,
}

impl CldAssignment {
    pub fn letters_of(&self, policy: &str) -> Option<&str> {
        self.policies
            .iter()
            .position(|p| p == policy)
            .map(|i| self.letters[i].as_str())
    }

    pub fn shares_letter(&self, i: usize, j: usize) -> bool {
        self.letters[i].chars().any(|c| self.letters[j].contains(c))
    }

    /// Membership of each letter, in letter order.
    pub fn columns(&self) -> Vec<Vec<bool>> {
        let mut used: Vec<char> = self.letters.iter().flat_map(|l| l.chars()).collect();
        used.sort_by_key(|c| ALPHABET.iter().position(|&a| a as char == *c));
        used.dedup();
        used.iter()
            .map(|c| self.letters.iter().map(|l| l.contains(*c)).collect())
            .collect()
    }
}

fn is_subset(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(&x, &y)| !x || y)
}

fn absorb(columns: Vec<Vec<bool>>) -> Vec<Vec<bool>> {
    let mut kept: Vec<Vec<bool>> = Vec::with_capacity(columns.len());
    for (idx, col) in columns.iter().enumerate() {
        let dominated = columns.iter().enumerate().any(|(other, c)| {
            other != idx && is_subset(col, c) && (col != c || other < idx)
        });
        if !dominated {
            kept.push(col.clone());
        }
    }
    kept
}

/// Insert-and-absorb over `k` policies.
pub fn insert_absorb(k: usize, separated: impl Fn(usize, usize) -> bool) -> Vec<Vec<bool>> {
    let mut columns = vec![vec![true; k]];
    for i in 0..k {
        for j in (i + 1)..k {
            if !separated(i, j) {
                continue;
            }
            let mut next = Vec::with_capacity(columns.len() + 1);
            let mut split = false;
            for col in columns {
                if col[i] && col[j] {
                    let mut without_i = col.clone();
                    without_i[i] = false;
                    let mut without_j = col;
                    without_j[j] = false;
                    next.push(without_i);
                    next.push(without_j);
                    split = true;
                } else {
                    next.push(col);
                }
            }
            columns = if split { absorb(next) } else { next };
        }
    }
    columns.retain(|c| c.iter().any(|&b| b));
    // first-use order: a column containing an earlier policy comes first
    columns.sort_by(|a, b| {
        let key = |c: &Vec<bool>| c.iter().map(|&x| !x).collect::<Vec<bool>>();
        key(a).cmp(&key(b))
    });
    columns
}

pub fn letters_from_columns(policies: &[String], columns: &[Vec<bool>]) -> Result<CldAssignment, ComparisonError> {
    if columns.len() > ALPHABET.len() {
        return Err(ComparisonError::TooManyLetters(columns.len()));
    }
    let letters = (0..policies.len())
        .map(|i| {
            columns
                .iter()
                .zip(ALPHABET)
                .filter(|(c, _)| c[i])
                .map(|(_, &a)| a as char)
                .collect()
        })
        .collect();
    Ok(CldAssignment {
        policies: policies.to_vec(),
        letters,
    })
}

pub fn cld_letters(matrix: &ComparisonMatrix) -> Result<CldAssignment, ComparisonError> {
    let k = matrix.policies.len();
    if matrix.decisions.len() != k * (k.saturating_sub(1)) / 2 {
        return Err(ComparisonError::IncompleteMatrix);
    }
    let columns = insert_absorb(k, |i, j| matrix.separated(i, j));
    letters_from_columns(&matrix.policies, &columns)
}
