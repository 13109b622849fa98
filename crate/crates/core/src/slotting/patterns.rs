//! How many distinct visible-context configurations a model must handle under
//! token-level masking, block-wise masking and slot-level masking.

use std::collections::HashSet;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Any nonempty subset of the L tokens masked.
    FullMdm,
    /// Left-to-right blocks of k, any subset masked inside the current block.
    Block,
    /// Any nonempty set of clean slots, in any generation order.
    Slot,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::FullMdm, Scheme::Block, Scheme::Slot];
}

fn binomial(n: usize, r: usize) -> BigUint {
    let mut acc = BigUint::one();
    for i in 0..r {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

fn factorial(n: usize) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, i| acc * i)
}

fn slots_of(len: usize, k: usize) -> Result<usize> {
    if k == 0 || len == 0 {
        return Err(Error::Argument("sequence length and slot size must be positive".into()));
    }
    if len % k != 0 {
        return Err(Error::Argument(format!("slot size {k} does not divide length {len}")));
    }
    Ok(len / k)
}

/// Closed-form pattern counts.
///
/// * full-MDM: `Σ_{l=1..L} C(L, l)`
/// * block: `2^k · L/k`
/// * slot: `Σ_{i=1..L/k} C(L/k, i) · i!`
pub fn count_masking_patterns(len: usize, k: usize, scheme: Scheme) -> Result<BigUint> {
    match scheme {
        Scheme::FullMdm => {
            if len == 0 {
                return Err(Error::Argument("sequence length must be positive".into()));
            }
            Ok((1..=len).map(|l| binomial(len, l)).sum())
        }
        Scheme::Block => {
            let n = slots_of(len, k)?;
            Ok((BigUint::one() << k) * n)
        }
        Scheme::Slot => {
            let n = slots_of(len, k)?;
            Ok((1..=n).map(|i| binomial(n, i) * factorial(i)).sum())
        }
    }
}

/// `⌊n! · e⌋` in exact integer arithmetic, from the series for e truncated
/// far enough that the floor is pinned by upper and lower bounds.
pub fn factorial_e_floor(n: usize) -> BigUint {
    let mut terms = n + 8;
    loop {
        // A = Σ_{i=0..N} N!/i!, so Σ_{i=0..N} 1/i! = A / N! and the tail is < 1/N!.
        let mut a = BigUint::zero();
        let mut ratio = BigUint::one();
        for i in (0..=terms).rev() {
            a += &ratio;
            ratio *= i.max(1);
        }
        let n_fact = factorial(n);
        let big_n_fact = factorial(terms);
        let lower = &n_fact * &a / &big_n_fact;
        let upper = &n_fact * (a + 1u32) / &big_n_fact;
        if lower == upper {
            return lower;
        }
        terms += 8;
    }
}

const MAX_ENUM_LEN: usize = 14;
const MAX_ENUM_SLOTS: usize = 7;

/// Brute-force count of distinct masking states, for checking the closed
/// forms. Requires `L ≤ 14`, and `L/k ≤ 7` for the slot scheme.
pub fn enumerate_patterns(len: usize, k: usize, scheme: Scheme) -> Result<u64> {
    if len > MAX_ENUM_LEN {
        return Err(Error::Size(format!("length {len} > {MAX_ENUM_LEN}")));
    }
    match scheme {
        Scheme::FullMdm => {
            if len == 0 {
                return Err(Error::Argument("sequence length must be positive".into()));
            }
            let mut seen = HashSet::new();
            for mask in 0u32..(1 << len) {
                let pattern: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
                if pattern.iter().any(|&m| m) {
                    seen.insert(pattern);
                }
            }
            Ok(seen.len() as u64)
        }
        Scheme::Block => {
            let n = slots_of(len, k)?;
            let mut seen = HashSet::new();
            for current in 0..n {
                for sub in 0u32..(1 << k) {
                    // Earlier blocks visible, later blocks hidden, any mix inside.
                    let pattern: Vec<bool> = (0..len)
                        .map(|pos| match (pos / k).cmp(&current) {
                            std::cmp::Ordering::Less => false,
                            std::cmp::Ordering::Greater => true,
                            std::cmp::Ordering::Equal => sub >> (pos % k) & 1 == 1,
                        })
                        .collect();
                    seen.insert((current, pattern));
                }
            }
            Ok(seen.len() as u64)
        }
        Scheme::Slot => {
            let n = slots_of(len, k)?;
            if n > MAX_ENUM_SLOTS {
                return Err(Error::Size(format!("{n} slots > {MAX_ENUM_SLOTS}")));
            }
            let mut seen = HashSet::new();
            for clean in 1u32..(1 << n) {
                let members: Vec<usize> = (0..n).filter(|i| clean >> i & 1 == 1).collect();
                for_each_permutation(&members, &mut |order| {
                    seen.insert(order.to_vec());
                });
            }
            Ok(seen.len() as u64)
        }
    }
}

fn for_each_permutation(items: &[usize], f: &mut impl FnMut(&[usize])) {
    fn go(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if rest.is_empty() {
            f(prefix);
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            prefix.push(x);
            go(prefix, rest, f);
            prefix.pop();
            rest.insert(i, x);
        }
    }
    go(&mut Vec::new(), &mut items.to_vec(), f);
}
