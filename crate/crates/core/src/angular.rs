//! Half-integer angular momentum bookkeeping and Clebsch-Gordan coefficients.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A half-integer quantum number stored as twice its value, so that 3/2 is
/// `HalfInt(3)` and −1/2 is `HalfInt(-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HalfInt(pub i32);

impl HalfInt {
    pub const fn from_doubled(twice: i32) -> Self {
        HalfInt(twice)
    }

    pub const fn doubled(self) -> i32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 2.0
    }

    /// Projections −j, −j+1, …, j.
    pub fn projections(self) -> impl Iterator<Item = HalfInt> {
        let j = self.0;
        (0..=j).map(move |k| HalfInt(-j + 2 * k))
    }
}

impl fmt::Display for HalfInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 2 == 0 {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

fn factorial(n: i32) -> f64 {
    debug_assert!(n >= 0);
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// ⟨j1 m1; j2 m2 | j m⟩ in the Condon-Shortley phase convention, with all
/// arguments given as doubled integers.
///
/// Returns zero whenever the coupling is forbidden (triangle rule, projection
/// sum, or |m| > j).
pub fn clebsch_gordan(j1: HalfInt, m1: HalfInt, j2: HalfInt, m2: HalfInt, j: HalfInt, m: HalfInt) -> f64 {
    let (j1, m1, j2, m2, j, m) = (j1.0, m1.0, j2.0, m2.0, j.0, m.0);
    if m1 + m2 != m {
        return 0.0;
    }
    if m1.abs() > j1 || m2.abs() > j2 || m.abs() > j {
        return 0.0;
    }
    if j < (j1 - j2).abs() || j > j1 + j2 {
        return 0.0;
    }
    // parity of j1 ± m1 etc. must be integral
    if (j1 + m1) % 2 != 0 || (j2 + m2) % 2 != 0 || (j + m) % 2 != 0 || (j1 + j2 + j) % 2 != 0 {
        return 0.0;
    }
    // Racah's formula; all half-sums below are integers.
    let h = |x: i32| x / 2;
    let pre = ((j + 1) as f64 * factorial(h(j1 + j2 - j)) * factorial(h(j1 - j2 + j)) * factorial(h(-j1 + j2 + j))
        / factorial(h(j1 + j2 + j) + 1))
        .sqrt();
    let norm = (factorial(h(j1 + m1))
        * factorial(h(j1 - m1))
        * factorial(h(j2 + m2))
        * factorial(h(j2 - m2))
        * factorial(h(j + m))
        * factorial(h(j - m)))
    .sqrt();
    let mut sum = 0.0;
    for k in 0..=h(j1 + j2 - j) {
        let d = [
            k,
            h(j1 + j2 - j) - k,
            h(j1 - m1) - k,
            h(j2 + m2) - k,
            h(j - j2 + m1) + k,
            h(j - j1 - m2) + k,
        ];
        if d.iter().any(|&x| x < 0) {
            continue;
        }
        let denom: f64 = d.iter().map(|&x| factorial(x)).product();
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign / denom;
    }
    pre * norm * sum
}

/// Nonrelativistic Landé factor for a term with orbital L, spin S and total J
/// (all doubled).
pub fn lande_g(l: HalfInt, s: HalfInt, j: HalfInt) -> f64 {
    let (l, s, j) = (l.value(), s.value(), j.value());
    let jj = j * (j + 1.0);
    let gs = crate::constants::ELECTRON_SPIN_G;
    // g_L = 1, g_S = 2
    ((jj + l * (l + 1.0) - s * (s + 1.0)) + gs * (jj - l * (l + 1.0) + s * (s + 1.0))) / (2.0 * jj)
}
