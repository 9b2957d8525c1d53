//! Exact floating-point accumulation.
//!
//! [`ExactSum`] keeps a running sum as a list of non-overlapping partials
//! (Shewchuk's expansion arithmetic, the same scheme behind Python's
//! `math.fsum`). Adding a value or merging two accumulators never rounds, so
//! the correctly rounded [`ExactSum::value`] depends only on the multiset of
//! addends and not on how they were grouped. The E-step statistics are built
//! from these, which makes aggregation over any partition of the data
//! bit-identical to a single pass over the concatenated data.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactSum {
    partials: Vec<f64>,
    /// Sum of non-finite addends; poisons the result when non-zero or NaN.
    special: f64,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_value(x: f64) -> Self {
        let mut s = Self::new();
        s.add(x);
        s
    }

    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            self.special += x;
            return;
        }
        let mut x = x;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
        if other.special != 0.0 || other.special.is_nan() {
            self.special += other.special;
        }
    }

    /// Correctly rounded value of the accumulated sum.
    pub fn value(&self) -> f64 {
        if self.special != 0.0 || self.special.is_nan() {
            return self.special;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round-half-even correction when the remaining partials push the
        // tail past the halfway point.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }

    pub fn partials(&self) -> &[f64] {
        &self.partials
    }

    /// Flattened wire form: `[special, len, partials...]`.
    pub fn encode(&self, out: &mut Vec<f64>) {
        out.push(self.special);
        out.push(self.partials.len() as f64);
        out.extend_from_slice(&self.partials);
    }

    pub fn decode(input: &mut &[f64]) -> Option<Self> {
        if input.len() < 2 {
            return None;
        }
        let special = input[0];
        let len = input[1];
        if !(len >= 0.0 && len.fract() == 0.0) {
            return None;
        }
        let len = len as usize;
        if input.len() < 2 + len {
            return None;
        }
        let partials = input[2..2 + len].to_vec();
        *input = &input[2 + len..];
        Some(ExactSum { partials, special })
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// A fixed-length vector of exact accumulators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactVec(pub Vec<ExactSum>);

impl ExactVec {
    pub fn zeros(len: usize) -> Self {
        ExactVec(vec![ExactSum::new(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_slice(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.0.len());
        for (acc, &v) in self.0.iter_mut().zip(values) {
            acc.add(v);
        }
    }

    pub fn merge(&mut self, other: &ExactVec) {
        debug_assert_eq!(other.0.len(), self.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.merge(b);
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(ExactSum::value).collect()
    }

    pub fn encode(&self, out: &mut Vec<f64>) {
        for s in &self.0 {
            s.encode(out);
        }
    }

    pub fn decode(len: usize, input: &mut &[f64]) -> Option<Self> {
        (0..len)
            .map(|_| ExactSum::decode(input))
            .collect::<Option<Vec<_>>>()
            .map(ExactVec)
    }
}
