//! Discrete-time rational filters in Direct Form II transposed.

use crate::error::{Error, Result};
use crate::signals::Signal;

/// Single-input single-output rational filter
/// `H(z) = (b0 z^m + ... + bm) / (a0 z^n + ... + an)` with `m <= n`,
/// coefficients given in descending powers of `z`.
///
/// On construction the denominator is normalized to be monic and the
/// numerator is left-padded with zeros to the denominator length, so the
/// realization always carries `deg(den)` state variables.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalFilter {
    b: Vec<f64>,
    a: Vec<f64>,
    state: Vec<f64>,
}

impl RationalFilter {
    pub fn new(num: &[f64], den: &[f64]) -> Result<Self> {
        if num.is_empty() || den.is_empty() {
            return Err(Error::InvalidFilter("empty coefficient array".into()));
        }
        if num.iter().chain(den).any(|c| !c.is_finite()) {
            return Err(Error::InvalidFilter("non-finite coefficient".into()));
        }
        if den[0] == 0.0 {
            return Err(Error::InvalidFilter("leading denominator coefficient is zero".into()));
        }
        if num.len() > den.len() {
            return Err(Error::InvalidFilter(format!(
                "improper filter: numerator degree {} exceeds denominator degree {}",
                num.len() - 1,
                den.len() - 1
            )));
        }
        let a: Vec<f64> = den.iter().map(|c| c / den[0]).collect();
        let mut b = vec![0.0; den.len() - num.len()];
        b.extend(num.iter().map(|c| c / den[0]));
        let state = vec![0.0; a.len() - 1];
        Ok(RationalFilter { b, a, state })
    }

    /// Numerator padded to denominator length, monic-normalized.
    pub fn num(&self) -> &[f64] {
        &self.b
    }

    /// Monic denominator.
    pub fn den(&self) -> &[f64] {
        &self.a
    }

    pub fn order(&self) -> usize {
        self.a.len() - 1
    }

    /// True when the next output cannot depend on the next input.
    pub fn is_strictly_proper(&self) -> bool {
        self.b[0] == 0.0
    }

    /// Steady-state gain `num(1) / den(1)`.
    pub fn dc_gain(&self) -> Result<f64> {
        let den1: f64 = self.a.iter().sum();
        if den1 == 0.0 {
            return Err(Error::PoleAtDc);
        }
        Ok(self.b.iter().sum::<f64>() / den1)
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = 0.0);
    }

    /// Output of the upcoming step before its input is known. Only
    /// meaningful for strictly proper filters, where that output is fully
    /// determined by the state.
    pub fn next_output(&self) -> f64 {
        debug_assert!(self.is_strictly_proper());
        self.state.first().copied().unwrap_or(0.0)
    }

    /// Advance one sample.
    pub fn step(&mut self, x: f64) -> f64 {
        let n = self.state.len();
        let y = self.b[0] * x + if n > 0 { self.state[0] } else { 0.0 };
        for i in 0..n {
            let carry = if i + 1 < n { self.state[i + 1] } else { 0.0 };
            self.state[i] = self.b[i + 1] * x - self.a[i + 1] * y + carry;
        }
        y
    }

    /// Filter a whole signal starting from zero state. The receiver's own
    /// state is untouched.
    pub fn filter_signal(&self, x: &Signal) -> Signal {
        let mut f = self.clone();
        f.reset();
        let values = x.values().iter().map(|&v| f.step(v)).collect();
        Signal::new(values, x.ts()).expect("filtering a valid signal yields a valid signal")
    }

    /// First `n` samples of the impulse response.
    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let mut f = self.clone();
        f.reset();
        (0..n).map(|k| f.step(if k == 0 { 1.0 } else { 0.0 })).collect()
    }
}
