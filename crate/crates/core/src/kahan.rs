//! Compensated (Neumaier) summation for simulation clocks.
//!
//! Engine clocks accumulate hundreds of thousands of small iteration times;
//! plain `+=` drifts by more than the 1e-12 s the oracle-equivalence tests
//! allow, compensation keeps the error at a few ulps of the total.

#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new(initial: f64) -> Self {
        KahanSum {
            sum: initial,
            compensation: 0.0,
        }
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Reset to an exact value, dropping any accumulated compensation.
    pub fn set(&mut self, value: f64) {
        self.sum = value;
        self.compensation = 0.0;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}
