//! Adaptive triplet margins.
//!
//! Violation counts are accumulated over a window of `q` batches. At the end
//! of the window each direction's ratio of active hinge terms is compared with
//! `r`; a ratio strictly above `r` multiplies that direction's margin by
//! `c_mult`. The two directions are independent.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MarginState {
    pub m_x: f64,
    pub m_y: f64,
    pub acc_violations_x: u64,
    pub acc_violations_y: u64,
    /// Triplets seen in the window, per direction.
    pub acc_triplets: u64,
    /// Batches seen in the window.
    pub acc_count: u32,
    pub q: u32,
    pub c_mult: f64,
    pub r: f64,
    /// Use the fraction of *inactive* hinge terms as the ratio instead.
    pub invert_ratio: bool,
}

impl Default for MarginState {
    fn default() -> Self {
        Self::new(0.2, 500, 1.03, 0.8)
    }
}

impl MarginState {
    pub fn new(margin: f64, q: u32, c_mult: f64, r: f64) -> Self {
        Self {
            m_x: margin,
            m_y: margin,
            acc_violations_x: 0,
            acc_violations_y: 0,
            acc_triplets: 0,
            acc_count: 0,
            q,
            c_mult,
            r,
            invert_ratio: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_x > 0.0 && self.m_y > 0.0) {
            return Err(Error::Config(format!(
                "margins must be positive, got {} / {}",
                self.m_x, self.m_y
            )));
        }
        if !(self.c_mult > 1.0) {
            return Err(Error::Config(format!("c_mult must exceed 1, got {}", self.c_mult)));
        }
        if self.q == 0 {
            return Err(Error::Config("q must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.r) {
            return Err(Error::Config(format!("r must lie in [0, 1), got {}", self.r)));
        }
        Ok(())
    }

    /// Adds one batch's hinge arguments to the window.
    pub fn accumulate(&mut self, img_terms: &[f64], txt_terms: &[f64]) {
        self.acc_violations_x += img_terms.iter().filter(|&&a| a > 0.0).count() as u64;
        self.acc_violations_y += txt_terms.iter().filter(|&&a| a > 0.0).count() as u64;
        self.acc_triplets += img_terms.len().max(txt_terms.len()) as u64;
        self.acc_count += 1;
    }

    pub fn window_full(&self) -> bool {
        self.acc_count >= self.q
    }

    /// Window ratios `(M_x, M_y)`.
    pub fn ratios(&self) -> (f64, f64) {
        if self.acc_triplets == 0 {
            return (0.0, 0.0);
        }
        let n = self.acc_triplets as f64;
        let (mx, my) = (
            self.acc_violations_x as f64 / n,
            self.acc_violations_y as f64 / n,
        );
        if self.invert_ratio {
            (1.0 - mx, 1.0 - my)
        } else {
            (mx, my)
        }
    }

    /// Applies the window-boundary update and clears the accumulators.
    pub fn update_margins(&self) -> Result<MarginState> {
        if self.acc_count != self.q {
            return Err(Error::WindowIncomplete {
                count: self.acc_count,
                q: self.q,
            });
        }
        let (mx, my) = self.ratios();
        let mut next = self.clone();
        if mx > self.r {
            next.m_x = self.c_mult * self.m_x;
        }
        if my > self.r {
            next.m_y = self.c_mult * self.m_y;
        }
        next.acc_violations_x = 0;
        next.acc_violations_y = 0;
        next.acc_triplets = 0;
        next.acc_count = 0;
        Ok(next)
    }

    /// Accumulates a batch and updates the margins when the window closes.
    /// Returns true if a window boundary was crossed.
    pub fn record_batch(&mut self, img_terms: &[f64], txt_terms: &[f64]) -> Result<bool> {
        self.accumulate(img_terms, txt_terms);
        if self.window_full() {
            *self = self.update_margins()?;
            return Ok(true);
        }
        Ok(false)
    }
}
