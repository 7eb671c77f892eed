//! Channel-width and survival-probability schedules.
//!
//! Depths follow the CIFAR basic-block arithmetic depth = 6n + 2: three
//! stages of n two-conv blocks plus the stem and classifier. The widening
//! total alpha is spread additively over all N = 3n residual blocks, and
//! survival probabilities decay linearly from 1 toward `p_last` at the
//! deepest block.

use crate::error::{Error, Result};

/// Number of residual blocks for a valid depth.
pub fn block_count_for_depth(depth: usize) -> Result<usize> {
    validate_depth(depth)?;
    Ok((depth - 2) / 2)
}

/// Blocks per stage (n in depth = 6n + 2).
pub fn blocks_per_stage(depth: usize) -> Result<usize> {
    validate_depth(depth)?;
    Ok((depth - 2) / 6)
}

pub fn validate_depth(depth: usize) -> Result<()> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        let below = if depth > 7 { depth - (depth - 2) % 6 } else { 8 };
        let above = below + 6;
        return Err(Error::InvalidSpec(format!(
            "depth must satisfy depth = 6n + 2 with n >= 1; {depth} is invalid (try {below} or {above})"
        )));
    }
    Ok(())
}

/// Default widening total for a depth: 5 * (depth - 2) / 6, always an
/// integer for valid depths.
pub fn alpha_for_depth(depth: usize) -> Result<f64> {
    validate_depth(depth)?;
    Ok((5 * (depth - 2) / 6) as f64)
}

/// Output width of every residual block, non-decreasing from the base width
/// up to base + alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSchedule {
    pub base_width: usize,
    pub alpha: f64,
    pub block_widths: Vec<usize>,
}

impl ChannelSchedule {
    pub fn block_count(&self) -> usize {
        self.block_widths.len()
    }

    /// Input width of block `index` (0-based): the previous block's output,
    /// or the base width for the first block.
    pub fn input_width(&self, index: usize) -> usize {
        if index == 0 {
            self.base_width
        } else {
            self.block_widths[index - 1]
        }
    }

    pub fn final_width(&self) -> usize {
        *self.block_widths.last().expect("schedule is never empty")
    }
}

/// Cumulative widths w_k = base + alpha * k / N, floored per block so the
/// increments stay near-uniform and the final width lands exactly on
/// base + alpha for integer alpha.
pub fn build_channel_schedule(depth: usize, alpha: f64, base_width: usize) -> Result<ChannelSchedule> {
    validate_depth(depth)?;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidSpec(format!(
            "alpha must be finite and non-negative, got {alpha}"
        )));
    }
    if base_width == 0 {
        return Err(Error::InvalidSpec("base width must be positive".into()));
    }
    let n = block_count_for_depth(depth)?;
    let block_widths = (1..=n)
        .map(|k| (base_width as f64 + alpha * k as f64 / n as f64).floor() as usize)
        .collect();
    Ok(ChannelSchedule { base_width, alpha, block_widths })
}

/// Per-block survival probabilities p_l = 1 - (l / N) * (1 - p_last).
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalSchedule {
    pub p_last: f64,
    pub probs: Vec<f64>,
}

impl SurvivalSchedule {
    pub fn block_count(&self) -> usize {
        self.probs.len()
    }
}

pub fn build_survival_schedule(block_count: usize, p_last: f64) -> Result<SurvivalSchedule> {
    if block_count == 0 {
        return Err(Error::InvalidSpec("survival schedule needs at least one block".into()));
    }
    if !(p_last > 0.0 && p_last <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "terminal survival probability must lie in (0, 1], got {p_last}"
        )));
    }
    let n = block_count as f64;
    let probs = (1..=block_count)
        .map(|l| 1.0 - (l as f64 / n) * (1.0 - p_last))
        .collect();
    Ok(SurvivalSchedule { p_last, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alpha_matches_published_configurations() {
        assert_eq!(alpha_for_depth(110).unwrap(), 90.0);
        assert_eq!(alpha_for_depth(146).unwrap(), 120.0);
        assert_eq!(alpha_for_depth(182).unwrap(), 150.0);
        assert_eq!(alpha_for_depth(8).unwrap(), 5.0);
    }

    #[test]
    fn invalid_depth_suggests_neighbors() {
        let err = alpha_for_depth(100).unwrap_err().to_string();
        assert!(err.contains("98") && err.contains("104"), "{err}");
        assert!(alpha_for_depth(7).is_err());
        assert!(alpha_for_depth(0).is_err());
    }

    #[test]
    fn depth_8_alpha_5_schedule() {
        // floor(16 + 5k/3) for k = 1..3.
        let s = build_channel_schedule(8, 5.0, 16).unwrap();
        assert_eq!(s.block_widths, vec![17, 19, 21]);
        assert_eq!(s.input_width(0), 16);
        assert_eq!(s.input_width(1), 17);
        assert_eq!(s.input_width(2), 19);
    }

    #[test]
    fn depth_110_ends_at_106() {
        let s = build_channel_schedule(110, 90.0, 16).unwrap();
        assert_eq!(s.block_count(), 54);
        assert_eq!(s.final_width(), 106);
    }

    #[test]
    fn zero_alpha_keeps_base_width() {
        let s = build_channel_schedule(8, 0.0, 16).unwrap();
        assert_eq!(s.block_widths, vec![16, 16, 16]);
    }

    #[test]
    fn survival_schedule_linear_decay() {
        let s = build_survival_schedule(54, 0.5).unwrap();
        assert!((s.probs[0] - (1.0 - 0.5 / 54.0)).abs() < 1e-12);
        assert!((s.probs[0] - 0.99074).abs() < 1e-5);
        assert_eq!(s.probs[53], 0.5);
    }

    #[test]
    fn survival_degenerate_cases() {
        let s = build_survival_schedule(5, 1.0).unwrap();
        assert!(s.probs.iter().all(|&p| p == 1.0));
        let s = build_survival_schedule(1, 0.7).unwrap();
        assert_eq!(s.probs, vec![0.7]);
        assert!(build_survival_schedule(0, 0.5).is_err());
        assert!(build_survival_schedule(3, 0.0).is_err());
        assert!(build_survival_schedule(3, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn widths_non_decreasing_and_terminal(nth in 1usize..20, alpha_i in 0usize..200) {
            let depth = 6 * nth + 2;
            let alpha = alpha_i as f64;
            let s = build_channel_schedule(depth, alpha, 16).unwrap();
            prop_assert!(s.block_widths.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(s.final_width(), 16 + alpha_i);
            prop_assert!(s.block_widths[0] >= 16);
        }

        #[test]
        fn survival_strictly_decreasing_below_one(n in 1usize..60, p in 0.05f64..0.95) {
            let s = build_survival_schedule(n, p).unwrap();
            prop_assert!((s.probs[n - 1] - p).abs() < 1e-12);
            prop_assert!(s.probs.windows(2).all(|w| w[0] > w[1]));
        }
    }
}
