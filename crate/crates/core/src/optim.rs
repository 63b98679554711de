//! AdamW, the warmup-plus-cosine learning-rate schedule, and global
//! gradient-norm clipping.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// Parameter group count or lengths disagree with the optimizer state.
    GroupMismatch {
        expected: usize,
        got: usize,
    },
    NonFiniteGradient {
        group: usize,
        index: usize,
    },
    /// Schedule queried past its configured horizon.
    StepOutOfRange {
        step: u64,
        total: u64,
    },
    BadSchedule {
        reason: &'static str,
    },
    BadClipNorm,
}

impl core::fmt::Display for OptimError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            OptimError::GroupMismatch { expected, got } => {
                write!(f, "parameter group mismatch: state has {expected}, got {got}")
            }
            OptimError::NonFiniteGradient { group, index } => {
                write!(f, "non-finite gradient at group {group}, index {index}")
            }
            OptimError::StepOutOfRange { step, total } => {
                write!(f, "schedule step {step} out of range for {total} total steps")
            }
            OptimError::BadSchedule { reason } => write!(f, "bad schedule: {reason}"),
            OptimError::BadClipNorm => write!(f, "clip max_norm must be positive and finite"),
        }
    }
}

// ─── learning-rate schedule ───

/// Linear warmup to a peak followed by cosine annealing to zero.
///
/// The schedule is a function on `0 ..= total_steps`. It ramps linearly
/// from zero at step 0 to `peak_lr` at the end of warmup
/// (`ceil(warmup_fraction * total_steps)` steps), then follows
/// `peak_lr * (1 + cos(pi * u)) / 2` where `u` is progress through the
/// remaining span, reaching exactly zero at `total_steps`. The two phases
/// agree at the junction.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, total_steps: u64, warmup_fraction: f64) -> Result<Self, OptimError> {
        if total_steps == 0 {
            return Err(OptimError::BadSchedule {
                reason: "total_steps must be positive",
            });
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(OptimError::BadSchedule {
                reason: "warmup_fraction must lie in [0, 1)",
            });
        }
        if !peak_lr.is_finite() || peak_lr <= 0.0 {
            return Err(OptimError::BadSchedule {
                reason: "peak_lr must be positive and finite",
            });
        }
        Ok(LrSchedule {
            peak_lr,
            total_steps,
            warmup_fraction,
        })
    }

    fn warmup_steps(&self) -> u64 {
        // ceil without going through floats for exactness on large counts
        let scaled = self.warmup_fraction * self.total_steps as f64;
        let mut w = fmath::floor(scaled) as u64;
        if (w as f64) < scaled {
            w += 1;
        }
        w
    }

    /// Learning rate at a zero-based step in `0 ..= total_steps`.
    pub fn at(&self, step: u64) -> Result<f64, OptimError> {
        if step > self.total_steps {
            return Err(OptimError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let w = self.warmup_steps();
        if step < w {
            return Ok(self.peak_lr * step as f64 / w as f64);
        }
        let span = self.total_steps - w;
        if span == 0 {
            return Ok(if step == self.total_steps { 0.0 } else { self.peak_lr });
        }
        let progress = (step - w) as f64 / span as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + fmath::cos(core::f64::consts::PI * progress)))
    }
}

// ─── gradient clipping ───

/// Scale all gradient groups so their joint L2 norm is at most
/// `max_norm`. Returns the scale that was applied: `max_norm / norm` when
/// the norm exceeded the bound, `1.0` otherwise. Gradients at or below
/// the bound are left bit-identical.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64, OptimError> {
    if !max_norm.is_finite() || max_norm <= 0.0 {
        return Err(OptimError::BadClipNorm);
    }
    let mut sq = 0.0;
    for (gi, group) in grads.iter().enumerate() {
        for (i, &g) in group.iter().enumerate() {
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient { group: gi, index: i });
            }
            sq += g * g;
        }
    }
    let norm = fmath::sqrt(sq);
    if norm <= max_norm {
        return Ok(1.0);
    }
    let s = max_norm / norm;
    for group in grads.iter_mut() {
        for g in group.iter_mut() {
            *g *= s;
        }
    }
    Ok(s)
}

// ─── AdamW ───

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// One state instance covers a fixed list of parameter groups; group
/// order and lengths are pinned at construction and checked on every
/// step. `step_count` counts completed updates, so the first call uses
/// bias correction for t = 1.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Defaults: betas (0.9, 0.999), eps 1e-8, weight decay 0.01.
    pub fn new(group_sizes: &[usize]) -> Self {
        AdamW::with_hyperparams(group_sizes, 0.9, 0.999, 1e-8, 0.01)
    }

    pub fn with_hyperparams(
        group_sizes: &[usize],
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update in place:
    ///
    /// ```text
    /// m = b1 m + (1 - b1) g        mhat = m / (1 - b1^t)
    /// v = b2 v + (1 - b2) g^2      vhat = v / (1 - b2^t)
    /// p -= lr (mhat / (sqrt(vhat) + eps) + wd p)
    /// ```
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::GroupMismatch {
                expected: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        for (gi, group) in grads.iter().enumerate() {
            if group.len() != self.m[gi].len() || params[gi].len() != self.m[gi].len() {
                return Err(OptimError::GroupMismatch {
                    expected: self.m[gi].len(),
                    got: group.len(),
                });
            }
            for (i, &g) in group.iter().enumerate() {
                if !g.is_finite() {
                    return Err(OptimError::NonFiniteGradient { group: gi, index: i });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - powi(self.beta1, t);
        let bc2 = 1.0 - powi(self.beta2, t);
        for gi in 0..grads.len() {
            let m = &mut self.m[gi];
            let v = &mut self.v[gi];
            let p = &mut *params[gi];
            let g = &grads[gi];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (fmath::sqrt(vhat) + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

fn powi(base: f64, mut exp: i32) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    while exp > 0 {
        if exp & 1 == 1 {
            acc *= b;
        }
        b *= b;
        exp >>= 1;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_ramps_from_zero_peaks_at_warmup_end_and_dies_at_total() {
        // 5% of 1000 steps: warmup spans 50 steps, peak at step 50.
        let s = LrSchedule::new(4e-5, 1000, 0.05).unwrap();
        assert_eq!(s.warmup_steps(), 50);
        assert_eq!(s.at(0).unwrap(), 0.0);
        assert!((s.at(25).unwrap() - 2e-5).abs() < 1e-20);
        assert_eq!(s.at(50).unwrap(), 4e-5);
        assert_eq!(s.at(1000).unwrap(), 0.0);
        // halfway through the cosine phase sits at half the peak
        let at_mid = s.at(525).unwrap();
        assert!(
            (at_mid - 2e-5).abs() < 1e-18,
            "midpoint lr {at_mid} not half the peak"
        );
        assert!(matches!(
            s.at(1001),
            Err(OptimError::StepOutOfRange { step: 1001, total: 1000 })
        ));
    }

    #[test]
    fn schedule_is_continuous_at_the_junction_and_monotone_each_side() {
        let s = LrSchedule::new(1.0, 200, 0.1).unwrap();
        let w = s.warmup_steps();
        // left limit: ramp value one step before the junction approaches
        // peak; right side starts exactly at peak
        assert!((s.at(w - 1).unwrap() - (w - 1) as f64 / w as f64).abs() < 1e-15);
        assert_eq!(s.at(w).unwrap(), 1.0);
        for step in 0..w {
            assert!(s.at(step + 1).unwrap() > s.at(step).unwrap());
        }
        for step in w..200 {
            assert!(s.at(step + 1).unwrap() < s.at(step).unwrap());
        }
    }

    #[test]
    fn clip_leaves_small_gradients_bit_identical() {
        let mut grads = vec![vec![0.3, -0.4], vec![0.0, 0.5]];
        let before = grads.clone();
        let scale = clip_global_norm(&mut grads, 1.0).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(grads, before);
    }

    #[test]
    fn clip_scales_large_gradients_to_the_bound() {
        let mut grads = vec![vec![3.0, 4.0]];
        let scale = clip_global_norm(&mut grads, 1.0).unwrap();
        assert_eq!(scale, 0.2);
        let after = (grads[0][0] * grads[0][0] + grads[0][1] * grads[0][1]).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        assert!((grads[0][0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn clip_rejects_non_finite() {
        let mut grads = vec![vec![1.0, f64::NAN]];
        assert!(matches!(
            clip_global_norm(&mut grads, 1.0),
            Err(OptimError::NonFiniteGradient { group: 0, index: 1 })
        ));
    }

    #[test]
    fn adamw_first_step_moves_param_by_about_lr() {
        // With bias correction, a fresh AdamW step moves each parameter by
        // roughly lr * sign(g) (plus decay), independent of |g|.
        let mut p = vec![1.0, -2.0];
        let grads = vec![vec![0.004, -40.0]];
        let mut opt = AdamW::new(&[2]);
        let lr = 0.1;
        opt.step(&mut [&mut p], &grads, lr).unwrap();
        let expected0 = 1.0 - lr * (1.0 + 0.01 * 1.0);
        let expected1 = -2.0 - lr * (-1.0 + 0.01 * -2.0);
        assert!((p[0] - expected0).abs() < 1e-6, "{p:?}");
        assert!((p[1] - expected1).abs() < 1e-6, "{p:?}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamw_weight_decay_is_decoupled() {
        // Zero gradient must still shrink weights by lr * wd * p exactly.
        let mut p = vec![2.0];
        let grads = vec![vec![0.0]];
        let mut opt = AdamW::new(&[1]);
        opt.step(&mut [&mut p], &grads, 0.5).unwrap();
        assert!((p[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_checks_group_shapes() {
        let mut p = vec![0.0; 3];
        let grads = vec![vec![0.0; 2]];
        let mut opt = AdamW::new(&[3]);
        assert!(matches!(
            opt.step(&mut [&mut p], &grads, 0.1),
            Err(OptimError::GroupMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn adamw_converges_on_a_quadratic() {
        // Minimize (x - 3)^2; gradient 2(x - 3). Weight decay off so the
        // optimum is exact.
        let mut opt = AdamW::with_hyperparams(&[1], 0.9, 0.999, 1e-8, 0.0);
        let mut x = vec![-5.0];
        for _ in 0..2000 {
            let g = vec![vec![2.0 * (x[0] - 3.0)]];
            opt.step(&mut [&mut x], &g, 0.05).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }
}
