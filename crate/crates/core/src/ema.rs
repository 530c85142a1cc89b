//! Exponential-moving-average teacher with an optional stop epoch.

use crate::error::{Error, Result};
use crate::network::ModelParams;

#[derive(Clone, Debug)]
pub struct EmaState {
    pub teacher: ModelParams,
    pub decay: f64,
    /// First epoch at which the teacher stops following the student.
    pub stop_after_epoch: Option<usize>,
    pub frozen: bool,
    /// Epoch of the most recent update that moved the teacher.
    pub last_update_epoch: Option<usize>,
}

impl EmaState {
    /// Teacher starts as an exact copy of the student.
    pub fn init(student: &ModelParams, decay: f64, stop_after_epoch: Option<usize>) -> Self {
        assert!((0.0..1.0).contains(&decay), "EMA decay must lie in [0, 1)");
        Self {
            teacher: student.clone(),
            decay,
            stop_after_epoch,
            frozen: false,
            last_update_epoch: None,
        }
    }

    /// `teacher <- d * teacher + (1 - d) * student`, unless frozen. Reaching
    /// the stop epoch freezes the teacher permanently.
    pub fn update(&mut self, student: &ModelParams, epoch: usize) -> Result<()> {
        if !self.teacher.same_layout(student) {
            return Err(Error::LayoutMismatch("EMA teacher and student layouts differ".into()));
        }
        if self.stop_after_epoch.is_some_and(|stop| epoch >= stop) {
            self.frozen = true;
        }
        if self.frozen {
            return Ok(());
        }
        let d = self.decay;
        for (t, &s) in self.teacher.values_mut().iter_mut().zip(student.values()) {
            *t = d * *t + (1.0 - d) * s;
        }
        self.last_update_epoch = Some(epoch);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use proptest::prelude::*;

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 4, ffn_dim: 4, num_queries: 2, num_stages: 1, num_classes: 2, grid_size: 2, ..Default::default() }
    }

    fn filled(v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(&tiny());
        p.values_mut().iter_mut().for_each(|x| *x = v);
        p
    }

    #[test]
    fn init_copies_student() {
        let s = ModelParams::init(&tiny(), 4);
        let e = EmaState::init(&s, 0.99, None);
        assert_eq!(e.teacher.values(), s.values());
        assert!(!e.frozen);
        let e2 = EmaState::init(&s, 0.99, None);
        assert_eq!(e2.teacher.values(), e.teacher.values());
    }

    #[test]
    fn fixed_point_when_equal() {
        let s = ModelParams::init(&tiny(), 4);
        for d in [0.0, 0.5, 0.99] {
            let mut e = EmaState::init(&s, d, None);
            e.update(&s, 0).unwrap();
            assert_eq!(e.teacher.values(), s.values());
        }
    }

    #[test]
    fn closed_form_trajectory() {
        let mut e = EmaState::init(&filled(0.0), 0.9, None);
        let s = filled(1.0);
        for k in 1..=50 {
            e.update(&s, 0).unwrap();
            let want = 1.0 - 0.9f64.powi(k);
            for &t in e.teacher.values() {
                assert!((t - want).abs() < 1e-12);
            }
            if k == 2 {
                assert!((e.teacher.values()[0] - 0.19).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stop_epoch_freezes_bytes() {
        let mut e = EmaState::init(&filled(0.0), 0.9, Some(3));
        e.update(&filled(1.0), 2).unwrap();
        let before: Vec<u64> = e.teacher.values().iter().map(|x| x.to_bits()).collect();
        for epoch in 3..10 {
            e.update(&filled(epoch as f64), epoch).unwrap();
            assert!(e.frozen);
            let now: Vec<u64> = e.teacher.values().iter().map(|x| x.to_bits()).collect();
            assert_eq!(now, before);
        }
    }

    #[test]
    fn decay_limits() {
        let mut e = EmaState::init(&filled(0.0), 0.0, None);
        e.update(&filled(2.5), 0).unwrap();
        assert!(e.teacher.values().iter().all(|&x| x == 2.5));
        let mut e = EmaState::init(&filled(0.0), 0.999999, None);
        e.update(&filled(1.0), 0).unwrap();
        assert!(e.teacher.values().iter().all(|&x| (x - 1e-6).abs() < 1e-12));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut e = EmaState::init(&filled(0.0), 0.9, None);
        let other = ModelParams::zeros(&ModelConfig::default());
        assert!(matches!(e.update(&other, 0), Err(Error::LayoutMismatch(_))));
    }

    proptest! {
        #[test]
        fn teacher_stays_in_convex_hull(steps in proptest::collection::vec(-5.0..5.0f64, 1..30), d in 0.0..0.999f64) {
            let mut e = EmaState::init(&filled(0.0), d, None);
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for s in steps {
                lo = lo.min(s);
                hi = hi.max(s);
                e.update(&filled(s), 0).unwrap();
                let t = e.teacher.values()[0];
                prop_assert!(t >= lo - 1e-12 && t <= hi + 1e-12);
            }
        }

        #[test]
        fn update_commutes_with_permutation(seed in 0u64..1000, d in 0.0..0.999f64) {
            let cfg = tiny();
            let s = ModelParams::init(&cfg, seed);
            let t0 = ModelParams::init(&cfg, seed + 1);
            let n = s.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let permute = |p: &ModelParams| {
                let mut q = p.clone();
                for (i, &j) in perm.iter().enumerate() {
                    q.values_mut()[i] = p.values()[j];
                }
                q
            };
            let mut a = EmaState::init(&t0, d, None);
            a.update(&s, 0).unwrap();
            let mut b = EmaState::init(&permute(&t0), d, None);
            b.update(&permute(&s), 0).unwrap();
            let pa = permute(&a.teacher);
            prop_assert_eq!(pa.values(), b.teacher.values());
        }
    }
}
