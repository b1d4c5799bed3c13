//! PI controllers for the loss weights, weight projection and the
//! convergence-based stopping rule.

use serde::{Deserialize, Serialize};

/// Gains and target for one controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub min_value: f64,
    pub set_point: f64,
    /// Optional bound on |integral|; `None` keeps the exact running sum.
    #[serde(default)]
    pub integral_cap: Option<f64>,
}

impl PidConfig {
    pub fn new(set_point: f64) -> Self {
        PidConfig { kp: 0.01, ki: 1e-4, min_value: 0.0, set_point, integral_cap: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub config: PidConfig,
    /// Σ e_j over all steps so far.
    pub integral: f64,
    pub last_output: f64,
    pub steps: usize,
}

/// One controller update, as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PidTrace {
    pub actual: f64,
    pub error: f64,
    pub integral: f64,
    pub weight: f64,
}

const EXP_CLAMP: f64 = 50.0;

impl ControllerState {
    pub fn new(config: PidConfig) -> Self {
        ControllerState { config, integral: 0.0, last_output: config.min_value, steps: 0 }
    }

    /// e = set_point − actual;
    /// w = kp / (1 + exp(e)) − ki (Σ e_j + e) + min_value, kept in [min_value, 1].
    pub fn step(&mut self, actual: f64) -> PidTrace {
        let c = &self.config;
        let error = c.set_point - actual;
        let logistic = c.kp / (1.0 + error.clamp(-EXP_CLAMP, EXP_CLAMP).exp());
        let mut integral = self.integral + error;
        if let Some(cap) = c.integral_cap {
            integral = integral.clamp(-cap, cap);
        }
        let raw = logistic - c.ki * integral + c.min_value;
        let weight = raw.max(c.min_value).min(1.0);
        self.integral = integral;
        self.last_output = weight;
        self.steps += 1;
        PidTrace { actual, error, integral, weight }
    }
}

/// Pure form of [`ControllerState::step`].
pub fn pid_step(state: &ControllerState, actual: f64) -> (ControllerState, f64) {
    let mut next = *state;
    let trace = next.step(actual);
    (next, trace.weight)
}

/// The three loss weights: α (reconstruction discount), β (KL), γ (aggregate divergence).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTriple {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl WeightTriple {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        WeightTriple { alpha, beta, gamma }
    }

    pub fn is_feasible(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.alpha) && unit(self.beta) && unit(self.gamma) && self.alpha + self.beta <= 1.0
    }
}

/// Clips each weight to [0, 1], then rescales α and β proportionally when
/// α + β > 1.
pub fn clamp_weights(raw: WeightTriple) -> WeightTriple {
    let mut alpha = raw.alpha.clamp(0.0, 1.0);
    let mut beta = raw.beta.clamp(0.0, 1.0);
    let total = alpha + beta;
    if total > 1.0 {
        alpha /= total;
        beta /= total;
        if alpha + beta > 1.0 {
            beta = 1.0 - alpha;
        }
    }
    WeightTriple { alpha, beta, gamma: raw.gamma.clamp(0.0, 1.0) }
}

/// True when both α and β moved less than their thresholds since the last step.
pub fn stopping_check(alpha_t: f64, alpha_prev: f64, beta_t: f64, beta_prev: f64, eps_a: f64, eps_b: f64) -> bool {
    (alpha_t - alpha_prev).abs() < eps_a && (beta_t - beta_prev).abs() < eps_b
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub eps_a: f64,
    pub eps_b: f64,
    /// Steps that must complete before the rule may fire.
    pub warmup: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule { eps_a: 1e-4, eps_b: 1e-3, warmup: 50 }
    }
}

impl StoppingRule {
    /// `steps_done` counts completed optimizer steps including the current one.
    pub fn should_stop(&self, steps_done: usize, prev: &WeightTriple, cur: &WeightTriple) -> bool {
        steps_done > self.warmup && stopping_check(cur.alpha, prev.alpha, cur.beta, prev.beta, self.eps_a, self.eps_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_error_gives_half_gain() {
        let cfg = PidConfig { kp: 0.37, ki: 0.2, min_value: 0.05, set_point: 4.0, integral_cap: None };
        let mut s = ControllerState::new(cfg);
        for _ in 0..10 {
            assert_eq!(s.step(4.0).weight, 0.37 / 2.0 + 0.05);
        }
    }

    #[test]
    fn large_overshoot_saturates_to_kp() {
        let cfg = PidConfig { kp: 0.4, ki: 0.0, min_value: 0.1, set_point: 1.0, integral_cap: None };
        let (_, w) = pid_step(&ControllerState::new(cfg), 1e6);
        assert!((w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scripted_recurrence() {
        let cfg = PidConfig { kp: 0.01, ki: 1e-4, min_value: 0.0, set_point: 2.0, integral_cap: None };
        let mut state = ControllerState::new(cfg);
        let mut sum = 0.0;
        for _ in 0..100 {
            let e: f64 = 2.0 - 3.0;
            sum += e;
            let want = (0.01 / (1.0 + e.exp()) - 1e-4 * sum + 0.0).max(0.0).min(1.0);
            let (next, w) = pid_step(&state, 3.0);
            assert_eq!(w.to_bits(), want.to_bits());
            state = next;
        }
        assert_eq!(state.integral, -100.0);
    }

    #[test]
    fn undershoot_floors_at_min() {
        let cfg = PidConfig { kp: 0.01, ki: 1e-2, min_value: 0.02, set_point: 10.0, integral_cap: None };
        let mut s = ControllerState::new(cfg);
        for _ in 0..50 {
            assert_eq!(s.step(0.0).weight, 0.02);
        }
    }

    #[test]
    fn integral_cap_bounds_windup() {
        let cfg = PidConfig { integral_cap: Some(5.0), ..PidConfig::new(0.0) };
        let mut s = ControllerState::new(cfg);
        for _ in 0..20 {
            s.step(1.0);
        }
        assert_eq!(s.integral, -5.0);
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_weights(WeightTriple::new(0.3, 0.4, 0.5)), WeightTriple::new(0.3, 0.4, 0.5));
        assert_eq!(clamp_weights(WeightTriple::new(0.9, 0.9, 2.0)), WeightTriple::new(0.5, 0.5, 1.0));
        assert_eq!(clamp_weights(WeightTriple::new(1.2, 0.0, -0.1)), WeightTriple::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn stopping_examples() {
        assert!(stopping_check(0.2, 0.2, 0.4, 0.4, 1e-4, 1e-3));
        assert!(!stopping_check(0.2, 0.2, 1.4, 0.4, 1e-4, 1e-4));
        // A large decrease is not convergence.
        assert!(!stopping_check(0.1, 0.9, 0.4, 0.4, 1e-4, 1e-3));
    }

    #[test]
    fn stopping_rule_respects_warmup() {
        let rule = StoppingRule::default();
        let w = WeightTriple::new(0.0, 0.0, 0.1);
        assert!(!rule.should_stop(50, &w, &w));
        assert!(rule.should_stop(51, &w, &w));
    }

    proptest! {
        #[test]
        fn clamp_is_feasible_and_idempotent(a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64) {
            let once = clamp_weights(WeightTriple::new(a, b, c));
            prop_assert!(once.is_feasible());
            prop_assert_eq!(clamp_weights(once), once);
        }

        #[test]
        fn weight_stays_in_range(
            kp in 0.0..2.0f64, ki in 0.0..0.1f64, min in 0.0..0.5f64,
            set in -10.0..10.0f64,
            actuals in proptest::collection::vec(-1e3..1e3f64, 1..60),
        ) {
            let mut s = ControllerState::new(PidConfig { kp, ki, min_value: min, set_point: set, integral_cap: None });
            for a in actuals {
                let w = s.step(a).weight;
                prop_assert!(w >= min && w <= 1.0);
            }
        }

        #[test]
        fn larger_actual_pushes_harder(
            kp in 0.01..2.0f64, set in -5.0..5.0f64, a in -5.0..5.0f64, bump in 0.01..5.0f64,
        ) {
            // Proportional term only: ki = 0 and integral fixed at zero.
            let cfg = PidConfig { kp, ki: 0.0, min_value: 0.0, set_point: set, integral_cap: None };
            let s = ControllerState::new(cfg);
            let p = |actual: f64| kp / (1.0 + (set - actual).exp());
            prop_assert!(p(a + bump) > p(a));
            let (_, lo) = pid_step(&s, a);
            let (_, hi) = pid_step(&s, a + bump);
            prop_assert!(hi >= lo);
        }

        #[test]
        fn trace_is_pure(actuals in proptest::collection::vec(-50.0..50.0f64, 1..30)) {
            let run = || {
                let mut s = ControllerState::new(PidConfig::new(1.0));
                actuals.iter().map(|&a| s.step(a).weight.to_bits()).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
