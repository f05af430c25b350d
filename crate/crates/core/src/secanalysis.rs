//! Brute-force arithmetic for a chained MAC, with Monte Carlo checks at
//! widths small enough to enumerate.
//!
//! An attacker who wants to redirect N returns must either recover the key
//! (half of `2^Ns` guesses on average) or, for each redirected return, hit a
//! MAC value that happens to chain correctly (half of `2^Nm`). Often no such
//! value exists at all: for one gadget a fixed target has a preimage among
//! the `2^Nm` candidate fields with probability `1 - (1 - 2^-Nm)^(2^Nm)`,
//! which tends to `1 - 1/e`.

use std::fmt::Write;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_indexed, Execution};
use crate::mac::{mac, MacError, MacKey, MacRequest, MacValue, MacWidths};

/// Widest MAC the Monte Carlo estimators will enumerate.
pub const MAX_ENUM_BITS: u32 = 16;
/// Fewest trials accepted by the collision-existence estimator.
pub const MIN_TRIALS: u64 = 1000;
/// Address width used by the guess-cost estimator.
pub const GUESS_ADDR_BITS: u32 = 40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("Nm = {0} is too wide to enumerate (limit {MAX_ENUM_BITS})")]
    WidthTooLarge(u32),
    #[error("{0} trials requested, need at least {MIN_TRIALS}")]
    TooFewTrials(u64),
    #[error("parameter {0} must be positive")]
    NonPositive(&'static str),
    #[error(transparent)]
    Width(#[from] MacError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityParams {
    /// Key bits.
    pub ns: u32,
    /// MAC bits.
    pub nm: u32,
    /// Address bits.
    pub na: u32,
    /// Gadgets in the attack.
    pub n: u64,
}

impl Default for SecurityParams {
    fn default() -> Self {
        Self { ns: 64, nm: 24, na: 40, n: 1 }
    }
}

impl SecurityParams {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        for (v, name) in [(self.ns, "Ns"), (self.nm, "Nm"), (self.na, "Na")] {
            if v == 0 {
                return Err(AnalysisError::NonPositive(name));
            }
        }
        Ok(())
    }
}

/// `2^(Ns-1) + N * 2^(Nm-1)`, exactly.
pub fn expected_guesses(p: &SecurityParams) -> BigUint {
    let one = BigUint::from(1u8);
    (&one << (p.ns.saturating_sub(1) as usize)) + BigUint::from(p.n) * (&one << (p.nm.saturating_sub(1) as usize))
}

/// Probability that at least one of N redirected returns has no valid
/// collision at all: `1 - (1 - 1/e)^N`.
pub fn prob_no_valid_collision(n: u64) -> f64 {
    1.0 - prob_all_collisions_exist(n)
}

/// `(1 - 1/e)^N`, the complement of [`prob_no_valid_collision`]. Keeps full
/// relative precision where the complement rounds to 1.
pub fn prob_all_collisions_exist(n: u64) -> f64 {
    (1.0 - (-1.0f64).exp()).powf(n as f64)
}

/// `1 - 1/e`, the large-width limit of [`collision_existence_exact`].
pub fn collision_existence_limit() -> f64 {
    1.0 - (-1.0f64).exp()
}

/// `1 - (1 - 2^-Nm)^(2^Nm)`: a fixed target has a preimage among `2^Nm`
/// uniformly distributed MAC outputs.
pub fn collision_existence_exact(nm: u32) -> f64 {
    let q = 2f64.powi(-(nm as i32));
    1.0 - ((-q).ln_1p() * 2f64.powi(nm as i32)).exp()
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn check_nm(nm: u32) -> Result<(), AnalysisError> {
    if nm > MAX_ENUM_BITS {
        return Err(AnalysisError::WidthTooLarge(nm));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionEstimate {
    pub nm: u32,
    pub na: u32,
    pub trials: u64,
    pub seed: u64,
    /// Trials in which some prev-MAC field reached the target.
    pub hits: u64,
    pub empirical: f64,
    pub analytic: f64,
    pub limit: f64,
}

/// Per trial: random key, target MAC and address; enumerate every prev-MAC
/// field and record whether any of them MACs to the target.
pub fn montecarlo_collision_existence(
    nm: u32,
    na: u32,
    trials: u64,
    seed: u64,
    exec: Execution,
) -> Result<CollisionEstimate, AnalysisError> {
    check_nm(nm)?;
    if trials < MIN_TRIALS {
        return Err(AnalysisError::TooFewTrials(trials));
    }
    let widths = MacWidths::new(na, nm)?;
    let found = map_indexed(exec, trials as usize, |i| {
        let mut rng = trial_rng(seed, i as u64);
        let key = MacKey(rng.random());
        let target = rng.random::<u64>() & widths.mac_mask();
        let addr = rng.random::<u64>() & widths.addr_mask();
        (0..=widths.mac_mask()).any(|m| mac(key, widths, MacRequest::new(addr, MacValue(m))).0 == target)
    });
    let hits = found.iter().filter(|f| **f).count() as u64;
    Ok(CollisionEstimate {
        nm,
        na,
        trials,
        seed,
        hits,
        empirical: hits as f64 / trials as f64,
        analytic: collision_existence_exact(nm),
        limit: collision_existence_limit(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuessCostEstimate {
    pub nm: u32,
    pub trials: u64,
    pub seed: u64,
    /// Trials whose target had at least one preimage.
    pub existing: u64,
    /// Mean over all trials; trials without a preimage count as `2^Nm`.
    pub censored_mean: f64,
    /// Mean over trials with a preimage.
    pub conditional_mean: f64,
    /// `2^(Nm-1)`.
    pub reference: f64,
}

/// Per trial: random key, address and target. Whether a preimage exists is
/// decided by enumeration; then uniformly random prev-MAC guesses (with
/// replacement) are drawn until one matches, giving up after `2^Nm`
/// guesses. A give-up counts as `2^Nm` guesses.
pub fn montecarlo_guess_cost(nm: u32, trials: u64, seed: u64, exec: Execution) -> Result<GuessCostEstimate, AnalysisError> {
    check_nm(nm)?;
    if trials == 0 {
        return Err(AnalysisError::NonPositive("trials"));
    }
    let widths = MacWidths::new(GUESS_ADDR_BITS, nm)?;
    let space = 1u64 << nm;
    let outcomes = map_indexed(exec, trials as usize, |i| {
        let mut rng = trial_rng(seed, i as u64);
        let key = MacKey(rng.random());
        let addr = rng.random::<u64>() & widths.addr_mask();
        let target = rng.random::<u64>() & widths.mac_mask();
        let hit = |m: u64| mac(key, widths, MacRequest::new(addr, MacValue(m))).0 == target;
        let exists = (0..space).any(hit);
        if !exists {
            return (false, space);
        }
        let guesses = (1..=space).find(|_| hit(rng.random::<u64>() & widths.mac_mask())).unwrap_or(space);
        (true, guesses)
    });
    let existing: Vec<u64> = outcomes.iter().filter(|o| o.0).map(|o| o.1).collect();
    let total: u64 = outcomes.iter().map(|o| o.1).sum();
    Ok(GuessCostEstimate {
        nm,
        trials,
        seed,
        existing: existing.len() as u64,
        censored_mean: total as f64 / trials as f64,
        conditional_mean: if existing.is_empty() {
            f64::NAN
        } else {
            existing.iter().sum::<u64>() as f64 / existing.len() as f64
        },
        reference: 2f64.powi(nm as i32 - 1),
    })
}

/// Absolute tolerance used when comparing an existence estimate with the
/// analytic value.
pub fn existence_tolerance(nm: u32) -> f64 {
    if nm <= 1 {
        0.05
    } else {
        0.03
    }
}

/// Relative tolerance for the conditional guess count against `2^(Nm-1)`.
pub fn guess_cost_tolerance(nm: u32) -> f64 {
    if nm <= 2 {
        0.25
    } else {
        0.15
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSection {
    pub collision: CollisionEstimate,
    pub collision_tolerance: f64,
    pub collision_pass: bool,
    pub guess_cost: GuessCostEstimate,
    pub guess_cost_tolerance: f64,
    pub guess_cost_pass: bool,
}

/// Everything `analyze` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub params: SecurityParams,
    /// Decimal string: the value does not fit a JSON number in general.
    pub expected_guesses: String,
    pub expected_guesses_log2: f64,
    pub prob_no_valid_collision: f64,
    pub collision_existence_exact: f64,
    pub collision_existence_limit: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub monte_carlo: Option<MonteCarloSection>,
}

pub fn analyze(p: &SecurityParams) -> Result<AnalysisReport, AnalysisError> {
    p.validate()?;
    let g = expected_guesses(p);
    Ok(AnalysisReport {
        params: *p,
        expected_guesses: g.to_string(),
        expected_guesses_log2: log2_big(&g),
        prob_no_valid_collision: prob_no_valid_collision(p.n),
        collision_existence_exact: collision_existence_exact(p.nm),
        collision_existence_limit: collision_existence_limit(),
        monte_carlo: None,
    })
}

/// Runs both estimators at `p.nm` / `p.na` and records pass flags.
pub fn monte_carlo(p: &SecurityParams, trials: u64, seed: u64, exec: Execution) -> Result<MonteCarloSection, AnalysisError> {
    let collision = montecarlo_collision_existence(p.nm, p.na, trials, seed, exec)?;
    let guess_cost = montecarlo_guess_cost(p.nm, trials, seed, exec)?;
    let ct = existence_tolerance(p.nm);
    let gt = guess_cost_tolerance(p.nm);
    Ok(MonteCarloSection {
        collision_pass: (collision.empirical - collision.analytic).abs() <= ct,
        collision_tolerance: ct,
        guess_cost_pass: (guess_cost.conditional_mean / guess_cost.reference - 1.0).abs() <= gt,
        guess_cost_tolerance: gt,
        collision,
        guess_cost,
    })
}

fn log2_big(v: &BigUint) -> f64 {
    let bits = v.bits();
    if bits <= 53 {
        return (v.iter_u64_digits().next().unwrap_or(0) as f64).log2();
    }
    let shift = bits - 53;
    let top = (v >> shift as usize).iter_u64_digits().next().unwrap_or(0) as f64;
    top.log2() + shift as f64
}

impl AnalysisReport {
    /// Plain-text rendering, one quantity per row.
    pub fn table(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let row = |out: &mut String, k: &str, v: String| writeln!(out, "{k:<40} {v}").unwrap();
        row(&mut out, "Parameters", format!("Ns={} Nm={} Na={} N={}", p.ns, p.nm, p.na, p.n));
        row(
            &mut out,
            "Brute-force attempts 2^(Ns-1)+N*2^(Nm-1)",
            format!("{} (~2^{:.3})", self.expected_guesses, self.expected_guesses_log2),
        );
        row(&mut out, "P(no valid collision) 1-(1-1/e)^N", format!("{:.6}", self.prob_no_valid_collision));
        row(
            &mut out,
            "P(collision exists), one gadget",
            format!("{:.6} (limit 1-1/e = {:.6})", self.collision_existence_exact, self.collision_existence_limit),
        );
        if let Some(mc) = &self.monte_carlo {
            let flag = |ok: bool| if ok { "PASS" } else { "FAIL" };
            row(
                &mut out,
                "Monte Carlo P(collision exists)",
                format!(
                    "{:.4} vs {:.4} (tol {:.2}, {} trials, seed {}) {}",
                    mc.collision.empirical,
                    mc.collision.analytic,
                    mc.collision_tolerance,
                    mc.collision.trials,
                    mc.collision.seed,
                    flag(mc.collision_pass)
                ),
            );
            row(
                &mut out,
                "Monte Carlo guesses until collision",
                format!(
                    "{:.2} vs 2^(Nm-1) = {} (tol {:.0}%, censored mean {:.2}) {}",
                    mc.guess_cost.conditional_mean,
                    mc.guess_cost.reference,
                    mc.guess_cost_tolerance * 100.0,
                    mc.guess_cost.censored_mean,
                    flag(mc.guess_cost_pass)
                ),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(ns: u32, nm: u32, n: u64) -> SecurityParams {
        SecurityParams { ns, nm, na: 40, n }
    }

    #[test]
    fn guesses_at_hardware_widths() {
        let want = BigUint::from(9_223_372_036_854_775_808u64) + BigUint::from(41_943_040u64);
        assert_eq!(expected_guesses(&p(64, 24, 5)), want);
        assert_eq!(expected_guesses(&p(64, 24, 5)).to_string(), "9223372036896718848");
    }

    #[test]
    fn guesses_edge_cases() {
        assert_eq!(expected_guesses(&p(64, 24, 0)), BigUint::from(1u64 << 63));
        assert_eq!(expected_guesses(&p(8, 8, 1)), BigUint::from(256u32));
        assert_eq!(expected_guesses(&p(128, 64, 3)).bits(), 128);
    }

    #[test]
    fn no_collision_probability() {
        let v = prob_no_valid_collision(5);
        assert!((0.89..=0.91).contains(&v), "{v}");
        assert!((prob_no_valid_collision(1) - (-1f64).exp()).abs() < 1e-12);
        assert!(prob_no_valid_collision(50) >= 0.9999);
    }

    #[test]
    fn exact_existence_values() {
        assert!((collision_existence_exact(1) - 0.75).abs() < 1e-12);
        assert!((collision_existence_exact(8) - 0.6328).abs() < 1e-4);
        assert!((collision_existence_exact(30) - collision_existence_limit()).abs() < 1e-8);
    }

    #[test]
    fn montecarlo_is_deterministic_and_schedule_free() {
        let a = montecarlo_collision_existence(4, 4, 1000, 9, Execution::Parallel).unwrap();
        let b = montecarlo_collision_existence(4, 4, 1000, 9, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let g1 = montecarlo_guess_cost(4, 500, 9, Execution::Parallel).unwrap();
        let g2 = montecarlo_guess_cost(4, 500, 9, Execution::Sequential).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn tiny_width_existence() {
        let e = montecarlo_collision_existence(1, 1, 4000, 3, Execution::default()).unwrap();
        assert!((e.empirical - 0.75).abs() <= 0.05, "{e:?}");
    }

    #[test]
    fn small_width_guess_cost() {
        let g = montecarlo_guess_cost(2, 20_000, 5, Execution::default()).unwrap();
        assert!((g.conditional_mean / 2.0 - 1.0).abs() <= 0.25, "{g:?}");
        assert!(g.censored_mean >= g.conditional_mean);
    }

    #[test]
    fn guess_cost_is_stable_across_seeds() {
        let a = montecarlo_guess_cost(6, 5000, 1, Execution::default()).unwrap();
        let b = montecarlo_guess_cost(6, 5000, 2, Execution::default()).unwrap();
        assert!((a.conditional_mean / b.conditional_mean - 1.0).abs() <= 0.10, "{a:?} {b:?}");
    }

    #[test]
    fn rejects_wide_or_short_runs() {
        assert_eq!(montecarlo_collision_existence(17, 8, 1000, 0, Execution::Sequential), Err(AnalysisError::WidthTooLarge(17)));
        assert_eq!(montecarlo_collision_existence(8, 8, 10, 0, Execution::Sequential), Err(AnalysisError::TooFewTrials(10)));
        assert_eq!(montecarlo_guess_cost(20, 10, 0, Execution::Sequential), Err(AnalysisError::WidthTooLarge(20)));
        assert!(analyze(&SecurityParams { ns: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn report_table_and_json() {
        let mut r = analyze(&p(64, 24, 5)).unwrap();
        assert!(r.table().contains("9223372036896718848"));
        assert!(r.table().contains("0.899"));
        r.monte_carlo = Some(monte_carlo(&SecurityParams { ns: 64, nm: 4, na: 4, n: 1 }, 1000, 1, Execution::default()).unwrap());
        let j = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<AnalysisReport>(&j).unwrap(), r);
    }

    #[test]
    fn log2_of_big_values() {
        assert!((log2_big(&BigUint::from(1024u32)) - 10.0).abs() < 1e-12);
        assert!((log2_big(&(BigUint::from(1u8) << 200usize)) - 200.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn guesses_monotone(ns in 1u32..200, nm in 1u32..64, n in 0u64..1000) {
            let base = expected_guesses(&p(ns, nm, n));
            prop_assert!(expected_guesses(&p(ns + 1, nm, n)) > base);
            prop_assert!(expected_guesses(&p(ns, nm + 1, n)) >= base);
            prop_assert!(expected_guesses(&p(ns, nm, n + 1)) > base);
        }

        #[test]
        fn no_collision_increasing(n in 1u64..1500) {
            prop_assert!(prob_all_collisions_exist(n + 1) < prob_all_collisions_exist(n));
            prop_assert!(prob_no_valid_collision(n + 1) >= prob_no_valid_collision(n));
            if n < 60 {
                prop_assert!(prob_no_valid_collision(n + 1) > prob_no_valid_collision(n));
            }
        }
    }
}
