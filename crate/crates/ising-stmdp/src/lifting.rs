//! Lattice policies obtained from auxiliary decisions.
//!
//! A cluster is identified with its circumscribed rectangle. Vertical growth
//! actions act on the top side, horizontal ones on the right side, measured
//! from the middle spin of that side (the lower of two middles for even sides).
//! Primed actions, `a0` and `a_tilde` use the top-right corner.

use std::fmt;
use std::str::FromStr;

use num_rational::BigRational;
use thiserror::Error;

use crate::auxmdp::{benchmark_policy, is_state, optimal_policy, AuxAction, AuxError, AuxPolicy, AuxState, Benchmark};
use crate::lattice::{circumscribed_rectangle, Configuration, LatticeError, Rect, TorusCoord};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("no plus spins: action {0} needs a rectangle")]
    NoCluster(AuxAction),
    #[error("unknown policy {0:?} (expected opt, pi1 or pi2)")]
    UnknownPolicy(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Aux(#[from] AuxError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolicyKind {
    LiftedOptimal,
    LiftedPi1,
    LiftedPi2,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::LiftedOptimal, PolicyKind::LiftedPi1, PolicyKind::LiftedPi2];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::LiftedOptimal => "opt",
            PolicyKind::LiftedPi1 => "pi1",
            PolicyKind::LiftedPi2 => "pi2",
        }
    }

    /// Stable numeric label used in seed derivation.
    pub fn label(self) -> u64 {
        match self {
            PolicyKind::LiftedOptimal => 0,
            PolicyKind::LiftedPi1 => 1,
            PolicyKind::LiftedPi2 => 2,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = LiftError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "opt" | "optimal" | "lifted_optimal" => Ok(PolicyKind::LiftedOptimal),
            "pi1" | "lifted_pi1" => Ok(PolicyKind::LiftedPi1),
            "pi2" | "lifted_pi2" => Ok(PolicyKind::LiftedPi2),
            other => Err(LiftError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticePolicy {
    pub kind: PolicyKind,
    pub aux: AuxPolicy,
}

impl LatticePolicy {
    /// `lambda` selects the regime of the optimal policy; benchmarks ignore it.
    pub fn new(kind: PolicyKind, n: usize, lambda: &BigRational) -> Result<Self, AuxError> {
        let aux = match kind {
            PolicyKind::LiftedOptimal => optimal_policy(lambda, n)?,
            PolicyKind::LiftedPi1 => benchmark_policy(Benchmark::Pi1, n)?,
            PolicyKind::LiftedPi2 => benchmark_policy(Benchmark::Pi2, n)?,
        };
        Ok(LatticePolicy { kind, aux })
    }
}

/// Spin realising `action` relative to the rectangle `rect`.
pub fn lift_in_rect(rect: &Rect, action: AuxAction, n: usize) -> Option<TorusCoord> {
    use AuxAction::*;
    let (ax, ay) = (rect.anchor.x as i64, rect.anchor.y as i64);
    let xr = ax + rect.width as i64 - 1;
    let yt = ay + rect.height as i64 - 1;
    let xm = ax + (rect.width as i64 - 1) / 2;
    let ym = ay + (rect.height as i64 - 1) / 2;
    let (x, y) = match action {
        A11 => (xm, yt + 1),
        A12 => (xm, yt + 2),
        A21 => (xr + 1, ym),
        A22 => (xr + 2, ym),
        A11p => (xr, yt + 1),
        A12p => (xr, yt + 2),
        A21p => (xr + 1, yt),
        A22p => (xr + 2, yt),
        A0 => (xr + 1, yt + 1),
        ATilde => (xr, yt),
        Noop => return None,
    };
    Some(TorusCoord::wrapped(x, y, n))
}

/// Concrete flip for `action` on the circumscribed rectangle of `config`.
pub fn lift_decision(config: &Configuration, action: AuxAction) -> Result<Option<TorusCoord>, LiftError> {
    if action == AuxAction::Noop {
        return Ok(None);
    }
    let rect = circumscribed_rectangle(config)?.ok_or(LiftError::NoCluster(action))?;
    Ok(lift_in_rect(&rect, action, config.n()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decision {
    pub target: Option<TorusCoord>,
    /// Auxiliary state read off the bounding box, if it lies in the state space.
    pub state: Option<AuxState>,
    pub action: AuxAction,
    /// The bounding box fell outside the state space and no flip was made.
    pub fallback: bool,
}

/// Decision of a lattice policy at `epoch`.
pub fn step_policy(config: &Configuration, epoch: u64, policy: &LatticePolicy) -> Result<Decision, LiftError> {
    let n = config.n();
    let Some(rect) = circumscribed_rectangle(config)? else {
        let action = policy.aux.decision(AuxState::EMPTY, epoch);
        return Ok(Decision { target: None, state: Some(AuxState::EMPTY), action, fallback: false });
    };
    let state = AuxState::new(rect.width, rect.height);
    if !is_state(state, n) {
        return Ok(Decision { target: None, state: None, action: AuxAction::Noop, fallback: true });
    }
    let action = policy.aux.decision(state, epoch);
    Ok(Decision { target: lift_in_rect(&rect, action, n), state: Some(state), action, fallback: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auxmdp::{action_space, aux_states, classify_action, critical_lambda};
    use crate::dynamics::ratio;

    fn block(n: usize, w: usize, h: usize, x: usize, y: usize) -> Configuration {
        Configuration::with_rectangle(n, Rect::new(w, h, TorusCoord::new(x, y))).unwrap()
    }

    #[test]
    fn three_by_three_examples() {
        let c = block(10, 3, 3, 0, 0);
        assert_eq!(lift_decision(&c, AuxAction::A11).unwrap(), Some(TorusCoord::new(1, 3)));
        assert_eq!(lift_decision(&c, AuxAction::A12).unwrap(), Some(TorusCoord::new(1, 4)));
        assert_eq!(lift_decision(&c, AuxAction::Noop).unwrap(), None);
        let p = LatticePolicy::new(PolicyKind::LiftedOptimal, 10, &ratio(9, 10)).unwrap();
        let d = step_policy(&c, 0, &p).unwrap();
        assert_eq!(d.action, AuxAction::A0);
        assert_eq!(d.target, Some(TorusCoord::new(3, 3)));
    }

    #[test]
    fn all_plus_and_empty() {
        let p = LatticePolicy::new(PolicyKind::LiftedPi1, 8, &critical_lambda()).unwrap();
        let d = step_policy(&Configuration::all_plus(8).unwrap(), 3, &p).unwrap();
        assert_eq!(d.target, None);
        let d = step_policy(&Configuration::all_minus(8).unwrap(), 0, &p).unwrap();
        assert_eq!((d.target, d.state), (None, Some(AuxState::EMPTY)));
        assert!(matches!(
            lift_decision(&Configuration::all_minus(8).unwrap(), AuxAction::A11),
            Err(LiftError::NoCluster(_))
        ));
    }

    #[test]
    fn ragged_cluster_uses_bounding_box() {
        let mut c = block(12, 4, 5, 2, 2);
        c.set(TorusCoord::new(2, 2), -1);
        let p = LatticePolicy::new(PolicyKind::LiftedPi1, 12, &ratio(1, 2)).unwrap();
        assert_eq!(step_policy(&c, 0, &p).unwrap().state, Some(AuxState::new(4, 5)));
        // width N-1 is not a state
        let wide = block(12, 11, 3, 0, 0);
        let d = step_policy(&wide, 0, &p).unwrap();
        assert!(d.fallback && d.target.is_none());
    }

    #[test]
    fn round_trip_on_exact_rectangles() {
        let n = 12;
        for s in aux_states(n).unwrap().into_iter().skip(1) {
            for (x, y) in [(0, 0), (5, 9), (11, 3)] {
                let ax = if s.i == n { 0 } else { x };
                let ay = if s.j == n { 0 } else { y };
                let c = block(n, s.i, s.j, ax, ay);
                for a in action_space(s, n).unwrap() {
                    let t = lift_decision(&c, a).unwrap();
                    assert_eq!(classify_action(&c, t).unwrap(), a, "{s} {a} at ({ax},{ay})");
                    if let Some(t) = t {
                        let want = if a == AuxAction::ATilde { 1 } else { -1 };
                        assert_eq!(c.get(t), want);
                    }
                }
            }
        }
    }

    #[test]
    fn policy_names() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("greedy".parse::<PolicyKind>().is_err());
    }
}
