//! Auxiliary MDP on rectangular droplets.
//!
//! A state `(i, j)` is a `i x j` rectangle of plus spins (width `i`, height `j`),
//! with `(0, 0)` the all-minus lattice and `(N, N)` the all-plus lattice.
//! Side lengths take values in `{2, ..., N-2, N}`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

use crate::dynamics::{is_u1, ratio, DownhillEnumerator, DynamicsError, ExactDistribution, DEFAULT_STATE_CAP};
use crate::lattice::{
    classify_spins, nearest_in_set, set_distance, Axis, Configuration, LatticeError, Rect, TorusCoord,
};
use crate::mdpsolver::{ActionRow, FiniteMdp, SolverError};

#[derive(Debug, Error)]
pub enum AuxError {
    #[error("lattice side {0} is too small for the auxiliary MDP (need at least 6)")]
    SideTooSmall(usize),
    #[error("{state} is not a state of the auxiliary MDP for N = {n}")]
    InvalidState { state: AuxState, n: usize },
    #[error("action {action} is not available in state {state}")]
    ActionNotAvailable { state: AuxState, action: AuxAction },
    #[error("configuration is neither all-minus nor a single robust rectangle")]
    NotAU1Config,
    #[error("unknown action name {0:?}")]
    UnknownAction(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub const MIN_AUX_SIDE: usize = 6;

/// Critical discount factor separating the two optimal regimes.
pub fn critical_lambda() -> BigRational {
    ratio(15, 17)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AuxState {
    pub i: usize,
    pub j: usize,
}

impl AuxState {
    pub const EMPTY: AuxState = AuxState { i: 0, j: 0 };

    pub fn new(i: usize, j: usize) -> Self {
        AuxState { i, j }
    }

    pub fn mirrored(self) -> Self {
        AuxState { i: self.j, j: self.i }
    }
}

impl fmt::Display for AuxState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.i, self.j)
    }
}

/// Actions, declared in tie-breaking order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AuxAction {
    A11,
    A12,
    A21,
    A22,
    A11p,
    A12p,
    A21p,
    A22p,
    A0,
    ATilde,
    Noop,
}

impl AuxAction {
    pub const ALL: [AuxAction; 11] = [
        AuxAction::A11,
        AuxAction::A12,
        AuxAction::A21,
        AuxAction::A22,
        AuxAction::A11p,
        AuxAction::A12p,
        AuxAction::A21p,
        AuxAction::A22p,
        AuxAction::A0,
        AuxAction::ATilde,
        AuxAction::Noop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuxAction::A11 => "a11",
            AuxAction::A12 => "a12",
            AuxAction::A21 => "a21",
            AuxAction::A22 => "a22",
            AuxAction::A11p => "a11p",
            AuxAction::A12p => "a12p",
            AuxAction::A21p => "a21p",
            AuxAction::A22p => "a22p",
            AuxAction::A0 => "a0",
            AuxAction::ATilde => "a_tilde",
            AuxAction::Noop => "noop",
        }
    }

    /// The same action with the roles of width and height exchanged.
    pub fn mirrored(self) -> Self {
        use AuxAction::*;
        match self {
            A11 => A21,
            A12 => A22,
            A21 => A11,
            A22 => A12,
            A11p => A21p,
            A12p => A22p,
            A21p => A11p,
            A22p => A12p,
            other => other,
        }
    }

    fn is_horizontal(self) -> bool {
        use AuxAction::*;
        matches!(self, A21 | A22 | A21p | A22p)
    }

    /// Primed counterpart of an unprimed growth action.
    pub fn primed(self) -> Self {
        use AuxAction::*;
        match self {
            A11 => A11p,
            A12 => A12p,
            A21 => A21p,
            A22 => A22p,
            other => other,
        }
    }
}

impl fmt::Display for AuxAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuxAction {
    type Err = AuxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase().replace('\'', "p");
        AuxAction::ALL
            .into_iter()
            .find(|a| a.name() == t || (t == "atilde" && *a == AuxAction::ATilde))
            .ok_or_else(|| AuxError::UnknownAction(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Two,
    Mid,
    Nm2,
    Full,
}

fn side(s: usize, n: usize) -> Side {
    if s == 2 {
        Side::Two
    } else if s == n {
        Side::Full
    } else if s == n - 2 {
        Side::Nm2
    } else {
        Side::Mid
    }
}

fn check_side(n: usize) -> Result<(), AuxError> {
    if n < MIN_AUX_SIDE {
        Err(AuxError::SideTooSmall(n))
    } else {
        Ok(())
    }
}

/// Admissible rectangle side lengths: 2..=N-2 and N.
pub fn side_lengths(n: usize) -> Vec<usize> {
    (2..=n - 2).chain(std::iter::once(n)).collect()
}

pub fn is_state(s: AuxState, n: usize) -> bool {
    s == AuxState::EMPTY || (is_side(s.i, n) && is_side(s.j, n))
}

fn is_side(x: usize, n: usize) -> bool {
    (2..=n - 2).contains(&x) || x == n
}

/// All states, `(0,0)` first, then lexicographic.
pub fn aux_states(n: usize) -> Result<Vec<AuxState>, AuxError> {
    check_side(n)?;
    let sides = side_lengths(n);
    let mut out = vec![AuxState::EMPTY];
    for &i in &sides {
        for &j in &sides {
            out.push(AuxState::new(i, j));
        }
    }
    Ok(out)
}

fn check_state(s: AuxState, n: usize) -> Result<(), AuxError> {
    check_side(n)?;
    if is_state(s, n) {
        Ok(())
    } else {
        Err(AuxError::InvalidState { state: s, n })
    }
}

/// Available actions in tie-breaking order.
pub fn action_space(s: AuxState, n: usize) -> Result<Vec<AuxAction>, AuxError> {
    use AuxAction::*;
    use Side::*;
    check_state(s, n)?;
    if s == AuxState::EMPTY {
        return Ok(vec![Noop]);
    }
    let v: &[AuxAction] = match (side(s.i, n), side(s.j, n)) {
        (Full, Full) => &[Noop],
        (Two, Two) => &[A11p, A12p, A21p, A22p, A0, ATilde, Noop],
        (Two, Mid) => &[A21, A22, A11p, A12p, A21p, A22p, A0, ATilde, Noop],
        (Mid, Two) => &[A11, A12, A11p, A12p, A21p, A22p, A0, ATilde, Noop],
        (Two, Nm2) => &[A21, A22, A11p, A21p, A22p, A0, ATilde, Noop],
        (Nm2, Two) => &[A11, A12, A11p, A12p, A21p, A0, ATilde, Noop],
        (Mid, Mid) => &AuxAction::ALL,
        (Nm2, Mid) => &[A11, A12, A21, A11p, A12p, A21p, A0, ATilde, Noop],
        (Mid, Nm2) => &[A11, A21, A22, A11p, A21p, A22p, A0, ATilde, Noop],
        (Nm2, Nm2) => &[A11, A21, A11p, A21p, A0, ATilde, Noop],
        (Nm2, Full) => &[A21, Noop],
        (Full, Nm2) => &[A11, Noop],
        (Full, _) => &[A11, A12, Noop],
        (_, Full) => &[A21, A22, Noop],
    };
    Ok(v.to_vec())
}

pub fn reward(s: AuxState, n: usize) -> BigRational {
    if s == AuxState::new(n, n) {
        BigRational::one()
    } else {
        BigRational::zero()
    }
}

/// Transitions of a vertical growth action (height `j` grows) as (new height, probability).
fn vertical_growth(action: AuxAction, j: usize, n: usize) -> Vec<(usize, BigRational)> {
    use AuxAction::*;
    match action {
        A11 if j <= n - 3 => vec![(j, ratio(1, 3)), (j + 1, ratio(2, 3))],
        A11 => vec![(j, ratio(1, 4)), (n, ratio(3, 4))],
        A12 if j <= n - 4 => vec![(j, ratio(5, 9)), (j + 1, ratio(7, 27)), (j + 2, ratio(5, 27))],
        A12 => vec![(j, ratio(7, 18)), (n - 2, ratio(31, 144)), (n, ratio(19, 48))],
        A11p if j <= n - 3 => vec![(j, ratio(1, 2)), (j + 1, ratio(1, 2))],
        A11p => vec![(j, ratio(1, 3)), (n, ratio(2, 3))],
        A12p if j <= n - 4 => vec![(j, ratio(5, 8)), (j + 1, ratio(1, 4)), (j + 2, ratio(1, 8))],
        A12p => vec![(j, ratio(4, 9)), (n - 2, ratio(5, 27)), (n, ratio(10, 27))],
        _ => unreachable!("not a vertical growth action"),
    }
}

fn kernel_raw(s: AuxState, action: AuxAction, n: usize) -> Vec<(AuxState, BigRational)> {
    use AuxAction::*;
    let (i, j) = (s.i, s.j);
    let st = AuxState::new;
    match action {
        Noop => vec![(s, BigRational::one())],
        a if a.is_horizontal() => kernel_raw(s.mirrored(), a.mirrored(), n)
            .into_iter()
            .map(|(t, p)| (t.mirrored(), p))
            .collect(),
        A11 | A12 | A11p | A12p => vertical_growth(action, j, n).into_iter().map(|(h, p)| (st(i, h), p)).collect(),
        A0 => {
            if i == n - 2 && j == n - 2 {
                vec![
                    (s, ratio(7, 18)),
                    (st(n, n - 2), ratio(1, 8)),
                    (st(n - 2, n), ratio(1, 8)),
                    (st(n, n), ratio(13, 36)),
                ]
            } else if i == n - 2 {
                kernel_raw(s.mirrored(), A0, n).into_iter().map(|(t, p)| (t.mirrored(), p)).collect()
            } else if j == n - 2 {
                vec![
                    (s, ratio(5, 12)),
                    (st(i, n), ratio(1, 8)),
                    (st(i + 1, n - 2), ratio(1, 9)),
                    (st(i + 1, n), ratio(25, 72)),
                ]
            } else {
                vec![
                    (s, ratio(4, 9)),
                    (st(i + 1, j), ratio(1, 9)),
                    (st(i, j + 1), ratio(1, 9)),
                    (st(i + 1, j + 1), ratio(1, 3)),
                ]
            }
        }
        ATilde => match (i, j) {
            (2, 2) => vec![(s, ratio(1, 3)), (AuxState::EMPTY, ratio(2, 3))],
            (2, _) => vec![(s, ratio(1, 2)), (st(2, j - 1), ratio(1, 2))],
            (_, 2) => vec![(s, ratio(1, 2)), (st(i - 1, 2), ratio(1, 2))],
            _ => vec![(s, BigRational::one())],
        },
        _ => unreachable!(),
    }
}

/// Transition law of `action` in state `s`.
pub fn kernel(s: AuxState, action: AuxAction, n: usize) -> Result<ExactDistribution<AuxState>, AuxError> {
    if !action_space(s, n)?.contains(&action) {
        return Err(AuxError::ActionNotAvailable { state: s, action });
    }
    Ok(kernel_raw(s, action, n).into_iter().collect())
}

/// The 24 structurally distinct (state, action) transition patterns.
pub const KERNEL_CLASSES: [&str; 24] = [
    "a11, j <= N-3",
    "a21, i <= N-3",
    "a12, j <= N-4",
    "a22, i <= N-4",
    "a0, i,j <= N-3",
    "a11p, j <= N-3",
    "a21p, i <= N-3",
    "a12p, j <= N-4",
    "a22p, i <= N-4",
    "a11, j = N-2",
    "a21, i = N-2",
    "a12, j = N-3",
    "a22, i = N-3",
    "a0, i <= N-3, j = N-2",
    "a0, i = N-2, j <= N-3",
    "a0, (N-2,N-2)",
    "a11p, j = N-2",
    "a21p, i = N-2",
    "a12p, j = N-3",
    "a22p, i = N-3",
    "a_tilde, i,j >= 3",
    "a_tilde, i = 2, j >= 3",
    "a_tilde, i >= 3, j = 2",
    "a_tilde, (2,2)",
];

/// Class number (1-based index into [`KERNEL_CLASSES`]) of an available non-noop pair.
pub fn kernel_class(s: AuxState, action: AuxAction, n: usize) -> Option<usize> {
    use AuxAction::*;
    let (i, j) = (s.i, s.j);
    let c = match action {
        A11 => if j <= n - 3 { 1 } else { 10 },
        A21 => if i <= n - 3 { 2 } else { 11 },
        A12 => if j <= n - 4 { 3 } else { 12 },
        A22 => if i <= n - 4 { 4 } else { 13 },
        A11p => if j <= n - 3 { 6 } else { 17 },
        A21p => if i <= n - 3 { 7 } else { 18 },
        A12p => if j <= n - 4 { 8 } else { 19 },
        A22p => if i <= n - 4 { 9 } else { 20 },
        A0 => match (i == n - 2, j == n - 2) {
            (false, false) => 5,
            (false, true) => 14,
            (true, false) => 15,
            (true, true) => 16,
        },
        ATilde => match (i == 2, j == 2) {
            (false, false) => 21,
            (true, false) => 22,
            (false, true) => 23,
            (true, true) => 24,
        },
        Noop => return None,
    };
    Some(c)
}

/// Every available (state, action) pair grouped by kernel class.
pub fn class_members(n: usize) -> Result<BTreeMap<usize, Vec<(AuxState, AuxAction)>>, AuxError> {
    let mut out: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for s in aux_states(n)? {
        for a in action_space(s, n)? {
            if let Some(c) = kernel_class(s, a, n) {
                out.entry(c).or_default().push((s, a));
            }
        }
    }
    Ok(out)
}

/// First, middle and last member of each class.
pub fn class_representatives(n: usize) -> Result<Vec<(usize, AuxState, AuxAction)>, AuxError> {
    let mut out = Vec::new();
    for (c, members) in class_members(n)? {
        let mut idx = vec![0, members.len() / 2, members.len() - 1];
        idx.dedup();
        out.extend(idx.into_iter().map(|k| (c, members[k].0, members[k].1)));
    }
    Ok(out)
}

/// Writes the whole kernel as `i,j,action,i2,j2,num,den`.
pub fn write_kernel_csv<W: io::Write>(n: usize, out: W) -> Result<(), AuxError> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| AuxError::Lattice(LatticeError::Snapshot { line: 0, msg: e.to_string() });
    w.write_record(["i", "j", "action", "i2", "j2", "num", "den"]).map_err(io_err)?;
    for s in aux_states(n)? {
        for a in action_space(s, n)? {
            for (t, p) in kernel(s, a, n)?.iter() {
                w.write_record([
                    s.i.to_string(),
                    s.j.to_string(),
                    a.name().to_string(),
                    t.i.to_string(),
                    t.j.to_string(),
                    p.numer().to_string(),
                    p.denom().to_string(),
                ])
                .map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(|e| io_err(e.into()))?;
    Ok(())
}

/// The auxiliary MDP as an explicit finite model.
pub fn build_explicit_mdp(n: usize) -> Result<FiniteMdp<AuxState, AuxAction>, AuxError> {
    let states = aux_states(n)?;
    let index: HashMap<AuxState, usize> = states.iter().enumerate().map(|(k, s)| (*s, k)).collect();
    let mut rows = Vec::with_capacity(states.len());
    for &s in &states {
        let mut acts = Vec::new();
        for a in action_space(s, n)? {
            let transitions = kernel(s, a, n)?.iter().map(|(t, p)| (index[t], p.clone())).collect();
            acts.push(ActionRow { action: a, reward: reward(s, n), transitions });
        }
        rows.push(acts);
    }
    Ok(FiniteMdp::new(states, rows)?)
}

/// Decision prescribed by the structural theorem in regime `k` (1 above the
/// critical discount, 2 below). At `(N-3,N-3)` both `a12` and `a22` qualify.
pub fn theorem_actions(s: AuxState, k: u8, n: usize) -> Result<Vec<AuxAction>, AuxError> {
    use AuxAction::*;
    check_state(s, n)?;
    assert!(k == 1 || k == 2, "regime must be 1 or 2");
    if s == AuxState::EMPTY {
        return Ok(vec![Noop]);
    }
    if s.i < s.j {
        let mut m: Vec<_> = theorem_actions(s.mirrored(), k, n)?.into_iter().map(AuxAction::mirrored).collect();
        m.sort();
        return Ok(m);
    }
    let (i, j) = (s.i, s.j);
    let a = if i == n {
        if j == n {
            Noop
        } else if j == n - 2 || j == n - 4 {
            A11
        } else if j == n - 3 {
            A12
        } else if k == 1 {
            A11
        } else {
            A12
        }
    } else if i == n - 2 {
        if j == n - 3 {
            A12
        } else {
            A0
        }
    } else if i == n - 3 && j == n - 3 {
        return Ok(vec![A12, A22]);
    } else {
        A0
    };
    Ok(vec![a])
}

/// Optimal decision set for discount `lambda`; at the critical value both regimes are optimal.
pub fn optimal_decision_set(s: AuxState, lambda: &BigRational, n: usize) -> Result<Vec<AuxAction>, AuxError> {
    let lc = critical_lambda();
    let mut out = match lambda.cmp(&lc) {
        std::cmp::Ordering::Greater => theorem_actions(s, 1, n)?,
        std::cmp::Ordering::Less => theorem_actions(s, 2, n)?,
        std::cmp::Ordering::Equal => {
            let mut v = theorem_actions(s, 1, n)?;
            v.extend(theorem_actions(s, 2, n)?);
            v
        }
    };
    out.sort();
    out.dedup();
    Ok(out)
}

/// Regime used for a given discount: 1 when lambda >= 15/17.
pub fn regime(lambda: &BigRational) -> u8 {
    if *lambda >= critical_lambda() {
        1
    } else {
        2
    }
}

/// Deterministic Markov policy, possibly alternating between two decision rules
/// by epoch parity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuxPolicy {
    pub name: String,
    pub rules: Vec<BTreeMap<AuxState, AuxAction>>,
}

impl AuxPolicy {
    pub fn decision(&self, s: AuxState, epoch: u64) -> AuxAction {
        let rule = &self.rules[(epoch % self.rules.len() as u64) as usize];
        rule.get(&s).copied().unwrap_or(AuxAction::Noop)
    }

    pub fn period(&self) -> usize {
        self.rules.len()
    }

    /// Per-phase action indices for the solver.
    pub fn indices(&self, mdp: &FiniteMdp<AuxState, AuxAction>) -> Result<Vec<Vec<usize>>, AuxError> {
        self.rules
            .iter()
            .map(|rule| Ok(mdp.policy_from(|s| rule.get(s).copied().unwrap_or(AuxAction::Noop))?))
            .collect()
    }
}

/// Stationary policy following the theorem in regime `k`, `a22` at `(N-3,N-3)`.
pub fn theorem_policy(k: u8, n: usize) -> Result<AuxPolicy, AuxError> {
    let mut rule = BTreeMap::new();
    for s in aux_states(n)? {
        let acts = theorem_actions(s, k, n)?;
        let a = if acts.contains(&AuxAction::A22) { AuxAction::A22 } else { acts[0] };
        rule.insert(s, a);
    }
    Ok(AuxPolicy { name: format!("theorem_k{k}"), rules: vec![rule] })
}

/// The policy optimal at discount `lambda`.
pub fn optimal_policy(lambda: &BigRational, n: usize) -> Result<AuxPolicy, AuxError> {
    let mut p = theorem_policy(regime(lambda), n)?;
    p.name = "optimal".into();
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Benchmark {
    /// Always grow the rectangle by one row or column.
    Pi1,
    /// Grow by two rows or columns whenever possible.
    Pi2,
}

impl FromStr for Benchmark {
    type Err = AuxError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pi1" | "pi_1" => Ok(Benchmark::Pi1),
            "pi2" | "pi_2" => Ok(Benchmark::Pi2),
            other => Err(AuxError::UnknownAction(other.into())),
        }
    }
}

/// Benchmark policies alternating vertical (even epochs) and horizontal (odd epochs)
/// growth. Where the unprimed action is unavailable (side length 2) its primed
/// counterpart is used.
pub fn benchmark_policy(which: Benchmark, n: usize) -> Result<AuxPolicy, AuxError> {
    use AuxAction::*;
    let mut even = BTreeMap::new();
    let mut odd = BTreeMap::new();
    for s in aux_states(n)? {
        let (i, j) = (s.i, s.j);
        let vertical = match which {
            Benchmark::Pi1 => A11,
            Benchmark::Pi2 if j <= n - 3 => A12,
            Benchmark::Pi2 => A11,
        };
        let horizontal = match which {
            Benchmark::Pi1 => A21,
            Benchmark::Pi2 if i <= n - 3 => A22,
            Benchmark::Pi2 => A21,
        };
        let (e, o) = if s == AuxState::EMPTY || (i == n && j == n) {
            (Noop, Noop)
        } else if i == n {
            (vertical, vertical)
        } else if j == n {
            (horizontal, horizontal)
        } else {
            (vertical, horizontal)
        };
        let avail = action_space(s, n)?;
        let realize = |a: AuxAction| if avail.contains(&a) { a } else { a.primed() };
        even.insert(s, realize(e));
        odd.insert(s, realize(o));
    }
    let name = match which {
        Benchmark::Pi1 => "pi1",
        Benchmark::Pi2 => "pi2",
    };
    Ok(AuxPolicy { name: name.into(), rules: vec![even, odd] })
}

/// Value function of the regime-`k` theorem policies, by backward recursion over
/// the rectangle size. Symmetric in `(i, j)`.
pub fn closed_form_value(k: u8, lambda: &BigRational, n: usize) -> Result<BTreeMap<AuxState, BigRational>, AuxError> {
    check_side(n)?;
    let mut memo = HashMap::new();
    let mut out = BTreeMap::new();
    for s in aux_states(n)? {
        let v = value_rec(s.i.max(s.j), s.i.min(s.j), k, lambda, n, &mut memo);
        out.insert(s, v);
    }
    Ok(out)
}

fn value_rec(
    a: usize,
    b: usize,
    k: u8,
    lam: &BigRational,
    n: usize,
    memo: &mut HashMap<(usize, usize), BigRational>,
) -> BigRational {
    let (a, b) = (a.max(b), a.min(b));
    if a == 0 {
        return BigRational::zero();
    }
    if let Some(v) = memo.get(&(a, b)) {
        return v.clone();
    }
    let r = |x: i64| BigRational::from_integer(BigInt::from(x));
    let l = lam.clone();
    let one = BigRational::one();
    let mut v = |x: usize, y: usize| value_rec(x, y, k, lam, n, memo);
    let val = if a == n {
        if b == n {
            one.clone() / (one - l)
        } else if b == n - 2 {
            r(3) * &l / (r(4) - &l) * v(n, n)
        } else if b == n - 3 {
            (r(31) * &l * v(n, n - 2) + r(57) * &l * v(n, n)) / (r(8) * (r(18) - r(7) * &l))
        } else if b == n - 4 || k == 1 {
            r(2) * &l / (r(3) - &l) * v(n, b + 1)
        } else {
            &l * (r(7) * v(n, b + 1) + r(5) * v(n, b + 2)) / (r(3) * (r(9) - r(5) * &l))
        }
    } else if a == n - 2 {
        if b == n - 2 {
            &l * (r(9) * v(n, n - 2) + r(13) * v(n, n)) / (r(2) * (r(18) - r(7) * &l))
        } else if b == n - 3 {
            (r(31) * &l * v(n - 2, n - 2) + r(57) * &l * v(n - 2, n)) / (r(8) * (r(18) - r(7) * &l))
        } else {
            r(12) / (r(12) - r(5) * &l)
                * (&l / r(8) * v(n, b) + r(25) * &l / r(72) * v(n, b + 1) + &l / r(9) * v(n - 2, b + 1))
        }
    } else if a == n - 3 && b == n - 3 {
        (r(31) * &l * v(n - 2, n - 3) + r(57) * &l * v(n, n - 3)) / (r(8) * (r(18) - r(7) * &l))
    } else {
        &l / (r(9) - r(4) * &l) * (v(a, b + 1) + v(a + 1, b) + r(3) * v(a + 1, b + 1))
    };
    memo.insert((a, b), val.clone());
    val
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Positive,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InequalityCheck {
    pub family: u8,
    pub regime: u8,
    pub index: String,
    pub value: BigRational,
    pub relation: Relation,
}

impl InequalityCheck {
    pub fn holds(&self) -> bool {
        match self.relation {
            Relation::Positive => self.value.is_positive(),
            Relation::Zero => self.value.is_zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InequalityReport {
    pub lambda: BigRational,
    pub n: usize,
    pub checks: Vec<InequalityCheck>,
}

impl InequalityReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(InequalityCheck::holds)
    }

    pub fn violations(&self) -> Vec<&InequalityCheck> {
        self.checks.iter().filter(|c| !c.holds()).collect()
    }

    pub fn families(&self) -> Vec<u8> {
        let mut f: Vec<u8> = self.checks.iter().map(|c| c.family).collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

/// Evaluates the optimality inequality families on the exact closed-form values.
/// Above the critical discount regime 1 is checked, below it regime 2, and at the
/// critical value both regimes plus the equality family.
pub fn verify_bellman_inequalities(lambda: &BigRational, n: usize) -> Result<InequalityReport, AuxError> {
    check_side(n)?;
    let lc = critical_lambda();
    let mut checks = Vec::new();
    let regimes: Vec<u8> = match lambda.cmp(&lc) {
        std::cmp::Ordering::Greater => vec![1],
        std::cmp::Ordering::Less => vec![2],
        std::cmp::Ordering::Equal => vec![1, 2],
    };
    for &k in &regimes {
        let values = closed_form_value(k, lambda, n)?;
        let v = |i: usize, j: usize| values[&AuxState::new(i, j)].clone();
        let r = |x: i64| BigRational::from_integer(BigInt::from(x));
        let mut push = |family: u8, index: String, value: BigRational, relation: Relation| {
            checks.push(InequalityCheck { family, regime: k, index, value, relation });
        };
        let pos = Relation::Positive;
        let nn = n;
        push(1, String::new(), r(8) * v(nn, nn - 3) - r(65) * v(nn, nn - 2) + r(57) * v(nn, nn), pos);
        push(2, String::new(), r(-6) * v(nn, nn - 4) + r(11) * v(nn, nn - 3) - r(5) * v(nn, nn - 2), pos);
        for j in 2..=nn.saturating_sub(5) {
            let d = r(-6) * v(nn, j) + r(11) * v(nn, j + 1) - r(5) * v(nn, j + 2);
            if lambda == &lc {
                push(5, format!("j={j}"), d, Relation::Zero);
            } else if k == 1 {
                push(3, format!("j={j}"), d, pos);
            } else {
                push(4, format!("j={j}"), -d, pos);
            }
        }
        push(6, String::new(), r(5) * v(nn - 2, nn - 2) - r(18) * v(nn, nn - 2) + r(13) * v(nn, nn), pos);
        push(7, String::new(), r(8) * v(nn - 2, nn - 3) - r(65) * v(nn - 2, nn - 2) + r(57) * v(nn - 2, nn), pos);
        push(
            8,
            String::new(),
            r(20) * v(nn - 2, nn - 3) + r(31) * v(nn - 2, nn - 2) + r(57) * v(nn - 2, nn) - r(108) * v(nn, nn - 3),
            pos,
        );
        push(
            9,
            String::new(),
            r(-4) * v(nn - 2, nn - 3) + r(15) * v(nn - 2, nn - 2) - r(18) * v(nn, nn - 3) + r(7) * v(nn, nn - 2),
            pos,
        );
        for j in 2..=nn - 4 {
            let idx = format!("j={j}");
            push(
                10,
                idx.clone(),
                r(6) * v(nn - 2, j) - r(40) * v(nn - 2, j + 1) + r(9) * v(nn, j) + r(25) * v(nn, j + 1),
                pos,
            );
            push(
                11,
                idx.clone(),
                r(-30) * v(nn - 2, j) - r(32) * v(nn - 2, j + 1) - r(40) * v(nn - 2, j + 2)
                    + r(27) * v(nn, j)
                    + r(75) * v(nn, j + 1),
                pos,
            );
            push(
                12,
                idx,
                r(12) * v(nn - 2, j) + r(8) * v(nn - 2, j + 1) - r(45) * v(nn, j) + r(25) * v(nn, j + 1),
                pos,
            );
        }
        push(13, String::new(), r(8) * v(nn - 3, nn - 3) - r(65) * v(nn - 2, nn - 3) + r(57) * v(nn, nn - 3), pos);
        push(
            14,
            String::new(),
            r(-8) * v(nn - 3, nn - 3) - v(nn - 2, nn - 3) - r(48) * v(nn - 2, nn - 2) + r(57) * v(nn, nn - 3),
            pos,
        );
        for j in 2..=nn - 4 {
            let idx = format!("j={j}");
            let m = nn - 3;
            let p = nn - 2;
            push(15, idx.clone(), v(m, j) - r(5) * v(m, j + 1) + v(p, j) + r(3) * v(p, j + 1), pos);
            push(
                16,
                idx.clone(),
                r(-3) * v(m, j) - r(4) * v(m, j + 1) - r(5) * v(m, j + 2) + r(3) * v(p, j) + r(9) * v(p, j + 1),
                pos,
            );
            push(17, idx.clone(), v(m, j) + v(m, j + 1) - r(5) * v(p, j) + r(3) * v(p, j + 1), pos);
            push(
                18,
                idx,
                r(8) * v(m, j) + r(16) * v(m, j + 1) - r(15) * v(p, j) + r(48) * v(p, j + 1) - r(57) * v(nn, j),
                pos,
            );
        }
        for i in 2..=nn - 4 {
            for j in 2..=nn - 4 {
                let idx = format!("i={i},j={j}");
                push(19, idx.clone(), v(i, j) + v(i + 1, j) - r(5) * v(i, j + 1) + r(3) * v(i + 1, j + 1), pos);
                push(20, idx.clone(), v(i, j) - r(5) * v(i + 1, j) + v(i, j + 1) + r(3) * v(i + 1, j + 1), pos);
                push(
                    21,
                    idx.clone(),
                    r(-3) * v(i, j) + r(3) * v(i + 1, j) - r(4) * v(i, j + 1) + r(9) * v(i + 1, j + 1)
                        - r(5) * v(i, j + 2),
                    pos,
                );
                push(
                    22,
                    idx,
                    r(-3) * v(i, j) - r(4) * v(i + 1, j) + r(3) * v(i, j + 1) + r(9) * v(i + 1, j + 1)
                        - r(5) * v(i + 2, j),
                    pos,
                );
            }
        }
    }
    Ok(InequalityReport { lambda: lambda.clone(), n, checks })
}

/// Maps a lattice configuration to its auxiliary state.
pub fn lattice_to_aux(config: &Configuration) -> Result<AuxState, AuxError> {
    check_side(config.n())?;
    if config.is_all_minus() {
        return Ok(AuxState::EMPTY);
    }
    match is_u1(config) {
        Some((w, h)) if is_state(AuxState::new(w, h), config.n()) => Ok(AuxState::new(w, h)),
        _ => Err(AuxError::NotAU1Config),
    }
}

/// Auxiliary action realised by flipping `target` (or by not flipping) in a
/// rectangle configuration.
pub fn classify_action(config: &Configuration, target: Option<TorusCoord>) -> Result<AuxAction, AuxError> {
    let state = lattice_to_aux(config)?;
    let Some(a) = target else { return Ok(AuxAction::Noop) };
    if state == AuxState::EMPTY {
        return Ok(AuxAction::Noop);
    }
    let n = config.n();
    let plus = config.plus_set();
    let corners = classify_spins(config).corners;
    let along = |axis: Axis| {
        let d = set_distance(a, &plus, n, Some(axis));
        let at_corner = nearest_in_set(a, &plus, n, Some(axis)).iter().any(|m| corners.contains(m));
        (d, at_corner)
    };
    let (dv, cv) = along(Axis::Vertical);
    let (dh, ch) = along(Axis::Horizontal);
    use AuxAction::*;
    let act = match (dv, dh) {
        (Some(1), _) => if cv { A11p } else { A11 },
        (Some(2), _) => if cv { A12p } else { A12 },
        (_, Some(1)) => if ch { A21p } else { A21 },
        (_, Some(2)) => if ch { A22p } else { A22 },
        (None, None) if set_distance(a, &plus, n, None) == Some(2) => A0,
        _ if corners.contains(&a) => ATilde,
        _ => Noop,
    };
    Ok(act)
}

/// Canonical rectangle realising a state: anchored at (1,1), or at column/row 0
/// for full-width/height bands.
pub fn state_configuration(s: AuxState, n: usize) -> Result<Configuration, AuxError> {
    check_state(s, n)?;
    if s == AuxState::EMPTY {
        return Ok(Configuration::all_minus(n)?);
    }
    let x = if s.i == n { 0 } else { 1 };
    let y = if s.j == n { 0 } else { 1 };
    Ok(Configuration::with_rectangle(n, Rect::new(s.i, s.j, TorusCoord::new(x, y)))?)
}

/// Spins whose flip realises `action` in the canonical configuration of `s`.
pub fn realizing_spins(s: AuxState, action: AuxAction, n: usize) -> Result<Vec<TorusCoord>, AuxError> {
    let cfg = state_configuration(s, n)?;
    let mut out = Vec::new();
    for c in cfg.coords() {
        if classify_action(&cfg, Some(c))? == action {
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct KernelAuditRow {
    pub class: usize,
    pub state: AuxState,
    pub action: AuxAction,
    pub spin: TorusCoord,
    pub expected: ExactDistribution<AuxState>,
    pub observed: ExactDistribution<AuxState>,
    /// Distinct endpoint configurations map to distinct states. Not required:
    /// near the wrap two different rectangles can share a size.
    pub injective: bool,
}

impl KernelAuditRow {
    pub fn matches(&self) -> bool {
        self.expected == self.observed
    }
}

/// Recomputes kernel rows from the zero-temperature lattice dynamics. For each
/// representative pair the first and last realising spin are both checked.
pub fn audit_kernel(
    n: usize,
    reps: &[(usize, AuxState, AuxAction)],
    cap: usize,
) -> Result<Vec<KernelAuditRow>, AuxError> {
    let mut en = DownhillEnumerator::new(n, cap);
    let mut out = Vec::new();
    for &(class, s, a) in reps {
        let spins = realizing_spins(s, a, n)?;
        let cfg = state_configuration(s, n)?;
        let expected = kernel(s, a, n)?;
        let picks: Vec<TorusCoord> = match (spins.first(), spins.last()) {
            (Some(f), Some(l)) if f != l => vec![*f, *l],
            (Some(f), _) => vec![*f],
            _ => Vec::new(),
        };
        if picks.is_empty() {
            out.push(KernelAuditRow {
                class,
                state: s,
                action: a,
                spin: TorusCoord::new(0, 0),
                expected,
                observed: ExactDistribution::new(),
                injective: false,
            });
            continue;
        }
        for spin in picks {
            let dist = en.endpoint_distribution(&cfg.flipped(spin))?;
            let mut observed = ExactDistribution::new();
            for (e, p) in dist.iter() {
                let t = lattice_to_aux(e).unwrap_or(AuxState::new(usize::MAX, usize::MAX));
                observed.add(t, p.clone());
            }
            let injective = observed.len() == dist.len();
            out.push(KernelAuditRow { class, state: s, action: a, spin, expected: expected.clone(), observed, injective });
        }
    }
    Ok(out)
}

/// Audit over the default representatives with the default enumeration cap.
pub fn audit_kernel_default(n: usize) -> Result<Vec<KernelAuditRow>, AuxError> {
    audit_kernel(n, &class_representatives(n)?, DEFAULT_STATE_CAP)
}
