//! Finite discounted MDPs: exact and floating-point policy evaluation, value
//! iteration, greedy extraction with exact tie sets, Bellman residuals and
//! the hitting-time representation of values for reachability rewards.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, One, Signed, ToPrimitive, Zero};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("state {0} has no actions")]
    NoActions(usize),
    #[error("row for state {state}, action {action} sums to {sum} instead of 1")]
    BadRowSum { state: usize, action: usize, sum: String },
    #[error("transition to unknown state index {0}")]
    BadTarget(usize),
    #[error("policy picks action {action} at state {state}, which has only {available}")]
    BadPolicy { state: usize, action: usize, available: usize },
    #[error("policy has {got} entries for {expected} states")]
    PolicyLength { expected: usize, got: usize },
    #[error("linear system is singular")]
    Singular,
    #[error("value iteration did not converge within {0} sweeps")]
    MaxIterExceeded(usize),
    #[error("discount factor must lie in (0,1)")]
    BadDiscount,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionRow<A> {
    pub action: A,
    pub reward: BigRational,
    /// (target state index, probability)
    pub transitions: Vec<(usize, BigRational)>,
}

/// Explicit finite MDP with exact rational kernel rows.
#[derive(Clone, Debug)]
pub struct FiniteMdp<S, A> {
    states: Vec<S>,
    rows: Vec<Vec<ActionRow<A>>>,
    index: HashMap<S, usize>,
}

impl<S: Clone + Eq + Hash, A: Clone + PartialEq> FiniteMdp<S, A> {
    pub fn new(states: Vec<S>, rows: Vec<Vec<ActionRow<A>>>) -> Result<Self, SolverError> {
        let ns = states.len();
        for (s, acts) in rows.iter().enumerate() {
            if acts.is_empty() {
                return Err(SolverError::NoActions(s));
            }
            for (a, row) in acts.iter().enumerate() {
                let mut sum = BigRational::zero();
                for (t, p) in &row.transitions {
                    if *t >= ns {
                        return Err(SolverError::BadTarget(*t));
                    }
                    sum += p;
                }
                if !sum.is_one() {
                    return Err(SolverError::BadRowSum { state: s, action: a, sum: sum.to_string() });
                }
            }
        }
        let index = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(FiniteMdp { states, rows, index })
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_index(&self, s: &S) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn actions(&self, s: usize) -> &[ActionRow<A>] {
        &self.rows[s]
    }

    pub fn action_index(&self, s: usize, a: &A) -> Option<usize> {
        self.rows[s].iter().position(|r| &r.action == a)
    }

    /// Policy as per-state action indices from a labelling function.
    pub fn policy_from(&self, mut f: impl FnMut(&S) -> A) -> Result<Vec<usize>, SolverError> {
        (0..self.len())
            .map(|s| {
                let a = f(&self.states[s]);
                self.action_index(s, &a).ok_or(SolverError::BadPolicy {
                    state: s,
                    action: usize::MAX,
                    available: self.rows[s].len(),
                })
            })
            .collect()
    }

    pub fn check_policy(&self, policy: &[usize]) -> Result<(), SolverError> {
        if policy.len() != self.len() {
            return Err(SolverError::PolicyLength { expected: self.len(), got: policy.len() });
        }
        for (s, &a) in policy.iter().enumerate() {
            if a >= self.rows[s].len() {
                return Err(SolverError::BadPolicy { state: s, action: a, available: self.rows[s].len() });
            }
        }
        Ok(())
    }
}

/// Numeric backend for the solver: exact rationals or f64.
pub trait Scalar: Num + Clone + PartialOrd + Debug {
    fn from_rational(r: &BigRational) -> Self;
    fn magnitude(&self) -> f64;
    /// Slack under which two action values count as tied in greedy extraction.
    fn tie_slack(&self) -> Self;
    fn abs_diff(&self, other: &Self) -> Self {
        if self > other {
            self.clone() - other.clone()
        } else {
            other.clone() - self.clone()
        }
    }
}

impl Scalar for f64 {
    fn from_rational(r: &BigRational) -> Self {
        r.to_f64().unwrap_or(f64::NAN)
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
    fn tie_slack(&self) -> Self {
        1e-12 * (1.0 + self.abs())
    }
}

impl Scalar for BigRational {
    fn from_rational(r: &BigRational) -> Self {
        r.clone()
    }
    fn magnitude(&self) -> f64 {
        self.abs().to_f64().unwrap_or(f64::INFINITY)
    }
    fn tie_slack(&self) -> Self {
        BigRational::zero()
    }
}

fn check_discount(lambda: &BigRational) -> Result<(), SolverError> {
    if lambda > &BigRational::zero() && lambda < &BigRational::one() {
        Ok(())
    } else {
        Err(SolverError::BadDiscount)
    }
}

/// Converts an f64 discount into an exact rational (its binary value).
pub fn rational_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite float")
}

/// One-step lookahead r(s,a) + lambda * sum_t P(t|s,a) v(t).
pub fn q_value<S, A, T: Scalar>(mdp: &FiniteMdp<S, A>, lambda: &T, s: usize, a: usize, v: &[T]) -> T {
    let row = &mdp.rows[s][a];
    let mut acc = T::zero();
    for (t, p) in &row.transitions {
        acc = acc + T::from_rational(p) * v[*t].clone();
    }
    T::from_rational(&row.reward) + lambda.clone() * acc
}

/// Strongly connected components in reverse topological order (sinks first).
fn sccs(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut counter = 0;
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        // explicit DFS: (node, next child position)
        let mut work = vec![(root, 0usize)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut pos)) = work.last_mut() {
            if *pos < adj[v].len() {
                let w = adj[v][*pos];
                *pos += 1;
                if index[w] == usize::MAX {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                work.pop();
                if let Some(&(parent, _)) = work.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    out.push(comp);
                }
            }
        }
    }
    out
}

/// Solves (I - lambda P) v = r for a Markov reward chain, one strongly
/// connected block at a time.
pub fn solve_chain<T: Scalar>(
    rows: &[Vec<(usize, BigRational)>],
    rewards: &[BigRational],
    lambda: &BigRational,
) -> Result<Vec<T>, SolverError> {
    let n = rows.len();
    let lam = T::from_rational(lambda);
    let adj: Vec<Vec<usize>> = rows.iter().map(|r| r.iter().map(|(t, _)| *t).collect()).collect();
    let mut values: Vec<Option<T>> = vec![None; n];
    for comp in sccs(&adj) {
        let m = comp.len();
        let pos: HashMap<usize, usize> = comp.iter().enumerate().map(|(k, &s)| (s, k)).collect();
        // augmented matrix [A | b]
        let mut a = vec![vec![T::zero(); m + 1]; m];
        for (k, &s) in comp.iter().enumerate() {
            a[k][k] = T::one();
            let mut b = T::from_rational(&rewards[s]);
            for (t, p) in &rows[s] {
                let w = lam.clone() * T::from_rational(p);
                match pos.get(t) {
                    Some(&c) => a[k][c] = a[k][c].clone() - w,
                    None => b = b + w * values[*t].clone().expect("successor block solved first"),
                }
            }
            a[k][m] = b;
        }
        let x = gauss_solve(a)?;
        for (k, &s) in comp.iter().enumerate() {
            values[s] = Some(x[k].clone());
        }
    }
    Ok(values.into_iter().map(|v| v.unwrap()).collect())
}

fn gauss_solve<T: Scalar>(mut a: Vec<Vec<T>>) -> Result<Vec<T>, SolverError> {
    let m = a.len();
    for col in 0..m {
        let piv = (col..m)
            .filter(|&r| !a[r][col].is_zero())
            .max_by(|&r1, &r2| a[r1][col].magnitude().total_cmp(&a[r2][col].magnitude()))
            .ok_or(SolverError::Singular)?;
        a.swap(col, piv);
        let p = a[col][col].clone();
        if p.magnitude() < 1e-300 && p.magnitude() != 0.0 {
            return Err(SolverError::Singular);
        }
        for c in col..=m {
            a[col][c] = a[col][c].clone() / p.clone();
        }
        for r in 0..m {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let f = a[r][col].clone();
            for c in col..=m {
                let sub = f.clone() * a[col][c].clone();
                a[r][c] = a[r][c].clone() - sub;
            }
        }
    }
    Ok(a.into_iter().map(|row| row[m].clone()).collect())
}

/// Value of a stationary deterministic policy.
pub fn policy_evaluation<S, A, T>(
    mdp: &FiniteMdp<S, A>,
    policy: &[usize],
    lambda: &BigRational,
) -> Result<Vec<T>, SolverError>
where
    S: Clone + Eq + Hash,
    A: Clone + PartialEq,
    T: Scalar,
{
    check_discount(lambda)?;
    mdp.check_policy(policy)?;
    let rows: Vec<_> = policy.iter().enumerate().map(|(s, &a)| mdp.rows[s][a].transitions.clone()).collect();
    let rewards: Vec<_> = policy.iter().enumerate().map(|(s, &a)| mdp.rows[s][a].reward.clone()).collect();
    solve_chain(&rows, &rewards, lambda)
}

pub fn policy_evaluation_exact<S, A>(
    mdp: &FiniteMdp<S, A>,
    policy: &[usize],
    lambda: &BigRational,
) -> Result<Vec<BigRational>, SolverError>
where
    S: Clone + Eq + Hash,
    A: Clone + PartialEq,
{
    policy_evaluation(mdp, policy, lambda)
}

pub fn policy_evaluation_float<S, A>(
    mdp: &FiniteMdp<S, A>,
    policy: &[usize],
    lambda: &BigRational,
) -> Result<Vec<f64>, SolverError>
where
    S: Clone + Eq + Hash,
    A: Clone + PartialEq,
{
    policy_evaluation(mdp, policy, lambda)
}

/// Values of a periodic policy `policies[t mod p]`, computed on the state space
/// extended by the phase. Entry `[t][s]` is the value at state s in phase t.
pub fn periodic_policy_evaluation<S, A, T>(
    mdp: &FiniteMdp<S, A>,
    policies: &[Vec<usize>],
    lambda: &BigRational,
) -> Result<Vec<Vec<T>>, SolverError>
where
    S: Clone + Eq + Hash,
    A: Clone + PartialEq,
    T: Scalar,
{
    check_discount(lambda)?;
    let p = policies.len();
    let n = mdp.len();
    let mut rows = Vec::with_capacity(n * p);
    let mut rewards = Vec::with_capacity(n * p);
    for (t, pol) in policies.iter().enumerate() {
        mdp.check_policy(pol)?;
        let next = (t + 1) % p;
        for s in 0..n {
            let r = &mdp.rows[s][pol[s]];
            rows.push(r.transitions.iter().map(|(to, q)| (next * n + to, q.clone())).collect());
            rewards.push(r.reward.clone());
        }
    }
    let v: Vec<T> = solve_chain(&rows, &rewards, lambda)?;
    Ok(v.chunks(n).map(|c| c.to_vec()).collect())
}

/// Greedy policy: first action (in row order) within the tie slack of the best value.
pub fn greedy_policy<S, A, T: Scalar>(mdp: &FiniteMdp<S, A>, lambda: &T, v: &[T]) -> Vec<usize> {
    (0..v.len())
        .map(|s| {
            let q: Vec<T> = (0..mdp.rows[s].len()).map(|a| q_value(mdp, lambda, s, a, v)).collect();
            let best = q.iter().cloned().fold(q[0].clone(), |m, x| if x > m { x } else { m });
            let slack = best.tie_slack();
            q.iter().position(|x| x.clone() + slack.clone() >= best).unwrap()
        })
        .collect()
}

/// All actions attaining the exact maximum of the lookahead at each state.
pub fn optimal_action_sets<S, A>(mdp: &FiniteMdp<S, A>, lambda: &BigRational, v: &[BigRational]) -> Vec<Vec<usize>> {
    (0..v.len())
        .map(|s| {
            let q: Vec<BigRational> = (0..mdp.rows[s].len()).map(|a| q_value(mdp, lambda, s, a, v)).collect();
            let best = q.iter().max().unwrap().clone();
            (0..q.len()).filter(|&a| q[a] == best).collect()
        })
        .collect()
}

/// sup_s | max_a Q(s,a) - v(s) |
pub fn bellman_residual<S, A, T: Scalar>(mdp: &FiniteMdp<S, A>, lambda: &T, v: &[T]) -> T {
    let mut worst = T::zero();
    for s in 0..v.len() {
        let best = (0..mdp.rows[s].len())
            .map(|a| q_value(mdp, lambda, s, a, v))
            .fold(None, |m: Option<T>, x| match m {
                Some(m) if m >= x => Some(m),
                _ => Some(x),
            })
            .unwrap();
        let d = best.abs_diff(&v[s]);
        if d > worst {
            worst = d;
        }
    }
    worst
}

/// Evaluates the policy in floating point and checks its Bellman residual.
pub fn is_optimal<S, A>(mdp: &FiniteMdp<S, A>, policy: &[usize], lambda: &BigRational, tol: f64) -> Result<bool, SolverError>
where
    S: Clone + Eq + Hash,
    A: Clone + PartialEq,
{
    let v: Vec<f64> = policy_evaluation(mdp, policy, lambda)?;
    let lam = f64::from_rational(lambda);
    Ok(bellman_residual(mdp, &lam, &v) <= tol)
}

/// Exact version: the policy's value satisfies the optimality equations exactly.
pub fn is_optimal_exact<S, A>(mdp: &FiniteMdp<S, A>, policy: &[usize], lambda: &BigRational) -> Result<bool, SolverError>
where
    S: Clone + Eq + Hash,
    A: Clone + PartialEq,
{
    let v: Vec<BigRational> = policy_evaluation(mdp, policy, lambda)?;
    Ok(bellman_residual(mdp, lambda, &v).is_zero())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIterationResult {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub sweeps: usize,
}

/// Sup-norm value iteration from zero; stops once successive iterates differ by
/// at most tol (1 - lambda) / (2 lambda), which makes the greedy policy tol-optimal.
pub fn value_iteration<S, A>(
    mdp: &FiniteMdp<S, A>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ValueIterationResult, SolverError> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(SolverError::BadDiscount);
    }
    let threshold = tol * (1.0 - lambda) / (2.0 * lambda);
    let n = mdp.rows.len();
    let mut v = vec![0.0; n];
    for sweep in 1..=max_iter {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..mdp.rows[s].len())
                    .map(|a| q_value(mdp, &lambda, s, a, &v))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff <= threshold {
            let policy = greedy_policy(mdp, &lambda, &v);
            return Ok(ValueIterationResult { values: v, policy, sweeps: sweep });
        }
    }
    Err(SolverError::MaxIterExceeded(max_iter))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactSolution {
    pub values: Vec<BigRational>,
    /// Lowest-order optimal action per state.
    pub policy: Vec<usize>,
    /// Every exactly optimal action per state.
    pub optimal_sets: Vec<Vec<usize>>,
}

/// Optimal values in exact arithmetic: value iteration seeds a policy which is
/// then improved by exact policy iteration until no action is strictly better.
pub fn solve_exact<S, A>(mdp: &FiniteMdp<S, A>, lambda: &BigRational) -> Result<ExactSolution, SolverError>
where
    S: Clone + Eq + Hash,
    A: Clone + PartialEq,
{
    check_discount(lambda)?;
    let lf = f64::from_rational(lambda);
    let vi = value_iteration(mdp, lf, 1e-9, 1_000_000)?;
    let mut policy = vi.policy;
    loop {
        let v: Vec<BigRational> = policy_evaluation(mdp, &policy, lambda)?;
        let mut changed = false;
        for s in 0..policy.len() {
            let cur = q_value(mdp, lambda, s, policy[s], &v);
            let mut best = (policy[s], cur);
            for a in 0..mdp.rows[s].len() {
                let q = q_value(mdp, lambda, s, a, &v);
                if q > best.1 {
                    best = (a, q);
                }
            }
            if best.0 != policy[s] {
                policy[s] = best.0;
                changed = true;
            }
        }
        if !changed {
            let optimal_sets = optimal_action_sets(mdp, lambda, &v);
            let policy = optimal_sets.iter().map(|set| set[0]).collect();
            return Ok(ExactSolution { values: v, policy, optimal_sets });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HittingEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn sample_row<R: Rng + ?Sized>(cum: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    cum.iter().find(|(_, c)| u < *c).map(|(t, _)| *t).unwrap_or(cum.last().unwrap().0)
}

/// Monte Carlo value estimates for an indicator reward at `target`:
/// v(s) = E[lambda^tau(s -> target)] / (1 - E[lambda^tau_return(target)]).
/// When the target is absorbing under the policy the denominator is 1 - lambda exactly.
pub fn value_from_hitting_times<S, A, R>(
    mdp: &FiniteMdp<S, A>,
    policy: &[usize],
    target: usize,
    lambda: f64,
    reps: u64,
    starts: &[usize],
    rng: &mut R,
) -> Result<Vec<HittingEstimate>, SolverError>
where
    S: Clone + Eq + Hash,
    A: Clone + PartialEq,
    R: Rng + ?Sized,
{
    mdp.check_policy(policy)?;
    let cum: Vec<Vec<(usize, f64)>> = policy
        .iter()
        .enumerate()
        .map(|(s, &a)| {
            let mut acc = 0.0;
            mdp.rows[s][a]
                .transitions
                .iter()
                .map(|(t, p)| {
                    acc += p.to_f64().unwrap();
                    (*t, acc)
                })
                .collect()
        })
        .collect();
    let stuck = |s: usize| cum[s].len() == 1 && cum[s][0].0 == s;
    let floor = 1e-18;
    // discounted first passage from s (return time when s == target)
    let discounted = |start: usize, rng: &mut R| -> f64 {
        let mut s = start;
        let mut w = 1.0;
        if start == target {
            s = sample_row(&cum[s], rng);
            w = lambda;
        }
        while s != target {
            if stuck(s) || w < floor {
                return 0.0;
            }
            s = sample_row(&cum[s], rng);
            w *= lambda;
        }
        w
    };
    let moments = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len().max(2) - 1) as f64;
        (m, (var / xs.len() as f64).sqrt())
    };
    let (ret, ret_se) = if stuck(target) {
        (lambda, 0.0)
    } else {
        let xs: Vec<f64> = (0..reps).map(|_| discounted(target, rng)).collect();
        moments(&xs)
    };
    let denom = 1.0 - ret;
    let mut out = Vec::with_capacity(starts.len());
    for &s in starts {
        let (num, num_se) = if s == target {
            (1.0, 0.0)
        } else {
            let xs: Vec<f64> = (0..reps).map(|_| discounted(s, rng)).collect();
            moments(&xs)
        };
        let value = num / denom;
        let std_error = ((num_se / denom).powi(2) + (num * ret_se / (denom * denom)).powi(2)).sqrt();
        out.push(HittingEstimate { value, std_error });
    }
    Ok(out)
}

pub fn rational(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}
