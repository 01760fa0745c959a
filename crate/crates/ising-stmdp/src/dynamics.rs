//! Metropolis dynamics, the zero-temperature limit, susceptibility and
//! exact enumeration of closed downhill paths.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Display;
use std::io;
use std::rc::Rc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::lattice::{
    circumscribed_rectangle, delta_energy_flip, Configuration, LatticeError, ModelParams, TorusCoord,
};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("downhill enumeration exceeded the cap of {0} memoised states")]
    StateExplosion(usize),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Susceptibility for 0 < h < 1 in terms of the spin and its neighbour sum.
/// A plus spin needs at least three minus neighbours, a minus spin at least two plus neighbours.
pub fn susceptible_by_count(spin: i8, neighbor_sum: i32) -> bool {
    if spin == 1 {
        neighbor_sum < 0
    } else {
        neighbor_sum >= 0
    }
}

/// Spins whose flip strictly lowers the energy, in row-major order.
pub fn susceptible_set(config: &Configuration, h: f64) -> Vec<TorusCoord> {
    config.coords().filter(|&c| delta_energy_flip(config, c, h) < 0.0).collect()
}

/// Field-free variant using the neighbour-count rule; agrees with `susceptible_set` for any h in (0,1).
pub fn susceptible_spins(config: &Configuration) -> Vec<TorusCoord> {
    config
        .coords()
        .filter(|&c| susceptible_by_count(config.get(c), config.neighbor_sum(c)))
        .collect()
}

pub fn is_robust(config: &Configuration) -> bool {
    config.coords().all(|c| !susceptible_by_count(config.get(c), config.neighbor_sum(c)))
}

/// True iff the plus spins are nonempty and 4-connected on the torus.
pub fn is_single_cluster(config: &Configuration) -> bool {
    let Some(start) = config.coords().find(|&c| config.get(c) == 1) else {
        return false;
    };
    let mut seen = vec![false; config.n() * config.n()];
    seen[config.index(start)] = true;
    let mut queue = VecDeque::from([start]);
    let mut count = 1;
    while let Some(c) = queue.pop_front() {
        for q in config.neighbors(c) {
            let i = config.index(q);
            if config.get(q) == 1 && !seen[i] {
                seen[i] = true;
                count += 1;
                queue.push_back(q);
            }
        }
    }
    count == config.plus_count()
}

/// Rectangle dimensions (width, height) if the configuration is a robust single cluster.
pub fn is_u1(config: &Configuration) -> Option<(usize, usize)> {
    if !is_robust(config) || !is_single_cluster(config) {
        return None;
    }
    match circumscribed_rectangle(config) {
        Ok(Some(r)) => Some((r.width, r.height)),
        _ => None,
    }
}

/// One Metropolis step: propose a uniform spin, accept with min(1, exp(-beta dH)).
/// Returns the flipped spin, if any.
pub fn metropolis_step<R: Rng + ?Sized>(
    config: &mut Configuration,
    params: &ModelParams,
    rng: &mut R,
) -> Option<TorusCoord> {
    let n = config.n();
    let c = config.coord(rng.gen_range(0..n * n));
    let dh = delta_energy_flip(config, c, params.h);
    if dh <= 0.0 || rng.gen::<f64>() < (-params.beta * dh).exp() {
        config.flip(c);
        Some(c)
    } else {
        None
    }
}

/// Zero-temperature step: a uniformly proposed spin flips only if susceptible.
pub fn low_temp_step<R: Rng + ?Sized>(config: &mut Configuration, rng: &mut R) -> Option<TorusCoord> {
    let n = config.n();
    let c = config.coord(rng.gen_range(0..n * n));
    if susceptible_by_count(config.get(c), config.neighbor_sum(c)) {
        config.flip(c);
        Some(c)
    } else {
        None
    }
}

/// Metropolis sampler with a precomputed acceptance table, for long runs.
#[derive(Clone, Debug)]
pub struct MetropolisSampler {
    // accept[s][k]: s = 0 for a minus spin, 1 for plus; k = (neighbour sum + 4) / 2
    accept: [[f64; 5]; 2],
}

impl MetropolisSampler {
    pub fn new(params: &ModelParams) -> Self {
        let mut accept = [[0.0; 5]; 2];
        for (si, s) in [-1.0f64, 1.0].into_iter().enumerate() {
            for k in 0..5 {
                let nb = 2.0 * k as f64 - 4.0;
                let dh = 2.0 * s * (nb + params.h);
                accept[si][k] = if dh <= 0.0 { 1.0 } else { (-params.beta * dh).exp() };
            }
        }
        MetropolisSampler { accept }
    }

    pub fn step<R: Rng + ?Sized>(&self, config: &mut Configuration, rng: &mut R) -> bool {
        let n = config.n();
        let c = config.coord(rng.gen_range(0..n * n));
        let s = config.get(c);
        let k = ((config.neighbor_sum(c) + 4) / 2) as usize;
        let a = self.accept[usize::from(s == 1)][k];
        if a >= 1.0 || rng.gen::<f64>() < a {
            config.flip(c);
            true
        } else {
            false
        }
    }

    pub fn run<R: Rng + ?Sized>(&self, config: &mut Configuration, steps: u64, rng: &mut R) {
        for _ in 0..steps {
            self.step(config, rng);
        }
    }
}

/// Runs `kappa` zero-temperature steps. Rejected proposals are skipped in bulk by
/// drawing the geometric waiting time to the next susceptible proposal, which gives
/// the same law as stepping one proposal at a time.
pub fn low_temp_evolve<R: Rng + ?Sized>(config: &mut Configuration, kappa: u64, rng: &mut R) {
    let cells = (config.n() * config.n()) as f64;
    let mut elapsed: u64 = 0;
    loop {
        let sus = susceptible_spins(config);
        if sus.is_empty() {
            return;
        }
        let p = sus.len() as f64 / cells;
        let wait = if p >= 1.0 {
            1
        } else {
            let u = 1.0 - rng.gen::<f64>();
            1 + (u.ln() / (1.0 - p).ln()).floor() as u64
        };
        if elapsed.saturating_add(wait) > kappa {
            return;
        }
        elapsed += wait;
        let c = sus[rng.gen_range(0..sus.len())];
        config.flip(c);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dynamics {
    ZeroTemperature,
    Metropolis(ModelParams),
}

/// Empirical terminal law of kappa-step runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QKappaEstimate {
    pub reps: u64,
    pub robust: u64,
    /// Counts of robust terminal configurations.
    pub counts: BTreeMap<Configuration, u64>,
}

impl QKappaEstimate {
    pub fn robust_fraction(&self) -> f64 {
        self.robust as f64 / self.reps as f64
    }

    /// Terminal distribution conditioned on robustness; empty when nothing was robust.
    pub fn conditional(&self) -> BTreeMap<Configuration, f64> {
        if self.robust == 0 {
            return BTreeMap::new();
        }
        self.counts
            .iter()
            .map(|(c, &k)| (c.clone(), k as f64 / self.robust as f64))
            .collect()
    }

    pub fn no_robust_hits(&self) -> bool {
        self.robust == 0
    }
}

/// Runs `reps` independent kappa-step trajectories from `config`; replication r uses stream r of `seed`.
pub fn estimate_q_kappa(
    config: &Configuration,
    dynamics: Dynamics,
    kappa: u64,
    reps: u64,
    seed: u64,
) -> QKappaEstimate {
    let finals: Vec<Configuration> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            let mut c = config.clone();
            match dynamics {
                Dynamics::ZeroTemperature => low_temp_evolve(&mut c, kappa, &mut rng),
                Dynamics::Metropolis(p) => MetropolisSampler::new(&p).run(&mut c, kappa, &mut rng),
            }
            c
        })
        .collect();
    let mut est = QKappaEstimate { reps, ..Default::default() };
    for c in finals {
        if is_robust(&c) {
            est.robust += 1;
            *est.counts.entry(c).or_insert(0) += 1;
        }
    }
    est
}

/// Sparse distribution with exact rational weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactDistribution<K: Ord> {
    probs: BTreeMap<K, BigRational>,
}

impl<K: Ord> Default for ExactDistribution<K> {
    fn default() -> Self {
        ExactDistribution { probs: BTreeMap::new() }
    }
}

impl<K: Ord> ExactDistribution<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn point(k: K) -> Self {
        let mut d = Self::new();
        d.add(k, BigRational::one());
        d
    }

    pub fn add(&mut self, k: K, p: BigRational) {
        let e = self.probs.entry(k).or_insert_with(BigRational::zero);
        *e += p;
    }

    pub fn get(&self, k: &K) -> BigRational {
        self.probs.get(k).cloned().unwrap_or_else(BigRational::zero)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, &BigRational)> {
        self.probs.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.probs.keys()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> BigRational {
        self.probs.values().fold(BigRational::zero(), |a, b| a + b)
    }

    /// All weights in (0,1] and summing to exactly one.
    pub fn is_normalized(&self) -> bool {
        let one = BigRational::one();
        self.probs.values().all(|p| p > &BigRational::zero() && p <= &one) && self.total() == one
    }

    /// Pushes the distribution forward through `f`, merging colliding keys.
    pub fn map_keys<K2: Ord>(&self, mut f: impl FnMut(&K) -> K2) -> ExactDistribution<K2> {
        let mut out = ExactDistribution::new();
        for (k, p) in &self.probs {
            out.add(f(k), p.clone());
        }
        out
    }

    pub fn into_map(self) -> BTreeMap<K, BigRational> {
        self.probs
    }
}

impl<K: Ord> FromIterator<(K, BigRational)> for ExactDistribution<K> {
    fn from_iter<T: IntoIterator<Item = (K, BigRational)>>(iter: T) -> Self {
        let mut d = Self::new();
        for (k, p) in iter {
            d.add(k, p);
        }
        d
    }
}

impl<K: Ord + Display> ExactDistribution<K> {
    /// CSV with header "state,probability_numerator,probability_denominator".
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "probability_numerator", "probability_denominator"])?;
        for (k, p) in &self.probs {
            w.write_record([k.to_string(), p.numer().to_string(), p.denom().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

type Bits = Box<[u64]>;
type Endpoints = Rc<Vec<(usize, BigRational)>>;

/// Memoised evaluation of the robust-endpoint law of zero-temperature dynamics.
///
/// p(s) is a point mass when s is robust and otherwise the mean of p over the
/// configurations reached by flipping one susceptible spin. When every
/// susceptible spin has the same sign the remaining evolution is monotone and
/// its endpoint does not depend on the order of flips, so such states are
/// resolved directly (this can be switched off).
pub struct DownhillEnumerator {
    n: usize,
    neighbors: Vec<[usize; 4]>,
    memo: HashMap<Bits, Endpoints>,
    endpoints: Vec<Bits>,
    endpoint_ids: HashMap<Bits, usize>,
    cap: usize,
    monotone_shortcut: bool,
}

pub const DEFAULT_STATE_CAP: usize = 2_000_000;

fn bit(bits: &[u64], i: usize) -> bool {
    bits[i / 64] >> (i % 64) & 1 == 1
}

fn toggle(bits: &mut [u64], i: usize) {
    bits[i / 64] ^= 1 << (i % 64);
}

impl DownhillEnumerator {
    pub fn new(n: usize, cap: usize) -> Self {
        let neighbors = (0..n * n)
            .map(|i| {
                let (x, y) = (i % n, i / n);
                [
                    y * n + (x + n - 1) % n,
                    y * n + (x + 1) % n,
                    ((y + n - 1) % n) * n + x,
                    ((y + 1) % n) * n + x,
                ]
            })
            .collect();
        DownhillEnumerator {
            n,
            neighbors,
            memo: HashMap::new(),
            endpoints: Vec::new(),
            endpoint_ids: HashMap::new(),
            cap,
            monotone_shortcut: true,
        }
    }

    pub fn with_monotone_shortcut(mut self, on: bool) -> Self {
        self.monotone_shortcut = on;
        self
    }

    pub fn memo_len(&self) -> usize {
        self.memo.len()
    }

    fn susceptible(&self, bits: &[u64]) -> Vec<usize> {
        (0..self.n * self.n)
            .filter(|&i| {
                let plus_nb = self.neighbors[i].iter().filter(|&&j| bit(bits, j)).count();
                if bit(bits, i) {
                    plus_nb <= 1
                } else {
                    plus_nb >= 2
                }
            })
            .collect()
    }

    fn endpoint_id(&mut self, bits: Bits) -> usize {
        if let Some(&id) = self.endpoint_ids.get(&bits) {
            return id;
        }
        let id = self.endpoints.len();
        self.endpoints.push(bits.clone());
        self.endpoint_ids.insert(bits, id);
        id
    }

    /// Flips susceptible spins until none is left; only valid when all have one sign.
    fn monotone_closure(&self, bits: &[u64]) -> Bits {
        let mut b: Bits = bits.into();
        loop {
            let sus = self.susceptible(&b);
            if sus.is_empty() {
                return b;
            }
            for i in sus {
                toggle(&mut b, i);
            }
        }
    }

    fn solve(&mut self, bits: &[u64]) -> Result<Endpoints, DynamicsError> {
        if let Some(d) = self.memo.get(bits) {
            return Ok(d.clone());
        }
        if self.memo.len() >= self.cap {
            return Err(DynamicsError::StateExplosion(self.cap));
        }
        let sus = self.susceptible(bits);
        let result: Endpoints = if sus.is_empty() {
            Rc::new(vec![(self.endpoint_id(bits.into()), BigRational::one())])
        } else if self.monotone_shortcut && sus.iter().all(|&i| bit(bits, i) == bit(bits, sus[0])) {
            let end = self.monotone_closure(bits);
            Rc::new(vec![(self.endpoint_id(end), BigRational::one())])
        } else {
            let mut acc: BTreeMap<usize, BigRational> = BTreeMap::new();
            let mut child: Bits = bits.into();
            for &i in &sus {
                toggle(&mut child, i);
                let d = self.solve(&child)?;
                toggle(&mut child, i);
                for (e, p) in d.iter() {
                    *acc.entry(*e).or_insert_with(BigRational::zero) += p;
                }
            }
            let k = BigRational::from_integer(BigInt::from(sus.len()));
            Rc::new(acc.into_iter().map(|(e, p)| (e, p / &k)).collect())
        };
        self.memo.insert(bits.into(), result.clone());
        Ok(result)
    }

    /// Exact robust-endpoint distribution from `config`.
    pub fn endpoint_distribution(
        &mut self,
        config: &Configuration,
    ) -> Result<ExactDistribution<Configuration>, DynamicsError> {
        assert_eq!(config.n(), self.n, "enumerator built for a different lattice side");
        let d = self.solve(&config.plus_bits())?;
        let mut out = ExactDistribution::new();
        for (e, p) in d.iter() {
            out.add(Configuration::from_plus_bits(self.n, &self.endpoints[*e])?, p.clone());
        }
        Ok(out)
    }

    /// Checks p(s) = mean over susceptible flips of p(s') for every memoised
    /// state whose children are all memoised too. Returns the number checked.
    pub fn check_recursion_identity(&self) -> Result<usize, String> {
        let mut checked = 0;
        for (bits, d) in &self.memo {
            let sus = self.susceptible(bits);
            if sus.is_empty() {
                continue;
            }
            let mut children = Vec::new();
            let mut child = bits.clone();
            for &i in &sus {
                toggle(&mut child, i);
                match self.memo.get(&child) {
                    Some(cd) => children.push(cd.clone()),
                    None => break,
                }
                toggle(&mut child, i);
            }
            if children.len() != sus.len() {
                continue;
            }
            let mut acc: BTreeMap<usize, BigRational> = BTreeMap::new();
            for cd in &children {
                for (e, p) in cd.iter() {
                    *acc.entry(*e).or_insert_with(BigRational::zero) += p;
                }
            }
            let k = BigRational::from_integer(BigInt::from(sus.len()));
            let mean: Vec<(usize, BigRational)> = acc.into_iter().map(|(e, p)| (e, p / &k)).collect();
            if mean != **d {
                return Err(format!("recursion identity fails for a state with {} susceptible spins", sus.len()));
            }
            checked += 1;
        }
        Ok(checked)
    }
}

/// Convenience wrapper around a fresh [`DownhillEnumerator`].
pub fn downhill_endpoint_distribution(
    config: &Configuration,
    cap: usize,
) -> Result<ExactDistribution<Configuration>, DynamicsError> {
    DownhillEnumerator::new(config.n(), cap).endpoint_distribution(config)
}

/// One sampled closed downhill path.
#[derive(Clone, Debug, PartialEq)]
pub struct DownhillTrace {
    pub flips: Vec<TorusCoord>,
    /// Product of 1/|susceptible set| along the path.
    pub probability: BigRational,
    pub endpoint: Configuration,
}

/// Follows uniformly chosen susceptible flips until a robust configuration is reached.
pub fn sample_downhill_trace<R: Rng + ?Sized>(config: &Configuration, rng: &mut R) -> DownhillTrace {
    let mut c = config.clone();
    let mut flips = Vec::new();
    let mut probability = BigRational::one();
    loop {
        let sus = susceptible_spins(&c);
        if sus.is_empty() {
            break;
        }
        probability /= BigRational::from_integer(BigInt::from(sus.len()));
        let s = sus[rng.gen_range(0..sus.len())];
        c.flip(s);
        flips.push(s);
    }
    DownhillTrace { flips, probability, endpoint: c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{energy, Rect};
    use crate::rng::stream_rng;

    fn c(x: usize, y: usize) -> TorusCoord {
        TorusCoord::new(x, y)
    }

    fn rect(n: usize, w: usize, h: usize, x: usize, y: usize) -> Configuration {
        Configuration::with_rectangle(n, Rect::new(w, h, c(x, y))).unwrap()
    }

    #[test]
    fn susceptible_examples() {
        assert!(susceptible_set(&Configuration::all_plus(8).unwrap(), 0.5).is_empty());
        let mut single = Configuration::all_minus(8).unwrap();
        single.set(c(3, 3), 1);
        assert_eq!(susceptible_set(&single, 0.5), vec![c(3, 3)]);
        // a 3x3 block with one extra spin on top: the spin itself and its two row neighbours
        let mut bump = rect(10, 3, 3, 2, 2);
        bump.set(c(3, 5), 1);
        assert_eq!(susceptible_set(&bump, 0.3), vec![c(2, 5), c(3, 5), c(4, 5)]);
        assert_eq!(susceptible_spins(&bump), susceptible_set(&bump, 0.3));
    }

    #[test]
    fn robustness_examples() {
        let r = rect(10, 3, 4, 1, 1);
        assert!(is_robust(&r));
        assert_eq!(is_u1(&r), Some((3, 4)));
        assert!(!is_robust(&rect(10, 1, 5, 1, 1)));
        assert!(!is_robust(&rect(10, 9, 3, 0, 0)));
        assert_eq!(is_u1(&rect(10, 10, 3, 0, 0)), Some((10, 3)));
        assert_eq!(is_u1(&Configuration::all_plus(10).unwrap()), Some((10, 10)));
        assert_eq!(is_u1(&Configuration::all_minus(10).unwrap()), None);
        let two = Configuration::from_fn(10, |p| (p.x < 2 && p.y < 2) || (p.x >= 5 && p.x < 7 && p.y < 2)).unwrap();
        assert!(is_robust(&two));
        assert_eq!(is_u1(&two), None);
    }

    #[test]
    fn metropolis_all_minus_acceptance() {
        let p = ModelParams::new(0.5, 1.0).unwrap();
        let cfg = Configuration::all_minus(3).unwrap();
        assert_eq!(delta_energy_flip(&cfg, c(0, 0), 0.5), 7.0);
        let mut rng = stream_rng(3, 0);
        let trials = 200_000;
        let mut hits = 0;
        for _ in 0..trials {
            let mut x = cfg.clone();
            if metropolis_step(&mut x, &p, &mut rng).is_some() {
                hits += 1;
            }
        }
        let q = (-7.0f64).exp();
        let se = (q * (1.0 - q) / trials as f64).sqrt();
        assert!(((hits as f64 / trials as f64) - q).abs() < 4.0 * se);
    }

    #[test]
    fn sampler_matches_direct_step_law() {
        let p = ModelParams::new(0.4, 0.8).unwrap();
        let cfg = Configuration::from_fn(4, |q| (q.x + q.y) % 3 == 0).unwrap();
        let s = MetropolisSampler::new(&p);
        let mut rng = stream_rng(11, 0);
        let trials = 1_000_000u64;
        let mut freq = [0u64; 16];
        for _ in 0..trials {
            let mut x = cfg.clone();
            s.step(&mut x, &mut rng);
            if let Some(i) = (0..16).find(|&i| x.spins()[i] != cfg.spins()[i]) {
                freq[i] += 1;
            }
        }
        for i in 0..16 {
            let dh = delta_energy_flip(&cfg, cfg.coord(i), p.h);
            let q = (1.0f64).min((-p.beta * dh).exp()) / 16.0;
            let se = (q * (1.0 - q) / trials as f64).sqrt();
            assert!((freq[i] as f64 / trials as f64 - q).abs() < 3.0 * se, "spin {i}");
        }
    }

    #[test]
    fn zero_temperature_never_raises_energy() {
        let mut rng = stream_rng(5, 0);
        let mut cfg = Configuration::from_fn(8, |q| (q.x * 7 + q.y * 3) % 5 < 2).unwrap();
        for _ in 0..2000 {
            let before = energy(&cfg, 0.5);
            low_temp_step(&mut cfg, &mut rng);
            assert!(energy(&cfg, 0.5) <= before);
        }
    }

    #[test]
    fn robust_input_is_point_mass() {
        let r = rect(8, 3, 3, 1, 1);
        let d = downhill_endpoint_distribution(&r, 1000).unwrap();
        assert_eq!(d, ExactDistribution::point(r));
    }

    #[test]
    fn distance_two_flip_on_long_side() {
        // 4 wide, 3 tall block; spin two rows above the middle of the top side
        let n = 12;
        let mut cfg = rect(n, 4, 3, 2, 2);
        cfg.set(c(3, 6), 1);
        let d = downhill_endpoint_distribution(&cfg, 100_000).unwrap();
        assert!(d.is_normalized());
        let heights = d.map_keys(|e| is_u1(e).unwrap());
        assert_eq!(heights.get(&(4, 3)), ratio(5, 9));
        assert_eq!(heights.get(&(4, 4)), ratio(7, 27));
        assert_eq!(heights.get(&(4, 5)), ratio(5, 27));
    }

    #[test]
    fn distance_one_flip_on_long_side() {
        let n = 12;
        let mut cfg = rect(n, 4, 3, 2, 2);
        cfg.set(c(3, 5), 1);
        let d = downhill_endpoint_distribution(&cfg, 100_000).unwrap();
        let sizes = d.map_keys(|e| is_u1(e).unwrap());
        assert_eq!(sizes.get(&(4, 3)), ratio(1, 3));
        assert_eq!(sizes.get(&(4, 4)), ratio(2, 3));
    }

    #[test]
    fn shortcut_agrees_with_full_recursion() {
        let mut rng = stream_rng(17, 0);
        let mut explosions = 0;
        for t in 0..30 {
            let n = 6;
            let (w, h) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let mut cfg = rect(n, w, h, 1, 1);
            for _ in 0..rng.gen_range(1..=3) {
                cfg.flip(c(rng.gen_range(0..n), rng.gen_range(0..n)));
            }
            let mut fast = DownhillEnumerator::new(n, 200_000);
            let mut slow = DownhillEnumerator::new(n, 200_000).with_monotone_shortcut(false);
            let a = fast.endpoint_distribution(&cfg);
            let b = slow.endpoint_distribution(&cfg);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a, b, "case {t}");
                    assert!(a.is_normalized());
                    assert!(a.keys().all(is_robust));
                    assert!(slow.check_recursion_identity().unwrap() > 0 || is_robust(&cfg));
                }
                (_, Err(DynamicsError::StateExplosion(_))) => explosions += 1,
                (a, b) => panic!("case {t}: {:?} vs {:?}", a.is_ok(), b.is_ok()),
            }
        }
        assert!(explosions < 10);
    }

    #[test]
    fn state_cap_is_reported() {
        let mut cfg = rect(12, 6, 6, 0, 0);
        cfg.set(c(2, 7), 1);
        assert!(matches!(
            downhill_endpoint_distribution(&cfg, 3),
            Err(DynamicsError::StateExplosion(3))
        ));
    }

    #[test]
    fn traces_descend_and_end_robust() {
        let mut rng = stream_rng(23, 0);
        let mut cfg = rect(10, 4, 3, 2, 2);
        cfg.set(c(3, 6), 1);
        for _ in 0..50 {
            let t = sample_downhill_trace(&cfg, &mut rng);
            let mut x = cfg.clone();
            for &f in &t.flips {
                let before = energy(&x, 0.5);
                x.flip(f);
                assert!(energy(&x, 0.5) < before);
            }
            assert_eq!(x, t.endpoint);
            assert!(is_robust(&t.endpoint));
            assert!(t.probability > BigRational::zero());
        }
    }

    #[test]
    fn q_kappa_trivial_and_converging() {
        let r = rect(8, 3, 3, 1, 1);
        let est = estimate_q_kappa(&r, Dynamics::ZeroTemperature, 0, 10, 1);
        assert_eq!(est.robust_fraction(), 1.0);
        assert_eq!(est.counts.len(), 1);

        let mut cfg = rect(8, 3, 3, 1, 1);
        cfg.set(c(2, 4), 1);
        let short = estimate_q_kappa(&cfg, Dynamics::ZeroTemperature, 5, 2000, 9);
        let long = estimate_q_kappa(&cfg, Dynamics::ZeroTemperature, 640, 2000, 9);
        assert!(short.robust_fraction() <= long.robust_fraction());
        assert!(long.robust_fraction() > 0.99);
        let empty = estimate_q_kappa(&cfg, Dynamics::ZeroTemperature, 0, 5, 1);
        assert!(empty.no_robust_hits() && empty.conditional().is_empty());
    }

    #[test]
    fn distribution_csv() {
        let d: ExactDistribution<String> =
            [("a".to_string(), ratio(1, 3)), ("b".to_string(), ratio(2, 3))].into_iter().collect();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "state,probability_numerator,probability_denominator\na,1,3\nb,2,3\n"
        );
    }
}
