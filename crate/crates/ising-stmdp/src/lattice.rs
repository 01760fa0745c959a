//! Torus geometry, spin configurations, energies and the geometric
//! classification of plus spins.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::ops::Sub;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("lattice side {got} is below the minimum of {min}")]
    TooSmall { got: usize, min: usize },
    #[error("lattice side {0} is too large for exhaustive summation (at most 4)")]
    TooLarge(usize),
    #[error("expected {expected} spins, got {got}")]
    SpinCount { expected: usize, got: usize },
    #[error("spin value {0} is not -1 or +1")]
    BadSpin(i8),
    #[error("external field h = {0} must lie in (0, 1)")]
    BadField(f64),
    #[error("inverse temperature beta = {0} must be positive")]
    BadBeta(f64),
    #[error("plus spins occupy every row and every column without filling the torus")]
    AmbiguousWrap,
    #[error("rectangle {width}x{height} does not fit on a torus of side {n}")]
    BadRect { width: usize, height: usize, n: usize },
    #[error("snapshot line {line}: {msg}")]
    Snapshot { line: usize, msg: String },
}

/// A vertex of the N x N torus. Ordered row-major (y first, then x).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TorusCoord {
    pub x: usize,
    pub y: usize,
}

impl TorusCoord {
    pub fn new(x: usize, y: usize) -> Self {
        TorusCoord { x, y }
    }

    /// Builds a coordinate from signed components, reducing modulo `n`.
    pub fn wrapped(x: i64, y: i64, n: usize) -> Self {
        let m = n as i64;
        TorusCoord {
            x: x.rem_euclid(m) as usize,
            y: y.rem_euclid(m) as usize,
        }
    }

    pub fn offset(self, dx: i64, dy: i64, n: usize) -> Self {
        Self::wrapped(self.x as i64 + dx, self.y as i64 + dy, n)
    }
}

impl PartialOrd for TorusCoord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TorusCoord {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl fmt::Display for TorusCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Horizontal,
    Vertical,
}

fn wrap_gap(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

/// Manhattan distance with the torus edge correction.
pub fn torus_distance(p: TorusCoord, q: TorusCoord, n: usize) -> usize {
    wrap_gap(p.x, q.x, n) + wrap_gap(p.y, q.y, n)
}

/// Distance along one axis; `None` (infinite) when the other coordinate differs.
pub fn directional_distance(p: TorusCoord, q: TorusCoord, n: usize, axis: Axis) -> Option<usize> {
    match axis {
        Axis::Horizontal if p.y == q.y => Some(wrap_gap(p.x, q.x, n)),
        Axis::Vertical if p.x == q.x => Some(wrap_gap(p.y, q.y, n)),
        _ => None,
    }
}

fn metric(p: TorusCoord, q: TorusCoord, n: usize, axis: Option<Axis>) -> Option<usize> {
    match axis {
        None => Some(torus_distance(p, q, n)),
        Some(a) => directional_distance(p, q, n, a),
    }
}

/// Distance from `p` to the nearest member of `set`, optionally restricted to one axis.
pub fn set_distance<'a, I>(p: TorusCoord, set: I, n: usize, axis: Option<Axis>) -> Option<usize>
where
    I: IntoIterator<Item = &'a TorusCoord>,
{
    set.into_iter().filter_map(|&q| metric(p, q, n, axis)).min()
}

/// All members of `set` attaining the minimal distance to `p` (empty if none is at finite distance).
pub fn nearest_in_set<'a, I>(p: TorusCoord, set: I, n: usize, axis: Option<Axis>) -> Vec<TorusCoord>
where
    I: IntoIterator<Item = &'a TorusCoord>,
{
    let mut best: Option<usize> = None;
    let mut out = Vec::new();
    for &q in set {
        let Some(d) = metric(p, q, n, axis) else { continue };
        match best {
            Some(b) if d > b => {}
            Some(b) if d == b => out.push(q),
            _ => {
                best = Some(d);
                out.clear();
                out.push(q);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub h: f64,
    pub beta: f64,
}

impl ModelParams {
    pub fn new(h: f64, beta: f64) -> Result<Self, LatticeError> {
        check_field(h)?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(LatticeError::BadBeta(beta));
        }
        Ok(ModelParams { h, beta })
    }
}

pub fn check_field(h: f64) -> Result<(), LatticeError> {
    if h > 0.0 && h < 1.0 {
        Ok(())
    } else {
        Err(LatticeError::BadField(h))
    }
}

/// Energy kept as integer sums: H = -coupling - h * magnetization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Energy {
    /// Sum of s_i s_j over unordered torus edges.
    pub coupling: i64,
    /// Sum of all spins.
    pub magnetization: i64,
}

impl Energy {
    pub fn value(&self, h: f64) -> f64 {
        -(self.coupling as f64) - h * self.magnetization as f64
    }
}

impl Sub for Energy {
    type Output = Energy;
    fn sub(self, rhs: Energy) -> Energy {
        Energy {
            coupling: self.coupling - rhs.coupling,
            magnetization: self.magnetization - rhs.magnetization,
        }
    }
}

/// A +-1 assignment on the N x N torus, stored row-major with row 0 first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Configuration {
    n: usize,
    spins: Vec<i8>,
}

impl Configuration {
    /// Smallest side for which the four neighbours of a vertex are distinct.
    pub const MIN_SIDE: usize = 3;

    pub fn filled(n: usize, spin: i8) -> Result<Self, LatticeError> {
        if n < Self::MIN_SIDE {
            return Err(LatticeError::TooSmall { got: n, min: Self::MIN_SIDE });
        }
        if spin != 1 && spin != -1 {
            return Err(LatticeError::BadSpin(spin));
        }
        Ok(Configuration { n, spins: vec![spin; n * n] })
    }

    pub fn all_minus(n: usize) -> Result<Self, LatticeError> {
        Self::filled(n, -1)
    }

    pub fn all_plus(n: usize) -> Result<Self, LatticeError> {
        Self::filled(n, 1)
    }

    pub fn from_spins(n: usize, spins: Vec<i8>) -> Result<Self, LatticeError> {
        if n < Self::MIN_SIDE {
            return Err(LatticeError::TooSmall { got: n, min: Self::MIN_SIDE });
        }
        if spins.len() != n * n {
            return Err(LatticeError::SpinCount { expected: n * n, got: spins.len() });
        }
        if let Some(&s) = spins.iter().find(|&&s| s != 1 && s != -1) {
            return Err(LatticeError::BadSpin(s));
        }
        Ok(Configuration { n, spins })
    }

    /// Plus rectangle of the given size on a minus background.
    pub fn with_rectangle(n: usize, rect: Rect) -> Result<Self, LatticeError> {
        if rect.width == 0 || rect.height == 0 || rect.width > n || rect.height > n {
            return Err(LatticeError::BadRect { width: rect.width, height: rect.height, n });
        }
        let mut c = Self::all_minus(n)?;
        for cell in rect.cells(n) {
            c.set(cell, 1);
        }
        Ok(c)
    }

    /// Builds a configuration from a predicate on coordinates (true means +1).
    pub fn from_fn(n: usize, f: impl Fn(TorusCoord) -> bool) -> Result<Self, LatticeError> {
        let mut c = Self::all_minus(n)?;
        for y in 0..n {
            for x in 0..n {
                if f(TorusCoord::new(x, y)) {
                    c.spins[y * n + x] = 1;
                }
            }
        }
        Ok(c)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn index(&self, c: TorusCoord) -> usize {
        c.y * self.n + c.x
    }

    pub fn coord(&self, idx: usize) -> TorusCoord {
        TorusCoord::new(idx % self.n, idx / self.n)
    }

    pub fn get(&self, c: TorusCoord) -> i8 {
        self.spins[c.y * self.n + c.x]
    }

    pub fn set(&mut self, c: TorusCoord, spin: i8) {
        debug_assert!(spin == 1 || spin == -1);
        let n = self.n;
        self.spins[c.y * n + c.x] = spin;
    }

    pub fn flip(&mut self, c: TorusCoord) {
        let n = self.n;
        self.spins[c.y * n + c.x] *= -1;
    }

    pub fn flipped(&self, c: TorusCoord) -> Self {
        let mut out = self.clone();
        out.flip(c);
        out
    }

    pub fn coords(&self) -> impl Iterator<Item = TorusCoord> + '_ {
        (0..self.n * self.n).map(move |i| self.coord(i))
    }

    /// Left, right, down, up.
    pub fn neighbors(&self, c: TorusCoord) -> [TorusCoord; 4] {
        let n = self.n;
        [c.offset(-1, 0, n), c.offset(1, 0, n), c.offset(0, -1, n), c.offset(0, 1, n)]
    }

    pub fn neighbor_sum(&self, c: TorusCoord) -> i32 {
        self.neighbors(c).iter().map(|&q| self.get(q) as i32).sum()
    }

    pub fn plus_count(&self) -> usize {
        self.spins.iter().filter(|&&s| s == 1).count()
    }

    pub fn plus_set(&self) -> BTreeSet<TorusCoord> {
        self.coords().filter(|&c| self.get(c) == 1).collect()
    }

    pub fn is_all_plus(&self) -> bool {
        self.spins.iter().all(|&s| s == 1)
    }

    pub fn is_all_minus(&self) -> bool {
        self.spins.iter().all(|&s| s == -1)
    }

    /// Bitset of plus spins, row-major.
    pub fn plus_bits(&self) -> Vec<u64> {
        let mut bits = vec![0u64; self.spins.len().div_ceil(64)];
        for (i, &s) in self.spins.iter().enumerate() {
            if s == 1 {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        bits
    }

    pub fn from_plus_bits(n: usize, bits: &[u64]) -> Result<Self, LatticeError> {
        let mut c = Self::all_minus(n)?;
        for i in 0..n * n {
            if bits[i / 64] >> (i % 64) & 1 == 1 {
                c.spins[i] = 1;
            }
        }
        Ok(c)
    }

    /// Snapshot text: "N h" then N rows of '+'/'-', row 0 first.
    pub fn to_snapshot(&self, h: f64) -> String {
        let mut s = format!("{} {}\n", self.n, h);
        s.push_str(&self.rows_string("\n"));
        s.push('\n');
        s
    }

    pub fn from_snapshot(text: &str) -> Result<(Self, f64), LatticeError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(LatticeError::Snapshot { line: 1, msg: "empty".into() })?;
        let mut parts = header.split_whitespace();
        let bad = |msg: &str| LatticeError::Snapshot { line: 1, msg: msg.to_string() };
        let n: usize = parts.next().ok_or_else(|| bad("missing N"))?.parse().map_err(|_| bad("bad N"))?;
        let h: f64 = parts.next().ok_or_else(|| bad("missing h"))?.parse().map_err(|_| bad("bad h"))?;
        let mut spins = Vec::with_capacity(n * n);
        for row in 0..n {
            let line = lines.next().ok_or(LatticeError::Snapshot { line: row + 2, msg: "missing row".into() })?;
            let line = line.trim_end();
            if line.chars().count() != n {
                return Err(LatticeError::Snapshot { line: row + 2, msg: format!("expected {n} cells") });
            }
            for ch in line.chars() {
                spins.push(match ch {
                    '+' => 1,
                    '-' => -1,
                    other => {
                        return Err(LatticeError::Snapshot { line: row + 2, msg: format!("bad cell {other:?}") })
                    }
                });
            }
        }
        Ok((Self::from_spins(n, spins)?, h))
    }

    /// Rows of '+'/'-' joined by `sep`, row 0 first.
    pub fn rows_string(&self, sep: &str) -> String {
        self.spins
            .chunks(self.n)
            .map(|row| row.iter().map(|&s| if s == 1 { '+' } else { '-' }).collect::<String>())
            .collect::<Vec<_>>()
            .join(sep)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rows_string("/"))
    }
}

pub fn energy_terms(config: &Configuration) -> Energy {
    let mut e = Energy::default();
    for c in config.coords() {
        let s = config.get(c) as i64;
        let [_, right, _, up] = config.neighbors(c);
        e.coupling += s * (config.get(right) as i64 + config.get(up) as i64);
        e.magnetization += s;
    }
    e
}

pub fn energy(config: &Configuration, h: f64) -> f64 {
    energy_terms(config).value(h)
}

/// Change of the integer energy sums when `spin` is flipped.
pub fn delta_energy_terms(config: &Configuration, spin: TorusCoord) -> Energy {
    let s = config.get(spin) as i64;
    let nb = config.neighbor_sum(spin) as i64;
    Energy { coupling: -2 * s * nb, magnetization: -2 * s }
}

/// H(flipped) - H(config) = 2 s (sum of neighbours + h).
pub fn delta_energy_flip(config: &Configuration, spin: TorusCoord, h: f64) -> f64 {
    delta_energy_terms(config, spin).value(h)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpinClassification {
    pub corners: BTreeSet<TorusCoord>,
    pub h_boundary: BTreeSet<TorusCoord>,
    pub v_boundary: BTreeSet<TorusCoord>,
    pub interior: BTreeSet<TorusCoord>,
}

pub fn classify_spins(config: &Configuration) -> SpinClassification {
    let mut out = SpinClassification::default();
    for c in config.coords() {
        if config.get(c) != 1 {
            continue;
        }
        let [l, r, d, u] = config.neighbors(c);
        let hs = config.get(l) + config.get(r);
        let vs = config.get(d) + config.get(u);
        let set = match (hs, vs) {
            (0, 0) => &mut out.corners,
            (2, 0) => &mut out.h_boundary,
            (0, 2) => &mut out.v_boundary,
            (2, 2) => &mut out.interior,
            _ => continue,
        };
        set.insert(c);
    }
    out
}

/// Axis-aligned torus rectangle; `anchor` is the lower-left cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub width: usize,
    pub height: usize,
    pub anchor: TorusCoord,
}

impl Rect {
    pub fn new(width: usize, height: usize, anchor: TorusCoord) -> Self {
        Rect { width, height, anchor }
    }

    pub fn contains(&self, c: TorusCoord, n: usize) -> bool {
        let dx = (c.x + n - self.anchor.x) % n;
        let dy = (c.y + n - self.anchor.y) % n;
        dx < self.width && dy < self.height
    }

    pub fn cells(&self, n: usize) -> Vec<TorusCoord> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for dy in 0..self.height {
            for dx in 0..self.width {
                out.push(self.anchor.offset(dx as i64, dy as i64, n));
            }
        }
        out
    }
}

/// Shortest circular interval covering every occupied index: (start, length).
fn circular_cover(occupied: &[bool]) -> Option<(usize, usize)> {
    let n = occupied.len();
    if !occupied.iter().any(|&o| o) {
        return None;
    }
    if occupied.iter().all(|&o| o) {
        return Some((0, n));
    }
    // Longest circular run of empty indices; the cover starts right after it.
    let mut best: Option<(usize, usize)> = None;
    for start in 0..n {
        if occupied[start] || !occupied[(start + n - 1) % n] {
            continue;
        }
        let mut len = 0;
        while !occupied[(start + len) % n] {
            len += 1;
        }
        let cover_start = (start + len) % n;
        let better = match best {
            None => true,
            Some((bs, bl)) => len > bl || (len == bl && cover_start < bs),
        };
        if better {
            best = Some((cover_start, len));
        }
    }
    best.map(|(s, gap)| (s, n - gap))
}

/// Smallest torus rectangle covering all plus spins; `None` when there are none.
pub fn circumscribed_rectangle(config: &Configuration) -> Result<Option<Rect>, LatticeError> {
    let n = config.n();
    let mut cols = vec![false; n];
    let mut rows = vec![false; n];
    for c in config.coords() {
        if config.get(c) == 1 {
            cols[c.x] = true;
            rows[c.y] = true;
        }
    }
    let (Some((x0, w)), Some((y0, h))) = (circular_cover(&cols), circular_cover(&rows)) else {
        return Ok(None);
    };
    if w == n && h == n && !config.is_all_plus() {
        return Err(LatticeError::AmbiguousWrap);
    }
    Ok(Some(Rect::new(w, h, TorusCoord::new(x0, y0))))
}

/// log of the unnormalised Gibbs weight, -beta H.
pub fn gibbs_log_weight(config: &Configuration, params: &ModelParams) -> f64 {
    -params.beta * energy(config, params.h)
}

/// Exhaustive partition function; only feasible for n <= 4.
pub fn partition_function(n: usize, params: &ModelParams) -> Result<f64, LatticeError> {
    if n > 4 {
        return Err(LatticeError::TooLarge(n));
    }
    if n < Configuration::MIN_SIDE {
        return Err(LatticeError::TooSmall { got: n, min: Configuration::MIN_SIDE });
    }
    let cells = n * n;
    let mut z = 0.0;
    for mask in 0u64..(1 << cells) {
        let spins = (0..cells).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect();
        let c = Configuration::from_spins(n, spins)?;
        z += gibbs_log_weight(&c, params).exp();
    }
    Ok(z)
}
