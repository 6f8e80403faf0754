//! Piecewise-constant index paths of the continuous-time Markov chain with
//! generator `-B`, seeded ensembles, and empirical path statistics.
//!
//! States are 0-based. A path is right-continuous: at a jump time it
//! already carries the new state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coupling::CouplingMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("time {t} outside the horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("state {state} out of range for {m} states")]
    StateOutOfRange { state: usize, m: usize },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("ensemble paths disagree on {0}")]
    Heterogeneous(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub time: f64,
    pub state: usize,
}

/// Maximal time interval on which a path is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstancyInterval {
    pub start: f64,
    pub end: f64,
    pub state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexPath {
    initial_state: usize,
    jumps: Vec<Jump>,
    horizon: f64,
}

impl IndexPath {
    /// Builds a path after checking ordering, state changes and the horizon.
    pub fn new(initial_state: usize, jumps: Vec<Jump>, horizon: f64) -> Result<Self, MarkovError> {
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(MarkovError::InvalidPath(format!("horizon {horizon}")));
        }
        let mut prev_t = 0.0;
        let mut prev_s = initial_state;
        for (k, j) in jumps.iter().enumerate() {
            if j.time <= prev_t || j.time > horizon {
                return Err(MarkovError::InvalidPath(format!("jump {k} at time {} out of order", j.time)));
            }
            if j.state == prev_s {
                return Err(MarkovError::InvalidPath(format!("jump {k} does not change state")));
            }
            prev_t = j.time;
            prev_s = j.state;
        }
        Ok(Self { initial_state, jumps, horizon })
    }

    pub fn constant(state: usize, horizon: f64) -> Self {
        Self { initial_state: state, jumps: Vec::new(), horizon }
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn jump_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.jumps.iter().map(|j| j.time)
    }

    pub fn final_state(&self) -> usize {
        self.jumps.last().map_or(self.initial_state, |j| j.state)
    }

    fn check_time(&self, t: f64) -> Result<(), MarkovError> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(MarkovError::OutOfHorizon { t, horizon: self.horizon })
        }
    }

    /// State after the last jump at or before `t`.
    pub fn state_at(&self, t: f64) -> Result<usize, MarkovError> {
        self.check_time(t)?;
        Ok(self.state_unchecked(t))
    }

    #[inline]
    fn state_unchecked(&self, t: f64) -> usize {
        let n = self.jumps.partition_point(|j| j.time <= t);
        if n == 0 {
            self.initial_state
        } else {
            self.jumps[n - 1].state
        }
    }

    /// The path `t -> ω(t + h)` on `[0, T - h]`.
    pub fn shift(&self, h: f64) -> Result<IndexPath, MarkovError> {
        self.check_time(h)?;
        let start = self.state_unchecked(h);
        let jumps =
            self.jumps.iter().filter(|j| j.time > h).map(|j| Jump { time: j.time - h, state: j.state }).collect();
        Ok(IndexPath { initial_state: start, jumps, horizon: self.horizon - h })
    }

    /// Constancy intervals covering `[0, T]`, in order.
    pub fn intervals(&self) -> Vec<ConstancyInterval> {
        let mut out = Vec::with_capacity(self.jumps.len() + 1);
        let mut start = 0.0;
        let mut state = self.initial_state;
        for j in &self.jumps {
            out.push(ConstancyInterval { start, end: j.time, state });
            start = j.time;
            state = j.state;
        }
        out.push(ConstancyInterval { start, end: self.horizon, state });
        out
    }

    /// `∫_a^b f(ω(s), s0, s1)` assembled piecewise over constancy intervals;
    /// `f` receives the state and the piece endpoints.
    pub fn integrate_pieces(&self, a: f64, b: f64, mut f: impl FnMut(usize, f64, f64) -> f64) -> f64 {
        self.intervals()
            .iter()
            .filter_map(|iv| {
                let s0 = iv.start.max(a);
                let s1 = iv.end.min(b);
                (s1 > s0).then(|| f(iv.state, s0, s1))
            })
            .sum()
    }

    /// Keeps the history up to `t` and draws a fresh future from the chain.
    pub fn resample_after<R: Rng + ?Sized>(&self, b: &CouplingMatrix, t: f64, rng: &mut R) -> IndexPath {
        let mut jumps: Vec<Jump> = self.jumps.iter().copied().filter(|j| j.time <= t).collect();
        let state = jumps.last().map_or(self.initial_state, |j| j.state);
        continue_chain(b, state, t, self.horizon, rng, &mut jumps);
        IndexPath { initial_state: self.initial_state, jumps, horizon: self.horizon }
    }

    /// Line format `initial_state T; t1:s1 t2:s2 ...`.
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {};", self.initial_state, self.horizon);
        for j in &self.jumps {
            s.push_str(&format!(" {}:{}", j.time, j.state));
        }
        s
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        let (head, tail) = line.split_once(';').ok_or("missing `;`")?;
        let mut head = head.split_whitespace();
        let state = head.next().ok_or("missing initial state")?.parse::<usize>().map_err(|e| e.to_string())?;
        let horizon = head.next().ok_or("missing horizon")?.parse::<f64>().map_err(|e| e.to_string())?;
        if head.next().is_some() {
            return Err("trailing fields before `;`".into());
        }
        let mut jumps = Vec::new();
        for item in tail.split_whitespace() {
            let (t, s) = item.split_once(':').ok_or_else(|| format!("bad jump `{item}`"))?;
            jumps.push(Jump {
                time: t.parse().map_err(|_| format!("bad jump time `{t}`"))?,
                state: s.parse().map_err(|_| format!("bad jump state `{s}`"))?,
            });
        }
        IndexPath::new(state, jumps, horizon).map_err(|e| e.to_string())
    }
}

fn continue_chain<R: Rng + ?Sized>(
    b: &CouplingMatrix,
    mut state: usize,
    mut t: f64,
    horizon: f64,
    rng: &mut R,
    jumps: &mut Vec<Jump>,
) {
    loop {
        let rate = b.entry(state, state);
        if rate <= 0.0 {
            return;
        }
        // Inverse CDF with U in (0, 1].
        let u: f64 = 1.0 - rng.random::<f64>();
        t += -u.ln() / rate;
        if t > horizon {
            return;
        }
        let mut target = rng.random::<f64>() * rate;
        let mut next = state;
        for j in (0..b.dim()).filter(|&j| j != state) {
            let w = -b.entry(state, j);
            if w <= 0.0 {
                continue;
            }
            next = j;
            if target < w {
                break;
            }
            target -= w;
        }
        if next == state {
            return;
        }
        state = next;
        jumps.push(Jump { time: t, state });
    }
}

/// Hold-and-jump simulation of the chain with generator `-B` started at `i`.
pub fn sample_path<R: Rng + ?Sized>(b: &CouplingMatrix, i: usize, horizon: f64, rng: &mut R) -> IndexPath {
    assert!(i < b.dim(), "state {i} out of range");
    let mut jumps = Vec::new();
    continue_chain(b, i, 0.0, horizon, rng, &mut jumps);
    IndexPath { initial_state: i, jumps, horizon }
}

/// Generator for path `index` of an ensemble with master seed `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Standard deviation of a Bernoulli frequency estimated from `n` samples.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p.clamp(0.0, 1.0) * (1.0 - p.clamp(0.0, 1.0)) / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEnsemble {
    initial_state: usize,
    horizon: f64,
    seed: Option<u64>,
    paths: Vec<IndexPath>,
}

impl PathEnsemble {
    /// `n` independent paths from state `i`; path `k` uses stream `k` of the
    /// master seed, so the result does not depend on scheduling.
    pub fn sample(b: &CouplingMatrix, i: usize, horizon: f64, n: usize, seed: u64) -> Self {
        let paths = (0..n as u64).into_par_iter().map(|k| sample_path(b, i, horizon, &mut path_rng(seed, k))).collect();
        Self { initial_state: i, horizon, seed: Some(seed), paths }
    }

    pub fn from_paths(paths: Vec<IndexPath>) -> Result<Self, MarkovError> {
        let first = paths.first().ok_or(MarkovError::EmptyEnsemble)?;
        let (i, h) = (first.initial_state, first.horizon);
        if paths.iter().any(|p| p.initial_state != i) {
            return Err(MarkovError::Heterogeneous("initial state"));
        }
        if paths.iter().any(|p| p.horizon != h) {
            return Err(MarkovError::Heterogeneous("horizon"));
        }
        Ok(Self { initial_state: i, horizon: h, seed: None, paths })
    }

    pub fn paths(&self) -> &[IndexPath] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    fn nonempty(&self) -> Result<(), MarkovError> {
        if self.paths.is_empty() {
            Err(MarkovError::EmptyEnsemble)
        } else {
            Ok(())
        }
    }

    fn check_time(&self, t: f64) -> Result<(), MarkovError> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(MarkovError::OutOfHorizon { t, horizon: self.horizon })
        }
    }

    /// Fraction of paths with `ω(t1) != ω(t2)`.
    pub fn mismatch_probability(&self, t1: f64, t2: f64) -> Result<f64, MarkovError> {
        self.nonempty()?;
        self.check_time(t1)?;
        self.check_time(t2)?;
        let hits = self.paths.iter().filter(|p| p.state_unchecked(t1) != p.state_unchecked(t2)).count();
        Ok(hits as f64 / self.paths.len() as f64)
    }

    /// Fraction of paths with `ω(t_k) = s_k` for every `k`.
    pub fn cylinder_frequency(&self, times: &[f64], states: &[usize]) -> Result<f64, MarkovError> {
        self.nonempty()?;
        if times.len() != states.len() {
            return Err(MarkovError::InvalidPath("times and states differ in length".into()));
        }
        if times.windows(2).any(|w| w[0] > w[1]) {
            return Err(MarkovError::InvalidPath("cylinder times not sorted".into()));
        }
        for &t in times {
            self.check_time(t)?;
        }
        let hits =
            self.paths.iter().filter(|p| times.iter().zip(states).all(|(&t, &s)| p.state_unchecked(t) == s)).count();
        Ok(hits as f64 / self.paths.len() as f64)
    }

    /// Empirical law of `ω(t)` over `m` states.
    pub fn state_law(&self, t: f64, m: usize) -> Result<Vec<f64>, MarkovError> {
        self.nonempty()?;
        self.check_time(t)?;
        let mut counts = vec![0usize; m];
        for p in &self.paths {
            let s = p.state_unchecked(t);
            if s >= m {
                return Err(MarkovError::StateOutOfRange { state: s, m });
            }
            counts[s] += 1;
        }
        Ok(counts.into_iter().map(|c| c as f64 / self.paths.len() as f64).collect())
    }

    /// Empirical mean number of jumps.
    pub fn mean_jump_count(&self) -> Result<f64, MarkovError> {
        self.nonempty()?;
        Ok(self.paths.iter().map(|p| p.jumps.len()).sum::<usize>() as f64 / self.paths.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(seed) = self.seed {
            s.push_str(&format!("# seed {seed}\n"));
        }
        for p in &self.paths {
            s.push_str(&p.to_line());
            s.push('\n');
        }
        s
    }

    /// Parses the line format; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self, MarkovError> {
        let mut paths = Vec::new();
        let mut seed = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed") {
                    seed = v.trim().parse().ok();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            paths.push(IndexPath::from_line(line).map_err(|message| MarkovError::Parse { line: n + 1, message })?);
        }
        let mut ens = Self::from_paths(paths)?;
        ens.seed = seed;
        Ok(ens)
    }
}
