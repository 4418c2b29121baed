//! Exact solutions on truncated state spaces.
//!
//! States are restricted to a box `0 ≤ x_j ≤ c_j`; a move that would leave
//! the box is turned into a self-loop. The truncated kernel is tabulated once
//! and then reused by relative value iteration, policy evaluation and
//! discounted evaluation. Policy evaluation solves the Poisson equation either
//! by anchored fixed-point iteration or, when the band is narrow enough, by a
//! direct banded factorization of the chain killed at the regeneration state.

use crate::error::{Error, Result};
use crate::mdp::{ControlModel, Layout, Move, State};
use crate::nn::Workspace;
use crate::par;
use crate::policy::Policy;
use std::io::Write;

/// Per-class caps and the mixed-radix state index.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationBox {
    pub caps: Vec<u32>,
    strides: Vec<usize>,
    len: usize,
}

/// Largest number of states a box may hold.
pub const MAX_BOX_STATES: usize = 20_000_000;

impl TruncationBox {
    pub fn new(caps: Vec<u32>) -> Result<Self> {
        if caps.iter().any(|&c| c < 1) {
            return Err(Error::InvalidNetwork("every cap must be at least 1".into()));
        }
        let mut strides = vec![0; caps.len()];
        let mut len: usize = 1;
        for j in (0..caps.len()).rev() {
            strides[j] = len;
            len = len
                .checked_mul(caps[j] as usize + 1)
                .filter(|&n| n <= MAX_BOX_STATES)
                .ok_or_else(|| Error::InvalidNetwork("truncation box too large".into()))?;
        }
        Ok(Self { caps, strides, len })
    }

    pub fn uniform(classes: usize, cap: u32) -> Result<Self> {
        Self::new(vec![cap; classes])
    }

    /// The same box with every cap raised by `by`.
    pub fn enlarged(&self, by: u32) -> Result<Self> {
        Self::new(self.caps.iter().map(|c| c + by).collect())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, x: &[u32]) -> bool {
        x.iter().zip(&self.caps).all(|(v, c)| v <= c)
    }

    pub fn index(&self, x: &[u32]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        Some(x.iter().zip(&self.strides).map(|(&v, s)| v as usize * s).sum())
    }

    pub fn decode(&self, mut i: usize, out: &mut [u32]) {
        for j in 0..self.caps.len() {
            out[j] = (i / self.strides[j]) as u32;
            i %= self.strides[j];
        }
    }

    pub fn state(&self, i: usize) -> State {
        let mut x = vec![0; self.caps.len()];
        self.decode(i, &mut x);
        x
    }

    /// Largest index distance covered by one unit move.
    pub fn bandwidth(&self) -> usize {
        self.strides.iter().copied().max().unwrap_or(0)
    }
}

/// A model restricted to a box: moves leaving the box become self-loops.
pub struct Truncated<'a, M: ControlModel + ?Sized> {
    pub inner: &'a M,
    pub bx: &'a TruncationBox,
}

impl<'a, M: ControlModel + ?Sized> Truncated<'a, M> {
    pub fn new(inner: &'a M, bx: &'a TruncationBox) -> Self {
        Self { inner, bx }
    }

    fn keep(&self, x: &[u32], m: Move) -> bool {
        match m {
            Move::Arrive(j) => x[j] < self.bx.caps[j],
            Move::Route(j, k) => j == k || x[k] < self.bx.caps[k],
            _ => true,
        }
    }
}

impl<M: ControlModel + ?Sized> ControlModel for Truncated<'_, M> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn layout(&self) -> &Layout {
        self.inner.layout()
    }

    fn cost(&self, x: &[u32]) -> f64 {
        self.inner.cost(x)
    }

    fn regeneration_state(&self) -> &[u32] {
        self.inner.regeneration_state()
    }

    fn base_moves(&self, x: &[u32], out: &mut Vec<(Move, f64)>) {
        let start = out.len();
        self.inner.base_moves(x, out);
        let mut k = start;
        for i in start..out.len() {
            if self.keep(x, out[i].0) {
                out[k] = out[i];
                k += 1;
            }
        }
        out.truncate(k);
    }

    fn choice_moves(&self, x: &[u32], station: usize, choice: usize, out: &mut Vec<(Move, f64)>) {
        let start = out.len();
        self.inner.choice_moves(x, station, choice, out);
        let mut k = start;
        for i in start..out.len() {
            if self.keep(x, out[i].0) {
                out[k] = out[i];
                k += 1;
            }
        }
        out.truncate(k);
    }

    fn is_feasible(&self, x: &[u32], station: usize, choice: usize) -> bool {
        self.inner.is_feasible(x, station, choice)
    }
}

/// Compressed rows of `(target index, probability)` pairs.
#[derive(Clone, Debug, Default)]
struct Rows {
    off: Vec<usize>,
    idx: Vec<u32>,
    p: Vec<f64>,
}

impl Rows {
    fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.off[r], self.off[r + 1]);
        (&self.idx[a..b], &self.p[a..b])
    }

    fn from_parts(parts: Vec<Vec<Vec<(u32, f64)>>>) -> Self {
        let mut rows = Rows { off: vec![0], ..Default::default() };
        for part in parts {
            for row in part {
                for (i, p) in row {
                    rows.idx.push(i);
                    rows.p.push(p);
                }
                rows.off.push(rows.idx.len());
            }
        }
        rows
    }
}

/// Tabulated truncated kernel, separable across stations.
struct Table {
    n: usize,
    choices: usize,
    stations: Vec<std::ops::Range<usize>>,
    cost: Vec<f64>,
    base: Rows,
    opts: Rows,
    feasible: Vec<bool>,
    anchor: usize,
}

const BUILD_CHUNK: usize = 4096;

impl Table {
    fn build<M: ControlModel + ?Sized>(model: &M, bx: &TruncationBox) -> Result<Self> {
        let anchor = bx
            .index(model.regeneration_state())
            .ok_or_else(|| Error::InvalidNetwork("regeneration state outside the box".into()))?;
        let t = Truncated::new(model, bx);
        let layout = model.layout();
        let total = layout.total();
        let n = bx.len();
        let chunks = n.div_ceil(BUILD_CHUNK);
        let target = |x: &[u32], m: Move| bx.index(&m.applied(x)).unwrap() as u32;
        let built = par::map_range(chunks, |c| {
            let mut x = vec![0; bx.caps.len()];
            let mut moves = Vec::new();
            let mut base = Vec::new();
            let mut opts = Vec::new();
            let mut feas = Vec::new();
            let mut cost = Vec::new();
            for i in c * BUILD_CHUNK..((c + 1) * BUILD_CHUNK).min(n) {
                bx.decode(i, &mut x);
                cost.push(model.cost(&x));
                moves.clear();
                t.base_moves(&x, &mut moves);
                base.push(moves.iter().map(|&(m, p)| (target(&x, m), p)).collect::<Vec<_>>());
                for l in 0..layout.num_stations() {
                    for ch in 0..layout.choices(l).len() {
                        moves.clear();
                        t.choice_moves(&x, l, ch, &mut moves);
                        opts.push(moves.iter().map(|&(m, p)| (target(&x, m), p)).collect::<Vec<_>>());
                        feas.push(model.is_feasible(&x, l, ch));
                    }
                }
            }
            (cost, base, opts, feas)
        });
        let mut cost = Vec::with_capacity(n);
        let mut feasible = Vec::with_capacity(n * total);
        let mut bases = Vec::with_capacity(chunks);
        let mut optss = Vec::with_capacity(chunks);
        for (c, b, o, f) in built {
            cost.extend(c);
            feasible.extend(f);
            bases.push(b);
            optss.push(o);
        }
        Ok(Self {
            n,
            choices: total,
            stations: (0..layout.num_stations()).map(|l| layout.range(l)).collect(),
            cost,
            base: Rows::from_parts(bases),
            opts: Rows::from_parts(optss),
            feasible,
            anchor,
        })
    }

    /// `Σ p (h[y] − h[i])` over a row.
    #[inline]
    fn drift(rows: &Rows, r: usize, h: &[f64], hi: f64) -> f64 {
        let (idx, p) = rows.row(r);
        idx.iter().zip(p).map(|(&y, &p)| p * (h[y as usize] - hi)).sum()
    }

    /// Bellman operator at state `i`; returns `(T h)(i)` and writes the greedy choice per station.
    #[inline]
    fn bellman(&self, i: usize, h: &[f64], greedy: &mut [u8]) -> f64 {
        let hi = h[i];
        let mut v = self.cost[i] + hi + Self::drift(&self.base, i, h, hi);
        for (l, r) in self.stations.iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for c in r.clone() {
                let seg = i * self.choices + c;
                if !self.feasible[seg] {
                    continue;
                }
                let d = Self::drift(&self.opts, seg, h, hi);
                if d < best {
                    best = d;
                    arg = c - r.start;
                }
            }
            v += best;
            greedy[l] = arg as u8;
        }
        v
    }

    /// Chain induced by a law per state: off-diagonal entries only.
    fn chain(&self, laws: &[f64]) -> Rows {
        let chunks = self.n.div_ceil(BUILD_CHUNK);
        let parts = par::map_range(chunks, |c| {
            let mut rows = Vec::new();
            for i in c * BUILD_CHUNK..((c + 1) * BUILD_CHUNK).min(self.n) {
                let mut row: Vec<(u32, f64)> = Vec::new();
                let mut add = |y: u32, p: f64| {
                    if y as usize == i || p == 0.0 {
                        return;
                    }
                    match row.iter_mut().find(|e| e.0 == y) {
                        Some(e) => e.1 += p,
                        None => row.push((y, p)),
                    }
                };
                let (idx, p) = self.base.row(i);
                for (&y, &p) in idx.iter().zip(p) {
                    add(y, p);
                }
                let law = &laws[i * self.choices..(i + 1) * self.choices];
                for r in &self.stations {
                    for c in r.clone() {
                        let w = law[c];
                        if w == 0.0 {
                            continue;
                        }
                        let (idx, p) = self.opts.row(i * self.choices + c);
                        for (&y, &p) in idx.iter().zip(p) {
                            add(y, w * p);
                        }
                    }
                }
                row.sort_by_key(|e| e.0);
                rows.push(row);
            }
            rows
        });
        Rows::from_parts(vec![parts.into_iter().flatten().collect()])
    }
}

/// Result of relative value iteration.
#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub average_cost: f64,
    /// Relative values with `h(x*) = 0`, indexed like the box.
    pub values: Vec<f64>,
    /// Greedy choice per state and station, row-major.
    pub policy: Vec<u8>,
    pub num_stations: usize,
    pub residual_span: f64,
    pub iterations: usize,
    pub bx: TruncationBox,
    /// Relative change of the average cost when every cap grows by 10.
    pub sensitivity: Option<f64>,
}

impl ExactSolution {
    /// Greedy action at `x` (inside the box).
    pub fn action(&self, x: &[u32]) -> Option<&[u8]> {
        let i = self.bx.index(x)?;
        Some(&self.policy[i * self.num_stations..(i + 1) * self.num_stations])
    }

    /// CSV table: state columns, value, one action column per station.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let j = self.bx.caps.len();
        let mut header: Vec<String> = (0..j).map(|c| format!("x{c}")).collect();
        header.push("value".into());
        header.extend((0..self.num_stations).map(|l| format!("a{l}")));
        w.write_record(&header)?;
        let mut x = vec![0; j];
        for i in 0..self.bx.len() {
            self.bx.decode(i, &mut x);
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(format!("{}", self.values[i]));
            row.extend(self.policy[i * self.num_stations..(i + 1) * self.num_stations].iter().map(|a| a.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Options for relative value iteration.
#[derive(Clone, Debug)]
pub struct RviOptions {
    pub tol: f64,
    pub max_iterations: usize,
    /// Re-solve with caps + 10 and report the relative change.
    pub sensitivity: bool,
    /// Fail with `BoxTooSmall` if the sensitivity exceeds this fraction.
    pub max_sensitivity: f64,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iterations: 1_000_000, sensitivity: true, max_sensitivity: 0.005 }
    }
}

/// Optimal average cost on the box by relative value iteration anchored at x*.
pub fn relative_value_iteration<M: ControlModel + ?Sized>(
    model: &M,
    bx: &TruncationBox,
    opts: &RviOptions,
) -> Result<ExactSolution> {
    let mut sol = rvi_once(model, bx, opts)?;
    if opts.sensitivity {
        let big = bx.enlarged(10)?;
        let wide = rvi_once(model, &big, opts)?;
        let delta = (wide.average_cost - sol.average_cost).abs() / wide.average_cost.abs().max(1e-300);
        sol.sensitivity = Some(delta);
        if delta > opts.max_sensitivity {
            return Err(Error::BoxTooSmall(100.0 * delta));
        }
    }
    Ok(sol)
}

fn rvi_once<M: ControlModel + ?Sized>(model: &M, bx: &TruncationBox, opts: &RviOptions) -> Result<ExactSolution> {
    let table = Table::build(model, bx)?;
    let n = table.n;
    let stations = table.stations.len();
    let mut h = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut greedy = vec![0u8; n * stations];
    let mut iterations = 0;
    loop {
        iterations += 1;
        {
            let h_ref = &h;
            let t = &table;
            par::for_chunks_mut(&mut next, BUILD_CHUNK, |c, out| {
                let mut g = vec![0u8; stations];
                for (k, o) in out.iter_mut().enumerate() {
                    *o = t.bellman(c * BUILD_CHUNK + k, h_ref, &mut g);
                }
            });
        }
        let (lo, hi) = span(&next, &h);
        let anchor = next[table.anchor];
        for v in next.iter_mut() {
            *v -= anchor;
        }
        std::mem::swap(&mut h, &mut next);
        if hi - lo < opts.tol {
            let t = &table;
            let h_ref = &h;
            par::for_chunks_mut(&mut greedy, BUILD_CHUNK * stations, |c, out| {
                for (k, g) in out.chunks_mut(stations).enumerate() {
                    t.bellman(c * BUILD_CHUNK + k, h_ref, g);
                }
            });
            return Ok(ExactSolution {
                average_cost: 0.5 * (lo + hi),
                values: h,
                policy: greedy,
                num_stations: stations,
                residual_span: hi - lo,
                iterations,
                bx: bx.clone(),
                sensitivity: None,
            });
        }
        if iterations >= opts.max_iterations {
            return Err(Error::Diverged(iterations));
        }
    }
}

/// `(min, max)` of `a − b`.
fn span(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter().zip(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, y)| {
        let d = x - y;
        (lo.min(d), hi.max(d))
    })
}

/// How linear systems are solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearSolver {
    /// Banded factorization when `states × bandwidth²` is small enough, else iteration.
    Auto,
    Iterative,
    Banded,
}

/// Options for exact policy evaluation.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub solver: LinearSolver,
    /// Iteration stops when the max-norm residual falls below this.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { solver: LinearSolver::Auto, tol: 1e-11, max_iterations: 5_000_000 }
    }
}

const BANDED_WORK_LIMIT: f64 = 4e9;

/// Average cost and relative values of a fixed policy.
#[derive(Clone, Debug)]
pub struct PolicyEvaluation {
    pub average_cost: f64,
    /// `h` with `h(x*) = 0`, indexed like the box.
    pub values: Vec<f64>,
    /// Max-norm residual of the Poisson equation.
    pub residual: f64,
}

/// Discounted evaluation of a fixed policy.
#[derive(Clone, Debug)]
pub struct DiscountedEvaluation {
    /// `(1−γ)` times the discounted cost from x*.
    pub r_star: f64,
    /// Solution of `g − r(x*) + γPV − V = 0` with `V(x*) = 0`.
    pub v: Vec<f64>,
    /// Solution of `g − μᵀg + γPJ − J = 0`.
    pub j: Vec<f64>,
    pub average_cost: f64,
    pub residual_v: f64,
    pub residual_j: f64,
}

/// A policy's chain tabulated on a box.
pub struct PolicyChain {
    pub bx: TruncationBox,
    rows: Rows,
    cost: Vec<f64>,
    anchor: usize,
}

impl PolicyChain {
    /// Tabulates the chain induced by `law(x, out)` on the box.
    pub fn build<M, F>(model: &M, bx: &TruncationBox, law: F) -> Result<Self>
    where
        M: ControlModel + ?Sized,
        F: Fn(&[u32], &mut [f64]) + Sync + Send,
    {
        let table = Table::build(model, bx)?;
        let total = table.choices;
        let mut laws = vec![0.0; table.n * total];
        par::for_chunks_mut(&mut laws, BUILD_CHUNK * total, |c, out| {
            let mut x = vec![0; bx.caps.len()];
            for (k, l) in out.chunks_mut(total).enumerate() {
                bx.decode(c * BUILD_CHUNK + k, &mut x);
                law(&x, l);
            }
        });
        let rows = table.chain(&laws);
        let chain = Self { bx: bx.clone(), rows, cost: table.cost, anchor: table.anchor };
        chain.check_reaches_anchor()?;
        Ok(chain)
    }

    pub fn for_policy<M: ControlModel + ?Sized>(model: &M, bx: &TruncationBox, policy: &Policy) -> Result<Self> {
        Self::build(model, bx, |x, out| policy.law_into(model, x, out, &mut Workspace::default()))
    }

    pub fn len(&self) -> usize {
        self.cost.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cost.is_empty()
    }

    /// Off-diagonal transitions out of state `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        self.rows.row(i)
    }

    pub fn cost(&self, i: usize) -> f64 {
        self.cost[i]
    }

    fn check_reaches_anchor(&self) -> Result<()> {
        let n = self.len();
        let mut rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            for &y in self.rows.row(i).0 {
                rev[y as usize].push(i as u32);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.anchor];
        seen[self.anchor] = true;
        while let Some(i) = stack.pop() {
            for &p in &rev[i] {
                if !seen[p as usize] {
                    seen[p as usize] = true;
                    stack.push(p as usize);
                }
            }
        }
        let missing = seen.iter().filter(|s| !**s).count();
        if missing > 0 {
            return Err(Error::Reducible(missing));
        }
        Ok(())
    }

    /// `(P f)(i)` with the diagonal implied.
    #[inline]
    pub fn expect(&self, i: usize, f: &[f64]) -> f64 {
        let (idx, p) = self.rows.row(i);
        let fi = f[i];
        fi + idx.iter().zip(p).map(|(&y, &p)| p * (f[y as usize] - fi)).sum::<f64>()
    }

    fn use_banded(&self, solver: LinearSolver) -> bool {
        match solver {
            LinearSolver::Banded => true,
            LinearSolver::Iterative => false,
            LinearSolver::Auto => {
                let bw = self.bx.bandwidth() as f64;
                (self.len() as f64) * bw * bw <= BANDED_WORK_LIMIT
            }
        }
    }

    /// Max-norm residual of `g − η + γPh − h`.
    pub fn residual(&self, h: &[f64], center: f64, gamma: f64) -> f64 {
        let r = par::map_range(self.len().div_ceil(BUILD_CHUNK), |c| {
            (c * BUILD_CHUNK..((c + 1) * BUILD_CHUNK).min(self.len()))
                .map(|i| (self.cost[i] - center + gamma * self.expect(i, h) - h[i]).abs())
                .fold(0.0, f64::max)
        });
        r.into_iter().fold(0.0, f64::max)
    }

    /// Solves the Poisson equation with `h(x*) = 0`.
    pub fn evaluate(&self, opts: &EvalOptions) -> Result<PolicyEvaluation> {
        let (average_cost, values) =
            if self.use_banded(opts.solver) { self.poisson_banded() } else { self.poisson_iterative(opts)? };
        let residual = self.residual(&values, average_cost, 1.0);
        Ok(PolicyEvaluation { average_cost, values, residual })
    }

    fn poisson_iterative(&self, opts: &EvalOptions) -> Result<(f64, Vec<f64>)> {
        let n = self.len();
        let mut h = vec![0.0; n];
        let mut next = vec![0.0; n];
        for it in 1..=opts.max_iterations {
            {
                let h_ref = &h;
                par::for_chunks_mut(&mut next, BUILD_CHUNK, |c, out| {
                    for (k, o) in out.iter_mut().enumerate() {
                        let i = c * BUILD_CHUNK + k;
                        *o = self.cost[i] + self.expect(i, h_ref);
                    }
                });
            }
            let eta = next[self.anchor];
            let mut change: f64 = 0.0;
            for (v, old) in next.iter_mut().zip(&h) {
                *v -= eta;
                change = change.max((*v - old).abs());
            }
            std::mem::swap(&mut h, &mut next);
            if change < opts.tol {
                return Ok((eta, h));
            }
            if it == opts.max_iterations {
                break;
            }
        }
        Err(Error::Diverged(opts.max_iterations))
    }

    /// Regenerative solve: with the anchor removed, `(I − P) u = g` and
    /// `(I − P) v = 1` give the expected cycle cost and length from each
    /// state; then `η = (g(x*) + P u)/(1 + P v)` at the anchor and `h = u − η v`.
    fn poisson_banded(&self) -> (f64, Vec<f64>) {
        let n = self.len();
        let a = self.anchor;
        let bw = self.bx.bandwidth();
        let mut band = Band::new(n - 1, bw);
        let map = |i: usize| if i < a { i } else { i - 1 };
        for i in (0..n).filter(|&i| i != a) {
            let (idx, p) = self.rows.row(i);
            let r = map(i);
            let mut diag = 0.0;
            for (&y, &p) in idx.iter().zip(p) {
                diag += p;
                if y as usize != a {
                    band.add(r, map(y as usize), -p);
                }
            }
            band.add(r, r, diag);
        }
        band.factor();
        let mut u: Vec<f64> = (0..n).filter(|&i| i != a).map(|i| self.cost[i]).collect();
        let mut v = vec![1.0; n - 1];
        band.solve(&mut u);
        band.solve(&mut v);
        let (idx, p) = self.rows.row(a);
        let (mut pu, mut pv) = (0.0, 0.0);
        for (&y, &p) in idx.iter().zip(p) {
            pu += p * u[map(y as usize)];
            pv += p * v[map(y as usize)];
        }
        let eta = (self.cost[a] + pu) / (1.0 + pv);
        let mut h = vec![0.0; n];
        for i in (0..n).filter(|&i| i != a) {
            h[i] = u[map(i)] - eta * v[map(i)];
        }
        (eta, h)
    }

    /// Discounted values: `W = (I − γP)⁻¹ g`, `r(x*) = (1−γ)W(x*)`,
    /// `V = W − W(x*)`, `J = W − μᵀg/(1−γ)`.
    pub fn evaluate_discounted(&self, gamma: f64, opts: &EvalOptions) -> Result<DiscountedEvaluation> {
        let avg = self.evaluate(opts)?.average_cost;
        let w = if self.use_banded(opts.solver) {
            self.discounted_banded(gamma)
        } else {
            self.discounted_iterative(gamma, opts)?
        };
        let wa = w[self.anchor];
        let r_star = (1.0 - gamma) * wa;
        let v: Vec<f64> = w.iter().map(|x| x - wa).collect();
        let shift = if gamma < 1.0 { avg / (1.0 - gamma) } else { 0.0 };
        let j: Vec<f64> = w.iter().map(|x| x - shift).collect();
        let residual_v = self.residual(&v, r_star, gamma);
        let residual_j = self.residual(&j, avg, gamma);
        Ok(DiscountedEvaluation { r_star, v, j, average_cost: avg, residual_v, residual_j })
    }

    fn discounted_iterative(&self, gamma: f64, opts: &EvalOptions) -> Result<Vec<f64>> {
        let n = self.len();
        let mut w = vec![0.0; n];
        let mut next = vec![0.0; n];
        let scale = self.cost.iter().fold(1.0f64, |m, c| m.max(c.abs())) / (1.0 - gamma).max(1e-12);
        for _ in 0..opts.max_iterations {
            {
                let w_ref = &w;
                par::for_chunks_mut(&mut next, BUILD_CHUNK, |c, out| {
                    for (k, o) in out.iter_mut().enumerate() {
                        let i = c * BUILD_CHUNK + k;
                        *o = self.cost[i] + gamma * self.expect(i, w_ref);
                    }
                });
            }
            let change = next.iter().zip(&w).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            std::mem::swap(&mut w, &mut next);
            if change < opts.tol * (1.0 - gamma).max(1e-3) || change < 1e-15 * scale {
                return Ok(w);
            }
        }
        Err(Error::Diverged(opts.max_iterations))
    }

    fn discounted_banded(&self, gamma: f64) -> Vec<f64> {
        let n = self.len();
        let mut band = Band::new(n, self.bx.bandwidth());
        for i in 0..n {
            let (idx, p) = self.rows.row(i);
            let mut off = 0.0;
            for (&y, &p) in idx.iter().zip(p) {
                off += p;
                band.add(i, y as usize, -gamma * p);
            }
            band.add(i, i, (1.0 - gamma) + gamma * off);
        }
        band.factor();
        let mut w = self.cost.clone();
        band.solve(&mut w);
        w
    }
}

/// Square banded matrix with LU factorization without pivoting (the
/// systems here are nonsingular diagonally dominant M-matrices).
struct Band {
    n: usize,
    bw: usize,
    width: usize,
    a: Vec<f64>,
}

impl Band {
    fn new(n: usize, bw: usize) -> Self {
        let width = 2 * bw + 1;
        Self { n, bw, width, a: vec![0.0; n * width] }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.bw - i)
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.at(i, j);
        self.a[k] += v;
    }

    fn factor(&mut self) {
        let (n, bw, width) = (self.n, self.bw, self.width);
        for k in 0..n {
            let pivot = self.a[k * width + bw];
            let hi = (k + bw + 1).min(n);
            let (head, tail) = self.a.split_at_mut((k + 1) * width);
            let prow = &head[k * width + bw + 1..k * width + bw + 1 + (hi - k - 1)];
            for i in k + 1..hi {
                let base = (i - k - 1) * width;
                let col = k + bw - i;
                let f = tail[base + col] / pivot;
                if f == 0.0 {
                    continue;
                }
                tail[base + col] = f;
                let start = base + col + 1;
                for (t, &p) in tail[start..start + prow.len()].iter_mut().zip(prow) {
                    *t -= f * p;
                }
            }
        }
    }

    fn solve(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for j in lo..i {
                s -= self.a[self.at(i, j)] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut s = b[i];
            for j in i + 1..hi {
                s -= self.a[self.at(i, j)] * b[j];
            }
            b[i] = s / self.a[self.at(i, i)];
        }
    }
}

/// Average cost and relative values of `policy` on the box.
pub fn evaluate_policy_exact<M: ControlModel + ?Sized>(
    model: &M,
    policy: &Policy,
    bx: &TruncationBox,
) -> Result<PolicyEvaluation> {
    PolicyChain::for_policy(model, bx, policy)?.evaluate(&EvalOptions::default())
}

/// Discounted evaluation of `policy` on the box.
pub fn evaluate_discounted_exact<M: ControlModel + ?Sized>(
    model: &M,
    policy: &Policy,
    bx: &TruncationBox,
    gamma: f64,
) -> Result<DiscountedEvaluation> {
    PolicyChain::for_policy(model, bx, policy)?.evaluate_discounted(gamma, &EvalOptions::default())
}

/// Exact evaluation of the greedy policy of a solution.
pub fn evaluate_greedy<M: ControlModel + ?Sized>(model: &M, sol: &ExactSolution) -> Result<PolicyEvaluation> {
    let layout = model.layout();
    let chain = PolicyChain::build(model, &sol.bx, |x, out| {
        out.iter_mut().for_each(|p| *p = 0.0);
        let a = sol.action(x).unwrap();
        for (l, &c) in a.iter().enumerate() {
            out[layout.offset(l) + c as usize] = 1.0;
        }
    })?;
    chain.evaluate(&EvalOptions::default())
}

/// Exact average cost of every threshold in `range` and the best one.
pub fn best_threshold<M: ControlModel + ?Sized>(
    model: &M,
    bx: &TruncationBox,
    range: impl IntoIterator<Item = u32>,
) -> Result<(u32, Vec<(u32, f64)>)> {
    let mut costs = Vec::new();
    for t in range {
        costs.push((t, evaluate_policy_exact(model, &Policy::Threshold(t), bx)?.average_cost));
    }
    let best = costs
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|e| e.0)
        .ok_or_else(|| Error::InsufficientData("empty threshold range".into()))?;
    Ok((best, costs))
}
