//! Exhaustive-enumeration ground truth for small binary systems.
//!
//! A [`DiscreteLaw`] is a full probability table over (R, L, X) with all
//! coordinates binary. Laws are assembled from a base law over (L, X)
//! and exponential-family selection potentials; identification,
//! influence-function, and robustness claims are then verified by
//! direct expectation over the table.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::TargetFunctional;
use crate::odds::{BasisSpec, Factor, LinearFunction, Term};
use crate::patterns::PatternId;

/// Exponent contribution `prod_{i in vars} (1 - r_i) * func(l, x)`.
///
/// A singleton `vars` is a per-variable potential (baseline plus
/// log-odds-ratio terms); a pair is a pairwise interaction between
/// missingness indicators; larger sets are higher-order interactions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionTerm {
    pub vars: Vec<usize>,
    pub func: LinearFunction,
}

/// Base law for (L, X), all coordinates binary. Coordinates `0..k` are
/// L, `k..k+p` are X.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BaseLaw {
    Uniform,
    /// `log p(v) ~ sum_i main[i] v_i + sum pairwise[(i,j)] v_i v_j`
    LogLinear {
        main: Vec<f64>,
        pairwise: Vec<(usize, usize, f64)>,
    },
}

/// Components from which a discrete law is assembled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteLawSpec {
    pub k: usize,
    pub p: usize,
    pub base: BaseLaw,
    pub potentials: Vec<InteractionTerm>,
}

/// Exhaustive probability table over (R, L, X).
#[derive(Debug, Clone)]
pub struct DiscreteLaw {
    k: usize,
    p: usize,
    /// Indexed by `((r_idx << k) | l_idx) << p | x_idx`.
    probs: Vec<f64>,
}

pub(crate) fn bit(idx: usize, i: usize) -> f64 {
    ((idx >> i) & 1) as f64
}

pub(crate) fn index_to_values(idx: usize, len: usize) -> Vec<f64> {
    (0..len).map(|i| bit(idx, i)).collect()
}

/// Iterate all `l` indices compatible with `key` on the bits outside
/// `free_mask` (i.e. sub-assignments of the free bits).
fn compatible(key: usize, free_mask: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut sub = free_mask;
    loop {
        out.push(key | sub);
        if sub == 0 {
            break;
        }
        sub = (sub - 1) & free_mask;
    }
    out
}

/// Proper and improper submasks of `mask` with at least two bits set.
fn interaction_submasks(mask: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut sub = mask;
    while sub > 0 {
        if sub.count_ones() >= 2 {
            out.push(sub);
        }
        sub = (sub - 1) & mask;
    }
    out
}

pub fn build_discrete_law(spec: &DiscreteLawSpec) -> Result<DiscreteLaw> {
    let (k, p) = (spec.k, spec.p);
    if k < 2 {
        return Err(Error::InvalidSpec("K must be at least 2".into()));
    }
    if 2 * k + p > 14 {
        return Err(Error::EnumerationTooLarge(format!(
            "2K + p = {} exceeds the 2^14-cell cap",
            2 * k + p
        )));
    }
    for term in &spec.potentials {
        if term.vars.is_empty() || term.vars.iter().any(|&i| i >= k) {
            return Err(Error::InvalidSpec(
                "interaction term must name variables in 0..K".into(),
            ));
        }
    }
    let n_l = 1usize << k;
    let n_x = 1usize << p;
    let n_r = 1usize << k;

    // base law over (l, x)
    let mut base = vec![0.0f64; n_l * n_x];
    match &spec.base {
        BaseLaw::Uniform => base.iter_mut().for_each(|v| *v = 1.0),
        BaseLaw::LogLinear { main, pairwise } => {
            if main.len() != k + p {
                return Err(Error::DimensionMismatch(format!(
                    "base law main effects have length {}, expected {}",
                    main.len(),
                    k + p
                )));
            }
            for (li, xi) in itertools_cells(n_l, n_x) {
                let mut s = 0.0;
                for c in 0..k + p {
                    let v = if c < k { bit(li, c) } else { bit(xi, c - k) };
                    s += main[c] * v;
                }
                for &(a, b, coef) in pairwise {
                    let va = if a < k { bit(li, a) } else { bit(xi, a - k) };
                    let vb = if b < k { bit(li, b) } else { bit(xi, b - k) };
                    s += coef * va * vb;
                }
                base[li * n_x + xi] = s.exp();
            }
        }
    }
    let z: f64 = base.iter().sum();
    base.iter_mut().for_each(|v| *v /= z);

    let mut probs = vec![0.0f64; n_r * n_l * n_x];
    for (li, xi) in itertools_cells(n_l, n_x) {
        let l = index_to_values(li, k);
        let x = index_to_values(xi, p);
        let mut num = vec![0.0f64; n_r];
        for r in PatternId::all(k) {
            let mut s = 0.0;
            for term in &spec.potentials {
                if term.vars.iter().all(|&i| !r.is_observed(i)) {
                    s += term.func.eval(&l, &x);
                }
            }
            num[r.index() as usize] = s.exp();
        }
        let c: f64 = num.iter().sum();
        if num[n_r - 1] / c <= 0.0 {
            return Err(Error::Positivity(format!(
                "complete-case probability vanished at l={li}, x={xi}"
            )));
        }
        for ri in 0..n_r {
            probs[(ri * n_l + li) * n_x + xi] = base[li * n_x + xi] * num[ri] / c;
        }
    }
    Ok(DiscreteLaw { k, p, probs })
}

fn itertools_cells(n_l: usize, n_x: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n_l).flat_map(move |li| (0..n_x).map(move |xi| (li, xi)))
}

impl DiscreteLaw {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_l(&self) -> usize {
        1 << self.k
    }

    pub fn n_x(&self) -> usize {
        1 << self.p
    }

    pub fn n_r(&self) -> usize {
        1 << self.k
    }

    pub fn joint(&self, r_idx: usize, l_idx: usize, x_idx: usize) -> f64 {
        self.probs[(r_idx * self.n_l() + l_idx) * self.n_x() + x_idx]
    }

    /// p(L = l, X = x)
    pub fn p_lx(&self, l_idx: usize, x_idx: usize) -> f64 {
        (0..self.n_r()).map(|r| self.joint(r, l_idx, x_idx)).sum()
    }

    /// p(R = r | L = l, X = x)
    pub fn cond_r(&self, r_idx: usize, l_idx: usize, x_idx: usize) -> f64 {
        self.joint(r_idx, l_idx, x_idx) / self.p_lx(l_idx, x_idx)
    }

    /// True value of a full-data functional `E[b(L)]`.
    pub fn true_functional(&self, functional: &TargetFunctional) -> f64 {
        let mut sum = 0.0;
        for l_idx in 0..self.n_l() {
            let l = index_to_values(l_idx, self.k);
            let mut pl = 0.0;
            for x_idx in 0..self.n_x() {
                pl += self.p_lx(l_idx, x_idx);
            }
            sum += pl * functional.eval(&l);
        }
        sum
    }

    /// p(R_i = 1 | R_{-i} = 1, L_{-i}, X) computed through the
    /// observed-data margin (bit i of `l_idx` is ignored: both cells are
    /// summed over L_i).
    pub fn q_obs(&self, i: usize, l_idx: usize, x_idx: usize) -> f64 {
        let complete = self.n_r() - 1;
        let loo = complete & !(1 << i);
        let key = l_idx & !(1 << i);
        let mut num = 0.0;
        let mut den = 0.0;
        for l in compatible(key, 1 << i) {
            num += self.joint(complete, l, x_idx);
            den += self.joint(loo, l, x_idx);
        }
        num / (num + den)
    }

    /// p(R_i = 1 | R_{-i} = r_rest, L = l, X = x) from the true joint.
    /// Under NSC this does not depend on bit i of `l_idx`.
    pub fn q_true(&self, i: usize, r_rest: PatternId, l_idx: usize, x_idx: usize) -> f64 {
        let r1 = r_rest.with_bit(i, true).index() as usize;
        let r0 = r_rest.with_bit(i, false).index() as usize;
        let a = self.joint(r1, l_idx, x_idx);
        let b = self.joint(r0, l_idx, x_idx);
        a / (a + b)
    }

    /// Identified log-odds-ratio function: `delta_h_i(l_{-i}, x)`,
    /// anchored at `l_{-i} = 0`. Built from observed-data conditionals.
    pub fn delta_h_obs(&self, i: usize, l_idx: usize, x_idx: usize) -> f64 {
        let q = self.q_obs(i, l_idx, x_idx);
        let q0 = self.q_obs(i, 0, x_idx);
        ((1.0 - q) / q).ln() - ((1.0 - q0) / q0).ln()
    }

    /// `OR(r, L | X)` from observed-data delta_h functions.
    pub fn odds_ratio_obs(&self, r: PatternId, l_idx: usize, x_idx: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..self.k {
            if !r.is_observed(i) {
                s += self.delta_h_obs(i, l_idx, x_idx);
            }
        }
        s.exp()
    }

    /// True conditional `E[phi | R = r, L_{(r)} = cell(l_idx), X]` for
    /// `phi(l) = b(l) - beta`.
    pub fn pattern_mixture_true(
        &self,
        r: PatternId,
        l_idx: usize,
        x_idx: usize,
        functional: &TargetFunctional,
        beta: f64,
    ) -> f64 {
        let obs_mask = r.index() as usize;
        let key = l_idx & obs_mask;
        let free = !obs_mask & (self.n_l() - 1);
        let mut num = 0.0;
        let mut den = 0.0;
        for l in compatible(key, free) {
            let w = self.joint(r.index() as usize, l, x_idx);
            num += w * (functional.eval(&index_to_values(l, self.k)) - beta);
            den += w;
        }
        num / den
    }

    /// Verify Assumption 1 by enumeration: for each i the largest gap
    /// `|p(R_i=1 | l_i=1, rest) - p(R_i=1 | l_i=0, rest)|` over all
    /// (r_{-i}, l_{-i}, x) with support.
    pub fn verify_nsc(&self) -> NscReport {
        let mut gaps = vec![0.0f64; self.k];
        for i in 0..self.k {
            for r_rest in PatternId::all(self.k) {
                for x_idx in 0..self.n_x() {
                    for l_key in 0..self.n_l() {
                        if l_key & (1 << i) != 0 {
                            continue;
                        }
                        let l1 = l_key | (1 << i);
                        if self.p_lx(l_key, x_idx) <= 0.0 || self.p_lx(l1, x_idx) <= 0.0 {
                            continue;
                        }
                        let a = self.q_true(i, r_rest, l_key, x_idx);
                        let b = self.q_true(i, r_rest, l1, x_idx);
                        gaps[i] = gaps[i].max((a - b).abs());
                    }
                }
            }
        }
        NscReport {
            per_variable_ok: gaps.iter().map(|&g| g <= 1e-12).collect(),
            max_gap: gaps.iter().cloned().fold(0.0, f64::max),
            gaps,
        }
    }

    /// Solve all interaction terms (pairwise odds ratios and higher)
    /// from observed-data functionals, by recursion over the size of the
    /// missing set. Returns a map from (missing mask, observed-L cell,
    /// x) to the interaction weight.
    fn solve_interactions_obs(&self) -> Result<HashMap<(u32, usize, usize), f64>> {
        let full = (self.n_r() - 1) as u32;
        let complete = self.n_r() - 1;
        let mut w: HashMap<(u32, usize, usize), f64> = HashMap::new();
        let mut masks: Vec<u32> = (1..=full).filter(|m| m.count_ones() >= 2).collect();
        masks.sort_by_key(|m| m.count_ones());
        for s in masks {
            let r_idx = (full & !s) as usize;
            let obs_mask = r_idx;
            let free = s as usize;
            for x_idx in 0..self.n_x() {
                for key in compatible(0, obs_mask) {
                    // observed-data cell probability of pattern r at this cell
                    let mut lhs = 0.0;
                    for l in compatible(key, free) {
                        lhs += self.joint(r_idx, l, x_idx);
                    }
                    // complete-case reweighting with all lower-order terms
                    let mut den = 0.0;
                    for l in compatible(key, free) {
                        let mut v = self.joint(complete, l, x_idx);
                        for i in 0..self.k {
                            if s & (1 << i) != 0 {
                                let q = self.q_obs(i, l, x_idx);
                                v *= (1.0 - q) / q;
                            }
                        }
                        for sub in interaction_submasks(s) {
                            if sub != s {
                                let sub_key = l & !(sub as usize);
                                v *= w[&(sub, sub_key, x_idx)];
                            }
                        }
                        den += v;
                    }
                    if den <= 0.0 {
                        return Err(Error::InsufficientSupport(format!(
                            "no complete-case mass at cell {key} for mask {s:#b}"
                        )));
                    }
                    w.insert((s, key, x_idx), lhs / den);
                }
            }
        }
        Ok(w)
    }

    /// Identification check: reconstruct p(R | L, X) and beta
    /// from observed-data functionals only, and report the maximum
    /// absolute errors against the truth.
    pub fn verify_identification(&self, functional: &TargetFunctional) -> Result<IdentReport> {
        let w = self.solve_interactions_obs()?;
        let full = (self.n_r() - 1) as u32;
        let mut max_err = 0.0f64;
        for x_idx in 0..self.n_x() {
            for l_idx in 0..self.n_l() {
                if self.p_lx(l_idx, x_idx) <= 0.0 {
                    continue;
                }
                let mut num = vec![0.0f64; self.n_r()];
                for r in PatternId::all(self.k) {
                    let mut v = 1.0;
                    for i in 0..self.k {
                        let q = self.q_obs(i, l_idx, x_idx);
                        v *= if r.is_observed(i) { q } else { 1.0 - q };
                    }
                    let miss = full & !r.index();
                    for sub in interaction_submasks(miss) {
                        v *= w[&(sub, l_idx & !(sub as usize), x_idx)];
                    }
                    num[r.index() as usize] = v;
                }
                let c: f64 = num.iter().sum();
                for ri in 0..self.n_r() {
                    let err = (num[ri] / c - self.cond_r(ri, l_idx, x_idx)).abs();
                    max_err = max_err.max(err);
                }
            }
        }

        // beta from the odds-ratio-weighted complete-case
        // conditional expectations, averaged over the observed margin.
        // The full reconstructed ratio p(r|l,x)/p(R=1|l,x) is used: the
        // per-variable conditionals plus all solved interaction terms.
        let ratio = |r: PatternId, l: usize, x_idx: usize| -> f64 {
            let mut v = 1.0;
            for i in 0..self.k {
                if !r.is_observed(i) {
                    let q = self.q_obs(i, l, x_idx);
                    v *= (1.0 - q) / q;
                }
            }
            let miss = full & !r.index();
            for sub in interaction_submasks(miss) {
                v *= w[&(sub, l & !(sub as usize), x_idx)];
            }
            v
        };
        let complete = self.n_r() - 1;
        let mut beta_obs = 0.0;
        for r in PatternId::all(self.k) {
            let obs_mask = r.index() as usize;
            let free = !obs_mask & (self.n_l() - 1);
            for x_idx in 0..self.n_x() {
                for key in compatible(0, obs_mask) {
                    let mut p_cell = 0.0;
                    for l in compatible(key, free) {
                        p_cell += self.joint(r.index() as usize, l, x_idx);
                    }
                    if p_cell <= 0.0 {
                        continue;
                    }
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for l in compatible(key, free) {
                        let cc = self.joint(complete, l, x_idx);
                        let or = ratio(r, l, x_idx);
                        num += cc * or * functional.eval(&index_to_values(l, self.k));
                        den += cc * or;
                    }
                    if den <= 0.0 {
                        return Err(Error::InsufficientSupport(format!(
                            "no complete-case mass at observed cell {key}"
                        )));
                    }
                    beta_obs += p_cell * num / den;
                }
            }
        }
        let beta_true = self.true_functional(functional);
        Ok(IdentReport {
            max_missingness_error: max_err,
            beta_error: (beta_obs - beta_true).abs(),
        })
    }

    fn p_l_given_rest(&self, i: usize, l_idx: usize, x_idx: usize) -> f64 {
        // p(l_i | l_{-i}, x) at the value encoded in l_idx
        let key = l_idx & !(1 << i);
        let total: f64 = compatible(key, 1 << i)
            .into_iter()
            .map(|l| self.p_lx(l, x_idx))
            .sum();
        self.p_lx(l_idx, x_idx) / total
    }

    /// phi_odds evaluated at a cell with true nuisances.
    fn phi_odds_cell(
        &self,
        r: PatternId,
        l_idx: usize,
        x_idx: usize,
        functional: &TargetFunctional,
        beta: f64,
    ) -> f64 {
        let phi_full = functional.eval(&index_to_values(l_idx, self.k)) - beta;
        if r.is_complete() {
            let pi_all: Vec<f64> = (0..self.n_r())
                .map(|ri| self.cond_r(ri, l_idx, x_idx))
                .collect();
            let pi_j = pi_all[self.n_r() - 1];
            let mut aug = 0.0;
            for rj in PatternId::all(self.k) {
                if rj.is_complete() {
                    continue;
                }
                let m = self.pattern_mixture_true(rj, l_idx, x_idx, functional, beta);
                aug += pi_all[rj.index() as usize] * m;
            }
            (phi_full - aug) / pi_j
        } else {
            self.pattern_mixture_true(r, l_idx, x_idx, functional, beta)
        }
    }

    /// Influence-function check: `(E[phi_odds], E[phi_adj])` at the
    /// supplied beta (pass the true beta for the mean-zero property).
    pub fn verify_if_mean_zero(&self, functional: &TargetFunctional, beta: f64) -> (f64, f64) {
        let mut e_odds = 0.0;
        let mut e_adj = 0.0;
        for x_idx in 0..self.n_x() {
            for l_idx in 0..self.n_l() {
                if self.p_lx(l_idx, x_idx) <= 0.0 {
                    continue;
                }
                for r in PatternId::all(self.k) {
                    let pr = self.joint(r.index() as usize, l_idx, x_idx);
                    if pr <= 0.0 {
                        continue;
                    }
                    e_odds += pr * self.phi_odds_cell(r, l_idx, x_idx, functional, beta);
                    e_adj += pr * self.phi_adj_cell(r, l_idx, x_idx, functional, beta);
                }
            }
        }
        (e_odds, e_adj)
    }

    /// phi_adj at a cell: the adjustment for nonparametric estimation of
    /// the odds ratio, with all conditionals enumerated at the truth.
    fn phi_adj_cell(
        &self,
        r: PatternId,
        l_idx: usize,
        x_idx: usize,
        functional: &TargetFunctional,
        beta: f64,
    ) -> f64 {
        let mut total = 0.0;
        for i in 0..self.k {
            // 1(R_{-i} = 1)
            let rest_complete = (0..self.k).all(|j| j == i || r.is_observed(j));
            if !rest_complete {
                continue;
            }
            let key = l_idx & !(1 << i);
            // enumerate over (l_i, r') given l_{-i}, x
            let mut e_one_minus_ri = 0.0;
            let mut p_rest_one = 0.0;
            let mut p_ri_one_rest_one = 0.0;
            let mut p_ri_zero = 0.0;
            let mut e_delta_num = 0.0;
            for l in compatible(key, 1 << i) {
                let pl = self.p_l_given_rest(i, l, x_idx);
                for rp in PatternId::all(self.k) {
                    let c = self.cond_r(rp.index() as usize, l, x_idx);
                    let rp_rest_one = (0..self.k).all(|j| j == i || rp.is_observed(j));
                    if !rp.is_observed(i) {
                        e_one_minus_ri += pl * c;
                        let phi_full =
                            functional.eval(&index_to_values(l, self.k)) - beta;
                        let m = self.pattern_mixture_true(rp, l, x_idx, functional, beta);
                        e_delta_num += pl * c * (phi_full - m);
                        p_ri_zero += pl * c;
                    }
                    if rp_rest_one {
                        p_rest_one += pl * c;
                        if rp.is_observed(i) {
                            p_ri_one_rest_one += pl * c;
                        }
                    }
                }
            }
            let p_ri1_given_rest1 = p_ri_one_rest_one / p_rest_one;
            let e_delta = e_delta_num / p_ri_zero;
            let ri = r.is_observed(i) as u8 as f64;
            total += e_one_minus_ri / p_rest_one
                * (ri / p_ri1_given_rest1 - 1.0)
                * (p_ri1_given_rest1 / (1.0 - p_ri1_given_rest1))
                * e_delta;
        }
        -total
    }

    /// Pairwise odds ratio `OR(R_i, R_j | R_{-(i,j)} = 1, l, x)` from the
    /// conditional law of R_a given the rest (route `a` in {i, j}); the
    /// two routes agree exactly by the symmetry of the construction.
    pub fn pairwise_or_route(
        &self,
        i: usize,
        j: usize,
        route: usize,
        l_idx: usize,
        x_idx: usize,
    ) -> f64 {
        let (a, b) = if route == i { (i, j) } else { (j, i) };
        let rest_one = PatternId::complete(self.k);
        // odds of R_a = 0 given R_b = 0 vs R_b = 1, others complete
        let q_b0 = self.q_true(a, rest_one.with_bit(b, false), l_idx, x_idx);
        let q_b1 = self.q_true(a, rest_one, l_idx, x_idx);
        ((1.0 - q_b0) / q_b0) / ((1.0 - q_b1) / q_b1)
    }

    /// Three-way interaction for K=3 from the pairing that leaves out
    /// `c`: `OR(R_a, R_b | R_c = 0) / OR(R_a, R_b | R_c = 1)`.
    pub fn gamma3_route(&self, c: usize, l_idx: usize, x_idx: usize) -> f64 {
        assert_eq!(self.k, 3);
        let (a, b) = match c {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let or_c = |rc_observed: bool| {
            let base = PatternId::complete(3).with_bit(c, rc_observed);
            let q_b0 = self.q_true(a, base.with_bit(b, false), l_idx, x_idx);
            let q_b1 = self.q_true(a, base, l_idx, x_idx);
            ((1.0 - q_b0) / q_b0) / ((1.0 - q_b1) / q_b1)
        };
        or_c(false) / or_c(true)
    }

    /// True pairwise interaction parameters for K=3 as log-odds-ratio
    /// tables: `theta[c][l_c][x]` plus the constant `theta4`.
    pub fn true_theta3(&self) -> Result<Theta3> {
        if self.k != 3 {
            return Err(Error::InvalidSpec("theta parameters require K=3".into()));
        }
        let mut pair = vec![[vec![0.0; self.n_x()], vec![0.0; self.n_x()]]; 3];
        for c in 0..3 {
            let (a, b) = match c {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            for lc in 0..2 {
                for x_idx in 0..self.n_x() {
                    let l_idx = lc << c; // other coordinates irrelevant under NSC
                    pair[c][lc][x_idx] = self.pairwise_or_route(a, b, a, l_idx, x_idx).ln();
                }
            }
        }
        let theta4 = self.gamma3_route(0, 0, 0).ln();
        Ok(Theta3 { pair, theta4 })
    }

    /// `max_k |E[U(theta_k)]|` at the supplied theta,
    /// with g_i(L_i) = (1, L_i).
    pub fn verify_u_theta(&self, theta: &Theta3) -> Result<f64> {
        if self.k != 3 {
            return Err(Error::InvalidSpec("U(theta) requires K=3".into()));
        }
        let complete = self.n_r() - 1;
        // Expectations of U over the observed-data law; 7 components.
        let mut u = [0.0f64; 7];
        for x_idx in 0..self.n_x() {
            for l_idx in 0..self.n_l() {
                let l = index_to_values(l_idx, 3);
                // complete-case reweighting term per target pattern
                let mut q1 = [0.0f64; 3];
                for i in 0..3 {
                    q1[i] = self.q_obs(i, l_idx, x_idx);
                }
                let cc = self.joint(complete, l_idx, x_idx);
                let denom: f64 = q1.iter().product();
                for c in 0..3 {
                    // pattern with only variable c observed
                    let target = 1usize << c;
                    let lc = ((l_idx >> c) & 1) as usize;
                    let theta_c = theta.pair[c][lc][x_idx];
                    let mut w = theta_c.exp();
                    for i in 0..3 {
                        w *= if i == c { q1[i] } else { 1.0 - q1[i] };
                    }
                    let reweight = cc / denom * w;
                    let direct = self.joint(target, l_idx, x_idx);
                    let resid_mass = reweight - direct;
                    u[2 * c] += resid_mass;
                    u[2 * c + 1] += resid_mass * l[c];
                }
                // all-missing pattern
                let mut w = theta.theta4.exp();
                for c in 0..3 {
                    let lc = ((l_idx >> c) & 1) as usize;
                    w *= theta.pair[c][lc][x_idx].exp();
                }
                for i in 0..3 {
                    w *= 1.0 - q1[i];
                }
                u[6] += cc / denom * w - self.joint(0, l_idx, x_idx);
            }
        }
        Ok(u.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs())))
    }

    /// Double-robustness check: the population AIPW estimating equation at the
    /// true beta under a misspecification scenario. Perturbations are a
    /// fixed additive 0.3 on the targeted component.
    pub fn verify_double_robustness(
        &self,
        functional: &TargetFunctional,
        scenario: DrScenario,
    ) -> f64 {
        let beta = self.true_functional(functional);
        let perturb = 0.3;
        let or_wrong = matches!(scenario, DrScenario::OrWrong);
        let pi_wrong = matches!(scenario, DrScenario::PiWrong | DrScenario::BothWrong);
        let pm_wrong = matches!(scenario, DrScenario::PmWrong | DrScenario::BothWrong);

        // scenario odds ratio: the exact pattern odds ratio anchored at
        // l = 0 (including interaction-term dependence on L), optionally
        // perturbed by terms that vanish at the anchor
        let complete_idx = self.n_r() - 1;
        let log_or = |r: PatternId, l_idx: usize, x_idx: usize| -> f64 {
            let ri = r.index() as usize;
            let mut s = (self.cond_r(ri, l_idx, x_idx) / self.cond_r(complete_idx, l_idx, x_idx))
                .ln()
                - (self.cond_r(ri, 0, x_idx) / self.cond_r(complete_idx, 0, x_idx)).ln();
            if or_wrong {
                for i in 0..self.k {
                    if !r.is_observed(i) {
                        for j in 0..self.k {
                            if j != i {
                                s += perturb * bit(l_idx, j);
                            }
                        }
                    }
                }
            }
            s
        };

        // pattern-mixture value for pattern r at an observed cell
        let pm = |r: PatternId, l_idx: usize, x_idx: usize| -> f64 {
            let obs_mask = r.index() as usize;
            let key = l_idx & obs_mask;
            let free = !obs_mask & (self.n_l() - 1);
            let complete = self.n_r() - 1;
            let mut num = 0.0;
            let mut den = 0.0;
            for l in compatible(key, free) {
                let cc = self.joint(complete, l, x_idx);
                let or = log_or(r, l, x_idx).exp();
                num += cc * or * (functional.eval(&index_to_values(l, self.k)) - beta);
                den += cc * or;
            }
            let mut m = num / den;
            if pm_wrong {
                m += perturb;
            }
            m
        };

        // baseline pattern-probability ratios at l = 0
        let rho = |r: PatternId, x_idx: usize| -> f64 {
            let mut v =
                self.cond_r(r.index() as usize, 0, x_idx) / self.cond_r(complete_idx, 0, x_idx);
            if pi_wrong {
                v *= perturb.exp();
            }
            v
        };

        let mut value = 0.0;
        for x_idx in 0..self.n_x() {
            for l_idx in 0..self.n_l() {
                if self.p_lx(l_idx, x_idx) <= 0.0 {
                    continue;
                }
                let phi_full = functional.eval(&index_to_values(l_idx, self.k)) - beta;
                // model-implied pattern probabilities
                let mut inv_pi_j = 1.0;
                let mut pis = vec![0.0; self.n_r()];
                for r in PatternId::all(self.k) {
                    if r.is_complete() {
                        continue;
                    }
                    let v = log_or(r, l_idx, x_idx).exp() * rho(r, x_idx);
                    pis[r.index() as usize] = v;
                    inv_pi_j += v;
                }
                let pi_j = 1.0 / inv_pi_j;

                for r in PatternId::all(self.k) {
                    let pr = self.joint(r.index() as usize, l_idx, x_idx);
                    if pr <= 0.0 {
                        continue;
                    }
                    let contrib = if r.is_complete() {
                        let mut aug = 0.0;
                        for rj in PatternId::all(self.k) {
                            if rj.is_complete() {
                                continue;
                            }
                            aug += pis[rj.index() as usize] * pi_j * pm(rj, l_idx, x_idx);
                        }
                        (phi_full - aug) / pi_j
                    } else {
                        pm(r, l_idx, x_idx)
                    };
                    value += pr * contrib;
                }
            }
        }
        value
    }

    /// Empirical-style sampling table: cumulative probabilities over all
    /// cells, in index order.
    pub fn cell_table(&self) -> &[f64] {
        &self.probs
    }
}

/// K=3 interaction parameters on the log-odds-ratio scale.
#[derive(Debug, Clone)]
pub struct Theta3 {
    /// `pair[c][l_c][x_idx]`: log pairwise OR between the two indicators
    /// other than c.
    pub pair: Vec<[Vec<f64>; 2]>,
    pub theta4: f64,
}

#[derive(Debug, Clone)]
pub struct NscReport {
    pub per_variable_ok: Vec<bool>,
    pub gaps: Vec<f64>,
    pub max_gap: f64,
}

impl NscReport {
    pub fn passes(&self) -> bool {
        self.per_variable_ok.iter().all(|&b| b)
    }
}

#[derive(Debug, Clone)]
pub struct IdentReport {
    pub max_missingness_error: f64,
    pub beta_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrScenario {
    BothCorrect,
    PiWrong,
    PmWrong,
    BothWrong,
    OrWrong,
}

impl DrScenario {
    pub fn all() -> [DrScenario; 5] {
        [
            DrScenario::BothCorrect,
            DrScenario::PiWrong,
            DrScenario::PmWrong,
            DrScenario::BothWrong,
            DrScenario::OrWrong,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            DrScenario::BothCorrect => "both-correct",
            DrScenario::PiWrong => "pi-wrong",
            DrScenario::PmWrong => "pm-wrong",
            DrScenario::BothWrong => "both-wrong",
            DrScenario::OrWrong => "or-wrong",
        }
    }
}

/// Draw a randomized NSC law spec: random base law, per-variable
/// potentials linear in (L_{-i}, X), pairwise interactions in the third
/// variable (and X), and a constant three-way term.
pub fn random_nsc_spec<R: Rng>(k: usize, p: usize, rng: &mut R) -> DiscreteLawSpec {
    let coef = |rng: &mut R| rng.gen_range(-0.9..0.9);
    let main: Vec<f64> = (0..k + p).map(|_| coef(rng)).collect();
    let mut pairwise = Vec::new();
    for a in 0..k + p {
        for b in (a + 1)..k + p {
            if rng.gen_bool(0.5) {
                pairwise.push((a, b, coef(rng)));
            }
        }
    }
    let mut potentials = Vec::new();
    for i in 0..k {
        let mut terms = vec![Term::intercept()];
        let mut coefs = vec![rng.gen_range(-0.5..0.5)];
        for j in 0..k {
            if j != i {
                terms.push(Term::of(vec![Factor::l(j)]));
                coefs.push(coef(rng));
            }
        }
        for m in 0..p {
            terms.push(Term::of(vec![Factor::x(m)]));
            coefs.push(coef(rng));
        }
        potentials.push(InteractionTerm {
            vars: vec![i],
            func: LinearFunction::new(BasisSpec::new(terms), coefs).unwrap(),
        });
    }
    // pairwise interactions among indicators, depending on the variables
    // outside the pair (and X)
    for a in 0..k {
        for b in (a + 1)..k {
            let mut terms = vec![Term::intercept()];
            let mut coefs = vec![rng.gen_range(-0.4..0.4)];
            for c in 0..k {
                if c != a && c != b {
                    terms.push(Term::of(vec![Factor::l(c)]));
                    coefs.push(rng.gen_range(-0.4..0.4));
                }
            }
            for m in 0..p {
                terms.push(Term::of(vec![Factor::x(m)]));
                coefs.push(rng.gen_range(-0.4..0.4));
            }
            potentials.push(InteractionTerm {
                vars: vec![a, b],
                func: LinearFunction::new(BasisSpec::new(terms), coefs).unwrap(),
            });
        }
    }
    if k == 3 {
        potentials.push(InteractionTerm {
            vars: vec![0, 1, 2],
            func: LinearFunction::new(
                BasisSpec::new(vec![Term::intercept()]),
                vec![rng.gen_range(-0.4..0.4)],
            )
            .unwrap(),
        });
    }
    DiscreteLawSpec {
        k,
        p,
        base: BaseLaw::LogLinear { main, pairwise },
        potentials,
    }
}

/// Corrupt a spec with a self-censoring edge: variable `i`'s potential
/// gains a term in its own L_i.
pub fn add_self_censoring(spec: &mut DiscreteLawSpec, i: usize, strength: f64) {
    spec.potentials.push(InteractionTerm {
        vars: vec![i],
        func: LinearFunction::new(
            BasisSpec::new(vec![Term::of(vec![Factor::l(i)])]),
            vec![strength],
        )
        .unwrap(),
    });
}
