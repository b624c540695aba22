//! Odds-ratio parameterization of the missingness mechanism.
//!
//! Per-variable log-odds-ratio functions `delta_h_i(L_{-i}, X)` are
//! anchored so they vanish at a reference point `l0` (default zero). A
//! [`SelectionModel`] adds per-variable baseline terms in X and, for
//! K=3, optional pairwise/three-way interaction terms among the
//! missingness indicators, and induces pattern probabilities through the
//! Chen factorization. All probability products are computed in log
//! space and normalized with log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::PatternId;

/// A single multiplicand in a basis term: either an L coordinate
/// centered at its reference value, or an X coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    /// `l[index] - reference` (0-based coordinate).
    L { index: usize, reference: f64 },
    /// `x[index]` (0-based coordinate).
    X { index: usize },
}

impl Factor {
    pub fn l(index: usize) -> Self {
        Factor::L {
            index,
            reference: 0.0,
        }
    }

    pub fn l_ref(index: usize, reference: f64) -> Self {
        Factor::L { index, reference }
    }

    pub fn x(index: usize) -> Self {
        Factor::X { index }
    }

    fn eval(&self, l: &[f64], x: &[f64]) -> f64 {
        match *self {
            Factor::L { index, reference } => l[index] - reference,
            Factor::X { index } => x[index],
        }
    }
}

/// One feature: a product of factors. An empty product is the constant 1
/// (an intercept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn intercept() -> Self {
        Term { factors: vec![] }
    }

    pub fn of(factors: Vec<Factor>) -> Self {
        Term { factors }
    }

    pub fn eval(&self, l: &[f64], x: &[f64]) -> f64 {
        self.factors.iter().map(|f| f.eval(l, x)).product()
    }

    fn touches_l(&self, i: usize) -> bool {
        self.factors
            .iter()
            .any(|f| matches!(f, Factor::L { index, .. } if *index == i))
    }

    pub(crate) fn has_l(&self) -> bool {
        self.factors.iter().any(|f| matches!(f, Factor::L { .. }))
    }
}

/// An ordered collection of features over (L, X).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub terms: Vec<Term>,
}

impl BasisSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        BasisSpec { terms }
    }

    /// Linear-in-`L_{-i}` basis: one centered linear term per j != i.
    pub fn linear_l_minus(i: usize, k: usize, l0: &[f64]) -> Self {
        BasisSpec {
            terms: (0..k)
                .filter(|&j| j != i)
                .map(|j| Term::of(vec![Factor::l_ref(j, l0[j])]))
                .collect(),
        }
    }

    /// Intercept plus one linear term per X coordinate.
    pub fn intercept_linear_x(p: usize) -> Self {
        let mut terms = vec![Term::intercept()];
        terms.extend((0..p).map(|m| Term::of(vec![Factor::x(m)])));
        BasisSpec { terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, l: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.terms.iter().map(|t| t.eval(l, x)));
    }

    pub fn eval_vec(&self, l: &[f64], x: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(l, x)).collect()
    }
}

/// A basis together with a coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFunction {
    pub basis: BasisSpec,
    pub coefs: Vec<f64>,
}

impl LinearFunction {
    pub fn new(basis: BasisSpec, coefs: Vec<f64>) -> Result<Self> {
        if basis.len() != coefs.len() {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} terms but {} coefficients supplied",
                basis.len(),
                coefs.len()
            )));
        }
        Ok(LinearFunction { basis, coefs })
    }

    pub fn zero(basis: BasisSpec) -> Self {
        let coefs = vec![0.0; basis.len()];
        LinearFunction { basis, coefs }
    }

    pub fn eval(&self, l: &[f64], x: &[f64]) -> f64 {
        self.basis
            .terms
            .iter()
            .zip(&self.coefs)
            .map(|(t, c)| c * t.eval(l, x))
            .sum()
    }

    /// Only the terms containing an L factor; vanishes at the anchor
    /// point where every L factor sits at its reference.
    pub fn eval_l_part(&self, l: &[f64], x: &[f64]) -> f64 {
        self.basis
            .terms
            .iter()
            .zip(&self.coefs)
            .filter(|(t, _)| t.has_l())
            .map(|(t, c)| c * t.eval(l, x))
            .sum()
    }
}

/// Per-variable log-odds-ratio functions `delta_h_i`.
///
/// Each `delta_h_i` must vanish at the reference point for every x, so
/// every term must contain at least one L factor and no term may touch
/// `L_i` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsRatioSpec {
    pub k: usize,
    pub delta_h: Vec<LinearFunction>,
}

impl OddsRatioSpec {
    pub fn new(k: usize, delta_h: Vec<LinearFunction>) -> Result<Self> {
        if delta_h.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "expected {k} delta_h functions, got {}",
                delta_h.len()
            )));
        }
        for (i, f) in delta_h.iter().enumerate() {
            for term in &f.basis.terms {
                if term.touches_l(i) {
                    return Err(Error::InvalidSpec(format!(
                        "delta_h_{} may not depend on L_{}",
                        i + 1,
                        i + 1
                    )));
                }
                if !term.has_l() {
                    return Err(Error::InvalidSpec(format!(
                        "delta_h_{} contains a term with no L factor; \
                         pure-X terms belong in the baseline h_X",
                        i + 1
                    )));
                }
            }
        }
        Ok(OddsRatioSpec { k, delta_h })
    }

    /// Evaluate `delta_h_i` at `l_minus_i` (length K-1, coordinate i
    /// removed) and `x`.
    pub fn delta_h_eval(&self, i: usize, l_minus_i: &[f64], x: &[f64]) -> Result<f64> {
        if l_minus_i.len() != self.k - 1 {
            return Err(Error::DimensionMismatch(format!(
                "l_minus_i has length {}, expected {}",
                l_minus_i.len(),
                self.k - 1
            )));
        }
        let mut l = Vec::with_capacity(self.k);
        l.extend_from_slice(&l_minus_i[..i]);
        l.push(f64::NAN); // never read: no term touches L_i
        l.extend_from_slice(&l_minus_i[i..]);
        Ok(self.delta_h[i].eval(&l, x))
    }

    /// `delta_h_i` evaluated with the full L vector (coordinate i ignored).
    pub fn delta_h_full(&self, i: usize, l: &[f64], x: &[f64]) -> f64 {
        self.delta_h[i].eval(l, x)
    }

    /// `log OR(r, L | X) = sum_i (1 - r_i) delta_h_i(L_{-i}, X)`.
    pub fn log_odds_ratio(&self, r: PatternId, l: &[f64], x: &[f64]) -> Result<f64> {
        if l.len() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "l has length {}, expected {}",
                l.len(),
                self.k
            )));
        }
        let mut sum = 0.0;
        for i in 0..self.k {
            if !r.is_observed(i) {
                sum += self.delta_h[i].eval(l, x);
            }
        }
        Ok(sum)
    }

    /// `OR(r, L | X)`; equals 1 at the complete-case pattern.
    pub fn odds_ratio_eval(&self, r: PatternId, l: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.log_odds_ratio(r, l, x)?.exp())
    }
}

/// K=3 interaction terms on the odds-ratio scale: `pair[c]` is the log
/// odds ratio between the other two indicators as a function of
/// `(L_c, X)`, and `three_way` is the constant log three-way term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaTerms {
    pub pair: Vec<LinearFunction>,
    pub three_way: f64,
}

impl ThetaTerms {
    pub fn validate(&self, k: usize) -> Result<()> {
        if k != 3 {
            return Err(Error::InvalidSpec(
                "interaction terms are supported only for K=3".into(),
            ));
        }
        if self.pair.len() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "expected 3 pairwise interaction functions, got {}",
                self.pair.len()
            )));
        }
        for (c, f) in self.pair.iter().enumerate() {
            for term in &f.basis.terms {
                for j in 0..3 {
                    if j != c && term.touches_l(j) {
                        return Err(Error::InvalidSpec(format!(
                            "pairwise interaction {} may depend only on L_{} and X",
                            c + 1,
                            c + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Interaction exponent contributed by pattern r.
    fn log_weight(&self, r: PatternId, l: &[f64], x: &[f64]) -> f64 {
        let m0 = !r.is_observed(0);
        let m1 = !r.is_observed(1);
        let m2 = !r.is_observed(2);
        let mut sum = 0.0;
        if m1 && m2 {
            sum += self.pair[0].eval(l, x);
        }
        if m0 && m2 {
            sum += self.pair[1].eval(l, x);
        }
        if m0 && m1 {
            sum += self.pair[2].eval(l, x);
        }
        if m0 && m1 && m2 {
            sum += self.three_way;
        }
        sum
    }
}

/// A full parametric missingness mechanism: log-odds-ratio functions,
/// per-variable baseline terms in X, and optional K=3 interactions.
///
/// The induced conditional of `R_i` given the complete-case pattern on
/// the rest is `logit p(R_i=1 | R_{-i}=1, L_{-i}, X) = delta_h_i + h_{i,X}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    pub or_spec: OddsRatioSpec,
    /// `h_{i,X}(X)`, one per variable; basis over X only (intercept allowed).
    pub baseline: Vec<LinearFunction>,
    pub theta: Option<ThetaTerms>,
}

impl SelectionModel {
    pub fn new(
        or_spec: OddsRatioSpec,
        baseline: Vec<LinearFunction>,
        theta: Option<ThetaTerms>,
    ) -> Result<Self> {
        if baseline.len() != or_spec.k {
            return Err(Error::DimensionMismatch(format!(
                "expected {} baseline functions, got {}",
                or_spec.k,
                baseline.len()
            )));
        }
        for (i, f) in baseline.iter().enumerate() {
            if f.basis.terms.iter().any(|t| t.has_l()) {
                return Err(Error::InvalidSpec(format!(
                    "baseline h_{},X may depend only on X",
                    i + 1
                )));
            }
        }
        if let Some(theta) = &theta {
            theta.validate(or_spec.k)?;
        }
        Ok(SelectionModel {
            or_spec,
            baseline,
            theta,
        })
    }

    pub fn k(&self) -> usize {
        self.or_spec.k
    }

    /// `logit p(R_i=1 | R_{-i}=1, L_{-i}, X)`.
    pub fn logit_univariate(&self, i: usize, l: &[f64], x: &[f64]) -> f64 {
        self.or_spec.delta_h[i].eval(l, x) + self.baseline[i].eval(l, x)
    }

    /// Log probabilities of all `2^K` patterns at `(l, x)`, in pattern
    /// index order. A single normalization is shared across patterns.
    pub fn log_pattern_prob_all(&self, l: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let k = self.k();
        if l.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "l has length {}, expected {k}",
                l.len()
            )));
        }
        // log p(R_i = b | R_{-i}=1, L_{-i}, X) for b in {1, 0}
        let mut log_q1 = vec![0.0; k];
        let mut log_q0 = vec![0.0; k];
        for i in 0..k {
            let eta = self.logit_univariate(i, l, x);
            // -log(1 + exp(-eta)) and -log(1 + exp(eta)), stably
            log_q1[i] = -softplus(-eta);
            log_q0[i] = -softplus(eta);
        }
        let n_pat = 1usize << k;
        let mut log_num = vec![0.0; n_pat];
        for pat in PatternId::all(k) {
            let mut s = 0.0;
            for i in 0..k {
                s += if pat.is_observed(i) { log_q1[i] } else { log_q0[i] };
            }
            if let Some(theta) = &self.theta {
                s += theta.log_weight(pat, l, x);
            }
            log_num[pat.index() as usize] = s;
        }
        let log_c = log_sum_exp(&log_num);
        if !log_c.is_finite() {
            return Err(Error::Positivity(
                "all pattern numerators underflowed at this (l, x)".into(),
            ));
        }
        for v in &mut log_num {
            *v -= log_c;
        }
        Ok(log_num)
    }

    pub fn pattern_prob_all(&self, l: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .log_pattern_prob_all(l, x)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    pub fn pattern_prob(&self, r: PatternId, l: &[f64], x: &[f64]) -> Result<f64> {
        let all = self.log_pattern_prob_all(l, x)?;
        Ok(all[r.index() as usize].exp())
    }

    /// `p(R_i = 1 | R_{-i} = 1, L_{-i}, X)`.
    pub fn univariate_prob(&self, i: usize, l: &[f64], x: &[f64]) -> f64 {
        let eta = self.logit_univariate(i, l, x);
        1.0 / (1.0 + (-eta).exp())
    }

    /// Full `log OR(r, L | X)` anchored at the reference point: the
    /// per-variable log-odds-ratio terms plus the L-dependent part of
    /// any interaction term whose indicator pair is missing under `r`.
    /// Matches [`OddsRatioSpec::log_odds_ratio`] when interactions are
    /// absent or constant in L.
    pub fn log_odds_ratio_full(&self, r: PatternId, l: &[f64], x: &[f64]) -> Result<f64> {
        let mut sum = self.or_spec.log_odds_ratio(r, l, x)?;
        if let Some(theta) = &self.theta {
            let m: Vec<bool> = (0..3).map(|i| !r.is_observed(i)).collect();
            if m[1] && m[2] {
                sum += theta.pair[0].eval_l_part(l, x);
            }
            if m[0] && m[2] {
                sum += theta.pair[1].eval_l_part(l, x);
            }
            if m[0] && m[1] {
                sum += theta.pair[2].eval_l_part(l, x);
            }
        }
        Ok(sum)
    }
}

/// `log(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// The benchmark binary log-odds-ratio potentials over (L, X),
/// expressed with per-coordinate anchors; `(1 - L_2)` terms become
/// `-(L_2 - 1)`. With `with_x` false the X terms are absent.
pub fn benchmark_binary_delta_h(with_x: bool) -> Vec<LinearFunction> {
    let lx = |coefs: Vec<(f64, Vec<Factor>)>| {
        let (c, t): (Vec<f64>, Vec<Term>) =
            coefs.into_iter().map(|(c, f)| (c, Term::of(f))).unzip();
        LinearFunction::new(BasisSpec::new(t), c).unwrap()
    };
    let mut dh1 = vec![
        (0.8, vec![Factor::l_ref(1, 1.0)]), // -0.8 (1 - L2)
        (0.6, vec![Factor::l(2)]),
    ];
    let mut dh2 = vec![
        (0.8, vec![Factor::l_ref(0, 1.0)]), // -0.8 (1 - L1)
        (0.7, vec![Factor::l(2)]),
    ];
    let mut dh3 = vec![
        (0.5, vec![Factor::l(0)]),
        (-0.5, vec![Factor::l_ref(1, 1.0)]), // 0.5 (1 - L2)
    ];
    if with_x {
        dh1.extend([
            (0.5, vec![Factor::x(0)]),
            (0.7, vec![Factor::x(1)]),
            (0.7, vec![Factor::x(0), Factor::x(1)]),
        ]);
        dh2.extend([
            (-0.7, vec![]), // -0.7 (1 - X1) = -0.7 + 0.7 X1
            (0.7, vec![Factor::x(0)]),
            (-0.5, vec![Factor::x(1)]),
            (0.7, vec![Factor::x(0), Factor::x(1)]),
        ]);
        dh3.extend([
            (0.2, vec![Factor::x(0)]),
            (-0.9, vec![Factor::x(1)]),
            (0.7, vec![Factor::x(0), Factor::x(1)]),
        ]);
    }
    vec![lx(dh1), lx(dh2), lx(dh3)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn binary_or_spec(with_x: bool) -> OddsRatioSpec {
        // The raw potentials minus their value at L=0 are valid
        // delta_h functions; pure-L parts only.
        let raw = benchmark_binary_delta_h(with_x);
        let pure_l: Vec<LinearFunction> = raw
            .into_iter()
            .map(|f| {
                let (terms, coefs): (Vec<Term>, Vec<f64>) = f
                    .basis
                    .terms
                    .into_iter()
                    .zip(f.coefs)
                    .filter(|(t, _)| t.has_l())
                    .map(|(mut t, c)| {
                        // re-anchor L factors at 0 so delta_h(0) = 0
                        for fac in &mut t.factors {
                            if let Factor::L { reference, .. } = fac {
                                *reference = 0.0;
                            }
                        }
                        (t, c)
                    })
                    .unzip();
                LinearFunction::new(BasisSpec::new(terms), coefs).unwrap()
            })
            .collect();
        OddsRatioSpec::new(3, pure_l).unwrap()
    }

    #[test]
    fn benchmark_delta_h_values() {
        // direct substitution into the raw potentials
        let dh = benchmark_binary_delta_h(true);
        // delta_h_3 at L1=1, L2=1, X=(0,0) -> 0.5
        assert_relative_eq!(dh[2].eval(&[1.0, 1.0, f64::NAN], &[0.0, 0.0]), 0.5);
        // delta_h_1 at L2=0, L3=0, X=(0,0) -> -0.8
        assert_relative_eq!(dh[0].eval(&[f64::NAN, 0.0, 0.0], &[0.0, 0.0]), -0.8);
    }

    #[test]
    fn delta_h_vanishes_at_reference() {
        let spec = binary_or_spec(true);
        for x in [[0.0, 0.0], [1.0, 0.0], [0.3, -2.0]] {
            for i in 0..3 {
                assert_eq!(spec.delta_h_eval(i, &[0.0, 0.0], &x).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn delta_h_rejects_wrong_length() {
        let spec = binary_or_spec(false);
        assert!(spec.delta_h_eval(0, &[0.0], &[]).is_err());
    }

    #[test]
    fn odds_ratio_complete_case_is_one() {
        let spec = binary_or_spec(true);
        let r = PatternId::complete(3);
        assert_eq!(
            spec.odds_ratio_eval(r, &[1.0, 0.0, 1.0], &[1.0, 1.0]).unwrap(),
            1.0
        );
    }

    #[test]
    fn odds_ratio_benchmark_value() {
        // r = (1,1,0): exponent is the raw delta_h_3 at L=(1,1,.), X=(0,0),
        // re-anchored at zero: 0.5 L1 - 0.5 L2 evaluated at (1,1) is 0,
        // so compare against the raw potentials instead.
        let dh = benchmark_binary_delta_h(true);
        let v = dh[2].eval(&[1.0, 1.0, f64::NAN], &[0.0, 0.0]).exp();
        assert_relative_eq!(v, 0.5f64.exp(), epsilon = 1e-12);
        assert_relative_eq!(v, 1.64872, epsilon = 1e-5);
    }

    #[test]
    fn zero_coefficients_give_unit_odds_ratio() {
        let dh = (0..3)
            .map(|i| LinearFunction::zero(BasisSpec::linear_l_minus(i, 3, &[0.0; 3])))
            .collect();
        let spec = OddsRatioSpec::new(3, dh).unwrap();
        for r in PatternId::all(3) {
            assert_eq!(spec.odds_ratio_eval(r, &[0.3, -1.0, 2.0], &[]).unwrap(), 1.0);
        }
    }

    #[test]
    fn rejects_self_referential_delta_h() {
        let f = LinearFunction::new(
            BasisSpec::new(vec![Term::of(vec![Factor::l(0)])]),
            vec![1.0],
        )
        .unwrap();
        let zero1 = LinearFunction::zero(BasisSpec::linear_l_minus(1, 3, &[0.0; 3]));
        let zero2 = LinearFunction::zero(BasisSpec::linear_l_minus(2, 3, &[0.0; 3]));
        assert!(OddsRatioSpec::new(3, vec![f, zero1, zero2]).is_err());
    }

    fn uniform_model() -> SelectionModel {
        let dh = (0..3)
            .map(|i| LinearFunction::zero(BasisSpec::linear_l_minus(i, 3, &[0.0; 3])))
            .collect();
        let or_spec = OddsRatioSpec::new(3, dh).unwrap();
        let baseline = (0..3)
            .map(|_| LinearFunction::zero(BasisSpec::intercept_linear_x(0)))
            .collect();
        SelectionModel::new(or_spec, baseline, None).unwrap()
    }

    #[test]
    fn uniform_model_gives_one_eighth() {
        let model = uniform_model();
        let probs = model.pattern_prob_all(&[0.5, 1.0, -2.0], &[]).unwrap();
        for pr in probs {
            assert_relative_eq!(pr, 0.125, epsilon = 1e-14);
        }
        let complete = model
            .pattern_prob(PatternId::complete(3), &[0.0, 0.0, 0.0], &[])
            .unwrap();
        assert_relative_eq!(complete, 0.125, epsilon = 1e-14);
    }

    #[test]
    fn independence_factorization_has_unit_normalizer() {
        // no interactions: p(r | l, x) is the product of univariate
        // bernoullis, so probabilities match the product directly
        let spec = binary_or_spec(false);
        let baseline = (0..3)
            .map(|i| {
                LinearFunction::new(BasisSpec::intercept_linear_x(0), vec![0.2 * (i as f64 - 1.0)])
                    .unwrap()
            })
            .collect();
        let model = SelectionModel::new(spec, baseline, None).unwrap();
        let l = [1.0, 0.0, 1.0];
        let probs = model.pattern_prob_all(&l, &[]).unwrap();
        for pat in PatternId::all(3) {
            let mut expected = 1.0;
            for i in 0..3 {
                let eta = model.logit_univariate(i, &l, &[]);
                let q1 = 1.0 / (1.0 + (-eta).exp());
                expected *= if pat.is_observed(i) { q1 } else { 1.0 - q1 };
            }
            assert_relative_eq!(probs[pat.index() as usize], expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn pattern_prob_consistent_with_all() {
        let spec = binary_or_spec(true);
        let baseline = (0..3)
            .map(|_| {
                LinearFunction::new(BasisSpec::intercept_linear_x(2), vec![0.1, -0.2, 0.3])
                    .unwrap()
            })
            .collect();
        let theta = ThetaTerms {
            pair: (0..3)
                .map(|c| {
                    LinearFunction::new(
                        BasisSpec::new(vec![Term::intercept(), Term::of(vec![Factor::l(c)])]),
                        vec![0.2, -0.3],
                    )
                    .unwrap()
                })
                .collect(),
            three_way: 0.4,
        };
        let model = SelectionModel::new(spec, baseline, Some(theta)).unwrap();
        let l = [1.0, 1.0, 0.0];
        let x = [1.0, 0.0];
        let all = model.pattern_prob_all(&l, &x).unwrap();
        assert_relative_eq!(all.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for pat in PatternId::all(3) {
            assert_relative_eq!(
                model.pattern_prob(pat, &l, &x).unwrap(),
                all[pat.index() as usize],
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn monotone_response_to_delta_h_coefficient() {
        let mut spec = binary_or_spec(false);
        let r = PatternId::encode(&[0, 1, 1]).unwrap();
        let l = [f64::NAN, 1.0, 1.0];
        let base = spec.odds_ratio_eval(r, &l, &[]).unwrap();
        spec.delta_h[0].coefs[0] += 0.5; // coefficient on L2, l exceeds reference
        let bumped = spec.odds_ratio_eval(r, &l, &[]).unwrap();
        assert!(bumped > base);
    }
}
