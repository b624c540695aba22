//! Target functionals, AIPW/IPW estimation, the stacked-equation
//! sandwich variance, and the percentile bootstrap.
//!
//! The augmented estimating equation is affine in beta, so the point
//! estimate is obtained in closed form after the nuisance fits: with
//! every incomplete pattern represented in the data the beta-slope of
//! the empirical equation is exactly -1 per record, and patterns absent
//! from the data simply drop out of the augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{
    fit_pattern_mixture, fit_selection, numeric_jacobian, NormalEq, OrFitMethod, PatternMixtureFit,
    PmForm, SelectionTemplate,
};
use crate::odds::{softplus, BasisSpec, Factor, SelectionModel, Term};
use crate::patterns::{Dataset, PatternId, Record};

/// The full-data functional `beta = E[b(L)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetFunctional {
    /// `E[L_i]` (0-based index).
    Mean(usize),
    /// `E[prod_i L_i]`.
    Product,
    /// `P(L = cell)` for binary L; `cell[i]` in {0, 1}.
    Cell(Vec<u8>),
}

impl TargetFunctional {
    pub fn eval(&self, l: &[f64]) -> f64 {
        match self {
            TargetFunctional::Mean(i) => l[*i],
            TargetFunctional::Product => l.iter().product(),
            TargetFunctional::Cell(bits) => {
                let hit = bits
                    .iter()
                    .zip(l)
                    .all(|(&b, &v)| (v - b as f64).abs() < 0.5);
                hit as u8 as f64
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            TargetFunctional::Mean(i) => format!("mean_L{}", i + 1),
            TargetFunctional::Product => "product".to_string(),
            TargetFunctional::Cell(bits) => {
                let s: String = bits.iter().map(|b| b.to_string()).collect();
                format!("cell_{s}")
            }
        }
    }
}

/// The covariate transform used for nuisance-model misspecification:
/// `(x1, x2) -> (log(1/x1 + 1/x2), sqrt(x1 x2))`. Requires two strictly
/// positive covariates.
pub fn transform_x(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != 2 {
        return Err(Error::InvalidSpec(format!(
            "covariate transform requires exactly 2 covariates, got {}",
            x.len()
        )));
    }
    if x[0] <= 0.0 || x[1] <= 0.0 {
        return Err(Error::NonPositiveCovariate(x[0], x[1]));
    }
    Ok(vec![(1.0 / x[0] + 1.0 / x[1]).ln(), (x[0] * x[1]).sqrt()])
}

/// Estimation settings.
#[derive(Debug, Clone)]
pub struct EstimateConfig {
    pub or_method: OrFitMethod,
    /// Fit K=3 interaction parameters and include them in pattern
    /// probabilities and odds-ratio weights.
    pub use_interactions: bool,
    /// Include the excluded coordinate `L_c` in the pair-interaction
    /// instruments. Disable when the interactions are known to depend
    /// only on X: the `L_c` instrument becomes ill-posed when the
    /// singleton-pattern support of `L_c` separates from the
    /// complete-case support.
    pub theta_l_term: bool,
    pub pm_form: PmForm,
    /// Complete-case probabilities below this are clipped (and counted).
    pub clip_eps: f64,
    /// Reference point for the odds-ratio anchoring. Defaults to the
    /// per-coordinate mean of the observed values: the fitted model is
    /// invariant to this choice, but the doubly-robust estimating
    /// equations lose their root when the anchor sits far outside the
    /// support of L.
    pub l0: Option<Vec<f64>>,
    /// Replace X by its transform in the outcome-leg (pattern-mixture)
    /// regressions.
    pub transform_outcome_x: bool,
    /// Replace X by its transform in the missingness-leg models.
    pub transform_missingness_x: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            or_method: OrFitMethod::Mle,
            use_interactions: true,
            theta_l_term: true,
            pm_form: PmForm::WeightedRatio,
            clip_eps: 1e-6,
            l0: None,
            transform_outcome_x: false,
            transform_missingness_x: false,
        }
    }
}

/// Point estimate with diagnostics; `se`/`ci` are attached by the
/// variance estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub functional: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub n: usize,
    pub n_complete: usize,
    pub n_clipped: usize,
}

/// Dataset with leg-specific covariate coordinates appended.
#[derive(Debug, Clone)]
struct Prepared {
    ds: Dataset,
    /// X coordinate indices for the outcome-leg bases.
    out_x: Vec<usize>,
    /// X coordinate indices for the missingness-leg bases.
    miss_x: Vec<usize>,
}

fn prepare(ds: &Dataset, cfg: &EstimateConfig) -> Result<Prepared> {
    let p = ds.p();
    let orig: Vec<usize> = (0..p).collect();
    if !cfg.transform_outcome_x && !cfg.transform_missingness_x {
        return Ok(Prepared {
            ds: ds.clone(),
            out_x: orig.clone(),
            miss_x: orig,
        });
    }
    let mut records = Vec::with_capacity(ds.n());
    for rec in ds.records() {
        let mut x = rec.x.clone();
        x.extend(transform_x(&rec.x)?);
        records.push(Record::new(rec.pattern, rec.l.clone(), x)?);
    }
    let appended: Vec<usize> = vec![p, p + 1];
    Ok(Prepared {
        ds: Dataset::new(ds.k(), p + 2, records)?,
        out_x: if cfg.transform_outcome_x {
            appended.clone()
        } else {
            orig.clone()
        },
        miss_x: if cfg.transform_missingness_x {
            appended
        } else {
            orig
        },
    })
}

fn x_basis(coords: &[usize]) -> BasisSpec {
    let mut terms = vec![Term::intercept()];
    terms.extend(coords.iter().map(|&j| Term::of(vec![Factor::x(j)])));
    BasisSpec::new(terms)
}

fn pm_basis_coords(r: PatternId, coords: &[usize]) -> BasisSpec {
    let mut terms = vec![Term::intercept()];
    terms.extend(r.observed().into_iter().map(|i| Term::of(vec![Factor::l(i)])));
    terms.extend(coords.iter().map(|&j| Term::of(vec![Factor::x(j)])));
    BasisSpec::new(terms)
}

/// Per-coordinate mean of the observed L values, used as the default
/// anchor for the odds-ratio parameterization.
fn observed_mean_anchor(ds: &Dataset) -> Vec<f64> {
    let k = ds.k();
    let mut sum = vec![0.0f64; k];
    let mut count = vec![0usize; k];
    for rec in ds.records() {
        for i in 0..k {
            if rec.pattern.is_observed(i) {
                sum[i] += rec.l[i];
                count[i] += 1;
            }
        }
    }
    (0..k)
        .map(|i| if count[i] > 0 { sum[i] / count[i] as f64 } else { 0.0 })
        .collect()
}

/// `orig_x` carries the untransformed covariate coordinates: the
/// odds-ratio interactions are part of the maintained model, so their
/// X terms never follow either nuisance-leg transform. The baseline
/// probabilities use `miss_x` and the doubly-robust covariate
/// regressions use `out_x`.
fn build_template(
    k: usize,
    l0: &[f64],
    orig_x: &[usize],
    miss_x: &[usize],
    out_x: &[usize],
    with_theta: bool,
    theta_l_term: bool,
) -> SelectionTemplate {
    let delta_h_basis = (0..k).map(|i| BasisSpec::linear_l_minus(i, k, l0)).collect();
    let baseline_basis = (0..k).map(|_| x_basis(miss_x)).collect();
    let mu_basis = (0..k).map(|_| x_basis(out_x)).collect();
    let theta_basis = with_theta.then(|| {
        (0..k)
            .map(|c| {
                let mut terms = vec![Term::intercept()];
                if theta_l_term {
                    terms.push(Term::of(vec![Factor::l_ref(c, l0[c])]));
                }
                terms.extend(orig_x.iter().map(|&j| Term::of(vec![Factor::x(j)])));
                BasisSpec::new(terms)
            })
            .collect()
    });
    SelectionTemplate {
        k,
        delta_h_basis,
        baseline_basis,
        mu_basis,
        theta_basis,
    }
}

/// A fitted AIPW estimate together with everything the sandwich
/// variance needs.
#[derive(Debug, Clone)]
pub struct AipwFit {
    pub report: EstimateReport,
    pub model: Option<SelectionModel>,
    /// Fitted incomplete patterns in index order, with their
    /// pattern-mixture fits and regression bases.
    pub pms: Vec<(PatternId, PatternMixtureFit, BasisSpec)>,
    prepared: Prepared,
    functional: TargetFunctional,
    cfg: EstimateConfig,
}

impl AipwFit {
    pub fn estimate(&self) -> f64 {
        self.report.estimate
    }
}

/// AIPW estimation: fit the selection model and pattern-mixture
/// regressions, then solve the affine estimating equation for beta.
pub fn estimate_aipw(
    ds: &Dataset,
    functional: &TargetFunctional,
    cfg: &EstimateConfig,
) -> Result<AipwFit> {
    let prepared = prepare(ds, cfg)?;
    let k = ds.k();
    if cfg.use_interactions && k != 3 {
        return Err(Error::InvalidSpec(
            "interaction terms are supported only for K=3".into(),
        ));
    }
    let support = prepared.ds.pattern_support();
    let n = prepared.ds.n();
    let n_complete = support.n_complete(k);

    if support.ever_missing(k).is_empty() {
        // fully observed data: beta is the sample mean
        let mean = prepared
            .ds
            .records()
            .iter()
            .map(|r| functional.eval(&r.l))
            .sum::<f64>()
            / n as f64;
        return Ok(AipwFit {
            report: EstimateReport {
                functional: functional.label(),
                estimate: mean,
                se: None,
                ci: None,
                n,
                n_complete,
                n_clipped: 0,
            },
            model: None,
            pms: Vec::new(),
            prepared,
            functional: functional.clone(),
            cfg: cfg.clone(),
        });
    }
    if n_complete == 0 {
        return Err(Error::InsufficientSupport(
            "no complete cases in the data".into(),
        ));
    }

    let l0 = cfg
        .l0
        .clone()
        .unwrap_or_else(|| observed_mean_anchor(&prepared.ds));
    let orig_x: Vec<usize> = (0..ds.p()).collect();
    let tmpl = build_template(
        k,
        &l0,
        &orig_x,
        &prepared.miss_x,
        &prepared.out_x,
        cfg.use_interactions,
        cfg.theta_l_term,
    );
    let model = fit_selection(&prepared.ds, &tmpl, cfg.or_method)?;

    let mut patterns: Vec<PatternId> = support
        .counts
        .iter()
        .filter(|(pat, &c)| !pat.is_complete() && c > 0)
        .map(|(&pat, _)| pat)
        .collect();
    patterns.sort();
    let mut pms = Vec::with_capacity(patterns.len());
    for &pat in &patterns {
        let basis = pm_basis_coords(pat, &prepared.out_x);
        let fit = fit_pattern_mixture(
            &prepared.ds,
            &model,
            pat,
            &basis,
            functional,
            cfg.pm_form,
        )?;
        pms.push((pat, fit, basis));
    }

    let (beta, n_clipped) = solve_affine(&prepared.ds, &model, &pms, functional, cfg)?;
    Ok(AipwFit {
        report: EstimateReport {
            functional: functional.label(),
            estimate: beta,
            se: None,
            ci: None,
            n,
            n_complete,
            n_clipped,
        },
        model: Some(model),
        pms,
        prepared,
        functional: functional.clone(),
        cfg: cfg.clone(),
    })
}

fn solve_affine(
    ds: &Dataset,
    model: &SelectionModel,
    pms: &[(PatternId, PatternMixtureFit, BasisSpec)],
    functional: &TargetFunctional,
    cfg: &EstimateConfig,
) -> Result<(f64, usize)> {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut n_clipped = 0usize;
    for rec in ds.records() {
        if rec.pattern.is_complete() {
            let pis = model.pattern_prob_all(&rec.l, &rec.x)?;
            let pi_j_raw = pis[pis.len() - 1];
            let pi_j = if pi_j_raw < cfg.clip_eps {
                n_clipped += 1;
                cfg.clip_eps
            } else {
                pi_j_raw
            };
            let b = functional.eval(&rec.l);
            let mut aug0 = 0.0; // sum_j pi_j m_j^b
            let mut pi_sum = 0.0;
            for (pat, pm, _) in pms {
                let pi = pis[pat.index() as usize];
                aug0 += pi * pm.eval(&rec.l, &rec.x);
                pi_sum += pi;
            }
            s0 += (b - aug0) / pi_j;
            s1 += (pi_sum - 1.0) / pi_j;
        } else if let Some((_, pm, _)) = pms
            .iter()
            .find(|(pat, _, _)| *pat == rec.pattern)
        {
            s0 += pm.eval(&rec.l, &rec.x);
            s1 += -1.0;
        }
    }
    let n = ds.n() as f64;
    s0 /= n;
    s1 /= n;
    if s1.abs() < 1e-12 {
        return Err(Error::SingularMatrix(
            "degenerate beta equation (zero slope)".into(),
        ));
    }
    Ok((-s0 / s1, n_clipped))
}

/// Plain inverse-probability weighting: the augmentation terms are
/// dropped and beta is the weighted complete-case mean.
pub fn estimate_ipw(
    ds: &Dataset,
    functional: &TargetFunctional,
    cfg: &EstimateConfig,
) -> Result<EstimateReport> {
    let prepared = prepare(ds, cfg)?;
    let k = ds.k();
    let support = prepared.ds.pattern_support();
    let n = prepared.ds.n();
    let n_complete = support.n_complete(k);
    if support.ever_missing(k).is_empty() {
        let fit = estimate_aipw(ds, functional, cfg)?;
        return Ok(fit.report);
    }
    if n_complete == 0 {
        return Err(Error::InsufficientSupport(
            "no complete cases in the data".into(),
        ));
    }
    let l0 = cfg
        .l0
        .clone()
        .unwrap_or_else(|| observed_mean_anchor(&prepared.ds));
    let orig_x: Vec<usize> = (0..ds.p()).collect();
    let tmpl = build_template(
        k,
        &l0,
        &orig_x,
        &prepared.miss_x,
        &prepared.out_x,
        cfg.use_interactions && k == 3,
        cfg.theta_l_term,
    );
    let model = fit_selection(&prepared.ds, &tmpl, cfg.or_method)?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut n_clipped = 0usize;
    for rec in prepared.ds.records() {
        if !rec.pattern.is_complete() {
            continue;
        }
        let pi_raw = model.pattern_prob(PatternId::complete(k), &rec.l, &rec.x)?;
        let pi = if pi_raw < cfg.clip_eps {
            n_clipped += 1;
            cfg.clip_eps
        } else {
            pi_raw
        };
        num += functional.eval(&rec.l) / pi;
        den += 1.0 / pi;
    }
    Ok(EstimateReport {
        functional: functional.label(),
        estimate: num / den,
        se: None,
        ci: None,
        n,
        n_complete,
        n_clipped,
    })
}

/// Joint distribution of binary L: one AIPW estimate per cell sharing a
/// single selection-model fit, clamped to be nonnegative and
/// renormalized to sum to one.
pub fn estimate_joint_binary(ds: &Dataset, cfg: &EstimateConfig) -> Result<Vec<f64>> {
    let k = ds.k();
    if k > 14 {
        return Err(Error::EnumerationTooLarge(format!(
            "2^{k} cells exceed the enumeration cap"
        )));
    }
    let mut cells = Vec::with_capacity(1 << k);
    for cell in 0..(1u32 << k) {
        let bits: Vec<u8> = (0..k).map(|i| ((cell >> i) & 1) as u8).collect();
        let fit = estimate_aipw(ds, &TargetFunctional::Cell(bits), cfg)?;
        cells.push(fit.report.estimate.max(0.0));
    }
    let total: f64 = cells.iter().sum();
    if total <= 0.0 {
        return Err(Error::InsufficientSupport(
            "all cell estimates are nonpositive".into(),
        ));
    }
    cells.iter_mut().for_each(|v| *v /= total);
    Ok(cells)
}

/// Percentile-bootstrap interval with full nuisance refitting in every
/// replicate. Replicate t draws its resample from a generator seeded
/// with `seed ^ t`.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub lo: f64,
    pub hi: f64,
    pub estimates: Vec<f64>,
    pub n_failed: usize,
}

pub fn bootstrap_ci(
    ds: &Dataset,
    functional: &TargetFunctional,
    cfg: &EstimateConfig,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let n = ds.n();
    let results: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ t as u64);
            let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let resampled = ds.resample(&indices);
            estimate_aipw(&resampled, functional, cfg)
                .ok()
                .map(|f| f.report.estimate)
        })
        .collect();
    let mut estimates: Vec<f64> = results.iter().filter_map(|v| *v).collect();
    let n_failed = n_boot - estimates.len();
    if n_failed * 10 > n_boot {
        return Err(Error::BootstrapFailure {
            failed: n_failed,
            total: n_boot,
        });
    }
    estimates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = estimates.len();
    let lo = estimates[((0.025 * m as f64).floor() as usize).min(m - 1)];
    let hi = estimates[(((0.975 * m as f64).ceil() as usize).saturating_sub(1)).min(m - 1)];
    Ok(BootstrapResult {
        lo,
        hi,
        estimates,
        n_failed,
    })
}

// ---------------------------------------------------------------------
// Stacked-equation sandwich variance
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Block {
    offset: usize,
    len: usize,
}

struct Layout {
    /// Per ever-missing variable: (variable, mu_d block, psi block).
    /// The mu_d block is empty under maximum likelihood.
    sel: Vec<(usize, Block, Block)>,
    theta_pairs: Vec<Block>,
    theta4: Option<usize>,
    pm: Vec<Block>,
    beta: usize,
    total: usize,
}

struct RecCache {
    pattern: PatternId,
    b: f64,
    /// Per ever-missing slot, when all other variables are observed:
    /// (delta_h features, baseline features, covariate-regression
    /// features, indicator).
    sel: Vec<Option<(Vec<f64>, Vec<f64>, Vec<f64>, f64)>>,
    theta_g: Option<Vec<Vec<f64>>>,
    theta_direct: Option<(usize, Vec<f64>)>,
    all_missing: bool,
    /// Complete records: pattern-mixture basis rows for every fitted
    /// pattern.
    pm_rows: Vec<Vec<f64>>,
    /// Incomplete records with a fitted pattern: its index and basis row.
    own_pm: Option<(usize, Vec<f64>)>,
}

struct Stacked<'a> {
    layout: Layout,
    caches: Vec<RecCache>,
    ever_missing: Vec<usize>,
    /// For each fitted pattern: missing variables (as slot indices into
    /// `ever_missing`) and applicable interaction-pair indices.
    pm_meta: Vec<(Vec<usize>, Vec<usize>, bool)>,
    /// Per pattern index 0..2^k: per-variable observed flags (by slot),
    /// applicable pairs, all-missing flag.
    pattern_meta: Vec<(Vec<bool>, Vec<usize>, bool)>,
    theta_l_mask: Vec<Vec<bool>>,
    dr: bool,
    clip_eps: f64,
    k: usize,
    fit: &'a AipwFit,
}

fn theta_pairs_for(miss: &[usize]) -> Vec<usize> {
    // pair index c covers the two variables other than c (K=3)
    (0..3)
        .filter(|c| (0..3).all(|v| v == *c || miss.contains(&v)))
        .collect()
}

impl<'a> Stacked<'a> {
    fn build(fit: &'a AipwFit) -> Result<Self> {
        let model = fit
            .model
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("no selection model was fit".into()))?;
        if !matches!(fit.cfg.pm_form, PmForm::WeightedRatio) {
            return Err(Error::InvalidSpec(
                "sandwich variance supports the weighted-ratio pattern-mixture form; \
                 use the bootstrap otherwise"
                    .into(),
            ));
        }
        let ds = &fit.prepared.ds;
        let k = ds.k();
        let support = ds.pattern_support();
        let ever_missing = support.ever_missing(k);
        let dr = matches!(fit.cfg.or_method, OrFitMethod::DoublyRobust);
        let with_theta = model.theta.is_some();

        // the covariate-regression basis is rebuilt exactly as
        // estimate_aipw built it for the template
        let mu_b = x_basis(&fit.prepared.out_x);
        let mu_dim = mu_b.len();

        // parameter layout
        let mut offset = 0usize;
        let mut sel_blocks = Vec::new();
        for &i in &ever_missing {
            let d_dim = model.or_spec.delta_h[i].basis.len();
            let c_dim = model.baseline[i].basis.len();
            let mu = Block {
                offset,
                len: if dr { d_dim * mu_dim } else { 0 },
            };
            offset += mu.len;
            let psi = Block {
                offset,
                len: d_dim + c_dim,
            };
            offset += psi.len;
            sel_blocks.push((i, mu, psi));
        }
        let mut theta_pairs = Vec::new();
        let mut theta4 = None;
        if with_theta {
            let theta = model.theta.as_ref().unwrap();
            for c in 0..3 {
                let blk = Block {
                    offset,
                    len: theta.pair[c].basis.len(),
                };
                offset += blk.len;
                theta_pairs.push(blk);
            }
            theta4 = Some(offset);
            offset += 1;
        }
        let mut pm_blocks = Vec::new();
        for (_, pm, basis) in &fit.pms {
            match pm {
                PatternMixtureFit::Ratio(_) => {}
                PatternMixtureFit::Separate { .. } => unreachable!("checked above"),
            }
            let blk = Block {
                offset,
                len: basis.len(),
            };
            offset += blk.len;
            pm_blocks.push(blk);
        }
        let beta_idx = offset;
        let layout = Layout {
            sel: sel_blocks,
            theta_pairs,
            theta4,
            pm: pm_blocks,
            beta: beta_idx,
            total: beta_idx + 1,
        };

        let theta_l_mask: Vec<Vec<bool>> = model
            .theta
            .as_ref()
            .map(|t| {
                t.pair
                    .iter()
                    .map(|f| f.basis.terms.iter().map(|term| term.has_l()).collect())
                    .collect()
            })
            .unwrap_or_default();

        let pm_meta: Vec<(Vec<usize>, Vec<usize>, bool)> = fit
            .pms
            .iter()
            .map(|(pat, _, _)| {
                let miss = pat.missing();
                let slots: Vec<usize> = miss
                    .iter()
                    .map(|&i| ever_missing.iter().position(|&v| v == i).unwrap())
                    .collect();
                let pairs = if with_theta { theta_pairs_for(&miss) } else { Vec::new() };
                (slots, pairs, pat.n_observed() == 0)
            })
            .collect();

        let pattern_meta: Vec<(Vec<bool>, Vec<usize>, bool)> = PatternId::all(k)
            .map(|pat| {
                let obs: Vec<bool> = ever_missing.iter().map(|&i| pat.is_observed(i)).collect();
                let miss = pat.missing();
                let pairs = if with_theta { theta_pairs_for(&miss) } else { Vec::new() };
                (obs, pairs, miss.len() == k)
            })
            .collect();

        // per-record caches
        let tmpl_dh: Vec<&BasisSpec> = (0..k).map(|i| &model.or_spec.delta_h[i].basis).collect();
        let tmpl_base: Vec<&BasisSpec> = (0..k).map(|i| &model.baseline[i].basis).collect();
        let mut caches = Vec::with_capacity(ds.n());
        for rec in ds.records() {
            let complete = rec.pattern.is_complete();
            let mut sel = Vec::with_capacity(ever_missing.len());
            for &i in &ever_missing {
                let rest_ok = (0..k).all(|j| j == i || rec.pattern.is_observed(j));
                sel.push(rest_ok.then(|| {
                    (
                        tmpl_dh[i].eval_vec(&rec.l, &rec.x),
                        tmpl_base[i].eval_vec(&rec.l, &rec.x),
                        mu_b.eval_vec(&rec.l, &rec.x),
                        rec.pattern.is_observed(i) as u8 as f64,
                    )
                }));
            }
            let theta_g = (with_theta && complete).then(|| {
                model
                    .theta
                    .as_ref()
                    .unwrap()
                    .pair
                    .iter()
                    .map(|f| f.basis.eval_vec(&rec.l, &rec.x))
                    .collect()
            });
            let theta_direct = (with_theta && rec.pattern.n_observed() == 1).then(|| {
                let c = rec.pattern.observed()[0];
                (
                    c,
                    model.theta.as_ref().unwrap().pair[c]
                        .basis
                        .eval_vec(&rec.l, &rec.x),
                )
            });
            let pm_rows = if complete {
                fit.pms
                    .iter()
                    .map(|(_, _, basis)| basis.eval_vec(&rec.l, &rec.x))
                    .collect()
            } else {
                Vec::new()
            };
            let own_pm = (!complete)
                .then(|| {
                    fit.pms
                        .iter()
                        .position(|(pat, _, _)| *pat == rec.pattern)
                        .map(|idx| (idx, fit.pms[idx].2.eval_vec(&rec.l, &rec.x)))
                })
                .flatten();
            caches.push(RecCache {
                pattern: rec.pattern,
                b: if complete {
                    fit.functional.eval(&rec.l)
                } else {
                    f64::NAN
                },
                sel,
                theta_g,
                theta_direct,
                all_missing: rec.pattern.n_observed() == 0,
                pm_rows,
                own_pm,
            });
        }

        Ok(Stacked {
            layout,
            caches,
            ever_missing,
            pm_meta,
            pattern_meta,
            theta_l_mask,
            dr,
            clip_eps: fit.cfg.clip_eps,
            k,
            fit,
        })
    }

    /// The fitted parameter vector; the mean stacked residual vanishes
    /// here up to solver tolerance.
    fn pack(&self) -> Vec<f64> {
        let model = self.fit.model.as_ref().unwrap();
        let mut params = vec![0.0; self.layout.total];
        for (slot, (i, mu, psi)) in self.layout.sel.iter().enumerate() {
            if self.dr {
                // reconstruct the covariate-regression coefficients by
                // the same least squares used during fitting
                let d_dim = model.or_spec.delta_h[*i].basis.len();
                let mu_dim = if d_dim > 0 { mu.len / d_dim } else { 0 };
                for s in 0..d_dim {
                    let mut eq = NormalEq::new(mu_dim);
                    for cache in &self.caches {
                        if let Some((d, _, m, y)) = &cache.sel[slot] {
                            if *y == 0.0 {
                                eq.add(m, d[s], 1.0);
                            }
                        }
                    }
                    if let Ok(coefs) = eq.solve("sandwich mu_d") {
                        params[mu.offset + s * mu_dim..mu.offset + (s + 1) * mu_dim]
                            .copy_from_slice(&coefs);
                    }
                }
            }
            let d_dim = model.or_spec.delta_h[*i].basis.len();
            params[psi.offset..psi.offset + d_dim]
                .copy_from_slice(&model.or_spec.delta_h[*i].coefs);
            params[psi.offset + d_dim..psi.offset + psi.len]
                .copy_from_slice(&model.baseline[*i].coefs);
        }
        if let Some(theta) = &model.theta {
            for (c, blk) in self.layout.theta_pairs.iter().enumerate() {
                params[blk.offset..blk.offset + blk.len].copy_from_slice(&theta.pair[c].coefs);
            }
            params[self.layout.theta4.unwrap()] = theta.three_way;
        }
        for ((_, pm, _), blk) in self.fit.pms.iter().zip(&self.layout.pm) {
            if let PatternMixtureFit::Ratio(f) = pm {
                params[blk.offset..blk.offset + blk.len].copy_from_slice(&f.coefs);
            }
        }
        params[self.layout.beta] = self.fit.report.estimate;
        params
    }

    fn record_residual(&self, cache: &RecCache, params: &[f64], out: &mut [f64]) {
        let n_slots = self.ever_missing.len();
        // univariate selection etas (needed in several blocks)
        let mut eta = vec![f64::NAN; n_slots];
        for (slot, (_, mu, psi)) in self.layout.sel.iter().enumerate() {
            if let Some((d, c, m, y)) = &cache.sel[slot] {
                let d_dim = d.len();
                let psi_l = &params[psi.offset..psi.offset + d_dim];
                let psi_x = &params[psi.offset + d_dim..psi.offset + psi.len];
                let dh: f64 = d.iter().zip(psi_l).map(|(a, b)| a * b).sum();
                let base: f64 = c.iter().zip(psi_x).map(|(a, b)| a * b).sum();
                eta[slot] = dh + base;
                if self.dr {
                    let mu_dim = m.len();
                    let mu_vals: Vec<f64> = (0..d_dim)
                        .map(|s| {
                            params[mu.offset + s * mu_dim..mu.offset + (s + 1) * mu_dim]
                                .iter()
                                .zip(m)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    if *y == 0.0 {
                        for s in 0..d_dim {
                            for t in 0..mu_dim {
                                out[mu.offset + s * mu_dim + t] += (d[s] - mu_vals[s]) * m[t];
                            }
                        }
                    }
                    let kernel = (y - crate::fit::expit(base)) * (-y * dh).exp();
                    for s in 0..d_dim {
                        out[psi.offset + s] += (d[s] - mu_vals[s]) * kernel;
                    }
                    for (t, cv) in c.iter().enumerate() {
                        out[psi.offset + d_dim + t] += cv * kernel;
                    }
                } else {
                    let resid = y - crate::fit::expit(eta[slot]);
                    for s in 0..d_dim {
                        out[psi.offset + s] += d[s] * resid;
                    }
                    for m in 0..c.len() {
                        out[psi.offset + d_dim + m] += c[m] * resid;
                    }
                }
            }
        }

        let is_complete = cache.pattern.is_complete();

        // interaction-parameter equations
        if !self.layout.theta_pairs.is_empty() {
            if let Some(g) = &cache.theta_g {
                // (1 - q_i) / q_i = exp(-eta_i)
                let ratio: Vec<f64> = eta.iter().map(|e| (-e).exp()).collect();
                let theta_val: Vec<f64> = (0..3)
                    .map(|c| {
                        let blk = &self.layout.theta_pairs[c];
                        g[c].iter()
                            .zip(&params[blk.offset..blk.offset + blk.len])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                for c in 0..3 {
                    let (a, b) = match c {
                        0 => (1, 2),
                        1 => (0, 2),
                        _ => (0, 1),
                    };
                    let w = ratio[a] * ratio[b] * theta_val[c].exp();
                    let blk = &self.layout.theta_pairs[c];
                    for (s, gv) in g[c].iter().enumerate() {
                        out[blk.offset + s] += w * gv;
                    }
                }
                let w_all = ratio[0]
                    * ratio[1]
                    * ratio[2]
                    * (theta_val[0] + theta_val[1] + theta_val[2]
                        + params[self.layout.theta4.unwrap()])
                    .exp();
                out[self.layout.theta4.unwrap()] += w_all;
            }
            if let Some((c, g)) = &cache.theta_direct {
                let blk = &self.layout.theta_pairs[*c];
                for (s, gv) in g.iter().enumerate() {
                    out[blk.offset + s] -= gv;
                }
            }
            if cache.all_missing {
                out[self.layout.theta4.unwrap()] -= 1.0;
            }
        }

        // pattern-mixture normal equations and the beta equation
        let beta = params[self.layout.beta];
        if is_complete {
            // odds-ratio weight per fitted pattern
            let mut log_or = vec![0.0f64; self.fit.pms.len()];
            for (j, (slots, pairs, _)) in self.pm_meta.iter().enumerate() {
                let mut s = 0.0;
                for &slot in slots {
                    let (_, _, psi) = &self.layout.sel[slot];
                    let d = &cache.sel[slot].as_ref().unwrap().0;
                    let psi_l = &params[psi.offset..psi.offset + d.len()];
                    s += d.iter().zip(psi_l).map(|(a, b)| a * b).sum::<f64>();
                }
                for &c in pairs {
                    let blk = &self.layout.theta_pairs[c];
                    let g = &cache.theta_g.as_ref().unwrap()[c];
                    s += g
                        .iter()
                        .zip(&params[blk.offset..blk.offset + blk.len])
                        .zip(&self.theta_l_mask[c])
                        .filter(|(_, &keep)| keep)
                        .map(|((a, b), _)| a * b)
                        .sum::<f64>();
                }
                log_or[j] = s;
            }
            let m_vals: Vec<f64> = self
                .layout
                .pm
                .iter()
                .zip(&cache.pm_rows)
                .map(|(blk, row)| {
                    row.iter()
                        .zip(&params[blk.offset..blk.offset + blk.len])
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            for (j, blk) in self.layout.pm.iter().enumerate() {
                let w = log_or[j].exp();
                let resid = cache.b - m_vals[j];
                for (s, rv) in cache.pm_rows[j].iter().enumerate() {
                    out[blk.offset + s] += w * resid * rv;
                }
            }

            // pattern probabilities from the current parameters
            let n_pat = 1usize << self.k;
            let mut log_num = vec![0.0f64; n_pat];
            for ri in 0..n_pat {
                let (obs, pairs, all_miss) = &self.pattern_meta[ri];
                let mut s = 0.0;
                for (slot, &o) in obs.iter().enumerate() {
                    let e = eta[slot];
                    s += if o { -softplus(-e) } else { -softplus(e) };
                }
                for &c in pairs {
                    let blk = &self.layout.theta_pairs[c];
                    let g = &cache.theta_g.as_ref().unwrap()[c];
                    s += g
                        .iter()
                        .zip(&params[blk.offset..blk.offset + blk.len])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                if *all_miss {
                    if let Some(t4) = self.layout.theta4 {
                        s += params[t4];
                    }
                }
                log_num[ri] = s;
            }
            let log_c = crate::odds::log_sum_exp(&log_num);
            let pis: Vec<f64> = log_num.iter().map(|v| (v - log_c).exp()).collect();
            let pi_j = pis[n_pat - 1].max(self.clip_eps);
            let mut aug = 0.0;
            for ((pat, _, _), &m) in self.fit.pms.iter().zip(&m_vals) {
                aug += pis[pat.index() as usize] * (m - beta);
            }
            out[self.layout.beta] += (cache.b - beta - aug) / pi_j;
        } else if let Some((j, row)) = &cache.own_pm {
            let blk = &self.layout.pm[*j];
            let m: f64 = row
                .iter()
                .zip(&params[blk.offset..blk.offset + blk.len])
                .map(|(a, b)| a * b)
                .sum();
            out[self.layout.beta] += m - beta;
        }
    }

    fn mean_residual(&self, params: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.layout.total];
        for cache in &self.caches {
            self.record_residual(cache, params, &mut out);
        }
        let n = self.caches.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }
}

/// Sandwich standard error for the AIPW estimate: the stacked
/// estimating equations for every nuisance parameter and beta are
/// differentiated numerically, and the usual A^{-1} B A^{-T} / n form
/// is read off at the beta coordinate.
pub fn sandwich_se(fit: &AipwFit) -> Result<f64> {
    let n = fit.prepared.ds.n();
    if fit.model.is_none() {
        // fully observed data: standard error of the sample mean
        let mean = fit.report.estimate;
        let var: f64 = fit
            .prepared
            .ds
            .records()
            .iter()
            .map(|r| {
                let d = fit.functional.eval(&r.l) - mean;
                d * d
            })
            .sum::<f64>()
            / (n as f64 - 1.0);
        return Ok((var / n as f64).sqrt());
    }
    let stacked = Stacked::build(fit)?;
    let params = stacked.pack();
    let p = params.len();

    let f = |v: &[f64]| stacked.mean_residual(v);
    let a = numeric_jacobian(&f, &params, 1e-5)?;
    let a_lu = a.lu();

    // B = mean of V V'
    let mut b = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut v = vec![0.0; p];
    for cache in &stacked.caches {
        v.iter_mut().for_each(|z| *z = 0.0);
        stacked.record_residual(cache, &params, &mut v);
        for i in 0..p {
            if v[i] == 0.0 {
                continue;
            }
            for j in 0..p {
                b[(i, j)] += v[i] * v[j];
            }
        }
    }
    b /= n as f64;

    // solve A X = B, then A Y' = X' (Y = A^{-1} B A^{-T})
    let x = a_lu
        .solve(&b)
        .ok_or_else(|| Error::SingularMatrix("sandwich bread matrix".into()))?;
    let y = a_lu
        .solve(&x.transpose())
        .ok_or_else(|| Error::SingularMatrix("sandwich bread matrix".into()))?;
    let var = y[(stacked.layout.beta, stacked.layout.beta)] / n as f64;
    if !var.is_finite() || var < 0.0 {
        return Err(Error::SingularMatrix(format!(
            "sandwich assembly produced variance {var}"
        )));
    }
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::tests::sample_law;
    use crate::oracle::{build_discrete_law, tests::benchmark_spec};
    use approx::assert_relative_eq;

    fn binary_cfg() -> EstimateConfig {
        EstimateConfig::default()
    }

    #[test]
    fn all_complete_short_circuits_to_sample_mean() {
        let csv = "L1,L2,L3\n1,0,1\n0,1,1\n1,1,1\n1,0,0\n";
        let ds = Dataset::from_csv(csv.as_bytes(), &crate::patterns::CsvSchema::new(3, 0)).unwrap();
        let fit = estimate_aipw(&ds, &TargetFunctional::Mean(0), &binary_cfg()).unwrap();
        assert_relative_eq!(fit.report.estimate, 0.75, epsilon = 1e-14);
        let se = sandwich_se(&fit).unwrap();
        assert!(se > 0.0 && se < 1.0);
    }

    #[test]
    fn aipw_recovers_truth_on_binary_law() {
        let law = build_discrete_law(&benchmark_spec(false)).unwrap();
        let ds = sample_law(&law, 60_000, 31);
        let truth = law.true_functional(&TargetFunctional::Product);
        let fit = estimate_aipw(&ds, &TargetFunctional::Product, &binary_cfg()).unwrap();
        assert!(
            (fit.report.estimate - truth).abs() < 0.02,
            "estimate {} truth {truth}",
            fit.report.estimate
        );
        let ipw = estimate_ipw(&ds, &TargetFunctional::Product, &binary_cfg()).unwrap();
        assert!((ipw.estimate - truth).abs() < 0.02);
    }

    #[test]
    fn joint_distribution_matches_enumerated_cells() {
        let law = build_discrete_law(&benchmark_spec(false)).unwrap();
        let ds = sample_law(&law, 60_000, 37);
        let cells = estimate_joint_binary(&ds, &binary_cfg()).unwrap();
        assert_relative_eq!(cells.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for (l_idx, est) in cells.iter().enumerate() {
            let bits: Vec<u8> = (0..3).map(|i| ((l_idx >> i) & 1) as u8).collect();
            let truth = law.true_functional(&TargetFunctional::Cell(bits));
            assert!((est - truth).abs() < 0.02, "cell {l_idx}: {est} vs {truth}");
        }
    }

    #[test]
    fn clipping_is_counted() {
        let law = build_discrete_law(&benchmark_spec(false)).unwrap();
        let ds = sample_law(&law, 3_000, 41);
        let mut cfg = binary_cfg();
        cfg.clip_eps = 0.999; // everything clips
        let fit = estimate_aipw(&ds, &TargetFunctional::Product, &cfg).unwrap();
        assert_eq!(fit.report.n_clipped, fit.report.n_complete);
    }

    #[test]
    fn transform_requires_positive_covariates() {
        assert!(matches!(
            transform_x(&[1.0, -0.5]).unwrap_err(),
            Error::NonPositiveCovariate(_, _)
        ));
        let t = transform_x(&[2.0, 8.0]).unwrap();
        assert_relative_eq!(t[0], (0.5f64 + 0.125).ln(), epsilon = 1e-12);
        assert_relative_eq!(t[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn sandwich_residual_vanishes_at_fit() {
        let law = build_discrete_law(&benchmark_spec(false)).unwrap();
        let ds = sample_law(&law, 8_000, 43);
        let fit = estimate_aipw(&ds, &TargetFunctional::Product, &binary_cfg()).unwrap();
        let stacked = Stacked::build(&fit).unwrap();
        let resid = stacked.mean_residual(&stacked.pack()).unwrap();
        let max = resid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-6, "stacked residual {max} at the fitted parameters");
    }

    #[test]
    fn sandwich_se_is_finite_and_positive() {
        let law = build_discrete_law(&benchmark_spec(false)).unwrap();
        let ds = sample_law(&law, 8_000, 47);
        let fit = estimate_aipw(&ds, &TargetFunctional::Product, &binary_cfg()).unwrap();
        let se = sandwich_se(&fit).unwrap();
        assert!(se.is_finite() && se > 0.0 && se < 0.2, "se = {se}");
    }

    #[test]
    fn bootstrap_is_deterministic_and_brackets_estimate() {
        let law = build_discrete_law(&benchmark_spec(false)).unwrap();
        let ds = sample_law(&law, 4_000, 53);
        let cfg = binary_cfg();
        let f = TargetFunctional::Product;
        let a = bootstrap_ci(&ds, &f, &cfg, 60, 99).unwrap();
        let b = bootstrap_ci(&ds, &f, &cfg, 60, 99).unwrap();
        assert_eq!(a.estimates, b.estimates);
        let est = estimate_aipw(&ds, &f, &cfg).unwrap().report.estimate;
        assert!(a.lo <= est && est <= a.hi);
        assert!(a.n_failed == 0);
    }

    #[test]
    fn dr_method_agrees_with_mle_on_well_specified_data() {
        let law = build_discrete_law(&benchmark_spec(false)).unwrap();
        let ds = sample_law(&law, 30_000, 59);
        let f = TargetFunctional::Product;
        let mle = estimate_aipw(&ds, &f, &binary_cfg()).unwrap();
        let mut cfg = binary_cfg();
        cfg.or_method = OrFitMethod::DoublyRobust;
        let dr = estimate_aipw(&ds, &f, &cfg).unwrap();
        assert!(
            (mle.report.estimate - dr.report.estimate).abs() < 0.01,
            "mle {} dr {}",
            mle.report.estimate,
            dr.report.estimate
        );
    }
}
