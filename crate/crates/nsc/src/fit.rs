//! Nuisance-model fitting: logistic regressions, weighted least
//! squares, damped Newton root-finding for stacked estimating
//! equations, and the model-specific fitters built on them (univariate
//! selection models, interaction parameters, pattern-mixture
//! regressions).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimator::TargetFunctional;
use crate::odds::{BasisSpec, Factor, LinearFunction, OddsRatioSpec, SelectionModel, Term, ThetaTerms};
use crate::patterns::{Dataset, PatternId, Record};

/// Standardized coefficient magnitude beyond which a logistic fit is
/// declared (quasi-)separated. Separation proper is detected earlier,
/// by likelihood saturation; this backstop only has to catch divergence
/// along a boundary direction, so it is deliberately loose — an
/// ill-conditioned but identified design can support legitimately large
/// coefficients.
pub const SEPARATION_BOUND: f64 = 1e4;

/// Logit assigned to variables that are never missing, forcing their
/// selection probability to 1 within floating-point precision.
const ALWAYS_OBSERVED_LOGIT: f64 = 50.0;

pub(crate) fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Controls for the damped Newton root-finder.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Sup-norm convergence tolerance on the residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Step halvings attempted before declaring failure to improve.
    pub max_halvings: usize,
    /// Central-difference step is `fd_scale * (1 + |param|)`.
    pub fd_scale: f64,
    /// Sup-norm cap on each Newton step. Keeps iterates from leaping
    /// into regions where exponential terms overflow; `INFINITY`
    /// disables the cap.
    pub max_step: f64,
    /// Residual norm considered good enough when progress stalls before
    /// `tol` is reached — finite-difference Jacobian noise can put the
    /// primary tolerance out of reach on ill-conditioned systems. Equal
    /// to `tol` by default, i.e. no relaxation.
    pub tol_stalled: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
            fd_scale: 1e-5,
            max_step: f64::INFINITY,
            tol_stalled: 1e-8,
        }
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &z| m.max(z.abs()))
}

/// Central-difference Jacobian of `f` at `at`.
pub fn numeric_jacobian<F>(f: &F, at: &[f64], fd_scale: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let dim = at.len();
    let base = f(at)?;
    let mut jac = DMatrix::zeros(base.len(), dim);
    let mut probe = at.to_vec();
    for j in 0..dim {
        let step = fd_scale * (1.0 + at[j].abs());
        probe[j] = at[j] + step;
        let hi = f(&probe)?;
        probe[j] = at[j] - step;
        let lo = f(&probe)?;
        probe[j] = at[j];
        for i in 0..hi.len() {
            jac[(i, j)] = (hi[i] - lo[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Solve `f(x) = 0` by damped Newton with a numeric Jacobian.
///
/// Steps are backtracked on the squared residual norm; when a plain
/// Newton direction fails to make progress (near-singular Jacobian, or
/// a residual surface with sharp curvature from heavy-tailed weights),
/// the step is recomputed from the Gauss-Newton normal equations with
/// an escalating ridge until either the residual drops or the ridge
/// dominates, in which case the iterate is at a stationary point and we
/// report failure honestly.
pub fn newton_root<F>(f: F, init: &[f64], opts: &NewtonOptions) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let fd = opts.fd_scale;
    let jac = |at: &[f64]| numeric_jacobian(&f, at, fd);
    newton_root_with_jacobian(&f, jac, init, opts)
}

/// [`newton_root`] with a caller-supplied Jacobian; an analytic
/// Jacobian avoids the finite-difference noise floor that can keep
/// ill-conditioned systems from reaching tolerance.
pub fn newton_root_with_jacobian<F, J>(
    f: F,
    jacobian: J,
    init: &[f64],
    opts: &NewtonOptions,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    J: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    let dim = init.len();
    let mut x = init.to_vec();
    let mut resid = f(&x)?;
    let mut norm = sup_norm(&resid);
    let sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut obj = sq(&resid);
    for iter in 0..opts.max_iter {
        if norm <= opts.tol {
            return Ok(x);
        }
        let jac = jacobian(&x)?;
        let rhs = DVector::from_iterator(resid.len(), resid.iter().map(|&v| -v));
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &rhs;
        let trace_scale = jtj.trace().max(f64::MIN_POSITIVE) / dim as f64;
        let mut accepted = false;
        // First pass insists the sup-norm itself drops (the criterion
        // that matters); the second settles for squared-norm descent,
        // which keeps making progress when the sup-norm plateaus.
        // Within each pass, ridge 0 is the plain Newton step and each
        // escalation trades step quality for descent reliability.
        'accept: for strict in [true, false] {
            for ridge_pow in 0..10 {
                let ridge = if ridge_pow == 0 {
                    0.0
                } else {
                    trace_scale * 1e-8 * 100f64.powi(ridge_pow - 1)
                };
                let mut damped = jtj.clone();
                for d in 0..dim {
                    damped[(d, d)] += ridge;
                }
                let step = match damped.lu().solve(&jtr) {
                    Some(s) => s,
                    None => continue,
                };
                let step_len = step.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
                let mut scale = if step_len > opts.max_step {
                    opts.max_step / step_len
                } else {
                    1.0
                };
                for _ in 0..=opts.max_halvings {
                    let candidate: Vec<f64> = x
                        .iter()
                        .zip(step.iter())
                        .map(|(&xi, &si)| xi + scale * si)
                        .collect();
                    if let Ok(r) = f(&candidate) {
                        let cand_norm = sup_norm(&r);
                        let cand_obj = sq(&r);
                        let better = if strict {
                            cand_norm < norm
                        } else {
                            cand_obj.is_finite() && cand_obj < obj
                        };
                        if better {
                            obj = cand_obj;
                            norm = cand_norm;
                            resid = r;
                            x = candidate;
                            accepted = true;
                            break 'accept;
                        }
                    }
                    scale *= 0.5;
                }
            }
        }
        if !accepted {
            return if norm <= opts.tol_stalled {
                Ok(x)
            } else {
                Err(Error::NonConvergence {
                    iterations: iter + 1,
                    residual: norm,
                })
            };
        }
    }
    if norm <= opts.tol_stalled {
        Ok(x)
    } else {
        Err(Error::NonConvergence {
            iterations: opts.max_iter,
            residual: norm,
        })
    }
}

/// Weighted normal-equation accumulator for least squares.
pub struct NormalEq {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    n: usize,
}

impl NormalEq {
    pub fn new(dim: usize) -> Self {
        NormalEq {
            xtx: DMatrix::zeros(dim, dim),
            xty: DVector::zeros(dim),
            n: 0,
        }
    }

    pub fn add(&mut self, row: &[f64], y: f64, w: f64) {
        for a in 0..row.len() {
            for b in 0..row.len() {
                self.xtx[(a, b)] += w * row[a] * row[b];
            }
            self.xty[a] += w * row[a] * y;
        }
        self.n += 1;
    }

    pub fn solve(&self, context: &str) -> Result<Vec<f64>> {
        if self.n < self.xty.len() {
            return Err(Error::InsufficientSupport(format!(
                "{} observations for {} parameters in {context}",
                self.n,
                self.xty.len()
            )));
        }
        let chol = self
            .xtx
            .clone()
            .cholesky()
            .ok_or_else(|| Error::RankDeficient(context.to_string()))?;
        Ok(chol.solve(&self.xty).iter().cloned().collect())
    }
}

/// Maximum-likelihood logistic regression by iteratively reweighted
/// least squares. `variable` labels the selection indicator being
/// modeled in separation errors (1-based in messages).
///
/// Columns are centered and scaled internally (with the adjustment
/// folded back into a constant column when one exists) so that the
/// separation bound is judged on a well-conditioned basis; raw
/// covariates with a narrow range would otherwise have legitimately
/// large coefficients mistaken for separation.
pub fn fit_logistic(design: &[Vec<f64>], y: &[f64], variable: usize) -> Result<Vec<f64>> {
    if design.is_empty() {
        return Err(Error::EmptyInput("logistic regression".into()));
    }
    let dim = design[0].len();
    let n = design.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for row in design {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0f64; dim];
    for row in design {
        for j in 0..dim {
            sd[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    for s in sd.iter_mut() {
        *s = s.sqrt();
    }
    let constant = |j: usize| sd[j] < 1e-12 * (1.0 + mean[j].abs());
    // a constant nonzero column can absorb the centering shift
    let carrier = (0..dim).find(|&j| constant(j) && mean[j].abs() > 1e-12);
    let center = carrier.is_some();
    let std_design: Vec<Vec<f64>> = design
        .iter()
        .map(|row| {
            (0..dim)
                .map(|j| {
                    if constant(j) {
                        row[j]
                    } else if center {
                        (row[j] - mean[j]) / sd[j]
                    } else {
                        row[j] / sd[j]
                    }
                })
                .collect()
        })
        .collect();
    let b_std = fit_logistic_raw(&std_design, y, variable)?;
    let mut beta = vec![0.0f64; dim];
    let mut shift = 0.0f64;
    for j in 0..dim {
        if constant(j) {
            beta[j] = b_std[j];
        } else {
            beta[j] = b_std[j] / sd[j];
            if center {
                shift += b_std[j] * mean[j] / sd[j];
            }
        }
    }
    if let Some(c) = carrier {
        beta[c] -= shift / mean[c];
    }
    Ok(beta)
}

fn fit_logistic_raw(design: &[Vec<f64>], y: &[f64], variable: usize) -> Result<Vec<f64>> {
    let dim = design[0].len();
    let log_lik = |beta: &[f64]| -> f64 {
        design
            .iter()
            .zip(y)
            .map(|(row, &yi)| {
                let eta: f64 = row.iter().zip(beta).map(|(r, b)| r * b).sum();
                if yi > 0.5 {
                    -crate::odds::softplus(-eta)
                } else {
                    -crate::odds::softplus(eta)
                }
            })
            .sum()
    };
    let mut beta = vec![0.0f64; dim];
    let mut ll = log_lik(&beta);
    for _ in 0..100 {
        let mut eq = NormalEq::new(dim);
        let mut score = vec![0.0f64; dim];
        for (row, &yi) in design.iter().zip(y) {
            let eta: f64 = row.iter().zip(&beta).map(|(r, b)| r * b).sum();
            // both tails computed directly so neither underflows first
            let p = expit(eta);
            let q = expit(-eta);
            let w = (p * q).max(1e-300);
            eq.add(row, 0.0, w);
            let resid = if yi > 0.5 { q } else { -p };
            for (s, r) in score.iter_mut().zip(row) {
                *s += r * resid;
            }
        }
        let delta = eq
            .xtx
            .clone()
            .lu()
            .solve(&DVector::from_vec(score))
            .ok_or_else(|| Error::SingularMatrix("logistic information matrix".into()))?;
        // backtrack on the log-likelihood; the IRLS direction is an
        // ascent direction, but a full step can badly overshoot along
        // near-collinear columns
        let mut scale = 1.0;
        let mut stepped = false;
        for _ in 0..40 {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(delta.iter())
                .map(|(&b, &d)| b + scale * d)
                .collect();
            let cand_ll = log_lik(&candidate);
            if cand_ll.is_finite() && cand_ll >= ll {
                beta = candidate;
                ll = cand_ll;
                stepped = true;
                break;
            }
            scale *= 0.5;
        }
        // a saturated likelihood means the responses are perfectly
        // classified and the MLE sits at infinity; a runaway coefficient
        // on the standardized basis catches quasi-separation, where only
        // a boundary direction diverges
        if ll > -1e-8 * design.len() as f64 || sup_norm(&beta) > SEPARATION_BOUND {
            return Err(Error::Separation { variable });
        }
        if !stepped || scale * delta.amax() < 1e-10 {
            return Ok(beta);
        }
    }
    Err(Error::NonConvergence {
        iterations: 100,
        residual: f64::NAN,
    })
}

/// Basis layout for a selection model to be fit from data.
#[derive(Debug, Clone)]
pub struct SelectionTemplate {
    pub k: usize,
    pub delta_h_basis: Vec<BasisSpec>,
    /// X-only basis for each `h_{i,X}`; must include an intercept for
    /// the doubly robust fit.
    pub baseline_basis: Vec<BasisSpec>,
    /// X-only basis for the covariate regressions `E[d_i | R_i=0,
    /// R_{-i}=1, X]` in the doubly robust fit. These are outcome-side
    /// models, so they may be specified independently of the baselines.
    pub mu_basis: Vec<BasisSpec>,
    /// K=3 only: basis over `(L_c, X)` for each pairwise interaction.
    pub theta_basis: Option<Vec<BasisSpec>>,
}

impl SelectionTemplate {
    /// Default template: `delta_h_i` linear in the other L coordinates
    /// (anchored at `l0`), baselines intercept + linear in X, and, when
    /// requested, interactions linear in `(L_c, X)`.
    pub fn linear(k: usize, p: usize, l0: &[f64], with_theta: bool) -> Self {
        let delta_h_basis = (0..k).map(|i| BasisSpec::linear_l_minus(i, k, l0)).collect();
        let baseline_basis: Vec<BasisSpec> =
            (0..k).map(|_| BasisSpec::intercept_linear_x(p)).collect();
        let mu_basis = baseline_basis.clone();
        let theta_basis = with_theta.then(|| {
            (0..k)
                .map(|c| {
                    let mut terms = vec![Term::intercept(), Term::of(vec![Factor::l_ref(c, l0[c])])];
                    terms.extend((0..p).map(|m| Term::of(vec![Factor::x(m)])));
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
}

/// How the log-odds-ratio functions are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrFitMethod {
    /// Univariate logistic maximum likelihood.
    Mle,
    /// Doubly robust: consistent if either the baseline-at-anchor model
    /// `p(R_i=1 | R_{-i}=1, L_{-i}=l0, X)` or the covariate regression
    /// `E[d_i | R_i=0, R_{-i}=1, X]` is correct.
    DoublyRobust,
}

/// Fit the selection model: one univariate conditional per
/// ever-missing variable, plus interaction parameters when the
/// template requests them.
pub fn fit_selection(
    ds: &Dataset,
    tmpl: &SelectionTemplate,
    method: OrFitMethod,
) -> Result<SelectionModel> {
    let k = ds.k();
    if tmpl.k != k {
        return Err(Error::DimensionMismatch(format!(
            "template K={} but dataset K={k}",
            tmpl.k
        )));
    }
    let support = ds.pattern_support();
    let ever_missing = support.ever_missing(k);

    let mut delta_h = Vec::with_capacity(k);
    let mut baseline = Vec::with_capacity(k);
    for i in 0..k {
        if !ever_missing.contains(&i) {
            delta_h.push(LinearFunction::zero(tmpl.delta_h_basis[i].clone()));
            let mut f = LinearFunction::zero(tmpl.baseline_basis[i].clone());
            let intercept = f
                .basis
                .terms
                .iter()
                .position(|t| t.factors.is_empty())
                .ok_or_else(|| {
                    Error::InvalidSpec("baseline basis must contain an intercept".into())
                })?;
            f.coefs[intercept] = ALWAYS_OBSERVED_LOGIT;
            baseline.push(f);
            continue;
        }
        if !support.leave_one_out_ok[i] {
            return Err(Error::InsufficientSupport(format!(
                "no leave-one-out records for variable {}",
                i + 1
            )));
        }
        let (dh, base) = fit_univariate(ds, tmpl, i, method)?;
        delta_h.push(dh);
        baseline.push(base);
    }
    let or_spec = OddsRatioSpec::new(k, delta_h)?;
    let mut model = SelectionModel::new(or_spec, baseline, None)?;
    if let Some(theta_basis) = &tmpl.theta_basis {
        let theta = fit_theta(ds, &model, theta_basis)?;
        model.theta = Some(theta);
    }
    Ok(model)
}

/// Records whose pattern observes every variable except possibly `i`.
fn rest_complete<'a>(ds: &'a Dataset, i: usize) -> impl Iterator<Item = &'a Record> {
    let k = ds.k();
    ds.records().iter().filter(move |r| {
        (0..k).all(|j| j == i || r.pattern.is_observed(j))
    })
}

fn fit_univariate(
    ds: &Dataset,
    tmpl: &SelectionTemplate,
    i: usize,
    method: OrFitMethod,
) -> Result<(LinearFunction, LinearFunction)> {
    let d_dim = tmpl.delta_h_basis[i].len();
    let c_dim = tmpl.baseline_basis[i].len();
    let mut d_rows: Vec<Vec<f64>> = Vec::new();
    let mut c_rows: Vec<Vec<f64>> = Vec::new();
    let mut m_rows: Vec<Vec<f64>> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    for rec in rest_complete(ds, i) {
        d_rows.push(tmpl.delta_h_basis[i].eval_vec(&rec.l, &rec.x));
        c_rows.push(tmpl.baseline_basis[i].eval_vec(&rec.l, &rec.x));
        m_rows.push(tmpl.mu_basis[i].eval_vec(&rec.l, &rec.x));
        y.push(rec.pattern.is_observed(i) as u8 as f64);
    }

    // MLE initialization (and the MLE answer itself)
    let joint: Vec<Vec<f64>> = d_rows
        .iter()
        .zip(&c_rows)
        .map(|(d, c)| d.iter().chain(c).cloned().collect())
        .collect();
    let mle = fit_logistic(&joint, &y, i + 1)?;
    let (psi_l_init, psi_x_init) = mle.split_at(d_dim);

    let (psi_l, psi_x) = match method {
        OrFitMethod::Mle => (psi_l_init.to_vec(), psi_x_init.to_vec()),
        OrFitMethod::DoublyRobust => {
            // regression of the delta_h features on the covariate basis
            // among records with R_i = 0
            let mu_dim = tmpl.mu_basis[i].len();
            let mut mu_d = Vec::with_capacity(d_dim);
            for s in 0..d_dim {
                let mut eq = NormalEq::new(mu_dim);
                for ((d, m), &yi) in d_rows.iter().zip(&m_rows).zip(&y) {
                    if yi == 0.0 {
                        eq.add(m, d[s], 1.0);
                    }
                }
                mu_d.push(eq.solve(&format!("E[d|X] regression for variable {}", i + 1))?);
            }
            let mu_rows: Vec<Vec<f64>> = m_rows
                .iter()
                .map(|m| {
                    mu_d.iter()
                        .map(|coefs| coefs.iter().zip(m).map(|(a, b)| a * b).sum())
                        .collect()
                })
                .collect();
            let residual = |params: &[f64]| -> Result<Vec<f64>> {
                let (pl, px) = params.split_at(d_dim);
                let mut out = vec![0.0f64; d_dim + c_dim];
                for idx in 0..y.len() {
                    let dh: f64 = d_rows[idx].iter().zip(pl).map(|(a, b)| a * b).sum();
                    let eta: f64 = c_rows[idx].iter().zip(px).map(|(a, b)| a * b).sum();
                    let kernel = (y[idx] - expit(eta)) * (-y[idx] * dh).exp();
                    for s in 0..d_dim {
                        out[s] += (d_rows[idx][s] - mu_rows[idx][s]) * kernel;
                    }
                    for m in 0..c_dim {
                        out[d_dim + m] += c_rows[idx][m] * kernel;
                    }
                }
                let n = y.len() as f64;
                out.iter_mut().for_each(|v| *v /= n);
                Ok(out)
            };
            let jacobian = |params: &[f64]| -> Result<DMatrix<f64>> {
                let (pl, px) = params.split_at(d_dim);
                let dim = d_dim + c_dim;
                let mut jac = DMatrix::zeros(dim, dim);
                for idx in 0..y.len() {
                    let dh: f64 = d_rows[idx].iter().zip(pl).map(|(a, b)| a * b).sum();
                    let eta: f64 = c_rows[idx].iter().zip(px).map(|(a, b)| a * b).sum();
                    let e = expit(eta);
                    let w = (-y[idx] * dh).exp();
                    // d kernel / d psi_l_t and / d psi_x_m
                    let kl = (y[idx] - e) * -y[idx] * w;
                    let kx = -e * (1.0 - e) * w;
                    let inst = |row: usize| {
                        if row < d_dim {
                            d_rows[idx][row] - mu_rows[idx][row]
                        } else {
                            c_rows[idx][row - d_dim]
                        }
                    };
                    for row in 0..dim {
                        let a = inst(row);
                        for t in 0..d_dim {
                            jac[(row, t)] += a * kl * d_rows[idx][t];
                        }
                        for m in 0..c_dim {
                            jac[(row, d_dim + m)] += a * kx * c_rows[idx][m];
                        }
                    }
                }
                jac /= y.len() as f64;
                Ok(jac)
            };
            // a stall is accepted when the residual sits an order of
            // magnitude below the sampling noise of the moment equations
            // themselves; near-collinear covariate bases can leave the
            // exact root unreachable (or at infinity along a direction
            // the fitted probabilities are insensitive to)
            let noise_scale = {
                let (pl, px) = mle.split_at(d_dim);
                let dim = d_dim + c_dim;
                let mut sum = vec![0.0f64; dim];
                let mut sumsq = vec![0.0f64; dim];
                for idx in 0..y.len() {
                    let dh: f64 = d_rows[idx].iter().zip(pl).map(|(a, b)| a * b).sum();
                    let eta: f64 = c_rows[idx].iter().zip(px).map(|(a, b)| a * b).sum();
                    let kernel = (y[idx] - expit(eta)) * (-y[idx] * dh).exp();
                    for s in 0..d_dim {
                        let v = (d_rows[idx][s] - mu_rows[idx][s]) * kernel;
                        sum[s] += v;
                        sumsq[s] += v * v;
                    }
                    for m in 0..c_dim {
                        let v = c_rows[idx][m] * kernel;
                        sum[d_dim + m] += v;
                        sumsq[d_dim + m] += v * v;
                    }
                }
                let n = y.len() as f64;
                (0..dim)
                    .map(|j| (((sumsq[j] / n - (sum[j] / n).powi(2)) / n).max(0.0)).sqrt())
                    .fold(0.0f64, f64::max)
            };
            let opts = NewtonOptions {
                max_iter: 500,
                max_step: 0.5,
                tol_stalled: (0.1 * noise_scale).max(1e-8),
                ..NewtonOptions::default()
            };
            let solved = newton_root_with_jacobian(residual, jacobian, &mle, &opts)?;
            let (pl, px) = solved.split_at(d_dim);
            (pl.to_vec(), px.to_vec())
        }
    };
    Ok((
        LinearFunction::new(tmpl.delta_h_basis[i].clone(), psi_l)?,
        LinearFunction::new(tmpl.baseline_basis[i].clone(), psi_x)?,
    ))
}

/// Fit the K=3 interaction parameters by complete-case reweighting
/// against the directly observed interaction-pattern frequencies, using
/// the interaction basis itself as the instrument vector (exactly
/// identified).
/// Solve `sum_i exp(log_w_i + g_i'gamma) g_i = target` for `gamma`.
///
/// This is the gradient of the convex potential
/// `sum_i exp(log_w_i + g_i'gamma) - target'gamma`, so a damped Newton
/// with backtracking on the potential converges globally whenever a
/// root exists. The weights can span many orders of magnitude, so steps
/// that overflow are rejected and a ridge is added when a few records
/// dominate the Hessian.
fn solve_exponential_tilt(
    g: &[&[f64]],
    log_w: &[f64],
    target: &[f64],
    init: &[f64],
    n: f64,
) -> Result<Vec<f64>> {
    let dim = target.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let phi = |gamma: &[f64]| -> f64 {
        let mut s = 0.0;
        for (gi, lw) in g.iter().zip(log_w) {
            let e = lw + dot(gi, gamma);
            if e > 700.0 {
                return f64::INFINITY;
            }
            s += e.exp();
        }
        (s - dot(target, gamma)) / n
    };
    let mut gamma = init.to_vec();
    let opts = NewtonOptions::default();
    let mut residual = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let mut grad = vec![0.0f64; dim];
        let mut hess = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut scale = vec![0.0f64; dim];
        for (gi, lw) in g.iter().zip(log_w) {
            let e = (lw + dot(gi, &gamma)).min(700.0).exp();
            for s in 0..dim {
                grad[s] += e * gi[s];
                scale[s] += e * gi[s].abs();
                for t in 0..dim {
                    hess[(s, t)] += e * gi[s] * gi[t];
                }
            }
        }
        for s in 0..dim {
            grad[s] = (grad[s] - target[s]) / n;
            scale[s] = (scale[s] + target[s].abs()) / n;
        }
        residual = grad
            .iter()
            .zip(&scale)
            .map(|(r, sc)| r.abs() / sc.max(1.0))
            .fold(0.0f64, f64::max);
        if residual <= opts.tol {
            return Ok(gamma);
        }
        hess /= n;

        let p0 = phi(&gamma);
        let base_ridge = hess.trace().abs() / dim as f64;
        let mut improved = false;
        let mut ridge = 0.0f64;
        'ridge: for _ in 0..12 {
            let mut h = hess.clone();
            for s in 0..dim {
                h[(s, s)] += ridge;
            }
            if let Some(step) = h.lu().solve(&nalgebra::DVector::from_column_slice(&grad)) {
                let mut t = 1.0;
                for _ in 0..opts.max_halvings {
                    let cand: Vec<f64> = gamma
                        .iter()
                        .zip(step.iter())
                        .map(|(x, s)| x - t * s)
                        .collect();
                    if phi(&cand) < p0 {
                        gamma = cand;
                        improved = true;
                        break 'ridge;
                    }
                    t *= 0.5;
                }
            }
            ridge = if ridge == 0.0 {
                1e-10 * base_ridge.max(1e-300)
            } else {
                ridge * 100.0
            };
        }
        if !improved {
            return Err(Error::NonConvergence {
                iterations: iter,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

pub fn fit_theta(
    ds: &Dataset,
    model: &SelectionModel,
    theta_basis: &[BasisSpec],
) -> Result<ThetaTerms> {
    let k = ds.k();
    if k != 3 || theta_basis.len() != 3 {
        return Err(Error::InvalidSpec(
            "interaction fitting is supported only for K=3".into(),
        ));
    }
    let dims: Vec<usize> = theta_basis.iter().map(BasisSpec::len).collect();
    let n_params: usize = dims.iter().sum::<usize>() + 1;
    let offsets: Vec<usize> = {
        let mut o = vec![0usize];
        for d in &dims {
            o.push(o.last().unwrap() + d);
        }
        o
    };

    // precompute per-record quantities
    struct CompleteRec {
        g: [Vec<f64>; 3],
        /// (1 - q_i) / q_i for each variable
        ratio: [f64; 3],
    }
    let mut complete: Vec<CompleteRec> = Vec::new();
    let mut direct: Vec<(usize, Vec<f64>)> = Vec::new(); // (c, g_c) for single-observed patterns
    let mut n_all_missing = 0usize;
    for rec in ds.records() {
        if rec.pattern.is_complete() {
            let mut ratio = [0.0f64; 3];
            for i in 0..3 {
                let q = model.univariate_prob(i, &rec.l, &rec.x);
                ratio[i] = (1.0 - q) / q;
            }
            complete.push(CompleteRec {
                g: [
                    theta_basis[0].eval_vec(&rec.l, &rec.x),
                    theta_basis[1].eval_vec(&rec.l, &rec.x),
                    theta_basis[2].eval_vec(&rec.l, &rec.x),
                ],
                ratio,
            });
        } else if rec.pattern.n_observed() == 1 {
            let c = rec.pattern.observed()[0];
            direct.push((c, theta_basis[c].eval_vec(&rec.l, &rec.x)));
        } else if rec.pattern.n_observed() == 0 {
            n_all_missing += 1;
        }
    }
    let n = ds.n() as f64;
    let _ = (n_params, offsets);

    // The system is block-triangular: the equation for pair c involves
    // only its own coefficients (and is the gradient of a convex
    // objective), and the three-way term then solves in closed form.
    let mut pair: Vec<LinearFunction> = Vec::with_capacity(3);
    for c in 0..3 {
        let (a, b) = match c {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let dim = dims[c];
        let mut target = vec![0.0f64; dim];
        let mut n_direct = 0usize;
        for (cc, g) in &direct {
            if *cc == c {
                n_direct += 1;
                for (s, gv) in g.iter().enumerate() {
                    target[s] += gv;
                }
            }
        }
        // balance the intercept so the initial residual is near zero
        let w_sum: f64 = complete.iter().map(|r| r.ratio[a] * r.ratio[b]).sum();
        let mut init = vec![0.0f64; dim];
        if let Some(ij) = theta_basis[c]
            .terms
            .iter()
            .position(|t| t.factors.is_empty())
        {
            init[ij] = ((n_direct as f64).max(0.5) / w_sum.max(1e-300)).ln();
        }
        let log_w: Vec<f64> = complete
            .iter()
            .map(|rec| (rec.ratio[a] * rec.ratio[b]).max(1e-300).ln())
            .collect();
        let coefs = solve_exponential_tilt(
            &complete.iter().map(|r| r.g[c].as_slice()).collect::<Vec<_>>(),
            &log_w,
            &target,
            &init,
            n,
        )?;
        pair.push(LinearFunction::new(theta_basis[c].clone(), coefs)?);
    }

    let mut w4 = 0.0f64;
    for rec in &complete {
        let t: f64 = (0..3)
            .map(|c| {
                rec.g[c]
                    .iter()
                    .zip(&pair[c].coefs)
                    .map(|(u, v)| u * v)
                    .sum::<f64>()
            })
            .sum();
        w4 += rec.ratio[0] * rec.ratio[1] * rec.ratio[2] * t.exp();
    }
    let three_way = ((n_all_missing as f64).max(0.5) / w4.max(1e-300)).ln();
    Ok(ThetaTerms { pair, three_way })
}

/// How the pattern-mixture regressions are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PmForm {
    /// Regress b(L) on the observed-coordinate basis with odds-ratio
    /// weights; the fitted function models the ratio directly.
    #[default]
    WeightedRatio,
    /// Model numerator `E[OR b | R=1, ...]` and denominator
    /// `E[OR | R=1, ...]` by separate unweighted regressions.
    SeparateNumDen,
}

/// A fitted pattern-mixture regression for one pattern.
#[derive(Debug, Clone)]
pub enum PatternMixtureFit {
    Ratio(LinearFunction),
    Separate {
        num: LinearFunction,
        den: LinearFunction,
    },
}

impl PatternMixtureFit {
    /// Predicted `E[b(L) | R=r, L_{(r)}, X]`; only observed coordinates
    /// of `l` are read.
    pub fn eval(&self, l: &[f64], x: &[f64]) -> f64 {
        match self {
            PatternMixtureFit::Ratio(f) => f.eval(l, x),
            PatternMixtureFit::Separate { num, den } => num.eval(l, x) / den.eval(l, x),
        }
    }
}

/// Intercept + linear terms in the observed L coordinates and X.
pub fn pm_basis(r: PatternId, p: usize) -> BasisSpec {
    let mut terms = vec![Term::intercept()];
    terms.extend(r.observed().into_iter().map(|i| Term::of(vec![Factor::l(i)])));
    terms.extend((0..p).map(|m| Term::of(vec![Factor::x(m)])));
    BasisSpec::new(terms)
}

/// Fit the pattern-mixture regression of `b(L)` for pattern `r` as an
/// odds-ratio-weighted complete-case regression.
pub fn fit_pattern_mixture(
    ds: &Dataset,
    model: &SelectionModel,
    r: PatternId,
    basis: &BasisSpec,
    functional: &TargetFunctional,
    form: PmForm,
) -> Result<PatternMixtureFit> {
    let basis = basis.clone();
    let dim = basis.len();
    match form {
        PmForm::WeightedRatio => {
            let mut eq = NormalEq::new(dim);
            for rec in ds.records() {
                if !rec.pattern.is_complete() {
                    continue;
                }
                let w = model.log_odds_ratio_full(r, &rec.l, &rec.x)?.exp();
                eq.add(
                    &basis.eval_vec(&rec.l, &rec.x),
                    functional.eval(&rec.l),
                    w,
                );
            }
            let coefs = eq.solve(&format!("pattern-mixture regression for pattern {r}"))?;
            Ok(PatternMixtureFit::Ratio(LinearFunction::new(basis, coefs)?))
        }
        PmForm::SeparateNumDen => {
            let mut num_eq = NormalEq::new(dim);
            let mut den_eq = NormalEq::new(dim);
            for rec in ds.records() {
                if !rec.pattern.is_complete() {
                    continue;
                }
                let w = model.log_odds_ratio_full(r, &rec.l, &rec.x)?.exp();
                let row = basis.eval_vec(&rec.l, &rec.x);
                num_eq.add(&row, w * functional.eval(&rec.l), 1.0);
                den_eq.add(&row, w, 1.0);
            }
            let ctx = format!("pattern-mixture regression for pattern {r}");
            Ok(PatternMixtureFit::Separate {
                num: LinearFunction::new(basis.clone(), num_eq.solve(&ctx)?)?,
                den: LinearFunction::new(basis, den_eq.solve(&ctx)?)?,
            })
        }
    }
}

/// Pattern-mixture fits for every incomplete pattern with support.
pub fn fit_all_pattern_mixtures(
    ds: &Dataset,
    model: &SelectionModel,
    functional: &TargetFunctional,
    form: PmForm,
) -> Result<HashMap<PatternId, PatternMixtureFit>> {
    let support = ds.pattern_support();
    let mut out = HashMap::new();
    for (&pat, &count) in &support.counts {
        if pat.is_complete() || count == 0 {
            continue;
        }
        let basis = pm_basis(pat, ds.p());
        out.insert(
            pat,
            fit_pattern_mixture(ds, model, pat, &basis, functional, form)?,
        );
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::oracle::{build_discrete_law, index_to_values, DiscreteLaw};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn logistic_recovers_coefficients() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let truth = [0.5, -1.2, 0.8];
        let mut design = Vec::new();
        let mut y = Vec::new();
        for _ in 0..50_000 {
            let row = vec![1.0, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let eta: f64 = row.iter().zip(&truth).map(|(a, b)| a * b).sum();
            y.push(rng.gen_bool(expit(eta)) as u8 as f64);
            design.push(row);
        }
        let beta = fit_logistic(&design, &y, 1).unwrap();
        for (b, t) in beta.iter().zip(&truth) {
            assert!((b - t).abs() < 0.06, "got {b}, want {t}");
        }
    }

    #[test]
    fn logistic_detects_separation() {
        let design: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![1.0, if i < 20 { -1.0 } else { 1.0 }])
            .collect();
        let y: Vec<f64> = (0..40).map(|i| (i >= 20) as u8 as f64).collect();
        let err = fit_logistic(&design, &y, 2).unwrap_err();
        assert!(
            matches!(err, Error::Separation { variable: 2 }),
            "unexpected error: {err:?}"
        );
    }

    #[test]
    fn newton_solves_nonlinear_system() {
        // x^2 + y - 3 = 0, x + y^2 - 5 = 0 near (1.2, 1.9)
        let f = |v: &[f64]| -> Result<Vec<f64>> {
            Ok(vec![v[0] * v[0] + v[1] - 3.0, v[0] + v[1] * v[1] - 5.0])
        };
        let root = newton_root(f, &[1.0, 1.0], &NewtonOptions::default()).unwrap();
        assert_relative_eq!(root[0] * root[0] + root[1], 3.0, epsilon = 1e-7);
        assert_relative_eq!(root[0] + root[1] * root[1], 5.0, epsilon = 1e-7);
    }

    #[test]
    fn newton_reports_nonconvergence() {
        let f = |v: &[f64]| -> Result<Vec<f64>> { Ok(vec![v[0] * v[0] + 1.0]) };
        assert!(matches!(
            newton_root(f, &[3.0], &NewtonOptions::default()).unwrap_err(),
            Error::NonConvergence { .. }
        ));
    }

    #[test]
    fn normal_equations_exact_interpolation() {
        let mut eq = NormalEq::new(2);
        for (x, y) in [(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)] {
            eq.add(&[1.0, x], y, 1.0);
        }
        let coefs = eq.solve("line fit").unwrap();
        assert_relative_eq!(coefs[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(coefs[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let mut eq = NormalEq::new(2);
        for _ in 0..5 {
            eq.add(&[1.0, 1.0], 2.0, 1.0);
        }
        assert!(matches!(
            eq.solve("degenerate").unwrap_err(),
            Error::RankDeficient(_)
        ));
    }

    pub(crate) fn sample_law(law: &DiscreteLaw, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let k = law.k();
        let p = law.p();
        let cells = law.cell_table();
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = cells.len() - 1;
            for (idx, &pr) in cells.iter().enumerate() {
                acc += pr;
                if u < acc {
                    chosen = idx;
                    break;
                }
            }
            let x_idx = chosen & ((1 << p) - 1);
            let l_idx = (chosen >> p) & ((1 << k) - 1);
            let r_idx = chosen >> (p + k);
            let pattern = PatternId::from_index(r_idx as u32, k).unwrap();
            let mut l = index_to_values(l_idx, k);
            for i in 0..k {
                if !pattern.is_observed(i) {
                    l[i] = f64::NAN;
                }
            }
            records.push(Record::new(pattern, l, index_to_values(x_idx, p)).unwrap());
        }
        Dataset::new(k, p, records).unwrap()
    }

    #[test]
    fn selection_fit_recovers_univariate_probabilities() {
        let spec = crate::oracle::tests::benchmark_spec(false);
        let law = build_discrete_law(&spec).unwrap();
        let ds = sample_law(&law, 60_000, 11);
        let tmpl = SelectionTemplate::linear(3, 0, &[0.0; 3], false);
        for method in [OrFitMethod::Mle, OrFitMethod::DoublyRobust] {
            let model = fit_selection(&ds, &tmpl, method).unwrap();
            for i in 0..3 {
                for l_idx in 0..8 {
                    let l = index_to_values(l_idx, 3);
                    let fitted = model.univariate_prob(i, &l, &[]);
                    let truth = law.q_obs(i, l_idx, 0);
                    assert!(
                        (fitted - truth).abs() < 0.04,
                        "variable {i} cell {l_idx}: fitted {fitted}, truth {truth}"
                    );
                }
            }
        }
    }

    #[test]
    fn theta_fit_recovers_interactions() {
        let spec = crate::oracle::tests::benchmark_spec(false);
        let law = build_discrete_law(&spec).unwrap();
        let ds = sample_law(&law, 120_000, 13);
        let tmpl = SelectionTemplate::linear(3, 0, &[0.0; 3], true);
        let model = fit_selection(&ds, &tmpl, OrFitMethod::Mle).unwrap();
        let theta = model.theta.as_ref().unwrap();
        let truth = law.true_theta3().unwrap();
        for c in 0..3 {
            for lc in 0..2 {
                let mut l = [0.0; 3];
                l[c] = lc as f64;
                let fitted = theta.pair[c].eval(&l, &[]);
                assert!(
                    (fitted - truth.pair[c][lc][0]).abs() < 0.15,
                    "pair {c} at L={lc}: fitted {fitted}, truth {}",
                    truth.pair[c][lc][0]
                );
            }
        }
        assert!((theta.three_way - truth.theta4).abs() < 0.3);
    }

    #[test]
    fn pattern_mixture_matches_population_projection() {
        let spec = crate::oracle::tests::benchmark_spec(false);
        let law = build_discrete_law(&spec).unwrap();
        let ds = sample_law(&law, 120_000, 17);
        let tmpl = SelectionTemplate::linear(3, 0, &[0.0; 3], true);
        let model = fit_selection(&ds, &tmpl, OrFitMethod::Mle).unwrap();
        let functional = TargetFunctional::Mean(2);
        // leave-one-out pattern for L3: the regression basis (1, L1, L2)
        // spans 3 of the 4 cells; compare against the population
        // weighted projection computed by enumeration
        let r = PatternId::leave_one_out(2, 3);
        let fit =
            fit_pattern_mixture(&ds, &model, r, &pm_basis(r, 0), &functional, PmForm::WeightedRatio)
                .unwrap();
        let mut pop = NormalEq::new(3);
        let complete = law.n_r() - 1;
        for l_idx in 0..8 {
            let l = index_to_values(l_idx, 3);
            let or = law.cond_r(r.index() as usize, l_idx, 0) / law.cond_r(complete, l_idx, 0);
            let or0 = law.cond_r(r.index() as usize, 0, 0) / law.cond_r(complete, 0, 0);
            pop.add(
                &[1.0, l[0], l[1]],
                functional.eval(&l),
                law.joint(complete, l_idx, 0) * or / or0,
            );
        }
        let pop_coefs = pop.solve("population projection").unwrap();
        if let PatternMixtureFit::Ratio(f) = fit {
            for (a, b) in f.coefs.iter().zip(&pop_coefs) {
                assert!((a - b).abs() < 0.05, "fitted {a}, population {b}");
            }
        } else {
            panic!("expected ratio form");
        }
    }

    #[test]
    fn separate_form_agrees_with_ratio_form_at_scale() {
        let spec = crate::oracle::tests::benchmark_spec(false);
        let law = build_discrete_law(&spec).unwrap();
        let ds = sample_law(&law, 60_000, 19);
        let tmpl = SelectionTemplate::linear(3, 0, &[0.0; 3], false);
        let model = fit_selection(&ds, &tmpl, OrFitMethod::Mle).unwrap();
        let functional = TargetFunctional::Mean(0);
        let r = PatternId::leave_one_out(0, 3);
        let basis = pm_basis(r, 0);
        let a =
            fit_pattern_mixture(&ds, &model, r, &basis, &functional, PmForm::WeightedRatio).unwrap();
        let b =
            fit_pattern_mixture(&ds, &model, r, &basis, &functional, PmForm::SeparateNumDen).unwrap();
        for l_idx in [6usize, 2, 4, 0] {
            let mut l = index_to_values(l_idx, 3);
            l[0] = f64::NAN;
            let va = a.eval(&l, &[]);
            let vb = b.eval(&l, &[]);
            assert!((va - vb).abs() < 0.1, "ratio {va} vs separate {vb}");
        }
    }

    #[test]
    fn missing_leave_one_out_support_is_an_error() {
        let spec = crate::oracle::tests::benchmark_spec(false);
        let law = build_discrete_law(&spec).unwrap();
        let ds = sample_law(&law, 2_000, 23);
        // drop every record where only variable 1 is missing
        let keep: Vec<Record> = ds
            .records()
            .iter()
            .filter(|r| r.pattern != PatternId::leave_one_out(0, 3))
            .cloned()
            .collect();
        let ds = Dataset::new(3, 0, keep).unwrap();
        let tmpl = SelectionTemplate::linear(3, 0, &[0.0; 3], false);
        assert!(matches!(
            fit_selection(&ds, &tmpl, OrFitMethod::Mle).unwrap_err(),
            Error::InsufficientSupport(_)
        ));
    }
}
