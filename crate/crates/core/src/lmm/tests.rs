use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Dense REML criterion assembled from the full n x n covariance.
fn dense_loglik(table: &ObservationTable, spec: &ModelSpec, theta: &[f64]) -> f64 {
    let n = table.len();
    let mut v = DMatrix::<f64>::identity(n, n) * theta[0];
    for (k, f) in spec.factors().iter().enumerate() {
        let idx = table.factor_index(&f.name).unwrap();
        for i in 0..n {
            for j in 0..n {
                if table.level(i, idx) == table.level(j, idx) {
                    v[(i, j)] += theta[1 + k];
                }
            }
        }
    }
    let chol = v.clone().cholesky().unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let vinv = chol.inverse();
    let ones = nalgebra::DVector::from_element(n, 1.0);
    let y = nalgebra::DVector::from_column_slice(table.responses());
    let c = ones.dot(&(&vinv * &ones));
    let b = ones.dot(&(&vinv * &y));
    let ypy = y.dot(&(&vinv * &y)) - b * b / c;
    -0.5 * (logdet + c.ln() + ypy)
}

fn random_crossed(seed: u64, n: usize) -> ObservationTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = ObservationTable::new(["home", "away"]).unwrap();
    let h: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let a: Vec<f64> = (0..5).map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal)).collect();
    for _ in 0..n {
        let i = rng.random_range(0..6);
        let j = rng.random_range(0..5);
        let y = 0.3 + h[i] - a[j] + 0.8 * rng.sample::<f64, _>(StandardNormal);
        t.push(y, &[format!("h{i}"), format!("a{j}")]).unwrap();
    }
    t
}

fn ha_spec() -> ModelSpec {
    ModelSpec::new([("home", Sign::Plus), ("away", Sign::Minus)]).unwrap()
}

fn random_oneway(rng: &mut ChaCha8Rng, t: usize, n: usize, s_u: f64) -> DMatrix<f64> {
    let u: Vec<f64> = (0..t).map(|_| s_u * rng.sample::<f64, _>(StandardNormal)).collect();
    DMatrix::from_fn(t, n, |i, _| 2.0 + u[i] + rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn criterion_matches_dense_oracle() {
    let table = random_crossed(11, 40);
    let spec = ha_spec();
    for theta in [[0.7, 1.1, 0.4], [2.0, 0.0, 0.3], [0.05, 3.0, 0.0]] {
        let vc = VarianceComponents::new(theta[0], theta[1..].to_vec());
        let fast = restricted_loglik(&table, &spec, &vc).unwrap();
        let dense = dense_loglik(&table, &spec, &theta);
        assert!((fast - dense).abs() < 1e-9, "{fast} vs {dense}");
    }
}

#[test]
fn analytic_derivatives_match_finite_differences() {
    let table = random_crossed(5, 35);
    let spec = ha_spec();
    let model = MixedModel::new(&table, &spec).unwrap();
    let theta = [0.9, 0.6, 0.35];
    let ev = model.evaluate(&theta, true).unwrap();
    let d = ev.grad.unwrap();
    for i in 0..3 {
        let h = 1e-6 * theta[i];
        let mut tp = theta;
        let mut tm = theta;
        tp[i] += h;
        tm[i] -= h;
        let fd = (dense_loglik(&table, &spec, &tp) - dense_loglik(&table, &spec, &tm)) / (2.0 * h);
        assert!(
            (fd - d.gradient[i]).abs() < 1e-5 * (1.0 + fd.abs()),
            "grad {i}: {fd} vs {}",
            d.gradient[i]
        );
        let gp = model.evaluate(&tp, true).unwrap().grad.unwrap().gradient;
        let gm = model.evaluate(&tm, true).unwrap().grad.unwrap().gradient;
        for j in 0..3 {
            let fd2 = -(gp[j] - gm[j]) / (2.0 * h);
            assert!(
                (fd2 - d.observed[(i, j)]).abs() < 1e-4 * (1.0 + fd2.abs()),
                "observed info ({i},{j}): {fd2} vs {}",
                d.observed[(i, j)]
            );
        }
    }
}

#[test]
fn single_observation_criterion_is_zero() {
    let mut t = ObservationTable::new(Vec::<String>::new()).unwrap();
    t.push(0.0, &[] as &[&str]).unwrap();
    let v = restricted_loglik(&t, &ModelSpec::intercept_only(), &VarianceComponents::new(1.0, vec![])).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn criterion_invariant_to_shift() {
    let table = random_crossed(3, 30);
    let spec = ha_spec();
    let vc = VarianceComponents::new(0.8, vec![0.5, 0.2]);
    let a = restricted_loglik(&table, &spec, &vc).unwrap();
    let b = restricted_loglik(&table.shifted(123.0), &spec, &vc).unwrap();
    assert!((a - b).abs() < 1e-8);
    assert!(restricted_loglik(&table, &spec, &VarianceComponents::new(0.0, vec![0.5, 0.2])).is_err());
}

#[test]
fn oneway_closed_form_examples() {
    let y = DMatrix::from_row_slice(3, 2, &[1.0, 3.0, 2.0, 4.0, 6.0, 8.0]);
    let cf = balanced_oneway_reml(&y).unwrap();
    assert_eq!((cf.mu_hat, cf.sigma2_e, cf.sigma2_u), (4.0, 2.0, 6.0));

    let y = DMatrix::from_row_slice(3, 2, &[0.0, 2.0, 1.0, 1.0, 2.0, 0.0]);
    let cf = balanced_oneway_reml(&y).unwrap();
    assert_eq!(cf.sigma2_u, 0.0);
    assert!((cf.sigma2_e - 0.8).abs() < 1e-15);

    let y = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 4.0, 4.0, -2.0, -2.0]);
    let cf = balanced_oneway_reml(&y).unwrap();
    assert_eq!(cf.sigma2_e, 0.0);
    assert!((cf.sigma2_u - 9.0).abs() < 1e-12);
}

#[test]
fn reml_fit_reproduces_oneway_example() {
    let y = DMatrix::from_row_slice(3, 2, &[1.0, 3.0, 2.0, 4.0, 6.0, 8.0]);
    let fit = reml_fit(
        &oneway_table(&y).unwrap(),
        &ModelSpec::new([("group", Sign::Plus)]).unwrap(),
    )
    .unwrap();
    assert!(fit.converged);
    assert!((fit.mu_hat - 4.0).abs() < 1e-10);
    assert!((fit.sigma2_e - 2.0).abs() < 1e-8);
    assert!((fit.sigma2["group"] - 6.0).abs() < 1e-8);
    let level1 = fit.mu_hat + fit.effect("group", "1").unwrap();
    assert!((level1 - 16.0 / 7.0).abs() < 1e-8);

    let blup = blup_closed_form(&MeanVector::new(vec![2.0, 3.0, 7.0]).unwrap(), 4.0, 6.0, 1.0).unwrap();
    for (b, e) in blup.as_slice().iter().zip([16.0 / 7.0, 22.0 / 7.0, 46.0 / 7.0]) {
        assert!((b - e).abs() < 1e-13);
    }
}

#[test]
fn reml_fit_truncates_at_zero() {
    let y = DMatrix::from_row_slice(3, 2, &[0.0, 2.0, 1.0, 1.0, 2.0, 0.0]);
    let fit = reml_fit(
        &oneway_table(&y).unwrap(),
        &ModelSpec::new([("group", Sign::Plus)]).unwrap(),
    )
    .unwrap();
    assert_eq!(fit.sigma2["group"], 0.0);
    assert!((fit.sigma2_e - 0.8).abs() < 1e-8);
    assert!(fit.boundary.contains(&"group".to_string()));
    assert!(fit.effects["group"].values().all(|u| *u == 0.0));
}

#[test]
fn reml_fit_floor_case() {
    let y = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 4.0, 4.0, -2.0, -2.0]);
    let fit = reml_fit(
        &oneway_table(&y).unwrap(),
        &ModelSpec::new([("group", Sign::Plus)]).unwrap(),
    )
    .unwrap();
    assert!(fit.sigma2_e > 0.0 && fit.sigma2_e < 1e-6, "{}", fit.sigma2_e);
    // the intercept is nearly confounded with the group effects at the floor,
    // so only about six digits survive
    assert!((fit.sigma2["group"] - 9.0).abs() < 1e-3, "{}", fit.sigma2["group"]);
    assert!((fit.mu_hat - 1.0).abs() < 1e-4);
}

#[test]
fn blup_edge_cases() {
    let y = MeanVector::new(vec![1.0, 5.0]).unwrap();
    assert_eq!(blup_closed_form(&y, 2.0, 0.0, 1.0).unwrap().as_slice(), &[2.0, 2.0]);
    assert_eq!(blup_closed_form(&y, 2.0, 3.0, 0.0).unwrap().as_slice(), &[1.0, 5.0]);
    assert_eq!(blup_closed_form(&y, 2.0, 0.0, 0.0).unwrap().as_slice(), &[1.0, 5.0]);
}

#[test]
fn fits_are_permutation_invariant() {
    let table = random_crossed(21, 50);
    let spec = ha_spec();
    let a = reml_fit(&table, &spec).unwrap();
    let order: Vec<usize> = (0..table.len()).rev().collect();
    let b = reml_fit(&table.permuted(&order), &spec).unwrap();
    assert!((a.mu_hat - b.mu_hat).abs() < 1e-8);
    assert!((a.sigma2_e - b.sigma2_e).abs() < 1e-7);
    for (f, lv) in &a.effects {
        for (l, v) in lv {
            assert!((v - b.effects[f][l]).abs() < 1e-7, "{v} vs {}", b.effects[f][l]);
        }
    }
}

fn check_mixed_model_equations(table: &ObservationTable, spec: &ModelSpec, fit: &FitResult) {
    let n = table.len();
    let mut fitted = vec![fit.mu_hat; n];
    let idx: Vec<usize> = spec
        .factors()
        .iter()
        .map(|f| table.factor_index(&f.name).unwrap())
        .collect();
    for row in 0..n {
        for (k, f) in spec.factors().iter().enumerate() {
            fitted[row] += f.sign.value() * fit.effects[&f.name][table.level(row, idx[k])];
        }
    }
    let resid: Vec<f64> = table.responses().iter().zip(&fitted).map(|(y, f)| y - f).collect();
    assert!(resid.iter().sum::<f64>().abs() < 1e-8);
    // sigma2_e u + sigma2_k Z_k'(fitted - y) = 0, level by level
    for (k, f) in spec.factors().iter().enumerate() {
        let s2 = fit.sigma2[&f.name];
        for (level, u) in &fit.effects[&f.name] {
            let zr: f64 = (0..n)
                .filter(|&r| table.level(r, idx[k]) == level)
                .map(|r| f.sign.value() * resid[r])
                .sum();
            let lhs = fit.sigma2_e * u - s2 * zr;
            assert!(lhs.abs() < 1e-8, "{} {}: {}", f.name, level, lhs);
        }
    }
}

#[test]
fn fitted_effects_solve_mixed_model_equations() {
    for seed in 0..5 {
        let table = random_crossed(100 + seed, 60);
        let spec = ha_spec();
        let fit = reml_fit(&table, &spec).unwrap();
        assert!(fit.converged);
        check_mixed_model_equations(&table, &spec, &fit);
    }
}

#[test]
fn converged_fits_are_stationary() {
    for seed in 0..8 {
        let table = random_crossed(200 + seed, 45);
        let spec = ha_spec();
        let fit = reml_fit(&table, &spec).unwrap();
        assert!(fit.converged);
        let theta = fit.components(&spec).to_theta();
        let mut norm2 = 0.0;
        for i in 0..theta.len() {
            if theta[i] <= 1e-9 {
                continue;
            }
            let h = 1e-5 * theta[i];
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let f =
                |t: &[f64]| restricted_loglik(&table, &spec, &VarianceComponents::new(t[0], t[1..].to_vec())).unwrap();
            let g = (f(&tp) - f(&tm)) / (2.0 * h);
            norm2 += g * g;
        }
        assert!(norm2.sqrt() < 1e-4, "seed {seed}: gradient norm {}", norm2.sqrt());
    }
}

#[test]
fn rcbd_intercept_is_grand_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut table = ObservationTable::new(["treatment", "block"]).unwrap();
    let mut sum = 0.0;
    for b in 0..6 {
        let beff: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        for t in 0..5 {
            let y = t as f64 + beff + rng.sample::<f64, _>(StandardNormal);
            sum += y;
            table.push(y, &[t.to_string(), b.to_string()]).unwrap();
        }
    }
    let spec = ModelSpec::new([("treatment", Sign::Plus), ("block", Sign::Plus)]).unwrap();
    let fit = reml_fit(&table, &spec).unwrap();
    assert!((fit.mu_hat - sum / 30.0).abs() < 1e-10);
}

#[test]
fn all_zero_league_fits_at_floor() {
    let mut table = ObservationTable::new(["home", "away"]).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                table.push(0.0, &[format!("T{i}"), format!("T{j}")]).unwrap();
            }
        }
    }
    let fit = reml_fit(&table, &ha_spec()).unwrap();
    assert_eq!(fit.mu_hat, 0.0);
    assert!(fit.sigma2_e > 0.0 && fit.sigma2_e <= 1e-10);
    assert_eq!(fit.sigma2["home"], 0.0);
    assert_eq!(fit.sigma2["away"], 0.0);
    assert!(fit.effects.values().flat_map(|m| m.values()).all(|v| *v == 0.0));
}

#[test]
fn fit_preconditions() {
    let mut t = ObservationTable::new(["g"]).unwrap();
    t.push(1.0, &["a"]).unwrap();
    t.push(2.0, &["a"]).unwrap();
    assert!(reml_fit(&t, &ModelSpec::new([("g", Sign::Plus)]).unwrap()).is_err());
    assert!(reml_fit(&t, &ModelSpec::new([("missing", Sign::Plus)]).unwrap()).is_err());
    assert!(ModelSpec::new([("g", Sign::Plus), ("g", Sign::Minus)]).is_err());
    assert!(ModelSpec::new([(RESIDUAL, Sign::Plus)]).is_err());
}

#[test]
fn flat_prior_map_equals_reml_bitwise() {
    let table = random_crossed(77, 50);
    let spec = ha_spec();
    let a = reml_fit(&table, &spec).unwrap();
    let b = map_fit(&table, &spec, &VariancePrior::flat()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_component_posterior_mode() {
    let mut t = ObservationTable::new(Vec::<String>::new()).unwrap();
    t.push(0.37, &[] as &[&str]).unwrap();
    let spec = ModelSpec::intercept_only();
    // flat prior with no residual df is rejected
    assert!(map_fit(&t, &spec, &VariancePrior::flat()).is_err());
    let prior = VariancePrior::flat().with_residual(InverseGamma::from_scaled_chi2(1.0, 2.0).unwrap());
    let fit = map_fit(&t, &spec, &prior).unwrap();
    assert!((fit.sigma2_e - 0.5).abs() < 1e-10, "{}", fit.sigma2_e);
}

#[test]
fn concentrated_prior_dominates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = random_oneway(&mut rng, 8, 4, 1.0);
    let table = oneway_table(&y).unwrap();
    let spec = ModelSpec::new([("group", Sign::Plus)]).unwrap();
    let target = 3.0;
    let prior = VariancePrior::flat().with_factor("group", InverseGamma::new(1e6, target * (1e6 + 1.0)).unwrap());
    let fit = map_fit(&table, &spec, &prior).unwrap();
    assert!(
        ((fit.sigma2["group"] - target) / target).abs() < 0.01,
        "{}",
        fit.sigma2["group"]
    );
}

#[test]
fn prior_pull_is_monotone_in_df() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y = random_oneway(&mut rng, 10, 5, 1.5);
    let table = oneway_table(&y).unwrap();
    let spec = ModelSpec::new([("group", Sign::Plus)]).unwrap();
    let reml = reml_fit(&table, &spec).unwrap().sigma2["group"];
    let x = 6.0;
    let mut prev = reml;
    for d in [1.0, 2.0, 5.0, 10.0, 40.0, 200.0, 2000.0] {
        let prior = VariancePrior::flat().with_factor("group", InverseGamma::from_scaled_chi2(x, d).unwrap());
        let fit = map_fit(&table, &spec, &prior).unwrap();
        let s2 = fit.sigma2["group"];
        let mode = d * x / (d + 2.0);
        let (lo, hi) = if reml < mode { (reml, mode) } else { (mode, reml) };
        assert!(s2 >= lo - 1e-9 && s2 <= hi + 1e-9, "d={d}: {s2} not in [{lo}, {hi}]");
        assert!((s2 - mode).abs() <= (prev - mode).abs() + 1e-9 || d == 1.0);
        prev = s2;
    }
}

#[test]
fn map_fit_rejects_unknown_prior_factor() {
    let table = random_crossed(1, 30);
    let prior = VariancePrior::flat().with_factor("nope", InverseGamma::new(1.0, 1.0).unwrap());
    assert!(map_fit(&table, &ha_spec(), &prior).is_err());
}

#[test]
fn fit_json_round_trip() {
    let table = random_crossed(2, 30);
    let fit = reml_fit(&table, &ha_spec()).unwrap();
    let text = serde_json::to_string(&fit).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["mu_hat", "sigma2", "effects", "criterion", "converged"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(v["sigma2"].get(RESIDUAL).is_some());
    let back: FitResult = serde_json::from_str(&text).unwrap();
    assert_eq!(back, fit);
}

// --- GLS ---------------------------------------------------------------

fn bibd3_table(y: &[f64]) -> ObservationTable {
    let blocks = [[1, 2], [1, 3], [2, 3]];
    let mut t = ObservationTable::new(["treatment", "block"]).unwrap();
    let mut it = y.iter();
    for (b, blk) in blocks.iter().enumerate() {
        for tr in blk {
            t.push(*it.next().unwrap(), &[tr.to_string(), (b + 1).to_string()])
                .unwrap();
        }
    }
    t
}

/// Brute-force GLS over the full observation covariance.
fn dense_gls(table: &ObservationTable, s2e: f64, s2b: f64) -> Vec<f64> {
    let n = table.len();
    let labels = table.levels_of(0);
    let t = labels.len();
    let x = DMatrix::from_fn(n, t, |i, j| if table.level(i, 0) == labels[j] { 1.0 } else { 0.0 });
    let v = DMatrix::from_fn(n, n, |i, j| {
        let same = table.level(i, 1) == table.level(j, 1);
        (if i == j { s2e } else { 0.0 }) + if same { s2b } else { 0.0 }
    });
    let vinv = v.try_inverse().unwrap();
    let y = nalgebra::DVector::from_column_slice(table.responses());
    let xtv = x.transpose() * &vinv;
    let lhs = &xtv * &x;
    let rhs = &xtv * y;
    lhs.lu().solve(&rhs).unwrap().iter().copied().collect()
}

#[test]
fn gls_symmetric_zero_data() {
    let est = gls_estimate(&bibd3_table(&[0.0; 6]), "treatment", "block", 1.0, 1.0).unwrap();
    assert_eq!(est.estimate.as_slice(), &[0.0, 0.0, 0.0]);
}

#[test]
fn gls_matches_dense_solve() {
    let table = bibd3_table(&[1.0, -0.5, 2.0, 0.3, 1.7, -1.2]);
    let est = gls_estimate(&table, "treatment", "block", 1.0, 1.0).unwrap();
    let dense = dense_gls(&table, 1.0, 1.0);
    for (a, b) in est.estimate.as_slice().iter().zip(&dense) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn gls_without_block_variance_is_raw_means() {
    let table = bibd3_table(&[1.0, -0.5, 2.0, 0.3, 1.7, -1.2]);
    let est = gls_estimate(&table, "treatment", "block", 2.0, 0.0).unwrap();
    let expect = [(1.0 + 2.0) / 2.0, (-0.5 + 1.7) / 2.0, (0.3 - 1.2) / 2.0];
    for (a, b) in est.estimate.as_slice().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gls_complete_blocks_give_treatment_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut table = ObservationTable::new(["treatment", "block"]).unwrap();
    let mut sums = [0.0; 4];
    for b in 0..5 {
        for (t, s) in sums.iter_mut().enumerate() {
            let y: f64 = rng.sample(StandardNormal);
            *s += y;
            table.push(y, &[t.to_string(), b.to_string()]).unwrap();
        }
    }
    for (s2e, s2b) in [(1.0, 0.5), (0.1, 30.0), (4.0, 0.0)] {
        let est = gls_estimate(&table, "treatment", "block", s2e, s2b).unwrap();
        for (a, s) in est.estimate.as_slice().iter().zip(sums) {
            assert!((a - s / 5.0).abs() < 1e-10);
        }
    }
}

#[test]
fn gls_rejects_disconnected_design() {
    let mut t = ObservationTable::new(["treatment", "block"]).unwrap();
    for (y, tr, b) in [(1.0, "1", "a"), (2.0, "2", "a"), (3.0, "3", "b"), (4.0, "4", "b")] {
        t.push(y, &[tr, b]).unwrap();
    }
    match gls_estimate(&t, "treatment", "block", 1.0, 1.0) {
        Err(Error::Disconnected { components }) => {
            assert_eq!(components, vec![vec!["1", "2"], vec!["3", "4"]]);
        }
        other => panic!("expected disconnected error, got {other:?}"),
    }
}
