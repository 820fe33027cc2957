//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here reuses the sampler's precision algebra: Gaussian full
//! conditionals are obtained by conditioning the joint covariance of the
//! generative model directly.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use smokecausal_core::data::PanelDataset;
use smokecausal_core::gibbs::{Model, ModelState, PriorConfig};
use smokecausal_core::spatial::{distance_matrix, exp_correlation, SiteSet};

pub const ORIGIN: (f64, f64) = (-120.0, 38.0);

pub fn planar_sites(xy: &[(f64, f64)]) -> SiteSet {
    SiteSet::from_planar(
        (0..xy.len()).map(|i| format!("s{i}")).collect(),
        xy,
        vec![Some("r".to_string()); xy.len()],
        ORIGIN,
    )
    .unwrap()
}

/// The n = 2, T = 3 instance with fixed conditioning values.
pub struct Tiny {
    pub data: PanelDataset,
    pub model: Model,
    pub state: ModelState,
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

pub fn tiny(priors: PriorConfig) -> Tiny {
    let sites = planar_sites(&[(0.0, 0.0), (30.0, 0.0)]);
    let theta_hat = DMatrix::from_row_slice(2, 3, &[3.0, 5.0, 2.5, 4.0, 2.0, 6.0]);
    let delta_hat = DMatrix::from_row_slice(2, 3, &[4.0, 0.0, 2.0, 1.5, 3.0, 0.0]);
    let c = DMatrix::from_row_slice(2, 3, &[1u8, 0, 1, 1, 1, 0]);
    let y = DMatrix::from_row_slice(2, 3, &[9.0, 6.5, 6.0, 7.5, 7.0, 8.0]);
    let data = PanelDataset::with_indicator(sites.clone(), y.clone(), theta_hat, delta_hat, c).unwrap();
    let model = Model::new(&data, 40.0, 60.0, priors).unwrap();
    let state = ModelState {
        theta: DMatrix::from_row_slice(2, 3, &[4.5, 6.0, 3.5, 5.0, 3.0, 7.0]),
        delta: DMatrix::from_row_slice(2, 3, &[4.0, 0.5, 2.0, 2.5, 3.5, -0.5]),
        alpha0: DVector::from_vec(vec![1.2, 0.8]),
        beta0: DVector::from_vec(vec![0.9, 1.1]),
        alpha1: DVector::from_vec(vec![0.4, 0.6]),
        beta1: DVector::from_vec(vec![0.8, 0.7]),
        rho: 0.3,
        s1_sq: 1.5,
        s2_sq: 0.8,
        sigma_sq: 0.6,
        mu: [1.0, 1.0, 0.5, 0.75],
        sig_sq: [0.4, 0.05, 0.3, 0.1],
        y,
    };
    let dist = distance_matrix(&sites);
    Tiny {
        r: exp_correlation(&dist, 40.0).unwrap(),
        k: exp_correlation(&dist, 60.0).unwrap(),
        data,
        model,
        state,
    }
}

/// Bivariate covariance `(sigma1^2, sigma12, sigma2^2)` implied by the state,
/// straight from the definitions `s1^2 = sigma1^2`, `rho = sigma12 / sigma1^2`,
/// `s2^2 = sigma2^2 - sigma12^2 / sigma1^2`.
pub fn sigma_matrix(st: &ModelState) -> DMatrix<f64> {
    let s11 = st.s1_sq;
    let s12 = st.rho * st.s1_sq;
    let s22 = st.s2_sq + s12 * s12 / s11;
    DMatrix::from_row_slice(2, 2, &[s11, s12, s12, s22])
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Condition `N(mean, cov)` on `x[given] = values`; returns the law of `x[keep]`.
pub fn condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    keep: &[usize],
    given: &[usize],
    values: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| cov[(rows[a], cols[b])]);
    let s_kk = pick(keep, keep);
    let s_kg = pick(keep, given);
    let s_gg = pick(given, given);
    let m_k = DVector::from_fn(keep.len(), |a, _| mean[keep[a]]);
    let m_g = DVector::from_fn(given.len(), |a, _| mean[given[a]]);
    let inv = s_gg.try_inverse().expect("conditioning block invertible");
    let gain = &s_kg * &inv;
    let m = m_k + &gain * (values - m_g);
    let c = s_kk - &gain * s_kg.transpose();
    (m, (&c + c.transpose()) * 0.5)
}

/// Largest |z| over the means and covariance entries of vector draws
/// against the stated Gaussian.
pub fn gaussian_max_z(draws: &[DVector<f64>], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = draws.len() as f64;
    let d = mean.len();
    let mut emp_mean = DVector::zeros(d);
    for x in draws {
        emp_mean += x;
    }
    emp_mean /= n;
    let mut emp_cov = DMatrix::zeros(d, d);
    for x in draws {
        let c = x - mean;
        emp_cov += &c * c.transpose();
    }
    emp_cov /= n;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let se = (cov[(i, i)] / n).sqrt();
        worst = worst.max(((emp_mean[i] - mean[i]) / se).abs());
        for j in i..d {
            // Var of (x_i - m_i)(x_j - m_j) for a Gaussian.
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n).sqrt();
            worst = worst.max(((emp_cov[(i, j)] - cov[(i, j)]) / se).abs());
        }
    }
    worst
}

/// Largest |z| of the mean and variance of `1 / draws` against
/// Gamma(shape, rate), i.e. of the draws against IG(shape, rate).
pub fn inv_gamma_max_z(draws: &[f64], shape: f64, rate: f64) -> f64 {
    let n = draws.len() as f64;
    let prec: Vec<f64> = draws.iter().map(|v| 1.0 / v).collect();
    let mean = shape / rate;
    let var = shape / (rate * rate);
    let mu4 = 3.0 * shape * (shape + 2.0) / rate.powi(4);
    let m = prec.iter().sum::<f64>() / n;
    let v = prec.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    let z_mean = (m - mean) / (var / n).sqrt();
    let z_var = (v - var) / ((mu4 - var * var) / n).sqrt();
    z_mean.abs().max(z_var.abs())
}

/// Kolmogorov-Smirnov statistic of draws against a CDF, and its asymptotic p-value.
pub fn ks_test(draws: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let f = cdf(v);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..100 {
        let kf = k as f64;
        p += 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Batch-means standard error of a correlated chain's mean.
pub fn batch_se(v: &[f64], n_batches: usize) -> f64 {
    let b = v.len() / n_batches;
    let means: Vec<f64> = (0..n_batches).map(|k| mean(&v[k * b..(k + 1) * b])).collect();
    (variance(&means) / n_batches as f64).sqrt()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

fn bivariate_cov(st: &ModelState, r: &DMatrix<f64>) -> DMatrix<f64> {
    kron(&sigma_matrix(st), r)
}

fn blockdiag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    out
}

/// Law of (theta_t, delta_t, Y_t) under the generative model at the
/// state's parameters, as (mean, cov) of the stacked 3n vector.
fn day_joint(t: &Tiny, day: usize) -> (DVector<f64>, DMatrix<f64>) {
    let st = &t.state;
    let n = t.model.n;
    let b0 = DVector::from_fn(n, |i, _| st.alpha0[i] + st.beta0[i] * t.model.theta_hat[(i, day)]);
    let b1 = DVector::from_fn(n, |i, _| st.alpha1[i] + st.beta1[i] * t.model.delta_hat[(i, day)]);
    let cdiag = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| t.model.c[(i, day)]));
    let eye = DMatrix::<f64>::identity(n, n);
    // x = mean + A (e0, e1, eps)
    let mut a = DMatrix::zeros(3 * n, 3 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&eye);
    a.view_mut((n, n), (n, n)).copy_from(&eye);
    a.view_mut((2 * n, 0), (n, n)).copy_from(&eye);
    a.view_mut((2 * n, n), (n, n)).copy_from(&cdiag);
    a.view_mut((2 * n, 2 * n), (n, n)).copy_from(&eye);
    let cz = blockdiag(&[bivariate_cov(st, &t.r), &eye * st.sigma_sq]);
    let mut mean = DVector::zeros(3 * n);
    mean.rows_mut(0, n).copy_from(&b0);
    mean.rows_mut(n, n).copy_from(&b1);
    let y_mean = &b0 + &cdiag * &b1;
    mean.rows_mut(2 * n, n).copy_from(&y_mean);
    (mean, &a * cz * a.transpose())
}

/// Law of bias field `j` given every theta_t and delta_t (other fields and
/// parameters at the state's values).
fn bias_oracle(t: &Tiny, j: usize) -> (DVector<f64>, DMatrix<f64>) {
    let st = &t.state;
    let (n, m) = (t.model.n, t.model.m);
    let d = n + 2 * n * m;
    let mut mean = DVector::zeros(d);
    let mut a = DMatrix::zeros(d, d);
    for i in 0..n {
        mean[i] = st.mu[j];
        a[(i, i)] = 1.0;
    }
    let fields = |k: usize, i: usize| if k == j { st.mu[j] } else { st.field(k)[i] };
    for day in 0..m {
        let th = n + day * n;
        let de = n + n * m + day * n;
        let e = n + day * 2 * n;
        for i in 0..n {
            let x0 = t.model.theta_hat[(i, day)];
            let x1 = t.model.delta_hat[(i, day)];
            mean[th + i] = fields(0, i) + fields(1, i) * x0;
            mean[de + i] = fields(2, i) + fields(3, i) * x1;
            // e0 then e1 for this day in the latent vector.
            a[(th + i, e + i)] = 1.0;
            a[(de + i, e + n + i)] = 1.0;
            match j {
                0 => a[(th + i, i)] = 1.0,
                1 => a[(th + i, i)] = x0,
                2 => a[(de + i, i)] = 1.0,
                _ => a[(de + i, i)] = x1,
            }
        }
    }
    let mut blocks = vec![&t.k * st.sig_sq[j]];
    for _ in 0..m {
        blocks.push(bivariate_cov(st, &t.r));
    }
    let cov = &a * blockdiag(&blocks) * a.transpose();
    let values = DVector::from_fn(2 * n * m, |k, _| {
        if k < n * m {
            st.theta[(k % n, k / n)]
        } else {
            let k = k - n * m;
            st.delta[(k % n, k / n)]
        }
    });
    let keep: Vec<usize> = (0..n).collect();
    let given: Vec<usize> = (n..d).collect();
    condition(&mean, &cov, &keep, &given, &values)
}

fn flatten_days(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// Max |z| of each full-conditional update on the tiny instance against its
/// oracle. Each entry is (update, max |z|, number of moments checked).
pub fn full_conditional_report(n_draws: usize, seed: u64) -> Vec<(String, f64)> {
    use rand::SeedableRng;
    use smokecausal_core::gibbs::conditionals as gc;
    let priors = PriorConfig::default();
    let t = tiny(priors);
    let (n, m) = (t.model.n, t.model.m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Latents, per day.
    let mut st = t.state.clone();
    let mut theta_draws = vec![Vec::with_capacity(n_draws); m];
    let mut delta_draws = vec![Vec::with_capacity(n_draws); m];
    for _ in 0..n_draws {
        gc::update_theta(&t.model, &mut st, &mut rng);
        for d in 0..m {
            theta_draws[d].push(st.theta.column(d).into_owned());
        }
    }
    st.theta = t.state.theta.clone();
    for _ in 0..n_draws {
        gc::update_delta(&t.model, &mut st, &mut rng).unwrap();
        for d in 0..m {
            delta_draws[d].push(st.delta.column(d).into_owned());
        }
    }
    for d in 0..m {
        let (mean, cov) = day_joint(&t, d);
        let obs_y = t.state.y.column(d).into_owned();
        let theta_idx: Vec<usize> = (0..n).collect();
        let delta_idx: Vec<usize> = (n..2 * n).collect();
        let y_idx: Vec<usize> = (2 * n..3 * n).collect();
        let mut given_vals = DVector::zeros(2 * n);
        given_vals.rows_mut(0, n).copy_from(&t.state.delta.column(d));
        given_vals.rows_mut(n, n).copy_from(&obs_y);
        let given: Vec<usize> = delta_idx.iter().chain(&y_idx).copied().collect();
        let (mu, c) = condition(&mean, &cov, &theta_idx, &given, &given_vals);
        out.push((format!("theta day {}", d + 1), gaussian_max_z(&theta_draws[d], &mu, &c)));
        given_vals.rows_mut(0, n).copy_from(&t.state.theta.column(d));
        let given: Vec<usize> = theta_idx.iter().chain(&y_idx).copied().collect();
        let (mu, c) = condition(&mean, &cov, &delta_idx, &given, &given_vals);
        out.push((format!("delta day {}", d + 1), gaussian_max_z(&delta_draws[d], &mu, &c)));
    }

    // Bias fields.
    let names = ["alpha0", "beta0", "alpha1", "beta1"];
    for j in 0..4 {
        let mut st = t.state.clone();
        let mut draws = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            match j {
                0 => gc::update_alpha0(&t.model, &mut st, &mut rng).unwrap(),
                1 => gc::update_beta0(&t.model, &mut st, &mut rng).unwrap(),
                2 => gc::update_alpha1(&t.model, &mut st, &mut rng).unwrap(),
                _ => gc::update_beta1(&t.model, &mut st, &mut rng).unwrap(),
            }
            draws.push(st.field(j).clone());
        }
        let (mu, c) = bias_oracle(&t, j);
        out.push((names[j].to_string(), gaussian_max_z(&draws, &mu, &c)));
    }

    // rho: Bayesian regression of w on u with prior N(0, rho_var).
    {
        let st0 = &t.state;
        let u = flatten_days(&t.model.u(st0));
        let w = flatten_days(&t.model.w(st0));
        let nm = n * m;
        let mut cov = DMatrix::zeros(nm + 1, nm + 1);
        cov[(0, 0)] = priors.rho_var;
        for k in 0..nm {
            cov[(0, k + 1)] = priors.rho_var * u[k];
            cov[(k + 1, 0)] = priors.rho_var * u[k];
        }
        let noise = kron(&DMatrix::identity(m, m), &t.r) * st0.s2_sq;
        let uu = &u * u.transpose() * priors.rho_var + noise;
        cov.view_mut((1, 1), (nm, nm)).copy_from(&uu);
        let given: Vec<usize> = (1..=nm).collect();
        let (mu, c) = condition(&DVector::zeros(nm + 1), &cov, &[0], &given, &w);
        let mut st = st0.clone();
        let draws: Vec<DVector<f64>> = (0..n_draws)
            .map(|_| {
                gc::update_rho(&t.model, &mut st, &mut rng);
                DVector::from_element(1, st.rho)
            })
            .collect();
        out.push(("rho".into(), gaussian_max_z(&draws, &mu, &c)));
    }

    // Bias means: mu_j ~ N(0, mu_var), field = mu_j 1 + N(0, sig_j^2 K).
    for j in 0..4 {
        let st0 = &t.state;
        let mut cov = DMatrix::zeros(n + 1, n + 1);
        cov[(0, 0)] = priors.mu_var;
        for i in 0..n {
            cov[(0, i + 1)] = priors.mu_var;
            cov[(i + 1, 0)] = priors.mu_var;
        }
        let fc = DMatrix::from_element(n, n, priors.mu_var) + &t.k * st0.sig_sq[j];
        cov.view_mut((1, 1), (n, n)).copy_from(&fc);
        let given: Vec<usize> = (1..=n).collect();
        let (mu, c) = condition(&DVector::zeros(n + 1), &cov, &[0], &given, st0.field(j));
        let mut st = st0.clone();
        let draws: Vec<DVector<f64>> = (0..n_draws)
            .map(|_| {
                gc::update_mu(&t.model, &mut st, j, &mut rng);
                DVector::from_element(1, st.mu[j])
            })
            .collect();
        out.push((format!("mu_{}", names[j]), gaussian_max_z(&draws, &mu, &c)));
    }

    // Inverse-gamma variances: rates assembled with explicit inverses.
    let st0 = &t.state;
    let a0 = priors.ig_shape;
    let b0 = priors.ig_rate;
    let r_inv = t.r.clone().try_inverse().unwrap();
    let k_inv = t.k.clone().try_inverse().unwrap();
    let nm = (n * m) as f64;
    let mut resid_ss = 0.0;
    let mut u_form = 0.0;
    let mut v_form = 0.0;
    for d in 0..m {
        let mut r = DVector::zeros(n);
        let mut u = DVector::zeros(n);
        let mut v = DVector::zeros(n);
        for i in 0..n {
            let b0v = st0.alpha0[i] + st0.beta0[i] * t.model.theta_hat[(i, d)];
            let b1v = st0.alpha1[i] + st0.beta1[i] * t.model.delta_hat[(i, d)];
            r[i] = st0.y[(i, d)] - st0.theta[(i, d)] - t.model.c[(i, d)] * st0.delta[(i, d)];
            u[i] = st0.theta[(i, d)] - b0v;
            v[i] = st0.delta[(i, d)] - b1v - st0.rho * u[i];
        }
        resid_ss += r.norm_squared();
        u_form += u.dot(&(&r_inv * &u));
        v_form += v.dot(&(&r_inv * &v));
    }
    let ig_checks: Vec<(&str, f64, f64)> = vec![
        ("sigma_sq", nm / 2.0 + a0, b0 + 0.5 * resid_ss),
        ("s1_sq", nm / 2.0 + a0, b0 + 0.5 * u_form),
        ("s2_sq", nm / 2.0 + a0, b0 + 0.5 * v_form),
    ];
    for (name, shape, rate) in ig_checks {
        let mut st = st0.clone();
        let draws: Vec<f64> = (0..n_draws)
            .map(|_| match name {
                "sigma_sq" => {
                    gc::update_sigma_sq(&t.model, &mut st, &mut rng);
                    st.sigma_sq
                }
                "s1_sq" => {
                    gc::update_s1_sq(&t.model, &mut st, &mut rng);
                    st.s1_sq
                }
                _ => {
                    gc::update_s2_sq(&t.model, &mut st, &mut rng);
                    st.s2_sq
                }
            })
            .collect();
        out.push((name.to_string(), inv_gamma_max_z(&draws, shape, rate)));
    }
    for j in 0..4 {
        let centered = st0.field(j).add_scalar(-st0.mu[j]);
        let rate = b0 + 0.5 * centered.dot(&(&k_inv * &centered));
        let shape = n as f64 / 2.0 + a0;
        let mut st = st0.clone();
        let draws: Vec<f64> = (0..n_draws)
            .map(|_| {
                gc::update_sig_sq(&t.model, &mut st, j, &mut rng);
                st.sig_sq[j]
            })
            .collect();
        out.push((format!("sig_{}_sq", names[j]), inv_gamma_max_z(&draws, shape, rate)));
    }

    // Imputation of a masked cell: N(theta + C delta, sigma^2).
    {
        let mut data = t.data.clone();
        data.y[(0, 1)] = f64::NAN;
        data.missing[(0, 1)] = true;
        let model = Model::new(&data, 40.0, 60.0, priors).unwrap();
        let mut st = t.state.clone();
        let draws: Vec<DVector<f64>> = (0..n_draws)
            .map(|_| {
                gc::impute_missing(&model, &mut st, &mut rng);
                DVector::from_element(1, st.y[(0, 1)])
            })
            .collect();
        let mu = DVector::from_element(1, st0.theta[(0, 1)] + model.c[(0, 1)] * st0.delta[(0, 1)]);
        let c = DMatrix::from_element(1, 1, st0.sigma_sq);
        out.push(("impute".into(), gaussian_max_z(&draws, &mu, &c)));
    }
    out
}

/// Coverage of equal-tailed 90% intervals over seeded synthetic replicates.
pub struct Calibration {
    pub params: Vec<&'static str>,
    /// covered[p][r]
    pub covered: Vec<Vec<bool>>,
    pub truth: Vec<f64>,
    pub posterior_means: Vec<Vec<f64>>,
}

pub fn quantile7(v: &[f64], p: f64) -> f64 {
    let mut x = v.to_vec();
    x.sort_by(f64::total_cmp);
    let h = (x.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

pub fn calibration_study(
    replicates: usize,
    n_sites: usize,
    n_days: usize,
    chain: &smokecausal_core::gibbs::ChainConfig,
) -> Calibration {
    use smokecausal_core::gibbs::run_chain;
    use smokecausal_core::synth::*;
    let params = vec!["mu_alpha0", "mu_beta0", "mu_beta1", "gamma", "sigma1_sq"];
    let truth_p = TrueParams::default();
    let truth = vec![truth_p.mu_alpha0, truth_p.mu_beta0, truth_p.mu_beta1, truth_p.gamma, truth_p.sigma1_sq];
    let mut covered = vec![Vec::new(); params.len()];
    let mut posterior_means = vec![Vec::new(); params.len()];
    for rep in 0..replicates {
        let seed = 1000 + rep as u64;
        let regions = [RegionLayout::new("R", (0.0, 0.0), 200.0, n_sites)];
        let sites = layout_sites(&regions, DEFAULT_ORIGIN, seed).unwrap();
        let cfg = SimulationConfig {
            n_days,
            ..SimulationConfig::default()
        };
        let sim = simulate_panel(&sites, &truth_p, &cfg, seed).unwrap();
        let mut cc = chain.clone();
        cc.seed = seed;
        cc.phi1 = Some(truth_p.phi1);
        cc.phi2 = Some(truth_p.phi2);
        let s = run_chain(&sim.data, &cc).unwrap();
        for (k, p) in params.iter().enumerate() {
            let v = s.scalar(p);
            let (lo, hi) = (quantile7(&v, 0.05), quantile7(&v, 0.95));
            covered[k].push(lo <= truth[k] && truth[k] <= hi);
            posterior_means[k].push(mean(&v));
        }
    }
    Calibration {
        params,
        covered,
        truth,
        posterior_means,
    }
}

/// Posterior means of (sigma_sq, mu_beta1, gamma) with batch-means SEs.
#[derive(Debug, Clone)]
pub struct PosteriorMeans {
    pub mean: [f64; 3],
    pub se: [f64; 3],
}

/// Marginal law of the tiny instance's observations given the variance
/// parameters, with bias fields, their means, latents and noise integrated
/// out. `h = (s_alpha0, s_beta0, s_alpha1, s_beta1, s1, s2, sigma, rho)`
/// with variances on the natural scale. Returns (Y covariance, Cov(mu_beta1, Y)).
fn tiny_marginal(t: &Tiny, priors: &PriorConfig, h: &[f64; 8]) -> (DMatrix<f64>, DVector<f64>) {
    let (n, m) = (t.model.n, t.model.m);
    let d = n * m;
    // Y = H f + G e + eps, f = (alpha0, beta0, alpha1, beta1), e per day (e0, e1).
    let mut hm = DMatrix::zeros(d, 4 * n);
    let mut gm = DMatrix::zeros(d, 2 * n * m);
    for day in 0..m {
        for i in 0..n {
            let row = day * n + i;
            let c = t.model.c[(i, day)];
            hm[(row, i)] = 1.0;
            hm[(row, n + i)] = t.model.theta_hat[(i, day)];
            hm[(row, 2 * n + i)] = c;
            hm[(row, 3 * n + i)] = c * t.model.delta_hat[(i, day)];
            gm[(row, day * 2 * n + i)] = 1.0;
            gm[(row, day * 2 * n + n + i)] = c;
        }
    }
    let ones = DMatrix::from_element(n, n, priors.mu_var);
    let cf = blockdiag(&(0..4).map(|j| &t.k * h[j] + &ones).collect::<Vec<_>>());
    let (s1, s2, rho) = (h[4], h[5], h[7]);
    let sig = DMatrix::from_row_slice(2, 2, &[s1, rho * s1, rho * s1, s2 + rho * rho * s1]);
    let day_cov = kron(&sig, &t.r);
    let ce = blockdiag(&vec![day_cov; m]);
    let v = &hm * cf * hm.transpose() + &gm * ce * gm.transpose() + DMatrix::identity(d, d) * h[6];
    let cross = hm.columns(3 * n, n) * DVector::from_element(n, priors.mu_var);
    (v, cross)
}

fn tiny_y(t: &Tiny) -> DVector<f64> {
    DVector::from_column_slice(t.data.y.as_slice())
}

/// Log posterior in the unconstrained coordinates `x` (log variances, rho),
/// and E[mu_beta1 | Y, x].
fn tiny_log_post(t: &Tiny, priors: &PriorConfig, x: &[f64; 8]) -> (f64, f64) {
    let mut h = [0.0; 8];
    for k in 0..7 {
        h[k] = x[k].exp();
    }
    h[7] = x[7];
    let (v, cross) = tiny_marginal(t, priors, &h);
    let y = tiny_y(t);
    let Some(ch) = v.cholesky() else {
        return (f64::NEG_INFINITY, 0.0);
    };
    let alpha = ch.solve(&y);
    let logdet: f64 = ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let mut lp = -0.5 * (y.dot(&alpha) + logdet);
    for k in 0..7 {
        // IG(a, b) on h[k], plus the log-scale Jacobian.
        lp += -priors.ig_shape * x[k] - priors.ig_rate / h[k];
    }
    lp -= 0.5 * x[7] * x[7] / priors.rho_var;
    (lp, cross.dot(&alpha))
}

fn gamma_of(s1: f64, s2: f64, rho: f64) -> f64 {
    let s12 = rho * s1;
    s12 / (s1 * (s2 + rho * s12)).sqrt()
}

/// Random-walk Metropolis on the marginal posterior of the tiny instance.
/// The proposal covariance is learned during a warm-up and frozen after it.
pub fn rwm_oracle(priors: PriorConfig, n_iter: usize, seed: u64) -> PosteriorMeans {
    use rand::SeedableRng;
    let t = tiny(priors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = [0.0f64; 8];
    x[..7].copy_from_slice(&[0.4f64, 0.05, 0.3, 0.1, 1.5, 0.8, 0.6].map(f64::ln));
    x[7] = 0.3;
    let (mut lp, mut rb) = tiny_log_post(&t, &priors, &x);
    let mut chol = DMatrix::<f64>::identity(8, 8) * 0.3;
    let step = |x: &mut [f64; 8], lp: &mut f64, rb: &mut f64, chol: &DMatrix<f64>, rng: &mut ChaCha8Rng| {
        let z = chol * normal_vec(rng, 8);
        let mut prop = *x;
        for k in 0..8 {
            prop[k] += z[k];
        }
        let (lq, rq) = tiny_log_post(&t, &priors, &prop);
        let accept = lq - *lp > rng.random::<f64>().ln();
        if accept {
            *x = prop;
            *lp = lq;
            *rb = rq;
        }
        accept
    };
    // Warm-up: scale a diagonal proposal, then estimate the covariance.
    let warm = 40_000;
    let mut scale = 0.3;
    let mut hist = Vec::with_capacity(warm);
    for round in 0..4 {
        let mut acc = 0;
        for _ in 0..warm / 4 {
            if step(&mut x, &mut lp, &mut rb, &chol, &mut rng) {
                acc += 1;
            }
            if round >= 2 {
                hist.push(DVector::from_column_slice(&x));
            }
        }
        let rate = acc as f64 / (warm / 4) as f64;
        scale *= (rate / 0.25).clamp(0.3, 3.0);
        chol = DMatrix::identity(8, 8) * scale;
    }
    let nh = hist.len() as f64;
    let mbar = hist.iter().fold(DVector::zeros(8), |a, v| a + v) / nh;
    let mut cov = hist.iter().fold(DMatrix::zeros(8, 8), |a, v| a + (v - &mbar) * (v - &mbar).transpose()) / nh;
    cov *= 2.38 * 2.38 / 8.0;
    cov += DMatrix::identity(8, 8) * 1e-8;
    chol = cov.cholesky().expect("proposal covariance").l();

    let mut sig = Vec::with_capacity(n_iter);
    let mut mub = Vec::with_capacity(n_iter);
    let mut gam = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        step(&mut x, &mut lp, &mut rb, &chol, &mut rng);
        sig.push(x[6].exp());
        mub.push(rb);
        gam.push(gamma_of(x[4].exp(), x[5].exp(), x[7]));
    }
    summarize([&sig, &mub, &gam])
}

fn summarize(series: [&Vec<f64>; 3]) -> PosteriorMeans {
    PosteriorMeans {
        mean: series.map(|s| mean(s)),
        se: series.map(|s| batch_se(s, 50)),
    }
}

/// The Gibbs sampler on the tiny instance with the oracle's priors and ranges.
pub fn gibbs_tiny(priors: PriorConfig, n_iter: usize, seed: u64) -> PosteriorMeans {
    use smokecausal_core::gibbs::{run_chain, ChainConfig};
    let t = tiny(priors);
    let cfg = ChainConfig {
        n_iter,
        burn_in: n_iter / 20,
        thin: 1,
        seed,
        phi1: Some(40.0),
        phi2: Some(60.0),
        priors,
        ..ChainConfig::default()
    };
    let s = run_chain(&t.data, &cfg).unwrap();
    summarize([&s.scalar("sigma_sq"), &s.scalar("mu_beta1"), &s.scalar("gamma")])
}

/// Proper, moderately informative priors under which both samplers mix on
/// six observations.
pub fn oracle_priors() -> PriorConfig {
    PriorConfig {
        ig_shape: 3.0,
        ig_rate: 2.0,
        mu_var: 4.0,
        rho_var: 1.0,
    }
}

/// Stationary AR(1) chain `x_t = a x_{t-1} + sqrt(1 - a^2) z_t`.
pub fn ar1(a: f64, n: usize, seed: u64) -> Vec<f64> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (1.0 - a * a).sqrt();
    let mut x = rng.sample::<f64, _>(rand_distr::StandardNormal);
    (0..n)
        .map(|_| {
            x = a * x + sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            x
        })
        .collect()
}

/// Monte Carlo covariance of simulated observation pairs for every flag
/// case at `h = 0, phi1/2, phi1`, as (case, h, empirical, |z|) rows. At
/// `h = 0` equal flags mean the same observation (nugget included) and
/// unequal flags two observations at one site.
pub fn covariance_case_report(
    params: &smokecausal_core::CovarianceParams,
    n_days: usize,
    seed: u64,
) -> Vec<((u8, u8), f64, f64, f64, f64)> {
    use rand::SeedableRng;
    use smokecausal_core::spatial::obs_covariance;
    use smokecausal_core::synth::simulate_error_process;
    let phi = params.phi1;
    let sites = planar_sites(&[(0.0, 0.0), (phi / 2.0, 0.0), (0.0, phi)]);
    let (e0, e1) = simulate_error_process(&sites, n_days, params, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let nug = params.sigma_sq.sqrt();
    let mut noise = || nug * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let cases = [(0u8, 0u8), (0, 1), (1, 1)];
    let mut out = Vec::new();
    for (k, h) in [0.0, phi / 2.0, phi].into_iter().enumerate() {
        for &(c, cp) in &cases {
            let same_obs = k == 0 && c == cp;
            let mut a = Vec::with_capacity(n_days);
            let mut b = Vec::with_capacity(n_days);
            for t in 0..n_days {
                let ya = e0[(0, t)] + f64::from(c) * e1[(0, t)] + noise();
                let yb = if same_obs {
                    ya
                } else {
                    e0[(k, t)] + f64::from(cp) * e1[(k, t)] + noise()
                };
                a.push(ya);
                b.push(yb);
            }
            let expected = obs_covariance(h, c, cp, params, same_obs).unwrap();
            let (ma, mb) = (mean(&a), mean(&b));
            let n = n_days as f64;
            let emp = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let vaa = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
            let vbb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
            let se = ((vaa * vbb + emp * emp) / n).sqrt();
            out.push(((c, cp), h, emp, expected, ((emp - expected) / se).abs()));
        }
    }
    out
}

/// Joint-distribution test on the tiny design. Marginal-forward draws of
/// (sigma_sq, s1_sq, rho, mu_beta1) from the prior are compared with a
/// successive-conditional chain that alternates a Gibbs sweep with a fresh
/// draw of Y. Returns (name, forward mean, chain mean, |z|).
pub fn geweke_report(priors: PriorConfig, n_forward: usize, n_chain: usize, seed: u64) -> Vec<(String, f64, f64, f64)> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Gamma};
    use smokecausal_core::gibbs::conditionals::sweep;
    let t = tiny(priors);
    let (n, m) = (t.model.n, t.model.m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_gamma = |rng: &mut ChaCha8Rng| 1.0 / Gamma::new(priors.ig_shape, 1.0 / priors.ig_rate).unwrap().sample(rng);
    let l_r = t.r.clone().cholesky().unwrap().l();
    let l_k = t.k.clone().cholesky().unwrap().l();

    let forward = |rng: &mut ChaCha8Rng| -> ModelState {
        let mut st = t.state.clone();
        for j in 0..4 {
            st.mu[j] = priors.mu_var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            st.sig_sq[j] = inv_gamma(rng);
        }
        let fields: Vec<DVector<f64>> = (0..4)
            .map(|j| (&l_k * normal_vec(rng, n)) * st.sig_sq[j].sqrt() + DVector::from_element(n, st.mu[j]))
            .collect();
        st.alpha0 = fields[0].clone();
        st.beta0 = fields[1].clone();
        st.alpha1 = fields[2].clone();
        st.beta1 = fields[3].clone();
        st.s1_sq = inv_gamma(rng);
        st.s2_sq = inv_gamma(rng);
        st.sigma_sq = inv_gamma(rng);
        st.rho = priors.rho_var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        for day in 0..m {
            let u = (&l_r * normal_vec(rng, n)) * st.s1_sq.sqrt();
            let v = (&l_r * normal_vec(rng, n)) * st.s2_sq.sqrt();
            for i in 0..n {
                let b0 = st.alpha0[i] + st.beta0[i] * t.model.theta_hat[(i, day)];
                let b1 = st.alpha1[i] + st.beta1[i] * t.model.delta_hat[(i, day)];
                st.theta[(i, day)] = b0 + u[i];
                st.delta[(i, day)] = b1 + st.rho * u[i] + v[i];
            }
        }
        redraw_y(&t, &mut st, rng);
        st
    };
    let pick = |st: &ModelState| [st.sigma_sq, st.s1_sq, st.rho, st.mu[3]];

    let mut fwd = vec![Vec::with_capacity(n_forward); 4];
    for _ in 0..n_forward {
        let st = forward(&mut rng);
        for (k, v) in pick(&st).into_iter().enumerate() {
            fwd[k].push(v);
        }
    }
    let mut chain = vec![Vec::with_capacity(n_chain); 4];
    let mut st = forward(&mut rng);
    for _ in 0..n_chain {
        sweep(&t.model, &mut st, &mut rng).unwrap();
        redraw_y(&t, &mut st, &mut rng);
        for (k, v) in pick(&st).into_iter().enumerate() {
            chain[k].push(v);
        }
    }
    ["sigma_sq", "s1_sq", "rho", "mu_beta1"]
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (a, b) = (mean(&fwd[k]), mean(&chain[k]));
            let se = (variance(&fwd[k]) / n_forward as f64 + batch_se(&chain[k], 100).powi(2)).sqrt();
            (name.to_string(), a, b, ((a - b) / se).abs())
        })
        .collect()
}

fn redraw_y(t: &Tiny, st: &mut ModelState, rng: &mut ChaCha8Rng) {
    let sd = st.sigma_sq.sqrt();
    for day in 0..t.model.m {
        for i in 0..t.model.n {
            st.y[(i, day)] = st.theta[(i, day)]
                + t.model.c[(i, day)] * st.delta[(i, day)]
                + sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

/// Fraction of `obs` inside `pred ± 1.96 sd` when `obs ~ N(pred, sd^2)`.
pub fn normal_coverage(n: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    use smokecausal_core::crossval::cv_metrics;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred: Vec<f64> = (0..n).map(|i| (i % 17) as f64 - 3.0).collect();
    let sd: Vec<f64> = (0..n).map(|i| 0.5 + (i % 5) as f64).collect();
    let obs: Vec<f64> = pred
        .iter()
        .zip(&sd)
        .map(|(p, s)| p + s * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    cv_metrics(&pred, &sd, &obs).unwrap().coverage
}

/// Largest |OLS - truth| over sites and coefficients of a noiseless
/// synthetic panel, and the number of identifiable sites checked.
pub fn noiseless_ols_max_error(seed: u64) -> (f64, usize) {
    use smokecausal_core::ols::ols_mean_recovery;
    use smokecausal_core::synth::*;
    let sites = layout_sites(&[RegionLayout::new("R", (0.0, 0.0), 200.0, 10)], DEFAULT_ORIGIN, seed).unwrap();
    let p = TrueParams {
        sigma1_sq: 0.0,
        sigma2_sq: 0.0,
        sigma_sq: 0.0,
        ..TrueParams::default()
    };
    let cfg = SimulationConfig {
        missing_fraction: 0.0,
        ..SimulationConfig::default()
    };
    let sim = simulate_panel(&sites, &p, &cfg, seed).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..sites.len() {
        let Ok(fit) = ols_mean_recovery(&sim.data, i) else { continue };
        let truth = sim.biases.as_array().map(|f| f[i]);
        for k in 0..4 {
            worst = worst.max((fit.coef[k] - truth[k]).abs());
        }
        checked += 1;
    }
    (worst, checked)
}

/// Isolated sites, homoskedastic errors and weak shrinkage, where the
/// per-site posterior of the bias coefficients approaches OLS. Returns how
/// many (site, coefficient) posterior means lie within one posterior sd of
/// the OLS estimate, out of how many.
pub fn ols_posterior_agreement(seed: u64) -> (usize, usize) {
    use smokecausal_core::gibbs::{run_chain, ChainConfig};
    use smokecausal_core::ols::ols_mean_recovery;
    use smokecausal_core::synth::*;
    let xy: Vec<(f64, f64)> = (0..8).map(|k| (k as f64 * 3000.0, 0.0)).collect();
    let sites = planar_sites(&xy);
    let p = TrueParams {
        sigma_alpha0_sq: 4.0,
        sigma_beta0_sq: 1.0,
        sigma_alpha1_sq: 4.0,
        sigma_beta1_sq: 1.0,
        sigma2_sq: 0.0,
        gamma: 0.0,
        ..TrueParams::default()
    };
    let cfg = SimulationConfig {
        n_days: 300,
        missing_fraction: 0.0,
        covariates: CovariateConfig {
            episode_rate: 3.0,
            episode_scale_km: 500.0,
            ..CovariateConfig::default()
        },
    };
    let sim = simulate_panel(&sites, &p, &cfg, seed).unwrap();
    let chain = ChainConfig {
        n_iter: 6000,
        burn_in: 1000,
        thin: 5,
        seed,
        phi1: Some(p.phi1),
        phi2: Some(p.phi2),
        ..ChainConfig::default()
    };
    let s = run_chain(&sim.data, &chain).unwrap();
    let mut within = 0;
    let mut total = 0;
    for (k, name) in ["alpha0", "beta0", "alpha1", "beta1"].iter().enumerate() {
        let (m, sd) = s.site_summary(name);
        for i in 0..sites.len() {
            let fit = ols_mean_recovery(&sim.data, i).unwrap();
            total += 1;
            if (m[i] - fit.coef[k]).abs() <= sd[i] {
                within += 1;
            }
        }
    }
    (within, total)
}
