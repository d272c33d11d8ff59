//! Self-check suite: gradient checks, representation-mapping identities,
//! normalization Jacobian, projection, shrinking ratio and the quality of
//! the one-step perturbation against the multi-start oracle.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, l2_norm, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{intermediate_loss, mapped_loss, penult_loss, OuterForm};
use crate::model::{ActivationRecord, Architecture, LinearClassifier, Model};
use crate::ops::{entropy_rows, kl_rows};
use crate::perturb::{
    approx_perturbation, inner_kl, map_intermediate_to_penult, map_norm_unnorm, oracle_perturbation,
    project_perturbation, AscentConfig, MapDirection, PerturbParams, Perturbation, Space, Variant,
};
use crate::rng::{rng_from, standard_normal};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::InvalidArgument(format!("unknown verify level {other:?} (fast, full)"))),
        }
    }
}

/// One invariant with its worst measured deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, measured: f64, tolerance: f64, instances: usize, detail: impl Into<String>) -> Check {
        Check {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            instances,
            detail: detail.into(),
        }
    }

    fn at_least(name: &str, measured: f64, tolerance: f64, instances: usize, detail: impl Into<String>) -> Check {
        Check {
            name: name.to_string(),
            passed: measured >= tolerance,
            measured,
            tolerance,
            instances,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub level: Level,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Counts {
    points: usize,
    identities: usize,
    oracle: usize,
}

fn counts(level: Level) -> Counts {
    match level {
        Level::Fast => Counts { points: 20, identities: 200, oracle: 0 },
        Level::Full => Counts { points: 100, identities: 1000, oracle: 500 },
    }
}

/// Runs every check of `level`. Durations are printed by callers, never
/// stored, so the report is a pure function of `level` and `seed`.
pub fn run(level: Level, seed: u64) -> Result<Report> {
    let c = counts(level);
    let mut checks = Vec::new();
    checks.extend(gradient_checks(c.points, seed)?);
    checks.push(jacobian_check(c.identities, seed)?);
    checks.extend(mapping_checks(c.identities, seed)?);
    checks.push(intermediate_check(c.identities / 10, seed)?);
    checks.extend(shrinking_checks(c.identities, seed)?);
    checks.extend(projection_checks(c.identities, seed)?);
    checks.push(kl_check(c.identities, seed)?);
    if c.oracle > 0 {
        checks.push(approximation_check(c.oracle, seed)?.0);
        checks.push(grid_check(20, seed)?);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(Report { level, seed, passed, checks })
}

/// `run` plus wall time, for progress output.
pub fn run_timed(level: Level, seed: u64) -> Result<(Report, f64)> {
    let t0 = Instant::now();
    let r = run(level, seed)?;
    Ok((r, t0.elapsed().as_secs_f64()))
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * standard_normal(rng)).collect()
}

/// Entries bounded away from 0 so ReLU kinks and log poles stay outside the
/// finite-difference stencil.
fn away_from_zero<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect()
}

fn positive<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.1..3.0)).collect()
}

fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

pub fn random_classifier(seed: u64, classes: usize, dim: usize, temperature: f64) -> LinearClassifier {
    let mut rng = rng_from(&[seed, 0xC1F]);
    let scale = 1.0 / (dim as f64).sqrt();
    LinearClassifier {
        weight: Tensor::matrix(classes, dim, normal_vec(&mut rng, classes * dim, scale)).expect("shape"),
        bias: Tensor::vector(normal_vec(&mut rng, classes, 0.1)),
        temperature,
    }
}

type Case = (&'static str, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>, Box<dyn Fn(u64) -> Tensor>);

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = rng_from(&[seed, 0x5E1]);
    let n: usize = shape.iter().product();
    let w = g.constant(Tensor::new(shape, normal_vec(&mut rng, n, 1.0))?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn matrix_point(rows: usize, cols: usize, gen: fn(&mut rand_chacha::ChaCha8Rng, usize) -> Vec<f64>) -> Box<dyn Fn(u64) -> Tensor> {
    Box::new(move |s| {
        let mut rng = rng_from(&[s, 0xBEEF]);
        Tensor::matrix(rows, cols, gen(&mut rng, rows * cols)).expect("shape")
    })
}

fn primitive_cases() -> Vec<Case> {
    let c = |m: u64| move |g: &mut Graph, shape: &[usize]| -> Result<Var> {
        let mut rng = rng_from(&[m, 0xC0]);
        let n: usize = shape.iter().product();
        Ok(g.constant(Tensor::new(shape.to_vec(), normal_vec(&mut rng, n, 1.0))?))
    };
    let mut cases: Vec<Case> = Vec::new();
    cases.push((
        "add",
        Box::new(move |g, x| {
            let k = c(1)(g, &[3, 4])?;
            let y = g.add(x, k)?;
            weighted_sum(g, y, 1)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "sub",
        Box::new(move |g, x| {
            let k = c(2)(g, &[3, 4])?;
            let y = g.sub(k, x)?;
            weighted_sum(g, y, 2)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "mul",
        Box::new(|g, x| {
            let y = g.mul(x, x)?;
            weighted_sum(g, y, 3)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "scale_neg",
        Box::new(|g, x| {
            let y = g.scale(x, -2.5)?;
            let y = g.neg(y)?;
            weighted_sum(g, y, 4)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "add_row_mul_row",
        Box::new(move |g, x| {
            let b = c(5)(g, &[4])?;
            let y = g.add_row(x, b)?;
            let s = g.slice_rows(x, 0, 1)?;
            let s = g.sum_rows(s)?;
            let row = g.scale(s, 1.0)?;
            let k = c(6)(g, &[4])?;
            let y = g.mul_row(y, k)?;
            let z = g.mul(y, y)?;
            let t = weighted_sum(g, z, 5)?;
            let r = g.sum(row)?;
            g.add(t, r)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "linear",
        Box::new(move |g, x| {
            let w = c(7)(g, &[5, 4])?;
            let y = g.linear(x, w)?;
            let y2 = g.linear(w, x)?;
            let a = weighted_sum(g, y, 6)?;
            let b = weighted_sum(g, y2, 7)?;
            g.add(a, b)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "matvec",
        Box::new(move |g, x| {
            let w = c(8)(g, &[5, 6])?;
            let y = g.matvec(w, x)?;
            weighted_sum(g, y, 8)
        }),
        Box::new(|s| {
            let mut rng = rng_from(&[s, 0xBEEF]);
            Tensor::vector(normal_vec(&mut rng, 6, 1.0))
        }),
    ));
    cases.push((
        "relu",
        Box::new(|g, x| {
            let y = g.relu(x)?;
            weighted_sum(g, y, 9)
        }),
        matrix_point(3, 4, away_from_zero),
    ));
    cases.push((
        "log_exp",
        Box::new(|g, x| {
            let y = g.log(x)?;
            let e = g.scale(x, 0.3)?;
            let e = g.exp(e)?;
            let a = weighted_sum(g, y, 10)?;
            let b = weighted_sum(g, e, 11)?;
            g.add(a, b)
        }),
        matrix_point(3, 4, positive),
    ));
    cases.push((
        "sum_mean_cols_rows",
        Box::new(|g, x| {
            let q = g.mul(x, x)?;
            let a = g.sum_cols(q)?;
            let a = weighted_sum(g, a, 12)?;
            let b = g.sum_rows(q)?;
            let b = weighted_sum(g, b, 13)?;
            let m = g.mean(q)?;
            let s = g.add(a, b)?;
            g.add(s, m)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "slice_concat",
        Box::new(|g, x| {
            let a = g.slice_rows(x, 0, 2)?;
            let b = g.slice_rows(x, 1, 3)?;
            let y = g.concat_rows(b, a)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 14)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "normalize_l2",
        Box::new(|g, x| {
            let y = g.normalize_l2(x)?;
            weighted_sum(g, y, 15)
        }),
        matrix_point(3, 5, normal_vec_unit),
    ));
    cases.push((
        "softmax",
        Box::new(|g, x| {
            let y = g.softmax(x, 0.7)?;
            weighted_sum(g, y, 16)
        }),
        matrix_point(3, 5, normal_vec_unit),
    ));
    cases.push((
        "log_softmax",
        Box::new(|g, x| {
            let y = g.log_softmax(x, 0.7)?;
            weighted_sum(g, y, 17)
        }),
        matrix_point(3, 5, normal_vec_unit),
    ));
    cases.push((
        "kl_divergence_q",
        Box::new(|g, x| {
            let mut rng = rng_from(&[18, 0xAB]);
            let p = Tensor::matrix(2, 4, [simplex(&mut rng, 4), simplex(&mut rng, 4)].concat())?;
            let p = g.constant(p);
            let q = g.softmax(x, 1.0)?;
            let k = g.kl_divergence(p, q)?;
            g.sum(k)
        }),
        matrix_point(2, 4, normal_vec_unit),
    ));
    cases.push((
        "kl_divergence_p",
        Box::new(|g, x| {
            let mut rng = rng_from(&[19, 0xAB]);
            let q = Tensor::matrix(2, 4, [simplex(&mut rng, 4), simplex(&mut rng, 4)].concat())?;
            let q = g.constant(q);
            let p = g.softmax(x, 1.0)?;
            let k = g.kl_divergence(p, q)?;
            g.sum(k)
        }),
        matrix_point(2, 4, normal_vec_unit),
    ));
    cases.push((
        "kl_logits",
        Box::new(|g, x| {
            let mut rng = rng_from(&[20, 0xAB]);
            let p = Tensor::matrix(2, 4, [simplex(&mut rng, 4), simplex(&mut rng, 4)].concat())?;
            let p = g.constant(p);
            let k = g.kl_logits(p, x, 0.5)?;
            weighted_sum(g, k, 20)
        }),
        matrix_point(2, 4, normal_vec_unit),
    ));
    cases.push((
        "standardize",
        Box::new(|g, x| {
            let y = g.standardize(x, 1e-5)?;
            weighted_sum(g, y, 21)
        }),
        matrix_point(5, 3, normal_vec_unit),
    ));
    cases
}

fn normal_vec_unit(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    normal_vec(rng, n, 1.0)
}

/// Composite losses built from the penultimate activation: the three
/// adversarial outer forms with a fixed perturbation, entropy and the
/// diversity part of mutual information.
fn loss_cases() -> Vec<Case> {
    let clf = random_classifier(31, 4, 6, 0.5);
    let r = {
        let mut rng = rng_from(&[32, 0xAB]);
        Tensor::matrix(3, 6, normal_vec(&mut rng, 18, 0.3)).expect("shape")
    };
    let mut cases: Vec<Case> = Vec::new();
    for (name, form) in [
        ("loss_apa_u", OuterForm::Unnormalized),
        ("loss_apa_n", OuterForm::Projected),
        ("loss_apa_n_prime", OuterForm::Renormalized),
    ] {
        let clf = clf.clone();
        let r = r.clone();
        cases.push((
            name,
            Box::new(move |g, z| {
                let zn = g.normalize_l2(z)?;
                let w = g.constant(clf.weight.clone());
                let b = g.constant(clf.bias.clone());
                let mut rng = rng_from(&[33, 0xAB]);
                let p = Tensor::matrix(3, 4, (0..3).flat_map(|_| simplex(&mut rng, 4)).collect())?;
                let rv = g.constant(r.clone());
                let point = match form {
                    OuterForm::Unnormalized => {
                        let s = g.add(z, rv)?;
                        g.normalize_l2(s)?
                    }
                    OuterForm::Projected => g.add(zn, rv)?,
                    OuterForm::Renormalized => {
                        let s = g.add(zn, rv)?;
                        g.normalize_l2(s)?
                    }
                };
                let l2 = g.linear(point, w)?;
                let l2 = g.add_row(l2, b)?;
                let kl = kl_rows(g, &p, l2, clf.temperature)?;
                g.mean(kl)
            }),
            matrix_point(3, 6, normal_vec_unit),
        ));
    }
    cases.push((
        "loss_entropy",
        Box::new(|g, l| {
            let h = entropy_rows(g, l, 0.5)?;
            g.mean(h)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "loss_mutual_information",
        Box::new(|g, l| {
            let h = entropy_rows(g, l, 0.5)?;
            let h = g.mean(h)?;
            let p = g.softmax(l, 0.5)?;
            let pm = g.sum_cols(p)?;
            let pm = g.scale(pm, 1.0 / 3.0)?;
            let lp = g.log(pm)?;
            let t = g.mul(pm, lp)?;
            let t = g.sum(t)?;
            g.add(h, t)
        }),
        matrix_point(3, 4, normal_vec_unit),
    ));
    cases.push((
        "loss_model_input",
        Box::new(|g, x| {
            let model = Model::new(Architecture::new(4, 3), 33)?;
            let vars = model.bind_constant(g);
            let fwd = model.forward(g, &vars, x, crate::model::Mode::BatchStats)?;
            let ce = crate::ops::cross_entropy_rows(g, fwd.logits, &[0, 1, 2, 1], 0.5)?;
            g.mean(ce)
        }),
        matrix_point(4, 4, normal_vec_unit),
    ));
    cases
}

/// Relative tolerance for every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;

/// Worst relative error of each primitive and composite loss over `points`
/// seeded points.
pub fn gradient_checks(points: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, f, point) in primitive_cases().into_iter().chain(loss_cases()) {
        let mut worst: f64 = 0.0;
        for k in 0..points {
            let x = point(crate::rng::mix_seed(&[seed, k as u64]));
            let r = finite_diff_check(&f, &x, GRAD_STEP)?;
            worst = worst.max(r.max_rel_err);
        }
        out.push(Check::at_most(&format!("grad.{name}"), worst, GRAD_TOLERANCE, points, "max relative error vs central differences"));
    }
    Ok(out)
}

/// Backward of `normalize_l2` with every unit upstream gradient, compared
/// with `(I − v vᵀ / vᵀv) / ‖v‖`, and `J v` from the backward pass.
pub fn jacobian_check(n: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_from(&[seed, 0x1AC]);
    let mut closed: f64 = 0.0;
    let mut tangent: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(2..=16);
        let scale = 10f64.powf(rng.random_range(-1.0..2.0));
        let v = normal_vec(&mut rng, d, scale);
        let (jac, jv) = normalize_jacobian(&v)?;
        let nv = l2_norm(&v);
        let vv: f64 = v.iter().map(|x| x * x).sum();
        for i in 0..d {
            for j in 0..d {
                let expect = ((i == j) as u8 as f64 - v[i] * v[j] / vv) / nv;
                closed = closed.max((jac[i][j] - expect).abs());
            }
        }
        tangent = tangent.max(jv.iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    let tol = 1e-10;
    let mut c = Check::at_most("jacobian.normalize_l2", closed, tol, n, format!("closed form max abs error; J·v max {tangent:.3e} (tolerance 1e-12)"));
    c.passed = c.passed && tangent <= 1e-12;
    Ok(c)
}

/// Rows of the normalization Jacobian from the backward pass, plus `Jᵀ v`.
pub fn normalize_jacobian(v: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = v.len();
    let mut rows = Vec::with_capacity(d);
    for k in 0..=d {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(v.to_vec()));
        let y = g.normalize_l2(x)?;
        let up = if k < d {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            e
        } else {
            v.to_vec()
        };
        let u = g.constant(Tensor::vector(up));
        let p = g.mul(y, u)?;
        let s = g.sum(p)?;
        g.backward(s)?;
        rows.push(g.grad(x).expect("grad").data().to_vec());
    }
    let jv = rows.pop().expect("row");
    Ok((rows, jv))
}

fn random_instance<R: Rng>(rng: &mut R, seed: u64) -> (ActivationRecord, LinearClassifier) {
    let d = rng.random_range(2..=16);
    let c = rng.random_range(2..=10);
    let scale = 10f64.powf(rng.random_range(-0.5..1.5));
    let z = loop {
        let v = normal_vec(rng, d, scale);
        if l2_norm(&v) > 0.0 {
            break v;
        }
    };
    let temperature = if rng.random_bool(0.5) { 0.05 } else { 1.0 };
    (ActivationRecord::from_activation(Tensor::vector(z)).expect("nonzero"), random_classifier(seed, c, d, temperature))
}

fn loss_at(z: &ActivationRecord, clf: &LinearClassifier, r: &Tensor, form: OuterForm) -> Result<f64> {
    let zm = z.z.clone().reshape(vec![1, z.z.len()])?;
    let rm = r.clone().reshape(vec![1, r.len()])?;
    Ok(penult_loss(&zm, clf, &rm, form)?.value)
}

/// Loss-value equality under the n→u and u→n maps, on random instances with
/// one-step perturbations of random budget.
pub fn mapping_checks(n: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng_from(&[seed, 0x3A9]);
    let (mut nu, mut un, mut gnu, mut gun): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..n {
        let (z, clf) = random_instance(&mut rng, crate::rng::mix_seed(&[seed, k as u64]));
        let eps_n = rng.random_range(0.05..1.5);
        let eps_u = z.norm * rng.random_range(0.05..3.0);
        let pn = approx_perturbation(&z, &clf, &PerturbParams::new(eps_n, 0.5, k as u64)?, Variant::Normalized)?;
        let pu = approx_perturbation(&z, &clf, &PerturbParams::new(eps_u, 0.5 * z.norm, k as u64)?, Variant::Unnormalized)?;

        let ln = loss_at(&z, &clf, &pn.r, OuterForm::Projected)?;
        let n2u = map_norm_unnorm(&pn, &z, MapDirection::NormToUnnorm)?;
        let lu_mapped = loss_at(&z, &clf, &n2u.r, OuterForm::Unnormalized)?;
        nu = nu.max((ln - lu_mapped).abs() / ln.abs().max(1.0));

        let lu = loss_at(&z, &clf, &pu.r, OuterForm::Unnormalized)?;
        let u2n = map_norm_unnorm(&pu, &z, MapDirection::UnnormToNorm)?;
        let ln_mapped = loss_at(&z, &clf, &u2n.r, OuterForm::Projected)?;
        un = un.max((lu - ln_mapped).abs() / lu.abs().max(1.0));

        // ∂ℓ_u/∂z at r_{n→u} equals J_ζ(z + r)ᵀ ∂ℓ_n/∂ζ_n, and ∂ℓ_n/∂z at
        // r_{u→n} equals J_ζ(z)ᵀ ∂ℓ_u/∂ζ_u.
        let zm = z.z.clone().reshape(vec![1, z.z.len()])?;
        let gu = penult_loss(&zm, &clf, &n2u.r.clone().reshape(vec![1, z.z.len()])?, OuterForm::Unnormalized)?;
        let gn = penult_loss(&zm, &clf, &pn.r.clone().reshape(vec![1, z.z.len()])?, OuterForm::Projected)?;
        let s: Vec<f64> = z.z.data().iter().zip(n2u.r.data()).map(|(a, b)| a + b).collect();
        let expect = jacobian_apply(&s, gn.grad_z_norm.data());
        gnu = gnu.max(rel_vec_err(gu.grad_z.data(), &expect));

        let gn2 = penult_loss(&zm, &clf, &u2n.r.clone().reshape(vec![1, z.z.len()])?, OuterForm::Projected)?;
        let gu2 = penult_loss(&zm, &clf, &pu.r.clone().reshape(vec![1, z.z.len()])?, OuterForm::Unnormalized)?;
        let zeta_grad = upstream_of_unnormalized(&z, &clf, &pu.r)?;
        let expect = jacobian_apply(z.z.data(), &zeta_grad);
        gun = gun.max(rel_vec_err(gn2.grad_z.data(), &expect));
        let _ = gu2;
    }
    Ok(vec![
        Check::at_most("identity.loss_n_to_u", nu, 1e-10, n, "|ℓ_u(r_{n→u}) − ℓ_n| relative"),
        Check::at_most("identity.loss_u_to_n", un, 1e-10, n, "|ℓ_n(r_{u→n}) − ℓ_u| relative"),
        Check::at_most("identity.grad_n_to_u", gnu, 1e-8, n, "∂ℓ_u/∂z vs J_ζ(z+r)ᵀ ∂ℓ_n/∂ζ_n"),
        Check::at_most("identity.grad_u_to_n", gun, 1e-8, n, "∂ℓ_n/∂z vs J_ζ(z)ᵀ ∂ℓ_u/∂ζ_u"),
    ])
}

/// `∂ℓ_u/∂ζ_u` for a single sample: gradient of the divergence w.r.t. the
/// normalized perturbed point.
fn upstream_of_unnormalized(z: &ActivationRecord, clf: &LinearClassifier, r: &Tensor) -> Result<Vec<f64>> {
    let s = z.z.zip_map(r, |a, b| a + b);
    let n = s.norm();
    let zeta = s.scaled(1.0 / n);
    let p = clf.probs(&z.z_norm)?;
    let mut g = Graph::new();
    let zv = g.param(zeta.reshape(vec![1, z.z.len()])?);
    let w = g.constant(clf.weight.clone());
    let b = g.constant(clf.bias.clone());
    let l = g.linear(zv, w)?;
    let l = g.add_row(l, b)?;
    let kl = kl_rows(&mut g, &p.reshape(vec![1, clf.classes()])?, l, clf.temperature)?;
    let t = g.sum(kl)?;
    g.backward(t)?;
    Ok(g.grad(zv).expect("grad").data().to_vec())
}

/// `J_ζ(v)ᵀ u = (u − v (vᵀu) / vᵀv) / ‖v‖`.
pub fn jacobian_apply(v: &[f64], u: &[f64]) -> Vec<f64> {
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let vu: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    let nv = vv.sqrt();
    u.iter().zip(v).map(|(ui, vi)| (ui - vi * vu / vv) / nv).collect()
}

fn rel_vec_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2_norm(&diff) / l2_norm(b).max(1e-12)
}

/// Intermediate perturbation vs its penultimate image: equal loss values.
pub fn intermediate_check(n: usize, seed: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut nontrivial = 0usize;
    let mut rng = rng_from(&[seed, 0x147]);
    for k in 0..n {
        let arch = Architecture { hidden: vec![12, 10], bottleneck: 8, temperature: 1.0, ..Architecture::new(5, 3) };
        let mut model = Model::new(arch, crate::rng::mix_seed(&[seed, k as u64]))?;
        for layer in &mut model.extractor.layers {
            layer.running_mean = normal_vec(&mut rng, layer.running_mean.len(), 0.2);
            layer.running_var = positive(&mut rng, layer.running_var.len());
        }
        let x = Tensor::matrix(1, 5, normal_vec(&mut rng, 5, 1.5))?;
        let split = rng.random_range(0..=model.extractor.layers.len());
        let width = model.lower(&x, split)?.cols();
        let sc: f64 = rng.random_range(0.01..2.0);
        let r_i = Tensor::matrix(1, width, normal_vec(&mut rng, width, sc))?;
        let mut g = Graph::new();
        let vars = model.bind_constant(&mut g);
        let li = intermediate_loss(&mut g, &model, &vars, &x, &r_i, split)?;
        let li = g.value(li).item();
        let mapped = map_intermediate_to_penult(&x, &model, &Perturbation { r: r_i, epsilon: 1.0, space: Space::Intermediate(split), budgeted: false })?;
        let mut g = Graph::new();
        let vars = model.bind_constant(&mut g);
        let lp = mapped_loss(&mut g, &model, &vars, &x, &mapped.r)?;
        let lp = g.value(lp).item();
        worst = worst.max((li - lp).abs() / li.abs().max(1.0));
        if li > 1e-9 {
            nontrivial += 1;
        }
    }
    Ok(Check::at_most(
        "identity.intermediate_to_penultimate",
        worst,
        1e-10,
        n,
        format!("loss with r_i at the split vs loss with its penultimate image; {nontrivial} instances with loss > 1e-9"),
    ))
}

/// Orthogonal-gradient constructions (exact) and random large-norm cases.
pub fn shrinking_checks(n: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng_from(&[seed, 0x5A1]);
    let mut exact: f64 = 0.0;
    for k in 0..n {
        let d = rng.random_range(3..=16);
        let c = rng.random_range(2..=10);
        let u = crate::rng::random_unit(&mut rng, d);
        let mut clf = random_classifier(crate::rng::mix_seed(&[seed, k as u64]), c, d, 0.5);
        for row in 0..c {
            let w = clf.weight.row_mut(row);
            let dot: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
            w.iter_mut().zip(&u).for_each(|(a, b)| *a -= dot * b);
        }
        let sc = 10f64.powf(rng.random_range(0.0..2.0));
        let z = normal_vec(&mut rng, d, sc);
        let s = 10f64.powf(rng.random_range(0.0..2.5));
        let r: Vec<f64> = u.iter().zip(&z).map(|(a, b)| s * a - b).collect();
        let ratio = orthogonal_ratio(&z, &r, &clf)?;
        if let Some(v) = ratio {
            exact = exact.max((v * s - 1.0).abs());
        }
    }
    let random = random_shrink_deviation(n, seed)?;
    Ok(vec![
        Check::at_most("shrink.orthogonal_exact", exact, 1e-8, n, "‖∂ℓ_u/∂z‖ / ‖∂ℓ_n/∂ζ_n‖ · ‖z+r‖ − 1"),
        Check::at_most("shrink.random_large_norm", random, 0.25, n, "mean |ratio·‖z+r‖ − 1| over random instances with 2ε ≤ ‖z‖ ≤ 10ε"),
    ])
}

/// `‖∂ℓ_u/∂z‖ / ‖∂ℓ_n/∂ζ_n‖` with `r_n` the normalized image of `r`.
pub fn orthogonal_ratio(z: &[f64], r: &[f64], clf: &LinearClassifier) -> Result<Option<f64>> {
    let d = z.len();
    let rec = ActivationRecord::from_activation(Tensor::vector(z.to_vec()))?;
    let pu = Perturbation::new(Tensor::vector(r.to_vec()), f64::INFINITY, Space::PenultUnnormalized);
    let pn = map_norm_unnorm(&pu, &rec, MapDirection::UnnormToNorm)?;
    let zm = Tensor::matrix(1, d, z.to_vec())?;
    let gu = penult_loss(&zm, clf, &Tensor::matrix(1, d, r.to_vec())?, OuterForm::Unnormalized)?;
    let gn = penult_loss(&zm, clf, &pn.r.reshape(vec![1, d])?, OuterForm::Projected)?;
    let den = gn.grad_z_norm.norm();
    Ok((den > 0.0).then(|| gu.grad_z.norm() / den))
}

/// Mean deviation of the shrinking ratio from `1/‖z+r‖` for one-step
/// un-normalized perturbations at the default budget and `2ε ≤ ‖z‖ ≤ 10ε`.
/// Closer to `‖z‖ ≈ ε` the rank-one part of the Jacobian is no longer small.
fn random_shrink_deviation(n: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from(&[seed, 0x5A2]);
    let mut total = 0.0;
    let mut used = 0usize;
    for k in 0..n {
        let d = rng.random_range(2..=16);
        let c = rng.random_range(2..=10);
        let clf = random_classifier(crate::rng::mix_seed(&[seed, k as u64, 1]), c, d, 0.05);
        let params = PerturbParams::defaults_for(Variant::Unnormalized, k as u64);
        let norm = params.epsilon * 10f64.powf(rng.random_range(2f64.log10()..1.0));
        let dir = crate::rng::random_unit(&mut rng, d);
        let z: Vec<f64> = dir.iter().map(|v| v * norm).collect();
        let rec = ActivationRecord::from_activation(Tensor::vector(z.clone()))?;
        let Ok(p) = approx_perturbation(&rec, &clf, &params, Variant::Unnormalized) else { continue };
        if let Some(v) = orthogonal_ratio(&z, p.r.data(), &clf)? {
            let s: Vec<f64> = z.iter().zip(p.r.data()).map(|(a, b)| a + b).collect();
            total += (v * l2_norm(&s) - 1.0).abs();
            used += 1;
        }
    }
    Ok(if used == 0 { f64::INFINITY } else { total / used as f64 })
}

/// Unit norm after projection and idempotence of the projection.
pub fn projection_checks(n: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = rng_from(&[seed, 0x9E0]);
    let (mut unit, mut idem): (f64, f64) = (0.0, 0.0);
    for _ in 0..n {
        let d = rng.random_range(2..=16);
        let zn = crate::rng::random_unit(&mut rng, d);
        let sc: f64 = rng.random_range(0.01..3.0);
        let r = normal_vec(&mut rng, d, sc);
        let zt = Tensor::vector(zn.clone());
        let p = project_perturbation(&zt, &Tensor::vector(r))?;
        let s: Vec<f64> = zn.iter().zip(p.data()).map(|(a, b)| a + b).collect();
        unit = unit.max((l2_norm(&s) - 1.0).abs());
        let p2 = project_perturbation(&zt, &p)?;
        idem = idem.max(p2.max_abs_diff(&p));
    }
    Ok(vec![
        Check::at_most("projection.unit_norm", unit, 1e-9, n, "|‖z̄ + r‖ − 1|"),
        Check::at_most("projection.idempotent", idem, 1e-12, n, "max |P(P(r)) − P(r)|"),
    ])
}

pub fn kl_check(n: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_from(&[seed, 0x41]);
    let mut worst = f64::INFINITY;
    let mut self_kl: f64 = 0.0;
    for _ in 0..n {
        let c = rng.random_range(2..=10);
        let p = simplex(&mut rng, c);
        let q = simplex(&mut rng, c);
        let mut g = Graph::new();
        let pv = g.constant(Tensor::vector(p.clone()));
        let qv = g.constant(Tensor::vector(q));
        let k = g.kl_divergence(pv, qv)?;
        worst = worst.min(g.value(k).item());
        let k2 = g.kl_divergence(pv, pv)?;
        self_kl = self_kl.max(g.value(k2).item().abs());
    }
    let mut c = Check::at_least("kl.nonnegative", worst, 0.0, n, format!("min KL(p, q); max |KL(p, p)| = {self_kl:.3e}"));
    c.passed = c.passed && self_kl <= 1e-12;
    Ok(c)
}

/// Outcome of the one-step vs oracle comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxStats {
    pub instances: usize,
    /// Fraction of instances where the one-step KL reaches half the oracle KL.
    pub half_fraction: f64,
    pub median_ratio: f64,
}

/// Random `(z, classifier, ε)` instances with `d ≤ 16`, `C ≤ 10`. The budget is
/// drawn relative to the variant's natural scale; `ξ` follows the variant
/// defaults relative to that scale.
pub fn approximation_stats(n: usize, seed: u64) -> Result<ApproxStats> {
    let mut rng = rng_from(&[seed, 0xA9]);
    let mut ratios = Vec::with_capacity(n);
    let cfg = AscentConfig::default();
    for k in 0..n {
        let (z, clf) = random_instance(&mut rng, crate::rng::mix_seed(&[seed, k as u64, 2]));
        let variant = if k % 2 == 0 { Variant::Unnormalized } else { Variant::Normalized };
        let unit = match variant {
            Variant::Unnormalized => z.norm,
            Variant::Normalized => 1.0,
        };
        let eps = unit * rng.random_range(0.05..1.0);
        let params = PerturbParams::new(eps, eps * 0.1, k as u64)?;
        let approx = approx_perturbation(&z, &clf, &params, variant);
        let a = match approx {
            Ok(p) => inner_kl(&z, &clf, &p.r, variant)?,
            Err(Error::ZeroGradient { .. }) => 0.0,
            Err(e) => return Err(e),
        };
        let (_, o) = oracle_perturbation(&z, &clf, eps, variant, &cfg, k as u64)?;
        let o = o.max(a);
        ratios.push(if o <= 1e-300 { 1.0 } else { a / o });
    }
    let half = ratios.iter().filter(|&&r| r >= 0.5).count() as f64 / n.max(1) as f64;
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(ApproxStats { instances: n, half_fraction: half, median_ratio: sorted.get(n / 2).copied().unwrap_or(f64::NAN) })
}

pub fn approximation_check(n: usize, seed: u64) -> Result<(Check, ApproxStats)> {
    let s = approximation_stats(n, seed)?;
    let c = Check::at_least(
        "approx.one_step_vs_oracle",
        s.half_fraction,
        0.9,
        n,
        format!("fraction reaching ≥ 50% of oracle KL; median ratio {:.3}", s.median_ratio),
    );
    Ok((c, s))
}

/// At `d = 2`, `C = 2` the oracle against a dense search of the budget disk.
pub fn grid_check(n: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_from(&[seed, 0x6D]);
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let clf = random_classifier(crate::rng::mix_seed(&[seed, k as u64, 3]), 2, 2, 1.0);
        let sc: f64 = rng.random_range(0.5..3.0);
        let z = normal_vec(&mut rng, 2, sc);
        let z = ActivationRecord::from_activation(Tensor::vector(z))?;
        let eps = z.norm * rng.random_range(0.1..0.9);
        let (_, oracle) = oracle_perturbation(&z, &clf, eps, Variant::Unnormalized, &AscentConfig::default(), k as u64)?;
        let grid = grid_max(&z, &clf, eps)?;
        worst = worst.max((oracle - grid).abs());
    }
    Ok(Check::at_most("oracle.grid_search_2d", worst, 1e-6, n, "|oracle KL − dense grid KL| at d = 2, C = 2"))
}

/// Maximum of the inner KL over the disk `‖r‖ ≤ ε`: the maximizer lies on the
/// boundary for this objective, so a fine angular scan refined by golden
/// section search on the circle suffices.
pub fn grid_max(z: &ActivationRecord, clf: &LinearClassifier, eps: f64) -> Result<f64> {
    let kl = |theta: f64, rad: f64| -> Result<f64> {
        let r = Tensor::vector(vec![rad * theta.cos(), rad * theta.sin()]);
        let s = z.z.zip_map(&r, |a, b| a + b);
        if s.norm() == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        inner_kl(z, clf, &r, Variant::Unnormalized)
    };
    let steps = 4096;
    let h = std::f64::consts::TAU / steps as f64;
    let mut best = f64::NEG_INFINITY;
    let mut best_t = 0.0;
    let mut best_rad = eps;
    for radial in 1..=64 {
        let rad = eps * radial as f64 / 64.0;
        for i in 0..steps {
            let t = i as f64 * h;
            let v = kl(t, rad)?;
            if v > best {
                best = v;
                best_t = t;
                best_rad = rad;
            }
        }
    }
    let (mut a, mut b) = (best_t - h, best_t + h);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if kl(c, best_rad)? > kl(d, best_rad)? {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(best.max(kl(0.5 * (a + b), best_rad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_apply_matches_backward() {
        let v = [3.0, -1.0, 2.0];
        let (rows, jv) = normalize_jacobian(&v).unwrap();
        let u = [0.5, 1.0, -2.0];
        let direct = jacobian_apply(&v, &u);
        for i in 0..3 {
            let from_rows: f64 = (0..3).map(|k| rows[k][i] * u[k]).sum();
            assert!((from_rows - direct[i]).abs() < 1e-14);
        }
        assert!(jv.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn fast_report_passes_and_is_reproducible() {
        let a = run(Level::Fast, 0).unwrap();
        for c in &a.checks {
            assert!(c.passed, "{c:?}");
        }
        let b = run(Level::Fast, 0).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
