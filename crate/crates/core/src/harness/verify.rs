//! The runtime verification suite: every library invariant executed on
//! seeded random instances, with one pass/fail line per check reporting the
//! tolerance and the observed value.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::curvature::{
    aggregate_factors, exact_gnh, exact_hessian, kfac_estimate, CurvatureKind, CurvatureModel,
    KfacFactors,
};
use crate::editor::{edit_batch, EditConfig, OptimizerKind};
use crate::error::Result;
use crate::harness::data::{synthetic_tasks, LabeledDataset, Provenance};
use crate::harness::idx;
use crate::harness::sweep::{pretrain, records_to_csv, sweep_gamma, SweepOptions};
use crate::linalg::{dense_projector, energy_cutoff_index, sym_eig};
use crate::network::{flatten_colmajor, unflatten_colmajor, Activation, FeedForwardNet};
use crate::projection::{build_projector, project_layer, LayerProjector, ProjectorCache};

/// One verified invariant.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from_observed(name: &str, tolerance: f64, observed: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            tolerance,
            observed,
            passed: observed <= tolerance,
            detail,
        }
    }
}

/// Results of the whole suite.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {:<32} tol {:>9.2e}   observed {:>12.4e}   {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.tolerance,
                c.observed,
                c.detail
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.checks.len(),
            failed
        ));
        out
    }
}

/// Runs the full invariant suite.
pub fn verify(seed: u64) -> Result<VerifyReport> {
    let checks = vec![
        check_eig_reconstruction(seed, 1e-10)?,
        check_projector_idempotent(seed, 1e-9)?,
        check_cutoff_monotone(seed)?,
        check_backprop_fd(seed, 1e-5)?,
        check_jacobian_consistency(seed, 1e-8)?,
        check_hvp_symmetry(seed, 1e-6)?,
        check_forward_determinism(seed)?,
        check_activation_nullspace_containment(seed, 1e-8)?,
        check_fisher_mc_rate(seed, 20_000)?,
        check_linear_model_identity(seed, 1e-6)?,
        check_kfac_single_sample(seed, 1e-10)?,
        check_streaming_aggregation(seed, 1e-12)?,
        check_kron_equivalence(seed, 1e-9)?,
        check_constraint_control(seed, 1e-9)?,
        check_projector_probing(seed, 1e-9)?,
        check_actcov_annihilation(seed, 1e-8)?,
        check_sgd_subspace_invariance(seed, 1e-9)?,
        check_adam_double_projection(seed, 1e-9)?,
        check_untracked_identity(seed)?,
        check_editor_determinism(seed)?,
        check_csv_determinism(seed)?,
        check_idx_roundtrip(seed)?,
    ];
    Ok(VerifyReport { checks })
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::curvature::splitmix64(seed ^ salt))
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = rng.random_range(-1.0..1.0);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    m
}

fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut b = Array2::<f64>::zeros((n, n + 2));
    for v in b.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    b.dot(&b.t()) / n as f64
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_dataset(net: &FeedForwardNet, n: usize, rng: &mut ChaCha8Rng) -> LabeledDataset {
    let mut inputs = Array2::<f64>::zeros((n, net.input_dim()));
    for v in inputs.iter_mut() {
        *v = rng.random::<f64>();
    }
    let labels = (0..n).map(|i| i % net.class_count()).collect();
    LabeledDataset::new(inputs, labels, net.class_count(), Provenance::Synthetic).unwrap()
}

pub fn check_eig_reconstruction(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=32);
        let m = random_symmetric(n, &mut rng);
        let eig = sym_eig(&m)?;
        let resid = frob(&(&eig.reconstruct() - &m)) / frob(&m).max(f64::MIN_POSITIVE);
        worst = worst.max(resid);
    }
    Ok(CheckResult::from_observed(
        "eig_reconstruction",
        tol,
        worst,
        "max relative residual over 100 random symmetric matrices up to 32x32".into(),
    ))
}

pub fn check_projector_idempotent(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=12);
        let m = random_symmetric(n, &mut rng);
        let eig = sym_eig(&m)?;
        let k = rng.random_range(0..=n);
        let p = dense_projector(&eig, k)?;
        let pt = p.t().to_owned();
        let pp = p.dot(&p);
        worst = worst.max(frob(&(&p - &pt))).max(frob(&(&pp - &p)));
    }
    Ok(CheckResult::from_observed(
        "projector_idempotent",
        tol,
        worst,
        "max |P - P^T|_F and |P^2 - P|_F over 50 random projectors".into(),
    ))
}

pub fn check_cutoff_monotone(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 3);
    let mut violations = 0usize;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let mut lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        lambda.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let lambda = Array1::from(lambda);
        let g1: f64 = rng.random_range(0.01..0.99);
        let g2: f64 = rng.random_range(0.01..0.99);
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        if energy_cutoff_index(&lambda, lo)? > energy_cutoff_index(&lambda, hi)? {
            violations += 1;
        }
    }
    Ok(CheckResult::from_observed(
        "cutoff_monotone_in_gamma",
        0.0,
        violations as f64,
        "monotonicity violations over 200 random spectra".into(),
    ))
}

pub fn check_backprop_fd(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 4);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let acts = [
            [Activation::Tanh, Activation::Identity],
            [Activation::Gelu, Activation::Identity],
            [Activation::Tanh, Activation::Gelu],
        ][trial % 3];
        let mut net_rng = rng_for(seed, 40 + trial as u64);
        let net = FeedForwardNet::random(&[3, 5, 3], &acts, &mut net_rng)?;
        let x = Array1::from((0..3).map(|_| rng.random::<f64>()).collect::<Vec<f64>>());
        let y = rng.random_range(0..3);
        let trace = net.forward(&x.view())?;
        let analytic = net.backward(&trace, y)?.flatten();
        let theta = net.flatten_params();
        let h = 1e-4;
        let mut numeric = Array1::<f64>::zeros(theta.len());
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut plus = net.clone();
            plus.set_params(&tp.view())?;
            let lp = crate::network::cross_entropy(&plus.forward(&x.view())?.logits, y)?;
            let mut tm = theta.clone();
            tm[j] -= h;
            let mut minus = net.clone();
            minus.set_params(&tm.view())?;
            let lm = crate::network::cross_entropy(&minus.forward(&x.view())?.logits, y)?;
            numeric[j] = (lp - lm) / (2.0 * h);
        }
        let num = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let den = analytic.mapv(|v| v * v).sum().sqrt().max(1e-8);
        worst = worst.max(num / den);
    }
    Ok(CheckResult::from_observed(
        "backprop_vs_central_fd",
        tol,
        worst,
        "max relative gradient error over 20 (net, input, label) triples".into(),
    ))
}

pub fn check_jacobian_consistency(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 5);
    let mut worst = 0.0f64;
    for trial in 0..5 {
        let mut net_rng = rng_for(seed, 50 + trial);
        let net = FeedForwardNet::random(
            &[4, 8, 3],
            &[Activation::Gelu, Activation::Identity],
            &mut net_rng,
        )?;
        let x = Array1::from((0..4).map(|_| rng.random::<f64>()).collect::<Vec<f64>>());
        let y = rng.random_range(0..3);
        let trace = net.forward(&x.view())?;
        let jac = net.per_example_jacobian(&x.view())?;
        let mut residual = trace.probs.clone();
        residual[y] -= 1.0;
        let via_jac = jac.t().dot(&residual);
        let direct = net.backward(&trace, y)?.flatten();
        let diff = (&via_jac - &direct)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(diff);
    }
    Ok(CheckResult::from_observed(
        "jacobian_chain_rule",
        tol,
        worst,
        "max abs difference between J^T (softmax - onehot) and backprop".into(),
    ))
}

pub fn check_hvp_symmetry(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 6);
    let net = FeedForwardNet::random(
        &[3, 4, 2],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 60);
    let data = random_dataset(&net, 6, &mut rng);
    let p = net.param_count();
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let u = Array1::from((0..p).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        let v = Array1::from((0..p).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        let hu = net.hessian_vector_product(&data, &u.view())?;
        let hv = net.hessian_vector_product(&data, &v.view())?;
        let unorm = u.dot(&u).sqrt();
        let vnorm = v.dot(&v).sqrt();
        let hnorm = (hu.dot(&hu).sqrt() / unorm).max(1e-3);
        worst = worst.max((v.dot(&hu) - u.dot(&hv)).abs() / (unorm * vnorm * hnorm));
    }
    Ok(CheckResult::from_observed(
        "hvp_symmetry",
        tol,
        worst,
        "max |v^T H u - u^T H v| / (|u||v||H|) over random pairs".into(),
    ))
}

pub fn check_forward_determinism(seed: u64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 7);
    let net = FeedForwardNet::random(
        &[3, 4, 2],
        &[Activation::Gelu, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 70);
    let x = Array1::from((0..3).map(|_| rng.random::<f64>()).collect::<Vec<f64>>());
    let t1 = net.forward(&x.view())?;
    let t2 = net.forward(&x.view())?;
    let mut mismatches = 0usize;
    if !t1
        .logits
        .iter()
        .zip(t2.logits.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits())
    {
        mismatches += 1;
    }
    let mut r1 = rng_for(seed, 71);
    let mut r2 = rng_for(seed, 71);
    let p1 = net.sample_pseudo_gradient(&t1, &mut r1);
    let p2 = net.sample_pseudo_gradient(&t2, &mut r2);
    if p1.sampled_label != p2.sampled_label {
        mismatches += 1;
    }
    for (a, b) in p1.preact_grads.iter().zip(p2.preact_grads.iter()) {
        if !a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            mismatches += 1;
        }
    }
    Ok(CheckResult::from_observed(
        "trace_and_pseudograd_determinism",
        0.0,
        mismatches as f64,
        "bit mismatches between identically seeded evaluations".into(),
    ))
}

pub fn check_activation_nullspace_containment(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 8);
    let net = FeedForwardNet::random(
        &[5, 8, 4],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 80);
    let data = random_dataset(&net, 3, &mut rng);
    let mut worst = 0.0f64;
    for layer in [0usize, 1] {
        let g = match exact_gnh(&net, &data, &[layer])? {
            CurvatureModel::Gnh(d) => d.matrix,
            _ => unreachable!(),
        };
        let gnorm = frob(&g);
        // Orthonormal basis of the layer-input span.
        let mut basis: Vec<Array1<f64>> = Vec::new();
        for i in 0..data.len() {
            let (x, _) = data.example(i);
            let trace = net.forward(&x)?;
            let mut v = trace.activations[layer].clone();
            for b in &basis {
                let proj = v.dot(b);
                v = &v - &(b * proj);
            }
            let n = v.dot(&v).sqrt();
            if n > 1e-12 {
                basis.push(v / n);
            }
        }
        let sh = net.shape_of(layer)?;
        for _ in 0..10 {
            let mut dw = Array2::<f64>::zeros((sh.d_out, sh.d_in));
            for v in dw.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for mut row in dw.rows_mut() {
                for b in &basis {
                    let proj = row.dot(b);
                    let adj = b * proj;
                    row -= &adj;
                }
            }
            let flat = flatten_colmajor(&dw);
            let dnorm = flat.dot(&flat).sqrt();
            let out = g.dot(&flat);
            worst = worst.max(out.dot(&out).sqrt() / (gnorm * dnorm).max(f64::MIN_POSITIVE));
        }
    }
    Ok(CheckResult::from_observed(
        "activation_nullspace_containment",
        tol,
        worst,
        "max |G vec(dW)| / (|G|_F |dW|_F) for dW annihilating layer inputs".into(),
    ))
}

/// Root-mean-square relative Frobenius error of the Monte-Carlo Fisher at
/// sample size `n`, over `reps` independent repetitions.
///
/// The dataset must hold a single input. Each repetition draws `n` labels
/// from the predictive distribution; since the pseudo-gradient is a
/// deterministic function of the sampled label for a fixed input, the
/// rank-one terms are grouped by label count instead of being re-derived
/// per draw.
pub fn fisher_mc_error(
    net: &FeedForwardNet,
    data: &LabeledDataset,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    if data.len() != 1 {
        return Err(crate::error::Error::validation(
            "data",
            "the MC Fisher comparison uses exactly one input",
        ));
    }
    let g = match exact_gnh(net, data, &all_layers(net))? {
        CurvatureModel::Gnh(d) => d.matrix,
        _ => unreachable!(),
    };
    let gnorm = frob(&g);
    let (x, _) = data.example(0);
    let trace = net.forward(&x)?;
    let p = net.param_count();
    let m = net.class_count();

    // Flattened log-likelihood gradient per possible label.
    let mut per_label: Vec<Array1<f64>> = Vec::with_capacity(m);
    for label in 0..m {
        let pg = net.pseudo_gradient_for_label(&trace, label);
        let mut flat = Vec::with_capacity(p);
        for (l, gl) in pg.preact_grads.iter().enumerate() {
            let a = &trace.activations[l];
            // vec(g a^T) column-major: a_j * g_i.
            for j in 0..a.len() {
                for i in 0..gl.len() {
                    flat.push(a[j] * gl[i]);
                }
            }
        }
        per_label.push(Array1::from(flat));
    }

    let mut sq_sum = 0.0;
    for rep in 0..reps {
        let mut rng = rng_for(seed, 0xF15 ^ (rep as u64).wrapping_mul(0x9e37_79b9));
        let mut counts = vec![0u64; m];
        for _ in 0..n {
            counts[crate::network::sample_label(&trace.probs, &mut rng)] += 1;
        }
        let mut acc = Array2::<f64>::zeros((p, p));
        for (label, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let w = count as f64 / n as f64;
            let v = &per_label[label];
            for r in 0..p {
                if v[r] == 0.0 {
                    continue;
                }
                let vr = w * v[r];
                for c in 0..p {
                    acc[[r, c]] += vr * v[c];
                }
            }
        }
        let err = frob(&(&acc - &g)) / gnorm;
        sq_sum += err * err;
    }
    Ok((sq_sum / reps as f64).sqrt())
}

fn all_layers(net: &FeedForwardNet) -> Vec<usize> {
    (0..net.layer_count()).collect()
}

pub fn check_fisher_mc_rate(seed: u64, n_base: usize) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 9);
    let net = FeedForwardNet::random(
        &[2, 4, 6],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 90);
    let data = random_dataset(&net, 1, &mut rng);
    let reps = 8;
    let err_base = fisher_mc_error(&net, &data, n_base, reps, seed ^ 0x91)?;
    let err_quad = fisher_mc_error(&net, &data, 4 * n_base, reps, seed ^ 0x92)?;
    let ratio = err_quad / err_base;
    let mut result = CheckResult::from_observed(
        "fisher_mc_convergence_rate",
        0.15,
        (ratio - 0.5).abs(),
        format!(
            "rmse({n_base})={err_base:.4}, rmse({})={err_quad:.4}, ratio {ratio:.3}",
            4 * n_base
        ),
    );
    // The base error itself must already be small.
    if err_base > 0.1 {
        result.passed = false;
        result.detail.push_str(" [base error too large]");
    }
    Ok(result)
}

pub fn check_linear_model_identity(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 10);
    let net = FeedForwardNet::random(&[3, 3], &[Activation::Identity], &mut net_rng)?;
    let mut rng = rng_for(seed, 100);
    let data = random_dataset(&net, 8, &mut rng);
    let h = match exact_hessian(&net, &data, &[0])? {
        CurvatureModel::ExactHessian(d) => d.matrix,
        _ => unreachable!(),
    };
    let g = match exact_gnh(&net, &data, &[0])? {
        CurvatureModel::Gnh(d) => d.matrix,
        _ => unreachable!(),
    };
    Ok(CheckResult::from_observed(
        "linear_model_hessian_is_gnh",
        tol,
        frob(&(&h - &g)) / frob(&g),
        "relative Frobenius gap between H and G on a linear softmax model".into(),
    ))
}

pub fn check_kfac_single_sample(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 11);
    let net = FeedForwardNet::random(
        &[3, 4, 2],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 110);
    let data = random_dataset(&net, 1, &mut rng);
    let layers = [0usize, 1];
    let factors = kfac_estimate(&net, &data, &layers, 1, seed ^ 0xabc, false)?;
    let (x, y) = data.example(0);
    let trace = net.forward(&x)?;
    let mut ex_rng = crate::curvature::example_rng(seed ^ 0xabc, &x, y);
    let pg = net.sample_pseudo_gradient(&trace, &mut ex_rng);

    let mut worst = 0.0f64;
    for &l in &layers {
        let a = &trace.activations[l];
        let g = &pg.preact_grads[l];
        let fac = &factors.layers[&l];
        for i in 0..a.len() {
            for j in 0..a.len() {
                for k in 0..g.len() {
                    for m in 0..g.len() {
                        let block = fac.a[[i, j]] * fac.s[[k, m]];
                        let rank_one = (a[i] * g[k]) * (a[j] * g[m]);
                        worst = worst.max((block - rank_one).abs());
                    }
                }
            }
        }
    }
    Ok(CheckResult::from_observed(
        "kfac_single_sample_exactness",
        tol,
        worst,
        "max abs difference between A (x) S and the rank-one Fisher block".into(),
    ))
}

pub fn check_streaming_aggregation(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 12);
    let net = FeedForwardNet::random(
        &[3, 4, 2],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 120);
    let data = random_dataset(&net, 12, &mut rng);
    let one_shot = kfac_estimate(&net, &data, &[0, 1], 1, seed ^ 0xdef, false)?;
    let mut acc = KfacFactors::zeros(&net.layer_shapes());
    for c in data.chunks(5) {
        let f = kfac_estimate(&net, &c, &[0, 1], 1, seed ^ 0xdef, false)?;
        acc = aggregate_factors(&acc, &f)?;
    }
    let mut worst = 0.0f64;
    for l in [0usize, 1] {
        worst = worst.max(
            (&acc.layers[&l].a - &one_shot.layers[&l].a)
                .iter()
                .chain((&acc.layers[&l].s - &one_shot.layers[&l].s).iter())
                .map(|v| v.abs())
                .fold(0.0f64, f64::max),
        );
    }
    Ok(CheckResult::from_observed(
        "streaming_factor_aggregation",
        tol,
        worst,
        "max abs gap between chunked-and-merged and one-shot factors".into(),
    ))
}

/// Matrix-free projection signature used by the equivalence check, so tests
/// can inject a broken implementation and watch the check fail.
pub type KronProjectFn<'a> =
    &'a dyn Fn(&Array2<f64>, &Array2<f64>, &Array2<f64>, &Array2<f64>) -> Array2<f64>;

pub fn check_kron_equivalence(seed: u64, tol: f64) -> Result<CheckResult> {
    let production: KronProjectFn = &|u_in, u_out, mask, q| {
        let cache = factored_cache(u_in, u_out, mask);
        project_layer(&cache, 0, q).unwrap()
    };
    check_kron_equivalence_with(seed, tol, production)
}

fn factored_cache(u_in: &Array2<f64>, u_out: &Array2<f64>, mask: &Array2<f64>) -> ProjectorCache {
    let mut layers = std::collections::BTreeMap::new();
    layers.insert(
        0usize,
        LayerProjector::Factored {
            u_in: u_in.clone(),
            u_out: u_out.clone(),
            lambda_in: Array1::zeros(u_in.nrows()),
            lambda_out: Array1::zeros(u_out.nrows()),
            mask: mask.clone(),
            lambda_gamma: 0.0,
            retained_energy: 0.0,
            removed_rank: 0,
        },
    );
    ProjectorCache {
        gamma: 0.5,
        layers,
        joint: None,
        built_at: std::time::SystemTime::now(),
    }
}

/// The rotate-mask-rotate identity against a materialized projector, over
/// 50 random layer shapes with arbitrary predicate masks.
pub fn check_kron_equivalence_with(seed: u64, tol: f64, project: KronProjectFn) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 13);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d_in = rng.random_range(2..=16);
        let d_out = rng.random_range(2..=16);
        let a = random_psd(d_in, &mut rng);
        let s = random_psd(d_out, &mut rng);
        let ein = sym_eig(&a)?;
        let eout = sym_eig(&s)?;
        let mut mask = Array2::<f64>::zeros((d_out, d_in));
        for v in mask.iter_mut() {
            *v = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        }

        let p_dim = d_in * d_out;
        let mut p_dense = Array2::<f64>::zeros((p_dim, p_dim));
        for i in 0..d_out {
            for j in 0..d_in {
                if mask[[i, j]] == 0.0 {
                    continue;
                }
                let mut vec_ij = Vec::with_capacity(p_dim);
                for jj in 0..d_in {
                    for ii in 0..d_out {
                        vec_ij.push(ein.u[[jj, j]] * eout.u[[ii, i]]);
                    }
                }
                let v = Array1::from(vec_ij);
                for r in 0..p_dim {
                    if v[r] == 0.0 {
                        continue;
                    }
                    for c in 0..p_dim {
                        p_dense[[r, c]] += v[r] * v[c];
                    }
                }
            }
        }

        let mut q = Array2::<f64>::zeros((d_out, d_in));
        for v in q.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let matrix_free = project(&ein.u, &eout.u, &mask, &q);
        let flat = flatten_colmajor(&q);
        let dense = unflatten_colmajor(&p_dense.dot(&flat).view(), d_out, d_in)?;
        let diff = (&matrix_free - &dense)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(diff);
    }
    Ok(CheckResult::from_observed(
        "kron_projection_equivalence",
        tol,
        worst,
        "max abs gap between matrix-free and materialized projection, 50 layers".into(),
    ))
}

pub fn check_constraint_control(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 14);
    let net = FeedForwardNet::random(
        &[4, 4, 3],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 140);
    let edit = random_dataset(&net, 10, &mut rng);
    let cap = random_dataset(&net, 14, &mut rng);
    let model = exact_gnh(&net, &cap, &[0, 1])?;
    let config = EditConfig {
        gamma: 0.7,
        learning_rate: 0.08,
        max_steps: 6,
        batch_size: 5,
        early_stop_loss: 0.0,
        optimizer: OptimizerKind::Sgd,
        tracked_layers: vec![0, 1],
        drift_threshold: 1e12,
        joint: true,
        seed,
        ..EditConfig::default()
    };
    let (_, tel) = edit_batch(&net, &edit, &model, &config, None)?;
    let mut worst = 0.0f64;
    for s in &tel.steps {
        if s.delta_norm_sq == 0.0 {
            continue;
        }
        let bound = s.lambda_gamma * s.delta_norm_sq;
        let violation = (s.quadratic_form - bound) / bound.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(violation);
    }
    Ok(CheckResult::from_observed(
        "constraint_quadratic_bound",
        tol,
        worst.max(0.0),
        "max relative excess of dT G d over lambda_gamma |d|^2 per step".into(),
    ))
}

pub fn check_projector_probing(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 15);
    let net = FeedForwardNet::random(
        &[3, 4, 2],
        &[Activation::Gelu, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 150);
    let data = random_dataset(&net, 8, &mut rng);
    let models = vec![
        exact_gnh(&net, &data, &[0, 1])?,
        CurvatureModel::Kfac(kfac_estimate(&net, &data, &[0, 1], 1, seed, false)?),
        crate::curvature::activation_covariance(&net, &data, &[0, 1])?,
    ];
    let mut worst = 0.0f64;
    for model in &models {
        let cache = build_projector(model, &net, 0.85, false)?;
        for l in 0..2 {
            let sh = net.shape_of(l)?;
            let mut u = Array2::<f64>::zeros((sh.d_out, sh.d_in));
            let mut v = Array2::<f64>::zeros((sh.d_out, sh.d_in));
            for x in u.iter_mut().chain(v.iter_mut()) {
                *x = rng.random_range(-1.0..1.0);
            }
            let pu = project_layer(&cache, l, &u)?;
            let pv = project_layer(&cache, l, &v)?;
            let ppv = project_layer(&cache, l, &pv)?;
            worst = worst.max(
                (&ppv - &pv)
                    .iter()
                    .map(|x| x.abs())
                    .fold(0.0f64, f64::max),
            );
            worst = worst.max(((&u * &pv).sum() - (&pu * &v).sum()).abs());
        }
    }
    Ok(CheckResult::from_observed(
        "projector_symmetry_idempotence",
        tol,
        worst,
        "random-vector probing of <u,Pv>=<Pu,v> and P(Pv)=Pv, all variants".into(),
    ))
}

pub fn check_actcov_annihilation(seed: u64, tol: f64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 16);
    let net = FeedForwardNet::random(
        &[5, 4, 2],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 160);
    let data = random_dataset(&net, 3, &mut rng);
    let model = crate::curvature::activation_covariance(&net, &data, &[0])?;
    let cache = build_projector(&model, &net, 1.0 - 1e-9, false)?;
    let sh = net.shape_of(0)?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut dw = Array2::<f64>::zeros((sh.d_out, sh.d_in));
        for v in dw.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let proj = project_layer(&cache, 0, &dw)?;
        let pn = frob(&proj).max(1e-12);
        for i in 0..data.len() {
            let (x, _) = data.example(i);
            let trace = net.forward(&x)?;
            let a = &trace.activations[0];
            let an = a.dot(a).sqrt();
            let out = proj.dot(a);
            worst = worst.max(out.dot(&out).sqrt() / (pn * an));
        }
    }
    Ok(CheckResult::from_observed(
        "actcov_annihilates_activations",
        tol,
        worst,
        "max |dW_proj a| / (|dW_proj| |a|) over capability inputs".into(),
    ))
}

pub fn check_sgd_subspace_invariance(seed: u64, tol: f64) -> Result<CheckResult> {
    subspace_invariance(seed, tol, OptimizerKind::Sgd, "sgd_update_subspace_invariance")
}

pub fn check_adam_double_projection(seed: u64, tol: f64) -> Result<CheckResult> {
    subspace_invariance(
        seed,
        tol,
        OptimizerKind::adam_default(),
        "adam_double_projection_invariance",
    )
}

fn subspace_invariance(
    seed: u64,
    tol: f64,
    optimizer: OptimizerKind,
    name: &str,
) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 17);
    let net = FeedForwardNet::random(
        &[4, 5, 3],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 170);
    let edit = random_dataset(&net, 10, &mut rng);
    let cap = random_dataset(&net, 15, &mut rng);
    let model = exact_gnh(&net, &cap, &[0, 1])?;
    let config = EditConfig {
        gamma: 0.8,
        learning_rate: 0.05,
        max_steps: 5,
        batch_size: 4,
        early_stop_loss: 0.0,
        optimizer,
        tracked_layers: vec![0, 1],
        drift_threshold: 1e12,
        seed,
        ..EditConfig::default()
    };
    let (edited, _) = edit_batch(&net, &edit, &model, &config, None)?;
    let cache = build_projector(&model, &net, 0.8, false)?;
    let mut worst = 0.0f64;
    for l in 0..2 {
        let dw = &edited.layers()[l].weight - &net.layers()[l].weight;
        let projected = project_layer(&cache, l, &dw)?;
        worst = worst.max(
            (&projected - &dw)
                .iter()
                .map(|v| v.abs())
                .fold(0.0f64, f64::max),
        );
    }
    Ok(CheckResult::from_observed(
        name,
        tol,
        worst,
        "fixed-point residual of re-projecting the accumulated delta".into(),
    ))
}

pub fn check_untracked_identity(seed: u64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 18);
    let net = FeedForwardNet::random(
        &[3, 4, 3],
        &[Activation::Gelu, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 180);
    let edit = random_dataset(&net, 8, &mut rng);
    let cap = random_dataset(&net, 10, &mut rng);
    let factors = kfac_estimate(&net, &cap, &[1], 1, seed, false)?;
    let config = EditConfig {
        tracked_layers: vec![1],
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.05,
        max_steps: 3,
        seed,
        ..EditConfig::default()
    };
    let (edited, _) = edit_batch(&net, &edit, &CurvatureModel::Kfac(factors), &config, None)?;
    let identical = net.layers()[0]
        .weight
        .iter()
        .zip(edited.layers()[0].weight.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(CheckResult::from_observed(
        "untracked_layer_identity",
        0.0,
        if identical { 0.0 } else { 1.0 },
        "bit mismatches in untracked layers after editing".into(),
    ))
}

pub fn check_editor_determinism(seed: u64) -> Result<CheckResult> {
    let mut net_rng = rng_for(seed, 19);
    let net = FeedForwardNet::random(
        &[3, 4, 2],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let mut rng = rng_for(seed, 190);
    let edit = random_dataset(&net, 9, &mut rng);
    let cap = random_dataset(&net, 12, &mut rng);
    let factors = kfac_estimate(&net, &cap, &[0, 1], 1, seed, false)?;
    let model = CurvatureModel::Kfac(factors);
    let config = EditConfig {
        tracked_layers: vec![0, 1],
        learning_rate: 0.05,
        max_steps: 4,
        batch_size: 4,
        seed,
        ..EditConfig::default()
    };
    let (n1, t1) = edit_batch(&net, &edit, &model, &config, None)?;
    let (n2, t2) = edit_batch(&net, &edit, &model, &config, None)?;
    let mut mismatches = 0usize;
    if n1.flatten_params() != n2.flatten_params() {
        mismatches += 1;
    }
    if t1.steps.len() != t2.steps.len() {
        mismatches += 1;
    } else {
        for (a, b) in t1.steps.iter().zip(t2.steps.iter()) {
            if a.edit_loss.to_bits() != b.edit_loss.to_bits()
                || a.quadratic_form.to_bits() != b.quadratic_form.to_bits()
            {
                mismatches += 1;
            }
        }
    }
    Ok(CheckResult::from_observed(
        "editor_determinism",
        0.0,
        mismatches as f64,
        "bit mismatches between two identically seeded editing runs".into(),
    ))
}

pub fn check_csv_determinism(seed: u64) -> Result<CheckResult> {
    let (cap, edit) = synthetic_tasks(seed ^ 0x51ee, 90, 6, 3)?;
    let mut net_rng = rng_for(seed, 20);
    let net = FeedForwardNet::random(
        &[6, 8, 3],
        &[Activation::Tanh, Activation::Identity],
        &mut net_rng,
    )?;
    let (net0, _) = pretrain(&net, &cap, 8, 0.2, 16, seed, None)?;
    let opts = SweepOptions {
        kinds: vec![CurvatureKind::Kfac, CurvatureKind::None],
        k_grid: vec![1.0],
        config: EditConfig {
            tracked_layers: vec![0, 1],
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            max_steps: 4,
            seed,
            ..EditConfig::default()
        },
        curvature_examples: 30,
        ..SweepOptions::default()
    };
    let csv1 = records_to_csv(&sweep_gamma(&net0, &cap, &edit, &opts)?, &opts.config);
    let csv2 = records_to_csv(&sweep_gamma(&net0, &cap, &edit, &opts)?, &opts.config);
    Ok(CheckResult::from_observed(
        "sweep_csv_determinism",
        0.0,
        if csv1 == csv2 { 0.0 } else { 1.0 },
        "byte differences between two identically seeded sweep CSVs".into(),
    ))
}

pub fn check_idx_roundtrip(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 21);
    let n = 3;
    let (rows, cols) = (4, 5);
    let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.random::<u8>()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let img = idx::idx_image_bytes(n, rows, cols, &pixels)?;
    let lbl = idx::idx_label_bytes(&labels);

    let dir = std::env::temp_dir().join(format!("crispe-idx-{}", crate::curvature::splitmix64(seed)));
    std::fs::create_dir_all(&dir)?;
    let img_path = dir.join("img.idx");
    let lbl_path = dir.join("lbl.idx");
    std::fs::write(&img_path, &img)?;
    std::fs::write(&lbl_path, &lbl)?;
    let data = idx::load_idx(&img_path, &lbl_path)?;
    let mut back_pixels = Vec::with_capacity(pixels.len());
    for i in 0..n {
        for j in 0..rows * cols {
            back_pixels.push((data.inputs[[i, j]] * 255.0).round() as u8);
        }
    }
    let rewritten_img = idx::idx_image_bytes(n, rows, cols, &back_pixels)?;
    let rewritten_lbl = idx::idx_label_bytes(
        &data.labels.iter().map(|&l| l as u8).collect::<Vec<u8>>(),
    );
    let _ = std::fs::remove_dir_all(&dir);
    Ok(CheckResult::from_observed(
        "idx_roundtrip",
        0.0,
        if rewritten_img == img && rewritten_lbl == lbl {
            0.0
        } else {
            1.0
        },
        "byte differences after write-load-rewrite of an IDX fixture".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let report = verify(2024).unwrap();
        assert!(report.all_passed(), "\n{}", report.render());
    }

    #[test]
    fn injected_sign_flip_fails_equivalence_check() {
        let broken: KronProjectFn = &|u_in, u_out, mask, q| {
            let rotated = u_out.t().dot(q).dot(u_in);
            // Sign flip in the rotation back.
            u_out.dot(&(&rotated * mask)).dot(&u_in.t()) * -1.0
        };
        let result = check_kron_equivalence_with(7, 1e-9, broken).unwrap();
        assert!(!result.passed, "mutation canary did not trip");
    }

    #[test]
    fn tightened_tolerance_documents_sensitivity() {
        // At 1e-15 the finite-difference and spectral checks must fail:
        // their achievable accuracy is bounded by truncation error, not
        // implementation bugs.
        let fd = check_backprop_fd(11, 1e-15).unwrap();
        assert!(!fd.passed);
        let eig = check_eig_reconstruction(11, 1e-17).unwrap();
        assert!(!eig.passed);
    }
}
