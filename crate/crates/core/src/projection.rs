//! Low-curvature projectors: built from a curvature model and an energy
//! threshold, applied either densely on flattened gradients or matrix-free
//! through the Kronecker eigenstructure (rotate, mask, rotate back).

use std::collections::BTreeMap;
use std::time::SystemTime;

use ndarray::{Array1, Array2};

use crate::curvature::CurvatureModel;
use crate::error::{Error, Result};
use crate::linalg::{
    dense_projector, energy_cutoff_index, kron_energy_cutoff, sym_eig, KronSpectrum,
};
use crate::network::{flatten_colmajor, unflatten_colmajor, FeedForwardNet, LayerShape};

/// Projector for one tracked layer.
#[derive(Debug, Clone)]
pub enum LayerProjector {
    /// Explicit projector on the layer's flattened parameters.
    Dense {
        p: Array2<f64>,
        lambda_gamma: f64,
        retained_energy: f64,
        removed_rank: usize,
    },
    /// Factor eigenbases plus the low-curvature mask; the projector is never
    /// materialized.
    Factored {
        u_in: Array2<f64>,
        u_out: Array2<f64>,
        lambda_in: Array1<f64>,
        lambda_out: Array1<f64>,
        mask: Array2<f64>,
        lambda_gamma: f64,
        retained_energy: f64,
        removed_rank: usize,
    },
}

impl LayerProjector {
    pub fn lambda_gamma(&self) -> f64 {
        match self {
            LayerProjector::Dense { lambda_gamma, .. }
            | LayerProjector::Factored { lambda_gamma, .. } => *lambda_gamma,
        }
    }

    fn diagnostics(&self) -> (f64, usize) {
        match self {
            LayerProjector::Dense {
                retained_energy,
                removed_rank,
                ..
            }
            | LayerProjector::Factored {
                retained_energy,
                removed_rank,
                ..
            } => (*retained_energy, *removed_rank),
        }
    }
}

/// A single dense projector over the concatenation of all tracked layers.
#[derive(Debug, Clone)]
pub struct JointProjector {
    pub p: Array2<f64>,
    pub layout: Vec<LayerShape>,
    pub lambda_gamma: f64,
    pub retained_energy: f64,
    pub removed_rank: usize,
}

/// Projectors for every tracked layer (or one joint projector), plus the
/// diagnostics recorded at build time.
#[derive(Debug, Clone)]
pub struct ProjectorCache {
    pub gamma: f64,
    pub layers: BTreeMap<usize, LayerProjector>,
    pub joint: Option<JointProjector>,
    pub built_at: SystemTime,
}

impl ProjectorCache {
    pub fn tracked_layers(&self) -> Vec<usize> {
        if let Some(j) = &self.joint {
            j.layout.iter().map(|s| s.index).collect()
        } else {
            self.layers.keys().copied().collect()
        }
    }

    /// The largest nullspace eigenvalue: per-layer value, or the joint one.
    pub fn lambda_gamma(&self, layer: usize) -> Result<f64> {
        if let Some(j) = &self.joint {
            return Ok(j.lambda_gamma);
        }
        self.layers
            .get(&layer)
            .map(|p| p.lambda_gamma())
            .ok_or_else(|| Error::State(format!("no projector for layer {layer}")))
    }
}

/// Builds the projector cache for a curvature model at energy threshold
/// `gamma`.
///
/// Dense models (exact Hessian, GNH) get per-layer projectors from their
/// diagonal blocks, or one joint projector over all tracked parameters when
/// `joint` is set. K-FAC and EK-FAC build factored projectors from the
/// factor eigenbases; activation covariance masks input eigendirections
/// only. Negative dense eigenvalues are treated as flat (clamped to zero)
/// before the energy rule.
pub fn build_projector(
    model: &CurvatureModel,
    net: &FeedForwardNet,
    gamma: f64,
    joint: bool,
) -> Result<ProjectorCache> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::validation(
            "gamma",
            format!("must lie in (0, 1), got {gamma}"),
        ));
    }
    let built_at = SystemTime::now();
    let mut layers = BTreeMap::new();
    let mut joint_proj = None;

    match model {
        CurvatureModel::ExactHessian(d) | CurvatureModel::Gnh(d) => {
            for sh in &d.layout {
                net.shape_of(sh.index)?;
            }
            if joint {
                let eig = sym_eig(&d.matrix)?;
                let spectrum = eig.lambda.mapv(|l| l.max(0.0));
                let k = energy_cutoff_index(&spectrum, gamma)?;
                let p = dense_projector(&eig, k)?;
                let (lambda_gamma, retained_energy) = dense_cutoff_stats(&spectrum, k);
                joint_proj = Some(JointProjector {
                    p,
                    layout: d.layout.clone(),
                    lambda_gamma,
                    retained_energy,
                    removed_rank: k,
                });
            } else {
                for sh in &d.layout {
                    let range = d.range_of(sh.index)?;
                    let block = d
                        .matrix
                        .slice(ndarray::s![range.clone(), range])
                        .to_owned();
                    let eig = sym_eig(&block)?;
                    let spectrum = eig.lambda.mapv(|l| l.max(0.0));
                    let k = energy_cutoff_index(&spectrum, gamma)?;
                    let p = dense_projector(&eig, k)?;
                    let (lambda_gamma, retained_energy) = dense_cutoff_stats(&spectrum, k);
                    layers.insert(
                        sh.index,
                        LayerProjector::Dense {
                            p,
                            lambda_gamma,
                            retained_energy,
                            removed_rank: k,
                        },
                    );
                }
            }
        }
        CurvatureModel::Kfac(factors) => {
            for (&l, fac) in &factors.layers {
                let sh = net.shape_of(l)?;
                if fac.a.nrows() != sh.d_in || fac.s.nrows() != sh.d_out {
                    return Err(Error::dim(format!(
                        "factor shapes for layer {l} do not match the network"
                    )));
                }
                let ein = sym_eig(&fac.a)?;
                let eout = sym_eig(&fac.s)?;
                let spec = KronSpectrum::new(eout.lambda.clone(), ein.lambda.clone());
                let cut = kron_energy_cutoff(&spec, gamma)?;
                layers.insert(
                    l,
                    LayerProjector::Factored {
                        u_in: ein.u,
                        u_out: eout.u,
                        lambda_in: ein.lambda,
                        lambda_out: eout.lambda,
                        mask: cut.mask,
                        lambda_gamma: cut.lambda_gamma,
                        retained_energy: cut.retained_energy,
                        removed_rank: cut.removed_rank,
                    },
                );
            }
        }
        CurvatureModel::Ekfac { corrections, .. } => {
            for (&l, corr) in corrections {
                let sh = net.shape_of(l)?;
                if corr.u_in.nrows() != sh.d_in || corr.u_out.nrows() != sh.d_out {
                    return Err(Error::dim(format!(
                        "eigenbasis shapes for layer {l} do not match the network"
                    )));
                }
                // The corrected diagonal is the spectrum in the Kronecker
                // eigenbasis; apply the energy rule to it directly.
                let mut grid: Vec<f64> = corr.lambda_star.iter().copied().collect();
                grid.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let sorted = Array1::from(grid);
                let k = energy_cutoff_index(&sorted, gamma)?;
                let (lambda_gamma, retained_energy) = dense_cutoff_stats(&sorted, k);
                let mask = corr
                    .lambda_star
                    .mapv(|v| if v <= lambda_gamma { 1.0 } else { 0.0 });
                layers.insert(
                    l,
                    LayerProjector::Factored {
                        u_in: corr.u_in.clone(),
                        u_out: corr.u_out.clone(),
                        lambda_in: Array1::zeros(sh.d_in),
                        lambda_out: Array1::zeros(sh.d_out),
                        mask,
                        lambda_gamma,
                        retained_energy,
                        removed_rank: k,
                    },
                );
            }
        }
        CurvatureModel::ActivationCov {
            layers: cov_layers, ..
        } => {
            for (&l, a) in cov_layers {
                let sh = net.shape_of(l)?;
                if a.nrows() != sh.d_in {
                    return Err(Error::dim(format!(
                        "covariance for layer {l} is {}x{}, layer input width is {}",
                        a.nrows(),
                        a.ncols(),
                        sh.d_in
                    )));
                }
                let ein = sym_eig(a)?;
                let k = energy_cutoff_index(&ein.lambda, gamma)?;
                let (lambda_gamma, retained_energy) = dense_cutoff_stats(&ein.lambda, k);
                let mut mask = Array2::<f64>::zeros((sh.d_out, sh.d_in));
                for j in 0..sh.d_in {
                    if ein.lambda[j] <= lambda_gamma {
                        mask.column_mut(j).fill(1.0);
                    }
                }
                layers.insert(
                    l,
                    LayerProjector::Factored {
                        u_in: ein.u,
                        u_out: Array2::eye(sh.d_out),
                        lambda_in: ein.lambda,
                        lambda_out: Array1::ones(sh.d_out),
                        mask,
                        lambda_gamma,
                        retained_energy,
                        removed_rank: k,
                    },
                );
            }
        }
    }

    Ok(ProjectorCache {
        gamma,
        layers,
        joint: joint_proj,
        built_at,
    })
}

fn dense_cutoff_stats(spectrum: &Array1<f64>, k: usize) -> (f64, f64) {
    let total: f64 = spectrum.sum();
    let lambda_gamma = if k == spectrum.len() {
        f64::NEG_INFINITY
    } else {
        spectrum[k]
    };
    let retained = if total > 0.0 {
        spectrum.iter().take(k).sum::<f64>() / total
    } else {
        0.0
    };
    (lambda_gamma, retained)
}

/// Applies a dense per-layer projector: flatten column-major, multiply,
/// reshape.
pub fn project_dense(cache: &ProjectorCache, layer: usize, q: &Array2<f64>) -> Result<Array2<f64>> {
    match cache.layers.get(&layer) {
        Some(LayerProjector::Dense { p, .. }) => {
            let flat = flatten_colmajor(q);
            if flat.len() != p.nrows() {
                return Err(Error::dim(format!(
                    "gradient for layer {layer} has {} entries, projector is {}x{}",
                    flat.len(),
                    p.nrows(),
                    p.ncols()
                )));
            }
            let projected = p.dot(&flat);
            unflatten_colmajor(&projected.view(), q.nrows(), q.ncols())
        }
        Some(LayerProjector::Factored { .. }) => Err(Error::State(format!(
            "layer {layer} holds a factored projector; use project_kron"
        ))),
        None => Err(Error::State(format!("no projector for layer {layer}"))),
    }
}

/// Matrix-free projection through the factor eigenbases:
/// `U_out ((U_out^T Q U_in) .* M) U_in^T`.
pub fn project_kron(cache: &ProjectorCache, layer: usize, q: &Array2<f64>) -> Result<Array2<f64>> {
    match cache.layers.get(&layer) {
        Some(LayerProjector::Factored {
            u_in, u_out, mask, ..
        }) => {
            if q.nrows() != u_out.nrows() || q.ncols() != u_in.nrows() {
                return Err(Error::dim(format!(
                    "gradient for layer {layer} is {:?}, bases expect {}x{}",
                    q.dim(),
                    u_out.nrows(),
                    u_in.nrows()
                )));
            }
            let rotated = u_out.t().dot(q).dot(u_in);
            let masked = &rotated * mask;
            Ok(u_out.dot(&masked).dot(&u_in.t()))
        }
        Some(LayerProjector::Dense { .. }) => Err(Error::State(format!(
            "layer {layer} holds a dense projector; use project_dense"
        ))),
        None => Err(Error::State(format!("no projector for layer {layer}"))),
    }
}

/// Projects one layer's gradient with whichever variant the cache holds.
pub fn project_layer(cache: &ProjectorCache, layer: usize, q: &Array2<f64>) -> Result<Array2<f64>> {
    match cache.layers.get(&layer) {
        Some(LayerProjector::Dense { .. }) => project_dense(cache, layer, q),
        Some(LayerProjector::Factored { .. }) => project_kron(cache, layer, q),
        None => Err(Error::State(format!("no projector for layer {layer}"))),
    }
}

/// Projects the concatenated tracked-layer gradients with the joint dense
/// projector.
pub fn project_joint(
    cache: &ProjectorCache,
    grads: &BTreeMap<usize, Array2<f64>>,
) -> Result<BTreeMap<usize, Array2<f64>>> {
    let joint = cache
        .joint
        .as_ref()
        .ok_or_else(|| Error::State("cache holds no joint projector".to_string()))?;
    let mut flat = Vec::new();
    for sh in &joint.layout {
        let g = grads.get(&sh.index).ok_or_else(|| {
            Error::dim(format!("missing gradient for tracked layer {}", sh.index))
        })?;
        if g.dim() != (sh.d_out, sh.d_in) {
            return Err(Error::dim(format!(
                "gradient for layer {} is {:?}, expected {}x{}",
                sh.index,
                g.dim(),
                sh.d_out,
                sh.d_in
            )));
        }
        crate::network::push_colmajor(g, &mut flat);
    }
    let v = Array1::from(flat);
    let projected = joint.p.dot(&v);
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for sh in &joint.layout {
        let len = sh.param_count();
        let slice = projected.slice(ndarray::s![offset..offset + len]);
        out.insert(
            sh.index,
            unflatten_colmajor(&slice, sh.d_out, sh.d_in)?,
        );
        offset += len;
    }
    Ok(out)
}

/// Retained-energy fraction and removed rank for a tracked layer (the joint
/// figures when the cache is joint).
pub fn residual_energy(cache: &ProjectorCache, layer: usize) -> Result<(f64, usize)> {
    if let Some(j) = &cache.joint {
        return Ok((j.retained_energy, j.removed_rank));
    }
    cache
        .layers
        .get(&layer)
        .map(|p| p.diagnostics())
        .ok_or_else(|| Error::State(format!("no projector for layer {layer}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{
        activation_covariance, exact_gnh, kfac_estimate, CurvatureModel, KfacFactors,
    };
    use crate::harness::data::{LabeledDataset, Provenance};
    use crate::network::{Activation, FeedForwardNet};
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(widths: &[usize], acts: &[Activation], seed: u64) -> FeedForwardNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeedForwardNet::random(widths, acts, &mut rng).unwrap()
    }

    fn random_dataset(net: &FeedForwardNet, n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = ndarray::Array2::<f64>::zeros((n, net.input_dim()));
        for v in inputs.iter_mut() {
            *v = rng.random::<f64>();
        }
        let labels = (0..n).map(|i| i % net.class_count()).collect();
        LabeledDataset::new(inputs, labels, net.class_count(), Provenance::Synthetic).unwrap()
    }

    fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (am, an) = a.dim();
        let (bm, bn) = b.dim();
        let mut out = Array2::<f64>::zeros((am * bm, an * bn));
        for i in 0..am {
            for j in 0..an {
                for k in 0..bm {
                    for l in 0..bn {
                        out[[i * bm + k, j * bn + l]] = a[[i, j]] * b[[k, l]];
                    }
                }
            }
        }
        out
    }

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut b = Array2::<f64>::zeros((n, n + 2));
        for v in b.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let m = b.dot(&b.t());
        &m / n as f64
    }

    #[test]
    fn zero_curvature_gives_identity_projector() {
        let net = random_net(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], 1);
        let zero = CurvatureModel::Kfac(KfacFactors::zeros(&net.layer_shapes()));
        let cache = build_projector(&zero, &net, 0.9, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for l in 0..2 {
            let sh = net.shape_of(l).unwrap();
            let mut q = Array2::<f64>::zeros((sh.d_out, sh.d_in));
            for v in q.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let out = project_kron(&cache, l, &q).unwrap();
            let diff = (&out - &q).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            assert!(diff <= 1e-10, "layer {l}: {diff}");
            let (retained, removed) = residual_energy(&cache, l).unwrap();
            assert_eq!(retained, 0.0);
            assert_eq!(removed, 0);
        }
    }

    #[test]
    fn tiny_gamma_removes_single_top_direction() {
        let net = random_net(&[4, 3], &[Activation::Identity], 3);
        let data = random_dataset(&net, 12, 1);
        let model = exact_gnh(&net, &data, &[0]).unwrap();
        let cache = build_projector(&model, &net, 1e-9, false).unwrap();
        let (_, removed) = residual_energy(&cache, 0).unwrap();
        assert_eq!(removed, 1);
    }

    #[test]
    fn gamma_rejected_outside_unit_interval() {
        let net = random_net(&[3, 2], &[Activation::Identity], 4);
        let data = random_dataset(&net, 4, 2);
        let model = exact_gnh(&net, &data, &[0]).unwrap();
        assert!(build_projector(&model, &net, 0.0, false).is_err());
        assert!(build_projector(&model, &net, 1.5, false).is_err());
    }

    #[test]
    fn kfac_factored_matches_materialized_kronecker_block() {
        // 4x3 layer: a [2 -> 4] net has layer 0 of shape 4 x 3.
        let net = random_net(&[2, 4], &[Activation::Identity], 5);
        let data = random_dataset(&net, 10, 3);
        let factors = kfac_estimate(&net, &data, &[0], 1, 7, false).unwrap();
        let model = CurvatureModel::Kfac(factors.clone());
        let gamma = 0.8;
        let cache = build_projector(&model, &net, gamma, false).unwrap();

        let fac = &factors.layers[&0];
        let block = kron(&fac.a, &fac.s);
        let eig = sym_eig(&block).unwrap();
        let k = energy_cutoff_index(&eig.lambda, gamma).unwrap();
        let p_dense = dense_projector(&eig, k).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut q = Array2::<f64>::zeros((4, 3));
        for v in q.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let via_kron = project_kron(&cache, 0, &q).unwrap();
        let flat = flatten_colmajor(&q);
        let via_dense = unflatten_colmajor(&p_dense.dot(&flat).view(), 4, 3).unwrap();
        let diff = (&via_kron - &via_dense)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(diff <= 1e-9, "max abs diff {diff}");
    }

    #[test]
    fn mask_extremes() {
        let net = random_net(&[2, 3], &[Activation::Identity], 6);
        let data = random_dataset(&net, 6, 4);
        let factors = kfac_estimate(&net, &data, &[0], 1, 9, false).unwrap();
        let model = CurvatureModel::Kfac(factors);
        let cache = build_projector(&model, &net, 0.5, false).unwrap();
        let (u_in, u_out) = match &cache.layers[&0] {
            LayerProjector::Factored { u_in, u_out, .. } => (u_in.clone(), u_out.clone()),
            _ => unreachable!(),
        };
        let mut ones_cache = cache.clone();
        let mut zeros_cache = cache.clone();
        if let Some(LayerProjector::Factored { mask, .. }) = ones_cache.layers.get_mut(&0) {
            mask.fill(1.0);
        }
        if let Some(LayerProjector::Factored { mask, .. }) = zeros_cache.layers.get_mut(&0) {
            mask.fill(0.0);
        }
        let q = array![[0.3, -0.5, 0.2], [1.0, 0.0, -0.2], [0.4, 0.4, 0.4]];
        let kept = project_kron(&ones_cache, 0, &q).unwrap();
        let dropped = project_kron(&zeros_cache, 0, &q).unwrap();
        let diff = (&kept - &q).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(diff <= 1e-12, "all-ones mask changed the gradient by {diff}");
        assert!(dropped.iter().all(|v| v.abs() < 1e-15));
        let _ = (u_in, u_out);
    }

    #[test]
    fn dense_projection_spans() {
        let net = random_net(&[3, 2], &[Activation::Identity], 7);
        let data = random_dataset(&net, 10, 5);
        let model = exact_gnh(&net, &data, &[0]).unwrap();
        let cache = build_projector(&model, &net, 0.7, false).unwrap();
        let (p, removed) = match &cache.layers[&0] {
            LayerProjector::Dense {
                p, removed_rank, ..
            } => (p.clone(), *removed_rank),
            _ => unreachable!(),
        };
        let dense = match &model {
            CurvatureModel::Gnh(d) => d,
            _ => unreachable!(),
        };
        let eig = sym_eig(&dense.matrix).unwrap();
        let sh = net.shape_of(0).unwrap();

        // A gradient inside the retained (high-curvature) span projects to
        // zero; one inside the nullspace span is untouched.
        for col in 0..eig.dim() {
            let dir = eig.u.column(col).to_owned();
            let q = unflatten_colmajor(&dir.view(), sh.d_out, sh.d_in).unwrap();
            let out = project_dense(&cache, 0, &q).unwrap();
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if col < removed {
                assert!(norm <= 1e-10, "retained direction {col} leaked {norm}");
            } else {
                let diff = (&out - &q).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
                assert!(diff <= 1e-10, "nullspace direction {col} moved by {diff}");
            }
        }

        // Non-expansive on random gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut q = Array2::<f64>::zeros((sh.d_out, sh.d_in));
            for v in q.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let out = project_dense(&cache, 0, &q).unwrap();
            let no = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(no <= nq + 1e-12);
        }
        let _ = p;
    }

    #[test]
    fn projector_idempotent_and_symmetric_by_probing() {
        let net = random_net(&[3, 4, 2], &[Activation::Gelu, Activation::Identity], 9);
        let data = random_dataset(&net, 8, 6);
        let models: Vec<CurvatureModel> = vec![
            exact_gnh(&net, &data, &[0, 1]).unwrap(),
            CurvatureModel::Kfac(kfac_estimate(&net, &data, &[0, 1], 1, 3, false).unwrap()),
            activation_covariance(&net, &data, &[0, 1]).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for model in &models {
            let cache = build_projector(model, &net, 0.85, false).unwrap();
            for l in 0..2 {
                let sh = net.shape_of(l).unwrap();
                let mut u = Array2::<f64>::zeros((sh.d_out, sh.d_in));
                let mut v = Array2::<f64>::zeros((sh.d_out, sh.d_in));
                for x in u.iter_mut().chain(v.iter_mut()) {
                    *x = rng.random_range(-1.0..1.0);
                }
                let pu = project_layer(&cache, l, &u).unwrap();
                let pv = project_layer(&cache, l, &v).unwrap();
                let ppv = project_layer(&cache, l, &pv).unwrap();
                let idem = (&ppv - &pv).iter().map(|x| x.abs()).fold(0.0f64, f64::max);
                assert!(idem <= 1e-9, "{:?} layer {l}: idempotence {idem}", model.kind());
                let sym = ((&u * &pv).sum() - (&pu * &v).sum()).abs();
                assert!(sym <= 1e-9, "{:?} layer {l}: symmetry {sym}", model.kind());
            }
        }
    }

    #[test]
    fn joint_projector_applies_across_layers() {
        let net = random_net(&[3, 3, 2], &[Activation::Tanh, Activation::Identity], 10);
        let data = random_dataset(&net, 8, 7);
        let model = exact_gnh(&net, &data, &[0, 1]).unwrap();
        let cache = build_projector(&model, &net, 0.8, true).unwrap();
        assert!(cache.joint.is_some());
        let mut grads = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for l in 0..2 {
            let sh = net.shape_of(l).unwrap();
            let mut q = Array2::<f64>::zeros((sh.d_out, sh.d_in));
            for v in q.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            grads.insert(l, q);
        }
        let out = project_joint(&cache, &grads).unwrap();
        let again = project_joint(&cache, &out).unwrap();
        for l in 0..2 {
            let diff = (&again[&l] - &out[&l])
                .iter()
                .map(|v| v.abs())
                .fold(0.0f64, f64::max);
            assert!(diff <= 1e-9);
        }
    }

    #[test]
    fn matrix_free_matches_materialized_for_random_masks() {
        // Matrix-free rotate-mask-rotate equals the materialized projector
        // built from the same eigenpair subset, for arbitrary masks.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for trial in 0..10 {
            let d_in = rng.random_range(2..=6);
            let d_out = rng.random_range(2..=6);
            let a = random_psd(d_in, &mut rng);
            let s = random_psd(d_out, &mut rng);
            let ein = sym_eig(&a).unwrap();
            let eout = sym_eig(&s).unwrap();
            let mut mask = Array2::<f64>::zeros((d_out, d_in));
            for v in mask.iter_mut() {
                *v = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            }

            // Dense side: sum of outer products over masked eigenpairs of
            // A (x) S acting on vec(Q).
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
            let rotated = eout.u.t().dot(&q).dot(&ein.u);
            let matrix_free = eout.u.dot(&(&rotated * &mask)).dot(&ein.u.t());
            let flat = flatten_colmajor(&q);
            let dense = unflatten_colmajor(&p_dense.dot(&flat).view(), d_out, d_in).unwrap();
            let diff = (&matrix_free - &dense)
                .iter()
                .map(|v| v.abs())
                .fold(0.0f64, f64::max);
            assert!(diff <= 1e-9, "trial {trial}: max abs diff {diff}");
        }
    }

    #[test]
    fn actcov_projected_updates_annihilate_activations() {
        let net = random_net(&[5, 4, 2], &[Activation::Tanh, Activation::Identity], 15);
        let data = random_dataset(&net, 3, 9);
        let model = activation_covariance(&net, &data, &[0]).unwrap();
        // gamma close to 1 retains the whole activation row space.
        let cache = build_projector(&model, &net, 1.0 - 1e-9, false).unwrap();
        let sh = net.shape_of(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let mut dw = Array2::<f64>::zeros((sh.d_out, sh.d_in));
            for v in dw.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let proj = project_kron(&cache, 0, &dw).unwrap();
            let pn = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..data.len() {
                let (x, _) = data.example(i);
                let trace = net.forward(&x).unwrap();
                let a = &trace.activations[0];
                let an = a.dot(a).sqrt();
                let out = proj.dot(a);
                let on = out.dot(&out).sqrt();
                assert!(on <= 1e-8 * pn.max(1e-12) * an, "|dW a| = {on}");
            }
        }
    }

    #[test]
    fn actcov_full_rank_blocks_all_updates() {
        // More generic examples than input dimensions: the activation span
        // is full, and a near-1 threshold leaves no room to move.
        let net = random_net(&[3, 2], &[Activation::Identity], 17);
        let data = random_dataset(&net, 20, 10);
        let model = activation_covariance(&net, &data, &[0]).unwrap();
        let cache = build_projector(&model, &net, 1.0 - 1e-12, false).unwrap();
        let sh = net.shape_of(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut dw = Array2::<f64>::zeros((sh.d_out, sh.d_in));
        for v in dw.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let proj = project_kron(&cache, 0, &dw).unwrap();
        assert!(proj.iter().all(|v| v.abs() < 1e-9), "projector not zero");
    }

    #[test]
    fn residual_energy_matches_hand_enumerated_cutoff() {
        // Factors with eigenvalues {2, 1} and {3, 1}: products {6, 3, 2, 1},
        // gamma = 0.7 retains {6, 3}.
        let net = random_net(&[1, 2], &[Activation::Identity], 21);
        let factors = KfacFactors {
            layers: [(
                0usize,
                crate::curvature::LayerFactors {
                    a: Array2::from_diag(&array![3.0, 1.0]),
                    s: Array2::from_diag(&array![2.0, 1.0]),
                },
            )]
            .into_iter()
            .collect(),
            sample_count: 1,
        };
        let cache =
            build_projector(&CurvatureModel::Kfac(factors), &net, 0.7, false).unwrap();
        let (retained, removed) = residual_energy(&cache, 0).unwrap();
        assert!((retained - 0.75).abs() < 1e-12);
        assert_eq!(removed, 2);
        assert!((cache.lambda_gamma(0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn variant_mismatch_is_state_error() {
        let net = random_net(&[3, 2], &[Activation::Identity], 19);
        let data = random_dataset(&net, 6, 11);
        let dense_model = exact_gnh(&net, &data, &[0]).unwrap();
        let cache = build_projector(&dense_model, &net, 0.5, false).unwrap();
        let q = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            project_kron(&cache, 0, &q),
            Err(Error::State(_))
        ));
        let factors = kfac_estimate(&net, &data, &[0], 1, 1, false).unwrap();
        let cache = build_projector(&CurvatureModel::Kfac(factors), &net, 0.5, false).unwrap();
        assert!(matches!(
            project_dense(&cache, 0, &q),
            Err(Error::State(_))
        ));
    }
}
