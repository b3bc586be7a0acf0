//! Capability-loss curvature models: exact Hessian, exact Gauss-Newton
//! Hessian, K-FAC and EK-FAC factor estimates, layer-input activation
//! covariances, Bregman divergence evaluation, streaming factor
//! aggregation, and the binary curvature cache.
//!
//! Pseudo-gradient labels are sampled from the model's predictive
//! distribution by default (the sampled rather than empirical Fisher); an
//! empirical toggle exists for ablation. Each example gets its own RNG
//! stream derived from a content hash of its features and label, so factor
//! estimates are invariant to how a dataset is chunked - computing factors
//! chunk by chunk and merging matches the one-shot estimate bit for bit up
//! to the averaging arithmetic.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::harness::data::LabeledDataset;
use crate::linalg::sym_eig;
use crate::network::{
    flatten_colmajor, FeedForwardNet, LayerGradients, LayerShape,
};

/// Hard cap on tracked parameters for the explicit Hessian.
pub const HESSIAN_PARAM_GUARD: usize = 5_000;
/// Hard cap on tracked parameters for the explicit Gauss-Newton Hessian.
pub const GNH_PARAM_GUARD: usize = 20_000;

/// Curvature model families selectable from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureKind {
    Hessian,
    Gnh,
    Kfac,
    Ekfac,
    ActCov,
    /// Zero curvature: identity projector, plain fine-tuning.
    None,
}

impl CurvatureKind {
    pub fn name(self) -> &'static str {
        match self {
            CurvatureKind::Hessian => "hessian",
            CurvatureKind::Gnh => "gnh",
            CurvatureKind::Kfac => "kfac",
            CurvatureKind::Ekfac => "ekfac",
            CurvatureKind::ActCov => "actcov",
            CurvatureKind::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "hessian" => Ok(CurvatureKind::Hessian),
            "gnh" => Ok(CurvatureKind::Gnh),
            "kfac" => Ok(CurvatureKind::Kfac),
            "ekfac" => Ok(CurvatureKind::Ekfac),
            "actcov" => Ok(CurvatureKind::ActCov),
            "none" => Ok(CurvatureKind::None),
            other => Err(Error::validation(
                "curvature",
                format!("unknown curvature kind '{other}'"),
            )),
        }
    }
}

/// Kronecker factors for a set of tracked layers.
#[derive(Debug, Clone)]
pub struct KfacFactors {
    /// Per tracked layer: uncentered input-activation covariance `A`
    /// (`d_in x d_in`, bias column included) and preactivation
    /// pseudo-gradient covariance `S` (`d_out x d_out`).
    pub layers: BTreeMap<usize, LayerFactors>,
    /// Number of (example, MC-label) pairs averaged into the factors.
    pub sample_count: u64,
}

#[derive(Debug, Clone)]
pub struct LayerFactors {
    pub a: Array2<f64>,
    pub s: Array2<f64>,
}

impl KfacFactors {
    /// Zero factors over the given layer shapes; a zero curvature model
    /// constrains nothing, so its projector is the identity.
    pub fn zeros(shapes: &[LayerShape]) -> Self {
        let mut layers = BTreeMap::new();
        for sh in shapes {
            layers.insert(
                sh.index,
                LayerFactors {
                    a: Array2::zeros((sh.d_in, sh.d_in)),
                    s: Array2::zeros((sh.d_out, sh.d_out)),
                },
            );
        }
        KfacFactors {
            layers,
            sample_count: 0,
        }
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }
}

/// EK-FAC per-layer correction: the factor eigenbases plus the corrected
/// diagonal in that basis.
#[derive(Debug, Clone)]
pub struct EkfacLayer {
    /// Eigenbasis of `A` (input side), columns in descending eigenvalue order.
    pub u_in: Array2<f64>,
    /// Eigenbasis of `S` (output side).
    pub u_out: Array2<f64>,
    /// `d_out x d_in` corrected eigenvalues `E[((U_out^T g a^T U_in)_ij)^2]`.
    pub lambda_star: Array2<f64>,
}

/// A dense curvature matrix over the tracked layers' concatenated
/// parameters, with the layout needed to map layers to index ranges.
#[derive(Debug, Clone)]
pub struct DenseCurvature {
    pub matrix: Array2<f64>,
    /// Tracked layer shapes in ascending layer order.
    pub layout: Vec<LayerShape>,
}

impl DenseCurvature {
    /// Flat index range of a tracked layer inside the matrix.
    pub fn range_of(&self, layer: usize) -> Result<std::ops::Range<usize>> {
        let mut offset = 0;
        for sh in &self.layout {
            let len = sh.param_count();
            if sh.index == layer {
                return Ok(offset..offset + len);
            }
            offset += len;
        }
        Err(Error::State(format!(
            "layer {layer} is not part of this curvature model"
        )))
    }

    pub fn dim(&self) -> usize {
        self.layout.iter().map(|s| s.param_count()).sum()
    }
}

/// Tagged union over every curvature family.
#[derive(Debug, Clone)]
pub enum CurvatureModel {
    ExactHessian(DenseCurvature),
    Gnh(DenseCurvature),
    Kfac(KfacFactors),
    Ekfac {
        factors: KfacFactors,
        corrections: BTreeMap<usize, EkfacLayer>,
    },
    ActivationCov {
        /// Per tracked layer: uncentered input-activation covariance.
        layers: BTreeMap<usize, Array2<f64>>,
        sample_count: u64,
    },
}

impl CurvatureModel {
    pub fn kind(&self) -> CurvatureKind {
        match self {
            CurvatureModel::ExactHessian(_) => CurvatureKind::Hessian,
            CurvatureModel::Gnh(_) => CurvatureKind::Gnh,
            CurvatureModel::Kfac(_) => CurvatureKind::Kfac,
            CurvatureModel::Ekfac { .. } => CurvatureKind::Ekfac,
            CurvatureModel::ActivationCov { .. } => CurvatureKind::ActCov,
        }
    }

    /// Tracked layer indices, ascending.
    pub fn tracked_layers(&self) -> Vec<usize> {
        match self {
            CurvatureModel::ExactHessian(d) | CurvatureModel::Gnh(d) => {
                d.layout.iter().map(|s| s.index).collect()
            }
            CurvatureModel::Kfac(f) => f.layer_indices(),
            CurvatureModel::Ekfac { factors, .. } => factors.layer_indices(),
            CurvatureModel::ActivationCov { layers, .. } => layers.keys().copied().collect(),
        }
    }
}

/// Report from one Bregman divergence evaluation.
#[derive(Debug, Clone)]
pub struct BregmanReport {
    /// Mean Bregman divergence over the dataset; nonnegative for
    /// cross-entropy up to a small numerical floor.
    pub value: f64,
    /// `0.5 * delta^T C delta` under the supplied curvature model.
    pub quadratic_estimate: Option<f64>,
    /// `|value - quadratic_estimate| / max(value, floor)`.
    pub relative_gap: Option<f64>,
}

fn validate_layers(net: &FeedForwardNet, layers: &[usize]) -> Result<Vec<LayerShape>> {
    if layers.is_empty() {
        return Err(Error::validation("layers", "no tracked layers given"));
    }
    let mut shapes = Vec::with_capacity(layers.len());
    for w in layers.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::validation(
                "layers",
                "tracked layer indices must be strictly ascending",
            ));
        }
    }
    for &l in layers {
        shapes.push(net.shape_of(l)?);
    }
    Ok(shapes)
}

fn tracked_param_count(shapes: &[LayerShape]) -> usize {
    shapes.iter().map(|s| s.param_count()).sum()
}

/// Deterministic per-example RNG stream: a content hash of the features and
/// label mixed into the base seed. Chunking a dataset does not change the
/// stream an example sees.
pub(crate) fn example_rng(base_seed: u64, x: &ArrayView1<f64>, y: usize) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for v in x.iter() {
        for b in v.to_le_bytes() {
            mix(b);
        }
    }
    for b in (y as u64).to_le_bytes() {
        mix(b);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(base_seed ^ h))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hessian of cross-entropy with respect to the logits: `diag(p) - p p^T`.
pub fn softmax_hessian(probs: &Array1<f64>) -> Array2<f64> {
    let m = probs.len();
    let mut h = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            h[[i, j]] = if i == j {
                probs[i] * (1.0 - probs[i])
            } else {
                -probs[i] * probs[j]
            };
        }
    }
    h
}

/// Explicit capability-loss Hessian over the tracked layers, assembled
/// column by column from Hessian-vector products against standard basis
/// vectors and symmetrized as `(H + H^T) / 2`.
pub fn exact_hessian(
    net: &FeedForwardNet,
    cap_data: &LabeledDataset,
    layers: &[usize],
) -> Result<CurvatureModel> {
    let shapes = validate_layers(net, layers)?;
    let p_tracked = tracked_param_count(&shapes);
    if p_tracked > HESSIAN_PARAM_GUARD {
        return Err(Error::Size {
            what: "tracked parameters for the explicit Hessian".to_string(),
            got: p_tracked,
            limit: HESSIAN_PARAM_GUARD,
        });
    }
    if cap_data.is_empty() {
        return Err(Error::validation("cap_data", "empty dataset"));
    }
    let raw = assemble_hessian_columns(net, cap_data, &shapes)?;
    let matrix = 0.5 * (&raw + &raw.t());
    Ok(CurvatureModel::ExactHessian(DenseCurvature {
        matrix,
        layout: shapes,
    }))
}

/// Raw (unsymmetrized) Hessian columns over tracked layers. Exposed for the
/// symmetry diagnostics in the verification suite.
pub fn assemble_hessian_columns(
    net: &FeedForwardNet,
    cap_data: &LabeledDataset,
    shapes: &[LayerShape],
) -> Result<Array2<f64>> {
    let p_full = net.param_count();
    let all_shapes = net.layer_shapes();
    let mut full_offsets = BTreeMap::new();
    let mut offset = 0;
    for sh in &all_shapes {
        full_offsets.insert(sh.index, offset);
        offset += sh.param_count();
    }

    let p_tracked = tracked_param_count(shapes);
    let mut tracked_slots = Vec::with_capacity(p_tracked);
    for sh in shapes {
        let base = full_offsets[&sh.index];
        for k in 0..sh.param_count() {
            tracked_slots.push(base + k);
        }
    }

    let mut h = Array2::<f64>::zeros((p_tracked, p_tracked));
    let mut v = Array1::<f64>::zeros(p_full);
    for (col, &slot) in tracked_slots.iter().enumerate() {
        v[slot] = 1.0;
        let hv = net.hessian_vector_product(cap_data, &v.view())?;
        v[slot] = 0.0;
        for (row, &rslot) in tracked_slots.iter().enumerate() {
            h[[row, col]] = hv[rslot];
        }
    }
    Ok(h)
}

/// Exact Gauss-Newton Hessian over the tracked layers:
/// the dataset mean of `J^T (diag(p) - p p^T) J` with `J` the logit
/// Jacobian restricted to tracked parameters.
pub fn exact_gnh(
    net: &FeedForwardNet,
    cap_data: &LabeledDataset,
    layers: &[usize],
) -> Result<CurvatureModel> {
    let shapes = validate_layers(net, layers)?;
    let p_tracked = tracked_param_count(&shapes);
    if p_tracked > GNH_PARAM_GUARD {
        return Err(Error::Size {
            what: "tracked parameters for the explicit GNH".to_string(),
            got: p_tracked,
            limit: GNH_PARAM_GUARD,
        });
    }
    if cap_data.is_empty() {
        return Err(Error::validation("cap_data", "empty dataset"));
    }
    let m = net.class_count();
    // Accumulate in blocks of examples so the contraction runs as one
    // well-shaped matrix product per block instead of a rank-m update per
    // example.
    let block_examples = (256 / m).max(1);
    let mut g = Array2::<f64>::zeros((p_tracked, p_tracked));
    let mut jac_block = Array2::<f64>::zeros((block_examples * m, p_tracked));
    let mut hj_block = Array2::<f64>::zeros((block_examples * m, p_tracked));
    let mut filled = 0usize;
    for i in 0..cap_data.len() {
        let (x, _) = cap_data.example(i);
        let trace = net.forward(&x)?;
        let per_logit = net.logit_gradients_for_layers(&trace, layers);
        let row0 = filled * m;
        for (r, grads) in per_logit.iter().enumerate() {
            let mut col = 0;
            for gmat in grads {
                let flat = flatten_colmajor(gmat);
                jac_block
                    .slice_mut(ndarray::s![row0 + r, col..col + flat.len()])
                    .assign(&flat);
                col += flat.len();
            }
        }
        let h_out = softmax_hessian(&trace.probs);
        let jac_rows = jac_block.slice(ndarray::s![row0..row0 + m, ..]);
        let hj = h_out.dot(&jac_rows);
        hj_block
            .slice_mut(ndarray::s![row0..row0 + m, ..])
            .assign(&hj);
        filled += 1;
        if filled == block_examples {
            let rows = filled * m;
            g = g + jac_block
                .slice(ndarray::s![..rows, ..])
                .t()
                .dot(&hj_block.slice(ndarray::s![..rows, ..]));
            filled = 0;
        }
    }
    if filled > 0 {
        let rows = filled * m;
        g = g + jac_block
            .slice(ndarray::s![..rows, ..])
            .t()
            .dot(&hj_block.slice(ndarray::s![..rows, ..]));
    }
    g.mapv_inplace(|v| v / cap_data.len() as f64);
    // The sum is symmetric up to rounding; make it exact.
    let g = 0.5 * (&g + &g.t());
    Ok(CurvatureModel::Gnh(DenseCurvature {
        matrix: g,
        layout: shapes,
    }))
}

/// K-FAC factor estimation: `A` is the mean outer product of layer inputs,
/// `S` the mean outer product of sampled-label preactivation
/// pseudo-gradients, both averaged over (example, MC-label) pairs.
///
/// With `empirical_labels` set, the dataset labels replace the sampled ones
/// (the empirical rather than sampled Fisher).
pub fn kfac_estimate(
    net: &FeedForwardNet,
    cap_data: &LabeledDataset,
    layers: &[usize],
    mc_samples_per_input: usize,
    seed: u64,
    empirical_labels: bool,
) -> Result<KfacFactors> {
    let shapes = validate_layers(net, layers)?;
    if cap_data.is_empty() {
        return Err(Error::validation("cap_data", "empty dataset"));
    }
    if mc_samples_per_input == 0 {
        return Err(Error::validation(
            "mc_samples",
            "need at least one MC sample per input",
        ));
    }
    let mut acc: BTreeMap<usize, LayerFactors> = shapes
        .iter()
        .map(|sh| {
            (
                sh.index,
                LayerFactors {
                    a: Array2::zeros((sh.d_in, sh.d_in)),
                    s: Array2::zeros((sh.d_out, sh.d_out)),
                },
            )
        })
        .collect();

    let mut pairs = 0u64;
    for i in 0..cap_data.len() {
        let (x, y) = cap_data.example(i);
        let trace = net.forward(&x)?;
        let mut rng = example_rng(seed, &x, y);
        for _ in 0..mc_samples_per_input {
            let pg = if empirical_labels {
                net.pseudo_gradient_for_label(&trace, y)
            } else {
                net.sample_pseudo_gradient(&trace, &mut rng)
            };
            for &l in layers {
                let fac = acc.get_mut(&l).unwrap();
                let a = &trace.activations[l];
                let g = &pg.preact_grads[l];
                accumulate_outer(&mut fac.a, a);
                accumulate_outer(&mut fac.s, g);
            }
            pairs += 1;
        }
    }
    let scale = 1.0 / pairs as f64;
    for fac in acc.values_mut() {
        fac.a.mapv_inplace(|v| v * scale);
        fac.s.mapv_inplace(|v| v * scale);
    }
    Ok(KfacFactors {
        layers: acc,
        sample_count: pairs,
    })
}

fn accumulate_outer(acc: &mut Array2<f64>, v: &Array1<f64>) {
    let n = v.len();
    for i in 0..n {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        for j in 0..n {
            acc[[i, j]] += vi * v[j];
        }
    }
}

/// Eigenvalue-corrected K-FAC: rotates per-pair rank-one gradients into the
/// factor eigenbases and averages their squared coordinates, yielding the
/// corrected diagonal `Lambda*` for each layer.
///
/// The MC labels are redrawn with the same per-example streams
/// [`kfac_estimate`] uses, so the correction sees exactly the pairs that
/// built the factors.
pub fn ekfac_correct(
    net: &FeedForwardNet,
    cap_data: &LabeledDataset,
    factors: &KfacFactors,
    mc_samples_per_input: usize,
    seed: u64,
    empirical_labels: bool,
) -> Result<CurvatureModel> {
    if factors.layers.is_empty() {
        return Err(Error::State(
            "ekfac_correct needs K-FAC factors with at least one layer".to_string(),
        ));
    }
    if cap_data.is_empty() {
        return Err(Error::validation("cap_data", "empty dataset"));
    }
    let layers: Vec<usize> = factors.layer_indices();
    for &l in &layers {
        let sh = net.shape_of(l)?;
        let fac = &factors.layers[&l];
        if fac.a.nrows() != sh.d_in || fac.s.nrows() != sh.d_out {
            return Err(Error::dim(format!(
                "factor shapes for layer {l} do not match the network"
            )));
        }
    }

    let mut bases: BTreeMap<usize, (Array2<f64>, Array2<f64>)> = BTreeMap::new();
    for &l in &layers {
        let fac = &factors.layers[&l];
        let ein = sym_eig(&fac.a)?;
        let eout = sym_eig(&fac.s)?;
        bases.insert(l, (ein.u, eout.u));
    }

    let mut lambda_star: BTreeMap<usize, Array2<f64>> = layers
        .iter()
        .map(|&l| {
            let sh = net.shape_of(l).unwrap();
            (l, Array2::<f64>::zeros((sh.d_out, sh.d_in)))
        })
        .collect();

    let mut pairs = 0u64;
    for i in 0..cap_data.len() {
        let (x, y) = cap_data.example(i);
        let trace = net.forward(&x)?;
        let mut rng = example_rng(seed, &x, y);
        for _ in 0..mc_samples_per_input.max(1) {
            let pg = if empirical_labels {
                net.pseudo_gradient_for_label(&trace, y)
            } else {
                net.sample_pseudo_gradient(&trace, &mut rng)
            };
            for &l in &layers {
                let (u_in, u_out) = &bases[&l];
                let a = &trace.activations[l];
                let g = &pg.preact_grads[l];
                // (U_out^T g a^T U_in)_ij = (U_out^T g)_i (U_in^T a)_j.
                let r = u_out.t().dot(g);
                let c = u_in.t().dot(a);
                let target = lambda_star.get_mut(&l).unwrap();
                for ii in 0..r.len() {
                    let r2 = r[ii] * r[ii];
                    if r2 == 0.0 {
                        continue;
                    }
                    for jj in 0..c.len() {
                        target[[ii, jj]] += r2 * c[jj] * c[jj];
                    }
                }
            }
            pairs += 1;
        }
    }
    let scale = 1.0 / pairs as f64;
    let mut corrections = BTreeMap::new();
    for &l in &layers {
        let (u_in, u_out) = bases.remove(&l).unwrap();
        let mut ls = lambda_star.remove(&l).unwrap();
        ls.mapv_inplace(|v| v * scale);
        corrections.insert(
            l,
            EkfacLayer {
                u_in,
                u_out,
                lambda_star: ls,
            },
        );
    }
    Ok(CurvatureModel::Ekfac {
        factors: factors.clone(),
        corrections,
    })
}

/// Layer-input activation covariances only; the output side is treated as
/// the identity, so the implied constraint is the nullspace of the stacked
/// activations.
pub fn activation_covariance(
    net: &FeedForwardNet,
    cap_data: &LabeledDataset,
    layers: &[usize],
) -> Result<CurvatureModel> {
    let shapes = validate_layers(net, layers)?;
    if cap_data.is_empty() {
        return Err(Error::validation("cap_data", "empty dataset"));
    }
    let mut acc: BTreeMap<usize, Array2<f64>> = shapes
        .iter()
        .map(|sh| (sh.index, Array2::<f64>::zeros((sh.d_in, sh.d_in))))
        .collect();
    for i in 0..cap_data.len() {
        let (x, _) = cap_data.example(i);
        let trace = net.forward(&x)?;
        for &l in layers {
            accumulate_outer(acc.get_mut(&l).unwrap(), &trace.activations[l]);
        }
    }
    let scale = 1.0 / cap_data.len() as f64;
    for a in acc.values_mut() {
        a.mapv_inplace(|v| v * scale);
    }
    Ok(CurvatureModel::ActivationCov {
        layers: acc,
        sample_count: cap_data.len() as u64,
    })
}

/// Sample-count-weighted merge of two factor estimates. An empty
/// accumulator yields the incoming factors unchanged.
pub fn aggregate_factors(acc: &KfacFactors, incoming: &KfacFactors) -> Result<KfacFactors> {
    if acc.sample_count == 0 {
        return Ok(incoming.clone());
    }
    if incoming.sample_count == 0 {
        return Ok(acc.clone());
    }
    if acc.layer_indices() != incoming.layer_indices() {
        return Err(Error::validation(
            "factors",
            "layer sets of the two factor estimates differ",
        ));
    }
    let na = acc.sample_count as f64;
    let nb = incoming.sample_count as f64;
    let total = na + nb;
    let mut layers = BTreeMap::new();
    for (&l, fa) in &acc.layers {
        let fb = &incoming.layers[&l];
        if fa.a.dim() != fb.a.dim() || fa.s.dim() != fb.s.dim() {
            return Err(Error::dim(format!(
                "factor shapes for layer {l} do not match"
            )));
        }
        layers.insert(
            l,
            LayerFactors {
                a: (&fa.a * na + &fb.a * nb) / total,
                s: (&fa.s * na + &fb.s * nb) / total,
            },
        );
    }
    Ok(KfacFactors {
        layers,
        sample_count: acc.sample_count + incoming.sample_count,
    })
}

const BREGMAN_FLOOR: f64 = 1e-30;

/// Mean Bregman divergence of the loss between two parameter settings of
/// the same architecture, with an optional quadratic estimate under a
/// curvature model.
///
/// Per example: `l(f(x), y) - l(f0(x), y) - <dl(f0(x), y), f(x) - f0(x)>`
/// with the inner product over logits.
pub fn bregman_divergence(
    net: &FeedForwardNet,
    net0: &FeedForwardNet,
    data: &LabeledDataset,
    model: Option<&CurvatureModel>,
) -> Result<BregmanReport> {
    let same_arch = net.layer_shapes() == net0.layer_shapes()
        && net
            .layers()
            .iter()
            .zip(net0.layers().iter())
            .all(|(a, b)| a.activation == b.activation);
    if !same_arch {
        return Err(Error::validation(
            "net",
            "architectures of the two networks differ",
        ));
    }
    if data.is_empty() {
        return Err(Error::validation("dataset", "empty dataset"));
    }

    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.example(i);
        let t = net.forward(&x)?;
        let t0 = net0.forward(&x)?;
        let l = crate::network::cross_entropy(&t.logits, y)?;
        let l0 = crate::network::cross_entropy(&t0.logits, y)?;
        let mut grad0 = t0.probs.clone();
        grad0[y] -= 1.0;
        let inner = grad0.dot(&(&t.logits - &t0.logits));
        total += l - l0 - inner;
    }
    let value = total / data.len() as f64;

    let (quadratic_estimate, relative_gap) = match model {
        None => (None, None),
        Some(m) => {
            let delta = LayerGradients {
                layers: net
                    .layers()
                    .iter()
                    .zip(net0.layers().iter())
                    .map(|(a, b)| &a.weight - &b.weight)
                    .collect(),
            };
            let q = 0.5 * quadratic_form(m, &delta)?;
            let gap = (value - q).abs() / value.max(BREGMAN_FLOOR);
            (Some(q), Some(gap))
        }
    };

    Ok(BregmanReport {
        value,
        quadratic_estimate,
        relative_gap,
    })
}

/// Quadratic form `delta^T C delta` under a curvature model, evaluated
/// factorwise for Kronecker models without materializing any blocks.
pub fn quadratic_form(model: &CurvatureModel, delta: &LayerGradients) -> Result<f64> {
    let layer_of = |l: usize| -> Result<&Array2<f64>> {
        delta
            .layers
            .get(l)
            .ok_or_else(|| Error::dim(format!("delta has no layer {l}")))
    };
    match model {
        CurvatureModel::ExactHessian(d) | CurvatureModel::Gnh(d) => {
            let mut flat = Vec::with_capacity(d.dim());
            for sh in &d.layout {
                let dl = layer_of(sh.index)?;
                if dl.dim() != (sh.d_out, sh.d_in) {
                    return Err(Error::dim(format!(
                        "delta shape {:?} for layer {} does not match {:?}",
                        dl.dim(),
                        sh.index,
                        (sh.d_out, sh.d_in)
                    )));
                }
                crate::network::push_colmajor(dl, &mut flat);
            }
            let v = Array1::from(flat);
            Ok(v.dot(&d.matrix.dot(&v)))
        }
        CurvatureModel::Kfac(factors) => {
            let mut total = 0.0;
            for (&l, fac) in &factors.layers {
                let dl = layer_of(l)?;
                if dl.dim() != (fac.s.nrows(), fac.a.nrows()) {
                    return Err(Error::dim(format!(
                        "delta shape {:?} for layer {l} does not match factors",
                        dl.dim()
                    )));
                }
                // vec(D)^T (A ox S) vec(D) = <D, S D A>.
                let sda = fac.s.dot(dl).dot(&fac.a);
                total += (dl * &sda).sum();
            }
            Ok(total)
        }
        CurvatureModel::Ekfac { corrections, .. } => {
            let mut total = 0.0;
            for (&l, corr) in corrections {
                let dl = layer_of(l)?;
                if dl.dim() != (corr.u_out.nrows(), corr.u_in.nrows()) {
                    return Err(Error::dim(format!(
                        "delta shape {:?} for layer {l} does not match eigenbases",
                        dl.dim()
                    )));
                }
                let rotated = corr.u_out.t().dot(dl).dot(&corr.u_in);
                total += (&rotated.mapv(|v| v * v) * &corr.lambda_star).sum();
            }
            Ok(total)
        }
        CurvatureModel::ActivationCov { layers, .. } => {
            let mut total = 0.0;
            for (&l, a) in layers {
                let dl = layer_of(l)?;
                if dl.ncols() != a.nrows() {
                    return Err(Error::dim(format!(
                        "delta has {} input columns for layer {l}, covariance is {}x{}",
                        dl.ncols(),
                        a.nrows(),
                        a.ncols()
                    )));
                }
                let da = dl.dot(a);
                total += (dl * &da).sum();
            }
            Ok(total)
        }
    }
}

// --- Curvature cache file ("CRVC") ---------------------------------------
//
// Little-endian layout:
//   magic "CRVC" | version u32 | flags u32 | layer_count u32
//   per layer: index u32 | d_in u32 | d_out u32 | sample_count u64
//              | A (d_in^2 f64, column-major) | S (d_out^2 f64, column-major)
//   flags bit 0: EK-FAC section follows the factor blocks, per layer:
//              Lambda* (d_out x d_in f64) | U_out (d_out^2) | U_in (d_in^2)
//   flags bit 1: dense section (exact Hessian / GNH models): tracked count
//              u32, per tracked layer index/d_out/d_in u32, then p u64 and
//              the p^2 matrix column-major.
// Round trips are bit-exact.

const CRVC_MAGIC: &[u8; 4] = b"CRVC";
const CRVC_VERSION: u32 = 1;
const FLAG_EKFAC: u32 = 1;
const FLAG_DENSE: u32 = 2;

fn push_matrix_colmajor_bytes(out: &mut Vec<u8>, m: &Array2<f64>) {
    let (rows, cols) = m.dim();
    for j in 0..cols {
        for i in 0..rows {
            out.extend_from_slice(&m[[i, j]].to_le_bytes());
        }
    }
}

fn read_matrix_colmajor(r: &mut ByteReader, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    for j in 0..cols {
        for i in 0..rows {
            m[[i, j]] = r.read_f64_le(what)?;
        }
    }
    Ok(m)
}

/// Serializes a curvature model to the CRVC byte format.
pub fn curvature_cache_bytes(model: &CurvatureModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CRVC_MAGIC);
    out.extend_from_slice(&CRVC_VERSION.to_le_bytes());

    match model {
        CurvatureModel::Kfac(factors) => {
            out.extend_from_slice(&0u32.to_le_bytes());
            write_factor_blocks(&mut out, factors);
        }
        CurvatureModel::Ekfac {
            factors,
            corrections,
        } => {
            out.extend_from_slice(&FLAG_EKFAC.to_le_bytes());
            write_factor_blocks(&mut out, factors);
            for (l, corr) in corrections {
                debug_assert!(factors.layers.contains_key(l));
                push_matrix_colmajor_bytes(&mut out, &corr.lambda_star);
                push_matrix_colmajor_bytes(&mut out, &corr.u_out);
                push_matrix_colmajor_bytes(&mut out, &corr.u_in);
            }
        }
        CurvatureModel::ActivationCov {
            layers,
            sample_count,
        } => {
            // Stored in the factor layout with S = I.
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
            for (&l, a) in layers {
                let d_in = a.nrows();
                out.extend_from_slice(&(l as u32).to_le_bytes());
                out.extend_from_slice(&(d_in as u32).to_le_bytes());
                // The activation-covariance model does not know d_out; store
                // a 1x1 identity output factor.
                out.extend_from_slice(&1u32.to_le_bytes());
                out.extend_from_slice(&sample_count.to_le_bytes());
                push_matrix_colmajor_bytes(&mut out, a);
                out.extend_from_slice(&1.0f64.to_le_bytes());
            }
        }
        CurvatureModel::ExactHessian(d) | CurvatureModel::Gnh(d) => {
            out.extend_from_slice(&FLAG_DENSE.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&(d.layout.len() as u32).to_le_bytes());
            for sh in &d.layout {
                out.extend_from_slice(&(sh.index as u32).to_le_bytes());
                out.extend_from_slice(&(sh.d_out as u32).to_le_bytes());
                out.extend_from_slice(&(sh.d_in as u32).to_le_bytes());
            }
            out.extend_from_slice(&(d.matrix.nrows() as u64).to_le_bytes());
            push_matrix_colmajor_bytes(&mut out, &d.matrix);
        }
    }
    Ok(out)
}

fn write_factor_blocks(out: &mut Vec<u8>, factors: &KfacFactors) {
    out.extend_from_slice(&(factors.layers.len() as u32).to_le_bytes());
    for (&l, fac) in &factors.layers {
        out.extend_from_slice(&(l as u32).to_le_bytes());
        out.extend_from_slice(&(fac.a.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(fac.s.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&factors.sample_count.to_le_bytes());
        push_matrix_colmajor_bytes(out, &fac.a);
        push_matrix_colmajor_bytes(out, &fac.s);
    }
}

pub fn write_curvature_cache(path: &Path, model: &CurvatureModel) -> Result<()> {
    let bytes = curvature_cache_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parses a CRVC file as the requested curvature kind.
pub fn read_curvature_cache(path: &Path, kind: CurvatureKind) -> Result<CurvatureModel> {
    let bytes = std::fs::read(path)?;
    parse_curvature_cache(bytes, kind)
}

pub fn parse_curvature_cache(bytes: Vec<u8>, kind: CurvatureKind) -> Result<CurvatureModel> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CRVC_MAGIC, "curvature cache")?;
    let version = r.read_u32_le("version")?;
    if version != CRVC_VERSION {
        return Err(Error::Parse {
            offset: r.position() - 4,
            msg: format!("unsupported curvature cache version {version}"),
        });
    }
    let flags = r.read_u32_le("flags")?;
    let layer_count = r.read_u32_le("layer count")? as usize;

    let mut layers = BTreeMap::new();
    let mut sample_count: Option<u64> = None;
    for _ in 0..layer_count {
        let idx = r.read_u32_le("layer index")? as usize;
        let d_in = r.read_u32_le("d_in")? as usize;
        let d_out = r.read_u32_le("d_out")? as usize;
        let count = r.read_u64_le("sample count")?;
        match sample_count {
            None => sample_count = Some(count),
            Some(c) if c == count => {}
            Some(c) => {
                return Err(Error::Parse {
                    offset: r.position() - 8,
                    msg: format!("inconsistent per-layer sample counts ({c} vs {count})"),
                })
            }
        }
        let a = read_matrix_colmajor(&mut r, d_in, d_in, "A factor")?;
        let s = read_matrix_colmajor(&mut r, d_out, d_out, "S factor")?;
        layers.insert(idx, LayerFactors { a, s });
    }
    let factors = KfacFactors {
        layers,
        sample_count: sample_count.unwrap_or(0),
    };

    let corrections = if flags & FLAG_EKFAC != 0 {
        let mut out = BTreeMap::new();
        for (&l, fac) in &factors.layers {
            let d_in = fac.a.nrows();
            let d_out = fac.s.nrows();
            let lambda_star = read_matrix_colmajor(&mut r, d_out, d_in, "Lambda*")?;
            let u_out = read_matrix_colmajor(&mut r, d_out, d_out, "U_out")?;
            let u_in = read_matrix_colmajor(&mut r, d_in, d_in, "U_in")?;
            out.insert(
                l,
                EkfacLayer {
                    u_in,
                    u_out,
                    lambda_star,
                },
            );
        }
        Some(out)
    } else {
        None
    };

    let dense = if flags & FLAG_DENSE != 0 {
        let tracked = r.read_u32_le("tracked layer count")? as usize;
        let mut layout = Vec::with_capacity(tracked);
        for _ in 0..tracked {
            let index = r.read_u32_le("layer index")? as usize;
            let d_out = r.read_u32_le("d_out")? as usize;
            let d_in = r.read_u32_le("d_in")? as usize;
            layout.push(LayerShape { index, d_out, d_in });
        }
        let p = r.read_u64_le("matrix dimension")? as usize;
        let matrix = read_matrix_colmajor(&mut r, p, p, "dense curvature")?;
        Some(DenseCurvature { matrix, layout })
    } else {
        None
    };
    r.expect_eof("curvature cache")?;

    match kind {
        CurvatureKind::Kfac => {
            if factors.layers.is_empty() {
                return Err(Error::State(
                    "cache holds no factor blocks for a K-FAC model".to_string(),
                ));
            }
            Ok(CurvatureModel::Kfac(factors))
        }
        CurvatureKind::Ekfac => match corrections {
            Some(corrections) => Ok(CurvatureModel::Ekfac {
                factors,
                corrections,
            }),
            None => Err(Error::State(
                "cache has no EK-FAC section; re-cache with --curvature ekfac".to_string(),
            )),
        },
        CurvatureKind::ActCov => {
            if factors.layers.is_empty() {
                return Err(Error::State(
                    "cache holds no factor blocks for an activation-covariance model".to_string(),
                ));
            }
            let sample_count = factors.sample_count;
            Ok(CurvatureModel::ActivationCov {
                layers: factors
                    .layers
                    .into_iter()
                    .map(|(l, fac)| (l, fac.a))
                    .collect(),
                sample_count,
            })
        }
        CurvatureKind::Hessian | CurvatureKind::Gnh => match dense {
            Some(d) => Ok(if kind == CurvatureKind::Hessian {
                CurvatureModel::ExactHessian(d)
            } else {
                CurvatureModel::Gnh(d)
            }),
            None => Err(Error::State(
                "cache has no dense section; re-cache with --curvature hessian/gnh".to_string(),
            )),
        },
        CurvatureKind::None => Err(Error::validation(
            "curvature",
            "the zero curvature model has no cache representation",
        )),
    }
}
