//! The editing loops: batch editing over minibatch epochs and sequential
//! editing over chunks with streaming factor aggregation. Every gradient is
//! projected before the optimizer consumes it; Adam updates are projected a
//! second time so the applied step stays inside the low-curvature subspace.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::ByteReader;
use crate::curvature::{
    aggregate_factors, exact_gnh, exact_hessian, kfac_estimate, quadratic_form, splitmix64,
    CurvatureKind, CurvatureModel, KfacFactors,
};
use crate::error::{Error, Result};
use crate::harness::data::LabeledDataset;
use crate::network::{cross_entropy, Activation, FeedForwardNet, Layer, LayerGradients};
use crate::projection::{build_projector, project_joint, project_layer, ProjectorCache};

/// Optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Everything one editing session needs to know.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    /// Spectral energy fraction treated as high curvature.
    pub gamma: f64,
    pub learning_rate: f64,
    /// Maximum edit epochs.
    pub max_steps: usize,
    pub batch_size: usize,
    /// Stop once the mean edit loss at an epoch boundary drops below this.
    pub early_stop_loss: f64,
    pub optimizer: OptimizerKind,
    pub tracked_layers: Vec<usize>,
    /// Relative parameter change that triggers a projector rebuild.
    pub drift_threshold: f64,
    /// Edits per round in sequential editing.
    pub chunk_size: usize,
    /// Re-estimate K-FAC factors on drift instead of reusing the cache.
    pub refresh_kfac: bool,
    /// Build one joint dense projector instead of per-layer blocks.
    pub joint: bool,
    /// MC labels per input for factor estimation.
    pub mc_samples: usize,
    /// Use dataset labels instead of sampled ones for factor estimation.
    pub empirical_fisher: bool,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            gamma: 0.9,
            learning_rate: 5e-4,
            max_steps: 25,
            batch_size: 32,
            early_stop_loss: 0.01,
            optimizer: OptimizerKind::adam_default(),
            tracked_layers: vec![],
            drift_threshold: 0.25,
            chunk_size: 100,
            refresh_kfac: false,
            joint: false,
            mc_samples: 1,
            empirical_fisher: false,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::validation(
                "gamma",
                format!("must lie in (0, 1), got {}", self.gamma),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if self.drift_threshold <= 0.0 {
            return Err(Error::validation("drift_threshold", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if self.chunk_size == 0 {
            return Err(Error::validation("chunk_size", "must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(Error::validation("mc_samples", "must be positive"));
        }
        Ok(())
    }
}

/// One optimizer step's log entry.
#[derive(Debug, Clone)]
pub struct StepTelemetry {
    pub step: usize,
    pub epoch: usize,
    /// Minibatch edit loss at the gradient evaluation.
    pub edit_loss: f64,
    /// `delta^T C delta` for the cumulative tracked-layer delta under the
    /// session's current curvature model.
    pub quadratic_form: f64,
    /// Squared L2 norm of the cumulative tracked-layer delta.
    pub delta_norm_sq: f64,
    /// Largest nullspace eigenvalue of the projector in force (joint value
    /// when joint, otherwise the max over tracked layers).
    pub lambda_gamma: f64,
    /// Per-layer `|Q_proj| / |Q|`.
    pub grad_fraction: BTreeMap<usize, f64>,
    /// A projector rebuild happened right after this step.
    pub rebuilt: bool,
}

/// Telemetry for one editing session.
#[derive(Debug, Clone, Default)]
pub struct EditTelemetry {
    pub steps: Vec<StepTelemetry>,
    /// Mean edit loss at each epoch boundary.
    pub epoch_losses: Vec<f64>,
    pub rebuild_count: usize,
    /// Per-layer retained-energy fractions of the final projector.
    pub retained_energy: BTreeMap<usize, f64>,
}

impl EditTelemetry {
    /// Mean retained-energy fraction over tracked layers.
    pub fn mean_retained_energy(&self) -> f64 {
        if self.retained_energy.is_empty() {
            return 0.0;
        }
        self.retained_energy.values().sum::<f64>() / self.retained_energy.len() as f64
    }
}

/// Adam/SGD state over the tracked layers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: BTreeMap<usize, Array2<f64>>,
    v: BTreeMap<usize, Array2<f64>>,
    t: BTreeMap<usize, u64>,
}

impl OptimizerState {
    pub fn new(net: &FeedForwardNet, layers: &[usize], kind: OptimizerKind) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut t = BTreeMap::new();
        for &l in layers {
            let sh = net.shape_of(l)?;
            m.insert(l, Array2::zeros((sh.d_out, sh.d_in)));
            v.insert(l, Array2::zeros((sh.d_out, sh.d_in)));
            t.insert(l, 0);
        }
        Ok(OptimizerState { kind, m, v, t })
    }
}

/// One optimizer step on a projected gradient; returns the parameter delta
/// to add to the layer's weights.
pub fn optimizer_step(
    state: &mut OptimizerState,
    layer: usize,
    q_proj: &Array2<f64>,
    learning_rate: f64,
) -> Result<Array2<f64>> {
    match state.kind {
        OptimizerKind::Sgd => Ok(q_proj * (-learning_rate)),
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let m = state
                .m
                .get_mut(&layer)
                .ok_or_else(|| Error::State(format!("optimizer has no state for layer {layer}")))?;
            if m.dim() != q_proj.dim() {
                return Err(Error::dim(format!(
                    "gradient shape {:?} does not match optimizer state {:?}",
                    q_proj.dim(),
                    m.dim()
                )));
            }
            *m = &*m * beta1 + &(q_proj * (1.0 - beta1));
            let v = state.v.get_mut(&layer).unwrap();
            *v = &*v * beta2 + &(q_proj.mapv(|g| g * g) * (1.0 - beta2));
            let t = state.t.get_mut(&layer).unwrap();
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            Ok(ndarray::Zip::from(&m_hat)
                .and(&v_hat)
                .map_collect(|&mh, &vh| -learning_rate * mh / (vh.sqrt() + eps)))
        }
    }
}

/// Relative L2 drift test over flattened parameters.
pub fn drift_check(
    theta_now: &ArrayView1<f64>,
    theta_ref: &ArrayView1<f64>,
    threshold: f64,
) -> Result<bool> {
    if theta_now.len() != theta_ref.len() {
        return Err(Error::dim(format!(
            "parameter vectors differ in length: {} vs {}",
            theta_now.len(),
            theta_ref.len()
        )));
    }
    let diff2: f64 = theta_now
        .iter()
        .zip(theta_ref.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let ref2: f64 = theta_ref.iter().map(|v| v * v).sum();
    if ref2 == 0.0 {
        return Ok(diff2 > 0.0);
    }
    Ok((diff2 / ref2).sqrt() > threshold)
}

/// Deterministic example order for one edit epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (epoch as u64).wrapping_mul(0x9e37)));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn mean_batch_loss_and_gradient(
    net: &FeedForwardNet,
    data: &LabeledDataset,
    rows: &[usize],
) -> Result<(f64, LayerGradients)> {
    let mut loss = 0.0;
    let mut acc: Option<LayerGradients> = None;
    for &i in rows {
        let (x, y) = data.example(i);
        let trace = net.forward(&x)?;
        loss += cross_entropy(&trace.logits, y)?;
        let grads = net.backward(&trace, y)?;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => {
                for (dst, src) in a.layers.iter_mut().zip(grads.layers.iter()) {
                    *dst += src;
                }
            }
        }
    }
    let scale = 1.0 / rows.len() as f64;
    let mut grads = acc.unwrap();
    for g in grads.layers.iter_mut() {
        g.mapv_inplace(|v| v * scale);
    }
    Ok((loss * scale, grads))
}

fn frob_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cache_lambda_gamma(cache: &ProjectorCache) -> f64 {
    if let Some(j) = &cache.joint {
        return j.lambda_gamma;
    }
    cache
        .layers
        .values()
        .map(|p| p.lambda_gamma())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn project_tracked(
    cache: &ProjectorCache,
    layers: &[usize],
    grads: &LayerGradients,
) -> Result<BTreeMap<usize, Array2<f64>>> {
    if cache.joint.is_some() {
        let input: BTreeMap<usize, Array2<f64>> = layers
            .iter()
            .map(|&l| (l, grads.layers[l].clone()))
            .collect();
        project_joint(cache, &input)
    } else {
        let mut out = BTreeMap::new();
        for &l in layers {
            out.insert(l, project_layer(cache, l, &grads.layers[l])?);
        }
        Ok(out)
    }
}

/// Re-estimates the curvature model at the current parameters when the
/// model family supports it (exact models always; K-FAC families only with
/// `refresh_kfac`). Returns the model to use from now on.
fn refresh_model(
    model: &CurvatureModel,
    net: &FeedForwardNet,
    cap_data: Option<&LabeledDataset>,
    config: &EditConfig,
) -> Result<Option<CurvatureModel>> {
    let Some(cap) = cap_data else {
        return Ok(None);
    };
    let layers = model.tracked_layers();
    match model.kind() {
        CurvatureKind::Hessian => Ok(Some(exact_hessian(net, cap, &layers)?)),
        CurvatureKind::Gnh => Ok(Some(exact_gnh(net, cap, &layers)?)),
        CurvatureKind::Kfac if config.refresh_kfac => Ok(Some(CurvatureModel::Kfac(
            kfac_estimate(
                net,
                cap,
                &layers,
                config.mc_samples,
                config.seed,
                config.empirical_fisher,
            )?,
        ))),
        CurvatureKind::Ekfac if config.refresh_kfac => {
            let factors = kfac_estimate(
                net,
                cap,
                &layers,
                config.mc_samples,
                config.seed,
                config.empirical_fisher,
            )?;
            Ok(Some(crate::curvature::ekfac_correct(
                net,
                cap,
                &factors,
                config.mc_samples,
                config.seed,
                config.empirical_fisher,
            )?))
        }
        CurvatureKind::ActCov => Ok(Some(crate::curvature::activation_covariance(
            net, cap, &layers,
        )?)),
        _ => Ok(None),
    }
}

/// Batch editing: minibatch epochs on the edit loss with every gradient
/// projected into the low-curvature subspace before (and, for Adam, after)
/// the optimizer. Untracked layers are never touched. `cap_data` is only
/// used to re-estimate curvature when drift triggers a rebuild.
pub fn edit_batch(
    net: &FeedForwardNet,
    edit_data: &LabeledDataset,
    curvature: &CurvatureModel,
    config: &EditConfig,
    cap_data: Option<&LabeledDataset>,
) -> Result<(FeedForwardNet, EditTelemetry)> {
    config.validate()?;
    if edit_data.is_empty() {
        return Err(Error::validation("edit_data", "empty edit set"));
    }
    let tracked = config.tracked_layers.clone();
    if tracked.is_empty() {
        return Err(Error::validation("tracked_layers", "no layers to edit"));
    }
    let model_layers = curvature.tracked_layers();
    if model_layers != tracked {
        return Err(Error::validation(
            "tracked_layers",
            format!(
                "curvature model covers layers {model_layers:?} but the config tracks {tracked:?}"
            ),
        ));
    }

    let mut edited = net.clone();
    let mut model = curvature.clone();
    let mut cache = build_projector(&model, &edited, config.gamma, config.joint)?;
    let theta0 = edited.flatten_layers(&tracked)?;
    let mut theta_ref = theta0.clone();

    let mut opt = OptimizerState::new(&edited, &tracked, config.optimizer)?;
    let mut telemetry = EditTelemetry::default();
    let is_adam = matches!(config.optimizer, OptimizerKind::Adam { .. });

    let n = edit_data.len();
    let mut step = 0usize;
    for epoch in 0..config.max_steps {
        let order = epoch_order(config.seed, epoch, n);
        for batch in order.chunks(config.batch_size) {
            let (batch_loss, grads) = mean_batch_loss_and_gradient(&edited, edit_data, batch)?;
            let projected = project_tracked(&cache, &tracked, &grads)?;

            let mut grad_fraction = BTreeMap::new();
            for &l in &tracked {
                let raw = frob_norm(&grads.layers[l]);
                let proj = frob_norm(&projected[&l]);
                grad_fraction.insert(l, if raw > 0.0 { proj / raw } else { 0.0 });
            }

            let mut deltas = BTreeMap::new();
            for &l in &tracked {
                let delta = optimizer_step(&mut opt, l, &projected[&l], config.learning_rate)?;
                deltas.insert(l, delta);
            }
            // Adam's preconditioning can rotate the update out of the
            // nullspace; project the final update too.
            if is_adam {
                if cache.joint.is_some() {
                    deltas = project_joint(&cache, &deltas)?;
                } else {
                    for &l in &tracked {
                        let d = project_layer(&cache, l, &deltas[&l])?;
                        deltas.insert(l, d);
                    }
                }
            }
            for &l in &tracked {
                let w = &mut edited.layer_mut(l).weight;
                *w += &deltas[&l];
            }
            step += 1;

            let theta_now = edited.flatten_layers(&tracked)?;
            let delta_total = &theta_now - &theta0;
            let delta_grads = tracked_delta_as_gradients(&edited, net, &tracked);
            let quad = quadratic_form(&model, &delta_grads)?;
            let delta_norm_sq = delta_total.dot(&delta_total);

            let mut rebuilt = false;
            if drift_check(&theta_now.view(), &theta_ref.view(), config.drift_threshold)? {
                if let Some(new_model) = refresh_model(&model, &edited, cap_data, config)? {
                    model = new_model;
                }
                cache = build_projector(&model, &edited, config.gamma, config.joint)?;
                theta_ref = theta_now.clone();
                telemetry.rebuild_count += 1;
                rebuilt = true;
            }

            telemetry.steps.push(StepTelemetry {
                step,
                epoch,
                edit_loss: batch_loss,
                quadratic_form: quad,
                delta_norm_sq,
                lambda_gamma: cache_lambda_gamma(&cache),
                grad_fraction,
                rebuilt,
            });
        }

        let epoch_loss = edited.dataset_loss(edit_data)?;
        telemetry.epoch_losses.push(epoch_loss);
        if epoch_loss < config.early_stop_loss {
            break;
        }
    }

    for &l in &tracked {
        if let Ok((retained, _)) = crate::projection::residual_energy(&cache, l) {
            telemetry.retained_energy.insert(l, retained);
        }
    }
    Ok((edited, telemetry))
}

fn tracked_delta_as_gradients(
    edited: &FeedForwardNet,
    base: &FeedForwardNet,
    _tracked: &[usize],
) -> LayerGradients {
    LayerGradients {
        layers: edited
            .layers()
            .iter()
            .zip(base.layers().iter())
            .map(|(a, b)| &a.weight - &b.weight)
            .collect(),
    }
}

/// Result of a sequential editing run.
pub struct SequentialOutcome {
    /// Model after each chunk, in order.
    pub models: Vec<FeedForwardNet>,
    /// Accumulated factors after the final chunk.
    pub final_factors: KfacFactors,
    /// Telemetry per chunk.
    pub telemetry: Vec<EditTelemetry>,
}

/// Sequential editing: each chunk is edited in the gamma-approximate
/// nullspace induced by the accumulated factors, then the chunk's own
/// factors (estimated at the freshly edited parameters, every example
/// contributing) are merged in by sample-count-weighted averaging.
pub fn edit_sequential(
    net: &FeedForwardNet,
    edit_chunks: &[LabeledDataset],
    initial_factors: &KfacFactors,
    config: &EditConfig,
) -> Result<SequentialOutcome> {
    config.validate()?;
    if edit_chunks.is_empty() {
        return Err(Error::validation("edit_chunks", "empty chunk list"));
    }
    let tracked = config.tracked_layers.clone();
    if initial_factors.layer_indices() != tracked {
        return Err(Error::validation(
            "tracked_layers",
            "initial factors do not cover the tracked layers",
        ));
    }
    let mut acc = initial_factors.clone();
    let mut current = net.clone();
    let mut models = Vec::with_capacity(edit_chunks.len());
    let mut telemetry = Vec::with_capacity(edit_chunks.len());

    for chunk in edit_chunks {
        if chunk.is_empty() {
            models.push(current.clone());
            telemetry.push(EditTelemetry::default());
            continue;
        }
        let model = CurvatureModel::Kfac(acc.clone());
        let (next, tel) = edit_batch(&current, chunk, &model, config, None)?;
        current = next;
        let chunk_factors = kfac_estimate(
            &current,
            chunk,
            &tracked,
            config.mc_samples,
            config.seed,
            config.empirical_fisher,
        )?;
        acc = aggregate_factors(&acc, &chunk_factors)?;
        models.push(current.clone());
        telemetry.push(tel);
    }

    Ok(SequentialOutcome {
        models,
        final_factors: acc,
        telemetry,
    })
}

// --- Checkpoint file ("CRSP") ---------------------------------------------
//
// Little-endian: magic "CRSP" | version u32 | layer_count u32, then per
// layer d_out u32 | d_in u32 | activation tag u32 | weights (column-major
// f64). Round trips are bit-exact.

const CRSP_MAGIC: &[u8; 4] = b"CRSP";
const CRSP_VERSION: u32 = 1;

pub fn checkpoint_bytes(net: &FeedForwardNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CRSP_MAGIC);
    out.extend_from_slice(&CRSP_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layer_count() as u32).to_le_bytes());
    for layer in net.layers() {
        let (d_out, d_in) = layer.weight.dim();
        out.extend_from_slice(&(d_out as u32).to_le_bytes());
        out.extend_from_slice(&(d_in as u32).to_le_bytes());
        out.extend_from_slice(&layer.activation.tag().to_le_bytes());
        for j in 0..d_in {
            for i in 0..d_out {
                out.extend_from_slice(&layer.weight[[i, j]].to_le_bytes());
            }
        }
    }
    out
}

pub fn parse_checkpoint(bytes: Vec<u8>) -> Result<FeedForwardNet> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CRSP_MAGIC, "checkpoint")?;
    let version = r.read_u32_le("version")?;
    if version != CRSP_VERSION {
        return Err(Error::Parse {
            offset: r.position() - 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.read_u32_le("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let d_out = r.read_u32_le("d_out")? as usize;
        let d_in = r.read_u32_le("d_in")? as usize;
        let tag = r.read_u32_le("activation tag")?;
        let activation = Activation::from_tag(tag).map_err(|_| Error::Parse {
            offset: r.position() - 4,
            msg: format!("unknown activation tag {tag}"),
        })?;
        let mut w = Array2::<f64>::zeros((d_out, d_in));
        for j in 0..d_in {
            for i in 0..d_out {
                w[[i, j]] = r.read_f64_le("weight")?;
            }
        }
        layers.push(Layer {
            weight: w,
            activation,
        });
    }
    r.expect_eof("checkpoint")?;
    FeedForwardNet::new(layers)
}

pub fn save_checkpoint(path: &Path, net: &FeedForwardNet) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FeedForwardNet> {
    parse_checkpoint(std::fs::read(path)?)
}
