//! Flow steps composed of a conditioner and a per-dimension normalizer, with
//! exact log-density via the diagonal-Jacobian identity and sampling by
//! fixed-point inversion.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::conditioners::{ConditionerBindings, ConditionerKind, ConditionerSpec};
use crate::error::{Error, Result};
use crate::graph::{
    post_process_threshold, to_dot, AdjacencyParam, BinaryDag, GraphExport, GumbelDraws,
};
use crate::nn::{read_params, write_params, MlpParams};
use crate::normalizers::{
    affine_on_tape, monotonic_on_tape, AffineNormalizer, MonotonicNormalizer, NormalizerBindings,
    NormalizerKind,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const LOG_2PI: f64 = 1.8378770664093453;

/// Convergence threshold of the fixed-point sampling sweep.
pub const SAMPLE_SWEEP_TOL: f64 = 1e-8;

/// Tolerance passed to the monotonic inverter during sampling.
pub const SAMPLE_INVERT_TOL: f64 = 1e-9;

/// Gates passing less than this mask mass are dropped when a learned mask is
/// frozen: the trained conditioner never saw information through them, so
/// freezing them to 1 would hand the model connections it was not fit for.
pub const BINARIZE_GATE_FLOOR: f64 = 1e-3;

/// Mask attached to a flow step.
#[derive(Clone, Debug)]
pub enum MaskState {
    /// Fixed binary DAG supplied up front (includes the implied autoregressive
    /// and coupling patterns).
    Prescribed(BinaryDag),
    /// Real-valued adjacency being learned.
    Learnable(AdjacencyParam),
    /// Learnable adjacency frozen to a binary DAG by post-processing.
    Binarized(BinaryDag),
}

impl MaskState {
    pub fn binary(&self) -> Option<&BinaryDag> {
        match self {
            MaskState::Prescribed(d) | MaskState::Binarized(d) => Some(d),
            MaskState::Learnable(_) => None,
        }
    }

    /// Deterministic mask used for evaluation: the binary matrix when frozen,
    /// otherwise the relaxed gate matrix.
    pub fn eval_matrix(&self) -> Tensor {
        match self {
            MaskState::Prescribed(d) | MaskState::Binarized(d) => d.adjacency.clone(),
            MaskState::Learnable(adj) => adj.gate_matrix(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Normalizer {
    Affine(AffineNormalizer),
    Monotonic(MonotonicNormalizer),
}

impl Normalizer {
    pub fn kind(&self) -> NormalizerKind {
        match self {
            Normalizer::Affine(_) => NormalizerKind::Affine,
            Normalizer::Monotonic(_) => NormalizerKind::Monotonic,
        }
    }

    pub fn apply(&self, x: f64, c: &[f64]) -> Result<(f64, f64)> {
        match self {
            Normalizer::Affine(a) => Ok(a.apply(x, c)),
            Normalizer::Monotonic(m) => m.apply(x, c),
        }
    }

    pub fn invert(&self, z: f64, c: &[f64]) -> Result<f64> {
        match self {
            Normalizer::Affine(a) => Ok(a.invert(z, c)),
            Normalizer::Monotonic(m) => m.invert(z, c, SAMPLE_INVERT_TOL),
        }
    }
}

/// One transformation step.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub conditioner: ConditionerSpec,
    pub normalizer: Normalizer,
    pub mask: MaskState,
}

impl FlowStep {
    /// Replace a learnable mask by its thresholded binary DAG. Entries whose
    /// gate is below [`BINARIZE_GATE_FLOOR`] are treated as absent before the
    /// acyclicity threshold search.
    pub fn post_process(&mut self) -> Option<&BinaryDag> {
        if let MaskState::Learnable(adj) = &self.mask {
            let dag = post_process_threshold(&adj.effective_weights(BINARIZE_GATE_FLOOR));
            self.mask = MaskState::Binarized(dag);
        }
        self.mask.binary()
    }
}

/// A normalizing flow with a standard-normal base distribution.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub d: usize,
    pub steps: Vec<FlowStep>,
}

/// Tape ids of everything one step contributes to a forward pass.
pub struct StepBindings {
    pub cond: ConditionerBindings,
    pub norm: NormalizerBindings,
    /// Node carrying the mask matrix used by this pass.
    pub mask: NodeId,
    /// The adjacency leaf, present when the step's mask is learnable and
    /// bound trainable.
    pub adjacency: Option<NodeId>,
}

pub struct FlowBindings {
    pub steps: Vec<StepBindings>,
}

/// Result nodes of a batched forward pass.
pub struct LogDensityNodes {
    /// [n] per-sample log density.
    pub logp: NodeId,
    /// [n, d] final latents.
    pub z: NodeId,
}

impl FlowModel {
    pub fn new(d: usize, steps: Vec<FlowStep>) -> Result<Self> {
        for step in &steps {
            if step.conditioner.d != d {
                return Err(Error::Contract(format!(
                    "step dimension {} does not match flow dimension {d}",
                    step.conditioner.d
                )));
            }
        }
        Ok(FlowModel { d, steps })
    }

    pub fn is_binarized(&self) -> bool {
        self.steps.iter().all(|s| s.mask.binary().is_some())
    }

    pub fn edge_count(&self) -> usize {
        self.steps.iter().filter_map(|s| s.mask.binary().map(|d| d.edge_count())).sum()
    }

    pub fn depth(&self) -> usize {
        self.steps.iter().filter_map(|s| s.mask.binary().map(|d| d.depth)).max().unwrap_or(0)
    }

    /// Register the whole model on a tape. When `trainable`, parameters are
    /// leaves; otherwise constants. `draws` supplies one Gumbel draw per
    /// learnable step for the stochastic mask; without draws learnable masks
    /// use the deterministic gate matrix.
    pub fn bind(
        &self,
        tape: &mut Tape,
        trainable: bool,
        mut draws: Option<&[GumbelDraws]>,
    ) -> Result<FlowBindings> {
        let mut steps = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let cond = step.conditioner.bind(tape, trainable);
            let norm = match &step.normalizer {
                Normalizer::Affine(a) => {
                    if trainable {
                        NormalizerBindings::Affine {
                            w: tape.leaf(a.projection.w.clone()),
                            b: tape.leaf(a.projection.b.clone()),
                        }
                    } else {
                        NormalizerBindings::Affine {
                            w: tape.constant(a.projection.w.clone()),
                            b: tape.constant(a.projection.b.clone()),
                        }
                    }
                }
                Normalizer::Monotonic(m) => NormalizerBindings::Monotonic {
                    integrand: if trainable { m.integrand.bind(tape) } else { m.integrand.bind_const(tape) },
                    offset: if trainable { m.offset.bind(tape) } else { m.offset.bind_const(tape) },
                },
            };
            let (mask, adjacency) = match &step.mask {
                MaskState::Prescribed(d) | MaskState::Binarized(d) => {
                    (tape.constant(d.adjacency.clone()), None)
                }
                MaskState::Learnable(adj) => {
                    let a_id = if trainable {
                        tape.leaf(adj.a.clone())
                    } else {
                        tape.constant(adj.a.clone())
                    };
                    let mask_id = match draws {
                        Some(list) if !list.is_empty() => {
                            let (first, rest) = list.split_first().unwrap();
                            draws = Some(rest);
                            adj.mask_on_tape(tape, a_id, first)?
                        }
                        _ => adj.gate_on_tape(tape, a_id)?,
                    };
                    (mask_id, if trainable { Some(a_id) } else { None })
                }
            };
            steps.push(StepBindings { cond, norm, mask, adjacency });
        }
        Ok(FlowBindings { steps })
    }

    /// Batched forward pass on the tape: x [n, d] to latents and per-sample
    /// log density.
    pub fn log_density_on_tape(
        &self,
        tape: &mut Tape,
        x_id: NodeId,
        binds: &FlowBindings,
    ) -> Result<LogDensityNodes> {
        let n = tape.value(x_id).rows();
        let d = self.d;
        if tape.value(x_id).cols() != d {
            return Err(Error::Shape {
                op: "log_density",
                lhs: tape.value(x_id).shape().to_vec(),
                rhs: vec![n, d],
            });
        }
        let mut cur = x_id; // [n, d]
        let mut log_diag_sum: Option<NodeId> = None;
        for (si, (step, bind)) in self.steps.iter().zip(&binds.steps).enumerate() {
            let c = step.conditioner.embed_batch_on_tape(tape, cur, bind.mask, &bind.cond)?;
            let x_flat = tape.reshape(cur, vec![n * d])?;
            let (z_flat, ld_flat) = match &step.normalizer {
                Normalizer::Affine(a) => affine_on_tape(tape, a, x_flat, c, &bind.norm)?,
                Normalizer::Monotonic(m) => monotonic_on_tape(tape, m, x_flat, c, &bind.norm)?,
            };
            if let Some(bad) = tape.value(z_flat).data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite latent in step {si}, dimension {} (sample row {})",
                    bad % d,
                    bad / d
                )));
            }
            let ld_rows = tape.reshape(ld_flat, vec![n, d])?;
            let ones = tape.constant(Tensor::vector(vec![1.0; d]));
            let ld_per_sample = tape.matmul(ld_rows, ones)?;
            log_diag_sum = Some(match log_diag_sum {
                None => ld_per_sample,
                Some(acc) => tape.add(acc, ld_per_sample)?,
            });
            cur = tape.reshape(z_flat, vec![n, d])?;
        }

        // log N(z; 0, I) = -d/2 log(2 pi) - 1/2 sum z^2
        let z2 = tape.pow(cur, 2.0);
        let ones = tape.constant(Tensor::vector(vec![1.0; d]));
        let z2_sum = tape.matmul(z2, ones)?;
        let half = tape.scale(z2_sum, -0.5);
        let base_const = tape.constant(Tensor::vector(vec![-0.5 * d as f64 * LOG_2PI; n]));
        let mut logp = tape.add(half, base_const)?;
        if let Some(ld) = log_diag_sum {
            logp = tape.add(logp, ld)?;
        }
        Ok(LogDensityNodes { logp, z: cur })
    }

    /// Log density and final latent of a single point (deterministic masks).
    pub fn log_density(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.d {
            return Err(Error::Shape { op: "log_density", lhs: vec![x.len()], rhs: vec![self.d] });
        }
        let batch = Tensor::matrix(1, self.d, x.to_vec());
        let mut out = self.log_density_batch(&batch)?;
        Ok((out.logp.pop().unwrap(), out.z.row(0).to_vec()))
    }

    /// Batched log density with deterministic masks (no gradients tracked).
    pub fn log_density_batch(&self, x: &Tensor) -> Result<BatchDensity> {
        let mut tape = Tape::new();
        let x_id = tape.constant(x.clone());
        let binds = self.bind(&mut tape, false, None)?;
        let nodes = self.log_density_on_tape(&mut tape, x_id, &binds)?;
        Ok(BatchDensity {
            logp: tape.value(nodes.logp).data().to_vec(),
            z: tape.value(nodes.z).clone(),
        })
    }

    /// Invert the flow at `z` by per-step fixed-point sweeps (Algorithm 1).
    /// All masks must be binary. Returns the sample and, per step, the number
    /// of sweeps that changed the state before convergence.
    pub fn sample_detailed(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        if z.len() != self.d {
            return Err(Error::Shape { op: "sample", lhs: vec![z.len()], rhs: vec![self.d] });
        }
        if !self.is_binarized() {
            return Err(Error::Contract(
                "sampling requires binary masks; post-process the model first".into(),
            ));
        }
        let mut target = z.to_vec();
        let mut sweeps_per_step = Vec::with_capacity(self.steps.len());
        for step in self.steps.iter().rev() {
            let dag = step.mask.binary().expect("binarized");
            let mask = &dag.adjacency;
            let max_sweeps = dag.depth + 2;
            let mut x = target.clone();
            let mut converged = false;
            let mut effective = 0usize;
            for sweep in 1..=max_sweeps {
                let c = step.conditioner.embed_all(&x, mask);
                let mut x_new = Vec::with_capacity(self.d);
                for i in 0..self.d {
                    x_new.push(step.normalizer.invert(target[i], c.row(i))?);
                }
                let delta = x
                    .iter()
                    .zip(&x_new)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                x = x_new;
                if delta < SAMPLE_SWEEP_TOL {
                    converged = true;
                    effective = sweep - 1;
                    break;
                }
            }
            if !converged {
                return Err(Error::Divergence(format!(
                    "fixed-point sampling did not converge within {max_sweeps} sweeps; \
                     the mask may not be a DAG"
                )));
            }
            sweeps_per_step.push(effective);
            target = x;
        }
        sweeps_per_step.reverse();
        Ok((target, sweeps_per_step))
    }

    pub fn sample(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.sample_detailed(z)?.0)
    }

    /// Draw `n` samples from the model using the given rng.
    pub fn sample_n(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(rng)).collect();
            rows.push(self.sample(&z)?);
        }
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.d]));
        }
        Ok(Tensor::from_rows(&rows))
    }

    /// Export each step's Bayesian network as (DOT text, JSON schema).
    pub fn export_bn(&self, names: Option<&[String]>) -> Result<Vec<(String, GraphExport)>> {
        let mut out = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let Some(dag) = step.mask.binary() else {
                return Err(Error::Contract(
                    "export requires binary masks; post-process the model first".into(),
                ));
            };
            out.push((to_dot(dag, names), GraphExport::from_dag(dag)));
        }
        Ok(out)
    }
}

/// Values produced by a batched density evaluation.
pub struct BatchDensity {
    pub logp: Vec<f64>,
    pub z: Tensor,
}

// --- serialization ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub d: usize,
    pub steps: Vec<StepManifest>,
    pub columns: Option<Vec<String>>,
    /// Per-column (mean, std) applied to the training data.
    pub standardization: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
pub struct StepManifest {
    pub conditioner: ConditionerKind,
    pub embed_size: usize,
    pub normalizer: NormalizerKind,
    pub quad_points: Option<usize>,
    pub mask: MaskManifest,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskManifest {
    Prescribed(GraphExport),
    Binarized(GraphExport),
    Learnable {
        temperature: f64,
        alpha: f64,
        squaring: crate::graph::GateSquaring,
    },
}

impl FlowModel {
    /// All parameters with canonical names, in a stable order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (si, step) in self.steps.iter().enumerate() {
            for (li, layer) in step.conditioner.network.layers.iter().enumerate() {
                out.push((format!("step{si}.cond.l{li}.w"), &layer.w));
                out.push((format!("step{si}.cond.l{li}.b"), &layer.b));
            }
            if let Some(c) = &step.conditioner.coupling_consts {
                out.push((format!("step{si}.cond.consts"), c));
            }
            match &step.normalizer {
                Normalizer::Affine(a) => {
                    out.push((format!("step{si}.norm.proj.w"), &a.projection.w));
                    out.push((format!("step{si}.norm.proj.b"), &a.projection.b));
                }
                Normalizer::Monotonic(m) => {
                    for (li, layer) in m.integrand.layers.iter().enumerate() {
                        out.push((format!("step{si}.norm.f.l{li}.w"), &layer.w));
                        out.push((format!("step{si}.norm.f.l{li}.b"), &layer.b));
                    }
                    for (li, layer) in m.offset.layers.iter().enumerate() {
                        out.push((format!("step{si}.norm.beta.l{li}.w"), &layer.w));
                        out.push((format!("step{si}.norm.beta.l{li}.b"), &layer.b));
                    }
                }
            }
            if let MaskState::Learnable(adj) = &step.mask {
                out.push((format!("step{si}.mask.a"), &adj.a));
            }
        }
        out
    }

    /// Mutable view of the same parameters, in the same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (si, step) in self.steps.iter_mut().enumerate() {
            for (li, layer) in step.conditioner.network.layers.iter_mut().enumerate() {
                out.push((format!("step{si}.cond.l{li}.w"), &mut layer.w));
                out.push((format!("step{si}.cond.l{li}.b"), &mut layer.b));
            }
            if let Some(c) = step.conditioner.coupling_consts.as_mut() {
                out.push((format!("step{si}.cond.consts"), c));
            }
            match &mut step.normalizer {
                Normalizer::Affine(a) => {
                    out.push((format!("step{si}.norm.proj.w"), &mut a.projection.w));
                    out.push((format!("step{si}.norm.proj.b"), &mut a.projection.b));
                }
                Normalizer::Monotonic(m) => {
                    for (li, layer) in m.integrand.layers.iter_mut().enumerate() {
                        out.push((format!("step{si}.norm.f.l{li}.w"), &mut layer.w));
                        out.push((format!("step{si}.norm.f.l{li}.b"), &mut layer.b));
                    }
                    for (li, layer) in m.offset.layers.iter_mut().enumerate() {
                        out.push((format!("step{si}.norm.beta.l{li}.w"), &mut layer.w));
                        out.push((format!("step{si}.norm.beta.l{li}.b"), &mut layer.b));
                    }
                }
            }
            if let MaskState::Learnable(adj) = &mut step.mask {
                out.push((format!("step{si}.mask.a"), &mut adj.a));
            }
        }
        out
    }

    pub fn manifest(
        &self,
        columns: Option<Vec<String>>,
        standardization: Option<(Vec<f64>, Vec<f64>)>,
    ) -> ModelManifest {
        ModelManifest {
            format: "graphflow-model-v1".into(),
            d: self.d,
            steps: self
                .steps
                .iter()
                .map(|s| StepManifest {
                    conditioner: s.conditioner.kind,
                    embed_size: s.conditioner.embed_size,
                    normalizer: s.normalizer.kind(),
                    quad_points: match &s.normalizer {
                        Normalizer::Monotonic(m) => Some(m.quad_points),
                        Normalizer::Affine(_) => None,
                    },
                    mask: match &s.mask {
                        MaskState::Prescribed(d) => MaskManifest::Prescribed(GraphExport::from_dag(d)),
                        MaskState::Binarized(d) => MaskManifest::Binarized(GraphExport::from_dag(d)),
                        MaskState::Learnable(adj) => MaskManifest::Learnable {
                            temperature: adj.temperature,
                            alpha: adj.alpha,
                            squaring: adj.squaring,
                        },
                    },
                })
                .collect(),
            columns,
            standardization,
        }
    }

    /// Write manifest JSON and the flat parameter container.
    pub fn save(
        &self,
        manifest_path: &std::path::Path,
        params_path: &std::path::Path,
        columns: Option<Vec<String>>,
        standardization: Option<(Vec<f64>, Vec<f64>)>,
        seed: Option<u64>,
    ) -> Result<()> {
        let manifest = self.manifest(columns, standardization);
        std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        let file = std::fs::File::create(params_path)?;
        write_params(std::io::BufWriter::new(file), &self.named_params(), seed)?;
        Ok(())
    }

    /// Rebuild a model from manifest JSON and the parameter container.
    pub fn load(manifest_path: &std::path::Path, params_path: &std::path::Path) -> Result<(Self, ModelManifest)> {
        let manifest: ModelManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        if manifest.format != "graphflow-model-v1" {
            return Err(Error::Serde(format!("unknown model format {}", manifest.format)));
        }
        let file = std::fs::File::open(params_path)?;
        let params = read_params(std::io::BufReader::new(file))?;
        let lookup = |name: &str| -> Result<Tensor> {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Serde(format!("missing parameter {name}")))
        };

        let d = manifest.d;
        let mut steps = Vec::with_capacity(manifest.steps.len());
        for (si, sm) in manifest.steps.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0.. {
                let wname = format!("step{si}.cond.l{li}.w");
                if !params.iter().any(|(n, _)| *n == wname) {
                    break;
                }
                layers.push(crate::nn::Dense {
                    w: lookup(&wname)?,
                    b: lookup(&format!("step{si}.cond.l{li}.b"))?,
                });
            }
            let network = MlpParams { layers, activation: crate::nn::Activation::Elu };
            let coupling_consts = match sm.conditioner {
                ConditionerKind::Coupling { .. } => Some(lookup(&format!("step{si}.cond.consts"))?),
                _ => None,
            };
            let conditioner = ConditionerSpec {
                kind: sm.conditioner,
                d,
                embed_size: sm.embed_size,
                network,
                coupling_consts,
            };
            let normalizer = match sm.normalizer {
                NormalizerKind::Affine => Normalizer::Affine(AffineNormalizer {
                    projection: crate::nn::Dense {
                        w: lookup(&format!("step{si}.norm.proj.w"))?,
                        b: lookup(&format!("step{si}.norm.proj.b"))?,
                    },
                }),
                NormalizerKind::Monotonic => {
                    let read_mlp = |prefix: &str| -> Result<MlpParams> {
                        let mut layers = Vec::new();
                        for li in 0.. {
                            let wname = format!("{prefix}.l{li}.w");
                            if !params.iter().any(|(n, _)| *n == wname) {
                                break;
                            }
                            layers.push(crate::nn::Dense {
                                w: lookup(&wname)?,
                                b: lookup(&format!("{prefix}.l{li}.b"))?,
                            });
                        }
                        Ok(MlpParams { layers, activation: crate::nn::Activation::Elu })
                    };
                    Normalizer::Monotonic(MonotonicNormalizer {
                        integrand: read_mlp(&format!("step{si}.norm.f"))?,
                        offset: read_mlp(&format!("step{si}.norm.beta"))?,
                        quad_points: sm.quad_points.unwrap_or(50),
                    })
                }
            };
            let mask = match &sm.mask {
                MaskManifest::Prescribed(g) => MaskState::Prescribed(g.to_dag()?),
                MaskManifest::Binarized(g) => MaskState::Binarized(g.to_dag()?),
                MaskManifest::Learnable { temperature, alpha, squaring } => {
                    MaskState::Learnable(AdjacencyParam {
                        a: lookup(&format!("step{si}.mask.a"))?,
                        temperature: *temperature,
                        alpha: *alpha,
                        squaring: *squaring,
                    })
                }
            };
            steps.push(FlowStep { conditioner, normalizer, mask });
        }
        Ok((FlowModel { d, steps }, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioners::autoregressive_adjacency;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn prescribed_step(
        d: usize,
        kind: ConditionerKind,
        normalizer: Normalizer,
        mask: Tensor,
        rng: &mut StdRng,
    ) -> FlowStep {
        let embed = match &normalizer {
            Normalizer::Affine(a) => a.projection.w.shape()[0],
            Normalizer::Monotonic(m) => m.integrand.input_size() - 1,
        };
        let conditioner = ConditionerSpec::new(kind, d, embed, &[12], rng).unwrap();
        FlowStep {
            conditioner,
            normalizer,
            mask: MaskState::Prescribed(BinaryDag::from_matrix(mask).unwrap()),
        }
    }

    #[test]
    fn identity_flow_density_is_standard_normal() {
        let mut rng = StdRng::seed_from_u64(0);
        let d = 2;
        let step = prescribed_step(
            d,
            ConditionerKind::Graphical,
            Normalizer::Affine(AffineNormalizer::new(4)),
            autoregressive_adjacency(d),
            &mut rng,
        );
        let model = FlowModel::new(d, vec![step]).unwrap();
        let (logp, z) = model.log_density(&[0.0, 0.0]).unwrap();
        assert!((logp + LOG_2PI).abs() < 1e-12, "logp {logp}");
        assert_eq!(z, vec![0.0, 0.0]);

        // identity flow: logp = sum of standard normal logs at any x
        let x = [0.7, -1.3];
        let (logp, _) = model.log_density(&x).unwrap();
        let expect: f64 = x.iter().map(|v| -0.5 * v * v - 0.5 * LOG_2PI).sum();
        assert!((logp - expect).abs() < 1e-12);
    }

    #[test]
    fn diagonal_jacobian_matches_finite_difference_determinant() {
        // |det J| of the full map by central differences vs exp(sum log_diag),
        // for random graphical flows of small dimension.
        let mut rng = StdRng::seed_from_u64(1);
        use rand::Rng;
        for trial in 0..6 {
            let d = rng.gen_range(2..=5);
            // random DAG mask from a random matrix
            let mut raw = Tensor::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..d {
                    if i != j && rng.gen_bool(0.5) {
                        raw.set(i, j, rng.gen_range(0.2..1.0));
                    }
                }
            }
            let dag = crate::graph::post_process_threshold(&raw);
            let normalizer = if trial % 2 == 0 {
                let mut a = AffineNormalizer::new(6);
                for v in a.projection.w.data_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
                Normalizer::Affine(a)
            } else {
                Normalizer::Monotonic(MonotonicNormalizer::new(6, &[12], 40, &mut rng))
            };
            let step = prescribed_step(
                d,
                ConditionerKind::Graphical,
                normalizer,
                dag.adjacency.clone(),
                &mut rng,
            );
            let model = FlowModel::new(d, vec![step]).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let (logp, _) = model.log_density(&x).unwrap();
            let base: f64 = {
                let z = model.log_density_batch(&Tensor::matrix(1, d, x.clone())).unwrap().z;
                z.row(0).iter().map(|v| -0.5 * v * v - 0.5 * LOG_2PI).sum()
            };
            let log_det = logp - base;

            // finite-difference Jacobian of g
            let h = 1e-5;
            let mut jac = vec![0.0; d * d];
            for j in 0..d {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let zp = model.log_density_batch(&Tensor::matrix(1, d, xp)).unwrap().z;
                let zm = model.log_density_batch(&Tensor::matrix(1, d, xm)).unwrap().z;
                for i in 0..d {
                    jac[i * d + j] = (zp.at(0, i) - zm.at(0, i)) / (2.0 * h);
                }
            }
            let det = determinant(&jac, d).abs();
            let rel = (det.ln() - log_det).abs() / log_det.abs().max(1e-8);
            assert!(rel < 1e-4, "trial {trial}: |det J| {det} vs exp {}", log_det.exp());
        }
    }

    /// Test-local determinant by Gaussian elimination with partial pivoting.
    fn determinant(m: &[f64], d: usize) -> f64 {
        let mut a = m.to_vec();
        let mut det = 1.0;
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&r1, &r2| {
                    a[r1 * d + col].abs().partial_cmp(&a[r2 * d + col].abs()).unwrap()
                })
                .unwrap();
            if a[pivot * d + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for j in 0..d {
                    a.swap(col * d + j, pivot * d + j);
                }
                det = -det;
            }
            det *= a[col * d + col];
            for r in col + 1..d {
                let f = a[r * d + col] / a[col * d + col];
                for j in col..d {
                    a[r * d + j] -= f * a[col * d + j];
                }
            }
        }
        det
    }

    #[test]
    fn empty_graph_sampling_converges_in_one_sweep() {
        let mut rng = StdRng::seed_from_u64(2);
        use rand::Rng;
        let d = 3;
        let mut aff = AffineNormalizer::new(4);
        for v in aff.projection.w.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let step = prescribed_step(
            d,
            ConditionerKind::Graphical,
            Normalizer::Affine(aff),
            Tensor::zeros(&[d, d]),
            &mut rng,
        );
        let model = FlowModel::new(d, vec![step]).unwrap();
        let (_, sweeps) = model.sample_detailed(&[0.3, -0.8, 1.1]).unwrap();
        assert_eq!(sweeps, vec![1]);
    }

    #[test]
    fn autoregressive_sampling_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        use rand::Rng;
        let d = 5;
        let mut aff = AffineNormalizer::new(6);
        for v in aff.projection.w.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let step = prescribed_step(
            d,
            ConditionerKind::Graphical,
            Normalizer::Affine(aff),
            autoregressive_adjacency(d),
            &mut rng,
        );
        let model = FlowModel::new(d, vec![step]).unwrap();
        for _ in 0..20 {
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (x, sweeps) = model.sample_detailed(&z).unwrap();
            assert!(sweeps[0] <= d, "sweeps {sweeps:?}");
            let back = model.log_density_batch(&Tensor::matrix(1, d, x)).unwrap().z;
            for i in 0..d {
                assert!((back.at(0, i) - z[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coupling_sampling_needs_two_sweeps_at_most() {
        let mut rng = StdRng::seed_from_u64(4);
        use rand::Rng;
        let d = 4;
        let mut aff = AffineNormalizer::new(4);
        for v in aff.projection.w.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let step = prescribed_step(
            d,
            ConditionerKind::Coupling { k: 2 },
            Normalizer::Affine(aff),
            crate::conditioners::coupling_adjacency(4, 2),
            &mut rng,
        );
        let model = FlowModel::new(d, vec![step]).unwrap();
        for _ in 0..10 {
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (_, sweeps) = model.sample_detailed(&z).unwrap();
            assert!(sweeps[0] <= 2, "depth-1 mask must converge in <= 2 sweeps");
        }
    }

    #[test]
    fn sampling_requires_binary_masks() {
        let mut rng = StdRng::seed_from_u64(5);
        let d = 3;
        let conditioner =
            ConditionerSpec::new(ConditionerKind::Graphical, d, 4, &[8], &mut rng).unwrap();
        let step = FlowStep {
            conditioner,
            normalizer: Normalizer::Affine(AffineNormalizer::new(4)),
            mask: MaskState::Learnable(AdjacencyParam::init(d, 0.3, 0.7, &mut rng)),
        };
        let model = FlowModel::new(d, vec![step]).unwrap();
        assert!(matches!(model.sample(&[0.0, 0.0, 0.0]), Err(Error::Contract(_))));
        assert!(matches!(model.export_bn(None), Err(Error::Contract(_))));
    }

    #[test]
    fn export_counts_edges() {
        let mut rng = StdRng::seed_from_u64(6);
        let d = 4;
        let step = prescribed_step(
            d,
            ConditionerKind::Coupling { k: 2 },
            Normalizer::Affine(AffineNormalizer::new(4)),
            crate::conditioners::coupling_adjacency(4, 2),
            &mut rng,
        );
        let model = FlowModel::new(d, vec![step]).unwrap();
        let exports = model.export_bn(None).unwrap();
        assert_eq!(exports.len(), 1);
        assert_eq!(exports[0].1.edges.len(), 4);
        assert_eq!(exports[0].0.matches("->").count(), 4);

        let empty = prescribed_step(
            3,
            ConditionerKind::Graphical,
            Normalizer::Affine(AffineNormalizer::new(4)),
            Tensor::zeros(&[3, 3]),
            &mut rng,
        );
        let model = FlowModel::new(3, vec![empty]).unwrap();
        let exports = model.export_bn(None).unwrap();
        assert_eq!(exports[0].1.edges.len(), 0);
        assert!(exports[0].0.contains("\"x1\";"));
    }

    #[test]
    fn permutation_equivariance_of_log_density() {
        // Permuting variables, the prescribed mask, and the first-layer rows
        // of the shared network leaves logp unchanged.
        let mut rng = StdRng::seed_from_u64(7);
        use rand::Rng;
        let d = 4;
        let mut raw = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if i != j && rng.gen_bool(0.5) {
                    raw.set(i, j, rng.gen_range(0.2..1.0));
                }
            }
        }
        let dag = crate::graph::post_process_threshold(&raw);
        let mut aff = AffineNormalizer::new(5);
        for v in aff.projection.w.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let step = prescribed_step(
            d,
            ConditionerKind::Graphical,
            Normalizer::Affine(aff),
            dag.adjacency.clone(),
            &mut rng,
        );
        let model = FlowModel::new(d, vec![step]).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut permuted = model.clone();
        {
            let step_p = &mut permuted.steps[0];
            let w0 = model.steps[0].conditioner.network.layers[0].w.clone();
            let mut w0p = w0.clone();
            for (jnew, &jold) in perm.iter().enumerate() {
                for c in 0..w0.cols() {
                    w0p.set(jnew, c, w0.at(jold, c));
                    w0p.set(d + jnew, c, w0.at(d + jold, c));
                }
            }
            step_p.conditioner.network.layers[0].w = w0p;
            let old_mask = &model.steps[0].mask.eval_matrix();
            let mut mp = Tensor::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..d {
                    mp.set(i, j, old_mask.at(perm[i], perm[j]));
                }
            }
            step_p.mask = MaskState::Prescribed(BinaryDag::from_matrix(mp).unwrap());
        }

        for _ in 0..10 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let xp: Vec<f64> = perm.iter().map(|&j| x[j]).collect();
            let (lp, _) = model.log_density(&x).unwrap();
            let (lpp, _) = permuted.log_density(&xp).unwrap();
            assert!((lp - lpp).abs() < 1e-10, "{lp} vs {lpp}");
        }
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let mut rng = StdRng::seed_from_u64(8);
        for monotonic in [false, true] {
            let normalizer = if monotonic {
                Normalizer::Monotonic(MonotonicNormalizer::new(4, &[12], 50, &mut rng))
            } else {
                let mut a = AffineNormalizer::new(4);
                use rand::Rng;
                for v in a.projection.w.data_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
                Normalizer::Affine(a)
            };
            let step = prescribed_step(
                1,
                ConditionerKind::Graphical,
                normalizer,
                Tensor::zeros(&[1, 1]),
                &mut rng,
            );
            let model = FlowModel::new(1, vec![step]).unwrap();
            // integrate over the x-range mapping to z in [-8, 8]
            let x_lo = match &model.steps[0].normalizer {
                Normalizer::Affine(a) => {
                    let c = model.steps[0].conditioner.embed(&[0.0], &[0.0], 1).unwrap();
                    a.invert(-8.0, &c)
                }
                Normalizer::Monotonic(m) => {
                    let c = model.steps[0].conditioner.embed(&[0.0], &[0.0], 1).unwrap();
                    m.invert(-8.0, &c, 1e-9).unwrap()
                }
            };
            let x_hi = match &model.steps[0].normalizer {
                Normalizer::Affine(a) => {
                    let c = model.steps[0].conditioner.embed(&[0.0], &[0.0], 1).unwrap();
                    a.invert(8.0, &c)
                }
                Normalizer::Monotonic(m) => {
                    let c = model.steps[0].conditioner.embed(&[0.0], &[0.0], 1).unwrap();
                    m.invert(8.0, &c, 1e-9).unwrap()
                }
            };
            let (lo, hi) = if x_lo < x_hi { (x_lo, x_hi) } else { (x_hi, x_lo) };
            let n = 2000;
            let dx = (hi - lo) / n as f64;
            let xs: Vec<f64> = (0..=n).map(|k| lo + dx * k as f64).collect();
            let batch = Tensor::matrix(xs.len(), 1, xs.clone());
            let dens = model.log_density_batch(&batch).unwrap().logp;
            let mut integral = 0.0;
            for k in 0..n {
                integral += 0.5 * (dens[k].exp() + dens[k + 1].exp()) * dx;
            }
            assert!(
                (integral - 1.0).abs() < 1e-3,
                "monotonic={monotonic}: integral {integral}"
            );
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut rng = StdRng::seed_from_u64(9);
        let d = 3;
        let step = prescribed_step(
            d,
            ConditionerKind::Graphical,
            Normalizer::Monotonic(MonotonicNormalizer::new(4, &[8], 24, &mut rng)),
            autoregressive_adjacency(d),
            &mut rng,
        );
        let model = FlowModel::new(d, vec![step]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("model.json");
        let ppath = dir.path().join("params.bin");
        model.save(&mpath, &ppath, None, None, Some(9)).unwrap();
        let (loaded, _) = FlowModel::load(&mpath, &ppath).unwrap();
        let x = [0.4, -0.2, 1.0];
        let (a, _) = model.log_density(&x).unwrap();
        let (b, _) = loaded.log_density(&x).unwrap();
        assert_eq!(a, b, "loaded model must reproduce densities exactly");
    }
}
