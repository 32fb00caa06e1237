//! Shared multi-layer perceptrons and the Adam optimizer with decoupled
//! weight decay.

use crate::autodiff::{elu, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Hidden activation used throughout: ELU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
}

/// One dense layer: `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// A fully connected network with ELU activations on hidden layers and a
/// linear final layer. The same parameters serve every output index; callers
/// append a one-hot index block to the input to distinguish them.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl MlpParams {
    /// Initialize with uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for win in sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Tensor::matrix(
                fan_in,
                fan_out,
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
            );
            let b = Tensor::vector((0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect());
            layers.push(Dense { w, b });
        }
        MlpParams { layers, activation: Activation::Elu }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|win| Dense {
                w: Tensor::zeros(&[win[0], win[1]]),
                b: Tensor::zeros(&[win[1]]),
            })
            .collect();
        MlpParams { layers, activation: Activation::Elu }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].w.shape()[0]
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().w.shape()[1]
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_size()];
        sizes.extend(self.layers.iter().map(|l| l.w.shape()[1]));
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.numel() + l.b.numel()).sum()
    }

    /// Forward pass for a single input vector, on the tape. Parameters are
    /// bound as fresh leaves so the result is differentiable with respect to
    /// both the input and the parameters; use [`MlpParams::forward_vec`] to
    /// reuse existing bindings.
    pub fn forward(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let ids = self.bind(tape);
        self.forward_vec(tape, input, &ids)
    }

    /// Forward pass for a single input vector with parameters already bound.
    pub fn forward_vec(&self, tape: &mut Tape, input: NodeId, ids: &MlpTapeIds) -> Result<NodeId> {
        let got = tape.value(input).shape().to_vec();
        if got != [self.input_size()] {
            return Err(Error::Shape { op: "mlp_forward", lhs: got, rhs: vec![self.input_size()] });
        }
        let mut h = input;
        for (li, (w, b)) in ids.layers.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add(h, *b)?;
            if li + 1 < self.layers.len() {
                h = tape.elu(h);
            }
        }
        Ok(h)
    }

    /// Batched forward pass: `input` is [rows, in], layer parameters are
    /// registered via `ids` so gradients reach them.
    pub fn forward_batch(&self, tape: &mut Tape, input: NodeId, ids: &MlpTapeIds) -> Result<NodeId> {
        let mut h = input;
        for (li, (w, b)) in ids.layers.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_row(h, *b)?;
            if li + 1 < self.layers.len() {
                h = tape.elu(h);
            }
        }
        Ok(h)
    }

    /// Register all layer parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> MlpTapeIds {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
            .collect();
        MlpTapeIds { layers }
    }

    /// Register all layer parameters as constants (no gradients tracked).
    pub fn bind_const(&self, tape: &mut Tape) -> MlpTapeIds {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.constant(l.w.clone()), tape.constant(l.b.clone())))
            .collect();
        MlpTapeIds { layers }
    }

    /// Plain evaluation without a tape, for sampling and inversion loops.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_size());
        let mut h = input.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.w.shape()[0], layer.w.shape()[1]);
            let mut out = layer.b.data().to_vec();
            for (i, &hv) in h.iter().enumerate().take(fan_in) {
                if hv == 0.0 {
                    continue;
                }
                let wrow = &layer.w.data()[i * fan_out..(i + 1) * fan_out];
                for (o, &wv) in out.iter_mut().zip(wrow) {
                    *o += hv * wv;
                }
            }
            if li + 1 < self.layers.len() {
                for o in out.iter_mut() {
                    *o = elu(*o);
                }
            }
            h = out;
        }
        h
    }

    /// Batched plain evaluation: `input` is [rows, in], returns [rows, out].
    pub fn eval_batch(&self, input: &Tensor) -> Tensor {
        let rows = input.rows();
        let mut h = input.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = crate::autodiff::matmul(&h, &layer.w).expect("eval_batch shapes");
            let fan_out = layer.b.numel();
            for r in 0..rows {
                for j in 0..fan_out {
                    let v = out.at(r, j) + layer.b.data()[j];
                    out.set(r, j, if li + 1 < self.layers.len() { elu(v) } else { v });
                }
            }
            h = out;
        }
        h
    }
}

/// Tape ids of one network's parameters.
pub struct MlpTapeIds {
    pub layers: Vec<(NodeId, NodeId)>,
}

/// Concatenate a masked input vector with a one-hot encoding of the output
/// index. `index` is the 1-based position of the hot entry, matching the
/// variable numbering x_1..x_d.
pub fn one_hot_concat(x_masked: &[f64], index: usize) -> Result<Vec<f64>> {
    let d = x_masked.len();
    if index == 0 || index > d {
        return Err(Error::Contract(format!(
            "one_hot_concat index {index} out of range 1..={d}"
        )));
    }
    let mut out = Vec::with_capacity(2 * d);
    out.extend_from_slice(x_masked);
    out.extend((0..d).map(|j| if j + 1 == index { 1.0 } else { 0.0 }));
    Ok(out)
}

/// Adam optimizer state for a list of parameter tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], learning_rate: f64, weight_decay: f64) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam step with decoupled weight decay: parameters first shrink by
/// `lr * wd * param`, then receive the bias-corrected Adam delta.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let lr = state.learning_rate;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        p.require_same_shape(g, "adam_step")?;
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            if state.weight_decay != 0.0 {
                pd[i] -= lr * state.weight_decay * pd[i];
            }
            md[i] = state.beta1 * md[i] + (1.0 - state.beta1) * gd[i];
            vd[i] = state.beta2 * vd[i] + (1.0 - state.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

// --- parameter serialization -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    format: String,
    activation: Activation,
    seed: Option<u64>,
    entries: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the binary section.
    offset: usize,
}

/// Write named tensors as a JSON header followed by little-endian f64 data.
pub fn write_params<W: Write>(
    mut w: W,
    named: &[(String, &Tensor)],
    seed: Option<u64>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, t) in named {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = ParamHeader {
        format: "graphflow-params-v1".into(),
        activation: Activation::Elu,
        seed,
        entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(b"GFP1")?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read back tensors written by [`write_params`], in file order.
pub fn read_params<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"GFP1" {
        return Err(Error::Serde("bad parameter file magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_buf = vec![0u8; header_len];
    r.read_exact(&mut header_buf)?;
    let header: ParamHeader = serde_json::from_slice(&header_buf)?;
    if header.format != "graphflow-params-v1" {
        return Err(Error::Serde(format!("unknown parameter format {}", header.format)));
    }
    let mut out = Vec::with_capacity(header.entries.len());
    for entry in &header.entries {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = MlpParams::zeros(&[4, 8, 3]);
        let out = mlp.eval(&[1.0, -2.0, 0.5, 3.0]);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_layer_returns_input() {
        let mut mlp = MlpParams::zeros(&[3, 3]);
        mlp.layers[0].w = Tensor::identity(3);
        let input = vec![0.7, -1.1, 2.2];
        let out = mlp.eval(&input);
        assert_eq!(out, input);
        // and via the tape
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(input.clone()));
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), input.as_slice());
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let mlp = MlpParams::zeros(&[4, 2]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(mlp.forward(&mut tape, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_input_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let mlp = MlpParams::init(&[2, 16, 1], &mut rng);
        let x0 = [0.4, -0.9];

        let f = |x: &[f64]| mlp.eval(x)[0];
        let h = 1e-5;
        let mut fd = [0.0; 2];
        for i in 0..2 {
            let mut xp = x0;
            xp[i] += h;
            let mut xm = x0;
            xm[i] -= h;
            fd[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(x0.to_vec()));
        let y = mlp.forward(&mut tape, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        for (ad, fdv) in g.of(x).unwrap().data().iter().zip(&fd) {
            let rel = (ad - fdv).abs() / fdv.abs().max(1e-8);
            assert!(rel < 1e-5, "ad {ad} vs fd {fdv}");
        }
    }

    #[test]
    fn batch_eval_matches_single_eval() {
        let mut rng = StdRng::seed_from_u64(9);
        let mlp = MlpParams::init(&[3, 10, 2], &mut rng);
        let rows = vec![vec![0.1, 0.2, -0.3], vec![1.0, -1.0, 0.5]];
        let batch = mlp.eval_batch(&Tensor::from_rows(&rows));
        for (i, row) in rows.iter().enumerate() {
            let single = mlp.eval(row);
            for (a, b) in batch.row(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn one_hot_concat_examples() {
        assert_eq!(
            one_hot_concat(&[0.0, 0.0, 0.0], 2).unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(
            one_hot_concat(&[1.5, -0.5], 1).unwrap(),
            vec![1.5, -0.5, 1.0, 0.0]
        );
        let v = one_hot_concat(&[0.0; 4], 4).unwrap();
        assert_eq!(&v[4..], &[0.0, 0.0, 0.0, 1.0]);
        assert!(one_hot_concat(&[0.0; 3], 0).is_err());
        assert!(one_hot_concat(&[0.0; 3], 4).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.0, 0.0]);
        let mut state = AdamState::new(&[&p], 0.0012, 0.0);
        adam_step(&mut [&mut p], &[g], &mut state).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // With zero moments, the first bias-corrected update is
        // lr * g/|g| up to the epsilon guard.
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![0.3, -7.0]);
        let lr = 0.001;
        let mut state = AdamState::new(&[&p], lr, 0.0);
        adam_step(&mut [&mut p], &[g.clone()], &mut state).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expect = -lr * gv.signum();
            assert!((pv - expect).abs() < 1e-6, "step {pv} vs {expect}");
        }
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut p = Tensor::scalar(0.5);
        let g = Tensor::scalar(2.0);
        let mut state = AdamState::new(&[&p], 0.01, 0.0);
        let mut last = p.item();
        for _ in 0..100 {
            adam_step(&mut [&mut p], &[g.clone()], &mut state).unwrap();
            assert!(p.item() < last, "must decrease against +gradient");
            last = p.item();
        }
    }

    #[test]
    fn adam_is_elementwise_under_permutation() {
        let mut p1 = Tensor::vector(vec![0.3, -1.0, 2.0, 0.7]);
        let g1 = Tensor::vector(vec![1.0, -0.5, 0.25, 3.0]);
        let mut p2 = Tensor::vector(vec![0.7, 2.0, -1.0, 0.3]);
        let g2 = Tensor::vector(vec![3.0, 0.25, -0.5, 1.0]);
        let mut s1 = AdamState::new(&[&p1], 0.002, 0.1);
        let mut s2 = AdamState::new(&[&p2], 0.002, 0.1);
        adam_step(&mut [&mut p1], &[g1], &mut s1).unwrap();
        adam_step(&mut [&mut p2], &[g2], &mut s2).unwrap();
        let perm = [3usize, 2, 1, 0];
        for (i, &pi) in perm.iter().enumerate() {
            assert_eq!(p1.data()[pi], p2.data()[i]);
        }
    }

    #[test]
    fn params_roundtrip_through_binary_container() {
        let mut rng = StdRng::seed_from_u64(1);
        let mlp = MlpParams::init(&[3, 5, 2], &mut rng);
        let named: Vec<(String, &Tensor)> = vec![
            ("l0.w".into(), &mlp.layers[0].w),
            ("l0.b".into(), &mlp.layers[0].b),
            ("l1.w".into(), &mlp.layers[1].w),
            ("l1.b".into(), &mlp.layers[1].b),
        ];
        let mut buf = Vec::new();
        write_params(&mut buf, &named, Some(1)).unwrap();
        let back = read_params(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 4);
        for ((name, t), (bname, bt)) in named.iter().zip(&back) {
            assert_eq!(name, bname);
            assert_eq!(*t, bt);
        }
    }
}
