//! Invertible scalar transformations applied per dimension: affine maps and
//! unconstrained monotonic networks integrated by Clenshaw-Curtis quadrature.

use crate::autodiff::{elu, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Dense, MlpParams, MlpTapeIds};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Positivity floor added to the ELU-shifted integrand output.
pub const INTEGRAND_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    Affine,
    Monotonic,
}

// --- Clenshaw-Curtis ----------------------------------------------------------

/// Clenshaw-Curtis nodes and weights on [-1, 1] for `n` points (n >= 2).
/// Exact for polynomials up to degree n-1.
pub fn clenshaw_curtis(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let big_n = n - 1;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for j in 0..=big_n {
        let theta = std::f64::consts::PI * j as f64 / big_n as f64;
        nodes.push(theta.cos());
        let cj = if j == 0 || j == big_n { 1.0 } else { 2.0 };
        let mut sum = 0.0;
        for k in 1..=big_n / 2 {
            let bk = if 2 * k == big_n { 1.0 } else { 2.0 };
            sum += bk * (2.0 * k as f64 * theta).cos() / ((4 * k * k - 1) as f64);
        }
        weights.push(cj / big_n as f64 * (1.0 - sum));
    }
    (nodes, weights)
}

/// Clenshaw-Curtis estimate of the integral of `f` from `a` to `b` on `n`
/// nodes. Sign-correct when `b < a`.
pub fn quadrature(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> Result<f64> {
    if n < 8 {
        return Err(Error::Contract(format!("quadrature requires n >= 8 nodes, got {n}")));
    }
    let (nodes, weights) = clenshaw_curtis(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (u, w) in nodes.iter().zip(&weights) {
        let t = mid + half * u;
        let v = f(t);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("integrand not finite at t = {t}")));
        }
        acc += w * v;
    }
    Ok(half * acc)
}

// --- affine -------------------------------------------------------------------

/// z = x * exp(s) + m with (m, s) a linear projection of the embedding.
/// Zero-initialized, so a fresh normalizer is the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNormalizer {
    pub projection: Dense,
}

impl AffineNormalizer {
    pub fn new(embed_size: usize) -> Self {
        AffineNormalizer {
            projection: Dense {
                w: Tensor::zeros(&[embed_size, 2]),
                b: Tensor::zeros(&[2]),
            },
        }
    }

    fn project(&self, c: &[f64]) -> (f64, f64) {
        let w = &self.projection.w;
        let mut m = self.projection.b.data()[0];
        let mut s = self.projection.b.data()[1];
        for (j, cv) in c.iter().enumerate() {
            m += cv * w.at(j, 0);
            s += cv * w.at(j, 1);
        }
        (m, s)
    }

    /// Returns (z, log_diag) where log_diag = s = log dz/dx.
    pub fn apply(&self, x: f64, c: &[f64]) -> (f64, f64) {
        let (m, s) = self.project(c);
        (x * s.exp() + m, s)
    }

    pub fn invert(&self, z: f64, c: &[f64]) -> f64 {
        let (m, s) = self.project(c);
        (z - m) * (-s).exp()
    }
}

// --- monotonic (UMNN) ----------------------------------------------------------

/// z = integral of a strictly positive network from 0 to x, plus an offset
/// network of the embedding. Positivity comes from ELU(u) + 1 + eps on the
/// integrand output.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicNormalizer {
    /// Integrand network, input [t, c], scalar output (pre-positivity).
    pub integrand: MlpParams,
    /// Offset network beta(c), scalar output.
    pub offset: MlpParams,
    /// Quadrature node count.
    pub quad_points: usize,
}

impl MonotonicNormalizer {
    pub fn new(
        embed_size: usize,
        integrand_hidden: &[usize],
        quad_points: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut f_sizes = vec![1 + embed_size];
        f_sizes.extend_from_slice(integrand_hidden);
        f_sizes.push(1);
        let mut b_sizes = vec![embed_size];
        b_sizes.extend_from_slice(integrand_hidden);
        b_sizes.push(1);
        MonotonicNormalizer {
            integrand: MlpParams::init(&f_sizes, rng),
            offset: MlpParams::init(&b_sizes, rng),
            quad_points,
        }
    }

    /// Strictly positive integrand value f(t, c).
    pub fn integrand_at(&self, t: f64, c: &[f64]) -> f64 {
        let mut input = Vec::with_capacity(1 + c.len());
        input.push(t);
        input.extend_from_slice(c);
        elu(self.integrand.eval(&input)[0]) + 1.0 + INTEGRAND_EPS
    }

    pub fn offset_at(&self, c: &[f64]) -> f64 {
        self.offset.eval(c)[0]
    }

    /// Returns (z, log_diag) with z = ∫_0^x f(t,c) dt + beta(c) and
    /// log_diag = log f(x, c).
    pub fn apply(&self, x: f64, c: &[f64]) -> Result<(f64, f64)> {
        // Batch the integrand evaluations across the quadrature nodes.
        let (nodes, weights) = clenshaw_curtis(self.quad_points);
        let mut input = Tensor::zeros(&[self.quad_points, 1 + c.len()]);
        for (k, u) in nodes.iter().enumerate() {
            input.set(k, 0, x * 0.5 * (u + 1.0));
            for (j, cv) in c.iter().enumerate() {
                input.set(k, 1 + j, *cv);
            }
        }
        let raw = self.integrand.eval_batch(&input);
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            let f = elu(raw.at(k, 0)) + 1.0 + INTEGRAND_EPS;
            if !f.is_finite() {
                return Err(Error::Numeric(format!(
                    "integrand not finite at t = {}",
                    input.at(k, 0)
                )));
            }
            acc += w * f;
        }
        let z = x * 0.5 * acc + self.offset_at(c);
        let log_diag = self.integrand_at(x, c).ln();
        Ok((z, log_diag))
    }

    /// Invert z = g(x; c) by doubling bracket expansion from [-1, 1]
    /// followed by bisection until |g(x) - z| < tol.
    pub fn invert(&self, z: f64, c: &[f64], tol: f64) -> Result<f64> {
        if tol <= 0.0 {
            return Err(Error::Contract(format!("invert requires tol > 0, got {tol}")));
        }
        let g = |x: f64| -> Result<f64> { Ok(self.apply(x, c)?.0) };
        let mut lo = -1.0;
        let mut hi = 1.0;
        let mut glo = g(lo)?;
        let mut ghi = g(hi)?;
        let mut doublings = 0;
        while glo > z {
            lo *= 2.0;
            glo = g(lo)?;
            doublings += 1;
            if doublings > 64 {
                return Err(Error::Divergence(format!(
                    "no bracket below after 64 doublings (z = {z})"
                )));
            }
        }
        while ghi < z {
            hi *= 2.0;
            ghi = g(hi)?;
            doublings += 1;
            if doublings > 64 {
                return Err(Error::Divergence(format!(
                    "no bracket above after 64 doublings (z = {z})"
                )));
            }
        }
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..200 {
            mid = 0.5 * (lo + hi);
            let gm = g(mid)?;
            if (gm - z).abs() < tol {
                return Ok(mid);
            }
            if gm < z {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo).abs() < 1e-15 * hi.abs().max(lo.abs()).max(1.0) {
                break;
            }
        }
        let gm = g(mid)?;
        if (gm - z).abs() < tol {
            Ok(mid)
        } else {
            Err(Error::Divergence(format!(
                "bisection stalled: |g(x) - z| = {} above tol {tol}",
                (gm - z).abs()
            )))
        }
    }
}

// --- tape paths used by the flow ------------------------------------------------

/// Tape ids for one normalizer's parameters.
pub enum NormalizerBindings {
    Affine { w: NodeId, b: NodeId },
    Monotonic { integrand: MlpTapeIds, offset: MlpTapeIds },
}

/// Batched affine transform on the tape. `x` is the flat [r] vector of
/// inputs, `c` the [r, embed] embeddings. Returns (z, log_diag) as [r]
/// vectors.
pub fn affine_on_tape(
    tape: &mut Tape,
    norm: &AffineNormalizer,
    x: NodeId,
    c: NodeId,
    bind: &NormalizerBindings,
) -> Result<(NodeId, NodeId)> {
    let NormalizerBindings::Affine { w, b } = bind else {
        return Err(Error::Contract("affine_on_tape needs affine bindings".into()));
    };
    let _ = norm;
    let proj = tape.matmul(c, *w)?;
    let proj = tape.add_row(proj, *b)?;
    let e_m = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let e_s = tape.constant(Tensor::vector(vec![0.0, 1.0]));
    let m = tape.matmul(proj, e_m)?;
    let s = tape.matmul(proj, e_s)?;
    let es = tape.exp(s);
    let scaled = tape.mul(x, es)?;
    let z = tape.add(scaled, m)?;
    Ok((z, s))
}

/// Batched monotonic transform on the tape: quadrature over constant node
/// positions with the upper-limit derivative supplied analytically.
pub fn monotonic_on_tape(
    tape: &mut Tape,
    norm: &MonotonicNormalizer,
    x: NodeId,
    c: NodeId,
    bind: &NormalizerBindings,
) -> Result<(NodeId, NodeId)> {
    let NormalizerBindings::Monotonic { integrand, offset } = bind else {
        return Err(Error::Contract("monotonic_on_tape needs monotonic bindings".into()));
    };
    let r = tape.value(x).shape()[0];
    let nq = norm.quad_points;
    let (nodes, weights) = clenshaw_curtis(nq);

    // Node positions are constants of the current x values (Leibniz shortcut:
    // d z/d x comes from the integrand at the upper limit, not from here).
    let mut t_col = Tensor::zeros(&[r * nq, 1]);
    for i in 0..r {
        let xi = tape.value(x).data()[i];
        for (k, u) in nodes.iter().enumerate() {
            t_col.set(i * nq + k, 0, xi * 0.5 * (u + 1.0));
        }
    }
    let t_c = tape.constant(t_col);
    let c_rep = tape.repeat_rows(c, nq)?;
    let f_in = tape.concat_cols(t_c, c_rep)?;
    let raw = norm.integrand.forward_batch(tape, f_in, integrand)?;
    let raw_e = tape.elu(raw);
    let ones = tape.constant(Tensor::filled(&[r * nq, 1], 1.0 + INTEGRAND_EPS));
    let fpos = tape.add(raw_e, ones)?;
    if !tape.value(fpos).is_finite() {
        return Err(Error::Numeric("integrand not finite inside quadrature".into()));
    }
    let fmat = tape.reshape(fpos, vec![r, nq])?;

    // Integrand at the upper limits, reused for both dz/dx and log_diag.
    let x_col = tape.reshape(x, vec![r, 1])?;
    let fx_in = tape.concat_cols(x_col, c)?;
    let fx_raw = norm.integrand.forward_batch(tape, fx_in, integrand)?;
    let fx_e = tape.elu(fx_raw);
    let ones_r = tape.constant(Tensor::filled(&[r, 1], 1.0 + INTEGRAND_EPS));
    let fx_pos = tape.add(fx_e, ones_r)?;
    let fx_vec = tape.reshape(fx_pos, vec![r])?;

    let integral = tape.quadrature_ftc(x, fmat, fx_vec, weights)?;
    let beta = norm.offset.forward_batch(tape, c, offset)?;
    let beta_vec = tape.reshape(beta, vec![r])?;
    let z = tape.add(integral, beta_vec)?;
    let log_diag = tape.ln(fx_vec);
    Ok((z, log_diag))
}
