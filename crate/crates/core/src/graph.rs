//! Learnable adjacency matrices: stochastic binarization, acyclicity
//! penalty, thresholding post-process, topological ordering and depth.

use crate::autodiff::{matrix_power_trace, sigmoid, NodeId, Tape, Tensor, LN_CLAMP};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Entries of the normalized gate below this are treated as exact zeros:
/// no information flows and no gradient is propagated through them.
pub const GATE_FLOOR: f64 = 1e-12;

/// How the squashing of adjacency weights composes with the squared entry.
///
/// `Single` computes `2*(sigmoid(2*a^2) - 1/2)`; `DoubleLiteral` squares the
/// already-squared entry again, `2*(sigmoid(2*a^4) - 1/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateSquaring {
    Single,
    DoubleLiteral,
}

/// A real-valued adjacency matrix with frozen zero diagonal, together with
/// the temperature of its stochastic relaxation and the scaling of the
/// acyclicity penalty.
#[derive(Clone, Debug)]
pub struct AdjacencyParam {
    /// Free parameters; the diagonal stays exactly zero.
    pub a: Tensor,
    /// Gumbel-Softmax temperature, 0.5 by default.
    pub temperature: f64,
    /// Penalty scaling, 1/d by default.
    pub alpha: f64,
    pub squaring: GateSquaring,
}

impl AdjacencyParam {
    /// Random initialization of the off-diagonal entries in `[lo, hi)`.
    pub fn init(d: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let mut a = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    a.set(i, j, rng.gen_range(lo..hi));
                }
            }
        }
        AdjacencyParam {
            a,
            temperature: 0.5,
            alpha: 1.0 / d as f64,
            squaring: GateSquaring::Single,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    fn gate_of(&self, v: f64) -> f64 {
        let sq = match self.squaring {
            GateSquaring::Single => v * v,
            GateSquaring::DoubleLiteral => v * v * v * v,
        };
        2.0 * (sigmoid(2.0 * sq) - 0.5)
    }

    /// Deterministic normalized gates in [0, 1): `2*(sigmoid(2 a^2) - 1/2)`
    /// entrywise, zero diagonal. Gates below [`GATE_FLOOR`] are exact zeros,
    /// matching the stochastic door.
    pub fn gate_matrix(&self) -> Tensor {
        let d = self.dim();
        let mut s = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let g = self.gate_of(self.a.at(i, j));
                    if g >= GATE_FLOOR {
                        s.set(i, j, g);
                    }
                }
            }
        }
        s
    }

    /// The raw weights with entries zeroed wherever the gate passes less
    /// than `gate_floor` of the mask mass: those doors were effectively shut
    /// during training.
    pub fn effective_weights(&self, gate_floor: f64) -> Tensor {
        let d = self.dim();
        let mut out = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if i != j && self.gate_of(self.a.at(i, j)) >= gate_floor {
                    out.set(i, j, self.a.at(i, j));
                }
            }
        }
        out
    }

    /// One stochastic relaxed mask: entrywise
    /// `sigmoid(((log s + g1) - (log(1-s) + g2)) / T)` with s the gate and
    /// g1, g2 standard Gumbel draws. Entries whose gate is below
    /// [`GATE_FLOOR`] are exact zeros regardless of the draws.
    pub fn stochastic_mask(&self, rng: &mut impl Rng) -> Tensor {
        let draws = GumbelDraws::sample(self.dim(), rng);
        self.stochastic_mask_with(&draws)
    }

    /// Deterministic variant given fixed Gumbel draws, used by training (one
    /// draw per batch) and by gradient checks.
    pub fn stochastic_mask_with(&self, draws: &GumbelDraws) -> Tensor {
        let d = self.dim();
        let mut out = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let s = self.gate_of(self.a.at(i, j));
                if s < GATE_FLOOR {
                    continue;
                }
                let logit = (s.max(LN_CLAMP).ln() + draws.g1.at(i, j))
                    - ((1.0 - s).max(LN_CLAMP).ln() + draws.g2.at(i, j));
                out.set(i, j, sigmoid(logit / self.temperature));
            }
        }
        out
    }

    /// Tape version of [`AdjacencyParam::stochastic_mask_with`]: records the
    /// relaxed mask as a function of the adjacency leaf `a_id` so gradients
    /// reach the adjacency. Gumbel draws are constants.
    pub fn mask_on_tape(&self, tape: &mut Tape, a_id: NodeId, draws: &GumbelDraws) -> Result<NodeId> {
        let d = self.dim();
        let s = self.gate_on_tape(tape, a_id)?;
        // Zero out entries whose gate is numerically zero (value and grad).
        let mut keep = Tensor::ones(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if i == j || self.gate_of(self.a.at(i, j)) < GATE_FLOOR {
                    keep.set(i, j, 0.0);
                }
            }
        }
        let ones = tape.constant(Tensor::ones(&[d, d]));
        let one_minus_s = tape.sub(ones, s)?;
        let log_s = tape.ln(s);
        let log_1ms = tape.ln(one_minus_s);
        let g1 = tape.constant(draws.g1.clone());
        let g2 = tape.constant(draws.g2.clone());
        let lhs = tape.add(log_s, g1)?;
        let rhs = tape.add(log_1ms, g2)?;
        let diff = tape.sub(lhs, rhs)?;
        let scaled = tape.scale(diff, 1.0 / self.temperature);
        let mask = tape.sigmoid(scaled);
        let keep_c = tape.constant(keep);
        tape.mul(mask, keep_c)
    }

    /// Deterministic gate matrix on the tape (no Gumbel noise). Entries whose
    /// gate sits below [`GATE_FLOOR`] are zeroed in value and gradient, as in
    /// the stochastic path.
    pub fn gate_on_tape(&self, tape: &mut Tape, a_id: NodeId) -> Result<NodeId> {
        let d = self.dim();
        let mut offdiag = Tensor::ones(&[d, d]);
        for i in 0..d {
            offdiag.set(i, i, 0.0);
            for j in 0..d {
                if i != j && self.gate_of(self.a.at(i, j)) < GATE_FLOOR {
                    offdiag.set(i, j, 0.0);
                }
            }
        }
        let offdiag_c = tape.constant(offdiag);
        let a_eff = tape.mul(a_id, offdiag_c)?;
        let sq = match self.squaring {
            GateSquaring::Single => tape.pow(a_eff, 2.0),
            GateSquaring::DoubleLiteral => tape.pow(a_eff, 4.0),
        };
        let scaled = tape.scale(sq, 2.0);
        let sig = tape.sigmoid(scaled);
        let half = tape.constant(Tensor::filled(&[d, d], 0.5));
        let centered = tape.sub(sig, half)?;
        Ok(tape.scale(centered, 2.0))
    }
}

/// A pair of standard-Gumbel matrices, one draw of the mask noise.
#[derive(Clone, Debug)]
pub struct GumbelDraws {
    pub g1: Tensor,
    pub g2: Tensor,
}

impl GumbelDraws {
    pub fn sample(d: usize, rng: &mut impl Rng) -> Self {
        let mut gen = || {
            let data = (0..d * d)
                .map(|_| {
                    // inverse-CDF: -ln(-ln(u))
                    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                    -(-u.ln()).ln()
                })
                .collect();
            Tensor::matrix(d, d, data)
        };
        GumbelDraws { g1: gen(), g2: gen() }
    }
}

/// Smooth cyclicity measure `tr((I + alpha*M)^d) - d` of a non-negative
/// matrix. Zero exactly iff the weighted graph is acyclic.
pub fn acyclicity_penalty(m: &Tensor, alpha: f64) -> Result<f64> {
    if let Some(bad) = m.data().iter().find(|v| **v < 0.0) {
        return Err(Error::Contract(format!(
            "acyclicity penalty requires non-negative entries, found {bad}"
        )));
    }
    let d = m.rows();
    let (value, _) = matrix_power_trace(m, alpha, d)?;
    Ok(value)
}

/// A binary adjacency matrix verified acyclic, with its topological order
/// and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryDag {
    /// adjacency[i][j] = true means an edge j -> i (j is a parent of i).
    pub adjacency: Tensor,
    pub order: Vec<usize>,
    pub depth: usize,
}

impl BinaryDag {
    pub fn from_matrix(adjacency: Tensor) -> Result<Self> {
        let order = topological_order(&adjacency)?;
        let depth = dag_depth_with_order(&adjacency, &order);
        Ok(BinaryDag { adjacency, order, depth })
    }

    pub fn dim(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.data().iter().filter(|v| **v != 0.0).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let d = self.dim();
        let mut out = Vec::new();
        for i in 0..d {
            for j in 0..d {
                if self.adjacency.at(i, j) != 0.0 {
                    out.push((j, i)); // parent -> child
                }
            }
        }
        out
    }
}

/// Threshold a real matrix into the sparsest binary DAG: edges are entries
/// with `|a_ij|` strictly above the smallest candidate threshold that makes
/// the graph acyclic. Candidates are the sorted absolute values present in
/// the matrix (plus zero), so the result is exact.
pub fn post_process_threshold(a: &Tensor) -> BinaryDag {
    let d = a.rows();
    let mut candidates: Vec<f64> = Vec::with_capacity(d * d + 1);
    candidates.push(0.0);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                candidates.push(a.at(i, j).abs());
            }
        }
    }
    candidates.sort_by(|x, y| x.partial_cmp(y).unwrap());
    candidates.dedup();

    for tau in candidates {
        let mut bin = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if i != j && a.at(i, j).abs() > tau {
                    bin.set(i, j, 1.0);
                }
            }
        }
        if let Ok(order) = topological_order(&bin) {
            let depth = dag_depth_with_order(&bin, &order);
            return BinaryDag { adjacency: bin, order, depth };
        }
    }
    unreachable!("the empty graph is always acyclic")
}

/// Kahn ordering with smallest-index tie-breaks. Every parent precedes its
/// children. On cyclic input the error names one cycle.
pub fn topological_order(adjacency: &Tensor) -> Result<Vec<usize>> {
    let d = adjacency.rows();
    // indegree of i = number of parents = nonzeros in row i
    let mut indeg: Vec<usize> = (0..d)
        .map(|i| (0..d).filter(|&j| adjacency.at(i, j) != 0.0).count())
        .collect();
    let mut placed = vec![false; d];
    let mut order = Vec::with_capacity(d);
    for _ in 0..d {
        let Some(next) = (0..d).find(|&i| !placed[i] && indeg[i] == 0) else {
            return Err(Error::Cycle { cycle: find_cycle(adjacency, &placed) });
        };
        placed[next] = true;
        order.push(next);
        for i in 0..d {
            if !placed[i] && adjacency.at(i, next) != 0.0 {
                indeg[i] -= 1;
            }
        }
    }
    Ok(order)
}

/// Length of the longest directed path (in edges).
pub fn dag_depth(adjacency: &Tensor) -> Result<usize> {
    let order = topological_order(adjacency)?;
    Ok(dag_depth_with_order(adjacency, &order))
}

fn dag_depth_with_order(adjacency: &Tensor, order: &[usize]) -> usize {
    let d = adjacency.rows();
    let mut depth = vec![0usize; d];
    for &node in order {
        let mut best = 0usize;
        for j in 0..d {
            if adjacency.at(node, j) != 0.0 {
                best = best.max(depth[j] + 1);
            }
        }
        depth[node] = best;
    }
    depth.into_iter().max().unwrap_or(0)
}

/// Locate one directed cycle among the nodes not yet placed by Kahn.
fn find_cycle(adjacency: &Tensor, placed: &[bool]) -> Vec<usize> {
    let d = adjacency.rows();
    let start = (0..d).find(|&i| !placed[i]).expect("a cycle exists");
    // Walk parent pointers; within the leftover subgraph every node has a
    // parent, so the walk must revisit a node.
    let mut seen_at = vec![usize::MAX; d];
    let mut path = Vec::new();
    let mut cur = start;
    loop {
        if seen_at[cur] != usize::MAX {
            return path[seen_at[cur]..].to_vec();
        }
        seen_at[cur] = path.len();
        path.push(cur);
        cur = (0..d)
            .find(|&j| !placed[j] && adjacency.at(cur, j) != 0.0)
            .expect("unplaced nodes keep at least one unplaced parent");
    }
}

// --- exports -----------------------------------------------------------------

/// Export schema shared by the JSON graph format and checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GraphExport {
    pub d: usize,
    /// Directed edges as [parent, child] pairs, 0-based.
    pub edges: Vec<[usize; 2]>,
    pub order: Vec<usize>,
    pub depth: usize,
}

impl GraphExport {
    pub fn from_dag(dag: &BinaryDag) -> Self {
        GraphExport {
            d: dag.dim(),
            edges: dag.edges().iter().map(|&(p, c)| [p, c]).collect(),
            order: dag.order.clone(),
            depth: dag.depth,
        }
    }

    /// Rebuild the binary matrix; validates acyclicity.
    pub fn to_dag(&self) -> Result<BinaryDag> {
        let mut m = Tensor::zeros(&[self.d, self.d]);
        for &[p, c] in &self.edges {
            if p >= self.d || c >= self.d {
                return Err(Error::Contract(format!(
                    "edge [{p}, {c}] out of range for d={}",
                    self.d
                )));
            }
            m.set(c, p, 1.0);
        }
        BinaryDag::from_matrix(m)
    }
}

/// DOT text with one node per variable and one edge per 1-entry.
pub fn to_dot(dag: &BinaryDag, names: Option<&[String]>) -> String {
    let d = dag.dim();
    let name = |i: usize| -> String {
        match names {
            Some(ns) if i < ns.len() => ns[i].clone(),
            _ => format!("x{}", i + 1),
        }
    };
    let mut out = String::from("digraph bn {\n");
    for i in 0..d {
        out.push_str(&format!("  \"{}\";\n", name(i)));
    }
    for (p, c) in dag.edges() {
        out.push_str(&format!("  \"{}\" -> \"{}\";\n", name(p), name(c)));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn full_autoregressive(d: usize) -> Tensor {
        let mut m = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..i {
                m.set(i, j, 1.0);
            }
        }
        m
    }

    #[test]
    fn zero_weight_edge_stays_zero_under_any_draw() {
        let mut rng = StdRng::seed_from_u64(0);
        let adj = AdjacencyParam::init(3, 0.2, 0.8, &mut rng);
        let mut adj = adj;
        adj.a.set(0, 1, 0.0);
        for _ in 0..50 {
            let m = adj.stochastic_mask(&mut rng);
            assert_eq!(m.at(0, 1), 0.0);
            for i in 0..3 {
                assert_eq!(m.at(i, i), 0.0, "diagonal must stay zero");
            }
        }
    }

    #[test]
    fn large_weight_mask_mean_is_near_one() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut adj = AdjacencyParam::init(2, 0.4, 0.6, &mut rng);
        adj.a.set(0, 1, 10.0);
        let mut acc = 0.0;
        let n = 10_000;
        for _ in 0..n {
            acc += adj.stochastic_mask(&mut rng).at(0, 1);
        }
        assert!(acc / n as f64 > 0.99, "mean {}", acc / n as f64);
    }

    #[test]
    fn mask_mean_is_monotone_in_weight_magnitude() {
        let mut rng = StdRng::seed_from_u64(2);
        let grid = [0.0, 0.25, 0.5, 1.0, 2.0];
        let mut means = Vec::new();
        for &w in &grid {
            let mut adj = AdjacencyParam::init(2, 0.4, 0.6, &mut rng);
            adj.a.set(0, 1, w);
            let n = 10_000;
            let mut acc = 0.0;
            for _ in 0..n {
                acc += adj.stochastic_mask(&mut rng).at(0, 1);
            }
            means.push(acc / n as f64);
        }
        for pair in means.windows(2) {
            assert!(pair[1] >= pair[0], "means not monotone: {means:?}");
        }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(acyclicity_penalty(&Tensor::zeros(&[4, 4]), 1.0).unwrap(), 0.0);
        for d in 2..6 {
            let mut tri = Tensor::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..i {
                    tri.set(i, j, 1.0);
                }
            }
            assert!(acyclicity_penalty(&tri, 1.0).unwrap().abs() < 1e-12);
        }
        let two_cycle = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(acyclicity_penalty(&two_cycle, 1.0).unwrap(), 2.0);
        let neg = Tensor::matrix(2, 2, vec![0.0, -0.1, 0.0, 0.0]);
        assert!(matches!(acyclicity_penalty(&neg, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn penalty_is_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..10 {
            let d = 5;
            let mut a = Tensor::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        a.set(i, j, rng.gen_range(0.0..1.0));
                    }
                }
            }
            let mut perm: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let mut pa = Tensor::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..d {
                    pa.set(i, j, a.at(perm[i], perm[j]));
                }
            }
            let w1 = acyclicity_penalty(&a, 0.3).unwrap();
            let w2 = acyclicity_penalty(&pa, 0.3).unwrap();
            assert!((w1 - w2).abs() < 1e-10);
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        use rand::Rng;
        for _ in 0..5 {
            let d = rng.gen_range(2..7);
            let vals: Vec<f64> = (0..d * d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let a = Tensor::matrix(d, d, vals.clone());
            let alpha = 0.5;
            let (_, grad) = matrix_power_trace(&a, alpha, d).unwrap();
            let h = 1e-6;
            for idx in 0..d * d {
                let mut vp = vals.clone();
                vp[idx] += h;
                let mut vm = vals.clone();
                vm[idx] -= h;
                let (fp, _) = matrix_power_trace(&Tensor::matrix(d, d, vp), alpha, d).unwrap();
                let (fm, _) = matrix_power_trace(&Tensor::matrix(d, d, vm), alpha, d).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let ad = grad.data()[idx];
                let rel = (ad - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-5, "d={d} idx={idx}: ad {ad} vs fd {fd}");
            }
        }
    }

    #[test]
    fn threshold_keeps_binary_acyclic_matrix() {
        let mut a = Tensor::zeros(&[3, 3]);
        a.set(1, 0, 1.0);
        a.set(2, 1, 1.0);
        let dag = post_process_threshold(&a);
        assert_eq!(dag.adjacency, a);
        assert_eq!(dag.edge_count(), 2);
    }

    #[test]
    fn threshold_breaks_two_cycle_at_smaller_weight() {
        let a = Tensor::matrix(2, 2, vec![0.0, 0.9, 0.3, 0.0]);
        let dag = post_process_threshold(&a);
        assert_eq!(dag.adjacency, Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn threshold_of_zeros_is_empty_dag() {
        let dag = post_process_threshold(&Tensor::zeros(&[4, 4]));
        assert_eq!(dag.edge_count(), 0);
        assert_eq!(dag.depth, 0);
    }

    #[test]
    fn random_threshold_results_have_zero_penalty() {
        let mut rng = StdRng::seed_from_u64(5);
        use rand::Rng;
        for _ in 0..50 {
            let d = rng.gen_range(2..9);
            let vals: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut a = Tensor::matrix(d, d, vals);
            for i in 0..d {
                a.set(i, i, 0.0);
            }
            let dag = post_process_threshold(&a);
            let w = acyclicity_penalty(&dag.adjacency, 1.0).unwrap();
            assert_eq!(w, 0.0);
        }
    }

    #[test]
    fn topological_order_examples() {
        let ar = full_autoregressive(4);
        assert_eq!(topological_order(&ar).unwrap(), vec![0, 1, 2, 3]);

        // coupling with k=2, d=4: rows 2,3 have parents {0,1}
        let mut coup = Tensor::zeros(&[4, 4]);
        for i in 2..4 {
            for j in 0..2 {
                coup.set(i, j, 1.0);
            }
        }
        assert_eq!(topological_order(&coup).unwrap(), vec![0, 1, 2, 3]);

        assert_eq!(topological_order(&Tensor::zeros(&[3, 3])).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn topological_order_names_a_cycle() {
        let mut m = Tensor::zeros(&[3, 3]);
        m.set(0, 1, 1.0);
        m.set(1, 2, 1.0);
        m.set(2, 0, 1.0);
        match topological_order(&m) {
            Err(Error::Cycle { cycle }) => assert_eq!(cycle.len(), 3),
            other => panic!("expected cycle error, got {other:?}"),
        }
    }

    #[test]
    fn depth_examples() {
        assert_eq!(dag_depth(&full_autoregressive(784)).unwrap(), 783);
        let mut coup = Tensor::zeros(&[6, 6]);
        for i in 3..6 {
            for j in 0..3 {
                coup.set(i, j, 1.0);
            }
        }
        assert_eq!(dag_depth(&coup).unwrap(), 1);
        assert_eq!(dag_depth(&Tensor::zeros(&[5, 5])).unwrap(), 0);
    }

    #[test]
    fn dot_and_json_exports() {
        let mut m = Tensor::zeros(&[3, 3]);
        m.set(2, 0, 1.0);
        let dag = BinaryDag::from_matrix(m).unwrap();
        let dot = to_dot(&dag, None);
        assert!(dot.contains("\"x1\" -> \"x3\""));
        let export = GraphExport::from_dag(&dag);
        assert_eq!(export.edges, vec![[0, 2]]);
        let back = export.to_dag().unwrap();
        assert_eq!(back, dag);
    }

    #[test]
    fn mask_gradient_matches_finite_differences_at_fixed_draws() {
        let mut rng = StdRng::seed_from_u64(6);
        let adj = AdjacencyParam::init(3, 0.3, 0.9, &mut rng);
        let draws = GumbelDraws::sample(3, &mut rng);

        let value_of = |a: &Tensor| -> f64 {
            let mut tmp = adj.clone();
            tmp.a = a.clone();
            tmp.stochastic_mask_with(&draws).data().iter().sum()
        };

        let mut tape = Tape::new();
        let a_id = tape.leaf(adj.a.clone());
        let mask = adj.mask_on_tape(&mut tape, a_id, &draws).unwrap();
        // tape values agree with the plain path
        let plain = adj.stochastic_mask_with(&draws);
        for (t, p) in tape.value(mask).data().iter().zip(plain.data()) {
            assert!((t - p).abs() < 1e-12);
        }
        let root = tape.sum(mask);
        let g = tape.backward(root).unwrap();
        let ad = g.of(a_id).unwrap();

        let h = 1e-6;
        for idx in 0..9 {
            let mut ap = adj.a.clone();
            ap.data_mut()[idx] += h;
            let mut am = adj.a.clone();
            am.data_mut()[idx] -= h;
            let fd = (value_of(&ap) - value_of(&am)) / (2.0 * h);
            let got = ad.data()[idx];
            assert!(
                (got - fd).abs() / fd.abs().max(1e-6) < 1e-4,
                "idx {idx}: ad {got} vs fd {fd}"
            );
        }
    }
}
