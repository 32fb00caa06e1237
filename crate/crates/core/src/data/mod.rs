//! Synthetic benchmark generators with known ground-truth graphs, CSV
//! ingestion, standardization, splitting and feature permutation.

mod toys;

pub use toys::{gen_2d_toy, ToyName, CIRCLES_RADII, EIGHT_GAUSSIANS_RADIUS, EIGHT_GAUSSIANS_STD};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{BinaryDag, GraphExport};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Train/validation/test splits with dataset metadata.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
    pub columns: Vec<String>,
    pub ground_truth: Option<BinaryDag>,
    /// Applied column permutation: column j holds original column perm[j].
    pub permutation: Vec<usize>,
    /// Per-column (mean, std) fitted on train, if standardized.
    pub standardization: Option<(Vec<f64>, Vec<f64>)>,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
pub struct BundleManifest {
    pub seed: Option<u64>,
    pub d: usize,
    pub split_sizes: [usize; 3],
    pub columns: Vec<String>,
    pub permutation: Vec<usize>,
    pub standardization: Option<(Vec<f64>, Vec<f64>)>,
    pub ground_truth: Option<GraphExport>,
}

impl DatasetBundle {
    pub fn d(&self) -> usize {
        self.train.cols()
    }

    pub fn manifest(&self) -> BundleManifest {
        BundleManifest {
            seed: self.seed,
            d: self.d(),
            split_sizes: [self.train.rows(), self.val.rows(), self.test.rows()],
            columns: self.columns.clone(),
            permutation: self.permutation.clone(),
            standardization: self.standardization.clone(),
            ground_truth: self.ground_truth.as_ref().map(GraphExport::from_dag),
        }
    }

    /// Fit column means and stds on train and standardize every split.
    pub fn standardize(&mut self) {
        if self.standardization.is_some() {
            return;
        }
        let d = self.d();
        let n = self.train.rows() as f64;
        let mut mean = vec![0.0; d];
        for r in 0..self.train.rows() {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += self.train.at(r, j);
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for r in 0..self.train.rows() {
            for (j, s) in std.iter_mut().enumerate() {
                let c = self.train.at(r, j) - mean[j];
                *s += c * c;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        for split in [&mut self.train, &mut self.val, &mut self.test] {
            let rows = split.rows();
            for r in 0..rows {
                for j in 0..d {
                    let v = (split.at(r, j) - mean[j]) / std[j];
                    split.set(r, j, v);
                }
            }
        }
        self.standardization = Some((mean, std));
    }
}

/// Shuffle rows and split into train/val/test by the paper's convention:
/// a third of the rows held out for test, a tenth of the rest for validation.
fn split_default(mut rows: Vec<Vec<f64>>, rng: &mut impl Rng) -> (Tensor, Tensor, Tensor) {
    rows.shuffle(rng);
    let n = rows.len();
    let n_test = n / 3;
    let n_train_total = n - n_test;
    let n_val = n_train_total / 10;
    let n_train = n_train_total - n_val;
    let train = Tensor::from_rows(&rows[..n_train]);
    let val = Tensor::from_rows(&rows[n_train..n_train + n_val]);
    let test = Tensor::from_rows(&rows[n_train + n_val..]);
    (train, val, test)
}

fn dag_from_edges(d: usize, edges: &[(usize, usize)]) -> BinaryDag {
    let mut m = Tensor::zeros(&[d, d]);
    for &(parent, child) in edges {
        m.set(child, parent, 1.0);
    }
    BinaryDag::from_matrix(m).expect("ground-truth graphs are acyclic")
}

/// Concatenation of `pairs` independent 2D toys (d = 2*pairs). Ground truth
/// has one within-pair edge, oriented odd -> even.
pub fn gen_pairs(pairs: usize, n: usize, rng: &mut impl Rng) -> Result<DatasetBundle> {
    if pairs == 0 || pairs > 8 {
        return Err(Error::Config(format!("gen_pairs supports 1..=8 pairs, got {pairs}")));
    }
    if n == 0 {
        return Err(Error::Contract("gen_pairs requires n > 0".into()));
    }
    let d = 2 * pairs;
    let toys: Vec<Tensor> = toys::ToyName::ALL[..pairs]
        .iter()
        .map(|&t| gen_2d_toy(t, n, rng))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(n);
    for r in 0..n {
        let mut row = Vec::with_capacity(d);
        for t in &toys {
            row.push(t.at(r, 0));
            row.push(t.at(r, 1));
        }
        rows.push(row);
    }
    let (train, val, test) = split_default(rows, rng);
    let edges: Vec<(usize, usize)> = (0..pairs).map(|k| (2 * k, 2 * k + 1)).collect();
    Ok(DatasetBundle {
        train,
        val,
        test,
        columns: (1..=d).map(|i| format!("x{i}")).collect(),
        ground_truth: Some(dag_from_edges(d, &edges)),
        permutation: (0..d).collect(),
        standardization: None,
        seed: None,
    })
}

/// The 8-pairs benchmark: all eight toys side by side, d = 16, 8 edges.
pub fn gen_8pairs(n: usize, rng: &mut impl Rng) -> Result<DatasetBundle> {
    gen_pairs(8, n, rng)
}

/// The 7-variable tree benchmark built from Circles and 8-Gaussians roots.
pub fn gen_tree(n: usize, rng: &mut impl Rng) -> Result<DatasetBundle> {
    if n == 0 {
        return Err(Error::Contract("gen_tree requires n > 0".into()));
    }
    let circles = gen_2d_toy(ToyName::Circles, n, rng)?;
    let gauss = gen_2d_toy(ToyName::EightGaussians, n, rng)?;
    let mut rows = Vec::with_capacity(n);
    for r in 0..n {
        let (x1, x2) = (circles.at(r, 0), circles.at(r, 1));
        let (x3, x4) = (gauss.at(r, 0), gauss.at(r, 1));
        let n5: f64 = StandardNormal.sample(rng);
        let x5 = x1.max(x2) + n5;
        let n6: f64 = StandardNormal.sample(rng);
        let x6 = x3.min(x4) + n6;
        let n7: f64 = StandardNormal.sample(rng);
        let mean7 = if rng.gen_bool(0.5) { (x5 + x6).sin() } else { (x5 + x6).cos() };
        let x7 = mean7 + n7;
        rows.push(vec![x1, x2, x3, x4, x5, x6, x7]);
    }
    let (train, val, test) = split_default(rows, rng);
    let edges = [
        (0, 1),
        (2, 3),
        (0, 4),
        (1, 4),
        (2, 5),
        (3, 5),
        (4, 6),
        (5, 6),
    ];
    Ok(DatasetBundle {
        train,
        val,
        test,
        columns: (1..=7).map(|i| format!("x{i}")).collect(),
        ground_truth: Some(dag_from_edges(7, &edges)),
        permutation: (0..7).collect(),
        standardization: None,
        seed: None,
    })
}

// --- structural equation models -------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Identity,
    Tanh,
    Sin,
}

impl LinkKind {
    fn apply(&self, v: f64) -> f64 {
        match self {
            LinkKind::Identity => v,
            LinkKind::Tanh => v.tanh(),
            LinkKind::Sin => v.sin(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Normal { std: f64 },
    StudentT { dof: f64 },
}

/// One node of a structural equation model:
/// `x = scale * link(sum_j w_j x_parent_j + bias) + noise`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SemNode {
    pub parents: Vec<usize>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
    pub link: LinkKind,
    #[serde(default = "one")]
    pub scale: f64,
    pub noise: NoiseKind,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SemSpec {
    pub nodes: Vec<SemNode>,
}

impl SemSpec {
    /// The shipped default: 8 nodes, 8 edges, heavy-tailed roots and smooth
    /// nonlinear links.
    pub fn default_arith_circuit() -> Self {
        serde_json::from_str(include_str!("arith_circuit_default.json"))
            .expect("bundled SEM spec parses")
    }

    pub fn d(&self) -> usize {
        self.nodes.len()
    }

    pub fn adjacency(&self) -> Result<BinaryDag> {
        let d = self.d();
        let mut m = Tensor::zeros(&[d, d]);
        for (i, node) in self.nodes.iter().enumerate() {
            if node.parents.len() != node.weights.len() {
                return Err(Error::Config(format!(
                    "node {i}: {} parents but {} weights",
                    node.parents.len(),
                    node.weights.len()
                )));
            }
            for &p in &node.parents {
                if p >= d {
                    return Err(Error::Config(format!("node {i}: parent {p} out of range")));
                }
                m.set(i, p, 1.0);
            }
        }
        BinaryDag::from_matrix(m)
    }
}

/// Ancestral sampling through a structural equation model.
pub fn gen_arith_circuit(n: usize, rng: &mut impl Rng, spec: &SemSpec) -> Result<DatasetBundle> {
    if n == 0 {
        return Err(Error::Contract("gen_arith_circuit requires n > 0".into()));
    }
    let dag = spec.adjacency()?; // cycle error surfaces here
    let d = spec.d();
    let order = dag.order.clone();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![0.0; d];
        for &i in &order {
            let node = &spec.nodes[i];
            let lin: f64 = node
                .parents
                .iter()
                .zip(&node.weights)
                .map(|(&p, w)| row[p] * w)
                .sum::<f64>()
                + node.bias;
            let noise = match node.noise {
                NoiseKind::Normal { std } => {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                }
                NoiseKind::StudentT { dof } => {
                    let t = StudentT::new(dof).map_err(|e| Error::Config(e.to_string()))?;
                    t.sample(rng)
                }
            };
            row[i] = node.scale * node.link.apply(lin) + noise;
        }
        rows.push(row);
    }
    let (train, val, test) = split_default(rows, rng);
    Ok(DatasetBundle {
        train,
        val,
        test,
        columns: (1..=d).map(|i| format!("x{i}")).collect(),
        ground_truth: Some(dag),
        permutation: (0..d).collect(),
        standardization: None,
        seed: None,
    })
}

// --- CSV -----------------------------------------------------------------------

/// Load a rectangular numeric CSV with a header row, shuffle, and split by
/// the given fractions.
pub fn load_csv(
    path: &Path,
    fractions: (f64, f64, f64),
    standardize: bool,
    rng: &mut impl Rng,
) -> Result<DatasetBundle> {
    let (train_f, val_f, test_f) = fractions;
    let total = train_f + val_f + test_f;
    if !(0.999..=1.001).contains(&total) || train_f <= 0.0 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    let columns: Vec<String> =
        reader.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
            .iter()
            .map(|s| s.to_string())
            .collect();
    let d = columns.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if record.len() != d {
            return Err(Error::Parse {
                line,
                msg: format!("expected {d} fields, found {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for field in record.iter() {
            row.push(field.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric cell '{field}'"),
            })?);
        }
        rows.push(row);
    }
    rows.shuffle(rng);
    let n = rows.len();
    let n_train = (n as f64 * train_f).round() as usize;
    let n_val = (n as f64 * val_f).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let train = Tensor::from_rows(&rows[..n_train]);
    let val = Tensor::from_rows(&rows[n_train..n_train + n_val]);
    let test = Tensor::from_rows(&rows[n_train + n_val..]);
    let mut bundle = DatasetBundle {
        train,
        val,
        test,
        columns,
        ground_truth: None,
        permutation: (0..d).collect(),
        standardization: None,
        seed: None,
    };
    if standardize {
        bundle.standardize();
    }
    Ok(bundle)
}

/// Write a data matrix as CSV with the given header.
pub fn write_csv(path: &Path, columns: &[String], data: &Tensor) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Serde(e.to_string()))?;
    writer.write_record(columns).map_err(|e| Error::Serde(e.to_string()))?;
    for r in 0..data.rows() {
        let row: Vec<String> = data.row(r).iter().map(|v| format!("{v}")).collect();
        writer.write_record(&row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

// --- permutation ------------------------------------------------------------------

/// Apply a random feature permutation to all splits, the column names and
/// (conjugately) the ground-truth adjacency. The permutation is recorded so
/// reports can be unscrambled.
pub fn permute_features(bundle: &DatasetBundle, rng: &mut impl Rng) -> DatasetBundle {
    let d = bundle.d();
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    permute_features_with(bundle, &perm)
}

/// Deterministic variant: new column j holds old column perm[j].
pub fn permute_features_with(bundle: &DatasetBundle, perm: &[usize]) -> DatasetBundle {
    let d = bundle.d();
    assert_eq!(perm.len(), d);
    let apply = |t: &Tensor| -> Tensor {
        let rows = t.rows();
        let mut out = Tensor::zeros(&[rows, d]);
        for r in 0..rows {
            for (j, &pj) in perm.iter().enumerate() {
                out.set(r, j, t.at(r, pj));
            }
        }
        out
    };
    let ground_truth = bundle.ground_truth.as_ref().map(|dag| {
        let mut m = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                m.set(i, j, dag.adjacency.at(perm[i], perm[j]));
            }
        }
        BinaryDag::from_matrix(m).expect("permutation preserves acyclicity")
    });
    // compose with any previously applied permutation
    let permutation: Vec<usize> = perm.iter().map(|&p| bundle.permutation[p]).collect();
    DatasetBundle {
        train: apply(&bundle.train),
        val: apply(&bundle.val),
        test: apply(&bundle.test),
        columns: perm.iter().map(|&p| bundle.columns[p].clone()).collect(),
        ground_truth,
        permutation,
        standardization: bundle
            .standardization
            .as_ref()
            .map(|(m, s)| {
                (
                    perm.iter().map(|&p| m[p]).collect(),
                    perm.iter().map(|&p| s[p]).collect(),
                )
            }),
        seed: bundle.seed,
    }
}

/// The permutation that undoes `perm`.
pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
