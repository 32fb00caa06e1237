//! Shared fixtures for the benchmark targets.

use graphflow::conditioners::{ConditionerKind, ConditionerSpec};
use graphflow::flow::{FlowModel, FlowStep, MaskState, Normalizer};
use graphflow::graph::BinaryDag;
use graphflow::normalizers::{AffineNormalizer, MonotonicNormalizer};
use graphflow::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn random_dag(d: usize, seed: u64) -> BinaryDag {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut raw = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            if i != j && rng.gen_bool(0.4) {
                raw.set(i, j, rng.gen_range(0.2..1.0));
            }
        }
    }
    graphflow::graph::post_process_threshold(&raw)
}

pub fn batch(d: usize, n: usize, seed: u64) -> Tensor {
    let mut rng = StdRng::seed_from_u64(seed);
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect())
}

/// A single-step flow with a prescribed random DAG.
pub fn model(d: usize, monotonic: bool, seed: u64) -> FlowModel {
    let mut rng = StdRng::seed_from_u64(seed);
    let embed = 16;
    let conditioner =
        ConditionerSpec::new(ConditionerKind::Graphical, d, embed, &[64, 64], &mut rng).unwrap();
    let normalizer = if monotonic {
        Normalizer::Monotonic(MonotonicNormalizer::new(embed, &[32, 32], 20, &mut rng))
    } else {
        let mut a = AffineNormalizer::new(embed);
        for v in a.projection.w.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        Normalizer::Affine(a)
    };
    FlowModel::new(
        d,
        vec![FlowStep { conditioner, normalizer, mask: MaskState::Prescribed(random_dag(d, seed)) }],
    )
    .unwrap()
}
