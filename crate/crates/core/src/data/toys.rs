//! The eight 2D toy distributions used to build the synthetic benchmarks.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyName {
    Circles,
    EightGaussians,
    Moons,
    Pinwheel,
    Swissroll,
    Checkerboard,
    TwoSpirals,
    Rings,
}

impl ToyName {
    /// Order used when assembling multi-pair datasets: the leading toys
    /// carry the strongest conditional structure.
    pub const ALL: [ToyName; 8] = [
        ToyName::Moons,
        ToyName::EightGaussians,
        ToyName::Pinwheel,
        ToyName::TwoSpirals,
        ToyName::Circles,
        ToyName::Swissroll,
        ToyName::Checkerboard,
        ToyName::Rings,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "circles" => Ok(ToyName::Circles),
            "eight_gaussians" | "8gaussians" => Ok(ToyName::EightGaussians),
            "moons" => Ok(ToyName::Moons),
            "pinwheel" => Ok(ToyName::Pinwheel),
            "swissroll" => Ok(ToyName::Swissroll),
            "checkerboard" => Ok(ToyName::Checkerboard),
            "two_spirals" | "2spirals" => Ok(ToyName::TwoSpirals),
            "rings" => Ok(ToyName::Rings),
            other => Err(Error::Config(format!(
                "unknown 2d toy '{other}'; expected one of circles, eight_gaussians, moons, \
                 pinwheel, swissroll, checkerboard, two_spirals, rings"
            ))),
        }
    }
}

/// Radii of the two circles in `circles` (after scaling).
pub const CIRCLES_RADII: (f64, f64) = (3.0, 1.5);
/// Radius of the mixture centers in `eight_gaussians`.
pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
/// Component standard deviation in `eight_gaussians`.
pub const EIGHT_GAUSSIANS_STD: f64 = 0.15;

/// Draw `n` samples from the named toy distribution.
pub fn gen_2d_toy(name: ToyName, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Contract("toy generators require n > 0".into()));
    }
    let mut data = Vec::with_capacity(n * 2);
    fn normal(rng: &mut impl Rng) -> f64 {
        StandardNormal.sample(rng)
    }
    match name {
        ToyName::Circles => {
            for _ in 0..n {
                let r = if rng.gen_bool(0.5) { 1.0 } else { 0.5 };
                let theta = rng.gen_range(0.0..2.0 * PI);
                let (nx, ny): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                data.push(3.0 * (r * theta.cos() + 0.08 * nx));
                data.push(3.0 * (r * theta.sin() + 0.08 * ny));
            }
        }
        ToyName::EightGaussians => {
            for _ in 0..n {
                let k = rng.gen_range(0..8u32);
                let angle = k as f64 * PI / 4.0;
                let (cx, cy) = (
                    EIGHT_GAUSSIANS_RADIUS * angle.cos(),
                    EIGHT_GAUSSIANS_RADIUS * angle.sin(),
                );
                let (nx, ny): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                data.push(cx + EIGHT_GAUSSIANS_STD * nx);
                data.push(cy + EIGHT_GAUSSIANS_STD * ny);
            }
        }
        ToyName::Moons => {
            for _ in 0..n {
                let t = rng.gen_range(0.0..PI);
                let (mut x, mut y) = if rng.gen_bool(0.5) {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                x += 0.06 * normal(rng);
                y += 0.06 * normal(rng);
                data.push(2.0 * x - 1.0);
                data.push(2.0 * y - 0.2);
            }
        }
        ToyName::Pinwheel => {
            let (radial_std, tangential_std, rate) = (0.3, 0.05, 0.25);
            for _ in 0..n {
                let class = rng.gen_range(0..5u32);
                let f0 = 1.0 + radial_std * normal(rng);
                let f1 = tangential_std * normal(rng);
                let angle = 2.0 * PI * class as f64 / 5.0 + rate * f0.exp();
                let (ca, sa) = (angle.cos(), angle.sin());
                data.push(2.0 * (f0 * ca + f1 * sa));
                data.push(2.0 * (-f0 * sa + f1 * ca));
            }
        }
        ToyName::Swissroll => {
            for _ in 0..n {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.gen_range(0.0..1.0));
                data.push((t * t.cos() + 0.4 * normal(rng)) / 5.0);
                data.push((t * t.sin() + 0.4 * normal(rng)) / 5.0);
            }
        }
        ToyName::Checkerboard => {
            for _ in 0..n {
                let x1: f64 = rng.gen_range(0.0..4.0) - 2.0;
                let shift = if rng.gen_bool(0.5) { 0.0 } else { 2.0 };
                let parity = (x1.floor() as i64).rem_euclid(2) as f64;
                let x2 = rng.gen_range(0.0..1.0) - shift + parity;
                data.push(2.0 * x1);
                data.push(2.0 * x2);
            }
        }
        ToyName::TwoSpirals => {
            for _ in 0..n {
                let t = rng.gen_range(0.0f64..1.0).sqrt() * 3.0 * PI;
                let sx = -t.cos() * t + rng.gen_range(0.0..0.3);
                let sy = t.sin() * t + rng.gen_range(0.0..0.3);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                data.push(sign * sx / 3.0 + 0.06 * normal(rng));
                data.push(sign * sy / 3.0 + 0.06 * normal(rng));
            }
        }
        ToyName::Rings => {
            for _ in 0..n {
                let radius = 0.25 * (rng.gen_range(0..4u32) + 1) as f64;
                let theta = rng.gen_range(0.0..2.0 * PI);
                data.push(3.0 * radius * theta.cos() + 0.08 * normal(rng));
                data.push(3.0 * radius * theta.sin() + 0.08 * normal(rng));
            }
        }
    }
    Ok(Tensor::matrix(n, 2, data))
}
