use super::PointCloudBlock;
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::tensor::Matrix;

const EXTENT: f64 = 20.0;
const INTENSITY_NOISE: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub num_blocks: usize,
    pub points_per_block: usize,
    pub num_classes: usize,
    /// Total channels including X, Y, Z.
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            num_blocks: 32,
            points_per_block: 512,
            num_classes: 6,
            channels: 6,
            seed: 0,
        }
    }
}

/// Labeled scenes built from primitives chosen by `class % 4`: ground planes,
/// boxes (buildings), ellipsoids (vegetation) and thin elevated strips
/// (powerlines). Each class also gets its own mean per radiometric channel.
/// Coordinates are in meters over a 20 m tile; blocks are not normalized.
pub fn synth_generate(opts: &SynthOptions) -> Result<Vec<PointCloudBlock>> {
    let k = opts.num_classes;
    if k < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
    }
    if opts.channels < 3 {
        return Err(Error::Config("synthetic corpus needs X, Y, Z".into()));
    }
    if opts.points_per_block < k {
        return Err(Error::Config(format!(
            "{} points cannot cover {k} classes",
            opts.points_per_block
        )));
    }
    let root = RngState::new(opts.seed);
    (0..opts.num_blocks)
        .map(|b| {
            let mut rng = root.fork(b as u64);
            generate_block(&format!("synth_{b:04}"), opts, &mut rng)
        })
        .collect()
}

/// Mean of radiometric channel `j` for class `c`, spread over [0.1, 0.9].
pub fn intensity_mean(c: usize, j: usize, k: usize) -> f64 {
    0.1 + 0.8 * ((c * (2 * j + 1)) % k) as f64 / (k - 1) as f64
}

fn generate_block(id: &str, opts: &SynthOptions, rng: &mut RngState) -> Result<PointCloudBlock> {
    let (n, k, ch) = (opts.points_per_block, opts.num_classes, opts.channels);
    let mut labels: Vec<usize> = (0..n).map(|i| i * k / n).collect();
    rng.shuffle(&mut labels);

    let shapes: Vec<Shape> = (0..k).map(|c| Shape::sample(c % 4, rng)).collect();
    let mut data = Vec::with_capacity(n * ch);
    for &c in &labels {
        let p = shapes[c].point(rng);
        data.extend_from_slice(&p);
        for j in 0..ch - 3 {
            data.push(intensity_mean(c, j, k) + INTENSITY_NOISE * rng.normal());
        }
    }
    PointCloudBlock::new(id, Matrix::from_vec(n, ch, data)?, labels)
}

enum Shape {
    Plane { z: f64 },
    Box { lo: [f64; 3], hi: [f64; 3] },
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    Strip { y: f64, z: f64 },
}

impl Shape {
    fn sample(kind: usize, rng: &mut RngState) -> Self {
        match kind {
            0 => Shape::Plane {
                z: rng.uniform_range(-0.2, 0.2),
            },
            1 => {
                let (cx, cy) = (rng.uniform_range(5.0, 15.0), rng.uniform_range(5.0, 15.0));
                let half = rng.uniform_range(2.0, 4.0);
                let height = rng.uniform_range(4.0, 8.0);
                Shape::Box {
                    lo: [cx - half, cy - half, 0.5],
                    hi: [cx + half, cy + half, height],
                }
            }
            2 => Shape::Ellipsoid {
                center: [
                    rng.uniform_range(4.0, 16.0),
                    rng.uniform_range(4.0, 16.0),
                    rng.uniform_range(3.0, 5.0),
                ],
                radii: [1.5, 1.5, 2.5],
            },
            _ => Shape::Strip {
                y: rng.uniform_range(2.0, 18.0),
                z: rng.uniform_range(10.0, 14.0),
            },
        }
    }

    fn point(&self, rng: &mut RngState) -> [f64; 3] {
        match *self {
            Shape::Plane { z } => [
                rng.uniform_range(0.0, EXTENT),
                rng.uniform_range(0.0, EXTENT),
                z + 0.05 * rng.normal(),
            ],
            Shape::Box { lo, hi } => [
                rng.uniform_range(lo[0], hi[0]),
                rng.uniform_range(lo[1], hi[1]),
                rng.uniform_range(lo[2], hi[2]),
            ],
            Shape::Ellipsoid { center, radii } => loop {
                let u = [
                    rng.uniform_range(-1.0, 1.0),
                    rng.uniform_range(-1.0, 1.0),
                    rng.uniform_range(-1.0, 1.0),
                ];
                if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break [
                        center[0] + radii[0] * u[0],
                        center[1] + radii[1] * u[1],
                        center[2] + radii[2] * u[2],
                    ];
                }
            },
            Shape::Strip { y, z } => [
                rng.uniform_range(0.0, EXTENT),
                y + 0.05 * rng.normal(),
                z + 0.05 * rng.normal(),
            ],
        }
    }
}
