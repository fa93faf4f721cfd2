use std::collections::BTreeMap;

use super::{DatasetSpec, PointCloudBlock};
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::tensor::Matrix;

/// Centers XYZ on the centroid and divides by the largest per-axis extent, so
/// coordinates land in [−1, 1]; every other channel is min-max scaled to [0, 1].
/// A zero-extent block gets all-zero coordinates.
pub fn normalize_block(block: &PointCloudBlock) -> PointCloudBlock {
    let n = block.len();
    let c = block.channels();
    let mut pts = block.points.clone();
    if n == 0 {
        return block.clone();
    }
    let mut centroid = [0.0; 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in 0..n {
        for a in 0..3 {
            let v = pts[(r, a)];
            centroid[a] += v;
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    centroid.iter_mut().for_each(|v| *v /= n as f64);
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    for r in 0..n {
        for a in 0..3 {
            pts[(r, a)] = if extent > 0.0 {
                (pts[(r, a)] - centroid[a]) / extent
            } else {
                0.0
            };
        }
    }
    for ch in 3..c {
        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in 0..n {
            mn = mn.min(pts[(r, ch)]);
            mx = mx.max(pts[(r, ch)]);
        }
        let span = mx - mn;
        for r in 0..n {
            pts[(r, ch)] = if span > 0.0 {
                (pts[(r, ch)] - mn) / span
            } else {
                0.0
            };
        }
    }
    PointCloudBlock {
        id: block.id.clone(),
        points: pts,
        labels: block.labels.clone(),
    }
}

/// Tiles the XY bounding box into square cells of `spec.block_edge` and resamples
/// each cell to exactly `spec.points_per_block` points (with replacement when
/// short). Cells holding fewer than 5% of a block's worth of points are dropped.
pub fn partition_area(
    area_id: &str,
    points: &Matrix,
    labels: &[usize],
    spec: &DatasetSpec,
    rng: &mut RngState,
) -> Result<Vec<PointCloudBlock>> {
    let m = points.rows();
    if m == 0 {
        return Ok(Vec::new());
    }
    if labels.len() != m {
        return Err(Error::Config("label count differs from point count".into()));
    }
    let ppb = spec
        .points_per_block
        .ok_or_else(|| Error::Config("partitioning needs points_per_block".into()))?;
    let edge = spec.block_edge;
    if !(edge > 0.0) {
        return Err(Error::Config(format!("block edge {edge}")));
    }
    let cells = cell_assignment(points, edge);
    let mut members: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, key) in cells.into_iter().enumerate() {
        members.entry(key).or_default().push(i);
    }
    let min_occupancy = (0.05 * ppb as f64).ceil() as usize;
    let mut blocks = Vec::new();
    for ((cx, cy), idx) in members {
        if idx.len() < min_occupancy.max(1) {
            continue;
        }
        let chosen: Vec<usize> = if idx.len() >= ppb {
            rng.sample_indices(idx.len(), ppb)
                .into_iter()
                .map(|k| idx[k])
                .collect()
        } else {
            let mut all = idx.clone();
            while all.len() < ppb {
                all.push(idx[rng.below(idx.len())]);
            }
            all
        };
        let pts = points.select_rows(&chosen);
        let labs = chosen.iter().map(|&i| labels[i]).collect();
        blocks.push(PointCloudBlock::new(
            format!("{area_id}_{cx}_{cy}"),
            pts,
            labs,
        )?);
    }
    Ok(blocks)
}

/// (column, row) tile index of every point; the upper boundary folds into the last tile.
pub(crate) fn cell_assignment(points: &Matrix, edge: f64) -> Vec<(usize, usize)> {
    let m = points.rows();
    let (mut minx, mut miny) = (f64::INFINITY, f64::INFINITY);
    let (mut maxx, mut maxy) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for r in 0..m {
        minx = minx.min(points[(r, 0)]);
        maxx = maxx.max(points[(r, 0)]);
        miny = miny.min(points[(r, 1)]);
        maxy = maxy.max(points[(r, 1)]);
    }
    let nx = (((maxx - minx) / edge).ceil() as usize).max(1);
    let ny = (((maxy - miny) / edge).ceil() as usize).max(1);
    (0..m)
        .map(|r| {
            let cx = (((points[(r, 0)] - minx) / edge).floor() as usize).min(nx - 1);
            let cy = (((points[(r, 1)] - miny) / edge).floor() as usize).min(ny - 1);
            (cx, cy)
        })
        .collect()
}

/// One point per occupied voxel of edge `cell`: the point nearest the voxel's
/// centroid (ties → lower index). Output keeps the representatives' original order.
pub fn grid_subsample(points: &Matrix, labels: &[usize], cell: f64) -> Result<(Matrix, Vec<usize>)> {
    if !(cell > 0.0) {
        return Err(Error::InvalidInput {
            op: "grid_subsample",
            detail: format!("cell {cell}"),
        });
    }
    let mut voxels: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for r in 0..points.rows() {
        let key = (
            (points[(r, 0)] / cell).floor() as i64,
            (points[(r, 1)] / cell).floor() as i64,
            (points[(r, 2)] / cell).floor() as i64,
        );
        voxels.entry(key).or_default().push(r);
    }
    let mut reps: Vec<usize> = voxels
        .values()
        .map(|idx| {
            let mut c = [0.0; 3];
            for &i in idx {
                for a in 0..3 {
                    c[a] += points[(i, a)];
                }
            }
            c.iter_mut().for_each(|v| *v /= idx.len() as f64);
            let mut best = (f64::INFINITY, usize::MAX);
            for &i in idx {
                let d: f64 = (0..3).map(|a| (points[(i, a)] - c[a]).powi(2)).sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        })
        .collect();
    reps.sort_unstable();
    let labs = reps.iter().map(|&i| labels[i]).collect();
    Ok((points.select_rows(&reps), labs))
}

/// Greedy farthest-point sampling from index 0, on the first three columns.
/// Each step takes the point with the largest distance to the chosen set
/// (ties → lower index). Indices are returned in selection order.
pub fn fps(points: &Matrix, k: usize) -> Result<Vec<usize>> {
    let m = points.rows();
    if k == 0 || k > m || points.cols() < 3 {
        return Err(Error::InvalidInput {
            op: "fps",
            detail: format!("k = {k} from {m} points"),
        });
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; m];
    let mut current = 0;
    chosen.push(current);
    while chosen.len() < k {
        let p = [points[(current, 0)], points[(current, 1)], points[(current, 2)]];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, md) in min_d.iter_mut().enumerate() {
            let d = (points[(i, 0)] - p[0]).powi(2)
                + (points[(i, 1)] - p[1]).powi(2)
                + (points[(i, 2)] - p[2]).powi(2);
            if d < *md {
                *md = d;
            }
            if *md > best.0 {
                best = (*md, i);
            }
        }
        current = best.1;
        chosen.push(current);
    }
    Ok(chosen)
}
