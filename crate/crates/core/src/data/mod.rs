//! Point-cloud blocks, their on-disk formats, preprocessing and a synthetic
//! labeled-cloud generator.

mod io;
mod preprocess;
mod synth;

pub use io::{
    load_blocks, read_binary, read_block, write_binary, write_block, BINARY_MAGIC,
};
pub use preprocess::{fps, grid_subsample, normalize_block, partition_area};
pub use synth::{synth_generate, SynthOptions};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

/// A fixed-size sample: N points × C channels (X, Y, Z first) and N labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudBlock {
    pub id: String,
    pub points: Matrix,
    pub labels: Vec<usize>,
}

impl PointCloudBlock {
    pub fn new(id: impl Into<String>, points: Matrix, labels: Vec<usize>) -> Result<Self> {
        if points.cols() < 3 {
            return Err(shape_err("PointCloudBlock", "need at least X, Y, Z channels"));
        }
        if points.rows() != labels.len() {
            return Err(shape_err(
                "PointCloudBlock",
                format!("{} points vs {} labels", points.rows(), labels.len()),
            ));
        }
        Ok(Self {
            id: id.into(),
            points,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.points.cols()
    }

    pub fn coords(&self) -> Matrix {
        let mut c = Matrix::zeros(self.len(), 3);
        for r in 0..self.len() {
            c.row_mut(r).copy_from_slice(&self.points.row(r)[..3]);
        }
        c
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&l) => Err(Error::LabelRange {
                label: l as i64,
                classes,
            }),
            None => Ok(()),
        }
    }

    /// Keeps only the listed channels (indices into the current schema).
    pub fn select_channels(&self, keep: &[usize]) -> Result<Self> {
        if keep.len() < 3 || keep[..3] != [0, 1, 2] {
            return Err(Error::Config("channel selection must keep X, Y, Z first".into()));
        }
        let mut pts = Matrix::zeros(self.len(), keep.len());
        for r in 0..self.len() {
            for (j, &c) in keep.iter().enumerate() {
                if c >= self.channels() {
                    return Err(Error::Config(format!("channel {c} out of range")));
                }
                pts[(r, j)] = self.points[(r, c)];
            }
        }
        Self::new(self.id.clone(), pts, self.labels.clone())
    }
}

/// Channel schema, classes and block geometry for one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Exact points per block; `None` accepts any size.
    pub points_per_block: Option<usize>,
    pub channels: Vec<String>,
    pub class_names: Vec<String>,
    /// Voxel edge for grid subsampling, meters.
    pub grid_cell: Option<f64>,
    /// Edge of the square XY tiles an area is cut into, meters.
    pub block_edge: f64,
}

impl DatasetSpec {
    /// Airborne multispectral blocks: 4096 points, XYZ + MIR/NIR/Green, six classes.
    pub fn ms_lidar() -> Self {
        Self {
            points_per_block: Some(4096),
            channels: names(&["x", "y", "z", "mir", "nir", "green"]),
            class_names: names(&["road", "building", "grass", "tree", "soil", "powerline"]),
            grid_cell: None,
            block_edge: 20.0,
        }
    }

    /// Aerial blocks: 10 cm grid, 20 m × 20 m tiles of 8192 points, eight classes.
    pub fn dales() -> Self {
        Self {
            points_per_block: Some(8192),
            channels: names(&["x", "y", "z", "intensity"]),
            class_names: names(&[
                "ground",
                "vegetation",
                "cars",
                "trucks",
                "power_lines",
                "fences",
                "poles",
                "buildings",
            ]),
            grid_cell: Some(0.1),
            block_edge: 20.0,
        }
    }

    /// Part-segmentation shapes: 2048 points with normals, 50 part labels.
    pub fn shapenet() -> Self {
        Self {
            points_per_block: Some(2048),
            channels: names(&["x", "y", "z", "nx", "ny", "nz"]),
            class_names: (0..50).map(|i| format!("part{i}")).collect(),
            grid_cell: None,
            block_edge: 1.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Config("class list is empty".into()));
        }
        if self.channels.len() < 3 {
            return Err(Error::Config("channel schema needs X, Y, Z".into()));
        }
        Ok(())
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}
