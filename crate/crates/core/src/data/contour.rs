//! Decision-function values on a regular 2-d grid, for contour plots.

use super::DataError;
use crate::kernel::labels_from_outputs;
use crate::model::MlpParams;
use crate::tensor::Tensor;
use crate::train::EvalSettings;

pub const CONTOUR_HEADER: [&str; 4] = ["x1", "x2", "value", "label"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub x1: (f64, f64),
    pub x2: (f64, f64),
}

impl GridBounds {
    /// Covers the two-moon arcs with a margin.
    pub fn two_moons() -> Self {
        Self {
            x1: (-1.5, 2.5),
            x2: (-1.0, 1.5),
        }
    }
}

/// Node `(i, j)` sits at `lo + i·(hi − lo)/(resolution − 1)` on each axis.
/// Rows are ordered with `x2` outer and `x1` inner.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourGrid {
    pub bounds: GridBounds,
    pub resolution: usize,
    pub points: Vec<(f64, f64)>,
    pub values: Vec<f64>,
    pub labels: Vec<i64>,
}

fn axis(lo: f64, hi: f64, res: usize) -> Vec<f64> {
    let step = (hi - lo) / (res - 1) as f64;
    (0..res).map(|i| lo + i as f64 * step).collect()
}

pub fn export_contour(
    params: &MlpParams,
    eval: &EvalSettings,
    bounds: GridBounds,
    resolution: usize,
) -> Result<ContourGrid, DataError> {
    if params.input_dim() != 2 {
        return Err(DataError::Contract(format!(
            "contours need 2-d inputs, model takes {}",
            params.input_dim()
        )));
    }
    if params.output_dim() != 1 {
        return Err(DataError::Contract("contours need a single-output model".into()));
    }
    if resolution < 2 {
        return Err(DataError::Contract(format!("resolution must be >= 2, got {resolution}")));
    }
    let (xs, ys) = (
        axis(bounds.x1.0, bounds.x1.1, resolution),
        axis(bounds.x2.0, bounds.x2.1, resolution),
    );
    let points: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let flat = points.iter().flat_map(|&(a, b)| [a, b]).collect();
    let grid = Tensor::matrix(points.len(), 2, flat).expect("grid buffer");
    let out = eval
        .outputs(params, &grid)
        .map_err(|e| DataError::Contract(e.to_string()))?;
    if !out.is_finite() {
        return Err(DataError::Contract("non-finite model value on the grid".into()));
    }
    Ok(ContourGrid {
        bounds,
        resolution,
        points,
        labels: labels_from_outputs(&out),
        values: out.into_data(),
    })
}

impl ContourGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn csv(&self) -> Result<Vec<u8>, DataError> {
        super::io::csv_bytes(
            &CONTOUR_HEADER,
            self.points.iter().zip(&self.values).zip(&self.labels).map(|((p, v), l)| {
                [p.0.to_string(), p.1.to_string(), v.to_string(), l.to_string()]
            }),
        )
    }
}
