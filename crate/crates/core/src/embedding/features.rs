use crate::data::area_resize;
use crate::error::{Error, Result};

pub const LAYOUT_GRID: usize = 4;
pub const PIXEL_SIDE: usize = 8;

/// Descriptor fed to the embedding fit.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// False when the label blocks were zero-filled.
    pub has_labels: bool,
}

impl FeatureVector {
    /// Generator-provided descriptors are used as-is.
    pub fn passthrough(descriptor: &[f64]) -> Self {
        Self { values: descriptor.to_vec(), has_labels: false }
    }
}

/// Width of [`build_features`] output for `num_classes` label classes.
pub fn feature_dim(num_classes: usize) -> usize {
    num_classes * (1 + LAYOUT_GRID * LAYOUT_GRID) + PIXEL_SIDE * PIXEL_SIDE
}

/// Label distribution | per-cell label fractions on a 4x4 grid (cell-major)
/// | pixels area-resized to 8x8.
pub fn build_features(
    pixels: &[f64],
    width: usize,
    height: usize,
    labels: Option<&[usize]>,
    num_classes: usize,
) -> Result<FeatureVector> {
    if width < PIXEL_SIDE || height < PIXEL_SIDE {
        return Err(Error::Parameter(format!("image {width}x{height} is smaller than {PIXEL_SIDE}x{PIXEL_SIDE}")));
    }
    let cells = LAYOUT_GRID * LAYOUT_GRID;
    let mut values = vec![0.0; num_classes * (1 + cells)];
    let has_labels = match labels {
        Some(map) => {
            if map.len() != width * height {
                return Err(Error::Dimension(format!("{} labels for a {width}x{height} image", map.len())));
            }
            if let Some(&bad) = map.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Domain(format!("label {bad} outside {num_classes} classes")));
            }
            let (dist, layout) = values.split_at_mut(num_classes);
            for &l in map {
                dist[l] += 1.0;
            }
            dist.iter_mut().for_each(|v| *v /= map.len() as f64);
            for cy in 0..LAYOUT_GRID {
                let (y0, y1) = (cy * height / LAYOUT_GRID, (cy + 1) * height / LAYOUT_GRID);
                for cx in 0..LAYOUT_GRID {
                    let (x0, x1) = (cx * width / LAYOUT_GRID, (cx + 1) * width / LAYOUT_GRID);
                    let cell = &mut layout[(cy * LAYOUT_GRID + cx) * num_classes..][..num_classes];
                    for y in y0..y1 {
                        for &l in &map[y * width + x0..y * width + x1] {
                            cell[l] += 1.0;
                        }
                    }
                    let area = ((y1 - y0) * (x1 - x0)) as f64;
                    cell.iter_mut().for_each(|v| *v /= area);
                }
            }
            num_classes > 0
        }
        None => false,
    };
    values.extend(area_resize(pixels, width, height, PIXEL_SIDE, PIXEL_SIDE)?);
    Ok(FeatureVector { values, has_labels })
}
