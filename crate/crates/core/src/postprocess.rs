//! Detail-map compositing for qualitative outputs. Metrics never use these
//! fields; see [`crate::eval::SamplePool::postprocessed`].

use std::path::Path;

use crate::data::write_pgm;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `gen + i_c − recon_c` without clamping.
pub fn detail_composite_unclamped(gen: &Tensor, i_c: &Tensor, recon_c: &Tensor) -> Result<Tensor> {
    gen.expect_same_shape(i_c, "detail_composite")?;
    gen.expect_same_shape(recon_c, "detail_composite")?;
    let data = gen.data().iter().zip(i_c.data()).zip(recon_c.data()).map(|((g, i), r)| g + (i - r)).collect();
    Tensor::new(gen.shape().to_vec(), data)
}

/// Adds the conditioning detail map `i_c − recon_c` to a generated field and
/// clamps to [0, 1].
pub fn detail_composite(gen: &Tensor, i_c: &Tensor, recon_c: &Tensor) -> Result<Tensor> {
    Ok(detail_composite_unclamped(gen, i_c, recon_c)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Upsampled field for display. Not a reconstruction of the full-resolution
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewingImage {
    pub label: &'static str,
    pub side: usize,
    pub data: Vec<f64>,
}

pub const VIEWING_ONLY: &str = "viewing only";

/// Bilinear upsampling by an integer factor with pixel-center alignment and
/// edge clamping.
pub fn upsample_for_viewing(field: &[f64], side: usize, factor: usize) -> Result<ViewingImage> {
    if field.len() != side * side {
        return Err(Error::Dimension(format!("{} values for a {side}x{side} field", field.len())));
    }
    if factor == 0 {
        return Err(Error::Parameter("upsampling factor must be positive".into()));
    }
    let out = side * factor;
    let coord = |o: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = Vec::with_capacity(out * out);
    for oy in 0..out {
        let (y0, y1, ty) = coord(oy);
        for ox in 0..out {
            let (x0, x1, tx) = coord(ox);
            let top = field[y0 * side + x0] * (1.0 - tx) + field[y0 * side + x1] * tx;
            let bot = field[y1 * side + x0] * (1.0 - tx) + field[y1 * side + x1] * tx;
            data.push(top * (1.0 - ty) + bot * ty);
        }
    }
    Ok(ViewingImage { label: VIEWING_ONLY, side: out, data })
}

pub fn write_field_pgm(path: &Path, field: &[f64], side: usize) -> Result<()> {
    write_pgm(path, side, side, field)
}
