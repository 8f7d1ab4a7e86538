use super::{Image, Roi};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Crops `roi`, resizes it to a `canonical x canonical` square and splits it
/// into `rows x cols` equal patches in row-major order.
pub fn patchify_roi(img: &Image, roi: &Roi, rows: usize, cols: usize, canonical: usize) -> Result<Vec<Image>> {
    roi.validate(img)?;
    if rows == 0 || cols == 0 || canonical % rows != 0 || canonical % cols != 0 {
        return Err(Error::config(
            "vision.roi_grid",
            format!("a {rows}x{cols} grid does not divide the {canonical}px canonical RoI"),
        ));
    }
    let crop = img.crop(roi.top, roi.left, roi.bottom, roi.right)?;
    let square = crop.resize(canonical, canonical);
    let (ph, pw) = (canonical / rows, canonical / cols);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(square.crop(r * ph, c * pw, (r + 1) * ph, (c + 1) * pw)?);
        }
    }
    Ok(out)
}

/// Fixed-resolution pixel patches of a resized image.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPatchSet {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    /// `N x (patch_h * patch_w * channels)`, each row flattened `h, w, c`.
    pub flattened: Tensor<f32>,
}

impl PixelPatchSet {
    pub fn count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn dim(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }
}

/// Resizes to `target_h x target_w` and cuts `patch_h x patch_w` patches in
/// row-major patch order.
pub fn pixel_patchify(
    img: &Image,
    target_h: usize,
    target_w: usize,
    patch_h: usize,
    patch_w: usize,
) -> Result<PixelPatchSet> {
    if patch_h == 0 || patch_w == 0 || target_h % patch_h != 0 || target_w % patch_w != 0 {
        return Err(Error::config(
            "vision.pixel_patch",
            format!("{patch_h}x{patch_w} patches do not tile a {target_h}x{target_w} image"),
        ));
    }
    let resized = img.resize(target_h, target_w);
    let c = img.channels();
    let (gr, gc) = (target_h / patch_h, target_w / patch_w);
    let dim = patch_h * patch_w * c;
    let mut data = Vec::with_capacity(gr * gc * dim);
    for r in 0..gr {
        for q in 0..gc {
            for y in 0..patch_h {
                let start = ((r * patch_h + y) * target_w + q * patch_w) * c;
                data.extend_from_slice(&resized.pixels()[start..start + patch_w * c]);
            }
        }
    }
    Ok(PixelPatchSet {
        grid_rows: gr,
        grid_cols: gc,
        patch_h,
        patch_w,
        channels: c,
        flattened: Tensor::new([gr * gc, dim], data)?,
    })
}

/// Inverse of [`pixel_patchify`] on the resized image.
pub fn unpatchify(set: &PixelPatchSet) -> Result<Image> {
    let (h, w, c) = (set.grid_rows * set.patch_h, set.grid_cols * set.patch_w, set.channels);
    let mut pixels = vec![0.0f32; h * w * c];
    for r in 0..set.grid_rows {
        for q in 0..set.grid_cols {
            let row = set.flattened.row(r * set.grid_cols + q);
            for y in 0..set.patch_h {
                let dst = ((r * set.patch_h + y) * w + q * set.patch_w) * c;
                let src = y * set.patch_w * c;
                pixels[dst..dst + set.patch_w * c].copy_from_slice(&row[src..src + set.patch_w * c]);
            }
        }
    }
    Image::new_unchecked(h, w, c, pixels)
}
