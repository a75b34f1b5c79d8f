//! Boundary extraction from semantic masks.
//!
//! Boundary bands come from per-class morphological dilation minus erosion
//! with a square structuring element and replicate border padding. For equal
//! kernels this is exactly "the window sees two different classes", which is
//! what the brute-force oracles in the tests check against. The three-kernel
//! decomposition splits the widest band into disjoint thin/medium/thick
//! rings, giving every boundary pixel a single (class, granularity)
//! coordinate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reserved class ID excluded from losses, statistics, and boundaries.
pub const IGNORE_LABEL: i32 = 255;

/// 2-D integer class-ID grid.
#[derive(Clone, Debug)]
pub struct SemanticMask {
    grid: Tensor<i32>,
    num_classes: usize,
}

impl SemanticMask {
    pub fn new(grid: Tensor<i32>, num_classes: usize) -> Result<Self> {
        if grid.ndim() != 2 {
            return Err(Error::shape(format!(
                "semantic mask must be 2-D, got {:?}",
                grid.shape()
            )));
        }
        for &v in grid.data() {
            if v != IGNORE_LABEL && (v < 0 || v as usize >= num_classes) {
                return Err(Error::validation(
                    "mask",
                    format!("label {} outside [0, {}) and not ignore", v, num_classes),
                ));
            }
        }
        Ok(SemanticMask { grid, num_classes })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn grid(&self) -> &Tensor<i32> {
        &self.grid
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> i32 {
        self.grid.at2(y, x)
    }
}

/// Per-pixel granularity assignment at feature resolution.
///
/// 0 = interior, 1 = thin, 2 = medium, 3 = thick. A pixel gets the smallest
/// granularity whose band contains it, so the rings are disjoint.
#[derive(Clone, Debug)]
pub struct BoundaryBands {
    pub bands: Tensor<u8>,
    pub kernels: [usize; 3],
}

pub const NUM_GRANULARITIES: usize = 3;

fn check_kernel(k: usize) -> Result<usize> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::validation(
            "kernel",
            format!("kernel size must be odd and >= 1, got {}", k),
        ));
    }
    Ok(k / 2)
}

fn check_binary_2d(mask: &Tensor<u8>) -> Result<(usize, usize)> {
    if mask.ndim() != 2 {
        return Err(Error::shape(format!(
            "binary mask must be 2-D, got {:?}",
            mask.shape()
        )));
    }
    mask.expect_binary("mask")?;
    Ok((mask.shape()[0], mask.shape()[1]))
}

/// Square dilation: output is 1 iff any pixel of the clamped k x k window
/// is 1. Clamping the window is equivalent to replicate padding.
pub fn dilate(mask: &Tensor<u8>, k: usize) -> Result<Tensor<u8>> {
    let r = check_kernel(k)?;
    let (h, w) = check_binary_2d(mask)?;
    let mut out = Tensor::filled(vec![h, w], 0u8);
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let mut hit = 0u8;
            'scan: for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if mask.at2(yy, xx) == 1 {
                        hit = 1;
                        break 'scan;
                    }
                }
            }
            out.set2(y, x, hit);
        }
    }
    Ok(out)
}

/// Square erosion: output is 1 iff every pixel of the clamped k x k window
/// is 1.
pub fn erode(mask: &Tensor<u8>, k: usize) -> Result<Tensor<u8>> {
    let r = check_kernel(k)?;
    let (h, w) = check_binary_2d(mask)?;
    let mut out = Tensor::filled(vec![h, w], 0u8);
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let mut all = 1u8;
            'scan: for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if mask.at2(yy, xx) == 0 {
                        all = 0;
                        break 'scan;
                    }
                }
            }
            out.set2(y, x, all);
        }
    }
    Ok(out)
}

/// Multi-class boundary band: union over classes of dilate(class) minus
/// erode(class). Pixels whose max(k_d, k_e) window touches the ignore label
/// are excluded.
pub fn extract_boundary(mask: &SemanticMask, k_d: usize, k_e: usize) -> Result<Tensor<u8>> {
    check_kernel(k_d)?;
    check_kernel(k_e)?;
    let h = mask.height();
    let w = mask.width();

    let mut present = vec![false; mask.num_classes()];
    let mut any_ignore = false;
    for &v in mask.grid().data() {
        if v == IGNORE_LABEL {
            any_ignore = true;
        } else {
            present[v as usize] = true;
        }
    }

    let mut boundary = Tensor::filled(vec![h, w], 0u8);
    for (class, _) in present.iter().enumerate().filter(|(_, &p)| p) {
        let class_mask = mask.grid().map(|v| u8::from(v == class as i32));
        let dilated = dilate(&class_mask, k_d)?;
        let eroded = erode(&class_mask, k_e)?;
        for (out, (&d, &e)) in boundary
            .data_mut()
            .iter_mut()
            .zip(dilated.data().iter().zip(eroded.data().iter()))
        {
            if d == 1 && e == 0 {
                *out = 1;
            }
        }
    }

    if any_ignore {
        let ignore_mask = mask.grid().map(|v| u8::from(v == IGNORE_LABEL));
        let touched = dilate(&ignore_mask, k_d.max(k_e))?;
        for (out, &t) in boundary.data_mut().iter_mut().zip(touched.data()) {
            if t == 1 {
                *out = 0;
            }
        }
    }

    Ok(boundary)
}

/// Majority-vote downsampling by an integer stride. Ignore pixels do not
/// vote; ties go to the smallest class ID; an all-ignore block stays ignore.
pub fn downsample_mask(mask: &SemanticMask, stride: usize) -> Result<SemanticMask> {
    if stride == 0 {
        return Err(Error::validation("stride", "must be >= 1"));
    }
    let h = mask.height();
    let w = mask.width();
    if !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(Error::validation(
            "stride",
            format!("{}x{} not divisible by stride {}", h, w, stride),
        ));
    }
    let (hf, wf) = (h / stride, w / stride);
    let mut out = Tensor::filled(vec![hf, wf], IGNORE_LABEL);
    let mut counts = vec![0usize; mask.num_classes()];
    for i in 0..hf {
        for j in 0..wf {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in i * stride..(i + 1) * stride {
                for x in j * stride..(j + 1) * stride {
                    let v = mask.label(y, x);
                    if v != IGNORE_LABEL {
                        counts[v as usize] += 1;
                    }
                }
            }
            // position of the first maximum = smallest class ID on ties
            let (best, &n) = counts
                .iter()
                .enumerate()
                .max_by_key(|&(class, &n)| (n, std::cmp::Reverse(class)))
                .expect("num_classes >= 1");
            if n > 0 {
                out.set2(i, j, best as i32);
            }
        }
    }
    SemanticMask::new(out, mask.num_classes())
}

/// Decomposes the boundary into disjoint granularity rings.
///
/// Each kernel produces one band; a pixel is labeled with the smallest
/// granularity index whose band contains it (1 = thin through 3 = thick).
pub fn granularity_bands(mask: &SemanticMask, kernels: [usize; 3]) -> Result<BoundaryBands> {
    if !(kernels[0] < kernels[1] && kernels[1] < kernels[2]) {
        return Err(Error::validation(
            "granularity_kernels",
            format!("kernels must be strictly increasing, got {:?}", kernels),
        ));
    }
    let h = mask.height();
    let w = mask.width();
    let mut bands = Tensor::filled(vec![h, w], 0u8);
    // Coarse to fine so the finest band wins the final value.
    for (g, &k) in kernels.iter().enumerate().rev() {
        let band = extract_boundary(mask, k, k)?;
        for (out, &b) in bands.data_mut().iter_mut().zip(band.data()) {
            if b == 1 {
                *out = (g + 1) as u8;
            }
        }
    }
    Ok(BoundaryBands { bands, kernels })
}
