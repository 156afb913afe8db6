//! Region feature extraction: bilinear crop onto a G×G×3 grid, then a fixed
//! orthogonal projection to d_v dimensions. Sampling clamps to the pixel
//! cells intersecting the box, so content strictly outside the box never
//! influences the feature.

use ndarray::ArrayView3;

use crate::corpus::BBox;
use crate::model::autograd::Mat;
use crate::rng::rng_for;

#[derive(Debug, Clone)]
pub struct RegionFeature {
    pub feature: Vec<f64>,
    /// x1, y1, x2, y2, area fraction.
    pub spatial: [f64; 5],
    /// The box actually featurized (whole image when degenerate).
    pub bbox: BBox,
    pub degenerate: bool,
}

/// Rows-orthonormal d_v × n projection, seeded once per corpus.
pub fn orthogonal_projection(d_v: usize, n: usize, seed: u64) -> Mat {
    debug_assert!(d_v <= n);
    let mut rng = rng_for(seed, "roi-projection", 0);
    let raw = crate::model::params::gaussian(&mut rng, d_v, n, 1.0);
    // Modified Gram-Schmidt over rows.
    let mut q = raw;
    for i in 0..d_v {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| q[[i, k]] * q[[j, k]]).sum();
            for k in 0..n {
                q[[i, k]] -= dot * q[[j, k]];
            }
        }
        let norm: f64 = (0..n).map(|k| q[[i, k]] * q[[i, k]]).sum::<f64>().sqrt();
        debug_assert!(norm > 1e-9, "degenerate Gram-Schmidt row");
        for k in 0..n {
            q[[i, k]] /= norm;
        }
    }
    q
}

pub fn extract(image: ArrayView3<'_, f32>, bbox: &BBox, grid: usize, projection: &Mat) -> RegionFeature {
    let clipped = bbox.clipped();
    let (bbox, degenerate) = if clipped.area() <= 1e-9 || !clipped.is_valid() {
        (BBox::whole_image(), true)
    } else {
        (clipped, false)
    };

    let (h, w, _) = image.dim();
    // Pixel cells intersecting the box; sampling never reads outside them.
    let c_lo = ((bbox.x1 * w as f64).floor() as usize).min(w - 1);
    let c_hi = (((bbox.x2 * w as f64).ceil() as usize).max(c_lo + 1) - 1).min(w - 1);
    let r_lo = ((bbox.y1 * h as f64).floor() as usize).min(h - 1);
    let r_hi = (((bbox.y2 * h as f64).ceil() as usize).max(r_lo + 1) - 1).min(h - 1);

    let mut crop = vec![0.0f64; grid * grid * 3];
    for gy in 0..grid {
        for gx in 0..grid {
            let ty = (gy as f64 + 0.5) / grid as f64;
            let tx = (gx as f64 + 0.5) / grid as f64;
            let py = (bbox.y1 + ty * (bbox.y2 - bbox.y1)) * h as f64 - 0.5;
            let px = (bbox.x1 + tx * (bbox.x2 - bbox.x1)) * w as f64 - 0.5;
            let y0 = (py.floor() as isize).clamp(r_lo as isize, r_hi as isize) as usize;
            let x0 = (px.floor() as isize).clamp(c_lo as isize, c_hi as isize) as usize;
            let y1 = (y0 + 1).min(r_hi);
            let x1 = (x0 + 1).min(c_hi);
            let wy = (py - y0 as f64).clamp(0.0, 1.0);
            let wx = (px - x0 as f64).clamp(0.0, 1.0);
            for ch in 0..3 {
                let v00 = f64::from(image[[y0, x0, ch]]);
                let v01 = f64::from(image[[y0, x1, ch]]);
                let v10 = f64::from(image[[y1, x0, ch]]);
                let v11 = f64::from(image[[y1, x1, ch]]);
                let v = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                    + wy * ((1.0 - wx) * v10 + wx * v11);
                crop[(gy * grid + gx) * 3 + ch] = v;
            }
        }
    }

    let d_v = projection.nrows();
    let mut feature = vec![0.0f64; d_v];
    for (i, f) in feature.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &c) in crop.iter().enumerate() {
            acc += projection[[i, k]] * c;
        }
        *f = acc;
    }

    RegionFeature {
        feature,
        spatial: [bbox.x1, bbox.y1, bbox.x2, bbox.y2, bbox.area()],
        bbox,
        degenerate,
    }
}
