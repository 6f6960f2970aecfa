//! Patchification, its inverse, and the fixed (non-learned) encodings:
//! 2-D sinusoidal positions for patch-grid tokens and sinusoidal timestep
//! features.

use crate::image::Image;
use crate::scalar::Scalar;

/// Flatten an image into raw patch payloads, row-major over the patch
/// grid, each patch row-major over pixels with interleaved RGB. Returns
/// the payload matrix `[n_patches, p*p*3]` (flattened) and the grid
/// coordinates (row, col) of each patch.
pub fn patchify<F: Scalar>(img: &Image, p: usize) -> (Vec<F>, Vec<(usize, usize)>) {
    assert!(p > 0 && img.width % p == 0 && img.height % p == 0,
        "patch size {p} must divide {}x{}", img.width, img.height);
    let (gw, gh) = (img.width / p, img.height / p);
    let payload_dim = p * p * 3;
    let mut out = Vec::with_capacity(gw * gh * payload_dim);
    let mut coords = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            coords.push((gy, gx));
            for py in 0..p {
                for px in 0..p {
                    let rgb = img.pixel(gx * p + px, gy * p + py);
                    out.push(F::of(rgb[0] as f64));
                    out.push(F::of(rgb[1] as f64));
                    out.push(F::of(rgb[2] as f64));
                }
            }
        }
    }
    (out, coords)
}

/// Grid coordinates (row, col) of every patch in [`patchify`] order.
pub fn patch_coords(resolution: usize, p: usize) -> Vec<(usize, usize)> {
    assert!(p > 0 && resolution % p == 0, "patch size {p} must divide {resolution}");
    let side = resolution / p;
    let mut coords = Vec::with_capacity(side * side);
    for gy in 0..side {
        for gx in 0..side {
            coords.push((gy, gx));
        }
    }
    coords
}

/// Inverse of [`patchify`] for raw payloads. Values are snapped onto the
/// image grid by the `Image` constructor.
pub fn unpatchify<F: Scalar>(payload: &[F], width: usize, height: usize, p: usize) -> Image {
    assert!(p > 0 && width % p == 0 && height % p == 0);
    let (gw, gh) = (width / p, height / p);
    assert_eq!(payload.len(), gw * gh * p * p * 3, "payload length");
    let mut img = Image::new(width, height);
    let mut i = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let rgb = [
                        payload[i].f64() as f32,
                        payload[i + 1].f64() as f32,
                        payload[i + 2].f64() as f32,
                    ];
                    i += 3;
                    img.set_pixel(gx * p + px, gy * p + py, rgb);
                }
            }
        }
    }
    img.snap();
    img
}

/// 2-D sinusoidal positional encoding: the first d/2 channels encode the
/// row coordinate and the rest the column, each half with the standard
/// interleaved sin/cos frequency ladder. Equal coordinates give equal rows
/// by construction.
pub fn grid_positional<F: Scalar>(coords: &[(usize, usize)], d: usize) -> Vec<F> {
    assert!(d % 4 == 0, "positional encoding needs d_model % 4 == 0, got {d}");
    let half = d / 2;
    let mut out = Vec::with_capacity(coords.len() * d);
    for &(row, col) in coords {
        for (pos, _) in [(row, 0), (col, 1)] {
            for i in 0..half {
                let k = (i / 2) as f64;
                let omega = 10000f64.powf(-2.0 * k / half as f64);
                let arg = pos as f64 * omega;
                out.push(F::of(if i % 2 == 0 { arg.sin() } else { arg.cos() }));
            }
        }
    }
    out
}

/// Sinusoidal features of a scalar timestep in [0,1]; the input is scaled
/// by 1000 so the frequency ladder covers it well.
pub fn timestep_features<F: Scalar>(t: f64, dim: usize) -> Vec<F> {
    assert!(dim % 2 == 0, "timestep feature dim must be even");
    let half = dim / 2;
    let arg = t * 1000.0;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = 10000f64.powf(-(k as f64) / half as f64);
        out.push(F::of((arg * omega).sin()));
    }
    for k in 0..half {
        let omega = 10000f64.powf(-(k as f64) / half as f64);
        out.push(F::of((arg * omega).cos()));
    }
    out
}
