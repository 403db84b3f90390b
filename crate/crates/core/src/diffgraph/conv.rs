//! im2col / col2im kernels for strided 2-d convolutions on HWC images.

/// Spatial geometry of a convolution from a large grid to a small grid.
///
/// For a forward convolution `image` is the input and `grid` the output.
/// A transposed convolution uses the same geometry with the roles of input
/// and output swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn grid_h(&self) -> usize {
        (self.image_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn grid_w(&self) -> usize {
        (self.image_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn image_len(&self) -> usize {
        self.image_h * self.image_w * self.image_c
    }

    pub fn grid_len(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Length of one patch row: `kernel * kernel * image_c`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.image_c
    }

    /// Smallest image size that a transposed convolution with this kernel,
    /// stride and padding maps a grid of size `grid` onto.
    pub fn transposed_out(grid: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (grid - 1) * stride + kernel - 2 * pad
    }

    #[inline]
    fn source(&self, g: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (g * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Gathers patches: `images` is `[n, image_len]`, result `[n * grid_len, patch_len]`.
pub fn im2col(images: &[f64], n: usize, geom: &ConvGeom) -> Vec<f64> {
    let (gh, gw) = (geom.grid_h(), geom.grid_w());
    let (c, k) = (geom.image_c, geom.kernel);
    let patch = geom.patch_len();
    let mut cols = vec![0.0; n * gh * gw * patch];
    for b in 0..n {
        let img = &images[b * geom.image_len()..(b + 1) * geom.image_len()];
        for gy in 0..gh {
            for gx in 0..gw {
                let row = ((b * gh + gy) * gw + gx) * patch;
                for ky in 0..k {
                    let Some(iy) = geom.source(gy, ky, geom.image_h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = geom.source(gx, kx, geom.image_w) else {
                            continue;
                        };
                        let src = (iy * geom.image_w + ix) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patches back onto images; the adjoint of [`im2col`].
pub fn col2im(cols: &[f64], n: usize, geom: &ConvGeom) -> Vec<f64> {
    let (gh, gw) = (geom.grid_h(), geom.grid_w());
    let (c, k) = (geom.image_c, geom.kernel);
    let patch = geom.patch_len();
    let mut images = vec![0.0; n * geom.image_len()];
    for b in 0..n {
        let img = &mut images[b * geom.image_len()..(b + 1) * geom.image_len()];
        for gy in 0..gh {
            for gx in 0..gw {
                let row = ((b * gh + gy) * gw + gx) * patch;
                for ky in 0..k {
                    let Some(iy) = geom.source(gy, ky, geom.image_h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = geom.source(gx, kx, geom.image_w) else {
                            continue;
                        };
                        let dst = (iy * geom.image_w + ix) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            img[dst + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
    images
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_geometry() {
        let g = ConvGeom {
            image_h: 16,
            image_w: 16,
            image_c: 3,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        assert_eq!((g.grid_h(), g.grid_w()), (8, 8));
        assert_eq!(ConvGeom::transposed_out(8, 4, 2, 1), 16);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            image_h: 5,
            image_w: 4,
            image_c: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let n = 2;
        let x: Vec<f64> = (0..n * g.image_len())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let y: Vec<f64> = (0..n * g.grid_len() * g.patch_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, n, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, n, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
