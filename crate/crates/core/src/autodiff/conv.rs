//! im2col convolution kernels on NHWC buffers.

/// Geometry of a square-kernel, same-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    pub fn out_pixels(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Unfold `input` (`B×H×W×Cin`) into rows of `K·K·Cin` values, one row per
/// output pixel. Out-of-bounds taps read zero.
pub fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let pad = g.pad() as isize;
    let mut cols = vec![0.0; g.out_pixels() * pl];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_ch;
                        let dst = row + (ky * g.kernel + kx) * g.in_ch;
                        cols[dst..dst + g.in_ch].copy_from_slice(&input[src..src + g.in_ch]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back to the input.
pub fn col2im(g: &ConvGeom, cols: &[f64], grad_input: &mut [f64]) {
    let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let pad = g.pad() as isize;
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_ch;
                        let src = row + (ky * g.kernel + kx) * g.in_ch;
                        for c in 0..g.in_ch {
                            grad_input[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
}
