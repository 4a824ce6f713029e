//! Zero-padded, stride-1, 3x3x3 convolution kernels over `[channels, d, h, w]`.
//!
//! Every output row is accumulated in a fixed order (input channel, then
//! kernel offset), and output channels are independent, so parallelising over
//! output channels keeps results bit-identical to the serial loop.

use rayon::prelude::*;

use crate::grid::Dims;

/// `out[x] += a * src[x + shift]` on the valid overlap, `shift` in `{-1, 0, 1}`.
#[inline]
fn shifted_axpy(out: &mut [f64], src: &[f64], a: f64, shift: isize) {
    let w = out.len();
    match shift {
        -1 => {
            for (o, s) in out[1..].iter_mut().zip(&src[..w - 1]) {
                *o += a * s;
            }
        }
        0 => {
            for (o, s) in out.iter_mut().zip(src) {
                *o += a * s;
            }
        }
        _ => {
            for (o, s) in out[..w - 1].iter_mut().zip(&src[1..]) {
                *o += a * s;
            }
        }
    }
}

/// Dot product with four interleaved accumulators (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn shifted(z: usize, k: usize, n: usize) -> Option<usize> {
    let s = z as isize + k as isize - 1;
    (s >= 0 && s < n as isize).then_some(s as usize)
}

pub(crate) fn conv3d_forward(x: &[f64], cin: usize, w: &[f64], b: &[f64], cout: usize, dims: Dims) -> Vec<f64> {
    let Dims { depth, height, width } = dims;
    let n = dims.len();
    let mut out = vec![0.0; cout * n];
    out.par_chunks_mut(n).enumerate().for_each(|(co, plane)| {
        for z in 0..depth {
            for y in 0..height {
                let row = &mut plane[(z * height + y) * width..][..width];
                row.fill(b[co]);
                for ci in 0..cin {
                    let src = &x[ci * n..(ci + 1) * n];
                    let wk = &w[(co * cin + ci) * 27..][..27];
                    for kz in 0..3 {
                        let Some(sz) = shifted(z, kz, depth) else { continue };
                        for ky in 0..3 {
                            let Some(sy) = shifted(y, ky, height) else { continue };
                            let srow = &src[(sz * height + sy) * width..][..width];
                            for kx in 0..3 {
                                shifted_axpy(row, srow, wk[kz * 9 + ky * 3 + kx], kx as isize - 1);
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the input.
pub(crate) fn conv3d_backward_input(gout: &[f64], cout: usize, w: &[f64], cin: usize, dims: Dims) -> Vec<f64> {
    let Dims { depth, height, width } = dims;
    let n = dims.len();
    let mut gin = vec![0.0; cin * n];
    gin.par_chunks_mut(n).enumerate().for_each(|(ci, plane)| {
        for z in 0..depth {
            for y in 0..height {
                let row = &mut plane[(z * height + y) * width..][..width];
                for co in 0..cout {
                    let g = &gout[co * n..(co + 1) * n];
                    let wk = &w[(co * cin + ci) * 27..][..27];
                    for kz in 0..3 {
                        // Output voxel z' reads input z' + kz - 1, so input z receives from z' = z - kz + 1.
                        let Some(gz) = shifted(z, 2 - kz, depth) else { continue };
                        for ky in 0..3 {
                            let Some(gy) = shifted(y, 2 - ky, height) else { continue };
                            let grow = &g[(gz * height + gy) * width..][..width];
                            for kx in 0..3 {
                                shifted_axpy(row, grow, wk[kz * 9 + ky * 3 + kx], 1 - kx as isize);
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradients with respect to the weights `[cout, cin, 27]` and bias `[cout]`.
pub(crate) fn conv3d_backward_params(
    gout: &[f64],
    cout: usize,
    x: &[f64],
    cin: usize,
    dims: Dims,
) -> (Vec<f64>, Vec<f64>) {
    let Dims { depth, height, width } = dims;
    let n = dims.len();
    let mut gw = vec![0.0; cout * cin * 27];
    gw.par_chunks_mut(cin * 27).enumerate().for_each(|(co, gwc)| {
        let g = &gout[co * n..(co + 1) * n];
        for ci in 0..cin {
            let src = &x[ci * n..(ci + 1) * n];
            let acc = &mut gwc[ci * 27..(ci + 1) * 27];
            for z in 0..depth {
                for y in 0..height {
                    let grow = &g[(z * height + y) * width..][..width];
                    for kz in 0..3 {
                        let Some(sz) = shifted(z, kz, depth) else { continue };
                        for ky in 0..3 {
                            let Some(sy) = shifted(y, ky, height) else { continue };
                            let srow = &src[(sz * height + sy) * width..][..width];
                            let k = kz * 9 + ky * 3;
                            acc[k] += dot(&grow[1..], &srow[..width - 1]);
                            acc[k + 1] += dot(grow, srow);
                            acc[k + 2] += dot(&grow[..width - 1], &srow[1..]);
                        }
                    }
                }
            }
        }
    });
    let gb = (0..cout)
        .map(|co| gout[co * n..(co + 1) * n].iter().sum())
        .collect();
    (gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], cin: usize, w: &[f64], b: &[f64], cout: usize, d: Dims) -> Vec<f64> {
        let n = d.len();
        let mut out = vec![0.0; cout * n];
        for co in 0..cout {
            for v in 0..n {
                let (z, y, xx) = d.coords(v);
                let mut s = b[co];
                for ci in 0..cin {
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let p = (z as isize + kz as isize - 1, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if p.0 < 0 || p.1 < 0 || p.2 < 0 || p.0 >= d.depth as isize || p.1 >= d.height as isize || p.2 >= d.width as isize {
                                    continue;
                                }
                                s += w[(co * cin + ci) * 27 + kz * 9 + ky * 3 + kx]
                                    * x[ci * n + d.index(p.0 as usize, p.1 as usize, p.2 as usize)];
                            }
                        }
                    }
                }
                out[co * n + v] = s;
            }
        }
        out
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn forward_and_adjoints_match_naive() {
        let d = Dims::new(3, 4, 5);
        let (cin, cout) = (2, 3);
        let mut s = 9u64;
        let x: Vec<f64> = (0..cin * d.len()).map(|_| lcg(&mut s)).collect();
        let w: Vec<f64> = (0..cout * cin * 27).map(|_| lcg(&mut s)).collect();
        let b: Vec<f64> = (0..cout).map(|_| lcg(&mut s)).collect();
        let out = conv3d_forward(&x, cin, &w, &b, cout, d);
        let reference = naive(&x, cin, &w, &b, cout, d);
        for (a, r) in out.iter().zip(&reference) {
            assert!((a - r).abs() < 1e-12);
        }
        // Adjoint identity: <g, conv(x)> - <g, b> = <conv^T g, x> = <dW(g, x), W>.
        let g: Vec<f64> = (0..cout * d.len()).map(|_| lcg(&mut s)).collect();
        let zero_b = vec![0.0; cout];
        let lin = conv3d_forward(&x, cin, &w, &zero_b, cout, d);
        let lhs: f64 = g.iter().zip(&lin).map(|(a, b)| a * b).sum();
        let gin = conv3d_backward_input(&g, cout, &w, cin, d);
        let rhs: f64 = gin.iter().zip(&x).map(|(a, b)| a * b).sum();
        let (gw, gb) = conv3d_backward_params(&g, cout, &x, cin, d);
        let rhs_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
        for co in 0..cout {
            let want: f64 = g[co * d.len()..(co + 1) * d.len()].iter().sum();
            assert!((gb[co] - want).abs() < 1e-12);
        }
    }
}
