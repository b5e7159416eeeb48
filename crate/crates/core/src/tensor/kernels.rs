//! Dense inner loops. Every output element is produced by exactly one
//! sequential loop, so results do not depend on the rayon thread count.

use rayon::prelude::*;

/// Below this many multiply-adds the work stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `y[n, o] = b[o] + sum_i x[n, i] w[i, o]`.
pub fn dense_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    let row = |(r, yr): (usize, &mut [f64])| {
        yr.copy_from_slice(b);
        let xr = &x[r * inp..(r + 1) * inp];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wr = &w[i * out..(i + 1) * out];
            for (yo, wo) in yr.iter_mut().zip(wr) {
                *yo += xi * wo;
            }
        }
    };
    if n * inp * out >= PAR_THRESHOLD {
        y.par_chunks_mut(out).enumerate().for_each(row);
    } else {
        y.chunks_mut(out).enumerate().for_each(row);
    }
    y
}

/// `dx[n, i] = sum_o dy[n, o] w[i, o]`.
pub fn dense_grad_input(dy: &[f64], w: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * inp];
    let row = |(r, dxr): (usize, &mut [f64])| {
        let dyr = &dy[r * out..(r + 1) * out];
        for (i, d) in dxr.iter_mut().enumerate() {
            let wr = &w[i * out..(i + 1) * out];
            *d = dyr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    };
    if n * inp * out >= PAR_THRESHOLD {
        dx.par_chunks_mut(inp).enumerate().for_each(row);
    } else {
        dx.chunks_mut(inp).enumerate().for_each(row);
    }
    dx
}

/// `dw[i, o] = sum_n x[n, i] dy[n, o]`.
pub fn dense_grad_weight(x: &[f64], dy: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut dw = vec![0.0; inp * out];
    let row = |(i, dwr): (usize, &mut [f64])| {
        for r in 0..n {
            let xi = x[r * inp + i];
            if xi == 0.0 {
                continue;
            }
            let dyr = &dy[r * out..(r + 1) * out];
            for (d, g) in dwr.iter_mut().zip(dyr) {
                *d += xi * g;
            }
        }
    };
    if n * inp * out >= PAR_THRESHOLD {
        dw.par_chunks_mut(out).enumerate().for_each(row);
    } else {
        dw.chunks_mut(out).enumerate().for_each(row);
    }
    dw
}

pub fn column_sums(dy: &[f64], n: usize, out: usize) -> Vec<f64> {
    let mut db = vec![0.0; out];
    for r in 0..n {
        for (d, g) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *d += g;
        }
    }
    db
}

/// Geometry of a 2D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `C x H x W` image into a `(C kh kw) x (Ho Wo)` matrix.
pub fn im2col(img: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut col = vec![0.0; g.patch() * ho * wo];
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[r * ho * wo..(r + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[oi * wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im(col: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut img = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &col[r * ho * wo..(r + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            plane[ii as usize * g.width + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    img
}

/// `y[o, p] = b[o] + sum_r k[o, r] col[r, p]`.
pub fn conv_forward(col: &[f64], k: &[f64], b: &[f64], out_ch: usize, patch: usize, positions: usize) -> Vec<f64> {
    let mut y = vec![0.0; out_ch * positions];
    for (o, yo) in y.chunks_mut(positions).enumerate() {
        yo.fill(b[o]);
        for r in 0..patch {
            let kr = k[o * patch + r];
            if kr == 0.0 {
                continue;
            }
            for (v, c) in yo.iter_mut().zip(&col[r * positions..(r + 1) * positions]) {
                *v += kr * c;
            }
        }
    }
    y
}

/// Accumulates `dk[o, r] += sum_p dy[o, p] col[r, p]`.
pub fn conv_grad_kernel(col: &[f64], dy: &[f64], dk: &mut [f64], out_ch: usize, patch: usize, positions: usize) {
    for o in 0..out_ch {
        let dyo = &dy[o * positions..(o + 1) * positions];
        for r in 0..patch {
            let c = &col[r * positions..(r + 1) * positions];
            dk[o * patch + r] += dyo.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// `dcol[r, p] = sum_o k[o, r] dy[o, p]`.
pub fn conv_grad_col(k: &[f64], dy: &[f64], out_ch: usize, patch: usize, positions: usize) -> Vec<f64> {
    let mut dcol = vec![0.0; patch * positions];
    for o in 0..out_ch {
        let dyo = &dy[o * positions..(o + 1) * positions];
        for r in 0..patch {
            let kr = k[o * patch + r];
            if kr == 0.0 {
                continue;
            }
            for (d, g) in dcol[r * positions..(r + 1) * positions].iter_mut().zip(dyo) {
                *d += kr * g;
            }
        }
    }
    dcol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 6,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let img: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let col = im2col(&img, &g);
        let other: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = col.iter().zip(&other).map(|(a, b)| a * b).sum();
        let back = col2im(&other, &g);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(g.out_height(), 3);
        assert_eq!(g.out_width(), 3);
    }

    #[test]
    fn dense_matches_naive() {
        let (n, i, o) = (3, 4, 2);
        let x: Vec<f64> = (0..n * i).map(|v| v as f64 - 5.0).collect();
        let w: Vec<f64> = (0..i * o).map(|v| 0.5 * v as f64).collect();
        let b = vec![1.0, -1.0];
        let y = dense_forward(&x, &w, &b, n, i, o);
        for r in 0..n {
            for c in 0..o {
                let expect: f64 = b[c] + (0..i).map(|k| x[r * i + k] * w[k * o + c]).sum::<f64>();
                assert_eq!(y[r * o + c], expect);
            }
        }
    }
}
