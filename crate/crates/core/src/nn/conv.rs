//! 3x3x3 "same" convolution and 1x1x1 pointwise convolution.
//!
//! The 3^3 kernel runs on a grid padded by one voxel. On the padded linear
//! index `p`, a kernel tap `(dx,dy,dz)` is a constant offset, so each im2col
//! row is a contiguous copy and the whole layer reduces to chunked GEMMs.
//! Outputs are computed for every padded position between the first and last
//! interior voxel; the non-interior ones are discarded.

use crate::error::{Error, Result};
use crate::volume::Dims;

use super::{gemm, Real, Tensor};

const CHUNK: usize = 4096;
pub(crate) const TAPS: usize = 27;

struct PadGeom {
    w: usize,
    h: usize,
    wp: usize,
    hp: usize,
    np: usize,
    first: usize,
    end: usize,
    offsets: [isize; TAPS],
}

impl PadGeom {
    fn new(dims: Dims) -> Self {
        let (w, h, l) = (dims.w(), dims.h(), dims.l());
        let (wp, hp, lp) = (w + 2, h + 2, l + 2);
        let mut offsets = [0isize; TAPS];
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let k = ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize;
                    offsets[k] = dz * (hp * wp) as isize + dy * wp as isize + dx;
                }
            }
        }
        PadGeom {
            w,
            h,
            wp,
            hp,
            np: wp * hp * lp,
            first: hp * wp + wp + 1,
            end: l * hp * wp + h * wp + w + 1,
            offsets,
        }
    }

    fn pad<T: Real>(&self, t: &Tensor<T>) -> Vec<T> {
        let mut out = vec![T::zero(); t.channels * self.np];
        let (w, h) = (self.w, self.h);
        for c in 0..t.channels {
            let src = t.channel(c);
            let dst = &mut out[c * self.np..(c + 1) * self.np];
            for (row, chunk) in src.chunks_exact(w).enumerate() {
                let (y, z) = (row % h, row / h);
                let p = (z + 1) * self.hp * self.wp + (y + 1) * self.wp + 1;
                dst[p..p + w].copy_from_slice(chunk);
            }
        }
        out
    }

    /// Calls `f(j, interior_index)` for every interior position in `[s, s+n)`.
    fn for_interior(&self, s: usize, n: usize, mut f: impl FnMut(usize, usize)) {
        let plane = self.hp * self.wp;
        let mut z = s / plane;
        let mut y = (s % plane) / self.wp;
        let mut x = s % self.wp;
        for j in 0..n {
            if x >= 1 && x <= self.w && y >= 1 && y <= self.h {
                f(j, (x - 1) + self.w * ((y - 1) + self.h * (z - 1)));
            }
            x += 1;
            if x == self.wp {
                x = 0;
                y += 1;
                if y == self.hp {
                    y = 0;
                    z += 1;
                }
            }
        }
    }

    /// `flip` negates the tap offsets, which turns the correlation into the
    /// transposed convolution needed for input gradients.
    fn im2col<T: Real>(&self, xp: &[T], cin: usize, s: usize, n: usize, flip: bool, col: &mut [T]) {
        for ci in 0..cin {
            for (k, &off) in self.offsets.iter().enumerate() {
                let src = (ci * self.np + s) as isize + if flip { -off } else { off };
                let src = src as usize;
                col[(ci * TAPS + k) * n..(ci * TAPS + k + 1) * n].copy_from_slice(&xp[src..src + n]);
            }
        }
    }

    /// `out[co] = bias[co] + sum_{ci,k} weight[co][ci*27+k] * xp[ci][p +/- off_k]`
    /// at every interior position.
    fn correlate<T: Real>(&self, xp: &[T], cin: usize, weight: &[T], bias: Option<&[T]>, flip: bool, out: &mut Tensor<T>) {
        let cout = out.channels;
        let nvox = out.voxels();
        let kdim = cin * TAPS;
        let cap = CHUNK.min(self.end - self.first);
        let mut col = vec![T::zero(); kdim * cap];
        let mut res = vec![T::zero(); cout * cap];
        let mut s = self.first;
        while s < self.end {
            let n = CHUNK.min(self.end - s);
            self.im2col(xp, cin, s, n, flip, &mut col);
            gemm(cout, n, kdim, T::one(), weight, (kdim, 1), &col, (n, 1), T::zero(), &mut res, n);
            let out_data = &mut out.data;
            self.for_interior(s, n, |j, idx| {
                for co in 0..cout {
                    let b = bias.map_or(T::zero(), |b| b[co]);
                    out_data[co * nvox + idx] = res[co * n + j] + b;
                }
            });
            s += n;
        }
    }
}

/// 3x3x3 convolution, stride 1, zero padding 1.
/// `weight` is `cout x (cin x 27)` with taps ordered `dz, dy, dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Conv3 {
            cin,
            cout,
            weight: vec![T::zero(); cout * cin * TAPS],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * TAPS
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels != self.cin {
            return Err(Error::Shape(format!(
                "conv3 expects {} input channels, got {}",
                self.cin, x.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let g = PadGeom::new(x.dims);
        let xp = g.pad(x);
        let mut out = Tensor::zeros(self.cout, x.dims);
        g.correlate(&xp, self.cin, &self.weight, Some(&self.bias), false, &mut out);
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        gout: &Tensor<T>,
        grad: &mut Conv3<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        self.check(x)?;
        if gout.channels != self.cout || gout.dims != x.dims {
            return Err(Error::Shape("conv3 backward: gradient shape".into()));
        }
        let g = PadGeom::new(x.dims);
        let xp = g.pad(x);
        let gp = g.pad(gout);
        let kdim = self.cin * TAPS;
        let cap = CHUNK.min(g.end - g.first);
        let mut col = vec![T::zero(); kdim * cap];
        let mut s = g.first;
        while s < g.end {
            let n = CHUNK.min(g.end - s);
            g.im2col(&xp, self.cin, s, n, false, &mut col);
            // dW += G (cout x n) . col^T (n x kdim); G is a row-strided view of gp.
            gemm(self.cout, kdim, n, T::one(), &gp[s..], (g.np, 1), &col, (1, n), T::one(), &mut grad.weight, kdim);
            s += n;
        }
        for co in 0..self.cout {
            grad.bias[co] += gout.channel(co).iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return Ok(None);
        }
        // dx = transposed convolution of the output gradient.
        let mut wt = vec![T::zero(); self.cin * self.cout * TAPS];
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for k in 0..TAPS {
                    wt[ci * self.cout * TAPS + co * TAPS + k] = self.weight[co * kdim + ci * TAPS + k];
                }
            }
        }
        let mut dx = Tensor::zeros(self.cin, x.dims);
        g.correlate(&gp, self.cout, &wt, None, true, &mut dx);
        Ok(Some(dx))
    }
}

/// 1x1x1 convolution; `weight` is `cout x cin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv1<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Conv1 {
            cin,
            cout,
            weight: vec![T::zero(); cout * cin],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels != self.cin {
            return Err(Error::Shape(format!(
                "conv1 expects {} input channels, got {}",
                self.cin, x.channels
            )));
        }
        let n = x.voxels();
        let mut out = Tensor::zeros(self.cout, x.dims);
        for co in 0..self.cout {
            out.channel_mut(co).fill(self.bias[co]);
        }
        gemm(self.cout, n, self.cin, T::one(), &self.weight, (self.cin, 1), &x.data, (n, 1), T::one(), &mut out.data, n);
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor<T>, gout: &Tensor<T>, grad: &mut Conv1<T>) -> Result<Tensor<T>> {
        if gout.channels != self.cout || gout.dims != x.dims || x.channels != self.cin {
            return Err(Error::Shape("conv1 backward: shape".into()));
        }
        let n = x.voxels();
        gemm(self.cout, self.cin, n, T::one(), &gout.data, (n, 1), &x.data, (1, n), T::one(), &mut grad.weight, self.cin);
        for co in 0..self.cout {
            grad.bias[co] += gout.channel(co).iter().copied().sum::<T>();
        }
        let mut dx = Tensor::zeros(self.cin, x.dims);
        gemm(self.cin, n, self.cout, T::one(), &self.weight, (1, self.cin), &gout.data, (n, 1), T::zero(), &mut dx.data, n);
        Ok(dx)
    }
}
