//! Fused multi-direction selective scan.
//!
//! For one direction with visiting order `t = 0..T` over positions, and each
//! channel `d` and state slot `n`:
//!
//! ```text
//! h[t,n,d] = a[t,d] * h[t-1,n,d] + b[n,d] * x[t,d]        h[-1] = 0
//! y[t,d]   = sum_n c[n,d] * h[t,n,d] + dskip[d] * x[t,d]
//! ```
//!
//! The op runs `R` directions over the same inputs and returns the mean of
//! their outputs. It is linear in the number of positions and keeps every
//! hidden state for the backward sweep.

use clear_tensor::{CustomOp, Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// Visiting orders for the four raster directions over an `h x w` grid:
/// row-major forward, row-major backward, column-major forward, column-major
/// backward.
pub fn raster_orders(h: usize, w: usize) -> Vec<Vec<usize>> {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
    let rev = |v: &Vec<usize>| v.iter().rev().copied().collect::<Vec<_>>();
    vec![row.clone(), rev(&row), col.clone(), rev(&col)]
}

struct ScanOp<T> {
    batch: usize,
    positions: usize,
    channels: usize,
    state_dim: usize,
    orders: Vec<Vec<usize>>,
    /// `[batch, dir, step, n, d]`
    states: Vec<T>,
}

impl<T: Real> ScanOp<T> {
    fn state_offset(&self, bi: usize, r: usize, step: usize) -> usize {
        let nd = self.state_dim * self.channels;
        ((bi * self.orders.len() + r) * self.positions + step) * nd
    }
}

impl<T: Real> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, gy: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, a, b, c, d) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data(), inputs[4].data());
        let (p_len, dd, nn, rr) = (self.positions, self.channels, self.state_dim, self.orders.len());
        let inv_r = T::lit(1.0 / rr as f64);
        let mut gx = vec![T::zero(); x.len()];
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); b.len()];
        let mut gc = vec![T::zero(); c.len()];
        let mut gd = vec![T::zero(); d.len()];
        let mut carry = vec![T::zero(); nn * dd];
        let zeros = vec![T::zero(); nn * dd];
        for bi in 0..self.batch {
            for (r, order) in self.orders.iter().enumerate() {
                carry.iter_mut().for_each(|v| *v = T::zero());
                for step in (0..p_len).rev() {
                    let row = bi * p_len + order[step];
                    let xr = &x[row * dd..(row + 1) * dd];
                    let gyr = &gy[row * dd..(row + 1) * dd];
                    let ar = &a[row * rr * dd + r * dd..row * rr * dd + (r + 1) * dd];
                    let h_off = self.state_offset(bi, r, step);
                    let h = &self.states[h_off..h_off + nn * dd];
                    let h_prev = if step > 0 { &self.states[h_off - nn * dd..h_off] } else { &zeros[..] };
                    for n in 0..nn {
                        let pr = (r * nn + n) * dd;
                        for ch in 0..dd {
                            let k = n * dd + ch;
                            let gyv = gyr[ch] * inv_r;
                            let gh = carry[k] + gyv * c[pr + ch];
                            gc[pr + ch] += gyv * h[k];
                            ga[row * rr * dd + r * dd + ch] += gh * h_prev[k];
                            gb[pr + ch] += gh * xr[ch];
                            gx[row * dd + ch] += gh * b[pr + ch];
                            carry[k] = gh * ar[ch];
                        }
                    }
                    for ch in 0..dd {
                        let gyv = gyr[ch] * inv_r;
                        gd[r * dd + ch] += gyv * xr[ch];
                        gx[row * dd + ch] += gyv * d[r * dd + ch];
                    }
                }
            }
        }
        vec![Some(gx), Some(ga), Some(gb), Some(gc), Some(gd)]
    }
}

/// Runs `orders.len()` directional scans and records their mean on the tape.
///
/// * `x`: `[batch * positions, D]`, rows grouped by sample.
/// * `a`: `[batch * positions, R * D]`, decay for direction `r` in columns
///   `r*D .. (r+1)*D`; values are used as given.
/// * `b`, `c`: `[R, N, D]`; `d`: `[R, D]`.
///
/// Every order must be a permutation of `0..positions`.
pub fn selective_scan<'t, T: Real>(
    x: Var<'t, T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    d: Var<'t, T>,
    batch: usize,
    orders: &[Vec<usize>],
) -> Result<Var<'t, T>> {
    let tape: &Tape<T> = x.tape();
    let rr = orders.len();
    let xd = x.dims();
    if xd.len() != 2 || rr == 0 || batch == 0 || xd[0] % batch != 0 {
        return Err(CoreError::input(format!(
            "scan input must be [batch*positions, D] with batch {batch} and at least one order, got {xd:?}"
        )));
    }
    let (positions, dd) = (xd[0] / batch, xd[1]);
    let bd = b.dims();
    if bd.len() != 3 || bd[0] != rr || bd[2] != dd || bd[1] == 0 {
        return Err(CoreError::input(format!("scan b must be [{rr}, N, {dd}], got {bd:?}")));
    }
    let nn = bd[1];
    if a.dims() != [xd[0], rr * dd] || c.dims() != bd || d.dims() != [rr, dd] {
        return Err(CoreError::input(format!(
            "scan shapes disagree: a {:?}, c {:?}, d {:?} for x {xd:?}, b {bd:?}",
            a.dims(),
            c.dims(),
            d.dims()
        )));
    }
    for order in orders {
        let mut seen = vec![false; positions];
        if order.len() != positions || !order.iter().all(|&p| p < positions && !std::mem::replace(&mut seen[p], true)) {
            return Err(CoreError::input(format!("scan order is not a permutation of 0..{positions}")));
        }
    }

    let mut op = ScanOp {
        batch,
        positions,
        channels: dd,
        state_dim: nn,
        orders: orders.to_vec(),
        states: vec![T::zero(); batch * rr * positions * nn * dd],
    };
    let mut y = vec![T::zero(); xd[0] * dd];
    {
        let (xv, av, bv, cv, dv) = (x.value(), a.value(), b.value(), c.value(), d.value());
        let (xs, asl, bs, cs, ds) = (xv.data(), av.data(), bv.data(), cv.data(), dv.data());
        let inv_r = T::lit(1.0 / rr as f64);
        let mut h = vec![T::zero(); nn * dd];
        let mut acc = vec![T::zero(); dd];
        for bi in 0..batch {
            for (r, order) in orders.iter().enumerate() {
                h.iter_mut().for_each(|v| *v = T::zero());
                for (step, &p) in order.iter().enumerate() {
                    let row = bi * positions + p;
                    let xr = &xs[row * dd..(row + 1) * dd];
                    let ar = &asl[row * rr * dd + r * dd..row * rr * dd + (r + 1) * dd];
                    for ch in 0..dd {
                        acc[ch] = ds[r * dd + ch] * xr[ch];
                    }
                    for n in 0..nn {
                        let pr = (r * nn + n) * dd;
                        let hn = &mut h[n * dd..(n + 1) * dd];
                        for ch in 0..dd {
                            hn[ch] = ar[ch] * hn[ch] + bs[pr + ch] * xr[ch];
                            acc[ch] += cs[pr + ch] * hn[ch];
                        }
                    }
                    let off = op.state_offset(bi, r, step);
                    op.states[off..off + nn * dd].copy_from_slice(&h);
                    for ch in 0..dd {
                        y[row * dd + ch] += acc[ch] * inv_r;
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[xd[0], dd], y)?;
    Ok(tape.custom(&[x, a, b, c, d], out, Box::new(op))?)
}
