//! Index mapping between a tensor and a broadcast (or reduced) view of it.

use crate::real::Real;
use crate::tensor::{numel, strides};

/// How the elements of a full tensor of dims `out` map onto a tensor of
/// dims `src` that is broadcast-compatible with it.
///
/// Most broadcasts in practice expand one contiguous run of axes (a bias
/// over rows, a per-row statistic over columns, a per-sample vector over
/// positions). Those take the `Block` path, which walks the data in three
/// nested loops; anything else falls back to a precomputed offset table.
#[derive(Debug)]
pub(crate) enum Layout {
    Same,
    /// `src[o * inner + k]` is repeated `mid` times between `o` and `k`.
    Block { outer: usize, mid: usize, inner: usize },
    General(Vec<usize>),
}

impl Layout {
    pub(crate) fn new(out: &[usize], src: &[usize]) -> Layout {
        debug_assert!(src.len() <= out.len());
        let rank = out.len();
        let pad = rank - src.len();
        let s = |ax: usize| if ax < pad { 1 } else { src[ax - pad] };
        let expanded: Vec<bool> = (0..rank).map(|ax| s(ax) == 1 && out[ax] != 1).collect();
        let Some(lo) = expanded.iter().position(|&e| e) else {
            return Layout::Same;
        };
        let hi = expanded.iter().rposition(|&e| e).unwrap() + 1;
        if (lo..hi).all(|ax| s(ax) == 1) {
            return Layout::Block {
                outer: numel(&out[..lo]),
                mid: numel(&out[lo..hi]),
                inner: numel(&out[hi..]),
            };
        }
        Layout::General(broadcast_offsets(out, src))
    }

    /// Calls `f(i, j)` for every element `i` of the full tensor with the
    /// matching element `j` of the source, in increasing `i`.
    #[inline]
    pub(crate) fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Layout::Same => (0..n).for_each(|i| f(i, i)),
            Layout::Block { outer, mid, inner } => {
                let mut i = 0;
                for o in 0..*outer {
                    let base = o * inner;
                    for _ in 0..*mid {
                        for k in 0..*inner {
                            f(i, base + k);
                            i += 1;
                        }
                    }
                }
            }
            Layout::General(offs) => offs.iter().enumerate().for_each(|(i, &j)| f(i, j)),
        }
    }
}

/// Flat source offset for every element of `out` when `src` is broadcast
/// to it.
pub(crate) fn broadcast_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = numel(out);
    let rank = out.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let j = rank - src.len() + i;
        if src[i] != 1 {
            eff[j] = src_strides[i];
        }
    }
    let mut offsets = Vec::with_capacity(n);
    if n == 0 {
        return offsets;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Sums `g` (dims `out`) down to dims `src`.
pub(crate) fn sum_to<T: Real>(g: &[T], out: &[usize], src: &[usize]) -> Vec<T> {
    let layout = Layout::new(out, src);
    if let Layout::Same = layout {
        return g.to_vec();
    }
    let mut acc = vec![T::zero(); numel(src)];
    layout.for_each(g.len(), |i, j| acc[j] += g[i]);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collect(out: &[usize], src: &[usize]) -> Vec<usize> {
        let l = Layout::new(out, src);
        let mut v = vec![usize::MAX; numel(out)];
        l.for_each(numel(out), |i, j| v[i] = j);
        v
    }

    #[test]
    fn block_paths_agree_with_offset_table() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[2, 3], &[2, 3]),
            (&[2, 3], &[3]),
            (&[2, 3], &[1, 3]),
            (&[2, 3], &[2, 1]),
            (&[4, 5, 3], &[4, 1, 3]),
            (&[4, 5, 3], &[5, 1]),
            (&[4, 5, 3], &[]),
            (&[2, 1, 3], &[1, 1, 3]),
            (&[2, 4, 3], &[1, 4, 1]),
        ];
        for (out, src) in cases {
            assert_eq!(collect(out, src), broadcast_offsets(out, src), "{out:?} <- {src:?}");
        }
    }

    #[test]
    fn sum_to_folds_broadcast_axes() {
        let g: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(sum_to(&g, &[2, 3], &[1, 3]), vec![3.0, 5.0, 7.0]);
        assert_eq!(sum_to(&g, &[2, 3], &[2, 1]), vec![3.0, 12.0]);
        assert_eq!(sum_to(&g, &[2, 3], &[]), vec![15.0]);
    }

    #[test]
    fn non_contiguous_falls_back() {
        assert!(matches!(Layout::new(&[2, 3, 4], &[3, 1]), Layout::General(_)));
        assert!(matches!(Layout::new(&[2, 3, 4], &[1, 3, 1]), Layout::General(_)));
    }
}
