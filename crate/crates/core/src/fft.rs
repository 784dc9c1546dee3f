//! Multidimensional FFT convolutions on cubic boxes.
//!
//! [`PaddedConv`] applies a linear (Toeplitz) convolution with an even
//! kernel by zero padding an `s^d` box to `(2s)^d`. Lines that are known to
//! be zero on the way in, or unneeded on the way out, are skipped.
//! [`PeriodicConv`] is the circular counterpart on the `s^d` box itself.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::num_traits::{Float, Zero};
use rustfft::{Fft, FftNum, FftPlanner};

/// Flat offsets of every multi-index with `idx[a] < extents[a]`, given the
/// strides of the full array.
fn active_offsets(extents: &[usize], strides: &[usize]) -> Vec<usize> {
    let total: usize = extents.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; extents.len()];
    loop {
        out.push(idx.iter().zip(strides).map(|(i, s)| i * s).sum());
        let mut a = extents.len();
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < extents[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Transforms every line along `axis` whose other coordinates lie inside
/// `extents`. The array is `edge^dim`, C order.
fn fft_axis<T: FftNum>(
    buf: &mut [Complex<T>],
    dim: usize,
    edge: usize,
    axis: usize,
    extents: &[usize],
    fft: &dyn Fft<T>,
    scratch: &mut Vec<Complex<T>>,
) {
    let inner_stride = edge.pow((dim - 1 - axis) as u32);
    let outer_strides: Vec<usize> = (0..axis).map(|a| edge.pow((dim - 1 - a) as u32)).collect();
    let inner_strides: Vec<usize> = (axis + 1..dim).map(|a| edge.pow((dim - 1 - a) as u32)).collect();
    let outer = active_offsets(&extents[..axis], &outer_strides);
    let inner = active_offsets(&extents[axis + 1..], &inner_strides);
    let lines = inner.len();
    scratch.resize(lines * edge, Complex::zero());
    let mut fft_scratch = vec![Complex::zero(); fft.get_inplace_scratch_len()];
    for &o in &outer {
        if inner_stride == 1 {
            // last axis: lines are contiguous
            let line = &mut buf[o..o + edge];
            fft.process_with_scratch(line, &mut fft_scratch);
            continue;
        }
        for (li, &i) in inner.iter().enumerate() {
            let base = o + i;
            let dst = &mut scratch[li * edge..(li + 1) * edge];
            for (a, d) in dst.iter_mut().enumerate() {
                *d = buf[base + a * inner_stride];
            }
        }
        fft.process_with_scratch(&mut scratch[..lines * edge], &mut fft_scratch);
        for (li, &i) in inner.iter().enumerate() {
            let base = o + i;
            let src = &scratch[li * edge..(li + 1) * edge];
            for (a, s) in src.iter().enumerate() {
                buf[base + a * inner_stride] = *s;
            }
        }
    }
}

fn plan<T: FftNum>(edge: usize) -> (Arc<dyn Fft<T>>, Arc<dyn Fft<T>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(edge), planner.plan_fft_inverse(edge))
}

/// Linear convolution of `s^d` arrays with a fixed even kernel given on
/// offsets `-(s-1)..=(s-1)` per axis.
pub struct PaddedConv<T: FftNum> {
    dim: usize,
    s: usize,
    spectrum: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: FftNum + Float> PaddedConv<T> {
    /// `kernel` has `(2s-1)^dim` entries, offset `m` stored at index
    /// `m + s - 1` along each axis. It must satisfy `f(-m) = f(m)`, so its
    /// spectrum is real.
    pub fn new(dim: usize, s: usize, kernel: &[T]) -> Self {
        let k = 2 * s - 1;
        let l = 2 * s;
        assert_eq!(kernel.len(), k.pow(dim as u32), "kernel size");
        let (fwd, inv) = plan::<T>(l);
        let mut buf = vec![Complex::<T>::zero(); l.pow(dim as u32)];
        let mut idx = vec![0usize; dim];
        for &v in kernel {
            let mut flat = 0;
            for &i in &idx {
                // offset m = i - (s-1), stored at m mod 2s
                let m = i as isize - (s as isize - 1);
                flat = flat * l + m.rem_euclid(l as isize) as usize;
            }
            buf[flat] = Complex::new(v, T::zero());
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < k {
                    break;
                }
                idx[a] = 0;
            }
        }
        let mut scratch = Vec::new();
        let full = vec![l; dim];
        for axis in 0..dim {
            fft_axis(&mut buf, dim, l, axis, &full, fwd.as_ref(), &mut scratch);
        }
        let spectrum = buf.into_iter().map(|c| c.re).collect();
        Self {
            dim,
            s,
            spectrum,
            fwd,
            inv,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn edge(&self) -> usize {
        self.s
    }

    /// Real spectrum on the padded `(2s)^dim` grid.
    pub fn spectrum(&self) -> &[T] {
        &self.spectrum
    }

    /// `out(i) = Σ_j f(i - j) x(j)` for `i, j` in the `s^dim` box.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let (d, s, l) = (self.dim, self.s, 2 * self.s);
        assert_eq!(x.len(), s.pow(d as u32), "input size");
        let mut buf = vec![Complex::<T>::zero(); l.pow(d as u32)];
        // scatter the s-box into the corner of the padded box
        let rows = s.pow(d as u32 - 1);
        let strides: Vec<usize> = (0..d - 1).map(|a| l.pow((d - 1 - a) as u32)).collect();
        let dst_rows = active_offsets(&vec![s; d - 1], &strides);
        debug_assert_eq!(dst_rows.len(), rows);
        for (r, &off) in dst_rows.iter().enumerate() {
            for (c, &v) in x[r * s..(r + 1) * s].iter().enumerate() {
                buf[off + c] = Complex::new(v, T::zero());
            }
        }
        let mut scratch = Vec::new();
        let mut ext = vec![0usize; d];
        for axis in 0..d {
            for (a, e) in ext.iter_mut().enumerate() {
                *e = if a < axis { l } else { s };
            }
            fft_axis(&mut buf, d, l, axis, &ext, self.fwd.as_ref(), &mut scratch);
        }
        for (b, &g) in buf.iter_mut().zip(&self.spectrum) {
            *b = *b * g;
        }
        for axis in 0..d {
            for (a, e) in ext.iter_mut().enumerate() {
                *e = if a < axis { s } else { l };
            }
            fft_axis(&mut buf, d, l, axis, &ext, self.inv.as_ref(), &mut scratch);
        }
        let norm = T::one() / T::from(l.pow(d as u32)).unwrap();
        let mut out = Vec::with_capacity(x.len());
        for &off in &dst_rows {
            out.extend(buf[off..off + s].iter().map(|c| c.re * norm));
        }
        out
    }
}

/// Circular convolution on the periodic `s^dim` box with an even kernel.
pub struct PeriodicConv<T: FftNum> {
    dim: usize,
    s: usize,
    spectrum: Vec<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: FftNum + Float> PeriodicConv<T> {
    /// `kernel` is given on the `s^dim` box, index `i mod s` per axis.
    pub fn new(dim: usize, s: usize, kernel: &[T]) -> Self {
        assert_eq!(kernel.len(), s.pow(dim as u32), "kernel size");
        let (fwd, inv) = plan::<T>(s);
        let mut buf: Vec<Complex<T>> = kernel.iter().map(|&v| Complex::new(v, T::zero())).collect();
        let mut scratch = Vec::new();
        let full = vec![s; dim];
        for axis in 0..dim {
            fft_axis(&mut buf, dim, s, axis, &full, fwd.as_ref(), &mut scratch);
        }
        Self {
            dim,
            s,
            spectrum: buf.into_iter().map(|c| c.re).collect(),
            fwd,
            inv,
        }
    }

    pub fn spectrum(&self) -> &[T] {
        &self.spectrum
    }

    fn filter(&self, x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
        let (d, s) = (self.dim, self.s);
        assert_eq!(x.len(), s.pow(d as u32), "input size");
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        let mut scratch = Vec::new();
        let full = vec![s; d];
        for axis in 0..d {
            fft_axis(&mut buf, d, s, axis, &full, self.fwd.as_ref(), &mut scratch);
        }
        for (b, &g) in buf.iter_mut().zip(&self.spectrum) {
            *b = *b * f(g);
        }
        for axis in 0..d {
            fft_axis(&mut buf, d, s, axis, &full, self.inv.as_ref(), &mut scratch);
        }
        let norm = T::one() / T::from(buf.len()).unwrap();
        buf.into_iter().map(|c| c.re * norm).collect()
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        self.filter(x, |g| g)
    }

    /// Spectral division; the caller guarantees a nonzero spectrum.
    pub fn apply_inverse(&self, x: &[T]) -> Vec<T> {
        self.filter(x, |g| T::one() / g)
    }
}
