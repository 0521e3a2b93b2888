//! Real-input spectral transforms and frequency-band bookkeeping.
//!
//! Transforms run along the position axis of a `(batch, n, d)` real array,
//! independently for every feature channel, under the unitary convention:
//! both directions scale by `1/sqrt(n)`, so `irfft(rfft(x)) == x` and
//! Parseval holds without extra factors. Only the `m = n/2 + 1` bins that
//! are not redundant under conjugate symmetry are kept.
//!
//! The `*_interleaved` functions work on plain `f64` buffers whose last
//! axis holds `(re, im)` pairs; the autodiff tape uses those directly.

mod fft;

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

pub use fft::FftPlan;

use crate::error::bail;
use crate::Result;

/// Number of non-redundant bins of a real sequence of length `n`.
pub const fn bin_count(n: usize) -> usize {
    n / 2 + 1
}

/// Real array of shape `(batch, n, d)` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct RealBatch {
    pub data: Vec<f64>,
    pub batch: usize,
    pub n: usize,
    pub d: usize,
}

impl RealBatch {
    pub fn new(data: Vec<f64>, batch: usize, n: usize, d: usize) -> Result<Self> {
        if data.len() != batch * n * d {
            bail!(Shape, "buffer of {} values cannot hold ({batch}, {n}, {d})", data.len());
        }
        Ok(Self { data, batch, n, d })
    }

    pub fn zeros(batch: usize, n: usize, d: usize) -> Self {
        Self { data: vec![0.0; batch * n * d], batch, n, d }
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> f64 {
        self.data[(b * self.n + i) * self.d + j]
    }
}

/// Half spectrum of a batch of real sequences: `data` has shape
/// `(batch, m, d)` with `m = n/2 + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub data: Vec<Complex64>,
    pub batch: usize,
    pub m: usize,
    pub d: usize,
    /// Length of the source sequence.
    pub n: usize,
}

impl Spectrum {
    pub fn zeros(batch: usize, n: usize, d: usize) -> Self {
        let m = bin_count(n);
        Self { data: vec![Complex64::new(0.0, 0.0); batch * m * d], batch, m, d, n }
    }

    pub fn from_bins(data: Vec<Complex64>, batch: usize, n: usize, d: usize) -> Result<Self> {
        let m = bin_count(n);
        if data.len() != batch * m * d {
            bail!(Shape, "spectrum buffer of {} bins does not match ({batch}, {m}, {d})", data.len());
        }
        Ok(Self { data, batch, m, d, n })
    }

    pub fn get(&self, b: usize, k: usize, j: usize) -> Complex64 {
        self.data[(b * self.m + k) * self.d + j]
    }

    /// Flattens to interleaved `(re, im)` pairs, shape `(batch, m, d, 2)`.
    pub fn to_interleaved(&self) -> Vec<f64> {
        self.data.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn from_interleaved(values: &[f64], batch: usize, n: usize, d: usize) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            bail!(Shape, "interleaved buffer has odd length {}", values.len());
        }
        let data = values.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        Self::from_bins(data, batch, n, d)
    }
}

/// Unitary real FFT along the position axis.
pub fn rfft(x: &RealBatch) -> Result<Spectrum> {
    if x.n == 0 {
        bail!(Shape, "rfft needs at least one position");
    }
    if let Some(bad) = x.data.iter().find(|v| !v.is_finite()) {
        bail!(Numeric, "rfft input contains non-finite value {bad}");
    }
    let mut out = vec![0.0; x.batch * bin_count(x.n) * x.d * 2];
    rfft_interleaved(&x.data, x.batch, x.n, x.d, &mut out);
    Spectrum::from_interleaved(&out, x.batch, x.n, x.d)
}

/// Unitary inverse of [`rfft`] for sequences of length `n`.
pub fn irfft(s: &Spectrum, n: usize) -> Result<RealBatch> {
    if n == 0 || s.m != bin_count(n) {
        bail!(Shape, "spectrum with {} bins cannot be inverted to length {n}", s.m);
    }
    let mut out = vec![0.0; s.batch * n * s.d];
    irfft_interleaved(&s.to_interleaved(), s.batch, n, s.d, &mut out);
    RealBatch::new(out, s.batch, n, s.d)
}

/// Forward transform of a `(batch, n, d)` buffer into interleaved bins
/// `(batch, m, d, 2)`. `out` must have the exact output length.
pub fn rfft_interleaved(x: &[f64], batch: usize, n: usize, d: usize, out: &mut [f64]) {
    let m = bin_count(n);
    debug_assert_eq!(x.len(), batch * n * d);
    debug_assert_eq!(out.len(), batch * m * d * 2);
    let plan = FftPlan::new(n);
    let scale = 1.0 / libm::sqrt(n as f64);
    let mut buf = vec![Complex64::new(0.0, 0.0); n * d];
    let mut scratch = Vec::with_capacity(n * d);
    for b in 0..batch {
        let xb = &x[b * n * d..(b + 1) * n * d];
        buf.iter_mut().zip(xb).for_each(|(c, &v)| *c = Complex64::new(v, 0.0));
        plan.forward_lanes(&mut buf, d, &mut scratch);
        let ob = &mut out[b * m * d * 2..(b + 1) * m * d * 2];
        for (o, c) in ob.chunks_exact_mut(2).zip(&buf[..m * d]) {
            o[0] = c.re * scale;
            o[1] = c.im * scale;
        }
    }
}

/// Inverse of [`rfft_interleaved`]. The full spectrum is rebuilt from the
/// half spectrum by conjugate symmetry, so imaginary parts of the DC bin
/// and (for even `n`) the Nyquist bin do not contribute.
pub fn irfft_interleaved(s: &[f64], batch: usize, n: usize, d: usize, out: &mut [f64]) {
    let m = bin_count(n);
    debug_assert_eq!(s.len(), batch * m * d * 2);
    debug_assert_eq!(out.len(), batch * n * d);
    let plan = FftPlan::new(n);
    let scale = 1.0 / libm::sqrt(n as f64);
    let mut buf = vec![Complex64::new(0.0, 0.0); n * d];
    let mut scratch = Vec::with_capacity(n * d);
    for b in 0..batch {
        let sb = &s[b * m * d * 2..(b + 1) * m * d * 2];
        // conjugate input so the forward plan computes the inverse
        for (c, v) in buf[..m * d].iter_mut().zip(sb.chunks_exact(2)) {
            *c = Complex64::new(v[0], -v[1]);
        }
        // mirror bins 1..; for even n the Nyquist bin (k = n/2) is its own mirror
        for k in 1..m {
            let mirror = n - k;
            if mirror >= m {
                let (lo, hi) = buf.split_at_mut(mirror * d);
                hi[..d].iter_mut().zip(&lo[k * d..(k + 1) * d]).for_each(|(h, l)| *h = l.conj());
            }
        }
        plan.forward_lanes(&mut buf, d, &mut scratch);
        let ob = &mut out[b * n * d..(b + 1) * n * d];
        // the real part is unchanged by the final conjugation
        ob.iter_mut().zip(&buf).for_each(|(o, c)| *o = c.re * scale);
    }
}

/// Contiguous partition of `m` bins into `K` bands with widths
/// `floor(t*m/K) - floor((t-1)*m/K)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandLayout {
    pub m: usize,
    pub starts: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl BandLayout {
    pub fn new(m: usize, k: usize) -> Result<Self> {
        if k < 1 || k > m {
            bail!(Config, "band count K={k} must lie in [1, m={m}]");
        }
        let bound = |t: usize| t * m / k;
        let starts = (0..k).map(bound).collect();
        let sizes = (1..=k).map(|t| bound(t) - bound(t - 1)).collect();
        Ok(Self { m, starts, sizes })
    }

    pub fn bands(&self) -> usize {
        self.sizes.len()
    }

    /// Bin range `[f_t, f_{t+1})` of the zero-based band `t`.
    pub fn range(&self, t: usize) -> core::ops::Range<usize> {
        self.starts[t]..self.starts[t] + self.sizes[t]
    }

    fn check_band(&self, t: usize) -> Result<()> {
        if t >= self.bands() {
            bail!(Index, "band {t} out of range for K={}", self.bands());
        }
        Ok(())
    }
}

/// Same as [`BandLayout::new`].
pub fn make_band_layout(m: usize, k: usize) -> Result<BandLayout> {
    BandLayout::new(m, k)
}

/// Complex block of shape `(batch, width, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub data: Vec<Complex64>,
    pub batch: usize,
    pub width: usize,
    pub d: usize,
}

/// Extracts band `t` (zero-based) of a spectrum.
pub fn slice_band(s: &Spectrum, layout: &BandLayout, t: usize) -> Result<Band> {
    layout.check_band(t)?;
    if layout.m != s.m {
        bail!(Shape, "layout covers {} bins but spectrum has {}", layout.m, s.m);
    }
    let range = layout.range(t);
    let width = range.len();
    let mut data = Vec::with_capacity(s.batch * width * s.d);
    for b in 0..s.batch {
        let base = b * s.m * s.d;
        data.extend_from_slice(&s.data[base + range.start * s.d..base + range.end * s.d]);
    }
    Ok(Band { data, batch: s.batch, width, d: s.d })
}

/// Places band `t` back into an otherwise zero spectrum of source length `n`.
pub fn zero_pad_band(band: &Band, layout: &BandLayout, t: usize, n: usize) -> Result<Spectrum> {
    layout.check_band(t)?;
    if band.width != layout.sizes[t] {
        bail!(Shape, "band {t} has width {} but layout expects {}", band.width, layout.sizes[t]);
    }
    if layout.m != bin_count(n) {
        bail!(Shape, "layout covers {} bins, length {n} needs {}", layout.m, bin_count(n));
    }
    let mut s = Spectrum::zeros(band.batch, n, band.d);
    let start = layout.starts[t];
    for b in 0..band.batch {
        let src = &band.data[b * band.width * band.d..(b + 1) * band.width * band.d];
        let dst = (b * s.m + start) * s.d;
        s.data[dst..dst + src.len()].copy_from_slice(src);
    }
    Ok(s)
}

/// Element-wise modulus, shape `(batch, m, d)`.
pub fn amplitude(s: &Spectrum) -> Vec<f64> {
    s.data.iter().map(|c| c.norm()).collect()
}
