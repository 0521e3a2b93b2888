//! Complex FFT of arbitrary length.
//!
//! Lengths whose prime factors are all at most [`MAX_DIRECT_RADIX`] use a
//! recursive decimation-in-time mixed-radix transform with a generic
//! radix-p butterfly. Anything else goes through Bluestein's chirp-z
//! algorithm on a power-of-two convolution.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

/// Largest prime radix handled by the direct butterfly.
pub const MAX_DIRECT_RADIX: usize = 13;

/// Forward (`e^{-2πi jk/n}`) unnormalized transform plan for one length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    kind: Kind,
}

#[derive(Clone, Debug)]
enum Kind {
    MixedRadix { factors: Vec<usize>, twiddles: Vec<Complex64> },
    Bluestein(Box<Bluestein>),
}

#[derive(Clone, Debug)]
struct Bluestein {
    chirp: Vec<Complex64>,
    kernel_spectrum: Vec<Complex64>,
    inner: FftPlan,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "FFT length must be positive");
        match factorize(n) {
            Some(factors) => {
                let twiddles = (0..n).map(|k| root(k, n)).collect();
                Self { n, kind: Kind::MixedRadix { factors, twiddles } }
            }
            None => Self { n, kind: Kind::Bluestein(Box::new(Bluestein::new(n))) },
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform. `scratch` is resized as needed.
    pub fn forward(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        assert_eq!(data.len(), self.n);
        match &self.kind {
            Kind::MixedRadix { factors, twiddles } => {
                scratch.clear();
                scratch.extend_from_slice(data);
                let mut butterfly = Vec::with_capacity(*factors.iter().max().unwrap_or(&1));
                work(data, scratch, 1, factors, twiddles, self.n, &mut butterfly);
            }
            Kind::Bluestein(b) => b.run(data),
        }
    }

    /// Transforms `lanes` independent signals at once. `data` holds `n`
    /// rows of `lanes` values each, so signal `j` is the column
    /// `data[j], data[lanes + j], ...`.
    pub fn forward_lanes(&self, data: &mut [Complex64], lanes: usize, scratch: &mut Vec<Complex64>) {
        assert_eq!(data.len(), self.n * lanes);
        match &self.kind {
            Kind::MixedRadix { factors, twiddles } => {
                scratch.clear();
                scratch.extend_from_slice(data);
                let mut butterfly = vec![Complex64::new(0.0, 0.0); factors.iter().max().unwrap_or(&1) * lanes];
                work_lanes(data, scratch, 1, factors, twiddles, self.n, lanes, &mut butterfly);
            }
            Kind::Bluestein(b) => {
                let mut col = vec![Complex64::new(0.0, 0.0); self.n];
                for j in 0..lanes {
                    col.iter_mut().enumerate().for_each(|(t, c)| *c = data[t * lanes + j]);
                    b.run(&mut col);
                    col.iter().enumerate().for_each(|(t, c)| data[t * lanes + j] = *c);
                }
            }
        }
    }

    /// In-place inverse transform without the 1/n factor.
    pub fn inverse(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        for v in data.iter_mut() {
            *v = v.conj();
        }
        self.forward(data, scratch);
        for v in data.iter_mut() {
            *v = v.conj();
        }
    }
}

fn root(k: usize, n: usize) -> Complex64 {
    let angle = -2.0 * PI * (k as f64) / (n as f64);
    Complex64::new(libm::cos(angle), libm::sin(angle))
}

/// Radix sequence for the direct path, or `None` when a prime factor is
/// too large.
fn factorize(mut n: usize) -> Option<Vec<usize>> {
    let mut factors = Vec::new();
    for p in [4usize, 2, 3, 5, 7, 11, 13] {
        debug_assert!(p <= MAX_DIRECT_RADIX);
        while n.is_multiple_of(p) {
            factors.push(p);
            n /= p;
        }
    }
    if n == 1 {
        if factors.is_empty() {
            factors.push(1);
        }
        Some(factors)
    } else {
        None
    }
}

/// Decimation-in-time step: `out` receives the transform of the
/// subsequence `input[0], input[stride], ...` of length `out.len()`.
fn work(
    out: &mut [Complex64],
    input: &[Complex64],
    stride: usize,
    factors: &[usize],
    twiddles: &[Complex64],
    n_total: usize,
    butterfly: &mut Vec<Complex64>,
) {
    let p = factors[0];
    let m = out.len() / p;
    if m == 1 {
        for (k, o) in out.iter_mut().enumerate() {
            *o = input[k * stride];
        }
    } else {
        for q in 0..p {
            work(
                &mut out[q * m..(q + 1) * m],
                &input[q * stride..],
                stride * p,
                &factors[1..],
                twiddles,
                n_total,
                butterfly,
            );
        }
    }
    if p == 1 {
        return;
    }
    // generic radix-p butterfly over the p interleaved sub-transforms
    for u in 0..m {
        butterfly.clear();
        butterfly.extend((0..p).map(|q| out[u + q * m]));
        for q1 in 0..p {
            let k = u + q1 * m;
            let mut acc = butterfly[0];
            let step = (stride * k) % n_total;
            let mut tw = 0usize;
            for b in &butterfly[1..] {
                tw += step;
                if tw >= n_total {
                    tw -= n_total;
                }
                acc += b * twiddles[tw];
            }
            out[k] = acc;
        }
    }
}

/// [`work`] over rows of `lanes` values.
#[allow(clippy::too_many_arguments)]
fn work_lanes(
    out: &mut [Complex64],
    input: &[Complex64],
    stride: usize,
    factors: &[usize],
    twiddles: &[Complex64],
    n_total: usize,
    lanes: usize,
    butterfly: &mut [Complex64],
) {
    let p = factors[0];
    let m = out.len() / (p * lanes);
    if m == 1 {
        for k in 0..p {
            let src = k * stride * lanes;
            out[k * lanes..(k + 1) * lanes].copy_from_slice(&input[src..src + lanes]);
        }
    } else {
        for q in 0..p {
            work_lanes(
                &mut out[q * m * lanes..(q + 1) * m * lanes],
                &input[q * stride * lanes..],
                stride * p,
                &factors[1..],
                twiddles,
                n_total,
                lanes,
                butterfly,
            );
        }
    }
    if p == 1 {
        return;
    }
    let bf = &mut butterfly[..p * lanes];
    for u in 0..m {
        for q in 0..p {
            let src = (u + q * m) * lanes;
            bf[q * lanes..(q + 1) * lanes].copy_from_slice(&out[src..src + lanes]);
        }
        for q1 in 0..p {
            let k = u + q1 * m;
            let step = (stride * k) % n_total;
            let row = &mut out[k * lanes..(k + 1) * lanes];
            row.copy_from_slice(&bf[..lanes]);
            let mut tw = 0usize;
            for q in 1..p {
                tw += step;
                if tw >= n_total {
                    tw -= n_total;
                }
                let w = twiddles[tw];
                for (o, b) in row.iter_mut().zip(&bf[q * lanes..(q + 1) * lanes]) {
                    o.re += b.re * w.re - b.im * w.im;
                    o.im += b.re * w.im + b.im * w.re;
                }
            }
        }
    }
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let conv = (2 * n - 1).next_power_of_two();
        let inner = FftPlan::new(conv);
        let modulus = 2 * n as u128;
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = ((k as u128) * (k as u128)) % modulus;
                let angle = -PI * (k2 as f64) / (n as f64);
                Complex64::new(libm::cos(angle), libm::sin(angle))
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); conv];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[conv - k] = chirp[k].conj();
        }
        let mut scratch = Vec::new();
        inner.forward(&mut kernel, &mut scratch);
        Self { chirp, kernel_spectrum: kernel, inner }
    }

    fn run(&self, data: &mut [Complex64]) {
        let n = data.len();
        let conv = self.kernel_spectrum.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); conv];
        for k in 0..n {
            buf[k] = data[k] * self.chirp[k];
        }
        let mut scratch = Vec::new();
        self.inner.forward(&mut buf, &mut scratch);
        for (b, k) in buf.iter_mut().zip(&self.kernel_spectrum) {
            *b *= k;
        }
        self.inner.inverse(&mut buf, &mut scratch);
        let scale = 1.0 / conv as f64;
        for k in 0..n {
            data[k] = buf[k] * self.chirp[k] * scale;
        }
    }
}
