//! Centered 2D discrete Fourier transforms over batched image tensors.
//!
//! Convention: unnormalized forward transform, 1/(H*W) on the inverse. After
//! the forward pass the spectrum is rotated so the zero-frequency bin sits at
//! (H/2, W/2); the inverse undoes the rotation first. Two implementations are
//! kept side by side: a direct O((H*W)^2) evaluation valid for any size, and
//! a radix-2 row/column FFT used when both dims are powers of two. The naive
//! path doubles as the correctness oracle for the fast path.

use rayon::prelude::*;

use crate::tensor::Tensor;
use crate::{LgspError, Result};

/// Complex-valued batched spectrum with an explicit "centered" flag.
#[derive(Debug, Clone)]
pub struct SpectrumTensor {
    shape: [usize; 4],
    re: Vec<f64>,
    im: Vec<f64>,
    centered: bool,
}

impl SpectrumTensor {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            re: vec![0.0; n],
            im: vec![0.0; n],
            centered: true,
        }
    }

    fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Multiplies every (batch, channel) plane by the same real H*W mask.
    pub fn mul_real_mask(&self, mask: &[f64]) -> Result<Self> {
        if mask.len() != self.plane_len() {
            return Err(LgspError::ShapeMismatch {
                expected: vec![self.plane_len()],
                got: vec![mask.len()],
            });
        }
        let mut out = self.clone();
        let planes = self.shape[0] * self.shape[1];
        let n = self.plane_len();
        for p in 0..planes {
            let base = p * n;
            for i in 0..n {
                out.re[base + i] *= mask[i];
                out.im[base + i] *= mask[i];
            }
        }
        Ok(out)
    }

    /// Largest violation of conjugate symmetry around the centered origin.
    ///
    /// For a spectrum of a real image, S[y][x] must equal the conjugate of
    /// the bin mirrored through the center, so this is ~0 up to rounding.
    pub fn conjugate_symmetry_residual(&self) -> f64 {
        let [b, c, h, w] = self.shape;
        let cy = h / 2;
        let cx = w / 2;
        let mut worst = 0.0f64;
        for p in 0..b * c {
            let base = p * h * w;
            for y in 0..h {
                for x in 0..w {
                    let ym = (2 * cy + h - y) % h;
                    let xm = (2 * cx + w - x) % w;
                    let i = base + y * w + x;
                    let j = base + ym * w + xm;
                    worst = worst.max((self.re[i] - self.re[j]).abs());
                    worst = worst.max((self.im[i] + self.im[j]).abs());
                }
            }
        }
        worst
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect()
    }
}

fn image_dims(x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => {
            if h < 2 || w < 2 {
                return Err(LgspError::InvalidArgument(format!(
                    "spatial dims must be >= 2, got {h}x{w}"
                )));
            }
            Ok([b, c, h, w])
        }
        _ => Err(LgspError::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            got: x.shape().to_vec(),
        }),
    }
}

fn is_pow2(n: usize) -> bool {
    n >= 2 && n & (n - 1) == 0
}

/// Forward centered transform; radix-2 when both dims are powers of two.
pub fn dft2_centered(x: &Tensor) -> Result<SpectrumTensor> {
    let [_, _, h, w] = image_dims(x)?;
    if is_pow2(h) && is_pow2(w) {
        dft2_centered_fast(x)
    } else {
        dft2_centered_naive(x)
    }
}

/// Inverse of [`dft2_centered`]; returns the real part and the largest
/// imaginary residue left after reconstruction.
pub fn idft2_centered(s: &SpectrumTensor) -> Result<(Tensor, f64)> {
    let [_, _, h, w] = s.shape;
    if is_pow2(h) && is_pow2(w) {
        idft2_centered_fast(s)
    } else {
        idft2_centered_naive(s)
    }
}

/// Direct double-sum evaluation of the forward transform.
pub fn dft2_centered_naive(x: &Tensor) -> Result<SpectrumTensor> {
    let shape = image_dims(x)?;
    let [b, c, h, w] = shape;
    let n = h * w;
    let tw_h = twiddles(h, -1.0);
    let tw_w = twiddles(w, -1.0);

    let planes: Vec<(Vec<f64>, Vec<f64>)> = (0..b * c)
        .into_par_iter()
        .map(|p| {
            let src = &x.data()[p * n..(p + 1) * n];
            let mut re = vec![0.0; n];
            let mut im = vec![0.0; n];
            for u in 0..h {
                for v in 0..w {
                    let mut sr = 0.0;
                    let mut si = 0.0;
                    for y in 0..h {
                        let (hr, hi) = tw_h[(u * y) % h];
                        for xx in 0..w {
                            let (wr, wi) = tw_w[(v * xx) % w];
                            // (hr + i hi)(wr + i wi) times the real sample
                            let tr = hr * wr - hi * wi;
                            let ti = hr * wi + hi * wr;
                            let s = src[y * w + xx];
                            sr += s * tr;
                            si += s * ti;
                        }
                    }
                    re[u * w + v] = sr;
                    im[u * w + v] = si;
                }
            }
            shift_plane(&re, &im, h, w, true)
        })
        .collect();

    Ok(collect_planes(planes, shape))
}

/// Direct double-sum inverse transform.
pub fn idft2_centered_naive(s: &SpectrumTensor) -> Result<(Tensor, f64)> {
    require_centered(s)?;
    let [b, c, h, w] = s.shape;
    let n = h * w;
    let tw_h = twiddles(h, 1.0);
    let tw_w = twiddles(w, 1.0);
    let norm = 1.0 / n as f64;

    let planes: Vec<(Vec<f64>, f64)> = (0..b * c)
        .into_par_iter()
        .map(|p| {
            let (sre, sim) =
                shift_plane(&s.re[p * n..(p + 1) * n], &s.im[p * n..(p + 1) * n], h, w, false);
            let mut out = vec![0.0; n];
            let mut residue = 0.0f64;
            for y in 0..h {
                for xx in 0..w {
                    let mut sr = 0.0;
                    let mut si = 0.0;
                    for u in 0..h {
                        let (hr, hi) = tw_h[(u * y) % h];
                        for v in 0..w {
                            let (wr, wi) = tw_w[(v * xx) % w];
                            let tr = hr * wr - hi * wi;
                            let ti = hr * wi + hi * wr;
                            let (ar, ai) = (sre[u * w + v], sim[u * w + v]);
                            sr += ar * tr - ai * ti;
                            si += ar * ti + ai * tr;
                        }
                    }
                    out[y * w + xx] = sr * norm;
                    residue = residue.max((si * norm).abs());
                }
            }
            (out, residue)
        })
        .collect();

    finish_inverse(planes, s.shape)
}

/// Row/column radix-2 FFT path.
pub fn dft2_centered_fast(x: &Tensor) -> Result<SpectrumTensor> {
    let shape = image_dims(x)?;
    let [b, c, h, w] = shape;
    if !is_pow2(h) || !is_pow2(w) {
        return Err(LgspError::InvalidArgument(format!(
            "fast path needs power-of-two dims, got {h}x{w}"
        )));
    }
    let n = h * w;
    let planes: Vec<(Vec<f64>, Vec<f64>)> = (0..b * c)
        .into_par_iter()
        .map(|p| {
            let src = &x.data()[p * n..(p + 1) * n];
            let mut re = src.to_vec();
            let mut im = vec![0.0; n];
            fft2_inplace(&mut re, &mut im, h, w, -1.0);
            shift_plane(&re, &im, h, w, true)
        })
        .collect();
    Ok(collect_planes(planes, shape))
}

/// Radix-2 inverse path.
pub fn idft2_centered_fast(s: &SpectrumTensor) -> Result<(Tensor, f64)> {
    require_centered(s)?;
    let [b, c, h, w] = s.shape;
    if !is_pow2(h) || !is_pow2(w) {
        return Err(LgspError::InvalidArgument(format!(
            "fast path needs power-of-two dims, got {h}x{w}"
        )));
    }
    let n = h * w;
    let norm = 1.0 / n as f64;
    let planes: Vec<(Vec<f64>, f64)> = (0..b * c)
        .into_par_iter()
        .map(|p| {
            let (mut re, mut im) =
                shift_plane(&s.re[p * n..(p + 1) * n], &s.im[p * n..(p + 1) * n], h, w, false);
            fft2_inplace(&mut re, &mut im, h, w, 1.0);
            let mut residue = 0.0f64;
            let mut out = vec![0.0; n];
            for i in 0..n {
                out[i] = re[i] * norm;
                residue = residue.max((im[i] * norm).abs());
            }
            (out, residue)
        })
        .collect();
    finish_inverse(planes, s.shape)
}

fn require_centered(s: &SpectrumTensor) -> Result<()> {
    if !s.centered {
        return Err(LgspError::InvalidArgument(
            "inverse transform expects a centered spectrum".into(),
        ));
    }
    Ok(())
}

/// exp(sign * 2*pi*i * j / n) for j in 0..n, as (re, im).
fn twiddles(n: usize, sign: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|j| {
            let a = sign * std::f64::consts::TAU * j as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect()
}

/// Half-period rotation of a plane. `forward` moves bin (0,0) to the center;
/// otherwise the rotation is undone.
fn shift_plane(re: &[f64], im: &[f64], h: usize, w: usize, forward: bool) -> (Vec<f64>, Vec<f64>) {
    let mut ore = vec![0.0; h * w];
    let mut oim = vec![0.0; h * w];
    let (dy, dx) = if forward {
        (h / 2, w / 2)
    } else {
        (h - h / 2, w - w / 2)
    };
    for y in 0..h {
        let ty = (y + dy) % h;
        for x in 0..w {
            let tx = (x + dx) % w;
            ore[ty * w + tx] = re[y * w + x];
            oim[ty * w + tx] = im[y * w + x];
        }
    }
    (ore, oim)
}

/// In-place 2D FFT: radix-2 over every row, then every column.
fn fft2_inplace(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: f64) {
    for y in 0..h {
        fft1_inplace(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w], sign);
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col_re[y] = re[y * w + x];
            col_im[y] = im[y * w + x];
        }
        fft1_inplace(&mut col_re, &mut col_im, sign);
        for y in 0..h {
            re[y * w + x] = col_re[y];
            im[y * w + x] = col_im[y];
        }
    }
}

/// Iterative Cooley-Tukey with bit-reversal permutation; length must be a
/// power of two. `sign = -1` forward, `+1` inverse (unnormalized).
fn fft1_inplace(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    debug_assert!(is_pow2(n) || n == 1);
    if n <= 1 {
        return;
    }
    // bit reversal
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut cr = 1.0;
            let mut ci = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = start + k + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }
}

fn collect_planes(planes: Vec<(Vec<f64>, Vec<f64>)>, shape: [usize; 4]) -> SpectrumTensor {
    let n = shape[2] * shape[3];
    let mut re = Vec::with_capacity(planes.len() * n);
    let mut im = Vec::with_capacity(planes.len() * n);
    for (r, i) in planes {
        re.extend_from_slice(&r);
        im.extend_from_slice(&i);
    }
    SpectrumTensor {
        shape,
        re,
        im,
        centered: true,
    }
}

fn finish_inverse(planes: Vec<(Vec<f64>, f64)>, shape: [usize; 4]) -> Result<(Tensor, f64)> {
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut residue = 0.0f64;
    for (plane, r) in planes {
        data.extend_from_slice(&plane);
        residue = residue.max(r);
    }
    Ok((Tensor::new(shape.to_vec(), data)?, residue))
}
