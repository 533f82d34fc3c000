//! Arithmetic in `GF(2^l)` on `N` little-endian 64-bit limbs, `l ≤ 64·N ≤ 512`.
//!
//! Carry-less products use PCLMULQDQ when the CPU has it and a 4-bit windowed
//! software multiply otherwise. Both paths are monomorphized from the same
//! generic code, so they agree bit for bit.

use super::moduli::Modulus;

/// Width of the scratch buffer holding an unreduced product, plus one zero
/// word so reads just past the top stay in bounds.
const WIDE: usize = 17;

pub(crate) trait Clmul {
    /// An unreduced 128-bit product.
    type V: Copy;
    fn zero() -> Self::V;
    fn clmul(a: u64, b: u64) -> Self::V;
    fn xor(x: Self::V, y: Self::V) -> Self::V;
    /// `(low, high)` words.
    fn split(v: Self::V) -> (u64, u64);

    /// Unreduced product of two `N`-limb polynomials.
    #[inline(always)]
    fn mul_wide<const N: usize>(a: &[u64; N], b: &[u64; N]) -> [u64; WIDE] {
        let mut acc = [Self::zero(); WIDE];
        for i in 0..N {
            for j in 0..N {
                acc[i + j] = Self::xor(acc[i + j], Self::clmul(a[i], b[j]));
            }
        }
        let mut out = [0u64; WIDE];
        for k in 0..2 * N - 1 {
            let (lo, hi) = Self::split(acc[k]);
            out[k] ^= lo;
            out[k + 1] ^= hi;
        }
        out
    }
}

pub(crate) struct Soft;

impl Clmul for Soft {
    type V = u128;

    #[inline(always)]
    fn zero() -> u128 {
        0
    }

    #[inline(always)]
    fn clmul(a: u64, b: u64) -> u128 {
        let mut table = [0u128; 16];
        let a = a as u128;
        for i in 1..16 {
            table[i] = if i & 1 == 1 {
                table[i - 1] ^ a
            } else {
                table[i / 2] << 1
            };
        }
        let mut r = 0u128;
        for nib in (0..16).rev() {
            r = (r << 4) ^ table[((b >> (4 * nib)) & 0xF) as usize];
        }
        r
    }

    #[inline(always)]
    fn xor(x: u128, y: u128) -> u128 {
        x ^ y
    }

    #[inline(always)]
    fn split(v: u128) -> (u64, u64) {
        (v as u64, (v >> 64) as u64)
    }
}

#[cfg(target_arch = "x86_64")]
pub(crate) struct Hw;

// SAFETY (all methods): only reachable from functions compiled with
// `pclmulqdq` and `sse4.1` enabled, entered after runtime detection.
#[cfg(target_arch = "x86_64")]
impl Clmul for Hw {
    type V = std::arch::x86_64::__m128i;

    #[inline(always)]
    fn zero() -> Self::V {
        unsafe { std::arch::x86_64::_mm_setzero_si128() }
    }

    #[inline(always)]
    fn clmul(a: u64, b: u64) -> Self::V {
        use std::arch::x86_64::*;
        unsafe { _mm_clmulepi64_si128(_mm_cvtsi64_si128(a as i64), _mm_cvtsi64_si128(b as i64), 0) }
    }

    #[inline(always)]
    fn xor(x: Self::V, y: Self::V) -> Self::V {
        unsafe { std::arch::x86_64::_mm_xor_si128(x, y) }
    }

    #[inline(always)]
    fn split(v: Self::V) -> (u64, u64) {
        use std::arch::x86_64::*;
        unsafe { (_mm_cvtsi128_si64(v) as u64, _mm_extract_epi64(v, 1) as u64) }
    }
}

/// Which carry-less multiply to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// PCLMULQDQ when available, software otherwise.
    Auto,
    Software,
}

pub(crate) fn hardware_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("pclmulqdq") && std::is_x86_feature_detected!("sse4.1")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `dst ^= src << shift` over the first `top` words of `dst`.
#[inline(always)]
fn xor_shifted(dst: &mut [u64; WIDE], src: &[u64; WIDE], src_len: usize, shift: u32, top: usize) {
    let (q, r) = ((shift / 64) as usize, shift % 64);
    for i in 0..src_len {
        let w = src[i];
        if w == 0 {
            continue;
        }
        if i + q < top {
            dst[i + q] ^= w << r;
        }
        if r != 0 && i + q + 1 < top {
            dst[i + q + 1] ^= w >> (64 - r);
        }
    }
}

/// Reduces a product of two field elements modulo `m`, one shift-and-xor
/// pass per round until nothing is left above `x^l`.
#[inline(never)]
fn reduce_generic<const N: usize>(p: &mut [u64; WIDE], m: &Modulus) -> [u64; N] {
    let l = m.degree as usize;
    let top = 2 * N;
    let (wq, wr) = (l / 64, (l % 64) as u32);
    loop {
        // h = p >> l
        let mut h = [0u64; WIDE];
        let hl = top - wq;
        let mut any = 0;
        for i in 0..hl {
            let lo = p[i + wq] >> wr;
            let hi = if wr != 0 && i + wq + 1 < top {
                p[i + wq + 1] << (64 - wr)
            } else {
                0
            };
            h[i] = lo | hi;
            any |= h[i];
        }
        if any == 0 {
            break;
        }
        if wr == 0 {
            p[wq..top].fill(0);
        } else {
            p[wq] &= (1u64 << wr) - 1;
            p[wq + 1..top].fill(0);
        }
        // x^l ≡ Σ x^tap
        for &t in m.taps() {
            xor_shifted(p, &h, hl, t, top);
        }
    }
    let mut out = [0u64; N];
    out.copy_from_slice(&p[..N]);
    out
}

/// Bits `l..l+64` of `p`, i.e. one word of `p >> l`.
#[inline(always)]
fn word_above(p: &[u64], wq: usize, wr: u32, i: usize) -> u64 {
    (p[i + wq] >> wr) | ((p[i + wq + 1] << 1) << (63 - wr))
}

/// Precomputed reduction modulo a fixed modulus.
#[derive(Clone, Copy)]
struct Reducer<'a> {
    m: &'a Modulus,
    wr: u32,
    low_mask: u64,
    /// `Σ x^tap` as one word.
    g: u64,
    /// All taps are below 64 and below `l/2`, so two passes always suffice.
    fast: bool,
}

impl<'a> Reducer<'a> {
    fn new(m: &'a Modulus) -> Self {
        let l = m.degree;
        let t = m.taps()[0];
        Self {
            m,
            wr: l % 64,
            low_mask: if l % 64 == 0 { 0 } else { (1u64 << (l % 64)) - 1 },
            g: if t < 64 {
                m.taps().iter().fold(0, |g, &t| g | 1 << t)
            } else {
                0
            },
            fast: t < 64 && 2 * t < l,
        }
    }

    /// Which of the reductions below applies.
    fn mode(&self) -> u8 {
        match (self.fast, self.wr == 0) {
            (false, _) => GENERIC,
            (true, true) => FAST_ALIGNED,
            (true, false) => FAST,
        }
    }

    #[inline(always)]
    fn reduce<const N: usize, const MODE: u8, C: Clmul>(&self, mut p: [u64; WIDE]) -> [u64; N] {
        match MODE {
            FAST => self.reduce_fast::<N, false, C>(&p),
            FAST_ALIGNED => self.reduce_fast::<N, true, C>(&p),
            _ => reduce_generic::<N>(&mut p, self.m),
        }
    }

    /// Two-pass reduction by the one-word polynomial `g = Σ x^tap`, using
    /// `x^l ≡ g`. With `N = ⌈l/64⌉` the top word of the field is `N − 1`, or
    /// `N` past the end when `64 | l`, so every index is a compile-time
    /// constant and the product stays in registers.
    #[inline(always)]
    fn reduce_fast<const N: usize, const ALIGNED: bool, C: Clmul>(&self, p: &[u64; WIDE]) -> [u64; N] {
        let wq = if ALIGNED { N } else { N - 1 };
        let wr = self.wr;
        // r = (p mod x^l) + (p >> l)·g, with one spare word for the overflow.
        let mut r = [0u64; 9];
        r[..N].copy_from_slice(&p[..N]);
        if !ALIGNED {
            r[N - 1] &= self.low_mask;
        }
        for i in 0..N {
            let (lo, hi) = C::split(C::clmul(word_above(p, wq, wr, i), self.g));
            r[i] ^= lo;
            r[i + 1] ^= hi;
        }
        // Fewer than `deg g` bits remain above x^l.
        let h2 = if ALIGNED {
            r[N]
        } else {
            (r[N - 1] >> wr) | ((r[N] << 1) << (63 - wr))
        };
        let mut out = [0u64; N];
        out.copy_from_slice(&r[..N]);
        if !ALIGNED {
            out[N - 1] &= self.low_mask;
        }
        let (lo, hi) = C::split(C::clmul(h2, self.g));
        out[0] ^= lo;
        if N > 1 {
            out[1] ^= hi;
        }
        out
    }
}

const GENERIC: u8 = 0;
const FAST: u8 = 1;
const FAST_ALIGNED: u8 = 2;

#[inline(always)]
fn mul_generic<const N: usize, const MODE: u8, C: Clmul>(a: &[u64; N], b: &[u64; N], red: &Reducer) -> [u64; N] {
    red.reduce::<N, MODE, C>(C::mul_wide::<N>(a, b))
}

/// `a·b mod m`, with the reduction chosen once.
#[inline(always)]
fn mul_any<const N: usize, C: Clmul>(a: &[u64; N], b: &[u64; N], m: &Modulus) -> [u64; N] {
    let red = Reducer::new(m);
    match red.mode() {
        FAST => mul_generic::<N, FAST, C>(a, b, &red),
        FAST_ALIGNED => mul_generic::<N, FAST_ALIGNED, C>(a, b, &red),
        _ => mul_generic::<N, GENERIC, C>(a, b, &red),
    }
}

/// Number of independent Horner chains advanced together.
const LANES: usize = 8;

#[inline(always)]
fn horner_mode<const N: usize, const MODE: u8, C: Clmul>(
    coeffs: &[[u64; N]],
    points: &[[u64; N]],
    red: &Reducer,
) -> Vec<[u64; N]> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(LANES) {
        let mut x = [[0u64; N]; LANES];
        x[..chunk.len()].copy_from_slice(chunk);
        let mut acc = [[0u64; N]; LANES];
        for c in coeffs {
            for t in 0..LANES {
                let mut r = mul_generic::<N, MODE, C>(&acc[t], &x[t], red);
                for q in 0..N {
                    r[q] ^= c[q];
                }
                acc[t] = r;
            }
        }
        out.extend_from_slice(&acc[..chunk.len()]);
    }
    out
}

/// Horner evaluation of `coeffs` (highest degree first) at every point.
#[inline(always)]
fn horner_generic<const N: usize, C: Clmul>(coeffs: &[[u64; N]], points: &[[u64; N]], m: &Modulus) -> Vec<[u64; N]> {
    let red = Reducer::new(m);
    match red.mode() {
        FAST => horner_mode::<N, FAST, C>(coeffs, points, &red),
        FAST_ALIGNED => horner_mode::<N, FAST_ALIGNED, C>(coeffs, points, &red),
        _ => horner_mode::<N, GENERIC, C>(coeffs, points, &red),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq,sse2,sse4.1")]
fn horner_hw<const N: usize>(coeffs: &[[u64; N]], points: &[[u64; N]], m: &Modulus) -> Vec<[u64; N]> {
    horner_generic::<N, Hw>(coeffs, points, m)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "pclmulqdq,sse2,sse4.1")]
fn mul_hw<const N: usize>(a: &[u64; N], b: &[u64; N], m: &Modulus) -> [u64; N] {
    mul_any::<N, Hw>(a, b, m)
}

/// `a·b mod m`.
pub(crate) fn mul<const N: usize>(a: &[u64; N], b: &[u64; N], m: &Modulus, backend: Backend) -> [u64; N] {
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Auto && hardware_available() {
        // SAFETY: the required CPU features were detected above.
        return unsafe { mul_hw::<N>(a, b, m) };
    }
    let _ = backend;
    mul_any::<N, Soft>(a, b, m)
}

/// Evaluates the polynomial with coefficients `coeffs` (highest degree
/// first) at each of `points`.
pub(crate) fn horner<const N: usize>(
    coeffs: &[[u64; N]],
    points: &[[u64; N]],
    m: &Modulus,
    backend: Backend,
) -> Vec<[u64; N]> {
    #[cfg(target_arch = "x86_64")]
    if backend == Backend::Auto && hardware_available() {
        // SAFETY: the required CPU features were detected above.
        return unsafe { horner_hw::<N>(coeffs, points, m) };
    }
    let _ = backend;
    horner_generic::<N, Soft>(coeffs, points, m)
}

/// `a^e mod m` by square-and-multiply.
pub(crate) fn pow<const N: usize>(a: &[u64; N], mut e: u64, m: &Modulus, backend: Backend) -> [u64; N] {
    let mut one = [0u64; N];
    one[0] = 1;
    let mut result = one;
    let mut base = *a;
    while e > 0 {
        if e & 1 == 1 {
            result = mul(&result, &base, m, backend);
        }
        base = mul(&base, &base, m, backend);
        e >>= 1;
    }
    result
}

/// Limb count needed for degree `l`.
pub(crate) fn limbs_for(l: u32) -> usize {
    (l as usize).div_ceil(64).max(1)
}

/// Field product on dynamically sized limb slices of length `limbs_for(m.degree)`.
pub fn field_mul(a: &[u64], b: &[u64], m: &Modulus, backend: Backend) -> Vec<u64> {
    macro_rules! go {
        ($n:literal) => {{
            let a: [u64; $n] = a.try_into().expect("limb count");
            let b: [u64; $n] = b.try_into().expect("limb count");
            mul::<$n>(&a, &b, m, backend).to_vec()
        }};
    }
    match limbs_for(m.degree) {
        1 => go!(1),
        2 => go!(2),
        3 => go!(3),
        4 => go!(4),
        5 => go!(5),
        6 => go!(6),
        7 => go!(7),
        8 => go!(8),
        n => panic!("unsupported limb count {n}"),
    }
}
