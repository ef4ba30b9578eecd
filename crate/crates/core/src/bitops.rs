//! Bit-packed {-1, +1} tensors and XNOR/popcount arithmetic.
//!
//! Encoding: `+1 -> 1`, `-1 -> 0`, least significant bit first, 32-bit words.
//! A [`BitTensor`] is a stack of rows (one per batch index or output filter),
//! each row padded to a whole number of words with zero bits.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{sign_scalar, ConvParams, Shape, Tensor};

pub type Word = u32;
pub const WORD_BITS: usize = Word::BITS as usize;

#[inline]
pub const fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask selecting the valid low bits of the final word of an `n`-bit row.
#[inline]
fn tail_mask(n: usize) -> Word {
    match n % WORD_BITS {
        0 => Word::MAX,
        r => (1 << r) - 1,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape,
    row_bits: usize,
    words: Vec<Word>,
}

impl BitTensor {
    /// All-zero bits (every element -1) with rows of `shape.c * shape.h * shape.w` bits.
    pub fn zeros(shape: Shape) -> Self {
        let row_bits = shape.sample();
        BitTensor { shape, row_bits, words: vec![0; shape.n * words_for(row_bits)] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.n
    }

    /// Elements per row.
    pub fn row_bits(&self) -> usize {
        self.row_bits
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.row_bits)
    }

    /// Meaningful bits in the last word of each row.
    pub fn valid_bits(&self) -> usize {
        match self.row_bits % WORD_BITS {
            0 => WORD_BITS,
            r => r,
        }
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[Word] {
        let w = self.words_per_row();
        &self.words[r * w..(r + 1) * w]
    }

    #[inline]
    pub fn get(&self, row: usize, i: usize) -> bool {
        let w = self.words[row * self.words_per_row() + i / WORD_BITS];
        (w >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, i: usize, bit: bool) {
        let wpr = self.words_per_row();
        let w = &mut self.words[row * wpr + i / WORD_BITS];
        let m = 1 << (i % WORD_BITS);
        if bit {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    /// Bitwise complement of every valid element (padding stays zero).
    pub fn complement(&self) -> BitTensor {
        let mut out = self.clone();
        let wpr = self.words_per_row();
        let mask = tail_mask(self.row_bits);
        for r in 0..self.rows() {
            let row = &mut out.words[r * wpr..(r + 1) * wpr];
            for w in row.iter_mut() {
                *w = !*w;
            }
            if let Some(last) = row.last_mut() {
                *last &= mask;
            }
        }
        out
    }

    /// Whether every padding bit beyond the valid elements is zero.
    pub fn padding_is_clear(&self) -> bool {
        let wpr = self.words_per_row();
        let mask = tail_mask(self.row_bits);
        (0..self.rows()).all(|r| self.words[(r + 1) * wpr - 1] & !mask == 0)
    }

    /// Rows concatenated into one contiguous LSB-first stream of `rows * row_bits` bits.
    pub fn to_stream(&self) -> Vec<Word> {
        let total = self.rows() * self.row_bits;
        let mut out = vec![0 as Word; words_for(total)];
        for r in 0..self.rows() {
            for i in 0..self.row_bits {
                if self.get(r, i) {
                    let k = r * self.row_bits + i;
                    out[k / WORD_BITS] |= 1 << (k % WORD_BITS);
                }
            }
        }
        out
    }

    /// Inverse of [`to_stream`](Self::to_stream).
    pub fn from_stream(shape: Shape, stream: &[Word]) -> Result<Self> {
        let mut t = BitTensor::zeros(shape);
        let total = shape.numel();
        if stream.len() != words_for(total) {
            return Err(Error::Length(format!("{} bits need {} words, got {}", total, words_for(total), stream.len())));
        }
        if !total.is_multiple_of(WORD_BITS) && stream[stream.len() - 1] & !tail_mask(total) != 0 {
            return Err(Error::Format("nonzero padding bits in packed stream".into()));
        }
        for k in 0..total {
            if (stream[k / WORD_BITS] >> (k % WORD_BITS)) & 1 == 1 {
                t.set(k / t.row_bits, k % t.row_bits, true);
            }
        }
        Ok(t)
    }
}

/// Packs a tensor of exact ±1 values.
pub fn pack(t: &Tensor) -> Result<BitTensor> {
    if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &v)| v != 1.0 && v != -1.0) {
        return Err(Error::NotBinary { index, value });
    }
    Ok(pack_signs(t))
}

/// Packs `sign(t)` for arbitrary real values (`sign(0) = +1`).
pub fn pack_signs(t: &Tensor) -> BitTensor {
    let mut b = BitTensor::zeros(t.shape());
    let wpr = b.words_per_row();
    let row_bits = b.row_bits;
    for (r, row) in t.data().chunks(row_bits).enumerate() {
        let dst = &mut b.words[r * wpr..(r + 1) * wpr];
        for (wi, chunk) in row.chunks(WORD_BITS).enumerate() {
            let mut w: Word = 0;
            for (i, &v) in chunk.iter().enumerate() {
                w |= ((v >= 0.0) as Word) << i;
            }
            dst[wi] = w;
        }
    }
    b
}

pub fn unpack(b: &BitTensor) -> Tensor {
    let s = b.shape();
    let mut data = Vec::with_capacity(s.numel());
    for r in 0..b.rows() {
        for i in 0..b.row_bits {
            data.push(if b.get(r, i) { 1.0 } else { -1.0 });
        }
    }
    Tensor::new(s, data).expect("bit tensor shape is valid")
}

/// Sum of elementwise products of two packed ±1 rows of `n` elements.
pub fn binary_dot(a: &[Word], b: &[Word], n: usize) -> Result<i64> {
    let need = words_for(n);
    if a.len() != need || b.len() != need {
        return Err(Error::Length(format!(
            "binary_dot over {n} elements needs {need} words, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b, n) as i64)
}

#[inline]
fn dot_unchecked(a: &[Word], b: &[Word], n: usize) -> i32 {
    let last = a.len() - 1;
    let mut pop = 0u32;
    for i in 0..last {
        pop += (!(a[i] ^ b[i])).count_ones();
    }
    pop += (!(a[last] ^ b[last]) & tail_mask(n)).count_ones();
    2 * pop as i32 - n as i32
}

/// Packed filters plus one positive scale per output filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledBinaryWeights {
    bits: BitTensor,
    alpha: Vec<f32>,
}

/// Smallest admissible scale; an all-zero filter would otherwise get α = 0.
pub const MIN_ALPHA: f32 = 1e-12;

impl ScaledBinaryWeights {
    pub fn new(bits: BitTensor, alpha: Vec<f32>) -> Result<Self> {
        if alpha.len() != bits.rows() {
            return Err(Error::Length(format!("{} filters but {} scales", bits.rows(), alpha.len())));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(Error::Invalid(format!("scaling factor must be positive and finite, got {a}")));
        }
        Ok(ScaledBinaryWeights { bits, alpha })
    }

    pub fn bits(&self) -> &BitTensor {
        &self.bits
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    /// Weight shape (out, in, k, k).
    pub fn shape(&self) -> Shape {
        self.bits.shape()
    }

    /// Dense `alpha[f] * sign(W[f])`.
    pub fn to_dense(&self) -> Tensor {
        let mut t = unpack(&self.bits);
        let per = self.bits.row_bits();
        for (f, chunk) in t.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= self.alpha[f]);
        }
        t
    }

    /// Appends the wire form: header, scales, contiguous filter-major bit stream.
    pub fn write_wire(&self, out: &mut Vec<u8>) {
        let s = self.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for a in &self.alpha {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for w in self.bits.to_stream() {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }

    pub fn wire_len(&self) -> usize {
        16 + 4 * self.alpha.len() + 4 * words_for(self.shape().numel())
    }

    /// Parses one wire record; returns the weights and the bytes consumed.
    pub fn read_wire(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if dims.contains(&0) {
            return Err(Error::Format(format!("binary layer header has a zero extent: {shape}")));
        }
        let alpha = (0..shape.n).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        let stream = (0..words_for(shape.numel())).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let bits = BitTensor::from_stream(shape, &stream)?;
        let w = ScaledBinaryWeights::new(bits, alpha).map_err(|e| Error::Format(e.to_string()))?;
        Ok((w, cur.pos))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take4(&mut self) -> Result<[u8; 4]> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format("truncated binary layer record".into()))?;
        self.pos += 4;
        Ok(b.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        self.take4().map(u32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take4().map(f32::from_le_bytes)
    }
}

/// `bits = pack(sign(w))`, `alpha[f] = mean |w[f]|`.
pub fn binarize_weights(w: &Tensor) -> ScaledBinaryWeights {
    let per = w.shape().sample();
    let alpha = w
        .data()
        .chunks(per)
        .map(|f| {
            let m = f.iter().map(|v| v.abs() as f64).sum::<f64>() / per as f64;
            (m as f32).max(MIN_ALPHA)
        })
        .collect();
    ScaledBinaryWeights { bits: pack_signs(w), alpha }
}

/// Packs the sign of every receptive field of one sample, one row per output
/// position. Padding cells are +1.
fn packed_patches(sample: &[f32], in_shape: Shape, params: &ConvParams, out_h: usize, out_w: usize, out: &mut Vec<Word>) {
    let k = params.kernel;
    let kdim = in_shape.c * k * k;
    let wpr = words_for(kdim);
    let positions = out_h * out_w;
    out.clear();
    out.resize(positions * wpr, 0);
    let pad = params.padding as isize;
    let stride = params.stride as isize;
    let (h, w) = (in_shape.h as isize, in_shape.w as isize);
    for c in 0..in_shape.c {
        let plane = &sample[c * in_shape.plane()..(c + 1) * in_shape.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let j = (c * k + ky) * k + kx;
                let (wi, bit) = (j / WORD_BITS, 1 << (j % WORD_BITS));
                for oy in 0..out_h {
                    let iy = oy as isize * stride + ky as isize - pad;
                    for ox in 0..out_w {
                        let ix = ox as isize * stride + kx as isize - pad;
                        let positive = iy < 0 || iy >= h || ix < 0 || ix >= w || plane[(iy * w + ix) as usize] >= 0.0;
                        if positive {
                            out[(oy * out_w + ox) * wpr + wi] |= bit;
                        }
                    }
                }
            }
        }
    }
}

/// Binary convolution: `alpha[f] * (sign(input) (*) bits[f])`, with +1 padding.
pub fn xnor_conv2d(input: &Tensor, weights: &ScaledBinaryWeights, params: &ConvParams) -> Result<Tensor> {
    if weights.shape() != params.weight_shape() {
        return Err(Error::shape(
            "xnor_conv2d",
            format!("weights {} do not match expected {}", weights.shape(), params.weight_shape()),
        ));
    }
    let in_shape = input.shape();
    let out_shape = params.output_shape(in_shape)?;
    let kdim = params.in_channels * params.kernel * params.kernel;
    let wpr = words_for(kdim);
    let positions = out_shape.plane();
    let mut out = Tensor::zeros(out_shape);
    let mut patches = Vec::new();
    for n in 0..in_shape.n {
        let x = &input.data()[n * in_shape.sample()..(n + 1) * in_shape.sample()];
        packed_patches(x, in_shape, params, out_shape.h, out_shape.w, &mut patches);
        let y = &mut out.data_mut()[n * out_shape.sample()..(n + 1) * out_shape.sample()];
        for f in 0..params.out_channels {
            let wrow = weights.bits.row(f);
            let a = weights.alpha[f];
            let dst = &mut y[f * positions..(f + 1) * positions];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = a * dot_unchecked(wrow, &patches[p * wpr..(p + 1) * wpr], kdim) as f32;
            }
        }
    }
    Ok(out)
}

/// Dense reference for [`xnor_conv2d`]: float convolution of `sign(input)`
/// (padded with +1) against `alpha * sign(W)`.
pub fn xnor_conv2d_reference(input: &Tensor, weights: &ScaledBinaryWeights, params: &ConvParams) -> Result<Tensor> {
    crate::tensor::conv2d_padded(&input.map(sign_scalar), &weights.to_dense(), params, 1.0)
}

/// `C = A * B` for ±1 matrices: `a` holds rows of A, `bt` holds rows of B^T.
pub fn packed_gemm(a: &BitTensor, bt: &BitTensor) -> Result<Vec<i32>> {
    if a.row_bits() != bt.row_bits() {
        return Err(Error::Length(format!("inner dimensions {} and {}", a.row_bits(), bt.row_bits())));
    }
    let n = a.row_bits();
    let mut c = Vec::with_capacity(a.rows() * bt.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..bt.rows() {
            c.push(dot_unchecked(ai, bt.row(j), n));
        }
    }
    Ok(c)
}

/// Textbook i-j-k triple loop over row-major `m x k` and `k x n` matrices.
pub fn naive_float_gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

#[derive(Clone, Debug, Serialize)]
pub struct GemmBenchReport {
    pub size: usize,
    /// Logical multiply-adds counted as 2 ops each, per second.
    pub packed_ops_per_sec: f64,
    pub float_ops_per_sec: f64,
    pub speedup: f64,
    pub checked_row: usize,
    pub cross_check_ok: bool,
}

fn time_repeated<T>(min: Duration, mut f: impl FnMut() -> T) -> (T, f64) {
    let start = Instant::now();
    let mut reps = 0u32;
    let mut last;
    loop {
        last = f();
        reps += 1;
        if start.elapsed() >= min {
            break;
        }
    }
    (last, start.elapsed().as_secs_f64() / reps as f64)
}

/// Times packed and naive float GEMM on the same random ±1 `size x size`
/// problem and cross-checks one random output row against the float result.
pub fn packed_gemm_bench<R: Rng + ?Sized>(size: usize, min_time: Duration, rng: &mut R) -> Result<GemmBenchReport> {
    if size < 64 {
        return Err(Error::Invalid(format!("benchmark size must be >= 64, got {size}")));
    }
    let shape = Shape::new(size, 1, 1, size);
    let a = Tensor::random_sign(shape, rng);
    let b = Tensor::random_sign(shape, rng);
    let mut bt = vec![0.0f32; size * size];
    for i in 0..size {
        for j in 0..size {
            bt[j * size + i] = b.data()[i * size + j];
        }
    }
    let bt = Tensor::new(shape, bt)?;
    let (pa, pbt) = (pack(&a)?, pack(&bt)?);

    let (packed, t_packed) = time_repeated(min_time, || packed_gemm(&pa, &pbt));
    let packed = packed?;
    let (float, t_float) = time_repeated(min_time, || naive_float_gemm(a.data(), b.data(), size, size, size));

    let row = rng.gen_range(0..size);
    let cross_check_ok = (0..size).all(|j| packed[row * size + j] as f32 == float[row * size + j]);
    let ops = 2.0 * (size as f64).powi(3);
    Ok(GemmBenchReport {
        size,
        packed_ops_per_sec: ops / t_packed,
        float_ops_per_sec: ops / t_float,
        speedup: t_float / t_packed,
        checked_row: row,
        cross_check_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_tensor(v: &[f32]) -> Tensor {
        Tensor::new(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn encoding_is_lsb_first() {
        let b = pack(&vec_tensor(&[1.0, -1.0, 1.0, 1.0])).unwrap();
        assert_eq!(b.words(), &[0b1101]);
        assert_eq!(b.valid_bits(), 4);
    }

    #[test]
    fn thirty_three_negatives_use_two_words() {
        let b = pack(&vec_tensor(&[-1.0; 33])).unwrap();
        assert_eq!(b.words(), &[0, 0]);
        assert_eq!(b.valid_bits(), 1);
        assert!(b.padding_is_clear());
    }

    #[test]
    fn pack_rejects_non_binary() {
        let err = pack(&vec_tensor(&[1.0, -1.0, 0.5])).unwrap_err();
        assert!(matches!(err, Error::NotBinary { index: 2, .. }));
        assert!(err.to_string().contains('2'));
    }

    #[test]
    fn round_trip_thousand() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::random_sign(Shape::new(1, 1, 1, 1000), &mut r);
        assert_eq!(unpack(&pack(&t).unwrap()), t);
    }

    #[test]
    fn dot_extremes_and_length_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = pack(&Tensor::random_sign(Shape::new(1, 1, 1, 64), &mut r)).unwrap();
        assert_eq!(binary_dot(a.row(0), a.row(0), 64).unwrap(), 64);
        assert_eq!(binary_dot(a.row(0), a.complement().row(0), 64).unwrap(), -64);
        assert!(binary_dot(a.row(0), &a.row(0)[..1], 64).is_err());
        assert!(binary_dot(a.row(0), a.row(0), 65).is_err());
    }

    #[test]
    fn dot_matches_float_dot() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = Tensor::random_sign(Shape::new(1, 1, 1, 100), &mut r);
            let y = Tensor::random_sign(Shape::new(1, 1, 1, 100), &mut r);
            let dense: f32 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let got = binary_dot(pack(&x).unwrap().row(0), pack(&y).unwrap().row(0), 100).unwrap();
            assert_eq!(got as f32, dense);
        }
    }

    #[test]
    fn xnor_conv_scalar() {
        let x = vec_tensor(&[5.0]);
        let w = ScaledBinaryWeights::new(pack(&vec_tensor(&[1.0])).unwrap(), vec![0.7]).unwrap();
        let y = xnor_conv2d(&x, &w, &ConvParams::new(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y.data(), &[0.7]);
    }

    #[test]
    fn xnor_conv_equals_dense_sign_conv() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for (stride, pad, hw) in [(1, 1, 7), (2, 1, 9), (1, 0, 5), (2, 0, 7)] {
            let p = ConvParams::new(5, 3, 3, stride, pad);
            let x = Tensor::randn(Shape::new(2, 5, hw, hw), 1.0, &mut r);
            let bits = pack(&Tensor::random_sign(p.weight_shape(), &mut r)).unwrap();
            let w = ScaledBinaryWeights::new(bits.clone(), vec![1.0; 3]).unwrap();
            let fast = xnor_conv2d(&x, &w, &p).unwrap();
            // +1 padding oracle: pad the sign image explicitly, then convolve unpadded
            let padded = crate::tensor::pad_const(&crate::tensor::sign(&x), pad, 1.0);
            let dense = conv2d(&padded, &unpack(&bits), &ConvParams::new(5, 3, 3, stride, 0)).unwrap();
            assert_eq!(fast, dense);
            assert_eq!(fast, xnor_conv2d_reference(&x, &w, &p).unwrap());
        }
    }

    #[test]
    fn xnor_conv_approximates_real_conv() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let p = ConvParams::same(16, 8, 3);
        let x = Tensor::randn(Shape::new(1, 16, 8, 8), 1.0, &mut r);
        let w = Tensor::randn(p.weight_shape(), 1.0, &mut r);
        let approx = xnor_conv2d(&x, &binarize_weights(&w), &p).unwrap();
        let exact = conv2d(&x, &w, &p).unwrap();
        let num: f64 = approx.data().iter().zip(exact.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let den: f64 = exact.data().iter().map(|b| (*b as f64).powi(2)).sum();
        let rel = (num / den).sqrt();
        // measured, not a bound from the method; only sanity-check finiteness
        assert!(rel.is_finite());
    }

    #[test]
    fn binarize_examples() {
        let ones = binarize_weights(&Tensor::full(Shape::new(2, 1, 2, 2), 1.0));
        assert_eq!(ones.alpha(), &[1.0, 1.0]);
        assert!(unpack(ones.bits()).data().iter().all(|&v| v == 1.0));
        let alt = binarize_weights(&Tensor::new(Shape::new(1, 1, 2, 2), vec![-2.0, 2.0, -2.0, 2.0]).unwrap());
        assert_eq!(alt.alpha(), &[2.0]);
    }

    #[test]
    fn binarize_alpha_matches_mean_abs() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::randn(Shape::new(4, 3, 3, 3), 0.5, &mut r);
        let b = binarize_weights(&w);
        for f in 0..4 {
            let s = w.sample(f);
            let mean = s.data().iter().map(|v| v.abs() as f64).sum::<f64>() / 27.0;
            assert!((b.alpha()[f] as f64 - mean).abs() <= 1e-6);
        }
    }

    #[test]
    fn wire_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let w = binarize_weights(&Tensor::randn(Shape::new(3, 5, 3, 3), 1.0, &mut r));
        let mut buf = vec![];
        w.write_wire(&mut buf);
        assert_eq!(buf.len(), w.wire_len());
        // 3*5*9 = 135 bits -> 5 words
        assert_eq!(buf.len(), 16 + 12 + 20);
        let (back, used) = ScaledBinaryWeights::read_wire(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, w);
        assert!(ScaledBinaryWeights::read_wire(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn gemm_all_ones() {
        let ones = pack(&Tensor::full(Shape::new(64, 1, 1, 64), 1.0)).unwrap();
        assert!(packed_gemm(&ones, &ones).unwrap().iter().all(|&v| v == 64));
    }

    #[test]
    fn gemm_matches_float() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let n = 70;
        let a = Tensor::random_sign(Shape::new(n, 1, 1, n), &mut r);
        let b = Tensor::random_sign(Shape::new(n, 1, 1, n), &mut r);
        let bt = Tensor::from_fn(Shape::new(n, 1, 1, n), |j, _, _, i| b.at(i, 0, 0, j));
        let packed = packed_gemm(&pack(&a).unwrap(), &pack(&bt).unwrap()).unwrap();
        let float = naive_float_gemm(a.data(), b.data(), n, n, n);
        assert!(packed.iter().zip(&float).all(|(p, f)| *p as f32 == *f));
    }

    #[test]
    fn bench_reports_consistent_numbers() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let rep = packed_gemm_bench(64, Duration::from_millis(5), &mut r).unwrap();
        assert!(rep.cross_check_ok);
        assert!(rep.speedup > 0.0 && rep.packed_ops_per_sec > 0.0);
        assert!(packed_gemm_bench(32, Duration::ZERO, &mut r).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(bits in prop::collection::vec(any::<bool>(), 1..300)) {
            let t = vec_tensor(&bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect::<Vec<_>>());
            let p = pack(&t).unwrap();
            prop_assert!(p.padding_is_clear());
            prop_assert_eq!(unpack(&p), t);
        }

        #[test]
        fn self_and_complement_dot(seed in 0u64..10_000, n in 1usize..200) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = pack(&Tensor::random_sign(Shape::new(1, 1, 1, n), &mut r)).unwrap();
            prop_assert_eq!(binary_dot(a.row(0), a.row(0), n).unwrap(), n as i64);
            prop_assert_eq!(binary_dot(a.row(0), a.complement().row(0), n).unwrap(), -(n as i64));
        }

        #[test]
        fn binarize_scale_invariance(seed in 0u64..10_000, c in 0.01f32..100.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::randn(Shape::new(3, 2, 3, 3), 1.0, &mut r);
            let a = binarize_weights(&w);
            let b = binarize_weights(&w.scale(c));
            prop_assert_eq!(a.bits(), b.bits());
            for (x, y) in a.alpha().iter().zip(b.alpha()) {
                prop_assert!(((x * c) - y).abs() <= 1e-6 * y.max(1.0) * 4.0);
            }
        }

        #[test]
        fn stream_round_trip(rows in 1usize..5, len in 1usize..70, seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let b = pack(&Tensor::random_sign(Shape::new(rows, 1, 1, len), &mut r)).unwrap();
            prop_assert_eq!(BitTensor::from_stream(b.shape(), &b.to_stream()).unwrap(), b);
        }
    }
}
