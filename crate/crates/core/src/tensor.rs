//! Dense feature storage and the scalar kernels everything else is built on.

use std::ops::Range;

use crate::error::{contract, Result};

/// A `channels × height × width` grid of reals, channel-major with row-major
/// planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return contract(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            ));
        }
        if data.len() != channels * height * width {
            return contract(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return contract(format!("non-finite value at index {i}"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0);
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn slice_channels(&self, range: Range<usize>) -> Result<FeatureMap> {
        if range.start >= range.end || range.end > self.channels {
            return contract(format!(
                "channel range {range:?} outside 0..{}",
                self.channels
            ));
        }
        let n = self.height * self.width;
        FeatureMap::new(
            range.len(),
            self.height,
            self.width,
            self.data[range.start * n..range.end * n].to_vec(),
        )
    }

    /// Stacks maps with equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[FeatureMap]) -> Result<FeatureMap> {
        let Some(first) = parts.first() else {
            return contract("cannot concatenate zero feature maps");
        };
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return contract("spatial sizes differ between concatenated maps");
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        FeatureMap::new(channels, h, w, data)
    }

    /// Applies `weights` (`out × in`, row-major) to the channel vector at every
    /// spatial position.
    pub fn mix_channels(&self, weights: &[f64], out_channels: usize) -> Result<FeatureMap> {
        if weights.len() != out_channels * self.channels {
            return contract(format!(
                "channel mixing matrix must be {out_channels}x{}",
                self.channels
            ));
        }
        let n = self.height * self.width;
        let mut data = vec![0.0; out_channels * n];
        for (o, out_plane) in data.chunks_exact_mut(n).enumerate() {
            for i in 0..self.channels {
                let w = weights[o * self.channels + i];
                if w != 0.0 {
                    axpy(out_plane, w, self.plane(i));
                }
            }
        }
        FeatureMap::new(out_channels, self.height, self.width, data)
    }

    pub fn scale(&self, alpha: f64) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// A flattened window or token, the unit attention scores are computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVector(Vec<f64>);

impl FlatVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for FlatVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for FlatVector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

/// `a·b / sqrt(d_k)`.
pub fn dot_scaled(a: &FlatVector, b: &FlatVector, d_k: usize) -> Result<f64> {
    if a.dim() != b.dim() {
        return contract(format!("dot of dims {} and {}", a.dim(), b.dim()));
    }
    if d_k == 0 {
        return contract("key dimension must be positive");
    }
    Ok(dot(&a.0, &b.0) / (d_k as f64).sqrt())
}

/// Max-subtracted softmax.
pub fn softmax(logits: &FlatVector) -> Result<FlatVector> {
    if logits.dim() == 0 {
        return contract("softmax of an empty vector");
    }
    if logits.0.iter().any(|v| !v.is_finite()) {
        return contract("softmax input must be finite");
    }
    let mut out = logits.0.clone();
    softmax_in_place(&mut out);
    Ok(FlatVector(out))
}

/// `out[i] = src[table[i]]`.
pub fn gather(src: &FlatVector, table: &[usize]) -> Result<FlatVector> {
    if let Some(&bad) = table.iter().find(|&&i| i >= src.dim()) {
        return contract(format!("gather index {bad} out of range 0..{}", src.dim()));
    }
    Ok(FlatVector(table.iter().map(|&i| src.0[i]).collect()))
}

/// `ln Σ exp(v)`, stabilized by the maximum.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

// Slice kernels used by the attention loops. Four independent partial sums
// keep the reduction order fixed while letting the loop vectorize.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `dot` of four consecutive rows of `rows` with `b`, reading `b` once. Each
/// lane adds in the same order as [`dot`], so results are bit-identical.
#[inline]
pub(crate) fn dot4(rows: &[f64], b: &[f64]) -> [f64; 4] {
    let n = b.len();
    debug_assert_eq!(rows.len(), 4 * n);
    let (r0, rest) = rows.split_at(n);
    let (r1, rest) = rest.split_at(n);
    let (r2, r3) = rest.split_at(n);
    let mut acc = [[0.0f64; 4]; 4];
    let body = n - n % 4;
    let mut i = 0;
    while i < body {
        let y = &b[i..i + 4];
        for (a, r) in acc.iter_mut().zip([r0, r1, r2, r3]) {
            let x = &r[i..i + 4];
            a[0] += x[0] * y[0];
            a[1] += x[1] * y[1];
            a[2] += x[2] * y[2];
            a[3] += x[3] * y[3];
        }
        i += 4;
    }
    let mut out = [0.0; 4];
    for ((o, a), r) in out.iter_mut().zip(&acc).zip([r0, r1, r2, r3]) {
        let mut tail = 0.0;
        for (x, y) in r[body..].iter().zip(&b[body..]) {
            tail += x * y;
        }
        *o = (a[0] + a[1]) + (a[2] + a[3]) + tail;
    }
    out
}

/// `axpy` into four consecutive rows of `out`, reading `x` once.
#[inline]
pub(crate) fn axpy4(out: &mut [f64], alpha: [f64; 4], x: &[f64]) {
    let n = x.len();
    debug_assert_eq!(out.len(), 4 * n);
    let (o0, rest) = out.split_at_mut(n);
    let (o1, rest) = rest.split_at_mut(n);
    let (o2, o3) = rest.split_at_mut(n);
    for i in 0..n {
        let v = x[i];
        o0[i] += alpha[0] * v;
        o1[i] += alpha[1] * v;
        o2[i] += alpha[2] * v;
        o3[i] += alpha[3] * v;
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FlatVector {
        FlatVector::from(v)
    }

    #[test]
    fn dot_scaled_examples() {
        assert_eq!(
            dot_scaled(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0]), 4).unwrap(),
            0.0
        );
        assert_eq!(
            dot_scaled(&fv(&[1.0, 1.0]), &fv(&[1.0, 1.0]), 4).unwrap(),
            1.0
        );
        assert!(dot_scaled(&fv(&[1.0]), &fv(&[1.0, 2.0]), 1).is_err());
        assert!(dot_scaled(&fv(&[1.0]), &fv(&[1.0]), 0).is_err());
    }

    #[test]
    fn dot_scaled_matches_scalar_loop() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..50 {
            let a: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut oracle = 0.0;
            for i in 0..32 {
                oracle += a[i] * b[i];
            }
            oracle /= 32f64.sqrt();
            let got = dot_scaled(&fv(&a), &fv(&b), 32).unwrap();
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        }
    }

    #[test]
    fn blocked_kernels_equal_row_kernels_bitwise() {
        let mut rng = SplitMix64::new(11);
        for n in [1usize, 3, 4, 7, 32] {
            let rows: Vec<f64> = (0..4 * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let blocked = dot4(&rows, &b);
            for (j, row) in rows.chunks_exact(n).enumerate() {
                assert_eq!(blocked[j].to_bits(), dot(row, &b).to_bits());
            }
            let alpha = [0.5, -1.25, 2.0, 0.125];
            let mut out4 = rows.clone();
            axpy4(&mut out4, alpha, &b);
            let mut out1 = rows.clone();
            for (j, row) in out1.chunks_exact_mut(n).enumerate() {
                axpy(row, alpha[j], &b);
            }
            assert_eq!(out4, out1);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&fv(&[0.0; 4])).unwrap();
        assert!(s.as_slice().iter().all(|&w| (w - 0.25).abs() < 1e-15));

        let s = softmax(&fv(&[1000.0, 0.0])).unwrap();
        assert_eq!(s.as_slice()[0], 1.0);
        assert!(s.as_slice()[1] >= 0.0 && s.as_slice()[1] < 1e-300);

        let s = softmax(&fv(&[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (got, want) in s.as_slice().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }

        assert!(softmax(&fv(&[])).is_err());
        assert!(softmax(&fv(&[f64::NAN])).is_err());
    }

    #[test]
    fn gather_examples() {
        let src = fv(&[7.0, 8.0, 9.0]);
        assert_eq!(gather(&src, &[0, 1, 2]).unwrap(), src);
        assert_eq!(
            gather(&src, &[2, 0, 1]).unwrap().as_slice(),
            &[9.0, 7.0, 8.0]
        );
        assert!(gather(&src, &[3]).is_err());
    }

    #[test]
    fn logsumexp_closed_form() {
        assert!((logsumexp(&[1f64.ln(), 3f64.ln()]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[2.5]), 2.5);
    }

    #[test]
    fn feature_map_rejects_bad_input() {
        assert!(FeatureMap::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(1, 1, 1, vec![f64::INFINITY]).is_err());
        assert!(FeatureMap::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn channel_slice_and_concat_are_inverse() {
        let f = FeatureMap::from_fn(4, 3, 2, |c, y, x| (c * 100 + y * 10 + x) as f64).unwrap();
        let a = f.slice_channels(0..1).unwrap();
        let b = f.slice_channels(1..4).unwrap();
        assert_eq!(FeatureMap::concat_channels(&[a, b]).unwrap(), f);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..40),
            seed in any::<u64>(),
        ) {
            let s = softmax(&fv(&v)).unwrap();
            let total: f64 = s.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.as_slice().iter().all(|&w| w >= 0.0));

            let mut perm: Vec<usize> = (0..v.len()).collect();
            SplitMix64::new(seed).shuffle(&mut perm);
            let pv = gather(&fv(&v), &perm).unwrap();
            let lhs = softmax(&pv).unwrap();
            let rhs = gather(&s, &perm).unwrap();
            for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn softmax_is_monotone(v in prop::collection::vec(-20.0f64..20.0, 2..20)) {
            let s = softmax(&fv(&v)).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(s.as_slice()[i] >= s.as_slice()[j]);
                    }
                }
            }
        }

        #[test]
        fn dot_scaled_is_symmetric_and_linear(
            a in prop::collection::vec(-10.0f64..10.0, 8),
            b in prop::collection::vec(-10.0f64..10.0, 8),
            alpha in -5.0f64..5.0,
        ) {
            let (fa, fb) = (fv(&a), fv(&b));
            prop_assert_eq!(dot_scaled(&fa, &fb, 8).unwrap(), dot_scaled(&fb, &fa, 8).unwrap());
            let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            let lhs = dot_scaled(&fv(&scaled), &fb, 8).unwrap();
            let rhs = alpha * dot_scaled(&fa, &fb, 8).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }

        #[test]
        fn gather_inverse_recovers_input(
            v in prop::collection::vec(-10.0f64..10.0, 1..30),
            seed in any::<u64>(),
        ) {
            let src = fv(&v);
            let ident: Vec<usize> = (0..v.len()).collect();
            prop_assert_eq!(gather(&src, &ident).unwrap(), src.clone());
            let mut perm = ident.clone();
            SplitMix64::new(seed).shuffle(&mut perm);
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let back = gather(&gather(&src, &perm).unwrap(), &inv).unwrap();
            prop_assert_eq!(back, src);
        }
    }
}
