//! Datapath arithmetic shared by the golden model and the simulator.
//!
//! Both sides run the same element-level operations; they differ only in
//! how work is partitioned. Matrix-vector products return accumulator
//! values that are summed across tiles and rounded once at the end, so a
//! tiled computation reproduces the whole-matrix result exactly whenever
//! accumulation is exact (always in fixed point).
//!
//! Fixed-point layout with `f` fraction bits:
//!
//! | quantity              | scale |
//! |-----------------------|-------|
//! | stored word           | 2^f   |
//! | frozen-path product   | 2^2f, shifted to 2^4f |
//! | low-rank product      | x·A at 2^2f, ·B at 2^3f, ·s at 2^4f |
//! | projection accumulator| 2^4f, rounded by 3f bits |
//! | attention score       | q·k at 2^2f, ·scale at 2^3f, rounded by 2f bits |
//! | weighted value sum    | 2^2f, rounded by f bits |
//!
//! Rounding is half-up: `(x + 2^(s-1)) >> s` with an arithmetic shift.

use std::fmt::Debug;

use crate::tensor::Tensor2D;

pub trait Arith: Clone + Debug + Send + Sync + 'static {
    type Word: Copy + Debug + Default + PartialEq + Send + Sync + 'static;
    type Acc: Copy + Debug + Default + PartialEq + Send + Sync + 'static;

    /// False for datapaths that only drive timing; the simulator then skips
    /// all value computation.
    const FUNCTIONAL: bool = true;

    fn encode(&self, v: f64) -> Self::Word;
    fn decode(&self, w: Self::Word) -> f64;

    fn acc_add(&self, a: Self::Acc, b: Self::Acc) -> Self::Acc;

    /// Frozen-weight path `W·x`, one accumulator per output row.
    fn smac(&self, w: &Tensor2D<Self::Word>, x: &[Self::Word]) -> Vec<Self::Acc>;

    /// Low-rank path `s·B·(A·x)`, one accumulator per row of `b`.
    fn lora_smac(
        &self,
        b: &Tensor2D<Self::Word>,
        a: &Tensor2D<Self::Word>,
        scale: f64,
        x: &[Self::Word],
    ) -> Vec<Self::Acc>;

    /// Round a projection accumulator to a word.
    fn finalize(&self, acc: Self::Acc) -> Self::Word;

    /// Scaled attention score `scale · q·k`.
    fn score(&self, q: &[Self::Word], k: &[Self::Word], scale: f64) -> Self::Word;

    fn softmax(&self, scores: &[Self::Word]) -> Vec<Self::Word>;

    /// Adds `p · v` into `acc` (attention-weighted value accumulation).
    fn weighted_acc(&self, acc: &mut [Self::Acc], p: Self::Word, v: &[Self::Word]);

    fn finalize_weighted(&self, acc: Self::Acc) -> Self::Word;

    fn silu(&self, w: Self::Word) -> Self::Word;
    fn mul(&self, a: Self::Word, b: Self::Word) -> Self::Word;
}

/// IEEE double datapath; rounding-free apart from summation order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Float;

impl Arith for Float {
    type Word = f64;
    type Acc = f64;

    fn encode(&self, v: f64) -> f64 {
        v
    }

    fn decode(&self, w: f64) -> f64 {
        w
    }

    fn acc_add(&self, a: f64, b: f64) -> f64 {
        a + b
    }

    fn smac(&self, w: &Tensor2D<f64>, x: &[f64]) -> Vec<f64> {
        assert_eq!(w.cols(), x.len(), "smac input length");
        (0..w.rows())
            .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn lora_smac(&self, b: &Tensor2D<f64>, a: &Tensor2D<f64>, scale: f64, x: &[f64]) -> Vec<f64> {
        let ax = self.smac(a, x);
        self.smac(b, &ax).into_iter().map(|v| scale * v).collect()
    }

    fn finalize(&self, acc: f64) -> f64 {
        acc
    }

    fn score(&self, q: &[f64], k: &[f64], scale: f64) -> f64 {
        scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()
    }

    fn softmax(&self, scores: &[f64]) -> Vec<f64> {
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    fn weighted_acc(&self, acc: &mut [f64], p: f64, v: &[f64]) {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += p * x;
        }
    }

    fn finalize_weighted(&self, acc: f64) -> f64 {
        acc
    }

    fn silu(&self, w: f64) -> f64 {
        w / (1.0 + (-w).exp())
    }

    fn mul(&self, a: f64, b: f64) -> f64 {
        a * b
    }
}

/// Signed fixed point with `frac_bits` fraction bits, 128-bit accumulators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixed {
    pub frac_bits: u32,
}

impl Fixed {
    pub fn new(frac_bits: u32) -> Self {
        assert!((1..=12).contains(&frac_bits), "fraction bits must lie in 1..=12");
        Self { frac_bits }
    }

    fn one(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    fn round_shift(x: i128, s: u32) -> i128 {
        if s == 0 {
            x
        } else {
            (x + (1i128 << (s - 1))) >> s
        }
    }

    fn to_word(x: i128) -> i64 {
        i64::try_from(x).expect("fixed-point word overflow")
    }
}

impl Default for Fixed {
    fn default() -> Self {
        Self::new(8)
    }
}

impl Arith for Fixed {
    type Word = i64;
    type Acc = i128;

    fn encode(&self, v: f64) -> i64 {
        (v * self.one()).round() as i64
    }

    fn decode(&self, w: i64) -> f64 {
        w as f64 / self.one()
    }

    fn acc_add(&self, a: i128, b: i128) -> i128 {
        a + b
    }

    fn smac(&self, w: &Tensor2D<i64>, x: &[i64]) -> Vec<i128> {
        assert_eq!(w.cols(), x.len(), "smac input length");
        let shift = 2 * self.frac_bits;
        (0..w.rows())
            .map(|r| {
                let dot: i128 = w.row(r).iter().zip(x).map(|(&a, &b)| a as i128 * b as i128).sum();
                dot << shift
            })
            .collect()
    }

    fn lora_smac(&self, b: &Tensor2D<i64>, a: &Tensor2D<i64>, scale: f64, x: &[i64]) -> Vec<i128> {
        assert_eq!(a.cols(), x.len(), "lora input length");
        assert_eq!(b.cols(), a.rows(), "lora rank");
        let s = self.encode(scale) as i128;
        let ax: Vec<i128> = (0..a.rows())
            .map(|r| a.row(r).iter().zip(x).map(|(&w, &v)| w as i128 * v as i128).sum())
            .collect();
        (0..b.rows())
            .map(|r| {
                let bax: i128 = b.row(r).iter().zip(&ax).map(|(&w, &u)| w as i128 * u).sum();
                bax * s
            })
            .collect()
    }

    fn finalize(&self, acc: i128) -> i64 {
        Self::to_word(Self::round_shift(acc, 3 * self.frac_bits))
    }

    fn score(&self, q: &[i64], k: &[i64], scale: f64) -> i64 {
        let dot: i128 = q.iter().zip(k).map(|(&a, &b)| a as i128 * b as i128).sum();
        let s = self.encode(scale) as i128;
        Self::to_word(Self::round_shift(dot * s, 2 * self.frac_bits))
    }

    fn softmax(&self, scores: &[i64]) -> Vec<i64> {
        let f = self.frac_bits;
        let m = scores.iter().copied().max().unwrap_or(0);
        let e: Vec<i128> = scores
            .iter()
            .map(|&s| (((s - m) as f64 / self.one()).exp() * self.one()).round() as i128)
            .collect();
        let z: i128 = e.iter().sum();
        e.into_iter()
            .map(|v| Self::to_word(((v << f) + z / 2) / z))
            .collect()
    }

    fn weighted_acc(&self, acc: &mut [i128], p: i64, v: &[i64]) {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += p as i128 * x as i128;
        }
    }

    fn finalize_weighted(&self, acc: i128) -> i64 {
        Self::to_word(Self::round_shift(acc, self.frac_bits))
    }

    fn silu(&self, w: i64) -> i64 {
        let x = self.decode(w);
        self.encode(x / (1.0 + (-x).exp()))
    }

    fn mul(&self, a: i64, b: i64) -> i64 {
        Self::to_word(Self::round_shift(a as i128 * b as i128, self.frac_bits))
    }
}

/// Value-free datapath for timing-only simulation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing;

impl Arith for Timing {
    type Word = ();
    type Acc = ();
    const FUNCTIONAL: bool = false;

    fn encode(&self, _: f64) {}

    fn decode(&self, _: ()) -> f64 {
        0.0
    }

    fn acc_add(&self, _: (), _: ()) {}

    fn smac(&self, w: &Tensor2D<()>, _: &[()]) -> Vec<()> {
        vec![(); w.rows()]
    }

    fn lora_smac(&self, b: &Tensor2D<()>, _: &Tensor2D<()>, _: f64, _: &[()]) -> Vec<()> {
        vec![(); b.rows()]
    }

    fn finalize(&self, _: ()) {}

    fn score(&self, _: &[()], _: &[()], _: f64) {}

    fn softmax(&self, scores: &[()]) -> Vec<()> {
        scores.to_vec()
    }

    fn weighted_acc(&self, _: &mut [()], _: (), _: &[()]) {}

    fn finalize_weighted(&self, _: ()) {}

    fn silu(&self, _: ()) {}

    fn mul(&self, _: (), _: ()) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_round_trip_on_grid() {
        let fx = Fixed::new(8);
        for i in -512..512 {
            let v = i as f64 / 256.0;
            assert_eq!(fx.decode(fx.encode(v)), v);
        }
    }

    #[test]
    fn fixed_smac_matches_float_on_grid_values() {
        let fx = Fixed::new(8);
        let w = Tensor2D::from_vec(2, 3, vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.75]).unwrap();
        let x = [1.0, 0.5, -2.0];
        let want = Float.smac(&w, &x);
        let got: Vec<f64> = fx
            .smac(&w.map(|v| fx.encode(v)), &x.map(|v| fx.encode(v)))
            .into_iter()
            .map(|a| fx.decode(fx.finalize(a)))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn tiled_accumulation_is_exact() {
        let fx = Fixed::new(8);
        let w = Tensor2D::from_fn(3, 6, |r, c| (r as i64 * 7 - c as i64 * 5) % 11);
        let x: Vec<i64> = (0..6).map(|i| 3 - i as i64 * 13).collect();
        let whole = fx.smac(&w, &x);
        let left = fx.smac(&w.block(0, 3, 0, 4), &x[..4]);
        let right = fx.smac(&w.block(0, 3, 4, 6), &x[4..]);
        let summed: Vec<i128> = left.iter().zip(&right).map(|(a, b)| a + b).collect();
        assert_eq!(whole, summed);
    }

    #[test]
    fn fixed_softmax_is_normalised() {
        let fx = Fixed::new(8);
        let p = fx.softmax(&[fx.encode(0.5), fx.encode(-1.0), fx.encode(2.0)]);
        let total: i64 = p.iter().sum();
        assert!((total - 256).abs() <= 2, "total {total}");
        assert!(p[2] > p[0] && p[0] > p[1]);
    }

    #[test]
    fn float_softmax_rows_sum_to_one() {
        let p = Float.softmax(&[3.0, -7.5, 0.1, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(Float.softmax(&[4.2]), vec![1.0]);
    }

    #[test]
    fn round_half_up() {
        assert_eq!(Fixed::round_shift(3, 1), 2);
        assert_eq!(Fixed::round_shift(-3, 1), -1);
        assert_eq!(Fixed::round_shift(-4, 1), -2);
    }
}
