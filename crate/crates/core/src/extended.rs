//! Double-double arithmetic and a precision-generic reference forward pass.
//!
//! Central differences at eps = 1e-5 amplify f64 rounding noise in the loss
//! by 1/(2·eps); for gradients near 1e-8 that noise alone exceeds the 1e-4
//! relative tolerance. Evaluating the perturbed losses with ~32 significant
//! digits removes it. The reference pass is also a plain, unoptimized
//! restatement of the LSTM equations used to cross-check the fast path.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::faults::ClassLabel;
use crate::nn::{Model, PROB_FLOOR};

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn sigmoid(self) -> Self {
        Self::from_f64(1.0) / (Self::from_f64(1.0) + (-self).exp())
    }

    fn tanh(self) -> Self {
        let one = Self::from_f64(1.0);
        let two = Self::from_f64(2.0);
        if self.to_f64() >= 0.0 {
            one - two / ((two * self).exp() + one)
        } else {
            two / ((-two * self).exp() + one) - one
        }
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    fn scale_pow2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2) + Dd::from_f64(q3)
    }
}

impl Real for Dd {
    fn from_f64(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::from_f64(0.0);
        }
        // x = k·ln2 + r, then exp(r) = (1 + s) squared 10 times with r / 1024
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::from_f64(k)).scale_pow2(-10);
        let mut term = r;
        let mut s = r;
        for n in 2..=12 {
            term = term * r / Dd::from_f64(n as f64);
            s = s + term;
        }
        for _ in 0..10 {
            s = s * Dd::from_f64(2.0) + s * s;
        }
        (s + Dd::from_f64(1.0)).scale_pow2(k as i32)
    }

    fn ln(self) -> Self {
        // one Newton step on exp(y) = x doubles the f64 estimate's precision
        let y = Dd::from_f64(self.hi.ln());
        y + self * (-y).exp() - Dd::from_f64(1.0)
    }
}

/// Cross-entropy of `model` on flattened features, evaluated in `T`, with
/// parameter `(tensor, index)` shifted by `delta` when given.
pub fn reference_loss<T: Real>(
    model: &Model,
    x: &[f64],
    label: ClassLabel,
    perturb: Option<(usize, usize, T)>,
) -> T {
    let cfg = &model.config;
    let (n, h) = (cfg.window, cfg.hidden);
    let tensors = model.tensors();
    let param = |ti: usize, k: usize| -> T {
        let v = T::from_f64(tensors[ti].3[k]);
        match perturb {
            Some((pt, pk, d)) if pt == ti && pk == k => v + d,
            _ => v,
        }
    };
    let zero = T::from_f64(0.0);

    let mut seq: Vec<Vec<T>> = (0..n)
        .map(|t| x[t * cfg.input_dim..(t + 1) * cfg.input_dim].iter().map(|&v| T::from_f64(v)).collect())
        .collect();
    for l in 0..cfg.layers {
        let (wi, ui, bi) = (3 * l, 3 * l + 1, 3 * l + 2);
        let in_dim = seq[0].len();
        let mut hs = vec![zero; h];
        let mut cs = vec![zero; h];
        let mut out = Vec::with_capacity(n);
        for input in &seq {
            let z: Vec<T> = (0..4 * h)
                .map(|r| {
                    let mut acc = param(bi, r);
                    for (j, &xj) in input.iter().enumerate() {
                        acc = acc + param(wi, r * in_dim + j) * xj;
                    }
                    for (k, &hk) in hs.iter().enumerate() {
                        acc = acc + param(ui, r * h + k) * hk;
                    }
                    acc
                })
                .collect();
            for k in 0..h {
                let i = z[k].sigmoid();
                let f = z[h + k].sigmoid();
                let g = z[2 * h + k].tanh();
                let o = z[3 * h + k].sigmoid();
                cs[k] = f * cs[k] + i * g;
                hs[k] = o * cs[k].tanh();
            }
            out.push(hs.clone());
        }
        seq = out;
    }
    let last = &seq[n - 1];
    let (dw, db) = (3 * cfg.layers, 3 * cfg.layers + 1);
    let logits: Vec<T> = (0..cfg.classes)
        .map(|j| {
            let mut acc = param(db, j);
            for (k, &hk) in last.iter().enumerate() {
                acc = acc + param(dw, j * h + k) * hk;
            }
            acc
        })
        .collect();
    let m = T::from_f64(logits.iter().map(|z| z.to_f64()).fold(f64::NEG_INFINITY, f64::max));
    let mut sum = zero;
    for &z in &logits {
        sum = sum + (z - m).exp();
    }
    let nll = m + sum.ln() - logits[label.index()];
    let cap = -PROB_FLOOR.ln();
    if nll.to_f64() > cap {
        T::from_f64(cap)
    } else {
        nll
    }
}
