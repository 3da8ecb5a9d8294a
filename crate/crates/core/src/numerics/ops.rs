use crate::scalar::Scalar;

/// Softmax with max subtraction. `NaN` entries get zero mass.
pub fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().copied().filter(|v| !v.is_nan()).fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        // all -inf (or +inf somewhere): mass on the maximal entries
        let hits: Vec<bool> = x.iter().map(|&v| v == max).collect();
        let n = hits.iter().filter(|&&h| h).count().max(1);
        return hits.iter().map(|&h| if h { S::one() / S::lit(n as f64) } else { S::zero() }).collect();
    }
    let mut out: Vec<S> = x.iter().map(|&v| if v.is_nan() { S::zero() } else { (v - max).exp() }).collect();
    let total = out.iter().fold(S::zero(), |a, &b| a + b);
    out.iter_mut().for_each(|p| *p /= total);
    out
}

pub fn logsumexp<S: Scalar>(x: &[S]) -> S {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().fold(S::zero(), |a, &v| a + (v - max).exp()).ln()
}

/// Asymmetric squared loss `|tau - 1(u < 0)| * u^2`.
pub fn expectile_loss<S: Scalar>(u: S, tau: S) -> S {
    let w = if u < S::zero() { S::one() - tau } else { tau };
    w * u * u
}

/// Derivative of [`expectile_loss`] with respect to `u`.
pub fn expectile_grad<S: Scalar>(u: S, tau: S) -> S {
    let w = if u < S::zero() { S::one() - tau } else { tau };
    S::lit(2.0) * w * u
}

pub fn mean<S: Scalar>(x: &[S]) -> S {
    if x.is_empty() {
        return S::zero();
    }
    x.iter().fold(S::zero(), |a, &b| a + b) / S::lit(x.len() as f64)
}

/// Population standard deviation.
pub fn std_dev<S: Scalar>(x: &[S]) -> S {
    if x.is_empty() {
        return S::zero();
    }
    let m = mean(x);
    (x.iter().fold(S::zero(), |a, &v| a + (v - m) * (v - m)) / S::lit(x.len() as f64)).sqrt()
}

/// Affine state normalization `(s - shift) * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<S> {
    pub shift: Vec<S>,
    pub scale: Vec<S>,
}

impl<S: Scalar> Normalizer<S> {
    pub fn identity(dim: usize) -> Self {
        Normalizer { shift: vec![S::zero(); dim], scale: vec![S::one(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply_into(&self, s: &[S], out: &mut Vec<S>) {
        out.extend(s.iter().zip(&self.shift).zip(&self.scale).map(|((&v, &m), &k)| (v - m) * k));
    }

    pub fn apply(&self, s: &[S]) -> Vec<S> {
        let mut out = Vec::with_capacity(s.len());
        self.apply_into(s, &mut out);
        out
    }
}
