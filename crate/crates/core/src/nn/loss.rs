use super::Scalar;

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BceOutput<T> {
    pub loss: T,
    /// Gradient of the mean loss with respect to each logit.
    pub grad: Vec<T>,
}

/// Mean binary cross-entropy on raw logits:
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`, gradient `(sigmoid(z) - y) / N`.
pub fn bce_with_logits<T: Scalar>(logits: &[T], labels: &[T]) -> BceOutput<T> {
    assert_eq!(logits.len(), labels.len(), "one label per logit");
    if logits.is_empty() {
        return BceOutput {
            loss: T::zero(),
            grad: Vec::new(),
        };
    }
    let inv_n = T::one() / T::of(logits.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        loss = loss + z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) * inv_n);
    }
    BceOutput { loss: loss * inv_n, grad }
}
