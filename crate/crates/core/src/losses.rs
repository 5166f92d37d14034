//! ID (cross-entropy) and soft-margin triplet losses with analytic
//! gradients, plus a central finite-difference checker.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// One gradient array per input, in input order.
    pub gradients: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl TripletSample {
    pub fn new(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>) -> Result<Self> {
        if anchor.len() != positive.len() || anchor.len() != negative.len() {
            return Err(Error::DimensionMismatch(vec![anchor.len(), positive.len(), negative.len()]));
        }
        Ok(Self {
            anchor,
            positive,
            negative,
        })
    }

    /// `[anchor; positive; negative]`.
    pub fn flatten(&self) -> Vec<f64> {
        [self.anchor.as_slice(), &self.positive, &self.negative].concat()
    }

    pub fn unflatten(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values cannot split into three equal vectors",
                flat.len()
            )));
        }
        let d = flat.len() / 3;
        Self::new(flat[..d].to_vec(), flat[d..2 * d].to_vec(), flat[2 * d..].to_vec())
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log softmax(logits)[label]`, gradient `softmax - onehot(label)`.
pub fn id_loss(logits: &[f64], label: usize) -> Result<LossValue> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("logits must be finite".into()));
    }
    let (argmax, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, z)| if z > best.1 { (i, z) } else { best });
    // The max term contributes exactly 1; ln_1p keeps precision for confident logits.
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    let log_sum = rest.ln_1p();
    let value = -(logits[label] - max - log_sum);
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - max - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok(LossValue {
        value: value.max(0.0),
        gradients: vec![grad],
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `softplus(|a - p|² - |a - n|²)`. Gradients are returned for anchor,
/// positive and negative.
pub fn triplet_loss_soft(t: &TripletSample) -> LossValue {
    let gap = squared_distance(&t.anchor, &t.positive) - squared_distance(&t.anchor, &t.negative);
    let s = sigmoid(gap);
    let d = t.anchor.len();
    let mut ga = Vec::with_capacity(d);
    let mut gp = Vec::with_capacity(d);
    let mut gn = Vec::with_capacity(d);
    for i in 0..d {
        let (a, p, n) = (t.anchor[i], t.positive[i], t.negative[i]);
        ga.push(2.0 * s * (n - p));
        gp.push(-2.0 * s * (a - p));
        gn.push(2.0 * s * (a - n));
    }
    LossValue {
        value: softplus(gap),
        gradients: vec![ga, gp, gn],
    }
}

/// Maximum over coordinates of `|analytic - numeric| / (|numeric| + 1e-12)`
/// with central differences of step `eps`. `loss` maps a flat input to its
/// value and flat gradient.
pub fn finite_diff_check<F>(loss: F, inputs: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("step {eps} must be positive")));
    }
    let (_, analytic) = loss(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Shape {
            expected: format!("{} gradient entries", inputs.len()),
            actual: format!("{}", analytic.len()),
        });
    }
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        probe[i] = inputs[i] + eps;
        let (up, _) = loss(&probe)?;
        probe[i] = inputs[i] - eps;
        let (down, _) = loss(&probe)?;
        probe[i] = inputs[i];
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / (numeric.abs() + 1e-12));
    }
    Ok(worst)
}

/// [`finite_diff_check`] adapter for [`triplet_loss_soft`] over a flattened
/// `[a; p; n]`.
pub fn triplet_flat(flat: &[f64]) -> Result<(f64, Vec<f64>)> {
    let t = TripletSample::unflatten(flat)?;
    let l = triplet_loss_soft(&t);
    Ok((l.value, l.gradients.concat()))
}

/// [`finite_diff_check`] adapter for [`id_loss`] with a fixed label.
pub fn id_flat(label: usize) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> {
    move |logits| {
        let l = id_loss(logits, label)?;
        Ok((l.value, l.gradients.concat()))
    }
}
