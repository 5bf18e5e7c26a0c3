//! Softmax and loss helpers operating on plain slices.

/// Numerically stabilized softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(values: &mut [f32]) {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    values.iter_mut().for_each(|v| *v *= inv);
}

/// `log(softmax(logits))`, computed without forming the probabilities first.
pub fn log_softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
    logits.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over a `[batch, classes]` logit block and the gradient
/// of that mean with respect to the logits.
pub fn cross_entropy(logits: &[f32], classes: usize, labels: &[usize]) -> (f32, Vec<f32>) {
    assert_eq!(logits.len(), classes * labels.len());
    let batch = labels.len() as f32;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let logp = log_softmax(row);
        loss -= logp[label] as f64;
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, lp) in g.iter_mut().zip(&logp) {
            *gj = lp.exp() / batch;
        }
        g[label] -= 1.0 / batch;
    }
    ((loss / labels.len() as f64) as f32, grad)
}
