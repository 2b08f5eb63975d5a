//! Naive reference implementations used as test oracles. Written for clarity,
//! not speed; they share no code with the library.
#![allow(dead_code)]

/// Direct nested-loop convolution over `[N, Ci, H, W]` with kernel `[Co, Ci, KH, KW]`.
pub fn conv2d(
    input: &[f64],
    in_shape: [usize; 4],
    kernel: &[f64],
    k_shape: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, w] = in_shape;
    let [co, _, kh, kw] = k_shape;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = input[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                acc += v * kernel[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

/// `x [N, D] * w^T [D, O] + b`.
pub fn dense(x: &[f64], n: usize, d: usize, w: &[f64], o: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        for k in 0..o {
            let mut acc = b[k];
            for j in 0..d {
                acc += x[i * d + j] * w[k * d + j];
            }
            out[i * o + k] = acc;
        }
    }
    out
}

/// Textbook BCE through an explicit sigmoid, probabilities clamped away from 0 and 1,
/// summed over classes and averaged over rows.
pub fn bce(logits: &[f64], targets: &[f64], rows: usize) -> f64 {
    let clamp = 1e-12;
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let p = (1.0 / (1.0 + (-z).exp())).clamp(clamp, 1.0 - clamp);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / rows as f64
}

/// Whether item `j` ranks at or above item `i` (higher score, or equal score and lower index).
fn at_or_above(scores: &[f64], j: usize, i: usize) -> bool {
    scores[j] > scores[i] || (scores[j] == scores[i] && j <= i)
}

/// AP as the mean over positives of the precision at the cutoff where that
/// positive enters; each cutoff is found by scanning every item (O(N^2)).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &i in &positives {
        let retrieved = (0..scores.len()).filter(|&j| at_or_above(scores, j, i)).count();
        let hits = positives.iter().filter(|&&j| at_or_above(scores, j, i)).count();
        sum += hits as f64 / retrieved as f64;
    }
    Some(sum / positives.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub map: Option<f64>,
    pub op: Option<f64>,
    pub cp: Option<f64>,
    pub or_: Option<f64>,
    pub cr: Option<f64>,
    pub of1: Option<f64>,
    pub cf1: Option<f64>,
}

fn harmonic(p: Option<f64>, r: Option<f64>) -> Option<f64> {
    let (p, r) = (p?, r?);
    Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Everything computed with plain counting loops. `scores` and `targets` are row-major `n x c`;
/// a class is predicted when its score is at least `threshold`.
pub fn aggregates(scores: &[f64], targets: &[bool], n: usize, c: usize, threshold: f64) -> (Aggregates, Vec<Option<f64>>) {
    let mut ap = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for j in 0..c {
        let col: Vec<f64> = (0..n).map(|i| scores[i * c + j]).collect();
        let lab: Vec<bool> = (0..n).map(|i| targets[i * c + j]).collect();
        ap.push(average_precision(&col, &lab));
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..n {
            let predicted = col[i] >= threshold;
            match (predicted, lab[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp > 0 {
            precisions.push(tp as f64 / (tp + fp) as f64);
        }
        if tp + fn_ > 0 {
            recalls.push(tp as f64 / (tp + fn_) as f64);
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let defined: Vec<f64> = ap.iter().flatten().copied().collect();
    let op = (tp_all + fp_all > 0).then(|| tp_all as f64 / (tp_all + fp_all) as f64);
    let or_ = (tp_all + fn_all > 0).then(|| tp_all as f64 / (tp_all + fn_all) as f64);
    let cp = mean(&precisions);
    let cr = mean(&recalls);
    let agg = Aggregates {
        map: mean(&defined),
        op,
        cp,
        or_,
        cr,
        of1: harmonic(op, or_),
        cf1: harmonic(cp, cr),
    };
    (agg, ap)
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}
