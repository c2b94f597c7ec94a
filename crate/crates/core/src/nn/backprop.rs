use crate::error::{Error, Result};
use crate::nn::{Activation, GroupKind, GroupedModel, MaskState};
use crate::tensor::Tensor2;

/// Loss gradients with respect to the effective (masked) weights and the biases.
///
/// Pruned positions carry their true gradient; the trainer is responsible
/// for never applying it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor2>,
    pub biases: Vec<Vec<f64>>,
}

enum Trace {
    Dense {
        input: Vec<f64>,
        pre: Vec<f64>,
        post: Vec<f64>,
    },
    Block {
        input: Vec<f64>,
        z1: Vec<f64>,
        u: Vec<f64>,
        z2: Vec<f64>,
        post: Vec<f64>,
    },
    Output {
        input: Vec<f64>,
    },
}

/// `out[s, o] = b[o] + sum_i w[o, i] * x[s, i]` for a batch of `n` rows.
fn affine(x: &[f64], n: usize, w: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * rows];
    for s in 0..n {
        let xs = &x[s * cols..(s + 1) * cols];
        let os = &mut out[s * rows..(s + 1) * rows];
        for (o, slot) in os.iter_mut().enumerate() {
            let wr = &w[o * cols..(o + 1) * cols];
            let mut acc = b[o];
            for (wi, xi) in wr.iter().zip(xs) {
                acc += wi * xi;
            }
            *slot = acc;
        }
    }
    out
}

/// Accumulates `dW += delta^T x`, `db += sum delta`, and returns `delta W`.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    delta: &[f64],
    rows: usize,
    cols: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * cols];
    for s in 0..n {
        let xs = &x[s * cols..(s + 1) * cols];
        let ds = &delta[s * rows..(s + 1) * rows];
        let dxs = &mut dx[s * cols..(s + 1) * cols];
        for (o, &g) in ds.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w[o * cols..(o + 1) * cols];
            let dwr = &mut dw[o * cols..(o + 1) * cols];
            for i in 0..cols {
                dwr[i] += g * xs[i];
                dxs[i] += g * wr[i];
            }
        }
    }
    dx
}

fn activate(act: Activation, z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| act.apply(v)).collect()
}

fn masked_weights(model: &GroupedModel, mask: &MaskState) -> Vec<Vec<f64>> {
    model
        .groups
        .iter()
        .zip(&mask.bits)
        .map(|(g, bits)| {
            g.weights
                .data()
                .iter()
                .zip(bits)
                .map(|(&w, &keep)| if keep { w } else { 0.0 })
                .collect()
        })
        .collect()
}

fn check_inputs(model: &GroupedModel, mask: &MaskState, batch: &Tensor2) -> Result<()> {
    mask.check_matches(model)?;
    let spec = model.spec();
    if batch.cols() != spec.input_dim {
        return Err(Error::Dimension(format!(
            "batch has {} columns, network expects {}",
            batch.cols(),
            spec.input_dim
        )));
    }
    if !batch.all_finite() {
        return Err(Error::Domain("batch contains non-finite values".into()));
    }
    Ok(())
}

fn run_forward(model: &GroupedModel, weights: &[Vec<f64>], batch: &Tensor2) -> (Vec<Trace>, Vec<f64>) {
    let act = model.spec().activation;
    let n = batch.rows();
    let mut h = batch.data().to_vec();
    let mut traces = Vec::with_capacity(model.groups.len());
    for ((d, g), w) in model.descriptors().iter().zip(&model.groups).zip(weights) {
        match d.kind {
            GroupKind::Input | GroupKind::Projection => {
                let pre = affine(&h, n, w, &g.bias, d.rows, d.cols);
                let post = activate(act, &pre);
                let input = std::mem::replace(&mut h, post.clone());
                traces.push(Trace::Dense { input, pre, post });
            }
            GroupKind::Block => {
                let width = d.cols;
                let half = width * width;
                let z1 = affine(&h, n, &w[..half], &g.bias[..width], width, width);
                let u = activate(act, &z1);
                let mut z2 = affine(&u, n, &w[half..], &g.bias[width..], width, width);
                for (z, x) in z2.iter_mut().zip(&h) {
                    *z += x;
                }
                let post = activate(act, &z2);
                let input = std::mem::replace(&mut h, post.clone());
                traces.push(Trace::Block {
                    input,
                    z1,
                    u,
                    z2,
                    post,
                });
            }
            GroupKind::Output => {
                let logits = affine(&h, n, w, &g.bias, d.rows, d.cols);
                let input = std::mem::replace(&mut h, logits);
                traces.push(Trace::Output { input });
            }
        }
    }
    (traces, h)
}

/// Logits for `batch` with pruned weights contributing exactly zero.
pub fn forward(model: &GroupedModel, mask: &MaskState, batch: &Tensor2) -> Result<Tensor2> {
    check_inputs(model, mask, batch)?;
    let weights = masked_weights(model, mask);
    let (_, logits) = run_forward(model, &weights, batch);
    let out = Tensor2::from_vec(batch.rows(), model.spec().output_dim, logits)?;
    if !out.all_finite() {
        return Err(Error::Domain("forward pass produced non-finite logits".into()));
    }
    Ok(out)
}

/// Mean softmax cross-entropy and its gradients.
pub fn loss_and_grad(
    model: &GroupedModel,
    mask: &MaskState,
    batch: &Tensor2,
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    check_inputs(model, mask, batch)?;
    let n = batch.rows();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    let k = model.spec().output_dim;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let act = model.spec().activation;
    let weights = masked_weights(model, mask);
    let (traces, logits) = run_forward(model, &weights, batch);

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut delta = vec![0.0; n * k];
    for s in 0..n {
        let row = &logits[s * k..(s + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - row[labels[s]];
        for c in 0..k {
            let p = (row[c] - log_sum).exp();
            let target = if c == labels[s] { 1.0 } else { 0.0 };
            delta[s * k + c] = (p - target) * inv_n;
        }
    }
    loss *= inv_n;

    let mut grads = Gradients {
        weights: model
            .groups
            .iter()
            .map(|g| Tensor2::zeros(g.weights.rows(), g.weights.cols()))
            .collect(),
        biases: model.groups.iter().map(|g| vec![0.0; g.bias.len()]).collect(),
    };

    for gi in (0..traces.len()).rev() {
        let d = &model.descriptors()[gi];
        let w = &weights[gi];
        let dw = grads.weights[gi].data_mut();
        let db = &mut grads.biases[gi];
        delta = match &traces[gi] {
            Trace::Output { input } => affine_backward(input, n, w, &delta, d.rows, d.cols, dw, db),
            Trace::Dense { input, pre, post } => {
                for ((g, &z), &a) in delta.iter_mut().zip(pre).zip(post) {
                    *g *= act.derivative(z, a);
                }
                affine_backward(input, n, w, &delta, d.rows, d.cols, dw, db)
            }
            Trace::Block {
                input,
                z1,
                u,
                z2,
                post,
            } => {
                let width = d.cols;
                let half = width * width;
                for ((g, &z), &a) in delta.iter_mut().zip(z2).zip(post) {
                    *g *= act.derivative(z, a);
                }
                let (dw1, dw2) = dw.split_at_mut(half);
                let (db1, db2) = db.split_at_mut(width);
                let mut du = affine_backward(u, n, &w[half..], &delta, width, width, dw2, db2);
                for ((g, &z), &a) in du.iter_mut().zip(z1).zip(u) {
                    *g *= act.derivative(z, a);
                }
                let dx = affine_backward(input, n, &w[..half], &du, width, width, dw1, db1);
                // skip connection
                delta.iter().zip(dx).map(|(skip, through)| skip + through).collect()
            }
        };
    }

    if !loss.is_finite() {
        return Err(Error::Domain(format!("non-finite loss {loss}")));
    }
    Ok((loss, grads))
}
