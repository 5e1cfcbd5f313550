use rand::Rng;

use super::ops::{affine, affine_backward, axpy, dot, sigmoid, silu, silu_grad, softmax_in_place};
use super::{Model, ModelParams};
use crate::batching::PaddedBatch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct LstmTrace {
    hidden_dim: usize,
    /// Activated gates `[i, f, g, o]`, `B×T×4H`.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    hidden: Vec<f64>,
}

/// Activations cached by [`forward`] for [`backward`]. Padded timesteps hold zeros and are
/// never read.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    lengths: Vec<usize>,
    max_len: usize,
    input: Vec<f64>,
    proj_pre: Vec<f64>,
    mask_in: Option<Vec<f64>>,
    lstm_in: Vec<f64>,
    layers: Vec<LstmTrace>,
    dense_in: Vec<f64>,
    mask_mid: Option<Vec<f64>>,
    dense_pre: Vec<f64>,
    mask_out: Option<Vec<f64>>,
    output_in: Vec<f64>,
    outputs: Vec<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// `B×O` model outputs (predictions or class probabilities).
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Input to the output layer (after the last SiLU and dropout), `B×dense_hidden`.
    pub fn output_layer_input(&self) -> &[f64] {
        &self.output_in
    }
}

fn check_finite(layer: impl Into<String>, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.into(),
        })
    }
}

/// Inverted dropout multipliers (`0` or `1/(1-p)`) for the listed positions.
fn draw_mask(
    len: usize,
    p: f64,
    positions: impl Iterator<Item = std::ops::Range<usize>>,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    let mut mask = vec![0.0; len];
    for range in positions {
        for m in &mut mask[range] {
            *m = if rng.random::<f64>() < p { 0.0 } else { keep };
        }
    }
    mask
}

fn apply_mask(v: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (x, k) in v.iter_mut().zip(m) {
            *x *= k;
        }
    }
}

/// Runs the network on a padded batch. Each sequence is read only up to its valid length and the
/// recurrent output at its last valid frame feeds the head, so padding never affects results.
pub fn forward(
    model: &Model,
    batch: &PaddedBatch,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let cfg = &model.config;
    let p = &model.params;
    if batch.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "batch feature dim {} but model expects {}",
            batch.dim(),
            cfg.input_dim
        )));
    }
    let nb = batch.batch_size();
    let tmax = batch.max_len();
    let lengths = batch.lengths().to_vec();
    let (d_proj, d_hid, d_dense, d_out) = (
        cfg.projection_dim,
        cfg.lstm_hidden,
        cfg.dense_hidden,
        cfg.output_dim(),
    );
    let dropout = mode == Mode::Train && cfg.dropout_enabled;
    let valid_rows = |width: usize| {
        let lengths = lengths.clone();
        (0..nb).map(move |b| b * tmax * width..(b * tmax + lengths[b]) * width)
    };

    // projection + SiLU
    let mut proj_pre = vec![0.0; nb * tmax * d_proj];
    let mut lstm_in = vec![0.0; nb * tmax * d_proj];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            let off = (b * tmax + t) * d_proj;
            let z = &mut proj_pre[off..off + d_proj];
            affine(z, &p.projection.weight.data, &p.projection.bias.data, batch.frame(b, t));
            for (a, &zv) in lstm_in[off..off + d_proj].iter_mut().zip(z.iter()) {
                *a = silu(zv);
            }
        }
    }
    let mask_in = (dropout && cfg.dropout_in > 0.0)
        .then(|| draw_mask(lstm_in.len(), cfg.dropout_in, valid_rows(d_proj), rng));
    apply_mask(&mut lstm_in, &mask_in);
    check_finite("projection", &lstm_in)?;

    // recurrent stack
    let mut layers: Vec<LstmTrace> = Vec::with_capacity(cfg.lstm_layers);
    for (l, lp) in p.lstm.iter().enumerate() {
        let (x_all, d_x) = match l {
            0 => (&lstm_in, d_proj),
            _ => (&layers[l - 1].hidden, d_hid),
        };
        let h4 = 4 * d_hid;
        let mut tr = LstmTrace {
            hidden_dim: d_hid,
            gates: vec![0.0; nb * tmax * h4],
            cells: vec![0.0; nb * tmax * d_hid],
            tanh_cells: vec![0.0; nb * tmax * d_hid],
            hidden: vec![0.0; nb * tmax * d_hid],
        };
        let zeros = vec![0.0; d_hid];
        let mut pre = vec![0.0; h4];
        let mut c_new = vec![0.0; d_hid];
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..len {
                let bt = b * tmax + t;
                let x = &x_all[bt * d_x..(bt + 1) * d_x];
                let (h_prev, c_prev) = if t == 0 {
                    (&zeros[..], &zeros[..])
                } else {
                    let prev = (bt - 1) * d_hid..bt * d_hid;
                    (&tr.hidden[prev.clone()], &tr.cells[prev])
                };
                for (j, out) in pre.iter_mut().enumerate() {
                    *out = lp.bias.data[j]
                        + dot(&lp.w_ih.data[j * d_x..(j + 1) * d_x], x)
                        + dot(&lp.w_hh.data[j * d_hid..(j + 1) * d_hid], h_prev);
                }
                let g = &mut tr.gates[bt * h4..(bt + 1) * h4];
                for k in 0..d_hid {
                    g[k] = sigmoid(pre[k]);
                    g[d_hid + k] = sigmoid(pre[d_hid + k]);
                    g[2 * d_hid + k] = pre[2 * d_hid + k].tanh();
                    g[3 * d_hid + k] = sigmoid(pre[3 * d_hid + k]);
                }
                for k in 0..d_hid {
                    c_new[k] = g[d_hid + k] * c_prev[k] + g[k] * g[2 * d_hid + k];
                }
                let off = bt * d_hid;
                for k in 0..d_hid {
                    let tc = c_new[k].tanh();
                    tr.cells[off + k] = c_new[k];
                    tr.tanh_cells[off + k] = tc;
                    tr.hidden[off + k] = g[3 * d_hid + k] * tc;
                }
            }
        }
        check_finite(format!("lstm{l}"), &tr.hidden)?;
        layers.push(tr);
    }

    // last valid timestep of the top layer
    let top = &layers.last().expect("at least one LSTM layer").hidden;
    let mut dense_in = vec![0.0; nb * d_hid];
    for b in 0..nb {
        let off = (b * tmax + lengths[b] - 1) * d_hid;
        dense_in[b * d_hid..(b + 1) * d_hid].copy_from_slice(&top[off..off + d_hid]);
    }
    let mask_mid = (dropout && cfg.dropout_mid > 0.0)
        .then(|| draw_mask(dense_in.len(), cfg.dropout_mid, std::iter::once(0..nb * d_hid), rng));
    apply_mask(&mut dense_in, &mask_mid);

    // dense + SiLU
    let mut dense_pre = vec![0.0; nb * d_dense];
    let mut output_in = vec![0.0; nb * d_dense];
    for b in 0..nb {
        let z = &mut dense_pre[b * d_dense..(b + 1) * d_dense];
        affine(
            z,
            &p.dense.weight.data,
            &p.dense.bias.data,
            &dense_in[b * d_hid..(b + 1) * d_hid],
        );
        for (a, &zv) in output_in[b * d_dense..(b + 1) * d_dense].iter_mut().zip(z.iter()) {
            *a = silu(zv);
        }
    }
    check_finite("dense", &output_in)?;
    let mask_out = (dropout && cfg.dropout_out > 0.0).then(|| {
        draw_mask(output_in.len(), cfg.dropout_out, std::iter::once(0..nb * d_dense), rng)
    });
    apply_mask(&mut output_in, &mask_out);

    // output head
    let mut outputs = vec![0.0; nb * d_out];
    for b in 0..nb {
        let o = &mut outputs[b * d_out..(b + 1) * d_out];
        affine(
            o,
            &p.output.weight.data,
            &p.output.bias.data,
            &output_in[b * d_dense..(b + 1) * d_dense],
        );
        if cfg.is_classification() {
            softmax_in_place(o);
        }
    }
    check_finite("output", &outputs)?;

    let trace = ForwardTrace {
        lengths,
        max_len: tmax,
        input: batch.data().to_vec(),
        proj_pre,
        mask_in,
        lstm_in,
        layers,
        dense_in,
        mask_mid,
        dense_pre,
        mask_out,
        output_in,
        outputs: outputs.clone(),
    };
    Ok((outputs, trace))
}

/// Gradients of a scalar loss with respect to every parameter, given `∂loss/∂outputs`
/// (`B×O`, with respect to probabilities for the classification head).
pub fn backward(model: &Model, trace: &ForwardTrace, grad_outputs: &[f64]) -> Result<ModelParams> {
    let cfg = &model.config;
    let p = &model.params;
    let nb = trace.batch_size();
    let tmax = trace.max_len;
    let (d_in, d_proj, d_hid, d_dense, d_out) = (
        cfg.input_dim,
        cfg.projection_dim,
        cfg.lstm_hidden,
        cfg.dense_hidden,
        cfg.output_dim(),
    );
    if grad_outputs.len() != nb * d_out || trace.outputs.len() != nb * d_out {
        return Err(Error::Shape(format!(
            "output gradient has {} entries, expected {}",
            grad_outputs.len(),
            nb * d_out
        )));
    }
    if trace.layers.len() != p.lstm.len() || trace.input.len() != nb * tmax * d_in {
        return Err(Error::Shape("trace does not match model".into()));
    }
    let mut grads = p.zeros_like();

    // output layer (softmax Jacobian folded in for classification)
    let mut d_logits = grad_outputs.to_vec();
    if cfg.is_classification() {
        for b in 0..nb {
            let pr = &trace.outputs[b * d_out..(b + 1) * d_out];
            let g = &mut d_logits[b * d_out..(b + 1) * d_out];
            let s = dot(pr, g);
            for (gk, &pk) in g.iter_mut().zip(pr) {
                *gk = pk * (*gk - s);
            }
        }
    }
    let mut d_out_in = vec![0.0; nb * d_dense];
    for b in 0..nb {
        affine_backward(
            &d_logits[b * d_out..(b + 1) * d_out],
            &trace.output_in[b * d_dense..(b + 1) * d_dense],
            &p.output.weight.data,
            &mut grads.output.weight.data,
            &mut grads.output.bias.data,
            Some(&mut d_out_in[b * d_dense..(b + 1) * d_dense]),
        );
    }
    apply_mask(&mut d_out_in, &trace.mask_out);

    // dense + SiLU
    let mut d_dense_in = vec![0.0; nb * d_hid];
    for b in 0..nb {
        let dz: Vec<f64> = d_out_in[b * d_dense..(b + 1) * d_dense]
            .iter()
            .zip(&trace.dense_pre[b * d_dense..(b + 1) * d_dense])
            .map(|(g, &z)| g * silu_grad(z))
            .collect();
        affine_backward(
            &dz,
            &trace.dense_in[b * d_hid..(b + 1) * d_hid],
            &p.dense.weight.data,
            &mut grads.dense.weight.data,
            &mut grads.dense.bias.data,
            Some(&mut d_dense_in[b * d_hid..(b + 1) * d_hid]),
        );
    }
    apply_mask(&mut d_dense_in, &trace.mask_mid);

    // scatter into the top layer's last valid step
    let mut d_hidden = vec![0.0; nb * tmax * d_hid];
    for b in 0..nb {
        let off = (b * tmax + trace.lengths[b] - 1) * d_hid;
        d_hidden[off..off + d_hid].copy_from_slice(&d_dense_in[b * d_hid..(b + 1) * d_hid]);
    }

    // recurrent stack, top to bottom
    for l in (0..p.lstm.len()).rev() {
        let lp = &p.lstm[l];
        let tr = &trace.layers[l];
        let (x_all, d_x) = match l {
            0 => (&trace.lstm_in, d_proj),
            _ => (&trace.layers[l - 1].hidden, d_hid),
        };
        let h = tr.hidden_dim;
        let h4 = 4 * h;
        let gl = &mut grads.lstm[l];
        let mut d_x_all = vec![0.0; nb * tmax * d_x];
        let zeros = vec![0.0; h];
        let mut d_pre = vec![0.0; h4];
        for b in 0..nb {
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            for t in (0..trace.lengths[b]).rev() {
                let bt = b * tmax + t;
                let g = &tr.gates[bt * h4..(bt + 1) * h4];
                let tc = &tr.tanh_cells[bt * h..(bt + 1) * h];
                let (h_prev, c_prev) = if t == 0 {
                    (&zeros[..], &zeros[..])
                } else {
                    (
                        &tr.hidden[(bt - 1) * h..bt * h],
                        &tr.cells[(bt - 1) * h..bt * h],
                    )
                };
                for k in 0..h {
                    let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                    let dh = d_hidden[bt * h + k] + dh_next[k];
                    let dc = dc_next[k] + dh * o * (1.0 - tc[k] * tc[k]);
                    d_pre[k] = dc * gg * i * (1.0 - i);
                    d_pre[h + k] = dc * c_prev[k] * f * (1.0 - f);
                    d_pre[2 * h + k] = dc * i * (1.0 - gg * gg);
                    d_pre[3 * h + k] = dh * tc[k] * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
                let x = &x_all[bt * d_x..(bt + 1) * d_x];
                let dx = &mut d_x_all[bt * d_x..(bt + 1) * d_x];
                dh_next.fill(0.0);
                for (j, &a) in d_pre.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    gl.bias.data[j] += a;
                    axpy(&mut gl.w_ih.data[j * d_x..(j + 1) * d_x], a, x);
                    axpy(&mut gl.w_hh.data[j * h..(j + 1) * h], a, h_prev);
                    axpy(dx, a, &lp.w_ih.data[j * d_x..(j + 1) * d_x]);
                    axpy(&mut dh_next, a, &lp.w_hh.data[j * h..(j + 1) * h]);
                }
            }
        }
        d_hidden = d_x_all;
    }

    // input dropout, SiLU, projection
    let mut d_lstm_in = d_hidden;
    apply_mask(&mut d_lstm_in, &trace.mask_in);
    for b in 0..nb {
        for t in 0..trace.lengths[b] {
            let bt = b * tmax + t;
            let dz: Vec<f64> = d_lstm_in[bt * d_proj..(bt + 1) * d_proj]
                .iter()
                .zip(&trace.proj_pre[bt * d_proj..(bt + 1) * d_proj])
                .map(|(g, &z)| g * silu_grad(z))
                .collect();
            affine_backward(
                &dz,
                &trace.input[bt * d_in..(bt + 1) * d_in],
                &p.projection.weight.data,
                &mut grads.projection.weight.data,
                &mut grads.projection.bias.data,
                None,
            );
        }
    }
    Ok(grads)
}
