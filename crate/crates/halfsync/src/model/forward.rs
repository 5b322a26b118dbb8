use super::{Layout, ModelConfig, Parameters};
use crate::numerics::{elementwise, matmul, ElemOp, Precision, PrecisionPolicy, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Per-(layer, timestep) activations retained for BPTT.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// Previous hidden state after the dropout mask — the operand that the
    /// recurrent matmul actually saw.
    pub h_prev_dropped: Tensor,
    pub c_prev: Vec<f64>,
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_g: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Tensor,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub steps: usize,
    /// Layer-0 inputs per timestep, `[B, D]`, already at math precision.
    pub x_steps: Vec<Tensor>,
    /// Recurrent dropout masks per layer, `[B, h]` with values in
    /// `{0, 1/keep}`; empty when dropout is off.
    pub masks: Vec<Tensor>,
    /// `lstm[layer][t]`.
    pub lstm: Vec<Vec<StepCache>>,
    /// FC pre-activations per timestep, `[B, fc]`.
    pub fc_pre: Vec<Tensor>,
    /// FC activations (post-ReLU) per timestep.
    pub fc_act: Vec<Tensor>,
    /// Model outputs, `[B, T]`.
    pub outputs: Tensor,
}

/// Weight blocks materialized as tensors at math precision, shared by the
/// forward and backward walks.
pub(super) struct WeightViews {
    pub w: Vec<Tensor>,      // [in, 4h]
    pub u: Vec<Tensor>,      // [h, 4h]
    pub b: Vec<Tensor>,      // [1, 4h]
    pub fc_w: Tensor,        // [h, fc]
    pub fc_b: Tensor,        // [1, fc]
    pub head_w: Tensor,      // [fc, 1]
    pub head_b: Tensor,      // [1, 1]
}

impl WeightViews {
    pub fn new(params: &Parameters, layout: &Layout, math: Precision) -> Result<WeightViews> {
        let c = &params.config;
        let h = c.hidden;
        let block = |range: std::ops::Range<usize>, shape: &[usize]| {
            Tensor::new(shape, params.data[range].to_vec(), math)
        };
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for l in 0..c.lstm_layers {
            w.push(block(layout.w(l), &[c.in_dim(l), 4 * h])?);
            u.push(block(layout.u(l), &[h, 4 * h])?);
            b.push(block(layout.b(l), &[1, 4 * h])?);
        }
        Ok(WeightViews {
            w,
            u,
            b,
            fc_w: block(layout.fc_w(), &[h, c.fc_hidden])?,
            fc_b: block(layout.fc_b(), &[1, c.fc_hidden])?,
            head_w: block(layout.head_w(), &[c.fc_hidden, 1])?,
            head_b: block(layout.head_b(), &[1, 1])?,
        })
    }
}

fn batch_dims(config: &ModelConfig, x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [b, t, d] if *t == config.seq_len && *d == config.feature_dim => Ok((*b, *t)),
        other => Err(Error::ShapeMismatch(format!(
            "batch shape {:?} vs model [B, {}, {}]",
            other, config.seq_len, config.feature_dim
        ))),
    }
}

/// Draw the per-sequence recurrent dropout masks: one `[B, h]` mask per
/// layer, each element `1/keep` with probability `keep`, else 0. The draw
/// order (layer, row, column) is fixed, making masks a pure function of the
/// seed.
fn draw_masks(
    config: &ModelConfig,
    batch: usize,
    seed: u64,
    math: Precision,
) -> Result<Vec<Tensor>> {
    let keep = config.dropout_keep;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let inv = math.quantize(1.0 / keep);
    let mut masks = Vec::with_capacity(config.lstm_layers);
    for _ in 0..config.lstm_layers {
        let data = (0..batch * config.hidden)
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        masks.push(Tensor::new(&[batch, config.hidden], data, math)?);
    }
    Ok(masks)
}

/// Forward pass over one `[B, T, D]` batch. Returns per-timestep outputs
/// `[B, T]` and the cache for [`super::bprop`]. All arithmetic follows
/// `policy` (math precision per elementary op, accumulator precision inside
/// matmul); dropout is applied only in `train_mode` and only on the
/// recurrent path.
pub fn fprop(
    params: &Parameters,
    x: &Tensor,
    policy: &PrecisionPolicy,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(Tensor, ForwardCache)> {
    let config = &params.config;
    config.validate()?;
    let (batch, steps) = batch_dims(config, x)?;
    let layout = params.layout();
    if params.data.len() != layout.total() {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector {} vs layout {}",
            params.data.len(),
            layout.total()
        )));
    }
    let math = policy.math;
    let h = config.hidden;
    let weights = WeightViews::new(params, &layout, math)?;

    // Slice the [B, T, D] batch into per-timestep [B, D] tensors.
    let d = config.feature_dim;
    let mut x_steps = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut data = Vec::with_capacity(batch * d);
        for b in 0..batch {
            let start = b * steps * d + t * d;
            data.extend_from_slice(&x.data()[start..start + d]);
        }
        x_steps.push(Tensor::new(&[batch, d], data, math)?);
    }

    let use_dropout = train_mode && config.dropout_keep < 1.0;
    let masks = if use_dropout {
        draw_masks(config, batch, dropout_seed, math)?
    } else {
        Vec::new()
    };

    let zeros_h = Tensor::zeros(&[batch, h], math);
    let mut lstm: Vec<Vec<StepCache>> = vec![Vec::with_capacity(steps); config.lstm_layers];
    let mut fc_pre = Vec::with_capacity(steps);
    let mut fc_act = Vec::with_capacity(steps);
    let mut out = vec![0.0; batch * steps];

    for t in 0..steps {
        for l in 0..config.lstm_layers {
            let x_in = if l == 0 { &x_steps[t] } else { &lstm[l - 1][t].h };
            let (h_prev, c_prev): (&Tensor, &[f64]) = if t == 0 {
                (&zeros_h, zeros_h.data())
            } else {
                (&lstm[l][t - 1].h, lstm[l][t - 1].c.as_slice())
            };
            let h_prev_dropped = if use_dropout {
                elementwise(ElemOp::Mul, &[h_prev, &masks[l]], policy)?
            } else {
                h_prev.clone()
            };

            // pre = x W + h U + b, rounded per elementary op.
            let xw = matmul(x_in, &weights.w[l], policy)?;
            let hu = matmul(&h_prev_dropped, &weights.u[l], policy)?;
            let sum = elementwise(ElemOp::Add, &[&xw, &hu], policy)?;
            let pre = elementwise(ElemOp::Add, &[&sum, &weights.b[l]], policy)?;

            // Gate blocks: [i | f | g | o], each [B, h].
            let slice_gate = |g: usize| -> Result<Tensor> {
                let mut data = Vec::with_capacity(batch * h);
                for b in 0..batch {
                    let row = pre.row(b);
                    data.extend_from_slice(&row[g * h..(g + 1) * h]);
                }
                Tensor::new(&[batch, h], data, math)
            };
            let gate_i = elementwise(ElemOp::Sigmoid, &[&slice_gate(0)?], policy)?;
            let gate_f = elementwise(ElemOp::Sigmoid, &[&slice_gate(1)?], policy)?;
            let gate_g = elementwise(ElemOp::Tanh, &[&slice_gate(2)?], policy)?;
            let gate_o = elementwise(ElemOp::Sigmoid, &[&slice_gate(3)?], policy)?;

            // c = f*c_prev + i*g, h = o*tanh(c).
            let mut c = vec![0.0; batch * h];
            for j in 0..batch * h {
                let fc_ = math.mul(gate_f.data()[j], c_prev[j]);
                let ig = math.mul(gate_i.data()[j], gate_g.data()[j]);
                c[j] = math.add(fc_, ig);
            }
            let tanh_c: Vec<f64> = c.iter().map(|&v| math.quantize(v.tanh())).collect();
            let mut h_data = vec![0.0; batch * h];
            for j in 0..batch * h {
                h_data[j] = math.mul(gate_o.data()[j], tanh_c[j]);
            }
            if let Some(j) = h_data.iter().position(|v| v.is_nan()) {
                return Err(Error::NumericFault(format!(
                    "NaN hidden state at layer {l}, timestep {t}, element {j}"
                )));
            }
            let h_t = Tensor::new(&[batch, h], h_data, math)?;

            // Built as a local first: the literal still borrows lstm (via
            // c_prev) and the push needs it mutably.
            let step = StepCache {
                h_prev_dropped,
                c_prev: c_prev.to_vec(),
                gate_i: gate_i.data().to_vec(),
                gate_f: gate_f.data().to_vec(),
                gate_g: gate_g.data().to_vec(),
                gate_o: gate_o.data().to_vec(),
                c,
                tanh_c,
                h: h_t,
            };
            lstm[l].push(step);
        }

        // FC + ReLU, then the linear head, on the top layer's hidden state.
        let top = &lstm[config.lstm_layers - 1][t].h;
        let z = matmul(top, &weights.fc_w, policy)?;
        let pre = elementwise(ElemOp::Add, &[&z, &weights.fc_b], policy)?;
        let act = elementwise(ElemOp::Relu, &[&pre], policy)?;
        let y = matmul(&act, &weights.head_w, policy)?;
        let y = elementwise(ElemOp::Add, &[&y, &weights.head_b], policy)?;
        if let Some(b) = y.data().iter().position(|v| v.is_nan()) {
            return Err(Error::NumericFault(format!(
                "NaN output at head, timestep {t}, batch row {b}"
            )));
        }
        for b in 0..batch {
            out[b * steps + t] = y.data()[b];
        }
        fc_pre.push(pre);
        fc_act.push(act);
    }

    let outputs = Tensor::new(&[batch, steps], out, math)?;
    let cache = ForwardCache {
        batch,
        steps,
        x_steps,
        masks,
        lstm,
        fc_pre,
        fc_act,
        outputs: outputs.clone(),
    };
    Ok((outputs, cache))
}
