use super::forward::{ForwardCache, WeightViews};
use super::{Gradients, Parameters};
use crate::numerics::{matmul, PrecisionPolicy, Tensor};
use crate::{Error, Result};

/// Add `delta` into the gradient block at `range`, rounding each running sum
/// at the accumulator precision.
fn acc_into(
    grads: &mut [f64],
    range: std::ops::Range<usize>,
    delta: &Tensor,
    acc: crate::numerics::Precision,
) {
    let dst = &mut grads[range];
    debug_assert_eq!(dst.len(), delta.len());
    for (d, &s) in dst.iter_mut().zip(delta.data()) {
        *d = acc.add(*d, s);
    }
}

/// Exact BPTT gradient of the `alpha`-scaled hinge loss (plus the scaled L2
/// term) with respect to every parameter. Elementary operations round at
/// `policy.math`; matmul-shaped products follow the full policy; per-block
/// accumulation across timesteps rounds at `policy.accumulator`. The
/// returned gradients carry `scale_applied = alpha`.
pub fn bprop(
    params: &Parameters,
    cache: &ForwardCache,
    targets: &[f64],
    alpha: f64,
    policy: &PrecisionPolicy,
) -> Result<Gradients> {
    let config = &params.config;
    let (batch, steps) = (cache.batch, cache.steps);
    if targets.len() != batch * steps {
        return Err(Error::ShapeMismatch(format!(
            "targets {} vs batch {batch} x steps {steps}",
            targets.len()
        )));
    }
    if cache.lstm.len() != config.lstm_layers || cache.lstm.iter().any(|l| l.len() != steps) {
        return Err(Error::ShapeMismatch(
            "forward cache does not match the model config".into(),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("loss scale must be positive, got {alpha}")));
    }

    let math = policy.math;
    let acc = policy.accumulator;
    let h = config.hidden;
    let layout = params.layout();
    let weights = WeightViews::new(params, &layout, math)?;
    let mut grads = vec![0.0; layout.total()];

    let ones = Tensor::new(&[1, batch], vec![1.0; batch], math)?;
    // Loss seed magnitude: alpha / (B*T), rounded once. Each violated
    // margin contributes -t * seed to dL/dy.
    let seed = math.quantize(alpha / (batch * steps) as f64);

    // ---- FC + head backward, and the per-timestep dL/dh of the top layer.
    let top_layer = config.lstm_layers - 1;
    let head_w_t = weights.head_w.transposed()?;
    let fc_w_t = weights.fc_w.transposed()?;
    let mut dh_above: Vec<Tensor> = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut dy = vec![0.0; batch];
        for b in 0..batch {
            let y = cache.outputs.at2(b, t);
            let tv = targets[b * steps + t];
            if 1.0 - tv * y > 0.0 {
                dy[b] = math.mul(-tv, seed);
            }
        }
        let dy = Tensor::new(&[batch, 1], dy, math)?;

        let act = &cache.fc_act[t];
        let dwh = matmul(&act.transposed()?, &dy, policy)?;
        acc_into(&mut grads, layout.head_w(), &dwh, acc);
        let dbh = matmul(&ones, &dy, policy)?;
        acc_into(&mut grads, layout.head_b(), &dbh, acc);

        // Through the head and the ReLU gate (exact 0/1 mask).
        let dz = matmul(&dy, &head_w_t, policy)?;
        let pre = &cache.fc_pre[t];
        let dfc: Vec<f64> = dz
            .data()
            .iter()
            .zip(pre.data())
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let dfc = Tensor::new(&[batch, config.fc_hidden], dfc, math)?;

        let top_h = &cache.lstm[top_layer][t].h;
        let dwf = matmul(&top_h.transposed()?, &dfc, policy)?;
        acc_into(&mut grads, layout.fc_w(), &dwf, acc);
        let dbf = matmul(&ones, &dfc, policy)?;
        acc_into(&mut grads, layout.fc_b(), &dbf, acc);

        dh_above.push(matmul(&dfc, &fc_w_t, policy)?);
    }

    // ---- LSTM stack, top layer down, time reversed within each layer.
    for l in (0..config.lstm_layers).rev() {
        let u_t = weights.u[l].transposed()?;
        let w_t = weights.w[l].transposed()?;
        let mut dh_below: Vec<Option<Tensor>> = vec![None; steps];
        let mut dh_carry = vec![0.0; batch * h];
        let mut dc_carry = vec![0.0; batch * h];

        for t in (0..steps).rev() {
            let s = &cache.lstm[l][t];
            let n = batch * h;
            let mut dpre = vec![0.0; batch * 4 * h];
            let mut dc = vec![0.0; n];
            for j in 0..n {
                let dh = math.add(dh_above[t].data()[j], dh_carry[j]);
                let o = s.gate_o[j];
                let i = s.gate_i[j];
                let f = s.gate_f[j];
                let g = s.gate_g[j];
                let tc = s.tanh_c[j];

                let d_o = math.mul(dh, tc);
                // dc = dh*o*(1 - tanh(c)^2) + carried dc.
                let tc2 = math.mul(tc, tc);
                let dtanh = math.sub(1.0, tc2);
                let through_h = math.mul(math.mul(dh, o), dtanh);
                let dcj = math.add(through_h, dc_carry[j]);
                dc[j] = dcj;

                let d_i = math.mul(dcj, g);
                let d_f = math.mul(dcj, s.c_prev[j]);
                let d_g = math.mul(dcj, i);

                // Gate pre-activation derivatives.
                let b_row = j / h;
                let col = j % h;
                let base = b_row * 4 * h;
                dpre[base + col] = math.mul(d_i, math.mul(i, math.sub(1.0, i)));
                dpre[base + h + col] = math.mul(d_f, math.mul(f, math.sub(1.0, f)));
                dpre[base + 2 * h + col] = math.mul(d_g, math.sub(1.0, math.mul(g, g)));
                dpre[base + 3 * h + col] = math.mul(d_o, math.mul(o, math.sub(1.0, o)));
            }
            let dpre = Tensor::new(&[batch, 4 * h], dpre, math)?;

            let x_in = if l == 0 { &cache.x_steps[t] } else { &cache.lstm[l - 1][t].h };
            let dw = matmul(&x_in.transposed()?, &dpre, policy)?;
            acc_into(&mut grads, layout.w(l), &dw, acc);
            let du = matmul(&s.h_prev_dropped.transposed()?, &dpre, policy)?;
            acc_into(&mut grads, layout.u(l), &du, acc);
            let db = matmul(&ones, &dpre, policy)?;
            acc_into(&mut grads, layout.b(l), &db, acc);

            // Into the previous timestep: through U and the dropout mask on
            // the recurrent path, and through the forget gate for the cell.
            let dh_prev = matmul(&dpre, &u_t, policy)?;
            if cache.masks.is_empty() {
                dh_carry.copy_from_slice(dh_prev.data());
            } else {
                let mask = &cache.masks[l];
                for j in 0..n {
                    dh_carry[j] = math.mul(dh_prev.data()[j], mask.data()[j]);
                }
            }
            for j in 0..n {
                dc_carry[j] = math.mul(dc[j], s.gate_f[j]);
            }

            if l > 0 {
                dh_below[t] = Some(matmul(&dpre, &w_t, policy)?);
            }
        }

        if l > 0 {
            dh_above = dh_below.into_iter().map(Option::unwrap).collect();
        }
    }

    // ---- Scaled L2 term: d/dw of alpha*l2*w^2 = 2*alpha*l2*w, weights only.
    if config.l2 > 0.0 {
        let c = math.quantize(2.0 * alpha * config.l2);
        for range in layout.weight_ranges() {
            for idx in range {
                let w = math.quantize(params.data[idx]);
                grads[idx] = acc.add(grads[idx], math.mul(c, w));
            }
        }
    }

    Ok(Gradients { data: grads, scale_applied: alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_params, fprop, hinge_loss, init_params, ModelConfig};
    use crate::numerics::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_batch(c: &ModelConfig, b: usize, rng: &mut ChaCha20Rng) -> (Tensor, Vec<f64>) {
        let n = b * c.seq_len * c.feature_dim;
        let x = Tensor::new(
            &[b, c.seq_len, c.feature_dim],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            Precision::Fp64,
        )
        .unwrap();
        let t = (0..b * c.seq_len)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        (x, t)
    }

    /// Central-difference loss derivative for one parameter coordinate.
    fn numeric_grad(
        params: &Parameters,
        x: &Tensor,
        targets: &[f64],
        alpha: f64,
        idx: usize,
        eps: f64,
    ) -> f64 {
        let policy = PrecisionPolicy::fp64();
        let mut plus = params.clone();
        plus.data[idx] += eps;
        let (y, _) = fprop(&plus, x, &policy, false, 0).unwrap();
        let lp = hinge_loss(&y, targets, alpha, plus.config.l2, &plus).unwrap();
        let mut minus = params.clone();
        minus.data[idx] -= eps;
        let (y, _) = fprop(&minus, x, &policy, false, 0).unwrap();
        let lm = hinge_loss(&y, targets, alpha, minus.config.l2, &minus).unwrap();
        (lp - lm) / (2.0 * eps)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = ModelConfig {
            feature_dim: 2,
            hidden: 3,
            lstm_layers: 2,
            fc_hidden: 3,
            seq_len: 4,
            l2: 0.01,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let params = init_params(&c, 42);
        let (x, targets) = random_batch(&c, 2, &mut rng);
        let policy = PrecisionPolicy::fp64();
        let (_, cache) = fprop(&params, &x, &policy, false, 0).unwrap();
        let analytic = bprop(&params, &cache, &targets, 1.0, &policy).unwrap();

        let mut worst = 0.0f64;
        for idx in 0..count_params(&c) {
            let n = numeric_grad(&params, &x, &targets, 1.0, idx, 1e-5);
            let a = analytic.data[idx];
            let rel = (n - a).abs() / (n.abs() + a.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel < 1e-6, "coordinate {idx}: numeric {n} vs analytic {a}");
        }
        // The whole vector should be well inside the bound, not scraping it.
        assert!(worst < 1e-6);
    }

    // Same check with some hinge terms inactive (outputs pushed past the
    // margin by a large head bias) and dropout compensation off.
    #[test]
    fn finite_differences_with_inactive_margins() {
        let c = ModelConfig {
            feature_dim: 2,
            hidden: 2,
            lstm_layers: 1,
            fc_hidden: 2,
            seq_len: 3,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut params = init_params(&c, 7);
        let layout = params.layout();
        let hb = layout.head_b().start;
        params.data[hb] = 2.0; // all outputs ~2: half the margins inactive
        let (x, targets) = random_batch(&c, 2, &mut rng);
        let policy = PrecisionPolicy::fp64();
        let (y, cache) = fprop(&params, &x, &policy, false, 0).unwrap();
        // Sanity: the construction really does produce both branches.
        let margins: Vec<f64> = y
            .data()
            .iter()
            .zip(&targets)
            .map(|(&yv, &tv)| 1.0 - tv * yv)
            .collect();
        assert!(margins.iter().any(|&m| m > 0.1));
        assert!(margins.iter().any(|&m| m < -0.1));

        let analytic = bprop(&params, &cache, &targets, 1.0, &policy).unwrap();
        for idx in 0..count_params(&c) {
            let n = numeric_grad(&params, &x, &targets, 1.0, idx, 1e-5);
            let a = analytic.data[idx];
            let rel = (n - a).abs() / (n.abs() + a.abs()).max(1e-8);
            assert!(rel < 1e-6, "coordinate {idx}: numeric {n} vs analytic {a}");
        }
    }

    #[test]
    fn all_margins_met_means_zero_gradient() {
        let c = ModelConfig {
            feature_dim: 1,
            hidden: 2,
            lstm_layers: 1,
            fc_hidden: 2,
            seq_len: 2,
            ..ModelConfig::default()
        };
        let mut params = init_params(&c, 3);
        let layout = params.layout();
        params.data[layout.head_b().start] = 5.0;
        let x = Tensor::new(&[1, 2, 1], vec![0.3, -0.2], Precision::Fp64).unwrap();
        let targets = vec![1.0, 1.0]; // y ~ 5, margins 1-5 < 0 everywhere
        let policy = PrecisionPolicy::fp64();
        let (y, cache) = fprop(&params, &x, &policy, false, 0).unwrap();
        assert!(y.data().iter().all(|&v| v > 1.0));
        let g = bprop(&params, &cache, &targets, 1.0, &policy).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    // A power-of-two loss scale commutes with round-to-nearest in the
    // normal range, so at fp64 the scaled gradient is bitwise the unscaled
    // gradient times alpha; fp32 gets the documented relative tolerance.
    #[test]
    fn power_of_two_scale_is_exact_at_fp64() {
        let c = ModelConfig {
            feature_dim: 2,
            hidden: 3,
            lstm_layers: 1,
            fc_hidden: 3,
            seq_len: 4,
            l2: 0.25,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let params = init_params(&c, 5);
        let (x, targets) = random_batch(&c, 2, &mut rng);

        let policy = PrecisionPolicy::fp64();
        let (_, cache) = fprop(&params, &x, &policy, false, 0).unwrap();
        let g1 = bprop(&params, &cache, &targets, 1.0, &policy).unwrap();
        let g8 = bprop(&params, &cache, &targets, 8.0, &policy).unwrap();
        for (a, b) in g1.data.iter().zip(&g8.data) {
            assert_eq!(*b, a * 8.0);
        }
        assert_eq!(g8.scale_applied, 8.0);

        let policy = PrecisionPolicy::fp32();
        let (_, cache) = fprop(&params, &x, &policy, false, 0).unwrap();
        let g1 = bprop(&params, &cache, &targets, 1.0, &policy).unwrap();
        let g8 = bprop(&params, &cache, &targets, 8.0, &policy).unwrap();
        for (a, b) in g1.data.iter().zip(&g8.data) {
            let rel = (b / 8.0 - a).abs() / a.abs().max(1e-30);
            assert!(rel < 1e-6, "{a} vs {}", b / 8.0);
        }
    }

    #[test]
    fn alpha_ten_is_linear_to_tolerance_at_fp64() {
        let c = ModelConfig {
            feature_dim: 2,
            hidden: 4,
            lstm_layers: 2,
            fc_hidden: 4,
            seq_len: 6,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let params = init_params(&c, 6);
        let (x, targets) = random_batch(&c, 3, &mut rng);
        let policy = PrecisionPolicy::fp64();
        let (_, cache) = fprop(&params, &x, &policy, false, 0).unwrap();
        let g1 = bprop(&params, &cache, &targets, 1.0, &policy).unwrap();
        let g10 = bprop(&params, &cache, &targets, 10.0, &policy).unwrap();
        for (a, b) in g1.data.iter().zip(&g10.data) {
            let scaled = b / 10.0;
            let rel = (scaled - a).abs() / a.abs().max(1e-300);
            assert!(rel < 1e-12 || (scaled - a).abs() < 1e-300, "{a} vs {scaled}");
        }
    }

    #[test]
    fn dropout_gradient_matches_finite_differences() {
        // With a fixed mask (same seed for both fprops inside the FD), the
        // dropped network is still a deterministic function of the weights.
        let c = ModelConfig {
            feature_dim: 2,
            hidden: 3,
            lstm_layers: 1,
            fc_hidden: 2,
            seq_len: 4,
            dropout_keep: 0.5,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let params = init_params(&c, 9);
        let (x, targets) = random_batch(&c, 2, &mut rng);
        let policy = PrecisionPolicy::fp64();
        let (_, cache) = fprop(&params, &x, &policy, true, 1234).unwrap();
        let analytic = bprop(&params, &cache, &targets, 1.0, &policy).unwrap();

        for idx in (0..count_params(&c)).step_by(7) {
            let eps = 1e-5;
            let numeric = {
                let mut plus = params.clone();
                plus.data[idx] += eps;
                let (y, _) = fprop(&plus, &x, &policy, true, 1234).unwrap();
                let lp = hinge_loss(&y, &targets, 1.0, 0.0, &plus).unwrap();
                let mut minus = params.clone();
                minus.data[idx] -= eps;
                let (y, _) = fprop(&minus, &x, &policy, true, 1234).unwrap();
                let lm = hinge_loss(&y, &targets, 1.0, 0.0, &minus).unwrap();
                (lp - lm) / (2.0 * eps)
            };
            let a = analytic.data[idx];
            let rel = (numeric - a).abs() / (numeric.abs() + a.abs()).max(1e-8);
            assert!(rel < 1e-6, "coordinate {idx}: {numeric} vs {a}");
        }
    }

    #[test]
    fn target_length_is_checked() {
        let c = ModelConfig {
            feature_dim: 1,
            hidden: 1,
            lstm_layers: 1,
            fc_hidden: 1,
            seq_len: 2,
            ..ModelConfig::default()
        };
        let params = init_params(&c, 1);
        let x = Tensor::zeros(&[1, 2, 1], Precision::Fp64);
        let policy = PrecisionPolicy::fp64();
        let (_, cache) = fprop(&params, &x, &policy, false, 0).unwrap();
        assert!(bprop(&params, &cache, &[1.0], 1.0, &policy).is_err());
    }
}
