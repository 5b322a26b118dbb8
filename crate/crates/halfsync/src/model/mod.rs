//! Stacked-LSTM sequence model with a per-timestep fully-connected head,
//! trained by truncated BPTT on a scaled hinge loss.
//!
//! The network maps a `[B, T, D]` batch of channel traces to a `[B, T, 1]`
//! disruptivity trace: `n` LSTM layers (standard input/forget/output gates
//! and tanh candidate, zero initial state) feed a shared FC+ReLU layer and a
//! linear head applied independently at every timestep. Parameters live in
//! one flat vector with a fixed block layout so the optimizer, collectives,
//! and checkpoints can treat them uniformly.

mod backward;
mod forward;

pub use backward::bprop;
pub use forward::{fprop, ForwardCache, StepCache};

use crate::numerics::{Precision, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Network shape and regularization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input channels per timestep (D).
    pub feature_dim: usize,
    /// Hidden units per LSTM layer.
    pub hidden: usize,
    pub lstm_layers: usize,
    pub fc_hidden: usize,
    /// BPTT chunk length; hidden state resets at every chunk boundary.
    pub seq_len: usize,
    pub l2: f64,
    /// Keep probability for variational recurrent dropout; 1.0 disables it.
    pub dropout_keep: f64,
    /// Timesteps before a disruption that are labelled positive.
    pub target_horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 9,
            hidden: 200,
            lstm_layers: 1,
            fc_hidden: 200,
            seq_len: 128,
            l2: 0.0,
            dropout_keep: 1.0,
            target_horizon: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("lstm_layers", self.lstm_layers),
            ("fc_hidden", self.fc_hidden),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "model.dropout_keep must be in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config("model.l2 must be non-negative".into()));
        }
        Ok(())
    }

    /// Input width of LSTM layer `l`: channels for the first layer, the
    /// hidden width for the rest.
    pub fn in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.feature_dim
        } else {
            self.hidden
        }
    }
}

/// Total trainable parameters: per LSTM layer `4*(in*h + h*h + h)`, then the
/// FC layer `h*fc + fc` and the scalar head `fc + 1`.
pub fn count_params(config: &ModelConfig) -> usize {
    let h = config.hidden;
    let mut n = 0;
    for l in 0..config.lstm_layers {
        n += 4 * (config.in_dim(l) * h + h * h + h);
    }
    n += config.hidden * config.fc_hidden + config.fc_hidden;
    n += config.fc_hidden + 1;
    n
}

/// Byte offsets (element offsets, really) of every parameter block in the
/// flat vector. Per layer the order is W (input weights, `[in, 4h]`),
/// U (recurrent weights, `[h, 4h]`), b (`[4h]`); gate columns within the
/// `4h` axis are ordered input, forget, candidate, output. After the LSTM
/// stack: FC weights `[h, fc]`, FC bias `[fc]`, head weights `[fc, 1]`,
/// head bias `[1]`.
#[derive(Debug, Clone)]
pub struct Layout {
    w: Vec<std::ops::Range<usize>>,
    u: Vec<std::ops::Range<usize>>,
    b: Vec<std::ops::Range<usize>>,
    fc_w: std::ops::Range<usize>,
    fc_b: std::ops::Range<usize>,
    head_w: std::ops::Range<usize>,
    head_b: std::ops::Range<usize>,
    total: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Layout {
        let h = config.hidden;
        let mut cursor = 0;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for l in 0..config.lstm_layers {
            w.push(take(config.in_dim(l) * 4 * h));
            u.push(take(h * 4 * h));
            b.push(take(4 * h));
        }
        let fc_w = take(h * config.fc_hidden);
        let fc_b = take(config.fc_hidden);
        let head_w = take(config.fc_hidden);
        let head_b = take(1);
        Layout { w, u, b, fc_w, fc_b, head_w, head_b, total: cursor }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn w(&self, layer: usize) -> std::ops::Range<usize> {
        self.w[layer].clone()
    }

    pub fn u(&self, layer: usize) -> std::ops::Range<usize> {
        self.u[layer].clone()
    }

    pub fn b(&self, layer: usize) -> std::ops::Range<usize> {
        self.b[layer].clone()
    }

    pub fn fc_w(&self) -> std::ops::Range<usize> {
        self.fc_w.clone()
    }

    pub fn fc_b(&self) -> std::ops::Range<usize> {
        self.fc_b.clone()
    }

    pub fn head_w(&self) -> std::ops::Range<usize> {
        self.head_w.clone()
    }

    pub fn head_b(&self) -> std::ops::Range<usize> {
        self.head_b.clone()
    }

    /// Ranges of all weight matrices (biases excluded), the set the L2
    /// penalty applies to.
    pub fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut r: Vec<_> = self.w.iter().chain(&self.u).cloned().collect();
        r.push(self.fc_w.clone());
        r.push(self.head_w.clone());
        r
    }
}

/// Flat parameter vector plus the config that gives it shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub data: Vec<f64>,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Parameters {
        Parameters { config: config.clone(), data: vec![0.0; count_params(config)] }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Quantize every parameter to `p` in place (used to install master
    /// weights at the update precision).
    pub fn quantize(&mut self, p: Precision) {
        for v in &mut self.data {
            *v = p.quantize(*v);
        }
    }
}

/// Random initialization: each weight block uniform in
/// `(-1/sqrt(fan_in), +1/sqrt(fan_in))`, forget-gate biases 1, all other
/// biases 0. Draws come from a seeded ChaCha stream in layout order, so the
/// result is a pure function of `(config, seed)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Parameters {
    let layout = Layout::new(config);
    let mut data = vec![0.0; layout.total()];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let h = config.hidden;

    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, data: &mut Vec<f64>| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for i in range {
            data[i] = rng.gen_range(-bound..bound);
        }
    };

    for l in 0..config.lstm_layers {
        fill(layout.w(l), config.in_dim(l), &mut data);
        fill(layout.u(l), h, &mut data);
        // Biases stay zero except the forget-gate block.
        let b = layout.b(l);
        for j in h..2 * h {
            data[b.start + j] = 1.0;
        }
    }
    fill(layout.fc_w(), h, &mut data);
    fill(layout.head_w(), config.fc_hidden, &mut data);

    Parameters { config: config.clone(), data }
}

/// Gradient of the scaled loss; `scale_applied` records the loss-scale
/// factor currently multiplied into the values.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub data: Vec<f64>,
    pub scale_applied: f64,
}

/// Divide the loss-scale factor back out, at fp32 or wider (an fp16 request
/// is promoted so descaling can never overflow or underflow values that the
/// wire format could carry).
pub fn descale(g: &mut Gradients, precision: Precision) {
    let p = if precision == Precision::Fp16 { Precision::Fp32 } else { precision };
    if g.scale_applied != 1.0 {
        let alpha = g.scale_applied;
        for v in &mut g.data {
            *v = p.div(*v, alpha);
        }
    }
    g.scale_applied = 1.0;
}

/// Scaled hinge loss with L2: `alpha * mean(max(0, 1 - t*y)) +
/// alpha * l2 * sum(w^2)` over the weight matrices (biases exempt). The
/// scalar is computed in double; it feeds metrics, while its gradient comes
/// from [`bprop`] at the policy precision.
pub fn hinge_loss(
    outputs: &Tensor,
    targets: &[f64],
    alpha: f64,
    l2: f64,
    params: &Parameters,
) -> Result<f64> {
    if outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "outputs {} vs targets {}",
            outputs.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::ShapeMismatch("empty loss batch".into()));
    }
    let mut sum = 0.0;
    for (&y, &t) in outputs.data().iter().zip(targets) {
        sum += (1.0 - t * y).max(0.0);
    }
    let mut loss = alpha * sum / targets.len() as f64;
    if l2 > 0.0 {
        let layout = params.layout();
        let mut sq = 0.0;
        for r in layout.weight_ranges() {
            for &w in &params.data[r] {
                sq += w * w;
            }
        }
        loss += alpha * l2 * sq;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, h: usize, layers: usize, fc: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: d,
            hidden: h,
            lstm_layers: layers,
            fc_hidden: fc,
            seq_len: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn count_params_frozen_cases() {
        // One layer, D=9, h=200: 4*(9*200 + 200*200 + 200) = 168_000 for the
        // LSTM block alone.
        let c = cfg(9, 200, 1, 200);
        let lstm_only = 4 * (9 * 200 + 200 * 200 + 200);
        assert_eq!(lstm_only, 168_000);
        assert_eq!(count_params(&c), 168_000 + 200 * 200 + 200 + 200 + 1);

        // Two layers with fc 200: hand-summed closed form.
        let c2 = cfg(9, 200, 2, 200);
        assert_eq!(count_params(&c2), 529_201);

        // Deep stacks used by the capacity table.
        let c29 = cfg(9, 200, 29, 200);
        assert_eq!(count_params(&c29), 9_190_801);
        assert!((9.0e6..=9.3e6).contains(&(count_params(&c29) as f64)));
        let c58 = cfg(9, 200, 58, 200);
        assert_eq!(count_params(&c58), 18_494_001);
        // Within 2% of the reference 18.2e6 figure.
        assert!((count_params(&c58) as f64 - 18.2e6).abs() / 18.2e6 < 0.02);
    }

    #[test]
    fn layout_walk_matches_count_for_random_configs() {
        // The layout's running cursor is an independent tally of the same
        // quantity count_params computes in closed form.
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = |m: usize| {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 33) as usize % m) + 1
        };
        for _ in 0..50 {
            let c = cfg(next(12), next(40), next(5), next(30));
            let layout = Layout::new(&c);
            assert_eq!(layout.total(), count_params(&c), "{c:?}");
            // Blocks tile [0, total) without gaps or overlap.
            let mut ranges: Vec<_> = (0..c.lstm_layers)
                .flat_map(|l| [layout.w(l), layout.u(l), layout.b(l)])
                .collect();
            ranges.extend([layout.fc_w(), layout.fc_b(), layout.head_w(), layout.head_b()]);
            ranges.sort_by_key(|r| r.start);
            let mut cursor = 0;
            for r in ranges {
                assert_eq!(r.start, cursor);
                cursor = r.end;
            }
            assert_eq!(cursor, layout.total());
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = cfg(4, 8, 2, 6);
        let a = init_params(&c, 7);
        let b = init_params(&c, 7);
        assert_eq!(a.data, b.data);
        let other = init_params(&c, 8);
        assert_ne!(a.data, other.data);

        let layout = a.layout();
        for l in 0..c.lstm_layers {
            let bound = 1.0 / (c.in_dim(l) as f64).sqrt();
            for &v in &a.data[layout.w(l)] {
                assert!(v.abs() < bound);
            }
            // Forget-gate biases are 1, the rest 0.
            let b_range = layout.b(l);
            for j in 0..4 * c.hidden {
                let v = a.data[b_range.start + j];
                if (c.hidden..2 * c.hidden).contains(&j) {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        for &v in &a.data[layout.fc_b()] {
            assert_eq!(v, 0.0);
        }
        assert_eq!(a.data[layout.head_b()][0], 0.0);
    }

    #[test]
    fn hinge_loss_forced_values() {
        let c = cfg(2, 2, 1, 2);
        let p = Parameters::zeros(&c);
        let y = |vals: &[f64]| Tensor::new(&[vals.len()], vals.to_vec(), Precision::Fp64).unwrap();
        // Margin exactly met.
        assert_eq!(hinge_loss(&y(&[1.0]), &[1.0], 1.0, 0.0, &p).unwrap(), 0.0);
        // t=1, y=0 with the scale 10 applied.
        assert_eq!(hinge_loss(&y(&[0.0]), &[1.0], 10.0, 0.0, &p).unwrap(), 10.0);
        // Wrong-side margin.
        assert_eq!(hinge_loss(&y(&[0.5]), &[-1.0], 1.0, 0.0, &p).unwrap(), 1.5);
    }

    #[test]
    fn hinge_loss_l2_counts_weights_not_biases() {
        let c = cfg(1, 1, 1, 1);
        let mut p = Parameters::zeros(&c);
        let layout = p.layout();
        // Set one weight and one bias; only the weight should contribute.
        p.data[layout.fc_w().start] = 3.0;
        p.data[layout.b(0).start] = 5.0; // input-gate bias
        let y = Tensor::new(&[1], vec![2.0], Precision::Fp64).unwrap();
        let loss = hinge_loss(&y, &[1.0], 2.0, 0.5, &p).unwrap();
        // hinge term 0 (margin met), l2 term = alpha*l2*9 = 9.
        assert_eq!(loss, 9.0);
    }

    #[test]
    fn descale_examples() {
        let mut g = Gradients { data: vec![10.0, -20.0], scale_applied: 10.0 };
        descale(&mut g, Precision::Fp32);
        assert_eq!(g.data, vec![1.0, -2.0]);
        assert_eq!(g.scale_applied, 1.0);

        // alpha = 1 is the identity.
        let mut g = Gradients { data: vec![0.3], scale_applied: 1.0 };
        descale(&mut g, Precision::Fp64);
        assert_eq!(g.data, vec![0.3]);

        // A value near the half-precision ceiling survives descaling
        // because the division happens at fp32, not fp16.
        let mut g = Gradients { data: vec![60000.0], scale_applied: 10.0 };
        descale(&mut g, Precision::Fp16);
        assert_eq!(g.data, vec![6000.0]);
    }
}
