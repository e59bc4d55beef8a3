//! Full trajectory predictor: per-frame raster chunks go through the
//! capsule encoder, the kinematic state through a small dense encoder, and
//! the concatenated features through an LSTM whose last hidden state is
//! decoded into future displacements relative to the last observed
//! position.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::{encode_chunk, CapsConfig, CapsParams};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::map::sample::{Sample, STATE_FEATURES};
use crate::raster::RasterConfig;
use crate::tensor::{glorot_uniform, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub caps: CapsConfig,
    /// Observed frames per sample.
    pub rho: usize,
    /// Predicted frames per sample.
    pub tau: usize,
    pub state_features: usize,
    pub state_enc_dim: usize,
    pub hidden_dim: usize,
    pub raster: RasterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            caps: CapsConfig::default(),
            rho: 5,
            tau: 12,
            state_features: STATE_FEATURES,
            state_enc_dim: 128,
            hidden_dim: 128,
            raster: RasterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        ModelConfig {
            caps: CapsConfig {
                in_px: run.raster.out_px,
                routing_iters: run.routing_iters,
                ..CapsConfig::default()
            },
            rho: run.rho,
            tau: run.tau,
            raster: run.raster,
            ..ModelConfig::default()
        }
    }

    /// Width of the LSTM input: state encoding next to the chunk descriptor.
    pub fn lstm_in_dim(&self) -> usize {
        self.state_enc_dim + self.caps.final_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.caps.validate()?;
        self.raster.validate()?;
        if self.caps.in_px != self.raster.out_px {
            return Err(Error::Config(format!(
                "encoder expects {} px chunks but the rasterizer emits {} px",
                self.caps.in_px, self.raster.out_px
            )));
        }
        for (name, v) in [
            ("rho", self.rho),
            ("tau", self.tau),
            ("state_features", self.state_features),
            ("state_enc_dim", self.state_enc_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.state_features != STATE_FEATURES {
            return Err(Error::Config(format!(
                "state_features {} does not match the {}-value feature rows samples carry",
                self.state_features, STATE_FEATURES
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let state = self.state_enc_dim * (self.state_features + 1);
        let lstm = 4 * self.hidden_dim * (self.lstm_in_dim() + self.hidden_dim + 1);
        let dec = 2 * self.tau * (self.hidden_dim + 1);
        self.caps.param_count() + state + lstm + dec
    }
}

/// Stacked-gate LSTM weights, gate order [input, forget, cell, output].
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub caps: CapsParams,
    pub state_w: ParamId,
    pub state_b: ParamId,
    pub lstm: LstmParams,
    pub dec_w: ParamId,
    pub dec_b: ParamId,
}

impl PredictorParams {
    /// Registers every trainable tensor in a fixed order. The order and the
    /// names are the checkpoint contract.
    pub fn init(cfg: &ModelConfig, seed: u64) -> (ParamSet, PredictorParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let caps = CapsParams::register(&cfg.caps, &mut ps, &mut rng);

        let state_w = ps.add(
            "state_fc.w",
            glorot_uniform(
                &mut rng,
                cfg.state_features,
                cfg.state_enc_dim,
                vec![cfg.state_enc_dim, cfg.state_features],
            ),
        );
        let state_b = ps.add("state_fc.b", Tensor::zeros(vec![cfg.state_enc_dim]));

        let h = cfg.hidden_dim;
        let i = cfg.lstm_in_dim();
        let lstm = LstmParams {
            w_ih: ps.add("lstm.w_ih", glorot_uniform(&mut rng, i, h, vec![4 * h, i])),
            w_hh: ps.add("lstm.w_hh", glorot_uniform(&mut rng, h, h, vec![4 * h, h])),
            bias: ps.add("lstm.b", Tensor::zeros(vec![4 * h])),
        };

        let out = 2 * cfg.tau;
        let dec_w = ps.add("decoder.w", glorot_uniform(&mut rng, h, out, vec![out, h]));
        let dec_b = ps.add("decoder.b", Tensor::zeros(vec![out]));

        (
            ps,
            PredictorParams {
                caps,
                state_w,
                state_b,
                lstm,
                dec_w,
                dec_b,
            },
        )
    }
}

fn lstm_cell(
    tape: &mut Tape,
    params: &ParamSet,
    lstm: &LstmParams,
    hidden: usize,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let w_ih = tape.param(params, lstm.w_ih);
    let w_hh = tape.param(params, lstm.w_hh);
    let b = tape.param(params, lstm.bias);
    let gi = tape.affine(x, w_ih, b)?;
    let gh = tape.matvec(w_hh, h)?;
    let gates = tape.add(gi, gh)?;
    let i = tape.slice(gates, 0, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.slice(gates, hidden, hidden)?;
    let f = tape.sigmoid(f);
    let g = tape.slice(gates, 2 * hidden, hidden)?;
    let g = tape.tanh(g);
    let o = tape.slice(gates, 3 * hidden, hidden)?;
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}

/// Runs the full model on one sample's inputs. `features` is rho rows of
/// standardized state values, `chunks` rho frame-major raster stacks.
/// Returns the displacement matrix [tau, 2].
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layout: &PredictorParams,
    params: &ParamSet,
    features: &[f32],
    chunks: &[f32],
) -> Result<Var> {
    if features.len() != cfg.rho * cfg.state_features {
        return Err(Error::shape(
            "forward",
            format!(
                "{} feature values for rho {} x {} features",
                features.len(),
                cfg.rho,
                cfg.state_features
            ),
        ));
    }
    let stack = cfg.caps.in_channels * cfg.caps.in_px * cfg.caps.in_px;
    if chunks.len() != cfg.rho * stack {
        return Err(Error::shape(
            "forward",
            format!("{} chunk values for rho {} stacks of {}", chunks.len(), cfg.rho, stack),
        ));
    }

    let hd = cfg.hidden_dim;
    let mut h = tape.leaf(vec![hd], vec![0.0; hd])?;
    let mut c = tape.leaf(vec![hd], vec![0.0; hd])?;
    let state_w = tape.param(params, layout.state_w);
    let state_b = tape.param(params, layout.state_b);
    for t in 0..cfg.rho {
        let row = &features[t * cfg.state_features..(t + 1) * cfg.state_features];
        let s = tape.leaf(vec![cfg.state_features], row.to_vec())?;
        let s_enc = tape.affine(s, state_w, state_b)?;
        let s_enc = tape.elu(s_enc);
        let enc = encode_chunk(
            tape,
            &cfg.caps,
            &layout.caps,
            params,
            &chunks[t * stack..(t + 1) * stack],
        )?;
        let x = tape.concat(&[s_enc, enc.z])?;
        (h, c) = lstm_cell(tape, params, &layout.lstm, hd, x, h, c)?;
    }
    let dec_w = tape.param(params, layout.dec_w);
    let dec_b = tape.param(params, layout.dec_b);
    let flat = tape.affine(h, dec_w, dec_b)?;
    tape.reshape(flat, vec![cfg.tau, 2])
}

pub(crate) fn check_sample(cfg: &ModelConfig, sample: &Sample) -> Result<()> {
    for (name, have, want) in [
        ("rho", sample.rho, cfg.rho),
        ("tau", sample.tau, cfg.tau),
        ("out_px", sample.out_px, cfg.caps.in_px),
    ] {
        if have != want {
            return Err(Error::Config(format!(
                "sample {name} {have} does not match model {name} {want}"
            )));
        }
    }
    Ok(())
}

/// Predicted displacements for one sample, relative to its last observed
/// position. Evaluation-time twin of [`forward_on_tape`]: it runs the same
/// graph and reads the values off.
pub fn forward(
    cfg: &ModelConfig,
    layout: &PredictorParams,
    params: &ParamSet,
    sample: &Sample,
) -> Result<Vec<[f64; 2]>> {
    check_sample(cfg, sample)?;
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, cfg, layout, params, &sample.features, &sample.chunks)?;
    Ok(tape
        .data(out)
        .chunks_exact(2)
        .map(|p| [p[0] as f64, p[1] as f64])
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::capsule::ConvSpec;

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            caps: CapsConfig {
                in_px: 16,
                in_channels: 5,
                caps_dim: 2,
                base: ConvSpec {
                    kernel: 5,
                    stride: 2,
                    out_channels: 4,
                },
                branch1: ConvSpec {
                    kernel: 3,
                    stride: 1,
                    out_channels: 3,
                },
                branch2: ConvSpec {
                    kernel: 2,
                    stride: 2,
                    out_channels: 2,
                },
                higher_dim: 6,
                final_dim: 8,
                routing_iters: 2,
                squash_eps: 1e-7,
            },
            rho: 3,
            tau: 4,
            state_features: STATE_FEATURES,
            state_enc_dim: 10,
            hidden_dim: 12,
            raster: RasterConfig {
                lambda_m: 10.0,
                px_per_m: 0.8,
                out_px: 16,
            },
        }
    }

    fn inputs(cfg: &ModelConfig, scale: f32) -> (Vec<f32>, Vec<f32>) {
        let nf = cfg.rho * cfg.state_features;
        let nc = cfg.rho * cfg.caps.in_channels * cfg.caps.in_px * cfg.caps.in_px;
        let features = (0..nf).map(|i| ((i % 7) as f32 - 3.0) * 0.3 * scale).collect();
        let chunks = (0..nc).map(|i| ((i * 17 % 11) as f32 / 11.0) * scale).collect();
        (features, chunks)
    }

    #[test]
    fn default_param_count_is_exact() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.param_count(), 1_154_648);
        let (ps, _) = PredictorParams::init(&cfg, 1);
        assert_eq!(ps.total_len(), 1_154_648);
    }

    #[test]
    fn tiny_param_count_matches_registration() {
        let cfg = tiny_model();
        cfg.validate().unwrap();
        let (ps, _) = PredictorParams::init(&cfg, 1);
        assert_eq!(ps.total_len(), cfg.param_count());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny_model();
        let (ps, layout) = PredictorParams::init(&cfg, 7);
        let (features, chunks) = inputs(&cfg, 1.0);
        let run = || {
            let mut tape = Tape::new();
            let out = forward_on_tape(&mut tape, &cfg, &layout, &ps, &features, &chunks).unwrap();
            assert_eq!(tape.shape(out), &[cfg.tau, 2]);
            tape.data(out).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(a.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn chunk_content_reaches_the_output() {
        let cfg = tiny_model();
        let (ps, layout) = PredictorParams::init(&cfg, 7);
        let (features, chunks) = inputs(&cfg, 1.0);
        let mut other = chunks.clone();
        let plane = cfg.caps.in_px * cfg.caps.in_px;
        for v in &mut other[..plane] {
            *v = 1.0 - *v;
        }
        let run = |ch: &[f32]| {
            let mut tape = Tape::new();
            let out = forward_on_tape(&mut tape, &cfg, &layout, &ps, &features, ch).unwrap();
            tape.data(out).to_vec()
        };
        assert_ne!(run(&chunks), run(&other));
    }

    #[test]
    fn state_history_reaches_the_output() {
        let cfg = tiny_model();
        let (ps, layout) = PredictorParams::init(&cfg, 7);
        let (features, chunks) = inputs(&cfg, 1.0);
        let mut other = features.clone();
        // Oldest frame only; it must still influence the last hidden state.
        other[0] += 1.0;
        let run = |fe: &[f32]| {
            let mut tape = Tape::new();
            let out = forward_on_tape(&mut tape, &cfg, &layout, &ps, fe, &chunks).unwrap();
            tape.data(out).to_vec()
        };
        assert_ne!(run(&features), run(&other));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny_model();
        let (ps, layout) = PredictorParams::init(&cfg, 7);
        let (features, chunks) = inputs(&cfg, 1.0);
        let mut tape = Tape::new();
        let out = forward_on_tape(&mut tape, &cfg, &layout, &ps, &features, &chunks).unwrap();
        let sq = tape.square(out);
        let loss = tape.sum(sq);
        let bw = tape.backward(loss).unwrap();
        let grads = tape.param_grads(&bw, &ps);
        for id in ps.ids() {
            let g = grads.get(id).unwrap_or_else(|| panic!("no gradient for {}", ps.name(id)));
            assert!(
                g.iter().any(|&v| v != 0.0),
                "gradient for {} is identically zero",
                ps.name(id)
            );
        }
    }

    #[test]
    fn wrong_input_sizes_are_rejected() {
        let cfg = tiny_model();
        let (ps, layout) = PredictorParams::init(&cfg, 7);
        let (features, chunks) = inputs(&cfg, 1.0);
        let mut tape = Tape::new();
        assert!(forward_on_tape(&mut tape, &cfg, &layout, &ps, &features[1..], &chunks).is_err());
        assert!(forward_on_tape(&mut tape, &cfg, &layout, &ps, &features, &chunks[1..]).is_err());
    }

    #[test]
    fn mismatched_raster_and_encoder_sizes_are_rejected() {
        let mut cfg = tiny_model();
        cfg.raster.out_px = 32;
        assert!(cfg.validate().is_err());
    }
}
