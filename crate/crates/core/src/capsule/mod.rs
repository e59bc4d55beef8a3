//! Capsule encoder for one raster chunk. Every semantic channel runs
//! through a shared convolutional backbone (one ELU conv base, then
//! parallel two-conv branches with no activation in between, one branch per
//! capsule dimension). Branch outputs are interleaved into primary capsules,
//! squashed, transformed by a channel-specific matrix, and routed into one
//! capsule per channel; the per-channel capsules are then transformed and
//! routed into the final chunk descriptor.

pub mod routing;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_len, glorot_uniform, ParamId, ParamSet, Tape, Var};
use routing::dynamic_routing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsConfig {
    /// Side length of each input raster.
    pub in_px: usize,
    /// Number of semantic channels, each encoded separately with shared
    /// backbone weights.
    pub in_channels: usize,
    /// Primary capsule dimensionality; one conv branch per dimension.
    pub caps_dim: usize,
    pub base: ConvSpec,
    pub branch1: ConvSpec,
    pub branch2: ConvSpec,
    /// Width of the per-channel capsule produced by routing.
    pub higher_dim: usize,
    /// Width of the final chunk descriptor.
    pub final_dim: usize,
    pub routing_iters: usize,
    pub squash_eps: f64,
}

impl Default for CapsConfig {
    fn default() -> Self {
        CapsConfig {
            in_px: 64,
            in_channels: 5,
            caps_dim: 4,
            base: ConvSpec {
                kernel: 9,
                stride: 2,
                out_channels: 64,
            },
            branch1: ConvSpec {
                kernel: 9,
                stride: 2,
                out_channels: 32,
            },
            branch2: ConvSpec {
                kernel: 2,
                stride: 2,
                out_channels: 16,
            },
            higher_dim: 32,
            final_dim: 128,
            routing_iters: 3,
            squash_eps: 1e-7,
        }
    }
}

impl CapsConfig {
    fn chain_px(&self) -> Option<(usize, usize, usize)> {
        let a = conv_out_len(self.in_px, self.base.kernel, self.base.stride)?;
        let b = conv_out_len(a, self.branch1.kernel, self.branch1.stride)?;
        let c = conv_out_len(b, self.branch2.kernel, self.branch2.stride)?;
        Some((a, b, c))
    }

    pub fn base_px(&self) -> usize {
        self.chain_px().expect("validated config").0
    }

    pub fn branch1_px(&self) -> usize {
        self.chain_px().expect("validated config").1
    }

    pub fn branch2_px(&self) -> usize {
        self.chain_px().expect("validated config").2
    }

    /// Primary capsules per channel: one per branch2 output activation.
    pub fn n_caps(&self) -> usize {
        let px = self.branch2_px();
        self.branch2.out_channels * px * px
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("caps_dim", self.caps_dim),
            ("higher_dim", self.higher_dim),
            ("final_dim", self.final_dim),
            ("routing_iters", self.routing_iters),
            ("base.out_channels", self.base.out_channels),
            ("branch1.out_channels", self.branch1.out_channels),
            ("branch2.out_channels", self.branch2.out_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.squash_eps.is_finite() && self.squash_eps > 0.0) {
            return Err(Error::Config(format!(
                "squash_eps {} must be positive",
                self.squash_eps
            )));
        }
        match self.chain_px() {
            Some(_) => Ok(()),
            None => Err(Error::Config(format!(
                "conv chain does not fit: {} px through kernels {}/{}/{} at strides {}/{}/{}",
                self.in_px,
                self.base.kernel,
                self.branch1.kernel,
                self.branch2.kernel,
                self.base.stride,
                self.branch1.stride,
                self.branch2.stride
            ))),
        }
    }

    /// Closed-form trainable parameter count of the encoder.
    pub fn param_count(&self) -> usize {
        let conv = |spec: &ConvSpec, in_ch: usize| spec.out_channels * (in_ch * spec.kernel * spec.kernel + 1);
        let base = conv(&self.base, 1);
        let branch = conv(&self.branch1, self.base.out_channels)
            + conv(&self.branch2, self.branch1.out_channels);
        let higher = self.in_channels * self.n_caps() * self.caps_dim * self.higher_dim;
        let fin = self.in_channels * self.higher_dim * self.final_dim;
        base + self.caps_dim * branch + higher + fin
    }
}

#[derive(Debug, Clone)]
pub struct BranchParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct CapsParams {
    pub conv_base_w: ParamId,
    pub conv_base_b: ParamId,
    pub branches: Vec<BranchParams>,
    /// One transform per semantic channel: [n_caps, caps_dim, higher_dim].
    pub higher_w: Vec<ParamId>,
    /// Final transform: [in_channels, higher_dim, final_dim].
    pub final_w: ParamId,
}

impl CapsParams {
    pub fn register<R: Rng>(cfg: &CapsConfig, params: &mut ParamSet, rng: &mut R) -> CapsParams {
        let conv_init = |rng: &mut R, spec: &ConvSpec, in_ch: usize| {
            let fan = spec.kernel * spec.kernel;
            glorot_uniform(
                rng,
                in_ch * fan,
                spec.out_channels * fan,
                vec![spec.out_channels, in_ch, spec.kernel, spec.kernel],
            )
        };
        let zeros = |n: usize| crate::tensor::Tensor::zeros(vec![n]);

        let conv_base_w = params.add("caps.conv_base.w", conv_init(rng, &cfg.base, 1));
        let conv_base_b = params.add("caps.conv_base.b", zeros(cfg.base.out_channels));
        let branches = (0..cfg.caps_dim)
            .map(|d| BranchParams {
                conv1_w: params.add(
                    format!("caps.branch{d}.conv1.w"),
                    conv_init(rng, &cfg.branch1, cfg.base.out_channels),
                ),
                conv1_b: params.add(format!("caps.branch{d}.conv1.b"), zeros(cfg.branch1.out_channels)),
                conv2_w: params.add(
                    format!("caps.branch{d}.conv2.w"),
                    conv_init(rng, &cfg.branch2, cfg.branch1.out_channels),
                ),
                conv2_b: params.add(format!("caps.branch{d}.conv2.b"), zeros(cfg.branch2.out_channels)),
            })
            .collect();
        let higher_w = (0..cfg.in_channels)
            .map(|l| {
                params.add(
                    format!("caps.higher{l}.w"),
                    glorot_uniform(
                        rng,
                        cfg.caps_dim,
                        cfg.higher_dim,
                        vec![cfg.n_caps(), cfg.caps_dim, cfg.higher_dim],
                    ),
                )
            })
            .collect();
        let final_w = params.add(
            "caps.final.w",
            glorot_uniform(
                rng,
                cfg.higher_dim,
                cfg.final_dim,
                vec![cfg.in_channels, cfg.higher_dim, cfg.final_dim],
            ),
        );
        CapsParams {
            conv_base_w,
            conv_base_b,
            branches,
            higher_w,
            final_w,
        }
    }
}

/// Tape variables of the encoder's intermediate stages, kept for shape
/// checks and diagnostics.
pub struct ChunkEncoding {
    /// Final chunk descriptor, [final_dim].
    pub z: Var,
    /// Per-channel routed capsule, [higher_dim] each.
    pub layer_caps: Vec<Var>,
    /// Per-channel primary capsules after squash, [n_caps, caps_dim] each.
    pub primary_caps: Vec<Var>,
    /// Per-channel base feature maps, [base.out_channels, px, px] each.
    pub base_maps: Vec<Var>,
}

/// Encodes one chunk stack (in_channels x in_px x in_px, channel-major).
pub fn encode_chunk(
    tape: &mut Tape,
    cfg: &CapsConfig,
    caps: &CapsParams,
    params: &ParamSet,
    chunk: &[f32],
) -> Result<ChunkEncoding> {
    let px = cfg.in_px;
    let plane = px * px;
    if chunk.len() != cfg.in_channels * plane {
        return Err(Error::shape(
            "encode_chunk",
            format!(
                "chunk holds {} values, config expects {}x{}x{}",
                chunk.len(),
                cfg.in_channels,
                px,
                px
            ),
        ));
    }
    let b1_px = cfg.branch1_px();
    let b2_px = cfg.branch2_px();
    let branch_plane = cfg.branch1.out_channels * b1_px * b1_px;

    let base_w = tape.param(params, caps.conv_base_w);
    let base_b = tape.param(params, caps.conv_base_b);
    let conv1_ws: Vec<Var> = caps.branches.iter().map(|b| tape.param(params, b.conv1_w)).collect();

    let mut layer_caps = Vec::with_capacity(cfg.in_channels);
    let mut primary = Vec::with_capacity(cfg.in_channels);
    let mut base_maps = Vec::with_capacity(cfg.in_channels);
    for ch in 0..cfg.in_channels {
        let x = tape.leaf(vec![1, px, px], chunk[ch * plane..(ch + 1) * plane].to_vec())?;
        let base = tape.conv2d(x, base_w, cfg.base.stride)?;
        let base = tape.bias_channels(base, base_b)?;
        let base = tape.elu(base);
        base_maps.push(base);

        // All branch first convolutions share one im2col of the base map.
        let bank = tape.conv_bank(base, &conv1_ws, cfg.branch1.stride)?;
        let mut branch_outs = Vec::with_capacity(cfg.caps_dim);
        for (d, bp) in caps.branches.iter().enumerate() {
            let part = tape.slice(bank, d * branch_plane, branch_plane)?;
            let part = tape.reshape(part, vec![cfg.branch1.out_channels, b1_px, b1_px])?;
            let b1b = tape.param(params, bp.conv1_b);
            let part = tape.bias_channels(part, b1b)?;
            // No activation between the branch convolutions.
            let w2 = tape.param(params, bp.conv2_w);
            let out = tape.conv2d(part, w2, cfg.branch2.stride)?;
            let b2b = tape.param(params, bp.conv2_b);
            branch_outs.push(tape.bias_channels(out, b2b)?);
        }
        let caps_raw = tape.assemble_caps(&branch_outs)?;
        let caps_sq = tape.squash(caps_raw, cfg.squash_eps)?;
        primary.push(caps_sq);

        let w = tape.param(params, caps.higher_w[ch]);
        let preds = tape.caps_transform(caps_sq, w)?;
        let preds = tape.reshape(preds, vec![cfg.n_caps(), 1, cfg.higher_dim])?;
        let routed = dynamic_routing(tape, preds, cfg.routing_iters, cfg.squash_eps)?;
        layer_caps.push(tape.reshape(routed, vec![cfg.higher_dim])?);
        let _ = b2_px;
    }

    let stacked = tape.concat(&layer_caps)?;
    let stacked = tape.reshape(stacked, vec![cfg.in_channels, cfg.higher_dim])?;
    let final_w = tape.param(params, caps.final_w);
    let preds = tape.caps_transform(stacked, final_w)?;
    let preds = tape.reshape(preds, vec![cfg.in_channels, 1, cfg.final_dim])?;
    let routed = dynamic_routing(tape, preds, cfg.routing_iters, cfg.squash_eps)?;
    let z = tape.reshape(routed, vec![cfg.final_dim])?;

    Ok(ChunkEncoding {
        z,
        layer_caps,
        primary_caps: primary,
        base_maps,
    })
}
