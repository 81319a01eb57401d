//! V-shaped 3D encoder-decoder networks.
//!
//! Architecture, parametric in `NetSpec`:
//! - channel width at level `i` is `base_width * 2^i`;
//! - level 0 starts with a stem convolution from the input channels, every
//!   level block is a chain of same-width convolutions (kernel `k`, same
//!   padding, PReLU) wrapped in a residual add when the chain is non-empty;
//! - transitions are kernel-2 stride-2 convolutions down and kernel-2
//!   stride-2 transposed convolutions up, each followed by PReLU;
//! - decoder levels concatenate the encoder skip, then a first convolution
//!   halves the channels back, followed by a residual chain;
//! - a kernel-1 head convolution maps to the output channels, finished by
//!   channel softmax or per-channel sigmoid.
//!
//! Optional per-channel instance normalization can be inserted after every
//! convolution (off by default).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::grad::{kernels, Tape, Tensor, Var};
use crate::vol::ProbKind;

const INSTNORM_EPS: f64 = 1e-5;

/// Hyperparameters of one encoder-decoder network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub base_width: usize,
    pub convs_per_level: Vec<usize>,
    pub kernel: usize,
    pub out_activation: ProbKind,
    pub instance_norm: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            in_channels: 1,
            out_channels: 3,
            levels: 4,
            base_width: 16,
            convs_per_level: vec![1, 2, 3, 3],
            kernel: 5,
            out_activation: ProbKind::Softmax,
            instance_norm: false,
        }
    }
}

impl NetSpec {
    /// Small preset used by the reduced-scale pipeline and the test suite.
    pub fn desk(in_channels: usize, out_channels: usize, out_activation: ProbKind) -> Self {
        NetSpec {
            in_channels,
            out_channels,
            levels: 3,
            base_width: 8,
            convs_per_level: vec![1, 2, 2],
            kernel: 3,
            out_activation,
            instance_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(SegError::Config("network channel counts must be positive".into()));
        }
        if self.levels == 0 || self.convs_per_level.len() != self.levels {
            return Err(SegError::Config(format!(
                "convs_per_level must list one entry per level ({} levels, {} entries)",
                self.levels,
                self.convs_per_level.len()
            )));
        }
        if self.convs_per_level.iter().any(|&c| c == 0) {
            return Err(SegError::Config("each level needs at least one convolution".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(SegError::Config("block kernel size must be odd".into()));
        }
        Ok(())
    }

    /// Input spatial dims must be divisible by this factor.
    pub fn divisibility(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

/// Conv unit: convolution plus activation indices, optional norm pair.
#[derive(Debug, Clone, Copy)]
struct UnitIdx {
    conv: ConvIdx,
    norm: Option<(usize, usize)>,
    prelu: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    units: Vec<UnitIdx>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<BlockIdx>,
    down: Vec<UnitIdx>,
    up: Vec<UnitIdx>,
    dec: Vec<BlockIdx>,
    head: ConvIdx,
}

/// A built network: immutable during inference; training owns it mutably.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetSpec,
    pub params: Vec<Param>,
    layout: Layout,
}

/// Builder that allocates parameters with deterministic initialization.
struct ParamAlloc {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamAlloc {
    fn new(seed: u64) -> Self {
        ParamAlloc {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn randn(&mut self, n: usize, std: f64) -> Vec<f64> {
        // Box-Muller keeps initialization identical across platforms.
        (0..n)
            .map(|_| {
                let u1: f64 = self.rng.gen::<f64>().max(1e-12);
                let u2: f64 = self.rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) -> ConvIdx {
        let fan_in = (ci * k * k * k) as f64;
        let data = self.randn(co * ci * k * k * k, (2.0 / fan_in).sqrt());
        let w = self.push(
            format!("{name}.w"),
            Tensor::from_vec(&[co, ci, k, k, k], data),
        );
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[co]));
        ConvIdx { w, b }
    }

    fn deconv(&mut self, name: &str, ci: usize, co: usize) -> ConvIdx {
        // Transposed kernel-2 stride-2: each output voxel sums `ci` terms.
        let data = self.randn(ci * co * 8, (2.0 / ci as f64).sqrt());
        let w = self.push(
            format!("{name}.w"),
            Tensor::from_vec(&[ci, co, 2, 2, 2], data),
        );
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[co]));
        ConvIdx { w, b }
    }

    fn prelu(&mut self, name: &str, c: usize) -> usize {
        self.push(
            format!("{name}.prelu"),
            Tensor::from_vec(&[c], vec![0.25; c]),
        )
    }

    fn norm(&mut self, name: &str, c: usize, enabled: bool) -> Option<(usize, usize)> {
        if !enabled {
            return None;
        }
        let g = self.push(
            format!("{name}.norm.g"),
            Tensor::from_vec(&[c], vec![1.0; c]),
        );
        let b = self.push(format!("{name}.norm.b"), Tensor::zeros(&[c]));
        Some((g, b))
    }

    fn unit(&mut self, name: &str, co: usize, ci: usize, k: usize, norm: bool) -> UnitIdx {
        let conv = self.conv(name, co, ci, k);
        let norm = self.norm(name, co, norm);
        let prelu = self.prelu(name, co);
        UnitIdx { conv, norm, prelu }
    }

    fn deconv_unit(&mut self, name: &str, ci: usize, co: usize, norm: bool) -> UnitIdx {
        let conv = self.deconv(name, ci, co);
        let norm = self.norm(name, co, norm);
        let prelu = self.prelu(name, co);
        UnitIdx { conv, norm, prelu }
    }
}

impl Network {
    /// Builds a network with parameters initialized deterministically from
    /// `init_seed` (Kaiming-scaled normals for weights, zero biases, 0.25
    /// PReLU slopes).
    pub fn build(spec: NetSpec, init_seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut alloc = ParamAlloc::new(init_seed);
        let k = spec.kernel;
        let nrm = spec.instance_norm;

        let mut enc = Vec::new();
        for lvl in 0..spec.levels {
            let w = spec.width(lvl);
            let mut units = Vec::new();
            let n = spec.convs_per_level[lvl];
            if lvl == 0 {
                units.push(alloc.unit("enc0.conv0", w, spec.in_channels, k, nrm));
                for j in 1..n {
                    units.push(alloc.unit(&format!("enc0.conv{j}"), w, w, k, nrm));
                }
            } else {
                for j in 0..n {
                    units.push(alloc.unit(&format!("enc{lvl}.conv{j}"), w, w, k, nrm));
                }
            }
            enc.push(BlockIdx { units });
        }

        let mut down = Vec::new();
        for lvl in 1..spec.levels {
            down.push(alloc.unit(
                &format!("down{lvl}"),
                spec.width(lvl),
                spec.width(lvl - 1),
                2,
                nrm,
            ));
        }

        let mut up = Vec::new();
        let mut dec = Vec::new();
        for lvl in (0..spec.levels - 1).rev() {
            up.push(alloc.deconv_unit(
                &format!("up{lvl}"),
                spec.width(lvl + 1),
                spec.width(lvl),
                nrm,
            ));
            let w = spec.width(lvl);
            let mut units = Vec::new();
            units.push(alloc.unit(&format!("dec{lvl}.conv0"), w, 2 * w, k, nrm));
            for j in 1..spec.convs_per_level[lvl] {
                units.push(alloc.unit(&format!("dec{lvl}.conv{j}"), w, w, k, nrm));
            }
            dec.push(BlockIdx { units });
        }

        let head = alloc.conv("head", spec.out_channels, spec.base_width, 1);

        Ok(Network {
            spec,
            params: alloc.params,
            layout: Layout {
                enc,
                down,
                up,
                dec,
                head,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Checks an input's channel count and spatial divisibility.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[0] != self.spec.in_channels {
            return Err(SegError::InvalidArgument(format!(
                "expected input ({}, D, H, W), got {:?}",
                self.spec.in_channels, shape
            )));
        }
        let div = self.spec.divisibility();
        if shape[1..].iter().any(|&d| d % div != 0 || d == 0) {
            return Err(SegError::InvalidArgument(format!(
                "spatial dims {:?} must be positive multiples of {div}",
                &shape[1..]
            )));
        }
        Ok(())
    }

    /// Registers all parameters as tape leaves, in parameter order.
    pub fn bind(&self, tape: &Tape) -> BoundNetwork {
        BoundNetwork {
            vars: self
                .params
                .iter()
                .map(|p| tape.input(p.value.clone()))
                .collect(),
        }
    }

    /// Differentiable forward pass through bound parameters.
    pub fn forward_tape(&self, tape: &Tape, bound: &BoundNetwork, x: Var) -> Result<Var> {
        self.check_input(&tape.shape(x))?;
        let pad = self.spec.kernel / 2;
        let v = &bound.vars;
        let unit = |tape: &Tape, u: &UnitIdx, x: Var, pad: usize| -> Var {
            let mut t = tape.conv3d(x, v[u.conv.w], v[u.conv.b], pad);
            if let Some((g, b)) = u.norm {
                t = tape.instance_norm(t, v[g], v[b], INSTNORM_EPS);
            }
            tape.prelu(t, v[u.prelu])
        };
        let down_unit = |tape: &Tape, u: &UnitIdx, x: Var| -> Var {
            let mut t = tape.down2(x, v[u.conv.w], v[u.conv.b]);
            if let Some((g, b)) = u.norm {
                t = tape.instance_norm(t, v[g], v[b], INSTNORM_EPS);
            }
            tape.prelu(t, v[u.prelu])
        };
        let up_unit = |tape: &Tape, u: &UnitIdx, x: Var| -> Var {
            let mut t = tape.up2(x, v[u.conv.w], v[u.conv.b]);
            if let Some((g, b)) = u.norm {
                t = tape.instance_norm(t, v[g], v[b], INSTNORM_EPS);
            }
            tape.prelu(t, v[u.prelu])
        };
        let block = |tape: &Tape, b: &BlockIdx, x: Var, skip_first: bool| -> Var {
            let mut units = b.units.iter();
            let entry = if skip_first {
                unit(tape, units.next().expect("block has units"), x, pad)
            } else {
                x
            };
            let mut t = entry;
            let mut any = false;
            for u in units {
                t = unit(tape, u, t, pad);
                any = true;
            }
            if any {
                tape.add(t, entry)
            } else {
                t
            }
        };

        let mut skips = Vec::with_capacity(self.spec.levels);
        let mut t = block(tape, &self.layout.enc[0], x, true);
        skips.push(t);
        for lvl in 1..self.spec.levels {
            t = down_unit(tape, &self.layout.down[lvl - 1], t);
            t = block(tape, &self.layout.enc[lvl], t, false);
            skips.push(t);
        }
        for (i, lvl) in (0..self.spec.levels - 1).rev().enumerate() {
            t = up_unit(tape, &self.layout.up[i], t);
            t = tape.concat_channels(t, skips[lvl]);
            t = block(tape, &self.layout.dec[i], t, true);
        }
        let logits = tape.conv3d(t, v[self.layout.head.w], v[self.layout.head.b], 0);
        Ok(match self.spec.out_activation {
            ProbKind::Softmax => tape.softmax_channels(logits),
            ProbKind::Sigmoid => tape.sigmoid(logits),
        })
    }

    /// Inference forward pass without a tape; intermediate activations are
    /// dropped as soon as they go dead, keeping memory at the live set.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(&x.shape)?;
        let pad = self.spec.kernel / 2;
        let p = |i: usize| &self.params[i].value;
        let unit = |u: &UnitIdx, x: &Tensor, pad: usize| -> Tensor {
            let mut t = kernels::conv3d(x, p(u.conv.w), p(u.conv.b), pad);
            if let Some((g, b)) = u.norm {
                t = kernels::instance_norm(&t, p(g), p(b), INSTNORM_EPS);
            }
            kernels::prelu(&t, p(u.prelu))
        };
        let down_unit = |u: &UnitIdx, x: &Tensor| -> Tensor {
            let mut t = kernels::down2(x, p(u.conv.w), p(u.conv.b));
            if let Some((g, b)) = u.norm {
                t = kernels::instance_norm(&t, p(g), p(b), INSTNORM_EPS);
            }
            kernels::prelu(&t, p(u.prelu))
        };
        let up_unit = |u: &UnitIdx, x: &Tensor| -> Tensor {
            let mut t = kernels::up2(x, p(u.conv.w), p(u.conv.b));
            if let Some((g, b)) = u.norm {
                t = kernels::instance_norm(&t, p(g), p(b), INSTNORM_EPS);
            }
            kernels::prelu(&t, p(u.prelu))
        };
        let block = |b: &BlockIdx, x: Tensor, skip_first: bool| -> Tensor {
            let mut units = b.units.iter();
            let entry = if skip_first {
                unit(units.next().expect("block has units"), &x, pad)
            } else {
                x
            };
            let mut t = entry.clone();
            let mut any = false;
            for u in units {
                t = unit(u, &t, pad);
                any = true;
            }
            if any {
                t.accumulate(&entry);
            }
            t
        };

        let mut skips: Vec<Tensor> = Vec::with_capacity(self.spec.levels);
        let mut t = block(&self.layout.enc[0], x.clone(), true);
        skips.push(t.clone());
        for lvl in 1..self.spec.levels {
            t = down_unit(&self.layout.down[lvl - 1], &t);
            t = block(&self.layout.enc[lvl], t, false);
            skips.push(t.clone());
        }
        for (i, lvl) in (0..self.spec.levels - 1).rev().enumerate() {
            t = up_unit(&self.layout.up[i], &t);
            t = kernels::concat_channels(&t, &skips[lvl]);
            skips[lvl] = Tensor::zeros(&[0]); // release the skip buffer
            t = block(&self.layout.dec[i], t, true);
        }
        let logits = kernels::conv3d(&t, p(self.layout.head.w), p(self.layout.head.b), 0);
        Ok(match self.spec.out_activation {
            ProbKind::Softmax => kernels::softmax_channels(&logits),
            ProbKind::Sigmoid => kernels::sigmoid(&logits),
        })
    }

    /// SHA-256 over the canonical parameter serialization; used by the
    /// freeze/staging contracts.
    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape handles of a network's parameters, in parameter order.
pub struct BoundNetwork {
    pub vars: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect())
    }

    /// Independent per-layer parameter tally, written from the architecture
    /// definition in the module docs rather than from the builder code.
    fn param_count_oracle(spec: &NetSpec) -> usize {
        let k3 = spec.kernel.pow(3);
        let conv = |co: usize, ci: usize, kk: usize| co * ci * kk + co;
        let mut total = 0;
        // Encoder blocks.
        for lvl in 0..spec.levels {
            let w = spec.base_width << lvl;
            let n = spec.convs_per_level[lvl];
            if lvl == 0 {
                total += conv(w, spec.in_channels, k3) + w; // stem + prelu
                total += (n - 1) * (conv(w, w, k3) + w);
            } else {
                total += n * (conv(w, w, k3) + w);
            }
        }
        // Down transitions.
        for lvl in 1..spec.levels {
            let (wi, wo) = (spec.base_width << (lvl - 1), spec.base_width << lvl);
            total += conv(wo, wi, 8) + wo;
        }
        // Up transitions and decoder blocks.
        for lvl in 0..spec.levels - 1 {
            let (wi, wo) = (spec.base_width << (lvl + 1), spec.base_width << lvl);
            total += wi * wo * 8 + wo + wo; // deconv + bias + prelu
            total += conv(wo, 2 * wo, k3) + wo;
            total += (spec.convs_per_level[lvl] - 1) * (conv(wo, wo, k3) + wo);
        }
        // Head.
        total += conv(spec.out_channels, spec.base_width, 1);
        total
    }

    fn small_spec() -> NetSpec {
        NetSpec {
            in_channels: 1,
            out_channels: 3,
            levels: 3,
            base_width: 4,
            convs_per_level: vec![1, 2, 2],
            kernel: 3,
            out_activation: ProbKind::Softmax,
            instance_norm: false,
        }
    }

    #[test]
    fn parameter_count_matches_arithmetic_tally() {
        let spec = small_spec();
        let net = Network::build(spec.clone(), 1).unwrap();
        // Hand-summed for in=1, out=3, levels=3, base=4, convs=[1,2,2], k=3:
        // 112+4 + 264+8 + 3472+16 + 1040+16 + 13856+32 + 1032+8
        // + 3464+8+1736+8 + 260+4 + 868+4 + 15 = 26227.
        assert_eq!(param_count_oracle(&spec), 26_227);
        assert_eq!(net.param_count(), 26_227);

        let desk = NetSpec::desk(2, 1, ProbKind::Sigmoid);
        let net = Network::build(desk.clone(), 2).unwrap();
        assert_eq!(net.param_count(), param_count_oracle(&desk));
    }

    #[test]
    fn softmax_head_shape_and_normalization() {
        let net = Network::build(small_spec(), 3).unwrap();
        let x = random_input(&[1, 16, 12, 8], 4);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape, vec![3, 16, 12, 8]);
        let n = 16 * 12 * 8;
        for i in 0..n {
            let s: f64 = (0..3).map(|c| y.data[c * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sigmoid_head_in_unit_interval() {
        let net = Network::build(NetSpec::desk(2, 1, ProbKind::Sigmoid), 5).unwrap();
        let x = random_input(&[2, 8, 8, 8], 6);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape, vec![1, 8, 8, 8]);
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_deterministic_and_matches_tape_path() {
        let net = Network::build(small_spec(), 7).unwrap();
        let x = random_input(&[1, 8, 8, 8], 8);
        let y1 = net.forward(&x).unwrap();
        let y2 = net.forward(&x).unwrap();
        assert_eq!(y1.data, y2.data);

        let tape = Tape::new();
        let bound = net.bind(&tape);
        let xv = tape.input(x);
        let yv = net.forward_tape(&tape, &bound, xv).unwrap();
        assert_eq!(tape.value(yv).data, y1.data);
    }

    #[test]
    fn zero_input_yields_finite_probabilities() {
        let net = Network::build(small_spec(), 9).unwrap();
        let y = net.forward(&Tensor::zeros(&[1, 8, 8, 8])).unwrap();
        assert!(y.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::build(small_spec(), 42).unwrap();
        let b = Network::build(small_spec(), 42).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.value.data, pb.value.data);
        }
        assert_eq!(a.param_hash(), b.param_hash());
        let c = Network::build(small_spec(), 43).unwrap();
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn rejects_indivisible_input_and_bad_channels() {
        let net = Network::build(small_spec(), 1).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 10, 8, 8])).is_err());
        assert!(net.forward(&Tensor::zeros(&[2, 8, 8, 8])).is_err());
    }

    #[test]
    fn instance_norm_variant_runs() {
        let mut spec = small_spec();
        spec.instance_norm = true;
        let net = Network::build(spec, 11).unwrap();
        let y = net.forward(&random_input(&[1, 8, 8, 8], 12)).unwrap();
        assert!(y.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Frozen random mini-network, Dice loss against a random binary
        // target, 10 random parameters, central differences.
        let spec = NetSpec {
            in_channels: 1,
            out_channels: 2,
            levels: 2,
            base_width: 2,
            convs_per_level: vec![1, 2],
            kernel: 3,
            out_activation: ProbKind::Softmax,
            instance_norm: false,
        };
        let net = Network::build(spec, 13).unwrap();
        let x = random_input(&[1, 8, 8, 8], 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let target = Tensor::from_vec(
            &[1, 8, 8, 8],
            (0..512).map(|_| (rng.gen::<f64>() < 0.4) as u8 as f64).collect(),
        );

        let loss_of = |net: &Network| -> f64 {
            let y = net.forward(&x).unwrap();
            let ch = kernels::select_channel(&y, 1);
            let mut pg = 0.0;
            let mut pp = 0.0;
            let mut gg = 0.0;
            for (&p, &g) in ch.data.iter().zip(&target.data) {
                pg += p * g;
                pp += p * p;
                gg += g * g;
            }
            1.0 - (2.0 * pg + 1e-5) / (pp + gg + 1e-5)
        };

        let tape = Tape::new();
        let bound = net.bind(&tape);
        let xv = tape.input(x.clone());
        let yv = net.forward_tape(&tape, &bound, xv).unwrap();
        let ch = tape.select_channel(yv, 1);
        let loss = tape.soft_dice_loss(ch, target.clone(), 1e-5);
        let grads = tape.backward(loss);

        // 10 random parameter coordinates across tensors.
        let h = 1e-5;
        for probe in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + probe);
            let pi = rng.gen_range(0..net.params.len());
            let ei = rng.gen_range(0..net.params[pi].value.len());
            let analytic = grads.get(bound.vars[pi]).unwrap().data[ei];
            let mut plus = net.clone();
            plus.params[pi].value.data[ei] += h;
            let mut minus = net.clone();
            minus.params[pi].value.data[ei] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                rel <= 1e-2,
                "param {pi}[{ei}]: analytic {analytic}, fd {fd}, rel {rel}"
            );
        }

        // Input gradient exists, is finite, and matches finite differences
        // at a few coordinates.
        let dx = grads.get(xv).expect("input gradient must flow");
        assert!(dx.data.iter().all(|v| v.is_finite()));
        assert!(dx.norm() > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..5 {
            let i = rng.gen_range(0..512);
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let f = |xx: &Tensor| {
                let y = net.forward(xx).unwrap();
                let ch = kernels::select_channel(&y, 1);
                let mut pg = 0.0;
                let mut pp = 0.0;
                let mut gg = 0.0;
                for (&p, &g) in ch.data.iter().zip(&target.data) {
                    pg += p * g;
                    pp += p * p;
                    gg += g * g;
                }
                1.0 - (2.0 * pg + 1e-5) / (pp + gg + 1e-5)
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = dx.data[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-2, "input[{i}]: analytic {an}, fd {fd}, rel {rel}");
        }
    }
}
