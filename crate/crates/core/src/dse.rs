//! Accelerator latency/resource models and brute-force design-space search.
//!
//! Every pipeline stage has latency `⌈B/P_p⌉ ⌈n/P_o⌉ (II (m − 1) + C_loop)`.
//! Only the dominant stage `QuantConv(128, 1024)` (and the largest actor layer)
//! carry free unroll factors; the rest are derived by latency balancing.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Bits in one 18Kb BRAM block.
pub const BRAM_BITS: u64 = 18 * 1024;
pub const BRAM_MAX_WIDTH: u64 = 36;
pub const FEATURE_BITS: u64 = 32;
pub const TRANSFORM_BYTES: u64 = 48;
pub const POINT_BYTES: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Core {
    PointLk,
    ReAgent,
}

impl fmt::Display for Core {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Core::PointLk => "pointlk",
            Core::ReAgent => "reagent",
        })
    }
}

impl FromStr for Core {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pointlk" | "pointnetlk" => Ok(Core::PointLk),
            "reagent" => Ok(Core::ReAgent),
            other => Err(Error::InvalidConfig(format!("unknown core '{other}'"))),
        }
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Blocks for a buffer of `s` words of `w` bits split into `p` partitions,
/// given a block capacity and maximum block width.
pub fn memory_blocks(s: u64, w: u64, p: u64, capacity: u64, max_width: u64) -> u64 {
    let (s, w, p) = (s.max(1), w.max(1), p.max(1));
    let lanes = ceil_div(w, max_width);
    p * ceil_div(s * w, p * lanes * capacity) * lanes
}

/// 18Kb BRAM blocks for `s` words of `w` bits with partition factor `p`.
pub fn bram_blocks(s: u64, w: u64, p: u64) -> u64 {
    memory_blocks(s, w, p, BRAM_BITS, BRAM_MAX_WIDTH)
}

/// On-chip bits for a LUT-quantized layer: weights, input table, biases and scale.
pub fn quantconv_buffer_bits(m: u64, n: u64, b_w: u64, b_a: u64, b_v: u64, k: u64) -> u64 {
    b_w * m * n + b_a * (((1u64 << b_a) - 1) * k + 1) + b_v * n + b_v
}

/// On-chip bits for a full-precision layer.
pub fn conv_buffer_bits(m: u64, n: u64, b_v: u64) -> u64 {
    b_v * m * n + b_v * n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Memory {
    Bram,
    Uram,
}

/// Model constants. Defaults reproduce the published design points.
#[derive(Clone, Debug, PartialEq)]
pub struct DseConfig {
    pub n_points: u64,
    pub freq_hz: f64,
    pub bandwidth: f64,
    pub dsp_total: f64,
    pub bram_total: f64,
    pub uram_total: f64,
    pub cap: f64,
    pub weight_bits: u64,
    pub act_bits: u64,
    pub granularity: u64,
    pub i_jacobi: u64,
    pub lk_iters: u64,
    pub reagent_iters: u64,
    pub quantconv_ii: u64,
    pub quantconv_c_loop: u64,
    pub conv_ii: u64,
    pub conv_c_loop: u64,
    pub quant_c_loop: u64,
    pub maxpool_c_loop: u64,
    pub read_c_loop: u64,
    pub transform_standard_c_loop: u64,
    pub transform_disentangled_c_loop: u64,
    pub eta_quantconv: u64,
    pub eta_conv: u64,
    pub eta_quant: u64,
    pub eta_maxpool: u64,
    pub eta_transform: u64,
    pub pinv_cycles: u64,
    pub update_cycles: u64,
    pub pinv_dsp: u64,
    pub update_dsp: u64,
    pub pinv_ops: u64,
    pub update_ops: u64,
    pub bram_port_bits: u64,
    pub uram_port_bits: u64,
    pub uram_bits: u64,
    pub uram_max_width: u64,
}

impl Default for DseConfig {
    fn default() -> Self {
        Self {
            n_points: 1024,
            freq_hz: 200e6,
            bandwidth: 3.2e9,
            dsp_total: 1728.0,
            bram_total: 312.0,
            uram_total: 96.0,
            cap: 0.8,
            weight_bits: 8,
            act_bits: 8,
            granularity: 9,
            i_jacobi: 12,
            lk_iters: 20,
            reagent_iters: 10,
            quantconv_ii: 1,
            quantconv_c_loop: 12,
            conv_ii: 1,
            conv_c_loop: 12,
            quant_c_loop: 1,
            maxpool_c_loop: 1,
            read_c_loop: 1,
            transform_standard_c_loop: 64,
            transform_disentangled_c_loop: 192,
            eta_quantconv: 1,
            eta_conv: 3,
            eta_quant: 2,
            eta_maxpool: 2,
            eta_transform: 9,
            pinv_cycles: 20_794,
            update_cycles: 1_322,
            pinv_dsp: 60,
            update_dsp: 41,
            pinv_ops: 147_456,
            update_ops: 12_488,
            bram_port_bits: 18,
            uram_port_bits: 72,
            uram_bits: 288 * 1024,
            uram_max_width: 72,
        }
    }
}

macro_rules! config_keys {
    ($($field:ident),* $(,)?) => {
        impl DseConfig {
            const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
                let bad = |e: &dyn fmt::Display| {
                    Error::InvalidConfig(format!("line {line}: bad value for {key}: {e}"))
                };
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse().map_err(|e| bad(&e))?;
                    })*
                    _ => {
                        return Err(Error::InvalidConfig(format!("line {line}: unknown key '{key}'")));
                    }
                }
                Ok(())
            }

            /// `key = value` lines for every constant.
            pub fn to_kv_string(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));)*
                out
            }
        }
    };
}

config_keys!(
    n_points,
    freq_hz,
    bandwidth,
    dsp_total,
    bram_total,
    uram_total,
    cap,
    weight_bits,
    act_bits,
    granularity,
    i_jacobi,
    lk_iters,
    reagent_iters,
    quantconv_ii,
    quantconv_c_loop,
    conv_ii,
    conv_c_loop,
    quant_c_loop,
    maxpool_c_loop,
    read_c_loop,
    transform_standard_c_loop,
    transform_disentangled_c_loop,
    eta_quantconv,
    eta_conv,
    eta_quant,
    eta_maxpool,
    eta_transform,
    pinv_cycles,
    update_cycles,
    pinv_dsp,
    update_dsp,
    pinv_ops,
    update_ops,
    bram_port_bits,
    uram_port_bits,
    uram_bits,
    uram_max_width,
);

impl DseConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn keys() -> &'static [&'static str] {
        Self::KEYS
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return Err(Error::InvalidConfig(format!("cap {} outside (0, 1]", self.cap)));
        }
        if self.n_points == 0 || self.freq_hz <= 0.0 || self.bandwidth <= 0.0 {
            return Err(Error::InvalidConfig(
                "n_points, freq_hz and bandwidth must be positive".into(),
            ));
        }
        if !(2..=16).contains(&self.act_bits) || !(2..=16).contains(&self.weight_bits) {
            return Err(Error::InvalidConfig("bit widths must lie in 2..=16".into()));
        }
        if self.quantconv_c_loop == 0 || self.conv_c_loop == 0 || self.quant_c_loop == 0 {
            return Err(Error::InvalidConfig("loop latencies must be positive".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> Budget {
        Budget {
            dsp: self.dsp_total,
            bram: self.bram_total,
            uram: self.uram_total,
            cap: self.cap,
        }
    }

    fn lut_size(&self) -> u64 {
        self.granularity * ((1u64 << self.act_bits) - 1) + 1
    }

    /// Blocks for a weight buffer read `unroll` words per cycle. Narrow words
    /// are packed into a port word, and each block serves two ports.
    pub fn weight_buffer_blocks(&self, entries: u64, bits: u64, unroll: u64, memory: Memory) -> u64 {
        let port = match memory {
            Memory::Bram => self.bram_port_bits,
            Memory::Uram => self.uram_port_bits,
        };
        let per_port = (port / bits).max(1);
        let partitions = ceil_div(unroll.max(1), 2 * per_port);
        let words = ceil_div(entries, per_port);
        match memory {
            Memory::Bram => bram_blocks(words, bits * per_port, partitions),
            Memory::Uram => memory_blocks(words, bits * per_port, partitions, self.uram_bits, self.uram_max_width),
        }
    }

    /// BRAM for a lookup table duplicated `copies` times.
    pub fn lut_blocks(&self, copies: u64) -> u64 {
        bram_blocks(copies * self.lut_size(), self.act_bits, copies)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Read,
    Transform,
    Conv,
    Quant,
    QuantConv,
    MaxPool,
    QuantFc,
    Fc,
}

/// One pipeline stage or actor layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: &'static str,
    pub kind: StageKind,
    pub m: u64,
    pub n: u64,
    pub ii: u64,
    pub c_loop: u64,
    pub eta: u64,
    pub ops_per_point: u64,
}

impl Stage {
    /// `⌈B/P_p⌉ ⌈n/P_o⌉ (II (m − 1) + C_loop)`.
    pub fn latency(&self, b: u64, p_p: u64, p_o: u64) -> u64 {
        ceil_div(b, p_p.max(1)) * ceil_div(self.n, p_o.max(1)) * (self.ii * (self.m - 1) + self.c_loop)
    }

    pub fn dsp(&self, p_p: u64, p_o: u64) -> u64 {
        self.eta * p_p * p_o
    }

    pub fn unrolls_points(&self) -> bool {
        !matches!(self.kind, StageKind::Read | StageKind::MaxPool)
    }

    pub fn unrolls_outputs(&self) -> bool {
        !matches!(self.kind, StageKind::Read)
    }
}

/// Feature-extractor stages in pipeline order; the dominant stage is last but one.
pub fn featnet_stages(core: Core, cfg: &DseConfig) -> Vec<Stage> {
    let conv = |name, m: u64, n: u64| Stage {
        name,
        kind: StageKind::Conv,
        m,
        n,
        ii: cfg.conv_ii,
        c_loop: cfg.conv_c_loop,
        eta: cfg.eta_conv,
        ops_per_point: 2 * m * n,
    };
    let qconv = |name, m: u64, n: u64| Stage {
        name,
        kind: StageKind::QuantConv,
        m,
        n,
        ii: cfg.quantconv_ii,
        c_loop: cfg.quantconv_c_loop,
        eta: cfg.eta_quantconv,
        ops_per_point: 2 * m * n,
    };
    let quant = |name, n: u64| Stage {
        name,
        kind: StageKind::Quant,
        m: 1,
        n,
        ii: 1,
        c_loop: cfg.quant_c_loop,
        eta: cfg.eta_quant,
        ops_per_point: 2 * n,
    };
    let (transform_c, transform_ops) = match core {
        Core::PointLk => (cfg.transform_standard_c_loop, 18),
        Core::ReAgent => (cfg.transform_disentangled_c_loop, 24),
    };
    vec![
        Stage {
            name: "Read",
            kind: StageKind::Read,
            m: 1,
            n: 1,
            ii: 1,
            c_loop: cfg.read_c_loop,
            eta: 0,
            ops_per_point: 0,
        },
        Stage {
            name: "Transform",
            kind: StageKind::Transform,
            m: 1,
            n: 1,
            ii: 1,
            c_loop: transform_c,
            eta: cfg.eta_transform,
            ops_per_point: transform_ops,
        },
        conv("Conv(3,64)", 3, 64),
        quant("Quant(64)", 64),
        qconv("QuantConv(64,128)", 64, 128),
        quant("Quant(128)", 128),
        qconv("QuantConv(128,1024)", 128, 1024),
        Stage {
            name: "MaxPool(1024)",
            kind: StageKind::MaxPool,
            m: 1,
            n: 1024,
            ii: 1,
            c_loop: cfg.maxpool_c_loop,
            eta: cfg.eta_maxpool,
            ops_per_point: 1024,
        },
    ]
}

pub const DOMINANT_STAGE: usize = 6;

/// Actor layers in order; the dominant layer is index 1.
pub fn actor_stages(cfg: &DseConfig) -> Vec<Stage> {
    let quant = |name, n: u64| Stage {
        name,
        kind: StageKind::Quant,
        m: 1,
        n,
        ii: 1,
        c_loop: cfg.quant_c_loop,
        eta: cfg.eta_quant,
        ops_per_point: 2 * n,
    };
    let fc = |name, kind, m: u64, n: u64, ii, c_loop, eta| Stage {
        name,
        kind,
        m,
        n,
        ii,
        c_loop,
        eta,
        ops_per_point: 2 * m * n,
    };
    vec![
        quant("Quant(2048)", 2048),
        fc(
            "QuantFC(2048,512)",
            StageKind::QuantFc,
            2048,
            512,
            cfg.quantconv_ii,
            cfg.quantconv_c_loop,
            cfg.eta_quantconv,
        ),
        quant("Quant(512)", 512),
        fc(
            "QuantFC(512,256)",
            StageKind::QuantFc,
            512,
            256,
            cfg.quantconv_ii,
            cfg.quantconv_c_loop,
            cfg.eta_quantconv,
        ),
        quant("Quant(256)", 256),
        fc(
            "FC(256,33)",
            StageKind::Fc,
            256,
            33,
            cfg.conv_ii,
            cfg.conv_c_loop,
            cfg.eta_conv,
        ),
    ]
}

pub const DOMINANT_ACTOR_LAYER: usize = 1;

/// Smallest divisor of `n` that is at least `x` (`n` itself if none).
pub fn smallest_divisor_at_least(n: u64, x: f64) -> u64 {
    (1..=n).find(|&d| n.is_multiple_of(d) && d as f64 >= x).unwrap_or(n)
}

fn next_power_of_two_at_least(x: f64, cap: u64) -> u64 {
    let mut p = 1;
    while (p as f64) < x && p < cap {
        p *= 2;
    }
    p.min(cap)
}

/// Derived factors and cost of one stage at a design point.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFactors {
    pub name: &'static str,
    pub p_p: u64,
    pub p_o: u64,
    pub latency: u64,
    pub dsp: u64,
    pub bram: u64,
    pub uram: u64,
}

/// Latency-balanced factors for a non-dominant stage.
pub fn balance(stage: &Stage, b: u64, target: u64) -> (u64, u64) {
    let target = target.max(1) as f64;
    let p_p = if stage.unrolls_points() {
        let ratio = stage.latency(b, 1, 1) as f64 / target;
        smallest_divisor_at_least(b, ratio.min(b as f64))
    } else {
        1
    };
    let p_o = if stage.unrolls_outputs() {
        let lanes = if stage.unrolls_points() { b } else { 1 };
        let ratio = stage.latency(b, lanes, 1) as f64 / target;
        smallest_divisor_at_least(stage.n, ratio.max(1.0))
    } else {
        1
    };
    (p_p, p_o)
}

/// `(⌈N/B⌉ − 1) max_s C_s + Σ_s C_s`.
pub fn pipeline_cycles(tiles: u64, latencies: &[u64]) -> u64 {
    let max = latencies.iter().copied().max().unwrap_or(0);
    tiles.saturating_sub(1) * max + latencies.iter().sum::<u64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatNetModel {
    pub ops: f64,
    pub cycles: u64,
    pub bytes: u64,
    pub dsp: u64,
    pub bram: u64,
    pub stages: Vec<StageFactors>,
}

pub fn featnet_model(core: Core, b: u64, p_p: u64, p_o: u64, cfg: &DseConfig) -> FeatNetModel {
    let stages = featnet_stages(core, cfg);
    let dominant = &stages[DOMINANT_STAGE];
    let target = dominant.latency(b, p_p, p_o);
    let mut factors: Vec<StageFactors> = Vec::with_capacity(stages.len());
    for (i, s) in stages.iter().enumerate() {
        let (pp, po) = if i == DOMINANT_STAGE {
            (p_p, p_o)
        } else {
            balance(s, b, target)
        };
        let bram = match s.kind {
            StageKind::Conv => cfg.weight_buffer_blocks(s.m * s.n, 32, po, Memory::Bram),
            StageKind::QuantConv => cfg.weight_buffer_blocks(s.m * s.n, cfg.weight_bits, po, Memory::Bram),
            _ => 0,
        };
        factors.push(StageFactors {
            name: s.name,
            p_p: pp,
            p_o: po,
            latency: s.latency(b, pp, po),
            dsp: s.dsp(pp, po),
            bram,
            uram: 0,
        });
    }
    // Each Quant stage holds the input table of the layer after it.
    for i in 0..stages.len() {
        if stages[i].kind == StageKind::Quant {
            factors[i].bram = cfg.lut_blocks(factors[i].p_p * factors[i].p_o);
        }
    }
    let n = cfg.n_points;
    let latencies: Vec<u64> = factors.iter().map(|f| f.latency).collect();
    FeatNetModel {
        ops: (n * stages.iter().map(|s| s.ops_per_point).sum::<u64>()) as f64,
        cycles: pipeline_cycles(n.div_ceil(b), &latencies),
        bytes: POINT_BYTES * n,
        dsp: factors.iter().map(|f| f.dsp).sum(),
        bram: factors.iter().map(|f| f.bram).sum(),
        stages: factors,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorModel {
    pub ops: f64,
    pub cycles: u64,
    pub dsp: u64,
    /// Per head.
    pub bram: u64,
    /// Per head.
    pub uram: u64,
    pub layers: Vec<StageFactors>,
}

pub fn actor_model(p_actor: u64, cfg: &DseConfig) -> ActorModel {
    let layers = actor_stages(cfg);
    let target = layers[DOMINANT_ACTOR_LAYER].latency(1, 1, p_actor);
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let p_o = if i == DOMINANT_ACTOR_LAYER {
            p_actor
        } else {
            let ratio = l.latency(1, 1, 1) as f64 / target.max(1) as f64;
            next_power_of_two_at_least(ratio.max(1.0), l.n)
        };
        let (bram, uram) = match (i, l.kind) {
            (DOMINANT_ACTOR_LAYER, _) => (
                0,
                cfg.weight_buffer_blocks(l.m * l.n, cfg.weight_bits, p_o, Memory::Uram),
            ),
            (_, StageKind::QuantFc) => (
                cfg.weight_buffer_blocks(l.m * l.n, cfg.weight_bits, p_o, Memory::Bram),
                0,
            ),
            (_, StageKind::Fc) => (cfg.weight_buffer_blocks(l.m * l.n, 32, p_o, Memory::Bram), 0),
            (_, StageKind::Quant) if layers.get(i + 1).is_some_and(|n| n.kind == StageKind::QuantFc) => {
                (cfg.lut_blocks(p_o), 0)
            }
            _ => (0, 0),
        };
        out.push(StageFactors {
            name: l.name,
            p_p: 1,
            p_o,
            latency: l.latency(1, 1, p_o),
            dsp: l.dsp(1, p_o),
            bram,
            uram,
        });
    }
    ActorModel {
        ops: layers.iter().map(|l| l.ops_per_point).sum::<u64>() as f64,
        cycles: out.iter().map(|l| l.latency).sum(),
        dsp: out.iter().map(|l| l.dsp).sum(),
        bram: out.iter().map(|l| l.bram).sum(),
        uram: out.iter().map(|l| l.uram).sum(),
        layers: out,
    }
}

/// `D^L = (I_J + I_max + 1) D^P + (I_max + 1) D^Trans`.
pub fn pointlk_bytes(n_points: u64, i_jacobi: u64, i_max: u64) -> u64 {
    (i_jacobi + i_max + 1) * POINT_BYTES * n_points + (i_max + 1) * TRANSFORM_BYTES
}

/// `D^R = (I_max + 1) (D^P + D^Trans)`.
pub fn reagent_bytes(n_points: u64, i_max: u64) -> u64 {
    (i_max + 1) * (POINT_BYTES * n_points + TRANSFORM_BYTES)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoreModel {
    pub core: Core,
    pub ops: f64,
    pub cycles: u64,
    pub bytes: u64,
    pub dsp: u64,
    pub bram: u64,
    pub uram: u64,
    pub featnet: FeatNetModel,
    pub actor: Option<ActorModel>,
}

impl CoreModel {
    pub fn millis(&self, cfg: &DseConfig) -> f64 {
        self.cycles as f64 / cfg.freq_hz * 1e3
    }
}

/// Feature buffer blocks, partitioned like the final max-pool stage.
fn feature_buffer_blocks(featnet: &FeatNetModel) -> u64 {
    let pool = featnet.stages.last().map_or(1, |s| s.p_o);
    bram_blocks(1024, FEATURE_BITS, pool.div_ceil(2))
}

pub fn pointlk_model(featnet: FeatNetModel, i_jacobi: u64, i_max: u64, cfg: &DseConfig) -> CoreModel {
    let k = 1024;
    let jacobian = bram_blocks(6 * k, FEATURE_BITS, 1);
    let pinv = bram_blocks(6 * k, FEATURE_BITS, 1);
    let fp = featnet.cycles;
    CoreModel {
        core: Core::PointLk,
        ops: (i_jacobi + 1) as f64 * featnet.ops
            + cfg.pinv_ops as f64
            + i_max as f64 * (featnet.ops + cfg.update_ops as f64),
        cycles: (i_jacobi + 1) * fp + cfg.pinv_cycles + i_max * (fp + cfg.update_cycles),
        bytes: pointlk_bytes(cfg.n_points, i_jacobi, i_max),
        dsp: featnet.dsp + cfg.pinv_dsp + cfg.update_dsp,
        bram: featnet.bram + 2 * feature_buffer_blocks(&featnet) + jacobian + pinv,
        uram: 0,
        featnet,
        actor: None,
    }
}

pub fn reagent_model(featnet: FeatNetModel, actor: ActorModel, i_max: u64, cfg: &DseConfig) -> CoreModel {
    CoreModel {
        core: Core::ReAgent,
        ops: featnet.ops + i_max as f64 * (featnet.ops + 2.0 * actor.ops),
        cycles: featnet.cycles + i_max * (featnet.cycles + 2 * actor.cycles),
        bytes: reagent_bytes(cfg.n_points, i_max),
        dsp: featnet.dsp + actor.dsp,
        bram: featnet.bram + 2 * actor.bram + 2 * feature_buffer_blocks(&featnet),
        uram: 2 * actor.uram,
        featnet,
        actor: Some(actor),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    Compute,
    Memory,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roofline {
    /// Computational performance, ops/s.
    pub cp: f64,
    /// Operations per byte transferred.
    pub ctc: f64,
    pub perf: f64,
    pub bound: Bound,
}

/// `Perf = min(CP, CTC · BW)` with `CP = OP / (C / f)` and `CTC = OP / D`.
pub fn roofline(ops: f64, cycles: f64, bytes: f64, freq_hz: f64, bandwidth: f64) -> Roofline {
    let cp = ops / (cycles / freq_hz);
    let ctc = ops / bytes;
    let memory = ctc * bandwidth;
    Roofline {
        cp,
        ctc,
        perf: cp.min(memory),
        bound: if cp < memory { Bound::Compute } else { Bound::Memory },
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub dsp: f64,
    pub bram: f64,
    pub uram: f64,
    pub cap: f64,
}

impl Budget {
    pub fn admits(&self, m: &CoreModel) -> bool {
        m.dsp as f64 <= self.cap * self.dsp
            && m.bram as f64 <= self.cap * self.bram
            && m.uram as f64 <= self.cap * self.uram
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignPoint {
    pub b: u64,
    pub p_p: u64,
    pub p_o: u64,
    pub p_actor: Option<u64>,
    pub model: CoreModel,
    pub feasible: bool,
}

impl DesignPoint {
    fn key(&self) -> (u64, u64, u64, u64, u64) {
        (self.model.cycles, self.b, self.p_p, self.p_o, self.p_actor.unwrap_or(0))
    }
}

pub fn evaluate(
    core: Core,
    b: u64,
    p_p: u64,
    p_o: u64,
    p_actor: Option<u64>,
    cfg: &DseConfig,
    budget: &Budget,
) -> DesignPoint {
    let featnet = featnet_model(core, b, p_p, p_o, cfg);
    let model = match core {
        Core::PointLk => pointlk_model(featnet, cfg.i_jacobi, cfg.lk_iters, cfg),
        Core::ReAgent => reagent_model(featnet, actor_model(p_actor.unwrap_or(1), cfg), cfg.reagent_iters, cfg),
    };
    DesignPoint {
        b,
        p_p,
        p_o,
        p_actor: if core == Core::ReAgent {
            Some(p_actor.unwrap_or(1))
        } else {
            None
        },
        feasible: budget.admits(&model),
        model,
    }
}

/// Published design points `(B, P_p, P_o, P_actor)`.
pub fn table2_point(core: Core) -> (u64, u64, u64, Option<u64>) {
    match core {
        Core::PointLk => (2, 2, 512, None),
        Core::ReAgent => (14, 14, 64, Some(128)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub tiles: Vec<u64>,
    pub p_o: Vec<u64>,
    pub p_actor: Vec<u64>,
}

fn powers_of_two(max: u64) -> Vec<u64> {
    std::iter::successors(Some(1u64), |p| Some(p * 2))
        .take_while(|&p| p <= max)
        .collect()
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            tiles: (1..=64).collect(),
            p_o: powers_of_two(1024),
            p_actor: powers_of_two(512),
        }
    }
}

impl Grid {
    /// Every `(B, P_p, P_o, P_actor)` with `P_p` dividing `B`.
    pub fn points(&self, core: Core) -> Vec<(u64, u64, u64, Option<u64>)> {
        let actors: Vec<Option<u64>> = match core {
            Core::PointLk => vec![None],
            Core::ReAgent => self.p_actor.iter().map(|&p| Some(p)).collect(),
        };
        let mut out = Vec::new();
        for &b in &self.tiles {
            for p_p in (1..=b).filter(|&d| b.is_multiple_of(d)) {
                for &p_o in &self.p_o {
                    for &a in &actors {
                        out.push((b, p_p, p_o, a));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Exploration {
    pub best: DesignPoint,
    /// Every evaluated point in grid order.
    pub frontier: Vec<DesignPoint>,
}

/// Brute-force search for the feasible point with the fewest cycles. Ties
/// break lexicographically on `(B, P_p, P_o, P_actor)`.
pub fn explore(core: Core, cfg: &DseConfig, budget: &Budget, grid: &Grid) -> Result<Exploration> {
    let frontier: Vec<DesignPoint> = grid
        .points(core)
        .into_par_iter()
        .map(|(b, pp, po, pa)| evaluate(core, b, pp, po, pa, cfg, budget))
        .collect();
    let best = frontier
        .iter()
        .filter(|p| p.feasible)
        .min_by_key(|p| p.key())
        .cloned()
        .ok_or(Error::NoFeasibleDesign)?;
    Ok(Exploration { best, frontier })
}

pub const FRONTIER_HEADER: [&str; 10] = [
    "B", "P_p", "P_o", "P_actor", "C_cycles", "ms", "DSP", "BRAM", "URAM", "feasible",
];

pub fn write_frontier_csv<W: Write>(out: W, points: &[DesignPoint], cfg: &DseConfig) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(FRONTIER_HEADER).map_err(to_io)?;
    for p in points {
        w.write_record([
            p.b.to_string(),
            p.p_p.to_string(),
            p.p_o.to_string(),
            p.p_actor.map_or_else(String::new, |a| a.to_string()),
            p.model.cycles.to_string(),
            format!("{:.4}", p.model.millis(cfg)),
            p.model.dsp.to_string(),
            p.model.bram.to_string(),
            p.model.uram.to_string(),
            p.feasible.to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Picks the QuantConv loop latency whose modeled PointNetLK latency at the
/// published design point is closest to `target_ms`.
pub fn calibrate_quantconv_loop(cfg: &DseConfig, target_ms: f64) -> DseConfig {
    let (b, pp, po, _) = table2_point(Core::PointLk);
    let budget = cfg.budget();
    (1..=256)
        .map(|c| {
            let mut trial = cfg.clone();
            trial.quantconv_c_loop = c;
            let ms = evaluate(Core::PointLk, b, pp, po, None, &trial, &budget)
                .model
                .millis(&trial);
            ((ms - target_ms).abs(), trial)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
        .expect("non-empty search range")
}
