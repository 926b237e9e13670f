//! Tiled PointNet global-feature extractor.
//!
//! Points stream through the pipeline `B` at a time:
//! Conv(3→64) → Quant → QuantConv(64→128) → Quant → QuantConv(128→1024) → Quant → running max.
//! Intermediate buffers depend only on `B`, never on the cloud size.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitBall};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::features::{Feature, FeatureExtractor};
use crate::lie::{ApplyMode, RigidTransform};
use crate::quant::{ActivationTable, QuantizedLayer, DEFAULT_GRANULARITY};

pub const INPUT_DIM: usize = 3;
pub const CONV1_DIM: usize = 64;
pub const CONV2_DIM: usize = 128;
pub const FEATURE_DIM: usize = 1024;

/// Full-precision linear layer, row-major `rows × cols` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "dense weights",
                expected: rows * cols,
                actual: weights.len(),
            });
        }
        if bias.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "dense bias",
                expected: rows,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidLayer("non-finite dense parameter".into()));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    /// Uniform `±bound` weights and `±bias_bound` biases.
    pub fn random(rows: usize, cols: usize, bound: f64, bias_bound: f64, rng: &mut impl Rng) -> Self {
        let weights = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        let bias = (0..rows).map(|_| rng.random_range(-bias_bound..=bias_bound)).collect();
        Self {
            rows,
            cols,
            weights,
            bias,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    /// Pre-activation of output `i`.
    pub fn output(&self, i: usize, x: &[f64]) -> f64 {
        let w = &self.weights[i * self.cols..(i + 1) * self.cols];
        self.bias[i] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = self.output(i, x);
        }
    }
}

/// Per-channel `scale · x + shift` (folded batch normalization).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAffine {
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl ChannelAffine {
    pub fn new(scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        if scale.len() != shift.len() {
            return Err(Error::DimensionMismatch {
                context: "affine shift",
                expected: scale.len(),
                actual: shift.len(),
            });
        }
        if scale.iter().chain(&shift).any(|v| !v.is_finite()) {
            return Err(Error::InvalidLayer("non-finite affine parameter".into()));
        }
        Ok(Self { scale, shift })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }

    /// Folds `γ (x − mean) / sqrt(var + eps) + β`.
    pub fn from_batch_norm(gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Result<Self> {
        let n = gamma.len();
        for (context, len) in [("bn beta", beta.len()), ("bn mean", mean.len()), ("bn var", var.len())] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: n,
                    actual: len,
                });
            }
        }
        let scale: Vec<f64> = (0..n).map(|c| gamma[c] / (var[c] + eps).sqrt()).collect();
        let shift = (0..n).map(|c| beta[c] - scale[c] * mean[c]).collect();
        Self::new(scale, shift)
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    #[inline]
    pub fn apply(&self, channel: usize, x: f64) -> f64 {
        self.scale[channel] * x + self.shift[channel]
    }
}

/// Dequantization parameters of the preceding integer layer.
#[derive(Clone, Copy, Debug)]
pub struct Dequant<'a> {
    pub bias: &'a [f64],
    pub scale: f64,
}

/// The glue between layers: dequantize → affine → ReLU → quantize, each optional.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuantStage<'a> {
    pub dequant: Option<Dequant<'a>>,
    pub affine: Option<&'a ChannelAffine>,
    pub relu: bool,
    pub next: Option<&'a ActivationTable>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageOutput {
    Real(Vec<f64>),
    Quantized(Vec<u16>),
}

impl QuantStage<'_> {
    /// Real value after dequantize, affine and ReLU.
    #[inline]
    pub fn value(&self, channel: usize, x: f64) -> f64 {
        let mut v = x;
        if let Some(d) = self.dequant {
            v = d.bias[channel] + d.scale * v;
        }
        if let Some(a) = self.affine {
            v = a.apply(channel, v);
        }
        if self.relu {
            v = v.max(0.0);
        }
        v
    }

    /// Runs the stage over a row-major tile with `channels` columns.
    pub fn apply(&self, tile: &[f64], channels: usize) -> StageOutput {
        let values = tile.iter().enumerate().map(|(k, &x)| self.value(k % channels, x));
        match self.next {
            Some(table) => StageOutput::Quantized(values.map(|v| table.quantize(v)).collect()),
            None => StageOutput::Real(values.collect()),
        }
    }
}

/// Integer layer product `Z = X Wᵀ` for a `rows × m` tile.
pub fn layer_forward_quant(tile: &[u16], rows: usize, layer: &QuantizedLayer) -> Result<Vec<i64>> {
    if tile.len() != rows * layer.cols() {
        return Err(Error::DimensionMismatch {
            context: "quantized tile",
            expected: rows * layer.cols(),
            actual: tile.len(),
        });
    }
    let q = layer.input_table().levels();
    if let Some(&x) = tile.iter().find(|&&x| x as u32 > q) {
        return Err(Error::InvalidLayer(format!("activation {x} exceeds {q}")));
    }
    let mut out = vec![0; rows * layer.rows()];
    layer.forward_tile(tile, rows, &mut out);
    Ok(out)
}

/// Inference weights of the quantized extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatNetWeights {
    conv1: DenseLayer,
    affine1: ChannelAffine,
    qconv2: QuantizedLayer,
    affine2: ChannelAffine,
    qconv3: QuantizedLayer,
    affine3: ChannelAffine,
}

fn expect_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

impl FeatNetWeights {
    pub fn new(
        conv1: DenseLayer,
        affine1: ChannelAffine,
        qconv2: QuantizedLayer,
        affine2: ChannelAffine,
        qconv3: QuantizedLayer,
        affine3: ChannelAffine,
    ) -> Result<Self> {
        expect_dim("conv1 outputs", CONV1_DIM, conv1.rows())?;
        expect_dim("conv1 inputs", INPUT_DIM, conv1.cols())?;
        expect_dim("affine1 channels", CONV1_DIM, affine1.channels())?;
        expect_dim("qconv2 inputs", CONV1_DIM, qconv2.cols())?;
        expect_dim("qconv2 outputs", CONV2_DIM, qconv2.rows())?;
        expect_dim("affine2 channels", CONV2_DIM, affine2.channels())?;
        expect_dim("qconv3 inputs", CONV2_DIM, qconv3.cols())?;
        expect_dim("qconv3 outputs", FEATURE_DIM, qconv3.rows())?;
        expect_dim("affine3 channels", FEATURE_DIM, affine3.channels())?;
        Ok(Self {
            conv1,
            affine1,
            qconv2,
            affine2,
            qconv3,
            affine3,
        })
    }

    /// Random float network quantized at `bits`, calibrated on a seeded unit-ball cloud.
    pub fn random(seed: u64, bits: u32) -> Result<Self> {
        let float = FloatFeatNet::random(seed);
        let calibration = calibration_cloud(seed ^ 0x5eed, 2048);
        float.quantize(bits, DEFAULT_GRANULARITY, &calibration)
    }

    pub fn conv1(&self) -> &DenseLayer {
        &self.conv1
    }

    pub fn affine1(&self) -> &ChannelAffine {
        &self.affine1
    }

    pub fn qconv2(&self) -> &QuantizedLayer {
        &self.qconv2
    }

    pub fn affine2(&self) -> &ChannelAffine {
        &self.affine2
    }

    pub fn qconv3(&self) -> &QuantizedLayer {
        &self.qconv3
    }

    pub fn affine3(&self) -> &ChannelAffine {
        &self.affine3
    }

    /// Stage after conv1, quantizing for qconv2.
    pub fn stage1(&self) -> QuantStage<'_> {
        QuantStage {
            dequant: None,
            affine: Some(&self.affine1),
            relu: true,
            next: Some(self.qconv2.input_table()),
        }
    }

    /// Stage after qconv2, quantizing for qconv3.
    pub fn stage2(&self) -> QuantStage<'_> {
        QuantStage {
            dequant: Some(Dequant {
                bias: self.qconv2.bias(),
                scale: self.qconv2.combined_scale(),
            }),
            affine: Some(&self.affine2),
            relu: true,
            next: Some(self.qconv3.input_table()),
        }
    }

    /// Stage after qconv3, feeding the max-pool.
    pub fn stage3(&self) -> QuantStage<'_> {
        QuantStage {
            dequant: Some(Dequant {
                bias: self.qconv3.bias(),
                scale: self.qconv3.combined_scale(),
            }),
            affine: Some(&self.affine3),
            relu: true,
            next: None,
        }
    }
}

/// Reusable per-tile buffers.
#[derive(Clone, Debug)]
pub struct TileWorkspace {
    tile: usize,
    h1: Vec<f64>,
    q1: Vec<u16>,
    z2: Vec<i64>,
    q2: Vec<u16>,
    z3: Vec<i64>,
}

impl TileWorkspace {
    pub fn new(tile: usize) -> Self {
        let tile = tile.max(1);
        Self {
            tile,
            h1: vec![0.0; CONV1_DIM],
            q1: vec![0; tile * CONV1_DIM],
            z2: vec![0; tile * CONV2_DIM],
            q2: vec![0; tile * CONV2_DIM],
            z3: vec![0; tile * FEATURE_DIM],
        }
    }

    pub fn tile(&self) -> usize {
        self.tile
    }

    /// Bytes held by the intermediate buffers.
    pub fn footprint_bytes(&self) -> usize {
        use std::mem::size_of;
        self.h1.len() * size_of::<f64>()
            + (self.q1.len() + self.q2.len()) * size_of::<u16>()
            + (self.z2.len() + self.z3.len()) * size_of::<i64>()
    }
}

/// Global feature of `transform · cloud`, processed in tiles of `tile` points.
pub fn extract(
    cloud: &PointCloud,
    transform: &RigidTransform,
    mode: ApplyMode,
    weights: &FeatNetWeights,
    tile: usize,
) -> Result<Feature> {
    let mut ws = TileWorkspace::new(tile);
    extract_with(&mut ws, cloud, transform, mode, weights)
}

pub fn extract_with(
    ws: &mut TileWorkspace,
    cloud: &PointCloud,
    transform: &RigidTransform,
    mode: ApplyMode,
    weights: &FeatNetWeights,
) -> Result<Feature> {
    run(ws, cloud, transform, mode, weights, None)
}

/// Per-point outputs of every integer stage, row-major over all points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTrace {
    pub q1: Vec<u16>,
    pub z2: Vec<i64>,
    pub q2: Vec<u16>,
    pub z3: Vec<i64>,
}

/// Like [`extract`], also recording the integer stage outputs.
pub fn extract_traced(
    cloud: &PointCloud,
    transform: &RigidTransform,
    mode: ApplyMode,
    weights: &FeatNetWeights,
    tile: usize,
) -> Result<(Feature, StageTrace)> {
    let mut ws = TileWorkspace::new(tile);
    let mut trace = StageTrace::default();
    let f = run(&mut ws, cloud, transform, mode, weights, Some(&mut trace))?;
    Ok((f, trace))
}

fn run(
    ws: &mut TileWorkspace,
    cloud: &PointCloud,
    transform: &RigidTransform,
    mode: ApplyMode,
    weights: &FeatNetWeights,
    mut trace: Option<&mut StageTrace>,
) -> Result<Feature> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let s1 = weights.stage1();
    let s2 = weights.stage2();
    let s3 = weights.stage3();
    let t2 = weights.qconv2.input_table();
    let t3 = weights.qconv3.input_table();
    let mut pooled = vec![f64::NEG_INFINITY; FEATURE_DIM];

    for chunk in cloud.points().chunks(ws.tile) {
        let rows = chunk.len();
        for (p, q1) in chunk.iter().zip(ws.q1.chunks_exact_mut(CONV1_DIM)) {
            let x = transform.apply_point(p, mode);
            weights.conv1.forward(x.as_slice(), &mut ws.h1);
            for (c, (q, &h)) in q1.iter_mut().zip(&ws.h1).enumerate() {
                *q = t2.quantize(s1.value(c, h));
            }
        }

        let z2 = &mut ws.z2[..rows * CONV2_DIM];
        weights.qconv2.forward_tile(&ws.q1[..rows * CONV1_DIM], rows, z2);
        for (q2, z) in ws.q2.chunks_exact_mut(CONV2_DIM).zip(z2.chunks_exact(CONV2_DIM)) {
            for (c, (q, &acc)) in q2.iter_mut().zip(z).enumerate() {
                *q = t3.quantize(s2.value(c, acc as f64));
            }
        }

        let z3 = &mut ws.z3[..rows * FEATURE_DIM];
        weights.qconv3.forward_tile(&ws.q2[..rows * CONV2_DIM], rows, z3);
        if let Some(t) = trace.as_deref_mut() {
            t.q1.extend_from_slice(&ws.q1[..rows * CONV1_DIM]);
            t.z2.extend_from_slice(&ws.z2[..rows * CONV2_DIM]);
            t.q2.extend_from_slice(&ws.q2[..rows * CONV2_DIM]);
            t.z3.extend_from_slice(z3);
        }
        for z in z3.chunks_exact(FEATURE_DIM) {
            for (c, (m, &acc)) in pooled.iter_mut().zip(z).enumerate() {
                let v = s3.value(c, acc as f64);
                if v > *m {
                    *m = v;
                }
            }
        }
    }
    Ok(DVector::from_vec(pooled))
}

/// Quantized extractor with a fixed tile size.
#[derive(Clone, Debug)]
pub struct QuantFeatNet {
    weights: FeatNetWeights,
    tile: usize,
}

impl QuantFeatNet {
    pub fn new(weights: FeatNetWeights, tile: usize) -> Self {
        Self {
            weights,
            tile: tile.max(1),
        }
    }

    pub fn weights(&self) -> &FeatNetWeights {
        &self.weights
    }

    pub fn tile(&self) -> usize {
        self.tile
    }
}

impl FeatureExtractor for QuantFeatNet {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, cloud: &PointCloud, transform: &RigidTransform, mode: ApplyMode) -> Result<Feature> {
        extract(cloud, transform, mode, &self.weights, self.tile)
    }
}

/// Full-precision reference network with the same topology.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatFeatNet {
    pub conv1: DenseLayer,
    pub affine1: ChannelAffine,
    pub conv2: DenseLayer,
    pub affine2: ChannelAffine,
    pub conv3: DenseLayer,
    pub affine3: ChannelAffine,
}

impl FloatFeatNet {
    /// He-uniform random weights with small biases.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        Self {
            conv1: DenseLayer::random(CONV1_DIM, INPUT_DIM, 1.0, 0.5, &mut rng),
            affine1: ChannelAffine::identity(CONV1_DIM),
            conv2: DenseLayer::random(CONV2_DIM, CONV1_DIM, he(CONV1_DIM), 0.1, &mut rng),
            affine2: ChannelAffine::identity(CONV2_DIM),
            conv3: DenseLayer::random(FEATURE_DIM, CONV2_DIM, he(CONV2_DIM), 0.1, &mut rng),
            affine3: ChannelAffine::identity(FEATURE_DIM),
        }
    }

    fn point_features(&self, x: &Point, h1: &mut [f64], h2: &mut [f64]) {
        self.conv1.forward(x.as_slice(), h1);
        for (c, v) in h1.iter_mut().enumerate() {
            *v = self.affine1.apply(c, *v).max(0.0);
        }
        self.conv2.forward(h1, h2);
        for (c, v) in h2.iter_mut().enumerate() {
            *v = self.affine2.apply(c, *v).max(0.0);
        }
    }

    /// Largest post-ReLU activations entering layers 2 and 3 over a cloud.
    pub fn activation_ranges(&self, cloud: &PointCloud) -> (f64, f64) {
        let mut h1 = vec![0.0; CONV1_DIM];
        let mut h2 = vec![0.0; CONV2_DIM];
        let (mut m1, mut m2) = (0.0f64, 0.0f64);
        for p in cloud {
            self.point_features(p, &mut h1, &mut h2);
            m1 = h1.iter().fold(m1, |m, &v| m.max(v));
            m2 = h2.iter().fold(m2, |m, &v| m.max(v));
        }
        (m1, m2)
    }

    /// Quantizes layers 2 and 3 with identity tables, calibrating scales on `calibration`.
    pub fn quantize(&self, bits: u32, granularity: usize, calibration: &PointCloud) -> Result<FeatNetWeights> {
        let (r1, r2) = self.activation_ranges(calibration);
        let positive = |r: f64| if r > 0.0 { r } else { 1.0 };
        let positive_w = |l: &DenseLayer| positive(l.max_abs_weight());
        let t2 = ActivationTable::identity(bits, granularity, positive(r1))?;
        let t3 = ActivationTable::identity(bits, granularity, positive(r2))?;
        let qconv2 = QuantizedLayer::quantize(&self.conv2, bits, positive_w(&self.conv2), t2)?;
        let qconv3 = QuantizedLayer::quantize(&self.conv3, bits, positive_w(&self.conv3), t3)?;
        FeatNetWeights::new(
            self.conv1.clone(),
            self.affine1.clone(),
            qconv2,
            self.affine2.clone(),
            qconv3,
            self.affine3.clone(),
        )
    }
}

impl FeatureExtractor for FloatFeatNet {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn extract(&self, cloud: &PointCloud, transform: &RigidTransform, mode: ApplyMode) -> Result<Feature> {
        let mut h1 = vec![0.0; CONV1_DIM];
        let mut h2 = vec![0.0; CONV2_DIM];
        let mut pooled = vec![f64::NEG_INFINITY; FEATURE_DIM];
        for p in cloud {
            self.point_features(&transform.apply_point(p, mode), &mut h1, &mut h2);
            for (c, m) in pooled.iter_mut().enumerate() {
                let v = self.affine3.apply(c, self.conv3.output(c, &h2)).max(0.0);
                if v > *m {
                    *m = v;
                }
            }
        }
        Ok(DVector::from_vec(pooled))
    }
}

/// Seeded points drawn uniformly from the unit ball.
pub fn calibration_cloud(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n.max(1)).map(|_| Point::from(UnitBall.sample(&mut rng))).collect();
    PointCloud::new(points).expect("unit-ball samples are finite")
}
