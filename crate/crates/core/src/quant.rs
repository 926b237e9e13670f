//! Learnable-lookup-table (LLT) quantization primitives.
//!
//! Inputs are scaled and clipped (`[0, 1]` for activations, `[-1, 1]` for
//! weights), mapped to a table index with granularity `K`, and the table entry
//! is the quantized integer. Layer products run on the integers and a single
//! combined scale `s_aw = s_a s_w / (Q_a Q_w)` is applied afterwards.

use crate::error::{Error, Result};
use crate::featnet::DenseLayer;

/// Default table granularity.
pub const DEFAULT_GRANULARITY: usize = 9;
pub const DEFAULT_BITS: u32 = 8;
pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 15;

/// `Q_a = 2^b − 1`.
pub fn activation_levels(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

/// `Q_w = 2^(b−1) − 1`.
pub fn weight_levels(bits: u32) -> u32 {
    (1u32 << (bits - 1)) - 1
}

/// Bits needed to hold the exact product of `m` activations and weights.
pub fn accumulator_bits(activation_bits: u32, weight_bits: u32, m: usize) -> u32 {
    activation_bits + weight_bits + (m.max(1) as f64).log2().ceil() as u32
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidTable(format!(
            "bit width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTable {
    bits: u32,
    granularity: usize,
    entries: Vec<u16>,
    scale: f64,
}

impl ActivationTable {
    pub fn new(bits: u32, granularity: usize, entries: Vec<u16>, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        if granularity == 0 {
            return Err(Error::InvalidTable("granularity must be positive".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidTable(format!(
                "activation scale {scale} must be positive"
            )));
        }
        let q = activation_levels(bits) as usize;
        let expected = granularity * q + 1;
        if entries.len() != expected {
            return Err(Error::InvalidTable(format!(
                "activation table has {} entries, expected {expected}",
                entries.len()
            )));
        }
        if entries.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidTable("activation table is not monotone".into()));
        }
        if entries.iter().any(|&e| e as usize > q) {
            return Err(Error::InvalidTable(format!("activation table entry exceeds {q}")));
        }
        Ok(Self {
            bits,
            granularity,
            entries,
            scale,
        })
    }

    /// Uniform quantizer: index `i` maps to `round(i / K)`.
    pub fn identity(bits: u32, granularity: usize, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        let len = granularity * activation_levels(bits) as usize + 1;
        let k = granularity as f64;
        let entries = (0..len).map(|i| (i as f64 / k).round() as u16).collect();
        Self::new(bits, granularity, entries, scale)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn granularity(&self) -> usize {
        self.granularity
    }

    pub fn entries(&self) -> &[u16] {
        &self.entries
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn levels(&self) -> u32 {
        activation_levels(self.bits)
    }

    /// Table index for a real input: `round(K Q_a · clip(x / s_a))`.
    pub fn index(&self, x: f64) -> usize {
        let clipped = (x / self.scale).clamp(0.0, 1.0);
        let span = (self.granularity * self.levels() as usize) as f64;
        // NaN inputs land on index 0 via the saturating cast.
        (span * clipped).round() as usize
    }

    pub fn quantize(&self, x: f64) -> u16 {
        self.entries[self.index(x)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    bits: u32,
    granularity: usize,
    entries: Vec<i16>,
}

impl WeightTable {
    pub fn new(bits: u32, granularity: usize, entries: Vec<i16>) -> Result<Self> {
        check_bits(bits)?;
        if granularity == 0 {
            return Err(Error::InvalidTable("granularity must be positive".into()));
        }
        let q = weight_levels(bits) as i32;
        let expected = 2 * granularity * q as usize + 1;
        if entries.len() != expected {
            return Err(Error::InvalidTable(format!(
                "weight table has {} entries, expected {expected}",
                entries.len()
            )));
        }
        if entries.iter().any(|&e| (e as i32).abs() > q) {
            return Err(Error::InvalidTable(format!("weight table entry outside ±{q}")));
        }
        if entries.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidTable("weight table is not monotone".into()));
        }
        Ok(Self {
            bits,
            granularity,
            entries,
        })
    }

    /// Uniform quantizer: index `i` maps to `round(i / K) − Q_w`.
    pub fn identity(bits: u32, granularity: usize) -> Result<Self> {
        check_bits(bits)?;
        let q = weight_levels(bits) as i32;
        let len = 2 * granularity * q as usize + 1;
        let k = granularity as f64;
        let entries = (0..len).map(|i| ((i as f64 / k).round() as i32 - q) as i16).collect();
        Self::new(bits, granularity, entries)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn granularity(&self) -> usize {
        self.granularity
    }

    pub fn levels(&self) -> u32 {
        weight_levels(self.bits)
    }

    pub fn entries(&self) -> &[i16] {
        &self.entries
    }

    /// `round(K Q_w · (clip(w / s_w) + 1))`.
    pub fn index(&self, w: f64, scale: f64) -> usize {
        let clipped = (w / scale).clamp(-1.0, 1.0);
        let k_q = (self.granularity * self.levels() as usize) as f64;
        (k_q * (clipped + 1.0)).round() as usize
    }
}

pub fn quantize_activation(x: f64, table: &ActivationTable) -> u16 {
    table.quantize(x)
}

pub fn quantize_weight(w: f64, scale: f64, table: &WeightTable) -> i16 {
    table.entries[table.index(w, scale)]
}

/// Exact integer dot product of a quantized activation row and weight row.
pub fn integer_accumulate(qx: &[u16], qw: &[i16]) -> i64 {
    assert_eq!(qx.len(), qw.len(), "integer_accumulate: length mismatch");
    qx.iter().zip(qw).map(|(&a, &w)| a as i64 * w as i64).sum()
}

/// `bias + s_aw · acc`.
pub fn dequantize(acc: i64, bias: f64, combined_scale: f64) -> f64 {
    bias + combined_scale * acc as f64
}

/// A linear layer whose weights and inputs are LLT-quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    rows: usize,
    cols: usize,
    weights: Vec<i16>,
    weight_bits: u32,
    weight_scale: f64,
    bias: Vec<f64>,
    combined_scale: f64,
    input: ActivationTable,
}

impl QuantizedLayer {
    /// Builds a layer from already-quantized parts. `weights` is row-major `rows × cols`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        rows: usize,
        cols: usize,
        weights: Vec<i16>,
        weight_bits: u32,
        weight_scale: f64,
        bias: Vec<f64>,
        combined_scale: f64,
        input: ActivationTable,
    ) -> Result<Self> {
        check_bits(weight_bits)?;
        if weights.len() != rows * cols {
            return Err(Error::InvalidLayer(format!(
                "{} weights for a {rows}x{cols} layer",
                weights.len()
            )));
        }
        if bias.len() != rows {
            return Err(Error::InvalidLayer(format!("{} biases for {rows} outputs", bias.len())));
        }
        let qw = weight_levels(weight_bits) as i32;
        if let Some(w) = weights.iter().find(|&&w| (w as i32).abs() > qw) {
            return Err(Error::InvalidLayer(format!("weight {w} outside ±{qw}")));
        }
        if !(weight_scale > 0.0 && weight_scale.is_finite()) {
            return Err(Error::InvalidLayer(format!(
                "weight scale {weight_scale} must be positive"
            )));
        }
        let expected = input.scale() * weight_scale / (input.levels() as f64 * qw as f64);
        if (combined_scale - expected).abs() > 1e-6 * expected {
            return Err(Error::InvalidLayer(format!(
                "combined scale {combined_scale} inconsistent with s_a s_w / (Q_a Q_w) = {expected}"
            )));
        }
        // i32 accumulation in the tile kernel relies on this bound.
        let acc_bits = accumulator_bits(input.bits(), weight_bits, cols);
        if acc_bits > 31 {
            return Err(Error::InvalidLayer(format!(
                "accumulator needs {acc_bits} bits; at most 31 supported"
            )));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            weight_bits,
            weight_scale,
            bias,
            combined_scale,
            input,
        })
    }

    /// Quantizes a full-precision layer with an identity weight table.
    pub fn quantize(dense: &DenseLayer, weight_bits: u32, weight_scale: f64, input: ActivationTable) -> Result<Self> {
        let table = WeightTable::identity(weight_bits, input.granularity())?;
        Self::quantize_with(dense, &table, weight_scale, input)
    }

    pub fn quantize_with(
        dense: &DenseLayer,
        table: &WeightTable,
        weight_scale: f64,
        input: ActivationTable,
    ) -> Result<Self> {
        let weights = dense
            .weights()
            .iter()
            .map(|&w| quantize_weight(w, weight_scale, table))
            .collect();
        let combined = input.scale() * weight_scale / (input.levels() as f64 * table.levels() as f64);
        Self::from_parts(
            dense.rows(),
            dense.cols(),
            weights,
            table.bits(),
            weight_scale,
            dense.bias().to_vec(),
            combined,
            input,
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[i16] {
        &self.weights
    }

    pub fn weight_row(&self, i: usize) -> &[i16] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn weight_bits(&self) -> u32 {
        self.weight_bits
    }

    pub fn weight_scale(&self) -> f64 {
        self.weight_scale
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn combined_scale(&self) -> f64 {
        self.combined_scale
    }

    pub fn input_table(&self) -> &ActivationTable {
        &self.input
    }

    pub fn accumulator_bits(&self) -> u32 {
        accumulator_bits(self.input.bits(), self.weight_bits, self.cols)
    }

    /// `Z = X Wᵀ` for a row-major `tile_rows × cols` tile, written into `out`
    /// (`tile_rows × rows`).
    pub fn forward_tile(&self, tile: &[u16], tile_rows: usize, out: &mut [i64]) {
        debug_assert_eq!(tile.len(), tile_rows * self.cols);
        debug_assert_eq!(out.len(), tile_rows * self.rows);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { self.forward_tile_avx2(tile, out) };
            return;
        }
        self.forward_rows(tile, out);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    fn forward_tile_avx2(&self, tile: &[u16], out: &mut [i64]) {
        self.forward_rows(tile, out);
    }

    #[inline(always)]
    fn forward_rows(&self, tile: &[u16], out: &mut [i64]) {
        let limit = 1i64 << (self.accumulator_bits() - 1);
        for (x, z) in tile.chunks_exact(self.cols).zip(out.chunks_exact_mut(self.rows)) {
            for (zi, w) in z.iter_mut().zip(self.weights.chunks_exact(self.cols)) {
                let acc = dot_i32(x, w) as i64;
                debug_assert!(acc.abs() < limit, "accumulator {acc} exceeds declared width");
                *zi = acc;
            }
        }
    }
}

/// Integer dot product. Cannot overflow for layers accepted by
/// [`QuantizedLayer::from_parts`] (accumulator width ≤ 31 bits).
#[inline(always)]
fn dot_i32(x: &[u16], w: &[i16]) -> i32 {
    let mut lanes = [0i32; 16];
    let xc = x.chunks_exact(16);
    let wc = w.chunks_exact(16);
    let (xr, wr) = (xc.remainder(), wc.remainder());
    for (xa, wa) in xc.zip(wc) {
        for k in 0..16 {
            lanes[k] = lanes[k].wrapping_add((xa[k] as i32).wrapping_mul(wa[k] as i32));
        }
    }
    let mut acc = lanes.iter().fold(0i32, |a, &b| a.wrapping_add(b));
    for (&a, &b) in xr.iter().zip(wr) {
        acc = acc.wrapping_add((a as i32).wrapping_mul(b as i32));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_lengths() {
        let t = ActivationTable::identity(8, 9, 1.0).unwrap();
        assert_eq!(t.entries().len(), 2296);
        let w = WeightTable::identity(8, 9).unwrap();
        assert_eq!(w.entries().len(), 2 * 9 * 127 + 1);
    }

    #[test]
    fn table_validation() {
        assert!(ActivationTable::new(8, 9, vec![0; 10], 1.0).is_err());
        let mut e = ActivationTable::identity(4, 9, 1.0).unwrap().entries().to_vec();
        e.swap(3, 40);
        assert!(ActivationTable::new(4, 9, e, 1.0).is_err());
        let mut e = ActivationTable::identity(4, 9, 1.0).unwrap().entries().to_vec();
        *e.last_mut().unwrap() = 16;
        assert!(ActivationTable::new(4, 9, e, 1.0).is_err());
        assert!(ActivationTable::identity(4, 9, 0.0).is_err());
    }

    #[test]
    fn activation_examples() {
        let t = ActivationTable::identity(8, 9, 1.0).unwrap();
        assert_eq!(t.index(-3.0), 0);
        assert_eq!(t.quantize(0.0), t.entries()[0]);
        assert_eq!(t.index(1.0), 2295);
        assert_eq!(t.index(7.5), 2295);
        assert_eq!(t.quantize(2.0), *t.entries().last().unwrap());
        assert_eq!(t.quantize(0.5), 128);
    }

    /// Brute-force enumeration of the identity index map: every index lands on
    /// the nearest integer level.
    #[test]
    fn identity_index_map_by_enumeration() {
        let t = ActivationTable::identity(8, 9, 1.0).unwrap();
        for i in 0..=2295usize {
            let expected = ((i as f64) / 9.0).round() as u16;
            assert_eq!(t.entries()[i], expected);
        }
        // x = 0.5: index round(2295 * 0.5) = round(1147.5) = 1148, level round(1148/9) = 128
        assert_eq!(t.index(0.5), 1148);
    }

    #[test]
    fn weight_examples() {
        let t = WeightTable::identity(8, 9).unwrap();
        assert_eq!(t.index(0.0, 1.0), 1143);
        assert_eq!(quantize_weight(0.0, 1.0, &t), 0);
        assert_eq!(t.index(-1.0, 1.0), 0);
        assert_eq!(quantize_weight(-5.0, 1.0, &t), -127);
        assert_eq!(t.index(1.0, 1.0), 2286);
        assert_eq!(quantize_weight(3.0, 1.0, &t), 127);
    }

    #[test]
    fn accumulate_examples() {
        assert_eq!(integer_accumulate(&[0; 16], &[5; 16]), 0);
        let acc = integer_accumulate(&[255; 128], &[127; 128]);
        assert_eq!(acc, 4_145_280);
        assert_eq!(accumulator_bits(8, 8, 128), 23);
        assert!(acc < 1 << 23);
        assert_eq!(integer_accumulate(&[3], &[-2]), -6);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(0, 0.25, 3.0), 0.25);
        let (sa, sw) = (1.7, 0.3);
        let saw = sa * sw / (255.0 * 127.0);
        assert!((dequantize(255 * 127, 0.0, saw) - sa * sw).abs() < 1e-12);
    }

    #[test]
    fn layer_rejects_inconsistent_scale() {
        let input = ActivationTable::identity(8, 9, 2.0).unwrap();
        let err = QuantizedLayer::from_parts(1, 2, vec![1, -1], 8, 0.5, vec![0.0], 1.0, input);
        assert!(matches!(err, Err(Error::InvalidLayer(_))));
    }

    /// Float-path oracle: a layer built with identity tables stays within 2%
    /// relative error of the full-precision product (b = 8, m = 128).
    #[test]
    fn quantized_layer_tracks_float_path() {
        let (m, n) = (128, 64);
        let (sa, sw) = (1.5, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights: Vec<f64> = (0..n * m).map(|_| rng.random_range(-sw..sw)).collect();
        let bias: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let dense = DenseLayer::new(n, m, weights.clone(), bias.clone()).unwrap();
        let input = ActivationTable::identity(8, 9, sa).unwrap();
        let layer = QuantizedLayer::quantize(&dense, 8, sw, input.clone()).unwrap();

        let mut worst: f64 = 0.0;
        let mut z = vec![0i64; n];
        for _ in 0..1000 {
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..sa)).collect();
            let qx: Vec<u16> = x.iter().map(|&v| input.quantize(v)).collect();
            layer.forward_tile(&qx, 1, &mut z);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                let yq = dequantize(z[i], bias[i], layer.combined_scale());
                let yf = bias[i] + (0..m).map(|j| weights[i * m + j] * x[j]).sum::<f64>();
                num += (yq - yf).powi(2);
                den += yf * yf;
            }
            worst = worst.max((num / den).sqrt());
        }
        assert!(worst <= 0.02, "worst relative error {worst}");
    }

    #[test]
    fn tile_kernel_matches_scalar_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n, rows) = (37, 5, 4);
        let dense = DenseLayer::new(
            n,
            m,
            (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            vec![0.0; n],
        )
        .unwrap();
        let input = ActivationTable::identity(8, 9, 1.0).unwrap();
        let layer = QuantizedLayer::quantize(&dense, 8, 1.0, input).unwrap();
        let tile: Vec<u16> = (0..rows * m).map(|_| rng.random_range(0..=255)).collect();
        let mut out = vec![0i64; rows * n];
        layer.forward_tile(&tile, rows, &mut out);
        for b in 0..rows {
            for i in 0..n {
                let expected = integer_accumulate(&tile[b * m..(b + 1) * m], layer.weight_row(i));
                assert_eq!(out[b * n + i], expected);
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_tables_preserve_order(x1 in -1.0..3.0f64, x2 in -1.0..3.0f64, bits in 4u32..=10) {
            let t = ActivationTable::identity(bits, 9, 2.0).unwrap();
            let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
            prop_assert!(t.quantize(lo) <= t.quantize(hi));
        }

        #[test]
        fn quantized_values_stay_in_range(x in -10.0..10.0f64, bits in 4u32..=10) {
            let t = ActivationTable::identity(bits, 9, 1.3).unwrap();
            prop_assert!(t.quantize(x) as u32 <= activation_levels(bits));
            let w = WeightTable::identity(bits, 9).unwrap();
            prop_assert!((quantize_weight(x, 1.3, &w) as i32).unsigned_abs() <= weight_levels(bits));
        }
    }
}
