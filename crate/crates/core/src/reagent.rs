//! ReAgent: discrete-action registration with a disentangled state update.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::featnet::{ChannelAffine, DenseLayer, Dequant, QuantStage};
use crate::features::{check_finite, FeatureExtractor};
use crate::lie::{rot_x_cs, rot_y_cs, rot_z_cs, ApplyMode, RigidTransform};
use crate::oracle::expert_action;
use crate::pointlk::RegistrationResult;
use crate::quant::{ActivationTable, QuantizedLayer, DEFAULT_GRANULARITY};

pub const N_ACT: usize = 5;
pub const STEP_UNIT: f64 = 1.0 / 900.0;
pub const ACTOR_FC1: usize = 512;
pub const ACTOR_FC2: usize = 256;
pub const DEFAULT_ITERS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Translation,
    Rotation,
}

/// Exponential step sizes `±3^k / 900` around a zero step at label `N_act`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTable {
    n_act: usize,
    steps: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl ActionTable {
    pub fn new(n_act: usize) -> Self {
        let steps: Vec<f64> = (0..=2 * n_act)
            .map(|a| {
                if a == n_act {
                    0.0
                } else if a < n_act {
                    -STEP_UNIT * 3f64.powi((n_act - a) as i32)
                } else {
                    STEP_UNIT * 3f64.powi((a - n_act) as i32)
                }
            })
            .collect();
        let cos = steps.iter().map(|s| s.cos()).collect();
        let sin = steps.iter().map(|s| s.sin()).collect();
        Self { n_act, steps, cos, sin }
    }

    pub fn n_act(&self) -> usize {
        self.n_act
    }

    pub fn labels(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Step for a label known to be valid.
    pub fn step(&self, a: usize) -> f64 {
        self.steps[a]
    }

    pub fn check(&self, a: usize) -> Result<()> {
        if a < self.steps.len() {
            Ok(())
        } else {
            Err(Error::InvalidAction {
                label: a,
                max: self.steps.len() - 1,
            })
        }
    }

    pub fn action_step(&self, a: usize) -> Result<f64> {
        self.check(a)?;
        Ok(self.steps[a])
    }
}

impl Default for ActionTable {
    fn default() -> Self {
        Self::new(N_ACT)
    }
}

/// `R_i = R_x R_y R_z(a_r) · R_{i−1}`, `t_i = t(a_t) + t_{i−1}`.
pub fn update_transform(
    prev: &RigidTransform,
    a_t: [usize; 3],
    a_r: [usize; 3],
    table: &ActionTable,
) -> Result<RigidTransform> {
    for &a in a_t.iter().chain(&a_r) {
        table.check(a)?;
    }
    let r = rot_x_cs(table.cos[a_r[0]], table.sin[a_r[0]])
        * rot_y_cs(table.cos[a_r[1]], table.sin[a_r[1]])
        * rot_z_cs(table.cos[a_r[2]], table.sin[a_r[2]]);
    let t = Vector3::new(table.step(a_t[0]), table.step(a_t[1]), table.step(a_t[2]));
    Ok(RigidTransform::chained(
        r * prev.rotation,
        t + prev.translation,
        prev.chain_length() + 1,
    ))
}

/// One actor head: two LLT-quantized layers and a full-precision output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorWeights {
    pub fc1: QuantizedLayer,
    pub affine1: Option<ChannelAffine>,
    pub relu1: bool,
    pub fc2: QuantizedLayer,
    pub affine2: Option<ChannelAffine>,
    pub relu2: bool,
    pub fc3: DenseLayer,
    pub relu3: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorOutput {
    /// Row-major `3 × labels`.
    pub logits: Vec<f64>,
    pub labels: [usize; 3],
}

fn expect(context: &'static str, expected: usize, actual: usize) -> Result<()> {
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

impl ActorWeights {
    pub fn validate(&self, state_dim: usize, labels: usize) -> Result<()> {
        expect("actor fc1 inputs", state_dim, self.fc1.cols())?;
        expect("actor fc1 outputs", ACTOR_FC1, self.fc1.rows())?;
        expect("actor fc2 inputs", ACTOR_FC1, self.fc2.cols())?;
        expect("actor fc2 outputs", ACTOR_FC2, self.fc2.rows())?;
        expect("actor fc3 inputs", ACTOR_FC2, self.fc3.cols())?;
        expect("actor fc3 outputs", 3 * labels, self.fc3.rows())?;
        if let Some(a) = &self.affine1 {
            expect("actor affine1", ACTOR_FC1, a.channels())?;
        }
        if let Some(a) = &self.affine2 {
            expect("actor affine2", ACTOR_FC2, a.channels())?;
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.fc1.cols()
    }
}

/// Per-row argmax over `labels` logits; ties go to the no-op label.
pub fn argmax_labels(logits: &[f64], n_act: usize) -> [usize; 3] {
    let labels = 2 * n_act + 1;
    let mut out = [n_act; 3];
    for (row, o) in out.iter_mut().enumerate() {
        let l = &logits[row * labels..(row + 1) * labels];
        let mut best = n_act;
        for k in 1..=n_act {
            for a in [n_act - k, n_act + k] {
                if l[a] > l[best] {
                    best = a;
                }
            }
        }
        *o = best;
    }
    out
}

pub fn actor_forward(state: &[f64], head: &ActorWeights, table: &ActionTable) -> Result<ActorOutput> {
    expect("actor state", head.state_dim(), state.len())?;
    expect("actor fc3 outputs", 3 * table.labels(), head.fc3.rows())?;
    let t1 = head.fc1.input_table();
    let q0: Vec<u16> = state.iter().map(|&x| t1.quantize(x)).collect();
    let mut z1 = vec![0i64; ACTOR_FC1];
    head.fc1.forward_tile(&q0, 1, &mut z1);

    let s1 = QuantStage {
        dequant: Some(Dequant {
            bias: head.fc1.bias(),
            scale: head.fc1.combined_scale(),
        }),
        affine: head.affine1.as_ref(),
        relu: head.relu1,
        next: None,
    };
    let t2 = head.fc2.input_table();
    let q1: Vec<u16> = z1
        .iter()
        .enumerate()
        .map(|(c, &z)| t2.quantize(s1.value(c, z as f64)))
        .collect();
    let mut z2 = vec![0i64; ACTOR_FC2];
    head.fc2.forward_tile(&q1, 1, &mut z2);

    let s2 = QuantStage {
        dequant: Some(Dequant {
            bias: head.fc2.bias(),
            scale: head.fc2.combined_scale(),
        }),
        affine: head.affine2.as_ref(),
        relu: head.relu2,
        next: None,
    };
    let h2: Vec<f64> = z2.iter().enumerate().map(|(c, &z)| s2.value(c, z as f64)).collect();
    let mut logits = vec![0.0; head.fc3.rows()];
    head.fc3.forward(&h2, &mut logits);
    if head.relu3 {
        logits.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let labels = argmax_labels(&logits, table.n_act());
    Ok(ActorOutput { logits, labels })
}

/// Full-precision actor used as a reference for the quantized path.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatActor {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub fc3: DenseLayer,
}

impl FloatActor {
    pub fn random(seed: u64, state_dim: usize, labels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        Self {
            fc1: DenseLayer::random(ACTOR_FC1, state_dim, he(state_dim), 0.05, &mut rng),
            fc2: DenseLayer::random(ACTOR_FC2, ACTOR_FC1, he(ACTOR_FC1), 0.05, &mut rng),
            fc3: DenseLayer::random(3 * labels, ACTOR_FC2, he(ACTOR_FC2), 0.05, &mut rng),
        }
    }

    fn hidden(&self, state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h1 = vec![0.0; ACTOR_FC1];
        self.fc1.forward(state, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut h2 = vec![0.0; ACTOR_FC2];
        self.fc2.forward(&h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.max(0.0));
        (h1, h2)
    }

    pub fn logits(&self, state: &[f64]) -> Vec<f64> {
        let (_, h2) = self.hidden(state);
        let mut out = vec![0.0; self.fc3.rows()];
        self.fc3.forward(&h2, &mut out);
        out
    }

    /// Quantizes fc1 and fc2 with identity tables; activation scales come from
    /// the largest inputs seen over `calibration` states.
    pub fn quantize(&self, bits: u32, calibration: &[Vec<f64>]) -> Result<ActorWeights> {
        let mut s0 = 0.0f64;
        let mut s1 = 0.0f64;
        for state in calibration {
            s0 = state.iter().fold(s0, |m, &v| m.max(v));
            let (h1, _) = self.hidden(state);
            s1 = h1.iter().fold(s1, |m, &v| m.max(v));
        }
        let positive = |r: f64| if r > 0.0 { r } else { 1.0 };
        let t1 = ActivationTable::identity(bits, DEFAULT_GRANULARITY, positive(s0))?;
        let t2 = ActivationTable::identity(bits, DEFAULT_GRANULARITY, positive(s1))?;
        Ok(ActorWeights {
            fc1: QuantizedLayer::quantize(&self.fc1, bits, positive(self.fc1.max_abs_weight()), t1)?,
            affine1: None,
            relu1: true,
            fc2: QuantizedLayer::quantize(&self.fc2, bits, positive(self.fc2.max_abs_weight()), t2)?,
            affine2: None,
            relu2: true,
            fc3: self.fc3.clone(),
            relu3: false,
        })
    }
}

/// Seeded non-negative states resembling max-pooled features.
pub fn random_states(seed: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}

/// Where the per-iteration labels come from.
#[derive(Clone, Copy, Debug)]
pub enum Actors<'a> {
    Learned {
        translation: &'a ActorWeights,
        rotation: &'a ActorWeights,
    },
    /// Greedy expert toward a ground-truth transform given in the standard convention.
    Expert { target: RigidTransform },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReAgentOptions {
    pub max_iters: usize,
    pub n_act: usize,
}

impl Default for ReAgentOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_ITERS,
            n_act: N_ACT,
        }
    }
}

/// Runs exactly `max_iters` iterations. The returned transform (and the
/// per-iteration history) is in the standard convention.
pub fn register<E: FeatureExtractor + ?Sized>(
    source: &PointCloud,
    template: &PointCloud,
    extractor: &E,
    actors: Actors<'_>,
    opts: &ReAgentOptions,
) -> Result<RegistrationResult> {
    let table = ActionTable::new(opts.n_act);
    let mu = source.centroid();
    let mode = ApplyMode::Disentangled(mu);
    let expert_target = match actors {
        Actors::Expert { target } => Some(target.standard_to_disentangled(&mu)),
        Actors::Learned { translation, rotation } => {
            translation.validate(2 * extractor.dim(), table.labels())?;
            rotation.validate(2 * extractor.dim(), table.labels())?;
            None
        }
    };

    let f_t = extractor.extract(template, &RigidTransform::identity(), ApplyMode::Standard)?;
    check_finite(&f_t, "template")?;
    let mut g = RigidTransform::identity();
    let mut result = RegistrationResult::default();
    for _ in 0..opts.max_iters {
        let f_s = extractor.extract(source, &g, mode)?;
        check_finite(&f_s, "source")?;
        let (a_t, a_r) = match (actors, &expert_target) {
            (Actors::Learned { translation, rotation }, _) => {
                let state: Vec<f64> = f_s.iter().chain(f_t.iter()).copied().collect();
                let t = actor_forward(&state, translation, &table)?;
                let r = actor_forward(&state, rotation, &table)?;
                (t.labels, r.labels)
            }
            (Actors::Expert { .. }, Some(target)) => (
                expert_action(&g, target, Head::Translation, &table),
                expert_action(&g, target, Head::Rotation, &table),
            ),
            (Actors::Expert { .. }, None) => unreachable!("expert target is set above"),
        };
        g = update_transform(&g, a_t, a_r, &table)?;
        let step: DVector<f64> = DVector::from_iterator(6, a_r.iter().chain(&a_t).map(|&a| table.step(a)));
        result.push(g.disentangled_to_standard(&mu), step.norm());
    }
    result.converged = result.twist_norms.last().is_some_and(|&n| n == 0.0);
    result.transform = g.disentangled_to_standard(&mu);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CountingExtractor;
    use crate::lie::{rot_x, rot_y, rot_z};
    use crate::oracle::{expert_residual, MomentFeatures};

    #[test]
    fn action_table_values() {
        let t = ActionTable::default();
        assert_eq!(t.action_step(5).unwrap(), 0.0);
        assert!((t.action_step(10).unwrap() - 0.27).abs() < 1e-15);
        assert!((t.action_step(0).unwrap() + 0.27).abs() < 1e-15);
        assert!((t.action_step(6).unwrap() - 1.0 / 300.0).abs() < 1e-18);
        assert!(t.action_step(11).is_err());
        for k in 1..=5 {
            assert_eq!(t.step(5 + k), -t.step(5 - k));
        }
    }

    #[test]
    fn update_examples() {
        let t = ActionTable::default();
        let id = RigidTransform::identity();
        let g = RigidTransform::new(rot_x(0.2), Vector3::new(0.1, 0.2, 0.3));
        let same = update_transform(&g, [5; 3], [5; 3], &t).unwrap();
        assert!(same.approx_eq(&g, 0.0));

        let moved = update_transform(&id, [6, 5, 5], [5; 3], &t).unwrap();
        assert!((moved.translation - Vector3::new(1.0 / 300.0, 0.0, 0.0)).norm() < 1e-18);
        assert_eq!(moved.rotation, nalgebra::Matrix3::identity());
        assert!(update_transform(&id, [11, 5, 5], [5; 3], &t).is_err());
    }

    #[test]
    fn translation_update_ignores_rotation() {
        let t = ActionTable::default();
        let g = RigidTransform::new(rot_z(0.7), Vector3::new(0.1, 0.0, 0.0));
        let next = update_transform(&g, [8, 5, 5], [5, 5, 10], &t).unwrap();
        assert!((next.translation - Vector3::new(0.1 + 0.03, 0.0, 0.0)).norm() < 1e-15);
        let standard = RigidTransform::from_translation(Vector3::new(0.03, 0.0, 0.0)) * g;
        assert!((standard.translation - next.translation).norm() < 1e-15);
        let standard_rot = RigidTransform::new(rot_z(0.27), Vector3::new(0.03, 0.0, 0.0)) * g;
        assert!((standard_rot.translation - next.translation).norm() > 1e-3);
    }

    #[test]
    fn mirrored_actions_undo_rotation() {
        let t = ActionTable::default();
        let start = RigidTransform::new(rot_y(0.4), Vector3::zeros());
        let a_r = [8, 2, 10];
        let forward = update_transform(&start, [5; 3], a_r, &t).unwrap();
        // Left-multiplying peels off Rx first, then Ry, then Rz.
        let mut g = forward;
        for (axis, &a) in a_r.iter().enumerate() {
            let mut mirror = [5; 3];
            mirror[axis] = 10 - a;
            g = update_transform(&g, [5; 3], mirror, &t).unwrap();
        }
        assert!((g.rotation - start.rotation).amax() < 1e-9);
    }

    #[test]
    fn argmax_ties_go_to_no_op() {
        assert_eq!(argmax_labels(&[0.0; 33], 5), [5, 5, 5]);
        let mut l = vec![0.0; 33];
        l[2] = 1.0;
        l[11 + 9] = 1.0;
        l[11 + 1] = 1.0;
        // Equal distance from the no-op: the lower label is visited first.
        assert_eq!(argmax_labels(&l, 5), [2, 1, 5]);
    }

    fn zero_actor(state_dim: usize) -> ActorWeights {
        let float = FloatActor {
            fc1: DenseLayer::zeros(ACTOR_FC1, state_dim),
            fc2: DenseLayer::zeros(ACTOR_FC2, ACTOR_FC1),
            fc3: DenseLayer::zeros(33, ACTOR_FC2),
        };
        float.quantize(8, &[vec![1.0; state_dim]]).unwrap()
    }

    #[test]
    fn zero_actor_outputs_no_ops() {
        let a = zero_actor(2048);
        let out = actor_forward(&vec![0.3; 2048], &a, &ActionTable::default()).unwrap();
        assert_eq!(out.labels, [5, 5, 5]);
        assert!(actor_forward(&[0.0; 10], &a, &ActionTable::default()).is_err());
    }

    #[test]
    fn permuted_state_and_columns_give_same_logits() {
        let dim = 64;
        let float = FloatActor::random(3, dim, 11);
        let states = random_states(4, 20, dim);
        let actor = float.quantize(8, &states).unwrap();
        let perm: Vec<usize> = (0..dim).map(|i| (i * 17 + 5) % dim).collect();
        let mut fc1 = actor.fc1.weights().to_vec();
        for r in 0..ACTOR_FC1 {
            for (c, &p) in perm.iter().enumerate() {
                fc1[r * dim + c] = actor.fc1.weights()[r * dim + p];
            }
        }
        let mut permuted = actor.clone();
        permuted.fc1 = QuantizedLayer::from_parts(
            ACTOR_FC1,
            dim,
            fc1,
            actor.fc1.weight_bits(),
            actor.fc1.weight_scale(),
            actor.fc1.bias().to_vec(),
            actor.fc1.combined_scale(),
            actor.fc1.input_table().clone(),
        )
        .unwrap();
        let table = ActionTable::default();
        for s in &states {
            let ps: Vec<f64> = perm.iter().map(|&p| s[p]).collect();
            let a = actor_forward(s, &actor, &table).unwrap();
            let b = actor_forward(&ps, &permuted, &table).unwrap();
            assert_eq!(a.logits, b.logits);
        }
    }

    #[test]
    fn quantized_actor_matches_float_argmax() {
        let dim = 2048;
        let float = FloatActor::random(21, dim, 11);
        let calibration = random_states(22, 64, dim);
        let actor = float.quantize(8, &calibration).unwrap();
        let table = ActionTable::default();
        let states = random_states(23, 1000, dim);
        let mut agree = 0;
        for s in &states {
            let q = actor_forward(s, &actor, &table).unwrap();
            let f = argmax_labels(&float.logits(s), 5);
            agree += q.labels.iter().zip(&f).filter(|(a, b)| a == b).count();
        }
        let rate = agree as f64 / 3000.0;
        assert!(rate >= 0.95, "agreement {rate}");
    }

    fn cube() -> PointCloud {
        let mut rows = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                rows.push([i as f64 / 3.0 - 0.2, j as f64 / 3.0 * 0.7, (i * j) as f64 / 9.0]);
            }
        }
        PointCloud::from_rows(&rows).unwrap()
    }

    #[test]
    fn expert_identity_stays_put() {
        let m = CountingExtractor::new(MomentFeatures::new(2).unwrap());
        let c = cube();
        let r = register(
            &c,
            &c,
            &m,
            Actors::Expert {
                target: RigidTransform::identity(),
            },
            &ReAgentOptions::default(),
        )
        .unwrap();
        assert!(r.transform.approx_eq(&RigidTransform::identity(), 0.0));
        assert_eq!(r.iterations, 10);
        assert_eq!(m.calls(), 11);
    }

    #[test]
    fn expert_pure_translation() {
        let m = MomentFeatures::new(2).unwrap();
        let c = cube();
        let target = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let r = register(&c, &c, &m, Actors::Expert { target }, &ReAgentOptions::default()).unwrap();
        assert!((r.transform.translation - target.translation).amax() <= 1.0 / 900.0);
    }

    #[test]
    fn expert_residuals_never_grow_per_axis() {
        let table = ActionTable::default();
        let target = RigidTransform::new(rot_x(0.3) * rot_z(-0.5), Vector3::new(0.2, -0.4, 0.1));
        let mut g = RigidTransform::identity();
        let mut prev = expert_residual(&g, &target, Head::Translation);
        for _ in 0..10 {
            let a_t = expert_action(&g, &target, Head::Translation, &table);
            let a_r = expert_action(&g, &target, Head::Rotation, &table);
            g = update_transform(&g, a_t, a_r, &table).unwrap();
            let r = expert_residual(&g, &target, Head::Translation);
            assert!(r.iter().zip(prev.iter()).all(|(a, b)| a.abs() <= b.abs()));
            prev = r;
        }
    }

    #[test]
    fn learned_zero_actors_leave_transform_unchanged() {
        let m = MomentFeatures::new(3).unwrap();
        let c = cube();
        let a = zero_actor(38);
        let r = register(
            &c,
            &c,
            &m,
            Actors::Learned {
                translation: &a,
                rotation: &a,
            },
            &ReAgentOptions::default(),
        )
        .unwrap();
        assert!(r.transform.approx_eq(&RigidTransform::identity(), 0.0));
    }
}
