//! PointNetLK: inverse-compositional Lucas–Kanade on global features.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector6};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::features::{check_finite, Feature, FeatureExtractor};
use crate::lie::{exp_se3, perturbation, ApplyMode, RigidTransform, Sign, Twist};

pub const DEFAULT_STEP: f64 = 0.01;
pub const DEFAULT_EPSILON: f64 = 1e-7;
pub const DEFAULT_ITERS: usize = 20;
/// Normalized-determinant threshold below which a 3×3 block counts as singular.
pub const SINGULAR_RATIO: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JacobianMethod {
    Forward,
    Backward,
    Central,
    FivePoint,
}

impl JacobianMethod {
    pub const ALL: [JacobianMethod; 4] = [Self::Backward, Self::Forward, Self::Central, Self::FivePoint];

    /// Feature extractions needed, excluding the unperturbed template feature.
    pub fn calls(self) -> usize {
        match self {
            Self::Forward | Self::Backward => 6,
            Self::Central => 12,
            Self::FivePoint => 24,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Backward => "backward",
            Self::Central => "central",
            Self::FivePoint => "five-point",
        }
    }
}

impl fmt::Display for JacobianMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JacobianMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forward" => Ok(Self::Forward),
            "backward" => Ok(Self::Backward),
            "central" => Ok(Self::Central),
            "five-point" | "five_point" | "fivepoint" => Ok(Self::FivePoint),
            other => Err(Error::InvalidConfig(format!("unknown Jacobian method '{other}'"))),
        }
    }
}

/// How the template is perturbed along each generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PerturbKind {
    /// `exp(s ê_j)`.
    #[default]
    Exact,
    /// `I + s ê_j` with the rotation block projected back onto SO(3).
    FirstOrder,
}

fn perturbed(j: usize, s: f64, kind: PerturbKind) -> Result<RigidTransform> {
    match kind {
        PerturbKind::Exact => Ok(exp_se3(&Twist::axis(j, s)?)),
        PerturbKind::FirstOrder => {
            let sign = if s < 0.0 { Sign::Minus } else { Sign::Plus };
            perturbation(j, s.abs(), sign)
        }
    }
}

/// Finite-difference estimate of `∂φ(exp(−Δξ) P_T)/∂Δξ` at zero.
///
/// `base` is `φ(P_T)`; it is only used by the one-sided methods.
pub fn numerical_jacobian_with_base<E: FeatureExtractor + ?Sized>(
    template: &PointCloud,
    base: &Feature,
    extractor: &E,
    method: JacobianMethod,
    steps: &[f64; 6],
    kind: PerturbKind,
) -> Result<DMatrix<f64>> {
    if let Some(&t) = steps.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidConfig(format!("Jacobian step {t} must be positive")));
    }
    let k = base.len();
    let mut jac = DMatrix::zeros(k, 6);
    let phi = |j: usize, s: f64| -> Result<Feature> {
        let g = perturbed(j, s, kind)?;
        let f = extractor.extract(template, &g, ApplyMode::Standard)?;
        check_finite(&f, "perturbed template")?;
        if f.len() != k {
            return Err(Error::DimensionMismatch {
                context: "perturbed feature",
                expected: k,
                actual: f.len(),
            });
        }
        Ok(f)
    };
    for (col, &t) in steps.iter().enumerate() {
        let j = col + 1;
        let column = match method {
            JacobianMethod::Backward => (phi(j, -t)? - base) / t,
            JacobianMethod::Forward => (base - phi(j, t)?) / t,
            JacobianMethod::Central => (phi(j, -t)? - phi(j, t)?) / (2.0 * t),
            JacobianMethod::FivePoint => {
                let (p2, p1, m1, m2) = (phi(j, 2.0 * t)?, phi(j, t)?, phi(j, -t)?, phi(j, -2.0 * t)?);
                (p2 - p1 * 8.0 + m1 * 8.0 - m2) / (12.0 * t)
            }
        };
        jac.set_column(col, &column);
    }
    Ok(jac)
}

pub fn numerical_jacobian<E: FeatureExtractor + ?Sized>(
    template: &PointCloud,
    extractor: &E,
    method: JacobianMethod,
    steps: &[f64; 6],
    kind: PerturbKind,
) -> Result<DMatrix<f64>> {
    let base = match method {
        JacobianMethod::Forward | JacobianMethod::Backward => {
            extractor.extract(template, &RigidTransform::identity(), ApplyMode::Standard)?
        }
        _ => DVector::zeros(extractor.dim()),
    };
    numerical_jacobian_with_base(template, &base, extractor, method, steps, kind)
}

/// `|det M| / Π‖row_i(reference)‖`. With `reference = M` this is zero for
/// singular and one for orthogonal rows.
fn normalized_det(m: &Matrix3<f64>, reference: &Matrix3<f64>) -> f64 {
    let hadamard: f64 = (0..3).map(|i| reference.row(i).norm()).product();
    if hadamard == 0.0 {
        0.0
    } else {
        m.determinant().abs() / hadamard
    }
}

/// Adjugate inverse of a 3×3 block, rejecting near-singular blocks.
fn inverse3(m: &Matrix3<f64>, reference: &Matrix3<f64>, block: &'static str) -> Result<Matrix3<f64>> {
    let ratio = normalized_det(m, reference);
    if ratio.is_nan() || ratio < SINGULAR_RATIO {
        return Err(Error::SingularJacobian { block, ratio });
    }
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    let adj = Matrix3::new(
        c(1, 2, 1, 2),
        -c(0, 2, 1, 2),
        c(0, 1, 1, 2),
        -c(1, 2, 0, 2),
        c(0, 2, 0, 2),
        -c(0, 1, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 0, 1),
        c(0, 1, 0, 1),
    );
    Ok(adj / m.determinant())
}

/// `(JᵀJ)⁻¹` by 2×2 block inversion of 3×3 blocks.
fn block_inverse(h: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let a: Matrix3<f64> = h.fixed_view::<3, 3>(0, 0).into();
    let b: Matrix3<f64> = h.fixed_view::<3, 3>(0, 3).into();
    let d: Matrix3<f64> = h.fixed_view::<3, 3>(3, 3).into();
    let a_inv = inverse3(&a, &a, "rotation")?;
    let a_inv_b = a_inv * b;
    let s = d - b.transpose() * a_inv_b;
    // The Schur complement is measured against D: cancellation makes its own rows tiny.
    let s_inv = inverse3(&s, &d, "schur")?;
    let upper_right = -a_inv_b * s_inv;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(a_inv - upper_right * a_inv_b.transpose()));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&upper_right);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&upper_right.transpose());
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&s_inv);
    Ok(out)
}

fn gram(j: &DMatrix<f64>) -> Result<Matrix6<f64>> {
    if j.ncols() != 6 {
        return Err(Error::DimensionMismatch {
            context: "Jacobian columns",
            expected: 6,
            actual: j.ncols(),
        });
    }
    let h = j.transpose() * j;
    Ok(Matrix6::from_fn(|r, c| h[(r, c)]))
}

/// `J† = (JᵀJ)⁻¹ Jᵀ` via blockwise inversion.
pub fn pinv6(j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h_inv = block_inverse(&gram(j)?)?;
    Ok(to_dmatrix(&h_inv) * j.transpose())
}

/// As [`pinv6`], retrying with `λ = 1e-9 · tr(JᵀJ)` on the diagonal if singular.
pub fn pinv6_ridge(j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h = gram(j)?;
    let h_inv = match block_inverse(&h) {
        Ok(inv) => inv,
        Err(Error::SingularJacobian { .. }) => {
            let lambda = 1e-9 * h.trace();
            block_inverse(&(h + Matrix6::identity() * lambda))?
        }
        Err(e) => return Err(e),
    };
    Ok(to_dmatrix(&h_inv) * j.transpose())
}

fn to_dmatrix(m: &Matrix6<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(6, 6, |r, c| m[(r, c)])
}

#[derive(Clone, Debug)]
pub struct JacobianBundle {
    pub j: DMatrix<f64>,
    pub jdag: DMatrix<f64>,
    pub method: JacobianMethod,
    pub steps: [f64; 6],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LkOptions {
    pub max_iters: usize,
    pub epsilon: f64,
    pub steps: [f64; 6],
    pub method: JacobianMethod,
    pub perturb: PerturbKind,
    pub ridge: bool,
}

impl Default for LkOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_ITERS,
            epsilon: DEFAULT_EPSILON,
            steps: [DEFAULT_STEP; 6],
            method: JacobianMethod::Central,
            perturb: PerturbKind::Exact,
            ridge: false,
        }
    }
}

impl LkOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be non-negative",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RegistrationResult {
    /// Estimated transform taking the source onto the template.
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
    /// Update magnitude per iteration.
    pub twist_norms: Vec<f64>,
    /// Transform after each iteration.
    pub transforms: Vec<RigidTransform>,
}

impl RegistrationResult {
    pub(crate) fn push(&mut self, g: RigidTransform, step_norm: f64) {
        self.transform = g;
        self.transforms.push(g);
        self.twist_norms.push(step_norm);
        self.iterations += 1;
    }
}

/// Template feature, Jacobian and pseudoinverse, computed once per registration.
pub fn precompute<E: FeatureExtractor + ?Sized>(
    template: &PointCloud,
    extractor: &E,
    opts: &LkOptions,
) -> Result<(Feature, JacobianBundle)> {
    let f_t = extractor.extract(template, &RigidTransform::identity(), ApplyMode::Standard)?;
    check_finite(&f_t, "template")?;
    let j = numerical_jacobian_with_base(template, &f_t, extractor, opts.method, &opts.steps, opts.perturb)?;
    let jdag = if opts.ridge { pinv6_ridge(&j)? } else { pinv6(&j)? };
    Ok((
        f_t,
        JacobianBundle {
            j,
            jdag,
            method: opts.method,
            steps: opts.steps,
        },
    ))
}

pub fn register<E: FeatureExtractor + ?Sized>(
    source: &PointCloud,
    template: &PointCloud,
    extractor: &E,
    opts: &LkOptions,
) -> Result<RegistrationResult> {
    opts.validate()?;
    let (f_t, bundle) = precompute(template, extractor, opts)?;
    let mut g = RigidTransform::identity();
    let mut result = RegistrationResult::default();
    for _ in 0..opts.max_iters {
        let f_s = extractor.extract(source, &g, ApplyMode::Standard)?;
        check_finite(&f_s, "source")?;
        let dx = &bundle.jdag * (f_s - &f_t);
        let xi = Twist::from_vector(&Vector6::from_iterator(dx.iter().copied()));
        g = exp_se3(&xi).compose(&g);
        let norm = xi.norm();
        result.push(g, norm);
        if norm < opts.epsilon {
            result.converged = true;
            break;
        }
    }
    Ok(result)
}

/// [`register`] on centroid-centered copies of both clouds, with the
/// result mapped back to the original frames.
pub fn register_centered<E: FeatureExtractor + ?Sized>(
    source: &PointCloud,
    template: &PointCloud,
    extractor: &E,
    opts: &LkOptions,
) -> Result<RegistrationResult> {
    let (cs, ct) = (source.centroid(), template.centroid());
    let to_src = RigidTransform::from_translation(-cs);
    let from_tpl = RigidTransform::from_translation(ct);
    let src = to_src.apply(source, ApplyMode::Standard);
    let tpl = RigidTransform::from_translation(-ct).apply(template, ApplyMode::Standard);
    let mut result = register(&src, &tpl, extractor, opts)?;
    let uncenter = |g: &RigidTransform| from_tpl.compose(g).compose(&to_src);
    result.transform = uncenter(&result.transform);
    result.transforms.iter_mut().for_each(|g| *g = uncenter(g));
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CountingExtractor;
    use crate::lie::{rot_x, rot_y, rotation_angle};
    use crate::oracle::MomentFeatures;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Constant;

    impl FeatureExtractor for Constant {
        fn dim(&self) -> usize {
            4
        }

        fn extract(&self, _: &PointCloud, _: &RigidTransform, _: ApplyMode) -> Result<Feature> {
            Ok(DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]))
        }
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.3..0.3),
                ]
            })
            .collect();
        PointCloud::from_rows(&rows).unwrap()
    }

    #[test]
    fn method_parsing() {
        assert_eq!(
            "five-point".parse::<JacobianMethod>().unwrap(),
            JacobianMethod::FivePoint
        );
        assert_eq!("Central".parse::<JacobianMethod>().unwrap(), JacobianMethod::Central);
        assert!("sideways".parse::<JacobianMethod>().is_err());
    }

    #[test]
    fn constant_features_give_zero_jacobian() {
        let c = random_cloud(1, 10);
        for m in JacobianMethod::ALL {
            let j = numerical_jacobian(&c, &Constant, m, &[0.01; 6], PerturbKind::Exact).unwrap();
            assert_eq!(j, DMatrix::zeros(4, 6));
        }
    }

    #[test]
    fn translation_columns_of_means_agree_across_methods() {
        let c = random_cloud(2, 50);
        let m = MomentFeatures::new(1).unwrap();
        let reference = numerical_jacobian(&c, &m, JacobianMethod::Central, &[0.01; 6], PerturbKind::Exact).unwrap();
        for method in JacobianMethod::ALL {
            let j = numerical_jacobian(&c, &m, method, &[0.01; 6], PerturbKind::Exact).unwrap();
            for col in 3..6 {
                for row in 0..3 {
                    let expected = if row == col - 3 { -1.0 } else { 0.0 };
                    assert!((j[(row, col)] - expected).abs() < 1e-12);
                    assert!((j[(row, col)] - reference[(row, col)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn central_and_backward_against_analytic() {
        let c = random_cloud(3, 200);
        let m = MomentFeatures::new(2).unwrap();
        let exact = m.analytic_jacobian(&c);
        let rel = |method| {
            let j = numerical_jacobian(&c, &m, method, &[0.01; 6], PerturbKind::Exact).unwrap();
            (j - &exact).norm() / exact.norm()
        };
        assert!(rel(JacobianMethod::Central) < 1e-3);
        assert!(rel(JacobianMethod::Backward) < 1e-1);
    }

    #[test]
    fn call_counts() {
        let c = random_cloud(4, 20);
        for method in JacobianMethod::ALL {
            let e = CountingExtractor::new(MomentFeatures::new(3).unwrap());
            let f0 = e.extract(&c, &RigidTransform::identity(), ApplyMode::Standard).unwrap();
            e.reset();
            numerical_jacobian_with_base(&c, &f0, &e, method, &[0.01; 6], PerturbKind::Exact).unwrap();
            assert_eq!(e.calls(), method.calls());
        }
    }

    #[test]
    fn pinv_of_identity_columns_is_transpose() {
        let j = DMatrix::from_fn(10, 6, |r, c| if r == c { 1.0 } else { 0.0 });
        let p = pinv6(&j).unwrap();
        assert!((p - j.transpose()).amax() < 1e-15);
    }

    #[test]
    fn pinv_inverts_random_full_rank() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = DMatrix::from_fn(1024, 6, |_, _| rng.random_range(-1.0..1.0));
            let p = pinv6(&j).unwrap();
            assert!((p * &j - DMatrix::identity(6, 6)).amax() < 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn pinv_matches_svd_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let j = DMatrix::from_fn(30, 6, |_, _| rng.random_range(-1.0..1.0));
        let svd = j.clone().pseudo_inverse(1e-14).unwrap();
        assert!((pinv6(&j).unwrap() - svd).amax() < 1e-10);
    }

    #[test]
    fn duplicate_columns_are_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (a, b) in [(0, 1), (1, 4), (3, 5), (2, 3)] {
            let mut j = DMatrix::from_fn(50, 6, |_, _| rng.random_range(-1.0..1.0));
            let col = j.column(a).clone_owned();
            j.set_column(b, &col);
            assert!(matches!(pinv6(&j), Err(Error::SingularJacobian { .. })), "{a},{b}");
            let p = pinv6_ridge(&j).unwrap();
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn identical_clouds_converge_immediately() {
        let c = random_cloud(6, 64);
        let e = CountingExtractor::new(MomentFeatures::new(3).unwrap());
        let r = register(&c, &c, &e, &LkOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!(r.transform.approx_eq(&RigidTransform::identity(), 1e-12));
        assert_eq!(e.calls(), 1 + 12 + 1);
    }

    fn moved_pair(seed: u64) -> (PointCloud, PointCloud, RigidTransform) {
        let template = random_cloud(seed, 256);
        let g = RigidTransform::new(rot_x(0.1) * rot_y(0.12), Vector3::new(0.06, -0.05, 0.06));
        let truth = g.inverse();
        (g.apply(&template, ApplyMode::Standard), template, truth)
    }

    #[test]
    fn centering_handles_large_translation() {
        let template = random_cloud(8, 256);
        let g = RigidTransform::new(rot_x(0.1) * rot_y(0.12), Vector3::new(2.0, -3.0, 1.5));
        let src = g.apply(&template, ApplyMode::Standard);
        let m = MomentFeatures::new(3).unwrap();
        let r = register_centered(&src, &template, &m, &LkOptions::default()).unwrap();
        assert!(r.transform.approx_eq(&g.inverse(), 1e-5));
        assert!(r.transforms.last().unwrap().approx_eq(&r.transform, 0.0));
    }

    #[test]
    fn converges_on_moderate_motion() {
        let (src, tpl, truth) = moved_pair(7);
        let m = MomentFeatures::new(3).unwrap();
        let r = register(&src, &tpl, &m, &LkOptions::default()).unwrap();
        let err = rotation_angle(&(r.transform.rotation.transpose() * truth.rotation)).to_degrees();
        assert!(err < 0.1, "rotation error {err}");
        assert!((r.transform.translation - truth.translation).norm() < 1e-3);
        assert!(r.twist_norms.iter().all(|v| v.is_finite()));
        let n = r.twist_norms.len();
        assert!(n >= 3);
        assert!(r.twist_norms[n - 1] <= r.twist_norms[n - 2] && r.twist_norms[n - 2] <= r.twist_norms[n - 3]);
        assert_eq!(r.transforms.len(), r.iterations);
    }

    #[test]
    fn extraction_count_is_one_plus_jacobian_plus_iterations() {
        let (src, tpl, _) = moved_pair(8);
        for method in JacobianMethod::ALL {
            for iters in [1, 3, 20] {
                let e = CountingExtractor::new(MomentFeatures::new(3).unwrap());
                let opts = LkOptions {
                    max_iters: iters,
                    method,
                    ..Default::default()
                };
                let r = register(&src, &tpl, &e, &opts).unwrap();
                assert_eq!(e.calls(), 1 + method.calls() + r.iterations);
            }
        }
    }
}
