//! Trajectory accuracy, tracking robustness and the unified SLAM metric.
//!
//! `USM_λ(ATE, TR) = TR · exp(-λ · ATE)` with ATE in meters, TR a fraction in
//! `[0, 1]` and λ in inverse meters. A practical λ is `0.1 / (typical ATE)`,
//! which keeps `λ · ATE` small so that `USM ≈ TR · (1 - λ · ATE)`.
//!
//! Trajectories use the TUM text format: one `timestamp tx ty tz qx qy qz qw`
//! line per pose, `#` comments and blank lines ignored.

use std::fmt::Write as _;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default maximum timestamp difference for association, seconds.
pub const DEFAULT_MAX_TIME_DIFF: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("trajectory line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid trajectory: {0}")]
    Validation(String),
    #[error("no pose pairs within {max_time_diff} s of each other")]
    NoAssociation { max_time_diff: f64 },
    #[error("{got} associated pairs, need at least {needed}")]
    InsufficientPairs { needed: usize, got: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsmParams {
    lambda: f64,
}

impl UsmParams {
    pub fn new(lambda: f64) -> Result<Self, MetricsError> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(MetricsError::InvalidInput(format!(
                "lambda must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    /// λ = 0.1 / average dataset ATE.
    pub fn from_average_ate(avg_dataset_ate: f64) -> Result<Self, MetricsError> {
        if !(avg_dataset_ate.is_finite() && avg_dataset_ate > 0.0) {
            return Err(MetricsError::InvalidInput(format!(
                "average dataset ATE must be positive, got {avg_dataset_ate}"
            )));
        }
        Self::new(0.1 / avg_dataset_ate)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for UsmParams {
    /// λ = 10 m⁻¹, suited to indoor sequences with centimeter-level ATE.
    fn default() -> Self {
        Self { lambda: 10.0 }
    }
}

pub fn default_lambda(avg_dataset_ate: f64) -> Result<UsmParams, MetricsError> {
    UsmParams::from_average_ate(avg_dataset_ate)
}

/// `TR · exp(-λ · ATE)`. Out-of-range inputs are rejected, never clamped.
pub fn usm(ate_rmse: f64, tracking_rate: f64, params: &UsmParams) -> Result<f64, MetricsError> {
    if !(ate_rmse.is_finite() && ate_rmse >= 0.0) {
        return Err(MetricsError::InvalidInput(format!(
            "ATE RMSE must be finite and non-negative, got {ate_rmse}"
        )));
    }
    if !(0.0..=1.0).contains(&tracking_rate) {
        return Err(MetricsError::InvalidInput(format!(
            "tracking rate must lie in [0, 1], got {tracking_rate}"
        )));
    }
    Ok(tracking_rate * (-params.lambda * ate_rmse).exp())
}

pub fn tracking_rate(tracked_frames: usize, total_frames: usize) -> Result<f64, MetricsError> {
    if total_frames == 0 {
        return Err(MetricsError::InvalidInput("total frame count is zero".into()));
    }
    if tracked_frames > total_frames {
        return Err(MetricsError::InvalidInput(format!(
            "{tracked_frames} tracked frames out of {total_frames}"
        )));
    }
    Ok(tracked_frames as f64 / total_frames as f64)
}

/// One evaluator outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ate_rmse: f64,
    pub tracking_rate: f64,
    pub usm: f64,
}

impl EvalResult {
    pub fn new(ate_rmse: f64, tracking_rate: f64, params: &UsmParams) -> Result<Self, MetricsError> {
        Ok(Self {
            ate_rmse,
            tracking_rate,
            usm: usm(ate_rmse, tracking_rate, params)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    /// Checks strictly increasing timestamps.
    pub fn new(poses: Vec<Pose>) -> Result<Self, MetricsError> {
        for (i, w) in poses.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(MetricsError::Validation(format!(
                    "timestamps not strictly increasing at pose {} ({} after {})",
                    i + 1,
                    w[1].timestamp,
                    w[0].timestamp
                )));
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Applies `position ← scale · rotation · position + translation` and
    /// rotates every orientation.
    pub fn transformed(&self, rotation: &UnitQuaternion<f64>, translation: &Vector3<f64>, scale: f64) -> Self {
        let poses = self
            .poses
            .iter()
            .map(|p| Pose {
                timestamp: p.timestamp,
                position: scale * (rotation * p.position) + translation,
                orientation: rotation * p.orientation,
            })
            .collect();
        Self { poses }
    }

    /// Canonical TUM text: `{t} {x} {y} {z} {qx} {qy} {qz} {qw}` per line,
    /// shortest round-trip float formatting.
    pub fn to_tum(&self) -> String {
        let mut out = String::new();
        for p in &self.poses {
            let q = p.orientation.quaternion();
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                p.timestamp, p.position.x, p.position.y, p.position.z, q.i, q.j, q.k, q.w
            );
        }
        out
    }
}

/// Parses TUM trajectory text.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, MetricsError> {
    let mut poses = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| MetricsError::Parse {
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0f64; 8];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field
                .parse()
                .map_err(|_| parse_err(format!("not a number: {field:?}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite value {field:?}")));
            }
        }
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(MetricsError::Validation(format!(
                "line {}: quaternion norm {} is not 1",
                idx + 1,
                q.norm()
            )));
        }
        poses.push(Pose {
            timestamp: v[0],
            position: Vector3::new(v[1], v[2], v[3]),
            orientation: UnitQuaternion::new_unchecked(q),
        });
    }
    Trajectory::new(poses)
}

/// Greedy one-to-one association by closest timestamp.
///
/// All pairs within `max_time_diff` are ranked by `|Δt|` and accepted while
/// both poses are unused. Pairs come back sorted by reference index.
pub fn associate(
    reference: &Trajectory,
    estimate: &Trajectory,
    max_time_diff: f64,
) -> Result<Vec<(usize, usize)>, MetricsError> {
    if reference.is_empty() || estimate.is_empty() {
        return Err(MetricsError::InvalidInput("cannot associate an empty trajectory".into()));
    }
    if !(max_time_diff.is_finite() && max_time_diff >= 0.0) {
        return Err(MetricsError::InvalidInput(format!(
            "max time difference must be non-negative, got {max_time_diff}"
        )));
    }
    let est = estimate.poses();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, r) in reference.poses().iter().enumerate() {
        let start = est.partition_point(|e| e.timestamp < r.timestamp - max_time_diff);
        for (j, e) in est.iter().enumerate().skip(start) {
            let dt = (e.timestamp - r.timestamp).abs();
            if e.timestamp > r.timestamp + max_time_diff {
                break;
            }
            if dt <= max_time_diff {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ref_used = vec![false; reference.len()];
    let mut est_used = vec![false; estimate.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !ref_used[i] && !est_used[j] {
            ref_used[i] = true;
            est_used[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(MetricsError::NoAssociation { max_time_diff });
    }
    pairs.sort_unstable();
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    None,
    #[default]
    Rigid,
    RigidWithScale,
}

/// Similarity transform `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Least-squares transform taking `source` points onto `target` points
/// (closed form from the SVD of the cross-covariance, with a reflection guard).
pub fn fit_alignment(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Similarity, MetricsError> {
    let n = source.len();
    if n != target.len() {
        return Err(MetricsError::InvalidInput("point sets differ in length".into()));
    }
    if n < 2 {
        return Err(MetricsError::InsufficientPairs { needed: 2, got: n });
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_t = target.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        cov += (t - mu_t) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(MetricsError::DegenerateGeometry("SVD did not converge".into())),
    };
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = if with_scale {
        if var_s <= f64::EPSILON * (1.0 + mu_s.norm_squared()) {
            return Err(MetricsError::DegenerateGeometry(
                "estimated positions are coincident; scale is undefined".into(),
            ));
        }
        svd.singular_values.component_mul(&d).sum() / var_s
    } else {
        1.0
    };
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

/// Root-mean-square position error after association and optional alignment
/// of the estimate onto the reference.
pub fn ate_rmse(
    reference: &Trajectory,
    estimate: &Trajectory,
    align: Alignment,
    max_time_diff: f64,
) -> Result<f64, MetricsError> {
    let pairs = associate(reference, estimate, max_time_diff)?;
    let ref_pts: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| reference.poses[i].position).collect();
    let est_pts: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| estimate.poses[j].position).collect();
    let transform = match align {
        Alignment::None => Similarity::identity(),
        Alignment::Rigid => fit_alignment(&est_pts, &ref_pts, false)?,
        Alignment::RigidWithScale => fit_alignment(&est_pts, &ref_pts, true)?,
    };
    Ok(rms(est_pts
        .iter()
        .zip(&ref_pts)
        .map(|(e, r)| (transform.apply(e) - r).norm())))
}

/// Root mean square of a sequence of magnitudes; 0 for an empty sequence.
pub fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lam(l: f64) -> UsmParams {
        UsmParams::new(l).unwrap()
    }

    fn traj(points: &[(f64, [f64; 3])]) -> Trajectory {
        Trajectory::new(
            points
                .iter()
                .map(|&(t, p)| Pose {
                    timestamp: t,
                    position: Vector3::from(p),
                    orientation: UnitQuaternion::identity(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn usm_values() {
        assert_eq!(usm(0.0, 1.0, &lam(10.0)).unwrap(), 1.0);
        assert_abs_diff_eq!(usm(0.019, 0.96, &lam(10.0)).unwrap(), 0.7939, epsilon = 1e-4);
        assert_eq!(usm(3.7, 0.0, &lam(10.0)).unwrap(), 0.0);
    }

    #[test]
    fn usm_rejects_out_of_range() {
        for (a, t) in [(-0.1, 0.5), (0.1, 1.2), (0.1, -0.01), (f64::NAN, 0.5), (0.1, f64::NAN)] {
            assert!(matches!(usm(a, t, &lam(10.0)), Err(MetricsError::InvalidInput(_))));
        }
        assert!(UsmParams::new(0.0).is_err());
        assert!(UsmParams::new(-1.0).is_err());
    }

    #[test]
    fn lambda_rule() {
        assert_abs_diff_eq!(default_lambda(0.01).unwrap().lambda(), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(default_lambda(1.0).unwrap().lambda(), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(default_lambda(0.5).unwrap().lambda(), 0.2, epsilon = 1e-12);
        assert!(default_lambda(0.0).is_err());
        assert!(default_lambda(-2.0).is_err());
    }

    #[test]
    fn tracking_rates() {
        assert_eq!(tracking_rate(300, 300).unwrap(), 1.0);
        assert_eq!(tracking_rate(0, 300).unwrap(), 0.0);
        assert_abs_diff_eq!(tracking_rate(240, 250).unwrap(), 0.96);
        assert!(tracking_rate(301, 300).is_err());
        assert!(tracking_rate(0, 0).is_err());
    }

    #[test]
    fn parsing() {
        let t = parse_trajectory("# comment\n0.0 0 0 0 0 0 0 1\n\n1.0 1 0 0 0 0 0 1").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.poses()[1].position, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(
            parse_trajectory("0.0 0 0 0").unwrap_err(),
            MetricsError::Parse {
                line: 1,
                message: "expected 8 fields, found 4".into()
            }
        );
        assert!(matches!(
            parse_trajectory("0.0 0 0 0 0 0 0 1\n0.5 a 0 0 0 0 0 1"),
            Err(MetricsError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_trajectory("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1"),
            Err(MetricsError::Validation(_))
        ));
        assert!(matches!(
            parse_trajectory("1.0 0 0 0 0 0 0 2"),
            Err(MetricsError::Validation(_))
        ));
    }

    #[test]
    fn association() {
        let a = traj(&[(0.0, [0.0; 3]), (1.0, [0.0; 3]), (2.0, [0.0; 3])]);
        assert_eq!(associate(&a, &a, 0.02).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        let shifted = traj(&[(0.5, [0.0; 3]), (1.5, [0.0; 3]), (2.5, [0.0; 3])]);
        assert_eq!(
            associate(&a, &shifted, 0.02).unwrap_err(),
            MetricsError::NoAssociation { max_time_diff: 0.02 }
        );
        let r = traj(&[(0.0, [0.0; 3]), (1.0, [0.0; 3])]);
        let e = traj(&[(0.01, [0.0; 3]), (0.99, [0.0; 3])]);
        assert_eq!(associate(&r, &e, 0.02).unwrap(), vec![(0, 0), (1, 1)]);
        // one-to-one: the closer reference wins the shared estimate
        let r = traj(&[(0.0, [0.0; 3]), (0.015, [0.0; 3])]);
        let e = traj(&[(0.012, [0.0; 3])]);
        assert_eq!(associate(&r, &e, 0.02).unwrap(), vec![(1, 0)]);
    }

    #[test]
    fn ate_by_hand() {
        let r = traj(&[(0.0, [0.0; 3]), (1.0, [1.0, 0.0, 0.0])]);
        let e = traj(&[(0.0, [0.0; 3]), (1.0, [0.0; 3])]);
        assert_abs_diff_eq!(
            ate_rmse(&r, &e, Alignment::None, 0.02).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
        assert_eq!(ate_rmse(&r, &r, Alignment::Rigid, 0.02).unwrap(), 0.0);
        assert!(matches!(
            ate_rmse(&r, &e, Alignment::RigidWithScale, 0.02),
            Err(MetricsError::DegenerateGeometry(_))
        ));
        let single = traj(&[(0.0, [0.0; 3])]);
        assert!(matches!(
            ate_rmse(&single, &single, Alignment::Rigid, 0.02),
            Err(MetricsError::InsufficientPairs { needed: 2, got: 1 })
        ));
        assert_eq!(ate_rmse(&single, &single, Alignment::None, 0.02).unwrap(), 0.0);
    }

    #[test]
    fn scale_alignment_recovers_similarity() {
        let r = traj(&[
            (0.0, [0.0, 0.0, 0.0]),
            (1.0, [1.0, 0.2, 0.0]),
            (2.0, [2.0, -0.3, 0.5]),
            (3.0, [2.5, 1.0, 0.1]),
        ]);
        let rot = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let e = r.transformed(&rot, &Vector3::new(4.0, -1.0, 2.0), 0.37);
        assert!(ate_rmse(&r, &e, Alignment::Rigid, 0.02).unwrap() > 0.1);
        assert!(ate_rmse(&r, &e, Alignment::RigidWithScale, 0.02).unwrap() < 1e-9);
    }

    #[test]
    fn tum_round_trip() {
        let text = "0 0.1 0.2 0.3 0 0 0 1\n0.5 -1.25 3 1e-7 0.6 0 0 0.8\n";
        let t = parse_trajectory(text).unwrap();
        assert_eq!(t.to_tum(), "0 0.1 0.2 0.3 0 0 0 1\n0.5 -1.25 3 0.0000001 0.6 0 0 0.8\n");
        assert_eq!(parse_trajectory(&t.to_tum()).unwrap(), t);
    }

    proptest! {
        #[test]
        fn usm_orderings(a in 0.0f64..2.0, da in 1e-6f64..1.0, t in 1e-3f64..1.0, c in 0.0f64..1.0, l in 0.05f64..20.0) {
            let p = lam(l);
            let base = usm(a, t, &p).unwrap();
            prop_assume!(base > 1e-250);
            prop_assert!(usm(a + da, t, &p).unwrap() < base);
            let scaled = usm(a, c * t, &p).unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-15);
        }

        #[test]
        fn rigid_alignment_invariance(
            pts in proptest::collection::vec(proptest::array::uniform3(-5.0f64..5.0), 3..40),
            angles in proptest::array::uniform3(-3.1f64..3.1),
            shift in proptest::array::uniform3(-100.0f64..100.0),
        ) {
            let r = traj(&pts.iter().enumerate().map(|(i, p)| (i as f64 * 0.1, *p)).collect::<Vec<_>>());
            let rot = UnitQuaternion::from_euler_angles(angles[0], angles[1], angles[2]);
            let e = r.transformed(&rot, &Vector3::from(shift), 1.0);
            prop_assert!(ate_rmse(&r, &e, Alignment::Rigid, 0.02).unwrap() < 1e-9);
        }

        #[test]
        fn tum_text_round_trips(
            rows in proptest::collection::vec((0.001f64..1.0, proptest::array::uniform3(-1e3f64..1e3)), 1..20)
        ) {
            let mut t = 0.0;
            let poses = rows.iter().map(|(dt, p)| { t += dt; (t, *p) }).collect::<Vec<_>>();
            let traj = traj(&poses);
            let text = traj.to_tum();
            let back = parse_trajectory(&text).unwrap();
            prop_assert_eq!(&back, &traj);
            prop_assert_eq!(back.to_tum(), text);
        }
    }
}
