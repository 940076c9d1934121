//! The so(2)/se(2) Lie algebras and their groups of planar rotations and rigid motions.
//!
//! Group elements are 3x3 homogeneous matrices acting on normalized image
//! coordinates, where the image spans `[-1, 1]` on both axes. Algebra elements
//! are coefficient vectors `(omega, u, v)` over the generator basis
//! `G1` (rotation), `G2` (x-translation), `G3` (y-translation).

use std::fmt;

use rand::Rng;

use crate::scalar::Scalar;

/// Below this |omega| the translation block uses its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-6;
/// Below this |omega| the derivative of the translation block uses its Taylor expansion.
const SMALL_ANGLE_DERIV: f64 = 1e-3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LieError {
    #[error("non-finite algebra coefficients ({0})")]
    NonFinite(String),
    #[error("rotation angle {0} is at the logarithm branch cut (|omega| = pi)")]
    BranchCut(f64),
    #[error("SO(2) element carries a translation ({0}, {1})")]
    NotSo2(f64, f64),
    #[error("expected {expected} coefficients for {kind}, got {got}")]
    Dimension {
        kind: GroupKind,
        expected: usize,
        got: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    So2,
    Se2,
}

impl GroupKind {
    /// Number of algebra coefficients.
    pub fn dim(self) -> usize {
        match self {
            GroupKind::So2 => 1,
            GroupKind::Se2 => 3,
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::So2 => "so2",
            GroupKind::Se2 => "se2",
        })
    }
}

impl std::str::FromStr for GroupKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "so2" => Ok(GroupKind::So2),
            "se2" => Ok(GroupKind::Se2),
            other => Err(format!("unknown group kind '{other}' (expected so2 or se2)")),
        }
    }
}

/// Coefficients `(omega, u, v)`: rotation in radians and translation in
/// half-image-widths. SO(2) uses `u = v = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AlgebraCoefficients<S> {
    pub omega: S,
    pub u: S,
    pub v: S,
}

impl<S: Scalar> AlgebraCoefficients<S> {
    pub fn new(omega: S, u: S, v: S) -> Self {
        AlgebraCoefficients { omega, u, v }
    }

    pub fn rotation(omega: S) -> Self {
        Self::new(omega, S::zero(), S::zero())
    }

    pub fn zero() -> Self {
        Self::new(S::zero(), S::zero(), S::zero())
    }

    /// Reads the first `kind.dim()` entries of a coefficient row.
    pub fn from_slice(values: &[S], kind: GroupKind) -> Result<Self, LieError> {
        if values.len() != kind.dim() {
            return Err(LieError::Dimension {
                kind,
                expected: kind.dim(),
                got: values.len(),
            });
        }
        Ok(match kind {
            GroupKind::So2 => Self::rotation(values[0]),
            GroupKind::Se2 => Self::new(values[0], values[1], values[2]),
        })
    }

    pub fn to_vec(&self, kind: GroupKind) -> Vec<S> {
        match kind {
            GroupKind::So2 => vec![self.omega],
            GroupKind::Se2 => vec![self.omega, self.u, self.v],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega.is_finite() && self.u.is_finite() && self.v.is_finite()
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.omega, -self.u, -self.v)
    }

    /// The algebra element `omega G1 + u G2 + v G3` as a matrix.
    pub fn hat(&self) -> [[S; 3]; 3] {
        let g = generators::<S>();
        let mut m = [[S::zero(); 3]; 3];
        for (coef, gen) in [self.omega, self.u, self.v].into_iter().zip(g) {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += coef * gen[r][c];
                }
            }
        }
        m
    }
}

/// The generator basis `[G1, G2, G3]`.
pub fn generators<S: Scalar>() -> [[[S; 3]; 3]; 3] {
    let (o, l) = (S::zero(), S::one());
    [
        [[o, -l, o], [l, o, o], [o, o, o]],
        [[o, o, l], [o, o, o], [o, o, o]],
        [[o, o, o], [o, o, l], [o, o, o]],
    ]
}

/// Closed-form entries of the translation block `V(omega) = [[a, -b], [b, a]]`:
/// `a = sin(omega) / omega`, `b = (1 - cos(omega)) / omega`.
pub fn translation_block<S: Scalar>(omega: S) -> (S, S) {
    if omega.abs() <= S::lit(SMALL_ANGLE) {
        let w2 = omega * omega;
        let a = S::one() - w2 / S::lit(6.0) + w2 * w2 / S::lit(120.0);
        let b = omega * (S::lit(0.5) - w2 / S::lit(24.0));
        (a, b)
    } else {
        let half = (omega * S::lit(0.5)).sin();
        // 1 - cos(w) = 2 sin^2(w / 2) avoids cancellation for small w.
        (omega.sin() / omega, S::lit(2.0) * half * half / omega)
    }
}

/// Derivatives `(da/domega, db/domega)` of [`translation_block`].
pub fn translation_block_derivative<S: Scalar>(omega: S) -> (S, S) {
    let w2 = omega * omega;
    if omega.abs() <= S::lit(SMALL_ANGLE_DERIV) {
        let da = omega * (-S::one() / S::lit(3.0) + w2 / S::lit(30.0) - w2 * w2 / S::lit(840.0));
        let db = S::lit(0.5) - w2 / S::lit(8.0) + w2 * w2 / S::lit(144.0);
        (da, db)
    } else {
        let (s, c) = (omega.sin(), omega.cos());
        let half = (omega * S::lit(0.5)).sin();
        let one_minus_cos = S::lit(2.0) * half * half;
        ((omega * c - s) / w2, (omega * s - one_minus_cos) / w2)
    }
}

/// A 3x3 homogeneous rotation-plus-translation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupElement<S> {
    m: [[S; 3]; 3],
}

impl<S: Scalar> GroupElement<S> {
    pub fn identity() -> Self {
        let (o, l) = (S::zero(), S::one());
        GroupElement {
            m: [[l, o, o], [o, l, o], [o, o, l]],
        }
    }

    /// Builds `[[cos w, -sin w, tx], [sin w, cos w, ty], [0, 0, 1]]` directly from an angle and translation.
    pub fn from_angle_translation(omega: S, tx: S, ty: S) -> Self {
        let (s, c) = omega.sin_cos();
        let (o, l) = (S::zero(), S::one());
        GroupElement {
            m: [[c, -s, tx], [s, c, ty], [o, o, l]],
        }
    }

    /// Wraps a raw matrix without checking the group invariants; see [`is_valid`](Self::is_valid).
    pub fn from_matrix(m: [[S; 3]; 3]) -> Self {
        GroupElement { m }
    }

    pub fn matrix(&self) -> &[[S; 3]; 3] {
        &self.m
    }

    pub fn angle(&self) -> S {
        self.m[1][0].atan2(self.m[0][0])
    }

    pub fn translation(&self) -> (S, S) {
        (self.m[0][2], self.m[1][2])
    }

    /// Bottom row `(0, 0, 1)` exactly and an orthonormal, orientation-preserving rotation block within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let m = &self.m;
        if m[2] != [S::zero(), S::zero(), S::one()] {
            return false;
        }
        let tol = S::lit(tol);
        let (r00, r01, r10, r11) = (m[0][0], m[0][1], m[1][0], m[1][1]);
        let rtr = [
            r00 * r00 + r10 * r10,
            r00 * r01 + r10 * r11,
            r01 * r01 + r11 * r11,
        ];
        let det = r00 * r11 - r01 * r10;
        (rtr[0] - S::one()).abs() <= tol
            && rtr[1].abs() <= tol
            && (rtr[2] - S::one()).abs() <= tol
            && (det - S::one()).abs() <= tol
            && m.iter().flatten().all(|v| v.is_finite())
    }

    /// Matrix product `self * other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Self {
        let mut out = [[S::zero(); 3]; 3];
        for (r, row) in out.iter_mut().enumerate().take(2) {
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = (0..3).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        out[2] = [S::zero(), S::zero(), S::one()];
        GroupElement { m: out }
    }

    /// `[[R^T, -R^T t], [0, 1]]`.
    pub fn invert(&self) -> Self {
        let m = &self.m;
        let (tx, ty) = (m[0][2], m[1][2]);
        let (o, l) = (S::zero(), S::one());
        GroupElement {
            m: [
                [m[0][0], m[1][0], -(m[0][0] * tx + m[1][0] * ty)],
                [m[0][1], m[1][1], -(m[0][1] * tx + m[1][1] * ty)],
                [o, o, l],
            ],
        }
    }

    /// Maps a point `(x, y)`.
    pub fn apply(&self, x: S, y: S) -> (S, S) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }
}

fn check_kind<S: Scalar>(tau: &AlgebraCoefficients<S>, kind: GroupKind) -> Result<(), LieError> {
    if !tau.is_finite() {
        return Err(LieError::NonFinite(format!("{:?}", tau)));
    }
    if kind == GroupKind::So2 && (tau.u != S::zero() || tau.v != S::zero()) {
        return Err(LieError::NotSo2(
            tau.u.to_f64().unwrap_or(f64::NAN),
            tau.v.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(())
}

/// Matrix exponential of `omega G1 + u G2 + v G3`, in closed form.
pub fn exp_map<S: Scalar>(tau: &AlgebraCoefficients<S>, kind: GroupKind) -> Result<GroupElement<S>, LieError> {
    check_kind(tau, kind)?;
    let (a, b) = translation_block(tau.omega);
    let tx = a * tau.u - b * tau.v;
    let ty = b * tau.u + a * tau.v;
    Ok(GroupElement::from_angle_translation(tau.omega, tx, ty))
}

/// Inverse of [`exp_map`] on the principal branch `omega in (-pi, pi)`.
pub fn log_map<S: Scalar>(m: &GroupElement<S>, kind: GroupKind) -> Result<AlgebraCoefficients<S>, LieError> {
    let omega = m.angle();
    let omega_f = omega.to_f64().unwrap_or(f64::NAN);
    if !omega_f.is_finite() {
        return Err(LieError::NonFinite(format!("{:?}", m)));
    }
    if (omega_f.abs() - std::f64::consts::PI).abs() <= 1e-9 {
        return Err(LieError::BranchCut(omega_f));
    }
    let (tx, ty) = m.translation();
    if kind == GroupKind::So2 {
        let (txf, tyf) = (tx.to_f64().unwrap_or(f64::NAN), ty.to_f64().unwrap_or(f64::NAN));
        if txf.abs() > 1e-9 || tyf.abs() > 1e-9 {
            return Err(LieError::NotSo2(txf, tyf));
        }
        return Ok(AlgebraCoefficients::rotation(omega));
    }
    let (a, b) = translation_block(omega);
    let det = a * a + b * b;
    Ok(AlgebraCoefficients::new(
        omega,
        (a * tx + b * ty) / det,
        (a * ty - b * tx) / det,
    ))
}

/// The top two rows of `m`, flattened: `(M11, M12, M13, M21, M22, M23)`.
pub fn to_theta<S: Scalar>(m: &GroupElement<S>) -> [S; 6] {
    let r = m.matrix();
    [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2]]
}

/// `to_theta(exp(tau))` and its Jacobian: `jac[j][i] = d theta_i / d tau_j` for `tau = (omega, u, v)`.
pub fn exp_theta_jacobian<S: Scalar>(tau: &AlgebraCoefficients<S>) -> ([S; 6], [[S; 6]; 3]) {
    let (w, u, v) = (tau.omega, tau.u, tau.v);
    let (s, c) = w.sin_cos();
    let (a, b) = translation_block(w);
    let (da, db) = translation_block_derivative(w);
    let o = S::zero();
    let theta = [c, -s, a * u - b * v, s, c, b * u + a * v];
    let jac = [
        [-s, -c, da * u - db * v, c, -s, db * u + da * v],
        [o, o, a, o, o, b],
        [o, o, -b, o, o, a],
    ];
    (theta, jac)
}

/// Bounds of the uniform distribution over algebra coefficients.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformSupport {
    /// Maximum |omega|, radians, in `(0, pi]`.
    pub omega_max: f64,
    /// Maximum |u| and |v|, normalized units, in `[0, 1)`.
    pub t_max: f64,
}

impl Default for TransformSupport {
    /// Rotations within +-90 degrees, translations within +-25% of the image size.
    fn default() -> Self {
        TransformSupport {
            omega_max: std::f64::consts::FRAC_PI_2,
            t_max: 0.5,
        }
    }
}

impl TransformSupport {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.omega_max > 0.0 && self.omega_max <= std::f64::consts::PI) {
            return Err(format!("omega_max {} outside (0, pi]", self.omega_max));
        }
        if !(self.t_max >= 0.0 && self.t_max < 1.0) {
            return Err(format!("t_max {} outside [0, 1)", self.t_max));
        }
        Ok(())
    }

    pub fn contains<S: Scalar>(&self, tau: &AlgebraCoefficients<S>) -> bool {
        let f = |x: S| x.to_f64().unwrap_or(f64::NAN);
        f(tau.omega).abs() <= self.omega_max && f(tau.u).abs() <= self.t_max && f(tau.v).abs() <= self.t_max
    }
}

/// Draws `omega ~ U(-omega_max, omega_max)` and, for SE(2), `u, v ~ U(-t_max, t_max)`.
pub fn sample_transform<S: Scalar, R: Rng + ?Sized>(
    support: &TransformSupport,
    kind: GroupKind,
    rng: &mut R,
) -> AlgebraCoefficients<S> {
    let omega = S::lit(rng.random_range(-support.omega_max..=support.omega_max));
    match kind {
        GroupKind::So2 => AlgebraCoefficients::rotation(omega),
        GroupKind::Se2 => {
            let mut t = || {
                if support.t_max == 0.0 {
                    S::zero()
                } else {
                    S::lit(rng.random_range(-support.t_max..=support.t_max))
                }
            };
            let (u, v) = (t(), t());
            AlgebraCoefficients::new(omega, u, v)
        }
    }
}
