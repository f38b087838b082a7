use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Rigid transform as a unit quaternion (Hamilton, `w, x, y, z`) and a
/// translation in meters. Maps a point `p` to `R(q) p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    q: [f64; 4],
    pub t: [f64; 3],
}

pub type Quat = [f64; 4];
pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn quat_mul(p: Quat, q: Quat) -> Quat {
    let [w1, x1, y1, z1] = p;
    let [w2, x2, y2, z2] = q;
    [
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ]
}

pub fn quat_conj(q: Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn quat_norm(q: Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rotates `v` by the sandwich product `q [0, v] q*`.
pub fn quat_rotate(q: Quat, v: Vec3) -> Vec3 {
    let r = quat_mul(quat_mul(q, [0.0, v[0], v[1], v[2]]), quat_conj(q));
    [r[1], r[2], r[3]]
}

pub fn quat_to_matrix(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Quaternion of a proper rotation matrix (Shepperd's branch selection).
pub fn matrix_to_quat(m: &Mat3) -> Quat {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    normalize_quat(q)
}

/// Angle of the relative rotation between two unit quaternions, radians in
/// `[0, π]`. Equals `2 acos(|<p, q>|)`; the `atan2` form stays accurate near
/// zero where `acos` loses half the significant digits.
pub fn quat_angle(p: Quat, q: Quat) -> f64 {
    let r = quat_mul(quat_conj(p), q);
    let v = (r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
    2.0 * v.atan2(r[0].abs())
}

pub fn normalize_quat(q: Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            q: [1.0, 0.0, 0.0, 0.0],
            t: [0.0; 3],
        }
    }

    /// Builds a pose, renormalizing `q`. Panics on a zero quaternion.
    pub fn new(q: Quat, t: Vec3) -> Self {
        let n = quat_norm(q);
        assert!(n > 0.0 && n.is_finite(), "zero or non-finite quaternion");
        Self {
            q: normalize_quat(q),
            t,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64, t: Vec3) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 || angle_rad == 0.0 {
            return Self {
                q: [1.0, 0.0, 0.0, 0.0],
                t,
            };
        }
        let (s, c) = (angle_rad / 2.0).sin_cos();
        Self::new([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n], t)
    }

    pub fn from_matrix(r: &Mat3, t: Vec3) -> Self {
        Self {
            q: matrix_to_quat(r),
            t,
        }
    }

    pub fn q(&self) -> Quat {
        self.q
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(self.q)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = normalize_quat(quat_mul(self.q, other.q));
        let rt = quat_rotate(self.q, other.t);
        Pose {
            q,
            t: [rt[0] + self.t[0], rt[1] + self.t[1], rt[2] + self.t[2]],
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = quat_conj(self.q);
        let rt = quat_rotate(qi, self.t);
        Pose {
            q: qi,
            t: [-rt[0], -rt[1], -rt[2]],
        }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation_matrix(), p);
        [r[0] + self.t[0], r[1] + self.t[1], r[2] + self.t[2]]
    }

    /// Rotation angle of `self⁻¹ ∘ other` in radians, in `[0, π]`.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        quat_angle(self.q, other.q)
    }

    pub fn rotation_angle(&self) -> f64 {
        Pose::identity().angle_to(self)
    }

    pub fn translation_norm(&self) -> f64 {
        self.t.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_kitti_row(&self) -> [f64; 12] {
        let r = self.rotation_matrix();
        [
            r[0][0], r[0][1], r[0][2], self.t[0], r[1][0], r[1][1], r[1][2], self.t[1], r[2][0],
            r[2][1], r[2][2], self.t[2],
        ]
    }

    /// 4x4 homogeneous matrix.
    pub fn to_homogeneous(&self) -> [[f64; 4]; 4] {
        let r = self.rotation_matrix();
        [
            [r[0][0], r[0][1], r[0][2], self.t[0]],
            [r[1][0], r[1][1], r[1][2], self.t[1]],
            [r[2][0], r[2][1], r[2][2], self.t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Uniform axis, angle uniform in `[0, max_rot_deg]`, translation uniform
    /// in the ball of radius `max_trans_m`.
    pub fn random<R: Rng>(rng: &mut R, max_rot_deg: f64, max_trans_m: f64) -> Pose {
        let axis = unit_vector(rng);
        let angle = rng.gen::<f64>() * max_rot_deg.to_radians();
        let dir = unit_vector(rng);
        let radius = max_trans_m * rng.gen::<f64>().cbrt();
        Pose::from_axis_angle(
            axis,
            angle,
            [dir[0] * radius, dir[1] * radius, dir[2] * radius],
        )
    }
}

fn unit_vector<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

impl fmt::Display for Pose {
    /// `qw qx qy qz tx ty tz`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            self.q[0], self.q[1], self.q[2], self.q[3], self.t[0], self.t[1], self.t[2]
        )
    }
}
