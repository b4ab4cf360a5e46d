//! Skeleton frames over the 25-joint sensor topology and the posture metrics
//! derived from them.
//!
//! Coordinates are meters in the sensor frame: `x` to the right, `y` up and
//! `z` away from the sensor.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Index, Mul, Neg, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Vectors shorter than this are treated as degenerate segments.
pub const MIN_SEGMENT_M: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("degenerate segment between {0} and {1}")]
    DegenerateSegment(JointId, JointId),
    #[error("joint {0} has a non-finite coordinate")]
    NonFinite(JointId),
    #[error("confidence of joint {0} outside [0, 1]")]
    ConfidenceOutOfRange(JointId),
    #[error("unknown joint name `{0}`")]
    UnknownJoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Projection onto the floor plane (`y = 0`).
    pub fn on_floor(self) -> Self {
        Self::new(self.x, T::zero(), self.z)
    }

    pub fn midpoint(self, o: Self) -> Self {
        (self + o).scale(T::lit(0.5))
    }

    pub fn distance(self, o: Self) -> T {
        (self - o).norm()
    }

    /// Rounds every component to `places` decimals. The result is the float
    /// nearest to the decimal, so it survives a text round trip unchanged.
    pub fn quantize(self, places: i32) -> Self {
        let q = |v: T| {
            let r = round_decimals(v, places);
            // normalise -0.0 so the text form is stable
            if r == T::zero() {
                T::zero()
            } else {
                r
            }
        };
        Self::new(q(self.x), q(self.y), q(self.z))
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

macro_rules! joints {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// The 25 joints tracked by the sensor, in its native order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum JointId {
            $($variant),+
        }

        impl JointId {
            pub const ALL: [JointId; JOINT_COUNT] = [$(JointId::$variant),+];

            /// Stable textual name used in every serialized form.
            pub fn name(self) -> &'static str {
                match self {
                    $(JointId::$variant => $name),+
                }
            }
        }

        impl FromStr for JointId {
            type Err = SkeletonError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(JointId::$variant),)+
                    other => Err(SkeletonError::UnknownJoint(other.to_string())),
                }
            }
        }
    };
}

pub const JOINT_COUNT: usize = 25;

joints! {
    SpineBase => "spine_base",
    SpineMid => "spine_mid",
    SpineShoulder => "spine_shoulder",
    Neck => "neck",
    Head => "head",
    ShoulderL => "shoulder_l",
    ShoulderR => "shoulder_r",
    ElbowL => "elbow_l",
    ElbowR => "elbow_r",
    WristL => "wrist_l",
    WristR => "wrist_r",
    HandL => "hand_l",
    HandR => "hand_r",
    HandTipL => "hand_tip_l",
    HandTipR => "hand_tip_r",
    ThumbL => "thumb_l",
    ThumbR => "thumb_r",
    HipL => "hip_l",
    HipR => "hip_r",
    KneeL => "knee_l",
    KneeR => "knee_r",
    AnkleL => "ankle_l",
    AnkleR => "ankle_r",
    FootL => "foot_l",
    FootR => "foot_r",
}

impl JointId {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One timestamped sample of all 25 joints.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFrame<T> {
    t_ms: u64,
    joints: [Vec3<T>; JOINT_COUNT],
    confidence: [T; JOINT_COUNT],
}

impl<T: Real> SkeletonFrame<T> {
    pub fn new(
        t_ms: u64,
        joints: [Vec3<T>; JOINT_COUNT],
        confidence: [T; JOINT_COUNT],
    ) -> Result<Self, SkeletonError> {
        for j in JointId::ALL {
            if !joints[j.index()].is_finite() {
                return Err(SkeletonError::NonFinite(j));
            }
            let c = confidence[j.index()];
            if !(c >= T::zero() && c <= T::one()) {
                return Err(SkeletonError::ConfidenceOutOfRange(j));
            }
        }
        Ok(Self { t_ms, joints, confidence })
    }

    /// Builds a fully confident frame from a per-joint position function.
    pub fn from_fn(
        t_ms: u64,
        mut position: impl FnMut(JointId) -> Vec3<T>,
    ) -> Result<Self, SkeletonError> {
        let joints = JointId::ALL.map(&mut position);
        Self::new(t_ms, joints, [T::one(); JOINT_COUNT])
    }

    pub fn t_ms(&self) -> u64 {
        self.t_ms
    }

    pub fn joint(&self, j: JointId) -> Vec3<T> {
        self.joints[j.index()]
    }

    pub fn confidence(&self, j: JointId) -> T {
        self.confidence[j.index()]
    }

    pub fn joints(&self) -> &[Vec3<T>; JOINT_COUNT] {
        &self.joints
    }

    pub fn confidences(&self) -> &[T; JOINT_COUNT] {
        &self.confidence
    }

    pub fn with_t_ms(mut self, t_ms: u64) -> Self {
        self.t_ms = t_ms;
        self
    }

    /// Applies `f` to every joint position. Fails if the result is not finite.
    pub fn map_positions(
        &self,
        mut f: impl FnMut(JointId, Vec3<T>) -> Vec3<T>,
    ) -> Result<Self, SkeletonError> {
        let joints = JointId::ALL.map(|j| f(j, self.joints[j.index()]));
        Self::new(self.t_ms, joints, self.confidence)
    }

    /// Canonical recorded form: positions on a 0.1 mm lattice, confidences on 0.01.
    pub fn quantized(&self) -> Self {
        Self {
            t_ms: self.t_ms,
            joints: self.joints.map(|p| p.quantize(4)),
            confidence: self.confidence.map(|c| round_decimals(c, 2)),
        }
    }

    pub fn cast<U: Real>(&self) -> SkeletonFrame<U> {
        SkeletonFrame {
            t_ms: self.t_ms,
            joints: self.joints.map(|p| p.cast()),
            confidence: self.confidence.map(|c| U::lit(c.to_f64_lossy())),
        }
    }
}

impl<T: Real> Index<JointId> for SkeletonFrame<T> {
    type Output = Vec3<T>;

    fn index(&self, j: JointId) -> &Vec3<T> {
        &self.joints[j.index()]
    }
}

/// `round(v * 10^places) / 10^places`; dividing by the exact power of ten
/// lands on the float nearest to the decimal value.
pub fn round_decimals<T: Real>(v: T, places: i32) -> T {
    let scale = T::lit(10f64.powi(places));
    (v * scale).round() / scale
}

/// Flexion angle at `vertex` between the segments towards `a` and `c`, in degrees.
pub fn joint_angle<T: Real>(
    frame: &SkeletonFrame<T>,
    a: JointId,
    vertex: JointId,
    c: JointId,
) -> Result<T, SkeletonError> {
    let v = frame[vertex];
    let u = frame[a] - v;
    let w = frame[c] - v;
    let (nu, nw) = (u.norm(), w.norm());
    let eps = T::lit(MIN_SEGMENT_M);
    if nu < eps {
        return Err(SkeletonError::DegenerateSegment(vertex, a));
    }
    if nw < eps {
        return Err(SkeletonError::DegenerateSegment(vertex, c));
    }
    let cos = (u.dot(w) / (nu * nw)).max(-T::one()).min(T::one());
    Ok(cos.acos().to_degrees().max(T::zero()).min(T::lit(180.0)))
}

/// Signed angle of the `left → right` line against the horizontal plane, in
/// degrees. Positive when `right` is higher.
pub fn segment_tilt<T: Real>(
    frame: &SkeletonFrame<T>,
    left: JointId,
    right: JointId,
) -> Result<T, SkeletonError> {
    let v = frame[right] - frame[left];
    let n = v.norm();
    if n < T::lit(MIN_SEGMENT_M) {
        return Err(SkeletonError::DegenerateSegment(left, right));
    }
    let s = (v.y / n).max(-T::one()).min(T::one());
    Ok(s.asin().to_degrees())
}

/// Depth of each requested joint relative to the spine base (positive is
/// farther from the sensor).
pub fn depth_offsets<T: Real>(frame: &SkeletonFrame<T>, joints: &[JointId]) -> BTreeMap<JointId, T> {
    let base = frame[JointId::SpineBase].z;
    joints.iter().map(|&j| (j, frame[j].z - base)).collect()
}

/// Joints whose depth offsets are reported alongside the angles.
pub const DEPTH_JOINTS: [JointId; 8] = [
    JointId::ShoulderL,
    JointId::ShoulderR,
    JointId::HipL,
    JointId::HipR,
    JointId::KneeL,
    JointId::KneeR,
    JointId::AnkleL,
    JointId::AnkleR,
];

/// Posture summary of one frame. A metric whose segments are degenerate is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureMetrics<T> {
    pub shoulder_tilt_deg: Option<T>,
    pub hip_tilt_deg: Option<T>,
    pub knee_l_deg: Option<T>,
    pub knee_r_deg: Option<T>,
    pub ankle_l_deg: Option<T>,
    pub ankle_r_deg: Option<T>,
    pub depth_offsets: BTreeMap<JointId, T>,
}

impl<T: Real> PostureMetrics<T> {
    /// The six angle metrics in report order.
    pub fn angles(&self) -> [Option<T>; 6] {
        [
            self.shoulder_tilt_deg,
            self.hip_tilt_deg,
            self.knee_l_deg,
            self.knee_r_deg,
            self.ankle_l_deg,
            self.ankle_r_deg,
        ]
    }

    pub fn has_any_angle(&self) -> bool {
        self.angles().iter().any(Option::is_some)
    }
}

pub fn posture_metrics<T: Real>(frame: &SkeletonFrame<T>) -> PostureMetrics<T> {
    use JointId::*;
    PostureMetrics {
        shoulder_tilt_deg: segment_tilt(frame, ShoulderL, ShoulderR).ok(),
        hip_tilt_deg: segment_tilt(frame, HipL, HipR).ok(),
        knee_l_deg: joint_angle(frame, HipL, KneeL, AnkleL).ok(),
        knee_r_deg: joint_angle(frame, HipR, KneeR, AnkleR).ok(),
        ankle_l_deg: joint_angle(frame, KneeL, AnkleL, FootL).ok(),
        ankle_r_deg: joint_angle(frame, KneeR, AnkleR, FootR).ok(),
        depth_offsets: depth_offsets(frame, &DEPTH_JOINTS),
    }
}
