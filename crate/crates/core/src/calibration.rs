//! Pillow layout calibration.
//!
//! The patient stands on three designated pillows; each position is confirmed
//! by a raised hand (or by the therapist) and the three floor points span an
//! affine frame from which every cell center is derived.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::skeleton::{JointId, SkeletonFrame, Vec3};

/// Minimum spacing between neighbouring cell centers.
pub const MIN_PITCH_M: f64 = 0.05;
/// Cross-product magnitude below which grid samples count as collinear.
pub const COLLINEAR_EPS: f64 = 1e-4;
pub const DEFAULT_TOLERANCE_FACTOR: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("calibration samples are collinear")]
    CollinearSamples,
    #[error("cell {0} sampled more than once")]
    DuplicateCell(Cell),
    #[error("cell pitch below {MIN_PITCH_M} m")]
    PitchTooSmall,
    #[error("cell {0} is not a calibration position for {1:?}")]
    WrongCell(Cell, GridLayout),
    #[error("cell {0} does not exist in layout {1:?}")]
    InvalidCell(Cell, GridLayout),
    #[error("tolerance factor must lie in (0, 0.5]")]
    InvalidTolerance,
    #[error("{0}")]
    Wizard(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridLayout {
    /// Horizontal line of three pillows (row 0, columns 0..=2).
    Line3,
    /// Three by three grid.
    Grid3x3,
}

impl GridLayout {
    pub fn rows(self) -> u8 {
        match self {
            GridLayout::Line3 => 1,
            GridLayout::Grid3x3 => 3,
        }
    }

    pub fn cols(self) -> u8 {
        3
    }

    pub fn contains(self, cell: Cell) -> bool {
        cell.row < self.rows() && cell.col < self.cols()
    }

    /// All cells in row-major order.
    pub fn cells(self) -> Vec<Cell> {
        (0..self.rows())
            .flat_map(|r| (0..self.cols()).map(move |c| Cell::new(r, c)))
            .collect()
    }

    /// The three positions the patient is asked to stand on, in prompt order.
    pub fn calibration_cells(self) -> [Cell; 3] {
        match self {
            GridLayout::Line3 => [Cell::lane(0), Cell::lane(1), Cell::lane(2)],
            GridLayout::Grid3x3 => [Cell::new(0, 0), Cell::new(0, 2), Cell::new(2, 0)],
        }
    }
}

/// Logical pillow position. Line layouts use row 0 and the column as lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u8; 2]", into = "[u8; 2]")]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub const fn new(row: u8, col: u8) -> Self {
        Self { row, col }
    }

    pub const fn lane(lane: u8) -> Self {
        Self { row: 0, col: lane }
    }

    /// Chebyshev distance between two cells.
    pub fn chebyshev(self, o: Cell) -> u8 {
        self.row.abs_diff(o.row).max(self.col.abs_diff(o.col))
    }
}

impl From<[u8; 2]> for Cell {
    fn from(v: [u8; 2]) -> Self {
        Cell::new(v[0], v[1])
    }
}

impl From<Cell> for [u8; 2] {
    fn from(c: Cell) -> Self {
        [c.row, c.col]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample<T> {
    pub designated_cell: Cell,
    pub floor_point: Vec3<T>,
    pub captured_at_ms: u64,
}

impl<T: Real> CalibrationSample<T> {
    pub fn new(designated_cell: Cell, point: Vec3<T>, captured_at_ms: u64) -> Self {
        Self { designated_cell, floor_point: point.on_floor(), captured_at_ms }
    }
}

/// Result of a cell lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Cell(Cell),
    Outside,
}

impl Location {
    pub fn cell(self) -> Option<Cell> {
        match self {
            Location::Cell(c) => Some(c),
            Location::Outside => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
struct RawGridFrame<T> {
    layout: GridLayout,
    origin: Vec3<T>,
    basis_row: Vec3<T>,
    basis_col: Vec3<T>,
    tolerance_factor: T,
}

/// Calibrated floor frame. Cell `(r, c)` is centered at
/// `origin + r * basis_row + c * basis_col`.
///
/// Line layouts get a synthetic `basis_row` perpendicular to `basis_col` with
/// the same length, so lookups treat the area in front of and behind the line
/// uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawGridFrame<T>",
    bound(serialize = "T: Serialize", deserialize = "T: Real + Deserialize<'de>")
)]
pub struct GridFrame<T> {
    layout: GridLayout,
    origin: Vec3<T>,
    basis_row: Vec3<T>,
    basis_col: Vec3<T>,
    tolerance_factor: T,
}

impl<T: Real> TryFrom<RawGridFrame<T>> for GridFrame<T> {
    type Error = CalibrationError;

    fn try_from(raw: RawGridFrame<T>) -> Result<Self, Self::Error> {
        GridFrame::from_parts(raw.layout, raw.origin, raw.basis_row, raw.basis_col)?
            .with_tolerance(raw.tolerance_factor)
    }
}

impl<T: Real> GridFrame<T> {
    pub fn from_parts(
        layout: GridLayout,
        origin: Vec3<T>,
        basis_row: Vec3<T>,
        basis_col: Vec3<T>,
    ) -> Result<Self, CalibrationError> {
        let (origin, basis_row, basis_col) = (origin.on_floor(), basis_row.on_floor(), basis_col.on_floor());
        let min_pitch = T::lit(MIN_PITCH_M);
        if !(basis_col.norm() > min_pitch && basis_row.norm() > min_pitch) {
            return Err(CalibrationError::PitchTooSmall);
        }
        if basis_row.cross(basis_col).norm() <= T::lit(COLLINEAR_EPS) {
            return Err(CalibrationError::CollinearSamples);
        }
        Ok(Self {
            layout,
            origin,
            basis_row,
            basis_col,
            tolerance_factor: T::lit(DEFAULT_TOLERANCE_FACTOR),
        })
    }

    /// Regular frame: columns along +x and rows along +z, first cell at `origin`.
    pub fn regular(layout: GridLayout, origin: Vec3<T>, pitch_m: T) -> Result<Self, CalibrationError> {
        Self::from_parts(
            layout,
            origin,
            Vec3::new(T::zero(), T::zero(), pitch_m),
            Vec3::new(pitch_m, T::zero(), T::zero()),
        )
    }

    pub fn with_tolerance(mut self, tolerance_factor: T) -> Result<Self, CalibrationError> {
        if !(tolerance_factor > T::zero() && tolerance_factor <= T::lit(0.5)) {
            return Err(CalibrationError::InvalidTolerance);
        }
        self.tolerance_factor = tolerance_factor;
        Ok(self)
    }

    pub fn layout(&self) -> GridLayout {
        self.layout
    }

    pub fn origin(&self) -> Vec3<T> {
        self.origin
    }

    pub fn basis_row(&self) -> Vec3<T> {
        self.basis_row
    }

    pub fn basis_col(&self) -> Vec3<T> {
        self.basis_col
    }

    pub fn tolerance_factor(&self) -> T {
        self.tolerance_factor
    }

    /// Cell pitch along rows and columns, in meters.
    pub fn cell_pitch_m(&self) -> [T; 2] {
        [self.basis_row.norm(), self.basis_col.norm()]
    }

    pub fn cell_center(&self, cell: Cell) -> Vec3<T> {
        let r = T::from_u8(cell.row).unwrap_or_else(T::zero);
        let c = T::from_u8(cell.col).unwrap_or_else(T::zero);
        self.origin + self.basis_row * r + self.basis_col * c
    }

    /// Continuous grid coordinates `(row, col)` of a floor point.
    pub fn grid_coords(&self, point: Vec3<T>) -> (T, T) {
        let d = point - self.origin;
        let (br, bc) = (self.basis_row, self.basis_col);
        let det = br.x * bc.z - br.z * bc.x;
        let u = (d.x * bc.z - d.z * bc.x) / det;
        let v = (br.x * d.z - br.z * d.x) / det;
        (u, v)
    }

    /// Maps a floor point to the cell it falls in. Exact half-pitch ties
    /// resolve to the lower index.
    pub fn locate_cell(&self, point: Vec3<T>) -> Location {
        let (u, v) = self.grid_coords(point);
        let half = T::lit(0.5);
        let (r, c) = ((u - half).ceil(), (v - half).ceil());
        if !(u - r).abs().le(&self.tolerance_factor) || !(v - c).abs().le(&self.tolerance_factor) {
            return Location::Outside;
        }
        let in_range = |x: T, n: u8| x >= T::zero() && x < T::from_u8(n).unwrap_or_else(T::zero);
        if !in_range(r, self.layout.rows()) || !in_range(c, self.layout.cols()) {
            return Location::Outside;
        }
        Location::Cell(Cell::new(r.to_u8().unwrap_or(0), c.to_u8().unwrap_or(0)))
    }

    pub fn cast<U: Real>(&self) -> GridFrame<U> {
        GridFrame {
            layout: self.layout,
            origin: self.origin.cast(),
            basis_row: self.basis_row.cast(),
            basis_col: self.basis_col.cast(),
            tolerance_factor: U::lit(self.tolerance_factor.to_f64_lossy()),
        }
    }
}

/// Estimates the calibrated frame from three samples on the layout's
/// calibration cells (in any order).
pub fn estimate_grid_frame<T: Real>(
    layout: GridLayout,
    samples: &[CalibrationSample<T>; 3],
) -> Result<GridFrame<T>, CalibrationError> {
    let wanted = layout.calibration_cells();
    for (i, s) in samples.iter().enumerate() {
        if !layout.contains(s.designated_cell) {
            return Err(CalibrationError::InvalidCell(s.designated_cell, layout));
        }
        if samples[..i].iter().any(|p| p.designated_cell == s.designated_cell) {
            return Err(CalibrationError::DuplicateCell(s.designated_cell));
        }
        if !wanted.contains(&s.designated_cell) {
            return Err(CalibrationError::WrongCell(s.designated_cell, layout));
        }
    }
    let at = |cell: Cell| {
        samples
            .iter()
            .find(|s| s.designated_cell == cell)
            .map(|s| s.floor_point.on_floor())
            .expect("designated cells checked above")
    };
    let half = T::lit(0.5);
    match layout {
        GridLayout::Grid3x3 => {
            let origin = at(Cell::new(0, 0));
            let span_col = at(Cell::new(0, 2)) - origin;
            let span_row = at(Cell::new(2, 0)) - origin;
            if span_col.cross(span_row).norm() < T::lit(COLLINEAR_EPS) {
                return Err(CalibrationError::CollinearSamples);
            }
            GridFrame::from_parts(layout, origin, span_row * half, span_col * half)
        }
        GridLayout::Line3 => {
            let pts = [at(Cell::lane(0)), at(Cell::lane(1)), at(Cell::lane(2))];
            let three = T::lit(3.0);
            let mean = (pts[0] + pts[1] + pts[2]) * (T::one() / three);
            let (mut sxx, mut sxz, mut szz) = (T::zero(), T::zero(), T::zero());
            for p in pts {
                let d = p - mean;
                sxx = sxx + d.x * d.x;
                sxz = sxz + d.x * d.z;
                szz = szz + d.z * d.z;
            }
            // principal axis of the 2x2 floor covariance
            let theta = (T::lit(2.0) * sxz).atan2(sxx - szz) * half;
            let mut dir = Vec3::new(theta.cos(), T::zero(), theta.sin());
            if (pts[2] - pts[0]).dot(dir) < T::zero() {
                dir = -dir;
            }
            let project = |p: Vec3<T>| mean + dir * (p - mean).dot(dir);
            let origin = project(pts[0]);
            let basis_col = (project(pts[2]) - origin) * half;
            if basis_col.norm() <= T::lit(MIN_PITCH_M) {
                return Err(CalibrationError::PitchTooSmall);
            }
            // perpendicular on the floor, pointing away from the sensor
            let mut basis_row = Vec3::new(-basis_col.z, T::zero(), basis_col.x);
            if basis_row.z < T::zero() {
                basis_row = -basis_row;
            }
            GridFrame::from_parts(layout, origin, basis_row, basis_col)
        }
    }
}

/// Reference point of the player on the floor: midpoint of the ankles.
pub fn player_floor_point<T: Real>(frame: &SkeletonFrame<T>) -> Vec3<T> {
    frame[JointId::AnkleL].midpoint(frame[JointId::AnkleR]).on_floor()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandRaiseConfig {
    pub height_margin_m: f64,
    pub dwell_s: f64,
    /// Consecutive non-qualifying frames tolerated inside a run.
    pub max_dropout_frames: u32,
}

impl Default for HandRaiseConfig {
    fn default() -> Self {
        Self { height_margin_m: 0.10, dwell_s: 1.0, max_dropout_frames: 2 }
    }
}

/// Fires once per sustained raise of either hand above the head.
#[derive(Debug, Clone)]
pub struct HandRaiseDetector {
    config: HandRaiseConfig,
    run_start_ms: Option<u64>,
    dropouts: u32,
    fired: bool,
}

impl HandRaiseDetector {
    pub fn new(config: HandRaiseConfig) -> Self {
        Self { config, run_start_ms: None, dropouts: 0, fired: false }
    }

    pub fn reset(&mut self) {
        self.run_start_ms = None;
        self.dropouts = 0;
        self.fired = false;
    }

    /// Feeds the next frame; returns the confirmation timestamp when the
    /// dwell is reached.
    pub fn feed<T: Real>(&mut self, frame: &SkeletonFrame<T>) -> Option<u64> {
        let threshold = frame[JointId::Head].y + T::lit(self.config.height_margin_m);
        let hand = frame[JointId::HandL].y.max(frame[JointId::HandR].y);
        let t = frame.t_ms();
        if hand > threshold {
            self.dropouts = 0;
            let start = *self.run_start_ms.get_or_insert(t);
            let dwell_ms = (self.config.dwell_s * 1000.0).round() as u64;
            if !self.fired && t.saturating_sub(start) >= dwell_ms {
                self.fired = true;
                return Some(t);
            }
        } else if self.run_start_ms.is_some() {
            self.dropouts += 1;
            if self.dropouts > self.config.max_dropout_frames {
                self.reset();
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmedBy {
    HandRaise,
    Therapist,
}

/// Progress notifications from the calibration wizard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case", bound(deserialize = "T: Real + Deserialize<'de>"))]
pub enum CalibrationProgress<T> {
    /// Waiting for the patient on `cell` (prompt `index` of 3).
    Prompt { index: usize, cell: Cell },
    SampleCaptured { index: usize, cell: Cell, floor_point: Vec3<T>, by: ConfirmedBy },
    Completed { grid: GridFrame<T> },
    /// Estimation failed; the wizard restarted from the first position.
    Failed { reason: String },
}

/// Walks the patient through the three calibration positions.
///
/// After each capture the wizard holds until [`CalibrationWizard::acknowledge`]
/// so the patient can move off the pillow without triggering the next sample.
#[derive(Debug, Clone)]
pub struct CalibrationWizard<T> {
    layout: GridLayout,
    samples: Vec<CalibrationSample<T>>,
    detector: HandRaiseDetector,
    awaiting_ack: bool,
    last_frame: Option<SkeletonFrame<T>>,
}

impl<T: Real> CalibrationWizard<T> {
    pub fn new(layout: GridLayout, hand_raise: HandRaiseConfig) -> Self {
        Self {
            layout,
            samples: Vec::with_capacity(3),
            detector: HandRaiseDetector::new(hand_raise),
            awaiting_ack: false,
            last_frame: None,
        }
    }

    pub fn layout(&self) -> GridLayout {
        self.layout
    }

    pub fn awaiting_ack(&self) -> bool {
        self.awaiting_ack
    }

    pub fn current_prompt(&self) -> CalibrationProgress<T> {
        let index = self.samples.len();
        CalibrationProgress::Prompt { index, cell: self.layout.calibration_cells()[index.min(2)] }
    }

    pub fn feed_frame(&mut self, frame: &SkeletonFrame<T>) -> Option<CalibrationProgress<T>> {
        self.last_frame = Some(frame.clone());
        if self.awaiting_ack {
            return None;
        }
        self.detector.feed(frame)?;
        Some(self.capture(ConfirmedBy::HandRaise))
    }

    /// Therapist confirmation of the current position.
    pub fn confirm(&mut self) -> Result<CalibrationProgress<T>, CalibrationError> {
        if self.awaiting_ack {
            return Err(CalibrationError::Wizard("previous sample not acknowledged"));
        }
        if self.last_frame.is_none() {
            return Err(CalibrationError::Wizard("no skeleton frame received yet"));
        }
        Ok(self.capture(ConfirmedBy::Therapist))
    }

    fn capture(&mut self, by: ConfirmedBy) -> CalibrationProgress<T> {
        let frame = self.last_frame.as_ref().expect("capture requires a frame");
        let index = self.samples.len();
        let cell = self.layout.calibration_cells()[index];
        let sample = CalibrationSample::new(cell, player_floor_point(frame), frame.t_ms());
        self.samples.push(sample);
        self.awaiting_ack = true;
        CalibrationProgress::SampleCaptured { index, cell, floor_point: sample.floor_point, by }
    }

    /// Accepts the last captured sample and moves on; after the third sample
    /// this estimates the grid.
    pub fn acknowledge(&mut self) -> Result<CalibrationProgress<T>, CalibrationError> {
        if !self.awaiting_ack {
            return Err(CalibrationError::Wizard("no sample awaiting acknowledgement"));
        }
        self.awaiting_ack = false;
        self.detector.reset();
        if self.samples.len() < 3 {
            return Ok(self.current_prompt());
        }
        let samples = [self.samples[0], self.samples[1], self.samples[2]];
        self.samples.clear();
        Ok(match estimate_grid_frame(self.layout, &samples) {
            Ok(grid) => CalibrationProgress::Completed { grid },
            Err(e) => CalibrationProgress::Failed { reason: e.to_string() },
        })
    }
}
