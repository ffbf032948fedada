//! Street cross-section shared by the generator, the waypoint builder and traffic.
//!
//! Roads are axis-aligned. Each segment runs from `a` to `b` with `a < b` on
//! its axis; the left normal of that direction defines the `Left` side.
//! Measured from the centerline, a road of width 12 and sidewalks of width 4
//! look like this:
//!
//! ```text
//!   lateral   0 ..  3      vehicle lane (one per direction, right-hand traffic)
//!             4 ..  6      curbside parking strip
//!             6 .. 10      sidewalk; lanes 3,2,1,0 at 6.5, 7.5, 8.5, 9.5
//!            10 + setback  building frontage line
//! ```
//!
//! Within `corner` (= half road width + sidewalk width) of an intersection
//! the space belongs to the junction: crosswalks, corner links and vehicle
//! connectors live there, sidewalks and lanes start just outside it.

use crate::geometry::Vec2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

/// Travel axis of an axis-aligned road.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    EastWest,
    NorthSouth,
}

impl Axis {
    pub fn of(dir: Vec2) -> Axis {
        if dir.x.abs() >= dir.y.abs() {
            Axis::EastWest
        } else {
            Axis::NorthSouth
        }
    }

    pub fn other(self) -> Axis {
        match self {
            Axis::EastWest => Axis::NorthSouth,
            Axis::NorthSouth => Axis::EastWest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreetLayout {
    /// Spacing target for fine waypoints along sidewalks and vehicle lanes.
    pub fine_step: f64,
    /// Fine sidewalk lane offsets from the road centerline, lane 0 first
    /// (innermost, building side) to lane 3 (curb side).
    pub lane_offsets: Vec<f64>,
    pub crosswalk_points: usize,
    /// Distance from the sidewalk start back toward the node where the crosswalk sits.
    pub crosswalk_inset: f64,
    pub building_setback: f64,
}

impl Default for StreetLayout {
    fn default() -> Self {
        Self { fine_step: 5.0, lane_offsets: vec![9.5, 8.5, 7.5, 6.5], crosswalk_points: 8, crosswalk_inset: 2.0, building_setback: 1.0 }
    }
}

/// Geometry of one road segment under a layout.
#[derive(Debug, Clone, Copy)]
pub struct SegmentFrame {
    pub a: Vec2,
    pub b: Vec2,
    /// Unit direction from `a` to `b`.
    pub dir: Vec2,
    /// Left normal of `dir`.
    pub normal: Vec2,
    pub length: f64,
    pub road_half: f64,
    pub sidewalk_width: f64,
}

impl SegmentFrame {
    pub fn new(a: Vec2, b: Vec2, width: f64, sidewalk_width: f64) -> Self {
        let d = b.sub(a);
        let dir = d.normalized();
        Self { a, b, dir, normal: dir.perp(), length: d.length(), road_half: width / 2.0, sidewalk_width }
    }

    /// Half extent of the junction square around each end node.
    pub fn corner(&self) -> f64 {
        self.road_half + self.sidewalk_width
    }

    /// Point at longitudinal `s` from `a` and signed lateral `t` (positive = left).
    pub fn point(&self, s: f64, t: f64) -> Vec2 {
        self.a.add(self.dir.scale(s)).add(self.normal.scale(t))
    }

    pub fn sidewalk_center(&self) -> f64 {
        self.road_half + self.sidewalk_width / 2.0
    }

    pub fn vehicle_lane_offset(&self) -> f64 {
        self.road_half / 2.0
    }

    pub fn parking_offset(&self) -> f64 {
        self.road_half * 5.0 / 6.0
    }

    /// Longitudinal range covered by sidewalks and lanes (between junction squares).
    pub fn span(&self) -> (f64, f64) {
        (self.corner(), self.length - self.corner())
    }

    pub fn frontage_line(&self, layout: &StreetLayout) -> f64 {
        self.corner() + layout.building_setback
    }

    /// Number of evenly spaced fine points over the span at spacing close to `step`.
    pub fn fine_count(&self, step: f64) -> usize {
        let (s0, s1) = self.span();
        ((s1 - s0) / step + 1e-9).floor() as usize + 1
    }

    pub fn fine_s(&self, step: f64, i: usize) -> f64 {
        let (s0, s1) = self.span();
        let n = self.fine_count(step);
        if n <= 1 {
            return 0.5 * (s0 + s1);
        }
        s0 + (s1 - s0) * i as f64 / (n - 1) as f64
    }

    /// Fine sidewalk waypoint `i` of `lane` on `side`.
    pub fn sidewalk_point(&self, layout: &StreetLayout, side: Side, lane: usize, i: usize) -> Vec2 {
        self.point(self.fine_s(layout.fine_step, i), side.sign() * layout.lane_offsets[lane])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_span_gives_seventeen_points() {
        let f = SegmentFrame::new(Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0), 12.0, 4.0);
        assert_eq!(f.corner(), 10.0);
        assert_eq!(f.fine_count(5.0), 17);
        assert_eq!(f.fine_s(5.0, 0), 10.0);
        assert_eq!(f.fine_s(5.0, 16), 90.0);
        let l = StreetLayout::default();
        assert_eq!(f.sidewalk_point(&l, Side::Right, 0, 0), Vec2::new(10.0, -9.5));
    }
}
