//! Axis-aligned bounding boxes in pixel coordinates.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::geometry::Point2;

/// An `(x, y, w, h)` box. Serializes as a four-element array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    /// Positive area and finite coordinates.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// Clamps the box to `[0, width] x [0, height]`, shrinking it as needed.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        let x0 = self.x.max(0.0).min(width);
        let y0 = self.y.max(0.0).min(height);
        let x1 = (self.x + self.w).max(0.0).min(width);
        let y1 = (self.y + self.h).max(0.0).min(height);
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(deserializer)?;
        let b = Self::from_array(a);
        if !(b.x.is_finite() && b.y.is_finite() && b.w.is_finite() && b.h.is_finite()) {
            return Err(D::Error::custom("non-finite box coordinate"));
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serializes_as_array() {
        let b = BoundingBox::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
        let back: BoundingBox = serde_json::from_str("[1.0,2.0,3.0,4.0]").unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn clamp_shrinks_out_of_frame_boxes() {
        let b = BoundingBox::new(-10.0, 5.0, 30.0, 200.0).clamp_to(100.0, 100.0);
        assert_eq!(b, BoundingBox::new(0.0, 5.0, 20.0, 95.0));
    }
}
