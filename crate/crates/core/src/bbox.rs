use std::fmt;
use std::str::FromStr;

/// Axis-aligned box, top-left corner plus size, in pixels or normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    /// Boxes with a nonpositive side mark absent or occluded targets.
    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.is_finite()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = span_overlap(self.x, self.w, other.x, other.w);
        let ih = span_overlap(self.y, self.h, other.y, other.h);
        iw * ih
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Clips the box to `[0, width) x [0, height)`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }
}

impl fmt::Display for BBox {
    /// The annotation line format, `x,y,w,h`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for BBox {
    type Err = String;

    /// Accepts comma, tab or space separated `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .collect();
        if parts.len() != 4 {
            return Err(format!("expected 4 values, found {}", parts.len()));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse::<f64>().map_err(|e| format!("`{p}`: {e}"))?;
            if !slot.is_finite() {
                return Err(format!("`{p}` is not finite"));
            }
        }
        Ok(BBox::new(v[0], v[1], v[2], v[3]))
    }
}

/// Length shared by `[a, a + aw]` and `[b, b + bw]`. A nested span yields
/// its own width exactly, so identical boxes overlap with IoU 1.
fn span_overlap(a: f64, aw: f64, b: f64, bw: f64) -> f64 {
    if a <= b && b + bw <= a + aw {
        bw.max(0.0)
    } else if b <= a && a + aw <= b + bw {
        aw.max(0.0)
    } else {
        ((a + aw).min(b + bw) - a.max(b)).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_annotation_line() {
        let b: BBox = "12,34,56,78".parse().unwrap();
        assert_eq!(b, BBox::new(12.0, 34.0, 56.0, 78.0));
        let b: BBox = "1.5\t2 3 4".parse().unwrap();
        assert_eq!(b, BBox::new(1.5, 2.0, 3.0, 4.0));
        assert!("1,2,3".parse::<BBox>().is_err());
        assert!("1,2,x,4".parse::<BBox>().is_err());
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert!((a.iou(&BBox::new(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
    }

    proptest! {
        #[test]
        fn display_parse_round_trip(x in -1e4f64..1e4, y in -1e4f64..1e4, w in 0f64..1e3, h in 0f64..1e3) {
            let b = BBox::new(x, y, w, h);
            let back: BBox = b.to_string().parse().unwrap();
            prop_assert_eq!(b, back);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0f64..100.0, 0f64..100.0, 0.1f64..50.0, 0.1f64..50.0),
            b in (0f64..100.0, 0f64..100.0, 0.1f64..50.0, 0.1f64..50.0),
        ) {
            let a = BBox::new(a.0, a.1, a.2, a.3);
            let b = BBox::new(b.0, b.1, b.2, b.3);
            let ab = a.iou(&b);
            prop_assert!((ab - b.iou(&a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn identical_boxes_overlap_exactly(x in -1e3f64..1e3, y in -1e3f64..1e3, w in 0.01f64..500.0, h in 0.01f64..500.0) {
            let b = BBox::new(x, y, w, h);
            prop_assert_eq!(b.iou(&b), 1.0);
        }
    }
}
