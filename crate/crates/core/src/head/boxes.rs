use crate::data::BBox;
use crate::error::{Error, Result};

fn check(b: &BBox) -> Result<()> {
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidBox(*b, "non-finite coordinate"));
    }
    if !(b[2] > b[0] && b[3] > b[1]) {
        return Err(Error::InvalidBox(*b, "degenerate box: need x2 > x1 and y2 > y1"));
    }
    Ok(())
}

fn area(b: &BBox) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union of two corner boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check(a)?;
    check(b)?;
    let inter = intersection(a, b);
    Ok(inter / (area(a) + area(b) - inter))
}

/// Generalized IoU: `IoU − (|C| − |A ∪ B|) / |C|` with `C` the smallest
/// enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    check(a)?;
    check(b)?;
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let enclosing = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    // rounding can leave the enclosing box a hair smaller than the union
    Ok(inter / union - ((enclosing - union) / enclosing).max(0.0))
}

pub fn cxcywh_to_xyxy(b: &[f64; 4]) -> BBox {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

pub fn xyxy_to_cxcywh(b: &BBox) -> [f64; 4] {
    [0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]), b[2] - b[0], b[3] - b[1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[1.0, 1.0, 3.0, 3.0]).unwrap(), 1.0 / 7.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]).unwrap(), 0.0);
        assert_eq!(giou(&[0.0, 0.0, 1.0, 1.0], &[2.0, 0.0, 3.0, 1.0]).unwrap(), -1.0 / 3.0);
    }

    #[test]
    fn degenerate_boxes_are_errors() {
        let ok = [0.0, 0.0, 1.0, 1.0];
        assert!(iou(&ok, &[1.0, 0.0, 1.0, 2.0]).is_err());
        assert!(giou(&[0.0, 2.0, 1.0, 1.0], &ok).is_err());
    }

    #[test]
    fn conversions_round_trip() {
        let b = [1.5, 2.0, 4.0, 7.5];
        assert_eq!(cxcywh_to_xyxy(&xyxy_to_cxcywh(&b)), b);
    }
}
