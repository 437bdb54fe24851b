//! 1-D interval geometry shared by the regression loss, NMS and evaluation.

use crate::tensor::Scalar;

/// Temporal intersection over union. Two coincident zero-length segments
/// have tIoU 1; any other empty union gives 0.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// Generalized IoU of two 1-D segments, in `[-1, 1]`.
pub fn giou(a: (f64, f64), b: (f64, f64)) -> f64 {
    giou_with_grad(a.0, a.1, b.0, b.1).0
}

/// gIoU of `[ps, pe]` against `[ts, te]` together with its partial
/// derivatives with respect to `ps` and `pe`.
///
/// Kinks (`min`/`max` ties) take the derivative of the prediction side.
pub fn giou_with_grad<S: Scalar>(ps: S, pe: S, ts: S, te: S) -> (S, S, S) {
    let zero = S::zero();
    let one = S::one();
    let raw_inter = pe.min(te) - ps.max(ts);
    let overlapping = raw_inter > zero;
    let inter = if overlapping { raw_inter } else { zero };
    let union = (pe - ps) + (te - ts) - inter;
    let encl = pe.max(te) - ps.min(ts);

    if !(encl > zero) {
        // both segments collapse onto the same point
        return (one, zero, zero);
    }

    let (d_inter_ps, d_inter_pe) = if overlapping {
        (if ps >= ts { -one } else { zero }, if pe <= te { one } else { zero })
    } else {
        (zero, zero)
    };
    let d_union_ps = -one - d_inter_ps;
    let d_union_pe = one - d_inter_pe;
    let d_encl_ps = if ps <= ts { -one } else { zero };
    let d_encl_pe = if pe >= te { one } else { zero };

    let (iou, d_iou_ps, d_iou_pe) = if union > zero {
        let u2 = union * union;
        (
            inter / union,
            (d_inter_ps * union - inter * d_union_ps) / u2,
            (d_inter_pe * union - inter * d_union_pe) / u2,
        )
    } else {
        (zero, zero, zero)
    };

    let e2 = encl * encl;
    let g = iou - (encl - union) / encl;
    let d_ps = d_iou_ps + (d_union_ps * encl - union * d_encl_ps) / e2;
    let d_pe = d_iou_pe + (d_union_pe * encl - union * d_encl_pe) / e2;
    (g, d_ps, d_pe)
}
