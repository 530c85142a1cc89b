//! Normalized center-format boxes and the overlap/distance primitives used by
//! matching costs and regression losses.
//!
//! Every primitive comes in two flavours: a plain value function and a
//! `*_grad` variant returning the partial derivatives with respect to the
//! *first* box, in `(cx, cy, w, h)` order. At kinks (`min`, `max`, `|x|`) the
//! derivative is the limit from below in the differentiated coordinate.

use serde::{Deserialize, Serialize};

/// Smallest admissible width/height.
pub const MIN_SIZE: f64 = 1e-6;

/// A box in normalized image coordinates, center format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, clamping the center into `[0,1]` and the size into `[MIN_SIZE, 1]`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx: cx.clamp(0.0, 1.0),
            cy: cy.clamp(0.0, 1.0),
            w: w.clamp(MIN_SIZE, 1.0),
            h: h.clamp(MIN_SIZE, 1.0),
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_corners(self) -> CornerBox {
        to_corners(self)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let c = self.to_corners();
        x >= c.x1 && x <= c.x2 && y >= c.y1 && y <= c.y2
    }
}

pub fn to_corners(b: BBox) -> CornerBox {
    CornerBox {
        x1: b.cx - b.w / 2.0,
        y1: b.cy - b.h / 2.0,
        x2: b.cx + b.w / 2.0,
        y2: b.cy + b.h / 2.0,
    }
}

/// Inverse of [`to_corners`]; the result goes through [`BBox::new`] clamping.
pub fn from_corners(c: CornerBox) -> BBox {
    BBox::new(
        (c.x1 + c.x2) / 2.0,
        (c.y1 + c.y2) / 2.0,
        c.x2 - c.x1,
        c.y2 - c.y1,
    )
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    overlap(a, b).iou()
}

/// Generalized IoU: `IoU - (enclosure - union) / enclosure`.
pub fn giou(a: BBox, b: BBox) -> f64 {
    overlap(a, b).giou()
}

/// Sum of absolute coordinate differences in center format.
pub fn l1_distance(a: BBox, b: BBox) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

pub fn l1_grad(a: BBox, b: BBox) -> (f64, [f64; 4]) {
    let (av, bv) = (a.to_array(), b.to_array());
    let mut g = [0.0; 4];
    let mut v = 0.0;
    for k in 0..4 {
        let d = av[k] - bv[k];
        v += d.abs();
        g[k] = if d > 0.0 { 1.0 } else { -1.0 };
    }
    (v, g)
}

pub fn iou_grad(a: BBox, b: BBox) -> (f64, [f64; 4]) {
    let o = overlap(a, b);
    let u = o.union;
    // dIoU/dI with U = A + B - I, and dIoU/dA.
    let d_inter = (u + o.inter) / (u * u);
    let d_area_a = -o.inter / (u * u);
    (o.iou(), o.backprop(a, d_inter, d_area_a, 0.0))
}

pub fn giou_grad(a: BBox, b: BBox) -> (f64, [f64; 4]) {
    let o = overlap(a, b);
    let (u, e) = (o.union, o.enclosure);
    // giou = I/U - 1 + U/E
    let d_inter = (u + o.inter) / (u * u) - 1.0 / e;
    let d_area_a = -o.inter / (u * u) + 1.0 / e;
    let d_enc = -u / (e * e);
    (o.giou(), o.backprop(a, d_inter, d_area_a, d_enc))
}

struct Overlap {
    ca: CornerBox,
    cb: CornerBox,
    iw: f64,
    ih: f64,
    ew: f64,
    eh: f64,
    inter: f64,
    union: f64,
    enclosure: f64,
}

fn overlap(a: BBox, b: BBox) -> Overlap {
    let (ca, cb) = (to_corners(a), to_corners(b));
    let iw = ca.x2.min(cb.x2) - ca.x1.max(cb.x1);
    let ih = ca.y2.min(cb.y2) - ca.y1.max(cb.y1);
    let inter = iw.max(0.0) * ih.max(0.0);
    let union = a.area() + b.area() - inter;
    let ew = ca.x2.max(cb.x2) - ca.x1.min(cb.x1);
    let eh = ca.y2.max(cb.y2) - ca.y1.min(cb.y1);
    Overlap {
        ca,
        cb,
        iw,
        ih,
        ew,
        eh,
        inter,
        union,
        enclosure: ew * eh,
    }
}

impl Overlap {
    fn iou(&self) -> f64 {
        self.inter / self.union
    }

    fn giou(&self) -> f64 {
        self.iou() - (self.enclosure - self.union) / self.enclosure
    }

    /// Chains upstream partials w.r.t. (intersection, area of `a`, enclosure)
    /// down to the center-format coordinates of `a`.
    fn backprop(&self, a: BBox, d_inter: f64, d_area_a: f64, d_enc: f64) -> [f64; 4] {
        let (ca, cb) = (&self.ca, &self.cb);
        let iw_pos = self.iw.max(0.0);
        let ih_pos = self.ih.max(0.0);
        let d_iw = if self.iw > 0.0 { d_inter * ih_pos } else { 0.0 };
        let d_ih = if self.ih > 0.0 { d_inter * iw_pos } else { 0.0 };

        // Corner partials: [x1, y1, x2, y2] of box a.
        let mut dc = [0.0f64; 4];
        // intersection: min(ax2, bx2) - max(ax1, bx1)
        if ca.x2 <= cb.x2 {
            dc[2] += d_iw;
        }
        if ca.x1 > cb.x1 {
            dc[0] -= d_iw;
        }
        if ca.y2 <= cb.y2 {
            dc[3] += d_ih;
        }
        if ca.y1 > cb.y1 {
            dc[1] -= d_ih;
        }
        // enclosure: max(ax2, bx2) - min(ax1, bx1)
        if d_enc != 0.0 {
            let d_ew = d_enc * self.eh;
            let d_eh = d_enc * self.ew;
            if ca.x2 > cb.x2 {
                dc[2] += d_ew;
            }
            if ca.x1 <= cb.x1 {
                dc[0] -= d_ew;
            }
            if ca.y2 > cb.y2 {
                dc[3] += d_eh;
            }
            if ca.y1 <= cb.y1 {
                dc[1] -= d_eh;
            }
        }
        [
            dc[0] + dc[2],
            dc[1] + dc[3],
            0.5 * (dc[2] - dc[0]) + d_area_a * a.h,
            0.5 * (dc[3] - dc[1]) + d_area_a * a.w,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.05..0.6),
            rng.gen_range(0.05..0.6),
        )
    }

    #[test]
    fn corners_examples() {
        let c = to_corners(BBox::new(0.5, 0.5, 1.0, 1.0));
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 1.0, 1.0));
        let c = to_corners(BBox::new(0.25, 0.5, 0.5, 1.0));
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 0.5, 1.0));
    }

    #[test]
    fn corners_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let b = random_box(&mut rng);
            let r = from_corners(to_corners(b));
            for (x, y) in b.to_array().iter().zip(r.to_array()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_sizes_are_clamped() {
        let b = BBox::new(1.5, -0.2, 0.0, 3.0);
        assert_eq!(b, BBox { cx: 1.0, cy: 0.0, w: MIN_SIZE, h: 1.0 });
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(0.25, 0.5, 0.5, 1.0);
        assert_eq!(iou(a, a), 1.0);
        assert!((iou(a, b) - 0.5).abs() < 1e-12);
        let c = BBox::new(0.1, 0.1, 0.1, 0.1);
        let d = BBox::new(0.8, 0.8, 0.1, 0.1);
        assert_eq!(iou(c, d), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(0.25, 0.5, 0.5, 1.0);
        assert!((giou(a, a) - 1.0).abs() < 1e-12);
        assert!((giou(a, b) - 0.5).abs() < 1e-12);
        let c = BBox::new(0.25, 0.25, 0.1, 0.1);
        let d = BBox::new(0.75, 0.75, 0.1, 0.1);
        // enclosure 0.6^2 = 0.36, union 0.02: 0 - 0.34 / 0.36
        assert!((giou(c, d) - (-0.9444)).abs() < 1e-4);
    }

    #[test]
    fn l1_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        let b = BBox::new(0.6, 0.5, 0.2, 0.4);
        assert_eq!(l1_distance(a, a), 0.0);
        assert!((l1_distance(a, b) - 0.3).abs() < 1e-12);
    }

    fn central_diff(f: impl Fn(BBox) -> f64, a: BBox, k: usize, h: f64) -> f64 {
        let mut p = a.to_array();
        let mut m = a.to_array();
        p[k] += h;
        m[k] -= h;
        let raw = |v: [f64; 4]| BBox { cx: v[0], cy: v[1], w: v[2], h: v[3] };
        (f(raw(p)) - f(raw(m))) / (2.0 * h)
    }

    /// Distance of `a` from any non-smooth configuration relative to `b`.
    fn min_kink_gap(a: BBox, b: BBox) -> f64 {
        let (ca, cb) = (to_corners(a), to_corners(b));
        let xs = [ca.x1 - cb.x1, ca.x2 - cb.x2, ca.x1 - cb.x2, ca.x2 - cb.x1];
        let ys = [ca.y1 - cb.y1, ca.y2 - cb.y2, ca.y1 - cb.y2, ca.y2 - cb.y1];
        let l1 = [a.cx - b.cx, a.cy - b.cy, a.w - b.w, a.h - b.h];
        xs.iter().chain(ys.iter()).chain(l1.iter()).map(|d| d.abs()).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 300 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            if min_kink_gap(a, b) < 1e-3 {
                continue;
            }
            checked += 1;
            type Prim = (fn(BBox, BBox) -> (f64, [f64; 4]), fn(BBox, BBox) -> f64);
            let prims: [Prim; 3] = [(iou_grad, iou), (giou_grad, giou), (l1_grad, l1_distance)];
            for (grad_fn, val_fn) in prims {
                let (v, g) = grad_fn(a, b);
                assert!((v - val_fn(a, b)).abs() < 1e-12);
                for k in 0..4 {
                    let num = central_diff(|x| val_fn(x, b), a, k, 1e-5);
                    let denom = g[k].abs().max(num.abs()).max(1e-8);
                    assert!(
                        (g[k] - num).abs() / denom < 1e-4 || (g[k] - num).abs() < 1e-9,
                        "coord {k}: analytic {} vs numeric {num}",
                        g[k]
                    );
                }
            }
        }
    }

    #[test]
    fn disjoint_boxes_have_negative_giou() {
        let a = BBox::new(0.2, 0.2, 0.1, 0.1);
        let b = BBox::new(0.6, 0.3, 0.2, 0.1);
        assert!(giou(a, b) < 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn overlap_measures_are_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(a, b), iou(b, a));
            prop_assert_eq!(giou(a, b), giou(b, a));
            let v = iou(a, b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn giou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
            let g = giou(a, b);
            prop_assert!(g <= iou(a, b) + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0 + 1e-12);
        }

        #[test]
        fn l1_triangle_inequality(a in arb_box(), b in arb_box(), c in arb_box()) {
            prop_assert!(l1_distance(a, c) <= l1_distance(a, b) + l1_distance(b, c) + 1e-12);
        }
    }
}
