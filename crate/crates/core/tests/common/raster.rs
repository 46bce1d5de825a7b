use report_grounding::BoundingBox;

pub const GRID: usize = 1000;

/// Area-weighted rasterization on a `GRID x GRID` grid over the unit
/// square: each cell contributes the fraction of it covered by A, B, their
/// intersection and the enclosing box. Returns `(|A n B|, |A u B|, |hull|)`.
pub fn raster_areas(a: &BoundingBox, b: &BoundingBox) -> (f64, f64, f64) {
    let hull = (
        a.x.min(b.x),
        a.y.min(b.y),
        a.right().max(b.right()),
        a.bottom().max(b.bottom()),
    );
    let span = |lo: f64, hi: f64, c0: f64, c1: f64| (hi.min(c1) - lo.max(c0)).max(0.0);
    let cell = 1.0 / GRID as f64;
    let (mut inter, mut union, mut enclosing) = (0.0, 0.0, 0.0);
    for j in 0..GRID {
        let (y0, y1) = (j as f64 * cell, (j + 1) as f64 * cell);
        let ay = span(a.y, a.bottom(), y0, y1);
        let by = span(b.y, b.bottom(), y0, y1);
        let iy = span(a.y.max(b.y), a.bottom().min(b.bottom()), y0, y1);
        let hy = span(hull.1, hull.3, y0, y1);
        for i in 0..GRID {
            let (x0, x1) = (i as f64 * cell, (i + 1) as f64 * cell);
            let ca = span(a.x, a.right(), x0, x1) * ay;
            let cb = span(b.x, b.right(), x0, x1) * by;
            let ci = span(a.x.max(b.x), a.right().min(b.right()), x0, x1) * iy;
            inter += ci;
            union += ca + cb - ci;
            enclosing += span(hull.0, hull.2, x0, x1) * hy;
        }
    }
    (inter, union, enclosing)
}
