//! Planar convex set algebra used to build the tube controller.
//!
//! Bounded sets are vertex polygons (`ConvexPolygon`, counter-clockwise, no
//! repeated or collinear vertices). Constraint sets, which may be unbounded,
//! are kept as normalized halfspace systems (`HalfspaceSet`) and are only ever
//! tightened row by row through support functions.

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

pub type Point = Vector2<f64>;

const GEOM_EPS: f64 = 1e-12;

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl Serialize for ConvexPolygon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pts: Vec<[f64; 2]> = self.vertices.iter().map(|v| [v[0], v[1]]).collect();
        pts.serialize(s)
    }
}

impl ConvexPolygon {
    /// Convex hull of `points`, returned counter-clockwise starting at the
    /// lowest (then leftmost) vertex. Fails on an empty or non-finite input.
    pub fn hull(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("convex hull of an empty point set"));
        }
        if points
            .iter()
            .any(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::domain("non-finite polygon vertex"));
        }
        let scale = points.iter().fold(0.0f64, |m, p| m.max(p.amax()));
        let tol = GEOM_EPS * scale;

        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        pts.dedup_by(|a, b| (*a - *b).amax() <= tol);
        if pts.len() <= 2 {
            if pts.len() == 2 && (pts[0] - pts[1]).amax() <= tol {
                pts.truncate(1);
            }
            return Ok(Self::from_ccw_unchecked(pts));
        }

        // Andrew's monotone chain; nearly straight turns (relative to edge lengths) drop the vertex.
        let turns_left = |o: Point, a: Point, b: Point| {
            let (e1, e2) = (a - o, b - o);
            cross(e1, e2) > GEOM_EPS * e1.norm() * e2.norm()
        };
        let mut lower: Vec<Point> = Vec::with_capacity(pts.len());
        for &p in &pts {
            while lower.len() >= 2 && !turns_left(lower[lower.len() - 2], lower[lower.len() - 1], p)
            {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<Point> = Vec::with_capacity(pts.len());
        for &p in pts.iter().rev() {
            while upper.len() >= 2 && !turns_left(upper[upper.len() - 2], upper[upper.len() - 1], p)
            {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        Ok(Self::from_ccw_unchecked(lower))
    }

    fn from_ccw_unchecked(mut vertices: Vec<Point>) -> Self {
        if vertices.len() > 1 {
            let start = lowest_index(&vertices);
            vertices.rotate_left(start);
        }
        Self { vertices }
    }

    pub fn point(p: Point) -> Self {
        Self { vertices: vec![p] }
    }

    pub fn origin() -> Self {
        Self::point(Point::zeros())
    }

    pub fn rect(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Result<Self> {
        Self::hull(&[
            Point::new(x_lo, y_lo),
            Point::new(x_hi, y_lo),
            Point::new(x_hi, y_hi),
            Point::new(x_lo, y_hi),
        ])
    }

    /// The ∞-norm ball `{w : ‖w‖∞ ≤ r}`; a point at the origin when `r = 0`.
    pub fn inf_ball(r: f64) -> Result<Self> {
        if !(r >= 0.0) {
            return Err(Error::domain(format!(
                "ball radius must be nonnegative, got {r}"
            )));
        }
        Self::rect(-r, r, -r, r)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn is_point(&self) -> bool {
        self.vertices.len() == 1
    }

    /// True when the vertex list is non-empty, finite, deduplicated,
    /// strictly convex and counter-clockwise.
    pub fn is_valid(&self) -> bool {
        let n = self.vertices.len();
        if n == 0
            || self
                .vertices
                .iter()
                .any(|v| !v[0].is_finite() || !v[1].is_finite())
        {
            return false;
        }
        if n == 1 {
            return true;
        }
        if n == 2 {
            return (self.vertices[0] - self.vertices[1]).amax() > 0.0;
        }
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            (b - a).amax() > 0.0 && cross(b - a, c - b) > 0.0
        })
    }

    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        0.5 * (0..n)
            .map(|i| cross(self.vertices[i], self.vertices[(i + 1) % n]))
            .sum::<f64>()
    }

    pub fn translate(&self, t: Point) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v + t).collect(),
        }
    }

    /// Uniform scaling about the origin; `factor` must be positive.
    pub fn scale(&self, factor: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v * factor).collect(),
        }
    }

    /// Outward unit normals and offsets of the polygon's edges. Empty for
    /// points and segments, which have no proper facets.
    pub fn facets(&self) -> Vec<(Point, f64)> {
        let n = self.vertices.len();
        if n < 3 {
            return Vec::new();
        }
        (0..n)
            .map(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                let e = b - a;
                let normal = Point::new(e[1], -e[0]).normalize();
                (normal, normal.dot(&a))
            })
            .collect()
    }

    pub fn to_halfspaces(&self) -> Result<HalfspaceSet> {
        let f = self.facets();
        if f.is_empty() {
            return Err(Error::domain(
                "degenerate polygon has no halfspace representation",
            ));
        }
        let (rows, offsets): (Vec<_>, Vec<_>) = f.into_iter().unzip();
        HalfspaceSet::new(rows, offsets)
    }

    /// Membership up to `tol`, checked through the support function so that
    /// points and segments are handled too.
    pub fn contains(&self, x: Point, tol: f64) -> bool {
        match self.vertices.len() {
            0 => false,
            1 => (x - self.vertices[0]).amax() <= tol,
            2 => {
                let (a, b) = (self.vertices[0], self.vertices[1]);
                let d = b - a;
                let t = ((x - a).dot(&d) / d.dot(&d)).clamp(0.0, 1.0);
                (a + d * t - x).norm() <= tol
            }
            _ => self.facets().iter().all(|(nrm, g)| nrm.dot(&x) <= g + tol),
        }
    }

    /// Smallest slack of `x` over the facet inequalities (negative when outside).
    pub fn membership_margin(&self, x: Point) -> f64 {
        match self.vertices.len() {
            0 => f64::NEG_INFINITY,
            1 => -(x - self.vertices[0]).amax(),
            2 => {
                let (a, b) = (self.vertices[0], self.vertices[1]);
                let d = b - a;
                let t = ((x - a).dot(&d) / d.dot(&d)).clamp(0.0, 1.0);
                -(a + d * t - x).norm()
            }
            _ => self
                .facets()
                .iter()
                .map(|(nrm, g)| g - nrm.dot(&x))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

fn lowest_index(v: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in v.iter().enumerate() {
        let b = v[best];
        if p[1] < b[1] || (p[1] == b[1] && p[0] < b[0]) {
            best = i;
        }
    }
    best
}

/// Support function `max_{v ∈ P} ⟨d, v⟩`.
pub fn support(p: &ConvexPolygon, d: Point) -> Result<f64> {
    if d[0] == 0.0 && d[1] == 0.0 {
        return Err(Error::domain("support function needs a nonzero direction"));
    }
    if p.is_empty() {
        return Err(Error::domain("support of an empty polygon"));
    }
    Ok(support_unchecked(p, d))
}

pub(crate) fn support_unchecked(p: &ConvexPolygon, d: Point) -> f64 {
    p.vertices
        .iter()
        .map(|v| d.dot(v))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Minkowski sum by merging the two edge sequences in angular order.
pub fn minkowski_sum(p: &ConvexPolygon, q: &ConvexPolygon) -> Result<ConvexPolygon> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::domain("Minkowski sum with an empty polygon"));
    }
    if p.is_point() {
        return Ok(q.translate(p.vertices[0]));
    }
    if q.is_point() {
        return Ok(p.translate(q.vertices[0]));
    }
    // vertices are stored starting at the lowest vertex, so edge angles increase from 0
    let pv = &p.vertices;
    let qv = &q.vertices;
    let (n, m) = (pv.len(), qv.len());
    let pe = |i: usize| pv[(i + 1) % n] - pv[i % n];
    let qe = |j: usize| qv[(j + 1) % m] - qv[j % m];
    let mut out = Vec::with_capacity(n + m);
    let (mut i, mut j) = (0usize, 0usize);
    while i < n || j < m {
        out.push(pv[i % n] + qv[j % m]);
        let c = if i >= n {
            -1.0
        } else if j >= m {
            1.0
        } else {
            cross(pe(i), qe(j))
        };
        if c >= 0.0 && i < n {
            i += 1;
        }
        if c <= 0.0 && j < m {
            j += 1;
        }
    }
    ConvexPolygon::hull(&out)
}

/// Image of a polygon under a 2×2 linear map.
pub fn linear_map(m: &Matrix2<f64>, p: &ConvexPolygon) -> Result<ConvexPolygon> {
    let pts: Vec<Point> = p.vertices.iter().map(|v| m * v).collect();
    ConvexPolygon::hull(&pts)
}

/// Image of a polygon under a 1×2 map: the interval `[lo, hi]`.
pub fn linear_map_row(k: &RowVector2<f64>, p: &ConvexPolygon) -> (f64, f64) {
    p.vertices
        .iter()
        .map(|v| (k * v)[0])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
            (lo.min(y), hi.max(y))
        })
}

/// `{x : F·x ≤ g}` with unit-norm rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfspaceSet {
    rows: Vec<[f64; 2]>,
    offsets: Vec<f64>,
    bounded: bool,
}

impl HalfspaceSet {
    /// Normalizes every row to unit norm. A zero row is rejected.
    pub fn new(rows: Vec<Point>, offsets: Vec<f64>) -> Result<Self> {
        if rows.len() != offsets.len() {
            return Err(Error::Dimension {
                expected: rows.len(),
                got: offsets.len(),
            });
        }
        let mut r = Vec::with_capacity(rows.len());
        let mut g = Vec::with_capacity(rows.len());
        for (row, off) in rows.into_iter().zip(offsets) {
            let n = row.norm();
            if !(n > 0.0) || !off.is_finite() {
                return Err(Error::domain(format!(
                    "invalid halfspace row {row:?} ≤ {off}"
                )));
            }
            r.push([row[0] / n, row[1] / n]);
            g.push(off / n);
        }
        let mut set = Self {
            rows: r,
            offsets: g,
            bounded: false,
        };
        set.bounded = set.compute_bounded();
        Ok(set)
    }

    /// Axis-aligned box constraints; `None` leaves that side unbounded.
    pub fn from_bounds(
        x_lo: Option<f64>,
        x_hi: Option<f64>,
        y_lo: Option<f64>,
        y_hi: Option<f64>,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        let mut offs = Vec::new();
        if let Some(v) = x_lo {
            rows.push(Point::new(-1.0, 0.0));
            offs.push(-v);
        }
        if let Some(v) = x_hi {
            rows.push(Point::new(1.0, 0.0));
            offs.push(v);
        }
        if let Some(v) = y_lo {
            rows.push(Point::new(0.0, -1.0));
            offs.push(-v);
        }
        if let Some(v) = y_hi {
            rows.push(Point::new(0.0, 1.0));
            offs.push(v);
        }
        Self::new(rows, offs)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> Point {
        Point::new(self.rows[i][0], self.rows[i][1])
    }

    pub fn offset(&self, i: usize) -> f64 {
        self.offsets[i]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn rows(&self) -> impl Iterator<Item = (Point, f64)> + '_ {
        self.rows
            .iter()
            .zip(&self.offsets)
            .map(|(r, &g)| (Point::new(r[0], r[1]), g))
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    pub fn contains(&self, x: Point, tol: f64) -> bool {
        self.rows().all(|(r, g)| r.dot(&x) <= g + tol)
    }

    /// Smallest row slack `g_i − F_i·x`.
    pub fn margin(&self, x: Point) -> f64 {
        self.rows()
            .map(|(r, g)| g - r.dot(&x))
            .fold(f64::INFINITY, f64::min)
    }

    fn clip_box_half_width(&self) -> f64 {
        1e6 * (1.0 + self.offsets.iter().fold(0.0f64, |m, g| m.max(g.abs())))
    }

    /// Intersection with the square `[-b, b]²`; `None` if empty.
    pub fn clip_to_box(&self, b: f64) -> Option<ConvexPolygon> {
        let mut poly = vec![
            Point::new(-b, -b),
            Point::new(b, -b),
            Point::new(b, b),
            Point::new(-b, b),
        ];
        for (r, g) in self.rows() {
            poly = clip_halfplane(&poly, r, g);
            if poly.is_empty() {
                return None;
            }
        }
        ConvexPolygon::hull(&poly).ok()
    }

    fn compute_bounded(&self) -> bool {
        let b = self.clip_box_half_width();
        match self.clip_to_box(b) {
            None => true,
            Some(p) => p.vertices().iter().all(|v| v.amax() < 0.5 * b),
        }
    }

    /// Clipped polygon; bounded sets are clipped a second time against a box
    /// fitted to the first result, since intersections computed on the huge
    /// initial box lose absolute precision.
    fn clipped(&self) -> Option<ConvexPolygon> {
        let rough = self.clip_to_box(self.clip_box_half_width())?;
        if !self.bounded {
            return Some(rough);
        }
        let extent = rough.vertices().iter().fold(0.0f64, |m, v| m.max(v.amax()));
        self.clip_to_box(2.0 * extent + 1.0).or(Some(rough))
    }

    /// Vertex form of a bounded, non-empty set.
    pub fn to_polygon(&self) -> Result<ConvexPolygon> {
        if !self.bounded {
            return Err(Error::domain(
                "cannot convert an unbounded halfspace set to a polygon",
            ));
        }
        self.clipped()
            .ok_or_else(|| Error::domain("halfspace set is empty"))
    }

    pub fn is_nonempty(&self) -> bool {
        self.clipped().is_some()
    }

    /// Index of the first row whose addition empties the set, if any.
    pub fn first_conflicting_row(&self) -> Option<usize> {
        let b = self.clip_box_half_width();
        let mut poly = vec![
            Point::new(-b, -b),
            Point::new(b, -b),
            Point::new(b, b),
            Point::new(-b, b),
        ];
        for (i, (r, g)) in self.rows().enumerate() {
            poly = clip_halfplane(&poly, r, g);
            if poly.is_empty() {
                return Some(i);
            }
        }
        None
    }

    /// `max F_i·x` over the set for an arbitrary direction, via the clipped polygon.
    pub fn support(&self, d: Point) -> Option<f64> {
        let p = self.clipped()?;
        Some(support_unchecked(&p, d))
    }
}

/// Sutherland–Hodgman step against `n·x ≤ g`.
fn clip_halfplane(poly: &[Point], n: Point, g: f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let k = poly.len();
    for i in 0..k {
        let a = poly[i];
        let b = poly[(i + 1) % k];
        let fa = n.dot(&a) - g;
        let fb = n.dot(&b) - g;
        if fa <= 0.0 {
            out.push(a);
        }
        if (fa < 0.0 && fb > 0.0) || (fa > 0.0 && fb < 0.0) {
            let t = fa / (fa - fb);
            out.push(a + (b - a) * t);
        }
    }
    out
}

/// Row-wise erosion `X ⊖ Z`: every offset `g_i` becomes `g_i − h_Z(F_i)`.
pub fn pontryagin_diff(x: &HalfspaceSet, z: &ConvexPolygon) -> Result<HalfspaceSet> {
    if z.is_empty() {
        return Err(Error::domain("Pontryagin difference with an empty polygon"));
    }
    let rows: Vec<Point> = x.rows().map(|(r, _)| r).collect();
    let offsets: Vec<f64> = x.rows().map(|(r, g)| g - support_unchecked(z, r)).collect();
    let out = HalfspaceSet::new(rows, offsets)?;
    if let Some(row) = out.first_conflicting_row() {
        return Err(Error::TighteningInfeasible {
            row,
            detail: format!(
                "row {:?} tightened from {} to {} leaves no admissible point",
                out.row(row),
                x.offset(row),
                out.offset(row)
            ),
        });
    }
    Ok(out)
}

/// Spectral radius of a real 2×2 matrix.
pub fn spectral_radius(m: &Matrix2<f64>) -> f64 {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m.determinant();
    let disc = 0.25 * tr * tr - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (0.5 * tr + r).abs().max((0.5 * tr - r).abs())
    } else {
        det.max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrpiSettings {
    /// Additive ∞-norm accuracy of the outer approximation.
    pub eps: f64,
    /// Largest number of Minkowski terms before giving up.
    pub max_terms: usize,
}

impl Default for MrpiSettings {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_terms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrpiResult {
    pub set: ConvexPolygon,
    /// Number of Minkowski terms `s`.
    pub terms: usize,
    /// Contraction factor with `A_K^s·W ⊆ α·W`.
    pub alpha: f64,
}

/// Outer ε-approximation of the minimal robust positively invariant set of
/// `x⁺ = A_K·x + w`, `w ∈ W`.
///
/// Finds the smallest `s` such that `A_K^s·W ⊆ α·W` with
/// `α ≤ ε / (ε + M(s))`, where `M(s)` is the largest axis support of the
/// partial sum `F_s = ⊕_{i<s} A_K^i·W`, and returns `(1 − α)⁻¹·F_s`.
pub fn mrpi_approx(
    a_k: &Matrix2<f64>,
    w: &ConvexPolygon,
    settings: &MrpiSettings,
) -> Result<MrpiResult> {
    let rho = spectral_radius(a_k);
    if !(rho < 1.0) {
        return Err(Error::NotStable(rho));
    }
    if !(settings.eps > 0.0) {
        return Err(Error::domain("mRPI accuracy must be positive"));
    }
    if w.is_point() {
        if w.vertices()[0].amax() > 0.0 {
            return Err(Error::domain("disturbance set must contain the origin"));
        }
        return Ok(MrpiResult {
            set: w.clone(),
            terms: 1,
            alpha: 0.0,
        });
    }
    let facets = w.facets();
    if facets.is_empty() || facets.iter().any(|(_, g)| *g <= 0.0) {
        return Err(Error::domain(
            "disturbance set must contain the origin in its interior",
        ));
    }
    let axes = [
        Point::new(1.0, 0.0),
        Point::new(-1.0, 0.0),
        Point::new(0.0, 1.0),
        Point::new(0.0, -1.0),
    ];

    let mut partial = w.clone();
    let mut power = *a_k;
    for s in 1..=settings.max_terms {
        let alpha = facets
            .iter()
            .map(|(f, g)| support_unchecked(w, power.transpose() * f) / g)
            .fold(0.0f64, f64::max);
        let scale = axes
            .iter()
            .map(|d| support_unchecked(&partial, *d))
            .fold(0.0f64, f64::max);
        if alpha <= settings.eps / (settings.eps + scale) {
            let set = partial.scale(1.0 / (1.0 - alpha));
            return Ok(MrpiResult {
                set,
                terms: s,
                alpha,
            });
        }
        partial = minkowski_sum(&partial, &linear_map(&power, w)?)?;
        power *= a_k;
    }
    Err(Error::MaxIterations(settings.max_terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub invariant: bool,
    /// Minimum over test directions of `h_Z(d) − h_{A_K Z}(d) − h_W(d)`.
    pub worst_margin: f64,
}

/// Checks `A_K·Z ⊕ W ⊆ Z` along Z's facet normals (or along the normals of
/// the image and eight compass directions when Z is degenerate).
pub fn invariance_check(
    a_k: &Matrix2<f64>,
    z: &ConvexPolygon,
    w: &ConvexPolygon,
    tol: f64,
) -> Result<InvarianceReport> {
    let image = minkowski_sum(&linear_map(a_k, z)?, w)?;
    let mut dirs: Vec<Point> = z.facets().into_iter().map(|(n, _)| n).collect();
    if dirs.is_empty() {
        dirs.extend(image.facets().into_iter().map(|(n, _)| n));
        for k in 0..8 {
            let t = k as f64 * std::f64::consts::FRAC_PI_4;
            dirs.push(Point::new(t.cos(), t.sin()));
        }
    }
    let worst = dirs
        .iter()
        .map(|d| support_unchecked(z, *d) - support_unchecked(&image, *d))
        .fold(f64::INFINITY, f64::min);
    Ok(InvarianceReport {
        invariant: worst >= -tol,
        worst_margin: worst,
    })
}

/// Outer simplification of a robustly invariant polygon.
///
/// Repeatedly removes the facet with the shortest edge while the enlarged
/// polygon still satisfies `A_K·Z ⊕ W ⊆ Z` and has grown by at most
/// `max_growth` along every facet normal of the input. Fewer, better separated
/// facets keep the safety QP well conditioned.
pub fn simplify_invariant(
    a_k: &Matrix2<f64>,
    z: &ConvexPolygon,
    w: &ConvexPolygon,
    max_growth: f64,
) -> Result<ConvexPolygon> {
    let original = z.facets();
    if original.len() <= 3 || !(max_growth >= 0.0) {
        return Ok(z.clone());
    }
    let mut current = z.clone();
    loop {
        let facets = current.facets();
        if facets.len() <= 3 {
            break;
        }
        let verts = current.vertices();
        let k = verts.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let la = (verts[(a + 1) % k] - verts[a]).norm();
            let lb = (verts[(b + 1) % k] - verts[b]).norm();
            la.total_cmp(&lb)
        });
        let mut replaced = None;
        for idx in order {
            let (rows, offs): (Vec<Point>, Vec<f64>) = facets
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != idx)
                .map(|(_, f)| *f)
                .unzip();
            let hs = HalfspaceSet::new(rows, offs)?;
            if !hs.is_bounded() {
                continue;
            }
            let Ok(candidate) = hs.to_polygon() else {
                continue;
            };
            let growth = original
                .iter()
                .map(|(n, g)| support_unchecked(&candidate, *n) - g)
                .fold(0.0f64, f64::max);
            if growth > max_growth {
                continue;
            }
            if invariance_check(a_k, &candidate, w, 0.0)?.invariant {
                replaced = Some(candidate);
                break;
            }
        }
        match replaced {
            Some(c) => current = c,
            None => break,
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(r: f64) -> ConvexPolygon {
        ConvexPolygon::inf_ball(r).unwrap()
    }

    fn same_set(a: &ConvexPolygon, b: &ConvexPolygon, tol: f64) -> bool {
        (0..64).all(|k| {
            let t = k as f64 * std::f64::consts::TAU / 64.0;
            let d = Point::new(t.cos(), t.sin());
            (support_unchecked(a, d) - support_unchecked(b, d)).abs() <= tol
        })
    }

    #[test]
    fn hull_removes_duplicates_and_collinear_points() {
        let p = ConvexPolygon::hull(&[
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.5, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
            Point::new(0.0, 1.0),
            Point::new(0.5, 0.5),
        ])
        .unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.is_valid());
        assert!((p.area() - 1.0).abs() < 1e-15);
        assert!(ConvexPolygon::hull(&[]).is_err());
        let seg = ConvexPolygon::hull(&[
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.5, 0.5),
        ])
        .unwrap();
        assert_eq!(seg.len(), 2);
    }

    #[test]
    fn minkowski_examples() {
        let s = minkowski_sum(&bx(1.0), &bx(0.3)).unwrap();
        assert!(same_set(&s, &bx(1.3), 1e-12));
        assert_eq!(s.len(), 4);
        let p = ConvexPolygon::hull(&[
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ])
        .unwrap();
        assert_eq!(minkowski_sum(&p, &ConvexPolygon::origin()).unwrap(), p);
        let hex = minkowski_sum(&p, &bx(0.1)).unwrap();
        // edge directions 0°, 90°, 135°, 180°, 270°: the sum is a pentagon
        assert_eq!(hex.len(), 5);
        assert!((support(&hex, Point::new(1.0, 0.0)).unwrap() - 1.1).abs() < 1e-12);
        let seg = ConvexPolygon::hull(&[Point::new(-1.0, 0.0), Point::new(1.0, 0.0)]).unwrap();
        let r = minkowski_sum(
            &seg,
            &ConvexPolygon::hull(&[Point::new(0.0, -1.0), Point::new(0.0, 1.0)]).unwrap(),
        )
        .unwrap();
        assert!(same_set(&r, &bx(1.0), 1e-12));
    }

    #[test]
    fn support_examples() {
        let b = bx(0.3);
        assert!((support(&b, Point::new(1.0, 0.0)).unwrap() - 0.3).abs() < 1e-15);
        assert!((support(&b, Point::new(1.0, 1.0)).unwrap() - 0.6).abs() < 1e-15);
        assert!(support(&b, Point::zeros()).is_err());
    }

    #[test]
    fn pontryagin_examples() {
        let x = HalfspaceSet::from_bounds(Some(-2.0), Some(2.0), Some(-2.0), Some(2.0)).unwrap();
        let t = pontryagin_diff(&x, &bx(0.3)).unwrap();
        assert!(same_set(&t.to_polygon().unwrap(), &bx(1.7), 1e-9));
        assert_eq!(pontryagin_diff(&x, &ConvexPolygon::origin()).unwrap(), x);

        let half = HalfspaceSet::from_bounds(Some(-2.0), None, None, None).unwrap();
        assert!(!half.is_bounded());
        let z = ConvexPolygon::rect(-0.45, 0.2, -1.0, 1.0).unwrap();
        let t = pontryagin_diff(&half, &z).unwrap();
        assert!((t.offset(0) - 1.55).abs() < 1e-12);
        assert!(t.contains(Point::new(-1.55, 0.0), 1e-12));
        assert!(!t.contains(Point::new(-1.56, 0.0), 1e-12));

        let tight = HalfspaceSet::from_bounds(Some(-2.0), None, Some(-5.0), Some(5.0)).unwrap();
        match pontryagin_diff(&tight, &bx(10.0)) {
            Err(Error::TighteningInfeasible { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected infeasible tightening, got {other:?}"),
        }
    }

    #[test]
    fn linear_map_examples() {
        let p = ConvexPolygon::hull(&[
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.3),
            Point::new(0.4, 1.0),
        ])
        .unwrap();
        assert_eq!(linear_map(&Matrix2::identity(), &p).unwrap(), p);
        assert_eq!(
            linear_map(&Matrix2::zeros(), &p).unwrap(),
            ConvexPolygon::origin()
        );
        let m = linear_map(&Matrix2::new(0.5, 0.0, 0.0, 2.0), &bx(1.0)).unwrap();
        assert!(same_set(
            &m,
            &ConvexPolygon::rect(-0.5, 0.5, -2.0, 2.0).unwrap(),
            1e-15
        ));
        let (lo, hi) = linear_map_row(&RowVector2::new(1.0, -2.0), &bx(1.0));
        assert_eq!((lo, hi), (-3.0, 3.0));
    }

    #[test]
    fn mrpi_examples() {
        let w = bx(0.3);
        let s = MrpiSettings::default();
        let z0 = mrpi_approx(&Matrix2::zeros(), &w, &s).unwrap();
        assert_eq!(z0.set, w);
        for eps in [1e-2, 1e-4, 1e-8] {
            let z =
                mrpi_approx(&(Matrix2::identity() * 0.5), &w, &MrpiSettings { eps, ..s }).unwrap();
            assert!(same_set(&z.set, &bx(0.6), 1e-9), "eps={eps}");
        }
        assert!(matches!(
            mrpi_approx(&Matrix2::identity(), &w, &s),
            Err(Error::NotStable(_))
        ));
        let slow = Matrix2::identity() * 0.999;
        assert!(matches!(
            mrpi_approx(
                &slow,
                &w,
                &MrpiSettings {
                    eps: 1e-9,
                    max_terms: 20
                }
            ),
            Err(Error::MaxIterations(20))
        ));
        let point =
            mrpi_approx(&(Matrix2::identity() * 0.5), &ConvexPolygon::origin(), &s).unwrap();
        assert!(point.set.is_point());
    }

    #[test]
    fn invariance_examples() {
        let w = bx(0.3);
        let half = Matrix2::identity() * 0.5;
        let z = mrpi_approx(&half, &w, &MrpiSettings::default())
            .unwrap()
            .set;
        assert!(invariance_check(&half, &z, &w, 1e-9).unwrap().invariant);
        let r = invariance_check(&half, &w, &w, 1e-9).unwrap();
        assert!(!r.invariant);
        assert!((r.worst_margin + 0.15).abs() < 1e-12);
        let rot = Matrix2::new(0.5, -0.3, 0.2, 0.6);
        assert!(
            invariance_check(&rot, &bx(1e6), &bx(0.01), 1e-9)
                .unwrap()
                .invariant
        );
        let o = ConvexPolygon::origin();
        assert!(invariance_check(&rot, &o, &o, 1e-12).unwrap().invariant);
    }

    #[test]
    fn rotation_mrpi_is_invariant_and_tight() {
        let a = Matrix2::new(0.8, -0.4, 0.3, 0.7);
        let w = bx(0.2);
        let r = mrpi_approx(&a, &w, &MrpiSettings::default()).unwrap();
        assert!(r.set.is_valid());
        let rep = invariance_check(&a, &r.set, &w, 1e-9).unwrap();
        assert!(rep.invariant);
        // outer approximation: contains W and every finite partial sum
        assert!(w.vertices().iter().all(|v| r.set.contains(*v, 1e-12)));
    }

    #[test]
    fn simplified_tube_stays_invariant_and_contains_original() {
        let a_k = Matrix2::new(0.6, -0.3, 0.2, 0.7);
        let w = bx(0.3);
        let z = mrpi_approx(&a_k, &w, &MrpiSettings::default()).unwrap().set;
        let s = simplify_invariant(&a_k, &z.scale(1.05), &w, 0.05).unwrap();
        assert!(s.len() < z.len(), "{} vs {}", s.len(), z.len());
        assert!(invariance_check(&a_k, &s, &w, 0.0).unwrap().invariant);
        assert!(z.vertices().iter().all(|v| s.contains(*v, 1e-9)));
    }

    fn arb_polygon() -> impl Strategy<Value = ConvexPolygon> {
        prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12).prop_map(|pts| {
            ConvexPolygon::hull(
                &pts.into_iter()
                    .map(|(x, y)| Point::new(x, y))
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn support_is_additive(p in arb_polygon(), q in arb_polygon(), t in 0.0f64..std::f64::consts::TAU) {
            let d = Point::new(t.cos(), t.sin());
            let s = minkowski_sum(&p, &q).unwrap();
            prop_assert!(s.is_valid());
            let lhs = support(&s, d).unwrap();
            let rhs = support(&p, d).unwrap() + support(&q, d).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn hull_is_valid(p in arb_polygon()) {
            prop_assert!(p.is_valid());
        }
    }
}
