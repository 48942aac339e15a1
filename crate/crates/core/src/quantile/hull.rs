use serde::{Deserialize, Serialize};

/// Convex polygon with counterclockwise vertices.
///
/// `degenerate` marks inputs whose hull is a point or a segment; the
/// vertices then hold the extreme points found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hull {
    pub vertices: Vec<[f64; 2]>,
    pub degenerate: bool,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain. Collinear boundary points and duplicates are
/// dropped.
pub fn convex_hull_2d(points: &[[f64; 2]]) -> Hull {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Hull {
            vertices: pts,
            degenerate: true,
        };
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    let degenerate = lower.len() < 3;
    Hull {
        vertices: lower,
        degenerate,
    }
}

impl Hull {
    /// Shoelace area; zero for a degenerate hull.
    pub fn area(&self) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        let v = &self.vertices;
        let n = v.len();
        0.5 * (0..n)
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
    }

    /// Whether consecutive edges never turn clockwise.
    pub fn is_convex(&self) -> bool {
        let v = &self.vertices;
        let n = v.len();
        n < 3 || (0..n).all(|i| cross(v[i], v[(i + 1) % n], v[(i + 2) % n]) >= 0.0)
    }

    /// Point inside or on the boundary, with absolute slack `tol`.
    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        let v = &self.vertices;
        match v.len() {
            0 => false,
            1 => (p[0] - v[0][0]).hypot(p[1] - v[0][1]) <= tol,
            2 => {
                let (a, b) = (v[0], v[1]);
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len);
                let t = t.clamp(0.0, 1.0);
                let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                (p[0] - q[0]).hypot(p[1] - q[1]) <= tol
            }
            n => (0..n).all(|i| {
                let (a, b) = (v[i], v[(i + 1) % n]);
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                cross(a, b, p) >= -tol * len
            }),
        }
    }
}
