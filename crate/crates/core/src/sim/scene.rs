//! Scene description and ideal-ray intersection.
//!
//! Scene files are UTF-8 lines:
//!
//! ```text
//! ground g0 sx sy [reflectivity]        # plane z = g0 + sx·x + sy·y
//! cylinder cx cy r z0 z1 refl           # vertical, capped
//! ellipsoid cx cy cz rx ry rz refl      # axis-aligned
//! box x0 y0 z0 x1 y1 z1 refl            # axis-aligned
//! ```
//!
//! Coordinates are world metres with `z` up and `y` north.

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use crate::model::{MAX_RANGE_M, MIN_RANGE_M};

pub const DEFAULT_GROUND_REFLECTIVITY: u8 = 40;

/// Minimum ray parameter counted as a hit.
const T_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("scene line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("scene line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub g0: f64,
    pub sx: f64,
    pub sy: f64,
    pub reflectivity: u8,
}

impl GroundPlane {
    pub fn flat(z: f64) -> Self {
        Self {
            g0: z,
            sx: 0.0,
            sy: 0.0,
            reflectivity: DEFAULT_GROUND_REFLECTIVITY,
        }
    }

    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.g0 + self.sx * x + self.sy * y
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let denom = d.z - self.sx * d.x - self.sy * d.y;
        if denom == 0.0 {
            return None;
        }
        let t = (self.height_at(o.x, o.y) - o.z) / denom;
        (t > T_EPS).then_some(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z0: f64,
        z1: f64,
        reflectivity: u8,
    },
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        reflectivity: u8,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        reflectivity: u8,
    },
}

impl Primitive {
    pub fn reflectivity(&self) -> u8 {
        match *self {
            Primitive::Cylinder { reflectivity, .. }
            | Primitive::Ellipsoid { reflectivity, .. }
            | Primitive::Box { reflectivity, .. } => reflectivity,
        }
    }

    /// Highest `z` on the surface.
    pub fn top(&self) -> f64 {
        match *self {
            Primitive::Cylinder { z1, .. } => z1,
            Primitive::Ellipsoid { center, radii, .. } => center[2] + radii[2],
            Primitive::Box { max, .. } => max[2],
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            Primitive::Cylinder { radius, z0, z1, .. } => {
                if !(radius > 0.0) {
                    return Err(format!("cylinder radius must be > 0, got {radius}"));
                }
                if !(z1 > z0) {
                    return Err(format!("cylinder needs z1 > z0, got {z0}..{z1}"));
                }
            }
            Primitive::Ellipsoid { radii, .. } => {
                if radii.iter().any(|r| !(*r > 0.0)) {
                    return Err(format!("ellipsoid radii must be > 0, got {radii:?}"));
                }
            }
            Primitive::Box { min, max, .. } => {
                if (0..3).any(|k| !(min[k] < max[k])) {
                    return Err(format!("box needs min < max per axis, got {min:?} {max:?}"));
                }
            }
        }
        Ok(())
    }

    /// Smallest `t > 0` with `o + t·d` on the surface. Works from inside.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Primitive::Cylinder {
                center,
                radius,
                z0,
                z1,
                ..
            } => intersect_cylinder(o, d, center, radius, z0, z1),
            Primitive::Ellipsoid { center, radii, .. } => intersect_ellipsoid(o, d, center, radii),
            Primitive::Box { min, max, .. } => intersect_box(o, d, min, max),
        }
    }
}

fn nearest(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Roots of `a t² + 2 b t + c = 0`, ascending.
fn quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a == 0.0 {
        return None;
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // numerically stable pair
    let q = -(b + b.signum() * sq);
    let (t0, t1) = if q == 0.0 {
        (-b / a, -b / a)
    } else {
        (q / a, c / q)
    };
    Some((t0.min(t1), t0.max(t1)))
}

fn first_positive(roots: Option<(f64, f64)>, accept: impl Fn(f64) -> bool) -> Option<f64> {
    let (t0, t1) = roots?;
    [t0, t1].into_iter().find(|&t| t > T_EPS && accept(t))
}

fn intersect_cylinder(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    c: [f64; 2],
    r: f64,
    z0: f64,
    z1: f64,
) -> Option<f64> {
    let (px, py) = (o.x - c[0], o.y - c[1]);
    let a = d.x * d.x + d.y * d.y;
    let b = px * d.x + py * d.y;
    let cc = px * px + py * py - r * r;
    let side = first_positive(quadratic(a, b, cc), |t| {
        let z = o.z + t * d.z;
        (z0..=z1).contains(&z)
    });
    let cap = |zc: f64| -> Option<f64> {
        if d.z == 0.0 {
            return None;
        }
        let t = (zc - o.z) / d.z;
        if t <= T_EPS {
            return None;
        }
        let (x, y) = (px + t * d.x, py + t * d.y);
        (x * x + y * y <= r * r).then_some(t)
    };
    nearest(side, nearest(cap(z0), cap(z1)))
}

fn intersect_ellipsoid(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    c: [f64; 3],
    r: [f64; 3],
) -> Option<f64> {
    let p = [
        (o.x - c[0]) / r[0],
        (o.y - c[1]) / r[1],
        (o.z - c[2]) / r[2],
    ];
    let v = [d.x / r[0], d.y / r[1], d.z / r[2]];
    let a = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let b = p[0] * v[0] + p[1] * v[1] + p[2] * v[2];
    let cc = p[0] * p[0] + p[1] * p[1] + p[2] * p[2] - 1.0;
    first_positive(quadratic(a, b, cc), |_| true)
}

fn intersect_box(o: &Vector3<f64>, d: &Vector3<f64>, lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut a, mut b) = ((lo[k] - o[k]) * inv, (hi[k] - o[k]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t_near = t_near.max(a);
        t_far = t_far.min(b);
    }
    if t_near > t_far {
        return None;
    }
    if t_near > T_EPS {
        Some(t_near)
    } else if t_far > T_EPS {
        Some(t_far)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance_m: f64,
    pub reflectivity: u8,
    /// Index into [`Scene::primitives`], `None` for the ground.
    pub primitive: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub ground: Option<GroundPlane>,
    pub primitives: Vec<Primitive>,
}

impl Scene {
    /// Nearest surface along the ray, ignoring sensor range limits.
    pub fn first_surface(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if let Some(g) = &self.ground {
            if let Some(t) = g.intersect(origin, dir) {
                best = Some(Hit {
                    distance_m: t,
                    reflectivity: g.reflectivity,
                    primitive: None,
                });
            }
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.distance_m) {
                    best = Some(Hit {
                        distance_m: t,
                        reflectivity: p.reflectivity(),
                        primitive: Some(i),
                    });
                }
            }
        }
        best
    }

    /// Highest surface point reachable within `radius` of the `(0, 0)`
    /// column, counting the ground plane over that disc.
    pub fn max_surface_height(&self, radius: f64) -> f64 {
        let mut top = f64::NEG_INFINITY;
        if let Some(g) = &self.ground {
            top = g.g0 + radius * g.sx.hypot(g.sy);
        }
        self.primitives
            .iter()
            .map(Primitive::top)
            .fold(top, f64::max)
    }

    pub fn ground_height_at(&self, x: f64, y: f64) -> Option<f64> {
        self.ground.map(|g| g.height_at(x, y))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(g) = &self.ground {
            let _ = writeln!(out, "ground {} {} {} {}", g.g0, g.sx, g.sy, g.reflectivity);
        }
        for p in &self.primitives {
            let _ = match *p {
                Primitive::Cylinder {
                    center,
                    radius,
                    z0,
                    z1,
                    reflectivity,
                } => writeln!(
                    out,
                    "cylinder {} {} {} {} {} {}",
                    center[0], center[1], radius, z0, z1, reflectivity
                ),
                Primitive::Ellipsoid {
                    center,
                    radii,
                    reflectivity,
                } => writeln!(
                    out,
                    "ellipsoid {} {} {} {} {} {} {}",
                    center[0], center[1], center[2], radii[0], radii[1], radii[2], reflectivity
                ),
                Primitive::Box {
                    min,
                    max,
                    reflectivity,
                } => writeln!(
                    out,
                    "box {} {} {} {} {} {} {}",
                    min[0], min[1], min[2], max[0], max[1], max[2], reflectivity
                ),
            };
        }
        out
    }
}

/// First return along a unit ray: the nearest surface if it lies within
/// the sensor's `[0.5, 100]` m window, otherwise nothing.
pub fn raycast(scene: &Scene, origin: &Vector3<f64>, direction: &Vector3<f64>) -> Option<Hit> {
    debug_assert!((direction.norm() - 1.0).abs() < 1e-9);
    scene
        .first_surface(origin, direction)
        .filter(|h| (MIN_RANGE_M..=MAX_RANGE_M).contains(&h.distance_m))
}

pub fn parse_scene(text: &str) -> Result<Scene, SceneError> {
    let mut scene = Scene::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let kind = tokens.next().unwrap();
        let args: Vec<&str> = tokens.collect();
        let syntax = |msg: String| SceneError::Syntax { line: line_no, msg };
        let nums = |n: usize| -> Result<Vec<f64>, SceneError> {
            if args.len() != n {
                return Err(syntax(format!(
                    "'{kind}' takes {n} values, got {}",
                    args.len()
                )));
            }
            args.iter()
                .map(|a| {
                    a.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| syntax(format!("bad number '{a}'")))
                })
                .collect()
        };
        let refl = |v: f64| -> Result<u8, SceneError> {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(SceneError::Invalid {
                    line: line_no,
                    msg: format!("reflectivity must be an integer 0-255, got {v}"),
                })
            }
        };

        let prim = match kind {
            "ground" => {
                if scene.ground.is_some() {
                    return Err(SceneError::Invalid {
                        line: line_no,
                        msg: "duplicate ground".into(),
                    });
                }
                let v = nums(if args.len() == 4 { 4 } else { 3 })?;
                let reflectivity = match v.get(3) {
                    Some(&r) => refl(r)?,
                    None => DEFAULT_GROUND_REFLECTIVITY,
                };
                scene.ground = Some(GroundPlane {
                    g0: v[0],
                    sx: v[1],
                    sy: v[2],
                    reflectivity,
                });
                continue;
            }
            "cylinder" => {
                let v = nums(6)?;
                Primitive::Cylinder {
                    center: [v[0], v[1]],
                    radius: v[2],
                    z0: v[3],
                    z1: v[4],
                    reflectivity: refl(v[5])?,
                }
            }
            "ellipsoid" => {
                let v = nums(7)?;
                Primitive::Ellipsoid {
                    center: [v[0], v[1], v[2]],
                    radii: [v[3], v[4], v[5]],
                    reflectivity: refl(v[6])?,
                }
            }
            "box" => {
                let v = nums(7)?;
                Primitive::Box {
                    min: [v[0], v[1], v[2]],
                    max: [v[3], v[4], v[5]],
                    reflectivity: refl(v[6])?,
                }
            }
            other => return Err(syntax(format!("unknown directive '{other}'"))),
        };
        prim.validate()
            .map_err(|msg| SceneError::Invalid { line: line_no, msg })?;
        scene.primitives.push(prim);
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn parse_directives() {
        let s = parse_scene("# plot\nground 0 0 0\ncylinder 0 10 0.25 0 8 180\n").unwrap();
        assert_eq!(s.ground, Some(GroundPlane::flat(0.0)));
        assert_eq!(
            s.primitives,
            vec![Primitive::Cylinder {
                center: [0.0, 10.0],
                radius: 0.25,
                z0: 0.0,
                z1: 8.0,
                reflectivity: 180
            }]
        );
        let s = parse_scene("ground 1 0.1 -0.2 90\nellipsoid 0 0 5 1 2 3 10\nbox 0 0 0 1 1 1 5")
            .unwrap();
        assert_eq!(s.ground.unwrap().reflectivity, 90);
        assert_eq!(s.primitives.len(), 2);
        assert_eq!(parse_scene(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(
            parse_scene("ground 0 0 0\ncylinder 0 10 -1 0 8 180"),
            Err(SceneError::Invalid { line: 2, .. })
        ));
        assert!(matches!(
            parse_scene("\n\ncone 1 2 3"),
            Err(SceneError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            parse_scene("box 0 0 0 1 1"),
            Err(SceneError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_scene("box 0 0 0 1 1 x 3"),
            Err(SceneError::Syntax { line: 1, .. })
        ));
        assert!(parse_scene("box 0 0 0 0 1 1 3").is_err());
        assert!(parse_scene("cylinder 0 0 1 5 5 3").is_err());
        assert!(parse_scene("ellipsoid 0 0 0 1 0 1 3").is_err());
        assert!(parse_scene("box 0 0 0 1 1 1 256").is_err());
        assert!(parse_scene("ground 0 0 0\nground 1 0 0").is_err());
    }

    #[test]
    fn straight_down_hits_ground() {
        let s = parse_scene("ground 0 0 0").unwrap();
        let h = raycast(&s, &v(0.0, 0.0, 1.5), &v(0.0, 0.0, -1.0)).unwrap();
        assert!((h.distance_m - 1.5).abs() < 1e-12);
        assert_eq!(h.reflectivity, DEFAULT_GROUND_REFLECTIVITY);
        assert!(raycast(&s, &v(0.0, 0.0, 1.5), &v(0.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn beam_meets_trunk_surface() {
        let s = parse_scene("ground 0 0 0\ncylinder 0 10 0.25 0 8 180").unwrap();
        let h = raycast(&s, &v(0.0, 0.0, 1.5), &v(0.0, 1.0, 0.0)).unwrap();
        assert!((h.distance_m - 9.75).abs() < 1e-12);
        assert_eq!(h.reflectivity, 180);
        assert_eq!(h.primitive, Some(0));
    }

    #[test]
    fn range_window_applies_to_first_surface_only() {
        // a box 0.3 m away shadows everything behind it
        let s = parse_scene("box -1 0.3 -1 1 0.4 1 9\nbox -1 5 -1 1 6 1 7").unwrap();
        assert!(raycast(&s, &v(0.0, 0.0, 0.0), &v(0.0, 1.0, 0.0)).is_none());
        let far = parse_scene("box -1 150 -1 1 160 1 9").unwrap();
        assert!(raycast(&far, &v(0.0, 0.0, 0.0), &v(0.0, 1.0, 0.0)).is_none());
    }

    #[test]
    fn hits_from_inside() {
        let wall = parse_scene("cylinder 0 0 23 -5 40 100").unwrap();
        let d = v(0.6, 0.8, 0.0);
        let h = raycast(&wall, &v(0.0, 0.0, 1.5), &d).unwrap();
        assert!((h.distance_m - 23.0).abs() < 1e-9);

        let room = parse_scene("box -10 -10 -2 10 10 8 50").unwrap();
        let h = raycast(&room, &v(0.0, 0.0, 0.0), &v(0.0, 0.0, 1.0)).unwrap();
        assert!((h.distance_m - 8.0).abs() < 1e-12);

        let sphere = parse_scene("ellipsoid 0 0 0 4 4 4 1").unwrap();
        let h = raycast(&sphere, &v(0.0, 0.0, 0.0), &v(0.0, -1.0, 0.0)).unwrap();
        assert!((h.distance_m - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ellipsoid_and_cap() {
        let s = parse_scene("ellipsoid 0 10 2 1 2 3 5").unwrap();
        let h = raycast(&s, &v(0.0, 0.0, 2.0), &v(0.0, 1.0, 0.0)).unwrap();
        assert!((h.distance_m - 8.0).abs() < 1e-12);

        // looking up into the base of a raised cylinder hits the bottom cap
        let s = parse_scene("cylinder 0 0 1 3 4 5").unwrap();
        let h = raycast(&s, &v(0.0, 0.0, 0.0), &v(0.0, 0.0, 1.0)).unwrap();
        assert!((h.distance_m - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sloped_ground() {
        let s = parse_scene("ground 0 0 0.1").unwrap();
        // from (0,0,2) straight down to z = 0
        let h = raycast(&s, &v(0.0, 0.0, 2.0), &v(0.0, 0.0, -1.0)).unwrap();
        assert!((h.distance_m - 2.0).abs() < 1e-12);
        assert!((s.max_surface_height(10.0) - 1.0).abs() < 1e-12);
    }
}
