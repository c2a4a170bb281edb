//! Rule-based blending of two labelled 3D landmark sets: expression from `a`,
//! facial proportions from `b`.
//!
//! Proportions are measured as distances between region centroids projected
//! onto the vertical facial axis (eye midpoint → nose tip → mouth), plus the
//! Euclidean inter-pupil distance.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{svd, Matrix};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Region {
    LeftEye,
    RightEye,
    LeftEyebrow,
    RightEyebrow,
    NoseTip,
    Mouth,
    LeftPupil,
    RightPupil,
    Other(String),
}

impl Region {
    pub const REQUIRED: [Region; 8] = [
        Region::LeftEye,
        Region::RightEye,
        Region::LeftEyebrow,
        Region::RightEyebrow,
        Region::NoseTip,
        Region::Mouth,
        Region::LeftPupil,
        Region::RightPupil,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
            Region::LeftEyebrow => "left_eyebrow",
            Region::RightEyebrow => "right_eyebrow",
            Region::NoseTip => "nose_tip",
            Region::Mouth => "mouth",
            Region::LeftPupil => "left_pupil",
            Region::RightPupil => "right_pupil",
            Region::Other(s) => s,
        }
    }

    /// Regions that follow the eyes when the nose-to-eye distance is fixed.
    fn in_eye_group(&self) -> bool {
        matches!(
            self,
            Region::LeftEye
                | Region::RightEye
                | Region::LeftEyebrow
                | Region::RightEyebrow
                | Region::LeftPupil
                | Region::RightPupil
        )
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Format("empty region label".into()));
        }
        Ok(Region::REQUIRED
            .iter()
            .find(|r| r.as_str() == s)
            .cloned()
            .unwrap_or_else(|| Region::Other(s.to_string())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub region: Region,
    pub point: Vec3,
}

/// Validated landmark set: every required region present, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Landmark>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacialAxis {
    pub origin: Vec3,
    /// Unit vector pointing from the eyes toward the mouth.
    pub direction: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub nose_to_mouth: f64,
    pub nose_to_eye: f64,
    pub inter_pupil: f64,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn add_scaled(p: &mut Vec3, s: f64, d: Vec3) {
    for k in 0..3 {
        p[k] += s * d[k];
    }
}

fn unit(v: Vec3) -> Option<Vec3> {
    let n = dot3(v, v).sqrt();
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

fn mean(points: impl Iterator<Item = Vec3>) -> Vec3 {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for p in points {
        add_scaled(&mut acc, 1.0, p);
        n += 1.0;
    }
    [acc[0] / n, acc[1] / n, acc[2] / n]
}

/// Right singular vectors of the centred point cloud, strongest first.
fn principal_directions(points: &[Vec3]) -> Result<(Vec<f64>, [Vec3; 3])> {
    let c = mean(points.iter().copied());
    let m = Matrix::from_fn(points.len().max(3), 3, |i, k| points.get(i).map_or(0.0, |p| p[k] - c[k]));
    let dec = svd(&m)?;
    let row = |i: usize| [dec.vt[(i, 0)], dec.vt[(i, 1)], dec.vt[(i, 2)]];
    Ok((dec.s, [row(0), row(1), row(2)]))
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Result<Self> {
        if let Some(bad) = points.iter().find(|l| l.point.iter().any(|v| !v.is_finite())) {
            return Err(invalid(format!("non-finite coordinate in region `{}`", bad.region)));
        }
        if let Some(missing) = Region::REQUIRED.iter().find(|r| !points.iter().any(|l| &l.region == *r)) {
            return Err(invalid(format!("required region `{missing}` is missing")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Landmark] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self, region: &Region) -> Vec3 {
        mean(self.points.iter().filter(|l| &l.region == region).map(|l| l.point))
    }

    pub fn eye_midpoint(&self) -> Vec3 {
        let l = self.centroid(&Region::LeftEye);
        let r = self.centroid(&Region::RightEye);
        [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0, (l[2] + r[2]) / 2.0]
    }

    pub fn inter_pupil(&self) -> f64 {
        let d = sub(self.centroid(&Region::LeftPupil), self.centroid(&Region::RightPupil));
        dot3(d, d).sqrt()
    }

    /// Proportions measured on this set's own vertical axis.
    pub fn proportions(&self) -> Result<Proportions> {
        let axis = fit_vertical_axis(self)?;
        let nose = self.centroid(&Region::NoseTip);
        Ok(Proportions {
            nose_to_mouth: dot3(sub(self.centroid(&Region::Mouth), nose), axis.direction),
            nose_to_eye: dot3(sub(nose, self.eye_midpoint()), axis.direction),
            inter_pupil: self.inter_pupil(),
        })
    }

    fn translate(&mut self, select: impl Fn(&Region) -> bool, s: f64, d: Vec3) {
        for l in self.points.iter_mut().filter(|l| select(&l.region)) {
            add_scaled(&mut l.point, s, d);
        }
    }
}

/// Total-least-squares line through eye midpoint, nose tip and mouth centre.
pub fn fit_vertical_axis(lm: &LandmarkSet) -> Result<FacialAxis> {
    let eyes = lm.eye_midpoint();
    let mouth = lm.centroid(&Region::Mouth);
    let anchors = [eyes, lm.centroid(&Region::NoseTip), mouth];
    let (s, dirs) = principal_directions(&anchors)?;
    let scale = anchors.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    if s[0] <= 1e-12 * scale {
        return Err(Error::DegenerateGeometry("axis anchors coincide".into()));
    }
    let mut direction = unit(dirs[0]).ok_or_else(|| Error::DegenerateGeometry("zero axis".into()))?;
    if dot3(direction, sub(mouth, eyes)) < 0.0 {
        direction = direction.map(|v| -v);
    }
    Ok(FacialAxis {
        origin: mean(anchors.into_iter()),
        direction,
    })
}

/// In-plane unit vector orthogonal to `axis`, pointing from the right pupil
/// toward the left one.
fn horizontal_direction(lm: &LandmarkSet, axis: &FacialAxis) -> Result<Vec3> {
    let pts: Vec<Vec3> = lm.points.iter().map(|l| l.point).collect();
    let (_, dirs) = principal_directions(&pts)?;
    let normal = dirs[2];
    let mut h = unit(cross(normal, axis.direction))
        .ok_or_else(|| Error::DegenerateGeometry("face plane contains no horizontal direction".into()))?;
    let across = sub(lm.centroid(&Region::LeftPupil), lm.centroid(&Region::RightPupil));
    if dot3(across, h) < 0.0 {
        h = h.map(|v| -v);
    }
    Ok(h)
}

const MAX_AXIS_ROUNDS: usize = 200;

/// Starts from `a` and moves the mouth, the eye group and the eyes so that
/// the proportions of `b` hold. Every other landmark is copied from `a`.
pub fn blend_landmarks(a: &LandmarkSet, b: &LandmarkSet) -> Result<LandmarkSet> {
    let target = b.proportions()?;
    let horizontal = horizontal_direction(a, &fit_vertical_axis(a)?)?;
    let mut out = a.clone();

    // Moving anchors along the axis can tilt the refitted axis slightly, so
    // iterate until the distances hold on the output's own axis.
    let scale = target.nose_to_mouth.abs() + target.nose_to_eye.abs() + 1.0;
    let mut converged = false;
    for _ in 0..MAX_AXIS_ROUNDS {
        let axis = fit_vertical_axis(&out)?;
        let now = out.proportions()?;
        let dm = target.nose_to_mouth - now.nose_to_mouth;
        let de = target.nose_to_eye - now.nose_to_eye;
        if dm.abs() <= 1e-14 * scale && de.abs() <= 1e-14 * scale {
            converged = true;
            break;
        }
        out.translate(|r| *r == Region::Mouth, dm, axis.direction);
        out.translate(Region::in_eye_group, -de, axis.direction);
    }
    if !converged {
        return Err(Error::DegenerateGeometry(
            "vertical proportions did not settle; axis anchors are nearly degenerate".into(),
        ));
    }

    // |v + 2t·h| = D for the pupil offset v, smallest |t|.
    let v = sub(out.centroid(&Region::LeftPupil), out.centroid(&Region::RightPupil));
    let vh = dot3(v, horizontal);
    let disc = vh * vh - (dot3(v, v) - target.inter_pupil * target.inter_pupil);
    if disc < 0.0 {
        return Err(Error::DegenerateGeometry(
            "inter-pupil distance is unreachable along the horizontal direction".into(),
        ));
    }
    let root = disc.sqrt();
    let t = [(-vh + root) / 2.0, (-vh - root) / 2.0]
        .into_iter()
        .min_by(|x, y| x.abs().total_cmp(&y.abs()))
        .unwrap();
    if t != 0.0 {
        out.translate(|r| matches!(r, Region::LeftEye | Region::LeftPupil), t, horizontal);
        out.translate(|r| matches!(r, Region::RightEye | Region::RightPupil), -t, horizontal);
    }
    Ok(out)
}

/// Orthographic projection: drops depth.
pub fn project_2d(lm: &LandmarkSet) -> Vec<(Region, [f64; 2])> {
    lm.points
        .iter()
        .map(|l| (l.region.clone(), [l.point[0], l.point[1]]))
        .collect()
}

/// Re-attaches `z = 0` to planar landmarks.
pub fn lift_planar(points: &[(Region, [f64; 2])]) -> Result<LandmarkSet> {
    LandmarkSet::new(
        points
            .iter()
            .map(|(r, [u, v])| Landmark {
                region: r.clone(),
                point: [*u, *v, 0.0],
            })
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    region: String,
    u: f64,
    v: f64,
    z: f64,
}

/// Reads `region,u,v,z` records.
pub fn read_landmarks<R: Read>(reader: R) -> Result<LandmarkSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut points = Vec::new();
    for rec in rdr.deserialize() {
        let rec: Record = rec?;
        points.push(Landmark {
            region: rec.region.parse()?,
            point: [rec.u, rec.v, rec.z],
        });
    }
    LandmarkSet::new(points)
}

pub fn write_landmarks<W: Write>(lm: &LandmarkSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for l in &lm.points {
        w.serialize(Record {
            region: l.region.to_string(),
            u: l.point[0],
            v: l.point[1],
            z: l.point[2],
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Symmetric about x = 0; anchors collinear along -y.
    fn face() -> Vec<Landmark> {
        let mut p = Vec::new();
        let mut push = |r: Region, pts: &[Vec3]| {
            for &q in pts {
                p.push(Landmark { region: r.clone(), point: q });
            }
        };
        push(Region::LeftEye, &[[0.3, 1.0, 0.1], [0.5, 1.0, 0.1], [0.4, 1.05, 0.12]]);
        push(Region::RightEye, &[[-0.3, 1.0, 0.1], [-0.5, 1.0, 0.1], [-0.4, 1.05, 0.12]]);
        push(Region::LeftEyebrow, &[[0.3, 1.3, 0.15], [0.55, 1.32, 0.1]]);
        push(Region::RightEyebrow, &[[-0.3, 1.3, 0.15], [-0.55, 1.32, 0.1]]);
        push(Region::LeftPupil, &[[0.4, 1.02, 0.13]]);
        push(Region::RightPupil, &[[-0.4, 1.02, 0.13]]);
        push(Region::NoseTip, &[[0.0, 0.5, 0.1]]);
        push(Region::Mouth, &[[-0.2, 0.0, 0.1], [0.2, 0.0, 0.1], [0.0, 0.05, 0.1]]);
        push(Region::Other("chin".into()), &[[0.0, -0.4, 0.0]]);
        p
    }

    fn set(p: Vec<Landmark>) -> LandmarkSet {
        LandmarkSet::new(p).unwrap()
    }

    #[test]
    fn symmetric_face_axis_stays_in_the_mirror_plane() {
        let axis = fit_vertical_axis(&set(face())).unwrap();
        assert!(axis.direction[0].abs() < 1e-12);
        assert!(axis.direction[1] < 0.0);
        assert!((dot3(axis.direction, axis.direction) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_anchors_are_degenerate() {
        let p: Vec<Landmark> = Region::REQUIRED
            .iter()
            .map(|r| Landmark { region: r.clone(), point: [0.5, 0.5, 0.0] })
            .collect();
        assert!(matches!(fit_vertical_axis(&set(p)), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn missing_region_or_nan_is_rejected() {
        let mut p = face();
        p.retain(|l| l.region != Region::Mouth);
        assert!(LandmarkSet::new(p).is_err());
        let mut p = face();
        p[0].point[1] = f64::NAN;
        assert!(LandmarkSet::new(p).is_err());
    }

    #[test]
    fn identical_inputs_blend_to_themselves() {
        let a = set(face());
        assert_eq!(blend_landmarks(&a, &a).unwrap(), a);
    }

    #[test]
    fn mouth_moves_by_the_deficit() {
        // Flatten z so the anchors are exactly collinear on x = 0.
        let mut p = face();
        p.iter_mut().for_each(|l| l.point[2] = 0.0);
        let a = set(p.clone());
        let mut q = p;
        // Nose-to-mouth is 0.5 - 1/60 along -y; doubling moves the mouth down by that much.
        let before = a.proportions().unwrap().nose_to_mouth;
        q.iter_mut().filter(|l| l.region == Region::Mouth).for_each(|l| l.point[1] -= before);
        let b = set(q);
        assert!((b.proportions().unwrap().nose_to_mouth - 2.0 * before).abs() < 1e-12);
        let out = blend_landmarks(&a, &b).unwrap();
        for (o, x) in out.points().iter().zip(a.points()) {
            if o.region == Region::Mouth {
                assert!((o.point[1] - (x.point[1] - before)).abs() < 1e-12);
                assert_eq!(o.point[0], x.point[0]);
            }
        }
        assert!((out.proportions().unwrap().nose_to_mouth - 2.0 * before).abs() < 1e-9);
    }

    #[test]
    fn projection_drops_depth() {
        let p = vec![Landmark { region: Region::NoseTip, point: [0.2, 0.7, 0.3] }];
        let lm = LandmarkSet { points: p };
        assert_eq!(project_2d(&lm), vec![(Region::NoseTip, [0.2, 0.7])]);
        let mut flat = face();
        flat.iter_mut().for_each(|l| l.point[2] = 0.0);
        let flat = set(flat);
        assert_eq!(lift_planar(&project_2d(&flat)).unwrap(), flat);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let a = set(face());
        let mut buf = Vec::new();
        write_landmarks(&a, &mut buf).unwrap();
        assert!(buf.starts_with(b"region,u,v,z\n"));
        assert_eq!(read_landmarks(buf.as_slice()).unwrap(), a);
        assert!(read_landmarks("region,u,v,z\nmouth,1,2,x\n".as_bytes()).is_err());
    }
}
