//! Shared domain types: frames, per-point fields and class taxonomies.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{check_len, Error, Result};

pub type ClassId = usize;

/// A per-point label; `None` is the IGNORE sentinel and never counts as a class.
pub type Label = Option<ClassId>;

pub const IGNORE: Label = None;

pub type Point = [f64; 3];

/// Canonical taxonomy used by the stream generator and the bundled dataset maps.
pub const CANONICAL_CLASSES: [&str; 7] = [
    "vehicle",
    "pedestrian",
    "road",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

pub const VEHICLE: ClassId = 0;
pub const PEDESTRIAN: ClassId = 1;
pub const ROAD: ClassId = 2;
pub const SIDEWALK: ClassId = 3;
pub const TERRAIN: ClassId = 4;
pub const MANMADE: ClassId = 5;
pub const VEGETATION: ClassId = 6;

const ROW_SUM_TOL: f64 = 1e-6;
const ORTHO_TOL: f64 = 1e-6;

/// Rigid sensor-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    /// Wraps a matrix without validation; see [`Pose::validate`].
    pub fn from_matrix_unchecked(m: Matrix4<f64>) -> Self {
        Pose(m)
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        let pose = Pose(m);
        pose.validate()?;
        Ok(pose)
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let m = Matrix4::new(
            c, -s, 0.0, t[0],
            s, c, 0.0, t[1],
            0.0, 0.0, 1.0, t[2],
            0.0, 0.0, 0.0, 1.0,
        );
        Pose(m)
    }

    /// Upper 3x4 block in row-major order, as stored in `poses.txt`.
    pub fn from_rows_3x4(v: &[f64; 12]) -> Self {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = v[r * 4 + c];
            }
        }
        Pose(m)
    }

    pub fn to_rows_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Inverse of a rigid transform: `[Rᵀ | −Rᵀt]`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose(m)
    }

    /// `self · other`
    pub fn compose(&self, other: &Pose) -> Self {
        Pose(self.0 * other.0)
    }

    pub fn apply(&self, p: &Point) -> Point {
        let m = &self.0;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.0;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose(format!("last row is {last:?}")));
        }
        let r = self.rotation();
        let dev = (r.transpose() * r - Matrix3::identity()).amax();
        if dev >= ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (deviation {dev:e})"
            )));
        }
        let det = r.determinant();
        if det <= 0.0 {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(())
    }
}

/// One time step of a point-cloud stream, in sensor coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: u32,
    pub points: Vec<Point>,
    pub pose: Pose,
    pub gt_labels: Option<LabelField>,
}

impl Frame {
    pub fn new(frame_id: u32, points: Vec<Point>, pose: Pose) -> Self {
        Frame {
            frame_id,
            points,
            pose,
            gt_labels: None,
        }
    }

    pub fn with_labels(mut self, labels: LabelField) -> Self {
        self.gt_labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn validate_frame(frame: &Frame) -> Result<()> {
    if frame.points.is_empty() {
        return Err(Error::EmptyFrame);
    }
    frame.pose.validate()?;
    if let Some(index) = frame
        .points
        .iter()
        .position(|p| p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteCoordinate { index });
    }
    if let Some(gt) = &frame.gt_labels {
        check_len(gt.len(), frame.points.len())?;
    }
    Ok(())
}

/// Row-major N×C matrix of class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityField {
    classes: usize,
    values: Vec<f64>,
}

impl ProbabilityField {
    pub fn new(values: Vec<f64>, classes: usize) -> Result<Self> {
        let field = Self::from_raw(values, classes)?;
        for (i, row) in field.rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(field)
    }

    /// Checks the shape only. Producers inside the crate guarantee the simplex.
    pub(crate) fn from_raw(values: Vec<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || !values.len().is_multiple_of(classes) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not split into rows of {classes}",
                values.len()
            )));
        }
        Ok(ProbabilityField { classes, values })
    }

    pub fn uniform(n: usize, classes: usize) -> Self {
        ProbabilityField {
            classes,
            values: vec![1.0 / classes as f64; n * classes],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.classes)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Per-row argmax, ties to the smallest class id.
    pub fn argmax(&self) -> LabelField {
        LabelField(self.rows().map(|r| Some(argmax(r))).collect())
    }
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelField(pub Vec<Label>);

impl LabelField {
    pub fn from_classes(ids: impl IntoIterator<Item = ClassId>) -> Self {
        LabelField(ids.into_iter().map(Some).collect())
    }

    pub fn ignored(n: usize) -> Self {
        LabelField(vec![IGNORE; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Label {
        self.0[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = Label> + '_ {
        self.0.iter().copied()
    }

    pub fn supervised_count(&self) -> usize {
        self.0.iter().filter(|l| l.is_some()).count()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.0.iter().flatten().find(|&&c| c >= classes) {
            Some(&c) => Err(Error::ShapeMismatch(format!(
                "label {c} outside 0..{classes}"
            ))),
            None => Ok(()),
        }
    }

    /// Keeps labels where `mask` is set; everything else becomes IGNORE.
    pub fn masked(&self, mask: &SelectionMask) -> Result<LabelField> {
        check_len(self.len(), mask.len())?;
        Ok(LabelField(
            self.0
                .iter()
                .zip(&mask.0)
                .map(|(&l, &keep)| if keep { l } else { IGNORE })
                .collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceField(pub Vec<f64>);

impl ConfidenceField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!(
                "confidence {v} outside [0,1]"
            )));
        }
        Ok(ConfidenceField(values))
    }

    pub fn ones(n: usize) -> Self {
        ConfidenceField(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask(pub Vec<bool>);

impl SelectionMask {
    pub fn all(n: usize) -> Self {
        SelectionMask(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Mapping from a dataset's raw label ids to a dense canonical taxonomy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    canonical_names: Vec<String>,
    raw_to_canonical: BTreeMap<u32, Label>,
}

impl ClassMap {
    pub fn new(canonical_names: Vec<String>, table: Vec<(u32, Label)>) -> Result<Self> {
        let classes = canonical_names.len();
        if classes == 0 {
            return Err(Error::ClassMap("no canonical classes".into()));
        }
        let mut raw_to_canonical = BTreeMap::new();
        let mut used = vec![false; classes];
        for (raw, label) in table {
            if let Some(c) = label {
                if c >= classes {
                    return Err(Error::ClassMap(format!(
                        "raw id {raw} maps to {c}, outside 0..{classes}"
                    )));
                }
                used[c] = true;
            }
            if raw_to_canonical.insert(raw, label).is_some() {
                return Err(Error::ClassMap(format!("raw id {raw} mapped twice")));
            }
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(Error::ClassMap(format!(
                "canonical id {c} is never used (ids must be dense)"
            )));
        }
        Ok(ClassMap {
            canonical_names,
            raw_to_canonical,
        })
    }

    fn canonical(table: &[(u32, Label)]) -> Self {
        let names = CANONICAL_CLASSES.iter().map(|s| s.to_string()).collect();
        ClassMap::new(names, table.to_vec()).expect("bundled class map is valid")
    }

    pub fn identity(classes: usize) -> Self {
        let names = (0..classes).map(|c| format!("class{c}")).collect();
        let table = (0..classes).map(|c| (c as u32, Some(c))).collect();
        ClassMap::new(names, table).expect("identity map is valid")
    }

    /// Identity over the seven canonical classes. Used by the stream generator.
    pub fn canonical_identity() -> Self {
        let table: Vec<_> = (0..CANONICAL_CLASSES.len())
            .map(|c| (c as u32, Some(c)))
            .collect();
        Self::canonical(&table)
    }

    /// SemanticKITTI learning ids (0..=19).
    pub fn semantic_kitti() -> Self {
        Self::canonical(&[
            (0, IGNORE),
            (1, Some(VEHICLE)),
            (2, IGNORE),
            (3, IGNORE),
            (4, IGNORE),
            (5, IGNORE),
            (6, Some(PEDESTRIAN)),
            (7, IGNORE),
            (8, IGNORE),
            (9, Some(ROAD)),
            (10, Some(ROAD)),
            (11, Some(SIDEWALK)),
            (12, IGNORE),
            (13, Some(MANMADE)),
            (14, Some(MANMADE)),
            (15, Some(VEGETATION)),
            (16, Some(VEGETATION)),
            (17, Some(TERRAIN)),
            (18, Some(MANMADE)),
            (19, Some(MANMADE)),
        ])
    }

    pub fn nuscenes() -> Self {
        let mut table: Vec<(u32, Label)> = (0..=16).map(|r| (r, IGNORE)).collect();
        for (raw, c) in [
            (4, VEHICLE),
            (7, PEDESTRIAN),
            (11, ROAD),
            (13, SIDEWALK),
            (14, TERRAIN),
            (15, MANMADE),
            (16, VEGETATION),
        ] {
            table[raw as usize].1 = Some(c);
        }
        Self::canonical(&table)
    }

    pub fn synlidar() -> Self {
        let mut table: Vec<(u32, Label)> = (0..=32).map(|r| (r, IGNORE)).collect();
        for (raw, c) in [
            (1, VEHICLE),
            (2, VEHICLE),
            (8, ROAD),
            (9, SIDEWALK),
            (10, ROAD),
            (12, PEDESTRIAN),
            (13, PEDESTRIAN),
            (14, PEDESTRIAN),
            (15, PEDESTRIAN),
            (18, MANMADE),
            (20, VEGETATION),
            (21, VEGETATION),
            (22, TERRAIN),
            (23, MANMADE),
            (24, MANMADE),
            (26, MANMADE),
        ] {
            table[raw as usize].1 = Some(c);
        }
        Self::canonical(&table)
    }

    /// Parses the two-column `raw_id canonical_id` table; `-1` is IGNORE and
    /// lines starting with `#` are comments.
    pub fn parse(text: &str, canonical_names: Vec<String>) -> Result<Self> {
        let mut table = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::ClassMap(format!("line {}: '{line}'", lineno + 1));
            let mut cols = line.split_whitespace();
            let raw: u32 = cols.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let canon: i64 = cols.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if cols.next().is_some() {
                return Err(bad());
            }
            let label = match canon {
                -1 => IGNORE,
                c if c >= 0 => Some(c as usize),
                _ => return Err(bad()),
            };
            table.push((raw, label));
        }
        ClassMap::new(canonical_names, table)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# raw_id canonical_id\n");
        for (raw, label) in &self.raw_to_canonical {
            let c = label.map_or(-1, |c| c as i64);
            let _ = writeln!(out, "{raw} {c}");
        }
        out
    }

    pub fn classes(&self) -> usize {
        self.canonical_names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.canonical_names
    }

    pub fn lookup(&self, raw: u32) -> Result<Label> {
        self.raw_to_canonical
            .get(&raw)
            .copied()
            .ok_or(Error::UnknownRawId(raw))
    }

    /// Inverse lookup used when writing canonical labels as raw ids: the
    /// smallest raw id mapping to `class`.
    pub fn raw_id_of(&self, class: ClassId) -> Option<u32> {
        self.raw_to_canonical
            .iter()
            .find(|(_, &l)| l == Some(class))
            .map(|(&raw, _)| raw)
    }

    /// Raw ids in ascending order.
    pub fn raw_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.raw_to_canonical.keys().copied()
    }
}

pub fn remap_labels(raw: &[u32], map: &ClassMap) -> Result<LabelField> {
    raw.iter()
        .map(|&r| map.lookup(r))
        .collect::<Result<Vec<_>>>()
        .map(LabelField)
}
