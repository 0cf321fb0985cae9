//! Synthetic layered ball head models.
//!
//! A head is a voxelized ball whose cubes are split into six tetrahedra along
//! the main diagonal, with concentric compartments (scalp, skull, brain by
//! default). Electrodes are angular caps of boundary faces, field points are
//! uniform samples of one compartment and targets are radially oriented
//! dipoles at a chosen field point.

use std::collections::{BTreeMap, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 3];

/// Default electrode cap radius on the scalp (m).
pub const DEFAULT_CAP_RADIUS: f64 = 0.012;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("invalid layer specification: {0}")]
    InvalidLayers(String),
    #[error("cell size {cell_size} m cannot resolve layer {layer} of thickness {thickness} m")]
    UnresolvableLayer {
        layer: usize,
        thickness: f64,
        cell_size: f64,
    },
    #[error("compartment {0} has no tetrahedra")]
    EmptyCompartment(u32),
    #[error("at least two electrodes are required, got {0}")]
    TooFewElectrodes(usize),
    #[error("electrode {0} covers no boundary faces")]
    EmptyElectrode(u32),
    #[error("direction hint must be nonzero")]
    ZeroDirection,
    #[error("field point set is empty")]
    NoFieldPoints,
    #[error("tetrahedron {0} is degenerate")]
    DegenerateTet(usize),
    #[error("invalid mesh: {0}")]
    Invalid(String),
}

/// Tetrahedral volume mesh with per-tet compartment labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMesh {
    pub nodes: Vec<Point>,
    pub tets: Vec<[usize; 4]>,
    pub labels: Vec<u32>,
    pub conductivities: BTreeMap<u32, f64>,
}

/// A triangle on the mesh boundary, wound so that its normal points out of
/// the owning tetrahedron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    pub nodes: [usize; 3],
    pub tet: usize,
}

pub(crate) fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: &Point, b: &Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

fn signed_volume(p: [&Point; 4]) -> f64 {
    let a = sub(p[1], p[0]);
    let b = sub(p[2], p[0]);
    let c = sub(p[3], p[0]);
    dot(&a, &cross(&b, &c)) / 6.0
}

impl HeadMesh {
    pub fn tet_points(&self, t: usize) -> [&Point; 4] {
        let [a, b, c, d] = self.tets[t];
        [&self.nodes[a], &self.nodes[b], &self.nodes[c], &self.nodes[d]]
    }

    pub fn signed_volume(&self, t: usize) -> f64 {
        signed_volume(self.tet_points(t))
    }

    pub fn volume(&self, t: usize) -> f64 {
        self.signed_volume(t).abs()
    }

    pub fn centroid(&self, t: usize) -> Point {
        let p = self.tet_points(t);
        let mut c = [0.0; 3];
        for q in p {
            for k in 0..3 {
                c[k] += q[k] / 4.0;
            }
        }
        c
    }

    pub fn conductivity(&self, t: usize) -> f64 {
        self.conductivities[&self.labels[t]]
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.volume(t)).sum()
    }

    pub fn compartment_volume(&self, label: u32) -> f64 {
        (0..self.tets.len())
            .filter(|&t| self.labels[t] == label)
            .map(|t| self.volume(t))
            .sum()
    }

    /// Faces that belong to exactly one tetrahedron, sorted by node triple.
    pub fn boundary_faces(&self) -> Vec<BoundaryFace> {
        const LOCAL: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];
        let mut seen: HashMap<[usize; 3], (usize, [usize; 3], usize)> = HashMap::new();
        for (t, tet) in self.tets.iter().enumerate() {
            // LOCAL faces are outward for positively oriented tets
            let flip = self.signed_volume(t) < 0.0;
            for f in LOCAL {
                let mut wound = [tet[f[0]], tet[f[1]], tet[f[2]]];
                if flip {
                    wound.swap(1, 2);
                }
                let mut key = wound;
                key.sort_unstable();
                seen.entry(key)
                    .and_modify(|e| e.0 += 1)
                    .or_insert((1, wound, t));
            }
        }
        let mut faces: Vec<([usize; 3], BoundaryFace)> = seen
            .into_iter()
            .filter(|(_, (count, _, _))| *count == 1)
            .map(|(key, (_, nodes, tet))| (key, BoundaryFace { nodes, tet }))
            .collect();
        faces.sort_by_key(|(key, _)| *key);
        faces.into_iter().map(|(_, f)| f).collect()
    }

    pub fn face_area(&self, face: &BoundaryFace) -> f64 {
        let [a, b, c] = face.nodes.map(|i| &self.nodes[i]);
        0.5 * norm(&cross(&sub(b, a), &sub(c, a)))
    }

    pub fn face_centroid(&self, face: &BoundaryFace) -> Point {
        let mut c = [0.0; 3];
        for &i in &face.nodes {
            for k in 0..3 {
                c[k] += self.nodes[i][k] / 3.0;
            }
        }
        c
    }

    /// Flips negatively oriented tetrahedra so every signed volume is positive.
    pub fn orient(&mut self) {
        for t in 0..self.tets.len() {
            if self.signed_volume(t) < 0.0 {
                self.tets[t].swap(2, 3);
            }
        }
    }

    /// Checks the structural invariants: index bounds, positive orientation,
    /// conductivity coverage and a closed boundary surface.
    pub fn validate(&self) -> Result<(), MeshError> {
        if self.tets.len() != self.labels.len() {
            return Err(MeshError::Invalid(format!(
                "{} tets but {} labels",
                self.tets.len(),
                self.labels.len()
            )));
        }
        let n = self.nodes.len();
        for (t, tet) in self.tets.iter().enumerate() {
            if tet.iter().any(|&i| i >= n) {
                return Err(MeshError::Invalid(format!("tet {t} references a missing node")));
            }
            if self.signed_volume(t) <= 0.0 {
                return Err(MeshError::DegenerateTet(t));
            }
            match self.conductivities.get(&self.labels[t]) {
                Some(&s) if s > 0.0 && s.is_finite() => {}
                _ => {
                    return Err(MeshError::Invalid(format!(
                        "label {} of tet {t} has no positive conductivity",
                        self.labels[t]
                    )))
                }
            }
        }
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for f in self.boundary_faces() {
            for k in 0..3 {
                let (a, b) = (f.nodes[k], f.nodes[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some((e, c)) = edges.iter().find(|(_, &c)| c != 2) {
            return Err(MeshError::Invalid(format!(
                "boundary edge {e:?} is shared by {c} faces"
            )));
        }
        Ok(())
    }
}

/// Splits the unit cube at `base` into six tetrahedra around the diagonal
/// from corner (0,0,0) to (1,1,1). Neighbouring cubes produce matching face
/// diagonals, so the result is conforming.
fn kuhn_tets(base: [i64; 3]) -> [[[i64; 3]; 4]; 6] {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut out = [[[0i64; 3]; 4]; 6];
    for (t, perm) in PERMS.iter().enumerate() {
        let mut p = base;
        out[t][0] = p;
        for (s, &axis) in perm.iter().enumerate() {
            p[axis] += 1;
            out[t][s + 1] = p;
        }
    }
    out
}

/// Builds a conforming mesh from a set of lattice cubes. `label_of` maps a
/// tet centroid to its compartment.
fn mesh_from_voxels(
    voxels: &[[i64; 3]],
    origin: Point,
    h: f64,
    conductivities: BTreeMap<u32, f64>,
    label_of: impl Fn(&Point) -> u32,
) -> HeadMesh {
    let mut keys: Vec<[i64; 3]> = voxels
        .iter()
        .flat_map(|v| {
            (0..8).map(move |c| [v[0] + (c & 1), v[1] + ((c >> 1) & 1), v[2] + ((c >> 2) & 1)])
        })
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let index: HashMap<[i64; 3], usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let nodes: Vec<Point> = keys
        .iter()
        .map(|k| {
            [
                origin[0] + k[0] as f64 * h,
                origin[1] + k[1] as f64 * h,
                origin[2] + k[2] as f64 * h,
            ]
        })
        .collect();

    let mut tets = Vec::with_capacity(voxels.len() * 6);
    for v in voxels {
        for corners in kuhn_tets(*v) {
            tets.push(corners.map(|c| index[&c]));
        }
    }
    let mut mesh = HeadMesh {
        nodes,
        tets,
        labels: Vec::new(),
        conductivities,
    };
    mesh.orient();
    mesh.labels = (0..mesh.tets.len()).map(|t| label_of(&mesh.centroid(t))).collect();
    mesh
}

/// Voxelized concentric-ball head model. Layer 0 is the outermost shell;
/// labels are layer indices.
///
/// Cubes whose centre lies inside the outer ball are kept. A tet is labelled
/// with the innermost layer whose radius is at least its centroid radius
/// (layer 0 for centroids that poke out of the outer sphere).
pub fn generate_ball_mesh(
    layer_radii: &[f64],
    layer_conductivities: &[f64],
    cell_size: f64,
) -> Result<HeadMesh, MeshError> {
    if layer_radii.is_empty() {
        return Err(MeshError::InvalidLayers("no layers given".into()));
    }
    if layer_radii.len() != layer_conductivities.len() {
        return Err(MeshError::InvalidLayers(format!(
            "{} radii but {} conductivities",
            layer_radii.len(),
            layer_conductivities.len()
        )));
    }
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(MeshError::InvalidLayers(format!("cell size {cell_size} must be positive")));
    }
    if layer_radii.windows(2).any(|w| w[1] >= w[0]) || layer_radii.iter().any(|&r| r <= 0.0) {
        return Err(MeshError::InvalidLayers("radii must be positive and strictly descending".into()));
    }
    if layer_conductivities.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(MeshError::InvalidLayers("conductivities must be positive".into()));
    }
    for (layer, &r) in layer_radii.iter().enumerate() {
        let thickness = r - layer_radii.get(layer + 1).copied().unwrap_or(0.0);
        if cell_size > thickness * (1.0 + 1e-12) {
            return Err(MeshError::UnresolvableLayer {
                layer,
                thickness,
                cell_size,
            });
        }
    }

    let outer = layer_radii[0];
    let n = (outer / cell_size).ceil() as i64;
    let origin = [-(n as f64) * cell_size; 3];
    let mut voxels = Vec::new();
    for i in 0..2 * n {
        for j in 0..2 * n {
            for k in 0..2 * n {
                let c = [i, j, k].map(|q| origin[0] + (q as f64 + 0.5) * cell_size);
                if norm(&c) <= outer {
                    voxels.push([i, j, k]);
                }
            }
        }
    }
    let conductivities: BTreeMap<u32, f64> = layer_conductivities
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u32, s))
        .collect();
    let label_of = |c: &Point| {
        let r = norm(c);
        layer_radii
            .iter()
            .rposition(|&radius| radius >= r)
            .unwrap_or(0) as u32
    };
    let mesh = mesh_from_voxels(&voxels, origin, cell_size, conductivities, label_of);
    for layer in 0..layer_radii.len() as u32 {
        if !mesh.labels.contains(&layer) {
            return Err(MeshError::EmptyCompartment(layer));
        }
    }
    Ok(mesh)
}

/// Axis-aligned box `[0,lx]×[0,ly]×[0,lz]` with `cells` cubes per axis and
/// one compartment (label 0). Used for analytic checks.
pub fn generate_box_mesh(extent: [f64; 3], cells: [usize; 3], conductivity: f64) -> HeadMesh {
    let h = [0, 1, 2].map(|k| extent[k] / cells[k] as f64);
    let mut voxels = Vec::new();
    for i in 0..cells[0] as i64 {
        for j in 0..cells[1] as i64 {
            for k in 0..cells[2] as i64 {
                voxels.push([i, j, k]);
            }
        }
    }
    let mut mesh = mesh_from_voxels(
        &voxels,
        [0.0; 3],
        1.0,
        BTreeMap::from([(0, conductivity)]),
        |_| 0,
    );
    for p in &mut mesh.nodes {
        for k in 0..3 {
            p[k] *= h[k];
        }
    }
    mesh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub id: u32,
    /// Indices into [`HeadMesh::boundary_faces`].
    pub faces: Vec<usize>,
    /// Contact impedance (Ω).
    pub impedance: f64,
    /// Contact area (m²).
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout {
    pub electrodes: Vec<Electrode>,
}

impl ElectrodeLayout {
    /// Builds a layout from explicit boundary-face index sets. Ids are 1-based
    /// in the given order.
    pub fn from_face_sets(
        mesh: &HeadMesh,
        face_sets: Vec<Vec<usize>>,
        impedance: f64,
    ) -> Result<Self, MeshError> {
        let faces = mesh.boundary_faces();
        let electrodes = face_sets
            .into_iter()
            .enumerate()
            .map(|(i, set)| {
                let area = set.iter().map(|&f| mesh.face_area(&faces[f])).sum();
                Electrode {
                    id: i as u32 + 1,
                    faces: set,
                    impedance,
                    area,
                }
            })
            .collect();
        let layout = Self { electrodes };
        layout.validate(mesh)?;
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.electrodes.iter().map(|e| e.id).collect()
    }

    pub fn validate(&self, mesh: &HeadMesh) -> Result<(), MeshError> {
        if self.electrodes.len() < 2 {
            return Err(MeshError::TooFewElectrodes(self.electrodes.len()));
        }
        let nfaces = mesh.boundary_faces().len();
        let mut owner = vec![None; nfaces];
        for e in &self.electrodes {
            if e.faces.is_empty() {
                return Err(MeshError::EmptyElectrode(e.id));
            }
            if !(e.area > 0.0 && e.impedance > 0.0) {
                return Err(MeshError::Invalid(format!(
                    "electrode {} needs positive area and impedance",
                    e.id
                )));
            }
            for &f in &e.faces {
                if f >= nfaces {
                    return Err(MeshError::Invalid(format!(
                        "electrode {} references face {f}, mesh has {nfaces} boundary faces",
                        e.id
                    )));
                }
                if let Some(other) = owner[f].replace(e.id) {
                    return Err(MeshError::Invalid(format!(
                        "face {f} shared by electrodes {other} and {}",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Quasi-uniform unit directions; the first and last are the poles, so two
/// points are antipodal.
pub fn fibonacci_directions(count: usize) -> Vec<Point> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = if count == 1 {
                1.0
            } else {
                1.0 - 2.0 * i as f64 / (count - 1) as f64
            };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn angle_between(a: &Point, b: &Point) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}

/// Places `count` cap electrodes with the default cap radius.
pub fn place_electrodes(
    mesh: &HeadMesh,
    count: usize,
    impedance: f64,
) -> Result<ElectrodeLayout, MeshError> {
    place_electrodes_with_radius(mesh, count, impedance, DEFAULT_CAP_RADIUS)
}

/// Places `count` electrodes centred on Fibonacci-sphere directions. Each
/// electrode collects the boundary faces whose centroid lies within the
/// angular cap of `cap_radius` (arc length on the outer sphere). If caps
/// would overlap the radius is shrunk below half the smallest angular gap.
pub fn place_electrodes_with_radius(
    mesh: &HeadMesh,
    count: usize,
    impedance: f64,
    cap_radius: f64,
) -> Result<ElectrodeLayout, MeshError> {
    if count < 2 {
        return Err(MeshError::TooFewElectrodes(count));
    }
    if !(impedance > 0.0) {
        return Err(MeshError::Invalid("impedance must be positive".into()));
    }
    let faces = mesh.boundary_faces();
    if faces.is_empty() {
        return Err(MeshError::Invalid("mesh has no boundary".into()));
    }
    let centroids: Vec<Point> = faces.iter().map(|f| mesh.face_centroid(f)).collect();
    let outer = centroids.iter().map(norm).fold(0.0, f64::max);
    let dirs = fibonacci_directions(count);

    let mut min_gap = f64::INFINITY;
    for i in 0..count {
        for j in i + 1..count {
            min_gap = min_gap.min(angle_between(&dirs[i], &dirs[j]));
        }
    }
    let mut cap = cap_radius / outer;
    if 2.0 * cap >= min_gap {
        cap = 0.45 * min_gap;
    }

    let mut sets = vec![Vec::new(); count];
    for (f, c) in centroids.iter().enumerate() {
        // caps are disjoint, so at most one electrode matches
        if let Some(e) = dirs.iter().position(|d| angle_between(c, d) <= cap) {
            sets[e].push(f);
        }
    }
    if let Some(e) = sets.iter().position(|s| s.is_empty()) {
        return Err(MeshError::EmptyElectrode(e as u32 + 1));
    }
    ElectrodeLayout::from_face_sets(mesh, sets, impedance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPointSet {
    pub points: Vec<Point>,
    /// Owning tetrahedron of each point.
    pub tets: Vec<usize>,
    pub compartment: u32,
    pub seed: u64,
}

impl FieldPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Barycentric coordinates of `p` in tet `t`.
pub fn barycentric(mesh: &HeadMesh, t: usize, p: &Point) -> [f64; 4] {
    let q = mesh.tet_points(t);
    let v = mesh.signed_volume(t);
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let mut pts = q;
        pts[k] = p;
        *o = signed_volume(pts) / v;
    }
    out
}

/// Draws `n` points uniformly from compartment `compartment`: a tet is picked
/// with probability proportional to its volume, then a uniform point inside
/// it via normalized exponential (flat Dirichlet) weights.
pub fn sample_field_points(
    mesh: &HeadMesh,
    compartment: u32,
    n: usize,
    seed: u64,
) -> Result<FieldPointSet, MeshError> {
    let candidates: Vec<usize> = (0..mesh.tets.len())
        .filter(|&t| mesh.labels[t] == compartment)
        .collect();
    if candidates.is_empty() {
        return Err(MeshError::EmptyCompartment(compartment));
    }
    let weights: Vec<f64> = candidates.iter().map(|&t| mesh.volume(t)).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| MeshError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut tets = Vec::with_capacity(n);
    for _ in 0..n {
        let t = candidates[pick.sample(&mut rng)];
        let e: [f64; 4] = std::array::from_fn(|_| Exp1.sample(&mut rng));
        let s: f64 = e.iter().sum();
        let q = mesh.tet_points(t);
        let mut p = [0.0; 3];
        for (w, v) in e.iter().zip(q) {
            for k in 0..3 {
                p[k] += w / s * v[k];
            }
        }
        points.push(p);
        tets.push(t);
    }
    Ok(FieldPointSet {
        points,
        tets,
        compartment,
        seed,
    })
}

/// Dipolar stimulation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub position: Point,
    pub orientation: Point,
    /// Target current density magnitude (A/m²).
    pub d_target: f64,
    /// Index of the field point the target sits on.
    pub field_point: usize,
}

/// Picks the field point reaching furthest along `direction_hint` (lowest
/// index on ties) and orients the target along the outward radial direction,
/// which is the surface normal of the ball model.
pub fn place_target(
    field_points: &FieldPointSet,
    direction_hint: Point,
    d_target: f64,
) -> Result<TargetSpec, MeshError> {
    let len = norm(&direction_hint);
    if !(len > 0.0) {
        return Err(MeshError::ZeroDirection);
    }
    if field_points.is_empty() {
        return Err(MeshError::NoFieldPoints);
    }
    let hint = direction_hint.map(|v| v / len);
    let mut best = 0;
    let mut best_proj = f64::NEG_INFINITY;
    for (i, p) in field_points.points.iter().enumerate() {
        let proj = dot(p, &hint);
        if proj > best_proj {
            best = i;
            best_proj = proj;
        }
    }
    let position = field_points.points[best];
    let r = norm(&position);
    let orientation = if r > 0.0 { position.map(|v| v / r) } else { hint };
    Ok(TargetSpec {
        position,
        orientation,
        d_target,
        field_point: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn shell(r_out: f64, r_in: f64) -> f64 {
        4.0 * PI / 3.0 * (r_out.powi(3) - r_in.powi(3))
    }

    #[test]
    fn single_layer_has_one_label() {
        let m = generate_ball_mesh(&[0.09], &[0.33], 0.03).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
        m.validate().unwrap();
    }

    #[test]
    fn three_layer_volumes_track_shells() {
        let radii = [0.09, 0.08, 0.07];
        let m = generate_ball_mesh(&radii, &[0.33, 0.0042, 0.33], 0.005).unwrap();
        m.validate().unwrap();
        let expected = [shell(0.09, 0.08), shell(0.08, 0.07), shell(0.07, 0.0)];
        for (label, want) in expected.iter().enumerate() {
            let got = m.compartment_volume(label as u32);
            assert!(((got - want) / want).abs() < 0.10, "layer {label}: {got} vs {want}");
        }
    }

    #[test]
    fn coarse_cell_is_rejected() {
        let err = generate_ball_mesh(&[0.09, 0.085, 0.078], &[0.33, 0.0042, 0.33], 0.1).unwrap_err();
        assert!(matches!(err, MeshError::UnresolvableLayer { layer: 0, .. }));
    }

    #[test]
    fn layers_must_descend() {
        assert!(generate_ball_mesh(&[0.08, 0.09], &[1.0, 1.0], 0.005).is_err());
        assert!(generate_ball_mesh(&[0.09, 0.08], &[1.0], 0.005).is_err());
    }

    #[test]
    fn volume_equals_voxel_volume() {
        let h = 0.02;
        let m = generate_ball_mesh(&[0.09, 0.06], &[1.0, 2.0], h).unwrap();
        let voxels = m.tets.len() / 6;
        let exact = voxels as f64 * h * h * h;
        assert!((m.total_volume() - exact).abs() <= 1e-12 * exact);
    }

    #[test]
    fn labels_are_innermost_containing_layer() {
        let radii = [0.09, 0.06, 0.03];
        let m = generate_ball_mesh(&radii, &[1.0, 2.0, 3.0], 0.01).unwrap();
        for t in 0..m.tets.len() {
            let r = norm(&m.centroid(t));
            let want = radii.iter().rposition(|&x| x >= r).unwrap_or(0) as u32;
            assert_eq!(m.labels[t], want);
        }
    }

    #[test]
    fn box_mesh_is_valid() {
        let m = generate_box_mesh([0.1, 0.02, 0.03], [5, 2, 3], 1.0);
        m.validate().unwrap();
        assert!((m.total_volume() - 0.1 * 0.02 * 0.03).abs() < 1e-15);
        assert_eq!(m.boundary_faces().len(), 2 * 2 * (5 * 2 + 5 * 3 + 2 * 3));
    }

    #[test]
    fn two_electrodes_are_antipodal() {
        let m = generate_ball_mesh(&[0.09], &[0.33], 0.015).unwrap();
        let layout = place_electrodes_with_radius(&m, 2, 2000.0, 0.03).unwrap();
        let faces = m.boundary_faces();
        let mean_dir = |e: &Electrode| {
            let mut c = [0.0; 3];
            for &f in &e.faces {
                let p = m.face_centroid(&faces[f]);
                for k in 0..3 {
                    c[k] += p[k];
                }
            }
            c
        };
        let a = mean_dir(&layout.electrodes[0]);
        let b = mean_dir(&layout.electrodes[1]);
        assert!(angle_between(&a, &b) > PI - 1e-9);
        assert!(a[2] > 0.0 && b[2] < 0.0);
    }

    #[test]
    fn thirty_two_disjoint_electrodes() {
        let m = generate_ball_mesh(&[0.09, 0.085, 0.078], &[0.33, 0.0042, 0.33], 0.005).unwrap();
        let layout = place_electrodes(&m, 32, 2000.0).unwrap();
        assert_eq!(layout.len(), 32);
        assert!(layout.electrodes.iter().all(|e| e.impedance == 2000.0 && e.area > 0.0));
        layout.validate(&m).unwrap();
    }

    #[test]
    fn one_electrode_is_an_error() {
        let m = generate_ball_mesh(&[0.09], &[0.33], 0.03).unwrap();
        assert_eq!(place_electrodes(&m, 1, 2000.0), Err(MeshError::TooFewElectrodes(1)));
    }

    #[test]
    fn sampling_is_deterministic_and_inside() {
        let m = generate_ball_mesh(&[0.09, 0.07], &[0.33, 0.33], 0.01).unwrap();
        let a = sample_field_points(&m, 1, 1000, 7).unwrap();
        let b = sample_field_points(&m, 1, 1000, 7).unwrap();
        assert_eq!(a, b);
        for (p, &t) in a.points.iter().zip(&a.tets) {
            assert_eq!(m.labels[t], 1);
            let bc = barycentric(&m, t, p);
            assert!(bc.iter().all(|&w| (-1e-12..=1.0 + 1e-12).contains(&w)));
        }
        assert!(sample_field_points(&m, 1, 0, 7).unwrap().is_empty());
        assert_eq!(
            sample_field_points(&m, 5, 10, 7).unwrap_err(),
            MeshError::EmptyCompartment(5)
        );
    }

    #[test]
    fn target_at_pole() {
        let m = generate_ball_mesh(&[0.09, 0.07], &[0.33, 0.33], 0.01).unwrap();
        let fp = sample_field_points(&m, 1, 500, 3).unwrap();
        let up = place_target(&fp, [0.0, 0.0, 1.0], 0.2).unwrap();
        let top = fp.points.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(up.position[2], top);
        assert!((norm(&up.orientation) - 1.0).abs() < 1e-12);
        assert!(up.orientation[2] > 0.9);
        let down = place_target(&fp, [0.0, 0.0, -2.0], 0.2).unwrap();
        assert!(dot(&up.orientation, &down.orientation) < -0.8);
        assert_eq!(place_target(&fp, [0.0; 3], 0.2).unwrap_err(), MeshError::ZeroDirection);
    }
}
