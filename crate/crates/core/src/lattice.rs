//! Lattice geometry and the ordered collection of disc-shaped neighborhoods.
//!
//! Offsets are stored as signed pairs. On a torus every offset is reduced to
//! its representative in `(-p/2, p/2]` along each axis, so a node appears
//! exactly once; on a plane window offsets are plain vectors of `Z^2`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A lattice offset `(row, col)`.
pub type Offset = (i32, i32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub p1: usize,
    pub p2: usize,
    pub toroidal: bool,
}

impl LatticeSpec {
    pub fn new(p1: usize, p2: usize, toroidal: bool) -> Result<Self> {
        if p1 < 2 || p2 < 2 {
            return Err(Error::InvalidLattice(format!(
                "dimensions must be at least 2x2, got {p1}x{p2}"
            )));
        }
        Ok(Self { p1, p2, toroidal })
    }

    pub fn torus(p1: usize, p2: usize) -> Result<Self> {
        Self::new(p1, p2, true)
    }

    pub fn plane(p1: usize, p2: usize) -> Result<Self> {
        Self::new(p1, p2, false)
    }

    /// Number of nodes `p1 * p2`.
    pub fn size(&self) -> usize {
        self.p1 * self.p2
    }

    pub fn is_square(&self) -> bool {
        self.p1 == self.p2
    }

    /// Whether `(i, j) -> (j, i)` is a symmetry of the lattice.
    ///
    /// On a plane window the model lives on `Z^2`, where transposition is
    /// always an automorphism; on a torus it only is when `p1 == p2`.
    pub fn transposable(&self) -> bool {
        !self.toroidal || self.is_square()
    }

    /// Reduce a signed coordinate pair modulo the lattice dimensions.
    pub fn wrap(&self, i: i64, j: i64) -> (usize, usize) {
        (
            i.rem_euclid(self.p1 as i64) as usize,
            j.rem_euclid(self.p2 as i64) as usize,
        )
    }

    /// Representative of `(i, j)` with coordinates in `(-p/2, p/2]`.
    pub fn representative(&self, i: i64, j: i64) -> Offset {
        let (a, b) = self.wrap(i, j);
        (rep_coord(a, self.p1), rep_coord(b, self.p2))
    }

    /// Squared norm of an offset: toroidal on a torus, euclidean on a plane.
    pub fn norm_sq(&self, o: Offset) -> i64 {
        if self.toroidal {
            let (a, b) = self.wrap(o.0 as i64, o.1 as i64);
            let da = a.min(self.p1 - a) as i64;
            let db = b.min(self.p2 - b) as i64;
            da * da + db * db
        } else {
            let (i, j) = (o.0 as i64, o.1 as i64);
            i * i + j * j
        }
    }

    /// Row-major linear index of a node.
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.p2 + j
    }
}

fn rep_coord(a: usize, p: usize) -> i32 {
    if 2 * a > p {
        a as i32 - p as i32
    } else {
        a as i32
    }
}

/// `sqrt([i ∧ (p1 - i)]^2 + [j ∧ (p2 - j)]^2)` with `i, j` reduced modulo the lattice.
pub fn toroidal_norm(offset: Offset, lattice: &LatticeSpec) -> f64 {
    let torus = LatticeSpec {
        toroidal: true,
        ..*lattice
    };
    (torus.norm_sq(offset) as f64).sqrt()
}

/// Canonical key of the central-symmetry pair `{o, -o}`.
pub(crate) fn aniso_key(lattice: &LatticeSpec, o: Offset) -> Offset {
    let a = canonical(lattice, o);
    let b = canonical(lattice, (-o.0, -o.1));
    a.max(b)
}

/// Canonical key of the orbit of `o` under reflections (and transposition
/// when the lattice allows it).
pub(crate) fn iso_key(lattice: &LatticeSpec, o: Offset) -> Offset {
    let (i, j) = canonical(lattice, o);
    let (a, b) = (i.abs(), j.abs());
    if lattice.transposable() && b > a {
        (b, a)
    } else {
        (a, b)
    }
}

fn canonical(lattice: &LatticeSpec, o: Offset) -> Offset {
    if lattice.toroidal {
        lattice.representative(o.0 as i64, o.1 as i64)
    } else {
        o
    }
}

/// Groups offsets into classes keyed by `key`, ordered by (norm, key).
fn group_classes(
    lattice: &LatticeSpec,
    offsets: &[Offset],
    key: fn(&LatticeSpec, Offset) -> Offset,
) -> Vec<Vec<Offset>> {
    let mut groups: BTreeMap<(i64, Offset), Vec<Offset>> = BTreeMap::new();
    for &o in offsets {
        groups
            .entry((lattice.norm_sq(o), key(lattice, o)))
            .or_default()
            .push(o);
    }
    groups.into_values().collect()
}

/// A disc-shaped neighborhood `m = {o != 0 : |o| <= r_m}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborhoodModel {
    /// Position in its collection (`m_k`).
    #[serde(skip)]
    pub index: usize,
    pub radius: f64,
    /// Squared radius; integral since radii are realized distances.
    #[serde(skip)]
    pub radius_sq: i64,
    pub offsets: Vec<Offset>,
    #[serde(skip)]
    pub aniso_classes: Vec<Vec<Offset>>,
    #[serde(skip)]
    pub iso_classes: Vec<Vec<Offset>>,
    pub d_m: usize,
    pub d_m_iso: usize,
    /// Maximum reach `(max |i|, max |j|)` over the offsets.
    #[serde(skip)]
    pub edge_extent: (usize, usize),
}

impl NeighborhoodModel {
    fn from_offsets(lattice: &LatticeSpec, index: usize, radius_sq: i64, offsets: Vec<Offset>) -> Self {
        let aniso_classes = group_classes(lattice, &offsets, aniso_key);
        let iso_classes = group_classes(lattice, &offsets, iso_key);
        let edge_extent = offsets.iter().fold((0, 0), |(a, b), &(i, j)| {
            (a.max(i.unsigned_abs() as usize), b.max(j.unsigned_abs() as usize))
        });
        Self {
            index,
            radius: (radius_sq as f64).sqrt(),
            radius_sq,
            d_m: aniso_classes.len(),
            d_m_iso: iso_classes.len(),
            offsets,
            aniso_classes,
            iso_classes,
            edge_extent,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn dim(&self, iso: bool) -> usize {
        if iso {
            self.d_m_iso
        } else {
            self.d_m
        }
    }

    pub fn classes(&self, iso: bool) -> &[Vec<Offset>] {
        if iso {
            &self.iso_classes
        } else {
            &self.aniso_classes
        }
    }

    pub fn contains(&self, o: Offset) -> bool {
        self.offsets.contains(&o)
    }
}

/// Candidate offsets of the lattice sorted by (norm, offset), along with the
/// largest squared radius a disc model may take.
fn candidate_offsets(lattice: &LatticeSpec) -> (Vec<Offset>, i64) {
    let mut out = Vec::new();
    let limit;
    if lattice.toroidal {
        for a in 0..lattice.p1 {
            for b in 0..lattice.p2 {
                if (a, b) != (0, 0) {
                    out.push((rep_coord(a, lattice.p1), rep_coord(b, lattice.p2)));
                }
            }
        }
        limit = i64::MAX;
    } else {
        // a disc fits the window iff its reach stays within half the window
        let h = ((lattice.p1 - 1) / 2).min((lattice.p2 - 1) / 2) as i32;
        let bound = (h as i64 + 1) * (h as i64 + 1);
        for i in -h..=h {
            for j in -h..=h {
                if (i, j) != (0, 0) && ((i * i + j * j) as i64) < bound {
                    out.push((i, j));
                }
            }
        }
        limit = bound - 1;
    }
    out.sort_by_key(|&o| (lattice.norm_sq(o), o));
    (out, limit)
}

/// The totally ordered family `m_0 ⊂ m_1 ⊂ ...` of disc neighborhoods.
#[derive(Debug, Clone)]
pub struct ModelCollection {
    pub lattice: LatticeSpec,
    pub iso: bool,
    models: Vec<NeighborhoodModel>,
}

impl ModelCollection {
    pub fn models(&self) -> &[NeighborhoodModel] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, k: usize) -> Option<&NeighborhoodModel> {
        self.models.get(k)
    }

    pub fn largest(&self) -> &NeighborhoodModel {
        self.models.last().expect("collection always holds m0")
    }

    pub fn dims(&self) -> Vec<usize> {
        self.models.iter().map(|m| m.dim(self.iso)).collect()
    }

    /// Keep only the first `k` models.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            lattice: self.lattice,
            iso: self.iso,
            models: self.models[..k.clamp(1, self.models.len())].to_vec(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.models).expect("models serialize")
    }
}

fn candidates_and_radii(lattice: &LatticeSpec) -> (Vec<Offset>, Vec<i64>) {
    let (candidates, limit) = candidate_offsets(lattice);
    let mut radii: Vec<i64> = candidates.iter().map(|&o| lattice.norm_sq(o)).collect();
    radii.dedup();
    radii.retain(|&r| r <= limit);
    (candidates, radii)
}

/// Dimension of the largest disc model the lattice admits.
pub fn full_model_dim(lattice: &LatticeSpec, iso: bool) -> usize {
    let (candidates, limit) = candidate_offsets(lattice);
    let offsets = candidates.into_iter().filter(|&o| lattice.norm_sq(o) <= limit).collect();
    NeighborhoodModel::from_offsets(lattice, 0, 0, offsets).dim(iso)
}

/// Builds `m_0` (empty) followed by every disc model whose dimension
/// (`d_m_iso` when `iso`, else `d_m`) is at most `max_dim`.
pub fn build_model_collection(lattice: &LatticeSpec, max_dim: usize, iso: bool) -> Result<ModelCollection> {
    let (candidates, radii) = candidates_and_radii(lattice);
    let full_dim = full_model_dim(lattice, iso);
    if max_dim > full_dim {
        return Err(Error::InvalidParameter(format!(
            "max_dim {max_dim} exceeds the dimension {full_dim} of the full model on a {}x{} lattice",
            lattice.p1, lattice.p2
        )));
    }

    let mut models = vec![NeighborhoodModel::from_offsets(lattice, 0, 0, Vec::new())];
    let mut end = 0;
    for (k, &r) in radii.iter().enumerate() {
        while end < candidates.len() && lattice.norm_sq(candidates[end]) <= r {
            end += 1;
        }
        let model = NeighborhoodModel::from_offsets(lattice, k + 1, r, candidates[..end].to_vec());
        if model.dim(iso) > max_dim {
            break;
        }
        models.push(model);
    }
    Ok(ModelCollection {
        lattice: *lattice,
        iso,
        models,
    })
}

/// Symmetry classes covering every nonzero node of the lattice.
pub(crate) fn full_lattice_classes(lattice: &LatticeSpec, iso: bool) -> Vec<Vec<Offset>> {
    let mut offsets = Vec::with_capacity(lattice.size());
    for a in 0..lattice.p1 {
        for b in 0..lattice.p2 {
            if (a, b) != (0, 0) {
                offsets.push(lattice.representative(a as i64, b as i64));
            }
        }
    }
    group_classes(lattice, &offsets, if iso { iso_key } else { aniso_key })
}

/// A subset `Λ' ⊆ Λ` of window nodes, sorted row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sublattice {
    pub nodes: Vec<(usize, usize)>,
}

impl Sublattice {
    pub fn full(lattice: &LatticeSpec) -> Self {
        let nodes = (0..lattice.p1)
            .flat_map(|i| (0..lattice.p2).map(move |j| (i, j)))
            .collect();
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, node: (usize, usize)) -> bool {
        self.nodes.binary_search(&node).is_ok()
    }

    pub fn is_subset_of(&self, other: &Sublattice) -> bool {
        self.nodes.iter().all(|&n| other.contains(n))
    }
}

/// Whether every translate `node + m` stays inside the window.
pub(crate) fn neighborhood_inside(lattice: &LatticeSpec, offsets: &[Offset], node: (usize, usize)) -> bool {
    offsets.iter().all(|&(di, dj)| {
        let i = node.0 as i64 + di as i64;
        let j = node.1 as i64 + dj as i64;
        i >= 0 && j >= 0 && i < lattice.p1 as i64 && j < lattice.p2 as i64
    })
}

/// `Λ_m = {x ∈ Λ : m + x ⊆ Λ}` on a non-toroidal window.
pub fn sublattice_for_model(m: &NeighborhoodModel, lattice: &LatticeSpec) -> Result<Sublattice> {
    if lattice.toroidal {
        return Err(Error::PlaneRequired("edge-effect sublattices"));
    }
    let nodes: Vec<_> = Sublattice::full(lattice)
        .nodes
        .into_iter()
        .filter(|&x| neighborhood_inside(lattice, &m.offsets, x))
        .collect();
    if nodes.is_empty() {
        return Err(Error::EmptySublattice(format!(
            "model of radius {:.3} does not fit a {}x{} window",
            m.radius, lattice.p1, lattice.p2
        )));
    }
    Ok(Sublattice { nodes })
}
