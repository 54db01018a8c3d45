//! Real/reciprocal lattices, Monkhorst-Pack meshes and crystal-momentum arithmetic.
//!
//! k-points carry exact rational fractional coordinates so that folding,
//! momentum conservation and mesh lookup never depend on a tolerance.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Frac = Ratio<i64>;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitCell {
    /// Columns are the lattice vectors a_1, a_2, a_3.
    lattice: Matrix3<f64>,
    volume: f64,
}

impl UnitCell {
    /// `vectors[i]` is the i-th lattice vector.
    pub fn new(vectors: [[f64; 3]; 3]) -> Result<Self> {
        let lattice = Matrix3::from_columns(&[
            Vector3::from(vectors[0]),
            Vector3::from(vectors[1]),
            Vector3::from(vectors[2]),
        ]);
        let volume = lattice.determinant();
        if !(volume > 0.0) || !volume.is_finite() {
            return Err(Error::Invalid(format!(
                "lattice vectors must be right-handed with positive volume, got {volume}"
            )));
        }
        Ok(UnitCell { lattice, volume })
    }

    pub fn cubic(length: f64) -> Result<Self> {
        Self::new([[length, 0.0, 0.0], [0.0, length, 0.0], [0.0, 0.0, length]])
    }

    pub fn lattice_vectors(&self) -> &Matrix3<f64> {
        &self.lattice
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn reciprocal(&self) -> ReciprocalCell {
        let inv = self.lattice.try_inverse().expect("positive volume implies invertible");
        let vectors = inv.transpose() * (2.0 * PI);
        ReciprocalCell {
            vectors,
            volume: (2.0 * PI).powi(3) / self.volume,
        }
    }

    /// Cartesian position of fractional coordinates `s`.
    pub fn to_cartesian(&self, s: [f64; 3]) -> [f64; 3] {
        let v = self.lattice * Vector3::from(s);
        [v.x, v.y, v.z]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReciprocalCell {
    /// Columns are b_1, b_2, b_3 with b_i · a_j = 2π δ_ij.
    vectors: Matrix3<f64>,
    volume: f64,
}

impl ReciprocalCell {
    pub fn reciprocal_vectors(&self) -> &Matrix3<f64> {
        &self.vectors
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn cartesian(&self, frac: [f64; 3]) -> [f64; 3] {
        let v = self.vectors * Vector3::from(frac);
        [v.x, v.y, v.z]
    }

    pub fn g_cartesian(&self, g: [i64; 3]) -> [f64; 3] {
        self.cartesian([g[0] as f64, g[1] as f64, g[2] as f64])
    }

    pub fn k_cartesian(&self, k: &KPoint) -> [f64; 3] {
        self.cartesian(k.to_f64())
    }

    /// Folds `k` into [0,1)³; returns the folded point and the integer
    /// reciprocal-lattice vector G with k = folded + G.
    pub fn fold(&self, k: &KPoint) -> (KPoint, [i64; 3]) {
        k.fold()
    }
}

/// A crystal momentum in fractional (reciprocal-lattice) coordinates.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KPoint {
    pub frac: [Frac; 3],
}

impl fmt::Debug for KPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k({}, {}, {})", self.frac[0], self.frac[1], self.frac[2])
    }
}

impl fmt::Display for KPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.frac[0], self.frac[1], self.frac[2])
    }
}

impl KPoint {
    pub fn gamma() -> Self {
        KPoint { frac: [Frac::zero(); 3] }
    }

    pub fn new(frac: [Frac; 3]) -> Self {
        KPoint { frac }
    }

    /// Fractional point (n_x/d, n_y/d, n_z/d).
    pub fn from_ints(num: [i64; 3], den: i64) -> Self {
        KPoint {
            frac: [
                Frac::new(num[0], den),
                Frac::new(num[1], den),
                Frac::new(num[2], den),
            ],
        }
    }

    pub fn to_f64(&self) -> [f64; 3] {
        let c = |r: &Frac| *r.numer() as f64 / *r.denom() as f64;
        [c(&self.frac[0]), c(&self.frac[1]), c(&self.frac[2])]
    }

    pub fn add(&self, o: &KPoint) -> KPoint {
        KPoint {
            frac: [
                self.frac[0] + o.frac[0],
                self.frac[1] + o.frac[1],
                self.frac[2] + o.frac[2],
            ],
        }
    }

    pub fn sub(&self, o: &KPoint) -> KPoint {
        KPoint {
            frac: [
                self.frac[0] - o.frac[0],
                self.frac[1] - o.frac[1],
                self.frac[2] - o.frac[2],
            ],
        }
    }

    pub fn neg(&self) -> KPoint {
        KPoint {
            frac: [-self.frac[0], -self.frac[1], -self.frac[2]],
        }
    }

    pub fn shift(&self, g: [i64; 3]) -> KPoint {
        KPoint {
            frac: [
                self.frac[0] + g[0],
                self.frac[1] + g[1],
                self.frac[2] + g[2],
            ],
        }
    }

    pub fn fold(&self) -> (KPoint, [i64; 3]) {
        let mut g = [0i64; 3];
        let mut out = *self;
        for d in 0..3 {
            let fl = self.frac[d].floor().to_integer();
            g[d] = fl;
            out.frac[d] = self.frac[d] - fl;
        }
        (out, g)
    }

    pub fn folded(&self) -> KPoint {
        self.fold().0
    }

    pub fn is_folded(&self) -> bool {
        self.frac
            .iter()
            .all(|r| *r >= Frac::zero() && *r < Frac::from_integer(1))
    }

    /// Integer vector if the point is a reciprocal-lattice vector.
    pub fn as_lattice_vector(&self) -> Option<[i64; 3]> {
        if self.frac.iter().all(|r| r.is_integer()) {
            Some([
                self.frac[0].to_integer(),
                self.frac[1].to_integer(),
                self.frac[2].to_integer(),
            ])
        } else {
            None
        }
    }
}

/// fold(k_i + k_j - k_a).
pub fn conserve_momentum(ki: &KPoint, kj: &KPoint, ka: &KPoint) -> KPoint {
    ki.add(kj).sub(ka).folded()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshScheme {
    GammaCentered,
    /// Points (j + ½)/m per axis.
    MpOffset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonkhorstPackMesh {
    m: usize,
    scheme: MeshScheme,
    points: Vec<KPoint>,
    recip: ReciprocalCell,
}

impl MonkhorstPackMesh {
    pub fn new(cell: &UnitCell, m: usize, scheme: MeshScheme) -> Result<Self> {
        if m == 0 {
            return Err(Error::Invalid("mesh size m must be at least 1".into()));
        }
        let mi = m as i64;
        let mut points = Vec::with_capacity(m * m * m);
        for j0 in 0..mi {
            for j1 in 0..mi {
                for j2 in 0..mi {
                    points.push(match scheme {
                        MeshScheme::GammaCentered => KPoint::from_ints([j0, j1, j2], mi),
                        MeshScheme::MpOffset => {
                            KPoint::from_ints([2 * j0 + 1, 2 * j1 + 1, 2 * j2 + 1], 2 * mi)
                        }
                    });
                }
            }
        }
        Ok(MonkhorstPackMesh {
            m,
            scheme,
            points,
            recip: cell.reciprocal(),
        })
    }

    pub fn per_dim(&self) -> usize {
        self.m
    }

    pub fn scheme(&self) -> MeshScheme {
        self.scheme
    }

    pub fn n_k(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[KPoint] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> &KPoint {
        &self.points[idx]
    }

    pub fn reciprocal(&self) -> &ReciprocalCell {
        &self.recip
    }

    pub fn cartesian(&self, idx: usize) -> [f64; 3] {
        self.recip.k_cartesian(&self.points[idx])
    }

    fn axis_indices(&self, idx: usize) -> [usize; 3] {
        let m = self.m;
        [idx / (m * m), (idx / m) % m, idx % m]
    }

    fn from_axis(&self, j: [usize; 3]) -> usize {
        (j[0] * self.m + j[1]) * self.m + j[2]
    }

    /// Mesh index of `k` (any representative modulo the reciprocal lattice).
    pub fn index_of(&self, k: &KPoint) -> Option<usize> {
        let mi = self.m as i64;
        let (f, _) = k.fold();
        let mut j = [0usize; 3];
        for d in 0..3 {
            let scaled = match self.scheme {
                MeshScheme::GammaCentered => f.frac[d] * mi,
                MeshScheme::MpOffset => f.frac[d] * mi - Frac::new(1, 2),
            };
            if !scaled.is_integer() {
                return None;
            }
            j[d] = scaled.to_integer() as usize;
        }
        Some(self.from_axis(j))
    }

    /// Index of fold(k_i + k_j − k_a) for mesh indices (valid for both schemes).
    pub fn combine(&self, i: usize, j: usize, a: usize) -> usize {
        let (ji, jj, ja) = (self.axis_indices(i), self.axis_indices(j), self.axis_indices(a));
        let m = self.m;
        let mut out = [0usize; 3];
        for d in 0..3 {
            out[d] = (ji[d] + jj[d] + m - ja[d]) % m;
        }
        self.from_axis(out)
    }

    /// Index in the induced Γ-centered mesh of fold(k_a − k_i).
    pub fn difference(&self, a: usize, i: usize) -> usize {
        let (ja, ji) = (self.axis_indices(a), self.axis_indices(i));
        let m = self.m;
        let mut out = [0usize; 3];
        for d in 0..3 {
            out[d] = (ja[d] + m - ji[d]) % m;
        }
        self.from_axis(out)
    }

    /// Mesh index of point `i` shifted by Γ-centered mesh point `q`.
    pub fn shift_by(&self, i: usize, q: usize) -> usize {
        let (ji, jq) = (self.axis_indices(i), self.axis_indices(q));
        let m = self.m;
        let mut out = [0usize; 3];
        for d in 0..3 {
            out[d] = (ji[d] + jq[d]) % m;
        }
        self.from_axis(out)
    }
}

/// The Γ-centered mesh {fold(k − k′)} of the same size.
pub fn induced_q_mesh(mesh: &MonkhorstPackMesh, cell: &UnitCell) -> MonkhorstPackMesh {
    MonkhorstPackMesh::new(cell, mesh.per_dim(), MeshScheme::GammaCentered)
        .expect("mesh size already validated")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> UnitCell {
        UnitCell::cubic(1.0).unwrap()
    }

    #[test]
    fn reciprocal_duality() {
        let cell = UnitCell::new([[1.0, 0.2, 0.0], [0.0, 1.3, 0.1], [0.3, 0.0, 0.9]]).unwrap();
        let r = cell.reciprocal();
        let prod = r.reciprocal_vectors().transpose() * cell.lattice_vectors();
        let id = Matrix3::<f64>::identity() * (2.0 * PI);
        assert!((prod - id).abs().max() < 1e-12 * 2.0 * PI);
        let rel = (r.volume() * cell.volume() - (2.0 * PI).powi(3)).abs() / (2.0 * PI).powi(3);
        assert!(rel < 1e-12);
        assert!((r.vectors.determinant() - r.volume()).abs() < 1e-9);
    }

    #[test]
    fn rejects_degenerate_cell() {
        assert!(UnitCell::new([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(UnitCell::new([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn gamma_only_mesh() {
        let mesh = MonkhorstPackMesh::new(&unit(), 1, MeshScheme::GammaCentered).unwrap();
        assert_eq!(mesh.points(), &[KPoint::gamma()]);
        assert!(MonkhorstPackMesh::new(&unit(), 0, MeshScheme::GammaCentered).is_err());
    }

    #[test]
    fn m2_meshes() {
        let mesh = MonkhorstPackMesh::new(&unit(), 2, MeshScheme::GammaCentered).unwrap();
        assert_eq!(mesh.n_k(), 8);
        for idx in 0..8 {
            let c = mesh.cartesian(idx);
            for x in c {
                assert!(x.abs() < 1e-15 || (x - PI).abs() < 1e-15);
            }
        }
        assert_eq!(*mesh.point(1), KPoint::from_ints([0, 0, 1], 2));

        let off = MonkhorstPackMesh::new(&unit(), 2, MeshScheme::MpOffset).unwrap();
        let quarter = [Frac::new(1, 4), Frac::new(3, 4)];
        for p in off.points() {
            assert!(p.frac.iter().all(|f| quarter.contains(f)));
        }
        let q = induced_q_mesh(&off, &unit());
        let mut diffs: Vec<KPoint> = Vec::new();
        for a in off.points() {
            for b in off.points() {
                diffs.push(a.sub(b).folded());
            }
        }
        diffs.sort();
        diffs.dedup();
        let mut expect = q.points().to_vec();
        expect.sort();
        assert_eq!(diffs, expect);
        assert!(diffs.contains(&KPoint::gamma()));
        assert_eq!(q.scheme(), MeshScheme::GammaCentered);
    }

    #[test]
    fn fold_examples() {
        let (f, g) = KPoint::from_ints([0, 0, -1], 2).fold();
        assert_eq!(f, KPoint::from_ints([0, 0, 1], 2));
        assert_eq!(g, [0, 0, -1]);
        assert_eq!(KPoint::gamma().fold(), (KPoint::gamma(), [0, 0, 0]));
        let (f, g) = KPoint::from_ints([5, 0, 0], 4).fold();
        assert_eq!(f, KPoint::from_ints([1, 0, 0], 4));
        assert_eq!(g, [1, 0, 0]);
        let r = unit().reciprocal();
        let c = r.k_cartesian(&f);
        assert!((c[0] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn conserve_examples() {
        let g = KPoint::gamma();
        let ka = KPoint::from_ints([0, 0, 1], 2);
        assert_eq!(conserve_momentum(&g, &g, &ka), ka);
        assert_eq!(conserve_momentum(&g, &g, &g), g);
    }

    #[test]
    fn closure_exhaustive() {
        for scheme in [MeshScheme::GammaCentered, MeshScheme::MpOffset] {
            for m in 1..=3 {
                let mesh = MonkhorstPackMesh::new(&unit(), m, scheme).unwrap();
                let n = mesh.n_k();
                for i in 0..n {
                    for j in 0..n {
                        for a in 0..n {
                            let kb = conserve_momentum(mesh.point(i), mesh.point(j), mesh.point(a));
                            assert_eq!(mesh.index_of(&kb), Some(mesh.combine(i, j, a)));
                        }
                    }
                }
                let q = induced_q_mesh(&mesh, &unit());
                for a in 0..n {
                    for i in 0..n {
                        let d = mesh.point(a).sub(mesh.point(i));
                        assert_eq!(q.index_of(&d), Some(mesh.difference(a, i)));
                        let back = mesh.point(i).add(q.point(mesh.difference(a, i)));
                        assert_eq!(mesh.index_of(&back), Some(a));
                        assert_eq!(mesh.shift_by(i, mesh.difference(a, i)), a);
                    }
                }
            }
        }
    }

    #[test]
    fn index_lookup_rejects_off_mesh() {
        let mesh = MonkhorstPackMesh::new(&unit(), 4, MeshScheme::GammaCentered).unwrap();
        assert_eq!(mesh.index_of(&KPoint::from_ints([1, 0, 0], 3)), None);
        assert_eq!(mesh.index_of(&KPoint::from_ints([5, 0, -3], 4)), Some(mesh.from_axis([1, 0, 1])));
        for (i, p) in mesh.points().iter().enumerate() {
            assert_eq!(mesh.index_of(p), Some(i));
        }
        let mut sorted = mesh.points().to_vec();
        sorted.sort();
        assert_eq!(sorted, mesh.points());
    }

    proptest! {
        #[test]
        fn fold_idempotent_and_exact(n in prop::array::uniform3(-1000i64..1000), d in 1i64..50) {
            let k = KPoint::from_ints(n, d);
            let (f, g) = k.fold();
            prop_assert!(f.is_folded());
            prop_assert_eq!(f.shift(g), k);
            prop_assert_eq!(f.fold(), (f, [0, 0, 0]));
        }

        #[test]
        fn conservation_on_random_mesh(m in 1usize..7, i in 0usize..1000, j in 0usize..1000, a in 0usize..1000) {
            let mesh = MonkhorstPackMesh::new(&unit(), m, MeshScheme::GammaCentered).unwrap();
            let n = mesh.n_k();
            let (i, j, a) = (i % n, j % n, a % n);
            let kb = conserve_momentum(mesh.point(i), mesh.point(j), mesh.point(a));
            prop_assert_eq!(mesh.index_of(&kb), Some(mesh.combine(i, j, a)));
        }
    }
}
