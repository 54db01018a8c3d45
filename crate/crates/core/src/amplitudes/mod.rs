//! Doubles amplitudes and correlation energies on Monkhorst-Pack meshes.
//!
//! Band indices are 0-based positions in the full band list: holes are
//! `0..n_occ`, particles `n_occ..n_occ+n_vir`. Amplitudes are indexed by
//! (k_i, k_j, k_a) with k_b = k_i + k_j − k_a.

mod ccd;
mod fast;
mod terms;

pub use ccd::{
    build_intermediates, ccd_map, ccd_solve, energy, CcdContext, CcdIntermediates, CcdSolution, EriTable, MapParts,
};
pub use fast::{energy_direct_mp2, quad_3h3p_super_separable, quad_4h2p_by_transfer, term_evaluate_fast};
pub use terms::{amplitude_from_terms, mp3_amplitude, term_evaluate, TermId};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{KPoint, MonkhorstPackMesh};
use crate::meanfield::ModelSystem;
use crate::C64;

/// Default memory budget for amplitude tensors and ERI tables.
pub const DEFAULT_TENSOR_BUDGET: u64 = 4 << 30;

/// External orbital labels (i, j, a, b) as band indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quad {
    pub i: usize,
    pub j: usize,
    pub a: usize,
    pub b: usize,
}

impl Quad {
    pub fn new(i: usize, j: usize, a: usize, b: usize) -> Self {
        Quad { i, j, a, b }
    }

    /// Labels of the partner produced by the permutation operator.
    pub fn swapped(&self) -> Quad {
        Quad::new(self.j, self.i, self.b, self.a)
    }

    pub fn validate(&self, n_occ: usize, n_vir: usize) -> Result<()> {
        let hole = |x: usize| x < n_occ;
        let part = |x: usize| x >= n_occ && x < n_occ + n_vir;
        if hole(self.i) && hole(self.j) && part(self.a) && part(self.b) {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "labels {self:?} out of range for {n_occ} occupied / {n_vir} virtual bands"
            )))
        }
    }
}

/// k_b = k_i + k_j − k_a, unfolded.
pub fn implied_kb(ki: &KPoint, kj: &KPoint, ka: &KPoint) -> KPoint {
    ki.add(kj).sub(ka)
}

/// ε_i(k_i) + ε_j(k_j) − ε_a(k_a) − ε_b(k_b).
pub fn denominator(sys: &ModelSystem, q: Quad, ki: &KPoint, kj: &KPoint, ka: &KPoint) -> Result<f64> {
    let kb = implied_kb(ki, kj, ka);
    Ok(sys.solve_at_k(ki)?.energies[q.i] + sys.solve_at_k(kj)?.energies[q.j]
        - sys.solve_at_k(ka)?.energies[q.a]
        - sys.solve_at_k(&kb)?.energies[q.b])
}

/// Anything that yields t_{ijab}(k_i, k_j, k_a).
pub trait AmplitudeSource: Sync {
    fn amplitude(&self, sys: &ModelSystem, q: Quad, ki: &KPoint, kj: &KPoint, ka: &KPoint) -> Result<C64>;
}

/// ⟨a k_a, b k_b | i k_i, j k_j⟩ / ε_{ij}^{ab}, at arbitrary momenta.
pub fn mp2_amplitude(sys: &ModelSystem, q: Quad, ki: &KPoint, kj: &KPoint, ka: &KPoint) -> Result<C64> {
    q.validate(sys.n_occ(), sys.n_vir())?;
    let kb = implied_kb(ki, kj, ka);
    let e = denominator(sys, q, ki, kj, ka)?;
    if e.abs() <= 1e-8 {
        return Err(Error::Invalid(format!("vanishing denominator {e} at {ki}, {kj}, {ka}")));
    }
    let v = sys.eri((q.a, ka), (q.b, &kb), (q.i, ki), (q.j, kj))?;
    Ok(v / e)
}

/// Amplitudes that can be evaluated pointwise anywhere in the zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactAmplitude {
    /// The CCD(1) amplitude, identical to MP2.
    Mp2,
}

impl ExactAmplitude {
    pub fn tag(&self) -> &'static str {
        match self {
            ExactAmplitude::Mp2 => "mp2",
        }
    }
}

impl AmplitudeSource for ExactAmplitude {
    fn amplitude(&self, sys: &ModelSystem, q: Quad, ki: &KPoint, kj: &KPoint, ka: &KPoint) -> Result<C64> {
        match self {
            ExactAmplitude::Mp2 => mp2_amplitude(sys, q, ki, kj, ka),
        }
    }
}

/// T_{ijab}(k_i, k_j, k_a) on a mesh; (k_i, k_j, k_a) outer, bands inner.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeTensor {
    mesh: MonkhorstPackMesh,
    n_occ: usize,
    n_vir: usize,
    data: Vec<C64>,
}

impl AmplitudeTensor {
    pub fn bytes_for(n_k: usize, n_occ: usize, n_vir: usize) -> u64 {
        (n_k as u64).pow(3) * (n_occ * n_occ * n_vir * n_vir) as u64 * 16
    }

    pub fn zeros(mesh: &MonkhorstPackMesh, n_occ: usize, n_vir: usize, budget_bytes: u64) -> Result<Self> {
        let needed = Self::bytes_for(mesh.n_k(), n_occ, n_vir);
        if needed > budget_bytes {
            return Err(Error::Budget {
                what: format!("amplitude tensor on a {}^3 mesh", mesh.per_dim()),
                needed,
                budget: budget_bytes,
            });
        }
        Ok(AmplitudeTensor {
            mesh: mesh.clone(),
            n_occ,
            n_vir,
            data: vec![C64::new(0.0, 0.0); (needed / 16) as usize],
        })
    }

    pub fn mesh(&self) -> &MonkhorstPackMesh {
        &self.mesh
    }

    pub fn n_occ(&self) -> usize {
        self.n_occ
    }

    pub fn n_vir(&self) -> usize {
        self.n_vir
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub(crate) fn block_len(&self) -> usize {
        self.n_occ * self.n_occ * self.n_vir * self.n_vir
    }

    /// Flat position of entry (i, j, a, b) at mesh indices (k_i, k_j, k_a);
    /// band labels are hole/particle local (a, b counted from 0).
    #[inline]
    pub(crate) fn pos(&self, ki: usize, kj: usize, ka: usize, i: usize, j: usize, a: usize, b: usize) -> usize {
        let n = self.mesh.n_k();
        ((ki * n + kj) * n + ka) * self.block_len() + ((i * self.n_occ + j) * self.n_vir + a) * self.n_vir + b
    }

    /// Entry for band labels `q` at mesh indices.
    pub fn get(&self, q: Quad, ki: usize, kj: usize, ka: usize) -> C64 {
        let no = self.n_occ;
        self.data[self.pos(ki, kj, ka, q.i, q.j, q.a - no, q.b - no)]
    }

    pub fn set(&mut self, q: Quad, ki: usize, kj: usize, ka: usize, v: C64) {
        let no = self.n_occ;
        let p = self.pos(ki, kj, ka, q.i, q.j, q.a - no, q.b - no);
        self.data[p] = v;
    }

    /// Entry at mesh momenta given as k-points (any lattice representative).
    pub fn at(&self, q: Quad, ki: &KPoint, kj: &KPoint, ka: &KPoint) -> Result<C64> {
        q.validate(self.n_occ, self.n_vir)?;
        let idx = |k: &KPoint| {
            self.mesh
                .index_of(k)
                .ok_or_else(|| Error::Invalid(format!("{k} is not a point of the amplitude mesh")))
        };
        Ok(self.get(q, idx(ki)?, idx(kj)?, idx(ka)?))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &AmplitudeTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, alpha: C64) -> AmplitudeTensor {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// Position of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.re.is_finite() || !v.im.is_finite())
    }
}

impl AmplitudeSource for AmplitudeTensor {
    fn amplitude(&self, _sys: &ModelSystem, q: Quad, ki: &KPoint, kj: &KPoint, ka: &KPoint) -> Result<C64> {
        self.at(q, ki, kj, ka)
    }
}

/// Evaluates `src` at every mesh entry.
pub fn sample_on_mesh(
    sys: &ModelSystem,
    src: &dyn AmplitudeSource,
    mesh: &MonkhorstPackMesh,
    budget_bytes: u64,
) -> Result<AmplitudeTensor> {
    let (no, nv) = (sys.n_occ(), sys.n_vir());
    let mut t = AmplitudeTensor::zeros(mesh, no, nv, budget_bytes)?;
    let n = mesh.n_k();
    let block = t.block_len();
    t.data
        .par_chunks_mut(block)
        .enumerate()
        .try_for_each(|(flat, out)| -> Result<()> {
            let (ki, kj, ka) = (flat / (n * n), (flat / n) % n, flat % n);
            let (pi, pj, pa) = (mesh.point(ki), mesh.point(kj), mesh.point(ka));
            for i in 0..no {
                for j in 0..no {
                    for a in 0..nv {
                        for b in 0..nv {
                            let q = Quad::new(i, j, no + a, no + b);
                            out[((i * no + j) * nv + a) * nv + b] = src.amplitude(sys, q, pi, pj, pa)?;
                        }
                    }
                }
            }
            Ok(())
        })?;
    Ok(t)
}

#[cfg(test)]
mod tests;
