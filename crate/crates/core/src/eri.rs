//! Pair densities and the normalized electron repulsion integral
//!
//! ⟨n₁k₁,n₂k₂|n₃k₃,n₄k₄⟩ = (4π/|Ω|) Σ′_G ϱ̂_{13}(G) ϱ̂_{24}(−G) / |q+G|²,  q = k₃ − k₁,
//!
//! with ϱ̂_{n′k′,nk}(G) = Σ_{G₁} conj(û_{n′k′}(G₁)) û_{nk}(G₁+G). All k are
//! folded first; the G-sum runs over the closed box |q+G|_∞ ≤ n_pw/2 in
//! fractional coordinates, which keeps the conjugation and relabeling
//! symmetries exact.

use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::sync::Arc;

use lru::LruCache;
use num_complex::Complex64 as C64;
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::fft3::Fft3;
use crate::lattice::KPoint;
use crate::meanfield::{ModelSystem, PlanewaveBasis, SystemParams};

/// A band index together with a crystal momentum.
pub type Orbital<'a> = (usize, &'a KPoint);

type OrbitalKey = (usize, KPoint);
type PairKey = (usize, KPoint, usize, KPoint);

/// Real-space orbitals and pair-density boxes with LRU byte budgets.
pub struct PairDensityEngine {
    fft: Fft3,
    /// Half-width of the stored G box.
    h: i64,
    /// Q-box half-width n_pw/2.
    q_half: f64,
    basis_grid: Vec<usize>,
    box_support: Vec<usize>,
    box_grid: Vec<usize>,
    orbitals: Mutex<LruCache<OrbitalKey, Arc<Vec<C64>>>>,
    pairs: Mutex<LruCache<PairKey, Arc<Vec<C64>>>>,
}

fn capacity(gib: f64, entry_bytes: usize) -> NonZeroUsize {
    let n = ((gib * (1u64 << 30) as f64) / entry_bytes as f64).floor() as usize;
    NonZeroUsize::new(n.max(16)).expect("nonzero")
}

impl PairDensityEngine {
    pub(crate) fn new(basis: &PlanewaveBasis, params: &SystemParams) -> Self {
        let n = basis.per_dim();
        let h = (n / 2) as i64 + 1;
        // product support spans ±(n−1); the box must not alias onto it
        let ngrid = h as usize + n;
        let fft = Fft3::new(ngrid);
        let basis_grid = basis
            .g_vectors()
            .iter()
            .map(|g| (fft.wrap(g[0]) * ngrid + fft.wrap(g[1])) * ngrid + fft.wrap(g[2]))
            .collect();
        let box_support: Vec<usize> = (-h..=h).map(|g| fft.wrap(g)).collect();
        let mut box_grid = Vec::new();
        for a in -h..=h {
            for b in -h..=h {
                for c in -h..=h {
                    box_grid.push((fft.wrap(a) * ngrid + fft.wrap(b)) * ngrid + fft.wrap(c));
                }
            }
        }
        let side = (2 * h + 1) as usize;
        let orb_bytes = fft.len() * 16 + 64;
        let pair_bytes = side * side * side * 16 + 96;
        PairDensityEngine {
            fft,
            h,
            q_half: n as f64 / 2.0,
            basis_grid,
            box_support,
            box_grid,
            orbitals: Mutex::new(LruCache::new(capacity(params.orbital_cache_gib, orb_bytes))),
            pairs: Mutex::new(LruCache::new(capacity(params.pair_cache_gib, pair_bytes))),
        }
    }

    pub fn box_half_width(&self) -> i64 {
        self.h
    }

    pub fn box_side(&self) -> usize {
        (2 * self.h + 1) as usize
    }

    pub fn box_len(&self) -> usize {
        self.box_side().pow(3)
    }

    /// Position of G in the stored box, if inside.
    #[inline]
    pub fn box_index(&self, g: [i64; 3]) -> Option<usize> {
        let h = self.h;
        if g.iter().any(|&x| x < -h || x > h) {
            return None;
        }
        let s = 2 * h + 1;
        Some((((g[0] + h) * s + (g[1] + h)) * s + (g[2] + h)) as usize)
    }

    pub fn box_vector(&self, idx: usize) -> [i64; 3] {
        let s = self.box_side();
        let h = self.h;
        [(idx / (s * s)) as i64 - h, ((idx / s) % s) as i64 - h, (idx % s) as i64 - h]
    }

    pub fn clear(&self) {
        self.orbitals.lock().clear();
        self.pairs.lock().clear();
    }
}

/// ϱ̂ on the box |G|_∞ ≤ h, with the bookkeeping for unfolded momenta.
#[derive(Clone)]
pub struct PairDensity {
    pub bra: (usize, KPoint),
    pub ket: (usize, KPoint),
    h: i64,
    /// ϱ̂(G) = stored(G + offset) where offset accounts for folding.
    offset: [i64; 3],
    values: Arc<Vec<C64>>,
}

impl PairDensity {
    /// ϱ̂(G), or `None` if G + offset falls outside the stored box.
    pub fn get(&self, g: [i64; 3]) -> Option<C64> {
        let h = self.h;
        let s = 2 * h + 1;
        let mut idx = 0i64;
        for d in 0..3 {
            let x = g[d] + self.offset[d];
            if x < -h || x > h {
                return None;
            }
            idx = idx * s + (x + h);
        }
        Some(self.values[idx as usize])
    }

    pub fn half_width(&self) -> i64 {
        self.h
    }

    /// Like [`get`](Self::get) but treats a lookup outside the box as an error.
    #[inline]
    pub fn at(&self, g: [i64; 3]) -> Result<C64> {
        self.get(g)
            .ok_or_else(|| Error::Invalid(format!("pair density lookup {g:?} outside the stored box")))
    }

    /// The same density with other representatives of its momenta; both
    /// differences must be reciprocal-lattice vectors.
    pub fn reframe(&self, bra_k: &KPoint, ket_k: &KPoint) -> Result<PairDensity> {
        let db = bra_k.sub(&self.bra.1).as_lattice_vector();
        let dk = ket_k.sub(&self.ket.1).as_lattice_vector();
        match (db, dk) {
            (Some(b), Some(k)) => Ok(PairDensity {
                bra: (self.bra.0, *bra_k),
                ket: (self.ket.0, *ket_k),
                h: self.h,
                offset: [0, 1, 2].map(|d| self.offset[d] + k[d] - b[d]),
                values: self.values.clone(),
            }),
            _ => Err(Error::Momentum(format!(
                "cannot reframe ({}, {}) as ({bra_k}, {ket_k})",
                self.bra.1, self.ket.1
            ))),
        }
    }
}

impl ModelSystem {
    fn real_space_orbital(&self, n: usize, kf: &KPoint) -> Result<Arc<Vec<C64>>> {
        let eng = &self.pair;
        let key = (n, *kf);
        if let Some(v) = eng.orbitals.lock().get(&key) {
            return Ok(v.clone());
        }
        let bands = self.solve_at_k(kf)?;
        let mut grid = vec![C64::new(0.0, 0.0); eng.fft.len()];
        for (c, &gi) in bands.band(n).iter().zip(&eng.basis_grid) {
            grid[gi] = *c;
        }
        let (lo, hi) = self.basis().range();
        let support: Vec<usize> = (lo..=hi).map(|g| eng.fft.wrap(g)).collect();
        eng.fft.inverse_pruned(&mut grid, &support);
        let v = Arc::new(grid);
        eng.orbitals.lock().put(key, v.clone());
        Ok(v)
    }

    /// Box values of ϱ̂ between folded momenta, computed without caching.
    pub(crate) fn pair_box_uncached(&self, bra: usize, kb: &KPoint, ket: usize, kk: &KPoint) -> Result<Vec<C64>> {
        let eng = &self.pair;
        let ub = self.real_space_orbital(bra, kb)?;
        let uk = self.real_space_orbital(ket, kk)?;
        let mut prod: Vec<C64> = ub.iter().zip(uk.iter()).map(|(a, b)| a.conj() * b).collect();
        eng.fft.forward_pruned(&mut prod, &eng.box_support);
        let norm = 1.0 / eng.fft.len() as f64;
        Ok(eng.box_grid.iter().map(|&i| prod[i] * norm).collect())
    }

    pub(crate) fn pair_box(&self, bra: usize, kb: &KPoint, ket: usize, kk: &KPoint) -> Result<Arc<Vec<C64>>> {
        let key = (bra, *kb, ket, *kk);
        if let Some(v) = self.pair.pairs.lock().get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(self.pair_box_uncached(bra, kb, ket, kk)?);
        self.pair.pairs.lock().put(key, v.clone());
        Ok(v)
    }

    /// ϱ̂_{n′k′,nk} for arbitrary (unfolded) momenta.
    pub fn pair_density(&self, bra: Orbital, ket: Orbital) -> Result<PairDensity> {
        let (kbf, gb) = bra.1.fold();
        let (kkf, gk) = ket.1.fold();
        let values = self.pair_box(bra.0, &kbf, ket.0, &kkf)?;
        Ok(PairDensity {
            bra: (bra.0, *bra.1),
            ket: (ket.0, *ket.1),
            h: self.pair.h,
            offset: [gk[0] - gb[0], gk[1] - gb[1], gk[2] - gb[2]],
            values,
        })
    }

    /// As [`pair_density`](Self::pair_density) but bypassing the pair cache;
    /// used for one-shot families that would only thrash it.
    pub fn pair_density_uncached(&self, bra: Orbital, ket: Orbital) -> Result<PairDensity> {
        let (kbf, gb) = bra.1.fold();
        let (kkf, gk) = ket.1.fold();
        let values = Arc::new(self.pair_box_uncached(bra.0, &kbf, ket.0, &kkf)?);
        Ok(PairDensity {
            bra: (bra.0, *bra.1),
            ket: (ket.0, *ket.1),
            h: self.pair.h,
            offset: [gk[0] - gb[0], gk[1] - gb[1], gk[2] - gb[2]],
            values,
        })
    }

    pub fn coulomb_prefactor(&self) -> f64 {
        4.0 * PI / self.cell().volume()
    }

    /// (4π/|Ω|)/|Q|² for Q = q + G (fractional q), or 0 outside the Q-box or
    /// at the punctured point.
    #[inline]
    pub(crate) fn kernel(&self, qfrac: [f64; 3], g: [i64; 3]) -> f64 {
        let qh = self.pair.q_half + 1e-9;
        let qq = [qfrac[0] + g[0] as f64, qfrac[1] + g[1] as f64, qfrac[2] + g[2] as f64];
        if qq.iter().any(|x| x.abs() > qh) {
            return 0.0;
        }
        let c = self.reciprocal().cartesian(qq);
        let n2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
        if n2.sqrt() < 1e-10 {
            return 0.0;
        }
        self.coulomb_prefactor() / n2
    }

    /// Every integer g with a nonzero kernel at q + g, with that kernel value.
    /// For exactly conserving unfolded momenta the ERI equals
    /// Σ_g K(q+g) ϱ̂₁₃(g) ϱ̂₂₄(−g) over this list, q = k₃ − k₁.
    pub fn transfer_support(&self, q: [f64; 3]) -> Vec<([i64; 3], f64)> {
        let qh = self.pair.q_half + 1e-9;
        let lo: [i64; 3] = [0, 1, 2].map(|d| (-qh - q[d]).ceil() as i64);
        let hi: [i64; 3] = [0, 1, 2].map(|d| (qh - q[d]).floor() as i64);
        let mut out = Vec::new();
        for a in lo[0]..=hi[0] {
            for b in lo[1]..=hi[1] {
                for c in lo[2]..=hi[2] {
                    let g = [a, b, c];
                    let w = self.kernel(q, g);
                    if w != 0.0 {
                        out.push((g, w));
                    }
                }
            }
        }
        out
    }

    /// ⟨n₁k₁,n₂k₂|n₃k₃,n₄k₄⟩.
    pub fn eri(&self, p1: Orbital, p2: Orbital, p3: Orbital, p4: Orbital) -> Result<C64> {
        let k1 = p1.1.folded();
        let k2 = p2.1.folded();
        let k3 = p3.1.folded();
        let k4 = p4.1.folded();
        let s = k1
            .add(&k2)
            .sub(&k3)
            .sub(&k4)
            .as_lattice_vector()
            .ok_or_else(|| Error::Momentum(format!("{k1} + {k2} - {k3} - {k4} is not a lattice vector")))?;
        let q = k3.sub(&k1).to_f64();
        let r13 = self.pair_box(p1.0, &k1, p3.0, &k3)?;
        let r24 = self.pair_box(p2.0, &k2, p4.0, &k4)?;
        Ok(self.contract_boxes(&r13, &r24, q, s))
    }

    /// Σ_G ϱ₁₃(G) ϱ₂₄(−G+s) K(q+G) over the Q-box.
    pub(crate) fn contract_boxes(&self, r13: &[C64], r24: &[C64], q: [f64; 3], s: [i64; 3]) -> C64 {
        let eng = &self.pair;
        let h = eng.h;
        let mut acc = C64::new(0.0, 0.0);
        for idx in 0..eng.box_len() {
            let g = eng.box_vector(idx);
            let w = self.kernel(q, g);
            if w == 0.0 {
                continue;
            }
            let gm = [s[0] - g[0], s[1] - g[1], s[2] - g[2]];
            let j = eng.box_index(gm).unwrap_or_else(|| panic!("shifted index {gm:?} outside box {h}"));
            acc += r13[idx] * r24[j] * w;
        }
        acc
    }

    /// W = 2⟨ij|ab⟩ − ⟨ij|ba⟩.
    pub fn antisymmetrized_eri(&self, i: Orbital, j: Orbital, a: Orbital, b: Orbital) -> Result<C64> {
        Ok(self.eri(i, j, a, b)? * 2.0 - self.eri(i, j, b, a)?)
    }

    /// (4π/|Ω|) Σ′ 1/|q+G|² over the Q-box; bounds |eri| when |ϱ̂| ≤ 1.
    pub fn kernel_sum(&self, q: &KPoint) -> f64 {
        let qf = q.to_f64();
        (0..self.pair.box_len()).map(|i| self.kernel(qf, self.pair.box_vector(i))).sum()
    }
}
