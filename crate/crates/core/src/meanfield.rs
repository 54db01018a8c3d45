//! Planewave effective one-body problem H = −½∇² + V(r) with a
//! lattice-periodized Gaussian potential, solved per k by LOBPCG.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use dashmap::DashMap;
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft3::Fft3;
use crate::lattice::{Frac, KPoint, MonkhorstPackMesh, ReciprocalCell, UnitCell};
use crate::lobpcg::{self, LobpcgParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    /// r₀ in cartesian length units.
    pub center: [f64; 3],
    /// Diagonal of Σ (length² units).
    pub sigma: [f64; 3],
    pub strength: f64,
}

impl PotentialSpec {
    pub fn paper() -> Self {
        PotentialSpec {
            center: [0.5, 0.5, 0.5],
            sigma: [0.01, 0.04, 0.09],
            strength: -200.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("covariance diagonal must be positive, got {:?}", self.sigma)));
        }
        if !self.strength.is_finite() || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid("potential parameters must be finite".into()));
        }
        Ok(())
    }

    /// Fourier coefficient for an arbitrary reciprocal-lattice vector.
    pub fn fourier(&self, cell: &UnitCell, recip: &ReciprocalCell, g: [i64; 3]) -> C64 {
        let gc = recip.g_cartesian(g);
        let det: f64 = self.sigma.iter().product();
        let quad: f64 = (0..3).map(|d| self.sigma[d] * gc[d] * gc[d]).sum();
        let phase: f64 = (0..3).map(|d| gc[d] * self.center[d]).sum();
        let amp = self.strength / cell.volume() * (2.0 * PI).powf(1.5) * det.sqrt() * (-0.5 * quad).exp();
        C64::from_polar(amp, -phase)
    }
}

/// Integer G-vectors g ∈ [lo, lo+n−1]³ with lo = −⌊n/2⌋, lexicographic.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanewaveBasis {
    n: usize,
    lo: i64,
    g: Vec<[i64; 3]>,
}

impl PlanewaveBasis {
    pub fn new(n_pw: usize) -> Result<Self> {
        if n_pw == 0 {
            return Err(Error::Invalid("n_pw must be positive".into()));
        }
        let lo = -((n_pw / 2) as i64);
        let hi = lo + n_pw as i64 - 1;
        let mut g = Vec::with_capacity(n_pw * n_pw * n_pw);
        for a in lo..=hi {
            for b in lo..=hi {
                for c in lo..=hi {
                    g.push([a, b, c]);
                }
            }
        }
        Ok(PlanewaveBasis { n: n_pw, lo, g })
    }

    pub fn per_dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn g_vectors(&self) -> &[[i64; 3]] {
        &self.g
    }

    /// Inclusive component range.
    pub fn range(&self) -> (i64, i64) {
        (self.lo, self.lo + self.n as i64 - 1)
    }

    pub fn index_of(&self, g: [i64; 3]) -> Option<usize> {
        let n = self.n as i64;
        let mut idx = 0i64;
        for d in 0..3 {
            let j = g[d] - self.lo;
            if j < 0 || j >= n {
                return None;
            }
            idx = idx * n + j;
        }
        Some(idx as usize)
    }
}

pub fn potential_fourier(spec: &PotentialSpec, cell: &UnitCell, basis: &PlanewaveBasis) -> Vec<C64> {
    let recip = cell.reciprocal();
    basis.g_vectors().iter().map(|&g| spec.fourier(cell, &recip, g)).collect()
}

/// Orbitals and energies at one (folded) k-point.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStates {
    pub k: KPoint,
    /// ε_{nk}, ascending.
    pub energies: Vec<f64>,
    /// û_{nk}(G) column-major: band n occupies `coeffs[n*n_g..(n+1)*n_g]`.
    pub coeffs: Vec<C64>,
    pub n_g: usize,
    pub residuals: Vec<f64>,
}

impl BandStates {
    pub fn n_bands(&self) -> usize {
        self.energies.len()
    }

    pub fn band(&self, n: usize) -> &[C64] {
        &self.coeffs[n * self.n_g..(n + 1) * self.n_g]
    }
}

/// Rotates each column by a unit phase so its largest-magnitude coefficient
/// (lowest index among near-ties) is real and positive.
pub fn fix_gauge(mut states: BandStates) -> Result<BandStates> {
    let n_g = states.n_g;
    for n in 0..states.n_bands() {
        let col = &mut states.coeffs[n * n_g..(n + 1) * n_g];
        let max = col.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if !(max > 0.0) {
            return Err(Error::Invalid(format!("zero column {n} in band states")));
        }
        let pivot = col
            .iter()
            .position(|c| c.norm() >= max * (1.0 - 1e-10))
            .expect("max attained");
        let phase = col[pivot].conj() / col[pivot].norm();
        for c in col.iter_mut() {
            *c *= phase;
        }
        col[pivot] = C64::new(col[pivot].re, 0.0);
    }
    Ok(states)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    /// Rows are lattice vectors.
    pub lattice: [[f64; 3]; 3],
    pub potential: PotentialSpec,
    pub n_pw: usize,
    pub n_occ: usize,
    pub n_vir: usize,
    pub eig_tol: f64,
    pub eig_max_iter: usize,
    pub pair_cache_gib: f64,
    pub orbital_cache_gib: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            lattice: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            potential: PotentialSpec::paper(),
            n_pw: 16,
            n_occ: 1,
            n_vir: 1,
            eig_tol: 1e-9,
            eig_max_iter: 400,
            pair_cache_gib: 2.0,
            orbital_cache_gib: 1.0,
        }
    }
}

impl SystemParams {
    pub fn n_bands(&self) -> usize {
        self.n_occ + self.n_vir
    }

    pub fn validate(&self) -> Result<()> {
        self.potential.validate()?;
        if self.n_occ == 0 || self.n_vir == 0 {
            return Err(Error::Invalid("n_occ and n_vir must be positive".into()));
        }
        if self.n_pw < 2 {
            return Err(Error::Invalid("n_pw must be at least 2".into()));
        }
        if self.n_bands() + 2 > self.n_pw.pow(3) {
            return Err(Error::Invalid("more bands requested than basis functions".into()));
        }
        if !(self.eig_tol > 0.0) || self.eig_max_iter == 0 {
            return Err(Error::Invalid("eigensolver tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

/// V(r) on a real-space grid plus the FFT machinery for H·x.
struct HamiltonianKernel {
    fft: Fft3,
    vgrid: Vec<C64>,
    support: Vec<usize>,
    grid_index: Vec<usize>,
    g_cart: Vec<[f64; 3]>,
    v0: f64,
}

impl HamiltonianKernel {
    fn new(cell: &UnitCell, recip: &ReciprocalCell, pot: &PotentialSpec, basis: &PlanewaveBasis) -> Self {
        let n = basis.per_dim();
        // differences G−G' span 2n−1 values per axis; 2n avoids aliasing
        let ng = 2 * n;
        let fft = Fft3::new(ng);
        let mut vgrid = vec![C64::new(0.0, 0.0); fft.len()];
        let span = n as i64 - 1;
        for a in -span..=span {
            for b in -span..=span {
                for c in -span..=span {
                    let idx = (fft.wrap(a) * ng + fft.wrap(b)) * ng + fft.wrap(c);
                    vgrid[idx] = pot.fourier(cell, recip, [a, b, c]);
                }
            }
        }
        fft.inverse(&mut vgrid);
        let (lo, hi) = basis.range();
        let support: Vec<usize> = (lo..=hi).map(|g| fft.wrap(g)).collect();
        let grid_index = basis
            .g_vectors()
            .iter()
            .map(|g| (fft.wrap(g[0]) * ng + fft.wrap(g[1])) * ng + fft.wrap(g[2]))
            .collect();
        let g_cart = basis.g_vectors().iter().map(|&g| recip.g_cartesian(g)).collect();
        let v0 = pot.fourier(cell, recip, [0, 0, 0]).re;
        HamiltonianKernel {
            fft,
            vgrid,
            support,
            grid_index,
            g_cart,
            v0,
        }
    }

    fn kinetic(&self, kc: [f64; 3]) -> Vec<f64> {
        self.g_cart
            .iter()
            .map(|g| 0.5 * ((kc[0] + g[0]).powi(2) + (kc[1] + g[1]).powi(2) + (kc[2] + g[2]).powi(2)))
            .collect()
    }

    fn apply(&self, kin: &[f64], x: &[C64], y: &mut [C64], work: &mut Vec<C64>) {
        work.clear();
        work.resize(self.fft.len(), C64::new(0.0, 0.0));
        for (xi, &gi) in x.iter().zip(&self.grid_index) {
            work[gi] = *xi;
        }
        self.fft.inverse_pruned(work, &self.support);
        for (w, v) in work.iter_mut().zip(&self.vgrid) {
            *w *= v;
        }
        self.fft.forward_pruned(work, &self.support);
        let norm = 1.0 / self.fft.len() as f64;
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = work[self.grid_index[i]] * norm + x[i] * kin[i];
        }
    }
}

/// The model solid: cell, potential, basis, band counts and caches.
pub struct ModelSystem {
    params: SystemParams,
    cell: UnitCell,
    recip: ReciprocalCell,
    basis: PlanewaveBasis,
    ham: HamiltonianKernel,
    bands: DashMap<KPoint, Arc<BandStates>>,
    gamma_block: OnceLock<Vec<Vec<C64>>>,
    pub(crate) pair: crate::eri::PairDensityEngine,
}

impl ModelSystem {
    pub fn new(params: SystemParams) -> Result<Self> {
        params.validate()?;
        let cell = UnitCell::new(params.lattice)?;
        let recip = cell.reciprocal();
        let basis = PlanewaveBasis::new(params.n_pw)?;
        let ham = HamiltonianKernel::new(&cell, &recip, &params.potential, &basis);
        let pair = crate::eri::PairDensityEngine::new(&basis, &params);
        Ok(ModelSystem {
            params,
            cell,
            recip,
            basis,
            ham,
            bands: DashMap::new(),
            gamma_block: OnceLock::new(),
            pair,
        })
    }

    pub fn paper() -> Result<Self> {
        Self::new(SystemParams::default())
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn cell(&self) -> &UnitCell {
        &self.cell
    }

    pub fn reciprocal(&self) -> &ReciprocalCell {
        &self.recip
    }

    pub fn basis(&self) -> &PlanewaveBasis {
        &self.basis
    }

    pub fn potential(&self) -> &PotentialSpec {
        &self.params.potential
    }

    pub fn n_occ(&self) -> usize {
        self.params.n_occ
    }

    pub fn n_vir(&self) -> usize {
        self.params.n_vir
    }

    pub fn n_bands(&self) -> usize {
        self.params.n_bands()
    }

    pub fn apply_hamiltonian(&self, k: &KPoint, x: &[C64]) -> Result<Vec<C64>> {
        if x.len() != self.basis.len() {
            return Err(Error::Dimension {
                expected: self.basis.len(),
                got: x.len(),
            });
        }
        let kin = self.ham.kinetic(self.recip.k_cartesian(k));
        let mut y = vec![C64::new(0.0, 0.0); x.len()];
        let mut work = Vec::new();
        self.ham.apply(&kin, x, &mut y, &mut work);
        Ok(y)
    }

    /// Explicit H(k); intended for small bases (oracles and tests).
    pub fn dense_hamiltonian(&self, k: &KPoint) -> DMatrix<C64> {
        let g = self.basis.g_vectors();
        let n = g.len();
        let kin = self.ham.kinetic(self.recip.k_cartesian(k));
        DMatrix::from_fn(n, n, |r, c| {
            let d = [g[r][0] - g[c][0], g[r][1] - g[c][1], g[r][2] - g[c][2]];
            let v = self.params.potential.fourier(&self.cell, &self.recip, d);
            if r == c {
                v + kin[r]
            } else {
                v
            }
        })
    }

    fn block_size(&self) -> usize {
        self.n_bands() + 2
    }

    fn run_solver(&self, k: &KPoint, x0: Vec<Vec<C64>>) -> Result<lobpcg::LobpcgOutput> {
        let kin = self.ham.kinetic(self.recip.k_cartesian(k));
        let v0 = self.ham.v0;
        let work = std::cell::RefCell::new(Vec::new());
        lobpcg::lobpcg(
            |x, y| self.ham.apply(&kin, x, y, &mut work.borrow_mut()),
            |r, theta, w| {
                for i in 0..r.len() {
                    let d = (kin[i] + v0 - theta).max(1.0);
                    w[i] = r[i] / d;
                }
            },
            x0,
            &LobpcgParams {
                n_conv: self.n_bands(),
                tol: self.params.eig_tol,
                max_iter: self.params.eig_max_iter,
            },
        )
    }

    fn gamma_seed(&self) -> Result<&Vec<Vec<C64>>> {
        if let Some(b) = self.gamma_block.get() {
            return Ok(b);
        }
        let kin = self.ham.kinetic([0.0; 3]);
        let n_g = self.basis.len();
        let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x0: Vec<Vec<C64>> = (0..self.block_size())
            .map(|_| {
                (0..n_g)
                    .map(|i| C64::new(next(), next()) * (-kin[i] / 40.0).exp())
                    .collect()
            })
            .collect();
        let out = self.run_solver(&KPoint::gamma(), x0)?;
        let _ = self.gamma_block.set(out.vectors);
        Ok(self.gamma_block.get().expect("just set"))
    }

    /// Γ-block eigenvectors re-indexed towards the nearest Γ image of `k`.
    fn initial_block(&self, k: &KPoint) -> Result<Vec<Vec<C64>>> {
        let seed = self.gamma_seed()?;
        let half = Frac::new(1, 2);
        let shift: [i64; 3] = [0, 1, 2].map(|d| if k.frac[d] > half { 1 } else { 0 });
        if shift == [0, 0, 0] {
            return Ok(seed.clone());
        }
        let g = self.basis.g_vectors();
        Ok(seed
            .iter()
            .map(|col| {
                g.iter()
                    .map(|gv| {
                        let src = [gv[0] + shift[0], gv[1] + shift[1], gv[2] + shift[2]];
                        self.basis.index_of(src).map_or(C64::new(0.0, 0.0), |i| col[i])
                    })
                    .collect()
            })
            .collect())
    }

    fn compute_bands(&self, k: &KPoint) -> Result<BandStates> {
        let out = if *k == KPoint::gamma() {
            self.gamma_seed()?;
            // rerun from the converged block so the path matches other k
            self.run_solver(k, self.gamma_seed()?.clone())?
        } else {
            self.run_solver(k, self.initial_block(k)?)?
        };
        let nb = self.n_bands();
        if out.values[nb] - out.values[nb - 1] < 1e-6 {
            log::warn!(
                "near-degenerate truncation edge at {k}: {} vs {}",
                out.values[nb - 1],
                out.values[nb]
            );
        }
        let n_g = self.basis.len();
        let mut coeffs = Vec::with_capacity(n_g * nb);
        for v in &out.vectors[..nb] {
            coeffs.extend_from_slice(v);
        }
        fix_gauge(BandStates {
            k: *k,
            energies: out.values[..nb].to_vec(),
            coeffs,
            n_g,
            residuals: out.residuals[..nb].to_vec(),
        })
    }

    /// Bands at fold(k); cached by exact fractional coordinates.
    pub fn solve_at_k(&self, k: &KPoint) -> Result<Arc<BandStates>> {
        let kf = k.folded();
        if let Some(b) = self.bands.get(&kf) {
            return Ok(b.clone());
        }
        let states = Arc::new(self.compute_bands(&kf)?);
        Ok(self.bands.entry(kf).or_insert(states).clone())
    }

    pub fn cached_bands(&self) -> usize {
        self.bands.len()
    }

    /// min_k (ε_{n_occ+1,k} − ε_{n_occ,k}) over the probe mesh.
    pub fn direct_gap(&self, probe: &MonkhorstPackMesh) -> Result<f64> {
        let mut gap = f64::INFINITY;
        let no = self.n_occ();
        for k in probe.points() {
            let b = self.solve_at_k(k)?;
            gap = gap.min(b.energies[no] - b.energies[no - 1]);
        }
        Ok(gap)
    }

    /// Solves every mesh point (in parallel when a rayon pool is active).
    pub fn solve_mesh(&self, mesh: &MonkhorstPackMesh) -> Result<()> {
        use rayon::prelude::*;
        self.gamma_seed()?;
        mesh.points().par_iter().try_for_each(|k| self.solve_at_k(k).map(|_| ()))
    }

    fn fingerprint(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let key = serde_json::json!({
            "lattice": self.params.lattice,
            "potential": self.params.potential,
            "n_pw": self.params.n_pw,
            "n_bands": self.n_bands(),
            "eig_tol": self.params.eig_tol,
        });
        h.update(key.to_string().as_bytes());
        h.finalize().into()
    }

    /// Writes every cached k-point. Format (little-endian): magic `CCDFSEB1`,
    /// u32 version, 32-byte system fingerprint, u32 n_g, u32 n_bands,
    /// u64 count, then per record: 6 × i64 (num, den per axis), n_bands × f64
    /// energies, n_bands × f64 residuals, n_g·n_bands × (re, im) f64.
    pub fn save_band_cache(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<Arc<BandStates>> = self.bands.iter().map(|e| e.value().clone()).collect();
        entries.sort_by(|a, b| a.k.cmp(&b.k));
        let tmp = path.with_extension("tmp");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(BAND_MAGIC)?;
        f.write_all(&BAND_VERSION.to_le_bytes())?;
        f.write_all(&self.fingerprint())?;
        f.write_all(&(self.basis.len() as u32).to_le_bytes())?;
        f.write_all(&(self.n_bands() as u32).to_le_bytes())?;
        f.write_all(&(entries.len() as u64).to_le_bytes())?;
        for b in entries {
            for r in &b.k.frac {
                f.write_all(&r.numer().to_le_bytes())?;
                f.write_all(&r.denom().to_le_bytes())?;
            }
            for e in b.energies.iter().chain(&b.residuals) {
                f.write_all(&e.to_le_bytes())?;
            }
            for c in &b.coeffs {
                f.write_all(&c.re.to_le_bytes())?;
                f.write_all(&c.im.to_le_bytes())?;
            }
        }
        f.flush()?;
        drop(f);
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Loads a cache file written for an identical system; returns the number
    /// of records loaded (0 when the file is absent or for another system).
    pub fn load_band_cache(&self, path: &Path) -> Result<usize> {
        let mut f = match std::fs::File::open(path) {
            Ok(f) => std::io::BufReader::new(f),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e.into()),
        };
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        let version = read_u32(&mut f)?;
        let mut fp = [0u8; 32];
        f.read_exact(&mut fp)?;
        if &magic != BAND_MAGIC || version != BAND_VERSION || fp != self.fingerprint() {
            return Ok(0);
        }
        let n_g = read_u32(&mut f)? as usize;
        let nb = read_u32(&mut f)? as usize;
        if n_g != self.basis.len() || nb != self.n_bands() {
            return Ok(0);
        }
        let count = read_u64(&mut f)? as usize;
        let mut loaded = HashMap::new();
        for _ in 0..count {
            let mut frac = [Frac::new(0, 1); 3];
            for r in frac.iter_mut() {
                let num = read_u64(&mut f)? as i64;
                let den = read_u64(&mut f)? as i64;
                *r = Frac::new(num, den);
            }
            let mut energies = vec![0.0; nb];
            for e in energies.iter_mut() {
                *e = read_f64(&mut f)?;
            }
            let mut residuals = vec![0.0; nb];
            for e in residuals.iter_mut() {
                *e = read_f64(&mut f)?;
            }
            let mut coeffs = vec![C64::new(0.0, 0.0); n_g * nb];
            for c in coeffs.iter_mut() {
                let re = read_f64(&mut f)?;
                let im = read_f64(&mut f)?;
                *c = C64::new(re, im);
            }
            let k = KPoint::new(frac);
            loaded.insert(k, BandStates { k, energies, coeffs, n_g, residuals });
        }
        let n = loaded.len();
        for (k, b) in loaded {
            self.bands.entry(k).or_insert_with(|| Arc::new(b));
        }
        Ok(n)
    }
}

const BAND_MAGIC: &[u8; 8] = b"CCDFSEB1";
const BAND_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::MeshScheme;
    use crate::lobpcg::dot;

    fn small(n_pw: usize, strength: f64) -> ModelSystem {
        let mut p = SystemParams::default();
        p.n_pw = n_pw;
        p.potential.strength = strength;
        ModelSystem::new(p).unwrap()
    }

    #[test]
    fn potential_at_zero() {
        let cell = UnitCell::cubic(1.0).unwrap();
        let basis = PlanewaveBasis::new(4).unwrap();
        let v = potential_fourier(&PotentialSpec::paper(), &cell, &basis);
        let i0 = basis.index_of([0, 0, 0]).unwrap();
        assert!((v[i0].re + 18.8995).abs() < 1e-3, "{}", v[i0]);
        assert!(v[i0].im.abs() < 1e-15);
        for (i, g) in basis.g_vectors().iter().enumerate() {
            if let Some(j) = basis.index_of([-g[0], -g[1], -g[2]]) {
                assert!((v[j] - v[i].conj()).norm() < 1e-14);
            }
        }
        let mut zero = PotentialSpec::paper();
        zero.strength = 0.0;
        assert!(potential_fourier(&zero, &cell, &basis).iter().all(|c| c.norm() == 0.0));
        let mut shifted = PotentialSpec::paper();
        shifted.center = [1.5, -0.5, 2.5];
        let w = potential_fourier(&shifted, &cell, &basis);
        for i in 0..v.len() {
            assert!((v[i] - w[i]).norm() < 1e-12 * v[i].norm().max(1.0));
        }
    }

    #[test]
    fn potential_matches_real_space_fft() {
        // sample the periodized Gaussian on a 64³ grid and transform
        let pot = PotentialSpec::paper();
        let cell = UnitCell::cubic(1.0).unwrap();
        let recip = cell.reciprocal();
        let n = 64;
        let fft = Fft3::new(n);
        let mut grid = vec![C64::new(0.0, 0.0); fft.len()];
        let det: f64 = pot.sigma.iter().product();
        let pref = pot.strength;
        let _ = det;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let r = [a as f64 / n as f64, b as f64 / n as f64, c as f64 / n as f64];
                    let mut s = 0.0;
                    for la in -2..=2 {
                        for lb in -2..=2 {
                            for lc in -2..=2 {
                                let d = [
                                    r[0] + la as f64 - pot.center[0],
                                    r[1] + lb as f64 - pot.center[1],
                                    r[2] + lc as f64 - pot.center[2],
                                ];
                                let q: f64 = (0..3).map(|i| d[i] * d[i] / pot.sigma[i]).sum();
                                s += (-0.5 * q).exp();
                            }
                        }
                    }
                    grid[(a * n + b) * n + c] = C64::new(pref * s, 0.0);
                }
            }
        }
        fft.forward(&mut grid);
        let norm = 1.0 / fft.len() as f64;
        for g in [[0, 0, 0], [1, 0, 0], [0, 2, 1], [3, -1, 2]] {
            let idx = (fft.wrap(g[0]) * n + fft.wrap(g[1])) * n + fft.wrap(g[2]);
            let fftv = grid[idx] * norm;
            let exact = pot.fourier(&cell, &recip, g);
            assert!((fftv - exact).norm() < 1e-8 * exact.norm().max(1e-3), "{g:?}: {fftv} vs {exact}");
        }
    }

    #[test]
    fn basis_layout() {
        let b = PlanewaveBasis::new(4).unwrap();
        assert_eq!(b.range(), (-2, 1));
        assert_eq!(b.g_vectors()[0], [-2, -2, -2]);
        assert!(b.index_of([0, 0, 0]).is_some());
        let b5 = PlanewaveBasis::new(5).unwrap();
        assert_eq!(b5.range(), (-2, 2));
        for (i, g) in b5.g_vectors().iter().enumerate() {
            assert_eq!(b5.index_of(*g), Some(i));
        }
        assert_eq!(b5.index_of([3, 0, 0]), None);
    }

    #[test]
    fn free_particle_matvec() {
        let sys = small(4, 0.0);
        let n = sys.basis().len();
        let i0 = sys.basis().index_of([0, 0, 0]).unwrap();
        let mut x = vec![C64::new(0.0, 0.0); n];
        x[i0] = C64::new(1.0, 0.0);
        let y = sys.apply_hamiltonian(&KPoint::gamma(), &x).unwrap();
        assert!(y.iter().all(|v| v.norm() < 1e-14));
        let y = sys.apply_hamiltonian(&KPoint::from_ints([0, 0, 1], 2), &x).unwrap();
        for (i, v) in y.iter().enumerate() {
            let e = if i == i0 { PI * PI / 2.0 } else { 0.0 };
            assert!((v - C64::new(e, 0.0)).norm() < 1e-12);
        }
        assert!(sys.apply_hamiltonian(&KPoint::gamma(), &x[1..]).is_err());
    }

    fn pseudo(n: usize, seed: u64) -> Vec<C64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let a = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let b = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                C64::new(a, b)
            })
            .collect()
    }

    #[test]
    fn matvec_matches_dense() {
        for n_pw in [4, 5] {
            let sys = small(n_pw, -200.0);
            let k = KPoint::from_ints([1, 2, 3], 7);
            let h = sys.dense_hamiltonian(&k);
            let x = pseudo(sys.basis().len(), 3);
            let y = sys.apply_hamiltonian(&k, &x).unwrap();
            let xv = nalgebra::DVector::from_vec(x);
            let yd = &h * xv;
            let scale = yd.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for i in 0..y.len() {
                assert!((y[i] - yd[i]).norm() < 1e-12 * scale);
            }
        }
    }

    #[test]
    fn hermitian_operator() {
        let sys = small(6, -200.0);
        let k = KPoint::from_ints([1, 0, 3], 5);
        let x = pseudo(sys.basis().len(), 1);
        let y = pseudo(sys.basis().len(), 2);
        let hx = sys.apply_hamiltonian(&k, &x).unwrap();
        let hy = sys.apply_hamiltonian(&k, &y).unwrap();
        let a = dot(&x, &hy);
        let b = dot(&y, &hx).conj();
        assert!((a - b).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn iterative_matches_dense_oracle() {
        for n_pw in [4, 6] {
            let sys = small(n_pw, -200.0);
            for k in [KPoint::gamma(), KPoint::from_ints([1, 0, 3], 4), KPoint::from_ints([2, 1, 1], 3)] {
                let b = sys.solve_at_k(&k).unwrap();
                let (vals, _) = lobpcg::hermitian_eigen(sys.dense_hamiltonian(&k));
                for n in 0..2 {
                    assert!((b.energies[n] - vals[n]).abs() < 1e-8, "{n_pw} {k}: {} vs {}", b.energies[n], vals[n]);
                    assert!(b.residuals[n] <= 1e-9);
                }
                for m in 0..2 {
                    for n in 0..2 {
                        let o = dot(b.band(m), b.band(n));
                        let e = if m == n { 1.0 } else { 0.0 };
                        assert!((o - C64::new(e, 0.0)).norm() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn free_particle_spectrum() {
        let sys = small(6, 0.0);
        let b = sys.solve_at_k(&KPoint::gamma()).unwrap();
        assert!(b.energies[0].abs() < 1e-9);
        assert!((b.energies[1] - 2.0 * PI * PI).abs() < 1e-8);
        let i0 = sys.basis().index_of([0, 0, 0]).unwrap();
        assert!((b.band(0)[i0] - C64::new(1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn gauge_examples() {
        let mk = |c: Vec<C64>| BandStates {
            k: KPoint::gamma(),
            energies: vec![0.0],
            n_g: c.len(),
            coeffs: c,
            residuals: vec![0.0],
        };
        let z = C64::new(0.0, 0.0);
        let s = fix_gauge(mk(vec![C64::new(0.0, 1.0), z, z])).unwrap();
        assert_eq!(s.coeffs, vec![C64::new(1.0, 0.0), z, z]);
        let pos = mk(vec![C64::new(0.6, 0.0), C64::new(0.0, 0.8)]);
        let once = fix_gauge(pos.clone()).unwrap();
        assert_eq!(fix_gauge(once.clone()).unwrap(), once);
        let tie = mk(vec![C64::new(0.0, 0.5_f64.sqrt()), C64::new(0.5_f64.sqrt(), 0.0)]);
        let t = fix_gauge(tie).unwrap();
        assert!(t.coeffs[0].im == 0.0 && t.coeffs[0].re > 0.0);
        assert!(fix_gauge(mk(vec![z, z])).is_err());
        let already = mk(vec![C64::new(0.8, 0.0), C64::new(0.0, 0.6)]);
        assert_eq!(fix_gauge(already.clone()).unwrap(), already);
    }

    #[test]
    fn periodic_in_k() {
        let sys = small(6, -200.0);
        let k = KPoint::from_ints([1, 2, 2], 5);
        let a = sys.solve_at_k(&k).unwrap();
        let b = sys.solve_at_k(&k.shift([0, -1, 2])).unwrap();
        for n in 0..2 {
            assert!((a.energies[n] - b.energies[n]).abs() < 1e-9);
        }
    }

    #[test]
    fn gauge_is_smooth_along_line() {
        let sys = small(6, -200.0);
        let base = KPoint::from_ints([10, 10, 10], 100);
        let diff = |d: i64| {
            let b0 = sys.solve_at_k(&base).unwrap();
            let b1 = sys.solve_at_k(&base.add(&KPoint::from_ints([0, 0, d], 1600))).unwrap();
            (0..2)
                .map(|n| {
                    let v: Vec<C64> = b0.band(n).iter().zip(b1.band(n)).map(|(a, b)| a - b).collect();
                    crate::lobpcg::norm(&v)
                })
                .collect::<Vec<f64>>()
        };
        let (d1, d2, d4) = (diff(4), diff(2), diff(1));
        for n in 0..2 {
            assert!(d1[n] < 0.05);
            let r1 = d1[n] / d2[n];
            let r2 = d2[n] / d4[n];
            assert!((r1 - 2.0).abs() < 0.2 && (r2 - 2.0).abs() < 0.2, "band {n}: {r1} {r2}");
        }
    }

    #[test]
    fn band_cache_round_trip() {
        let sys = small(4, -200.0);
        let mesh = MonkhorstPackMesh::new(sys.cell(), 2, MeshScheme::GammaCentered).unwrap();
        sys.solve_mesh(&mesh).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bands.bin");
        sys.save_band_cache(&path).unwrap();
        let other = small(4, -200.0);
        assert_eq!(other.load_band_cache(&path).unwrap(), 8);
        for k in mesh.points() {
            assert_eq!(*other.solve_at_k(k).unwrap(), *sys.solve_at_k(k).unwrap());
        }
        let different = small(4, -100.0);
        assert_eq!(different.load_band_cache(&path).unwrap(), 0);
        assert_eq!(different.load_band_cache(&dir.path().join("absent")).unwrap(), 0);
    }

    #[test]
    fn free_particle_gap_small_on_probe() {
        let sys = small(6, 0.0);
        let mesh = MonkhorstPackMesh::new(sys.cell(), 2, MeshScheme::GammaCentered).unwrap();
        // (0,0,½) sits on the zone face where the two lowest free bands cross
        let gap = sys.direct_gap(&mesh).unwrap();
        assert!(gap.abs() < 1e-8);
    }
}
