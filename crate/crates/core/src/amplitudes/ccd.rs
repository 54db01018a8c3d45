//! The finite-mesh CCD fixed-point map with explicit intermediates, driven by
//! a precomputed table of every ERI on the mesh (small meshes only).

use rayon::prelude::*;

use super::{AmplitudeTensor, Quad};
use crate::error::{Error, Result};
use crate::lattice::MonkhorstPackMesh;
use crate::meanfield::ModelSystem;
use crate::reduce::pairwise_sum;
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

/// ⟨p k_p, q k_q | r k_r, s k_s⟩ for all mesh triples and all bands.
pub struct EriTable {
    n_k: usize,
    nb: usize,
    data: Vec<C64>,
}

impl EriTable {
    pub fn bytes_for(n_k: usize, n_bands: usize) -> u64 {
        (n_k as u64).pow(3) * (n_bands as u64).pow(4) * 16
    }

    pub fn build(sys: &ModelSystem, mesh: &MonkhorstPackMesh, budget_bytes: u64) -> Result<Self> {
        let n = mesh.n_k();
        let nb = sys.n_bands();
        let needed = Self::bytes_for(n, nb);
        if needed > budget_bytes {
            return Err(Error::Budget {
                what: format!("ERI table on a {}^3 mesh", mesh.per_dim()),
                needed,
                budget: budget_bytes,
            });
        }
        sys.solve_mesh(mesh)?;
        let block = nb.pow(4);
        let mut data = vec![ZERO; n * n * n * block];
        data.par_chunks_mut(block)
            .enumerate()
            .try_for_each(|(flat, out)| -> Result<()> {
                let (kp, kq, kr) = (flat / (n * n), (flat / n) % n, flat % n);
                let ks = mesh.combine(kp, kq, kr);
                let (p1, p2, p3, p4) = (mesh.point(kp), mesh.point(kq), mesh.point(kr), mesh.point(ks));
                for p in 0..nb {
                    for q in 0..nb {
                        for r in 0..nb {
                            for s in 0..nb {
                                out[((p * nb + q) * nb + r) * nb + s] = sys.eri((p, p1), (q, p2), (r, p3), (s, p4))?;
                            }
                        }
                    }
                }
                Ok(())
            })?;
        Ok(EriTable { n_k: n, nb, data })
    }

    /// ⟨p k_p, q k_q | r k_r, s (k_p+k_q−k_r)⟩ by mesh index and band index.
    #[inline]
    pub fn get(&self, p: usize, kp: usize, q: usize, kq: usize, r: usize, kr: usize, s: usize) -> C64 {
        let n = self.n_k;
        let nb = self.nb;
        self.data[((kp * n + kq) * n + kr) * nb.pow(4) + ((p * nb + q) * nb + r) * nb + s]
    }
}

/// Which parts of the map to include.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapParts {
    pub quadratic: bool,
}

impl MapParts {
    pub const FULL: MapParts = MapParts { quadratic: true };
    pub const LINEAR: MapParts = MapParts { quadratic: false };
}

/// Everything the map needs that does not depend on T.
pub struct CcdContext {
    mesh: MonkhorstPackMesh,
    n_occ: usize,
    n_vir: usize,
    eri: EriTable,
    denom: Vec<f64>,
    budget: u64,
}

impl CcdContext {
    pub fn new(sys: &ModelSystem, mesh: &MonkhorstPackMesh, budget_bytes: u64) -> Result<Self> {
        let (no, nv) = (sys.n_occ(), sys.n_vir());
        let n = mesh.n_k();
        let needed = EriTable::bytes_for(n, no + nv) + 4 * AmplitudeTensor::bytes_for(n, no, nv);
        if needed > budget_bytes {
            return Err(Error::Budget {
                what: format!("CCD iteration on a {}^3 mesh", mesh.per_dim()),
                needed,
                budget: budget_bytes,
            });
        }
        let eri = EriTable::build(sys, mesh, budget_bytes)?;
        let energies: Vec<Vec<f64>> = mesh
            .points()
            .iter()
            .map(|k| sys.solve_at_k(k).map(|b| b.energies.clone()))
            .collect::<Result<_>>()?;
        let mut denom = Vec::with_capacity(n * n * n * no * no * nv * nv);
        for ki in 0..n {
            for kj in 0..n {
                for ka in 0..n {
                    let kb = mesh.combine(ki, kj, ka);
                    for i in 0..no {
                        for j in 0..no {
                            for a in 0..nv {
                                for b in 0..nv {
                                    let e = energies[ki][i] + energies[kj][j] - energies[ka][no + a] - energies[kb][no + b];
                                    if !(e < 0.0) {
                                        return Err(Error::Invalid(format!(
                                            "non-negative denominator {e} at mesh entry ({ki}, {kj}, {ka})"
                                        )));
                                    }
                                    denom.push(e);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(CcdContext {
            mesh: mesh.clone(),
            n_occ: no,
            n_vir: nv,
            eri,
            denom,
            budget: budget_bytes,
        })
    }

    pub fn mesh(&self) -> &MonkhorstPackMesh {
        &self.mesh
    }

    pub fn eri(&self) -> &EriTable {
        &self.eri
    }

    /// ε_{ij}^{ab} at the tensor position of (k_i, k_j, k_a)[i, j, a, b].
    pub fn denominators(&self) -> &[f64] {
        &self.denom
    }

    pub fn zeros(&self) -> Result<AmplitudeTensor> {
        AmplitudeTensor::zeros(&self.mesh, self.n_occ, self.n_vir, self.budget)
    }

    fn check(&self, t: &AmplitudeTensor) -> Result<()> {
        if t.mesh().per_dim() != self.mesh.per_dim()
            || t.mesh().scheme() != self.mesh.scheme()
            || t.n_occ() != self.n_occ
            || t.n_vir() != self.n_vir
        {
            return Err(Error::Invalid("amplitude tensor does not match the CCD context".into()));
        }
        Ok(())
    }
}

/// κ and χ blocks built from one amplitude tensor (χ_CD^AB is the bare ERI
/// and is read from the table).
pub struct CcdIntermediates {
    n_k: usize,
    n_occ: usize,
    n_vir: usize,
    kappa_vv: Vec<C64>,
    kappa_oo: Vec<C64>,
    chi_oooo: Vec<C64>,
    chi_ovvo: Vec<C64>,
    chi_voov: Vec<C64>,
}

impl CcdIntermediates {
    /// κ_C^A with k_c = k_a; band labels particle-local.
    pub fn kappa_vv(&self, ka: usize, a: usize, c: usize) -> C64 {
        self.kappa_vv[(ka * self.n_vir + a) * self.n_vir + c]
    }

    /// κ_I^K with k_k = k_i.
    pub fn kappa_oo(&self, ki: usize, i: usize, k: usize) -> C64 {
        self.kappa_oo[(ki * self.n_occ + i) * self.n_occ + k]
    }

    /// χ_IJ^KL at (k_i, k_j, k_k); k_l implied.
    pub fn chi_oooo(&self, ki: usize, kj: usize, kk: usize, i: usize, j: usize, k: usize, l: usize) -> C64 {
        let (n, no) = (self.n_k, self.n_occ);
        self.chi_oooo[((ki * n + kj) * n + kk) * no.pow(4) + ((i * no + j) * no + k) * no + l]
    }

    fn ph_pos(&self, ki: usize, kc: usize, ka: usize, i: usize, c: usize, a: usize, k: usize) -> usize {
        let (n, no, nv) = (self.n_k, self.n_occ, self.n_vir);
        ((ki * n + kc) * n + ka) * (no * nv * nv * no) + ((i * nv + c) * nv + a) * no + k
    }

    /// χ_IC^AK at (k_i, k_c, k_a); k_k = k_i + k_c − k_a.
    pub fn chi_ovvo(&self, ki: usize, kc: usize, ka: usize, i: usize, c: usize, a: usize, k: usize) -> C64 {
        self.chi_ovvo[self.ph_pos(ki, kc, ka, i, c, a, k)]
    }

    /// χ_CI^AK at (k_i, k_c, k_a); k_k = k_c + k_i − k_a.
    pub fn chi_voov(&self, ki: usize, kc: usize, ka: usize, i: usize, c: usize, a: usize, k: usize) -> C64 {
        self.chi_voov[self.ph_pos(ki, kc, ka, i, c, a, k)]
    }
}

/// Assembles κ_C^A, κ_I^K, χ_IJ^KL, χ_IC^AK and χ_CI^AK from `t`. With
/// `parts.quadratic` false every T-dependent piece is dropped.
pub fn build_intermediates(ctx: &CcdContext, t: &AmplitudeTensor, parts: MapParts) -> Result<CcdIntermediates> {
    ctx.check(t)?;
    let mesh = &ctx.mesh;
    let n = mesh.n_k();
    let nf = n as f64;
    let (no, nv) = (ctx.n_occ, ctx.n_vir);
    let v = |p: usize, kp: usize, q: usize, kq: usize, r: usize, kr: usize, s: usize| ctx.eri.get(p, kp, q, kq, r, kr, s);
    let tt = |ki: usize, kj: usize, ka: usize, i: usize, j: usize, a: usize, b: usize| t.data()[t.pos(ki, kj, ka, i, j, a, b)];
    let quad = parts.quadratic;

    // κ_C^A(k_a) = −(1/N²) Σ_{k_k k_l} Σ_{kld} (2⟨KL|CD⟩ − ⟨KL|DC⟩) t_KL^AD
    let mut kappa_vv = vec![ZERO; n * nv * nv];
    if quad {
        kappa_vv.par_chunks_mut(nv * nv).enumerate().for_each(|(ka, out)| {
            for a in 0..nv {
                for c in 0..nv {
                    let mut terms = Vec::with_capacity(n * n);
                    for kk in 0..n {
                        for kl in 0..n {
                            let kd = mesh.combine(kk, kl, ka);
                            let mut s = ZERO;
                            for k in 0..no {
                                for l in 0..no {
                                    for d in 0..nv {
                                        let w = v(k, kk, l, kl, no + c, ka, no + d) * 2.0 - v(k, kk, l, kl, no + d, kd, no + c);
                                        s += w * tt(kk, kl, ka, k, l, a, d);
                                    }
                                }
                            }
                            terms.push(s);
                        }
                    }
                    out[a * nv + c] = -pairwise_sum(&terms) / (nf * nf);
                }
            }
        });
    }

    // κ_I^K(k_i) = (1/N²) Σ_{k_l k_c} Σ_{lcd} (2⟨KL|CD⟩ − ⟨KL|DC⟩) t_IL^CD
    let mut kappa_oo = vec![ZERO; n * no * no];
    if quad {
        kappa_oo.par_chunks_mut(no * no).enumerate().for_each(|(ki, out)| {
            for i in 0..no {
                for k in 0..no {
                    let mut terms = Vec::with_capacity(n * n);
                    for kl in 0..n {
                        for kc in 0..n {
                            let kd = mesh.combine(ki, kl, kc);
                            let mut s = ZERO;
                            for l in 0..no {
                                for c in 0..nv {
                                    for d in 0..nv {
                                        let w = v(k, ki, l, kl, no + c, kc, no + d) * 2.0 - v(k, ki, l, kl, no + d, kd, no + c);
                                        s += w * tt(ki, kl, kc, i, l, c, d);
                                    }
                                }
                            }
                            terms.push(s);
                        }
                    }
                    out[i * no + k] = pairwise_sum(&terms) / (nf * nf);
                }
            }
        });
    }

    // χ_IJ^KL(k_i, k_j, k_k) = ⟨KL|IJ⟩ + (1/N) Σ_{k_c} Σ_{cd} ⟨KL|CD⟩ t_IJ^CD
    let b4 = no.pow(4);
    let mut chi_oooo = vec![ZERO; n * n * n * b4];
    chi_oooo.par_chunks_mut(b4).enumerate().for_each(|(flat, out)| {
        let (ki, kj, kk) = (flat / (n * n), (flat / n) % n, flat % n);
        let kl = mesh.combine(ki, kj, kk);
        for i in 0..no {
            for j in 0..no {
                for k in 0..no {
                    for l in 0..no {
                        let mut val = v(k, kk, l, kl, i, ki, j);
                        if quad {
                            let terms: Vec<C64> = (0..n)
                                .map(|kc| {
                                    let mut s = ZERO;
                                    for c in 0..nv {
                                        for d in 0..nv {
                                            s += v(k, kk, l, kl, no + c, kc, no + d) * tt(ki, kj, kc, i, j, c, d);
                                        }
                                    }
                                    s
                                })
                                .collect();
                            val += pairwise_sum(&terms) / nf;
                        }
                        out[((i * no + j) * no + k) * no + l] = val;
                    }
                }
            }
        }
    });

    // χ_IC^AK and χ_CI^AK at (k_i, k_c, k_a)
    let bph = no * nv * nv * no;
    let mut chi_ovvo = vec![ZERO; n * n * n * bph];
    let mut chi_voov = vec![ZERO; n * n * n * bph];
    chi_ovvo
        .par_chunks_mut(bph)
        .zip(chi_voov.par_chunks_mut(bph))
        .enumerate()
        .for_each(|(flat, (out1, out2))| {
            let (ki, kc, ka) = (flat / (n * n), (flat / n) % n, flat % n);
            let kk = mesh.combine(ki, kc, ka);
            for i in 0..no {
                for c in 0..nv {
                    for a in 0..nv {
                        for k in 0..no {
                            let mut x1 = v(no + a, ka, k, kk, i, ki, no + c);
                            let mut x2 = v(no + a, ka, k, kk, no + c, kc, i);
                            if quad {
                                let mut t1 = Vec::with_capacity(n);
                                let mut t2 = Vec::with_capacity(n);
                                for kl in 0..n {
                                    let kd = mesh.combine(ki, kl, ka);
                                    let mut s1 = ZERO;
                                    let mut s2 = ZERO;
                                    for l in 0..no {
                                        for d in 0..nv {
                                            let lkdc = v(l, kl, k, kk, no + d, kd, no + c);
                                            let lkcd = v(l, kl, k, kk, no + c, kc, no + d);
                                            let t_ad = tt(ki, kl, ka, i, l, a, d);
                                            let t_da = tt(ki, kl, kd, i, l, d, a);
                                            s1 += (lkdc * 2.0 - lkcd) * t_ad - lkdc * t_da;
                                            s2 += lkcd * t_da;
                                        }
                                    }
                                    t1.push(s1);
                                    t2.push(s2);
                                }
                                x1 += pairwise_sum(&t1) / (2.0 * nf);
                                x2 -= pairwise_sum(&t2) / (2.0 * nf);
                            }
                            let p = ((i * nv + c) * nv + a) * no + k;
                            out1[p] = x1;
                            out2[p] = x2;
                        }
                    }
                }
            }
        });

    Ok(CcdIntermediates {
        n_k: n,
        n_occ: no,
        n_vir: nv,
        kappa_vv,
        kappa_oo,
        chi_oooo,
        chi_ovvo,
        chi_voov,
    })
}

/// One application of the fixed-point map: constant, κ, and χ-contracted
/// terms, divided by ε_{ij}^{ab}.
pub fn ccd_map(ctx: &CcdContext, t: &AmplitudeTensor, parts: MapParts) -> Result<AmplitudeTensor> {
    let im = build_intermediates(ctx, t, parts)?;
    let mesh = &ctx.mesh;
    let n = mesh.n_k();
    let nf = n as f64;
    let (no, nv) = (ctx.n_occ, ctx.n_vir);
    let v = |p: usize, kp: usize, q: usize, kq: usize, r: usize, kr: usize, s: usize| ctx.eri.get(p, kp, q, kq, r, kr, s);
    let tt = |ki: usize, kj: usize, ka: usize, i: usize, j: usize, a: usize, b: usize| t.data()[t.pos(ki, kj, ka, i, j, a, b)];
    let block = t.block_len();

    // the part acted on by the permutation operator
    let mut x = vec![ZERO; t.data().len()];
    x.par_chunks_mut(block).enumerate().for_each(|(flat, out)| {
        let (ki, kj, ka) = (flat / (n * n), (flat / n) % n, flat % n);
        let kb = mesh.combine(ki, kj, ka);
        for i in 0..no {
            for j in 0..no {
                for a in 0..nv {
                    for b in 0..nv {
                        let mut s = ZERO;
                        for c in 0..nv {
                            s += im.kappa_vv(ka, a, c) * tt(ki, kj, ka, i, j, c, b);
                        }
                        for k in 0..no {
                            s -= im.kappa_oo(ki, i, k) * tt(ki, kj, ka, k, j, a, b);
                        }
                        let terms: Vec<C64> = (0..n)
                            .map(|kk| {
                                let kc = mesh.combine(ka, kk, ki);
                                let kc2 = mesh.combine(ka, kk, kj);
                                let mut r = ZERO;
                                for k in 0..no {
                                    for c in 0..nv {
                                        let x_ic = im.chi_ovvo(ki, kc, ka, i, c, a, k);
                                        let x_ci = im.chi_voov(ki, kc, ka, i, c, a, k);
                                        let x_cj = im.chi_voov(kj, kc2, ka, j, c, a, k);
                                        r += (x_ic * 2.0 - x_ci) * tt(kk, kj, kc, k, j, c, b);
                                        r -= x_ic * tt(kk, kj, kb, k, j, b, c);
                                        r -= x_cj * tt(kk, ki, kb, k, i, b, c);
                                    }
                                }
                                r
                            })
                            .collect();
                        s += pairwise_sum(&terms) / nf;
                        out[((i * no + j) * nv + a) * nv + b] = s;
                    }
                }
            }
        }
    });

    let mut out = ctx.zeros()?;
    let xr = &x;
    out.data_mut().par_chunks_mut(block).enumerate().for_each(|(flat, outb)| {
        let (ki, kj, ka) = (flat / (n * n), (flat / n) % n, flat % n);
        let kb = mesh.combine(ki, kj, ka);
        for i in 0..no {
            for j in 0..no {
                for a in 0..nv {
                    for b in 0..nv {
                        let p = t.pos(ki, kj, ka, i, j, a, b);
                        let mut s = v(no + a, ka, no + b, kb, i, ki, j);
                        s += xr[p] + xr[t.pos(kj, ki, kb, j, i, b, a)];
                        let hh: Vec<C64> = (0..n)
                            .map(|kk| {
                                let kl = mesh.combine(ki, kj, kk);
                                let mut r = ZERO;
                                for k in 0..no {
                                    for l in 0..no {
                                        r += im.chi_oooo(ki, kj, kk, i, j, k, l) * tt(kk, kl, ka, k, l, a, b);
                                    }
                                }
                                r
                            })
                            .collect();
                        let pp: Vec<C64> = (0..n)
                            .map(|kc| {
                                let mut r = ZERO;
                                for c in 0..nv {
                                    for d in 0..nv {
                                        r += v(no + a, ka, no + b, kb, no + c, kc, no + d) * tt(ki, kj, kc, i, j, c, d);
                                    }
                                }
                                r
                            })
                            .collect();
                        s += (pairwise_sum(&hh) + pairwise_sum(&pp)) / nf;
                        outb[((i * no + j) * nv + a) * nv + b] = s / ctx.denom[p];
                    }
                }
            }
        }
    });
    Ok(out)
}

/// T_n after `n` map applications from zero, with ‖T_m − T_{m−1}‖_∞ per step.
pub struct CcdSolution {
    pub amplitudes: AmplitudeTensor,
    pub history: Vec<f64>,
}

pub fn ccd_solve(ctx: &CcdContext, n: usize) -> Result<CcdSolution> {
    if n == 0 {
        return Err(Error::Invalid("CCD(n) needs n >= 1".into()));
    }
    let mut t = ctx.zeros()?;
    let mut history = Vec::with_capacity(n);
    for it in 1..=n {
        let next = ccd_map(ctx, &t, MapParts::FULL)?;
        if next.first_non_finite().is_some() {
            return Err(Error::NonFinite(it));
        }
        history.push(next.max_abs_diff(&t));
        t = next;
    }
    Ok(CcdSolution { amplitudes: t, history })
}

/// (1/N_k³) Σ W_{ijab} t_{ijab} with W = 2⟨ij|ab⟩ − ⟨ij|ba⟩.
pub fn energy(ctx: &CcdContext, t: &AmplitudeTensor) -> Result<C64> {
    ctx.check(t)?;
    let mesh = &ctx.mesh;
    let n = mesh.n_k();
    let (no, nv) = (ctx.n_occ, ctx.n_vir);
    let terms: Vec<C64> = (0..n * n * n)
        .into_par_iter()
        .map(|flat| {
            let (ki, kj, ka) = (flat / (n * n), (flat / n) % n, flat % n);
            let kb = mesh.combine(ki, kj, ka);
            let mut s = ZERO;
            for i in 0..no {
                for j in 0..no {
                    for a in 0..nv {
                        for b in 0..nv {
                            let w = ctx.eri.get(i, ki, j, kj, no + a, ka, no + b) * 2.0
                                - ctx.eri.get(i, ki, j, kj, no + b, kb, no + a);
                            s += w * t.get(Quad::new(i, j, no + a, no + b), ki, kj, ka);
                        }
                    }
                }
            }
            s
        })
        .collect();
    Ok(pairwise_sum(&terms) / (n as f64).powi(3))
}
