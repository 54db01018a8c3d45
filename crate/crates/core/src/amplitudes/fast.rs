//! Reorganized evaluations of the diagrams that dominate large-mesh studies.
//! Each agrees with the generic loop nest in `terms` up to rounding.
//!
//! All three group ERIs by their momentum transfer Q and write
//! ⟨1 2|3 4⟩ = Σ_g K(Q+g) ϱ̂₁₃(g) ϱ̂₂₄(−g) with unfolded, exactly conserving
//! momenta, so pair densities can be shared across whole mesh families.

use std::sync::Arc;

use gemm::Parallelism;
use rayon::prelude::*;

use super::{denominator, implied_kb, AmplitudeSource, ExactAmplitude, Quad, TermId};
use crate::eri::PairDensity;
use crate::error::{Error, Result};
use crate::lattice::{induced_q_mesh, KPoint, MonkhorstPackMesh};
use crate::meanfield::{BandStates, ModelSystem};
use crate::reduce::pairwise_sum;
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

/// ϱ̂(n k → n′ k+Q) for every k in `points`, per (n, n′) band pair.
fn family(
    sys: &ModelSystem,
    points: &[KPoint],
    q: &KPoint,
    bras: &[usize],
    kets: &[usize],
) -> Result<Vec<Vec<PairDensity>>> {
    let mut out = Vec::with_capacity(bras.len() * kets.len());
    for &n in bras {
        for &np in kets {
            let fam: Vec<PairDensity> = points
                .par_iter()
                .map(|k| sys.pair_density_uncached((n, k), (np, &k.add(q))))
                .collect::<Result<_>>()?;
            out.push(fam);
        }
    }
    Ok(out)
}

fn gemm_parallelism() -> Parallelism {
    match rayon::current_num_threads() {
        0 | 1 => Parallelism::None,
        t => Parallelism::Rayon(t),
    }
}

/// M = A Bᵀ for column-major n×k matrices A and B.
fn gemm_abt(n: usize, k: usize, a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut m = vec![ZERO; n * n];
    assert!(a.len() == n * k && b.len() == n * k);
    // SAFETY: dimensions and strides describe the three buffers exactly.
    unsafe {
        gemm::gemm(
            n,
            n,
            k,
            m.as_mut_ptr(),
            n as isize,
            1,
            false,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            ZERO,
            C64::new(1.0, 0.0),
            false,
            false,
            false,
            gemm_parallelism(),
        );
    }
    m
}

/// Σ_{k_i k_j} Σ_{ijab} |⟨IJ|AB⟩|²/ε at one transfer Q = k_a − k_i.
#[allow(clippy::too_many_arguments)]
fn direct_at_transfer(
    sys: &ModelSystem,
    mesh: &MonkhorstPackMesh,
    qi: usize,
    q: &KPoint,
    mqi: usize,
    fam_q: &[Vec<PairDensity>],
    fam_mq: &[Vec<PairDensity>],
    bands: &[Arc<BandStates>],
) -> Result<f64> {
    let n = mesh.n_k();
    let (no, nv) = (sys.n_occ(), sys.n_vir());
    let support = sys.transfer_support(q.to_f64());
    let ns = support.len();
    let mut amat = Vec::with_capacity(no * nv);
    for fam in fam_q {
        let mut a = vec![ZERO; n * ns];
        for (k, pd) in fam.iter().enumerate() {
            for (s, (g, w)) in support.iter().enumerate() {
                a[k + s * n] = pd.at(*g)? * *w;
            }
        }
        amat.push(a);
    }
    let mut bmat = Vec::with_capacity(no * nv);
    for fam in fam_mq {
        let mut b = vec![ZERO; n * ns];
        for (k, pd) in fam.iter().enumerate() {
            let kp = mesh.point(k);
            let pd = pd.reframe(kp, &kp.sub(q))?;
            for (s, (g, _)) in support.iter().enumerate() {
                b[k + s * n] = pd.at([-g[0], -g[1], -g[2]])?;
            }
        }
        bmat.push(b);
    }
    let mut parts = Vec::new();
    for i in 0..no {
        for a in 0..nv {
            for j in 0..no {
                for b in 0..nv {
                    let m = gemm_abt(n, ns, &amat[i * nv + a], &bmat[j * nv + b]);
                    let mut col = Vec::with_capacity(n);
                    for kj in 0..n {
                        let kb = mesh.shift_by(kj, mqi);
                        let ej = bands[kj].energies[j] - bands[kb].energies[no + b];
                        let row: Vec<f64> = (0..n)
                            .map(|ki| {
                                let ka = mesh.shift_by(ki, qi);
                                let e = bands[ki].energies[i] - bands[ka].energies[no + a] + ej;
                                m[ki + kj * n].norm_sqr() / e
                            })
                            .collect();
                        col.push(pairwise_sum(&row));
                    }
                    parts.push(pairwise_sum(&col));
                }
            }
        }
    }
    Ok(pairwise_sum(&parts))
}

/// (1/N_k³) Σ ⟨IJ|AB⟩ t_IJ^AB with the MP2 amplitude, i.e. Σ|⟨IJ|AB⟩|²/ε,
/// computed one transfer at a time as dense matrix products.
pub fn energy_direct_mp2(sys: &ModelSystem, mesh: &MonkhorstPackMesh) -> Result<C64> {
    sys.solve_mesh(mesh)?;
    let n = mesh.n_k();
    let bands: Vec<Arc<BandStates>> = mesh.points().iter().map(|k| sys.solve_at_k(k)).collect::<Result<_>>()?;
    let qmesh = induced_q_mesh(mesh, sys.cell());
    let (no, nv) = (sys.n_occ(), sys.n_vir());
    let occ: Vec<usize> = (0..no).collect();
    let vir: Vec<usize> = (no..no + nv).collect();
    let mut per_q: Vec<Option<f64>> = vec![None; n];
    for qi in 0..n {
        if per_q[qi].is_some() {
            continue;
        }
        let q = *qmesh.point(qi);
        let mq = q.neg().folded();
        let mqi = qmesh.index_of(&mq).expect("induced mesh is closed under negation");
        let fam_q = family(sys, mesh.points(), &q, &occ, &vir)?;
        let fam_mq = if mqi != qi {
            Some(family(sys, mesh.points(), &mq, &occ, &vir)?)
        } else {
            None
        };
        let fm = fam_mq.as_deref().unwrap_or(&fam_q);
        per_q[qi] = Some(direct_at_transfer(sys, mesh, qi, &q, mqi, &fam_q, fm, &bands)?);
        if mqi != qi {
            per_q[mqi] = Some(direct_at_transfer(sys, mesh, mqi, &mq, qi, fm, &fam_q, &bands)?);
        }
        log::debug!("energy transfer {qi}/{n} done");
    }
    let parts: Vec<f64> = per_q.into_iter().map(|v| v.expect("every transfer visited")).collect();
    Ok(C64::new(pairwise_sum(&parts) / (n as f64).powi(3), 0.0))
}

fn folded_externals(ki: &KPoint, kj: &KPoint, ka: &KPoint) -> (KPoint, KPoint, KPoint, KPoint) {
    let (ki, kj, ka) = (ki.folded(), kj.folded(), ka.folded());
    let kb = implied_kb(&ki, &kj, &ka);
    (ki, kj, ka, kb)
}

/// ⟨LK|DC⟩ t_IL^AD t_KJ^CB: the transfer k_d − k_l = k_i − k_a is fixed, so
/// the double mesh sum factorizes into two single sums per g.
#[allow(clippy::too_many_arguments)]
pub fn quad_3h3p_super_separable(
    sys: &ModelSystem,
    src: &dyn AmplitudeSource,
    q: Quad,
    ki: &KPoint,
    kj: &KPoint,
    ka: &KPoint,
    mesh: &MonkhorstPackMesh,
) -> Result<C64> {
    let (no, nv) = (sys.n_occ(), sys.n_vir());
    q.validate(no, nv)?;
    let (ki, kj, ka, _kb) = folded_externals(ki, kj, ka);
    let eps = denominator(sys, q, &ki, &kj, &ka)?;
    let q0 = ki.sub(&ka);
    let support = sys.transfer_support(q0.to_f64());
    let ns = support.len();

    // X(g) = Σ_{k_l} Σ_{ld} ϱ̂(l k_l → d k_d)(g) t_IL^AD
    let x_parts: Vec<Vec<C64>> = mesh
        .points()
        .par_iter()
        .map(|kl| -> Result<Vec<C64>> {
            let kd = ki.add(kl).sub(&ka);
            let mut acc = vec![ZERO; ns];
            for l in 0..no {
                for d in no..no + nv {
                    let t = src.amplitude(sys, Quad::new(q.i, l, q.a, d), &ki, kl, &ka)?;
                    let pd = sys.pair_density_uncached((l, kl), (d, &kd))?;
                    for (s, (g, _)) in support.iter().enumerate() {
                        acc[s] += pd.at(*g)? * t;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    // Y(g) = Σ_{k_k} Σ_{kc} ϱ̂(k k_k → c k_c)(−g) t_KJ^CB
    let y_parts: Vec<Vec<C64>> = mesh
        .points()
        .par_iter()
        .map(|kk| -> Result<Vec<C64>> {
            let kc = ka.add(kk).sub(&ki);
            let mut acc = vec![ZERO; ns];
            for k in 0..no {
                for c in no..no + nv {
                    let t = src.amplitude(sys, Quad::new(k, q.j, c, q.b), kk, &kj, &kc)?;
                    let pd = sys.pair_density_uncached((k, kk), (c, &kc))?;
                    for (s, (g, _)) in support.iter().enumerate() {
                        acc[s] += pd.at([-g[0], -g[1], -g[2]])? * t;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let column = |parts: &[Vec<C64>], s: usize| {
        let col: Vec<C64> = parts.iter().map(|p| p[s]).collect();
        pairwise_sum(&col)
    };
    let terms: Vec<C64> = (0..ns)
        .map(|s| column(&x_parts, s) * column(&y_parts, s) * support[s].1)
        .collect();
    let nk = mesh.n_k() as f64;
    Ok(pairwise_sum(&terms) / (nk * nk) / eps)
}

/// ⟨KL|CD⟩ t_IJ^CD t_KL^AB grouped by the transfer Q = k_c − k_k, with the
/// pair-density families for Q and −Q shared between the two factors.
#[allow(clippy::too_many_arguments)]
pub fn quad_4h2p_by_transfer(
    sys: &ModelSystem,
    src: &dyn AmplitudeSource,
    q: Quad,
    ki: &KPoint,
    kj: &KPoint,
    ka: &KPoint,
    mesh: &MonkhorstPackMesh,
) -> Result<C64> {
    let (no, nv) = (sys.n_occ(), sys.n_vir());
    q.validate(no, nv)?;
    let (ki, kj, ka, _kb) = folded_externals(ki, kj, ka);
    let eps = denominator(sys, q, &ki, &kj, &ka)?;
    let n = mesh.n_k();
    let pts = mesh.points();
    let kij = ki.add(&kj);
    let kls: Vec<KPoint> = pts.iter().map(|kk| kij.sub(kk)).collect();
    let kl_index: Option<Vec<usize>> = kls.iter().map(|k| mesh.index_of(k)).collect();

    // t_IJ^CD(k_c) per mesh k_c and t_KL^AB(k_k) per mesh k_k
    let t_ij: Vec<Vec<C64>> = pts
        .par_iter()
        .map(|kc| {
            let mut v = Vec::with_capacity(nv * nv);
            for c in no..no + nv {
                for d in no..no + nv {
                    v.push(src.amplitude(sys, Quad::new(q.i, q.j, c, d), &ki, &kj, kc)?);
                }
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let t_kl: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|x| {
            let mut v = Vec::with_capacity(no * no);
            for k in 0..no {
                for l in 0..no {
                    v.push(src.amplitude(sys, Quad::new(k, l, q.a, q.b), &pts[x], &kls[x], &ka)?);
                }
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;

    let qmesh = induced_q_mesh(mesh, sys.cell());
    let occ: Vec<usize> = (0..no).collect();
    let vir: Vec<usize> = (no..no + nv).collect();

    // contribution of one transfer given ϱ̂(k k_k → c k_k+Q) and, per k_k,
    // ϱ̂(l k_l → d k_l−Q)
    let at_transfer = |qi: usize, qv: &KPoint, f1: &[Vec<PairDensity>], f2: &[Vec<PairDensity>]| -> Result<C64> {
        let support = sys.transfer_support(qv.to_f64());
        let per_k: Vec<C64> = (0..n)
            .into_par_iter()
            .map(|kk| -> Result<C64> {
                let kc = mesh.shift_by(kk, qi);
                let mut s = ZERO;
                for k in 0..no {
                    for l in 0..no {
                        let tkl = t_kl[kk][k * no + l];
                        for c in 0..nv {
                            for d in 0..nv {
                                let r1 = &f1[k * nv + c][kk];
                                let r2 = &f2[l * nv + d][kk];
                                let mut v = ZERO;
                                for (g, w) in &support {
                                    v += r1.at(*g)? * r2.at([-g[0], -g[1], -g[2]])? * *w;
                                }
                                s += v * t_ij[kc][c * nv + d] * tkl;
                            }
                        }
                    }
                }
                Ok(s)
            })
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(&per_k))
    };
    // family along k_l for transfer −Q, from the mesh family at fold(−Q)
    let second = |qv: &KPoint, f_mq: &[Vec<PairDensity>]| -> Result<Vec<Vec<PairDensity>>> {
        let minus = qv.neg();
        match &kl_index {
            Some(idx) => f_mq
                .iter()
                .map(|fam| {
                    (0..n)
                        .map(|x| fam[idx[x]].reframe(&kls[x], &kls[x].add(&minus)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect(),
            None => family(sys, &kls, &minus, &occ, &vir),
        }
    };

    let mut per_q: Vec<Option<C64>> = vec![None; n];
    for qi in 0..n {
        if per_q[qi].is_some() {
            continue;
        }
        let qv = *qmesh.point(qi);
        let mq = qv.neg().folded();
        let mqi = qmesh.index_of(&mq).expect("induced mesh is closed under negation");
        let f_q = family(sys, pts, &qv, &occ, &vir)?;
        let f_mq = if mqi != qi { Some(family(sys, pts, &mq, &occ, &vir)?) } else { None };
        let f_mq_ref = f_mq.as_deref().unwrap_or(&f_q);
        per_q[qi] = Some(at_transfer(qi, &qv, &f_q, &second(&qv, f_mq_ref)?)?);
        if mqi != qi {
            per_q[mqi] = Some(at_transfer(mqi, &mq, f_mq_ref, &second(&mq, &f_q)?)?);
        }
    }
    let parts: Vec<C64> = per_q.into_iter().map(|v| v.expect("every transfer visited")).collect();
    let nk = n as f64;
    Ok(pairwise_sum(&parts) / (nk * nk) / eps)
}

/// `term_evaluate` with an exact amplitude, routed through the reorganized
/// kernels where one exists.
#[allow(clippy::too_many_arguments)]
pub fn term_evaluate_fast(
    sys: &ModelSystem,
    term: TermId,
    amp: ExactAmplitude,
    q: Quad,
    ki: &KPoint,
    kj: &KPoint,
    ka: &KPoint,
    mesh: &MonkhorstPackMesh,
) -> Result<C64> {
    match (term, amp) {
        (TermId::EnergyDirect, ExactAmplitude::Mp2) => energy_direct_mp2(sys, mesh),
        (TermId::Quad3h3pSuper, _) => quad_3h3p_super_separable(sys, &amp, q, ki, kj, ka, mesh),
        (TermId::Quad4h2p, _) => quad_4h2p_by_transfer(sys, &amp, q, ki, kj, ka, mesh),
        _ => super::term_evaluate(sys, term, &amp, q, ki, kj, ka, mesh),
    }
    .map_err(|e| match e {
        Error::Invalid(msg) => Error::Invalid(format!("{term}: {msg}")),
        other => other,
    })
}
