//! The catalog of individual amplitude and energy diagrams, each evaluated
//! directly from ERIs and an amplitude source with the internal momenta
//! running over a mesh.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{implied_kb, AmplitudeSource, Quad};
use crate::error::{Error, Result};
use crate::lattice::{KPoint, MonkhorstPackMesh};
use crate::meanfield::ModelSystem;
use crate::reduce::pairwise_sum;
use crate::C64;

/// One diagram of the amplitude map (or of the energy). The value returned by
/// [`term_evaluate`] excludes [`TermId::coefficient`]; terms with
/// [`TermId::permuted`] also enter with their (I,A)↔(J,B) partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermId {
    Constant,
    Lin4h2p,
    Lin2h4p,
    Lin3h3pRing,
    Lin3h3pXc1,
    Lin3h3pXc2,
    Lin3h3pXc3,
    QuadKappaVvDirect,
    QuadKappaVvExchange,
    QuadKappaOoDirect,
    QuadKappaOoExchange,
    Quad4h2p,
    Quad3h3pSuper,
    Quad3h3pRingB,
    Quad3h3pRingC,
    Quad3h3pXc1,
    Quad3h3pXc2A,
    Quad3h3pXc2B,
    Quad3h3pXc2C,
    Quad3h3pXc3,
    EnergyDirect,
    EnergyExchange,
}

impl TermId {
    pub const ALL: [TermId; 22] = [
        TermId::Constant,
        TermId::Lin4h2p,
        TermId::Lin2h4p,
        TermId::Lin3h3pRing,
        TermId::Lin3h3pXc1,
        TermId::Lin3h3pXc2,
        TermId::Lin3h3pXc3,
        TermId::QuadKappaVvDirect,
        TermId::QuadKappaVvExchange,
        TermId::QuadKappaOoDirect,
        TermId::QuadKappaOoExchange,
        TermId::Quad4h2p,
        TermId::Quad3h3pSuper,
        TermId::Quad3h3pRingB,
        TermId::Quad3h3pRingC,
        TermId::Quad3h3pXc1,
        TermId::Quad3h3pXc2A,
        TermId::Quad3h3pXc2B,
        TermId::Quad3h3pXc2C,
        TermId::Quad3h3pXc3,
        TermId::EnergyDirect,
        TermId::EnergyExchange,
    ];

    /// Amplitude-map terms (everything except the two energy pieces).
    pub fn amplitude_terms() -> impl Iterator<Item = TermId> {
        Self::ALL.into_iter().filter(|t| !t.is_energy())
    }

    pub fn name(&self) -> &'static str {
        use TermId::*;
        match self {
            Constant => "constant",
            Lin4h2p => "lin_4h2p",
            Lin2h4p => "lin_2h4p",
            Lin3h3pRing => "lin_3h3p_ring",
            Lin3h3pXc1 => "lin_3h3p_xc1",
            Lin3h3pXc2 => "lin_3h3p_xc2",
            Lin3h3pXc3 => "lin_3h3p_xc3",
            QuadKappaVvDirect => "quad_kappa_vv_direct",
            QuadKappaVvExchange => "quad_kappa_vv_exchange",
            QuadKappaOoDirect => "quad_kappa_oo_direct",
            QuadKappaOoExchange => "quad_kappa_oo_exchange",
            Quad4h2p => "quad_4h2p",
            Quad3h3pSuper => "quad_3h3p_super",
            Quad3h3pRingB => "quad_3h3p_ring_b",
            Quad3h3pRingC => "quad_3h3p_ring_c",
            Quad3h3pXc1 => "quad_3h3p_xc1",
            Quad3h3pXc2A => "quad_3h3p_xc2_a",
            Quad3h3pXc2B => "quad_3h3p_xc2_b",
            Quad3h3pXc2C => "quad_3h3p_xc2_c",
            Quad3h3pXc3 => "quad_3h3p_xc3",
            EnergyDirect => "energy_direct",
            EnergyExchange => "energy_exchange",
        }
    }

    /// Diagram in capital-label notation.
    pub fn formula(&self) -> &'static str {
        use TermId::*;
        match self {
            Constant => "<AB|IJ>",
            Lin4h2p => "<KL|IJ> t_KL^AB",
            Lin2h4p => "<AB|CD> t_IJ^CD",
            Lin3h3pRing => "<AK|IC> t_KJ^CB",
            Lin3h3pXc1 => "<AK|CI> t_KJ^CB",
            Lin3h3pXc2 => "<AK|IC> t_KJ^BC",
            Lin3h3pXc3 => "<AK|CJ> t_KI^BC",
            QuadKappaVvDirect => "<KL|CD> t_KL^AD t_IJ^CB",
            QuadKappaVvExchange => "<KL|DC> t_KL^AD t_IJ^CB",
            QuadKappaOoDirect => "<KL|CD> t_IL^CD t_KJ^AB",
            QuadKappaOoExchange => "<KL|DC> t_IL^CD t_KJ^AB",
            Quad4h2p => "<KL|CD> t_IJ^CD t_KL^AB",
            Quad3h3pSuper => "<LK|DC> t_IL^AD t_KJ^CB",
            Quad3h3pRingB => "<LK|CD> t_IL^AD t_KJ^CB",
            Quad3h3pRingC => "<LK|DC> t_IL^DA t_KJ^CB",
            Quad3h3pXc1 => "<LK|CD> t_IL^DA t_KJ^CB",
            Quad3h3pXc2A => "<LK|DC> t_IL^AD t_KJ^BC",
            Quad3h3pXc2B => "<LK|CD> t_IL^AD t_KJ^BC",
            Quad3h3pXc2C => "<LK|DC> t_IL^DA t_KJ^BC",
            Quad3h3pXc3 => "<LK|CD> t_JL^DA t_KI^BC",
            EnergyDirect => "<IJ|AB> t_IJ^AB",
            EnergyExchange => "<IJ|BA> t_IJ^AB",
        }
    }

    /// Prefactor with which the term enters the map (or, for the energy
    /// pieces, E = 2·direct − exchange).
    pub fn coefficient(&self) -> f64 {
        use TermId::*;
        match self {
            Constant | Lin4h2p | Lin2h4p | Quad4h2p => 1.0,
            Lin3h3pRing => 2.0,
            Lin3h3pXc1 | Lin3h3pXc2 | Lin3h3pXc3 => -1.0,
            QuadKappaVvDirect | QuadKappaOoDirect => -2.0,
            QuadKappaVvExchange | QuadKappaOoExchange => 1.0,
            Quad3h3pSuper => 2.0,
            Quad3h3pRingB | Quad3h3pRingC | Quad3h3pXc2A => -1.0,
            Quad3h3pXc1 | Quad3h3pXc2B | Quad3h3pXc2C | Quad3h3pXc3 => 0.5,
            EnergyDirect => 2.0,
            EnergyExchange => -1.0,
        }
    }

    /// Whether the permutation operator adds the (I,A)↔(J,B) partner.
    pub fn permuted(&self) -> bool {
        use TermId::*;
        !matches!(self, Constant | Lin4h2p | Lin2h4p | Quad4h2p | EnergyDirect | EnergyExchange)
    }

    /// Polynomial degree in the amplitude (0 constant, 1 linear, 2 quadratic).
    pub fn degree(&self) -> usize {
        use TermId::*;
        match self {
            Constant => 0,
            Lin4h2p | Lin2h4p | Lin3h3pRing | Lin3h3pXc1 | Lin3h3pXc2 | Lin3h3pXc3 => 1,
            EnergyDirect | EnergyExchange => 1,
            _ => 2,
        }
    }

    pub fn is_energy(&self) -> bool {
        matches!(self, TermId::EnergyDirect | TermId::EnergyExchange)
    }

    /// Number of independent internal mesh sums.
    pub fn internal_sums(&self) -> usize {
        if self.is_energy() {
            3
        } else {
            self.degree()
        }
    }
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TermId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TermId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown term '{s}'")))
    }
}

struct Eval<'a> {
    sys: &'a ModelSystem,
    src: &'a dyn AmplitudeSource,
}

impl Eval<'_> {
    fn v(&self, p: (usize, &KPoint), q: (usize, &KPoint), r: (usize, &KPoint), s: (usize, &KPoint)) -> Result<C64> {
        self.sys.eri(p, q, r, s)
    }

    fn t(&self, i: usize, j: usize, a: usize, b: usize, ki: &KPoint, kj: &KPoint, ka: &KPoint) -> Result<C64> {
        self.src.amplitude(self.sys, Quad::new(i, j, a, b), ki, kj, ka)
    }
}

fn mesh_sum<F>(mesh: &MonkhorstPackMesh, f: F) -> Result<C64>
where
    F: Fn(&KPoint) -> Result<C64> + Sync,
{
    let parts: Vec<C64> = mesh.points().par_iter().map(|k| f(k)).collect::<Result<_>>()?;
    Ok(pairwise_sum(&parts) / mesh.n_k() as f64)
}

fn mesh_sum2<F>(mesh: &MonkhorstPackMesh, f: F) -> Result<C64>
where
    F: Fn(&KPoint, &KPoint) -> Result<C64> + Sync,
{
    let n = mesh.n_k();
    let parts: Vec<C64> = (0..n * n)
        .into_par_iter()
        .map(|x| f(mesh.point(x / n), mesh.point(x % n)))
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&parts) / (n as f64 * n as f64))
}

/// Value of one diagram at external labels `q` and momenta (k_i, k_j, k_a),
/// including 1/ε and the 1/N_k per internal sum but not the coefficient. The
/// energy pieces ignore the external arguments and average over all mesh
/// triples.
#[allow(clippy::too_many_arguments)]
pub fn term_evaluate(
    sys: &ModelSystem,
    term: TermId,
    src: &dyn AmplitudeSource,
    q: Quad,
    ki: &KPoint,
    kj: &KPoint,
    ka: &KPoint,
    mesh: &MonkhorstPackMesh,
) -> Result<C64> {
    use TermId::*;
    let (no, nv) = (sys.n_occ(), sys.n_vir());
    let occ = 0..no;
    let vir = no..no + nv;
    let ev = Eval { sys, src };
    if term.is_energy() {
        let n = mesh.n_k();
        let parts: Vec<C64> = (0..n * n * n)
            .into_par_iter()
            .map(|x| -> Result<C64> {
                let (ki, kj, ka) = (mesh.point(x / (n * n)), mesh.point((x / n) % n), mesh.point(x % n));
                let kb = implied_kb(ki, kj, ka);
                let mut s = C64::new(0.0, 0.0);
                for i in occ.clone() {
                    for j in occ.clone() {
                        for a in vir.clone() {
                            for b in vir.clone() {
                                let v = if term == EnergyDirect {
                                    ev.v((i, ki), (j, kj), (a, ka), (b, &kb))?
                                } else {
                                    ev.v((i, ki), (j, kj), (b, &kb), (a, ka))?
                                };
                                s += v * ev.t(i, j, a, b, ki, kj, ka)?;
                            }
                        }
                    }
                }
                Ok(s)
            })
            .collect::<Result<_>>()?;
        return Ok(pairwise_sum(&parts) / (n as f64).powi(3));
    }

    q.validate(no, nv)?;
    let (i, j, a, b) = (q.i, q.j, q.a, q.b);
    let kb = implied_kb(ki, kj, ka);
    let eps = super::denominator(sys, q, ki, kj, ka)?;
    let value = match term {
        Constant => ev.v((a, ka), (b, &kb), (i, ki), (j, kj))?,
        Lin4h2p => mesh_sum(mesh, |kk| {
            let kl = ki.add(kj).sub(kk);
            let mut s = C64::new(0.0, 0.0);
            for k in occ.clone() {
                for l in occ.clone() {
                    s += ev.v((k, kk), (l, &kl), (i, ki), (j, kj))? * ev.t(k, l, a, b, kk, &kl, ka)?;
                }
            }
            Ok(s)
        })?,
        Lin2h4p => mesh_sum(mesh, |kc| {
            let kd = ki.add(kj).sub(kc);
            let mut s = C64::new(0.0, 0.0);
            for c in vir.clone() {
                for d in vir.clone() {
                    s += ev.v((a, ka), (b, &kb), (c, kc), (d, &kd))? * ev.t(i, j, c, d, ki, kj, kc)?;
                }
            }
            Ok(s)
        })?,
        Lin3h3pRing | Lin3h3pXc1 | Lin3h3pXc2 => mesh_sum(mesh, |kk| {
            let kc = ka.add(kk).sub(ki);
            let mut s = C64::new(0.0, 0.0);
            for k in occ.clone() {
                for c in vir.clone() {
                    s += match term {
                        Lin3h3pRing => ev.v((a, ka), (k, kk), (i, ki), (c, &kc))? * ev.t(k, j, c, b, kk, kj, &kc)?,
                        Lin3h3pXc1 => ev.v((a, ka), (k, kk), (c, &kc), (i, ki))? * ev.t(k, j, c, b, kk, kj, &kc)?,
                        _ => ev.v((a, ka), (k, kk), (i, ki), (c, &kc))? * ev.t(k, j, b, c, kk, kj, &kb)?,
                    };
                }
            }
            Ok(s)
        })?,
        Lin3h3pXc3 => mesh_sum(mesh, |kk| {
            let kc = ka.add(kk).sub(kj);
            let mut s = C64::new(0.0, 0.0);
            for k in occ.clone() {
                for c in vir.clone() {
                    s += ev.v((a, ka), (k, kk), (c, &kc), (j, kj))? * ev.t(k, i, b, c, kk, ki, &kb)?;
                }
            }
            Ok(s)
        })?,
        QuadKappaVvDirect | QuadKappaVvExchange => mesh_sum2(mesh, |kk, kl| {
            let kc = ka;
            let kd = kk.add(kl).sub(ka);
            let mut s = C64::new(0.0, 0.0);
            for c in vir.clone() {
                let outer = ev.t(i, j, c, b, ki, kj, ka)?;
                for k in occ.clone() {
                    for l in occ.clone() {
                        for d in vir.clone() {
                            let v = if term == QuadKappaVvDirect {
                                ev.v((k, kk), (l, kl), (c, kc), (d, &kd))?
                            } else {
                                ev.v((k, kk), (l, kl), (d, &kd), (c, kc))?
                            };
                            s += v * ev.t(k, l, a, d, kk, kl, ka)? * outer;
                        }
                    }
                }
            }
            Ok(s)
        })?,
        QuadKappaOoDirect | QuadKappaOoExchange => mesh_sum2(mesh, |kl, kc| {
            let kk = ki;
            let kd = ki.add(kl).sub(kc);
            let mut s = C64::new(0.0, 0.0);
            for k in occ.clone() {
                let outer = ev.t(k, j, a, b, kk, kj, ka)?;
                for l in occ.clone() {
                    for c in vir.clone() {
                        for d in vir.clone() {
                            let v = if term == QuadKappaOoDirect {
                                ev.v((k, kk), (l, kl), (c, kc), (d, &kd))?
                            } else {
                                ev.v((k, kk), (l, kl), (d, &kd), (c, kc))?
                            };
                            s += v * ev.t(i, l, c, d, ki, kl, kc)? * outer;
                        }
                    }
                }
            }
            Ok(s)
        })?,
        Quad4h2p => mesh_sum2(mesh, |kk, kc| {
            let kl = ki.add(kj).sub(kk);
            let kd = ki.add(kj).sub(kc);
            let mut s = C64::new(0.0, 0.0);
            for k in occ.clone() {
                for l in occ.clone() {
                    let t_kl = ev.t(k, l, a, b, kk, &kl, ka)?;
                    for c in vir.clone() {
                        for d in vir.clone() {
                            s += ev.v((k, kk), (l, &kl), (c, kc), (d, &kd))? * ev.t(i, j, c, d, ki, kj, kc)? * t_kl;
                        }
                    }
                }
            }
            Ok(s)
        })?,
        Quad3h3pSuper | Quad3h3pRingB | Quad3h3pRingC | Quad3h3pXc1 | Quad3h3pXc2A | Quad3h3pXc2B
        | Quad3h3pXc2C => mesh_sum2(mesh, |kk, kl| {
            let kc = ka.add(kk).sub(ki);
            let kd = ki.add(kl).sub(ka);
            let mut s = C64::new(0.0, 0.0);
            for k in occ.clone() {
                for c in vir.clone() {
                    let right = match term {
                        Quad3h3pSuper | Quad3h3pRingB | Quad3h3pRingC | Quad3h3pXc1 => ev.t(k, j, c, b, kk, kj, &kc)?,
                        _ => ev.t(k, j, b, c, kk, kj, &kb)?,
                    };
                    for l in occ.clone() {
                        for d in vir.clone() {
                            let dc = matches!(term, Quad3h3pSuper | Quad3h3pRingC | Quad3h3pXc2A | Quad3h3pXc2C);
                            let v = if dc {
                                ev.v((l, kl), (k, kk), (d, &kd), (c, &kc))?
                            } else {
                                ev.v((l, kl), (k, kk), (c, &kc), (d, &kd))?
                            };
                            let left = match term {
                                Quad3h3pSuper | Quad3h3pRingB | Quad3h3pXc2A | Quad3h3pXc2B => {
                                    ev.t(i, l, a, d, ki, kl, ka)?
                                }
                                _ => ev.t(i, l, d, a, ki, kl, &kd)?,
                            };
                            s += v * left * right;
                        }
                    }
                }
            }
            Ok(s)
        })?,
        Quad3h3pXc3 => mesh_sum2(mesh, |kk, kl| {
            let kc = ka.add(kk).sub(kj);
            let kd = kj.add(kl).sub(ka);
            let mut s = C64::new(0.0, 0.0);
            for k in occ.clone() {
                for c in vir.clone() {
                    let right = ev.t(k, i, b, c, kk, ki, &kb)?;
                    for l in occ.clone() {
                        for d in vir.clone() {
                            s += ev.v((l, kl), (k, kk), (c, &kc), (d, &kd))? * ev.t(j, l, d, a, kj, kl, &kd)? * right;
                        }
                    }
                }
            }
            Ok(s)
        })?,
        EnergyDirect | EnergyExchange => unreachable!("handled above"),
    };
    Ok(value / eps)
}

/// Σ coefficient × (term + permuted partner) over the amplitude catalog,
/// optionally restricted to degree ≤ 1.
#[allow(clippy::too_many_arguments)]
pub fn amplitude_from_terms(
    sys: &ModelSystem,
    src: &dyn AmplitudeSource,
    q: Quad,
    ki: &KPoint,
    kj: &KPoint,
    ka: &KPoint,
    mesh: &MonkhorstPackMesh,
    quadratic: bool,
) -> Result<C64> {
    let kb = implied_kb(ki, kj, ka);
    let mut parts = Vec::new();
    for term in TermId::amplitude_terms() {
        if !quadratic && term.degree() == 2 {
            continue;
        }
        let mut v = term_evaluate(sys, term, src, q, ki, kj, ka, mesh)?;
        if term.permuted() {
            v += term_evaluate(sys, term, src, q.swapped(), kj, ki, &kb, mesh)?;
        }
        parts.push(v * term.coefficient());
    }
    Ok(pairwise_sum(&parts))
}

/// The MP3 amplitude: constant plus every linear term with the MP2 amplitude
/// inserted, internal sums over `mesh`.
pub fn mp3_amplitude(
    sys: &ModelSystem,
    mesh: &MonkhorstPackMesh,
    q: Quad,
    ki: &KPoint,
    kj: &KPoint,
    ka: &KPoint,
) -> Result<C64> {
    amplitude_from_terms(sys, &super::ExactAmplitude::Mp2, q, ki, kj, ka, mesh, false)
}
