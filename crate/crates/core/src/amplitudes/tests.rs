use super::*;
use crate::lattice::MeshScheme;
use crate::meanfield::SystemParams;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BUDGET: u64 = 1 << 30;

fn system(n_pw: usize, n_occ: usize, n_vir: usize) -> ModelSystem {
    let mut p = SystemParams::default();
    p.n_pw = n_pw;
    p.n_occ = n_occ;
    p.n_vir = n_vir;
    ModelSystem::new(p).unwrap()
}

fn mesh(sys: &ModelSystem, m: usize) -> MonkhorstPackMesh {
    MonkhorstPackMesh::new(sys.cell(), m, MeshScheme::GammaCentered).unwrap()
}

fn random_tensor(ctx: &CcdContext, seed: u64, scale: f64) -> AmplitudeTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = ctx.zeros().unwrap();
    for v in t.data_mut() {
        *v = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
    }
    t
}

fn rel(a: C64, b: C64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

/// Every (k_i, k_j, k_a, quad) entry of a mesh, flattened.
fn entries(sys: &ModelSystem, mesh: &MonkhorstPackMesh) -> Vec<(usize, usize, usize, Quad)> {
    let (no, nv) = (sys.n_occ(), sys.n_vir());
    let n = mesh.n_k();
    let mut out = Vec::new();
    for ki in 0..n {
        for kj in 0..n {
            for ka in 0..n {
                for i in 0..no {
                    for j in 0..no {
                        for a in no..no + nv {
                            for b in no..no + nv {
                                out.push((ki, kj, ka, Quad::new(i, j, a, b)));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn mp2_is_lattice_periodic() {
    let sys = system(6, 1, 1);
    let q = Quad::new(0, 0, 1, 1);
    let ki = KPoint::from_ints([1, 0, 2], 3);
    let kj = KPoint::from_ints([2, 1, 0], 3);
    let ka = KPoint::from_ints([0, 2, 2], 3);
    let base = mp2_amplitude(&sys, q, &ki, &kj, &ka).unwrap();
    for g in [[1, 0, 0], [0, -1, 2], [-1, 1, 1]] {
        assert_eq!(mp2_amplitude(&sys, q, &ki.shift(g), &kj, &ka).unwrap(), base);
        assert_eq!(mp2_amplitude(&sys, q, &ki, &kj.shift(g), &ka).unwrap(), base);
        assert_eq!(mp2_amplitude(&sys, q, &ki, &kj, &ka.shift(g)).unwrap(), base);
    }
}

#[test]
fn labels_are_validated() {
    let sys = system(6, 1, 1);
    let g = KPoint::gamma();
    assert!(mp2_amplitude(&sys, Quad::new(1, 0, 1, 1), &g, &g, &g).is_err());
    assert!(mp2_amplitude(&sys, Quad::new(0, 0, 1, 2), &g, &g, &g).is_err());
}

#[test]
fn tensor_budget_is_enforced() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 4);
    let err = AmplitudeTensor::zeros(&m, 1, 1, 1000).unwrap_err();
    assert!(matches!(err, Error::Budget { .. }));
    assert!(CcdContext::new(&sys, &m, 1000).is_err());
}

#[test]
fn sampling_on_single_point_mesh() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 1);
    let t = sample_on_mesh(&sys, &ExactAmplitude::Mp2, &m, BUDGET).unwrap();
    let g = KPoint::gamma();
    assert_eq!(t.data().len(), 1);
    assert_eq!(t.data()[0], mp2_amplitude(&sys, Quad::new(0, 0, 1, 1), &g, &g, &g).unwrap());
}

#[test]
fn first_iterate_is_sampled_mp2() {
    let sys = system(6, 2, 2);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let t1 = ccd_map(&ctx, &ctx.zeros().unwrap(), MapParts::FULL).unwrap();
    let mp2 = sample_on_mesh(&sys, &ExactAmplitude::Mp2, &m, BUDGET).unwrap();
    assert_eq!(t1.data(), mp2.data());
    let sol = ccd_solve(&ctx, 1).unwrap();
    assert_eq!(sol.amplitudes.data(), mp2.data());
}

#[test]
fn second_linear_iterate_is_mp3() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let mp2 = sample_on_mesh(&sys, &ExactAmplitude::Mp2, &m, BUDGET).unwrap();
    let t2 = ccd_map(&ctx, &mp2, MapParts::LINEAR).unwrap();
    for (ki, kj, ka, q) in entries(&sys, &m) {
        let want = mp3_amplitude(&sys, &m, q, m.point(ki), m.point(kj), m.point(ka)).unwrap();
        let got = t2.get(q, ki, kj, ka);
        assert!(rel(got, want) < 1e-10, "entry {ki} {kj} {ka}: {got} vs {want}");
    }
}

/// One hole and one particle at Γ only: every intermediate collapses to a
/// scalar that can be written out by hand.
#[test]
fn single_point_scalar_oracle() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 1);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let g = KPoint::gamma();
    let v = |p: usize, q: usize, r: usize, s: usize| sys.eri((p, &g), (q, &g), (r, &g), (s, &g)).unwrap();
    let bands = sys.solve_at_k(&g).unwrap();
    let eps = 2.0 * (bands.energies[0] - bands.energies[1]);
    let t0 = C64::new(0.013, -0.004);
    let mut t = ctx.zeros().unwrap();
    t.data_mut()[0] = t0;

    let w = v(0, 0, 1, 1);
    let im = build_intermediates(&ctx, &t, MapParts::FULL).unwrap();
    let kvv = -w * t0;
    let koo = w * t0;
    let oooo = v(0, 0, 0, 0) + w * t0;
    let ovvo = v(1, 0, 0, 1);
    let voov = v(1, 0, 1, 0) - w * t0 * 0.5;
    assert!(rel(im.kappa_vv(0, 0, 0), kvv) < 1e-13);
    assert!(rel(im.kappa_oo(0, 0, 0), koo) < 1e-13);
    assert!(rel(im.chi_oooo(0, 0, 0, 0, 0, 0, 0), oooo) < 1e-13);
    assert!(rel(im.chi_ovvo(0, 0, 0, 0, 0, 0, 0), ovvo) < 1e-13);
    assert!(rel(im.chi_voov(0, 0, 0, 0, 0, 0, 0), voov) < 1e-13);

    let x = (kvv - koo) * t0 + (ovvo * 2.0 - voov) * t0 - ovvo * t0 - voov * t0;
    let r = (v(1, 1, 0, 0) + x * 2.0 + oooo * t0 + v(1, 1, 1, 1) * t0) / eps;
    let got = ccd_map(&ctx, &t, MapParts::FULL).unwrap().data()[0];
    assert!(rel(got, r) < 1e-12, "{got} vs {r}");

    let e = energy(&ctx, &t).unwrap();
    assert!(rel(e, w * t0) < 1e-13);
}

fn check_terms_against_map(sys: &ModelSystem, m: &MonkhorstPackMesh, ctx: &CcdContext, t: &AmplitudeTensor, picks: &[usize]) {
    let full = ccd_map(ctx, t, MapParts::FULL).unwrap();
    let all = entries(sys, m);
    for &p in picks {
        let (ki, kj, ka, q) = all[p % all.len()];
        let want = full.get(q, ki, kj, ka);
        let got = amplitude_from_terms(sys, t, q, m.point(ki), m.point(kj), m.point(ka), m, true).unwrap();
        assert!(rel(got, want) < 1e-10, "entry {p}: {got} vs {want}");
    }
}

#[test]
fn term_catalog_reproduces_map_at_mp2() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let mp2 = sample_on_mesh(&sys, &ExactAmplitude::Mp2, &m, BUDGET).unwrap();
    check_terms_against_map(&sys, &m, &ctx, &mp2, &[0, 5, 77, 130, 301, 511]);
}

#[test]
fn term_catalog_reproduces_map_at_random_amplitudes() {
    let sys = system(6, 2, 2);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let t = random_tensor(&ctx, 11, 0.05);
    check_terms_against_map(&sys, &m, &ctx, &t, &[3, 1000, 2047, 4095, 6000, 8191]);
}

#[test]
fn zero_amplitudes_kill_every_nonconstant_term() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let z = ctx.zeros().unwrap();
    let (ki, kj, ka) = (m.point(1), m.point(2), m.point(5));
    let q = Quad::new(0, 0, 1, 1);
    for term in TermId::ALL {
        let v = term_evaluate(&sys, term, &z, q, ki, kj, ka, &m).unwrap();
        if term == TermId::Constant {
            assert!(v.norm() > 0.0);
        } else {
            assert_eq!(v, C64::new(0.0, 0.0), "{term}");
        }
    }
    assert_eq!(energy(&ctx, &z).unwrap(), C64::new(0.0, 0.0));
}

#[test]
fn fast_paths_match_generic_loops() {
    let sys = system(6, 1, 1);
    for mm in [2, 3] {
        let m = mesh(&sys, mm);
        let q = Quad::new(0, 0, 1, 1);
        let n = m.n_k();
        let (ki, kj, ka) = (m.point(1 % n), m.point(n - 1), m.point(n / 2));
        let src = ExactAmplitude::Mp2;
        for term in [TermId::Quad3h3pSuper, TermId::Quad4h2p, TermId::EnergyDirect] {
            let slow = term_evaluate(&sys, term, &src, q, ki, kj, ka, &m).unwrap();
            let fast = term_evaluate_fast(&sys, term, src, q, ki, kj, ka, &m).unwrap();
            assert!(rel(fast, slow) < 1e-10, "{term} m={mm}: {fast} vs {slow}");
        }
        // unfolded external momenta are folded consistently
        let ki2 = ki.shift([1, 0, -1]);
        let a = quad_4h2p_by_transfer(&sys, &src, q, &ki2, kj, ka, &m).unwrap();
        let b = term_evaluate(&sys, TermId::Quad4h2p, &src, q, ki, kj, ka, &m).unwrap();
        assert!(rel(a, b) < 1e-10);
    }
}

#[test]
fn fast_paths_accept_tensor_amplitudes_and_offset_meshes() {
    let sys = system(6, 2, 1);
    let m = MonkhorstPackMesh::new(sys.cell(), 2, MeshScheme::MpOffset).unwrap();
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let t = random_tensor(&ctx, 5, 0.1);
    let q = Quad::new(1, 0, 2, 2);
    let (ki, kj, ka) = (m.point(0), m.point(3), m.point(6));
    let slow = term_evaluate(&sys, TermId::Quad3h3pSuper, &t, q, ki, kj, ka, &m).unwrap();
    let fast = quad_3h3p_super_separable(&sys, &t, q, ki, kj, ka, &m).unwrap();
    assert!(rel(fast, slow) < 1e-10);
    let slow = term_evaluate(&sys, TermId::Quad4h2p, &t, q, ki, kj, ka, &m).unwrap();
    let fast = quad_4h2p_by_transfer(&sys, &t, q, ki, kj, ka, &m).unwrap();
    assert!(rel(fast, slow) < 1e-10);
}

#[test]
fn energy_matches_term_loops() {
    let sys = system(6, 2, 1);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let t = random_tensor(&ctx, 3, 0.1);
    let g = KPoint::gamma();
    let q = Quad::new(0, 0, 2, 2);
    let d = term_evaluate(&sys, TermId::EnergyDirect, &t, q, &g, &g, &g, &m).unwrap();
    let x = term_evaluate(&sys, TermId::EnergyExchange, &t, q, &g, &g, &g, &m).unwrap();
    assert!(rel(energy(&ctx, &t).unwrap(), d * 2.0 - x) < 1e-12);
}

#[test]
fn mp2_energy_is_real_and_negative() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let t = ccd_solve(&ctx, 1).unwrap().amplitudes;
    let e = energy(&ctx, &t).unwrap();
    assert!(e.re < 0.0);
    assert!(e.im.abs() < 1e-10 * e.re.abs());
}

#[test]
fn linear_map_is_affine() {
    let sys = system(6, 1, 2);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let (t1, t2) = (random_tensor(&ctx, 1, 0.1), random_tensor(&ctx, 2, 0.1));
    let (al, be) = (C64::new(0.7, -0.2), C64::new(-1.3, 0.4));
    let mut comb = t1.scaled(al);
    for (c, v) in comb.data_mut().iter_mut().zip(t2.data()) {
        *c += be * v;
    }
    let l = |t: &AmplitudeTensor| ccd_map(&ctx, t, MapParts::LINEAR).unwrap();
    let (l0, l1, l2, lc) = (l(&ctx.zeros().unwrap()), l(&t1), l(&t2), l(&comb));
    let scale = l1.max_abs().max(l2.max_abs());
    for p in 0..lc.data().len() {
        let want = l0.data()[p] + al * (l1.data()[p] - l0.data()[p]) + be * (l2.data()[p] - l0.data()[p]);
        assert!((lc.data()[p] - want).norm() < 1e-12 * scale);
    }
}

#[test]
fn iteration_recursion_is_exact() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let s3 = ccd_solve(&ctx, 3).unwrap();
    let s4 = ccd_solve(&ctx, 4).unwrap();
    let next = ccd_map(&ctx, &s3.amplitudes, MapParts::FULL).unwrap();
    assert_eq!(next.data(), s4.amplitudes.data());
    assert_eq!(s3.history[..], s4.history[..3]);
    assert!(ccd_solve(&ctx, 0).is_err());
}

#[test]
fn iteration_contracts_on_small_mesh() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let s = ccd_solve(&ctx, 6).unwrap();
    for w in s.history.windows(2) {
        assert!(w[1] < w[0], "{:?}", s.history);
    }
}

#[test]
fn map_preserves_pair_exchange_symmetry() {
    let sys = system(6, 2, 2);
    let m = mesh(&sys, 2);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let mut t = random_tensor(&ctx, 9, 0.05);
    for (ki, kj, ka, q) in entries(&sys, &m) {
        let kb = m.combine(ki, kj, ka);
        let v = t.get(q, ki, kj, ka);
        t.set(q.swapped(), kj, ki, kb, v);
    }
    let r = ccd_map(&ctx, &t, MapParts::FULL).unwrap();
    for (ki, kj, ka, q) in entries(&sys, &m) {
        let kb = m.combine(ki, kj, ka);
        assert!(rel(r.get(q, ki, kj, ka), r.get(q.swapped(), kj, ki, kb)) < 1e-12);
    }
}

#[test]
fn term_names_round_trip() {
    for t in TermId::ALL {
        assert_eq!(t.name().parse::<TermId>().unwrap(), t);
        assert!(!t.formula().is_empty());
    }
    assert!("nonsense".parse::<TermId>().is_err());
    assert_eq!(TermId::amplitude_terms().count(), 20);
}

fn lipschitz_ratio(ctx: &CcdContext, seed: u64, radius: f64) -> f64 {
    let t1 = random_tensor(ctx, seed, radius);
    let t2 = random_tensor(ctx, seed ^ 0x9e37_79b9, radius);
    let f1 = ccd_map(ctx, &t1, MapParts::FULL).unwrap();
    let f2 = ccd_map(ctx, &t2, MapParts::FULL).unwrap();
    f1.max_abs_diff(&f2) / t1.max_abs_diff(&t2)
}

/// ‖F(T₁) − F(T₂)‖ ≤ Ĉ ‖T₁ − T₂‖ on a ball, with Ĉ fixed from calibration
/// seeds disjoint from the property seeds.
#[test]
fn map_is_lipschitz_on_a_ball() {
    let sys = system(6, 1, 1);
    let m = mesh(&sys, 1);
    let ctx = CcdContext::new(&sys, &m, BUDGET).unwrap();
    let radius = 0.05;
    let c_hat = (0..8).map(|s| lipschitz_ratio(&ctx, 1000 + s, radius)).fold(0.0, f64::max) * 2.0;
    assert!(c_hat.is_finite() && c_hat > 0.0);
    proptest!(ProptestConfig::with_cases(32), |(seed in 0u64..1000)| {
        prop_assert!(lipschitz_ratio(&ctx, seed, radius) <= c_hat);
    });
}
