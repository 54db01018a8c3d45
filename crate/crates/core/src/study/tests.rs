use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pts(ns: &[f64], f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
    ns.iter().map(|&n| (n, f(n))).collect()
}

fn small_config(dir: &Path) -> StudyConfig {
    let mut system = SystemParams::default();
    system.n_pw = 6;
    StudyConfig {
        system,
        quantities: vec![
            QuantitySpec {
                selector: Selector::Term(TermId::Lin4h2p),
                meshes: None,
                fit_meshes: None,
                validation_meshes: None,
            },
            QuantitySpec {
                selector: Selector::CcdEnergy(2),
                meshes: Some(vec![1, 2, 3]),
                fit_meshes: Some([1, 2, 3]),
                validation_meshes: Some(vec![]),
            },
        ],
        meshes: vec![1, 2, 3, 4, 5],
        fit_meshes: [1, 2, 3],
        validation_meshes: vec![4, 5],
        out: dir.to_path_buf(),
        threads: 1,
        ..StudyConfig::default()
    }
}

#[test]
fn selectors_round_trip() {
    for s in ["lin_4h2p", "energy_direct", "ccd3_energy", "ccd1_amplitude", "mp3_amplitude"] {
        assert_eq!(s.parse::<Selector>().unwrap().to_string(), s);
    }
    for s in ["ccd0_energy", "ccdx_energy", "nonsense"] {
        assert!(s.parse::<Selector>().is_err(), "{s}");
    }
}

#[test]
fn config_parsing_and_validation() {
    let cfg = StudyConfig::from_json(r#"{"quantities": [{"selector": "lin_4h2p"}], "labels": {"bands": [0,0,1,1], "ki": [0,0,0], "kj": ["0","0","0"], "ka": [0, 0, "1/2"]}}"#).unwrap();
    assert_eq!(cfg.labels, ExternalLabels::default());
    assert_eq!(cfg.labels.momenta().2, KPoint::from_ints([0, 0, 1], 2));
    let floats = StudyConfig::from_json(r#"{"labels": {"bands": [0,0,1,1], "ki": [0,0,0], "kj": [0,0,0], "ka": [0, 0.3333333333333333, 0.5]}}"#).unwrap();
    assert_eq!(floats.labels.ka[1].0, Frac::new(1, 3));
    let err = |text: &str| match StudyConfig::from_json(text) {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    };
    assert!(err(r#"{"bogus": 1}"#).contains("bogus"));
    assert!(err("{\n  \"meshes\": [1,\n").contains("line"));
    err(r#"{"quantities": [{"selector": "lin_4h2p", "fit_meshes": [6, 8, 9]}]}"#);
    err(r#"{"quantities": [{"selector": "lin_4h2p", "validation_meshes": [8]}]}"#);
    err(r#"{"quantities": [{"selector": "lin_4h2p"}, {"selector": "lin_4h2p"}]}"#);
    err(r#"{"labels": {"bands": [0,1,1,1], "ki": [0,0,0], "kj": [0,0,0], "ka": [0,0,0]}}"#);
    err(r#"{"version": 7}"#);
    // shipped presets are valid and survive a JSON round trip
    let f = fig2_config();
    f.validate().unwrap();
    let back = StudyConfig::from_json(&serde_json::to_string(&f).unwrap()).unwrap();
    assert_eq!(back, f);
    assert_eq!(back.hash(), f.hash());
}

#[test]
fn exact_power_laws_are_recovered() {
    let fit = fit_power_law(&pts(&[125.0, 216.0, 343.0], |n| 2.0 + 3.0 / n)).unwrap();
    assert!((fit.s - 1.0).abs() < 1e-10 && (fit.c0 - 2.0).abs() < 1e-10 && (fit.c1 - 3.0).abs() < 1e-10);
    assert!(fit.reliable());
    let fit = fit_power_law(&pts(&[216.0, 512.0, 1000.0], |n| 2.0 + 3.0 * n.powf(-1.0 / 3.0))).unwrap();
    assert!((fit.s - 1.0 / 3.0).abs() < 1e-10);
    let fit = fit_power_law_fixed(&pts(&[216.0, 512.0, 1000.0], |n| -1.0 + 0.5 / n), 1.0).unwrap();
    assert!((fit.c0 + 1.0).abs() < 1e-12 && (fit.c1 - 0.5).abs() < 1e-10);
}

#[test]
fn degenerate_series_are_flagged() {
    let fit = fit_power_law(&pts(&[125.0, 216.0, 343.0], |_| 4.5)).unwrap();
    assert_eq!(fit.c0, 4.5);
    assert!(fit.flags.contains(&FitFlag::NoPowerLaw));
    assert!(fit.s.is_finite());
    let fit = fit_power_law(&[(125.0, 1.0), (216.0, 0.5), (343.0, 0.9)]).unwrap();
    assert!(fit.flags.contains(&FitFlag::NonMonotone));
    // decays faster than any exponent in range
    let fit = fit_power_law(&pts(&[1.0, 2.0, 3.0], |n| 1.0 + 1e3 * (-5.0 * n).exp())).unwrap();
    assert!(fit.flags.contains(&FitFlag::NoPowerLaw));
    assert!(fit_power_law(&[(1.0, 1.0), (1.0, 2.0), (2.0, 3.0)]).is_err());
    assert!(fit_power_law(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
}

#[test]
fn validation_verdicts() {
    let ns = [216.0, 512.0, 1000.0];
    let later = [1728.0, 2744.0, 4096.0];
    let law = |n: f64| 2.0 + 3.0 / n;
    let v = validate_fit(&fit_power_law(&pts(&ns, law)).unwrap(), &pts(&later, law));
    assert!(matches!(v.verdict, Verdict::MatchesPowerLaw { s } if (s - 1.0).abs() < 1e-9));
    assert_eq!(v.fit.residuals.len(), 6);
    assert!(v.discrepancies.iter().all(|d| d.discrepancy < 1e-12));

    let fast = |n: f64| 1.0 + (-n.cbrt()).exp();
    for s in [1.0, 1.0 / 3.0] {
        let v = validate_fit(&fit_power_law_fixed(&pts(&ns, fast), s).unwrap(), &pts(&later, fast));
        assert!(matches!(v.verdict, Verdict::FasterThan { .. }), "s={s}: {:?}", v.verdict);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut noisy = |n: f64| law(n) * (1.0 + 0.1 * rng.random_range(-1.0..1.0));
    let fit_pts: Vec<(f64, f64)> = ns.iter().map(|&n| (n, noisy(n))).collect();
    let val_pts: Vec<(f64, f64)> = later.iter().map(|&n| (n, noisy(n))).collect();
    let fit = fit_power_law(&fit_pts).unwrap();
    assert_eq!(validate_fit(&fit, &val_pts).verdict, Verdict::Unreliable);

    // too few validation points
    let v = validate_fit(&fit_power_law(&pts(&ns, law)).unwrap(), &pts(&later[..1], law));
    assert_eq!(v.verdict, Verdict::Unreliable);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn three_point_fit_inverts_the_model(c0 in -5.0f64..5.0, c1 in 0.1f64..10.0, s in 0.1f64..3.0, neg in any::<bool>()) {
        let c1 = if neg { -c1 } else { c1 };
        let p = pts(&[216.0, 512.0, 1000.0], |n| c0 + c1 * n.powf(-s));
        let fit = fit_power_law(&p).unwrap();
        prop_assert!((fit.s - s).abs() < 1e-6 * s.max(1.0));
        prop_assert!((fit.c0 - c0).abs() < 1e-6 * (1.0 + c0.abs() + c1.abs()));
        for r in &fit.residuals {
            prop_assert!(r[1].abs() < 1e-9 * (1.0 + c0.abs()));
        }
    }
}

#[test]
fn g17_matches_printf() {
    let cases = [
        (0.1, "0.10000000000000001"),
        (1e-5, "1.0000000000000001e-05"),
        (100.0, "100"),
        (1.0 / 3.0, "0.33333333333333331"),
        (-2.5e20, "-2.5e+20"),
        (0.0, "0"),
        (123456789.0, "123456789"),
        (1e16, "10000000000000000"),
        (1e17, "1e+17"),
        (0.0001, "0.0001"),
    ];
    for (x, want) in cases {
        assert_eq!(format_g17(x), want);
        assert_eq!(format_g17(x).parse::<f64>().unwrap(), x);
    }
}

#[test]
fn plan_orders_by_cost_and_enforces_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    let p = plan(&cfg).unwrap();
    assert_eq!(p.len(), 8);
    assert!(p.windows(2).all(|w| w[0].cost >= w[1].cost));
    assert_eq!((p[0].selector, p[0].m), (Selector::CcdEnergy(2), 3));
    cfg.budget_gib = 1e-6;
    match plan(&cfg) {
        Err(Error::Budget { what, .. }) => assert!(what.contains("ccd2_energy") && what.contains("3^3"), "{what}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_study_emits_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.quantities.clear();
    let recs = run_sweep(&cfg, false).unwrap();
    assert!(recs.is_empty());
    let files = emit_report(&cfg, &recs, &analyze(&cfg, &recs).unwrap(), dir.path()).unwrap();
    let csv = fs::read_to_string(&files.csv).unwrap();
    assert_eq!(csv.lines().count(), 1);
    let s: Summary = serde_json::from_str(&fs::read_to_string(&files.summary).unwrap()).unwrap();
    assert!(s.reports.is_empty());
    assert!(files.plots.is_empty());
}

fn csv_body(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn sweep_is_deterministic_resumable_and_round_trips() {
    let a = tempfile::tempdir().unwrap();
    let cfg = small_config(a.path());
    let recs = run_sweep(&cfg, false).unwrap();
    assert_eq!(recs.len(), 8);
    let reports = analyze(&cfg, &recs).unwrap();
    assert_eq!(reports.len(), 2);
    let files = emit_report(&cfg, &recs, &reports, a.path()).unwrap();
    let body = csv_body(&files.csv);
    assert_eq!(body.lines().count(), 1 + recs.len());
    assert!(body.contains(&cfg.hash()));

    // summary reproduces every fit exactly
    let s: Summary = serde_json::from_str(&fs::read_to_string(&files.summary).unwrap()).unwrap();
    assert_eq!(s.reports, reports);
    assert_eq!(s.config, cfg);
    assert_eq!(s.version, SCHEMA_VERSION);

    // plot data: two whitespace-separated columns
    let dat = fs::read_to_string(a.path().join("lin_4h2p.dat")).unwrap();
    let rows: Vec<&str> = dat.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split_whitespace().count() == 2));

    // an interrupted run (three records and a torn line) resumed elsewhere
    let b = tempfile::tempdir().unwrap();
    let cfg_b = StudyConfig { out: b.path().to_path_buf(), ..cfg.clone() };
    let lines: Vec<String> = fs::read_to_string(a.path().join(RECORDS_FILE)).unwrap().lines().map(String::from).collect();
    let partial = format!("{}\n{}", lines[..3].join("\n"), &lines[3][..20]);
    fs::write(b.path().join(RECORDS_FILE), partial).unwrap();
    let recs_b = run_sweep(&cfg_b, true).unwrap();
    assert_eq!(recs_b.len(), 8);
    let files_b = emit_report(&cfg_b, &recs_b, &analyze(&cfg_b, &recs_b).unwrap(), b.path()).unwrap();
    assert_eq!(cfg_b.hash(), cfg.hash());
    assert_eq!(body, csv_body(&files_b.csv));

    // fresh rerun of the same config gives the same bytes
    let recs_c = run_sweep(&cfg, false).unwrap();
    let files_c = emit_report(&cfg, &recs_c, &analyze(&cfg, &recs_c).unwrap(), a.path()).unwrap();
    assert_eq!(body, csv_body(&files_c.csv));
}

#[test]
fn shipped_configs_match_presets() {
    let default = StudyConfig::from_json(include_str!("../../../../configs/default.json")).unwrap();
    assert_eq!(default, StudyConfig::default());
    let fig2 = StudyConfig::from_json(include_str!("../../../../configs/fig2.json")).unwrap();
    assert_eq!(fig2, fig2_config());
}
