//! Cohort generation properties.

use fracadapt::phantom::*;
use fracadapt::volume::{Geometry, OrganLabel};

fn count(shape: &OrganShape, g: &Geometry) -> usize {
    (0..g.len())
        .filter(|&i| shape.contains(g.position(g.coords(i))))
        .count()
}

#[test]
fn default_layouts_are_feasible_for_many_patients() {
    for profile in [InstituteProfile::institute_a(), InstituteProfile::institute_b()] {
        let cfg = CohortConfig::new(profile, 60, 1, 3);
        for p in 0..60 {
            sample_anatomy(&cfg, p).unwrap();
        }
    }
}

#[test]
fn planning_volumes_match_analytic_volumes() {
    let cfg = CohortConfig::new(InstituteProfile::institute_b(), 4, 1, 21);
    let g = cfg.geometry().unwrap();
    let voxel = g.spacing.iter().product::<f64>();
    for p in 0..4 {
        let a = sample_anatomy(&cfg, p).unwrap();
        let shapes = FractionDeformation::identity().apply(&a);
        assert_eq!(shapes, a.organs);
        for shape in &shapes {
            let measured = count(shape, &g) as f64 * voxel;
            let exact = shape.analytic_volume();
            // one voxel shell: surface area bound 4 pi r_max^2 times half the
            // voxel diagonal
            let r = shape.radii.iter().cloned().fold(0.0, f64::max);
            let diag = g.spacing.iter().map(|s| s * s).sum::<f64>().sqrt();
            let shell = 4.0 * std::f64::consts::PI * r * r * diag / 2.0;
            assert!(
                (measured - exact).abs() <= shell,
                "patient {p}: {measured} vs {exact} (shell {shell})"
            );
        }
    }
}

#[test]
fn bladder_scale_scales_bladder_voxel_count() {
    let mut cfg = CohortConfig::new(InstituteProfile::institute_a(), 3, 1, 8);
    cfg.bladder_scale = (0.7, 1.4);
    for p in 0..3 {
        let a = sample_anatomy(&cfg, p).unwrap();
        let base = generate_fraction(&a, &cfg, 0).unwrap().1.histogram()[3] as f64;
        let mut d = FractionDeformation::identity();
        d.bladder_scale = 1.3;
        let (_, labels) = generate_fraction_with(&a, &cfg, &d, 1).unwrap();
        let ratio = labels.histogram()[3] as f64 / base;
        assert!((ratio / 1.3 - 1.0).abs() < 0.1, "patient {p}: ratio {ratio}");
        let analytic = d.apply(&a)[2].analytic_volume() / a.organ(OrganLabel::Bladder).analytic_volume();
        assert!((analytic - 1.3).abs() < 1e-9);
    }
}

#[test]
fn per_fraction_volume_change_stays_in_range() {
    let cfg = CohortConfig::new(InstituteProfile::institute_b(), 2, 8, 4);
    let g = cfg.geometry().unwrap();
    for p in 0..2 {
        let a = sample_anatomy(&cfg, p).unwrap();
        let base_b = count(&a.organs[2], &g) as f64;
        let base_r = count(&a.organs[3], &g) as f64;
        for j in 1..8 {
            let d = FractionDeformation::sample(&a, j, cfg.seed);
            assert!((cfg.bladder_scale.0..=cfg.bladder_scale.1).contains(&d.bladder_scale));
            assert!((cfg.rectum_scale.0..=cfg.rectum_scale.1).contains(&d.rectum_scale));
            let shapes = d.apply(&a);
            let rb = count(&shapes[2], &g) as f64 / base_b;
            let rr = count(&shapes[3], &g) as f64 / base_r;
            // ripple and voxelisation add a few percent either way
            assert!(rb > cfg.bladder_scale.0 * 0.85 && rb < cfg.bladder_scale.1 * 1.15, "{rb}");
            assert!(rr > cfg.rectum_scale.0 * 0.85 && rr < cfg.rectum_scale.1 * 1.15, "{rr}");
        }
    }
}

#[test]
fn single_scan_cohort_holds_planning_pairs_only() {
    let cfg = CohortConfig::new(InstituteProfile::institute_a(), 3, 1, 1);
    let cohort = generate_cohort(&cfg).unwrap();
    assert_eq!(cohort.len(), 3);
    for s in &cohort {
        assert_eq!(s.scans.len(), 1);
        assert_eq!(s.treatment_fractions(), 0);
        assert_eq!(s.profile, "institute-a");
    }
    assert_eq!(cohort[2].patient_id, "patient-002");
}

#[test]
fn label_maps_hold_all_five_classes() {
    let cfg = CohortConfig::new(InstituteProfile::institute_b(), 3, 4, 17);
    for s in generate_cohort(&cfg).unwrap() {
        let g = s.scans[0].1.geometry().clone();
        for (image, labels) in &s.scans {
            assert_eq!(labels.present_classes(), vec![0, 1, 2, 3, 4]);
            assert_eq!(image.geometry(), &g);
            assert_eq!(labels.geometry(), &g);
        }
    }
}

#[test]
fn written_cohort_is_byte_identical_across_runs_and_reads_back() {
    let cfg = CohortConfig::new(InstituteProfile::institute_b(), 2, 3, 5);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        write_cohort(d.path(), &cfg, &generate_cohort(&cfg).unwrap()).unwrap();
    }
    let mut files = Vec::new();
    for p in ["patient-000", "patient-001"] {
        for j in 0..3 {
            for f in ["image.mha", "labels.mha"] {
                files.push(format!("{p}/fraction-{j}/{f}"));
            }
        }
    }
    files.push(MANIFEST.to_string());
    for f in &files {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let back = read_cohort(dirs[0].path()).unwrap();
    assert_eq!(back, generate_cohort(&cfg).unwrap());
}

#[test]
fn institutes_differ_in_intensity_statistics() {
    let mean_sd = |profile: InstituteProfile| {
        let cfg = CohortConfig::new(profile, 4, 1, 9);
        let values: Vec<f64> = generate_cohort(&cfg)
            .unwrap()
            .iter()
            .flat_map(|s| s.scans[0].0.voxels().to_vec())
            .map(f64::from)
            .collect();
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var, n)
    };
    let (ma, va, na) = mean_sd(InstituteProfile::institute_a());
    let (mb, vb, nb) = mean_sd(InstituteProfile::institute_b());
    let se = (va / na + vb / nb).sqrt();
    assert!((ma - mb).abs() > 3.0 * se, "gap {} vs se {se}", (ma - mb).abs());
}
