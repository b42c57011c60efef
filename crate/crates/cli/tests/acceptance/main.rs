//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Set `LUNGBENCH_BLESS=1` to rewrite the
//! golden reports instead of comparing against them.

mod oracle;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lungbench_core::classify_eval::{auc, bootstrap_auc_ci, delong_ci};
use lungbench_core::curation::{aggregate_slices, sws_sample};
use lungbench_core::detect_eval::{froc, match_candidates};
use lungbench_core::nifti_io::{read_volume, write_volume, write_volume_with, Datatype, WriteOptions};
use lungbench_core::preprocess::{clip_normalize, resample, sample_world};
use lungbench_core::tabular_io::{parse_annotations, parse_candidates, parse_exclusions, parse_manifest, parse_scores};
use lungbench_core::{
    Annotation, Box3, Candidate, GridFrame, GroupingParams, HitCriterion, LesionGeometry, Normalize, PatchClass, Point3,
    PreprocessConfig, ScanManifest, ScoredRecord, SliceBox2D, SliceUnit, SwsConfig, VolumeGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- detection

struct DetectInstance {
    manifest: ScanManifest,
    anns: Vec<Annotation>,
    excl: Vec<Annotation>,
    cands: Vec<Candidate>,
    crit: HitCriterion,
}

fn random_geometry(rng: &mut ChaCha8Rng, spheres_only: bool) -> LesionGeometry {
    let c = Point3::new(rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0));
    if spheres_only || rng.gen_bool(0.5) {
        LesionGeometry::sphere(c, rng.gen_range(3.0..15.0)).unwrap()
    } else {
        let size = [rng.gen_range(3.0..15.0), rng.gen_range(3.0..15.0), rng.gen_range(3.0..15.0)];
        LesionGeometry::Box(Box3::new(c, size).unwrap())
    }
}

fn random_probability(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.4) {
        rng.gen_range(0..=10) as f64 / 10.0
    } else {
        rng.gen_range(0.0..=1.0)
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> DetectInstance {
    let n_scans = rng.gen_range(1..=20);
    let ids: Vec<String> = (0..n_scans).map(|i| format!("scan{i}")).collect();
    let crit = match rng.gen_range(0..3) {
        0 => HitCriterion::CenterInSphere,
        1 => HitCriterion::CenterInBox,
        _ => HitCriterion::iou([0.05, 0.1, 0.2][rng.gen_range(0..3)]).unwrap(),
    };
    let spheres_only = crit == HitCriterion::CenterInSphere;
    let anns: Vec<Annotation> = (0..rng.gen_range(1..=10))
        .map(|k| Annotation {
            scan_id: ids[rng.gen_range(0..n_scans)].clone(),
            nodule_id: k.to_string(),
            geometry: random_geometry(rng, spheres_only),
            label: None,
        })
        .collect();
    let excl: Vec<Annotation> = (0..rng.gen_range(0..=3))
        .map(|k| Annotation {
            scan_id: ids[rng.gen_range(0..n_scans)].clone(),
            nodule_id: format!("x{k}"),
            geometry: random_geometry(rng, spheres_only),
            label: None,
        })
        .collect();
    let cands = (0..rng.gen_range(0..=50))
        .map(|_| {
            let near = if rng.gen_bool(0.5) { Some(&anns[rng.gen_range(0..anns.len())]) } else { None };
            let (scan_id, location) = match near {
                Some(a) => {
                    let c = a.geometry.center();
                    let mut jitter = || rng.gen_range(-4.0..4.0);
                    (a.scan_id.clone(), Point3::new(c.x + jitter(), c.y + jitter(), c.z + jitter()))
                }
                None => (
                    ids[rng.gen_range(0..n_scans)].clone(),
                    Point3::new(rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)),
                ),
            };
            Candidate { scan_id, location, probability: random_probability(rng) }
        })
        .collect();
    DetectInstance { manifest: ScanManifest::new(ids).unwrap(), anns, excl, cands, crit }
}

fn dedup_points(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for p in points {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

fn froc_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let instances: Vec<DetectInstance> = (0..500).map(|_| random_instance(&mut rng)).collect();
    let start = Instant::now();
    let mut n_points = 0;
    for (n, inst) in instances.iter().enumerate() {
        let m = match_candidates(&inst.cands, &inst.anns, &inst.excl, &inst.manifest, &inst.crit)
            .map_err(|e| format!("instance {n}: {e}"))?;
        let curve = froc(&m).map_err(|e| format!("instance {n}: {e}"))?;
        let fates = oracle::fates(&inst.cands, &inst.anns, &inst.excl, &inst.crit);
        let expected = dedup_points(oracle::froc_points(&inst.cands, &fates, inst.anns.len(), inst.manifest.len()));
        let got: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fp_per_scan, p.sensitivity)).collect();
        let bits = |v: &[(f64, f64)]| v.iter().map(|p| (p.0.to_bits(), p.1.to_bits())).collect::<Vec<_>>();
        ensure(bits(&got) == bits(&expected), || format!("instance {n}: points {got:?} vs oracle {expected:?}"))?;
        let (sens, cpm) = oracle::cpm(&expected);
        for k in 0..7 {
            ensure((curve.sensitivities[k] - sens[k]).abs() <= 1e-12, || {
                format!("instance {n}: sensitivity at {} is {} vs oracle {} on {expected:?}", oracle::RATES[k], curve.sensitivities[k], sens[k])
            })?;
        }
        ensure((curve.cpm - cpm).abs() <= 1e-12, || format!("instance {n}: CPM {} vs oracle {cpm}", curve.cpm))?;
        n_points += got.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("500 instances, {n_points} operating points, {secs:.2} s"))
}

fn cpm_definition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for n in 0..500 {
        let inst = random_instance(&mut rng);
        let m = match_candidates(&inst.cands, &inst.anns, &inst.excl, &inst.manifest, &inst.crit).map_err(|e| e.to_string())?;
        let c = froc(&m).map_err(|e| e.to_string())?;
        let mean = c.sensitivities.iter().sum::<f64>() / 7.0;
        ensure(c.cpm == mean, || format!("instance {n}: CPM {} is not the mean {mean}", c.cpm))?;
        ensure(c.fp_rates == oracle::RATES, || format!("rates {:?}", c.fp_rates))?;
    }
    let ids: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
    let manifest = ScanManifest::new(ids.clone()).unwrap();
    let anns: Vec<Annotation> = ids
        .iter()
        .map(|s| Annotation {
            scan_id: s.clone(),
            nodule_id: "1".into(),
            geometry: LesionGeometry::sphere(Point3::new(1.0, 2.0, 3.0), 6.0).unwrap(),
            label: None,
        })
        .collect();
    let perfect: Vec<Candidate> =
        ids.iter().map(|s| Candidate { scan_id: s.clone(), location: Point3::new(1.0, 2.0, 3.0), probability: 1.0 }).collect();
    let crit = HitCriterion::CenterInSphere;
    let c = froc(&match_candidates(&perfect, &anns, &[], &manifest, &crit).unwrap()).unwrap();
    ensure(c.cpm == 1.0 && c.sensitivities == [1.0; 7], || format!("perfect detector CPM {}", c.cpm))?;
    let c = froc(&match_candidates(&[], &anns, &[], &manifest, &crit).unwrap()).unwrap();
    ensure(c.cpm == 0.0 && c.sensitivities == [0.0; 7], || format!("zero-candidate CPM {}", c.cpm))?;
    Ok("500 instances; perfect = 1.0; no candidates = 0.0".into())
}

fn exclusion_semantics() -> Check {
    let sphere = |scan: &str, id: &str, x: f64, d: f64| Annotation {
        scan_id: scan.into(),
        nodule_id: id.into(),
        geometry: LesionGeometry::sphere(Point3::new(x, 0.0, 0.0), d).unwrap(),
        label: None,
    };
    let cand = |scan: &str, x: f64, p: f64| Candidate { scan_id: scan.into(), location: Point3::new(x, 0.0, 0.0), probability: p };
    let ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
    let manifest = ScanManifest::new(ids).unwrap();
    let anns = vec![sphere("s0", "1", 0.0, 10.0), sphere("s1", "1", 0.0, 8.0), sphere("s2", "1", 0.0, 12.0)];
    let excl = vec![sphere("s0", "x", 40.0, 6.0), sphere("s2", "x", -40.0, 10.0)];
    let base = vec![
        cand("s0", 1.0, 0.9),
        cand("s0", 80.0, 0.6),
        cand("s1", 2.0, 0.4),
        cand("s1", 60.0, 0.7),
        cand("s2", 3.0, 0.2),
        cand("s2", 90.0, 0.3),
    ];
    let mut extended = base.clone();
    // Exclusion-only hits, some at probabilities already used as thresholds.
    for (i, p) in [0.95, 0.9, 0.65, 0.4, 0.25, 0.05, 1.0].into_iter().enumerate() {
        extended.push(if i % 2 == 0 { cand("s0", 40.5, p) } else { cand("s2", -41.0, p) });
    }
    let crit = HitCriterion::CenterInSphere;
    let a = froc(&match_candidates(&base, &anns, &excl, &manifest, &crit).unwrap()).unwrap();
    let mb = match_candidates(&extended, &anns, &excl, &manifest, &crit).unwrap();
    let b = froc(&mb).unwrap();
    ensure(a.points == b.points, || format!("curve changed: {:?} vs {:?}", a.points, b.points))?;
    ensure(a.sensitivities == b.sensitivities, || "fixed-rate sensitivities changed".into())?;
    let ignored = mb.count(|s| *s == lungbench_core::detect_eval::CandidateStatus::Ignored);
    ensure(ignored == 7, || format!("{ignored} candidates ignored, expected 7"))?;
    // Every threshold of the extended list, scored by brute force.
    let fates_a = oracle::fates(&base, &anns, &excl, &crit);
    let fates_b = oracle::fates(&extended, &anns, &excl, &crit);
    for t in extended.iter().map(|c| c.probability) {
        let at = |cands: &[Candidate], fates: &[oracle::Fate]| {
            let mut fp = 0;
            let mut found = std::collections::BTreeSet::new();
            for (c, f) in cands.iter().zip(fates) {
                if c.probability >= t {
                    match f {
                        oracle::Fate::Lesion(i) => {
                            found.insert(*i);
                        }
                        oracle::Fate::FalsePositive => fp += 1,
                        oracle::Fate::Ignored => {}
                    }
                }
            }
            (fp, found.len())
        };
        ensure(at(&base, &fates_a) == at(&extended, &fates_b), || format!("threshold {t} changed"))?;
    }
    Ok(format!("7 exclusion-only candidates ignored; {} operating points unchanged", a.points.len()))
}

// ----------------------------------------------------------- classification

fn scored(scores: &[f64], labels: &[bool]) -> Vec<ScoredRecord> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&score, &label))| ScoredRecord { record_id: format!("r{i}"), scan_id: format!("s{i}"), score, label })
        .collect()
}

fn auc_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let transforms: [(&str, fn(f64) -> f64); 3] =
        [("exp", |x| x.exp()), ("cubic", |x| x * x * x + x), ("logistic", |x| 1.0 / (1.0 + (-2.0 * x).exp()))];
    let mut cases = 0usize;
    for n in 2..=12usize {
        for variant in 0..2 {
            let scores: Vec<f64> = (0..n)
                .map(|_| if variant == 0 { rng.gen_range(0..4) as f64 / 2.0 - 0.75 } else { rng.gen_range(-3.0..3.0) })
                .collect();
            for mask in 1u32..(1 << n) - 1 {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let a = auc(&scored(&scores, &labels)).map_err(|e| e.to_string())?;
                let want = oracle::pair_auc(&scores, &labels);
                ensure(a.to_bits() == want.to_bits(), || format!("n={n} mask={mask:b}: {a} vs {want}"))?;
                let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
                let b = auc(&scored(&scores, &flipped)).map_err(|e| e.to_string())?;
                ensure((a + b - 1.0).abs() <= 1e-12, || format!("n={n} mask={mask:b}: {a} + {b} != 1"))?;
                for (name, f) in transforms {
                    let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
                    let c = auc(&scored(&t, &labels)).map_err(|e| e.to_string())?;
                    ensure(c == a, || format!("n={n} mask={mask:b}: {name} transform gives {c}, not {a}"))?;
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} labelings over n = 2..12, flip identity, 3 transforms"))
}

fn gaussian_records(seed: u64, shift: f64) -> Vec<ScoredRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let labels: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
    let scores: Vec<f64> = labels.iter().map(|&l| noise.sample(&mut rng) + if l { shift } else { 0.0 }).collect();
    scored(&scores, &labels)
}

fn delong_vs_bootstrap() -> Check {
    let mut worst: f64 = 0.0;
    for (seed, shift) in [(1, 0.5), (2, 0.8), (3, 1.0), (4, 1.3), (5, 1.6)] {
        let r = gaussian_records(seed, shift);
        let d = delong_ci(&r, 0.95).map_err(|e| e.to_string())?;
        let b = bootstrap_auc_ci(&r, 2000, seed, 0.95).map_err(|e| e.to_string())?;
        ensure(d.ci_low.max(b.ci_low) <= d.ci_high.min(b.ci_high), || format!("shift {shift}: {d:?} and {b:?} do not overlap"))?;
        let (wd, wb) = (d.ci_high - d.ci_low, b.ci_high - b.ci_low);
        let rel = (wb - wd).abs() / wd;
        worst = worst.max(rel);
        ensure(rel <= 0.25, || format!("shift {shift}: widths {wd:.4} vs {wb:.4} differ by {:.1}%", rel * 100.0))?;
    }
    let r = gaussian_records(9, 1.0);
    let json = |threads: usize, seed: u64| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| serde_json::to_string(&bootstrap_auc_ci(&r, 2000, seed, 0.95).unwrap()).unwrap())
    };
    let reference = json(1, 7);
    for threads in [1, 2, 4, 8] {
        ensure(json(threads, 7) == reference, || format!("{threads} threads changed the bootstrap interval"))?;
    }
    ensure(json(4, 8) != reference, || "seed has no effect".into())?;
    Ok(format!("5 fixtures, widest width gap {:.1}%; 2000 resamples identical on 1/2/4/8 threads", worst * 100.0))
}

// ----------------------------------------------------------------- curation

fn nlst_aggregation() -> Check {
    let b = |slice: f64, x0: f64, y0: f64, x1: f64, y1: f64| SliceBox2D {
        scan_id: "p1".into(),
        slice,
        unit: SliceUnit::Index,
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    };
    // Widths 4, 6, 5 and heights 3, 3, 4 on slices 10 to 12.
    let fixture = [b(10.0, 1.0, 0.0, 5.0, 3.0), b(11.0, 0.0, 0.0, 6.0, 3.0), b(12.0, 0.5, 0.0, 5.5, 4.0)];
    let params = GroupingParams { slice_thickness_mm: 1.25, ..Default::default() };
    let out = aggregate_slices(&fixture, &params).map_err(|e| e.to_string())?;
    ensure(out.len() == 1, || format!("{} nodules", out.len()))?;
    let size = out[0].geometry.as_box().size;
    ensure(size == [6.0, 4.0, 3.75], || format!("size {size:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut total_boxes = 0;
    for n in 0..1000 {
        let thickness = [0.625, 1.0, 1.25, 2.5][rng.gen_range(0..4)];
        let unit = if rng.gen_bool(0.5) { SliceUnit::Index } else { SliceUnit::Millimeters };
        let z_origin = if unit == SliceUnit::Index { rng.gen_range(-300.0..0.0) } else { 0.0 };
        let params = GroupingParams {
            min_2d_iou: rng.gen_range(0.05..0.5),
            max_slice_gap: rng.gen_range(0..3),
            slice_thickness_mm: thickness,
            z_origin_mm: z_origin,
        };
        let mut boxes = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            let (mut cx, mut cy) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let mut slice = rng.gen_range(0..40) as i64;
            for _ in 0..rng.gen_range(1..8) {
                let (w, h) = (rng.gen_range(2.0..15.0), rng.gen_range(2.0..15.0));
                let pos = match unit {
                    SliceUnit::Index => slice as f64,
                    SliceUnit::Millimeters => slice as f64 * thickness,
                };
                boxes.push(SliceBox2D {
                    scan_id: "p".into(),
                    slice: pos,
                    unit,
                    x_min: cx - w / 2.0,
                    y_min: cy - h / 2.0,
                    x_max: cx + w / 2.0,
                    y_max: cy + h / 2.0,
                });
                cx += rng.gen_range(-2.0..2.0);
                cy += rng.gen_range(-2.0..2.0);
                slice += rng.gen_range(1..=2);
            }
        }
        let out = aggregate_slices(&boxes, &params).map_err(|e| format!("fixture {n}: {e}"))?;
        for sb in &boxes {
            let z = match unit {
                SliceUnit::Index => z_origin + sb.slice * thickness,
                SliceUnit::Millimeters => sb.slice,
            };
            let covered = out.iter().any(|a| {
                let g = a.geometry.as_box();
                let (lo, hi) = (g.min(), g.max());
                lo[0] <= sb.x_min
                    && sb.x_max <= hi[0]
                    && lo[1] <= sb.y_min
                    && sb.y_max <= hi[1]
                    && lo[2] <= z - thickness / 2.0 + 1e-9
                    && z + thickness / 2.0 - 1e-9 <= hi[2]
            });
            ensure(covered, || format!("fixture {n}: slice box {sb:?} is outside every 3D box"))?;
        }
        total_boxes += boxes.len();
    }
    Ok(format!("fixture size (6, 4, 3.75); 1000 random fixtures, {total_boxes} slice boxes contained"))
}

fn sws_sampling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let anns: Vec<Annotation> = (0..10)
        .map(|i| Annotation {
            scan_id: format!("s{}", i % 4),
            nodule_id: i.to_string(),
            geometry: LesionGeometry::sphere(Point3::new(i as f64 * 100.0, 0.0, 0.0), 10.0).unwrap(),
            label: None,
        })
        .collect();
    let mut cands: Vec<Candidate> = anns
        .iter()
        .map(|a| Candidate { scan_id: a.scan_id.clone(), location: a.geometry.center(), probability: rng.gen_range(0.0..1.0) })
        .collect();
    for _ in 0..300 {
        let scan = format!("s{}", rng.gen_range(0..4));
        // Half of these land inside lesions and must never be sampled.
        let x = if rng.gen_bool(0.5) { rng.gen_range(0..10) as f64 * 100.0 + rng.gen_range(-3.0..3.0) } else { rng.gen_range(0.0..1000.0) };
        cands.push(Candidate { scan_id: scan, location: Point3::new(x, rng.gen_range(-3.0..3.0), 0.0), probability: rng.gen_range(0.0..=1.0) });
    }
    let crit = HitCriterion::CenterInSphere;
    let cfg = SwsConfig { seed: 2024, ..Default::default() };
    let out = sws_sample(&cands, &anns, &crit, &cfg).map_err(|e| e.to_string())?;
    let rows = &out.manifest.rows;
    let pos = rows.iter().filter(|r| r.class == PatchClass::Nodule).count();
    let neg: Vec<_> = rows.iter().filter(|r| r.class == PatchClass::NonNodule).collect();
    ensure(pos == 10 && neg.len() == 30, || format!("{pos} nodules, {} non-nodules", neg.len()))?;
    let mut per = [0usize; 3];
    for r in &neg {
        let p = r.probability.ok_or("negative without probability")?;
        per[if p < 0.4 { 0 } else if p < 0.7 { 1 } else { 2 }] += 1;
        for a in anns.iter().filter(|a| a.scan_id == r.scan_id) {
            ensure(!oracle::hits(&r.center, &a.geometry, &crit), || format!("{} hits lesion {}", r.path, a.nodule_id))?;
        }
    }
    ensure(per == [10, 10, 10], || format!("per-stratum counts {per:?}"))?;
    let again = sws_sample(&cands, &anns, &crit, &cfg).map_err(|e| e.to_string())?;
    ensure(again.manifest.to_csv() == out.manifest.to_csv(), || "same seed gave a different manifest".into())?;
    Ok("10 nodules, 30 non-nodules split 10/10/10, none hits a lesion, reproducible".into())
}

// ------------------------------------------------------------ preprocessing

fn preprocessing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for n in 0..40 {
        let dims = [rng.gen_range(2..12), rng.gen_range(2..12), rng.gen_range(2..9)];
        let spacing = [rng.gen_range(0.4..2.0), rng.gen_range(0.4..2.0), rng.gen_range(0.5..3.0)];
        let origin = Point3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-300.0..0.0));
        let frame = GridFrame::new(origin, spacing, dims).unwrap();
        let (a, bx, by, bz) = (rng.gen_range(-500.0..500.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let field = |p: Point3| a + bx * (p.x - origin.x) + by * (p.y - origin.y) + bz * (p.z - origin.z);
        let v = VolumeGrid::from_fn(frame, |i, j, k| {
            field(Point3::new(origin.x + i as f64 * spacing[0], origin.y + j as f64 * spacing[1], origin.z + k as f64 * spacing[2]))
        })
        .unwrap();
        let target = if n % 2 == 0 { [0.7, 0.7, 1.25] } else { [rng.gen_range(0.3..2.5), rng.gen_range(0.3..2.5), rng.gen_range(0.3..2.5)] };
        let r = resample(&v, target).map_err(|e| e.to_string())?;
        let [nx, ny, nz] = r.dims();
        let hull = [0, 1, 2].map(|ax| (dims[ax] - 1) as f64 * spacing[ax]);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let off = [i as f64 * target[0], j as f64 * target[1], k as f64 * target[2]];
                    if (0..3).any(|ax| off[ax] > hull[ax]) {
                        continue;
                    }
                    let p = Point3::new(origin.x + off[0], origin.y + off[1], origin.z + off[2]);
                    let err = (r.get(i, j, k) - field(p)).abs();
                    worst = worst.max(err);
                    ensure(err <= 1e-9, || format!("volume {n}: voxel ({i}, {j}, {k}) off by {err:e}"))?;
                    checked += 1;
                }
            }
        }

        let noisy = VolumeGrid::from_fn(frame, |_, _, _| rng.gen_range(-1500.0..800.0)).unwrap();
        let z = clip_normalize(&noisy, &PreprocessConfig::default()).map_err(|e| e.to_string())?;
        let m = z.data().iter().sum::<f64>() / z.data().len() as f64;
        let sd = (z.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / z.data().len() as f64).sqrt();
        ensure(m.abs() <= 1e-9 && (sd - 1.0).abs() <= 1e-9, || format!("volume {n}: mean {m:e}, std {sd}"))?;
    }
    for c in [-2000.0, -1000.0, 0.0, 37.5, 500.0, 3000.0] {
        let frame = GridFrame::new(Point3::default(), [1.0; 3], [4, 3, 2]).unwrap();
        let z = clip_normalize(&VolumeGrid::filled(frame, c), &PreprocessConfig::default()).map_err(|e| e.to_string())?;
        ensure(z.data().iter().all(|&x| x == 0.0), || format!("constant {c} did not map to zeros"))?;
    }
    let cfg = PreprocessConfig { normalize: Normalize::None, clip_lo: -1e9, clip_hi: 1e9, ..Default::default() };
    let frame = GridFrame::new(Point3::default(), [1.0; 3], [6, 6, 6]).unwrap();
    let ramp = VolumeGrid::from_fn(frame, |i, j, k| (i + 2 * j + 3 * k) as f64).unwrap();
    let out = clip_normalize(&ramp, &cfg).map_err(|e| e.to_string())?;
    ensure(out.data() == ramp.data(), || "wide clip without normalization altered data".into())?;
    ensure(sample_world(&ramp, Point3::new(1.5, 0.0, 0.0)) == 1.5, || "mid-voxel sample".into())?;
    Ok(format!("{checked} in-hull voxels of 40 affine fields within {worst:.1e}; z-score and constants exact"))
}

// -------------------------------------------------------------------- NIfTI

fn nifti_roundtrip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut bytes_total = 0usize;
    for n in 0..100 {
        let (dims, spacing) = if n < 3 {
            ([64, 64, 64], [0.7, 0.7, 1.25])
        } else {
            let sp = |rng: &mut ChaCha8Rng| format!("{:.3}", rng.gen_range(0.2..4.0)).parse::<f64>().unwrap();
            ([rng.gen_range(1..20), rng.gen_range(1..20), rng.gen_range(1..20)], [sp(&mut rng), sp(&mut rng), sp(&mut rng)])
        };
        let origin = Point3::new(rng.gen_range(-200..200) as f64 * 0.25, rng.gen_range(-200..200) as f64 * 0.5, -150.75);
        let frame = GridFrame::new(origin, spacing, dims).unwrap();
        let v = VolumeGrid::from_fn(frame, |_, _, _| loop {
            let x = f32::from_bits(rng.gen());
            if x.is_finite() {
                break x as f64;
            }
        })
        .unwrap();
        let gzip = n % 2 == 1;
        let bytes = write_volume_with(&v, &WriteOptions::new(Datatype::Float32).gzip(gzip)).map_err(|e| e.to_string())?;
        let back = read_volume(&bytes).map_err(|e| format!("volume {n}: {e}"))?;
        ensure(back.dims() == dims, || format!("volume {n}: dims {:?}", back.dims()))?;
        let same = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("volume {n}: data not bit-exact"))?;
        ensure(back.frame().spacing == spacing, || format!("volume {n}: spacing {:?}", back.frame().spacing))?;
        let (o, p) = (back.frame().origin, origin);
        ensure((o.x - p.x).abs() < 1e-6 && (o.y - p.y).abs() < 1e-6 && (o.z - p.z).abs() < 1e-6, || format!("volume {n}: origin {o:?}"))?;
        bytes_total += bytes.len();
    }

    let frame = GridFrame::new(Point3::new(-10.0, 20.5, -99.0), [0.7, 0.7, 1.25], [6, 5, 4]).unwrap();
    let v = VolumeGrid::from_fn(frame, |i, j, k| (i as f64 - 2.0 * j as f64) * 0.5 + k as f64 * 1000.0).unwrap();
    let bytes = write_volume(&v, Datatype::Float32).map_err(|e| e.to_string())?;
    let obj = <nifti::InMemNiftiObject>::from_reader(std::io::Cursor::new(bytes)).map_err(|e| e.to_string())?;
    use nifti::{IntoNdArray, NiftiObject};
    let h = obj.header().clone();
    ensure(h.sizeof_hdr == 348 && &h.dim[..4] == &[3, 6, 5, 4], || format!("reference header {:?}", &h.dim[..4]))?;
    ensure(&h.pixdim[1..4] == &[0.7f32, 0.7, 1.25], || format!("reference spacing {:?}", &h.pixdim[1..4]))?;
    ensure([h.srow_x[3], h.srow_y[3], h.srow_z[3]] == [-10.0, 20.5, -99.0], || "reference origin".into())?;
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(|e| e.to_string())?;
    for k in 0..4 {
        for j in 0..5 {
            for i in 0..6 {
                ensure(arr[&[i, j, k][..]] as f64 == v.get(i, j, k), || format!("reference voxel ({i}, {j}, {k})"))?;
            }
        }
    }
    Ok(format!("100 volumes ({} MB, three 64^3 at 0.7 x 0.7 x 1.25) bit-exact; reference reader agrees", bytes_total / 1_000_000))
}

// ------------------------------------------------------------------- golden

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lungbench"))
        .args(args)
        .current_dir(fixtures().join("cohort"))
        .env_remove("LUNGBENCH_SEED")
        .env_remove("LUNGBENCH_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

pub const GOLDEN_RUNS: [(&str, &[&str]); 3] = [
    (
        "detect.json",
        &[
            "eval-detect", "--candidates", "candidates.csv", "--annotations", "annotations.csv", "--scans", "scans.csv",
            "--exclusions", "exclusions.csv", "--bootstrap", "1000", "--seed", "11", "--meta", "meta.csv", "--group-by",
            "gender", "--deterministic",
        ],
    ),
    ("classify_delong.json", &["eval-classify", "--scores", "scores.csv", "--meta", "meta.csv", "--group-by", "gender", "--deterministic"]),
    ("classify_bootstrap.json", &["eval-classify", "--scores", "scores.csv", "--ci", "bootstrap:2000", "--seed", "7", "--deterministic"]),
];

fn golden_runs() -> Check {
    let start = Instant::now();
    let bless = std::env::var_os("LUNGBENCH_BLESS").is_some();
    for (name, args) in GOLDEN_RUNS {
        let got = run_cli(args)?;
        let path = fixtures().join("golden").join(name);
        if bless {
            std::fs::write(&path, &got).map_err(|e| e.to_string())?;
        }
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(got == want, || format!("{name} differs from the committed golden report"))?;
    }
    let secs = start.elapsed().as_secs_f64();

    // The committed numbers themselves, recomputed by the oracles.
    let dir = fixtures().join("cohort");
    let read = |f: &str| std::fs::read_to_string(dir.join(f)).unwrap();
    let cands = parse_candidates(&read("candidates.csv")).map_err(|e| e.to_string())?;
    let anns = parse_annotations(&read("annotations.csv")).map_err(|e| e.to_string())?.rows;
    let excl = parse_exclusions(&read("exclusions.csv")).map_err(|e| e.to_string())?.rows;
    let scans = parse_manifest(&read("scans.csv")).map_err(|e| e.to_string())?;
    let fates = oracle::fates(&cands, &anns, &excl, &HitCriterion::CenterInSphere);
    let (_, cpm) = oracle::cpm(&dedup_points(oracle::froc_points(&cands, &fates, anns.len(), scans.len())));
    let golden = |name: &str| -> Value { serde_json::from_str(&std::fs::read_to_string(fixtures().join("golden").join(name)).unwrap()).unwrap() };
    let d = golden("detect.json");
    let golden_cpm = d["results"]["froc"]["cpm"].as_f64().ok_or("no cpm in golden report")?;
    ensure((golden_cpm - cpm).abs() <= 1e-12, || format!("golden CPM {golden_cpm} vs oracle {cpm}"))?;

    let records = parse_scores(&read("scores.csv")).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    let want_auc = oracle::pair_auc(&scores, &labels);
    let c = golden("classify_delong.json");
    ensure(c["results"]["overall"]["auc"].as_f64() == Some(want_auc), || "golden AUC differs from pair counting".into())?;
    let groups = c["results"]["subgroups"].as_array().map_or(0, |g| g.len());
    ensure(groups == 2, || format!("{groups} gender rows"))?;
    ensure(secs < 30.0, || format!("golden runs took {secs:.1} s"))?;
    Ok(format!("3 reports byte-identical in {secs:.2} s; CPM {golden_cpm:.4} and AUC {want_auc:.4} match the oracles"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("FROC/CPM oracle equivalence", froc_oracle_equivalence),
        ("CPM definition", cpm_definition),
        ("exclusion semantics", exclusion_semantics),
        ("AUC oracle equivalence", auc_oracle_equivalence),
        ("DeLong vs bootstrap agreement", delong_vs_bootstrap),
        ("3D aggregation from slice boxes", nlst_aggregation),
        ("stratified negative sampling", sws_sampling),
        ("preprocessing exactness", preprocessing),
        ("NIfTI roundtrip", nifti_roundtrip),
        ("end-to-end golden runs", golden_runs),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
