//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::time::Instant;

use graspwise_core::dataset::{export_session_samples, gen_record, gen_synthetic, GenConfig};
use graspwise_core::eval::{evaluate, sweep_intervention, EvalConfig, Method, DEFAULT_RHO_GRID};
use graspwise_core::geometry::{axis_envelope, rect_iou, AxisRect, GraspRect};
use graspwise_core::lang::{generate, parse, templates, Lexicon, RelationTriple, Source, DEFAULT_CLASSES};
use graspwise_core::losses::{
    grad_check, loss_g, loss_p, loss_s, loss_total, Objective, OrientationObjective, OrientationPrediction,
    ProposalObjective, ProposalPrediction, Reduction, SurfaceObjective, SurfacePrediction, TotalObjective,
};
use graspwise_core::planner::{Label, Planner, ANGLE_CLASSES};
use graspwise_core::scene::{
    closure, GraspAnnotation, ImageSize, ObjectInstance, Predicate, RelationshipTree, Scene,
};
use graspwise_core::session::{self, read_log, replay, EventLog, SessionConfig, SessionState, TickClock};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

// ---------------------------------------------------------------- geometry

const RASTER: usize = 1000;
const DOMAIN: f64 = 100.0;

/// x-interval of a rotated rectangle on the horizontal line `y`.
fn row_span(r: &GraspRect, y: f64) -> Option<(f64, f64)> {
    let (s, c) = r.theta.to_radians().sin_cos();
    let dy = y - r.cy;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    // |(x-cx)*a + dy*b| <= half for each of the two slabs
    for (a, b, half) in [(c, s, r.w / 2.0), (-s, c, r.h / 2.0)] {
        let off = dy * b;
        if a.abs() < 1e-15 {
            if off.abs() > half {
                return None;
            }
            continue;
        }
        let (x1, x2) = ((-half - off) / a, (half - off) / a);
        lo = lo.max(x1.min(x2));
        hi = hi.min(x1.max(x2));
    }
    (lo <= hi).then_some((lo + r.cx, hi + r.cx))
}

fn cells_in(lo: f64, hi: f64, d: f64) -> i64 {
    let first = ((lo / d - 0.5).ceil() as i64).max(0);
    let last = ((hi / d - 0.5).floor() as i64).min(RASTER as i64 - 1);
    (last - first + 1).max(0)
}

/// IoU from sampling a 1000x1000 grid of cell centers over the domain.
fn raster_iou(a: &GraspRect, b: &GraspRect) -> f64 {
    let d = DOMAIN / RASTER as f64;
    let (mut na, mut nb, mut nab) = (0i64, 0i64, 0i64);
    for row in 0..RASTER {
        let y = (row as f64 + 0.5) * d;
        let sa = row_span(a, y);
        let sb = row_span(b, y);
        if let Some((l, h)) = sa {
            na += cells_in(l, h, d);
        }
        if let Some((l, h)) = sb {
            nb += cells_in(l, h, d);
        }
        if let (Some(x), Some(z)) = (sa, sb) {
            nab += cells_in(x.0.max(z.0), x.1.min(z.1), d);
        }
    }
    nab as f64 / (na + nb - nab) as f64
}

fn geometry_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let mut rect = || {
            GraspRect::new(
                rng.random_range(35.0..65.0),
                rng.random_range(35.0..65.0),
                rng.random_range(-90.0..90.0),
                rng.random_range(8.0..40.0),
                rng.random_range(8.0..40.0),
            )
            .unwrap()
        };
        let (a, b) = (rect(), rect());
        worst = worst.max((rect_iou(&a, &b) - raster_iou(&a, &b)).abs());
    }
    let mut exact_misses = 0;
    for _ in 0..2000 {
        let mut r = || {
            let v: [i64; 4] = [
                rng.random_range(0..50),
                rng.random_range(0..50),
                rng.random_range(1..30),
                rng.random_range(1..30),
            ];
            v
        };
        let (p, q) = (r(), r());
        let iw = ((p[0] + p[2]).min(q[0] + q[2]) - p[0].max(q[0])).max(0);
        let ih = ((p[1] + p[3]).min(q[1] + q[3]) - p[1].max(q[1])).max(0);
        let inter = iw * ih;
        let union = p[2] * p[3] + q[2] * q[3] - inter;
        let expected = if inter == 0 { 0.0 } else { inter as f64 / union as f64 };
        let a = AxisRect::new(p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64).unwrap();
        let b = AxisRect::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64).unwrap();
        if rect_iou(&a, &b) != expected || a.iou(&b) != expected {
            exact_misses += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 0.01 && exact_misses == 0 && secs < 30.0,
        format!("max |clip - raster| = {worst:.5} over 500 pairs; axis-aligned exact on 2000 pairs; {secs:.1}s"),
        format!("max error {worst:.5}, {exact_misses} inexact axis-aligned pairs, {secs:.1}s"),
    )
}

// --------------------------------------------------------------- partition

fn plain_iou(a: &AxisRect, b: &AxisRect) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

fn plain_tiou(g: &AxisRect, k: &AxisRect) -> f64 {
    let iw = (g.x + g.w).min(k.x + k.w) - g.x.max(k.x);
    let ih = (g.y + g.h).min(k.y + k.h) - g.y.max(k.y);
    if iw <= 0.0 || ih <= 0.0 {
        0.0
    } else {
        iw * ih / (g.w * g.h)
    }
}

fn partition_audit() -> Outcome {
    let planner = Planner::default();
    let cfg = GenConfig::default();
    let (mut pos, mut neg, mut bad, mut boundary) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..1000u64 {
        let rec = gen_record(&cfg, 77, &format!("audit-{i}")).map_err(|e| e.to_string())?;
        let scene = rec.scene();
        let region = scene.objects[i as usize % scene.objects.len()].bbox;
        let pool = planner.gen_proposals(&scene, i).map_err(|e| e.to_string())?;
        let gts: Vec<AxisRect> = scene.grasps.iter().map(|g| axis_envelope(&g.rect)).collect();
        let sampled = planner.kgpn_sample(&scene, &pool, &region);
        for p in sampled.positives.iter().chain(&sampled.negatives) {
            let iou = gts.iter().map(|g| plain_iou(&p.envelope, g)).fold(0.0, f64::max);
            let t = plain_tiou(&p.envelope, &region);
            if (iou - 0.5).abs() < 1e-12 || (t - 0.5).abs() < 1e-12 {
                boundary += 1;
            }
            let ok = iou > 0.5 && t > 0.5;
            match p.label {
                Label::Positive => {
                    pos += 1;
                    bad += !ok as usize;
                }
                Label::Negative => {
                    neg += 1;
                    bad += ok as usize;
                }
            }
        }
    }
    check(
        bad == 0,
        format!("{pos} positives and {neg} negatives over 1000 sets, 0 exceptions ({boundary} at the threshold)"),
        format!("{bad} mislabelled proposals out of {}", pos + neg),
    )
}

// ------------------------------------------------------------------ oracle

fn oracle_pipeline() -> Outcome {
    let corpus = gen_synthetic(200, 31, &GenConfig::default()).map_err(|e| e.to_string())?;
    let r = evaluate(&corpus.scenes(), &Method::ORACLE, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let (r1, p1) = (r.recall[&1], r.precision[&1]);
    check(
        r1 == 1.0 && p1 == 1.0,
        format!("R@1 = {r1}, P@1 = {p1} on 200 scenes"),
        format!("R@1 = {r1}, P@1 = {p1}"),
    )
}

// ------------------------------------------------------------ intervention

fn intervention_trend() -> Outcome {
    let scenes = gen_synthetic(500, 41, &GenConfig::default()).map_err(|e| e.to_string())?.scenes();
    let cfg = EvalConfig::default();
    let eps = 0.4;
    let reports = sweep_intervention(&scenes, eps, &DEFAULT_RHO_GRID, &cfg).map_err(|e| e.to_string())?;
    let oracle = evaluate(&scenes, &Method::ORACLE, &cfg).map_err(|e| e.to_string())?;
    let f1s: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    let monotone = f1s.windows(2).all(|w| w[0] <= w[1]);
    let matches_oracle = f1s[4].to_bits() == oracle.f1.to_bits();
    let mut worst: f64 = 0.0;
    for (r, rho) in reports.iter().zip(DEFAULT_RHO_GRID) {
        let residual = r.residual_error_rate.unwrap_or(f64::NAN);
        worst = worst.max((residual - eps * (1.0 - rho)).abs());
    }
    let shown: Vec<String> = f1s.iter().map(|f| format!("{f:.3}")).collect();
    check(
        monotone && matches_oracle && worst <= 0.02,
        format!(
            "F1 over rho 0..1 = [{}], F1(1) = oracle {:.3}, max residual deviation {worst:.4}",
            shown.join(", "),
            oracle.f1
        ),
        format!(
            "F1 = [{}], oracle {:.3}, monotone {monotone}, residual deviation {worst:.4}",
            shown.join(", "),
            oracle.f1
        ),
    )
}

// ---------------------------------------------------------------- baselines

fn baseline_ordering() -> Outcome {
    let gen = GenConfig {
        require_stack: true,
        ..Default::default()
    };
    let scenes = gen_synthetic(500, 53, &gen).map_err(|e| e.to_string())?.scenes();
    let cfg = EvalConfig::default();
    let r1 = |m: Method| evaluate(&scenes, &m, &cfg).map(|r| r.recall[&1]).map_err(|e| e.to_string());
    let e2e = r1(Method::End2End)?;
    let sg = r1(Method::SceneGraph { flip: 0.1 })?;
    let st = r1(Method::ORACLE)?;
    check(
        sg - e2e > 0.05 && st - sg > 0.05,
        format!("R@1 End2End {e2e:.3} < SceneGraph(0.1) {sg:.3} < SceneText(oracle) {st:.3}"),
        format!("R@1 End2End {e2e:.3}, SceneGraph(0.1) {sg:.3}, SceneText(oracle) {st:.3}"),
    )
}

// ------------------------------------------------------------------- losses

fn lse(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn huber(x: &[f64], t: &[f64]) -> f64 {
    x.iter()
        .zip(t)
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d < 1.0 {
                d * d / 2.0
            } else {
                d - 0.5
            }
        })
        .sum()
}

/// Recomputes the three losses straight from logits.
fn oracle_losses(obj: &TotalObjective, x: &[f64]) -> (f64, f64, f64) {
    let (a, rest) = x.split_at(obj.proposals.dim());
    let (b, c) = rest.split_at(obj.orientations.dim());
    let mut lp = 0.0;
    for (k, &(pos, t)) in obj.proposals.targets.iter().enumerate() {
        let z = &a[6 * k..6 * k + 6];
        lp += lse(&z[..2]) - z[pos as usize];
        if pos {
            lp += obj.proposals.lambda1 * huber(&z[2..], &t);
        }
    }
    let stride = ANGLE_CLASSES + 4;
    let mut lg = 0.0;
    for (k, &(cls, t)) in obj.orientations.targets.iter().enumerate() {
        let z = &b[stride * k..stride * (k + 1)];
        lg += lse(&z[..ANGLE_CLASSES]) - z[cls];
        if cls != 0 {
            lg += obj.orientations.lambda2 * huber(&z[ANGLE_CLASSES..], &t);
        }
    }
    let mut ls = 0.0;
    for (k, &s) in obj.surfaces.targets.iter().enumerate() {
        let z = &c[2 * k..2 * k + 2];
        ls += lse(z) - z[s as usize];
    }
    (lp, lg, ls)
}

fn random_objective(rng: &mut ChaCha8Rng) -> (TotalObjective, Vec<f64>) {
    let n = rng.random_range(1..6);
    let box4 = |rng: &mut ChaCha8Rng| -> [f64; 4] { std::array::from_fn(|_| rng.random_range(-3.0..3.0)) };
    let obj = TotalObjective {
        proposals: ProposalObjective {
            targets: (0..n).map(|_| (rng.random_bool(0.5), box4(rng))).collect(),
            lambda1: rng.random_range(0.1..3.0),
            reduction: Reduction::Sum,
        },
        orientations: OrientationObjective {
            targets: (0..n).map(|_| (rng.random_range(0..ANGLE_CLASSES), box4(rng))).collect(),
            lambda2: rng.random_range(0.1..3.0),
            reduction: Reduction::Sum,
        },
        surfaces: SurfaceObjective {
            targets: (0..n).map(|_| rng.random_bool(0.5)).collect(),
            reduction: Reduction::Sum,
        },
    };
    let x = (0..obj.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
    (obj, x)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn loss_verification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_value: f64 = 0.0;
    for _ in 0..100 {
        let (obj, x) = random_objective(&mut rng);
        let batch = obj.batch(&x);
        let (lp, lg, ls) = oracle_losses(&obj, &x);
        let got_p = loss_p(&batch.proposals, obj.proposals.lambda1, Reduction::Sum).map_err(|e| e.to_string())?;
        let got_g = loss_g(&batch.orientations, obj.orientations.lambda2, Reduction::Sum).map_err(|e| e.to_string())?;
        let got_s = loss_s(&batch.surfaces, Reduction::Sum).map_err(|e| e.to_string())?;
        let got_t = loss_total(&batch, obj.proposals.lambda1, obj.orientations.lambda2, Reduction::Sum)
            .map_err(|e| e.to_string())?;
        for (a, b) in [(got_p, lp), (got_g, lg), (got_s, ls), (got_t, lp + lg + ls)] {
            worst_value = worst_value.max(rel(a, b));
        }
    }
    let mut worst_grad: f64 = 0.0;
    let mut checked = 0;
    while checked < 100 {
        let (obj, x) = random_objective(&mut rng);
        if obj.kink_margin(&x) <= 1e-3 {
            continue;
        }
        let gc = grad_check(&obj, &x, 1e-5);
        if gc.perturbed || gc.at_kink {
            return Err("non-kink point was perturbed".into());
        }
        worst_grad = worst_grad.max(gc.max_rel_error);
        checked += 1;
    }
    let t = [0.5, -1.0, 2.0, 0.0];
    let mut rho = [0.0; ANGLE_CLASSES];
    rho[4] = 1.0;
    let perfect = loss_total(
        &graspwise_core::losses::HeadBatch {
            proposals: vec![
                ProposalPrediction { p: [0.0, 1.0], t, p_star: true, t_star: t },
                ProposalPrediction { p: [1.0, 0.0], t: [9.0; 4], p_star: false, t_star: t },
            ],
            orientations: vec![OrientationPrediction { rho, beta: t, rho_star: 4, beta_star: t }],
            surfaces: vec![SurfacePrediction { s: [0.0, 1.0], s_star: true }],
        },
        1.0,
        1.0,
        Reduction::Sum,
    )
    .map_err(|e| e.to_string())?;
    check(
        worst_value <= 1e-10 && worst_grad < 1e-4 && perfect == 0.0,
        format!("value rel err {worst_value:.1e} on 100 batches, gradient rel err {worst_grad:.1e} at 100 points, perfect loss {perfect}"),
        format!("value rel err {worst_value:.1e}, gradient rel err {worst_grad:.1e}, perfect loss {perfect}"),
    )
}

// ----------------------------------------------------------------- language

fn language_round_trip() -> Outcome {
    let lex = Lexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut classes: Vec<&str> = DEFAULT_CLASSES.to_vec();
    let mut pairs = Vec::new();
    // multi-word classes are always exercised
    pairs.push(("mobile phone", "remote controller"));
    pairs.push(("box", "mobile phone"));
    while pairs.len() < 20 {
        classes.shuffle(&mut rng);
        pairs.push((classes[0], classes[1]));
    }
    let (mut total, mut failed) = (0, 0);
    for &(s, o) in &pairs {
        for p in Predicate::ALL {
            for k in 0..templates(p).len() {
                total += 1;
                let t = RelationTriple::new(s, p, o);
                let ok = generate(&lex, &t, k as u64)
                    .ok()
                    .and_then(|d| parse(&lex, &d.text).ok())
                    .is_some_and(|parsed| parsed.triple.same_statement(&t));
                failed += !ok as usize;
            }
        }
    }
    check(
        failed == 0,
        format!("{total}/{total} sentences recovered (4 relations, every template, 20 class pairs)"),
        format!("{failed} of {total} sentences not recovered"),
    )
}

// ------------------------------------------------------------------ closure

fn closure_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6usize);
        let mut order: Vec<u32> = (1..=n as u32).collect();
        order.shuffle(&mut rng);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.35) {
                    edges.push((order[i], order[j]));
                }
            }
        }
        let objects: Vec<ObjectInstance> = (1..=n as u32)
            .map(|id| ObjectInstance {
                id,
                class_name: format!("c{id}"),
                bbox: AxisRect::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0), 30.0, 30.0).unwrap(),
            })
            .collect();
        let graph = closure(&RelationshipTree::new(edges.iter().copied()), &objects).map_err(|e| e.to_string())?;
        // Warshall over the child -> parent relation
        let mut reach = vec![vec![false; n + 1]; n + 1];
        for &(c, p) in &edges {
            reach[c as usize][p as usize] = true;
        }
        for k in 1..=n {
            for i in 1..=n {
                for j in 1..=n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        for i in 1..=n {
            for j in 1..=n {
                if i == j {
                    continue;
                }
                let (a, b) = (i as u32, j as u32);
                if graph.holds(a, Predicate::On, b) != reach[i][j] || graph.holds(b, Predicate::Under, a) != reach[i][j] {
                    mismatches += 1;
                }
            }
        }
    }
    let objects = vec![
        ObjectInstance { id: 1, class_name: "mobile phone".into(), bbox: AxisRect::new(30.0, 30.0, 40.0, 20.0).unwrap() },
        ObjectInstance { id: 2, class_name: "box".into(), bbox: AxisRect::new(20.0, 20.0, 80.0, 60.0).unwrap() },
        ObjectInstance { id: 3, class_name: "notebook".into(), bbox: AxisRect::new(0.0, 0.0, 150.0, 110.0).unwrap() },
    ];
    let g = closure(&RelationshipTree::new([(1, 2), (2, 3)]), &objects).map_err(|e| e.to_string())?;
    let phone_on_notebook = g.holds(1, Predicate::On, 3);
    check(
        mismatches == 0 && phone_on_notebook,
        "closure equals reachability on 1000 DAGs; mobile phone ON notebook derived".to_string(),
        format!("{mismatches} mismatched pairs; phone on notebook: {phone_on_notebook}"),
    )
}

// ------------------------------------------------------------------ session

fn three_object_scene() -> Scene {
    let bbox = |x, y, w, h| AxisRect::new(x, y, w, h).unwrap();
    let grasp = |id, cx, cy, theta, w, h, surface| GraspAnnotation {
        object_id: id,
        rect: GraspRect::new(cx, cy, theta, w, h).unwrap(),
        surface,
    };
    Scene {
        id: "hitl-3".into(),
        image_size: ImageSize { width: 640, height: 480 },
        objects: vec![
            ObjectInstance { id: 1, class_name: "box".into(), bbox: bbox(60.0, 100.0, 220.0, 180.0) },
            ObjectInstance { id: 2, class_name: "mobile phone".into(), bbox: bbox(90.0, 130.0, 110.0, 60.0) },
            ObjectInstance { id: 3, class_name: "cup".into(), bbox: bbox(420.0, 200.0, 80.0, 80.0) },
        ],
        tree: RelationshipTree::new([(2, 1)]),
        grasps: vec![
            grasp(1, 240.0, 240.0, 90.0, 50.0, 15.0, false),
            grasp(2, 145.0, 160.0, 0.0, 50.0, 15.0, true),
            grasp(3, 460.0, 240.0, 30.0, 40.0, 12.0, true),
        ],
    }
}

fn run_script(state: &mut SessionState, rng: &mut ChaCha8Rng, texts: &[String]) {
    let mut clock = TickClock(rng.random_range(0..1_000_000));
    for _ in 0..12 {
        let r = if rng.random_bool(0.3) {
            let text = &texts[rng.random_range(0..texts.len())];
            session::intervene(state, text, &mut clock)
        } else {
            session::step(state, &mut clock)
        };
        let _ = r;
    }
}

fn session_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scene = three_object_scene();
    let corrupt = SessionConfig {
        seed: 12,
        noise: graspwise_core::noise::NoiseConfig {
            describe_error_rate: 1.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let oracle = session::start("probe", scene.clone(), SessionConfig::default(), &mut TickClock(0))
        .map_err(|e| e.to_string())?
        .description
        .ok_or("no oracle description")?;

    let mut clock = TickClock(1000);
    let mut s = session::start("episode", scene.clone(), corrupt, &mut clock).map_err(|e| e.to_string())?;
    if !s.description.as_ref().is_some_and(|d| d.corrupted) {
        return Err("forced corruption did not corrupt".into());
    }
    session::intervene(&mut s, &oracle.text, &mut clock).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        session::step(&mut s, &mut clock).map_err(|e| e.to_string())?;
    }
    let path = dir.path().join("episode.jsonl");
    let mut log = EventLog::open(&path, true).map_err(|e| e.to_string())?;
    for e in &s.history {
        log.append(e).map_err(|e| e.to_string())?;
    }
    let events = read_log(&path).map_err(|e| e.to_string())?;
    let rebuilt = replay(&events).map_err(|e| e.to_string())?;
    let exact = serde_json::to_string(&rebuilt).unwrap() == serde_json::to_string(&s).unwrap() && rebuilt == s;
    let export = export_session_samples(&events);
    let humans = export.set.count(Source::Human);

    // random scripts over generated scenes
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let corpus = gen_synthetic(40, 61, &GenConfig::default()).map_err(|e| e.to_string())?;
    let mut replayed = 0;
    for (i, rec) in corpus.records.iter().enumerate() {
        let cfg = SessionConfig {
            seed: i as u64,
            noise: graspwise_core::noise::NoiseConfig {
                describe_error_rate: 0.5,
                ground_error_rate: 0.2,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut texts: Vec<String> = rec.descriptions.iter().map(|d| d.text.clone()).collect();
        texts.push("nothing here".into());
        let mut st = session::start(&format!("r{i}"), rec.scene(), cfg, &mut TickClock(0)).map_err(|e| e.to_string())?;
        run_script(&mut st, &mut rng, &texts);
        let back = replay(&st.history).map_err(|e| e.to_string())?;
        if serde_json::to_string(&back).unwrap() == serde_json::to_string(&st).unwrap() {
            replayed += 1;
        }
    }
    check(
        exact && s.success == Some(true) && humans == 1 && export.set.records.len() == 1 && replayed == 40,
        format!(
            "scripted episode replays bit-exact and exports {humans} HUMAN record; {replayed}/40 random scripts replay exactly"
        ),
        format!(
            "exact {exact}, success {:?}, HUMAN records {humans} of {}, random replays {replayed}/40",
            s.success,
            export.set.records.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("geometry oracle", geometry_oracle),
        ("proposal partition audit", partition_audit),
        ("oracle end-to-end", oracle_pipeline),
        ("intervention trend", intervention_trend),
        ("baseline ordering", baseline_ordering),
        ("loss verification", loss_verification),
        ("language round trip", language_round_trip),
        ("closure oracle", closure_oracle),
        ("session determinism", session_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let out = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(msg) => println!("PASS  {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
