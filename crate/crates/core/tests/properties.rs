use proptest::prelude::*;

use evpan::evidential::{
    alpha_from_logits, kl_regularizer, lambda_schedule, log_loss, softmax_confidence, Logits, OneHotTargets,
};
use evpan::fusion::{nms_centers, NmsConfig};
use evpan::io::{AlphaDump, Config};
use evpan::metrics::Evaluator;
use evpan::model::{DirichletField, PointCloud};
use evpan::refine::{pknn_refine, uqr_refine, KPConvLayer, KdTree, KpConvConfig, PknnConfig};
use evpan::{ClassId, ClassTaxonomy, PanopticLabelSet, Prediction};

fn kitti() -> ClassTaxonomy {
    ClassTaxonomy::semantic_kitti()
}

/// Rows of `k` logits with one target class each.
fn logit_rows(max_k: usize) -> impl Strategy<Value = (usize, Vec<f64>, Vec<ClassId>)> {
    (2..=max_k, 1usize..6).prop_flat_map(|(k, n)| {
        (
            Just(k),
            prop::collection::vec(-5.0f64..5.0, n * k),
            prop::collection::vec(0..k as ClassId, n),
        )
    })
}

/// Labels over a few thing and stuff classes plus ignore.
fn labels(n: usize) -> impl Strategy<Value = PanopticLabelSet> {
    let class = prop::sample::select(vec![0 as ClassId, 1, 5, 8, 9, 14, 255]);
    (prop::collection::vec(class, n), prop::collection::vec(0u32..4, n)).prop_map(|(sem, inst)| {
        let inst = sem.iter().zip(inst).map(|(&c, i)| if c < 8 { i } else { 0 }).collect();
        PanopticLabelSet::new(sem, inst).unwrap()
    })
}

fn scan(n: usize) -> impl Strategy<Value = (PanopticLabelSet, PanopticLabelSet, Vec<f64>)> {
    (labels(n), labels(n), prop::collection::vec(0.0f64..=1.0, n))
}

fn peaked(classes: &[ClassId], conf: &[f64], k: usize) -> Prediction {
    let mut p = Vec::new();
    for (&c, &m) in classes.iter().zip(conf) {
        let rest = (1.0 - m) / (k - 1) as f64;
        p.extend((0..k).map(|j| if j == c as usize { m } else { rest }));
    }
    Prediction::from_parts(k, p, conf.iter().map(|m| 1.0 - m).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_ignore_class_order((k, logits, classes) in logit_rows(12), shift in 1usize..12) {
        let n = classes.len();
        let perm: Vec<usize> = (0..k).map(|j| (j + shift) % k).collect();
        let permuted: Vec<f64> = (0..n).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| logits[i * k + j]).collect();
        let inverse: Vec<ClassId> = classes
            .iter()
            .map(|&c| perm.iter().position(|&j| j == c as usize).unwrap() as ClassId)
            .collect();
        let a = alpha_from_logits(&Logits::new(k, logits).unwrap());
        let b = alpha_from_logits(&Logits::new(k, permuted).unwrap());
        let ta = OneHotTargets::from_classes(k, &classes).unwrap();
        let tb = OneHotTargets::from_classes(k, &inverse).unwrap();
        let (la, lb) = (log_loss(&a, &ta).unwrap(), log_loss(&b, &tb).unwrap());
        let (ka, kb) = (kl_regularizer(&a, &ta).unwrap(), kl_regularizer(&b, &tb).unwrap());
        prop_assert!((la - lb).abs() <= 1e-12 * la.abs().max(1.0));
        prop_assert!((ka - kb).abs() <= 1e-10 * ka.abs().max(1.0));
    }

    #[test]
    fn kl_weight_is_bounded_and_monotone(iters in 1u64..500, a in 0u64..20_000, b in 0u64..20_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (lambda_schedule::<f64>(lo, iters), lambda_schedule::<f64>(hi, iters));
        prop_assert!(x <= y);
        prop_assert!((0.0..=0.065).contains(&y));
    }

    #[test]
    fn temperature_keeps_the_argmax((k, logits, _) in logit_rows(10), t in 0.05f64..20.0) {
        let lg = Logits::new(k, logits).unwrap();
        let (base, _) = softmax_confidence(&lg, 1.0);
        let (scaled, conf) = softmax_confidence(&lg, t);
        prop_assert_eq!(base, scaled);
        prop_assert!(conf.iter().all(|&c| c >= 1.0 / k as f64 - 1e-12 && c <= 1.0));
    }

    #[test]
    fn nms_output_is_sorted_and_bounded(
        rings in 1usize..12,
        sectors in 1usize..12,
        seed in prop::collection::vec(0.0f64..1.0, 144),
        top_k in 1usize..10,
    ) {
        let h: Vec<f64> = seed[..rings * sectors].to_vec();
        let cfg = NmsConfig { kernel: 3, threshold: 0.2, top_k };
        let centers = nms_centers(&h, rings, sectors, &cfg).centers;
        prop_assert!(centers.len() <= top_k);
        prop_assert!(centers.iter().all(|c| c.score > 0.2 && h[c.ring * sectors + c.sector] == c.score));
        prop_assert!(centers.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn evaluator_merge_is_order_free(scans in prop::collection::vec(scan(40), 1..6)) {
        let t = kitti();
        let single = |s: &(PanopticLabelSet, PanopticLabelSet, Vec<f64>)| {
            let mut e = Evaluator::new(&t);
            e.add_scan(&s.0, &s.1, &s.2).unwrap();
            e
        };
        let mut forward = Evaluator::new(&t);
        for s in &scans {
            forward.add_scan(&s.0, &s.1, &s.2).unwrap();
        }
        let mut backward = Evaluator::new(&t);
        for s in scans.iter().rev() {
            backward.merge(&single(s)).unwrap();
        }
        prop_assert_eq!(forward.pq_counts(), backward.pq_counts());
        prop_assert_eq!(forward.bins(), backward.bins());
        match (forward.report(), backward.report()) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "reports disagree on failure"),
        }
    }

    #[test]
    fn identical_labels_score_perfectly(gt in labels(60)) {
        prop_assume!(gt.semantic.iter().any(|&c| c != 255));
        let mut e = Evaluator::new(&kitti());
        e.add_scan(&gt, &gt, &vec![0.0; gt.len()]).unwrap();
        let r = e.report().unwrap();
        prop_assert_eq!(r.all.pq, Some(1.0));
        prop_assert_eq!(r.all.miou, Some(1.0));
        prop_assert_eq!(r.all.pece, Some(0.0));
    }

    #[test]
    fn knn_matches_brute_force(
        pts in prop::collection::vec((-5i32..5, -5i32..5, -2i32..2), 2..120),
        k in 1usize..8,
    ) {
        let points: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| [x as f64 * 0.5, y as f64 * 0.5, z as f64]).collect();
        let tree = KdTree::build(points.clone()).unwrap();
        for (q, p) in points.iter().enumerate() {
            let mut brute: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != q)
                .map(|(i, o)| ((o[0] - p[0]).powi(2) + (o[1] - p[1]).powi(2) + (o[2] - p[2]).powi(2), i))
                .collect();
            brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
            brute.truncate(k);
            prop_assert_eq!(tree.knn(p, k, Some(q)), brute);
        }
    }

    #[test]
    fn pknn_leaves_confident_points_alone(
        pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.05f64..0.95), 8..80),
        threshold in 0.0f64..1.0,
    ) {
        let t = kitti();
        let k = t.num_classes();
        let cloud = PointCloud::from_points(&pts.iter().map(|&(x, y, _)| [x, y, 0.0, 0.0]).collect::<Vec<_>>());
        let sem: Vec<ClassId> = pts.iter().map(|&(x, _, _)| if x < 0.0 { 8 } else { 0 }).collect();
        let inst = sem.iter().map(|&c| u32::from(c == 0)).collect();
        let lbl = PanopticLabelSet::new(sem.clone(), inst).unwrap();
        let conf: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let pred = peaked(&sem, &conf, k);
        let (out, u, stats) = pknn_refine(&cloud, &lbl, &pred, &PknnConfig { k: 5, threshold }, &t).unwrap();
        let mut changed = 0;
        for i in 0..pts.len() {
            if conf[i] >= threshold {
                prop_assert_eq!(out.semantic[i], lbl.semantic[i]);
                prop_assert_eq!(u[i], pred.u[i]);
            }
            changed += usize::from(out.semantic[i] != lbl.semantic[i]);
        }
        prop_assert_eq!(changed, stats.changed);
    }

    #[test]
    fn uqr_touches_only_selected(u in prop::collection::vec(0.05f64..1.0, 10..60), n_select in 0usize..80) {
        let t = kitti();
        let k = t.num_classes();
        let n = u.len();
        let cloud = PointCloud::from_points(&(0..n).map(|i| [i as f64 * 0.3, 0.0, 0.0, 0.2]).collect::<Vec<_>>());
        let lbl = PanopticLabelSet::filled(n, 9);
        // S = K/u with the mass on class 9
        let alpha: Vec<f64> = u
            .iter()
            .flat_map(|&v| {
                let s = k as f64 / v;
                let top = s - (k - 1) as f64;
                (0..k).map(move |j| if j == 9 { top } else { 1.0 })
            })
            .collect();
        let alpha = DirichletField::new(k, alpha).unwrap();
        let layer = KPConvLayer::random(k, &KpConvConfig { mid_channels: 8, ..KpConvConfig::default() }, 3);
        let out = uqr_refine(&cloud, &lbl, &alpha, &layer, n_select, &t).unwrap();
        prop_assert_eq!(out.stats.selected, n_select.min(n));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| u[b].partial_cmp(&u[a]).unwrap().then(a.cmp(&b)));
        for &i in &order[n_select.min(n)..] {
            prop_assert_eq!(out.alpha.row(i), alpha.row(i));
            prop_assert_eq!(out.labels.semantic[i], 9);
        }
    }

    #[test]
    fn alpha_dump_bytes_round_trip(k in 2usize..20, rows in prop::collection::vec(1.0f64..1e4, 0..200), with_inst: bool) {
        let n = rows.len() / k;
        let field = DirichletField::new(k, rows[..n * k].to_vec()).unwrap();
        let mut dump = AlphaDump::new(&field);
        if with_inst {
            dump.instances = Some((0..n as u32).collect());
        }
        let bytes = dump.to_bytes().unwrap();
        let back = AlphaDump::from_bytes(std::path::Path::new("mem"), &bytes).unwrap();
        prop_assert_eq!(back, dump);
    }

    #[test]
    fn config_text_round_trip(seed: u64, threshold in 0.0f64..1.0, k in 1usize..30, bins in 1usize..50, sigma in 0.1f64..20.0) {
        let mut c = Config::default();
        c.seed = seed;
        c.pknn.threshold = threshold;
        c.pknn.k = k;
        c.bins = bins;
        c.heatmap_sigma = sigma;
        prop_assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }
}
