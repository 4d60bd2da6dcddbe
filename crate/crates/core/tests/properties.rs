mod common;

use common::{random, rng, toy_cell, toy_hints};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use retloc::coarse::{
    attention, point_relations, ranking_loss, retrieve_topk, rsa, CellIndex, CoarseConfig, CoarseModel,
};
use retloc::encoder::{encode_instance, InstanceEncoder};
use retloc::fine::{combine_prediction, extract_matches, log_sinkhorn, Vote};
use retloc::language::{encode_hint, flip_hint, generate_hint, parse_hint, render, Axis, Color, Direction, HintEmbedder, WordGroups};
use retloc::pipeline::eval::localization_recall;
use retloc::scene::{cluster_stuff, generate_scene, slice_cells, Cell, ClassLabel, Instance, Point, SceneConfig};
use retloc::tensor::{ParamSet, Tape, Tensor, TensorError};

fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn small_scene() -> SceneConfig {
    SceneConfig {
        width: 60.0,
        height: 60.0,
        ..SceneConfig::default()
    }
}

// ---- tensor engine ----

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| tensor_strategy(r, c)), scale in 0.1f64..50.0) {
        let mut t = Tape::new();
        let a = t.constant(x);
        let a = t.scale(a, scale);
        let s = t.softmax_rows(a).unwrap();
        let s = t.value(s);
        for r in 0..s.rows() {
            prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_replay_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut g = rng(seed);
            let mut t = Tape::new();
            let a = t.leaf(random(&[4, 3], &mut g));
            let b = t.leaf(random(&[3, 5], &mut g));
            let m = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(m).unwrap();
            let l = t.sum(s);
            let l = t.mul(l, l).unwrap();
            t.backward(l).unwrap();
            (t.value(m).data().to_vec(), t.grad(a).unwrap().into_data(), t.grad(b).unwrap().into_data())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn second_backward_on_a_tape_is_rejected() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let l = t.sum(a);
    t.backward(l).unwrap();
    assert!(matches!(t.backward(l), Err(TensorError::TapeConsumed)));
}

// ---- scene ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn overlapping_cells_duplicate_points(seed in 0u64..1000, stride in prop::sample::select(vec![10.0, 15.0, 30.0])) {
        let scene = generate_scene(&small_scene(), seed).unwrap();
        let cells = slice_cells(&scene, 30.0, stride).unwrap();
        let sliced: usize = cells.iter().map(Cell::point_count).sum();
        if stride == 30.0 {
            prop_assert_eq!(sliced, scene.point_count());
        } else {
            prop_assert!(sliced > scene.point_count());
        }
    }

    #[test]
    fn clustering_keeps_stuff_points(seed in 0u64..1000) {
        let scene = generate_scene(&small_scene(), seed).unwrap();
        let stuff = |s: &retloc::scene::Scene| s.instances.iter().filter(|i| i.is_stuff()).map(Instance::point_count).sum::<usize>();
        let clustered = cluster_stuff(&scene).unwrap();
        prop_assert_eq!(stuff(&scene), stuff(&clustered));
        prop_assert_eq!(scene.point_count(), clustered.point_count());
    }

    #[test]
    fn scene_generation_is_pure(seed in any::<u64>()) {
        let a = generate_scene(&small_scene(), seed).unwrap();
        let b = generate_scene(&small_scene(), seed).unwrap();
        prop_assert_eq!(cluster_stuff(&a).unwrap(), cluster_stuff(&b).unwrap());
    }
}

// ---- language ----

fn blob(center: [f64; 2]) -> Instance {
    let pts: Vec<Point> = (0..5)
        .map(|k| {
            let o = k as f64 * 0.1 - 0.2;
            [center[0] + o, center[1] - o, 1.0, 0.5, 0.5, 0.5]
        })
        .collect();
    Instance::new(1, ClassLabel::Pole, pts).unwrap()
}

fn mirror(p: [f64; 2], axis: Axis, m: f64) -> [f64; 2] {
    match axis {
        Axis::X => [2.0 * m - p[0], p[1]],
        Axis::Y => [p[0], 2.0 * m - p[1]],
    }
}

proptest! {
    #[test]
    fn flipped_hint_matches_mirrored_geometry(
        cx in 0.0f64..30.0, cy in 0.0f64..30.0, r in 0.0f64..20.0, a in 0.0f64..std::f64::consts::TAU,
        x_axis in any::<bool>(), m in 0.0f64..30.0,
    ) {
        // keep clear of sector boundaries and the on-top radius
        let sector = a / std::f64::consts::FRAC_PI_4 - 0.5;
        prop_assume!((sector - sector.round()).abs() > 1e-6);
        prop_assume!((r - retloc::language::ON_TOP_RADIUS).abs() > 1e-6);
        let axis = if x_axis { Axis::X } else { Axis::Y };
        let inst = blob([cx, cy]);
        let c = inst.center_2d();
        let target = [c[0] + r * a.cos(), c[1] + r * a.sin()];
        let flipped = flip_hint(&generate_hint(target, &inst).unwrap(), axis);
        let pts: Vec<Point> = inst
            .points()
            .iter()
            .map(|p| {
                let q = mirror([p[0], p[1]], axis, m);
                [q[0], q[1], p[2], p[3], p[4], p[5]]
            })
            .collect();
        let mirrored = generate_hint(mirror(target, axis, m), &inst.with_points(pts).unwrap()).unwrap();
        prop_assert_eq!(flipped.groups.direction, mirrored.groups.direction);
    }

    #[test]
    fn parse_inverts_render(d in 0usize..9, colors in prop::collection::vec(0usize..10, 1..3), class in 0usize..8) {
        let g = WordGroups {
            direction: vec![Direction::ALL[d].token().into()],
            color: colors.iter().map(|&c| Color::ALL[c].token().to_string()).collect(),
            class: vec![ClassLabel::ALL[class].token().into()],
        };
        prop_assert_eq!(parse_hint(&render(&g)).unwrap(), g);
    }

    #[test]
    fn hint_encoding_ignores_order_within_a_group(seed in any::<u64>(), colors in prop::collection::vec(0usize..10, 2..5)) {
        let mut g = rng(seed);
        let mut params = ParamSet::new();
        let emb = HintEmbedder::new("h", 12, &mut params, &mut g).unwrap();
        let words: Vec<String> = colors.iter().map(|&c| Color::ALL[c].token().to_string()).collect();
        let mut shuffled = words.clone();
        shuffled.shuffle(&mut g);
        let enc = |color: Vec<String>| {
            let h = WordGroups { direction: vec!["north".into()], color, class: vec!["car".into()] };
            let mut t = Tape::new();
            let p = t.bind_frozen(&params);
            let v = encode_hint(&mut t, &p, &h, &emb).unwrap();
            t.value(v).data().to_vec()
        };
        prop_assert!(max_abs_diff(&enc(words), &enc(shuffled)) < 1e-12);
    }
}

// ---- instance encoder ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instance_encoding_is_order_free_and_max_pool_idempotent(seed in any::<u64>(), n in 1usize..30) {
        let mut g = rng(seed);
        let mut params = ParamSet::new();
        let enc = InstanceEncoder::new("e", 24, &mut params, &mut g).unwrap();
        let pts: Vec<Point> = (0..n)
            .map(|_| [g.gen_range(0.0..5.0), g.gen_range(0.0..5.0), g.gen_range(0.0..3.0), g.gen(), g.gen(), g.gen()])
            .collect();
        let encode = |pts: Vec<Point>| {
            let inst = Instance::new(0, ClassLabel::Car, pts).unwrap();
            let mut t = Tape::new();
            let p = t.bind_frozen(&params);
            let v = encode_instance(&mut t, &p, &inst, [0.0, 0.0], 30.0, &enc).unwrap();
            t.value(v).data().to_vec()
        };
        let base = encode(pts.clone());
        let mut perm = pts.clone();
        perm.shuffle(&mut g);
        let permuted = encode(perm);
        let half = enc.d / 2;
        prop_assert_eq!(&base[..half], &permuted[..half]);
        prop_assert!(max_abs_diff(&base, &permuted) < 1e-12);
        let doubled = encode(pts.iter().chain(&pts).copied().collect());
        prop_assert_eq!(&base[..half], &doubled[..half]);
        // everything but the count slot is unchanged
        let count_width = enc.count.d_out;
        let cut = enc.d - count_width;
        prop_assert!(max_abs_diff(&base[..cut], &doubled[..cut]) < 1e-12);
        prop_assert!(base[cut..] != doubled[cut..]);
    }
}

// ---- coarse stage ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rsa_without_relations_is_attention(seed in any::<u64>(), n in 1usize..7, m in 1usize..5, dh in 1usize..6, dv in 1usize..6) {
        let mut g = rng(seed);
        let mut t = Tape::new();
        let q = t.constant(random(&[m, dh], &mut g));
        let k = t.constant(random(&[n, dh], &mut g));
        let v = t.constant(random(&[n, dv], &mut g));
        let r = t.constant(Tensor::zeros(&[n, n, dv]));
        let a = attention(&mut t, q, k, v).unwrap();
        let b = rsa(&mut t, q, k, v, r).unwrap();
        prop_assert!(max_abs_diff(t.value(a).data(), t.value(b).data()) < 1e-12);
    }

    #[test]
    fn point_relations_are_antisymmetric_and_translation_free(seed in any::<u64>(), n in 1usize..7, d in 1usize..6) {
        let mut g = rng(seed);
        let centres: Vec<f64> = (0..n * 3).map(|_| g.gen_range(0.0..30.0)).collect();
        let shift = [g.gen_range(-50.0..50.0), g.gen_range(-50.0..50.0), g.gen_range(-5.0..5.0)];
        let moved: Vec<f64> = centres.iter().enumerate().map(|(i, c)| c + shift[i % 3]).collect();
        let w = random(&[3, d], &mut g);
        let rel = |c: Vec<f64>| {
            let mut t = Tape::new();
            let c = t.constant(Tensor::new(vec![n, 3], c).unwrap());
            let w = t.constant(w.clone());
            let r = point_relations(&mut t, c, w).unwrap();
            t.value(r).clone()
        };
        let r = rel(centres);
        let at = |t: &Tensor, i: usize, j: usize, k: usize| t.data()[(i * n + j) * d + k];
        for i in 0..n {
            for j in 0..n {
                for k in 0..d {
                    prop_assert!((at(&r, i, j, k) + at(&r, j, i, k)).abs() < 1e-12);
                }
            }
        }
        prop_assert!(max_abs_diff(r.data(), rel(moved).data()) < 1e-12);
    }

    #[test]
    fn ranking_loss_is_the_sum_of_hinges(seed in any::<u64>(), b in 2usize..6, d in 1usize..5, alpha in 0.01f64..1.0) {
        let mut g = rng(seed);
        let c = random(&[b, d], &mut g);
        let q = random(&[b, d], &mut g);
        let s = |m: usize, n: usize| (0..d).map(|k| c.at(m, k) * q.at(n, k)).sum::<f64>();
        let mut expected = 0.0;
        let mut saturated = true;
        for m in 0..b {
            for n in (0..b).filter(|&n| n != m) {
                for h in [alpha - s(m, m) + s(m, n), alpha - s(m, m) + s(n, m)] {
                    expected += h.max(0.0);
                    saturated &= h <= 0.0;
                }
            }
        }
        let mut t = Tape::new();
        let (cv, qv) = (t.constant(c.clone()), t.constant(q.clone()));
        let l = ranking_loss(&mut t, cv, qv, alpha).unwrap();
        let l = t.value(l).item();
        prop_assert!(l >= 0.0);
        prop_assert!((l - expected).abs() < 1e-12);
        prop_assert_eq!(l == 0.0, saturated);
    }

    #[test]
    fn retrieval_matches_brute_force(seed in any::<u64>(), n in 1usize..40, d in 1usize..6, k in 1usize..10) {
        let mut g = rng(seed);
        let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        // coarse values make exact ties likely
        let emb: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| g.gen_range(-2i32..3) as f64).collect()).collect();
        let query: Vec<f64> = (0..d).map(|_| g.gen_range(-2i32..3) as f64).collect();
        let index = CellIndex { ids: ids.clone(), embeddings: emb.clone() };
        let mut oracle: Vec<(f64, usize)> = emb
            .iter()
            .zip(&ids)
            .map(|(e, &id)| (e.iter().zip(&query).map(|(a, b)| a * b).sum(), id))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = oracle.iter().take(k).map(|x| x.1).collect();
        prop_assert_eq!(retrieve_topk(&query, &index, k), expected);
    }
}

fn tiny_coarse(point: bool, hint: bool) -> CoarseModel {
    let cfg = CoarseConfig {
        d: 12,
        heads: 2,
        layers: 1,
        hidden: 16,
        point_relations: point,
        hint_relations: hint,
    };
    CoarseModel::new(cfg, 5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coarse_encoders_ignore_element_order(seed in any::<u64>(), n in 1usize..7, h in 1usize..7) {
        let model = tiny_coarse(true, true);
        let mut g = rng(seed);
        let cell = toy_cell(0, n, &mut g);
        let mut shuffled = cell.clone();
        shuffled.instances.shuffle(&mut g);
        let hints = toy_hints(h, &mut g);
        let mut perm: Vec<_> = hints.iter().collect();
        perm.shuffle(&mut g);
        let c = model.cell_embeddings(&[&cell, &shuffled]).unwrap();
        prop_assert!(max_abs_diff(&c[0], &c[1]) < 1e-9);
        let q = model.query_embeddings(&[hints.iter().collect(), perm]).unwrap();
        prop_assert!(max_abs_diff(&q[0], &q[1]) < 1e-9);
    }

    #[test]
    fn disabled_relations_equal_zero_relation_rsa(seed in any::<u64>()) {
        let plain = tiny_coarse(false, false);
        let mut full = tiny_coarse(true, true);
        for p in full.params.iter_mut() {
            match plain.params.by_name(&p.name) {
                Some(q) => p.value = q.value.clone(),
                None => {
                    assert!(p.name.contains(".rel."), "{}", p.name);
                    p.value = Tensor::zeros(&p.value.shape().to_vec());
                }
            }
        }
        let mut g = rng(seed);
        let cell = toy_cell(0, 4, &mut g);
        let hints = toy_hints(3, &mut g);
        let q = vec![hints.iter().collect::<Vec<_>>()];
        prop_assert!(max_abs_diff(&plain.cell_embeddings(&[&cell]).unwrap()[0], &full.cell_embeddings(&[&cell]).unwrap()[0]) < 1e-12);
        prop_assert!(max_abs_diff(&plain.query_embeddings(&q).unwrap()[0], &full.query_embeddings(&q).unwrap()[0]) < 1e-12);
    }

    #[test]
    fn each_toggle_touches_only_its_branch(seed in any::<u64>()) {
        let point_only = tiny_coarse(true, false);
        let full = tiny_coarse(true, true);
        let mut g = rng(seed);
        let cell = toy_cell(0, 4, &mut g);
        // same seed and same cell branch parameters, so the cell side agrees
        let a = point_only.cell_embeddings(&[&cell]).unwrap();
        let b = full.cell_embeddings(&[&cell]).unwrap();
        let cell_params_equal = point_only
            .params
            .iter()
            .filter(|p| p.name.starts_with("coarse.cell."))
            .all(|p| full.params.by_name(&p.name).map(|q| q.value == p.value).unwrap_or(false));
        if cell_params_equal {
            prop_assert!(max_abs_diff(&a[0], &b[0]) < 1e-12);
        }
        prop_assert!(full.params.iter().any(|p| p.name.starts_with("coarse.query.") && p.name.contains(".rel.")));
        prop_assert!(!point_only.params.iter().any(|p| p.name.starts_with("coarse.query.") && p.name.contains(".rel.")));
        prop_assert!(point_only.params.iter().any(|p| p.name.starts_with("coarse.cell.") && p.name.contains(".rel.")));
    }
}

// ---- fine stage ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sinkhorn_marginals_hold(scores in tensor_strategy(7, 17)) {
        let mut t = Tape::new();
        let s = t.constant(scores);
        let lp = log_sinkhorn(&mut t, s, 100).unwrap();
        let plan = t.exp(lp);
        let plan = t.value(plan);
        let (h, p) = (6, 16);
        prop_assert!(plan.data().iter().all(|&v| v >= 0.0));
        for r in 0..=h {
            let want = if r < h { 1.0 } else { p as f64 };
            prop_assert!((plan.row(r).iter().sum::<f64>() - want).abs() < 1e-6);
        }
        for c in 0..=p {
            let want = if c < p { 1.0 } else { h as f64 };
            let got: f64 = (0..=h).map(|r| plan.at(r, c)).sum();
            prop_assert!((got - want).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn extracted_matches_form_a_partial_injection(h in 1usize..8, p in 1usize..12, seed in any::<u64>(), threshold in 0.0f64..0.5) {
        let mut g = rng(seed);
        // coarse values make ties likely
        let plan = Tensor::new(vec![h + 1, p + 1], (0..(h + 1) * (p + 1)).map(|_| g.gen_range(0..5) as f64 / 8.0).collect()).unwrap();
        let ms = extract_matches(&plan, threshold);
        let mut hints: Vec<_> = ms.iter().map(|m| m.hint).collect();
        let mut insts: Vec<_> = ms.iter().map(|m| m.instance).collect();
        hints.sort();
        insts.sort();
        hints.dedup();
        insts.dedup();
        prop_assert_eq!(hints.len(), ms.len());
        prop_assert_eq!(insts.len(), ms.len());
        for m in &ms {
            prop_assert!(m.hint < h && m.instance < p && m.confidence > threshold);
        }
    }

    #[test]
    fn combined_prediction_ignores_scale_and_order(
        votes in prop::collection::vec(((-50.0f64..50.0, -50.0f64..50.0), (-5.0f64..5.0, -5.0f64..5.0), 0.01f64..1.0), 1..8),
        scale in 0.01f64..100.0, seed in any::<u64>(),
    ) {
        let votes: Vec<Vote> = votes
            .into_iter()
            .map(|((cx, cy), (ox, oy), w)| Vote { center: [cx, cy], offset: [ox, oy], confidence: w })
            .collect();
        let base = combine_prediction(&votes, [0.0, 0.0]);
        let scaled: Vec<Vote> = votes.iter().map(|v| Vote { confidence: v.confidence * scale, ..*v }).collect();
        let mut shuffled = votes.clone();
        shuffled.shuffle(&mut rng(seed));
        for other in [combine_prediction(&scaled, [0.0, 0.0]), combine_prediction(&shuffled, [0.0, 0.0])] {
            prop_assert!(!other.fallback);
            prop_assert!(max_abs_diff(&base.position, &other.position) < 1e-9);
        }
    }
}

// ---- evaluation ----

proptest! {
    #[test]
    fn localization_success_is_nested(
        preds in prop::collection::vec(prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 10), 1..20),
    ) {
        let positions: Vec<Vec<[f64; 2]>> = preds.iter().map(|q| q.iter().map(|&(x, y)| [x, y]).collect()).collect();
        let targets = vec![[0.0, 0.0]; positions.len()];
        let ks = [1, 2, 5, 10];
        let eps = [1.0, 5.0, 10.0, 15.0, 40.0];
        let m = localization_recall(&positions, &targets, &ks, &eps);
        for (i, &k) in ks.iter().enumerate() {
            for (j, &e) in eps.iter().enumerate() {
                let v = m.get(k, e).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
                // per-query nesting implies the aggregate is monotone
                for &k2 in &ks[i..] {
                    for &e2 in &eps[j..] {
                        prop_assert!(m.get(k2, e2).unwrap() >= v);
                    }
                }
            }
        }
        // per query the success set itself is nested
        for (q, t) in positions.iter().zip(&targets) {
            let single = localization_recall(std::slice::from_ref(q), std::slice::from_ref(t), &ks, &eps);
            for (i, &k) in ks.iter().enumerate() {
                for (j, &e) in eps.iter().enumerate() {
                    if single.get(k, e).unwrap() == 1.0 {
                        for &k2 in &ks[i..] {
                            for &e2 in &eps[j..] {
                                prop_assert_eq!(single.get(k2, e2).unwrap(), 1.0);
                            }
                        }
                    }
                }
            }
        }
    }
}
