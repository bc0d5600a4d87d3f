use dsrl_core::env::{Action, Cell, EnvConfig, Glyph, Variant, WorldState};
use dsrl_core::harness::percent_positive;
use dsrl_core::nn::{maxpool2, upsample2, Conv2d, Tensor};
use dsrl_core::qlearning::{select_action, QConfig, QStore};
use dsrl_core::representation::{nearby, translate, After, AgentIdentity, InteractionEvent, InteractionState, TypePair};
use dsrl_core::seed::SeedStream;
use dsrl_core::tracker::{likelihoods, match_objects, update_transitions, MatchConfig, ObjectView, TransitionMatrix};
use proptest::prelude::*;
use rand::Rng as _;

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

fn cells(max: usize) -> impl Strategy<Value = Vec<(u32, Cell)>> {
    prop::collection::btree_map((0..10i32, 0..10i32), 1..4u32, 0..max).prop_map(|m| {
        m.into_iter().map(|((x, y), t)| (t, Cell::new(x, y))).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn env_ledger_and_bounds(v in variant(), seed in any::<u64>(), moves in prop::collection::vec(0..4usize, 1..150)) {
        let cfg = EnvConfig::default();
        let mut w = WorldState::new_game(&cfg, v, seed, moves.len());
        let start = w.object_count();
        let mut score = 0i64;
        for &m in &moves {
            let before = w.object_count();
            let out = w.step(Action::from_index(m)).unwrap();
            score += i64::from(out.reward);
            prop_assert!(cfg.contains(w.agent()));
            prop_assert!(w.object_count() + 1 >= before && w.object_count() <= before);
            prop_assert_eq!(out.collected.is_some(), w.object_count() < before);
            prop_assert_eq!(out.frame, w.render());
        }
        prop_assert!(w.is_terminal());
        prop_assert_eq!(score, w.score());
        prop_assert_eq!(w.score(), w.positives() as i64 - w.negatives() as i64);
        prop_assert_eq!(start - w.object_count(), w.positives() + w.negatives());
        if !v.is_mixed() {
            prop_assert_eq!(w.positives(), 0);
        }
    }

    #[test]
    fn render_has_one_stencil_per_object(v in variant(), seed in any::<u64>()) {
        let w = WorldState::new_game(&EnvConfig::default(), v, seed, 1);
        let expected: usize = w.ground_truth().iter().map(|(_, g)| g.stencil().iter().flatten().filter(|&&p| p > 0).count()).sum();
        prop_assert_eq!(w.render().count_nonzero(), expected);
        prop_assert!(w.objects().all(|(c, g)| g != Glyph::Agent && c != w.agent()));
    }

    #[test]
    fn matching_is_a_partial_bijection(prev in cells(12), cur in cells(12), counts in prop::collection::vec(0..20u32, 16)) {
        let cfg = MatchConfig::default();
        let mut t = TransitionMatrix::from_config(3, &cfg);
        for (k, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                t.observe((k / 4) as u32, (k % 4) as u32);
            }
        }
        for l in likelihoods(&prev, &cur, &cfg, &t).unwrap() {
            prop_assert!((0.0..=1.0).contains(&l));
        }
        let m = match_objects(&prev, &cur, &cfg, &t).unwrap();
        prop_assert_eq!(m.assignments.len() + m.appearances.len(), cur.len());
        prop_assert_eq!(m.assignments.len() + m.disappearances.len(), prev.len());
        let mut seen_p = vec![false; prev.len()];
        let mut seen_c = vec![false; cur.len()];
        for &(i, j, l) in &m.assignments {
            prop_assert!(!seen_p[i] && !seen_c[j]);
            prop_assert!(l >= cfg.l_min);
            seen_p[i] = true;
            seen_c[j] = true;
        }
        update_transitions(&mut t, &prev, &cur, &m);
        for from in 0..t.dim() as u32 {
            let s: f64 = t.row(from).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn static_scene_matches_itself(scene in cells(20)) {
        let cfg = MatchConfig::default();
        let t = TransitionMatrix::from_config(3, &cfg);
        let m = match_objects(&scene, &scene, &cfg, &t).unwrap();
        prop_assert!(m.appearances.is_empty() && m.disappearances.is_empty());
        for (i, j, _) in m.assignments {
            prop_assert_eq!(i, j);
        }
    }

    #[test]
    fn q_values_stay_bounded(seed in any::<u64>()) {
        let cfg = QConfig::default();
        let mut q = QStore::new(&cfg, 1);
        let mut rng = SeedStream::new(seed).rng();
        let bound = 1.0 / (1.0 - cfg.gamma);
        let st = |rng: &mut dsrl_core::seed::Rng| InteractionState {
            pair: TypePair { agent: 1, other: rng.gen_range(2..4) },
            dx: rng.gen_range(-3..=3),
            dy: rng.gen_range(-3..=3),
        };
        for _ in 0..2000 {
            let before = st(&mut rng);
            let after = match rng.gen_range(0..4) {
                0 => After::Contact,
                1 => After::Vanished,
                2 => After::OutOfRange,
                _ => After::Offset(InteractionState { pair: before.pair, ..st(&mut rng) }),
            };
            let e = InteractionEvent { agent_id: 1, other_id: 2, before, after, step: 0 };
            let v = q.q_update(&e, Action::from_index(rng.gen_range(0..4)), rng.gen_range(-1..=1)).unwrap();
            prop_assert!(v.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn shifting_all_tables_keeps_the_greedy_choice(vals in prop::collection::vec(-5i32..5, 8), shift in -3.0f64..3.0, seed in any::<u64>()) {
        let pair_a = TypePair { agent: 1, other: 2 };
        let pair_b = TypePair { agent: 1, other: 3 };
        let sa = InteractionState { pair: pair_a, dx: 1, dy: 0 };
        let sb = InteractionState { pair: pair_b, dx: 0, dy: -2 };
        let mut q = QStore::new(&QConfig::default(), 1);
        let mut shifted = QStore::new(&QConfig::default(), 1);
        for (k, &v) in vals.iter().enumerate() {
            let s = if k < 4 { sa } else { sb };
            q.set(&s, Action::from_index(k % 4), f64::from(v)).unwrap();
            shifted.set(&s, Action::from_index(k % 4), f64::from(v) + shift).unwrap();
        }
        let rel = [sa, sb];
        let mut r1 = SeedStream::new(seed).rng();
        let mut r2 = SeedStream::new(seed).rng();
        let sums = q.summed(&rel);
        let best = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for _ in 0..20 {
            let a = select_action(&q, &rel, 0.0, &mut r1);
            prop_assert_eq!(sums[a.index()], best);
            // A unique maximum stays unique after the shift.
            if sums.iter().filter(|&&s| s == best).count() == 1 {
                prop_assert_eq!(select_action(&shifted, &rel, 0.0, &mut r2), a);
            }
        }
    }

    #[test]
    fn offsets_are_translation_invariant(objs in prop::collection::vec((0..6i32, 0..6i32, 2..4u32), 1..8), dx in 0..4i32, dy in 0..4i32) {
        let mut views = vec![ObjectView { id: 1, type_id: 1, cell: Cell::new(3, 3) }];
        for (k, &(x, y, t)) in objs.iter().enumerate() {
            if (x, y) != (3, 3) {
                views.push(ObjectView { id: k as u64 + 2, type_id: t, cell: Cell::new(x, y) });
            }
        }
        let a = nearby(&views, AgentIdentity(1), 3);
        let b = nearby(&translate(&views, dx, dy), AgentIdentity(1), 3);
        prop_assert_eq!(a.iter().map(|p| p.1).collect::<Vec<_>>(), b.iter().map(|p| p.1).collect::<Vec<_>>());
    }

    #[test]
    fn percent_positive_range(p in 0usize..1000, n in 0usize..1000) {
        match percent_positive(p, n) {
            None => prop_assert_eq!(p + n, 0),
            Some(v) => prop_assert!((0.0..=100.0).contains(&v)),
        }
    }

    #[test]
    fn pooling_picks_window_maxima(data in prop::collection::vec(-1.0f32..1.0, 2 * 6 * 4)) {
        let x = Tensor::new(vec![1, 2, 6, 4], data).unwrap();
        let (p, idx) = maxpool2(&x).unwrap();
        prop_assert_eq!(p.shape(), &[1, 2, 3, 2]);
        for (o, &i) in idx.iter().enumerate() {
            prop_assert_eq!(p.data()[o], x.data()[i as usize]);
        }
        let u = upsample2(&p, &idx, x.shape()).unwrap();
        for (i, &v) in u.data().iter().enumerate() {
            match idx.iter().position(|&k| k as usize == i) {
                Some(o) => prop_assert_eq!(v, p.data()[o]),
                None => prop_assert_eq!(v, 0.0),
            }
        }
    }

    #[test]
    fn conv_is_linear_in_the_input(a in prop::collection::vec(-1.0f64..1.0, 36), b in prop::collection::vec(-1.0f64..1.0, 36), k in -2.0f64..2.0) {
        let mut rng = SeedStream::new(3).rng();
        let mut conv = Conv2d::<f64>::new(1, 2, 3, &mut rng);
        conv.params.bias.fill(0.0);
        let ta = Tensor::new(vec![1, 1, 6, 6], a.clone()).unwrap();
        let tb = Tensor::new(vec![1, 1, 6, 6], b.clone()).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + k * y).collect();
        let tm = Tensor::new(vec![1, 1, 6, 6], mix).unwrap();
        let (ya, yb, ym) = (conv.infer(&ta).unwrap(), conv.infer(&tb).unwrap(), conv.infer(&tm).unwrap());
        for i in 0..ym.len() {
            prop_assert!((ym.data()[i] - (ya.data()[i] + k * yb.data()[i])).abs() < 1e-9);
        }
    }
}
