use headlab::attention::{attention_map, perturb_map, soft_mix, temperature_scale};
use headlab::io::checkpoint::{decode, encode};
use headlab::io::{pgm_bytes, read_pgm};
use headlab::objectives::Objective;
use headlab::sampler::{apg_combine, cfg_combine};
use headlab::search::{headhunter, rank_order};
use headlab::{DitConfig, DitWeights, HeadId, ObjectiveId, PerturbMethod, Rng, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::new(&[rows, cols], Rng::new(seed).normals(rows * cols)).unwrap()
}

fn method() -> impl Strategy<Value = PerturbMethod> {
    proptest::sample::select(PerturbMethod::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbed_maps_stay_row_stochastic(
        n in 1usize..10, dh in 1usize..5, seed in any::<u64>(), m in method(),
        u in 0.0f64..=1.0, tau in 0.01f64..20.0,
    ) {
        let q = tensor(n, dh, seed);
        let k = tensor(n, dh, seed ^ 1);
        let a = attention_map(&q, &k).unwrap();
        let p = perturb_map(m, u, tau, &a, &q, &k).unwrap();
        prop_assert_eq!(p.shape(), &[n, n]);
        for i in 0..n {
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_mix_is_linear_in_u(n in 1usize..8, seed in any::<u64>(), u in 0.0f64..=1.0) {
        let a = attention_map(&tensor(n, 3, seed), &tensor(n, 3, seed ^ 7)).unwrap();
        let id = Tensor::identity(n);
        let mixed = soft_mix(&a, &id, u).unwrap();
        let oracle = a.scale(1.0 - u).add(&id.scale(u)).unwrap();
        prop_assert!(mixed.max_abs_diff(&oracle) < 1e-15);
    }

    #[test]
    fn temperature_preserves_row_order(n in 2usize..8, seed in any::<u64>(), tau in 0.05f64..10.0) {
        let a = attention_map(&tensor(n, 2, seed), &tensor(n, 2, seed ^ 3)).unwrap();
        let s = temperature_scale(&a, tau).unwrap();
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    if a.get(i, j) > a.get(i, l) {
                        prop_assert!(s.get(i, j) >= s.get(i, l));
                    }
                }
            }
        }
    }

    #[test]
    fn combine_with_equal_branches_is_identity(seed in any::<u64>(), w in -10.0f64..10.0) {
        let v = tensor(4, 4, seed);
        prop_assert!(cfg_combine(&v, &v, w).unwrap().bit_eq(&v));
        prop_assert!(apg_combine(&v, &v, w).unwrap().bit_eq(&v));
    }

    #[test]
    fn combine_matches_expanded_form(seed in any::<u64>(), w in -10.0f64..10.0) {
        let v = tensor(3, 5, seed);
        let p = tensor(3, 5, seed ^ 9);
        let oracle = v.scale(1.0 + w).sub(&p.scale(w)).unwrap();
        prop_assert!(apg_combine(&v, &p, w).unwrap().max_abs_diff(&oracle) < 1e-12 * (1.0 + w.abs()) * 10.0);
    }

    #[test]
    fn pgm_round_trip_within_half_level(seed in any::<u64>()) {
        let img = tensor(16, 16, seed).scale(1.5);
        let (w, h, px) = read_pgm(&pgm_bytes(&img).unwrap()).unwrap();
        prop_assert_eq!((w, h), (16, 16));
        for (p, &x) in px.iter().zip(img.data()) {
            let back = *p as f64 / 255.0 * 6.0 - 3.0;
            prop_assert!((back - x.clamp(-3.0, 3.0)).abs() <= 6.0 / 255.0 / 2.0 + 1e-12);
        }
    }

    #[test]
    fn rank_order_sorts_descending_with_head_ties(scores in proptest::collection::vec(-3i32..3, 1..16)) {
        let entries: Vec<(HeadId, f64)> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (HeadId::new(i / 4, i % 4), s as f64))
            .collect();
        let mut ranked = entries.clone();
        ranked.sort_by(rank_order);
        for pair in ranked.windows(2) {
            let ((h0, s0), (h1, s1)) = (pair[0], pair[1]);
            prop_assert!(s0 > s1 || (s0 == s1 && h0 < h1));
        }
    }
}

#[test]
fn headhunter_picks_additive_maximisers() {
    let value = |h: &HeadId| ((h.layer * 7 + h.head * 3) % 11) as f64;
    let eval = |heads: &[HeadId]| -> headlab::Result<f64> { Ok(heads.iter().map(value).sum()) };
    let pool = DitConfig::default().all_heads();
    let state = headhunter(&eval, pool.clone(), 2, 3).unwrap();
    let mut oracle = pool.clone();
    oracle.sort_by(|a, b| value(b).total_cmp(&value(a)).then(a.cmp(b)));
    let mut got = state.selected.clone();
    got.sort();
    let mut want = oracle[..6].to_vec();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn checkpoint_survives_random_weights() {
    for seed in 0..3 {
        let w = DitWeights::init_dense_output(&DitConfig::default(), seed).unwrap();
        let bytes = encode(&w).unwrap();
        assert_eq!(decode(&bytes).unwrap(), w);
    }
}

#[test]
fn brightness_is_mean_pixel() {
    let img = tensor(16, 16, 4);
    let s = ObjectiveId::Brightness.score(&img, None).unwrap();
    assert!((s - img.mean()).abs() < 1e-12);
}
