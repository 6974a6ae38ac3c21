//! Property tests for invariants that hold for any input.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tabforge::container::{Block, Container};
use tabforge::diffusion::{perturb, score_from_eps, time_embedding, LatentNormalizer};
use tabforge::metrics::{contingency_error, kst, pearson, tvd, Buckets};
use tabforge::nn::{Tape, Tensor2D};
use tabforge::sampler::time_grid;
use tabforge::table::{
    apply_preprocess, fit_preprocess, invert_preprocess, ColumnData, ColumnSpec, Table, TableSchema,
};
use tabforge::tokenizer::ColumnLayout;
use tabforge::vae::{BetaScheduler, VaeModel};

fn sample(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, 1..max)
}

fn labels(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 1..max)
}

proptest! {
    #[test]
    fn ks_is_a_bounded_symmetric_distance(a in sample(40), b in sample(40), seed in 0u64..1000) {
        let d = kst(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, kst(&b, &a).unwrap());
        let mut shuffled = a.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(kst(&a, &shuffled).unwrap(), 0.0);
    }

    #[test]
    fn tvd_is_a_metric(a in labels(30), b in labels(30), c in labels(30)) {
        let ab = tvd(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - tvd(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!(ab <= tvd(&a, &c).unwrap() + tvd(&c, &b).unwrap() + 1e-12);
        prop_assert_eq!(tvd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn joint_error_dominates_marginal_error(
        ra in labels(30), sa in labels(30), shift in 0u8..3,
    ) {
        let rb: Vec<u8> = ra.iter().map(|v| (v + shift) % 3).collect();
        let sb: Vec<u8> = sa.iter().rev().map(|v| v % 3).collect();
        let joint = contingency_error(&ra, &rb, &sa, &sb).unwrap();
        prop_assert!(joint + 1e-12 >= tvd(&ra, &sa).unwrap());
        prop_assert!(joint + 1e-12 >= tvd(&rb, &sb).unwrap());
        prop_assert!(joint <= 1.0);
    }

    #[test]
    fn pearson_is_bounded_and_affine_invariant(
        xy in prop::collection::vec((-100f64..100.0, -100f64..100.0), 3..40),
        scale in 0.1f64..10.0, offset in -50f64..50.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let Ok(r) = pearson(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
            let x2: Vec<f64> = x.iter().map(|v| scale * v + offset).collect();
            prop_assert!((pearson(&x2, &y).unwrap() - r).abs() < 1e-9);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!((pearson(&neg, &y).unwrap() + r).abs() < 1e-12);
        }
    }

    #[test]
    fn bucket_index_is_monotone_and_in_range(reference in sample(60), probes in sample(30), n in 2usize..25) {
        let b = Buckets::fit(&reference, n).unwrap();
        prop_assert!(b.n_buckets() <= n);
        let mut sorted = probes.clone();
        sorted.sort_by(f64::total_cmp);
        let idx: Vec<usize> = sorted.iter().map(|&x| b.index(x)).collect();
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < b.n_buckets()));
    }

    #[test]
    fn beta_never_rises_and_stays_in_range(losses in prop::collection::vec(0f64..10.0, 1..200), patience in 1usize..6) {
        let mut s = BetaScheduler::new(1e-2, 1e-5, 0.7, patience).unwrap();
        let mut prev = s.beta();
        for l in losses {
            let b = s.step(l);
            prop_assert!(b <= prev && (1e-5..=1e-2).contains(&b));
            prev = b;
        }
    }

    #[test]
    fn time_grid_descends_to_zero(n in 1usize..200, rho in 0.5f64..10.0) {
        let g = time_grid(n, 0.002, 80.0, rho).unwrap();
        let t = g.times();
        prop_assert_eq!(t.len(), n + 1);
        prop_assert!((t[0] - 80.0).abs() < 1e-9);
        prop_assert_eq!(*t.last().unwrap(), 0.0);
        prop_assert!(t.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn noise_round_trips_through_score(z0 in sample(10), t in 0.01f64..80.0) {
        let eps: Vec<f64> = z0.iter().map(|v| v.sin()).collect();
        let zt = perturb(&z0, t, &eps).unwrap();
        let score = score_from_eps(&eps, t).unwrap();
        for ((a, b), s) in zt.iter().zip(&z0).zip(&score) {
            prop_assert!((a - b + t * t * s).abs() < 1e-9 * (1.0 + a.abs()));
        }
        prop_assert_eq!(perturb(&z0, t, &vec![0.0; z0.len()]).unwrap(), z0);
    }

    #[test]
    fn time_embedding_is_bounded(t in 1e-4f64..100.0, width in 1usize..64) {
        let e = time_embedding(t, width);
        prop_assert_eq!(e.len(), width);
        prop_assert!(e.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn kl_term_is_non_negative(data in prop::collection::vec(-3f64..3.0, 8)) {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor2D::new(2, 2, data[..4].to_vec()).unwrap());
        let ls = tape.constant(Tensor2D::new(2, 2, data[4..].to_vec()).unwrap());
        let kl = tape.kl_mean(mu, ls).unwrap();
        prop_assert!(tape.value(kl).get(0, 0) >= 0.0);
    }

    #[test]
    fn decoded_probabilities_sum_to_one(seed in 0u64..500, cards in prop::collection::vec(2usize..5, 1..3)) {
        let layout = ColumnLayout::new(1, cards).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = VaeModel::new(layout.clone(), 2, 4, 1, &mut rng);
        let z = Tensor2D::new(3, layout.n_tokens() * 2, (0..3 * layout.n_tokens() * 2).map(|i| (i as f64 * 0.37).sin() * 3.0).collect()).unwrap();
        let out = model.decode_latents(&z).unwrap();
        for p in &out.probabilities {
            for r in 0..p.rows() {
                let total: f64 = (0..p.cols()).map(|c| p.get(r, c)).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn latent_normalizer_round_trips(rows in 2usize..20, cols in 1usize..6, seed in 0u64..1000) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 * 31 + seed) as f64).sin() * 7.0).collect();
        let z = Tensor2D::new(rows, cols, data).unwrap();
        let n = LatentNormalizer::fit(&z).unwrap();
        let back = n.denormalize(&n.normalize(&z).unwrap()).unwrap();
        for (a, b) in z.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn preprocessing_round_trips_training_rows(
        rows in prop::collection::vec((-1e4f64..1e4, 0u8..4), 2..200),
    ) {
        let schema = TableSchema::new(vec![ColumnSpec::numerical("x"), ColumnSpec::categorical("c")]).unwrap();
        let x: Vec<Option<f64>> = rows.iter().map(|r| Some(r.0)).collect();
        let c: Vec<Option<String>> = rows.iter().map(|r| Some(format!("k{}", r.1))).collect();
        let t = Table::new(schema, vec![ColumnData::Numerical(x), ColumnData::Categorical(c)]).unwrap();
        let state = fit_preprocess(&t).unwrap();
        let back = invert_preprocess(&apply_preprocess(&t, &state).unwrap(), &state).unwrap();
        prop_assert_eq!(back.categorical(1), t.categorical(1));
        for (a, b) in t.numerical(0).iter().zip(back.numerical(0)) {
            let (a, b) = (a.unwrap(), b.unwrap());
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{} -> {}", a, b);
        }
    }

    #[test]
    fn csv_round_trips_values(
        rows in prop::collection::vec((prop::option::of(-1e12f64..1e12), prop::option::of("[a-z ,\"]{1,8}")), 1..40),
    ) {
        let schema = TableSchema::new(vec![ColumnSpec::numerical("x"), ColumnSpec::categorical("c")]).unwrap();
        let (x, c): (Vec<Option<f64>>, Vec<Option<String>>) = rows.into_iter().unzip();
        let c: Vec<Option<String>> = c.into_iter().map(|v| v.filter(|s| !s.trim().is_empty())).collect();
        let t = Table::new(schema.clone(), vec![ColumnData::Numerical(x), ColumnData::Categorical(c)]).unwrap();
        let back = Table::read_csv(t.to_csv_string().as_bytes(), &schema).unwrap();
        prop_assert_eq!(back.numerical(0), t.numerical(0));
        prop_assert_eq!(back.categorical(1), t.categorical(1));
    }

    #[test]
    fn container_round_trips_and_rejects_truncation(
        blocks in prop::collection::vec(("[a-z.]{1,12}", 0usize..4, 0usize..4, any::<u64>()), 0..5),
        cut in any::<prop::sample::Index>(),
    ) {
        let mut c = Container::new("test");
        c.set("note", &"value").unwrap();
        for (i, (name, rows, cols, seed)) in blocks.into_iter().enumerate() {
            let data = (0..rows * cols).map(|k| f32::from_bits((seed as u32).wrapping_add(k as u32 * 7919) & 0x7f7f_ffff)).collect();
            c.blocks.push(Block { name: format!("{name}{i}"), rows, cols, data });
        }
        let bytes = c.encode().unwrap();
        let back = Container::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes.clone());
        let n = cut.index(bytes.len());
        prop_assert!(Container::decode(&bytes[..n]).is_err());
    }
}
