mod common;

use flamefinder::dml::{self, PrototypePair};
use flamefinder::eval;
use flamefinder::imaging::{Label, Patch};
use flamefinder::pipeline::dataset::{flip_horizontal, flip_vertical, random_flips};
use flamefinder::pipeline::{balance, normalize};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vecs(m: usize, d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(lo..hi, d), m)
}

/// Embeddings, labels, prototypes and attention rows.
type Batch = (Vec<Vec<f64>>, Vec<Label>, PrototypePair, Vec<Vec<f64>>);

fn batch(d: usize) -> impl Strategy<Value = Batch> {
    (2usize..10).prop_flat_map(move |m| {
        (
            vecs(m, d, -3.0, 3.0),
            prop::collection::vec(any::<bool>(), m),
            vecs(2, d, -3.0, 3.0),
            vecs(m, d, 0.0, 1.0),
        )
            .prop_filter("nonzero vectors", |(e, _, p, _)| {
                e.iter().chain(p).all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
            })
            .prop_map(|(e, flags, p, a)| {
                let labels = flags
                    .into_iter()
                    .map(|f| if f { Label::Flame } else { Label::NoFlame })
                    .collect();
                (e, labels, PrototypePair::new(p[0].clone(), p[1].clone()).unwrap(), a)
            })
    })
}

fn patch(size: usize) -> impl Strategy<Value = Patch> {
    (
        prop::collection::vec(0.0f64..1.0, size * size),
        prop::collection::vec(0u8..2, size * size),
        any::<bool>(),
    )
        .prop_map(move |(thermal, mut mask, empty)| {
            if empty {
                mask.fill(0);
            }
            let flame = mask.iter().any(|&b| b != 0);
            Patch {
                grid_index: (0, 0),
                size,
                thermal,
                mask,
                label: Some(if flame { Label::Flame } else { Label::NoFlame }),
            }
        })
}

proptest! {
    #[test]
    fn loss_bounds((e, y, p, a) in batch(5), margin in 0.0f64..2.0) {
        let tl = dml::loss_triplet(&e, &y, &p, &a, margin).unwrap();
        let cl = dml::loss_center(&e, &y, &p, &a).unwrap();
        let cs = dml::loss_cosine(&e, &y, &p, &a).unwrap();
        prop_assert!(tl.value >= 0.0);
        prop_assert!(cl.value >= 0.0);
        prop_assert!((1.0..=3.0).contains(&cs.value), "cos loss {}", cs.value);
    }

    #[test]
    fn cosine_loss_ignores_scale((e, y, p, a) in batch(4), s in 0.01f64..100.0, t in 0.01f64..100.0) {
        let base = dml::loss_cosine(&e, &y, &p, &a).unwrap().value;
        let es: Vec<Vec<f64>> = e.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
        let ps = PrototypePair::new(
            p.flame.iter().map(|x| x * t).collect(),
            p.noflame.iter().map(|x| x * t).collect(),
        ).unwrap();
        let scaled = dml::loss_cosine(&es, &y, &ps, &a).unwrap().value;
        prop_assert!((base - scaled).abs() <= 1e-10);
    }

    #[test]
    fn balance_equalizes_and_keeps_originals(
        patches in prop::collection::vec(patch(4), 2..30),
        seed in any::<u64>(),
    ) {
        let mut ds = flamefinder::pipeline::LabeledDataset::default();
        for (i, p) in patches.into_iter().enumerate() {
            ds.push(p, &format!("f{i}"));
        }
        let (f, n) = ds.class_counts();
        prop_assume!(f > 0 && n > 0);
        let b = balance(&ds, seed).unwrap();
        let (bf, bn) = b.class_counts();
        prop_assert_eq!(bf, bn);
        prop_assert_eq!(bf, f.max(n));
        prop_assert_eq!(&b.patches[..ds.len()], &ds.patches[..]);
    }

    #[test]
    fn flips_are_involutions_and_move_masks_along(p in patch(8), seed in any::<u64>()) {
        let t = &p.thermal;
        prop_assert_eq!(&flip_horizontal(&flip_horizontal(t, 8), 8), t);
        prop_assert_eq!(&flip_vertical(&flip_vertical(t, 8), 8), t);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, h, v) = random_flips(&p, &mut rng);
        let apply = |x: &[f64]| {
            let x = if h { flip_horizontal(x, 8) } else { x.to_vec() };
            if v { flip_vertical(&x, 8) } else { x }
        };
        prop_assert_eq!(&q.thermal, &apply(&p.thermal));
        prop_assert_eq!(q.mask_as_f64(), apply(&p.mask_as_f64()));
        prop_assert_eq!(q.label, p.label);
    }

    #[test]
    fn normalized_patches_have_unit_moments(x in prop::collection::vec(0.0f64..1.0, 16..256)) {
        prop_assume!(x.iter().any(|&v| (v - x[0]).abs() > 1e-3));
        let z = normalize(&x);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn icv_is_translation_invariant((e, y, p, _) in batch(6), shift in prop::collection::vec(-5.0f64..5.0, 6)) {
        prop_assume!(y.contains(&Label::Flame));
        let base = eval::intra_class_variance(&e, &y, &p).unwrap();
        let mv = |v: &Vec<f64>| -> Vec<f64> { v.iter().zip(&shift).map(|(a, b)| a + b).collect() };
        let es: Vec<Vec<f64>> = e.iter().map(mv).collect();
        let ps = PrototypePair::new(mv(&p.flame), mv(&p.noflame)).unwrap();
        let moved = eval::intra_class_variance(&es, &y, &ps).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn nearest_prototype_is_stable_when_moving_closer(
        (e, _, p, _) in batch(5),
        t in 0.0f64..1.0,
    ) {
        let e0 = &e[0];
        let label = eval::nearest_prototype(e0, &p);
        let target = p.get(label);
        let closer: Vec<f64> = e0.iter().zip(target).map(|(a, b)| a + t * (b - a)).collect();
        prop_assert_eq!(eval::nearest_prototype(&closer, &p), label);
    }
}
