mod common;

use hyperdiv::diversity::{
    hyperspherical_energy, layer_diversity, weight_energy, weight_energy_by_name, DISTANCE_CLAMP,
};
use hyperdiv::encoder::{build_encoder, EncoderSpec, FeatureBatch, NormKind, Tap, TapSet};
use hyperdiv::tensor::Tensor;
use hyperdiv::Error;
use proptest::prelude::*;
use rand::Rng;

fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = common::rng(seed);
    (0..n).map(|_| common::random_vec(&mut rng, d)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn tap_set(mats: [&Tensor; 4]) -> TapSet {
    let batches = Tap::ALL
        .into_iter()
        .zip(mats)
        .map(|(t, m)| FeatureBatch::new(t, m.clone()).unwrap())
        .collect();
    TapSet::new(batches).unwrap()
}

fn small_spec(base: usize) -> EncoderSpec {
    EncoderSpec {
        stage_blocks: vec![1, 1, 1, 1],
        width_mult: 1,
        base_channels: base,
        norm: NormKind::Batch,
        embed_dim: 6,
        proj_dim: 3,
        image_side: 16,
    }
}

#[test]
fn matches_double_loop_oracle() {
    for seed in 0..5 {
        let rows = random_rows(32, 8, seed);
        let t = Tensor::from_rows(&rows).unwrap();
        for s in [0.0, 1.0, 2.0] {
            let r = hyperspherical_energy(&t, s).unwrap();
            let want = common::energy_oracle(&rows, s);
            assert!(rel(r.raw_energy, want) <= 1e-10, "s={s}: {} vs {want}", r.raw_energy);
            assert_eq!(r.diversity, -r.raw_energy);
            assert_eq!((r.n, r.d), (32, 8));
            assert!(!r.duplicate_warning);
            if s > 0.0 {
                assert!(r.raw_energy > 0.0);
            }
        }
    }
}

#[test]
fn identical_taps_give_identical_energies() {
    let m = Tensor::from_rows(&random_rows(10, 5, 1)).unwrap();
    let reports = layer_diversity(&tap_set([&m, &m, &m, &m]), 1.0).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.layer.as_str()).collect();
    assert_eq!(names, ["conv1", "res2", "res4", "head"]);
    assert!(reports.iter().all(|r| r.raw_energy == reports[0].raw_energy));
}

#[test]
fn orthonormal_tap_beats_near_duplicates() {
    let ortho = Tensor::from_rows(
        &(0..4)
            .map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let mut rng = common::rng(3);
    let near = Tensor::from_rows(
        &(0..4)
            .map(|_| {
                (0..4)
                    .map(|j| {
                        if j == 0 {
                            1.0
                        } else {
                            1e-3 * rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    for s in [0.0, 1.0, 2.0] {
        let r = layer_diversity(&tap_set([&ortho, &near, &ortho, &near]), s).unwrap();
        assert!(r[0].diversity > r[1].diversity, "s={s}");
        assert!(r[2].diversity > r[3].diversity, "s={s}");
    }
}

#[test]
fn single_row_taps_report_zero() {
    let m = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
    for r in layer_diversity(&tap_set([&m, &m, &m, &m]), 2.0).unwrap() {
        assert_eq!((r.raw_energy, r.pair_mean_energy, r.n), (0.0, 0.0, 1));
    }
}

#[test]
fn identical_filters_hit_the_clamp() {
    let mut enc = build_encoder(&small_spec(2), 0).unwrap();
    let i = enc.params().find("stem.conv.weight").unwrap();
    let w = enc.params_mut().get_mut(i);
    let half = w.tensor.numel() / 2;
    let first = w.tensor.data()[..half].to_vec();
    w.tensor.data_mut()[half..].copy_from_slice(&first);
    let r = weight_energy(&enc, Tap::Conv1, 1.0).unwrap();
    assert_eq!(r.n, 2);
    assert_eq!(r.raw_energy, 2.0 / DISTANCE_CLAMP);
    assert!(r.raw_energy.is_finite());
    assert!(r.duplicate_warning);
}

#[test]
fn orthogonal_filter_pair_matches_direct_energy() {
    let mut enc = build_encoder(&small_spec(2), 0).unwrap();
    let i = enc.params().find("stem.conv.weight").unwrap();
    let w = &mut enc.params_mut().get_mut(i).tensor;
    let half = w.numel() / 2;
    w.data_mut().fill(0.0);
    w.data_mut()[0] = 2.0;
    w.data_mut()[half + 1] = 3.0;
    let rows = vec![w.data()[..half].to_vec(), w.data()[half..].to_vec()];
    for s in [0.0, 1.0, 2.0] {
        let via_layer = weight_energy(&enc, Tap::Conv1, s).unwrap();
        let direct = hyperspherical_energy(&Tensor::from_rows(&rows).unwrap(), s).unwrap();
        assert_eq!(via_layer.raw_energy, direct.raw_energy);
    }
}

#[test]
fn random_layers_match_oracle() {
    let enc = build_encoder(&small_spec(4), 7).unwrap();
    for tap in Tap::ALL {
        let w = enc.tap_weight(tap);
        let rows: Vec<Vec<f64>> = if w.rank() == 4 {
            let per = w.numel() / w.shape()[0];
            w.data().chunks(per).map(<[f64]>::to_vec).collect()
        } else {
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            (0..fan_out)
                .map(|o| (0..fan_in).map(|i| w.data()[i * fan_out + o]).collect())
                .collect()
        };
        for s in [0.0, 1.0, 2.0] {
            let r = weight_energy(&enc, tap, s).unwrap();
            assert!(
                rel(r.raw_energy, common::energy_oracle(&rows, s)) <= 1e-10,
                "{tap} s={s}"
            );
            assert_eq!(r.layer, tap.name());
        }
    }
    let named = weight_energy_by_name(&enc, "stage3.block1.conv2.weight", 1.0).unwrap();
    assert_eq!(named.n, 16);
    assert!(matches!(
        weight_energy_by_name(&enc, "stem.norm.gamma", 1.0),
        Err(Error::NoWeights(_))
    ));
    assert!(matches!(
        weight_energy_by_name(&enc, "nope.weight", 1.0),
        Err(Error::NoWeights(_))
    ));
}

#[test]
fn antipodal_pair_is_the_two_point_optimum() {
    let mut rng = common::rng(17);
    for d in [2, 3, 8] {
        for _ in 0..2000 {
            let rows = vec![common::random_vec(&mut rng, d), common::random_vec(&mut rng, d)];
            let e = hyperspherical_energy(&Tensor::from_rows(&rows).unwrap(), 1.0)
                .unwrap()
                .raw_energy;
            assert!(e >= 1.0 - 1e-12, "{e}");
        }
    }
}

fn matrix(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6).prop_flat_map(move |d| {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |r| r.iter().any(|v| v.abs() > 1e-3)),
            2..=max_n,
        )
    })
}

proptest! {
    #[test]
    fn permutation_invariance_is_exact(rows in matrix(24), seed in any::<u64>(), s in prop::sample::select(vec![0.0, 0.5, 1.0, 2.0])) {
        let mut shuffled = rows.clone();
        let mut rng = common::rng(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = hyperspherical_energy(&Tensor::from_rows(&rows).unwrap(), s).unwrap();
        let b = hyperspherical_energy(&Tensor::from_rows(&shuffled).unwrap(), s).unwrap();
        prop_assert_eq!(a.raw_energy.to_bits(), b.raw_energy.to_bits());
    }

    #[test]
    fn positive_scaling_is_absorbed(rows in matrix(16), row in any::<prop::sample::Index>(), c in 1e-3f64..1e3, s in prop::sample::select(vec![0.0, 1.0, 2.0])) {
        let mut scaled = rows.clone();
        let i = row.index(rows.len());
        scaled[i].iter_mut().for_each(|v| *v *= c);
        let a = hyperspherical_energy(&Tensor::from_rows(&rows).unwrap(), s).unwrap().raw_energy;
        let b = hyperspherical_energy(&Tensor::from_rows(&scaled).unwrap(), s).unwrap().raw_energy;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn duplicating_a_row_raises_energy(rows in matrix(32), row in any::<prop::sample::Index>(), s in prop::sample::select(vec![0.0, 0.5, 1.0, 2.0])) {
        let mut dup = rows.clone();
        dup.push(rows[row.index(rows.len())].clone());
        let a = hyperspherical_energy(&Tensor::from_rows(&rows).unwrap(), s).unwrap();
        let b = hyperspherical_energy(&Tensor::from_rows(&dup).unwrap(), s).unwrap();
        prop_assert!(b.raw_energy > a.raw_energy);
        prop_assert!(b.diversity < a.diversity);
        prop_assert!(b.duplicate_warning);
    }
}
