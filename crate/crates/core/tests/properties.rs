mod common;

use common::naive;
use hindsight_core::aggregator::{aggregate, divergence_loss, Aggregator};
use hindsight_core::checkpoint::{read_tensors, write_tensors};
use hindsight_core::encoding::periodic_encoding;
use hindsight_core::graph::mha;
use hindsight_core::image::{ImageBuffer, Rect};
use hindsight_core::kernels::{conv2d_valid, maxpool2, softmax};
use hindsight_core::nn::MultiHeadAttention;
use hindsight_core::patches::{dynamic_grid, static_grid, static_patch_count, PatchMeta, PatchSet};
use hindsight_core::pretext::{fully_masked, mask_at_level, masked_cell_count, recon_loss};
use hindsight_core::{Params, Rng, Tensor};
use proptest::prelude::*;

fn noise_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut rng = Rng::new(seed);
    let data = (0..3 * w * h).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    ImageBuffer::new(h, w, data).unwrap()
}

/// Levels ascend and coverage strictly falls between consecutive levels.
fn coverage_falls_with_level(meta: &[PatchMeta]) -> bool {
    let mut sorted = meta.to_vec();
    sorted.sort_by_key(|m| m.level);
    sorted.windows(2).all(|w| {
        if w[0].level == w[1].level {
            w[0].area_coverage == w[1].area_coverage
        } else {
            w[0].area_coverage > w[1].area_coverage
        }
    })
}

fn leaves_tile(bounds: Rect, leaves: &[Rect]) -> bool {
    let mut hits = vec![0u8; bounds.area()];
    for r in leaves {
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                hits[(y - bounds.y) * bounds.width + x - bounds.x] += 1;
            }
        }
    }
    hits.iter().all(|&h| h == 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, spread in 0.1f64..50.0) {
        let mut rng = Rng::new(seed);
        let x = naive::random_tensor(&mut rng, &[rows, cols]).map(|v| v * spread);
        let y = softmax(&x);
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn conv_matches_naive_bitwise(
        seed in any::<u64>(), c in 1usize..5, o in 1usize..5,
        h in 3usize..17, w in 3usize..17, kh in 1usize..6, kw in 1usize..6,
    ) {
        prop_assume!(kh <= h && kw <= w);
        let mut rng = Rng::new(seed);
        let x = naive::random_tensor(&mut rng, &[c, h, w]);
        let k = naive::random_tensor(&mut rng, &[o, c, kh, kw]);
        let b = naive::random_tensor(&mut rng, &[o]);
        let fast = conv2d_valid(&x, &k, &b).unwrap();
        prop_assert_eq!(naive::bits(&fast), naive::bits(&naive::conv2d(&x, &k, &b)));
    }

    #[test]
    fn batched_conv_matches_per_image(seed in any::<u64>(), n in 1usize..4, size in 3usize..10) {
        let mut rng = Rng::new(seed);
        let x = naive::random_tensor(&mut rng, &[n, 2, size, size]);
        let k = naive::random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = naive::random_tensor(&mut rng, &[3]);
        let batched = conv2d_valid(&x, &k, &b).unwrap();
        let plane = 2 * size * size;
        let per: Vec<f64> = (0..n)
            .flat_map(|i| {
                let xi = Tensor::new(&[2, size, size], x.data()[i * plane..(i + 1) * plane].to_vec()).unwrap();
                naive::conv2d(&xi, &k, &b).into_data()
            })
            .collect();
        prop_assert_eq!(batched.data(), &per[..]);
    }

    #[test]
    fn maxpool_matches_naive(seed in any::<u64>(), c in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let mut rng = Rng::new(seed);
        let x = naive::random_tensor(&mut rng, &[c, 2 * h, 2 * w]);
        prop_assert_eq!(naive::bits(&maxpool2(&x).unwrap()), naive::bits(&naive::maxpool2(&x)));
    }

    #[test]
    fn single_head_attention_matches_naive(seed in any::<u64>(), p in 1usize..9, d in 1usize..9) {
        let (fast, slow) = naive::attention_pair(seed, p, d);
        prop_assert_eq!(naive::bits(&fast), naive::bits(&slow));
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), p in 2usize..8, perm_seed in any::<u64>()) {
        let d = 8;
        let mut rng = Rng::new(seed);
        let mut params = Params::new();
        let attn = MultiHeadAttention::build(&mut params, "attn", d, 2, &mut rng).unwrap();
        let x = naive::random_tensor(&mut rng, &[p, d]);
        let mut order: Vec<usize> = (0..p).collect();
        Rng::new(perm_seed).shuffle(&mut order);
        let permuted = Tensor::new(&[p, d], order.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let y = mha(&attn, &params, &x).unwrap();
        let yp = mha(&attn, &params, &permuted).unwrap();
        for (r, &i) in order.iter().enumerate() {
            for (a, b) in yp.row(r).iter().zip(y.row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_is_convex_combination(seed in any::<u64>(), k in 1usize..6, with_query in any::<bool>()) {
        let d = 8;
        let mut rng = Rng::new(seed);
        let mut params = Params::new();
        let agg = Aggregator::build(&mut params, d, &mut rng).unwrap();
        let mfv = naive::random_tensor(&mut rng, &[k, d]).map(|v| 3.0 * v);
        let gq = naive::random_tensor(&mut rng, &[d]);
        let (afv, c) = aggregate(&agg, &params, &mfv, with_query.then_some(&gq)).unwrap();
        prop_assert!((c.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for t in 0..d {
            let col = (0..k).map(|j| mfv.row(j)[t]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(afv.data()[t] >= lo - 1e-12 && afv.data()[t] <= hi + 1e-12);
        }
        prop_assert!(divergence_loss(&c.to_f64_vec()) <= 1e-15);
    }

    #[test]
    fn divergence_is_never_positive(raw in proptest::collection::vec(0.0f64..1.0, 1..8)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-9);
        let c: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let k = c.len() as f64;
        prop_assert!(divergence_loss(&c) <= 1e-12);
        prop_assert!(divergence_loss(&c) >= -k.ln() - 1e-12);
    }

    #[test]
    fn quarters_tile_parent(x in 0usize..50, y in 0usize..50, w in 1usize..40, h in 1usize..40) {
        let r = Rect::new(x, y, w, h);
        let q = r.quarter();
        let nonempty: Vec<Rect> = q.iter().copied().filter(|c| c.area() > 0).collect();
        prop_assert!(leaves_tile(r, &nonempty));
        prop_assert!(q[0].width >= q[1].width && q[0].height >= q[2].height);
    }

    #[test]
    fn static_counts_and_coverage(k in 1usize..6, extra in 0usize..20, wide in 0usize..9, seed in any::<u64>()) {
        let side = (1usize << (k - 1)) + extra;
        let img = noise_image(side + wide, side, seed);
        let set = static_grid(&img, k, 8).unwrap();
        prop_assert_eq!(set.len(), static_patch_count(k));
        prop_assert_eq!(set.len(), ((1usize << (2 * k)) - 1) / 3);
        for (l, &count) in set.level_counts().iter().enumerate() {
            prop_assert_eq!(count, 1usize << (2 * l));
        }
        prop_assert!(coverage_falls_with_level(&set.meta));
        let square = Rect::new(wide / 2, 0, side, side);
        for level in 1..=k {
            let cells: Vec<Rect> = set.regions.iter().zip(&set.meta)
                .filter(|(_, m)| m.level == level).map(|(r, _)| *r).collect();
            prop_assert!(leaves_tile(square, &cells));
        }
    }

    #[test]
    fn dynamic_leaves_tile_image(w in 8usize..48, h in 8usize..48, k in 1usize..6, d in 0usize..30, seed in any::<u64>()) {
        let img = noise_image(w, h, seed);
        let g = dynamic_grid(&img, k, d, 8).unwrap();
        let leaves: Vec<Rect> = g.tree.leaves().map(|n| n.region).collect();
        prop_assert!(leaves_tile(img.bounds(), &leaves));
        prop_assert_eq!(g.patches.len(), 1 + 4 * g.divisions_performed);
        prop_assert!(g.exhausted || g.divisions_performed == d);
        prop_assert!(g.patches.meta.iter().all(|m| m.level <= k));
        prop_assert!(coverage_falls_with_level(&g.patches.meta));
    }

    #[test]
    fn division_order_replays_as_prefix(seed in any::<u64>(), d in 0usize..20, more in 1usize..10) {
        let img = noise_image(32, 24, seed);
        let short = dynamic_grid(&img, 5, d, 8).unwrap();
        let long = dynamic_grid(&img, 5, d + more, 8).unwrap();
        prop_assert_eq!(&long.tree.division_order[..short.divisions_performed], &short.tree.division_order[..]);
        prop_assert_eq!(&long.tree.nodes[..short.tree.nodes.len()].iter().map(|n| n.region).collect::<Vec<_>>(),
            &short.tree.nodes.iter().map(|n| n.region).collect::<Vec<_>>());
    }

    #[test]
    fn mask_closed_form_matches_geometry(k in 2usize..5, level_off in 0usize..4, eighth in any::<bool>(), seed in any::<u64>()) {
        let level = 2 + level_off % (k - 1);
        let fraction = if eighth { 0.125 } else { 0.25 };
        let img = noise_image(40, 32, seed);
        let set: PatchSet = static_grid(&img, k, 8).unwrap();
        let spec = mask_at_level(k, level, fraction, &mut Rng::new(seed)).unwrap();
        let cells = masked_cell_count(level, fraction);
        prop_assert_eq!(spec.cells.len(), cells);
        let expected: usize = (level..=k).map(|j| cells << (2 * (j - level))).sum();
        prop_assert_eq!(spec.fully_masked.len(), expected);
        prop_assert_eq!(&fully_masked(&set, &spec.regions(&img)), &spec.fully_masked);
    }

    #[test]
    fn periodic_entries_bounded(x in -1.0f64..1.0, y in -1.0f64..1.0, a in -1.0f64..1.0, lambda in 0.5f64..100.0) {
        let meta = PatchMeta { x, y, area_coverage: a, level: 1 };
        let ev = periodic_encoding(&meta, 16, lambda);
        prop_assert_eq!(ev.len(), 16);
        prop_assert!(ev.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn tensor_files_round_trip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..4), 1..5), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let tensors: Vec<(String, Tensor<f32>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product();
                let data = (0..n).map(|_| f32::from_bits(rng.below(u32::MAX as usize) as u32)).collect();
                (format!("t{i}.w"), Tensor::new(s, data).unwrap())
            })
            .collect();
        let refs: Vec<(String, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &refs).unwrap();
        let back = read_tensors(&bytes[..]).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((na, ta), (nb, tb)) in tensors.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ta), bits(tb));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn long_softmax_sums_to_one(seed in any::<u64>(), len in 1usize..10_001, spread in 0.1f64..80.0) {
        let mut rng = Rng::new(seed);
        let x = naive::random_tensor(&mut rng, &[1, len]).map(|v| v * spread);
        let y = softmax(&x);
        prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let y32 = softmax(&x.cast::<f32>());
        prop_assert!((y32.data().iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() < 1e-6 * (len as f64).sqrt().max(1.0));
    }

    #[test]
    fn ops_are_pure(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = naive::random_tensor(&mut rng, &[2, 9, 9]);
        let k = naive::random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = naive::random_tensor(&mut rng, &[3]);
        let a = conv2d_valid(&x, &k, &b).unwrap();
        prop_assert_eq!(naive::bits(&a), naive::bits(&conv2d_valid(&x, &k, &b).unwrap()));
        let (f1, _) = naive::attention_pair(seed, 5, 8);
        let (f2, _) = naive::attention_pair(seed, 5, 8);
        prop_assert_eq!(naive::bits(&f1), naive::bits(&f2));
    }

    #[test]
    fn static_centers_average_to_origin(k in 1usize..6, mult in 1usize..4, seed in any::<u64>()) {
        let side = (1usize << (k - 1)) * mult * 2;
        let set = static_grid(&noise_image(side, side, seed), k, 8).unwrap();
        for level in 1..=k {
            let pts: Vec<&PatchMeta> = set.meta.iter().filter(|m| m.level == level).collect();
            let n = pts.len() as f64;
            let (mx, my) = pts.iter().fold((0.0, 0.0), |(x, y), m| (x + m.x / n, y + m.y / n));
            prop_assert!(mx.abs() < 1e-12 && my.abs() < 1e-12, "level {level}: ({mx}, {my})");
        }
        prop_assert!(set.meta.iter().all(|m| (-1.0..=1.0).contains(&m.area_coverage)));
    }

    #[test]
    fn divisions_follow_greedy_rule(w in 8usize..40, h in 8usize..40, k in 2usize..6, d in 1usize..25, seed in any::<u64>()) {
        let img = noise_image(w, h, seed % 4 + 1);
        let img = if seed % 3 == 0 { ImageBuffer::filled(h, w, [0.3, 0.3, 0.3]) } else { img };
        let tree = dynamic_grid(&img, k, d, 8).unwrap().tree;
        let divided_at = |i: usize| tree.division_order.iter().position(|&n| n == i);
        for (step, &target) in tree.division_order.iter().enumerate() {
            let alive = 1 + 4 * step;
            let divisible = |i: usize| {
                let n = &tree.nodes[i];
                divided_at(i).is_none_or(|s| s >= step) && n.level < k && n.region.width >= 2 && n.region.height >= 2
            };
            prop_assert!(target < alive && divisible(target));
            for i in (0..alive).filter(|&i| divisible(i)) {
                let (a, b) = (tree.nodes[i].info_score, tree.nodes[target].info_score);
                prop_assert!(a < b || (a == b && i >= target), "step {step}: node {i} beats {target}");
            }
        }
    }

    #[test]
    fn gates_ignore_logit_shift(seed in any::<u64>(), k in 2usize..6, shift in -5.0f64..5.0) {
        let d = 8;
        let mut rng = Rng::new(seed);
        let mut params = Params::new();
        let agg = Aggregator::build(&mut params, d, &mut rng).unwrap();
        let mfv = naive::random_tensor(&mut rng, &[k, d]);
        let (_, c) = aggregate(&agg, &params, &mfv, None).unwrap();
        let b3 = params.value(agg.b3).map(|v| v + shift);
        params.set_value("aggregator.b3", b3).unwrap();
        let (_, shifted) = aggregate(&agg, &params, &mfv, None).unwrap();
        for (a, b) in c.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), p in 1usize..10, heads in 1usize..4) {
        let d = 12;
        let mut rng = Rng::new(seed);
        let mut params = Params::new();
        let attn = MultiHeadAttention::build(&mut params, "attn", d, heads, &mut rng).unwrap();
        let mut tape = hindsight_core::Tape::new();
        let x = tape.constant(naive::random_tensor(&mut rng, &[p, d]));
        let (y, weights) = attn.forward_with_weights(&mut tape, &params, x, x).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[p, d]);
        prop_assert_eq!(weights.len(), heads);
        for w in weights {
            let w = tape.value(w);
            for r in 0..p {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn recon_loss_zero_only_on_match(seed in any::<u64>(), n in 1usize..4, bump in 0usize..12) {
        let mut rng = Rng::new(seed);
        let target: Vec<Tensor<f64>> = (0..n).map(|_| naive::random_tensor(&mut rng, &[3, 2, 2])).collect();
        prop_assert_eq!(recon_loss(&target, &target).unwrap(), 0.0);
        let mut pred = target.clone();
        pred[bump % n].data_mut()[bump] += 1e-3;
        prop_assert!(recon_loss(&pred, &target).unwrap() > 0.0);
    }
}

#[test]
fn periodic_encodings_are_injective_on_static_metadata() {
    for k in 1..=5 {
        let set = static_grid(&noise_image(64, 64, 1), k, 8).unwrap();
        let evs: Vec<Vec<f64>> = set.meta.iter().map(|m| periodic_encoding(m, 32, 10.0)).collect();
        for i in 0..evs.len() {
            for j in i + 1..evs.len() {
                let dist = evs[i].iter().zip(&evs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(dist > 1e-6, "k={k}: patches {i} and {j} share an encoding");
            }
        }
    }
}
