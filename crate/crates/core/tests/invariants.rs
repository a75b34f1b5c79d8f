//! Property tests for the cross-module invariants.

use proptest::prelude::*;

use segbound::gap::PrototypeBank;
use segbound::has::HardnessTable;
use segbound::morphology::{
    dilate, downsample_mask, erode, extract_boundary, granularity_bands, SemanticMask,
    IGNORE_LABEL,
};
use segbound::npy;
use segbound::rng::RngStream;
use segbound::tensor::Tensor;
use segbound::ube::{entropy_map, softmax_probs, ube_weights};

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=6, 1..=4)
}

proptest! {
    #[test]
    fn npy_roundtrip_f64(shape in shape_strategy(), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut rng = RngStream::new(seed);
        let data: Vec<f64> = (0..n).map(|_| rng.next_normal() * 1e3).collect();
        let t = Tensor::new(shape, data).unwrap();
        let bytes = npy::to_bytes(&t).unwrap();
        match npy::from_bytes(&bytes).unwrap() {
            npy::NpyArray::F64(back) => prop_assert_eq!(back, t),
            other => prop_assert!(false, "wrong dtype {}", other.dtype()),
        }
    }

    #[test]
    fn npy_roundtrip_f32(shape in shape_strategy(), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut rng = RngStream::new(seed);
        let data: Vec<f32> = (0..n).map(|_| rng.next_normal() as f32).collect();
        let t = Tensor::new(shape, data).unwrap();
        let bytes = npy::to_bytes(&t).unwrap();
        match npy::from_bytes(&bytes).unwrap() {
            npy::NpyArray::F32(back) => prop_assert_eq!(back, t),
            other => prop_assert!(false, "wrong dtype {}", other.dtype()),
        }
    }

    #[test]
    fn npy_roundtrip_i32(shape in shape_strategy(), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut rng = RngStream::new(seed);
        let data: Vec<i32> = (0..n).map(|_| rng.next_u64() as i32).collect();
        let t = Tensor::new(shape, data).unwrap();
        let bytes = npy::to_bytes(&t).unwrap();
        match npy::from_bytes(&bytes).unwrap() {
            npy::NpyArray::I32(back) => prop_assert_eq!(back, t),
            other => prop_assert!(false, "wrong dtype {}", other.dtype()),
        }
    }

    #[test]
    fn npy_roundtrip_u8(shape in shape_strategy(), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut rng = RngStream::new(seed);
        let data: Vec<u8> = (0..n).map(|_| rng.next_u64() as u8).collect();
        let t = Tensor::new(shape, data).unwrap();
        let bytes = npy::to_bytes(&t).unwrap();
        match npy::from_bytes(&bytes).unwrap() {
            npy::NpyArray::U8(back) => prop_assert_eq!(back, t),
            other => prop_assert!(false, "wrong dtype {}", other.dtype()),
        }
    }
}

fn mask_strategy(
    max_side: usize,
    max_classes: usize,
) -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (4usize..=max_side, 4usize..=max_side, 2usize..=max_classes, any::<u64>())
}

fn build_mask(h: usize, w: usize, classes: usize, seed: u64) -> SemanticMask {
    let mut rng = RngStream::new(seed);
    let data: Vec<i32> = (0..h * w)
        .map(|_| rng.next_below(classes as u64) as i32)
        .collect();
    SemanticMask::new(Tensor::new(vec![h, w], data).unwrap(), classes).unwrap()
}

/// Independent reference: a pixel is boundary iff its clamped k x k window
/// holds two distinct non-ignore labels and no ignore pixel.
fn disagreement_oracle(mask: &SemanticMask, k: usize) -> Tensor<u8> {
    let (h, w) = (mask.height(), mask.width());
    let r = (k / 2) as isize;
    let mut out = Tensor::filled(vec![h, w], 0u8);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut first: Option<i32> = None;
            let mut distinct = false;
            let mut ignore = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let v = mask.label(yy, xx);
                    if v == IGNORE_LABEL {
                        ignore = true;
                    } else {
                        match first {
                            None => first = Some(v),
                            Some(f) if f != v => distinct = true,
                            _ => {}
                        }
                    }
                }
            }
            if distinct && !ignore {
                out.set2(y as usize, x as usize, 1);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn erosion_is_dual_to_dilation((h, w, _, seed) in mask_strategy(24, 3)) {
        let mut rng = RngStream::new(seed);
        let data: Vec<u8> = (0..h * w).map(|_| (rng.next_u64() & 1) as u8).collect();
        let m = Tensor::new(vec![h, w], data).unwrap();
        let complement = m.map(|v| 1 - v);
        for k in [1usize, 3, 5] {
            let lhs = erode(&m, k).unwrap();
            let rhs = dilate(&complement, k).unwrap().map(|v| 1 - v);
            prop_assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn boundary_matches_disagreement_oracle((h, w, classes, seed) in mask_strategy(32, 5)) {
        let mask = build_mask(h, w, classes, seed);
        for k in [3usize, 5, 7] {
            let band = extract_boundary(&mask, k, k).unwrap();
            prop_assert_eq!(band, disagreement_oracle(&mask, k));
        }
    }

    #[test]
    fn granularity_rings_partition_thickest_band((h, w, classes, seed) in mask_strategy(32, 5)) {
        let mask = build_mask(h, w, classes, seed);
        let bands = granularity_bands(&mask, [3, 5, 7]).unwrap();
        let thin = extract_boundary(&mask, 3, 3).unwrap();
        let medium = extract_boundary(&mask, 5, 5).unwrap();
        let thick = extract_boundary(&mask, 7, 7).unwrap();
        for i in 0..thin.len() {
            prop_assert!(thin.data()[i] <= medium.data()[i]);
            prop_assert!(medium.data()[i] <= thick.data()[i]);
            let expected = if thin.data()[i] == 1 {
                1u8
            } else if medium.data()[i] == 1 {
                2
            } else if thick.data()[i] == 1 {
                3
            } else {
                0
            };
            prop_assert_eq!(bands.bands.data()[i], expected);
        }
    }

    #[test]
    fn downsample_majority_beats_every_other_class((h, w, classes, seed) in (2usize..=8, 2usize..=8, 2usize..=4, any::<u64>())) {
        let stride = 2;
        let mask = build_mask(h * stride, w * stride, classes, seed);
        let down = downsample_mask(&mask, stride).unwrap();
        for i in 0..h {
            for j in 0..w {
                let mut counts = vec![0usize; classes];
                for y in i * stride..(i + 1) * stride {
                    for x in j * stride..(j + 1) * stride {
                        counts[mask.label(y, x) as usize] += 1;
                    }
                }
                let picked = down.label(i, j) as usize;
                for (c, &n) in counts.iter().enumerate() {
                    prop_assert!(counts[picked] >= n);
                    if n == counts[picked] {
                        prop_assert!(picked <= c);
                    }
                }
            }
        }
    }

    #[test]
    fn entropy_is_bounded_by_log_c((h, w, classes, seed) in mask_strategy(12, 6)) {
        let mut rng = RngStream::new(seed);
        let logits = Tensor::new(
            vec![h, w, classes],
            (0..h * w * classes).map(|_| rng.next_normal() * 3.0).collect(),
        )
        .unwrap();
        let probs = softmax_probs(&logits).unwrap();
        let entropy = entropy_map(&probs).unwrap();
        let bound = (classes as f64).ln();
        for &e in entropy.data() {
            prop_assert!(e >= 0.0);
            prop_assert!(e <= bound + 1e-12);
        }
    }

    #[test]
    fn ube_weight_contract((h, w, seed) in (3usize..=10, 3usize..=10, any::<u64>())) {
        let mut rng = RngStream::new(seed);
        let alpha = 3.0;
        let entropy = Tensor::new(
            vec![h, w],
            (0..h * w).map(|_| rng.next_f64() * 2.0).collect(),
        )
        .unwrap();
        let boundary = Tensor::new(
            vec![h, w],
            (0..h * w).map(|_| (rng.next_u64() & 1) as u8).collect(),
        )
        .unwrap();
        let wm = ube_weights(&entropy, &boundary, alpha).unwrap();
        for (&v, &b) in wm.values.data().iter().zip(boundary.data()) {
            if b == 1 {
                prop_assert!(v > 1.0 && v < 1.0 + alpha);
            } else {
                prop_assert!(v == 1.0);
            }
        }
    }

    #[test]
    fn prototype_norms_survive_update_streams(seed in any::<u64>(), n_updates in 1usize..200) {
        let mut rng = RngStream::new(seed);
        let mut bank = PrototypeBank::init(2, 6, 0.99, &mut rng).unwrap();
        for _ in 0..n_updates {
            let row: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
            let coords = vec![(rng.next_below(2) as usize, 1 + rng.next_below(3) as u8)];
            let fs = segbound::gap::BoundaryFeatureSet {
                features: Tensor::new(vec![1, 6], row).unwrap(),
                coords,
                positions: vec![(0, 0)],
            };
            bank.update(&fs).unwrap();
        }
        for chunk in bank.prototypes().data().chunks_exact(6) {
            let norm: f64 = chunk.iter().map(|&x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ema_scores_stay_in_the_loss_hull(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let mut table = HardnessTable::new(3, 0.9, 5).unwrap();
        let (lo, hi) = (1.0, 4.0);
        for t in 0..200u64 {
            let id = rng.next_below(3) as usize;
            table.record_loss(id, lo + (hi - lo) * rng.next_f64(), t).unwrap();
        }
        table.flush(200);
        for &s in table.scores() {
            prop_assert!((lo..=hi).contains(&s));
        }
    }
}
