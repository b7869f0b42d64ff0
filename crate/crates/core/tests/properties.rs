use proptest::prelude::*;

use scpc::audio::Waveform;
use scpc::boundary::{build_weight_matrix, normalize_dissim};
use scpc::diffcore::{Tape, Tensor};
use scpc::infer::find_peaks;
use scpc::metrics::{match_boundaries, r_value};
use scpc::model::{frame_count, ModelConfig, ScpcModel};

fn sorted_times(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u32..3000, 0..max_len).prop_map(|mut v| {
        v.sort_unstable();
        v.dedup();
        v.into_iter().map(|ms| ms as f64 / 1000.0).collect()
    })
}

proptest! {
    #[test]
    fn hit_count_is_symmetric(a in sorted_times(40), b in sorted_times(40)) {
        let ab = match_boundaries(&a, &b, 0.02).unwrap();
        let ba = match_boundaries(&b, &a, 0.02).unwrap();
        prop_assert_eq!(ab.n_hit, ba.n_hit);
        prop_assert!(ab.n_hit <= a.len().min(b.len()));
    }

    #[test]
    fn raising_prominence_never_adds_peaks(x in prop::collection::vec(0.0f64..1.0, 0..60), lo in 0.0f64..0.5, step in 0.0f64..0.5) {
        for pad in [false, true] {
            let few = find_peaks(&x, lo + step, pad);
            let many = find_peaks(&x, lo, pad);
            prop_assert!(few.len() <= many.len());
            prop_assert!(few.iter().all(|i| many.contains(i)));
        }
        for &i in &find_peaks(&x, lo, false) {
            prop_assert!(i > 0 && i + 1 < x.len());
            prop_assert!(x[i] > x[i - 1] && x[i] > x[i + 1]);
        }
    }

    #[test]
    fn normalized_dissimilarity_spans_unit_interval(x in prop::collection::vec(-1.0f64..1.0, 1..50)) {
        let d = normalize_dissim(&x).unwrap();
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if hi > lo {
            prop_assert!(d.iter().any(|&v| v == 0.0) && d.iter().any(|&v| v == 1.0));
        } else {
            prop_assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn segments_partition_frames(bits in prop::collection::vec(any::<bool>(), 1..40)) {
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::vector(bits.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect()));
        let w = build_weight_matrix(&mut tape, b, bits.len() + 1).unwrap();
        prop_assert_eq!(w.n_segments(), 1 + bits.iter().filter(|&&x| x).count());
        prop_assert_eq!(w.spans[0].0, 0);
        prop_assert_eq!(w.spans.last().unwrap().1, bits.len());
        for pair in w.spans.windows(2) {
            prop_assert_eq!(pair[1].0, pair[0].1 + 1);
        }
    }

    #[test]
    fn r_value_is_at_most_one(hr in 0.0f64..=1.0, os in -1.0f64..5.0) {
        let r = r_value(hr, os);
        prop_assert!(r <= 1.0 + 1e-12);
        if hr < 1.0 || os != 0.0 {
            prop_assert!(r < 1.0);
        }
    }
}

#[test]
fn frame_count_matches_encoder_for_random_lengths() {
    use rand::{Rng, SeedableRng};
    let model = ScpcModel::init(ModelConfig { p: 4, q: 4 }, 5);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let t: usize = rng.gen_range(465..20_000);
        let samples: Vec<f32> = (0..t).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wave = Waveform::new("r", samples, 16_000).unwrap();
        let frames = model.encode_frames(&wave).unwrap();
        assert_eq!(frames.len(), (t - 465) / 160 + 1, "T = {t}");
        assert_eq!(frames.len(), frame_count(t));
    }
}
