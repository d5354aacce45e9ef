use muie_core::geometry::{rle_decode, rle_encode, DenseMask};
use muie_core::model::ImageMask;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Random run list summing to w*h, with occasional zero-length runs.
fn random_rle(rng: &mut StdRng, w: u32, h: u32) -> Vec<u32> {
    let area = w * h;
    let mean_run = rng.gen_range(1..=area.clamp(1, 4096));
    let mut runs = Vec::new();
    let mut left = area;
    while left > 0 {
        let r = if rng.gen_ratio(1, 20) {
            0
        } else {
            rng.gen_range(1..=mean_run.min(left).max(1) * 2).min(left)
        };
        runs.push(r);
        left -= r;
    }
    runs
}

/// Reference decoder: expand runs one pixel at a time.
fn expand(rle: &[u32]) -> Vec<bool> {
    rle.iter()
        .enumerate()
        .flat_map(|(i, &r)| std::iter::repeat_n(i % 2 == 1, r as usize))
        .collect()
}

#[test]
fn ten_thousand_masks_round_trip() {
    let mut rng = StdRng::seed_from_u64(29);
    for trial in 0..10_000 {
        // most masks are small; every 20th spans the full range
        let cap = if trial % 20 == 0 { 512 } else { 64 };
        let (w, h) = (rng.gen_range(1..=cap), rng.gen_range(1..=cap));
        let rle = random_rle(&mut rng, w, h);
        let mask = ImageMask::new(w, h, rle.clone()).unwrap();
        let dense = rle_decode(&mask);
        if trial % 50 == 0 {
            assert_eq!(dense.bits(), expand(&rle), "trial {trial}");
        }
        let encoded = rle_encode(&dense);
        assert_eq!(encoded, mask.canonical(), "trial {trial}");
        assert_eq!(rle_decode(&encoded), dense, "trial {trial}");
    }
}

#[test]
fn largest_masks_round_trip() {
    let mut rng = StdRng::seed_from_u64(31);
    for density in [0.0, 0.001, 0.5, 0.999, 1.0] {
        let bits: Vec<bool> = (0..512 * 512).map(|_| rng.gen_bool(density)).collect();
        let dense = DenseMask::from_bits(512, 512, &bits).unwrap();
        let encoded = rle_encode(&dense);
        assert_eq!(encoded.foreground(), dense.count());
        assert_eq!(rle_decode(&encoded), dense);
        assert_eq!(expand(encoded.rle()), bits);
    }
}

proptest! {
    #[test]
    fn dense_round_trip(w in 1u32..40, h in 1u32..40, seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.3)).collect();
        let dense = DenseMask::from_bits(w, h, &bits).unwrap();
        let encoded = rle_encode(&dense);
        prop_assert_eq!(&encoded, &encoded.canonical());
        prop_assert_eq!(rle_decode(&encoded), dense);
    }
}
