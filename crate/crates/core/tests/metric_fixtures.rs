//! Worked metric examples; expected values are computed independently
//! (pixel enumeration, closed forms, interval arithmetic) inside each test.

use std::collections::BTreeMap;

use muie_core::geometry::{
    bce_loss, dice_coefficient, dice_loss, mask_iou, rle_decode, rle_encode, span_iou_1d,
    tracklet_iou_profile, DenseMask,
};
use muie_core::model::{
    AudioSegment, EntityMention, EventArgument, EventRecord, ImageMask, RelationTriple, Tracklet,
};
use muie_core::scoring::{
    score_audio_segmentation, score_event_argument, score_event_trigger, score_image_grounding,
    score_ner, score_re, score_video_tracking, MatchOptions, Prf,
};

const TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

/// Pixels given as (row, col) on a w×h grid.
fn mask(w: u32, h: u32, on: &[(u32, u32)]) -> DenseMask {
    let mut m = DenseMask::zeros(w, h).unwrap();
    for &(r, c) in on {
        m.set((r * w + c) as usize, true);
    }
    m
}

fn f1_of(tp: f64, fp: f64, fn_: f64) -> (f64, f64, f64) {
    let p = tp / (tp + fp);
    let r = tp / (tp + fn_);
    (p, r, 2.0 * p * r / (p + r))
}

fn ent(s: &str, l: &str) -> EntityMention {
    EntityMention::new(s, l).unwrap()
}

#[test]
fn rle_hand_decode_is_row_major() {
    let m = ImageMask::new(2, 2, vec![1, 2, 1]).unwrap();
    assert_eq!(rle_decode(&m).bits(), vec![false, true, true, false]);
}

#[test]
fn iou_one_third() {
    let a = mask(2, 2, &[(0, 0), (0, 1)]);
    let b = mask(2, 2, &[(0, 1), (1, 1)]);
    // enumerate pixels: inter = 1, union = 3
    let (mut inter, mut union) = (0, 0);
    for i in 0..4 {
        inter += (a.get(i) && b.get(i)) as u32;
        union += (a.get(i) || b.get(i)) as u32;
    }
    let expected = inter as f64 / union as f64;
    assert!(close(expected, 1.0 / 3.0));
    assert!(close(mask_iou(&a, &b).unwrap(), expected));
}

#[test]
fn dice_one_half() {
    let a = mask(2, 2, &[(0, 0), (0, 1)]);
    let b = mask(2, 2, &[(0, 1), (1, 1)]);
    assert!(close(dice_coefficient(&a, &b).unwrap(), 2.0 * 1.0 / 4.0));
    assert!(close(dice_loss(&a, &b).unwrap(), 0.5));
}

#[test]
fn bce_closed_forms() {
    let eps = 1e-6_f64;
    let gold = mask(4, 2, &[(0, 0), (0, 3), (1, 1)]);
    let agree = -(1.0 - eps).ln();
    let disagree = -eps.ln();
    assert!(close(bce_loss(&gold, &gold, eps).unwrap(), agree));
    assert!((agree - 1.0000005e-6).abs() < 1e-12);
    assert!(close(
        bce_loss(&gold.complement(), &gold, eps).unwrap(),
        disagree
    ));
    assert!((disagree - 13.815510557964274).abs() < 1e-12);

    // flip exactly half the pixels
    let mut half = gold.clone();
    for i in 0..4 {
        half.set(i, !gold.get(i));
    }
    let expected = (agree + disagree) / 2.0;
    assert!(close(bce_loss(&half, &gold, eps).unwrap(), expected));
    assert!((expected - 6.9077557789821).abs() < 1e-9);
}

#[test]
fn span_iou_interval_arithmetic() {
    let a = AudioSegment::new(0.0, 10.0).unwrap();
    let b = AudioSegment::new(5.0, 15.0).unwrap();
    // overlap [5,10] = 5, covered [0,15] = 15
    assert!(close(span_iou_1d(&a, &b), 5.0 / 15.0));
}

fn tracklet(frames: &[(u32, DenseMask)]) -> Tracklet {
    Tracklet::new(frames.iter().map(|(f, m)| (*f, rle_encode(m))).collect()).unwrap()
}

#[test]
fn tracklet_frame_mean() {
    let full = mask(2, 1, &[(0, 0), (0, 1)]);
    let left = mask(2, 1, &[(0, 0)]);
    let gold = tracklet(&[(0, full.clone()), (1, full.clone())]);
    let pred = tracklet(&[(0, full.clone()), (1, left)]);
    let profile = tracklet_iou_profile(&gold, &pred).unwrap();
    assert_eq!(profile.per_frame, BTreeMap::from([(0, 1.0), (1, 0.5)]));
    assert!(close(profile.mean, (1.0 + 0.5) / 2.0));
    let j = score_video_tracking(&[gold], &[pred]).unwrap();
    assert!(close(j.value, 0.75));
}

#[test]
fn ner_trump_merkel() {
    let gold = [ent("Trump", "person"), ent("Merkel", "person")];
    let pred = [ent("Trump", "person")];
    let prf = score_ner(&gold, &pred, MatchOptions::default());
    let (p, r, f) = f1_of(1.0, 0.0, 1.0);
    assert_eq!((prf.tp, prf.fp, prf.fn_), (1, 0, 1));
    assert!(close(prf.precision, p) && close(prf.recall, r) && close(prf.f1, f));
    assert!(close(prf.f1, 2.0 / 3.0));
}

#[test]
fn re_one_right_one_spurious() {
    let triple = |s: &str, rel: &str, o: &str| RelationTriple {
        subject: ent(s, "person"),
        relation: rel.into(),
        object: ent(o, "person"),
    };
    let gold = [triple("A", "peer", "B"), triple("A", "peer", "C")];
    let pred = [triple("A", "peer", "B"), triple("B", "peer", "C")];
    let prf = score_re(&gold, &pred, MatchOptions::default());
    assert_eq!((prf.tp, prf.fp, prf.fn_), (1, 1, 1));
    assert!(close(prf.precision, 0.5) && close(prf.recall, 0.5) && close(prf.f1, 0.5));
}

#[test]
fn event_trigger_two_of_three() {
    let ev = |t: &str| EventRecord::new(t, "Meet", vec![]).unwrap();
    let gold = [ev("met"), ev("visited"), ev("talked")];
    let pred = [ev("met"), ev("visited")];
    let prf = score_event_trigger(&gold, &pred, MatchOptions::default());
    let (p, r, f) = f1_of(2.0, 0.0, 1.0);
    assert!(close(prf.precision, p) && close(prf.recall, r) && close(prf.f1, f));
    assert!(close(prf.f1, 0.8));
}

#[test]
fn event_argument_one_of_two() {
    let arg = |m: &str, r: &str| EventArgument::new(m, r).unwrap();
    let gold = [EventRecord::new(
        "met",
        "Meet",
        vec![arg("Trump", "Agent"), arg("Berlin", "Place")],
    )
    .unwrap()];
    let pred = [EventRecord::new("met", "Meet", vec![arg("Trump", "Agent")]).unwrap()];
    let prf = score_event_argument(&gold, &pred, MatchOptions::default());
    assert_eq!((prf.tp, prf.fp, prf.fn_), (1, 0, 1));
    assert!(close(prf.f1, 2.0 / 3.0));
}

#[test]
fn image_miou_one_exact_copy_of_two() {
    let a = rle_encode(&mask(3, 2, &[(0, 0), (0, 1)]));
    let b = rle_encode(&mask(3, 2, &[(1, 2)]));
    let s = score_image_grounding(&[a.clone(), b], &[a]).unwrap();
    assert!(close(s.value, (1.0 + 0.0) / 2.0));
    assert_eq!(
        (s.matched_pairs, s.unmatched_gold, s.unmatched_pred),
        (1, 1, 0)
    );
}

#[test]
fn audio_miou_cases() {
    let seg = |s, e| AudioSegment::new(s, e).unwrap();
    let s = score_audio_segmentation(&[seg(0.0, 10.0)], &[seg(5.0, 15.0)]);
    assert!(close(s.value, 1.0 / 3.0));
    let s = score_audio_segmentation(&[seg(0.0, 2.0), seg(5.0, 7.0)], &[seg(5.0, 7.0)]);
    assert!(close(s.value, 0.5));
}

#[test]
fn micro_aggregation() {
    let total = Prf::from_counts(1, 0, 1).combine(Prf::from_counts(1, 1, 0));
    let (p, r, f) = f1_of(2.0, 1.0, 1.0);
    assert!(close(total.precision, p) && close(total.recall, r) && close(total.f1, f));
    assert!(close(total.f1, 2.0 / 3.0));
}
