//! Randomised invariants of the losses, metrics and generator.

use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use proptest::prelude::*;

use nightseg::distill::{
    channel_softmax, cor_gram, cosine_map, gram, js_divergence, l_cds, l_js, Quad,
};
use nightseg::eval::{confusion, miou, per_class_iou};
use nightseg::image::LabelMap;
use nightseg::nn::Maps;
use nightseg::objective::{static_pseudo_labels, weighted_ce, ClassWeights, StaticClassSet};
use nightseg::segnet::{ContentEmbedding, FeatureMap, HeadParams, Logits, NetConfig, NetParams};
use nightseg::synth::{generate_scene, render_domain, render_target_pair, NightSpec, SceneSpec, StyleSpec};
use nightseg::trainer::{poly_lr, TrainConfig};

fn maps(c: usize, h: usize, w: usize) -> impl Strategy<Value = Maps> {
    prop::collection::vec(-5.0f64..5.0, c * h * w).prop_map(move |d| Maps::from_vec(c, h, w, d))
}

/// Four maps of one random shape.
fn quad_maps() -> impl Strategy<Value = [Maps; 4]> {
    (1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
        [maps(c, h, w), maps(c, h, w), maps(c, h, w), maps(c, h, w)]
    })
}

fn quad<T>(m: &[Maps; 4], f: impl Fn(Maps) -> T) -> Quad<T> {
    Quad {
        s_d: f(m[0].clone()),
        s_n: f(m[1].clone()),
        t_d: f(m[2].clone()),
        t_n: f(m[3].clone()),
    }
}

fn labels(k: u8, n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..k, n)
}

proptest! {
    #[test]
    fn cosine_entries_are_bounded(m in quad_maps()) {
        let c = cosine_map(&ContentEmbedding(m[0].clone()), &ContentEmbedding(m[1].clone())).unwrap();
        for v in c.values {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
        }
    }

    #[test]
    fn softmax_columns_sum_to_one(m in maps(4, 2, 3)) {
        let p = channel_softmax(&ContentEmbedding(m));
        for i in 0..6 {
            let s: f64 = (0..4).map(|c| p.data[c * 6 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn js_and_l_js_are_bounded(m in quad_maps(), lambda in 0.0f64..8.0) {
        let p = channel_softmax(&ContentEmbedding(m[0].clone()));
        let q = channel_softmax(&ContentEmbedding(m[1].clone()));
        let js = js_divergence(&p, &q).unwrap();
        prop_assert!((0.0..=LN_2).contains(&js));
        let e = quad(&m, ContentEmbedding);
        let v = l_js(&e.as_ref(), lambda).unwrap();
        prop_assert!(v >= -2.0 * LN_2 - 1e-12 && v <= 2.0 * lambda * LN_2 + 1e-12, "{v}");
    }

    #[test]
    fn gram_is_symmetric_psd(m in maps(4, 3, 3)) {
        let g = gram(&FeatureMap(m));
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
        let min = DMatrix::from_row_slice(4, 4, &g.values).symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-8, "{min}");
    }

    #[test]
    fn cds_is_bounded_and_scale_invariant(m in quad_maps(), k in 0.01f64..100.0) {
        let f = quad(&m, FeatureMap);
        let v = l_cds(&f.as_ref()).unwrap();
        prop_assert!((0.0..=4.0).contains(&v));
        let scaled = f.map(|x| {
            let mut y = x.0.clone();
            y.data.iter_mut().for_each(|v| *v *= k);
            FeatureMap(y)
        });
        prop_assert!((l_cds(&scaled.as_ref()).unwrap() - v).abs() < 1e-9);
        let a = cor_gram(&gram(&f.s_d), &gram(&f.t_d)).unwrap().value;
        let b = cor_gram(&gram(&scaled.s_d), &gram(&f.t_d)).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn weighted_ce_is_non_negative(m in maps(3, 2, 2), l in labels(3, 4), w in prop::array::uniform3(0.0f64..5.0)) {
        let label = LabelMap::new(2, 2, 3, 255, l).unwrap();
        let cw = ClassWeights::new(w.to_vec()).unwrap();
        prop_assert!(weighted_ce(&Logits(m), &label, &cw).unwrap().value >= 0.0);
    }

    #[test]
    fn pseudo_label_set_shrinks_with_tau(m in maps(4, 3, 3), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let statics = StaticClassSet::new(vec![0, 2], 4).unwrap();
        let logits = Logits(m);
        let a = static_pseudo_labels(&logits, &statics, lo, 255).unwrap();
        let b = static_pseudo_labels(&logits, &statics, hi, 255).unwrap();
        for i in 0..9 {
            if !b.is_ignored(i) {
                prop_assert_eq!(a.classes()[i], b.classes()[i]);
            }
        }
    }

    #[test]
    fn miou_is_a_fraction_and_relabeling_equivariant(
        p in labels(5, 24),
        t in labels(5, 24),
        perm in Just((0u8..5).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let lm = |v: Vec<u8>| LabelMap::new(4, 6, 5, 255, v).unwrap();
        let a = miou(&per_class_iou(&confusion(&lm(p.clone()), &lm(t.clone())).unwrap())).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let relabel = |v: &[u8]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<_>>();
        let b = miou(&per_class_iou(&confusion(&lm(relabel(&p)), &lm(relabel(&t))).unwrap())).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn poly_lr_decays_from_base(a in 0usize..5000, b in 0usize..5000) {
        let cfg = TrainConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (poly_lr(lo, &cfg).unwrap(), poly_lr(hi, &cfg).unwrap());
        prop_assert!(y <= x && x <= cfg.base_lr && y >= 0.0);
    }

    #[test]
    fn night_renders_stay_in_unit_range(seed in 0u64..10_000) {
        let spec = SceneSpec::desk(seed);
        let label = generate_scene(&SceneSpec { height: 16, width: 16, ..spec }).unwrap();
        let img = render_domain(&label, &StyleSpec::desk_target(), Some(&NightSpec::desk()), seed).unwrap();
        prop_assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn embeddings_are_unit_columns(m in maps(12, 2, 2), seed in 0u64..100) {
        let cfg = NetConfig::desk(8);
        let head = HeadParams::init(&cfg, seed);
        let e = head.project(&FeatureMap(m)).unwrap();
        let d = cfg.embed_dim;
        for p in 0..4 {
            let n: f64 = (0..d).map(|c| e.0.data[c * 4 + p].powi(2)).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6 || n == 0.0, "{n}");
        }
    }
}

/// Shifting the night view by up to two feature pixels barely moves its
/// Gram correlation with the day view.
#[test]
fn gram_correlation_tolerates_parallax() {
    let net = NetParams::init(NetConfig::desk(8), 3);
    for seed in 0..5 {
        let label = generate_scene(&SceneSpec::desk(seed)).unwrap();
        let feat = |img: &nightseg::image::Image| gram(&net.forward(img).unwrap().1);
        let (day, night, _) = render_target_pair(&label, &StyleSpec::desk_target(), &NightSpec::desk(), seed, (0, 0)).unwrap();
        let g_day = feat(&day);
        let still = cor_gram(&g_day, &feat(&night)).unwrap().value;
        for shift in [(4, 0), (0, -8), (8, 8), (-4, 4)] {
            let (_, moved, _) = render_target_pair(&label, &StyleSpec::desk_target(), &NightSpec::desk(), seed, shift).unwrap();
            let v = cor_gram(&g_day, &feat(&moved)).unwrap().value;
            assert!((v - still).abs() < 0.05, "seed {seed} shift {shift:?}: {still} vs {v}");
        }
    }
}
