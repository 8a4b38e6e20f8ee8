mod common;

use acelab_core::ace::{build_mixed, AugmentedSample};
use acelab_core::archive::{classifier_archive, classifier_from_archive, pce_archive, pce_from_archive, WeightArchive};
use acelab_core::attacks::{carlini_wagner, deepfool, fgsm, CwConfig};
use acelab_core::classifier::{predictive_entropy, soft_cross_entropy, Classifier, ClassifierConfig};
use acelab_core::data::{far_ood_uniform, standardize, two_moons, LabeledSet, SampleBox, Split};
use acelab_core::nn::{Module, Rng};
use acelab_core::pce::{
    discriminator_loss, generator_terms, sample_condition, Condition, Pce, PceConfig,
};
use acelab_core::selective::SelectiveClassifier;
use acelab_core::tensor::{Array, Graph};
use common::{random_array, random_simplex};
use proptest::prelude::*;

fn small_classifier(seed: u64, d: usize, k: usize) -> Classifier {
    let cfg = ClassifierConfig { hidden: 8, ..ClassifierConfig::default() };
    Classifier::new(d, k, &cfg, &mut Rng::new(seed)).unwrap()
}

fn labels(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(k)).collect()
}

fn bits(a: &Array) -> Vec<u64> {
    a.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let logits = random_array(&mut rng, &[5, 4], 5.0);
        let g = Graph::inference();
        let p = g.constant(logits.clone()).softmax().unwrap().array();
        let q = g.constant(logits.map(|v| v + shift)).softmax().unwrap().array();
        for (r, s) in p.iter_rows().zip(q.iter_rows()) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (a, b) in r.iter().zip(s) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_consumers_add_their_gradients(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = random_array(&mut rng, &[3, 2], 1.0);
        let grad = |f: &dyn Fn(&acelab_core::tensor::Tensor) -> acelab_core::tensor::Tensor| {
            let g = Graph::new();
            let x = g.input(a.clone(), true);
            let out = f(&x);
            g.grad(&out, &[&x], None, false).unwrap()[0].array()
        };
        let both = grad(&|x| x.tanh().sum().add(&x.square().unwrap().sum()).unwrap());
        let one = grad(&|x| x.tanh().sum());
        let two = grad(&|x| x.square().unwrap().sum());
        for ((b, o), t) in both.data().iter().zip(one.data()).zip(two.data()) {
            prop_assert!((b - (o + t)).abs() < 1e-12);
        }
    }

    #[test]
    fn fgsm_respects_the_infinity_ball(seed in any::<u64>(), eps in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let f = small_classifier(seed, 2, 2);
        let x = random_array(&mut rng, &[16, 2], 1.5);
        let y = labels(&mut rng, 16, 2);
        let adv = fgsm(&f, &x, &y, eps, None).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            let d = (a - b).abs();
            prop_assert!(d == 0.0 || (d - eps).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let bounds = SampleBox::square(1.0, 2);
        let clipped = fgsm(&f, &x, &y, eps, Some(&bounds)).unwrap();
        prop_assert!(clipped.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn attacks_are_deterministic(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let f = small_classifier(seed, 2, 3);
        let x = random_array(&mut rng, &[6, 2], 1.0);
        let y = labels(&mut rng, 6, 3);
        prop_assert_eq!(bits(&fgsm(&f, &x, &y, 0.1, None).unwrap()), bits(&fgsm(&f, &x, &y, 0.1, None).unwrap()));
        let d1 = deepfool(&f, &x, &y, 5, 0.02).unwrap();
        let d2 = deepfool(&f, &x, &y, 5, 0.02).unwrap();
        prop_assert_eq!(bits(&d1.adversarial), bits(&d2.adversarial));
        let cfg = CwConfig { iters: 10, ..CwConfig::default() };
        let b = SampleBox::square(3.0, 2);
        prop_assert_eq!(
            bits(&carlini_wagner(&f, &x, &y, &cfg, &b).unwrap()),
            bits(&carlini_wagner(&f, &x, &y, &cfg, &b).unwrap())
        );
    }

    #[test]
    fn sampled_conditions_are_simplex_points(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = Rng::new(seed);
        let origin = rng.below(k);
        let target = (origin + 1 + rng.below(k - 1)) % k;
        let (c, u) = sample_condition(k, origin, target, &mut rng, None).unwrap();
        let v = c.values();
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(v[origin], u);
        for (j, x) in v.iter().enumerate() {
            if j != origin && j != target {
                prop_assert_eq!(*x, 0.0);
            }
        }
    }

    #[test]
    fn soft_cross_entropy_of_a_row_with_itself_is_its_entropy(seed in any::<u64>(), k in 2usize..6) {
        let p = random_simplex(&mut Rng::new(seed), 7, k);
        let g = Graph::inference();
        let pt = g.constant(p.clone());
        let ce = soft_cross_entropy(&pt, &pt).unwrap().item();
        let h = predictive_entropy(&p).unwrap();
        prop_assert!((ce - h.iter().sum::<f64>() / 7.0).abs() <= 1e-12);
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let f = small_classifier(seed, 2, 2);
        let cfg = PceConfig { latent: 4, hidden: 8, ..PceConfig::default() };
        let pce = Pce::new(&f, &cfg, &mut rng);
        let x = random_array(&mut rng, &[8, 2], 1.0);
        let c = random_simplex(&mut rng, 8, 2);
        // the path-length term needs a differentiable latent
        let g = Graph::new();
        let fx = f.predict_proba(&x).unwrap();
        let probe = random_array(&mut rng, &[8, 2], 1.0);
        let t = generator_terms(&pce, &f, &g, &g.constant(x.clone()), &g.constant(c), &g.constant(fx), &g.constant(probe), true).unwrap();
        for term in [&t.adv, &t.kl, &t.rec, &t.reg] {
            prop_assert!(term.item() >= -1e-12);
        }
        let d = pce.discriminator.forward(&g, &g.constant(x.clone()), Some(&f.forward(&g, &g.constant(x), acelab_core::classifier::Mode::Eval, None).unwrap().penultimate)).unwrap();
        prop_assert!(discriminator_loss(&d, &d).unwrap().item() >= 0.0);
    }

    #[test]
    fn lowering_the_threshold_never_adds_abstentions(seed in any::<u64>(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let mut rng = Rng::new(seed);
        let f = small_classifier(seed, 2, 2);
        let pce = Pce::new(&f, &PceConfig { latent: 4, hidden: 8, ..PceConfig::default() }, &mut rng);
        let x = random_array(&mut rng, &[20, 2], 2.0);
        let strict = SelectiveClassifier::new(&f, &f, &pce, hi).unwrap().decide(&x).unwrap();
        let lax = SelectiveClassifier::new(&f, &f, &pce, lo).unwrap().decide(&x).unwrap();
        for (s, l) in strict.iter().zip(&lax) {
            prop_assert!(s.is_abstained() || !l.is_abstained());
            prop_assert_eq!(s.is_abstained(), s.density() < hi);
        }
    }

    #[test]
    fn mixed_counts_follow_the_ratio(seed in any::<u64>(), rho in 0.0f64..=1.0, n in 1usize..60) {
        let mut rng = Rng::new(seed);
        let real = LabeledSet::new(random_array(&mut rng, &[n, 2], 1.0), labels(&mut rng, n, 2), Split::Train).unwrap();
        let aug: Vec<AugmentedSample> = (0..n)
            .map(|i| {
                let u = rng.uniform();
                AugmentedSample { x: vec![rng.gaussian(), rng.gaussian()], condition: Condition::binary(2, 0, 1, u).unwrap(), source_index: i, u }
            })
            .collect();
        let m = build_mixed(&real, &aug, rho, None, 2, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(m.real_count + m.augmented_count, n);
        prop_assert!((m.augmented_count as f64 - rho * n as f64).abs() <= 1.0);
        for row in m.data.targets.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let again = build_mixed(&real, &aug, rho, None, 2, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(m, again);
    }

    #[test]
    fn standardized_reference_has_zero_mean_unit_std(seed in any::<u64>(), n in 2usize..200) {
        let mut rng = Rng::new(seed);
        let x = random_array(&mut rng, &[n, 3], 4.0).map(|v| 3.0 * v + 1.0);
        let set = LabeledSet::new(x, vec![0; n], Split::Train).unwrap();
        let (s, out) = standardize(&set, &[&set]).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = out[0].features.iter_rows().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
        let back = s.invert(&out[0].features);
        for (a, b) in back.data().iter().zip(set.features.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn far_ood_points_keep_their_distance(seed in any::<u64>(), radius in 0.1f64..0.8) {
        let mut rng = Rng::new(seed);
        let train = two_moons(200, 0.1, &mut rng).unwrap();
        let far = far_ood_uniform(100, &SampleBox::square(4.0, 2), &train.features, radius, &mut rng).unwrap();
        for p in far.features.iter_rows() {
            for q in train.features.iter_rows() {
                let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!(d2 >= radius * radius);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn archives_round_trip_bitwise(seed in any::<u64>(), k in 2usize..5, fusion in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(seed);
        let mut f = small_classifier(seed, 2, k);
        for p in f.params_mut() {
            for v in p.value_mut().data_mut() {
                *v = rng.gaussian();
            }
        }
        let stem = dir.path().join("clf");
        classifier_archive(&f).save(&stem).unwrap();
        let back = classifier_from_archive(&WeightArchive::load(&stem).unwrap()).unwrap();
        for ((n1, a), (n2, b)) in f.named_state().iter().zip(back.named_state()) {
            prop_assert_eq!(n1, &n2);
            prop_assert_eq!(bits(a), bits(b));
        }
        let mut pce = Pce::new(&f, &PceConfig { latent: 3, hidden: 5, fusion, ..PceConfig::default() }, &mut rng);
        pce.path_mean = Array::scalar(rng.uniform());
        let stem = dir.path().join("pce");
        pce_archive(&pce).save(&stem).unwrap();
        let back = pce_from_archive(&WeightArchive::load(&stem).unwrap()).unwrap();
        for ((n1, a), (n2, b)) in pce.named_state().iter().zip(back.named_state()) {
            prop_assert_eq!(n1, &n2);
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}
