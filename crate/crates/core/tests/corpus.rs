use proptest::prelude::*;
use unlearn_core::synthdata::{
    build_corpus, load_corpus, render_identity, sample_identity, save_corpus, CorpusSize, Regime, Split,
    VariationParams, DEFAULT_RESOLUTION,
};
use unlearn_core::rng::substream;

fn pixels(img: &unlearn_core::nets::Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn train_identities_are_separable_by_nearest_centroid() {
    let corpus = build_corpus(CorpusSize::default(), 0).unwrap();
    let train = corpus.indices(Split::Train);
    assert_eq!(train.len(), 200);
    let centroids: Vec<Vec<f64>> = train
        .iter()
        .map(|&i| pixels(&render_identity(&corpus.identities[i].spec, &VariationParams::ZERO, DEFAULT_RESOLUTION)))
        .collect();
    let nearest = |x: &[f64]| {
        (0..centroids.len())
            .min_by(|&a, &b| sq_dist(x, &centroids[a]).total_cmp(&sq_dist(x, &centroids[b])))
            .unwrap()
    };
    let (mut hits, mut total) = (0usize, 0usize);
    for (k, &i) in train.iter().enumerate() {
        for img in corpus.render_all(i, DEFAULT_RESOLUTION) {
            hits += usize::from(nearest(&pixels(&img)) == k);
            total += 1;
        }
    }
    let acc = hits as f64 / total as f64;
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
}

#[test]
fn corpus_is_deterministic_and_round_trips() {
    let size = CorpusSize {
        n_train: 6,
        n_heldout_ind: 2,
        n_heldout_ood: 3,
        images_per_identity: 4,
    };
    let a = build_corpus(size, 17).unwrap();
    assert_eq!(a, build_corpus(size, 17).unwrap());
    assert_ne!(a, build_corpus(size, 18).unwrap());
    a.validate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/corpus.json");
    save_corpus(&a, &path).unwrap();
    let b = load_corpus(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.render(3, 2, 16), b.render(3, 2, 16));
    assert_eq!(b.indices(Split::HeldoutOod), vec![8, 9, 10]);
}

#[test]
fn malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.json");
    std::fs::write(&path, "{\"version\": 1, \"generation_seed\": 0}").unwrap();
    assert!(load_corpus(&path).is_err());
    assert!(load_corpus(&dir.path().join("absent.json")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampled_parameters_stay_in_their_ranges(seed in any::<u64>(), ood in any::<bool>()) {
        let regime = if ood { Regime::OutOfDomain } else { Regime::InDomain };
        let mut rng = substream(seed, "prop", 0);
        let spec = sample_identity(&mut rng, regime, "x");
        prop_assert!(spec.validate(regime).is_ok());
        prop_assert!(VariationParams::sample(&mut rng).in_range());
    }

    #[test]
    fn renders_stay_in_the_unit_range(seed in any::<u64>(), res in 8usize..24) {
        let mut rng = substream(seed, "render", 0);
        let spec = sample_identity(&mut rng, Regime::OutOfDomain, "x");
        let var = VariationParams::sample(&mut rng);
        let img = render_identity(&spec, &var, res);
        prop_assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(img, render_identity(&spec, &var, res));
    }
}
