use std::collections::BTreeSet;

use forge_core::captioner::{generate_caption, CaptionerBackend};
use forge_core::cfgen;
use forge_core::dataset;
use forge_core::evalkit::{rank_gallery, rank_of, recall_at_k};
use forge_core::perturber::{perturb_caption_excluding, validate_edit, PerturberBackend};
use forge_core::toycir::{ToyCirModel, TrainItem};
use forge_core::toyworld::{all_scenes, edit_region, render, write_scene_files, RASTER_SIZE};
use forge_core::{
    compute_stats, ComponentKind, DatasetManifest, EmbeddingVector, ImageRecord, Provenance, SceneMeta, Source, Split,
    Triplet, Vocabulary,
};
use proptest::prelude::*;
use proptest::sample::{select, subsequence};

fn split() -> impl Strategy<Value = Split> {
    select(vec![Split::Train, Split::Val, Split::Test])
}

fn manifest() -> impl Strategy<Value = DatasetManifest> {
    (1usize..30)
        .prop_flat_map(|n| {
            let images = proptest::collection::vec((split(), any::<bool>()), n);
            let triplets = proptest::collection::vec((0..n, 0..n, "[a-z ]{1,20}", any::<bool>()), 0..40);
            (images, triplets)
        })
        .prop_map(|(images, triplets)| {
            let mut m = DatasetManifest::new("prop", "media");
            m.images = images
                .into_iter()
                .enumerate()
                .map(|(i, (split, synthetic))| ImageRecord {
                    image_id: format!("img-{i}"),
                    uri: format!("img-{i}.png"),
                    split,
                    source: if synthetic { Source::Synthetic } else { Source::Original },
                    sidecar: synthetic.then(|| format!("img-{i}.json")),
                })
                .collect();
            m.triplets = triplets
                .into_iter()
                .enumerate()
                .map(|(i, (a, b, text, synthetic))| {
                    let mut t = Triplet::manual(format!("t-{i}"), format!("img-{a}"), text, format!("img-{b}"));
                    if synthetic {
                        t.provenance = Provenance::Synthetic;
                        t.generation_seed = Some(i as u64);
                    }
                    t
                })
                .collect();
            m
        })
}

fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, dim).prop_filter_map("nonzero", |v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 1e-3).then(|| v.into_iter().map(|x| x / n).collect())
    })
}

fn scene() -> impl Strategy<Value = SceneMeta> {
    select(all_scenes(Vocabulary::builtin()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_json_round_trip(m in manifest()) {
        let back: DatasetManifest = serde_json::from_str(&m.to_json()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn stats_ignore_record_order(m in manifest(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = m.clone();
        shuffled.images.shuffle(&mut rng);
        shuffled.triplets.shuffle(&mut rng);
        let a = compute_stats(&m).unwrap();
        prop_assert_eq!(a, compute_stats(&shuffled).unwrap());
        prop_assert_eq!(a.images, a.train_images + a.val_images + a.test_images);
        prop_assert_eq!(a.triplets, a.train_triplets + a.val_triplets + a.test_triplets + a.synthetic_triplets);
    }

    #[test]
    fn merge_is_idempotent(m in manifest()) {
        prop_assert_eq!(dataset::merge(&m, &m).unwrap(), m);
    }

    #[test]
    fn subsamples_are_nested_prefixes(m in manifest(), seed in any::<u64>(), f1 in 0.01f64..=1.0, f2 in 0.01f64..=1.0) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let order = dataset::subsample_order(&m, seed);
        let ids = |f: f64| -> BTreeSet<String> {
            dataset::subsample_images(&m, f, seed).unwrap().images_in(Split::Train).map(|r| r.image_id.clone()).collect()
        };
        let (small, large) = (ids(lo), ids(hi));
        prop_assert!(small.is_subset(&large));
        prop_assert_eq!(small.len(), dataset::kept_count(order.len(), lo));
        let prefix: BTreeSet<String> = order[..small.len()].iter().cloned().collect();
        prop_assert_eq!(small, prefix);
        let sub = dataset::subsample_images(&m, lo, seed).unwrap();
        prop_assert_eq!(sub.images_in(Split::Test).count(), m.images_in(Split::Test).count());
        prop_assert!(forge_core::validate_manifest(&sub).iter().all(|v| v.code != forge_core::ViolationCode::DanglingReference));
    }

    #[test]
    fn recall_is_monotone_in_k(positions in proptest::collection::vec(1usize..80, 1..60), ks in subsequence(vec![1usize, 2, 5, 10, 20, 50, 100], 1..7)) {
        let r = recall_at_k(&positions, &ks).unwrap();
        let values: Vec<f64> = ks.iter().map(|&k| r.recall(k).unwrap()).collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(values.iter().all(|v| (0.0..=100.0).contains(v)));
        prop_assert_eq!(r.num_queries, positions.len());
    }

    #[test]
    fn ranking_matches_rank_of(dim in 1usize..8, seed_vectors in proptest::collection::vec(proptest::collection::vec(-4i32..4, 8), 1..30), q in proptest::collection::vec(-4i32..4, 8), exclude in any::<bool>()) {
        // Small integer coordinates make exact ties common.
        let gallery: Vec<(String, EmbeddingVector)> = seed_vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("{:02}", (i * 7) % 31), EmbeddingVector::new(v[..dim].iter().map(|&x| x as f64).collect()).unwrap()))
            .collect();
        let mut ids: Vec<&String> = gallery.iter().map(|(id, _)| id).collect();
        ids.sort();
        ids.dedup();
        prop_assume!(ids.len() == gallery.len());
        let query = EmbeddingVector::new(q[..dim].iter().map(|&x| x as f64).collect()).unwrap();
        let excluded = exclude.then(|| gallery[0].0.clone());
        let ranking = rank_gallery(&query, &gallery, excluded.as_deref()).unwrap();
        prop_assert_eq!(ranking.len(), gallery.len() - usize::from(exclude));
        for (id, _) in &gallery {
            let expected = ranking.iter().position(|r| r == id).map(|p| p + 1);
            prop_assert_eq!(rank_of(&query, &gallery, excluded.as_deref(), id).unwrap(), expected);
        }
        let scores: Vec<f64> = ranking
            .iter()
            .map(|id| query.cosine(&gallery.iter().find(|(g, _)| g == id).unwrap().1))
            .collect();
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        // Scaling the query by a power of two changes nothing.
        let doubled = EmbeddingVector::new(query.values().iter().map(|x| x * 2.0).collect()).unwrap();
        prop_assert_eq!(rank_gallery(&doubled, &gallery, excluded.as_deref()).unwrap(), ranking);
    }

    #[test]
    fn loss_ignores_batch_order(items in proptest::collection::vec((unit(6), unit(6), unit(6)), 1..8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let batch: Vec<TrainItem> = items
            .into_iter()
            .map(|(reference, text, target)| TrainItem { reference, text, target })
            .collect();
        let model = ToyCirModel::random(6, 1, seed, 0.2);
        let (loss, _) = model.batch_loss(&batch, 0.1, false);
        let mut shuffled = batch.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (again, _) = model.batch_loss(&shuffled, 0.1, false);
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!((loss - again).abs() <= 1e-12 * loss.abs().max(1.0), "{} vs {}", loss, again);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), dim in 1usize..10) {
        let model = ToyCirModel::random(dim, seed ^ 5, seed, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        prop_assert_eq!(ToyCirModel::load(&path).unwrap(), model);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rule_based_edits_are_valid_and_local(scene in scene(), kind in select(ComponentKind::ALL.to_vec()), seed in any::<u64>()) {
        prop_assume!(scene.value(kind).is_some());
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::builtin();
        let (uri, sidecar) = write_scene_files(dir.path(), "orig", "x", &scene, vocab).unwrap();
        let record = ImageRecord { image_id: "x".into(), uri, split: Split::Train, source: Source::Original, sidecar: Some(sidecar) };
        let caption = generate_caption(&record, dir.path(), &CaptionerBackend::toy()).unwrap();
        let edit = perturb_caption_excluding(&caption, kind, seed, &PerturberBackend::rule_based(), &BTreeSet::new()).unwrap();
        prop_assert!(validate_edit(&edit).is_empty(), "{:?}", validate_edit(&edit));
        prop_assert_eq!(edit.kind, kind);
        let after = cfgen::edited_scene(&scene, &edit).unwrap();
        prop_assert_eq!(after.differences(&scene), vec![kind]);
        let (before_px, after_px) = (render(&scene, vocab), render(&after, vocab));
        for y in 0..RASTER_SIZE {
            for x in 0..RASTER_SIZE {
                if !edit_region(&scene, &after, kind, x, y) {
                    prop_assert_eq!(before_px.get_pixel(x, y), after_px.get_pixel(x, y));
                }
            }
        }
    }
}
