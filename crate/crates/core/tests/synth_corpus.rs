use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sparsegan::synth::{
    build_corpus, corpus_sample, generate_normal, inject_lesion, load_corpus, sample_seed, CorpusSpec, Label,
    Split, MANIFEST,
};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn row_profiles_are_smooth() {
    let spec = CorpusSpec::default();
    let s = spec.side;
    let mut total = 0.0;
    for i in 0..100 {
        let img = generate_normal(sample_seed(99, Split::Train, i), &spec);
        let profile: Vec<f64> = img
            .image
            .chunks(s)
            .map(|row| row.iter().map(|&v| f64::from(v)).sum::<f64>() / s as f64)
            .collect();
        total += pearson(&profile[..s - 1], &profile[1..]);
    }
    let mean = total / 100.0;
    assert!(mean > 0.9, "adjacent-row correlation {mean}");
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn default_corpus_layout_and_determinism() {
    let spec = CorpusSpec::default();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let entries = build_corpus(&spec, &a).unwrap();
    build_corpus(&spec, &b).unwrap();

    let images = entries.len();
    assert_eq!(images, 800);
    let masks = entries.iter().filter(|e| e.mask.is_some()).count();
    assert_eq!(masks, 150);
    let tree = read_tree(&a);
    assert_eq!(tree.len(), images + masks + 1);
    assert!(tree.contains_key(MANIFEST));
    assert_eq!(tree, read_tree(&b), "two builds differ");

    let manifest = String::from_utf8(tree[MANIFEST].clone()).unwrap();
    let count = |split: &str, label: &str| {
        manifest
            .lines()
            .filter(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                f[1] == split && f[2] == label
            })
            .count()
    };
    assert_eq!(count("train", "normal"), 500);
    assert_eq!(count("train", "anomalous"), 0);
    assert_eq!((count("val", "normal"), count("val", "anomalous")), (50, 50));
    assert_eq!((count("test", "normal"), count("test", "anomalous")), (100, 100));

    let corpus = load_corpus(&a, 64).unwrap();
    assert_eq!(corpus.train.len() + corpus.val.len() + corpus.test.len(), 800);
    assert!(build_corpus(&spec, &a).is_err(), "non-empty target accepted");
}

#[test]
fn splits_do_not_share_seeds() {
    let spec = CorpusSpec::default();
    let mut seen = std::collections::HashSet::new();
    for split in Split::ALL {
        let (n, a) = spec.counts(split);
        for i in 0..n + a {
            assert!(seen.insert(sample_seed(spec.master_seed, split, i)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lesions_are_local_bounded_and_visible(seed in any::<u64>()) {
        let spec = CorpusSpec::default();
        let normal = generate_normal(seed, &spec);
        let sick = inject_lesion(&normal, seed ^ 1, &spec).unwrap();
        prop_assert_eq!(sick.label, Label::Anomalous);
        let mask = sick.mask.as_ref().unwrap();
        let (lo, hi) = spec.mask_area_bounds();
        let area = mask.iter().filter(|&&m| m).count();
        prop_assert!((lo..=hi).contains(&area), "area {area} outside {lo}..={hi}");
        let mut inside = 0.0;
        for ((&m, &a), &b) in mask.iter().zip(&sick.image).zip(&normal.image) {
            if m {
                inside += f64::from((a - b).abs());
            } else {
                prop_assert_eq!(a, b);
            }
        }
        // Images live in [-1, 1]; the delta is in unit-range intensity.
        prop_assert!(inside / area as f64 / 2.0 >= spec.intensity_delta / 2.0);
        prop_assert!(sick.image.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn samples_are_pure_functions_of_their_coordinates(i in 0usize..100) {
        let spec = CorpusSpec::default();
        let a = corpus_sample(&spec, Split::Test, i).unwrap();
        let b = corpus_sample(&spec, Split::Test, i).unwrap();
        prop_assert_eq!(a, b);
    }
}
