use std::collections::HashSet;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::{palette, CELL_SIZE, GRANULARITY, NC_RATIO};
use super::*;
use crate::model::{AttributeSchema, Normalization};
use crate::Error;

fn coded_image(h: usize, w: usize) -> Image {
    let data = (0..3 * h * w).map(|i| (i % (h * w)) as u8).collect();
    Image::new(h, w, data).unwrap()
}

fn write_tiny_dataset(root: &Path, classes: usize, per_class: usize) {
    for k in 0..classes {
        let dir = root.join(format!("class{k}"));
        fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let img = Image::new(4, 4, vec![(k * 10 + i) as u8; 48]).unwrap();
            img.write_png(&dir.join(format!("img{i:02}.png"))).unwrap();
        }
    }
}

fn tiny_manifest(counts: &[usize]) -> DatasetManifest {
    let records = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| {
            (0..n).map(move |i| Record {
                file: format!("/nowhere/c{k}/{i:03}.png").into(),
                name: format!("c{k}/{i:03}.png"),
                class: k,
                attributes: None,
                provenance: Provenance::True,
                source: "mem".into(),
            })
        })
        .collect();
    DatasetManifest {
        root: "/nowhere".into(),
        classes: (0..counts.len()).map(|k| format!("c{k}")).collect(),
        schema: AttributeSchema::default(),
        source: "mem".into(),
        records,
    }
}

fn names(m: &DatasetManifest) -> Vec<String> {
    m.records.iter().map(|r| r.name.clone()).collect()
}

#[test]
fn full_size_crop_is_identity() {
    let img = coded_image(5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in [CropMode::Random, CropMode::Center] {
        assert_eq!(crop(&img, mode, 5, &mut rng).unwrap(), img);
    }
}

#[test]
fn center_crop_takes_middle_window() {
    let img = coded_image(4, 4);
    let out = crop(&img, CropMode::Center, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for c in 0..3 {
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(c, y, x), img.get(c, y + 1, x + 1));
            }
        }
    }
}

#[test]
fn random_crop_covers_every_offset() {
    let img = coded_image(6, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let out = crop(&img, CropMode::Random, 3, &mut rng).unwrap();
        let code = out.get(0, 0, 0) as usize;
        seen.insert((code / 7, code % 7));
    }
    assert_eq!(seen.len(), 4 * 5);
    assert!(seen.iter().all(|&(y, x)| y <= 3 && x <= 4));
}

#[test]
fn oversized_crop_is_rejected() {
    let img = coded_image(4, 4);
    assert!(crop(&img, CropMode::Center, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn apportion_examples() {
    assert_eq!(apportion(10, &[0.6, 0.2, 0.2]), [6, 2, 2]);
    assert_eq!(apportion(500, &[0.6, 0.2, 0.2]), [300, 100, 100]);
    assert_eq!(apportion(7, &[0.6, 0.2, 0.2]), [4, 2, 1]);
    assert_eq!(apportion(3, &[0.6, 0.2, 0.2]), [2, 1, 0]);
}

#[test]
fn split_of_fifty_is_thirty_ten_ten() {
    let m = tiny_manifest(&[10; 5]);
    let s = split_622(&m, &SplitSpec::with_seed(1)).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (30, 10, 10));
    for part in [&s.train, &s.val, &s.test] {
        let counts = part.class_counts();
        assert!(counts.iter().all(|&c| c == counts[0]));
    }
}

#[test]
fn split_is_deterministic_and_seed_dependent() {
    let m = tiny_manifest(&[12, 9, 20]);
    let a = split_622(&m, &SplitSpec::with_seed(5)).unwrap();
    let b = split_622(&m, &SplitSpec::with_seed(5)).unwrap();
    let c = split_622(&m, &SplitSpec::with_seed(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(names(&a.train), names(&c.train));
}

#[test]
fn split_rejects_tiny_classes_and_bad_ratios() {
    let m = tiny_manifest(&[10, 2]);
    assert!(matches!(split_622(&m, &SplitSpec::with_seed(0)), Err(Error::Data(_))));
    let unstratified = SplitSpec {
        stratified: false,
        ..SplitSpec::with_seed(0)
    };
    assert_eq!(split_622(&m, &unstratified).unwrap().train.len(), 7);
    let bad = SplitSpec {
        ratios: [0.5, 0.3, 0.3],
        ..SplitSpec::default()
    };
    assert!(split_622(&m, &bad).is_err());
}

proptest! {
    #[test]
    fn apportion_is_within_one_of_exact(n in 0usize..1000, a in 1u32..100, b in 1u32..100, c in 1u32..100) {
        let total = (a + b + c) as f64;
        let ratios = [a as f64 / total, b as f64 / total, c as f64 / total];
        let counts = apportion(n, &ratios);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (k, r) in counts.iter().zip(ratios) {
            prop_assert!((*k as f64 - r * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn splits_partition_the_manifest(
        counts in prop::collection::vec(3usize..40, 1..6),
        seed in any::<u64>(),
        stratified in any::<bool>(),
    ) {
        let m = tiny_manifest(&counts);
        let spec = SplitSpec { seed, stratified, ..SplitSpec::default() };
        let s = split_622(&m, &spec).unwrap();
        let parts = [names(&s.train), names(&s.val), names(&s.test)];
        let mut all: Vec<String> = parts.concat();
        prop_assert_eq!(all.len(), m.len());
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), m.len());
        if stratified {
            for (k, &n) in counts.iter().enumerate() {
                for (part, r) in [&s.train, &s.val, &s.test].iter().zip(spec.ratios) {
                    let got = part.class_counts()[k] as f64;
                    prop_assert!((got - r * n as f64).abs() < 1.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn split_ignores_record_order(counts in prop::collection::vec(3usize..20, 1..5), seed in any::<u64>()) {
        let m = tiny_manifest(&counts);
        let mut shuffled = m.clone();
        shuffled.records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let spec = SplitSpec::with_seed(seed);
        prop_assert_eq!(split_622(&m, &spec).unwrap(), split_622(&shuffled, &spec).unwrap());
    }
}

#[test]
fn load_counts_every_image() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 5, 10);
    let m = load_dataset(dir.path(), &AttributeSchema::default()).unwrap();
    assert_eq!(m.len(), 50);
    assert_eq!(m.classes, (0..5).map(|k| format!("class{k}")).collect::<Vec<_>>());
    assert_eq!(m.class_counts(), vec![10; 5]);
    assert_eq!(m.labeled(), 0);
    assert_eq!(m.records[11].name, "class1/img01.png");
    let images = m.load_images().unwrap();
    assert_eq!(images[11].get(2, 3, 3), 11);
}

#[test]
fn empty_attribute_csv_leaves_records_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 2, 3);
    fs::write(dir.path().join(ATTRIBUTES_FILE), "").unwrap();
    assert_eq!(load_dataset(dir.path(), &AttributeSchema::default()).unwrap().labeled(), 0);
}

fn header() -> String {
    let mut h = vec!["filename".to_string()];
    h.extend(AttributeSchema::default().names().iter().map(|s| s.to_string()));
    h.join(",")
}

const ROW: &str = "big,round,irregular,low,loosely,yes,frosted,blue,small,pink,yes";

#[test]
fn attribute_csv_joins_by_relative_path() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 2, 3);
    fs::write(dir.path().join(ATTRIBUTES_FILE), format!("{}\nclass1/img02.png,{ROW}\n", header())).unwrap();
    let m = load_dataset(dir.path(), &AttributeSchema::default()).unwrap();
    assert_eq!(m.labeled(), 1);
    assert_eq!(m.records[5].attributes, Some(vec![0, 0, 4, 1, 1, 0, 1, 1, 1, 1, 0]));
}

#[test]
fn csv_row_for_missing_file_names_it() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 2, 3);
    fs::write(dir.path().join(ATTRIBUTES_FILE), format!("{}\nclass1/ghost.png,{ROW}\n", header())).unwrap();
    let err = load_dataset(dir.path(), &AttributeSchema::default()).unwrap_err();
    assert!(err.to_string().contains("class1/ghost.png"), "{err}");
}

#[test]
fn csv_header_and_categories_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 1, 3);
    let schema = AttributeSchema::default();
    let csv = dir.path().join(ATTRIBUTES_FILE);
    fs::write(&csv, format!("filename,cell_size\nclass0/img00.png,big\n")).unwrap();
    assert!(matches!(load_dataset(dir.path(), &schema), Err(Error::Schema(_))));
    let bad = ROW.replace("pink", "green");
    fs::write(&csv, format!("{}\nclass0/img00.png,{bad}\n", header())).unwrap();
    let err = load_dataset(dir.path(), &schema).unwrap_err();
    assert!(err.to_string().contains("green"), "{err}");
}

#[test]
fn missing_root_and_unreadable_images_error() {
    let schema = AttributeSchema::default();
    assert!(load_dataset(Path::new("/definitely/not/here"), &schema).is_err());
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 1, 2);
    fs::write(dir.path().join("class0/broken.png"), b"not an image").unwrap();
    let err = load_dataset(dir.path(), &schema).unwrap_err();
    assert!(matches!(err, Error::Image { .. }), "{err}");
}

#[test]
fn pseudo_labels_never_overwrite_true_labels() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_dataset(dir.path(), 1, 3);
    fs::write(dir.path().join(ATTRIBUTES_FILE), format!("{}\nclass0/img00.png,{ROW}\n", header())).unwrap();
    let schema = AttributeSchema::default();
    let mut m = load_dataset(dir.path(), &schema).unwrap();
    let truth = m.records[0].attributes.clone();
    let pseudo: Vec<Record> = m
        .records
        .iter()
        .map(|r| Record {
            attributes: Some(vec![1; 11]),
            provenance: Provenance::Pseudo,
            ..r.clone()
        })
        .collect();
    let out = tempfile::tempdir().unwrap();
    let path = out.path().join(PSEUDO_FILE);
    write_attribute_csv(&path, &schema, &pseudo, true).unwrap();
    assert_eq!(m.apply_attribute_csv(&path).unwrap(), 2);
    assert_eq!(m.records[0].attributes, truth);
    assert_eq!(m.records[0].provenance, Provenance::True);
    assert_eq!(m.records[1].provenance, Provenance::Pseudo);
    assert_eq!(m.records[2].attributes, Some(vec![1; 11]));
}

#[test]
fn attribute_csv_round_trips() {
    let schema = AttributeSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records: Vec<Record> = (0..20)
        .map(|i| {
            let labels = schema.sizes().iter().map(|&p| rand::Rng::gen_range(&mut rng, 0..p)).collect();
            Record {
                file: "x".into(),
                name: format!("k/{i}.png"),
                class: 0,
                attributes: Some(labels),
                provenance: if i % 2 == 0 { Provenance::True } else { Provenance::Pseudo },
                source: String::new(),
            }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.csv");
    write_attribute_csv(&path, &schema, &records, true).unwrap();
    let rows = read_attribute_csv(&path, &schema).unwrap();
    assert_eq!(rows.len(), 20);
    for (row, rec) in rows.iter().zip(&records) {
        assert_eq!(row.name, rec.name);
        assert_eq!(Some(&row.labels), rec.attributes.as_ref());
        assert_eq!(row.provenance, rec.provenance);
    }
}

#[test]
fn channel_stats_match_direct_computation() {
    let a = Image::new(1, 2, vec![0, 255, 51, 51, 10, 20]).unwrap();
    let b = Image::new(1, 2, vec![255, 255, 102, 0, 30, 40]).unwrap();
    let n = channel_stats(&[a.clone(), b.clone()]).unwrap();
    let values = |c: usize| -> Vec<f64> {
        [&a, &b]
            .iter()
            .flat_map(|img| (0..2).map(move |x| img.get(c, 0, x) as f64 / 255.0))
            .collect()
    };
    for c in 0..3 {
        let v = values(c);
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((n.mean[c] as f64 - mean).abs() < 1e-6);
        assert!((n.std[c] as f64 - var.sqrt()).abs() < 1e-6);
    }
}

#[test]
fn batch_tensor_standardizes_center_crops() {
    let img = coded_image(4, 4);
    let norm = Normalization {
        mean: vec![0.5; 3],
        std: vec![2.0; 3],
    };
    let t = batch_tensor(&[&img, &img], CropMode::Center, 2, &norm, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(t.shape(), &[2, 3, 2, 2]);
    let expect = (img.get(1, 2, 1) as f32 / 255.0 - 0.5) / 2.0;
    assert_eq!(t.data()[12 + 4 + 2], expect);
}

fn small_config(per_class: usize, seed: u64, domain: Domain) -> SynthConfig {
    SynthConfig {
        per_class,
        seed,
        domain,
        ..SynthConfig::default()
    }
}

#[test]
fn synth_is_deterministic_and_round_trips() {
    let cfg = small_config(4, 11, Domain::A);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = synth_generate(&cfg, a.path()).unwrap();
    let mb = synth_generate(&cfg, b.path()).unwrap();
    assert_eq!(ma.len(), 20);
    assert_eq!(ma.labeled(), 20);
    assert_eq!(ma.classes, DEFAULT_CLASSES.map(String::from).to_vec());
    for (ra, rb) in ma.records.iter().zip(&mb.records) {
        assert_eq!(ra.name, rb.name);
        assert_eq!(ra.attributes, rb.attributes);
        assert_eq!(fs::read(&ra.file).unwrap(), fs::read(&rb.file).unwrap());
    }
    for f in [ATTRIBUTES_FILE, SCHEMA_FILE, synth::SYNTH_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let (_, plan) = synth_plan(&cfg).unwrap();
    let images = ma.load_images().unwrap();
    for ((rec, img), sample) in ma.records.iter().zip(&images).zip(&plan) {
        assert_eq!(rec.name, sample.name);
        assert_eq!(rec.attributes.as_ref(), Some(&sample.params.attributes));
        assert_eq!(img, &render(&sample.params));
    }
    assert!(synth_generate(&cfg, a.path()).is_err());
}

#[test]
fn synth_labels_keep_granule_attributes_coherent() {
    let cfg = SynthConfig {
        noise: 1.0,
        ..small_config(200, 2, Domain::A)
    };
    let (_, plan) = synth_plan(&cfg).unwrap();
    let recipes = cfg.resolve(&AttributeSchema::default()).unwrap();
    let mut off_recipe = 0;
    for s in &plan {
        assert!(synth::granules_consistent(&s.params.attributes), "{:?}", s.params.attributes);
        off_recipe += (s.params.attributes != recipes[s.class].1) as usize;
    }
    assert_eq!(off_recipe, plan.len());
}

#[test]
fn synth_noise_rate_is_near_requested() {
    let cfg = small_config(400, 5, Domain::A);
    let (_, plan) = synth_plan(&cfg).unwrap();
    let recipes = cfg.resolve(&AttributeSchema::default()).unwrap();
    let off = plan.iter().filter(|s| s.params.attributes != recipes[s.class].1).count();
    let rate = off as f64 / plan.len() as f64;
    assert!((0.03..0.07).contains(&rate), "{rate}");
}

#[test]
fn synth_rejects_bad_recipes() {
    let mut cfg = SynthConfig::default();
    cfg.recipes[0].attributes[10] = "no".into();
    assert!(synth_plan(&cfg).is_err());
    let mut cfg = SynthConfig::default();
    cfg.recipes[0].attributes.pop();
    assert!(synth_plan(&cfg).is_err());
    let mut cfg = SynthConfig::default();
    cfg.recipes[1].class = cfg.recipes[0].class.clone();
    assert!(synth_plan(&cfg).is_err());
}

/// Independent measurement: classify each pixel by its nearest palette colour.
struct Measurement {
    radius: f64,
    granule_pixels: usize,
    nc_ratio: f64,
}

fn measure(img: &Image, domain: Domain) -> Measurement {
    let style = domain.style();
    let tint = |c: [f64; 3]| [c[0] * style.gain[0], c[1] * style.gain[1], c[2] * style.gain[2]];
    // 0 background, 1 cytoplasm or vacuole, 2 nucleus, 3 granule
    let mut refs = vec![(tint(style.background), 0)];
    refs.extend(palette::CYTOPLASM.iter().map(|&c| (tint(c), 1)));
    refs.push((tint(palette::VACUOLE), 1));
    refs.push((tint(palette::NUCLEUS_DENSE), 2));
    refs.push((tint(palette::NUCLEUS_LOOSE), 2));
    refs.extend(palette::GRANULE[1..].iter().map(|&c| (tint(c), 3)));
    let mut counts = [0usize; 4];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p: Vec<f64> = (0..3).map(|c| img.get(c, y, x) as f64 / 255.0).collect();
            let (_, kind) = refs
                .iter()
                .map(|(r, k)| ((0..3).map(|c| (p[c] - r[c]).powi(2)).sum::<f64>(), *k))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            counts[kind] += 1;
        }
    }
    let cell = (counts[1] + counts[2] + counts[3]) as f64;
    Measurement {
        radius: (cell / std::f64::consts::PI).sqrt(),
        granule_pixels: counts[3],
        nc_ratio: counts[2] as f64 / cell,
    }
}

fn oracle_agreement(cfg: &SynthConfig) -> f64 {
    let (_, plan) = synth_plan(cfg).unwrap();
    let size = cfg.image_size as f64;
    let agree = plan
        .iter()
        .filter(|s| {
            let m = measure(&render(&s.params), cfg.domain);
            let a = &s.params.attributes;
            let big = m.radius > 0.30 * size;
            let granular = m.granule_pixels >= 8;
            let high = m.nc_ratio > 0.36;
            big == (a[CELL_SIZE] == 0) && granular == (a[GRANULARITY] == 0) && high == (a[NC_RATIO] == 0)
        })
        .count();
    agree as f64 / plan.len() as f64
}

#[test]
fn pixel_statistics_recover_labels() {
    for domain in [Domain::A, Domain::B] {
        let rate = oracle_agreement(&small_config(100, 7, domain));
        assert!(rate >= 0.99, "{domain:?}: {rate}");
        let noisy = SynthConfig {
            noise: 1.0,
            ..small_config(60, 8, domain)
        };
        let rate = oracle_agreement(&noisy);
        assert!(rate >= 0.99, "{domain:?} off-recipe: {rate}");
    }
}
