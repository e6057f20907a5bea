use chronolens::dates::{BinIndex, DateParser, TemporalBinning};
use chronolens::ingest::{
    label_samples, load_features, read_manifest, read_pnm_file, save_features, write_pnm_file,
};
use chronolens::linear::{predict_class, train_svm, TrainConfig};
use chronolens::net::{default_architecture, MicroNet, Shape};
use chronolens::persist::{load_model, save_model, Model};
use chronolens::synthetic::{planted_dataset, PlantedConfig};

#[test]
fn manifest_to_saved_svm() {
    let text = r#"{"id":"a","date_text":"worn in the 1920s"}
{"id":"b","title":"party dress","tags":"1965"}
{"id":"c","year":1921}
{"id":"d","description":"sixties","tags":"'60s"}
{"id":"e","date_text":"undated"}
"#;
    let mut samples = read_manifest(text.as_bytes()).unwrap();
    let binning = TemporalBinning::default();
    let failures = label_samples(&mut samples, &DateParser::default(), &binning);
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].0, 4);
    let bins: Vec<usize> = samples[..4]
        .iter()
        .map(|s| s.label_bin.unwrap().0)
        .collect();
    assert_eq!(bins, [2, 6, 2, 6]);

    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        vec![-1.0, 0.2],
        vec![1.0, 0.1],
        vec![-0.8, -0.3],
        vec![1.2, 0.0],
    ];
    let path = dir.path().join("f.bin");
    save_features(
        &path,
        &chronolens::ingest::FeatureMatrix::from_rows(&rows).unwrap(),
    )
    .unwrap();
    let x = load_features(&path, Some(4), Some(2)).unwrap();
    let labels: Vec<BinIndex> = samples[..4].iter().map(|s| s.label_bin.unwrap()).collect();
    let m = train_svm(&x, &labels, &binning, &TrainConfig::default()).unwrap();
    let model_path = dir.path().join("svm.bin");
    save_model(&model_path, &Model::Svm(m.clone())).unwrap();
    let back = load_model(&model_path).unwrap().into_svm().unwrap();
    assert_eq!(back, m);
    for (row, label) in x.rows().zip(&labels) {
        assert_eq!(predict_class(&back, row).unwrap(), *label);
    }
    assert!(load_features(&path, Some(5), None).is_err());
}

#[test]
fn images_and_nets_survive_disk() {
    let cfg = PlantedConfig {
        n_samples: 4,
        seed: 3,
        ..Default::default()
    };
    let data = planted_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let shape = Shape::new(1, 20, 20);
    let net = MicroNet::init(shape, &default_architecture(shape, 11), 1).unwrap();
    let path = dir.path().join("net.bin");
    save_model(&path, &Model::Net(net.clone())).unwrap();
    let back = load_model(&path).unwrap().into_net().unwrap();
    for (i, s) in data.iter().enumerate() {
        let p = dir.path().join(format!("{i}.pgm"));
        write_pnm_file(&p, &s.image).unwrap();
        let img = read_pnm_file(&p).unwrap();
        // 8-bit samples keep the image to within half a quantisation step
        for (a, b) in img.values().iter().zip(s.image.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(
            net.forward(std::slice::from_ref(&img)).unwrap(),
            back.forward(&[img]).unwrap()
        );
    }
}
