use std::fs;

use plab::harness::{run_experiment, ExperimentConfig};
use plab::models::{init_params, load_checkpoint, save_checkpoint, MlpSpec, ModelError};
use plab::tasks::{encode_idx, load_idx, synth_dataset, DataError};

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.hidden = vec![8, 8];
    c.data.n_train = 96;
    c.data.n_test = 32;
    c.data.dim = 6;
    c.data.classes = 3;
    c.data.batch = 16;
    c.stream.tasks = 3;
    c.stream.epochs = 2;
    c.eval.diversity_batch = 8;
    c.eval.probe = 16;
    c
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    for ln in [false, true] {
        let spec = MlpSpec::new(7, &[5, 3], 4).with_layer_norm(ln);
        let mut p = init_params(&spec, 3).unwrap();
        // move off the init so γ and β are not trivially 1 and 0
        for id in p.param_ids() {
            let m = p.param_mut(id).unwrap();
            for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
                *v += 0.01 * i as f64 - 1.0 / 3.0;
            }
        }
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(q.spec(), p.spec());
        assert_eq!(q.param_ids(), p.param_ids());
        for id in p.param_ids() {
            let a: Vec<u64> = p.param(id).unwrap().as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.param(id).unwrap().as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{id:?}");
        }
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::BadMagic(_))));
    let p = init_params(&MlpSpec::new(3, &[2], 2), 0).unwrap();
    save_checkpoint(&p, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Truncated)));
    assert!(load_checkpoint(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn idx_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    // hand-crafted: one 2×2 image, bytes (0, 255, 0, 255), label 1
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend([0, 255, 0, 255]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 1, 1];
    fs::write(dir.path().join("img"), &images).unwrap();
    fs::write(dir.path().join("lab"), &labels).unwrap();
    let d = load_idx(&dir.path().join("img"), &dir.path().join("lab")).unwrap();
    assert_eq!(d.inputs.as_slice(), &[0.0, 1.0, 0.0, 1.0]);
    assert_eq!(d.labels, vec![1]);

    let mut bad = images.clone();
    bad[3] = 4;
    fs::write(dir.path().join("bad"), &bad).unwrap();
    assert!(matches!(
        load_idx(&dir.path().join("bad"), &dir.path().join("lab")),
        Err(DataError::BadMagic { .. })
    ));
    let three = vec![0, 0, 8, 1, 0, 0, 0, 3, 1, 0, 1];
    fs::write(dir.path().join("lab3"), &three).unwrap();
    assert!(matches!(
        load_idx(&dir.path().join("img"), &dir.path().join("lab3")),
        Err(DataError::CountMismatch { images: 1, labels: 3 })
    ));
    assert!(matches!(load_idx(&dir.path().join("none"), &dir.path().join("lab")), Err(DataError::Io { .. })));
}

#[test]
fn idx_encoding_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = synth_dataset(4, 20, 9, 3).unwrap();
    // quantize so the byte encoding is lossless
    for v in d.inputs.as_mut_slice() {
        *v = (*v * 255.0).round() / 255.0;
    }
    let (img, lab) = encode_idx(&d, 3, 3);
    fs::write(dir.path().join("i"), img).unwrap();
    fs::write(dir.path().join("l"), lab).unwrap();
    let back = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
    assert_eq!(back.labels, d.labels);
    assert_eq!(back.inputs, d.inputs);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.eval.every = 5;
    c.out = Some(dir.path().join("a"));
    run_experiment(&c).unwrap();
    c.out = Some(dir.path().join("b"));
    run_experiment(&c).unwrap();
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    c.seed = 1;
    c.out = Some(dir.path().join("c"));
    run_experiment(&c).unwrap();
    assert_ne!(a, fs::read(dir.path().join("c/metrics.csv")).unwrap());
}

#[test]
fn output_directory_contents() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.out = Some(dir.path().join("run"));
    let r = run_experiment(&c).unwrap();
    let run = dir.path().join("run");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..6], &["task", "step", "split", "accuracy", "loss", "penalty"]);
    assert_eq!(header.len(), 6 + 7 * 3);
    assert_eq!(header[6], "sigma_max.1");
    assert_eq!(header.last().unwrap(), &"rep_change.3");
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').count(), header.len());
    }

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["master"], 0);
    assert_eq!(manifest["total_steps"], 3 * 2 * 6);
    // the echoed text reproduces the config
    let echoed = ExperimentConfig::parse(manifest["config_text"].as_str().unwrap()).unwrap();
    assert_eq!(echoed, c);

    let ckpt = load_checkpoint(&run.join("checkpoint.bin")).unwrap();
    for id in r.params.param_ids() {
        assert_eq!(ckpt.param(id), r.params.param(id));
    }
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let mut c = tiny_config();
    c.out = Some(blocker.join("sub"));
    assert!(run_experiment(&c).is_err());
}

#[test]
fn idx_data_source_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = synth_dataset(1, 128, 6, 3).unwrap();
    for v in d.inputs.as_mut_slice() {
        *v = (*v * 255.0).round() / 255.0;
    }
    let (img, lab) = encode_idx(&d, 2, 3);
    fs::write(dir.path().join("train-images"), img).unwrap();
    fs::write(dir.path().join("train-labels"), lab).unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(
        &cfg_path,
        "data.source = idx\ndata.idx_images = train-images\ndata.idx_labels = train-labels\n\
         data.train = 96\ndata.test = 32\ndata.dim = 6\ndata.classes = 3\ndata.batch = 16\n\
         model.hidden = 8,8\nstream.tasks = 2\nstream.epochs = 1\neval.diversity_batch = 8\neval.probe = 16\n",
    )
    .unwrap();
    let c = ExperimentConfig::from_file(&cfg_path).unwrap();
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.tasks.len(), 2);

    let mut too_many = c.clone();
    too_many.data.n_train = 200;
    assert!(run_experiment(&too_many).is_err());
}
