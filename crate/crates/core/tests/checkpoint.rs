use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitrm::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use vitrm::data::{ChannelStats, LabeledBatch};
use vitrm::metrics::{read_metrics, MetricRecord, MetricsWriter, Split};
use vitrm::model::{Model, ModelConfig};
use vitrm::train::{EpochStats, TrainConfig, Trainer};
use vitrm::Scalar;

fn trained<T: Scalar>() -> Trainer<T> {
    let cfg = ModelConfig::micro();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let m = Model::init(cfg.clone(), &mut r).unwrap();
    let mut tr = Trainer::new(m, TrainConfig::default()).unwrap();
    let mut soft = vec![0.0; 20];
    soft[2] = 1.0;
    soft[17] = 1.0;
    let batch = LabeledBatch {
        images: (0..2 * cfg.image_len()).map(|_| r.random_range(-1.0..1.0)).collect(),
        soft_targets: soft,
        hard_labels: vec![2, 7],
        classes: 10,
        indices: vec![0, 1],
    };
    for _ in 0..3 {
        tr.deep_supervision(&batch, 1e-3).unwrap();
    }
    tr.progress.epochs_done = 2;
    tr.progress.history = vec![0.25, 0.5];
    tr.progress.best_accuracy = Some(0.5);
    tr.progress.best_epoch = Some(1);
    tr
}

fn stats() -> ChannelStats {
    ChannelStats {
        mean: [0.49, 0.48, 0.45],
        std: [0.25, 0.24, 0.26],
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let ck = Checkpoint::from_trainer(&trained::<f32>(), Some(stats()));
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("best.ckpt");
    ck.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(Checkpoint::<f32>::load(&p).unwrap(), ck);
}

#[test]
fn every_array_round_trips_bit_exactly() {
    let tr = trained::<f64>();
    let back = Checkpoint::<f64>::from_bytes(&Checkpoint::from_trainer(&tr, None).to_bytes().unwrap())
        .unwrap()
        .into_trainer()
        .unwrap();
    let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.model.params.snapshot()), bits(&tr.model.params.snapshot()));
    assert_eq!(bits(&back.opt.state.m), bits(&tr.opt.state.m));
    assert_eq!(bits(&back.opt.state.v), bits(&tr.opt.state.v));
    assert_eq!(bits(&back.ema.shadow), bits(&tr.ema.shadow));
    assert_eq!(back.opt.state.step, 3);
    assert_eq!(back.progress, tr.progress);
    assert_eq!(back.config, tr.config);
    assert!(back.model.params.tensors().iter().all(|t| t.is_tracked()));
}

#[test]
fn corrupt_or_mismatched_files_are_rejected() {
    let bytes = Checkpoint::from_trainer(&trained::<f32>(), None).to_bytes().unwrap();

    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0, 1, 2]);
    let e = Checkpoint::<f32>::from_bytes(&trailing).unwrap_err().to_string();
    assert!(e.contains("trailing"), "{e}");

    let e = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
    assert!(e.contains("truncated"), "{e}");

    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 0x40;
    let e = Checkpoint::<f32>::from_bytes(&flipped).unwrap_err().to_string();
    assert!(e.contains("digest"), "{e}");

    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let e = Checkpoint::<f32>::from_bytes(&version).unwrap_err().to_string();
    assert!(e.contains("version"), "{e}");

    let e = Checkpoint::<f64>::from_bytes(&bytes).unwrap_err().to_string();
    assert!(e.contains("F32") || e.contains("f32"), "{e}");

    assert!(Checkpoint::<f32>::from_bytes(b"VITRMCK").is_err());
}

#[test]
fn shape_disagreement_with_config_is_rejected() {
    let mut ck = Checkpoint::from_trainer(&trained::<f32>(), None);
    ck.model.latent_tokens = 3;
    // arrays still sized for K = 2
    assert!(ck.to_bytes().is_err());

    // a header whose config disagrees with its manifest
    let ck = Checkpoint::from_trainer(&trained::<f32>(), None);
    let bytes = ck.to_bytes().unwrap();
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[20..20 + hlen].to_vec()).unwrap();
    let edited = header.replacen("\"latent_tokens\":2", "\"latent_tokens\":3", 1);
    assert_ne!(edited, header);
    let mut out = bytes[..12].to_vec();
    out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
    out.extend_from_slice(edited.as_bytes());
    out.extend_from_slice(&bytes[20 + hlen..]);
    let e = Checkpoint::<f32>::from_bytes(&out).unwrap_err().to_string();
    assert!(e.contains("z_init"), "{e}");
}

#[test]
fn eval_model_selects_ema_or_raw_weights() {
    let tr = trained::<f32>();
    let ck = Checkpoint::from_trainer(&tr, None);
    assert_eq!(ck.eval_model(true).unwrap().params.snapshot(), tr.ema.shadow);
    assert_eq!(ck.eval_model(false).unwrap().params.snapshot(), tr.model.params.snapshot());
}

#[test]
fn metrics_are_one_json_object_per_line_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("metrics.jsonl");
    let s = EpochStats {
        loss_total: 1.5,
        loss_cls: 1.25,
        loss_halt: 0.25,
        accuracy: 0.375,
        mean_q: 0.5,
        lr: 3e-4,
        supervision_steps_used: 1.0,
        wall_seconds: 2.0,
    };
    {
        let mut w = MetricsWriter::append(&p).unwrap();
        for e in 1..=3 {
            w.write(&MetricRecord::new(e, Split::Train, &s)).unwrap();
            w.write(&MetricRecord::new(e, Split::Val, &s)).unwrap();
        }
    }
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().next().unwrap().contains("\"split\":\"train\""));
    let back = read_metrics(&p).unwrap();
    assert_eq!(back.len(), 6);
    assert_eq!(back[5], MetricRecord::new(3, Split::Val, &s));
    assert!(back.windows(2).all(|w| w[0].epoch <= w[1].epoch));
}
