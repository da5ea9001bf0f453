use seass::model::ModelConfig;
use seass::synth::{generate, SynthSpec};
use seass::text::{encode_corpus, Pair, Vocabulary};
use seass::train::{load_checkpoint_as, save_checkpoint, CheckpointError, OptimizerConfig, Trainer};

fn copy_data() -> (Vec<Pair>, Vec<Pair>, usize) {
    let c = generate(&SynthSpec::copy(12, 1, 6, 600, 20, 1, 9)).unwrap();
    let v = Vocabulary::build(c.train.iter().map(|p| &p.0), 1).unwrap();
    (
        encode_corpus(&c.train, &v, &v, 1).unwrap(),
        encode_corpus(&c.dev, &v, &v, 1).unwrap(),
        v.len(),
    )
}

#[test]
fn copy_task_loss_falls_tenfold() {
    let (train, dev, v) = copy_data();
    let mut mc = ModelConfig::tiny(v, v, 32, 32);
    mc.dropout_p = 0.0;
    let oc = OptimizerConfig {
        batch_size: 32,
        steps: 2000,
        eval_every: 1000,
        dev_max_len: 8,
        log_wallclock: false,
        ..OptimizerConfig::default()
    };
    let mut t = Trainer::new(mc, oc, 2).unwrap();
    let rec = t.run(&train, &dev, None).unwrap();
    let mean = |r: &[seass::train::MetricRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&rec[..20]), mean(&rec[rec.len() - 20..]));
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    assert!(t.state.schedule.best.unwrap() > 0.9);
}

#[test]
fn checkpoint_for_another_shape_is_rejected_by_name() {
    let (train, dev, v) = copy_data();
    let mc = ModelConfig::tiny(v, v, 4, 4);
    let oc = OptimizerConfig {
        steps: 2,
        eval_every: 1,
        dev_max_len: 4,
        ..OptimizerConfig::default()
    };
    let mut t = Trainer::new(mc.clone(), oc, 1).unwrap();
    t.run(&train, &dev, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&t.checkpoint(), &path).unwrap();
    assert_eq!(load_checkpoint_as(&path, Some(&mc)).unwrap().params, t.model.params.store);
    let wider = ModelConfig { emb_dim: 5, ..mc };
    match load_checkpoint_as(&path, Some(&wider)) {
        Err(CheckpointError::ShapeMismatch { name, expected, got }) => {
            assert_eq!(name, "param/src_emb");
            assert_eq!((expected.as_str(), got.as_str()), (format!("{v}x5").as_str(), format!("{v}x4").as_str()));
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
}
