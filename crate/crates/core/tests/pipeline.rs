use aspdc_core::checkpoint::{load_deblur, load_reblur, Checkpoint};
use aspdc_core::config::RunConfig;
use aspdc_core::deblur::{DeblurConfig, DeblurNet};
use aspdc_core::reblur::{ReblurConfig, ReblurNet};
use aspdc_core::synth::{make_corpus, Corpus, SynthConfig, MANIFEST};
use aspdc_core::train::{self, RunDir, Schedule, TrainConfig};

fn small(seed: u64, count: usize, size: usize) -> SynthConfig {
    SynthConfig {
        seed,
        count,
        size,
        ..SynthConfig::default()
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        log_every: 1,
        schedule: Schedule {
            lr0: 1e-3,
            halve_every: 1000,
            floor: 1e-6,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn default_corpus_blur_level_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path(), &SynthConfig::default()).unwrap();
    let c = Corpus::load(dir.path()).unwrap();
    assert_eq!(c.len(), 8);
    let p = c.blurred_psnr().unwrap();
    assert!((22.4..23.4).contains(&p), "mean blurred PSNR {p}");
}

#[test]
fn corpus_generation_is_byte_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    make_corpus(&a, &small(9, 2, 24)).unwrap();
    make_corpus(&b, &small(9, 2, 24)).unwrap();
    make_corpus(&c, &small(10, 2, 24)).unwrap();
    for f in ["blur_0000.png", "sharp_0001.png", MANIFEST] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        std::fs::read(a.join("blur_0000.png")).unwrap(),
        std::fs::read(c.join("blur_0000.png")).unwrap()
    );
}

#[test]
fn training_run_writes_artifacts_and_resumable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path().join("data"), &small(4, 2, 16)).unwrap();
    let c = Corpus::load(dir.path().join("data")).unwrap();
    let cfg = RunConfig::default();
    let run = RunDir::create(dir.path().join("run"), &cfg.to_text()).unwrap();
    let (net, mut store) = DeblurNet::init::<f32>(&DeblurConfig::desk(), 0).unwrap();
    let tc = TrainConfig {
        checkpoint_every: 2,
        ..quick(3)
    };
    let report = train::train_deblur(&net, &mut store, &c, &c, &tc, Some(&run)).unwrap();
    assert_eq!(report.losses.len(), 3);
    assert!(run.path.join("epoch_000002.ckpt").exists());
    assert_eq!(RunConfig::load(run.path.join("config.toml")).unwrap(), cfg);
    let csv = std::fs::read_to_string(run.metrics_path()).unwrap();
    assert_eq!(csv, report.to_csv());

    let ck = Checkpoint::load(run.final_checkpoint()).unwrap();
    let (net2, store2) = load_deblur(&ck).unwrap();
    assert_eq!(net2.cfg, net.cfg);
    assert_eq!(store2.checksum(), store.checksum());
    let adam = ck.optimizer(&store2).unwrap().unwrap();
    assert_eq!(adam.step_count(), 3);
    let x = c.blurred[0].to_tensor();
    assert_eq!(
        net.infer(&store, &x).unwrap().0,
        net2.infer(&store2, &x).unwrap().0
    );
}

#[test]
fn reblur_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path().join("data"), &small(6, 2, 16)).unwrap();
    let c = Corpus::load(dir.path().join("data")).unwrap();
    let (net, mut store) = ReblurNet::init::<f32>(&ReblurConfig::desk(), 1).unwrap();
    let run = RunDir::create(dir.path().join("run"), "").unwrap();
    train::train_reblur(&net, &mut store, &c, &c, &quick(2), Some(&run)).unwrap();
    let (net2, store2) = load_reblur(&Checkpoint::load(run.final_checkpoint()).unwrap()).unwrap();
    assert_eq!(net2.cfg, net.cfg);
    let (s, b) = (c.sharp[1].to_tensor(), c.blurred[1].to_tensor());
    assert_eq!(
        net.infer(&store, &s, &b).unwrap(),
        net2.infer(&store2, &s, &b).unwrap()
    );
}

#[test]
fn deblur_checkpoint_cannot_fill_a_reblur_net() {
    let (net, store) = DeblurNet::init::<f32>(&DeblurConfig::desk(), 0).unwrap();
    let ck = aspdc_core::checkpoint::deblur_checkpoint(&net.cfg, &store);
    assert!(load_reblur(&ck).is_err());
}

#[test]
fn frozen_reblur_is_untouched_by_finetuning() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path(), &small(8, 2, 16)).unwrap();
    let c = Corpus::load(dir.path()).unwrap();
    let (dn, mut ds) = DeblurNet::init::<f32>(&DeblurConfig::desk(), 0).unwrap();
    let (rn, mut rs) = ReblurNet::init::<f32>(&ReblurConfig::desk(), 0).unwrap();
    let before = rs.checksum();
    let cc = RunConfig::default().consistency();
    let report =
        train::finetune_consistency(&dn, &mut ds, &rn, &mut rs, &c, &c, &cc, &quick(2), None)
            .unwrap();
    assert_eq!(rs.checksum(), before);
    assert_eq!(report.deblur_terms.len(), 2);
    for ((t, d), r) in report
        .train
        .losses
        .iter()
        .zip(&report.deblur_terms)
        .zip(&report.reblur_terms)
    {
        assert!((t - (d + cc.lambda * r)).abs() <= 1e-9 * t.abs().max(1.0));
    }

    let mut unfrozen = cc;
    unfrozen.freeze_reblur = false;
    train::finetune_consistency(
        &dn,
        &mut ds,
        &rn,
        &mut rs,
        &c,
        &c,
        &unfrozen,
        &quick(1),
        None,
    )
    .unwrap();
    assert_ne!(rs.checksum(), before);
}
