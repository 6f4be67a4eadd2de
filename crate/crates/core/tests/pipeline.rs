use std::fs;

use detxai::experiment::{cmd_experiment, ExperimentSpec};
use detxai::micromodel::{accuracy, train, TrainConfig, TransferRegime};
use detxai::synthdata::{generate, split, DomainSpec};

fn tiny_spec(dir: &std::path::Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        seeds: vec![0, 1],
        source_images: 40,
        auxiliary_images: 30,
        target_images: 40,
        output_dir: Some(dir.to_path_buf()),
        ..ExperimentSpec::default()
    };
    spec.pretrain.epochs = 2;
    for regime in TransferRegime::ALL {
        let cfg = match regime {
            TransferRegime::FreezeBackbone => &mut spec.regimes.freeze_backbone,
            TransferRegime::NoPretrain => &mut spec.regimes.no_pretrain,
            TransferRegime::FineTuneAll => &mut spec.regimes.fine_tune_all,
        };
        cfg.epochs = 2;
    }
    spec
}

#[test]
fn experiment_outputs_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_experiment(&tiny_spec(a.path())).unwrap();
    cmd_experiment(&tiny_spec(b.path())).unwrap();
    for name in ["raw_results.json", "report.json", "report.md", "report.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

fn sized(mut d: DomainSpec) -> DomainSpec {
    d.image_size = (32, 32);
    d
}

#[test]
fn plain_trained_classifier_degrades_under_clutter_and_beats_chance() {
    let plain = generate(&sized(DomainSpec::plain("plain")), 400, 7).unwrap();
    let (tr, va, te) = split(&plain, (0.6, 0.2, 0.2), 8).unwrap();
    let cfg = TrainConfig {
        epochs: 12,
        batch_size: 8,
        regime: TransferRegime::NoPretrain,
        ..TrainConfig::default()
    };
    let (params, _) = train(&tr.labeled(), &va.labeled(), &cfg, None).unwrap();
    let heavy = generate(&sized(DomainSpec::heavy("heavy")), 80, 9).unwrap();
    let on_plain = accuracy(&params, &te.labeled()).unwrap();
    let on_heavy = accuracy(&params, &heavy.labeled()).unwrap();
    assert!(on_plain > 0.25, "plain accuracy {on_plain}");
    assert!(on_heavy < on_plain, "heavy {on_heavy} vs plain {on_plain}");
}
