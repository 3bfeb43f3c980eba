use oraclefuse::base_model::{cv_predict, train, BaseModel, Scorer, TrainParams};
use oraclefuse::calibration::{Calibrator, CalibratorKind, GridSpec};
use oraclefuse::dataset::{
    load_dataset, make_folds, save_dataset, synthesize, BoundaryNoise, Format, Stratum,
    SyntheticSpec,
};
use oraclefuse::ensemble::{fit_adaptive_weights, WeightFunction};
use oraclefuse::harness::{run, ExperimentConfig, Method, TransferConfig};
use oraclefuse::oracle::{OracleConfig, OracleProvider, SyntheticOracle, SyntheticOracleSpec};
use oraclefuse::transfer::TransferPlan;

fn scored_dataset() -> oraclefuse::dataset::LabeledDataset {
    let mut spec = SyntheticSpec::new(3, 500, vec![1.0, -1.0, 0.5, 0.0], 21);
    spec.boundary_noise = Some(BoundaryNoise {
        band: 0.5,
        flip_probability: 0.3,
    });
    let ds = synthesize(&spec).unwrap();
    let hidden = ds
        .instances()
        .iter()
        .map(|i| (i.id.clone(), i.label.unwrap()))
        .collect();
    let mut oracle = SyntheticOracle::new(SyntheticOracleSpec::binary(0.8, 4))
        .unwrap()
        .with_hidden_labels(hidden);
    let scores = oracle
        .score_batch(ds.instances())
        .unwrap()
        .into_iter()
        .collect();
    ds.with_oracle_scores(&scores).unwrap()
}

#[test]
fn artifacts_survive_disk_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scored_dataset();
    for (name, format) in [("d.csv", Format::Csv), ("d.jsonl", Format::Jsonl)] {
        let path = dir.path().join(name);
        save_dataset(&ds, &path, format).unwrap();
        assert_eq!(load_dataset(&path, format).unwrap(), ds);
    }

    let model = train(&ds, &TrainParams::default()).unwrap();
    model.save(dir.path().join("m.json")).unwrap();
    let loaded = BaseModel::load(dir.path().join("m.json")).unwrap();
    assert_eq!(
        loaded.score_all(&ds).unwrap(),
        model.score_all(&ds).unwrap()
    );

    let folds = make_folds(&ds, 5, 1).unwrap();
    let cv = cv_predict(&ds, &folds, &TrainParams::default()).unwrap();
    let (z, y) = (ds.oracle_scores().unwrap(), ds.labels().unwrap());
    let wf = fit_adaptive_weights(&cv.scores, &z, &y, 4).unwrap();
    wf.save(dir.path().join("w.json")).unwrap();
    assert_eq!(WeightFunction::load(dir.path().join("w.json")).unwrap(), wf);

    let f = model.score_all(&ds).unwrap();
    for kind in [CalibratorKind::Cell, CalibratorKind::Additive] {
        let cal = Calibrator::fit(kind, &f, &z, &y, GridSpec::new(10, 2).unwrap()).unwrap();
        cal.save(dir.path().join("c.json")).unwrap();
        let back = Calibrator::load(dir.path().join("c.json")).unwrap();
        assert_eq!(
            back.predict_all(&f, &z).unwrap(),
            cal.predict_all(&f, &z).unwrap()
        );
    }
}

#[test]
fn transfer_experiment_with_derived_density_writes_clamped_plan() {
    let mut spec = SyntheticSpec::new(2, 1500, vec![0.0, 1.0, 0.0], 3);
    spec.strata = vec![
        Stratum {
            tag: "src".into(),
            shift: vec![-4.0, 0.0],
            weight: 0.5,
            logit_offset: 0.0,
        },
        Stratum {
            tag: "tgt".into(),
            shift: vec![4.0, 0.0],
            weight: 0.5,
            logit_offset: 1.5,
        },
    ];
    let mut cfg = ExperimentConfig::with_synthetic(spec);
    cfg.methods = vec![
        Method::Ml,
        Method::Transfer { m: 0 },
        Method::Transfer { m: 300 },
    ];
    cfg.oracle = Some(OracleConfig::Synthetic(SyntheticOracleSpec::binary(0.9, 2)));
    cfg.transfer = Some(TransferConfig {
        source: "src".into(),
        target: "tgt".into(),
        n_labeled: Some(400),
        m: vec![],
        slack: 0.1,
        round_oracle: false,
        sample_from_target: false,
    });
    let dir = tempfile::tempdir().unwrap();
    let report = run(&cfg, Some(dir.path())).unwrap();
    for set in ["source", "target"] {
        assert_eq!(
            report.summary_for("ml", set).unwrap().accuracy,
            report.summary_for("transfer(0)", set).unwrap().accuracy
        );
    }
    let plan: TransferPlan =
        oraclefuse::persist::load_json(dir.path().join("seed-0/transfer-300-plan.json")).unwrap();
    assert!(plan.clamped);
    assert_eq!(plan.sampling.get("tgt"), 1.0);
    assert_eq!((plan.n, plan.m), (400, 300));
}

#[test]
fn transfer_methods_need_transfer_table() {
    let mut cfg =
        ExperimentConfig::with_synthetic(SyntheticSpec::new(2, 100, vec![1.0, 0.0, 0.0], 1));
    cfg.methods = vec![Method::Transfer { m: 10 }];
    cfg.oracle = Some(OracleConfig::Synthetic(SyntheticOracleSpec::binary(0.9, 2)));
    assert!(run(&cfg, None).is_err());
}
