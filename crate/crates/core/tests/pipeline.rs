use tempfile::TempDir;
use xnorram::model::argmax;
use xnorram::netspec::{self, builtin};
use xnorram::rram::{self, BerCurve, CellMode, FaultModel};
use xnorram::train::{self, AdamConfig, Strategy, SyntheticTask, TrainConfig};
use xnorram::Error;

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 12,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn csv_round_trip_through_files() {
    let dir = TempDir::new().unwrap();
    let ds = train::make_synthetic(SyntheticTask::ConvPattern, 20, 4).unwrap();
    let path = dir.path().join("signals.csv");
    train::save_csv_signals(&ds, &path).unwrap();
    let back = train::load_csv_signals(&path, ds.sample_shape()[2]).unwrap();
    assert_eq!(back.labels(), ds.labels());
    for i in 0..ds.len() {
        assert_eq!(back.sample(i), ds.sample(i));
    }
}

#[test]
fn trained_binary_model_survives_save_and_load() {
    let dir = TempDir::new().unwrap();
    let spec = builtin("desk_dense").unwrap();
    let tr = train::make_synthetic(SyntheticTask::Separable, 200, 1).unwrap();
    let va = train::make_synthetic(SyntheticTask::Separable, 100, 2).unwrap();
    let out = train::train_with_validation(&spec, &tr, Some(&va), &quick_config(1), Strategy::AllBinary).unwrap();
    let path = dir.path().join("m.xnr");
    netspec::save_model(&path, &out.model).unwrap();
    let loaded = netspec::load_model(&path).unwrap();
    let va = va.apply_normalization(out.normalization.as_ref().unwrap()).unwrap();
    for x in va.tensors() {
        assert_eq!(loaded.forward(&x).unwrap(), out.model.forward(&x).unwrap());
        assert_eq!(argmax(&loaded.forward(&x).unwrap()), argmax(&out.reference.forward_emulated(&x).unwrap()));
    }
    let acc = train::evaluate(&loaded, &va).unwrap();
    assert!(acc >= 0.85, "{acc}");
}

#[test]
fn truncated_model_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    let spec = builtin("desk_dense").unwrap();
    let tr = train::make_synthetic(SyntheticTask::Separable, 60, 3).unwrap();
    let out = train::train(&spec, &tr, &quick_config(3), Strategy::BinaryClassifier).unwrap();
    let bytes = netspec::encode_model(&out.model).unwrap();
    let path = dir.path().join("cut.xnr");
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(netspec::load_model(&path), Err(Error::CorruptModel(_))));
}

#[test]
fn fault_free_corruption_leaves_predictions_unchanged() {
    let spec = builtin("desk_conv").unwrap();
    let tr = train::make_synthetic(SyntheticTask::ConvPattern, 120, 5).unwrap();
    let out = train::train(&spec, &tr, &quick_config(5), Strategy::AllBinary).unwrap();
    let fm = FaultModel::new(CellMode::T1R1, BerCurve::constant(0.0).unwrap(), 9);
    let (corrupted, flips) = rram::corrupt_model(&out.model, &fm, 1, 0).unwrap();
    assert!(flips.iter().all(|f| f.flips == 0));
    let xs = tr.apply_normalization(out.normalization.as_ref().unwrap()).unwrap().tensors();
    assert_eq!(corrupted.predict_many(&xs).unwrap(), out.model.predict_many(&xs).unwrap());
}
