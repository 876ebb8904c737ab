use candle_core::DType;
use cfbt_core::nn::ParamGroup;
use cfbt_core::{CfbtModel, ModelConfig};

fn within(actual: usize, expected: f64, tol: f64) -> bool {
    ((actual as f64 - expected) / expected).abs() <= tol
}

#[test]
fn full_scale_counts() {
    let m = CfbtModel::new(&ModelConfig::paper(), DType::F32, None).unwrap();
    let c = m.count_parameters();
    let cstaf = c.group(ParamGroup::Cstaf);
    let cstcf = c.group(ParamGroup::Cstcf);
    println!("cstaf={cstaf} cstcf={cstcf} dsta={} trainable={} total={}", c.group(ParamGroup::Dsta), c.trainable, c.total);
    assert!(within(cstaf, 90_000.0, 0.05), "{cstaf}");
    assert!(within(cstaf + cstcf, 180_000.0, 0.05));
    assert!(within(c.trainable, 259_000.0, 0.05), "{}", c.trainable);
    assert_eq!(c.trainable, cstaf + cstcf + c.group(ParamGroup::Dsta));
}

#[test]
fn ablation_lattice_counts() {
    let base = ModelConfig::paper();
    let count = |cstaf: bool, cstcf: bool, dsta: bool| {
        let mut cfg = base.clone();
        cfg.cstaf = cstaf;
        cfg.cstcf = cstcf;
        if !dsta {
            cfg.dsta_layers.clear();
        }
        CfbtModel::new(&cfg, DType::F32, None).unwrap().count_parameters().trainable
    };
    assert_eq!(count(false, false, false), 0);
    assert!(within(count(true, false, false), 90_000.0, 0.05));
    assert!(within(count(false, true, false), 90_000.0, 0.05));
    assert!(within(count(true, true, false), 180_000.0, 0.05));
    assert!(within(count(true, true, true), 259_000.0, 0.05));
}
