use candle_core::DType;
use cfbt_core::nn::ForwardCtx;
use cfbt_core::verify::{random_inputs, randomize};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use cfbt_core::{CfbtModel, ModelConfig};

/// Reductions of the desk-scale eval forward at fixed seeds, with the
/// fusion modules moved off their zero start.
fn fingerprint() -> [f64; 6] {
    let cfg = ModelConfig::desk();
    let model = CfbtModel::new(&cfg, DType::F32, Some(2024)).unwrap();
    let fusion: Vec<_> = model.store().entries().iter().filter(|e| e.group.is_fusion()).map(|e| &e.param).collect();
    randomize(&fusion, &mut ChaCha8Rng::seed_from_u64(5), 0.05).unwrap();
    let (t, s) = random_inputs(&cfg, 1, DType::F32, 77).unwrap();
    let out = model.forward(&t, &s, &mut ForwardCtx::eval()).unwrap();
    let stat = |x: &candle_core::Tensor| {
        let v = x.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        (v.iter().sum::<f64>(), v.iter().map(|a| a * a).sum::<f64>())
    };
    let (c1, c2) = stat(&out.cls);
    let (o1, o2) = stat(&out.offset);
    let (s1, s2) = stat(&out.size);
    [c1, c2, o1, o2, s1, s2]
}

const GOLDEN: [f64; 6] = [
    34.295569896698,
    19.946900445014183,
    72.07759413868189,
    46.39175308003996,
    25.16721390746534,
    8.669669365063525,
];

#[test]
fn desk_forward_matches_recorded_values() {
    let got = fingerprint();
    for (k, (g, want)) in got.iter().zip(GOLDEN).enumerate() {
        assert!((g - want).abs() <= 1e-4 * want.abs().max(1.0), "entry {k}: {g} vs {want}");
    }
}
