use proptest::prelude::*;
use serde_json::Value;
use z2h::denoiser::{toy_weight_census, HEADS, HEAD_DIM, LATENT_SIDE, MODEL_DIM, TOKENS};
use z2h::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use z2h::*;

const CENSUS: &str = include_str!("../assets/toy_census.json");
const CONSTANTS: &str = include_str!("../assets/diffusion_constants.json");

fn census_from_manifest() -> Vec<(String, Vec<usize>)> {
    let v: Value = serde_json::from_str(CENSUS).unwrap();
    v["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| {
            let shape = w["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).collect();
            (w["name"].as_str().unwrap().to_string(), shape)
        })
        .collect()
}

/// Encodes a container exactly as an independent writer following the
/// byte layout would, with payload values from a small LCG.
fn foreign_container(census: &[(String, Vec<usize>)], scale: f32) -> Vec<u8> {
    let mut state: u32 = 12345;
    let mut out = b"ZTH1".to_vec();
    out.extend_from_slice(&(census.len() as u32).to_le_bytes());
    for (name, shape) in census {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for _ in 0..shape.iter().product::<usize>() {
            state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            let x = ((state >> 8) as f32 / (1u32 << 24) as f32 - 0.5) * scale;
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

#[test]
fn shared_census_matches_architecture() {
    assert_eq!(census_from_manifest(), toy_weight_census());
    let v: Value = serde_json::from_str(CENSUS).unwrap();
    assert_eq!(v["format"], "ZTH1");
    assert_eq!(v["latent_side"], LATENT_SIDE);
    assert_eq!(v["tokens"], TOKENS);
    assert_eq!(v["heads"], HEADS);
    assert_eq!(v["head_dim"], HEAD_DIM);
    assert_eq!(v["model_dim"], MODEL_DIM);
}

#[test]
fn shared_constants_match_schedule() {
    let v: Value = serde_json::from_str(CONSTANTS).unwrap();
    assert_eq!(v["schedule"], "scaled_linear");
    assert_eq!(v["train_steps"].as_u64().unwrap() as usize, DEFAULT_STEPS);
    assert_eq!(v["beta_start"].as_f64().unwrap().to_bits(), DEFAULT_BETA_START.to_bits());
    assert_eq!(v["beta_end"].as_f64().unwrap().to_bits(), DEFAULT_BETA_END.to_bits());
    let n = NoiseSchedule::default();
    assert_eq!(n.beta(1).unwrap(), DEFAULT_BETA_START);
    assert!((n.beta(DEFAULT_STEPS).unwrap() - DEFAULT_BETA_END).abs() < 1e-15);
}

#[test]
fn foreign_container_loads_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trained.zth");
    std::fs::write(&path, foreign_container(&census_from_manifest(), 0.2)).unwrap();
    let weights = load_weights(&path).unwrap();
    weights.check_census(&toy_weight_census()).unwrap();
    let toy = ToyDenoiser::from_weights(weights).unwrap();
    let z = Tensor::filled(&[16, 16, 3], 0.1).unwrap();
    let eps = toy.predict_eps(&z, 400, &Condition::default(), &mut NoHooks).unwrap();
    assert_eq!(eps.shape(), z.shape());
    eps.ensure_finite("eps").unwrap();
}

#[test]
fn census_violations_are_reported() {
    let mut census = census_from_manifest();
    census.pop();
    let bytes = foreign_container(&census, 1.0);
    let c = WeightContainer::from_bytes(&bytes).unwrap();
    let err = ToyDenoiser::from_weights(c).unwrap_err();
    assert!(matches!(err, Error::Census(_)));
    assert_eq!(err.exit_code(), 3);

    let mut census = census_from_manifest();
    census[3].1 = vec![32, 31];
    let c = WeightContainer::from_bytes(&foreign_container(&census, 1.0)).unwrap();
    assert!(matches!(ToyDenoiser::from_weights(c), Err(Error::Census(_))));
}

#[test]
fn random_toy_weights_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.zth");
    let toy = ToyDenoiser::random(17);
    save_weights(toy.weights(), &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back.to_bytes(), toy.weights().to_bytes());
    for ((na, a), (nb, b)) in back.iter().zip(toy.weights().iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

fn entry() -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
    proptest::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        (Just(shape), proptest::collection::vec(any::<f32>(), n))
    })
}

proptest! {
    #[test]
    fn container_roundtrip(entries in proptest::collection::vec(entry(), 0..6)) {
        let mut c = WeightContainer::new();
        for (i, (shape, data)) in entries.into_iter().enumerate() {
            c.insert(format!("w{i}"), Tensor::new(shape, data).unwrap()).unwrap();
        }
        let bytes = c.to_bytes();
        let back = WeightContainer::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.len(), c.len());
    }

    #[test]
    fn truncation_always_detected(cut in 0usize..200) {
        let mut c = WeightContainer::new();
        c.insert("a", Tensor::filled(&[3, 5], 1.5).unwrap()).unwrap();
        c.insert("bb", Tensor::filled(&[7], -2.0).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let cut = cut % bytes.len();
        let is_format_error = matches!(WeightContainer::from_bytes(&bytes[..cut]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}
