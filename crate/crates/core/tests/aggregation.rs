use fedsim_core::{aggregate, DeviceId, LocalUpdate, ModelKind, ModelParams, ModelSpec};
use proptest::prelude::*;

fn update(device: usize, count: u64, values: Vec<f64>) -> LocalUpdate {
    let spec = ModelSpec::new(ModelKind::Logistic, 1, 1).unwrap();
    let mut padded = values;
    padded.resize(spec.param_len(), 0.0);
    LocalUpdate {
        device_id: DeviceId(format!("d{device}")),
        count,
        params: ModelParams::from_values(spec, padded).unwrap(),
        mean_loss: 0.0,
    }
}

#[test]
fn one_and_three_weighted_average_is_three() {
    let avg = aggregate(&[update(0, 1, vec![0.0]), update(1, 3, vec![4.0])]).unwrap();
    assert!((avg.values()[0] - 3.0).abs() <= 1e-15);
}

#[test]
fn single_update_is_returned_unchanged() {
    let u = update(7, 42, vec![1.25, -3.5, 0.1]);
    assert_eq!(aggregate(std::slice::from_ref(&u)).unwrap(), u.params);
}

fn instance() -> impl Strategy<Value = Vec<(u64, Vec<f64>)>> {
    (1usize..4).prop_flat_map(|len| {
        prop::collection::vec((1u64..10_000, prop::collection::vec(-1e6f64..1e6, len)), 1..12)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn average_is_a_convex_combination(inst in instance()) {
        let updates: Vec<LocalUpdate> = inst
            .iter()
            .enumerate()
            .map(|(i, (n, w))| update(i, *n, w.clone()))
            .collect();
        let avg = aggregate(&updates).unwrap();
        let total: f64 = inst.iter().map(|(n, _)| *n as f64).sum();
        for j in 0..inst[0].1.len() {
            let lo = inst.iter().map(|(_, w)| w[j]).fold(f64::INFINITY, f64::min);
            let hi = inst.iter().map(|(_, w)| w[j]).fold(f64::NEG_INFINITY, f64::max);
            let exact: f64 = inst.iter().map(|(n, w)| *n as f64 * w[j]).sum::<f64>() / total;
            let got = avg.values()[j];
            prop_assert!(lo <= got && got <= hi, "{got} outside [{lo}, {hi}]");
            prop_assert!((got - exact).abs() <= 1e-9 * (1.0 + exact.abs()));
        }
    }

    #[test]
    fn average_ignores_input_order(inst in instance(), rotate in 0usize..12) {
        let updates: Vec<LocalUpdate> = inst
            .iter()
            .enumerate()
            .map(|(i, (n, w))| update(i, *n, w.clone()))
            .collect();
        let mut shuffled = updates.clone();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(aggregate(&updates).unwrap(), aggregate(&shuffled).unwrap());
    }
}
