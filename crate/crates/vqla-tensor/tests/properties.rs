use proptest::prelude::*;
use vqla_tensor::Tensor;

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(a, b, c)| {
        let shape = vec![a, b, c];
        let numel = a * b * c;
        (
            Just(shape),
            proptest::collection::vec(-50.0f64..50.0, numel..=numel),
        )
    })
}

proptest! {
    #[test]
    fn reshape_roundtrip_is_bit_exact((shape, data) in shape_and_data()) {
        let x = Tensor::<f64>::from_vec(&shape, data).unwrap();
        let numel = x.numel();
        let y = x.reshape(&[numel]).unwrap().reshape(&shape).unwrap();
        let xb: Vec<u64> = x.data_vec().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data_vec().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(xb, yb);
    }

    #[test]
    fn transpose_roundtrip_is_bit_exact((shape, data) in shape_and_data()) {
        let x = Tensor::<f64>::from_vec(&shape, data).unwrap();
        let y = x.transpose(&[1, 2, 0]).unwrap().transpose(&[2, 0, 1]).unwrap();
        let xb: Vec<u64> = x.data_vec().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data_vec().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(xb, yb);
    }

    #[test]
    fn softmax_rows_sum_to_one((shape, data) in shape_and_data(), axis in 0usize..3) {
        let x = Tensor::<f64>::from_vec(&shape, data).unwrap();
        let y = x.softmax(axis).unwrap();
        let s = y.sum_axis(axis).unwrap();
        for v in s.data_vec() {
            prop_assert!((v - 1.0).abs() < 1e-6, "sum {v}");
        }
    }

    #[test]
    fn softmax_is_positive((shape, data) in shape_and_data()) {
        let x = Tensor::<f64>::from_vec(&shape, data).unwrap();
        let y = x.softmax(2).unwrap();
        for v in y.data_vec() {
            prop_assert!(v >= 0.0 && v <= 1.0);
        }
    }
}
