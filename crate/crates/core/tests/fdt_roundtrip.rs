use fluiddiff::fdt::{read_named, read_tensor, write_named, write_tensor, AnyTensor};
use fluiddiff::rng::GaussianRng;
use fluiddiff::{IoError, Tensor};
use proptest::prelude::*;

#[test]
fn random_f32_file_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fdt");
    let t = GaussianRng::new(5).normal_tensor::<f32>(&[3, 16, 16]);
    write_tensor(&path, &t).unwrap();
    let back: Tensor<f32> = read_tensor(&path).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(bits(&back), bits(&t));
}

#[test]
fn corrupted_magic_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fdt");
    write_tensor(&path, &Tensor::<f64>::ones(&[4])).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] = 0;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(read_tensor::<f64>(&path), Err(IoError::MagicMismatch { .. })));
}

#[test]
fn missing_file_reports_path() {
    let err = read_tensor::<f32>(std::path::Path::new("/nonexistent/x.fdt")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.fdt"));
}

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(any::<f64>(), n))
    })
}

proptest! {
    #[test]
    fn any_f64_tensor_roundtrips((shape, data) in shape_and_data()) {
        let t = Tensor::new(shape, data).unwrap();
        let mut buf = Vec::new();
        fluiddiff::fdt::encode_tensor(&t, &mut buf);
        let back = fluiddiff::fdt::decode_tensor(&buf).unwrap();
        let AnyTensor::F64(back) = back else { panic!("dtype changed") };
        prop_assert_eq!(back.shape(), t.shape());
        let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn named_files_roundtrip(n in 1usize..5, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.fdt");
        let mut rng = GaussianRng::new(seed);
        let tensors: Vec<Tensor<f32>> = (0..n).map(|i| rng.normal_tensor(&[i + 1, 2])).collect();
        let names: Vec<String> = (0..n).map(|i| format!("t_{i}")).collect();
        let entries: Vec<(&str, &Tensor<f32>)> = names.iter().map(String::as_str).zip(&tensors).collect();
        write_named(&path, &entries).unwrap();
        let back = read_named(&path).unwrap();
        prop_assert_eq!(back.len(), n);
        for ((name, t), (bn, bt)) in entries.iter().zip(back) {
            prop_assert_eq!(*name, bn.as_str());
            prop_assert_eq!(&bt.into_typed::<f32>().unwrap(), *t);
        }
    }
}
