use proptest::prelude::*;

use wecdg::data::{crop_origins, CropConfig, DatasetManifest, Dihedral, ManifestEntry};
use wecdg::losses::{psnr, ssim_value};
use wecdg::params::ParameterTree;
use wecdg::sdgm::{match_descriptor, DegradationDescriptor, DescriptorLabel, DescriptorSource, ExposureClass, ExposureLabel};
use wecdg::wavelet::{dwt2, iwt2, swap_subbands_raw, wavedec2, waverec2, Band};
use wecdg::Tensor;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// Even-sized `[H, W, C]` image.
fn even_image() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| tensor(vec![2 * h, 2 * w, c], 0.0, 1.0))
}

fn pair(shape: Vec<usize>) -> impl Strategy<Value = (Tensor, Tensor)> {
    (tensor(shape.clone(), 0.0, 1.0), tensor(shape, 0.0, 1.0))
}

fn descriptor(v: Vec<f64>) -> DegradationDescriptor {
    DegradationDescriptor {
        label: DescriptorLabel::Base(ExposureClass::WellExposed),
        embedding: Tensor::vector(v),
        source: DescriptorSource::Manual,
    }
}

proptest! {
    #[test]
    fn wavelet_round_trip_and_energy(x in even_image()) {
        let sb = dwt2(&x).unwrap();
        let back = iwt2(&sb).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
        let e: f64 = [&sb.approx, &sb.horizontal, &sb.vertical, &sb.diagonal].iter().map(|t| t.sum_squares()).sum();
        prop_assert!((e - x.sum_squares()).abs() <= 1e-12 * x.sum_squares().max(1.0));
    }

    #[test]
    fn multilevel_round_trip(x in tensor(vec![16, 8, 2], -1.0, 1.0), levels in 0usize..4) {
        let dec = wavedec2(&x, levels).unwrap();
        prop_assert_eq!(dec.details.len(), levels);
        prop_assert!(waverec2(&dec).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn high_band_swap_keeps_means((a, b) in pair(vec![6, 8, 3])) {
        let (oa, ob) = swap_subbands_raw(&a, &b, Band::High).unwrap();
        prop_assert!((oa.mean() - a.mean()).abs() < 1e-12);
        prop_assert!((ob.mean() - b.mean()).abs() < 1e-12);
        let (la, lb) = swap_subbands_raw(&a, &b, Band::Low).unwrap();
        prop_assert!((la.mean() - b.mean()).abs() < 1e-12);
        prop_assert!((lb.mean() - a.mean()).abs() < 1e-12);
    }

    #[test]
    fn dihedral_inverse_and_closure(x in tensor(vec![3, 5, 2], 0.0, 1.0), rot in 0u8..4, flip: bool, rot2 in 0u8..4, flip2: bool) {
        let t = Dihedral::new(rot, flip);
        let u = Dihedral::new(rot2, flip2);
        prop_assert_eq!(t.inverse().apply(&t.apply(&x)), x.clone());
        prop_assert_eq!(u.compose(t).apply(&x), u.apply(&t.apply(&x)));
    }

    #[test]
    fn crop_origins_stay_inside(h in 4usize..40, w in 4usize..40, half in 1usize..3, stride in 1usize..9) {
        let cfg = CropConfig { crop_size: 2 * half, stride, flip: true };
        let o = crop_origins(h, w, &cfg).unwrap();
        let per_axis = |n: usize| (n - cfg.crop_size) / stride + 1;
        prop_assert_eq!(o.len(), per_axis(h) * per_axis(w));
        for (y, x) in o {
            prop_assert!(y + cfg.crop_size <= h && x + cfg.crop_size <= w);
            prop_assert_eq!(y % stride, 0);
            prop_assert_eq!(x % stride, 0);
        }
    }

    #[test]
    fn match_argmax_ignores_scale_and_delta(
        e in prop::collection::vec(-1.0f64..1.0, 5),
        d in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 3),
        scale in 1e-3f64..1e3,
        delta in 1e-2f64..50.0,
    ) {
        prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
        prop_assume!(d.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
        let ds: Vec<_> = d.into_iter().map(descriptor).collect();
        let e_v = Tensor::vector(e.clone());
        let e_s = Tensor::vector(e.iter().map(|v| v * scale).collect());
        let (best, _) = match_descriptor(&e_v, &ds, 10.0).unwrap();
        prop_assert_eq!(match_descriptor(&e_s, &ds, 10.0).unwrap().0, best);
        prop_assert_eq!(match_descriptor(&e_v, &ds, delta).unwrap().0, best);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded((a, b) in pair(vec![12, 12, 3])) {
        let ab = ssim_value(&a, &b).unwrap();
        let ba = ssim_value(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim_value(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_mse((a, b) in pair(vec![4, 4, 3])) {
        let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 48.0;
        let p = psnr(&a, &b).unwrap();
        prop_assert!((p - (-10.0 * mse.log10()).min(99.0)).abs() < 1e-9);
    }

    #[test]
    fn manifest_round_trip(labels in prop::collection::vec(0usize..8, 1..10)) {
        let all = [
            ExposureLabel::N15, ExposureLabel::N1, ExposureLabel::Zero, ExposureLabel::P1,
            ExposureLabel::P15, ExposureLabel::Under, ExposureLabel::Over, ExposureLabel::Gt,
        ];
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.png"), b"").unwrap();
        let m = DatasetManifest {
            root: ".".into(),
            entries: labels.iter().map(|&i| ManifestEntry { input: "x.png".into(), gt: "x.png".into(), label: all[i] }).collect(),
        };
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        prop_assert_eq!(DatasetManifest::load(&path).unwrap().entries, m.entries);
    }

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20), seed: u64) {
        use wecdg::checkpoint::{Checkpoint, CheckpointHeader};
        let mut params = ParameterTree::new(seed);
        params.insert("w", Tensor::vector(values));
        let c = Checkpoint { header: CheckpointHeader::Sdgm { sdgm: Default::default() }, params };
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes, std::path::Path::new("p")).unwrap(), c);
    }
}
