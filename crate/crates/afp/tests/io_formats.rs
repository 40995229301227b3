use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use afp::checkpoint::{load_checkpoint, save_checkpoint, weights_path};
use afp::io::*;
use afp::AppError;
use afp_core::segnet::{build_segmenter, Fingerprint, SegModel, UNetConfig};
use afp_core::{Geometry, LabelVolume, Modality, Volume};
use proptest::prelude::*;

fn volume(data: Vec<f32>, shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Volume {
    Volume::new(
        data,
        shape,
        Geometry::new(spacing, origin).unwrap(),
        Modality::Mr,
    )
    .unwrap()
}

fn nifti_header(dims: &[i16], datatype: i16, bitpix: i16, pixdim: [f32; 3]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (i, d) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    for (i, p) in pixdim.iter().enumerate() {
        h[80 + 4 * i..84 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn raw_json_round_trip_is_exact(
        shape in prop::array::uniform3(1usize..6),
        spacing in prop::array::uniform3(0.1f64..3.0),
        origin in prop::array::uniform3(-50.0f64..50.0),
        seed in any::<u64>(),
    ) {
        let n = shape.iter().product::<usize>();
        let data: Vec<f32> = (0..n).map(|i| (((seed.wrapping_add(i as u64)).wrapping_mul(2654435761) % 10007) as f32 - 5000.0) * 0.37).collect();
        let v = volume(data, shape, spacing, origin);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        save_volume(&v, &p, None).unwrap();
        let back = load_volume(&p).unwrap();
        prop_assert_eq!(back, v);
    }
}

#[test]
fn nifti_round_trip_plain_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..60).map(|i| i as f32 * 1.25 - 7.0).collect();
    let v = volume(data, [3, 4, 5], [0.6, 0.6, 0.6], [1.0, -2.0, 3.5]);
    for name in ["a.nii", "a.nii.gz"] {
        let p = dir.path().join(name);
        save_volume(&v, &p, None).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(back.shape(), v.shape());
        assert_eq!(back.spacing(), [0.6f32 as f64; 3]);
        assert_eq!(back.origin(), [1.0, -2.0, 3.5]);
        assert_eq!(back.modality(), Modality::Mr);
    }
    let gz = fs::read(dir.path().join("a.nii.gz")).unwrap();
    assert_eq!(&gz[..2], &[0x1f, 0x8b]);
}

#[test]
fn zero_volume_decodes_to_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::filled([2, 2, 2], 0.0, Geometry::isotropic(1.0), Modality::Ct).unwrap();
    for name in ["z.nii", "z.json"] {
        let p = dir.path().join(name);
        save_volume(&v, &p, None).unwrap();
        assert_eq!(load_volume(&p).unwrap().data(), &[0.0; 8]);
    }
    let raw = fs::read(dir.path().join("z.raw")).unwrap();
    assert_eq!(raw, vec![0u8; 32]);
}

#[test]
fn handwritten_sidecar_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.json"),
        r#"{"shape": [4, 4, 4], "spacing": [2, 1, 1]}"#,
    )
    .unwrap();
    let blob: Vec<u8> = (0..64).flat_map(|i| (i as f32).to_le_bytes()).collect();
    fs::write(dir.path().join("s.raw"), blob).unwrap();
    let v = load_volume(&dir.path().join("s.json")).unwrap();
    assert_eq!(v.spacing(), [2.0, 1.0, 1.0]);
    assert_eq!(v.shape(), [4, 4, 4]);
    assert_eq!(v.get(1, 2, 3), 27.0);
    assert_eq!(v.modality(), Modality::Other);
}

#[test]
fn foreign_nifti_header_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = nifti_header(&[3, 8, 8, 8, 1, 1, 1, 1], 4, 16, [1.0, 1.0, 1.0]);
    bytes.extend((0..512).flat_map(|i| (i as i16 - 100).to_le_bytes()));
    let p = dir.path().join("int16.nii");
    fs::write(&p, bytes).unwrap();
    let v = load_volume(&p).unwrap();
    assert_eq!(v.shape(), [8, 8, 8]);
    assert_eq!(v.spacing(), [1.0, 1.0, 1.0]);
    assert_eq!(v.get(0, 0, 5), -95.0);
    assert_eq!(v.get(1, 0, 0), -100.0 + 64.0);
}

#[test]
fn big_endian_and_scaled_headers() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = nifti_header(&[3, 2, 1, 1, 1, 1, 1, 1], 16, 32, [0.5, 1.0, 2.0]);
    h[112..116].copy_from_slice(&2f32.to_le_bytes());
    h[116..120].copy_from_slice(&1f32.to_le_bytes());
    // swap every multi-byte header field we set
    let mut be = h.clone();
    let swap = |b: &mut Vec<u8>, at: usize, w: usize| b[at..at + w].reverse();
    swap(&mut be, 0, 4);
    for i in 0..8 {
        swap(&mut be, 40 + 2 * i, 2);
    }
    swap(&mut be, 70, 2);
    swap(&mut be, 72, 2);
    for i in 0..8 {
        swap(&mut be, 76 + 4 * i, 4);
    }
    for at in [108, 112, 116] {
        swap(&mut be, at, 4);
    }
    be.extend(3f32.to_be_bytes());
    be.extend((-1f32).to_be_bytes());
    let p = dir.path().join("be.nii");
    fs::write(&p, be).unwrap();
    let v = load_volume(&p).unwrap();
    assert_eq!(v.shape(), [1, 1, 2]);
    assert_eq!(v.spacing(), [2.0, 1.0, 0.5]);
    assert_eq!(v.data(), &[7.0, -1.0]);
}

#[test]
fn four_dimensional_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = nifti_header(&[4, 2, 2, 2, 3, 1, 1, 1], 16, 32, [1.0; 3]);
    bytes.extend(vec![0u8; 4 * 24]);
    let p = dir.path().join("4d.nii");
    fs::write(&p, bytes).unwrap();
    assert!(matches!(load_volume(&p), Err(AppError::Non3dData { .. })));
    let mut bytes = nifti_header(&[4, 2, 2, 2, 1, 1, 1, 1], 16, 32, [1.0; 3]);
    bytes.extend(vec![0u8; 4 * 8]);
    fs::write(&p, bytes).unwrap();
    assert_eq!(load_volume(&p).unwrap().shape(), [2, 2, 2]);
}

#[test]
fn non_finite_voxels_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nan.nii");
    let v = volume(vec![1.0; 27], [3, 3, 3], [1.0; 3], [0.0; 3]);
    save_volume(&v, &p, None).unwrap();
    let mut bytes = fs::read(&p).unwrap();
    for k in [0usize, 5, 26] {
        bytes[352 + 4 * k..356 + 4 * k].copy_from_slice(&f32::NAN.to_le_bytes());
    }
    bytes[352 + 4 * 7..356 + 4 * 7].copy_from_slice(&f32::INFINITY.to_le_bytes());
    fs::write(&p, bytes).unwrap();
    match load_volume(&p) {
        Err(AppError::NonFiniteValues { count, .. }) => assert_eq!(count, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unreadable_and_unwritable_paths() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_volume(&dir.path().join("missing.nii")),
        Err(AppError::UnreadableFile { .. })
    ));
    fs::write(dir.path().join("junk.nii"), b"definitely not nifti").unwrap();
    assert!(matches!(
        load_volume(&dir.path().join("junk.nii")),
        Err(AppError::UnreadableFile { .. })
    ));
    assert!(matches!(
        load_volume(Path::new("x.mha")),
        Err(AppError::UnreadableFile { .. })
    ));
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let v = volume(vec![0.0], [1, 1, 1], [1.0; 3], [0.0; 3]);
    assert!(matches!(
        save_volume(&v, &blocker.join("v.nii"), None),
        Err(AppError::UnwritablePath { .. })
    ));
}

#[test]
fn labels_round_trip_with_names() {
    let dir = tempfile::tempdir().unwrap();
    let names: BTreeMap<u32, String> = [(1, "tube".into()), (3, "shaft".into())]
        .into_iter()
        .collect();
    let l = LabelVolume::new(
        vec![0, 1, 3, 1, 0, 3, 3, 0],
        [2, 2, 2],
        Geometry::isotropic(0.6),
        names.clone(),
    )
    .unwrap();
    let p = dir.path().join("l.json");
    save_labels(&l, &p, None).unwrap();
    assert_eq!(load_labels(&p).unwrap(), l);
    let p = dir.path().join("l.nii.gz");
    save_labels(&l, &p, None).unwrap();
    let back = load_labels(&p).unwrap();
    assert_eq!(back.labels(), l.labels());
    assert_eq!(
        back.label_names().keys().copied().collect::<Vec<_>>(),
        vec![1, 3]
    );
}

#[test]
fn fractional_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.json");
    save_volume(
        &volume(vec![0.0, 0.5], [1, 1, 2], [1.0; 3], [0.0; 3]),
        &p,
        None,
    )
    .unwrap();
    assert!(matches!(
        load_labels(&p),
        Err(AppError::UnreadableFile { .. })
    ));
}

#[test]
fn checkpoints_round_trip_and_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_segmenter::<f32>(&UNetConfig::default(), 5).unwrap();
    let fp = Fingerprint {
        dataset_hash: "d".into(),
        seed: 5,
        epoch: 0,
    };
    let prov = Provenance {
        config_hash: "c".into(),
        seed: 5,
    };
    let p = dir.path().join("seg.json");
    save_checkpoint(&model.checkpoint(fp.clone()), "segmenter", &prov, &p).unwrap();
    let (ckpt, back_prov) = load_checkpoint::<UNetConfig>(&p, "segmenter").unwrap();
    assert_eq!(back_prov, prov);
    assert_eq!(ckpt.fingerprint, fp);
    assert_eq!(SegModel::<f32>::from_checkpoint(&ckpt).unwrap(), model);
    assert!(load_checkpoint::<UNetConfig>(&p, "translator").is_err());
    let bin = weights_path(&p);
    let mut blob = fs::read(&bin).unwrap();
    blob[10] ^= 1;
    fs::write(&bin, blob).unwrap();
    assert!(matches!(
        load_checkpoint::<UNetConfig>(&p, "segmenter"),
        Err(AppError::UnreadableFile { .. })
    ));
}

#[test]
fn alignment_tolerance() {
    let a = volume(vec![0.0; 8], [2, 2, 2], [1.0; 3], [0.0; 3]);
    assert!(afp_core::volume::check_alignment(&a, &a, 1e-3));
    let b = volume(vec![0.0; 8], [2, 2, 2], [1.5, 1.0, 1.0], [0.0; 3]);
    assert!(!afp_core::volume::check_alignment(&a, &b, 1e-3));
    let c = volume(vec![0.0; 8], [2, 2, 2], [1.000001, 1.0, 1.0], [0.0; 3]);
    assert!(afp_core::volume::check_alignment(&a, &c, 1e-3));
}
