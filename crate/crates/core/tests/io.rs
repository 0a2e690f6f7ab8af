use std::fs;

use proptest::prelude::*;

use ssc_core::kitti::*;

fn f32_value() -> impl Strategy<Value = f64> {
    (-1.0e4f32..1.0e4).prop_map(f64::from)
}

fn kitti_like_map() -> LabelMap {
    LabelMap::new([(10, 1), (11, 2), (40, 3), (252, 1), (99, 0)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scans_round_trip(pts in prop::collection::vec((f32_value(), f32_value(), f32_value(), 0.0f32..1.0), 0..200)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let cloud = PointCloud::new(pts.iter().map(|&(x, y, z, r)| Point::new(x, y, z, f64::from(r))).collect());
        write_scan(&path, &cloud).unwrap();
        prop_assert_eq!(fs::metadata(&path).unwrap().len() as usize, 16 * cloud.len());
        prop_assert_eq!(read_scan(&path).unwrap(), cloud);
    }

    #[test]
    fn voxel_labels_round_trip(
        ext in (1usize..9, 1usize..9, 1usize..5),
        seed in prop::collection::vec(prop_oneof![0u8..4, Just(INVALID)], 1..400),
    ) {
        let extents = [ext.0, ext.1, ext.2];
        let n: usize = extents.iter().product();
        let labels: Vec<u8> = (0..n).map(|i| seed[i % seed.len()]).collect();
        let grid = SceneLabelGrid::new(extents, labels, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for map in [LabelMap::identity(3), kitti_like_map()] {
            let path = dir.path().join("v.label");
            write_voxel_labels(&path, &grid, &map).unwrap();
            prop_assert_eq!(fs::metadata(&path).unwrap().len() as usize, 2 * n);
            prop_assert_eq!(read_voxel_labels(&path, extents, &map).unwrap(), grid.clone());
        }
    }

    #[test]
    fn point_labels_round_trip(labels in prop::collection::vec(prop_oneof![0u8..4, Just(INVALID)], 0..300)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.label");
        let map = kitti_like_map();
        write_point_labels(&path, &labels, &map).unwrap();
        prop_assert_eq!(read_point_labels(&path, &map).unwrap(), labels);
    }

    #[test]
    fn masks_round_trip(ext in (1usize..9, 1usize..9, 1usize..5), bits in any::<u64>()) {
        let extents = [ext.0, ext.1, ext.2];
        let n: usize = extents.iter().product();
        let mask: Vec<bool> = (0..n).map(|i| (bits.rotate_left(i as u32 % 64) ^ i as u64) & 1 == 1).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.invalid");
        write_invalid_mask(&path, &mask).unwrap();
        prop_assert_eq!(fs::metadata(&path).unwrap().len() as usize, n.div_ceil(8));
        prop_assert_eq!(read_invalid_mask(&path, extents).unwrap(), mask);
    }
}

#[test]
fn scan_with_partial_record_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    fs::write(&path, vec![0u8; 16 * 3 + 5]).unwrap();
    match read_scan(&path) {
        Err(IoError::Truncated { offset, len, record, .. }) => assert_eq!((offset, len, record), (48, 53, 16)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn label_file_of_wrong_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.label");
    fs::write(&path, vec![0u8; 2 * 64 - 2]).unwrap();
    match read_voxel_labels(&path, [4, 4, 4], &LabelMap::identity(3)) {
        Err(IoError::Size { expected, found, .. }) => assert_eq!((expected, found), (128, 126)),
        other => panic!("{other:?}"),
    }
    // one bit per voxel rounds up to whole bytes
    fs::write(&path, vec![0u8; 8]).unwrap();
    assert!(read_invalid_mask(&path, [4, 4, 4]).is_ok());
    assert!(matches!(read_invalid_mask(&path, [4, 4, 5]), Err(IoError::Size { expected: 10, found: 8, .. })));
}

#[test]
fn unmapped_raw_ids_read_as_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.label");
    // high 16 bits are an instance id and do not affect the class
    let raw: Vec<u8> = [0u32, 10, 77, (5 << 16) | 40, 252].iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, raw).unwrap();
    assert_eq!(read_point_labels(&path, &kitti_like_map()).unwrap(), vec![EMPTY, 1, INVALID, 3, 1]);
}

#[test]
fn label_map_reads_from_toml() {
    let map: LabelMap = toml::from_str("0 = 0\n10 = 1\n252 = 1\n44 = 2\n").unwrap();
    assert_eq!(map.to_train(252), 1);
    assert_eq!(map.to_train(44), 2);
    assert_eq!(map.to_train(45), INVALID);
    assert_eq!(map.to_raw(1), 10);
    assert_eq!(map.max_train_id(), 2);
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_scan(dir.path().join("absent.bin")).unwrap_err();
    assert!(matches!(err, IoError::Io { .. }));
    assert!(err.to_string().contains("absent.bin"));
}
