use std::collections::HashSet;
use std::fs;

use fabnet_core::faces::{gen_dataset, load_dataset, DatasetSpec, Split};
use fabnet_core::Error;

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec::new(10, 2, 3, 32, seed)
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let written = gen_dataset(&small_spec(4), dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(written, loaded);
    assert_eq!(loaded.frame_count(), loaded.manifest.frame_count());
    assert_eq!(loaded.frame_count(), 10 * 2 * 3);
}

#[test]
fn splits_partition_identities() {
    let ds = fabnet_core::faces::Dataset::generate(&DatasetSpec::new(20, 1, 2, 32, 9)).unwrap();
    let mut all = HashSet::new();
    let mut sizes = Vec::new();
    for split in Split::ALL {
        let ids: HashSet<&str> = ds.manifest.identities_in(split).collect();
        sizes.push(ids.len());
        for id in &ids {
            assert!(all.insert(id.to_string()), "{id} in two splits");
        }
        for t in ds.tracks_in(split) {
            assert!(ids.contains(t.identity_id.as_str()));
        }
    }
    assert_eq!(sizes, [15, 3, 2]);
    assert_eq!(all.len(), 20);
}

#[test]
fn manifest_split_matches_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(&small_spec(5), dir.path()).unwrap();
    for (id, _) in &ds.manifest.splits {
        assert!(dir.path().join(id).is_dir(), "{id} missing on disk");
    }
    let on_disk = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(on_disk, ds.manifest.n_identities);
}

#[test]
fn truncated_label_row_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(&small_spec(6), dir.path()).unwrap();
    let labels = dir.path().join("id0003/track01/labels.csv");
    let text = fs::read_to_string(&labels).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let cut = lines[2].rfind(',').unwrap();
    lines[2].truncate(cut);
    fs::write(&labels, lines.join("\n") + "\n").unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Parse { path, line, .. }) => {
            assert_eq!(line, 3);
            assert_eq!(path, labels);
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_frame_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(&small_spec(7), dir.path()).unwrap();
    let frame = dir.path().join("id0001/track00/frame_2.ppm");
    fs::remove_file(&frame).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Io { path, .. }) => assert_eq!(path, frame),
        other => panic!("expected io error, got {other:?}"),
    }
}

#[test]
fn unwritable_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let err = gen_dataset(&small_spec(1), &blocker.join("sub")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}
