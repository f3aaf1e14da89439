use maskscope::manifest::load_manifest;
use maskscope::objstats::NUM_OBJECTS;
use maskscope::synth::*;
use maskscope::tensor_io::read_tensor_file;

#[test]
fn fixture_has_exporter_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { images_per_class: 3, ..SynthConfig::default() };
    let manifest = generate_fixture(dir.path(), &cfg).unwrap();
    assert_eq!(manifest, dir.path().join("manifest.json"));

    let m = load_manifest(&manifest).unwrap();
    assert_eq!(m.class_counts(), vec![3, 3]);
    assert_eq!(m.models, ["deep", "deep_retrained", "shallow"]);
    assert_eq!(m.conv_shapes["deep"], [8, 8, 8]);
    assert_eq!(m.conv_shapes["shallow"], [4, 4, 4]);
    assert!(dir.path().join("tensors/deep/city_a_000.act.tnsr").is_file());
    assert!(dir.path().join("images/city_b_002.png").is_file());

    let names = std::fs::read_to_string(dir.path().join("names.txt")).unwrap();
    assert_eq!(names.lines().count(), NUM_OBJECTS);
    assert_eq!(names.lines().nth(SKYSCRAPER as usize), Some("skyscraper"));
}

#[test]
fn planted_objects_belong_to_their_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { images_per_class: 4, ..SynthConfig::default() };
    let m = load_manifest(generate_fixture(dir.path(), &cfg).unwrap()).unwrap();
    for e in &m.entries {
        let seg = read_tensor_file(&e.segmentation_path).unwrap().to_array2_u16().unwrap();
        let count = |l: u16| seg.iter().filter(|&&v| v == l).count();
        let (mine, other) = if e.class_index == 0 { (SKYSCRAPER, SIGNBOARD) } else { (SIGNBOARD, SKYSCRAPER) };
        assert!(count(mine) > 100, "{}", e.id);
        assert_eq!(count(other), 0, "{}", e.id);
    }
}

#[test]
fn generation_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig { images_per_class: 2, ..SynthConfig::default() };
    generate_fixture(a.path(), &cfg).unwrap();
    generate_fixture(b.path(), &cfg).unwrap();
    for rel in ["manifest.json", "segmentation/city_a_001.tnsr", "tensors/shallow/city_b_000.grad.tnsr", "images/city_a_000.png"] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn rejects_bad_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { image_size: (40, 64), ..SynthConfig::default() };
    assert!(matches!(generate_fixture(dir.path(), &cfg), Err(SynthError::Config(_))));
}
