//! The bundled fixtures are exactly what the generator produces.
//! Set `TOG_REGENERATE_FIXTURES=1` to rewrite them.

use std::path::{Path, PathBuf};

use tog_core::dataset::{load_dataset, to_manifest_json};
use tog_core::raster::RgbImage;
use tog_core::synth::{mini_spec, synthetic_spec, write_fixture, FixtureSpec};

fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn check(name: &str, spec: FixtureSpec) {
    let dir = fixture_dir(name);
    if std::env::var_os("TOG_REGENERATE_FIXTURES").is_some() {
        write_fixture(&spec, &dir).unwrap();
    }
    let tmp = tempfile::tempdir().unwrap();
    let generated = write_fixture(&spec, tmp.path()).unwrap();
    let bundled = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let fresh = std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap();
    assert!(bundled == fresh, "{name}: manifest differs from generator output");
    for (rel, img) in &generated.images {
        let on_disk = RgbImage::load_png(&dir.join(rel)).unwrap();
        assert!(on_disk == *img, "{name}: {} differs", rel.display());
    }
    let loaded = load_dataset(&dir.join("manifest.json")).unwrap();
    assert_eq!(to_manifest_json(&loaded, &dir), bundled);
}

#[test]
fn mini_fixture_is_reproducible() {
    check("mini", mini_spec());
}

#[test]
fn synthetic_fixture_is_reproducible() {
    check("synthetic", synthetic_spec());
}
