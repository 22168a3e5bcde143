//! The oracle must not link against the pipeline it checks.

#[test]
fn verifier_does_not_depend_on_core() {
    let manifest =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/Cargo.toml")).unwrap();
    let doc: toml::Table = manifest.parse().unwrap();
    for section in ["dependencies", "dev-dependencies", "build-dependencies"] {
        if let Some(deps) = doc.get(section).and_then(|d| d.as_table()) {
            for name in deps.keys() {
                assert!(
                    !name.contains("core") && !name.contains("harness"),
                    "{section} lists `{name}`"
                );
            }
        }
    }
}

#[test]
fn verifier_sources_do_not_mention_core() {
    let src = concat!(env!("CARGO_MANIFEST_DIR"), "/src");
    for entry in std::fs::read_dir(src).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(
            !text.contains("mrshare_core"),
            "{} references the pipeline crate",
            path.display()
        );
    }
}
