#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mrshare_harness::scenario::Scenario;
use mrshare_schema::ScenarioDoc;

pub const FIXTURES: [&str; 4] = [
    "office_whiteboard",
    "corridor_walk",
    "full_session",
    "no_archive",
];

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(format!("{name}.json"))
}

pub fn fixture_doc(name: &str) -> ScenarioDoc {
    ScenarioDoc::parse(&fs::read(fixture_path(name)).expect("fixture readable"))
        .expect("fixture parses")
}

pub fn fixture(name: &str) -> Scenario {
    Scenario::from_doc(fixture_doc(name)).expect("fixture validates")
}

/// Every file under `dir`, keyed by relative path.
pub fn dir_contents(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("under dir").to_path_buf();
                out.insert(rel, fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}
