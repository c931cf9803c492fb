use std::path::PathBuf;

use fewshot_ie::backend::BpeTokenizer;
use fewshot_ie::corpus::{reference_sizes, LabelSet};
use fewshot_ie::decode::label_first_tokens;
use fewshot_ie::prompt::{load_grid, MAX_GRID_SIZE};
use fewshot_ie::Task;

fn grid_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../grids")
}

#[test]
fn shipped_grids_parse_with_eight_configs() {
    let mut seen = Vec::new();
    for entry in std::fs::read_dir(grid_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|x| x != "toml") {
            continue;
        }
        let grid = load_grid(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(grid.configs.len(), MAX_GRID_SIZE, "{}", path.display());
        let max_shots = grid.configs.iter().map(|c| c.shots).max().unwrap();
        assert_eq!(max_shots, if grid.task == Task::Ner { 10 } else { 5 });

        let dataset: toml::Value = toml::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let name = dataset["dataset"].as_str().unwrap().to_string();
        assert_eq!(reference_sizes(&name).map(|r| r.0), Some(grid.task), "{name}");
        seen.push(name.clone());

        // Verbalizer phrases must start with distinct tokens under the BPE
        // vocabulary the live backend uses.
        let tok = BpeTokenizer::r50k();
        for v in grid.verbalizers.values() {
            let mut names: Vec<String> = v.phrases.keys().cloned().collect();
            names.push(v.null_label.clone());
            let labels = LabelSet::new(names, &v.null_label).unwrap();
            v.validate(&labels).unwrap();
            label_first_tokens(v, &labels, &tok).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
    seen.sort();
    assert_eq!(seen.len(), 8, "{seen:?}");
}
