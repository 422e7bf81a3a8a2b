use std::path::Path;

use odeformer::config::RunConfig;
use odeformer::studies::Study;

#[test]
fn shipped_configs_match_study_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for study in Study::ALL {
        let path = dir.join(format!("{study}.conf"));
        let loaded = RunConfig::default().load(&path).unwrap();
        assert_eq!(loaded, study.defaults(), "{}", path.display());
        loaded.validate().unwrap();
    }
}

#[test]
fn partial_file_keeps_other_defaults() {
    let base = Study::CopyTask.defaults();
    let cfg = base.clone().apply("seeds = 5\nvariants = rk4, euler\n").unwrap();
    assert_eq!(cfg.study.seeds, vec![5]);
    assert_eq!(cfg.study.variants.len(), 2);
    assert_eq!(cfg.train, base.train);
}
