use std::io::Cursor;
use std::sync::Arc;

use gridflow_core::dataset::{
    export_dataset, generate_maze, generate_scenario, read_meta, read_records, Recipe, RecordReader, LOG_FILE,
    SAMPLES_FILE,
};
use gridflow_core::features::{CHANNEL_ORDER, NUM_CHANNELS};
use gridflow_core::grid::{components, is_connected, parse_map, render_map};
use gridflow_core::mapf::{instance_from_scen, parse_scen, render_scen, scen_from_instance};

#[test]
fn generated_mazes_survive_a_map_file_round_trip() {
    for seed in 0..100 {
        let density = 0.3 + (seed % 6) as f64 * 0.1;
        let braid = (seed % 5) as f64 * 0.1;
        let maze = generate_maze(32, 32, density, braid, seed);
        assert!(is_connected(&maze), "seed {seed}");
        let parsed = parse_map(&render_map(&maze)).unwrap();
        assert_eq!(parsed, maze, "seed {seed}");
    }
}

#[test]
fn generated_instances_satisfy_invariants() {
    for seed in 0..1000u64 {
        let map = Arc::new(generate_maze(16, 16, 0.3 + (seed % 6) as f64 * 0.1, 0.25, seed));
        let agents = 1 + (seed % 24) as usize;
        let inst = generate_scenario(format!("i{seed}"), map.clone(), agents, seed ^ 0xabc).unwrap();
        let comp = components(&map);
        let mut starts = inst.starts().to_vec();
        let mut goals = inst.goals().to_vec();
        for (s, g) in starts.iter().zip(&goals) {
            assert!(map.is_free(*s) && map.is_free(*g));
            assert_eq!(comp[map.index(*s)], comp[map.index(*g)]);
        }
        starts.sort();
        starts.dedup();
        goals.sort();
        goals.dedup();
        assert_eq!(starts.len(), agents);
        assert_eq!(goals.len(), agents);
    }
}

#[test]
fn scenario_files_round_trip() {
    let map = Arc::new(generate_maze(16, 16, 0.5, 0.2, 3));
    let inst = generate_scenario("s", map.clone(), 10, 9).unwrap();
    let text = render_scen(&scen_from_instance(&inst, "maze.map"));
    let back = instance_from_scen("s", map, &parse_scen(&text).unwrap(), None).unwrap();
    assert_eq!(back, inst);
}

#[test]
fn exported_dataset_matches_its_meta() {
    let dir = tempfile::tempdir().unwrap();
    let mut recipe = Recipe::desk(5);
    if let gridflow_core::dataset::MapSource::Generate { count, .. } = &mut recipe.maps {
        *count = 3;
    }
    let meta = export_dataset(&recipe, dir.path(), dir.path(), 2, None).unwrap();
    assert_eq!(read_meta(dir.path()).unwrap(), meta);
    assert!(dir.path().join(LOG_FILE).exists());

    let records = read_records(&dir.path().join(SAMPLES_FILE)).unwrap();
    assert_eq!(records.len() as u64, meta.sample_count);
    assert_eq!(meta.k, NUM_CHANNELS);
    assert_eq!(meta.channel_order, CHANNEL_ORDER.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let mut next = 0;
    for inst in &meta.instances {
        assert_eq!(inst.first_sample, next);
        next += inst.num_samples;
    }
    assert_eq!(next, meta.sample_count);
    for r in &records {
        let (n, m, k) = r.features.shape();
        assert_eq!((n, m, k), (16, 16, NUM_CHANNELS));
        assert_eq!(r.labels.len(), n * m);
        assert!(r.labels.iter().all(|&l| l <= 4 || l == 255));
    }
}

#[test]
fn truncated_record_stream_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut recipe = Recipe::desk(1);
    if let gridflow_core::dataset::MapSource::Generate { count, .. } = &mut recipe.maps {
        *count = 1;
    }
    export_dataset(&recipe, dir.path(), dir.path(), 1, None).unwrap();
    let bytes = std::fs::read(dir.path().join(SAMPLES_FILE)).unwrap();
    let cut = &bytes[..bytes.len() - 3];
    let results: Vec<_> = RecordReader::new(Cursor::new(cut)).collect();
    assert!(results.last().unwrap().is_err());
    assert!(results[..results.len() - 1].iter().all(|r| r.is_ok()));
}
