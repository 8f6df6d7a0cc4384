use std::collections::BTreeSet;

use gram_core::oracles;
use gram_core::tasks::{self, TaskKind, TaskSpec};
use gram_core::GramError;

fn distinct_inputs(split: &[tasks::Instance]) -> BTreeSet<Option<Vec<usize>>> {
    split.iter().map(|r| r.input.clone()).collect()
}

#[test]
fn nqueens_dataset_is_complete_and_split_by_input() {
    let ds = tasks::gen_nqueens(5, &[4, 5], 0).unwrap();
    let train = distinct_inputs(&ds.train);
    let test = distinct_inputs(&ds.test);
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len() + test.len(), 26);
    assert_eq!(ds.meta.solution_count_histogram.get(&2), Some(&25));
    assert_eq!(ds.meta.solution_count_histogram.get(&10), Some(&1));
    for r in ds.train.iter().chain(&ds.test) {
        let set = &ds.solution_sets[r.set_id];
        assert!(set.contains(&r.target));
        let clues = tasks::decode_nqueens(r.input.as_ref().unwrap()).unwrap();
        // the set is exactly the brute-force completion set
        let all: BTreeSet<Vec<usize>> =
            oracles::nqueens_backtrack(5, &clues).unwrap().iter().map(|s| tasks::encode_nqueens(&oracles::queens_to_board(5, s))).collect();
        assert_eq!(set.iter().cloned().collect::<BTreeSet<_>>(), all);
    }
    // one record per (input, completion)
    assert_eq!(ds.train.len() + ds.test.len(), 25 * 2 + 10);
}

#[test]
fn six_by_six_inputs_are_single_solution() {
    let ds = tasks::gen_nqueens(6, &[2, 3], 0).unwrap();
    assert_eq!(ds.meta.solution_count_histogram.keys().copied().collect::<Vec<_>>(), vec![1]);
    assert_eq!(ds.meta.train_inputs + ds.meta.test_inputs, 4 * (15 + 20));
}

#[test]
fn trivial_and_large_boards() {
    let one = tasks::gen_nqueens(1, &[1], 0).unwrap();
    assert_eq!(one.solution_sets.len(), 1);
    assert_eq!(one.solution_sets[0].len(), 1);
    let ds = tasks::gen_nqueens(8, &[8], 0).unwrap();
    assert_eq!(ds.solution_sets.len(), 1);
    assert_eq!(ds.solution_sets[0].len(), 92);
    assert!(tasks::gen_nqueens(4, &[0], 0).is_err());
    assert!(tasks::gen_nqueens(4, &[5], 0).is_err());
}

#[test]
fn generation_is_seed_deterministic() {
    let a = tasks::gen_nqueens(5, &[4], 3).unwrap();
    let b = tasks::gen_nqueens(5, &[4], 3).unwrap();
    assert_eq!(a, b);
    let (c, rc) = tasks::gen_graph_coloring(6, 0.5, 20, 3).unwrap();
    let (d, rd) = tasks::gen_graph_coloring(6, 0.5, 20, 3).unwrap();
    assert_eq!((c, rc), (d, rd));
    let (e, _) = tasks::gen_graph_coloring(6, 0.5, 20, 4).unwrap();
    let (f, _) = tasks::gen_graph_coloring(6, 0.5, 20, 3).unwrap();
    assert_ne!(e.solution_sets, f.solution_sets);
}

#[test]
fn coloring_sets_match_enumeration() {
    let (ds, _) = tasks::gen_graph_coloring(6, tasks::default_edge_prob(6), 30, 1).unwrap();
    assert!(distinct_inputs(&ds.train).is_disjoint(&distinct_inputs(&ds.test)));
    assert_eq!(ds.solution_sets.len(), 30);
    for r in ds.train.iter().chain(&ds.test) {
        let g = tasks::decode_graph(6, r.input.as_ref().unwrap());
        let colorings = oracles::enumerate_colorings(&g, 3).unwrap();
        let expected: Vec<Vec<usize>> = colorings.iter().map(|c| tasks::encode_colors(c)).collect();
        assert_eq!(ds.solution_sets[r.set_id], expected);
        assert_eq!(oracles::coloring_conflicts(&g, &tasks::decode_colors(6, &r.target)), 0);
    }
    assert!(tasks::gen_graph_coloring(6, 1.5, 3, 0).is_err());
}

#[test]
fn sudoku_generators() {
    let ds = tasks::gen_sudoku_unconditional(20, 0).unwrap();
    assert!(ds.test.is_empty());
    assert_eq!(ds.train.len(), 20);
    let boards: BTreeSet<_> = ds.train.iter().map(|r| r.target.clone()).collect();
    assert_eq!(boards.len(), 20);
    assert!(ds.train.iter().all(|r| r.input.is_none()));
    assert!(boards.iter().all(|b| oracles::sudoku_valid(&tasks::decode_sudoku(b).unwrap())));
    // each unconditional board is its own evaluation item
    assert_eq!(ds.eval_items(&ds.train).len(), 20);

    let ds = tasks::gen_sudoku_conditional(5, 40, 0).unwrap();
    assert!(ds.meta.synthetic_stand_in);
    for r in ds.train.iter().chain(&ds.test) {
        let puzzle = tasks::decode_sudoku(r.input.as_ref().unwrap()).unwrap();
        assert!(puzzle.iter().filter(|&&c| c != 0).count() >= 40);
        assert_eq!(oracles::sudoku_count_solutions(&puzzle, 2), 1);
        assert!(oracles::is_valid_prediction(&ds.spec, r.input.as_deref(), &r.target));
    }
    assert!(tasks::gen_sudoku_conditional(1, 16, 0).is_err());
}

#[test]
fn save_load_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (name, ds) in [
        ("q", tasks::gen_nqueens(5, &[4, 5], 2).unwrap()),
        ("c", tasks::gen_graph_coloring(5, 0.7, 6, 2).unwrap().0),
        ("u", tasks::gen_sudoku_unconditional(3, 2).unwrap()),
    ] {
        let a = dir.path().join(format!("{name}a"));
        let b = dir.path().join(format!("{name}b"));
        tasks::save_dataset(&ds, &a).unwrap();
        let back = tasks::load_dataset(&a).unwrap();
        assert_eq!(back, ds);
        tasks::save_dataset(&back, &b).unwrap();
        for f in ["train.txt", "test.txt", "solutions.txt", "metadata.json"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{name}/{f}");
        }
    }
}

#[test]
fn vocabulary_violations_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tasks::gen_nqueens(4, &[4], 0).unwrap();
    tasks::save_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join("train.txt");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[2] = lines[2].replacen('2', "7", 1);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    match tasks::load_dataset(dir.path()) {
        Err(GramError::Data(msg)) => assert!(msg.contains("train.txt:3"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
    lines[2] = "1 1;2 2;0".into();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(matches!(tasks::load_dataset(dir.path()), Err(GramError::Data(_))));
    std::fs::remove_file(&path).unwrap();
    assert!(matches!(tasks::load_dataset(dir.path()), Err(GramError::Io(_))));
}

#[test]
fn task_spec_lengths_and_padding() {
    let c = TaskSpec::new(TaskKind::Coloring { n: 5 }).unwrap();
    assert_eq!((c.input_len, c.target_len, c.seq_len), (10, 5, 10));
    let padded = c.pad(&[3, 4, 5, 3, 4]);
    assert_eq!(padded, vec![3, 4, 5, 3, 4, 0, 0, 0, 0, 0]);
    let u = TaskSpec::from_name("sudoku-uncond").unwrap();
    assert!(!u.conditional);
    assert_eq!(TaskSpec::from_name("nqueens-6").unwrap().kind, TaskKind::NQueens { n: 6 });
    let q = TaskSpec::from_name("nqueens-4").unwrap();
    assert!(q.check_target(&[1; 16]).is_ok());
    assert!(q.check_target(&[1; 15]).is_err());
    assert!(q.check_target(&[3; 16]).is_err());
}

#[test]
fn eval_items_deduplicate_inputs_in_order() {
    let ds = tasks::gen_nqueens(5, &[4], 0).unwrap();
    let items = ds.eval_items(&ds.train);
    assert_eq!(items.len(), ds.meta.train_inputs);
    let mut seen = Vec::new();
    for r in &ds.train {
        if !seen.contains(&r.input) {
            seen.push(r.input.clone());
        }
    }
    assert_eq!(items.iter().map(|i| i.input.clone()).collect::<Vec<_>>(), seen);
    assert_eq!(ds.examples(&ds.train).len(), ds.train.len());
}

#[test]
fn unknown_split_is_a_usage_error() {
    let ds = tasks::gen_nqueens(4, &[4], 0).unwrap();
    assert!(matches!(ds.split("val"), Err(GramError::Usage(_))));
    assert_eq!(ds.split("train").unwrap().len(), ds.train.len());
}
