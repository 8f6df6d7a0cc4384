//! Task encodings, dataset generators and the on-disk dataset format.
//!
//! Token conventions: 0 is padding everywhere. Sudoku uses 1 for blank and
//! `d + 1` for digit `d`. N-Queens uses 1 for an empty square and 2 for a
//! queen. Graph colouring inputs use 1/2 for no-edge/edge over the strict
//! upper triangle and targets use 3..=5 for the three colours.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::numerics::rng::labels;
use crate::numerics::RngStream;
use crate::oracles::{self, Graph};
use crate::trainer::Example;

pub const TEST_FRACTION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum TaskKind {
    Sudoku,
    SudokuUnconditional,
    NQueens { n: usize },
    Coloring { n: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Tokens in the raw input (0 for unconditional tasks).
    pub input_len: usize,
    /// Tokens in the raw target.
    pub target_len: usize,
    /// Model sequence length: both sides are zero-padded to this.
    pub seq_len: usize,
    pub vocab: usize,
    pub conditional: bool,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Result<Self> {
        let (name, input_len, target_len, vocab, conditional) = match kind {
            TaskKind::Sudoku => ("sudoku".to_string(), 81, 81, 11, true),
            TaskKind::SudokuUnconditional => ("sudoku-uncond".to_string(), 0, 81, 11, false),
            TaskKind::NQueens { n } => {
                if n == 0 || n > 10 {
                    return Err(GramError::config(format!("n-queens board size must be in 1..=10, got {n}")));
                }
                (format!("nqueens-{n}"), n * n, n * n, 3, true)
            }
            TaskKind::Coloring { n } => {
                if !(2..=10).contains(&n) {
                    return Err(GramError::config(format!("graph size must be in 2..=10, got {n}")));
                }
                (format!("coloring-{n}"), n * (n - 1) / 2, n, 6, true)
            }
        };
        Ok(TaskSpec { name, kind, input_len, target_len, seq_len: input_len.max(target_len), vocab, conditional })
    }

    /// Parses `sudoku`, `sudoku-uncond`, `nqueens-N` or `coloring-N`.
    pub fn from_name(name: &str) -> Result<Self> {
        let kind = match name {
            "sudoku" => TaskKind::Sudoku,
            "sudoku-uncond" => TaskKind::SudokuUnconditional,
            _ => {
                let (family, size) = name.rsplit_once('-').ok_or_else(|| GramError::config(format!("unknown task `{name}`")))?;
                let n: usize = size.parse().map_err(|_| GramError::config(format!("bad size in task `{name}`")))?;
                match family {
                    "nqueens" => TaskKind::NQueens { n },
                    "coloring" => TaskKind::Coloring { n },
                    _ => return Err(GramError::config(format!("unknown task `{name}`"))),
                }
            }
        };
        TaskSpec::new(kind)
    }

    pub fn pad(&self, tokens: &[usize]) -> Vec<usize> {
        let mut out = tokens.to_vec();
        out.resize(self.seq_len, 0);
        out
    }

    /// Checks lengths and that no raw token is padding or out of vocabulary.
    pub fn check_record(&self, input: Option<&[usize]>, target: &[usize]) -> std::result::Result<(), String> {
        match (input, self.conditional) {
            (Some(x), true) => {
                if x.len() != self.input_len {
                    return Err(format!("input has {} tokens, expected {}", x.len(), self.input_len));
                }
                let (lo, hi) = self.input_range();
                if let Some(t) = x.iter().find(|t| !(lo..=hi).contains(*t)) {
                    return Err(format!("input token {t} outside {lo}..={hi}"));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err("unconditional task record carries an input".into()),
            (None, true) => return Err("conditional task record has no input".into()),
        }
        self.check_target(target)
    }

    pub fn check_target(&self, target: &[usize]) -> std::result::Result<(), String> {
        if target.len() != self.target_len {
            return Err(format!("target has {} tokens, expected {}", target.len(), self.target_len));
        }
        let (lo, hi) = self.target_range();
        if let Some(t) = target.iter().find(|t| !(lo..=hi).contains(*t)) {
            return Err(format!("target token {t} outside {lo}..={hi}"));
        }
        Ok(())
    }

    fn input_range(&self) -> (usize, usize) {
        match self.kind {
            TaskKind::Sudoku | TaskKind::SudokuUnconditional => (1, 10),
            TaskKind::NQueens { .. } | TaskKind::Coloring { .. } => (1, 2),
        }
    }

    fn target_range(&self) -> (usize, usize) {
        match self.kind {
            TaskKind::Sudoku | TaskKind::SudokuUnconditional => (2, 10),
            TaskKind::NQueens { .. } => (1, 2),
            TaskKind::Coloring { .. } => (3, 5),
        }
    }
}

// ---------------------------------------------------------------- encodings

/// Row-major board with 0 for blank and 1..9 for digits.
pub fn encode_sudoku(board: &[u8]) -> Result<Vec<usize>> {
    if board.len() != 81 {
        return Err(GramError::data(format!("sudoku board has {} cells, expected 81", board.len())));
    }
    board
        .iter()
        .map(|&c| match c {
            0 => Ok(1),
            1..=9 => Ok(c as usize + 1),
            _ => Err(GramError::data(format!("invalid sudoku cell value {c}"))),
        })
        .collect()
}

pub fn decode_sudoku(tokens: &[usize]) -> Result<Vec<u8>> {
    if tokens.len() != 81 {
        return Err(GramError::data(format!("sudoku sequence has {} tokens, expected 81", tokens.len())));
    }
    tokens
        .iter()
        .map(|&t| match t {
            1 => Ok(0),
            2..=10 => Ok((t - 1) as u8),
            _ => Err(GramError::data(format!("invalid sudoku token {t}"))),
        })
        .collect()
}

pub fn encode_nqueens(board: &[bool]) -> Vec<usize> {
    board.iter().map(|&q| if q { 2 } else { 1 }).collect()
}

/// `None` if any token is not 1 or 2.
pub fn decode_nqueens(tokens: &[usize]) -> Option<Vec<bool>> {
    tokens
        .iter()
        .map(|&t| match t {
            1 => Some(false),
            2 => Some(true),
            _ => None,
        })
        .collect()
}

/// Strict upper triangle, row-major over pairs `(i, j)` with `i < j`.
pub fn encode_graph(g: &Graph) -> Vec<usize> {
    let mut out = Vec::with_capacity(g.n * (g.n - 1) / 2);
    for i in 0..g.n {
        for j in i + 1..g.n {
            out.push(if g.has_edge(i, j) { 2 } else { 1 });
        }
    }
    out
}

/// Any token other than 2 reads as "no edge".
pub fn decode_graph(n: usize, tokens: &[usize]) -> Graph {
    let mut g = Graph::empty(n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if tokens.get(k) == Some(&2) {
                g.add_edge(i, j);
            }
            k += 1;
        }
    }
    g
}

pub fn encode_colors(colors: &[usize]) -> Vec<usize> {
    colors.iter().map(|&c| c + 3).collect()
}

/// Colour tokens 3..=5 map to 0..=2; anything else is `None`.
pub fn decode_colors(n: usize, tokens: &[usize]) -> Vec<Option<usize>> {
    (0..n).map(|i| tokens.get(i).copied().filter(|t| (3..=5).contains(t)).map(|t| t - 3)).collect()
}

// ------------------------------------------------------------------ dataset

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub input: Option<Vec<usize>>,
    pub target: Vec<usize>,
    pub set_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: TaskSpec,
    pub seed: u64,
    pub generator: BTreeMap<String, serde_json::Value>,
    /// Unique inputs per split.
    pub train_inputs: usize,
    pub test_inputs: usize,
    pub train_records: usize,
    pub test_records: usize,
    /// Unique inputs keyed by the size of their solution set.
    pub solution_count_histogram: BTreeMap<usize, usize>,
    pub synthetic_stand_in: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    /// All valid targets per set id, in canonical form.
    pub solution_sets: Vec<Vec<Vec<usize>>>,
    pub meta: DatasetMeta,
}

/// One entry per distinct input, as used for sampling-based evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub input: Option<Vec<usize>>,
    pub set_id: usize,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Instance]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            _ => Err(GramError::usage(format!("unknown split `{name}` (train or test)"))),
        }
    }

    /// Padded training pairs for the trainer.
    pub fn examples(&self, split: &[Instance]) -> Vec<Example> {
        split.iter().map(|r| Example { input: r.input.as_ref().map(|x| self.spec.pad(x)), target: self.spec.pad(&r.target) }).collect()
    }

    /// Distinct inputs of a split in first-appearance order, padded to the
    /// model length. Unconditional records each count as their own item.
    pub fn eval_items(&self, split: &[Instance]) -> Vec<EvalItem> {
        let mut seen = BTreeSet::new();
        split
            .iter()
            .filter(|r| r.input.is_none() || seen.insert(r.input.clone()))
            .map(|r| EvalItem { input: r.input.as_ref().map(|x| self.spec.pad(x)), set_id: r.set_id })
            .collect()
    }
}

/// Assembles records into a dataset, splitting by distinct input.
fn assemble(
    spec: TaskSpec,
    seed: u64,
    generator: BTreeMap<String, serde_json::Value>,
    groups: Vec<(Option<Vec<usize>>, Vec<Vec<usize>>)>,
    test_fraction: f64,
    synthetic: bool,
) -> Dataset {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    RngStream::derived(seed, &[labels::DATA_GEN, 1]).shuffle(&mut order);
    let n_test = (groups.len() as f64 * test_fraction).round() as usize;
    let test_ids: BTreeSet<usize> = order[..n_test].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut histogram = BTreeMap::new();
    let mut solution_sets = Vec::with_capacity(groups.len());
    for (id, (input, targets)) in groups.into_iter().enumerate() {
        *histogram.entry(targets.len()).or_insert(0) += 1;
        let dest = if test_ids.contains(&id) { &mut test } else { &mut train };
        for t in &targets {
            dest.push(Instance { input: input.clone(), target: t.clone(), set_id: id });
        }
        solution_sets.push(targets);
    }
    let meta = DatasetMeta {
        task: spec.clone(),
        seed,
        generator,
        train_inputs: solution_sets.len() - n_test,
        test_inputs: n_test,
        train_records: train.len(),
        test_records: test.len(),
        solution_count_histogram: histogram,
        synthetic_stand_in: synthetic,
    };
    Dataset { spec, train, test, solution_sets, meta }
}

// --------------------------------------------------------------- generators

/// Removes every `k`-subset of queens (for each `k` in `removals`) from every
/// solution. Each distinct input gets its complete completion set.
pub fn gen_nqueens(n: usize, removals: &[usize], seed: u64) -> Result<Dataset> {
    let spec = TaskSpec::new(TaskKind::NQueens { n })?;
    if let Some(&k) = removals.iter().find(|&&k| k == 0 || k > n) {
        return Err(GramError::config(format!("cannot remove {k} queens from an {n}x{n} solution")));
    }
    let solutions = oracles::nqueens_backtrack(n, &vec![false; n * n])?;
    let mut inputs: BTreeSet<Vec<bool>> = BTreeSet::new();
    for sol in &solutions {
        let board = oracles::queens_to_board(n, sol);
        for &k in removals {
            for subset in combinations(n, k) {
                let mut clue = board.clone();
                for &row in &subset {
                    clue[row * n + sol[row]] = false;
                }
                inputs.insert(clue);
            }
        }
    }
    let mut groups = Vec::with_capacity(inputs.len());
    for clue in inputs {
        let completions = oracles::nqueens_backtrack(n, &clue)?;
        let targets = completions.iter().map(|c| encode_nqueens(&oracles::queens_to_board(n, c))).collect();
        groups.push((Some(encode_nqueens(&clue)), targets));
    }
    let mut generator = BTreeMap::new();
    generator.insert("n".into(), n.into());
    generator.insert("removals".into(), removals.to_vec().into());
    generator.insert("complete_solutions".into(), solutions.len().into());
    Ok(assemble(spec, seed, generator, groups, TEST_FRACTION, false))
}

/// Every `k`-subset of `0..n`, in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Default Erdős–Rényi edge probability per graph size, tuned so roughly
/// half the sampled graphs are 3-colourable.
pub fn default_edge_prob(n: usize) -> f64 {
    match n {
        0..=3 => 0.5,
        4 => 0.89,
        5 => 0.75,
        6 => 0.65,
        7 => 0.57,
        8 => 0.50,
        9 => 0.45,
        _ => 0.41,
    }
}

/// Samples `count` distinct 3-colourable graphs. Returns the dataset and
/// the number of rejected (non-3-colourable) draws.
pub fn gen_graph_coloring(n: usize, p: f64, count: usize, seed: u64) -> Result<(Dataset, usize)> {
    let spec = TaskSpec::new(TaskKind::Coloring { n })?;
    if !(0.0..=1.0).contains(&p) {
        return Err(GramError::config(format!("edge probability {p} outside [0, 1]")));
    }
    let mut rng = RngStream::derived(seed, &[labels::DATA_GEN, 2]);
    let mut seen = BTreeSet::new();
    let mut groups = Vec::new();
    let mut rejected = 0usize;
    let max_draws = count.saturating_mul(1000).max(10_000);
    let mut draws = 0;
    while groups.len() < count {
        draws += 1;
        if draws > max_draws {
            return Err(GramError::config(format!("only {} distinct 3-colourable graphs after {max_draws} draws", groups.len())));
        }
        let mut g = Graph::empty(n);
        for i in 0..n {
            for j in i + 1..n {
                if rng.uniform() < p {
                    g.add_edge(i, j);
                }
            }
        }
        let input = encode_graph(&g);
        if seen.contains(&input) {
            continue;
        }
        let colorings = oracles::enumerate_colorings(&g, 3)?;
        if colorings.is_empty() {
            rejected += 1;
            continue;
        }
        seen.insert(input.clone());
        groups.push((Some(input), colorings.iter().map(|c| encode_colors(c)).collect()));
    }
    let mut generator = BTreeMap::new();
    generator.insert("n".into(), n.into());
    generator.insert("edge_prob".into(), p.into());
    generator.insert("colors".into(), 3.into());
    generator.insert("rejected_not_3_colorable".into(), rejected.into());
    Ok((assemble(spec, seed, generator, groups, TEST_FRACTION, false), rejected))
}

/// A uniformly shuffled complete Sudoku board by randomized backtracking.
pub fn random_full_sudoku(rng: &mut RngStream) -> Vec<u8> {
    fn fill(b: &mut [u8], idx: usize, rng: &mut RngStream) -> bool {
        if idx == 81 {
            return true;
        }
        let mut digits: Vec<u8> = (1..=9).collect();
        rng.shuffle(&mut digits);
        let (r, c) = (idx / 9, idx % 9);
        let (br, bc) = (3 * (r / 3), 3 * (c / 3));
        for d in digits {
            let clash = (0..9).any(|k| b[r * 9 + k] == d || b[k * 9 + c] == d || b[(br + k / 3) * 9 + bc + k % 3] == d);
            if !clash {
                b[idx] = d;
                if fill(b, idx + 1, rng) {
                    return true;
                }
                b[idx] = 0;
            }
        }
        false
    }
    let mut b = vec![0u8; 81];
    let ok = fill(&mut b, 0, rng);
    debug_assert!(ok, "an empty board always completes");
    b
}

/// `count` distinct complete boards with an empty-conditioning input.
pub fn gen_sudoku_unconditional(count: usize, seed: u64) -> Result<Dataset> {
    let spec = TaskSpec::new(TaskKind::SudokuUnconditional)?;
    let mut rng = RngStream::derived(seed, &[labels::DATA_GEN, 3]);
    let mut seen = BTreeSet::new();
    let mut groups = Vec::with_capacity(count);
    while groups.len() < count {
        let board = random_full_sudoku(&mut rng);
        if seen.insert(board.clone()) {
            groups.push((None, vec![encode_sudoku(&board)?]));
        }
    }
    let mut generator = BTreeMap::new();
    generator.insert("boards".into(), count.into());
    Ok(assemble(spec, seed, generator, groups, 0.0, false))
}

/// Puzzles from random complete boards, reduced cell by cell while the
/// solution stays unique, stopping at `min_givens`. Locally generated
/// stand-in data, not a published benchmark.
pub fn gen_sudoku_conditional(count: usize, min_givens: usize, seed: u64) -> Result<Dataset> {
    let spec = TaskSpec::new(TaskKind::Sudoku)?;
    if !(17..=81).contains(&min_givens) {
        return Err(GramError::config(format!("min_givens must be in 17..=81, got {min_givens}")));
    }
    let mut rng = RngStream::derived(seed, &[labels::DATA_GEN, 4]);
    let mut seen = BTreeSet::new();
    let mut groups = Vec::with_capacity(count);
    while groups.len() < count {
        let solution = random_full_sudoku(&mut rng);
        let mut puzzle = solution.clone();
        let mut cells: Vec<usize> = (0..81).collect();
        rng.shuffle(&mut cells);
        let mut givens = 81;
        for idx in cells {
            if givens <= min_givens {
                break;
            }
            let keep = puzzle[idx];
            puzzle[idx] = 0;
            if oracles::sudoku_count_solutions(&puzzle, 2) == 1 {
                givens -= 1;
            } else {
                puzzle[idx] = keep;
            }
        }
        if seen.insert(puzzle.clone()) {
            groups.push((Some(encode_sudoku(&puzzle)?), vec![encode_sudoku(&solution)?]));
        }
    }
    let mut generator = BTreeMap::new();
    generator.insert("puzzles".into(), count.into());
    generator.insert("min_givens".into(), min_givens.into());
    Ok(assemble(spec, seed, generator, groups, TEST_FRACTION, true))
}

// ---------------------------------------------------------------------- io

fn join_tokens(tokens: &[usize]) -> String {
    let mut s = String::with_capacity(tokens.len() * 2);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{t}").expect("writing to a String");
    }
    s
}

fn parse_tokens(field: &str, what: &str, line: usize, file: &str) -> Result<Vec<usize>> {
    field.split_whitespace().map(|t| t.parse().map_err(|_| GramError::data(format!("{file}:{line}: bad {what} token `{t}`")))).collect()
}

fn records_text(spec: &TaskSpec, records: &[Instance]) -> String {
    let mut s = format!("# task={}\n", spec.name);
    for r in records {
        let input = r.input.as_deref().map(join_tokens).unwrap_or_default();
        writeln!(s, "{input};{};{}", join_tokens(&r.target), r.set_id).expect("writing to a String");
    }
    s
}

/// Writes `train.txt`, `test.txt`, `solutions.txt` and `metadata.json`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("train.txt"), records_text(&ds.spec, &ds.train))?;
    fs::write(dir.join("test.txt"), records_text(&ds.spec, &ds.test))?;
    let mut sidecar = format!("# task={}\n", ds.spec.name);
    for (id, set) in ds.solution_sets.iter().enumerate() {
        let members: Vec<String> = set.iter().map(|t| join_tokens(t)).collect();
        writeln!(sidecar, "{id};{}", members.join("|")).expect("writing to a String");
    }
    fs::write(dir.join("solutions.txt"), sidecar)?;
    let meta = serde_json::to_string_pretty(&ds.meta).map_err(|e| GramError::data(e.to_string()))?;
    fs::write(dir.join("metadata.json"), meta + "\n")?;
    Ok(())
}

fn read_header<'a>(text: &'a str, file: &str) -> Result<(TaskSpec, impl Iterator<Item = (usize, &'a str)>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| GramError::data(format!("{file}: empty file")))?;
    let name = first.strip_prefix("# task=").ok_or_else(|| GramError::data(format!("{file}:1: expected `# task=<name>` header")))?;
    Ok((TaskSpec::from_name(name.trim())?, lines.filter(|(_, l)| !l.trim().is_empty())))
}

fn load_records(dir: &Path, file: &str, spec: &TaskSpec, n_sets: usize) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(dir.join(file))?;
    let (file_spec, lines) = read_header(&text, file)?;
    if file_spec != *spec {
        return Err(GramError::data(format!("{file}: task `{}` does not match `{}`", file_spec.name, spec.name)));
    }
    let mut out = Vec::new();
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(';').collect();
        if fields.len() != 3 {
            return Err(GramError::data(format!("{file}:{ln}: expected `input;target;set_id`")));
        }
        let input = if spec.conditional { Some(parse_tokens(fields[0], "input", ln, file)?) } else { None };
        if !spec.conditional && !fields[0].trim().is_empty() {
            return Err(GramError::data(format!("{file}:{ln}: unconditional record carries an input")));
        }
        let target = parse_tokens(fields[1], "target", ln, file)?;
        spec.check_record(input.as_deref(), &target).map_err(|e| GramError::data(format!("{file}:{ln}: {e}")))?;
        let set_id: usize = fields[2].trim().parse().map_err(|_| GramError::data(format!("{file}:{ln}: bad solution set id")))?;
        if set_id >= n_sets {
            return Err(GramError::data(format!("{file}:{ln}: solution set {set_id} missing from solutions.txt")));
        }
        out.push(Instance { input, target, set_id });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_text = fs::read_to_string(dir.join("metadata.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| GramError::data(format!("metadata.json: {e}")))?;
    let spec = TaskSpec::new(meta.task.kind)?;
    if spec != meta.task {
        return Err(GramError::data("metadata.json: task spec is inconsistent with its family"));
    }
    let sidecar = fs::read_to_string(dir.join("solutions.txt"))?;
    let (side_spec, lines) = read_header(&sidecar, "solutions.txt")?;
    if side_spec != spec {
        return Err(GramError::data("solutions.txt: task does not match metadata.json"));
    }
    let mut solution_sets = Vec::new();
    for (ln, line) in lines {
        let (id, members) = line.split_once(';').ok_or_else(|| GramError::data(format!("solutions.txt:{ln}: expected `id;targets`")))?;
        if id.trim().parse::<usize>().ok() != Some(solution_sets.len()) {
            return Err(GramError::data(format!("solutions.txt:{ln}: ids must be consecutive from 0")));
        }
        let mut set = Vec::new();
        for m in members.split('|').filter(|m| !m.trim().is_empty()) {
            let t = parse_tokens(m, "solution", ln, "solutions.txt")?;
            spec.check_target(&t).map_err(|e| GramError::data(format!("solutions.txt:{ln}: {e}")))?;
            set.push(t);
        }
        solution_sets.push(set);
    }
    let train = load_records(dir, "train.txt", &spec, solution_sets.len())?;
    let test = load_records(dir, "test.txt", &spec, solution_sets.len())?;
    Ok(Dataset { spec, train, test, solution_sets, meta })
}
