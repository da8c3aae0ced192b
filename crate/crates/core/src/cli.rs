//! The `qd` command line: compile, reduce, eval, check and bench.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::circuit::{self, format_label, QDag};
use crate::compiler::{self, BeliefNetwork, CompileSpec};
use crate::evaluator::{Mode, ValueState};
use crate::oracle::{self, rel_close, EQUIVALENCE_TOLERANCE};
use crate::reducer;

#[derive(Parser, Debug)]
#[command(name = "qd", version, about = "Compile, reduce and evaluate query DAGs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Text,
    Kv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Paper,
    Stabilized,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Paper => Mode::Paper,
            ModeArg::Stabilized => Mode::Stabilized,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile a .bn network into a .qdag file (reduced unless --no-reduce).
    Compile {
        network: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        query: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        evidence: Vec<String>,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
        #[arg(long)]
        no_reduce: bool,
    },
    /// Reduce a .qdag file.
    Reduce {
        input: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        report: ReportFormat,
    },
    /// Evaluate a .qdag under evidence, or serve a line protocol with --repl.
    Eval {
        qdag: PathBuf,
        #[arg(long, value_name = "V=v")]
        observe: Vec<String>,
        #[arg(long, value_name = "V")]
        retract: Vec<String>,
        #[arg(long, value_name = "V")]
        print: Vec<String>,
        #[arg(long)]
        repl: bool,
        #[arg(long, value_enum, default_value = "paper")]
        mode: ModeArg,
    },
    /// Verify a .qdag against brute-force enumeration of a network.
    Check {
        network: PathBuf,
        qdag: PathBuf,
        #[arg(long, conflicts_with = "samples")]
        exhaustive: bool,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay a seeded random evidence workload and report work counters.
    Bench {
        qdag: PathBuf,
        #[arg(long)]
        ops: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        updates_only: bool,
        #[arg(long, value_enum, default_value = "paper")]
        mode: ModeArg,
    },
}

enum Failure {
    /// Bad input; exit code 1.
    Input(String),
    /// Broken internal invariant; exit code 2.
    Internal(String),
}

type CmdResult = Result<(), Failure>;

fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Input(format!("{}: {}", context, e))
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e);
                return 0;
            }
            let _ = write!(stderr, "{}", e);
            return 1;
        }
    };
    let result = match cli.command {
        Command::Compile {
            network,
            query,
            evidence,
            output,
            no_reduce,
        } => cmd_compile(&network, query, evidence, output.as_deref(), no_reduce, stdout),
        Command::Reduce { input, output, report } => {
            cmd_reduce(&input, output.as_deref(), report, stdout, stderr)
        }
        Command::Eval {
            qdag,
            observe,
            retract,
            print,
            repl,
            mode,
        } => cmd_eval(&qdag, &observe, &retract, &print, repl, mode.into(), stdin, stdout),
        Command::Check {
            network,
            qdag,
            exhaustive: _,
            samples,
            seed,
        } => cmd_check(&network, &qdag, samples, seed, stdout),
        Command::Bench {
            qdag,
            ops,
            seed,
            updates_only,
            mode,
        } => cmd_bench(&qdag, ops, seed, updates_only, mode.into(), stdout),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Input(msg)) => {
            let _ = writeln!(stderr, "error: {}", msg);
            1
        }
        Err(Failure::Internal(msg)) => {
            let _ = writeln!(stderr, "internal error: {}", msg);
            2
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(input(path.display()))
}

fn load_dag(path: &Path) -> Result<QDag, Failure> {
    circuit::parse(&read(path)?).map_err(input(path.display()))
}

fn load_network(path: &Path) -> Result<BeliefNetwork, Failure> {
    compiler::parse_network(&read(path)?).map_err(input(path.display()))
}

/// Writes to a temporary file next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &str) -> CmdResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(input(dir.display()))?;
    tmp.write_all(contents.as_bytes())
        .map_err(input(path.display()))?;
    tmp.persist(path).map_err(|e| Failure::Input(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

fn emit(output: Option<&Path>, contents: &str, stdout: &mut dyn Write) -> CmdResult {
    match output {
        Some(p) => write_atomic(p, contents),
        None => stdout
            .write_all(contents.as_bytes())
            .map_err(|e| Failure::Input(e.to_string())),
    }
}

fn ensure_valid(dag: &QDag, stage: &str) -> CmdResult {
    let v = dag.validate();
    if v.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> = v.iter().map(ToString::to_string).collect();
        Err(Failure::Internal(format!("{} produced an invalid dag: {}", stage, list.join(", "))))
    }
}

fn cmd_compile(
    network: &Path,
    query: Vec<String>,
    evidence: Vec<String>,
    output: Option<&Path>,
    no_reduce: bool,
    stdout: &mut dyn Write,
) -> CmdResult {
    let net = load_network(network)?;
    let spec = CompileSpec { query, evidence };
    let mut dag = compiler::compile(&net, &spec).map_err(input("compile"))?;
    ensure_valid(&dag, "compile")?;
    if !no_reduce {
        dag = reducer::reduce(&dag).0;
        ensure_valid(&dag, "reduce")?;
    }
    emit(output, &circuit::serialize(&dag), stdout)
}

fn cmd_reduce(
    input_path: &Path,
    output: Option<&Path>,
    format: ReportFormat,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CmdResult {
    let dag = load_dag(input_path)?;
    let (reduced, report) = reducer::reduce(&dag);
    ensure_valid(&reduced, "reduce")?;
    emit(output, &circuit::serialize(&reduced), stdout)?;
    let text = match format {
        ReportFormat::Text => report.to_string(),
        ReportFormat::Kv => report.to_kv(),
    };
    let _ = stderr.write_all(text.as_bytes());
    Ok(())
}

fn split_assignment(s: &str) -> Result<(&str, &str), Failure> {
    s.split_once('=')
        .filter(|(v, st)| !v.is_empty() && !st.is_empty())
        .ok_or_else(|| Failure::Input(format!("expected V=v, got `{}`", s)))
}

fn check_observable(state: &ValueState<'_>, variable: &str) -> CmdResult {
    if state.evidence_variables().iter().any(|(v, _)| v == variable) {
        Ok(())
    } else {
        Err(Failure::Input(format!(
            "variable `{}` has no evidence nodes; recompile with `--evidence {}`",
            variable, variable
        )))
    }
}

fn query_variables(dag: &QDag) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for q in dag.queries() {
        if !out.contains(&q.variable) {
            out.push(q.variable.clone());
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    path: &Path,
    observe: &[String],
    retract: &[String],
    print: &[String],
    repl: bool,
    mode: Mode,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
) -> CmdResult {
    let dag = load_dag(path)?;
    let mut state = ValueState::new(&dag, mode);
    for o in observe {
        let (v, s) = split_assignment(o)?;
        check_observable(&state, v)?;
        state.observe(v, s).map_err(input("--observe"))?;
    }
    for v in retract {
        check_observable(&state, v)?;
        state.retract(v).map_err(input("--retract"))?;
    }
    if repl {
        return serve(&mut state, stdin, stdout);
    }
    // Answer from a bottom-up pass over the final evidence.
    state.recompute_all();
    let vars = if print.is_empty() { query_variables(&dag) } else { print.to_vec() };
    let io = |e: std::io::Error| Failure::Input(e.to_string());
    for v in &vars {
        for (s, x) in state.query_all(v).map_err(input("--print"))? {
            writeln!(stdout, "{} {} {}", v, s, format_label(x)).map_err(io)?;
        }
    }
    Ok(())
}

fn repl_line(state: &mut ValueState<'_>, line: &str) -> Result<Option<String>, String> {
    let mut toks = line.split_whitespace();
    let cmd = toks.next().unwrap_or("");
    let arg = toks.next();
    if toks.next().is_some() {
        return Err("too many arguments".into());
    }
    fn need<'a>(a: Option<&'a str>, cmd: &str) -> Result<&'a str, String> {
        a.ok_or_else(|| format!("`{}` needs an argument", cmd))
    }
    let render = |pairs: Vec<(String, f64)>| {
        pairs
            .into_iter()
            .map(|(s, x)| format!("{}={}", s, format_label(x)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    match cmd {
        "observe" => {
            let (v, s) = need(arg, cmd)?
                .split_once('=')
                .ok_or_else(|| "expected observe V=v".to_string())?;
            state.observe(v, s).map_err(|e| e.to_string())?;
            Ok(Some("ok".into()))
        }
        "retract" => {
            state.retract(need(arg, cmd)?).map_err(|e| e.to_string())?;
            Ok(Some("ok".into()))
        }
        "query" => {
            let a = need(arg, cmd)?;
            match a.split_once('=') {
                Some((v, s)) => {
                    let x = state.query(v, s).map_err(|e| e.to_string())?;
                    Ok(Some(format_label(x)))
                }
                None => {
                    let all = state.query_all(a).map_err(|e| e.to_string())?;
                    Ok(Some(format!("{} {}", a, render(all))))
                }
            }
        }
        "posterior" => {
            let a = need(arg, cmd)?;
            let p = state.posterior(a).map_err(|e| e.to_string())?;
            Ok(Some(format!("{} {}", a, render(p))))
        }
        "reset" => {
            let vars: Vec<String> = state.evidence_variables().iter().map(|(v, _)| v.clone()).collect();
            for v in vars {
                state.retract(&v).map_err(|e| e.to_string())?;
            }
            Ok(Some("ok".into()))
        }
        "quit" | "exit" => Ok(None),
        other => Err(format!("unknown command `{}`", other)),
    }
}

fn serve(state: &mut ValueState<'_>, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> CmdResult {
    let io = |e: std::io::Error| Failure::Input(e.to_string());
    let mut line = String::new();
    loop {
        line.clear();
        if stdin.read_line(&mut line).map_err(io)? == 0 {
            return Ok(());
        }
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        match repl_line(state, l) {
            Ok(Some(out)) => writeln!(stdout, "{}", out).map_err(io)?,
            Ok(None) => return Ok(()),
            Err(e) => writeln!(stdout, "error: {}", e).map_err(io)?,
        }
        stdout.flush().map_err(io)?;
    }
}

fn cmd_check(network: &Path, path: &Path, samples: Option<usize>, seed: u64, stdout: &mut dyn Write) -> CmdResult {
    let net = load_network(network)?;
    let dag = load_dag(path)?;
    let io = |e: std::io::Error| Failure::Input(e.to_string());

    let mut query_vars = Vec::new();
    for v in query_variables(&dag) {
        let qi = net
            .var_index(&v)
            .ok_or_else(|| Failure::Input(format!("query variable `{}` is not in the network", v)))?;
        for q in dag.queries().iter().filter(|q| q.variable == v) {
            if net.variables[qi].state_index(&q.state).is_none() {
                return Err(Failure::Input(format!("`{}` is not a state of `{}`", q.state, v)));
            }
        }
        query_vars.push(qi);
    }
    let mut evidence = Vec::new();
    for (v, states) in dag.esn_groups() {
        let vi = net
            .var_index(&v)
            .ok_or_else(|| Failure::Input(format!("evidence variable `{}` is not in the network", v)))?;
        for (s, _) in &states {
            if net.variables[vi].state_index(s).is_none() {
                return Err(Failure::Input(format!("`{}` is not a state of `{}`", s, v)));
            }
        }
        evidence.push(vi);
    }

    let tables = query_vars
        .iter()
        .map(|&q| oracle::evidence_table(&net, q, &evidence))
        .collect::<Result<Vec<_>, _>>()
        .map_err(input("oracle"))?;
    let total = tables.first().map(|t| t.pattern_count()).unwrap_or(1);
    let patterns: Vec<usize> = match samples {
        None => (0..total).collect(),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen_range(0..total)).collect()
        }
    };

    for &pi in &patterns {
        let pattern = tables[0].pattern(pi);
        let mut indicators = HashMap::new();
        let mut described = Vec::new();
        for (k, &e) in evidence.iter().enumerate() {
            let var = &net.variables[e];
            match pattern[k] {
                None => described.push(format!("{}=?", var.name)),
                Some(s) => described.push(format!("{}={}", var.name, var.states[s])),
            }
            for (si, st) in var.states.iter().enumerate() {
                let on = pattern[k].is_none_or(|s| s == si);
                indicators.insert((var.name.clone(), st.clone()), if on { 1.0 } else { 0.0 });
            }
        }
        let values = oracle::evaluate(&dag, &indicators);
        for (t, &qi) in tables.iter().zip(&query_vars) {
            let qv = &net.variables[qi];
            for q in dag.queries().iter().filter(|q| q.variable == qv.name) {
                let si = qv.state_index(&q.state).unwrap();
                let expected = t.get(pi, si);
                let got = values[q.node.index()];
                if !rel_close(expected, got, EQUIVALENCE_TOLERANCE) {
                    writeln!(
                        stdout,
                        "counterexample: evidence [{}] query ({}, {}) dag={} oracle={}",
                        described.join(" "),
                        q.variable,
                        q.state,
                        format_label(got),
                        format_label(expected)
                    )
                    .map_err(io)?;
                    return Err(Failure::Input("dag disagrees with the network".into()));
                }
            }
        }
    }
    writeln!(stdout, "ok: {} evidence pattern(s) checked", patterns.len()).map_err(io)?;
    Ok(())
}

/// Counters collected by [`bench_workload`].
#[derive(Clone, Debug, PartialEq)]
pub struct BenchStats {
    pub ops: usize,
    pub nodes: usize,
    pub edges: usize,
    pub nodes_visited_total: u64,
    pub nodes_visited_max: u64,
    pub edges_traversed_max: u64,
    pub mul_recomputes: u64,
    /// Largest audit deviation seen after any operation.
    pub max_drift: f64,
    /// Deviation removed by the final recompute.
    pub final_drift: f64,
}

impl BenchStats {
    pub fn nodes_visited_mean(&self) -> f64 {
        if self.ops == 0 {
            0.0
        } else {
            self.nodes_visited_total as f64 / self.ops as f64
        }
    }
}

/// Replays `ops` random observe/retract operations drawn from `seed`. With
/// `updates_only`, variables are only ever moved from unknown to observed.
pub fn bench_workload(dag: &QDag, ops: usize, seed: u64, updates_only: bool, mode: Mode) -> BenchStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ValueState::new(dag, mode);
    state.reset_counters();
    let groups: Vec<(String, Vec<String>)> = state
        .evidence_variables()
        .iter()
        .map(|(v, ss)| (v.clone(), ss.iter().map(|(s, _)| s.clone()).collect()))
        .collect();
    let mut observed: Vec<Option<usize>> = vec![None; groups.len()];
    let mut stats = BenchStats {
        ops,
        nodes: dag.node_count(),
        edges: dag.edge_count(),
        nodes_visited_total: 0,
        nodes_visited_max: 0,
        edges_traversed_max: 0,
        mul_recomputes: 0,
        max_drift: 0.0,
        final_drift: 0.0,
    };
    if groups.is_empty() {
        return stats;
    }
    for _ in 0..ops {
        let g = rng.gen_range(0..groups.len());
        let (var, states) = &groups[g];
        let retract = !updates_only && observed[g].is_some() && rng.gen_bool(0.3);
        if retract {
            state.retract(var).expect("variable has indicators");
            observed[g] = None;
        } else {
            let s = match (updates_only, observed[g]) {
                (true, Some(s)) => s,
                _ => rng.gen_range(0..states.len()),
            };
            state.observe(var, &states[s]).expect("state has an indicator");
            observed[g] = Some(s);
        }
        let c = state.counters();
        stats.nodes_visited_total += c.last_nodes_visited;
        stats.nodes_visited_max = stats.nodes_visited_max.max(c.last_nodes_visited);
        stats.edges_traversed_max = stats.edges_traversed_max.max(c.last_edges_traversed);
        stats.max_drift = stats.max_drift.max(state.audit());
    }
    stats.mul_recomputes = state.counters().mul_recomputes;
    stats.final_drift = state.recompute_all();
    stats
}

fn cmd_bench(path: &Path, ops: usize, seed: u64, updates_only: bool, mode: Mode, stdout: &mut dyn Write) -> CmdResult {
    let dag = load_dag(path)?;
    let s = bench_workload(&dag, ops, seed, updates_only, mode);
    let io = |e: std::io::Error| Failure::Input(e.to_string());
    let mode_name = match mode {
        Mode::Paper => "paper",
        Mode::Stabilized => "stabilized",
    };
    writeln!(stdout, "mode={}", mode_name).map_err(io)?;
    writeln!(stdout, "ops={}", s.ops).map_err(io)?;
    writeln!(stdout, "nodes={}", s.nodes).map_err(io)?;
    writeln!(stdout, "edges={}", s.edges).map_err(io)?;
    writeln!(stdout, "nodes_visited_total={}", s.nodes_visited_total).map_err(io)?;
    writeln!(stdout, "nodes_visited_mean={}", format_label(s.nodes_visited_mean())).map_err(io)?;
    writeln!(stdout, "nodes_visited_max={}", s.nodes_visited_max).map_err(io)?;
    writeln!(stdout, "mul_recomputes={}", s.mul_recomputes).map_err(io)?;
    writeln!(stdout, "max_drift={:e}", s.max_drift).map_err(io)?;
    if updates_only && s.mul_recomputes != 0 {
        return Err(Failure::Internal(format!(
            "update-only workload triggered {} multiplication recomputes",
            s.mul_recomputes
        )));
    }
    Ok(())
}
