// SPDX-License-Identifier: MIT OR Apache-2.0

//! `cage`: generate synthetic data, compute attribution tables and graphs,
//! attribute outputs to the prompt, evaluate and render.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cage_core::datagen::{generate_facts_example, generate_reasoning_example, load_examples, load_pool, bundled_pool};
use cage_core::metrics::{summarize, summary_to_tsv, SummaryRow};
use cage_core::sequence::examples_to_string;
use cage_core::{
    attribute_output, attribution_coverage, build_graph, clp_table, deletion_curve, export_dot, import_table,
    perturbation_table, row_attribution, Ablation, AttributionGraph, AttributionTable, ContextAttribution,
    DeletionCurve, DeletionOptions, Example, HttpBackend, MockBackend, MockModelSpec, MockSemantics,
    NormalizationMode, ProbabilityScale, ScoringBackend, ScoringOptions,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use config::FileConfig;

#[derive(Parser)]
#[command(name = "cage", version, about = "Context attribution through attribution graphs")]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// TOML file with defaults for the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base attribution method.
    #[arg(long, global = true, value_enum)]
    method: Option<BaseMethod>,
    /// Graph normalization (sum1, clamp, none); evaluate accepts a list.
    #[arg(long, global = true, value_delimiter = ',')]
    mode: Vec<NormalizationMode>,
    /// Display pruning threshold in [0, 1].
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Divide multi-unit output attributions by |O|.
    #[arg(long, global = true)]
    normalize_by_output: bool,
    /// Distribution truncation for clp.
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Seed for data generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scoring backend base address.
    #[arg(long, global = true, env = "CAGE_BACKEND_URL")]
    backend_url: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Concurrent scoring calls.
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
    /// Mock specs (one per example, as written by `generate`) used instead
    /// of a remote backend.
    #[arg(long, global = true)]
    mock: Option<PathBuf>,
    /// How the mock scores deletion curves.
    #[arg(long, global = true, value_enum)]
    mock_semantics: Option<SemanticsArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (examples.jsonl) and its mock specs (mocks.jsonl).
    Generate(GenerateArgs),
    /// Compute table, graph, CAGE and row attributions for each example.
    Attribute(AttributeArgs),
    /// Coverage and deletion-curve summary over a corpus.
    Evaluate(EvaluateArgs),
    /// Render a graph file as DOT.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = CorpusKind::Facts)]
    kind: CorpusKind,
    /// Number of examples.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Facts: prompt claims.
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Facts: generated claims.
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Facts: output size.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Facts: claim pool file (one claim per line); defaults to the bundled pool.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Reasoning: critical statements.
    #[arg(long, default_value_t = 4)]
    critical: usize,
    /// Reasoning: distractor statements.
    #[arg(long, default_value_t = 6)]
    distractors: usize,
}

#[derive(Args)]
struct AttributeArgs {
    /// Examples file (one JSON record per line).
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Only this example (1-based).
    #[arg(long)]
    index: Option<usize>,
    /// Table file for `--method import`.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Output units (1-based), overriding the example's.
    #[arg(long, value_delimiter = ',')]
    outputs: Vec<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Examples file (one JSON record per line).
    #[arg(long)]
    examples: PathBuf,
    /// Reuse tables from an `attribute` output directory instead of scoring.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Deletion-curve probability scale.
    #[arg(long, value_enum, default_value_t = ScaleArg::Anchored)]
    scale: ScaleArg,
}

#[derive(Args)]
struct RenderArgs {
    /// Graph file.
    #[arg(long)]
    graph: PathBuf,
    /// Output file; defaults to `graph.dot` in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseMethod {
    Pert,
    Clp,
    Import,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticsArg {
    TeacherForced,
    Regenerating,
}

impl From<SemanticsArg> for MockSemantics {
    fn from(s: SemanticsArg) -> Self {
        match s {
            SemanticsArg::TeacherForced => MockSemantics::TeacherForced,
            SemanticsArg::Regenerating => MockSemantics::Regenerating,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CorpusKind {
    Facts,
    Reasoning,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Anchored,
    Absolute,
}

/// Flags merged with the config file.
struct Settings {
    method: BaseMethod,
    modes: Vec<NormalizationMode>,
    threshold: f64,
    normalize_by_output: bool,
    top_k: usize,
    seed: u64,
    backend_url: Option<String>,
    out_dir: PathBuf,
    max_in_flight: usize,
    mock: Option<PathBuf>,
    mock_semantics: MockSemantics,
}

impl Settings {
    fn resolve(opts: GlobalOpts) -> Result<Self> {
        let file = match &opts.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let modes = if !opts.mode.is_empty() {
            opts.mode
        } else {
            file.mode.map(|m| m.into_vec()).unwrap_or_else(|| vec![NormalizationMode::RowStochastic])
        };
        if modes.is_empty() {
            bail!("at least one mode is required");
        }
        Ok(Self {
            method: opts.method.or(file.method).unwrap_or(BaseMethod::Pert),
            modes,
            threshold: opts.threshold.or(file.threshold).unwrap_or(0.0),
            normalize_by_output: opts.normalize_by_output || file.normalize_by_output.unwrap_or(false),
            top_k: opts.top_k.or(file.top_k).unwrap_or(20),
            seed: opts.seed.or(file.seed).unwrap_or(0),
            backend_url: opts.backend_url.or(file.backend_url).filter(|u| !u.is_empty()),
            out_dir: opts.out_dir.or(file.out_dir).unwrap_or_else(|| PathBuf::from("cage-out")),
            max_in_flight: opts.max_in_flight.or(file.max_in_flight).unwrap_or(4).max(1),
            mock: opts.mock,
            mock_semantics: opts.mock_semantics.or(file.mock_semantics).map_or(MockSemantics::Regenerating, Into::into),
        })
    }

    fn scoring(&self) -> ScoringOptions {
        ScoringOptions { max_in_flight: self.max_in_flight, top_k: self.top_k, average_positions: false }
    }

    fn single_mode(&self) -> Result<NormalizationMode> {
        match self.modes.as_slice() {
            [m] => Ok(*m),
            _ => bail!("attribute takes exactly one --mode"),
        }
    }
}

/// Scoring backend for each example.
enum Backend {
    Http(HttpBackend),
    Mock(Vec<MockBackend>),
}

impl Backend {
    /// Mocks take precedence over a remote address. `semantics` applies to mocks.
    fn resolve(s: &Settings, examples: &[Example], semantics: MockSemantics) -> Result<Option<Self>> {
        if let Some(path) = &s.mock {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let specs: Vec<MockModelSpec> = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(k, l)| {
                    serde_json::from_str(l).with_context(|| format!("{}:{}: bad mock spec", path.display(), k + 1))
                })
                .collect::<Result<_>>()?;
            if specs.len() != examples.len() {
                bail!("{} mock specs for {} examples", specs.len(), examples.len());
            }
            let mocks = specs
                .into_iter()
                .zip(examples)
                .map(|(spec, ex)| Ok(MockBackend::for_example(spec, ex)?.with_semantics(semantics)))
                .collect::<Result<_>>()?;
            return Ok(Some(Backend::Mock(mocks)));
        }
        Ok(s.backend_url.as_deref().map(|url| {
            let b = HttpBackend::new(url);
            Backend::Http(match std::env::var(HttpBackend::TOKEN_ENV) {
                Ok(t) if !t.is_empty() => b.with_token(t),
                _ => b,
            })
        }))
    }

    fn get(&self, i: usize) -> &dyn ScoringBackend {
        match self {
            Backend::Http(b) => b,
            Backend::Mock(m) => &m[i],
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let settings = Settings::resolve(cli.opts)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&settings, &a),
        Command::Attribute(a) => cmd_attribute(&settings, &a),
        Command::Evaluate(a) => cmd_evaluate(&settings, &a),
        Command::Render(a) => cmd_render(&settings, &a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn example_dir(s: &Settings, index: usize) -> PathBuf {
    s.out_dir.join(format!("example-{:04}", index + 1))
}

fn cmd_generate(s: &Settings, a: &GenerateArgs) -> Result<()> {
    let pool = match &a.pool {
        Some(p) => load_pool(p)?,
        None => bundled_pool(),
    };
    let mut examples = Vec::new();
    let mut specs = String::new();
    for k in 0..a.count {
        let seed = s.seed.wrapping_add(k);
        let (ex, spec) = match a.kind {
            CorpusKind::Facts => generate_facts_example(&pool, a.n, a.m, a.k, seed)?,
            CorpusKind::Reasoning => generate_reasoning_example(a.critical, a.distractors, seed)?,
        };
        examples.push(ex);
        specs.push_str(&serde_json::to_string(&spec)?);
        specs.push('\n');
    }
    create_dir(&s.out_dir)?;
    let ex_path = s.out_dir.join("examples.jsonl");
    fs::write(&ex_path, examples_to_string(&examples)?)?;
    fs::write(s.out_dir.join("mocks.jsonl"), specs)?;
    println!("wrote {} examples to {}", examples.len(), ex_path.display());
    Ok(())
}

fn one_based_outputs(outputs: &[usize]) -> Result<Vec<usize>> {
    outputs
        .iter()
        .map(|&o| o.checked_sub(1).ok_or_else(|| anyhow!("output indices are 1-based")))
        .collect()
}

fn compute_table(
    s: &Settings,
    backend: Option<&Backend>,
    example: &Example,
    index: usize,
) -> Result<AttributionTable> {
    let backend = backend.ok_or_else(|| anyhow!("no scoring backend: pass --backend-url or --mock"))?;
    let b = backend.get(index);
    let ablation = Ablation::eos_run(b);
    Ok(match s.method {
        BaseMethod::Pert => perturbation_table(b, example, &ablation, &s.scoring())?,
        BaseMethod::Clp => clp_table(b, example, &ablation, &s.scoring())?,
        BaseMethod::Import => bail!("--method import needs --table"),
    })
}

fn summary_line(a: &ContextAttribution, labels: &[String]) -> String {
    let outputs: Vec<String> = a.output_indices().iter().map(|o| (o + 1).to_string()).collect();
    let mode = a.mode().map_or("-".to_string(), |m| m.to_string());
    let mut line = format!(
        "  {:<12} mode={:<5} O={{{}}} prompt-slice sum {:.6}",
        a.method_tag(),
        mode,
        outputs.join(","),
        a.total()
    );
    for &j in a.ranking().iter().take(3) {
        let text = labels.get(j).map(String::as_str).unwrap_or("");
        let short: String = text.chars().take(32).collect();
        let _ = write!(line, "\n      p{:<3} {:>10.6}  {short}", j + 1, a.scores()[j]);
    }
    line
}

fn cmd_attribute(s: &Settings, a: &AttributeArgs) -> Result<()> {
    let mode = s.single_mode()?;
    let examples = match &a.examples {
        Some(p) => {
            let examples = load_examples(p)?;
            if examples.is_empty() {
                bail!("no examples in {}", p.display());
            }
            examples
        }
        None => Vec::new(),
    };
    let selected: Vec<usize> = match a.index {
        Some(i) if i == 0 || i > examples.len().max(1) => bail!("--index {i} out of range"),
        Some(i) => vec![i - 1],
        None if examples.is_empty() => vec![0],
        None => (0..examples.len()).collect(),
    };
    if s.method == BaseMethod::Import && selected.len() != 1 {
        bail!("--method import handles one example; pass --index");
    }
    let backend = if s.method == BaseMethod::Import {
        None
    } else {
        if examples.is_empty() {
            bail!("--examples is required for --method pert or clp");
        }
        Backend::resolve(s, &examples, MockSemantics::TeacherForced)?
    };

    for &i in &selected {
        let example = examples.get(i);
        let table = match s.method {
            BaseMethod::Import => {
                let path = a.table.as_ref().ok_or_else(|| anyhow!("--method import needs --table"))?;
                let t = import_table(path)?;
                if let Some(ex) = example {
                    if (t.prompt_len(), t.total_len()) != (ex.prompt_len(), ex.total_len()) {
                        bail!(
                            "table is {}+{} units, example {} is {}+{}",
                            t.prompt_len(),
                            t.generated_len(),
                            i + 1,
                            ex.prompt_len(),
                            ex.generated_len()
                        );
                    }
                }
                t
            }
            _ => compute_table(s, backend.as_ref(), example.expect("examples are loaded"), i)?,
        };
        let outputs = if !a.outputs.is_empty() {
            one_based_outputs(&a.outputs)?
        } else if let Some(ex) = example {
            ex.output_indices().iter().copied().collect()
        } else {
            bail!("pass --outputs or --examples to choose the output units");
        };

        let negatives = table.values().iter().filter(|&&v| v < 0.0).count();
        if mode == NormalizationMode::RawPassthrough && negatives > 0 {
            eprintln!(
                "warning: mode none keeps {negatives} negative table entries; attributions are not conserved"
            );
        }
        let mut graph = build_graph(&table, mode);
        let labels = example.map(Example::unit_texts).unwrap_or_default();
        if !labels.is_empty() {
            graph = graph.with_labels(labels.clone())?;
        }
        let base = table.method_tag().to_string();
        let cage = attribute_output(&graph, &outputs, s.normalize_by_output)?.with_method_tag(format!("cage({base})"));
        let row = row_attribution(&table, &outputs)?.with_method_tag(format!("row({base})"));

        let dir = example_dir(s, i);
        create_dir(&dir)?;
        table.save(&dir.join("table.json"))?;
        graph.save(&dir.join("graph.json"))?;
        cage.save(&dir.join("cage.json"))?;
        row.save(&dir.join("row.json"))?;
        println!("example {} -> {}", i + 1, dir.display());
        println!("{}", summary_line(&cage, &labels));
        println!("{}", summary_line(&row, &labels));
    }
    Ok(())
}

fn write_curves(path: &Path, sets: &[(String, String, Vec<DeletionCurve>)]) -> Result<()> {
    let mut out = String::from("method\tmode\texample\tstep\tfraction\tprobability\traw_probability\n");
    for (method, mode, curves) in sets {
        for (e, c) in curves.iter().enumerate() {
            for k in 0..c.fractions.len() {
                let _ = writeln!(
                    out,
                    "{method}\t{mode}\t{}\t{k}\t{:.6}\t{:.9}\t{:.9}",
                    e + 1,
                    c.fractions[k],
                    c.probabilities[k],
                    c.raw_probabilities[k]
                );
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn cmd_evaluate(s: &Settings, a: &EvaluateArgs) -> Result<()> {
    let examples = load_examples(&a.examples)?;
    if examples.is_empty() {
        bail!("empty corpus: no examples in {}", a.examples.display());
    }
    let scoring_backend = if a.tables.is_none() {
        Backend::resolve(s, &examples, MockSemantics::TeacherForced)?
    } else {
        None
    };
    let tables: Vec<AttributionTable> = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| match &a.tables {
            Some(dir) => {
                let path = dir.join(format!("example-{:04}", i + 1)).join("table.json");
                let t = import_table(&path).with_context(|| format!("loading {}", path.display()))?;
                if t.total_len() != ex.total_len() || t.prompt_len() != ex.prompt_len() {
                    bail!("{} does not match example {}", path.display(), i + 1);
                }
                Ok(t)
            }
            None => compute_table(s, scoring_backend.as_ref(), ex, i),
        })
        .collect::<Result<_>>()?;
    let base = tables[0].method_tag().to_string();

    // (method, mode, attributions)
    let mut sets: Vec<(String, String, Vec<ContextAttribution>)> = Vec::new();
    for &mode in &s.modes {
        let attrs = examples
            .iter()
            .zip(&tables)
            .map(|(ex, t)| {
                let outputs: Vec<usize> = ex.output_indices().iter().copied().collect();
                attribute_output(&build_graph(t, mode), &outputs, s.normalize_by_output)
            })
            .collect::<cage_core::Result<_>>()?;
        sets.push((format!("cage({base})"), mode.to_string(), attrs));
    }
    let rows = examples
        .iter()
        .zip(&tables)
        .map(|(ex, t)| row_attribution(t, &ex.output_indices().iter().copied().collect::<Vec<_>>()))
        .collect::<cage_core::Result<_>>()?;
    sets.push((format!("row({base})"), "-".to_string(), rows));

    let mut summary: Vec<SummaryRow> = Vec::new();
    let with_gt: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].gt_indices().is_some()).collect();
    if !with_gt.is_empty() {
        for (method, mode, attrs) in &sets {
            let values = with_gt
                .iter()
                .map(|&i| attribution_coverage(&attrs[i], examples[i].gt_indices().expect("filtered")))
                .collect::<cage_core::Result<Vec<f64>>>()?;
            summary.push(summarize(method, mode, "attribution_coverage", &values)?);
        }
    }

    let deletion_backend = Backend::resolve(s, &examples, s.mock_semantics)?;
    create_dir(&s.out_dir)?;
    if let Some(backend) = &deletion_backend {
        let scale = match a.scale {
            ScaleArg::Anchored => ProbabilityScale::Anchored,
            ScaleArg::Absolute => ProbabilityScale::Absolute,
        };
        let mut curve_sets = Vec::new();
        for (method, mode, attrs) in &sets {
            let curves = attrs
                .iter()
                .enumerate()
                .map(|(i, attr)| {
                    let b = backend.get(i);
                    let opts = DeletionOptions { scale, max_in_flight: s.max_in_flight, ..DeletionOptions::new(Ablation::eos_run(b)) };
                    deletion_curve(b, &examples[i], attr, &opts)
                })
                .collect::<cage_core::Result<Vec<_>>>()?;
            let aucs: Vec<f64> = curves.iter().map(|c| c.auc).collect();
            summary.push(summarize(method, mode, scale.metric_name(), &aucs)?);
            curve_sets.push((method.clone(), mode.clone(), curves));
        }
        write_curves(&s.out_dir.join("curves.tsv"), &curve_sets)?;
    }
    if summary.is_empty() {
        bail!("nothing to evaluate: no example has ground truth and no backend is configured");
    }
    let tsv = summary_to_tsv(&summary);
    fs::write(s.out_dir.join("summary.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn cmd_render(s: &Settings, a: &RenderArgs) -> Result<()> {
    let graph = AttributionGraph::load(&a.graph).with_context(|| format!("loading {}", a.graph.display()))?;
    let dot = export_dot(&graph, s.threshold)?;
    let out = match &a.out {
        Some(p) => p.clone(),
        None => {
            create_dir(&s.out_dir)?;
            s.out_dir.join("graph.dot")
        }
    };
    fs::write(&out, dot).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}
