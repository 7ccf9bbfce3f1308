// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cage_core::datagen::{bundled_pool, generate_facts_example, generate_reasoning_example};
use cage_core::modelclient::mock_generate;
use cage_core::{
    attribute_output, attribute_token, attribution_coverage, build_graph, deletion_curve, import_table,
    perturbation_table, row_attribution, total_influence, Ablation, AttributionGraph, AttributionTable,
    ContextAttribution, DeletionOptions, Error, MockBackend, MockSemantics, NormalizationMode,
    ScoringOptions, UnitLevel,
};
use common::{path_oracle, random_graph, random_mock_spec, random_table, rng};
use rand::seq::SliceRandom;
use rand::Rng;

// Pinned tolerances and limits.
const ROW_SUM_TOL: f64 = 1e-9;
const PATH_TOL: f64 = 1e-9;
const CONSERVATION_TOL: f64 = 1e-8;
const CLOSED_FORM_TOL: f64 = 1e-6;
const REUSE_FACTOR: f64 = 10.0;
const SIGNED_SUM_GAP: f64 = 0.5;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sentence_table(p: usize, rows: &[Vec<f64>]) -> AttributionTable {
    AttributionTable::from_rows(p, rows, "crafted", UnitLevel::Sentence).unwrap()
}

fn row_stochastic_construction() -> Check {
    let mut r = rng(1);
    let mut rows = 0usize;
    let mut degenerate = 0usize;
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let table = random_table(&mut r, 64);
        let g = build_graph(&table, NormalizationMode::RowStochastic);
        let p = g.prompt_len();
        for i in 0..g.generated_len() {
            rows += 1;
            let a = g.row(i);
            let visible = p + i;
            ensure(a.iter().all(|&v| v >= 0.0), || format!("table {k} row {i}: negative weight"))?;
            ensure(a[visible..].iter().all(|&v| v == 0.0), || format!("table {k} row {i}: not causal"))?;
            let err = (a.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(err);
            ensure(err <= ROW_SUM_TOL, || format!("table {k} row {i}: sum off by {err:e}"))?;
            if table.row(i)[..visible].iter().all(|&v| v <= 0.0) {
                degenerate += 1;
                let u = 1.0 / visible as f64;
                ensure(a[..visible].iter().all(|&v| v == u), || {
                    format!("table {k} row {i}: degenerate row not exactly uniform")
                })?;
            }
        }
    }
    ensure(degenerate > 0, || "no degenerate rows were generated".into())?;
    Ok(format!("{rows} rows, {degenerate} degenerate, max |sum-1| = {worst:.1e}"))
}

fn propagation_correctness() -> Check {
    let mut r = rng(2);
    let mut worst_oracle = 0.0f64;
    let mut worst_cross = 0.0f64;
    let mut checked = 0usize;
    for mode in [NormalizationMode::RowStochastic, NormalizationMode::RawPassthrough] {
        for k in 0..200 {
            let g = random_graph(&mut r, 10, mode);
            let y = total_influence(&g);
            for i in 0..g.generated_len() {
                let a = attribute_token(&g, i).map_err(|e| e.to_string())?;
                let oracle = path_oracle(&g, g.prompt_len() + i);
                let scale = 1.0 + oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let d_oracle = max_abs_diff(a.scores(), &oracle) / scale;
                let d_cross = max_abs_diff(y.prompt_slice(i), a.scores()) / scale;
                worst_oracle = worst_oracle.max(d_oracle);
                worst_cross = worst_cross.max(d_cross);
                ensure(d_oracle <= PATH_TOL, || format!("{mode} graph {k} unit {i}: oracle gap {d_oracle:e}"))?;
                ensure(d_cross <= PATH_TOL, || format!("{mode} graph {k} unit {i}: cross gap {d_cross:e}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} units over 400 graphs (sum1 + none); oracle gap {worst_oracle:.1e}, cross gap {worst_cross:.1e}"
    ))
}

fn conservation() -> Check {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for k in 0..500 {
        let g = random_graph(&mut r, 32, NormalizationMode::RowStochastic);
        let y = g.generated_len();
        for i in 0..y {
            let s = attribute_token(&g, i).map_err(|e| e.to_string())?.total();
            worst = worst.max((s - 1.0).abs());
            ensure((s - 1.0).abs() <= CONSERVATION_TOL, || format!("graph {k} unit {i}: sum {s}"))?;
        }
        let size = r.gen_range(1..=y);
        let mut all: Vec<usize> = (0..y).collect();
        all.shuffle(&mut r);
        let outputs = &all[..size];
        let s = attribute_output(&g, outputs, false).map_err(|e| e.to_string())?.total();
        worst = worst.max((s - size as f64).abs());
        ensure((s - size as f64).abs() <= CONSERVATION_TOL, || format!("graph {k}: |O|={size}, sum {s}"))?;
    }
    Ok(format!("500 graphs, max deviation {worst:.1e}"))
}

fn degenerate_equivalence() -> Check {
    let mut r = rng(4);
    let mut compared = 0usize;
    for k in 0..100 {
        let p = r.gen_range(1..=12);
        let y = r.gen_range(1..=8);
        let rows: Vec<Vec<f64>> = (0..y)
            .map(|_| (0..p).map(|_| f64::from(r.gen_range(0..1000u32)) / 1000.0).collect())
            .collect();
        let table = sentence_table(p, &rows);
        ensure(table.has_empty_intergenerational_block(), || format!("instance {k}: block not empty"))?;
        let g = build_graph(&table, NormalizationMode::RowStochastic);
        for o in 0..y {
            let cage = attribute_token(&g, o).map_err(|e| e.to_string())?;
            let row = row_attribution(&table, &[o]).map_err(|e| e.to_string())?;
            ensure(cage.ranking() == row.ranking(), || format!("instance {k} output {o}: rankings differ"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} singleton outputs over 100 instances, 0 mismatches"))
}

fn mock_oracle_base_method() -> Check {
    let mut r = rng(5);
    let mut cells = 0usize;
    for k in 0..100 {
        let spec = random_mock_spec(&mut r, 8, 8);
        let prompt: Vec<String> = (0..spec.prompt_len()).map(|j| format!("Prompt sentence {j}.")).collect();
        let ex = mock_generate(&spec, &prompt).map_err(|e| e.to_string())?;
        let b = MockBackend::for_example(spec.clone(), &ex).map_err(|e| e.to_string())?;
        let t = perturbation_table(&b, &ex, &Ablation::eos_run(&b), &ScoringOptions::default())
            .map_err(|e| e.to_string())?;
        let got: Vec<u64> = t.values().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = spec.dependency_table().values().iter().map(|v| v.to_bits()).collect();
        ensure(got == want, || format!("spec {k}: table differs from D"))?;
        cells += got.len();
    }
    Ok(format!("100 specs, {cells} cells bitwise equal"))
}

/// CAGE weight that the first generation's source receives through the
/// reuse chain when every generation depends on its source with weight 1
/// and on each earlier generation with weight `r`.
fn reuse_closed_form(r: f64, m: usize, outputs: &[usize]) -> f64 {
    // f[i]: total influence of the first source on generation i.
    let mut f = vec![0.0; m];
    f[0] = 1.0;
    for i in 1..m {
        let norm = 1.0 + i as f64 * r;
        f[i] = (0..i).map(|j| r / norm * f[j]).sum();
    }
    outputs.iter().map(|&o| f[o]).sum()
}

fn figure_four_effect() -> Check {
    let pool = bundled_pool();
    let expected = reuse_closed_form(0.5, 3, &[1, 2]);
    ensure((expected - 2.0 / 3.0).abs() < 1e-15, || format!("closed form {expected}"))?;
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let (ex, spec) = generate_facts_example(&pool, 5, 3, 2, seed).map_err(|e| e.to_string())?;
        let b = MockBackend::for_example(spec.clone(), &ex).map_err(|e| e.to_string())?;
        let table = perturbation_table(&b, &ex, &Ablation::eos_run(&b), &ScoringOptions::default())
            .map_err(|e| e.to_string())?;
        let outputs: Vec<usize> = ex.output_indices().iter().copied().collect();
        ensure(outputs == [1, 2], || format!("seed {seed}: outputs {outputs:?}"))?;
        let g = build_graph(&table, NormalizationMode::RowStochastic);
        let cage = attribute_output(&g, &outputs, false).map_err(|e| e.to_string())?;
        let row = row_attribution(&table, &outputs).map_err(|e| e.to_string())?;
        let tracked = (0..5).find(|&j| spec.dependency_row(0)[j] > 0.0).ok_or("no source")?;
        let gt = ex.gt_indices().ok_or("no ground truth")?;
        ensure(!gt.contains(&tracked), || format!("seed {seed}: tracked unit is in GT"))?;
        let c = cage.scores()[tracked];
        let rv = row.scores()[tracked];
        ensure(c > 0.0 && c >= REUSE_FACTOR * rv, || format!("seed {seed}: cage {c} vs row {rv}"))?;
        worst = worst.max((c - expected).abs());
        ensure((c - expected).abs() <= CLOSED_FORM_TOL, || format!("seed {seed}: cage {c}, expected {expected}"))?;
    }
    Ok(format!(
        "50 examples; row = 0, CAGE = {expected:.6} (closed form), max gap {worst:.1e}"
    ))
}

fn coverage_metric() -> Check {
    let a = |s: &[f64]| ContextAttribution::new(s.to_vec(), [0], "t", None).unwrap();
    let gt: BTreeSet<usize> = [0, 1].into_iter().collect();
    let uniform = attribution_coverage(&a(&[0.5, 0.5, 0.0, 0.0]), &gt).map_err(|e| e.to_string())?;
    let missed = attribution_coverage(&a(&[0.0, 0.0, 1.0, 0.0]), &gt).map_err(|e| e.to_string())?;
    let window = attribution_coverage(&a(&[0.6, 0.1, 0.2, 0.1]), &gt).map_err(|e| e.to_string())?;
    ensure(uniform == 1.0 && missed == 0.0 && window == 0.5, || {
        format!("uniform {uniform}, missed {missed}, window {window}")
    })?;
    Ok("uniform 1.0, missed 0.0, window example 0.5 (exact)".into())
}

fn faithfulness_direction() -> Check {
    let mut rand_rng = rng(8);
    let mut cage_aucs = Vec::new();
    let mut row_aucs = Vec::new();
    let mut random_checked = 0usize;
    for seed in 0..20 {
        let critical = 3 + (seed as usize % 3);
        let (ex, spec) = generate_reasoning_example(critical, 6, seed).map_err(|e| e.to_string())?;
        let forced = MockBackend::for_example(spec.clone(), &ex).map_err(|e| e.to_string())?;
        let table = perturbation_table(&forced, &ex, &Ablation::eos_run(&forced), &ScoringOptions::default())
            .map_err(|e| e.to_string())?;
        let outputs: Vec<usize> = ex.output_indices().iter().copied().collect();
        let cage = attribute_output(&build_graph(&table, NormalizationMode::RowStochastic), &outputs, false)
            .map_err(|e| e.to_string())?;
        let row = row_attribution(&table, &outputs).map_err(|e| e.to_string())?;

        let live = MockBackend::for_example(spec, &ex)
            .map_err(|e| e.to_string())?
            .with_semantics(MockSemantics::Regenerating);
        let opts = DeletionOptions::new(Ablation::eos_run(&live));
        let curve = |a: &ContextAttribution| deletion_curve(&live, &ex, a, &opts).map(|c| c.auc);
        cage_aucs.push(curve(&cage).map_err(|e| e.to_string())?);
        row_aucs.push(curve(&row).map_err(|e| e.to_string())?);

        let p = ex.prompt_len();
        let gt = ex.gt_indices().ok_or("no ground truth")?;
        let indicator: Vec<f64> = (0..p).map(|j| if gt.contains(&j) { 1.0 } else { 0.0 }).collect();
        let gt_auc = curve(&ContextAttribution::new(indicator, outputs.clone(), "gt", None).unwrap())
            .map_err(|e| e.to_string())?;
        for k in 0..20 {
            let mut perm: Vec<usize> = (0..p).collect();
            perm.shuffle(&mut rand_rng);
            let mut scores = vec![0.0; p];
            for (rank, &j) in perm.iter().enumerate() {
                scores[j] = (p - rank) as f64;
            }
            let auc = curve(&ContextAttribution::new(scores, outputs.clone(), "random", None).unwrap())
                .map_err(|e| e.to_string())?;
            ensure(gt_auc <= auc, || format!("seed {seed} ordering {k}: GT auc {gt_auc} > random {auc}"))?;
            random_checked += 1;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, r) = (mean(&cage_aucs), mean(&row_aucs));
    ensure(c < r, || format!("mean auc cage {c:.4} >= row {r:.4}"))?;
    Ok(format!(
        "mean deletion auc cage {c:.4} < row {r:.4}; GT ordering <= {random_checked} random orderings"
    ))
}

fn constraint_ablation() -> Check {
    let signed = sentence_table(2, &[vec![1.0, -0.5], vec![0.2, 0.3, 3.0]]);
    let raw = attribute_token(&build_graph(&signed, NormalizationMode::RawPassthrough), 1).map_err(|e| e.to_string())?;
    let sum1 = attribute_token(&build_graph(&signed, NormalizationMode::RowStochastic), 1).map_err(|e| e.to_string())?;
    ensure(max_abs_diff(raw.scores(), &[3.2, -1.2]) < 1e-12, || format!("raw {:?}", raw.scores()))?;
    let gap = (raw.total() - 1.0).abs();
    ensure(gap > SIGNED_SUM_GAP, || format!("raw sum {}", raw.total()))?;
    let flips = raw
        .scores()
        .iter()
        .zip(sum1.scores())
        .filter(|(a, b)| a.signum() != b.signum() && **a != 0.0 && **b != 0.0)
        .count();
    ensure(flips >= 1, || "no sign flip".into())?;

    let two_hop = sentence_table(2, &[vec![0.8, 0.6], vec![0.5, 0.5, 0.9]]);
    let clamp = attribute_token(&build_graph(&two_hop, NormalizationMode::NonNegativeOnly), 1).map_err(|e| e.to_string())?;
    ensure(max_abs_diff(clamp.scores(), &[1.22, 1.04]) < 1e-12, || format!("clamp {:?}", clamp.scores()))?;
    ensure(clamp.total() > 1.0, || format!("clamp sum {}", clamp.total()))?;
    Ok(format!(
        "none: sum {:.2} ({} sign flip vs sum1); clamp: sum {:.2}",
        raw.total(),
        flips,
        clamp.total()
    ))
}

fn serialization() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut r = rng(10);
    for k in 0..50 {
        let table = random_table(&mut r, 40);
        let tp = dir.path().join(format!("table{k}.json"));
        table.save(&tp).map_err(|e| e.to_string())?;
        let back = import_table(&tp).map_err(|e| e.to_string())?;
        ensure(bits(back.values()) == bits(table.values()), || format!("table {k} differs"))?;

        let mode = NormalizationMode::ALL[k % 3];
        let g = build_graph(&table, mode);
        let gp = dir.path().join(format!("graph{k}.json"));
        g.save(&gp).map_err(|e| e.to_string())?;
        let gb = AttributionGraph::load(&gp).map_err(|e| e.to_string())?;
        ensure(bits(gb.adjacency()) == bits(g.adjacency()) && gb.mode() == mode, || format!("graph {k} differs"))?;

        let a = attribute_output(&g, &[g.generated_len() - 1], false).map_err(|e| e.to_string())?;
        let ap = dir.path().join(format!("attr{k}.json"));
        a.save(&ap).map_err(|e| e.to_string())?;
        let ab = ContextAttribution::load(&ap).map_err(|e| e.to_string())?;
        ensure(bits(ab.scores()) == bits(a.scores()) && ab == a, || format!("attribution {k} differs"))?;
    }
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"prompt_len":2,"total_len":4,"unit_level":"sentence","method_tag":"ig","values":[0.1,0.2,0.0,0.0,0.3,0.4,0.5,0.6]}"#,
    )
    .map_err(|e| e.to_string())?;
    match import_table(&bad) {
        Err(Error::Causality { row: 1, col: 3, .. }) => {}
        other => return Err(format!("causality violation not reported at (1, 3): {other:?}")),
    }
    Ok("50 table/graph/attribution files bitwise equal; violation reported at row 1, column 3".into())
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    check: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "row-stochastic construction", limit: Some(Duration::from_secs(5)), check: row_stochastic_construction },
        Criterion { id: 2, name: "propagation correctness", limit: Some(Duration::from_secs(10)), check: propagation_correctness },
        Criterion { id: 3, name: "conservation", limit: None, check: conservation },
        Criterion { id: 4, name: "degenerate-case equivalence", limit: None, check: degenerate_equivalence },
        Criterion { id: 5, name: "mock-oracle base method", limit: None, check: mock_oracle_base_method },
        Criterion { id: 6, name: "reuse-tracking effect", limit: None, check: figure_four_effect },
        Criterion { id: 7, name: "attribution coverage", limit: None, check: coverage_metric },
        Criterion { id: 8, name: "faithfulness direction", limit: Some(Duration::from_secs(60)), check: faithfulness_direction },
        Criterion { id: 9, name: "constraint ablation", limit: None, check: constraint_ablation },
        Criterion { id: 10, name: "serialization", limit: None, check: serialization },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => {
                Err(format!("took {:.2}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
            }
            (o, _) => o,
        };
        let limit = c.limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {}: {detail} [{:.2}s{limit}]", c.id, c.name, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {}: {why} [{:.2}s{limit}]", c.id, c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
