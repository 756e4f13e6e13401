use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kmq_core::clustering::{kcenter_greedy, kmeans, load_clustering, Clustering, KMeansParams};
use kmq_core::corpus::{attach_scores, load_corpus, load_scores, save_selection, Corpus, CorpusFormat};
use kmq_core::diagnostics::{diagnose, write_diagnose_csv, DiagnoseOptions};
use kmq_core::iterative::{self, run_iterative, IterativeConfig, IterativeOutcome, ScoreDivisor};
use kmq_core::sampling::{
    allocate_budget, sample_kcenter, sample_km_closest, sample_km_random, sample_kmq, sample_random, SamplerConfig,
};
use kmq_core::scorer::{MockScorer, ScoreTransform};
use kmq_core::synth::{gaussian_mixture, MixtureSpec};
use kmq_core::{ClusterWeights, Error, Result, ScorerSpec, Selection, SelectionMethod};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{resolve_budget, RunConfig};
use crate::{Algorithm, BudgetArgs, Cli, ClusterSource, Command, CorpusArgs, Divisor, Format, IterationArgs, ScorerArgs};

/// `cli.json` in a state directory: what `kmq resume` needs beyond the
/// engine's own files.
#[derive(Debug, Serialize, Deserialize)]
struct CliState {
    run_config: RunConfig,
    corpus_sha256: String,
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Cluster {
            corpus,
            k,
            algorithm,
            restarts,
            max_iters,
            tol,
            out,
        } => cluster(cli, corpus, *k, *algorithm, *restarts, *max_iters, *tol, out),
        Command::Diagnose {
            corpus,
            ks,
            silhouette_sample,
            threshold,
            restarts,
            out,
            csv,
        } => diagnose_cmd(cli, corpus, ks, *silhouette_sample, *threshold, *restarts, out.as_deref(), csv.as_deref()),
        Command::Sample {
            corpus,
            method,
            clusters,
            budget,
            replacement,
            out,
        } => sample(cli, corpus, *method, clusters, budget, *replacement, out),
        Command::Iterate {
            corpus,
            clusters,
            budget,
            iteration,
            scorer,
            state_dir,
            out,
        } => iterate(cli, corpus, clusters, budget, iteration, scorer, state_dir.as_deref(), out),
        Command::Simulate {
            clusters,
            per_cluster,
            dim,
            deltas,
            noise,
            budget,
            iteration,
            state_dir,
            out,
        } => simulate(
            cli,
            *clusters,
            *per_cluster,
            *dim,
            deltas,
            *noise,
            budget,
            iteration,
            state_dir.as_deref(),
            out.as_deref(),
        ),
        Command::Resume { state_dir, corpus, out } => resume_cmd(cli, state_dir, corpus, out.as_deref()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn emit(cli: &Cli, text: String, value: Value) {
    match cli.format {
        Format::Text => print!("{text}"),
        Format::Json => println!("{}", serde_json::to_string_pretty(&value).expect("plain value")),
    }
}

fn load_inputs(paths: &[PathBuf], format: Option<CorpusFormat>, scores: Option<&Path>) -> Result<Corpus> {
    let load = |p: &PathBuf| load_corpus(p, format.unwrap_or_else(|| CorpusFormat::from_path(p)));
    let corpus = match paths {
        [] => return Err(Error::InvalidArgument("no corpus given".into())),
        [one] => load(one)?,
        many => {
            let mut all = Vec::new();
            for p in many {
                all.extend(load(p)?.to_instances());
            }
            Corpus::from_instances(all)?
        }
    };
    match scores {
        Some(p) => attach_scores(corpus, load_scores(p)?),
        None => Ok(corpus),
    }
}

fn load_args(args: &CorpusArgs) -> Result<Corpus> {
    load_inputs(&args.corpus, args.corpus_format, args.scores.as_deref())
}

fn with_corpus(mut cfg: RunConfig, args: &CorpusArgs) -> RunConfig {
    cfg.corpus = args.corpus.clone();
    cfg.scores = args.scores.clone();
    cfg
}

fn sizes_table(clustering: &Clustering) -> String {
    let mut s = String::from("cluster  size\n");
    for (j, n) in clustering.sizes().iter().enumerate() {
        s.push_str(&format!("{j:>7}  {n}\n"));
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn cluster(
    cli: &Cli,
    args: &CorpusArgs,
    k: usize,
    algorithm: Algorithm,
    restarts: usize,
    max_iters: usize,
    tol: f64,
    out: &Path,
) -> Result<()> {
    let mut cfg = with_corpus(RunConfig::new("cluster", cli.metric, cli.seed), args)
        .option("algorithm", format!("{algorithm:?}").to_lowercase())
        .option("restarts", restarts)
        .option("max_iters", max_iters)
        .option("tol", tol);
    cfg.k = Some(k);
    cfg.out = Some(out.to_path_buf());
    cfg.validate()?;
    let corpus = load_args(args)?;
    let clustering = match algorithm {
        Algorithm::Kmeans => kmeans(
            &corpus,
            &KMeansParams::new(k)
                .with_metric(cli.metric)
                .with_seed(cli.seed)
                .with_restarts(restarts)
                .with_max_iters(max_iters)
                .with_tol(tol),
        )?,
        Algorithm::Kcenter => kcenter_greedy(&corpus, k, cli.metric, cli.seed)?,
    };
    let mut file = clustering.to_file();
    file.provenance = Some(cfg.provenance(&corpus.content_hash()));
    write_json(out, &file)?;
    let text = format!(
        "k = {k}\nk-means objective = {:.6}\nk-center objective = {:.6}\n{}wrote {}\n",
        clustering.kmeans_objective(),
        clustering.kcenter_objective(),
        sizes_table(&clustering),
        out.display()
    );
    emit(
        cli,
        text,
        json!({
            "k": k,
            "kmeans_objective": clustering.kmeans_objective(),
            "kcenter_objective": clustering.kcenter_objective(),
            "sizes": clustering.sizes(),
            "out": out,
        }),
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn diagnose_cmd(
    cli: &Cli,
    args: &CorpusArgs,
    ks: &[usize],
    silhouette_sample: Option<usize>,
    threshold: f64,
    restarts: usize,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    let mut cfg = with_corpus(RunConfig::new("diagnose", cli.metric, cli.seed), args)
        .option("silhouette_sample", silhouette_sample)
        .option("restarts", restarts)
        .option("csv", csv);
    cfg.ks = Some(ks.to_vec());
    cfg.threshold = Some(threshold);
    cfg.out = out.map(Path::to_path_buf);
    cfg.validate()?;
    let corpus = load_args(args)?;
    let report = diagnose(
        &corpus,
        ks,
        &DiagnoseOptions {
            metric: cli.metric,
            seed: cli.seed,
            silhouette_sample,
            threshold: Some(threshold),
            restarts,
        },
    )?;
    let mut text = String::from("     k        objective  silhouette  below-threshold\n");
    for e in &report.entries {
        let below = e.fraction_below.map(|f| format!("{:.1}%", f * 100.0)).unwrap_or_else(|| "-".into());
        text.push_str(&format!(
            "{:>6}  {:>15.6}  {:>10.1}  {:>15}\n",
            e.k,
            e.kmeans_objective,
            e.silhouette * 100.0,
            below
        ));
    }
    text.push_str(&format!("recommended k (silhouette argmax) = {}\n", report.recommended_k));
    if let Some(knee) = report.elbow_knee {
        text.push_str(&format!("elbow knee = {knee} (not applied)\n"));
    }
    let mut doc = cfg.provenance(&corpus.content_hash());
    doc["report"] = serde_json::to_value(&report)?;
    if let Some(p) = out {
        write_json(p, &doc)?;
    }
    if let Some(p) = csv {
        write_diagnose_csv(&report, p)?;
    }
    emit(cli, text, serde_json::to_value(&report)?);
    Ok(())
}

fn obtain_clustering(cli: &Cli, corpus: &Corpus, src: &ClusterSource) -> Result<Clustering> {
    match (&src.clustering, src.k) {
        (Some(path), _) => load_clustering(path, corpus),
        (None, Some(k)) => kmeans(
            corpus,
            &KMeansParams::new(k)
                .with_metric(cli.metric)
                .with_seed(cli.seed)
                .with_restarts(src.restarts),
        ),
        (None, None) => Err(Error::InvalidArgument("pass --k or --clustering".into())),
    }
}

fn with_clusters(mut cfg: RunConfig, src: &ClusterSource) -> RunConfig {
    cfg.k = src.k;
    cfg.clustering = src.clustering.clone();
    cfg.option("restarts", src.restarts)
}

fn finish_selection(mut sel: Selection, cfg: &RunConfig, corpus: &Corpus) -> Selection {
    if let Value::Object(p) = cfg.provenance(&corpus.content_hash()) {
        sel.params.extend(p);
    }
    sel
}

#[allow(clippy::too_many_arguments)]
fn sample(
    cli: &Cli,
    args: &CorpusArgs,
    method: SelectionMethod,
    clusters: &ClusterSource,
    budget: &BudgetArgs,
    replacement: bool,
    out: &Path,
) -> Result<()> {
    if method == SelectionMethod::IterativeKmq {
        return Err(Error::InvalidArgument("use `kmq iterate` for iterative selection".into()));
    }
    let mut cfg = with_clusters(with_corpus(RunConfig::new("sample", cli.metric, cli.seed), args), clusters)
        .option("budget_ratio", budget.budget_ratio);
    cfg.method = Some(method);
    cfg.replacement = replacement;
    cfg.out = Some(out.to_path_buf());
    cfg.budget = budget.budget;
    cfg.validate()?;
    if method.uses_clusters() && clusters.k.is_none() && clusters.clustering.is_none() {
        return Err(Error::InvalidArgument(format!("{method} needs --k or --clustering")));
    }
    let corpus = load_args(args)?;
    let b = resolve_budget(budget.budget, budget.budget_ratio, corpus.len())?;
    cfg.budget = Some(b);
    let sampler = SamplerConfig::new(method).with_seed(cli.seed).with_replacement(replacement);
    let (sel, plan) = match method {
        SelectionMethod::Random => (sample_random(&corpus, b, &sampler)?, None),
        SelectionMethod::KCenter => (sample_kcenter(&corpus, b, cli.metric, &sampler)?, None),
        _ => {
            let clustering = obtain_clustering(cli, &corpus, clusters)?;
            let plan = allocate_budget(&clustering, b, None, replacement)?;
            let sel = match method {
                SelectionMethod::Kmq => sample_kmq(&corpus, &clustering, &plan, &sampler)?,
                SelectionMethod::KmRandom => sample_km_random(&corpus, &clustering, &plan, &sampler)?,
                _ => sample_km_closest(&corpus, &clustering, &plan, &sampler)?,
            };
            (sel, Some(plan.per_cluster))
        }
    };
    let sel = finish_selection(sel, &cfg, &corpus);
    save_selection(&sel, out)?;
    let mut text = format!(
        "method = {method}\nbudget = {b}\nselected ids = {}\n",
        sel.ids.len()
    );
    if let Some(p) = &plan {
        text.push_str(&format!("per-cluster budget = {p:?}\n"));
    }
    text.push_str(&format!("wrote {}\n", out.display()));
    emit(
        cli,
        text,
        json!({"method": method, "budget": b, "selected": sel.ids.len(), "per_cluster_budget": plan, "out": out}),
    );
    Ok(())
}

fn scorer_spec(a: &ScorerArgs, seed: u64) -> Result<ScorerSpec> {
    let transform = if a.perplexity {
        ScoreTransform::Perplexity
    } else {
        ScoreTransform::Raw
    };
    if let Some(path) = &a.scorer_file {
        return Ok(ScorerSpec::File {
            path: path.clone(),
            transform,
        });
    }
    if let Some(program) = &a.scorer_command {
        return Ok(ScorerSpec::Command {
            program: program.clone(),
            args: a.scorer_args.clone(),
            timeout_secs: a.scorer_timeout,
            transform,
        });
    }
    if let Some(deltas) = &a.mock_deltas {
        return Ok(ScorerSpec::Mock {
            deltas: deltas.clone(),
            noise: a.mock_noise,
            seed,
        });
    }
    Err(Error::InvalidArgument(
        "pass one of --scorer-file, --scorer-command or --mock-deltas".into(),
    ))
}

fn iterative_config(budget: usize, it: &IterationArgs, seed: u64, scorer: ScorerSpec) -> Result<IterativeConfig> {
    if !it.no_weight_cap && (!it.weight_cap.is_finite() || it.weight_cap <= 1.0) {
        return Err(Error::InvalidArgument(format!("--weight-cap must exceed 1, got {}", it.weight_cap)));
    }
    let mut c = IterativeConfig::new(budget).with_iterations(it.iterations).with_seed(seed);
    c.replacement = it.replacement;
    c.score_new_only = it.score_new_only;
    c.divisor = match it.divisor {
        Divisor::Scored => ScoreDivisor::Scored,
        Divisor::ClusterSize => ScoreDivisor::ClusterSize,
    };
    c.weight_change_cap = (!it.no_weight_cap).then_some(it.weight_cap);
    c.scorer = Some(scorer);
    Ok(c)
}

fn with_iteration(mut cfg: RunConfig, it: &IterationArgs) -> RunConfig {
    cfg.iterations = Some(it.iterations);
    cfg.replacement = it.replacement;
    cfg.option("score_new_only", it.score_new_only)
        .option("divisor", format!("{:?}", it.divisor).to_lowercase())
        .option("weight_cap", (!it.no_weight_cap).then_some(it.weight_cap))
}

fn iteration_table(outcome: &IterativeOutcome) -> String {
    let mut s = String::from("iter  budget  cumulative  weights\n");
    let mut total = 0;
    for r in &outcome.records {
        total += r.selected.len();
        let w: Vec<String> = r.weights_after.as_slice().iter().map(|w| format!("{w:.4}")).collect();
        s.push_str(&format!("{:>4}  {:>6}  {:>10}  [{}]\n", r.iteration, r.budget, total, w.join(", ")));
    }
    s
}

fn scorer_hint(e: Error, state_dir: Option<&Path>) -> Error {
    match (&e, state_dir) {
        (Error::Scorer(m), Some(dir)) => Error::Scorer(format!(
            "{m}; finished iterations are saved, continue with `kmq resume --state-dir {}`",
            dir.display()
        )),
        _ => e,
    }
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    cli: &Cli,
    args: &CorpusArgs,
    clusters: &ClusterSource,
    budget: &BudgetArgs,
    it: &IterationArgs,
    scorer: &ScorerArgs,
    state_dir: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let spec = scorer_spec(scorer, cli.seed)?;
    let mut cfg = with_iteration(
        with_clusters(with_corpus(RunConfig::new("iterate", cli.metric, cli.seed), args), clusters),
        it,
    )
    .option("budget_ratio", budget.budget_ratio);
    cfg.method = Some(SelectionMethod::IterativeKmq);
    cfg.budget = budget.budget;
    cfg.scorer = Some(spec.clone());
    cfg.out = Some(out.to_path_buf());
    cfg.state_dir = state_dir.map(Path::to_path_buf);
    cfg.validate()?;
    if let Some(dir) = state_dir {
        if dir.join("run.json").exists() {
            return Err(Error::State(format!(
                "{} already holds a run; use `kmq resume` or another directory",
                dir.display()
            )));
        }
    }
    let corpus = load_args(args)?;
    let b = resolve_budget(budget.budget, budget.budget_ratio, corpus.len())?;
    cfg.budget = Some(b);
    cfg.validate()?;
    let clustering = obtain_clustering(cli, &corpus, clusters)?;
    let icfg = iterative_config(b, it, cli.seed, spec.clone())?;
    let hash = corpus.content_hash();
    if let Some(dir) = state_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut file = clustering.to_file();
        file.provenance = Some(cfg.provenance(&hash));
        write_json(&dir.join("clustering.json"), &file)?;
        write_json(
            &dir.join("cli.json"),
            &CliState {
                run_config: cfg.clone(),
                corpus_sha256: hash.clone(),
            },
        )?;
    }
    let mut scorer = spec.build(&clustering)?;
    let outcome = run_iterative(&corpus, &clustering, &icfg, scorer.as_mut(), state_dir)
        .map_err(|e| scorer_hint(e, state_dir))?;
    report_iterative(cli, &cfg, &corpus, outcome, out)
}

fn report_iterative(cli: &Cli, cfg: &RunConfig, corpus: &Corpus, outcome: IterativeOutcome, out: &Path) -> Result<()> {
    let text = format!("{}wrote {}\n", iteration_table(&outcome), out.display());
    let records: Vec<Value> = outcome
        .records
        .iter()
        .map(|r| json!({"iteration": r.iteration, "budget": r.budget, "weights": r.weights_after}))
        .collect();
    let sel = finish_selection(outcome.selection, cfg, corpus);
    save_selection(&sel, out)?;
    emit(cli, text, json!({"selected": sel.ids.len(), "iterations": records, "out": out}));
    Ok(())
}

fn resume_cmd(cli: &Cli, state_dir: &Path, corpus_override: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let state: CliState = read_json(&state_dir.join("cli.json"))?;
    let cfg = state.run_config;
    let paths = if corpus_override.is_empty() {
        cfg.corpus.clone()
    } else {
        corpus_override.to_vec()
    };
    let corpus = load_inputs(&paths, None, cfg.scores.as_deref())?;
    if corpus.content_hash() != state.corpus_sha256 {
        return Err(Error::State("corpus differs from the one the run started with".into()));
    }
    let clustering = load_clustering(state_dir.join("clustering.json"), &corpus)?;
    let run = iterative::load_run(state_dir)?;
    let spec = run
        .config
        .scorer
        .clone()
        .ok_or_else(|| Error::State("run has no scorer description".into()))?;
    let mut scorer = spec.build(&clustering)?;
    let outcome = iterative::resume(state_dir, &corpus, &clustering, scorer.as_mut())
        .map_err(|e| scorer_hint(e, Some(state_dir)))?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::InvalidArgument("pass --out".into()))?;
    report_iterative(cli, &cfg, &corpus, outcome, &out)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    cli: &Cli,
    clusters: usize,
    per_cluster: usize,
    dim: usize,
    deltas: &[f64],
    noise: f64,
    budget: &BudgetArgs,
    it: &IterationArgs,
    state_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    if deltas.len() != clusters {
        return Err(Error::InvalidArgument(format!(
            "{} deltas for {clusters} clusters",
            deltas.len()
        )));
    }
    let spec = ScorerSpec::Mock {
        deltas: deltas.to_vec(),
        noise,
        seed: cli.seed,
    };
    let mut cfg = with_iteration(RunConfig::new("simulate", cli.metric, cli.seed), it)
        .option("clusters", clusters)
        .option("per_cluster", per_cluster)
        .option("dim", dim)
        .option("budget_ratio", budget.budget_ratio);
    cfg.k = Some(clusters);
    cfg.method = Some(SelectionMethod::IterativeKmq);
    cfg.budget = budget.budget;
    cfg.scorer = Some(spec.clone());
    cfg.out = out.map(Path::to_path_buf);
    cfg.state_dir = state_dir.map(Path::to_path_buf);
    cfg.validate()?;
    let mut mix = MixtureSpec::new(clusters * per_cluster, dim, clusters);
    mix.quality = (0.2, 1.0);
    let syn = gaussian_mixture(&mix, cli.seed)?;
    let corpus = syn.corpus;
    // The planted partition is the clustering, so cluster j is component j.
    let clustering = Clustering::from_labels(&corpus, &syn.labels, clusters, cli.metric)?;
    let b = resolve_budget(budget.budget, budget.budget_ratio, corpus.len())?;
    cfg.budget = Some(b);
    cfg.validate()?;
    let icfg = iterative_config(b, it, cli.seed, spec)?;
    let mut mock = MockScorer::by_cluster(&clustering, deltas.to_vec(), noise, cli.seed)?;
    let outcome = run_iterative(&corpus, &clustering, &icfg, &mut mock, state_dir)?;

    let mut trajectory = vec![ClusterWeights::uniform(clusters)];
    let mut rows = Vec::new();
    let mut cumulative = 0;
    for r in &outcome.records {
        trajectory.push(r.weights_after.clone());
        cumulative += r.selected.len();
        let share: Vec<f64> = r.per_cluster_budget.iter().map(|&x| x as f64 / r.budget as f64).collect();
        rows.push(json!({
            "iteration": r.iteration,
            "budget": r.budget,
            "per_cluster_budget": r.per_cluster_budget,
            "selection_share": share,
            "cumulative_selected": cumulative,
            "weights": r.weights_after,
        }));
    }
    let mut doc = cfg.provenance(&corpus.content_hash());
    doc["report"] = json!({
        "clusters": clusters,
        "sizes": clustering.sizes(),
        "deltas": deltas,
        "weight_trajectory": trajectory,
        "iterations": rows,
        "final_weights": outcome.weights,
        "selected": outcome.selection.ids.len(),
    });
    if let Some(p) = out {
        write_json(p, &doc)?;
    }
    let mut text = iteration_table(&outcome);
    text.push_str(&format!("final weights = {:.4?}\n", outcome.weights.as_slice()));
    emit(cli, text, doc["report"].clone());
    Ok(())
}
