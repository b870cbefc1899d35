use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use nextutt::baseline::{comparison_csv, comparison_table, evaluate_table};
use nextutt::corpus::{build_vocabulary, compute_stats, is_tag, tokenize, DialogueExample, RankingGroup};
use nextutt::embed::{combine_embeddings, coverage as coverage_of, format_coverage_table, save_table, train_word2vec, Provenance};
use nextutt::esim::{
    ensemble_score_groups, load_checkpoint, save_checkpoint, token_signal_strength, train as train_esim, EsimModel,
    TrainOptions,
};
use nextutt::metrics::{evaluate, paired_report, rank_order, GroupScores, MetricsReport};

use crate::config::{require, ConfigError, RunConfig};
use crate::files::{named_path, read_groups, read_pairs, read_scores, read_table, write_scores};
use crate::{BaselineArgs, CombineArgs, CoverageArgs, EvalArgs, ExplainArgs, ModelArgs, RankArgs, StatsArgs, TrainArgs, TrainW2vArgs};

fn read_all_pairs(paths: &[PathBuf], cfg: &RunConfig) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_pairs(p, &cfg.corpus)?);
    }
    Ok(out)
}

fn inputs_or(paths: &[PathBuf], fallback: &Option<PathBuf>, flag: &str) -> Result<Vec<PathBuf>> {
    if !paths.is_empty() {
        return Ok(paths.to_vec());
    }
    Ok(vec![require(&None, fallback, flag)?])
}

pub fn stats(cfg: &RunConfig, a: &StatsArgs) -> Result<()> {
    let examples = read_all_pairs(&a.inputs, cfg)?;
    let s = compute_stats(&examples);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        print!("{s}");
    }
    Ok(())
}

/// Distinct contexts and distinct responses, in first-seen order.
fn sentences(examples: &[DialogueExample]) -> Vec<Vec<String>> {
    let mut seen: HashSet<&[String]> = HashSet::new();
    let mut out = Vec::new();
    for ex in examples {
        for s in [&ex.context, &ex.response] {
            if seen.insert(s.as_slice()) {
                out.push(s.clone());
            }
        }
    }
    out
}

pub fn train_w2v(cfg: &RunConfig, a: &TrainW2vArgs) -> Result<()> {
    let inputs = inputs_or(&a.inputs, &cfg.paths.train, "input")?;
    let output = require(&a.output, &cfg.paths.trained, "output")?;
    let examples = read_all_pairs(&inputs, cfg)?;
    let table = train_word2vec(&sentences(&examples), &cfg.word2vec.to_config())?;
    save_table(&table, &output).with_context(|| format!("writing {}", output.display()))?;
    println!("wrote {} vectors of dim {} to {}", table.len(), table.dim(), output.display());
    Ok(())
}

pub fn combine(cfg: &RunConfig, a: &CombineArgs) -> Result<()> {
    let pre_path = require(&a.pretrained, &cfg.paths.pretrained, "pretrained")?;
    let trained_path = require(&a.trained, &cfg.paths.trained, "trained")?;
    let output = require(&a.output, &cfg.paths.embeddings, "output")?;
    let corpus = inputs_or(&a.corpus, &cfg.paths.train, "corpus")?;
    let pre = read_table(&pre_path, cfg.corpus.vector_format, Provenance::Pretrained)?;
    let trained = read_table(&trained_path, cfg.corpus.vector_format, Provenance::Trained)?;
    let examples = read_all_pairs(&corpus, cfg)?;
    let vocab = build_vocabulary(&examples, cfg.corpus.min_count);
    let table = combine_embeddings(&pre, &trained, &vocab)?;
    save_table(&table, &output).with_context(|| format!("writing {}", output.display()))?;
    println!(
        "wrote {} vectors of dim {} ({} + {}) to {}",
        table.len(),
        table.dim(),
        pre.dim(),
        trained.dim(),
        output.display()
    );
    Ok(())
}

pub fn coverage(cfg: &RunConfig, a: &CoverageArgs) -> Result<()> {
    let examples = read_all_pairs(&a.corpus, cfg)?;
    let mut rows = Vec::new();
    for spec in &a.tables {
        let (name, path) = named_path(spec);
        let table = read_table(path, cfg.corpus.vector_format, Provenance::Pretrained)?;
        rows.push((name, coverage_of(&table, &examples)?));
    }
    if a.json {
        let map: serde_json::Map<String, serde_json::Value> =
            rows.iter().map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?))).collect::<Result<_>>()?;
        println!("{}", serde_json::to_string_pretty(&map)?);
    } else {
        let rows: Vec<(&str, _)> = rows.iter().map(|(n, r)| (n.as_str(), *r)).collect();
        print!("{}", format_coverage_table(&rows));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let train_path = require(&a.train, &cfg.paths.train, "train")?;
    let emb_path = require(&a.embeddings, &cfg.paths.embeddings, "embeddings")?;
    let out_dir = require(&a.output, &cfg.paths.checkpoint, "output")?;
    let train_set = read_pairs(&train_path, &cfg.corpus)?;
    let valid = match a.valid.as_ref().or(cfg.paths.valid.as_ref()) {
        Some(p) => read_groups(p, &cfg.corpus)?,
        None => Vec::new(),
    };
    let table = read_table(&emb_path, cfg.corpus.vector_format, Provenance::Combined)?;
    let vocab = build_vocabulary(&train_set, cfg.corpus.min_count);
    let model = EsimModel::new(cfg.esim.clone(), vocab, &table)?;

    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let log_path = out_dir.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    for line in cfg.to_toml().lines() {
        writeln!(log, "# {line}")?;
    }
    let opts = TrainOptions { max_steps: a.max_steps, log_every: a.log_every };
    let mut write_err = None;
    let outcome = train_esim(model, &train_set, &valid, &opts, &mut |line| {
        eprintln!("{line}");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    save_checkpoint(&outcome.best, &out_dir)?;
    match outcome.best_valid_r_at_1 {
        Some(r) => println!("saved best checkpoint (valid R@1 {r:.4}) after {} steps to {}", outcome.steps, out_dir.display()),
        None => println!("saved final checkpoint after {} steps to {}", outcome.steps, out_dir.display()),
    }
    Ok(())
}

fn load_models(cfg: &RunConfig, m: &ModelArgs) -> Result<Vec<EsimModel>> {
    let dirs = if m.ensemble.is_empty() {
        vec![require(&m.checkpoint, &cfg.paths.checkpoint, "checkpoint")?]
    } else {
        m.ensemble.clone()
    };
    dirs.iter()
        .map(|d| load_checkpoint(d).with_context(|| format!("loading checkpoint {}", d.display())))
        .collect()
}

fn strip(tokens: &[String]) -> Vec<String> {
    tokens.iter().filter(|t| !is_tag(t)).cloned().collect()
}

fn report(groups: &[GroupScores], cfg: &RunConfig) -> Result<MetricsReport> {
    Ok(evaluate(groups, cfg.metrics.filter_degenerate)?)
}

fn print_report(r: &MetricsReport, json: bool) {
    if json {
        println!("{}", r.to_json());
    } else {
        print!("{r}");
    }
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    if let Some(path) = &a.scores {
        let groups = read_scores(path)?;
        print_report(&report(&groups, cfg)?, a.json);
        return Ok(());
    }
    if a.paired && cfg.corpus.strip_tags {
        bail!(ConfigError("--paired needs corpus.strip_tags = false".into()));
    }
    let models = load_models(cfg, &a.model)?;
    let test_path = require(&a.test, &cfg.paths.test, "test")?;
    let groups = read_groups(&test_path, &cfg.corpus)?;
    let scored = ensemble_score_groups(&models, &groups)?;
    if let Some(p) = &a.save_scores {
        write_scores(p, &scored)?;
    }
    let with_tags = report(&scored, cfg)?;
    if !a.paired {
        print_report(&with_tags, a.json);
        return Ok(());
    }
    let stripped: Vec<RankingGroup> = groups.iter().map(|g| g.map_tokens(strip)).collect();
    let without = report(&ensemble_score_groups(&models, &stripped)?, cfg)?;
    let paired = paired_report(&with_tags, &without);
    if a.json {
        let rows: Vec<_> = paired
            .rows
            .iter()
            .map(|(m, x, y, d)| serde_json::json!({ "metric": m, "with_tags": x, "without_tags": y, "delta": d }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        println!("with tags");
        print!("{with_tags}");
        println!("without tags");
        print!("{without}");
        print!("{paired}");
    }
    Ok(())
}

fn tokens(cfg: &RunConfig, text: &str, what: &str) -> Result<Vec<String>> {
    let t = tokenize(text, cfg.corpus.pair_options().tokenize);
    if t.is_empty() {
        bail!(ConfigError(format!("{what} is empty after tokenization")));
    }
    Ok(t)
}

pub fn rank(cfg: &RunConfig, a: &RankArgs) -> Result<()> {
    let models = load_models(cfg, &a.model)?;
    let context = tokens(cfg, &a.context, "context")?;
    let file = File::open(&a.candidates).with_context(|| format!("opening {}", a.candidates.display()))?;
    let mut candidates = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        candidates.push((line.trim().to_string(), tokens(cfg, &line, &format!("candidate on line {}", i + 1))?));
    }
    if candidates.is_empty() {
        bail!(ConfigError(format!("{} has no candidates", a.candidates.display())));
    }
    let group = RankingGroup {
        context,
        candidates: candidates
            .iter()
            .map(|(_, t)| nextutt::corpus::Candidate { response: t.clone(), label: 0 })
            .collect(),
    };
    let scores = ensemble_score_groups(&models, std::slice::from_ref(&group))?.remove(0).scores;
    for (r, i) in rank_order(&scores).into_iter().enumerate() {
        println!("{}\t{:.6}\t{}", r + 1, scores[i], candidates[i].0);
    }
    Ok(())
}

/// The sequence with its `top` strongest distinct tokens in brackets.
fn highlight(ranked: &[(String, f64)], order: &[String], top: usize) -> String {
    let mut strong: Vec<&str> = Vec::new();
    for (t, _) in ranked {
        if strong.len() == top {
            break;
        }
        if !strong.contains(&t.as_str()) {
            strong.push(t);
        }
    }
    order
        .iter()
        .map(|t| if strong.contains(&t.as_str()) { format!("[{t}]") } else { t.clone() })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn explain(cfg: &RunConfig, a: &ExplainArgs) -> Result<()> {
    let dir = require(&a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let model = load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let context = tokens(cfg, &a.context, "context")?;
    let response = tokens(cfg, &a.response, "response")?;
    let s = token_signal_strength(&model, &context, &response)?;
    let mc = model.config.max_context;
    let shown_ctx = &context[context.len().saturating_sub(mc)..];
    let shown_resp = &response[..response.len().min(model.config.max_response)];
    println!("context:  {}", highlight(&s.context, shown_ctx, a.top));
    println!("response: {}", highlight(&s.response, shown_resp, a.top));
    for (side, ranked) in [("context", &s.context), ("response", &s.response)] {
        println!("{side} tokens by signal strength:");
        for (i, (t, v)) in ranked.iter().enumerate() {
            println!("{:>4}  {v:>10.6}  {t}", i + 1);
        }
    }
    Ok(())
}

pub fn baseline_eval(cfg: &RunConfig, a: &BaselineArgs) -> Result<()> {
    let test_path = require(&a.test, &cfg.paths.test, "test")?;
    let groups = read_groups(&test_path, &cfg.corpus)?;
    let mut rows = Vec::new();
    for spec in &a.tables {
        let (name, path) = named_path(spec);
        let table = read_table(path, cfg.corpus.vector_format, Provenance::Pretrained)?;
        rows.push((name, evaluate_table(&groups, &table, cfg.metrics.filter_degenerate)?));
    }
    let rows: Vec<(&str, MetricsReport)> = rows.iter().map(|(n, r)| (n.as_str(), *r)).collect();
    if a.csv {
        print!("{}", comparison_csv(&rows));
    } else {
        print!("{}", comparison_table(&rows));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn highlight_marks_distinct_top_tokens() {
        let ranked = vec![("b".to_string(), 3.0), ("b".to_string(), 2.0), ("a".to_string(), 1.0)];
        assert_eq!(highlight(&ranked, &t("a b c b"), 1), "a [b] c [b]");
        assert_eq!(highlight(&ranked, &t("a b c b"), 2), "[a] [b] c [b]");
    }

    #[test]
    fn sentences_are_distinct_in_order() {
        let ex = |c: &str, r: &str| DialogueExample { context: t(c), response: t(r), label: 1 };
        let s = sentences(&[ex("a b", "c"), ex("a b", "d"), ex("c", "a b")]);
        assert_eq!(s, vec![t("a b"), t("c"), t("d")]);
    }
}
