use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use msm_core::config::RunConfig;
use msm_core::corpus::io::{
    read_documents, read_pairs, read_vocab, write_alignment, write_documents, write_pairs,
    write_vocab,
};
use msm_core::corpus::{segment_all, Sentence};
use msm_core::experiments::{
    ablation_grid, claim_run_dir, collect_results, finetune_in_dir, msm_gradient_check, prepare_transfer,
    pretrain_in_dir, run_grid, runs_root, RunManifest, CONFIG_FILE,
};
use msm_core::pretrain::load_checkpoint;
use msm_core::retriever::{
    encode_corpus, evaluate, read_qrels, read_run, read_vectors, search, write_qrels, write_run,
    write_vectors, Metric, Run, TokenizedPair,
};

use crate::{Command, Global, UsageError};

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow!(UsageError(e.to_string()))
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        if !path.is_file() {
            bail!(UsageError(format!("config file not found: {}", path.display())));
        }
        cfg.apply_file(path).map_err(usage)?;
    }
    cfg.apply_overrides(&g.overrides).map_err(usage)?;
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!(UsageError(format!("input not found: {}", path.display())));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(command: Command, g: &Global) -> Result<ExitCode> {
    let cfg = load_config(g)?;
    match command {
        Command::GenCorpus { out } => gen_corpus(&cfg, &out)?,
        Command::Pretrain { docs, vocab, out } => pretrain(&cfg, &docs, &vocab, out)?,
        Command::Finetune {
            checkpoint,
            pairs,
            vocab,
            out,
        } => finetune(&cfg, &checkpoint, &pairs, &vocab, out)?,
        Command::Encode {
            checkpoint,
            vocab,
            pairs,
            side,
            out,
        } => encode(&checkpoint, &vocab, &pairs, &side, &out)?,
        Command::Search {
            queries,
            passages,
            k,
            out,
            tag,
        } => search_cmd(&queries, &passages, k, &out, &tag)?,
        Command::Eval {
            run,
            qrels,
            metric,
            pairs,
        } => eval(&run, &qrels, &metric, pairs.as_deref())?,
        Command::Ablate { name, seeds, exp } => ablate(&cfg, &name, &seeds, exp)?,
        Command::Gradcheck { dim, attach_alpha } => return gradcheck(&cfg, dim, attach_alpha),
        Command::Report { exp, format } => report(&exp, &format)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = prepare_transfer(cfg).map_err(usage)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_documents(&out.join("docs.jsonl"), &data.train_raw)?;
    write_documents(&out.join("heldout.jsonl"), &data.test_raw)?;
    write_alignment(&out.join("alignment.tsv"), &data.corpus.alignment)?;
    write_vocab(&out.join("vocab.txt"), &data.vocab)?;
    write_pairs(&out.join("train_pairs.tsv"), &data.ft_raw_pairs)?;
    for set in &data.eval {
        write_pairs(&out.join(format!("eval_{}.tsv", set.lang)), &set.pairs)?;
        write_qrels(&out.join(format!("eval_{}.qrels", set.lang)), &set.qrels)?;
    }
    write(&out.join(CONFIG_FILE), &cfg.snapshot())?;
    println!(
        "{} train docs, {} held-out docs, {} fine-tuning pairs ({}), vocab {} -> {}",
        data.train_raw.len(),
        data.test_raw.len(),
        data.ft_raw_pairs.len(),
        cfg.ft_lang,
        data.vocab.len(),
        out.display()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, docs: &Path, vocab: &Path, out: Option<PathBuf>) -> Result<()> {
    require_file(docs)?;
    require_file(vocab)?;
    let dir = out.unwrap_or_else(|| {
        runs_root()
            .join("pretrain")
            .join(cfg.sharing.to_string())
            .join(cfg.seed.to_string())
    });
    let vocab_t = read_vocab(vocab)?;
    let raw = read_documents(docs)?;
    let segmented = segment_all(&raw, &vocab_t)?;
    claim_run_dir(&dir, cfg)?;
    let mut manifest = RunManifest::start("pretrain", cfg, &[docs, vocab])?;
    manifest.save(&dir)?;
    let model = pretrain_in_dir(&dir, cfg, &segmented, vocab_t.len())?;
    manifest.finish();
    manifest.save(&dir)?;
    println!(
        "pretrained {} steps, {} parameters -> {}",
        cfg.total_steps,
        model.params.num_scalars(),
        dir.display()
    );
    Ok(())
}

fn finetune(cfg: &RunConfig, checkpoint: &Path, pairs: &Path, vocab: &Path, out: Option<PathBuf>) -> Result<()> {
    require_file(checkpoint)?;
    require_file(pairs)?;
    require_file(vocab)?;
    let dir = out.unwrap_or_else(|| runs_root().join("finetune").join("default").join(cfg.seed.to_string()));
    let ckpt = load_checkpoint(checkpoint)?;
    let vocab_t = read_vocab(vocab)?;
    let tokenized: Vec<TokenizedPair> = read_pairs(pairs)?
        .iter()
        .map(|p| TokenizedPair::new(p, &vocab_t))
        .collect();
    claim_run_dir(&dir, cfg)?;
    let ckpt_manifest = checkpoint.join(msm_core::numerics::checkpoint::MANIFEST_FILE);
    let mut manifest = RunManifest::start("finetune", cfg, &[&ckpt_manifest, pairs, vocab])?;
    manifest.save(&dir)?;
    finetune_in_dir(&dir, cfg, &ckpt.model, &tokenized)?;
    manifest.finish();
    manifest.save(&dir)?;
    println!("fine-tuned on {} pairs -> {}", tokenized.len(), dir.display());
    Ok(())
}

fn encode(checkpoint: &Path, vocab: &Path, pairs: &Path, side: &str, out: &Path) -> Result<()> {
    require_file(checkpoint)?;
    require_file(pairs)?;
    require_file(vocab)?;
    let model = load_checkpoint(checkpoint)?.model;
    let vocab_t = read_vocab(vocab)?;
    let pairs = read_pairs(pairs)?;
    let mut seen = std::collections::HashSet::new();
    let items: Vec<(String, Sentence)> = match side {
        "query" => pairs
            .iter()
            .map(|p| (p.query_id.clone(), Sentence::from_text(&p.query_text, &vocab_t)))
            .collect(),
        _ => pairs
            .iter()
            .filter(|p| seen.insert(p.passage_id.clone()))
            .map(|p| (p.passage_id.clone(), Sentence::from_text(&p.passage_text, &vocab_t)))
            .collect(),
    };
    let encoded = encode_corpus(&model, &items)?;
    write_vectors(out, &encoded)?;
    println!("encoded {} {side} vectors -> {}", items.len(), out.display());
    Ok(())
}

fn search_cmd(queries: &Path, passages: &Path, k: usize, out: &Path, tag: &str) -> Result<()> {
    require_file(queries)?;
    require_file(passages)?;
    if k == 0 {
        bail!(UsageError("--k must be positive".into()));
    }
    let q = read_vectors(queries)?;
    let p = read_vectors(passages)?;
    let hits = search(&q.vectors, &p, k)?;
    let run: Run = q.ids.into_iter().zip(hits).collect();
    write_run(out, &run, tag)?;
    println!("searched {} queries -> {}", run.len(), out.display());
    Ok(())
}

fn eval(run: &Path, qrels: &Path, metric: &str, pairs: Option<&Path>) -> Result<()> {
    let metrics: Vec<Metric> = metric
        .split(',')
        .map(|m| m.trim().parse::<Metric>().map_err(usage))
        .collect::<Result<_>>()?;
    require_file(run)?;
    require_file(qrels)?;
    let needs_lengths = metrics.iter().any(|m| matches!(m, Metric::KiloTokenRecall(_)));
    let lengths: Option<HashMap<String, usize>> = match pairs {
        Some(p) => {
            require_file(p)?;
            Some(
                read_pairs(p)?
                    .into_iter()
                    .map(|x| (x.passage_id, x.passage_text.split_whitespace().count()))
                    .collect(),
            )
        }
        None if needs_lengths => bail!(UsageError(
            "token-budget metrics need --pairs for passage lengths".into()
        )),
        None => None,
    };
    let values = evaluate(&read_run(run)?, &read_qrels(qrels)?, &metrics, lengths.as_ref())?;
    let line: Vec<String> = values.iter().map(|(m, v)| format!("{m}\t{v}")).collect();
    println!("{}", line.join("\t"));
    Ok(())
}

fn ablate(cfg: &RunConfig, name: &str, seeds: &str, exp: Option<String>) -> Result<()> {
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| usage(format!("seed `{s}`: {e}"))))
        .collect::<Result<_>>()?;
    let settings = ablation_grid(name).map_err(usage)?;
    let root = runs_root();
    let exp = exp.unwrap_or_else(|| name.to_string());
    let table = run_grid(&root, &exp, cfg, &settings, &seeds, |l| eprintln!("{l}"))?;
    let dir = root.join(&exp);
    write(&dir.join("report.tsv"), &table.to_tsv())?;
    write(&dir.join("report.md"), &table.to_markdown())?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, dim: usize, attach_alpha: bool) -> Result<ExitCode> {
    if dim == 0 {
        bail!(UsageError("--dim must be positive".into()));
    }
    let report = msm_gradient_check(dim, attach_alpha, cfg.seed)?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "max_rel_error\t{:e}\ttolerance\t{:e}\tcoords\t{}\t{verdict}",
        report.max_rel_error, report.tolerance, report.coords_checked
    );
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn report(exp: &str, format: &str) -> Result<()> {
    let table = collect_results(&runs_root(), exp)?;
    match format {
        "markdown" => print!("{}", table.to_markdown()),
        _ => print!("{}", table.to_tsv()),
    }
    Ok(())
}
