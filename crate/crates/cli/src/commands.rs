//! Subcommand implementations. Each returns the JSON lines it reports.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use knnbox::combiner::MetaTrainConfig;
use knnbox::compression::{fit_pca, prune, KnowledgeMarginPruner, PruneContext, Pruner, RedundancyPruner};
use knnbox::corpus::{read_tsv, write_tsv, ParallelCorpus};
use knnbox::datastore::Datastore;
use knnbox::fingerprint::to_hex;
use knnbox::model::{BaseModel, ModelConfig, TrainConfig};
use knnbox::pipeline::Pipeline;
use knnbox::retriever::IvfIndex;
use knnbox::synth::TwoDomain;
use knnbox::trace::TraceBuilder;
use knnbox::vocab::Vocab;
use serde_json::{json, Value};

use crate::args::*;
use crate::service;

pub const PCA_FILE: &str = "pca.bin";

/// Loads a TSV corpus named after its file stem.
pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<ParallelCorpus> {
    let pairs = read_tsv(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ParallelCorpus::from_text(name, vocab, &pairs)?)
}

pub fn load_pipeline(args: &PipelineArgs) -> Result<Pipeline> {
    Ok(Pipeline::load(&args.config())?)
}

pub fn run(command: Command) -> Result<Vec<Value>> {
    match command {
        Command::Synth(a) => synth(&a).map(|v| vec![v]),
        Command::TrainBase(a) => train_base(&a).map(|v| vec![v]),
        Command::Build(a) => build(&a).map(|v| vec![v]),
        Command::Ivf(a) => ivf(&a).map(|v| vec![v]),
        Command::Pca(a) => pca(&a).map(|v| vec![v]),
        Command::Prune(a) => prune_store(&a).map(|v| vec![v]),
        Command::TrainCombiner(a) => train_combiner(&a).map(|v| vec![v]),
        Command::Translate(a) => translate(&a),
        Command::Eval(a) => eval(&a).map(|v| vec![v]),
        Command::Serve(a) => serve(&a).map(|()| Vec::new()),
    }
}

pub fn synth(a: &SynthArgs) -> Result<Value> {
    std::fs::create_dir_all(&a.out)?;
    let data = TwoDomain::generate(a.seed);
    let splits = [
        ("train", data.train.clone()),
        ("datastore", data.datastore.clone()),
        ("heldout", data.heldout.clone()),
        ("test", data.test.clone()),
        ("mixed_heldout", data.mixed_heldout()),
        ("mixed_test", data.mixed_test()),
    ];
    let mut files = serde_json::Map::new();
    for (name, pairs) in &splits {
        let path = a.out.join(format!("{name}.tsv"));
        write_tsv(&path, pairs)?;
        files.insert(name.to_string(), json!({ "path": path, "pairs": pairs.len() }));
    }
    Ok(json!({ "command": "synth", "seed": a.seed, "files": files }))
}

pub fn train_base(a: &TrainBaseArgs) -> Result<Value> {
    let train_pairs = read_tsv(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let mut all = train_pairs.clone();
    for extra in &a.vocab_from {
        all.extend(read_tsv(extra).with_context(|| format!("reading {}", extra.display()))?);
    }
    let vocab = Vocab::build(&all, a.max_vocab)?;
    let corpus = load_corpus(&a.corpus, &vocab)?;
    let cfg = ModelConfig {
        dim: a.dim,
        window: a.window,
    };
    let mut model = BaseModel::new(vocab, cfg, a.seed)?;
    let report = model.train(
        &corpus,
        &TrainConfig {
            epochs: a.epochs,
            lr: a.lr,
            seed: a.seed,
        },
    )?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    model.save(&a.out)?;
    Ok(json!({
        "command": "train-base",
        "model": a.out,
        "vocab_size": model.vocab_size(),
        "dim": model.dim(),
        "window": model.window(),
        "fingerprint": to_hex(model.fingerprint()),
        "report": report,
    }))
}

pub fn build(a: &BuildArgs) -> Result<Value> {
    let model = BaseModel::load(&a.model)?;
    let corpus = load_corpus(&a.corpus, model.vocab())?;
    let ds = Datastore::build(&model, &corpus)?;
    ds.save(&a.out)?;
    Ok(json!({
        "command": "build",
        "datastore": a.out,
        "n": ds.len(),
        "dim": ds.dim(),
        "corpus": corpus.name,
        "fingerprint": to_hex(ds.fingerprint()),
    }))
}

pub fn ivf(a: &IvfArgs) -> Result<Value> {
    let ds = Datastore::load(&a.datastore)?;
    let (index, report) = IvfIndex::build(&ds, a.nlist, a.iters, a.seed)?;
    let index = index.with_default_nprobe(a.nprobe)?;
    index.save(&a.out)?;
    Ok(json!({
        "command": "ivf",
        "index": a.out,
        "nlist": index.nlist(),
        "nprobe": index.default_nprobe(),
        "kmeans": report,
    }))
}

pub fn pca(a: &PcaArgs) -> Result<Value> {
    let ds = Datastore::load(&a.datastore)?;
    let fit = fit_pca(&ds, a.dim, a.seed)?;
    let projected = fit.transform.apply_datastore(&ds)?;
    projected.save(&a.out)?;
    let pca_path = a.out.join(PCA_FILE);
    fit.transform.save(&pca_path)?;
    Ok(json!({
        "command": "pca",
        "datastore": a.out,
        "pca": pca_path,
        "dim_in": ds.dim(),
        "dim_out": a.dim,
        "explained_variance_ratio": fit.explained_variance_ratio,
        "iterations": fit.iterations,
        "fingerprint": to_hex(fit.transform.fingerprint()),
    }))
}

pub fn prune_store(a: &PruneArgs) -> Result<Value> {
    let ds = Datastore::load(&a.datastore)?;
    let model = a.model.as_ref().map(BaseModel::load).transpose()?;
    let corpus = match (&a.corpus, &model) {
        (Some(path), Some(m)) => Some(load_corpus(path, m.vocab())?),
        (Some(_), None) => bail!(knnbox::Error::InvalidParam("--corpus needs --model".into())),
        (None, _) => None,
    };
    let pruner: Box<dyn Pruner> = match a.method {
        PruneMethodArg::Margin => Box::new(KnowledgeMarginPruner { rank: a.rank }),
        PruneMethodArg::Redundant => {
            let mut p = RedundancyPruner::new(a.neighbors_checked)?;
            p.threshold = a.threshold;
            p.seed = a.seed;
            Box::new(p)
        }
    };
    let ctx = PruneContext {
        model: model.as_ref(),
        corpus: corpus.as_ref(),
    };
    let (pruned, report) = prune(pruner.as_ref(), &ds, &ctx)?;
    pruned.save(&a.out)?;
    Ok(json!({
        "command": "prune",
        "datastore": a.out,
        "n": ds.len(),
        "report": report,
        "transforms": pruned.meta().transform_kinds(),
    }))
}

pub fn train_combiner(a: &TrainCombinerArgs) -> Result<Value> {
    let pipeline = load_pipeline(&a.pipeline)?;
    let heldout = load_corpus(&a.corpus, pipeline.vocab())?;
    let cfg = MetaTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        seed: a.seed,
    };
    let combiner = pipeline.combiner_config();
    let (net, report) = pipeline.train_metanet(&heldout, combiner.k, combiner.temperature, a.hidden, &cfg)?;
    net.save(&a.out)?;
    Ok(json!({
        "command": "train-combiner",
        "metanet": a.out,
        "k": net.k(),
        "hidden": net.hidden(),
        "examples": heldout.target_tokens(),
        "report": report,
    }))
}

pub fn translate(a: &TranslateArgs) -> Result<Vec<Value>> {
    let pipeline = load_pipeline(&a.pipeline)?;
    let mut sources = a.text.clone();
    if let Some(path) = &a.input {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        sources.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    if sources.is_empty() {
        bail!(knnbox::Error::InvalidParam("nothing to translate: pass --text or --input".into()));
    }
    let builder = TraceBuilder::new(pipeline.vocab());
    sources
        .iter()
        .map(|text| {
            let ids = pipeline.vocab().encode(text);
            if ids.is_empty() {
                bail!(knnbox::Error::InvalidParam("empty source sentence".into()));
            }
            let g = pipeline.generate(&ids)?;
            let mut line = json!({
                "command": "translate",
                "source": text,
                "tokens": g.tokens,
                "text": pipeline.vocab().decode(g.content()),
                "score": g.score,
                "finished": g.finished,
            });
            if a.trace {
                line["traces"] = serde_json::to_value(builder.generation(&g))?;
            }
            Ok(line)
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<Value> {
    let pipeline = load_pipeline(&a.pipeline)?;
    let test = load_corpus(&a.corpus, pipeline.vocab())?;
    let report = pipeline.evaluate(&test, a.mode.into())?;
    let mut line = json!({ "command": "eval", "corpus": test.name });
    line["report"] = serde_json::to_value(&report)?;
    Ok(line)
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let pipeline = load_pipeline(&a.pipeline)?;
    let corpus = a
        .corpus
        .as_ref()
        .map(|p| load_corpus(p, pipeline.vocab()))
        .transpose()?;
    let state = Arc::new(service::AppState::new(pipeline, corpus));
    let addr = format!("{}:{}", a.host, a.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let line = json!({ "command": "serve", "listening": listener.local_addr()?.to_string() });
        println!("{line}");
        axum::serve(listener, service::router(state)).await?;
        Ok(())
    })
}

/// 2 for configuration problems (bad values, mismatched or missing
/// artifacts), 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<knnbox::Error>() {
            if e.is_config() {
                return 2;
            }
            if let knnbox::Error::Io(io) = e {
                if io.kind() == std::io::ErrorKind::NotFound {
                    return 2;
                }
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}
