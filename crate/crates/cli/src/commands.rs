use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use encgen::config::RunConfig;
use encgen::data::{
    load_corpus, prepare_items, read_feature_file, synth_dataset, tokenize, Corpus, SynthConfig,
    Vocabulary,
};
use encgen::data::corpus::parse_feature_ref;
use encgen::generation::{generate, GenerationConfig};
use encgen::metrics::{evaluate_corpus, EvalItem};
use encgen::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use encgen::multimodal::{assemble_input, InputMode, Slot};
use encgen::probe::{
    attention_summary, random_model, xsim_per_layer, Centering, ProbeReport, RANDOM_LABEL,
};
use encgen::training::{run_stage, StageInputs, TrainingItem, TrainingStage};
use encgen::{Error, Result};

use crate::{Cli, Command, EvalArgs, GenerateArgs, ModeArg, ProbeArgs, SynthArgs, TrainArgs};

/// Producing command and seed, embedded in every artifact.
struct Provenance {
    command: String,
    seed: u64,
}

impl Provenance {
    fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("command".to_string(), self.command.clone()),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }

    fn comment_header(&self) -> String {
        format!("# command={}\n# seed={}\n", self.command, self.seed)
    }
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    let prov = Provenance {
        command: std::iter::once("encgen")
            .chain(argv.iter().skip(1).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" "),
        seed: cli.seed,
    };
    println!("command={}", prov.command);
    println!("seed={}", prov.seed);
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Synth(a) => synth(cli, a, &prov),
        Command::Train(a) => train(cli, a, &config, &prov),
        Command::Generate(a) => generate_questions(cli, a, &config, &prov),
        Command::Eval(a) => eval(cli, a, &prov),
        Command::Probe(a) => probe(cli, a, &config, &prov),
    }
}

fn print_config(config: &RunConfig, model: &ModelConfig) {
    print!("{}", config.render(model));
}

fn synth(cli: &Cli, a: &SynthArgs, prov: &Provenance) -> Result<()> {
    let cfg = SynthConfig {
        seed: cli.seed,
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        refs_per_item: a.refs,
        num_regions: a.num_regions,
        feature_dim: a.feature_dim,
    };
    println!(
        "n_train={}\nn_val={}\nn_test={}\nrefs_per_item={}\nnum_regions={}\nfeature_dim={}",
        cfg.n_train, cfg.n_val, cfg.n_test, cfg.refs_per_item, cfg.num_regions, cfg.feature_dim
    );
    let files = synth_dataset(&cli.out, &cfg, &prov.meta())?;
    println!("wrote {}", files.manifest.display());
    Ok(())
}

fn corpus_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.jsonl"))
}

/// Region count and feature width of the first feature file a corpus uses.
fn feature_shape(data: &Path, corpus: &Corpus) -> Result<(usize, usize)> {
    let first = corpus
        .items
        .first()
        .ok_or_else(|| Error::Empty("corpus has no items".into()))?;
    let (file, _) = parse_feature_ref(&first.feature_ref)?;
    let set = read_feature_file(&data.join(file))?;
    Ok((set.num_regions, set.feature_dim))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)?.0)
}

/// A checkpoint must describe the same model the data and config call for.
fn check_matches(path: &Path, model: &Model, expected: &ModelConfig) -> Result<()> {
    if model.config() != expected {
        return Err(Error::Dimension(format!(
            "checkpoint {} has config {:?}, data and config give {:?}",
            path.display(),
            model.config(),
            expected
        )));
    }
    Ok(())
}

fn prerequisite(given: &Option<PathBuf>, default: PathBuf, what: &str, stage: &str) -> Result<PathBuf> {
    let path = given.clone().unwrap_or(default);
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "stage {stage} needs a {what} checkpoint; {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn train(cli: &Cli, a: &TrainArgs, config: &RunConfig, prov: &Provenance) -> Result<()> {
    let stage = TrainingStage::parse(&a.stage)?;
    let vocab = Vocabulary::load(&a.data.join("vocab.txt"))?;
    let corpus = load_corpus(&corpus_path(&a.data, "train"))?;
    let (num_regions, feature_dim) = feature_shape(&a.data, &corpus)?;
    let model_cfg = config.resolve_model(vocab.len(), feature_dim, num_regions)?;
    println!("stage={}", stage.name());
    print_config(config, &model_cfg);
    let items = prepare_items(&corpus, &a.data, &vocab, &model_cfg)?;

    let load_checked = |path: &Path| -> Result<Model> {
        let m = load_model(path)?;
        check_matches(path, &m, &model_cfg)?;
        Ok(m)
    };
    let caption_path = if stage.needs_caption_model() {
        Some(prerequisite(&a.stage1, cli.out.join("stage1.ckpt"), "stage-1", stage.name())?)
    } else {
        a.stage1.clone()
    };
    let image_path = if stage.needs_image_model() {
        Some(prerequisite(&a.stage2, cli.out.join("stage2.ckpt"), "stage-2", stage.name())?)
    } else {
        a.stage2.clone()
    };
    let caption_model = caption_path.as_deref().map(load_checked).transpose()?;
    let image_model = image_path.as_deref().map(load_checked).transpose()?;
    let inputs = StageInputs {
        caption_model: caption_model.as_ref(),
        image_model: image_model.as_ref(),
    };

    let plan = config.plan(stage, cli.seed);
    let outcome = run_stage(&plan, &model_cfg, &items, inputs)?;

    let mut meta = prov.meta();
    meta.insert("stage".into(), stage.name().into());
    let ckpt = cli.out.join(format!("stage{}.ckpt", stage.name()));
    save_checkpoint(&ckpt, &outcome.model, &meta)?;
    let mut log = prov.comment_header();
    for r in &outcome.log {
        log.push_str(&r.to_line());
        log.push('\n');
    }
    let log_path = cli.out.join(format!("stage{}.log", stage.name()));
    fs::write(&log_path, log)?;
    if let Some(last) = outcome.log.last() {
        println!("{}", last.to_line());
    }
    println!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratedLine {
    id: String,
    question: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: BTreeMap<String, String>,
}

fn mode_of(m: ModeArg) -> InputMode {
    match m {
        ModeArg::Caption => InputMode::CaptionOnly,
        ModeArg::Image => InputMode::ImageOnly,
        ModeArg::Both => InputMode::ImagePlusCaption,
    }
}

fn mode_name(m: ModeArg) -> &'static str {
    match m {
        ModeArg::Caption => "caption",
        ModeArg::Image => "image",
        ModeArg::Both => "both",
    }
}

/// Vocabulary, corpus and prepared items of one split for `model_cfg`.
fn load_split(
    data: &Path,
    split: &str,
    model_cfg: &ModelConfig,
) -> Result<(Vocabulary, Corpus, Vec<TrainingItem>)> {
    let vocab = Vocabulary::load(&data.join("vocab.txt"))?;
    if vocab.len() != model_cfg.vocab_size {
        return Err(Error::Dimension(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model_cfg.vocab_size
        )));
    }
    let corpus = load_corpus(&corpus_path(data, split))?;
    let items = prepare_items(&corpus, data, &vocab, model_cfg)?;
    Ok((vocab, corpus, items))
}

fn generate_questions(
    cli: &Cli,
    a: &GenerateArgs,
    config: &RunConfig,
    prov: &Provenance,
) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    print_config(config, model.config());
    let (vocab, corpus, items) = load_split(&a.data, &a.split, model.config())?;
    let mode = mode_of(a.mode);
    let gen_cfg = GenerationConfig {
        max_length: config.max_length,
        ..GenerationConfig::for_model(&model)
    };
    let mut meta = prov.meta();
    meta.insert("split".into(), a.split.clone());
    meta.insert("mode".into(), mode_name(a.mode).into());
    let mut out = serde_json::to_string(&MetaLine { meta }).expect("strings serialize");
    out.push('\n');
    let mut truncated = 0;
    for (ci, item) in corpus.items.iter().zip(&items) {
        let input = assemble_input(
            mode,
            item.visual.as_ref(),
            Some(&item.caption),
            model.specials(),
            model.config(),
        )?;
        let g = generate(&model, &input, &gen_cfg)?;
        truncated += usize::from(g.truncated);
        let line = GeneratedLine {
            id: ci.id.clone(),
            question: vocab.decode(&g.tokens)?,
        };
        out.push_str(&serde_json::to_string(&line).expect("strings serialize"));
        out.push('\n');
    }
    let path = cli
        .out
        .join(format!("generated.{}.{}.jsonl", a.split, mode_name(a.mode)));
    fs::write(&path, out)?;
    println!(
        "generated {} questions ({truncated} hit max_length); wrote {}",
        items.len(),
        path.display()
    );
    Ok(())
}

fn read_generated(path: &Path) -> Result<(BTreeMap<String, String>, Vec<GeneratedLine>)> {
    let text = fs::read_to_string(path)?;
    let mut meta = BTreeMap::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        };
        if i == 0 && line.starts_with("{\"meta\"") {
            meta = serde_json::from_str::<MetaLine>(line).map_err(parse_err)?.meta;
        } else {
            lines.push(serde_json::from_str(line).map_err(parse_err)?);
        }
    }
    Ok((meta, lines))
}

fn eval(cli: &Cli, a: &EvalArgs, prov: &Provenance) -> Result<()> {
    let (meta, generated) = read_generated(&a.generated)?;
    let split = meta
        .get("split")
        .ok_or_else(|| Error::Validation("generated file does not name its split".into()))?;
    let corpus = load_corpus(&corpus_path(&a.data, split))?;
    let refs: HashMap<&str, &Vec<String>> = corpus
        .items
        .iter()
        .map(|it| (it.id.as_str(), &it.questions))
        .collect();
    if generated.len() != corpus.items.len() {
        return Err(Error::Validation(format!(
            "{} generated questions for {} corpus items",
            generated.len(),
            corpus.items.len()
        )));
    }
    let items = generated
        .iter()
        .map(|g| {
            let qs = refs
                .get(g.id.as_str())
                .ok_or_else(|| Error::Validation(format!("unknown item id {}", g.id)))?;
            Ok(EvalItem {
                candidate: tokenize(&g.question),
                references: qs.iter().map(|q| tokenize(q)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_corpus(&items)?;
    let extra = vec![
        ("command".to_string(), prov.command.clone()),
        ("seed".to_string(), prov.seed.to_string()),
        ("split".to_string(), split.clone()),
        ("mode".to_string(), meta.get("mode").cloned().unwrap_or_default()),
    ];
    let text = report.to_text(&extra);
    let stem = a
        .generated
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("generated");
    let path = cli.out.join(format!("{stem}.metrics.txt"));
    fs::write(&path, &text)?;
    print!("{}", &text[text.find("items=").unwrap_or(0)..]);
    println!("wrote {}", path.display());
    Ok(())
}

fn slot_label(vocab: &Vocabulary, slot: &Slot, index: usize, visual: &std::ops::Range<usize>) -> String {
    match slot {
        Slot::Region(_) => format!("region{}", index - visual.start),
        Slot::Token(t) => vocab.token(*t).unwrap_or("?").to_string(),
    }
}

fn probe(cli: &Cli, a: &ProbeArgs, config: &RunConfig, prov: &Provenance) -> Result<()> {
    let mut models: Vec<(String, Model)> = Vec::new();
    for entry in &a.checkpoints {
        let (label, path) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("--checkpoint expects label=path, got {entry:?}"))
        })?;
        models.push((label.to_string(), load_model(Path::new(path))?));
    }
    let model_cfg = match models.first() {
        Some((_, m)) => m.config().clone(),
        None => {
            let vocab = Vocabulary::load(&a.data.join("vocab.txt"))?;
            let corpus = load_corpus(&corpus_path(&a.data, &a.split))?;
            let (nr, fd) = feature_shape(&a.data, &corpus)?;
            config.resolve_model(vocab.len(), fd, nr)?
        }
    };
    for (label, m) in &models {
        check_matches(Path::new(label), m, &model_cfg)?;
    }
    if a.random {
        models.push((RANDOM_LABEL.to_string(), random_model(model_cfg.clone())?));
    }
    if models.is_empty() {
        return Err(Error::Config("probe needs --checkpoint or --random".into()));
    }
    print_config(config, &model_cfg);
    let centering = Centering::parse(&a.centering)?;
    println!("centering={}", centering.name());
    let (vocab, corpus, items) = load_split(&a.data, &a.split, &model_cfg)?;
    let pairs: Vec<_> = items
        .iter()
        .map(|it| (it.visual.clone().expect("corpus items carry regions"), it.caption.clone()))
        .collect();

    let mut csv = prov.comment_header();
    csv.push_str(&format!("# centering={}\n# items={}\n", centering.name(), pairs.len()));
    csv.push_str(ProbeReport::CSV_HEADER);
    csv.push('\n');
    for (label, m) in &models {
        let r = xsim_per_layer(m, &pairs, label, centering)?;
        println!("{label}: last-layer xsim {:.6}", r.last());
        csv.push_str(&r.csv_rows());
    }
    let path = cli.out.join("probe.csv");
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());

    if a.attention_items > 0 {
        let mut att = prov.comment_header();
        att.push_str("model_label,item_id,slot_index,slot,weight,most_attended\n");
        for (label, m) in &models {
            let gen_cfg = GenerationConfig {
                max_length: config.max_length,
                ..GenerationConfig::for_model(m)
            };
            for (ci, it) in corpus.items.iter().zip(&items).take(a.attention_items) {
                let input = assemble_input(
                    InputMode::ImagePlusCaption,
                    it.visual.as_ref(),
                    Some(&it.caption),
                    m.specials(),
                    m.config(),
                )?;
                let g = generate(m, &input, &gen_cfg)?;
                if g.tokens.is_empty() {
                    continue;
                }
                let s = attention_summary(m, &input, &g.tokens)?;
                for (k, w) in s.weights.iter().enumerate() {
                    att.push_str(&format!(
                        "{label},{},{k},{},{w:.6},{}\n",
                        ci.id,
                        slot_label(&vocab, &input.slots[k], k, &input.visual_span),
                        u8::from(k == s.argmax)
                    ));
                }
            }
        }
        let path = cli.out.join("attention.csv");
        fs::write(&path, att)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
