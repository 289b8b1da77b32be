use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use daffnet_core::autograd::{GradcheckOptions, OP_NAMES};
use daffnet_core::data::{
    channel_stats, load_dataset, split_622, synth_generate, write_attribute_csv, DatasetManifest, Provenance, Splits,
    PSEUDO_FILE, SCHEMA_FILE,
};
use daffnet_core::gradsuite::run_gradient_suite;
use daffnet_core::metrics::{
    attribute_report, classification_report, AttributeReport, ClassificationReport, MultiLabelEval,
};
use daffnet_core::model::{argmax, AttributeSchema, Checkpoint, DaffNet, MapNet, Model, ModelSpec};
use daffnet_core::nn::ParamStore;
use daffnet_core::training::{
    predict_daffnet, predict_map, pseudo_label, train_daffnet, train_map_ssl, History, InputSpec, Samples,
};
use daffnet_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{require, write_resolved, DaffRun, EvalRun, GenRun, GradRun, MapRun, Part, PseudoRun};
use crate::error::CliError;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const GRADCHECK_JSON: &str = "gradcheck.json";

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &(text + "\n"))
}

/// An explicit schema file, else the dataset's own, else the default.
fn resolve_schema(explicit: Option<&Path>, data: &Path) -> Result<AttributeSchema> {
    if let Some(p) = explicit {
        return Ok(AttributeSchema::load(p)?);
    }
    let own = data.join(SCHEMA_FILE);
    if own.is_file() {
        Ok(AttributeSchema::load(&own)?)
    } else {
        Ok(AttributeSchema::default())
    }
}

fn check_dataset_schema(data: &Path, schema: &AttributeSchema) -> Result<()> {
    let own = data.join(SCHEMA_FILE);
    if own.is_file() && &AttributeSchema::load(&own)? != schema {
        return Err(Error::Schema(format!("{} differs from the checkpoint schema", own.display())).into());
    }
    Ok(())
}

fn check_classes(manifest: &DatasetManifest, classes: &[String]) -> Result<()> {
    if manifest.classes != classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint classes {classes:?} differ from dataset classes {:?}",
            manifest.classes
        ))
        .into());
    }
    Ok(())
}

fn strip_attributes(m: &DatasetManifest) -> DatasetManifest {
    let records = m
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.attributes = None;
            r.provenance = Provenance::True;
            r
        })
        .collect();
    m.with_records(records)
}

fn labeled_only(m: &DatasetManifest) -> DatasetManifest {
    m.with_records(m.records.iter().filter(|r| r.attributes.is_some()).cloned().collect())
}

fn select(splits: &Splits, part: Part, all: &DatasetManifest) -> DatasetManifest {
    match part {
        Part::Train => splits.train.clone(),
        Part::Val => splits.val.clone(),
        Part::Test => splits.test.clone(),
        Part::All => all.clone(),
    }
}

fn evaluate_attributes(
    map: &MapNet,
    store: &ParamStore<f32>,
    samples: &Samples,
    input: &InputSpec,
) -> Result<AttributeReport> {
    let (pred, _) = predict_map(map, store, samples, input, None)?;
    let truth = samples
        .attributes
        .iter()
        .map(|a| a.clone().ok_or_else(|| Error::Data("evaluation sample without attribute labels".into())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let e = MultiLabelEval::new(truth, pred.attributes)?;
    Ok(attribute_report(&map.schema, &e, Some(&pred.attribute_probs))?)
}

fn evaluate_classes(
    net: &DaffNet,
    store: &ParamStore<f32>,
    samples: &Samples,
    input: &InputSpec,
    classes: &[String],
) -> Result<ClassificationReport> {
    let (probs, _) = predict_daffnet(net, store, samples, input)?;
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(classification_report(classes, &samples.classes, &pred, &probs)?)
}

/// Long-format attribute confusion counts.
fn attribute_confusion_csv(schema: &AttributeSchema, report: &AttributeReport) -> String {
    let mut out = String::from("attribute,true,predicted,count\n");
    for (m, cm) in report.confusion.iter().enumerate() {
        for (t, row) in cm.counts.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{c}\n",
                    schema.attributes[m].name,
                    schema.category_name(m, t),
                    schema.category_name(m, p)
                ));
            }
        }
    }
    out
}

fn write_attribute_outputs(out: &Path, schema: &AttributeSchema, report: &AttributeReport) -> Result<()> {
    for w in &report.warnings {
        log::warn!("{w}");
    }
    write_json(&out.join(REPORT_JSON), report)?;
    write_text(&out.join(REPORT_TXT), &report.to_text())?;
    write_text(&out.join(CONFUSION_CSV), &attribute_confusion_csv(schema, report))?;
    print!("{}", report.to_text());
    Ok(())
}

fn write_class_outputs(out: &Path, report: &ClassificationReport) -> Result<()> {
    for w in &report.warnings {
        log::warn!("{w}");
    }
    write_json(&out.join(REPORT_JSON), report)?;
    write_text(&out.join(REPORT_TXT), &report.to_text())?;
    write_text(&out.join(CONFUSION_CSV), &report.confusion.to_csv(&report.classes))?;
    print!("{}", report.to_text());
    Ok(())
}

fn write_history(out: &Path, history: &History) -> Result<()> {
    log::info!(
        "best epoch {} of {} ({} {:.4})",
        history.best_epoch,
        history.epochs.len(),
        history.metric,
        history.best().val_metric
    );
    write_json(&out.join(HISTORY_FILE), history)
}

pub fn cmd_gen_synthetic(run: GenRun) -> Result<()> {
    let out = require(&run.out, "out")?;
    let manifest = synth_generate(&run.synth, out)?;
    write_resolved(out, "gen-synthetic", &run)?;
    println!(
        "wrote {} images in {} classes to {}",
        manifest.len(),
        manifest.classes.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train_map(mut run: MapRun) -> Result<()> {
    run.resolve();
    let data = require(&run.data, "data")?.clone();
    let out = require(&run.out, "out")?.clone();
    let schema = resolve_schema(run.schema.as_deref(), &data)?;
    let manifest = load_dataset(&data, &schema)?;
    run.model.num_classes = manifest.classes.len();
    let splits = split_622(&manifest, &run.split)?;
    let train_m = labeled_only(&splits.train);
    if train_m.is_empty() {
        return Err(CliError::Failed(format!("no attribute labels found in {}", data.display())));
    }
    let mut pseudo = Vec::new();
    for src in &run.pseudo {
        let mut m = strip_attributes(&load_dataset(&src.data, &schema)?);
        if m.classes != manifest.classes {
            return Err(Error::Data(format!("{} has different classes", src.data.display())).into());
        }
        m.apply_attribute_csv(&src.labels)?;
        let m = labeled_only(&m);
        log::info!("{}: {} pseudo-labeled samples", src.data.display(), m.len());
        pseudo.push(Samples::load(&m)?);
    }
    let train = Samples::load(&train_m)?;
    let val = Samples::load(&labeled_only(&splits.val))?;
    let test = Samples::load(&labeled_only(&splits.test))?;
    let mut parts = vec![&train];
    parts.extend(pseudo.iter());
    let norm = channel_stats(&Samples::concat(&parts).images)?;
    let input = InputSpec {
        size: run.model.backbone.input_size,
        norm,
    };

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let map = MapNet::build(&mut store, run.model.clone(), schema.clone(), &mut rng)?;
    let pseudo_refs: Vec<&Samples> = pseudo.iter().collect();
    let history = train_map_ssl(&map, &mut store, &train, &pseudo_refs, &val, &run.train, run.loss, &input)?;
    let report = evaluate_attributes(&map, &store, &test, &input)?;

    create_dir(&out)?;
    write_resolved(&out, "train-map", &run)?;
    Checkpoint {
        model: ModelSpec::Map(run.model.clone()),
        schema: schema.clone(),
        classes: manifest.classes.clone(),
        normalization: input.norm,
        seed: run.seed,
        store,
    }
    .save(&out.join(CHECKPOINT_DIR))?;
    write_history(&out, &history)?;
    write_attribute_outputs(&out, &schema, &report)
}

pub fn cmd_pseudo_label(mut run: PseudoRun) -> Result<()> {
    run.split.seed = run.seed;
    let ckpt_dir = require(&run.checkpoint, "checkpoint")?;
    let out = require(&run.out, "out")?;
    if run.data.is_empty() {
        return Err(CliError::Usage("at least one `--data` directory is required".into()));
    }
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let Model::Map(map) = ckpt.instantiate()? else {
        return Err(Error::Checkpoint(format!("{} is not an attribute-predictor checkpoint", ckpt_dir.display())).into());
    };
    let input = InputSpec {
        size: ckpt.model.input_size(),
        norm: ckpt.normalization.clone(),
    };
    let mut names = BTreeSet::new();
    for dir in &run.data {
        let name = dir
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("{} has no directory name", dir.display())))?;
        if !names.insert(name.to_os_string()) {
            return Err(CliError::Usage(format!("two datasets named {}", name.to_string_lossy())));
        }
    }
    create_dir(out)?;
    for dir in &run.data {
        check_dataset_schema(dir, &ckpt.schema)?;
        let manifest = strip_attributes(&load_dataset(dir, &ckpt.schema)?);
        check_classes(&manifest, &ckpt.classes)?;
        let splits = split_622(&manifest, &run.split)?;
        let samples = Samples::load(&splits.train)?;
        let labeled = pseudo_label(&map, &ckpt.store, &splits.train, &samples, &input)?;
        let dest = out.join(dir.file_name().expect("checked above"));
        create_dir(&dest)?;
        let path = dest.join(PSEUDO_FILE);
        write_attribute_csv(&path, &ckpt.schema, &labeled.records, true)?;
        println!("{}: {} rows -> {}", dir.display(), labeled.len(), path.display());
    }
    write_resolved(out, "pseudo-label", &run)
}

pub fn cmd_train_daffnet(mut run: DaffRun) -> Result<()> {
    run.resolve();
    let data = require(&run.data, "data")?.clone();
    let out = require(&run.out, "out")?.clone();
    let ckpt = match (&run.map_checkpoint, run.model.use_mfe) {
        (Some(p), true) => Some(Checkpoint::load(p)?),
        (None, true) => {
            return Err(Error::Checkpoint(
                "the attribute branch needs `--map-checkpoint`; pass `--no-mfe` to train without it".into(),
            )
            .into())
        }
        (_, false) => None,
    };
    let schema = match &ckpt {
        Some(c) => {
            if let Some(p) = &run.schema {
                c.expect_schema(&AttributeSchema::load(p)?)?;
            }
            match &c.model {
                ModelSpec::Map(cfg) => run.model.map = cfg.clone(),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "expected an attribute-predictor checkpoint, found {}",
                        other.kind()
                    ))
                    .into())
                }
            }
            c.schema.clone()
        }
        None => resolve_schema(run.schema.as_deref(), &data)?,
    };
    let manifest = load_dataset(&data, &schema)?;
    if let Some(c) = &ckpt {
        check_classes(&manifest, &c.classes)?;
    }
    run.model.num_classes = manifest.classes.len();
    let splits = split_622(&manifest, &run.split)?;
    let train = Samples::load(&splits.train)?;
    let val = Samples::load(&splits.val)?;
    let test = Samples::load(&splits.test)?;
    let norm = match &ckpt {
        Some(c) => c.normalization.clone(),
        None => channel_stats(&train.images)?,
    };
    let input = InputSpec {
        size: run.model.backbone.input_size,
        norm,
    };

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let net = DaffNet::build(&mut store, run.model.clone(), schema.clone(), &mut rng)?;
    let history = train_daffnet(&net, &mut store, ckpt.as_ref(), &train, &val, &run.train, &input)?;
    let report = evaluate_classes(&net, &store, &test, &input, &manifest.classes)?;

    create_dir(&out)?;
    write_resolved(&out, "train-daffnet", &run)?;
    Checkpoint {
        model: ModelSpec::Daffnet(run.model.clone()),
        schema,
        classes: manifest.classes.clone(),
        normalization: input.norm,
        seed: run.seed,
        store,
    }
    .save(&out.join(CHECKPOINT_DIR))?;
    write_history(&out, &history)?;
    write_class_outputs(&out, &report)
}

pub fn cmd_evaluate(mut run: EvalRun) -> Result<()> {
    run.split.seed = run.seed;
    let ckpt_dir = require(&run.checkpoint, "checkpoint")?;
    let data = require(&run.data, "data")?;
    let out = require(&run.out, "out")?;
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let model = ckpt.instantiate()?;
    check_dataset_schema(data, &ckpt.schema)?;
    let manifest = load_dataset(data, &ckpt.schema)?;
    check_classes(&manifest, &ckpt.classes)?;
    let splits = split_622(&manifest, &run.split)?;
    let part = select(&splits, run.part, &manifest);
    let input = InputSpec {
        size: ckpt.model.input_size(),
        norm: ckpt.normalization.clone(),
    };
    create_dir(out)?;
    write_resolved(out, "evaluate", &run)?;
    match model {
        Model::Map(map) => {
            let part = labeled_only(&part);
            if part.is_empty() {
                return Err(CliError::Failed(format!("no attribute labels found in {}", data.display())));
            }
            let report = evaluate_attributes(&map, &ckpt.store, &Samples::load(&part)?, &input)?;
            write_attribute_outputs(out, &ckpt.schema, &report)
        }
        Model::Daffnet(net) => {
            if part.is_empty() {
                return Err(Error::Data("the selected split is empty".into()).into());
            }
            let report = evaluate_classes(&net, &ckpt.store, &Samples::load(&part)?, &input, &ckpt.classes)?;
            write_class_outputs(out, &report)
        }
    }
}

pub fn cmd_gradcheck(run: GradRun) -> Result<()> {
    let corrupt = match &run.corrupt {
        Some(op) => Some(*OP_NAMES.iter().find(|&&n| n == op).ok_or_else(|| {
            CliError::Usage(format!("unknown op `{op}`; expected one of {}", OP_NAMES.join(", ")))
        })?),
        None => None,
    };
    let opts = GradcheckOptions {
        eps: run.eps,
        tol: run.tol,
        seed: run.seed,
        corrupt,
        ..Default::default()
    };
    let report = run_gradient_suite(&opts)?;
    print!("{}", report.to_text());
    if let Some(out) = &run.out {
        create_dir(out)?;
        write_resolved(out, "gradcheck", &run)?;
        write_json(&out.join(GRADCHECK_JSON), &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(CliError::Failed(format!("gradient check failed for {}", names.join(", "))))
    }
}
