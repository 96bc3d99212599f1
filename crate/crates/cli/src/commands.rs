use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use leaffm::data::{split_dataset, synth_generate, DatasetSplit, Instance, NumericScaler, Preprocessor, SynthSpec};
use leaffm::export::{
    fold, read_checkpoint, read_model, score_stream, write_checkpoint, write_model, write_text, FoldedModel,
};
use leaffm::metrics::{evaluate, EvalResult};
use leaffm::training::{default_tolerance, gradient_check, train_with, TrainOptions, TrainRun};
use leaffm::{build_parameters, Parallelism, ParameterSet, Variant};

use crate::config::{DataFormat, RunConfig};

/// Parsed data with the preprocessor fitted on its training split.
pub struct Dataset {
    pub pre: Preprocessor,
    pub split: DatasetSplit<Instance>,
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data.as_deref().context("no data file given (set data=PATH)")
}

/// Returns the preprocessor (without scaler) and the numbered data lines.
fn read_lines(cfg: &RunConfig) -> Result<(Preprocessor, Vec<(usize, String)>)> {
    let path = data_path(cfg)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let pre = match cfg.format {
        DataFormat::Criteo => Preprocessor::criteo(cfg.buckets)?,
        DataFormat::Csv => {
            let schema_path = cfg.schema.clone().unwrap_or_else(|| path.with_file_name("schema.txt"));
            let schema = fs::read_to_string(&schema_path)
                .with_context(|| format!("reading schema {}", schema_path.display()))?;
            let (_, header) = lines.next().context("data file is empty")?;
            Preprocessor::csv(&schema, header, cfg.buckets)?
        }
    };
    let body = lines.filter(|(_, l)| !l.trim().is_empty()).map(|(n, l)| (n, l.to_string())).collect();
    Ok((pre, body))
}

fn parse_all(pre: &Preprocessor, lines: &[(usize, String)]) -> Result<Vec<Instance>> {
    Ok(lines.iter().map(|(n, l)| pre.parse_line(l, *n)).collect::<Result<_, _>>()?)
}

/// Reads, splits 8:1:1 and parses the configured data file.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (mut pre, lines) = read_lines(cfg)?;
    let split = split_dataset(lines, cfg.split_seed)?;
    pre.scaler = Some(NumericScaler::fit(&pre, split.train.iter().map(|(n, l)| (*n, l.as_str())))?);
    Ok(Dataset {
        split: DatasetSplit {
            train: parse_all(&pre, &split.train)?,
            validation: parse_all(&pre, &split.validation)?,
            test: parse_all(&pre, &split.test)?,
            seed: split.seed,
        },
        pre,
    })
}

pub struct Trained {
    pub run: TrainRun,
    pub params: ParameterSet,
    pub test: EvalResult,
    pub seconds: f64,
}

fn train_on(
    cfg: &RunConfig,
    data: &Dataset,
    mode: Parallelism,
    mut log: impl FnMut(&str) -> Result<()>,
) -> Result<Trained> {
    let config = cfg.model_config(data.pre.vocab_sizes());
    let options = TrainOptions { patience: cfg.patience, parallelism: mode };
    let start = Instant::now();
    let mut log_err = None;
    let (run, params) = train_with(&config, &data.split.train, &data.split.validation, &options, |r| {
        if let Err(e) = log(&r.log_line()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let test = evaluate(&params, &data.split.test, mode)?;
    Ok(Trained { run, params, test, seconds: start.elapsed().as_secs_f64() })
}

fn folded(params: &ParameterSet, pre: Option<Preprocessor>, cfg: &RunConfig, mode: Parallelism) -> Result<FoldedModel> {
    let mut model = fold(params, mode)?;
    model.preprocessor = pre;
    model.policy = cfg.unknown_features;
    Ok(model)
}

pub fn train(cfg: &RunConfig, mode: Parallelism) -> Result<()> {
    let data = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.txt"), cfg.render())?;
    let mut log = BufWriter::new(File::create(cfg.out.join("train.log"))?);
    let trained = train_on(cfg, &data, mode, |line| {
        writeln!(log, "{line}")?;
        log.flush()?;
        eprintln!("{line}");
        Ok(())
    })?;
    write_checkpoint(&trained.params, Some(&data.pre), cfg.checkpoint_path())?;
    if cfg.variant == Variant::Ffm {
        eprintln!("ffm keeps per-field embeddings and has no folded form; wrote the checkpoint only");
    } else {
        write_model(&folded(&trained.params, Some(data.pre.clone()), cfg, mode)?, cfg.model_path())?;
    }
    let run = &trained.run;
    println!(
        "best_epoch={}\tval_auc={:.6}\tepochs={}\tstopped_early={}\ttest_{}",
        run.best_epoch,
        run.best_val_auc,
        run.records.len(),
        run.stopped_early,
        trained.test
    );
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, mode: Parallelism) -> Result<()> {
    let (_, lines) = read_lines(cfg)?;
    let result = if let Some(model_path) = &cfg.model {
        let model = read_model(model_path)?;
        let pre = model.preprocessor.as_ref().context("model file has no preprocessor")?;
        evaluate(&model, &parse_all(pre, &lines)?, mode)?
    } else {
        let (params, pre) = read_checkpoint(cfg.checkpoint_path())?;
        let pre = pre.context("checkpoint has no preprocessor")?;
        evaluate(&params, &parse_all(&pre, &lines)?, mode)?
    };
    println!("{result}");
    Ok(())
}

pub fn export(cfg: &RunConfig, mode: Parallelism) -> Result<()> {
    let (params, pre) = read_checkpoint(cfg.checkpoint_path())?;
    let model = folded(&params, pre, cfg, mode)?;
    let path = cfg.model_path();
    write_model(&model, &path)?;
    if let Some(dump) = &cfg.text_dump {
        let mut out = BufWriter::new(File::create(dump)?);
        write_text(&model, &mut out)?;
        out.flush()?;
    }
    println!("wrote {} ({} features, d={})", path.display(), model.num_features(), model.d);
    Ok(())
}

pub fn score(cfg: &RunConfig) -> Result<()> {
    let mut model = read_model(cfg.model_path())?;
    model.policy = cfg.unknown_features;
    score_stream(&model, io::stdin().lock(), BufWriter::new(io::stdout().lock()), io::stderr().lock())?;
    Ok(())
}

/// Returns whether every tensor class passed.
pub fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    let config = cfg.model_config(vec![1]);
    let tolerance = cfg.gradcheck_tolerance.unwrap_or_else(|| default_tolerance(&config));
    let report = gradient_check(&config, cfg.gradcheck_cases, tolerance)?;
    print!("{report}");
    Ok(report.passed())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let spec = match &cfg.synth_spec {
        Some(p) => SynthSpec::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthSpec::default(),
    };
    let data = synth_generate(&spec)?;
    data.write_csv(&cfg.out)?;
    let positives = data.instances.iter().filter(|i| i.label == 1).count();
    println!(
        "wrote {} and schema.txt: {} instances, {} fields, {positives} positives",
        cfg.out.join("data.csv").display(),
        data.instances.len(),
        data.schema.len()
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, mode: Parallelism) -> Result<()> {
    let grid = cfg.sweep_grid();
    if grid.is_empty() {
        bail!("sweep grid for axis {:?} is empty", cfg.sweep_axis);
    }
    let data = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.render())?;
    let table_path: PathBuf = cfg.out.join("sweep.tsv");
    let mut table = BufWriter::new(File::create(&table_path)?);
    let header = format!("{}\tvariant\tparams\tbest_epoch\tval_auc\ttest_auc\ttest_logloss\tseconds", cfg.sweep_axis);
    writeln!(table, "{header}")?;
    println!("{header}");
    for value in grid {
        let point = cfg.with_axis(value);
        let trained = train_on(&point, &data, mode, |_| Ok(()))?;
        let params = build_parameters(&point.model_config(data.pre.vocab_sizes()))?.audit().true_count;
        let row = format!(
            "{value}\t{}\t{params}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.2}",
            point.variant,
            trained.run.best_epoch,
            trained.run.best_val_auc,
            trained.test.auc,
            trained.test.logloss,
            trained.seconds
        );
        writeln!(table, "{row}")?;
        table.flush()?;
        println!("{row}");
    }
    Ok(())
}
