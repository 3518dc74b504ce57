mod args;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::Parser;
use regnet::arch::reference::delta_note;
use regnet::arch::{count, diff_reports, ArchSpec, CostReport, Network};
use regnet::pipeline::{load_cifar, norm_cache_path, synthetic, BatchPlan, Dataset, Normalization};
use regnet::trainer::features::probe_csv;
use regnet::trainer::{evaluate, export_features, probe_blocks, Checkpoint, MetricsLog, Trainer};
use regnet::{gradcheck, DType, Error, Scalar};

use args::{
    describe, parse_blocks, read_config, spec_from, Cli, Command, CountCmd, DataArgs, DiffCmd,
    EvalCmd, ExportCmd, GradcheckCmd, NetArgs, Precision, ProbeCmd, Split, TrainCmd,
};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for bad input (flags, files, data), 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_user_error() => 1,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Count(c) => count_cmd(c),
        Command::Diff(c) => diff(c),
        Command::Gradcheck(c) => gradcheck_cmd(c),
        Command::ExportFeatures(c) => export(c),
        Command::Probe(c) => probe(c),
    }
}

/// Write to `path`, or stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    emit(Some(path), text)
}

/// Train and test splits plus the directory they came from.
fn load_data(
    data: &DataArgs,
    classes: usize,
) -> Result<(Dataset, Dataset, Option<std::path::PathBuf>)> {
    if let Some(n) = data.synthetic {
        if n == 0 {
            return Err(
                Error::InvalidArgument("--synthetic needs at least one image".into()).into(),
            );
        }
        return Ok((
            synthetic(classes, n, 0),
            synthetic(classes, n.div_ceil(5), 1),
            None,
        ));
    }
    let variant = data.variant(classes);
    if variant.classes() != classes {
        return Err(Error::InvalidArgument(format!(
            "network has {classes} classes but the dataset has {}",
            variant.classes()
        ))
        .into());
    }
    let dir = data.dir(variant);
    let (train, test) = load_cifar(&dir, variant)?;
    Ok((train, test, Some(dir)))
}

/// Per-channel statistics of the full training split, cached beside the data
/// when the directory is writable.
fn normalization(train: &Dataset, dir: Option<&Path>) -> Normalization {
    match dir {
        Some(d) => Normalization::load_or_measure(&norm_cache_path(d), train)
            .unwrap_or_else(|_| Normalization::measure(train)),
        None => Normalization::measure(train),
    }
}

fn pick_subset(data: Dataset, n: usize, seed: u64) -> Dataset {
    if n > 0 && n < data.len() {
        data.subset(n, seed)
    } else {
        data
    }
}

fn train(c: TrainCmd) -> Result<()> {
    let resumed = c.resume.as_deref().map(Checkpoint::load).transpose()?;
    let file_keys = match &c.arch.config {
        Some(p) => read_config(p)?.1,
        None => Vec::new(),
    };
    let (mut cfg, ck_key) = c.train.resolve(&file_keys)?;
    let spec = match &resumed {
        Some(ck) => {
            let m = &ck.manifest;
            let mut saved = m.config.clone();
            if let Some(e) = c.train.epochs {
                saved.epochs = e;
            }
            cfg = saved;
            m.spec.clone()
        }
        None => c.arch.resolve()?,
    };
    let (train_set, test_set, dir) = load_data(&c.data, spec.classes)?;
    let norm = match &resumed {
        Some(ck) => ck.manifest.norm,
        None => normalization(&train_set, dir.as_deref()),
    };
    let train_set = pick_subset(train_set, c.train.subset(), cfg.seed);
    fs::create_dir_all(&c.out).map_err(|e| Error::Io {
        path: c.out.clone(),
        source: e,
    })?;
    let ckpt = c
        .checkpoint
        .clone()
        .or(ck_key)
        .unwrap_or_else(|| c.out.join("checkpoint.ck"));
    write_file(&c.out.join("arch.cfg"), &spec.to_config())?;
    let metrics = c.out.join("metrics.csv");
    if resumed.is_none() && metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::Io {
            path: metrics.clone(),
            source: e,
        })?;
    }
    eprintln!(
        "{}: {} params, {} training images, {}",
        spec.display_name(),
        count(&spec)?.total_params(),
        train_set.len(),
        describe(&cfg)
    );
    let dtype = match (&resumed, c.dtype) {
        (Some(ck), _) => ck.manifest.dtype,
        (None, Precision::F32) => DType::F32,
        (None, Precision::F64) => DType::F64,
    };
    let job = TrainJob {
        spec: &spec,
        cfg,
        norm,
        resumed: resumed.as_ref(),
        train: &train_set,
        test: &test_set,
        metrics: &metrics,
        ckpt: &ckpt,
    };
    let stats = match dtype {
        DType::F32 => job.run::<f32>()?,
        DType::F64 => job.run::<f64>()?,
    };
    print!("split,loss,accuracy,error\n{stats}");
    Ok(())
}

struct TrainJob<'a> {
    spec: &'a ArchSpec,
    cfg: regnet::trainer::TrainConfig,
    norm: Normalization,
    resumed: Option<&'a Checkpoint>,
    train: &'a Dataset,
    test: &'a Dataset,
    metrics: &'a Path,
    ckpt: &'a Path,
}

impl TrainJob<'_> {
    fn run<T: Scalar>(self) -> Result<String> {
        let mut t = match self.resumed {
            Some(ck) => {
                let mut t = ck.into_trainer::<T>()?;
                t.cfg = self.cfg;
                t
            }
            None => Trainer::new(
                Network::<T>::build(self.spec, self.cfg.seed)?,
                self.cfg,
                self.norm,
            )?,
        };
        let mut log = MetricsLog::open(self.metrics)?;
        t.fit(self.train, Some(self.test), &mut log, Some(self.ckpt))?;
        Checkpoint::capture(&t).save(self.ckpt)?;
        for r in &log.rows {
            eprintln!("{}", r.to_csv());
        }
        let s = evaluate(&mut t.net, self.test, t.norm, EVAL_BATCH)?;
        Ok(format!("test,{},{},{}\n", s.loss, s.accuracy(), s.error()))
    }
}

/// Eval tapes keep every intermediate, so batches stay small.
const EVAL_BATCH: usize = 100;

fn eval(c: EvalCmd) -> Result<()> {
    let ck = Checkpoint::load(&c.checkpoint)?;
    let m = &ck.manifest;
    let (train_set, test_set, _) = load_data(&c.data, m.spec.classes)?;
    let (name, data) = match c.split {
        Split::Train => ("train", pick_subset(train_set, c.subset, m.config.seed)),
        Split::Test => ("test", test_set),
    };
    let bs = c.batch_size.max(1);
    let s = match m.dtype {
        DType::F32 => {
            let mut t = ck.into_trainer::<f32>()?;
            evaluate(&mut t.net, &data, t.norm, bs)?
        }
        DType::F64 => {
            let mut t = ck.into_trainer::<f64>()?;
            evaluate(&mut t.net, &data, t.norm, bs)?
        }
    };
    print!(
        "split,loss,accuracy,error\n{name},{},{},{}\n",
        s.loss,
        s.accuracy(),
        s.error()
    );
    Ok(())
}

fn summary(r: &CostReport) -> String {
    format!(
        "{}: {} params ({:.3}M), {} MACs, {} FLOPs",
        r.name,
        r.total_params(),
        r.total_params() as f64 / 1e6,
        r.total_macs(),
        r.total_flops()
    )
}

fn staged(r: CostReport, by_stage: bool) -> CostReport {
    if by_stage {
        CostReport {
            rows: r.by_stage(),
            ..r
        }
    } else {
        r
    }
}

fn count_cmd(c: CountCmd) -> Result<()> {
    let spec = c.arch.resolve()?;
    let report = count(&spec)?;
    eprintln!("{}", summary(&report));
    emit(c.out.as_deref(), &staged(report, c.by_stage).to_csv())
}

fn diff(c: DiffCmd) -> Result<()> {
    let (a, b) = (spec_from(&c.a)?, spec_from(&c.b)?);
    let (ra, rb) = (count(&a)?, count(&b)?);
    let d = diff_reports(&ra, &rb);
    eprintln!("{}", summary(&ra));
    eprintln!("{}", summary(&rb));
    eprintln!(
        "delta: {:+} params ({:+.1}K), {:+} MACs, {:+} FLOPs",
        d.total_params(),
        d.total_params() as f64 / 1e3,
        d.total_macs(),
        d.total_flops()
    );
    if let Some(note) = delta_note(&a, &b) {
        eprintln!("{note}");
    }
    emit(c.out.as_deref(), &staged(d, c.by_stage).to_csv())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn gradcheck_cmd(c: GradcheckCmd) -> Result<()> {
    let reports = gradcheck::suite()?;
    let mut s = String::from("case,max_rel_err,checked,worst,passed\n");
    for r in &reports {
        s.push_str(&format!(
            "{},{:e},{},{},{}\n",
            csv_field(&r.name),
            r.max_rel_err,
            r.checked,
            csv_field(&r.worst),
            r.passed()
        ));
    }
    emit(c.out.as_deref(), &s)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    eprintln!(
        "{} cases, worst relative error {worst:.3e}, tolerance {:e}",
        reports.len(),
        gradcheck::TOLERANCE
    );
    if failed > 0 {
        return Err(Error::State(format!("{failed} gradient checks above tolerance")).into());
    }
    Ok(())
}

/// A trained network (any stored precision) or a fresh `f32` one.
enum Loaded {
    F32(Network<f32>, Normalization),
    F64(Network<f64>, Normalization),
}

/// Resolve the network and the data it is run on.
fn load_net(n: &NetArgs, data: &DataArgs) -> Result<(Loaded, Dataset)> {
    match &n.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (_, test, _) = load_data(data, ck.manifest.spec.classes)?;
            let net = match ck.manifest.dtype {
                DType::F32 => {
                    let t = ck.into_trainer::<f32>()?;
                    Loaded::F32(t.net, t.norm)
                }
                DType::F64 => {
                    let t = ck.into_trainer::<f64>()?;
                    Loaded::F64(t.net, t.norm)
                }
            };
            Ok((net, test))
        }
        None => {
            let spec = n.arch.resolve()?;
            let (train, test, dir) = load_data(data, spec.classes)?;
            let norm = normalization(&train, dir.as_deref());
            Ok((Loaded::F32(Network::build(&spec, n.init_seed)?, norm), test))
        }
    }
}

fn export(c: ExportCmd) -> Result<()> {
    let blocks = parse_blocks(&c.blocks)?;
    let (net, test) = load_net(&c.net, &c.data)?;
    let n = c.images.clamp(1, test.len().max(1));
    fn go<T: Scalar>(
        mut net: Network<T>,
        norm: Normalization,
        test: &Dataset,
        n: usize,
        blocks: &[usize],
        out: &Path,
    ) -> regnet::Result<Vec<regnet::trainer::FeatureEntry>> {
        let batch = BatchPlan::eval(n, norm).batch::<T>(test, 0, 0)?;
        export_features(&mut net, &batch.images, blocks, out)
    }
    let entries = match net {
        Loaded::F32(net, norm) => go(net, norm, &test, n, &blocks, &c.out)?,
        Loaded::F64(net, norm) => go(net, norm, &test, n, &blocks, &c.out)?,
    };
    let mut s = String::from("name,shape,offset,bytes\n");
    for e in entries {
        let sh = e.shape;
        s.push_str(&format!(
            "{},{}x{}x{}x{},{},{}\n",
            e.name, sh.n, sh.c, sh.h, sh.w, e.offset, e.bytes
        ));
    }
    print!("{s}");
    Ok(())
}

fn probe(c: ProbeCmd) -> Result<()> {
    let (net, test) = load_net(&c.net, &c.data)?;
    let (total, last_stage) = match &net {
        Loaded::F32(n, _) => (
            n.model.num_blocks(),
            n.model.stages.last().map_or(0, |s| s.blocks.len()),
        ),
        Loaded::F64(n, _) => (
            n.model.num_blocks(),
            n.model.stages.last().map_or(0, |s| s.blocks.len()),
        ),
    };
    // The head only fits final-stage outputs.
    let blocks = match &c.blocks {
        Some(b) => parse_blocks(b)?,
        None => (total + 1 - last_stage.min(3)..=total).collect(),
    };
    let bs = c.batch_size.max(1);
    let rows = match net {
        Loaded::F32(mut n, norm) => probe_blocks(&mut n, &test, norm, &blocks, bs)?,
        Loaded::F64(mut n, norm) => probe_blocks(&mut n, &test, norm, &blocks, bs)?,
    };
    emit(c.out.as_deref(), &probe_csv(&rows))
}
