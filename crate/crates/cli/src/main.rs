use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use xnorram::bitcore::{self, BitTensor, RealTensor};
use xnorram::layers::{self, BatchNormParams, ConvGeometry};
use xnorram::memaudit::{self, AugmentCost, PrecisionPolicy};
use xnorram::model::argmax;
use xnorram::netspec;
use xnorram::rram::{self, BerCurve, CellMode, FaultTiming, SweepConfig};
use xnorram::train::{self, AdamConfig, Dataset, Normalization, Strategy, SyntheticTask, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "xnorram", version, about = "Binarized neural networks on resistive memory: shapes, memory, training, inference and fault sweeps")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving result tables and the run manifest.
    #[arg(long, global = true, default_value = "xnorram-out")]
    output: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer output shapes of a network.
    Shapes {
        /// Built-in name or path to a TOML network file.
        #[arg(long)]
        model: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Parameter memory under precision policies.
    MemReport {
        #[arg(long, required = true)]
        model: Vec<String>,
        /// fp32, int8, binclf, binclf-int8, binary or custom:<fe>:<clf>; defaults to all standard policies.
        #[arg(long)]
        policy: Vec<String>,
        /// Network whose uniform 32/8-bit sizes savings are measured against.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, value_enum, default_value_t = CostArg::Linear)]
        augment_cost: CostArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Train a network and save the deployable model.
    Train(TrainArgs),
    /// Run a saved model on input signals.
    Infer {
        #[arg(long)]
        model_file: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Normalization statistics written by `train`.
        #[arg(long)]
        norm: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Accuracy of a saved model under injected weight faults.
    FaultSweep {
        #[arg(long)]
        model_file: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        norm: Option<PathBuf>,
        /// Cell modes to sweep.
        #[arg(long, value_delimiter = ',', default_value = "1t1r,2t2r")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,100,10000,1000000,10000000")]
        cycles: Vec<u64>,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        /// Replace a mode's error curve: `<mode>=<file>` with `cycles probability` rows.
        #[arg(long)]
        ber_curve: Vec<String>,
        /// Draw fresh errors for every inference instead of once per programming.
        #[arg(long)]
        read_time: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Quick internal consistency checks.
    Selftest,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CSV signals (`label` column then time-major values).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Channels per time step in the CSV.
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Generate a synthetic task instead: separable, xor_like or conv_pattern.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 400)]
    samples: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: String,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "real")]
    strategy: String,
    /// Multiply every convolution's filter count.
    #[arg(long, default_value_t = 1)]
    augment: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long, default_value_t = 1.0)]
    keep_conv: f32,
    #[arg(long, default_value_t = 1.0)]
    keep_classifier: f32,
    /// Keep the first weighted layer real under all_binary.
    #[arg(long)]
    first_layer_real: bool,
    #[arg(long)]
    no_normalize: bool,
    /// Run k-fold cross-validation instead of a single training run.
    #[arg(long)]
    cv: bool,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Fraction held out for validation in a single run.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Where to write the trained model (default: <output>/model.xnr).
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Text,
    Tsv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Text => "txt",
            Format::Tsv => "tsv",
            Format::Json => "json",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CostArg {
    Linear,
    Exact,
}

/// Files produced by a command, recorded in the manifest.
struct Run {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.output).with_context(|| format!("creating {}", cli.output.display()))?;
    let mut r = Run {
        dir: cli.output.clone(),
        outputs: Vec::new(),
    };
    let name = match &cli.command {
        Command::Shapes { model, format } => {
            cmd_shapes(&mut r, model, *format)?;
            "shapes"
        }
        Command::MemReport {
            model,
            policy,
            baseline,
            augment_cost,
            format,
        } => {
            cmd_mem_report(&mut r, model, policy, baseline.as_deref(), *augment_cost, *format)?;
            "mem-report"
        }
        Command::Train(args) => {
            cmd_train(&mut r, args, cli.seed)?;
            "train"
        }
        Command::Infer {
            model_file,
            data,
            norm,
            format,
        } => {
            cmd_infer(&mut r, model_file, data, norm.as_deref(), *format, cli.seed)?;
            "infer"
        }
        Command::FaultSweep {
            model_file,
            data,
            norm,
            modes,
            cycles,
            repetitions,
            ber_curve,
            read_time,
            format,
        } => {
            let opts = SweepOpts {
                modes,
                cycles,
                repetitions: *repetitions,
                ber_curve,
                read_time: *read_time,
                format: *format,
            };
            cmd_fault_sweep(&mut r, model_file, data, norm.as_deref(), &opts, cli.seed)?;
            "fault-sweep"
        }
        Command::Selftest => {
            cmd_selftest(&mut r, cli.seed)?;
            "selftest"
        }
    };
    write_manifest(&r, name, cli.seed)
}

fn write_manifest(r: &Run, command: &str, seed: u64) -> Result<()> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "outputs": r.outputs,
        "timestamp_unix": ts,
    });
    let path = r.dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Print to stdout and keep a copy in the output directory.
fn emit(r: &mut Run, file: &str, content: &str) -> Result<()> {
    print!("{content}");
    r.write(file, content)
}

fn aligned(header: &[&str], rows: &[Vec<String>], right_from: usize) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let fmt_row = |cells: Vec<String>| -> String {
        let parts: Vec<String> = cells
            .into_iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let pad = w.saturating_sub(c.chars().count());
                if i >= right_from {
                    format!("{}{c}", " ".repeat(pad))
                } else {
                    format!("{c}{}", " ".repeat(pad))
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = fmt_row(header.iter().map(|s| s.to_string()).collect());
    for row in rows {
        out.push_str(&fmt_row(row.clone()));
    }
    out
}

fn tsv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t") + "\n";
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

fn cmd_shapes(r: &mut Run, model: &str, format: Format) -> Result<()> {
    let spec = netspec::resolve(model)?;
    let table = spec.shape_table()?;
    let header = ["Layer", "Kernel", "Padding", "Output shape"];
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|row| vec![row.layer.clone(), row.kernel.clone(), row.padding.clone(), row.output.to_string()])
        .collect();
    let text = match format {
        Format::Text => aligned(&header, &rows, 4),
        Format::Tsv => tsv(&header, &rows),
        Format::Json => {
            let v: Vec<_> = table
                .iter()
                .map(|row| {
                    json!({"layer": row.layer, "kernel": row.kernel, "padding": row.padding, "output": row.output.0})
                })
                .collect();
            serde_json::to_string_pretty(&json!({"model": spec.name, "layers": v}))? + "\n"
        }
    };
    emit(r, &format!("shapes.{}", format.ext()), &text)
}

fn cmd_mem_report(
    r: &mut Run,
    models: &[String],
    policies: &[String],
    baseline: Option<&str>,
    cost: CostArg,
    format: Format,
) -> Result<()> {
    let policies: Vec<PrecisionPolicy> = if policies.is_empty() {
        PrecisionPolicy::standard()
    } else {
        policies.iter().map(|p| p.parse()).collect::<Result<_, _>>()?
    };
    let cost = match cost {
        CostArg::Linear => AugmentCost::Linear,
        CostArg::Exact => AugmentCost::Exact,
    };
    let mut reports = Vec::new();
    let mut aug_rows = Vec::new();
    for m in models {
        let spec = netspec::resolve(m)?;
        let base_name = baseline.map(str::to_string).or_else(|| netspec::builtin_baseline(m).map(str::to_string));
        let base = base_name.as_deref().map(netspec::resolve).transpose()?;
        reports.extend(memaudit::compare_policies(&spec, &policies, base.as_ref())?);
        if spec.layers.iter().any(|l| l.kind.is_conv()) {
            for reference in [PrecisionPolicy::binclf(), PrecisionPolicy::binclf_int8()] {
                let k = memaudit::equal_memory_augmentation(&spec, &reference, cost)?;
                aug_rows.push(vec![spec.name.clone(), reference.name.clone(), k.to_string()]);
            }
        }
    }
    let aug_header = ["model", "reference", "equal_memory_k"];
    let text = match format {
        Format::Text => {
            let mut s = memaudit::render_text(&reports);
            if !aug_rows.is_empty() {
                s.push('\n');
                s.push_str(&aligned(&aug_header, &aug_rows, 2));
            }
            s
        }
        Format::Tsv => {
            let mut s = memaudit::render_tsv(&reports);
            if !aug_rows.is_empty() {
                s.push('\n');
                s.push_str(&tsv(&aug_header, &aug_rows));
            }
            s
        }
        Format::Json => {
            let aug: Vec<_> = aug_rows
                .iter()
                .map(|row| json!({"model": row[0], "reference": row[1], "k": row[2].parse::<usize>().unwrap_or(0)}))
                .collect();
            let reports: serde_json::Value = serde_json::from_str(&memaudit::render_json(&reports))?;
            serde_json::to_string_pretty(&json!({"reports": reports, "equal_memory_augmentation": aug}))? + "\n"
        }
    };
    emit(r, &format!("mem-report.{}", format.ext()), &text)
}

fn load_data(args: &DataArgs, seed: u64) -> Result<Dataset> {
    match (&args.data, &args.synthetic) {
        (Some(path), _) => train::load_csv_signals(path, args.channels)
            .with_context(|| format!("loading {}", path.display())),
        (None, Some(task)) => {
            let task: SyntheticTask = task.parse()?;
            Ok(train::make_synthetic(task, args.samples, seed)?)
        }
        (None, None) => bail!("pass --data <csv> or --synthetic <task>"),
    }
}

fn cmd_train(r: &mut Run, a: &TrainArgs, seed: u64) -> Result<()> {
    let spec = netspec::resolve(&a.model)?.augment(a.augment)?;
    let strategy: Strategy = a.strategy.parse()?;
    let ds = load_data(&a.data, seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        noise_sigma: a.noise,
        keep_conv: a.keep_conv,
        keep_classifier: a.keep_classifier,
        folds: a.folds,
        seed,
        first_layer_real: a.first_layer_real,
        normalize: !a.no_normalize,
    };
    if a.cv {
        let report = train::cross_validate(&spec, &ds, &cfg, strategy)?;
        let rows: Vec<Vec<String>> = report
            .folds
            .iter()
            .map(|f| {
                vec![
                    f.fold.to_string(),
                    f.validation_size.to_string(),
                    format!("{:.4}", f.final_accuracy),
                    format!("{:.4}", f.best_accuracy),
                    f.best_epoch.to_string(),
                ]
            })
            .collect();
        let mut text = aligned(&["fold", "val_size", "final_acc", "best_acc", "best_epoch"], &rows, 1);
        text.push_str(&format!(
            "mean final {:.4} ± {:.4}, mean best {:.4} ± {:.4}\n",
            report.mean_final, report.std_final, report.mean_best, report.std_best
        ));
        r.write("cv.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
        return emit(r, "cv.txt", &text);
    }
    if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        bail!("--val-fraction must lie in (0, 1)");
    }
    let folds = train::fold_indices(ds.len(), 2, seed)?;
    let mut idx: Vec<usize> = folds.concat();
    let n_val = ((ds.len() as f64 * a.val_fraction).round() as usize).clamp(1, ds.len() - 1);
    let train_idx = idx.split_off(n_val);
    let (tr, va) = (ds.subset(&train_idx), ds.subset(&idx));
    let out = train::train_with_validation(&spec, &tr, Some(&va), &cfg, strategy)?;
    let model_path = a.save.clone().unwrap_or_else(|| r.dir.join("model.xnr"));
    netspec::save_model(&model_path, &out.model).with_context(|| format!("saving {}", model_path.display()))?;
    r.outputs.push(model_path.display().to_string());
    if let Some(n) = &out.normalization {
        r.write("normalization.json", &(serde_json::to_string_pretty(n)? + "\n"))?;
    }
    r.write("history.tsv", &out.history_tsv())?;
    let train_norm = match &out.normalization {
        Some(n) => tr.apply_normalization(n)?,
        None => tr.clone(),
    };
    let train_acc = train::evaluate(&out.model, &train_norm)?;
    let (best_epoch, best) = out.best_val().unwrap_or((0, 0.0));
    let text = format!(
        "model {} strategy {:?} augment {}\ntrain accuracy {:.4}\nvalidation accuracy final {:.4} best {:.4} (epoch {best_epoch})\nsaved {}\n",
        spec.name,
        strategy,
        a.augment,
        train_acc,
        out.final_val_accuracy().unwrap_or(0.0),
        best,
        model_path.display()
    );
    emit(r, "train.txt", &text)
}

fn read_norm(path: Option<&Path>) -> Result<Option<Normalization>> {
    let Some(p) = path else { return Ok(None) };
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
    let get = |k: &str| -> Result<Vec<f32>> {
        v[k].as_array()
            .with_context(|| format!("normalization file lacks '{k}'"))?
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32).context("non-numeric normalization entry"))
            .collect()
    };
    Ok(Some(Normalization {
        mean: get("mean")?,
        std: get("std")?,
    }))
}

fn prepared_data(data: &DataArgs, norm: Option<&Path>, seed: u64) -> Result<Dataset> {
    let ds = load_data(data, seed)?;
    Ok(match read_norm(norm)? {
        Some(n) => ds.apply_normalization(&n)?,
        None => ds,
    })
}

fn cmd_infer(r: &mut Run, model_file: &Path, data: &DataArgs, norm: Option<&Path>, format: Format, seed: u64) -> Result<()> {
    let model = netspec::load_model(model_file).with_context(|| format!("loading {}", model_file.display()))?;
    let ds = prepared_data(data, norm, seed)?;
    if ds.is_empty() {
        return Err(xnorram::Error::Shape {
            layer: None,
            msg: "no input samples".into(),
        }
        .into());
    }
    let mut rows = Vec::new();
    let mut correct = 0;
    for i in 0..ds.len() {
        let scores = model.forward(&ds.tensor(i))?;
        let pred = argmax(&scores);
        correct += (pred == ds.labels()[i]) as usize;
        rows.push(vec![
            i.to_string(),
            ds.labels()[i].to_string(),
            pred.to_string(),
            scores.iter().map(|s| format!("{s:.5}")).collect::<Vec<_>>().join(" "),
        ]);
    }
    let acc = correct as f64 / ds.len() as f64;
    let header = ["sample", "label", "predicted", "scores"];
    let text = match format {
        Format::Text => aligned(&header, &rows, 4) + &format!("accuracy {acc:.4}\n"),
        Format::Tsv => tsv(&header, &rows),
        Format::Json => {
            let v: Vec<_> = rows
                .iter()
                .map(|row| json!({"sample": row[0], "label": row[1], "predicted": row[2], "scores": row[3]}))
                .collect();
            serde_json::to_string_pretty(&json!({"predictions": v, "accuracy": acc}))? + "\n"
        }
    };
    emit(r, &format!("infer.{}", format.ext()), &text)
}

struct SweepOpts<'a> {
    modes: &'a [String],
    cycles: &'a [u64],
    repetitions: usize,
    ber_curve: &'a [String],
    read_time: bool,
    format: Format,
}

fn cmd_fault_sweep(r: &mut Run, model_file: &Path, data: &DataArgs, norm: Option<&Path>, o: &SweepOpts, seed: u64) -> Result<()> {
    let model = netspec::load_model(model_file).with_context(|| format!("loading {}", model_file.display()))?;
    let ds = prepared_data(data, norm, seed.wrapping_add(1))?;
    let modes: Vec<CellMode> = o.modes.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
    let mut custom: Vec<(CellMode, BerCurve)> = Vec::new();
    for spec in o.ber_curve {
        let (m, path) = spec.split_once('=').context("--ber-curve expects <mode>=<file>")?;
        custom.push((m.parse()?, BerCurve::load(path).with_context(|| format!("loading {path}"))?));
    }
    let curves = modes
        .iter()
        .map(|&m| (m, custom.iter().find(|(c, _)| *c == m).map(|(_, c)| c)))
        .collect();
    let cfg = SweepConfig {
        curves,
        cycles: o.cycles.to_vec(),
        repetitions: o.repetitions,
        seed,
        timing: if o.read_time { FaultTiming::Read } else { FaultTiming::Program },
    };
    let rows = rram::fault_sweep(&model, &ds.tensors(), ds.labels(), &cfg)?;
    let clean = train::evaluate(&model, &ds)?;
    let header = ["mode", "cycles", "ber", "mean_acc", "std_acc", "mean_flips"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            vec![
                row.mode.to_string(),
                row.cycles.to_string(),
                format!("{:.3e}", row.ber),
                format!("{:.4}", row.mean_accuracy),
                format!("{:.4}", row.std_accuracy),
                format!("{:.1}", row.mean_flips),
            ]
        })
        .collect();
    let text = match o.format {
        Format::Text => format!("clean accuracy {clean:.4}\n") + &aligned(&header, &cells, 1),
        Format::Tsv => tsv(&header, &cells),
        Format::Json => serde_json::to_string_pretty(&json!({"clean_accuracy": clean, "rows": rows}))? + "\n",
    };
    emit(r, &format!("fault-sweep.{}", o.format.ext()), &text)
}

fn cmd_selftest(r: &mut Run, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = |rng: &mut ChaCha8Rng| -> i8 { if rng.random() { 1 } else { -1 } };
    let mut lines = Vec::new();
    let mut failed = 0;
    let mut check = |name: &str, ok: bool| {
        lines.push(format!("[{}] {name}", if ok { "PASS" } else { "FAIL" }));
        failed += (!ok) as usize;
    };

    let mut dense_ok = true;
    for _ in 0..200 {
        let n = rng.random_range(1..=200);
        let a: Vec<i8> = (0..n).map(|_| sign(&mut rng)).collect();
        let b: Vec<i8> = (0..n).map(|_| sign(&mut rng)).collect();
        let naive: i64 = a.iter().zip(&b).map(|(x, y)| (*x as i64) * (*y as i64)).sum();
        let ta = BitTensor::from_signs(vec![n], &a)?;
        let tb = BitTensor::from_signs(vec![n], &b)?;
        dense_ok &= bitcore::binary_dot(&ta, &tb)? == naive;
    }
    check("binary dot equals ±1 reference", dense_ok);

    let mut conv_ok = true;
    for _ in 0..50 {
        let (t, c, f, k) = (rng.random_range(4..24), rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
        let pad = rng.random_range(0..k);
        let xs: Vec<i8> = (0..t * c).map(|_| sign(&mut rng)).collect();
        let ws: Vec<i8> = (0..f * k * c).map(|_| sign(&mut rng)).collect();
        let geom = ConvGeometry::temporal(pad);
        let xr: Vec<f32> = xs.iter().map(|&v| v as f32).collect();
        let wr: Vec<f32> = ws.iter().map(|&v| v as f32).collect();
        let (real, _) = layers::conv_real(&xr, [t, 1, c], &wr, [f, k, 1, c], &geom)?;
        let (bin, _) = layers::conv_binary(
            &BitTensor::from_signs(vec![t, 1, c], &xs)?,
            [t, 1, c],
            &BitTensor::from_signs(vec![f, k, 1, c], &ws)?,
            [f, k, 1, c],
            &geom,
        )?;
        conv_ok &= real.iter().zip(&bin).all(|(a, b)| *a == *b as f32);
    }
    check("binary convolution equals ±1 reference", conv_ok);

    let bn = BatchNormParams {
        mean: vec![0.3, -2.0, 1.0],
        variance: vec![2.0, 0.5, 1.0],
        scale: vec![1.5, -0.7, 0.2],
        shift: vec![-0.1, 0.4, 0.0],
        epsilon: 1e-5,
    };
    let n = 16;
    let th = layers::fold_batchnorm(&bn, n)?;
    let fold_ok = (0..3).all(|ch| {
        (-(n as i32)..=n as i32).all(|a| th[ch].fires(a) == layers::sign_bit(bn.apply(ch, a as f32)))
    });
    check("folded thresholds equal batch-norm then sign", fold_ok);

    let cell = rram::SynapseCell::programmed(CellMode::T2R2, -1);
    let pcsa_ok = rram::pcsa_read(&cell, 0.0, &mut rng)? == -1 && rram::pcsa_xnor_read(&cell, -1, 0.0, &mut rng)? == 1;
    check("sense-amplifier read and XNOR truth table", pcsa_ok);

    let spec = netspec::builtin("eeg_dose")?;
    let shapes: Vec<String> = spec.infer_shapes()?.iter().map(|s| s.to_string()).collect();
    check("built-in shape inference", shapes.last().map(String::as_str) == Some("2"));

    let x = RealTensor::from_vec(vec![0.5, -0.5])?;
    check("pack/unpack round trip", bitcore::unpack(&bitcore::pack(&x)?).data() == [1.0, -1.0]);

    let text = lines.join("\n") + "\n";
    emit(r, "selftest.txt", &text)?;
    if failed > 0 {
        bail!("{failed} self-test check(s) failed");
    }
    Ok(())
}
