//! `splitquant` command-line tool.
//!
//! Summaries go to stdout as JSON, diagnostics to stderr. Exit status is 0 on
//! success, 1 for argument, validation and other domain errors, 2 for I/O
//! failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use splitquant_core::clustering::kmeans3_default;
use splitquant_core::harness::{
    bench, embedding_vocab, gen_bench_model, gen_desk_model, random_inputs, run_table1_analog,
    teacher_labels, Dataset, DeskConfig,
};
use splitquant_core::quantizer::{check_bits, error_stats, mse_and_max, quantize_tensor, QuantParams};
use splitquant_core::{
    forward, load_model, quantize_model, save_model, split_model, unsplit_check, Activation, DType, Error,
    LayerSpec, ModelGraph, SplitOptions, TensorTable,
};

const THREADS_ENV: &str = "SPLITQUANT_THREADS";

#[derive(Parser)]
#[command(
    name = "splitquant",
    version,
    about = "Split layers by weight cluster and quantize them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite each linear/conv2d layer as three cluster sublayers.
    Split {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Layers with fewer weight elements are left as they are.
        #[arg(long, default_value_t = SplitOptions::default().min_elems)]
        min_elems: usize,
    },
    /// Per-tensor affine quantization of all weights and biases.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bits: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the outputs of two models on the same inputs.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// JSON array of inputs, each a flat array of numbers.
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        inputs: Option<PathBuf>,
        /// Number of random inputs to draw instead of reading a file.
        #[arg(long)]
        random: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest tolerated absolute output difference.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Accuracy of quantized vs split-then-quantized models on teacher labels.
    Eval(EvalArgs),
    /// Per-tensor quantization parameters and error, plus cluster centroids.
    Stats {
        #[arg(long)]
        model: PathBuf,
        /// Original model to measure the error of a quantized model against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Quantize float tensors at this width to report their error.
        #[arg(long)]
        bits: Option<u8>,
    },
    /// Time splitting plus quantization.
    Bench {
        /// Model to time; a synthetic stack of linears is generated when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long, default_value_t = 10_000_000)]
        parameters: usize,
        #[arg(long, default_value_t = 1024)]
        width: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write a synthetic teacher model.
    Gen {
        #[command(flatten)]
        desk: DeskArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Mlp,
    Attn,
    /// The frozen accuracy benchmark.
    Benchmark,
}

#[derive(Args)]
struct DeskArgs {
    #[arg(long, value_enum, default_value = "mlp")]
    kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    outlier_frac: Option<f64>,
}

impl DeskArgs {
    fn config(&self) -> DeskConfig {
        let mut cfg = match self.kind {
            Kind::Mlp => DeskConfig::mlp(self.seed),
            Kind::Attn => DeskConfig::attn(self.seed),
            Kind::Benchmark => DeskConfig::benchmark(self.seed),
        };
        cfg.samples = self.samples.unwrap_or(cfg.samples);
        cfg.hidden = self.hidden.unwrap_or(cfg.hidden);
        cfg.depth = self.depth.unwrap_or(cfg.depth);
        cfg.classes = self.classes.unwrap_or(cfg.classes);
        cfg.weights.outlier_frac = self.outlier_frac.unwrap_or(cfg.weights.outlier_frac);
        cfg
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    desk: DeskArgs,
    /// Use this model as the teacher instead of generating one.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "8,4,2")]
    bits: Vec<u8>,
    #[arg(long, default_value_t = SplitOptions::default().min_elems)]
    min_elems: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        return fail(&e);
    }
    match run(cli.command) {
        Ok(Outcome { summary, ok }) => {
            let text = serde_json::to_string_pretty(&summary).expect("json value");
            // A closed pipe (`splitquant ... | head`) is not an error.
            if let Err(e) = writeln!(std::io::stdout(), "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return fail(&Error::Io(e));
                }
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("splitquant: {e}");
    ExitCode::from(if e.is_io() { 2 } else { 1 })
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Argument(format!("{THREADS_ENV}={raw} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Argument(e.to_string()))
}

struct Outcome {
    summary: Value,
    ok: bool,
}

impl From<Value> for Outcome {
    fn from(summary: Value) -> Self {
        Outcome { summary, ok: true }
    }
}

fn run(command: Command) -> Result<Outcome, Error> {
    match command {
        Command::Split {
            model,
            out,
            min_elems,
        } => split(&model, &out, min_elems),
        Command::Quantize { model, bits, out } => quantize(&model, bits, &out),
        Command::Verify {
            a,
            b,
            inputs,
            random,
            seed,
            tol,
        } => verify(&a, &b, inputs.as_deref(), random, seed, tol),
        Command::Eval(args) => eval(&args),
        Command::Stats {
            model,
            reference,
            bits,
        } => stats(&model, reference.as_deref(), bits),
        Command::Bench {
            model,
            bits,
            parameters,
            width,
            threads,
        } => {
            let (g, t) = match model {
                Some(p) => load_model(p)?,
                None => gen_bench_model(parameters, width, 0)?,
            };
            Ok(json!(bench(&g, &t, bits, &SplitOptions::default(), threads)?).into())
        }
        Command::Gen { desk, out } => {
            let m = gen_desk_model(&desk.config())?;
            guard_output(&out, &[])?;
            save_model(&m.graph, &m.tensors, &out)?;
            Ok(json!({
                "out": out,
                "layers": m.graph.layers.len(),
                "parameters": m.tensors.values().map(|t| t.numel()).sum::<usize>(),
            })
            .into())
        }
    }
}

/// Refuses to write over one of the command's inputs.
fn guard_output(out: &Path, inputs: &[&Path]) -> Result<(), Error> {
    let Ok(target) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().is_ok_and(|p| p == target) {
            return Err(Error::Argument(format!(
                "output {} would overwrite an input file",
                out.display()
            )));
        }
    }
    Ok(())
}

fn split(model: &Path, out: &Path, min_elems: usize) -> Result<Outcome, Error> {
    let (g, t) = load_model(model)?;
    let opts = SplitOptions {
        min_elems,
        ..SplitOptions::default()
    };
    let (sg, st, reports) = split_model(&g, &t, &opts)?;
    guard_output(out, &[model])?;
    save_model(&sg, &st, out)?;
    Ok(json!({
        "summary": format!("{} layers split", reports.len()),
        "split_layers": reports.len(),
        "layers": reports,
    })
    .into())
}

fn quantize(model: &Path, bits: u8, out: &Path) -> Result<Outcome, Error> {
    check_bits(bits)?;
    let (g, t) = load_model(model)?;
    let (qg, qt) = quantize_model(&g, &t, bits)?;
    guard_output(out, &[model])?;
    save_model(&qg, &qt, out)?;
    let bytes = |t: &TensorTable| t.values().map(|x| x.data().len()).sum::<usize>();
    let quantized = qt
        .iter()
        .filter(|(name, q)| q.dtype().is_integer() && t[*name].dtype() == DType::F32)
        .count();
    Ok(json!({
        "bits": bits,
        "quantized_tensors": quantized,
        "payload_bytes_before": bytes(&t),
        "payload_bytes_after": bytes(&qt),
    })
    .into())
}

fn read_inputs(path: &Path, graph: &ModelGraph) -> Result<Vec<Activation>, Error> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f32>> = serde_json::from_str(&text).map_err(|e| {
        Error::Argument(format!(
            "{}: expected an array of number arrays: {e}",
            path.display()
        ))
    })?;
    rows.into_iter()
        .map(|v| Activation::new(graph.input_shape.clone(), v))
        .collect()
}

fn verify(
    a: &Path,
    b: &Path,
    inputs: Option<&Path>,
    random: Option<usize>,
    seed: u64,
    tol: f64,
) -> Result<Outcome, Error> {
    let (ga, ta) = load_model(a)?;
    let (gb, tb) = load_model(b)?;
    let xs = match (inputs, random) {
        (Some(p), _) => read_inputs(p, &ga)?,
        (None, Some(n)) => random_inputs(&ga, n, seed, embedding_vocab(&ga, &ta))?,
        (None, None) => return Err(Error::Argument("give --inputs or --random".into())),
    };
    let report = unsplit_check((&ga, &ta), (&gb, &tb), &xs)?;
    let ok = report.max_abs_deviation <= tol && report.agreement == 1.0;
    Ok(Outcome {
        summary: json!({ "pass": ok, "tol": tol, "report": report }),
        ok,
    })
}

fn eval(args: &EvalArgs) -> Result<Outcome, Error> {
    let (graph, tensors, data, classes) = match &args.model {
        Some(path) => {
            let (g, t) = load_model(path)?;
            let cfg = args.desk.config();
            let inputs = random_inputs(&g, cfg.samples, cfg.seed, embedding_vocab(&g, &t))?;
            let labels = teacher_labels(&g, &t, &inputs)?;
            let classes = match inputs.first() {
                Some(x) => forward(&g, &t, x)?.shape.last().copied().unwrap_or(1),
                None => 1,
            };
            (g, t, Dataset { inputs, labels }, classes)
        }
        None => {
            let m = gen_desk_model(&args.desk.config())?;
            (m.graph, m.tensors, m.dataset, m.classes)
        }
    };
    let opts = SplitOptions {
        min_elems: args.min_elems,
        ..SplitOptions::default()
    };
    let table = run_table1_analog(&graph, &tensors, &data, classes, &args.bits, &opts)?;
    Ok(json!(table).into())
}

fn stats(model: &Path, reference: Option<&Path>, bits: Option<u8>) -> Result<Outcome, Error> {
    if let Some(b) = bits {
        check_bits(b)?;
    }
    let (g, t) = load_model(model)?;
    let reference = reference.map(load_model).transpose()?;

    let mut params: Vec<(String, QuantParams)> = Vec::new();
    let mut layers: Vec<&LayerSpec> = Vec::new();
    g.walk(|l| {
        layers.push(l);
        for (name, q) in [(&l.weight, l.weight_quant), (&l.bias, l.bias_quant)] {
            if let (Some(n), Some(q)) = (name, q) {
                params.push((n.clone(), q));
            }
        }
    });

    let mut tensors = Vec::new();
    for (name, tensor) in &t {
        let mut entry = json!({ "tensor": name, "dtype": tensor.dtype().as_str(), "shape": tensor.shape() });
        if let Some((_, q)) = params.iter().find(|(n, _)| n == name) {
            entry["bits"] = json!(q.bits);
            entry["scale"] = json!(q.scale);
            entry["zero_point"] = json!(q.zero_point);
            entry["range"] = json!([q.beta, q.alpha]);
            let original = reference
                .as_ref()
                .and_then(|(_, rt)| rt.get(name))
                .filter(|r| r.shape() == tensor.shape());
            if let Some(original) = original {
                let deq: Vec<f32> = tensor.to_ints()?.into_iter().map(|v| q.dequantize(v)).collect();
                let (mse, max) = mse_and_max(&original.to_f32()?, &deq);
                entry["mse"] = json!(mse);
                entry["max_abs_error"] = json!(max);
            }
        } else if tensor.dtype() == DType::F32 {
            let v = tensor.to_f32()?;
            let (lo, hi) = v
                .iter()
                .fold((0.0f32, 0.0f32), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            entry["range"] = json!([lo, hi]);
            if let Some(b) = bits {
                let s = error_stats(tensor, &quantize_tensor(tensor, b)?)?;
                entry["bits"] = json!(b);
                entry["scale"] = json!(s.scale);
                entry["zero_point"] = json!(s.zero_point);
                entry["mse"] = json!(s.mse);
                entry["max_abs_error"] = json!(s.max_abs_error);
            }
        }
        tensors.push(entry);
    }

    let mut clusters = Vec::new();
    for l in layers.into_iter().filter(|l| l.kind.is_splittable()) {
        let mut joint = Vec::new();
        for n in [&l.weight, &l.bias].into_iter().flatten() {
            if t[n].dtype() == DType::F32 {
                joint.extend(t[n].to_f32()?);
            }
        }
        if let Ok(a) = kmeans3_default(&joint) {
            clusters.push(json!({
                "layer": l.name,
                "centroids": a.centroids,
                "boundaries": a.boundaries,
                "counts": a.counts(),
            }));
        }
    }
    Ok(json!({ "tensors": tensors, "clusters": clusters }).into())
}
