//! Synthetic teacher models and the accuracy-recovery experiment.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with a `u64`. Bell
//! samples are Irwin-Hall sums of twelve uniforms minus six, which only
//! needs additions and is therefore bit-stable across platforms.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Activation, Executor};
use crate::quantizer::{check_bits, quantize_model};
use crate::splitter::{split_model, SplitOptions};
use crate::tensor_store::{insert_tensor, LayerKind, LayerSpec, ModelGraph, Tensor, TensorTable};

pub const MAX_OUTLIER_FRAC: f64 = 0.05;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Approximately standard-normal sample with support `[-6, 6]`.
pub fn bell(rng: &mut impl Rng) -> f64 {
    (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0
}

/// Bulk-plus-outliers value distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub bulk_sigma: f32,
    pub outlier_frac: f64,
    pub outlier_mag: f32,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        OutlierSpec {
            bulk_sigma: 0.05,
            outlier_frac: 0.002,
            outlier_mag: 1.0,
        }
    }
}

impl OutlierSpec {
    fn check(&self) -> Result<()> {
        if !(0.0..=MAX_OUTLIER_FRAC).contains(&self.outlier_frac) {
            return Err(Error::Argument(format!(
                "outlier fraction {} outside [0, {MAX_OUTLIER_FRAC}]",
                self.outlier_frac
            )));
        }
        if !(self.bulk_sigma.is_finite() && self.outlier_mag.is_finite()) {
            return Err(Error::Argument("non-finite distribution parameters".into()));
        }
        Ok(())
    }

    pub fn outlier_count(&self, n: usize) -> usize {
        ((n as f64 * self.outlier_frac).ceil() as usize).min(n)
    }

    /// `n` bell values scaled by `bulk_sigma`, with `ceil(n * outlier_frac)`
    /// of them replaced by `+mag, -mag, +mag, ...` at random positions.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<f32>> {
        self.check()?;
        let mut v: Vec<f32> = (0..n)
            .map(|_| (bell(rng) * self.bulk_sigma as f64) as f32)
            .collect();
        let k = self.outlier_count(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + rng.gen_range(0..(n - i) as u64) as usize;
            idx.swap(i, j);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            v[idx[i]] = sign * self.outlier_mag;
        }
        Ok(v)
    }
}

pub fn gen_outlier_tensor(
    name: &str,
    n: usize,
    bulk_sigma: f32,
    outlier_frac: f64,
    outlier_mag: f32,
    seed: u64,
) -> Result<Tensor> {
    let spec = OutlierSpec {
        bulk_sigma,
        outlier_frac,
        outlier_mag,
    };
    Tensor::from_f32(name, vec![n], &spec.sample(n, &mut rng(seed))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeskKind {
    Mlp,
    Attn,
}

/// Shape and distribution of a desk-scale teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub kind: DeskKind,
    /// MLP input features.
    pub input_dim: usize,
    /// MLP hidden width.
    pub hidden: usize,
    pub classes: usize,
    pub samples: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub d_model: usize,
    /// Hidden blocks in the MLP (linear, relu, optional layernorm).
    pub depth: usize,
    pub layernorm: bool,
    /// Keep only inputs whose top-1 vs top-2 logit gap is at least this
    /// multiple of the logit RMS. Zero keeps every input.
    pub min_margin: f32,
    pub weights: OutlierSpec,
    pub seed: u64,
}

impl DeskConfig {
    pub fn mlp(seed: u64) -> Self {
        DeskConfig {
            kind: DeskKind::Mlp,
            input_dim: 16,
            hidden: 64,
            classes: 4,
            samples: 512,
            vocab: 32,
            seq_len: 8,
            d_model: 16,
            depth: 1,
            layernorm: false,
            min_margin: 0.0,
            weights: OutlierSpec::default(),
            seed,
        }
    }

    /// The frozen accuracy-recovery benchmark: a six-block MLP with
    /// layernorm, 2% outliers and confidently labelled inputs.
    pub fn benchmark(seed: u64) -> Self {
        DeskConfig {
            samples: 1000,
            depth: 6,
            layernorm: true,
            min_margin: 1.0,
            weights: OutlierSpec {
                outlier_frac: 0.02,
                ..OutlierSpec::default()
            },
            ..DeskConfig::mlp(seed)
        }
    }

    pub fn attn(seed: u64) -> Self {
        DeskConfig {
            kind: DeskKind::Attn,
            ..DeskConfig::mlp(seed)
        }
    }

    fn check(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.hidden,
            self.classes,
            self.vocab,
            self.seq_len,
            self.d_model,
            self.depth,
        ];
        if dims.contains(&0) {
            return Err(Error::Argument(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        self.weights.check()
    }
}

/// Inputs with teacher-assigned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Activation>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DeskModel {
    pub graph: ModelGraph,
    pub tensors: TensorTable,
    pub dataset: Dataset,
    pub classes: usize,
}

struct Builder {
    rng: ChaCha8Rng,
    tensors: TensorTable,
    weights: OutlierSpec,
}

impl Builder {
    fn outlier(&mut self, name: &str, shape: Vec<usize>) -> Result<String> {
        let n = shape.iter().product();
        let v = self.weights.sample(n, &mut self.rng)?;
        self.put(name, shape, &v)
    }

    fn bell(&mut self, name: &str, shape: Vec<usize>, center: f32, sigma: f32) -> Result<String> {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n)
            .map(|_| center + (bell(&mut self.rng) * sigma as f64) as f32)
            .collect();
        self.put(name, shape, &v)
    }

    fn put(&mut self, name: &str, shape: Vec<usize>, v: &[f32]) -> Result<String> {
        insert_tensor(&mut self.tensors, Tensor::from_f32(name, shape, v)?);
        Ok(name.to_owned())
    }

    fn linear(&mut self, name: &str, out_f: usize, in_f: usize) -> Result<LayerSpec> {
        let w = self.outlier(&format!("{name}.weight"), vec![out_f, in_f])?;
        let sigma = self.weights.bulk_sigma;
        let b = self.bell(&format!("{name}.bias"), vec![out_f], 0.0, sigma)?;
        Ok(LayerSpec::linear(name, &w, Some(&b)))
    }
}

/// Builds a teacher model with outlier-injected weights and a dataset
/// labelled by the teacher's own `f32` predictions.
pub fn gen_desk_model(cfg: &DeskConfig) -> Result<DeskModel> {
    cfg.check()?;
    let mut b = Builder {
        rng: rng(cfg.seed),
        tensors: TensorTable::new(),
        weights: cfg.weights,
    };
    let graph = match cfg.kind {
        DeskKind::Mlp => {
            let mut layers = Vec::new();
            let mut width = cfg.input_dim;
            for i in 1..=cfg.depth {
                layers.push(b.linear(&format!("fc{i}"), cfg.hidden, width)?);
                layers.push(LayerSpec::new(format!("act{i}"), LayerKind::Relu));
                if cfg.layernorm {
                    let g = b.bell(&format!("norm{i}.weight"), vec![cfg.hidden], 1.0, 0.1)?;
                    let bb = b.bell(&format!("norm{i}.bias"), vec![cfg.hidden], 0.0, 0.1)?;
                    layers.push(
                        LayerSpec::new(format!("norm{i}"), LayerKind::Layernorm).with_tensors(&g, Some(&bb)),
                    );
                }
                width = cfg.hidden;
            }
            layers.push(b.linear(&format!("fc{}", cfg.depth + 1), cfg.classes, width)?);
            ModelGraph::new(vec![cfg.input_dim], layers)
        }
        DeskKind::Attn => {
            let d = cfg.d_model;
            let emb = b.bell("embed.weight", vec![cfg.vocab, d], 0.0, 1.0)?;
            let gamma = b.bell("norm.weight", vec![d], 1.0, 0.1)?;
            let beta = b.bell("norm.bias", vec![d], 0.0, 0.1)?;
            let attn = LayerSpec::new("attn", LayerKind::SoftmaxAttention)
                .with_attr("head_dim", d as i64)
                .with_children(vec![
                    b.linear("attn.q", d, d)?,
                    b.linear("attn.k", d, d)?,
                    b.linear("attn.v", d, d)?,
                    b.linear("attn.o", d, d)?,
                ]);
            ModelGraph::new(
                vec![cfg.seq_len],
                vec![
                    LayerSpec::new("embed", LayerKind::Embedding).with_tensors(&emb, None),
                    LayerSpec::new("norm", LayerKind::Layernorm).with_tensors(&gamma, Some(&beta)),
                    attn,
                    b.linear("head", cfg.classes, d)?,
                ],
            )
        }
    };
    let mut graph = graph;
    graph.metadata.insert("generator".into(), "desk".into());
    graph.metadata.insert("seed".into(), cfg.seed.to_string());

    let teacher = Executor::new(&graph, &b.tensors)?;
    let mut source = rng(cfg.seed.wrapping_add(1));
    let mut inputs = Vec::with_capacity(cfg.samples);
    let mut labels = Vec::with_capacity(cfg.samples);
    let threshold = if cfg.min_margin > 0.0 {
        let probe = random_inputs_from(&graph, 256, &mut source, Some(cfg.vocab))?;
        let mut sq = 0.0f64;
        let mut n = 0usize;
        for x in &probe {
            let y = teacher.run(x)?;
            let row = last_row(&y);
            sq += row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
            n += row.len();
        }
        cfg.min_margin * (sq / n.max(1) as f64).sqrt() as f32
    } else {
        0.0
    };
    let max_draws = cfg.samples.saturating_mul(1000).max(1000);
    let mut draws = 0;
    while inputs.len() < cfg.samples {
        if draws == max_draws {
            return Err(Error::Argument(format!(
                "only {} of {} inputs reached margin {}",
                inputs.len(),
                cfg.samples,
                cfg.min_margin
            )));
        }
        draws += 1;
        let x = random_inputs_from(&graph, 1, &mut source, Some(cfg.vocab))?.remove(0);
        let y = teacher.run(&x)?;
        if threshold > 0.0 && top_margin(last_row(&y)) < threshold {
            continue;
        }
        labels.push(y.argmax_last_row());
        inputs.push(x);
    }
    Ok(DeskModel {
        graph,
        tensors: b.tensors,
        dataset: Dataset { inputs, labels },
        classes: cfg.classes,
    })
}

/// Random inputs for a model: token ids when the first layer is an
/// embedding, bell-distributed features otherwise.
pub fn random_inputs(
    graph: &ModelGraph,
    count: usize,
    seed: u64,
    vocab: Option<usize>,
) -> Result<Vec<Activation>> {
    random_inputs_from(graph, count, &mut rng(seed), vocab)
}

fn last_row(y: &Activation) -> &[f32] {
    let w = y.shape.last().copied().unwrap_or(1).max(1);
    &y.values[y.values.len().saturating_sub(w)..]
}

/// Gap between the largest and second-largest entry.
fn top_margin(row: &[f32]) -> f32 {
    let (mut a, mut b) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &v in row {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    if b.is_finite() {
        a - b
    } else {
        f32::INFINITY
    }
}

fn random_inputs_from(
    graph: &ModelGraph,
    count: usize,
    r: &mut ChaCha8Rng,
    vocab: Option<usize>,
) -> Result<Vec<Activation>> {
    let n: usize = graph.input_shape.iter().product();
    let ids = graph
        .layers
        .first()
        .is_some_and(|l| l.kind == LayerKind::Embedding);
    let vocab = vocab.unwrap_or(1).max(1) as u64;
    (0..count)
        .map(|_| {
            let values = if ids {
                (0..n).map(|_| r.gen_range(0..vocab) as f32).collect()
            } else {
                (0..n).map(|_| bell(r) as f32).collect()
            };
            Activation::new(graph.input_shape.clone(), values)
        })
        .collect()
}

/// Vocabulary size of a model's leading embedding, if any.
pub fn embedding_vocab(graph: &ModelGraph, tensors: &TensorTable) -> Option<usize> {
    let first = graph.layers.first()?;
    if first.kind != LayerKind::Embedding {
        return None;
    }
    tensors.get(first.weight.as_deref()?).map(|t| t.shape()[0])
}

/// Labels a set of inputs with a model's own predictions.
pub fn teacher_labels(
    graph: &ModelGraph,
    tensors: &TensorTable,
    inputs: &[Activation],
) -> Result<Vec<usize>> {
    let exec = Executor::new(graph, tensors)?;
    inputs
        .iter()
        .map(|x| exec.run(x).map(|y| y.argmax_last_row()))
        .collect()
}

pub fn accuracy(graph: &ModelGraph, tensors: &TensorTable, data: &Dataset) -> Result<f64> {
    if data.inputs.is_empty() {
        return Ok(0.0);
    }
    let predicted = teacher_labels(graph, tensors, &data.inputs)?;
    let hits = predicted.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.inputs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub bits: u8,
    /// Accuracy of the quantized teacher.
    pub baseline: f64,
    /// Accuracy of the split-then-quantized teacher.
    pub split: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub fp_accuracy: f64,
    pub split_fp_accuracy: f64,
    pub chance: f64,
    pub rows: Vec<Table1Row>,
}

impl Table1 {
    pub fn row(&self, bits: u8) -> Option<&Table1Row> {
        self.rows.iter().find(|r| r.bits == bits)
    }
}

/// Accuracy of `quantize(model)` and `quantize(split(model))` per bit-width.
pub fn run_table1_analog(
    graph: &ModelGraph,
    tensors: &TensorTable,
    data: &Dataset,
    classes: usize,
    bits: &[u8],
    opts: &SplitOptions,
) -> Result<Table1> {
    for &b in bits {
        check_bits(b)?;
    }
    let (sg, st, _) = split_model(graph, tensors, opts)?;
    let mut rows = Vec::with_capacity(bits.len());
    for &b in bits {
        let (qg, qt) = quantize_model(graph, tensors, b)?;
        let (qsg, qst) = quantize_model(&sg, &st, b)?;
        rows.push(Table1Row {
            bits: b,
            baseline: accuracy(&qg, &qt, data)?,
            split: accuracy(&qsg, &qst, data)?,
        });
    }
    Ok(Table1 {
        fp_accuracy: accuracy(graph, tensors, data)?,
        split_fp_accuracy: accuracy(&sg, &st, data)?,
        chance: 1.0 / classes.max(1) as f64,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub parameters: usize,
    pub split_layers: usize,
    pub bits: u8,
    pub threads: usize,
    pub split_seconds: f64,
    pub quantize_seconds: f64,
    pub total_seconds: f64,
}

/// Times split then quantize. `threads = Some(n)` runs on a private pool of
/// `n` threads; `None` uses the global pool.
pub fn bench(
    graph: &ModelGraph,
    tensors: &TensorTable,
    bits: u8,
    opts: &SplitOptions,
    threads: Option<usize>,
) -> Result<BenchReport> {
    check_bits(bits)?;
    let run = || -> Result<BenchReport> {
        let parameters = tensors.values().map(Tensor::numel).sum();
        let t0 = Instant::now();
        let (sg, st, reports) = split_model(graph, tensors, opts)?;
        let split_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let quantized = quantize_model(&sg, &st, bits)?;
        let quantize_seconds = t1.elapsed().as_secs_f64();
        drop(quantized);
        Ok(BenchReport {
            parameters,
            split_layers: reports.len(),
            bits,
            threads: rayon::current_num_threads(),
            split_seconds,
            quantize_seconds,
            total_seconds: split_seconds + quantize_seconds,
        })
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Argument(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Stack of square linear layers with roughly `parameters` weights and biases.
pub fn gen_bench_model(parameters: usize, width: usize, seed: u64) -> Result<(ModelGraph, TensorTable)> {
    if width == 0 {
        return Err(Error::Argument("width must be positive".into()));
    }
    let per_layer = width * width + width;
    let depth = (parameters + per_layer / 2) / per_layer;
    let mut b = Builder {
        rng: rng(seed),
        tensors: TensorTable::new(),
        weights: OutlierSpec::default(),
    };
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        layers.push(b.linear(&format!("layers.{i}"), width, width)?);
    }
    Ok((ModelGraph::new(vec![width], layers), b.tensors))
}
