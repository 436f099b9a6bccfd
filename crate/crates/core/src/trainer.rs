//! Optimization, scheduling, evaluation and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{self, Batch, BatchStream, PackedDataset};
use crate::error::{Error, Result};
use crate::interventions::{objective, prepare, InterventionKind, InterventionSpec, Phase};
use crate::model::{read_tensors, write_tensors, Head, ModelConfig, ModelOptions, ModelParams};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::tokenizer::TokenizerModel;

/// Warmup, plateau, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    pub decay: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup + self.decay > self.total {
            return Err(Error::Config(format!(
                "warmup {} + decay {} exceed {} steps",
                self.warmup, self.decay, self.total
            )));
        }
        if !(self.peak >= 0.0) {
            return Err(Error::Config("peak learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear from 0 over `[0, W]`, flat over
/// `[W, T - D]`, cosine to 0 over `[T - D, T]`.
pub fn lr_at(step: u64, s: &Schedule) -> Result<f64> {
    s.validate()?;
    if step > s.total {
        return Err(Error::invalid("lr_at", format!("step {step} beyond {}", s.total)));
    }
    let stable_end = s.total - s.decay;
    Ok(if step < s.warmup {
        s.peak * step as f64 / s.warmup as f64
    } else if step <= stable_end {
        s.peak
    } else {
        let progress = (step - stable_end) as f64 / s.decay as f64;
        s.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Moments per parameter tensor. Each tensor counts its own updates, so a
/// tensor that starts training late gets a fresh bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub hyper: AdamW,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub steps: Vec<u64>,
    /// Optimizer steps taken.
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &[Tensor<F>], hyper: AdamW) -> Self {
        OptimizerState {
            hyper,
            m: params.iter().map(|t| vec![F::zero(); t.numel()]).collect(),
            v: params.iter().map(|t| vec![F::zero(); t.numel()]).collect(),
            steps: vec![0; params.len()],
            step: 0,
        }
    }
}

/// Global L2 norm of all present gradients, accumulated in f64.
pub fn grad_norm<F: Scalar>(params: &[Tensor<F>]) -> f64 {
    params
        .iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter().map(|x| x.f64() * x.f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients to global norm `max_norm` when above it (0 disables).
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(params: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        for t in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// One AdamW update. Tensors without a gradient are left untouched,
/// including weight decay. Fails without modifying anything when a
/// gradient is non-finite.
pub fn adamw_step<F: Scalar>(params: &mut [Tensor<F>], state: &mut OptimizerState<F>, lr: f64) -> Result<()> {
    let step = state.step + 1;
    let any_bad = params
        .iter()
        .filter_map(|t| t.grad())
        .any(|g| g.iter().any(|x| !x.is_finite()));
    if any_bad {
        return Err(Error::NonFinite {
            what: "gradient",
            step,
            last_checkpoint: None,
        });
    }
    let h = state.hyper;
    let (b1, b2) = (F::of(h.beta1), F::of(h.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - h.beta1), F::of(1.0 - h.beta2));
    let lr_f = F::of(lr);
    let decay = F::one() - F::of(lr * h.weight_decay);
    let eps = F::of(h.eps);
    for (i, t) in params.iter_mut().enumerate() {
        let (p, g) = t.data_and_grad_mut();
        let Some(g) = g else { continue };
        state.steps[i] += 1;
        let n = state.steps[i] as i32;
        let c1 = F::one() / F::of(1.0 - h.beta1.powi(n));
        let c2 = F::one() / F::of(1.0 - h.beta2.powi(n));
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] * c1;
            let v_hat = v[j] * c2;
            p[j] = p[j] * decay - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = step;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSplit {
    Train,
    Val,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: MetricSplit,
    /// Objective value (train) or nats per byte (val).
    pub loss: f64,
    pub nats_per_byte: f64,
    pub bits_per_byte: f64,
    pub lr: f64,
    pub bytes_seen: u64,
    pub samples_seen: u64,
    pub tokens_seen: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub bytes_seen: u64,
    pub samples_seen: u64,
    /// Transformer positions processed.
    pub tokens_seen: u64,
}

/// Summed validation NLL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub nll_sum: f64,
    pub bytes: usize,
}

impl EvalResult {
    pub fn nats_per_byte(&self) -> f64 {
        self.nll_sum / self.bytes as f64
    }

    pub fn bits_per_byte(&self) -> f64 {
        self.nats_per_byte() / std::f64::consts::LN_2
    }
}

/// Mean next-byte NLL over every validation byte, scored with the byte head
/// and the evaluation inputs of `spec` (see [`prepare`]).
pub fn evaluate_bpb<F: Scalar>(
    params: &ModelParams<F>,
    val: &PackedDataset,
    spec: &InterventionSpec,
    active: bool,
    seq_len: usize,
    batch_size: usize,
    max_windows: Option<usize>,
) -> Result<EvalResult> {
    let mut windows = data::eval_windows(val, seq_len);
    if let Some(k) = max_windows {
        windows.truncate(k);
    }
    if windows.is_empty() {
        return Err(Error::invalid("evaluate_bpb", "empty validation set"));
    }
    let mut nll_sum = 0.0f64;
    let mut bytes = 0usize;
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].1;
        let mut offsets = Vec::with_capacity(batch_size);
        while i < windows.len() && windows[i].1 == len && offsets.len() < batch_size {
            offsets.push(windows[i].0);
            i += 1;
        }
        let batch = Batch::from_windows(val, &offsets, len);
        let prep = prepare(spec, &batch, active, Phase::Eval)?;
        let mut g = Graph::<F>::new();
        let vars = params
            .tensors()
            .iter()
            .map(|t| g.constant(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let obj = objective(&mut g, params, &vars, &prep)?;
        nll_sum += g.scalar(obj.nll_sum).f64();
        bytes += obj.predicted;
    }
    if bytes == 0 {
        return Err(Error::invalid("evaluate_bpb", "no predicted bytes"));
    }
    Ok(EvalResult { nll_sum, bytes })
}

/// Tokenizer and packed splits of one corpus.
pub struct TrainData {
    pub tokenizer: TokenizerModel,
    pub train: PackedDataset,
    pub val: PackedDataset,
}

/// Identity of (tokenizer, split fraction, corpus listing) used to validate caches.
fn data_fingerprint(tok: &TokenizerModel, files: &[PathBuf], val_fraction: f64) -> Result<u64> {
    let mut key = tok.to_json().into_bytes();
    key.extend_from_slice(&val_fraction.to_bits().to_le_bytes());
    for f in files {
        let len = fs::metadata(f).map_err(|e| Error::io(f, e))?.len();
        key.extend_from_slice(f.to_string_lossy().as_bytes());
        key.extend_from_slice(&len.to_le_bytes());
    }
    Ok(data::fingerprint(&key))
}

/// Load the tokenizer and corpus, reusing or filling `data_cache`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<TrainData> {
    let tokenizer = TokenizerModel::load(&cfg.tokenizer)?;
    let files = data::corpus_files(&cfg.corpus)?;
    let fp = data_fingerprint(&tokenizer, &files, cfg.val_fraction)?;
    if let Some(dir) = &cfg.data_cache {
        let (tp, vp) = (dir.join("train.blbd"), dir.join("val.blbd"));
        if tp.exists() && vp.exists() {
            let (train, f1) = data::read_cache(&tp)?;
            let (val, f2) = data::read_cache(&vp)?;
            if f1 == fp && f2 == fp {
                return Ok(TrainData { tokenizer, train, val });
            }
            log::info!("cache in {} is stale; re-ingesting", dir.display());
        }
    }
    let (train, val) = data::ingest(&files, &tokenizer, cfg.val_fraction)?;
    if let Some(dir) = &cfg.data_cache {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        data::write_cache(&train, fp, &dir.join("train.blbd"))?;
        data::write_cache(&val, fp, &dir.join("val.blbd"))?;
    }
    Ok(TrainData { tokenizer, train, val })
}

/// Ingest into `dir` unconditionally; returns the split sizes in positions.
pub fn write_data_cache(cfg: &ExperimentConfig, dir: &Path) -> Result<(usize, usize)> {
    let tokenizer = TokenizerModel::load(&cfg.tokenizer)?;
    let files = data::corpus_files(&cfg.corpus)?;
    let fp = data_fingerprint(&tokenizer, &files, cfg.val_fraction)?;
    let (train, val) = data::ingest(&files, &tokenizer, cfg.val_fraction)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data::write_cache(&train, fp, &dir.join("train.blbd"))?;
    data::write_cache(&val, fp, &dir.join("val.blbd"))?;
    Ok((train.len(), val.len()))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint sidecar (`.json`) or parameter file (`.blab`) to resume from.
    pub resume: Option<PathBuf>,
    /// Stop after this step without finishing the run.
    pub stop_after: Option<u64>,
    /// Add `wall_ms` to records (breaks byte-identical metrics).
    pub wall_clock: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub last_step: u64,
    pub records: Vec<MetricRecord>,
    pub last_checkpoint: Option<PathBuf>,
    pub counters: Counters,
}

/// Contents of a checkpoint's JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub counters: Counters,
    pub model: ModelConfig,
    pub options: ModelOptions,
    pub adamw: AdamW,
    pub optimizer_steps: Vec<u64>,
    pub optimizer_step: u64,
    pub params_file: String,
    pub optimizer_file: String,
    pub experiment: ExperimentConfig,
}

/// Self-description written to every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub intervention: InterventionKind,
    pub switch_step: u64,
    pub params: u64,
    pub train_positions: usize,
    pub val_positions: usize,
    pub config: ExperimentConfig,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:06}.json"))
}

fn save_checkpoint(
    cfg: &ExperimentConfig,
    params: &ModelParams<f32>,
    opt: &OptimizerState<f32>,
    step: u64,
    counters: Counters,
) -> Result<PathBuf> {
    let meta_path = checkpoint_path(&cfg.out_dir, step);
    let dir = meta_path.parent().expect("checkpoint dir");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params_file = format!("step-{step:06}.blab");
    let optimizer_file = format!("step-{step:06}.opt.blab");
    params.save(&dir.join(&params_file))?;
    let shapes: Vec<Tensor<f32>> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            [&opt.m[i], &opt.v[i]].map(|buf| {
                Tensor::new(t.shape().to_vec(), buf.clone()).expect("moment shape mirrors parameter")
            })
        })
        .collect();
    let names: Vec<String> = params
        .names()
        .iter()
        .flat_map(|n| [format!("m/{n}"), format!("v/{n}")])
        .collect();
    let named: Vec<(&str, &Tensor<f32>)> = names.iter().map(String::as_str).zip(&shapes).collect();
    write_tensors(&dir.join(&optimizer_file), &named)?;
    let meta = CheckpointMeta {
        step,
        counters,
        model: params.config.clone(),
        options: params.options.clone(),
        adamw: opt.hyper,
        optimizer_steps: opt.steps.clone(),
        optimizer_step: opt.step,
        params_file,
        optimizer_file,
        experiment: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta_path)
}

/// Load parameters, optimizer state and counters from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ModelParams<f32>, OptimizerState<f32>)> {
    let meta_path = path.with_extension("json");
    let meta_path = if meta_path.exists() { meta_path } else { path.to_path_buf() };
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let params = ModelParams::load(&dir.join(&meta.params_file), meta.model.clone(), meta.options.clone())?;
    let opt_path = dir.join(&meta.optimizer_file);
    let moments = read_tensors(&opt_path)?;
    let n = params.tensors().len();
    if moments.len() != 2 * n || meta.optimizer_steps.len() != n {
        return Err(Error::format(&opt_path, "optimizer state does not match parameters"));
    }
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, pair) in moments.chunks_exact(2).enumerate() {
        let name = &params.names()[i];
        if pair[0].0 != format!("m/{name}") || pair[1].0 != format!("v/{name}") {
            return Err(Error::format(&opt_path, format!("unexpected tensors for {name}")));
        }
        m.push(pair[0].1.data().to_vec());
        v.push(pair[1].1.data().to_vec());
    }
    let opt = OptimizerState {
        hyper: meta.adamw,
        m,
        v,
        steps: meta.optimizer_steps.clone(),
        step: meta.optimizer_step,
    };
    Ok((meta, params, opt))
}

/// Keep only records with `step <= last` in a metrics file.
fn truncate_metrics(path: &Path, last: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: MetricRecord = serde_json::from_str(line)?;
        if rec.step <= last {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

struct MetricsWriter {
    file: fs::File,
    path: PathBuf,
    started: Instant,
    wall_clock: bool,
}

impl MetricsWriter {
    fn write(&mut self, mut rec: MetricRecord) -> Result<MetricRecord> {
        if self.wall_clock {
            rec.wall_ms = Some(self.started.elapsed().as_millis() as u64);
        }
        let line = serde_json::to_string(&rec)? + "\n";
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(rec)
    }
}

/// Model and data layout shared by training and evaluation of one config.
pub fn model_layout(cfg: &ExperimentConfig, tokenizer: &TokenizerModel) -> (ModelConfig, ModelOptions) {
    let subword = (cfg.intervention == InterventionKind::NextSubword).then(|| tokenizer.id_space());
    (cfg.model_config(subword), cfg.model_options())
}

/// Run (or resume) training as configured, writing metrics, checkpoints and
/// a manifest into `cfg.out_dir`.
pub fn train(cfg: &ExperimentConfig, data: &TrainData, opts: &RunOptions) -> Result<TrainSummary> {
    cfg.validate_values()?;
    let spec = cfg.intervention();
    let (model_cfg, options) = model_layout(cfg, &data.tokenizer);
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (mut params, mut opt, mut counters, start) = match &opts.resume {
        Some(p) => {
            let (meta, params, opt) = load_checkpoint(p)?;
            if meta.model != model_cfg || meta.options != options {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different model",
                    p.display()
                )));
            }
            (params, opt, meta.counters, meta.step)
        }
        None => {
            let params = ModelParams::<f32>::init(model_cfg, options, cfg.seed, cfg.init_std)?;
            let opt = OptimizerState::new(params.tensors(), cfg.adamw());
            (params, opt, Counters::default(), 0)
        }
    };

    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        intervention: cfg.intervention,
        switch_step: cfg.switch_step,
        params: params.num_params(),
        train_positions: data.train.len(),
        val_positions: data.val.len(),
        config: cfg.clone(),
    };
    let manifest_path = out.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&manifest_path, e))?;

    let metrics_path = out.join(METRICS_FILE);
    if start > 0 {
        truncate_metrics(&metrics_path, start)?;
    } else {
        fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
    }
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = MetricsWriter {
        file,
        path: metrics_path,
        started: Instant::now(),
        wall_clock: opts.wall_clock,
    };

    let seed = cfg.data_seed();
    let mut narrow = BatchStream::new(&data.train, cfg.batch_size, cfg.seq_len, seed)?;
    let mut wide = if cfg.intervention == InterventionKind::Throughput4 {
        Some(BatchStream::new(&data.train, cfg.batch_size, cfg.seq_len * cfg.chunk, seed)?)
    } else {
        None
    };
    let schedule = cfg.schedule();
    let mut records = Vec::new();
    let mut last_checkpoint = opts.resume.clone();
    let mut last_step = start;

    for step in start + 1..=cfg.steps {
        if opts.stop_after.is_some_and(|s| step > s) {
            break;
        }
        let active = spec.active_at(step);
        let batch = match (&mut wide, active) {
            (Some(w), true) => w.batch(step - 1),
            _ => narrow.batch(step - 1),
        };
        let prep = prepare(&spec, &batch, active, Phase::Train)?;
        let lr = lr_at(step, &schedule)?;

        let non_finite = |what| Error::NonFinite {
            what,
            step,
            last_checkpoint: last_checkpoint.clone(),
        };
        let (loss, nll) = {
            let mut g = Graph::<f32>::new();
            let vars = params.bind(&mut g);
            let obj = objective(&mut g, &params, &vars, &prep)?;
            let loss = g.scalar(obj.loss).f64();
            let nll = g.scalar(obj.nll_sum).f64();
            if !loss.is_finite() {
                return Err(non_finite("loss"));
            }
            g.backward(obj.loss)?;
            params.zero_grad();
            params.collect_grads(&g, &vars);
            (loss, nll)
        };
        clip_grad_norm(params.tensors_mut(), cfg.grad_clip);
        adamw_step(params.tensors_mut(), &mut opt, lr).map_err(|_| non_finite("gradient"))?;
        params.zero_grad();

        counters.bytes_seen += prep.bytes_read as u64;
        counters.samples_seen += prep.input.batch as u64;
        counters.tokens_seen += prep.input.rows() as u64;
        let per_byte_denom = match prep.head {
            Head::Byte => prep.predicted(),
            Head::Subword => batch.total_bytes(),
        }
        .max(1);
        let nats = nll / per_byte_denom as f64;
        records.push(metrics.write(MetricRecord {
            step,
            split: MetricSplit::Train,
            loss,
            nats_per_byte: nats,
            bits_per_byte: nats / std::f64::consts::LN_2,
            lr,
            bytes_seen: counters.bytes_seen,
            samples_seen: counters.samples_seen,
            tokens_seen: counters.tokens_seen,
            wall_ms: None,
        })?);

        let at_switch = step == cfg.switch_step;
        if step % cfg.eval_interval == 0 || at_switch || step == cfg.steps {
            let ev = evaluate_bpb(
                &params,
                &data.val,
                &spec,
                active,
                cfg.seq_len,
                cfg.batch_size,
                cfg.eval_max_windows,
            )?;
            if !ev.nll_sum.is_finite() {
                return Err(non_finite("validation loss"));
            }
            log::info!(
                "{} step {step}: val {:.4} bpb, train {:.4} bpb",
                cfg.intervention,
                ev.bits_per_byte(),
                nats / std::f64::consts::LN_2
            );
            records.push(metrics.write(MetricRecord {
                step,
                split: MetricSplit::Val,
                loss: ev.nats_per_byte(),
                nats_per_byte: ev.nats_per_byte(),
                bits_per_byte: ev.bits_per_byte(),
                lr,
                bytes_seen: counters.bytes_seen,
                samples_seen: counters.samples_seen,
                tokens_seen: counters.tokens_seen,
                wall_ms: None,
            })?);
        }
        let periodic = cfg.ckpt_interval > 0 && step % cfg.ckpt_interval == 0;
        if periodic || at_switch || step == cfg.steps {
            last_checkpoint = Some(save_checkpoint(cfg, &params, &opt, step, counters)?);
        }
        last_step = step;
    }
    Ok(TrainSummary {
        last_step,
        records,
        last_checkpoint,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn long_schedule() -> Schedule {
        Schedule {
            peak: 3e-4,
            warmup: 2000,
            total: 100_000,
            decay: 10_000,
        }
    }

    #[test]
    fn schedule_anchors() {
        let s = long_schedule();
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert_eq!(lr_at(2000, &s).unwrap(), 3e-4);
        assert!((lr_at(95_000, &s).unwrap() - 1.5e-4).abs() < 1e-15);
        assert_eq!(lr_at(100_000, &s).unwrap(), 0.0);
        assert!(lr_at(100_001, &s).is_err());
        let bad = Schedule { warmup: 95_000, ..s };
        assert!(lr_at(1, &bad).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_joints() {
        let s = long_schedule();
        // evaluate the three pieces at the joints from both sides
        let warm = |x: f64| s.peak * x / s.warmup as f64;
        let cosine = |x: f64| {
            let p = (x - (s.total - s.decay) as f64) / s.decay as f64;
            s.peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        };
        assert!((warm(2000.0) - lr_at(2000, &s).unwrap()).abs() < 1e-12 * s.peak);
        assert!((cosine(90_000.0) - lr_at(90_000, &s).unwrap()).abs() < 1e-12 * s.peak);
    }

    fn one(p: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut t = Tensor::new(vec![1], vec![p]).unwrap().with_requires_grad(true);
        t.accumulate_grad(&[g]);
        let hyper = AdamW {
            weight_decay: wd,
            ..AdamW::default()
        };
        let mut st = OptimizerState::new(std::slice::from_ref(&t), hyper);
        adamw_step(std::slice::from_mut(&mut t), &mut st, lr).unwrap();
        t.data()[0]
    }

    #[test]
    fn adamw_hand_values() {
        // m_hat = v_hat = 1 after one step
        assert!((one(1.0, 1.0, 0.1, 0.0) - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(one(1.0, 0.0, 0.1, 0.0), 1.0);
        assert!((one(1.0, 0.0, 0.1, 0.1) - 0.99).abs() < 1e-15);
        assert_eq!(one(0.37, 5.0, 0.0, 0.0).to_bits(), 0.37f64.to_bits());
    }

    #[test]
    fn adamw_rejects_non_finite_and_skips_missing_grads() {
        let mut ts = vec![
            Tensor::new(vec![1], vec![1.0f32]).unwrap(),
            Tensor::new(vec![1], vec![2.0f32]).unwrap(),
        ];
        let mut st = OptimizerState::new(&ts, AdamW::default());
        ts[0].accumulate_grad(&[1.0]);
        adamw_step(&mut ts, &mut st, 0.1).unwrap();
        assert_eq!(ts[1].data()[0], 2.0);
        assert_eq!(st.steps, [1, 0]);
        ts[0].zero_grad();
        ts[0].accumulate_grad(&[f32::NAN]);
        let before = ts[0].data()[0];
        assert!(adamw_step(&mut ts, &mut st, 0.1).is_err());
        assert_eq!(ts[0].data()[0], before);
    }

    #[test]
    fn clipping() {
        let mut ts = vec![Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap()];
        ts[0].accumulate_grad(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut ts, 1.0), 5.0);
        let g = ts[0].grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn bpb_conversion() {
        let r = EvalResult {
            nll_sum: std::f64::consts::LN_2 * 10.0,
            bytes: 10,
        };
        assert!((r.bits_per_byte() - 1.0).abs() < 1e-15);
        let r = EvalResult { nll_sum: 0.6931, bytes: 1 };
        assert!((r.bits_per_byte() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn metric_schema_omits_wall_clock() {
        let rec = MetricRecord {
            step: 1,
            split: MetricSplit::Val,
            loss: 1.0,
            nats_per_byte: 1.0,
            bits_per_byte: 1.0 / std::f64::consts::LN_2,
            lr: 0.0,
            bytes_seen: 1,
            samples_seen: 1,
            tokens_seen: 1,
            wall_ms: None,
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"split\":\"val\"") && !line.contains("wall_ms"));
        assert_eq!(serde_json::from_str::<MetricRecord>(&line).unwrap(), rec);
    }
}
