//! The five CLI commands as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use stf_core::data::{align_frames, generate_synthetic, Crop, SkeletonSequence, SynthConfig};
use stf_core::gradcheck::{
    check_kernels, grad_check_block, grad_check_model, GradCheckReport, ModelCheckOptions,
};
use stf_core::metrics::{top_k_accuracy, EvalReport};
use stf_core::network::{count_params, Model, ModelConfig};
use stf_core::params::{Mode, Session};
use stf_core::streams::{fuse_scores, Stream};
use stf_core::topology::Layout;
use stf_core::train::{predict, Example, Trainer};
use stf_core::{Kernel, Tensor};

use crate::binary::{load_sequence, save_sequence, save_tensor};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::csvio::{read_matrix, write_matrix, write_scores, MetricLog};
use crate::error::{CliError, Result};
use crate::text::{format_layout, format_manifest, parse_manifest, Manifest, ManifestEntry};

/// Scalar type used for training and evaluation.
pub type Precision = f32;

pub const GRADCHECK_TOL: f64 = 1e-4;

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_manifest(path, &text)
}

/// A manifest's sequences, validated against the layout and model input.
pub struct Dataset {
    pub manifest: Manifest,
    pub sequences: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn load(path: &Path, layout: &Layout, in_channels: usize) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let mut sequences = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let seq = load_sequence(&e.path, Some(layout.num_joints()))?;
            if seq.label != e.label {
                return Err(CliError::format(
                    &e.path,
                    format!(
                        "file label {} disagrees with manifest label {}",
                        seq.label, e.label
                    ),
                ));
            }
            if seq.channels() != in_channels {
                return Err(CliError::format(
                    &e.path,
                    format!("{} channels, model expects {in_channels}", seq.channels()),
                ));
            }
            sequences.push(seq);
        }
        Ok(Self {
            manifest,
            sequences,
        })
    }

    fn indices(&self, split: &str) -> Vec<usize> {
        (0..self.sequences.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .collect()
    }

    pub fn examples(
        &self,
        split: &str,
        stream: Stream,
        layout: &Layout,
    ) -> Result<Vec<Example<Precision>>> {
        self.indices(split)
            .into_iter()
            .map(|i| {
                let s = &self.sequences[i];
                Ok(Example {
                    x: stream.apply(&s.coords, &layout.bones)?,
                    label: s.label,
                })
            })
            .collect()
    }

    pub fn sample_ids(&self, split: &str) -> Vec<String> {
        self.indices(split)
            .into_iter()
            .map(|i| {
                let p = &self.manifest.samples[i].path;
                p.file_stem().map_or_else(
                    || p.display().to_string(),
                    |s| s.to_string_lossy().into_owned(),
                )
            })
            .collect()
    }
}

pub struct SynthOptions {
    pub out: PathBuf,
    pub config: SynthConfig,
}

/// Writes `SKEL` files, `manifest.txt` and `layout.txt` under `out`.
pub fn synth(opts: &SynthOptions, layout: &Layout) -> Result<Manifest> {
    let samples = generate_synthetic(&opts.config, layout)?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut counters = [0usize; 2];
    for s in &samples {
        let k = usize::from(s.split.name() == "eval");
        let path =
            opts.out
                .join("sequences")
                .join(format!("{}_{:05}.skel", s.split.name(), counters[k]));
        counters[k] += 1;
        save_sequence(&path, &s.sequence)?;
        entries.push(ManifestEntry {
            path,
            label: s.sequence.label,
            split: s.split.name().to_string(),
        });
    }
    let manifest = Manifest {
        layout: layout.name.clone(),
        classes: (0..opts.config.num_classes)
            .map(|k| format!("class{k}"))
            .collect(),
        samples: entries,
    };
    crate::binary::write_file(
        &opts.out.join("manifest.txt"),
        format_manifest(&manifest, &opts.out).as_bytes(),
    )?;
    crate::binary::write_file(
        &opts.out.join("layout.txt"),
        format_layout(layout).as_bytes(),
    )?;
    Ok(manifest)
}

pub struct StreamRun {
    pub stream: Stream,
    pub final_train_top1: f64,
    pub best_eval_top1: Option<f64>,
    pub params: usize,
    pub seconds: f64,
}

/// Trains one model per configured stream. Each stream gets
/// `<out>/<stream>/{metrics.csv,final.ckpt,best.ckpt}`; `best` is chosen by
/// eval top-1 when an eval split exists, else by training loss.
pub fn train(
    config: &RunConfig,
    layout: &Layout,
    data: &Dataset,
    out: &Path,
    verbose: bool,
) -> Result<Vec<StreamRun>> {
    config.validate()?;
    check_classes(&config.model, &data.manifest)?;
    let mut runs = Vec::new();
    for &stream in &config.streams {
        let train_set = data.examples("train", stream, layout)?;
        if train_set.is_empty() {
            return Err(CliError::Core(stf_core::Error::Data(
                "manifest has no 'train' samples".into(),
            )));
        }
        let eval_set = data.examples("eval", stream, layout)?;
        let dir = out.join(stream.name());
        let started = Instant::now();
        let (model, params) = Model::build::<Precision>(&config.model, layout, config.train.seed)?;
        let n_params = count_params(&params);
        let mut trainer = Trainer::new(model, params, config.train.clone())?;
        let mut log = MetricLog::create(&dir.join("metrics.csv"))?;
        let (mut best, mut last) = (None::<(f64, f64)>, 0.0);
        for epoch in 0..config.train.epochs {
            let e = trainer.train_epoch(epoch, &train_set)?;
            let eval_top1 = if eval_set.is_empty() {
                None
            } else {
                let labels: Vec<usize> = eval_set.iter().map(|x| x.label).collect();
                Some(top_k_accuracy(&trainer.predict(&eval_set)?, &labels, 1)?)
            };
            log.append(&e, eval_top1)?;
            // higher is better for both keys
            let key = eval_top1.map_or(-e.loss, |a| a);
            if best.is_none_or(|(k, _)| key > k) {
                best = Some((key, eval_top1.unwrap_or(f64::NAN)));
                checkpoint::save(
                    &dir.join("best.ckpt"),
                    stream,
                    config,
                    layout,
                    &trainer.params,
                )?;
            }
            last = e.train_top1;
            if verbose {
                eprintln!(
                    "[{stream}] epoch {epoch} lr {:.4} loss {:.4} train {:.3}{} ({:.1}s)",
                    e.lr,
                    e.loss,
                    e.train_top1,
                    eval_top1.map_or(String::new(), |a| format!(" eval {a:.3}")),
                    started.elapsed().as_secs_f64()
                );
            }
        }
        checkpoint::save(
            &dir.join("final.ckpt"),
            stream,
            config,
            layout,
            &trainer.params,
        )?;
        runs.push(StreamRun {
            stream,
            final_train_top1: last,
            best_eval_top1: best.map(|(_, a)| a).filter(|a| !a.is_nan()),
            params: n_params,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(runs)
}

fn check_classes(model: &ModelConfig, manifest: &Manifest) -> Result<()> {
    if model.num_classes != manifest.classes.len() {
        return Err(CliError::Core(stf_core::Error::Contract(format!(
            "model has {} classes, manifest lists {}",
            model.num_classes,
            manifest.classes.len()
        ))));
    }
    Ok(())
}

pub struct EvalOptions {
    pub run_dir: PathBuf,
    /// `final` or `best`.
    pub which: String,
    pub split: String,
    pub streams: Vec<Stream>,
    pub weights: Vec<f64>,
    /// Reuse existing score files instead of running the models.
    pub from_scores: bool,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub per_stream_top1: Vec<(Stream, f64)>,
    pub params: usize,
    pub seconds: f64,
}

/// Scores every stream's checkpoint on a split, caches the scores as CSV,
/// then fuses the cached files.
pub fn eval(opts: &EvalOptions, manifest_path: &Path) -> Result<EvalOutcome> {
    if opts.weights.len() != opts.streams.len() {
        return Err(CliError::Usage(format!(
            "{} fusion weights for {} streams",
            opts.weights.len(),
            opts.streams.len()
        )));
    }
    let started = Instant::now();
    let mut score_files = Vec::new();
    let mut params = 0;
    let mut labels: Option<Vec<usize>> = None;
    for &stream in &opts.streams {
        let score_path = opts
            .run_dir
            .join(format!("scores_{}_{}.csv", stream.name(), opts.split));
        if !opts.from_scores {
            let ckpt_path = opts
                .run_dir
                .join(stream.name())
                .join(format!("{}.ckpt", opts.which));
            let mut ck = checkpoint::load::<Precision>(&ckpt_path)?;
            if ck.stream != stream {
                return Err(CliError::Core(stf_core::Error::Contract(format!(
                    "{} holds a {} model, requested stream {stream}",
                    ckpt_path.display(),
                    ck.stream
                ))));
            }
            let data = Dataset::load(manifest_path, &ck.layout, ck.config.model.in_channels)?;
            check_classes(&ck.config.model, &data.manifest)?;
            let examples = data.examples(&opts.split, stream, &ck.layout)?;
            if examples.is_empty() {
                return Err(CliError::Core(stf_core::Error::Data(format!(
                    "no '{}' samples in the manifest",
                    opts.split
                ))));
            }
            let scores = predict(
                &ck.model,
                &mut ck.params,
                &examples,
                ck.config.train.frames,
                ck.config.train.batch_size,
            )?;
            write_scores(&score_path, &data.sample_ids(&opts.split), &scores.cast())?;
            params += count_params(&ck.params);
            labels = Some(examples.iter().map(|e| e.label).collect());
        }
        score_files.push(score_path);
    }
    let labels = match labels {
        Some(l) => l,
        None => {
            let m = load_manifest(manifest_path)?;
            m.split(&opts.split).map(|e| e.label).collect()
        }
    };
    let mut per_stream = Vec::new();
    let mut ids: Option<Vec<String>> = None;
    for (path, &stream) in score_files.iter().zip(&opts.streams) {
        let (rows, scores) = read_matrix(path)?;
        if rows.len() != labels.len() {
            return Err(CliError::format(
                path,
                format!("{} score rows for {} samples", rows.len(), labels.len()),
            ));
        }
        if ids.as_ref().is_some_and(|ids| *ids != rows) {
            return Err(CliError::format(
                path,
                "score rows list different samples than the first stream",
            ));
        }
        ids = Some(rows);
        per_stream.push((stream, scores));
    }
    let tensors: Vec<Tensor<f64>> = per_stream.iter().map(|(_, s)| s.clone()).collect();
    let fused = fuse_scores(&tensors, &opts.weights)?;
    let report = EvalReport::from_scores(&fused, &labels)?;
    let per_stream_top1 = per_stream
        .iter()
        .map(|(s, t)| Ok((*s, top_k_accuracy(t, &labels, 1)?)))
        .collect::<stf_core::Result<Vec<_>>>()?;
    write_report(
        &opts.run_dir,
        &opts.split,
        &report,
        &per_stream_top1,
        params,
    )?;
    Ok(EvalOutcome {
        report,
        per_stream_top1,
        params,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn write_report(
    dir: &Path,
    split: &str,
    r: &EvalReport,
    streams: &[(Stream, f64)],
    params: usize,
) -> Result<()> {
    let k = r.confusion.len();
    let mut text = format!(
        "split = {split}\ntop1 = {}\ntop5 = {}\nparams = {params}\n",
        r.top1, r.top5
    );
    for (s, a) in streams {
        text.push_str(&format!("top1_{s} = {a}\n"));
    }
    crate::binary::write_file(&dir.join(format!("report_{split}.txt")), text.as_bytes())?;
    let classes: Vec<String> = (0..k).map(|c| format!("class{c}")).collect();
    let per_class = Tensor::from_vec(
        &[k, 1],
        r.per_class.iter().map(|a| a.unwrap_or(f64::NAN)).collect(),
    )?;
    write_matrix(
        &dir.join(format!("per_class_{split}.csv")),
        &["class".into(), "accuracy".into()],
        &classes,
        &per_class,
    )?;
    let conf = Tensor::from_vec(
        &[k, k],
        r.confusion.iter().flatten().map(|&c| c as f64).collect(),
    )?;
    let mut cols = vec!["true\\pred".to_string()];
    cols.extend(classes.iter().cloned());
    write_matrix(
        &dir.join(format!("confusion_{split}.csv")),
        &cols,
        &classes,
        &conf,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scope {
    Layer,
    Block,
    Model,
}

pub struct GradcheckLine {
    pub name: String,
    pub report: GradCheckReport,
}

/// Runs the checks of `scope` in double precision on the micro config.
pub fn gradcheck(
    scope: Scope,
    seed: u64,
    eps: f64,
    fault: Option<Kernel>,
) -> Result<Vec<GradcheckLine>> {
    let opts = ModelCheckOptions {
        eps,
        seed,
        fault,
        ..Default::default()
    };
    let (config, layout) = (ModelConfig::micro(), Layout::micro5());
    let lines = match scope {
        Scope::Layer => check_kernels(seed, eps, fault)?
            .into_iter()
            .map(|c| GradcheckLine {
                name: c.kernel.name().to_string(),
                report: c.report,
            })
            .collect(),
        Scope::Block => grad_check_block(&config, &layout, &opts)?
            .into_iter()
            .map(|c| GradcheckLine {
                name: c.name,
                report: c.report,
            })
            .collect(),
        Scope::Model => grad_check_model(&config, &layout, &opts)?
            .into_iter()
            .map(|c| GradcheckLine {
                name: c.name,
                report: c.report,
            })
            .collect(),
    };
    Ok(lines)
}

pub struct AttentionExport {
    /// `(block, grain, V×V̂ matrix)`.
    pub attention: Vec<(usize, usize, Tensor<f64>)>,
    /// Final-block features averaged over channels and batch, `T'×V`.
    pub heatmap: Tensor<f64>,
}

/// Eval-mode forward of `sequences` through a checkpoint, collecting
/// batch-averaged attention for the selected blocks (all MCF blocks when
/// empty) and the final-block temporal heatmap.
pub fn export_attention(
    ckpt_path: &Path,
    sequences: &[SkeletonSequence],
    blocks: &[usize],
) -> Result<AttentionExport> {
    let mut ck = checkpoint::load::<f64>(ckpt_path)?;
    if ck.config.model.mcf_layers.is_empty() {
        return Err(CliError::Core(stf_core::Error::Unsupported(
            "checkpoint model has no MCF blocks".into(),
        )));
    }
    if let Some(b) = blocks
        .iter()
        .find(|b| !ck.config.model.mcf_layers.contains(b))
    {
        return Err(CliError::Usage(format!(
            "block {b} carries no MCF (MCF blocks: {:?})",
            ck.config.model.mcf_layers
        )));
    }
    if sequences.is_empty() {
        return Err(CliError::Usage("at least one sequence is required".into()));
    }
    let frames = ck.config.train.frames;
    let (v, c) = (ck.layout.num_joints(), ck.config.model.in_channels);
    let mut data = Vec::new();
    for s in sequences {
        if s.joints() != v || s.channels() != c {
            return Err(CliError::Core(stf_core::Error::Data(format!(
                "sequence is {:?}, checkpoint expects [{c}, T, {v}]",
                s.coords.shape()
            ))));
        }
        let x = ck.stream.apply(&s.coords.cast::<f64>(), &ck.layout.bones)?;
        data.extend_from_slice(align_frames(&x, frames, Crop::Center)?.data());
    }
    let n = sequences.len();
    let x = Tensor::from_vec(&[n, c, frames, v], data)?;
    let mut s = Session::new(&mut ck.params, Mode::Eval);
    let xi = s.input(x);
    let out = ck.model.forward(&mut s, xi)?;
    let mut attention = Vec::new();
    for (block, grains) in &out.attention {
        if !blocks.is_empty() && !blocks.contains(block) {
            continue;
        }
        for (g, &node) in grains.iter().enumerate() {
            attention.push((*block, g, batch_mean(s.tape.value(node))?));
        }
    }
    // [N, C, T', V] → mean over N and C
    let f = s.tape.value(out.features);
    let (nc, t, w) = (f.shape()[0] * f.shape()[1], f.shape()[2], f.shape()[3]);
    let mut heat = vec![0.0; t * w];
    for plane in f.data().chunks(t * w) {
        heat.iter_mut()
            .zip(plane)
            .for_each(|(h, &p)| *h += p / nc as f64);
    }
    Ok(AttentionExport {
        attention,
        heatmap: Tensor::from_vec(&[t, w], heat)?,
    })
}

fn batch_mean(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, rows, cols) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = vec![0.0; rows * cols];
    for m in a.data().chunks(rows * cols) {
        out.iter_mut().zip(m).for_each(|(o, &x)| *o += x / n as f64);
    }
    Ok(Tensor::from_vec(&[rows, cols], out)?)
}

/// Writes each matrix as `<stem>.tnsr` and `<stem>.csv` under `dir`.
pub fn write_export(dir: &Path, export: &AttentionExport) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |stem: String, m: &Tensor<f64>, row: &str, col: &str| -> Result<()> {
        let tnsr = dir.join(format!("{stem}.tnsr"));
        save_tensor(&tnsr, m)?;
        let (r, c) = (m.shape()[0], m.shape()[1]);
        let mut cols = vec![format!("{row}\\{col}")];
        cols.extend((0..c).map(|j| format!("{col}{j}")));
        let rows: Vec<String> = (0..r).map(|i| format!("{row}{i}")).collect();
        let csv = dir.join(format!("{stem}.csv"));
        write_matrix(&csv, &cols, &rows, m)?;
        written.extend([tnsr, csv]);
        Ok(())
    };
    for (block, grain, m) in &export.attention {
        emit(
            format!("attention_block{block}_grain{grain}"),
            m,
            "joint",
            "part",
        )?;
    }
    emit("heatmap".into(), &export.heatmap, "frame", "joint")?;
    Ok(written)
}
