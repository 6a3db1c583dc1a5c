use std::fs;
use std::io::Write;
use std::path::Path;

use avtransformer::attention::{AttentionFunction, Mode, SequenceMask, NORMALIZED_SIGMOID_EPS};
use avtransformer::checkpoint::save_checkpoint;
use avtransformer::data::{
    generate_synthetic, load_dataset, write_atomic, write_dataset, write_spans, Clip, Dataset, Split, SyntheticSpec,
};
use avtransformer::evaluation::{
    calibrate_threshold, default_grid, evaluate, label_matrix, multi_run_mean, EvalReport,
};
use avtransformer::gradcheck::{gradient_check_with, DEFAULT_STEP};
use avtransformer::model::{init_params, AvTransformer, ModelConfig, StreamInput};
use avtransformer::tensor::Tensor;
use avtransformer::training::{ensemble_predict, fit_with};
use avtransformer::RandomSource;

use crate::args::{AttentionArgs, EvalArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};
use crate::run::{checkpoint_name, RunConfig, RunDir, CHECKPOINT_STEM, CONFIG_FILE, LOG_FILE, THRESHOLD_FILE};
use crate::{merge_settings, CliResult, Failure, EXIT_CHECK_FAILED};

// Report lines go to stdout; a closed pipe there is not worth failing a run over.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let settings = merge_settings(a.config.as_deref(), a.pairs())?;
    let mut spec = SyntheticSpec::default();
    spec.apply_pairs(&settings)?;
    let data = generate_synthetic(&spec)?;
    let manifest = write_dataset(&a.out, &data.dataset)?;
    write_spans(&a.out.join("spans.jsonl"), &data.spans)?;
    let echo: String = spec.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_atomic(&a.out.join("synth.txt"), echo.as_bytes())?;
    let ds = &data.dataset;
    say!(
        out,
        "manifest={} train={} val={} test={}",
        manifest.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(())
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let settings = merge_settings(a.config.as_deref(), a.pairs())?;
    let mut rc = RunConfig::from_settings(&settings)?;
    let ds = load_dataset(&rc.data)?;
    rc.data = fs::canonicalize(&rc.data).unwrap_or(rc.data);
    for (key, given, actual) in [
        ("classes", rc.model.n_classes, ds.n_classes()),
        ("audio-dim", rc.model.audio_dim, ds.audio_dim),
        ("video-dim", rc.model.video_dim, ds.video_dim),
    ] {
        if settings.contains_key(key) && given != actual {
            return Err(Failure::input(format!("{key}={given} but the dataset has {actual}")));
        }
    }
    rc.model.n_classes = ds.n_classes();
    rc.model.audio_dim = ds.audio_dim;
    rc.model.video_dim = ds.video_dim;
    rc.model.validate()?;

    let mut seeds = Vec::new();
    let mut scores = Vec::new();
    for i in 0..rc.runs {
        let seed = rc.train.seed + i as u64;
        let dir = if rc.runs == 1 {
            rc.out.clone()
        } else {
            rc.out.join(format!("run-{i:03}"))
        };
        if let Some(report) = train_one(&ds, &rc, seed, &dir, out)? {
            seeds.push(seed);
            scores.push(report.micro_f1);
        }
    }
    if rc.runs > 1 && !scores.is_empty() {
        let (mean, std) = multi_run_mean(&scores)?;
        let report = serde_json::json!({
            "runs": scores.len(),
            "seeds": seeds,
            "micro_f1": scores,
            "mean": mean,
            "std": std,
        });
        write_atomic(&rc.out.join("aggregate.json"), format!("{report}\n").as_bytes())?;
        say!(out, "runs={} mean_micro_f1={mean} std={std}", scores.len());
    }
    Ok(())
}

fn train_one(
    ds: &Dataset,
    rc: &RunConfig,
    seed: u64,
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult<Option<EvalReport>> {
    fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    remove_stale_checkpoints(dir)?;
    write_atomic(&dir.join(CONFIG_FILE), rc.echo(seed).as_bytes())?;
    let train = avtransformer::training::TrainConfig {
        seed,
        ..rc.train.clone()
    };
    let keep = train.ensemble_size;
    let mut log = String::new();
    let fitted = fit_with(ds, &rc.model, &train, |rec, params| {
        log.push_str(&format!("{rec}\n"));
        write_atomic(&dir.join(LOG_FILE), log.as_bytes())?;
        save_checkpoint(&dir.join(checkpoint_name(rec.epoch)), &rc.model, params)?;
        if rec.epoch > keep {
            let _ = fs::remove_file(dir.join(checkpoint_name(rec.epoch - keep)));
        }
        say!(out, "{rec}");
        Ok(())
    })?;
    let snapshots = fitted.snapshot_params();
    let val_probs = ensemble_predict(&snapshots, &rc.model, &ds.val)?;
    let threshold = calibrate_threshold(&val_probs, &label_matrix(&ds.val)?, &default_grid())?;
    write_atomic(&dir.join(THRESHOLD_FILE), format!("{threshold}\n").as_bytes())?;
    if ds.test.is_empty() {
        say!(out, "run={} threshold={threshold}", dir.display());
        return Ok(None);
    }
    let report = evaluate(&snapshots, &rc.model, &ds.test, threshold)?;
    write_atomic(
        &dir.join("eval-test.json"),
        report_json(&report, Split::Test).as_bytes(),
    )?;
    say!(
        out,
        "run={} threshold={threshold} test_micro_f1={}",
        dir.display(),
        report.micro_f1
    );
    Ok(Some(report))
}

fn remove_stale_checkpoints(dir: &Path) -> CliResult<()> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    for entry in entries.flatten() {
        if entry.file_name().to_string_lossy().starts_with(CHECKPOINT_STEM) {
            fs::remove_file(entry.path()).map_err(|e| Failure::input(format!("{}: {e}", entry.path().display())))?;
        }
    }
    Ok(())
}

fn report_json(report: &EvalReport, split: Split) -> String {
    let mut v: serde_json::Value = serde_json::from_str(&report.to_json()).expect("report JSON");
    v["split"] = serde_json::Value::String(split.to_string());
    format!("{v}\n")
}

fn open_split<'a>(ds: &'a Dataset, split: &str) -> CliResult<(Split, &'a [Clip])> {
    let split: Split = split.parse()?;
    let clips = ds.split(split);
    if clips.is_empty() {
        return Err(Failure::input(format!("split {split} is empty")));
    }
    Ok((split, clips))
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let run = RunDir::open(&a.run)?;
    let ds = load_dataset(&run.manifest(a.data.as_deref())?)?;
    let (split, clips) = open_split(&ds, &a.split)?;
    let report = evaluate(&run.params(), &run.config, clips, run.threshold)?;
    let json = report_json(&report, split);
    write_atomic(&run.path.join(format!("eval-{split}.json")), json.as_bytes())?;
    let _ = out.write_all(json.as_bytes());
    Ok(())
}

pub fn predict(a: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let run = RunDir::open(&a.run)?;
    let ds = load_dataset(&run.manifest(a.data.as_deref())?)?;
    let single;
    let clips: &[Clip] = match &a.clip {
        Some(id) => {
            let (_, clip) = ds
                .find(id)
                .ok_or_else(|| Failure::input(format!("unknown clip {id:?}")))?;
            single = [clip.clone()];
            &single
        }
        None => open_split(&ds, &a.split)?.1,
    };
    let probs = ensemble_predict(&run.params(), &run.config, clips)?;
    say!(out, "id,{}", ds.classes.join(","));
    for (i, clip) in clips.iter().enumerate() {
        let cells: Vec<String> = probs
            .row(i)
            .iter()
            .map(|p| {
                if a.binary {
                    u8::from(*p >= run.threshold).to_string()
                } else {
                    format!("{p:.6}")
                }
            })
            .collect();
        say!(out, "{},{}", clip.id, cells.join(","));
    }
    Ok(())
}

/// Rows are queries, columns keys, six decimals.
pub fn heatmap_csv(w: &Tensor) -> String {
    (0..w.rows())
        .map(|r| {
            let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:.6}")).collect();
            row.join(",") + "\n"
        })
        .collect()
}

/// Binary 8-bit PGM scaled so the largest weight is white.
pub fn heatmap_pgm(w: &Tensor) -> Vec<u8> {
    let max = w.data().iter().cloned().fold(0.0, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", w.cols(), w.rows()).into_bytes();
    bytes.extend(w.data().iter().map(|v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    bytes
}

pub fn attention(a: &AttentionArgs, out: &mut dyn Write) -> CliResult<()> {
    let run = RunDir::open(&a.run)?;
    let ds = load_dataset(&run.manifest(a.data.as_deref())?)?;
    let (_, clip) = ds
        .find(&a.clip)
        .ok_or_else(|| Failure::input(format!("unknown clip {:?}", a.clip)))?;
    let (epoch, params) = match a.epoch {
        Some(e) => run
            .snapshots
            .iter()
            .find(|(ep, _)| *ep == e)
            .ok_or_else(|| Failure::input(format!("no snapshot for epoch {e}")))?,
        None => run.snapshots.last().expect("non-empty"),
    };
    let cfg = &run.config;
    let block = a.block.unwrap_or(cfg.n_blocks - 1);
    if block >= cfg.n_blocks {
        return Err(Failure::input(format!(
            "block {block} out of range (0..{})",
            cfg.n_blocks
        )));
    }
    let model = AvTransformer::for_params(cfg, params)?;
    let first = clip.stream(cfg.first_modality).to_tensor();
    let second = clip.stream(cfg.second_modality).to_tensor();
    let trace = model.forward(
        params,
        &first,
        &second,
        &SequenceMask::all_valid(first.rows()),
        &SequenceMask::all_valid(second.rows()),
        &mut Mode::inference(),
    )?;
    let weights = &trace.attention.decoder_cross[block];
    fs::create_dir_all(&a.out).map_err(|e| Failure::input(format!("{}: {e}", a.out.display())))?;
    let mut combined = String::from("head,query");
    for k in 0..weights.keys() {
        combined.push_str(&format!(",key{k}"));
    }
    combined.push('\n');
    for h in 0..weights.heads() {
        let w = weights.head(h);
        write_atomic(&a.out.join(format!("head{h}.csv")), heatmap_csv(&w).as_bytes())?;
        write_atomic(&a.out.join(format!("head{h}.pgm")), &heatmap_pgm(&w))?;
        for (q, line) in heatmap_csv(&w).lines().enumerate() {
            combined.push_str(&format!("{h},{q},{line}\n"));
        }
    }
    write_atomic(&a.out.join("heads.csv"), combined.as_bytes())?;
    say!(
        out,
        "clip={} epoch={epoch} block={block} heads={} queries={} keys={} out={}",
        clip.id,
        weights.heads(),
        weights.queries(),
        weights.keys(),
        a.out.display()
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.d_model > 16 {
        return Err(Failure::input(format!(
            "gradcheck needs d-model <= 16, got {}",
            a.d_model
        )));
    }
    let functions = match &a.attention_fn {
        Some(name) => vec![name.parse::<AttentionFunction>()?],
        None => vec![
            AttentionFunction::Softmax,
            AttentionFunction::Sigmoid,
            AttentionFunction::NormalizedSigmoid {
                epsilon: NORMALIZED_SIGMOID_EPS,
            },
        ],
    };
    let mut failed = Vec::new();
    for func in functions {
        let mut cfg = ModelConfig {
            n_blocks: a.blocks,
            n_heads: a.heads,
            d_model: a.d_model,
            d_ff: a.d_model,
            dropout: 0.0,
            attention: func,
            aggregation: a.aggregation.parse()?,
            n_classes: a.classes,
            audio_dim: a.audio_dim,
            video_dim: a.video_dim,
            ..ModelConfig::default()
        };
        cfg.set_pos_enc(&a.pos_enc)?;
        cfg.validate()?;
        let mut rng = RandomSource::new(a.seed);
        let (model, mut params) = init_params(&cfg, &mut rng)?;
        let mut random =
            |rows: usize, cols: usize| Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.normal()).collect());
        let mask = SequenceMask::all_valid(a.frames);
        let first = StreamInput::single(random(a.frames, cfg.input_dim(cfg.first_modality))?, &mask)?;
        let second = StreamInput::single(random(a.frames, cfg.input_dim(cfg.second_modality))?, &mask)?;
        let labels = Tensor::new(&[1, a.classes], (0..a.classes).map(|c| (c % 2) as f64).collect())?;
        let corrupt = a.corrupt_gradient;
        let report = gradient_check_with(
            &mut params,
            DEFAULT_STEP,
            |g, ps| {
                let nodes = model.forward_graph(g, ps, &first, &second, &mut Mode::inference())?;
                g.bce(nodes.clip_probs, labels.clone())
            },
            |ps| {
                if corrupt {
                    let p = ps.iter_mut().next().expect("parameters");
                    let g = &mut p.grad.data_mut()[0];
                    *g = *g * 1.5 + 0.1;
                }
            },
        )?;
        let ok = report.max_relative_error < a.tolerance;
        say!(
            out,
            "attention={func} max_relative_error={:e} worst={}[{}] checked={} {}",
            report.max_relative_error,
            report.worst_param,
            report.worst_index,
            report.checked,
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            failed.push(func.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK_FAILED,
            message: format!("gradient check failed for {}", failed.join(", ")),
        })
    }
}
