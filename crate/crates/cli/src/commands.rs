use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use coma_core::checkpoint;
use coma_core::config::{FusionMode, PRESETS};
use coma_core::data::{load_dataset, synth_dataset, synth_image, write_dataset};
use coma_core::gradcheck::{run_end_to_end, run_kernel_suites, TOLERANCE};
use coma_core::masking::{mask_image, sample_mask_pair, sample_random_mask, visible_count, CoverageStats, PatchGrid};
use coma_core::model::param_specs;
use coma_core::params::Part;
use coma_core::rng::{stream_rng, Stream};
use coma_core::trainer::{select_batch, StepMetrics, TrainState};
use coma_core::{DType, ModelConfig, RunConfig, Scalar, Tensor};

use crate::{
    BenchArgs, Failure, Fusion, GradcheckArgs, MaskStatsArgs, ParamsArgs, Precision, PretrainArgs, ReconstructArgs,
    RunArgs, SynthArgs,
};

type Outcome = Result<(), Failure>;

/// Preset, then config file, then individual flags.
fn run_config(a: &RunArgs) -> Result<RunConfig, Failure> {
    let cfg = match (&a.config, &a.preset) {
        (Some(_), Some(_)) => {
            return Err(Failure::Usage("--preset and --config are exclusive; set `preset` inside the file".into()))
        }
        (Some(path), None) => RunConfig::parse(&fs::read_to_string(path)?)?,
        (None, Some(name)) => RunConfig::new(ModelConfig::preset(name)?),
        (None, None) => RunConfig::new(ModelConfig::dyvit_nano()),
    };
    apply_flags(cfg, a)
}

fn apply_flags(mut cfg: RunConfig, a: &RunArgs) -> Result<RunConfig, Failure> {
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.ratio {
        cfg.model.mask_ratio = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.lr = v;
    }
    if let Some(f) = a.fusion {
        cfg.model.fusion = match f {
            Fusion::Cascade => FusionMode::Cascade,
            Fusion::Parallel => FusionMode::Parallel,
        };
    }
    if a.include_unit_window {
        cfg.model.windows.include_unit = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn images_for<T: Scalar>(data: Option<&Path>, cfg: &RunConfig, default_count: usize) -> Result<Vec<Tensor<T>>, Failure> {
    let images = match data {
        Some(dir) => load_dataset(dir)?,
        None => synth_dataset(cfg.train.seed, default_count, cfg.model.image_size),
    };
    let s = cfg.model.image_size;
    if images[0].shape() != [3, s, s] {
        return Err(Failure::Usage(format!(
            "dataset images are {:?}, the model expects [3, {s}, {s}]",
            images[0].shape()
        )));
    }
    Ok(images.iter().map(|t| t.cast()).collect())
}

const DEFAULT_CORPUS: usize = 64;

pub fn pretrain(a: &PretrainArgs) -> Outcome {
    match a.run.dtype {
        Precision::F32 => pretrain_typed::<f32>(a),
        Precision::F64 => pretrain_typed::<f64>(a),
    }
}

fn pretrain_typed<T: Scalar>(a: &PretrainArgs) -> Outcome {
    let mut state = match &a.resume {
        Some(path) => {
            let r = &a.run;
            let stored = checkpoint::peek_dtype(path)?;
            if stored != T::DTYPE {
                return Err(Failure::Usage(format!(
                    "checkpoint holds {} tensors; pass --dtype {}",
                    stored.name(),
                    stored.name()
                )));
            }
            let mut st = checkpoint::load::<T>(path)?;
            let saved = st.config();
            let mut requested = if r.preset.is_some() || r.config.is_some() {
                run_config(r)?
            } else {
                apply_flags(saved.clone(), r)?
            };
            requested.train.steps = saved.train.steps;
            requested.train.checkpoint_every = saved.train.checkpoint_every;
            if &requested != saved {
                return Err(Failure::Usage(
                    "when resuming only --steps and --checkpoint-every may differ from the checkpoint".into(),
                ));
            }
            let steps = r.steps.unwrap_or(st.config().train.steps);
            let every = a.checkpoint_every.unwrap_or(st.config().train.checkpoint_every);
            st.set_schedule(steps, every);
            st
        }
        None => {
            let mut cfg = run_config(&a.run)?;
            if let Some(v) = a.checkpoint_every {
                cfg.train.checkpoint_every = v;
            }
            TrainState::<T>::new(cfg)?
        }
    };
    let cfg = state.config().clone();
    let images = images_for::<T>(a.data.as_deref(), &cfg, DEFAULT_CORPUS)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let metrics_path = a.out.join("metrics.csv");
    let fresh = a.resume.is_none() || !metrics_path.exists();
    let mut metrics = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&metrics_path)?;
    if fresh {
        writeln!(metrics, "{}", StepMetrics::CSV_HEADER)?;
    }
    let ckpt = a.out.join("checkpoint.cma");
    let total = cfg.train.steps;
    let report_every = (total / 20).max(1);
    println!(
        "pretrain: {} images, {} steps from step {}, batch {}, dtype {}",
        images.len(),
        total,
        state.step(),
        cfg.train.batch_size,
        T::DTYPE.name()
    );
    while state.step() < total {
        let t = state.step() + 1;
        let batch: Vec<Tensor<T>> = select_batch(cfg.train.seed, t, images.len(), cfg.train.batch_size)
            .into_iter()
            .map(|i| images[i].clone())
            .collect();
        let m = state.train_step(&batch)?;
        writeln!(metrics, "{}", m.csv_row())?;
        metrics.flush()?;
        if t % report_every == 0 || t == total || t == 1 {
            println!(
                "step {t:>6}  loss {:.6}  (adaptive {:.6}, evaluation {:.6})  {:.3}s",
                m.loss, m.loss_adaptive, m.loss_evaluation, m.seconds
            );
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && t % every == 0 {
            checkpoint::save(&state, &ckpt)?;
        }
    }
    checkpoint::save(&state, &ckpt)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn mask_stats(a: &MaskStatsArgs) -> Outcome {
    let v = visible_count(a.n, a.ratio)?;
    if a.iters == 0 {
        return Err(Failure::Usage("--iters must be positive".into()));
    }
    let mut complementary = CoverageStats::new(a.n);
    let mut random = CoverageStats::new(a.n);
    for t in 0..a.iters {
        let mut rng = stream_rng(a.seed, Stream::Mask, t);
        complementary.accumulate(&sample_mask_pair(a.n, a.ratio, &mut rng)?)?;
        random.accumulate_single(&sample_random_mask(a.n, a.ratio, &mut rng)?)?;
    }
    let c = complementary.report();
    let r = random.report();
    let q = (a.n - v) as f64 / a.n as f64;
    let expected = (a.iters as f64 * q * (1.0 - q)).sqrt();
    let union_min = complementary.union_counts.iter().min().copied().unwrap_or(0);
    let union_max = complementary.union_counts.iter().max().copied().unwrap_or(0);
    println!("patches {}  visible {}  iterations {}", a.n, v, a.iters);
    println!("complementary  union count min {union_min} max {union_max}");
    println!("complementary  adaptive count mean {:.3} std {:.3}", c.adaptive.mean, c.adaptive.std);
    println!("random         count mean {:.3} std {:.3} (binomial {:.3})", r.adaptive.mean, r.adaptive.std, expected);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("complementary.csv"), &c.csv)?;
        fs::write(dir.join("complementary_adaptive.pgm"), &c.adaptive_pgm)?;
        fs::write(dir.join("complementary_union.pgm"), &c.union_pgm)?;
        fs::write(dir.join("random.csv"), &r.csv)?;
        fs::write(dir.join("random_union.pgm"), &r.union_pgm)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Outcome {
    if a.cases == 0 || a.samples == 0 {
        return Err(Failure::Usage("--cases and --samples must be positive".into()));
    }
    let model = ModelConfig::preset(&a.preset)?;
    let mut reports = run_kernel_suites(a.cases, a.seed)?;
    reports.push(run_end_to_end(&model, a.samples, a.seed)?);
    let mut worst = 0.0_f64;
    for r in &reports {
        println!(
            "{:<14} {:>5} cases {:>7} entries  max rel err {:.3e}  {}",
            r.name,
            r.cases,
            r.entries,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_err);
    }
    println!("max rel err {worst:.3e} (tolerance {TOLERANCE:e})");
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed: max rel err {worst:.3e}")))
    }
}

pub fn reconstruct(a: &ReconstructArgs) -> Outcome {
    match checkpoint::peek_dtype(&a.checkpoint)? {
        DType::F32 => reconstruct_typed::<f32>(a),
        DType::F64 => reconstruct_typed::<f64>(a),
    }
}

fn reconstruct_typed<T: Scalar>(a: &ReconstructArgs) -> Outcome {
    let state = checkpoint::load::<T>(&a.checkpoint)?;
    let cfg = state.config();
    let s = cfg.model.image_size;
    let image: Tensor<T> = match &a.data {
        Some(dir) => {
            let images = load_dataset(dir)?;
            let img = images.get(a.index).ok_or_else(|| {
                Failure::Usage(format!("--index {} out of range for {} images", a.index, images.len()))
            })?;
            img.cast()
        }
        None => synth_image(cfg.train.seed, a.index as u64, s).cast(),
    };
    if image.shape() != [3, s, s] {
        return Err(Failure::Usage(format!("image {:?} does not match the model's {s}×{s}", image.shape())));
    }
    let mut rng = stream_rng(a.seed, Stream::Mask, 0);
    let pair = sample_mask_pair(cfg.model.n_patches(), cfg.model.mask_ratio, &mut rng)?;
    let rec = state.reconstruct(&image, &pair)?;
    let grid = PatchGrid::square(cfg.model.grid_side());
    let keep = mask_image::<T>(pair.adaptive_mask(), grid, cfg.model.patch_size, 3)?;
    let masked = image.zip_map(&keep, |x, k| x * k)?;
    let side_by_side = hconcat(&[&image, &masked, &rec.composite])?;

    fs::create_dir_all(&a.out)?;
    image.save(a.out.join("original.cmt"))?;
    masked.save(a.out.join("masked.cmt"))?;
    rec.adaptive.save(a.out.join("adaptive.cmt"))?;
    rec.composite.save(a.out.join("reconstruction.cmt"))?;
    side_by_side.save(a.out.join("side_by_side.cmt"))?;
    let n = T::of_usize(image.numel());
    let mse = image.zip_map(&rec.composite, |x, y| (x - y) * (x - y))?.sum() / n;
    let mask: String = pair.adaptive_mask().iter().map(|&b| if b { '1' } else { '0' }).collect();
    println!("step {}  adaptive mask {mask}  composite mse {:.6}", state.step(), mse.as_f64());
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Concatenates `C×H×W` images along the width.
fn hconcat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>, Failure> {
    let [c, h, w] = parts[0].shape()[..] else {
        return Err(Failure::Usage("expected C×H×W images".into()));
    };
    let total = w * parts.len();
    let mut out = Vec::with_capacity(c * h * total);
    for row in 0..c * h {
        for p in parts {
            out.extend_from_slice(&p.data()[row * w..(row + 1) * w]);
        }
    }
    Ok(Tensor::from_vec([c, h, total], out)?)
}

pub fn params(a: &ParamsArgs) -> Outcome {
    let names: Vec<&str> = match &a.preset {
        Some(p) => vec![p.as_str()],
        None => PRESETS.to_vec(),
    };
    let configs = names.iter().map(|n| ModelConfig::preset(n)).collect::<Result<Vec<_>, _>>()?;
    println!("{:<12} {:>14} {:>14} {:>14}", "preset", "encoder", "decoder", "total");
    for (name, cfg) in names.iter().zip(&configs) {
        let specs = param_specs(cfg)?;
        let count = |part| specs.iter().filter(|s| s.part == part).map(|s| s.numel()).sum::<usize>();
        let (enc, dec) = (count(Part::Encoder), count(Part::Decoder));
        println!("{name:<12} {enc:>14} {dec:>14} {:>14}", enc + dec);
    }
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Outcome {
    match a.run.dtype {
        Precision::F32 => bench_typed::<f32>(a),
        Precision::F64 => bench_typed::<f64>(a),
    }
}

fn bench_typed<T: Scalar>(a: &BenchArgs) -> Outcome {
    let mut cfg = run_config(&a.run)?;
    if a.run.steps.is_none() {
        cfg.train.steps = 5;
    }
    let measured = cfg.train.steps;
    if measured == 0 {
        return Err(Failure::Usage("--steps must be positive".into()));
    }
    cfg.train.steps += a.warmup;
    let images = images_for::<T>(None, &cfg, cfg.train.batch_size)?;
    let mut state = TrainState::<T>::new(cfg.clone())?;
    for _ in 0..a.warmup {
        state.train_step(&images)?;
    }
    let mut times = Vec::new();
    for _ in 0..measured {
        let start = Instant::now();
        state.train_step(&images)?;
        times.push(start.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times.iter().copied().fold(0.0, f64::max);
    println!(
        "batch {}  image {}  dtype {}  steps {measured}  seconds/step mean {mean:.4} min {min:.4} max {max:.4}",
        cfg.train.batch_size,
        cfg.model.image_size,
        T::DTYPE.name()
    );
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Outcome {
    if a.count == 0 || a.size == 0 || !a.size.is_multiple_of(32) {
        return Err(Failure::Usage("--count must be positive and --size a positive multiple of 32".into()));
    }
    let images = synth_dataset(a.seed, a.count, a.size);
    let manifest = write_dataset(&a.out, &images)?;
    println!("wrote {} images of 3×{}×{}; manifest {}", a.count, a.size, a.size, manifest.display());
    Ok(())
}
