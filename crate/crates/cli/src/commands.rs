use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cumamba::bench::{self, BenchPlan, BenchRecord, Kernel};
use cumamba::gradcheck::{run_suite, SUITE_TOLERANCE};
use cumamba::image_io::{read_image, write_image, ImageFormat};
use cumamba::metrics::{psnr, ssim};
use cumamba::par::with_threads;
use cumamba::train::{test_set, Checkpoint, TrainConfig, Trainer};
use cumamba::unet::{tiled_infer, CuMambaConfig};
use cumamba::Tensor;

use crate::cli::{BenchArgs, Command, EvalArgs, GradcheckArgs, InferArgs, TrainArgs};
use crate::manifest::Manifest;
use crate::CliError;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Bench(a) => run_bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))
}

fn prepare_out(dir: &Path) -> CliResult<&Path> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint<f32>> {
    Checkpoint::load(path).map_err(|e| CliError::Runtime(format!("loading checkpoint {}: {e}", path.display())))
}

fn train(args: TrainArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => TrainConfig::from_text(&read_text(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.common.threads {
        config.threads = threads;
    }
    config.validate()?;
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ckpt) = &resume {
        if ckpt.config != config {
            return Err(CliError::Usage(format!(
                "checkpoint {} was written by a different config; resume with its manifest",
                args.resume.as_deref().unwrap_or(Path::new("")).display()
            )));
        }
    }
    let out = prepare_out(&args.common.out)?;
    let mut notes = Vec::new();
    if let Some(path) = &args.resume {
        notes.push(("resume", path.display().to_string()));
    }
    Manifest {
        subcommand: "train",
        seed: config.seed,
        threads: config.threads,
        notes,
        config: config.to_text(),
    }
    .write(out)?;

    with_threads(config.threads, || -> CliResult {
        let mut trainer = Trainer::new(config.clone())?;
        if let Some(ckpt) = &resume {
            trainer.restore(ckpt)?;
        }
        let log_path = out.join(LOG_FILE);
        // a resumed run continues the earlier log instead of truncating it
        let log_file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume.is_some())
            .truncate(resume.is_none())
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))?;
        let mut log = BufWriter::new(log_file);
        let every = config.checkpoint_every;
        let history = trainer.run(Some(&mut log), |ckpt| {
            ckpt.save(out.join(CHECKPOINT_FILE))?;
            if every > 0 && ckpt.step % every == 0 {
                ckpt.save(out.join(format!("checkpoint-{:06}.bin", ckpt.step)))?;
            }
            Ok(())
        })?;
        log.flush().map_err(|e| io_err(&log_path, e))?;
        if let Some(last) = history.last() {
            println!("step {}: loss {:.6}, batch psnr {:.3} dB", last.step, last.loss, last.psnr);
        }
        let report = trainer.evaluate(&test_set(&config)?)?;
        println!(
            "held-out: psnr {:.3} dB (input {:.3}, gain {:+.3}), ssim {:.4} (input {:.4})",
            report.psnr,
            report.input_psnr,
            report.psnr_gain(),
            report.ssim,
            report.input_ssim
        );
        println!("wrote {}", out.join(CHECKPOINT_FILE).display());
        Ok(())
    })
}

struct PairScore {
    name: String,
    input_psnr: f64,
    input_ssim: f64,
    psnr: f64,
    ssim: f64,
}

fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let hidden = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// The requested tile overlap, or a quarter of the patch side.
fn overlap_for(config: &CuMambaConfig, requested: Option<usize>) -> CliResult<usize> {
    let (ph, pw) = config.patch;
    let side = ph.min(pw);
    match requested {
        None => Ok(side / 4),
        Some(o) if 2 * o < side => Ok(o),
        Some(o) => Err(CliError::Usage(format!(
            "--overlap {o} must be less than half the {ph}x{pw} patch"
        ))),
    }
}

fn eval(args: EvalArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let overlap = overlap_for(&ckpt.config.model, args.overlap)?;
    let threads = args.common.threads.unwrap_or(1);
    let (degraded_dir, clean_dir) = (args.pairs.join("degraded"), args.pairs.join("clean"));
    for dir in [&degraded_dir, &clean_dir] {
        if !dir.is_dir() {
            return Err(CliError::Runtime(format!(
                "{} is missing: --pairs needs `degraded/` and `clean/` subdirectories with matching file names",
                dir.display()
            )));
        }
    }
    let inputs = image_files(&degraded_dir)?;
    if inputs.is_empty() {
        return Err(CliError::Runtime(format!("no images in {}", degraded_dir.display())));
    }
    let out = prepare_out(&args.common.out)?;
    Manifest {
        subcommand: "eval",
        seed: ckpt.config.seed,
        threads,
        notes: vec![
            ("checkpoint", format!("{} (step {})", args.checkpoint.display(), ckpt.step)),
            ("pairs", args.pairs.display().to_string()),
            ("overlap", overlap.to_string()),
        ],
        config: ckpt.config.to_text(),
    }
    .write(out)?;

    let net = ckpt.network()?;
    let scores = with_threads(threads, || -> CliResult<Vec<PairScore>> {
        inputs
            .iter()
            .map(|path| {
                let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let clean_path = clean_dir.join(&name);
                if !clean_path.is_file() {
                    return Err(CliError::Runtime(format!("{name}: no matching {}", clean_path.display())));
                }
                let degraded: Tensor<f32> = read_image(path)?;
                let clean: Tensor<f32> = read_image(&clean_path)?;
                if degraded.shape() != clean.shape() {
                    return Err(CliError::Runtime(format!(
                        "{name}: degraded is {:?} but clean is {:?}",
                        degraded.shape(),
                        clean.shape()
                    )));
                }
                let restored = tiled_infer(&net, &degraded, overlap)?;
                Ok(PairScore {
                    input_psnr: psnr(&degraded, &clean)?,
                    input_ssim: ssim(&degraded, &clean)?,
                    psnr: psnr(&restored, &clean)?,
                    ssim: ssim(&restored, &clean)?,
                    name,
                })
            })
            .collect()
    })?;

    let n = scores.len() as f64;
    let mean = |f: fn(&PairScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let csv_path = out.join(EVAL_FILE);
    let mut csv = create(&csv_path)?;
    let mut table = format!("{:<24} {:>10} {:>8} {:>10} {:>8}\n", "image", "in psnr", "in ssim", "psnr", "ssim");
    let mut rows = String::from("image,input_psnr,input_ssim,psnr,ssim\n");
    let all = scores.iter().map(|s| (s.name.as_str(), s.input_psnr, s.input_ssim, s.psnr, s.ssim)).chain([(
        "mean",
        mean(|s| s.input_psnr),
        mean(|s| s.input_ssim),
        mean(|s| s.psnr),
        mean(|s| s.ssim),
    )]);
    for (name, ip, is, p, s) in all {
        table.push_str(&format!("{name:<24} {ip:>10.3} {is:>8.4} {p:>10.3} {s:>8.4}\n"));
        rows.push_str(&format!("{name},{ip},{is},{p},{s}\n"));
    }
    csv.write_all(rows.as_bytes()).and_then(|_| csv.flush()).map_err(|e| io_err(&csv_path, e))?;
    print!("{table}");
    Ok(())
}

fn infer(args: InferArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let overlap = overlap_for(&ckpt.config.model, args.overlap)?;
    let threads = args.common.threads.unwrap_or(1);
    let image: Tensor<f32> = read_image(&args.input)?;
    let out = prepare_out(&args.common.out)?;
    let format = ImageFormat::from_path(&args.input).unwrap_or(ImageFormat::Png);
    let ext = match format {
        ImageFormat::Ppm => "ppm",
        ImageFormat::Png => "png",
    };
    let stem = args.input.file_stem().unwrap_or_default().to_string_lossy();
    let target = out.join(format!("{stem}.restored.{ext}"));
    Manifest {
        subcommand: "infer",
        seed: ckpt.config.seed,
        threads,
        notes: vec![
            ("checkpoint", format!("{} (step {})", args.checkpoint.display(), ckpt.step)),
            ("input", args.input.display().to_string()),
            ("output", target.display().to_string()),
            ("overlap", overlap.to_string()),
        ],
        config: ckpt.config.to_text(),
    }
    .write(out)?;
    let net = ckpt.network()?;
    let restored = with_threads(threads, || tiled_infer(&net, &image, overlap))?;
    write_image(&target, &restored)?;
    println!("wrote {}", target.display());
    Ok(())
}

/// Slope over the upper half of each kernel's length grid, per channel count.
fn slope_summary(plan: &BenchPlan, records: &[BenchRecord]) -> String {
    let mut out = String::new();
    for &kernel in &plan.kernels {
        let lengths = match kernel {
            Kernel::Attention => &plan.attention_lengths,
            _ => &plan.scan_lengths,
        };
        let mut sorted = lengths.clone();
        sorted.sort_unstable();
        let Some(&min_l) = sorted.get(sorted.len() / 2) else {
            continue;
        };
        for &c in &plan.channels {
            match bench::length_slope(records, kernel, c, min_l) {
                Ok(slope) => out.push_str(&format!("{kernel} C={c}: time ~ L^{slope:.3} for L >= {min_l}\n")),
                Err(_) => out.push_str(&format!("{kernel} C={c}: too few lengths >= {min_l} for a slope\n")),
            }
        }
        for &c in &plan.channels {
            if plan.channels.contains(&(2 * c)) && kernel != Kernel::Attention {
                if let Some(&l) = sorted.last() {
                    if let Ok(ratio) = bench::channel_doubling_ratio(records, kernel, l, c) {
                        out.push_str(&format!("{kernel} L={l}: time(C={}) / time(C={c}) = {ratio:.3}\n", 2 * c));
                    }
                }
            }
        }
    }
    out
}

fn run_bench(args: BenchArgs) -> CliResult {
    let mut plan = match &args.config {
        Some(path) => BenchPlan::from_text(&read_text(path)?)?,
        None => BenchPlan::default(),
    };
    plan.seed = args.seed;
    if let Some(threads) = args.common.threads {
        plan.threads = threads;
    }
    plan.validate()?;
    let out = prepare_out(&args.common.out)?;
    Manifest {
        subcommand: "bench",
        seed: plan.seed,
        threads: plan.threads,
        notes: Vec::new(),
        config: plan.to_text(),
    }
    .write(out)?;
    let records = plan.run(|r| {
        println!(
            "{:<16} L={:<6} C={:<3} median {:.3e} s (min {:.3e}, max {:.3e})",
            r.kernel.id(),
            r.l,
            r.c,
            r.median_s,
            r.min_s,
            r.max_s
        )
    })?;
    let csv_path = out.join(BENCH_FILE);
    let mut csv = create(&csv_path)?;
    bench::write_csv(&mut csv, &records)
        .and_then(|_| csv.flush())
        .map_err(|e| io_err(&csv_path, e))?;
    print!("{}", slope_summary(&plan, &records));
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> CliResult {
    let model = match &args.config {
        Some(path) => TrainConfig::from_text(&read_text(path)?)?.model,
        None => CuMambaConfig::toy(),
    };
    let threads = args.common.threads.unwrap_or(1);
    let out = prepare_out(&args.common.out)?;
    let config = TrainConfig {
        model: model.clone(),
        seed: args.seed,
        threads,
        ..TrainConfig::default()
    };
    config.validate()?;
    Manifest {
        subcommand: "gradcheck",
        seed: args.seed,
        threads,
        notes: vec![("tolerance", SUITE_TOLERANCE.to_string())],
        config: config.to_text(),
    }
    .write(out)?;
    let entries = with_threads(threads, || {
        run_suite(&model, args.seed, |e| {
            println!(
                "{} {:<32} max rel err {:.3e} ({} probes, {} kink skips)",
                if e.passed() { "ok  " } else { "FAIL" },
                e.name,
                e.report.max_rel_err,
                e.report.probes,
                e.report.kink_skips
            )
        })
    })?;
    let csv_path = out.join(GRADCHECK_FILE);
    let mut csv = create(&csv_path)?;
    let mut rows = String::from("name,max_rel_err,probes,kink_skips,passed\n");
    for e in &entries {
        rows.push_str(&format!(
            "{},{:e},{},{},{}\n",
            e.name,
            e.report.max_rel_err,
            e.report.probes,
            e.report.kink_skips,
            e.passed()
        ));
    }
    csv.write_all(rows.as_bytes()).and_then(|_| csv.flush()).map_err(|e| io_err(&csv_path, e))?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} gradient checks below {SUITE_TOLERANCE:e}", entries.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} of {} gradient checks exceed {SUITE_TOLERANCE:e}: {}",
            failed.len(),
            entries.len(),
            failed.join(", ")
        )))
    }
}
