//! Command-line driver: maps subcommands onto library operations, resolves
//! configuration (file, then dotted-path overrides), and writes run
//! artifacts (resolved config, CSV metrics, checkpoints) into a directory
//! named by the config hash.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 runtime or
//! data error, 3 gradient-check failure.

use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{aug_polarity, aug_spatial, aug_temporal, Family};
use crate::checkpoint::{
    collect_params, load_checkpoint_expecting, restore_params, save_checkpoint, Checkpoint,
    Topology,
};
use crate::config::{canonical_toml, config_hash, load_config, Config};
use crate::error::{Error, Result};
use crate::event::{
    read_dataset_dir, read_event_file, synth_moving_shapes, synth_moving_shapes_with_offset,
    write_dataset_dir, EventStream, LabeledEventDataset,
};
use crate::gradcheck::{ensure_passed, run_gradcheck, GradcheckScope};
use crate::repr::{encode_histogram, FrameSequence};
use crate::rng::{derive_seed, stream_rng};
use crate::snn::{build_backbone, SnnModel};
use crate::train::{
    holdout_split, pretrain, run_data_quantity, run_finetune, run_probe, run_supervised,
    run_transfer, PretrainReport, RunReport, Summary,
};

pub const COMMANDS: &[&str] = &[
    "synth",
    "pretrain",
    "supervised",
    "probe",
    "finetune",
    "transfer",
    "data-quantity",
    "augment-preview",
    "gradcheck",
    "config-dump",
];

const USAGE: &str = "\
usage: spikeclr <command> [options]

commands:
  synth            write a synthetic event dataset (.evt files + labels.csv)
  pretrain         contrastive pretraining; saves an encoder checkpoint
  supervised       supervised-from-scratch baseline over evaluation splits
  probe            linear probe of a frozen encoder (--ckpt <path>|none)
  finetune         end-to-end fine-tuning of an encoder (--ckpt <path>|none)
  transfer         pretrain on one dataset, fine-tune on another
  data-quantity    pretrain on nested fractions of the data, fine-tune each
  augment-preview  dump augmented histograms of one sample as tidy CSVs
  gradcheck        finite-difference gradient checks [primitives|lif|full]
  config-dump      print the fully resolved configuration

options:
  --config <path>     base config file (TOML)
  --<dotted.path> <v> override any config key, e.g. --pretrain.epochs 10
  --seed/--k/--splits/--classes/--per-class  common override shorthands
  --out <dir>         run-directory root (default $SPIKECLR_OUT or ./runs)
  --ckpt <path|none>  encoder checkpoint for probe/finetune
  --dir <path>        explicit output directory for synth
  --sample <path>     event file for augment-preview
  --threads <n>       cap worker threads
  --force             overwrite a non-empty synth output directory
";

/// Parsed command line: the subcommand, plumbing flags, and every
/// `--dotted.path value` pair destined for the config.
#[derive(Debug, Default)]
pub struct Args {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub out_root: Option<PathBuf>,
    pub threads: Option<usize>,
    pub force: bool,
    pub dir: Option<PathBuf>,
    pub scopes: Vec<GradcheckScope>,
    pub overrides: Vec<(String, String)>,
}

impl Args {
    pub fn parse(argv: &[String]) -> Result<Args> {
        let mut args = Args::default();
        let mut it = argv.iter().peekable();
        args.command = it
            .next()
            .ok_or_else(|| Error::config(format!("missing command\n{USAGE}")))?
            .clone();
        if !COMMANDS.contains(&args.command.as_str()) {
            return Err(Error::config(format!(
                "unknown command '{}'\n{USAGE}",
                args.command
            )));
        }
        while let Some(tok) = it.next() {
            if let Some(flag) = tok.strip_prefix("--") {
                if flag == "force" {
                    args.force = true;
                    continue;
                }
                let value = it
                    .next()
                    .ok_or_else(|| Error::config(format!("flag --{flag} needs a value")))?
                    .clone();
                match flag {
                    "config" => args.config_path = Some(PathBuf::from(value)),
                    "out" => args.out_root = Some(PathBuf::from(value)),
                    "dir" => args.dir = Some(PathBuf::from(value)),
                    "threads" => {
                        args.threads = Some(value.parse().map_err(|_| {
                            Error::config(format!("--threads expects an integer, got '{value}'"))
                        })?)
                    }
                    "seed" => args.overrides.push(("seed".into(), value)),
                    "k" => args.overrides.push(("eval.k".into(), value)),
                    "splits" => args.overrides.push(("eval.splits".into(), value)),
                    "classes" => args.overrides.push(("data.classes".into(), value)),
                    "per-class" => args.overrides.push(("data.samples_per_class".into(), value)),
                    "ckpt" => args.overrides.push(("eval.ckpt".into(), value)),
                    "sample" => args.overrides.push(("data.preview_sample".into(), value)),
                    dotted if dotted.contains('.') => {
                        args.overrides.push((dotted.to_string(), value))
                    }
                    other => {
                        return Err(Error::config(format!(
                            "unknown flag --{other} (config keys are addressed as --section.key)"
                        )))
                    }
                }
            } else if args.command == "gradcheck" {
                args.scopes.push(GradcheckScope::parse(tok)?);
            } else {
                return Err(Error::config(format!("unexpected argument '{tok}'")));
            }
        }
        Ok(args)
    }
}

/// Entry point for the binary: parse, dispatch, map errors to exit codes.
pub fn main() -> ! {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let code = match run(&argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code)
}

pub fn run(argv: &[String]) -> Result<()> {
    let args = Args::parse(argv)?;
    if let Some(n) = args.threads {
        cap_threads(n)?;
    }
    let cfg = load_config(args.config_path.as_deref(), &args.overrides)?;
    match args.command.as_str() {
        "config-dump" => {
            cfg.validate()?;
            print!("{}", canonical_toml(&cfg)?);
            Ok(())
        }
        "gradcheck" => cmd_gradcheck(&args),
        "synth" => cmd_synth(&cfg, &args),
        "pretrain" => cmd_pretrain(&cfg, &args),
        "supervised" => cmd_supervised(&cfg, &args),
        "probe" => cmd_probe(&cfg, &args),
        "finetune" => cmd_finetune(&cfg, &args),
        "transfer" => cmd_transfer(&cfg, &args),
        "data-quantity" => cmd_data_quantity(&cfg, &args),
        "augment-preview" => cmd_augment_preview(&cfg, &args),
        other => Err(Error::config(format!("unknown command '{other}'"))),
    }
}

fn cap_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("cannot cap threads: {e}")))
}

/// Run-directory root: --out flag, then $SPIKECLR_OUT, then ./runs.
fn out_root(args: &Args) -> PathBuf {
    args.out_root
        .clone()
        .or_else(|| std::env::var_os("SPIKECLR_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Create `<root>/<command>-<confighash>/` and freeze the resolved config
/// inside it, so the run is reproducible from the directory alone.
fn make_run_dir(cfg: &Config, args: &Args, command: &str) -> Result<PathBuf> {
    let dir = out_root(args).join(format!("{command}-{}", config_hash(cfg)?));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), canonical_toml(cfg)?)?;
    Ok(dir)
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], "_")
}

pub fn results_csv(reports: &[RunReport]) -> String {
    let mut s = String::from("protocol,dataset,pretrain_dataset,k,split,seed,accuracy,epochs,wall_clock_s\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            csv_field(&r.protocol),
            csv_field(&r.dataset),
            csv_field(&r.pretrain_dataset),
            csv_field(&r.k),
            r.split,
            r.split_seed,
            r.accuracy,
            r.epochs,
            r.wall_clock_s
        ));
    }
    s
}

pub fn summary_csv(summaries: &[Summary]) -> String {
    let mut s = String::from("protocol,k,mean_acc,std_acc,n_splits\n");
    for m in summaries {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&m.protocol),
            csv_field(&m.k),
            m.mean_acc,
            m.std_acc,
            m.n_splits
        ));
    }
    s
}

pub fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        s.push_str(&format!("{epoch},{loss}\n"));
    }
    s
}

/// The training dataset named by the config, or a synthetic one derived
/// from the config's generator parameters and seed stream.
fn load_train(cfg: &Config) -> Result<LabeledEventDataset> {
    match &cfg.data.dataset {
        Some(dir) => read_dataset_dir(dir),
        None => synth_moving_shapes(
            cfg.data.classes,
            cfg.data.samples_per_class,
            (cfg.data.width, cfg.data.height),
            cfg.data.duration_us,
            derive_seed(cfg.seed, "data", &[0]),
        ),
    }
}

/// Train/test pair for evaluation protocols. Directory datasets without an
/// explicit test directory are split 80/20 per class; synthetic datasets
/// get a freshly generated test set.
fn load_train_test(cfg: &Config) -> Result<(LabeledEventDataset, LabeledEventDataset)> {
    match (&cfg.data.dataset, &cfg.data.test_dataset) {
        (Some(train_dir), Some(test_dir)) => {
            Ok((read_dataset_dir(train_dir)?, read_dataset_dir(test_dir)?))
        }
        (Some(train_dir), None) => {
            let full = read_dataset_dir(train_dir)?;
            holdout_split(&full, 0.2, derive_seed(cfg.seed, "data", &[4]))
        }
        (None, _) => {
            let train = load_train(cfg)?;
            let test = synth_moving_shapes(
                cfg.data.classes,
                cfg.eval.test_per_class,
                (cfg.data.width, cfg.data.height),
                cfg.data.duration_us,
                derive_seed(cfg.seed, "data", &[1]),
            )?;
            Ok((train, test))
        }
    }
}

/// The unlabeled pretraining pool: an explicit directory when configured,
/// otherwise the training dataset itself.
fn load_pretrain_pool(cfg: &Config) -> Result<LabeledEventDataset> {
    match &cfg.data.pretrain_dataset {
        Some(dir) => read_dataset_dir(dir),
        None => load_train(cfg),
    }
}

fn model_topology(cfg: &Config, sensor: (u16, u16)) -> Topology {
    Topology {
        backbone: cfg.model.backbone,
        height: sensor.1 as usize,
        width: sensor.0 as usize,
        t_bins: cfg.data.t_bins,
        proj_dim: cfg.model.proj_dim,
        lif: cfg.model.lif,
    }
}

/// Encoder for probe/finetune: `none` builds the same random initialization
/// pretraining would start from; a path loads a checkpoint and verifies its
/// topology against the config and dataset. Returns the model and the name
/// recorded as its pretraining provenance.
fn resolve_encoder(cfg: &Config, sensor: (u16, u16)) -> Result<(SnnModel, String)> {
    let spec = cfg.eval.ckpt.as_deref().ok_or_else(|| {
        Error::config("this command needs --ckpt <path> (or --ckpt none for a random-init encoder)")
    })?;
    if spec == "none" {
        let model = build_backbone(
            cfg.model.backbone,
            sensor.1 as usize,
            sensor.0 as usize,
            cfg.model.lif,
            derive_seed(cfg.seed, "model", &[0]),
        )?;
        return Ok((model, "none".to_string()));
    }
    let path = Path::new(spec);
    let want = model_topology(cfg, sensor);
    let ckpt = load_checkpoint_expecting(path, &want)?;
    let mut model = build_backbone(
        cfg.model.backbone,
        sensor.1 as usize,
        sensor.0 as usize,
        cfg.model.lif,
        derive_seed(cfg.seed, "model", &[0]),
    )?;
    restore_params(&mut model, "backbone", &ckpt.tensors)?;
    Ok((model, spec.to_string()))
}

fn save_encoder(dir: &Path, cfg: &Config, sensor: (u16, u16), backbone: &SnnModel) -> Result<PathBuf> {
    let path = dir.join("encoder.spkc");
    let ckpt = Checkpoint {
        topology: model_topology(cfg, sensor),
        tensors: collect_params(&[("backbone", backbone)]),
    };
    save_checkpoint(&path, &ckpt)?;
    Ok(path)
}

fn print_summary(summary: &Summary) {
    println!(
        "{} k={}: mean_acc {:.4} std {:.4} over {} split(s)",
        summary.protocol, summary.k, summary.mean_acc, summary.std_acc, summary.n_splits
    );
}

fn write_eval_outputs(
    dir: &Path,
    reports: &[RunReport],
    summary: &Summary,
) -> Result<()> {
    fs::write(dir.join("results.csv"), results_csv(reports))?;
    fs::write(dir.join("summary.csv"), summary_csv(std::slice::from_ref(summary)))?;
    Ok(())
}

fn cmd_synth(cfg: &Config, args: &Args) -> Result<()> {
    cfg.validate()?;
    let ds = load_train(cfg)?;
    let dest = match &args.dir {
        Some(dir) => dir.clone(),
        None => make_run_dir(cfg, args, "synth")?.join("dataset"),
    };
    write_dataset_dir(&ds, &dest, args.force)?;
    println!(
        "wrote {} samples across {} classes to {}",
        ds.len(),
        ds.num_classes,
        dest.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &Config, args: &Args) -> Result<()> {
    cfg.validate()?;
    let pool = load_pretrain_pool(cfg)?;
    let out = pretrain(&pool, cfg)?;
    let dir = make_run_dir(cfg, args, "pretrain")?;
    fs::write(dir.join("loss.csv"), loss_csv(&out.report.loss_curve))?;
    let ckpt_path = save_encoder(&dir, cfg, pool.sensor(), &out.backbone)?;
    print_pretrain(&out.report);
    println!("encoder saved to {}", ckpt_path.display());
    Ok(())
}

fn print_pretrain(report: &PretrainReport) {
    match (report.loss_curve.first(), report.loss_curve.last()) {
        (Some(first), Some(last)) => println!(
            "pretrained on {} for {} epochs: loss {:.4} -> {:.4} ({} params, {:.1}s)",
            report.dataset,
            report.epochs,
            first,
            last,
            report.trained_params,
            report.wall_clock_s
        ),
        _ => println!(
            "pretrained on {} for 0 epochs ({} params)",
            report.dataset, report.trained_params
        ),
    }
}

fn cmd_supervised(cfg: &Config, args: &Args) -> Result<()> {
    cfg.validate()?;
    let (train, test) = load_train_test(cfg)?;
    let (reports, summary) = run_supervised(&train, &test, cfg)?;
    let dir = make_run_dir(cfg, args, "supervised")?;
    write_eval_outputs(&dir, &reports, &summary)?;
    print_summary(&summary);
    println!("results in {}", dir.display());
    Ok(())
}

fn cmd_probe(cfg: &Config, args: &Args) -> Result<()> {
    cfg.validate()?;
    let (train, test) = load_train_test(cfg)?;
    let (encoder, origin) = resolve_encoder(cfg, train.sensor())?;
    let (reports, summary) = run_probe(&encoder, &origin, &train, &test, cfg)?;
    let dir = make_run_dir(cfg, args, "probe")?;
    write_eval_outputs(&dir, &reports, &summary)?;
    print_summary(&summary);
    println!("results in {}", dir.display());
    Ok(())
}

fn cmd_finetune(cfg: &Config, args: &Args) -> Result<()> {
    cfg.validate()?;
    let (train, test) = load_train_test(cfg)?;
    let (encoder, origin) = resolve_encoder(cfg, train.sensor())?;
    let (reports, summary) = run_finetune(&encoder, &origin, &train, &test, cfg)?;
    let dir = make_run_dir(cfg, args, "finetune")?;
    write_eval_outputs(&dir, &reports, &summary)?;
    print_summary(&summary);
    println!("results in {}", dir.display());
    Ok(())
}

/// Transfer targets: explicit dataset directories when configured, or a
/// synthetic dataset of unseen shape classes (shifted by
/// `data.transfer_offset`) on the same sensor.
fn load_transfer_target(cfg: &Config) -> Result<(LabeledEventDataset, LabeledEventDataset)> {
    if cfg.data.dataset.is_some() {
        return load_train_test(cfg);
    }
    let train = synth_moving_shapes_with_offset(
        cfg.data.classes,
        cfg.data.transfer_offset,
        cfg.data.samples_per_class,
        (cfg.data.width, cfg.data.height),
        cfg.data.duration_us,
        derive_seed(cfg.seed, "data", &[2]),
    )?;
    let test = synth_moving_shapes_with_offset(
        cfg.data.classes,
        cfg.data.transfer_offset,
        cfg.eval.test_per_class,
        (cfg.data.width, cfg.data.height),
        cfg.data.duration_us,
        derive_seed(cfg.seed, "data", &[3]),
    )?;
    Ok((train, test))
}

fn cmd_transfer(cfg: &Config, args: &Args) -> Result<()> {
    cfg.validate()?;
    let source = load_pretrain_pool(cfg)?;
    let (target_train, target_test) = load_transfer_target(cfg)?;
    let out = run_transfer(&source, &target_train, &target_test, cfg)?;
    let dir = make_run_dir(cfg, args, "transfer")?;
    fs::write(dir.join("loss.csv"), loss_csv(&out.pretrain.report.loss_curve))?;
    save_encoder(&dir, cfg, source.sensor(), &out.pretrain.backbone)?;
    write_eval_outputs(&dir, &out.reports, &out.summary)?;
    print_pretrain(&out.pretrain.report);
    print_summary(&out.summary);
    println!("results in {}", dir.display());
    Ok(())
}

fn cmd_data_quantity(cfg: &Config, args: &Args) -> Result<()> {
    cfg.validate()?;
    let (train, test) = load_train_test(cfg)?;
    let runs = run_data_quantity(&train, &test, cfg)?;
    let dir = make_run_dir(cfg, args, "data-quantity")?;
    let mut all_reports = Vec::new();
    let mut all_summaries = Vec::new();
    let mut frac_rows = String::from("fraction,pretrain_samples,mean_acc,std_acc,n_splits\n");
    for run in &runs {
        fs::write(
            dir.join(format!("loss_f{}.csv", run.fraction)),
            loss_csv(&run.pretrain.loss_curve),
        )?;
        frac_rows.push_str(&format!(
            "{},{},{},{},{}\n",
            run.fraction,
            run.pretrain_samples,
            run.summary.mean_acc,
            run.summary.std_acc,
            run.summary.n_splits
        ));
        all_reports.extend(run.reports.iter().cloned());
        all_summaries.push(run.summary.clone());
    }
    fs::write(dir.join("results.csv"), results_csv(&all_reports))?;
    fs::write(dir.join("summary.csv"), summary_csv(&all_summaries))?;
    fs::write(dir.join("fractions.csv"), frac_rows)?;
    for run in &runs {
        println!(
            "fraction {:>5}: {} pretrain samples, mean_acc {:.4} std {:.4}",
            run.fraction, run.pretrain_samples, run.summary.mean_acc, run.summary.std_acc
        );
    }
    println!("results in {}", dir.display());
    Ok(())
}

/// One grid cell per line: `t,channel,y,x,value` for every time bin and
/// polarity channel, ready for external plotting.
pub fn grid_csv(seq: &FrameSequence) -> String {
    let (t_bins, h, w) = (seq.t_bins(), seq.height(), seq.width());
    let data = seq.tensor().data();
    let mut s = String::from("t,channel,y,x,value\n");
    let mut i = 0;
    for t in 0..t_bins {
        for ch in ["pos", "neg"] {
            for y in 0..h {
                for x in 0..w {
                    s.push_str(&format!("{t},{ch},{y},{x},{}\n", data[i]));
                    i += 1;
                }
            }
        }
    }
    s
}

fn preview_sample(cfg: &Config) -> Result<EventStream> {
    if let Some(path) = &cfg.data.preview_sample {
        return read_event_file(path);
    }
    let ds = load_train(cfg)?;
    ds.samples
        .first()
        .map(|(s, _)| s.clone())
        .ok_or_else(|| Error::data("dataset has no samples to preview"))
}

fn cmd_augment_preview(cfg: &Config, args: &Args) -> Result<()> {
    cfg.validate()?;
    let stream = preview_sample(cfg)?;
    let t_bins = cfg.data.t_bins;
    let dir = make_run_dir(cfg, args, "augment-preview")?;
    let original = encode_histogram(&stream, t_bins, true)?;
    fs::write(dir.join("original.csv"), grid_csv(&original))?;
    println!("original -> {}", dir.join("original.csv").display());
    for (i, family) in cfg.augment.enabled.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, "preview", &[i as u64]);
        let (name, seq) = match family {
            Family::Spatial => ("spatial", aug_spatial(&original, &mut rng, &cfg.augment)?),
            Family::Polarity => ("polarity", aug_polarity(&original, &mut rng, &cfg.augment)?),
            Family::Temporal => (
                "temporal",
                encode_histogram(&aug_temporal(&stream, &mut rng, &cfg.augment)?, t_bins, true)?,
            ),
        };
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, grid_csv(&seq))?;
        println!("{name} -> {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<()> {
    let scopes: Vec<GradcheckScope> = if args.scopes.is_empty() {
        GradcheckScope::all().to_vec()
    } else {
        args.scopes.clone()
    };
    let reports = run_gradcheck(&scopes)?;
    for r in &reports {
        println!(
            "{:<28} {:>3} coords  max_rel {:>10.3e}  ({:.2}s)  {}",
            r.name,
            r.checked,
            r.max_rel_err,
            r.elapsed_s,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    ensure_passed(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(tokens: &[&str]) -> Result<Args> {
        let v: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        Args::parse(&v)
    }

    #[test]
    fn parses_sugar_and_dotted_overrides() {
        let a = parse(&[
            "pretrain",
            "--seed",
            "9",
            "--pretrain.epochs",
            "3",
            "--k",
            "full",
            "--out",
            "/tmp/x",
        ])
        .unwrap();
        assert_eq!(a.command, "pretrain");
        assert_eq!(
            a.overrides,
            vec![
                ("seed".to_string(), "9".to_string()),
                ("pretrain.epochs".to_string(), "3".to_string()),
                ("eval.k".to_string(), "full".to_string()),
            ]
        );
        assert_eq!(a.out_root.as_deref(), Some(Path::new("/tmp/x")));
    }

    #[test]
    fn rejects_unknown_commands_and_flags() {
        assert!(parse(&["juggle"]).is_err());
        assert!(parse(&["synth", "--what"]).is_err());
        assert!(parse(&["synth", "--seed"]).is_err());
        assert!(parse(&["pretrain", "stray"]).is_err());
        assert!(parse(&[]).is_err());
    }

    #[test]
    fn gradcheck_scopes_parse_positionally() {
        let a = parse(&["gradcheck", "primitives", "lif"]).unwrap();
        assert_eq!(
            a.scopes,
            vec![GradcheckScope::Primitives, GradcheckScope::Lif]
        );
        assert!(parse(&["gradcheck", "everything"]).is_err());
    }

    #[test]
    fn synth_flags_map_to_data_keys() {
        let a = parse(&["synth", "--classes", "3", "--per-class", "10", "--force"]).unwrap();
        assert!(a.force);
        assert_eq!(
            a.overrides,
            vec![
                ("data.classes".to_string(), "3".to_string()),
                ("data.samples_per_class".to_string(), "10".to_string()),
            ]
        );
    }

    #[test]
    fn ckpt_flag_is_config_sugar() {
        let a = parse(&["probe", "--ckpt", "none"]).unwrap();
        assert_eq!(
            a.overrides,
            vec![("eval.ckpt".to_string(), "none".to_string())]
        );
        let cfg = crate::config::load_config(None, &a.overrides).unwrap();
        assert_eq!(cfg.eval.ckpt.as_deref(), Some("none"));
        let path_override = vec![(
            "eval.ckpt".to_string(),
            "/tmp/runs/encoder.spkc".to_string(),
        )];
        let cfg2 = crate::config::load_config(None, &path_override).unwrap();
        assert_eq!(cfg2.eval.ckpt.as_deref(), Some("/tmp/runs/encoder.spkc"));
        assert_ne!(
            crate::config::config_hash(&cfg).unwrap(),
            crate::config::config_hash(&cfg2).unwrap()
        );
    }

    #[test]
    fn csv_renderers_emit_pinned_headers() {
        let report = RunReport {
            protocol: "probe".into(),
            dataset: "synth_c3_s7".into(),
            pretrain_dataset: "none".into(),
            k: "5".into(),
            split: 0,
            split_seed: 42,
            accuracy: 0.5,
            epochs: 30,
            wall_clock_s: 1.5,
        };
        let csv = results_csv(&[report]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "protocol,dataset,pretrain_dataset,k,split,seed,accuracy,epochs,wall_clock_s"
        );
        assert_eq!(lines.next().unwrap(), "probe,synth_c3_s7,none,5,0,42,0.5,30,1.5");
        let summary = Summary {
            protocol: "probe".into(),
            k: "5".into(),
            mean_acc: 0.5,
            std_acc: 0.1,
            n_splits: 5,
            degenerate: false,
        };
        assert_eq!(
            summary_csv(&[summary]).lines().next().unwrap(),
            "protocol,k,mean_acc,std_acc,n_splits"
        );
        assert_eq!(loss_csv(&[2.0, 1.5]), "epoch,mean_loss\n0,2\n1,1.5\n");
    }

    #[test]
    fn csv_fields_are_sanitized() {
        assert_eq!(csv_field("a,b\nc"), "a_b_c");
    }

    #[test]
    fn grid_csv_preserves_mass() {
        use crate::event::synth_moving_shapes;
        let ds = synth_moving_shapes(2, 1, (8, 8), 500, 3).unwrap();
        let seq = encode_histogram(&ds.samples[0].0, 2, false).unwrap();
        let csv = grid_csv(&seq);
        let total: f64 = csv
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert_eq!(total, ds.samples[0].0.len() as f64);
        assert_eq!(csv.lines().count(), 1 + 2 * 2 * 8 * 8);
    }
}
