use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use stct_core::io::{read_jsonl, KvConfig};
use stct_core::noise::{cyclic_flip_map, make_asymmetric_t};
use stct_core::oracle::{read_reports, run_suite, write_reports, OracleReport, Suite};
use stct_core::pipeline::{
    encoder_from_kv, load_dataset_dir, mixture_from_kv, nmc_from_kv, save_dataset_dir, EpochRecord, RunConfig,
};
use stct_core::synth::MixtureSpec;
use stct_core::{gaussian_mixture, harden, inject_noise, make_symmetric_t, one_hot, run_nmc, run_stct, Convention, StctError};

use crate::{ConventionArg, NoiseArg, SuiteArg};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable config or missing input. Exit 2.
    Usage(String),
    /// The run itself failed or a check did not hold. Exit 1.
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<StctError> for CliError {
    fn from(e: StctError) -> Self {
        let usage = match e.root() {
            StctError::Config(_) | StctError::InputDomain(_) => true,
            StctError::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        if usage {
            CliError::Usage(e.to_string())
        } else {
            CliError::Failed(e.to_string())
        }
    }
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", p.display())))
    }
}

fn require_dir(p: &Path) -> Result<(), CliError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is not a directory", p.display())))
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(StctError::from)? + "\n";
    fs::write(path, text).map_err(StctError::from)?;
    Ok(())
}

pub fn gen(spec: &Path, out: &Path) -> Result<(), CliError> {
    require_file(spec)?;
    let kv = KvConfig::load(spec)?;
    let mixture = mixture_from_kv(&kv, &MixtureSpec::standard_benchmark())?;
    let test_n: usize = kv.get_or("test_n", 0)?;
    let test_seed: u64 = kv.get_or("test_seed", mixture.seed.wrapping_add(1))?;
    kv.reject_unknown()?;

    let train = gaussian_mixture(&mixture)?;
    save_dataset_dir(out, "", &train, None)?;
    if test_n > 0 {
        let test = gaussian_mixture(&MixtureSpec {
            n: test_n,
            seed: test_seed,
            ..mixture.clone()
        })?;
        save_dataset_dir(out, "test_", &test, None)?;
    }
    write_json(&out.join("spec.json"), &serde_json::to_value(&mixture).map_err(StctError::from)?)?;
    println!("wrote {} samples ({} held out) to {}", mixture.n, test_n, out.display());
    Ok(())
}

pub fn corrupt(
    input: &Path,
    noise: NoiseArg,
    rate: f64,
    convention: ConventionArg,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    require_dir(input)?;
    let mut ds = load_dataset_dir(input, "")?
        .ok_or_else(|| CliError::Usage(format!("no dataset in {}", input.display())))?;
    let clean = ds
        .clean_labels
        .clone()
        .ok_or_else(|| CliError::Usage("dataset has no clean labels to corrupt".into()))?;
    let classes = ds.classes();
    let t = match noise {
        NoiseArg::Sym => {
            let conv = match convention {
                ConventionArg::Include => Convention::IncludeSelf,
                ConventionArg::Exclude => Convention::ExcludeSelf,
            };
            make_symmetric_t(classes, rate, conv)?
        }
        NoiseArg::Asym => make_asymmetric_t(classes, rate, &cyclic_flip_map(classes))?,
    };
    let (noisy, mask) = inject_noise(&clean, &t, seed)?;
    let flipped = mask.iter().filter(|m| **m).count();
    ds.labels = one_hot(&noisy, classes)?;
    ds.corruption_mask = Some(mask);

    let dest = out.unwrap_or(input);
    save_dataset_dir(dest, "", &ds, Some(&noisy))?;
    if dest != input {
        for name in ["spec.json", "test_features.stm", "test_clean_labels.stm"] {
            let src = input.join(name);
            if src.exists() {
                fs::copy(&src, dest.join(name)).map_err(StctError::from)?;
            }
        }
    }
    println!(
        "corrupted {flipped} of {} labels (actual noise rate {:.4})",
        noisy.len(),
        flipped as f64 / noisy.len().max(1) as f64
    );
    Ok(())
}

pub fn nmc(input: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    require_dir(input)?;
    let kv = match config {
        Some(p) => {
            require_file(p)?;
            KvConfig::load(p)?
        }
        None => KvConfig::default(),
    };
    let base = config.and_then(Path::parent).unwrap_or(Path::new("."));
    let cfg = nmc_from_kv(&kv)?;
    let encoder = encoder_from_kv(&kv, base)?;
    kv.reject_unknown()?;
    cfg.validate()?;

    let ds = load_dataset_dir(input, "")?.ok_or_else(|| CliError::Usage(format!("no dataset in {}", input.display())))?;
    let (emb, _) = encoder.embed(&ds.features, None)?;
    let clean = ds.clean_labels.as_ref();
    let outcome = run_nmc(&emb, &ds.labels, &cfg, clean)?;

    let dest = out.map(Path::to_path_buf).unwrap_or_else(|| input.join("nmc"));
    fs::create_dir_all(&dest).map_err(StctError::from)?;
    stct_core::io::save_matrix(&dest.join("corrected_labels.stm"), outcome.corrected.as_array())?;
    stct_core::io::write_jsonl(&dest.join("nmc_trace.jsonl"), &outcome.trace.rounds)?;
    let hard = harden(&outcome.corrected);
    let acc = clean.map(|c| hard.accuracy(c)).transpose()?;
    let noisy_acc = clean.map(|c| harden(&ds.labels).accuracy(c)).transpose()?;
    write_json(
        &dest.join("summary.json"),
        &json!({
            "rounds": outcome.trace.rounds.len(),
            "stop": outcome.stop,
            "label_acc": acc,
            "noisy_label_acc": noisy_acc,
        }),
    )?;
    match acc {
        Some(a) => println!(
            "{} rounds ({:?}); label accuracy {:.4} -> {a:.4}",
            outcome.trace.rounds.len(),
            outcome.stop,
            noisy_acc.unwrap_or(f64::NAN)
        ),
        None => println!("{} rounds ({:?})", outcome.trace.rounds.len(), outcome.stop),
    }
    Ok(())
}

pub fn stct(config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    require_file(config)?;
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.out = Some(o.to_path_buf());
    }
    if cfg.out.is_none() {
        return Err(CliError::Usage("no output directory; set `out` in the config or pass --out".into()));
    }
    let output = run_stct(&cfg)?;
    for r in &output.report.epochs {
        println!("{}", epoch_line(r));
    }
    let s = &output.report.summary;
    println!(
        "done: {} epochs, corrected {}, test {}",
        s.epochs,
        fmt_opt(s.final_corrected_acc),
        fmt_opt(s.final_test_acc)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn epoch_line(r: &EpochRecord) -> String {
    format!(
        "{:>5} {:>9} {:>8} {:>9} {:>7} {:>8} {:>6}",
        r.epoch,
        fmt_opt(r.corrected_acc),
        r.selected,
        fmt_opt(r.precision),
        fmt_opt(r.recall),
        fmt_opt(r.test_acc),
        r.nmc_rounds
    )
}

pub fn verify(suite: SuiteArg, out: Option<&Path>, against: Option<&Path>) -> Result<(), CliError> {
    let suite = match suite {
        SuiteArg::Theorems => Suite::Theorems,
        SuiteArg::Gradients => Suite::Gradients,
        SuiteArg::Coverage => Suite::Coverage,
        SuiteArg::All => Suite::All,
    };
    let persisted = match against {
        Some(p) => {
            require_file(p)?;
            Some(read_reports(p)?)
        }
        None => None,
    };
    let reports = run_suite(suite)?;
    let mut failed = 0;
    for r in &reports {
        let mut ok = r.pass;
        let mut note = String::new();
        if let Some(old) = &persisted {
            match old.iter().find(|o| o.name == r.name) {
                Some(o) if !same_run(o, r) => {
                    ok = false;
                    let _ = write!(note, " (persisted run differs: {} vs {})", o.implementation_value, r.implementation_value);
                }
                None => {
                    ok = false;
                    note.push_str(" (no persisted report)");
                }
                _ => {}
            }
        }
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:<40} oracle {:<14.8} impl {:<14.8} err {:.3e}{note}",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.oracle_value,
            r.implementation_value,
            r.abs_error
        );
    }
    if let Some(p) = out {
        write_reports(p, &reports)?;
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} oracle reports failed", reports.len())));
    }
    println!("{} oracle reports passed", reports.len());
    Ok(())
}

/// Seeded reruns must reproduce the persisted values exactly.
fn same_run(a: &OracleReport, b: &OracleReport) -> bool {
    a.inputs_digest == b.inputs_digest
        && a.oracle_value.to_bits() == b.oracle_value.to_bits()
        && a.implementation_value.to_bits() == b.implementation_value.to_bits()
}

pub fn report(input: &Path) -> Result<(), CliError> {
    require_dir(input)?;
    let run = input.join("report.jsonl");
    let trace = input.join("nmc_trace.jsonl");
    if !run.exists() && !trace.exists() {
        return Err(CliError::Usage(format!("{} has neither report.jsonl nor nmc_trace.jsonl", input.display())));
    }
    let mut written: Vec<PathBuf> = Vec::new();
    if run.exists() {
        let epochs: Vec<EpochRecord> = read_jsonl(&run)?;
        println!("epoch corrected selected precision  recall     test rounds");
        let mut csv = String::from("epoch,corrected_acc,selected,precision,recall,test_acc,nmc_rounds\n");
        for r in &epochs {
            println!("{}", epoch_line(r));
            let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.epoch,
                f(r.corrected_acc),
                r.selected,
                f(r.precision),
                f(r.recall),
                f(r.test_acc),
                r.nmc_rounds
            );
        }
        let p = input.join("curves.csv");
        fs::write(&p, csv).map_err(StctError::from)?;
        written.push(p);
    }
    if trace.exists() {
        let rounds: Vec<serde_json::Value> = read_jsonl(&trace)?;
        println!("epoch round   val_loss agreement label_acc");
        let mut csv = String::from("epoch,round,val_loss,agreement,label_acc\n");
        for v in &rounds {
            let num = |k: &str| v.get(k).and_then(serde_json::Value::as_f64);
            let epoch = v.get("epoch").and_then(serde_json::Value::as_u64);
            let round = v.get("round").and_then(serde_json::Value::as_u64).unwrap_or(0);
            println!(
                "{:>5} {:>5} {:>10.6} {:>9} {:>9}",
                epoch.map_or_else(|| "-".into(), |e| e.to_string()),
                round,
                num("val_loss").unwrap_or(f64::NAN),
                fmt_opt(num("agreement")),
                fmt_opt(num("label_acc"))
            );
            let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                epoch.map(|e| e.to_string()).unwrap_or_default(),
                round,
                f(num("val_loss")),
                f(num("agreement")),
                f(num("label_acc"))
            );
        }
        let p = input.join("nmc_curves.csv");
        fs::write(&p, csv).map_err(StctError::from)?;
        written.push(p);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
