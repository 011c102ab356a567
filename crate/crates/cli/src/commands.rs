use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use conceptrol::analysis::{mask_to_pgm, scan_blocks, transfer_experiment, OracleMask};
use conceptrol::engine::{generate, render_rgb, toy_conditions, Control, ToyDenoiser};
use conceptrol::Error as CoreError;

use crate::config::{RunConfig, Variant};
use crate::CliError;

/// Result of a command: whether its gate passed, plus a short report for stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub report: String,
}

/// Collects written files so the manifest can hash them.
struct Artifacts {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Registers files written by the core library under `rel_dir`.
    fn adopt_dir(&mut self, rel_dir: &str) -> Result<(), CliError> {
        let dir = self.root.join(rel_dir);
        let mut names: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        names.sort();
        for name in names {
            let path = dir.join(&name);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            self.files
                .insert(format!("{rel_dir}/{name}"), hex::encode(Sha256::digest(&bytes)));
        }
        Ok(())
    }

    fn finish(mut self, command: &str, config: &RunConfig) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            config: &'a RunConfig,
            files: &'a BTreeMap<String, String>,
        }
        let manifest = Manifest {
            command,
            config,
            files: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.files.clear();
        Ok(())
    }
}

fn control_for(variant: Variant, config: &RunConfig) -> Control {
    match variant {
        Variant::TextOnly => Control::TextOnly,
        Variant::Vanilla => Control::Vanilla {
            lambda: config.conceptrol.lambda,
        },
        Variant::Conceptrol => Control::Conceptrol(config.conceptrol_config()),
    }
}

fn instance(config: &RunConfig) -> Result<(ToyDenoiser, conceptrol::attention::ConditionSet), CliError> {
    let d = ToyDenoiser::planted(&config.engine, config.mode)?;
    let cond = toy_conditions(&config.engine, config.mode)?;
    Ok((d, cond))
}

pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    config.validate()?;
    let schedule = config.noise_schedule()?;
    let (d, cond) = instance(config)?;
    let mut artifacts = Artifacts::new(out)?;
    let (h, w) = (config.engine.height, config.engine.width);
    let mut report = String::new();
    for &seed in &config.seeds {
        for &variant in &config.variants {
            let run_id = format!("{}_seed{seed}", variant.name());
            let (latent, trace) =
                generate(&cond, &control_for(variant, config), &d, &schedule, seed)?;
            if config.emit.images {
                let image = render_rgb(&latent)?;
                artifacts.write(&format!("{run_id}.ppm"), &image.to_ppm())?;
                if let Some(last) = trace.final_step() {
                    let pgm = mask_to_pgm(last.mask.values(), w, h)?;
                    artifacts.write(&format!("{run_id}_mask.pgm"), &pgm)?;
                }
            }
            if config.emit.traces {
                let rel = format!("trace/{run_id}");
                let dir = out.join(&rel);
                // the run owns this directory; stale files would leak into the manifest
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                }
                trace.dump(&dir)?;
                artifacts.adopt_dir(&rel)?;
            }
            report.push_str(&format!("{run_id}: done\n"));
        }
    }
    artifacts.finish("generate", config)?;
    Ok(Outcome {
        passed: true,
        report,
    })
}

pub fn cmd_scan(config: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    config.validate()?;
    let schedule = config.noise_schedule()?;
    let (d, cond) = instance(config)?;
    let oracle = OracleMask::planted(&d)?;
    let planted = d.planted_block();
    let mut artifacts = Artifacts::new(out)?;
    let mut passed = true;
    let mut report = String::new();
    for &seed in &config.seeds {
        let (_, trace) = generate(&cond, &Control::TextOnly, &d, &schedule, seed)?;
        let scan = scan_blocks(&trace, cond.span(), &oracle)?;
        if config.emit.csv {
            artifacts.write(&format!("scan_seed{seed}.csv"), scan.entries_csv().as_bytes())?;
            artifacts.write(
                &format!("scan_summary_seed{seed}.csv"),
                scan.summary_csv().as_bytes(),
            )?;
        }
        let best = scan.summary[0].clone();
        passed &= best.block == planted;
        report.push_str(&format!(
            "seed {seed}: best block {} (mean auc {:.4}), planted block {planted}\n",
            best.block, best.mean_auc
        ));
    }
    artifacts.finish("scan", config)?;
    Ok(Outcome { passed, report })
}

pub fn cmd_transfer(config: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    config.validate()?;
    let schedule = config.noise_schedule()?;
    let (d, cond) = instance(config)?;
    let mut artifacts = Artifacts::new(out)?;
    let mut csv = String::from("seed,auc_transfer,status\n");
    let mut values = Vec::new();
    let mut report = String::new();
    for &seed in &config.seeds {
        match transfer_experiment(&cond, config.conceptrol.lambda, &d, &schedule, seed) {
            Ok(outcome) => {
                csv.push_str(&format!("{seed},{},ok\n", outcome.auc));
                values.push(outcome.auc);
            }
            Err(CoreError::DegenerateOracle(msg)) => {
                eprintln!("warning: seed {seed} skipped, degenerate segmentation: {msg}");
                csv.push_str(&format!("{seed},,degenerate\n"));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mean = if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    };
    let threshold = config.transfer.threshold;
    let passed = mean.is_some_and(|m| m >= threshold);
    if config.emit.csv {
        artifacts.write("transfer.csv", csv.as_bytes())?;
        let summary = format!(
            "mean_auc_transfer,seeds_used,threshold,passed\n{},{},{threshold},{passed}\n",
            mean.map_or(String::new(), |m| m.to_string()),
            values.len()
        );
        artifacts.write("transfer_summary.csv", summary.as_bytes())?;
    }
    artifacts.finish("transfer", config)?;
    report.push_str(&match mean {
        Some(m) => format!(
            "mean auc_transfer {m:.4} over {} seeds (threshold {threshold})\n",
            values.len()
        ),
        None => "no seed produced a usable segmentation\n".to_string(),
    });
    Ok(Outcome { passed, report })
}
