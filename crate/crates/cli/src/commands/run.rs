use std::path::{Path, PathBuf};

use anyhow::Result;
use cascade_core::llm_client::write_transcript;
use cascade_core::router::{write_decision_log, RunManifest};
use clap::Args;

use super::{conflicts_with_manifest, keys, BackendArgs, InputArgs, RouterArgs, Setup, BACKEND_KEYS, INPUT_KEYS, ROUTER_KEYS};
use crate::config::KeyValues;
use crate::exit::{invalid, TransportFailed};
use crate::fsio;

const OUTPUT_KEYS: &[&str] = &["out", "manifest-out", "transcript"];

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub router: RouterArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Decision log to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest to write [default: <out>.manifest.json].
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
    /// Also write the LLM request/response transcript here.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Replay the run described by this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn default_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = fsio::read_input(path)?;
    serde_json::from_slice(&bytes).map_err(|e| invalid(format!("malformed manifest {}: {e}", path.display())))
}

pub fn execute(args: RunArgs) -> Result<()> {
    let kv = KeyValues::load(
        args.inputs.config.as_deref(),
        &keys(&[INPUT_KEYS, ROUTER_KEYS, BACKEND_KEYS, OUTPUT_KEYS]),
    )?;
    let out: PathBuf = kv.required(args.out, "out")?;
    let manifest_out = kv.or(args.manifest_out, "manifest-out")?.unwrap_or_else(|| default_manifest_path(&out));
    let transcript: Option<PathBuf> = kv.or(args.transcript, "transcript")?;
    for path in [Some(&out), Some(&manifest_out), transcript.as_ref()].into_iter().flatten() {
        fsio::check_output(path)?;
    }

    let setup = match &args.manifest {
        Some(path) => {
            if conflicts_with_manifest(&args.inputs, &args.router, &args.backend) {
                return Err(invalid("--manifest fixes every run setting; drop the other input, router and backend flags"));
            }
            Setup::from_manifest(&read_manifest(path)?)?
        }
        None => Setup::resolve(&args.inputs, &args.router, &args.backend, &kv, None)?,
    };
    let backend = setup.build_backend()?;
    let output = setup.run(backend.as_deref(), &setup.router)?;

    let mut log = Vec::new();
    write_decision_log(&output.decisions, &mut log)?;
    let mut manifest = serde_json::to_vec_pretty(&setup.manifest())?;
    manifest.push(b'\n');
    fsio::write_atomic(&out, &log)?;
    fsio::write_atomic(&manifest_out, &manifest)?;
    if let Some(path) = &transcript {
        let mut bytes = Vec::new();
        write_transcript(&output.transcript, &mut bytes)?;
        fsio::write_atomic(path, &bytes)?;
    }

    let routed = output.decisions.iter().filter(|d| d.routed).count();
    let parse_failures = output
        .decisions
        .iter()
        .filter(|d| d.llm_parse_ok == Some(false) && d.llm_error.is_none())
        .count();
    eprintln!(
        "{}: {} utterances, {routed} routed, {} LLM calls, {parse_failures} unparseable replies; wrote {}",
        setup.method,
        output.decisions.len(),
        output.llm_calls(),
        out.display()
    );

    if let Some((key, err)) = output.llm_failures.first() {
        return Err(TransportFailed {
            failed: output.llm_failures.len(),
            first: format!("{key}: {err}"),
        }
        .into());
    }
    Ok(())
}
