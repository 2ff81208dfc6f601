//! Runs one question against one image and writes the artifacts.
//!
//! Exit codes: 0 answered, 1 refused or degraded, 2 bad configuration.
//! Only the answer text goes to stdout.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::Parser;
use keyfield::backends::mock::{self, FixtureSet, Transcript};
use keyfield::backends::{BackendConfig, BackendMode, Backends};
use keyfield::pipeline::QueryStatus;
use keyfield::{Pipeline, PipelineConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_DEGRADED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Emit {
    Overlay,
    Session,
    Transcripts,
}

impl FromStr for Emit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "overlay" => Ok(Emit::Overlay),
            "session" => Ok(Emit::Session),
            "transcripts" => Ok(Emit::Transcripts),
            other => Err(format!("unknown artifact {other:?} (overlay, session, transcripts)")),
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "keyfield", about = "Answer a question about an image and highlight where to act")]
pub struct CliConfig {
    /// Image to analyze.
    #[arg(long)]
    pub image: PathBuf,
    /// Question about the image.
    #[arg(long)]
    pub question: String,
    /// Backend mode: live or mock. Live endpoints come from the environment.
    #[arg(long, default_value = "mock", value_parser = parse_mode)]
    pub backend: BackendMode,
    /// Fixture directory, required in mock mode.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Artifacts to write, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "overlay,session")]
    pub emit: Vec<Emit>,
}

fn parse_mode(s: &str) -> Result<BackendMode, String> {
    s.parse().map_err(|e: keyfield::backends::ConfigError| e.to_string())
}

fn backends(config: &CliConfig) -> Result<Backends, String> {
    match config.backend {
        BackendMode::Mock => {
            let dir = config
                .fixtures
                .as_ref()
                .ok_or("mock mode requires --fixtures")?;
            let fixtures = FixtureSet::load(dir).map_err(|e| e.to_string())?;
            Ok(mock::backends(Arc::new(fixtures)))
        }
        BackendMode::Live => {
            let mut cfg = BackendConfig::from_env().map_err(|e| e.to_string())?;
            cfg.mode = BackendMode::Live;
            Backends::from_config(&cfg).map_err(|e| e.to_string())
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), String> {
    fs::write(path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Runs the pipeline once. `stdout` receives the answer text, `stderr`
/// everything else.
pub fn run(config: &CliConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8 {
    let mut diag = |msg: String| {
        let _ = writeln!(stderr, "{msg}");
    };
    let backends = match backends(config) {
        Ok(b) => b,
        Err(e) => {
            diag(format!("configuration error: {e}"));
            return EXIT_CONFIG;
        }
    };
    let image = match fs::read(&config.image) {
        Ok(b) => b,
        Err(e) => {
            diag(format!("cannot read {}: {e}", config.image.display()));
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = fs::create_dir_all(&config.out) {
        diag(format!("cannot create {}: {e}", config.out.display()));
        return EXIT_CONFIG;
    }
    let emit: BTreeSet<Emit> = config.emit.iter().copied().collect();

    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let pipeline = Pipeline::new(backends, PipelineConfig::default());
    let outcome = runtime.block_on(async {
        let mut session = pipeline.detect_objects(image).await?;
        pipeline.answer_query(&mut session, &config.question).await?;
        Ok::<_, keyfield::PipelineError>(session)
    });
    let session = match outcome {
        Ok(s) => s,
        Err(e) => {
            diag(format!("pipeline error: {e}"));
            return EXIT_DEGRADED;
        }
    };
    let record = session.history.last().expect("one query answered");

    let mut artifacts = Vec::new();
    if emit.contains(&Emit::Overlay) && record.result.has_highlight() {
        artifacts.push(("overlay.png", record.result.annotated_image.clone()));
    }
    if emit.contains(&Emit::Session) {
        artifacts.push(("session.json", (session.to_json() + "\n").into_bytes()));
    }
    if emit.contains(&Emit::Transcripts) {
        let transcripts: Vec<Transcript> = record
            .exchanges
            .iter()
            .map(|x| Transcript::new(x.messages.clone(), x.reply.clone()))
            .collect();
        let text = serde_json::to_string_pretty(&transcripts).expect("transcripts serialize");
        artifacts.push(("transcripts.json", (text + "\n").into_bytes()));
    }
    for (name, bytes) in artifacts {
        if let Err(e) = write(&config.out.join(name), &bytes) {
            diag(e);
            return EXIT_CONFIG;
        }
    }

    let _ = writeln!(stdout, "{}", record.result.answer_text);
    if let Some(f) = &record.failure {
        diag(format!("degraded at {}: {}", f.stage, f.message));
    }
    match record.status {
        QueryStatus::Highlighted | QueryStatus::Answered => EXIT_OK,
        QueryStatus::Refused | QueryStatus::Failed => EXIT_DEGRADED,
    }
}
