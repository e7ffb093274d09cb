use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::Parser;
use herdcount_cli::args::{Cli, Command, ServeArgs};
use herdcount_cli::commands::{dispatch, tiling};
use herdcount_cli::run::RunLog;
use herdcount_cli::service::{router, store::Store, survey::Survey, AppState};
use herdcount_cli::{CliError, Result};

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.render().to_string().trim().to_string())),
    };
    let filter = if cli.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| filter.into()))
        .with_writer(std::io::stderr)
        .init();

    let args = match &cli.command {
        Command::Tile(a) => serde_json::to_value(a),
        Command::Split(a) => serde_json::to_value(a),
        Command::Pretrain(a) => serde_json::to_value(a),
        Command::Train(a) => serde_json::to_value(a),
        Command::MineHnp(a) => serde_json::to_value(a),
        Command::Infer(a) => serde_json::to_value(a),
        Command::Prescreen(a) => serde_json::to_value(a),
        Command::Evaluate(a) => serde_json::to_value(a),
        Command::Synth(a) => serde_json::to_value(a),
        Command::Report(a) => serde_json::to_value(a),
        Command::Serve(a) => serde_json::to_value(a),
    }
    .unwrap_or_default();
    let mut log = RunLog::new(cli.command.name(), args);
    let result = match &cli.command {
        Command::Serve(a) => serve(a, &mut log),
        other => dispatch(other, &mut log),
    };
    let written = log.finish(result.as_ref().map(|_| ()));
    match (result, written) {
        (Err(e), _) => fail(&e),
        (Ok(()), Err(e)) => fail(&e),
        (Ok(()), Ok(_)) => ExitCode::SUCCESS,
    }
}

fn serve(a: &ServeArgs, log: &mut RunLog) -> Result<()> {
    log.in_dir(&a.data_root);
    let token = std::env::var("REVIEW_TOKEN").unwrap_or_default();
    if token.is_empty() {
        return Err(CliError::Config("REVIEW_TOKEN must be set to a non-empty value".into()));
    }
    let data_root = &a.data_root;
    let suite = herdcount_cli::data::DataDir::open(data_root)?.suite_tiling;
    let tiling = tiling(&a.tiling, suite)?;
    let survey = Survey::load(data_root, tiling)?;
    let store = Store::open(&data_root.join("review.sqlite"))?;
    let info = serde_json::json!({
        "data_root": data_root.display().to_string(),
        "tiling": tiling,
        "images": survey.data.images.len(),
        "flagged": survey.queue.len(),
        "detections": survey.detections.values().map(Vec::len).sum::<usize>(),
    });
    let run_id = store.register_run(&info)?;
    log.detail("survey", &info);
    log.detail("run_id", run_id);
    let addr = format!("{}:{}", a.host, a.port);
    log.detail("address", &addr);
    let state = Arc::new(AppState { survey, store, token });
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io("<runtime>", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::io(&addr, e))?;
        // record the run before blocking on requests
        log.finish(Ok(()))?;
        tracing::warn!("review API listening on http://{addr}");
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::io(&addr, e))
    })
}
