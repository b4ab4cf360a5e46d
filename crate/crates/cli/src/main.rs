use std::process::ExitCode;

use clap::Parser;
use rehab_cli::{render_text, run, Cli, CliCommand, CliError, ServeArgs};
use rehab_core::input::SourceDescriptor;
use rehab_service::{Service, ServiceConfig, StationOptions, REAL_TIME_TICK};

fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let source: SourceDescriptor = args.source.parse().map_err(|e| CliError::Validation(format!("--source: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.listen).await.map_err(|e| CliError::Io(format!("{}: {e}", args.listen)))?;
        let svc = Service::start(ServiceConfig { root: args.root.clone(), station: StationOptions::new(source), tick: REAL_TIME_TICK })
            .map_err(|e| CliError::Io(e.to_string()))?;
        eprintln!("listening on {}", listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?);
        svc.serve(listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Io(e.to_string()))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        CliCommand::Serve(a) => serve(a).map(|()| None),
        other => run(other).map(Some),
    };
    match result {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(out)) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.report).expect("json"));
            } else {
                print!("{}", render_text(&out.report));
            }
            if out.failed { ExitCode::from(rehab_cli::EXIT_VALIDATION as u8) } else { ExitCode::SUCCESS }
        }
        Err(e) => {
            if cli.json {
                println!("{}", serde_json::json!({"error": e.to_string(), "exit_code": e.exit_code()}));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
