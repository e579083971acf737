use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let inv = match bootrank_cli::parse(std::env::args_os()) {
        Ok(inv) => inv,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match bootrank_cli::run(&inv) {
        Ok((stdout, warnings)) => {
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let mut out = std::io::stdout().lock();
            if out.write_all(stdout.as_bytes()).and_then(|_| out.flush()).is_err() {
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
