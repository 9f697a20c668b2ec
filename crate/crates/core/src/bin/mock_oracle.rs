//! Analytic loss oracle speaking the stdio protocol, for tests and demos.

use clap::{Parser, ValueEnum};
use convrt_core::oracle::mock::{serve, MockMode, ServeExit, ServeOptions};
use convrt_core::oracle::PROTOCOL_VERSION;

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    /// Semantic loss = mean pixel, perceptual loss = MSE.
    MeanPixel,
    /// Cosine similarity against prompt-derived embeddings.
    Cosine,
}

#[derive(Parser, Debug)]
#[command(name = "convrt-mock-oracle", version, about = "Analytic mock loss oracle on stdin/stdout")]
struct Opts {
    #[arg(long, value_enum, default_value = "mean-pixel")]
    mode: Mode,
    /// Exit abruptly after answering this many evaluation requests.
    #[arg(long)]
    crash_after: Option<usize>,
    /// Version string announced in the hello reply.
    #[arg(long, default_value = PROTOCOL_VERSION)]
    protocol_version: String,
    /// Answer with NaN gradients.
    #[arg(long)]
    nan_grad: bool,
    /// Delay before every evaluation reply, milliseconds.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
}

fn main() {
    let o = Opts::parse();
    let opts = ServeOptions {
        mode: match o.mode {
            Mode::MeanPixel => MockMode::MeanPixel,
            Mode::Cosine => MockMode::Cosine,
        },
        crash_after: o.crash_after,
        protocol_version: o.protocol_version,
        nan_grad: o.nan_grad,
        delay_ms: o.delay_ms,
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let code = match serve(&mut stdin.lock(), &mut stdout.lock(), &opts) {
        Ok(ServeExit::Shutdown | ServeExit::EndOfStream) => 0,
        Ok(ServeExit::Crashed) => 3,
        Err(e) => {
            eprintln!("convrt-mock-oracle: {e}");
            2
        }
    };
    std::process::exit(code);
}
