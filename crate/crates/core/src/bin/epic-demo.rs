use std::process::ExitCode;

use prism_core::demo::{serve_stdio, EpicDemo};

fn main() -> ExitCode {
    serve_stdio(&EpicDemo)
}
