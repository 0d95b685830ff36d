use std::process::ExitCode;

use prism_core::demo::{serve_stdio, AcceptDemo};

fn main() -> ExitCode {
    serve_stdio(&AcceptDemo)
}
