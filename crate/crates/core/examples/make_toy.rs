//! Regenerates the bundled toy inputs: `cargo run --example make_toy -- data/toy`.

use std::path::PathBuf;

fn main() {
    let dir = std::env::args_os().nth(1).map_or_else(|| PathBuf::from("data/toy"), PathBuf::from);
    if let Err(e) = causalgrid::pipeline::toy::write_toy_inputs(&dir) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
    println!("toy inputs written to {}", dir.display());
}
