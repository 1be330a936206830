//! Saving and loading networks in the `TKD1` checkpoint format.
//!
//! ```bash
//! cargo run --example checkpoints
//! ```

use std::fs;

use trikd::cli::checkpoint::{load_checkpoint, save_checkpoint, MAGIC};
use trikd::nn::{ArchitectureSpec, Network};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("student.ckpt");
    let net = Network::init(&ArchitectureSpec::mlp(2, 5, &[64, 64], 0.5), 11).unwrap();
    save_checkpoint(&net, 3, &path).unwrap();

    let bytes = fs::read(&path).unwrap();
    println!("{} bytes, magic {:?}, {} parameters", bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap(), net.param_count());
    let tail = &bytes[bytes.len() - 120..];
    let block = String::from_utf8_lossy(tail);
    println!("architecture block:\n{}", &block[block.find("kind=").unwrap()..]);

    let back = load_checkpoint(&path).unwrap();
    println!("generation {}, seed {}, bitwise equal: {}", back.generation, back.network.seed(), back.network.same_params(&net));

    let mut corrupt = bytes.clone();
    corrupt[..4].copy_from_slice(b"PK\x03\x04");
    fs::write(&path, &corrupt).unwrap();
    println!("corrupt magic: {}", load_checkpoint(&path).unwrap_err());
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    println!("truncated: {}", load_checkpoint(&path).unwrap_err());
    assert_eq!(&bytes[..4], MAGIC);
}
