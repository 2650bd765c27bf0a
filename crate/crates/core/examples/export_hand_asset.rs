//! Regenerates the bundled test hand asset:
//! `cargo run -p hofit-core --example export_hand_asset -- crates/core/assets/hand_right.hma`

use std::path::PathBuf;

use hofit::hand_model::{procedural_hand, HandSide};

fn main() -> hofit::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("hand_right.hma"));
    procedural_hand(HandSide::Right).save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
