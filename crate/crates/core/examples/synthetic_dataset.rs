//! Generates a small synthetic dataset, writes it in the FSOF format with its
//! sidecars, and reads it back.

use fsosr::format::{
    read_dataset, read_masks, record_bytes, write_dataset, write_masks, HEADER_BYTES,
};
use fsosr::{generate_synthetic, SyntheticConfig};

fn main() -> fsosr::Result<()> {
    let cfg = SyntheticConfig {
        items_per_class: 8,
        ..SyntheticConfig::default()
    };
    let syn = generate_synthetic(&cfg)?;
    let path = std::env::temp_dir().join("fsosr_example.fsof");
    write_dataset(&syn.dataset, &path)?;
    write_masks(&syn.masks, &path)?;

    let back = read_dataset(&path)?;
    let masks = read_masks(&path)?;
    let (h, w, d) = back.shape();
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!(
        "{} items of {h}x{w}x{d} in {} classes",
        back.len(),
        back.num_classes()
    );
    println!(
        "file size {size} bytes, expected {}",
        HEADER_BYTES + back.len() * record_bytes(h, w, d)
    );
    println!("identical after round trip: {}", back == syn.dataset);
    let fg: f64 = masks[0].values().iter().sum();
    println!("item 0 foreground covers {fg} of {} cells", h * w);
    Ok(())
}
