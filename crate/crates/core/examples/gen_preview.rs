use attnage::data::{generate_dataset, DatasetConfig};
use attnage::Profile;

fn main() {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap());
    let profile = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(Profile::Desk);
    let m = generate_dataset(&DatasetConfig::new(10, 7, profile), &out).unwrap();
    println!("{} rows", m.rows.len());
}
