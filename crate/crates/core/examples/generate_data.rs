//! Generates the default synthetic dataset, writes it to a temporary
//! directory and reads it back.

use dcl::config::Config;
use dcl::synthdata::{empirical_mutual_information, generate_dataset, read_dataset, write_dataset, SplitName};

fn main() -> dcl::error::Result<()> {
    let config = Config::default();
    let ds = generate_dataset(&config, 1)?;
    for name in SplitName::ALL {
        let split = ds.split(name);
        println!("{:<5} {:>4} pairs, label mean {:.3}", name.as_str(), split.len(), split.label_mean());
    }
    let material: Vec<usize> = ds.objects.iter().map(|o| o.material).collect();
    let motion: Vec<usize> = ds.objects.iter().map(|o| o.motion_type).collect();
    println!("I(material; motion) over objects = {:.4} nats", empirical_mutual_information(&material, &motion));

    let dir = std::env::temp_dir().join(format!("dcl-example-data-{}", std::process::id()));
    write_dataset(&ds, &dir)?;
    let back = read_dataset(&dir)?;
    println!("hash {}", ds.content_hash());
    println!("round trip exact: {}", back == ds);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
