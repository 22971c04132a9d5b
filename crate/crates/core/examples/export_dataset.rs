//! Samples the rotated-centroid cluster family and writes one columnar file
//! per cluster (`x0,x1,label` per line), then reads them back.
//!
//!     cargo run --example export_dataset -- [out-dir] [samples]

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use cdfl::datagen::ClusterDistribution;
use cdfl::{LabeledDataset, ScenarioConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cdfl::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/dataset".into()));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    std::fs::create_dir_all(&dir)?;

    let d = ScenarioConfig::default().data;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dist in ClusterDistribution::family(d.clusters, d.classes, d.radius, d.sigma) {
        let data = dist.sample(n, &mut rng)?;
        let path = dir.join(format!("cluster{}.csv", dist.index));
        data.write_columnar(BufWriter::new(File::create(&path)?))?;
        let back = LabeledDataset::read_columnar(BufReader::new(File::open(&path)?), d.classes)?;
        assert_eq!(back, data);
        println!(
            "cluster {} rotated {:.1} deg: {} samples -> {}",
            dist.index,
            dist.rotation().to_degrees(),
            back.len(),
            path.display()
        );
    }
    Ok(())
}
