//! Runs the shipped four-class synthetic LOCO suite and prints the table.
//!
//! cargo run --example loco_suite -- [OUT_DIR] [SCENARIO]

use std::path::PathBuf;

use coreseg::experiment::{toy_config, Pipeline};

fn main() -> coreseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("coreseg-toy"));
    let pipeline = Pipeline::new(toy_config(), &out, true);
    if let Some(scenario) = args.next() {
        pipeline.write_config()?;
        let report = pipeline.run_scenario(&scenario)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let start = std::time::Instant::now();
    let suite = pipeline.run_suite()?;
    print!("{}", suite.to_csv());
    println!("wrote {} in {:.0?}", out.join("summary.html").display(), start.elapsed());
    Ok(())
}
