//! Declarative experiment through the harness: run into a directory, then
//! export plot data.

use polya_urn::harness::{emit_plotdata, load_report, run, ExperimentConfig};

const CONFIG: &str = r#"
kind = "rate-scan"
seed = 17
replicates = 4000
delta = 0.2

[rate_scan]
big_n = [40, 80]
n = [40, 80]
directions = 32
thresholds = 32
family = { proportional = { weights = [1, 1, 2] } }
"#;

pub fn run_example() -> Result<usize, Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("polya-example-{}", std::process::id()));
    let mut config = ExperimentConfig::parse(CONFIG)?;
    config.output.dir = Some(dir.join("run"));
    let report = run(&config)?;
    println!("config hash {}", report.config_hash);

    let reloaded = load_report(&dir.join("run"))?;
    let files = emit_plotdata(&reloaded, &dir.join("plots"))?;
    let text = std::fs::read_to_string(&files[0])?;
    print!("{text}");
    std::fs::remove_dir_all(&dir)?;
    Ok(text.lines().count())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
