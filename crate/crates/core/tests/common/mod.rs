#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_lssdm");

pub fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Runs and returns stdout, failing with stderr otherwise.
pub fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "`lssdm {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A run configuration small enough for quick tests. `data` names a
/// directory holding `data.csv` and `graph.json`.
pub fn small_config(data: Option<&Path>) -> String {
    let paths = data.map_or(String::new(), |d| {
        format!(
            "csv = \"{}\"\ngraph = \"{}\"\n",
            d.join("data.csv").display(),
            d.join("graph.json").display()
        )
    });
    format!(
        r#"seed = 7
[data]
{paths}window_len = 16
[synth]
n_sensors = 4
n_steps = 16
n_windows = 30
[arch]
latent_dim = 4
hidden_dim = 8
head_mode = "linear-heads"
decoder_heads = 2
noise_channels = 4
noise_blocks = 1
noise_heads = 1
step_embed_dim = 8
time_embed_dim = 4
[schedule]
steps = 10
[train]
epochs = 5
batch_size = 8
learning_rate = 1e-3
kl_weight = 1e-3
valid_samples = 2
sample_batch = 2
[eval]
n_samples = 6
sample_batch = 4
"#
    )
}

/// Copy of a CSV with every third row missing one cell and the last five
/// rows dropped, so the final window is partial.
pub fn with_gaps(src: &Path, dst: &Path) {
    let text = fs::read_to_string(src).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines.truncate(lines.len() - 5);
    for (i, l) in lines.iter_mut().enumerate().skip(1) {
        let mut cells: Vec<String> = l.split(',').map(str::to_string).collect();
        let j = 1 + i % (cells.len() - 1);
        if i % 3 == 0 {
            cells[j].clear();
        }
        *l = cells.join(",");
    }
    fs::write(dst, lines.join("\n") + "\n").unwrap();
}

/// Synthesizes small data into `root/data` (with gaps) and writes
/// `root/run.toml` pointing at it.
pub fn small_setup(root: &Path) -> std::path::PathBuf {
    let synth_cfg = root.join("synth.toml");
    fs::write(&synth_cfg, small_config(None)).unwrap();
    ok(
        root,
        &["synth", "--config", synth_cfg.to_str().unwrap(), "--out", "synth"],
    );
    let data = root.join("data");
    fs::create_dir_all(&data).unwrap();
    with_gaps(&root.join("synth/data.csv"), &data.join("data.csv"));
    fs::copy(root.join("synth/graph.json"), data.join("graph.json")).unwrap();
    let cfg = root.join("run.toml");
    fs::write(&cfg, small_config(Some(&data))).unwrap();
    cfg
}
