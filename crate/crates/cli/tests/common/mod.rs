#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use tvfair::ckpt::{write_checkpoint, Checkpoint, Tensor};

/// The built binary, with no inherited thread override.
pub fn tvfair() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tvfair"));
    c.env_remove("TVFAIR_THREADS");
    c
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    tvfair().current_dir(dir).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ckpt(values: &[(&str, Vec<usize>, Vec<f32>)]) -> Checkpoint {
    Checkpoint::from_tensors(
        values
            .iter()
            .map(|(n, s, v)| (n.to_string(), Tensor::from_f32(s.clone(), v).unwrap())),
    )
    .unwrap()
}

pub fn save(dir: &Path, name: &str, c: &Checkpoint) {
    write_checkpoint(c, dir.join(name)).unwrap();
}

/// Two groups, four records each: selection 3/4 vs 1/4, TPR 1 vs 1/2,
/// FPR 1/2 vs 0.
pub const TWO_GROUP_PREDS: &str = r#"{"id":"1","y_true":1,"score":0.9,"groups":{"sex":"f"}}
{"id":"2","y_true":1,"score":0.8,"groups":{"sex":"f"}}
{"id":"3","y_true":0,"score":0.7,"groups":{"sex":"f"}}
{"id":"4","y_true":0,"score":0.2,"groups":{"sex":"f"}}
{"id":"5","y_true":1,"score":0.6,"groups":{"sex":"m"}}
{"id":"6","y_true":1,"score":0.3,"groups":{"sex":"m"}}
{"id":"7","y_true":0,"score":0.1,"groups":{"sex":"m"}}
{"id":"8","y_true":0,"score":0.4,"groups":{"sex":"m"}}
"#;

/// Manifest JSON with the wall-clock field removed.
pub fn manifest_sans_duration(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("duration_secs");
    v
}
