use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
classes = 3
per_class = 10
side = 16

[probe]
epochs = 10

[ssl]
epochs = 1
"#;

struct Lab {
    dir: tempfile::TempDir,
}

impl Lab {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Lab { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hyperdiv"))
            .args(args)
            .env_remove("HYPERDIV_OUT")
            .env_remove("RUST_LOG")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

fn trained(lab: &Lab) -> PathBuf {
    let o = lab.run(&["train", "-c", "tiny.toml", "-o", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    lab.path("run/encoder.hdv")
}

#[test]
fn missing_config_is_a_usage_error() {
    let lab = Lab::new();
    let o = lab.run(&["train", "-c", "nowhere.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.toml"));
}

#[test]
fn bad_flags_and_keys_are_usage_errors() {
    let lab = Lab::new();
    assert_eq!(
        code(&lab.run(&["train", "-c", "tiny.toml", "--set", "ssl.nonsense=1"])),
        2
    );
    assert_eq!(code(&lab.run(&["frobnicate"])), 2);
    assert_eq!(code(&lab.run(&["--help"])), 0);
    let ckpt = trained(&lab);
    let c = ckpt.to_str().unwrap();
    assert_eq!(
        code(&lab.run(&["diversity", "-c", "tiny.toml", "--checkpoint", c, "--tap", "res3"])),
        2
    );
    let o = lab.run(&["diversity", "-c", "tiny.toml", "--checkpoint", c, "--n", "10000"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--n"));
    assert_eq!(code(&lab.run(&["probe", "--checkpoint", "missing.hdv"])), 2);
}

#[test]
fn train_writes_checkpoints_and_stats() {
    let lab = Lab::new();
    let o = lab.run(&[
        "train",
        "-c",
        "tiny.toml",
        "-o",
        "run",
        "--set",
        "ssl.checkpoint_every=1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(lab.path("run/encoder.hdv").exists());
    assert!(lab.path("run/encoder.hdv.json").exists());
    assert!(lab.path("run/checkpoints/epoch_0001.hdv").exists());
    let stats = lines(&lab.path("run/stats.csv"));
    assert_eq!(stats[0], "epoch,loss");
    assert_eq!(stats.len(), 2);

    let o = lab.run(&["train", "-c", "tiny.toml", "-o", "zero", "--set", "ssl.epochs=0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(lines(&lab.path("zero/stats.csv")), vec!["epoch,loss"]);
}

#[test]
fn output_dir_from_environment() {
    let lab = Lab::new();
    let o = Command::new(env!("CARGO_BIN_EXE_hyperdiv"))
        .args(["train", "-c", "tiny.toml", "--set", "ssl.epochs=0"])
        .env("HYPERDIV_OUT", "from-env")
        .current_dir(lab.dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(lab.path("from-env/stats.csv").exists());
}

#[test]
fn diversity_rows() {
    let lab = Lab::new();
    let ckpt = trained(&lab);
    let c = ckpt.to_str().unwrap();

    let o = lab.run(&[
        "diversity",
        "-c",
        "tiny.toml",
        "--checkpoint",
        c,
        "--n",
        "1",
        "-o",
        "one",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = lines(&lab.path("one/diversity.csv"));
    assert_eq!(
        rows[0],
        "layer,s,N,D,raw_energy,pair_mean_energy,diversity,duplicate_warning"
    );
    for r in &rows[1..] {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!((f[2], f[4], f[5]), ("1", "0", "0"), "{r}");
    }

    let args = [
        "diversity",
        "-c",
        "tiny.toml",
        "--checkpoint",
        c,
        "--s",
        "0",
        "--s",
        "1",
        "--s",
        "2",
    ];
    let o = lab.run(&[&args[..], &["-o", "a"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(lines(&lab.path("a/diversity.csv")).len(), 1 + 12);
    lab.run(&[&args[..], &["-o", "b"]].concat());
    assert_eq!(
        fs::read(lab.path("a/diversity.csv")).unwrap(),
        fs::read(lab.path("b/diversity.csv")).unwrap()
    );

    let o = lab.run(&[
        "diversity",
        "--checkpoint",
        c,
        "--source",
        "weights",
        "--tap",
        "head",
        "--s",
        "1",
        "-o",
        "w",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = lines(&lab.path("w/diversity.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("head,1,128,"));
}

#[test]
fn probe_writes_result() {
    let lab = Lab::new();
    let ckpt = trained(&lab);
    let o = lab.run(&[
        "probe",
        "-c",
        "tiny.toml",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "-o",
        "p",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = lines(&lab.path("p/probe.csv"));
    assert_eq!(rows[0], "tap,test_error,train_error,epochs,num_classes");
    assert!(rows[1].starts_with("head,") && rows[1].ends_with(",10,3"));
}

#[test]
fn sweep_resume_and_plot() {
    let lab = Lab::new();
    let sweep = [
        "sweep",
        "-c",
        "tiny.toml",
        "--set",
        "sweep.widths=[1, 2]",
        "--set",
        "sweep.epochs=[0, 1]",
    ];
    let o = lab.run(&[&sweep[..], &["-o", "s1", "--jobs", "1"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("2 cells pending"));
    let o = lab.run(&[&sweep[..], &["-o", "s4", "--jobs", "4"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = fs::read(lab.path("s1/records.csv")).unwrap();
    assert_eq!(records, fs::read(lab.path("s4/records.csv")).unwrap());
    assert_eq!(lines(&lab.path("s1/records.csv")).len(), 1 + 4);

    let o = lab.run(&[&sweep[..], &["-o", "s1", "--resume"]].concat());
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("0 cells pending"));
    assert_eq!(fs::read(lab.path("s1/records.csv")).unwrap(), records);

    let o = lab.run(&["plot", "-o", "s1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "epoch_curves_w1.svg",
        "epoch_curves_w2.svg",
        "size_scan.svg",
        "algo_scatter.svg",
    ] {
        assert!(lab.path("s1/plots").join(f).exists(), "{f}");
    }
    let o = lab.run(&["plot", "-o", "s4", "--kind", "size_scan"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(lab.path("s1/plots/size_scan.svg")).unwrap(),
        fs::read(lab.path("s4/plots/size_scan.svg")).unwrap()
    );
}

#[test]
fn plot_without_records() {
    let lab = Lab::new();
    fs::write(lab.path("empty.csv"), "").unwrap();
    let o = lab.run(&["plot", "--records", "empty.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no records"));
    fs::write(
        lab.path("header.csv"),
        "fingerprint,algorithm,depth,width,norm,seed,epoch,params,test_error,dup_warn,wall_s\n",
    )
    .unwrap();
    let o = lab.run(&["plot", "--records", "header.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no records"));
}
