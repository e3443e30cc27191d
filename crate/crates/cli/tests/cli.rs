use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

fn fedmesh() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedmesh"))
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("fedmesh runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small two-client config over the bundled corpus.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let data = repo().join("data/synthetic-disease");
    let path = dir.join("job.toml");
    std::fs::write(
        &path,
        format!(
            "[corpus]\ntrain = {:?}\ntest = {:?}\n\n[federation]\nrounds = 3\nclients = 2\n\n[train]\nlearning_rate = 0.5\nfeature_dim = 4096\n{extra}",
            data.join("train.conll"),
            data.join("test.conll"),
        ),
    )
    .unwrap();
    path
}

fn simulate(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    run(fedmesh()
        .arg("simulate")
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra))
}

#[test]
fn simulate_writes_report_and_verifiable_audit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = simulate(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("entity-strict"));
    for f in ["report.txt", "report.rows", "audit/clients-2.log"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let o = run(fedmesh()
        .arg("audit-verify")
        .arg(out.join("audit/clients-2.log")));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("ok: "));

    // `report` re-renders the same tables from the rows file.
    let o = run(fedmesh().arg("report").arg(out.join("report.rows")));
    assert!(o.status.success());
    let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.starts_with(&stdout(&o)));
}

#[test]
fn seeds_change_the_run_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let rows = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert!(simulate(&cfg, &out, &["--seed-model", seed])
            .status
            .success());
        std::fs::read(out.join("report.rows")).unwrap()
    };
    let a = rows("a", "7");
    assert_eq!(a, rows("b", "7"));
    assert_ne!(a, rows("c", "8"));
}

#[test]
fn tampered_audit_log_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    assert!(simulate(&cfg, &out, &[]).status.success());
    let log = out.join("audit/clients-2.log");
    let text = std::fs::read_to_string(&log).unwrap();
    let tampered = text.replacen("weight=", "weight=9", 1);
    assert_ne!(tampered, text);
    let bad = dir.path().join("bad.log");
    std::fs::write(&bad, tampered).unwrap();
    let o = run(fedmesh().arg("audit-verify").arg(&bad));
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("first bad seq"));

    std::fs::write(&bad, "not an audit log\n").unwrap();
    assert_eq!(
        run(fedmesh().arg("audit-verify").arg(&bad)).status.code(),
        Some(1)
    );
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "\n[partition]\nmode = \"ratio\"\nratios = [60, 30]\n",
    );
    let o = simulate(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("partition.ratios"));
}

#[test]
fn partition_writes_one_shard_per_site() {
    let dir = tempfile::tempdir().unwrap();
    let input = repo().join("data/synthetic-disease/dev.conll");
    let o = run(fedmesh()
        .arg("partition")
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(dir.path())
        .args(["--ratios", "75,25"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let counts: Vec<usize> = stdout(&o)
        .lines()
        .map(|l| {
            l.split('\t')
                .nth(1)
                .unwrap()
                .trim_start_matches("sentences=")
                .parse()
                .unwrap()
        })
        .collect();
    assert_eq!(counts, [375, 125]);
    assert!(dir.path().join("site-1.conll").exists() && dir.path().join("site-2.conll").exists());
}

fn provision(dir: &Path, roster: &str, key_seed: &str) -> PathBuf {
    let spec = dir.join("roster.toml");
    std::fs::write(&spec, roster).unwrap();
    let kits = dir.join("kits");
    let o = run(fedmesh()
        .arg("provision")
        .arg("--roster")
        .arg(&spec)
        .arg("--out")
        .arg(&kits)
        .args(["--key-seed", key_seed]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    kits
}

/// Starts `serve` on an ephemeral loopback port and returns it with the bound address.
fn start_server(kit: &Path, cfg: &Path, out: &Path) -> (Child, String) {
    let mut child = fedmesh()
        .arg("serve")
        .arg("--kit")
        .arg(kit)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .env("FEDMESH_BIND", "127.0.0.1:0")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(line.contains("listening on"), "{line}");
    (child, addr)
}

fn client(kit: &Path, cfg: &Path, addr: &str) -> Child {
    fedmesh()
        .arg("client")
        .arg("--kit")
        .arg(kit)
        .arg("--config")
        .arg(cfg)
        .args(["--server", addr])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap()
}

const ROSTER: &str = "server_addr = \"127.0.0.1:7761\"\nsites = [\"site-1\", \"site-2\"]\n";

#[test]
fn tcp_federation_over_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let kits = provision(dir.path(), ROSTER, "3");
    let cfg = write_config(dir.path(), "\n[transport]\nkind = \"tcp\"\n");
    let out = dir.path().join("out");
    let (server, addr) = start_server(&kits.join("server"), &cfg, &out);
    let clients: Vec<Child> = ["site-1", "site-2"]
        .iter()
        .map(|s| client(&kits.join(s), &cfg, &addr))
        .collect();
    for c in clients {
        let o = c.wait_with_output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(
            stdout(&o).contains("uploads=3 evaluated=true rejections=0"),
            "{}",
            stdout(&o)
        );
    }
    let o = server.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.rows").exists());
    let o = run(fedmesh().arg("audit-verify").arg(out.join("audit.log")));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn client_with_foreign_key_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let kits = provision(dir.path(), ROSTER, "3");
    let other = tempfile::tempdir().unwrap();
    let foreign = provision(other.path(), ROSTER, "4");
    let cfg = write_config(dir.path(), "");
    let (mut server, addr) = start_server(&kits.join("server"), &cfg, &dir.path().join("out"));
    let o = client(&foreign.join("site-1"), &cfg, &addr)
        .wait_with_output()
        .unwrap();
    server.kill().unwrap();
    server.wait().unwrap();
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn server_kit_cannot_run_a_client() {
    let dir = tempfile::tempdir().unwrap();
    let kits = provision(dir.path(), ROSTER, "3");
    let cfg = write_config(dir.path(), "");
    let o = client(&kits.join("server"), &cfg, "127.0.0.1:1")
        .wait_with_output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
