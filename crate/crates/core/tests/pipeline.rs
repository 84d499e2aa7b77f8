use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use funcov::covtest::all_pair_records;
use funcov::harness::config::parse_pairs;
use funcov::harness::io::{read_panel, write_panel};
use funcov::harness::{run_experiment, ExperimentConfig};
use funcov::simgen::{draw_design, draw_replication};

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_pairs(&parse_pairs(text, Path::new("test")).unwrap()).unwrap()
}

/// Plain re-reading of the CSV files, sharing no code with the harness.
fn recompute(dir: &Path) -> BTreeMap<String, (f64, f64)> {
    let truth: HashSet<(usize, usize)> = fs::read_to_string(dir.join("truth.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (j, k) = l.split_once(',').unwrap();
            (j.parse().unwrap(), k.parse().unwrap())
        })
        .collect();
    // method -> replication -> (false, total, true)
    let mut counts: BTreeMap<String, BTreeMap<usize, (usize, usize, usize)>> = BTreeMap::new();
    for line in fs::read_to_string(dir.join("decisions.csv")).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let rep: usize = f[0].parse().unwrap();
        let pair = (f[2].parse().unwrap(), f[3].parse().unwrap());
        let slot = counts.entry(f[1].to_string()).or_default().entry(rep).or_default();
        if f[7] == "1" {
            slot.1 += 1;
            if truth.contains(&pair) {
                slot.2 += 1;
            } else {
                slot.0 += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(m, reps)| {
            let b = reps.len() as f64;
            let mut fdr = 0.0;
            let mut power = 0.0;
            for (f, r, t) in reps.values() {
                fdr += *f as f64 / (*r).max(1) as f64;
                power += *t as f64 / truth.len() as f64;
            }
            (m, (fdr / b, power / b))
        })
        .collect()
}

#[test]
fn results_file_matches_an_independent_recount() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&format!(
        "model=figure1:6\nn=50\np=10\nmethods=MFC,BH,BC,hard,soft\nalpha=0.05,0.1\nreplications=5\nseed=21\nout={}",
        dir.path().display()
    ));
    let out = run_experiment(&cfg).unwrap();
    let recount = recompute(dir.path());
    assert_eq!(recount.len(), out.rows.len());
    for row in &out.rows {
        let (fdr, power) = recount[&row.method];
        assert_eq!(row.fdr, Some(fdr), "{}", row.method);
        assert_eq!(row.power, Some(power), "{}", row.method);
    }
    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(results.starts_with("method,model,n,p,observation,alpha,fdr,power,t_hat_exists,wall_seconds,completed,incomplete\n"));
    assert_eq!(results.lines().count(), 1 + out.rows.len());
}

#[test]
fn same_seed_same_decisions_other_seed_different() {
    let text = "model=dag4\nn=45\np=6\nmethods=MFG,BH,soft\nreplications=2\n";
    let a = run_experiment(&config(&format!("{text}seed=5"))).unwrap();
    let b = run_experiment(&config(&format!("{text}seed=5\nworkers=2"))).unwrap();
    let c = run_experiment(&config(&format!("{text}seed=6"))).unwrap();
    assert_eq!(a.decisions, b.decisions);
    assert_ne!(a.decisions, c.decisions);
    assert_eq!(a.truth.h1, b.truth.h1);
}

#[test]
fn panel_files_reproduce_the_test_battery() {
    let cfg = config("model=cov1\nn=30\np=5\nseed=2");
    let design = draw_design(&cfg.sim).unwrap();
    let rep = draw_replication(&cfg.sim, &design, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    write_panel(&path, &rep.panel).unwrap();
    let back = read_panel(&path).unwrap();
    assert_eq!(all_pair_records(&back).unwrap(), all_pair_records(&rep.panel).unwrap());
}
