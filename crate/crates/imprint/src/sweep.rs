//! The same job over several seeds, on a bounded pool of threads.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use imprint_core::engine::NeverStop;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::job::JobSpec;
use crate::models::ModelCache;
use crate::session::{best_frames_grid, run_session, SessionOptions, Status};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub status: Status,
    pub best_index: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<SeedResult>,
    /// Best frames in seed order, when any seed produced one.
    pub grid: Option<PathBuf>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Runs one session per seed under `out/seed_{seed}`. A failing seed is
/// recorded and does not affect the others.
pub fn run_sweep(spec: &JobSpec, seeds: &[u64], workers: usize, out: &Path, workdir: &Path, cache: &ModelCache) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::Usage("a sweep needs at least one seed".into()));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SeedResult>>> = Mutex::new(vec![None; seeds.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, seeds.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(k) else { break };
                let mut job = spec.clone();
                job.optimization.seed = seed;
                let dir = seed_dir(out, seed);
                let opts = SessionOptions { workdir, cache, stop: &NeverStop, notify: None };
                let r = match run_session(&job, &dir, opts) {
                    Ok(s) => SeedResult { seed, dir, status: s.status, best_index: s.best_index, error: s.error },
                    Err(e) => SeedResult { seed, dir, status: Status::Failed, best_index: None, error: Some(e.to_string()) },
                };
                results.lock().expect("sweep results")[k] = Some(r);
            });
        }
    });
    let seeds: Vec<SeedResult> = results.into_inner().expect("sweep results").into_iter().map(|r| r.expect("every seed ran")).collect();
    let dirs: Vec<PathBuf> = seeds.iter().filter(|s| s.best_index.is_some()).map(|s| s.dir.clone()).collect();
    let grid = match best_frames_grid(&dirs)? {
        Some(img) => {
            let p = out.join("grid.png");
            io::save_png(&img, &p)?;
            Some(p)
        }
        None => None,
    };
    let report = SweepReport { seeds, grid };
    io::write_bytes(&out.join("sweep.json"), serde_json::to_string_pretty(&report).expect("reports serialize").as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::job::{resolve, JobKind};
    use imprint_core::image::Image;
    use serde_json::json;

    #[test]
    fn seeds_are_isolated_and_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        io::save_png(&Image::filled(8, 8, [0.7, 0.2, 0.1]), &tmp.path().join("s.png")).unwrap();
        let spec = resolve(
            JobKind::Generate,
            &[json!({"backbone": "toy", "subject": "s.png", "class": "dog", "optimization": {"max_iterations": 7}})],
        )
        .unwrap();
        let cache = ModelCache::default();
        let out = tmp.path().join("sweep");
        let r = run_sweep(&spec, &[3, 1, 2], 2, &out, tmp.path(), &cache).unwrap();
        assert_eq!(r.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![3, 1, 2]);
        assert!(r.seeds.iter().all(|s| s.status == Status::Converged));
        let grid = io::load_image(r.grid.as_ref().unwrap()).unwrap();
        assert_eq!(grid.dims(), (8, 24));
        let again = run_sweep(&spec, &[1], 1, &tmp.path().join("again"), tmp.path(), &cache).unwrap();
        let a = std::fs::read(seed_dir(&out, 1).join("losses.jsonl")).unwrap();
        let b = std::fs::read(again.seeds[0].dir.join("losses.jsonl")).unwrap();
        assert_eq!(a, b);
        assert!(run_sweep(&spec, &[], 1, &out, tmp.path(), &cache).is_err());
    }

    #[test]
    fn a_failing_seed_does_not_sink_the_rest() {
        let tmp = tempfile::tempdir().unwrap();
        io::save_png(&Image::filled(8, 8, [0.7, 0.2, 0.1]), &tmp.path().join("s.png")).unwrap();
        let spec = resolve(JobKind::Generate, &[json!({"backbone": "toy", "subject": "s.png", "class": "dog"})]).unwrap();
        let cache = ModelCache::default();
        // Seed 5's directory is a file, so that run cannot start.
        let out = tmp.path().join("blocked");
        std::fs::create_dir_all(&out).unwrap();
        std::fs::write(seed_dir(&out, 5), b"not a dir").unwrap();
        let mut short = spec.clone();
        short.optimization.max_iterations = 7;
        let r = run_sweep(&short, &[5, 6], 2, &out, tmp.path(), &cache).unwrap();
        assert_eq!(r.seeds[0].status, Status::Failed);
        assert_eq!(r.seeds[1].status, Status::Converged);
    }
}
