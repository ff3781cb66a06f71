use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::robot::{simulate_trajectory, Action, Pose, Trajectory, NUM_RANGES};
use super::{generate_maze, MazeMap};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const INPUT_DIM: usize = 3 + NUM_RANGES;
pub const TARGET_DIM: usize = 4;

const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub maze_size: usize,
    pub density: f64,
    pub map_seed: u64,
    pub data_seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub traj_len: usize,
}

impl DatasetSpec {
    /// `num_traj` training trajectories with a tenth as many for validation
    /// and a fifth as many for test (at least one each).
    pub fn new(maze_size: usize, num_traj: usize, traj_len: usize, seed: u64) -> Self {
        Self {
            maze_size,
            density: 0.3,
            map_seed: seed,
            data_seed: seed,
            train: num_traj,
            val: (num_traj / 10).max(1),
            test: (num_traj / 5).max(1),
            traj_len,
        }
    }

    fn counts(&self) -> [usize; 3] {
        [self.train, self.val, self.test]
    }
}

/// Sidecar description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: DatasetSpec,
    /// Map rows, `#` black, `+` gray, `.` free; row 0 is the bottom row.
    pub rows: Vec<String>,
    pub landmarks: Vec<[f64; 2]>,
    /// Positions are divided by this to form targets.
    pub pose_scale: f64,
    /// Per-dimension mean and standard deviation of the training inputs.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub map: MazeMap,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    poses: Vec<[f64; 3]>,
    actions: Vec<[f64; 2]>,
    obs: Vec<[f64; NUM_RANGES]>,
}

impl From<&Trajectory> for Record {
    fn from(t: &Trajectory) -> Self {
        Self {
            poses: t.poses.iter().map(|p| [p.x, p.y, p.theta]).collect(),
            actions: t.actions.iter().map(|a| [a.distance, a.turn]).collect(),
            obs: t.obs.clone(),
        }
    }
}

impl From<Record> for Trajectory {
    fn from(r: Record) -> Self {
        Self {
            poses: r.poses.iter().map(|p| Pose { x: p[0], y: p[1], theta: p[2] }).collect(),
            actions: r.actions.iter().map(|a| Action { distance: a[0], turn: a[1] }).collect(),
            obs: r.obs,
        }
    }
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        serde_json::to_writer(&mut w, &Record::from(t))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let t = Trajectory::from(rec);
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

/// Per-dimension mean and population standard deviation of all step inputs.
/// Dimensions with (near) zero spread get a unit scale.
pub fn input_stats(trajs: &[Trajectory]) -> (Vec<f64>, Vec<f64>) {
    let mut sum = [0.0; INPUT_DIM];
    let mut sq = [0.0; INPUT_DIM];
    let mut n = 0usize;
    for x in trajs.iter().flat_map(Trajectory::inputs) {
        for k in 0..INPUT_DIM {
            sum[k] += x[k];
            sq[k] += x[k] * x[k];
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let v = (s / n - m * m).max(0.0).sqrt();
            if v > 1e-8 {
                v
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Simulate the three splits in memory. Trajectory `i` of split `s` uses its
/// own stream, so each trajectory is independent of the split sizes.
pub fn simulate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let map = generate_maze(spec.maze_size, spec.density, spec.map_seed)?;
    let mut splits: Vec<Vec<Trajectory>> = Vec::with_capacity(3);
    for (s, count) in spec.counts().into_iter().enumerate() {
        let trajs = (0..count)
            .map(|i| {
                let mut rng = RngStream::with_stream(spec.data_seed, ((s as u64 + 1) << 32) | i as u64);
                simulate_trajectory(&map, spec.traj_len, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        splits.push(trajs);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let (input_mean, input_std) = input_stats(&train);
    let meta = DatasetMeta {
        spec: spec.clone(),
        rows: map.rows(),
        landmarks: map.landmarks().to_vec(),
        pose_scale: spec.maze_size as f64,
        input_mean,
        input_std,
    };
    Ok(Dataset {
        meta,
        map,
        train,
        val,
        test,
    })
}

/// Simulate and write `train.jsonl`, `val.jsonl`, `test.jsonl` and
/// `metadata.json` into `dir`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    let data = simulate_dataset(spec)?;
    fs::create_dir_all(dir)?;
    for (name, trajs) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        write_trajectories(&dir.join(format!("{name}.jsonl")), trajs)?;
    }
    let meta = serde_json::to_string_pretty(&data.meta)?;
    fs::write(dir.join(METADATA_FILE), meta + "\n")?;
    Ok(data)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(METADATA_FILE))?)?;
    if meta.input_mean.len() != INPUT_DIM || meta.input_std.len() != INPUT_DIM {
        return Err(Error::Format(format!(
            "metadata normalization has {} / {} entries, expected {INPUT_DIM}",
            meta.input_mean.len(),
            meta.input_std.len()
        )));
    }
    let map = MazeMap::from_rows(&meta.rows)?.with_landmarks(meta.landmarks.clone());
    let mut splits = SPLITS
        .iter()
        .map(|name| read_trajectories(&dir.join(format!("{name}.jsonl"))))
        .collect::<Result<Vec<_>>>()?;
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        meta,
        map,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::observe;

    #[test]
    fn files_are_reproducible_and_round_trip() {
        let spec = DatasetSpec::new(8, 12, 10, 3);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let data = generate_dataset(&spec, a.path()).unwrap();
        generate_dataset(&spec, b.path()).unwrap();
        for f in ["train.jsonl", "val.jsonl", "test.jsonl", METADATA_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded.train, data.train);
        assert_eq!(loaded.test, data.test);
        assert_eq!(loaded.map, data.map);
        assert_eq!(loaded.meta, data.meta);
        assert_eq!((loaded.train.len(), loaded.val.len(), loaded.test.len()), (12, 1, 2));
    }

    #[test]
    fn inputs_have_eight_dims_and_replay() {
        let spec = DatasetSpec::new(10, 5, 20, 1);
        let data = simulate_dataset(&spec).unwrap();
        for t in &data.train {
            assert!(t.inputs().iter().all(|x| x.len() == INPUT_DIM));
            for (pose, o) in t.poses[1..].iter().zip(&t.obs) {
                let clean = observe(&data.map, pose, None).unwrap();
                for (a, b) in clean.iter().zip(o) {
                    assert!((a - b).abs() <= 0.1 + 1e-12 || (*b == 0.0 && *a <= 0.1));
                }
            }
        }
    }

    #[test]
    fn malformed_line_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"poses\": [[0,0,0]], \"actions\": [[0.2, 0]], \"obs\": []}\n").unwrap();
        assert!(matches!(read_trajectories(&p), Err(Error::Format(_))));
    }
}
