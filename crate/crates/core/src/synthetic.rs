//! Synthetic manipulation corpora for tests, benchmarks and demos. Frames are
//! placeholder paths; [`write_corpus`] also materializes tiny files so
//! file-checking validation passes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::corpus::{Corpus, FrameRef, Subtask, SubtaskSkeleton, Trajectory, MANIFEST_VERSION};

const VERBS: [&str; 6] = ["reach", "grasp", "lift", "move", "place", "release"];
const OBJECTS: [&str; 5] = ["cup", "block", "bottle", "drawer", "towel"];

/// A trajectory of `k` subtasks with `per_subtask` raw frames each.
pub fn trajectory(id: &str, task_name: &str, k: usize, per_subtask: usize, root: &Path) -> Trajectory {
    let n = k * per_subtask;
    let frames = (0..n)
        .map(|i| FrameRef {
            trajectory_id: id.to_string(),
            index: i,
            path: root.join(id).join(format!("{i:05}.jpg")),
            timestamp_ms: Some(i as u64 * 33),
        })
        .collect();
    let subtasks = (0..k)
        .map(|j| Subtask {
            label: format!(
                "{} the {} with the {} arm",
                VERBS[j % VERBS.len()],
                OBJECTS[(j / VERBS.len()) % OBJECTS.len()],
                if j % 2 == 0 { "left" } else { "right" }
            ),
            start: j * per_subtask,
            end: (j + 1) * per_subtask - 1,
        })
        .collect();
    Trajectory {
        id: id.to_string(),
        task_name: task_name.to_string(),
        frames,
        skeleton: Some(SubtaskSkeleton::new(subtasks)),
        source: "synthetic".to_string(),
    }
}

/// `n` trajectories `traj000..`, with subtask counts cycling through
/// `2..=max_k` and `per_subtask` raw frames per subtask.
pub fn corpus(n: usize, max_k: usize, per_subtask: usize, root: &Path) -> Corpus {
    let max_k = max_k.max(1);
    let trajectories = (0..n)
        .map(|i| {
            let k = if max_k == 1 { 1 } else { 2 + i % (max_k - 1) };
            let object = OBJECTS[i % OBJECTS.len()];
            trajectory(&format!("traj{i:03}"), &format!("Tidy up the {object}"), k, per_subtask, root)
        })
        .collect();
    Corpus {
        trajectories,
        root: root.to_path_buf(),
        manifest_version: MANIFEST_VERSION.to_string(),
    }
}

/// Writes placeholder frame files and `manifest.json` under `c.root`;
/// returns the manifest path.
pub fn write_corpus(c: &Corpus) -> io::Result<PathBuf> {
    for t in &c.trajectories {
        for f in &t.frames {
            if let Some(parent) = f.path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&f.path, format!("frame {} {}\n", t.id, f.index))?;
        }
    }
    let manifest = c.root.join("manifest.json");
    c.write_manifest(&manifest)
        .map_err(|e| io::Error::other(e.to_string()))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_manifest_with, validate_corpus};

    #[test]
    fn generated_corpus_is_valid_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(4, 5, 20, dir.path());
        assert!(validate_corpus(&c, false).is_valid());
        assert_eq!(c.trajectories[0].skeleton.as_ref().unwrap().k(), 2);
        assert_eq!(c.trajectories[3].skeleton.as_ref().unwrap().k(), 5);
        let manifest = write_corpus(&c).unwrap();
        let back = load_manifest_with(&manifest, true).unwrap();
        assert_eq!(back, c);
    }
}
