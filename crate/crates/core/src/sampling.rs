//! Temporal downsampling, interval bins, logical-distance windows and
//! bidirectional pair construction.
//!
//! Every draw is seeded from `(seed, trajectory_id, bin-or-window)` so a
//! trajectory's output never depends on which other trajectories were
//! processed before it. Draws within a bin are uniform without replacement
//! over an implicit pair space; candidate pairs are decoded from an index and
//! never materialized, so long trajectories stay cheap.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{FrameRef, SubtaskSkeleton, Trajectory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("trajectory `{0}` has no frames")]
    EmptyTrajectory(String),
    #[error("downsampling factor must be >= 1")]
    ZeroFactor,
    #[error("window order violation: later frame has subtask {later} < earlier {earlier}")]
    OrderViolation { earlier: usize, later: usize },
    #[error("trajectory `{0}` has no subtask skeleton")]
    NoSkeleton(String),
    #[error("frame {0} is not covered by the skeleton")]
    Uncovered(usize),
    #[error("pair uses the same frame {0} twice")]
    EqualFrames(usize),
    #[error("frame {later} is not after frame {earlier}")]
    NotLater { earlier: usize, later: usize },
}

/// Which image the ground truth marks as closer to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Img1,
    Img2,
}

impl Choice {
    pub fn token(self) -> &'static str {
        match self {
            Choice::Img1 => "img1",
            Choice::Img2 => "img2",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Choice::Img1 => Choice::Img2,
            Choice::Img2 => Choice::Img1,
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Forward, Direction::Inverse];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Inverse => "inverse",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        }
    }
}

/// Short-horizon difficulty bin over the downsampled gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IntervalBin {
    Gap5,
    Gap6,
    Gap7,
    Gap8,
    Gap9,
    Gap10,
    Gap11,
    Gap12Plus,
}

impl IntervalBin {
    pub const ALL: [IntervalBin; 8] = [
        IntervalBin::Gap5,
        IntervalBin::Gap6,
        IntervalBin::Gap7,
        IntervalBin::Gap8,
        IntervalBin::Gap9,
        IntervalBin::Gap10,
        IntervalBin::Gap11,
        IntervalBin::Gap12Plus,
    ];

    pub const MIN_GAP: usize = 5;
    pub const OPEN_GAP: usize = 12;

    /// `None` means the gap is rejected (below the smallest bin).
    pub fn from_gap(delta: usize) -> Option<Self> {
        match delta {
            0..=4 => None,
            5..=11 => Some(Self::ALL[delta - Self::MIN_GAP]),
            _ => Some(IntervalBin::Gap12Plus),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IntervalBin::Gap5 => "5",
            IntervalBin::Gap6 => "6",
            IntervalBin::Gap7 => "7",
            IntervalBin::Gap8 => "8",
            IntervalBin::Gap9 => "9",
            IntervalBin::Gap10 => "10",
            IntervalBin::Gap11 => "11",
            IntervalBin::Gap12Plus => "12+",
        }
    }

    /// Exact gap for closed bins, `None` for the open-ended one.
    pub fn exact_gap(self) -> Option<usize> {
        match self {
            IntervalBin::Gap12Plus => None,
            b => Some(b as usize + Self::MIN_GAP),
        }
    }
}

impl fmt::Display for IntervalBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for IntervalBin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IntervalBin::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| format!("unknown interval bin `{s}`"))
    }
}

/// Outcome of binning a gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binned {
    Bin(IntervalBin),
    Rejected,
}

pub fn interval_bin(delta: usize) -> Binned {
    IntervalBin::from_gap(delta).map_or(Binned::Rejected, Binned::Bin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WindowClass {
    IntraTask,
    InterTask,
    MultiTask,
}

impl WindowClass {
    pub const ALL: [WindowClass; 3] = [
        WindowClass::IntraTask,
        WindowClass::InterTask,
        WindowClass::MultiTask,
    ];

    /// Report alias: S, M or L.
    pub fn alias(self) -> &'static str {
        match self {
            WindowClass::IntraTask => "S",
            WindowClass::InterTask => "M",
            WindowClass::MultiTask => "L",
        }
    }
}

impl fmt::Display for WindowClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.alias())
    }
}

impl FromStr for WindowClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S" | "intra" | "intra_task" => Ok(WindowClass::IntraTask),
            "M" | "inter" | "inter_task" => Ok(WindowClass::InterTask),
            "L" | "multi" | "multi_task" => Ok(WindowClass::MultiTask),
            _ => Err(format!("unknown window class `{s}`")),
        }
    }
}

/// Window class of a temporally ordered pair of subtask indices.
pub fn classify_window(phi_a: usize, phi_b: usize) -> Result<WindowClass, SamplingError> {
    match phi_b.checked_sub(phi_a) {
        None => Err(SamplingError::OrderViolation {
            earlier: phi_a,
            later: phi_b,
        }),
        Some(0) => Ok(WindowClass::IntraTask),
        Some(1) => Ok(WindowClass::InterTask),
        Some(_) => Ok(WindowClass::MultiTask),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Short(IntervalBin),
    Long(WindowClass),
}

impl Level {
    pub fn is_short(self) -> bool {
        matches!(self, Level::Short(_))
    }

    pub fn kind(self) -> &'static str {
        match self {
            Level::Short(_) => "short",
            Level::Long(_) => "long",
        }
    }

    pub fn bin_or_window(self) -> &'static str {
        match self {
            Level::Short(b) => b.label(),
            Level::Long(w) => w.alias(),
        }
    }

    pub fn parse(kind: &str, cell: &str) -> Result<Self, String> {
        match kind {
            "short" => Ok(Level::Short(cell.parse()?)),
            "long" => Ok(Level::Long(cell.parse()?)),
            _ => Err(format!("unknown level `{kind}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledSequence {
    pub trajectory_id: String,
    pub factor: usize,
    pub frames: Vec<FrameRef>,
}

impl SampledSequence {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.index).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Keeps raw frames `0, factor, 2*factor, ...`.
pub fn downsample(t: &Trajectory, factor: usize) -> Result<SampledSequence, SamplingError> {
    if factor == 0 {
        return Err(SamplingError::ZeroFactor);
    }
    if t.frames.is_empty() {
        return Err(SamplingError::EmptyTrajectory(t.id.clone()));
    }
    let frames = t
        .frames
        .iter()
        .filter(|f| f.index % factor == 0)
        .cloned()
        .collect();
    Ok(SampledSequence {
        trajectory_id: t.id.clone(),
        factor,
        frames,
    })
}

/// Deterministic generator keyed on the run seed plus string components.
pub(crate) fn keyed_rng(seed: u64, keys: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for k in keys {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// A rectangular or triangular region of position pairs `(i, j)`, `i < j`.
#[derive(Debug, Clone, Copy)]
enum Block {
    /// `(i, i + gap)` for `i` in `0..count`.
    Diagonal { gap: usize, count: usize },
    /// All `i < j` within `offset..offset + n`.
    Triangle { offset: usize, n: usize },
    /// All `(a, b)` with `a` in one run and `b` in a later run.
    Rect {
        a_off: usize,
        a_n: usize,
        b_off: usize,
        b_n: usize,
    },
}

impl Block {
    fn count(self) -> usize {
        match self {
            Block::Diagonal { count, .. } => count,
            Block::Triangle { n, .. } => n * n.saturating_sub(1) / 2,
            Block::Rect { a_n, b_n, .. } => a_n * b_n,
        }
    }

    fn pair(self, k: usize) -> (usize, usize) {
        match self {
            Block::Diagonal { gap, .. } => (k, k + gap),
            Block::Triangle { offset, n } => {
                // row i holds n-1-i pairs
                let mut i = 0;
                let mut rem = k;
                while rem >= n - 1 - i {
                    rem -= n - 1 - i;
                    i += 1;
                }
                (offset + i, offset + i + 1 + rem)
            }
            Block::Rect {
                a_off, b_off, b_n, ..
            } => (a_off + k / b_n, b_off + k % b_n),
        }
    }
}

/// Union of disjoint blocks addressable by a single index.
#[derive(Debug, Default)]
struct PairSpace {
    blocks: Vec<Block>,
    ends: Vec<usize>,
}

impl PairSpace {
    fn push(&mut self, b: Block) {
        let c = b.count();
        if c > 0 {
            let end = self.len() + c;
            self.blocks.push(b);
            self.ends.push(end);
        }
    }

    fn len(&self) -> usize {
        self.ends.last().copied().unwrap_or(0)
    }

    fn pair(&self, k: usize) -> (usize, usize) {
        let bi = self.ends.partition_point(|&e| e <= k);
        let start = if bi == 0 { 0 } else { self.ends[bi - 1] };
        self.blocks[bi].pair(k - start)
    }

    /// Up to `quota` distinct pairs, uniform without replacement, in draw order.
    fn draw(&self, quota: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        let n = self.len();
        if quota == 0 || n == 0 {
            return Vec::new();
        }
        let amount = quota.min(n);
        rand::seq::index::sample(rng, n, amount)
            .into_iter()
            .map(|k| self.pair(k))
            .collect()
    }
}

fn short_space(n: usize, bin: IntervalBin) -> PairSpace {
    let mut space = PairSpace::default();
    match bin.exact_gap() {
        Some(gap) => space.push(Block::Diagonal {
            gap,
            count: n.saturating_sub(gap),
        }),
        None => {
            for gap in IntervalBin::OPEN_GAP..n {
                space.push(Block::Diagonal {
                    gap,
                    count: n - gap,
                });
            }
        }
    }
    space
}

/// Short-horizon candidate pair `(earlier, later, bin)`.
pub type ShortPair = (FrameRef, FrameRef, IntervalBin);
pub type LongPair = (FrameRef, FrameRef, WindowClass);

pub fn enumerate_short_pairs(
    seq: &SampledSequence,
    quota_per_bin: usize,
    seed: u64,
) -> Vec<ShortPair> {
    let mut out = Vec::new();
    for bin in IntervalBin::ALL {
        let space = short_space(seq.len(), bin);
        let mut rng = keyed_rng(seed, &["short", &seq.trajectory_id, bin.label()]);
        for (i, j) in space.draw(quota_per_bin, &mut rng) {
            out.push((seq.frames[i].clone(), seq.frames[j].clone(), bin));
        }
    }
    out
}

/// Number of candidate short pairs per bin, in bin order.
pub fn short_candidate_counts(n_kept: usize) -> [usize; 8] {
    IntervalBin::ALL.map(|b| short_space(n_kept, b).len())
}

fn long_spaces(
    seq: &SampledSequence,
    skeleton: &SubtaskSkeleton,
) -> Result<[PairSpace; 3], SamplingError> {
    // runs of consecutive kept positions sharing a subtask index
    let mut runs: Vec<(usize, usize, usize)> = Vec::new(); // (phi, offset, len)
    for (pos, f) in seq.frames.iter().enumerate() {
        let phi = skeleton
            .index_of(f.index)
            .ok_or(SamplingError::Uncovered(f.index))?;
        match runs.last_mut() {
            Some((p, _, len)) if *p == phi => *len += 1,
            Some((p, _, _)) if *p > phi => {
                return Err(SamplingError::OrderViolation {
                    earlier: *p,
                    later: phi,
                })
            }
            _ => runs.push((phi, pos, 1)),
        }
    }
    let mut spaces = [
        PairSpace::default(),
        PairSpace::default(),
        PairSpace::default(),
    ];
    for &(_, offset, n) in &runs {
        spaces[0].push(Block::Triangle { offset, n });
    }
    for (ai, &(phi_a, a_off, a_n)) in runs.iter().enumerate() {
        for &(phi_b, b_off, b_n) in &runs[ai + 1..] {
            let class = classify_window(phi_a, phi_b)?;
            let slot = WindowClass::ALL.iter().position(|w| *w == class).expect("class");
            spaces[slot].push(Block::Rect {
                a_off,
                a_n,
                b_off,
                b_n,
            });
        }
    }
    Ok(spaces)
}

pub fn enumerate_long_pairs(
    seq: &SampledSequence,
    skeleton: Option<&SubtaskSkeleton>,
    quota_per_window: usize,
    seed: u64,
) -> Result<Vec<LongPair>, SamplingError> {
    let skeleton = skeleton.ok_or_else(|| SamplingError::NoSkeleton(seq.trajectory_id.clone()))?;
    let spaces = long_spaces(seq, skeleton)?;
    let mut out = Vec::new();
    for (class, space) in WindowClass::ALL.into_iter().zip(spaces.iter()) {
        let mut rng = keyed_rng(seed, &["long", &seq.trajectory_id, class.alias()]);
        for (i, j) in space.draw(quota_per_window, &mut rng) {
            out.push((seq.frames[i].clone(), seq.frames[j].clone(), class));
        }
    }
    Ok(out)
}

/// Candidate counts for `[Intra, Inter, Multi]`.
pub fn long_candidate_counts(
    seq: &SampledSequence,
    skeleton: &SubtaskSkeleton,
) -> Result<[usize; 3], SamplingError> {
    let spaces = long_spaces(seq, skeleton)?;
    Ok([spaces[0].len(), spaces[1].len(), spaces[2].len()])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrientedPair {
    pub img1: FrameRef,
    pub img2: FrameRef,
    pub direction: Direction,
    pub y_gt: Choice,
    pub level: Level,
    pub task_name: String,
    pub skeleton: Option<SubtaskSkeleton>,
}

impl OrientedPair {
    /// The image-swapped, label-flipped twin.
    pub fn swapped(&self) -> Self {
        Self {
            img1: self.img2.clone(),
            img2: self.img1.clone(),
            direction: self.direction.flipped(),
            y_gt: self.y_gt.flipped(),
            level: self.level,
            task_name: self.task_name.clone(),
            skeleton: self.skeleton.clone(),
        }
    }

    pub fn trajectory_id(&self) -> &str {
        &self.img1.trajectory_id
    }
}

#[derive(Debug, Clone)]
pub struct PairMeta {
    pub level: Level,
    pub task_name: String,
    pub skeleton: Option<SubtaskSkeleton>,
}

/// Emits the forward and inverse presentation of one temporally ordered pair.
pub fn orient(
    earlier: &FrameRef,
    later: &FrameRef,
    meta: PairMeta,
) -> Result<(OrientedPair, OrientedPair), SamplingError> {
    if earlier.index == later.index {
        return Err(SamplingError::EqualFrames(earlier.index));
    }
    if later.index < earlier.index {
        return Err(SamplingError::NotLater {
            earlier: earlier.index,
            later: later.index,
        });
    }
    let forward = OrientedPair {
        img1: earlier.clone(),
        img2: later.clone(),
        direction: Direction::Forward,
        y_gt: Choice::Img2,
        level: meta.level,
        task_name: meta.task_name,
        skeleton: meta.skeleton,
    };
    let inverse = forward.swapped();
    Ok((forward, inverse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Subtask;
    use std::collections::HashSet;
    use std::path::PathBuf;

    fn traj(n: usize) -> Trajectory {
        Trajectory {
            id: "t".into(),
            task_name: "task".into(),
            frames: (0..n)
                .map(|i| FrameRef {
                    trajectory_id: "t".into(),
                    index: i,
                    path: PathBuf::from(format!("{i}.jpg")),
                    timestamp_ms: None,
                })
                .collect(),
            skeleton: None,
            source: String::new(),
        }
    }

    fn equal_skeleton(n: usize, k: usize) -> SubtaskSkeleton {
        let w = n / k;
        SubtaskSkeleton::new(
            (0..k)
                .map(|i| Subtask {
                    label: format!("s{i}"),
                    start: i * w,
                    end: if i + 1 == k { n - 1 } else { (i + 1) * w - 1 },
                })
                .collect(),
        )
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(downsample(&traj(25), 10).unwrap().kept_indices(), vec![0, 10, 20]);
        assert_eq!(downsample(&traj(5), 1).unwrap().kept_indices(), vec![0, 1, 2, 3, 4]);
        let oracle: Vec<usize> = (0..100).filter(|i| i % 7 == 0).collect();
        assert_eq!(oracle.len(), 15);
        assert_eq!(downsample(&traj(100), 7).unwrap().kept_indices(), oracle);
        assert_eq!(downsample(&traj(0), 3), Err(SamplingError::EmptyTrajectory("t".into())));
        assert_eq!(downsample(&traj(3), 0), Err(SamplingError::ZeroFactor));
    }

    #[test]
    fn interval_bin_examples() {
        assert_eq!(interval_bin(7), Binned::Bin(IntervalBin::Gap7));
        assert_eq!(interval_bin(4), Binned::Rejected);
        // membership oracle: {5..=11} are own bins, anything >= 12 is open
        let bins: Vec<&str> = vec!["5", "6", "7", "8", "9", "10", "11"];
        let oracle = |d: usize| -> Option<String> {
            if d < 5 {
                None
            } else if d <= 11 {
                Some(bins[d - 5].to_string())
            } else {
                Some("12+".into())
            }
        };
        assert_eq!(oracle(37).as_deref(), Some("12+"));
        for d in 0..200 {
            let got = IntervalBin::from_gap(d).map(|b| b.label().to_string());
            assert_eq!(got, oracle(d), "gap {d}");
        }
        assert_eq!(interval_bin(37), Binned::Bin(IntervalBin::Gap12Plus));
    }

    #[test]
    fn classify_window_examples() {
        assert_eq!(classify_window(3, 3), Ok(WindowClass::IntraTask));
        assert_eq!(classify_window(2, 3), Ok(WindowClass::InterTask));
        assert_eq!(classify_window(1, 4), Ok(WindowClass::MultiTask));
        assert!(matches!(classify_window(4, 1), Err(SamplingError::OrderViolation { .. })));
    }

    #[test]
    fn six_frames_only_bin_five() {
        let seq = downsample(&traj(6), 1).unwrap();
        let pairs = enumerate_short_pairs(&seq, 100, 1);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].0.index, pairs[0].1.index, pairs[0].2), (0, 5, IntervalBin::Gap5));
        assert!(enumerate_short_pairs(&seq, 0, 1).is_empty());
    }

    #[test]
    fn short_pairs_match_exhaustive_enumeration() {
        let seq = downsample(&traj(400), 10).unwrap(); // 40 kept
        let n = seq.len();
        let mut expected = [0usize; 8];
        for i in 0..n {
            for j in i + 1..n {
                if let Some(b) = IntervalBin::from_gap(j - i) {
                    expected[b as usize] += 1;
                }
            }
        }
        assert_eq!(short_candidate_counts(n), expected);

        // quota above every bin's size returns each candidate exactly once
        let all = enumerate_short_pairs(&seq, 10_000, 3);
        assert_eq!(all.len(), expected.iter().sum::<usize>());
        let uniq: HashSet<(usize, usize)> = all.iter().map(|p| (p.0.index, p.1.index)).collect();
        assert_eq!(uniq.len(), all.len());
        for (a, b, bin) in &all {
            let gap = (b.index - a.index) / seq.factor;
            assert_eq!(interval_bin(gap), Binned::Bin(*bin));
        }
    }

    #[test]
    fn short_pairs_are_seeded() {
        let seq = downsample(&traj(1000), 10).unwrap();
        let a = enumerate_short_pairs(&seq, 5, 11);
        let b = enumerate_short_pairs(&seq, 5, 11);
        let c = enumerate_short_pairs(&seq, 5, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn long_pairs_single_subtask() {
        let t = traj(50);
        let sk = equal_skeleton(50, 1);
        let seq = downsample(&t, 1).unwrap();
        let pairs = enumerate_long_pairs(&seq, Some(&sk), 20, 0).unwrap();
        assert!(pairs.iter().all(|p| p.2 == WindowClass::IntraTask));
        assert_eq!(pairs.len(), 20);
        assert_eq!(
            enumerate_long_pairs(&seq, None, 1, 0),
            Err(SamplingError::NoSkeleton("t".into()))
        );
    }

    #[test]
    fn long_pairs_reclassify_with_linear_scan() {
        let sk = equal_skeleton(100, 5);
        let phi = |f: usize| sk.subtasks.iter().position(|s| s.start <= f && f <= s.end).unwrap() + 1;
        let seq = downsample(&traj(100), 1).unwrap();
        let pairs = enumerate_long_pairs(&seq, Some(&sk), 10, 9).unwrap();
        assert_eq!(pairs.len(), 30);
        for (a, b, w) in &pairs {
            assert!(a.index < b.index);
            let d = phi(b.index) - phi(a.index);
            let expect = match d {
                0 => WindowClass::IntraTask,
                1 => WindowClass::InterTask,
                _ => WindowClass::MultiTask,
            };
            assert_eq!(*w, expect);
            if *w == WindowClass::MultiTask {
                assert!(d >= 2);
            }
        }
    }

    #[test]
    fn long_quota_exceeding_candidates_returns_all_once() {
        let sk = equal_skeleton(12, 3);
        let seq = downsample(&traj(12), 1).unwrap();
        let counts = long_candidate_counts(&seq, &sk).unwrap();
        assert_eq!(counts, [18, 32, 16]); // 3*C(4,2), 2*16, 16
        let all = enumerate_long_pairs(&seq, Some(&sk), 1000, 0).unwrap();
        assert_eq!(all.len(), 66);
        let uniq: HashSet<(usize, usize)> = all.iter().map(|p| (p.0.index, p.1.index)).collect();
        assert_eq!(uniq.len(), 66);
    }

    #[test]
    fn orient_examples() {
        let t = traj(61);
        let meta = PairMeta {
            level: Level::Short(IntervalBin::Gap5),
            task_name: "t".into(),
            skeleton: None,
        };
        let (f, i) = orient(&t.frames[10], &t.frames[60], meta.clone()).unwrap();
        assert_eq!((f.y_gt, i.y_gt), (Choice::Img2, Choice::Img1));
        assert_eq!(f.img1, i.img2);
        assert_eq!(f.img2, i.img1);
        assert_eq!(f.direction, Direction::Forward);
        assert_eq!(i.direction, Direction::Inverse);
        assert_eq!(i.swapped(), f);
        assert_eq!(
            orient(&t.frames[3], &t.frames[3], meta.clone()),
            Err(SamplingError::EqualFrames(3))
        );
        assert!(orient(&t.frames[4], &t.frames[3], meta).is_err());
    }

    #[test]
    fn label_balance_over_oriented_set() {
        let seq = downsample(&traj(3000), 1).unwrap();
        let pairs = enumerate_short_pairs(&seq, 125, 5);
        assert_eq!(pairs.len(), 1000);
        let mut img2 = 0;
        let mut total = 0;
        for (a, b, bin) in pairs {
            let (f, i) = orient(
                &a,
                &b,
                PairMeta {
                    level: Level::Short(bin),
                    task_name: "x".into(),
                    skeleton: None,
                },
            )
            .unwrap();
            for p in [f, i] {
                total += 1;
                if p.y_gt == Choice::Img2 {
                    img2 += 1;
                }
            }
        }
        assert_eq!(img2 * 2, total);
    }
}
