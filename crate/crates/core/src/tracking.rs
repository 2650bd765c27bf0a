//! Detection boxes and constant-velocity Kalman tracking.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand_model::HandSide;

/// Axis-aligned box `[x_min, y_min, x_max, y_max]` in pixels.
pub type BBox = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    HandLeft,
    HandRight,
    Object,
}

impl DetectionKind {
    pub fn hand(side: HandSide) -> Self {
        match side {
            HandSide::Left => DetectionKind::HandLeft,
            HandSide::Right => DetectionKind::HandRight,
        }
    }

    pub fn side(&self) -> Option<HandSide> {
        match self {
            DetectionKind::HandLeft => Some(HandSide::Left),
            DetectionKind::HandRight => Some(HandSide::Right),
            DetectionKind::Object => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DetectionKind::HandLeft => "hand_left",
            DetectionKind::HandRight => "hand_right",
            DetectionKind::Object => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub kind: DetectionKind,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl Detection {
    pub fn new(kind: DetectionKind, score: f64, bbox: BBox) -> Result<Self> {
        let d = Self { kind, score, bbox };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::DegenerateEvidence(format!("box {:?} has no area", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::DegenerateEvidence(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub kind: DetectionKind,
    pub start: usize,
    pub end: usize,
    /// One entry per frame in `start..=end`.
    pub boxes: Vec<TrackBox>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn box_at(&self, frame: usize) -> Option<&TrackBox> {
        frame.checked_sub(self.start).and_then(|i| self.boxes.get(i))
    }
}

/// Detections observed in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub iou_threshold: f64,
    /// A track ends once it has gone unmatched for more than this many frames.
    pub max_missed: usize,
    pub velocity_process_noise: f64,
    pub measurement_noise: f64,
    pub initial_velocity_variance: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            max_missed: 5,
            velocity_process_noise: 1e-2,
            measurement_noise: 1.0,
            initial_velocity_variance: 10.0,
        }
    }
}

type State = SVector<f64, 6>;
type Cov = SMatrix<f64, 6, 6>;

/// Small process noise on box coordinates keeps the covariance well
/// conditioned for the smoother.
const BOX_PROCESS_NOISE: f64 = 1e-6;

fn transition() -> Cov {
    let mut f = Cov::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f
}

fn to_measurement(b: &BBox) -> SVector<f64, 4> {
    SVector::<f64, 4>::new(
        (b[0] + b[2]) / 2.0,
        (b[1] + b[3]) / 2.0,
        b[2] - b[0],
        b[3] - b[1],
    )
}

fn to_box(x: &State) -> BBox {
    let (cx, cy, w, h) = (x[0], x[1], x[2].max(0.0), x[3].max(0.0));
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

struct Step {
    frame: usize,
    observed: Option<BBox>,
    predicted: (State, Cov),
    filtered: (State, Cov),
}

struct ActiveTrack {
    steps: Vec<Step>,
    missed: usize,
}

impl ActiveTrack {
    fn current(&self) -> &(State, Cov) {
        &self.steps.last().unwrap().filtered
    }
}

struct Filter {
    f: Cov,
    q: Cov,
    r: SMatrix<f64, 4, 4>,
    init_velocity_variance: f64,
}

impl Filter {
    fn new(cfg: &TrackerConfig) -> Self {
        let mut q = Cov::from_diagonal_element(BOX_PROCESS_NOISE);
        q[(4, 4)] = cfg.velocity_process_noise;
        q[(5, 5)] = cfg.velocity_process_noise;
        Self {
            f: transition(),
            q,
            r: SMatrix::<f64, 4, 4>::identity() * cfg.measurement_noise,
            init_velocity_variance: cfg.initial_velocity_variance,
        }
    }

    fn init(&self, b: &BBox) -> (State, Cov) {
        let z = to_measurement(b);
        let x = State::new(z[0], z[1], z[2], z[3], 0.0, 0.0);
        let mut p = Cov::zeros();
        for i in 0..4 {
            p[(i, i)] = self.r[(i, i)];
        }
        p[(4, 4)] = self.init_velocity_variance;
        p[(5, 5)] = self.init_velocity_variance;
        (x, p)
    }

    fn predict(&self, (x, p): &(State, Cov)) -> (State, Cov) {
        (self.f * x, self.f * p * self.f.transpose() + self.q)
    }

    fn update(&self, (x, p): &(State, Cov), b: &BBox) -> (State, Cov) {
        let h = SMatrix::<f64, 4, 6>::identity();
        let y = to_measurement(b) - h * x;
        let s = h * p * h.transpose() + self.r;
        let Some(s_inv) = s.try_inverse() else {
            return (*x, *p);
        };
        let k = p * h.transpose() * s_inv;
        let x = x + k * y;
        let p = (Cov::identity() - k * h) * p;
        (x, (p + p.transpose()) / 2.0)
    }

    /// Rauch-Tung-Striebel smoothing over a contiguous run of steps.
    fn smooth(&self, steps: &[Step]) -> Vec<State> {
        let n = steps.len();
        let mut xs: Vec<State> = steps.iter().map(|s| s.filtered.0).collect();
        let mut ps: Vec<Cov> = steps.iter().map(|s| s.filtered.1).collect();
        for t in (0..n.saturating_sub(1)).rev() {
            let (xp, pp) = &steps[t + 1].predicted;
            let Some(pp_inv) = pp.try_inverse() else {
                continue;
            };
            let c = steps[t].filtered.1 * self.f.transpose() * pp_inv;
            xs[t] = steps[t].filtered.0 + c * (xs[t + 1] - xp);
            ps[t] = steps[t].filtered.1 + c * (ps[t + 1] - pp) * c.transpose();
        }
        xs
    }
}

fn finish(kind: DetectionKind, mut t: ActiveTrack, filter: &Filter) -> Track {
    while t.steps.last().is_some_and(|s| s.observed.is_none()) {
        t.steps.pop();
    }
    let smoothed = filter.smooth(&t.steps);
    let start = t.steps[0].frame;
    let boxes: Vec<TrackBox> = t
        .steps
        .iter()
        .zip(&smoothed)
        .map(|(s, x)| match s.observed {
            Some(b) => TrackBox { bbox: b, imputed: false },
            None => TrackBox {
                bbox: to_box(x),
                imputed: true,
            },
        })
        .collect();
    Track {
        kind,
        start,
        end: start + boxes.len() - 1,
        boxes,
    }
}

/// Tracks every detection kind independently. Frames absent from the input
/// count as frames without detections. Output is sorted by kind, then start
/// frame, then creation order.
pub fn kalman_track(frames: &[FrameDetections], cfg: &TrackerConfig) -> Vec<Track> {
    let (Some(first), Some(last)) = (
        frames.iter().map(|f| f.frame_index).min(),
        frames.iter().map(|f| f.frame_index).max(),
    ) else {
        return Vec::new();
    };
    let filter = Filter::new(cfg);
    let mut out = Vec::new();
    for kind in [DetectionKind::HandLeft, DetectionKind::HandRight, DetectionKind::Object] {
        let mut per_frame: Vec<Vec<BBox>> = vec![Vec::new(); last - first + 1];
        for f in frames {
            per_frame[f.frame_index - first].extend(f.detections.iter().filter(|d| d.kind == kind).map(|d| d.bbox));
        }
        if per_frame.iter().all(|d| d.is_empty()) {
            continue;
        }
        let mut active: Vec<ActiveTrack> = Vec::new();
        let mut done: Vec<Track> = Vec::new();
        for (offset, dets) in per_frame.iter().enumerate() {
            let frame = first + offset;
            let predictions: Vec<(State, Cov)> = active.iter().map(|t| filter.predict(t.current())).collect();
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (ti, pred) in predictions.iter().enumerate() {
                let pb = to_box(&pred.0);
                for (di, d) in dets.iter().enumerate() {
                    let iou = box_iou(&pb, d);
                    if iou >= cfg.iou_threshold {
                        pairs.push((iou, ti, di));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut track_match = vec![None; active.len()];
            let mut det_used = vec![false; dets.len()];
            for (_, ti, di) in pairs {
                if track_match[ti].is_none() && !det_used[di] {
                    track_match[ti] = Some(di);
                    det_used[di] = true;
                }
            }
            let mut next = Vec::with_capacity(active.len());
            for ((mut t, pred), m) in active.into_iter().zip(predictions).zip(track_match) {
                match m {
                    Some(di) => {
                        let filtered = filter.update(&pred, &dets[di]);
                        t.steps.push(Step {
                            frame,
                            observed: Some(dets[di]),
                            predicted: pred,
                            filtered,
                        });
                        t.missed = 0;
                        next.push(t);
                    }
                    None => {
                        t.missed += 1;
                        t.steps.push(Step {
                            frame,
                            observed: None,
                            predicted: pred,
                            filtered: pred,
                        });
                        if t.missed > cfg.max_missed {
                            done.push(finish(kind, t, &filter));
                        } else {
                            next.push(t);
                        }
                    }
                }
            }
            active = next;
            for (di, d) in dets.iter().enumerate() {
                if !det_used[di] {
                    let init = filter.init(d);
                    active.push(ActiveTrack {
                        steps: vec![Step {
                            frame,
                            observed: Some(*d),
                            predicted: init,
                            filtered: init,
                        }],
                        missed: 0,
                    });
                }
            }
        }
        done.extend(active.into_iter().map(|t| finish(kind, t, &filter)));
        done.sort_by_key(|t| t.start);
        out.extend(done);
    }
    out
}

/// Keeps tracks strictly longer than `min_len` frames.
pub fn select_tracks(tracks: Vec<Track>, min_len: usize) -> Vec<Track> {
    tracks.into_iter().filter(|t| t.len() > min_len).collect()
}

/// Known per-clip composition of the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedScene {
    pub n_hands: usize,
    pub sides: Vec<HandSide>,
    pub object_present: bool,
}

/// Returns the detections when their composition matches `expected`, or
/// `None` when the frame must be discarded.
pub fn validate_frame(detections: &[Detection], expected: &ExpectedScene) -> Option<Vec<Detection>> {
    let count = |k: DetectionKind| detections.iter().filter(|d| d.kind == k).count();
    let hands = count(DetectionKind::HandLeft) + count(DetectionKind::HandRight);
    let want = |side: HandSide| expected.sides.iter().filter(|&&s| s == side).count();
    let ok = hands == expected.n_hands
        && count(DetectionKind::HandLeft) == want(HandSide::Left)
        && count(DetectionKind::HandRight) == want(HandSide::Right)
        && count(DetectionKind::Object) == usize::from(expected.object_present);
    ok.then(|| detections.to_vec())
}
