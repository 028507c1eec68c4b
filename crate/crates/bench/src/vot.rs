//! VOT-style evaluation with the restart protocol.
//!
//! A frame whose reported box has zero overlap with ground truth counts as
//! a failure: the failure increments robustness, the next 5 frames are
//! skipped, and the tracker reinitializes from ground truth on the frame
//! after the gap. Accuracy is the mean IoU over tracked frames, excluding
//! failure frames and the 10-frame burn-in after every (re)initialization.
//! Expected average overlap is not computed.

use mbcf_core::{BoundingBox, Frame};

use crate::metrics::iou;
use crate::sequence::Sequence;
use crate::Result;

/// Frames skipped after a failure before reinitialization.
pub const FAILURE_SKIP: usize = 5;
/// Frames after each (re)initialization excluded from accuracy.
pub const ACCURACY_BURN_IN: usize = 10;

/// Anything that can be stepped frame by frame after initialization.
pub trait SequenceTracker {
    fn track(&mut self, frame: &Frame) -> mbcf_core::Result<BoundingBox>;
}

impl SequenceTracker for mbcf_core::Tracker {
    fn track(&mut self, frame: &Frame) -> mbcf_core::Result<BoundingBox> {
        self.step(frame).map(|(b, _)| b)
    }
}

/// Outcome of one restart-protocol run.
#[derive(Debug, Clone)]
pub struct VotOutcome {
    /// Mean IoU over counted frames.
    pub accuracy: f64,
    /// Number of failures.
    pub robustness: usize,
    /// Frame indices where the tracker was (re)initialized.
    pub init_frames: Vec<usize>,
    /// IoU per frame; `None` for skipped and initialization frames.
    pub per_frame_iou: Vec<Option<f64>>,
}

/// Runs `factory`-built trackers over the sequence under the restart
/// protocol. The factory receives the initialization frame and ground-truth
/// box and must return a ready tracker.
pub fn vot_evaluate<T, F>(mut factory: F, sequence: &Sequence) -> Result<VotOutcome>
where
    T: SequenceTracker,
    F: FnMut(&Frame, BoundingBox) -> mbcf_core::Result<T>,
{
    let n = sequence.len();
    if n == 0 {
        return Err(crate::BenchError::Input("empty sequence".into()));
    }
    let mut per_frame_iou: Vec<Option<f64>> = vec![None; n];
    let mut init_frames = Vec::new();
    let mut robustness = 0usize;

    let mut index = 0usize;
    let mut tracker: Option<T> = None;
    while index < n {
        match &mut tracker {
            None => {
                let frame = sequence.frame(index)?;
                tracker = Some(factory(&frame, sequence.truth[index])?);
                init_frames.push(index);
                index += 1;
            }
            Some(t) => {
                let frame = sequence.frame(index)?;
                let reported = t.track(&frame)?;
                let overlap = iou(reported, sequence.truth[index]);
                if overlap == 0.0 {
                    robustness += 1;
                    tracker = None;
                    // Skip the gap; reinitialize on the frame after it.
                    index += FAILURE_SKIP + 1;
                } else {
                    per_frame_iou[index] = Some(overlap);
                    index += 1;
                }
            }
        }
    }

    // Mean IoU excluding burn-in frames after each initialization.
    let mut counted = Vec::new();
    for (i, maybe) in per_frame_iou.iter().enumerate() {
        if let Some(v) = maybe {
            let in_burn_in = init_frames
                .iter()
                .any(|&init| i > init && i <= init + ACCURACY_BURN_IN);
            if !in_burn_in {
                counted.push(*v);
            }
        }
    }
    let accuracy = if counted.is_empty() {
        // Degenerate (very short) sequences: fall back to all tracked frames.
        let tracked: Vec<f64> = per_frame_iou.iter().flatten().copied().collect();
        if tracked.is_empty() {
            0.0
        } else {
            tracked.iter().sum::<f64>() / tracked.len() as f64
        }
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };

    Ok(VotOutcome { accuracy, robustness, init_frames, per_frame_iou })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::FrameStore;

    /// Scripted tracker that replays a fixed trajectory.
    struct Scripted {
        boxes: Vec<BoundingBox>,
        cursor: usize,
    }

    impl SequenceTracker for Scripted {
        fn track(&mut self, _frame: &Frame) -> mbcf_core::Result<BoundingBox> {
            let b = self.boxes[self.cursor.min(self.boxes.len() - 1)];
            self.cursor += 1;
            Ok(b)
        }
    }

    fn toy_sequence(n: usize) -> Sequence {
        let truth: Vec<BoundingBox> = (0..n)
            .map(|i| BoundingBox::new(10.0 + i as f64, 20.0, 8.0, 8.0))
            .collect();
        Sequence {
            name: "toy".into(),
            frames: FrameStore::Memory(vec![Frame::filled(64, 48, 0.5); n]),
            truth,
            attributes: Vec::new(),
        }
    }

    #[test]
    fn perfect_tracker_has_zero_failures_and_unit_accuracy() {
        let seq = toy_sequence(40);
        let truth = seq.truth.clone();
        let outcome = vot_evaluate(
            |_f, init| {
                let start = truth.iter().position(|b| *b == init).unwrap();
                Ok(Scripted { boxes: truth[start + 1..].to_vec(), cursor: 0 })
            },
            &seq,
        )
        .unwrap();
        assert_eq!(outcome.robustness, 0);
        assert!((outcome.accuracy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_tracker_fails_when_the_target_leaves() {
        let seq = toy_sequence(60);
        let outcome = vot_evaluate(
            |_f, init| Ok(Scripted { boxes: vec![init; 60], cursor: 0 }),
            &seq,
        )
        .unwrap();
        assert!(outcome.robustness >= 1);
    }

    #[test]
    fn scripted_failure_at_frame_30_reinitializes_at_36() {
        let seq = toy_sequence(100);
        let truth = seq.truth.clone();
        let outcome = vot_evaluate(
            |_f, init| {
                let start = truth.iter().position(|b| *b == init).unwrap();
                let boxes: Vec<BoundingBox> = truth[start + 1..]
                    .iter()
                    .enumerate()
                    .map(|(offset, b)| {
                        let index = start + 1 + offset;
                        if index == 30 {
                            BoundingBox::new(500.0, 500.0, 8.0, 8.0)
                        } else {
                            *b
                        }
                    })
                    .collect();
                Ok(Scripted { boxes, cursor: 0 })
            },
            &seq,
        )
        .unwrap();
        assert_eq!(outcome.robustness, 1);
        assert_eq!(outcome.init_frames, vec![0, 36]);
        assert!(outcome.per_frame_iou[30].is_none());
        for i in 31..36 {
            assert!(outcome.per_frame_iou[i].is_none(), "frame {i} should be skipped");
        }
        assert!(outcome.per_frame_iou[37].is_some());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let seq = toy_sequence(50);
        let run = || {
            vot_evaluate(
                |_f, init| Ok(Scripted { boxes: vec![init; 50], cursor: 0 }),
                &seq,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.robustness, b.robustness);
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.init_frames, b.init_frames);
    }
}
