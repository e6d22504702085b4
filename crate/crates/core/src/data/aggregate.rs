use std::ops::Range;

use super::manifest::RaterRecord;
use crate::error::{Error, Result};
use crate::objective::{Component, Rating};
use crate::tensor::Tensor;

/// Nominal segment length in seconds.
pub const SEGMENT_S: f64 = 960.0;
/// Trailing remainders shorter than this join the previous segment.
pub const MIN_TAIL_S: f64 = 480.0;

/// Splits a lesson into consecutive `(start, end)` windows of 960 s; a final
/// remainder under 480 s is merged into the preceding window.
pub fn segment_boundaries(lesson_duration_s: f64) -> Result<Vec<(f64, f64)>> {
    if !(lesson_duration_s.is_finite() && lesson_duration_s > 0.0) {
        return Err(Error::usage(format!("lesson duration must be positive, got {lesson_duration_s}")));
    }
    let mut out = Vec::new();
    let mut start = 0.0;
    while lesson_duration_s - start > SEGMENT_S {
        out.push((start, start + SEGMENT_S));
        start += SEGMENT_S;
    }
    let tail = lesson_duration_s - start;
    match out.last_mut() {
        Some(last) if tail < MIN_TAIL_S => last.1 = lesson_duration_s,
        _ => out.push((start, lesson_duration_s)),
    }
    Ok(out)
}

fn mean_rows(x: &Tensor<f32>, rows: Range<usize>) -> Vec<f32> {
    let d = x.shape()[1];
    let n = rows.len();
    let mut acc = vec![0f64; d];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(x.row(r)) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|a| (a / n as f64) as f32).collect()
}

/// Mean word embedding per utterance. `spans` must be nonempty, ordered and
/// exactly partition `0..W`.
pub fn aggregate_words_to_utterances(words: &Tensor<f32>, spans: &[Range<usize>]) -> Result<Tensor<f32>> {
    let [w, d] = words.shape() else {
        return Err(Error::usage("word embeddings must be a matrix"));
    };
    let (w, d) = (*w, *d);
    let mut expected = 0;
    let mut data = Vec::with_capacity(spans.len() * d);
    for (u, span) in spans.iter().enumerate() {
        if span.is_empty() {
            return Err(Error::data(format!("utterance {u} has an empty word span")));
        }
        if span.start < expected {
            return Err(Error::data(format!("utterance {u} span {span:?} overlaps the previous span")));
        }
        if span.start > expected {
            return Err(Error::data(format!("words {expected}..{} belong to no utterance", span.start)));
        }
        if span.end > w {
            return Err(Error::data(format!("utterance {u} span {span:?} exceeds {w} words")));
        }
        data.extend(mean_rows(words, span.clone()));
        expected = span.end;
    }
    if expected != w {
        return Err(Error::data(format!("words {expected}..{w} belong to no utterance")));
    }
    Tensor::new(vec![spans.len(), d], data)
}

/// Means over non-overlapping windows of `window_s` seconds of frames sampled
/// at `rate_hz`. A final partial window is kept.
pub fn aggregate_to_chunks(frames: &Tensor<f32>, rate_hz: f64, window_s: f64) -> Result<Tensor<f32>> {
    let [f, d] = frames.shape() else {
        return Err(Error::usage("frame embeddings must be a matrix"));
    };
    let (f, d) = (*f, *d);
    if f == 0 {
        return Err(Error::data("no frames to aggregate"));
    }
    if !(rate_hz > 0.0 && window_s > 0.0) {
        return Err(Error::usage("rate and window must be positive"));
    }
    let per_window = rate_hz * window_s;
    let chunk_of = |i: usize| (i as f64 / per_window).floor() as usize;
    let chunks = chunk_of(f - 1) + 1;
    let mut data = Vec::with_capacity(chunks * d);
    let mut start = 0;
    for c in 0..chunks {
        let mut end = start;
        while end < f && chunk_of(end) == c {
            end += 1;
        }
        data.extend(mean_rows(frames, start..end));
        start = end;
    }
    Tensor::new(vec![chunks, d], data)
}

pub(crate) fn mean_of_two(scores: &[(&str, u8)], segment_id: &str, c: Component) -> Result<Rating> {
    match scores {
        [(ra, a), (rb, b)] if ra != rb => Rating::from_value((*a as f64 + *b as f64) / 2.0),
        [(ra, _), (rb, _)] if ra == rb => Err(Error::data(format!(
            "segment {segment_id}: rater {ra} rated {c} twice"
        ))),
        _ => Err(Error::data(format!(
            "segment {segment_id}: expected 2 {c} ratings, found {}",
            scores.len()
        ))),
    }
}

/// Mean of the two raters' integer scores for one segment and component.
pub fn average_rater_scores(records: &[RaterRecord], segment_id: &str, component: Component) -> Result<Rating> {
    let mut scores = Vec::with_capacity(2);
    for r in records {
        if r.segment_id == segment_id && r.component == component {
            if !(1..=4).contains(&r.score) {
                return Err(Error::data(format!("score {} outside 1..4", r.score)));
            }
            scores.push((r.rater_id.as_str(), r.score));
        }
    }
    mean_of_two(&scores, segment_id, component)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_examples() {
        assert_eq!(
            segment_boundaries(2400.0).unwrap(),
            vec![(0.0, 960.0), (960.0, 1920.0), (1920.0, 2400.0)]
        );
        assert_eq!(segment_boundaries(2280.0).unwrap(), vec![(0.0, 960.0), (960.0, 2280.0)]);
        assert_eq!(segment_boundaries(900.0).unwrap(), vec![(0.0, 900.0)]);
        assert_eq!(segment_boundaries(960.0).unwrap(), vec![(0.0, 960.0)]);
        assert_eq!(segment_boundaries(1920.0).unwrap(), vec![(0.0, 960.0), (960.0, 1920.0)]);
        assert!(segment_boundaries(0.0).is_err());
        assert!(segment_boundaries(-5.0).is_err());
    }

    #[test]
    fn utterance_means() {
        let words = Tensor::new(vec![3, 2], vec![1.0, 3.0, 3.0, 5.0, 7.0, 9.0]).unwrap();
        let out = aggregate_words_to_utterances(&words, &[0..2, 2..3]).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 7.0, 9.0]);
        let all = aggregate_words_to_utterances(&words, &[0..3]).unwrap();
        assert_eq!(all.data(), &[11.0 / 3.0, 17.0 / 3.0]);
    }

    #[test]
    fn bad_spans() {
        let words = Tensor::zeros(vec![4, 2]);
        assert!(aggregate_words_to_utterances(&words, &[0..2, 2..2, 2..4]).is_err());
        assert!(aggregate_words_to_utterances(&words, &[0..3, 2..4]).is_err());
        assert!(aggregate_words_to_utterances(&words, &[0..2]).is_err());
        assert!(aggregate_words_to_utterances(&words, &[0..2, 3..4]).is_err());
    }

    #[test]
    fn chunk_counts() {
        let frames = Tensor::from_f64(vec![25, 1], &(0..25).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let out = aggregate_to_chunks(&frames, 1.0, 10.0).unwrap();
        assert_eq!(out.data(), &[4.5, 14.5, 22.0]);
        let frames = Tensor::full(vec![7, 3], 2.5f32);
        let out = aggregate_to_chunks(&frames, 0.5, 10.0).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn rater_means() {
        let rec = |rater: &str, score| RaterRecord {
            segment_id: "s".into(),
            rater_id: rater.into(),
            component: Component::Nature,
            score,
        };
        for (a, b, want) in [(3, 4, 3.5), (2, 2, 2.0), (1, 4, 2.5)] {
            let got = average_rater_scores(&[rec("x", a), rec("y", b)], "s", Component::Nature).unwrap();
            assert_eq!(got.value(), want);
        }
        assert!(average_rater_scores(&[rec("x", 3)], "s", Component::Nature).is_err());
        assert!(average_rater_scores(&[rec("x", 3), rec("y", 3), rec("z", 3)], "s", Component::Nature).is_err());
        assert!(average_rater_scores(&[rec("x", 3), rec("y", 2)], "s", Component::Questioning).is_err());
    }
}
