//! Fit and stream loops that report one [`MetricsRow`] per sweep or chunk.

use std::time::Instant;

use crate::baselines::SgdModel;
use crate::batch::{fit_batch_observed, BatchConfig, BatchFit};
use crate::data::eval::{predict_all, rmse, sgd_predict_all};
use crate::data::metrics::MetricsRow;
use crate::error::Result;
use crate::model::{Hyperparameters, ModelState, Side};
use crate::online::{ChunkReport, OnlineSession, RatingChunk};
use crate::ratings::SparseRatings;

/// Where predictions are scored: an optional held-out set and an optional clip range.
#[derive(Debug, Clone, Copy, Default)]
pub struct Scoring<'a> {
    pub test: Option<&'a SparseRatings>,
    pub range: Option<(f64, f64)>,
}

impl Scoring<'_> {
    fn model_rmse(&self, state: &ModelState, set: &SparseRatings) -> Result<Option<f64>> {
        if set.is_empty() {
            return Ok(None);
        }
        rmse(&predict_all(state, set, self.range), set).map(Some)
    }

    fn test_rmse(&self, state: &ModelState) -> Result<Option<f64>> {
        match self.test {
            Some(t) => self.model_rmse(state, t),
            None => Ok(None),
        }
    }
}

fn elapsed_ms(start: Instant) -> Option<u128> {
    Some(start.elapsed().as_millis())
}

/// Batch fit with a row (phase `sweep`) after every sweep.
pub fn fit_with_metrics<F>(
    train: &SparseRatings,
    hyper: &Hyperparameters,
    config: &BatchConfig,
    scoring: Scoring<'_>,
    mut sink: F,
) -> Result<BatchFit>
where
    F: FnMut(MetricsRow) -> Result<()>,
{
    let start = Instant::now();
    fit_batch_observed(train, hyper, config, |state, sweep| {
        sink(MetricsRow {
            phase: "sweep".into(),
            step: sweep as u64,
            elbo: state.elbo_trace.last().copied(),
            train_rmse: scoring.model_rmse(state, train)?,
            test_rmse: scoring.test_rmse(state)?,
            d: state.n_components(Side::User),
            k: state.n_components(Side::Item),
            wall_ms: elapsed_ms(start),
        })
    })
}

/// Feeds `chunks` to the session with a row (phase `chunk`) after each one.
/// The ELBO column is filled only on chunks that ran an empirical pass.
/// `after` sees the session after every chunk, e.g. to checkpoint it.
pub fn stream_with_metrics<F, G>(
    session: &mut OnlineSession,
    chunks: &[RatingChunk],
    scoring: Scoring<'_>,
    mut sink: F,
    mut after: G,
) -> Result<Vec<ChunkReport>>
where
    F: FnMut(MetricsRow) -> Result<()>,
    G: FnMut(&OnlineSession) -> Result<()>,
{
    let start = Instant::now();
    let mut reports = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let report = session.process_chunk(chunk)?;
        let state = &session.state;
        sink(MetricsRow {
            phase: "chunk".into(),
            step: session.chunks_processed,
            elbo: if report.empirical_pass { state.elbo_trace.last().copied() } else { None },
            train_rmse: scoring.model_rmse(state, &session.observed)?,
            test_rmse: scoring.test_rmse(state)?,
            d: state.n_components(Side::User),
            k: state.n_components(Side::Item),
            wall_ms: elapsed_ms(start),
        })?;
        after(session)?;
        reports.push(report);
    }
    Ok(reports)
}

/// SGD over `chunks` with a row (phase `sgd`) after each one. Unseen entities
/// are predicted as `fallback`. D and K are reported as 1.
pub fn sgd_with_metrics<F>(
    model: &mut SgdModel,
    chunks: &[RatingChunk],
    fallback: f64,
    scoring: Scoring<'_>,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(MetricsRow) -> Result<()>,
{
    let start = Instant::now();
    let mut seen = SparseRatings::empty(0, 0);
    for (k, chunk) in chunks.iter().enumerate() {
        model.process_chunk(chunk)?;
        for e in &chunk.entries {
            seen.upsert(e.user, e.item, e.value);
        }
        let score = |set: &SparseRatings| -> Result<Option<f64>> {
            if set.is_empty() {
                return Ok(None);
            }
            rmse(&sgd_predict_all(model, set, fallback, scoring.range), set).map(Some)
        };
        sink(MetricsRow {
            phase: "sgd".into(),
            step: k as u64 + 1,
            elbo: None,
            train_rmse: score(&seen)?,
            test_rmse: match scoring.test {
                Some(t) => score(t)?,
                None => None,
            },
            d: 1,
            k: 1,
            wall_ms: elapsed_ms(start),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::SgdConfig;
    use crate::data::metrics::MetricsWriter;
    use crate::data::stream::chunk_stream;
    use crate::model::sample_from_model;
    use crate::online::OnlineConfig;

    fn data() -> SparseRatings {
        sample_from_model(&Hyperparameters::new(2), 2, 2, 15, 12, 0.3, 4).unwrap().ratings
    }

    #[test]
    fn fit_rows_follow_sweeps() {
        let r = data();
        let config = BatchConfig { max_sweeps: 4, tolerance: 1e-300, ..Default::default() };
        let mut rows = Vec::new();
        let fit = fit_with_metrics(&r, &Hyperparameters::new(2), &config, Scoring::default(), |row| {
            rows.push(row);
            Ok(())
        })
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(rows[3].elbo, fit.state.elbo_trace.last().copied());
        assert!(rows.iter().all(|r| r.test_rmse.is_none() && r.train_rmse.is_some()));
    }

    #[test]
    fn stream_rows_are_reproducible_without_timing() {
        let r = data();
        let chunks = chunk_stream(&r, 10, 1).unwrap();
        let run = || {
            let mut session = OnlineSession::new(&Hyperparameters::new(2), 1, 1, 7, OnlineConfig::default()).unwrap();
            let mut w = MetricsWriter::new(Vec::new(), false).unwrap();
            stream_with_metrics(&mut session, &chunks, Scoring { test: Some(&r), range: None }, |row| w.write(&row), |_| Ok(()))
                .unwrap();
            w.into_inner()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), chunks.len() + 1);
    }

    #[test]
    fn sgd_rows() {
        let r = data();
        let chunks = chunk_stream(&r, 20, 1).unwrap();
        let mut model = SgdModel::new(&SgdConfig::new(2)).unwrap();
        let mut rows = Vec::new();
        sgd_with_metrics(&mut model, &chunks, 0.0, Scoring { test: Some(&r), range: None }, |row| {
            rows.push(row);
            Ok(())
        })
        .unwrap();
        assert_eq!(rows.len(), chunks.len());
        assert!(rows.iter().all(|r| r.phase == "sgd" && r.test_rmse.is_some()));
    }
}
