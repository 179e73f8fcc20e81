//! Aggregation of per-trial metrics into a deterministic text report.
//!
//! Reports are plain `key = value` lines with fixed six-decimal formatting,
//! so two runs with the same seed produce byte-identical files. Wall-clock
//! timings are rendered separately and never mixed into a report, keeping
//! report files comparable across machines.

use crate::episodic::Metrics;
use crate::error::{Error, Result};
use crate::pipeline::phases::{ScheduleEpoch, TrialOutput};

/// Mean and sample standard deviation of one metric across trials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Moments { mean, std }
}

/// Metrics of every trial of a run plus their aggregates.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub class_ids: Vec<u16>,
    pub trials: Vec<Metrics>,
    pub oa: Moments,
    pub aa: Moments,
    pub kappa: Moments,
    /// Mean per-class recall over the trials where the class was scored;
    /// `None` when no trial scored it.
    pub per_class: Vec<Option<f64>>,
}

pub fn aggregate(class_ids: &[u16], trials: &[Metrics]) -> Result<RunReport> {
    if trials.is_empty() {
        return Err(Error::contract("aggregate", "no trials to aggregate"));
    }
    for (i, t) in trials.iter().enumerate() {
        if t.per_class.len() != class_ids.len() {
            return Err(Error::contract(
                "aggregate",
                format!(
                    "trial {i} has {} per-class entries, expected {}",
                    t.per_class.len(),
                    class_ids.len()
                ),
            ));
        }
    }
    let oa = moments(&trials.iter().map(|t| t.oa).collect::<Vec<_>>());
    let aa = moments(&trials.iter().map(|t| t.aa).collect::<Vec<_>>());
    let kappa = moments(&trials.iter().map(|t| t.kappa).collect::<Vec<_>>());
    let per_class = (0..class_ids.len())
        .map(|c| {
            let present: Vec<f64> = trials.iter().filter_map(|t| t.per_class[c]).collect();
            if present.is_empty() {
                None
            } else {
                Some(moments(&present).mean)
            }
        })
        .collect();
    Ok(RunReport {
        class_ids: class_ids.to_vec(),
        trials: trials.to_vec(),
        oa,
        aa,
        kappa,
        per_class,
    })
}

/// Aggregates finished trials, checking they scored the same classes.
pub fn aggregate_trials(trials: &[TrialOutput]) -> Result<RunReport> {
    if trials.is_empty() {
        return Err(Error::contract("aggregate", "no trials to aggregate"));
    }
    let class_ids = &trials[0].eval.class_ids;
    for t in trials {
        if &t.eval.class_ids != class_ids {
            return Err(Error::contract(
                "aggregate",
                format!("trial {} scored different classes", t.trial),
            ));
        }
    }
    let metrics: Vec<Metrics> = trials.iter().map(|t| t.eval.metrics.clone()).collect();
    aggregate(class_ids, &metrics)
}

fn ids_csv(ids: &[u16]) -> String {
    ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(",")
}

pub fn render_report(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("classes = {}\n", ids_csv(&report.class_ids)));
    out.push_str(&format!("trials = {}\n", report.trials.len()));
    out.push_str(&format!("oa_mean = {:.6}\n", report.oa.mean));
    out.push_str(&format!("oa_std = {:.6}\n", report.oa.std));
    out.push_str(&format!("aa_mean = {:.6}\n", report.aa.mean));
    out.push_str(&format!("aa_std = {:.6}\n", report.aa.std));
    out.push_str(&format!("kappa_mean = {:.6}\n", report.kappa.mean));
    out.push_str(&format!("kappa_std = {:.6}\n", report.kappa.std));
    for (i, t) in report.trials.iter().enumerate() {
        out.push_str(&format!("trial.{i}.oa = {:.6}\n", t.oa));
        out.push_str(&format!("trial.{i}.aa = {:.6}\n", t.aa));
        out.push_str(&format!("trial.{i}.kappa = {:.6}\n", t.kappa));
    }
    for (id, recall) in report.class_ids.iter().zip(&report.per_class) {
        match recall {
            Some(r) => out.push_str(&format!("class.{id}.recall_mean = {r:.6}\n")),
            None => out.push_str(&format!("class.{id}.recall_mean = absent\n")),
        }
    }
    out
}

/// Renders the adaptation trace of one trial: mixing ratio, weighting
/// factor, measured distances, loss means, and accepted pseudo-labels.
pub fn render_schedule(trial: u64, schedule: &[ScheduleEpoch]) -> String {
    let mut out = String::new();
    for e in schedule {
        let prefix = format!("trial.{trial}.epoch.{}", e.epoch);
        out.push_str(&format!("{prefix}.lambda2 = {:.6}\n", e.lambda2));
        out.push_str(&format!("{prefix}.q = {:.6}\n", e.q));
        out.push_str(&format!("{prefix}.d_source = {:.6}\n", e.d_source));
        out.push_str(&format!("{prefix}.d_target = {:.6}\n", e.d_target));
        out.push_str(&format!("{prefix}.ft_loss = {:.6}\n", e.ft_loss_mean));
        out.push_str(&format!("{prefix}.inner_loss = {:.6}\n", e.inner_loss_mean));
        let counts: Vec<String> = e.pseudo_counts.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!("{prefix}.pseudo = {}\n", counts.join(",")));
    }
    out
}

/// Renders stage timings as their own artifact. Timings vary by machine,
/// so they are kept out of report files on purpose.
pub fn render_timings(stages: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (name, secs) in stages {
        out.push_str(&format!("{name} = {secs:.3}s\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn metric(oa: f64, aa: f64, kappa: f64, per_class: Vec<Option<f64>>) -> Metrics {
        Metrics { oa, aa, kappa, per_class }
    }

    #[test]
    fn moments_match_hand_computation() {
        let m = moments(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m.mean - 2.5).abs() < 1e-15);
        // Sample variance of 1..4 is 5/3.
        assert!((m.std - (5.0_f64 / 3.0).sqrt()).abs() < 1e-15);
        let single = moments(&[0.7]);
        assert_eq!(single.std, 0.0);
        assert!((single.mean - 0.7).abs() < 1e-15);
    }

    #[test]
    fn aggregate_recomputes_means_and_handles_absent_classes() {
        let trials = vec![
            metric(0.8, 0.7, 0.6, vec![Some(1.0), None]),
            metric(0.6, 0.5, 0.4, vec![Some(0.5), None]),
        ];
        let rep = aggregate(&[3, 9], &trials).unwrap();
        assert!((rep.oa.mean - 0.7).abs() < 1e-15);
        assert!((rep.oa.std - (0.02_f64).sqrt()).abs() < 1e-12);
        assert_eq!(rep.per_class[0], Some(0.75));
        assert_eq!(rep.per_class[1], None);

        let err = aggregate(&[3, 9], &[]).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
        let bad = vec![metric(0.8, 0.7, 0.6, vec![Some(1.0)])];
        assert!(aggregate(&[3, 9], &bad).is_err(), "per-class arity must match");
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        use crate::episodic::{metrics as compute, ConfusionMatrix};
        let mut cm = ConfusionMatrix::new(3);
        for c in 0..3 {
            for _ in 0..40 {
                cm.record(c, c).unwrap();
            }
        }
        let m = compute(&cm).unwrap();
        let rep = aggregate(&[1, 2, 3], &[m]).unwrap();
        assert_eq!(rep.oa.mean, 1.0);
        assert_eq!(rep.aa.mean, 1.0);
        assert_eq!(rep.kappa.mean, 1.0);
        assert!(rep.per_class.iter().all(|r| *r == Some(1.0)));
    }

    #[test]
    fn random_predictions_sit_at_chance_level() {
        use crate::episodic::{metrics as compute, ConfusionMatrix};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let classes = 6;
        let per_class = 1000;
        let mut cm = ConfusionMatrix::new(classes);
        for truth in 0..classes {
            for _ in 0..per_class {
                cm.record(truth, rng.random_range(0..classes)).unwrap();
            }
        }
        let m = compute(&cm).unwrap();
        let n = (classes * per_class) as f64;
        let p = 1.0 / classes as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((m.oa - p).abs() < 3.0 * sigma, "oa {} vs chance {p}", m.oa);
        // Chance agreement cancels in the chance-corrected score.
        assert!(m.kappa.abs() < 3.0 * sigma / (1.0 - p), "kappa {}", m.kappa);
    }

    #[test]
    fn rendering_is_deterministic_and_marks_absent_classes() {
        let trials = vec![
            metric(0.812345678, 0.75, 0.6, vec![Some(0.9), None]),
            metric(0.6, 0.5, 0.4, vec![Some(0.5), None]),
        ];
        let rep = aggregate(&[4, 7], &trials).unwrap();
        let a = render_report(&rep);
        let b = render_report(&rep);
        assert_eq!(a, b);
        assert!(a.contains("classes = 4,7\n"));
        assert!(a.contains("trials = 2\n"));
        assert!(a.contains("oa_mean = 0.706173\n"));
        assert!(a.contains("trial.0.oa = 0.812346\n"));
        assert!(a.contains("class.4.recall_mean = 0.700000\n"));
        assert!(a.contains("class.7.recall_mean = absent\n"));
        assert!(!a.contains("NaN"));
    }

    #[test]
    fn schedule_and_timing_renderers_emit_expected_keys() {
        let epochs = vec![ScheduleEpoch {
            epoch: 0,
            lambda2: 0.0,
            q: 0.5,
            d_source: 1.25,
            d_target: 0.75,
            ft_loss_mean: 1.5,
            inner_loss_mean: 2.5,
            pseudo_counts: vec![3, 0, 5],
        }];
        let s = render_schedule(2, &epochs);
        assert!(s.contains("trial.2.epoch.0.lambda2 = 0.000000\n"));
        assert!(s.contains("trial.2.epoch.0.q = 0.500000\n"));
        assert!(s.contains("trial.2.epoch.0.pseudo = 3,0,5\n"));

        let t = render_timings(&[("source".into(), 12.3456), ("adapt".into(), 0.5)]);
        assert!(t.contains("source = 12.346s\n"));
        assert!(t.contains("adapt = 0.500s\n"));
    }
}
