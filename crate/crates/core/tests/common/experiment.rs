//! Desk-scale end-to-end runs on generated cohorts.

use std::collections::HashSet;

use cxl_core::aggregator::AggregatorConfig;
use cxl_core::cohort::{synth_generate, SignalKind, SynthConfig, Task};
use cxl_core::config::RunConfig;
use cxl_core::encoder::{EncoderConfig, PretrainConfig};
use cxl_core::harness::{run_experiment_on, ExperimentOutcome, MetricsFile, SplitSpec};
use cxl_core::note_repr::MetaConfig;

/// Knobs that differ between the end-to-end scenarios.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub signal: SignalKind,
    pub n_patients: usize,
    pub sentinel_repeats: usize,
    pub data_seed: u64,
    pub d_model: usize,
    pub pretrain_steps: usize,
    pub meta_epochs: usize,
    pub finetune: AggregatorConfig,
    pub seeds: Vec<u64>,
    pub tasks: Vec<Task>,
}

impl Scenario {
    /// 500 patients with one planted keyword per label-positive patient.
    pub fn keyword() -> Self {
        Scenario {
            signal: SignalKind::Keyword,
            n_patients: 500,
            sentinel_repeats: 1,
            data_seed: 11,
            d_model: 32,
            pretrain_steps: 200,
            meta_epochs: 2,
            finetune: AggregatorConfig {
                hidden_size: 16,
                lr: 3e-3,
                max_epochs: 30,
                patience: 5,
                batch_size: 32,
                ..AggregatorConfig::default()
            },
            seeds: vec![1],
            tasks: vec![Task::Pmv],
        }
    }

    /// The keyword setup on a larger cohort with no planted signal.
    pub fn null() -> Self {
        Scenario {
            signal: SignalKind::None,
            n_patients: 4000,
            ..Scenario::keyword()
        }
    }

    /// Two sentinels whose order carries the label; meta-finetuning is
    /// skipped because single notes carry no label information.
    pub fn temporal() -> Self {
        let keyword = Scenario::keyword();
        Scenario {
            signal: SignalKind::Temporal,
            n_patients: 2000,
            sentinel_repeats: 2,
            d_model: 128,
            meta_epochs: 0,
            finetune: AggregatorConfig {
                max_epochs: 80,
                patience: 10,
                ..keyword.finetune.clone()
            },
            ..keyword
        }
    }

    pub fn config(&self) -> RunConfig {
        let d = self.d_model;
        RunConfig {
            seed: 0,
            encoder: EncoderConfig {
                n_layers: 1,
                d_model: d,
                n_heads: 2,
                d_head: d / 2,
                d_inner: 2 * d,
                max_len: 64,
                ..EncoderConfig::default()
            },
            pretrain: PretrainConfig {
                steps: self.pretrain_steps,
                lr: 3e-3,
                ..PretrainConfig::default()
            },
            meta: MetaConfig {
                epochs: self.meta_epochs,
                lr: 1e-3,
                ..MetaConfig::default()
            },
            finetune: self.finetune.clone(),
            split: SplitSpec {
                seeds: self.seeds.clone(),
                ..SplitSpec::default()
            },
            tasks: self.tasks.clone(),
            ..RunConfig::default()
        }
    }

    pub fn run(&self, run_dir: &std::path::Path) -> ExperimentOutcome {
        let synth = SynthConfig {
            n_patients: self.n_patients,
            signal: self.signal,
            sentinel_repeats: self.sentinel_repeats,
            ..SynthConfig::default()
        };
        let data = synth_generate(&synth, self.data_seed).expect("synthetic cohort");
        run_experiment_on(&data.tables, &self.config(), run_dir).expect("experiment")
    }
}

fn three_seed_scenario() -> Scenario {
    Scenario {
        n_patients: 120,
        d_model: 16,
        pretrain_steps: 5,
        meta_epochs: 1,
        finetune: AggregatorConfig {
            hidden_size: 4,
            predictor_width: 8,
            batch_size: 16,
            lr: 3e-3,
            max_epochs: 3,
            patience: 2,
            ..AggregatorConfig::default()
        },
        seeds: vec![1, 2, 3],
        ..Scenario::keyword()
    }
}

/// Runs three seeds twice; checks isolation, report layout and the sample
/// sd against a hand computation. Returns the rendered report.
pub fn three_seed_report_and_isolation() -> String {
    let dir = tempfile::tempdir().unwrap();
    let scenario = three_seed_scenario();
    let out = scenario.run(dir.path());

    let holdout: HashSet<u64> = out.holdout.iter().copied().collect();
    let corpus: HashSet<u64> = out.corpus_note_ids.iter().copied().collect();
    assert!(!out.holdout_note_ids.is_empty());
    assert!(out.holdout_note_ids.iter().all(|id| !corpus.contains(id)));
    for (_, seed, s) in &out.splits {
        assert_eq!(s.holdout, out.holdout, "seed {seed} moved the holdout");
        let train: HashSet<u64> = s.train.iter().copied().collect();
        assert!(s.val.iter().all(|p| !train.contains(p) && !holdout.contains(p)));
        assert!(s.train.iter().all(|p| !holdout.contains(p)));
    }

    let written: MetricsFile =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(written, out.metrics);
    assert_eq!(out.metrics.reports.len(), 2);
    for r in &out.metrics.reports {
        assert_eq!(r.seeds, vec![1, 2, 3]);
        assert_eq!(r.aurocs.len(), 3);
        let mean = r.aurocs.iter().sum::<f64>() / 3.0;
        let sd = (r.aurocs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 2.0).sqrt();
        assert!((r.mean - mean).abs() < 1e-12);
        assert!((r.sd - sd).abs() < 1e-9);
        assert_eq!(r.formatted(), format!("{:.3} ± {:.3}", mean, sd));
    }
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("plm-bilstm | "), "{report}");
    assert!(report.contains("plm-mean   | "), "{report}");

    let again = tempfile::tempdir().unwrap();
    let repeat = scenario.run(again.path());
    assert_eq!(
        std::fs::read(dir.path().join("metrics.json")).unwrap(),
        std::fs::read(again.path().join("metrics.json")).unwrap()
    );
    assert_eq!(repeat.corpus_note_ids, out.corpus_note_ids);
    report
}
