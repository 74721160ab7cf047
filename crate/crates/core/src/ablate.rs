//! Inference-time ablations of a trained model: short-circuiting NMF layers
//! and changing the solver's iteration count, rank or algorithm.

use std::fmt::Write as _;

use factorizer_tensor::Real;

use crate::data::VolumeSample;
use crate::error::{usage, Result};
use crate::infer::{evaluate, InferConfig};
use crate::network::{Factorizer, NmfOverrides};
use crate::nmf::Solver;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AblationPlan {
    /// Keep NMF layers `1..=k` and short-circuit the rest, for each `k`.
    KeepFirst(Vec<usize>),
    /// Short-circuit one layer at a time.
    LeaveOneOut(Vec<usize>),
    /// Override the number of NMF iterations.
    IterationSweep(Vec<usize>),
    /// Override the rank, once per solver.
    RankSweep(Vec<usize>, Vec<Solver>),
}

impl AblationPlan {
    pub const NAMES: &'static [&'static str] = &["keep-first", "leave-one-out", "t-sweep", "r-sweep"];

    /// Default sweep for a plan name on a model with `layers` NMF layers.
    pub fn standard(name: &str, layers: usize) -> Result<Self> {
        Ok(match name {
            "keep-first" => Self::KeepFirst((0..=layers).collect()),
            "leave-one-out" => Self::LeaveOneOut((1..=layers).collect()),
            "t-sweep" => Self::IterationSweep((1..=20).collect()),
            "r-sweep" => Self::RankSweep(vec![1, 2, 4, 8], vec![Solver::Mu, Solver::Hals]),
            other => {
                return Err(usage(format!("unknown ablation plan `{other}`; expected one of {}", Self::NAMES.join(", "))))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::KeepFirst(_) => "keep-first",
            Self::LeaveOneOut(_) => "leave-one-out",
            Self::IterationSweep(_) => "t-sweep",
            Self::RankSweep(..) => "r-sweep",
        }
    }

    /// Every setting of the plan with the overrides that realize it.
    pub fn settings(&self, layers: usize) -> Vec<(Setting, NmfOverrides)> {
        let base = NmfOverrides::default();
        match self {
            Self::KeepFirst(ks) => ks
                .iter()
                .map(|&k| {
                    let o = NmfOverrides { short_circuit: (k + 1..=layers).collect(), ..base.clone() };
                    (Setting { keep: Some(k), ..Setting::default() }, o)
                })
                .collect(),
            Self::LeaveOneOut(ls) => ls
                .iter()
                .map(|&l| {
                    let o = NmfOverrides { short_circuit: [l].into_iter().collect(), ..base.clone() };
                    (Setting { removed: Some(l), ..Setting::default() }, o)
                })
                .collect(),
            Self::IterationSweep(ts) => ts
                .iter()
                .map(|&t| (Setting { iterations: Some(t), ..Setting::default() }, NmfOverrides { iterations: Some(t), ..base.clone() }))
                .collect(),
            Self::RankSweep(rs, solvers) => solvers
                .iter()
                .flat_map(|&s| rs.iter().map(move |&r| (s, r)))
                .map(|(s, r)| {
                    let setting = Setting { rank: Some(r), solver: Some(s), ..Setting::default() };
                    (setting, NmfOverrides { rank: Some(r), solver: Some(s), ..base.clone() })
                })
                .collect(),
        }
    }

    /// Plan name, optionally followed by `:` and a comma-separated value list,
    /// e.g. `t-sweep:1,5,10`. Rank sweeps accept `r-sweep:1,2@mu`.
    pub fn parse(s: &str, layers: usize) -> Result<Self> {
        let (name, values) = match s.split_once(':') {
            Some((n, v)) => (n, Some(v)),
            None => (s, None),
        };
        let Some(values) = values else {
            return Self::standard(name, layers);
        };
        let (list, solver) = match values.split_once('@') {
            Some((l, sv)) => (l, Some(sv.parse::<Solver>()?)),
            None => (values, None),
        };
        let nums = list
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|e| usage(format!("plan value `{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(match name {
            "keep-first" => Self::KeepFirst(nums),
            "leave-one-out" => Self::LeaveOneOut(nums),
            "t-sweep" => Self::IterationSweep(nums),
            "r-sweep" => Self::RankSweep(nums, solver.map_or(vec![Solver::Mu, Solver::Hals], |s| vec![s])),
            other => return Err(usage(format!("unknown ablation plan `{other}`"))),
        })
    }
}

/// Columns describing one ablation setting; unused ones are blank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Setting {
    pub keep: Option<usize>,
    pub removed: Option<usize>,
    pub iterations: Option<usize>,
    pub rank: Option<usize>,
    pub solver: Option<Solver>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub plan: String,
    pub setting: Setting,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn baseline(&self) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.plan == "none")
    }

    pub fn find(&self, plan: &str, pred: impl Fn(&Setting) -> bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.plan == plan && pred(&r.setting))
    }

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        let mut out = String::from("plan\tkeep_first\tremoved\titerations\trank\tsolver\tmean_dice\tmean_hd95\n");
        for r in &self.rows {
            let s = &r.setting;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{}",
                r.plan,
                opt(s.keep),
                opt(s.removed),
                opt(s.iterations),
                opt(s.rank),
                s.solver.map_or("", Solver::name),
                r.mean_dice,
                r.mean_hd95.map_or("undefined".to_string(), |v| format!("{v:.4}")),
            );
        }
        out
    }
}

fn score<T: Real>(model: &Factorizer<T>, eval: &[VolumeSample], infer: &InferConfig) -> Result<(f64, Option<f64>)> {
    let report = evaluate(model, eval, infer)?;
    let hd: Vec<f64> = report.rows.iter().filter_map(|r| r.hd95.value()).collect();
    Ok((report.mean_dice(), (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64)))
}

/// Evaluates the unablated model, then every setting of every plan, handing
/// each finished row to `progress`.
pub fn ablate<T: Real>(
    model: &Factorizer<T>,
    eval: &[VolumeSample],
    plans: &[AblationPlan],
    infer: &InferConfig,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let layers = model.nmf_layer_count();
    let mut work = model.clone();
    work.clear_overrides();
    let mut report = AblationReport::default();
    let (d, h) = score(&work, eval, infer)?;
    report.rows.push(AblationRow { plan: "none".into(), setting: Setting::default(), mean_dice: d, mean_hd95: h });
    progress(report.rows.last().expect("just pushed"));
    for plan in plans {
        for (setting, overrides) in plan.settings(layers) {
            work.set_overrides(overrides)?;
            let (d, h) = score(&work, eval, infer)?;
            report.rows.push(AblationRow { plan: plan.name().into(), setting, mean_dice: d, mean_hd95: h });
            progress(report.rows.last().expect("just pushed"));
        }
    }
    Ok(report)
}
