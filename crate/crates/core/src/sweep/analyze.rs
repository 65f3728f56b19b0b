use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plot::{line_chart, Series};
use super::{checkpoint_dir, read_config, read_results, seed_data};
use crate::error::Result;
use crate::io::{write_atomic, write_csv, write_json};
use crate::rng::{derive_seed, permutation, purpose, stream};
use crate::spectral::{
    ablation_forgetting, feature_space_delta_with, param_space_delta_with, write_report,
    ImportanceProfile, Space,
};
use crate::svd::svd;
use crate::train::Model;

/// Importance-weighted spectral change of one adapted layer in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub s: usize,
    pub seed: u64,
    pub layer: usize,
    pub space: Space,
    pub diag_sum: f64,
    pub offdiag_sum: f64,
    pub k: usize,
}

#[derive(Serialize)]
struct ImportanceRow {
    component_index: usize,
    raw_f: f64,
    p: f64,
}

#[derive(Serialize)]
struct MeanRow {
    s: usize,
    space: Space,
    diag_sum_mean: f64,
    offdiag_sum_mean: f64,
    n: usize,
}

/// Spectral analysis of every checkpoint of a finished sweep in `dir`.
///
/// Per seed and adapted layer the pretrained weight `W0` is factorized once;
/// the importance profile is measured on the prior-task test split of the
/// pretrained base. `feature_probe` overrides the configured probe size and
/// forces the feature-space analysis on.
pub fn analyze_checkpoints(dir: &Path, feature_probe: Option<usize>) -> Result<Vec<AnalysisRow>> {
    let cfg = read_config(dir)?;
    let results = read_results(dir)?;
    let an = &cfg.analysis;
    let probe_n = feature_probe.unwrap_or(an.feature_probe).max(1);
    let feature = an.feature_space || feature_probe.is_some();
    let seeds: BTreeSet<u64> = results.iter().map(|r| r.seed).collect();
    let adir = dir.join("analysis");
    let mut rows = Vec::new();

    for &seed in &seeds {
        let base = Model::load(&checkpoint_dir(dir, seed, None))?;
        let data = seed_data(&cfg, seed)?;
        let starts: Vec<usize> = results.iter().filter(|r| r.seed == seed).map(|r| r.s).collect();
        let tuned: Vec<Model> = starts
            .iter()
            .map(|&s| Model::load(&checkpoint_dir(dir, seed, Some(s))))
            .collect::<Result<_>>()?;
        let probe_idx: Vec<usize> = {
            let mut rng = stream(derive_seed(seed, purpose::PROBE), purpose::PROBE, 0);
            let mut p = permutation(&mut rng, data.prior_test.len());
            p.truncate(probe_n.min(p.len()));
            p
        };
        let probe_x = data.prior_test.x.select_rows(&probe_idx);

        for &l in &cfg.model.adapted_layers {
            let w0 = base.weight(l);
            let f0 = svd(&w0)?;
            let prof = if an.importance {
                let p = ImportanceProfile::new(ablation_forgetting(&base, &data.prior_test, l)?);
                if p.degenerate {
                    log::warn!("seed {seed}, layer {l}: no single-component ablation changes accuracy");
                }
                let imp: Vec<ImportanceRow> = (0..p.p.len())
                    .map(|i| ImportanceRow {
                        component_index: i,
                        raw_f: p.raw_f[i],
                        p: p.p[i],
                    })
                    .collect();
                write_csv(&adir.join(format!("importance_seed{seed}_layer{l}.csv")), &imp)?;
                p
            } else {
                ImportanceProfile::uniform(f0.k())
            };
            let x0 = base.layer_input(&probe_x, l)?;
            let fy = if feature { Some(svd(&x0.matmul(&w0)?)?) } else { None };

            for (&s, model) in starts.iter().zip(&tuned) {
                let w_ft = model.weight(l);
                let mut deltas = Vec::new();
                if an.param_space {
                    deltas.push(param_space_delta_with(&f0, &w_ft)?);
                }
                if let Some(fy) = &fy {
                    deltas.push(feature_space_delta_with(fy, &x0, &w_ft)?);
                }
                for delta in deltas {
                    let weights = if prof.p.len() == delta.k() {
                        prof.clone()
                    } else {
                        ImportanceProfile::uniform(delta.k())
                    };
                    let stem = format!("{}_s{s}_seed{seed}_layer{l}", delta.space.as_str());
                    let sum = write_report(
                        &adir.join(format!("{stem}.csv")),
                        Some(&adir.join(format!("{stem}.json"))),
                        &delta,
                        &weights,
                    )?;
                    rows.push(AnalysisRow {
                        s,
                        seed,
                        layer: l,
                        space: sum.space,
                        diag_sum: sum.diag_sum,
                        offdiag_sum: sum.offdiag_sum,
                        k: sum.k,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| (a.s, a.seed, a.layer, a.space.as_str()).cmp(&(b.s, b.seed, b.layer, b.space.as_str())));
    write_csv(&adir.join("summary.csv"), &rows)?;

    let mut groups: BTreeMap<(usize, &str), Vec<&AnalysisRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.s, r.space.as_str())).or_default().push(r);
    }
    let means: Vec<MeanRow> = groups
        .values()
        .map(|g| {
            let n = g.len() as f64;
            MeanRow {
                s: g[0].s,
                space: g[0].space,
                diag_sum_mean: g.iter().map(|r| r.diag_sum).sum::<f64>() / n,
                offdiag_sum_mean: g.iter().map(|r| r.offdiag_sum).sum::<f64>() / n,
                n: g.len(),
            }
        })
        .collect();
    write_json(&adir.join("summary.json"), &means)?;

    for space in [Space::Parameter, Space::Feature] {
        let pts: Vec<&MeanRow> = means.iter().filter(|m| m.space == space).collect();
        if pts.is_empty() {
            continue;
        }
        let series = [
            Series {
                name: "diagonal".into(),
                points: pts.iter().map(|m| (m.s as f64, m.diag_sum_mean, 0.0)).collect(),
            },
            Series {
                name: "off-diagonal".into(),
                points: pts.iter().map(|m| (m.s as f64, m.offdiag_sum_mean, 0.0)).collect(),
            },
        ];
        let svg = line_chart(
            &format!("Importance-weighted change ({} space)", space.as_str()),
            "slice start s",
            "weighted sum",
            &series,
        );
        write_atomic(&dir.join("plots").join(format!("weighted_sums_{}.svg", space.as_str())), svg.as_bytes())?;
    }
    Ok(rows)
}
