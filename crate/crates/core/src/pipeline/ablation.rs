//! Region-count decompositions and the ablation harness over them.

use std::time::Duration;

use crate::diffusion::{Engine, RegionKey};
use crate::error::{Error, Result};
use crate::text::{PromptSpec, RegionLabel, RegionQuery, WordSpan};

use super::metrics::{toy_alignment_scores, ToyScores};
use super::{generate_multi, GenerationArtifacts, GenerationRequest};

/// Regions a character is split into for a given count:
///
/// | count | regions |
/// |-------|---------|
/// | 1 | whole image, unmasked |
/// | 2 | face, body (upper and lower words) |
/// | 3 | the annotated regions |
/// | 4 | face, upper, lower, body |
pub fn region_plan(spec: &PromptSpec, count: usize) -> Result<Vec<RegionQuery>> {
    let key = |label| RegionKey::new(spec.character, label);
    let span = |label| spec.region(label).map(|r| r.span);
    let all_spans: Vec<WordSpan> = spec.regions.iter().map(|r| r.span).collect();
    let need = |label: RegionLabel| {
        span(label).ok_or_else(|| Error::InvalidParameter(format!("a {count}-region plan needs a {label} sub-prompt for character {}", spec.character)))
    };
    let body = || -> Result<RegionQuery> {
        let spans: Vec<WordSpan> = [RegionLabel::Upper, RegionLabel::Lower].into_iter().filter_map(span).collect();
        if spans.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "a {count}-region plan needs an upper or lower sub-prompt for character {}",
                spec.character
            )));
        }
        Ok(RegionQuery { key: key(RegionLabel::Body), spans })
    };
    match count {
        1 => Ok(vec![RegionQuery {
            key: key(RegionLabel::Whole),
            spans: all_spans,
        }]),
        2 => Ok(vec![
            RegionQuery {
                key: key(RegionLabel::Face),
                spans: vec![need(RegionLabel::Face)?],
            },
            body()?,
        ]),
        3 => Ok(spec.queries()),
        4 => {
            let mut plan: Vec<RegionQuery> = [RegionLabel::Face, RegionLabel::Upper, RegionLabel::Lower]
                .into_iter()
                .map(|label| {
                    Ok(RegionQuery {
                        key: key(label),
                        spans: vec![need(label)?],
                    })
                })
                .collect::<Result<_>>()?;
            plan.push(body()?);
            Ok(plan)
        }
        other => Err(Error::InvalidParameter(format!("region count must be 1..=4, got {other}"))),
    }
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub regions: usize,
    pub keys: Vec<RegionKey>,
    pub scores: ToyScores,
    pub elapsed: Duration,
    pub artifacts: GenerationArtifacts,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn run(&self, regions: usize) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.regions == regions)
    }

    /// Tab-separated table, one line per run.
    pub fn to_table(&self) -> String {
        let mut out = String::from("regions\ttext_score\timage_score\tseconds\tkeys\n");
        for r in &self.runs {
            let keys: Vec<String> = r.keys.iter().map(|k| k.to_string()).collect();
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.3}\t{}\n",
                r.regions,
                r.scores.text_score,
                r.scores.image_score,
                r.elapsed.as_secs_f64(),
                keys.join(",")
            ));
        }
        out
    }
}

/// Reruns `request` once per region count; the request's own count is ignored.
pub fn ablate_regions(request: &GenerationRequest, engine: &Engine, counts: &[usize]) -> Result<AblationReport> {
    if counts.is_empty() {
        return Err(Error::InvalidParameter("no region counts given".into()));
    }
    if let Some(bad) = counts.iter().find(|c| !(1..=4).contains(*c)) {
        return Err(Error::InvalidParameter(format!("region count must be 1..=4, got {bad}")));
    }
    let mut runs = Vec::with_capacity(counts.len());
    for &regions in counts {
        let mut req = request.clone();
        req.params.regions = regions;
        let mut keys = Vec::new();
        for c in &req.characters {
            keys.extend(region_plan(&c.spec, regions)?.into_iter().map(|q| q.key));
        }
        keys.sort();
        let artifacts = generate_multi(&req, engine)?;
        let scores = toy_alignment_scores(&artifacts, &req, engine)?;
        runs.push(AblationRun {
            regions,
            keys,
            scores,
            elapsed: artifacts.timing.total,
            artifacts,
        });
    }
    Ok(AblationReport { runs })
}
