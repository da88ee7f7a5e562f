//! The patch x branch x neck variant grid on the synthetic task.

use tcleaf_core::config::{BranchScheme, ModelConfig, NeckMode, PatchMode};
use tcleaf_core::metrics::{Interpolation, MetricsReport};
use tcleaf_core::model::Detector;
use tcleaf_core::synth::AnnotatedImage;

use crate::train::{evaluate, train, EpochLog, TrainConfig, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub patch: PatchMode,
    pub branch: BranchScheme,
    pub neck: NeckMode,
}

impl Variant {
    pub fn tag(&self) -> String {
        format!("{}-{}-{}", self.patch.name(), self.branch.name(), self.neck.name())
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.backbone.patch_mode = self.patch;
        c.backbone.branch_scheme = self.branch;
        c.neck.mode = self.neck;
        c
    }
}

fn or_all<T: Copy>(v: &[T], all: &[T]) -> Vec<T> {
    if v.is_empty() { all.to_vec() } else { v.to_vec() }
}

/// Variants in grid order: patch slowest, neck fastest. Empty filters mean
/// "every value of that axis".
pub fn grid(patches: &[PatchMode], branches: &[BranchScheme], necks: &[NeckMode]) -> Vec<Variant> {
    let patches = or_all(patches, &PatchMode::ALL);
    let branches = or_all(branches, &BranchScheme::ALL);
    let necks = or_all(necks, &NeckMode::ALL);
    let mut out = Vec::new();
    for &patch in &patches {
        for &branch in &branches {
            for &neck in &necks {
                out.push(Variant { patch, branch, neck });
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub params: usize,
    pub log: Vec<EpochLog>,
    /// Validation report of the final weights, tagged with the variant.
    pub report: MetricsReport,
}

/// Trains every variant from the same seed on the same data.
pub fn run_grid(
    base: &ModelConfig,
    variants: &[Variant],
    train_set: &[AnnotatedImage],
    val_set: &[AnnotatedImage],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&VariantResult),
) -> Result<Vec<VariantResult>, TrainError> {
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let mc = v.apply(base);
        let (det, store) = Detector::new(&mc, cfg.seed)?;
        let params = store.iter().filter(|(_, _, t)| *t).map(|(_, t, _)| t.numel()).sum();
        let outcome = train(&det, store, train_set, val_set, cfg, |_| true)?;
        let report = evaluate(&det, &outcome.last, val_set, Interpolation::AllPoint, &v.tag())?;
        let r = VariantResult { variant: *v, params, log: outcome.log, report };
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_has_thirty_unique_variants() {
        let g = grid(&[], &[], &[]);
        assert_eq!(g.len(), 30);
        let mut tags: Vec<String> = g.iter().map(Variant::tag).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 30);
        assert_eq!(grid(&[PatchMode::Ssope3], &[], &[NeckMode::Dfpn]).len(), 3);
    }

    #[test]
    fn every_variant_is_a_valid_model() {
        for v in grid(&[], &[], &[]) {
            v.apply(&ModelConfig::toy()).validate().unwrap();
        }
    }
}
