//! Named model variants for the ablation study, selectable at runtime.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::Prf;
use crate::network::ModelConfig;
use crate::pipeline::{evaluate_predictions, predict_pieces, PieceData};
use crate::training::{train, TrainSetup};

/// A modification of the model configuration that removes one stage.
pub trait Variant: Send + Sync {
    /// Identifier used on the command line and in configuration files.
    fn name(&self) -> &'static str;
    /// Row label in the ablation table.
    fn table_label(&self) -> &'static str;
    fn apply(&self, model: &mut ModelConfig);
}

struct Full;

impl Variant for Full {
    fn name(&self) -> &'static str {
        "full"
    }
    fn table_label(&self) -> &'static str {
        "full model"
    }
    fn apply(&self, _model: &mut ModelConfig) {}
}

/// A variant that switches off a set of toggles.
struct Without {
    name: &'static str,
    label: &'static str,
    disable: fn(&mut ModelConfig),
}

impl Variant for Without {
    fn name(&self) -> &'static str {
        self.name
    }
    fn table_label(&self) -> &'static str {
        self.label
    }
    fn apply(&self, model: &mut ModelConfig) {
        (self.disable)(model)
    }
}

/// Variants in registration order.
pub struct VariantRegistry {
    entries: Vec<Box<dyn Variant>>,
}

impl Default for VariantRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl VariantRegistry {
    pub fn empty() -> Self {
        VariantRegistry { entries: Vec::new() }
    }

    /// The full model followed by the six single-stage removals.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Full));
        let removals: [(&'static str, &'static str, fn(&mut ModelConfig)); 6] = [
            ("no_agg", "w/o feature aggregation", |m| m.toggles.use_agg = false),
            ("no_pe", "w/o single-cycle PE", |m| m.toggles.use_pe = false),
            ("no_dssm", "w/o DSSM statistics", |m| {
                m.toggles.use_dssm_sum = false;
                m.toggles.use_dssm_mean = false;
            }),
            ("no_lstm", "w/o LSTM", |m| m.toggles.use_lstm = false),
            ("no_dssm_sum", "w/o DSSM sum", |m| m.toggles.use_dssm_sum = false),
            ("no_dssm_mean", "w/o DSSM mean", |m| m.toggles.use_dssm_mean = false),
        ];
        for (name, label, disable) in removals {
            r.register(Box::new(Without { name, label, disable }));
        }
        r
    }

    /// Adds a variant; a name already present is replaced in place.
    pub fn register(&mut self, variant: Box<dyn Variant>) {
        match self.entries.iter().position(|v| v.name() == variant.name()) {
            Some(i) => self.entries[i] = variant,
            None => self.entries.push(variant),
        }
    }

    pub fn get(&self, name: &str) -> Result<&dyn Variant> {
        self.entries
            .iter()
            .find(|v| v.name() == name)
            .map(|v| v.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}; known: {}", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|v| v.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Variant> + '_ {
        self.entries.iter().map(|v| v.as_ref())
    }

    /// The ablation rows: every variant except the full model.
    pub fn ablations(&self) -> impl Iterator<Item = &dyn Variant> + '_ {
        self.iter().filter(|v| v.name() != "full")
    }

    /// `base` with the named variant applied.
    pub fn configure(&self, name: &str, base: &ModelConfig) -> Result<ModelConfig> {
        let mut model = base.clone();
        self.get(name)?.apply(&mut model);
        Ok(model)
    }
}

/// Held-out scores of one trained variant.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub best_epoch: usize,
    pub val_hr3f: f64,
    /// Macro average over the test pieces.
    pub test: Prf,
}

/// Trains and scores every registered variant with otherwise identical settings.
pub fn run_ablation(
    registry: &VariantRegistry,
    train_set: &[PieceData],
    val_set: &[PieceData],
    test_set: &[PieceData],
    setup: &TrainSetup<'_>,
    tolerance_s: f64,
) -> Result<Vec<AblationRow>> {
    registry
        .iter()
        .map(|v| {
            let mut model = setup.model.clone();
            v.apply(&mut model);
            log::info!("ablation: training {}", v.name());
            let out = train(
                train_set,
                val_set,
                &TrainSetup {
                    model: &model,
                    resume: None,
                    ..setup.clone()
                },
                |_| {},
            )?;
            let ck = &out.checkpoint;
            let preds = predict_pieces(test_set, &ck.params, &model, setup.post, setup.dsp)?;
            let report = evaluate_predictions(test_set, &preds, tolerance_s)?;
            Ok(AblationRow {
                variant: v.name().to_string(),
                label: v.table_label().to_string(),
                best_epoch: ck.epoch,
                val_hr3f: ck.best_val_hr3f,
                test: report.macro_avg,
            })
        })
        .collect()
}

/// Removal rows only, in registry order, as percentages.
pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tHR3P\tHR3R\tHR3F\n");
    for r in rows.iter().filter(|r| r.variant != "full") {
        out.push_str(&format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\n",
            r.label,
            100.0 * r.test.precision,
            100.0 * r.test.recall,
            100.0 * r.test.f
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_registry_order() {
        let r = VariantRegistry::standard();
        assert_eq!(
            r.names(),
            vec!["full", "no_agg", "no_pe", "no_dssm", "no_lstm", "no_dssm_sum", "no_dssm_mean"]
        );
        assert_eq!(r.ablations().count(), 6);
    }

    #[test]
    fn each_removal_changes_one_stage() {
        let r = VariantRegistry::standard();
        let base = ModelConfig::default();
        let widths: Vec<usize> = r
            .iter()
            .map(|v| r.configure(v.name(), &base).unwrap().feature_width())
            .collect();
        assert_eq!(widths, vec![434, 14, 432, 432, 434, 433, 433]);
        assert!(!r.configure("no_lstm", &base).unwrap().toggles.use_lstm);
        assert_eq!(r.configure("full", &base).unwrap(), base);
    }

    #[test]
    fn unknown_name_is_an_error() {
        assert!(VariantRegistry::standard().get("no_cnn").is_err());
    }

    #[test]
    fn register_replaces_by_name() {
        struct Quiet;
        impl Variant for Quiet {
            fn name(&self) -> &'static str {
                "no_pe"
            }
            fn table_label(&self) -> &'static str {
                "replaced"
            }
            fn apply(&self, _: &mut ModelConfig) {}
        }
        let mut r = VariantRegistry::standard();
        r.register(Box::new(Quiet));
        assert_eq!(r.names().len(), 7);
        assert_eq!(r.get("no_pe").unwrap().table_label(), "replaced");
    }
}
