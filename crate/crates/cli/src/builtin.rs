//! Builtin vector fields selectable by name.

use std::collections::BTreeMap;

use lcpm_core::cycle::CycleOptions;
use lcpm_core::models::{Hopf, ShearedHopf};
use lcpm_core::neuro::{NeuroModel, NeuroModelName, NeuroModelSpec};
use lcpm_core::sde::{ConstantDiffusion, Diffusion, VectorField};
use lcpm_core::Error;

pub struct Builtin {
    pub name: String,
    pub field: Box<dyn VectorField>,
    pub diffusion: Box<dyn Diffusion>,
    pub guess: Vec<f64>,
    pub options: CycleOptions,
    /// Step for stochastic runs, original time units.
    pub sde_dt: f64,
    pub neuro: Option<NeuroModel>,
}

pub const NAMES: &[&str] = &["hopf", "sheared_hopf", "inapik_burster", "beta_cell_pair", "hh_mmo"];

fn reject_params(params: &BTreeMap<String, f64>, allowed: &[&str]) -> Result<(), Error> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::UnknownParameter(k.clone())),
        None => Ok(()),
    }
}

pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<Builtin, Error> {
    match name {
        "hopf" => {
            reject_params(params, &[])?;
            Ok(Builtin {
                name: name.into(),
                field: Box::new(Hopf),
                diffusion: Box::new(ConstantDiffusion::identity(2)),
                guess: vec![1.5, 0.0],
                options: CycleOptions::default(),
                sde_dt: 1e-3,
                neuro: None,
            })
        }
        "sheared_hopf" => {
            reject_params(params, &["shear"])?;
            Ok(Builtin {
                name: name.into(),
                field: Box::new(ShearedHopf {
                    shear: params.get("shear").copied().unwrap_or(1.0),
                }),
                diffusion: Box::new(ConstantDiffusion::identity(2)),
                guess: vec![1.5, 0.0],
                options: CycleOptions::default(),
                sde_dt: 1e-3,
                neuro: None,
            })
        }
        other => {
            let model_name = NeuroModelName::parse(other)
                .map_err(|_| Error::UnknownModel(format!("{other} (known: {})", NAMES.join(", "))))?;
            let spec = NeuroModelSpec::with_overrides(model_name, params)?;
            let model = spec.build()?;
            Ok(Builtin {
                name: name.into(),
                field: Box::new(model.clone()),
                diffusion: Box::new(model.diffusion()),
                guess: model.default_guess(),
                options: model.cycle_options(),
                sde_dt: model.default_sde_dt(),
                neuro: Some(model),
            })
        }
    }
}
