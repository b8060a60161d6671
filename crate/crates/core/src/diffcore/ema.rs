use super::param::ParamSet;
use crate::error::{FlowsError, Result};

/// Exponential-moving-average shadow of a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: ParamSet,
    pub decay: f64,
}

impl EmaState {
    pub fn new(live: &ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(FlowsError::config("ema_decay", format!("{decay} is outside [0, 1)")));
        }
        Ok(EmaState {
            shadow: live.clone(),
            decay,
        })
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`, elementwise.
pub fn ema_update(live: &ParamSet, ema: &mut EmaState) -> Result<()> {
    ema.shadow.check_layout(live)?;
    let d = ema.decay;
    for (s, l) in ema.shadow.arrays.iter_mut().zip(&live.arrays) {
        for (sv, lv) in s.values.iter_mut().zip(&l.values) {
            *sv = d * *sv + (1.0 - d) * lv;
        }
    }
    Ok(())
}
