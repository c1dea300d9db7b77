//! JSON state files: flattened radiosity per kernel plus solver metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SolveState, SolverKind};
use crate::error::{Error, Result};
use crate::sh::ColorSh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    solver: SolverKind,
    steps: usize,
    seed: u64,
    sh_degree: usize,
    residual: f64,
    radiosity: Vec<Vec<f64>>,
}

pub fn state_to_json(state: &SolveState) -> String {
    let file = StateFile {
        solver: state.solver,
        steps: state.steps,
        seed: state.seed,
        sh_degree: state.degree,
        residual: state.residual,
        radiosity: state.radiosity.iter().map(|b| b.as_slice().to_vec()).collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("state files always serialize");
    s.push('\n');
    s
}

pub fn state_from_json(text: &str, origin: &str) -> Result<SolveState> {
    let file: StateFile = serde_json::from_str(text).map_err(|e| Error::scene(origin, e.to_string()))?;
    let radiosity = file
        .radiosity
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            ColorSh::from_flat(file.sh_degree, v)
                .map_err(|e| Error::scene(format!("{origin}: radiosity[{i}]"), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if radiosity.iter().any(|b| !b.is_finite()) {
        return Err(Error::scene(origin, "radiosity must be finite"));
    }
    let mut state = SolveState::from_radiosity(file.sh_degree, radiosity, file.solver);
    state.steps = file.steps;
    state.seed = file.seed;
    state.residual = file.residual;
    Ok(state)
}

pub fn write_state(state: &SolveState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, state_to_json(state)).map_err(|e| Error::io(path, e))
}

pub fn read_state(path: impl AsRef<Path>) -> Result<SolveState> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    state_from_json(&text, &path.display().to_string())
}
