//! Game documents shipped with the repository.
//!
//! Each document embeds its own property claims; [`builtin`] refuses to return
//! a game whose claims the oracle does not confirm.

use crate::env::GameSpec;
use crate::equilibria::validate_claims;
use crate::error::{Error, Result};

pub const BUILTIN: &[(&str, &str)] = &[
    ("penalty_k0", include_str!("../../../games/penalty_k0")),
    ("penalty_k-100", include_str!("../../../games/penalty_k-100")),
    ("penalty_k-1000", include_str!("../../../games/penalty_k-1000")),
    ("penalty_k-10000", include_str!("../../../games/penalty_k-10000")),
    ("mixing", include_str!("../../../games/mixing")),
    ("coordination", include_str!("../../../games/coordination")),
    ("cooperation", include_str!("../../../games/cooperation")),
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

/// Loads a game and checks its embedded claims.
pub fn load_checked(text: &str) -> Result<GameSpec> {
    let spec = GameSpec::load(text)?;
    if !spec.claims.is_empty() {
        let report = validate_claims(&spec, &spec.claims)?;
        if let Some(bad) = report.results.iter().find(|r| !r.passed) {
            return Err(Error::Validation(format!(
                "{}: claim {} failed ({})",
                spec.name, bad.claim, bad.witness
            )));
        }
    }
    Ok(spec)
}

/// A shipped game by name, claims verified.
pub fn builtin(name: &str) -> Result<GameSpec> {
    let (_, text) = BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no built-in game named {name:?}")))?;
    load_checked(text)
}

/// Resolves a path first, then a built-in name (optionally prefixed `games/`).
pub fn resolve(name_or_path: &str) -> Result<GameSpec> {
    let path = std::path::Path::new(name_or_path);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return load_checked(&text);
    }
    let name = name_or_path.strip_prefix("games/").unwrap_or(name_or_path);
    if BUILTIN.iter().any(|(n, _)| *n == name) {
        return builtin(name);
    }
    Err(Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::NotFound, "no such game document"),
    ))
}
