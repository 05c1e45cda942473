//! Run manifests: what was run, with which settings, and what it produced.
//!
//! Manifests carry no timestamps or absolute output locations, so repeating
//! a command reproduces them byte for byte.

use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::io::Written;

#[derive(Debug, Clone, Serialize)]
pub struct Input {
    pub role: &'static str,
    pub path: String,
    pub rows: usize,
    pub cols: usize,
}

impl Input {
    pub fn new(role: &'static str, path: &Path, m: &DMatrix<f64>) -> Self {
        Self {
            role,
            path: path.display().to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize, R: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub config: C,
    pub inputs: Vec<Input>,
    pub outputs: Vec<Written>,
    pub results: R,
}

impl<C: Serialize, R: Serialize> Manifest<C, R> {
    pub fn new(
        command: &'static str,
        config: C,
        inputs: Vec<Input>,
        outputs: Vec<Written>,
        results: R,
    ) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs,
            outputs,
            results,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
