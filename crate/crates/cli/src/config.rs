use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use crate::CliError;

/// Options shared by every command. Each may also come from a JSON config
/// file; flags win over the file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (one sub-directory per sequence).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tracker checkpoint file.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Attack name.
    #[arg(long)]
    pub name: Option<String>,
    /// L-infinity radius of the attack.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Attack step size.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Attack iterations per frame.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// rgb | voxel | frame | rgb+voxel | rgb+frame
    #[arg(long)]
    pub modality: Option<String>,
    /// far-quadrant or x,y,w,h in search-patch pixels.
    #[arg(long)]
    pub target: Option<String>,
    /// on | off | negated
    #[arg(long)]
    pub temporal: Option<String>,
    /// adv | track
    #[arg(long)]
    pub loss: Option<String>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
    /// Number of sequences to synthesize.
    #[arg(long)]
    pub n: Option<usize>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Runs to compare, e.g. `clean attacked` or `clean pgd-rgb`.
    #[arg(long, num_args = 1..)]
    pub compare: Option<Vec<String>>,
    /// Track with the ground truth instead of a checkpoint.
    #[arg(long)]
    #[serde(default)]
    pub oracle: bool,
}

impl RunConfig {
    /// Fills every option not given on the command line from `file`.
    pub fn merged_with(self, file: RunConfig) -> RunConfig {
        RunConfig {
            data: self.data.or(file.data),
            out: self.out.or(file.out),
            ckpt: self.ckpt.or(file.ckpt),
            name: self.name.or(file.name),
            eps: self.eps.or(file.eps),
            alpha: self.alpha.or(file.alpha),
            iters: self.iters.or(file.iters),
            seed: self.seed.or(file.seed),
            modality: self.modality.or(file.modality),
            target: self.target.or(file.target),
            temporal: self.temporal.or(file.temporal),
            loss: self.loss.or(file.loss),
            force: self.force || file.force,
            n: self.n.or(file.n),
            steps: self.steps.or(file.steps),
            compare: self.compare.or(file.compare),
            oracle: self.oracle || file.oracle,
        }
    }

    /// Makes every path absolute, relative to the working directory.
    pub fn resolved(mut self) -> Result<RunConfig, CliError> {
        let abs = |p: Option<PathBuf>| -> Result<Option<PathBuf>, CliError> {
            p.map(|p| std::path::absolute(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))))
                .transpose()
        };
        self.data = abs(self.data)?;
        self.out = abs(self.out)?;
        self.ckpt = abs(self.ckpt)?;
        Ok(self)
    }

    pub fn require_data(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::Usage("--data is required".into()))
    }

    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    pub fn require_ckpt(&self) -> Result<&Path, CliError> {
        self.ckpt.as_deref().ok_or_else(|| CliError::Usage("--ckpt is required".into()))
    }
}

pub fn load_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}
