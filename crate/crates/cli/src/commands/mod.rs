pub mod correlate;
pub mod evaluate;
pub mod gradcam;
pub mod loss_check;
pub mod phantom;
pub mod uncertainty;

use std::path::Path;

use crate::{CliError, CliResult};

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError(format!("{}: {e}", dir.display())))
}

pub(crate) fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}
